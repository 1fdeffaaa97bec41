//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wafermesh_core::collectives::{build_ring, interleave, Discipline};
use wafermesh_core::gemm::{
    allgather_gemm, cannon_gemm, dense_gemm_oracle, dist_gemm_t, mesh_gemm, summa_gemm, GemmProblem,
};
use wafermesh_core::gemv::{gemv, dense_gemv_oracle, GemvOptions, GemvProblem};
use wafermesh_core::kv_cache::{kv_capacity_ratio, KvMeshState, KvMode};
use wafermesh_core::llm::autotune::{autotune_with, deployment_latency};
use wafermesh_core::llm::plan::{plan_decode, plan_prefill, OpKind, Phase};
use wafermesh_core::llm::{autotune, generate, generate_distributed, Deployment, IoLengths, ModelShape, ModelWeights};
use wafermesh_core::{GridShape, PlmrConfig};

type Outcome = Result<(), String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Outcome {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn square(n: usize) -> PlmrConfig {
    PlmrConfig::with_grid(n, n)
}

fn interleave_rings() -> Outcome {
    for n in 3..=256 {
        let ring = build_ring(n).map_err(|e| e.to_string())?;
        ensure(ring.is_single_cycle(), || format!("N={n}: not a single cycle"))?;
        ensure(ring.max_distance() <= 2, || format!("N={n}: send distance {}", ring.max_distance()))?;
    }
    ensure(interleave(2, 5).map_err(|e| e.to_string())? == (4, 0), || "(2, 5) does not map to (4, 0)".into())
}

fn gemm_oracles() -> Outcome {
    for n in [1, 2, 3, 4, 5, 8] {
        for seed in 0..10 {
            let (m, k, w) = (2 * n + 1, 3 * n, 2 * n);
            let p = GemmProblem::random_ints(m, k, w, seed);
            let want = dense_gemm_oracle(&p.a, &p.b).map_err(|e| e.to_string())?;
            let cfg = square(n);
            for (name, run) in [
                ("meshgemm", mesh_gemm(&cfg, &p)),
                ("cannon", cannon_gemm(&cfg, &p)),
                ("summa", summa_gemm(&cfg, &p)),
                ("allgather", allgather_gemm(&cfg, &p)),
            ] {
                let c = run.map_err(|e| format!("{name} n={n}: {e}"))?.c;
                ensure(c == want, || format!("{name} differs at n={n} seed={seed}"))?;
            }
            let bt = GemmProblem::random_ints(w, k, 1, seed + 100).a;
            let want_t = dense_gemm_oracle(&p.a, &bt.transpose()).map_err(|e| e.to_string())?;
            let got = dist_gemm_t(&cfg, &p.a, &bt).map_err(|e| e.to_string())?.c;
            ensure(got == want_t, || format!("dist-gemm-t differs at n={n} seed={seed}"))?;
        }
    }
    Ok(())
}

fn critical_path_flatness() -> Outcome {
    for n in 3..=64usize {
        let cfg = square(n);
        let (a, b) = (cfg.alpha, cfg.beta);
        let p = GemmProblem::random_ints(n, n, n, n as u64);
        let mesh = mesh_gemm(&cfg, &p).map_err(|e| e.to_string())?;
        ensure(mesh.loop_steps().count() == n, || format!("meshgemm n={n}: wrong step count"))?;
        ensure(mesh.loop_steps().all(|s| s.comm.latency_cycles == 2 * a), || format!("meshgemm n={n}: step latency not 2a"))?;
        let cannon = cannon_gemm(&cfg, &p).map_err(|e| e.to_string())?;
        let want = a * (n as u64 - 1);
        ensure(cannon.loop_steps().all(|s| s.comm.latency_cycles == want), || format!("cannon n={n}: step latency not a(n-1)"))?;
        let summa = summa_gemm(&cfg, &p).map_err(|e| e.to_string())?;
        let want = (a + b) * (n as u64 - 1);
        let worst = summa.loop_steps().map(|s| s.comm.latency_cycles).max().unwrap_or(0);
        ensure(worst == want, || format!("summa n={n}: critical step {worst}, expected {want}"))?;
        ensure(summa.loop_steps().all(|s| s.comm.latency_cycles <= want), || format!("summa n={n}: step above (a+b)(n-1)"))?;
    }
    Ok(())
}

fn routing_budget() -> Outcome {
    for n in [2, 4, 8, 16, 31, 32, 33, 48, 64] {
        let cfg = square(n);
        let p = GemmProblem::random_ints(n, n, n, 7);
        let want = dense_gemm_oracle(&p.a, &p.b).map_err(|e| e.to_string())?;
        for (name, run) in [("meshgemm", mesh_gemm(&cfg, &p)), ("cannon", cannon_gemm(&cfg, &p))] {
            let r = run.map_err(|e| e.to_string())?.report;
            ensure(r.max_paths_per_core <= 32 && !r.routing_violation(), || {
                format!("{name} n={n}: {} paths per core", r.max_paths_per_core)
            })?;
        }
        for k in 1..=3 {
            let gp = GemvProblem::random_ints(n, n, 3);
            let r = gemv(&cfg, &gp, GemvOptions::ktree(k)).map_err(|e| e.to_string())?.report;
            ensure(r.max_paths_per_core <= 32, || format!("meshgemv K={k} n={n}: {} paths", r.max_paths_per_core))?;
        }
        for (name, run) in [("summa", summa_gemm(&cfg, &p)), ("allgather", allgather_gemm(&cfg, &p))] {
            let run = run.map_err(|e| e.to_string())?;
            ensure(run.c == want, || format!("{name} n={n}: wrong product"))?;
            ensure(run.report.routing_violation() == (n > 32), || {
                format!("{name} n={n}: routing flag {}", run.report.routing_violation())
            })?;
        }
    }
    Ok(())
}

fn gemv_ordering() -> Outcome {
    for n in [16usize, 20, 25, 32, 48, 64] {
        let cfg = square(n);
        let (a, b) = (cfg.alpha, cfg.beta);
        let p = GemvProblem::random_ints(2 * n, n, n as u64);
        let want = dense_gemv_oracle(&p.a, &p.b).map_err(|e| e.to_string())?;
        let run = |d: Discipline| gemv(&cfg, &p, GemvOptions::with_discipline(d)).map_err(|e| e.to_string());
        let tree = run(Discipline::KTree { k: 2 })?;
        let pipe = run(Discipline::Pipeline)?;
        let ring = run(Discipline::Ring)?;
        for (name, r) in [("ktree", &tree), ("pipeline", &pipe), ("ring", &ring)] {
            ensure(r.c == want, || format!("{name} n={n}: wrong sum"))?;
        }
        let nn = n as u64;
        let t = tree.report.comm_cycles();
        ensure(t < pipe.report.comm_cycles() && t < 2 * nn * a + nn * b, || format!("n={n}: ktree {t} not below pipeline"))?;
        ensure(t < ring.report.comm_cycles() && t < (2 * a + b) * nn, || format!("n={n}: ktree {t} not below ring"))?;
        let bound = (n as f64).sqrt().ceil() as u64;
        ensure(tree.report.routing_stages_total() <= bound, || {
            format!("n={n}: ktree uses {} stages, bound {bound}", tree.report.routing_stages_total())
        })?;
        ensure(pipe.report.routing_stages_total() == nn - 1, || format!("n={n}: pipeline stages"))?;
    }
    Ok(())
}

fn kv_balance() -> Outcome {
    let cfg = square(16);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for round in 0..3 {
        let capacity = rng.gen_range(625..700);
        let mut s = KvMeshState::new(16, 16, capacity, 64, KvMode::Shift).map_err(|e| e.to_string())?;
        let start = rng.gen_range(0..2000);
        s.preload(start).map_err(|e| e.to_string())?;
        for i in 0..10_000 - start {
            s.append(&cfg).map_err(|e| e.to_string())?;
            ensure(s.spread() <= 1, || format!("round {round}: spread {} after insertion {i}", s.spread()))?;
        }
        let concat = KvMeshState::new(16, 16, capacity, 64, KvMode::Concat).map_err(|e| e.to_string())?;
        ensure(s.max_tokens() == 16 * concat.max_tokens(), || "shift capacity is not 16x concat".into())?;
        let ratio = kv_capacity_ratio(16, 16, capacity).map_err(|e| e.to_string())?;
        ensure(ratio == 16.0, || format!("capacity ratio {ratio}"))?;
    }
    Ok(())
}

fn transpose_free_plans() -> Outcome {
    let cfg = square(8);
    let shapes = [
        ModelShape::toy(),
        ModelShape { embed: 16, heads: 2, head_dim: 8, ffn: 32, seq_len: 8, ..ModelShape::toy() },
    ];
    let grids = [GridShape::square(1), GridShape::square(2), GridShape::new(4, 2), GridShape::square(4), GridShape::square(8)];
    for shape in &shapes {
        for &grid in &grids {
            let pre = plan_prefill(&cfg, shape, grid).map_err(|e| e.to_string())?;
            let dec = plan_decode(&cfg, shape, grid).map_err(|e| e.to_string())?;
            for plan in [&pre, &dec] {
                ensure(plan.transpose_count() == 0, || format!("{} plan on {grid} transposes", plan.phase))?;
            }
            ensure(pre.op("scores").map(|o| &o.kind) == Some(&OpKind::GemmT), || "prefill scores are not dist-GEMM-T".into())?;
            ensure(pre.ops.iter().all(|o| !matches!(o.kind, OpKind::Gemv { .. })), || "prefill uses GEMV".into())?;
            ensure(dec.phase == Phase::Decode && dec.ops.iter().all(|o| !matches!(o.kind, OpKind::Gemm | OpKind::GemmT)), || {
                "decode uses GEMM".into()
            })?;
            for (t, l) in [("W_O", "H_xE_y"), ("W_out", "F_xE_y"), ("W_Q", "E_yH_x"), ("X", "BE_yL^x")] {
                let got = dec.layout(t).map_err(|e| e.to_string())?.to_string();
                ensure(got == l, || format!("decode {t} placed as {got}, expected {l}"))?;
            }
        }
    }
    Ok(())
}

fn end_to_end() -> Outcome {
    let shape = ModelShape::toy();
    let weights = ModelWeights::random(&shape, 2024);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let prompt: Vec<usize> = (0..shape.seq_len).map(|_| rng.gen_range(0..shape.vocab)).collect();
    let want = generate(&shape, &weights, &prompt, 16).map_err(|e| e.to_string())?;
    let got = generate_distributed(
        &square(4),
        &shape,
        &weights,
        &prompt,
        16,
        Deployment::new(GridShape::square(4), GridShape::square(4)),
    )
    .map_err(|e| e.to_string())?;
    let g = &got.generation;
    ensure(g.tokens == want.tokens, || format!("tokens {:?} vs reference {:?}", g.tokens, want.tokens))?;
    let pairs = g
        .prefill_layers
        .iter()
        .zip(&want.prefill_layers)
        .chain(g.logits.iter().zip(&want.logits))
        .chain(g.decode_layers.iter().flatten().zip(want.decode_layers.iter().flatten()));
    let (mut tensor_err, mut entry_err) = (0.0f32, 0.0f32);
    for (a, b) in pairs {
        let scale = b.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        tensor_err = tensor_err.max(a.max_abs_diff(b) / scale);
        entry_err = entry_err.max(a.max_rel_diff(b, scale * 1e-3));
    }
    println!("    relative error per activation tensor {tensor_err:e}, per entry {entry_err:e}");
    ensure(tensor_err <= 1e-4, || format!("relative activation error {tensor_err:e}"))?;
    ensure(got.kv_spread_max <= 1, || "KV spread exceeded one chunk".into())
}

fn speed_ordering() -> Outcome {
    for n in [8usize, 16, 32] {
        let cfg = square(n);
        let p = GemmProblem::random_ints(n, n, n, 1);
        let total = |r: wafermesh_core::Result<wafermesh_core::gemm::GemmRun>| r.map(|r| r.report.total_cycles()).map_err(|e| e.to_string());
        let (m, c, s) = (total(mesh_gemm(&cfg, &p))?, total(cannon_gemm(&cfg, &p))?, total(summa_gemm(&cfg, &p))?);
        ensure(m < c && c < s, || format!("n={n}: meshgemm {m}, cannon {c}, summa {s}"))?;
    }
    Ok(())
}

fn autotune_soundness() -> Outcome {
    let cfg = square(8);
    let grids = [GridShape::square(2), GridShape::square(4), GridShape::square(8)];
    let io = IoLengths { input: 8, output: 4 };
    let shapes = [
        ModelShape::toy(),
        ModelShape { embed: 16, heads: 2, head_dim: 8, ffn: 32, layers: 1, ..ModelShape::toy() },
        ModelShape { embed: 64, heads: 8, head_dim: 8, ffn: 128, layers: 1, vocab: 32, ..ModelShape::toy() },
    ];
    for shape in &shapes {
        let chosen = autotune(&cfg, shape, io, &grids, 5).map_err(|e| e.to_string())?;
        let mut best: Option<(u64, usize, usize, GridShape, GridShape)> = None;
        for &p in &grids {
            for &d in &grids {
                if let Ok(lat) = deployment_latency(&cfg, shape, io, 5, p, d) {
                    let cand = (lat, p.cores(), d.cores(), p, d);
                    if best.is_none_or(|b| (cand.0, cand.1, cand.2) < (b.0, b.1, b.2)) {
                        best = Some(cand);
                    }
                }
            }
        }
        let (lat, _, _, p, d) = best.ok_or("sweep found no feasible pair")?;
        ensure((chosen.prefill, chosen.decode, chosen.latency) == (p, d, lat), || {
            format!("autotune picked {}/{} at {}, sweep {p}/{d} at {lat}", chosen.prefill, chosen.decode, chosen.latency)
        })?;
        println!(
            "    E={}: prefill {} decode {} ({} cycles), decode grid not larger: {}",
            shape.embed,
            chosen.prefill,
            chosen.decode,
            chosen.latency,
            chosen.decode_not_larger()
        );
    }
    let dup = [GridShape::square(4), GridShape::new(2, 4), GridShape::new(4, 2), GridShape::square(2)];
    for _ in 0..5 {
        let r = autotune_with(&dup, |p, d| Ok(if p.cores() == 8 && d.cores() == 8 { 40 } else { 50 }))
            .map_err(|e| e.to_string())?;
        ensure((r.prefill, r.decode) == (GridShape::new(4, 2), GridShape::new(4, 2)), || {
            format!("tie broken towards {}/{}", r.prefill, r.decode)
        })?;
    }
    Ok(())
}

type Criterion = (&'static str, fn() -> Outcome, Duration);

fn main() {
    let criteria: [Criterion; 10] = [
        ("interleave ring correctness", interleave_rings, Duration::from_secs(1)),
        ("GEMM oracle equivalence", gemm_oracles, Duration::from_secs(30)),
        ("critical-path flatness", critical_path_flatness, Duration::from_secs(10)),
        ("routing-budget compliance", routing_budget, Duration::MAX),
        ("GEMV cost ordering", gemv_ordering, Duration::MAX),
        ("KV cache balance and capacity", kv_balance, Duration::MAX),
        ("transpose-free plans", transpose_free_plans, Duration::MAX),
        ("end-to-end layer equivalence", end_to_end, Duration::from_secs(60)),
        ("comparative speed ordering", speed_ordering, Duration::MAX),
        ("autotune soundness", autotune_soundness, Duration::MAX),
    ];
    let mut failed = 0;
    for (i, (name, check, limit)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let outcome = outcome.and_then(|()| ensure(elapsed <= limit, || format!("took {elapsed:.2?}, limit {limit:?}")));
        match outcome {
            Ok(()) => println!("criterion {:>2} {name}: PASS ({elapsed:.2?})", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({why})", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
