//! Executes a scenario: one job per (seed, grid, algorithm), run in parallel,
//! rows returned in job order.

use std::fmt::Write as _;

use anyhow::{bail, Result};
use rayon::prelude::*;
use wafermesh_core::collectives::Discipline;
use wafermesh_core::gemm::{dense_gemm_oracle, dist_gemm_t, GemmAlgorithm, GemmProblem};
use wafermesh_core::gemv::{dense_gemv_oracle, gemv, GemvOptions, GemvProblem};
use wafermesh_core::kv_cache::{KvMeshState, KvMode};
use wafermesh_core::llm::{
    autotune, generate, generate_distributed, plan_decode, plan_prefill, tuning_inputs, Deployment, IoLengths,
    ModelShape,
};
use wafermesh_core::{Error, GridShape, Matrix, SimReport};

use crate::report::{checksum_matrix, checksum_usizes, ReportRow, Verified};
use crate::scenario::{AutotuneParams, GemmParams, GemvParams, KvParams, LayerParams, Scenario, Workload};

/// Largest per-tensor error `max|a - b| / max|b|` accepted for layer runs.
pub const LAYER_TOLERANCE: f32 = 1e-4;

/// Extra file written next to the report, relative to the output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifact {
    pub file: String,
    pub contents: String,
}

#[derive(Debug, Default)]
pub struct RunOutput {
    pub rows: Vec<ReportRow>,
    pub artifacts: Vec<Artifact>,
}

impl RunOutput {
    pub fn failed(&self) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().filter(|r| r.verified == Verified::No)
    }
}

/// Errors that describe a workload the device cannot hold rather than a bug.
fn is_infeasible(e: &Error) -> bool {
    matches!(e, Error::Capacity { .. } | Error::KvCapacity(_) | Error::Infeasible(_))
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 { a } else { gcd(b, a % b) }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

fn verified(ok: bool) -> Verified {
    if ok { Verified::Yes } else { Verified::No }
}

type Job<'a> = Box<dyn Fn() -> Result<RunOutput> + Send + Sync + 'a>;

pub fn run(s: &Scenario) -> Result<RunOutput> {
    let mut jobs: Vec<Job> = Vec::new();
    match &s.workload {
        Workload::Gemm(p) => {
            let algs = parse_gemm_algorithms(&p.algorithms)?;
            for &seed in &s.seeds {
                for &grid in &p.grids {
                    for &alg in &algs {
                        jobs.push(Box::new(move || gemm_job(s, p, grid, alg, seed)));
                    }
                }
            }
        }
        Workload::Gemv(p) => {
            let algs = p.algorithms.iter().map(|a| parse_discipline(a)).collect::<Result<Vec<_>>>()?;
            for &seed in &s.seeds {
                for &grid in &p.grids {
                    for &alg in &algs {
                        jobs.push(Box::new(move || gemv_job(s, p, grid, alg, seed)));
                    }
                }
            }
        }
        Workload::Kvcache(p) => {
            for &seed in &s.seeds {
                for &mode in &p.modes {
                    jobs.push(Box::new(move || kv_job(s, p, mode, seed)));
                }
            }
        }
        Workload::Layer(p) => {
            jobs.push(Box::new(move || layer_plans(s, p)));
            for &seed in &s.seeds {
                jobs.push(Box::new(move || layer_job(s, p, seed)));
            }
        }
        Workload::Autotune(p) => {
            for &seed in &s.seeds {
                jobs.push(Box::new(move || autotune_job(s, p, seed)));
            }
        }
    }
    let results: Vec<Result<RunOutput>> = jobs.par_iter().map(|job| job()).collect();
    let mut out = RunOutput::default();
    for r in results {
        let r = r?;
        out.rows.extend(r.rows);
        out.artifacts.extend(r.artifacts);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GemmVariant {
    Algorithm(GemmAlgorithm),
    /// `A · (Bᵀ)ᵀ` through the transpose-free kernel.
    Transposed,
}

impl GemmVariant {
    fn name(self) -> &'static str {
        match self {
            GemmVariant::Algorithm(a) => a.name(),
            GemmVariant::Transposed => "gemm-t",
        }
    }
}

fn parse_gemm_algorithms(names: &[String]) -> Result<Vec<GemmVariant>> {
    names
        .iter()
        .map(|n| match n.to_ascii_lowercase().as_str() {
            "gemm-t" | "gemmt" | "dist-gemm-t" => Ok(GemmVariant::Transposed),
            _ => Ok(GemmVariant::Algorithm(n.parse()?)),
        })
        .collect()
}

/// `ktreeK`, `meshgemv` (K=2), `pipeline` or `ring`.
pub fn parse_discipline(name: &str) -> Result<Discipline> {
    let lower = name.to_ascii_lowercase();
    Ok(match lower.as_str() {
        "pipeline" => Discipline::Pipeline,
        "ring" => Discipline::Ring,
        "meshgemv" => Discipline::KTree { k: 2 },
        other => match other.strip_prefix("ktree").map(str::parse::<usize>) {
            Some(Ok(k)) if k >= 1 => Discipline::KTree { k },
            _ => bail!("unknown GEMV algorithm {name:?} (expected ktreeK, meshgemv, pipeline or ring)"),
        },
    })
}

fn gemm_job(s: &Scenario, p: &GemmParams, grid: GridShape, alg: GemmVariant, seed: u64) -> Result<RunOutput> {
    let side = lcm(grid.nx, grid.ny) * p.tile;
    let [m, k, n] = p.dims.unwrap_or([side; 3]);
    let dims = format!("{m}x{k}x{n}");
    let problem = GemmProblem::random_ints(m, k, n, seed);
    let cfg = s.fabric_for(grid);
    let result = match alg {
        GemmVariant::Algorithm(a) => a.run(&cfg, &problem),
        GemmVariant::Transposed => dist_gemm_t(&cfg, &problem.a, &problem.b.transpose()),
    };
    let row = match result {
        Ok(mut run) => {
            run.report.algorithm = alg.name().to_string();
            let want = dense_gemm_oracle(&problem.a, &problem.b)?;
            let mut row = ReportRow::from_report(&s.name, grid.to_string(), dims, seed, &run.report);
            row.checksum = checksum_matrix(&run.c);
            row.verified = verified(run.c == want);
            row
        }
        Err(e) if is_infeasible(&e) => ReportRow::infeasible(&s.name, alg.name(), grid.to_string(), dims, seed, &e.to_string()),
        Err(e) => return Err(e.into()),
    };
    Ok(RunOutput { rows: vec![row], artifacts: vec![] })
}

fn gemv_job(s: &Scenario, p: &GemvParams, grid: GridShape, alg: Discipline, seed: u64) -> Result<RunOutput> {
    let side = lcm(grid.nx, grid.ny) * p.tile;
    let [k, n] = p.dims.unwrap_or([side; 2]);
    let dims = format!("{k}x{n}");
    let problem = GemvProblem::random_ints(k, n, seed);
    let cfg = s.fabric_for(grid);
    let name = alg.to_string();
    let row = match gemv(&cfg, &problem, GemvOptions::with_discipline(alg)) {
        Ok(mut run) => {
            run.report.algorithm = name;
            let want = dense_gemv_oracle(&problem.a, &problem.b)?;
            let mut row = ReportRow::from_report(&s.name, grid.to_string(), dims, seed, &run.report);
            row.checksum = checksum_matrix(&run.c);
            row.verified = verified(run.c == want);
            row
        }
        Err(e) if is_infeasible(&e) => ReportRow::infeasible(&s.name, &name, grid.to_string(), dims, seed, &e.to_string()),
        Err(e) => return Err(e.into()),
    };
    Ok(RunOutput { rows: vec![row], artifacts: vec![] })
}

fn kv_token_count(p: &KvParams) -> Result<usize> {
    if let Some(t) = p.tokens {
        return Ok(t);
    }
    let mut fit = usize::MAX;
    for &mode in &p.modes {
        fit = fit.min(KvMeshState::new(p.grid.nx, p.grid.ny, p.capacity, p.chunk_bytes, mode)?.max_tokens());
    }
    Ok(fit)
}

fn kv_job(s: &Scenario, p: &KvParams, mode: KvMode, seed: u64) -> Result<RunOutput> {
    let cfg = s.fabric_for(p.grid);
    let tokens = kv_token_count(p)?;
    let mode_name = format!("{mode:?}").to_ascii_lowercase();
    let dims = format!("cap{}x{tokens}", p.capacity);
    let mut state = KvMeshState::new(p.grid.nx, p.grid.ny, p.capacity, p.chunk_bytes, mode)?;
    let mut report = SimReport::new(mode_name.clone());
    let mut trace = String::from("token,spread,moves,cycles,max_row_chunks\n");
    let mut spread_max = 0;
    for t in 0..tokens {
        let step = match state.append(&cfg) {
            Ok(step) => step,
            Err(e) if is_infeasible(&e) => {
                let why = format!("stopped after {t} tokens: {e}");
                let row = ReportRow::infeasible(&s.name, &mode_name, p.grid.to_string(), dims, seed, &why);
                return Ok(RunOutput { rows: vec![row], artifacts: vec![] });
            }
            Err(e) => return Err(e.into()),
        };
        let max_row = (0..state.height()).map(|y| state.row_tokens(y).len()).max().unwrap_or(0);
        writeln!(trace, "{t},{},{},{},{max_row}", state.spread(), state.last_moves().len(), step.total_cycles())?;
        spread_max = spread_max.max(state.spread());
        report.merge(&format!("t{t}"), step);
    }
    report.peak_mem_bytes = report.peak_mem_bytes.max(state.peak_bytes());

    let order = state.token_order();
    let mut sorted = order.clone();
    sorted.sort_unstable();
    let complete = sorted.iter().copied().eq(0..tokens);
    let balanced = mode == KvMode::Concat || spread_max <= 1;

    let mut row = ReportRow::from_report(&s.name, p.grid.to_string(), dims, seed, &report);
    row.checksum = checksum_usizes(&order);
    row.verified = verified(complete && balanced);
    row.note = format!("spread_max={spread_max} max_tokens={}", state.max_tokens());
    let stem = format!("{}_kv_{mode_name}_s{seed}", s.name);
    let artifacts = vec![
        Artifact { file: format!("{stem}_balance.csv"), contents: state.balance_csv() },
        Artifact { file: format!("{stem}_trace.csv"), contents: trace },
    ];
    Ok(RunOutput { rows: vec![row], artifacts })
}

fn shape_dims(m: &ModelShape) -> String {
    format!("E{}-H{}x{}-F{}-L{}-N{}", m.embed, m.heads, m.head_dim, m.ffn, m.seq_len, m.layers)
}

fn layer_plans(s: &Scenario, p: &LayerParams) -> Result<RunOutput> {
    let cfg = s.fabric_covering(&[p.prefill_grid, p.decode_grid]);
    let mut artifacts = Vec::new();
    for (phase, plan) in [
        ("prefill", plan_prefill(&cfg, &p.model, p.prefill_grid)),
        ("decode", plan_decode(&cfg, &p.model, p.decode_grid)),
    ] {
        let contents = match plan {
            Ok(plan) => plan.to_string(),
            Err(e) if is_infeasible(&e) => format!("infeasible: {e}\n"),
            Err(e) => return Err(e.into()),
        };
        artifacts.push(Artifact { file: format!("{}_plan_{phase}.txt", s.name), contents });
    }
    Ok(RunOutput { rows: vec![], artifacts })
}

/// `max|a - b| / max|b|` over a whole tensor.
fn tensor_error(a: &Matrix, b: &Matrix) -> f32 {
    let scale = b.data().iter().fold(0f32, |m, v| m.max(v.abs())).max(f32::MIN_POSITIVE);
    a.max_abs_diff(b) / scale
}

fn layer_job(s: &Scenario, p: &LayerParams, seed: u64) -> Result<RunOutput> {
    let cfg = s.fabric_covering(&[p.prefill_grid, p.decode_grid]);
    let io = IoLengths { input: p.model.seq_len, output: p.decode_steps + 1 };
    let (shape, weights, prompt) = tuning_inputs(&p.model, io, seed);
    let dims = shape_dims(&shape);
    let deployment = Deployment { prefill: p.prefill_grid, decode: p.decode_grid, kv_mode: p.kv_mode };
    let grids = format!("{}/{}", p.prefill_grid, p.decode_grid);
    let run = match generate_distributed(&cfg, &shape, &weights, &prompt, p.decode_steps, deployment) {
        Ok(run) => run,
        Err(e) if is_infeasible(&e) => {
            let row = ReportRow::infeasible(&s.name, "generate", grids, dims, seed, &e.to_string());
            return Ok(RunOutput { rows: vec![row], artifacts: vec![] });
        }
        Err(e) => return Err(e.into()),
    };
    let want = generate(&shape, &weights, &prompt, p.decode_steps)?;
    let got = &run.generation;
    let pairs = got
        .prefill_layers
        .iter()
        .zip(&want.prefill_layers)
        .chain(got.decode_layers.iter().flatten().zip(want.decode_layers.iter().flatten()))
        .chain(got.logits.iter().zip(&want.logits));
    let worst = pairs.map(|(a, b)| tensor_error(a, b)).fold(0f32, f32::max);
    let ok = got.tokens == want.tokens && worst <= LAYER_TOLERANCE;
    let checksum = checksum_usizes(&got.tokens);

    let phases = [
        ("prefill", p.prefill_grid.to_string(), &run.prefill),
        ("transition", grids.clone(), &run.transition),
        ("decode", p.decode_grid.to_string(), &run.decode),
    ];
    let rows = phases
        .into_iter()
        .map(|(name, grid, report)| {
            let mut row = ReportRow::from_report(&s.name, grid, dims.clone(), seed, report);
            row.algorithm = name.to_string();
            row.checksum = checksum.clone();
            row.verified = verified(ok);
            row
        })
        .chain(std::iter::once({
            let mut total = ReportRow::from_report(&s.name, grids, dims.clone(), seed, &SimReport::new("total"));
            total.total_cycles = run.latency();
            total.peak_mem_bytes = [&run.prefill, &run.transition, &run.decode].iter().map(|r| r.peak_mem_bytes).max().unwrap_or(0);
            total.checksum = checksum.clone();
            total.verified = verified(ok);
            total.note = format!("tokens={:?} max_err={worst:.3e} kv_spread_max={}", got.tokens, run.kv_spread_max);
            total
        }))
        .collect();
    Ok(RunOutput { rows, artifacts: vec![] })
}

fn autotune_job(s: &Scenario, p: &AutotuneParams, seed: u64) -> Result<RunOutput> {
    let cfg = s.fabric_covering(&p.grids);
    let io = IoLengths { input: p.input, output: p.output };
    let dims = shape_dims(&ModelShape { seq_len: p.input, ..p.model });
    let report = match autotune(&cfg, &p.model, io, &p.grids, seed) {
        Ok(r) => r,
        Err(e) if is_infeasible(&e) => {
            let row = ReportRow::infeasible(&s.name, "autotune", "-".into(), dims, seed, &e.to_string());
            return Ok(RunOutput { rows: vec![row], artifacts: vec![] });
        }
        Err(e) => return Err(e.into()),
    };
    let best = report.candidates.iter().filter_map(|c| c.outcome.as_ref().ok()).min().copied();
    let rows = report
        .candidates
        .iter()
        .map(|c| {
            let grid = format!("{}/{}", c.prefill, c.decode);
            match &c.outcome {
                Ok(cycles) => {
                    let mut row = ReportRow::from_report(&s.name, grid, dims.clone(), seed, &SimReport::new("autotune"));
                    row.total_cycles = *cycles;
                    if (c.prefill, c.decode) == (report.prefill, report.decode) {
                        row.verified = verified(best == Some(report.latency));
                        row.note = "selected".into();
                    }
                    row
                }
                Err(why) => ReportRow::infeasible(&s.name, "autotune", grid, dims.clone(), seed, why),
            }
        })
        .collect();
    let artifacts = vec![Artifact { file: format!("{}_autotune_s{seed}.txt", s.name), contents: report.to_string() }];
    Ok(RunOutput { rows, artifacts })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemv_names() {
        assert_eq!(parse_discipline("ktree3").unwrap(), Discipline::KTree { k: 3 });
        assert_eq!(parse_discipline("Ring").unwrap(), Discipline::Ring);
        assert_eq!(parse_discipline("meshgemv").unwrap(), Discipline::KTree { k: 2 });
        assert!(parse_discipline("ktree0").is_err());
        assert!(parse_discipline("tree").is_err());
    }

    #[test]
    fn lcm_of_grid_sides() {
        assert_eq!(lcm(4, 6), 12);
        assert_eq!(lcm(5, 5), 5);
    }
}
