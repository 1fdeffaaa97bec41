use proptest::prelude::*;
use wafermesh_core::collectives::Discipline;
use wafermesh_core::gemm::{dense_gemm_oracle, dist_gemm_t, GemmAlgorithm, GemmProblem};
use wafermesh_core::gemv::{dense_gemv_oracle, gemv, GemvOptions, GemvProblem, Orientation};
use wafermesh_core::kv_cache::{KvMeshState, KvMode};
use wafermesh_core::llm::{generate, generate_distributed, Deployment, ModelShape, ModelWeights};
use wafermesh_core::{GridShape, PlmrConfig};

fn disciplines() -> impl Strategy<Value = Discipline> {
    prop_oneof![
        Just(Discipline::Pipeline),
        Just(Discipline::Ring),
        (1usize..4).prop_map(|k| Discipline::KTree { k }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gemm_variants_equal_oracle(n in 1usize..7, tile in 1usize..4, seed in any::<u64>()) {
        let side = n * tile;
        let cfg = PlmrConfig::with_grid(n, n);
        let p = GemmProblem::random_ints(side, side, side, seed);
        let want = dense_gemm_oracle(&p.a, &p.b).unwrap();
        for alg in GemmAlgorithm::ALL {
            prop_assert!(alg.run(&cfg, &p).unwrap().c == want, "{}", alg.name());
        }
        prop_assert!(dist_gemm_t(&cfg, &p.a, &p.b.transpose()).unwrap().c == want);
    }

    #[test]
    fn nonsquare_meshgemm_equals_oracle(nx in 1usize..5, ny in 1usize..5, seed in any::<u64>()) {
        let side = nx * ny * 2;
        let cfg = PlmrConfig::with_grid(nx, ny);
        let p = GemmProblem::random_ints(side, side, side, seed);
        let got = GemmAlgorithm::Mesh.run(&cfg, &p).unwrap();
        prop_assert!(got.c == dense_gemm_oracle(&p.a, &p.b).unwrap());
    }

    #[test]
    fn gemv_disciplines_equal_oracle(
        nx in 1usize..9,
        ny in 1usize..9,
        k in 1usize..40,
        n in 1usize..40,
        d in disciplines(),
        reduce_x in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let cfg = PlmrConfig::with_grid(nx, ny);
        let p = GemvProblem::random_ints(k, n, seed);
        let orientation = if reduce_x { Orientation::ReduceX } else { Orientation::ReduceY };
        let run = gemv(&cfg, &p, GemvOptions::with_discipline(d).oriented(orientation)).unwrap();
        prop_assert!(run.c == dense_gemv_oracle(&p.a, &p.b).unwrap());
    }

    #[test]
    fn shift_cache_stays_balanced(w in 1usize..6, h in 1usize..9, cap in 1usize..6, preload in 0usize..20, extra in 0usize..40) {
        let cfg = PlmrConfig::with_grid(w, h);
        let mut kv = KvMeshState::new(w, h, cap, 16, KvMode::Shift).unwrap();
        let preload = preload.min(kv.max_tokens());
        kv.preload(preload).unwrap();
        prop_assert!(kv.spread() <= 1);
        for _ in 0..extra.min(kv.max_tokens() - preload) {
            kv.append(&cfg).unwrap();
            prop_assert!(kv.spread() <= 1);
        }
        let mut order = kv.token_order();
        order.sort_unstable();
        prop_assert!(order.into_iter().eq(0..kv.tokens()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn distributed_generation_matches_reference(seed in any::<u64>(), p in 1usize..4, d in 1usize..4) {
        let shape = ModelShape { embed: 16, heads: 2, head_dim: 8, ffn: 32, seq_len: 8, layers: 1, vocab: 32, batch: 1 };
        let weights = ModelWeights::random(&shape, seed);
        let prompt: Vec<usize> = (0..shape.seq_len).map(|i| (seed as usize).wrapping_add(i * 7) % shape.vocab).collect();
        let grids = [GridShape::square(1), GridShape::square(2), GridShape::square(4)];
        let cfg = PlmrConfig::with_grid(4, 4);
        let want = generate(&shape, &weights, &prompt, 3).unwrap();
        let got = generate_distributed(&cfg, &shape, &weights, &prompt, 3, Deployment::new(grids[p - 1], grids[d - 1]));
        match got {
            Ok(run) => prop_assert_eq!(run.generation.tokens, want.tokens),
            Err(e) => prop_assert!(matches!(e, wafermesh_core::Error::Capacity { .. } | wafermesh_core::Error::KvCapacity(_)), "{e}"),
        }
    }
}

#[test]
fn prefill_cost_falls_with_more_cores() {
    let shape = ModelShape::toy();
    let weights = ModelWeights::random(&shape, 7);
    let prompt: Vec<usize> = (0..shape.seq_len).map(|i| i * 3 % shape.vocab).collect();
    let cfg = PlmrConfig::with_grid(8, 8);
    let cycles: Vec<u64> = [2, 4, 8]
        .map(|n| {
            let g = GridShape::square(n);
            generate_distributed(&cfg, &shape, &weights, &prompt, 0, Deployment::new(g, g)).unwrap().prefill.total_cycles()
        })
        .to_vec();
    assert!(cycles.windows(2).all(|w| w[1] < w[0]), "{cycles:?}");
}
