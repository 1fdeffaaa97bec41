//! Whole-model greedy generation on the mesh: prefill on one grid, switch
//! to the decode grid, then one token per decode step.

use super::exec::{execute_layer, rmsnorm_dist, Mesh, STATS_ALLREDUCE};
use super::plan::{grid_config, plan_decode, plan_prefill, LayerPlan};
use super::reference::{argmax, DenseKv, Generation};
use super::shape::ModelShape;
use super::transition::{place_model, transition};
use super::weights::ModelWeights;
use crate::error::{Error, Result};
use crate::fabric::{Axis, PlmrConfig, StepCost};
use crate::gemm::{mesh_gemm, GemmProblem};
use crate::gemv::{gemv, GemvOptions, GemvProblem, Orientation};
use crate::kv_cache::{KvMeshState, KvMode};
use crate::report::{SimReport, StepRecord};
use crate::tiles::{GridShape, Matrix};

#[derive(Debug, Clone)]
pub struct ModelRun {
    pub generation: Generation,
    pub prefill: SimReport,
    pub transition: SimReport,
    /// All decode steps, labelled `t{step}/...`.
    pub decode: SimReport,
    /// Largest KV spread seen after any decode step.
    pub kv_spread_max: usize,
    pub kv: KvMeshState,
}

impl ModelRun {
    /// Simulated cycles from the first prompt token to the last generated token.
    pub fn latency(&self) -> u64 {
        self.prefill.total_cycles() + self.transition.total_cycles() + self.decode.total_cycles()
    }
}

fn one_hot(tokens: &[usize], vocab: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(tokens.len(), vocab);
    for (i, &t) in tokens.iter().enumerate() {
        if t >= vocab {
            return Err(Error::Domain(format!("token {t} outside vocabulary of {vocab}")));
        }
        m.set(i, t, 1.0);
    }
    Ok(m)
}

/// Prefill grid, decode grid and KV mode of one generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Deployment {
    pub prefill: GridShape,
    pub decode: GridShape,
    pub kv_mode: KvMode,
}

impl Deployment {
    pub fn new(prefill: GridShape, decode: GridShape) -> Self {
        Self { prefill, decode, kv_mode: KvMode::Shift }
    }
}

/// Greedy generation of `decode_steps + 1` tokens after `prompt`, whose
/// length must equal the model's sequence length.
pub fn generate_distributed(
    config: &PlmrConfig,
    shape: &ModelShape,
    weights: &ModelWeights,
    prompt: &[usize],
    decode_steps: usize,
    deployment: Deployment,
) -> Result<ModelRun> {
    if prompt.len() != shape.seq_len {
        return Err(Error::Shape(format!("prompt has {} tokens, plans assume {}", prompt.len(), shape.seq_len)));
    }
    let pplan = plan_prefill(config, shape, deployment.prefill)?;
    let dplan = plan_decode(config, shape, deployment.decode)?;
    place_model(config, &pplan, weights)?;

    let mut caches: Vec<DenseKv> = (0..shape.layers).map(|_| DenseKv::new(shape)).collect();
    let (mut prefill, last_logits, prefill_layers) = run_prefill(config, &pplan, weights, prompt, &mut caches)?;
    prefill.note(format!("weights seed {}", weights.seed));

    let switch = transition(config, &pplan, &dplan, weights, &caches, deployment.kv_mode)?;
    let mut kv = switch.kv;
    let mut out = Generation { prefill_layers, logits: vec![], decode_layers: vec![], tokens: vec![] };
    out.tokens.push(argmax(last_logits.row(0)));
    out.logits.push(last_logits);

    let mut decode = SimReport::new("decode");
    decode.peak_mem_bytes = switch.report.peak_mem_bytes;
    let mut kv_spread_max = kv.spread();
    for step in 0..decode_steps {
        let token = *out.tokens.last().expect("prefill emits a token");
        let (r, layers, logits) = decode_step(config, &dplan, weights, token, &mut caches, &mut kv)?;
        decode.merge(&format!("t{step}"), r);
        kv_spread_max = kv_spread_max.max(kv.spread());
        out.tokens.push(argmax(logits.row(0)));
        out.logits.push(logits);
        out.decode_layers.push(layers);
    }
    decode.peak_mem_bytes = decode.peak_mem_bytes.max(switch.placement.peak_bytes() + kv.peak_bytes());
    Ok(ModelRun { generation: out, prefill, transition: switch.report, decode, kv_spread_max, kv })
}

fn run_prefill(
    config: &PlmrConfig,
    plan: &LayerPlan,
    weights: &ModelWeights,
    prompt: &[usize],
    caches: &mut [DenseKv],
) -> Result<(SimReport, Matrix, Vec<Matrix>)> {
    let shape = &plan.shape;
    let mesh = Mesh::new(config, plan);
    let mut report = SimReport::new("prefill");
    let embed = mesh_gemm(&mesh.config, &GemmProblem::new(one_hot(prompt, shape.vocab)?, weights.embedding.clone())?)?;
    report.merge("embed", embed.report);
    let mut x = embed.c;
    let mut layers = Vec::with_capacity(shape.layers);
    for (l, (lw, cache)) in weights.layers.iter().zip(caches.iter_mut()).enumerate() {
        let run = execute_layer(config, plan, lw, &x, cache, None)?;
        report.merge(&format!("layer{l}"), run.report);
        x = run.output;
        layers.push(x.clone());
    }

    // only the last position feeds the LM head; its row is broadcast down the grid
    let last = x.block(x.rows() - 1, 0, 1, x.cols());
    let mut head = SimReport::new("lm_head");
    let row_mesh = Mesh { config: grid_config(config, GridShape::new(mesh.nx, 1)), nx: mesh.nx, ny: 1 };
    let normed = rmsnorm_dist(&row_mesh, &last, &weights.norm_final, Axis::X, &mut head)?;
    if mesh.ny > 1 {
        let hops = (mesh.ny - 1) as u32;
        head.push(StepRecord::comm("broadcast", StepCost::new(&mesh.config, hops, 0, normed.bytes())));
    }
    let opts = GemvOptions::with_discipline(STATS_ALLREDUCE).oriented(Orientation::ReduceX);
    let logits = gemv(&mesh.config, &GemvProblem::new(normed, weights.lm_head.clone())?, opts)?;
    head.merge("", logits.report);
    report.merge("lm_head", head);
    Ok((report, logits.c, layers))
}

fn decode_step(
    config: &PlmrConfig,
    plan: &LayerPlan,
    weights: &ModelWeights,
    token: usize,
    caches: &mut [DenseKv],
    kv: &mut KvMeshState,
) -> Result<(SimReport, Vec<Matrix>, Matrix)> {
    let shape = &plan.shape;
    let mesh = Mesh::new(config, plan);
    let mut report = SimReport::new("decode-step");
    report.merge("kv", kv.append(&mesh.config)?);

    let embed_opts = GemvOptions::with_discipline(STATS_ALLREDUCE).oriented(Orientation::ReduceX).with_broadcast(true);
    let embed = gemv(&mesh.config, &GemvProblem::new(one_hot(&[token], shape.vocab)?, weights.embedding.clone())?, embed_opts)?;
    report.merge("embed", embed.report);
    let mut x = embed.c;
    let mut layers = Vec::with_capacity(shape.layers);
    for (l, (lw, cache)) in weights.layers.iter().zip(caches.iter_mut()).enumerate() {
        let run = execute_layer(config, plan, lw, &x, cache, Some(kv))?;
        report.merge(&format!("layer{l}"), run.report);
        x = run.output;
        layers.push(x.clone());
    }

    let mut head = SimReport::new("lm_head");
    let normed = rmsnorm_dist(&mesh, &x, &weights.norm_final, Axis::Y, &mut head)?;
    let opts = GemvOptions::with_discipline(STATS_ALLREDUCE).oriented(Orientation::ReduceY);
    let logits = gemv(&mesh.config, &GemvProblem::new(normed, weights.lm_head.clone())?, opts)?;
    head.merge("", logits.report);
    report.merge("lm_head", head);
    Ok((report, layers, logits.c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::reference::generate;

    fn prompt(shape: &ModelShape) -> Vec<usize> {
        (0..shape.seq_len).map(|i| (i * 5 + 3) % shape.vocab).collect()
    }

    #[test]
    fn short_generation_matches_reference() {
        let shape = ModelShape { seq_len: 6, layers: 1, ..ModelShape::toy() };
        let w = ModelWeights::random(&shape, 21);
        let cfg = PlmrConfig::with_grid(4, 4);
        let p = prompt(&shape);
        let want = generate(&shape, &w, &p, 3).unwrap();
        let got = generate_distributed(&cfg, &shape, &w, &p, 3, Deployment::new(GridShape::square(4), GridShape::square(2))).unwrap();
        assert_eq!(got.generation.tokens, want.tokens);
        for (a, b) in got.generation.logits.iter().zip(&want.logits) {
            assert!(a.max_rel_diff(b, 1e-2) < 1e-4);
        }
        assert!(got.kv_spread_max <= 1);
        assert_eq!(got.kv.tokens(), 6 + 3);
        assert!(got.latency() > got.prefill.total_cycles());
    }

    #[test]
    fn prompt_length_must_match() {
        let shape = ModelShape::toy();
        let w = ModelWeights::random(&shape, 1);
        let r = generate_distributed(&PlmrConfig::with_grid(2, 2), &shape, &w, &[1, 2], 1, Deployment::new(GridShape::square(2), GridShape::square(2)));
        assert!(matches!(r, Err(Error::Shape(_))));
    }
}
