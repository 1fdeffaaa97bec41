//! Runs a [`LayerPlan`] on the simulated mesh.
//!
//! Every operator is computed by the distributed primitive the plan names,
//! tile by tile, and its cost report is merged into the layer report under
//! the operator's name. Normalizations and softmax reduce their statistics
//! with a two-phase K-tree allreduce that broadcasts the result back.

use std::collections::BTreeMap;
use std::ops::Range;

use super::plan::{grid_config, Heads, LayerPlan, OpKind, Phase, PlanOp};
use super::reference::{append_rows, silu, DenseKv, NORM_EPS};
use super::weights::LayerWeights;
use crate::collectives::{allreduce, Allreduce, Discipline, ReduceOp};
use crate::error::{Error, Result};
use crate::fabric::{Axis, CoreCoord, Fabric, PlmrConfig};
use crate::gemm::{dist_gemm_t, mesh_gemm, GemmProblem};
use crate::gemv::{gemv, GemvOptions, GemvProblem};
use crate::kv_cache::KvMeshState;
use crate::report::{SimReport, StepRecord};
use crate::tiles::Matrix;

/// Allreduce used for normalization and softmax statistics.
pub const STATS_ALLREDUCE: Discipline = Discipline::KTree { k: 2 };

#[derive(Debug, Clone)]
pub struct LayerRun {
    pub output: Matrix,
    /// Attention block output before the residual add.
    pub attention: Matrix,
    pub report: SimReport,
}

/// Cores of a `nx x ny` grid and the config restricted to it.
#[derive(Debug, Clone)]
pub(crate) struct Mesh {
    pub config: PlmrConfig,
    pub nx: usize,
    pub ny: usize,
}

impl Mesh {
    pub fn new(config: &PlmrConfig, plan: &LayerPlan) -> Self {
        Self { config: grid_config(config, plan.grid), nx: plan.grid.nx, ny: plan.grid.ny }
    }

    pub fn along(&self, axis: Axis) -> usize {
        match axis {
            Axis::X => self.nx,
            Axis::Y => self.ny,
        }
    }

    /// Allreduces `tiles[line][pos]` along `axis`; line `l` is the row `y = l`
    /// for X and the column `x = l` for Y.
    pub fn reduce(&self, axis: Axis, tiles: &mut [Vec<Matrix>], op: ReduceOp, report: &mut SimReport) -> Result<()> {
        let lines: Vec<Vec<CoreCoord>> = (0..self.along(axis.other()))
            .map(|l| {
                (0..self.along(axis))
                    .map(|p| match axis {
                        Axis::X => CoreCoord::new(p, l),
                        Axis::Y => CoreCoord::new(l, p),
                    })
                    .collect()
            })
            .collect();
        let mut fabric = Fabric::new(&self.config)?;
        let how = Allreduce::new(STATS_ALLREDUCE, op).with_broadcast(true);
        for s in allreduce(&mut fabric, &lines, tiles, how)? {
            report.push(s);
        }
        report.absorb_routing(&fabric);
        Ok(())
    }

    pub fn compute(&self, label: &str, macs: usize, report: &mut SimReport) {
        report.push(StepRecord::compute(label, self.config.compute_cycles(macs as u64)));
    }
}

/// Indices of block `i` when `extent` is cut into blocks of `block`.
fn span(i: usize, block: usize, extent: usize) -> Range<usize> {
    (i * block).min(extent)..((i + 1) * block).min(extent)
}

/// RMS normalization of the rows of `x`. Columns are cut along `e_axis`,
/// rows along the other axis; sums of squares are reduced along `e_axis`.
pub(crate) fn rmsnorm_dist(mesh: &Mesh, x: &Matrix, gain: &Matrix, e_axis: Axis, report: &mut SimReport) -> Result<Matrix> {
    let (rows, e) = x.shape();
    let (ce, cr) = (mesh.along(e_axis), mesh.along(e_axis.other()));
    let (te, tr) = (e.div_ceil(ce), rows.div_ceil(cr));
    let mut tiles: Vec<Vec<Matrix>> = (0..cr)
        .map(|l| {
            (0..ce)
                .map(|p| {
                    let mut t = Matrix::zeros(tr, 1);
                    for (k, r) in span(l, tr, rows).enumerate() {
                        let ss: f32 = x.row(r)[span(p, te, e)].iter().map(|v| v * v).sum();
                        t.set(k, 0, ss);
                    }
                    t
                })
                .collect()
        })
        .collect();
    mesh.compute("square", tr * te, report);
    mesh.reduce(e_axis, &mut tiles, ReduceOp::Sum, report)?;
    let mut out = x.clone();
    for (l, line) in tiles.iter().enumerate() {
        for (k, r) in span(l, tr, rows).enumerate() {
            let inv = 1.0 / (line[0].get(k, 0) / e as f32 + NORM_EPS).sqrt();
            for (o, g) in out.row_mut(r).iter_mut().zip(gain.row(0)) {
                *o *= inv * g;
            }
        }
    }
    mesh.compute("scale", tr * te, report);
    Ok(out)
}

/// Causal softmax of `s / sqrt(head_dim)` for prefill, tiled `L_yL'_x`.
fn softmax_prefill(mesh: &Mesh, s: &Matrix, head_dim: usize, report: &mut SimReport) -> Result<Matrix> {
    let (l, lc) = s.shape();
    let (tr, tc) = (l.div_ceil(mesh.ny), lc.div_ceil(mesh.nx));
    let scale = 1.0 / (head_dim as f32).sqrt();
    let mut p = s.map(|v| v * scale);
    let visible = |r: usize, c: usize| c <= r;
    let stat = |p: &Matrix, f: &dyn Fn(f32, f32) -> f32, init: f32| -> Vec<Vec<Matrix>> {
        (0..mesh.ny)
            .map(|y| {
                (0..mesh.nx)
                    .map(|x| {
                        let mut t = Matrix::filled(tr, 1, init);
                        for (k, r) in span(y, tr, l).enumerate() {
                            let acc = span(x, tc, lc).filter(|&c| visible(r, c)).fold(init, |a, c| f(a, p.get(r, c)));
                            t.set(k, 0, acc);
                        }
                        t
                    })
                    .collect()
            })
            .collect()
    };
    let mut max = stat(&p, &f32::max, f32::NEG_INFINITY);
    mesh.reduce(Axis::X, &mut max, ReduceOp::Max, report)?;
    for (y, line) in max.iter().enumerate() {
        for (k, r) in span(y, tr, l).enumerate() {
            let m = line[0].get(k, 0);
            for c in 0..lc {
                let v = if visible(r, c) { (p.get(r, c) - m).exp() } else { 0.0 };
                p.set(r, c, v);
            }
        }
    }
    let mut sum = stat(&p, &|a, b| a + b, 0.0);
    mesh.reduce(Axis::X, &mut sum, ReduceOp::Sum, report)?;
    for (y, line) in sum.iter().enumerate() {
        for (k, r) in span(y, tr, l).enumerate() {
            let total = line[0].get(k, 0);
            p.row_mut(r).iter_mut().for_each(|v| *v /= total);
        }
    }
    mesh.compute("scale exp divide", 3 * tr * tc, report);
    Ok(p)
}

/// Scores of `q` (`1 x H`, cut along X) against the cached keys of every
/// core row. Row `y` of the result holds the tokens of KV row `y`, padded
/// with `-inf` to the longest row.
fn attention_scores(mesh: &Mesh, q: &Matrix, keys: &Matrix, kv: &KvMeshState, report: &mut SimReport) -> Result<Matrix> {
    let h = q.cols();
    let th = h.div_ceil(mesh.nx);
    let rows: Vec<Vec<usize>> = (0..mesh.ny).map(|y| kv.row_tokens(y)).collect();
    let width = rows.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let mut tiles: Vec<Vec<Matrix>> = rows
        .iter()
        .map(|tokens| {
            (0..mesh.nx)
                .map(|x| {
                    let cols = span(x, th, h);
                    let mut t = Matrix::zeros(1, width);
                    for (j, &tok) in tokens.iter().enumerate() {
                        let dot = q.row(0)[cols.clone()].iter().zip(&keys.row(tok)[cols.clone()]).map(|(a, b)| a * b).sum();
                        t.set(0, j, dot);
                    }
                    t
                })
                .collect()
        })
        .collect();
    mesh.compute("dot", width * th, report);
    mesh.reduce(Axis::X, &mut tiles, ReduceOp::Sum, report)?;
    let mut s = Matrix::filled(mesh.ny, width, f32::NEG_INFINITY);
    for (y, tokens) in rows.iter().enumerate() {
        for j in 0..tokens.len() {
            s.set(y, j, tiles[y][0].get(0, j));
        }
    }
    Ok(s)
}

/// Softmax over every entry of `s` (rows are core rows), statistics reduced along Y.
fn softmax_decode(mesh: &Mesh, s: &Matrix, head_dim: usize, report: &mut SimReport) -> Result<Matrix> {
    let scale = 1.0 / (head_dim as f32).sqrt();
    let mut p = s.map(|v| v * scale);
    let per_row = |p: &Matrix, f: &dyn Fn(&[f32]) -> f32| -> Vec<Vec<Matrix>> {
        let col: Vec<Matrix> = (0..mesh.ny).map(|y| Matrix::filled(1, 1, f(p.row(y)))).collect();
        vec![col; mesh.nx]
    };
    let mut max = per_row(&p, &|r| r.iter().copied().fold(f32::NEG_INFINITY, f32::max));
    mesh.reduce(Axis::Y, &mut max, ReduceOp::Max, report)?;
    let m = max[0][0].get(0, 0);
    p = p.map(|v| if v == f32::NEG_INFINITY { 0.0 } else { (v - m).exp() });
    let mut sum = per_row(&p, &|r| r.iter().sum());
    mesh.reduce(Axis::Y, &mut sum, ReduceOp::Sum, report)?;
    let total = sum[0][0].get(0, 0);
    mesh.compute("scale exp divide", 3 * s.cols(), report);
    Ok(p.map(|v| v / total))
}

/// Probability-weighted sum of cached values; partials reduced along Y.
fn attention_context(mesh: &Mesh, p: &Matrix, values: &Matrix, kv: &KvMeshState, report: &mut SimReport) -> Result<Matrix> {
    let h = values.cols();
    let th = h.div_ceil(mesh.nx);
    let mut tiles: Vec<Vec<Matrix>> = (0..mesh.nx)
        .map(|x| {
            let cols = span(x, th, h);
            (0..mesh.ny)
                .map(|y| {
                    let mut t = Matrix::zeros(1, th);
                    for (j, tok) in kv.row_tokens(y).into_iter().enumerate() {
                        let w = p.get(y, j);
                        for (o, v) in t.row_mut(0).iter_mut().zip(&values.row(tok)[cols.clone()]) {
                            *o += w * v;
                        }
                    }
                    t
                })
                .collect()
        })
        .collect();
    mesh.compute("weighted sum", p.cols() * th, report);
    mesh.reduce(Axis::Y, &mut tiles, ReduceOp::Sum, report)?;
    let mut out = Matrix::zeros(1, h);
    for (x, line) in tiles.iter().enumerate() {
        out.write_block(0, x * th, &line[0]);
    }
    Ok(out)
}

/// Named tensors of one layer; per-head tensors hold one matrix per head.
struct Env {
    values: BTreeMap<String, Vec<Matrix>>,
}

impl Env {
    fn get(&self, name: &str, head: usize) -> Result<&Matrix> {
        let v = self
            .values
            .get(name)
            .ok_or_else(|| Error::Integrity(format!("tensor {name} used before it is produced")))?;
        Ok(if v.len() == 1 { &v[0] } else { &v[head] })
    }

    fn input(&self, op: &PlanOp, i: usize, head: usize) -> Result<&Matrix> {
        let name = op
            .inputs
            .get(i)
            .ok_or_else(|| Error::Integrity(format!("operator {} lacks input {i}", op.name)))?;
        self.get(name, head)
    }
}

/// Executes one layer. Prefill takes the whole prompt (`L x E`) and an empty
/// cache; decode takes one token (`1 x E`) and the KV placement, which must
/// already account for that token.
pub fn execute_layer(
    config: &PlmrConfig,
    plan: &LayerPlan,
    weights: &LayerWeights,
    x: &Matrix,
    cache: &mut DenseKv,
    kv: Option<&KvMeshState>,
) -> Result<LayerRun> {
    let shape = &plan.shape;
    let mesh = Mesh::new(config, plan);
    if x.cols() != shape.embed {
        return Err(Error::Shape(format!("layer input is {}x{}, embedding is {}", x.rows(), x.cols(), shape.embed)));
    }
    let kv = match plan.phase {
        Phase::Prefill => {
            if !cache.is_empty() {
                return Err(Error::Integrity(format!("prefill expects an empty cache, found {} tokens", cache.len())));
            }
            None
        }
        Phase::Decode => {
            if x.rows() != 1 {
                return Err(Error::Shape(format!("decode processes one token, got {} rows", x.rows())));
            }
            let kv = kv.ok_or_else(|| Error::Integrity("decode needs the KV placement".into()))?;
            if (kv.width(), kv.height()) != (mesh.nx, mesh.ny) {
                return Err(Error::Shape(format!(
                    "KV placement is {}x{} but the plan grid is {}",
                    kv.width(),
                    kv.height(),
                    plan.grid
                )));
            }
            if kv.tokens() != cache.len() + 1 {
                return Err(Error::Integrity(format!(
                    "KV placement holds {} tokens, cache holds {} before this one",
                    kv.tokens(),
                    cache.len()
                )));
            }
            Some(kv)
        }
    };

    let mut env = Env { values: BTreeMap::new() };
    env.values.insert("X".into(), vec![x.clone()]);
    env.values.insert("W_Q".into(), weights.wq.clone());
    env.values.insert("W_K".into(), weights.wk.clone());
    env.values.insert("W_V".into(), weights.wv.clone());
    env.values.insert("W_O".into(), weights.wo.clone());
    env.values.insert("W_in".into(), vec![weights.w_in.clone()]);
    env.values.insert("W_out".into(), vec![weights.w_out.clone()]);
    env.values.insert("G_attn".into(), vec![weights.norm_attn.clone()]);
    env.values.insert("G_ffn".into(), vec![weights.norm_ffn.clone()]);

    let mut report = SimReport::new(format!("{}-layer", plan.phase));
    report.peak_mem_bytes = plan.peak_bytes;
    for op in &plan.ops {
        let count = if op.heads == Heads::Shared { 1 } else { shape.heads };
        let mut outs = Vec::with_capacity(count);
        for head in 0..count {
            let scope = if count > 1 { format!("{}[{head}]", op.name) } else { op.name.clone() };
            let mut r = SimReport::new(scope.clone());
            let out = match &op.kind {
                OpKind::RmsNorm { gain, axis } => {
                    let g = env.get(gain, head)?;
                    rmsnorm_dist(&mesh, env.input(op, 0, head)?, g, *axis, &mut r)?
                }
                OpKind::Gemm => {
                    let p = GemmProblem::new(env.input(op, 0, head)?.clone(), env.input(op, 1, head)?.clone())?;
                    let run = mesh_gemm(&mesh.config, &p)?;
                    r.merge("", run.report);
                    run.c
                }
                OpKind::GemmT => {
                    let run = dist_gemm_t(&mesh.config, env.input(op, 0, head)?, env.input(op, 1, head)?)?;
                    r.merge("", run.report);
                    run.c
                }
                OpKind::Gemv { orientation, broadcast } => {
                    let p = GemvProblem::new(env.input(op, 0, head)?.clone(), env.input(op, 1, head)?.clone())?;
                    let opts = GemvOptions::with_discipline(STATS_ALLREDUCE)
                        .oriented(*orientation)
                        .with_broadcast(*broadcast);
                    let run = gemv(&mesh.config, &p, opts)?;
                    r.merge("", run.report);
                    run.c
                }
                OpKind::Softmax { .. } => match plan.phase {
                    Phase::Prefill => softmax_prefill(&mesh, env.input(op, 0, head)?, shape.head_dim, &mut r)?,
                    Phase::Decode => softmax_decode(&mesh, env.input(op, 0, head)?, shape.head_dim, &mut r)?,
                },
                OpKind::AttentionScores => {
                    let kv = kv.ok_or_else(|| Error::Integrity("attention over the cache outside decode".into()))?;
                    attention_scores(&mesh, env.input(op, 0, head)?, &cache.k[head], kv, &mut r)?
                }
                OpKind::AttentionContext => {
                    let kv = kv.ok_or_else(|| Error::Integrity("attention over the cache outside decode".into()))?;
                    attention_context(&mesh, env.input(op, 0, head)?, &cache.v[head], kv, &mut r)?
                }
                OpKind::Silu => {
                    let u = env.input(op, 0, head)?;
                    mesh.compute("silu", elements_per_core(&mesh, plan.phase, u, Axis::X), &mut r);
                    u.map(silu)
                }
                OpKind::Residual => {
                    let mut a = env.input(op, 0, head)?.clone();
                    a.add_assign(env.input(op, 1, head)?)?;
                    mesh.compute("add", elements_per_core(&mesh, plan.phase, &a, Axis::Y), &mut r);
                    a
                }
                OpKind::KvAppend => {
                    let k = env.input(op, 0, head)?;
                    let v = env.input(op, 1, head)?;
                    cache.k[head] = append_rows(&cache.k[head], k);
                    cache.v[head] = append_rows(&cache.v[head], v);
                    k.clone()
                }
                OpKind::Transpose => {
                    let t = env.input(op, 0, head)?.transpose();
                    r.note(format!("{} transposed {}", op.name, op.inputs[0]));
                    t
                }
            };
            report.merge(&scope, r);
            outs.push(out);
        }
        if op.heads == Heads::SumOverHeads {
            let mut total = outs[0].clone();
            for o in &outs[1..] {
                total.add_assign(o)?;
            }
            outs = vec![total];
        }
        env.values.insert(op.output.clone(), outs);
    }
    let output = env.get("Y", 0)?.clone();
    let attention = env.get("A", 0)?.clone();
    Ok(LayerRun { output, attention, report })
}

/// Elements one core touches in an elementwise operator. Decode vectors lie
/// along `decode_axis`.
fn elements_per_core(mesh: &Mesh, phase: Phase, m: &Matrix, decode_axis: Axis) -> usize {
    match phase {
        Phase::Prefill => m.rows().div_ceil(mesh.ny) * m.cols().div_ceil(mesh.nx),
        Phase::Decode => m.cols().div_ceil(mesh.along(decode_axis)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kv_cache::KvMode;
    use crate::llm::plan::{plan_decode, plan_prefill};
    use crate::llm::reference::layer_forward;
    use crate::llm::{LayerWeights, ModelShape, ModelWeights};
    use crate::tiles::GridShape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn input(rows: usize, e: usize, seed: u64) -> Matrix {
        Matrix::random_uniform(rows, e, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn close(a: &Matrix, b: &Matrix) -> f32 {
        a.max_rel_diff(b, 1e-2)
    }

    #[test]
    fn zero_weights_give_zero_attention() {
        let shape = ModelShape { seq_len: 8, ..ModelShape::toy() };
        let cfg = PlmrConfig::with_grid(4, 4);
        let plan = plan_prefill(&cfg, &shape, GridShape::square(2)).unwrap();
        let x = input(8, 32, 1);
        let mut cache = DenseKv::new(&shape);
        let run = execute_layer(&cfg, &plan, &LayerWeights::zeros(&shape), &x, &mut cache, None).unwrap();
        assert!(run.attention.data().iter().all(|&v| v == 0.0));
        assert_eq!(run.output, x);
    }

    #[test]
    fn prefill_matches_reference_on_3x3() {
        let shape = ModelShape { seq_len: 8, ..ModelShape::toy() };
        let cfg = PlmrConfig::with_grid(3, 3);
        let w = ModelWeights::random(&shape, 11);
        let x = input(8, 32, 2);
        let plan = plan_prefill(&cfg, &shape, GridShape::square(3)).unwrap();
        let mut cache = DenseKv::new(&shape);
        let run = execute_layer(&cfg, &plan, &w.layers[0], &x, &mut cache, None).unwrap();
        let mut dense = DenseKv::new(&shape);
        let want = layer_forward(&shape, &w.layers[0], &x, &mut dense).unwrap();
        assert!(close(&run.output, &want) < 1e-4);
        for h in 0..shape.heads {
            assert!(close(&cache.k[h], &dense.k[h]) < 1e-4);
        }
        assert!(run.report.total_cycles() > 0);
        assert!(run.report.steps.iter().any(|s| s.label.starts_with("scores[0]/")));
    }

    #[test]
    fn decode_tokens_match_incremental_reference() {
        let shape = ModelShape { seq_len: 4, ..ModelShape::toy() };
        let cfg = PlmrConfig::with_grid(4, 4);
        let w = ModelWeights::random(&shape, 3);
        let plan = plan_decode(&cfg, &shape, GridShape::square(4)).unwrap();
        let mut kv = KvMeshState::new(4, 4, 8, 64, KvMode::Shift).unwrap();
        let mut cache = DenseKv::new(&shape);
        let mut dense = DenseKv::new(&shape);
        for t in 0..8 {
            let x = input(1, 32, 100 + t);
            kv.append(&cfg).unwrap();
            assert!(kv.spread() <= 1);
            let run = execute_layer(&cfg, &plan, &w.layers[0], &x, &mut cache, Some(&kv)).unwrap();
            let want = layer_forward(&shape, &w.layers[0], &x, &mut dense).unwrap();
            assert!(close(&run.output, &want) < 1e-4, "token {t}");
        }
    }

    #[test]
    fn decode_rejects_stale_kv() {
        let shape = ModelShape::toy();
        let cfg = PlmrConfig::with_grid(2, 2);
        let plan = plan_decode(&cfg, &shape, GridShape::square(2)).unwrap();
        let kv = KvMeshState::new(2, 2, 8, 64, KvMode::Shift).unwrap();
        let mut cache = DenseKv::new(&shape);
        let w = LayerWeights::zeros(&shape);
        let r = execute_layer(&cfg, &plan, &w, &input(1, 32, 0), &mut cache, Some(&kv));
        assert!(matches!(r, Err(Error::Integrity(_))));
        assert!(execute_layer(&cfg, &plan, &w, &input(1, 32, 0), &mut cache, None).is_err());
    }
}
