//! Per-layer execution plans for prefill and decode.
//!
//! A plan fixes the layout of every tensor of one decoder layer and the
//! sequence of distributed operators that computes it. Plans never contain a
//! transpose: prefill multiplies `Q` by `K^T` with the transposed GEMM and
//! decode reads weights that were placed in their GEMV orientation up front.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::shape::ModelShape;
use crate::error::{Error, Result};
use crate::fabric::{Axis, PlmrConfig};
use crate::gemv::Orientation;
use crate::tiles::{GridShape, Layout, Matrix, Placement};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Prefill,
    Decode,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Prefill => "prefill",
            Phase::Decode => "decode",
        })
    }
}

/// How an operator treats attention heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Heads {
    /// One tensor for the whole layer.
    Shared,
    /// One instance per head.
    PerHead,
    /// Per-head products summed into one tensor.
    SumOverHeads,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpKind {
    /// Row-wise RMS normalization; the sum of squares is reduced along `axis`.
    RmsNorm { gain: String, axis: Axis },
    /// Cyclic-shift distributed GEMM.
    Gemm,
    /// `A * B^T` with `B` kept in place.
    GemmT,
    Gemv { orientation: Orientation, broadcast: bool },
    /// Softmax of scores scaled by `1/sqrt(H)`; max and sum reduce along `axis`.
    Softmax { causal: bool, axis: Axis },
    /// Query against the cached keys, held where the KV cache placed them.
    AttentionScores,
    /// Probability-weighted sum of the cached values.
    AttentionContext,
    Silu,
    Residual,
    /// Stores the new keys and values in the layer's cache.
    KvAppend,
    /// Physical transpose. Never emitted by the planners; kept so plans from
    /// other sources can be inspected.
    Transpose,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpKind::RmsNorm { axis, .. } => write!(f, "rmsnorm(allreduce {axis})"),
            OpKind::Gemm => f.write_str("dist-gemm"),
            OpKind::GemmT => f.write_str("dist-gemm-t"),
            OpKind::Gemv { orientation, broadcast } => {
                let axis = orientation.reduce_axis();
                write!(f, "dist-gemv(reduce {axis}{})", if *broadcast { ", broadcast" } else { "" })
            }
            OpKind::Softmax { causal, axis } => {
                write!(f, "softmax(allreduce {axis}{})", if *causal { ", causal" } else { "" })
            }
            OpKind::AttentionScores => f.write_str("attention-scores"),
            OpKind::AttentionContext => f.write_str("attention-context"),
            OpKind::Silu => f.write_str("silu"),
            OpKind::Residual => f.write_str("residual"),
            OpKind::KvAppend => f.write_str("kv-append"),
            OpKind::Transpose => f.write_str("transpose"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanOp {
    pub name: String,
    pub kind: OpKind,
    pub heads: Heads,
    pub inputs: Vec<String>,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub phase: Phase,
    pub grid: GridShape,
    pub shape: ModelShape,
    /// Layout of each tensor, keyed by tensor name.
    pub layouts: BTreeMap<String, Layout>,
    pub ops: Vec<PlanOp>,
    /// Per-core bytes of the layer's weights, activations and cache at the
    /// prompt length, as placed during validation.
    pub peak_bytes: u64,
}

impl LayerPlan {
    pub fn transpose_count(&self) -> usize {
        self.ops.iter().filter(|o| o.kind == OpKind::Transpose).count()
    }

    pub fn ops_of(&self, kind: &OpKind) -> impl Iterator<Item = &PlanOp> + '_ {
        let kind = kind.clone();
        self.ops.iter().filter(move |o| std::mem::discriminant(&o.kind) == std::mem::discriminant(&kind))
    }

    pub fn op(&self, name: &str) -> Option<&PlanOp> {
        self.ops.iter().find(|o| o.name == name)
    }

    pub fn layout(&self, tensor: &str) -> Result<&Layout> {
        self.layouts
            .get(tensor)
            .ok_or_else(|| Error::Integrity(format!("{} plan has no layout for {tensor}", self.phase)))
    }
}

impl fmt::Display for LayerPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} plan on {} grid, {} bytes/core", self.phase, self.grid, self.peak_bytes)?;
        writeln!(f, "layouts:")?;
        for (name, layout) in &self.layouts {
            writeln!(f, "  {name:<8} {layout}")?;
        }
        writeln!(f, "ops:")?;
        for (i, op) in self.ops.iter().enumerate() {
            let heads = match op.heads {
                Heads::Shared => "",
                Heads::PerHead => " per head",
                Heads::SumOverHeads => " summed over heads",
            };
            writeln!(f, "  {i:>2} {:<10} {}({}) -> {}{heads}", op.name, op.kind, op.inputs.join(", "), op.output)?;
        }
        Ok(())
    }
}

/// The config restricted to a `grid` of cores.
pub(crate) fn grid_config(config: &PlmrConfig, grid: GridShape) -> PlmrConfig {
    PlmrConfig { width: grid.nx, height: grid.ny, ..config.clone() }
}

fn op(name: &str, kind: OpKind, heads: Heads, inputs: &[&str], output: &str) -> PlanOp {
    PlanOp {
        name: name.into(),
        kind,
        heads,
        inputs: inputs.iter().map(|s| s.to_string()).collect(),
        output: output.into(),
    }
}

fn layouts(pairs: &[(&str, &str)]) -> BTreeMap<String, Layout> {
    pairs
        .iter()
        .map(|(t, l)| (t.to_string(), l.parse().expect("planner layouts are well formed")))
        .collect()
}

fn check_grid(config: &PlmrConfig, grid: GridShape) -> Result<()> {
    if grid.nx == 0 || grid.ny == 0 {
        return Err(Error::Config(format!("grid {grid} has no cores")));
    }
    if grid.nx > config.width || grid.ny > config.height {
        return Err(Error::Config(format!(
            "grid {grid} does not fit the {}x{} mesh",
            config.width, config.height
        )));
    }
    Ok(())
}

/// Places every tensor of one layer to check tile legality and the memory
/// budget. Returns the per-core peak.
fn validate(config: &PlmrConfig, plan: &LayerPlan, shapes: &[(&str, usize, usize, usize)]) -> Result<u64> {
    let mut placement = Placement::new(plan.grid, Some(config.mem_per_core));
    for &(tensor, copies, rows, cols) in shapes {
        let layout = plan.layout(tensor)?;
        let zeros = Matrix::zeros(rows, cols);
        for i in 0..copies {
            let name = if copies > 1 { format!("{tensor}[{i}]") } else { tensor.to_string() };
            placement.insert(&name, &zeros, layout)?;
        }
    }
    Ok(placement.peak_bytes())
}

/// Prefill: activations `BL_yE_x`, every weight cut on both axes, all
/// projections as distributed GEMMs and `Q K^T` as the transposed GEMM.
pub fn plan_prefill(config: &PlmrConfig, shape: &ModelShape, grid: GridShape) -> Result<LayerPlan> {
    shape.validate()?;
    check_grid(config, grid)?;
    let ops = vec![
        op("norm1", OpKind::RmsNorm { gain: "G_attn".into(), axis: Axis::X }, Heads::Shared, &["X"], "Xn"),
        op("q_proj", OpKind::Gemm, Heads::PerHead, &["Xn", "W_Q"], "Q"),
        op("k_proj", OpKind::Gemm, Heads::PerHead, &["Xn", "W_K"], "K"),
        op("v_proj", OpKind::Gemm, Heads::PerHead, &["Xn", "W_V"], "V"),
        op("kv_store", OpKind::KvAppend, Heads::PerHead, &["K", "V"], "KV"),
        op("scores", OpKind::GemmT, Heads::PerHead, &["Q", "K"], "S"),
        op("softmax", OpKind::Softmax { causal: true, axis: Axis::X }, Heads::PerHead, &["S"], "P"),
        op("context", OpKind::Gemm, Heads::PerHead, &["P", "V"], "C"),
        op("o_proj", OpKind::Gemm, Heads::SumOverHeads, &["C", "W_O"], "A"),
        op("residual1", OpKind::Residual, Heads::Shared, &["X", "A"], "X1"),
        op("norm2", OpKind::RmsNorm { gain: "G_ffn".into(), axis: Axis::X }, Heads::Shared, &["X1"], "X1n"),
        op("ffn_in", OpKind::Gemm, Heads::Shared, &["X1n", "W_in"], "U"),
        op("silu", OpKind::Silu, Heads::Shared, &["U"], "Us"),
        op("ffn_out", OpKind::Gemm, Heads::Shared, &["Us", "W_out"], "D"),
        op("residual2", OpKind::Residual, Heads::Shared, &["X1", "D"], "Y"),
    ];
    let layouts = layouts(&[
        ("X", "BL_yE_x"),
        ("W_Q", "E_yH_x"),
        ("W_K", "E_yH_x"),
        ("W_V", "E_yH_x"),
        ("W_O", "H_yE_x"),
        ("W_in", "E_yF_x"),
        ("W_out", "F_yE_x"),
        ("G", "L^yE_x"),
        ("KV", "L_yH_x"),
        ("S", "L_yL'_x"),
    ]);
    let mut plan = LayerPlan { phase: Phase::Prefill, grid, shape: *shape, layouts, ops, peak_bytes: 0 };
    let (e, h, f, l, n) = (shape.embed, shape.head_dim, shape.ffn, shape.seq_len, shape.heads);
    plan.peak_bytes = validate(
        config,
        &plan,
        &[
            ("X", 2, l, e),
            ("W_Q", n, e, h),
            ("W_K", n, e, h),
            ("W_V", n, e, h),
            ("W_O", n, h, e),
            ("W_in", 1, e, f),
            ("W_out", 1, f, e),
            ("G", 2, 1, e),
            ("KV", 2 * n, l, h),
            ("S", 1, l, l),
        ],
    )?;
    Ok(plan)
}

/// Decode: the token's activation `BE_yL^x` is replicated along X; every
/// product is a distributed GEMV against weights stored in the orientation
/// that GEMV reads, so the output of one feeds the next without a transpose.
pub fn plan_decode(config: &PlmrConfig, shape: &ModelShape, grid: GridShape) -> Result<LayerPlan> {
    shape.validate()?;
    check_grid(config, grid)?;
    let along_y = OpKind::Gemv { orientation: Orientation::ReduceY, broadcast: true };
    let along_x = OpKind::Gemv { orientation: Orientation::ReduceX, broadcast: true };
    let ops = vec![
        op("norm1", OpKind::RmsNorm { gain: "G_attn".into(), axis: Axis::Y }, Heads::Shared, &["X"], "Xn"),
        op("q_proj", along_y.clone(), Heads::PerHead, &["Xn", "W_Q"], "Q"),
        op("k_proj", along_y.clone(), Heads::PerHead, &["Xn", "W_K"], "K"),
        op("v_proj", along_y.clone(), Heads::PerHead, &["Xn", "W_V"], "V"),
        op("kv_store", OpKind::KvAppend, Heads::PerHead, &["K", "V"], "KV"),
        op("scores", OpKind::AttentionScores, Heads::PerHead, &["Q", "KV"], "S"),
        op("softmax", OpKind::Softmax { causal: false, axis: Axis::Y }, Heads::PerHead, &["S"], "P"),
        op("context", OpKind::AttentionContext, Heads::PerHead, &["P", "KV"], "C"),
        op("o_proj", along_x.clone(), Heads::SumOverHeads, &["C", "W_O"], "A"),
        op("residual1", OpKind::Residual, Heads::Shared, &["X", "A"], "X1"),
        op("norm2", OpKind::RmsNorm { gain: "G_ffn".into(), axis: Axis::Y }, Heads::Shared, &["X1"], "X1n"),
        op("ffn_in", along_y, Heads::Shared, &["X1n", "W_in"], "U"),
        op("silu", OpKind::Silu, Heads::Shared, &["U"], "Us"),
        op("ffn_out", along_x, Heads::Shared, &["Us", "W_out"], "D"),
        op("residual2", OpKind::Residual, Heads::Shared, &["X1", "D"], "Y"),
    ];
    let layouts = layouts(&[
        ("X", "BE_yL^x"),
        ("W_Q", "E_yH_x"),
        ("W_K", "E_yH_x"),
        ("W_V", "E_yH_x"),
        ("W_O", "H_xE_y"),
        ("W_in", "E_yF_x"),
        ("W_out", "F_xE_y"),
        ("G", "E_yL^x"),
        ("KV", "L_yH_x"),
    ]);
    let mut plan = LayerPlan { phase: Phase::Decode, grid, shape: *shape, layouts, ops, peak_bytes: 0 };
    let (e, h, f, l, n) = (shape.embed, shape.head_dim, shape.ffn, shape.seq_len, shape.heads);
    plan.peak_bytes = validate(
        config,
        &plan,
        &[
            ("X", 2, e, 1),
            ("W_Q", n, e, h),
            ("W_K", n, e, h),
            ("W_V", n, e, h),
            ("W_O", n, h, e),
            ("W_in", 1, e, f),
            ("W_out", 1, f, e),
            ("G", 2, e, 1),
            ("KV", 2 * n, l, h),
        ],
    )?;
    Ok(plan)
}

pub fn plan_for(phase: Phase, config: &PlmrConfig, shape: &ModelShape, grid: GridShape) -> Result<LayerPlan> {
    match phase {
        Phase::Prefill => plan_prefill(config, shape, grid),
        Phase::Decode => plan_decode(config, shape, grid),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> PlmrConfig {
        PlmrConfig::with_grid(8, 8)
    }

    #[test]
    fn toy_plans_are_transpose_free() {
        for grid in [GridShape::square(1), GridShape::square(4), GridShape::new(2, 4)] {
            for phase in [Phase::Prefill, Phase::Decode] {
                let p = plan_for(phase, &cfg(), &ModelShape::toy(), grid).unwrap();
                assert_eq!(p.transpose_count(), 0);
                assert!(p.peak_bytes > 0);
            }
        }
    }

    #[test]
    fn prefill_uses_transposed_gemm_for_scores() {
        let p = plan_prefill(&cfg(), &ModelShape::toy(), GridShape::square(4)).unwrap();
        assert_eq!(p.op("scores").unwrap().kind, OpKind::GemmT);
        assert_eq!(p.layout("X").unwrap().to_string(), "BL_yE_x");
        assert_eq!(p.ops_of(&OpKind::Gemm).count(), 7);
        assert_eq!(p.ops_of(&OpKind::Gemv { orientation: Orientation::ReduceX, broadcast: false }).count(), 0);
    }

    #[test]
    fn decode_weights_chain_without_transpose() {
        let p = plan_decode(&cfg(), &ModelShape::toy(), GridShape::square(4)).unwrap();
        assert_eq!(p.layout("X").unwrap().to_string(), "BE_yL^x");
        assert_eq!(p.layout("W_O").unwrap().to_string(), "H_xE_y");
        assert_eq!(p.layout("W_out").unwrap().to_string(), "F_xE_y");
        assert_eq!(p.ops_of(&OpKind::Gemm).count() + p.ops_of(&OpKind::GemmT).count(), 0);
        let gemvs: Vec<Axis> = p
            .ops
            .iter()
            .filter_map(|o| match o.kind {
                OpKind::Gemv { orientation, .. } => Some(orientation.reduce_axis()),
                _ => None,
            })
            .collect();
        assert_eq!(gemvs, [Axis::Y, Axis::Y, Axis::Y, Axis::X, Axis::Y, Axis::X]);
    }

    #[test]
    fn memory_error_names_tensor() {
        let mut c = cfg();
        c.mem_per_core = 2048;
        match plan_prefill(&c, &ModelShape::toy(), GridShape::square(2)) {
            Err(Error::Capacity { what, .. }) => assert!(what.contains("placing"), "{what}"),
            other => panic!("expected capacity error, got {other:?}"),
        }
    }

    #[test]
    fn too_many_cores_for_head_dim() {
        let c = PlmrConfig::with_grid(16, 16);
        assert!(matches!(plan_decode(&c, &ModelShape::toy(), GridShape::square(16)), Err(Error::Shape(_))));
    }

    #[test]
    fn dump_uses_layout_notation() {
        let text = plan_prefill(&cfg(), &ModelShape::toy(), GridShape::square(2)).unwrap().to_string();
        assert!(text.contains("L_yL'_x"));
        assert!(text.contains("dist-gemm-t(Q, K) -> S per head"));
    }
}
