//! Re-placement of weights and KV cache between the prefill and decode grids.
//!
//! Both grids are anchored at the mesh origin. Every element needed by a
//! decode core is fetched from the nearest prefill core holding it; bytes are
//! aggregated per core pair and the whole shuffle is charged as one
//! all-to-all step: the longest relayed path plus serialization of the
//! busiest core's traffic.

use std::collections::BTreeMap;

use super::plan::{grid_config, LayerPlan};
use super::reference::DenseKv;
use super::shape::ModelShape;
use super::weights::ModelWeights;
use crate::error::{Error, Result};
use crate::fabric::{Axis, CoreCoord, PlmrConfig, StepCost, ELEM_BYTES};
use crate::kv_cache::{KvMeshState, KvMode};
use crate::report::{SimReport, StepRecord};
use crate::tiles::{GridShape, Layout, Matrix, Placement};

/// Layouts of the model-level tensors in each phase.
pub const EMBEDDING_LAYOUTS: [&str; 2] = ["V_yE_x", "V_xE_y"];
pub const LM_HEAD_LAYOUTS: [&str; 2] = ["E_xV_y", "E_yV_x"];

/// One tensor moving from one placement to another.
#[derive(Debug, Clone)]
pub struct TensorMove<'a> {
    pub name: String,
    pub tensor: &'a Matrix,
    pub from: (GridShape, Layout),
    pub to: (GridShape, Layout),
}

/// Where one element lives along each axis: `Some(i)` fixes the coordinate,
/// `None` means every core along that axis holds a copy.
fn element_axes(layout: &Layout, grid: GridShape, rows: usize, cols: usize, i: usize, j: usize) -> Result<[Option<usize>; 2]> {
    let (rd, cd) = layout.matrix_dims()?;
    let mut at = [None, None];
    for (dim, extent, idx) in [(rd, rows, i), (cd, cols, j)] {
        if let Some(axis) = dim.partitioned_on() {
            let block = extent.div_ceil(grid.along(axis));
            at[axis_slot(axis)] = Some(idx / block);
        }
    }
    Ok(at)
}

fn axis_slot(axis: Axis) -> usize {
    match axis {
        Axis::X => 0,
        Axis::Y => 1,
    }
}

/// Per-pair byte counts of a re-placement.
#[derive(Debug, Default)]
struct Traffic {
    pairs: BTreeMap<(CoreCoord, CoreCoord), u64>,
}

impl Traffic {
    fn add(&mut self, src: CoreCoord, dst: CoreCoord, bytes: u64) {
        if src != dst {
            *self.pairs.entry((src, dst)).or_default() += bytes;
        }
    }

    fn report(&self, config: &PlmrConfig, name: &str) -> SimReport {
        let mut report = SimReport::new(name);
        if self.pairs.is_empty() {
            return report;
        }
        let mut per_core: BTreeMap<CoreCoord, (u64, u64)> = BTreeMap::new();
        let mut hops = 0;
        let mut total = 0;
        for (&(src, dst), &bytes) in &self.pairs {
            per_core.entry(src).or_default().0 += bytes;
            per_core.entry(dst).or_default().1 += bytes;
            hops = hops.max(src.manhattan(dst));
            total += bytes;
        }
        let busiest = per_core.values().map(|&(s, r)| s.max(r)).max().unwrap_or(0);
        let step = StepRecord::comm("all-to-all", StepCost::new(config, hops, hops - 1, total))
            .with_serialization(config.serialization_cycles(busiest));
        report.push(step);
        report.note(format!("{} core pairs exchange {total} bytes, busiest core {busiest} bytes", self.pairs.len()));
        report
    }
}

fn add_tensor_traffic(traffic: &mut Traffic, mv: &TensorMove) -> Result<()> {
    let (rows, cols) = mv.tensor.shape();
    let (sg, sl) = &mv.from;
    let (dg, dl) = &mv.to;
    for i in 0..rows {
        for j in 0..cols {
            let src_axes = element_axes(sl, *sg, rows, cols, i, j)?;
            let dst_axes = element_axes(dl, *dg, rows, cols, i, j)?;
            let xs: Vec<usize> = dst_axes[0].map_or_else(|| (0..dg.nx).collect(), |x| vec![x]);
            let ys: Vec<usize> = dst_axes[1].map_or_else(|| (0..dg.ny).collect(), |y| vec![y]);
            for &y in &ys {
                for &x in &xs {
                    let src = CoreCoord::new(
                        src_axes[0].unwrap_or(x.min(sg.nx - 1)),
                        src_axes[1].unwrap_or(y.min(sg.ny - 1)),
                    );
                    traffic.add(src, CoreCoord::new(x, y), ELEM_BYTES);
                }
            }
        }
    }
    Ok(())
}

/// Cost of moving `tensors` to their new placements. Identical source and
/// target placements cost nothing.
pub fn relayout(config: &PlmrConfig, tensors: &[TensorMove]) -> Result<SimReport> {
    let mut traffic = Traffic::default();
    for mv in tensors {
        add_tensor_traffic(&mut traffic, mv)?;
    }
    Ok(traffic.report(config, "relayout"))
}

/// Result of switching from the prefill to the decode grid.
#[derive(Debug, Clone)]
pub struct Transition {
    /// KV placement on the decode grid holding the prompt.
    pub kv: KvMeshState,
    /// Decode-side placement of every weight, checked against the budget.
    pub placement: Placement,
    pub report: SimReport,
}

/// Bytes per token one core stores for its column slice of every layer's
/// keys and values.
pub fn kv_chunk_bytes(shape: &ModelShape, grid: GridShape) -> u64 {
    (shape.layers * shape.heads * 2 * shape.head_dim.div_ceil(grid.nx)) as u64 * ELEM_BYTES
}

/// Every weight tensor of the model under `plan`'s layouts.
fn weight_moves<'a>(
    weights: &'a ModelWeights,
    from: &LayerPlan,
    to: &LayerPlan,
) -> Result<Vec<TensorMove<'a>>> {
    let pick = |plan: &LayerPlan, t: &str| -> Result<(GridShape, Layout)> { Ok((plan.grid, plan.layout(t)?.clone())) };
    let mut moves = Vec::new();
    for (l, lw) in weights.layers.iter().enumerate() {
        for (tensor, mats) in [("W_Q", &lw.wq), ("W_K", &lw.wk), ("W_V", &lw.wv), ("W_O", &lw.wo)] {
            for (h, m) in mats.iter().enumerate() {
                moves.push(TensorMove {
                    name: format!("{tensor}[{h}]@{l}"),
                    tensor: m,
                    from: pick(from, tensor)?,
                    to: pick(to, tensor)?,
                });
            }
        }
        for (tensor, m) in [("W_in", &lw.w_in), ("W_out", &lw.w_out)] {
            moves.push(TensorMove { name: format!("{tensor}@{l}"), tensor: m, from: pick(from, tensor)?, to: pick(to, tensor)? });
        }
        for (tensor, m) in [("G_attn", &lw.norm_attn), ("G_ffn", &lw.norm_ffn)] {
            moves.push(TensorMove { name: format!("{tensor}@{l}"), tensor: m, from: gain_layout(from)?, to: gain_layout(to)? });
        }
    }
    moves.push(TensorMove { name: "G_final".into(), tensor: &weights.norm_final, from: gain_layout(from)?, to: gain_layout(to)? });
    for (name, tensor, layouts) in
        [("embedding", &weights.embedding, EMBEDDING_LAYOUTS), ("lm_head", &weights.lm_head, LM_HEAD_LAYOUTS)]
    {
        let side = |plan: &LayerPlan| -> Result<(GridShape, Layout)> {
            Ok((plan.grid, layouts[usize::from(plan.phase == super::plan::Phase::Decode)].parse()?))
        };
        moves.push(TensorMove { name: name.into(), tensor, from: side(from)?, to: side(to)? });
    }
    Ok(moves)
}

/// Gains are stored as `1 x E` rows; decode keeps them along Y, which the
/// plan writes as the `E x 1` layout `E_yL^x`.
fn gain_layout(plan: &LayerPlan) -> Result<(GridShape, Layout)> {
    let layout = match plan.phase {
        super::plan::Phase::Prefill => plan.layout("G")?.clone(),
        super::plan::Phase::Decode => "L^xE_y".parse()?,
    };
    Ok((plan.grid, layout))
}

/// Places every weight of the model under `plan`'s layouts, enforcing the
/// per-core memory budget.
pub fn place_model(config: &PlmrConfig, plan: &LayerPlan, weights: &ModelWeights) -> Result<Placement> {
    let mut placement = Placement::new(plan.grid, Some(config.mem_per_core));
    for mv in weight_moves(weights, plan, plan)? {
        placement.insert(&mv.name, mv.tensor, &mv.to.1)?;
    }
    Ok(placement)
}

/// Moves weights and the prompt's KV cache from the prefill placement to
/// the decode placement. Fails if the decode grid cannot hold them.
pub fn transition(
    config: &PlmrConfig,
    prefill: &LayerPlan,
    decode: &LayerPlan,
    weights: &ModelWeights,
    caches: &[DenseKv],
    mode: KvMode,
) -> Result<Transition> {
    if prefill.shape != decode.shape {
        return Err(Error::Shape("prefill and decode plans disagree on the model shape".into()));
    }
    let shape = &decode.shape;
    if caches.len() != shape.layers {
        return Err(Error::Shape(format!("{} caches for {} layers", caches.len(), shape.layers)));
    }
    let tokens = caches.first().map_or(0, DenseKv::len);

    let moves = weight_moves(weights, prefill, decode)?;
    let mut placement = Placement::new(decode.grid, Some(config.mem_per_core));
    for mv in &moves {
        placement.insert(&mv.name, mv.tensor, &mv.to.1)?;
        if &placement.gather(&mv.name)? != mv.tensor {
            return Err(Error::Integrity(format!("{} changed while re-placing", mv.name)));
        }
    }
    let decode_cfg = grid_config(config, decode.grid);
    let mut kv = KvMeshState::from_config(&decode_cfg, placement.peak_bytes(), kv_chunk_bytes(shape, decode.grid), mode)?;
    kv.preload(tokens)?;

    let mut traffic = Traffic::default();
    for mv in &moves {
        add_tensor_traffic(&mut traffic, mv)?;
    }
    let (pg, dg) = (prefill.grid, decode.grid);
    let src_rows = tokens.div_ceil(pg.ny).max(1);
    let (src_cols, dst_cols) = (shape.head_dim.div_ceil(pg.nx), shape.head_dim.div_ceil(dg.nx));
    for t in 0..tokens {
        let dst_y = kv.row_of(t).expect("preloaded token is placed");
        for j in 0..shape.head_dim {
            let src = CoreCoord::new(j / src_cols, t / src_rows);
            let dst = CoreCoord::new(j / dst_cols, dst_y);
            traffic.add(src, dst, 2 * (shape.layers * shape.heads) as u64 * ELEM_BYTES);
        }
    }
    let mut report = traffic.report(config, "transition");
    report.peak_mem_bytes = placement.peak_bytes() + kv.peak_bytes();
    Ok(Transition { kv, placement, report })
}

/// Cycles to stream every weight into the decode grid through its top edge,
/// one link per column. This is what one decode step would pay if weights
/// were not resident.
pub fn weight_streaming_cycles(config: &PlmrConfig, shape: &ModelShape, grid: GridShape) -> u64 {
    let per_cycle = config.link_bytes_per_cycle.max(1) * grid.nx as u64;
    shape.model_weight_bytes().div_ceil(per_cycle)
}
