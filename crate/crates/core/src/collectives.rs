//! Rings, reduction trees and allreduce along lines of cores.
//!
//! A *line* is an ordered list of cores, usually one mesh row or column.
//! Several lines of equal length can be reduced in the same steps; the
//! step cost is then the slowest transfer over all lines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fabric::{xy_route, Admission, CoreCoord, Fabric, PlmrConfig, Route, RoutePath, Transfer};
use crate::report::{SimReport, StepRecord};
use crate::tiles::Matrix;

/// Send and receive neighbours of `index` on the two-hop ring of `n` cores.
///
/// Returns `(send, recv)`.
pub fn interleave(index: usize, n: usize) -> Result<(usize, usize)> {
    if n < 3 {
        return Err(Error::Domain(format!("interleave needs at least 3 cores, got {n}")));
    }
    if index >= n {
        return Err(Error::Domain(format!("index {index} outside 0..{n}")));
    }
    let (mut send, mut recv) = if index.is_multiple_of(2) {
        (usize::min(index + 2, n - 1), index.saturating_sub(2))
    } else {
        (index.saturating_sub(2), usize::min(index + 2, n - 1))
    };
    if index == 0 {
        recv = 1;
    }
    if index == n - 1 {
        if n.is_multiple_of(2) {
            recv = n - 2;
        } else {
            send = n - 2;
        }
    }
    Ok((send, recv))
}

/// A logical ring laid over physical indices `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RingMap {
    send: Vec<usize>,
    recv: Vec<usize>,
}

impl RingMap {
    pub fn from_send(send: Vec<usize>) -> Result<Self> {
        let n = send.len();
        let mut recv = vec![usize::MAX; n];
        for (i, &s) in send.iter().enumerate() {
            if s >= n || recv[s] != usize::MAX {
                return Err(Error::Domain(format!("send map is not a permutation at index {i}")));
            }
            recv[s] = i;
        }
        let ring = Self { send, recv };
        if !ring.is_single_cycle() {
            return Err(Error::Domain("send map is not a single cycle".into()));
        }
        Ok(ring)
    }

    /// Head-to-tail ring `i -> i+1` closed by the `n-1 -> 0` edge.
    pub fn linear(n: usize) -> Self {
        let send = (0..n).map(|i| (i + 1) % n.max(1)).collect();
        let recv = (0..n).map(|i| (i + n.max(1) - 1) % n.max(1)).collect();
        Self { send, recv }
    }

    /// The interleaved ring for `n >= 3`, the plain ring for smaller `n`.
    pub fn shortest(n: usize) -> Self {
        if n >= 3 {
            build_ring(n).expect("n >= 3")
        } else {
            Self::linear(n)
        }
    }

    pub fn len(&self) -> usize {
        self.send.len()
    }

    pub fn is_empty(&self) -> bool {
        self.send.is_empty()
    }

    pub fn send(&self, i: usize) -> usize {
        self.send[i]
    }

    pub fn recv(&self, i: usize) -> usize {
        self.recv[i]
    }

    pub fn is_single_cycle(&self) -> bool {
        let n = self.len();
        if n == 0 {
            return true;
        }
        let mut at = 0;
        for step in 1..=n {
            at = self.send[at];
            if at == 0 {
                return step == n;
            }
        }
        false
    }

    /// Largest physical distance between a core and the core it sends to.
    pub fn max_distance(&self) -> usize {
        self.send.iter().enumerate().map(|(i, &s)| i.abs_diff(s)).max().unwrap_or(0)
    }

    /// Physical indices in ring order starting from 0.
    pub fn order(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        let mut at = 0;
        for _ in 0..self.len() {
            out.push(at);
            at = self.send[at];
        }
        out
    }

    /// Logical position of every physical index (`position[order[p]] == p`).
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = vec![0; self.len()];
        for (p, i) in self.order().into_iter().enumerate() {
            pos[i] = p;
        }
        pos
    }
}

pub fn build_ring(n: usize) -> Result<RingMap> {
    let mut send = Vec::with_capacity(n);
    let mut recv = Vec::with_capacity(n);
    for i in 0..n {
        let (s, r) = interleave(i, n)?;
        send.push(s);
        recv.push(r);
    }
    let ring = RingMap { send, recv };
    debug_assert!(ring.is_single_cycle());
    Ok(ring)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReduceOp {
    Sum,
    Max,
}

impl ReduceOp {
    pub fn fold_into(self, acc: &mut Matrix, x: &Matrix) {
        debug_assert_eq!(acc.shape(), x.shape());
        match self {
            ReduceOp::Sum => {
                for (a, &b) in acc.data_mut().iter_mut().zip(x.data()) {
                    *a += b;
                }
            }
            ReduceOp::Max => {
                for (a, &b) in acc.data_mut().iter_mut().zip(x.data()) {
                    *a = a.max(b);
                }
            }
        }
    }
}

/// One group of a tree phase: member indices along the line and the root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeGroup {
    pub members: Vec<usize>,
    pub root: usize,
}

/// Contiguous grouped reduction tree over `n` line positions.
///
/// Groups hold `ceil(n^(1/k))` members; each group's root is its middle
/// member, so the chain reduces from both ends.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KTree {
    n: usize,
    k: usize,
    group_size: usize,
    phases: Vec<Vec<TreeGroup>>,
}

impl KTree {
    pub fn new(n: usize, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Domain("K-tree needs K >= 1".into()));
        }
        if n == 0 {
            return Err(Error::Domain("K-tree over an empty line".into()));
        }
        let group_size = kth_root_ceil(n, k);
        let mut phases = Vec::new();
        let mut level: Vec<usize> = (0..n).collect();
        while level.len() > 1 {
            let groups: Vec<TreeGroup> = level
                .chunks(group_size)
                .map(|c| TreeGroup { members: c.to_vec(), root: c[(c.len() - 1) / 2] })
                .collect();
            level = groups.iter().map(|g| g.root).collect();
            phases.push(groups);
        }
        debug_assert!(phases.len() <= k);
        Ok(Self { n, k, group_size, phases })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn phases(&self) -> &[Vec<TreeGroup>] {
        &self.phases
    }

    pub fn effective_phases(&self) -> usize {
        self.phases.len()
    }

    pub fn root(&self) -> usize {
        self.phases.last().map_or(0, |p| p[0].root)
    }

    /// Routing stages on the critical path when line positions are one hop apart.
    pub fn stage_bound(&self) -> u32 {
        self.phases
            .iter()
            .map(|p| {
                p.iter()
                    .map(|g| {
                        let r = g.members.iter().position(|&m| m == g.root).unwrap();
                        r.max(g.members.len() - 1 - r) as u32
                    })
                    .max()
                    .unwrap_or(0)
            })
            .sum()
    }
}

/// Smallest `g >= 1` with `g^k >= n`.
fn kth_root_ceil(n: usize, k: usize) -> usize {
    let mut g = 1usize;
    while (g as u128).checked_pow(k as u32).is_none_or(|p| p < n as u128) {
        g += 1;
    }
    g.max(if n > 1 { 2 } else { 1 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Discipline {
    /// Chain to the head core, then broadcast.
    Pipeline,
    /// Reduce-scatter and allgather around the shortest ring.
    Ring,
    /// Grouped tree with `k` phases.
    KTree { k: usize },
}

impl std::fmt::Display for Discipline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Discipline::Pipeline => f.write_str("pipeline"),
            Discipline::Ring => f.write_str("ring"),
            Discipline::KTree { k } => write!(f, "ktree{k}"),
        }
    }
}

/// How an allreduce runs: the discipline, the operator and, for K-trees,
/// whether the root broadcasts the result back.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Allreduce {
    pub discipline: Discipline,
    pub op: ReduceOp,
    pub broadcast: bool,
}

impl Allreduce {
    pub fn new(discipline: Discipline, op: ReduceOp) -> Self {
        Self { discipline, op, broadcast: false }
    }

    pub fn sum(discipline: Discipline) -> Self {
        Self::new(discipline, ReduceOp::Sum)
    }

    pub fn with_broadcast(mut self, on: bool) -> Self {
        self.broadcast = on;
        self
    }

    /// Whether every core ends up holding the result.
    pub fn result_everywhere(&self) -> bool {
        !matches!(self.discipline, Discipline::KTree { .. }) || self.broadcast
    }
}

/// Result holder after an allreduce over a line of `n` cores: every index for
/// full allreduces, only the tree root otherwise.
pub fn result_holder(discipline: Discipline, n: usize) -> Result<usize> {
    match discipline {
        Discipline::KTree { k } => Ok(KTree::new(n, k)?.root()),
        _ => Ok(0),
    }
}

/// Reduces `tiles[l][i]` (tile at `lines[l][i]`) along every line at once.
///
/// Afterwards the reduction sits at every core (pipeline, ring, K-tree with
/// broadcast) or at the tree root, with intermediate roots holding their
/// partial results. Returns one step record per communication step.
pub fn allreduce(
    fabric: &mut Fabric,
    lines: &[Vec<CoreCoord>],
    tiles: &mut [Vec<Matrix>],
    how: Allreduce,
) -> Result<Vec<StepRecord>> {
    let n = check_lines(fabric.config(), lines, tiles)?;
    if n <= 1 {
        return Ok(Vec::new());
    }
    let bytes = tiles[0][0].bytes();
    match how.discipline {
        Discipline::Pipeline => {
            for line in tiles.iter_mut() {
                let total = fold(line.iter(), how.op);
                line.iter_mut().for_each(|t| *t = total.clone());
            }
            Ok(pipeline_steps(fabric, lines, bytes))
        }
        Discipline::Ring => {
            for line in tiles.iter_mut() {
                let total = fold(line.iter(), how.op);
                line.iter_mut().for_each(|t| *t = total.clone());
            }
            Ok(ring_steps(fabric, lines, bytes))
        }
        Discipline::KTree { k } => {
            let tree = KTree::new(n, k)?;
            for line in tiles.iter_mut() {
                for phase in tree.phases() {
                    for g in phase {
                        let partial = fold(g.members.iter().map(|&m| &line[m]), how.op);
                        line[g.root] = partial;
                    }
                }
                if how.broadcast {
                    let total = line[tree.root()].clone();
                    line.iter_mut().for_each(|t| *t = total.clone());
                }
            }
            Ok(ktree_steps(fabric, lines, &tree, bytes, how.broadcast))
        }
    }
}

fn check_lines(config: &PlmrConfig, lines: &[Vec<CoreCoord>], tiles: &[Vec<Matrix>]) -> Result<usize> {
    if lines.len() != tiles.len() {
        return Err(Error::Shape(format!("{} lines but {} tile groups", lines.len(), tiles.len())));
    }
    let n = lines.first().map_or(0, Vec::len);
    let shape = tiles.first().and_then(|t| t.first()).map(Matrix::shape);
    for (line, group) in lines.iter().zip(tiles) {
        if line.len() != n || group.len() != n {
            return Err(Error::Shape(format!(
                "lines must have equal length: expected {n}, got {} cores and {} tiles",
                line.len(),
                group.len()
            )));
        }
        for &c in line {
            config.check(c)?;
        }
        if let Some(t) = group.iter().find(|t| Some(t.shape()) != shape) {
            return Err(Error::Shape(format!(
                "allreduce tiles disagree: {:?} vs {:?}",
                shape.unwrap(),
                t.shape()
            )));
        }
    }
    Ok(n)
}

fn fold<'a>(mut it: impl Iterator<Item = &'a Matrix>, op: ReduceOp) -> Matrix {
    let mut acc = it.next().expect("non-empty group").clone();
    for t in it {
        op.fold_into(&mut acc, t);
    }
    acc
}

fn line_key(config: &PlmrConfig, line: &[CoreCoord]) -> [u32; 2] {
    let idx = |c: CoreCoord| (c.y * config.width + c.x) as u32;
    [idx(line[0]), idx(*line.last().unwrap())]
}

/// Cores covered by the chain from `line[from]` to `line[to]` along the line.
fn span_cores(line: &[CoreCoord], from: usize, to: usize) -> Vec<CoreCoord> {
    let (a, b) = (from.min(to), from.max(to));
    let mut cores = Vec::new();
    for w in line[a..=b].windows(2) {
        cores.extend(xy_route(w[0], w[1]));
    }
    if a == b {
        cores.push(line[a]);
    }
    cores
}

/// Transfer along an installed channel; a refused channel is relayed at
/// every intermediate core.
fn channel_transfer(
    fabric: &mut Fabric,
    route: Route,
    src: CoreCoord,
    dst: CoreCoord,
    stages: u32,
    bytes: u64,
) -> Transfer {
    let path = RoutePath::preconfigured(src, dst);
    let stages = match fabric.install(&route) {
        Admission::Admitted => stages,
        Admission::RelayRequired => stages.max(path.hops().saturating_sub(1)),
    };
    Transfer::with_stages(path, stages, bytes)
}

fn pipeline_steps(fabric: &mut Fabric, lines: &[Vec<CoreCoord>], bytes: u64) -> Vec<StepRecord> {
    let n = lines[0].len();
    let mut reduce = Vec::new();
    let mut bcast = Vec::new();
    for line in lines {
        let [a, b] = line_key(fabric.config(), line);
        let cores = span_cores(line, 0, n - 1);
        let r = Route::channel("pipeline-reduce", [a, b, 0], cores.clone());
        reduce.push(channel_transfer(fabric, r, line[n - 1], line[0], (n - 1) as u32, bytes));
        let r = Route::channel("pipeline-bcast", [a, b, 0], cores);
        bcast.push(channel_transfer(fabric, r, line[0], line[n - 1], 0, bytes));
    }
    vec![
        StepRecord::comm("reduce", fabric.step_cost(&reduce)),
        StepRecord::comm("broadcast", fabric.step_cost(&bcast)),
    ]
}

fn ring_steps(fabric: &mut Fabric, lines: &[Vec<CoreCoord>], bytes: u64) -> Vec<StepRecord> {
    let n = lines[0].len();
    let ring = RingMap::shortest(n);
    let chunk = bytes.div_ceil(n as u64);
    let mut edges = Vec::with_capacity(lines.len() * n);
    for line in lines {
        for i in 0..n {
            edges.push(fabric.connect(line[i], line[ring.send(i)], chunk));
        }
    }
    let staged = |extra: u32| -> Vec<Transfer> {
        edges.iter().map(|t| Transfer::with_stages(t.path, t.stages + extra, t.bytes)).collect()
    };
    let mut steps = Vec::with_capacity(2 * (n - 1));
    for s in 0..n - 1 {
        steps.push(StepRecord::comm(format!("reduce-scatter {s}"), fabric.step_cost(&staged(1))));
    }
    for s in 0..n - 1 {
        let extra = u32::from(s + 1 < n - 1);
        steps.push(StepRecord::comm(format!("allgather {s}"), fabric.step_cost(&staged(extra))));
    }
    steps
}

fn ktree_steps(
    fabric: &mut Fabric,
    lines: &[Vec<CoreCoord>],
    tree: &KTree,
    bytes: u64,
    broadcast: bool,
) -> Vec<StepRecord> {
    let mut steps = Vec::new();
    for (p, phase) in tree.phases().iter().enumerate() {
        let mut pattern = Vec::new();
        for line in lines {
            let [a, b] = line_key(fabric.config(), line);
            for (gi, g) in phase.iter().enumerate() {
                let first = g.members[0];
                let last = *g.members.last().unwrap();
                let r = g.members.iter().position(|&m| m == g.root).unwrap();
                let route = Route::channel(
                    "ktree-reduce",
                    [a, b, ((p as u32) << 16) | gi as u32],
                    span_cores(line, first, last),
                );
                if first != g.root {
                    let t = channel_transfer(fabric, route.clone(), line[first], line[g.root], r as u32, bytes);
                    pattern.push(t);
                }
                if last != g.root {
                    let stages = (g.members.len() - 1 - r) as u32;
                    let t = channel_transfer(fabric, route, line[last], line[g.root], stages, bytes);
                    pattern.push(t);
                }
            }
        }
        steps.push(StepRecord::comm(format!("phase {p}"), fabric.step_cost(&pattern)));
    }
    if broadcast {
        let n = tree.n();
        let root = tree.root();
        let far = if root >= n - 1 - root { 0 } else { n - 1 };
        let mut pattern = Vec::new();
        for line in lines {
            let [a, b] = line_key(fabric.config(), line);
            let route = Route::channel("ktree-bcast", [a, b, 0], span_cores(line, 0, n - 1));
            pattern.push(channel_transfer(fabric, route, line[root], line[far], 0, bytes));
        }
        steps.push(StepRecord::comm("broadcast", fabric.step_cost(&pattern)));
    }
    steps
}

/// Cores of row `y` from left to right.
pub fn row_line(config: &PlmrConfig, y: usize) -> Vec<CoreCoord> {
    (0..config.width).map(|x| CoreCoord::new(x, y)).collect()
}

/// Cores of column `x` from top to bottom.
pub fn column_line(config: &PlmrConfig, x: usize) -> Vec<CoreCoord> {
    (0..config.height).map(|y| CoreCoord::new(x, y)).collect()
}

fn single_line(config: &PlmrConfig, line: &[CoreCoord], tiles: &mut Vec<Matrix>, how: Allreduce, name: &str) -> Result<SimReport> {
    let mut fabric = Fabric::new(config)?;
    let lines = vec![line.to_vec()];
    let mut groups = vec![std::mem::take(tiles)];
    let result = allreduce(&mut fabric, &lines, &mut groups, how);
    *tiles = groups.pop().unwrap();
    let steps = result?;
    let mut report = SimReport::new(name);
    steps.into_iter().for_each(|s| report.push(s));
    report.peak_mem_bytes = tiles.first().map_or(0, |t| 2 * t.bytes());
    report.absorb_routing(&fabric);
    if let Discipline::KTree { k } = how.discipline {
        let tree = KTree::new(line.len().max(1), k)?;
        if tree.effective_phases() < k {
            report.note(format!(
                "K={k} over {} cores runs {} effective phase(s)",
                line.len(),
                tree.effective_phases()
            ));
        }
    }
    Ok(report)
}

/// Sum over one line; every core receives the total.
pub fn pipeline_allreduce(config: &PlmrConfig, line: &[CoreCoord], tiles: &mut Vec<Matrix>) -> Result<SimReport> {
    single_line(config, line, tiles, Allreduce::sum(Discipline::Pipeline), "pipeline-allreduce")
}

pub fn ring_allreduce(config: &PlmrConfig, line: &[CoreCoord], tiles: &mut Vec<Matrix>) -> Result<SimReport> {
    single_line(config, line, tiles, Allreduce::sum(Discipline::Ring), "ring-allreduce")
}

/// Sum over one line into the tree root, optionally broadcast back.
pub fn ktree_allreduce(
    config: &PlmrConfig,
    line: &[CoreCoord],
    tiles: &mut Vec<Matrix>,
    k: usize,
    broadcast: bool,
) -> Result<SimReport> {
    let how = Allreduce::sum(Discipline::KTree { k }).with_broadcast(broadcast);
    single_line(config, line, tiles, how, "ktree-allreduce")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn row_cfg(n: usize) -> PlmrConfig {
        PlmrConfig::with_grid(n, 1)
    }

    fn ones(n: usize) -> Vec<Matrix> {
        vec![Matrix::filled(2, 2, 1.0); n]
    }

    #[test]
    fn interleave_hand_traces() {
        assert_eq!(interleave(2, 5).unwrap(), (4, 0));
        assert_eq!(interleave(0, 5).unwrap(), (2, 1));
        assert_eq!(interleave(4, 5).unwrap(), (3, 2));
        assert_eq!(interleave(1, 5).unwrap(), (0, 3));
        assert!(matches!(interleave(0, 2), Err(Error::Domain(_))));
        assert!(interleave(5, 5).is_err());
    }

    #[test]
    fn small_rings() {
        assert_eq!(build_ring(5).unwrap().order(), vec![0, 2, 4, 3, 1]);
        assert_eq!(build_ring(4).unwrap().order(), vec![0, 2, 3, 1]);
        let r3 = build_ring(3).unwrap();
        assert_eq!(r3.order(), vec![0, 2, 1]);
        assert_eq!(r3.max_distance(), 2);
        assert_eq!(RingMap::linear(5).max_distance(), 4);
        assert!(RingMap::from_send(vec![1, 0, 2]).is_err());
    }

    #[test]
    fn ring_property_up_to_256() {
        for n in 3..=256 {
            let ring = build_ring(n).unwrap();
            assert!(ring.is_single_cycle(), "n={n}");
            assert!(ring.max_distance() <= 2, "n={n}");
            let pos = ring.positions();
            for i in 0..n {
                assert_eq!(ring.recv(ring.send(i)), i);
                assert_eq!(pos[ring.send(i)], (pos[i] + 1) % n);
            }
        }
    }

    fn has_unit_cycle(n: usize) -> bool {
        fn extend(path: &mut Vec<usize>, used: &mut [bool], n: usize) -> bool {
            if path.len() == n {
                return path[0].abs_diff(*path.last().unwrap()) <= 1;
            }
            for next in 0..n {
                if !used[next] && next.abs_diff(*path.last().unwrap()) <= 1 {
                    used[next] = true;
                    path.push(next);
                    if extend(path, used, n) {
                        return true;
                    }
                    path.pop();
                    used[next] = false;
                }
            }
            false
        }
        let mut used = vec![false; n];
        used[0] = true;
        extend(&mut vec![0], &mut used, n)
    }

    #[test]
    fn no_one_hop_ring_exists() {
        for n in 3..=10 {
            assert!(!has_unit_cycle(n), "n={n}");
        }
    }

    #[test]
    fn single_core_is_free() {
        let cfg = row_cfg(1);
        let line = row_line(&cfg, 0);
        for f in [pipeline_allreduce, ring_allreduce] {
            let mut t = vec![Matrix::filled(2, 2, 7.0)];
            let r = f(&cfg, &line, &mut t).unwrap();
            assert_eq!(t[0], Matrix::filled(2, 2, 7.0));
            assert_eq!(r.total_cycles(), 0);
        }
        let mut t = vec![Matrix::filled(2, 2, 7.0)];
        assert_eq!(ktree_allreduce(&cfg, &line, &mut t, 2, true).unwrap().total_cycles(), 0);
    }

    #[test]
    fn pipeline_four_ones() {
        let cfg = row_cfg(4);
        let mut t = ones(4);
        let r = pipeline_allreduce(&cfg, &row_line(&cfg, 0), &mut t).unwrap();
        assert!(t.iter().all(|m| *m == Matrix::filled(2, 2, 4.0)));
        assert_eq!(r.hops_total(), 6);
        assert_eq!(r.routing_stages_total(), 3);
        assert_eq!(r.total_cycles(), 6 + 3 * 3);
        assert!(r.max_paths_per_core <= 2);
    }

    #[test]
    fn ring_four_ones() {
        let cfg = row_cfg(4);
        let mut t = ones(4);
        let r = ring_allreduce(&cfg, &row_line(&cfg, 0), &mut t).unwrap();
        assert!(t.iter().all(|m| *m == Matrix::filled(2, 2, 4.0)));
        assert_eq!(r.steps.len(), 6);
        assert_eq!(r.total_cycles(), 6 * 2 + 5 * 3);
        let formula = (2 * cfg.alpha + cfg.beta) * 4;
        assert!(r.total_cycles() <= 2 * formula && r.total_cycles() * 2 >= formula);
    }

    #[test]
    fn two_cores_pipeline_equals_ring() {
        let cfg = row_cfg(2);
        let line = row_line(&cfg, 0);
        let p = pipeline_allreduce(&cfg, &line, &mut ones(2)).unwrap();
        let r = ring_allreduce(&cfg, &line, &mut ones(2)).unwrap();
        assert_eq!(p.total_cycles(), r.total_cycles());
        assert_eq!(p.total_cycles(), 2 * cfg.alpha + cfg.beta);
    }

    #[test]
    fn ktree_sixteen_two_phases() {
        let tree = KTree::new(16, 2).unwrap();
        assert_eq!(tree.group_size(), 4);
        assert_eq!(tree.effective_phases(), 2);
        assert_eq!(tree.stage_bound(), 4);
        let cfg = row_cfg(16);
        let line = row_line(&cfg, 0);
        let mut t = ones(16);
        let r = ktree_allreduce(&cfg, &line, &mut t, 2, false).unwrap();
        assert_eq!(t[tree.root()], Matrix::filled(2, 2, 16.0));
        assert_eq!(r.routing_stages_total(), 4);
        assert!(r.hops_total() <= 16);
        assert!(r.max_paths_per_core <= 3);
        let p = pipeline_allreduce(&cfg, &line, &mut ones(16)).unwrap();
        assert_eq!(p.routing_stages_total(), 15);
    }

    #[test]
    fn ktree_nine_random_integers() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let tiles: Vec<Matrix> = (0..9).map(|_| Matrix::random_ints(3, 2, -50, 50, &mut rng)).collect();
        let mut want = Matrix::zeros(3, 2);
        for t in &tiles {
            for (w, v) in want.data_mut().iter_mut().zip(t.data()) {
                *w += v;
            }
        }
        let cfg = row_cfg(9);
        let mut got = tiles.clone();
        ktree_allreduce(&cfg, &row_line(&cfg, 0), &mut got, 2, false).unwrap();
        assert_eq!(got[KTree::new(9, 2).unwrap().root()], want);
    }

    #[test]
    fn ktree_large_k_degenerates() {
        let tree = KTree::new(4, 6).unwrap();
        assert_eq!(tree.group_size(), 2);
        assert_eq!(tree.effective_phases(), 2);
        let cfg = row_cfg(4);
        let r = ktree_allreduce(&cfg, &row_line(&cfg, 0), &mut ones(4), 6, true).unwrap();
        assert!(r.notes.iter().any(|n| n.contains("effective")));
        assert!(KTree::new(4, 0).is_err());
        let one = KTree::new(5, 1).unwrap();
        assert_eq!(one.phases().len(), 1);
        assert_eq!(one.phases()[0][0].members.len(), 5);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let cfg = row_cfg(3);
        let mut t = vec![Matrix::zeros(2, 2), Matrix::zeros(2, 2), Matrix::zeros(2, 3)];
        assert!(matches!(pipeline_allreduce(&cfg, &row_line(&cfg, 0), &mut t), Err(Error::Shape(_))));
        let mut short = ones(2);
        assert!(ring_allreduce(&cfg, &row_line(&cfg, 0), &mut short).is_err());
    }

    #[test]
    fn max_reduce_over_columns() {
        let cfg = PlmrConfig::with_grid(2, 3);
        let lines: Vec<_> = (0..2).map(|x| column_line(&cfg, x)).collect();
        let mut tiles: Vec<Vec<Matrix>> = (0..2)
            .map(|x| (0..3).map(|y| Matrix::filled(1, 1, (x * 10 + y) as f32)).collect())
            .collect();
        let mut fabric = Fabric::new(&cfg).unwrap();
        let how = Allreduce::new(Discipline::KTree { k: 2 }, ReduceOp::Max).with_broadcast(true);
        allreduce(&mut fabric, &lines, &mut tiles, how).unwrap();
        assert!(tiles[0].iter().all(|t| t.get(0, 0) == 2.0));
        assert!(tiles[1].iter().all(|t| t.get(0, 0) == 12.0));
    }

    #[test]
    fn ktree_beats_baselines_from_sixteen() {
        for n in [16usize, 25, 32, 64, 100] {
            let cfg = row_cfg(n);
            let line = row_line(&cfg, 0);
            let k = ktree_allreduce(&cfg, &line, &mut ones(n), 2, true).unwrap();
            let p = pipeline_allreduce(&cfg, &line, &mut ones(n)).unwrap();
            let r = ring_allreduce(&cfg, &line, &mut ones(n)).unwrap();
            assert!(k.total_cycles() < p.total_cycles(), "n={n}");
            assert!(k.total_cycles() < r.total_cycles(), "n={n}");
        }
    }

    proptest! {
        #[test]
        fn disciplines_agree(n in 1usize..24, k in 1usize..4, seed in any::<u64>()) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let tiles: Vec<Matrix> = (0..n).map(|_| Matrix::random_ints(2, 3, -9, 9, &mut rng)).collect();
            let cfg = row_cfg(n);
            let line = row_line(&cfg, 0);
            let mut p = tiles.clone();
            pipeline_allreduce(&cfg, &line, &mut p).unwrap();
            let mut r = tiles.clone();
            ring_allreduce(&cfg, &line, &mut r).unwrap();
            let mut t = tiles.clone();
            let rep = ktree_allreduce(&cfg, &line, &mut t, k, true).unwrap();
            prop_assert_eq!(&p, &r);
            prop_assert_eq!(&p, &t);
            prop_assert!(rep.max_paths_per_core as usize <= k + 1);
        }

        #[test]
        fn tree_groups_partition_each_phase(n in 1usize..300, k in 1usize..5) {
            let tree = KTree::new(n, k).unwrap();
            prop_assert!(tree.effective_phases() <= k);
            let mut level: Vec<usize> = (0..n).collect();
            for phase in tree.phases() {
                let members: Vec<usize> = phase.iter().flat_map(|g| g.members.clone()).collect();
                prop_assert_eq!(&members, &level);
                level = phase.iter().map(|g| g.root).collect();
            }
            prop_assert_eq!(level, vec![tree.root()]);
            let g = tree.group_size() as u32;
            prop_assert!(tree.stage_bound() <= (k as u32) * g.div_ceil(2));
        }
    }
}
