//! Distributed GEMM on the mesh: the two-hop cyclic-shift algorithm, Cannon,
//! SUMMA, allgather, and `A * B^T` without a physical transpose.
//!
//! Every function runs the numbers for real on per-core tiles and returns the
//! gathered result together with a [`SimReport`]. The mesh shape comes from
//! the config; a non-square mesh is covered by a square logical grid whose
//! side is `lcm(width, height)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::collectives::{allreduce, Allreduce, Discipline, RingMap};
use crate::error::{Error, Result};
use crate::fabric::{CoreCoord, Fabric, PlmrConfig, Route, RoutePath, Transfer};
use crate::report::{SimReport, StepRecord, Violation, ViolationKind};
use crate::tiles::Matrix;

/// `C = A * B` with `A: M x K` and `B: K x N`.
#[derive(Debug, Clone, PartialEq)]
pub struct GemmProblem {
    pub a: Matrix,
    pub b: Matrix,
}

impl GemmProblem {
    pub fn new(a: Matrix, b: Matrix) -> Result<Self> {
        if a.cols() != b.rows() {
            return Err(Error::Shape(format!(
                "A is {}x{} but B is {}x{}",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            )));
        }
        if a.is_empty() || b.is_empty() {
            return Err(Error::Shape("empty GEMM operand".into()));
        }
        Ok(Self { a, b })
    }

    /// Integer-valued fixture in `[-8, 8]`, exact under f32 accumulation.
    pub fn random_ints(m: usize, k: usize, n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Matrix::random_ints(m, k, -8, 8, &mut rng);
        let b = Matrix::random_ints(k, n, -8, 8, &mut rng);
        Self { a, b }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.a.rows(), self.a.cols(), self.b.cols())
    }
}

/// Product of a distributed run and its cost report.
#[derive(Debug, Clone)]
pub struct GemmRun {
    pub c: Matrix,
    pub report: SimReport,
}

impl GemmRun {
    /// Steps of the compute-shift loop, excluding alignment.
    pub fn loop_steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.report.steps_labelled("step")
    }

    pub fn alignment_steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.report.steps_labelled("align")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GemmAlgorithm {
    Mesh,
    Cannon,
    Summa,
    Allgather,
}

impl GemmAlgorithm {
    pub const ALL: [GemmAlgorithm; 4] =
        [GemmAlgorithm::Mesh, GemmAlgorithm::Cannon, GemmAlgorithm::Summa, GemmAlgorithm::Allgather];

    pub fn name(self) -> &'static str {
        match self {
            GemmAlgorithm::Mesh => "meshgemm",
            GemmAlgorithm::Cannon => "cannon",
            GemmAlgorithm::Summa => "summa",
            GemmAlgorithm::Allgather => "allgather",
        }
    }

    pub fn run(self, config: &PlmrConfig, problem: &GemmProblem) -> Result<GemmRun> {
        match self {
            GemmAlgorithm::Mesh => mesh_gemm(config, problem),
            GemmAlgorithm::Cannon => cannon_gemm(config, problem),
            GemmAlgorithm::Summa => summa_gemm(config, problem),
            GemmAlgorithm::Allgather => allgather_gemm(config, problem),
        }
    }
}

impl std::str::FromStr for GemmAlgorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mesh" | "meshgemm" => Ok(GemmAlgorithm::Mesh),
            "cannon" => Ok(GemmAlgorithm::Cannon),
            "summa" => Ok(GemmAlgorithm::Summa),
            "allgather" => Ok(GemmAlgorithm::Allgather),
            other => Err(Error::Config(format!("unknown GEMM algorithm {other:?}"))),
        }
    }
}

/// Reference triple loop.
pub fn dense_gemm_oracle(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(Matrix::from_fn(a.rows(), b.cols(), |i, j| {
        (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum()
    }))
}

/// Square logical grid laid over a physical `width x height` mesh.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogicalGrid {
    pub side: usize,
    pub width: usize,
    pub height: usize,
}

impl LogicalGrid {
    /// Physical core hosting logical core `(lx, ly)`.
    pub fn phys(&self, lx: usize, ly: usize) -> CoreCoord {
        CoreCoord::new(lx / (self.side / self.width), ly / (self.side / self.height))
    }

    pub fn tiles_per_core(&self) -> usize {
        (self.side / self.width) * (self.side / self.height)
    }

    pub fn is_identity(&self) -> bool {
        self.side == self.width && self.side == self.height
    }
}

/// Logical grid of side `lcm(height, width)` for a physical mesh.
pub fn embed_nonsquare(height: usize, width: usize) -> LogicalGrid {
    let side = lcm(height.max(1), width.max(1));
    LogicalGrid { side, width, height }
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

/// Tiles of one operand on the logical grid, indexed `ly * side + lx`.
struct TileGrid {
    side: usize,
    tiles: Vec<Matrix>,
}

impl TileGrid {
    /// Splits `m` into `side x side` zero-padded tiles of `tr x tc`.
    fn split(m: &Matrix, side: usize, tr: usize, tc: usize) -> Self {
        let mut tiles = Vec::with_capacity(side * side);
        for ly in 0..side {
            for lx in 0..side {
                tiles.push(m.block(ly * tr, lx * tc, tr, tc));
            }
        }
        Self { side, tiles }
    }

    fn at(&self, lx: usize, ly: usize) -> &Matrix {
        &self.tiles[ly * self.side + lx]
    }

    fn at_mut(&mut self, lx: usize, ly: usize) -> &mut Matrix {
        &mut self.tiles[ly * self.side + lx]
    }

    fn assemble(&self, rows: usize, cols: usize) -> Matrix {
        let (tr, tc) = self.tiles[0].shape();
        let mut out = Matrix::zeros(rows, cols);
        for ly in 0..self.side {
            for lx in 0..self.side {
                out.write_block(ly * tr, lx * tc, self.at(lx, ly));
            }
        }
        out
    }
}

/// Shared state of one GEMM simulation.
struct Sim {
    grid: LogicalGrid,
    fabric: Fabric,
    report: SimReport,
}

impl Sim {
    fn new(config: &PlmrConfig, name: &str) -> Result<Self> {
        let fabric = Fabric::new(config)?;
        let grid = embed_nonsquare(config.height, config.width);
        let mut report = SimReport::new(name);
        if !grid.is_identity() {
            report.note(format!(
                "{}x{} mesh runs a {}x{} logical grid, {} tiles per core",
                config.width,
                config.height,
                grid.side,
                grid.side,
                grid.tiles_per_core()
            ));
        }
        Ok(Self { grid, fabric, report })
    }

    fn config(&self) -> &PlmrConfig {
        self.fabric.config()
    }

    /// Per-core bytes for `per_tile` bytes per logical core; errors when
    /// `strict` and the budget is exceeded, flags an M violation otherwise.
    fn charge_memory(&mut self, per_tile: u64, what: &str, strict: bool) -> Result<()> {
        let needed = per_tile * self.grid.tiles_per_core() as u64;
        self.report.peak_mem_bytes = self.report.peak_mem_bytes.max(needed);
        let budget = self.config().mem_per_core;
        if needed > budget {
            let core = CoreCoord::new(0, 0);
            if strict {
                return Err(Error::Capacity { core, needed, budget, what: what.to_string() });
            }
            self.report.violations.push(Violation {
                kind: ViolationKind::Memory,
                core: Some(core),
                detail: format!("{what}: {needed} bytes per core, budget {budget}"),
            });
        }
        Ok(())
    }

    fn compute_cycles(&self, macs_per_tile: u64) -> u64 {
        self.config().compute_cycles(macs_per_tile * self.grid.tiles_per_core() as u64)
    }

    /// Transfers moving every tile of the selected rows one position along
    /// `ring` (A moves along X), or of the selected columns (B moves along Y).
    fn ring_shift(&mut self, ring: &RingMap, along_x: bool, active: &[bool], bytes: u64) -> Vec<Transfer> {
        let n = self.grid.side;
        let mut pattern = Vec::new();
        for line in (0..n).filter(|&l| active[l]) {
            for i in 0..n {
                let (src, dst) = if along_x {
                    (self.grid.phys(i, line), self.grid.phys(ring.send(i), line))
                } else {
                    (self.grid.phys(line, i), self.grid.phys(line, ring.send(i)))
                };
                pattern.push(self.fabric.connect(src, dst, bytes));
            }
        }
        pattern
    }

    fn finish(mut self) -> SimReport {
        self.report.absorb_routing(&self.fabric);
        self.report
    }
}

/// Moves every tile one position along `ring` on rows (`along_x`) or columns,
/// for the selected lines only.
fn rotate(grid: &mut TileGrid, ring: &RingMap, along_x: bool, active: &[bool]) {
    let n = grid.side;
    for line in (0..n).filter(|&l| active[l]) {
        let moved: Vec<Matrix> = (0..n)
            .map(|i| {
                let src = ring.recv(i);
                if along_x {
                    grid.at(src, line).clone()
                } else {
                    grid.at(line, src).clone()
                }
            })
            .collect();
        for (i, t) in moved.into_iter().enumerate() {
            if along_x {
                *grid.at_mut(i, line) = t;
            } else {
                *grid.at_mut(line, i) = t;
            }
        }
    }
}

fn tile_dims(problem: &GemmProblem, side: usize) -> (usize, usize, usize) {
    let (m, k, n) = problem.dims();
    (m.div_ceil(side), k.div_ceil(side), n.div_ceil(side))
}

/// Cyclic-shift GEMM over `ring` with optional skew alignment.
fn shift_gemm(config: &PlmrConfig, problem: &GemmProblem, name: &str, interleaved: bool, align: bool) -> Result<GemmRun> {
    let mut sim = Sim::new(config, name)?;
    let n = sim.grid.side;
    let (tm, tk, tn) = tile_dims(problem, n);
    let mut a = TileGrid::split(&problem.a, n, tm, tk);
    let mut b = TileGrid::split(&problem.b, n, tk, tn);
    let mut c = TileGrid::split(&Matrix::zeros(tm * n, tn * n), n, tm, tn);
    let (a_bytes, b_bytes, c_bytes) = (a.tiles[0].bytes(), b.tiles[0].bytes(), c.tiles[0].bytes());
    sim.charge_memory(2 * a_bytes + 2 * b_bytes + c_bytes, "A, B, C tiles and receive buffers", true)?;

    let ring = if interleaved { RingMap::shortest(n) } else { RingMap::linear(n) };
    if interleaved && n == 2 {
        sim.report.note("2-core rings fall back to neighbour exchange");
    }
    let pos = ring.positions();

    if align && n > 1 {
        let mut left: Vec<usize> = (0..n).map(|l| (n - pos[l]) % n).collect();
        for s in 0.. {
            let active: Vec<bool> = left.iter().map(|&r| r > 0).collect();
            if !active.iter().any(|&x| x) {
                break;
            }
            let mut pattern = sim.ring_shift(&ring, true, &active, a_bytes);
            pattern.extend(sim.ring_shift(&ring, false, &active, b_bytes));
            rotate(&mut a, &ring, true, &active);
            rotate(&mut b, &ring, false, &active);
            let cost = sim.fabric.step_cost(&pattern);
            sim.report.push(StepRecord::comm(format!("align {s}"), cost));
            left.iter_mut().for_each(|r| *r = r.saturating_sub(1));
        }
    } else if !align {
        sim.report.note("alignment skipped");
    }

    let all = vec![true; n];
    let macs = (tm * tk * tn) as u64;
    for t in 0..n {
        for ly in 0..n {
            for lx in 0..n {
                let (at, bt) = (a.at(lx, ly).clone(), b.at(lx, ly).clone());
                c.at_mut(lx, ly).matmul_acc(&at, &bt)?;
            }
        }
        let cost = if n > 1 {
            let mut pattern = sim.ring_shift(&ring, true, &all, a_bytes);
            pattern.extend(sim.ring_shift(&ring, false, &all, b_bytes));
            rotate(&mut a, &ring, true, &all);
            rotate(&mut b, &ring, false, &all);
            sim.fabric.step_cost(&pattern)
        } else {
            Default::default()
        };
        let compute = sim.compute_cycles(macs);
        sim.report.push(StepRecord::overlapped(format!("step {t}"), cost, compute));
    }
    let (m, _, nn) = problem.dims();
    Ok(GemmRun { c: c.assemble(m, nn), report: sim.finish() })
}

/// Cyclic-shift GEMM on two-hop interleaved rings.
pub fn mesh_gemm(config: &PlmrConfig, problem: &GemmProblem) -> Result<GemmRun> {
    shift_gemm(config, problem, "meshgemm", true, true)
}

/// [`mesh_gemm`] without the skew. Produces a wrong product on any
/// non-trivial input; kept for negative-control checks.
pub fn mesh_gemm_unaligned(config: &PlmrConfig, problem: &GemmProblem) -> Result<GemmRun> {
    shift_gemm(config, problem, "meshgemm-unaligned", true, false)
}

/// Cyclic-shift GEMM on head-to-tail rings closed by a preconfigured wrap path.
pub fn cannon_gemm(config: &PlmrConfig, problem: &GemmProblem) -> Result<GemmRun> {
    shift_gemm(config, problem, "cannon", false, true)
}

/// Step `k` relays A's column `k` along every row and B's row `k` along
/// every column, one routing stage per receiving core.
fn broadcast_gemm(config: &PlmrConfig, problem: &GemmProblem, name: &str, keep_panels: bool) -> Result<GemmRun> {
    let mut sim = Sim::new(config, name)?;
    let n = sim.grid.side;
    let (tm, tk, tn) = tile_dims(problem, n);
    let a = TileGrid::split(&problem.a, n, tm, tk);
    let b = TileGrid::split(&problem.b, n, tk, tn);
    let mut c = TileGrid::split(&Matrix::zeros(tm * n, tn * n), n, tm, tn);
    let (a_bytes, b_bytes, c_bytes) = (a.tiles[0].bytes(), b.tiles[0].bytes(), c.tiles[0].bytes());
    if keep_panels {
        let panels = n as u64 * (a_bytes + b_bytes) + c_bytes;
        sim.charge_memory(panels, "gathered A row panel, B column panel and C tile", false)?;
    } else {
        sim.charge_memory(2 * a_bytes + 2 * b_bytes + c_bytes, "A, B, C tiles and receive buffers", true)?;
    }

    let all: Vec<CoreCoord> = (0..n).flat_map(|y| (0..n).map(move |x| (x, y))).map(|(x, y)| sim.grid.phys(x, y)).collect();
    let macs = (tm * tk * tn) as u64;
    for k in 0..n {
        if n > 1 {
            sim.fabric.demand(&Route::channel("broadcast-root", [k as u32, 0, 0], all.clone()));
        }
        let far = if k >= n - 1 - k { 0 } else { n - 1 };
        let mut pattern = Vec::with_capacity(2 * n);
        for line in 0..n {
            let (src, dst) = (sim.grid.phys(k, line), sim.grid.phys(far, line));
            let hops = src.manhattan(dst);
            pattern.push(Transfer::with_stages(RoutePath::relayed(src, dst), hops, a_bytes));
            let (src, dst) = (sim.grid.phys(line, k), sim.grid.phys(line, far));
            let hops = src.manhattan(dst);
            pattern.push(Transfer::with_stages(RoutePath::relayed(src, dst), hops, b_bytes));
        }
        for ly in 0..n {
            for lx in 0..n {
                c.at_mut(lx, ly).matmul_acc(a.at(k, ly), b.at(lx, k))?;
            }
        }
        let cost = sim.fabric.step_cost(&pattern);
        let compute = sim.compute_cycles(macs);
        sim.report.push(StepRecord::overlapped(format!("step {k}"), cost, compute));
    }
    let (m, _, nn) = problem.dims();
    Ok(GemmRun { c: c.assemble(m, nn), report: sim.finish() })
}

/// Broadcast-based GEMM with double-buffered tiles.
pub fn summa_gemm(config: &PlmrConfig, problem: &GemmProblem) -> Result<GemmRun> {
    broadcast_gemm(config, problem, "summa", false)
}

/// Broadcast-based GEMM that keeps every received panel. Memory above the
/// budget is flagged, not refused.
pub fn allgather_gemm(config: &PlmrConfig, problem: &GemmProblem) -> Result<GemmRun> {
    broadcast_gemm(config, problem, "allgather", true)
}

/// `C = A * B^T` with `A: M x K` and `B: N x K`, both tiled un-transposed.
///
/// B tiles circulate along Y on the interleaved column rings; at step `t`
/// every core of logical row `y` holds the same B row-block `j`, multiplies
/// locally and the row sums its partials into core `(j, y)`.
pub fn dist_gemm_t(config: &PlmrConfig, a: &Matrix, b: &Matrix) -> Result<GemmRun> {
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "A is {}x{} but B^T needs B with {} columns, got {}x{}",
            a.rows(),
            a.cols(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let mut sim = Sim::new(config, "dist-gemm-t")?;
    let n = sim.grid.side;
    let (tm, tk, tn) = (a.rows().div_ceil(n), a.cols().div_ceil(n), b.rows().div_ceil(n));
    let at = TileGrid::split(a, n, tm, tk);
    let mut bt = TileGrid::split(b, n, tn, tk);
    let mut c = TileGrid::split(&Matrix::zeros(tm * n, tn * n), n, tm, tn);
    let (a_bytes, b_bytes, c_bytes) = (at.tiles[0].bytes(), bt.tiles[0].bytes(), c.tiles[0].bytes());
    sim.charge_memory(a_bytes + 2 * b_bytes + 2 * c_bytes, "A, B, C tiles, B receive buffer and partial", true)?;

    let ring = RingMap::shortest(n);
    let order = ring.order();
    let pos = ring.positions();
    let all = vec![true; n];
    let lines: Vec<Vec<CoreCoord>> = (0..n).map(|ly| (0..n).map(|lx| sim.grid.phys(lx, ly)).collect()).collect();
    let how = Allreduce::sum(Discipline::KTree { k: 2 }).with_broadcast(true);
    let macs = (tm * tk * tn) as u64;
    for t in 0..n {
        let mut partials: Vec<Vec<Matrix>> = Vec::with_capacity(n);
        for ly in 0..n {
            let row: Result<Vec<Matrix>> = (0..n)
                .map(|lx| {
                    let mut p = Matrix::zeros(tm, tn);
                    p.matmul_t_acc(at.at(lx, ly), bt.at(lx, ly))?;
                    Ok(p)
                })
                .collect();
            partials.push(row?);
        }
        let cost = if n > 1 {
            let pattern = sim.ring_shift(&ring, false, &all, b_bytes);
            sim.fabric.step_cost(&pattern)
        } else {
            Default::default()
        };
        let compute = sim.compute_cycles(macs);
        sim.report.push(StepRecord::overlapped(format!("step {t}"), cost, compute));

        let steps = allreduce(&mut sim.fabric, &lines, &mut partials, how)?;
        for s in steps {
            sim.report.push(StepRecord { label: format!("reduce {t} {}", s.label), ..s });
        }
        for (ly, row) in partials.iter().enumerate() {
            let j = order[(pos[ly] + n - t % n) % n];
            c.at_mut(j, ly).add_assign(&row[j])?;
        }
        if n > 1 {
            rotate(&mut bt, &ring, false, &all);
        }
    }
    Ok(GemmRun { c: c.assemble(a.rows(), b.rows()), report: sim.finish() })
}
