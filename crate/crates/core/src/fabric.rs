//! Mesh fabric model: device parameters, XY routing, the routing-path ledger
//! and the per-step communication cost model.
//!
//! A message travelling over a pre-configured route pays `alpha` cycles per
//! hop. A message that has to be handled in software at a core (header
//! parsing and rewriting when no route slot is left, or a reduce/forward
//! chain) additionally pays `beta` cycles per such routing stage:
//!
//! ```text
//! latency = alpha * hops + beta * routing_stages
//! ```
//!
//! Every core can hold at most `route_budget` distinct routes. The
//! [`RoutingLedger`] tracks both what was admitted (never above budget) and
//! what an algorithm demanded, so budget violations show up in reports
//! instead of being silently allowed.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Size of one tensor element in bytes (32-bit values everywhere).
pub const ELEM_BYTES: u64 = 4;

/// Device description for a PLMR-style mesh.
///
/// Stored on disk as TOML, one `key = value` per field:
///
/// ```toml
/// width = 16
/// height = 16
/// alpha = 1
/// beta = 3
/// route_budget = 32
/// mem_per_core = 49152
/// macs_per_cycle = 1
/// link_bytes_per_cycle = 4
/// ```
///
/// `clock_hz` (optional) only converts cycles into seconds for display.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlmrConfig {
    /// Cores along the X axis.
    pub width: usize,
    /// Cores along the Y axis.
    pub height: usize,
    /// Cycles per hop over a pre-configured route.
    #[serde(default = "default_alpha")]
    pub alpha: u64,
    /// Cycles per software routing stage.
    #[serde(default = "default_beta")]
    pub beta: u64,
    /// Maximum number of distinct routing paths a core can hold.
    #[serde(default = "default_route_budget")]
    pub route_budget: u32,
    /// Local memory per core in bytes.
    #[serde(default = "default_mem_per_core")]
    pub mem_per_core: u64,
    /// Multiply-accumulates per core per cycle.
    #[serde(default = "default_macs_per_cycle")]
    pub macs_per_cycle: u64,
    /// Link width used to serialize bulk moves (KV shifts, re-placement).
    #[serde(default = "default_link_bytes")]
    pub link_bytes_per_cycle: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clock_hz: Option<f64>,
    /// Skip the `alpha <= beta` check.
    #[serde(default, skip_serializing_if = "is_false")]
    pub allow_alpha_above_beta: bool,
}

fn default_alpha() -> u64 {
    1
}
fn default_beta() -> u64 {
    3
}
fn default_route_budget() -> u32 {
    32
}
fn default_mem_per_core() -> u64 {
    48 * 1024
}
fn default_macs_per_cycle() -> u64 {
    1
}
fn default_link_bytes() -> u64 {
    ELEM_BYTES
}
fn is_false(b: &bool) -> bool {
    !*b
}

impl Default for PlmrConfig {
    fn default() -> Self {
        Self::with_grid(4, 4)
    }
}

impl PlmrConfig {
    /// Default device parameters on a `width x height` mesh.
    pub fn with_grid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            alpha: default_alpha(),
            beta: default_beta(),
            route_budget: default_route_budget(),
            mem_per_core: default_mem_per_core(),
            macs_per_cycle: default_macs_per_cycle(),
            link_bytes_per_cycle: default_link_bytes(),
            clock_hz: None,
            allow_alpha_above_beta: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config(format!(
                "mesh must be at least 1x1, got {}x{}",
                self.width, self.height
            )));
        }
        if self.alpha > self.beta && !self.allow_alpha_above_beta {
            return Err(Error::Config(format!(
                "alpha ({}) must not exceed beta ({}); set allow_alpha_above_beta to override",
                self.alpha, self.beta
            )));
        }
        if self.route_budget < 3 {
            return Err(Error::Config(format!(
                "route_budget must be at least 3, got {}",
                self.route_budget
            )));
        }
        if self.mem_per_core == 0 {
            return Err(Error::Config("mem_per_core must be positive".into()));
        }
        if self.macs_per_cycle == 0 {
            return Err(Error::Config("macs_per_cycle must be positive".into()));
        }
        if self.link_bytes_per_cycle == 0 {
            return Err(Error::Config("link_bytes_per_cycle must be positive".into()));
        }
        if let Some(hz) = self.clock_hz {
            if !(hz.is_finite() && hz > 0.0) {
                return Err(Error::Config(format!("clock_hz must be positive, got {hz}")));
            }
        }
        Ok(())
    }

    pub fn core_count(&self) -> usize {
        self.width * self.height
    }

    pub fn contains(&self, c: CoreCoord) -> bool {
        c.x < self.width && c.y < self.height
    }

    pub fn check(&self, c: CoreCoord) -> Result<()> {
        if self.contains(c) {
            Ok(())
        } else {
            Err(Error::CoordOutOfRange {
                x: c.x,
                y: c.y,
                width: self.width,
                height: self.height,
            })
        }
    }

    /// Largest XY-routing distance on this mesh.
    pub fn max_hops(&self) -> u32 {
        (self.width + self.height - 2) as u32
    }

    /// Cycles needed to run `macs` multiply-accumulates on one core.
    pub fn compute_cycles(&self, macs: u64) -> u64 {
        macs.div_ceil(self.macs_per_cycle)
    }

    /// Cycles needed to push `bytes` through one link.
    pub fn serialization_cycles(&self, bytes: u64) -> u64 {
        bytes.div_ceil(self.link_bytes_per_cycle)
    }

    pub fn seconds(&self, cycles: u64) -> Option<f64> {
        self.clock_hz.map(|hz| cycles as f64 / hz)
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: PlmrConfig = toml::from_str(s).map_err(|e| Error::Parse {
            location: e
                .span()
                .map(|r| line_col(s, r.start))
                .unwrap_or_else(|| "config".to_string()),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("PlmrConfig serializes to TOML")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }
}

/// Formats a byte offset as `line L, column C` (1-based).
pub(crate) fn line_col(text: &str, offset: usize) -> String {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    format!("line {line}, column {col}")
}

/// Mesh axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
}

impl Axis {
    pub fn other(self) -> Axis {
        match self {
            Axis::X => Axis::Y,
            Axis::Y => Axis::X,
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Axis::X => f.write_str("x"),
            Axis::Y => f.write_str("y"),
        }
    }
}

/// 0-based core position: `x` is the column, `y` the row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CoreCoord {
    pub x: usize,
    pub y: usize,
}

impl CoreCoord {
    pub const fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }

    pub fn manhattan(self, other: CoreCoord) -> u32 {
        (self.x.abs_diff(other.x) + self.y.abs_diff(other.y)) as u32
    }

    /// Coordinate along `axis`.
    pub fn along(self, axis: Axis) -> usize {
        match axis {
            Axis::X => self.x,
            Axis::Y => self.y,
        }
    }
}

impl fmt::Display for CoreCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// XY distance between two cores, checked against the mesh bounds.
pub fn manhattan_hops(config: &PlmrConfig, a: CoreCoord, b: CoreCoord) -> Result<u32> {
    config.check(a)?;
    config.check(b)?;
    Ok(a.manhattan(b))
}

/// Cores visited by dimension-ordered routing (X first, then Y), endpoints included.
pub fn xy_route(src: CoreCoord, dst: CoreCoord) -> Vec<CoreCoord> {
    let mut cores = Vec::with_capacity(src.manhattan(dst) as usize + 1);
    let mut cur = src;
    cores.push(cur);
    while cur.x != dst.x {
        cur.x = if dst.x > cur.x { cur.x + 1 } else { cur.x - 1 };
        cores.push(cur);
    }
    while cur.y != dst.y {
        cur.y = if dst.y > cur.y { cur.y + 1 } else { cur.y - 1 };
        cores.push(cur);
    }
    cores
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RouteKind {
    /// Router pass-through: alpha per hop, no software involvement.
    Preconfigured,
    /// Software forwarding: beta at every intermediate core.
    Relayed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RoutePath {
    pub src: CoreCoord,
    pub dst: CoreCoord,
    pub kind: RouteKind,
}

impl RoutePath {
    pub fn preconfigured(src: CoreCoord, dst: CoreCoord) -> Self {
        Self { src, dst, kind: RouteKind::Preconfigured }
    }

    pub fn relayed(src: CoreCoord, dst: CoreCoord) -> Self {
        Self { src, dst, kind: RouteKind::Relayed }
    }

    pub fn hops(&self) -> u32 {
        self.src.manhattan(self.dst)
    }

    /// Software stages implied by the path kind alone.
    pub fn relay_stages(&self) -> u32 {
        match self.kind {
            RouteKind::Preconfigured => 0,
            RouteKind::Relayed => self.hops().saturating_sub(1),
        }
    }

    pub fn cores(&self) -> Vec<CoreCoord> {
        xy_route(self.src, self.dst)
    }
}

/// Identity of an installed route. Two installs with the same id share slots.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum RouteId {
    Point { src: CoreCoord, dst: CoreCoord },
    Channel { tag: &'static str, key: [u32; 3] },
}

/// A route occupying one slot at every listed core.
#[derive(Debug, Clone)]
pub struct Route {
    pub id: RouteId,
    pub cores: Vec<CoreCoord>,
}

impl Route {
    pub fn point(path: &RoutePath) -> Self {
        Self {
            id: RouteId::Point { src: path.src, dst: path.dst },
            cores: path.cores(),
        }
    }

    /// A multicast or chain channel covering `cores`.
    pub fn channel(tag: &'static str, key: [u32; 3], cores: Vec<CoreCoord>) -> Self {
        Self { id: RouteId::Channel { tag, key }, cores }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Admitted,
    /// At least one traversed core is out of slots; model the path as relayed.
    RelayRequired,
}

/// Per-core count of distinct routing paths.
#[derive(Debug, Clone)]
pub struct RoutingLedger {
    width: usize,
    height: usize,
    budget: u32,
    installed: HashSet<RouteId>,
    demanded: HashSet<RouteId>,
    counts: Vec<u32>,
    demand: Vec<u32>,
    denied: usize,
}

impl RoutingLedger {
    pub fn new(width: usize, height: usize, budget: u32) -> Self {
        Self {
            width,
            height,
            budget,
            installed: HashSet::new(),
            demanded: HashSet::new(),
            counts: vec![0; width * height],
            demand: vec![0; width * height],
            denied: 0,
        }
    }

    pub fn for_config(config: &PlmrConfig) -> Self {
        Self::new(config.width, config.height, config.route_budget)
    }

    fn idx(&self, c: CoreCoord) -> usize {
        debug_assert!(c.x < self.width && c.y < self.height, "core {c} off mesh");
        c.y * self.width + c.x
    }

    pub fn budget(&self) -> u32 {
        self.budget
    }

    /// Tries to install `route`; an already-installed id is admitted again for free.
    pub fn install(&mut self, route: &Route) -> Admission {
        if self.installed.contains(&route.id) {
            return Admission::Admitted;
        }
        let cores = dedup_cores(&route.cores);
        if cores.iter().any(|&c| self.counts[self.idx(c)] >= self.budget) {
            self.denied += 1;
            return Admission::RelayRequired;
        }
        for &c in &cores {
            let i = self.idx(c);
            self.counts[i] += 1;
        }
        self.installed.insert(route.id.clone());
        self.add_demand(route.id.clone(), &cores);
        Admission::Admitted
    }

    pub fn install_path(&mut self, path: &RoutePath) -> Admission {
        self.install(&Route::point(path))
    }

    /// Records that an algorithm needs `route` without admitting it.
    /// Demand above budget is what the report flags as an R violation.
    pub fn record_demand(&mut self, route: &Route) {
        let cores = dedup_cores(&route.cores);
        self.add_demand(route.id.clone(), &cores);
    }

    fn add_demand(&mut self, id: RouteId, cores: &[CoreCoord]) {
        if self.demanded.insert(id) {
            for &c in cores {
                let i = self.idx(c);
                self.demand[i] += 1;
            }
        }
    }

    /// Admitted paths at `c`.
    pub fn count(&self, c: CoreCoord) -> u32 {
        self.counts[self.idx(c)]
    }

    /// Demanded paths at `c` (admitted plus demand-only).
    pub fn demand(&self, c: CoreCoord) -> u32 {
        self.demand[self.idx(c)]
    }

    pub fn max_count(&self) -> u32 {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    pub fn max_demand(&self) -> u32 {
        self.demand.iter().copied().max().unwrap_or(0)
    }

    pub fn denied(&self) -> usize {
        self.denied
    }

    /// Cores whose demand exceeds the budget, in row-major order.
    pub fn over_budget(&self) -> Vec<CoreCoord> {
        self.demand
            .iter()
            .enumerate()
            .filter(|(_, &d)| d > self.budget)
            .map(|(i, _)| CoreCoord::new(i % self.width, i / self.width))
            .collect()
    }
}

fn dedup_cores(cores: &[CoreCoord]) -> Vec<CoreCoord> {
    let mut v = cores.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

/// One point-to-point transfer inside a communication step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transfer {
    pub path: RoutePath,
    /// Software routing stages on this transfer's path.
    pub stages: u32,
    pub bytes: u64,
}

impl Transfer {
    pub fn preconfigured(src: CoreCoord, dst: CoreCoord, bytes: u64) -> Self {
        Self { path: RoutePath::preconfigured(src, dst), stages: 0, bytes }
    }

    pub fn relayed(src: CoreCoord, dst: CoreCoord, bytes: u64) -> Self {
        let path = RoutePath::relayed(src, dst);
        Self { path, stages: path.relay_stages(), bytes }
    }

    /// A transfer whose path is handled in software `stages` times
    /// (reduce chains, hop-by-hop broadcasts).
    pub fn with_stages(path: RoutePath, stages: u32, bytes: u64) -> Self {
        Self { path, stages, bytes }
    }

    pub fn hops(&self) -> u32 {
        self.path.hops()
    }

    pub fn latency(&self, config: &PlmrConfig) -> u64 {
        config.alpha * self.hops() as u64 + config.beta * self.stages as u64
    }
}

/// Simultaneous transfers of one algorithm step.
pub type CommPattern = Vec<Transfer>;

/// Critical-path cost of one communication step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepCost {
    pub hops_critical: u32,
    pub routing_stages_critical: u32,
    pub latency_cycles: u64,
    pub bytes_moved: u64,
}

impl StepCost {
    pub fn new(config: &PlmrConfig, hops: u32, stages: u32, bytes: u64) -> Self {
        Self {
            hops_critical: hops,
            routing_stages_critical: stages,
            latency_cycles: config.alpha * hops as u64 + config.beta * stages as u64,
            bytes_moved: bytes,
        }
    }
}

/// Cost of a step: the slowest transfer sets hops, stages and latency.
/// Ties keep the first transfer in pattern order.
pub fn step_cost(config: &PlmrConfig, pattern: &[Transfer]) -> StepCost {
    let bytes = pattern.iter().map(|t| t.bytes).sum();
    let mut crit: Option<&Transfer> = None;
    for t in pattern {
        if crit.is_none_or(|c| t.latency(config) > c.latency(config)) {
            crit = Some(t);
        }
    }
    match crit {
        Some(t) => StepCost::new(config, t.hops(), t.stages, bytes),
        None => StepCost { bytes_moved: bytes, ..StepCost::default() },
    }
}

/// A mesh plus its routing ledger for the duration of one simulated run.
#[derive(Debug, Clone)]
pub struct Fabric {
    config: PlmrConfig,
    ledger: RoutingLedger,
}

impl Fabric {
    pub fn new(config: &PlmrConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { ledger: RoutingLedger::for_config(config), config: config.clone() })
    }

    pub fn config(&self) -> &PlmrConfig {
        &self.config
    }

    pub fn ledger(&self) -> &RoutingLedger {
        &self.ledger
    }

    /// Installs a pass-through path from `src` to `dst` and returns the
    /// transfer, downgraded to a relayed one if the ledger refuses it.
    /// A core sending to itself costs nothing and takes no slot.
    pub fn connect(&mut self, src: CoreCoord, dst: CoreCoord, bytes: u64) -> Transfer {
        if src == dst {
            return Transfer::preconfigured(src, dst, bytes);
        }
        let path = RoutePath::preconfigured(src, dst);
        match self.ledger.install_path(&path) {
            Admission::Admitted => Transfer::preconfigured(src, dst, bytes),
            Admission::RelayRequired => Transfer::relayed(src, dst, bytes),
        }
    }

    pub fn install(&mut self, route: &Route) -> Admission {
        self.ledger.install(route)
    }

    pub fn demand(&mut self, route: &Route) {
        self.ledger.record_demand(route)
    }

    pub fn step_cost(&self, pattern: &[Transfer]) -> StepCost {
        step_cost(&self.config, pattern)
    }
}
