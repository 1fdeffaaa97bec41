//! Per-step and aggregate simulation metrics.

use serde::{Deserialize, Serialize};

use crate::fabric::{CoreCoord, Fabric, StepCost};

/// Which PLMR constraint a run broke.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ViolationKind {
    /// More routing paths demanded at a core than the budget allows.
    Routing,
    /// Per-core memory above `mem_per_core` (accounting-only runs).
    Memory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub core: Option<CoreCoord>,
    pub detail: String,
}

/// One bulk-synchronous step: a communication pattern and a compute phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub label: String,
    pub comm: StepCost,
    /// Cycles to stream bulk bytes over a link (only charged for bulk moves).
    pub serialization_cycles: u64,
    pub compute_cycles: u64,
    /// Whether compute and communication overlap in this step.
    pub overlapped: bool,
}

impl StepRecord {
    pub fn comm(label: impl Into<String>, comm: StepCost) -> Self {
        Self {
            label: label.into(),
            comm,
            serialization_cycles: 0,
            compute_cycles: 0,
            overlapped: false,
        }
    }

    pub fn compute(label: impl Into<String>, cycles: u64) -> Self {
        Self {
            label: label.into(),
            comm: StepCost::default(),
            serialization_cycles: 0,
            compute_cycles: cycles,
            overlapped: false,
        }
    }

    pub fn overlapped(label: impl Into<String>, comm: StepCost, compute_cycles: u64) -> Self {
        Self {
            label: label.into(),
            comm,
            serialization_cycles: 0,
            compute_cycles,
            overlapped: true,
        }
    }

    pub fn with_serialization(mut self, cycles: u64) -> Self {
        self.serialization_cycles = cycles;
        self
    }

    pub fn comm_cycles(&self) -> u64 {
        self.comm.latency_cycles + self.serialization_cycles
    }

    pub fn latency(&self) -> u64 {
        if self.overlapped {
            self.comm_cycles().max(self.compute_cycles)
        } else {
            self.comm_cycles() + self.compute_cycles
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub algorithm: String,
    pub steps: Vec<StepRecord>,
    pub peak_mem_bytes: u64,
    pub max_paths_per_core: u32,
    /// Point-to-point paths that had to fall back to software relay.
    pub relayed_paths: usize,
    pub violations: Vec<Violation>,
    pub notes: Vec<String>,
}

impl SimReport {
    pub fn new(algorithm: impl Into<String>) -> Self {
        Self { algorithm: algorithm.into(), ..Self::default() }
    }

    pub fn push(&mut self, step: StepRecord) {
        self.steps.push(step);
    }

    pub fn note(&mut self, s: impl Into<String>) {
        self.notes.push(s.into());
    }

    pub fn total_cycles(&self) -> u64 {
        self.steps.iter().map(StepRecord::latency).sum()
    }

    pub fn comm_cycles(&self) -> u64 {
        self.steps.iter().map(StepRecord::comm_cycles).sum()
    }

    pub fn compute_cycles(&self) -> u64 {
        self.steps.iter().map(|s| s.compute_cycles).sum()
    }

    pub fn hops_critical_max(&self) -> u32 {
        self.steps.iter().map(|s| s.comm.hops_critical).max().unwrap_or(0)
    }

    pub fn routing_stages_max(&self) -> u32 {
        self.steps.iter().map(|s| s.comm.routing_stages_critical).max().unwrap_or(0)
    }

    /// Sum of critical hops over all steps.
    pub fn hops_total(&self) -> u64 {
        self.steps.iter().map(|s| s.comm.hops_critical as u64).sum()
    }

    /// Sum of critical routing stages over all steps.
    pub fn routing_stages_total(&self) -> u64 {
        self.steps.iter().map(|s| s.comm.routing_stages_critical as u64).sum()
    }

    pub fn bytes_moved(&self) -> u64 {
        self.steps.iter().map(|s| s.comm.bytes_moved).sum()
    }

    pub fn steps_labelled<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a StepRecord> + 'a {
        self.steps.iter().filter(move |s| s.label.starts_with(prefix))
    }

    pub fn has_violation(&self, kind: ViolationKind) -> bool {
        self.violations.iter().any(|v| v.kind == kind)
    }

    pub fn routing_violation(&self) -> bool {
        self.has_violation(ViolationKind::Routing)
    }

    pub fn memory_violation(&self) -> bool {
        self.has_violation(ViolationKind::Memory)
    }

    /// Copies routing usage and R violations out of a finished fabric.
    pub fn absorb_routing(&mut self, fabric: &Fabric) {
        let ledger = fabric.ledger();
        self.max_paths_per_core = self.max_paths_per_core.max(ledger.max_demand());
        self.relayed_paths += ledger.denied();
        let over = ledger.over_budget();
        if let Some(&first) = over.first() {
            self.violations.push(Violation {
                kind: ViolationKind::Routing,
                core: Some(first),
                detail: format!(
                    "{} cores need up to {} routing paths, budget {}",
                    over.len(),
                    ledger.max_demand(),
                    ledger.budget()
                ),
            });
        }
    }

    /// Appends another run's steps (prefixed with `scope`) and folds its
    /// peaks and flags into this one.
    pub fn merge(&mut self, scope: &str, other: SimReport) {
        for mut s in other.steps {
            if !scope.is_empty() {
                s.label = format!("{scope}/{}", s.label);
            }
            self.steps.push(s);
        }
        self.peak_mem_bytes = self.peak_mem_bytes.max(other.peak_mem_bytes);
        self.max_paths_per_core = self.max_paths_per_core.max(other.max_paths_per_core);
        self.relayed_paths += other.relayed_paths;
        self.violations.extend(other.violations);
        self.notes.extend(other.notes);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::PlmrConfig;

    #[test]
    fn overlapped_step_takes_max() {
        let cfg = PlmrConfig::default();
        let comm = StepCost::new(&cfg, 2, 0, 16);
        assert_eq!(StepRecord::overlapped("s", comm, 7).latency(), 7);
        assert_eq!(StepRecord::overlapped("s", comm, 1).latency(), 2);
        let mut seq = StepRecord::overlapped("s", comm, 7);
        seq.overlapped = false;
        assert_eq!(seq.latency(), 9);
    }

    #[test]
    fn merge_prefixes_and_keeps_peaks() {
        let cfg = PlmrConfig::default();
        let mut a = SimReport::new("a");
        a.push(StepRecord::compute("x", 3));
        a.peak_mem_bytes = 10;
        let mut b = SimReport::new("b");
        b.push(StepRecord::comm("y", StepCost::new(&cfg, 1, 1, 0)));
        b.peak_mem_bytes = 20;
        b.max_paths_per_core = 4;
        a.merge("inner", b);
        assert_eq!(a.steps[1].label, "inner/y");
        assert_eq!(a.total_cycles(), 3 + 4);
        assert_eq!((a.peak_mem_bytes, a.max_paths_per_core), (20, 4));
    }
}
