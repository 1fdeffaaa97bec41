//! Distributed vector-matrix product: local GEMV on every core, then an
//! allreduce of the partial outputs along one mesh axis.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::collectives::{allreduce, result_holder, Allreduce, Discipline};
use crate::error::{Error, Result};
use crate::fabric::{Axis, CoreCoord, Fabric, PlmrConfig};
use crate::report::{SimReport, StepRecord};
use crate::tiles::Matrix;

/// `C = A * B` with `A: 1 x K` and `B: K x N`.
#[derive(Debug, Clone, PartialEq)]
pub struct GemvProblem {
    pub a: Matrix,
    pub b: Matrix,
}

impl GemvProblem {
    pub fn new(a: Matrix, b: Matrix) -> Result<Self> {
        if a.rows() != 1 {
            return Err(Error::Shape(format!("GEMV input must be one row, got {}x{}", a.rows(), a.cols())));
        }
        if a.cols() != b.rows() || b.is_empty() {
            return Err(Error::Shape(format!(
                "vector of length {} against {}x{} matrix",
                a.cols(),
                b.rows(),
                b.cols()
            )));
        }
        Ok(Self { a, b })
    }

    pub fn random_ints(k: usize, n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Matrix::random_ints(1, k, -8, 8, &mut rng);
        let b = Matrix::random_ints(k, n, -8, 8, &mut rng);
        Self { a, b }
    }
}

pub fn dense_gemv_oracle(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != 1 || a.cols() != b.rows() {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} vector by {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let mut c = vec![0.0f32; b.cols()];
    for (k, &av) in a.row(0).iter().enumerate() {
        for (cj, &bv) in c.iter_mut().zip(b.row(k)) {
            *cj += av * bv;
        }
    }
    Ok(Matrix::row_vector(c))
}

/// Which mesh axis carries the reduced dimension `K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Orientation {
    /// `K` on Y, `N` on X: core `(x, y)` holds block `(y, x)`; reduce along Y.
    ReduceY,
    /// `K` on X, `N` on Y: core `(x, y)` holds block `(x, y)`; reduce along X.
    ReduceX,
}

impl Orientation {
    pub fn reduce_axis(self) -> Axis {
        match self {
            Orientation::ReduceY => Axis::Y,
            Orientation::ReduceX => Axis::X,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GemvOptions {
    pub discipline: Discipline,
    pub orientation: Orientation,
    /// Send the reduced output back to every core of the reduction line.
    pub broadcast: bool,
}

impl GemvOptions {
    pub fn ktree(k: usize) -> Self {
        Self { discipline: Discipline::KTree { k }, orientation: Orientation::ReduceY, broadcast: false }
    }

    pub fn with_discipline(discipline: Discipline) -> Self {
        Self { discipline, ..Self::ktree(2) }
    }

    pub fn oriented(mut self, orientation: Orientation) -> Self {
        self.orientation = orientation;
        self
    }

    pub fn with_broadcast(mut self, on: bool) -> Self {
        self.broadcast = on;
        self
    }
}

#[derive(Debug, Clone)]
pub struct GemvRun {
    pub c: Matrix,
    pub report: SimReport,
}

/// Runs the distributed GEMV with the given reduction settings.
pub fn gemv(config: &PlmrConfig, problem: &GemvProblem, opts: GemvOptions) -> Result<GemvRun> {
    let mut fabric = Fabric::new(config)?;
    let axis = opts.orientation.reduce_axis();
    let (kparts, nparts) = match axis {
        Axis::Y => (config.height, config.width),
        Axis::X => (config.width, config.height),
    };
    let (kd, nd) = (problem.b.rows(), problem.b.cols());
    let (tk, tn) = (kd.div_ceil(kparts), nd.div_ceil(nparts));
    let core = |kp: usize, np: usize| match axis {
        Axis::Y => CoreCoord::new(np, kp),
        Axis::X => CoreCoord::new(kp, np),
    };

    let mut report = SimReport::new(format!("gemv-{}", opts.discipline));
    let per_core = (tk + tk * tn + 2 * tn) as u64 * crate::fabric::ELEM_BYTES;
    report.peak_mem_bytes = per_core;
    if per_core > config.mem_per_core {
        return Err(Error::Capacity {
            core: CoreCoord::new(0, 0),
            needed: per_core,
            budget: config.mem_per_core,
            what: "vector slice, matrix block, output partial and receive buffer".into(),
        });
    }

    let mut lines = Vec::with_capacity(nparts);
    let mut partials = Vec::with_capacity(nparts);
    for np in 0..nparts {
        lines.push((0..kparts).map(|kp| core(kp, np)).collect::<Vec<_>>());
        let mut line = Vec::with_capacity(kparts);
        for kp in 0..kparts {
            let a = problem.a.block(0, kp * tk, 1, tk);
            let b = problem.b.block(kp * tk, np * tn, tk, tn);
            let mut p = Matrix::zeros(1, tn);
            p.matmul_acc(&a, &b)?;
            line.push(p);
        }
        partials.push(line);
    }
    report.push(StepRecord::compute("local gemv", config.compute_cycles((tk * tn) as u64)));

    let how = Allreduce::sum(opts.discipline).with_broadcast(opts.broadcast);
    for s in allreduce(&mut fabric, &lines, &mut partials, how)? {
        report.push(s);
    }
    let holder = result_holder(opts.discipline, kparts)?;
    let mut c = Matrix::zeros(1, nd);
    for (np, line) in partials.iter().enumerate() {
        c.write_block(0, np * tn, &line[holder]);
    }
    report.absorb_routing(&fabric);
    Ok(GemvRun { c, report })
}

/// Local GEMV plus a K-tree reduction along Y, no broadcast.
pub fn mesh_gemv(config: &PlmrConfig, problem: &GemvProblem, k: usize) -> Result<GemvRun> {
    gemv(config, problem, GemvOptions::ktree(k))
}

pub fn gemv_pipeline_baseline(config: &PlmrConfig, problem: &GemvProblem) -> Result<GemvRun> {
    gemv(config, problem, GemvOptions::with_discipline(Discipline::Pipeline))
}

pub fn gemv_ring_baseline(config: &PlmrConfig, problem: &GemvProblem) -> Result<GemvRun> {
    gemv(config, problem, GemvOptions::with_discipline(Discipline::Ring))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize) -> PlmrConfig {
        PlmrConfig::with_grid(n, n)
    }

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        Matrix::from_fn(1, b.cols(), |_, j| (0..b.rows()).map(|k| a.get(0, k) * b.get(k, j)).sum())
    }

    #[test]
    fn oracle_basics() {
        let b = Matrix::from_fn(3, 4, |r, c| (r * 4 + c) as f32);
        let e1 = Matrix::row_vector(vec![0.0, 1.0, 0.0]);
        assert_eq!(dense_gemv_oracle(&e1, &b).unwrap().row(0), b.row(1));
        let ones = Matrix::row_vector(vec![1.0, 1.0]);
        assert_eq!(dense_gemv_oracle(&ones, &Matrix::identity(2)).unwrap(), ones);
        let p = GemvProblem::random_ints(16, 16, 3);
        assert_eq!(dense_gemv_oracle(&p.a, &p.b).unwrap(), naive(&p.a, &p.b));
    }

    #[test]
    fn all_variants_match_oracle() {
        for n in [1, 4, 9, 16] {
            let p = GemvProblem::random_ints(2 * n, 3 * n, n as u64);
            let want = naive(&p.a, &p.b);
            for run in [
                mesh_gemv(&cfg(n), &p, 2).unwrap(),
                mesh_gemv(&cfg(n), &p, 1).unwrap(),
                gemv_pipeline_baseline(&cfg(n), &p).unwrap(),
                gemv_ring_baseline(&cfg(n), &p).unwrap(),
            ] {
                assert_eq!(run.c, want, "n={n} {}", run.report.algorithm);
            }
            if n == 1 {
                assert_eq!(gemv_pipeline_baseline(&cfg(n), &p).unwrap().report.comm_cycles(), 0);
            }
        }
    }

    #[test]
    fn x_orientation_and_broadcast() {
        let p = GemvProblem::random_ints(12, 8, 5);
        let opts = GemvOptions::ktree(2).oriented(Orientation::ReduceX).with_broadcast(true);
        let run = gemv(&PlmrConfig::with_grid(3, 4), &p, opts).unwrap();
        assert_eq!(run.c, naive(&p.a, &p.b));
        assert!(run.report.steps_labelled("broadcast").count() == 1);
    }

    #[test]
    fn sixteen_stage_counts() {
        let p = GemvProblem::random_ints(32, 32, 16);
        let k = mesh_gemv(&cfg(16), &p, 2).unwrap();
        let pipe = gemv_pipeline_baseline(&cfg(16), &p).unwrap();
        assert_eq!(k.report.routing_stages_total(), 4);
        assert_eq!(pipe.report.routing_stages_total(), 15);
        assert!(k.report.total_cycles() < pipe.report.total_cycles());
    }

    #[test]
    fn route_budget_for_small_k() {
        let p = GemvProblem::random_ints(64, 64, 1);
        for k in 1..=3 {
            let r = mesh_gemv(&cfg(32), &p, k).unwrap().report;
            assert!(r.max_paths_per_core as usize <= k + 1);
            assert!(!r.routing_violation());
        }
    }

    #[test]
    fn larger_k_not_always_better() {
        let p = |n: usize| GemvProblem::random_ints(n, n, 0);
        let cost = |n: usize, k: usize| mesh_gemv(&cfg(n), &p(n), k).unwrap().report.comm_cycles();
        assert!(cost(27, 3) < cost(27, 2));
        assert!(cost(32, 3) > cost(32, 2));
    }

    #[test]
    fn bad_shapes() {
        assert!(GemvProblem::new(Matrix::zeros(2, 3), Matrix::zeros(3, 3)).is_err());
        assert!(GemvProblem::new(Matrix::zeros(1, 2), Matrix::zeros(3, 3)).is_err());
        let mut c = cfg(2);
        c.mem_per_core = 16;
        let p = GemvProblem::random_ints(8, 8, 1);
        assert!(matches!(mesh_gemv(&c, &p, 2), Err(Error::Capacity { .. })));
    }
}
