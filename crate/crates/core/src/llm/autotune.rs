//! Offline search for the prefill and decode grids with the lowest simulated
//! end-to-end latency.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{generate_distributed, Deployment};
use super::shape::ModelShape;
use super::weights::ModelWeights;
use crate::error::{Error, Result};
use crate::fabric::PlmrConfig;
use crate::tiles::GridShape;

/// Prompt length and number of generated tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoLengths {
    pub input: usize,
    pub output: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub prefill: GridShape,
    pub decode: GridShape,
    /// Simulated cycles, or why the pair cannot run.
    pub outcome: std::result::Result<u64, String>,
}

impl Candidate {
    /// Lower is better: latency, then fewer prefill cores, then fewer decode
    /// cores, then fewer rows.
    fn key(&self) -> Option<(u64, usize, usize, usize, usize, usize, usize)> {
        let lat = *self.outcome.as_ref().ok()?;
        let (p, d) = (self.prefill, self.decode);
        Some((lat, p.cores(), d.cores(), p.ny, p.nx, d.ny, d.nx))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AutotuneReport {
    pub candidates: Vec<Candidate>,
    pub prefill: GridShape,
    pub decode: GridShape,
    pub latency: u64,
}

impl AutotuneReport {
    pub fn decode_not_larger(&self) -> bool {
        self.decode.cores() <= self.prefill.cores()
    }
}

impl fmt::Display for AutotuneReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<9} {:<9} cycles", "prefill", "decode")?;
        for c in &self.candidates {
            let outcome = match &c.outcome {
                Ok(cycles) => cycles.to_string(),
                Err(why) => format!("excluded: {why}"),
            };
            let mark = if (c.prefill, c.decode) == (self.prefill, self.decode) { " *" } else { "" };
            writeln!(f, "{:<9} {:<9} {outcome}{mark}", c.prefill.to_string(), c.decode.to_string())?;
        }
        Ok(())
    }
}

/// Best feasible candidate under the deterministic tie-break.
pub fn select(candidates: &[Candidate]) -> Option<&Candidate> {
    candidates.iter().filter_map(|c| c.key().map(|k| (k, c))).min_by_key(|(k, _)| *k).map(|(_, c)| c)
}

/// Evaluates every (prefill, decode) pair from `grids` concurrently and picks
/// the cheapest. `eval` returns the latency of one pair or why it cannot run.
pub fn autotune_with<F>(grids: &[GridShape], eval: F) -> Result<AutotuneReport>
where
    F: Fn(GridShape, GridShape) -> Result<u64> + Sync,
{
    if grids.is_empty() {
        return Err(Error::Config("autotune needs at least one candidate grid".into()));
    }
    let pairs: Vec<(GridShape, GridShape)> = grids.iter().flat_map(|&p| grids.iter().map(move |&d| (p, d))).collect();
    let candidates: Vec<Candidate> = pairs
        .par_iter()
        .map(|&(prefill, decode)| Candidate { prefill, decode, outcome: eval(prefill, decode).map_err(|e| e.to_string()) })
        .collect();
    let best = select(&candidates).ok_or_else(|| {
        let reasons: Vec<String> = candidates
            .iter()
            .map(|c| format!("{}/{}: {}", c.prefill, c.decode, c.outcome.as_ref().err().map_or("", String::as_str)))
            .collect();
        Error::Infeasible(format!("no candidate grid pair can run the model ({})", reasons.join("; ")))
    })?;
    let (prefill, decode, latency) = (best.prefill, best.decode, best.key().expect("selected is feasible").0);
    Ok(AutotuneReport { candidates, prefill, decode, latency })
}

/// Seeded toy weights and prompt for a tuning run.
pub fn tuning_inputs(shape: &ModelShape, io: IoLengths, seed: u64) -> (ModelShape, ModelWeights, Vec<usize>) {
    let shape = ModelShape { seq_len: io.input, ..*shape };
    let weights = ModelWeights::random(&shape, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let prompt = (0..io.input).map(|_| rng.gen_range(0..shape.vocab)).collect();
    (shape, weights, prompt)
}

/// Simulated latency of prefilling `io.input` tokens and generating
/// `io.output` tokens with the given grids.
pub fn deployment_latency(
    config: &PlmrConfig,
    shape: &ModelShape,
    io: IoLengths,
    seed: u64,
    prefill: GridShape,
    decode: GridShape,
) -> Result<u64> {
    if io.output == 0 {
        return Err(Error::Domain("autotune needs at least one output token".into()));
    }
    let (shape, weights, prompt) = tuning_inputs(shape, io, seed);
    let run = generate_distributed(config, &shape, &weights, &prompt, io.output - 1, Deployment::new(prefill, decode))?;
    Ok(run.latency())
}

/// Exhaustive search over `grids` for both phases.
pub fn autotune(config: &PlmrConfig, shape: &ModelShape, io: IoLengths, grids: &[GridShape], seed: u64) -> Result<AutotuneReport> {
    autotune_with(grids, |p, d| deployment_latency(config, shape, io, seed, p, d))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_prefer_smaller_grids() {
        let grids = [GridShape::square(4), GridShape::new(2, 1), GridShape::new(1, 2), GridShape::square(2)];
        let r = autotune_with(&grids, |_, _| Ok(7)).unwrap();
        assert_eq!((r.prefill, r.decode), (GridShape::new(2, 1), GridShape::new(2, 1)));
        let again = autotune_with(&grids, |_, _| Ok(7)).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn infeasible_pairs_are_reported() {
        let grids = [GridShape::square(1), GridShape::square(2)];
        let r = autotune_with(&grids, |p, _| if p.cores() == 1 { Err(Error::Infeasible("too small".into())) } else { Ok(3) })
            .unwrap();
        assert_eq!(r.prefill, GridShape::square(2));
        assert_eq!(r.candidates.iter().filter(|c| c.outcome.is_err()).count(), 2);
        let none = autotune_with(&grids, |_, _| Err(Error::Infeasible("no".into())));
        assert!(matches!(none, Err(Error::Infeasible(_))));
        assert!(autotune_with(&[], |_, _| Ok(1)).is_err());
    }

    #[test]
    fn single_candidate() {
        let cfg = PlmrConfig::with_grid(2, 2);
        let shape = ModelShape { layers: 1, ..ModelShape::toy() };
        let io = IoLengths { input: 4, output: 2 };
        let r = autotune(&cfg, &shape, io, &[GridShape::square(2)], 1).unwrap();
        assert_eq!((r.prefill, r.decode), (GridShape::square(2), GridShape::square(2)));
        assert_eq!(r.latency, deployment_latency(&cfg, &shape, io, 1, r.prefill, r.decode).unwrap());
    }
}
