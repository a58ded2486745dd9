//! Gaussian-perturbation hill climbing over prompt token values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bandit::{History, RoundRecord};
use crate::error::{Error, Result};
use crate::trajectory::{assemble_prompt, Segment, StochasticPrompt};

pub const SIGMA_START: f64 = 1.1;
pub const SIGMA_END: f64 = 0.1;

/// Adds i.i.d. `N(0, σ²)` noise to every return-to-go, state and action value of every segment.
pub fn perturb(prompt: &StochasticPrompt, sigma: f64, rng: &mut impl Rng) -> StochasticPrompt {
    let mut out = prompt.clone();
    if sigma <= 0.0 {
        return out;
    }
    let noise = Normal::new(0.0, sigma).expect("finite sigma");
    for seg in out.segments_mut() {
        for t in &mut seg.transitions {
            t.return_to_go += noise.sample(rng);
            for v in t.state.iter_mut().chain(t.action.iter_mut()) {
                *v += noise.sample(rng);
            }
        }
    }
    out
}

/// Linear schedule from `SIGMA_START` at the first round to `SIGMA_END` at the last.
pub fn sigma_at(round: usize, rounds: usize) -> f64 {
    if rounds <= 1 {
        return SIGMA_START;
    }
    SIGMA_START + (SIGMA_END - SIGMA_START) * round as f64 / (rounds - 1) as f64
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PerturbHistory {
    /// Per-round candidate returns; provenance is that of the starting segments.
    pub history: History,
    /// Incumbent return after each round.
    pub incumbent: Vec<f64>,
    pub best_prompt: Option<StochasticPrompt>,
}

/// Round 0 evaluates a uniformly drawn starting prompt; every later round evaluates a
/// perturbed copy of the incumbent and keeps it only on strict improvement.
pub fn hill_climb(
    evaluate: &mut dyn FnMut(&StochasticPrompt) -> Result<f64>,
    segments: &[Segment],
    j: usize,
    rounds: usize,
    seed: u64,
) -> Result<PerturbHistory> {
    if segments.is_empty() || rounds == 0 {
        return Err(Error::InvalidArgument(format!(
            "hill climbing needs segments and rounds ({} segments, {rounds} rounds)",
            segments.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices: Vec<usize> = (0..j).map(|_| rng.random_range(0..segments.len())).collect();
    let start = assemble_prompt(indices.iter().map(|&i| segments[i].clone()).collect(), j)?;
    let provenance = start.provenance();
    let mut best = start.clone();
    let mut best_g = f64::NEG_INFINITY;
    let mut out = PerturbHistory::default();
    for k in 0..rounds {
        let sigma = sigma_at(k, rounds);
        let candidate = if k == 0 { start.clone() } else { perturb(&best, sigma, &mut rng) };
        let g = evaluate(&candidate)?;
        if g > best_g {
            best_g = g;
            best = candidate;
        }
        out.incumbent.push(best_g);
        out.history.records.push(RoundRecord {
            round: k,
            indices: indices.clone(),
            provenance: provenance.clone(),
            g,
            scale: sigma,
        });
    }
    out.best_prompt = Some(best);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::Transition;

    fn segments() -> Vec<Segment> {
        (0..4)
            .map(|i| Segment {
                transitions: (0..2)
                    .map(|t| Transition {
                        return_to_go: 10.0,
                        state: vec![i as f64, t as f64],
                        action: vec![0.5, -0.5, 0.0],
                        reward: 0.0,
                        timestep: t,
                    })
                    .collect(),
                source_trajectory: i,
                source_offset: 0,
            })
            .collect()
    }

    fn values(p: &StochasticPrompt) -> Vec<f64> {
        p.segments().iter().flat_map(Segment::flatten).collect()
    }

    #[test]
    fn zero_sigma_is_identity() {
        let p = assemble_prompt(segments()[..2].to_vec(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(perturb(&p, 0.0, &mut rng), p);
    }

    #[test]
    fn noise_touches_every_segment_and_is_centered() {
        let p = assemble_prompt(segments()[..2].to_vec(), 2).unwrap();
        let base = values(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = perturb(&p, 0.3, &mut rng);
        for (a, b) in values(&q).chunks(6).zip(base.chunks(6)) {
            assert!(a.iter().zip(b).any(|(x, y)| x != y));
        }
        let draws = 10_000;
        let mut sum = 0.0;
        for _ in 0..draws {
            let q = perturb(&p, 1.0, &mut rng);
            sum += q.segments()[0].transitions[0].state[0] - base[1];
        }
        let mean = sum / draws as f64;
        assert!(mean.abs() < 3.0 / (draws as f64).sqrt(), "{mean}");
    }

    #[test]
    fn schedule_endpoints() {
        assert!((sigma_at(0, 250) - 1.1).abs() < 1e-12);
        assert!((sigma_at(249, 250) - 0.1).abs() < 1e-12);
        assert!((sigma_at(125, 250) - 0.6).abs() < 0.01);
    }

    #[test]
    fn incumbent_never_decreases() {
        let segs = segments();
        let target = vec![1.5; 12];
        let mut eval = |p: &StochasticPrompt| -> Result<f64> {
            let v = values(p);
            Ok(-v.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        };
        let h = hill_climb(&mut eval, &segs, 1, 60, 3).unwrap();
        assert_eq!(h.history.len(), 60);
        assert!(h.incumbent.windows(2).all(|w| w[1] >= w[0]));
        assert!(h.incumbent[59] > h.incumbent[0]);
        let again = hill_climb(&mut eval, &segs, 1, 60, 3).unwrap();
        assert_eq!(again, h);
    }
}
