//! Analytic score function against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::l2_norm;
use crate::policy::{EngineConfig, FeatureMap, PolicyParams, State};
use crate::toyenv::Token;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub triples: usize,
    pub step: f64,
    pub max_relative_error: f64,
    pub mean_relative_error: f64,
}

impl GradcheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_relative_error <= tol
    }
}

/// `‖analytic − fd‖ / max(‖analytic‖, ‖fd‖, 1e-8)` for one (params, state,
/// action) triple.
pub fn relative_error(params: &PolicyParams, state: State<'_>, action: usize, h: f64) -> Result<f64> {
    let engine = EngineConfig::reference();
    let analytic = params.score_function(&engine, state, action)?;
    let mut work = params.clone();
    let mut fd = vec![0.0; analytic.len()];
    for (i, slot) in fd.iter_mut().enumerate() {
        let orig = work.theta[i];
        work.theta[i] = orig + h;
        let up = work.token_distribution(&engine, state)?[action].ln();
        work.theta[i] = orig - h;
        let down = work.token_distribution(&engine, state)?[action].ln();
        work.theta[i] = orig;
        *slot = (up - down) / (2.0 * h);
    }
    let diff: Vec<f64> = analytic.iter().zip(&fd).map(|(a, b)| a - b).collect();
    Ok(l2_norm(&diff) / l2_norm(&analytic).max(l2_norm(&fd)).max(1e-8))
}

/// Random triples alternating between hashed and one-hot feature maps.
pub fn run_gradcheck(triples: usize, h: f64, seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err: f64 = 0.0;
    let mut sum = 0.0;
    for i in 0..triples {
        let vocab = rng.gen_range(2..=5);
        let positions = rng.gen_range(1..=4);
        let fm = if i % 2 == 0 {
            FeatureMap::hashed(rng.gen_range(2..=8), positions, rng.gen(), rng.gen())
        } else {
            FeatureMap::one_hot(vocab, positions, 3, rng.gen())
        };
        let params = PolicyParams::random(fm, vocab, 1.0, &mut rng)?;
        let prompt = rng.gen_range(0..3);
        let len = rng.gen_range(0..5);
        let prefix: Vec<Token> = (0..len).map(|_| rng.gen_range(0..vocab as Token)).collect();
        let action = rng.gen_range(0..vocab);
        let err = relative_error(&params, State::new(prompt, &prefix), action, h)?;
        max_err = max_err.max(err);
        sum += err;
    }
    Ok(GradcheckReport {
        triples,
        step: h,
        max_relative_error: max_err,
        mean_relative_error: if triples == 0 { 0.0 } else { sum / triples as f64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_gradcheck_passes() {
        let r = run_gradcheck(20, DEFAULT_STEP, 9).unwrap();
        assert!(r.passed(1e-5), "{r:?}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = PolicyParams::random(FeatureMap::hashed(4, 2, 1, true), 3, 1.0, &mut rng).unwrap();
        // A step this large leaves a visible truncation error.
        assert!(relative_error(&p, State::new(0, &[1]), 2, 0.5).unwrap() > 1e-3);
    }
}
