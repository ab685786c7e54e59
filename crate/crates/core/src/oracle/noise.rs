//! Monte-Carlo checks of the noisy-gradient decomposition
//! `ĝ = ∇J + Bias + ξ`, `ξ ~ N(0, Var/d · I)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::dot;

pub const MIN_SAMPLES: usize = 10_000;
/// Doublings attempted before a noisy estimate is reported as non-convergent.
const MAX_DOUBLINGS: u32 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub true_gradient: Vec<f64>,
    pub bias: Vec<f64>,
    /// Total variance `E‖ξ‖²`, spread evenly over coordinates.
    pub noise_variance: f64,
    /// `L`.
    pub smoothness: f64,
    /// `η`.
    pub step_size: f64,
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        if self.true_gradient.is_empty() || self.true_gradient.len() != self.bias.len() {
            return Err(Error::config("true_gradient and bias must be non-empty and equally long"));
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::config("noise_variance must be finite and >= 0"));
        }
        if !(self.smoothness > 0.0 && self.step_size > 0.0) {
            return Err(Error::config("smoothness and step_size must be positive"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.true_gradient.len()
    }

    /// Bias plus one noise draw, `e = Bias + ξ`.
    fn error_draw(&self, normal: &Normal<f64>, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        let sd = (self.noise_variance / self.dim() as f64).sqrt();
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o = b + sd * normal.sample(rng);
        }
    }

    /// Closed-form `E⟨∇J, ĝ⟩`.
    pub fn expected_inner_product(&self) -> f64 {
        let g = &self.true_gradient;
        dot(g, g) + dot(g, &self.bias)
    }

    /// Closed-form `E‖ĝ‖²`.
    pub fn expected_squared_norm(&self) -> f64 {
        let (g, b) = (&self.true_gradient, &self.bias);
        dot(g, g) + 2.0 * dot(g, b) + dot(b, b) + self.noise_variance
    }
}

/// A Monte-Carlo estimate against its closed form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub expected: f64,
    pub estimate: f64,
    pub standard_error: f64,
    pub residual: f64,
    /// `residual ≤ 3 · standard_error` (plus rounding slack).
    pub within: bool,
}

/// Mean and standard error accumulated as deviations from a reference value,
/// so a zero-noise series reproduces the reference exactly.
#[derive(Default)]
struct Deviations {
    n: usize,
    sum: f64,
    sum_sq: f64,
}

impl Deviations {
    fn push(&mut self, d: f64) {
        self.n += 1;
        self.sum += d;
        self.sum_sq += d * d;
    }

    fn mean(&self) -> f64 {
        self.sum / self.n as f64
    }

    fn standard_error(&self) -> f64 {
        let n = self.n as f64;
        let var = ((self.sum_sq - self.sum * self.sum / n) / (n - 1.0)).max(0.0);
        (var / n).sqrt()
    }

    fn check(&self, expected: f64) -> IdentityCheck {
        let mean = self.mean();
        let standard_error = self.standard_error();
        let residual = mean.abs();
        IdentityCheck {
            expected,
            estimate: expected + mean,
            standard_error,
            residual,
            within: residual <= 3.0 * standard_error + 1e-12 * (1.0 + expected.abs()),
        }
    }
}

fn identity_pass(model: &NoiseModel, samples: usize, seed: u64) -> (IdentityCheck, IdentityCheck) {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = &model.true_gradient;
    let (ip_ref, sq_ref) = (model.expected_inner_product(), model.expected_squared_norm());
    let mut e = vec![0.0; model.dim()];
    let mut ghat = vec![0.0; model.dim()];
    let (mut ip, mut sq) = (Deviations::default(), Deviations::default());
    for _ in 0..samples {
        model.error_draw(&normal, &mut rng, &mut e);
        for i in 0..e.len() {
            ghat[i] = g[i] + e[i];
        }
        ip.push(dot(g, &ghat) - ip_ref);
        sq.push(dot(&ghat, &ghat) - sq_ref);
    }
    (ip.check(ip_ref), sq.check(sq_ref))
}

/// Per-step loss terms on `J(θ) = −(L/2)‖θ‖²`, started where `∇J` equals the
/// model's true gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub step_sizes: Vec<f64>,
    /// `E[η⟨∇J, e⟩ − (J(θ + ηe) − J(θ))]` with `e = Bias + ξ`.
    pub noise_penalty: Vec<f64>,
    /// `J(θ + η∇J) − J(θ)`.
    pub progress: Vec<f64>,
    /// `None` when the penalty vanishes identically (no bias, no noise).
    pub noise_slope: Option<f64>,
    pub progress_slope: f64,
}

/// Least-squares slope of `log y` on `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Seven log-spaced step sizes from 1e-4 to 1e-1.
pub fn default_step_sizes() -> Vec<f64> {
    (0..7).map(|i| 10f64.powf(-4.0 + 0.5 * i as f64)).collect()
}

pub fn scaling_report(model: &NoiseModel, step_sizes: &[f64], samples: usize, seed: u64) -> Result<ScalingReport> {
    model.validate()?;
    if step_sizes.len() < 2 || step_sizes.iter().any(|&h| !(h > 0.0)) {
        return Err(Error::config("need at least two positive step sizes"));
    }
    let l = model.smoothness;
    let objective = |theta: &[f64]| -0.5 * l * dot(theta, theta);
    let theta: Vec<f64> = model.true_gradient.iter().map(|g| -g / l).collect();
    let j0 = objective(&theta);
    let grad = &model.true_gradient;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    // Common random numbers across step sizes.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<Vec<f64>> = (0..samples)
        .map(|_| {
            let mut e = vec![0.0; model.dim()];
            model.error_draw(&normal, &mut rng, &mut e);
            e
        })
        .collect();
    let mut noise_penalty = Vec::with_capacity(step_sizes.len());
    let mut progress = Vec::with_capacity(step_sizes.len());
    let mut moved = vec![0.0; model.dim()];
    for &eta in step_sizes {
        let mut total = 0.0;
        for e in &draws {
            for i in 0..moved.len() {
                moved[i] = theta[i] + eta * e[i];
            }
            total += eta * dot(grad, e) - (objective(&moved) - j0);
        }
        noise_penalty.push(total / samples as f64);
        for i in 0..moved.len() {
            moved[i] = theta[i] + eta * grad[i];
        }
        progress.push(objective(&moved) - j0);
    }
    let vanishing = noise_penalty.iter().all(|&v| v == 0.0);
    if progress.iter().any(|v| !(*v > 0.0)) || !vanishing && noise_penalty.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Numeric("loss terms must be positive for a log-log fit".into()));
    }
    Ok(ScalingReport {
        noise_slope: (!vanishing).then(|| log_log_slope(step_sizes, &noise_penalty)),
        progress_slope: log_log_slope(step_sizes, &progress),
        step_sizes: step_sizes.to_vec(),
        noise_penalty,
        progress,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppendixAReport {
    pub samples: usize,
    pub inner_product: IdentityCheck,
    pub squared_norm: IdentityCheck,
    /// `(L η²/2) · E‖ĝ‖²` at the model's step size.
    pub noise_penalty_at_step: f64,
    pub scaling: ScalingReport,
    pub passed: bool,
}

impl AppendixAReport {
    pub fn slopes_ok(&self, tol: f64) -> bool {
        self.scaling.noise_slope.is_none_or(|s| (s - 2.0).abs() <= tol)
            && (self.scaling.progress_slope - 1.0).abs() <= tol
    }
}

/// Relative standard-error ceiling above which the sample count is doubled.
fn converged(c: &IdentityCheck) -> bool {
    c.standard_error <= 1e-2 * (1.0 + c.expected.abs())
}

pub fn verify_appendix_a(model: &NoiseModel, samples: usize, seed: u64) -> Result<AppendixAReport> {
    model.validate()?;
    if samples < MIN_SAMPLES {
        return Err(Error::config(format!("need at least {MIN_SAMPLES} samples, got {samples}")));
    }
    let mut n = samples;
    let mut doublings = 0;
    let (inner_product, squared_norm) = loop {
        let (a, b) = identity_pass(model, n, seed);
        if converged(&a) && converged(&b) {
            break (a, b);
        }
        if doublings == MAX_DOUBLINGS {
            return Err(Error::Numeric(format!(
                "standard errors {:.3e}/{:.3e} still above threshold at {n} samples",
                a.standard_error, b.standard_error
            )));
        }
        n *= 2;
        doublings += 1;
    };
    let scaling = scaling_report(model, &default_step_sizes(), n.min(MIN_SAMPLES), seed ^ 0xa5a5)?;
    let eta = model.step_size;
    let mut report = AppendixAReport {
        samples: n,
        noise_penalty_at_step: 0.5 * model.smoothness * eta * eta * squared_norm.estimate,
        inner_product,
        squared_norm,
        scaling,
        passed: false,
    };
    report.passed = report.inner_product.within && report.squared_norm.within && report.slopes_ok(0.1);
    Ok(report)
}

/// `SE(n) / SE(4n)` for the squared-norm estimate; ≈ 2 at the `1/√n` rate.
pub fn standard_error_ratio(model: &NoiseModel, samples: usize, seed: u64) -> Result<f64> {
    model.validate()?;
    let (_, small) = identity_pass(model, samples, seed);
    let (_, large) = identity_pass(model, 4 * samples, seed ^ 1);
    Ok(small.standard_error / large.standard_error)
}

/// The default testbed: 8 dimensions, unit-scale gradient, small bias,
/// `Var = 0.5`, `L = 1`.
pub fn default_model() -> NoiseModel {
    NoiseModel {
        true_gradient: vec![1.0, -0.5, 0.25, 0.8, -0.3, 0.1, 0.6, -0.9],
        bias: vec![0.05, 0.02, -0.04, 0.0, 0.03, -0.01, 0.0, 0.02],
        noise_variance: 0.5,
        smoothness: 1.0,
        step_size: 1e-2,
    }
}
