//! Diagonal Gaussians and Gaussian mixtures with exact densities.
//!
//! Everything is a pure function of immutable parameters. Variances live in
//! log space for the Gaussians (so they cannot underflow to zero) and in
//! plain space for mixture components (validated positive at construction).

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

pub const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Error)]
pub enum DistError {
    #[error("mixture weights must sum to 1 within 1e-12, got {sum}")]
    BadWeights { sum: f64 },
    #[error("component {component} has non-positive variance {value}")]
    NonPositiveVariance { component: usize, value: f64 },
    #[error("component {component} has dimension {got}, expected {expected}")]
    DimMismatch {
        component: usize,
        got: usize,
        expected: usize,
    },
    #[error("mixture needs at least one component")]
    Empty,
}

/// Gaussian with independent coordinates, parameterized by mean and
/// log-variance per coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGaussian {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, log_variance: Vec<f64>) -> Self {
        assert_eq!(
            mean.len(),
            log_variance.len(),
            "mean and log-variance lengths differ"
        );
        DiagonalGaussian { mean, log_variance }
    }

    /// N(0, I) in `dim` dimensions.
    pub fn standard(dim: usize) -> Self {
        DiagonalGaussian {
            mean: vec![0.0; dim],
            log_variance: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// log N(x; mean, diag(e^log_variance)).
    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim(), "point dimension mismatch");
        let mut acc = 0.0;
        for i in 0..x.len() {
            let lv = self.log_variance[i];
            let d = x[i] - self.mean[i];
            acc += LN_2PI + lv + d * d * (-lv).exp();
        }
        -0.5 * acc
    }

    /// mean + e^{log_variance/2} * eps, the reparameterized sample.
    pub fn sample_reparameterized(&self, eps: &[f64]) -> Vec<f64> {
        assert_eq!(eps.len(), self.dim(), "noise dimension mismatch");
        self.mean
            .iter()
            .zip(&self.log_variance)
            .zip(eps)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let eps: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        self.sample_reparameterized(&eps)
    }

    /// Differential entropy: d/2 (ln 2 pi + 1) + 1/2 sum log_variance.
    pub fn entropy(&self) -> f64 {
        0.5 * self
            .log_variance
            .iter()
            .map(|lv| LN_2PI + 1.0 + lv)
            .sum::<f64>()
    }
}

/// KL(a || b) for diagonal Gaussians, coordinatewise closed form:
/// 1/2 sum [ e^{la - lb} + (mu_a - mu_b)^2 e^{-lb} - 1 + lb - la ].
pub fn gaussian_kl(a: &DiagonalGaussian, b: &DiagonalGaussian) -> f64 {
    assert_eq!(a.dim(), b.dim(), "KL between different dimensions");
    let mut acc = 0.0;
    for i in 0..a.dim() {
        let (la, lb) = (a.log_variance[i], b.log_variance[i]);
        let dm = a.mean[i] - b.mean[i];
        acc += (la - lb).exp() + dm * dm * (-lb).exp() - 1.0 + lb - la;
    }
    0.5 * acc
}

pub fn gaussian_symmetric_kl(a: &DiagonalGaussian, b: &DiagonalGaussian) -> f64 {
    gaussian_kl(a, b) + gaussian_kl(b, a)
}

/// Mixture of diagonal Gaussians. Weights sum to one; variances are plain
/// (not log) and strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmDensity {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
}

impl GmmDensity {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        variances: Vec<Vec<f64>>,
    ) -> Result<Self, DistError> {
        if weights.is_empty() {
            return Err(DistError::Empty);
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 || weights.iter().any(|w| *w < 0.0) {
            return Err(DistError::BadWeights { sum });
        }
        let dim = means[0].len();
        for (k, (m, v)) in means.iter().zip(&variances).enumerate() {
            if m.len() != dim {
                return Err(DistError::DimMismatch {
                    component: k,
                    got: m.len(),
                    expected: dim,
                });
            }
            if v.len() != dim {
                return Err(DistError::DimMismatch {
                    component: k,
                    got: v.len(),
                    expected: dim,
                });
            }
            if let Some(bad) = v.iter().find(|x| **x <= 0.0) {
                return Err(DistError::NonPositiveVariance {
                    component: k,
                    value: *bad,
                });
            }
        }
        Ok(GmmDensity {
            weights,
            means,
            variances,
        })
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[Vec<f64>] {
        &self.variances
    }

    fn component_log_terms(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim(), "point dimension mismatch");
        (0..self.n_components())
            .map(|k| {
                let mut acc = 0.0;
                for i in 0..x.len() {
                    let v = self.variances[k][i];
                    let d = x[i] - self.means[k][i];
                    acc += LN_2PI + v.ln() + d * d / v;
                }
                self.weights[k].ln() - 0.5 * acc
            })
            .collect()
    }

    /// ln sum_k w_k N(x; mu_k, var_k), evaluated by log-sum-exp so that far
    /// tails stay finite instead of collapsing to ln(0).
    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        log_sum_exp(&self.component_log_terms(x))
    }

    /// Posterior probability of each component given x; sums to one.
    pub fn responsibilities(&self, x: &[f64]) -> Vec<f64> {
        let terms = self.component_log_terms(x);
        let total = log_sum_exp(&terms);
        terms.iter().map(|t| (t - total).exp()).collect()
    }

    /// Draw one point; also reports which component produced it.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> (Vec<f64>, usize) {
        let u: f64 = rng.gen();
        let mut cum = 0.0;
        let mut comp = self.n_components() - 1;
        for (k, w) in self.weights.iter().enumerate() {
            cum += w;
            if u < cum {
                comp = k;
                break;
            }
        }
        let point = (0..self.dim())
            .map(|i| {
                let e: f64 = rng.sample(StandardNormal);
                self.means[comp][i] + self.variances[comp][i].sqrt() * e
            })
            .collect();
        (point, comp)
    }
}

pub fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// A Monte Carlo value with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub standard_error: f64,
}

/// Sample mean and standard error of the mean.
pub fn mean_with_error(values: &[f64]) -> Estimate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return Estimate { value: mean, standard_error: f64::INFINITY };
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Estimate { value: mean, standard_error: (var / n).sqrt() }
}
