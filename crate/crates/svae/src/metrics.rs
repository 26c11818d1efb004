//! Evaluation: reconstruction error, mode coverage, a mixture-posterior
//! inception analog, importance-weighted log-likelihood, and a probe for the
//! vanishing-gradient effect. Everything here is a pure function of models,
//! data, and seeds; nothing mutates training state.

use crate::distributions::{
    log_sum_exp, mean_with_error, DiagonalGaussian, Estimate, GmmDensity,
};
use crate::models::{Batch, ModelTriple};
use crate::objectives::{
    discriminator_objective, generator_objective, saturating_generator_objective,
    symmetric_kl_estimate, BatchPair, BuiltObjective, ObjectiveError, ObjectiveSpec, Variant,
};
use crate::tensor::TensorError;
use crate::training::{adam_step, collect_grads, global_norm, AdamState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Points per side (generated and real) in one evaluation record: keeps the
/// Monte Carlo error on fractions under about 0.02.
pub const EVAL_SET_SIZE: usize = 5000;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty evaluation set")]
    EmptyEvalSet,
    #[error("threshold_sigmas must be positive and finite, got {0}")]
    BadThreshold(f64),
    #[error("importance sample count k must be at least 1")]
    BadK,
    #[error("evaluation points have dimension {got}, expected {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("metric `{metric}` out of bounds: {value}")]
    OutOfBounds { metric: &'static str, value: f64 },
    #[error("non-finite value for `{0}`")]
    NonFinite(&'static str),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

/// One full evaluation of a model triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub mse: f64,
    pub modes_covered: usize,
    pub high_quality_fraction: f64,
    pub is_analog: f64,
    pub iw_loglik: f64,
    pub skl_estimate: f64,
    pub gen_grad_norm_raw_f: f64,
    pub gen_grad_norm_log_sigmoid: f64,
}

impl MetricsRecord {
    pub fn validate(&self, n_components: usize) -> Result<(), MetricsError> {
        let finite = [
            ("mse", self.mse),
            ("high_quality_fraction", self.high_quality_fraction),
            ("is_analog", self.is_analog),
            ("iw_loglik", self.iw_loglik),
            ("skl_estimate", self.skl_estimate),
            ("gen_grad_norm_raw_f", self.gen_grad_norm_raw_f),
            ("gen_grad_norm_log_sigmoid", self.gen_grad_norm_log_sigmoid),
        ];
        for (metric, value) in finite {
            if !value.is_finite() {
                return Err(MetricsError::NonFinite(metric));
            }
        }
        if self.mse < 0.0 {
            return Err(MetricsError::OutOfBounds { metric: "mse", value: self.mse });
        }
        if !(0.0..=1.0).contains(&self.high_quality_fraction) {
            return Err(MetricsError::OutOfBounds {
                metric: "high_quality_fraction",
                value: self.high_quality_fraction,
            });
        }
        if self.modes_covered > n_components {
            return Err(MetricsError::OutOfBounds {
                metric: "modes_covered",
                value: self.modes_covered as f64,
            });
        }
        if self.is_analog < 1.0 - 1e-9 || self.is_analog > n_components as f64 + 1e-9 {
            return Err(MetricsError::OutOfBounds {
                metric: "is_analog",
                value: self.is_analog,
            });
        }
        for (metric, value) in [
            ("gen_grad_norm_raw_f", self.gen_grad_norm_raw_f),
            ("gen_grad_norm_log_sigmoid", self.gen_grad_norm_log_sigmoid),
        ] {
            if value < 0.0 {
                return Err(MetricsError::OutOfBounds { metric, value });
            }
        }
        Ok(())
    }
}

/// Ancestral draws from the generative side: z from the prior, x from the
/// decoder conditional (mean plus noise, the full sampling process).
pub fn sample_from_model<R: Rng>(
    triple: &ModelTriple,
    n: usize,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    if n == 0 {
        return Vec::new();
    }
    let z = Batch::standard_normal(n, triple.dz, rng);
    let eps = Batch::standard_normal(n, triple.dx, rng);
    let (x, _, _) = triple.decode_batch(&z, &eps);
    (0..n).map(|i| x.row(i).to_vec()).collect()
}

fn check_dims(points: &[Vec<f64>], expected: usize) -> Result<(), MetricsError> {
    match points.iter().find(|p| p.len() != expected) {
        Some(p) => Err(MetricsError::DimMismatch { expected, got: p.len() }),
        None => Ok(()),
    }
}

/// Mean squared reconstruction error of x -> z -> x_hat with both passes at
/// their conditional means (noise set to zero), so the number is a property
/// of the networks alone.
pub fn reconstruction_mse(
    triple: &ModelTriple,
    eval_set: &[Vec<f64>],
) -> Result<f64, MetricsError> {
    if eval_set.is_empty() {
        return Err(MetricsError::EmptyEvalSet);
    }
    check_dims(eval_set, triple.dx)?;
    let n = eval_set.len();
    let x = Batch::from_rows(eval_set);
    let (z, _, _) = triple.encode_batch(&x, &Batch::zeros(n, triple.dz));
    let (x_hat, _, _) = triple.decode_batch(&z, &Batch::zeros(n, triple.dx));
    let mut total = 0.0;
    for i in 0..n {
        let a = x.row(i);
        let b = x_hat.row(i);
        total += a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
    }
    Ok(total / n as f64)
}

/// Mode bookkeeping for generated samples against the known mixture. A point
/// is high-quality when it lies within `threshold_sigmas` per-axis standard
/// deviations of some component mean (for the isotropic toy components this
/// is exactly a Euclidean ball of radius threshold * std). A mode counts as
/// covered when at least 1% of the points land nearest to it; the 1% floor
/// separates genuine coverage from stray outliers.
pub fn mode_coverage(
    generated: &[Vec<f64>],
    gmm: &GmmDensity,
    threshold_sigmas: f64,
) -> Result<(usize, f64), MetricsError> {
    if generated.is_empty() {
        return Err(MetricsError::EmptyEvalSet);
    }
    if !(threshold_sigmas > 0.0 && threshold_sigmas.is_finite()) {
        return Err(MetricsError::BadThreshold(threshold_sigmas));
    }
    check_dims(generated, gmm.dim())?;
    let n = generated.len();
    let thr2 = threshold_sigmas * threshold_sigmas;
    let mut assigned = vec![0usize; gmm.n_components()];
    let mut high_quality = 0usize;
    for p in generated {
        let mut best = 0usize;
        let mut best_d2 = f64::INFINITY;
        let mut hq = false;
        for (c, mean) in gmm.means().iter().enumerate() {
            let vars = &gmm.variances()[c];
            let mut d2 = 0.0;
            let mut scaled = 0.0;
            for d in 0..p.len() {
                let diff = p[d] - mean[d];
                d2 += diff * diff;
                scaled += diff * diff / vars[d];
            }
            if d2 < best_d2 {
                best_d2 = d2;
                best = c;
            }
            if scaled <= thr2 {
                hq = true;
            }
        }
        assigned[best] += 1;
        if hq {
            high_quality += 1;
        }
    }
    let covered = assigned.iter().filter(|&&c| c * 100 >= n).count();
    Ok((covered, high_quality as f64 / n as f64))
}

/// exp(mean KL(r(.|x) || r_bar)) with r the mixture responsibilities: the
/// inception-score construction with the ground-truth posterior standing in
/// for a trained classifier. Always within [1, n_components].
pub fn inception_score_analog(
    generated: &[Vec<f64>],
    gmm: &GmmDensity,
) -> Result<f64, MetricsError> {
    if generated.is_empty() {
        return Err(MetricsError::EmptyEvalSet);
    }
    check_dims(generated, gmm.dim())?;
    let n = generated.len() as f64;
    let n_comp = gmm.n_components();
    let mut avg = vec![0.0; n_comp];
    let mut per_point = Vec::with_capacity(generated.len());
    for p in generated {
        let r = gmm.responsibilities(p);
        for c in 0..n_comp {
            avg[c] += r[c] / n;
        }
        per_point.push(r);
    }
    let mut mean_kl = 0.0;
    for r in &per_point {
        let mut kl = 0.0;
        for c in 0..n_comp {
            if r[c] > 0.0 {
                kl += r[c] * (r[c].ln() - avg[c].ln());
            }
        }
        mean_kl += kl / n;
    }
    let score = mean_kl.exp();
    // mean KL(r || r_bar) is a mutual information, bounded by ln(n_comp).
    assert!(
        score >= 1.0 - 1e-9 && score <= n_comp as f64 + 1e-9,
        "inception analog out of bounds: {score}"
    );
    Ok(score)
}

/// Importance-weighted log-likelihood bound: mean over x of
/// log((1/k) sum_j p(x|z_j) p(z_j) / q(z_j|x)) with z_j drawn from q(z|x).
/// k = 1 is the plain ELBO estimate; the bound tightens in expectation as k
/// grows, and with the exact posterior as encoder every weight equals the
/// marginal likelihood, making the estimate exact at any k.
pub fn iw_loglik(
    triple: &ModelTriple,
    eval_set: &[Vec<f64>],
    k: usize,
    seed: u64,
) -> Result<Estimate, MetricsError> {
    if k < 1 {
        return Err(MetricsError::BadK);
    }
    if eval_set.is_empty() {
        return Err(MetricsError::EmptyEvalSet);
    }
    check_dims(eval_set, triple.dx)?;
    let n = eval_set.len();
    let x = Batch::from_rows(eval_set);
    let (_, enc_mean, enc_lv) = triple.encode_batch(&x, &Batch::zeros(n, triple.dz));
    let posteriors: Vec<DiagonalGaussian> = (0..n)
        .map(|i| DiagonalGaussian::new(enc_mean.row(i).to_vec(), enc_lv.row(i).to_vec()))
        .collect();
    let prior = DiagonalGaussian::standard(triple.dz);
    let zeros_x = Batch::zeros(n, triple.dx);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log_weights = vec![Vec::with_capacity(k); n];
    for _ in 0..k {
        let eps = Batch::standard_normal(n, triple.dz, &mut rng);
        let mut z = Batch::zeros(n, triple.dz);
        for i in 0..n * triple.dz {
            z.data[i] = enc_mean.data[i] + (0.5 * enc_lv.data[i]).exp() * eps.data[i];
        }
        let (_, dec_mean, dec_lv) = triple.decode_batch(&z, &zeros_x);
        for i in 0..n {
            let p_x =
                DiagonalGaussian::new(dec_mean.row(i).to_vec(), dec_lv.row(i).to_vec());
            let zi = z.row(i);
            log_weights[i].push(
                p_x.log_pdf(&eval_set[i]) + prior.log_pdf(zi) - posteriors[i].log_pdf(zi),
            );
        }
    }
    let per_x: Vec<f64> = log_weights
        .iter()
        .map(|lw| log_sum_exp(lw) - (k as f64).ln())
        .collect();
    Ok(mean_with_error(&per_x))
}

/// Pearson correlation coefficient of two equal-length samples. NaN when
/// either sample is degenerate (fewer than two points or zero variance).
pub fn pearson_correlation(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() || a.len() < 2 {
        return f64::NAN;
    }
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (x, y) in a.iter().zip(b) {
        let da = x - mean_a;
        let db = y - mean_b;
        cov += da * db;
        var_a += da * da;
        var_b += db * db;
    }
    cov / (var_a.sqrt() * var_b.sqrt())
}

/// Generator gradient norms under both transforms for one probe point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradNormPair {
    pub raw_f: f64,
    pub log_sigmoid: f64,
}

// Probe-local optimizer settings: the point is to land the cloned
// discriminator near its optimum quickly, so the rate is hotter than the
// training default.
const PROBE_DISC_LR: f64 = 1e-3;
const PROBE_BETA1: f64 = 0.5;
const PROBE_BETA2: f64 = 0.999;
const PROBE_EPSILON: f64 = 1e-8;

fn numeric_failure(err: &MetricsError) -> bool {
    matches!(
        err,
        MetricsError::Objective(ObjectiveError::Tensor(TensorError::Domain { .. }))
    )
}

fn probe_disc_step(
    clone: &mut ModelTriple,
    spec: &ObjectiveSpec,
    batch: &BatchPair,
    state: &mut AdamState,
) -> Result<bool, MetricsError> {
    let mut built =
        discriminator_objective(spec, clone, batch).map_err(MetricsError::Objective)?;
    if built.graph.backward(built.loss).is_err() {
        return Ok(false);
    }
    let grads = match collect_grads(&built) {
        Ok(g) => g,
        Err(_) => return Ok(false),
    };
    if !built.loss_value().is_finite()
        || grads.iter().any(|(_, g)| g.iter().any(|v| !v.is_finite()))
    {
        return Ok(false);
    }
    let mut refs: Vec<_> = clone.discriminator.params.iter_mut().collect();
    adam_step(state, &mut refs, &grads, PROBE_DISC_LR).expect("probe gradient map is exact");
    Ok(true)
}

fn probe_norm(
    built: Result<BuiltObjective, ObjectiveError>,
) -> Result<Option<f64>, MetricsError> {
    let mut built = match built {
        Ok(b) => b,
        Err(e) => {
            let e = MetricsError::Objective(e);
            return if numeric_failure(&e) { Ok(None) } else { Err(e) };
        }
    };
    if built.graph.backward(built.loss).is_err() {
        return Ok(None);
    }
    let grads = match collect_grads(&built) {
        Ok(g) => g,
        Err(_) => return Ok(None),
    };
    let norm = global_norm(&grads);
    Ok(norm.is_finite().then_some(norm))
}

/// For each requested k, train a *clone* of the discriminator k extra steps
/// on the given batch, then measure the generator gradient norm under the
/// raw-score transform and under the saturating log-sigmoid game (the
/// generator descending the discriminator's own objective) on that same
/// batch. The caller's models are never touched. A k whose evaluation turns
/// non-finite reports None; later ks still run as far as the numerics allow.
pub fn gradient_norm_probe(
    triple: &ModelTriple,
    batch: &BatchPair,
    extra_disc_steps: &[usize],
) -> Result<BTreeMap<usize, Option<GradNormPair>>, MetricsError> {
    if batch.is_empty() {
        return Err(MetricsError::EmptyEvalSet);
    }
    let raw_spec = ObjectiveSpec::for_variant(Variant::Svae);
    let mut clone = triple.clone();
    let mut state = AdamState::new(
        clone.discriminator.params.iter(),
        PROBE_BETA1,
        PROBE_BETA2,
        PROBE_EPSILON,
    );
    let mut ks: Vec<usize> = extra_disc_steps.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let mut out = BTreeMap::new();
    let mut trained = 0usize;
    let mut poisoned = false;
    for &k in &ks {
        while trained < k && !poisoned {
            if probe_disc_step(&mut clone, &raw_spec, batch, &mut state)? {
                trained += 1;
            } else {
                poisoned = true;
            }
        }
        if poisoned {
            out.insert(k, None);
            continue;
        }
        let raw = probe_norm(generator_objective(&raw_spec, &clone, batch))?;
        let logsig = probe_norm(saturating_generator_objective(&clone, batch))?;
        out.insert(
            k,
            match (raw, logsig) {
                (Some(raw_f), Some(log_sigmoid)) => {
                    Some(GradNormPair { raw_f, log_sigmoid })
                }
                _ => None,
            },
        );
    }
    Ok(out)
}

/// Full evaluation record for a model checkpoint: reconstruction error on the
/// real set, coverage and inception analog on fresh model samples, the
/// importance-weighted likelihood bound, the symmetric-divergence estimate,
/// and both generator gradient norms (no extra discriminator training).
pub fn evaluate_model(
    triple: &ModelTriple,
    objective: &ObjectiveSpec,
    real_set: &[Vec<f64>],
    gmm: &GmmDensity,
    step: usize,
    iw_samples: usize,
    seed: u64,
) -> Result<MetricsRecord, MetricsError> {
    if real_set.is_empty() {
        return Err(MetricsError::EmptyEvalSet);
    }
    let real = &real_set[..real_set.len().min(EVAL_SET_SIZE)];
    check_dims(real, triple.dx)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let generated = sample_from_model(triple, EVAL_SET_SIZE, &mut rng);
    let mse = reconstruction_mse(triple, real)?;
    let (modes_covered, high_quality_fraction) = mode_coverage(&generated, gmm, 3.0)?;
    let is_analog = inception_score_analog(&generated, gmm)?;
    let iw = iw_loglik(triple, real, iw_samples, seed.wrapping_add(1))?;
    let pair = BatchPair::draw(triple, Batch::from_rows(real), &mut rng)?;
    let skl = symmetric_kl_estimate(objective, triple, &pair)?;
    let norms = gradient_norm_probe(triple, &pair, &[0])?
        .remove(&0)
        .flatten()
        .ok_or(MetricsError::NonFinite("generator gradient norms"))?;
    let record = MetricsRecord {
        step,
        mse,
        modes_covered,
        high_quality_fraction,
        is_analog,
        iw_loglik: iw.value,
        skl_estimate: skl.value,
        gen_grad_norm_raw_f: norms.raw_f,
        gen_grad_norm_log_sigmoid: norms.log_sigmoid,
    };
    record.validate(gmm.n_components())?;
    Ok(record)
}
