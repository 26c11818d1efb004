//! Self-checks against closed-form linear Gaussian models.
//!
//! Three families of checks, each with an analytic answer: the divergence
//! decompositions must match their Monte Carlo term sums, the symmetric-KL
//! estimator fed the analytic log-ratio must match the closed-form joint
//! divergence, and a discriminator trained on joint samples must recover the
//! analytic log-ratio up to strong correlation. Everything is seeded, so a
//! passing configuration stays passing.

use anyhow::bail;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use svae::identities::{evaluate_decomposition, Identity, LinearGaussianSpec};
use svae::metrics::pearson_correlation;
use svae::models::{
    default_decoder_spec, default_encoder_spec, Activation, HeadSpec, MlpSpec, ModelTriple,
};
use svae::objectives::{symmetric_kl_estimate_with, BatchPair, ObjectiveSpec, Variant};
use svae::training::{fit_discriminator, TrainConfig};

/// Joint-sample batch size for the discriminator fit.
const FIT_BATCH: usize = 512;
/// Adversarial-phase learning rate is too timid for a plain supervised fit.
const FIT_LEARNING_RATE: f64 = 1e-3;
/// Supervised momentum; the low adversarial default just slows this fit down.
const FIT_BETA1: f64 = 0.9;
/// Correlation a trained discriminator must reach against the analytic ratio.
pub const RATIO_CORRELATION_THRESHOLD: f64 = 0.95;

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    /// Random closed-form models for the decomposition checks.
    pub models: usize,
    /// Monte Carlo samples per decomposition and estimator check.
    pub samples: usize,
    /// Training steps for each discriminator fit.
    pub disc_steps: usize,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            models: 6,
            samples: 30_000,
            disc_steps: 800,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub lines: Vec<String>,
    pub passed: bool,
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAIL"
    }
}

/// Random model with small random dimensions, drawn from the given stream.
fn random_model<R: Rng>(rng: &mut R) -> LinearGaussianSpec {
    let dx = rng.gen_range(1..=3);
    let dz = rng.gen_range(1..=2);
    LinearGaussianSpec::random(dx, dz, rng)
}

pub fn run_verify(opts: &VerifyOptions) -> anyhow::Result<VerifyReport> {
    if opts.models == 0 {
        bail!("verify needs at least one model");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let models: Vec<LinearGaussianSpec> = (0..opts.models).map(|_| random_model(&mut rng)).collect();

    let mut lines = Vec::new();
    let mut passed = true;

    for identity in [
        Identity::JointKlXChain,
        Identity::JointKlZChain,
        Identity::SymmetricKlZChain,
        Identity::SymmetricKlXChain,
    ] {
        let mut ok_count = 0;
        let mut worst = 0.0f64;
        for (i, model) in models.iter().enumerate() {
            let report =
                evaluate_decomposition(model, identity, opts.samples, opts.seed + i as u64)?;
            worst = worst.max(report.gap() / report.standard_error);
            if report.within(3.0) {
                ok_count += 1;
            }
        }
        let ok = ok_count == models.len();
        passed &= ok;
        lines.push(format!(
            "identity {identity}: {ok_count}/{} models within 3 sigma (worst {worst:.2} sigma) .. {}",
            models.len(),
            verdict(ok)
        ));
    }

    let skl_models = models.len().min(3);
    let mut ok_count = 0;
    let mut worst = 0.0f64;
    for model in &models[..skl_models] {
        let batch = BatchPair::from_linear_gaussian(model, opts.samples, &mut rng)?;
        let est = symmetric_kl_estimate_with(&batch, |x, z| model.log_ratio_oracle(x, z))?;
        let closed = model.symmetric_kl_closed()?;
        let gap = (est.value - closed).abs();
        worst = worst.max(gap / est.standard_error);
        if gap <= 3.0 * est.standard_error {
            ok_count += 1;
        }
    }
    let ok = ok_count == skl_models;
    passed &= ok;
    lines.push(format!(
        "symmetric-kl estimator vs closed form: {ok_count}/{skl_models} models within 3 sigma (worst {worst:.2} sigma) .. {}",
        verdict(ok)
    ));

    let fit_models = models.len().min(2);
    let mut min_r = f64::INFINITY;
    for (i, model) in models[..fit_models].iter().enumerate() {
        let r = discriminator_ratio_correlation(model, opts.disc_steps, opts.seed + 100 + i as u64)?;
        min_r = min_r.min(r);
    }
    let ok = min_r > RATIO_CORRELATION_THRESHOLD;
    passed &= ok;
    lines.push(format!(
        "optimal discriminator vs analytic log-ratio: min correlation {min_r:.3} over {fit_models} fits (threshold {RATIO_CORRELATION_THRESHOLD}) .. {}",
        verdict(ok)
    ));

    Ok(VerifyReport { lines, passed })
}

/// Train a fresh discriminator on ancestral joint samples from the model and
/// return its correlation with the analytic log-ratio over a held-out grid.
pub fn discriminator_ratio_correlation(
    model: &LinearGaussianSpec,
    steps: usize,
    seed: u64,
) -> anyhow::Result<f64> {
    let disc = MlpSpec {
        input_dim: model.dx + model.dz,
        layer_widths: vec![64, 64, 1],
        activation: Activation::Relu,
        output_heads: vec![HeadSpec {
            name: "score".into(),
            width: 1,
        }],
    };
    let mut triple = ModelTriple::init(
        &default_encoder_spec(model.dx, model.dz),
        &default_decoder_spec(model.dz, model.dx),
        &disc,
        seed,
    )?;
    let objective = ObjectiveSpec::for_variant(Variant::Svae);
    let config = TrainConfig {
        learning_rate: FIT_LEARNING_RATE,
        adam_beta1: FIT_BETA1,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    fit_discriminator(&mut triple, &objective, steps, &config, |_| {
        Ok(BatchPair::from_linear_gaussian(model, FIT_BATCH, &mut rng)?)
    })?;

    let grid = joint_grid(model);
    let mut scores = Vec::with_capacity(grid.len());
    let mut oracle = Vec::with_capacity(grid.len());
    for (x, z) in &grid {
        scores.push(triple.discriminate(x, z));
        oracle.push(model.log_ratio_oracle(x, z));
    }
    Ok(pearson_correlation(&scores, &oracle))
}

/// Held-out evaluation grid over the joint (x, z) space. Each dimension is
/// centered between the two joints' marginal means and spans two spreads to
/// either side, a spread being the larger marginal deviation plus half the
/// mean gap; resolution drops as dimensionality grows.
///
/// Lattice points outside the bulk of both joints are dropped: the
/// discriminator never sees samples there, so its value is unconstrained
/// extrapolation, and in more than three dimensions the box corners are far
/// enough out to dominate the correlation statistic with it. A point is in
/// the bulk of a joint when its squared Mahalanobis distance is within three
/// standard deviations of the chi-square mean for the dimension.
pub fn joint_grid(model: &LinearGaussianSpec) -> Vec<(Vec<f64>, Vec<f64>)> {
    let dx = model.dx;
    let dz = model.dz;
    let dims = dx + dz;
    let per_dim: usize = match dims {
        0..=2 => 24,
        3 => 10,
        4 => 6,
        5 => 5,
        _ => 4,
    };

    let span = |q_mean: f64, q_std: f64, p_mean: f64, p_std: f64| {
        let center = 0.5 * (q_mean + p_mean);
        let half = 2.0 * (q_std.max(p_std) + 0.5 * (q_mean - p_mean).abs());
        (center, half)
    };
    let mut centers = Vec::with_capacity(dims);
    let mut halves = Vec::with_capacity(dims);
    for i in 0..dx {
        // p-side x marginal: mean b_i, variance row_i(A)row_i(A)^T + noise^2.
        let p_var: f64 = (0..dz)
            .map(|j| model.decoder_map[i * dz + j].powi(2))
            .sum::<f64>()
            + model.decoder_noise.powi(2);
        let (c, h) = span(
            model.data_mean[i],
            model.data_variances[i].sqrt(),
            model.decoder_shift[i],
            p_var.sqrt(),
        );
        centers.push(c);
        halves.push(h);
    }
    for i in 0..dz {
        // q-side z marginal: mean C m + d, variance row_i(C) S row_i(C)^T + noise^2.
        let q_mean: f64 = (0..dx)
            .map(|j| model.encoder_map[i * dx + j] * model.data_mean[j])
            .sum::<f64>()
            + model.encoder_shift[i];
        let q_var: f64 = (0..dx)
            .map(|j| model.encoder_map[i * dx + j].powi(2) * model.data_variances[j])
            .sum::<f64>()
            + model.encoder_noise.powi(2);
        let (c, h) = span(q_mean, q_var.sqrt(), 0.0, 1.0);
        centers.push(c);
        halves.push(h);
    }

    let joint_q = model.joint_q();
    let joint_p = model.joint_p();
    // For a Gaussian, 2 (log pdf(mean) - log pdf(x)) is exactly the squared
    // Mahalanobis distance of x.
    let peak_q = joint_q.log_pdf(joint_q.mean.as_slice());
    let peak_p = joint_p.log_pdf(joint_p.mean.as_slice());
    let d = dims as f64;
    let mut radius_sq = d + 3.0 * (2.0 * d).sqrt();

    let total = per_dim.pow(dims as u32);
    let mut lattice = Vec::with_capacity(total);
    for index in 0..total {
        let mut rem = index;
        let mut point = Vec::with_capacity(dims);
        for dim in 0..dims {
            let k = rem % per_dim;
            rem /= per_dim;
            let t = k as f64 / (per_dim - 1) as f64;
            point.push(centers[dim] - halves[dim] + 2.0 * halves[dim] * t);
        }
        let nearer = (2.0 * (peak_q - joint_q.log_pdf(&point)))
            .min(2.0 * (peak_p - joint_p.log_pdf(&point)));
        lattice.push((point, nearer));
    }
    // Widen the bulk if a skewed model leaves too few points for a stable
    // correlation estimate.
    loop {
        let kept = lattice.iter().filter(|(_, m)| *m <= radius_sq).count();
        if kept >= 32 || kept == lattice.len() {
            break;
        }
        radius_sq *= 2.0;
    }
    lattice
        .into_iter()
        .filter(|(_, m)| *m <= radius_sq)
        .map(|(point, _)| (point[..dx].to_vec(), point[dx..].to_vec()))
        .collect()
}
