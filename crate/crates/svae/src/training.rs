//! Alternating adversarial optimization: a few discriminator ascent steps,
//! one generator step, repeat. Adam everywhere, optional weight clipping for
//! the critic variant, periodic evaluation on a dedicated random stream.

use crate::data::PointSet;
use crate::distributions::GmmDensity;
use crate::metrics::{self, MetricsError, EVAL_SET_SIZE};
use crate::models::{Batch, ModelTriple, ParamTensor};
use crate::objectives::{
    discriminator_objective, generator_objective, symmetric_kl_estimate, BatchPair,
    BuiltObjective, ObjectiveError, ObjectiveSpec, Variant,
};
use crate::tensor::TensorError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("learning_rate must be positive and finite, got {0}")]
    BadLearningRate(f64),
    #[error("batch_size must be at least 1")]
    BadBatchSize,
    #[error("disc_steps_per_gen_step must be at least 1")]
    BadDiscSteps,
    #[error("eval_every must be at least 1")]
    BadEvalEvery,
    #[error("adam_beta{which} must lie in [0, 1), got {value}")]
    BadBeta { which: u8, value: f64 },
    #[error("adam_epsilon must be positive, got {0}")]
    BadEpsilon(f64),
    #[error("clip threshold must be positive and finite, got {0}")]
    BadClip(f64),
    #[error("gradient set does not cover parameter `{0}`")]
    MissingGradient(String),
    #[error("expected {expected} gradients, got {got}")]
    GradientCount { expected: usize, got: usize },
    #[error("gradient for `{name}` has {got} entries, parameter has {expected}")]
    GradientShape { name: String, expected: usize, got: usize },
    #[error("non-finite {what} in {phase} phase at generator step {step}")]
    NonFinite { step: usize, phase: Phase, what: String },
    #[error("empty training set")]
    EmptyData,
    #[error("training data has dimension {got}, models expect {expected}")]
    DataDim { expected: usize, got: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Which half of the alternation was running when an error surfaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Discriminator,
    Generator,
    Evaluation,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Discriminator => "discriminator",
            Phase::Generator => "generator",
            Phase::Evaluation => "evaluation",
        })
    }
}

/// Optimization hyperparameters. beta1 = 0.5 rather than the usual 0.9: the
/// lower momentum is the standard choice for adversarial pairs, where stale
/// first moments chase a moving objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_generator_steps: usize,
    pub disc_steps_per_gen_step: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub clip_value: f64,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.0001,
            batch_size: 512,
            total_generator_steps: 2000,
            disc_steps_per_gen_step: 1,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            clip_value: 0.01,
            seed: 0,
            eval_every: 200,
        }
    }
}

impl TrainConfig {
    /// Defaults tuned per variant: the critic gets five updates per generator
    /// update, everyone else one.
    pub fn default_for(variant: Variant) -> Self {
        let mut c = TrainConfig::default();
        if variant == Variant::Wgan {
            c.disc_steps_per_gen_step = 5;
        }
        c
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::BadLearningRate(self.learning_rate));
        }
        if self.batch_size < 1 {
            return Err(TrainError::BadBatchSize);
        }
        if self.disc_steps_per_gen_step < 1 {
            return Err(TrainError::BadDiscSteps);
        }
        if self.eval_every < 1 {
            return Err(TrainError::BadEvalEvery);
        }
        for (which, value) in [(1, self.adam_beta1), (2, self.adam_beta2)] {
            if !(0.0..1.0).contains(&value) {
                return Err(TrainError::BadBeta { which, value });
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(TrainError::BadEpsilon(self.adam_epsilon));
        }
        if !(self.clip_value > 0.0 && self.clip_value.is_finite()) {
            return Err(TrainError::BadClip(self.clip_value));
        }
        Ok(())
    }
}

/// Per-tensor Adam moments, keyed by parameter name. step_count equals the
/// number of updates applied through this state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    names: Vec<String>,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl AdamState {
    pub fn new<'a>(
        params: impl IntoIterator<Item = &'a ParamTensor>,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    ) -> Self {
        let mut names = Vec::new();
        let mut first = Vec::new();
        let mut second = Vec::new();
        for p in params {
            names.push(p.name.clone());
            first.push(vec![0.0; p.values.len()]);
            second.push(vec![0.0; p.values.len()]);
        }
        AdamState {
            names,
            first_moment: first,
            second_moment: second,
            step_count: 0,
            beta1,
            beta2,
            epsilon,
        }
    }

    pub fn for_config<'a>(
        params: impl IntoIterator<Item = &'a ParamTensor>,
        config: &TrainConfig,
    ) -> Self {
        AdamState::new(params, config.adam_beta1, config.adam_beta2, config.adam_epsilon)
    }
}

/// One bias-corrected Adam update, in place. The gradient map must cover the
/// parameter set exactly (same names, same shapes); order is free.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [&mut ParamTensor],
    grads: &[(String, Vec<f64>)],
    lr: f64,
) -> Result<(), TrainError> {
    if grads.len() != params.len() || params.len() != state.names.len() {
        return Err(TrainError::GradientCount {
            expected: params.len().max(state.names.len()),
            got: grads.len(),
        });
    }
    // Resolve each parameter's gradient by name before mutating anything, so
    // a rejected call leaves state and parameters untouched.
    let mut resolved: Vec<&[f64]> = Vec::with_capacity(params.len());
    for (i, p) in params.iter().enumerate() {
        if state.names[i] != p.name {
            return Err(TrainError::MissingGradient(p.name.clone()));
        }
        let g = grads
            .iter()
            .find(|(n, _)| *n == p.name)
            .map(|(_, g)| g.as_slice())
            .ok_or_else(|| TrainError::MissingGradient(p.name.clone()))?;
        if g.len() != p.values.len() {
            return Err(TrainError::GradientShape {
                name: p.name.clone(),
                expected: p.values.len(),
                got: g.len(),
            });
        }
        resolved.push(g);
    }
    let t = state.step_count + 1;
    let bc1 = 1.0 - state.beta1.powi(t as i32);
    let bc2 = 1.0 - state.beta2.powi(t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let g = resolved[i];
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for j in 0..g.len() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p.values[j] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    state.step_count = t;
    Ok(())
}

/// Clamp every scalar in the parameter set to [-c, c]. Idempotent.
pub fn clip_parameters<'a>(
    params: impl IntoIterator<Item = &'a mut ParamTensor>,
    c: f64,
) -> Result<(), TrainError> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(TrainError::BadClip(c));
    }
    for p in params {
        for v in &mut p.values {
            *v = v.clamp(-c, c);
        }
    }
    Ok(())
}

/// One evaluation row of the metrics log; columns mirror the CSV layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub variant: String,
    pub lambda: f64,
    pub seed: u64,
    pub disc_loss: f64,
    pub gen_loss: f64,
    pub mse: f64,
    pub mode_coverage: usize,
    pub is_analog: f64,
    pub skl_estimate: f64,
    pub gen_grad_norm: f64,
    pub disc_grad_norm: f64,
}

const LOG_HEADER: &str = "step,variant,lambda,seed,disc_loss,gen_loss,mse,mode_coverage,\
                          is_analog,skl_estimate,gen_grad_norm,disc_grad_norm";

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub triple: ModelTriple,
    pub log: Vec<TrainLogRow>,
    pub disc_updates: u64,
    pub gen_updates: u64,
}

/// Flat summary of a finished run, serialized as the run's JSON record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: String,
    pub generator_transform: String,
    pub lambda: f64,
    pub seed: u64,
    pub total_generator_steps: usize,
    pub disc_updates: u64,
    pub gen_updates: u64,
    pub final_metrics: Option<TrainLogRow>,
}

impl TrainOutcome {
    pub fn summary(&self, objective: &ObjectiveSpec, config: &TrainConfig) -> RunSummary {
        RunSummary {
            variant: objective.variant.to_string(),
            generator_transform: objective.generator_transform.to_string(),
            lambda: objective.lambda,
            seed: config.seed,
            total_generator_steps: config.total_generator_steps,
            disc_updates: self.disc_updates,
            gen_updates: self.gen_updates,
            final_metrics: self.log.last().cloned(),
        }
    }
}

fn check_finite(
    loss: f64,
    grads: &[(String, Vec<f64>)],
    step: usize,
    phase: Phase,
) -> Result<(), TrainError> {
    if !loss.is_finite() {
        return Err(TrainError::NonFinite { step, phase, what: format!("loss ({loss})") });
    }
    for (name, g) in grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFinite {
                step,
                phase,
                what: format!("gradient of `{name}`"),
            });
        }
    }
    Ok(())
}

pub(crate) fn collect_grads(
    built: &BuiltObjective,
) -> Result<Vec<(String, Vec<f64>)>, TrainError> {
    built
        .params
        .iter()
        .map(|(name, id)| {
            built
                .graph
                .grad(*id)
                .map(|g| (name.clone(), g.to_vec()))
                .ok_or_else(|| TrainError::MissingGradient(name.clone()))
        })
        .collect()
}

pub(crate) fn global_norm(grads: &[(String, Vec<f64>)]) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

fn draw_training_batch<R: Rng>(
    triple: &ModelTriple,
    data: &PointSet,
    batch_size: usize,
    rng: &mut R,
) -> Result<BatchPair, TrainError> {
    let rows: Vec<Vec<f64>> = (0..batch_size)
        .map(|_| data.points[rng.gen_range(0..data.points.len())].clone())
        .collect();
    Ok(BatchPair::draw(triple, Batch::from_rows(&rows), rng)?)
}

/// Run the alternation: `disc_steps_per_gen_step` discriminator updates, one
/// generator update, `total_generator_steps` times over. Returns the trained
/// models and the metrics log (one row per evaluation point; evaluation fires
/// every `eval_every` generator steps and at the final step). Any non-finite
/// loss, gradient, or metric aborts the run with its step and phase.
pub fn train_run(
    triple: &ModelTriple,
    objective: &ObjectiveSpec,
    data: &PointSet,
    gmm: &GmmDensity,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    objective.validate()?;
    config.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    if data.dim() != triple.dx {
        return Err(TrainError::DataDim { expected: triple.dx, got: data.dim() });
    }
    if gmm.dim() != triple.dx {
        return Err(TrainError::DataDim { expected: triple.dx, got: gmm.dim() });
    }

    let mut triple = triple.clone();
    let mut train_rng = ChaCha8Rng::seed_from_u64(config.seed);
    // Separate stream of the same generator: evaluation draws never shift
    // training randomness, so adding evaluations leaves the run unchanged.
    let mut eval_rng = ChaCha8Rng::seed_from_u64(config.seed);
    eval_rng.set_stream(1);

    let mut disc_state = AdamState::for_config(triple.discriminator.params.iter(), config);
    let mut gen_state = if objective.decoder_only {
        AdamState::for_config(triple.decoder.params.iter(), config)
    } else {
        AdamState::for_config(
            triple.encoder.params.iter().chain(triple.decoder.params.iter()),
            config,
        )
    };

    let mut log = Vec::new();
    for step in 1..=config.total_generator_steps {
        let mut disc_loss = f64::NAN;
        let mut disc_norm = f64::NAN;
        for _ in 0..config.disc_steps_per_gen_step {
            let batch = draw_training_batch(&triple, data, config.batch_size, &mut train_rng)?;
            let mut built = discriminator_objective(objective, &triple, &batch)?;
            built.graph.backward(built.loss)?;
            let grads = collect_grads(&built)?;
            disc_loss = built.loss_value();
            disc_norm = global_norm(&grads);
            check_finite(disc_loss, &grads, step, Phase::Discriminator)?;
            let mut refs: Vec<&mut ParamTensor> =
                triple.discriminator.params.iter_mut().collect();
            adam_step(&mut disc_state, &mut refs, &grads, config.learning_rate)?;
            if objective.variant == Variant::Wgan {
                clip_parameters(triple.discriminator.params.iter_mut(), config.clip_value)?;
            }
        }

        let batch = draw_training_batch(&triple, data, config.batch_size, &mut train_rng)?;
        let mut built = generator_objective(objective, &triple, &batch)?;
        built.graph.backward(built.loss)?;
        let grads = collect_grads(&built)?;
        let gen_loss = built.loss_value();
        let gen_norm = global_norm(&grads);
        check_finite(gen_loss, &grads, step, Phase::Generator)?;
        if objective.decoder_only {
            let mut refs: Vec<&mut ParamTensor> = triple.decoder.params.iter_mut().collect();
            adam_step(&mut gen_state, &mut refs, &grads, config.learning_rate)?;
        } else {
            let mut refs: Vec<&mut ParamTensor> = triple
                .encoder
                .params
                .iter_mut()
                .chain(triple.decoder.params.iter_mut())
                .collect();
            adam_step(&mut gen_state, &mut refs, &grads, config.learning_rate)?;
        }

        if step % config.eval_every == 0 || step == config.total_generator_steps {
            let row = evaluation_row(
                &triple,
                objective,
                gmm,
                config,
                step,
                (disc_loss, disc_norm),
                (gen_loss, gen_norm),
                &mut eval_rng,
            )?;
            log.push(row);
        }
    }

    Ok(TrainOutcome {
        triple,
        log,
        disc_updates: disc_state.step_count,
        gen_updates: gen_state.step_count,
    })
}

/// Train only the discriminator, leaving encoder and decoder untouched, on
/// batches supplied by `draw` (called once per step with the step index).
/// Returns the per-step losses. Used to fit a score function to a fixed pair
/// of distributions, where the generator never moves.
pub fn fit_discriminator<F>(
    triple: &mut ModelTriple,
    objective: &ObjectiveSpec,
    steps: usize,
    config: &TrainConfig,
    mut draw: F,
) -> Result<Vec<f64>, TrainError>
where
    F: FnMut(usize) -> Result<BatchPair, TrainError>,
{
    objective.validate()?;
    config.validate()?;
    let mut state = AdamState::for_config(triple.discriminator.params.iter(), config);
    let mut losses = Vec::with_capacity(steps);
    for step in 1..=steps {
        let batch = draw(step)?;
        let mut built = discriminator_objective(objective, triple, &batch)?;
        built.graph.backward(built.loss)?;
        let grads = collect_grads(&built)?;
        let loss = built.loss_value();
        check_finite(loss, &grads, step, Phase::Discriminator)?;
        let mut refs: Vec<&mut ParamTensor> = triple.discriminator.params.iter_mut().collect();
        adam_step(&mut state, &mut refs, &grads, config.learning_rate)?;
        if objective.variant == Variant::Wgan {
            clip_parameters(triple.discriminator.params.iter_mut(), config.clip_value)?;
        }
        losses.push(loss);
    }
    Ok(losses)
}

#[allow(clippy::too_many_arguments)]
fn evaluation_row(
    triple: &ModelTriple,
    objective: &ObjectiveSpec,
    gmm: &GmmDensity,
    config: &TrainConfig,
    step: usize,
    (disc_loss, disc_norm): (f64, f64),
    (gen_loss, gen_norm): (f64, f64),
    eval_rng: &mut ChaCha8Rng,
) -> Result<TrainLogRow, TrainError> {
    let real: Vec<Vec<f64>> =
        (0..EVAL_SET_SIZE).map(|_| gmm.sample(eval_rng).0).collect();
    let generated = metrics::sample_from_model(triple, EVAL_SET_SIZE, eval_rng);
    let mse = metrics::reconstruction_mse(triple, &real)?;
    let (modes, _) = metrics::mode_coverage(&generated, gmm, 3.0)?;
    let is_analog = metrics::inception_score_analog(&generated, gmm)?;
    let pair = BatchPair::draw(triple, Batch::from_rows(&real), eval_rng)?;
    let skl = symmetric_kl_estimate(objective, triple, &pair)?.value;
    let row = TrainLogRow {
        step,
        variant: objective.run_label(),
        lambda: objective.lambda,
        seed: config.seed,
        disc_loss,
        gen_loss,
        mse,
        mode_coverage: modes,
        is_analog,
        skl_estimate: skl,
        gen_grad_norm: gen_norm,
        disc_grad_norm: disc_norm,
    };
    for (what, value) in [
        ("mse", row.mse),
        ("is_analog", row.is_analog),
        ("skl_estimate", row.skl_estimate),
    ] {
        if !value.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                phase: Phase::Evaluation,
                what: format!("metric `{what}` ({value})"),
            });
        }
    }
    Ok(row)
}

/// Write the metrics log as CSV, atomically, numbers in shortest round-trip
/// decimal form.
pub fn write_log_csv(rows: &[TrainLogRow], path: &Path) -> Result<(), TrainError> {
    let io_err = |source| TrainError::Io { path: path.display().to_string(), source };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = match dir {
        Some(d) => tempfile::NamedTempFile::new_in(d),
        None => tempfile::NamedTempFile::new_in("."),
    }
    .map_err(io_err)?;
    writeln!(tmp, "{LOG_HEADER}").map_err(io_err)?;
    for r in rows {
        writeln!(
            tmp,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.variant,
            r.lambda,
            r.seed,
            r.disc_loss,
            r.gen_loss,
            r.mse,
            r.mode_coverage,
            r.is_analog,
            r.skl_estimate,
            r.gen_grad_norm,
            r.disc_grad_norm
        )
        .map_err(io_err)?;
    }
    tmp.persist(path)
        .map_err(|e| TrainError::Io { path: path.display().to_string(), source: e.error })?;
    Ok(())
}

pub fn read_log_csv(path: &Path) -> Result<Vec<TrainLogRow>, TrainError> {
    let content = std::fs::read_to_string(path)
        .map_err(|source| TrainError::Io { path: path.display().to_string(), source })?;
    let mut lines = content.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == LOG_HEADER => {}
        Some((_, h)) => {
            return Err(TrainError::Parse {
                line: 1,
                message: format!("bad header '{h}', expected '{LOG_HEADER}'"),
            })
        }
        None => {
            return Err(TrainError::Parse { line: 1, message: "empty file".to_string() })
        }
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 12 {
            return Err(TrainError::Parse {
                line: lineno,
                message: format!("expected 12 fields, got {}", fields.len()),
            });
        }
        let num = |i: usize| -> Result<f64, TrainError> {
            fields[i].parse().map_err(|e| TrainError::Parse {
                line: lineno,
                message: format!("bad number '{}': {e}", fields[i]),
            })
        };
        let int = |i: usize| -> Result<usize, TrainError> {
            fields[i].parse().map_err(|e| TrainError::Parse {
                line: lineno,
                message: format!("bad integer '{}': {e}", fields[i]),
            })
        };
        rows.push(TrainLogRow {
            step: int(0)?,
            variant: fields[1].to_string(),
            lambda: num(2)?,
            seed: fields[3].parse().map_err(|e| TrainError::Parse {
                line: lineno,
                message: format!("bad seed '{}': {e}", fields[3]),
            })?,
            disc_loss: num(4)?,
            gen_loss: num(5)?,
            mse: num(6)?,
            mode_coverage: int(7)?,
            is_analog: num(8)?,
            skl_estimate: num(9)?,
            gen_grad_norm: num(10)?,
            disc_grad_norm: num(11)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_toy_gmm, sample_dataset, ToyDatasetSpec};
    use proptest::prelude::*;

    fn one_param(values: Vec<f64>) -> ParamTensor {
        ParamTensor { name: "w".to_string(), shape: vec![values.len()], values }
    }

    fn tiny_setup() -> (ModelTriple, PointSet, GmmDensity) {
        let spec = ToyDatasetSpec { n_samples: 64, ..ToyDatasetSpec::default() };
        let gmm = build_toy_gmm(&spec).unwrap();
        let data = sample_dataset(&gmm, spec.n_samples, 9).unwrap();
        (ModelTriple::default_toy(2, 2, 0), data, gmm)
    }

    fn tiny_config(steps: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            total_generator_steps: steps,
            eval_every: 1000,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged_and_count_a_step() {
        let mut p = one_param(vec![0.3, -1.2, 5.0]);
        let mut state = AdamState::new(std::iter::once(&p), 0.5, 0.999, 1e-8);
        let grads = vec![("w".to_string(), vec![0.0, 0.0, 0.0])];
        let before = p.values.clone();
        adam_step(&mut state, &mut [&mut p], &grads, 0.01).unwrap();
        assert_eq!(p.values, before);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn constant_gradient_step_magnitude_approaches_lr() {
        // With g fixed, m_hat -> g and v_hat -> g^2, so the per-step move
        // tends to lr * sign(g).
        let lr = 0.001;
        let mut p = one_param(vec![0.0, 0.0]);
        let mut state = AdamState::new(std::iter::once(&p), 0.5, 0.999, 1e-8);
        let grads = vec![("w".to_string(), vec![3.5, -0.02])];
        let mut prev = p.values.clone();
        let mut last_delta = vec![0.0; 2];
        for _ in 0..10_000 {
            adam_step(&mut state, &mut [&mut p], &grads, lr).unwrap();
            last_delta = p.values.iter().zip(&prev).map(|(a, b)| a - b).collect();
            prev = p.values.clone();
        }
        assert!((last_delta[0] + lr).abs() < lr * 1e-3, "delta {}", last_delta[0]);
        assert!((last_delta[1] - lr).abs() < lr * 1e-3, "delta {}", last_delta[1]);
        assert_eq!(state.step_count, 10_000);
    }

    #[test]
    fn adam_is_deterministic_and_order_insensitive() {
        let mut pa = one_param(vec![1.0, 2.0]);
        let mut pb = ParamTensor { name: "b".to_string(), shape: vec![1], values: vec![-1.0] };
        let mut state = AdamState::new([&pa, &pb].into_iter(), 0.5, 0.999, 1e-8);
        let mut state2 = state.clone();
        let (mut pa2, mut pb2) = (pa.clone(), pb.clone());

        let forward = vec![
            ("w".to_string(), vec![0.1, -0.2]),
            ("b".to_string(), vec![0.4]),
        ];
        let reversed: Vec<_> = forward.iter().rev().cloned().collect();
        adam_step(&mut state, &mut [&mut pa, &mut pb], &forward, 0.01).unwrap();
        adam_step(&mut state2, &mut [&mut pa2, &mut pb2], &reversed, 0.01).unwrap();
        assert_eq!(pa.values, pa2.values);
        assert_eq!(pb.values, pb2.values);
        assert_eq!(state, state2);
    }

    #[test]
    fn mismatched_gradient_sets_are_rejected() {
        let mut p = one_param(vec![1.0]);
        let mut state = AdamState::new(std::iter::once(&p), 0.5, 0.999, 1e-8);
        let before = p.values.clone();

        let wrong_name = vec![("nope".to_string(), vec![0.1])];
        assert!(matches!(
            adam_step(&mut state, &mut [&mut p], &wrong_name, 0.01),
            Err(TrainError::MissingGradient(_))
        ));
        let wrong_len = vec![("w".to_string(), vec![0.1, 0.2])];
        assert!(matches!(
            adam_step(&mut state, &mut [&mut p], &wrong_len, 0.01),
            Err(TrainError::GradientShape { .. })
        ));
        let extra = vec![
            ("w".to_string(), vec![0.1]),
            ("x".to_string(), vec![0.1]),
        ];
        assert!(matches!(
            adam_step(&mut state, &mut [&mut p], &extra, 0.01),
            Err(TrainError::GradientCount { .. })
        ));
        // A rejected call must not have touched anything.
        assert_eq!(p.values, before);
        assert_eq!(state.step_count, 0);
    }

    #[test]
    fn clip_clamps_and_is_idempotent() {
        let mut p = one_param(vec![0.5, -0.3, 0.005]);
        clip_parameters(std::iter::once(&mut p), 0.01).unwrap();
        assert_eq!(p.values, vec![0.01, -0.01, 0.005]);
        let once = p.values.clone();
        clip_parameters(std::iter::once(&mut p), 0.01).unwrap();
        assert_eq!(p.values, once);

        let mut q = one_param(vec![0.001, -0.002]);
        let before = q.values.clone();
        clip_parameters(std::iter::once(&mut q), 0.01).unwrap();
        assert_eq!(q.values, before);

        assert!(matches!(
            clip_parameters(std::iter::once(&mut p), 0.0),
            Err(TrainError::BadClip(_))
        ));
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
        assert!(matches!(bad.validate(), Err(TrainError::BadLearningRate(_))));
        let bad = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(matches!(bad.validate(), Err(TrainError::BadBatchSize)));
        let bad = TrainConfig { disc_steps_per_gen_step: 0, ..TrainConfig::default() };
        assert!(matches!(bad.validate(), Err(TrainError::BadDiscSteps)));
        let bad = TrainConfig { adam_beta1: 1.0, ..TrainConfig::default() };
        assert!(matches!(bad.validate(), Err(TrainError::BadBeta { which: 1, .. })));
        let bad = TrainConfig { eval_every: 0, ..TrainConfig::default() };
        assert!(matches!(bad.validate(), Err(TrainError::BadEvalEvery)));
        assert_eq!(TrainConfig::default_for(Variant::Wgan).disc_steps_per_gen_step, 5);
        assert_eq!(TrainConfig::default_for(Variant::Svae).disc_steps_per_gen_step, 1);
    }

    #[test]
    fn zero_steps_return_the_triple_unchanged_with_empty_log() {
        let (triple, data, gmm) = tiny_setup();
        let spec = ObjectiveSpec::for_variant(Variant::Svae);
        let out = train_run(&triple, &spec, &data, &gmm, &tiny_config(0)).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(out.disc_updates, 0);
        assert_eq!(out.gen_updates, 0);
        assert_eq!(out.triple.encoder.params, triple.encoder.params);
        assert_eq!(out.triple.decoder.params, triple.decoder.params);
        assert_eq!(out.triple.discriminator.params, triple.discriminator.params);
    }

    #[test]
    fn fixed_seed_runs_are_bit_identical() {
        let (triple, data, gmm) = tiny_setup();
        let spec = ObjectiveSpec::for_variant(Variant::SvaeR);
        let mut config = tiny_config(3);
        config.eval_every = 2;
        let a = train_run(&triple, &spec, &data, &gmm, &config).unwrap();
        let b = train_run(&triple, &spec, &data, &gmm, &config).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.triple.encoder.params, b.triple.encoder.params);
        assert_eq!(a.triple.decoder.params, b.triple.decoder.params);
        assert_eq!(a.triple.discriminator.params, b.triple.discriminator.params);
        // Evaluation cadence: steps 2 and 3 (final step always evaluated).
        let steps: Vec<usize> = a.log.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![2, 3]);
    }

    #[test]
    fn all_phases_update_their_own_networks_only() {
        let (triple, data, gmm) = tiny_setup();
        let spec = ObjectiveSpec::for_variant(Variant::Svae);
        let out = train_run(&triple, &spec, &data, &gmm, &tiny_config(2)).unwrap();
        assert_ne!(out.triple.encoder.params, triple.encoder.params);
        assert_ne!(out.triple.decoder.params, triple.decoder.params);
        assert_ne!(out.triple.discriminator.params, triple.discriminator.params);
        assert_eq!(out.disc_updates, 2);
        assert_eq!(out.gen_updates, 2);

        // Decoder-only objective: the encoder is frozen bitwise.
        let spec = ObjectiveSpec::for_variant(Variant::Gan);
        let out = train_run(&triple, &spec, &data, &gmm, &tiny_config(2)).unwrap();
        assert_eq!(out.triple.encoder.params, triple.encoder.params);
        assert_ne!(out.triple.decoder.params, triple.decoder.params);
        assert_ne!(out.triple.discriminator.params, triple.discriminator.params);
    }

    #[test]
    fn critic_parameters_stay_clipped_and_get_extra_steps() {
        let (triple, data, gmm) = tiny_setup();
        let spec = ObjectiveSpec::for_variant(Variant::Wgan);
        let mut config = tiny_config(2);
        config.disc_steps_per_gen_step = TrainConfig::default_for(Variant::Wgan)
            .disc_steps_per_gen_step;
        let out = train_run(&triple, &spec, &data, &gmm, &config).unwrap();
        for p in &out.triple.discriminator.params {
            for v in &p.values {
                assert!(*v >= -0.01 && *v <= 0.01, "unclipped critic weight {v}");
            }
        }
        assert_eq!(out.disc_updates, 10);
        assert_eq!(out.gen_updates, 2);
    }

    #[test]
    fn evaluation_rows_carry_finite_metrics_and_run_labels() {
        let (triple, data, gmm) = tiny_setup();
        let spec = ObjectiveSpec::for_variant(Variant::SvaeR);
        let mut config = tiny_config(2);
        config.eval_every = 1;
        config.seed = 77;
        let out = train_run(&triple, &spec, &data, &gmm, &config).unwrap();
        assert_eq!(out.log.len(), 2);
        for row in &out.log {
            assert_eq!(row.variant, "svae-r");
            assert_eq!(row.lambda, 0.1);
            assert_eq!(row.seed, 77);
            assert!(row.mse.is_finite() && row.mse >= 0.0);
            assert!(row.mode_coverage <= 5);
            assert!(row.is_analog >= 1.0 - 1e-9 && row.is_analog <= 5.0 + 1e-9);
            assert!(row.skl_estimate.is_finite());
            assert!(row.gen_grad_norm.is_finite() && row.gen_grad_norm >= 0.0);
            assert!(row.disc_grad_norm.is_finite() && row.disc_grad_norm >= 0.0);
        }
    }

    #[test]
    fn poisoned_parameters_abort_with_step_and_phase() {
        let (mut triple, data, gmm) = tiny_setup();
        // NaN in the score bias reaches the loss directly. (A NaN buried in an
        // early weight can slip past relu, whose max() eats NaNs, and only
        // surface in the generator phase; the final bias cannot.)
        triple.discriminator.params.last_mut().unwrap().values[0] = f64::NAN;
        let spec = ObjectiveSpec::for_variant(Variant::Svae);
        match train_run(&triple, &spec, &data, &gmm, &tiny_config(3)) {
            Err(TrainError::NonFinite { step: 1, phase: Phase::Discriminator, .. }) => {}
            other => panic!("expected a first-step discriminator abort, got {other:?}"),
        }

        let (mut triple, data, gmm) = tiny_setup();
        triple.decoder.params[0].values[0] = f64::INFINITY;
        match train_run(&triple, &spec, &data, &gmm, &tiny_config(3)) {
            // The decoder poisons the discriminator phase too (model samples
            // feed it), so the abort must still name step 1.
            Err(TrainError::NonFinite { step: 1, .. }) => {}
            other => panic!("expected a first-step abort, got {other:?}"),
        }
    }

    #[test]
    fn log_csv_round_trips_exactly() {
        let rows = vec![
            TrainLogRow {
                step: 200,
                variant: "svae-r".to_string(),
                lambda: 0.1,
                seed: 3,
                disc_loss: 1.3862943611198906,
                gen_loss: -0.25,
                mse: 0.012345678901234567,
                mode_coverage: 5,
                is_analog: 4.87,
                skl_estimate: 0.4,
                gen_grad_norm: 1.5e-3,
                disc_grad_norm: 2.0,
            },
            TrainLogRow {
                step: 400,
                variant: "wgan".to_string(),
                lambda: 0.0,
                seed: 3,
                disc_loss: -0.1,
                gen_loss: 0.1,
                mse: 3.0,
                mode_coverage: 1,
                is_analog: 1.0,
                skl_estimate: -0.05,
                gen_grad_norm: 0.0,
                disc_grad_norm: 9.99e-12,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_log_csv(&rows, &path).unwrap();
        assert_eq!(read_log_csv(&path).unwrap(), rows);

        let content = std::fs::read_to_string(&path).unwrap();
        assert!(content.starts_with(
            "step,variant,lambda,seed,disc_loss,gen_loss,mse,mode_coverage,is_analog,\
             skl_estimate,gen_grad_norm,disc_grad_norm\n"
        ));
    }

    #[test]
    fn log_csv_rejects_malformed_input() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "nope\n").unwrap();
        assert!(matches!(
            read_log_csv(&path),
            Err(TrainError::Parse { line: 1, .. })
        ));
        let header = "step,variant,lambda,seed,disc_loss,gen_loss,mse,mode_coverage,\
                      is_analog,skl_estimate,gen_grad_norm,disc_grad_norm";
        std::fs::write(&path, format!("{header}\n1,svae,0,0,1,1,1,5,1\n")).unwrap();
        assert!(matches!(
            read_log_csv(&path),
            Err(TrainError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn discriminator_fit_reduces_loss_and_freezes_the_generator() {
        use crate::identities::LinearGaussianSpec;
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let lg = LinearGaussianSpec::random(2, 2, &mut rng);
        let mut triple = ModelTriple::default_toy(2, 2, 0);
        let enc_before = triple.encoder.params.clone();
        let dec_before = triple.decoder.params.clone();
        let spec = ObjectiveSpec::for_variant(Variant::Svae);
        let config = TrainConfig { learning_rate: 1e-3, ..TrainConfig::default() };
        let mut batch_rng = ChaCha8Rng::seed_from_u64(3);
        let losses = fit_discriminator(&mut triple, &spec, 60, &config, |_| {
            Ok(BatchPair::from_linear_gaussian(&lg, 256, &mut batch_rng)?)
        })
        .unwrap();
        assert_eq!(losses.len(), 60);
        // The classifier loss starts at 2 ln 2 for an uninformative score and
        // should have dropped measurably by the end.
        let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = losses[55..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "no progress: head {head}, tail {tail}");
        assert_eq!(triple.encoder.params, enc_before);
        assert_eq!(triple.decoder.params, dec_before);
    }

    #[test]
    fn run_summary_reflects_the_last_evaluation() {
        let (triple, data, gmm) = tiny_setup();
        let spec = ObjectiveSpec::for_variant(Variant::Svae);
        let config = tiny_config(2);
        let out = train_run(&triple, &spec, &data, &gmm, &config).unwrap();
        let summary = out.summary(&spec, &config);
        assert_eq!(summary.variant, "svae");
        assert_eq!(summary.generator_transform, "raw-f");
        assert_eq!(summary.total_generator_steps, 2);
        assert_eq!(summary.final_metrics.as_ref().unwrap().step, 2);
        let json = serde_json::to_string(&summary).unwrap();
        let back: RunSummary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, summary);
    }

    proptest! {
        #[test]
        fn clip_is_idempotent_for_arbitrary_values(
            values in proptest::collection::vec(-1.0f64..1.0, 1..20),
            c in 0.001f64..0.5,
        ) {
            let mut p = one_param(values);
            clip_parameters(std::iter::once(&mut p), c).unwrap();
            let once = p.values.clone();
            prop_assert!(once.iter().all(|v| *v >= -c && *v <= c));
            clip_parameters(std::iter::once(&mut p), c).unwrap();
            prop_assert_eq!(p.values, once);
        }
    }
}
