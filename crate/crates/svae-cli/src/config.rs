//! Run configuration: sparse JSON patches over per-variant defaults.
//!
//! A config file never has to be complete. Every absent field falls back to
//! the defaults of the chosen variant (so the critic variant starts with five
//! discriminator steps per generator step without being asked), and the empty
//! document `{}` describes the full default toy experiment. Unknown keys are
//! rejected with the offending JSON path: a silently ignored typo in `lambda`
//! or `learning_rate` would invalidate an experiment, which is worse than a
//! hard error.
//!
//! Precedence, lowest to highest: variant defaults, config file, command-line
//! flags. The fully resolved config is echoed into the output directory so
//! any run can be reproduced from its artifacts alone.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use svae::data::{DataError, ToyDatasetSpec};
use svae::models::{
    default_decoder_spec, default_discriminator_spec, default_encoder_spec, MlpSpec, ModelError,
};
use svae::objectives::{ObjectiveError, ObjectiveSpec, Variant};
use svae::training::{TrainConfig, TrainError};
use thiserror::Error;

/// Version tag stamped into every artifact; readers reject other versions
/// instead of misinterpreting them.
pub const FORMAT_VERSION: u32 = 1;

/// Latent dimension used when no encoder spec pins one.
const DEFAULT_DZ: usize = 2;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config error at `{path}`: {message}")]
    Parse { path: String, message: String },
    #[error("config format version {got}, this build reads {expected}")]
    Version { expected: u32, got: u32 },
    #[error("data dimension {data_dim} does not match encoder input {encoder_input}")]
    DataModelMismatch {
        data_dim: usize,
        encoder_input: usize,
    },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectivePatch {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generator_transform: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decoder_only: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPatch {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total_generator_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disc_steps_per_gen_step: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adam_beta1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adam_beta2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adam_epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelPatch {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoder: Option<MlpSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decoder: Option<MlpSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub discriminator: Option<MlpSpec>,
}

/// The on-disk config grammar. Also the echo format: a fully resolved run
/// serializes to a patch with every field present.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigPatch {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format_version: Option<u32>,
    pub objective: ObjectivePatch,
    pub train: TrainPatch,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<ToyDatasetSpec>,
    pub model: ModelPatch,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

/// Command-line overrides; the highest-precedence layer.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub variant: Option<String>,
    pub lambda: Option<f64>,
    pub transform: Option<String>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
}

pub fn apply_overrides(patch: &mut RunConfigPatch, ov: &Overrides) {
    if ov.variant.is_some() {
        patch.objective.variant = ov.variant.clone();
    }
    if ov.lambda.is_some() {
        patch.objective.lambda = ov.lambda;
    }
    if ov.transform.is_some() {
        patch.objective.generator_transform = ov.transform.clone();
    }
    if ov.steps.is_some() {
        patch.train.total_generator_steps = ov.steps;
    }
    if ov.seed.is_some() {
        patch.train.seed = ov.seed;
    }
    if ov.output.is_some() {
        patch.output_dir = ov.output.clone();
    }
}

/// Everything a run needs, after defaulting and validation.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedRun {
    pub objective: ObjectiveSpec,
    pub train: TrainConfig,
    pub data: ToyDatasetSpec,
    pub encoder: MlpSpec,
    pub decoder: MlpSpec,
    pub discriminator: MlpSpec,
    pub output_dir: Option<PathBuf>,
}

impl ResolvedRun {
    /// Echo form: a complete patch that resolves back to this exact run.
    pub fn to_patch(&self, output_dir: &Path) -> RunConfigPatch {
        RunConfigPatch {
            format_version: Some(FORMAT_VERSION),
            objective: ObjectivePatch {
                variant: Some(self.objective.variant.to_string()),
                lambda: Some(self.objective.lambda),
                generator_transform: Some(self.objective.generator_transform.to_string()),
                decoder_only: Some(self.objective.decoder_only),
            },
            train: TrainPatch {
                learning_rate: Some(self.train.learning_rate),
                batch_size: Some(self.train.batch_size),
                total_generator_steps: Some(self.train.total_generator_steps),
                disc_steps_per_gen_step: Some(self.train.disc_steps_per_gen_step),
                adam_beta1: Some(self.train.adam_beta1),
                adam_beta2: Some(self.train.adam_beta2),
                adam_epsilon: Some(self.train.adam_epsilon),
                clip_value: Some(self.train.clip_value),
                seed: Some(self.train.seed),
                eval_every: Some(self.train.eval_every),
            },
            data: Some(self.data.clone()),
            model: ModelPatch {
                encoder: Some(self.encoder.clone()),
                decoder: Some(self.decoder.clone()),
                discriminator: Some(self.discriminator.clone()),
            },
            output_dir: Some(output_dir.to_path_buf()),
        }
    }
}

pub fn parse_patch(text: &str) -> Result<RunConfigPatch, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

pub fn load_patch(path: &Path) -> Result<RunConfigPatch, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_patch(&text)
}

pub fn load_or_default(path: Option<&Path>) -> Result<RunConfigPatch, ConfigError> {
    match path {
        Some(p) => load_patch(p),
        None => Ok(RunConfigPatch::default()),
    }
}

pub fn resolve(patch: &RunConfigPatch) -> Result<ResolvedRun, ConfigError> {
    if let Some(v) = patch.format_version {
        if v != FORMAT_VERSION {
            return Err(ConfigError::Version {
                expected: FORMAT_VERSION,
                got: v,
            });
        }
    }

    // The variant accepts run labels, so a sweep arm name like
    // "svae-logsig" selects both the variant and its transform.
    let mut objective = match patch.objective.variant.as_deref() {
        Some(label) => ObjectiveSpec::parse_run_label(label)?,
        None => ObjectiveSpec::for_variant(Variant::Svae),
    };
    if let Some(l) = patch.objective.lambda {
        objective = objective.with_lambda(l);
    }
    if let Some(t) = patch.objective.generator_transform.as_deref() {
        objective = objective.with_transform(t.parse()?);
    }
    if let Some(d) = patch.objective.decoder_only {
        objective.decoder_only = d;
    }
    objective.validate()?;

    let mut train = TrainConfig::default_for(objective.variant);
    let tp = &patch.train;
    if let Some(v) = tp.learning_rate {
        train.learning_rate = v;
    }
    if let Some(v) = tp.batch_size {
        train.batch_size = v;
    }
    if let Some(v) = tp.total_generator_steps {
        train.total_generator_steps = v;
    }
    if let Some(v) = tp.disc_steps_per_gen_step {
        train.disc_steps_per_gen_step = v;
    }
    if let Some(v) = tp.adam_beta1 {
        train.adam_beta1 = v;
    }
    if let Some(v) = tp.adam_beta2 {
        train.adam_beta2 = v;
    }
    if let Some(v) = tp.adam_epsilon {
        train.adam_epsilon = v;
    }
    if let Some(v) = tp.clip_value {
        train.clip_value = v;
    }
    if let Some(v) = tp.seed {
        train.seed = v;
    }
    if let Some(v) = tp.eval_every {
        train.eval_every = v;
    }
    train.validate()?;

    let data = patch.data.clone().unwrap_or_default();
    data.validate()?;

    let encoder = patch
        .model
        .encoder
        .clone()
        .unwrap_or_else(|| default_encoder_spec(data.dim, DEFAULT_DZ));
    let dz = encoder
        .head_index("mean")
        .map(|i| encoder.output_heads[i].width)
        .unwrap_or(DEFAULT_DZ);
    let decoder = patch
        .model
        .decoder
        .clone()
        .unwrap_or_else(|| default_decoder_spec(dz, data.dim));
    let discriminator = patch
        .model
        .discriminator
        .clone()
        .unwrap_or_else(|| default_discriminator_spec(data.dim, dz));
    encoder.validate()?;
    decoder.validate()?;
    discriminator.validate()?;
    if encoder.input_dim != data.dim {
        return Err(ConfigError::DataModelMismatch {
            data_dim: data.dim,
            encoder_input: encoder.input_dim,
        });
    }

    Ok(ResolvedRun {
        objective,
        train,
        data,
        encoder,
        decoder,
        discriminator,
        output_dir: patch.output_dir.clone(),
    })
}

/// Lambda in directory names and tables: plain shortest-round-trip formatting,
/// so 0.1 reads "0.1" and 0 reads "0".
pub fn format_lambda(lambda: f64) -> String {
    format!("{lambda}")
}

pub fn default_run_dir(objective: &ObjectiveSpec, seed: u64) -> PathBuf {
    PathBuf::from("runs").join(format!(
        "{}-lambda{}-seed{}",
        objective.run_label(),
        format_lambda(objective.lambda),
        seed
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use svae::objectives::GeneratorTransform;

    #[test]
    fn empty_document_resolves_to_the_default_toy_run() {
        let resolved = resolve(&parse_patch("{}").unwrap()).unwrap();
        assert_eq!(resolved.objective.variant, Variant::Svae);
        assert_eq!(resolved.objective.lambda, 0.0);
        assert_eq!(resolved.objective.generator_transform, GeneratorTransform::RawF);
        assert!(!resolved.objective.decoder_only);
        assert_eq!(resolved.train, TrainConfig::default());
        assert_eq!(resolved.data, ToyDatasetSpec::default());
        assert_eq!(resolved.encoder.input_dim, 2);
        assert_eq!(resolved.discriminator.input_dim, 4);
        assert!(resolved.output_dir.is_none());
    }

    #[test]
    fn critic_variant_defaults_to_five_disc_steps_and_decoder_only() {
        let patch = parse_patch(r#"{"objective":{"variant":"WGAN"}}"#).unwrap();
        let resolved = resolve(&patch).unwrap();
        assert_eq!(resolved.objective.variant, Variant::Wgan);
        assert!(resolved.objective.decoder_only);
        assert_eq!(resolved.train.disc_steps_per_gen_step, 5);
        // An explicit patch still wins over the variant default.
        let patch =
            parse_patch(r#"{"objective":{"variant":"WGAN"},"train":{"disc_steps_per_gen_step":2}}"#)
                .unwrap();
        assert_eq!(resolve(&patch).unwrap().train.disc_steps_per_gen_step, 2);
    }

    #[test]
    fn positive_lambda_needs_the_reconstruction_variant() {
        let patch = parse_patch(r#"{"objective":{"variant":"SVAE","lambda":0.5}}"#).unwrap();
        assert!(matches!(resolve(&patch), Err(ConfigError::Objective(_))));
        let patch = parse_patch(r#"{"objective":{"variant":"svae-r","lambda":0.5}}"#).unwrap();
        assert_eq!(resolve(&patch).unwrap().objective.lambda, 0.5);
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_path() {
        let err = parse_patch(r#"{"train":{"learning_rte":0.1}}"#).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("train"), "{text}");
        assert!(text.contains("learning_rte"), "{text}");
        assert!(parse_patch(r#"{"objektive":{}}"#).is_err());
    }

    #[test]
    fn type_errors_name_the_json_path() {
        let err = parse_patch(r#"{"objective":{"lambda":"high"}}"#).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("objective.lambda"), "{text}");
    }

    #[test]
    fn flags_outrank_the_config_file() {
        let mut patch = parse_patch(r#"{"objective":{"variant":"svae-r","lambda":0.05}}"#).unwrap();
        apply_overrides(
            &mut patch,
            &Overrides {
                lambda: Some(0.1),
                seed: Some(7),
                steps: Some(3),
                ..Overrides::default()
            },
        );
        let resolved = resolve(&patch).unwrap();
        assert_eq!(resolved.objective.lambda, 0.1);
        assert_eq!(resolved.train.seed, 7);
        assert_eq!(resolved.train.total_generator_steps, 3);
    }

    #[test]
    fn run_labels_select_variant_and_transform_together() {
        let mut patch = RunConfigPatch::default();
        patch.objective.variant = Some("svae-logsig".into());
        let resolved = resolve(&patch).unwrap();
        assert_eq!(resolved.objective.variant, Variant::Svae);
        assert_eq!(
            resolved.objective.generator_transform,
            GeneratorTransform::LogSigmoid
        );
    }

    #[test]
    fn echo_round_trip_is_idempotent() {
        let patch = parse_patch(
            r#"{"objective":{"variant":"svae-r","lambda":0.01},
                "train":{"batch_size":64,"seed":9},
                "data":{"n_samples":500}}"#,
        )
        .unwrap();
        let resolved = resolve(&patch).unwrap();
        let echo = resolved.to_patch(Path::new("runs/x"));
        let text = serde_json::to_string_pretty(&echo).unwrap();
        let again = resolve(&parse_patch(&text).unwrap()).unwrap();
        assert_eq!(again.objective, resolved.objective);
        assert_eq!(again.train, resolved.train);
        assert_eq!(again.data, resolved.data);
        assert_eq!(again.encoder, resolved.encoder);
        assert_eq!(again.decoder, resolved.decoder);
        assert_eq!(again.discriminator, resolved.discriminator);
        assert_eq!(again.output_dir.as_deref(), Some(Path::new("runs/x")));
    }

    #[test]
    fn foreign_format_versions_are_rejected() {
        let patch = parse_patch(r#"{"format_version":2}"#).unwrap();
        assert!(matches!(resolve(&patch), Err(ConfigError::Version { got: 2, .. })));
        assert!(resolve(&parse_patch(r#"{"format_version":1}"#).unwrap()).is_ok());
    }

    #[test]
    fn default_model_tracks_the_data_dimension() {
        let patch = parse_patch(r#"{"data":{"dim":3}}"#).unwrap();
        let resolved = resolve(&patch).unwrap();
        assert_eq!(resolved.encoder.input_dim, 3);
        assert_eq!(resolved.decoder.output_heads[0].width, 3);
        assert_eq!(resolved.discriminator.input_dim, 5);
    }

    #[test]
    fn explicit_encoder_must_match_the_data_dimension() {
        let mut patch = parse_patch(r#"{"data":{"dim":3}}"#).unwrap();
        patch.model.encoder = Some(svae::models::default_encoder_spec(2, 2));
        assert!(matches!(
            resolve(&patch),
            Err(ConfigError::DataModelMismatch { data_dim: 3, encoder_input: 2 })
        ));
    }

    #[test]
    fn run_directory_names_carry_label_lambda_and_seed() {
        let spec = ObjectiveSpec::for_variant(Variant::SvaeR);
        assert_eq!(
            default_run_dir(&spec, 3),
            PathBuf::from("runs/svae-r-lambda0.1-seed3")
        );
        let spec = spec.with_lambda(0.0);
        assert_eq!(
            default_run_dir(&spec, 0),
            PathBuf::from("runs/svae-r-lambda0-seed0")
        );
    }
}
