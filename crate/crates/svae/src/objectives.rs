//! The adversarial objective family over a (encoder, decoder, discriminator)
//! triple.
//!
//! Both training phases maximize something: the discriminator phase maximizes
//! the classification objective g (or the clipped critic difference), the
//! generator phase maximizes the ratio objective l (raw score differences) or
//! its log-sigmoid transform l'. Builders return the graph with the objective
//! and its negation, so optimizers only ever minimize `loss`.
//!
//! Phase separation is structural: in the discriminator graph the batch values
//! enter as constants and only discriminator tensors are leaves; in the
//! generator graph the discriminator enters as constants and the q/p samples
//! are rebuilt from encoder/decoder leaves plus the stored noise, so gradients
//! reach exactly the parameters that phase owns.

use crate::distributions::LN_2PI;
use crate::identities::LinearGaussianSpec;
use crate::models::{reparameterized_node, Batch, ModelError, ModelTriple};
use crate::tensor::{stable_sigmoid, Graph, TensorError, TensorId};
use rand::Rng;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("batch must be nonempty")]
    EmptyBatch,
    #[error("lambda must be nonnegative, got {0}")]
    NegativeLambda(f64),
    #[error("lambda > 0 requires the reconstruction-augmented variant, got {variant} with lambda {lambda}")]
    LambdaOutsideSvaeR { variant: Variant, lambda: f64 },
    #[error("{variant} requires the {required} generator transform")]
    TransformForced { variant: Variant, required: GeneratorTransform },
    #[error("decoder_only must be set exactly for the decoder-only variants, got {got} for {variant}")]
    DecoderOnlyMismatch { variant: Variant, got: bool },
    #[error("batch was built without reparameterization noise; generator gradients need it")]
    MissingNoise,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("unknown variant '{0}', expected one of svae, svae-r, ali, gan, wgan")]
    UnknownVariant(String),
    #[error("unknown generator transform '{0}', expected raw-f or log-sigmoid")]
    UnknownTransform(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Svae,
    SvaeR,
    Ali,
    Gan,
    Wgan,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::Svae, Variant::SvaeR, Variant::Ali, Variant::Gan, Variant::Wgan];
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::Svae => "svae",
            Variant::SvaeR => "svae-r",
            Variant::Ali => "ali",
            Variant::Gan => "gan",
            Variant::Wgan => "wgan",
        };
        write!(f, "{s}")
    }
}

impl FromStr for Variant {
    type Err = ObjectiveError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .chars()
            .filter(|c| *c != '-' && *c != '_')
            .collect::<String>()
            .to_ascii_lowercase();
        match norm.as_str() {
            "svae" => Ok(Variant::Svae),
            "svaer" => Ok(Variant::SvaeR),
            "ali" => Ok(Variant::Ali),
            "gan" => Ok(Variant::Gan),
            "wgan" => Ok(Variant::Wgan),
            _ => Err(ObjectiveError::UnknownVariant(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorTransform {
    RawF,
    LogSigmoid,
}

impl std::fmt::Display for GeneratorTransform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GeneratorTransform::RawF => write!(f, "raw-f"),
            GeneratorTransform::LogSigmoid => write!(f, "log-sigmoid"),
        }
    }
}

impl FromStr for GeneratorTransform {
    type Err = ObjectiveError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .chars()
            .filter(|c| *c != '-' && *c != '_')
            .collect::<String>()
            .to_ascii_lowercase();
        match norm.as_str() {
            "rawf" => Ok(GeneratorTransform::RawF),
            "logsigmoid" | "logsig" => Ok(GeneratorTransform::LogSigmoid),
            _ => Err(ObjectiveError::UnknownTransform(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSpec {
    pub variant: Variant,
    pub lambda: f64,
    pub generator_transform: GeneratorTransform,
    pub decoder_only: bool,
}

impl ObjectiveSpec {
    /// Canonical spec for a variant: raw scores for the symmetric variants,
    /// log-sigmoid for the classifier-style ones, decoder-only for the two
    /// encoder-free reductions. The reconstruction weight defaults to 0.1.
    pub fn for_variant(variant: Variant) -> Self {
        let (lambda, generator_transform, decoder_only) = match variant {
            Variant::Svae => (0.0, GeneratorTransform::RawF, false),
            Variant::SvaeR => (0.1, GeneratorTransform::RawF, false),
            Variant::Ali => (0.0, GeneratorTransform::LogSigmoid, false),
            Variant::Gan => (0.0, GeneratorTransform::LogSigmoid, true),
            Variant::Wgan => (0.0, GeneratorTransform::RawF, true),
        };
        ObjectiveSpec { variant, lambda, generator_transform, decoder_only }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_transform(mut self, transform: GeneratorTransform) -> Self {
        self.generator_transform = transform;
        self
    }

    /// Label for a run arm: the variant name, qualified by the transform when
    /// it differs from the variant's canonical choice ("svae-r-logsig").
    pub fn run_label(&self) -> String {
        let canonical = ObjectiveSpec::for_variant(self.variant).generator_transform;
        if self.generator_transform == canonical {
            return self.variant.to_string();
        }
        let suffix = match self.generator_transform {
            GeneratorTransform::RawF => "raw",
            GeneratorTransform::LogSigmoid => "logsig",
        };
        format!("{}-{suffix}", self.variant)
    }

    /// Inverse of `run_label`, accepting the same spellings as the variant
    /// and transform parsers.
    pub fn parse_run_label(label: &str) -> Result<Self, ObjectiveError> {
        if let Ok(variant) = label.parse::<Variant>() {
            return Ok(ObjectiveSpec::for_variant(variant));
        }
        let lower = label.to_ascii_lowercase();
        for (suffix, transform) in [
            ("logsig", GeneratorTransform::LogSigmoid),
            ("raw", GeneratorTransform::RawF),
        ] {
            if let Some(prefix) = lower
                .strip_suffix(suffix)
                .map(|p| p.trim_end_matches(['-', '_']))
            {
                if let Ok(variant) = prefix.parse::<Variant>() {
                    return Ok(ObjectiveSpec::for_variant(variant).with_transform(transform));
                }
            }
        }
        Err(ObjectiveError::UnknownVariant(label.to_string()))
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if self.lambda < 0.0 {
            return Err(ObjectiveError::NegativeLambda(self.lambda));
        }
        if self.lambda > 0.0 && self.variant != Variant::SvaeR {
            return Err(ObjectiveError::LambdaOutsideSvaeR {
                variant: self.variant,
                lambda: self.lambda,
            });
        }
        let needs_decoder_only = matches!(self.variant, Variant::Gan | Variant::Wgan);
        if self.decoder_only != needs_decoder_only {
            return Err(ObjectiveError::DecoderOnlyMismatch {
                variant: self.variant,
                got: self.decoder_only,
            });
        }
        match self.variant {
            Variant::Ali | Variant::Gan => {
                if self.generator_transform != GeneratorTransform::LogSigmoid {
                    return Err(ObjectiveError::TransformForced {
                        variant: self.variant,
                        required: GeneratorTransform::LogSigmoid,
                    });
                }
            }
            Variant::Wgan => {
                if self.generator_transform != GeneratorTransform::RawF {
                    return Err(ObjectiveError::TransformForced {
                        variant: self.variant,
                        required: GeneratorTransform::RawF,
                    });
                }
            }
            Variant::Svae | Variant::SvaeR => {}
        }
        Ok(())
    }
}

/// Matched samples from the two joints. The q side pairs data x with
/// z = encode(x, eps); the p side pairs prior z with x = decode(z, eps).
/// `draw` materializes z and x through the same graph path the generator
/// objective rebuilds, so stored and in-graph values agree bitwise.
#[derive(Debug, Clone)]
pub struct BatchPair {
    pub data_x: Batch,
    pub q_z: Batch,
    pub prior_z: Batch,
    pub model_x: Batch,
    enc_eps: Option<Batch>,
    dec_eps: Option<Batch>,
}

impl BatchPair {
    pub fn draw<R: Rng>(
        triple: &ModelTriple,
        data_x: Batch,
        rng: &mut R,
    ) -> Result<Self, ObjectiveError> {
        if data_x.rows == 0 {
            return Err(ObjectiveError::EmptyBatch);
        }
        if data_x.cols != triple.dx {
            return Err(ObjectiveError::DimMismatch { expected: triple.dx, got: data_x.cols });
        }
        let n = data_x.rows;
        let enc_eps = Batch::standard_normal(n, triple.dz, rng);
        let prior_z = Batch::standard_normal(n, triple.dz, rng);
        let dec_eps = Batch::standard_normal(n, triple.dx, rng);
        let (q_z, _, _) = triple.encode_batch(&data_x, &enc_eps);
        let (model_x, _, _) = triple.decode_batch(&prior_z, &dec_eps);
        Ok(BatchPair {
            data_x,
            q_z,
            prior_z,
            model_x,
            enc_eps: Some(enc_eps),
            dec_eps: Some(dec_eps),
        })
    }

    /// Wrap already-drawn joint samples. Value-level evaluation only: without
    /// the noise draws the generator objective cannot rebuild its samples and
    /// rejects such a batch.
    pub fn from_samples(
        data_x: Batch,
        q_z: Batch,
        prior_z: Batch,
        model_x: Batch,
    ) -> Result<Self, ObjectiveError> {
        if data_x.rows == 0 {
            return Err(ObjectiveError::EmptyBatch);
        }
        let consistent = data_x.rows == q_z.rows
            && q_z.rows == prior_z.rows
            && prior_z.rows == model_x.rows
            && data_x.cols == model_x.cols
            && q_z.cols == prior_z.cols;
        if !consistent {
            return Err(ObjectiveError::DimMismatch { expected: data_x.rows, got: q_z.rows });
        }
        Ok(BatchPair { data_x, q_z, prior_z, model_x, enc_eps: None, dec_eps: None })
    }

    /// Ancestral pairs from a closed-form linear Gaussian model.
    pub fn from_linear_gaussian<R: Rng>(
        model: &LinearGaussianSpec,
        n: usize,
        rng: &mut R,
    ) -> Result<Self, ObjectiveError> {
        if n == 0 {
            return Err(ObjectiveError::EmptyBatch);
        }
        let mut data_x = Vec::with_capacity(n);
        let mut q_z = Vec::with_capacity(n);
        let mut prior_z = Vec::with_capacity(n);
        let mut model_x = Vec::with_capacity(n);
        for _ in 0..n {
            let (x, z) = model.sample_q(rng);
            data_x.push(x);
            q_z.push(z);
            let (x, z) = model.sample_p(rng);
            model_x.push(x);
            prior_z.push(z);
        }
        BatchPair::from_samples(
            Batch::from_rows(&data_x),
            Batch::from_rows(&q_z),
            Batch::from_rows(&prior_z),
            Batch::from_rows(&model_x),
        )
    }

    pub fn len(&self) -> usize {
        self.data_x.rows
    }

    pub fn is_empty(&self) -> bool {
        self.data_x.rows == 0
    }
}

/// One phase objective assembled in a graph. `objective` is the quantity the
/// phase maximizes; `loss` is its negation, the thing optimizers minimize.
/// `params` lists the phase's trainable leaves in registration order; `parts`
/// carries named component values for logging.
pub struct BuiltObjective {
    pub graph: Graph,
    pub objective: TensorId,
    pub loss: TensorId,
    pub params: Vec<(String, TensorId)>,
    pub parts: Vec<(String, f64)>,
}

impl BuiltObjective {
    pub fn objective_value(&self) -> f64 {
        self.graph.value_scalar(self.objective)
    }

    pub fn loss_value(&self) -> f64 {
        self.graph.value_scalar(self.loss)
    }

    pub fn part(&self, name: &str) -> Option<f64> {
        self.parts.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// Discriminator input z: the actual latent for joint variants, a zero block
/// for the decoder-only ones (their score reads x alone; the zero block keeps
/// the network shape shared across variants).
fn scoring_z(
    g: &mut Graph,
    spec: &ObjectiveSpec,
    z: TensorId,
    rows: usize,
    dz: usize,
) -> TensorId {
    if spec.decoder_only {
        g.constant(vec![0.0; rows * dz], vec![rows, dz])
    } else {
        z
    }
}

/// mean over q of log sigma(-f) plus mean over p of log sigma(f), the
/// classification objective, via softplus for stability.
fn classifier_objective(
    g: &mut Graph,
    f_q: TensorId,
    f_p: TensorId,
) -> Result<TensorId, TensorError> {
    let sp_q = g.softplus(f_q)?;
    let term_q = g.mean_reduce(sp_q)?;
    let neg_p = g.negate(f_p)?;
    let sp_p = g.softplus(neg_p)?;
    let term_p = g.mean_reduce(sp_p)?;
    let total = g.add(term_q, term_p)?;
    g.negate(total)
}

/// Mean over rows of the diagonal Gaussian log-density of `target` under
/// (mean, logvar), all [n, d] tensors in-graph.
fn mean_log_pdf_node(
    g: &mut Graph,
    target: TensorId,
    mean: TensorId,
    logvar: TensorId,
    rows: usize,
) -> Result<TensorId, TensorError> {
    let diff = g.subtract(target, mean)?;
    let sq = g.square(diff)?;
    let neg_lv = g.negate(logvar)?;
    let inv_var = g.exp(neg_lv)?;
    let quad = g.multiply(sq, inv_var)?;
    let c = g.constant_full(LN_2PI, logvar);
    let s = g.add(c, logvar)?;
    let s = g.add(s, quad)?;
    let total = g.sum_reduce(s)?;
    g.scale(total, -0.5 / rows as f64)
}

/// Build the discriminator-phase objective: batch samples enter as constants,
/// discriminator parameters as leaves; maximized.
pub fn discriminator_objective(
    spec: &ObjectiveSpec,
    triple: &ModelTriple,
    batch: &BatchPair,
) -> Result<BuiltObjective, ObjectiveError> {
    spec.validate()?;
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let n = batch.len();
    let mut g = Graph::new();
    let disc_ids = triple.discriminator.register(&mut g);
    let x_q = g.constant(batch.data_x.data.clone(), batch.data_x.shape());
    let z_q_raw = g.constant(batch.q_z.data.clone(), batch.q_z.shape());
    let x_p = g.constant(batch.model_x.data.clone(), batch.model_x.shape());
    let z_p_raw = g.constant(batch.prior_z.data.clone(), batch.prior_z.shape());
    let z_q = scoring_z(&mut g, spec, z_q_raw, n, triple.dz);
    let z_p = scoring_z(&mut g, spec, z_p_raw, n, triple.dz);
    let f_q = triple.discriminator_score(&mut g, &disc_ids, x_q, z_q)?;
    let f_p = triple.discriminator_score(&mut g, &disc_ids, x_p, z_p)?;

    let mean_f_q = g.mean_reduce(f_q)?;
    let mean_f_p = g.mean_reduce(f_p)?;
    let objective = match spec.variant {
        Variant::Wgan => g.subtract(mean_f_p, mean_f_q)?,
        _ => classifier_objective(&mut g, f_q, f_p)?,
    };
    let loss = g.negate(objective)?;
    let parts = vec![
        ("mean_f_q".to_string(), g.value_scalar(mean_f_q)),
        ("mean_f_p".to_string(), g.value_scalar(mean_f_p)),
    ];
    let params = triple
        .discriminator
        .params
        .iter()
        .map(|p| p.name.clone())
        .zip(disc_ids)
        .collect();
    Ok(BuiltObjective { graph: g, objective, loss, params, parts })
}

/// Build the generator-phase objective: discriminator parameters enter as
/// constants, encoder/decoder parameters as leaves (decoder alone for the
/// decoder-only variants), and the joint samples are rebuilt from the batch's
/// stored noise so gradients reach the generator; maximized.
///
/// The raw transform scores E_q f - E_p f; log-sigmoid scores
/// E_q log sigma(f) + E_p log sigma(-f), except for the decoder-only
/// classifier variant where the constant q-side term is dropped and the
/// objective is E_p log sigma(-f) alone. A positive lambda adds the
/// reconstruction terms lambda (E_q log p(x|z) + E_p log p(z|x)).
pub fn generator_objective(
    spec: &ObjectiveSpec,
    triple: &ModelTriple,
    batch: &BatchPair,
) -> Result<BuiltObjective, ObjectiveError> {
    spec.validate()?;
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let (enc_eps, dec_eps) = match (&batch.enc_eps, &batch.dec_eps) {
        (Some(e), Some(d)) => (e, d),
        _ => return Err(ObjectiveError::MissingNoise),
    };
    let n = batch.len();
    let mut g = Graph::new();

    let enc_ids = if spec.decoder_only {
        Vec::new()
    } else {
        triple.encoder.register(&mut g)
    };
    let dec_ids = triple.decoder.register(&mut g);
    let disc_ids = triple.discriminator.register_constant(&mut g);

    let x_data = g.constant(batch.data_x.data.clone(), batch.data_x.shape());
    let z_prior = g.constant(batch.prior_z.data.clone(), batch.prior_z.shape());
    let dec_eps_id = g.constant(dec_eps.data.clone(), dec_eps.shape());

    // p side: x rebuilt from decoder leaves.
    let (dec_mean, dec_lv) = triple.decoder_conditional(&mut g, &dec_ids, z_prior)?;
    let x_model = reparameterized_node(&mut g, dec_mean, dec_lv, dec_eps_id)?;
    let z_p = scoring_z(&mut g, spec, z_prior, n, triple.dz);
    let f_p = triple.discriminator_score(&mut g, &disc_ids, x_model, z_p)?;

    // q side: z rebuilt from encoder leaves, or an all-constant score for the
    // decoder-only variants (no gradient path by construction).
    let (f_q, q_z_node) = if spec.decoder_only {
        let z0 = scoring_z(&mut g, spec, z_prior, n, triple.dz);
        (triple.discriminator_score(&mut g, &disc_ids, x_data, z0)?, None)
    } else {
        let enc_eps_id = g.constant(enc_eps.data.clone(), enc_eps.shape());
        let (enc_mean, enc_lv) = triple.encoder_conditional(&mut g, &enc_ids, x_data)?;
        let z_q = reparameterized_node(&mut g, enc_mean, enc_lv, enc_eps_id)?;
        (triple.discriminator_score(&mut g, &disc_ids, x_data, z_q)?, Some(z_q))
    };

    let mean_f_q = g.mean_reduce(f_q)?;
    let mean_f_p = g.mean_reduce(f_p)?;
    let mut objective = match spec.generator_transform {
        GeneratorTransform::RawF => g.subtract(mean_f_q, mean_f_p)?,
        GeneratorTransform::LogSigmoid => {
            // log sigma(-f) = -softplus(f) on the p side,
            // log sigma(f) = -softplus(-f) on the q side.
            let sp_p = g.softplus(f_p)?;
            let term_p = g.mean_reduce(sp_p)?;
            if spec.decoder_only {
                g.negate(term_p)?
            } else {
                let neg_q = g.negate(f_q)?;
                let sp_q = g.softplus(neg_q)?;
                let term_q = g.mean_reduce(sp_q)?;
                let total = g.add(term_q, term_p)?;
                g.negate(total)?
            }
        }
    };

    let mut parts = vec![
        ("mean_f_q".to_string(), g.value_scalar(mean_f_q)),
        ("mean_f_p".to_string(), g.value_scalar(mean_f_p)),
    ];

    if spec.lambda > 0.0 {
        let z_q = q_z_node.expect("lambda > 0 implies a joint variant with an encoder");
        let (rec_mean, rec_lv) = triple.decoder_conditional(&mut g, &dec_ids, z_q)?;
        let ll_x = mean_log_pdf_node(&mut g, x_data, rec_mean, rec_lv, n)?;
        let (pz_mean, pz_lv) = triple.encoder_conditional(&mut g, &enc_ids, x_model)?;
        let ll_z = mean_log_pdf_node(&mut g, z_prior, pz_mean, pz_lv, n)?;
        let recon = g.add(ll_x, ll_z)?;
        let weighted = g.scale(recon, spec.lambda)?;
        objective = g.add(objective, weighted)?;
        parts.push(("recon_log_lik_x".to_string(), g.value_scalar(ll_x)));
        parts.push(("recon_log_lik_z".to_string(), g.value_scalar(ll_z)));
    }

    let loss = g.negate(objective)?;
    let named = if spec.decoder_only {
        triple.decoder.params.iter().map(|p| p.name.clone()).zip(dec_ids).collect()
    } else {
        triple
            .encoder
            .params
            .iter()
            .chain(triple.decoder.params.iter())
            .map(|p| p.name.clone())
            .zip(enc_ids.into_iter().chain(dec_ids))
            .collect()
    };
    Ok(BuiltObjective { graph: g, objective, loss, params: named, parts })
}

/// Saturating counterpart of the log-sigmoid generator objective: the
/// generator descends the discriminator's own classification objective
/// instead of the label-swapped version, so the score slopes sigma(-f_p) and
/// sigma(f_q) collapse to zero once the discriminator separates the joints.
/// This is the form whose gradients famously stall; built for diagnosis, the
/// trainer never uses it.
pub fn saturating_generator_objective(
    triple: &ModelTriple,
    batch: &BatchPair,
) -> Result<BuiltObjective, ObjectiveError> {
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let (enc_eps, dec_eps) = match (&batch.enc_eps, &batch.dec_eps) {
        (Some(e), Some(d)) => (e, d),
        _ => return Err(ObjectiveError::MissingNoise),
    };
    let mut g = Graph::new();
    let enc_ids = triple.encoder.register(&mut g);
    let dec_ids = triple.decoder.register(&mut g);
    let disc_ids = triple.discriminator.register_constant(&mut g);

    let x_data = g.constant(batch.data_x.data.clone(), batch.data_x.shape());
    let z_prior = g.constant(batch.prior_z.data.clone(), batch.prior_z.shape());
    let dec_eps_id = g.constant(dec_eps.data.clone(), dec_eps.shape());
    let enc_eps_id = g.constant(enc_eps.data.clone(), enc_eps.shape());

    let (dec_mean, dec_lv) = triple.decoder_conditional(&mut g, &dec_ids, z_prior)?;
    let x_model = reparameterized_node(&mut g, dec_mean, dec_lv, dec_eps_id)?;
    let f_p = triple.discriminator_score(&mut g, &disc_ids, x_model, z_prior)?;
    let (enc_mean, enc_lv) = triple.encoder_conditional(&mut g, &enc_ids, x_data)?;
    let z_q = reparameterized_node(&mut g, enc_mean, enc_lv, enc_eps_id)?;
    let f_q = triple.discriminator_score(&mut g, &disc_ids, x_data, z_q)?;

    // Maximized form: E_p softplus(-f) + E_q softplus(f), the negated
    // classifier objective, so backward on `loss` descends it.
    let neg_p = g.negate(f_p)?;
    let sp_p = g.softplus(neg_p)?;
    let term_p = g.mean_reduce(sp_p)?;
    let sp_q = g.softplus(f_q)?;
    let term_q = g.mean_reduce(sp_q)?;
    let objective = g.add(term_q, term_p)?;
    let loss = g.negate(objective)?;

    let mean_f_q = g.mean_reduce(f_q)?;
    let mean_f_p = g.mean_reduce(f_p)?;
    let parts = vec![
        ("mean_f_q".to_string(), g.value_scalar(mean_f_q)),
        ("mean_f_p".to_string(), g.value_scalar(mean_f_p)),
    ];
    let params = triple
        .encoder
        .params
        .iter()
        .chain(triple.decoder.params.iter())
        .map(|p| p.name.clone())
        .zip(enc_ids.into_iter().chain(dec_ids))
        .collect();
    Ok(BuiltObjective { graph: g, objective, loss, params, parts })
}

pub use crate::distributions::{mean_with_error, Estimate};

fn score_rows<F: Fn(&[f64], &[f64]) -> f64>(
    spec: &ObjectiveSpec,
    x: &Batch,
    z: &Batch,
    f: &F,
) -> Vec<f64> {
    let zero = vec![0.0; z.cols];
    (0..x.rows)
        .map(|i| {
            let zi = if spec.decoder_only { &zero[..] } else { z.row(i) };
            f(x.row(i), zi)
        })
        .collect()
}

/// Value of the discriminator objective with an arbitrary score function
/// substituted for the network; used to evaluate at the analytic optimum.
pub fn discriminator_objective_value_with<F: Fn(&[f64], &[f64]) -> f64>(
    spec: &ObjectiveSpec,
    batch: &BatchPair,
    f: F,
) -> Result<Estimate, ObjectiveError> {
    spec.validate()?;
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let f_q = score_rows(spec, &batch.data_x, &batch.q_z, &f);
    let f_p = score_rows(spec, &batch.model_x, &batch.prior_z, &f);
    let per_pair: Vec<f64> = match spec.variant {
        Variant::Wgan => f_q.iter().zip(&f_p).map(|(q, p)| p - q).collect(),
        _ => f_q
            .iter()
            .zip(&f_p)
            .map(|(q, p)| stable_sigmoid(-q).ln() + stable_sigmoid(*p).ln())
            .collect(),
    };
    Ok(mean_with_error(&per_pair))
}

/// Value of the generator objective's score part with an arbitrary f; the
/// reconstruction terms need model densities and are not representable here,
/// so a spec with positive lambda is rejected.
pub fn generator_objective_value_with<F: Fn(&[f64], &[f64]) -> f64>(
    spec: &ObjectiveSpec,
    batch: &BatchPair,
    f: F,
) -> Result<Estimate, ObjectiveError> {
    spec.validate()?;
    if spec.lambda > 0.0 {
        return Err(ObjectiveError::LambdaOutsideSvaeR {
            variant: spec.variant,
            lambda: spec.lambda,
        });
    }
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let f_q = score_rows(spec, &batch.data_x, &batch.q_z, &f);
    let f_p = score_rows(spec, &batch.model_x, &batch.prior_z, &f);
    let per_pair: Vec<f64> = match spec.generator_transform {
        GeneratorTransform::RawF => f_q.iter().zip(&f_p).map(|(q, p)| q - p).collect(),
        GeneratorTransform::LogSigmoid => {
            if spec.decoder_only {
                f_p.iter().map(|p| stable_sigmoid(-p).ln()).collect()
            } else {
                f_q.iter()
                    .zip(&f_p)
                    .map(|(q, p)| stable_sigmoid(*q).ln() + stable_sigmoid(-p).ln())
                    .collect()
            }
        }
    };
    Ok(mean_with_error(&per_pair))
}

/// f* = log p(x,z) - log q(x,z), the optimum of the classification objective,
/// in closed form for a linear Gaussian model.
pub fn analytic_log_ratio(
    model: &LinearGaussianSpec,
    x: &[f64],
    z: &[f64],
) -> Result<f64, ObjectiveError> {
    if x.len() != model.dx {
        return Err(ObjectiveError::DimMismatch { expected: model.dx, got: x.len() });
    }
    if z.len() != model.dz {
        return Err(ObjectiveError::DimMismatch { expected: model.dz, got: z.len() });
    }
    let log_p = model.prior().log_pdf(z) + model.decoder_conditional(z).log_pdf(x);
    let log_q = model.data_marginal().log_pdf(x) + model.encoder_conditional(x).log_pdf(z);
    Ok(log_p - log_q)
}

/// E_p f - E_q f under the current discriminator: at the optimal f this is
/// the symmetric KL between the two joints. Decoder-only variants score with
/// the zero latent block, matching how their discriminator was trained.
pub fn symmetric_kl_estimate(
    spec: &ObjectiveSpec,
    triple: &ModelTriple,
    batch: &BatchPair,
) -> Result<Estimate, ObjectiveError> {
    spec.validate()?;
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let zeros = |rows: usize| Batch::zeros(rows, triple.dz);
    let (zq, zp) = if spec.decoder_only {
        (zeros(batch.data_x.rows), zeros(batch.model_x.rows))
    } else {
        (batch.q_z.clone(), batch.prior_z.clone())
    };
    let f_q = triple.discriminate_batch(&batch.data_x, &zq);
    let f_p = triple.discriminate_batch(&batch.model_x, &zp);
    let per_pair: Vec<f64> =
        f_p.data.iter().zip(&f_q.data).map(|(p, q)| p - q).collect();
    Ok(mean_with_error(&per_pair))
}

/// Same estimator with an arbitrary score function in place of the network.
pub fn symmetric_kl_estimate_with<F: Fn(&[f64], &[f64]) -> f64>(
    batch: &BatchPair,
    f: F,
) -> Result<Estimate, ObjectiveError> {
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let per_pair: Vec<f64> = (0..batch.len())
        .map(|i| {
            f(batch.model_x.row(i), batch.prior_z.row(i))
                - f(batch.data_x.row(i), batch.q_z.row(i))
        })
        .collect();
    Ok(mean_with_error(&per_pair))
}
