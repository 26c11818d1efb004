//! The three networks of the framework: stochastic encoder q(z|x), stochastic
//! decoder p(x|z), and discriminator f(x,z), all plain MLPs over the tape.
//!
//! Encoder and decoder end in two named heads (mean, logvar) so that every
//! conditional is an explicit diagonal Gaussian; the regularized objectives
//! need those densities in closed form. Forward passes always go through a
//! `Graph`, whether or not gradients are wanted, so detached and attached
//! evaluations of the same inputs agree bit for bit.

use crate::distributions::DiagonalGaussian;
use crate::tensor::{numel, Graph, Shape, TensorError, TensorId};
use rand::distributions::Uniform;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LOG_VAR_MIN: f64 = -8.0;
pub const LOG_VAR_MAX: f64 = 4.0;
const LOG_VAR_CENTER: f64 = 0.5 * (LOG_VAR_MIN + LOG_VAR_MAX);
const LOG_VAR_HALF_RANGE: f64 = 0.5 * (LOG_VAR_MAX - LOG_VAR_MIN);

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("mlp spec needs at least one layer")]
    NoLayers,
    #[error("layer widths must be positive")]
    ZeroWidth,
    #[error("head widths sum to {heads}, final layer width is {final_width}")]
    HeadWidthMismatch { heads: usize, final_width: usize },
    #[error("{network}: expected heads {expected:?}, got {got:?}")]
    WrongHeads {
        network: &'static str,
        expected: Vec<String>,
        got: Vec<String>,
    },
    #[error("{network}: input dimension {got}, expected {expected}")]
    WrongInputDim {
        network: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("{network}: {got} parameter tensors, spec expects {expected}")]
    ParamCountMismatch {
        network: String,
        expected: usize,
        got: usize,
    },
    #[error("parameter `{name}`: shape {got:?}, spec expects {expected:?}")]
    ParamShapeMismatch {
        name: String,
        expected: Shape,
        got: Shape,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f64 },
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub name: String,
    pub width: usize,
}

/// Architecture of one MLP. `layer_widths` lists every layer including the
/// final one; the final width must equal the sum of the head widths, and the
/// heads are column slices of the final layer's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub output_heads: Vec<HeadSpec>,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layer_widths.is_empty() {
            return Err(ModelError::NoLayers);
        }
        if self.layer_widths.iter().any(|w| *w == 0) || self.input_dim == 0 {
            return Err(ModelError::ZeroWidth);
        }
        let heads: usize = self.output_heads.iter().map(|h| h.width).sum();
        let final_width = *self.layer_widths.last().unwrap();
        if heads != final_width {
            return Err(ModelError::HeadWidthMismatch { heads, final_width });
        }
        Ok(())
    }

    fn head_offset(&self, index: usize) -> usize {
        self.output_heads[..index].iter().map(|h| h.width).sum()
    }

    pub fn head_index(&self, name: &str) -> Option<usize> {
        self.output_heads.iter().position(|h| h.name == name)
    }
}

/// Two hidden layers of 64 with Gaussian heads; the toy-scale generator shape.
pub fn default_encoder_spec(dx: usize, dz: usize) -> MlpSpec {
    MlpSpec {
        input_dim: dx,
        layer_widths: vec![64, 64, 2 * dz],
        activation: Activation::LeakyRelu { slope: 0.2 },
        output_heads: vec![
            HeadSpec { name: "mean".into(), width: dz },
            HeadSpec { name: "logvar".into(), width: dz },
        ],
    }
}

pub fn default_decoder_spec(dz: usize, dx: usize) -> MlpSpec {
    MlpSpec {
        input_dim: dz,
        layer_widths: vec![64, 64, 2 * dx],
        activation: Activation::LeakyRelu { slope: 0.2 },
        output_heads: vec![
            HeadSpec { name: "mean".into(), width: dx },
            HeadSpec { name: "logvar".into(), width: dx },
        ],
    }
}

pub fn default_discriminator_spec(dx: usize, dz: usize) -> MlpSpec {
    MlpSpec {
        input_dim: dx + dz,
        layer_widths: vec![128, 128, 128, 1],
        activation: Activation::Relu,
        output_heads: vec![HeadSpec { name: "score".into(), width: 1 }],
    }
}

/// One named parameter tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Shape,
    pub values: Vec<f64>,
}

impl ParamTensor {
    pub fn fan_dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [rows, cols] => (*rows, *cols),
            [n] => (1, *n),
            _ => (1, self.values.len()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: Vec<ParamTensor>,
}

/// Xavier-uniform weights (bound sqrt(6/(fan_in+fan_out))), zero biases,
/// reproducible from the seed alone.
pub fn init_xavier(spec: &MlpSpec, prefix: &str, seed: u64) -> Result<Mlp, ModelError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    let mut fan_in = spec.input_dim;
    for (i, &width) in spec.layer_widths.iter().enumerate() {
        let bound = (6.0 / (fan_in + width) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let values: Vec<f64> = (0..fan_in * width).map(|_| rng.sample(dist)).collect();
        params.push(ParamTensor {
            name: format!("{prefix}.w{i}"),
            shape: vec![fan_in, width],
            values,
        });
        params.push(ParamTensor {
            name: format!("{prefix}.b{i}"),
            shape: vec![width],
            values: vec![0.0; width],
        });
        fan_in = width;
    }
    Ok(Mlp { spec: spec.clone(), params })
}

impl Mlp {
    /// Register parameters as trainable leaves, in declaration order.
    pub fn register(&self, g: &mut Graph) -> Vec<TensorId> {
        self.params
            .iter()
            .map(|p| g.leaf(p.values.clone(), p.shape.clone()))
            .collect()
    }

    /// Register parameters as constants (frozen phase): no gradients exist.
    pub fn register_constant(&self, g: &mut Graph) -> Vec<TensorId> {
        self.params
            .iter()
            .map(|p| g.constant(p.values.clone(), p.shape.clone()))
            .collect()
    }

    /// Forward a [n, input_dim] batch; returns one tensor per declared head.
    pub fn forward(
        &self,
        g: &mut Graph,
        ids: &[TensorId],
        x: TensorId,
    ) -> Result<Vec<TensorId>, TensorError> {
        let n_layers = self.spec.layer_widths.len();
        let mut h = x;
        for i in 0..n_layers {
            let hw = g.matmul(h, ids[2 * i])?;
            h = g.broadcast_add(hw, ids[2 * i + 1])?;
            if i + 1 < n_layers {
                h = match self.spec.activation {
                    Activation::Relu => g.relu(h)?,
                    Activation::LeakyRelu { slope } => g.leaky_relu(h, slope)?,
                    Activation::Tanh => g.tanh(h)?,
                };
            }
        }
        let total = *self.spec.layer_widths.last().unwrap();
        if self.spec.output_heads.len() == 1 {
            return Ok(vec![h]);
        }
        // Heads are column slices of the final layer. Slicing is expressed as
        // multiplication by a constant selector matrix so it stays inside the
        // primitive set and remains differentiable.
        let mut heads = Vec::with_capacity(self.spec.output_heads.len());
        for (hi, head) in self.spec.output_heads.iter().enumerate() {
            let offset = self.spec.head_offset(hi);
            let mut sel = vec![0.0; total * head.width];
            for j in 0..head.width {
                sel[(offset + j) * head.width + j] = 1.0;
            }
            let s = g.constant(sel, vec![total, head.width]);
            heads.push(g.matmul(h, s)?);
        }
        Ok(heads)
    }
}

/// Smooth clamp of a raw log-variance to [LOG_VAR_MIN, LOG_VAR_MAX]:
/// center + half * tanh((v - center)/half). Identity-like near the center,
/// derivative positive everywhere (mathematically; tanh saturates to the
/// closed bounds in floating point).
pub fn clamp_log_variance(v: f64) -> f64 {
    LOG_VAR_CENTER + LOG_VAR_HALF_RANGE * ((v - LOG_VAR_CENTER) / LOG_VAR_HALF_RANGE).tanh()
}

pub fn clamp_log_variance_node(g: &mut Graph, v: TensorId) -> Result<TensorId, TensorError> {
    let center = g.constant_full(LOG_VAR_CENTER, v);
    let d = g.subtract(v, center)?;
    let s = g.scale(d, 1.0 / LOG_VAR_HALF_RANGE)?;
    let t = g.tanh(s)?;
    let u = g.scale(t, LOG_VAR_HALF_RANGE)?;
    g.add(u, center)
}

/// mean + exp(logvar/2) * eps, the reparameterized draw, in-graph.
pub fn reparameterized_node(
    g: &mut Graph,
    mean: TensorId,
    logvar: TensorId,
    eps: TensorId,
) -> Result<TensorId, TensorError> {
    let half = g.scale(logvar, 0.5)?;
    let std = g.exp(half)?;
    let noise = g.multiply(std, eps)?;
    g.add(mean, noise)
}

/// Row-major batch of points, the interchange type between data, models and
/// objectives.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Batch {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Batch { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged batch");
            data.extend_from_slice(r);
        }
        Batch { rows: rows.len(), cols, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn standard_normal<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.sample(rand_distr::StandardNormal))
            .collect();
        Batch { rows, cols, data }
    }

    pub fn shape(&self) -> Shape {
        vec![self.rows, self.cols]
    }
}

#[derive(Debug, Clone)]
pub struct ModelTriple {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub discriminator: Mlp,
    pub dx: usize,
    pub dz: usize,
}

/// Check that three specs compose into a model triple: encoder dx -> (dz, dz),
/// decoder dz -> (dx, dx), discriminator dx+dz -> 1. Returns (dx, dz).
fn compose_dims(
    encoder: &MlpSpec,
    decoder: &MlpSpec,
    discriminator: &MlpSpec,
) -> Result<(usize, usize), ModelError> {
    let dx = encoder.input_dim;
    let dz = head_width(encoder, "mean").ok_or_else(|| ModelError::WrongHeads {
        network: "encoder",
        expected: vec!["mean".into(), "logvar".into()],
        got: head_names(encoder),
    })?;
    check_gaussian_heads("encoder", encoder, dz)?;
    check_gaussian_heads("decoder", decoder, dx)?;
    if decoder.input_dim != dz {
        return Err(ModelError::WrongInputDim {
            network: "decoder",
            got: decoder.input_dim,
            expected: dz,
        });
    }
    if discriminator.input_dim != dx + dz {
        return Err(ModelError::WrongInputDim {
            network: "discriminator",
            got: discriminator.input_dim,
            expected: dx + dz,
        });
    }
    if head_width(discriminator, "score") != Some(1) {
        return Err(ModelError::WrongHeads {
            network: "discriminator",
            expected: vec!["score".into()],
            got: head_names(discriminator),
        });
    }
    Ok((dx, dz))
}

/// Check a network's parameter list against its spec: alternating weight and
/// bias tensors, shaped layer by layer.
fn check_params_match_spec(network: &str, mlp: &Mlp) -> Result<(), ModelError> {
    let expected_count = 2 * mlp.spec.layer_widths.len();
    if mlp.params.len() != expected_count {
        return Err(ModelError::ParamCountMismatch {
            network: network.to_string(),
            expected: expected_count,
            got: mlp.params.len(),
        });
    }
    let mut fan_in = mlp.spec.input_dim;
    for (i, &width) in mlp.spec.layer_widths.iter().enumerate() {
        for (p, expected) in [
            (&mlp.params[2 * i], vec![fan_in, width]),
            (&mlp.params[2 * i + 1], vec![width]),
        ] {
            if p.shape != expected || p.values.len() != numel(&expected) {
                return Err(ModelError::ParamShapeMismatch {
                    name: p.name.clone(),
                    expected,
                    got: p.shape.clone(),
                });
            }
        }
        fan_in = width;
    }
    Ok(())
}

impl ModelTriple {
    /// Xavier-initialize all three networks after checking that their shapes
    /// compose.
    pub fn init(
        encoder: &MlpSpec,
        decoder: &MlpSpec,
        discriminator: &MlpSpec,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let (dx, dz) = compose_dims(encoder, decoder, discriminator)?;
        Ok(ModelTriple {
            encoder: init_xavier(encoder, "enc", seed)?,
            decoder: init_xavier(decoder, "dec", seed.wrapping_add(1))?,
            discriminator: init_xavier(discriminator, "disc", seed.wrapping_add(2))?,
            dx,
            dz,
        })
    }

    /// Assemble a triple from already-built networks (checkpoint loading),
    /// re-running the compose checks and verifying every parameter tensor
    /// against its spec.
    pub fn from_parts(encoder: Mlp, decoder: Mlp, discriminator: Mlp) -> Result<Self, ModelError> {
        let (dx, dz) = compose_dims(&encoder.spec, &decoder.spec, &discriminator.spec)?;
        check_params_match_spec("encoder", &encoder)?;
        check_params_match_spec("decoder", &decoder)?;
        check_params_match_spec("discriminator", &discriminator)?;
        Ok(ModelTriple { encoder, decoder, discriminator, dx, dz })
    }

    pub fn default_toy(dx: usize, dz: usize, seed: u64) -> Self {
        ModelTriple::init(
            &default_encoder_spec(dx, dz),
            &default_decoder_spec(dz, dx),
            &default_discriminator_spec(dx, dz),
            seed,
        )
        .expect("default specs compose")
    }

    /// Encoder conditional for a batch already in the graph: returns the mean
    /// head and the clamped log-variance head.
    pub fn encoder_conditional(
        &self,
        g: &mut Graph,
        enc_ids: &[TensorId],
        x: TensorId,
    ) -> Result<(TensorId, TensorId), TensorError> {
        let heads = self.encoder.forward(g, enc_ids, x)?;
        let mi = self.encoder.spec.head_index("mean").unwrap();
        let li = self.encoder.spec.head_index("logvar").unwrap();
        let lv = clamp_log_variance_node(g, heads[li])?;
        Ok((heads[mi], lv))
    }

    pub fn decoder_conditional(
        &self,
        g: &mut Graph,
        dec_ids: &[TensorId],
        z: TensorId,
    ) -> Result<(TensorId, TensorId), TensorError> {
        let heads = self.decoder.forward(g, dec_ids, z)?;
        let mi = self.decoder.spec.head_index("mean").unwrap();
        let li = self.decoder.spec.head_index("logvar").unwrap();
        let lv = clamp_log_variance_node(g, heads[li])?;
        Ok((heads[mi], lv))
    }

    /// Discriminator score f(x, z) for batches already in the graph: [n, 1].
    pub fn discriminator_score(
        &self,
        g: &mut Graph,
        disc_ids: &[TensorId],
        x: TensorId,
        z: TensorId,
    ) -> Result<TensorId, TensorError> {
        let joint = g.concat(x, z)?;
        let heads = self.discriminator.forward(g, disc_ids, joint)?;
        Ok(heads[0])
    }

    /// Batch encode with explicit noise: z = mean + std * eps.
    /// Returns (z, mean, clamped logvar) as value batches.
    pub fn encode_batch(&self, x: &Batch, eps: &Batch) -> (Batch, Batch, Batch) {
        assert_eq!(x.cols, self.dx, "encode: x dimension mismatch");
        assert_eq!(eps.cols, self.dz, "encode: eps dimension mismatch");
        assert_eq!(x.rows, eps.rows, "encode: row count mismatch");
        let mut g = Graph::new();
        let ids = self.encoder.register_constant(&mut g);
        let xid = g.constant(x.data.clone(), x.shape());
        let (mean, lv) = self
            .encoder_conditional(&mut g, &ids, xid)
            .expect("encoder forward");
        let eid = g.constant(eps.data.clone(), eps.shape());
        let z = reparameterized_node(&mut g, mean, lv, eid).expect("reparameterize");
        (
            Batch { rows: x.rows, cols: self.dz, data: g.value(z).to_vec() },
            Batch { rows: x.rows, cols: self.dz, data: g.value(mean).to_vec() },
            Batch { rows: x.rows, cols: self.dz, data: g.value(lv).to_vec() },
        )
    }

    pub fn decode_batch(&self, z: &Batch, eps: &Batch) -> (Batch, Batch, Batch) {
        assert_eq!(z.cols, self.dz, "decode: z dimension mismatch");
        assert_eq!(eps.cols, self.dx, "decode: eps dimension mismatch");
        assert_eq!(z.rows, eps.rows, "decode: row count mismatch");
        let mut g = Graph::new();
        let ids = self.decoder.register_constant(&mut g);
        let zid = g.constant(z.data.clone(), z.shape());
        let (mean, lv) = self
            .decoder_conditional(&mut g, &ids, zid)
            .expect("decoder forward");
        let eid = g.constant(eps.data.clone(), eps.shape());
        let x = reparameterized_node(&mut g, mean, lv, eid).expect("reparameterize");
        (
            Batch { rows: z.rows, cols: self.dx, data: g.value(x).to_vec() },
            Batch { rows: z.rows, cols: self.dx, data: g.value(mean).to_vec() },
            Batch { rows: z.rows, cols: self.dx, data: g.value(lv).to_vec() },
        )
    }

    /// Single-point encode; returns the draw and its explicit conditional.
    pub fn encode(&self, x: &[f64], eps: &[f64]) -> (Vec<f64>, DiagonalGaussian) {
        let (z, mean, lv) = self.encode_batch(
            &Batch::from_rows(&[x.to_vec()]),
            &Batch::from_rows(&[eps.to_vec()]),
        );
        (
            z.row(0).to_vec(),
            DiagonalGaussian::new(mean.row(0).to_vec(), lv.row(0).to_vec()),
        )
    }

    pub fn decode(&self, z: &[f64], eps: &[f64]) -> (Vec<f64>, DiagonalGaussian) {
        let (x, mean, lv) = self.decode_batch(
            &Batch::from_rows(&[z.to_vec()]),
            &Batch::from_rows(&[eps.to_vec()]),
        );
        (
            x.row(0).to_vec(),
            DiagonalGaussian::new(mean.row(0).to_vec(), lv.row(0).to_vec()),
        )
    }

    /// Raw pre-sigmoid discriminator score for one (x, z) pair.
    pub fn discriminate(&self, x: &[f64], z: &[f64]) -> f64 {
        let b = self.discriminate_batch(
            &Batch::from_rows(&[x.to_vec()]),
            &Batch::from_rows(&[z.to_vec()]),
        );
        b.data[0]
    }

    pub fn discriminate_batch(&self, x: &Batch, z: &Batch) -> Batch {
        assert_eq!(x.cols, self.dx, "discriminate: x dimension mismatch");
        assert_eq!(z.cols, self.dz, "discriminate: z dimension mismatch");
        assert_eq!(x.rows, z.rows, "discriminate: row count mismatch");
        let mut g = Graph::new();
        let ids = self.discriminator.register_constant(&mut g);
        let xid = g.constant(x.data.clone(), x.shape());
        let zid = g.constant(z.data.clone(), z.shape());
        let f = self
            .discriminator_score(&mut g, &ids, xid, zid)
            .expect("discriminator forward");
        Batch { rows: x.rows, cols: 1, data: g.value(f).to_vec() }
    }

    /// Generator-side parameters (theta on the decoder, phi on the encoder).
    pub fn generator_params(&self) -> impl Iterator<Item = &ParamTensor> {
        self.encoder.params.iter().chain(self.decoder.params.iter())
    }
}

fn head_width(spec: &MlpSpec, name: &str) -> Option<usize> {
    spec.output_heads
        .iter()
        .find(|h| h.name == name)
        .map(|h| h.width)
}

fn head_names(spec: &MlpSpec) -> Vec<String> {
    spec.output_heads.iter().map(|h| h.name.clone()).collect()
}

fn check_gaussian_heads(
    network: &'static str,
    spec: &MlpSpec,
    dim: usize,
) -> Result<(), ModelError> {
    spec.validate()?;
    let ok = spec.output_heads.len() == 2
        && head_width(spec, "mean") == Some(dim)
        && head_width(spec, "logvar") == Some(dim);
    if ok {
        Ok(())
    } else {
        Err(ModelError::WrongHeads {
            network,
            expected: vec!["mean".into(), "logvar".into()],
            got: head_names(spec),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xavier_same_seed_is_identical() {
        let spec = default_encoder_spec(2, 2);
        let a = init_xavier(&spec, "enc", 42).unwrap();
        let b = init_xavier(&spec, "enc", 42).unwrap();
        assert_eq!(a.params, b.params);
        let c = init_xavier(&spec, "enc", 43).unwrap();
        assert_ne!(a.params[0].values, c.params[0].values);
    }

    #[test]
    fn xavier_biases_are_exactly_zero() {
        let mlp = init_xavier(&default_discriminator_spec(2, 2), "disc", 1).unwrap();
        for p in mlp.params.iter().filter(|p| p.name.contains(".b")) {
            assert!(p.values.iter().all(|v| *v == 0.0), "{} not zero", p.name);
        }
    }

    #[test]
    fn xavier_variance_matches_uniform_law() {
        // Var U(-a, a) = a^2/3 = 2/(fan_in+fan_out) for the Xavier bound
        let spec = MlpSpec {
            input_dim: 256,
            layer_widths: vec![256],
            activation: Activation::Relu,
            output_heads: vec![HeadSpec { name: "h".into(), width: 256 }],
        };
        let mlp = init_xavier(&spec, "t", 5).unwrap();
        let w = &mlp.params[0].values;
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w.len() as f64;
        let expected = 2.0 / 512.0;
        assert!(
            (var - expected).abs() < 0.1 * expected,
            "var {var}, expected {expected}"
        );
    }

    #[test]
    fn encode_with_zero_noise_returns_the_mean() {
        let triple = ModelTriple::default_toy(2, 2, 9);
        let (z, density) = triple.encode(&[0.4, -1.0], &[0.0, 0.0]);
        assert_eq!(z, density.mean);
    }

    #[test]
    fn encode_is_deterministic() {
        let triple = ModelTriple::default_toy(2, 2, 9);
        let a = triple.encode(&[0.4, -1.0], &[0.3, -0.2]);
        let b = triple.encode(&[0.4, -1.0], &[0.3, -0.2]);
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn encode_density_peaks_at_its_mean() {
        let triple = ModelTriple::default_toy(2, 2, 9);
        let (_, density) = triple.encode(&[0.4, -1.0], &[0.0, 0.0]);
        let at_mean = density.log_pdf(&density.mean);
        for delta in [[0.2, 0.0], [0.0, -0.4], [1.0, 1.0]] {
            let perturbed: Vec<f64> = density
                .mean
                .iter()
                .zip(delta)
                .map(|(m, d)| m + d)
                .collect();
            assert!(density.log_pdf(&perturbed) < at_mean);
        }
    }

    #[test]
    fn decode_log_variance_respects_clamp_for_wild_inputs() {
        let triple = ModelTriple::default_toy(2, 2, 17);
        for z in [[0.0, 0.0], [50.0, -50.0], [1e3, 1e3], [-1e3, 0.5]] {
            let (_, density) = triple.decode(&z, &[0.0, 0.0]);
            for lv in &density.log_variance {
                assert!(*lv >= LOG_VAR_MIN && *lv <= LOG_VAR_MAX, "logvar {lv}");
            }
        }
    }

    #[test]
    fn clamp_is_identity_like_at_center_and_monotone() {
        assert_eq!(clamp_log_variance(LOG_VAR_CENTER), LOG_VAR_CENTER);
        let mut prev = f64::NEG_INFINITY;
        for i in 0..100 {
            let v = -20.0 + i as f64 * 0.4;
            let c = clamp_log_variance(v);
            assert!(c >= prev, "clamp must be monotone");
            assert!(c >= LOG_VAR_MIN && c <= LOG_VAR_MAX);
            prev = c;
        }
    }

    #[test]
    fn zeroed_final_layer_scores_zero_everywhere() {
        let mut triple = ModelTriple::default_toy(2, 2, 3);
        let n = triple.discriminator.params.len();
        for p in &mut triple.discriminator.params[n - 2..] {
            p.values.iter_mut().for_each(|v| *v = 0.0);
        }
        for (x, z) in [([0.0, 0.0], [0.0, 0.0]), ([3.0, -1.0], [0.5, 2.0])] {
            assert_eq!(triple.discriminate(&x, &z), 0.0);
        }
    }

    #[test]
    fn head_slices_match_manual_columns() {
        // one linear layer, two heads of width 1; output = x W + b
        let spec = MlpSpec {
            input_dim: 2,
            layer_widths: vec![2],
            activation: Activation::Relu,
            output_heads: vec![
                HeadSpec { name: "mean".into(), width: 1 },
                HeadSpec { name: "logvar".into(), width: 1 },
            ],
        };
        let mut mlp = init_xavier(&spec, "m", 0).unwrap();
        mlp.params[0].values = vec![1.0, 2.0, 3.0, 4.0]; // W rows: [1,2],[3,4]
        mlp.params[1].values = vec![10.0, 20.0];
        let mut g = Graph::new();
        let ids = mlp.register_constant(&mut g);
        let x = g.constant(vec![1.0, 1.0], vec![1, 2]);
        let heads = mlp.forward(&mut g, &ids, x).unwrap();
        assert_eq!(g.value(heads[0]), &[14.0]); // 1+3+10
        assert_eq!(g.value(heads[1]), &[26.0]); // 2+4+20
    }

    #[test]
    fn batch_and_single_paths_agree_bitwise() {
        let triple = ModelTriple::default_toy(2, 2, 21);
        let xs = vec![vec![0.1, 0.2], vec![-1.0, 0.7], vec![2.0, -2.0]];
        let eps = vec![vec![0.5, -0.5], vec![0.0, 1.0], vec![-1.5, 0.25]];
        let (zb, _, _) = triple.encode_batch(&Batch::from_rows(&xs), &Batch::from_rows(&eps));
        for i in 0..3 {
            let (zi, _) = triple.encode(&xs[i], &eps[i]);
            assert_eq!(zb.row(i), zi.as_slice());
        }
    }

    #[test]
    fn spec_with_mismatched_heads_is_rejected() {
        let spec = MlpSpec {
            input_dim: 2,
            layer_widths: vec![8, 3],
            activation: Activation::Tanh,
            output_heads: vec![
                HeadSpec { name: "mean".into(), width: 2 },
                HeadSpec { name: "logvar".into(), width: 2 },
            ],
        };
        assert!(matches!(
            spec.validate(),
            Err(ModelError::HeadWidthMismatch { heads: 4, final_width: 3 })
        ));
    }

    #[test]
    fn triple_with_wrong_discriminator_input_is_rejected() {
        let err = ModelTriple::init(
            &default_encoder_spec(2, 2),
            &default_decoder_spec(2, 2),
            &default_discriminator_spec(3, 2),
            0,
        );
        assert!(matches!(err, Err(ModelError::WrongInputDim { network: "discriminator", .. })));
    }
}
