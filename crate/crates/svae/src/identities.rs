//! Verification workbench for the KL decomposition identities on linear
//! Gaussian models.
//!
//! A `LinearGaussianSpec` fixes every factor in closed form: data marginal
//! q(x), prior p(z) = N(0, I), decoder conditional p(x|z) = N(Az + b, s^2 I)
//! and encoder conditional q(z|x) = N(Cx + d, t^2 I). Both joints over (x, z)
//! are then Gaussians that can be assembled exactly, which gives the left
//! sides of the identities an independent closed-form oracle while the right
//! sides are evaluated term by term (conditional KLs in closed form at
//! sampled conditioning points, marginal KLs fully closed form).
//!
//! Joint vectors are ordered (x, z) throughout.

use crate::distributions::{DiagonalGaussian, LN_2PI};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IdentityError {
    #[error("degenerate model: {0}")]
    Degenerate(String),
    #[error("need at least {min} samples, got {got}")]
    TooFewSamples { got: usize, min: usize },
    #[error("point sets must be nonempty")]
    EmptyPointSet,
    #[error("coverage radius must be positive, got {0}")]
    BadRadius(f64),
    #[error("point dimension mismatch: {a} vs {b}")]
    CoverageDimMismatch { a: usize, b: usize },
}

/// Fully specified linear Gaussian encoder/decoder pair plus Gaussian data
/// marginal. Matrices are row-major.
#[derive(Debug, Clone)]
pub struct LinearGaussianSpec {
    pub dx: usize,
    pub dz: usize,
    /// A: dx x dz decoder map, x | z ~ N(Az + b, decoder_noise^2 I)
    pub decoder_map: Vec<f64>,
    pub decoder_shift: Vec<f64>,
    pub decoder_noise: f64,
    /// C: dz x dx encoder map, z | x ~ N(Cx + d, encoder_noise^2 I)
    pub encoder_map: Vec<f64>,
    pub encoder_shift: Vec<f64>,
    pub encoder_noise: f64,
    /// Data marginal q(x) = N(data_mean, diag(data_variances))
    pub data_mean: Vec<f64>,
    pub data_variances: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Identity {
    JointKlXChain,
    JointKlZChain,
    SymmetricKlZChain,
    SymmetricKlXChain,
}

impl std::fmt::Display for Identity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Identity::JointKlXChain => write!(f, "joint-kl-x-chain"),
            Identity::JointKlZChain => write!(f, "joint-kl-z-chain"),
            Identity::SymmetricKlZChain => write!(f, "symmetric-kl-z-chain"),
            Identity::SymmetricKlXChain => write!(f, "symmetric-kl-x-chain"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecompositionReport {
    pub identity: Identity,
    pub lhs: f64,
    pub rhs_terms: Vec<(String, f64)>,
    pub rhs_sum: f64,
    pub standard_error: f64,
}

impl DecompositionReport {
    pub fn gap(&self) -> f64 {
        (self.lhs - self.rhs_sum).abs()
    }

    pub fn within(&self, sigmas: f64) -> bool {
        self.gap() <= sigmas * self.standard_error
    }
}

/// Dense-covariance Gaussian; the oracle-side representation.
#[derive(Debug, Clone)]
pub struct FullGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl FullGaussian {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn from_diagonal(g: &DiagonalGaussian) -> Self {
        let mean = DVector::from_row_slice(&g.mean);
        let cov = DMatrix::from_diagonal(&DVector::from_iterator(
            g.dim(),
            g.log_variance.iter().map(|lv| lv.exp()),
        ));
        FullGaussian { mean, cov }
    }

    fn chol(&self) -> Result<Cholesky<f64, Dyn>, IdentityError> {
        Cholesky::new(self.cov.clone())
            .ok_or_else(|| IdentityError::Degenerate("covariance not positive definite".into()))
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let chol = self.chol().expect("covariance must be positive definite");
        let d = DVector::from_row_slice(x) - &self.mean;
        let solved = chol.solve(&d);
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        -0.5 * (self.dim() as f64 * LN_2PI + logdet + d.dot(&solved))
    }

    pub fn marginal_first(&self, k: usize) -> FullGaussian {
        FullGaussian {
            mean: self.mean.rows(0, k).into_owned(),
            cov: self.cov.view((0, 0), (k, k)).into_owned(),
        }
    }

    pub fn marginal_last(&self, k: usize) -> FullGaussian {
        let n = self.dim();
        FullGaussian {
            mean: self.mean.rows(n - k, k).into_owned(),
            cov: self.cov.view((n - k, n - k), (k, k)).into_owned(),
        }
    }
}

/// KL(a || b) between dense Gaussians:
/// 1/2 [ tr(Sb^-1 Sa) + (mb - ma)^T Sb^-1 (mb - ma) - k + ln det Sb - ln det Sa ].
pub fn full_kl(a: &FullGaussian, b: &FullGaussian) -> Result<f64, IdentityError> {
    let k = a.dim() as f64;
    let chol_a = a.chol()?;
    let chol_b = b.chol()?;
    let logdet_a: f64 = 2.0 * chol_a.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let logdet_b: f64 = 2.0 * chol_b.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let trace = chol_b.solve(&a.cov).trace();
    let d = &b.mean - &a.mean;
    let quad = d.dot(&chol_b.solve(&d));
    Ok(0.5 * (trace + quad - k + logdet_b - logdet_a))
}

pub fn full_symmetric_kl(a: &FullGaussian, b: &FullGaussian) -> Result<f64, IdentityError> {
    Ok(full_kl(a, b)? + full_kl(b, a)?)
}

/// Conditional of one block of a joint Gaussian given the other. The
/// covariance (a Schur complement) does not depend on the observed value, so
/// it is computed once; only the mean varies per sample.
struct ConditionalMap {
    reg: DMatrix<f64>,
    base: DVector<f64>,
    cov: DMatrix<f64>,
}

impl ConditionalMap {
    /// Conditional of dims k..n given dims 0..k.
    fn last_given_first(joint: &FullGaussian, k: usize) -> Result<Self, IdentityError> {
        let n = joint.dim();
        let s11 = joint.cov.view((0, 0), (k, k)).into_owned();
        let s12 = joint.cov.view((0, k), (k, n - k)).into_owned();
        let s21 = joint.cov.view((k, 0), (n - k, k)).into_owned();
        let s22 = joint.cov.view((k, k), (n - k, n - k)).into_owned();
        let chol = Cholesky::new(s11)
            .ok_or_else(|| IdentityError::Degenerate("conditioning block not PD".into()))?;
        let solved = chol.solve(&s12); // S11^-1 S12
        let reg = solved.transpose(); // S21 S11^-1
        let cov = &s22 - &s21 * &solved;
        let mu1 = joint.mean.rows(0, k).into_owned();
        let mu2 = joint.mean.rows(k, n - k).into_owned();
        let base = &mu2 - &reg * &mu1;
        Ok(ConditionalMap { reg, base, cov })
    }

    /// Conditional of dims 0..k given dims k..n.
    fn first_given_last(joint: &FullGaussian, k: usize) -> Result<Self, IdentityError> {
        let n = joint.dim();
        let s11 = joint.cov.view((0, 0), (k, k)).into_owned();
        let s12 = joint.cov.view((0, k), (k, n - k)).into_owned();
        let s22 = joint.cov.view((k, k), (n - k, n - k)).into_owned();
        let chol = Cholesky::new(s22)
            .ok_or_else(|| IdentityError::Degenerate("conditioning block not PD".into()))?;
        let solved = chol.solve(&s12.transpose()); // S22^-1 S21
        let reg = solved.transpose(); // S12 S22^-1
        let cov = &s11 - &reg * &s12.transpose();
        let mu1 = joint.mean.rows(0, k).into_owned();
        let mu2 = joint.mean.rows(k, n - k).into_owned();
        let base = &mu1 - &reg * &mu2;
        Ok(ConditionalMap { reg, base, cov })
    }

    fn mean(&self, obs: &DVector<f64>) -> DVector<f64> {
        &self.base + &self.reg * obs
    }
}

/// KL(a || b) where both covariances are fixed across evaluations and only
/// the means change; the constant part is folded once.
struct VaryingMeanKl {
    fixed: f64,
    chol_b: Cholesky<f64, Dyn>,
}

impl VaryingMeanKl {
    fn new(cov_a: &DMatrix<f64>, cov_b: &DMatrix<f64>) -> Result<Self, IdentityError> {
        let k = cov_a.nrows() as f64;
        let chol_a = Cholesky::new(cov_a.clone())
            .ok_or_else(|| IdentityError::Degenerate("cov_a not PD".into()))?;
        let chol_b = Cholesky::new(cov_b.clone())
            .ok_or_else(|| IdentityError::Degenerate("cov_b not PD".into()))?;
        let logdet_a: f64 = 2.0 * chol_a.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let logdet_b: f64 = 2.0 * chol_b.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let trace = chol_b.solve(cov_a).trace();
        Ok(VaryingMeanKl {
            fixed: 0.5 * (trace - k + logdet_b - logdet_a),
            chol_b,
        })
    }

    fn eval(&self, mean_a: &DVector<f64>, mean_b: &DVector<f64>) -> f64 {
        let d = mean_b - mean_a;
        self.fixed + 0.5 * d.dot(&self.chol_b.solve(&d))
    }
}

fn iso_cov(dim: usize, var: f64) -> DMatrix<f64> {
    DMatrix::from_diagonal_element(dim, dim, var)
}

impl LinearGaussianSpec {
    pub fn validate(&self) -> Result<(), IdentityError> {
        if self.decoder_noise <= 0.0 || self.encoder_noise <= 0.0 {
            return Err(IdentityError::Degenerate("noise scales must be positive".into()));
        }
        if self.data_variances.iter().any(|v| *v <= 0.0) {
            return Err(IdentityError::Degenerate("data variances must be positive".into()));
        }
        let shapes_ok = self.decoder_map.len() == self.dx * self.dz
            && self.encoder_map.len() == self.dz * self.dx
            && self.decoder_shift.len() == self.dx
            && self.encoder_shift.len() == self.dz
            && self.data_mean.len() == self.dx
            && self.data_variances.len() == self.dx;
        if !shapes_ok {
            return Err(IdentityError::Degenerate("field shapes do not conform".into()));
        }
        Ok(())
    }

    /// Well-conditioned random instance: moderate maps, noise scales bounded
    /// away from zero, so every joint stays comfortably nondegenerate.
    pub fn random<R: Rng>(dx: usize, dz: usize, rng: &mut R) -> Self {
        let u = |rng: &mut R, lo: f64, hi: f64| rng.gen_range(lo..hi);
        LinearGaussianSpec {
            dx,
            dz,
            decoder_map: (0..dx * dz).map(|_| u(rng, -0.8, 0.8)).collect(),
            decoder_shift: (0..dx).map(|_| u(rng, -1.0, 1.0)).collect(),
            decoder_noise: u(rng, 0.6, 1.4),
            encoder_map: (0..dz * dx).map(|_| u(rng, -0.8, 0.8)).collect(),
            encoder_shift: (0..dz).map(|_| u(rng, -1.0, 1.0)).collect(),
            encoder_noise: u(rng, 0.6, 1.4),
            data_mean: (0..dx).map(|_| u(rng, -1.0, 1.0)).collect(),
            data_variances: (0..dx).map(|_| u(rng, 0.5, 2.0)).collect(),
        }
    }

    // ---- closed-form factors ----------------------------------------------

    pub fn prior(&self) -> DiagonalGaussian {
        DiagonalGaussian::standard(self.dz)
    }

    pub fn data_marginal(&self) -> DiagonalGaussian {
        DiagonalGaussian::new(
            self.data_mean.clone(),
            self.data_variances.iter().map(|v| v.ln()).collect(),
        )
    }

    pub fn decoder_conditional(&self, z: &[f64]) -> DiagonalGaussian {
        let mut mean = self.decoder_shift.clone();
        for i in 0..self.dx {
            for j in 0..self.dz {
                mean[i] += self.decoder_map[i * self.dz + j] * z[j];
            }
        }
        let lv = 2.0 * self.decoder_noise.ln();
        DiagonalGaussian::new(mean, vec![lv; self.dx])
    }

    pub fn encoder_conditional(&self, x: &[f64]) -> DiagonalGaussian {
        let mut mean = self.encoder_shift.clone();
        for i in 0..self.dz {
            for j in 0..self.dx {
                mean[i] += self.encoder_map[i * self.dx + j] * x[j];
            }
        }
        let lv = 2.0 * self.encoder_noise.ln();
        DiagonalGaussian::new(mean, vec![lv; self.dz])
    }

    // ---- assembled joints over (x, z) -------------------------------------

    /// p(x, z) = p(z) p(x|z): mean (b, 0), cov [[AA^T + s^2 I, A], [A^T, I]].
    pub fn joint_p(&self) -> FullGaussian {
        let a = DMatrix::from_row_slice(self.dx, self.dz, &self.decoder_map);
        let mut cov = DMatrix::zeros(self.dx + self.dz, self.dx + self.dz);
        let xx = &a * a.transpose() + iso_cov(self.dx, self.decoder_noise.powi(2));
        cov.view_mut((0, 0), (self.dx, self.dx)).copy_from(&xx);
        cov.view_mut((0, self.dx), (self.dx, self.dz)).copy_from(&a);
        cov.view_mut((self.dx, 0), (self.dz, self.dx))
            .copy_from(&a.transpose());
        cov.view_mut((self.dx, self.dx), (self.dz, self.dz))
            .copy_from(&DMatrix::identity(self.dz, self.dz));
        let mut mean = DVector::zeros(self.dx + self.dz);
        mean.rows_mut(0, self.dx)
            .copy_from(&DVector::from_row_slice(&self.decoder_shift));
        FullGaussian { mean, cov }
    }

    /// q(x, z) = q(x) q(z|x): mean (m, Cm + d),
    /// cov [[S, S C^T], [C S, C S C^T + t^2 I]].
    pub fn joint_q(&self) -> FullGaussian {
        let c = DMatrix::from_row_slice(self.dz, self.dx, &self.encoder_map);
        let s = DMatrix::from_diagonal(&DVector::from_row_slice(&self.data_variances));
        let mut cov = DMatrix::zeros(self.dx + self.dz, self.dx + self.dz);
        let xz = &s * c.transpose();
        let zz = &c * &s * c.transpose() + iso_cov(self.dz, self.encoder_noise.powi(2));
        cov.view_mut((0, 0), (self.dx, self.dx)).copy_from(&s);
        cov.view_mut((0, self.dx), (self.dx, self.dz)).copy_from(&xz);
        cov.view_mut((self.dx, 0), (self.dz, self.dx))
            .copy_from(&xz.transpose());
        cov.view_mut((self.dx, self.dx), (self.dz, self.dz))
            .copy_from(&zz);
        let m = DVector::from_row_slice(&self.data_mean);
        let mut mean = DVector::zeros(self.dx + self.dz);
        mean.rows_mut(0, self.dx).copy_from(&m);
        mean.rows_mut(self.dx, self.dz)
            .copy_from(&(&c * &m + DVector::from_row_slice(&self.encoder_shift)));
        FullGaussian { mean, cov }
    }

    pub fn kl_q_p_closed(&self) -> Result<f64, IdentityError> {
        full_kl(&self.joint_q(), &self.joint_p())
    }

    pub fn kl_p_q_closed(&self) -> Result<f64, IdentityError> {
        full_kl(&self.joint_p(), &self.joint_q())
    }

    pub fn symmetric_kl_closed(&self) -> Result<f64, IdentityError> {
        Ok(self.kl_q_p_closed()? + self.kl_p_q_closed()?)
    }

    /// Oracle route for log p(x,z) - log q(x,z): assembled joints and dense
    /// log-pdfs, no factorization.
    pub fn log_ratio_oracle(&self, x: &[f64], z: &[f64]) -> f64 {
        let mut xz = x.to_vec();
        xz.extend_from_slice(z);
        self.joint_p().log_pdf(&xz) - self.joint_q().log_pdf(&xz)
    }

    // ---- ancestral samplers ------------------------------------------------

    /// Draw (x, z) from the decoder joint: z ~ p(z), x ~ p(x|z).
    pub fn sample_p<R: Rng>(&self, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let z: Vec<f64> = (0..self.dz).map(|_| rng.sample(StandardNormal)).collect();
        let x = self.decoder_conditional(&z).sample(rng);
        (x, z)
    }

    /// Draw (x, z) from the encoder joint: x ~ q(x), z ~ q(z|x).
    pub fn sample_q<R: Rng>(&self, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let x = self.data_marginal().sample(rng);
        let z = self.encoder_conditional(&x).sample(rng);
        (x, z)
    }
}

struct McTerm {
    name: String,
    mean: f64,
    variance_of_mean: f64,
}

fn mc_stats(name: &str, kls: &[f64]) -> McTerm {
    let n = kls.len() as f64;
    let mean = kls.iter().sum::<f64>() / n;
    let var = kls.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    McTerm {
        name: name.to_string(),
        mean,
        variance_of_mean: var / n,
    }
}

fn assemble(
    identity: Identity,
    lhs: f64,
    mc_terms: Vec<McTerm>,
    closed_terms: Vec<(String, f64)>,
) -> DecompositionReport {
    let mut rhs_terms = Vec::new();
    let mut rhs_sum = 0.0;
    let mut var = 0.0;
    for t in &mc_terms {
        rhs_terms.push((t.name.clone(), t.mean));
        rhs_sum += t.mean;
        var += t.variance_of_mean;
    }
    for (name, v) in closed_terms {
        rhs_terms.push((name, v));
        rhs_sum += v;
    }
    DecompositionReport {
        identity,
        lhs,
        rhs_terms,
        rhs_sum,
        standard_error: var.sqrt(),
    }
}

/// Check one decomposition identity numerically. The left side is the closed
/// form KL (or symmetric KL) between the assembled joints; right-side
/// conditional expectations are Monte Carlo averages of closed-form
/// conditional KLs and carry the reported standard error.
pub fn evaluate_decomposition(
    model: &LinearGaussianSpec,
    identity: Identity,
    n_samples: usize,
    seed: u64,
) -> Result<DecompositionReport, IdentityError> {
    model.validate()?;
    const MIN_SAMPLES: usize = 10_000;
    if n_samples < MIN_SAMPLES {
        return Err(IdentityError::TooFewSamples { got: n_samples, min: MIN_SAMPLES });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dx, dz) = (model.dx, model.dz);
    let jp = model.joint_p();
    let jq = model.joint_q();
    let tau2 = model.encoder_noise.powi(2);
    let sigma2 = model.decoder_noise.powi(2);

    match identity {
        Identity::JointKlXChain => {
            // KL(q||p) = E_{q(x)} KL(q(z|x) || p(z|x)) + KL(q(x) || p(x))
            let lhs = full_kl(&jq, &jp)?;
            let p_z_given_x = ConditionalMap::last_given_first(&jp, dx)?;
            let shell = VaryingMeanKl::new(&iso_cov(dz, tau2), &p_z_given_x.cov)?;
            let qx = model.data_marginal();
            let kls: Vec<f64> = (0..n_samples)
                .map(|_| {
                    let x = qx.sample(&mut rng);
                    let mq = DVector::from_row_slice(&model.encoder_conditional(&x).mean);
                    let mp = p_z_given_x.mean(&DVector::from_row_slice(&x));
                    shell.eval(&mq, &mp)
                })
                .collect();
            let marg = full_kl(&FullGaussian::from_diagonal(&qx), &jp.marginal_first(dx))?;
            Ok(assemble(
                identity,
                lhs,
                vec![mc_stats("E_q(x) KL(q(z|x)||p(z|x))", &kls)],
                vec![("KL(q(x)||p(x))".into(), marg)],
            ))
        }
        Identity::JointKlZChain => {
            // KL(q||p) = E_{q(z)} KL(q(x|z) || p(x|z)) + KL(q(z) || p(z))
            let lhs = full_kl(&jq, &jp)?;
            let qz = jq.marginal_last(dz);
            let q_x_given_z = ConditionalMap::first_given_last(&jq, dx)?;
            let shell = VaryingMeanKl::new(&q_x_given_z.cov, &iso_cov(dx, sigma2))?;
            let qz_chol = qz.chol()?;
            let l = qz_chol.l();
            let kls: Vec<f64> = (0..n_samples)
                .map(|_| {
                    let eps = DVector::from_iterator(
                        dz,
                        (0..dz).map(|_| rng.sample::<f64, _>(StandardNormal)),
                    );
                    let z = &qz.mean + &l * eps;
                    let mq = q_x_given_z.mean(&z);
                    let mp = DVector::from_row_slice(
                        &model.decoder_conditional(z.as_slice()).mean,
                    );
                    shell.eval(&mq, &mp)
                })
                .collect();
            let marg = full_kl(&qz, &FullGaussian::from_diagonal(&model.prior()))?;
            Ok(assemble(
                identity,
                lhs,
                vec![mc_stats("E_q(z) KL(q(x|z)||p(x|z))", &kls)],
                vec![("KL(q(z)||p(z))".into(), marg)],
            ))
        }
        Identity::SymmetricKlZChain => {
            // KLs(q||p) = E_{p(z)} KL(p(x|z)||q(x|z)) + E_{q(z)} KL(q(x|z)||p(x|z))
            //           + KLs(p(z)||q(z))
            let lhs = full_symmetric_kl(&jq, &jp)?;
            let q_x_given_z = ConditionalMap::first_given_last(&jq, dx)?;
            let shell_pq = VaryingMeanKl::new(&iso_cov(dx, sigma2), &q_x_given_z.cov)?;
            let shell_qp = VaryingMeanKl::new(&q_x_given_z.cov, &iso_cov(dx, sigma2))?;
            let kls_p: Vec<f64> = (0..n_samples)
                .map(|_| {
                    let z: Vec<f64> = (0..dz).map(|_| rng.sample(StandardNormal)).collect();
                    let zv = DVector::from_row_slice(&z);
                    let mp = DVector::from_row_slice(&model.decoder_conditional(&z).mean);
                    let mq = q_x_given_z.mean(&zv);
                    shell_pq.eval(&mp, &mq)
                })
                .collect();
            let qz = jq.marginal_last(dz);
            let qz_chol = qz.chol()?;
            let l = qz_chol.l();
            let kls_q: Vec<f64> = (0..n_samples)
                .map(|_| {
                    let eps = DVector::from_iterator(
                        dz,
                        (0..dz).map(|_| rng.sample::<f64, _>(StandardNormal)),
                    );
                    let z = &qz.mean + &l * eps;
                    let mq = q_x_given_z.mean(&z);
                    let mp = DVector::from_row_slice(
                        &model.decoder_conditional(z.as_slice()).mean,
                    );
                    shell_qp.eval(&mq, &mp)
                })
                .collect();
            let prior = FullGaussian::from_diagonal(&model.prior());
            let marg = full_symmetric_kl(&prior, &qz)?;
            Ok(assemble(
                identity,
                lhs,
                vec![
                    mc_stats("E_p(z) KL(p(x|z)||q(x|z))", &kls_p),
                    mc_stats("E_q(z) KL(q(x|z)||p(x|z))", &kls_q),
                ],
                vec![("KLs(p(z)||q(z))".into(), marg)],
            ))
        }
        Identity::SymmetricKlXChain => {
            // KLs(q||p) = E_{p(x)} KL(p(z|x)||q(z|x)) + E_{q(x)} KL(q(z|x)||p(z|x))
            //           + KLs(p(x)||q(x))
            let lhs = full_symmetric_kl(&jq, &jp)?;
            let p_z_given_x = ConditionalMap::last_given_first(&jp, dx)?;
            let shell_pq = VaryingMeanKl::new(&p_z_given_x.cov, &iso_cov(dz, tau2))?;
            let shell_qp = VaryingMeanKl::new(&iso_cov(dz, tau2), &p_z_given_x.cov)?;
            let px = jp.marginal_first(dx);
            let px_chol = px.chol()?;
            let l = px_chol.l();
            let kls_p: Vec<f64> = (0..n_samples)
                .map(|_| {
                    let eps = DVector::from_iterator(
                        dx,
                        (0..dx).map(|_| rng.sample::<f64, _>(StandardNormal)),
                    );
                    let x = &px.mean + &l * eps;
                    let mp = p_z_given_x.mean(&x);
                    let mq = DVector::from_row_slice(
                        &model.encoder_conditional(x.as_slice()).mean,
                    );
                    shell_pq.eval(&mp, &mq)
                })
                .collect();
            let qx = model.data_marginal();
            let kls_q: Vec<f64> = (0..n_samples)
                .map(|_| {
                    let x = qx.sample(&mut rng);
                    let mq = DVector::from_row_slice(&model.encoder_conditional(&x).mean);
                    let mp = p_z_given_x.mean(&DVector::from_row_slice(&x));
                    shell_qp.eval(&mq, &mp)
                })
                .collect();
            let marg = full_symmetric_kl(&px, &FullGaussian::from_diagonal(&qx))?;
            Ok(assemble(
                identity,
                lhs,
                vec![
                    mc_stats("E_p(x) KL(p(z|x)||q(z|x))", &kls_p),
                    mc_stats("E_q(x) KL(q(z|x)||p(z|x))", &kls_q),
                ],
                vec![("KLs(p(x)||q(x))".into(), marg)],
            ))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverageReport {
    pub fraction_a_covered: f64,
    pub fraction_b_covered: f64,
}

/// Fraction of a-points lying within `radius` of some b-point and vice versa;
/// an asymmetric empirical proxy for support containment.
pub fn support_coverage_report(
    samples_a: &[Vec<f64>],
    samples_b: &[Vec<f64>],
    radius: f64,
) -> Result<CoverageReport, IdentityError> {
    if samples_a.is_empty() || samples_b.is_empty() {
        return Err(IdentityError::EmptyPointSet);
    }
    if radius <= 0.0 {
        return Err(IdentityError::BadRadius(radius));
    }
    let (da, db) = (samples_a[0].len(), samples_b[0].len());
    if da != db {
        return Err(IdentityError::CoverageDimMismatch { a: da, b: db });
    }
    let r2 = radius * radius;
    let covered = |points: &[Vec<f64>], others: &[Vec<f64>]| {
        let hits = points
            .iter()
            .filter(|p| {
                others.iter().any(|o| {
                    let d2: f64 = p.iter().zip(o.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                    d2 <= r2
                })
            })
            .count();
        hits as f64 / points.len() as f64
    };
    Ok(CoverageReport {
        fraction_a_covered: covered(samples_a, samples_b),
        fraction_b_covered: covered(samples_b, samples_a),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{gaussian_kl, GmmDensity};

    /// A = 0 and C = 0 with m = b, S = s^2, t = 1 makes both joints the same
    /// product N(b, s^2 I) x N(0, I).
    fn matched_model() -> LinearGaussianSpec {
        LinearGaussianSpec {
            dx: 2,
            dz: 2,
            decoder_map: vec![0.0; 4],
            decoder_shift: vec![0.3, -0.7],
            decoder_noise: 0.9,
            encoder_map: vec![0.0; 4],
            encoder_shift: vec![0.0, 0.0],
            encoder_noise: 1.0,
            data_mean: vec![0.3, -0.7],
            data_variances: vec![0.81, 0.81],
        }
    }

    fn random_model(seed: u64) -> LinearGaussianSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LinearGaussianSpec::random(3, 2, &mut rng)
    }

    #[test]
    fn joint_assembly_matches_factorized_log_densities() {
        // log p(x,z) = log p(z) + log p(x|z) and log q(x,z) = log q(x) + log q(z|x)
        // must hold for the assembled dense joints; this pins the cross
        // covariance blocks.
        let model = random_model(42);
        let jp = model.joint_p();
        let jq = model.joint_q();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..25 {
            let (x, z) = model.sample_p(&mut rng);
            let mut xz = x.clone();
            xz.extend_from_slice(&z);
            let p_fact = model.prior().log_pdf(&z) + model.decoder_conditional(&z).log_pdf(&x);
            let q_fact =
                model.data_marginal().log_pdf(&x) + model.encoder_conditional(&x).log_pdf(&z);
            assert!((jp.log_pdf(&xz) - p_fact).abs() < 1e-10);
            assert!((jq.log_pdf(&xz) - q_fact).abs() < 1e-10);
            let oracle = model.log_ratio_oracle(&x, &z);
            assert!((oracle - (p_fact - q_fact)).abs() < 1e-9);
        }
    }

    #[test]
    fn joint_p_marginalizes_to_standard_prior() {
        let model = random_model(3);
        let prior = model.joint_p().marginal_last(model.dz);
        for i in 0..model.dz {
            assert!(prior.mean[i].abs() < 1e-15);
            for j in 0..model.dz {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((prior.cov[(i, j)] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn full_kl_agrees_with_diagonal_closed_form() {
        // Dual route: dense-covariance KL on diagonal Gaussians must equal the
        // diagonal closed form.
        let a = DiagonalGaussian::new(vec![0.5, -1.0, 2.0], vec![0.2, -0.3, 0.0]);
        let b = DiagonalGaussian::new(vec![0.0, 0.0, 1.0], vec![-0.1, 0.4, 0.5]);
        let dense = full_kl(&FullGaussian::from_diagonal(&a), &FullGaussian::from_diagonal(&b))
            .unwrap();
        assert!((dense - gaussian_kl(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn full_kl_of_identical_gaussians_is_zero() {
        let g = FullGaussian {
            mean: DVector::from_row_slice(&[1.0, -2.0]),
            cov: DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
        };
        assert!(full_kl(&g, &g).unwrap().abs() < 1e-12);
    }

    #[test]
    fn matched_model_reports_all_zero() {
        let model = matched_model();
        for identity in [Identity::JointKlXChain, Identity::JointKlZChain, Identity::SymmetricKlZChain, Identity::SymmetricKlXChain] {
            let report = evaluate_decomposition(&model, identity, 10_000, 5).unwrap();
            assert!(report.lhs.abs() < 1e-12, "{identity}: lhs {}", report.lhs);
            assert!(report.rhs_sum.abs() < 1e-10, "{identity}: rhs {}", report.rhs_sum);
            for (name, v) in &report.rhs_terms {
                assert!(v.abs() < 1e-10, "{identity}: term {name} = {v}");
            }
        }
    }

    #[test]
    fn decompositions_close_within_three_standard_errors() {
        let model = random_model(11);
        for identity in [Identity::JointKlXChain, Identity::JointKlZChain, Identity::SymmetricKlZChain, Identity::SymmetricKlXChain] {
            let report = evaluate_decomposition(&model, identity, 30_000, 13).unwrap();
            assert!(
                report.within(3.0),
                "{identity}: lhs {} rhs {} se {}",
                report.lhs,
                report.rhs_sum,
                report.standard_error
            );
        }
    }

    #[test]
    fn symmetric_lhs_is_sum_of_directed_kls() {
        // The symmetric-chain left side must equal directed KL(q||p) (the
        // one-sided chain's left side) plus the reverse directed KL.
        let model = random_model(21);
        let directed = evaluate_decomposition(&model, Identity::JointKlXChain, 10_000, 1).unwrap();
        let sym_z = evaluate_decomposition(&model, Identity::SymmetricKlZChain, 10_000, 1).unwrap();
        let reverse = model.kl_p_q_closed().unwrap();
        assert!((sym_z.lhs - (directed.lhs + reverse)).abs() < 1e-10);
        assert!((model.symmetric_kl_closed().unwrap() - sym_z.lhs).abs() < 1e-10);
    }

    #[test]
    fn x_chain_and_z_chain_symmetric_sums_agree() {
        let model = random_model(31);
        let sym_z = evaluate_decomposition(&model, Identity::SymmetricKlZChain, 30_000, 2).unwrap();
        let sym_x = evaluate_decomposition(&model, Identity::SymmetricKlXChain, 30_000, 3).unwrap();
        let combined =
            (sym_z.standard_error.powi(2) + sym_x.standard_error.powi(2)).sqrt();
        assert!(
            (sym_z.rhs_sum - sym_x.rhs_sum).abs() <= 3.0 * combined,
            "rhs {} vs {} se {}",
            sym_z.rhs_sum,
            sym_x.rhs_sum,
            combined
        );
    }

    #[test]
    fn ancestral_samplers_hit_closed_form_moments() {
        let model = random_model(17);
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let n = 20_000;
        let mut mean_x = vec![0.0; model.dx];
        let mut mean_z = vec![0.0; model.dz];
        for _ in 0..n {
            let (x, z) = model.sample_p(&mut rng);
            for i in 0..model.dx {
                mean_x[i] += x[i] / n as f64;
            }
            for i in 0..model.dz {
                mean_z[i] += z[i] / n as f64;
            }
        }
        let jp = model.joint_p();
        for i in 0..model.dx {
            let se = (jp.cov[(i, i)] / n as f64).sqrt();
            assert!((mean_x[i] - model.decoder_shift[i]).abs() < 4.0 * se);
        }
        for i in 0..model.dz {
            let se = (1.0 / n as f64).sqrt();
            assert!(mean_z[i].abs() < 4.0 * se);
        }
    }

    #[test]
    fn rejects_degenerate_and_undersampled_requests() {
        let mut model = matched_model();
        assert!(matches!(
            evaluate_decomposition(&model, Identity::JointKlXChain, 100, 0),
            Err(IdentityError::TooFewSamples { got: 100, min: 10_000 })
        ));
        model.decoder_noise = 0.0;
        assert!(matches!(
            evaluate_decomposition(&model, Identity::JointKlXChain, 10_000, 0),
            Err(IdentityError::Degenerate(_))
        ));
        model.decoder_noise = 0.9;
        model.data_variances[0] = -1.0;
        assert!(model.validate().is_err());
    }

    #[test]
    fn identical_point_sets_cover_each_other_fully() {
        let pts: Vec<Vec<f64>> = (0..50)
            .map(|i| vec![(i as f64) * 0.1, (i as f64) * -0.05])
            .collect();
        let report = support_coverage_report(&pts, &pts, 0.01).unwrap();
        assert_eq!(report.fraction_a_covered, 1.0);
        assert_eq!(report.fraction_b_covered, 1.0);
    }

    #[test]
    fn tight_cluster_inside_wide_cloud_is_covered_one_way() {
        // Cluster near the origin sits inside the wide cloud's reach, but the
        // cloud's far points have no cluster point nearby.
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let cluster: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                (0..2)
                    .map(|_| 0.05 * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let cloud: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                (0..2)
                    .map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let report = support_coverage_report(&cluster, &cloud, 0.5).unwrap();
        assert_eq!(report.fraction_a_covered, 1.0);
        assert!(report.fraction_b_covered < 1.0);
    }

    #[test]
    fn moment_matched_gaussian_spreads_wider_than_ring_data() {
        // A maximum-likelihood Gaussian fit to a five-mode ring covers the
        // ring from inside its bulk, while much of its own mass falls off the
        // ring; data-side coverage must come out at least as high.
        let k = 5;
        let weights = vec![1.0 / k as f64; k];
        let means: Vec<Vec<f64>> = (0..k)
            .map(|i| {
                let th = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
                vec![2.0 * th.cos(), 2.0 * th.sin()]
            })
            .collect();
        let variances = vec![vec![0.01, 0.01]; k];
        let ring = GmmDensity::new(weights, means, variances).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let data: Vec<Vec<f64>> = (0..1500).map(|_| ring.sample(&mut rng).0).collect();

        // Maximum-likelihood diagonal Gaussian is the moment match.
        let n = data.len() as f64;
        let mut mean = vec![0.0; 2];
        for p in &data {
            mean[0] += p[0] / n;
            mean[1] += p[1] / n;
        }
        let mut var = vec![0.0; 2];
        for p in &data {
            var[0] += (p[0] - mean[0]).powi(2) / n;
            var[1] += (p[1] - mean[1]).powi(2) / n;
        }
        let fit = DiagonalGaussian::new(mean, vec![var[0].ln(), var[1].ln()]);
        let model: Vec<Vec<f64>> = (0..1500).map(|_| fit.sample(&mut rng)).collect();

        let report = support_coverage_report(&data, &model, 0.3).unwrap();
        assert!(
            report.fraction_a_covered >= report.fraction_b_covered,
            "data covered {} model covered {}",
            report.fraction_a_covered,
            report.fraction_b_covered
        );
        assert!(report.fraction_b_covered < 0.9);
    }

    #[test]
    fn coverage_rejects_bad_inputs() {
        let a = vec![vec![0.0, 0.0]];
        let b = vec![vec![0.0, 0.0, 0.0]];
        assert!(matches!(
            support_coverage_report(&[], &a, 0.1),
            Err(IdentityError::EmptyPointSet)
        ));
        assert!(matches!(
            support_coverage_report(&a, &a, 0.0),
            Err(IdentityError::BadRadius(_))
        ));
        assert!(matches!(
            support_coverage_report(&a, &b, 0.1),
            Err(IdentityError::CoverageDimMismatch { a: 2, b: 3 })
        ));
    }
}
