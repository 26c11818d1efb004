//! Toy dataset: a ring of well-separated Gaussian modes, its ground-truth
//! density, and CSV persistence.
//!
//! Component labels ride along with each sample for evaluation (mode
//! bookkeeping); training code only ever sees the points.

use crate::distributions::{mean_with_error, DistError, Estimate, GmmDensity};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("n_components must be at least 1, got {0}")]
    NoComponents(usize),
    #[error("n_samples must be at least 1, got {0}")]
    NoSamples(usize),
    #[error("dim must be at least 2 to place means on a ring, got {0}")]
    BadDim(usize),
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("refusing to write an empty point set")]
    EmptyWrite,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dist(#[from] DistError),
}

/// Ring-of-Gaussians dataset description. Defaults follow the toy task:
/// five isotropic modes of std 0.1 spaced evenly on a circle of radius 2.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyDatasetSpec {
    pub n_components: usize,
    pub dim: usize,
    pub component_std: f64,
    pub ring_radius: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        ToyDatasetSpec {
            n_components: 5,
            dim: 2,
            component_std: 0.1,
            ring_radius: 2.0,
            n_samples: 10_000,
            seed: 0,
        }
    }
}

impl ToyDatasetSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_components < 1 {
            return Err(DataError::NoComponents(self.n_components));
        }
        if self.n_samples < 1 {
            return Err(DataError::NoSamples(self.n_samples));
        }
        if self.dim < 2 {
            return Err(DataError::BadDim(self.dim));
        }
        if self.component_std <= 0.0 {
            return Err(DataError::NonPositive {
                name: "component_std",
                value: self.component_std,
            });
        }
        if self.ring_radius <= 0.0 {
            return Err(DataError::NonPositive { name: "ring_radius", value: self.ring_radius });
        }
        Ok(())
    }
}

/// Equal-weight mixture with means at angles 2 pi k / n on the ring (extra
/// dimensions beyond the first two are zero) and isotropic variance std^2.
pub fn build_toy_gmm(spec: &ToyDatasetSpec) -> Result<GmmDensity, DataError> {
    spec.validate()?;
    let k = spec.n_components;
    let weights = vec![1.0 / k as f64; k];
    let means = (0..k)
        .map(|i| {
            let theta = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
            let mut m = vec![0.0; spec.dim];
            m[0] = spec.ring_radius * theta.cos();
            m[1] = spec.ring_radius * theta.sin();
            m
        })
        .collect();
    let var = spec.component_std * spec.component_std;
    let variances = vec![vec![var; spec.dim]; k];
    Ok(GmmDensity::new(weights, means, variances)?)
}

/// Sampled points plus the component each was drawn from. The labels exist
/// for metrics; training consumes `points` only.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    pub points: Vec<Vec<f64>>,
    pub components: Option<Vec<usize>>,
}

impl PointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, |p| p.len())
    }
}

/// n i.i.d. draws, fully determined by the seed.
pub fn sample_dataset(gmm: &GmmDensity, n: usize, seed: u64) -> Result<PointSet, DataError> {
    if n < 1 {
        return Err(DataError::NoSamples(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    let mut components = Vec::with_capacity(n);
    for _ in 0..n {
        let (p, c) = gmm.sample(&mut rng);
        points.push(p);
        components.push(c);
    }
    Ok(PointSet { points, components: Some(components) })
}

fn expected_header(dim: usize, with_component: bool) -> String {
    let mut cols: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
    if with_component {
        cols.push("component".to_string());
    }
    cols.join(",")
}

/// Write as CSV with a header row; numbers in shortest round-trip decimal
/// form. The file appears atomically (written to a temporary sibling, then
/// renamed).
pub fn write_dataset(set: &PointSet, path: &Path) -> Result<(), DataError> {
    if set.is_empty() {
        return Err(DataError::EmptyWrite);
    }
    let io_err = |source| DataError::Io { path: path.display().to_string(), source };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = match dir {
        Some(d) => tempfile::NamedTempFile::new_in(d),
        None => tempfile::NamedTempFile::new_in("."),
    }
    .map_err(io_err)?;
    let dim = set.dim();
    let with_component = set.components.is_some();
    writeln!(tmp, "{}", expected_header(dim, with_component)).map_err(io_err)?;
    for (i, p) in set.points.iter().enumerate() {
        let mut row: Vec<String> = p.iter().map(|v| format!("{v}")).collect();
        if let Some(comps) = &set.components {
            row.push(format!("{}", comps[i]));
        }
        writeln!(tmp, "{}", row.join(",")).map_err(io_err)?;
    }
    tmp.persist(path)
        .map_err(|e| DataError::Io { path: path.display().to_string(), source: e.error })?;
    Ok(())
}

/// Read a CSV dataset written by `write_dataset`; exact round trip.
pub fn read_dataset(path: &Path) -> Result<PointSet, DataError> {
    let content = std::fs::read_to_string(path)
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    let mut lines = content.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| DataError::Parse {
        line: 1,
        message: "empty file, expected a header row like 'x0,x1[,component]'".to_string(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    let with_component = cols.last() == Some(&"component");
    let dim = if with_component { cols.len() - 1 } else { cols.len() };
    if dim == 0 || expected_header(dim, with_component) != header {
        return Err(DataError::Parse {
            line: 1,
            message: format!(
                "bad header '{header}', expected '{}'",
                expected_header(dim.max(1), with_component)
            ),
        });
    }

    let mut points = Vec::new();
    let mut components = if with_component { Some(Vec::new()) } else { None };
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(DataError::Parse {
                line: lineno,
                message: format!("expected {} fields, got {}", cols.len(), fields.len()),
            });
        }
        let mut p = Vec::with_capacity(dim);
        for field in &fields[..dim] {
            p.push(field.parse::<f64>().map_err(|e| DataError::Parse {
                line: lineno,
                message: format!("bad number '{field}': {e}"),
            })?);
        }
        points.push(p);
        if let Some(comps) = &mut components {
            let field = fields[dim];
            comps.push(field.parse::<usize>().map_err(|e| DataError::Parse {
                line: lineno,
                message: format!("bad component '{field}': {e}"),
            })?);
        }
    }
    if points.is_empty() {
        return Err(DataError::Parse {
            line: 2,
            message: "no data rows after the header".to_string(),
        });
    }
    Ok(PointSet { points, components })
}

/// Mean negative log-density of the set under its generating mixture, with
/// standard error: the data-entropy constant that fixes the ELBO's offset,
/// made concrete on toy data.
pub fn entropy_constant_estimate(gmm: &GmmDensity, set: &PointSet) -> Estimate {
    let vals: Vec<f64> = set.points.iter().map(|p| -gmm.log_pdf(p)).collect();
    mean_with_error(&vals)
}
