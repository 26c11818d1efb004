//! Model persistence: a line-oriented text format with a versioned header,
//! one architecture line per network, and named row-major tensors written in
//! shortest round-trip decimal form, so save followed by load reproduces the
//! parameters bit for bit.
//!
//! Layout:
//! ```text
//! svae-checkpoint 1
//! spec encoder {json MlpSpec}
//! spec decoder {json MlpSpec}
//! spec discriminator {json MlpSpec}
//! tensor enc.w0 2 64
//! 0.1 -0.2 ...
//! ...
//! end
//! ```

use crate::models::{Mlp, MlpSpec, ModelError, ModelTriple, ParamTensor};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

const FORMAT_TAG: &str = "svae-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported checkpoint version {got}, this build reads {expected}")]
    Version { expected: u32, got: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn write_mlp<W: Write>(out: &mut W, mlp: &Mlp) -> std::io::Result<()> {
    for p in &mlp.params {
        let dims: Vec<String> = p.shape.iter().map(|d| d.to_string()).collect();
        writeln!(out, "tensor {} {}", p.name, dims.join(" "))?;
        let values: Vec<String> = p.values.iter().map(|v| format!("{v}")).collect();
        writeln!(out, "{}", values.join(" "))?;
    }
    Ok(())
}

/// Save the triple atomically (temporary sibling file, then rename).
pub fn save_checkpoint(triple: &ModelTriple, path: &Path) -> Result<(), CheckpointError> {
    let io_err = |source| CheckpointError::Io { path: path.display().to_string(), source };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = match dir {
        Some(d) => tempfile::NamedTempFile::new_in(d),
        None => tempfile::NamedTempFile::new_in("."),
    }
    .map_err(io_err)?;
    let emit = |tmp: &mut tempfile::NamedTempFile| -> std::io::Result<()> {
        writeln!(tmp, "{FORMAT_TAG} {FORMAT_VERSION}")?;
        for (name, mlp) in [
            ("encoder", &triple.encoder),
            ("decoder", &triple.decoder),
            ("discriminator", &triple.discriminator),
        ] {
            let json = serde_json::to_string(&mlp.spec).expect("spec serializes");
            writeln!(tmp, "spec {name} {json}")?;
        }
        for mlp in [&triple.encoder, &triple.decoder, &triple.discriminator] {
            write_mlp(tmp, mlp)?;
        }
        writeln!(tmp, "end")
    };
    emit(&mut tmp).map_err(io_err)?;
    tmp.persist(path)
        .map_err(|e| CheckpointError::Io { path: path.display().to_string(), source: e.error })?;
    Ok(())
}

struct Parser<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Parser<'a> {
    fn next_line(&mut self) -> Result<(usize, &'a str), CheckpointError> {
        match self.lines.next() {
            Some((idx, line)) => Ok((idx + 1, line)),
            None => Err(CheckpointError::Parse {
                line: 0,
                message: "unexpected end of file".to_string(),
            }),
        }
    }
}

fn parse_spec_line(
    parser: &mut Parser,
    expected_name: &str,
) -> Result<MlpSpec, CheckpointError> {
    let (lineno, line) = parser.next_line()?;
    let rest = line.strip_prefix("spec ").ok_or_else(|| CheckpointError::Parse {
        line: lineno,
        message: format!("expected 'spec {expected_name} ...', got '{line}'"),
    })?;
    let json = rest.strip_prefix(expected_name).and_then(|r| r.strip_prefix(' ')).ok_or_else(
        || CheckpointError::Parse {
            line: lineno,
            message: format!("expected spec for '{expected_name}', got '{line}'"),
        },
    )?;
    serde_json::from_str(json).map_err(|e| CheckpointError::Parse {
        line: lineno,
        message: format!("bad architecture json: {e}"),
    })
}

fn parse_tensors(parser: &mut Parser, spec: &MlpSpec) -> Result<Mlp, CheckpointError> {
    let count = 2 * spec.layer_widths.len();
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let (lineno, line) = parser.next_line()?;
        let mut fields = line.split_whitespace();
        match fields.next() {
            Some("tensor") => {}
            _ => {
                return Err(CheckpointError::Parse {
                    line: lineno,
                    message: format!("expected a 'tensor' record, got '{line}'"),
                })
            }
        }
        let name = fields
            .next()
            .ok_or_else(|| CheckpointError::Parse {
                line: lineno,
                message: "tensor record missing a name".to_string(),
            })?
            .to_string();
        let shape: Vec<usize> = fields
            .map(|d| {
                d.parse().map_err(|e| CheckpointError::Parse {
                    line: lineno,
                    message: format!("bad dimension '{d}': {e}"),
                })
            })
            .collect::<Result<_, _>>()?;
        let (lineno, line) = parser.next_line()?;
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|v| {
                v.parse().map_err(|e| CheckpointError::Parse {
                    line: lineno,
                    message: format!("bad value '{v}': {e}"),
                })
            })
            .collect::<Result<_, _>>()?;
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(CheckpointError::Parse {
                line: lineno,
                message: format!(
                    "tensor `{name}`: {} values, shape {shape:?} wants {expected}",
                    values.len()
                ),
            });
        }
        params.push(ParamTensor { name, shape, values });
    }
    Ok(Mlp { spec: spec.clone(), params })
}

/// Load a checkpoint, verifying the version, every tensor shape, and that the
/// three networks still compose into a valid triple.
pub fn load_checkpoint(path: &Path) -> Result<ModelTriple, CheckpointError> {
    let content = std::fs::read_to_string(path)
        .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    let mut parser = Parser { lines: content.lines().enumerate() };

    let (lineno, header) = parser.next_line()?;
    match header.strip_prefix(FORMAT_TAG).map(str::trim) {
        Some(v) if v == FORMAT_VERSION.to_string() => {}
        Some(v) => {
            return Err(CheckpointError::Version {
                expected: FORMAT_VERSION,
                got: v.to_string(),
            })
        }
        None => {
            return Err(CheckpointError::Parse {
                line: lineno,
                message: format!("not a checkpoint file (header '{header}')"),
            })
        }
    }

    let enc_spec = parse_spec_line(&mut parser, "encoder")?;
    let dec_spec = parse_spec_line(&mut parser, "decoder")?;
    let disc_spec = parse_spec_line(&mut parser, "discriminator")?;
    let encoder = parse_tensors(&mut parser, &enc_spec)?;
    let decoder = parse_tensors(&mut parser, &dec_spec)?;
    let discriminator = parse_tensors(&mut parser, &disc_spec)?;

    let (lineno, line) = parser.next_line()?;
    if line != "end" {
        return Err(CheckpointError::Parse {
            line: lineno,
            message: format!("expected 'end', got '{line}'"),
        });
    }
    Ok(ModelTriple::from_parts(encoder, decoder, discriminator)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(triple: &ModelTriple) -> ModelTriple {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(triple, &path).unwrap();
        load_checkpoint(&path).unwrap()
    }

    #[test]
    fn save_load_reproduces_every_parameter_bitwise() {
        let triple = ModelTriple::default_toy(2, 2, 123);
        let back = roundtrip(&triple);
        assert_eq!(back.encoder.params, triple.encoder.params);
        assert_eq!(back.decoder.params, triple.decoder.params);
        assert_eq!(back.discriminator.params, triple.discriminator.params);
        assert_eq!(back.encoder.spec, triple.encoder.spec);
        assert_eq!((back.dx, back.dz), (2, 2));
    }

    #[test]
    fn awkward_values_survive_the_text_format() {
        let mut triple = ModelTriple::default_toy(2, 1, 0);
        triple.encoder.params[0].values[0] = f64::MIN_POSITIVE;
        triple.encoder.params[0].values[1] = -1.0 / 3.0;
        triple.decoder.params[1].values[0] = 1e300;
        let back = roundtrip(&triple);
        assert_eq!(back.encoder.params, triple.encoder.params);
        assert_eq!(back.decoder.params, triple.decoder.params);
    }

    #[test]
    fn unknown_version_is_rejected() {
        let triple = ModelTriple::default_toy(2, 2, 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&triple, &path).unwrap();
        let content = std::fs::read_to_string(&path).unwrap();
        let bumped = content.replacen("svae-checkpoint 1", "svae-checkpoint 999", 1);
        std::fs::write(&path, bumped).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::Version { expected: 1, .. })
        ));

        std::fs::write(&path, "something else\n").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn truncated_file_fails_cleanly() {
        let triple = ModelTriple::default_toy(2, 2, 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&triple, &path).unwrap();
        let content = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = content.lines().collect();
        let truncated = lines[..lines.len() / 2].join("\n");
        std::fs::write(&path, truncated).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn tampered_shape_is_rejected() {
        let triple = ModelTriple::default_toy(2, 2, 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&triple, &path).unwrap();
        let content = std::fs::read_to_string(&path).unwrap();
        // Claim a different shape for the first tensor: the value count no
        // longer matches.
        let tampered = content.replacen("tensor enc.w0 2 64", "tensor enc.w0 2 63", 1);
        std::fs::write(&path, tampered).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::Parse { .. })
        ));
    }

    #[test]
    fn incompatible_networks_are_rejected_on_load() {
        let triple = ModelTriple::default_toy(2, 2, 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&triple, &path).unwrap();
        let content = std::fs::read_to_string(&path).unwrap();
        // Bump the decoder's declared input width: specs no longer compose.
        let tampered = content.replacen(
            "spec decoder {\"input_dim\":2",
            "spec decoder {\"input_dim\":3",
            1,
        );
        assert_ne!(tampered, content, "expected the spec line to be rewritten");
        std::fs::write(&path, tampered).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn trained_parameters_round_trip_too() {
        // Not just pretty initializer values: push the parameters through a
        // few optimizer steps first.
        use crate::data::{build_toy_gmm, sample_dataset, ToyDatasetSpec};
        use crate::objectives::{ObjectiveSpec, Variant};
        use crate::training::{train_run, TrainConfig};
        let spec = ToyDatasetSpec { n_samples: 32, ..ToyDatasetSpec::default() };
        let gmm = build_toy_gmm(&spec).unwrap();
        let data = sample_dataset(&gmm, spec.n_samples, 1).unwrap();
        let config = TrainConfig {
            batch_size: 8,
            total_generator_steps: 2,
            eval_every: 100,
            ..TrainConfig::default()
        };
        let out = train_run(
            &ModelTriple::default_toy(2, 2, 5),
            &ObjectiveSpec::for_variant(Variant::Svae),
            &data,
            &gmm,
            &config,
        )
        .unwrap();
        let back = roundtrip(&out.triple);
        assert_eq!(back.encoder.params, out.triple.encoder.params);
        assert_eq!(back.decoder.params, out.triple.decoder.params);
        assert_eq!(back.discriminator.params, out.triple.discriminator.params);
    }
}
