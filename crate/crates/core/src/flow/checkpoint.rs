//! Plain-text model checkpoints.
//!
//! ```text
//! NFSAILS-CKPT v1
//! dim=2
//! layers=4
//! layer=0
//! split_index=1
//! flip=0
//! scale_net.0.weight 16 1
//! <one line per matrix row, 17 significant digits>
//! scale_net.0.bias 1 16
//! ...
//! shift_net.2.bias 1 1
//! layer=1
//! ...
//! ```
//!
//! Floats are written as `{:.16e}` and parsed back with `str::parse`, which
//! round-trips every finite `f64` exactly.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use super::coupling::{CouplingLayer, FlowModel};
use super::mlp::{Dense, Mlp};
use crate::autograd::{Parameter, Tensor};

pub const CHECKPOINT_MAGIC: &str = "NFSAILS-CKPT";
pub const CHECKPOINT_VERSION: &str = "v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: String, found: String },
    #[error("checkpoint line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn write_matrix(out: &mut String, name: &str, t: &Tensor) {
    let _ = writeln!(out, "{name} {} {}", t.rows(), t.cols());
    for r in 0..t.rows() {
        let row: Vec<String> = t.row_slice(r).iter().map(|v| format!("{v:.16e}")).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
}

/// Serializes `model` to the checkpoint text format.
pub fn checkpoint_to_string(model: &FlowModel) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}");
    let _ = writeln!(out, "dim={}", model.shape().dim);
    let _ = writeln!(out, "layers={}", model.layers().len());
    for (m, layer) in model.layers().iter().enumerate() {
        let _ = writeln!(out, "layer={m}");
        let _ = writeln!(out, "split_index={}", layer.split());
        let _ = writeln!(out, "flip={}", u8::from(layer.flip()));
        for (net_name, net) in [("scale_net", &layer.scale_net), ("shift_net", &layer.shift_net)] {
            for (i, dense) in net.layers.iter().enumerate() {
                write_matrix(&mut out, &format!("{net_name}.{i}.weight"), dense.weight.value());
                write_matrix(&mut out, &format!("{net_name}.{i}.bias"), dense.bias.value());
            }
        }
    }
    out
}

pub fn save_checkpoint(model: &FlowModel, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, checkpoint_to_string(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<FlowModel, CheckpointError> {
    checkpoint_from_str(&std::fs::read_to_string(path)?)
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<&'a str, CheckpointError> {
        match self.inner.next() {
            Some((i, l)) => {
                self.last = i + 1;
                Ok(l.trim_end())
            }
            None => Err(self.err("unexpected end of file")),
        }
    }

    fn err(&self, message: impl Into<String>) -> CheckpointError {
        CheckpointError::Parse {
            line: self.last,
            message: message.into(),
        }
    }

    fn key(&mut self, key: &str) -> Result<usize, CheckpointError> {
        let line = self.next()?;
        let value = line
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix('='))
            .ok_or_else(|| self.err(format!("expected `{key}=<int>`, found `{line}`")))?;
        value
            .parse()
            .map_err(|_| self.err(format!("invalid integer `{value}` for {key}")))
    }

    fn matrix(&mut self, name: &str) -> Result<Tensor, CheckpointError> {
        let header = self.next()?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != name {
            return Err(self.err(format!("expected matrix header `{name} <rows> <cols>`, found `{header}`")));
        }
        let rows: usize = parts[1].parse().map_err(|_| self.err("invalid row count"))?;
        let cols: usize = parts[2].parse().map_err(|_| self.err("invalid column count"))?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let line = self.next()?;
            let before = data.len();
            for tok in line.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| self.err(format!("invalid float `{tok}`")))?;
                if !v.is_finite() {
                    return Err(self.err("non-finite weight"));
                }
                data.push(v);
            }
            if data.len() - before != cols {
                return Err(self.err(format!("expected {cols} values, found {}", data.len() - before)));
            }
        }
        Ok(Tensor::new(rows, cols, data).expect("row lengths checked"))
    }
}

fn read_net(lines: &mut Lines<'_>, name: &str, depth: usize) -> Result<Mlp, CheckpointError> {
    let mut layers = Vec::with_capacity(depth);
    for i in 0..depth {
        let weight = lines.matrix(&format!("{name}.{i}.weight"))?;
        let bias = lines.matrix(&format!("{name}.{i}.bias"))?;
        if bias.rows() != 1 || bias.cols() != weight.rows() {
            return Err(lines.err(format!("{name}.{i}: bias shape does not match weight")));
        }
        layers.push(Dense {
            weight: Parameter::new(weight),
            bias: Parameter::new(bias),
        });
    }
    Ok(Mlp { layers })
}

/// Parses the checkpoint text format.
pub fn checkpoint_from_str(text: &str) -> Result<FlowModel, CheckpointError> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        last: 0,
    };
    let header = lines.next()?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(CHECKPOINT_MAGIC) {
        return Err(lines.err(format!("missing `{CHECKPOINT_MAGIC}` header")));
    }
    let found = parts.next().unwrap_or("").to_string();
    if found != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            expected: CHECKPOINT_VERSION.into(),
            found,
        });
    }
    let dim = lines.key("dim")?;
    let n_layers = lines.key("layers")?;

    // Network depth is read off the first layer: count matrices until the
    // shift network starts.
    let depth = text
        .lines()
        .filter(|l| l.starts_with("scale_net.") && l.contains(".weight "))
        .count()
        / n_layers.max(1);

    let mut layers = Vec::with_capacity(n_layers);
    for m in 0..n_layers {
        let idx = lines.key("layer")?;
        if idx != m {
            return Err(lines.err(format!("expected layer={m}, found layer={idx}")));
        }
        let split = lines.key("split_index")?;
        let flip = match lines.key("flip")? {
            0 => false,
            1 => true,
            other => return Err(lines.err(format!("flip must be 0 or 1, found {other}"))),
        };
        let scale_net = read_net(&mut lines, "scale_net", depth)?;
        let shift_net = read_net(&mut lines, "shift_net", depth)?;
        let layer = CouplingLayer::from_parts(dim, split, flip, scale_net, shift_net).map_err(|e| lines.err(e.to_string()))?;
        layers.push(layer);
    }
    FlowModel::from_layers(dim, layers).map_err(|e| lines.err(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{Flow, ModelShape};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn header_and_layout() {
        let model = FlowModel::identity(&ModelShape::default()).unwrap();
        let text = checkpoint_to_string(&model);
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("NFSAILS-CKPT v1"));
        assert_eq!(lines.next(), Some("dim=2"));
        assert_eq!(lines.next(), Some("layers=4"));
        assert_eq!(lines.next(), Some("layer=0"));
        assert_eq!(lines.next(), Some("split_index=1"));
        assert_eq!(lines.next(), Some("flip=0"));
        assert_eq!(lines.next(), Some("scale_net.0.weight 16 1"));
    }

    #[test]
    fn version_mismatch_reports_both_versions() {
        let model = FlowModel::identity(&ModelShape::default()).unwrap();
        let text = checkpoint_to_string(&model).replacen("v1", "v9", 1);
        match checkpoint_from_str(&text).unwrap_err() {
            CheckpointError::VersionMismatch { expected, found } => {
                assert_eq!((expected.as_str(), found.as_str()), ("v1", "v9"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let model = FlowModel::identity(&ModelShape::default()).unwrap();
        let text = checkpoint_to_string(&model);
        let cut = &text[..text.len() / 2];
        assert!(matches!(checkpoint_from_str(cut), Err(CheckpointError::Parse { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn save_load_is_bit_exact(seed in any::<u64>(), scale in 0.01f64..3.0, z0 in -3.0f64..3.0, z1 in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = FlowModel::random(&ModelShape::default(), scale, &mut rng).unwrap();
            let back = checkpoint_from_str(&checkpoint_to_string(&model)).unwrap();
            prop_assert_eq!(&back, &model);
            let (a, la) = model.forward(&[z0, z1]).unwrap();
            let (b, lb) = back.forward(&[z0, z1]).unwrap();
            prop_assert_eq!(a[0].to_bits(), b[0].to_bits());
            prop_assert_eq!(a[1].to_bits(), b[1].to_bits());
            prop_assert_eq!(la.to_bits(), lb.to_bits());
        }
    }
}
