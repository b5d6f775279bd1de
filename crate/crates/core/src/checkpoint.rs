//! `TGCKPT1` container: a text header of `key=value` lines and
//! `tensor <name> <dims..>` lines, a blank line, then little-endian `f32`
//! payloads concatenated in header order.

use std::fs;
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8] = b"TGCKPT1\n";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("malformed checkpoint header: {0}")]
    Format(String),
    #[error("checkpoint missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` has shape {found:?}, config implies {expected:?}")]
    ShapeDisagreement {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn meta_parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self
            .meta(key)
            .ok_or_else(|| CheckpointError::Format(format!("missing key `{key}`")))?;
        raw.parse()
            .map_err(|_| CheckpointError::Format(format!("bad value `{raw}` for `{key}`")))
    }

    pub fn push_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.push((key.to_string(), value.to_string()));
    }

    pub fn push_tensor(&mut self, name: &str, shape: &[usize], data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(NamedTensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
    }

    /// Looks up a tensor and checks it against the expected shape.
    pub fn tensor(&self, name: &str, expected: &[usize]) -> Result<&NamedTensor> {
        let t = self
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))?;
        if t.shape != expected {
            return Err(CheckpointError::ShapeDisagreement {
                name: name.to_string(),
                expected: expected.to_vec(),
                found: t.shape.clone(),
            });
        }
        Ok(t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        for (k, v) in &self.meta {
            header.push_str(&format!("{k}={v}\n"));
        }
        for t in &self.tensors {
            header.push_str("tensor ");
            header.push_str(&t.name);
            for d in &t.shape {
                header.push_str(&format!(" {d}"));
            }
            header.push('\n');
        }
        header.push('\n');
        let payload: usize = self.tensors.iter().map(|t| t.data.len() * 4).sum();
        let mut out = Vec::with_capacity(MAGIC.len() + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(header.as_bytes());
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let rest = &bytes[MAGIC.len()..];
        let end = if rest.first() == Some(&b'\n') {
            Some(0)
        } else {
            rest.windows(2).position(|w| w == b"\n\n").map(|p| p + 1)
        }
        .ok_or_else(|| CheckpointError::Truncated("header has no terminating blank line".into()))?;
        let header = std::str::from_utf8(&rest[..end])
            .map_err(|_| CheckpointError::Format("header is not UTF-8".into()))?;
        let mut ckpt = Checkpoint::default();
        let mut shapes = Vec::new();
        for line in header.lines() {
            if let Some(spec) = line.strip_prefix("tensor ") {
                let mut parts = spec.split(' ');
                let name = parts
                    .next()
                    .filter(|n| !n.is_empty())
                    .ok_or_else(|| CheckpointError::Format(format!("bad tensor line `{line}`")))?;
                let dims = parts
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| CheckpointError::Format(format!("bad dims in `{line}`")))?;
                shapes.push((name.to_string(), dims));
            } else {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| CheckpointError::Format(format!("bad header line `{line}`")))?;
                ckpt.meta.push((k.to_string(), v.to_string()));
            }
        }
        let mut payload = &rest[end + 1..];
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            if payload.len() < n * 4 {
                return Err(CheckpointError::Truncated(format!(
                    "tensor `{name}` needs {} bytes, {} left",
                    n * 4,
                    payload.len()
                )));
            }
            let data = payload[..n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            payload = &payload[n * 4..];
            ckpt.tensors.push(NamedTensor { name, shape, data });
        }
        if !payload.is_empty() {
            return Err(CheckpointError::Format(format!("{} trailing bytes", payload.len())));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::default();
        c.push_meta("kind", "test");
        c.push_meta("layers", 2);
        c.push_tensor("a", &[2, 2], vec![1.0, -2.5, f32::MIN_POSITIVE, 3.25]);
        c.push_tensor("b", &[3], vec![0.1, 0.2, 0.3]);
        c
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let bytes = c.to_bytes();
        assert!(bytes.starts_with(b"TGCKPT1\nkind=test\nlayers=2\ntensor a 2 2\ntensor b 3\n\n"));
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.meta_parse::<usize>("layers").unwrap(), 2);
    }

    #[test]
    fn corrupt_inputs() {
        let mut bytes = sample().to_bytes();
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(Checkpoint::from_bytes(truncated), Err(CheckpointError::Truncated(_))));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::BadMagic)));
        assert!(matches!(Checkpoint::from_bytes(b"TGCKPT1\nkind=x\n"), Err(CheckpointError::Truncated(_))));
    }

    #[test]
    fn shape_check() {
        let c = sample();
        assert!(c.tensor("a", &[2, 2]).is_ok());
        assert!(matches!(c.tensor("a", &[4]), Err(CheckpointError::ShapeDisagreement { .. })));
        assert!(matches!(c.tensor("zzz", &[1]), Err(CheckpointError::MissingTensor(_))));
    }

    #[test]
    fn empty_checkpoint() {
        let c = Checkpoint::default();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
    }
}
