//! Versioned binary checkpoint format.
//!
//! ```text
//! magic        7 bytes   "MADCKPT"
//! version      1 byte    FORMAT_VERSION
//! records      repeated until end of file:
//!   name_len   u64 LE
//!   name       name_len bytes, UTF-8
//!   rank       u64 LE
//!   extents    rank × u64 LE
//!   values     product(extents) × f64 LE (IEEE-754)
//! ```
//!
//! Architecture metadata is stored as ordinary records under `meta.*`.

use std::fs;
use std::path::Path;

use super::{Block, Dense};
use crate::diffcore::{Activation, BatchNormState, Tensor};
use crate::error::{CheckpointError, Error, Result};

pub const MAGIC: &[u8; 7] = b"MADCKPT";
pub const FORMAT_VERSION: u8 = 1;

pub(crate) const KIND_CLASSIFIER: f64 = 0.0;
pub(crate) const KIND_GENERATOR: f64 = 1.0;
pub(crate) const KIND_EMBEDDINGS: f64 = 2.0;

/// Ordered list of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    records: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.records.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn records(&self) -> &[(String, Tensor)] {
        &self.records
    }

    pub(crate) fn require(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.get(name)
            .ok_or_else(|| CheckpointError::ShapeMismatch(format!("missing record `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadFormat);
        }
        let mut r = Reader {
            bytes,
            pos: MAGIC.len(),
        };
        let version = r.take(1)?[0];
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let mut records = Vec::new();
        while r.pos < bytes.len() {
            let name_len = r.u64()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CheckpointError::BadFormat)?
                .to_string();
            let rank = r.u64()? as usize;
            if rank > 8 {
                return Err(CheckpointError::BadFormat);
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or(CheckpointError::BadFormat)?;
            if count > (bytes.len() - r.pos) / 8 {
                return Err(CheckpointError::Truncated);
            }
            let raw = r.take(count * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|_| CheckpointError::BadFormat)?;
            records.push((name, t));
        }
        Ok(Checkpoint { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|kind| Error::Checkpoint {
            path: path.to_path_buf(),
            kind,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        if end > self.bytes.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

fn mismatch(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::ShapeMismatch(msg.into())
}

pub(crate) fn kind_name(kind: f64) -> &'static str {
    match kind as i64 {
        0 => "classifier",
        1 => "generator",
        2 => "embedding table",
        _ => "unknown",
    }
}

pub(crate) fn expect_kind(ck: &Checkpoint, kind: f64) -> Result<(), CheckpointError> {
    let found = ck.require("meta.kind")?.data().first().copied().unwrap_or(-1.0);
    if found != kind {
        return Err(mismatch(format!(
            "expected a {} checkpoint, found a {}",
            kind_name(kind),
            kind_name(found)
        )));
    }
    Ok(())
}

pub(crate) fn activation_code(a: Activation) -> (f64, f64) {
    match a {
        Activation::Relu => (0.0, 0.0),
        Activation::LeakyRelu(s) => (1.0, s),
        Activation::Sigmoid => (2.0, 0.0),
    }
}

pub(crate) fn read_activation(ck: &Checkpoint) -> Result<Activation, CheckpointError> {
    let t = ck.require("meta.activation")?;
    match t.data() {
        [c, _] if *c == 0.0 => Ok(Activation::Relu),
        [c, s] if *c == 1.0 => Ok(Activation::LeakyRelu(*s)),
        [c, _] if *c == 2.0 => Ok(Activation::Sigmoid),
        _ => Err(mismatch("unrecognized activation record")),
    }
}

pub(crate) fn push_blocks(ck: &mut Checkpoint, blocks: &[Block]) {
    for (i, b) in blocks.iter().enumerate() {
        ck.push(format!("block{i}.weight"), b.dense.weight.clone());
        ck.push(format!("block{i}.bias"), b.dense.bias.clone());
        ck.push(format!("block{i}.bn.scale"), b.bn.scale.clone());
        ck.push(format!("block{i}.bn.shift"), b.bn.shift.clone());
        ck.push(format!("block{i}.bn.running_mean"), b.bn.running_mean.clone());
        ck.push(format!("block{i}.bn.running_var"), b.bn.running_var.clone());
        ck.push(
            format!("block{i}.bn.config"),
            Tensor::vector(vec![b.bn.momentum, b.bn.epsilon]),
        );
    }
}

pub(crate) fn read_dense(
    ck: &Checkpoint,
    prefix: &str,
    d_in: usize,
) -> Result<Dense, CheckpointError> {
    let weight = ck.require(&format!("{prefix}.weight"))?.clone();
    let bias = ck.require(&format!("{prefix}.bias"))?.clone();
    if weight.rank() != 2 || weight.shape()[0] != d_in {
        return Err(mismatch(format!(
            "`{prefix}.weight` has shape {:?}, expected input width {d_in}",
            weight.shape()
        )));
    }
    if bias.shape() != [weight.shape()[1]] {
        return Err(mismatch(format!("`{prefix}.bias` has shape {:?}", bias.shape())));
    }
    Ok(Dense { weight, bias })
}

/// Reads `block0..` until the first missing index. `first_in` pins the input
/// width of the first block when known.
pub(crate) fn read_blocks(
    ck: &Checkpoint,
    first_in: Option<usize>,
) -> Result<Vec<Block>, CheckpointError> {
    let mut blocks = Vec::new();
    let mut width = first_in;
    let mut i = 0;
    while ck.get(&format!("block{i}.weight")).is_some() {
        let d_in = match width {
            Some(w) => w,
            None => ck.require(&format!("block{i}.weight"))?.shape().first().copied().unwrap_or(0),
        };
        let dense = read_dense(ck, &format!("block{i}"), d_in)?;
        let w = dense.d_out();
        let vec_rec = |name: &str| -> Result<Tensor, CheckpointError> {
            let t = ck.require(&format!("block{i}.bn.{name}"))?;
            if t.shape() != [w] {
                return Err(mismatch(format!("`block{i}.bn.{name}` has shape {:?}", t.shape())));
            }
            Ok(t.clone())
        };
        let config = ck.require(&format!("block{i}.bn.config"))?;
        let [momentum, epsilon] = config.data() else {
            return Err(mismatch(format!("`block{i}.bn.config` must hold 2 values")));
        };
        let bn = BatchNormState {
            scale: vec_rec("scale")?,
            shift: vec_rec("shift")?,
            running_mean: vec_rec("running_mean")?,
            running_var: vec_rec("running_var")?,
            momentum: *momentum,
            epsilon: *epsilon,
        };
        blocks.push(Block { dense, bn });
        width = Some(w);
        i += 1;
    }
    if blocks.is_empty() {
        return Err(mismatch("no layers found"));
    }
    Ok(blocks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push("a", Tensor::scalar(1.5));
        ck.push("b", Tensor::from_rows(&[[1.0, -2.0], [f64::MIN_POSITIVE, 1e300]]).unwrap());
        ck
    }

    #[test]
    fn layout_is_bit_exact() {
        let mut ck = Checkpoint::new();
        ck.push("w", Tensor::vector(vec![1.0]));
        let bytes = ck.to_bytes();
        let mut expected = b"MADCKPT".to_vec();
        expected.push(1);
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.push(b'w');
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&1.0f64.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn round_trip() {
        let ck = sample();
        assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), ck);
    }

    #[test]
    fn corrupted_magic_is_bad_format() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert_eq!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::BadFormat));
    }

    #[test]
    fn wrong_version_is_reported() {
        let mut bytes = sample().to_bytes();
        bytes[7] = 9;
        assert_eq!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::VersionMismatch { found: 9, expected: 1 })
        );
    }

    #[test]
    fn truncation_is_detected_everywhere() {
        let bytes = sample().to_bytes();
        // Record "a" ends at byte 33; a cut exactly there is a valid file.
        for cut in (9..bytes.len()).filter(|&c| c != 33) {
            assert_eq!(
                Checkpoint::from_bytes(&bytes[..cut]),
                Err(CheckpointError::Truncated),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn error_codes_are_distinct() {
        let codes = [
            CheckpointError::BadFormat.code(),
            CheckpointError::VersionMismatch { found: 0, expected: 1 }.code(),
            CheckpointError::Truncated.code(),
            CheckpointError::ShapeMismatch(String::new()).code(),
        ];
        let mut sorted = codes.to_vec();
        sorted.dedup();
        assert_eq!(sorted.len(), 4);
    }
}
