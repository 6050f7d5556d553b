//! Frozen-encoder feature containers and their on-disk formats.
//!
//! A [`FeatureBundle`] holds, for every crop of the AnyRes image set (crop 0
//! is the resized original), the final encoder tokens and the tokens of the
//! four tapped intermediate levels.

mod bundle;
mod checkpoint;
mod layout;
mod manifest;
mod synth;

pub use bundle::{load_bundle, save_bundle, FeatureBundle, Label, BUNDLE_HEADER_LEN, BUNDLE_MAGIC, BUNDLE_VERSION};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use layout::{anyres_layout, CropLayout};
pub use manifest::{read_manifest, write_manifest, ManifestEntry};
pub use synth::{holdout_split, synth_generate, SynthConfig};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload: need {needed} bytes, have {available}")]
    Truncated { needed: u64, available: u64 },
    #[error("declared dimensions overflow")]
    DimensionOverflow,
    #[error("invalid field {field}: {detail}")]
    InvalidField { field: &'static str, detail: String },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(u64),
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("unknown tensor {0:?}")]
    UnknownTensor(String),
    #[error("tensor {name:?} has shape {found:?}, expected {expected:?}")]
    TensorShape { name: String, expected: Vec<usize>, found: Vec<usize> },
}

/// Little-endian cursor over a byte slice.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.remaining() < n {
            return Err(FormatError::Truncated { needed: (self.pos + n) as u64, available: self.buf.len() as u64 });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
