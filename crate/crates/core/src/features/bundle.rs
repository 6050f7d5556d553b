//! `.aovf` feature bundles.
//!
//! Layout (all little-endian):
//!
//! ```text
//! "AOVF" | u32 version=1 | u32 n_crops | u32 g | u32 d_enc | u32 label
//!        | u32 class_id | u32 region_len | u64 payload_len          (40 bytes)
//! f32 v_final[crop 0..n]  then  f32 level_i[crop 0..n] for i = 1..4
//! u32 region[region_len]
//! ```
//!
//! Each tensor is a row-major `[g²×d_enc]` matrix. `payload_len` counts every
//! byte after the header.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CropLayout, FormatError, Reader};
use crate::autodiff::Tensor;
use crate::params::LEVELS;
use crate::Error;

pub const BUNDLE_MAGIC: &[u8; 4] = b"AOVF";
pub const BUNDLE_VERSION: u32 = 1;
pub const BUNDLE_HEADER_LEN: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        match self {
            Label::Normal => 0,
            Label::Anomalous => 1,
        }
    }

    pub fn is_anomalous(self) -> bool {
        self == Label::Anomalous
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l.as_u8()
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            0 => Ok(Label::Normal),
            1 => Ok(Label::Anomalous),
            _ => Err(format!("label must be 0 or 1, got {}", v)),
        }
    }
}

/// Per-image frozen-encoder features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub layout: CropLayout,
    pub d_enc: usize,
    /// Final encoder tokens per crop, `[g²×d_enc]` each.
    pub v_final: Vec<Tensor<f32>>,
    /// `v_levels[level][crop]`, pre-adapter, `[g²×d_enc]` each.
    pub v_levels: Vec<Vec<Tensor<f32>>>,
    pub label: Label,
    pub class_id: u32,
    /// Planted token indices (synthetic ground truth), shared by every crop.
    pub anomaly_region: Vec<u32>,
}

impl FeatureBundle {
    pub fn validate(&self) -> Result<(), FormatError> {
        let t = self.layout.tokens_per_crop();
        let shape = [t, self.d_enc];
        let invalid = |detail: String| FormatError::InvalidField { field: "tensors", detail };
        if self.layout.n_crops == 0 || self.v_final.len() != self.layout.n_crops {
            return Err(invalid(format!("{} final tensors for {} crops", self.v_final.len(), self.layout.n_crops)));
        }
        if self.v_levels.len() != LEVELS {
            return Err(invalid(format!("{} levels, expected {}", self.v_levels.len(), LEVELS)));
        }
        for tensors in std::iter::once(&self.v_final).chain(&self.v_levels) {
            if tensors.len() != self.layout.n_crops || tensors.iter().any(|x| x.shape() != shape) {
                return Err(invalid(format!("every crop tensor must be {:?}", shape)));
            }
        }
        if let Some(&bad) = self.anomaly_region.iter().find(|&&i| i as usize >= t) {
            return Err(FormatError::InvalidField { field: "region", detail: format!("index {} outside grid of {} tokens", bad, t) });
        }
        Ok(())
    }

    fn payload_len(n_crops: u32, g: u32, d_enc: u32, region_len: u32) -> Option<u64> {
        let tokens = (g as u64).checked_mul(g as u64)?;
        let per_tensor = tokens.checked_mul(d_enc as u64)?;
        let values = per_tensor.checked_mul(n_crops as u64)?.checked_mul(1 + LEVELS as u64)?;
        values.checked_mul(4)?.checked_add((region_len as u64).checked_mul(4)?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, FormatError> {
        self.validate()?;
        let to_u32 = |v: usize| u32::try_from(v).map_err(|_| FormatError::DimensionOverflow);
        let (n, g, d, r) = (
            to_u32(self.layout.n_crops)?,
            to_u32(self.layout.g)?,
            to_u32(self.d_enc)?,
            to_u32(self.anomaly_region.len())?,
        );
        let payload = Self::payload_len(n, g, d, r).ok_or(FormatError::DimensionOverflow)?;
        let mut out = Vec::with_capacity(BUNDLE_HEADER_LEN + payload as usize);
        out.extend_from_slice(BUNDLE_MAGIC);
        for v in [BUNDLE_VERSION, n, g, d, self.label.as_u8() as u32, self.class_id, r] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&payload.to_le_bytes());
        for t in self.v_final.iter().chain(self.v_levels.iter().flatten()) {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        for i in &self.anomaly_region {
            out.extend_from_slice(&i.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut rd = Reader::new(bytes);
        if rd.take(4).map_err(|_| FormatError::BadMagic { expected: "AOVF" })? != BUNDLE_MAGIC {
            return Err(FormatError::BadMagic { expected: "AOVF" });
        }
        let version = rd.u32()?;
        if version != BUNDLE_VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let (n, g, d, label, class_id, r) = (rd.u32()?, rd.u32()?, rd.u32()?, rd.u32()?, rd.u32()?, rd.u32()?);
        let declared = rd.u64()?;
        let label = u8::try_from(label)
            .ok()
            .and_then(|l| Label::try_from(l).ok())
            .ok_or_else(|| FormatError::InvalidField { field: "label", detail: label.to_string() })?;
        if n == 0 || g == 0 || d == 0 {
            return Err(FormatError::InvalidField { field: "dims", detail: format!("n_crops={n} g={g} d_enc={d}") });
        }
        let payload = Self::payload_len(n, g, d, r).ok_or(FormatError::DimensionOverflow)?;
        if usize::try_from(payload).is_err() {
            return Err(FormatError::DimensionOverflow);
        }
        if declared != payload {
            return Err(FormatError::InvalidField {
                field: "payload_len",
                detail: format!("header says {declared}, dimensions imply {payload}"),
            });
        }
        let available = rd.remaining() as u64;
        if available < payload {
            return Err(FormatError::Truncated { needed: BUNDLE_HEADER_LEN as u64 + payload, available: bytes.len() as u64 });
        }
        if available > payload {
            return Err(FormatError::TrailingBytes(available - payload));
        }
        let (n, g, d) = (n as usize, g as usize, d as usize);
        let per = g * g * d;
        let read_tensor = |rd: &mut Reader| -> Result<Tensor<f32>, FormatError> {
            let raw = rd.take(per * 4)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            Tensor::new(vec![g * g, d], data).map_err(|_| FormatError::DimensionOverflow)
        };
        let v_final = (0..n).map(|_| read_tensor(&mut rd)).collect::<Result<Vec<_>, _>>()?;
        let mut v_levels = Vec::with_capacity(LEVELS);
        for _ in 0..LEVELS {
            v_levels.push((0..n).map(|_| read_tensor(&mut rd)).collect::<Result<Vec<_>, _>>()?);
        }
        let anomaly_region = (0..r).map(|_| rd.u32()).collect::<Result<Vec<_>, _>>()?;
        let bundle = FeatureBundle {
            layout: CropLayout { n_crops: n, g },
            d_enc: d,
            v_final,
            v_levels,
            label,
            class_id,
            anomaly_region,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

pub fn save_bundle(bundle: &FeatureBundle, path: impl AsRef<Path>) -> Result<(), Error> {
    let path = path.as_ref();
    let bytes = bundle.to_bytes().map_err(|source| Error::Format { path: path.into(), source })?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<FeatureBundle, Error> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureBundle::from_bytes(&bytes).map_err(|source| Error::Format { path: path.into(), source })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle(n: usize, g: usize, d: usize, region: Vec<u32>) -> FeatureBundle {
        let t = |seed: usize| {
            let data = (0..g * g * d).map(|i| ((i * 31 + seed * 7) % 97) as f32 * 0.01 - 0.4).collect();
            Tensor::new(vec![g * g, d], data).unwrap()
        };
        FeatureBundle {
            layout: CropLayout { n_crops: n, g },
            d_enc: d,
            v_final: (0..n).map(t).collect(),
            v_levels: (0..LEVELS).map(|l| (0..n).map(|c| t(100 * (l + 1) + c)).collect()).collect(),
            label: if region.is_empty() { Label::Normal } else { Label::Anomalous },
            class_id: 3,
            anomaly_region: region,
        }
    }

    #[test]
    fn payload_size_formula() {
        let b = bundle(2, 8, 16, vec![]);
        let bytes = b.to_bytes().unwrap();
        assert_eq!(bytes.len(), 40 + 5 * 2 * 64 * 16 * 4);
    }

    #[test]
    fn round_trip_is_bitwise() {
        let b = bundle(3, 4, 5, vec![1, 2, 5]);
        let bytes = b.to_bytes().unwrap();
        let back = FeatureBundle::from_bytes(&bytes).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn header_is_little_endian() {
        let bytes = bundle(2, 2, 3, vec![0]).to_bytes().unwrap();
        assert_eq!(&bytes[0..4], b"AOVF");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[2, 0, 0, 0]);
        assert_eq!(&bytes[20..24], &[1, 0, 0, 0]);
        assert_eq!(&bytes[24..28], &[3, 0, 0, 0]);
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = bundle(2, 2, 2, vec![]).to_bytes().unwrap();
        bytes[0] = b'X';
        assert_eq!(FeatureBundle::from_bytes(&bytes), Err(FormatError::BadMagic { expected: "AOVF" }));
        assert_eq!(FeatureBundle::from_bytes(b"AO"), Err(FormatError::BadMagic { expected: "AOVF" }));
    }

    #[test]
    fn truncated_payload() {
        let bytes = bundle(2, 2, 2, vec![]).to_bytes().unwrap();
        let err = FeatureBundle::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, FormatError::Truncated { .. }), "{err:?}");
        let err = FeatureBundle::from_bytes(&bytes[..20]).unwrap_err();
        assert!(matches!(err, FormatError::Truncated { .. }), "{err:?}");
    }

    #[test]
    fn dimension_overflow() {
        let mut bytes = bundle(2, 2, 2, vec![]).to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        bytes[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        bytes[16..20].copy_from_slice(&u32::MAX.to_le_bytes());
        assert_eq!(FeatureBundle::from_bytes(&bytes), Err(FormatError::DimensionOverflow));
    }

    #[test]
    fn region_out_of_grid_rejected() {
        let b = bundle(2, 2, 2, vec![4]);
        assert!(matches!(b.to_bytes(), Err(FormatError::InvalidField { field: "region", .. })));
    }
}
