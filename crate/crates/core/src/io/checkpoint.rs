//! Binary checkpoints of trainable parameters.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    4 bytes  "KPFT"
//! version  u32
//! count    u32
//! entries  count times, sorted by path:
//!   path_len u32, path (UTF-8), dtype u8 (0 = f32, 1 = f64), rank u8,
//!   dims     rank times u32,
//!   values   product(dims) times f32/f64
//! ```

use thiserror::Error;

use crate::linalg::{Scalar, Tensor2};
use crate::model::TransformerModel;
use crate::params::ParamId;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"KPFT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Self::F32 => <f32 as Scalar>::DTYPE_CODE,
            Self::F64 => <f64 as Scalar>::DTYPE_CODE,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        [Self::F32, Self::F64].into_iter().find(|d| d.code() == c)
    }

    fn width(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F64 => 8,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes after the last entry")]
    Trailing(usize),
    #[error("entry path is not UTF-8")]
    Utf8,
    #[error("unknown dtype code {0}")]
    Dtype(u8),
    #[error("unsupported rank {rank} for {path}")]
    Rank { path: String, rank: u8 },
    #[error("entries not sorted or duplicated at {0}")]
    Order(String),
    #[error("unknown parameter path {0}")]
    UnknownPath(String),
    #[error("shape {found:?} for {path} does not match the model's {expected:?}")]
    Shape {
        path: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint is missing {0}")]
    Missing(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub path: String,
    pub dtype: Dtype,
    pub dims: Vec<usize>,
    pub values: Tensor2,
}

/// Serializes the trainable parameters as f64.
pub fn save_checkpoint(model: &TransformerModel) -> Vec<u8> {
    save_checkpoint_as(model, Dtype::F64)
}

pub fn save_checkpoint_as(model: &TransformerModel, dtype: Dtype) -> Vec<u8> {
    let params = model.trainable_parameters();
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (path, value) in params {
        let spec = &model.store().get(model.store().find(path).expect("path from store")).spec;
        out.extend_from_slice(&(path.len() as u32).to_le_bytes());
        out.extend_from_slice(path.as_bytes());
        out.push(dtype.code());
        let dims = spec.dims();
        out.push(dims.len() as u8);
        for d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in value.data() {
            match dtype {
                Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Decodes and structurally validates every entry.
pub fn read_entries(bytes: &[u8]) -> Result<Vec<CheckpointEntry>, CheckpointError> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4).map_err(|_| CheckpointError::Magic)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Magic);
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = c.u32()? as usize;
    let mut entries: Vec<CheckpointEntry> = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = c.u32()? as usize;
        let path = std::str::from_utf8(c.take(len)?)
            .map_err(|_| CheckpointError::Utf8)?
            .to_string();
        if let Some(prev) = entries.last() {
            if prev.path >= path {
                return Err(CheckpointError::Order(path));
            }
        }
        let code = c.u8()?;
        let dtype = Dtype::from_code(code).ok_or(CheckpointError::Dtype(code))?;
        let rank = c.u8()?;
        if !(1..=2).contains(&rank) {
            return Err(CheckpointError::Rank { path, rank });
        }
        let dims: Vec<usize> = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<_, _>>()?;
        let (rows, cols) = if rank == 1 { (1, dims[0]) } else { (dims[0], dims[1]) };
        let raw = c.take(rows.saturating_mul(cols).saturating_mul(dtype.width()))?;
        let data: Vec<f64> = match dtype {
            Dtype::F32 => raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect(),
            Dtype::F64 => raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect(),
        };
        let values = Tensor2::from_vec(rows, cols, data).expect("length checked by take");
        entries.push(CheckpointEntry {
            path,
            dtype,
            dims,
            values,
        });
    }
    if c.pos != bytes.len() {
        return Err(CheckpointError::Trailing(bytes.len() - c.pos));
    }
    Ok(entries)
}

/// Restores trainable parameters. The checkpoint must name exactly the
/// model's trainable parameters with matching shapes; on any error the model
/// is left unchanged.
pub fn load_checkpoint(bytes: &[u8], model: &mut TransformerModel) -> Result<(), CheckpointError> {
    let entries = read_entries(bytes)?;
    let mut updates: Vec<(ParamId, Tensor2)> = Vec::with_capacity(entries.len());
    let trainable = model.trainable_ids();
    for e in entries {
        let id = trainable
            .iter()
            .copied()
            .find(|&id| model.store().get(id).spec.path == e.path)
            .ok_or_else(|| CheckpointError::UnknownPath(e.path.clone()))?;
        let expected = model.store().get(id).spec.dims();
        if expected != e.dims {
            return Err(CheckpointError::Shape {
                path: e.path,
                expected,
                found: e.dims,
            });
        }
        updates.push((id, e.values));
    }
    if let Some(&missing) = trainable.iter().find(|id| !updates.iter().any(|(u, _)| u == *id)) {
        return Err(CheckpointError::Missing(model.store().get(missing).spec.path.clone()));
    }
    for (id, v) in updates {
        *model.store_mut().value_mut(id) = v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{AdapterKind, AdapterSpec};
    use crate::model::{ModelConfig, ModelGeometry};
    use rand::{Rng, SeedableRng};

    fn model(kind: AdapterKind, seed: u64) -> TransformerModel {
        let n = if kind.uses_division() { 2 } else { 1 };
        let cfg = ModelConfig::new(ModelGeometry::toy(), Some(AdapterSpec::new(kind, 4, n)));
        TransformerModel::build(&cfg, seed).unwrap()
    }

    fn perturb(m: &mut TransformerModel, seed: u64) {
        let mut rng = rand_xoshiro::Xoshiro256StarStar::seed_from_u64(seed);
        for id in m.trainable_ids() {
            for v in m.store_mut().value_mut(id).data_mut() {
                *v += rng.gen_range(-0.5..0.5);
            }
        }
    }

    #[test]
    fn header_layout() {
        let bytes = save_checkpoint(&model(AdapterKind::Compacter, 0));
        assert_eq!(&bytes[..4], b"KPFT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(count, model(AdapterKind::Compacter, 0).trainable_ids().len());
        let entries = read_entries(&bytes).unwrap();
        assert!(entries.windows(2).all(|w| w[0].path < w[1].path));
    }

    #[test]
    fn round_trip_restores_logits() {
        let mut trained = model(AdapterKind::Compacter, 1);
        perturb(&mut trained, 2);
        let bytes = save_checkpoint(&trained);
        let mut fresh = model(AdapterKind::Compacter, 1);
        load_checkpoint(&bytes, &mut fresh).unwrap();
        let x = vec![vec![1, 0, 3, 2], vec![7, 7, 1, 0]];
        assert_eq!(fresh.forward(&x).unwrap(), trained.forward(&x).unwrap());
        assert_eq!(save_checkpoint(&fresh), bytes);
    }

    #[test]
    fn f32_entries_load() {
        let mut trained = model(AdapterKind::Dense, 1);
        perturb(&mut trained, 3);
        let bytes = save_checkpoint_as(&trained, Dtype::F32);
        assert!(bytes.len() < save_checkpoint(&trained).len());
        let mut fresh = model(AdapterKind::Dense, 1);
        load_checkpoint(&bytes, &mut fresh).unwrap();
        for id in fresh.trainable_ids() {
            let (a, b) = (fresh.store().value(id), trained.store().value(id));
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        assert_eq!(save_checkpoint_as(&fresh, Dtype::F32), bytes);
    }

    #[test]
    fn compacter_checkpoint_is_smaller_than_dense() {
        let c = save_checkpoint(&model(AdapterKind::Compacter, 0)).len();
        let d = save_checkpoint(&model(AdapterKind::Dense, 0)).len();
        assert!(c < d, "{c} vs {d}");
    }

    #[test]
    fn failures_leave_model_untouched() {
        let mut trained = model(AdapterKind::Phm, 1);
        perturb(&mut trained, 4);
        let bytes = save_checkpoint(&trained);
        let pristine = model(AdapterKind::Phm, 1);

        let mut m = pristine.clone();
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(load_checkpoint(&bytes[..cut], &mut m).is_err());
            assert_eq!(m, pristine);
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(load_checkpoint(&bad, &mut m), Err(CheckpointError::Magic));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert_eq!(load_checkpoint(&bad, &mut m), Err(CheckpointError::Version(9)));
        let mut long = bytes.clone();
        long.push(0);
        assert_eq!(load_checkpoint(&long, &mut m), Err(CheckpointError::Trailing(1)));

        // a checkpoint for a different adapter kind names unknown paths
        let other = save_checkpoint(&model(AdapterKind::Dense, 1));
        assert!(matches!(load_checkpoint(&other, &mut m), Err(CheckpointError::UnknownPath(_))));
        assert_eq!(m, pristine);

        // same paths, different bottleneck
        let wide = TransformerModel::build(
            &ModelConfig::new(ModelGeometry::toy(), Some(AdapterSpec::new(AdapterKind::Phm, 8, 2))),
            1,
        )
        .unwrap();
        assert!(matches!(
            load_checkpoint(&save_checkpoint(&wide), &mut m),
            Err(CheckpointError::Shape { .. })
        ));
        assert_eq!(m, pristine);
    }
}
