//! Binary checkpoint container.
//!
//! Layout (little-endian): the magic `MGPRNNCK`, a `u64` header length, the
//! JSON metadata header, a `u64` array count, then per array a `u32` name
//! length, the UTF-8 name, a `u64` element count and the `f64` elements.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cohort::Dims;
use crate::error::{Error, Result};
use crate::kernel::MgpParams;
use crate::model::{Imputer, Model, ModelKind};
use crate::rnn::RnnParams;
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"MGPRNNCK";
pub const FORMAT_VERSION: u32 = 1;
const FILL_VALUES: &str = "raw.fill_values";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_auroc: Option<f64>,
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub kind: ModelKind,
    pub dims: Dims,
    pub hidden: usize,
    pub n_components: usize,
    pub n_med_terms: usize,
    pub config: TrainConfig,
    /// Epoch the parameters come from; 0 for the initialization.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl CheckpointMeta {
    pub fn new(model: &Model, config: TrainConfig, epoch: usize, history: Vec<EpochRecord>, best_epoch: Option<usize>) -> Self {
        let (q, l) = model.mgp().map_or((0, 0), |p| (p.n_components(), p.n_med_terms()));
        CheckpointMeta {
            format_version: FORMAT_VERSION,
            kind: model.kind(),
            dims: model.dims,
            hidden: model.rnn.hidden(),
            n_components: q,
            n_med_terms: l,
            config,
            epoch,
            history,
            best_epoch,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model,
}

impl Checkpoint {
    /// Errors unless the checkpoint was trained for cohorts shaped `dims`.
    pub fn check_dims(&self, dims: &Dims) -> Result<()> {
        let have = self.model.dims;
        for (what, expected, found) in [("M", dims.m, have.m), ("B", dims.b, have.b), ("P", dims.p, have.p)] {
            if expected != found {
                return Err(Error::dimension(what, expected, found));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.meta)?;
        let mut arrays: Vec<(&str, &[f64])> = Vec::new();
        match &self.model.imputer {
            Imputer::Mgp(p) => arrays.extend(p.blocks()),
            Imputer::CarryForward { fill_values } => arrays.push((FILL_VALUES, fill_values)),
        }
        arrays.extend(self.model.rnn.blocks());

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(arrays.len() as u64).to_le_bytes());
        for (name, values) in arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic".into()));
        }
        let header_len = r.u64()? as usize;
        let header = r.take(header_len)?;
        let version: serde_json::Value =
            serde_json::from_slice(header).map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
        let found = version.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != FORMAT_VERSION {
            return Err(Error::Version { expected: FORMAT_VERSION, found });
        }
        let meta: CheckpointMeta =
            serde_json::from_value(version).map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;

        let dims = meta.dims;
        let mut model = Model {
            dims,
            imputer: match meta.kind {
                ModelKind::MgpRnn => Imputer::Mgp(MgpParams::zeros(dims.m, dims.p, meta.n_components, meta.n_med_terms)),
                ModelKind::RawRnn => Imputer::CarryForward { fill_values: vec![0.0; dims.m] },
            },
            rnn: RnnParams::zeros(dims.frame_width(), meta.hidden),
        };

        let count = r.u64()? as usize;
        let mut seen = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::CorruptCheckpoint("array name is not UTF-8".into()))?
                .to_string();
            let n = r.u64()? as usize;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::CorruptCheckpoint("array too large".into()))?)?;
            let values: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let slot = block_slot(&mut model, &name).ok_or_else(|| Error::CorruptCheckpoint(format!("unknown array {name}")))?;
            if slot.len() != values.len() {
                return Err(Error::dimension(name, slot.len(), values.len()));
            }
            *slot = values;
            seen.push(name);
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let expected = block_names(&model);
        seen.sort();
        let mut want = expected.clone();
        want.sort();
        if seen != want {
            return Err(Error::CorruptCheckpoint(format!("arrays {seen:?} do not match expected {expected:?}")));
        }
        model.validate()?;
        Ok(Checkpoint { meta, model })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

pub fn save_checkpoint(cp: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    cp.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

fn block_names(model: &Model) -> Vec<String> {
    let mut names: Vec<String> = match &model.imputer {
        Imputer::Mgp(p) => p.blocks().iter().map(|(n, _)| n.to_string()).collect(),
        Imputer::CarryForward { .. } => vec![FILL_VALUES.to_string()],
    };
    names.extend(model.rnn.blocks().iter().map(|(n, _)| n.to_string()));
    names
}

fn block_slot<'a>(model: &'a mut Model, name: &str) -> Option<&'a mut Vec<f64>> {
    let Model { imputer, rnn, .. } = model;
    let from_imputer = match imputer {
        Imputer::CarryForward { fill_values } => (name == FILL_VALUES).then_some(fill_values),
        Imputer::Mgp(p) => p.blocks_mut().into_iter().find(|(n, _)| *n == name).map(|(_, v)| v),
    };
    from_imputer.or_else(|| rnn.blocks_mut().into_iter().find(|(n, _)| *n == name).map(|(_, v)| v))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::CorruptCheckpoint(format!("unexpected end of file at byte {} (wanted {n} more)", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
