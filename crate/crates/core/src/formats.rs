//! On-disk formats: dataset manifests, raw state exports and checkpoints.
//!
//! Checkpoint layout (little endian):
//!
//! ```text
//! "NGCK" | version u32 | checksum u64
//! metadata length u64 | metadata JSON
//! per tensor: name length u32 | name | ndim u32 | dims u64… | f32 data
//! ```
//!
//! The checksum is the first eight bytes of SHA-256 over the whole file with
//! the checksum field left out.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adgrad::{AdError, Tensor};
use crate::policynet::{ModelParams, PolicyError, HEAD_WIDTH, HIDDEN};
use crate::qstate::{random_density_matrix_at, StateError, SystemKind};
use crate::rng::GENERATOR_VERSION;
use crate::trainer::{Checkpoint, Dataset, EpochRecord, RunConfig, TrainError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NGCK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const RAW_MAGIC: &[u8; 4] = b"NEGD";
pub const RAW_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated data")]
    Truncated,
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("metadata: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    State(#[from] StateError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Describes a dataset by the seed that regenerates it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub system: SystemKind,
    /// Dimension of one density matrix.
    pub dim: usize,
    pub count: usize,
    pub seed: u64,
    pub generator_version: u32,
}

impl DatasetManifest {
    pub fn new(system: SystemKind, count: usize, seed: u64) -> Self {
        Self {
            system,
            dim: system.total_dim(),
            count,
            seed,
            generator_version: GENERATOR_VERSION,
        }
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        if self.count == 0 {
            return Err(FormatError::InvalidManifest("count must be at least 1".into()));
        }
        if self.dim != self.system.total_dim() {
            return Err(FormatError::InvalidManifest(format!(
                "dim {} does not match {}",
                self.dim, self.system
            )));
        }
        if self.generator_version != GENERATOR_VERSION {
            return Err(FormatError::InvalidManifest(format!(
                "generator version {} (this build has {GENERATOR_VERSION})",
                self.generator_version
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, FormatError> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// Regenerates the labeled states.
    pub fn dataset(&self) -> Result<Dataset, FormatError> {
        self.validate()?;
        Ok(Dataset::generate(self.system, self.seed, self.count)?)
    }

    /// Writes the density matrices as `"NEGD" | version | dim | count`
    /// (u32 each) followed by row-major `(re, im)` f64 pairs.
    pub fn export_raw(&self, out: &mut impl Write) -> Result<(), FormatError> {
        self.validate()?;
        let count = u32::try_from(self.count).map_err(|_| FormatError::InvalidManifest("count too large".into()))?;
        out.write_all(RAW_MAGIC)?;
        out.write_all(&RAW_VERSION.to_le_bytes())?;
        out.write_all(&(self.dim as u32).to_le_bytes())?;
        out.write_all(&count.to_le_bytes())?;
        for i in 0..self.count as u64 {
            let rho = random_density_matrix_at(self.system, self.seed, i);
            for z in rho.matrix().as_slice() {
                out.write_all(&z.re.to_le_bytes())?;
                out.write_all(&z.im.to_le_bytes())?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Architecture {
    system: SystemKind,
    hidden: usize,
    head_width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    config: RunConfig,
    arch: Architecture,
    best_val_loss: f64,
    best_epoch: usize,
    epochs_run: usize,
    history: Vec<EpochRecord>,
    train_prediction_mean: f64,
    tensors: usize,
}

fn checksum(bytes: &[u8]) -> u64 {
    let mut h = Sha256::new();
    h.update(&bytes[..8]);
    h.update(&bytes[HEADER_LEN..]);
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("eight bytes"))
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let meta = CheckpointMeta {
        config: ck.config.clone(),
        arch: Architecture {
            system: ck.params.system(),
            hidden: HIDDEN,
            head_width: HEAD_WIDTH,
        },
        best_val_loss: ck.best_val_loss,
        best_epoch: ck.best_epoch,
        epochs_run: ck.epochs_run,
        history: ck.history.clone(),
        train_prediction_mean: ck.train_prediction_mean,
        tensors: ck.params.tensors().len(),
    };
    let json = serde_json::to_vec(&meta).expect("metadata serializes");
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + 4 * ck.params.parameter_count() + 512);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&[0; 8]);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (name, t) in ck.params.named() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for x in t.to_f32() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let sum = checksum(&out);
    out[8..16].copy_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(FormatError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn len(&mut self) -> Result<usize, FormatError> {
        usize::try_from(self.u64()?).map_err(|_| FormatError::Truncated)
    }
}

/// Parses and verifies a checkpoint. Weights come back at 32-bit precision.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, FormatError> {
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated);
    }
    let stored = u64::from_le_bytes(bytes[8..16].try_into().expect("eight bytes"));
    if stored != checksum(bytes) {
        return Err(FormatError::ChecksumMismatch);
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic);
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    r.pos = HEADER_LEN;
    let meta_len = r.len()?;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
    if meta.arch.hidden != HIDDEN || meta.arch.head_width != HEAD_WIDTH || meta.arch.system != meta.config.system {
        return Err(PolicyError::ArchitectureMismatch(format!("{:?}", meta.arch)).into());
    }
    let mut named = Vec::with_capacity(meta.tensors);
    for _ in 0..meta.tensors {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| PolicyError::ArchitectureMismatch("tensor name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>, _>>()?;
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(FormatError::Truncated)?;
        let raw = r.take(count.checked_mul(4).ok_or(FormatError::Truncated)?)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect();
        named.push((name, Tensor::from_f32(shape, &data)?));
    }
    if r.pos != bytes.len() {
        return Err(FormatError::Truncated);
    }
    Ok(Checkpoint {
        params: ModelParams::from_named(meta.config.system, named)?,
        config: meta.config,
        best_val_loss: meta.best_val_loss,
        best_epoch: meta.best_epoch,
        epochs_run: meta.epochs_run,
        history: meta.history,
        train_prediction_mean: meta.train_prediction_mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policynet::init_params;
    use crate::trainer::{LossKind, ModeKind, Seeds};

    fn sample() -> Checkpoint {
        let config = RunConfig::new(
            SystemKind::QubitQutrit,
            ModeKind::Fixed,
            LossKind::Greedy,
            6,
            Seeds { data: 1, model: 2 },
        );
        Checkpoint {
            params: init_params(SystemKind::QubitQutrit, 4),
            config,
            best_val_loss: 0.123456789,
            best_epoch: 3,
            epochs_run: 7,
            history: vec![EpochRecord {
                epoch: 0,
                batch_size: 32,
                val_loss: 0.2,
            }],
            train_prediction_mean: 0.05,
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let ck = sample();
        let bytes = encode_checkpoint(&ck);
        let back = decode_checkpoint(&bytes).unwrap();
        let mut rounded = ck.params.clone();
        rounded.round_to_f32();
        assert_eq!(back.params, rounded);
        assert_eq!(back.config, ck.config);
        assert_eq!(back.best_val_loss, ck.best_val_loss);
        assert_eq!(back.history, ck.history);
        // Re-encoding a decoded checkpoint is byte-stable.
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn any_corruption_is_detected() {
        let bytes = encode_checkpoint(&sample());
        for pos in [0, 3, 5, 9, 20, bytes.len() / 2, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x40;
            assert!(matches!(decode_checkpoint(&bad), Err(FormatError::ChecksumMismatch)), "byte {pos}");
        }
        assert!(matches!(decode_checkpoint(&bytes[..10]), Err(FormatError::Truncated)));
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 4]),
            Err(FormatError::ChecksumMismatch)
        ));
    }

    #[test]
    fn manifest_contract() {
        let m = DatasetManifest::new(SystemKind::QubitQutrit, 5, 7);
        assert_eq!(m.dim, 6);
        assert_eq!(DatasetManifest::from_json(&m.to_json()).unwrap(), m);
        let mut bad = m.clone();
        bad.dim = 4;
        assert!(DatasetManifest::from_json(&bad.to_json()).is_err());
        bad = m.clone();
        bad.count = 0;
        assert!(bad.validate().is_err());
        assert!(DatasetManifest::from_json(r#"{"system":"qubit-ququart","dim":8,"count":1,"seed":0,"generator_version":1}"#).is_err());
    }

    #[test]
    fn raw_export_layout() {
        let m = DatasetManifest::new(SystemKind::QubitQubit, 3, 9);
        let mut buf = Vec::new();
        m.export_raw(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 3 * 16 * 16);
        assert_eq!(&buf[..4], RAW_MAGIC);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 3);
        // Second state, entry (1, 2).
        let rho = random_density_matrix_at(SystemKind::QubitQubit, 9, 1);
        let off = 16 + 256 + (4 + 2) * 16;
        let re = f64::from_le_bytes(buf[off..off + 8].try_into().unwrap());
        let im = f64::from_le_bytes(buf[off + 8..off + 16].try_into().unwrap());
        assert_eq!((re, im), (rho.matrix()[(1, 2)].re, rho.matrix()[(1, 2)].im));
    }
}
