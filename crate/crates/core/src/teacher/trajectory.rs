use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::io::{sha256_hex, Decoder, Encoder};
use crate::nets::{ArchDescriptor, ParamVector};

const MAGIC: &[u8; 4] = b"STMT";
const VERSION: u32 = 1;

/// How a trajectory was produced. Serialized as `key=value` lines with
/// shortest round-trip float formatting.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingMeta {
    pub seed: u64,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dataset_fingerprint: String,
    pub augment: String,
    pub final_train_accuracy: f64,
    pub epoch_losses: Vec<f64>,
}

impl TrainingMeta {
    fn to_text(&self) -> String {
        let losses: Vec<String> = self.epoch_losses.iter().map(|l| l.to_string()).collect();
        format!(
            "seed={}\nlr={}\nmomentum={}\nbatch_size={}\nepochs={}\ndataset_fingerprint={}\naugment={}\nfinal_train_accuracy={}\nepoch_losses={}\n",
            self.seed,
            self.lr,
            self.momentum,
            self.batch_size,
            self.epochs,
            self.dataset_fingerprint,
            self.augment,
            self.final_train_accuracy,
            losses.join(",")
        )
    }

    fn from_text(s: &str) -> std::result::Result<Self, FormatError> {
        let mut map = BTreeMap::new();
        for line in s.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| FormatError::Malformed(format!("metadata line {line:?}")))?;
            map.insert(k, v);
        }
        let get = |k: &str| map.get(k).copied().ok_or_else(|| FormatError::Malformed(format!("metadata lacks {k}")));
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> std::result::Result<T, FormatError> {
            v.parse().map_err(|_| FormatError::Malformed(format!("metadata {k}={v}")))
        }
        let losses = get("epoch_losses")?;
        Ok(Self {
            seed: num("seed", get("seed")?)?,
            lr: num("lr", get("lr")?)?,
            momentum: num("momentum", get("momentum")?)?,
            batch_size: num("batch_size", get("batch_size")?)?,
            epochs: num("epochs", get("epochs")?)?,
            dataset_fingerprint: get("dataset_fingerprint")?.to_string(),
            augment: get("augment")?.to_string(),
            final_train_accuracy: num("final_train_accuracy", get("final_train_accuracy")?)?,
            epoch_losses: if losses.is_empty() {
                Vec::new()
            } else {
                losses.split(',').map(|l| num("epoch_losses", l)).collect::<std::result::Result<_, _>>()?
            },
        })
    }
}

/// Per-epoch parameter snapshots of one teacher run; index 0 is the
/// initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBuffer {
    arch: ArchDescriptor,
    snapshots: Vec<ParamVector>,
    meta: TrainingMeta,
}

impl TrajectoryBuffer {
    pub fn new(snapshots: Vec<ParamVector>, meta: TrainingMeta) -> Result<Self> {
        if snapshots.len() < 2 {
            return Err(Error::InsufficientData { need: 2, got: snapshots.len() });
        }
        let arch = *snapshots[0].arch();
        for s in &snapshots[1..] {
            snapshots[0].check_comparable(s)?;
        }
        Ok(Self { arch, snapshots, meta })
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.meta.seed
    }

    pub fn snapshots(&self) -> &[ParamVector] {
        &self.snapshots
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn meta(&self) -> &TrainingMeta {
        &self.meta
    }

    /// Errors on the first pair of identical consecutive snapshots.
    pub fn check_progress(&self) -> Result<()> {
        for (i, pair) in self.snapshots.windows(2).enumerate() {
            if pair[0].distance_sq(&pair[1])? == 0.0 {
                return Err(Error::DegenerateTrajectory { index: i });
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new(MAGIC, VERSION);
        e.arch(&self.arch);
        e.u32(self.snapshots.len() as u32);
        e.u64(self.arch.param_count() as u64);
        for s in &self.snapshots {
            e.f32s(s.as_slice());
        }
        e.text(&self.meta.to_text());
        e.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::open(bytes, MAGIC, VERSION)?;
        let arch = d.arch()?;
        let count = d.u32("snapshot count")? as usize;
        let len = d.u64("parameter length")? as usize;
        if len != arch.param_count() {
            return Err(FormatError::Malformed(format!("parameter length {len} for {arch}")).into());
        }
        let mut snapshots = Vec::with_capacity(count);
        for _ in 0..count {
            snapshots.push(ParamVector::new(arch, d.f32s(len, "snapshot")?)?);
        }
        let meta = TrainingMeta::from_text(&d.text("metadata")?)?;
        d.finish()?;
        Self::new(snapshots, meta).map_err(|e| FormatError::Malformed(e.to_string()).into())
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(&self.encode())
    }
}

/// Refuses buffers with a zero step between consecutive snapshots.
pub fn save_trajectory(buffer: &TrajectoryBuffer, path: impl AsRef<Path>) -> Result<()> {
    buffer.check_progress()?;
    std::fs::write(path, buffer.encode())?;
    Ok(())
}

pub fn load_trajectory(path: impl AsRef<Path>) -> Result<TrajectoryBuffer> {
    let bytes = std::fs::read(path).map_err(FormatError::Io)?;
    TrajectoryBuffer::decode(&bytes)
}

/// Teacher runs sharing one architecture; the distiller samples among them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    arch: ArchDescriptor,
    buffers: Vec<TrajectoryBuffer>,
}

impl TrajectorySet {
    pub fn new(arch: ArchDescriptor) -> Self {
        Self { arch, buffers: Vec::new() }
    }

    pub fn from_buffers(buffers: Vec<TrajectoryBuffer>) -> Result<Self> {
        let first = buffers.first().ok_or(Error::Empty("trajectory set"))?;
        let mut set = Self::new(*first.arch());
        for b in buffers {
            set.push(b)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, buffer: TrajectoryBuffer) -> Result<()> {
        if buffer.arch != self.arch {
            return Err(Error::ArchMismatch { expected: self.arch.to_string(), found: buffer.arch.to_string() });
        }
        self.buffers.push(buffer);
        Ok(())
    }

    /// Loads `path` and adds it, rejecting a different architecture.
    pub fn load_into(&mut self, path: impl AsRef<Path>) -> Result<()> {
        self.push(load_trajectory(path)?)
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn buffers(&self) -> &[TrajectoryBuffer] {
        &self.buffers
    }

    pub fn len(&self) -> usize {
        self.buffers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffers.is_empty()
    }

    /// Snapshot count of the shortest buffer.
    pub fn min_snapshots(&self) -> usize {
        self.buffers.iter().map(|b| b.len()).min().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{init_params, Norm};

    fn arch() -> ArchDescriptor {
        ArchDescriptor { depth: 1, width: 2, in_channels: 1, in_height: 4, in_width: 4, classes: 2, norm: Norm::None }
    }

    fn meta() -> TrainingMeta {
        TrainingMeta {
            seed: 5,
            lr: 0.1,
            momentum: 0.5,
            batch_size: 8,
            epochs: 2,
            dataset_fingerprint: "ab".into(),
            augment: "none".into(),
            final_train_accuracy: 0.75,
            epoch_losses: vec![0.1 + 0.2, 1.0 / 3.0],
        }
    }

    fn buffer() -> TrajectoryBuffer {
        let s: Vec<ParamVector> = (0..3).map(|i| init_params(&arch(), i).unwrap()).collect();
        TrajectoryBuffer::new(s, meta()).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let b = buffer();
        let back = TrajectoryBuffer::decode(&b.encode()).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.meta().epoch_losses[0].to_bits(), (0.1f64 + 0.2).to_bits());
    }

    #[test]
    fn identical_snapshots_rejected_at_save() {
        let p = init_params(&arch(), 0).unwrap();
        let b = TrajectoryBuffer::new(vec![p.clone(), p], meta()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let err = save_trajectory(&b, dir.path().join("t.stmt")).unwrap_err();
        assert!(matches!(err, Error::DegenerateTrajectory { index: 0 }));
    }

    #[test]
    fn corruption_errors_are_distinct() {
        let bytes = buffer().encode();
        let err = TrajectoryBuffer::decode(&bytes[..bytes.len() / 2]).unwrap_err();
        assert!(matches!(err, Error::Format(FormatError::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(TrajectoryBuffer::decode(&bad), Err(Error::Format(FormatError::BadMagic { .. }))));
        let mut v2 = bytes;
        v2[4] = 2;
        assert!(matches!(
            TrajectoryBuffer::decode(&v2),
            Err(Error::Format(FormatError::Version { expected: 1, found: 2 }))
        ));
    }

    #[test]
    fn set_rejects_other_arch() {
        let mut set = TrajectorySet::from_buffers(vec![buffer()]).unwrap();
        let other = ArchDescriptor { width: 3, ..arch() };
        let s: Vec<ParamVector> = (0..2).map(|i| init_params(&other, i).unwrap()).collect();
        let b = TrajectoryBuffer::new(s, meta()).unwrap();
        assert!(matches!(set.push(b), Err(Error::ArchMismatch { .. })));
    }
}
