//! Binary checkpoint layout, all integers little-endian:
//!
//! ```text
//! "AWGF" | version u32 | config_len u32 | config (UTF-8 key = value lines)
//! step u64 | rng seed u64 | rng stream u64 | rng word position u128
//! adam step u64 | record count u32
//! record: path_len u32 | path | rank u32 | dims u64 × rank | f64 × Π dims
//! ```
//!
//! The first record is `awdm.level_lengths`; parameters follow in store
//! order, then `adam.m/<path>` and `adam.v/<path>` for each parameter.

use std::collections::HashMap;
use std::path::Path;

use super::{Model, ModelConfig, Trainer};
use crate::error::{Error, Result};
use crate::ndcore::{Adam, RngState, SeededRng, Tensor};

pub const MAGIC: &[u8; 4] = b"AWGF";
pub const FORMAT_VERSION: u32 = 1;

const LEVEL_RECORD: &str = "awdm.level_lengths";

fn level_lengths(cfg: &ModelConfig) -> Tensor {
    let lens = (1..=cfg.levels).map(|j| cfg.input_len >> j).chain([cfg.input_len >> cfg.levels]);
    Tensor::vector(lens.map(|n| n as f64).collect())
}

/// Decoded file contents before they are checked against a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub step: u64,
    pub rng: RngState,
    pub adam_step: u64,
    pub records: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_trainer(tr: &Trainer) -> Self {
        let params = &tr.model.params;
        let mut records = vec![(LEVEL_RECORD.to_string(), level_lengths(&tr.model.config))];
        records.extend(params.iter().map(|(p, t)| (p.to_string(), t.clone())));
        for (prefix, moments) in [("adam.m", &tr.opt.m), ("adam.v", &tr.opt.v)] {
            records.extend(params.paths().iter().zip(moments).map(|(p, t)| (format!("{prefix}/{p}"), t.clone())));
        }
        Checkpoint {
            version: FORMAT_VERSION,
            config: tr.model.config.clone(),
            step: tr.step,
            rng: tr.rng.state(),
            adam_step: tr.opt.step,
            records,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        let cfg = self.config.to_toml();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.seed.to_le_bytes());
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&self.adam_step.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (path, t) in &self.records {
            out.extend_from_slice(&(path.len() as u32).to_le_bytes());
            out.extend_from_slice(path.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses the whole buffer; nothing is returned unless every byte is
    /// accounted for.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("bad magic: not a checkpoint file".into()));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}, expected {FORMAT_VERSION}")));
        }
        let len = r.u32("config length")? as usize;
        let text = std::str::from_utf8(r.take(len, "config")?).map_err(|_| Error::Format("config block is not UTF-8".into()))?;
        let config = ModelConfig::from_toml(text).map_err(|e| Error::Format(format!("config block: {e}")))?;
        let step = r.u64("step")?;
        let seed = r.u64("rng seed")?;
        let stream = r.u64("rng stream")?;
        let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().expect("16 bytes"));
        let adam_step = r.u64("adam step")?;
        let count = r.u32("record count")? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for k in 0..count {
            let what = format!("record {k}");
            let plen = r.u32(&what)? as usize;
            let path = String::from_utf8(r.take(plen, &what)?.to_vec()).map_err(|_| Error::Format(format!("{what}: path is not UTF-8")))?;
            let rank = r.u32(&path)? as usize;
            if rank > 8 {
                return Err(Error::Format(format!("record {path}: rank {rank} is implausible")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64(&path)? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format(format!("record {path}: size overflows")))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format(format!("record {path}: size overflows")))?, &path)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let tensor = Tensor::new(shape, data).map_err(|e| Error::Format(format!("record {path}: {e}")))?;
            records.push((path, tensor));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after last record", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            version,
            config,
            step,
            rng: RngState { seed, stream, word_pos },
            adam_step,
            records,
        })
    }

    /// Rebuilds a trainer, checking every record against `expected` (or the
    /// embedded config when `None`).
    pub fn into_trainer(self, expected: Option<&ModelConfig>) -> Result<Trainer> {
        let cfg = expected.cloned().unwrap_or(self.config);
        let mut model = Model::new(cfg)?;
        let mut by_path: HashMap<&str, &Tensor> = HashMap::with_capacity(self.records.len());
        for (p, t) in &self.records {
            if by_path.insert(p.as_str(), t).is_some() {
                return Err(Error::Format(format!("duplicate record {p}")));
            }
        }
        let check = |path: &str, want: &[usize]| -> Result<&Tensor> {
            let t = by_path.get(path).ok_or_else(|| Error::Format(format!("missing record {path}")))?;
            if t.shape() != want {
                return Err(Error::shape(
                    "checkpoint",
                    format!("record {path} has shape {:?}, config expects {want:?}", t.shape()),
                ));
            }
            Ok(t)
        };
        let levels = level_lengths(&model.config);
        if check(LEVEL_RECORD, levels.shape())? != &levels {
            return Err(Error::shape(
                "checkpoint",
                format!("record {LEVEL_RECORD} {:?} does not match config {:?}", by_path[LEVEL_RECORD].data(), levels.data()),
            ));
        }
        let paths = model.params.paths().to_vec();
        let mut m = Vec::with_capacity(paths.len());
        let mut v = Vec::with_capacity(paths.len());
        for (i, p) in paths.iter().enumerate() {
            let shape = model.params.values()[i].shape().to_vec();
            let value = check(p, &shape)?.clone();
            m.push(check(&format!("adam.m/{p}"), &shape)?.clone());
            v.push(check(&format!("adam.v/{p}"), &shape)?.clone());
            model.params.values_mut()[i] = value;
        }
        let expected_records = 1 + 3 * paths.len();
        if self.records.len() != expected_records {
            let known: std::collections::HashSet<String> = std::iter::once(LEVEL_RECORD.to_string())
                .chain(paths.iter().cloned())
                .chain(paths.iter().map(|p| format!("adam.m/{p}")))
                .chain(paths.iter().map(|p| format!("adam.v/{p}")))
                .collect();
            let extra = self.records.iter().find(|(p, _)| !known.contains(p)).map_or("?", |(p, _)| p.as_str());
            return Err(Error::Format(format!("unexpected record {extra}")));
        }
        let mut tr = Trainer::new(model);
        tr.opt = Adam {
            config: tr.model.config.adam(),
            step: self.adam_step,
            m,
            v,
        };
        tr.rng = SeededRng::from_state(self.rng);
        tr.step = self.step;
        tr.schedule.current_step = self.step;
        Ok(tr)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("file truncated in {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(path: &Path, trainer: &Trainer) -> Result<()> {
    std::fs::write(path, Checkpoint::from_trainer(trainer).encode()).map_err(|e| Error::io(path, e))
}

/// Reads and validates a checkpoint. With `expected` set, every record is
/// checked against that config instead of the embedded one.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Trainer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)?.into_trainer(expected)
}
