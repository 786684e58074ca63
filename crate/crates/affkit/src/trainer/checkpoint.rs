//! Checkpoint persistence.
//!
//! Binary layout (all integers little-endian u32, format version 1):
//!
//! ```text
//! magic "AFKT" | version | entry_count
//! per entry: name_len, name (UTF-8), rank, dims[rank], payload (f32 LE)
//! trailer:   meta_len, metadata (UTF-8 key=value lines)
//! ```
//!
//! The metadata block records the task mode, slot count, backbone config,
//! training progress and optimizer kind. Parameter payloads round-trip
//! bit-exactly.

use crate::autodiff::Tensor;
use crate::data::TaskKind;
use crate::error::{Error, Result};
use crate::model::{
    BackboneConfig, BackboneParams, DeviationExtractor, Extractor, MultiHeadModel, SlotHeads,
};
use crate::trainer::optim::{Optimizer, OptimizerKind};
use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

const MAGIC: &[u8; 4] = b"AFKT";
pub const FORMAT_VERSION: u32 = 1;

/// Raw contents of a checkpoint file.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub entries: BTreeMap<String, Tensor>,
    pub meta: BTreeMap<String, String>,
}

pub fn save_checkpoint(
    path: &Path,
    entries: &[(String, &Tensor)],
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let meta_text: String = meta
        .iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect();
    buf.extend_from_slice(&(meta_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta_text.as_bytes());
    crate::fsutil::write_atomic(path, &buf)
}

struct Reader<'a> {
    path: &'a Path,
    data: Vec<u8>,
    offset: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Checkpoint {
            path: self.path.to_path_buf(),
            msg: msg.into(),
            offset: self.offset as u64,
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.offset + n > self.data.len() {
            return Err(self.fail(format!(
                "truncated: wanted {n} bytes, {} remain",
                self.data.len() - self.offset
            )));
        }
        let slice = &self.data[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut data = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        path,
        data,
        offset: 0,
    };

    let magic = r.take(4)?.to_vec();
    if magic != MAGIC {
        return Err(r.fail(format!("bad magic {magic:?}; not a checkpoint")));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(r.fail(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let entry_count = r.u32()? as usize;
    let mut entries = BTreeMap::new();
    for _ in 0..entry_count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| r.fail("entry name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * 4)?;
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(shape, values).map_err(|e| r.fail(e.to_string()))?;
        entries.insert(name, tensor);
    }
    let meta_len = r.u32()? as usize;
    let meta_text = String::from_utf8(r.take(meta_len)?.to_vec())
        .map_err(|_| r.fail("metadata is not UTF-8"))?;
    let mut meta = BTreeMap::new();
    for line in meta_text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            meta.insert(k.to_string(), v.to_string());
        }
    }
    Ok(Checkpoint { entries, meta })
}

/// Progress markers stored next to model parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingProgress {
    /// Epochs fully completed.
    pub epoch: usize,
    pub global_step: u64,
}

pub fn save_model(
    path: &Path,
    model: &MultiHeadModel,
    optimizer: Option<&Optimizer>,
    progress: TrainingProgress,
) -> Result<()> {
    let mut entries: Vec<(String, Tensor)> = model
        .checkpoint_entries()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    if let Some(opt) = optimizer {
        entries.extend(opt.state_entries());
    }
    let refs: Vec<(String, &Tensor)> = entries.iter().map(|(n, t)| (n.clone(), t)).collect();

    let mut meta = BTreeMap::new();
    meta.insert("task".to_string(), model.task.to_string());
    meta.insert("slots".to_string(), model.num_slots().to_string());
    meta.insert("input_size".to_string(), model.config.input_size.to_string());
    meta.insert(
        "channels".to_string(),
        format!("{},{}", model.config.channels[0], model.config.channels[1]),
    );
    meta.insert("feature_dim".to_string(), model.config.feature_dim.to_string());
    meta.insert("config_seed".to_string(), model.config.seed.to_string());
    meta.insert(
        "deviation".to_string(),
        if model.uses_deviation() { "1" } else { "0" }.to_string(),
    );
    meta.insert("epoch".to_string(), progress.epoch.to_string());
    meta.insert("global_step".to_string(), progress.global_step.to_string());
    if let Some(opt) = optimizer {
        meta.insert("optimizer".to_string(), opt.kind().to_string());
        meta.insert("opt_step".to_string(), opt.step_count().to_string());
    }
    save_checkpoint(path, &refs, &meta)
}

fn meta_get<'m>(meta: &'m BTreeMap<String, String>, key: &str, path: &Path) -> Result<&'m str> {
    meta.get(key).map(|s| s.as_str()).ok_or_else(|| Error::Checkpoint {
        path: path.to_path_buf(),
        msg: format!("metadata is missing {key:?}"),
        offset: 0,
    })
}

fn take_entry(
    entries: &mut BTreeMap<String, Tensor>,
    name: &str,
    path: &Path,
) -> Result<Tensor> {
    entries.remove(name).ok_or_else(|| Error::Checkpoint {
        path: path.to_path_buf(),
        msg: format!("missing parameter entry {name:?}"),
        offset: 0,
    })
}

fn backbone_from(
    entries: &mut BTreeMap<String, Tensor>,
    prefix: &str,
    path: &Path,
) -> Result<BackboneParams> {
    Ok(BackboneParams {
        conv1_kernels: take_entry(entries, &format!("{prefix}.conv1.kernels"), path)?,
        conv1_bias: take_entry(entries, &format!("{prefix}.conv1.bias"), path)?,
        conv2_kernels: take_entry(entries, &format!("{prefix}.conv2.kernels"), path)?,
        conv2_bias: take_entry(entries, &format!("{prefix}.conv2.bias"), path)?,
        fc_weight: take_entry(entries, &format!("{prefix}.fc.weight"), path)?,
        fc_bias: take_entry(entries, &format!("{prefix}.fc.bias"), path)?,
    })
}

/// Rebuilds the model (and, when present, optimizer state) from a file.
pub fn load_model(
    path: &Path,
) -> Result<(MultiHeadModel, Option<Optimizer>, TrainingProgress)> {
    let Checkpoint { mut entries, meta } = load_checkpoint(path)?;
    let task: TaskKind = meta_get(&meta, "task", path)?.parse()?;
    let slots: usize = meta_get(&meta, "slots", path)?
        .parse()
        .map_err(|_| Error::invalid("bad slots metadata"))?;
    let input_size: usize = meta_get(&meta, "input_size", path)?
        .parse()
        .map_err(|_| Error::invalid("bad input_size metadata"))?;
    let feature_dim: usize = meta_get(&meta, "feature_dim", path)?
        .parse()
        .map_err(|_| Error::invalid("bad feature_dim metadata"))?;
    let config_seed: u64 = meta_get(&meta, "config_seed", path)?
        .parse()
        .map_err(|_| Error::invalid("bad config_seed metadata"))?;
    let channels_raw = meta_get(&meta, "channels", path)?;
    let channel_parts: Vec<usize> = channels_raw
        .split(',')
        .map(|p| p.parse().map_err(|_| Error::invalid("bad channels metadata")))
        .collect::<Result<_>>()?;
    if channel_parts.len() != 2 {
        return Err(Error::invalid("channels metadata must have two entries"));
    }
    let config = BackboneConfig {
        input_size,
        channels: [channel_parts[0], channel_parts[1]],
        feature_dim,
        seed: config_seed,
    }
    .validated()?;

    let deviation = meta_get(&meta, "deviation", path)? == "1";
    let trainable = backbone_from(&mut entries, "backbone", path)?;
    let extractor = if deviation {
        let frozen = backbone_from(&mut entries, "frozen", path)?;
        Extractor::Deviation(DeviationExtractor::from_twins(frozen, trainable)?)
    } else {
        Extractor::Plain(trainable)
    };

    let mut slot_heads = Vec::with_capacity(slots);
    for k in 0..slots {
        slot_heads.push(SlotHeads {
            proj_weight: take_entry(&mut entries, &format!("slot{k}.proj.weight"), path)?,
            proj_bias: take_entry(&mut entries, &format!("slot{k}.proj.bias"), path)?,
            expr_weight: take_entry(&mut entries, &format!("slot{k}.expr.weight"), path)?,
            expr_bias: take_entry(&mut entries, &format!("slot{k}.expr.bias"), path)?,
            va_weight: take_entry(&mut entries, &format!("slot{k}.va.weight"), path)?,
            va_bias: take_entry(&mut entries, &format!("slot{k}.va.bias"), path)?,
            au_weight: take_entry(&mut entries, &format!("slot{k}.au.weight"), path)?,
            au_bias: take_entry(&mut entries, &format!("slot{k}.au.bias"), path)?,
        });
    }

    let model = MultiHeadModel {
        config,
        task,
        extractor,
        slots: slot_heads,
    };

    let optimizer = match meta.get("optimizer") {
        Some(kind_str) => {
            let kind: OptimizerKind = kind_str.parse()?;
            let opt_step: u64 = meta
                .get("opt_step")
                .and_then(|s| s.parse().ok())
                .unwrap_or(0);
            // Momentum is a config concern; the caller overrides it.
            Some(Optimizer::restore(kind, 0.9, opt_step, &entries)?)
        }
        None => None,
    };

    let progress = TrainingProgress {
        epoch: meta
            .get("epoch")
            .and_then(|s| s.parse().ok())
            .unwrap_or(0),
        global_step: meta
            .get("global_step")
            .and_then(|s| s.parse().ok())
            .unwrap_or(0),
    };
    Ok((model, optimizer, progress))
}
