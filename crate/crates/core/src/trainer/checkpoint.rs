//! Binary checkpoints: `VKG1`, a u32 format version, a u64 header length, a
//! JSON header, then little-endian f32 tensor payloads in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, Regime, TrainError};
use crate::lm::{Lm, LmConfig, ParamSet};
use crate::projector::{Projector, ProjectorConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VKG1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in f32 elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub lm: LmConfig,
    pub projector: Option<ProjectorConfig>,
    pub regime: Option<Regime>,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
}

fn named(model: &Model) -> Vec<(String, &Tensor)> {
    let mut out: Vec<(String, &Tensor)> = model.lm.params().iter().map(|(n, t)| (format!("lm.{n}"), t)).collect();
    if let Some(p) = &model.projector {
        out.extend(p.params().iter().map(|(n, t)| (format!("projector.{n}"), t)));
    }
    out
}

pub fn save_checkpoint(path: &Path, model: &Model, regime: Option<Regime>, step: u64) -> Result<(), TrainError> {
    let mut tensors = Vec::new();
    let mut offset = 0;
    let params = named(model);
    for (name, t) in &params {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
    }
    let header = CheckpointHeader {
        lm: model.lm.config().clone(),
        projector: model.projector.as_ref().map(|p| p.config().clone()),
        regime,
        step,
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for (_, t) in &params {
        for &x in t.data() {
            out.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn split(entries: &[TensorEntry], payload: &[f32], prefix: &str) -> Result<ParamSet, TrainError> {
    let mut ps = ParamSet::new();
    for e in entries.iter().filter(|e| e.name.starts_with(prefix)) {
        let n: usize = e.shape.iter().product();
        let data = payload
            .get(e.offset..e.offset + n)
            .ok_or_else(|| TrainError::Checkpoint(format!("payload too short for {}", e.name)))?;
        let t = Tensor::new(e.shape.clone(), data.iter().map(|&x| f64::from(x)).collect())
            .map_err(|err| TrainError::Checkpoint(err.to_string()))?;
        ps.push(&e.name[prefix.len()..], t);
    }
    Ok(ps)
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointHeader), TrainError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| TrainError::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(TrainError::Checkpoint(format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    let raw = &bytes[16 + hlen..];
    if raw.len() % 4 != 0 {
        return Err(bad("payload is not a whole number of f32 values"));
    }
    let payload: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let lm = Lm::from_params(header.lm.clone(), &split(&header.tensors, &payload, "lm.")?)?;
    let projector = match &header.projector {
        Some(cfg) => Some(Projector::from_params(
            cfg.clone(),
            &split(&header.tensors, &payload, "projector.")?,
        )?),
        None => None,
    };
    Ok((Model { lm, projector }, header))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        let lm = Lm::new(LmConfig {
            vocab_size: 7,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 12,
            seed: 4,
        })
        .unwrap();
        let projector = Projector::new(ProjectorConfig {
            d_vis: 5,
            d_lm: 8,
            clip_length: 2,
            prefix_length: 2,
            n_layers: 1,
            n_heads: 2,
            ..Default::default()
        })
        .unwrap();
        Model {
            lm,
            projector: Some(projector),
        }
    }

    #[test]
    fn round_trip_is_exact_in_single_precision() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        let a = dir.path().join("a.ckpt");
        save_checkpoint(&a, &m, Some(Regime::VlmKg), 12).unwrap();
        let (loaded, header) = load_checkpoint(&a).unwrap();
        assert_eq!(header.step, 12);
        assert_eq!(header.regime, Some(Regime::VlmKg));
        for ((_, x), (_, y)) in named(&m).iter().zip(named(&loaded)) {
            for (p, q) in x.data().iter().zip(y.data()) {
                assert_eq!(f64::from(*p as f32), *q);
            }
        }
        let b = dir.path().join("b.ckpt");
        save_checkpoint(&b, &loaded, Some(Regime::VlmKg), 12).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(&std::fs::read(&a).unwrap()[..4], b"VKG1");
    }

    #[test]
    fn garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        std::fs::write(&p, b"not a checkpoint at all").unwrap();
        assert!(matches!(load_checkpoint(&p), Err(TrainError::Checkpoint(_))));
    }
}
