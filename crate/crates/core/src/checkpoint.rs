//! Parameter checkpoints: one container block per parameter group.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::prior_net::{Group, NetDims, PriorNetParams};

const KIND: &str = "prior_net_checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub init_seed: u64,
    /// Epoch the parameters were taken from.
    pub epoch: usize,
    /// Free-form provenance (training config, dataset metadata, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    dims: NetDims,
    groups: Vec<GroupShape>,
    info: CheckpointInfo,
}

pub fn to_bytes(params: &PriorNetParams, info: &CheckpointInfo) -> Result<Vec<u8>> {
    let dims = *params.dims();
    let header = Header {
        kind: KIND.into(),
        dims,
        groups: Group::ALL
            .iter()
            .map(|g| {
                let (rows, cols) = g.shape(&dims);
                GroupShape {
                    name: g.name().into(),
                    rows,
                    cols,
                }
            })
            .collect(),
        info: info.clone(),
    };
    let blocks: Vec<&[f64]> = Group::ALL.iter().map(|g| params.group(*g)).collect();
    container::encode(&header, &blocks)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(PriorNetParams, CheckpointInfo)> {
    let (header, blocks): (Header, _) = container::decode(bytes)?;
    if header.kind != KIND {
        return Err(Error::Format(format!("expected a checkpoint, found '{}'", header.kind)));
    }
    let mut params = PriorNetParams::zeros(header.dims);
    if blocks.len() != Group::ALL.len() || header.groups.len() != Group::ALL.len() {
        return Err(Error::Format("wrong number of parameter groups".into()));
    }
    for ((g, shape), block) in Group::ALL.iter().zip(&header.groups).zip(&blocks) {
        let expected = g.shape(&header.dims);
        if shape.name != g.name() || (shape.rows, shape.cols) != expected || block.len() != expected.0 * expected.1 {
            return Err(Error::Format(format!("group '{}' does not match its shape", shape.name)));
        }
        params.group_mut(*g).copy_from_slice(block);
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("checkpoint parameters"));
    }
    Ok((params, header.info))
}

pub fn save(path: &Path, params: &PriorNetParams, info: &CheckpointInfo) -> Result<()> {
    container::write_atomic(path, &to_bytes(params, info)?)
}

pub fn load(path: &Path) -> Result<(PriorNetParams, CheckpointInfo)> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let p = PriorNetParams::init(NetDims::new(2, 3), 5);
        let info = CheckpointInfo {
            init_seed: 5,
            epoch: 17,
            extra: serde_json::json!({"kappa": 0.1}),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save(&path, &p, &info).unwrap();
        let (q, back) = load(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(back, info);
        assert!(matches!(
            load(&dir.path().join("absent.bin")),
            Err(Error::MissingCheckpoint(_))
        ));
        let dataset_bytes = container::encode(&serde_json::json!({"kind": "paired_dataset"}), &[]).unwrap();
        assert!(from_bytes(&dataset_bytes).is_err());
    }
}
