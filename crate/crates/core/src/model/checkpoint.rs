//! Self-contained bundle files: config, vocabulary and every named
//! parameter tensor in one JSON document. Values travel as f64.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelBundle, ModelConfig};
use crate::scalar::Scalar;
use crate::tape::ParamGroup;
use crate::tensor::Tensor;

const FORMAT: &str = "rationale-model";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    dim: usize,
    vocab: Vec<String>,
    vocab_hash: u64,
    params: Vec<ParamRecord>,
}

pub fn save_checkpoint<S: Scalar>(bundle: &ModelBundle<S>, path: &Path) -> Result<()> {
    let params = bundle
        .store
        .ids()
        .into_iter()
        .map(|id| {
            let t = bundle.store.get(id);
            ParamRecord {
                name: bundle.store.name(id).to_string(),
                group: bundle.store.group(id),
                shape: t.shape().to_vec(),
                data: t.to_f64_vec(),
            }
        })
        .collect();
    let file = CheckpointFile {
        format: FORMAT.to_string(),
        version: VERSION,
        config: bundle.cfg.clone(),
        dim: bundle.dim,
        vocab: bundle.vocab.clone(),
        vocab_hash: bundle.vocab_hash(),
        params,
    };
    let json = serde_json::to_string(&file)?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<ModelBundle<S>> {
    let text = fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| Error::Artifact(format!("{}: not a model file: {}", path.display(), e)))?;
    if file.format != FORMAT {
        return Err(Error::Artifact(format!("{}: unexpected format {:?}", path.display(), file.format)));
    }
    if file.version != VERSION {
        return Err(Error::Artifact(format!(
                "{}: unsupported version {} (expected {})",
                path.display(),
                file.version,
                VERSION
            )));
    }
    let expected_hash = crate::data::vocab_hash(&file.vocab, file.dim);
    if file.vocab_hash != expected_hash {
        return Err(Error::Artifact(format!("{}: vocabulary hash mismatch", path.display())));
    }
    let mut bundle =
        ModelBundle::<S>::with_shape(file.config, file.dim, file.vocab, None, 0)?;
    let ids: Vec<_> = bundle.store.ids().collect();
    for id in ids {
        let name = bundle.store.name(id).to_string();
        let rec = file
            .params
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Artifact(format!("{}: missing parameter {:?}", path.display(), name)))?;
        let target = bundle.store.get(id).shape().to_vec();
        if rec.shape != target {
            return Err(Error::Artifact(format!(
                    "{}: parameter {:?} has shape {:?}, expected {:?}",
                    path.display(),
                    name,
                    rec.shape,
                    target
                )));
        }
        if rec.data.len() != target.iter().product::<usize>() {
            return Err(Error::Artifact(format!("{}: parameter {:?} data length mismatch", path.display(), name)));
        }
        *bundle.store.get_mut(id) = Tensor::from_f64(rec.shape.clone(), &rec.data);
    }
    let known: Vec<String> = bundle
        .store
        .ids()
        .into_iter()
        .map(|id| bundle.store.name(id).to_string())
        .collect();
    for rec in &file.params {
        if !known.iter().any(|n| n == &rec.name) {
            return Err(Error::Artifact(format!("{}: unknown parameter {:?}", path.display(), rec.name)));
        }
    }
    Ok(bundle)
}
