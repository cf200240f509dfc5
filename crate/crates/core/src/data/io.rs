//! Directory format:
//!
//! ```text
//! meta.json          {"channels": C, "length": L, "num_classes": K, "domains": [..]}
//! <domain>_x.f32     little-endian float32, row-major [B, C, L]
//! <domain>_y.u8      one class id per sample (optional)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TimeSeriesBatch;
use crate::error::{contract_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub channels: usize,
    pub length: usize,
    pub num_classes: usize,
    pub domains: Vec<String>,
}

/// Every domain of one dataset, in `meta.domains` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub domains: Vec<TimeSeriesBatch>,
}

impl Dataset {
    pub fn domain(&self, id: &str) -> Option<&TimeSeriesBatch> {
        self.domains.iter().find(|d| d.domain_id == id)
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    let meta: DatasetMeta = serde_json::from_slice(&read(&meta_path)?).map_err(|source| Error::Json {
        path: meta_path.clone(),
        source,
    })?;
    if meta.channels == 0 || meta.length == 0 || meta.num_classes == 0 {
        return Err(Error::ingestion(&meta_path, "channels, length and num_classes must be positive"));
    }
    if meta.num_classes > 256 {
        return Err(Error::ingestion(&meta_path, "labels are stored as u8, at most 256 classes"));
    }
    let mut domains = Vec::with_capacity(meta.domains.len());
    for id in &meta.domains {
        let x_path = dir.join(format!("{id}_x.f32"));
        let bytes = read(&x_path)?;
        let per_sample = 4 * meta.channels * meta.length;
        if bytes.is_empty() || bytes.len() % per_sample != 0 {
            return Err(Error::ingestion(
                &x_path,
                format!(
                    "{} bytes is not a positive multiple of {per_sample} (C={} x L={} float32 values)",
                    bytes.len(),
                    meta.channels,
                    meta.length
                ),
            ));
        }
        let n = bytes.len() / per_sample;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::ingestion(&x_path, "non-finite value in series data"));
        }
        let values = Tensor::new(vec![n, meta.channels, meta.length], data)?;

        let y_path = dir.join(format!("{id}_y.u8"));
        let labels = if y_path.exists() {
            let raw = read(&y_path)?;
            if raw.len() != n {
                return Err(Error::ingestion(
                    &y_path,
                    format!("{} labels for {n} samples", raw.len()),
                ));
            }
            if let Some(bad) = raw.iter().find(|&&y| y as usize >= meta.num_classes) {
                return Err(Error::ingestion(
                    &y_path,
                    format!("label {bad} outside [0, {})", meta.num_classes),
                ));
            }
            Some(raw.into_iter().map(usize::from).collect())
        } else {
            None
        };
        domains.push(TimeSeriesBatch::new(values, labels, id.clone())?);
    }
    Ok(Dataset { meta, domains })
}

pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    let meta = &dataset.meta;
    let ids: Vec<&str> = dataset.domains.iter().map(|d| d.domain_id.as_str()).collect();
    if ids != meta.domains.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(contract_err!("domain batches {ids:?} do not match meta.domains {:?}", meta.domains));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta_path = dir.join("meta.json");
    let mut json = serde_json::to_string_pretty(meta).map_err(|source| Error::Json {
        path: meta_path.clone(),
        source,
    })?;
    json.push('\n');
    std::fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;
    for batch in &dataset.domains {
        if batch.channels() != meta.channels || batch.length() != meta.length {
            return Err(contract_err!(
                "domain {} is [{}, {}], meta says [{}, {}]",
                batch.domain_id,
                batch.channels(),
                batch.length(),
                meta.channels,
                meta.length
            ));
        }
        batch.check_labels(meta.num_classes.min(256))?;
        let x_path = dir.join(format!("{}_x.f32", batch.domain_id));
        let bytes: Vec<u8> = batch.values().data().iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(&x_path, bytes).map_err(|e| Error::io(&x_path, e))?;
        if let Some(labels) = batch.labels() {
            let y_path = dir.join(format!("{}_y.u8", batch.domain_id));
            let raw: Vec<u8> = labels.iter().map(|&y| y as u8).collect();
            std::fs::write(&y_path, raw).map_err(|e| Error::io(&y_path, e))?;
        }
    }
    Ok(())
}
