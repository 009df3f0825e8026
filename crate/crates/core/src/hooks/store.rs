use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const STORE_MANIFEST: &str = "manifest.json";

/// Retrieved activations, keyed by site, one tensor per hook invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationStore<T> {
    entries: BTreeMap<String, Vec<Tensor<T>>>,
    /// Sites in the order they were first retrieved.
    order: Vec<String>,
}

impl<T> Default for ActivationStore<T> {
    fn default() -> Self {
        Self {
            entries: BTreeMap::new(),
            order: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreEntry {
    pub module: String,
    pub index: usize,
    pub file: String,
    pub shape: Vec<usize>,
}

impl<T: Scalar> ActivationStore<T> {
    pub fn push(&mut self, site: &str, t: Tensor<T>) {
        let slot = self.entries.entry(site.to_string()).or_insert_with(|| {
            self.order.push(site.to_string());
            Vec::new()
        });
        slot.push(t);
    }

    pub fn get(&self, site: &str) -> Option<&[Tensor<T>]> {
        self.entries.get(site).map(Vec::as_slice)
    }

    /// The most recent tensor retrieved at `site`.
    pub fn latest(&self, site: &str) -> Option<&Tensor<T>> {
        self.entries.get(site).and_then(|v| v.last())
    }

    pub fn sites(&self) -> &[String] {
        &self.order
    }

    /// Total number of stored tensors.
    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.order.clear();
    }

    /// Writes `<site>__<index>` tensor files and a manifest listing them.
    pub fn export(&self, dir: &Path) -> Result<Vec<StoreEntry>> {
        fs::create_dir_all(dir)?;
        let mut manifest = Vec::new();
        for site in &self.order {
            for (index, t) in self.entries[site].iter().enumerate() {
                let file = format!("{site}__{index}");
                t.save(dir.join(&file))?;
                manifest.push(StoreEntry {
                    module: site.clone(),
                    index,
                    file,
                    shape: t.shape().to_vec(),
                });
            }
        }
        fs::write(dir.join(STORE_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }
}
