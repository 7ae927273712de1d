use sha2::{Digest, Sha256};

use crate::layers::ParamStore;

fn hash_values(data: &[f64]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for v in data {
        hasher.update(v.to_le_bytes());
    }
    hasher.finalize().into()
}

/// Snapshot of every frozen tensor's content hash across a set of stores,
/// taken before a training window. Comparing afterwards lists any frozen
/// parameter that moved — the list must be empty for a correct run.
#[derive(Debug, Clone)]
pub struct FreezeAudit {
    entries: Vec<(String, String, [u8; 32])>,
}

impl FreezeAudit {
    /// Records `(tag, name, hash)` for each non-trainable entry.
    pub fn snapshot(stores: &[(&str, &ParamStore)]) -> Self {
        let mut entries = Vec::new();
        for (tag, store) in stores {
            for e in store.iter() {
                if !e.trainable() {
                    entries.push((
                        (*tag).to_string(),
                        e.name().to_string(),
                        hash_values(e.tensor().data()),
                    ));
                }
            }
        }
        Self { entries }
    }

    /// Names of snapshotted tensors whose current content differs.
    pub fn mutated(&self, stores: &[(&str, &ParamStore)]) -> Vec<String> {
        let mut report = Vec::new();
        for (tag, name, hash) in &self.entries {
            let store = stores
                .iter()
                .find(|(t, _)| t == tag)
                .map(|(_, s)| *s);
            match store.and_then(|s| s.id(name).ok().map(|id| s.tensor(id))) {
                Some(tensor) => {
                    if &hash_values(tensor.data()) != hash {
                        report.push(format!("{tag}/{name}"));
                    }
                }
                None => report.push(format!("{tag}/{name} (missing)")),
            }
        }
        report
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
