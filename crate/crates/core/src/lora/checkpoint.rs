//! Adapter checkpoint files and the registry manifest.
//!
//! One tensor file per task per role holds `{site}.A` and `{site}.B` for every
//! site, with a JSON header naming the task, role, rank and site list. The
//! manifest lists stage order, the composition policy and the file of each
//! role.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adapter::LoraAdapter;
use super::registry::{AdapterRegistry, CompositionPolicy, TaskAdapterSet};
use crate::backbone::SiteId;
use crate::error::{Error, Result};
use crate::foodstream::TaskKind;
use crate::numeric::checkpoint::TensorFile;

pub const MANIFEST_FILE: &str = "registry.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoredRole {
    Specialized,
    Cooperative,
    /// The only adapter set of a baseline strategy's stage.
    Task,
}

impl StoredRole {
    pub fn name(self) -> &'static str {
        match self {
            StoredRole::Specialized => "specialized",
            StoredRole::Cooperative => "cooperative",
            StoredRole::Task => "task",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterFileMeta {
    pub kind: String,
    pub task_index: usize,
    pub task: TaskKind,
    pub role: StoredRole,
    pub rank: usize,
    pub sites: Vec<SiteId>,
    pub config_hash: String,
}

pub fn adapter_file_name(task_index: usize, role: StoredRole) -> String {
    format!("task{task_index}.{}.tensors", role.name())
}

pub fn save_adapters(
    path: &Path,
    adapters: &[LoraAdapter],
    task_index: usize,
    task: TaskKind,
    role: StoredRole,
    config_hash: &str,
) -> Result<()> {
    let rank = adapters.first().map_or(0, |a| a.rank());
    if let Some(a) = adapters.iter().find(|a| a.rank() != rank) {
        return Err(Error::Invariant(format!("adapter at {} has rank {}, expected {rank}", a.site, a.rank())));
    }
    let meta = AdapterFileMeta {
        kind: "adapters".into(),
        task_index,
        task,
        role,
        rank,
        sites: adapters.iter().map(|a| a.site).collect(),
        config_hash: config_hash.into(),
    };
    let mut file = TensorFile::new(serde_json::to_value(&meta)?);
    for a in adapters {
        file.push(format!("{}.A", a.site), a.a.clone());
        file.push(format!("{}.B", a.site), a.b.clone());
    }
    file.save(path)
}

pub fn load_adapters(path: &Path) -> Result<(AdapterFileMeta, Vec<LoraAdapter>)> {
    let file = TensorFile::load(path)?;
    let meta: AdapterFileMeta = serde_json::from_value(file.header.clone())
        .map_err(|e| Error::Format(format!("{}: bad adapter header: {e}", path.display())))?;
    if meta.kind != "adapters" {
        return Err(Error::Format(format!("{}: not an adapter checkpoint", path.display())));
    }
    let mut out = Vec::with_capacity(meta.sites.len());
    for &site in &meta.sites {
        let a = file.get(&format!("{site}.A"))?.clone();
        let b = file.get(&format!("{site}.B"))?.clone();
        let adapter = LoraAdapter::from_parts(site, a, b)?;
        if adapter.rank() != meta.rank {
            return Err(Error::Format(format!("{}: {site} has rank {}, header says {}", path.display(), adapter.rank(), meta.rank)));
        }
        out.push(adapter);
    }
    Ok((meta, out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub task_index: usize,
    pub task: TaskKind,
    pub specialized: String,
    pub cooperative: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistryManifest {
    pub policy: CompositionPolicy,
    pub config_hash: String,
    /// Training order; the last entry holds the latest cooperative set.
    pub stages: Vec<ManifestEntry>,
}

/// Writes every stage's adapter files and the manifest into `dir`.
pub fn save_registry(dir: &Path, registry: &AdapterRegistry, policy: CompositionPolicy, config_hash: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut stages = Vec::new();
    for set in registry.history() {
        let spec = adapter_file_name(set.task_index, StoredRole::Specialized);
        let coop = adapter_file_name(set.task_index, StoredRole::Cooperative);
        save_adapters(&dir.join(&spec), &set.specialized, set.task_index, set.task, StoredRole::Specialized, config_hash)?;
        save_adapters(&dir.join(&coop), &set.cooperative, set.task_index, set.task, StoredRole::Cooperative, config_hash)?;
        stages.push(ManifestEntry { task_index: set.task_index, task: set.task, specialized: spec, cooperative: coop });
    }
    let manifest = RegistryManifest { policy, config_hash: config_hash.into(), stages };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Rebuilds a registry from `dir`, checking every file against the manifest.
pub fn load_registry(dir: &Path) -> Result<(AdapterRegistry, RegistryManifest)> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: RegistryManifest = serde_json::from_str(&text)?;
    let mut registry = AdapterRegistry::new();
    for entry in &manifest.stages {
        let (spec_meta, specialized) = load_adapters(&dir.join(&entry.specialized))?;
        let (coop_meta, cooperative) = load_adapters(&dir.join(&entry.cooperative))?;
        for (meta, role) in [(&spec_meta, StoredRole::Specialized), (&coop_meta, StoredRole::Cooperative)] {
            if meta.task_index != entry.task_index || meta.task != entry.task || meta.role != role {
                return Err(Error::Format(format!(
                    "adapter file for task {} ({}) does not match the manifest",
                    entry.task_index,
                    role.name()
                )));
            }
        }
        let set = TaskAdapterSet { task_index: entry.task_index, task: entry.task, specialized, cooperative };
        set.validate(spec_meta.rank)?;
        registry.push(set)?;
    }
    Ok((registry, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, SiteId};
    use crate::numeric::SeededRng;

    fn cfg() -> BackboneConfig {
        BackboneConfig { vocab_size: 10, model_dim: 8, num_layers: 2, num_heads: 2, mlp_dim: 8, max_seq_len: 8 }
    }

    fn set(task_index: usize, task: TaskKind, rng: &mut SeededRng) -> TaskAdapterSet {
        let mk = |rng: &mut SeededRng| -> Vec<LoraAdapter> {
            SiteId::all(&cfg())
                .into_iter()
                .map(|s| {
                    let mut a = LoraAdapter::new(s, 8, 8, 2, rng).unwrap();
                    a.b.data_mut().iter_mut().for_each(|x| *x = rng.uniform(-1.0, 1.0));
                    a
                })
                .collect()
        };
        TaskAdapterSet { task_index, task, specialized: mk(rng), cooperative: mk(rng) }
    }

    #[test]
    fn registry_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = SeededRng::new(1);
        let mut reg = AdapterRegistry::new();
        reg.push(set(1, TaskKind::Ingredient, &mut rng)).unwrap();
        reg.push(set(2, TaskKind::Recipe, &mut rng)).unwrap();
        save_registry(dir.path(), &reg, CompositionPolicy::CoopOnly, "h").unwrap();
        let (back, manifest) = load_registry(dir.path()).unwrap();
        assert_eq!(back, reg);
        assert_eq!(manifest.policy, CompositionPolicy::CoopOnly);
        assert_eq!(manifest.stages.len(), 2);
    }

    #[test]
    fn mismatched_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = SeededRng::new(2);
        let mut reg = AdapterRegistry::new();
        reg.push(set(1, TaskKind::Ingredient, &mut rng)).unwrap();
        save_registry(dir.path(), &reg, CompositionPolicy::default(), "h").unwrap();
        // Swap the role files.
        let spec = dir.path().join(adapter_file_name(1, StoredRole::Specialized));
        let coop = dir.path().join(adapter_file_name(1, StoredRole::Cooperative));
        let tmp = dir.path().join("tmp");
        fs::rename(&spec, &tmp).unwrap();
        fs::rename(&coop, &spec).unwrap();
        fs::rename(&tmp, &coop).unwrap();
        assert!(matches!(load_registry(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn adapter_file_keeps_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = SeededRng::new(3);
        let s = set(3, TaskKind::Nutrition, &mut rng);
        let path = dir.path().join("x.tensors");
        save_adapters(&path, &s.specialized, 3, TaskKind::Nutrition, StoredRole::Task, "abc").unwrap();
        let (meta, back) = load_adapters(&path).unwrap();
        assert_eq!(back, s.specialized);
        assert_eq!((meta.task_index, meta.role, meta.rank, meta.config_hash.as_str()), (3, StoredRole::Task, 2, "abc"));
        assert_eq!(meta.sites, SiteId::all(&cfg()));
    }
}
