//! Stage-ordered adapter history and inference-time composition.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::adapter::LoraAdapter;
use crate::error::{Error, Result};
use crate::foodstream::TaskKind;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompositionPolicy {
    /// Latest cooperative set plus every task's specialized set.
    #[default]
    CoopPlusAllSpec,
    CoopPlusLatestSpec,
    CoopOnly,
}

impl CompositionPolicy {
    pub const ALL: [CompositionPolicy; 3] =
        [CompositionPolicy::CoopPlusAllSpec, CompositionPolicy::CoopPlusLatestSpec, CompositionPolicy::CoopOnly];

    pub fn name(self) -> &'static str {
        match self {
            CompositionPolicy::CoopPlusAllSpec => "coop-plus-all-spec",
            CompositionPolicy::CoopPlusLatestSpec => "coop-plus-latest-spec",
            CompositionPolicy::CoopOnly => "coop-only",
        }
    }
}

impl fmt::Display for CompositionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CompositionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown composition policy {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterRole {
    Specialized,
    Cooperative,
}

impl AdapterRole {
    pub fn name(self) -> &'static str {
        match self {
            AdapterRole::Specialized => "specialized",
            AdapterRole::Cooperative => "cooperative",
        }
    }
}

/// Specialized and cooperative adapters of one task, one per site in
/// canonical site order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskAdapterSet {
    /// 1-based position in the stream.
    pub task_index: usize,
    pub task: TaskKind,
    pub specialized: Vec<LoraAdapter>,
    pub cooperative: Vec<LoraAdapter>,
}

impl TaskAdapterSet {
    pub fn validate(&self, rank: usize) -> Result<()> {
        let sites = |v: &[LoraAdapter]| v.iter().map(|a| a.site).collect::<Vec<_>>();
        if sites(&self.specialized) != sites(&self.cooperative) {
            return Err(Error::Invariant(format!("task {} roles cover different sites", self.task_index)));
        }
        if let Some(a) = self.specialized.iter().chain(&self.cooperative).find(|a| a.rank() != rank) {
            return Err(Error::Invariant(format!("adapter at {} has rank {}, expected {rank}", a.site, a.rank())));
        }
        Ok(())
    }

    pub fn role(&self, role: AdapterRole) -> &[LoraAdapter] {
        match role {
            AdapterRole::Specialized => &self.specialized,
            AdapterRole::Cooperative => &self.cooperative,
        }
    }
}

/// History of completed stages in training order; the last one's
/// cooperative set is the latest.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdapterRegistry {
    history: Vec<TaskAdapterSet>,
}

impl AdapterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, set: TaskAdapterSet) -> Result<()> {
        if set.task_index != self.history.len() + 1 {
            return Err(Error::StageOrder(format!(
                "stage {} recorded after {} completed stages",
                set.task_index,
                self.history.len()
            )));
        }
        self.history.push(set);
        Ok(())
    }

    pub fn history(&self) -> &[TaskAdapterSet] {
        &self.history
    }

    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    pub fn latest_cooperative(&self) -> Option<&[LoraAdapter]> {
        self.history.last().map(|s| s.cooperative.as_slice())
    }

    pub fn specialized(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.history.iter().flat_map(|s| s.specialized.iter())
    }
}

/// Frozen adapters active at inference, grouped by role in attachment order.
pub fn compose_for_inference(registry: &AdapterRegistry, policy: CompositionPolicy) -> Result<Vec<&LoraAdapter>> {
    let latest = registry.history.last().ok_or_else(|| Error::StageOrder("no completed stage to compose".into()))?;
    let mut out: Vec<&LoraAdapter> = latest.cooperative.iter().collect();
    match policy {
        CompositionPolicy::CoopPlusAllSpec => out.extend(registry.specialized()),
        CompositionPolicy::CoopPlusLatestSpec => out.extend(latest.specialized.iter()),
        CompositionPolicy::CoopOnly => {}
    }
    Ok(out)
}

/// Specialized adapters that accompany a cooperative set under `policy`.
pub fn specialized_context(registry: &AdapterRegistry, latest: &[LoraAdapter], policy: CompositionPolicy) -> Vec<LoraAdapter> {
    match policy {
        CompositionPolicy::CoopPlusAllSpec => registry.specialized().chain(latest).cloned().collect(),
        CompositionPolicy::CoopPlusLatestSpec => latest.to_vec(),
        CompositionPolicy::CoopOnly => Vec::new(),
    }
}
