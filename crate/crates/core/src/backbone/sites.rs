//! Adapter injection sites: the query and value projections of every layer.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::weights::BackboneConfig;
use crate::error::{Error, Result};
use crate::lora::LoraAdapter;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SiteKind {
    Query,
    Value,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SiteId {
    pub layer: usize,
    pub kind: SiteKind,
}

impl SiteId {
    /// All sites of a backbone in canonical order.
    pub fn all(config: &BackboneConfig) -> Vec<SiteId> {
        (0..config.num_layers)
            .flat_map(|layer| [SiteKind::Query, SiteKind::Value].map(|kind| SiteId { layer, kind }))
            .collect()
    }

    pub fn index(self) -> usize {
        self.layer * 2 + usize::from(self.kind == SiteKind::Value)
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = match self.kind {
            SiteKind::Query => "q",
            SiteKind::Value => "v",
        };
        write!(f, "layer{}.{k}", self.layer)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Attached<'a> {
    pub adapter: &'a LoraAdapter,
    pub trainable: bool,
}

/// Adapters attached to each site, in attachment order.
#[derive(Clone, Debug)]
pub struct InjectionSites<'a> {
    per_site: Vec<Vec<Attached<'a>>>,
    model_dim: usize,
}

impl<'a> InjectionSites<'a> {
    pub fn empty(config: &BackboneConfig) -> Self {
        Self { per_site: vec![Vec::new(); config.num_sites()], model_dim: config.model_dim }
    }

    pub fn attach(&mut self, adapter: &'a LoraAdapter, trainable: bool) -> Result<()> {
        let idx = adapter.site.index();
        if idx >= self.per_site.len() {
            return Err(Error::Config(format!("site {} does not exist in this backbone", adapter.site)));
        }
        if adapter.a.cols() != self.model_dim || adapter.b.rows() != self.model_dim {
            return Err(Error::Dimension(format!(
                "adapter at {} has A {:?}, B {:?} for model width {}",
                adapter.site,
                adapter.a.shape(),
                adapter.b.shape(),
                self.model_dim
            )));
        }
        self.per_site[idx].push(Attached { adapter, trainable });
        Ok(())
    }

    /// Attaches every adapter of a set.
    pub fn attach_all(&mut self, adapters: impl IntoIterator<Item = &'a LoraAdapter>, trainable: bool) -> Result<()> {
        for a in adapters {
            self.attach(a, trainable)?;
        }
        Ok(())
    }

    pub fn at(&self, site: SiteId) -> &[Attached<'a>] {
        &self.per_site[site.index()]
    }

    pub fn count(&self) -> usize {
        self.per_site.iter().map(Vec::len).sum()
    }

    /// Trainable attachments in (site, attachment) order.
    pub fn trainable(&self) -> impl Iterator<Item = &'a LoraAdapter> + '_ {
        self.per_site.iter().flatten().filter(|a| a.trainable).map(|a| a.adapter)
    }
}
