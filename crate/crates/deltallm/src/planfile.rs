//! JSON plan files: `{strategy, sublayer, k, rank | rank_map, protected_blocks}`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use deltallm_core::delta::{PlanEntry, PlanStrategy, Rank, RankMap, SharingPlan};
use deltallm_core::model::{ModelConfig, WeightSite};
use deltallm_core::redundancy::{build_plan, ImportanceReport, PlanRequest, SublayerChoice};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum PlanFileError {
    #[error("cannot read plan {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("plan schema at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("plan field `{field}`: {message}")]
    Field { field: &'static str, message: String },
    #[error(transparent)]
    Model(#[from] deltallm_core::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanFile {
    pub strategy: PlanStrategy,
    #[serde(default)]
    pub sublayer: SublayerChoice,
    #[serde(default)]
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<Rank>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_map: Option<BTreeMap<WeightSite, Rank>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protected_blocks: Option<BTreeSet<usize>>,
    /// Required by, and only allowed with, the explicit strategy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entries: Option<Vec<PlanEntry>>,
}

impl PlanFile {
    pub fn parse(json: &str) -> Result<Self, PlanFileError> {
        let de = &mut serde_json::Deserializer::from_str(json);
        let pf: PlanFile = serde_path_to_error::deserialize(de).map_err(|e| PlanFileError::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        match (pf.strategy, &pf.entries) {
            (PlanStrategy::Explicit, None) => {
                return Err(PlanFileError::Field { field: "entries", message: "required by the explicit strategy".into() })
            }
            (s, Some(_)) if s != PlanStrategy::Explicit => {
                return Err(PlanFileError::Field { field: "entries", message: "only allowed with the explicit strategy".into() })
            }
            _ => {}
        }
        if let Some(Rank::Fixed(0)) = pf.rank {
            return Err(PlanFileError::Field { field: "rank", message: "must be positive".into() });
        }
        Ok(pf)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PlanFileError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| PlanFileError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    pub fn needs_report(&self) -> bool {
        self.strategy == PlanStrategy::Similarity
    }

    pub fn build(&self, config: &ModelConfig, report: Option<&ImportanceReport>) -> Result<SharingPlan, PlanFileError> {
        let plan = match &self.entries {
            Some(entries) => {
                let protected = self
                    .protected_blocks
                    .clone()
                    .unwrap_or_else(|| deltallm_core::delta::default_protected(config.n_layers));
                let plan = SharingPlan::new(PlanStrategy::Explicit, protected, entries.clone());
                plan.validate(config)?;
                plan
            }
            None => build_plan(
                config,
                &PlanRequest {
                    strategy: self.strategy,
                    sublayer: self.sublayer,
                    k: self.k,
                    protected_blocks: self.protected_blocks.clone(),
                },
                report,
            )?,
        };
        Ok(plan)
    }

    /// Rank map with `flag` taking precedence over the file's uniform rank. Without
    /// either, `rank_map` must cover every target of `plan`.
    pub fn ranks(&self, flag: Option<Rank>, plan: &SharingPlan) -> Result<RankMap, PlanFileError> {
        let overrides = self.rank_map.clone().unwrap_or_default();
        let default = match flag.or(self.rank) {
            Some(r) => r,
            None => {
                if let Some(t) = plan.targets().into_iter().find(|t| !overrides.contains_key(t)) {
                    return Err(PlanFileError::Field {
                        field: "rank",
                        message: format!("no rank for {t}; give `rank`, cover it in `rank_map` or pass --rank"),
                    });
                }
                Rank::Full
            }
        };
        Ok(RankMap { default, overrides })
    }
}
