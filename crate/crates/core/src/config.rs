//! The JSON run configuration shared by every command.

use serde::{Deserialize, Serialize};

use crate::cellgraph::NetworkPlan;
use crate::costmodel::{ConstraintBox, CostScope};
use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::oracle::DEFAULT_CEILING;
use crate::projection::ProjectionConfig;
use crate::search::{RetrainConfig, SearchConfig, SearchSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub ceiling: u64,
    /// Score every architecture by a short retrain; costs only otherwise.
    pub score: bool,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { ceiling: DEFAULT_CEILING, score: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub plan: NetworkPlan,
    pub constraints: ConstraintBox,
    pub projection: ProjectionConfig,
    pub search: SearchConfig,
    pub scope: CostScope,
    pub retrain: RetrainConfig,
    pub oracle: OracleConfig,
    pub output_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            plan: NetworkPlan::default(),
            constraints: ConstraintBox::unbounded(),
            projection: ProjectionConfig::default(),
            search: SearchConfig::default(),
            scope: CostScope::TopK,
            retrain: RetrainConfig::default(),
            oracle: OracleConfig::default(),
            output_dir: None,
        }
    }
}

impl RunConfig {
    /// Parses and validates; errors carry the JSON path of the offending key.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Schema { path, msg: e.into_inner().to_string() }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        self.search_spec().validate()?;
        let d = &self.data;
        if d.cifar_dir.is_none() && (d.size != self.plan.image_size || d.classes != self.plan.n_classes) {
            return Err(Error::Schema {
                path: "data".into(),
                msg: format!(
                    "data is {0}x{0} with {1} classes but the plan expects {2}x{2} with {3}",
                    d.size, d.classes, self.plan.image_size, self.plan.n_classes
                ),
            });
        }
        if !(d.split.fraction > 0.0 && d.split.fraction < 1.0) {
            return Err(Error::Schema { path: "data.split.fraction".into(), msg: "must lie in (0, 1)".into() });
        }
        if self.retrain.epochs == 0 || self.retrain.batch_size == 0 {
            return Err(Error::Schema { path: "retrain".into(), msg: "epochs and batch_size must be positive".into() });
        }
        Ok(())
    }

    pub fn search_spec(&self) -> SearchSpec {
        SearchSpec {
            plan: self.plan.clone(),
            search: self.search.clone(),
            projection: self.projection,
            scope: self.scope,
            constraints: self.constraints,
        }
    }
}
