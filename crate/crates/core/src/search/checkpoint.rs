use serde::{Deserialize, Serialize};

use super::{SearchSpec, TrainState};
use crate::cellgraph::ArchParams;
use crate::data::{BatchStream, Dataset, Normalizer};
use crate::error::{Error, Result};
use crate::optim::{Adam, Sgd};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Full search state at a round boundary, enough to resume bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub spec: SearchSpec,
    /// Next round to run.
    pub round: usize,
    pub w_steps: usize,
    pub theta_steps: usize,
    pub theta: ArchParams<f64>,
    pub weights: Vec<NamedTensor>,
    pub w_opt: Sgd,
    pub theta_opt: Adam,
    pub train_stream: BatchStream,
    pub val_stream: BatchStream,
    pub norm: Normalizer,
}

impl Checkpoint {
    pub fn capture(spec: &SearchSpec, state: &TrainState) -> Self {
        let weights = state
            .net
            .store()
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                data: p.tensor.data().to_vec(),
            })
            .collect();
        Self {
            version: CHECKPOINT_VERSION,
            spec: spec.clone(),
            round: state.round,
            w_steps: state.w_steps,
            theta_steps: state.theta_steps,
            theta: state.theta.clone(),
            weights,
            w_opt: state.w_opt.clone(),
            theta_opt: state.theta_opt.clone(),
            train_stream: state.train_stream.clone(),
            val_stream: state.val_stream.clone(),
            norm: state.norm.clone(),
        }
    }

    /// Rebuilds the training state; weights are matched by name and shape.
    pub fn restore(&self, train: &Dataset, val: &Dataset) -> Result<TrainState> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let mut state = TrainState::new(&self.spec.plan, &self.spec.search, train, val)?;
        if self.weights.len() != state.net.store().len() {
            return Err(Error::Config(format!(
                "checkpoint has {} weight tensors, network has {}",
                self.weights.len(),
                state.net.store().len()
            )));
        }
        for t in &self.weights {
            let store = state.net.store_mut();
            let id = store
                .lookup(&t.name)
                .ok_or_else(|| Error::Config(format!("checkpoint weight `{}` not in network", t.name)))?;
            let p = store.get_mut(id);
            if p.tensor.shape() != t.shape.as_slice() || t.data.len() != p.tensor.numel() {
                return Err(Error::Config(format!("checkpoint weight `{}` has the wrong shape", t.name)));
            }
            p.tensor.data_mut().copy_from_slice(&t.data);
        }
        if !self.theta.same_layout(&state.theta) {
            return Err(Error::Config("checkpoint logits do not match the plan".into()));
        }
        state.theta = self.theta.clone();
        state.w_opt = self.w_opt.clone();
        state.theta_opt = self.theta_opt.clone();
        state.train_stream = self.train_stream.clone();
        state.val_stream = self.val_stream.clone();
        state.norm = self.norm.clone();
        state.round = self.round;
        state.w_steps = self.w_steps;
        state.theta_steps = self.theta_steps;
        Ok(state)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
