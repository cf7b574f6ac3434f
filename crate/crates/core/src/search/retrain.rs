use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cellgraph::{DiscreteArch, Network, NetworkPlan};
use crate::costmodel::exact_cost;
use crate::data::reference::count_correct;
use crate::data::{cutout, epoch_batches, Dataset, Normalizer};
use crate::error::{Error, Result};
use crate::optim::{Sgd, SgdConfig};
use crate::tensor::Graph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: SgdConfig,
    /// Square cutout of side `image_size / 4` on every training batch.
    pub cutout: bool,
    pub seed: u64,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            optimizer: SgdConfig::default(),
            cutout: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrainMetrics {
    pub val_accuracy: f64,
    pub final_train_loss: f64,
    pub params: u64,
    pub flops: u64,
}

/// Trains the discrete network from scratch on `train` and scores it on `val`.
pub fn retrain_eval(
    arch: &DiscreteArch,
    plan: &NetworkPlan,
    train: &Dataset,
    val: &Dataset,
    cfg: &RetrainConfig,
) -> Result<RetrainMetrics> {
    arch.validate_for(&plan.space()?, &plan.kinds())?;
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.batch_size > train.len() {
        return Err(Error::Config(format!(
            "retrain needs positive epochs and a batch size within 1..={}",
            train.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Network::discrete(plan, arch, &mut rng)?;
    let norm = Normalizer::fit(train);
    let sizes: Vec<usize> = net.store().iter().map(|p| p.tensor.numel()).collect();
    let mut opt = Sgd::new(cfg.optimizer, &sizes);
    let mut last = f64::NAN;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        for idx in epoch_batches(train.len(), cfg.batch_size, epoch as u64, cfg.seed) {
            let (mut x, y) = train.batch(&idx, Some(&norm));
            if cfg.cutout {
                cutout(&mut x, (train.size / 4).max(1), &mut rng);
            }
            let mut g = Graph::new();
            let vars = net.store().bind(&mut g, true);
            let input = g.constant(x);
            let logits = net.forward(&mut g, &vars, None, input)?;
            let loss = g.cross_entropy(logits, &y)?;
            last = g.value(loss).data()[0];
            if !last.is_finite() {
                return Err(Error::NonFinite(format!("retrain step {step}: loss = {last}")));
            }
            g.backward(loss)?;
            let grads: Vec<Option<Vec<f64>>> = vars.iter().map(|&v| g.grad(v).map(<[f64]>::to_vec)).collect();
            for (slot, (p, gr)) in net.store_mut().iter_mut().zip(&grads).enumerate() {
                if let Some(gr) = gr {
                    opt.step(slot, p.tensor.data_mut(), gr);
                }
            }
            step += 1;
        }
    }
    let [params, flops] = exact_cost(arch, plan)?;
    Ok(RetrainMetrics {
        val_accuracy: evaluate(&net, val, &norm)?,
        final_train_loss: last,
        params,
        flops,
    })
}

/// Top-1 accuracy of a discrete network.
pub fn evaluate(net: &Network, ds: &Dataset, norm: &Normalizer) -> Result<f64> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(128) {
        let (x, y) = ds.batch(chunk, Some(norm));
        let mut g = Graph::new();
        let vars = net.store().bind(&mut g, false);
        let input = g.constant(x);
        let logits = net.forward(&mut g, &vars, None, input)?;
        correct += count_correct(g.value(logits), &y);
    }
    Ok(correct as f64 / ds.len().max(1) as f64)
}
