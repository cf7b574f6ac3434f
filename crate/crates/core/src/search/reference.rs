//! Plain first-order DARTS: alternate one weight step on a training batch and
//! one logit step on a validation batch, with no rounds and no projection.
//! Built directly on the graph and optimizers; the constrained loop must
//! reduce to this when its box is inert.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::SearchConfig;
use crate::cellgraph::{ArchParams, MixWeights, Network, NetworkPlan};
use crate::data::{BatchStream, Dataset, Normalizer};
use crate::error::{Error, Result};
use crate::optim::{Adam, Sgd};
use crate::tensor::Graph;

#[derive(Debug, Clone)]
pub struct DartsTrace {
    /// Logits after every step.
    pub thetas: Vec<ArchParams<f64>>,
    pub net: Network,
}

pub fn darts_reference(
    plan: &NetworkPlan,
    cfg: &SearchConfig,
    train: &Dataset,
    val: &Dataset,
    steps: usize,
) -> Result<DartsTrace> {
    let (s_init, s_train, s_val) = cfg.seeds();
    let mut rng = ChaCha8Rng::seed_from_u64(s_init);
    let mut net = Network::supernet(plan, &mut rng)?;
    let space = plan.space()?;
    let mut theta = ArchParams::<f64>::random(&space, &plan.kinds(), cfg.theta_init, &mut rng);
    let sizes: Vec<usize> = net.store().iter().map(|p| p.tensor.numel()).collect();
    let mut w_opt = Sgd::new(cfg.w_optimizer, &sizes);
    let mut a_opt = Adam::new(cfg.theta_optimizer, &[theta.len()]);
    let mut train_batches = BatchStream::new(train.len(), cfg.batch_size, s_train)?;
    let mut val_batches = BatchStream::new(val.len(), cfg.batch_size, s_val)?;
    let norm = Normalizer::fit(train);
    let mut thetas = Vec::with_capacity(steps);

    for step in 0..steps {
        let (x, y) = train.batch(&train_batches.next_batch(), Some(&norm));
        let (xv, yv) = val.batch(&val_batches.next_batch(), Some(&norm));

        let mut g = Graph::new();
        let w = net.store().bind(&mut g, true);
        let mix = MixWeights::bind(&mut g, &theta, false);
        let input = g.constant(x);
        let logits = net.forward(&mut g, &w, Some(&mix), input)?;
        let loss = g.cross_entropy(logits, &y)?;
        if !g.value(loss).data()[0].is_finite() {
            return Err(Error::NonFinite(format!("reference weight step {step}")));
        }
        g.backward(loss)?;
        let grads: Vec<Option<Vec<f64>>> = w.iter().map(|&v| g.grad(v).map(<[f64]>::to_vec)).collect();
        for (slot, (p, gr)) in net.store_mut().iter_mut().zip(&grads).enumerate() {
            if let Some(gr) = gr {
                w_opt.step(slot, p.tensor.data_mut(), gr);
            }
        }

        let mut g = Graph::new();
        let w = net.store().bind(&mut g, false);
        let mix = MixWeights::bind(&mut g, &theta, true);
        let input = g.constant(xv);
        let logits = net.forward(&mut g, &w, Some(&mix), input)?;
        let loss = g.cross_entropy(logits, &yv)?;
        if !g.value(loss).data()[0].is_finite() {
            return Err(Error::NonFinite(format!("reference logit step {step}")));
        }
        g.backward(loss)?;
        let grad = mix.theta_grad(&g, &theta).to_flat();
        let mut flat = theta.to_flat();
        a_opt.step(0, &mut flat, &grad);
        theta.set_flat(&flat);
        thetas.push(theta.clone());
    }
    Ok(DartsTrace { thetas, net })
}
