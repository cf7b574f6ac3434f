//! Small fixed models used to calibrate the synthetic datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{epoch_batches, Dataset, Normalizer};
use crate::error::{Error, Result};
use crate::optim::{Sgd, SgdConfig};
use crate::tensor::{ConvAttrs, Graph, Tensor, Var};

struct Model {
    params: Vec<Tensor>,
    conv: bool,
}

fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).unwrap()
}

impl Model {
    /// Two ReLU conv layers (16 and 32 channels), pooled linear head.
    fn convnet<R: Rng>(c: usize, k: usize, rng: &mut R) -> Self {
        let params = vec![
            uniform(&[16, c, 3, 3], (6.0 / (9 * c) as f64).sqrt(), rng),
            Tensor::full(&[16], 1.0),
            Tensor::zeros(&[16]),
            uniform(&[32, 16, 3, 3], (6.0 / 144.0f64).sqrt(), rng),
            Tensor::full(&[32], 1.0),
            Tensor::zeros(&[32]),
            uniform(&[k, 32], 1.0 / 32f64.sqrt(), rng),
            Tensor::zeros(&[k]),
        ];
        Self { params, conv: true }
    }

    /// Softmax regression on raw (normalized) pixels.
    fn linear<R: Rng>(d: usize, k: usize, rng: &mut R) -> Self {
        let params = vec![uniform(&[k, d], 1.0 / (d as f64).sqrt(), rng), Tensor::zeros(&[k])];
        Self { params, conv: false }
    }

    fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        if !self.conv {
            let shape = g.shape(x).to_vec();
            let flat = g.constant(Tensor::new(
                vec![shape[0], shape[1..].iter().product()],
                g.value(x).data().to_vec(),
            )?);
            return g.linear(flat, p[0], Some(p[1]));
        }
        let h = g.conv2d(x, p[0], ConvAttrs::same(3, 1, 1, 1))?;
        let h = g.batch_norm(h, p[1], p[2], 1e-5)?;
        let h = g.relu(h);
        let h = g.max_pool(h, 2, 2, 0)?;
        let h = g.conv2d(h, p[3], ConvAttrs::same(3, 1, 1, 1))?;
        let h = g.batch_norm(h, p[4], p[5], 1e-5)?;
        let h = g.relu(h);
        let h = g.global_avg_pool(h)?;
        g.linear(h, p[6], Some(p[7]))
    }
}

fn fit_and_score(mut model: Model, train: &Dataset, val: &Dataset, epochs: usize, lr: f64, seed: u64) -> Result<f64> {
    if train.n_classes != val.n_classes || train.channels != val.channels || train.size != val.size {
        return Err(Error::Config("train and validation sets disagree in shape".into()));
    }
    let norm = Normalizer::fit(train);
    let sizes: Vec<usize> = model.params.iter().map(Tensor::numel).collect();
    let cfg = SgdConfig { lr, momentum: 0.9, weight_decay: 3e-4 };
    let mut opt = Sgd::<f64>::new(cfg, &sizes);
    let batch = 32.min(train.len());
    for epoch in 0..epochs {
        for idx in epoch_batches(train.len(), batch, epoch as u64, seed) {
            let (x, y) = train.batch(&idx, Some(&norm));
            let mut g = Graph::new();
            let p: Vec<Var> = model.params.iter().map(|t| g.leaf(t.clone(), true)).collect();
            let xv = g.constant(x);
            let logits = model.forward(&mut g, &p, xv)?;
            let loss = g.cross_entropy(logits, &y)?;
            g.backward(loss)?;
            for (slot, (t, &v)) in model.params.iter_mut().zip(&p).enumerate() {
                if let Some(gr) = g.grad(v) {
                    opt.step(slot, t.data_mut(), gr);
                }
            }
        }
    }
    accuracy(&model, val, &norm)
}

fn accuracy(model: &Model, ds: &Dataset, norm: &Normalizer) -> Result<f64> {
    let mut correct = 0;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(128) {
        let (x, y) = ds.batch(chunk, Some(norm));
        let mut g = Graph::new();
        let p: Vec<Var> = model.params.iter().map(|t| g.constant(t.clone())).collect();
        let xv = g.constant(x);
        let logits = model.forward(&mut g, &p, xv)?;
        correct += count_correct(g.value(logits), &y);
    }
    Ok(correct as f64 / ds.len().max(1) as f64)
}

/// Rows of `logits (n, k)` whose argmax equals the label.
pub fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            best == l
        })
        .count()
}

/// Validation accuracy of the two-layer reference convnet.
pub fn convnet_accuracy(train: &Dataset, val: &Dataset, epochs: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::convnet(train.channels, train.n_classes, &mut rng);
    fit_and_score(model, train, val, epochs, 0.05, seed)
}

/// Validation accuracy of a linear classifier on raw pixels.
pub fn linear_accuracy(train: &Dataset, val: &Dataset, epochs: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = train.channels * train.size * train.size;
    let model = Model::linear(d, train.n_classes, &mut rng);
    fit_and_score(model, train, val, epochs, 0.01, seed)
}
