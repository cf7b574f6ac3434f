//! Seeded synthetic image sets, splits, batching and the CIFAR-10 binary
//! reader.

mod cifar;
mod synth;
pub mod reference;

pub use cifar::{load_cifar10_binary, load_cifar10_dir, CIFAR_RECORD};
pub use synth::{gen_synthetic, Generator};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images stored as one flat `(n, c, h, w)` buffer with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub channels: usize,
    pub size: usize,
}

impl Dataset {
    pub fn new(images: Vec<f64>, labels: Vec<usize>, n_classes: usize, channels: usize, size: usize) -> Result<Self> {
        if images.len() != labels.len() * channels * size * size {
            return Err(Error::Config(format!(
                "{} pixel values for {} images of {channels}x{size}x{size}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Config(format!("label {l} out of range for {n_classes} classes")));
        }
        Ok(Self { images, labels, n_classes, channels, size })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        self.channels * self.size * self.size
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let d = self.image_len();
        &self.images[i * d..(i + 1) * d]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// New dataset holding the images at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Self {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            channels: self.channels,
            size: self.size,
        }
    }

    /// Stacks the images at `indices` into an `(n, c, s, s)` tensor,
    /// optionally normalized.
    pub fn batch(&self, indices: &[usize], norm: Option<&Normalizer>) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        if let Some(n) = norm {
            n.apply(&mut data, self.size * self.size);
        }
        let t = Tensor::new(vec![indices.len(), self.channels, self.size, self.size], data)
            .expect("batch shape matches data");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }
}

/// Fraction of images in the first part of a split, and the shuffle seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { fraction: 0.5, seed: 0 }
    }
}

/// Index lists of the two parts of a seeded split.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(spec.fraction > 0.0 && spec.fraction < 1.0) {
        return Err(Error::Config(format!("split fraction {} must lie in (0, 1)", spec.fraction)));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let k = (n as f64 * spec.fraction).round() as usize;
    let b = idx.split_off(k);
    Ok((idx, b))
}

/// Disjoint, exhaustive split of `ds`.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    let (a, b) = split_indices(ds.len(), spec)?;
    Ok((ds.subset(&a), ds.subset(&b)))
}

/// Per-channel standardization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(ds: &Dataset) -> Self {
        let hw = ds.size * ds.size;
        let mut sum = vec![0.0; ds.channels];
        let mut sq = vec![0.0; ds.channels];
        for img in ds.images.chunks(ds.image_len()) {
            for (c, plane) in img.chunks(hw).enumerate() {
                for &v in plane {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let n = (ds.len() * hw).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-8))
            .collect();
        Self { mean, std }
    }

    /// Standardizes a flat `(n, c, h, w)` buffer in place; `hw` is the
    /// plane size `h * w`.
    pub fn apply(&self, data: &mut [f64], hw: usize) {
        let c = self.mean.len();
        for (k, plane) in data.chunks_mut(hw).enumerate() {
            let ch = k % c;
            for v in plane {
                *v = (*v - self.mean[ch]) / self.std[ch];
            }
        }
    }
}

/// Zeroes a random `side x side` square (clipped at the border) in every
/// image of a `(n, c, h, w)` batch.
pub fn cutout<R: Rng>(batch: &mut Tensor, side: usize, rng: &mut R) {
    let s = batch.shape().to_vec();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let data = batch.data_mut();
    for b in 0..n {
        let cy = rng.gen_range(0..h) as isize;
        let cx = rng.gen_range(0..w) as isize;
        let half = (side / 2) as isize;
        let (y0, y1) = ((cy - half).max(0) as usize, ((cy - half + side as isize).min(h as isize)).max(0) as usize);
        let (x0, x1) = ((cx - half).max(0) as usize, ((cx - half + side as isize).min(w as isize)).max(0) as usize);
        for ch in 0..c {
            for y in y0..y1 {
                let row = ((b * c + ch) * h + y) * w;
                data[row + x0..row + x1].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

/// Shuffled batch order for `epoch`: a pure function of its arguments.
/// The trailing partial batch is dropped.
pub fn epoch_batches(n: usize, batch_size: usize, epoch: u64, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    idx.shuffle(&mut rng);
    idx.chunks_exact(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Endless stream of training batches that reshuffles at each epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchStream {
    pub n: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub epoch: u64,
    pub position: usize,
}

impl BatchStream {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > n {
            return Err(Error::Config(format!("batch size {batch_size} invalid for {n} examples")));
        }
        Ok(Self { n, batch_size, seed, epoch: 0, position: 0 })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let order = epoch_batches(self.n, self.batch_size, self.epoch, self.seed);
        if self.position >= order.len() {
            self.epoch += 1;
            self.position = 0;
            return self.next_batch();
        }
        let b = order[self.position].clone();
        self.position += 1;
        b
    }

    /// Batches per epoch.
    pub fn epoch_len(&self) -> usize {
        self.n / self.batch_size
    }
}

/// Where the search data come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub generator: Generator,
    pub n: usize,
    pub size: usize,
    pub classes: usize,
    pub seed: u64,
    /// Directory with the CIFAR-10 binary batches; replaces the generator.
    pub cifar_dir: Option<String>,
    pub split: SplitSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            generator: Generator::Shapes,
            n: 4096,
            size: 16,
            classes: 4,
            seed: 0,
            cifar_dir: None,
            split: SplitSpec::default(),
        }
    }
}

impl DataConfig {
    pub fn load(&self) -> Result<Dataset> {
        match &self.cifar_dir {
            Some(dir) => load_cifar10_dir(std::path::Path::new(dir), true),
            None => gen_synthetic(self.generator, self.n, self.size, self.classes, self.seed),
        }
    }

    /// Loads and splits into (architecture-train, architecture-val).
    pub fn load_split(&self) -> Result<(Dataset, Dataset)> {
        split(&self.load()?, &self.split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        let images = (0..n * 2 * 2 * 2).map(|i| (i % 7) as f64 / 7.0).collect();
        let labels = (0..n).map(|i| i % 3).collect();
        Dataset::new(images, labels, 3, 2, 2).unwrap()
    }

    #[test]
    fn split_sizes_and_union() {
        let ds = toy(1000);
        let (a, b) = split_indices(ds.len(), &SplitSpec::default()).unwrap();
        assert_eq!((a.len(), b.len()), (500, 500));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        let (c, _) = split_indices(ds.len(), &SplitSpec { seed: 1, ..Default::default() }).unwrap();
        assert_ne!(a, c);
        assert!(split_indices(10, &SplitSpec { fraction: 1.0, seed: 0 }).is_err());
        assert!(split_indices(10, &SplitSpec { fraction: 0.0, seed: 0 }).is_err());
    }

    #[test]
    fn normalizer_standardizes() {
        let ds = toy(50);
        let norm = Normalizer::fit(&ds);
        let (t, _) = ds.batch(&(0..50).collect::<Vec<_>>(), Some(&norm));
        let hw = 4;
        for c in 0..2 {
            let vals: Vec<f64> = t
                .data()
                .chunks(hw)
                .enumerate()
                .filter(|(k, _)| k % 2 == c)
                .flat_map(|(_, p)| p.iter().copied())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_order_is_pure() {
        assert_eq!(epoch_batches(100, 8, 3, 42), epoch_batches(100, 8, 3, 42));
        assert_ne!(epoch_batches(100, 8, 3, 42), epoch_batches(100, 8, 4, 42));
        assert_eq!(epoch_batches(100, 8, 0, 1).len(), 12);
        let mut s = BatchStream::new(20, 8, 5).unwrap();
        let first: Vec<Vec<usize>> = (0..4).map(|_| s.next_batch()).collect();
        assert_eq!(first[2], epoch_batches(20, 8, 1, 5)[0]);
        assert_eq!(s.epoch, 1);
    }

    #[test]
    fn cutout_zeroes_a_square() {
        let mut t = Tensor::full(&[1, 1, 8, 8], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        cutout(&mut t, 2, &mut rng);
        let zeros = t.data().iter().filter(|&&v| v == 0.0).count();
        assert!((1..=4).contains(&zeros));
    }
}
