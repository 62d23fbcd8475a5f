//! Synthetic Gaussian-cluster classification data.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::model::{predict, LayerStack, WeightSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub seed: u64,
    pub samples: usize,
    pub batch_size: usize,
    /// Distance scale between class centres.
    pub separation: f64,
    /// Standard deviation of samples around their centre.
    pub spread: f64,
    pub validation_fraction: f64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            seed: 7,
            samples: 2000,
            batch_size: 32,
            separation: 1.0,
            spread: 1.0,
            validation_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    dim: usize,
    classes: usize,
    batch_size: usize,
    seed: u64,
    train_x: Vec<f64>,
    train_y: Vec<usize>,
    val_x: Vec<f64>,
    val_y: Vec<usize>,
}

impl Dataset {
    /// Class centres drawn from N(0, separation²), samples from N(centre, spread²).
    pub fn generate(spec: &DataSpec, dim: usize, classes: usize) -> Result<Self, ModelError> {
        if spec.samples < 2 || spec.batch_size == 0 || classes < 2 || dim == 0 {
            return Err(ModelError::Invalid(
                "dataset needs samples, a batch size, features and two classes".into(),
            ));
        }
        if !(0.0..1.0).contains(&spec.validation_fraction) || spec.spread <= 0.0 {
            return Err(ModelError::Invalid(
                "validation fraction must be in [0,1) and spread positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let centre =
            Normal::new(0.0, spec.separation).map_err(|e| ModelError::Invalid(e.to_string()))?;
        let noise =
            Normal::new(0.0, spec.spread).map_err(|e| ModelError::Invalid(e.to_string()))?;
        let centres: Vec<Vec<f64>> = (0..classes)
            .map(|_| (0..dim).map(|_| centre.sample(&mut rng)).collect())
            .collect();
        let mut x = Vec::with_capacity(spec.samples * dim);
        let mut y = Vec::with_capacity(spec.samples);
        for i in 0..spec.samples {
            let c = i % classes;
            for d in 0..dim {
                x.push(centres[c][d] + noise.sample(&mut rng));
            }
            y.push(c);
        }
        let mut order: Vec<usize> = (0..spec.samples).collect();
        order.shuffle(&mut rng);
        let n_val = ((spec.samples as f64) * spec.validation_fraction).round() as usize;
        let n_val = n_val.min(spec.samples - 1);
        let (val_idx, train_idx) = order.split_at(n_val);
        let gather = |idx: &[usize]| {
            let mut xs = Vec::with_capacity(idx.len() * dim);
            let mut ys = Vec::with_capacity(idx.len());
            for &i in idx {
                xs.extend_from_slice(&x[i * dim..(i + 1) * dim]);
                ys.push(y[i]);
            }
            (xs, ys)
        };
        let (train_x, train_y) = gather(train_idx);
        let (val_x, val_y) = gather(val_idx);
        Ok(Dataset {
            dim,
            classes,
            batch_size: spec.batch_size.min(train_y.len()),
            seed: spec.seed,
            train_x,
            train_y,
            val_x,
            val_y,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn train_len(&self) -> usize {
        self.train_y.len()
    }

    pub fn batches_per_epoch(&self) -> i64 {
        (self.train_y.len() / self.batch_size).max(1) as i64
    }

    /// Batch `b` of the global sequence. Each epoch visits the training set in
    /// its own seeded order, so any batch can be regenerated after a reset.
    pub fn batch(&self, b: i64) -> (Tensor, Vec<usize>) {
        let bpe = self.batches_per_epoch();
        let epoch = b.max(0) / bpe;
        let within = (b.max(0) % bpe) as usize;
        let mut order: Vec<usize> = (0..self.train_y.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9e37_79b9_7f4a_7c15 ^ (epoch as u64));
        order.shuffle(&mut rng);
        let idx = &order[within * self.batch_size..(within + 1) * self.batch_size];
        let mut xs = Vec::with_capacity(idx.len() * self.dim);
        let mut ys = Vec::with_capacity(idx.len());
        for &i in idx {
            xs.extend_from_slice(&self.train_x[i * self.dim..(i + 1) * self.dim]);
            ys.push(self.train_y[i]);
        }
        (Tensor::from_parts(vec![idx.len(), self.dim], xs), ys)
    }

    pub fn validation(&self) -> (Tensor, Vec<usize>) {
        (
            Tensor::from_parts(vec![self.val_y.len(), self.dim], self.val_x.clone()),
            self.val_y.clone(),
        )
    }

    /// Fraction of validation samples classified correctly.
    pub fn accuracy(&self, stack: &LayerStack, weights: &WeightSet) -> Result<f64, ModelError> {
        let (x, y) = self.validation();
        if y.is_empty() {
            return Ok(0.0);
        }
        let pred = predict(stack, weights, &x)?;
        let hits = pred.iter().zip(&y).filter(|(p, t)| p == t).count();
        Ok(hits as f64 / y.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let spec = DataSpec {
            samples: 100,
            batch_size: 8,
            ..Default::default()
        };
        let a = Dataset::generate(&spec, 4, 3).unwrap();
        let b = Dataset::generate(&spec, 4, 3).unwrap();
        assert_eq!(a.batch(17), b.batch(17));
        assert_eq!(a.train_len() + a.validation().1.len(), 100);
        assert_eq!(a.batches_per_epoch(), 10);
        let (x, y) = a.batch(3);
        assert_eq!(x.shape(), &[8, 4]);
        assert!(y.iter().all(|c| *c < 3));
        // different epochs visit different orders
        assert_ne!(a.batch(0), a.batch(10));
    }

    #[test]
    fn rejects_bad_specs() {
        let spec = DataSpec {
            validation_fraction: 1.5,
            ..Default::default()
        };
        assert!(Dataset::generate(&spec, 4, 3).is_err());
    }
}
