//! Datasets: synthetic generators, normalization and IDX ingestion.

use std::f64::consts::PI;
use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod idx;

/// Which part of an experiment a dataset plays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Test,
    Context,
    Ood,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Train => "train",
            Role::Test => "test",
            Role::Context => "context",
            Role::Ood => "ood",
        })
    }
}

/// Per-feature mean and standard deviation, fitted on a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Fits statistics on `train`; any other role is rejected.
    pub fn fit(train: &Dataset) -> Result<Self> {
        if train.role != Role::Train {
            return Err(Error::InvalidArgument(format!(
                "normalization statistics must come from the train role, got {}",
                train.role
            )));
        }
        let d = train.input_dim();
        let n = train.len() as f64;
        let mut mean = vec![0.0; d];
        for x in &train.inputs {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for x in &train.inputs {
            for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n).sqrt()).collect();
        Ok(Self { mean, std })
    }
}

/// Inputs with aligned integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// `[d]` for vectors, `[c, h, w]` for images.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub role: Role,
    pub stats: Option<NormStats>,
}

impl Dataset {
    pub fn new(
        inputs: Vec<Vec<f64>>,
        labels: Vec<usize>,
        input_shape: Vec<usize>,
        classes: usize,
        role: Role,
    ) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        let d: usize = input_shape.iter().product();
        if let Some(bad) = inputs.iter().position(|x| x.len() != d) {
            return Err(Error::InvalidArgument(format!(
                "input {bad} has {} features, expected {d}",
                inputs[bad].len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, {classes})"
            )));
        }
        Ok(Self {
            inputs,
            labels,
            input_shape,
            classes,
            role,
            stats: None,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    /// First `n` examples (or all, if fewer).
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            inputs: self.inputs[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone()
        }
    }

    /// `(x - mean) / max(std, 1e-8)` per feature using `stats`.
    pub fn normalize(&self, stats: &NormStats) -> Result<Self> {
        if stats.mean.len() != self.input_dim() {
            return Err(Error::InvalidArgument(format!(
                "statistics have {} features, dataset has {}",
                stats.mean.len(),
                self.input_dim()
            )));
        }
        let inputs = self
            .inputs
            .iter()
            .map(|x| {
                x.iter()
                    .zip(&stats.mean)
                    .zip(&stats.std)
                    .map(|((v, m), s)| (v - m) / s.max(1e-8))
                    .collect()
            })
            .collect();
        Ok(Self {
            inputs,
            stats: Some(stats.clone()),
            ..self.clone()
        })
    }
}

/// Two interleaved unit half-circles with Gaussian jitter. Class 0 is the
/// upper moon centred at the origin, class 1 the lower moon shifted to
/// `(1, -0.5)`.
pub fn make_two_moons(n: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let t = rng.random::<f64>() * PI;
        let (mut x, mut y) = if label == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        if noise > 0.0 {
            x += noise * rng.sample::<f64, _>(StandardNormal);
            y += noise * rng.sample::<f64, _>(StandardNormal);
        }
        inputs.push(vec![x, y]);
        labels.push(label);
    }
    Dataset::new(inputs, labels, vec![2], 2, Role::Train).expect("consistent by construction")
}

/// Centroid of the two-moons curves: the mean of both half-circle arcs.
pub const TWO_MOONS_CENTROID: [f64; 2] = [0.5, 0.25];

/// Points on a circle of `radius` around [`TWO_MOONS_CENTROID`], with
/// optional radial jitter. Labels are all zero.
pub fn make_ring_ood(n: usize, radius: f64, jitter: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [cx, cy] = TWO_MOONS_CENTROID;
    let inputs = (0..n)
        .map(|_| {
            let angle = rng.random::<f64>() * 2.0 * PI;
            let r = if jitter > 0.0 {
                radius + jitter * rng.sample::<f64, _>(StandardNormal)
            } else {
                radius
            };
            vec![cx + r * angle.cos(), cy + r * angle.sin()]
        })
        .collect();
    Dataset::new(inputs, vec![0; n], vec![2], 2, Role::Ood).expect("consistent by construction")
}

/// Isotropic Gaussian clusters, one class per centre, assigned round-robin.
pub fn make_blobs(n: usize, centers: &[Vec<f64>], std: f64, seed: u64) -> Dataset {
    assert!(!centers.is_empty(), "make_blobs needs at least one centre");
    let d = centers[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % centers.len();
        let x = centers[label]
            .iter()
            .map(|c| c + std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        inputs.push(x);
        labels.push(label);
    }
    Dataset::new(inputs, labels, vec![d], centers.len(), Role::Train)
        .expect("consistent by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_moons_lie_on_circles() {
        let data = make_two_moons(200, 0.0, 3);
        for (x, &l) in data.inputs.iter().zip(&data.labels) {
            let (cx, cy) = if l == 0 { (0.0, 0.0) } else { (1.0, 0.5) };
            let r = ((x[0] - cx).powi(2) + (x[1] - cy).powi(2)).sqrt();
            assert!((r - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ring_radius_exact_without_jitter() {
        let ring = make_ring_ood(100, 2.5, 0.0, 9);
        for x in &ring.inputs {
            let r = ((x[0] - 0.5).powi(2) + (x[1] - 0.25).powi(2)).sqrt();
            assert!((r - 2.5).abs() < 1e-9);
        }
    }

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(make_two_moons(50, 0.1, 4), make_two_moons(50, 0.1, 4));
        assert_ne!(make_two_moons(50, 0.1, 4), make_two_moons(50, 0.1, 5));
        assert_eq!(make_ring_ood(20, 3.5, 0.1, 1), make_ring_ood(20, 3.5, 0.1, 1));
        let c = vec![vec![0.0, 0.0], vec![3.0, 3.0]];
        assert_eq!(make_blobs(30, &c, 0.2, 2), make_blobs(30, &c, 0.2, 2));
    }

    #[test]
    fn normalizing_train_standardizes() {
        let train = make_two_moons(500, 0.1, 1);
        let stats = NormStats::fit(&train).unwrap();
        let z = train.normalize(&stats).unwrap();
        let n = z.len() as f64;
        for k in 0..2 {
            let mean: f64 = z.inputs.iter().map(|x| x[k]).sum::<f64>() / n;
            let var: f64 = z.inputs.iter().map(|x| (x[k] - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9);
            assert!((var.sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_feature_is_zeroed() {
        let inputs = vec![vec![1.0, 5.0], vec![2.0, 5.0], vec![3.0, 5.0]];
        let train = Dataset::new(inputs, vec![0, 1, 0], vec![2], 2, Role::Train).unwrap();
        let stats = NormStats::fit(&train).unwrap();
        let z = train.normalize(&stats).unwrap();
        assert!(z.inputs.iter().all(|x| x[1] == 0.0 && x[0].is_finite()));
    }

    #[test]
    fn ood_keeps_train_statistics() {
        let train = make_two_moons(300, 0.1, 1);
        let stats = NormStats::fit(&train).unwrap();
        let ood = make_ring_ood(300, 3.5, 0.0, 2).normalize(&stats).unwrap();
        assert_eq!(ood.stats.as_ref(), Some(&stats));
        let stats_ood = NormStats::fit(&ood.clone().with_role(Role::Train)).unwrap();
        assert!(stats_ood.mean.iter().any(|m| m.abs() > 1e-3));
    }

    #[test]
    fn stats_require_train_role() {
        let ood = make_ring_ood(10, 1.0, 0.0, 0);
        assert!(NormStats::fit(&ood).is_err());
    }

    #[test]
    fn rejects_out_of_range_labels() {
        assert!(Dataset::new(vec![vec![0.0]], vec![2], vec![1], 2, Role::Train).is_err());
    }
}
