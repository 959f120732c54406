//! Predictive quality and OOD discrimination metrics.
//!
//! OOD inputs are the positive class throughout; higher scores mean "more
//! likely OOD".

use std::fmt::Write as _;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{log_det_spd, psd_sqrt};
use crate::lla::{softmax, PredictiveGaussian};

pub const DEFAULT_MC_SAMPLES: usize = 1024;
pub const DEFAULT_ECE_BINS: usize = 15;
pub const PROB_FLOOR: f64 = 1e-12;
pub const ENTROPY_JITTER: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    InDistribution,
    Ood,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredExample {
    pub probs: Vec<f64>,
    pub label: usize,
    pub score: f64,
    pub origin: Origin,
}

impl ScoredExample {
    pub fn new(probs: Vec<f64>, label: usize, score: f64, origin: Origin) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("probabilities are not on the simplex (sum {sum})")));
        }
        if label >= probs.len() {
            return Err(Error::InvalidArgument(format!("label {label} out of range for {} classes", probs.len())));
        }
        Ok(Self {
            probs,
            label,
            score,
            origin,
        })
    }

    pub fn confidence(&self) -> f64 {
        self.probs[argmax(&self.probs)]
    }

    pub fn correct(&self) -> bool {
        argmax(&self.probs) == self.label
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean of `softmax(f)` over `samples` draws `f ~ N(mean, cov)`.
pub fn softmax_probs_mc(pred: &PredictiveGaussian, samples: usize, seed: u64) -> Result<Vec<f64>> {
    if samples == 0 {
        return Err(Error::InvalidArgument("softmax_probs_mc needs at least one sample".into()));
    }
    let c = pred.dim();
    if pred.covariance.iter().all(|&v| v == 0.0) {
        return Ok(softmax(pred.mean.as_slice()));
    }
    let root = psd_sqrt(&pred.covariance);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![0.0; c];
    let mut eps = DVector::zeros(c);
    for _ in 0..samples {
        for e in eps.iter_mut() {
            *e = rng.sample(StandardNormal);
        }
        let f = &pred.mean + &root * &eps;
        for (a, p) in acc.iter_mut().zip(softmax(f.as_slice())) {
            *a += p;
        }
    }
    let total: f64 = acc.iter().sum();
    Ok(acc.into_iter().map(|a| a / total).collect())
}

/// Mean of `−log probs[label]`, with probabilities clamped at 1e-12.
pub fn nll(scored: &[ScoredExample]) -> f64 {
    if scored.is_empty() {
        return 0.0;
    }
    scored.iter().map(|s| -s.probs[s.label].max(PROB_FLOOR).ln()).sum::<f64>() / scored.len() as f64
}

pub fn accuracy(scored: &[ScoredExample]) -> f64 {
    if scored.is_empty() {
        return 0.0;
    }
    scored.iter().filter(|s| s.correct()).count() as f64 / scored.len() as f64
}

/// Expected calibration error with `bins` equal-width confidence bins.
pub fn ece(scored: &[ScoredExample], bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(Error::InvalidArgument("ece needs at least one bin".into()));
    }
    if scored.is_empty() {
        return Ok(0.0);
    }
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut hits = vec![0.0; bins];
    for s in scored {
        let c = s.confidence();
        // bins are (lo, hi]; confidence 0 falls in the first bin
        let b = ((c * bins as f64).ceil() as usize).clamp(1, bins) - 1;
        count[b] += 1;
        conf[b] += c;
        hits[b] += if s.correct() { 1.0 } else { 0.0 };
    }
    let n = scored.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let k = count[b] as f64;
            k / n * (hits[b] / k - conf[b] / k).abs()
        })
        .sum())
}

/// Mann–Whitney AUC: `P(ood > in) + ½ P(ood = in)`.
pub fn auc_roc(scores_in: &[f64], scores_ood: &[f64]) -> Result<f64> {
    if scores_in.is_empty() || scores_ood.is_empty() {
        return Err(Error::InvalidArgument("auc_roc needs nonempty score lists".into()));
    }
    let mut sorted_in = scores_in.to_vec();
    sorted_in.sort_by(f64::total_cmp);
    // count wins and ties as integers so complementary calls sum to one
    let mut twice = 0u128;
    for &s in scores_ood {
        let below = sorted_in.partition_point(|&v| v < s);
        let not_above = sorted_in.partition_point(|&v| v <= s);
        twice += 2 * below as u128 + (not_above - below) as u128;
    }
    let pairs = 2 * scores_in.len() as u128 * scores_ood.len() as u128;
    Ok(twice as f64 / pairs as f64)
}

/// `−Σ p log p` with `0 log 0 = 0`.
pub fn softmax_entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// `½ log det(2πe (Σ + εI))`.
pub fn gaussian_entropy(pred: &PredictiveGaussian) -> Result<f64> {
    let c = pred.dim();
    let mut cov = pred.covariance.clone();
    for i in 0..c {
        cov[(i, i)] += ENTROPY_JITTER;
    }
    let two_pi_e = 2.0 * std::f64::consts::PI * std::f64::consts::E;
    Ok(0.5 * (c as f64 * two_pi_e.ln() + log_det_spd(&cov, "predictive covariance")?))
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: String,
    pub acc: f64,
    pub nll: f64,
    pub ece: f64,
    pub auc: f64,
    /// Absent for methods without a Gaussian predictive.
    pub gaussian_auc: Option<f64>,
}

/// Fixed-width table: ACC as a percentage with 2 decimals, the rest with 4.
pub fn format_table(rows: &[MethodMetrics]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<16}{:>9}{:>9}{:>9}{:>9}{:>14}", "method", "ACC", "NLL", "ECE", "AUC", "Gaussian-AUC");
    for r in rows {
        let gauss = r.gaussian_auc.map_or_else(|| "--".to_string(), |g| format!("{g:.4}"));
        let _ = writeln!(
            out,
            "{:<16}{:>9.2}{:>9.4}{:>9.4}{:>9.4}{:>14}",
            r.method,
            100.0 * r.acc,
            r.nll,
            r.ece,
            r.auc,
            gauss
        );
    }
    out
}

/// `method.metric = value` lines, full precision.
pub fn format_key_values(rows: &[MethodMetrics]) -> String {
    let mut out = String::new();
    for r in rows {
        let _ = writeln!(out, "{}.acc = {:?}", r.method, r.acc);
        let _ = writeln!(out, "{}.nll = {:?}", r.method, r.nll);
        let _ = writeln!(out, "{}.ece = {:?}", r.method, r.ece);
        let _ = writeln!(out, "{}.auc = {:?}", r.method, r.auc);
        if let Some(g) = r.gaussian_auc {
            let _ = writeln!(out, "{}.gaussian_auc = {:?}", r.method, g);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn ex(probs: &[f64], label: usize) -> ScoredExample {
        ScoredExample::new(probs.to_vec(), label, 0.0, Origin::InDistribution).unwrap()
    }

    fn pair_enumeration(a: &[f64], b: &[f64]) -> f64 {
        let mut total = 0.0;
        for x in a {
            for y in b {
                total += if y > x { 1.0 } else if y == x { 0.5 } else { 0.0 };
            }
        }
        total / (a.len() * b.len()) as f64
    }

    fn gauss(mean: &[f64], cov: DMatrix<f64>) -> PredictiveGaussian {
        PredictiveGaussian::new(mean.to_vec(), cov).unwrap()
    }

    #[test]
    fn zero_covariance_is_plain_softmax() {
        let p = gauss(&[1.0, -0.5, 2.0], DMatrix::zeros(3, 3));
        for s in [1, 7] {
            assert_eq!(softmax_probs_mc(&p, s, 3).unwrap(), softmax(&[1.0, -0.5, 2.0]));
        }
        assert!(softmax_probs_mc(&p, 0, 3).is_err());
    }

    #[test]
    fn symmetric_logits_average_to_half() {
        let p = gauss(&[0.0, 0.0], DMatrix::identity(2, 2) * 4.0);
        let s = 20_000;
        let probs = softmax_probs_mc(&p, s, 1).unwrap();
        // a single softmax coordinate lies in [0, 1], so its sd is at most ½
        assert!((probs[0] - 0.5).abs() < 3.0 * 0.5 / (s as f64).sqrt());
        assert_eq!(probs, softmax_probs_mc(&p, s, 1).unwrap());
        assert_ne!(probs, softmax_probs_mc(&p, s, 2).unwrap());
    }

    #[test]
    fn mc_matches_quadrature_reference() {
        // C = 2, mean [1, 0], cov I: p0 = E[σ(f0 − f1)] with f0 − f1 ~ N(1, 2)
        let n = 200_000;
        let h = 16.0 / n as f64;
        let sd = 2f64.sqrt();
        let reference: f64 = (0..n)
            .map(|k| {
                let t = -8.0 + (k as f64 + 0.5) * h;
                let d = 1.0 + sd * t;
                (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt() / (1.0 + (-d).exp()) * h
            })
            .sum();
        let p = gauss(&[1.0, 0.0], DMatrix::identity(2, 2));
        let s = 100_000;
        let probs = softmax_probs_mc(&p, s, 4).unwrap();
        assert!((probs[0] - reference).abs() < 3.0 * 0.5 / (s as f64).sqrt(), "{} vs {reference}", probs[0]);
    }

    #[test]
    fn nll_cases() {
        assert!(nll(&[ex(&[1.0, 0.0], 0), ex(&[0.0, 1.0], 1)]) <= 1e-11);
        let u = vec![0.1; 10];
        assert!((nll(&[ex(&u, 3)]) - 10f64.ln()).abs() < 1e-12);
        let two = [ex(&[0.5, 0.5], 0), ex(&[0.25, 0.75], 0)];
        assert!((nll(&two) - (2f64.ln() + 4f64.ln()) / 2.0).abs() < 1e-12);
        assert!((nll(&[ex(&[1.0, 0.0], 1)]) - -(1e-12f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn ece_cases() {
        let right = [ex(&[1.0, 0.0], 0), ex(&[0.0, 1.0], 1)];
        assert_eq!(ece(&right, 15).unwrap(), 0.0);
        let wrong = [ex(&[1.0, 0.0], 1), ex(&[0.0, 1.0], 0)];
        assert_eq!(ece(&wrong, 15).unwrap(), 1.0);
        let hand = [
            ex(&[0.6, 0.4], 0),
            ex(&[0.6, 0.4], 1),
            ex(&[0.9, 0.1], 0),
            ex(&[0.9, 0.1], 0),
        ];
        assert!((ece(&hand, 10).unwrap() - 0.10).abs() < 1e-12);
        assert!(ece(&hand, 0).is_err());
    }

    #[test]
    fn calibrated_oracle_has_small_ece() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 20_000;
        let scored: Vec<_> = (0..n)
            .map(|_| {
                let c: f64 = rand::Rng::random_range(&mut rng, 0.5..1.0);
                let label = if rand::Rng::random::<f64>(&mut rng) < c { 0 } else { 1 };
                ex(&[c, 1.0 - c], label)
            })
            .collect();
        assert!(ece(&scored, 15).unwrap() <= 1.0 / (n as f64).sqrt() * 3.0);
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc_roc(&[0.0, 1.0], &[2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(auc_roc(&[1.0, 1.0], &[1.0]).unwrap(), 0.5);
        let (i, o) = ([1.0, 2.0, 3.0], [2.0, 3.0, 4.0]);
        let a = auc_roc(&i, &o).unwrap();
        assert_eq!(a, pair_enumeration(&i, &o));
        // 6 wins and 2 ties over 9 pairs
        assert!((a - 7.0 / 9.0).abs() < 1e-15);
        assert!(auc_roc(&[], &[1.0]).is_err());
    }

    #[test]
    fn entropy_cases() {
        assert!((softmax_entropy(&[0.1; 10]) - 10f64.ln()).abs() < 1e-12);
        assert_eq!(softmax_entropy(&[0.0, 1.0, 0.0]), 0.0);
        let g = gaussian_entropy(&gauss(&[0.0, 0.0], DMatrix::identity(2, 2))).unwrap();
        let want = (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
        assert!((g - want).abs() < 1e-7);
        // rank-deficient covariance stays finite thanks to the jitter
        assert!(gaussian_entropy(&gauss(&[0.0, 0.0], DMatrix::zeros(2, 2))).unwrap().is_finite());
    }

    #[test]
    fn report_formats() {
        let rows = vec![
            MethodMetrics {
                method: "map".into(),
                acc: 0.9123,
                nll: 0.25,
                ece: 0.01234,
                auc: 0.7,
                gaussian_auc: None,
            },
            MethodMetrics {
                method: "lla-exact".into(),
                acc: 1.0,
                nll: 0.2,
                ece: 0.0,
                auc: 0.8,
                gaussian_auc: Some(0.95),
            },
        ];
        let t = format_table(&rows);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].contains("91.23") && lines[1].contains("0.0123") && lines[1].trim_end().ends_with("--"));
        assert!(lines[2].contains("100.00") && lines[2].ends_with("0.9500"));
        let kv = format_key_values(&rows);
        assert!(!kv.contains("map.gaussian_auc"));
        assert!(kv.contains("lla-exact.gaussian_auc = 0.95"));
    }

    fn psd(c: usize) -> impl Strategy<Value = DMatrix<f64>> {
        proptest::collection::vec(-2.0f64..2.0, c * c).prop_map(move |v| {
            let a = DMatrix::from_vec(c, c, v);
            &a * a.transpose()
        })
    }

    proptest! {
        #[test]
        fn auc_complement(a in proptest::collection::vec(-5i32..5, 1..20), b in proptest::collection::vec(-5i32..5, 1..20)) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            prop_assert_eq!(auc_roc(&a, &b).unwrap() + auc_roc(&b, &a).unwrap(), 1.0);
            prop_assert!((auc_roc(&a, &b).unwrap() - pair_enumeration(&a, &b)).abs() < 1e-12);
        }

        #[test]
        fn auc_monotone_invariance(a in proptest::collection::vec(-3.0f64..3.0, 1..20), b in proptest::collection::vec(-3.0f64..3.0, 1..20)) {
            let t = |v: &[f64]| v.iter().map(|x| x.exp() * 3.0 - 1.0).collect::<Vec<_>>();
            prop_assert_eq!(auc_roc(&a, &b).unwrap(), auc_roc(&t(&a), &t(&b)).unwrap());
        }

        #[test]
        fn mc_probs_on_simplex(mean in proptest::collection::vec(-5.0f64..5.0, 3), cov in psd(3), s in 1usize..50, seed in 0u64..100) {
            let p = softmax_probs_mc(&gauss(&mean, cov), s, seed).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn gaussian_entropy_monotone(a in psd(3), b in psd(3)) {
            let e1 = gaussian_entropy(&gauss(&[0.0; 3], a.clone())).unwrap();
            let e2 = gaussian_entropy(&gauss(&[0.0; 3], a + b)).unwrap();
            prop_assert!(e1 <= e2 + 1e-9);
        }
    }
}
