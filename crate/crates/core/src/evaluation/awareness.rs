//! Sensitivity of a model to its images: per-instance F1 with the true image
//! minus F1 with another instance's image.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{full_length_tags, instance_attribute_f1, instance_value_f1, predict_all};
use crate::dataio::Instance;
use crate::error::{Error, Result};
use crate::model::{GateOverride, Model, Prediction};
use crate::numerics::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AwarenessConfig {
    pub permutations: usize,
    pub seed: u64,
    /// Monte Carlo sign-flip resamples per permutation test.
    pub resamples: usize,
    /// Test hook: pair every instance with its own image.
    #[serde(default)]
    pub identity: bool,
}

impl Default for AwarenessConfig {
    fn default() -> Self {
        AwarenessConfig { permutations: 8, seed: 0, resamples: 4999, identity: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubtaskAwareness {
    /// Mean per-instance F1 with congruent images.
    pub congruent_f1: f64,
    /// Mean per-instance F1 with incongruent images, one entry per permutation.
    pub incongruent_f1: Vec<f64>,
    /// Mean of `a_i` over instances, one entry per permutation.
    pub deltas: Vec<f64>,
    pub delta_mean: f64,
    pub delta_std: f64,
    /// One-sided paired sign-flip p-value per permutation.
    pub p_values: Vec<f64>,
    /// `-2 Σ ln p`, chi-square with `2 × permutations` degrees of freedom.
    pub fisher_statistic: f64,
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AwarenessReport {
    pub instances: usize,
    pub permutations: usize,
    pub value: SubtaskAwareness,
    pub attribute: SubtaskAwareness,
}

/// Uniformly random permutation without fixed points (rejection sampling).
pub fn derangement<R: Rng>(n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::contract(format!("a derangement needs at least 2 instances, got {n}")));
    }
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, &j)| i != j) {
            return Ok(p);
        }
    }
}

/// One-sided p-value for `mean(diffs) > 0` by random sign flips.
pub fn sign_flip_test<R: Rng>(diffs: &[f64], resamples: usize, rng: &mut R) -> f64 {
    let observed: f64 = diffs.iter().sum();
    let mut hits = 0usize;
    for _ in 0..resamples {
        let s: f64 = diffs.iter().map(|&d| if rng.random_bool(0.5) { d } else { -d }).sum();
        if s >= observed {
            hits += 1;
        }
    }
    (1 + hits) as f64 / (1 + resamples) as f64
}

/// Survival function of a chi-square variable with `2k` degrees of freedom.
pub fn chi2_sf_even(x: f64, k: usize) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for i in 1..k {
        term *= half / i as f64;
        sum += term;
    }
    ((-half).exp() * sum).min(1.0)
}

/// Fisher's combination of independent p-values: `(statistic, combined p)`.
pub fn fisher_combine(p_values: &[f64]) -> (f64, f64) {
    let stat = -2.0 * p_values.iter().map(|p| p.ln()).sum::<f64>();
    (stat, chi2_sf_even(stat, p_values.len()))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

fn per_instance(data: &[Instance], preds: &[Prediction]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut value = Vec::with_capacity(data.len());
    let mut attr = Vec::with_capacity(data.len());
    for (inst, p) in data.iter().zip(preds) {
        value.push(instance_value_f1(&full_length_tags(p, inst.tags.len()), &inst.tags)?);
        attr.push(instance_attribute_f1(&p.attributes, &inst.attributes));
    }
    Ok((value, attr))
}

fn summarise(congruent: &[f64], incongruent: &[Vec<f64>], resamples: usize, rng: &mut ChaCha8Rng) -> SubtaskAwareness {
    let n = congruent.len() as f64;
    let mut deltas = Vec::new();
    let mut p_values = Vec::new();
    let mut inc_means = Vec::new();
    for inc in incongruent {
        let diffs: Vec<f64> = congruent.iter().zip(inc).map(|(c, i)| c - i).collect();
        deltas.push(diffs.iter().sum::<f64>() / n);
        inc_means.push(inc.iter().sum::<f64>() / n);
        p_values.push(sign_flip_test(&diffs, resamples, rng));
    }
    let (delta_mean, delta_std) = mean_std(&deltas);
    let (fisher_statistic, p_value) = fisher_combine(&p_values);
    SubtaskAwareness {
        congruent_f1: congruent.iter().sum::<f64>() / n,
        incongruent_f1: inc_means,
        deltas,
        delta_mean,
        delta_std,
        p_values,
        fisher_statistic,
        p_value,
    }
}

pub fn awareness<T: Real>(model: &Model<T>, data: &[Instance], cfg: &AwarenessConfig) -> Result<AwarenessReport> {
    if data.len() < 2 {
        return Err(Error::contract(format!("awareness needs at least 2 instances, got {}", data.len())));
    }
    if cfg.permutations == 0 {
        return Err(Error::contract("awareness needs at least one permutation"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let none = GateOverride::default();
    let (value_c, attr_c) = per_instance(data, &predict_all(model, data, &none)?)?;
    let mut value_i = Vec::new();
    let mut attr_i = Vec::new();
    for _ in 0..cfg.permutations {
        let perm = if cfg.identity { (0..data.len()).collect() } else { derangement(data.len(), &mut rng)? };
        let swapped: Vec<Instance> = data
            .iter()
            .zip(&perm)
            .map(|(inst, &j)| Instance { image: data[j].image.clone(), ..inst.clone() })
            .collect();
        let (v, a) = per_instance(data, &predict_all(model, &swapped, &none)?)?;
        value_i.push(v);
        attr_i.push(a);
    }
    Ok(AwarenessReport {
        instances: data.len(),
        permutations: cfg.permutations,
        value: summarise(&value_c, &value_i, cfg.resamples, &mut rng),
        attribute: summarise(&attr_c, &attr_i, cfg.resamples, &mut rng),
    })
}
