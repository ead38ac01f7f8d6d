//! Losses, the optimiser and the training loop.

mod adam;
mod loss;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use loss::{kl_penalty, loss_attribute, loss_value, map_value_to_attribute, total_loss};

use crate::dataio::{Encoded, Instance, TagScheme};
use crate::error::{Error, Result};
use crate::evaluation::evaluate;
use crate::model::{build_forward, AblationConfig, ForwardInput, ForwardVars, GateOverride, Model, ModelConfig};
use crate::numerics::{Graph, ParamStore, Real, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the consistency penalty.
    pub lambda: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub train_fraction: f64,
    /// Stop after this many epochs without a validation value-F1 improvement.
    pub patience: Option<usize>,
    pub ablation: AblationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.5,
            adam: AdamConfig::default(),
            batch_size: 32,
            epochs: 20,
            seed: 0,
            train_fraction: 1.0,
            patience: None,
            ablation: AblationConfig::multimodal(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::contract(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::contract(format!("train fraction must be in (0, 1], got {}", self.train_fraction)));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.adam.lr.is_nan() || self.adam.lr <= 0.0 {
            return Err(Error::contract("batch size, epochs and learning rate must be positive"));
        }
        self.ablation.validate()
    }

    /// λ after the KL switch.
    pub fn effective_lambda(&self) -> f64 {
        if self.ablation.use_kl {
            self.lambda
        } else {
            0.0
        }
    }
}

/// Which objective a parameter set is optimised for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Joint,
    AttributeOnly,
    ValueOnly,
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub loss_a: Var,
    pub loss_v: Var,
    pub kl: Var,
    /// The objective for the requested task.
    pub total: Var,
}

/// Builds the forward pass and the per-instance objective on `g`.
#[allow(clippy::too_many_arguments)]
pub fn instance_loss<T: Real>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    scheme: &TagScheme,
    enc: &Encoded,
    inst: &Instance,
    ablation: &AblationConfig,
    lambda: f64,
    task: Task,
) -> Result<(ForwardVars, LossParts)> {
    let input = ForwardInput { encoded: enc, image: &inst.image, gold_attributes: Some(&inst.attributes) };
    let vars = build_forward(g, cfg, &input, ablation, &GateOverride::default())?;
    let positions = enc.token_positions();
    let gold: Vec<usize> = enc.tags.iter().map(|&t| scheme.tag_index(t)).collect();

    let loss_a = loss_attribute(g, vars.y_attr, &inst.attributes)?;
    let loss_v = loss_value(g, vars.y_value, &positions, &gold)?;
    let value_dist = if ablation.teacher_force_values {
        g.constant(loss::one_hot_tags(scheme, &enc.tags, enc.len()))
    } else {
        vars.y_value
    };
    let mapped = map_value_to_attribute(g, value_dist, &positions, cfg.num_labels)?;
    let kl = kl_penalty(g, vars.y_attr, mapped)?;
    let total = match task {
        Task::Joint => total_loss(g, loss_a, loss_v, kl, lambda)?,
        Task::AttributeOnly => loss_a,
        Task::ValueOnly => loss_v,
    };
    Ok((vars, LossParts { loss_a, loss_v, kl, total }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_a: f64,
    pub loss_v: f64,
    pub kl: f64,
    pub loss: f64,
    pub attr_f1: f64,
    pub value_f1: f64,
}

pub struct TrainOutcome<T> {
    /// Parameters of the epoch with the best validation value F1.
    pub model: Model<T>,
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
}

/// Seeded subsample of `data`, stratified by each instance's smallest attribute label.
pub fn sample_fraction(data: &[Instance], fraction: f64, seed: u64) -> Vec<Instance> {
    if fraction >= 1.0 {
        return data.to_vec();
    }
    let mut strata: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
    for (i, inst) in data.iter().enumerate() {
        strata.entry(inst.attributes.iter().next().copied()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for idx in strata.values_mut() {
        idx.shuffle(&mut rng);
        let n = ((idx.len() as f64 * fraction).round() as usize).max(1);
        keep.extend_from_slice(&idx[..n]);
    }
    keep.sort_unstable();
    keep.into_iter().map(|i| data[i].clone()).collect()
}

/// Validation value F1, epoch and parameters of the best epoch so far.
type Snapshot<T> = (f64, usize, ParamStore<T>, Option<ParamStore<T>>);

struct Sums {
    loss_a: f64,
    loss_v: f64,
    kl: f64,
    loss: f64,
}

fn check_finite(x: f64, epoch: usize, batch: usize) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Divergence { epoch, batch, loss: x })
    }
}

/// Trains `model` in place of its current parameters.
///
/// With `use_mtl = false` the attribute objective updates `model.params` and the
/// value objective updates `model.value_params`, each with its own optimiser.
pub fn train<T: Real>(
    mut model: Model<T>,
    train: &[Instance],
    valid: &[Instance],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if model.ablation != cfg.ablation {
        return Err(Error::contract("model and training config disagree on ablation switches"));
    }
    let data = sample_fraction(train, cfg.train_fraction, cfg.seed);
    if data.is_empty() {
        return Err(Error::contract("no training instances"));
    }
    let encoded: Vec<Encoded> = data.iter().map(|i| model.encode(i)).collect::<Result<_>>()?;
    let lambda = cfg.effective_lambda();
    let separate = !cfg.ablation.use_mtl;
    if separate && model.value_params.is_none() {
        model.value_params = Some(model.params.clone());
    }
    let mut opt = Adam::new(cfg.adam, &model.params);
    let mut value_opt = model.value_params.as_ref().map(|p| Adam::new(cfg.adam, p));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<Snapshot<T>> = None;
    let mut since_best = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = Sums { loss_a: 0.0, loss_v: 0.0, kl: 0.0, loss: 0.0 };
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let weight = T::one() / T::lit(batch.len() as f64);
            let task = if separate { Task::AttributeOnly } else { Task::Joint };
            let mut grads = model.params.zero_grads();
            for &i in batch {
                let mut g = Graph::with_params(&model.params);
                let (_, parts) = instance_loss(
                    &mut g,
                    &model.config,
                    &model.scheme,
                    &encoded[i],
                    &data[i],
                    &cfg.ablation,
                    lambda,
                    task,
                )?;
                let val = |v: Var| g.value(v).item().to_f64().unwrap();
                let total = check_finite(val(parts.total), epoch, b)?;
                sums.loss_a += val(parts.loss_a);
                sums.kl += val(parts.kl);
                if !separate {
                    sums.loss_v += val(parts.loss_v);
                    sums.loss += total;
                }
                g.backward_into(parts.total, weight, &mut grads)?;
            }
            if !grads.all_finite() {
                return Err(Error::Divergence { epoch, batch: b, loss: f64::NAN });
            }
            opt.step(&mut model.params, &grads);

            if let (Some(vp), Some(vopt)) = (model.value_params.as_mut(), value_opt.as_mut()) {
                let mut grads = vp.zero_grads();
                for &i in batch {
                    let mut g = Graph::with_params(&*vp);
                    let (_, parts) = instance_loss(
                        &mut g,
                        &model.config,
                        &model.scheme,
                        &encoded[i],
                        &data[i],
                        &cfg.ablation,
                        lambda,
                        Task::ValueOnly,
                    )?;
                    let lv = check_finite(g.value(parts.loss_v).item().to_f64().unwrap(), epoch, b)?;
                    sums.loss_v += lv;
                    g.backward_into(parts.total, weight, &mut grads)?;
                }
                if !grads.all_finite() {
                    return Err(Error::Divergence { epoch, batch: b, loss: f64::NAN });
                }
                vopt.step(vp, &grads);
            }
        }
        if separate {
            sums.loss = sums.loss_a + sums.loss_v;
        }
        let n = data.len() as f64;
        let (attr_f1, value_f1) = if valid.is_empty() {
            (0.0, 0.0)
        } else {
            let r = evaluate(&model, valid)?;
            (r.attribute.f1, r.value.f1)
        };
        let m = EpochMetrics {
            epoch,
            loss_a: sums.loss_a / n,
            loss_v: sums.loss_v / n,
            kl: sums.kl / n,
            loss: sums.loss / n,
            attr_f1,
            value_f1,
        };
        on_epoch(&m);
        history.push(m);

        let improved = best.as_ref().is_none_or(|(f, ..)| value_f1 > *f) || valid.is_empty();
        if improved {
            best = Some((value_f1, epoch, model.params.clone(), model.value_params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience.is_some_and(|p| since_best >= p) {
                break;
            }
        }
    }
    let (_, best_epoch, params, value_params) = best.expect("at least one epoch ran");
    model.params = params;
    model.value_params = value_params;
    Ok(TrainOutcome { model, history, best_epoch })
}
