use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::dataio::{tags_to_spans, Instance, Tag, TagScheme};
use crate::error::{Error, Result};
use crate::model::{GateOverride, Model, Prediction};
use crate::numerics::Real;

/// Micro-averaged precision, recall and F1 with their counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Prf { precision, recall, f1, tp, fp, fn_ }
    }

    fn add(&mut self, tp: usize, fp: usize, fn_: usize) {
        *self = Prf::from_counts(self.tp + tp, self.fp + fp, self.fn_ + fn_);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelPrf {
    pub label: String,
    #[serde(flatten)]
    pub prf: Prf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub attribute: Prf,
    pub value: Prf,
    pub attribute_per_label: Vec<LabelPrf>,
    pub value_per_label: Vec<LabelPrf>,
    pub instances: usize,
}

fn set_counts(pred: &BTreeSet<usize>, gold: &BTreeSet<usize>) -> (usize, usize, usize) {
    let tp = pred.intersection(gold).count();
    (tp, pred.len() - tp, gold.len() - tp)
}

/// Micro P/R/F1 over `(instance, label)` decisions.
pub fn f1_attributes(pred: &[BTreeSet<usize>], gold: &[BTreeSet<usize>]) -> Result<Prf> {
    if pred.is_empty() {
        return Err(Error::contract("cannot score an empty dataset"));
    }
    if pred.len() != gold.len() {
        return Err(Error::contract(format!("{} predictions for {} gold instances", pred.len(), gold.len())));
    }
    let mut prf = Prf::default();
    for (p, g) in pred.iter().zip(gold) {
        let (tp, fp, fn_) = set_counts(p, g);
        prf.add(tp, fp, fn_);
    }
    Ok(prf)
}

fn span_counts(pred: &[Tag], gold: &[Tag]) -> Result<(usize, usize, usize)> {
    if pred.len() != gold.len() {
        return Err(Error::contract(format!("tag sequences differ in length: {} vs {}", pred.len(), gold.len())));
    }
    let p: BTreeSet<_> = tags_to_spans(pred).into_iter().collect();
    let g: BTreeSet<_> = tags_to_spans(gold).into_iter().collect();
    let tp = p.intersection(&g).count();
    Ok((tp, p.len() - tp, g.len() - tp))
}

/// Span-level exact-match micro P/R/F1.
pub fn f1_values(pred: &[Vec<Tag>], gold: &[Vec<Tag>]) -> Result<Prf> {
    if pred.is_empty() {
        return Err(Error::contract("cannot score an empty dataset"));
    }
    if pred.len() != gold.len() {
        return Err(Error::contract(format!("{} predictions for {} gold sequences", pred.len(), gold.len())));
    }
    let mut prf = Prf::default();
    for (p, g) in pred.iter().zip(gold) {
        let (tp, fp, fn_) = span_counts(p, g)?;
        prf.add(tp, fp, fn_);
    }
    Ok(prf)
}

/// Per-instance value F1, taken as 1 when both gold and prediction are empty.
pub fn instance_value_f1(pred: &[Tag], gold: &[Tag]) -> Result<f64> {
    let (tp, fp, fn_) = span_counts(pred, gold)?;
    Ok(if tp + fp + fn_ == 0 { 1.0 } else { Prf::from_counts(tp, fp, fn_).f1 })
}

/// Per-instance attribute F1, taken as 1 when both sets are empty.
pub fn instance_attribute_f1(pred: &BTreeSet<usize>, gold: &BTreeSet<usize>) -> f64 {
    let (tp, fp, fn_) = set_counts(pred, gold);
    if tp + fp + fn_ == 0 {
        1.0
    } else {
        Prf::from_counts(tp, fp, fn_).f1
    }
}

/// Predicted tags extended with `O` over tokens dropped by truncation.
pub fn full_length_tags(pred: &Prediction, len: usize) -> Vec<Tag> {
    let mut tags = pred.tags.clone();
    tags.resize(len, Tag::Outside);
    tags
}

/// Scores already-computed predictions.
pub fn score(scheme: &TagScheme, data: &[Instance], preds: &[Prediction]) -> Result<MetricsReport> {
    let pred_attrs: Vec<_> = preds.iter().map(|p| p.attributes.clone()).collect();
    let gold_attrs: Vec<_> = data.iter().map(|i| i.attributes.clone()).collect();
    let pred_tags: Vec<_> = preds.iter().zip(data).map(|(p, i)| full_length_tags(p, i.tags.len())).collect();
    let gold_tags: Vec<_> = data.iter().map(|i| i.tags.clone()).collect();
    let attribute = f1_attributes(&pred_attrs, &gold_attrs)?;
    let value = f1_values(&pred_tags, &gold_tags)?;

    let mut attr_counts = vec![(0, 0, 0); scheme.num_labels()];
    let mut value_counts = vec![(0, 0, 0); scheme.num_labels()];
    for (((pa, ga), pt), gt) in pred_attrs.iter().zip(&gold_attrs).zip(&pred_tags).zip(&gold_tags) {
        for (l, c) in attr_counts.iter_mut().enumerate() {
            match (pa.contains(&l), ga.contains(&l)) {
                (true, true) => c.0 += 1,
                (true, false) => c.1 += 1,
                (false, true) => c.2 += 1,
                _ => {}
            }
        }
        let p: BTreeSet<_> = tags_to_spans(pt).into_iter().collect();
        let g: BTreeSet<_> = tags_to_spans(gt).into_iter().collect();
        for s in &p {
            if g.contains(s) {
                value_counts[s.label].0 += 1;
            } else {
                value_counts[s.label].1 += 1;
            }
        }
        for s in g.difference(&p) {
            value_counts[s.label].2 += 1;
        }
    }
    let per_label = |counts: &[(usize, usize, usize)]| {
        counts
            .iter()
            .enumerate()
            .map(|(l, &(tp, fp, fn_))| LabelPrf {
                label: scheme.label_name(l).to_string(),
                prf: Prf::from_counts(tp, fp, fn_),
            })
            .collect()
    };
    Ok(MetricsReport {
        attribute,
        value,
        attribute_per_label: per_label(&attr_counts),
        value_per_label: per_label(&value_counts),
        instances: data.len(),
    })
}

pub fn predict_all<T: Real>(model: &Model<T>, data: &[Instance], overrides: &GateOverride) -> Result<Vec<Prediction>> {
    data.iter().map(|i| model.predict_with(i, &model.ablation, overrides)).collect()
}

/// Predicts and scores `data` with the model's own ablation settings.
pub fn evaluate<T: Real>(model: &Model<T>, data: &[Instance]) -> Result<MetricsReport> {
    let preds = predict_all(model, data, &GateOverride::default())?;
    score(&model.scheme, data, &preds)
}
