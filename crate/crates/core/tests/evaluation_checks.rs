mod common;

use std::collections::BTreeSet;

use common::*;
use mmave::dataio::Tag;
use mmave::evaluation::{
    awareness, chi2_sf_even, evaluate, f1_attributes, f1_values, fisher_combine, inspect_gates, instance_value_f1,
    upper_bound_eval, AwarenessConfig, UpperBound,
};
use mmave::model::{AblationConfig, Model};
use rand::seq::SliceRandom;
use rand::Rng;

/// Independent decoder: a span starts at B-x, or at I-x not preceded by B-x/I-x.
fn naive_spans(tags: &[Tag]) -> Vec<(usize, usize, usize)> {
    let label = |t: Tag| match t {
        Tag::Outside => None,
        Tag::Begin(l) | Tag::Inside(l) => Some(l),
    };
    let mut out = Vec::new();
    let mut i = 0;
    while i < tags.len() {
        let Some(l) = label(tags[i]) else {
            i += 1;
            continue;
        };
        let mut j = i + 1;
        while j < tags.len() && tags[j] == Tag::Inside(l) {
            j += 1;
        }
        out.push((i, j, l));
        i = j;
    }
    out
}

fn random_tags(r: &mut impl Rng, n: usize) -> Vec<Tag> {
    (0..n)
        .map(|_| match r.random_range(0..5) {
            0 | 1 => Tag::Outside,
            2 => Tag::Begin(r.random_range(0..3)),
            _ => Tag::Inside(r.random_range(0..3)),
        })
        .collect()
}

#[test]
fn span_f1_equals_brute_force_pairing() {
    let mut r = rng(17);
    let mut preds = Vec::new();
    let mut golds = Vec::new();
    for _ in 0..200 {
        let n = r.random_range(1..25);
        let gold = random_tags(&mut r, n);
        // Half the predictions are noisy copies of gold so matches actually occur.
        let pred = if r.random_bool(0.5) {
            gold.iter().map(|&t| if r.random_bool(0.15) { random_tags(&mut r, 1)[0] } else { t }).collect()
        } else {
            random_tags(&mut r, n)
        };
        preds.push(pred);
        golds.push(gold);
    }
    let (mut tp, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (p, g) in preds.iter().zip(&golds) {
        let (ps, gs) = (naive_spans(p), naive_spans(g));
        np += ps.len();
        ng += gs.len();
        for a in &ps {
            for b in &gs {
                if a == b {
                    tp += 1;
                }
            }
        }
    }
    let prf = f1_values(&preds, &golds).unwrap();
    assert_eq!((prf.tp, prf.fp, prf.fn_), (tp, np - tp, ng - tp));
    let (p, rc) = (tp as f64 / np as f64, tp as f64 / ng as f64);
    assert!((prf.f1 - 2.0 * p * rc / (p + rc)).abs() < 1e-12);
    assert!(tp > 50);
}

#[test]
fn hand_counted_examples() {
    let p = f1_attributes(&[BTreeSet::from([0, 1])], &[BTreeSet::from([0])]).unwrap();
    assert_eq!((p.precision, p.recall), (0.5, 1.0));
    assert!((p.f1 - 2.0 / 3.0).abs() < 1e-12);
    let none = f1_attributes(&[BTreeSet::new()], &[BTreeSet::from([2])]).unwrap();
    assert_eq!(none.f1, 0.0);
    assert!(f1_attributes(&[], &[]).is_err());

    let gold = vec![Tag::Begin(0), Tag::Inside(0), Tag::Outside];
    let off = vec![Tag::Begin(0), Tag::Outside, Tag::Outside];
    let v = f1_values(&[off], std::slice::from_ref(&gold)).unwrap();
    assert_eq!((v.tp, v.fp, v.fn_), (0, 1, 1));
    assert!(f1_values(&[vec![Tag::Outside]], std::slice::from_ref(&gold)).is_err());
    assert_eq!(instance_value_f1(&[Tag::Outside; 3], &[Tag::Outside; 3]).unwrap(), 1.0);
    assert_eq!(f1_values(std::slice::from_ref(&gold), std::slice::from_ref(&gold)).unwrap().f1, 1.0);
}

fn small_model(ablation: AblationConfig, seed: u64) -> (Model<f64>, Vec<mmave::dataio::Instance>) {
    let t = toy(3, 8, 8, 5, 4, 1, 8, 12);
    let model = Model::<f64>::new(t.config, ablation, t.scheme, t.vocab, seed).unwrap();
    let mut r = rng(seed + 100);
    let data = (0..30)
        .map(|i| {
            let n = r.random_range(2..8);
            let l = r.random_range(0..3);
            instance(&format!("i{i}"), n, &[(0, 1, l)], random_image(&mut r, 5, 4))
        })
        .collect();
    (model, data)
}

#[test]
fn metrics_do_not_depend_on_dataset_order() {
    let (model, mut data) = small_model(AblationConfig::multimodal(), 1);
    let a = evaluate(&model, &data).unwrap();
    data.shuffle(&mut rng(3));
    let b = evaluate(&model, &data).unwrap();
    assert_eq!(a.attribute, b.attribute);
    assert_eq!(a.value, b.value);
    assert_eq!(a.value_per_label, b.value_per_label);
}

#[test]
fn identity_pairing_gives_zero_awareness() {
    let (model, data) = small_model(AblationConfig::multimodal(), 2);
    let cfg = AwarenessConfig { permutations: 3, resamples: 99, identity: true, ..AwarenessConfig::default() };
    let rep = awareness(&model, &data, &cfg).unwrap();
    assert_eq!(rep.value.delta_mean, 0.0);
    assert_eq!(rep.attribute.delta_mean, 0.0);
    assert!(rep.value.deltas.iter().all(|&d| d == 0.0));
    assert!(awareness(&model, &data[..1], &AwarenessConfig::default()).is_err());
}

#[test]
fn awareness_is_reproducible_and_shaped() {
    let (model, data) = small_model(AblationConfig::multimodal(), 4);
    let cfg = AwarenessConfig { permutations: 4, resamples: 199, seed: 8, identity: false };
    let a = awareness(&model, &data, &cfg).unwrap();
    assert_eq!(a, awareness(&model, &data, &cfg).unwrap());
    assert_eq!(a.value.deltas.len(), 4);
    assert_eq!(a.value.p_values.len(), 4);
    assert!(a.value.p_values.iter().all(|p| *p > 0.0 && *p <= 1.0));
    // A text-only model cannot see the image at all.
    let (text, data) = small_model(AblationConfig::text_only(), 4);
    let t = awareness(&text, &data, &cfg).unwrap();
    assert_eq!(t.value.delta_mean, 0.0);
    assert_eq!(t.attribute.delta_mean, 0.0);
}

#[test]
fn chi_square_and_fisher() {
    // Two degrees of freedom: e^{-x/2}.
    assert!((chi2_sf_even(2.0, 1) - (-1.0f64).exp()).abs() < 1e-15);
    // Four degrees of freedom: e^{-x/2}(1 + x/2).
    assert!((chi2_sf_even(3.0, 2) - (-1.5f64).exp() * 2.5).abs() < 1e-15);
    let (stat, p) = fisher_combine(&[1.0; 8]);
    assert_eq!(stat, 0.0);
    assert!((p - 1.0).abs() < 1e-12);
    let (_, p) = fisher_combine(&[0.01; 8]);
    assert!(p < 1e-6);
}

#[test]
fn upper_bound_modes() {
    let (model, data) = small_model(AblationConfig::multimodal(), 5);
    let v = upper_bound_eval(&model, &data, UpperBound::ValueGivenGoldAttrs).unwrap();
    assert_eq!(v.attribute.f1, 1.0);
    let a = upper_bound_eval(&model, &data, UpperBound::AttrGivenGoldValues).unwrap();
    assert_eq!(a.value.f1, 1.0);
    assert_eq!(a.attribute, evaluate(&model, &data).unwrap().attribute);
    assert!("value_given_gold_attr".parse::<UpperBound>().is_err());
    assert_eq!("attr_given_gold_values".parse::<UpperBound>().unwrap(), UpperBound::AttrGivenGoldValues);
}

#[test]
fn gate_dump_passes_forward_values_through() {
    let (model, data) = small_model(AblationConfig::multimodal(), 6);
    let inst = &data[0];
    let dump = inspect_gates(&model, inst).unwrap();
    let out = model.forward(inst).unwrap();
    let gg = out.g_global.unwrap();
    assert_eq!(dump.global.len(), inst.tokens.len());
    assert_eq!(dump.regional.len(), 4);
    for (i, (tok, g)) in dump.global.iter().enumerate() {
        assert_eq!(tok, &inst.tokens[i]);
        assert_eq!(*g, gg[i + 1]);
        assert!(*g > 0.0 && *g < 1.0);
    }
    assert_eq!(dump.regional, out.g_regional.unwrap());
    let csv = dump.global_csv();
    assert!(csv.starts_with("token,g_global\n"));
    assert_eq!(csv.lines().count(), inst.tokens.len() + 1);
    assert_eq!(dump.regional_csv().lines().count(), 5);

    let (text, _) = small_model(AblationConfig::text_only(), 6);
    assert!(inspect_gates(&text, inst).is_err());
}
