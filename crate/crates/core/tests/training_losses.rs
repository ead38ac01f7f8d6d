mod common;

use std::collections::BTreeSet;

use common::*;
use mmave::dataio::{generate_synthetic, SynthConfig};
use mmave::model::{save_checkpoint, AblationConfig, Model, ModelConfig};
use mmave::numerics::{grad_check, Graph, ParamStore, Tensor, REL_FLOOR};
use mmave::training::{
    instance_loss, kl_penalty, loss_attribute, loss_value, map_value_to_attribute, sample_fraction, total_loss, train,
    Adam, AdamConfig, Task, TrainConfig,
};
use mmave::Error;
use proptest::prelude::*;

fn scalar(g: &Graph<'_, f64>, v: mmave::numerics::Var) -> f64 {
    g.value(v).item()
}

#[test]
fn attribute_loss_examples() {
    let mut g = Graph::<f64>::new();
    let half = g.constant(Tensor::row(vec![0.5; 4]));
    let gold: BTreeSet<usize> = [1, 3].into();
    let l = loss_attribute(&mut g, half, &gold).unwrap();
    assert!((scalar(&g, l) - 2f64.ln()).abs() < 1e-12);

    let perfect = g.constant(Tensor::row(vec![0.0, 1.0, 0.0, 1.0]));
    let l = loss_attribute(&mut g, perfect, &gold).unwrap();
    assert!(scalar(&g, l) <= 1e-10);

    let mut s = ParamStore::new();
    s.insert("y", Tensor::row(vec![0.3, 0.6])).unwrap();
    let mut g = Graph::with_params(&s);
    let y = g.param("y").unwrap();
    let l = loss_attribute(&mut g, y, &[0].into()).unwrap();
    let grads = g.backward(l).unwrap();
    let dy = grads.get(&s, "y").unwrap().data();
    assert!(dy[0] < 0.0 && dy[1] > 0.0);
}

#[test]
fn value_loss_examples() {
    let t = 5;
    let mut g = Graph::<f64>::new();
    let uniform = g.constant(Tensor::filled(&[4, t], 1.0 / t as f64));
    let l = loss_value(&mut g, uniform, &[1, 2], &[0, 3]).unwrap();
    assert!((scalar(&g, l) - (t as f64).ln()).abs() < 1e-12);

    let mut rows = vec![vec![0.0; t]; 4];
    rows[1][0] = 1.0;
    rows[2][3] = 1.0;
    // Rows 0 and 3 are special/padding slots; their contents must not matter.
    rows[3] = vec![0.9, 0.1, 0.0, 0.0, 0.0];
    let sharp = g.constant(Tensor::from_rows(&rows).unwrap());
    let l = loss_value(&mut g, sharp, &[1, 2], &[0, 3]).unwrap();
    assert!(scalar(&g, l) <= 1e-10);
    rows[3] = vec![0.0, 0.0, 0.0, 0.0, 1.0];
    rows[0] = vec![0.2; 5];
    let other = g.constant(Tensor::from_rows(&rows).unwrap());
    let l2 = loss_value(&mut g, other, &[1, 2], &[0, 3]).unwrap();
    assert_eq!(scalar(&g, l), scalar(&g, l2));
}

#[test]
fn mapping_examples() {
    // L = 1: columns O, B, I; real tokens at rows 1 and 2.
    let rows = vec![vec![1.0, 0.0, 0.0], vec![0.4, 0.2, 0.4], vec![0.1, 0.8, 0.1], vec![1.0, 0.0, 0.0]];
    let mut g = Graph::<f64>::new();
    let y = g.constant(Tensor::from_rows(&rows).unwrap());
    let m = map_value_to_attribute(&mut g, y, &[1, 2], 1).unwrap();
    assert!((scalar(&g, m) - 0.6).abs() < 1e-12);

    let all_o = g.constant(Tensor::from_rows(&vec![vec![1.0, 0.0, 0.0, 0.0, 0.0]; 3]).unwrap());
    let m = map_value_to_attribute(&mut g, all_o, &[1], 2).unwrap();
    assert!(g.value(m).data().iter().all(|&x| x.abs() < 1e-12));
}

#[test]
fn kl_examples() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::row(vec![0.8]));
    let m = g.constant(Tensor::row(vec![0.4]));
    let k = kl_penalty(&mut g, a, m).unwrap();
    assert!((scalar(&g, k) - 0.8 * 2f64.ln()).abs() < 1e-12);
    assert!((scalar(&g, k) - 0.5545).abs() < 1e-4);

    let mut r = rng(4);
    for _ in 0..50 {
        let p: Vec<f64> = (0..5).map(|_| rand::Rng::random_range(&mut r, 0.01..0.99)).collect();
        let q: Vec<f64> = (0..5).map(|_| rand::Rng::random_range(&mut r, 0.01..0.99)).collect();
        let mut g = Graph::<f64>::new();
        let (a, b) = (g.constant(Tensor::row(p.clone())), g.constant(Tensor::row(q.clone())));
        let k = kl_penalty(&mut g, a, b).unwrap();
        assert!((scalar(&g, k) - kl(&p, &q)).abs() < 1e-12);
        let b2 = g.constant(Tensor::row(p.clone()));
        let same = kl_penalty(&mut g, a, b2).unwrap();
        assert_eq!(scalar(&g, same), 0.0);
    }
}

#[test]
fn kl_can_be_negative() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::row(vec![0.2, 0.2]));
    let m = g.constant(Tensor::row(vec![0.9, 0.9]));
    let k = kl_penalty(&mut g, a, m).unwrap();
    assert!(scalar(&g, k) < 0.0);
}

#[test]
fn total_loss_arithmetic() {
    let mut g = Graph::<f64>::new();
    let (a, v, k) = (g.constant(Tensor::scalar(1.0)), g.constant(Tensor::scalar(2.0)), g.constant(Tensor::scalar(0.4)));
    let t = total_loss(&mut g, a, v, k, 0.5).unwrap();
    assert!((scalar(&g, t) - 3.2).abs() < 1e-12);
    let a2 = g.constant(Tensor::scalar(0.1234567));
    let v2 = g.constant(Tensor::scalar(7.654321));
    let t0 = total_loss(&mut g, a2, v2, k, 0.0).unwrap();
    assert_eq!(scalar(&g, t0), 0.1234567 + 7.654321);
    assert_eq!(TrainConfig::default().lambda, 0.5);
    let cfg = TrainConfig {
        ablation: AblationConfig { use_kl: false, ..AblationConfig::multimodal() },
        ..TrainConfig::default()
    };
    assert_eq!(cfg.effective_lambda(), 0.0);
}

proptest! {
    #[test]
    fn mapping_ignores_token_order(rows in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 5), 2..7), seed in 0u64..1000) {
        let norm: Vec<Vec<f64>> = rows.iter().map(|r| { let s: f64 = r.iter().sum(); r.iter().map(|x| x / s).collect() }).collect();
        let n = norm.len();
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut rng(seed));
        let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| norm[i].clone()).collect();
        let pos: Vec<usize> = (0..n).collect();
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_rows(&norm).unwrap());
        let b = g.constant(Tensor::from_rows(&shuffled).unwrap());
        let ma = map_value_to_attribute(&mut g, a, &pos, 2).unwrap();
        let mb = map_value_to_attribute(&mut g, b, &pos, 2).unwrap();
        prop_assert_eq!(g.value(ma).data(), g.value(mb).data());
        prop_assert!(g.value(ma).data().iter().all(|x| (0.0..=1.0).contains(x)));
        let oracle = map_v2a(&norm, &pos, 2);
        for (x, y) in g.value(ma).data().iter().zip(&oracle) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

/// Two tokens, four regions, two labels, `d = 8`, one encoder layer.
fn grad_toy(ablation: AblationConfig) -> (Model<f64>, mmave::dataio::Instance) {
    let t = toy(2, 8, 8, 6, 4, 1, 3, 4);
    let model = Model::<f64>::new(t.config, ablation, t.scheme, t.vocab, 11).unwrap();
    let mut r = rng(12);
    let inst = instance("g", 2, &[(0, 1, 0), (1, 2, 1)], random_image(&mut r, 6, 4));
    (model, inst)
}

fn loss_grad_error(ablation: AblationConfig, lambda: f64) -> f64 {
    let (model, inst) = grad_toy(ablation);
    let enc = model.encode(&inst).unwrap();
    let report = grad_check(&model.params, 1e-6, |g| {
        let (_, parts) = instance_loss(g, &model.config, &model.scheme, &enc, &inst, &ablation, lambda, Task::Joint)?;
        Ok(parts.total)
    })
    .unwrap();
    assert!(report.coordinates > 1000);
    report.max_rel_error
}

#[test]
fn full_loss_gradient_matches_finite_differences() {
    let base = AblationConfig::multimodal();
    let variants = [
        base,
        AblationConfig::text_only(),
        AblationConfig { teacher_force_values: true, ..base },
        AblationConfig { teacher_force_attributes: true, ..base },
        AblationConfig { use_global_gate: false, use_regional_gate: false, ..base },
    ];
    for ab in variants {
        let err = loss_grad_error(ab, 0.5);
        assert!(err <= 1e-5, "{ab:?}: {err} (floor {REL_FLOOR})");
    }
}

#[test]
fn small_steps_do_not_increase_the_toy_loss() {
    let ab = AblationConfig::multimodal();
    let (mut model, inst) = grad_toy(ab);
    let enc = model.encode(&inst).unwrap();
    let mut opt = Adam::new(AdamConfig { lr: 1e-4, ..AdamConfig::default() }, &model.params);
    let mut last = f64::INFINITY;
    for _ in 0..10 {
        let mut g = Graph::with_params(&model.params);
        let (_, parts) =
            instance_loss(&mut g, &model.config, &model.scheme, &enc, &inst, &ab, 0.5, Task::Joint).unwrap();
        let loss = g.value(parts.total).item();
        assert!(loss <= last, "{loss} > {last}");
        last = loss;
        let grads = g.backward(parts.total).unwrap();
        drop(g);
        opt.step(&mut model.params, &grads);
    }
}

fn tiny_setup(
    seed: u64,
    ablation: AblationConfig,
) -> (Model<f32>, Vec<mmave::dataio::Instance>, Vec<mmave::dataio::Instance>) {
    let data = generate_synthetic(60, seed, &SynthConfig { d_v: 8, k: 4, ..SynthConfig::default() }).unwrap();
    let cfg = desk_config(&data, 16, 16, 1);
    let vocab = mmave::dataio::Vocabulary::build(&data.train);
    let cfg = ModelConfig { text: mmave::encoders::TextEncoderConfig { vocab_size: vocab.len(), ..cfg.text }, ..cfg };
    let model = Model::new(cfg, ablation, data.scheme.clone(), vocab, seed).unwrap();
    (model, data.train, data.valid)
}

pub fn desk_config(data: &mmave::dataio::SyntheticData, d: usize, d_a: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        text: mmave::encoders::TextEncoderConfig {
            vocab_size: 0,
            max_positions: data.manifest.max_len + 2,
            d,
            layers,
            ff: 2 * d,
        },
        image: mmave::encoders::ImageEncoderConfig { d_v: data.manifest.d_v, k: data.manifest.k, proj: None },
        d_a,
        num_labels: data.scheme.num_labels(),
        untie_visual_value: false,
        attr_sum_includes_special: false,
        freeze_text_encoder: false,
    }
}

#[test]
fn training_is_deterministic_to_the_byte() {
    for ab in [AblationConfig::multimodal(), AblationConfig { use_mtl: false, ..AblationConfig::text_only() }] {
        let run = || {
            let (model, tr, va) = tiny_setup(5, ab);
            let cfg = TrainConfig { epochs: 2, batch_size: 8, ablation: ab, seed: 5, ..TrainConfig::default() };
            let out = train(model, &tr, &va, &cfg, |_| {}).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("m.ckpt");
            save_checkpoint(&out.model, &p).unwrap();
            (std::fs::read(&p).unwrap(), serde_json::to_string(&out.history).unwrap())
        };
        assert_eq!(run(), run());
    }
}

#[test]
fn separate_tasks_keep_separate_parameters() {
    let ab = AblationConfig { use_mtl: false, ..AblationConfig::multimodal() };
    let (model, tr, va) = tiny_setup(2, ab);
    let cfg = TrainConfig { epochs: 1, batch_size: 8, ablation: ab, ..TrainConfig::default() };
    let out = train(model, &tr, &va, &cfg, |_| {}).unwrap();
    let vp = out.model.value_params.as_ref().unwrap();
    assert_ne!(out.model.params.get("head.w6").unwrap(), vp.get("head.w6").unwrap());
    assert_ne!(out.model.params.get("head.w3").unwrap(), vp.get("head.w3").unwrap());
}

#[test]
fn non_finite_inputs_abort_with_divergence() {
    let ab = AblationConfig::multimodal();
    let (model, mut tr, va) = tiny_setup(3, ab);
    tr[0].image.regions[0][0] = f32::NAN;
    let cfg = TrainConfig { epochs: 1, batch_size: 8, ablation: ab, ..TrainConfig::default() };
    match train(model, &tr, &va, &cfg, |_| {}) {
        Err(Error::Divergence { epoch, .. }) => assert_eq!(epoch, 1),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.best_epoch)),
    }
}

#[test]
fn mismatched_ablation_is_rejected() {
    let (model, tr, va) = tiny_setup(3, AblationConfig::multimodal());
    let cfg = TrainConfig { epochs: 1, ablation: AblationConfig::text_only(), ..TrainConfig::default() };
    assert!(train(model, &tr, &va, &cfg, |_| {}).is_err());
}

#[test]
fn fraction_sampling_is_seeded_and_stratified() {
    let data = generate_synthetic(500, 1, &SynthConfig::default()).unwrap();
    let a = sample_fraction(&data.train, 0.2, 9);
    let b = sample_fraction(&data.train, 0.2, 9);
    let c = sample_fraction(&data.train, 0.2, 10);
    assert_eq!(a, b);
    assert_ne!(a, c);
    let frac = a.len() as f64 / data.train.len() as f64;
    assert!((frac - 0.2).abs() < 0.03, "{frac}");
    for l in 0..data.scheme.num_labels() {
        let first =
            |s: &[mmave::dataio::Instance]| s.iter().filter(|i| i.attributes.iter().next() == Some(&l)).count() as f64;
        let whole = first(&data.train);
        if whole >= 10.0 {
            assert!((first(&a) / whole - 0.2).abs() < 0.1);
        }
    }
}

#[test]
fn synthetic_training_halves_the_loss() {
    let data = generate_synthetic(2000, 0, &SynthConfig::default()).unwrap();
    let vocab = mmave::dataio::Vocabulary::build(&data.train);
    let mut cfg = desk_config(&data, 32, 32, 1);
    cfg.text.vocab_size = vocab.len();
    let ab = AblationConfig::multimodal();
    let model = Model::<f32>::new(cfg, ab, data.scheme.clone(), vocab, 0).unwrap();

    let initial: f64 = data
        .train
        .iter()
        .map(|inst| {
            let enc = model.encode(inst).unwrap();
            let mut g = Graph::with_params(&model.params);
            let (_, p) =
                instance_loss(&mut g, &model.config, &model.scheme, &enc, inst, &ab, 0.5, Task::Joint).unwrap();
            g.value(p.total).item() as f64
        })
        .sum::<f64>()
        / data.train.len() as f64;
    let tc = TrainConfig {
        epochs: 3,
        adam: AdamConfig { lr: 3e-3, ..AdamConfig::default() },
        ablation: ab,
        ..TrainConfig::default()
    };
    let out = train(model, &data.train, &[], &tc, |_| {}).unwrap();
    let last = out.history.last().unwrap().loss;
    assert!(last < 0.5 * initial, "initial {initial}, final {last}");
}
