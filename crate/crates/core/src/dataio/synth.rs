//! Synthetic multimodal product descriptions where some values can only be
//! resolved by looking at the image.
//!
//! Each attribute label `ℓ` has a direction `a_ℓ` and each value phrase `w` a
//! direction `b_w`; the image region showing value `w` of label `ℓ` holds
//! `a_ℓ + b_w` plus Gaussian noise. Two kinds of instance need the image:
//!
//! * ambiguous: a phrase shared by two labels appears in the text and only the
//!   region prototype says which label it carries;
//! * distractor: a value phrase appears in the text but its prototype is absent
//!   from the image, so it is tagged `O`.
//!
//! Connector words are drawn independently of labels, so the text alone never
//! separates these cases.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::instance::{write_instances, ImageFeatures, Instance, Manifest};
use super::scheme::{spans_to_tags, Span, TagScheme};
use crate::error::{Error, Result};

const LABELS: [(&str, [&str; 6]); 8] = [
    ("Color", ["red", "navy blue", "black", "off white", "green", "light grey"]),
    ("Material", ["cotton", "genuine leather", "denim", "linen", "polyester blend", "wool"]),
    ("Pattern", ["striped", "plaid", "solid", "polka dot", "floral print", "camouflage"]),
    ("Style", ["casual", "business formal", "vintage", "street wear", "minimalist", "sporty"]),
    ("Collar", ["crew neck", "v neck", "band collar", "hooded", "lapel", "turtleneck"]),
    ("Sleeve", ["long sleeve", "short sleeve", "sleeveless", "cap sleeve", "puff sleeve", "three quarter sleeve"]),
    ("Fit", ["slim fit", "loose", "regular fit", "oversized", "tailored", "relaxed"]),
    ("Length", ["cropped", "knee length", "ankle length", "midi", "maxi", "mini"]),
];
const AMBIGUOUS: [&str; 8] = ["golden", "silky", "classic", "sailor", "ruffled", "fitted", "long", "deep"];
const OPENERS: [&str; 5] = ["this", "new", "our", "the", "a"];
const NOUNS: [&str; 8] = ["shirt", "dress", "jacket", "bag", "shoes", "pants", "coat", "skirt"];
const CONNECTORS: [&str; 6] = ["with", "in", "and", "featuring", "plus", ","];
const TAILS: [&str; 6] = ["for", "daily", "wear", "today", "sale", "now"];

/// Knobs of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub labels: usize,
    pub values_per_label: usize,
    /// Fraction of instances containing a phrase shared by two labels.
    pub ambiguity: f64,
    /// Fraction of instances containing a value phrase absent from the image;
    /// `None` means `ambiguity / 2`.
    pub distractor_rate: Option<f64>,
    pub d_v: usize,
    pub k: usize,
    /// Noise std relative to the prototype norm.
    pub noise: f64,
    pub max_values: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            labels: 8,
            values_per_label: 6,
            ambiguity: 0.3,
            distractor_rate: None,
            d_v: 32,
            k: 9,
            noise: 0.1,
            max_values: 3,
        }
    }
}

/// Generator-side facts about one instance, for diagnostics and tests.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthMeta {
    /// Span of the ambiguous phrase, if any.
    pub ambiguous: Option<Span>,
    /// Token range and would-be label of the distractor phrase, if any.
    pub distractor: Option<Span>,
    /// `(span, region index)` for every gold value.
    pub regions: Vec<(Span, usize)>,
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub manifest: Manifest,
    pub scheme: TagScheme,
    pub train: Vec<Instance>,
    pub valid: Vec<Instance>,
    pub test: Vec<Instance>,
    pub meta: HashMap<String, SynthMeta>,
}

struct World {
    scheme: TagScheme,
    /// Unambiguous value phrases per label.
    values: Vec<Vec<Vec<String>>>,
    /// `(phrase, label pair)`
    ambiguous: Vec<(Vec<String>, [usize; 2])>,
    label_dir: Vec<Vec<f64>>,
    phrase_dir: HashMap<String, Vec<f64>>,
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn unit_gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let n = Normal::new(0.0, 1.0 / (d as f64).sqrt()).unwrap();
    (0..d).map(|_| n.sample(rng)).collect()
}

impl World {
    fn new(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let names: Vec<String> =
            (0..cfg.labels).map(|l| LABELS.get(l).map_or_else(|| format!("Attr{l}"), |(n, _)| n.to_string())).collect();
        let scheme = TagScheme::new(names)?;
        let values: Vec<Vec<Vec<String>>> = (0..cfg.labels)
            .map(|l| {
                (0..cfg.values_per_label)
                    .map(|v| match LABELS.get(l) {
                        Some((_, vals)) if v < vals.len() => words(vals[v]),
                        _ => vec![format!("a{l}v{v}")],
                    })
                    .collect()
            })
            .collect();
        let ambiguous = if cfg.ambiguity > 0.0 && cfg.labels >= 2 {
            (0..cfg.labels)
                .map(|l| {
                    let phrase = AMBIGUOUS.get(l).map_or_else(|| vec![format!("amb{l}")], |w| words(w));
                    (phrase, [l, (l + 1) % cfg.labels])
                })
                .collect()
        } else {
            Vec::new()
        };
        let label_dir = (0..cfg.labels).map(|_| unit_gaussian(rng, cfg.d_v)).collect();
        let mut phrase_dir = HashMap::new();
        for phrase in values.iter().flatten().chain(ambiguous.iter().map(|(p, _)| p)) {
            phrase_dir.insert(phrase.join(" "), unit_gaussian(rng, cfg.d_v));
        }
        Ok(World { scheme, values, ambiguous, label_dir, phrase_dir })
    }

    fn prototype(&self, label: usize, phrase: &[String]) -> Vec<f64> {
        let b = &self.phrase_dir[&phrase.join(" ")];
        self.label_dir[label].iter().zip(b).map(|(x, y)| x + y).collect()
    }
}

struct Slot {
    phrase: Vec<String>,
    label: usize,
    gold: bool,
    ambiguous: bool,
}

fn noisy(rng: &mut ChaCha8Rng, v: &[f64], std: f64) -> Vec<f32> {
    let n = Normal::new(0.0, std.max(1e-12)).unwrap();
    v.iter().map(|&x| (x + n.sample(rng)) as f32).collect()
}

fn make_instance(world: &World, cfg: &SynthConfig, idx: usize, rng: &mut ChaCha8Rng) -> (Instance, SynthMeta) {
    let l_count = cfg.labels;
    let m = rng.random_range(1..=cfg.max_values.min(l_count));
    let mut labels = vec![idx % l_count];
    while labels.len() < m {
        let l = rng.random_range(0..l_count);
        if !labels.contains(&l) {
            labels.push(l);
        }
    }
    let mut slots: Vec<Slot> = labels
        .iter()
        .map(|&l| Slot { phrase: world.values[l].choose(rng).unwrap().clone(), label: l, gold: true, ambiguous: false })
        .collect();

    if !world.ambiguous.is_empty() && rng.random_bool(cfg.ambiguity) {
        let s = rng.random_range(0..slots.len());
        let l = slots[s].label;
        let options: Vec<&(Vec<String>, [usize; 2])> =
            world.ambiguous.iter().filter(|(_, pair)| pair.contains(&l)).collect();
        if let Some((phrase, _)) = options.choose(rng) {
            slots[s].phrase = phrase.clone();
            slots[s].ambiguous = true;
        }
    }
    let distractor_rate = cfg.distractor_rate.unwrap_or(cfg.ambiguity / 2.0);
    if distractor_rate > 0.0 && rng.random_bool(distractor_rate.min(1.0)) {
        let absent: Vec<usize> = (0..l_count).filter(|l| !labels.contains(l)).collect();
        if let Some(&l) = absent.choose(rng) {
            let phrase = world.values[l].choose(rng).unwrap().clone();
            slots.push(Slot { phrase, label: l, gold: false, ambiguous: false });
        }
    }
    slots.shuffle(rng);

    let mut tokens = vec![OPENERS.choose(rng).unwrap().to_string(), NOUNS.choose(rng).unwrap().to_string()];
    let mut spans = Vec::new();
    let mut meta = SynthMeta::default();
    let mut gold_slots = Vec::new();
    for slot in &slots {
        tokens.push(CONNECTORS.choose(rng).unwrap().to_string());
        let span = Span::new(tokens.len(), tokens.len() + slot.phrase.len(), slot.label);
        tokens.extend(slot.phrase.iter().cloned());
        if slot.gold {
            spans.push(span);
            gold_slots.push((span, slot));
            if slot.ambiguous {
                meta.ambiguous = Some(span);
            }
        } else {
            meta.distractor = Some(span);
        }
    }
    for _ in 0..rng.random_range(0..=2) {
        tokens.push(TAILS.choose(rng).unwrap().to_string());
    }
    let tags = spans_to_tags(&spans, tokens.len()).expect("generated spans never overlap");

    let mut region_order: Vec<usize> = (0..cfg.k).collect();
    region_order.shuffle(rng);
    let mut regions: Vec<Option<Vec<f32>>> = vec![None; cfg.k];
    for (i, (span, slot)) in gold_slots.iter().enumerate() {
        let proto = world.prototype(slot.label, &slot.phrase);
        let norm = proto.iter().map(|x| x * x).sum::<f64>().sqrt();
        let std = cfg.noise * norm / (cfg.d_v as f64).sqrt();
        let r = region_order[i];
        regions[r] = Some(noisy(rng, &proto, std));
        meta.regions.push((*span, r));
    }
    let bg_std = cfg.noise * std::f64::consts::SQRT_2 / (cfg.d_v as f64).sqrt();
    let regions: Vec<Vec<f32>> =
        regions.into_iter().map(|r| r.unwrap_or_else(|| noisy(rng, &vec![0.0; cfg.d_v], bg_std))).collect();
    let mean: Vec<f64> =
        (0..cfg.d_v).map(|j| regions.iter().map(|r| f64::from(r[j])).sum::<f64>() / cfg.k as f64).collect();
    let global = noisy(rng, &mean, bg_std);

    let inst = Instance {
        id: format!("syn-{idx:06}"),
        tokens,
        attributes: labels.iter().copied().collect::<BTreeSet<_>>(),
        tags,
        image: ImageFeatures { global, regions },
    };
    (inst, meta)
}

/// Generates `n` instances split 70/15/15 into train/valid/test.
pub fn generate_synthetic(n: usize, seed: u64, cfg: &SynthConfig) -> Result<SyntheticData> {
    if n < 10 {
        return Err(Error::contract(format!("need at least 10 instances to split, got {n}")));
    }
    if cfg.labels == 0 || cfg.values_per_label == 0 || cfg.d_v == 0 || cfg.max_values == 0 {
        return Err(Error::contract("labels, values_per_label, d_v and max_values must be positive"));
    }
    if cfg.k < cfg.max_values.min(cfg.labels) {
        return Err(Error::contract(format!("K = {} cannot hold {} value regions", cfg.k, cfg.max_values)));
    }
    if !(0.0..=1.0).contains(&cfg.ambiguity) {
        return Err(Error::contract(format!("ambiguity {} outside [0, 1]", cfg.ambiguity)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world = World::new(cfg, &mut rng)?;
    let mut all = Vec::with_capacity(n);
    let mut meta = HashMap::new();
    for i in 0..n {
        let (inst, m) = make_instance(&world, cfg, i, &mut rng);
        meta.insert(inst.id.clone(), m);
        all.push(inst);
    }
    all.shuffle(&mut rng);
    let n_train = (n as f64 * 0.7).round() as usize;
    let n_valid = (n as f64 * 0.15).round() as usize;
    let test = all.split_off(n_train + n_valid);
    let valid = all.split_off(n_train);
    let max_len = [&all, &valid, &test].iter().flat_map(|s| s.iter()).map(|i| i.tokens.len()).max().unwrap_or(3).max(3);
    let manifest = Manifest {
        labels: world.scheme.labels().to_vec(),
        d_v: cfg.d_v,
        k: cfg.k,
        max_len,
        train: Some("train.jsonl".into()),
        valid: Some("valid.jsonl".into()),
        test: Some("test.jsonl".into()),
    };
    Ok(SyntheticData { manifest, scheme: world.scheme, train: all, valid, test, meta })
}

impl SyntheticData {
    /// Writes `train.jsonl`, `valid.jsonl`, `test.jsonl`, `manifest.json` and `meta.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_instances(&dir.join("train.jsonl"), &self.train, &self.scheme)?;
        write_instances(&dir.join("valid.jsonl"), &self.valid, &self.scheme)?;
        write_instances(&dir.join("test.jsonl"), &self.test, &self.scheme)?;
        self.manifest.save(&dir.join("manifest.json"))?;
        let mut meta: Vec<(&String, &SynthMeta)> = self.meta.iter().collect();
        meta.sort_by(|a, b| a.0.cmp(b.0));
        let path = dir.join("meta.json");
        fs::write(&path, serde_json::to_string(&meta)?).map_err(|e| Error::io(&path, e))
    }

    pub fn all(&self) -> impl Iterator<Item = &Instance> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }
}
