//! Shared fixtures and direct-summation reference evaluators.
//!
//! The reference code below works on nested `Vec`s with explicit loops and
//! never calls into the library's graph, so agreement with the graph is a
//! meaningful check.
#![allow(dead_code)]

use std::collections::BTreeSet;

use mmave::dataio::{ImageFeatures, Instance, Tag, TagScheme, Vocabulary};
use mmave::encoders::{ImageEncoderConfig, TextEncoderConfig};
use mmave::model::ModelConfig;
use mmave::numerics::ParamStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn scheme(l: usize) -> TagScheme {
    TagScheme::new((0..l).map(|i| format!("L{i}")).collect()).unwrap()
}

pub fn random_image(r: &mut impl Rng, d_v: usize, k: usize) -> ImageFeatures {
    ImageFeatures {
        global: (0..d_v).map(|_| r.random_range(-1.0f32..1.0)).collect(),
        regions: (0..k).map(|_| (0..d_v).map(|_| r.random_range(-1.0f32..1.0)).collect()).collect(),
    }
}

/// Instance over words `w0..`, with spans given as `(start, end, label)`.
pub fn instance(id: &str, n: usize, spans: &[(usize, usize, usize)], image: ImageFeatures) -> Instance {
    let mut tags = vec![Tag::Outside; n];
    for &(s, e, l) in spans {
        tags[s] = Tag::Begin(l);
        for t in &mut tags[s + 1..e] {
            *t = Tag::Inside(l);
        }
    }
    Instance {
        id: id.into(),
        tokens: (0..n).map(|i| format!("w{i}")).collect(),
        attributes: spans.iter().map(|s| s.2).collect::<BTreeSet<_>>(),
        tags,
        image,
    }
}

pub struct Toy {
    pub config: ModelConfig,
    pub scheme: TagScheme,
    pub vocab: Vocabulary,
}

#[allow(clippy::too_many_arguments)]
/// A small model geometry; `max_len` real tokens fit.
pub fn toy(l: usize, d: usize, d_a: usize, d_v: usize, k: usize, layers: usize, max_len: usize, words: usize) -> Toy {
    let words: Vec<String> = (0..words).map(|i| format!("w{i}")).collect();
    let seed_inst = Instance {
        id: "v".into(),
        tokens: words.clone(),
        attributes: BTreeSet::new(),
        tags: vec![Tag::Outside; words.len()],
        image: ImageFeatures::zeros(d_v, k),
    };
    let vocab = Vocabulary::build([&seed_inst]);
    let config = ModelConfig {
        text: TextEncoderConfig { vocab_size: vocab.len(), max_positions: max_len + 2, d, layers, ff: 2 * d },
        image: ImageEncoderConfig { d_v, k, proj: None },
        d_a,
        num_labels: l,
        untie_visual_value: false,
        attr_sum_includes_special: false,
        freeze_text_encoder: false,
    };
    Toy { config, scheme: scheme(l), vocab }
}

// ---------------------------------------------------------------- reference math

pub fn param(p: &ParamStore<f64>, name: &str) -> Mat {
    p.get(name).unwrap().to_rows()
}

/// `x · W` for a row vector `x`.
pub fn vec_mat(x: &[f64], w: &Mat) -> Vec<f64> {
    let cols = w[0].len();
    let mut out = vec![0.0; cols];
    for (i, &xi) in x.iter().enumerate() {
        for j in 0..cols {
            out[j] += xi * w[i][j];
        }
    }
    out
}

pub fn rows_mat(x: &Mat, w: &Mat) -> Mat {
    x.iter().map(|r| vec_mat(r, w)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(scores: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    let keep = |j: usize| mask.is_none_or(|m| m[j]);
    let max = (0..scores.len()).filter(|&j| keep(j)).map(|j| scores[j]).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = (0..scores.len()).map(|j| if keep(j) { (scores[j] - max).exp() } else { 0.0 }).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Token-token and token-region attention maps.
pub fn attention(p: &ParamStore<f64>, h: &Mat, v: &Mat, mask: &[bool], d_a: usize) -> (Mat, Mat) {
    let s = 1.0 / (d_a as f64).sqrt();
    let qt = rows_mat(h, &param(p, "fuse.wq_t"));
    let kt = rows_mat(h, &param(p, "fuse.wk_t"));
    let qv = rows_mat(h, &param(p, "fuse.wq_v"));
    let kv = rows_mat(v, &param(p, "fuse.wk_v"));
    let at = qt.iter().map(|q| softmax(&kt.iter().map(|k| dot(q, k) * s).collect::<Vec<_>>(), Some(mask))).collect();
    let av = qv.iter().map(|q| softmax(&kv.iter().map(|k| dot(q, k) * s).collect::<Vec<_>>(), None)).collect();
    (at, av)
}

pub fn global_gate(p: &ParamStore<f64>, h: &Mat, vg: &[f64]) -> Vec<f64> {
    let w1 = param(p, "gate.w1");
    let w2 = param(p, "gate.w2");
    let b = param(p, "gate.b")[0][0];
    let from_image: f64 = (0..vg.len()).map(|j| w2[j][0] * vg[j]).sum();
    h.iter().map(|hi| sigmoid((0..hi.len()).map(|j| w1[j][0] * hi[j]).sum::<f64>() + from_image + b)).collect()
}

/// `Σ_j α^t_ij W_V^t h_j + g_i Σ_k α^v_ik W_V^v v_k`, expanded term by term.
pub fn fuse(p: &ParamStore<f64>, h: &Mat, v: &Mat, at: &Mat, av: &Mat, gate: Option<&[f64]>, visual: bool) -> Mat {
    let wvt = param(p, "fuse.wv_t");
    let wvv = param(p, "fuse.wv_v");
    let d_a = wvt[0].len();
    (0..h.len())
        .map(|i| {
            let mut out = vec![0.0; d_a];
            for (j, hj) in h.iter().enumerate() {
                let val = vec_mat(hj, &wvt);
                for c in 0..d_a {
                    out[c] += at[i][j] * val[c];
                }
            }
            if visual {
                let g = gate.map_or(1.0, |g| g[i]);
                for (k, vk) in v.iter().enumerate() {
                    let val = vec_mat(vk, &wvv);
                    for c in 0..d_a {
                        out[c] += g * av[i][k] * val[c];
                    }
                }
            }
            out
        })
        .collect()
}

pub fn attributes(p: &ParamStore<f64>, h: &Mat, hf: &Mat, positions: &[usize]) -> Vec<f64> {
    let (w3, w4, w5) = (param(p, "head.w3"), param(p, "head.w4"), param(p, "head.w5"));
    let l = w3[0].len();
    (0..l)
        .map(|c| {
            let mut z = 0.0;
            for &i in positions {
                z += (0..h[i].len()).map(|j| w3[j][c] * h[i][j]).sum::<f64>();
                z += (0..hf[i].len()).map(|j| w4[j][c] * hf[i][j]).sum::<f64>();
            }
            z += (0..h[0].len()).map(|j| w5[j][c] * h[0][j]).sum::<f64>();
            sigmoid(z)
        })
        .collect()
}

pub fn regional_gate(p: &ParamStore<f64>, ya: &[f64], v: &Mat) -> Vec<f64> {
    let (w9, w10) = (param(p, "head.w9"), param(p, "head.w10"));
    let from_attr: f64 = (0..ya.len()).map(|l| w9[l][0] * ya[l]).sum();
    v.iter().map(|vk| sigmoid((0..vk.len()).map(|j| w10[j][0] * vk[j]).sum::<f64>() + from_attr)).collect()
}

#[allow(clippy::too_many_arguments)]
pub fn values(
    p: &ParamStore<f64>,
    h: &Mat,
    hf: &Mat,
    ya: Option<&[f64]>,
    v: &Mat,
    av: &Mat,
    gate: Option<&[f64]>,
    visual: bool,
) -> Mat {
    let (w6, w7, w8, wr) = (param(p, "head.w6"), param(p, "head.w7"), param(p, "head.w8"), param(p, "head.w_region"));
    let wvv = param(p, "fuse.wv_v");
    let t = w6[0].len();
    (0..h.len())
        .map(|i| {
            let mut z = vec![0.0; t];
            for c in 0..t {
                z[c] += (0..h[i].len()).map(|j| w6[j][c] * h[i][j]).sum::<f64>();
                z[c] += (0..hf[i].len()).map(|j| w7[j][c] * hf[i][j]).sum::<f64>();
                if let Some(ya) = ya {
                    z[c] += (0..ya.len()).map(|l| w8[l][c] * ya[l]).sum::<f64>();
                }
            }
            if visual {
                let d_a = wvv[0].len();
                let mut ctx = vec![0.0; d_a];
                for (k, vk) in v.iter().enumerate() {
                    let g = gate.map_or(1.0, |g| g[k]);
                    let val = vec_mat(vk, &wvv);
                    for c in 0..d_a {
                        ctx[c] += g * av[i][k] * val[c];
                    }
                }
                for c in 0..t {
                    z[c] += (0..d_a).map(|a| wr[a][c] * ctx[a]).sum::<f64>();
                }
            }
            softmax(&z, None)
        })
        .collect()
}

/// `½ (max_i y_i(B_l) + max_i y_i(I_l))` over `positions`.
pub fn map_v2a(yv: &Mat, positions: &[usize], l: usize) -> Vec<f64> {
    (0..l)
        .map(|lab| {
            let b = positions.iter().map(|&i| yv[i][1 + 2 * lab]).fold(f64::NEG_INFINITY, f64::max);
            let c = positions.iter().map(|&i| yv[i][2 + 2 * lab]).fold(f64::NEG_INFINITY, f64::max);
            0.5 * (b + c)
        })
        .collect()
}

pub fn kl(ya: &[f64], ym: &[f64]) -> f64 {
    let mut s = 0.0;
    for l in 0..ya.len() {
        s += ya[l] * (ya[l].max(1e-12).ln() - ym[l].max(1e-12).ln());
    }
    s
}

pub fn bce(ya: &[f64], gold: &BTreeSet<usize>) -> f64 {
    let mut s = 0.0;
    for (l, &p) in ya.iter().enumerate() {
        let p = p.clamp(1e-12, 1.0 - 1e-12);
        s += if gold.contains(&l) { p.ln() } else { (1.0 - p).ln() };
    }
    -s / ya.len() as f64
}

pub fn ce(yv: &Mat, positions: &[usize], gold: &[usize]) -> f64 {
    let mut s = 0.0;
    for (k, &i) in positions.iter().enumerate() {
        s += yv[i][gold[k]].max(1e-12).ln();
    }
    -s / positions.len() as f64
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
