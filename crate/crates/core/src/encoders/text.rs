use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{fan_in, gaussian};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Real, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    /// Rows of the positional table (`max_len + 2`).
    pub max_positions: usize,
    pub d: usize,
    /// Transformer layers; `0` leaves embedding lookup plus positions.
    pub layers: usize,
    pub ff: usize,
}

fn layer_names(l: usize) -> [String; 12] {
    ["ln1.g", "ln1.b", "wq", "wk", "wv", "wo", "ln2.g", "ln2.b", "ff1", "ff1.b", "ff2", "ff2.b"]
        .map(|s| format!("enc.{l}.{s}"))
}

pub fn init_text_encoder<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    cfg: &TextEncoderConfig,
    rng: &mut R,
) -> Result<()> {
    let d = cfg.d;
    store.insert("enc.tok_emb", gaussian(rng, cfg.vocab_size, d, 1.0))?;
    store.insert("enc.pos_emb", gaussian(rng, cfg.max_positions, d, 0.1))?;
    for l in 0..cfg.layers {
        let [ln1g, ln1b, wq, wk, wv, wo, ln2g, ln2b, ff1, ff1b, ff2, ff2b] = layer_names(l);
        store.insert(ln1g, Tensor::filled(&[1, d], T::one()))?;
        store.insert(ln1b, Tensor::zeros(&[1, d]))?;
        store.insert(wq, fan_in(rng, d, d))?;
        store.insert(wk, fan_in(rng, d, d))?;
        store.insert(wv, fan_in(rng, d, d))?;
        store.insert(wo, fan_in(rng, d, d))?;
        store.insert(ln2g, Tensor::filled(&[1, d], T::one()))?;
        store.insert(ln2b, Tensor::zeros(&[1, d]))?;
        store.insert(ff1, fan_in(rng, d, cfg.ff))?;
        store.insert(ff1b, Tensor::zeros(&[1, cfg.ff]))?;
        store.insert(ff2, fan_in(rng, cfg.ff, d))?;
        store.insert(ff2b, Tensor::zeros(&[1, d]))?;
    }
    if cfg.layers > 0 {
        store.insert("enc.ln_f.g", Tensor::filled(&[1, d], T::one()))?;
        store.insert("enc.ln_f.b", Tensor::zeros(&[1, d]))?;
    }
    Ok(())
}

/// Encodes `ids` into `H[len × d]`. Self-attention keys are restricted to
/// positions where `mask` is true; rows at masked positions are still computed
/// but nothing downstream reads them.
pub fn text_encode<T: Real>(
    g: &mut Graph<'_, T>,
    cfg: &TextEncoderConfig,
    ids: &[usize],
    mask: &[bool],
    frozen: bool,
) -> Result<Var> {
    let n = ids.len();
    if n > cfg.max_positions {
        return Err(Error::contract(format!(
            "sequence of {n} positions exceeds the positional table ({})",
            cfg.max_positions
        )));
    }
    if mask.len() != n {
        return Err(Error::Dimension(format!("mask length {} differs from {n} ids", mask.len())));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::contract(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
    }
    let p = |g: &mut Graph<'_, T>, name: &str| if frozen { g.frozen_param(name) } else { g.param(name) };

    let tok = p(g, "enc.tok_emb")?;
    let pos = p(g, "enc.pos_emb")?;
    let tok = g.gather_rows(tok, ids)?;
    let positions: Vec<usize> = (0..n).collect();
    let pos = g.gather_rows(pos, &positions)?;
    let mut x = g.add(tok, pos)?;
    if cfg.layers == 0 {
        return Ok(x);
    }
    let eps = T::lit(LN_EPS);
    let inv_sqrt_d = T::lit(1.0 / (cfg.d as f64).sqrt());
    for l in 0..cfg.layers {
        let names = layer_names(l);
        let w: Vec<Var> = names.iter().map(|nm| p(g, nm)).collect::<Result<_>>()?;
        let [ln1g, ln1b, wq, wk, wv, wo, ln2g, ln2b, ff1, ff1b, ff2, ff2b] = w[..] else { unreachable!() };

        let a = g.layer_norm(x, ln1g, ln1b, eps)?;
        let q = g.matmul(a, wq)?;
        let k = g.matmul(a, wk)?;
        let v = g.matmul(a, wv)?;
        let s = g.matmul_bt(q, k)?;
        let s = g.scale(s, inv_sqrt_d);
        let att = g.softmax_rows(s, Some(mask))?;
        let ctx = g.matmul(att, v)?;
        let o = g.matmul(ctx, wo)?;
        x = g.add(x, o)?;

        let b = g.layer_norm(x, ln2g, ln2b, eps)?;
        let f = g.matmul(b, ff1)?;
        let f = g.add_row(f, ff1b)?;
        let f = g.gelu(f);
        let f = g.matmul(f, ff2)?;
        let f = g.add_row(f, ff2b)?;
        x = g.add(x, f)?;
    }
    let gf = p(g, "enc.ln_f.g")?;
    let bf = p(g, "enc.ln_f.b")?;
    g.layer_norm(x, gf, bf, eps)
}
