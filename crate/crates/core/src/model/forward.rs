//! Forward computation of the joint model, one instance per graph.
//!
//! Weight matrices are stored in right-multiplication form: a row vector `x`
//! maps to `x · W`, so `W_Q^t` has shape `[d × d_a]` and the attribute head's
//! `W_3` has shape `[d × L]`.

use std::collections::BTreeSet;

use super::config::{AblationConfig, ModelConfig};
use crate::dataio::{Encoded, ImageFeatures};
use crate::encoders::{image_encode, text_encode};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};

/// Constant gate values replacing the learned gates, for identity checks.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GateOverride {
    pub global: Option<f64>,
    pub regional: Option<f64>,
}

impl GateOverride {
    pub fn zero() -> Self {
        GateOverride { global: Some(0.0), regional: Some(0.0) }
    }
}

pub struct ForwardInput<'x> {
    pub encoded: &'x Encoded,
    pub image: &'x ImageFeatures,
    /// Needed only when attributes are teacher-forced.
    pub gold_attributes: Option<&'x BTreeSet<usize>>,
}

#[derive(Clone, Copy, Debug)]
pub struct Attention {
    /// `[n × n]`, token to token.
    pub alpha_t: Var,
    /// `[n × K]`, token to region.
    pub alpha_v: Var,
}

/// Graph handles for every intermediate a loss or a report may need.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub h: Var,
    pub h_fused: Var,
    pub v_global: Var,
    pub regions: Var,
    pub attention: Attention,
    pub g_global: Option<Var>,
    pub g_regional: Option<Var>,
    /// `[1 × L]`
    pub y_attr: Var,
    /// `[n × (2L+1)]`
    pub y_value: Var,
}

/// Plain-tensor view of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<T> {
    pub y_attr: Vec<T>,
    pub y_value: Tensor<T>,
    pub h_fused: Tensor<T>,
    pub g_global: Option<Vec<T>>,
    pub g_regional: Option<Vec<T>>,
    pub alpha_t: Tensor<T>,
    pub alpha_v: Tensor<T>,
}

impl<T: Real> ForwardOutput<T> {
    pub fn from_graph(g: &Graph<'_, T>, v: &ForwardVars) -> Self {
        ForwardOutput {
            y_attr: g.value(v.y_attr).data().to_vec(),
            y_value: g.value(v.y_value).clone(),
            h_fused: g.value(v.h_fused).clone(),
            g_global: v.g_global.map(|x| g.value(x).data().to_vec()),
            g_regional: v.g_regional.map(|x| g.value(x).data().to_vec()),
            alpha_t: g.value(v.attention.alpha_t).clone(),
            alpha_v: g.value(v.attention.alpha_v).clone(),
        }
    }
}

fn inv_sqrt<T: Real>(n: usize) -> T {
    T::lit(1.0 / (n as f64).sqrt())
}

/// Token-token and token-region attention maps. Keys outside `mask` get weight 0.
pub fn cross_modality_attention<T: Real>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    h: Var,
    v: Var,
    mask: &[bool],
) -> Result<Attention> {
    let scale = inv_sqrt::<T>(cfg.d_a);
    let (wq_t, wk_t, wq_v, wk_v) =
        (g.param("fuse.wq_t")?, g.param("fuse.wk_t")?, g.param("fuse.wq_v")?, g.param("fuse.wk_v")?);

    let q = g.matmul(h, wq_t)?;
    let k = g.matmul(h, wk_t)?;
    let e_t = g.matmul_bt(q, k)?;
    let e_t = g.scale(e_t, scale);
    let alpha_t = g.softmax_rows(e_t, Some(mask))?;

    let q = g.matmul(h, wq_v)?;
    let k = g.matmul(v, wk_v)?;
    let e_v = g.matmul_bt(q, k)?;
    let e_v = g.scale(e_v, scale);
    let alpha_v = g.softmax_rows(e_v, None)?;
    Ok(Attention { alpha_t, alpha_v })
}

/// Per-token gate `σ(W_1 h_i + W_2 v_G + b)` as an `[n × 1]` column.
pub fn global_gate<T: Real>(g: &mut Graph<'_, T>, h: Var, v_global: Var) -> Result<Var> {
    let (w1, w2, b) = (g.param("gate.w1")?, g.param("gate.w2")?, g.param("gate.b")?);
    let from_text = g.matmul(h, w1)?;
    let from_image = g.matmul(v_global, w2)?;
    let z = g.add_scalar(from_text, from_image)?;
    let z = g.add_scalar(z, b)?;
    Ok(g.sigmoid(z))
}

/// Fused representation `h′_i = Σ_j α^t_ij W_V^t h_j + g_i^G Σ_k α^v_ik W_V^v v_k`.
///
/// `gate = None` applies the visual term ungated; the visual term is dropped
/// entirely when the global visual pathway is ablated.
pub fn fuse<T: Real>(
    g: &mut Graph<'_, T>,
    h: Var,
    v: Var,
    att: &Attention,
    gate: Option<Var>,
    ablation: &AblationConfig,
) -> Result<Var> {
    let wv_t = g.param("fuse.wv_t")?;
    let values = g.matmul(h, wv_t)?;
    let text = g.matmul(att.alpha_t, values)?;
    if !ablation.global_visual() {
        return Ok(text);
    }
    let wv_v = g.param("fuse.wv_v")?;
    let values = g.matmul(v, wv_v)?;
    let mut visual = g.matmul(att.alpha_v, values)?;
    if let Some(gate) = gate {
        visual = g.mul_col(visual, gate)?;
    }
    g.add(text, visual)
}

/// `ŷ^a = σ(W_3 Σ_i h_i + W_4 Σ_i h′_i + W_5 h_0)` with sums over `positions`.
pub fn predict_attributes<T: Real>(g: &mut Graph<'_, T>, h: Var, h_fused: Var, positions: &[usize]) -> Result<Var> {
    let (w3, w4, w5) = (g.param("head.w3")?, g.param("head.w4")?, g.param("head.w5")?);
    let sum_h = g.sum_rows(h, positions)?;
    let sum_hf = g.sum_rows(h_fused, positions)?;
    let h0 = g.gather_rows(h, &[0])?;
    let a = g.matmul(sum_h, w3)?;
    let b = g.matmul(sum_hf, w4)?;
    let c = g.matmul(h0, w5)?;
    let z = g.add(a, b)?;
    let z = g.add(z, c)?;
    Ok(g.sigmoid(z))
}

/// Per-region gate `σ(W_9 ŷ^a + W_10 v_k)` as a `[K × 1]` column.
pub fn regional_gate<T: Real>(g: &mut Graph<'_, T>, y_attr: Var, v: Var) -> Result<Var> {
    let (w9, w10) = (g.param("head.w9")?, g.param("head.w10")?);
    let from_regions = g.matmul(v, w10)?;
    let from_attrs = g.matmul(y_attr, w9)?;
    let z = g.add_scalar(from_regions, from_attrs)?;
    Ok(g.sigmoid(z))
}

/// Tag distribution per position:
/// `softmax(W_6 h_i + W_7 h′_i + W_8 ŷ^a + R Σ_k g_k^R α^v_ik W_V^v v_k)`.
///
/// `R` (`head.w_region`, `[d_a × (2L+1)]`) maps the `d_a`-wide regional
/// context into tag space. `attr_feed = None` drops the `W_8` term.
#[allow(clippy::too_many_arguments)]
pub fn extract_values<T: Real>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    h: Var,
    h_fused: Var,
    attr_feed: Option<Var>,
    v: Var,
    alpha_v: Var,
    gate: Option<Var>,
    ablation: &AblationConfig,
) -> Result<Var> {
    let (w6, w7) = (g.param("head.w6")?, g.param("head.w7")?);
    let a = g.matmul(h, w6)?;
    let b = g.matmul(h_fused, w7)?;
    let mut logits = g.add(a, b)?;
    if let Some(y) = attr_feed {
        let w8 = g.param("head.w8")?;
        let c = g.matmul(y, w8)?;
        logits = g.add_row(logits, c)?;
    }
    if ablation.regional_visual() {
        let wv = g.param(if cfg.untie_visual_value { "head.wv_v" } else { "fuse.wv_v" })?;
        let mut values = g.matmul(v, wv)?;
        if let Some(gate) = gate {
            values = g.mul_col(values, gate)?;
        }
        let ctx = g.matmul(alpha_v, values)?;
        let w_region = g.param("head.w_region")?;
        let r = g.matmul(ctx, w_region)?;
        logits = g.add(logits, r)?;
    }
    g.softmax_rows(logits, None)
}

fn gate_constant<T: Real>(g: &mut Graph<'_, T>, rows: usize, value: f64) -> Var {
    g.constant(Tensor::filled(&[rows, 1], T::lit(value)))
}

/// Builds the whole forward pass on `g`.
pub fn build_forward<T: Real>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    input: &ForwardInput<'_>,
    ablation: &AblationConfig,
    overrides: &GateOverride,
) -> Result<ForwardVars> {
    let enc = input.encoded;
    let n = enc.len();
    let h = text_encode(g, &cfg.text, &enc.ids, &enc.mask, cfg.freeze_text_encoder)?;
    let (v_global, regions) = image_encode(g, &cfg.image, input.image)?;
    let k = cfg.image.k;

    let attention = cross_modality_attention(g, cfg, h, regions, &enc.mask)?;
    let g_global = match overrides.global {
        Some(c) if ablation.global_visual() => Some(gate_constant(g, n, c)),
        None if ablation.global_visual() && ablation.use_global_gate => Some(global_gate(g, h, v_global)?),
        _ => None,
    };
    let h_fused = fuse(g, h, regions, &attention, g_global, ablation)?;

    let positions: Vec<usize> =
        if cfg.attr_sum_includes_special { (0..=enc.n_tokens + 1).collect() } else { enc.token_positions() };
    let y_attr = predict_attributes(g, h, h_fused, &positions)?;

    let attr_signal = if ablation.teacher_force_attributes {
        let gold =
            input.gold_attributes.ok_or_else(|| Error::contract("teacher-forced attributes need gold attributes"))?;
        let mut y = vec![T::zero(); cfg.num_labels];
        for &l in gold {
            y[l] = T::one();
        }
        g.constant(Tensor::row(y))
    } else {
        y_attr
    };

    let g_regional = match overrides.regional {
        Some(c) if ablation.regional_visual() => Some(gate_constant(g, k, c)),
        None if ablation.regional_visual() && ablation.use_regional_gate => {
            Some(regional_gate(g, attr_signal, regions)?)
        }
        _ => None,
    };
    let attr_feed = ablation.use_attr_feed.then_some(attr_signal);
    let y_value = extract_values(g, cfg, h, h_fused, attr_feed, regions, attention.alpha_v, g_regional, ablation)?;

    Ok(ForwardVars { h, h_fused, v_global, regions, attention, g_global, g_regional, y_attr, y_value })
}
