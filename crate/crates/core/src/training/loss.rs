use std::collections::BTreeSet;

use crate::dataio::{Tag, TagScheme};
use crate::error::Result;
use crate::numerics::{Graph, Real, Tensor, Var, LOG_FLOOR};

/// Mean binary cross-entropy over the `L` labels. Probabilities are clamped to
/// `[1e-12, 1 − 1e-12]` through the log floor.
pub fn loss_attribute<T: Real>(g: &mut Graph<'_, T>, y_attr: Var, gold: &BTreeSet<usize>) -> Result<Var> {
    let l = g.dims(y_attr).1;
    let floor = T::lit(LOG_FLOOR);
    let y: Vec<T> = (0..l).map(|i| if gold.contains(&i) { T::one() } else { T::zero() }).collect();
    let not_y: Vec<T> = y.iter().map(|&v| T::one() - v).collect();
    let y = g.constant(Tensor::row(y));
    let not_y = g.constant(Tensor::row(not_y));
    let log_p = g.log(y_attr, floor);
    let q = g.rsub(T::one(), y_attr);
    let log_q = g.log(q, floor);
    let a = g.mul(y, log_p)?;
    let b = g.mul(not_y, log_q)?;
    let s = g.add(a, b)?;
    let s = g.sum(s);
    Ok(g.scale(s, -T::one() / T::lit(l as f64)))
}

/// Mean over `positions` of `−log ŷ_i[y_i]`; `gold[k]` is the tag index at `positions[k]`.
pub fn loss_value<T: Real>(g: &mut Graph<'_, T>, y_value: Var, positions: &[usize], gold: &[usize]) -> Result<Var> {
    let at: Vec<(usize, usize)> = positions.iter().copied().zip(gold.iter().copied()).collect();
    let p = g.pick(y_value, &at)?;
    let lp = g.log(p, T::lit(LOG_FLOOR));
    let s = g.sum(lp);
    Ok(g.scale(s, -T::one() / T::lit(at.len() as f64)))
}

/// `ŷ^{v→a}_l = ½ (max_i ŷ_i(B_l) + max_i ŷ_i(I_l))` over `positions`, as `[1 × L]`.
pub fn map_value_to_attribute<T: Real>(
    g: &mut Graph<'_, T>,
    y_value: Var,
    positions: &[usize],
    num_labels: usize,
) -> Result<Var> {
    let m = g.max_rows(y_value, positions)?;
    let b_cols: Vec<usize> = (0..num_labels).map(|l| 1 + 2 * l).collect();
    let i_cols: Vec<usize> = (0..num_labels).map(|l| 2 + 2 * l).collect();
    let b = g.select_cols(m, &b_cols)?;
    let i = g.select_cols(m, &i_cols)?;
    let s = g.add(b, i)?;
    Ok(g.scale(s, T::lit(0.5)))
}

/// `Σ_l ŷ^a_l · ln(ŷ^a_l / ŷ^{v→a}_l)`, evaluated as written. Neither argument
/// is a normalised distribution, so the value can be negative.
pub fn kl_penalty<T: Real>(g: &mut Graph<'_, T>, y_attr: Var, y_mapped: Var) -> Result<Var> {
    let floor = T::lit(LOG_FLOOR);
    let la = g.log(y_attr, floor);
    let lm = g.log(y_mapped, floor);
    let d = g.sub(la, lm)?;
    let prod = g.mul(y_attr, d)?;
    Ok(g.sum(prod))
}

/// `Loss_a + Loss_v + λ · KL`.
pub fn total_loss<T: Real>(g: &mut Graph<'_, T>, loss_a: Var, loss_v: Var, kl: Var, lambda: f64) -> Result<Var> {
    let s = g.add(loss_a, loss_v)?;
    if lambda == 0.0 {
        return Ok(s);
    }
    let k = g.scale(kl, T::lit(lambda));
    g.add(s, k)
}

/// One-hot tag matrix of `tags` placed at rows `1..=tags.len()` of an `n`-row table.
pub(crate) fn one_hot_tags<T: Real>(scheme: &TagScheme, tags: &[Tag], n: usize) -> Tensor<T> {
    let t = scheme.num_tags();
    let mut m = Tensor::zeros(&[n, t]);
    for (i, &tag) in tags.iter().enumerate() {
        m.data_mut()[(i + 1) * t + scheme.tag_index(tag)] = T::one();
    }
    m
}
