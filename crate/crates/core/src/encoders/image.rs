use rand::Rng;
use serde::{Deserialize, Serialize};

use super::fan_in;
use crate::dataio::ImageFeatures;
use crate::error::Result;
use crate::numerics::{Graph, ParamStore, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEncoderConfig {
    pub d_v: usize,
    pub k: usize,
    /// Output width of an optional learned projection.
    pub proj: Option<usize>,
}

impl ImageEncoderConfig {
    /// Width of the vectors handed to the fusion layer.
    pub fn out_dim(&self) -> usize {
        self.proj.unwrap_or(self.d_v)
    }
}

pub fn init_image_encoder<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    cfg: &ImageEncoderConfig,
    rng: &mut R,
) -> Result<()> {
    if let Some(p) = cfg.proj {
        store.insert("img.proj", fan_in(rng, cfg.d_v, p))?;
    }
    Ok(())
}

/// Returns `(v_G [1 × d], V [K × d])`.
pub fn image_encode<T: Real>(
    g: &mut Graph<'_, T>,
    cfg: &ImageEncoderConfig,
    features: &ImageFeatures,
) -> Result<(Var, Var)> {
    features.check(cfg.d_v, cfg.k)?;
    let global = Tensor::row(features.global.iter().map(|&x| T::lit(f64::from(x))).collect());
    let regions =
        Tensor::new(vec![cfg.k, cfg.d_v], features.regions.iter().flatten().map(|&x| T::lit(f64::from(x))).collect())?;
    let vg = g.constant(global);
    let v = g.constant(regions);
    match cfg.proj {
        None => Ok((vg, v)),
        Some(_) => {
            let w = g.param("img.proj")?;
            Ok((g.matmul(vg, w)?, g.matmul(v, w)?))
        }
    }
}
