//! The joint multimodal model: fusion layer, attribute head, value head.

mod checkpoint;
mod config;
mod forward;

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{config_hash, load_checkpoint, save_checkpoint};
pub use config::{AblationConfig, ModelConfig};
pub use forward::{
    build_forward, cross_modality_attention, extract_values, fuse, global_gate, predict_attributes, regional_gate,
    Attention, ForwardInput, ForwardOutput, ForwardVars, GateOverride,
};

use crate::dataio::{encode, tags_to_spans, Encoded, Instance, Span, Tag, TagScheme, Vocabulary};
use crate::encoders::{fan_in, init_image_encoder, init_text_encoder};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Real, Tensor};

/// Decision threshold on attribute probabilities.
pub const ATTR_THRESHOLD: f64 = 0.5;

/// Draws every parameter of the model from `seed`.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    init_text_encoder(&mut s, &cfg.text, &mut rng)?;
    init_image_encoder(&mut s, &cfg.image, &mut rng)?;
    let (d, d_a, d_v) = (cfg.text.d, cfg.d_a, cfg.image.out_dim());
    let (l, t) = (cfg.num_labels, cfg.num_tags());
    s.insert("fuse.wq_t", fan_in(&mut rng, d, d_a))?;
    s.insert("fuse.wk_t", fan_in(&mut rng, d, d_a))?;
    s.insert("fuse.wv_t", fan_in(&mut rng, d, d_a))?;
    s.insert("fuse.wq_v", fan_in(&mut rng, d, d_a))?;
    s.insert("fuse.wk_v", fan_in(&mut rng, d_v, d_a))?;
    s.insert("fuse.wv_v", fan_in(&mut rng, d_v, d_a))?;
    s.insert("gate.w1", fan_in(&mut rng, d, 1))?;
    s.insert("gate.w2", fan_in(&mut rng, d_v, 1))?;
    s.insert("gate.b", Tensor::zeros(&[1, 1]))?;
    s.insert("head.w3", fan_in(&mut rng, d, l))?;
    s.insert("head.w4", fan_in(&mut rng, d_a, l))?;
    s.insert("head.w5", fan_in(&mut rng, d, l))?;
    s.insert("head.w6", fan_in(&mut rng, d, t))?;
    s.insert("head.w7", fan_in(&mut rng, d_a, t))?;
    s.insert("head.w8", fan_in(&mut rng, l, t))?;
    s.insert("head.w9", fan_in(&mut rng, l, 1))?;
    s.insert("head.w10", fan_in(&mut rng, d_v, 1))?;
    s.insert("head.w_region", fan_in(&mut rng, d_a, t))?;
    if cfg.untie_visual_value {
        s.insert("head.wv_v", fan_in(&mut rng, d_v, d_a))?;
    }
    Ok(s)
}

/// Decoded output for one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub attr_probs: Vec<f64>,
    pub attributes: BTreeSet<usize>,
    /// Arg-max tag for each kept token.
    pub tags: Vec<Tag>,
    pub spans: Vec<Span>,
}

/// A trained (or freshly initialised) model with everything needed to run it.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub ablation: AblationConfig,
    pub scheme: TagScheme,
    pub vocab: Vocabulary,
    pub params: ParamStore<T>,
    /// Separate parameters serving the value task when the tasks were trained apart.
    pub value_params: Option<ParamStore<T>>,
}

impl<T: Real> Model<T> {
    pub fn new(
        config: ModelConfig,
        ablation: AblationConfig,
        scheme: TagScheme,
        vocab: Vocabulary,
        seed: u64,
    ) -> Result<Self> {
        ablation.validate()?;
        if scheme.num_labels() != config.num_labels {
            return Err(Error::contract(format!(
                "scheme has {} labels but the model expects {}",
                scheme.num_labels(),
                config.num_labels
            )));
        }
        if vocab.len() != config.text.vocab_size {
            return Err(Error::contract(format!(
                "vocabulary has {} entries, model expects {}",
                vocab.len(),
                config.text.vocab_size
            )));
        }
        let params = init_params(&config, seed)?;
        let value_params = (!ablation.use_mtl).then(|| params.clone());
        Ok(Model { config, ablation, scheme, vocab, params, value_params })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            ablation: self.ablation,
            scheme: self.scheme.clone(),
            vocab: self.vocab.clone(),
            params: self.params.cast(),
            value_params: self.value_params.as_ref().map(ParamStore::cast),
        }
    }

    pub fn encode(&self, inst: &Instance) -> Result<Encoded> {
        encode(inst, &self.vocab, self.config.max_len())
    }

    /// Parameters that produce the value head's output.
    pub fn value_store(&self) -> &ParamStore<T> {
        self.value_params.as_ref().unwrap_or(&self.params)
    }

    /// Forward pass of `inst` through `params`.
    pub fn forward_with(
        &self,
        params: &ParamStore<T>,
        inst: &Instance,
        ablation: &AblationConfig,
        overrides: &GateOverride,
    ) -> Result<ForwardOutput<T>> {
        let enc = self.encode(inst)?;
        let input = ForwardInput { encoded: &enc, image: &inst.image, gold_attributes: Some(&inst.attributes) };
        let mut g = Graph::with_params(params);
        let vars = build_forward(&mut g, &self.config, &input, ablation, overrides)?;
        Ok(ForwardOutput::from_graph(&g, &vars))
    }

    pub fn forward(&self, inst: &Instance) -> Result<ForwardOutput<T>> {
        self.forward_with(&self.params, inst, &self.ablation, &GateOverride::default())
    }

    /// Thresholded attributes and decoded value spans.
    pub fn predict_with(
        &self,
        inst: &Instance,
        ablation: &AblationConfig,
        overrides: &GateOverride,
    ) -> Result<Prediction> {
        let attr_out = self.forward_with(&self.params, inst, ablation, overrides)?;
        let value_out = match &self.value_params {
            Some(vp) => self.forward_with(vp, inst, ablation, overrides)?,
            None => attr_out.clone(),
        };
        let attr_probs: Vec<f64> = attr_out.y_attr.iter().map(|p| p.to_f64().unwrap()).collect();
        let attributes = (0..attr_probs.len()).filter(|&l| attr_probs[l] >= ATTR_THRESHOLD).collect();
        let n = inst.tokens.len().min(self.config.max_len());
        let tags = (1..=n)
            .map(|i| {
                let row = value_out.y_value.row_slice(i);
                let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                self.scheme.tag_at(best)
            })
            .collect::<Result<Vec<_>>>()?;
        let spans = tags_to_spans(&tags);
        Ok(Prediction { attr_probs, attributes, tags, spans })
    }

    pub fn predict(&self, inst: &Instance) -> Result<Prediction> {
        self.predict_with(inst, &self.ablation, &GateOverride::default())
    }
}
