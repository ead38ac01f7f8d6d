use serde::{Deserialize, Serialize};

use crate::encoders::{ImageEncoderConfig, TextEncoderConfig};
use crate::error::{Error, Result};

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub text: TextEncoderConfig,
    pub image: ImageEncoderConfig,
    /// Attention vector size; also the width of the fused representation.
    pub d_a: usize,
    pub num_labels: usize,
    /// Give the value head its own visual value matrix instead of sharing the fusion layer's.
    #[serde(default)]
    pub untie_visual_value: bool,
    /// Include `[CLS]`/`[SEP]` rows in the attribute head's token sums.
    #[serde(default)]
    pub attr_sum_includes_special: bool,
    #[serde(default)]
    pub freeze_text_encoder: bool,
}

impl ModelConfig {
    pub fn num_tags(&self) -> usize {
        2 * self.num_labels + 1
    }

    pub fn max_len(&self) -> usize {
        self.text.max_positions - 2
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.text;
        if t.d == 0 || t.vocab_size < 4 || t.max_positions < 5 || (t.layers > 0 && t.ff == 0) {
            return Err(Error::contract(format!("invalid text encoder config {t:?}")));
        }
        if self.d_a == 0
            || self.num_labels == 0
            || self.image.d_v == 0
            || self.image.k == 0
            || self.image.proj == Some(0)
        {
            return Err(Error::contract("d_a, num_labels, d_v and K must be positive"));
        }
        Ok(())
    }
}

/// Switches selecting the joint model's variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub use_visual: bool,
    /// Visual term of the fused representation.
    pub use_global_attention: bool,
    /// Visual term inside the value softmax.
    pub use_regional_attention: bool,
    pub use_global_gate: bool,
    pub use_regional_gate: bool,
    pub use_attr_feed: bool,
    pub use_mtl: bool,
    pub use_kl: bool,
    pub teacher_force_attributes: bool,
    pub teacher_force_values: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self::multimodal()
    }
}

const KEYS: [&str; 10] = [
    "use_visual",
    "use_global_attention",
    "use_regional_attention",
    "use_global_gate",
    "use_regional_gate",
    "use_attr_feed",
    "use_mtl",
    "use_kl",
    "teacher_force_attributes",
    "teacher_force_values",
];

impl AblationConfig {
    /// Full model with both visual pathways and both gates.
    pub fn multimodal() -> Self {
        AblationConfig {
            use_visual: true,
            use_global_attention: true,
            use_regional_attention: true,
            use_global_gate: true,
            use_regional_gate: true,
            use_attr_feed: true,
            use_mtl: true,
            use_kl: true,
            teacher_force_attributes: false,
            teacher_force_values: false,
        }
    }

    /// Text-only joint model.
    pub fn text_only() -> Self {
        AblationConfig {
            use_visual: false,
            use_global_attention: false,
            use_regional_attention: false,
            use_global_gate: false,
            use_regional_gate: false,
            ..Self::multimodal()
        }
    }

    pub fn valid_keys() -> &'static [&'static str] {
        &KEYS
    }

    fn slot(&mut self, key: &str) -> Option<&mut bool> {
        Some(match key {
            "use_visual" => &mut self.use_visual,
            "use_global_attention" => &mut self.use_global_attention,
            "use_regional_attention" => &mut self.use_regional_attention,
            "use_global_gate" => &mut self.use_global_gate,
            "use_regional_gate" => &mut self.use_regional_gate,
            "use_attr_feed" => &mut self.use_attr_feed,
            "use_mtl" => &mut self.use_mtl,
            "use_kl" => &mut self.use_kl,
            "teacher_force_attributes" => &mut self.teacher_force_attributes,
            "teacher_force_values" => &mut self.teacher_force_values,
            _ => return None,
        })
    }

    /// Applies comma-separated `key=bool` overrides, e.g. `use_kl=false,use_mtl=false`.
    ///
    /// Turning `use_visual` off also turns off every visual switch not named
    /// explicitly; naming one of them `true` alongside it is an error.
    pub fn apply(&mut self, overrides: &str) -> Result<()> {
        let mut named = Vec::new();
        for item in overrides.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| Error::contract(format!("ablation override `{item}` is not key=value")))?;
            let key = key.trim();
            let value: bool = match value.trim() {
                "true" | "1" | "on" => true,
                "false" | "0" | "off" => false,
                other => return Err(Error::contract(format!("ablation `{key}` needs true/false, got `{other}`"))),
            };
            *self.slot(key).ok_or_else(|| Error::UnknownAblation { key: key.to_string(), valid: KEYS.join(", ") })? =
                value;
            named.push(key.to_string());
        }
        if !self.use_visual {
            for key in &KEYS[1..5] {
                if !named.iter().any(|n| n == key) {
                    *self.slot(key).unwrap() = false;
                }
            }
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.use_visual
            && (self.use_global_gate
                || self.use_regional_gate
                || self.use_global_attention
                || self.use_regional_attention)
        {
            return Err(Error::contract("visual gates and attention require use_visual=true"));
        }
        Ok(())
    }

    pub(crate) fn global_visual(&self) -> bool {
        self.use_visual && self.use_global_attention
    }

    pub(crate) fn regional_visual(&self) -> bool {
        self.use_visual && self.use_regional_attention
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn visual_off_cascades() {
        let mut a = AblationConfig::multimodal();
        a.apply("use_visual=false").unwrap();
        assert_eq!(a, AblationConfig::text_only());
    }

    #[test]
    fn contradictory_switches_rejected() {
        let mut a = AblationConfig::multimodal();
        assert!(a.apply("use_visual=false,use_global_gate=true").is_err());
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = AblationConfig::multimodal().apply("use_klx=false").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let msg = err.to_string();
        assert!(msg.contains("use_klx") && msg.contains("use_kl,") && msg.contains("teacher_force_values"), "{msg}");
    }

    #[test]
    fn several_overrides() {
        let mut a = AblationConfig::text_only();
        a.apply("use_kl=false, use_attr_feed=0").unwrap();
        assert!(!a.use_kl && !a.use_attr_feed && a.use_mtl);
    }
}
