//! Metrics for both subtasks, image-awareness evaluation, teacher-forced upper
//! bounds and gate dumps.

mod awareness;
mod metrics;

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use awareness::{
    awareness, chi2_sf_even, derangement, fisher_combine, sign_flip_test, AwarenessConfig, AwarenessReport,
    SubtaskAwareness,
};
pub use metrics::{
    evaluate, f1_attributes, f1_values, full_length_tags, instance_attribute_f1, instance_value_f1, predict_all, score,
    LabelPrf, MetricsReport, Prf,
};

use crate::dataio::Instance;
use crate::error::{Error, Result};
use crate::model::{GateOverride, Model, Prediction};
use crate::numerics::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpperBound {
    /// Gold value spans given: value F1 is 1 and the attribute F1 is the model's.
    AttrGivenGoldValues,
    /// Gold attributes fed to the value head in place of predicted ones.
    ValueGivenGoldAttrs,
}

impl FromStr for UpperBound {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attr_given_gold_values" => Ok(UpperBound::AttrGivenGoldValues),
            "value_given_gold_attrs" => Ok(UpperBound::ValueGivenGoldAttrs),
            other => Err(Error::contract(format!(
                "unknown upper-bound mode `{other}`; expected attr_given_gold_values or value_given_gold_attrs"
            ))),
        }
    }
}

pub fn upper_bound_eval<T: Real>(model: &Model<T>, data: &[Instance], mode: UpperBound) -> Result<MetricsReport> {
    let none = GateOverride::default();
    let preds: Vec<Prediction> = match mode {
        UpperBound::ValueGivenGoldAttrs => {
            let forced = crate::model::AblationConfig { teacher_force_attributes: true, ..model.ablation };
            data.iter()
                .map(|inst| {
                    let p = model.predict_with(inst, &forced, &none)?;
                    Ok(Prediction { attributes: inst.attributes.clone(), ..p })
                })
                .collect::<Result<_>>()?
        }
        UpperBound::AttrGivenGoldValues => data
            .iter()
            .map(|inst| {
                let p = model.predict_with(inst, &model.ablation, &none)?;
                let tags = inst.tags.clone();
                Ok(Prediction { spans: crate::dataio::tags_to_spans(&tags), tags, ..p })
            })
            .collect::<Result<_>>()?,
    };
    score(&model.scheme, data, &preds)
}

/// Gate values of one instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateDump {
    pub id: String,
    /// `(token, g^G)` for each kept token.
    pub global: Vec<(String, f64)>,
    /// `g^R` per region.
    pub regional: Vec<f64>,
    /// Token-to-region attention, one row per kept token.
    pub alpha_v: Vec<Vec<f64>>,
}

impl GateDump {
    pub fn global_csv(&self) -> String {
        let mut s = String::from("token,g_global\n");
        for (tok, g) in &self.global {
            let tok = if tok.contains([',', '"']) { format!("\"{}\"", tok.replace('"', "\"\"")) } else { tok.clone() };
            writeln!(s, "{tok},{g}").unwrap();
        }
        s
    }

    pub fn regional_csv(&self) -> String {
        let mut s = String::from("region,g_regional\n");
        for (k, g) in self.regional.iter().enumerate() {
            writeln!(s, "{k},{g}").unwrap();
        }
        s
    }
}

/// Global gate per token and regional gate per region from the model's forward pass.
pub fn inspect_gates<T: Real>(model: &Model<T>, inst: &Instance) -> Result<GateDump> {
    let out = model.forward_with(model.value_store(), inst, &model.ablation, &GateOverride::default())?;
    let f = |x: &T| x.to_f64().unwrap();
    let global = out.g_global.ok_or_else(|| Error::contract("model has no global visual gate"))?;
    let regional = out.g_regional.ok_or_else(|| Error::contract("model has no regional visual gate"))?;
    let n = inst.tokens.len().min(model.config.max_len());
    Ok(GateDump {
        id: inst.id.clone(),
        global: (0..n).map(|i| (inst.tokens[i].clone(), f(&global[i + 1]))).collect(),
        regional: regional.iter().map(f).collect(),
        alpha_v: (1..=n).map(|i| out.alpha_v.row_slice(i).iter().map(f).collect()).collect(),
    })
}
