//! Layerwise activation quantization policy and the recipe document.
//!
//! Classification of a layer's calibrated input range v:
//!   v <= v0        -> static per-tensor
//!   v0 < v < v1    -> equalize (LAE), then static per-tensor
//!   v >= v1        -> dynamic per-token
//! Weights are always quantized group-wise. An LAE-band layer whose input has
//! no fusable preceding normalization is downgraded to dynamic per-token with
//! a warning rather than scaled eagerly at runtime.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lae::{shared_scales_for_siblings, LaeConfig, LaeScales};
use crate::model::{linear_layer_ids, sibling_groups, ModelConfig};
use crate::tensor::ActivationStats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyThresholds {
    pub v0: f64,
    pub v1: f64,
}

impl Default for PolicyThresholds {
    fn default() -> Self {
        Self { v0: 15.0, v1: 150.0 }
    }
}

impl PolicyThresholds {
    /// Degenerate thresholds (v0 = v1, or +inf to force every layer static)
    /// are permitted; v0 > v1 is not.
    pub fn new(v0: f64, v1: f64) -> Result<Self> {
        if !(v0 > 0.0) || v0 > v1 || v0.is_nan() || v1.is_nan() {
            return Err(Error::InvalidArg(format!(
                "thresholds must satisfy 0 < v0 <= v1, got v0={v0}, v1={v1}"
            )));
        }
        Ok(Self { v0, v1 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActStrategy {
    StaticPerTensor,
    LaeStaticPerTensor,
    DynamicPerToken,
}

/// Boundary semantics are literal: v == v0 stays static, v == v1 goes dynamic.
pub fn classify_range(v: f64, thresholds: &PolicyThresholds) -> ActStrategy {
    if v <= thresholds.v0 {
        ActStrategy::StaticPerTensor
    } else if v < thresholds.v1 {
        ActStrategy::LaeStaticPerTensor
    } else {
        ActStrategy::DynamicPerToken
    }
}

pub fn classify_layer(stats: &ActivationStats, thresholds: &PolicyThresholds) -> ActStrategy {
    classify_range(stats.tensor_absmax as f64, thresholds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerPolicy {
    pub layer_id: String,
    pub strategy: ActStrategy,
    /// Static quantization range; for LAE layers this is the post-equalization
    /// range max_i(m_i / s_i).
    pub calibrated_absmax: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lae_scales: Option<LaeScales>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion_target: Option<String>,
}

impl LayerPolicy {
    fn validate(&self) -> Result<()> {
        if !(self.calibrated_absmax > 0.0) || !self.calibrated_absmax.is_finite() {
            return Err(Error::RecipeSchema(format!(
                "layer {:?}: calibrated_absmax must be > 0",
                self.layer_id
            )));
        }
        let is_lae = self.strategy == ActStrategy::LaeStaticPerTensor;
        if is_lae != self.lae_scales.is_some() {
            return Err(Error::RecipeSchema(format!(
                "layer {:?}: lae_scales present iff strategy is lae_static_per_tensor",
                self.layer_id
            )));
        }
        if is_lae && self.fusion_target.is_none() {
            return Err(Error::RecipeSchema(format!(
                "layer {:?}: LAE strategy requires a fusion_target",
                self.layer_id
            )));
        }
        if let Some(s) = &self.lae_scales {
            if s.s.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Error::RecipeSchema(format!(
                    "layer {:?}: non-positive LAE scale",
                    self.layer_id
                )));
            }
        }
        Ok(())
    }
}

fn valid_bits(bits: u8) -> bool {
    matches!(bits, 4 | 8 | 16)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    pub model_id: String,
    pub thresholds: PolicyThresholds,
    pub lae_alpha: f64,
    pub weight_bits: u8,
    pub act_bits: u8,
    pub group_size: u64,
    pub kv_bits: u8,
    pub layers: Vec<LayerPolicy>,
}

impl Recipe {
    pub fn layer(&self, id: &str) -> Option<&LayerPolicy> {
        self.layers.iter().find(|l| l.layer_id == id)
    }

    pub fn validate(&self, config: Option<&ModelConfig>) -> Result<()> {
        if !valid_bits(self.weight_bits) || !valid_bits(self.act_bits) || !valid_bits(self.kv_bits) {
            return Err(Error::RecipeSchema(format!(
                "bit widths must be 4, 8 or 16 (weight {}, act {}, kv {})",
                self.weight_bits, self.act_bits, self.kv_bits
            )));
        }
        if self.group_size == 0 {
            return Err(Error::RecipeSchema("group_size must be >= 1".into()));
        }
        PolicyThresholds::new(self.thresholds.v0, self.thresholds.v1)
            .map_err(|e| Error::RecipeSchema(e.to_string()))?;
        if !(self.lae_alpha > 0.0) || !self.lae_alpha.is_finite() {
            return Err(Error::RecipeSchema("lae_alpha must be > 0".into()));
        }
        let mut seen = BTreeSet::new();
        for layer in &self.layers {
            layer.validate()?;
            if !seen.insert(layer.layer_id.as_str()) {
                return Err(Error::RecipeSchema(format!(
                    "layer {:?} appears more than once",
                    layer.layer_id
                )));
            }
        }
        if let Some(cfg) = config {
            if self.model_id != cfg.model_id() {
                return Err(Error::RecipeMismatch(format!(
                    "recipe model_id {:?} vs model {:?}",
                    self.model_id,
                    cfg.model_id()
                )));
            }
            let expected: BTreeSet<String> = linear_layer_ids(cfg).into_iter().collect();
            let got: BTreeSet<String> = self.layers.iter().map(|l| l.layer_id.clone()).collect();
            if expected != got {
                let missing: Vec<_> = expected.difference(&got).cloned().collect();
                let extra: Vec<_> = got.difference(&expected).cloned().collect();
                return Err(Error::RecipeMismatch(format!(
                    "layer coverage mismatch (missing {missing:?}, extra {extra:?})"
                )));
            }
        }
        Ok(())
    }

    /// Canonical document: fixed key order (struct order), shortest
    /// round-trip float formatting, two-space indentation, trailing newline.
    pub fn to_canonical_text(&self) -> Result<String> {
        self.validate(None)?;
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::RecipeSchema(e.to_string()))?;
        text.push('\n');
        Ok(text)
    }

    /// Strict parse: unknown fields are rejected, schema violations name the
    /// offending field.
    pub fn from_text(text: &str) -> Result<Recipe> {
        let recipe: Recipe =
            serde_json::from_str(text).map_err(|e| Error::RecipeSchema(e.to_string()))?;
        recipe.validate(None)?;
        Ok(recipe)
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn digest(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let text = self.to_canonical_text()?;
        let hash = Sha256::digest(text.as_bytes());
        Ok(hash.iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// Bit widths and weight group size for a quantization run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantSettings {
    pub weight_bits: u8,
    pub act_bits: u8,
    pub group_size: usize,
    pub kv_bits: u8,
}

impl Default for QuantSettings {
    fn default() -> Self {
        Self {
            weight_bits: 4,
            act_bits: 8,
            group_size: 128,
            kv_bits: 8,
        }
    }
}

impl QuantSettings {
    pub fn validate(&self) -> Result<()> {
        if !valid_bits(self.weight_bits) || !valid_bits(self.act_bits) || !valid_bits(self.kv_bits) {
            return Err(Error::InvalidArg(format!(
                "bit widths must be 4, 8 or 16 (weight {}, act {}, kv {})",
                self.weight_bits, self.act_bits, self.kv_bits
            )));
        }
        if self.group_size == 0 {
            return Err(Error::InvalidArg("group_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Group size that degenerates group-wise quantization to per-channel for any
/// realistic input dimension; used by the naive baseline recipe.
pub const PER_CHANNEL_GROUP_SIZE: u64 = 1 << 20;

/// Floor applied to a calibrated range of exactly zero (dead layer input) so
/// the static scale stays positive.
const ABSMAX_FLOOR: f64 = 1e-8;

/// Run the layerwise policy over calibrated statistics and emit one
/// LayerPolicy per linear layer. Sibling groups fed by the same normalization
/// share one LAE scale vector and name that normalization as fusion target.
/// Returns the recipe plus any downgrade warnings.
pub fn build_recipe(
    config: &ModelConfig,
    stats: &BTreeMap<String, ActivationStats>,
    thresholds: &PolicyThresholds,
    lae_cfg: &LaeConfig,
    quant: &QuantSettings,
) -> Result<(Recipe, Vec<String>)> {
    config.validate()?;
    quant.validate()?;
    let thresholds = PolicyThresholds::new(thresholds.v0, thresholds.v1)?;
    let mut layers = Vec::new();
    let mut warnings = Vec::new();

    for group in sibling_groups(config) {
        let member_stats: Vec<&ActivationStats> = group
            .members
            .iter()
            .map(|id| {
                stats
                    .get(id)
                    .ok_or_else(|| Error::StatsMismatch(format!("no calibration stats for layer {id:?}")))
            })
            .collect::<Result<_>>()?;
        // computed at most once per sibling group
        let mut shared: Option<LaeScales> = None;
        for (id, layer_stats) in group.members.iter().zip(&member_stats) {
            let v = layer_stats.tensor_absmax as f64;
            let mut strategy = if quant.act_bits == 16 {
                // pass-through runs need no activation policy
                ActStrategy::StaticPerTensor
            } else {
                classify_range(v, &thresholds)
            };
            if strategy == ActStrategy::LaeStaticPerTensor && group.fusion_target.is_none() {
                warnings.push(format!(
                    "layer {id:?} (range {v:.3}) is in the LAE band but has no fusable preceding normalization; downgraded to dynamic per-token"
                ));
                strategy = ActStrategy::DynamicPerToken;
            }
            let policy = match strategy {
                ActStrategy::LaeStaticPerTensor => {
                    if shared.is_none() {
                        shared = Some(shared_scales_for_siblings(&member_stats, lae_cfg)?);
                    }
                    let scales = shared.as_ref().unwrap();
                    // post-equalization range from the stored f32 scales
                    let post = layer_stats
                        .channel_absmax
                        .iter()
                        .zip(&scales.s)
                        .map(|(m, s)| *m as f64 / *s as f64)
                        .fold(0.0f64, f64::max);
                    LayerPolicy {
                        layer_id: id.clone(),
                        strategy,
                        calibrated_absmax: post.max(ABSMAX_FLOOR),
                        lae_scales: Some(LaeScales {
                            layer_id: id.clone(),
                            s: scales.s.clone(),
                        }),
                        fusion_target: group.fusion_target.clone(),
                    }
                }
                _ => LayerPolicy {
                    layer_id: id.clone(),
                    strategy,
                    calibrated_absmax: v.max(ABSMAX_FLOOR),
                    lae_scales: None,
                    fusion_target: None,
                },
            };
            layers.push(policy);
        }
    }

    let recipe = Recipe {
        model_id: config.model_id(),
        thresholds,
        lae_alpha: lae_cfg.alpha,
        weight_bits: quant.weight_bits,
        act_bits: quant.act_bits,
        group_size: quant.group_size as u64,
        kv_bits: quant.kv_bits,
        layers,
    };
    recipe.validate(Some(config))?;
    Ok((recipe, warnings))
}

/// Baseline recipe for comparison runs: no equalization, every activation
/// static per-tensor, per-channel weights (whole-channel groups).
pub fn build_recipe_naive(
    config: &ModelConfig,
    stats: &BTreeMap<String, ActivationStats>,
    quant: &QuantSettings,
) -> Result<Recipe> {
    config.validate()?;
    quant.validate()?;
    let mut layers = Vec::new();
    for id in linear_layer_ids(config) {
        let layer_stats = stats
            .get(&id)
            .ok_or_else(|| Error::StatsMismatch(format!("no calibration stats for layer {id:?}")))?;
        layers.push(LayerPolicy {
            layer_id: id,
            strategy: ActStrategy::StaticPerTensor,
            calibrated_absmax: (layer_stats.tensor_absmax as f64).max(ABSMAX_FLOOR),
            lae_scales: None,
            fusion_target: None,
        });
    }
    let recipe = Recipe {
        model_id: config.model_id(),
        thresholds: PolicyThresholds {
            v0: f64::MAX,
            v1: f64::MAX,
        },
        lae_alpha: 1.0,
        weight_bits: quant.weight_bits,
        act_bits: quant.act_bits,
        group_size: PER_CHANNEL_GROUP_SIZE,
        kv_bits: quant.kv_bits,
        layers,
    };
    recipe.validate(Some(config))?;
    Ok(recipe)
}
