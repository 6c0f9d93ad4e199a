//! Analysis and evaluation report documents, plus the histogram CSV writer.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibrate::Histogram;
use crate::error::{Error, Result};
use crate::qmodel::MetricsReport;
use crate::recipe::{ActStrategy, Recipe};
use crate::tensor::ActivationStats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffectiveBitsSummary {
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerReport {
    pub layer_id: String,
    /// Calibrated pre-equalization input range.
    pub v: f64,
    pub strategy: ActStrategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_lae_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effective_bits: Option<EffectiveBitsSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeCheck {
    pub steps: usize,
    pub matched: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportDoc {
    pub tool_version: String,
    /// SHA-256 of the canonical recipe text.
    pub recipe_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<LayerReport>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decode_check: Option<DecodeCheck>,
    pub warnings: Vec<String>,
}

impl ReportDoc {
    pub fn new(recipe: &Recipe) -> Result<Self> {
        Ok(Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            recipe_digest: recipe.digest()?,
            layers: None,
            metrics: None,
            decode_check: None,
            warnings: Vec::new(),
        })
    }

    pub fn to_text(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
        std::fs::write(&tmp, self.to_text()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Per-layer rows of an analysis report, in recipe order.
pub fn layer_reports(
    recipe: &Recipe,
    stats: &std::collections::BTreeMap<String, ActivationStats>,
    act_bits: u8,
) -> Result<Vec<LayerReport>> {
    let eb_bits = if act_bits == 16 { 8 } else { act_bits };
    recipe
        .layers
        .iter()
        .map(|policy| {
            let s = stats.get(&policy.layer_id).ok_or_else(|| {
                Error::StatsMismatch(format!("no stats for layer {:?}", policy.layer_id))
            })?;
            let effective_bits = s.effective_bits(eb_bits).ok().map(|mut eb| {
                eb.sort_by(|a, b| a.partial_cmp(b).unwrap());
                EffectiveBitsSummary {
                    min: eb[0],
                    median: eb[eb.len() / 2],
                    max: eb[eb.len() - 1],
                }
            });
            Ok(LayerReport {
                layer_id: policy.layer_id.clone(),
                v: s.tensor_absmax as f64,
                strategy: policy.strategy,
                post_lae_max: (policy.strategy == ActStrategy::LaeStaticPerTensor)
                    .then_some(policy.calibrated_absmax),
                effective_bits,
            })
        })
        .collect()
}

/// CSV columns: bin_lo, bin_hi, count_pre, count_post.
pub fn write_histogram_csv(path: &Path, hist: &Histogram) -> Result<()> {
    let mut out = String::from("bin_lo,bin_hi,count_pre,count_post\n");
    for b in 0..hist.bins() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            hist.bin_lo[b], hist.bin_hi[b], hist.count_pre[b], hist.count_post[b]
        ));
    }
    let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
    std::fs::write(&tmp, out)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// File-system safe histogram file name for a layer id.
pub fn histogram_file_name(layer_id: &str) -> String {
    let safe: String = layer_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    format!("hist_{safe}.csv")
}
