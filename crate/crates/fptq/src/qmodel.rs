//! Recipe-driven quantized execution of the toy model.
//!
//! `quantize_model` first folds every LAE layer's scales into its preceding
//! normalization (and the consumer weight rows), then group-quantizes all
//! linear weights and attaches each layer's activation policy. The resulting
//! [`QuantizedModel`] runs the same chunked forward as the FP model; only the
//! linear kernels and the KV cache differ. Bit widths of 16 mean
//! pass-through: with W16/A16/KV16 the quantized forward is bitwise equal to
//! the FP forward.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kv::KvCache;
use crate::lae::fuse_scales_into_norm;
use crate::model::{
    parse_layer_id, LayerLoc, LayerRole, LinearSpec, ModelConfig, NormParams,
    Runner, RunnerBlock, ToyModel,
};
use crate::quant::{dequantize, quantize_weight_groupwise, ActQuantSpec, QuantTensor};
use crate::recipe::{ActStrategy, LayerPolicy, Recipe};
use crate::tensor::Tensor2D;

/// Weight payload of one quantized linear: the integer tensor is kept for
/// serialization, its dequantization is cached for execution. `Fp` holds the
/// untouched weight on 16-bit pass-through runs.
#[derive(Debug, Clone, PartialEq)]
pub enum QWeight {
    Fp(Tensor2D),
    Quantized { q: QuantTensor, dq: Tensor2D },
}

impl QWeight {
    pub fn as_fp(&self) -> &Tensor2D {
        match self {
            QWeight::Fp(t) => t,
            QWeight::Quantized { dq, .. } => dq,
        }
    }

    pub fn quantized(&self) -> Option<&QuantTensor> {
        match self {
            QWeight::Fp(_) => None,
            QWeight::Quantized { q, .. } => Some(q),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLinear {
    pub layer_id: String,
    pub weight: QWeight,
    pub act: ActQuantSpec,
}

impl QuantizedLinear {
    fn spec(&self) -> LinearSpec<'_> {
        LinearSpec {
            id: self.layer_id.clone(),
            weight: self.weight.as_fp(),
            act: self.act.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBlock {
    pub norm1: NormParams,
    pub wq: QuantizedLinear,
    pub wk: QuantizedLinear,
    pub wv: QuantizedLinear,
    pub wo: QuantizedLinear,
    pub norm2: NormParams,
    pub wgate: QuantizedLinear,
    pub wup: QuantizedLinear,
    pub wdown: QuantizedLinear,
}

/// Quantized checkpoint ready for execution: fused norms, quantized linear
/// weights, per-layer activation policies, and the recipe that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub config: ModelConfig,
    pub recipe: Recipe,
    pub embedding: Tensor2D,
    pub pos_embedding: Tensor2D,
    pub blocks: Vec<QuantizedBlock>,
    pub final_norm: NormParams,
    pub lm_head: QuantizedLinear,
}

impl QuantizedModel {
    pub fn linear(&self, id: &str) -> Option<&QuantizedLinear> {
        match parse_layer_id(id)? {
            LayerLoc::LmHead => Some(&self.lm_head),
            LayerLoc::Block(b, role) => {
                let blk = self.blocks.get(b)?;
                Some(match role {
                    LayerRole::Wq => &blk.wq,
                    LayerRole::Wk => &blk.wk,
                    LayerRole::Wv => &blk.wv,
                    LayerRole::Wo => &blk.wo,
                    LayerRole::Wgate => &blk.wgate,
                    LayerRole::Wup => &blk.wup,
                    LayerRole::Wdown => &blk.wdown,
                })
            }
        }
    }

    fn runner(&self) -> Runner<'_> {
        Runner {
            config: &self.config,
            embedding: &self.embedding,
            pos_embedding: &self.pos_embedding,
            blocks: self
                .blocks
                .iter()
                .map(|b| RunnerBlock {
                    norm1: &b.norm1,
                    wq: b.wq.spec(),
                    wk: b.wk.spec(),
                    wv: b.wv.spec(),
                    wo: b.wo.spec(),
                    norm2: &b.norm2,
                    wgate: b.wgate.spec(),
                    wup: b.wup.spec(),
                    wdown: b.wdown.spec(),
                })
                .collect(),
            final_norm: &self.final_norm,
            lm_head: self.lm_head.spec(),
        }
    }

    /// Fresh KV cache with the recipe's cache bit width (16 = pass-through).
    pub fn new_cache(&self) -> Result<KvCache> {
        let bits = match self.recipe.kv_bits {
            16 => None,
            b => Some(b),
        };
        KvCache::new(self.config.n_layers, self.config.d_model, self.config.max_seq, bits)
    }

    /// Full-sequence fake-quant forward. K/V rows pass through the quantized
    /// cache exactly as they do during incremental decoding.
    pub fn forward_quant(&self, tokens: &[u32]) -> Result<Tensor2D> {
        let mut cache = self.new_cache()?;
        self.runner().forward_chunk(tokens, &mut cache, &mut |_| {})
    }

    /// Single-token step reusing cached quantized K/V; returns this
    /// position's logits row.
    pub fn decode_step(&self, cache: &mut KvCache, token: u32) -> Result<Vec<f32>> {
        let logits = self.runner().forward_chunk(&[token], cache, &mut |_| {})?;
        Ok(logits.row(0).to_vec())
    }
}

fn norm_params_mut<'a>(model: &'a mut ToyModel, target: &str) -> Option<&'a mut NormParams> {
    if target == "final_norm" {
        return Some(&mut model.final_norm);
    }
    let rest = target.strip_prefix("blk")?;
    let dot = rest.find('.')?;
    let block: usize = rest[..dot].parse().ok()?;
    let blk = model.blocks.get_mut(block)?;
    match &rest[dot..] {
        ".norm1" => Some(&mut blk.norm1),
        ".norm2" => Some(&mut blk.norm2),
        _ => None,
    }
}

fn linear_weight_mut<'a>(model: &'a mut ToyModel, id: &str) -> Option<&'a mut Tensor2D> {
    match parse_layer_id(id)? {
        LayerLoc::LmHead => Some(&mut model.lm_head),
        LayerLoc::Block(b, role) => {
            let blk = model.blocks.get_mut(b)?;
            Some(match role {
                LayerRole::Wq => &mut blk.wq,
                LayerRole::Wk => &mut blk.wk,
                LayerRole::Wv => &mut blk.wv,
                LayerRole::Wo => &mut blk.wo,
                LayerRole::Wgate => &mut blk.wgate,
                LayerRole::Wup => &mut blk.wup,
                LayerRole::Wdown => &mut blk.wdown,
            })
        }
    }
}

/// Apply every LAE layer's equalization to a copy of the FP checkpoint: each
/// fusion target's gain (and bias) is divided by the shared scale vector once,
/// and every member weight's rows are multiplied by it. The fused model's FP
/// forward matches the original up to rounding.
pub fn apply_lae_fusion(model: &ToyModel, recipe: &Recipe) -> Result<ToyModel> {
    recipe.validate(Some(&model.config))?;
    let mut fused = model.clone();
    // group LAE policies by fusion target; each target is fused exactly once
    let mut targets: Vec<(&str, Vec<&LayerPolicy>)> = Vec::new();
    for layer in &recipe.layers {
        if layer.strategy != ActStrategy::LaeStaticPerTensor {
            continue;
        }
        let target = layer.fusion_target.as_deref().expect("validated LAE policy");
        match targets.iter_mut().find(|(t, _)| *t == target) {
            Some((_, members)) => members.push(layer),
            None => targets.push((target, vec![layer])),
        }
    }
    for (target, members) in targets {
        let scales = members[0].lae_scales.as_ref().expect("validated LAE policy");
        for other in &members[1..] {
            let s = other.lae_scales.as_ref().expect("validated LAE policy");
            if s.s != scales.s {
                return Err(Error::RecipeMismatch(format!(
                    "siblings fused into {target:?} carry different scale vectors"
                )));
            }
        }
        let norm = norm_params_mut(&mut fused, target).ok_or_else(|| {
            Error::RecipeMismatch(format!("fusion target {target:?} is not a normalization of this model"))
        })?;
        let (gain, bias) = fuse_scales_into_norm(&norm.gain, norm.bias.as_deref(), scales)?;
        norm.gain = gain;
        norm.bias = bias;
        for member in members {
            let w = linear_weight_mut(&mut fused, &member.layer_id).ok_or_else(|| {
                Error::RecipeMismatch(format!("unknown layer {:?}", member.layer_id))
            })?;
            let s = &member.lae_scales.as_ref().expect("validated LAE policy").s;
            if w.rows() != s.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{}: {} weight rows vs {} scales",
                    member.layer_id,
                    w.rows(),
                    s.len()
                )));
            }
            for r in 0..w.rows() {
                let scale = s[r];
                for v in w.row_mut(r) {
                    *v *= scale;
                }
            }
        }
    }
    Ok(fused)
}

pub(crate) fn act_spec_for(policy: &LayerPolicy, act_bits: u8) -> ActQuantSpec {
    if act_bits == 16 {
        return ActQuantSpec::None;
    }
    match policy.strategy {
        ActStrategy::StaticPerTensor | ActStrategy::LaeStaticPerTensor => ActQuantSpec::PerTensorStatic {
            absmax: policy.calibrated_absmax as f32,
            bits: act_bits,
        },
        ActStrategy::DynamicPerToken => ActQuantSpec::PerToken { bits: act_bits },
    }
}

/// Fuse, group-quantize, and attach activation policies. Idempotent for
/// identical inputs.
pub fn quantize_model(model: &ToyModel, recipe: &Recipe) -> Result<QuantizedModel> {
    model.validate()?;
    let fused = apply_lae_fusion(model, recipe)?;
    let quantize_weight = |id: &str, w: &Tensor2D| -> Result<(QWeight, ActQuantSpec)> {
        let policy = recipe.layer(id).expect("coverage validated");
        let weight = if recipe.weight_bits == 16 {
            QWeight::Fp(w.clone())
        } else {
            let q = quantize_weight_groupwise(w, recipe.weight_bits, recipe.group_size as usize)?;
            let dq = dequantize(&q);
            QWeight::Quantized { q, dq }
        };
        Ok((weight, act_spec_for(policy, recipe.act_bits)))
    };

    let mut blocks = Vec::with_capacity(fused.blocks.len());
    for (i, blk) in fused.blocks.iter().enumerate() {
        let mk = |role: &str, w: &Tensor2D| -> Result<QuantizedLinear> {
            let id = format!("blk{i}.{role}");
            let (weight, act) = quantize_weight(&id, w)?;
            Ok(QuantizedLinear { layer_id: id, weight, act })
        };
        blocks.push(QuantizedBlock {
            norm1: blk.norm1.clone(),
            wq: mk("attn.wq", &blk.wq)?,
            wk: mk("attn.wk", &blk.wk)?,
            wv: mk("attn.wv", &blk.wv)?,
            wo: mk("attn.wo", &blk.wo)?,
            norm2: blk.norm2.clone(),
            wgate: mk("mlp.wgate", &blk.wgate)?,
            wup: mk("mlp.wup", &blk.wup)?,
            wdown: mk("mlp.wdown", &blk.wdown)?,
        });
    }
    let (head_weight, head_act) = quantize_weight("lm_head", &fused.lm_head)?;
    Ok(QuantizedModel {
        config: fused.config,
        recipe: recipe.clone(),
        embedding: fused.embedding,
        pos_embedding: fused.pos_embedding,
        blocks,
        final_norm: fused.final_norm,
        lm_head: QuantizedLinear {
            layer_id: "lm_head".into(),
            weight: head_weight,
            act: head_act,
        },
    })
}

/// Greedy-decode `steps` tokens incrementally from `prompt` through the
/// quantized KV cache, then recompute the full sequence in one context pass
/// and check that every generated token equals the full-context argmax at its
/// position.
pub fn greedy_decode_matches_full(qm: &QuantizedModel, prompt: &[u32], steps: usize) -> Result<bool> {
    if prompt.is_empty() {
        return Err(Error::EmptyInput);
    }
    if prompt.len() + steps > qm.config.max_seq {
        return Err(Error::SeqTooLong {
            len: prompt.len() + steps,
            max: qm.config.max_seq,
        });
    }
    let mut cache = qm.new_cache()?;
    let mut seq = prompt.to_vec();
    let mut logits_row = Vec::new();
    for &tok in prompt {
        logits_row = qm.decode_step(&mut cache, tok)?;
    }
    for _ in 0..steps {
        let next = argmax(&logits_row) as u32;
        seq.push(next);
        logits_row = qm.decode_step(&mut cache, next)?;
    }
    let full = qm.forward_quant(&seq)?;
    for t in prompt.len()..seq.len() {
        if seq[t] as usize != argmax(full.row(t - 1)) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Index of the row maximum; ties resolve to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Quantization quality of one model against the FP reference, aggregated
/// over an evaluation token stream.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    /// Mean squared logit error over all positions and vocabulary entries.
    pub logit_mse: f64,
    /// Mean per-position cosine similarity of logit rows.
    pub cosine: f64,
    /// Fraction of positions whose argmax token agrees with FP.
    pub top1_agreement: f64,
    /// Mean next-token cross-entropy of the quantized model on the stream.
    pub xent_proxy: f64,
    pub sequences: usize,
    pub positions: usize,
}

struct SeqSums {
    sq_err: f64,
    cosine: f64,
    top1: u64,
    xent: f64,
    positions: usize,
    vocab_terms: usize,
    xent_terms: usize,
}

fn eval_sequence(fp: &ToyModel, qm: &QuantizedModel, seq: &[u32]) -> Result<SeqSums> {
    let reference = fp.forward_fp(seq)?;
    let quantized = qm.forward_quant(seq)?;
    let vocab = reference.cols();
    let mut sums = SeqSums {
        sq_err: 0.0,
        cosine: 0.0,
        top1: 0,
        xent: 0.0,
        positions: reference.rows(),
        vocab_terms: reference.rows() * vocab,
        xent_terms: 0,
    };
    for t in 0..reference.rows() {
        let a = reference.row(t);
        let b = quantized.row(t);
        let mut dot = 0.0f64;
        let mut na = 0.0f64;
        let mut nb = 0.0f64;
        for (x, y) in a.iter().zip(b) {
            let (x, y) = (*x as f64, *y as f64);
            sums.sq_err += (x - y) * (x - y);
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        sums.cosine += if na == 0.0 && nb == 0.0 {
            1.0
        } else if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na.sqrt() * nb.sqrt())
        };
        if argmax(a) == argmax(b) {
            sums.top1 += 1;
        }
        if t + 1 < seq.len() {
            // stable log-softmax cross-entropy of the quantized logits
            // against the actual next token
            let max = b.iter().fold(f32::NEG_INFINITY, |m, v| m.max(*v)) as f64;
            let lse = b.iter().map(|v| ((*v as f64) - max).exp()).sum::<f64>().ln() + max;
            sums.xent += lse - b[seq[t + 1] as usize] as f64;
            sums.xent_terms += 1;
        }
    }
    Ok(sums)
}

/// Compare the quantized model to the FP reference over an evaluation stream
/// (which should be disjoint from the calibration source). Sequences run in
/// parallel; sums reduce in sequence order, so the report is deterministic.
pub fn evaluate(fp: &ToyModel, qm: &QuantizedModel, seqs: &[Vec<u32>]) -> Result<MetricsReport> {
    if seqs.is_empty() {
        return Err(Error::EmptyInput);
    }
    if fp.model_id() != qm.recipe.model_id {
        return Err(Error::RecipeMismatch(format!(
            "evaluating {:?} against quantized {:?}",
            fp.model_id(),
            qm.recipe.model_id
        )));
    }
    let per_seq: Vec<SeqSums> = seqs
        .par_iter()
        .map(|seq| eval_sequence(fp, qm, seq))
        .collect::<Result<_>>()?;
    let mut sq_err = 0.0;
    let mut cosine = 0.0;
    let mut top1 = 0u64;
    let mut xent = 0.0;
    let mut positions = 0usize;
    let mut vocab_terms = 0usize;
    let mut xent_terms = 0usize;
    for s in &per_seq {
        sq_err += s.sq_err;
        cosine += s.cosine;
        top1 += s.top1;
        xent += s.xent;
        positions += s.positions;
        vocab_terms += s.vocab_terms;
        xent_terms += s.xent_terms;
    }
    Ok(MetricsReport {
        logit_mse: sq_err / vocab_terms as f64,
        cosine: cosine / positions as f64,
        top1_agreement: top1 as f64 / positions as f64,
        xent_proxy: if xent_terms == 0 { 0.0 } else { xent / xent_terms as f64 },
        sequences: seqs.len(),
        positions,
    })
}
