//! Checkpoint assembly: FP and quantized models to containers and back.
//!
//! FP checkpoints store every tensor as f32. Quantized checkpoints store
//! linear weights as packed 4-bit nibbles (or i8 for 8-bit runs) with a
//! companion `<name>.scales` f32 tensor of shape [out_channels, n_groups],
//! and embed the recipe in the manifest.

use crate::error::{Error, Result};
use crate::formats::{pack4_rows, unpack4_rows, CheckpointContainer, TensorData};
use crate::model::{BlockParams, NormParams, ToyModel};
use crate::qmodel::{act_spec_for, QWeight, QuantizedBlock, QuantizedLinear, QuantizedModel};
use crate::quant::{dequantize, Granularity, QuantParams, QuantTensor};
use crate::tensor::Tensor2D;

fn vec_tensor(v: &[f32]) -> Result<TensorData> {
    Ok(TensorData::F32(Tensor2D::new(1, v.len(), v.to_vec())?))
}

fn push_norm(tensors: &mut Vec<(String, TensorData)>, prefix: &str, norm: &NormParams) -> Result<()> {
    tensors.push((format!("{prefix}.gain"), vec_tensor(&norm.gain)?));
    if let Some(bias) = &norm.bias {
        tensors.push((format!("{prefix}.bias"), vec_tensor(bias)?));
    }
    Ok(())
}

fn fetch_f32<'a>(c: &'a CheckpointContainer, name: &str) -> Result<&'a Tensor2D> {
    match c.tensor(name) {
        Some(TensorData::F32(t)) => Ok(t),
        Some(_) => Err(Error::Format(format!("tensor {name:?} is not f32"))),
        None => Err(Error::Format(format!("missing tensor {name:?}"))),
    }
}

fn fetch_vec(c: &CheckpointContainer, name: &str, dim: usize) -> Result<Vec<f32>> {
    let t = fetch_f32(c, name)?;
    if t.rows() != 1 || t.cols() != dim {
        return Err(Error::Format(format!(
            "tensor {name:?}: {}x{} (expected 1x{dim})",
            t.rows(),
            t.cols()
        )));
    }
    Ok(t.data().to_vec())
}

fn fetch_norm(c: &CheckpointContainer, prefix: &str, dim: usize) -> Result<NormParams> {
    let gain = fetch_vec(c, &format!("{prefix}.gain"), dim)?;
    let bias = match c.tensor(&format!("{prefix}.bias")) {
        Some(_) => Some(fetch_vec(c, &format!("{prefix}.bias"), dim)?),
        None => None,
    };
    Ok(NormParams { gain, bias })
}

/// FP checkpoint container (no recipe, all tensors f32).
pub fn model_to_container(model: &ToyModel) -> Result<CheckpointContainer> {
    model.validate()?;
    let mut tensors = Vec::new();
    tensors.push(("embedding".into(), TensorData::F32(model.embedding.clone())));
    tensors.push(("pos_embedding".into(), TensorData::F32(model.pos_embedding.clone())));
    for (i, b) in model.blocks.iter().enumerate() {
        push_norm(&mut tensors, &format!("blk{i}.norm1"), &b.norm1)?;
        tensors.push((format!("blk{i}.attn.wq"), TensorData::F32(b.wq.clone())));
        tensors.push((format!("blk{i}.attn.wk"), TensorData::F32(b.wk.clone())));
        tensors.push((format!("blk{i}.attn.wv"), TensorData::F32(b.wv.clone())));
        tensors.push((format!("blk{i}.attn.wo"), TensorData::F32(b.wo.clone())));
        push_norm(&mut tensors, &format!("blk{i}.norm2"), &b.norm2)?;
        tensors.push((format!("blk{i}.mlp.wgate"), TensorData::F32(b.wgate.clone())));
        tensors.push((format!("blk{i}.mlp.wup"), TensorData::F32(b.wup.clone())));
        tensors.push((format!("blk{i}.mlp.wdown"), TensorData::F32(b.wdown.clone())));
    }
    push_norm(&mut tensors, "final_norm", &model.final_norm)?;
    tensors.push(("lm_head".into(), TensorData::F32(model.lm_head.clone())));
    Ok(CheckpointContainer {
        model_config: model.config,
        recipe: None,
        tensors,
    })
}

pub fn model_from_container(c: &CheckpointContainer) -> Result<ToyModel> {
    let cfg = c.model_config;
    let d = cfg.d_model;
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        blocks.push(BlockParams {
            norm1: fetch_norm(c, &format!("blk{i}.norm1"), d)?,
            wq: fetch_f32(c, &format!("blk{i}.attn.wq"))?.clone(),
            wk: fetch_f32(c, &format!("blk{i}.attn.wk"))?.clone(),
            wv: fetch_f32(c, &format!("blk{i}.attn.wv"))?.clone(),
            wo: fetch_f32(c, &format!("blk{i}.attn.wo"))?.clone(),
            norm2: fetch_norm(c, &format!("blk{i}.norm2"), d)?,
            wgate: fetch_f32(c, &format!("blk{i}.mlp.wgate"))?.clone(),
            wup: fetch_f32(c, &format!("blk{i}.mlp.wup"))?.clone(),
            wdown: fetch_f32(c, &format!("blk{i}.mlp.wdown"))?.clone(),
        });
    }
    let model = ToyModel {
        config: cfg,
        embedding: fetch_f32(c, "embedding")?.clone(),
        pos_embedding: fetch_f32(c, "pos_embedding")?.clone(),
        blocks,
        final_norm: fetch_norm(c, "final_norm", d)?,
        lm_head: fetch_f32(c, "lm_head")?.clone(),
    };
    model.validate()?;
    Ok(model)
}

fn push_weight(tensors: &mut Vec<(String, TensorData)>, id: &str, weight: &QWeight) -> Result<()> {
    match weight {
        QWeight::Fp(t) => tensors.push((id.to_string(), TensorData::F32(t.clone()))),
        QWeight::Quantized { q, .. } => {
            let (rows, cols) = (q.rows(), q.cols());
            let data = match q.params().bits {
                4 => TensorData::Packed4 {
                    rows,
                    cols,
                    data: pack4_rows(rows, cols, q.q())?,
                },
                8 => TensorData::I8 {
                    rows,
                    cols,
                    data: q.q().to_vec(),
                },
                bits => return Err(Error::Format(format!("unsupported stored bit width {bits}"))),
            };
            tensors.push((id.to_string(), data));
            let n_groups = rows.div_ceil(q.params().group_size);
            let scales = Tensor2D::new(cols, n_groups, q.params().scales.clone())?;
            tensors.push((format!("{id}.scales"), TensorData::F32(scales)));
        }
    }
    Ok(())
}

fn fetch_weight(c: &CheckpointContainer, id: &str, bits: u8, group_size: usize) -> Result<QWeight> {
    if bits == 16 {
        return Ok(QWeight::Fp(fetch_f32(c, id)?.clone()));
    }
    let (rows, cols, q_values) = match c.tensor(id) {
        Some(TensorData::Packed4 { rows, cols, data }) if bits == 4 => {
            (*rows, *cols, unpack4_rows(*rows, *cols, data)?)
        }
        Some(TensorData::I8 { rows, cols, data }) if bits == 8 => (*rows, *cols, data.clone()),
        Some(other) => {
            return Err(Error::Format(format!(
                "tensor {id:?}: dtype {:?} does not match weight_bits {bits}",
                other.dtype()
            )))
        }
        None => return Err(Error::Format(format!("missing tensor {id:?}"))),
    };
    let scales_t = fetch_f32(c, &format!("{id}.scales"))?;
    let n_groups = rows.div_ceil(group_size);
    if scales_t.rows() != cols || scales_t.cols() != n_groups {
        return Err(Error::Format(format!(
            "tensor {id:?}.scales: {}x{} (expected {cols}x{n_groups})",
            scales_t.rows(),
            scales_t.cols()
        )));
    }
    let params = QuantParams::new(bits, Granularity::GroupWise, group_size, scales_t.data().to_vec())
        .map_err(|e| Error::Format(format!("tensor {id:?}: {e}")))?;
    let q = QuantTensor::from_parts(rows, cols, q_values, params)
        .map_err(|e| Error::Format(format!("tensor {id:?}: {e}")))?;
    let dq = dequantize(&q);
    Ok(QWeight::Quantized { q, dq })
}

/// Quantized checkpoint container with the recipe embedded.
pub fn quantized_to_container(qm: &QuantizedModel) -> Result<CheckpointContainer> {
    let mut tensors = Vec::new();
    tensors.push(("embedding".into(), TensorData::F32(qm.embedding.clone())));
    tensors.push(("pos_embedding".into(), TensorData::F32(qm.pos_embedding.clone())));
    for (i, b) in qm.blocks.iter().enumerate() {
        push_norm(&mut tensors, &format!("blk{i}.norm1"), &b.norm1)?;
        for lin in [&b.wq, &b.wk, &b.wv, &b.wo] {
            push_weight(&mut tensors, &lin.layer_id, &lin.weight)?;
        }
        push_norm(&mut tensors, &format!("blk{i}.norm2"), &b.norm2)?;
        for lin in [&b.wgate, &b.wup, &b.wdown] {
            push_weight(&mut tensors, &lin.layer_id, &lin.weight)?;
        }
    }
    push_norm(&mut tensors, "final_norm", &qm.final_norm)?;
    push_weight(&mut tensors, "lm_head", &qm.lm_head.weight)?;
    Ok(CheckpointContainer {
        model_config: qm.config,
        recipe: Some(qm.recipe.clone()),
        tensors,
    })
}

pub fn quantized_from_container(c: &CheckpointContainer) -> Result<QuantizedModel> {
    let cfg = c.model_config;
    let d = cfg.d_model;
    let recipe = c
        .recipe
        .clone()
        .ok_or_else(|| Error::Format("quantized checkpoint carries no recipe".into()))?;
    recipe.validate(Some(&cfg))?;
    let bits = recipe.weight_bits;
    let group_size = recipe.group_size as usize;
    let mk = |id: String| -> Result<QuantizedLinear> {
        let policy = recipe
            .layer(&id)
            .ok_or_else(|| Error::Format(format!("recipe misses layer {id:?}")))?;
        Ok(QuantizedLinear {
            weight: fetch_weight(c, &id, bits, group_size)?,
            act: act_spec_for(policy, recipe.act_bits),
            layer_id: id,
        })
    };
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        blocks.push(QuantizedBlock {
            norm1: fetch_norm(c, &format!("blk{i}.norm1"), d)?,
            wq: mk(format!("blk{i}.attn.wq"))?,
            wk: mk(format!("blk{i}.attn.wk"))?,
            wv: mk(format!("blk{i}.attn.wv"))?,
            wo: mk(format!("blk{i}.attn.wo"))?,
            norm2: fetch_norm(c, &format!("blk{i}.norm2"), d)?,
            wgate: mk(format!("blk{i}.mlp.wgate"))?,
            wup: mk(format!("blk{i}.mlp.wup"))?,
            wdown: mk(format!("blk{i}.mlp.wdown"))?,
        });
    }
    Ok(QuantizedModel {
        config: cfg,
        embedding: fetch_f32(c, "embedding")?.clone(),
        pos_embedding: fetch_f32(c, "pos_embedding")?.clone(),
        blocks,
        final_norm: fetch_norm(c, "final_norm", d)?,
        lm_head: mk("lm_head".into())?,
        recipe,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrate::{calibrate, CalibSource};
    use crate::lae::LaeConfig;
    use crate::model::{generate_checkpoint, NormKind, OutlierProfile};
    use crate::qmodel::quantize_model;
    use crate::recipe::{build_recipe, PolicyThresholds, QuantSettings};

    fn setup(norm: NormKind, weight_bits: u8) -> (ToyModel, QuantizedModel) {
        let config = ModelConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            vocab_size: 128,
            max_seq: 64,
            norm_kind: norm,
        };
        let (model, _) = generate_checkpoint(&config, &OutlierProfile::outlier(), 17).unwrap();
        let stats = calibrate(&model, &CalibSource::random(4, 16, 3)).unwrap();
        let quant = QuantSettings {
            weight_bits,
            ..QuantSettings::default()
        };
        let (recipe, _) = build_recipe(
            &config,
            &stats,
            &PolicyThresholds::default(),
            &LaeConfig::default(),
            &quant,
        )
        .unwrap();
        let qm = quantize_model(&model, &recipe).unwrap();
        (model, qm)
    }

    #[test]
    fn fp_model_round_trip() {
        let (model, _) = setup(NormKind::RmsNorm, 4);
        let c = model_to_container(&model).unwrap();
        let back = model_from_container(&c).unwrap();
        assert_eq!(back, model);
        // serialized bytes stable across a reparse
        let bytes = c.to_bytes().unwrap();
        let c2 = CheckpointContainer::from_bytes(&bytes).unwrap();
        assert_eq!(c2.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn quantized_round_trip_4bit() {
        let (_, qm) = setup(NormKind::RmsNorm, 4);
        let c = quantized_to_container(&qm).unwrap();
        let back = quantized_from_container(&c).unwrap();
        assert_eq!(back, qm);
    }

    #[test]
    fn quantized_round_trip_8bit_and_layernorm_bias() {
        let (_, qm) = setup(NormKind::LayerNorm, 8);
        assert!(qm.blocks[0].norm1.bias.is_some());
        let c = quantized_to_container(&qm).unwrap();
        let back = quantized_from_container(&c).unwrap();
        assert_eq!(back, qm);
    }

    #[test]
    fn unpack_dequantize_matches_in_memory_bitwise() {
        let (_, qm) = setup(NormKind::RmsNorm, 4);
        let c = quantized_to_container(&qm).unwrap();
        let bytes = c.to_bytes().unwrap();
        let back = quantized_from_container(&CheckpointContainer::from_bytes(&bytes).unwrap()).unwrap();
        for id in crate::model::linear_layer_ids(&qm.config) {
            let orig = qm.linear(&id).unwrap();
            let loaded = back.linear(&id).unwrap();
            assert_eq!(
                orig.weight.as_fp().data(),
                loaded.weight.as_fp().data(),
                "{id}: dequantized weights differ"
            );
        }
    }

    #[test]
    fn missing_recipe_rejected() {
        let (model, _) = setup(NormKind::RmsNorm, 4);
        let c = model_to_container(&model).unwrap();
        assert!(matches!(
            quantized_from_container(&c),
            Err(Error::Format(_))
        ));
    }
}
