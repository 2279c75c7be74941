//! Post-training conversion: dense weights to symmetric int8, activation
//! ranges frozen.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{Layout, Model};
use crate::numerics::ParamId;
use crate::quantization::WeightTensor;

/// Parameters stored as int8: every dense weight (the tied generation head
/// shares the embedding table).
pub fn quantized_param_ids(layout: &Layout) -> Vec<ParamId> {
    let mut ids: Vec<ParamId> = layout.linears().iter().map(|l| l.w).collect();
    ids.push(layout.decoder.embedding);
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// An 8-bit model. `model.params` holds the dequantized weights so float code
/// paths see exactly what the integer kernels compute with.
#[derive(Clone, Debug)]
pub struct QuantizedModel {
    pub model: Model<f32>,
    pub weights: BTreeMap<ParamId, WeightTensor>,
}

impl QuantizedModel {
    /// Convert a trained float model. Requires a learned range on both sides of
    /// every dense map.
    pub fn from_float(model: &Model<f32>) -> Result<Self> {
        model.ranges.check_complete(&model.layout)?;
        let mut out = model.clone();
        let mut weights = BTreeMap::new();
        for id in quantized_param_ids(&model.layout) {
            let w = WeightTensor::quantize(model.params.get(id));
            out.params.replace(id, w.dequantize())?;
            weights.insert(id, w);
        }
        Ok(QuantizedModel { model: out, weights })
    }

    /// Reassemble from loaded parts; `model.params` entries for quantized ids
    /// are overwritten with the dequantized int8 values.
    pub fn from_parts(mut model: Model<f32>, weights: BTreeMap<ParamId, WeightTensor>) -> Result<Self> {
        model.ranges.check_complete(&model.layout)?;
        for id in quantized_param_ids(&model.layout) {
            let name = model.params.name(id).to_string();
            let w = weights.get(&id).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if [w.rows, w.cols] != model.params.get(id).shape() {
                return Err(Error::ModelFile(format!("int8 tensor `{}` has the wrong shape", name)));
            }
            model.params.replace(id, w.dequantize())?;
        }
        if weights.len() != quantized_param_ids(&model.layout).len() {
            return Err(Error::ModelFile("unexpected int8 tensors".into()));
        }
        Ok(QuantizedModel { model, weights })
    }

    pub fn weight(&self, id: ParamId) -> Result<&WeightTensor> {
        self.weights
            .get(&id)
            .ok_or_else(|| Error::MissingTensor(self.model.params.name(id).to_string()))
    }
}
