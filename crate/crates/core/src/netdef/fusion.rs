//! Test-time combination of stream logits.

use crate::error::Result;
use crate::netdef::model::StreamOutputs;
use crate::netdef::spec::validate_fusion;
use crate::tensor::{Element, Tensor};

/// Weighted sum of raw logits over streams `[g, p.., side..]`, and its
/// argmax (ties to the smallest class index).
pub fn fuse_predictions<T: Element>(outputs: &StreamOutputs<T>, weights: &[f64]) -> Result<(Tensor<T>, usize)> {
    let streams = outputs.streams();
    validate_fusion(weights, streams.len())?;
    let mut fused = Tensor::zeros(streams[0].shape());
    for (logits, &w) in streams.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let w = T::from_f64(w);
        for (acc, &z) in fused.data_mut().iter_mut().zip(logits.data()) {
            *acc += w * z;
        }
    }
    let class = fused.argmax();
    Ok((fused, class))
}
