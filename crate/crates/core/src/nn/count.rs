//! Parameter and FLOP accounting.
//!
//! FLOPs are 2 × multiply-accumulates of Dense and Conv1d layers only;
//! BatchNorm, ReLU and pooling count as zero.

use super::model::{ModelGraph, Skip, INPUT_CHANNELS};
use super::tensor::Scalar;
use crate::error::Result;

/// Trainable scalars: weights, biases and BatchNorm affine terms.
pub fn count_params<T: Scalar>(model: &ModelGraph<T>) -> u64 {
    model.params().iter().map(|p| p.len() as u64).sum()
}

/// Per-unit FLOPs followed by the head's FLOPs.
pub fn flops_breakdown<T: Scalar>(model: &ModelGraph<T>, signal_length: usize) -> Result<Vec<u64>> {
    let mut shape = vec![INPUT_CHANNELS, signal_length];
    let mut out = Vec::with_capacity(model.units.len() + 1);
    for unit in &model.units {
        let input = shape.clone();
        let out_shape = unit.infer_shape(&input)?;
        let mut macs = 0;
        for layer in &unit.body {
            macs += layer.macs(&shape)?;
            shape = layer.infer_shape(&shape)?;
        }
        if let Skip::Projection(p) = &unit.skip {
            macs += p.macs(&input)?;
        }
        out.push(2 * macs);
        shape = out_shape;
    }
    let mut macs = 0;
    for layer in &model.head {
        macs += layer.macs(&shape)?;
        shape = layer.infer_shape(&shape)?;
    }
    out.push(2 * macs);
    Ok(out)
}

pub fn count_flops<T: Scalar>(model: &ModelGraph<T>, signal_length: usize) -> Result<u64> {
    model.shapes(signal_length)?;
    Ok(flops_breakdown(model, signal_length)?.into_iter().sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layer::{Conv1d, Dense, PrimitiveLayer};
    use crate::nn::model::Unit;

    fn single(body: Vec<PrimitiveLayer<f32>>, head: Vec<PrimitiveLayer<f32>>, classes: usize) -> ModelGraph<f32> {
        ModelGraph {
            units: vec![Unit {
                id: 0,
                body,
                skip: Skip::None,
                post_relu: false,
            }],
            head,
            num_classes: classes,
        }
    }

    #[test]
    fn conv_params_and_flops() {
        let m = single(
            vec![PrimitiveLayer::Conv1d(Conv1d::new(2, 16, 3, 1, 1, true))],
            vec![PrimitiveLayer::GlobalAvgPool1d],
            16,
        );
        assert_eq!(count_params(&m), 2 * 16 * 3 + 16);
        assert_eq!(count_flops(&m, 128).unwrap(), 24576);
    }

    #[test]
    fn dense_params_and_flops() {
        let m = single(
            vec![],
            vec![PrimitiveLayer::Flatten, PrimitiveLayer::Dense(Dense::new(64, 10, true))],
            10,
        );
        assert_eq!(count_params(&m), 650);
        assert_eq!(count_flops(&m, 32).unwrap(), 1280);
    }
}
