use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::layer::PrimitiveLayer;
use super::model::{ModelGraph, Skip, Unit};
use super::tensor::{Scalar, Tensor};

fn normal_fill<T: Scalar, R: Rng + ?Sized>(t: &mut Tensor<T>, std: f64, rng: &mut R) {
    let dist = Normal::new(0.0, std).expect("finite std");
    for v in t.data_mut() {
        *v = T::of(dist.sample(rng));
    }
}

/// He-normal re-initialisation: weights ~ N(0, 2/fan_in), biases zero,
/// BatchNorm reset to identity with neutral running statistics.
pub fn kaiming_init<T: Scalar, R: Rng + ?Sized>(layer: &mut PrimitiveLayer<T>, rng: &mut R) {
    match layer {
        PrimitiveLayer::Dense(d) => {
            normal_fill(&mut d.weight, (2.0 / d.in_dim as f64).sqrt(), rng);
            if let Some(b) = &mut d.bias {
                b.data_mut().fill(T::zero());
            }
        }
        PrimitiveLayer::Conv1d(c) => {
            normal_fill(&mut c.weight, (2.0 / (c.in_ch * c.kernel) as f64).sqrt(), rng);
            if let Some(b) = &mut c.bias {
                b.data_mut().fill(T::zero());
            }
        }
        PrimitiveLayer::BatchNorm1d(bn) => {
            bn.gamma.data_mut().fill(T::one());
            bn.beta.data_mut().fill(T::zero());
            bn.running_mean.data_mut().fill(T::zero());
            bn.running_var.data_mut().fill(T::one());
        }
        PrimitiveLayer::Relu | PrimitiveLayer::GlobalAvgPool1d | PrimitiveLayer::Flatten => {}
    }
}

pub fn init_unit<T: Scalar, R: Rng + ?Sized>(unit: &mut Unit<T>, rng: &mut R) {
    for layer in unit.body.iter_mut() {
        kaiming_init(layer, rng);
    }
    if let Skip::Projection(p) = &mut unit.skip {
        kaiming_init(p, rng);
    }
}

pub fn init_model<T: Scalar, R: Rng + ?Sized>(model: &mut ModelGraph<T>, rng: &mut R) {
    for unit in model.units.iter_mut() {
        init_unit(unit, rng);
    }
    for layer in model.head.iter_mut() {
        kaiming_init(layer, rng);
    }
}
