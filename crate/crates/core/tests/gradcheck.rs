//! Analytic gradients against central differences (h = 1e-3) in f64.

use layerprune::nn::init::init_model;
use layerprune::nn::presets::{plain_unit, residual_unit};
use layerprune::nn::{BatchNorm1d, Conv1d, Dense, Mode, ModelGraph, PrimitiveLayer, Skip, Tensor, Unit};
use layerprune::rng;
use rand::Rng;
use rand_distr::StandardNormal;

const H: f64 = 1e-3;
/// Whole networks couple every example through batch statistics, so a 1e-3
/// step regularly pushes some pre-activation across a ReLU kink.
const H_MODEL: f64 = 1e-6;
const TOL: f64 = 1e-3;

fn random(shape: &[usize], r: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.sample(StandardNormal)).collect()).unwrap()
}

/// ‖a − n‖ / max(‖a‖, ‖n‖)
fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na.max(nn) < 1e-12 {
        0.0
    } else {
        diff / na.max(nn)
    }
}

/// Scalar objective `Σ w ⊙ f(x)` so every output element contributes.
fn objective(y: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

fn check_layer(name: &str, layer: PrimitiveLayer<f64>, in_shape: &[usize], mode: Mode, seed: u64) {
    let mut r = rng::rng(seed);
    let mut layer = layer;
    for p in layer.params_mut() {
        *p = random(p.shape(), &mut r);
    }
    let x = random(in_shape, &mut r);
    let (y, cache) = layer.forward(&x, mode).unwrap();
    let w = random(y.shape(), &mut r);
    let mut grads: Vec<Tensor<f64>> = layer.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    let dx = layer.backward(&cache, &w, &mut grads);

    let f = |l: &PrimitiveLayer<f64>, x: &Tensor<f64>| objective(&l.forward(x, mode).unwrap().0, &w);
    let mut num_dx = vec![0.0; x.len()];
    for i in 0..x.len() {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp.data_mut()[i] += H;
        xm.data_mut()[i] -= H;
        num_dx[i] = (f(&layer, &xp) - f(&layer, &xm)) / (2.0 * H);
    }
    let e = rel_err(dx.data(), &num_dx);
    assert!(e <= TOL, "{name} input grad rel err {e}");

    for (pi, g) in grads.iter().enumerate() {
        let mut num = vec![0.0; g.len()];
        for i in 0..g.len() {
            let mut lp = layer.clone();
            lp.params_mut()[pi].data_mut()[i] += H;
            let mut lm = layer.clone();
            lm.params_mut()[pi].data_mut()[i] -= H;
            num[i] = (f(&lp, &x) - f(&lm, &x)) / (2.0 * H);
        }
        let e = rel_err(g.data(), &num);
        assert!(e <= TOL, "{name} param {pi} rel err {e}");
    }
}

#[test]
fn dense() {
    check_layer("dense", PrimitiveLayer::Dense(Dense::new(5, 3, true)), &[4, 5], Mode::Train, 1);
    check_layer("dense-nobias", PrimitiveLayer::Dense(Dense::new(3, 2, false)), &[2, 3], Mode::Train, 2);
}

#[test]
fn conv1d() {
    for (i, (k, s, p, bias)) in [(3, 1, 1, false), (3, 2, 1, true), (1, 2, 0, true), (5, 3, 2, true), (2, 1, 0, false)]
        .into_iter()
        .enumerate()
    {
        let conv = Conv1d::new(3, 4, k, s, p, bias);
        check_layer(&format!("conv k{k} s{s} p{p}"), PrimitiveLayer::Conv1d(conv), &[2, 3, 11], Mode::Train, 10 + i as u64);
    }
}

#[test]
fn batchnorm_train_and_eval() {
    let mut bn = BatchNorm1d::<f64>::new(3);
    bn.running_mean = Tensor::new(vec![3], vec![0.3, -0.2, 0.1]).unwrap();
    bn.running_var = Tensor::new(vec![3], vec![1.5, 0.7, 2.0]).unwrap();
    check_layer("bn-train", PrimitiveLayer::BatchNorm1d(bn.clone()), &[4, 3, 6], Mode::Train, 20);
    check_layer("bn-eval", PrimitiveLayer::BatchNorm1d(bn.clone()), &[4, 3, 6], Mode::Eval, 21);
    check_layer("bn-train-flat", PrimitiveLayer::BatchNorm1d(bn), &[5, 3], Mode::Train, 22);
}

#[test]
fn parameter_free_layers() {
    check_layer("relu", PrimitiveLayer::Relu, &[3, 2, 5], Mode::Train, 30);
    check_layer("gap", PrimitiveLayer::GlobalAvgPool1d, &[3, 2, 5], Mode::Train, 31);
    check_layer("flatten", PrimitiveLayer::Flatten, &[3, 2, 5], Mode::Train, 32);
}

/// Whole-model parameter gradients through `backward`.
fn check_model(name: &str, model: ModelGraph<f64>, in_shape: &[usize], mode: Mode, seed: u64) {
    let mut r = rng::rng(seed);
    let x = random(in_shape, &mut r);
    let (y, trace) = model.forward_traced(&x, mode).unwrap();
    let w = random(y.shape(), &mut r);
    let grads = model.backward(&trace, &w);
    let f = |m: &ModelGraph<f64>| objective(&m.forward(&x, mode).unwrap(), &w);
    let n_params = model.params().len();
    assert_eq!(grads.len(), n_params);
    for pi in 0..n_params {
        let mut num = vec![0.0; grads[pi].len()];
        for i in 0..num.len() {
            let mut mp = model.clone();
            mp.params_mut()[pi].data_mut()[i] += H_MODEL;
            let mut mm = model.clone();
            mm.params_mut()[pi].data_mut()[i] -= H_MODEL;
            num[i] = (f(&mp) - f(&mm)) / (2.0 * H_MODEL);
        }
        let e = rel_err(grads[pi].data(), &num);
        assert!(e <= TOL, "{name} param tensor {pi} rel err {e}");
    }
}

fn with_head(units: Vec<Unit>, channels: usize, seed: u64) -> ModelGraph<f64> {
    let mut m = ModelGraph {
        units,
        head: vec![PrimitiveLayer::GlobalAvgPool1d, PrimitiveLayer::Dense(Dense::new(channels, 3, true))],
        num_classes: 3,
    };
    init_model(&mut m, &mut rng::rng(seed));
    // non-trivial affine terms
    let mut r = rng::rng(seed + 100);
    for layer in m.layers_mut() {
        if let PrimitiveLayer::BatchNorm1d(bn) = layer {
            for v in bn.gamma.data_mut() {
                *v = 1.0 + 0.3 * r.sample::<f32, _>(StandardNormal);
            }
            for v in bn.beta.data_mut() {
                *v = 0.2 * r.sample::<f32, _>(StandardNormal);
            }
        }
    }
    m.cast()
}

#[test]
fn plain_and_residual_units() {
    let plain = with_head(vec![plain_unit(0, 2, 4, 1), plain_unit(1, 4, 4, 2)], 4, 40);
    check_model("plain", plain, &[3, 2, 9], Mode::Train, 41);

    let identity = with_head(vec![plain_unit(0, 2, 4, 1), residual_unit(1, 4, 4, 1)], 4, 42);
    assert!(matches!(identity.units[1].skip, Skip::Identity));
    check_model("residual-identity", identity.clone(), &[3, 2, 8], Mode::Train, 43);
    check_model("residual-identity-eval", identity, &[3, 2, 8], Mode::Eval, 44);

    let projection = with_head(vec![plain_unit(0, 2, 3, 1), residual_unit(1, 3, 5, 2)], 5, 45);
    assert!(matches!(projection.units[1].skip, Skip::Projection(_)));
    check_model("residual-projection", projection, &[2, 2, 9], Mode::Train, 46);
}
