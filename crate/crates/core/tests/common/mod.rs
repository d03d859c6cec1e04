#![allow(dead_code)]

use patchfold::manifold::{ae_objective, cvae_objective, Architecture};
use patchfold::neural::{kl_gaussian, mse_loss, LayerSpec, Network, Tensor};
use patchfold::patch::{ParamGroupId, PatchShape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Step for the per-layer central differences.
pub const H_LAYER: f64 = 1e-3;
/// Smaller step for whole-model objectives, where a 1e-3 nudge can push a
/// hidden ReLU across its kink.
pub const H_MODEL: f64 = 1e-6;
pub const MAX_REL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Below this norm a gradient is compared absolutely: rounding in the
/// difference quotient alone reaches ~1e-10.
const NORM_FLOOR: f64 = 1e-6;

/// `‖a − b‖ / max(‖a‖, ‖b‖, NORM_FLOOR)`.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(NORM_FLOOR)
}

/// Random biases so that few hidden ReLUs start dead.
fn jitter_biases(net: &mut Network<f64>, rng: &mut ChaCha8Rng) {
    for p in net.params_mut() {
        let n = p.bias.len();
        p.bias = uniform(rng, n, -0.2, 0.5);
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values in `±[0.1, 1]`, kept away from the ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect()
}

/// Compares backward against central differences of `L = Σ r ⊙ net(x)`
/// for every parameter and every input element; returns the worst
/// relative error.
pub fn check_network(net: &mut Network<f64>, x: &Tensor<f64>, r: &Tensor<f64>, h: f64) -> f64 {
    let objective = |net: &Network<f64>, x: &Tensor<f64>| -> f64 {
        let y = net.infer(x).unwrap();
        y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };
    let (_, tape) = net.forward(x).unwrap();
    let (grads, dx) = net.backward(&tape, r).unwrap();

    let mut worst: f64 = 0.0;
    for layer in 0..net.params().len() {
        for which in 0..2 {
            let len = if which == 0 {
                net.params()[layer].weight.len()
            } else {
                net.params()[layer].bias.len()
            };
            if len == 0 {
                continue;
            }
            let mut numeric = Vec::with_capacity(len);
            for j in 0..len {
                let nudge = |net: &mut Network<f64>, delta: f64| {
                    let p = &mut net.params_mut()[layer];
                    let buf = if which == 0 { &mut p.weight } else { &mut p.bias };
                    buf[j] += delta;
                };
                nudge(net, h);
                let up = objective(net, x);
                nudge(net, -2.0 * h);
                let down = objective(net, x);
                nudge(net, h);
                numeric.push((up - down) / (2.0 * h));
            }
            let analytic = if which == 0 {
                &grads.layers[layer].weight
            } else {
                &grads.layers[layer].bias
            };
            worst = worst.max(rel_error(analytic, &numeric));
        }
    }

    let mut xs = x.clone();
    let mut numeric = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        let orig = xs.data()[j];
        xs.data_mut()[j] = orig + h;
        let up = objective(net, &xs);
        xs.data_mut()[j] = orig - h;
        let down = objective(net, &xs);
        xs.data_mut()[j] = orig;
        numeric.push((up - down) / (2.0 * h));
    }
    worst.max(rel_error(dx.data(), &numeric))
}

/// A random single-layer instance of the given kind, with its input.
pub fn random_layer(kind: &str, rng: &mut ChaCha8Rng) -> (LayerSpec, Vec<usize>) {
    match kind {
        "conv2d" => {
            let kernel = rng.random_range(1..=3);
            let stride = rng.random_range(1..=2);
            let padding = rng.random_range(0..kernel);
            let h = rng.random_range(kernel.max(2)..=6);
            let w = rng.random_range(kernel.max(2)..=6);
            let c = rng.random_range(1..=3);
            (
                LayerSpec::Conv2d {
                    in_channels: c,
                    out_channels: rng.random_range(1..=3),
                    kernel,
                    stride,
                    padding,
                },
                vec![c, h, w],
            )
        }
        "transposed_conv2d" => {
            let kernel = rng.random_range(1..=3);
            let stride = rng.random_range(1..=2);
            let padding = rng.random_range(0..kernel);
            let output_padding = rng.random_range(0..stride);
            let c = rng.random_range(1..=3);
            let h = rng.random_range(2..=4);
            let w = rng.random_range(2..=4);
            (
                LayerSpec::TransposedConv2d {
                    in_channels: c,
                    out_channels: rng.random_range(1..=3),
                    kernel,
                    stride,
                    padding,
                    output_padding,
                },
                vec![c, h, w],
            )
        }
        "dense" => {
            let fan_in = rng.random_range(1..=6);
            (
                LayerSpec::Dense {
                    fan_in,
                    fan_out: rng.random_range(1..=5),
                },
                vec![fan_in],
            )
        }
        "relu" => (LayerSpec::Relu, vec![rng.random_range(1..=3), 2, 3]),
        "sigmoid" => (LayerSpec::Sigmoid, vec![rng.random_range(1..=3), 3]),
        "flatten" => (LayerSpec::Flatten, vec![2, rng.random_range(1..=3), 2]),
        "reshape" => {
            let a = rng.random_range(1..=3);
            (LayerSpec::Reshape { shape: vec![a, 2, 2] }, vec![4 * a])
        }
        other => panic!("unknown layer kind {other}"),
    }
}

pub const LAYER_KINDS: [&str; 7] = [
    "conv2d",
    "transposed_conv2d",
    "dense",
    "relu",
    "sigmoid",
    "flatten",
    "reshape",
];

/// Worst relative error for one random instance of `kind`. Geometries that
/// yield an empty output are redrawn.
pub fn layer_instance(kind: &str, seed: u64) -> f64 {
    let mut r = rng(seed);
    loop {
        let (spec, input) = random_layer(kind, &mut r);
        let Ok(out) = spec.output_shape(&input) else { continue };
        let batch = r.random_range(1..=2);
        let mut net = Network::<f64>::new(vec![spec], input.clone(), r.random()).unwrap();
        jitter_biases(&mut net, &mut r);
        let in_len: usize = input.iter().product::<usize>() * batch;
        let out_len: usize = out.iter().product::<usize>() * batch;
        let mut in_shape = vec![batch];
        in_shape.extend(&input);
        let mut out_shape = vec![batch];
        out_shape.extend(&out);
        let x = Tensor::new(in_shape, away_from_zero(&mut r, in_len)).unwrap();
        let up = Tensor::new(out_shape, uniform(&mut r, out_len, -1.0, 1.0)).unwrap();
        return check_network(&mut net, &x, &up, H_LAYER);
    }
}

pub fn mse_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = vec![r.random_range(1..=3), r.random_range(1..=4)];
    let n = shape.iter().product();
    let pred = Tensor::new(shape.clone(), uniform(&mut r, n, -1.0, 1.0)).unwrap();
    let target = Tensor::new(shape, uniform(&mut r, n, -1.0, 1.0)).unwrap();
    let (_, grad) = mse_loss(&pred, &target).unwrap();
    let mut p = pred.clone();
    let numeric: Vec<f64> = (0..n)
        .map(|j| {
            let orig = p.data()[j];
            p.data_mut()[j] = orig + H_LAYER;
            let up = mse_loss(&p, &target).unwrap().0;
            p.data_mut()[j] = orig - H_LAYER;
            let down = mse_loss(&p, &target).unwrap().0;
            p.data_mut()[j] = orig;
            (up - down) / (2.0 * H_LAYER)
        })
        .collect();
    rel_error(grad.data(), &numeric)
}

pub fn kl_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = vec![r.random_range(1..=3), r.random_range(1..=3)];
    let n = shape.iter().product();
    let mu = Tensor::new(shape.clone(), uniform(&mut r, n, -2.0, 2.0)).unwrap();
    let lv = Tensor::new(shape, uniform(&mut r, n, -2.0, 2.0)).unwrap();
    let out = kl_gaussian(&mu, &lv).unwrap();
    let fd = |which: usize| -> Vec<f64> {
        let (mut m, mut l) = (mu.clone(), lv.clone());
        (0..n)
            .map(|j| {
                let t = if which == 0 { &mut m } else { &mut l };
                let orig = t.data()[j];
                t.data_mut()[j] = orig + H_LAYER;
                let up = kl_gaussian(&m, &l).unwrap().loss;
                let t = if which == 0 { &mut m } else { &mut l };
                t.data_mut()[j] = orig - H_LAYER;
                let down = kl_gaussian(&m, &l).unwrap().loss;
                let t = if which == 0 { &mut m } else { &mut l };
                t.data_mut()[j] = orig;
                (up - down) / (2.0 * H_LAYER)
            })
            .collect()
    };
    rel_error(out.grad_mu.data(), &fd(0)).max(rel_error(out.grad_logvar.data(), &fd(1)))
}

fn tiny_shape() -> PatchShape {
    PatchShape::new(4, 4)
}

fn tiny_arch() -> Architecture {
    Architecture { channels: vec![2, 3] }
}

fn tiny_batch(r: &mut ChaCha8Rng, b: usize) -> Tensor<f64> {
    let s = tiny_shape();
    Tensor::new(
        vec![b, s.channels, s.height, s.width],
        uniform(r, b * s.len(), 0.0, 1.0),
    )
    .unwrap()
}

fn fd_params<F>(net: &mut Network<f64>, h: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&Network<f64>) -> f64,
{
    let mut out = Vec::new();
    for layer in 0..net.params().len() {
        for which in 0..2 {
            let len = if which == 0 {
                net.params()[layer].weight.len()
            } else {
                net.params()[layer].bias.len()
            };
            for j in 0..len {
                let nudge = |net: &mut Network<f64>, d: f64| {
                    let p = &mut net.params_mut()[layer];
                    let buf = if which == 0 { &mut p.weight } else { &mut p.bias };
                    buf[j] += d;
                };
                nudge(net, h);
                let up = f(net);
                nudge(net, -2.0 * h);
                let down = f(net);
                nudge(net, h);
                out.push((up - down) / (2.0 * h));
            }
        }
    }
    out
}

/// Full AE objective: gradients for encoder and decoder parameters.
pub fn ae_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let s = tiny_shape();
    let a = tiny_arch();
    let mut enc = Network::<f64>::new(a.encoder(s, 3, 2).unwrap(), vec![3, 4, 4], r.random()).unwrap();
    let mut dec = Network::<f64>::new(a.decoder(s, 2).unwrap(), vec![2], r.random()).unwrap();
    jitter_biases(&mut enc, &mut r);
    jitter_biases(&mut dec, &mut r);
    let x = tiny_batch(&mut r, 2);
    let (_, ge, gd) = ae_objective(&enc, &dec, &x).unwrap();
    let dec_c = dec.clone();
    let ne = fd_params(&mut enc, H_MODEL, |e| ae_objective(e, &dec_c, &x).unwrap().0);
    let enc_c = enc.clone();
    let nd = fd_params(&mut dec, H_MODEL, |d| ae_objective(&enc_c, d, &x).unwrap().0);
    let ae: Vec<f64> = ge.values().collect();
    let ad: Vec<f64> = gd.values().collect();
    rel_error(&ae, &ne).max(rel_error(&ad, &nd))
}

/// CVAE objective with frozen ε: gradients flow through μ and log σ² into
/// the encoder.
pub fn cvae_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let s = tiny_shape();
    let a = tiny_arch();
    let b = 2;
    let mut enc = Network::<f64>::new(a.encoder(s, 8, 4).unwrap(), vec![8, 4, 4], r.random()).unwrap();
    let mut dec = Network::<f64>::new(a.decoder(s, 7).unwrap(), vec![7], r.random()).unwrap();
    jitter_biases(&mut enc, &mut r);
    jitter_biases(&mut dec, &mut r);
    let x = tiny_batch(&mut r, b);
    let groups: Vec<ParamGroupId> = (0..b)
        .map(|_| ParamGroupId::ALL[r.random_range(0..5)])
        .collect();
    let eps = uniform(&mut r, 2 * b, -1.5, 1.5);
    let w = r.random_range(0.1..2.0);
    let total = |e: &Network<f64>, d: &Network<f64>| {
        cvae_objective(e, d, &x, &groups, Some(&eps), w).unwrap().0.total
    };
    let (_, ge, gd) = cvae_objective(&enc, &dec, &x, &groups, Some(&eps), w).unwrap();
    let dec_c = dec.clone();
    let ne = fd_params(&mut enc, H_MODEL, |e| total(e, &dec_c));
    let enc_c = enc.clone();
    let nd = fd_params(&mut dec, H_MODEL, |d| total(&enc_c, d));
    let ae: Vec<f64> = ge.values().collect();
    let ad: Vec<f64> = gd.values().collect();
    rel_error(&ae, &ne).max(rel_error(&ad, &nd))
}

pub mod dataset;
pub mod mock;
pub mod oracles;
pub mod ap;
pub mod e2e;
