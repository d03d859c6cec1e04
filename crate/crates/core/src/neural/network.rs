use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;

use super::layers::{
    col2im, im2col, to_batch_major, to_channel_major, ConvGeometry, LayerParams, LayerSpec,
};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};
use crate::rng;

static NEXT_NETWORK_ID: AtomicU64 = AtomicU64::new(1);

/// A feed-forward stack of layers with its parameters.
#[derive(Debug, Clone)]
pub struct Network<T> {
    specs: Vec<LayerSpec>,
    /// `shapes[i]` is the item shape entering layer `i`; the last entry is
    /// the output shape.
    shapes: Vec<Vec<usize>>,
    params: Vec<LayerParams<T>>,
    id: u64,
    version: u64,
}

/// Activations cached by [`Network::forward`] for the matching backward pass.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    network: u64,
    version: u64,
    activations: Vec<Tensor<T>>,
    cache: Vec<Option<Vec<T>>>,
}

impl<T: Real> Tape<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.activations
            .last()
            .expect("tape holds the input at least")
    }
}

/// Per-layer parameter gradients, aligned with [`Network::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(net: &Network<T>) -> Self {
        Self {
            layers: net.params.iter().map(LayerParams::zeros_like).collect(),
        }
    }

    /// Every gradient value, weights before bias per layer.
    pub fn values(&self) -> impl Iterator<Item = T> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
    }

    pub fn buffers(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }
}

fn next_id() -> u64 {
    NEXT_NETWORK_ID.fetch_add(1, Ordering::Relaxed)
}

impl<T: Real> Network<T> {
    /// Builds the network with Kaiming-uniform weights (bound `√(6/fan_in)`)
    /// and zero biases.
    pub fn new(specs: Vec<LayerSpec>, input_shape: Vec<usize>, seed: u64) -> Result<Self> {
        let mut rng = rng::seeded(seed);
        let params = specs
            .iter()
            .map(|spec| match spec.param_sizes() {
                Some((w, b, fan_in)) => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    LayerParams {
                        weight: (0..w)
                            .map(|_| T::of(rng.random_range(-bound..bound)))
                            .collect(),
                        bias: vec![T::zero(); b],
                    }
                }
                None => LayerParams::empty(),
            })
            .collect();
        Self::from_params(specs, input_shape, params)
    }

    pub fn from_params(
        specs: Vec<LayerSpec>,
        input_shape: Vec<usize>,
        params: Vec<LayerParams<T>>,
    ) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        if params.len() != specs.len() {
            return Err(Error::shape(format!(
                "{} parameter blocks for {} layers",
                params.len(),
                specs.len()
            )));
        }
        let mut shapes = vec![input_shape];
        for (i, spec) in specs.iter().enumerate() {
            let next = spec.output_shape(shapes.last().unwrap())?;
            let (w, b) = spec.param_sizes().map_or((0, 0), |(w, b, _)| (w, b));
            if params[i].weight.len() != w || params[i].bias.len() != b {
                return Err(Error::shape(format!(
                    "layer {i} expects {w} weights and {b} biases, got {} and {}",
                    params[i].weight.len(),
                    params[i].bias.len()
                )));
            }
            if params[i]
                .weight
                .iter()
                .chain(&params[i].bias)
                .any(|v| !v.is_finite())
            {
                return Err(Error::NonFinite(format!("parameters of layer {i}")));
            }
            shapes.push(next);
        }
        Ok(Self {
            specs,
            shapes,
            params,
            id: next_id(),
            version: 0,
        })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().unwrap()
    }

    pub fn params(&self) -> &[LayerParams<T>] {
        &self.params
    }

    /// Mutable parameter access. Invalidates outstanding tapes.
    pub fn params_mut(&mut self) -> &mut [LayerParams<T>] {
        self.version += 1;
        &mut self.params
    }

    /// Mutable flat parameter buffers (weights, then bias, per layer).
    /// Invalidates outstanding tapes.
    pub fn buffers_mut(&mut self) -> Vec<&mut [T]> {
        self.version += 1;
        self.params
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            specs: self.specs.clone(),
            shapes: self.shapes.clone(),
            params: self.params.iter().map(LayerParams::cast).collect(),
            id: next_id(),
            version: 0,
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().len() < 2 || x.item_shape() != self.input_shape() || x.batch() == 0 {
            return Err(Error::shape(format!(
                "network expects [batch, {:?}], got {:?}",
                self.input_shape(),
                x.shape()
            )));
        }
        Ok(())
    }

    /// Forward pass without recording a tape.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for i in 0..self.specs.len() {
            let (next, _) = self.layer_forward(i, &cur)?;
            cur = next;
        }
        Ok(cur)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tape<T>)> {
        self.check_input(x)?;
        let mut activations = Vec::with_capacity(self.specs.len() + 1);
        let mut cache = Vec::with_capacity(self.specs.len());
        activations.push(x.clone());
        for i in 0..self.specs.len() {
            let (next, c) = self.layer_forward(i, activations.last().unwrap())?;
            activations.push(next);
            cache.push(c);
        }
        let tape = Tape {
            network: self.id,
            version: self.version,
            activations,
            cache,
        };
        Ok((tape.output().clone(), tape))
    }

    fn layer_forward(&self, i: usize, x: &Tensor<T>) -> Result<(Tensor<T>, Option<Vec<T>>)> {
        let batch = x.batch();
        let out_item = &self.shapes[i + 1];
        let mut out_shape = vec![batch];
        out_shape.extend_from_slice(out_item);
        let p = &self.params[i];
        let (out, cache) = match &self.specs[i] {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let g = ConvGeometry {
                    channels: *in_channels,
                    h: self.shapes[i][1],
                    w: self.shapes[i][2],
                    oh: out_item[1],
                    ow: out_item[2],
                    kernel: *kernel,
                    stride: *stride,
                    padding: *padding,
                };
                let n = batch * g.grid();
                let rows = g.rows();
                let mut col = vec![T::zero(); rows * n];
                im2col(&g, batch, x.data(), &mut col);
                let mut mat = vec![T::zero(); out_channels * n];
                for (co, row) in mat.chunks_mut(n).enumerate() {
                    row.fill(p.bias[co]);
                }
                T::gemm(
                    *out_channels,
                    rows,
                    n,
                    T::one(),
                    &p.weight,
                    rows as isize,
                    1,
                    &col,
                    n as isize,
                    1,
                    T::one(),
                    &mut mat,
                    n as isize,
                    1,
                );
                let out = to_batch_major(&mat, batch, *out_channels, g.grid());
                (Tensor::new(out_shape, out)?, Some(col))
            }
            LayerSpec::TransposedConv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                let (hi, wi) = (self.shapes[i][1], self.shapes[i][2]);
                let g = ConvGeometry {
                    channels: *out_channels,
                    h: out_item[1],
                    w: out_item[2],
                    oh: hi,
                    ow: wi,
                    kernel: *kernel,
                    stride: *stride,
                    padding: *padding,
                };
                let n = batch * hi * wi;
                let rows = g.rows();
                let xmat = to_channel_major(x.data(), batch, *in_channels, hi * wi);
                let mut col = vec![T::zero(); rows * n];
                T::gemm(
                    rows,
                    *in_channels,
                    n,
                    T::one(),
                    &p.weight,
                    1,
                    rows as isize,
                    &xmat,
                    n as isize,
                    1,
                    T::zero(),
                    &mut col,
                    n as isize,
                    1,
                );
                let plane = out_item[1] * out_item[2];
                let mut out = vec![T::zero(); batch * out_channels * plane];
                col2im(&g, batch, &col, &mut out);
                for (j, v) in out.iter_mut().enumerate() {
                    *v += p.bias[(j / plane) % out_channels];
                }
                (Tensor::new(out_shape, out)?, Some(xmat))
            }
            LayerSpec::Dense { fan_in, fan_out } => {
                let mut out = vec![T::zero(); batch * fan_out];
                for row in out.chunks_mut(*fan_out) {
                    row.copy_from_slice(&p.bias);
                }
                T::gemm(
                    batch,
                    *fan_in,
                    *fan_out,
                    T::one(),
                    x.data(),
                    *fan_in as isize,
                    1,
                    &p.weight,
                    1,
                    *fan_in as isize,
                    T::one(),
                    &mut out,
                    *fan_out as isize,
                    1,
                );
                (Tensor::new(out_shape, out)?, None)
            }
            LayerSpec::Relu => {
                let out = x.data().iter().map(|&v| v.max(T::zero())).collect();
                (Tensor::new(out_shape, out)?, None)
            }
            LayerSpec::Sigmoid => {
                let out = x
                    .data()
                    .iter()
                    .map(|&v| T::one() / (T::one() + (-v).exp()))
                    .collect();
                (Tensor::new(out_shape, out)?, None)
            }
            LayerSpec::Flatten | LayerSpec::Reshape { .. } => {
                (x.clone().reshaped(out_shape)?, None)
            }
        };
        if !out.all_finite() {
            return Err(Error::NonFinite(format!(
                "output of layer {i} ({:?})",
                self.specs[i]
            )));
        }
        Ok((out, cache))
    }

    /// Back-propagates `grad` (d loss / d output) through the tape, returning
    /// parameter gradients and d loss / d input.
    pub fn backward(&self, tape: &Tape<T>, grad: &Tensor<T>) -> Result<(Gradients<T>, Tensor<T>)> {
        if tape.network != self.id || tape.version != self.version {
            return Err(Error::StaleTape);
        }
        if grad.shape() != tape.output().shape() {
            return Err(Error::shape(format!(
                "output gradient {:?} vs output {:?}",
                grad.shape(),
                tape.output().shape()
            )));
        }
        let mut grads = Gradients::zeros_like(self);
        let mut g = grad.clone();
        for i in (0..self.specs.len()).rev() {
            g = self.layer_backward(i, tape, &g, &mut grads.layers[i])?;
        }
        Ok((grads, g))
    }

    fn layer_backward(
        &self,
        i: usize,
        tape: &Tape<T>,
        g: &Tensor<T>,
        out: &mut LayerParams<T>,
    ) -> Result<Tensor<T>> {
        let x = &tape.activations[i];
        let batch = x.batch();
        let in_item = &self.shapes[i];
        let out_item = &self.shapes[i + 1];
        let p = &self.params[i];
        let dx = match &self.specs[i] {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let geom = ConvGeometry {
                    channels: *in_channels,
                    h: in_item[1],
                    w: in_item[2],
                    oh: out_item[1],
                    ow: out_item[2],
                    kernel: *kernel,
                    stride: *stride,
                    padding: *padding,
                };
                let n = batch * geom.grid();
                let rows = geom.rows();
                let col = tape.cache[i].as_ref().ok_or(Error::StaleTape)?;
                let dmat = to_channel_major(g.data(), batch, *out_channels, geom.grid());
                T::gemm(
                    *out_channels,
                    n,
                    rows,
                    T::one(),
                    &dmat,
                    n as isize,
                    1,
                    col,
                    1,
                    n as isize,
                    T::zero(),
                    &mut out.weight,
                    rows as isize,
                    1,
                );
                for (co, row) in dmat.chunks(n).enumerate() {
                    out.bias[co] = row.iter().copied().sum();
                }
                let mut dcol = vec![T::zero(); rows * n];
                T::gemm(
                    rows,
                    *out_channels,
                    n,
                    T::one(),
                    &p.weight,
                    1,
                    rows as isize,
                    &dmat,
                    n as isize,
                    1,
                    T::zero(),
                    &mut dcol,
                    n as isize,
                    1,
                );
                let mut dx = vec![T::zero(); x.len()];
                col2im(&geom, batch, &dcol, &mut dx);
                dx
            }
            LayerSpec::TransposedConv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                let (hi, wi) = (in_item[1], in_item[2]);
                let geom = ConvGeometry {
                    channels: *out_channels,
                    h: out_item[1],
                    w: out_item[2],
                    oh: hi,
                    ow: wi,
                    kernel: *kernel,
                    stride: *stride,
                    padding: *padding,
                };
                let n = batch * hi * wi;
                let rows = geom.rows();
                let xmat = tape.cache[i].as_ref().ok_or(Error::StaleTape)?;
                let mut dcol = vec![T::zero(); rows * n];
                im2col(&geom, batch, g.data(), &mut dcol);
                let mut dxmat = vec![T::zero(); in_channels * n];
                T::gemm(
                    *in_channels,
                    rows,
                    n,
                    T::one(),
                    &p.weight,
                    rows as isize,
                    1,
                    &dcol,
                    n as isize,
                    1,
                    T::zero(),
                    &mut dxmat,
                    n as isize,
                    1,
                );
                T::gemm(
                    *in_channels,
                    n,
                    rows,
                    T::one(),
                    xmat,
                    n as isize,
                    1,
                    &dcol,
                    1,
                    n as isize,
                    T::zero(),
                    &mut out.weight,
                    rows as isize,
                    1,
                );
                let plane = out_item[1] * out_item[2];
                out.bias.fill(T::zero());
                for (j, chunk) in g.data().chunks(plane).enumerate() {
                    out.bias[j % out_channels] += chunk.iter().copied().sum();
                }
                to_batch_major(&dxmat, batch, *in_channels, hi * wi)
            }
            LayerSpec::Dense { fan_in, fan_out } => {
                T::gemm(
                    *fan_out,
                    batch,
                    *fan_in,
                    T::one(),
                    g.data(),
                    1,
                    *fan_out as isize,
                    x.data(),
                    *fan_in as isize,
                    1,
                    T::zero(),
                    &mut out.weight,
                    *fan_in as isize,
                    1,
                );
                out.bias.fill(T::zero());
                for row in g.data().chunks(*fan_out) {
                    for (b, v) in out.bias.iter_mut().zip(row) {
                        *b += *v;
                    }
                }
                let mut dx = vec![T::zero(); batch * fan_in];
                T::gemm(
                    batch,
                    *fan_out,
                    *fan_in,
                    T::one(),
                    g.data(),
                    *fan_out as isize,
                    1,
                    &p.weight,
                    *fan_in as isize,
                    1,
                    T::zero(),
                    &mut dx,
                    *fan_in as isize,
                    1,
                );
                dx
            }
            LayerSpec::Relu => x
                .data()
                .iter()
                .zip(g.data())
                .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                .collect(),
            LayerSpec::Sigmoid => tape.activations[i + 1]
                .data()
                .iter()
                .zip(g.data())
                .map(|(&y, &d)| d * y * (T::one() - y))
                .collect(),
            LayerSpec::Flatten | LayerSpec::Reshape { .. } => g.data().to_vec(),
        };
        Tensor::new(x.shape().to_vec(), dx)
    }
}
