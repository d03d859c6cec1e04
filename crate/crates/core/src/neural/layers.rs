use serde::{Deserialize, Serialize};

use super::tensor::Real;
use crate::error::{Error, Result};

/// Layer kinds and their geometry. Shapes below exclude the batch dimension.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// `[C, H, W] -> [C', H', W']`, weight `[C', C, k, k]`.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Adjoint of `Conv2d` with the same geometry, weight `[C, C', k, k]`.
    TransposedConv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        #[serde(default)]
        output_padding: usize,
    },
    /// `[F] -> [F']`, weight `[F', F]`.
    Dense {
        fan_in: usize,
        fan_out: usize,
    },
    Relu,
    Sigmoid,
    Flatten,
    Reshape {
        shape: Vec<usize>,
    },
}

/// Weights and bias of one layer; both empty for parameterless layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> LayerParams<T> {
    pub fn empty() -> Self {
        Self {
            weight: Vec::new(),
            bias: Vec::new(),
        }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self {
            weight: vec![T::zero(); other.weight.len()],
            bias: vec![T::zero(); other.bias.len()],
        }
    }

    pub fn cast<U: Real>(&self) -> LayerParams<U> {
        LayerParams {
            weight: self.weight.iter().map(|v| U::of(v.f64())).collect(),
            bias: self.bias.iter().map(|v| U::of(v.f64())).collect(),
        }
    }
}

fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn tconv_out(
    size: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    op: usize,
) -> Option<usize> {
    if size == 0 || stride == 0 || op >= stride {
        return None;
    }
    ((size - 1) * stride + kernel + op).checked_sub(2 * padding)
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(
            self,
            Self::Conv2d { .. } | Self::TransposedConv2d { .. } | Self::Dense { .. }
        )
    }

    /// `(weight length, bias length, fan-in)` for parameterised layers.
    pub fn param_sizes(&self) -> Option<(usize, usize, usize)> {
        match *self {
            Self::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                out_channels * in_channels * kernel * kernel,
                out_channels,
                in_channels * kernel * kernel,
            )),
            Self::TransposedConv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => Some((
                in_channels * out_channels * kernel * kernel,
                out_channels,
                (in_channels * kernel * kernel / (stride * stride)).max(1),
            )),
            Self::Dense { fan_in, fan_out } => Some((fan_out * fan_in, fan_out, fan_in)),
            _ => None,
        }
    }

    /// Shape of one output item given one input item.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = || Error::shape(format!("layer {self:?} cannot take input {input:?}"));
        match self {
            Self::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let [c, h, w] = chw(input).ok_or_else(bad)?;
                if c != *in_channels {
                    return Err(bad());
                }
                let ho = conv_out(h, *kernel, *stride, *padding).ok_or_else(bad)?;
                let wo = conv_out(w, *kernel, *stride, *padding).ok_or_else(bad)?;
                Ok(vec![*out_channels, ho, wo])
            }
            Self::TransposedConv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                output_padding,
            } => {
                let [c, h, w] = chw(input).ok_or_else(bad)?;
                if c != *in_channels {
                    return Err(bad());
                }
                let ho =
                    tconv_out(h, *kernel, *stride, *padding, *output_padding).ok_or_else(bad)?;
                let wo =
                    tconv_out(w, *kernel, *stride, *padding, *output_padding).ok_or_else(bad)?;
                if ho == 0 || wo == 0 {
                    return Err(bad());
                }
                Ok(vec![*out_channels, ho, wo])
            }
            Self::Dense { fan_in, fan_out } => {
                if input.iter().product::<usize>() != *fan_in || input.len() != 1 {
                    return Err(bad());
                }
                Ok(vec![*fan_out])
            }
            Self::Relu | Self::Sigmoid => Ok(input.to_vec()),
            Self::Flatten => Ok(vec![input.iter().product()]),
            Self::Reshape { shape } => {
                if shape.iter().product::<usize>() != input.iter().product::<usize>() {
                    return Err(bad());
                }
                Ok(shape.clone())
            }
        }
    }
}

fn chw(s: &[usize]) -> Option<[usize; 3]> {
    match *s {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Some([c, h, w]),
        _ => None,
    }
}

/// Geometry shared by `im2col`/`col2im`: an image of `channels × h × w`
/// scanned by a `kernel` window at `stride` with `padding`, producing an
/// `oh × ow` grid.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn grid(&self) -> usize {
        self.oh * self.ow
    }

    #[inline]
    fn source(&self, o: usize, k: usize, size: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < size).then_some(pos as usize)
    }
}

/// Unfolds a batch of images into a `rows × (batch·grid)` matrix whose
/// column `b·grid + p` is the receptive field of grid point `p` in item `b`.
pub(crate) fn im2col<T: Real>(g: &ConvGeometry, batch: usize, input: &[T], col: &mut [T]) {
    let n = batch * g.grid();
    let img = g.channels * g.h * g.w;
    debug_assert_eq!(col.len(), g.rows() * n);
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut col[row * n..(row + 1) * n];
                for b in 0..batch {
                    let src = &input[b * img + c * g.h * g.w..];
                    for oy in 0..g.oh {
                        let base = b * g.grid() + oy * g.ow;
                        match g.source(oy, ky, g.h) {
                            Some(iy) => {
                                for ox in 0..g.ow {
                                    dst[base + ox] = match g.source(ox, kx, g.w) {
                                        Some(ix) => src[iy * g.w + ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                            None => dst[base..base + g.ow].fill(T::zero()),
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into images.
pub(crate) fn col2im<T: Real>(g: &ConvGeometry, batch: usize, col: &[T], out: &mut [T]) {
    let n = batch * g.grid();
    let img = g.channels * g.h * g.w;
    debug_assert_eq!(out.len(), batch * img);
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &col[row * n..(row + 1) * n];
                for b in 0..batch {
                    let dst = &mut out[b * img + c * g.h * g.w..b * img + (c + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let Some(iy) = g.source(oy, ky, g.h) else {
                            continue;
                        };
                        let base = b * g.grid() + oy * g.ow;
                        for ox in 0..g.ow {
                            if let Some(ix) = g.source(ox, kx, g.w) {
                                dst[iy * g.w + ix] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[batch, C, P]` → `[C, batch·P]`.
pub(crate) fn to_channel_major<T: Real>(
    x: &[T],
    batch: usize,
    channels: usize,
    plane: usize,
) -> Vec<T> {
    let n = batch * plane;
    let mut out = vec![T::zero(); channels * n];
    for b in 0..batch {
        for c in 0..channels {
            let src = &x[(b * channels + c) * plane..(b * channels + c + 1) * plane];
            out[c * n + b * plane..c * n + (b + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

/// `[C, batch·P]` → `[batch, C, P]`.
pub(crate) fn to_batch_major<T: Real>(
    x: &[T],
    batch: usize,
    channels: usize,
    plane: usize,
) -> Vec<T> {
    let n = batch * plane;
    let mut out = vec![T::zero(); channels * n];
    for b in 0..batch {
        for c in 0..channels {
            out[(b * channels + c) * plane..(b * channels + c + 1) * plane]
                .copy_from_slice(&x[c * n + b * plane..c * n + (b + 1) * plane]);
        }
    }
    out
}
