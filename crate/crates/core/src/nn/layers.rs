//! Layer descriptions and their forward/backward kernels.
//!
//! Image tensors are `[height, width, channels]`; convolution weights are
//! `[kernel_h, kernel_w, in_channels, out_channels]` so that the innermost
//! loop of both passes runs over contiguous output channels.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Output extent `ceil(in / stride)`, zero padding split before/after
    /// with the smaller half first.
    #[default]
    Same,
    /// No padding; windows must fit entirely inside the input.
    Valid,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        units: usize,
    },
    #[serde(rename = "conv2d")]
    Conv2D {
        filters: usize,
        kernel: [usize; 2],
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: Padding,
    },
    #[serde(rename = "maxpool2d")]
    MaxPool2D {
        size: usize,
        #[serde(default)]
        padding: Padding,
    },
    #[serde(rename = "upsample2d")]
    UpSample2D {
        factor: usize,
    },
    Flatten,
    Reshape {
        shape: Vec<usize>,
    },
    #[serde(rename = "relu")]
    ReLU,
    Sigmoid,
}

/// Output extent and leading pad of a windowed op along one axis.
fn window_geometry(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Option<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let needed = ((out - 1) * stride + kernel).saturating_sub(input);
            Some((out, needed / 2))
        }
        Padding::Valid => {
            if input < kernel {
                None
            } else {
                Some(((input - kernel) / stride + 1, 0))
            }
        }
    }
}

fn image_dims(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape {
        [h, w, c] => Some((*h, *w, *c)),
        _ => None,
    }
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2D { .. } => "conv2d",
            LayerSpec::MaxPool2D { .. } => "maxpool2d",
            LayerSpec::UpSample2D { .. } => "upsample2d",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Reshape { .. } => "reshape",
            LayerSpec::ReLU => "relu",
            LayerSpec::Sigmoid => "sigmoid",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2D { .. })
    }

    /// Output shape for a given input shape; `Err(message)` when the
    /// combination is invalid.
    pub fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        let need_image =
            || image_dims(input).ok_or_else(|| format!("expects [h, w, c] input, got {input:?}"));
        match self {
            LayerSpec::Dense { units } => {
                if *units == 0 {
                    return Err("units must be positive".into());
                }
                if input.len() != 1 {
                    return Err(format!("expects a flat input, got {input:?}"));
                }
                Ok(vec![*units])
            }
            LayerSpec::Conv2D {
                filters,
                kernel,
                stride,
                padding,
            } => {
                let (h, w, _) = need_image()?;
                if *filters == 0 || kernel[0] == 0 || kernel[1] == 0 || *stride == 0 {
                    return Err("filters, kernel and stride must be positive".into());
                }
                let (oh, _) = window_geometry(h, kernel[0], *stride, *padding)
                    .ok_or_else(|| format!("kernel {kernel:?} larger than input {input:?}"))?;
                let (ow, _) = window_geometry(w, kernel[1], *stride, *padding)
                    .ok_or_else(|| format!("kernel {kernel:?} larger than input {input:?}"))?;
                Ok(vec![oh, ow, *filters])
            }
            LayerSpec::MaxPool2D { size, padding } => {
                let (h, w, c) = need_image()?;
                if *size == 0 {
                    return Err("pool size must be positive".into());
                }
                let (oh, _) = window_geometry(h, *size, *size, *padding)
                    .ok_or_else(|| format!("pool {size} larger than input {input:?}"))?;
                let (ow, _) = window_geometry(w, *size, *size, *padding)
                    .ok_or_else(|| format!("pool {size} larger than input {input:?}"))?;
                Ok(vec![oh, ow, c])
            }
            LayerSpec::UpSample2D { factor } => {
                let (h, w, c) = need_image()?;
                if *factor == 0 {
                    return Err("factor must be positive".into());
                }
                Ok(vec![h * factor, w * factor, c])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Reshape { shape } => {
                let have: usize = input.iter().product();
                let want: usize = shape.iter().product();
                if shape.contains(&0) || have != want {
                    return Err(format!("cannot reshape {input:?} into {shape:?}"));
                }
                Ok(shape.clone())
            }
            LayerSpec::ReLU | LayerSpec::Sigmoid => Ok(input.to_vec()),
        }
    }

    /// `(weight shape, bias shape)` for trainable layers.
    pub fn param_shapes(&self, input: &[usize]) -> Option<(Vec<usize>, Vec<usize>)> {
        match self {
            LayerSpec::Dense { units } => Some((vec![*units, input[0]], vec![*units])),
            LayerSpec::Conv2D {
                filters, kernel, ..
            } => Some((
                vec![kernel[0], kernel[1], input[2], *filters],
                vec![*filters],
            )),
            _ => None,
        }
    }

    /// Number of inputs feeding each output unit, for initialization scale.
    pub fn fan_in(&self, input: &[usize]) -> usize {
        match self {
            LayerSpec::Dense { .. } => input[0],
            LayerSpec::Conv2D { kernel, .. } => kernel[0] * kernel[1] * input[2],
            _ => 0,
        }
    }
}

/// Trainable parameters of one layer (the weights and biases of `W`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LayerParams {
    pub fn zeros_like(other: &LayerParams) -> Self {
        Self {
            weight: Tensor::zeros(other.weight.shape()),
            bias: Tensor::zeros(other.bias.shape()),
        }
    }
}

pub(crate) fn forward(
    spec: &LayerSpec,
    in_shape: &[usize],
    out_shape: &[usize],
    params: Option<&LayerParams>,
    x: &Tensor,
) -> Tensor {
    match spec {
        LayerSpec::Dense { units } => {
            let p = params.expect("dense layer without parameters");
            let n_in = in_shape[0];
            let w = p.weight.data();
            let xs = x.data();
            let out = (0..*units)
                .map(|o| {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    p.bias.data()[o] + row.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            Tensor::from_vec(out)
        }
        LayerSpec::Conv2D {
            filters,
            kernel,
            stride,
            padding,
        } => {
            let p = params.expect("conv layer without parameters");
            let (h, w, cin) = image_dims(in_shape).unwrap();
            let (oh, ow) = (out_shape[0], out_shape[1]);
            let cout = *filters;
            let (_, pad_t) = window_geometry(h, kernel[0], *stride, *padding).unwrap();
            let (_, pad_l) = window_geometry(w, kernel[1], *stride, *padding).unwrap();
            let xs = x.data();
            let ws = p.weight.data();
            let mut out = vec![0.0; oh * ow * cout];
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = &mut out[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
                    o.copy_from_slice(p.bias.data());
                    for ky in 0..kernel[0] {
                        let Some(iy) = (oy * stride + ky).checked_sub(pad_t).filter(|&v| v < h)
                        else {
                            continue;
                        };
                        for kx in 0..kernel[1] {
                            let Some(ix) = (ox * stride + kx).checked_sub(pad_l).filter(|&v| v < w)
                            else {
                                continue;
                            };
                            let in_base = (iy * w + ix) * cin;
                            let w_base = (ky * kernel[1] + kx) * cin * cout;
                            for ci in 0..cin {
                                let xv = xs[in_base + ci];
                                let wrow = &ws[w_base + ci * cout..w_base + (ci + 1) * cout];
                                for (acc, wv) in o.iter_mut().zip(wrow) {
                                    *acc += xv * wv;
                                }
                            }
                        }
                    }
                }
            }
            Tensor::new(out_shape.to_vec(), out).unwrap()
        }
        LayerSpec::MaxPool2D { size, padding } => {
            let (h, w, c) = image_dims(in_shape).unwrap();
            let (oh, ow) = (out_shape[0], out_shape[1]);
            let (_, pad_t) = window_geometry(h, *size, *size, *padding).unwrap();
            let (_, pad_l) = window_geometry(w, *size, *size, *padding).unwrap();
            let xs = x.data();
            let mut out = vec![f64::NEG_INFINITY; oh * ow * c];
            for oy in 0..oh {
                for ox in 0..ow {
                    for (iy, ix) in pool_window(oy, ox, *size, pad_t, pad_l, h, w) {
                        let src = &xs[(iy * w + ix) * c..(iy * w + ix + 1) * c];
                        let dst = &mut out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
                        for (d, s) in dst.iter_mut().zip(src) {
                            if *s > *d {
                                *d = *s;
                            }
                        }
                    }
                }
            }
            Tensor::new(out_shape.to_vec(), out).unwrap()
        }
        LayerSpec::UpSample2D { factor } => {
            let (_, w, c) = image_dims(in_shape).unwrap();
            let (oh, ow) = (out_shape[0], out_shape[1]);
            let xs = x.data();
            let mut out = Vec::with_capacity(oh * ow * c);
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = ((oy / factor) * w + ox / factor) * c;
                    out.extend_from_slice(&xs[base..base + c]);
                }
            }
            Tensor::new(out_shape.to_vec(), out).unwrap()
        }
        LayerSpec::Flatten | LayerSpec::Reshape { .. } => x.reshaped(out_shape).unwrap(),
        LayerSpec::ReLU => x.map(|v| if v < 0.0 { 0.0 } else { v }),
        LayerSpec::Sigmoid => x.map(sigmoid),
    }
}

/// Returns the input gradient and, for trainable layers, the parameter gradient.
pub(crate) fn backward(
    spec: &LayerSpec,
    in_shape: &[usize],
    out_shape: &[usize],
    params: Option<&LayerParams>,
    x: &Tensor,
    y: &Tensor,
    gy: &Tensor,
) -> (Tensor, Option<LayerParams>) {
    match spec {
        LayerSpec::Dense { units } => {
            let p = params.expect("dense layer without parameters");
            let n_in = in_shape[0];
            let w = p.weight.data();
            let xs = x.data();
            let gys = gy.data();
            let mut gw = vec![0.0; units * n_in];
            let mut gx = vec![0.0; n_in];
            for o in 0..*units {
                let g = gys[o];
                let row = &w[o * n_in..(o + 1) * n_in];
                let grow = &mut gw[o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    grow[i] = g * xs[i];
                    gx[i] += row[i] * g;
                }
            }
            let grads = LayerParams {
                weight: Tensor::new(p.weight.shape().to_vec(), gw).unwrap(),
                bias: gy.reshaped(p.bias.shape()).unwrap(),
            };
            (Tensor::new(in_shape.to_vec(), gx).unwrap(), Some(grads))
        }
        LayerSpec::Conv2D {
            filters,
            kernel,
            stride,
            padding,
        } => {
            let p = params.expect("conv layer without parameters");
            let (h, w, cin) = image_dims(in_shape).unwrap();
            let (oh, ow) = (out_shape[0], out_shape[1]);
            let cout = *filters;
            let (_, pad_t) = window_geometry(h, kernel[0], *stride, *padding).unwrap();
            let (_, pad_l) = window_geometry(w, kernel[1], *stride, *padding).unwrap();
            let xs = x.data();
            let ws = p.weight.data();
            let gys = gy.data();
            let mut gx = vec![0.0; h * w * cin];
            let mut gw = vec![0.0; ws.len()];
            let mut gb = vec![0.0; cout];
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = &gys[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
                    for (b, gv) in gb.iter_mut().zip(g) {
                        *b += gv;
                    }
                    for ky in 0..kernel[0] {
                        let Some(iy) = (oy * stride + ky).checked_sub(pad_t).filter(|&v| v < h)
                        else {
                            continue;
                        };
                        for kx in 0..kernel[1] {
                            let Some(ix) = (ox * stride + kx).checked_sub(pad_l).filter(|&v| v < w)
                            else {
                                continue;
                            };
                            let in_base = (iy * w + ix) * cin;
                            let w_base = (ky * kernel[1] + kx) * cin * cout;
                            for ci in 0..cin {
                                let xv = xs[in_base + ci];
                                let range = w_base + ci * cout..w_base + (ci + 1) * cout;
                                let mut acc = 0.0;
                                for ((gwv, wv), gv) in
                                    gw[range.clone()].iter_mut().zip(&ws[range]).zip(g)
                                {
                                    *gwv += xv * gv;
                                    acc += wv * gv;
                                }
                                gx[in_base + ci] += acc;
                            }
                        }
                    }
                }
            }
            let grads = LayerParams {
                weight: Tensor::new(p.weight.shape().to_vec(), gw).unwrap(),
                bias: Tensor::from_vec(gb),
            };
            (Tensor::new(in_shape.to_vec(), gx).unwrap(), Some(grads))
        }
        LayerSpec::MaxPool2D { size, padding } => {
            let (h, w, c) = image_dims(in_shape).unwrap();
            let (oh, ow) = (out_shape[0], out_shape[1]);
            let (_, pad_t) = window_geometry(h, *size, *size, *padding).unwrap();
            let (_, pad_l) = window_geometry(w, *size, *size, *padding).unwrap();
            let xs = x.data();
            let ys = y.data();
            let gys = gy.data();
            let mut gx = vec![0.0; h * w * c];
            for oy in 0..oh {
                for ox in 0..ow {
                    let o_base = (oy * ow + ox) * c;
                    for ch in 0..c {
                        // First position holding the max receives the gradient.
                        let winner = pool_window(oy, ox, *size, pad_t, pad_l, h, w)
                            .map(|(iy, ix)| (iy * w + ix) * c + ch)
                            .find(|&i| xs[i] == ys[o_base + ch]);
                        if let Some(i) = winner {
                            gx[i] += gys[o_base + ch];
                        }
                    }
                }
            }
            (Tensor::new(in_shape.to_vec(), gx).unwrap(), None)
        }
        LayerSpec::UpSample2D { factor } => {
            let (h, w, c) = image_dims(in_shape).unwrap();
            let (oh, ow) = (out_shape[0], out_shape[1]);
            let gys = gy.data();
            let mut gx = vec![0.0; h * w * c];
            for oy in 0..oh {
                for ox in 0..ow {
                    let dst = ((oy / factor) * w + ox / factor) * c;
                    let src = (oy * ow + ox) * c;
                    for ch in 0..c {
                        gx[dst + ch] += gys[src + ch];
                    }
                }
            }
            (Tensor::new(in_shape.to_vec(), gx).unwrap(), None)
        }
        LayerSpec::Flatten | LayerSpec::Reshape { .. } => (gy.reshaped(in_shape).unwrap(), None),
        LayerSpec::ReLU => {
            let data = x
                .data()
                .iter()
                .zip(gy.data())
                .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
                .collect();
            (Tensor::new(in_shape.to_vec(), data).unwrap(), None)
        }
        LayerSpec::Sigmoid => {
            let data = y
                .data()
                .iter()
                .zip(gy.data())
                .map(|(&yv, &g)| g * yv * (1.0 - yv))
                .collect();
            (Tensor::new(in_shape.to_vec(), data).unwrap(), None)
        }
    }
}

fn pool_window(
    oy: usize,
    ox: usize,
    size: usize,
    pad_t: usize,
    pad_l: usize,
    h: usize,
    w: usize,
) -> impl Iterator<Item = (usize, usize)> {
    (0..size)
        .filter_map(move |ky| (oy * size + ky).checked_sub(pad_t).filter(|&v| v < h))
        .flat_map(move |iy| {
            (0..size)
                .filter_map(move |kx| (ox * size + kx).checked_sub(pad_l).filter(|&v| v < w))
                .map(move |ix| (iy, ix))
        })
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn validate_shape(
    index: usize,
    spec: &LayerSpec,
    input: &[usize],
) -> Result<Vec<usize>> {
    spec.output_shape(input).map_err(|message| Error::Layer {
        index,
        kind: spec.name(),
        message,
    })
}
