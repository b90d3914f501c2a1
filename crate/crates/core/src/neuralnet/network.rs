use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::spec::{Activation, LayerSpec, NetworkSpec};
use super::tensor::Tensor;
use crate::error::{PallorError, Result};

/// Learnable parameters of one layer (empty for parameter-free layers).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerParams {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerParams {
    fn zeros_like(spec: &LayerSpec) -> Self {
        let (w, b) = spec.param_counts();
        Self { weights: vec![0.0; w], bias: vec![0.0; b] }
    }
}

/// Per-feature input standardization and target scaling, stored alongside
/// the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

impl Standardization {
    pub fn identity(n: usize) -> Self {
        Self { input_mean: vec![0.0; n], input_std: vec![1.0; n], target_mean: 0.0, target_std: 1.0 }
    }

    /// Fits means and standard deviations (population). Zero deviations
    /// become 1 so constant features pass through centred.
    pub fn fit(inputs: &[Vec<f64>], targets: &[f64]) -> Self {
        let n = inputs.len().max(1) as f64;
        let dims = inputs.first().map_or(0, Vec::len);
        let mean_std = |vals: &mut dyn Iterator<Item = f64>| {
            let v: Vec<f64> = vals.collect();
            let m = v.iter().sum::<f64>() / n;
            let s = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt();
            (m, if s > 1e-12 { s } else { 1.0 })
        };
        let (input_mean, input_std) = (0..dims).map(|d| mean_std(&mut inputs.iter().map(|x| x[d]))).unzip();
        let (target_mean, target_std) = mean_std(&mut targets.iter().copied());
        Self { input_mean, input_std, target_mean, target_std }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().enumerate().map(|(i, v)| (v - self.input_mean[i]) / self.input_std[i]).collect()
    }

    pub fn scale_target(&self, y: f64) -> f64 {
        (y - self.target_mean) / self.target_std
    }

    pub fn unscale_target(&self, y: f64) -> f64 {
        y * self.target_std + self.target_mean
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    shapes: Vec<Vec<usize>>,
    pub(crate) params: Vec<LayerParams>,
    pub standardization: Option<Standardization>,
}

/// Gradients with the same layout as [`Network`] parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerParams>,
}

impl Gradients {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        Self { layers: spec.layers.iter().map(LayerParams::zeros_like).collect() }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|x| *x *= k);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias).copied())
    }
}

impl Network {
    /// Glorot-uniform weights from a ChaCha8 stream seeded with `spec.seed`,
    /// drawn layer by layer in row-major order; zero biases.
    pub fn init(spec: NetworkSpec) -> Result<Self> {
        let shapes = spec.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let params = spec
            .layers
            .iter()
            .map(|layer| {
                let mut p = LayerParams::zeros_like(layer);
                let (fan_in, fan_out) = layer.fans();
                if !p.weights.is_empty() {
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    p.weights.iter_mut().for_each(|w| *w = rng.random_range(-limit..=limit));
                }
                p
            })
            .collect();
        Ok(Self { spec, shapes, params, standardization: None })
    }

    /// Builds a network from explicit parameters in layer order.
    pub fn from_params(spec: NetworkSpec, params: Vec<LayerParams>) -> Result<Self> {
        let shapes = spec.shapes()?;
        if params.len() != spec.layers.len() {
            return Err(PallorError::Shape(format!("{} parameter blocks for {} layers", params.len(), spec.layers.len())));
        }
        for (i, (layer, p)) in spec.layers.iter().zip(&params).enumerate() {
            if (p.weights.len(), p.bias.len()) != layer.param_counts() {
                return Err(PallorError::Shape(format!("layer {i}: parameter count mismatch")));
            }
            if p.weights.iter().chain(&p.bias).any(|v| !v.is_finite()) {
                return Err(PallorError::Shape(format!("layer {i}: non-finite parameter")));
            }
        }
        Ok(Self { spec, shapes, params, standardization: None })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[LayerParams] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [LayerParams] {
        &mut self.params
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().unwrap()
    }

    pub fn param_iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.params.iter().flat_map(|l| l.weights.iter().chain(&l.bias).copied())
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape() != self.input_shape() {
            return Err(PallorError::Shape(format!(
                "input shape {:?}, network expects {:?}",
                input.shape(),
                self.input_shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let mut x = input.data().to_vec();
        for (i, layer) in self.spec.layers.iter().enumerate() {
            x = self.layer_forward(i, layer, &x, None);
        }
        Ok(Tensor::from_parts(self.output_shape().to_vec(), x))
    }

    /// Smallest |pre-activation| over all relu units for this input. Central
    /// differences are only trustworthy when this exceeds the step size.
    pub fn relu_margin(&self, input: &Tensor) -> Result<f64> {
        self.check_input(input)?;
        let mut margin = f64::INFINITY;
        let mut x = input.data().to_vec();
        for (i, layer) in self.spec.layers.iter().enumerate() {
            x = self.layer_forward(i, layer, &x, Some(&mut margin));
        }
        Ok(margin)
    }

    fn layer_forward(&self, i: usize, layer: &LayerSpec, x: &[f64], margin: Option<&mut f64>) -> Vec<f64> {
        let in_shape = &self.shapes[i];
        let out_shape = &self.shapes[i + 1];
        let p = &self.params[i];
        let mut z = match *layer {
            LayerSpec::Dense { input, output, .. } => {
                let mut out = p.bias.clone();
                for (o, v) in out.iter_mut().enumerate() {
                    let row = &p.weights[o * input..(o + 1) * input];
                    *v += row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
                }
                debug_assert_eq!(out.len(), output);
                out
            }
            LayerSpec::Conv2d { .. } => conv_forward(layer, in_shape, out_shape, p, x),
            LayerSpec::Upsample2x => upsample_forward(in_shape, x),
            LayerSpec::Flatten => x.to_vec(),
        };
        let act = layer.activation();
        if let (Some(m), Activation::Relu) = (margin, act) {
            *m = z.iter().fold(*m, |acc, v| acc.min(v.abs()));
        }
        apply_activation(act, &mut z);
        z
    }

    /// Layer inputs for every layer plus the final output.
    fn trace(&self, input: &Tensor) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.spec.layers.len() + 1);
        acts.push(input.data().to_vec());
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let next = self.layer_forward(i, layer, &acts[i], None);
            acts.push(next);
        }
        acts
    }

    /// Mean-squared-error loss and its exact gradient for one sample.
    pub fn backward(&self, input: &Tensor, target: &Tensor) -> Result<(f64, Gradients)> {
        self.check_input(input)?;
        if target.shape() != self.output_shape() {
            return Err(PallorError::Shape(format!(
                "target shape {:?}, network outputs {:?}",
                target.shape(),
                self.output_shape()
            )));
        }
        let acts = self.trace(input);
        let out = acts.last().unwrap();
        let n = out.len() as f64;
        let mut loss = 0.0;
        let mut delta: Vec<f64> = out
            .iter()
            .zip(target.data())
            .map(|(y, t)| {
                let d = y - t;
                loss += d * d;
                2.0 * d / n
            })
            .collect();
        loss /= n;

        let mut grads = Gradients::zeros(&self.spec);
        for (i, layer) in self.spec.layers.iter().enumerate().rev() {
            activation_backward(layer.activation(), &acts[i + 1], &mut delta);
            let x = &acts[i];
            let g = &mut grads.layers[i];
            let p = &self.params[i];
            delta = match *layer {
                LayerSpec::Dense { input, output, .. } => {
                    let mut dx = vec![0.0; input];
                    for o in 0..output {
                        let d = delta[o];
                        g.bias[o] += d;
                        let row = o * input;
                        for j in 0..input {
                            g.weights[row + j] += d * x[j];
                            dx[j] += d * p.weights[row + j];
                        }
                    }
                    dx
                }
                LayerSpec::Conv2d { .. } => conv_backward(layer, &self.shapes[i], &self.shapes[i + 1], p, x, &delta, g, i > 0),
                LayerSpec::Upsample2x => upsample_backward(&self.shapes[i], &delta),
                LayerSpec::Flatten => delta,
            };
        }
        Ok((loss, grads))
    }

    /// `w ← w − lr·g` for every parameter.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (p, g) in self.params.iter_mut().zip(&grads.layers) {
            p.weights.iter_mut().zip(&g.weights).for_each(|(w, d)| *w -= lr * d);
            p.bias.iter_mut().zip(&g.bias).for_each(|(w, d)| *w -= lr * d);
        }
    }

    /// Mean-squared error without the gradient.
    pub fn loss(&self, input: &Tensor, target: &Tensor) -> Result<f64> {
        let out = self.forward(input)?;
        if target.shape() != out.shape() {
            return Err(PallorError::Shape("target shape mismatch".into()));
        }
        let n = out.len() as f64;
        Ok(out.data().iter().zip(target.data()).map(|(y, t)| (y - t) * (y - t)).sum::<f64>() / n)
    }
}

fn apply_activation(act: Activation, z: &mut [f64]) {
    match act {
        Activation::Relu => z.iter_mut().for_each(|v| *v = v.max(0.0)),
        Activation::Sigmoid => z.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp())),
        Activation::Linear => {}
    }
}

/// Converts dL/dy into dL/dz given the activation outputs `y`.
fn activation_backward(act: Activation, y: &[f64], delta: &mut [f64]) {
    match act {
        Activation::Relu => delta.iter_mut().zip(y).for_each(|(d, &v)| {
            if v <= 0.0 {
                *d = 0.0
            }
        }),
        Activation::Sigmoid => delta.iter_mut().zip(y).for_each(|(d, &v)| *d *= v * (1.0 - v)),
        Activation::Linear => {}
    }
}

/// Range of output columns `o` for which `o*stride + k - pad` lands in `[0, len)`.
fn valid_range(out_len: usize, len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // largest o with o*stride + k - pad <= len - 1
    let hi = if len + pad < k + 1 { 0 } else { ((len + pad - k - 1) / stride + 1).min(out_len) };
    (lo.min(hi), hi)
}

fn conv_dims(layer: &LayerSpec) -> (usize, usize, usize, usize, usize) {
    match *layer {
        LayerSpec::Conv2d { in_ch, out_ch, kernel, stride, padding, .. } => (in_ch, out_ch, kernel, stride, padding),
        _ => unreachable!("not a convolution"),
    }
}

fn conv_forward(layer: &LayerSpec, in_shape: &[usize], out_shape: &[usize], p: &LayerParams, x: &[f64]) -> Vec<f64> {
    let (in_ch, out_ch, k, s, pad) = conv_dims(layer);
    let (h, w) = (in_shape[1], in_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let mut out = vec![0.0; out_ch * oh * ow];
    for oc in 0..out_ch {
        let plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
        plane.iter_mut().for_each(|v| *v = p.bias[oc]);
        for ic in 0..in_ch {
            let src = &x[ic * h * w..(ic + 1) * h * w];
            for ky in 0..k {
                let (oy_lo, oy_hi) = valid_range(oh, h, ky, s, pad);
                for kx in 0..k {
                    let wv = p.weights[((oc * in_ch + ic) * k + ky) * k + kx];
                    let (ox_lo, ox_hi) = valid_range(ow, w, kx, s, pad);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - pad;
                        let row_in = &src[iy * w..(iy + 1) * w];
                        let row_out = &mut plane[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            let off = kx as isize - pad as isize;
                            for ox in ox_lo..ox_hi {
                                row_out[ox] += wv * row_in[(ox as isize + off) as usize];
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                row_out[ox] += wv * row_in[ox * s + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    layer: &LayerSpec,
    in_shape: &[usize],
    out_shape: &[usize],
    p: &LayerParams,
    x: &[f64],
    dz: &[f64],
    g: &mut LayerParams,
    need_dx: bool,
) -> Vec<f64> {
    let (in_ch, out_ch, k, s, pad) = conv_dims(layer);
    let (h, w) = (in_shape[1], in_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let mut dx = vec![0.0; if need_dx { in_ch * h * w } else { 0 }];
    for oc in 0..out_ch {
        let dplane = &dz[oc * oh * ow..(oc + 1) * oh * ow];
        g.bias[oc] += dplane.iter().sum::<f64>();
        for ic in 0..in_ch {
            let src = &x[ic * h * w..(ic + 1) * h * w];
            for ky in 0..k {
                let (oy_lo, oy_hi) = valid_range(oh, h, ky, s, pad);
                for kx in 0..k {
                    let widx = ((oc * in_ch + ic) * k + ky) * k + kx;
                    let wv = p.weights[widx];
                    let (ox_lo, ox_hi) = valid_range(ow, w, kx, s, pad);
                    let mut gw = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - pad;
                        let drow = &dplane[oy * ow..(oy + 1) * ow];
                        let xrow = &src[iy * w..(iy + 1) * w];
                        for ox in ox_lo..ox_hi {
                            gw += drow[ox] * xrow[ox * s + kx - pad];
                        }
                        if need_dx {
                            let dxrow = &mut dx[ic * h * w + iy * w..ic * h * w + (iy + 1) * w];
                            for ox in ox_lo..ox_hi {
                                dxrow[ox * s + kx - pad] += wv * drow[ox];
                            }
                        }
                    }
                    g.weights[widx] += gw;
                }
            }
        }
    }
    dx
}

fn upsample_forward(in_shape: &[usize], x: &[f64]) -> Vec<f64> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            let src = &x[ch * h * w + (oy / 2) * w..ch * h * w + (oy / 2 + 1) * w];
            let dst = &mut out[ch * oh * ow + oy * ow..ch * oh * ow + (oy + 1) * ow];
            for (ox, d) in dst.iter_mut().enumerate() {
                *d = src[ox / 2];
            }
        }
    }
    out
}

fn upsample_backward(in_shape: &[usize], d: &[f64]) -> Vec<f64> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                dx[ch * h * w + (oy / 2) * w + ox / 2] += d[ch * oh * ow + oy * ow + ox];
            }
        }
    }
    dx
}
