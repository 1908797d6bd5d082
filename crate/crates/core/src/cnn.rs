//! Configurable feed-forward CNN: convolution, ReLU, max-pooling, and an
//! optional final flatten+linear layer. Produces named feature-grid taps
//! and pulls tap cotangents back to the input image.
//!
//! Convolution runs as im2col + matmul; tests keep a naive six-loop oracle.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, MAGIC_CNN};
use crate::error::{Error, Result};
use crate::tape::{DiffOp, NodeId, Tape};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        name: String,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    /// Flatten followed by a dense map; at most one, as the final layer.
    Linear {
        name: String,
        out_features: usize,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnSpec {
    /// Declared input size as (height, width, channels).
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
    /// Names of conv layers whose outputs are exported.
    pub taps: Vec<String>,
    /// Export taps after applying ReLU to the conv output instead of the
    /// raw pre-activation values.
    #[serde(default)]
    pub taps_post_relu: bool,
}

impl CnnSpec {
    /// Validate tap names and layer geometry for the declared input size.
    pub fn validate(&self) -> Result<()> {
        let (mut h, mut w, c) = self.input;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::InvalidArgument(format!(
                "input size {}x{}x{} must be positive",
                h, w, c
            )));
        }
        let mut seen_linear = false;
        for (i, layer) in self.layers.iter().enumerate() {
            if seen_linear {
                return Err(Error::InvalidArgument(
                    "linear layer must be the final layer".into(),
                ));
            }
            match layer {
                LayerSpec::Conv {
                    name,
                    out_channels,
                    kernel_h,
                    kernel_w,
                    stride,
                    pad,
                } => {
                    if *out_channels == 0 || *kernel_h == 0 || *kernel_w == 0 || *stride == 0 {
                        return Err(Error::InvalidArgument(format!(
                            "conv '{name}' has a zero dimension"
                        )));
                    }
                    h = conv_out(h, *kernel_h, *stride, *pad).ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "conv '{name}' output height is not positive (layer {i})"
                        ))
                    })?;
                    w = conv_out(w, *kernel_w, *stride, *pad).ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "conv '{name}' output width is not positive (layer {i})"
                        ))
                    })?;
                }
                LayerSpec::Relu => {}
                LayerSpec::MaxPool { kernel, stride } => {
                    if *kernel == 0 || *stride == 0 {
                        return Err(Error::InvalidArgument("maxpool with zero dimension".into()));
                    }
                    h = conv_out(h, *kernel, *stride, 0).ok_or_else(|| {
                        Error::InvalidArgument(format!("maxpool output height not positive (layer {i})"))
                    })?;
                    w = conv_out(w, *kernel, *stride, 0).ok_or_else(|| {
                        Error::InvalidArgument(format!("maxpool output width not positive (layer {i})"))
                    })?;
                }
                LayerSpec::Linear { out_features, .. } => {
                    if *out_features == 0 {
                        return Err(Error::InvalidArgument("linear layer with zero outputs".into()));
                    }
                    seen_linear = true;
                }
            }
        }
        for tap in &self.taps {
            let matches = self
                .layers
                .iter()
                .filter(|l| matches!(l, LayerSpec::Conv { name, .. } if name == tap))
                .count();
            if matches != 1 {
                return Err(Error::UnknownTap(format!(
                    "'{tap}' matches {matches} conv layers, expected exactly 1"
                )));
            }
        }
        Ok(())
    }

    /// Output shape (h, w, c) of every conv layer, keyed by name.
    pub fn conv_output_shapes(&self) -> Result<BTreeMap<String, (usize, usize, usize)>> {
        self.validate()?;
        let mut shapes = BTreeMap::new();
        let (mut h, mut w, _) = self.input;
        for layer in &self.layers {
            match layer {
                LayerSpec::Conv {
                    name,
                    out_channels,
                    kernel_h,
                    kernel_w,
                    stride,
                    pad,
                } => {
                    h = conv_out(h, *kernel_h, *stride, *pad).unwrap();
                    w = conv_out(w, *kernel_w, *stride, *pad).unwrap();
                    shapes.insert(name.clone(), (h, w, *out_channels));
                }
                LayerSpec::MaxPool { kernel, stride } => {
                    h = conv_out(h, *kernel, *stride, 0).unwrap();
                    w = conv_out(w, *kernel, *stride, 0).unwrap();
                }
                _ => {}
            }
        }
        Ok(shapes)
    }
}

/// `(n + 2*pad - k) / stride + 1`, None when not positive.
fn conv_out(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Per-layer weights for the conv/linear layers of a [`CnnSpec`].
#[derive(Debug, Clone)]
pub struct CnnModel<T: Element> {
    pub spec: CnnSpec,
    /// Conv weights by layer name: kernel `[out, in, kh, kw]` and bias `[out]`.
    pub conv_weights: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
    /// Linear weights by layer name: `[in_features, out_features]` and bias.
    pub linear_weights: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

/// Output of one tapped conv layer: an `H x W x D` grid of feature vectors.
#[derive(Debug, Clone)]
pub struct FeatureGrid<T: Element> {
    pub layer_name: String,
    pub values: Tensor<T>,
}

impl<T: Element> FeatureGrid<T> {
    pub fn new(layer_name: impl Into<String>, values: Tensor<T>) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::InvalidShape {
                shape: values.shape().to_vec(),
                reason: "feature grid must be rank 3 (H x W x D)".into(),
            });
        }
        Ok(FeatureGrid {
            layer_name: layer_name.into(),
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn depth(&self) -> usize {
        self.values.shape()[2]
    }
}

impl<T: Element> CnnModel<T> {
    /// Build a model after checking weight shapes against the spec.
    pub fn new(
        spec: CnnSpec,
        conv_weights: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
        linear_weights: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
    ) -> Result<Self> {
        spec.validate()?;
        let (mut h, mut w, mut c) = spec.input;
        for layer in &spec.layers {
            match layer {
                LayerSpec::Conv {
                    name,
                    out_channels,
                    kernel_h,
                    kernel_w,
                    stride,
                    pad,
                } => {
                    let (kernel, bias) = conv_weights
                        .get(name)
                        .ok_or_else(|| Error::MissingWeight(name.clone()))?;
                    let expected = [*out_channels, c, *kernel_h, *kernel_w];
                    if kernel.shape() != expected {
                        return Err(Error::shape("conv kernel", kernel.shape(), &expected));
                    }
                    if bias.shape() != [*out_channels] {
                        return Err(Error::shape("conv bias", bias.shape(), &[*out_channels]));
                    }
                    if !kernel.is_all_finite() || !bias.is_all_finite() {
                        return Err(Error::NonFinite {
                            context: format!("conv '{name}' weights"),
                            index: 0,
                            value: f64::NAN,
                        });
                    }
                    h = conv_out(h, *kernel_h, *stride, *pad).unwrap();
                    w = conv_out(w, *kernel_w, *stride, *pad).unwrap();
                    c = *out_channels;
                }
                LayerSpec::MaxPool { kernel, stride } => {
                    h = conv_out(h, *kernel, *stride, 0).unwrap();
                    w = conv_out(w, *kernel, *stride, 0).unwrap();
                }
                LayerSpec::Relu => {}
                LayerSpec::Linear { name, out_features } => {
                    let (weight, bias) = linear_weights
                        .get(name)
                        .ok_or_else(|| Error::MissingWeight(name.clone()))?;
                    let in_features = h * w * c;
                    let expected = [in_features, *out_features];
                    if weight.shape() != expected {
                        return Err(Error::shape("linear weight", weight.shape(), &expected));
                    }
                    if bias.shape() != [*out_features] {
                        return Err(Error::shape("linear bias", bias.shape(), &[*out_features]));
                    }
                    if !weight.is_all_finite() || !bias.is_all_finite() {
                        return Err(Error::NonFinite {
                            context: format!("linear '{name}' weights"),
                            index: 0,
                            value: f64::NAN,
                        });
                    }
                }
            }
        }
        Ok(CnnModel {
            spec,
            conv_weights,
            linear_weights,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({ "spec": self.spec });
        let mut tensors: Vec<(String, &Tensor<T>)> = Vec::new();
        for (name, (kernel, bias)) in &self.conv_weights {
            tensors.push((format!("{name}.kernel"), kernel));
            tensors.push((format!("{name}.bias"), bias));
        }
        for (name, (weight, bias)) in &self.linear_weights {
            tensors.push((format!("{name}.weight"), weight));
            tensors.push((format!("{name}.bias"), bias));
        }
        container::write(path, MAGIC_CNN, meta, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = container::read(path, MAGIC_CNN)?;
        let spec: CnnSpec = serde_json::from_value(
            c.meta
                .get("spec")
                .cloned()
                .ok_or_else(|| Error::MalformedContainer("missing 'spec' in header".into()))?,
        )?;
        let mut conv_weights = BTreeMap::new();
        let mut linear_weights = BTreeMap::new();
        for layer in &spec.layers {
            match layer {
                LayerSpec::Conv { name, .. } => {
                    let kernel = c.tensor::<T>(&format!("{name}.kernel"))?;
                    let bias = c.tensor::<T>(&format!("{name}.bias"))?;
                    conv_weights.insert(name.clone(), (kernel, bias));
                }
                LayerSpec::Linear { name, .. } => {
                    let weight = c.tensor::<T>(&format!("{name}.weight"))?;
                    let bias = c.tensor::<T>(&format!("{name}.bias"))?;
                    linear_weights.insert(name.clone(), (weight, bias));
                }
                _ => {}
            }
        }
        CnnModel::new(spec, conv_weights, linear_weights)
    }

    /// Run the network, returning every tapped feature grid.
    pub fn forward(&self, image: &Tensor<T>) -> Result<BTreeMap<String, FeatureGrid<T>>> {
        Ok(self.forward_full(image)?.0)
    }

    /// Run the network, returning taps plus the final layer output.
    pub fn forward_full(
        &self,
        image: &Tensor<T>,
    ) -> Result<(BTreeMap<String, FeatureGrid<T>>, Tensor<T>)> {
        self.check_image_shape(image)?;
        let mut current = image.clone();
        let mut taps = BTreeMap::new();
        for layer in &self.spec.layers {
            match layer {
                LayerSpec::Conv {
                    name, stride, pad, ..
                } => {
                    let (kernel, bias) = &self.conv_weights[name];
                    current = conv2d_forward(&current, kernel, bias, *stride, *pad)?;
                    if self.spec.taps.contains(name) {
                        let exported = if self.spec.taps_post_relu {
                            current.relu()
                        } else {
                            current.clone()
                        };
                        taps.insert(name.clone(), FeatureGrid::new(name.clone(), exported)?);
                    }
                }
                LayerSpec::Relu => current = current.relu(),
                LayerSpec::MaxPool { kernel, stride } => {
                    current = maxpool_forward(&current, *kernel, *stride)?.0;
                }
                LayerSpec::Linear { name, .. } => {
                    let (weight, bias) = &self.linear_weights[name];
                    let flat = current.reshape(&[1, current.numel()])?;
                    current = flat.matmul(weight)?.add_row(bias)?.reshape(&[bias.numel()])?;
                }
            }
        }
        Ok((taps, current))
    }

    /// Pull tap cotangents back to image space: the sum over taps of each
    /// cotangent's pullback.
    pub fn input_gradient(
        &self,
        image: &Tensor<T>,
        tap_cotangents: &BTreeMap<String, Tensor<T>>,
    ) -> Result<Tensor<T>> {
        self.check_image_shape(image)?;
        let mut tape = Tape::new();
        let image_node = tape.input(image.clone());
        let (taps, _) = build_forward(&mut tape, self, image_node)?;
        let mut seeds = Vec::new();
        for (name, cotangent) in tap_cotangents {
            let node = *taps
                .get(name)
                .ok_or_else(|| Error::UnknownTap(name.clone()))?;
            if cotangent.shape() != tape.value(node).shape() {
                return Err(Error::shape(
                    "tap cotangent",
                    cotangent.shape(),
                    tape.value(node).shape(),
                ));
            }
            seeds.push((node, cotangent.clone()));
        }
        let grads = tape.backward_seeded(seeds)?;
        Ok(grads.get_or_zeros(image_node, image.shape()))
    }

    fn check_image_shape(&self, image: &Tensor<T>) -> Result<()> {
        let (h, w, c) = self.spec.input;
        if image.shape() != [h, w, c] {
            return Err(Error::shape("cnn input", image.shape(), &[h, w, c]));
        }
        Ok(())
    }
}

/// Build the network on a tape. Weights enter as constants; returns tap
/// node ids and the final output node.
pub fn build_forward<T: Element>(
    tape: &mut Tape<T>,
    model: &CnnModel<T>,
    image: NodeId,
) -> Result<(BTreeMap<String, NodeId>, NodeId)> {
    let mut current = image;
    let mut taps = BTreeMap::new();
    for layer in &model.spec.layers {
        match layer {
            LayerSpec::Conv {
                name, stride, pad, ..
            } => {
                let (kernel, bias) = &model.conv_weights[name];
                let kernel_node = tape.constant(kernel.clone());
                let bias_node = tape.constant(bias.clone());
                current = tape.apply(
                    Box::new(Conv2d {
                        stride: *stride,
                        pad: *pad,
                    }),
                    &[current, kernel_node, bias_node],
                )?;
                if model.spec.taps.contains(name) {
                    let exported = if model.spec.taps_post_relu {
                        tape.relu(current)?
                    } else {
                        current
                    };
                    taps.insert(name.clone(), exported);
                }
            }
            LayerSpec::Relu => current = tape.relu(current)?,
            LayerSpec::MaxPool { kernel, stride } => {
                current = tape.apply(
                    Box::new(MaxPool {
                        kernel: *kernel,
                        stride: *stride,
                    }),
                    &[current],
                )?;
            }
            LayerSpec::Linear { name, .. } => {
                let (weight, bias) = &model.linear_weights[name];
                let weight_node = tape.constant(weight.clone());
                let bias_node = tape.constant(bias.clone());
                let numel = tape.value(current).numel();
                let flat = tape.reshape(current, &[1, numel])?;
                let prod = tape.matmul(flat, weight_node)?;
                let biased = tape.add_row(prod, bias_node)?;
                current = tape.reshape(biased, &[bias.numel()])?;
            }
        }
    }
    Ok((taps, current))
}

/// Patch matrix of shape `[out_h*out_w, in_c*kh*kw]`; row layout matches a
/// kernel flattened as (in_c, ky, kx) row-major.
fn im2col<T: Element>(
    input: &Tensor<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Tensor<T>, usize, usize) {
    let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let out_h = conv_out(h, kh, stride, pad).expect("validated geometry");
    let out_w = conv_out(w, kw, stride, pad).expect("validated geometry");
    let row_len = c * kh * kw;
    let mut data = vec![T::zero(); out_h * out_w * row_len];
    let input_data = input.data();
    for oy in 0..out_h {
        for ox in 0..out_w {
            let row_base = (oy * out_w + ox) * row_len;
            for ic in 0..c {
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = (iy as usize * w + ix as usize) * c + ic;
                        data[row_base + (ic * kh + ky) * kw + kx] = input_data[src];
                    }
                }
            }
        }
    }
    (
        Tensor::from_vec(&[out_h * out_w, row_len], data).expect("im2col shape"),
        out_h,
        out_w,
    )
}

/// Scatter-add of a patch-matrix cotangent back to input space.
fn col2im<T: Element>(
    patches_grad: &Tensor<T>,
    input_shape: &[usize],
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (h, w, c) = (input_shape[0], input_shape[1], input_shape[2]);
    let out_h = conv_out(h, kh, stride, pad).expect("validated geometry");
    let out_w = conv_out(w, kw, stride, pad).expect("validated geometry");
    let row_len = c * kh * kw;
    let mut grad = Tensor::zeros(input_shape);
    let grad_data = grad.data_mut();
    let src = patches_grad.data();
    for oy in 0..out_h {
        for ox in 0..out_w {
            let row_base = (oy * out_w + ox) * row_len;
            for ic in 0..c {
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = (iy as usize * w + ix as usize) * c + ic;
                        grad_data[dst] += src[row_base + (ic * kh + ky) * kw + kx];
                    }
                }
            }
        }
    }
    grad
}

/// im2col + matmul convolution over an `[H,W,Cin]` input.
pub fn conv2d_forward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    if input.rank() != 3 || kernel.rank() != 4 {
        return Err(Error::shape("conv2d", input.shape(), kernel.shape()));
    }
    let (out_c, in_c, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    if input.shape()[2] != in_c || bias.shape() != [out_c] {
        return Err(Error::shape("conv2d channels", input.shape(), kernel.shape()));
    }
    if conv_out(input.shape()[0], kh, stride, pad).is_none()
        || conv_out(input.shape()[1], kw, stride, pad).is_none()
    {
        return Err(Error::InvalidArgument(format!(
            "conv2d output not positive for input {:?} kernel {:?} stride {stride} pad {pad}",
            input.shape(),
            kernel.shape()
        )));
    }
    let (patches, out_h, out_w) = im2col(input, kh, kw, stride, pad);
    let kmat = kernel.reshape(&[out_c, in_c * kh * kw])?.transpose()?;
    let out = patches.matmul(&kmat)?.add_row(bias)?;
    out.reshape(&[out_h, out_w, out_c])
}

/// Max-pool over an `[H,W,C]` input; also returns the flat argmax indices
/// used to route gradients (first maximum wins on ties).
pub fn maxpool_forward<T: Element>(
    input: &Tensor<T>,
    kernel: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    if input.rank() != 3 {
        return Err(Error::InvalidArgument(format!(
            "maxpool on rank-{} tensor",
            input.rank()
        )));
    }
    let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let out_h = conv_out(h, kernel, stride, 0).ok_or_else(|| {
        Error::InvalidArgument(format!("maxpool output not positive for input {:?}", input.shape()))
    })?;
    let out_w = conv_out(w, kernel, stride, 0).unwrap();
    let mut data = vec![T::zero(); out_h * out_w * c];
    let mut argmax = vec![0usize; out_h * out_w * c];
    let src = input.data();
    for oy in 0..out_h {
        for ox in 0..out_w {
            for ch in 0..c {
                let mut best = T::from_f64(f64::NEG_INFINITY);
                let mut best_idx = 0;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let iy = oy * stride + ky;
                        let ix = ox * stride + kx;
                        let idx = (iy * w + ix) * c + ch;
                        if src[idx] > best {
                            best = src[idx];
                            best_idx = idx;
                        }
                    }
                }
                let dst = (oy * out_w + ox) * c + ch;
                data[dst] = best;
                argmax[dst] = best_idx;
            }
        }
    }
    Ok((Tensor::from_vec(&[out_h, out_w, c], data)?, argmax))
}

/// Convolution as a differentiable op: inputs are (image, kernel, bias).
#[derive(Debug)]
pub struct Conv2d {
    pub stride: usize,
    pub pad: usize,
}

impl<T: Element> DiffOp<T> for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        conv2d_forward(inputs[0], inputs[1], inputs[2], self.stride, self.pad)
    }

    fn vjp(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        upstream: &Tensor<T>,
    ) -> Result<Vec<Tensor<T>>> {
        let (input, kernel) = (inputs[0], inputs[1]);
        let (out_c, in_c, kh, kw) = (
            kernel.shape()[0],
            kernel.shape()[1],
            kernel.shape()[2],
            kernel.shape()[3],
        );
        let positions = output.shape()[0] * output.shape()[1];
        let up_mat = upstream.reshape(&[positions, out_c])?;

        let (patches, _, _) = im2col(input, kh, kw, self.stride, self.pad);
        // d/d input: (U x K) scattered back through the patch map
        let kmat = kernel.reshape(&[out_c, in_c * kh * kw])?;
        let patches_grad = up_mat.matmul(&kmat)?;
        let d_input = col2im(&patches_grad, input.shape(), kh, kw, self.stride, self.pad);
        // d/d kernel: patches^T x U, transposed back to [out, in*kh*kw]
        let d_kmat = patches.transpose()?.matmul(&up_mat)?;
        let d_kernel = d_kmat.transpose()?.reshape(kernel.shape())?;
        // d/d bias: per-channel sums
        let d_bias = up_mat.sum_cols()?;
        Ok(vec![d_input, d_kernel, d_bias])
    }
}

/// Max-pooling as a differentiable op; the vjp routes each upstream value
/// to the position that won the forward max.
#[derive(Debug)]
pub struct MaxPool {
    pub kernel: usize,
    pub stride: usize,
}

impl<T: Element> DiffOp<T> for MaxPool {
    fn name(&self) -> &'static str {
        "maxpool"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        Ok(maxpool_forward(inputs[0], self.kernel, self.stride)?.0)
    }

    fn vjp(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        upstream: &Tensor<T>,
    ) -> Result<Vec<Tensor<T>>> {
        let (_, argmax) = maxpool_forward(inputs[0], self.kernel, self.stride)?;
        let mut grad = Tensor::zeros(inputs[0].shape());
        let grad_data = grad.data_mut();
        for (dst, &src_idx) in argmax.iter().enumerate() {
            grad_data[src_idx] += upstream.data()[dst];
        }
        Ok(vec![grad])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct six-loop convolution used as the oracle.
    fn conv2d_naive(
        input: &Tensor<f64>,
        kernel: &Tensor<f64>,
        bias: &Tensor<f64>,
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let (h, w, _c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (out_c, in_c, kh, kw) = (
            kernel.shape()[0],
            kernel.shape()[1],
            kernel.shape()[2],
            kernel.shape()[3],
        );
        let out_h = (h + 2 * pad - kh) / stride + 1;
        let out_w = (w + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[out_h, out_w, out_c]);
        for oy in 0..out_h {
            for ox in 0..out_w {
                for oc in 0..out_c {
                    let mut acc = bias.data()[oc];
                    for ic in 0..in_c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += input.get(&[iy as usize, ix as usize, ic])
                                    * kernel.get(&[oc, ic, ky, kx]);
                            }
                        }
                    }
                    out.set(&[oy, ox, oc], acc);
                }
            }
        }
        out
    }

    fn identity_1x1_spec() -> CnnSpec {
        CnnSpec {
            input: (4, 4, 2),
            layers: vec![LayerSpec::Conv {
                name: "conv1".into(),
                out_channels: 2,
                kernel_h: 1,
                kernel_w: 1,
                stride: 1,
                pad: 0,
            }],
            taps: vec!["conv1".into()],
            taps_post_relu: false,
        }
    }

    fn identity_1x1_model() -> CnnModel<f64> {
        // 1x1 kernel mapping each channel to itself
        let mut kernel = Tensor::zeros(&[2, 2, 1, 1]);
        kernel.set(&[0, 0, 0, 0], 1.0);
        kernel.set(&[1, 1, 0, 0], 1.0);
        let bias = Tensor::zeros(&[2]);
        let mut conv = BTreeMap::new();
        conv.insert("conv1".to_string(), (kernel, bias));
        CnnModel::new(identity_1x1_spec(), conv, BTreeMap::new()).unwrap()
    }

    #[test]
    fn identity_kernel_taps_the_input() {
        let model = identity_1x1_model();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let image = rand_tensor(&mut rng, &[4, 4, 2]);
        let taps = model.forward(&image).unwrap();
        assert_eq!(taps["conv1"].values, image);
    }

    #[test]
    fn ones_kernel_sums_window() {
        // 3x3 all-ones kernel on a constant image: valid region = 9 * c * in_channels
        let spec = CnnSpec {
            input: (5, 5, 2),
            layers: vec![LayerSpec::Conv {
                name: "conv1".into(),
                out_channels: 1,
                kernel_h: 3,
                kernel_w: 3,
                stride: 1,
                pad: 0,
            }],
            taps: vec!["conv1".into()],
            taps_post_relu: false,
        };
        let kernel = Tensor::filled(&[1, 2, 3, 3], 1.0);
        let bias = Tensor::zeros(&[1]);
        let mut conv = BTreeMap::new();
        conv.insert("conv1".to_string(), (kernel, bias));
        let model = CnnModel::new(spec, conv, BTreeMap::new()).unwrap();
        let image = Tensor::filled(&[5, 5, 2], 0.5);
        let taps = model.forward(&image).unwrap();
        for &v in taps["conv1"].values.data() {
            assert!((v - 9.0 * 0.5 * 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn im2col_conv_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(h, w, ic, oc, k, stride, pad) in &[
            (6, 7, 3, 4, 3, 1, 0),
            (8, 8, 2, 3, 3, 2, 1),
            (5, 5, 1, 2, 1, 1, 0),
            (9, 6, 3, 2, 5, 2, 2),
        ] {
            let input = rand_tensor(&mut rng, &[h, w, ic]);
            let kernel = rand_tensor(&mut rng, &[oc, ic, k, k]);
            let bias = rand_tensor(&mut rng, &[oc]);
            let fast = conv2d_forward(&input, &kernel, &bias, stride, pad).unwrap();
            let naive = conv2d_naive(&input, &kernel, &bias, stride, pad);
            let diff = crate::tensor::max_abs_diff(&fast, &naive).unwrap();
            // 8 ulps at the magnitudes in play is well below 1e-12
            assert!(diff < 1e-12, "conv mismatch {diff}");
        }
    }

    #[test]
    fn forward_is_linear_for_conv_only_specs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = identity_1x1_model();
        let x = rand_tensor(&mut rng, &[4, 4, 2]);
        let y = rand_tensor(&mut rng, &[4, 4, 2]);
        let (a, b) = (0.7, -1.3);
        let combo = x.scale(a).add(&y.scale(b)).unwrap();
        let lhs = model.forward(&combo).unwrap()["conv1"].values.clone();
        let rhs = model.forward(&x).unwrap()["conv1"]
            .values
            .scale(a)
            .add(&model.forward(&y).unwrap()["conv1"].values.scale(b))
            .unwrap();
        assert!(crate::tensor::max_abs_diff(&lhs, &rhs).unwrap() < 1e-10);
    }

    #[test]
    fn maxpool_bounds_and_relu_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input = rand_tensor(&mut rng, &[6, 6, 3]);
        let (pooled, _) = maxpool_forward(&input, 2, 2).unwrap();
        for oy in 0..3 {
            for ox in 0..3 {
                for c in 0..3 {
                    let mut window_max = f64::NEG_INFINITY;
                    for ky in 0..2 {
                        for kx in 0..2 {
                            window_max = window_max.max(input.get(&[oy * 2 + ky, ox * 2 + kx, c]));
                        }
                    }
                    assert_eq!(pooled.get(&[oy, ox, c]), window_max);
                }
            }
        }
        let r = input.relu();
        for (&a, &b) in input.data().iter().zip(r.data().iter()) {
            assert!(b >= 0.0);
            if a >= 0.0 {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn alexnet_shaped_conv1_geometry() {
        // 227x227x3 input, 11x11 stride-4 conv with 96 filters -> 55x55x96
        let spec = CnnSpec {
            input: (227, 227, 3),
            layers: vec![LayerSpec::Conv {
                name: "conv1".into(),
                out_channels: 96,
                kernel_h: 11,
                kernel_w: 11,
                stride: 4,
                pad: 0,
            }],
            taps: vec!["conv1".into()],
            taps_post_relu: false,
        };
        let shapes = spec.conv_output_shapes().unwrap();
        assert_eq!(shapes["conv1"], (55, 55, 96));
    }

    #[test]
    fn tap_validation() {
        let mut spec = identity_1x1_spec();
        spec.taps = vec!["nope".into()];
        assert!(spec.validate().is_err());
        let mut dup = identity_1x1_spec();
        dup.layers.push(dup.layers[0].clone());
        dup.taps = vec!["conv1".into()];
        assert!(dup.validate().is_err());
    }

    #[test]
    fn input_gradient_identity_and_zero() {
        let model = identity_1x1_model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let image = rand_tensor(&mut rng, &[4, 4, 2]);
        let g = rand_tensor(&mut rng, &[4, 4, 2]);
        let mut cots = BTreeMap::new();
        cots.insert("conv1".to_string(), g.clone());
        let grad = model.input_gradient(&image, &cots).unwrap();
        assert_eq!(grad, g);

        let mut zero_cots = BTreeMap::new();
        zero_cots.insert("conv1".to_string(), Tensor::zeros(&[4, 4, 2]));
        let grad = model.input_gradient(&image, &zero_cots).unwrap();
        assert!(grad.data().iter().all(|&v| v == 0.0));

        let mut bad = BTreeMap::new();
        bad.insert("nope".to_string(), g);
        assert!(model.input_gradient(&image, &bad).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = std::env::temp_dir().join("cnnvlm-cnn-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.vlmw");
        let model = identity_1x1_model();
        model.save(&path).unwrap();
        let loaded: CnnModel<f64> = CnnModel::load(&path).unwrap();
        assert_eq!(loaded.spec.taps, model.spec.taps);
        assert_eq!(
            loaded.conv_weights["conv1"].0,
            model.conv_weights["conv1"].0
        );
        assert_eq!(
            loaded.conv_weights["conv1"].1,
            model.conv_weights["conv1"].1
        );
    }
}
