//! Small feed-forward networks with hand-coded reverse-mode
//! differentiation over a fixed layer vocabulary (affine, conv2d with
//! stride 1 and no padding, ReLU) and the forward-pass FLOP model.

use std::sync::Arc;

use crate::models::ModelError;
use crate::param_space::{ConvShape, GroupLayout, GroupRole, GroupSpec, ParamVector};

/// Shape of an activation tensor between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorShape {
    Vector(usize),
    Image { c: usize, h: usize, w: usize },
}

impl TensorShape {
    pub fn flat_len(&self) -> usize {
        match *self {
            TensorShape::Vector(n) => n,
            TensorShape::Image { c, h, w } => c * h * w,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Affine { n_in: usize, n_out: usize },
    Conv2D { c_in: usize, c_out: usize, k: usize },
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Mse,
    SoftmaxCrossEntropy,
}

/// Per-sample training target.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Class(usize),
    Values(&'a [f64]),
}

/// Which parameter groups a layout uses for a network.
///
/// `Layer` is the canonical induced layout: one weight group and one bias
/// group per parametric layer. `Refined` subdivides weights to the
/// granularity the restriction operator freezes at: one group per scalar
/// affine weight and one per convolutional kernel slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grouping {
    Layer,
    Refined,
}

#[derive(Debug, Clone)]
struct ParamSlot {
    layer: usize,
    weight_offset: usize,
    weight_len: usize,
    bias_offset: usize,
    bias_len: usize,
}

/// An ordered layer list with a head, validated so consecutive shapes
/// compose. Parameters live in one flat vector: weights then bias for each
/// parametric layer, in layer order.
#[derive(Debug, Clone)]
pub struct NetworkSpec {
    input: TensorShape,
    layers: Vec<LayerSpec>,
    head: Head,
    shapes: Vec<TensorShape>,
    slots: Vec<ParamSlot>,
    param_count: usize,
}

impl NetworkSpec {
    pub fn new(
        input: TensorShape,
        layers: Vec<LayerSpec>,
        head: Head,
    ) -> Result<Self, ModelError> {
        let mut shapes = Vec::with_capacity(layers.len());
        let mut slots = Vec::new();
        let mut offset = 0usize;
        let mut current = input;
        for (li, layer) in layers.iter().enumerate() {
            match *layer {
                LayerSpec::Affine { n_in, n_out } => {
                    if current.flat_len() != n_in {
                        return Err(ModelError::ShapeMismatch(format!(
                            "layer {li}: affine expects {n_in} inputs, got {}",
                            current.flat_len()
                        )));
                    }
                    if n_out == 0 {
                        return Err(ModelError::ShapeMismatch(format!(
                            "layer {li}: affine with 0 outputs"
                        )));
                    }
                    slots.push(ParamSlot {
                        layer: li,
                        weight_offset: offset,
                        weight_len: n_in * n_out,
                        bias_offset: offset + n_in * n_out,
                        bias_len: n_out,
                    });
                    offset += n_in * n_out + n_out;
                    current = TensorShape::Vector(n_out);
                }
                LayerSpec::Conv2D { c_in, c_out, k } => {
                    let TensorShape::Image { c, h, w } = current else {
                        return Err(ModelError::ShapeMismatch(format!(
                            "layer {li}: conv2d needs an image input"
                        )));
                    };
                    if c != c_in {
                        return Err(ModelError::ShapeMismatch(format!(
                            "layer {li}: conv2d expects {c_in} channels, got {c}"
                        )));
                    }
                    if k == 0 || c_out == 0 || h < k || w < k {
                        return Err(ModelError::ShapeMismatch(format!(
                            "layer {li}: conv2d kernel {k} does not fit {h}x{w} input"
                        )));
                    }
                    slots.push(ParamSlot {
                        layer: li,
                        weight_offset: offset,
                        weight_len: c_in * c_out * k * k,
                        bias_offset: offset + c_in * c_out * k * k,
                        bias_len: c_out,
                    });
                    offset += c_in * c_out * k * k + c_out;
                    current = TensorShape::Image { c: c_out, h: h - k + 1, w: w - k + 1 };
                }
                LayerSpec::Relu => {}
            }
            shapes.push(current);
        }
        if slots.is_empty() {
            return Err(ModelError::ShapeMismatch("network has no parametric layers".into()));
        }
        if head == Head::SoftmaxCrossEntropy && current.flat_len() < 2 {
            return Err(ModelError::ShapeMismatch(
                "softmax cross-entropy needs at least 2 logits".into(),
            ));
        }
        Ok(NetworkSpec { input, layers, head, shapes, slots, param_count: offset })
    }

    /// A fully connected `dims[0] -> ... -> dims.last()` network with ReLU
    /// between affine layers.
    pub fn mlp(dims: &[usize], head: Head) -> Result<Self, ModelError> {
        if dims.len() < 2 {
            return Err(ModelError::ShapeMismatch("mlp needs at least two dims".into()));
        }
        let mut layers = Vec::new();
        for (i, pair) in dims.windows(2).enumerate() {
            layers.push(LayerSpec::Affine { n_in: pair[0], n_out: pair[1] });
            if i + 2 < dims.len() {
                layers.push(LayerSpec::Relu);
            }
        }
        NetworkSpec::new(TensorShape::Vector(dims[0]), layers, head)
    }

    pub fn input_shape(&self) -> TensorShape {
        self.input
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn output_dim(&self) -> usize {
        self.shapes.last().map_or(self.input.flat_len(), |s| s.flat_len())
    }

    /// Fan-in of each parametric layer (affine inputs, or `c_in * k^2`).
    pub fn fan_ins(&self) -> Vec<usize> {
        self.slots
            .iter()
            .map(|s| match self.layers[s.layer] {
                LayerSpec::Affine { n_in, .. } => n_in,
                LayerSpec::Conv2D { c_in, k, .. } => c_in * k * k,
                LayerSpec::Relu => unreachable!("slot on non-parametric layer"),
            })
            .collect()
    }

    /// Per parametric layer: flat offset and length of the weight block.
    pub fn weight_ranges(&self) -> Vec<std::ops::Range<usize>> {
        self.slots.iter().map(|s| s.weight_offset..s.weight_offset + s.weight_len).collect()
    }

    /// The induced layout: one weight group plus one bias group per
    /// parametric layer; conv weight groups carry their kernel shape.
    pub fn layout(&self) -> Arc<GroupLayout> {
        self.build_layout(Grouping::Layer)
    }

    pub fn build_layout(&self, grouping: Grouping) -> Arc<GroupLayout> {
        let mut groups = Vec::new();
        for slot in &self.slots {
            let li = slot.layer;
            match (self.layers[li], grouping) {
                (LayerSpec::Affine { .. }, Grouping::Layer) => {
                    groups.push(GroupSpec::new(
                        format!("l{li}.weight"),
                        slot.weight_len,
                        GroupRole::Weight,
                    ));
                }
                (LayerSpec::Affine { .. }, Grouping::Refined) => {
                    for j in 0..slot.weight_len {
                        groups.push(GroupSpec::new(format!("l{li}.w{j}"), 1, GroupRole::Weight));
                    }
                }
                (LayerSpec::Conv2D { c_in, c_out, k }, Grouping::Layer) => {
                    groups.push(GroupSpec::conv_kernel(
                        format!("l{li}.weight"),
                        ConvShape { c_in, c_out, k },
                    ));
                }
                (LayerSpec::Conv2D { c_in, c_out, k }, Grouping::Refined) => {
                    for i in 0..c_in {
                        for j in 0..c_out {
                            groups.push(GroupSpec::conv_kernel(
                                format!("l{li}.k{i}_{j}"),
                                ConvShape { c_in: 1, c_out: 1, k },
                            ));
                        }
                    }
                }
                (LayerSpec::Relu, _) => unreachable!("slot on non-parametric layer"),
            }
            groups.push(GroupSpec::new(format!("l{li}.bias"), slot.bias_len, GroupRole::Bias));
        }
        Arc::new(GroupLayout::new(groups).expect("induced layout is valid"))
    }

    fn slot_for_layer(&self, li: usize) -> &ParamSlot {
        self.slots
            .iter()
            .find(|s| s.layer == li)
            .expect("parametric layer has a slot")
    }

    fn layer_input_shape(&self, li: usize) -> TensorShape {
        if li == 0 {
            self.input
        } else {
            self.shapes[li - 1]
        }
    }

    /// Activations after each layer; index 0 holds the input.
    fn forward_trace(&self, theta: &[f64], input: &[f64]) -> Vec<Vec<f64>> {
        debug_assert_eq!(theta.len(), self.param_count);
        debug_assert_eq!(input.len(), self.input.flat_len());
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.to_vec());
        for (li, layer) in self.layers.iter().enumerate() {
            let prev = acts.last().unwrap();
            let next = match *layer {
                LayerSpec::Affine { n_in, n_out } => {
                    let slot = self.slot_for_layer(li);
                    let w = &theta[slot.weight_offset..slot.weight_offset + slot.weight_len];
                    let b = &theta[slot.bias_offset..slot.bias_offset + slot.bias_len];
                    let mut out = vec![0.0; n_out];
                    for o in 0..n_out {
                        let row = &w[o * n_in..(o + 1) * n_in];
                        let mut acc = b[o];
                        for (wi, ai) in row.iter().zip(prev.iter()) {
                            acc += wi * ai;
                        }
                        out[o] = acc;
                    }
                    out
                }
                LayerSpec::Conv2D { c_in, c_out, k } => {
                    let TensorShape::Image { h, w: width, .. } = self.layer_input_shape(li)
                    else {
                        unreachable!("validated at construction")
                    };
                    let (h_out, w_out) = (h - k + 1, width - k + 1);
                    let slot = self.slot_for_layer(li);
                    let kern = &theta[slot.weight_offset..slot.weight_offset + slot.weight_len];
                    let bias = &theta[slot.bias_offset..slot.bias_offset + slot.bias_len];
                    let mut out = vec![0.0; c_out * h_out * w_out];
                    for j in 0..c_out {
                        for y in 0..h_out {
                            for x in 0..w_out {
                                let mut acc = bias[j];
                                for i in 0..c_in {
                                    let base = (i * c_out + j) * k * k;
                                    for r in 0..k {
                                        for c in 0..k {
                                            acc += kern[base + r * k + c]
                                                * prev[i * h * width + (y + r) * width + (x + c)];
                                        }
                                    }
                                }
                                out[(j * h_out + y) * w_out + x] = acc;
                            }
                        }
                    }
                    out
                }
                LayerSpec::Relu => prev.iter().map(|a| if *a > 0.0 { *a } else { 0.0 }).collect(),
            };
            acts.push(next);
        }
        acts
    }

    /// Network output (logits for a classification head).
    pub fn forward(&self, theta: &[f64], input: &[f64]) -> Vec<f64> {
        self.forward_trace(theta, input).pop().unwrap()
    }

    fn head_loss_grad(&self, output: &[f64], target: Target<'_>) -> (f64, Vec<f64>) {
        match (self.head, target) {
            (Head::Mse, Target::Values(t)) => {
                debug_assert_eq!(output.len(), t.len());
                let mut grad = vec![0.0; output.len()];
                let mut loss = 0.0;
                for (i, (o, ti)) in output.iter().zip(t).enumerate() {
                    let r = o - ti;
                    loss += 0.5 * r * r;
                    grad[i] = r;
                }
                (loss, grad)
            }
            (Head::SoftmaxCrossEntropy, Target::Class(label)) => {
                debug_assert!(label < output.len());
                let max = output.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut grad: Vec<f64> = output.iter().map(|o| (o - max).exp()).collect();
                let sum: f64 = grad.iter().sum();
                let loss = sum.ln() + max - output[label];
                for g in &mut grad {
                    *g /= sum;
                }
                grad[label] -= 1.0;
                (loss, grad)
            }
            (Head::Mse, Target::Class(_)) | (Head::SoftmaxCrossEntropy, Target::Values(_)) => {
                panic!("target kind does not match network head")
            }
        }
    }

    pub fn sample_loss(&self, theta: &[f64], input: &[f64], target: Target<'_>) -> f64 {
        let out = self.forward(theta, input);
        self.head_loss_grad(&out, target).0
    }

    /// Backpropagates one sample, accumulating the parameter gradient into
    /// `grad`. Returns the sample loss.
    pub fn sample_gradient_acc(
        &self,
        theta: &[f64],
        input: &[f64],
        target: Target<'_>,
        grad: &mut [f64],
    ) -> f64 {
        debug_assert_eq!(grad.len(), self.param_count);
        let acts = self.forward_trace(theta, input);
        let (loss, mut g_out) = self.head_loss_grad(acts.last().unwrap(), target);
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let a_in = &acts[li];
            match *layer {
                LayerSpec::Affine { n_in, n_out } => {
                    let slot = self.slot_for_layer(li);
                    let w = &theta[slot.weight_offset..slot.weight_offset + slot.weight_len];
                    let mut g_in = vec![0.0; n_in];
                    for o in 0..n_out {
                        let go = g_out[o];
                        grad[slot.bias_offset + o] += go;
                        let row = o * n_in;
                        for i in 0..n_in {
                            grad[slot.weight_offset + row + i] += go * a_in[i];
                            g_in[i] += w[row + i] * go;
                        }
                    }
                    g_out = g_in;
                }
                LayerSpec::Conv2D { c_in, c_out, k } => {
                    let TensorShape::Image { h, w: width, .. } = self.layer_input_shape(li)
                    else {
                        unreachable!("validated at construction")
                    };
                    let (h_out, w_out) = (h - k + 1, width - k + 1);
                    let slot = self.slot_for_layer(li);
                    let kern = &theta[slot.weight_offset..slot.weight_offset + slot.weight_len];
                    let mut g_in = vec![0.0; c_in * h * width];
                    for j in 0..c_out {
                        for y in 0..h_out {
                            for x in 0..w_out {
                                let go = g_out[(j * h_out + y) * w_out + x];
                                if go == 0.0 {
                                    continue;
                                }
                                grad[slot.bias_offset + j] += go;
                                for i in 0..c_in {
                                    let base = (i * c_out + j) * k * k;
                                    for r in 0..k {
                                        for c in 0..k {
                                            let a_idx = i * h * width + (y + r) * width + (x + c);
                                            grad[slot.weight_offset + base + r * k + c] +=
                                                go * a_in[a_idx];
                                            g_in[a_idx] += kern[base + r * k + c] * go;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    g_out = g_in;
                }
                LayerSpec::Relu => {
                    // Subgradient 0 at the kink.
                    for (g, a) in g_out.iter_mut().zip(a_in) {
                        if *a <= 0.0 {
                            *g = 0.0;
                        }
                    }
                }
            }
        }
        loss
    }

    /// Smallest |pre-activation| feeding any ReLU, or `None` if the network
    /// has no ReLU layers. Used to keep finite-difference checks away from
    /// kinks.
    pub fn min_abs_preactivation(&self, theta: &[f64], input: &[f64]) -> Option<f64> {
        if !self.layers.iter().any(|l| matches!(l, LayerSpec::Relu)) {
            return None;
        }
        let acts = self.forward_trace(theta, input);
        let mut min = f64::INFINITY;
        for (li, layer) in self.layers.iter().enumerate() {
            if matches!(layer, LayerSpec::Relu) {
                for a in &acts[li] {
                    min = min.min(a.abs());
                }
            }
        }
        Some(min)
    }

    pub fn predict_class(&self, theta: &[f64], input: &[f64]) -> usize {
        let out = self.forward(theta, input);
        out.iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

/// Support used when counting forward-pass FLOPs.
#[derive(Debug, Clone, Copy)]
pub enum FlopSupport<'a> {
    Dense,
    /// Count only the nonzero weights of this parameter vector. Bias
    /// additions are always counted dense; biases are never masked.
    Sparse(&'a ParamVector),
}

/// Forward-pass FLOPs over affine and convolutional layers, with one
/// multiply-add counted as 2 FLOPs plus the bias additions. Other layer
/// kinds are ignored.
pub fn forward_flops(net: &NetworkSpec, support: FlopSupport<'_>) -> u64 {
    let nnz = |range: std::ops::Range<usize>| -> u64 {
        match support {
            FlopSupport::Dense => (range.end - range.start) as u64,
            FlopSupport::Sparse(theta) => {
                theta.as_slice()[range].iter().filter(|v| **v != 0.0).count() as u64
            }
        }
    };
    let mut total = 0u64;
    for slot in &net.slots {
        let weights = nnz(slot.weight_offset..slot.weight_offset + slot.weight_len);
        match net.layers[slot.layer] {
            LayerSpec::Affine { n_out, .. } => {
                total += 2 * weights + n_out as u64;
            }
            LayerSpec::Conv2D { c_out, .. } => {
                let TensorShape::Image { h, w, .. } = net.shapes[slot.layer] else {
                    unreachable!("conv output is an image")
                };
                let positions = (h * w) as u64;
                total += 2 * weights * positions + c_out as u64 * positions;
            }
            LayerSpec::Relu => unreachable!("slot on non-parametric layer"),
        }
    }
    total
}
