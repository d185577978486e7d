//! Layer kinds and their forward/backward rules.
//!
//! Ternary banks are frozen by construction: they have no parameter slots,
//! so no gradient buffer can ever be allocated for them. They still
//! propagate input gradients through the multiplier-free adjoint.

use serde::{Deserialize, Serialize};

use crate::conv::{
    conv2d_input_grad, conv2d_input_grad_ref, conv2d_reference, conv2d_ternary, conv2d_weight_grad,
    ConvGeometry,
};
use crate::error::{Result, StepError};
use crate::pattern::FilterBank;
use crate::scalar::{round_ties_even, Scalar};
use crate::tensor::{Shape4, Tensor4};

/// How a STeP block's two branch outputs are merged.
#[derive(Debug, Clone, PartialEq)]
pub enum Fusion<F: Scalar> {
    /// Elementwise sum of the two branch outputs.
    Add,
    /// Channel concatenation followed by a trainable 1x1 convolution
    /// (2f -> f). When `clamp` is set the weights are pinned to [-1, 1]
    /// after every optimizer step.
    Conv1x1 { weights: Tensor4<F>, clamp: bool },
}

/// Batch normalization state. Running statistics are not parameters: they
/// are excluded from both trainable and non-trainable counts.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<F: Scalar> {
    pub gamma: Vec<F>,
    pub beta: Vec<F>,
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
    pub eps: F,
    pub momentum: F,
}

impl<F: Scalar> BatchNorm<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![F::one(); channels],
            beta: vec![F::zero(); channels],
            running_mean: vec![F::zero(); channels],
            running_var: vec![F::one(); channels],
            eps: F::from_f64_c(1e-5),
            momentum: F::from_f64_c(0.1),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerNode<F: Scalar> {
    /// Frozen ternary convolution (single bank).
    TernaryConv { bank: FilterBank, geom: ConvGeometry },
    /// Trainable float convolution, bias-free (normalization follows).
    Conv2d { weights: Tensor4<F>, geom: ConvGeometry },
    /// Two frozen ternary branches (CS-LBP and Haar) with fusion.
    StepBlock { cslbp: FilterBank, haar: FilterBank, fusion: Fusion<F>, geom: ConvGeometry },
    BatchNorm(BatchNorm<F>),
    LeakyRelu { slope: F },
    AvgPool { size: usize, stride: usize },
    Dense { weights: Vec<F>, bias: Vec<F>, in_dim: usize, out_dim: usize },
    Flatten,
}

/// Identifies one trainable tensor within a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamSlot {
    ConvWeight,
    FusionWeight,
    Gamma,
    Beta,
    DenseWeight,
    DenseBias,
}

impl ParamSlot {
    /// Weight decay applies to conv/dense weights only, never to biases or
    /// normalization parameters.
    pub fn decayed(self) -> bool {
        matches!(self, ParamSlot::ConvWeight | ParamSlot::FusionWeight | ParamSlot::DenseWeight)
    }
}

/// Identity of one trainable tensor within a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId {
    pub layer: usize,
    pub slot: ParamSlot,
}

impl std::fmt::Display for ParamId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "layer{}:{:?}", self.layer, self.slot)
    }
}

/// Per-layer state kept by a training-mode forward pass.
#[derive(Debug, Clone)]
pub enum LayerCache<F: Scalar> {
    TernaryConv { in_shape: Shape4 },
    Conv2d { input: Tensor4<F> },
    StepBlock { in_shape: Shape4, concat: Option<Tensor4<F>> },
    BatchNorm { xhat: Tensor4<F>, inv_std: Vec<F> },
    LeakyRelu { input: Tensor4<F> },
    AvgPool { in_shape: Shape4 },
    Dense { input: Tensor4<F> },
    Flatten { in_shape: Shape4 },
}

fn geometry_1x1() -> ConvGeometry {
    ConvGeometry::new(1, 0)
}

impl<F: Scalar> LayerNode<F> {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerNode::TernaryConv { .. } => "ternary_conv",
            LayerNode::Conv2d { .. } => "conv2d",
            LayerNode::StepBlock { .. } => "step_block",
            LayerNode::BatchNorm(_) => "batch_norm",
            LayerNode::LeakyRelu { .. } => "leaky_relu",
            LayerNode::AvgPool { .. } => "avg_pool",
            LayerNode::Dense { .. } => "dense",
            LayerNode::Flatten => "flatten",
        }
    }

    /// Static shape propagation; also validates layer-local invariants.
    pub fn out_shape(&self, input: Shape4) -> Result<Shape4> {
        match self {
            LayerNode::TernaryConv { bank, geom } => {
                let s = bank.shape();
                if input.c != s.in_channels {
                    return Err(StepError::ShapeMismatch(format!(
                        "bank expects {} channels, input has {}",
                        s.in_channels, input.c
                    )));
                }
                geom.out_shape(input, s.filters, s.h, s.w)
            }
            LayerNode::Conv2d { weights, geom } => {
                let ws = weights.shape();
                if input.c != ws.c {
                    return Err(StepError::ShapeMismatch(format!(
                        "conv expects {} channels, input has {}",
                        ws.c, input.c
                    )));
                }
                geom.out_shape(input, ws.n, ws.h, ws.w)
            }
            LayerNode::StepBlock { cslbp, haar, fusion, geom } => {
                if cslbp.shape() != haar.shape() {
                    return Err(StepError::ShapeMismatch(
                        "step block branches must share one bank shape".into(),
                    ));
                }
                let s = cslbp.shape();
                if input.c != s.in_channels {
                    return Err(StepError::ShapeMismatch(format!(
                        "step block expects {} channels, input has {}",
                        s.in_channels, input.c
                    )));
                }
                let branch = geom.out_shape(input, s.filters, s.h, s.w)?;
                if let Fusion::Conv1x1 { weights, .. } = fusion {
                    let ws = weights.shape();
                    if ws.c != 2 * s.filters || ws.n != s.filters || ws.h != 1 || ws.w != 1 {
                        return Err(StepError::ShapeMismatch(format!(
                            "fusion conv must be ({f}, {two_f}, 1, 1), got {got}",
                            f = s.filters,
                            two_f = 2 * s.filters,
                            got = ws
                        )));
                    }
                }
                Ok(branch)
            }
            LayerNode::BatchNorm(bn) => {
                if bn.channels() != input.c {
                    return Err(StepError::ShapeMismatch(format!(
                        "batch norm over {} channels, input has {}",
                        bn.channels(),
                        input.c
                    )));
                }
                Ok(input)
            }
            LayerNode::LeakyRelu { slope } => {
                let s = slope.as_f64();
                if !(0.0..1.0).contains(&s) || s == 0.0 {
                    return Err(StepError::Config(format!("leaky relu slope {s} outside (0, 1)")));
                }
                Ok(input)
            }
            LayerNode::AvgPool { size, stride } => {
                if *size == 0 || *stride == 0 {
                    return Err(StepError::Config("pool size and stride must be positive".into()));
                }
                if input.h < *size || input.w < *size {
                    return Err(StepError::ShapeMismatch(format!(
                        "pool window {size} exceeds input {}x{}",
                        input.h, input.w
                    )));
                }
                Ok(Shape4::new(
                    input.n,
                    input.c,
                    (input.h - size) / stride + 1,
                    (input.w - size) / stride + 1,
                ))
            }
            LayerNode::Dense { in_dim, out_dim, weights, bias } => {
                if weights.len() != in_dim * out_dim || bias.len() != *out_dim {
                    return Err(StepError::ShapeMismatch("dense parameter sizes disagree".into()));
                }
                if input.h != 1 || input.w != 1 || input.c != *in_dim {
                    return Err(StepError::ShapeMismatch(format!(
                        "dense expects flattened ({in_dim}, 1, 1) input, got {input}"
                    )));
                }
                Ok(Shape4::new(input.n, *out_dim, 1, 1))
            }
            LayerNode::Flatten => Ok(Shape4::new(input.n, input.c * input.h * input.w, 1, 1)),
        }
    }

    /// Forward in training mode, returning the cache backward needs.
    pub fn forward_train(&mut self, x: &Tensor4<F>) -> Result<(Tensor4<F>, LayerCache<F>)> {
        match self {
            LayerNode::TernaryConv { bank, geom } => {
                let y = conv2d_ternary(x, bank, *geom)?;
                Ok((y, LayerCache::TernaryConv { in_shape: x.shape() }))
            }
            LayerNode::Conv2d { weights, geom } => {
                let y = conv2d_reference(x, weights, *geom)?;
                Ok((y, LayerCache::Conv2d { input: x.clone() }))
            }
            LayerNode::StepBlock { cslbp, haar, fusion, geom } => {
                let y_cs = conv2d_ternary(x, cslbp, *geom)?;
                let y_haar = conv2d_ternary(x, haar, *geom)?;
                match fusion {
                    Fusion::Add => {
                        let y = y_cs.add(&y_haar)?;
                        Ok((y, LayerCache::StepBlock { in_shape: x.shape(), concat: None }))
                    }
                    Fusion::Conv1x1 { weights, .. } => {
                        let concat = y_cs.concat_channels(&y_haar)?;
                        let y = conv2d_reference(&concat, weights, geometry_1x1())?;
                        Ok((y, LayerCache::StepBlock { in_shape: x.shape(), concat: Some(concat) }))
                    }
                }
            }
            LayerNode::BatchNorm(bn) => {
                let (y, xhat, inv_std) = batch_norm_train(bn, x)?;
                Ok((y, LayerCache::BatchNorm { xhat, inv_std }))
            }
            LayerNode::LeakyRelu { slope } => {
                let y = leaky_relu(x, *slope, false);
                Ok((y, LayerCache::LeakyRelu { input: x.clone() }))
            }
            LayerNode::AvgPool { size, stride } => {
                let y = avg_pool(x, *size, *stride)?;
                Ok((y, LayerCache::AvgPool { in_shape: x.shape() }))
            }
            LayerNode::Dense { weights, bias, in_dim, out_dim } => {
                let y = dense_forward(x, weights, bias, *in_dim, *out_dim)?;
                Ok((y, LayerCache::Dense { input: x.clone() }))
            }
            LayerNode::Flatten => {
                let in_shape = x.shape();
                let y = x
                    .clone()
                    .reshaped(Shape4::new(in_shape.n, in_shape.c * in_shape.h * in_shape.w, 1, 1))?;
                Ok((y, LayerCache::Flatten { in_shape }))
            }
        }
    }

    /// Forward in evaluation mode. `quantized` selects the test-time
    /// activation: negatives zeroed, positives rounded half-to-even.
    pub fn forward_eval(&self, x: &Tensor4<F>, quantized: bool) -> Result<Tensor4<F>> {
        match self {
            LayerNode::TernaryConv { bank, geom } => conv2d_ternary(x, bank, *geom),
            LayerNode::Conv2d { weights, geom } => conv2d_reference(x, weights, *geom),
            LayerNode::StepBlock { cslbp, haar, fusion, geom } => {
                let y_cs = conv2d_ternary(x, cslbp, *geom)?;
                let y_haar = conv2d_ternary(x, haar, *geom)?;
                match fusion {
                    Fusion::Add => y_cs.add(&y_haar),
                    Fusion::Conv1x1 { weights, .. } => {
                        let concat = y_cs.concat_channels(&y_haar)?;
                        conv2d_reference(&concat, weights, geometry_1x1())
                    }
                }
            }
            LayerNode::BatchNorm(bn) => batch_norm_eval(bn, x),
            LayerNode::LeakyRelu { slope } => Ok(leaky_relu(x, *slope, quantized)),
            LayerNode::AvgPool { size, stride } => avg_pool(x, *size, *stride),
            LayerNode::Dense { weights, bias, in_dim, out_dim } => {
                dense_forward(x, weights, bias, *in_dim, *out_dim)
            }
            LayerNode::Flatten => {
                let s = x.shape();
                x.clone().reshaped(Shape4::new(s.n, s.c * s.h * s.w, 1, 1))
            }
        }
    }

    /// Backward: input gradient plus this layer's parameter gradients.
    pub fn backward(
        &self,
        cache: &LayerCache<F>,
        dy: &Tensor4<F>,
    ) -> Result<(Tensor4<F>, Vec<(ParamSlot, Vec<F>)>)> {
        match (self, cache) {
            (LayerNode::TernaryConv { bank, geom }, LayerCache::TernaryConv { in_shape }) => {
                let dx = conv2d_input_grad(dy, bank, *geom, *in_shape)?;
                Ok((dx, vec![]))
            }
            (LayerNode::Conv2d { weights, geom }, LayerCache::Conv2d { input }) => {
                let dw = conv2d_weight_grad(input, dy, *geom, weights.shape())?;
                let dx = conv2d_input_grad_ref(dy, weights, *geom, input.shape())?;
                Ok((dx, vec![(ParamSlot::ConvWeight, dw.into_data())]))
            }
            (
                LayerNode::StepBlock { cslbp, haar, fusion, geom },
                LayerCache::StepBlock { in_shape, concat },
            ) => match fusion {
                Fusion::Add => {
                    let dx_cs = conv2d_input_grad(dy, cslbp, *geom, *in_shape)?;
                    let dx_haar = conv2d_input_grad(dy, haar, *geom, *in_shape)?;
                    Ok((dx_cs.add(&dx_haar)?, vec![]))
                }
                Fusion::Conv1x1 { weights, .. } => {
                    let concat = concat
                        .as_ref()
                        .ok_or_else(|| StepError::ShapeMismatch("stale cache: fusion input missing".into()))?;
                    let dw = conv2d_weight_grad(concat, dy, geometry_1x1(), weights.shape())?;
                    let dconcat = conv2d_input_grad_ref(dy, weights, geometry_1x1(), concat.shape())?;
                    let (g_cs, g_haar) = dconcat.split_channels()?;
                    let dx_cs = conv2d_input_grad(&g_cs, cslbp, *geom, *in_shape)?;
                    let dx_haar = conv2d_input_grad(&g_haar, haar, *geom, *in_shape)?;
                    Ok((dx_cs.add(&dx_haar)?, vec![(ParamSlot::FusionWeight, dw.into_data())]))
                }
            },
            (LayerNode::BatchNorm(bn), LayerCache::BatchNorm { xhat, inv_std }) => {
                let (dx, dgamma, dbeta) = batch_norm_backward(bn, xhat, inv_std, dy)?;
                Ok((dx, vec![(ParamSlot::Gamma, dgamma), (ParamSlot::Beta, dbeta)]))
            }
            (LayerNode::LeakyRelu { slope }, LayerCache::LeakyRelu { input }) => {
                let data = input
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&x, &g)| if x > F::zero() { g } else { g * *slope })
                    .collect();
                Ok((Tensor4::from_vec(input.shape(), data)?, vec![]))
            }
            (LayerNode::AvgPool { size, stride }, LayerCache::AvgPool { in_shape }) => {
                let dx = avg_pool_backward(dy, *size, *stride, *in_shape)?;
                Ok((dx, vec![]))
            }
            (LayerNode::Dense { weights, in_dim, out_dim, .. }, LayerCache::Dense { input }) => {
                let (dx, dw, db) = dense_backward(input, weights, *in_dim, *out_dim, dy)?;
                Ok((dx, vec![(ParamSlot::DenseWeight, dw), (ParamSlot::DenseBias, db)]))
            }
            (LayerNode::Flatten, LayerCache::Flatten { in_shape }) => {
                Ok((dy.clone().reshaped(*in_shape)?, vec![]))
            }
            _ => Err(StepError::ShapeMismatch("stale cache: entry does not match layer".into())),
        }
    }

    /// Trainable parameter slots of this layer, with their lengths.
    pub fn param_slots(&self) -> Vec<(ParamSlot, usize)> {
        match self {
            LayerNode::Conv2d { weights, .. } => vec![(ParamSlot::ConvWeight, weights.data().len())],
            LayerNode::StepBlock { fusion: Fusion::Conv1x1 { weights, .. }, .. } => {
                vec![(ParamSlot::FusionWeight, weights.data().len())]
            }
            LayerNode::BatchNorm(bn) => vec![
                (ParamSlot::Gamma, bn.gamma.len()),
                (ParamSlot::Beta, bn.beta.len()),
            ],
            LayerNode::Dense { weights, bias, .. } => vec![
                (ParamSlot::DenseWeight, weights.len()),
                (ParamSlot::DenseBias, bias.len()),
            ],
            _ => vec![],
        }
    }

    pub fn param(&self, slot: ParamSlot) -> Option<&[F]> {
        match (self, slot) {
            (LayerNode::Conv2d { weights, .. }, ParamSlot::ConvWeight) => Some(weights.data()),
            (LayerNode::StepBlock { fusion: Fusion::Conv1x1 { weights, .. }, .. }, ParamSlot::FusionWeight) => {
                Some(weights.data())
            }
            (LayerNode::BatchNorm(bn), ParamSlot::Gamma) => Some(&bn.gamma),
            (LayerNode::BatchNorm(bn), ParamSlot::Beta) => Some(&bn.beta),
            (LayerNode::Dense { weights, .. }, ParamSlot::DenseWeight) => Some(weights),
            (LayerNode::Dense { bias, .. }, ParamSlot::DenseBias) => Some(bias),
            _ => None,
        }
    }

    pub fn param_mut(&mut self, slot: ParamSlot) -> Option<&mut [F]> {
        match (self, slot) {
            (LayerNode::Conv2d { weights, .. }, ParamSlot::ConvWeight) => Some(weights.data_mut()),
            (LayerNode::StepBlock { fusion: Fusion::Conv1x1 { weights, .. }, .. }, ParamSlot::FusionWeight) => {
                Some(weights.data_mut())
            }
            (LayerNode::BatchNorm(bn), ParamSlot::Gamma) => Some(&mut bn.gamma),
            (LayerNode::BatchNorm(bn), ParamSlot::Beta) => Some(&mut bn.beta),
            (LayerNode::Dense { weights, .. }, ParamSlot::DenseWeight) => Some(weights),
            (LayerNode::Dense { bias, .. }, ParamSlot::DenseBias) => Some(bias),
            _ => None,
        }
    }

    /// Count of frozen (non-trainable) weights, split by storage class:
    /// (ternary 2-bit, binary 1-bit).
    pub fn frozen_counts(&self) -> (u64, u64) {
        let classify = |bank: &FilterBank| -> (u64, u64) {
            let n = bank.shape().element_count() as u64;
            match bank.family() {
                crate::pattern::KernelFamily::RandomBinary => (0, n),
                _ => (n, 0),
            }
        };
        match self {
            LayerNode::TernaryConv { bank, .. } => classify(bank),
            LayerNode::StepBlock { cslbp, haar, .. } => {
                let a = classify(cslbp);
                let b = classify(haar);
                (a.0 + b.0, a.1 + b.1)
            }
            _ => (0, 0),
        }
    }
}

/// Train-mode LeakyReLU is `max(x, slope*x)`; the quantized eval variant
/// zeroes negatives and rounds positives half-to-even.
pub fn leaky_relu<F: Scalar>(x: &Tensor4<F>, slope: F, quantized: bool) -> Tensor4<F> {
    if quantized {
        x.map(|v| if v <= F::zero() { F::zero() } else { round_ties_even(v) })
    } else {
        x.map(|v| if v > F::zero() { v } else { v * slope })
    }
}

fn batch_norm_train<F: Scalar>(
    bn: &mut BatchNorm<F>,
    x: &Tensor4<F>,
) -> Result<(Tensor4<F>, Tensor4<F>, Vec<F>)> {
    let s = x.shape();
    if s.n == 0 {
        return Err(StepError::InvalidShape("batch norm needs a non-empty batch in train mode".into()));
    }
    let m = (s.n * s.h * s.w) as f64;
    let plane = s.h * s.w;
    let sample = s.c * plane;
    let mut y = Tensor4::zeros(s);
    let mut xhat = Tensor4::zeros(s);
    let mut inv_stds = vec![F::zero(); s.c];
    for c in 0..s.c {
        let mut sum = F::zero();
        for n in 0..s.n {
            for &v in &x.data()[n * sample + c * plane..][..plane] {
                sum += v;
            }
        }
        let mean = sum / F::from_f64_c(m);
        let mut var_sum = F::zero();
        for n in 0..s.n {
            for &v in &x.data()[n * sample + c * plane..][..plane] {
                let d = v - mean;
                var_sum += d * d;
            }
        }
        let var = var_sum / F::from_f64_c(m);
        let inv_std = F::one() / (var + bn.eps).sqrt();
        inv_stds[c] = inv_std;
        let (gamma, beta) = (bn.gamma[c], bn.beta[c]);
        for n in 0..s.n {
            let src = &x.data()[n * sample + c * plane..][..plane];
            let xh = &mut xhat.data_mut()[n * sample + c * plane..][..plane];
            for (h, &v) in xh.iter_mut().zip(src) {
                *h = (v - mean) * inv_std;
            }
            let dst = &mut y.data_mut()[n * sample + c * plane..][..plane];
            for (d, &h) in dst.iter_mut().zip(&x.data()[n * sample + c * plane..][..plane]) {
                *d = gamma * (h - mean) * inv_std + beta;
            }
        }
        // Running stats use the unbiased variance, matching the usual
        // framework convention; they are provenance, not parameters.
        let var_running = if m > 1.0 { var * F::from_f64_c(m / (m - 1.0)) } else { var };
        let keep = F::one() - bn.momentum;
        bn.running_mean[c] = keep * bn.running_mean[c] + bn.momentum * mean;
        bn.running_var[c] = keep * bn.running_var[c] + bn.momentum * var_running;
    }
    Ok((y, xhat, inv_stds))
}

fn batch_norm_eval<F: Scalar>(bn: &BatchNorm<F>, x: &Tensor4<F>) -> Result<Tensor4<F>> {
    let s = x.shape();
    let mut y = Tensor4::zeros(s);
    let plane = s.h * s.w;
    let sample = s.c * plane;
    for c in 0..s.c {
        let inv_std = F::one() / (bn.running_var[c] + bn.eps).sqrt();
        let mean = bn.running_mean[c];
        let (gamma, beta) = (bn.gamma[c], bn.beta[c]);
        for n in 0..s.n {
            let src = &x.data()[n * sample + c * plane..][..plane];
            let dst = &mut y.data_mut()[n * sample + c * plane..][..plane];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = gamma * (v - mean) * inv_std + beta;
            }
        }
    }
    Ok(y)
}

fn batch_norm_backward<F: Scalar>(
    bn: &BatchNorm<F>,
    xhat: &Tensor4<F>,
    inv_std: &[F],
    dy: &Tensor4<F>,
) -> Result<(Tensor4<F>, Vec<F>, Vec<F>)> {
    let s = xhat.shape();
    if dy.shape() != s {
        return Err(StepError::ShapeMismatch("batch norm gradient shape".into()));
    }
    let m = F::from_f64_c((s.n * s.h * s.w) as f64);
    let plane = s.h * s.w;
    let sample = s.c * plane;
    let mut dx = Tensor4::zeros(s);
    let mut dgamma = vec![F::zero(); s.c];
    let mut dbeta = vec![F::zero(); s.c];
    for c in 0..s.c {
        let mut sum_dy = F::zero();
        let mut sum_dy_xhat = F::zero();
        for n in 0..s.n {
            let g_plane = &dy.data()[n * sample + c * plane..][..plane];
            let h_plane = &xhat.data()[n * sample + c * plane..][..plane];
            for (&g, &h) in g_plane.iter().zip(h_plane) {
                sum_dy += g;
                sum_dy_xhat += g * h;
            }
        }
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
        let scale = bn.gamma[c] * inv_std[c];
        let mean_dy = sum_dy / m;
        let mean_dy_xhat = sum_dy_xhat / m;
        for n in 0..s.n {
            let g_plane = &dy.data()[n * sample + c * plane..][..plane];
            let h_plane = &xhat.data()[n * sample + c * plane..][..plane];
            let d_plane = &mut dx.data_mut()[n * sample + c * plane..][..plane];
            for ((d, &g), &h) in d_plane.iter_mut().zip(g_plane).zip(h_plane) {
                *d = scale * (g - mean_dy - h * mean_dy_xhat);
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

fn avg_pool<F: Scalar>(x: &Tensor4<F>, size: usize, stride: usize) -> Result<Tensor4<F>> {
    let s = x.shape();
    if s.h < size || s.w < size {
        return Err(StepError::ShapeMismatch(format!("pool window {size} exceeds input {s}")));
    }
    let oh = (s.h - size) / stride + 1;
    let ow = (s.w - size) / stride + 1;
    let norm = F::one() / F::from_f64_c((size * size) as f64);
    let mut y = Tensor4::zeros(Shape4::new(s.n, s.c, oh, ow));
    let in_plane_len = s.h * s.w;
    let out_plane_len = oh * ow;
    for plane_idx in 0..s.n * s.c {
        let in_plane = &x.data()[plane_idx * in_plane_len..][..in_plane_len];
        let out_plane = &mut y.data_mut()[plane_idx * out_plane_len..][..out_plane_len];
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = F::zero();
                for di in 0..size {
                    let row = &in_plane[(i * stride + di) * s.w + j * stride..][..size];
                    for &v in row {
                        acc += v;
                    }
                }
                out_plane[i * ow + j] = acc * norm;
            }
        }
    }
    Ok(y)
}

fn avg_pool_backward<F: Scalar>(
    dy: &Tensor4<F>,
    size: usize,
    stride: usize,
    in_shape: Shape4,
) -> Result<Tensor4<F>> {
    let os = dy.shape();
    let norm = F::one() / F::from_f64_c((size * size) as f64);
    let mut dx = Tensor4::zeros(in_shape);
    let in_plane_len = in_shape.h * in_shape.w;
    let out_plane_len = os.h * os.w;
    for plane_idx in 0..os.n * os.c {
        let g_plane = &dy.data()[plane_idx * out_plane_len..][..out_plane_len];
        let dx_plane = &mut dx.data_mut()[plane_idx * in_plane_len..][..in_plane_len];
        for i in 0..os.h {
            for j in 0..os.w {
                let g = g_plane[i * os.w + j] * norm;
                for di in 0..size {
                    let row = &mut dx_plane[(i * stride + di) * in_shape.w + j * stride..][..size];
                    for d in row {
                        *d += g;
                    }
                }
            }
        }
    }
    Ok(dx)
}

fn dense_forward<F: Scalar>(
    x: &Tensor4<F>,
    weights: &[F],
    bias: &[F],
    in_dim: usize,
    out_dim: usize,
) -> Result<Tensor4<F>> {
    let s = x.shape();
    if s.c != in_dim || s.h != 1 || s.w != 1 {
        return Err(StepError::ShapeMismatch(format!(
            "dense expects ({in_dim}, 1, 1) input, got {s}"
        )));
    }
    let mut y = Tensor4::zeros(Shape4::new(s.n, out_dim, 1, 1));
    for n in 0..s.n {
        let x_row = &x.data()[n * in_dim..(n + 1) * in_dim];
        let y_row = &mut y.data_mut()[n * out_dim..(n + 1) * out_dim];
        for (o, out) in y_row.iter_mut().enumerate() {
            let w_row = &weights[o * in_dim..(o + 1) * in_dim];
            let mut acc = bias[o];
            for (xi, wi) in x_row.iter().zip(w_row) {
                acc += *xi * *wi;
            }
            *out = acc;
        }
    }
    Ok(y)
}

fn dense_backward<F: Scalar>(
    input: &Tensor4<F>,
    weights: &[F],
    in_dim: usize,
    out_dim: usize,
    dy: &Tensor4<F>,
) -> Result<(Tensor4<F>, Vec<F>, Vec<F>)> {
    let n_batch = input.shape().n;
    if dy.shape() != Shape4::new(n_batch, out_dim, 1, 1) {
        return Err(StepError::ShapeMismatch("dense gradient shape".into()));
    }
    let mut dw = vec![F::zero(); in_dim * out_dim];
    let mut db = vec![F::zero(); out_dim];
    let mut dx = Tensor4::zeros(input.shape());
    for n in 0..n_batch {
        let x_row = &input.data()[n * in_dim..(n + 1) * in_dim];
        let g_row = &dy.data()[n * out_dim..(n + 1) * out_dim];
        let dx_row = &mut dx.data_mut()[n * in_dim..(n + 1) * in_dim];
        for (o, &g) in g_row.iter().enumerate() {
            db[o] += g;
            let w_row = &weights[o * in_dim..(o + 1) * in_dim];
            let dw_row = &mut dw[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                dw_row[i] += g * x_row[i];
                dx_row[i] += g * w_row[i];
            }
        }
    }
    Ok((dx, dw, db))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaky_relu_train_examples() {
        let x = Tensor4::from_vec(Shape4::new(1, 4, 1, 1), vec![-2.0f32, -0.5, 0.0, 3.0]).unwrap();
        let y = leaky_relu(&x, 0.1, false);
        assert_eq!(y.data(), &[-0.2, -0.05, 0.0, 3.0]);
    }

    #[test]
    fn leaky_relu_quantized_examples() {
        let x =
            Tensor4::from_vec(Shape4::new(1, 5, 1, 1), vec![-2.0f32, 0.0, 2.4, 2.5, 3.5]).unwrap();
        let y = leaky_relu(&x, 0.1, true);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0, 2.0, 4.0]);
    }

    #[test]
    fn quantized_relu_close_to_relu_for_positives() {
        for i in 0..1000 {
            let v = i as f32 * 0.013 + 0.001;
            let x = Tensor4::from_vec(Shape4::new(1, 1, 1, 1), vec![v]).unwrap();
            let q = leaky_relu(&x, 0.01, true).data()[0];
            assert!((q - v).abs() <= 0.5, "v={v} q={q}");
        }
    }

    #[test]
    fn batch_norm_train_normalizes() {
        let mut bn = BatchNorm::<f64>::new(2);
        let x = Tensor4::from_fn(Shape4::new(4, 2, 3, 3), |i| (i as f64 * 0.37).sin() * 3.0 + 1.0);
        let (y, _, _) = batch_norm_train(&mut bn, &x).unwrap();
        let s = y.shape();
        let m = (s.n * s.h * s.w) as f64;
        for c in 0..2 {
            let mut mean = 0.0;
            let mut var = 0.0;
            for n in 0..s.n {
                for h in 0..s.h {
                    for w in 0..s.w {
                        mean += y.at(n, c, h, w);
                    }
                }
            }
            mean /= m;
            for n in 0..s.n {
                for h in 0..s.h {
                    for w in 0..s.w {
                        var += (y.at(n, c, h, w) - mean).powi(2);
                    }
                }
            }
            var /= m;
            assert!(mean.abs() < 1e-5, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "channel {c} var {var}");
        }
    }

    #[test]
    fn batch_norm_identity_when_already_normalized() {
        let mut bn = BatchNorm::<f64>::new(1);
        // Zero-mean unit-variance batch: (-1, 1) repeated.
        let x = Tensor4::from_fn(Shape4::new(4, 1, 1, 2), |i| if i % 2 == 0 { -1.0 } else { 1.0 });
        let (y, _, _) = batch_norm_train(&mut bn, &x).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn batch_norm_eval_matches_hand_computation() {
        let mut bn = BatchNorm::<f64>::new(1);
        bn.running_mean[0] = 0.5;
        bn.running_var[0] = 4.0;
        bn.gamma[0] = 2.0;
        bn.beta[0] = -1.0;
        let x = Tensor4::from_vec(Shape4::new(1, 1, 2, 2), vec![0.5, 2.5, -1.5, 4.5]).unwrap();
        let y = batch_norm_eval(&bn, &x).unwrap();
        for (i, &xv) in x.data().iter().enumerate() {
            let expected = (xv - 0.5) / (4.0f64 + 1e-5).sqrt() * 2.0 - 1.0;
            assert!((y.data()[i] - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn avg_pool_means_windows() {
        let x = Tensor4::from_vec(
            Shape4::new(1, 1, 2, 4),
            vec![1.0f32, 3.0, 5.0, 7.0, 2.0, 4.0, 6.0, 8.0],
        )
        .unwrap();
        let y = avg_pool(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 1, 1, 2));
        assert_eq!(y.data(), &[2.5, 6.5]);
    }

    #[test]
    fn avg_pool_backward_distributes_evenly() {
        let dy = Tensor4::from_vec(Shape4::new(1, 1, 1, 1), vec![4.0f32]).unwrap();
        let dx = avg_pool_backward(&dy, 2, 2, Shape4::new(1, 1, 2, 2)).unwrap();
        assert_eq!(dx.data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn dense_identity_passes_input_through() {
        let mut w = vec![0.0f32; 9];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let x = Tensor4::from_vec(Shape4::new(2, 3, 1, 1), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = dense_forward(&x, &w, &[0.0; 3], 3, 3).unwrap();
        assert_eq!(y.data(), x.data());
    }
}
