//! Sequential model graph with minimal reverse-mode differentiation.
//!
//! Only parameters flagged trainable ever receive gradient buffers; frozen
//! ternary banks participate in the backward pass solely by propagating
//! input gradients.

pub mod layers;
pub mod loss;
pub mod optim;
pub mod train;

use std::collections::BTreeMap;

pub use layers::{BatchNorm, Fusion, LayerCache, LayerNode, ParamId, ParamSlot};
pub use loss::softmax_cross_entropy;
pub use optim::{lr_at_epoch, Optimizer, OptimizerKind, Schedule, TrainConfig};
pub use train::{evaluate, train_loop, EpochRecord, TrainLog};

use crate::error::{Result, StepError};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

/// Execution mode of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
    /// Eval with the hardware-friendly activation: negatives zeroed,
    /// positives rounded to the nearest integer (ties to even).
    EvalQuantized,
}

/// Gradient buffers keyed by trainable-parameter identity.
#[derive(Debug, Clone, Default)]
pub struct Gradients<F> {
    map: BTreeMap<ParamId, Vec<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, id: ParamId) -> Option<&[F]> {
        self.map.get(&id).map(|v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[F])> {
        self.map.iter().map(|(&id, v)| (id, v.as_slice()))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.map.keys().copied().collect()
    }

    /// Total number of scalar gradient entries.
    pub fn scalar_count(&self) -> usize {
        self.map.values().map(|v| v.len()).sum()
    }

    pub fn insert(&mut self, id: ParamId, grad: Vec<F>) {
        self.map.insert(id, grad);
    }
}

/// Forward cache: one entry per layer plus the logits shape, used to detect
/// a cache that does not belong to the model or batch being differentiated.
#[derive(Debug)]
pub struct Cache<F: Scalar> {
    entries: Vec<LayerCache<F>>,
    out_shape: Shape4,
}

/// Ordered layer stack with static shape checking.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph<F: Scalar> {
    layers: Vec<LayerNode<F>>,
    input_shape: (usize, usize, usize),
    num_classes: usize,
}

impl<F: Scalar> ModelGraph<F> {
    /// Build a graph, verifying that adjacent layer shapes compose and that
    /// the final output is (num_classes, 1, 1).
    pub fn new(
        layers: Vec<LayerNode<F>>,
        input_shape: (usize, usize, usize),
        num_classes: usize,
    ) -> Result<Self> {
        let model = Self { layers, input_shape, num_classes };
        let final_shape = model
            .shape_walk()?
            .last()
            .copied()
            .ok_or_else(|| StepError::Config("model needs at least one layer".into()))?;
        if final_shape != Shape4::new(1, num_classes, 1, 1) {
            return Err(StepError::ShapeMismatch(format!(
                "model output is {final_shape}, expected ({num_classes}, 1, 1) logits"
            )));
        }
        Ok(model)
    }

    pub fn layers(&self) -> &[LayerNode<F>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerNode<F>] {
        &mut self.layers
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Per-layer output shapes for a batch of one.
    pub fn shape_walk(&self) -> Result<Vec<Shape4>> {
        let (c, h, w) = self.input_shape;
        let mut shape = Shape4::new(1, c, h, w);
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer.out_shape(shape).map_err(|e| {
                StepError::ShapeMismatch(format!("layer {i} ({}): {e}", layer.kind_name()))
            })?;
            shapes.push(shape);
        }
        Ok(shapes)
    }

    fn check_input(&self, x: &Tensor4<F>) -> Result<()> {
        let (c, h, w) = self.input_shape;
        let s = x.shape();
        if (s.c, s.h, s.w) != (c, h, w) || s.n == 0 {
            return Err(StepError::ShapeMismatch(format!(
                "model expects (n, {c}, {h}, {w}) input, got {s}"
            )));
        }
        Ok(())
    }

    /// Forward pass. A cache is returned only in train mode.
    pub fn forward(&mut self, x: &Tensor4<F>, mode: Mode) -> Result<(Tensor4<F>, Option<Cache<F>>)> {
        self.check_input(x)?;
        match mode {
            Mode::Train => {
                let mut entries = Vec::with_capacity(self.layers.len());
                let mut current = x.clone();
                for (i, layer) in self.layers.iter_mut().enumerate() {
                    let kind = layer.kind_name();
                    let (y, cache) = layer
                        .forward_train(&current)
                        .map_err(|e| StepError::ShapeMismatch(format!("layer {i} ({kind}): {e}")))?;
                    entries.push(cache);
                    current = y;
                }
                let out_shape = current.shape();
                Ok((current, Some(Cache { entries, out_shape })))
            }
            Mode::Eval | Mode::EvalQuantized => {
                Ok((self.infer(x, mode == Mode::EvalQuantized)?, None))
            }
        }
    }

    /// Evaluation-mode forward without mutation (running statistics are
    /// read, never updated).
    pub fn infer(&self, x: &Tensor4<F>, quantized: bool) -> Result<Tensor4<F>> {
        self.check_input(x)?;
        let mut current = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            current = layer.forward_eval(&current, quantized).map_err(|e| {
                StepError::ShapeMismatch(format!("layer {i} ({}): {e}", layer.kind_name()))
            })?;
        }
        Ok(current)
    }

    /// Reverse pass from the logit gradient. `weight_decay` adds `lambda*w`
    /// to the gradient of every decayed parameter (conv/dense weights).
    pub fn backward(
        &self,
        cache: &Cache<F>,
        d_logits: &Tensor4<F>,
        weight_decay: F,
    ) -> Result<Gradients<F>> {
        if cache.entries.len() != self.layers.len() {
            return Err(StepError::ShapeMismatch(
                "stale cache: layer count differs from model".into(),
            ));
        }
        if d_logits.shape() != cache.out_shape {
            return Err(StepError::ShapeMismatch(format!(
                "stale cache: logits gradient {} vs cached {}",
                d_logits.shape(),
                cache.out_shape
            )));
        }
        let mut grads = Gradients::default();
        let mut upstream = d_logits.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (dx, param_grads) = layer.backward(&cache.entries[i], &upstream).map_err(|e| {
                StepError::ShapeMismatch(format!("layer {i} ({}): {e}", layer.kind_name()))
            })?;
            for (slot, mut grad) in param_grads {
                if weight_decay != F::zero() && slot.decayed() {
                    let w = layer.param(slot).expect("slot with gradient has a parameter");
                    for (g, &wv) in grad.iter_mut().zip(w) {
                        *g += weight_decay * wv;
                    }
                }
                grads.insert(ParamId { layer: i, slot }, grad);
            }
            upstream = dx;
        }
        Ok(grads)
    }

    /// Every trainable parameter with its length, in layer order.
    pub fn trainable_param_ids(&self) -> Vec<(ParamId, usize)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, layer)| {
                layer
                    .param_slots()
                    .into_iter()
                    .map(move |(slot, len)| (ParamId { layer: i, slot }, len))
            })
            .collect()
    }

    pub fn param(&self, id: ParamId) -> Option<&[F]> {
        self.layers.get(id.layer).and_then(|l| l.param(id.slot))
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut [F]> {
        self.layers.get_mut(id.layer).and_then(|l| l.param_mut(id.slot))
    }

    /// Post-step constraints: fusion convolutions flagged with `clamp` are
    /// pinned to [-1, 1].
    pub fn apply_constraints(&mut self) {
        for layer in &mut self.layers {
            if let LayerNode::StepBlock { fusion: Fusion::Conv1x1 { weights, clamp: true }, .. } =
                layer
            {
                for w in weights.data_mut() {
                    *w = w.min(F::one()).max(-F::one());
                }
            }
        }
    }
}
