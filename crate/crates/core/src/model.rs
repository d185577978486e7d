//! Declarative network construction and parameter/memory accounting.
//!
//! A config describes a stack of stages (spatial conv + pool + norm +
//! activation) and a dense head. Three weight modes share the topology:
//! frozen dual-branch ternary blocks with trainable fusion, a float
//! baseline with trainable convolutions, and a frozen random-binary
//! baseline. The accounting mirrors the mixed-precision storage model:
//! trainable floats at 32 bits, ternary weights at 2 bits, binary weights
//! at 1 bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conv::ConvGeometry;
use crate::error::{Result, StepError};
use crate::nn::{BatchNorm, Fusion, LayerNode, ModelGraph};
use crate::pattern::{BankShape, FilterBank, KernelFamily};
use crate::rng::PatternRng;
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Add,
    Conv1x1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Step,
    FloatBaseline,
    RandomBinary,
}

fn default_stride() -> usize {
    1
}

/// One backbone stage: spatial convolution at `kernel`x`kernel` producing
/// `filters` channels, optional average pooling, batch norm, activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub filters: usize,
    pub kernel: usize,
    pub fusion: FusionKind,
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// Average-pool window (and stride); 0 disables pooling.
    #[serde(default)]
    pub pool: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub name: String,
    /// (channels, height, width)
    pub input_shape: (usize, usize, usize),
    pub num_classes: usize,
    pub weight_mode: WeightMode,
    pub seed: u64,
    /// Hidden dense width; 0 means logits directly after flatten.
    #[serde(default)]
    pub head_width: usize,
    pub stages: Vec<StageConfig>,
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(StepError::Config("config needs at least one stage".into()));
        }
        if self.num_classes < 2 {
            return Err(StepError::Config("num_classes must be at least 2".into()));
        }
        let (c, h, w) = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(StepError::Config("input shape has a zero dimension".into()));
        }
        let mut prev = 0;
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.filters < prev {
                return Err(StepError::Config(format!(
                    "stage {i}: filter count {} decreases from {prev}",
                    stage.filters
                )));
            }
            if stage.filters == 0 || stage.kernel == 0 || stage.stride == 0 {
                return Err(StepError::Config(format!("stage {i}: zero-valued field")));
            }
            prev = stage.filters;
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ArchConfig =
            toml::from_str(text).map_err(|e| StepError::Config(format!("toml: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: ArchConfig =
            serde_json::from_str(text).map_err(|e| StepError::Config(format!("json: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse a config file, dispatching on extension (.toml or .json).
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json_str(&text),
            _ => Self::from_toml_str(&text),
        }
    }

    /// The same architecture with trainable float convolutions in place of
    /// frozen banks: the baseline the reduction numbers are quoted against.
    pub fn float_twin(&self) -> Self {
        let mut twin = self.clone();
        twin.name = format!("{}-float", self.name);
        twin.weight_mode = WeightMode::FloatBaseline;
        twin
    }

    /// Desk-scale classification network used by the training acceptance
    /// run: three dual-branch stages with 1x1 fusion, then a linear head.
    pub fn desk() -> Self {
        ArchConfig {
            name: "step-desk".into(),
            input_shape: (3, 32, 32),
            num_classes: 10,
            weight_mode: WeightMode::Step,
            seed: 0xC1FA_2024,
            head_width: 0,
            stages: vec![
                StageConfig { filters: 32, kernel: 3, fusion: FusionKind::Conv1x1, stride: 1, pool: 2 },
                StageConfig { filters: 64, kernel: 3, fusion: FusionKind::Conv1x1, stride: 1, pool: 2 },
                StageConfig { filters: 128, kernel: 3, fusion: FusionKind::Conv1x1, stride: 1, pool: 2 },
            ],
        }
    }
}

/// He-uniform initialization bound for a fan-in.
fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

fn init_tensor<F: Scalar>(shape: Shape4, fan_in: usize, rng: &mut PatternRng) -> Tensor4<F> {
    let bound = he_bound(fan_in);
    Tensor4::from_fn(shape, |_| F::from_f64_c(rng.symmetric_f64(bound)))
}

/// Construct the model a config describes. Bank seeds derive from the
/// config seed, the stage index and the branch, so every bank has its own
/// stream and the whole model is reproducible from the config alone.
pub fn build_model<F: Scalar>(cfg: &ArchConfig) -> Result<ModelGraph<F>> {
    cfg.validate()?;
    let mut layers: Vec<LayerNode<F>> = Vec::new();
    let mut init_rng = PatternRng::new(PatternRng::derive(cfg.seed, &[0xF10A7]));
    let (mut channels, mut height, mut width) = cfg.input_shape;
    for (i, stage) in cfg.stages.iter().enumerate() {
        let geom = ConvGeometry::new(stage.stride, stage.kernel / 2);
        let bank_shape = BankShape::new(stage.kernel, stage.kernel, channels, stage.filters);
        let bank_seed = |branch: u64| PatternRng::derive(cfg.seed, &[i as u64 + 1, branch]);
        match cfg.weight_mode {
            WeightMode::Step => {
                let cslbp = FilterBank::generate(bank_shape, KernelFamily::CsLbp, bank_seed(0))?;
                let haar = FilterBank::generate(bank_shape, KernelFamily::Haar, bank_seed(1))?;
                let fusion = match stage.fusion {
                    FusionKind::Add => Fusion::Add,
                    FusionKind::Conv1x1 => Fusion::Conv1x1 {
                        weights: init_tensor(
                            Shape4::new(stage.filters, 2 * stage.filters, 1, 1),
                            2 * stage.filters,
                            &mut init_rng,
                        ),
                        clamp: true,
                    },
                };
                layers.push(LayerNode::StepBlock { cslbp, haar, fusion, geom });
            }
            WeightMode::FloatBaseline => {
                let fan_in = channels * stage.kernel * stage.kernel;
                layers.push(LayerNode::Conv2d {
                    weights: init_tensor(
                        Shape4::new(stage.filters, channels, stage.kernel, stage.kernel),
                        fan_in,
                        &mut init_rng,
                    ),
                    geom,
                });
            }
            WeightMode::RandomBinary => {
                let bank = FilterBank::generate(bank_shape, KernelFamily::RandomBinary, bank_seed(2))?;
                layers.push(LayerNode::TernaryConv { bank, geom });
            }
        }
        height = geom.out_dim(height, stage.kernel)?;
        width = geom.out_dim(width, stage.kernel)?;
        if stage.pool > 0 {
            if height < stage.pool || width < stage.pool {
                return Err(StepError::Config(format!(
                    "stage {i}: pool {p} exceeds the {height}x{width} feature map",
                    p = stage.pool
                )));
            }
            layers.push(LayerNode::AvgPool { size: stage.pool, stride: stage.pool });
            height = (height - stage.pool) / stage.pool + 1;
            width = (width - stage.pool) / stage.pool + 1;
        }
        layers.push(LayerNode::BatchNorm(BatchNorm::new(stage.filters)));
        layers.push(LayerNode::LeakyRelu { slope: F::from_f64_c(0.01) });
        channels = stage.filters;
    }
    layers.push(LayerNode::Flatten);
    let mut dim = channels * height * width;
    if cfg.head_width > 0 {
        layers.push(dense_layer(dim, cfg.head_width, Some(&mut init_rng)));
        layers.push(LayerNode::LeakyRelu { slope: F::from_f64_c(0.01) });
        dim = cfg.head_width;
    }
    // The classifier starts at zero so initial logits are uniform and the
    // first-epoch loss sits at ln(num_classes).
    layers.push(dense_layer(dim, cfg.num_classes, None));
    ModelGraph::new(layers, cfg.input_shape, cfg.num_classes)
}

fn dense_layer<F: Scalar>(
    in_dim: usize,
    out_dim: usize,
    rng: Option<&mut PatternRng>,
) -> LayerNode<F> {
    let weights = match rng {
        Some(rng) => {
            let bound = he_bound(in_dim);
            (0..in_dim * out_dim).map(|_| F::from_f64_c(rng.symmetric_f64(bound))).collect()
        }
        None => vec![F::zero(); in_dim * out_dim],
    };
    LayerNode::Dense { weights, bias: vec![F::zero(); out_dim], in_dim, out_dim }
}

/// Exact parameter census by trainability. Batch-norm running statistics
/// belong to neither count.
pub fn count_params<F: Scalar>(model: &ModelGraph<F>) -> (u64, u64) {
    let trainable: u64 = model.trainable_param_ids().iter().map(|(_, len)| *len as u64).sum();
    let frozen: u64 = model
        .layers()
        .iter()
        .map(|l| {
            let (t, b) = l.frozen_counts();
            t + b
        })
        .sum();
    (trainable, frozen)
}

/// Parameter counts split by storage precision.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrecisionCounts {
    /// 32-bit float parameters (trainable).
    pub float32: u64,
    /// 2-bit ternary parameters (frozen {-1, 0, +1}).
    pub ternary: u64,
    /// 1-bit binary parameters (frozen {-1, +1}).
    pub binary: u64,
}

impl PrecisionCounts {
    pub fn for_model<F: Scalar>(model: &ModelGraph<F>) -> Self {
        let (trainable, _) = count_params(model);
        let mut counts = PrecisionCounts { float32: trainable, ternary: 0, binary: 0 };
        for layer in model.layers() {
            let (t, b) = layer.frozen_counts();
            counts.ternary += t;
            counts.binary += b;
        }
        counts
    }
}

/// Storage estimate under the mixed-precision map: exact integer bytes with
/// a final ceil per parameter group, reported in decimal megabytes.
pub fn estimate_memory(counts: PrecisionCounts) -> MemoryEstimate {
    let bytes = counts.float32 * 4 + (counts.ternary * 2).div_ceil(8) + counts.binary.div_ceil(8);
    MemoryEstimate { bytes }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub bytes: u64,
}

impl MemoryEstimate {
    /// Decimal megabytes (10^6 bytes).
    pub fn megabytes(&self) -> f64 {
        self.bytes as f64 / 1e6
    }
}

/// The roles of one table row: counts, storage and the reduction against a
/// named baseline when one applies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountingReport {
    pub name: String,
    pub trainable: u64,
    pub non_trainable: u64,
    pub memory_bytes: u64,
    pub memory_mb: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reduction_pct: Option<f64>,
}

impl AccountingReport {
    pub fn new(
        name: impl Into<String>,
        trainable: u64,
        non_trainable: u64,
        counts: PrecisionCounts,
    ) -> Self {
        let mem = estimate_memory(counts);
        Self {
            name: name.into(),
            trainable,
            non_trainable,
            memory_bytes: mem.bytes,
            memory_mb: mem.megabytes(),
            reduction_pct: None,
        }
    }

    pub fn for_model<F: Scalar>(name: impl Into<String>, model: &ModelGraph<F>) -> Self {
        let (trainable, non_trainable) = count_params(model);
        Self::new(name, trainable, non_trainable, PrecisionCounts::for_model(model))
    }
}

/// Memory reduction of `candidate` against `baseline`, in percent.
pub fn reduction_percent(candidate: &AccountingReport, baseline: &AccountingReport) -> Result<f64> {
    if baseline.memory_bytes == 0 {
        return Err(StepError::Config("baseline memory is zero".into()));
    }
    Ok(100.0 * (1.0 - candidate.memory_bytes as f64 / baseline.memory_bytes as f64))
}

/// Trainable-parameter reduction of `candidate` against `baseline`.
pub fn trainable_reduction_percent(
    candidate: &AccountingReport,
    baseline: &AccountingReport,
) -> Result<f64> {
    if baseline.trainable == 0 {
        return Err(StepError::Config("baseline has no trainable parameters".into()));
    }
    Ok(100.0 * (1.0 - candidate.trainable as f64 / baseline.trainable as f64))
}

/// Published parameter budget of the detection network, kept as a reference
/// record for the accounting arithmetic. Note: the 2-bit formula yields
/// 1.86 MB for these counts, which does not match the published 1.6 MB; the
/// source's detection memory convention is unresolved, so the memory field
/// is reported but never asserted against that value.
pub fn describe_step_det_budget() -> AccountingReport {
    let trainable = 232_492u64;
    let non_trainable = 3_738_560u64;
    AccountingReport::new(
        "step-det",
        trainable,
        non_trainable,
        PrecisionCounts { float32: trainable, ternary: non_trainable, binary: 0 },
    )
}

/// Aligned text table over accounting rows.
pub fn format_table(rows: &[AccountingReport]) -> String {
    let mut out = String::new();
    let name_w = rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
    out.push_str(&format!(
        "{:<name_w$}  {:>12}  {:>14}  {:>11}  {:>13}\n",
        "model", "trainable", "non-trainable", "memory (MB)", "reduction (%)"
    ));
    for r in rows {
        let reduction = r.reduction_pct.map(|p| format!("{p:.1}")).unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "{:<name_w$}  {:>12}  {:>14}  {:>11.1}  {:>13}\n",
            r.name, r.trainable, r.non_trainable, r.memory_mb, reduction
        ));
    }
    out
}
