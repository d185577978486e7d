//! Model checkpoints, format "STPC" v1 (f32 models).
//!
//! Layout (integers and floats little-endian):
//!   magic   "STPC" (4 bytes)
//!   version u8 = 1
//!   hash    u64, FNV-1a 64 over the payload that follows
//!   payload:
//!     u32 config_len + config JSON (the build config, echoed verbatim)
//!     u32 layer count
//!     per layer: u8 tag + body (see `docs/formats.md`)
//!
//! Frozen banks are stored as their packed blobs with seed and family, so a
//! checkpoint can both be used directly and audited against regeneration.
//! Serialization is canonical: saving a loaded model reproduces the file
//! byte for byte. Writes go through a temp file and an atomic rename.

use std::path::Path;

use crate::bank_io::{bank_from_bytes, bank_to_bytes};
use crate::conv::ConvGeometry;
use crate::error::{Result, StepError};
use crate::model::ArchConfig;
use crate::nn::{BatchNorm, Fusion, LayerNode, ModelGraph};
use crate::tensor::{Shape4, Tensor4};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"STPC";
pub const CHECKPOINT_VERSION: u8 = 1;

const TAG_TERNARY_CONV: u8 = 0;
const TAG_CONV2D: u8 = 1;
const TAG_STEP_BLOCK: u8 = 2;
const TAG_BATCH_NORM: u8 = 3;
const TAG_LEAKY_RELU: u8 = 4;
const TAG_AVG_POOL: u8 = 5;
const TAG_DENSE: u8 = 6;
const TAG_FLATTEN: u8 = 7;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
    hash
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, v: &[u8]) {
        self.u32(v.len() as u32);
        self.buf.extend_from_slice(v);
    }

    fn floats(&mut self, v: &[f32]) {
        self.u32(v.len() as u32);
        for &x in v {
            self.f32(x);
        }
    }

    fn geom(&mut self, g: ConvGeometry) {
        self.u32(g.stride as u32);
        self.u32(g.padding as u32);
    }

    fn tensor(&mut self, t: &Tensor4<f32>) {
        let s = t.shape();
        for d in [s.n, s.c, s.h, s.w] {
            self.u32(d as u32);
        }
        for &x in t.data() {
            self.f32(x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let slice = &self.buf[self.pos..end];
                self.pos = end;
                Ok(slice)
            }
            None => Err(StepError::Corrupt("checkpoint truncated".into())),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let len = self.u32()? as usize;
        self.take(len)
    }

    fn floats(&mut self) -> Result<Vec<f32>> {
        let len = self.u32()? as usize;
        let raw = self.take(len * 4)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn geom(&mut self) -> Result<ConvGeometry> {
        Ok(ConvGeometry::new(self.u32()? as usize, self.u32()? as usize))
    }

    fn tensor(&mut self) -> Result<Tensor4<f32>> {
        let n = self.u32()? as usize;
        let c = self.u32()? as usize;
        let h = self.u32()? as usize;
        let w = self.u32()? as usize;
        let shape = Shape4::new(n, c, h, w);
        let raw = self.take(shape.len() * 4)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        Tensor4::from_vec(shape, data)
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn write_layer(w: &mut Writer, layer: &LayerNode<f32>) {
    match layer {
        LayerNode::TernaryConv { bank, geom } => {
            w.u8(TAG_TERNARY_CONV);
            w.bytes(&bank_to_bytes(bank));
            w.geom(*geom);
        }
        LayerNode::Conv2d { weights, geom } => {
            w.u8(TAG_CONV2D);
            w.tensor(weights);
            w.geom(*geom);
        }
        LayerNode::StepBlock { cslbp, haar, fusion, geom } => {
            w.u8(TAG_STEP_BLOCK);
            w.bytes(&bank_to_bytes(cslbp));
            w.bytes(&bank_to_bytes(haar));
            match fusion {
                Fusion::Add => w.u8(0),
                Fusion::Conv1x1 { weights, clamp } => {
                    w.u8(1);
                    w.u8(*clamp as u8);
                    w.tensor(weights);
                }
            }
            w.geom(*geom);
        }
        LayerNode::BatchNorm(bn) => {
            w.u8(TAG_BATCH_NORM);
            w.floats(&bn.gamma);
            w.floats(&bn.beta);
            w.floats(&bn.running_mean);
            w.floats(&bn.running_var);
            w.f32(bn.eps);
            w.f32(bn.momentum);
        }
        LayerNode::LeakyRelu { slope } => {
            w.u8(TAG_LEAKY_RELU);
            w.f32(*slope);
        }
        LayerNode::AvgPool { size, stride } => {
            w.u8(TAG_AVG_POOL);
            w.u32(*size as u32);
            w.u32(*stride as u32);
        }
        LayerNode::Dense { weights, bias, in_dim, out_dim } => {
            w.u8(TAG_DENSE);
            w.u32(*in_dim as u32);
            w.u32(*out_dim as u32);
            w.floats(weights);
            w.floats(bias);
        }
        LayerNode::Flatten => w.u8(TAG_FLATTEN),
    }
}

fn read_layer(r: &mut Reader) -> Result<LayerNode<f32>> {
    match r.u8()? {
        TAG_TERNARY_CONV => {
            let bank = bank_from_bytes(r.bytes()?)?;
            let geom = r.geom()?;
            Ok(LayerNode::TernaryConv { bank, geom })
        }
        TAG_CONV2D => {
            let weights = r.tensor()?;
            let geom = r.geom()?;
            Ok(LayerNode::Conv2d { weights, geom })
        }
        TAG_STEP_BLOCK => {
            let cslbp = bank_from_bytes(r.bytes()?)?;
            let haar = bank_from_bytes(r.bytes()?)?;
            let fusion = match r.u8()? {
                0 => Fusion::Add,
                1 => {
                    let clamp = r.u8()? != 0;
                    Fusion::Conv1x1 { weights: r.tensor()?, clamp }
                }
                other => return Err(StepError::Corrupt(format!("unknown fusion tag {other}"))),
            };
            let geom = r.geom()?;
            Ok(LayerNode::StepBlock { cslbp, haar, fusion, geom })
        }
        TAG_BATCH_NORM => {
            let gamma = r.floats()?;
            let beta = r.floats()?;
            let running_mean = r.floats()?;
            let running_var = r.floats()?;
            let eps = r.f32()?;
            let momentum = r.f32()?;
            if beta.len() != gamma.len()
                || running_mean.len() != gamma.len()
                || running_var.len() != gamma.len()
            {
                return Err(StepError::Corrupt("batch norm arrays disagree in length".into()));
            }
            Ok(LayerNode::BatchNorm(BatchNorm { gamma, beta, running_mean, running_var, eps, momentum }))
        }
        TAG_LEAKY_RELU => Ok(LayerNode::LeakyRelu { slope: r.f32()? }),
        TAG_AVG_POOL => Ok(LayerNode::AvgPool { size: r.u32()? as usize, stride: r.u32()? as usize }),
        TAG_DENSE => {
            let in_dim = r.u32()? as usize;
            let out_dim = r.u32()? as usize;
            let weights = r.floats()?;
            let bias = r.floats()?;
            Ok(LayerNode::Dense { weights, bias, in_dim, out_dim })
        }
        TAG_FLATTEN => Ok(LayerNode::Flatten),
        other => Err(StepError::Corrupt(format!("unknown layer tag {other}"))),
    }
}

/// Serialize a model with its build config to checkpoint bytes.
pub fn checkpoint_to_bytes(model: &ModelGraph<f32>, config: &ArchConfig) -> Result<Vec<u8>> {
    let mut payload = Writer::new();
    let config_json = serde_json::to_string(config)
        .map_err(|e| StepError::Format(format!("config encode: {e}")))?;
    payload.bytes(config_json.as_bytes());
    payload.u32(model.layers().len() as u32);
    for layer in model.layers() {
        write_layer(&mut payload, layer);
    }
    let mut out = Vec::with_capacity(13 + payload.buf.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&fnv1a64(&payload.buf).to_le_bytes());
    out.extend_from_slice(&payload.buf);
    Ok(out)
}

/// Parse checkpoint bytes; the hash guards the whole payload.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(ModelGraph<f32>, ArchConfig)> {
    if bytes.len() < 13 {
        return Err(StepError::Format("checkpoint truncated".into()));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(StepError::Format("bad checkpoint magic".into()));
    }
    if bytes[4] != CHECKPOINT_VERSION {
        return Err(StepError::Format(format!("unsupported checkpoint version {}", bytes[4])));
    }
    let stored_hash = u64::from_le_bytes(bytes[5..13].try_into().unwrap());
    let payload = &bytes[13..];
    if fnv1a64(payload) != stored_hash {
        return Err(StepError::Corrupt("checkpoint hash mismatch".into()));
    }
    let mut r = Reader::new(payload);
    let config_json = r.bytes()?.to_vec();
    let config: ArchConfig = serde_json::from_slice(&config_json)
        .map_err(|e| StepError::Corrupt(format!("config echo: {e}")))?;
    let layer_count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        layers.push(read_layer(&mut r)?);
    }
    if !r.done() {
        return Err(StepError::Corrupt("trailing bytes after last layer".into()));
    }
    let model = ModelGraph::new(layers, config.input_shape, config.num_classes)?;
    Ok((model, config))
}

/// Atomic save: write a sibling temp file, then rename over the target.
pub fn save_checkpoint(model: &ModelGraph<f32>, config: &ArchConfig, path: &Path) -> Result<()> {
    let bytes = checkpoint_to_bytes(model, config)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelGraph<f32>, ArchConfig)> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ArchConfig, FusionKind, StageConfig, WeightMode};
    use crate::rng::PatternRng;
    use crate::tensor::{Shape4, Tensor4};

    fn small_cfg() -> ArchConfig {
        ArchConfig {
            name: "ckpt-test".into(),
            input_shape: (3, 8, 8),
            num_classes: 4,
            weight_mode: WeightMode::Step,
            seed: 21,
            head_width: 0,
            stages: vec![StageConfig {
                filters: 4,
                kernel: 3,
                fusion: FusionKind::Conv1x1,
                stride: 1,
                pool: 2,
            }],
        }
    }

    #[test]
    fn roundtrip_preserves_logits_exactly() {
        let cfg = small_cfg();
        let model = build_model::<f32>(&cfg).unwrap();
        let bytes = checkpoint_to_bytes(&model, &cfg).unwrap();
        let (loaded, loaded_cfg) = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(loaded_cfg, cfg);
        let mut rng = PatternRng::new(5);
        let x = Tensor4::from_fn(Shape4::new(2, 3, 8, 8), |_| rng.unit_f64() as f32);
        let a = model.infer(&x, false).unwrap();
        let b = loaded.infer(&x, false).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn canonical_save_is_byte_stable() {
        let cfg = small_cfg();
        let model = build_model::<f32>(&cfg).unwrap();
        let first = checkpoint_to_bytes(&model, &cfg).unwrap();
        let (loaded, loaded_cfg) = checkpoint_from_bytes(&first).unwrap();
        let second = checkpoint_to_bytes(&loaded, &loaded_cfg).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn header_is_pinned() {
        let cfg = small_cfg();
        let model = build_model::<f32>(&cfg).unwrap();
        let bytes = checkpoint_to_bytes(&model, &cfg).unwrap();
        assert_eq!(&bytes[0..4], b"STPC");
        assert_eq!(bytes[4], 1);
        let hash = u64::from_le_bytes(bytes[5..13].try_into().unwrap());
        assert_eq!(hash, fnv1a64(&bytes[13..]));
    }

    #[test]
    fn tampered_byte_is_detected() {
        let cfg = small_cfg();
        let model = build_model::<f32>(&cfg).unwrap();
        let mut bytes = checkpoint_to_bytes(&model, &cfg).unwrap();
        let target = bytes.len() - 10;
        bytes[target] ^= 0x40;
        assert!(matches!(checkpoint_from_bytes(&bytes), Err(StepError::Corrupt(_))));
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        assert!(matches!(checkpoint_from_bytes(b"NOPE"), Err(StepError::Format(_))));
    }

    #[test]
    fn save_and_load_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let model = build_model::<f32>(&cfg).unwrap();
        let path = dir.path().join("model.stpc");
        save_checkpoint(&model, &cfg, &path).unwrap();
        let (loaded, _) = load_checkpoint(&path).unwrap();
        // Draw records are not persisted; everything that affects compute is.
        let mut rng = PatternRng::new(17);
        let x = Tensor4::from_fn(Shape4::new(1, 3, 8, 8), |_| rng.unit_f64() as f32);
        assert_eq!(
            loaded.infer(&x, false).unwrap().data(),
            model.infer(&x, false).unwrap().data()
        );
    }
}
