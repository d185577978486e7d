//! Training loop: shuffling, augmentation, the optimizer drive, and
//! per-epoch bookkeeping.

use std::time::Instant;

use crate::data::LabeledImageBatch;
use crate::error::Result;
use crate::nn::{lr_at_epoch, softmax_cross_entropy, Mode, ModelGraph, Optimizer, TrainConfig};
use crate::rng::PatternRng;
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

/// Pad-then-crop margin used by train-time augmentation.
const CROP_PAD: usize = 4;

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_acc: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,lr,train_loss,train_acc,eval_acc,wall_seconds";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let eval = r.eval_acc.map(|a| format!("{a:.6}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{:.8},{:.6},{:.6},{},{:.3}\n",
                r.epoch, r.lr, r.train_loss, r.train_acc, eval, r.wall_seconds
            ));
        }
        out
    }
}

/// Random pad-and-crop plus horizontal flip for one image plane.
/// `dr`, `dc` are crop offsets in [0, 2*pad]; out-of-bounds reads are zero.
fn augment_into<F: Scalar>(
    dst: &mut [F],
    src: &[F],
    channels: usize,
    height: usize,
    width: usize,
    dr: usize,
    dc: usize,
    flip: bool,
) {
    for c in 0..channels {
        let src_plane = &src[c * height * width..(c + 1) * height * width];
        let dst_plane = &mut dst[c * height * width..(c + 1) * height * width];
        for r in 0..height {
            let sr = (r + dr) as isize - CROP_PAD as isize;
            for col in 0..width {
                let logical_col = if flip { width - 1 - col } else { col };
                let sc = (logical_col + dc) as isize - CROP_PAD as isize;
                dst_plane[r * width + col] = if sr >= 0
                    && (sr as usize) < height
                    && sc >= 0
                    && (sc as usize) < width
                {
                    src_plane[sr as usize * width + sc as usize]
                } else {
                    F::zero()
                };
            }
        }
    }
}

/// Gather the given sample indices into one batch tensor, augmenting when a
/// generator is supplied.
fn assemble_batch<F: Scalar>(
    data: &LabeledImageBatch<F>,
    indices: &[usize],
    augment: Option<&mut PatternRng>,
) -> (Tensor4<F>, Vec<u8>) {
    let s = data.images.shape();
    let plane = s.c * s.h * s.w;
    let mut batch = Tensor4::zeros(Shape4::new(indices.len(), s.c, s.h, s.w));
    let mut labels = Vec::with_capacity(indices.len());
    match augment {
        Some(rng) => {
            for (bi, &i) in indices.iter().enumerate() {
                let dr = rng.int_inclusive(0, 2 * CROP_PAD as u32) as usize;
                let dc = rng.int_inclusive(0, 2 * CROP_PAD as u32) as usize;
                let flip = rng.coin(0.5);
                let src = &data.images.data()[i * plane..(i + 1) * plane];
                let dst = &mut batch.data_mut()[bi * plane..(bi + 1) * plane];
                augment_into(dst, src, s.c, s.h, s.w, dr, dc, flip);
                labels.push(data.labels[i]);
            }
        }
        None => {
            for (bi, &i) in indices.iter().enumerate() {
                let src = &data.images.data()[i * plane..(i + 1) * plane];
                batch.data_mut()[bi * plane..(bi + 1) * plane].copy_from_slice(src);
                labels.push(data.labels[i]);
            }
        }
    }
    (batch, labels)
}

fn count_correct<F: Scalar>(logits: &Tensor4<F>, labels: &[u8]) -> usize {
    let classes = logits.shape().c;
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &label)| {
            let row = &logits.data()[i * classes..(i + 1) * classes];
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best == label as usize
        })
        .count()
}

/// Top-1 accuracy of the model on a labeled set.
pub fn evaluate<F: Scalar>(
    model: &ModelGraph<F>,
    data: &LabeledImageBatch<F>,
    quantized: bool,
    batch_size: usize,
) -> Result<f64> {
    let n = data.labels.len();
    if n == 0 {
        return Ok(0.0);
    }
    let indices: Vec<usize> = (0..n).collect();
    let mut correct = 0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (batch, labels) = assemble_batch(data, chunk, None);
        let logits = model.infer(&batch, quantized)?;
        correct += count_correct(&logits, &labels);
    }
    Ok(correct as f64 / n as f64)
}

/// Train in place. Augmentation (pad-4-crop and horizontal flip) applies in
/// train mode only; every random draw comes from one stream seeded with
/// `cfg.seed`, so identical configs produce identical logs.
pub fn train_loop<F: Scalar>(
    model: &mut ModelGraph<F>,
    train: &LabeledImageBatch<F>,
    test: Option<&LabeledImageBatch<F>>,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    let mut rng = PatternRng::new(cfg.seed);
    let mut optimizer = Optimizer::new(cfg.optimizer);
    let weight_decay = F::from_f64_c(cfg.weight_decay);
    let mut order: Vec<usize> = (0..train.labels.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = lr_at_epoch(cfg, epoch);
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let (batch, labels) = assemble_batch(train, chunk, Some(&mut rng));
            let (logits, cache) = model.forward(&batch, Mode::Train)?;
            let (loss, d_logits) = softmax_cross_entropy(&logits, &labels)?;
            loss_sum += loss.as_f64() * chunk.len() as f64;
            correct += count_correct(&logits, &labels);
            let cache = cache.expect("train mode returns a cache");
            let grads = model.backward(&cache, &d_logits, weight_decay)?;
            optimizer.step(model, &grads, lr)?;
        }
        let eval_acc = match test {
            Some(t) => Some(evaluate(model, t, false, cfg.batch_size)?),
            None => None,
        };
        log.records.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train.labels.len().max(1) as f64,
            train_acc: correct as f64 / train.labels.len().max(1) as f64,
            eval_acc,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(log)
}
