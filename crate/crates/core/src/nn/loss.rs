//! Classification loss.

use crate::error::{Result, StepError};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;
#[cfg(test)]
use crate::tensor::Shape4;

/// Mean softmax cross-entropy over the batch, with the logit gradient
/// `(softmax - onehot) / n`. Stabilized by max subtraction.
///
/// Logits are (n, classes, 1, 1); labels index into the class axis.
pub fn softmax_cross_entropy<F: Scalar>(
    logits: &Tensor4<F>,
    labels: &[u8],
) -> Result<(F, Tensor4<F>)> {
    let s = logits.shape();
    if s.h != 1 || s.w != 1 {
        return Err(StepError::ShapeMismatch(format!("logits must be (n, c, 1, 1), got {s}")));
    }
    if labels.len() != s.n {
        return Err(StepError::ShapeMismatch(format!(
            "{} labels for a batch of {}",
            labels.len(),
            s.n
        )));
    }
    let classes = s.c;
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(StepError::Format(format!("label {bad} out of range for {classes} classes")));
    }
    let n = s.n;
    let inv_n = F::one() / F::from_f64_c(n as f64);
    let mut d_logits = Tensor4::zeros(s);
    let mut loss_sum = F::zero();
    for i in 0..n {
        let row = &logits.data()[i * classes..(i + 1) * classes];
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut denom = F::zero();
        for &l in row {
            denom += (l - max).exp();
        }
        let lse = max + denom.ln();
        let y = labels[i] as usize;
        loss_sum += lse - row[y];
        let d_row = &mut d_logits.data_mut()[i * classes..(i + 1) * classes];
        for (c, &l) in row.iter().enumerate() {
            let p = (l - lse).exp();
            d_row[c] = if c == y { (p - F::one()) * inv_n } else { p * inv_n };
        }
    }
    Ok((loss_sum * inv_n, d_logits))
}
