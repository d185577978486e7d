//! Shared test support: the independent convolution oracle and small
//! helpers. The oracle deliberately shares no code with the engines under
//! test: it materializes a zero-padded copy of the input and walks a plain
//! seven-deep loop nest, accumulating per output element in (channel,
//! kernel row, kernel col) order.

use step_core::{PatternRng, Scalar, Shape4, Tensor4};

/// Brute-force cross-correlation against an explicitly padded input copy.
pub fn conv2d_brute_force<F: Scalar>(
    input: &Tensor4<F>,
    weights: &Tensor4<F>,
    stride: usize,
    pad: usize,
) -> Tensor4<F> {
    let is = input.shape();
    let ws = weights.shape();
    assert_eq!(is.c, ws.c, "oracle: channel mismatch");
    let ph = is.h + 2 * pad;
    let pw = is.w + 2 * pad;
    let mut padded = Tensor4::<F>::zeros(Shape4::new(is.n, is.c, ph, pw));
    for n in 0..is.n {
        for c in 0..is.c {
            for h in 0..is.h {
                for w in 0..is.w {
                    *padded.at_mut(n, c, h + pad, w + pad) = input.at(n, c, h, w);
                }
            }
        }
    }
    let oh = (ph - ws.h) / stride + 1;
    let ow = (pw - ws.w) / stride + 1;
    let mut out = Tensor4::<F>::zeros(Shape4::new(is.n, ws.n, oh, ow));
    for n in 0..is.n {
        for f in 0..ws.n {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = F::zero();
                    for k in 0..ws.c {
                        for kh in 0..ws.h {
                            for kw in 0..ws.w {
                                acc = acc
                                    + padded.at(n, k, i * stride + kh, j * stride + kw)
                                        * weights.at(f, k, kh, kw);
                            }
                        }
                    }
                    *out.at_mut(n, f, i, j) = acc;
                }
            }
        }
    }
    out
}

pub fn random_tensor<F: Scalar>(shape: Shape4, rng: &mut PatternRng) -> Tensor4<F> {
    Tensor4::from_fn(shape, |_| F::from_f64_c(rng.symmetric_f64(1.0)))
}
