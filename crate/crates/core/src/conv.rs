//! Convolution engines.
//!
//! Three forward/backward paths share one accumulation contract: for a given
//! output element, contributions are summed in (channel, kernel row, kernel
//! column) order. Because the multiplier-free ternary path only *skips*
//! zero taps, it produces results equal (`==`) to the float reference on the
//! same inputs, which the tests assert exactly rather than within a
//! tolerance.
//!
//! Convolution here is cross-correlation (no kernel flip), zero padding,
//! dilation 1.

use rayon::prelude::*;

use crate::error::{Result, StepError};
use crate::pattern::FilterBank;
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

/// Stride and symmetric zero padding of one conv layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }

    pub fn out_dim(&self, input: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 {
            return Err(StepError::InvalidShape("stride must be positive".into()));
        }
        let padded = input + 2 * self.padding;
        if padded < kernel {
            return Err(StepError::ShapeMismatch(format!(
                "kernel {kernel} exceeds padded input {padded}"
            )));
        }
        Ok((padded - kernel) / self.stride + 1)
    }

    pub fn out_shape(&self, input: Shape4, filters: usize, kh: usize, kw: usize) -> Result<Shape4> {
        Ok(Shape4::new(
            input.n,
            filters,
            self.out_dim(input.h, kh)?,
            self.out_dim(input.w, kw)?,
        ))
    }
}

/// Arithmetic tally of one instrumented convolution run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCount {
    pub mults: u64,
    pub adds: u64,
}

/// Sink for arithmetic events in the inner loops. The unit impl compiles to
/// nothing, so the fast path pays no cost for the instrumentation hooks.
trait OpSink {
    fn mul(&mut self);
    fn add(&mut self);
}

#[derive(Clone, Copy)]
struct NoCount;

impl OpSink for NoCount {
    #[inline(always)]
    fn mul(&mut self) {}
    #[inline(always)]
    fn add(&mut self) {}
}

impl OpSink for OpCount {
    #[inline(always)]
    fn mul(&mut self) {
        self.mults += 1;
    }
    #[inline(always)]
    fn add(&mut self) {
        self.adds += 1;
    }
}

/// Output positions `o` with `0 <= o*stride + k_off - pad < in_dim`,
/// clipped to `[0, out_dim)`. Positions outside read only zero padding.
#[inline]
fn valid_range(out_dim: usize, in_dim: usize, k_off: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k_off { (pad - k_off).div_ceil(stride) } else { 0 };
    let max_num = in_dim as isize - 1 + pad as isize - k_off as isize;
    if max_num < 0 {
        return (0, 0);
    }
    let hi = (max_num as usize / stride + 1).min(out_dim);
    (lo.min(hi), hi)
}

/// Filters split by sign at one kernel position (channel, row, col).
/// Lane lists index the filter axis; they are what makes the ternary inner
/// loop multiplier-free: plus lanes add the input sample, minus lanes
/// subtract it, absent lanes skip it.
struct TernaryPos {
    k: usize,
    kh: usize,
    kw: usize,
    plus: Vec<u32>,
    minus: Vec<u32>,
}

/// Dense weight column at one kernel position: `col[f]` is the weight of
/// filter `f` at (k, kh, kw).
struct DensePos<F> {
    k: usize,
    kh: usize,
    kw: usize,
    col: Vec<F>,
}

/// Positions in (k, kh, kw) order; this ordering is what fixes the
/// per-output-element accumulation order shared by every forward path.
fn ternary_positions(bank: &FilterBank) -> Result<Vec<TernaryPos>> {
    let s = bank.shape();
    let values = bank.unpack()?;
    let kernel_vol = s.h * s.w;
    let mut positions = Vec::with_capacity(s.in_channels * kernel_vol);
    for k in 0..s.in_channels {
        for kh in 0..s.h {
            for kw in 0..s.w {
                let mut plus = Vec::new();
                let mut minus = Vec::new();
                for f in 0..s.filters {
                    let v = values[(f * s.in_channels + k) * kernel_vol + kh * s.w + kw];
                    match v {
                        1 => plus.push(f as u32),
                        -1 => minus.push(f as u32),
                        _ => {}
                    }
                }
                if !plus.is_empty() || !minus.is_empty() {
                    positions.push(TernaryPos { k, kh, kw, plus, minus });
                }
            }
        }
    }
    Ok(positions)
}

fn dense_positions<F: Scalar>(weights: &Tensor4<F>) -> Vec<DensePos<F>> {
    let ws = weights.shape();
    let mut positions = Vec::with_capacity(ws.c * ws.h * ws.w);
    for k in 0..ws.c {
        for kh in 0..ws.h {
            for kw in 0..ws.w {
                let col = (0..ws.n).map(|f| weights.at(f, k, kh, kw)).collect();
                positions.push(DensePos { k, kh, kw, col });
            }
        }
    }
    positions
}

/// Ternary positions regrouped for the adjoint: per (f, kh, kw), the lane
/// lists index the input-channel axis. Built f-major so one input element's
/// contributions arrive in (f, kh, kw) order.
fn ternary_grad_positions(bank: &FilterBank) -> Result<Vec<TernaryPos>> {
    let s = bank.shape();
    let values = bank.unpack()?;
    let kernel_vol = s.h * s.w;
    let mut positions = Vec::with_capacity(s.filters * kernel_vol);
    for f in 0..s.filters {
        for kh in 0..s.h {
            for kw in 0..s.w {
                let mut plus = Vec::new();
                let mut minus = Vec::new();
                for k in 0..s.in_channels {
                    let v = values[(f * s.in_channels + k) * kernel_vol + kh * s.w + kw];
                    match v {
                        1 => plus.push(k as u32),
                        -1 => minus.push(k as u32),
                        _ => {}
                    }
                }
                if !plus.is_empty() || !minus.is_empty() {
                    positions.push(TernaryPos { k: f, kh, kw, plus, minus });
                }
            }
        }
    }
    Ok(positions)
}

fn dense_grad_positions<F: Scalar>(weights: &Tensor4<F>) -> Vec<DensePos<F>> {
    let ws = weights.shape();
    let mut positions = Vec::with_capacity(ws.n * ws.h * ws.w);
    for f in 0..ws.n {
        for kh in 0..ws.h {
            for kw in 0..ws.w {
                let col = (0..ws.c).map(|k| weights.at(f, k, kh, kw)).collect();
                positions.push(DensePos { k: f, kh, kw, col });
            }
        }
    }
    positions
}

/// Decode a bank into an (f, k, h, w) float weight tensor.
pub fn bank_to_weights<F: Scalar>(bank: &FilterBank) -> Result<Tensor4<F>> {
    let s = bank.shape();
    let data = bank.unpack()?.into_iter().map(F::from_i8_c).collect();
    Tensor4::from_vec(Shape4::new(s.filters, s.in_channels, s.h, s.w), data)
}

fn check_channels(input: Shape4, weight_channels: usize) -> Result<()> {
    if input.c != weight_channels {
        return Err(StepError::ShapeMismatch(format!(
            "input has {} channels, kernels expect {weight_channels}",
            input.c
        )));
    }
    Ok(())
}

/// Forward pass over one sample. The row accumulator is laid out
/// [out col][filter] so the filter axis is contiguous: dense positions
/// update it with one weight-column FMA per input sample, ternary positions
/// with sign-list adds. Per output element (f, oh, ow) the contributions
/// arrive in (k, kh, kw) order.
#[allow(clippy::too_many_arguments)]
fn forward_sample<F: Scalar, S: OpSink>(
    input: &[F],
    in_shape: Shape4,
    ternary: Option<&[TernaryPos]>,
    dense: Option<&[DensePos<F>]>,
    filters: usize,
    geom: ConvGeometry,
    out: &mut [F],
    out_h: usize,
    out_w: usize,
    row_buf: &mut Vec<F>,
    sink: &mut S,
) {
    let (stride, pad) = (geom.stride, geom.padding);
    let in_plane = in_shape.h * in_shape.w;
    row_buf.clear();
    row_buf.resize(out_w * filters, F::zero());
    for oh in 0..out_h {
        row_buf.iter_mut().for_each(|v| *v = F::zero());
        let mut visit = |k: usize, kh: usize, kw: usize, update: &mut dyn FnMut(&mut [F], F, &mut S)| {
            let (oh_lo, oh_hi) = valid_range(out_h, in_shape.h, kh, stride, pad);
            if oh < oh_lo || oh >= oh_hi {
                return;
            }
            let ih = oh * stride + kh - pad;
            let src_row = &input[k * in_plane + ih * in_shape.w..][..in_shape.w];
            let (ow_lo, ow_hi) = valid_range(out_w, in_shape.w, kw, stride, pad);
            for ow in ow_lo..ow_hi {
                let x = src_row[ow * stride + kw - pad];
                let lanes = &mut row_buf[ow * filters..(ow + 1) * filters];
                update(lanes, x, sink);
            }
        };
        if let Some(positions) = ternary {
            for pos in positions {
                visit(pos.k, pos.kh, pos.kw, &mut |lanes, x, sink| {
                    for &f in &pos.plus {
                        lanes[f as usize] = lanes[f as usize] + x;
                        sink.add();
                    }
                    for &f in &pos.minus {
                        lanes[f as usize] = lanes[f as usize] - x;
                        sink.add();
                    }
                });
            }
        }
        if let Some(positions) = dense {
            for pos in positions {
                visit(pos.k, pos.kh, pos.kw, &mut |lanes, x, sink| {
                    for (o, &w) in lanes.iter_mut().zip(&pos.col) {
                        *o = *o + x * w;
                        sink.mul();
                        sink.add();
                    }
                });
            }
        }
        // Scatter the [ow][f] accumulator back into (f, oh, ow) planes.
        for ow in 0..out_w {
            let lanes = &row_buf[ow * filters..(ow + 1) * filters];
            for (f, &v) in lanes.iter().enumerate() {
                out[f * out_h * out_w + oh * out_w + ow] = v;
            }
        }
    }
}

/// Adjoint pass over one sample: accumulates input-row buffers laid out
/// [in col][channel]. Per input element (k, ih, iw) the contributions
/// arrive in (f, kh, kw) order.
#[allow(clippy::too_many_arguments)]
fn input_grad_sample<F: Scalar, S: OpSink>(
    grad: &[F],
    out_h: usize,
    out_w: usize,
    ternary: Option<&[TernaryPos]>,
    dense: Option<&[DensePos<F>]>,
    channels: usize,
    geom: ConvGeometry,
    din: &mut [F],
    in_shape: Shape4,
    row_buf: &mut Vec<F>,
    sink: &mut S,
) {
    let (stride, pad) = (geom.stride, geom.padding);
    let g_plane = out_h * out_w;
    row_buf.clear();
    row_buf.resize(in_shape.w * channels, F::zero());
    for ih in 0..in_shape.h {
        row_buf.iter_mut().for_each(|v| *v = F::zero());
        let mut visit = |f: usize, kh: usize, kw: usize, update: &mut dyn FnMut(&mut [F], F, &mut S)| {
            if ih + pad < kh || (ih + pad - kh) % stride != 0 {
                return;
            }
            let oh = (ih + pad - kh) / stride;
            if oh >= out_h {
                return;
            }
            let g_row = &grad[f * g_plane + oh * out_w..][..out_w];
            let (ow_lo, ow_hi) = valid_range(out_w, in_shape.w, kw, stride, pad);
            for ow in ow_lo..ow_hi {
                let g = g_row[ow];
                let iw = ow * stride + kw - pad;
                let lanes = &mut row_buf[iw * channels..(iw + 1) * channels];
                update(lanes, g, sink);
            }
        };
        if let Some(positions) = ternary {
            for pos in positions {
                visit(pos.k, pos.kh, pos.kw, &mut |lanes, g, sink| {
                    for &k in &pos.plus {
                        lanes[k as usize] = lanes[k as usize] + g;
                        sink.add();
                    }
                    for &k in &pos.minus {
                        lanes[k as usize] = lanes[k as usize] - g;
                        sink.add();
                    }
                });
            }
        }
        if let Some(positions) = dense {
            for pos in positions {
                visit(pos.k, pos.kh, pos.kw, &mut |lanes, g, sink| {
                    for (o, &w) in lanes.iter_mut().zip(&pos.col) {
                        *o = *o + g * w;
                        sink.mul();
                        sink.add();
                    }
                });
            }
        }
        for iw in 0..in_shape.w {
            let lanes = &row_buf[iw * channels..(iw + 1) * channels];
            for (k, &v) in lanes.iter().enumerate() {
                din[k * in_shape.h * in_shape.w + ih * in_shape.w + iw] = v;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Reference float path
// ---------------------------------------------------------------------------

/// Standard cross-correlation with float weights shaped (f, k, kh, kw).
/// Accumulation order is fixed, so results are bit-reproducible.
pub fn conv2d_reference<F: Scalar>(
    input: &Tensor4<F>,
    weights: &Tensor4<F>,
    geom: ConvGeometry,
) -> Result<Tensor4<F>> {
    let ws = weights.shape();
    check_channels(input.shape(), ws.c)?;
    let out_shape = geom.out_shape(input.shape(), ws.n, ws.h, ws.w)?;
    let positions = dense_positions(weights);
    let mut out = Tensor4::zeros(out_shape);
    let in_plane = input.shape().c * input.shape().h * input.shape().w;
    let out_plane = out_shape.c * out_shape.h * out_shape.w;
    let in_shape = input.shape();
    out.data_mut()
        .par_chunks_mut(out_plane)
        .zip(input.data().par_chunks(in_plane))
        .for_each(|(out_chunk, in_chunk)| {
            let mut row_buf = Vec::new();
            forward_sample::<F, NoCount>(
                in_chunk,
                in_shape,
                None,
                Some(&positions),
                ws.n,
                geom,
                out_chunk,
                out_shape.h,
                out_shape.w,
                &mut row_buf,
                &mut NoCount,
            );
        });
    Ok(out)
}

/// As [`conv2d_reference`], also returning the arithmetic tally.
pub fn conv2d_reference_counted<F: Scalar>(
    input: &Tensor4<F>,
    weights: &Tensor4<F>,
    geom: ConvGeometry,
) -> Result<(Tensor4<F>, OpCount)> {
    let ws = weights.shape();
    check_channels(input.shape(), ws.c)?;
    let out_shape = geom.out_shape(input.shape(), ws.n, ws.h, ws.w)?;
    let positions = dense_positions(weights);
    let mut out = Tensor4::zeros(out_shape);
    let mut count = OpCount::default();
    let in_plane = input.shape().c * input.shape().h * input.shape().w;
    let out_plane = out_shape.c * out_shape.h * out_shape.w;
    let mut row_buf = Vec::new();
    for n in 0..input.shape().n {
        forward_sample::<F, OpCount>(
            &input.data()[n * in_plane..(n + 1) * in_plane],
            input.shape(),
            None,
            Some(&positions),
            ws.n,
            geom,
            &mut out.data_mut()[n * out_plane..(n + 1) * out_plane],
            out_shape.h,
            out_shape.w,
            &mut row_buf,
            &mut count,
        );
    }
    Ok((out, count))
}

// ---------------------------------------------------------------------------
// Multiplier-free ternary path
// ---------------------------------------------------------------------------

/// Multiplier-free convolution over a packed ternary bank. Numerically equal
/// to [`conv2d_reference`] on the decoded bank: same fixed accumulation
/// order, zero taps skipped.
pub fn conv2d_ternary<F: Scalar>(
    input: &Tensor4<F>,
    bank: &FilterBank,
    geom: ConvGeometry,
) -> Result<Tensor4<F>> {
    let bs = bank.shape();
    check_channels(input.shape(), bs.in_channels)?;
    let out_shape = geom.out_shape(input.shape(), bs.filters, bs.h, bs.w)?;
    let positions = ternary_positions(bank)?;
    let mut out = Tensor4::zeros(out_shape);
    let in_plane = input.shape().c * input.shape().h * input.shape().w;
    let out_plane = out_shape.c * out_shape.h * out_shape.w;
    let in_shape = input.shape();
    out.data_mut()
        .par_chunks_mut(out_plane)
        .zip(input.data().par_chunks(in_plane))
        .for_each(|(out_chunk, in_chunk)| {
            let mut row_buf = Vec::new();
            forward_sample::<F, NoCount>(
                in_chunk,
                in_shape,
                Some(&positions),
                None,
                bs.filters,
                geom,
                out_chunk,
                out_shape.h,
                out_shape.w,
                &mut row_buf,
                &mut NoCount,
            );
        });
    Ok(out)
}

/// As [`conv2d_ternary`], also returning the arithmetic tally. The tally's
/// `mults` is the zero-multiplication contract under test.
pub fn conv2d_ternary_counted<F: Scalar>(
    input: &Tensor4<F>,
    bank: &FilterBank,
    geom: ConvGeometry,
) -> Result<(Tensor4<F>, OpCount)> {
    let bs = bank.shape();
    check_channels(input.shape(), bs.in_channels)?;
    let out_shape = geom.out_shape(input.shape(), bs.filters, bs.h, bs.w)?;
    let positions = ternary_positions(bank)?;
    let mut out = Tensor4::zeros(out_shape);
    let mut count = OpCount::default();
    let in_plane = input.shape().c * input.shape().h * input.shape().w;
    let out_plane = out_shape.c * out_shape.h * out_shape.w;
    let mut row_buf = Vec::new();
    for n in 0..input.shape().n {
        forward_sample::<F, OpCount>(
            &input.data()[n * in_plane..(n + 1) * in_plane],
            input.shape(),
            Some(&positions),
            None,
            bs.filters,
            geom,
            &mut out.data_mut()[n * out_plane..(n + 1) * out_plane],
            out_shape.h,
            out_shape.w,
            &mut row_buf,
            &mut count,
        );
    }
    Ok((out, count))
}

// ---------------------------------------------------------------------------
// Input gradient (transposed convolution) paths
// ---------------------------------------------------------------------------

fn check_out_grad(out_grad: Shape4, expected: Shape4) -> Result<()> {
    if out_grad != expected {
        return Err(StepError::ShapeMismatch(format!(
            "output gradient is {out_grad}, forward produced {expected}"
        )));
    }
    Ok(())
}

/// Gradient of [`conv2d_ternary`] with respect to its input: the adjoint of
/// the forward linear map, itself multiplier-free.
pub fn conv2d_input_grad<F: Scalar>(
    out_grad: &Tensor4<F>,
    bank: &FilterBank,
    geom: ConvGeometry,
    input_shape: Shape4,
) -> Result<Tensor4<F>> {
    let bs = bank.shape();
    check_channels(input_shape, bs.in_channels)?;
    let expected = geom.out_shape(input_shape, bs.filters, bs.h, bs.w)?;
    check_out_grad(out_grad.shape(), expected)?;
    let positions = ternary_grad_positions(bank)?;
    let mut din = Tensor4::zeros(input_shape);
    let in_plane = input_shape.c * input_shape.h * input_shape.w;
    let out_plane = expected.c * expected.h * expected.w;
    din.data_mut()
        .par_chunks_mut(in_plane)
        .zip(out_grad.data().par_chunks(out_plane))
        .for_each(|(din_chunk, g_chunk)| {
            let mut row_buf = Vec::new();
            input_grad_sample::<F, NoCount>(
                g_chunk,
                expected.h,
                expected.w,
                Some(&positions),
                None,
                input_shape.c,
                geom,
                din_chunk,
                input_shape,
                &mut row_buf,
                &mut NoCount,
            );
        });
    Ok(din)
}

/// As [`conv2d_input_grad`], with the arithmetic tally.
pub fn conv2d_input_grad_counted<F: Scalar>(
    out_grad: &Tensor4<F>,
    bank: &FilterBank,
    geom: ConvGeometry,
    input_shape: Shape4,
) -> Result<(Tensor4<F>, OpCount)> {
    let bs = bank.shape();
    check_channels(input_shape, bs.in_channels)?;
    let expected = geom.out_shape(input_shape, bs.filters, bs.h, bs.w)?;
    check_out_grad(out_grad.shape(), expected)?;
    let positions = ternary_grad_positions(bank)?;
    let mut din = Tensor4::zeros(input_shape);
    let mut count = OpCount::default();
    let in_plane = input_shape.c * input_shape.h * input_shape.w;
    let out_plane = expected.c * expected.h * expected.w;
    let mut row_buf = Vec::new();
    for n in 0..input_shape.n {
        input_grad_sample::<F, OpCount>(
            &out_grad.data()[n * out_plane..(n + 1) * out_plane],
            expected.h,
            expected.w,
            Some(&positions),
            None,
            input_shape.c,
            geom,
            &mut din.data_mut()[n * in_plane..(n + 1) * in_plane],
            input_shape,
            &mut row_buf,
            &mut count,
        );
    }
    Ok((din, count))
}

/// Input gradient for a float-weight convolution (trainable conv layers).
pub fn conv2d_input_grad_ref<F: Scalar>(
    out_grad: &Tensor4<F>,
    weights: &Tensor4<F>,
    geom: ConvGeometry,
    input_shape: Shape4,
) -> Result<Tensor4<F>> {
    let ws = weights.shape();
    check_channels(input_shape, ws.c)?;
    let expected = geom.out_shape(input_shape, ws.n, ws.h, ws.w)?;
    check_out_grad(out_grad.shape(), expected)?;
    let positions = dense_grad_positions(weights);
    let mut din = Tensor4::zeros(input_shape);
    let in_plane = input_shape.c * input_shape.h * input_shape.w;
    let out_plane = expected.c * expected.h * expected.w;
    din.data_mut()
        .par_chunks_mut(in_plane)
        .zip(out_grad.data().par_chunks(out_plane))
        .for_each(|(din_chunk, g_chunk)| {
            let mut row_buf = Vec::new();
            input_grad_sample::<F, NoCount>(
                g_chunk,
                expected.h,
                expected.w,
                None,
                Some(&positions),
                input_shape.c,
                geom,
                din_chunk,
                input_shape,
                &mut row_buf,
                &mut NoCount,
            );
        });
    Ok(din)
}

/// Weight gradient for a float-weight convolution:
/// `dW[f,k,kh,kw] = sum over (n, oh, ow) of g[n,f,oh,ow] * x[n,k,ih,iw]`.
pub fn conv2d_weight_grad<F: Scalar>(
    input: &Tensor4<F>,
    out_grad: &Tensor4<F>,
    geom: ConvGeometry,
    kernel_shape: Shape4,
) -> Result<Tensor4<F>> {
    let in_shape = input.shape();
    check_channels(in_shape, kernel_shape.c)?;
    let expected = geom.out_shape(in_shape, kernel_shape.n, kernel_shape.h, kernel_shape.w)?;
    check_out_grad(out_grad.shape(), expected)?;
    let mut dw = Tensor4::zeros(kernel_shape);
    let (stride, pad) = (geom.stride, geom.padding);
    let filter_vol = kernel_shape.c * kernel_shape.h * kernel_shape.w;
    dw.data_mut()
        .par_chunks_mut(filter_vol)
        .enumerate()
        .for_each(|(f, dw_filter)| {
            for k in 0..kernel_shape.c {
                for kh in 0..kernel_shape.h {
                    let (oh_lo, oh_hi) = valid_range(expected.h, in_shape.h, kh, stride, pad);
                    for kw in 0..kernel_shape.w {
                        let (ow_lo, ow_hi) = valid_range(expected.w, in_shape.w, kw, stride, pad);
                        let mut acc = F::zero();
                        for n in 0..in_shape.n {
                            let g_plane = &out_grad.data()
                                [(n * expected.c + f) * expected.h * expected.w..]
                                [..expected.h * expected.w];
                            let in_plane = &input.data()
                                [(n * in_shape.c + k) * in_shape.h * in_shape.w..]
                                [..in_shape.h * in_shape.w];
                            for oh in oh_lo..oh_hi {
                                let ih = oh * stride + kh - pad;
                                let g_row = &g_plane[oh * expected.w..(oh + 1) * expected.w];
                                let in_row = &in_plane[ih * in_shape.w..(ih + 1) * in_shape.w];
                                if stride == 1 {
                                    let src = &in_row[ow_lo + kw - pad..ow_hi + kw - pad];
                                    for (&g, &x) in g_row[ow_lo..ow_hi].iter().zip(src) {
                                        acc = acc + g * x;
                                    }
                                } else {
                                    for ow in ow_lo..ow_hi {
                                        let iw = ow * stride + kw - pad;
                                        acc = acc + g_row[ow] * in_row[iw];
                                    }
                                }
                            }
                        }
                        dw_filter[(k * kernel_shape.h + kh) * kernel_shape.w + kw] = acc;
                    }
                }
            }
        });
    Ok(dw)
}
