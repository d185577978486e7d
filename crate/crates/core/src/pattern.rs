//! Structured ternary kernel generation.
//!
//! Two families of static convolution kernels are produced here, both over
//! {-1, 0, +1}: center-symmetric local binary patterns (antisymmetric sign
//! pairs mirrored through the kernel center) and Haar-structured features
//! (up to four axis-aligned constant-sign rectangles painted onto a zero
//! grid). A random-binary family is kept as a baseline. Generation is a pure
//! function of `(shape, family, seed)`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, StepError};
use crate::packed::PackedTernary;
use crate::rng::PatternRng;

/// Kernel family tag. The byte values are fixed: they appear in the bank
/// file format and in seed derivation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    CsLbp,
    Haar,
    RandomBinary,
}

impl KernelFamily {
    pub fn code(self) -> u8 {
        match self {
            KernelFamily::CsLbp => 0,
            KernelFamily::Haar => 1,
            KernelFamily::RandomBinary => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(KernelFamily::CsLbp),
            1 => Ok(KernelFamily::Haar),
            2 => Ok(KernelFamily::RandomBinary),
            other => Err(StepError::Format(format!("unknown family code {other}"))),
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "cslbp" | "cs-lbp" | "cs_lbp" => Ok(KernelFamily::CsLbp),
            "haar" => Ok(KernelFamily::Haar),
            "random_binary" | "random-binary" | "randbin" => Ok(KernelFamily::RandomBinary),
            other => Err(StepError::Config(format!("unknown kernel family '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::CsLbp => "cslbp",
            KernelFamily::Haar => "haar",
            KernelFamily::RandomBinary => "random_binary",
        }
    }
}

/// One h×w spatial kernel with values in {-1, 0, +1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TernaryKernel {
    h: usize,
    w: usize,
    values: Vec<i8>,
}

impl TernaryKernel {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, values: vec![0; h * w] }
    }

    pub fn from_values(h: usize, w: usize, values: Vec<i8>) -> Result<Self> {
        if values.len() != h * w {
            return Err(StepError::InvalidShape(format!(
                "kernel {h}x{w} needs {} values, got {}",
                h * w,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !matches!(v, -1 | 0 | 1)) {
            return Err(StepError::NonTernary(values[pos], pos));
        }
        Ok(Self { h, w, values })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> i8 {
        self.values[row * self.w + col]
    }

    pub fn zero_count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 0).count()
    }
}

/// Point reflection of flat position `i` through the center of an h×w grid.
/// Defines the pair structure of CS-LBP kernels; an involution.
pub fn mirror_index(i: usize, h: usize, w: usize) -> usize {
    assert!(i < h * w, "mirror_index: position {i} out of range for {h}x{w}");
    h * w - 1 - i
}

/// Recorded draw outcome for a CS-LBP kernel: the signs of the activated
/// pairs, in activation order. Pair `p` occupies flat positions
/// `p` and `mirror(p)`; only the first `pair_signs.len()` pairs are active.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsLbpParams {
    pub num_pairs: usize,
    pub pair_signs: Vec<i8>,
}

impl CsLbpParams {
    /// Number of activated pairs.
    pub fn length(&self) -> usize {
        self.pair_signs.len()
    }

    /// Rebuild the kernel this record describes.
    pub fn build(&self, h: usize, w: usize) -> Result<TernaryKernel> {
        check_cslbp_shape(h, w)?;
        let n = h * w / 2;
        if self.num_pairs != n || self.pair_signs.len() > n {
            return Err(StepError::InvalidShape(format!(
                "cs-lbp record with {} pairs does not fit a {h}x{w} kernel",
                self.num_pairs
            )));
        }
        let mut kernel = TernaryKernel::zeros(h, w);
        for (i, &s) in self.pair_signs.iter().enumerate() {
            if !matches!(s, -1 | 0 | 1) {
                return Err(StepError::NonTernary(s, i));
            }
            kernel.values[i] = s;
            kernel.values[mirror_index(i, h, w)] = -s;
        }
        Ok(kernel)
    }
}

/// One axis-aligned rectangle of a Haar kernel. `extent` of `l` covers
/// `l + 1` cells; overhang past the grid edge is clamped at build time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HaarRect {
    pub top_left: (usize, usize),
    pub extent: (usize, usize),
    pub sign: i8,
}

/// Recorded draw outcome for a Haar kernel: 1..=4 rectangles, applied in
/// order with later rectangles overwriting earlier ones.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HaarParams {
    pub rects: Vec<HaarRect>,
}

impl HaarParams {
    pub fn num_rects(&self) -> usize {
        self.rects.len()
    }

    /// Rebuild the kernel this record describes.
    pub fn build(&self, h: usize, w: usize) -> Result<TernaryKernel> {
        check_haar_shape(h, w)?;
        if self.rects.is_empty() || self.rects.len() > 4 {
            return Err(StepError::InvalidShape(format!(
                "haar record must hold 1..=4 rectangles, got {}",
                self.rects.len()
            )));
        }
        let mut kernel = TernaryKernel::zeros(h, w);
        for rect in &self.rects {
            let (r0, c0) = rect.top_left;
            if r0 >= h || c0 >= w || !matches!(rect.sign, -1 | 1) {
                return Err(StepError::InvalidShape(format!("haar rect {rect:?} invalid for {h}x{w}")));
            }
            let r1 = (r0 + rect.extent.0).min(h - 1);
            let c1 = (c0 + rect.extent.1).min(w - 1);
            for r in r0..=r1 {
                for c in c0..=c1 {
                    kernel.values[r * w + c] = rect.sign;
                }
            }
        }
        Ok(kernel)
    }
}

/// Per-kernel generation record, kept so any bank can be replayed and
/// audited without the PRNG.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum GenRecord {
    CsLbp(CsLbpParams),
    Haar(HaarParams),
    RandomBinary,
}

fn check_cslbp_shape(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % 2 == 0 || w % 2 == 0 {
        return Err(StepError::InvalidShape(format!(
            "cs-lbp kernels need odd positive sides, got {h}x{w}"
        )));
    }
    Ok(())
}

fn check_haar_shape(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 {
        return Err(StepError::InvalidShape(format!("kernel sides must be positive, got {h}x{w}")));
    }
    Ok(())
}

/// Sample the pair signs of one CS-LBP kernel. The number of activated
/// pairs is uniform on [0, min(4, h*w/2)]; a drawn sign of 0 leaves a dead
/// pair, which is legal (all-zero kernels can occur).
pub fn sample_cslbp_params(h: usize, w: usize, rng: &mut PatternRng) -> Result<CsLbpParams> {
    check_cslbp_shape(h, w)?;
    let num_pairs = h * w / 2;
    let max_len = num_pairs.min(4) as u32;
    let length = rng.int_inclusive(0, max_len) as usize;
    let pair_signs = (0..length).map(|_| rng.from_set(&[-1i8, 0, 1])).collect();
    Ok(CsLbpParams { num_pairs, pair_signs })
}

/// Sample the rectangles of one Haar kernel: count uniform on [1, 4], then
/// per rectangle the top-left cell, the extents (each uniform on the kernel
/// side, covering extent+1 cells before clamping) and a sign in {-1, +1}.
pub fn sample_haar_params(h: usize, w: usize, rng: &mut PatternRng) -> Result<HaarParams> {
    check_haar_shape(h, w)?;
    let r = rng.int_inclusive(1, 4);
    let mut rects = Vec::with_capacity(r as usize);
    for _ in 0..r {
        let row = rng.int_inclusive(0, h as u32 - 1) as usize;
        let col = rng.int_inclusive(0, w as u32 - 1) as usize;
        let ext_h = rng.int_inclusive(0, h as u32 - 1) as usize;
        let ext_w = rng.int_inclusive(0, w as u32 - 1) as usize;
        let sign = rng.from_set(&[-1i8, 1]);
        rects.push(HaarRect { top_left: (row, col), extent: (ext_h, ext_w), sign });
    }
    Ok(HaarParams { rects })
}

/// Generate one CS-LBP kernel; returns the kernel with its draw record.
pub fn gen_cslbp_kernel(h: usize, w: usize, rng: &mut PatternRng) -> Result<(TernaryKernel, CsLbpParams)> {
    let params = sample_cslbp_params(h, w, rng)?;
    let kernel = params.build(h, w)?;
    Ok((kernel, params))
}

/// Generate one Haar kernel; returns the kernel with its draw record.
pub fn gen_haar_kernel(h: usize, w: usize, rng: &mut PatternRng) -> Result<(TernaryKernel, HaarParams)> {
    let params = sample_haar_params(h, w, rng)?;
    let kernel = params.build(h, w)?;
    Ok((kernel, params))
}

/// Generate one random-binary kernel: every element i.i.d. uniform {-1, +1},
/// drawn in row-major order.
pub fn gen_random_binary_kernel(h: usize, w: usize, rng: &mut PatternRng) -> Result<TernaryKernel> {
    check_haar_shape(h, w)?;
    let values = (0..h * w).map(|_| rng.from_set(&[-1i8, 1])).collect();
    TernaryKernel::from_values(h, w, values)
}

/// Shape of a filter bank: kernel height/width, input channels, output filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankShape {
    pub h: usize,
    pub w: usize,
    pub in_channels: usize,
    pub filters: usize,
}

impl BankShape {
    pub fn new(h: usize, w: usize, in_channels: usize, filters: usize) -> Self {
        Self { h, w, in_channels, filters }
    }

    pub fn kernel_count(&self) -> usize {
        self.filters * self.in_channels
    }

    pub fn element_count(&self) -> usize {
        self.kernel_count() * self.h * self.w
    }
}

/// A full conv layer worth of ternary kernels, bit-packed, with the seed and
/// per-kernel draw records needed to regenerate or replay it.
///
/// Kernel order is filter-major, then channel; within a kernel, row-major.
/// The flattened element order therefore matches an (f, k, h, w) weight
/// tensor, which is what the convolution engines consume.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    shape: BankShape,
    family: KernelFamily,
    seed: u64,
    packed: PackedTernary,
    records: Vec<GenRecord>,
}

impl FilterBank {
    /// Deterministically generate a bank. One sequential PRNG stream, seeded
    /// from `(seed, family)`, feeds every kernel in order.
    pub fn generate(shape: BankShape, family: KernelFamily, seed: u64) -> Result<Self> {
        if shape.h == 0 || shape.w == 0 || shape.in_channels == 0 || shape.filters == 0 {
            return Err(StepError::InvalidShape(format!("bank shape {shape:?} has a zero dimension")));
        }
        if family == KernelFamily::CsLbp {
            check_cslbp_shape(shape.h, shape.w)?;
        }
        let mut rng = PatternRng::new(PatternRng::derive(seed, &[family.code() as u64]));
        let mut values = Vec::with_capacity(shape.element_count());
        let mut records = Vec::with_capacity(shape.kernel_count());
        for _filter in 0..shape.filters {
            for _channel in 0..shape.in_channels {
                let kernel = match family {
                    KernelFamily::CsLbp => {
                        let (kernel, params) = gen_cslbp_kernel(shape.h, shape.w, &mut rng)?;
                        records.push(GenRecord::CsLbp(params));
                        kernel
                    }
                    KernelFamily::Haar => {
                        let (kernel, params) = gen_haar_kernel(shape.h, shape.w, &mut rng)?;
                        records.push(GenRecord::Haar(params));
                        kernel
                    }
                    KernelFamily::RandomBinary => {
                        records.push(GenRecord::RandomBinary);
                        gen_random_binary_kernel(shape.h, shape.w, &mut rng)?
                    }
                };
                values.extend_from_slice(kernel.values());
            }
        }
        let packed = PackedTernary::pack(&values)?;
        Ok(Self { shape, family, seed, packed, records })
    }

    /// Reassemble a bank from its serialized parts. Records may be absent
    /// (packed blobs loaded without their JSON descriptor).
    pub fn from_parts(
        shape: BankShape,
        family: KernelFamily,
        seed: u64,
        packed: PackedTernary,
        records: Vec<GenRecord>,
    ) -> Result<Self> {
        if packed.len() != shape.element_count() {
            return Err(StepError::ShapeMismatch(format!(
                "packed blob holds {} elements, shape {shape:?} needs {}",
                packed.len(),
                shape.element_count()
            )));
        }
        if !records.is_empty() && records.len() != shape.kernel_count() {
            return Err(StepError::ShapeMismatch(format!(
                "{} draw records for {} kernels",
                records.len(),
                shape.kernel_count()
            )));
        }
        Ok(Self { shape, family, seed, packed, records })
    }

    pub fn shape(&self) -> BankShape {
        self.shape
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn packed(&self) -> &PackedTernary {
        &self.packed
    }

    pub fn records(&self) -> &[GenRecord] {
        &self.records
    }

    /// Decode every element, in (f, k, h, w) order.
    pub fn unpack(&self) -> Result<Vec<i8>> {
        self.packed.unpack()
    }

    /// Decode one kernel.
    pub fn kernel(&self, filter: usize, channel: usize) -> Result<TernaryKernel> {
        let k = self.shape.h * self.shape.w;
        let idx = (filter * self.shape.in_channels + channel) * k;
        let values = self.packed.unpack_range(idx, k)?;
        TernaryKernel::from_values(self.shape.h, self.shape.w, values)
    }

    /// Fraction of zero elements over the whole bank.
    pub fn sparsity(&self) -> f64 {
        let zeros = self
            .packed
            .unpack()
            .expect("bank invariant: packed blob decodes")
            .iter()
            .filter(|&&v| v == 0)
            .count();
        zeros as f64 / self.shape.element_count() as f64
    }

    /// Rebuild every kernel from its recorded draw parameters and compare
    /// with the stored values. Returns an error if any kernel differs or if
    /// the records are missing.
    pub fn verify_replay(&self) -> Result<()> {
        if self.records.len() != self.shape.kernel_count() {
            return Err(StepError::Corrupt("bank has no draw records to replay".into()));
        }
        let stored = self.unpack()?;
        let k = self.shape.h * self.shape.w;
        for (i, record) in self.records.iter().enumerate() {
            let rebuilt = match record {
                GenRecord::CsLbp(p) => p.build(self.shape.h, self.shape.w)?,
                GenRecord::Haar(p) => p.build(self.shape.h, self.shape.w)?,
                // Random-binary kernels carry no structural record.
                GenRecord::RandomBinary => continue,
            };
            if rebuilt.values() != &stored[i * k..(i + 1) * k] {
                return Err(StepError::Corrupt(format!("kernel {i} does not replay from its record")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force reflection table: walk the grid once from both ends.
    fn mirror_table(h: usize, w: usize) -> Vec<usize> {
        let n = h * w;
        let mut table = vec![0; n];
        let coords: Vec<(usize, usize)> = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).collect();
        for (i, &(r, c)) in coords.iter().enumerate() {
            let (mr, mc) = (h - 1 - r, w - 1 - c);
            table[i] = mr * w + mc;
        }
        table
    }

    #[test]
    fn mirror_examples() {
        assert_eq!(mirror_index(0, 3, 3), 8);
        assert_eq!(mirror_index(4, 3, 3), 4);
        assert_eq!(mirror_index(2, 5, 5), 22);
    }

    #[test]
    fn mirror_matches_brute_force_table() {
        for &(h, w) in &[(3, 3), (5, 5), (3, 5), (7, 3)] {
            let table = mirror_table(h, w);
            for i in 0..h * w {
                assert_eq!(mirror_index(i, h, w), table[i], "i={i} h={h} w={w}");
                assert_eq!(mirror_index(mirror_index(i, h, w), h, w), i);
            }
        }
    }

    #[test]
    #[should_panic(expected = "out of range")]
    fn mirror_rejects_out_of_range() {
        mirror_index(9, 3, 3);
    }

    #[test]
    fn cslbp_length_zero_is_all_zero() {
        let params = CsLbpParams { num_pairs: 4, pair_signs: vec![] };
        let kernel = params.build(3, 3).unwrap();
        assert!(kernel.values().iter().all(|&v| v == 0));
    }

    #[test]
    fn cslbp_single_positive_pair() {
        let params = CsLbpParams { num_pairs: 4, pair_signs: vec![1] };
        let kernel = params.build(3, 3).unwrap();
        let mut expected = vec![0i8; 9];
        expected[0] = 1;
        expected[8] = -1;
        assert_eq!(kernel.values(), &expected[..]);
    }

    #[test]
    fn cslbp_antisymmetry_over_seed_sweep() {
        for seed in 0..1000u64 {
            let mut rng = PatternRng::new(seed);
            let (kernel, _) = gen_cslbp_kernel(3, 3, &mut rng).unwrap();
            for i in 0..9 {
                assert_eq!(
                    kernel.values()[i] + kernel.values()[mirror_index(i, 3, 3)],
                    0,
                    "seed {seed} position {i}"
                );
            }
            assert_eq!(kernel.values()[4], 0, "seed {seed}: center must stay 0");
            assert_eq!(kernel.values().iter().map(|&v| v as i32).sum::<i32>(), 0);
        }
    }

    #[test]
    fn cslbp_rejects_even_sides() {
        let mut rng = PatternRng::new(0);
        assert!(matches!(gen_cslbp_kernel(4, 3, &mut rng), Err(StepError::InvalidShape(_))));
        assert!(matches!(gen_cslbp_kernel(3, 4, &mut rng), Err(StepError::InvalidShape(_))));
    }

    #[test]
    fn haar_full_cover_rect_is_all_ones() {
        let params = HaarParams {
            rects: vec![HaarRect { top_left: (0, 0), extent: (4, 4), sign: 1 }],
        };
        let kernel = params.build(5, 5).unwrap();
        assert!(kernel.values().iter().all(|&v| v == 1));
    }

    #[test]
    fn haar_overwrite_forms_two_box_edge() {
        // Full +1 cover, then rows 0-1 repainted -1: a two-box edge feature.
        let params = HaarParams {
            rects: vec![
                HaarRect { top_left: (0, 0), extent: (4, 4), sign: 1 },
                HaarRect { top_left: (0, 0), extent: (1, 4), sign: -1 },
            ],
        };
        let kernel = params.build(5, 5).unwrap();
        for r in 0..5 {
            for c in 0..5 {
                let expected = if r < 2 { -1 } else { 1 };
                assert_eq!(kernel.get(r, c), expected, "({r},{c})");
            }
        }
    }

    #[test]
    fn haar_extent_clamps_at_edge() {
        let params = HaarParams {
            rects: vec![HaarRect { top_left: (3, 3), extent: (4, 4), sign: -1 }],
        };
        let kernel = params.build(5, 5).unwrap();
        let covered: usize = kernel.values().iter().filter(|&&v| v == -1).count();
        assert_eq!(covered, 4); // rows 3..=4 x cols 3..=4
    }

    #[test]
    fn haar_sweep_stays_ternary_and_replays() {
        for seed in 0..1000u64 {
            let mut rng = PatternRng::new(seed);
            let (kernel, params) = gen_haar_kernel(5, 5, &mut rng).unwrap();
            assert!(kernel.values().iter().all(|v| matches!(v, -1 | 0 | 1)));
            assert!(params.num_rects() >= 1 && params.num_rects() <= 4);
            assert_eq!(params.build(5, 5).unwrap(), kernel, "seed {seed}");
        }
    }

    #[test]
    fn random_binary_has_no_zeros() {
        let mut rng = PatternRng::new(42);
        let kernel = gen_random_binary_kernel(3, 3, &mut rng).unwrap();
        assert_eq!(kernel.values().len(), 9);
        assert!(kernel.values().iter().all(|v| matches!(v, -1 | 1)));
        assert_eq!(kernel.zero_count(), 0);
    }

    #[test]
    fn random_binary_deterministic() {
        let mut a = PatternRng::new(42);
        let mut b = PatternRng::new(42);
        assert_eq!(
            gen_random_binary_kernel(3, 3, &mut a).unwrap(),
            gen_random_binary_kernel(3, 3, &mut b).unwrap()
        );
    }

    #[test]
    fn random_binary_balanced() {
        // Binomial bound: 10^4 fair draws land within [0.47, 0.53].
        let mut rng = PatternRng::new(1);
        let mut plus = 0usize;
        let total = 10_000;
        for _ in 0..total / 100 {
            let kernel = gen_random_binary_kernel(10, 10, &mut rng).unwrap();
            plus += kernel.values().iter().filter(|&&v| v == 1).count();
        }
        let frac = plus as f64 / total as f64;
        assert!((0.47..=0.53).contains(&frac), "frac {frac}");
    }

    #[test]
    fn bank_generation_deterministic() {
        let shape = BankShape::new(3, 3, 1, 4);
        let a = FilterBank::generate(shape, KernelFamily::CsLbp, 7).unwrap();
        let b = FilterBank::generate(shape, KernelFamily::CsLbp, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, FilterBank::generate(shape, KernelFamily::CsLbp, 8).unwrap());
    }

    #[test]
    fn bank_kernel_count_and_ternary_closure() {
        let bank = FilterBank::generate(BankShape::new(3, 3, 2, 8), KernelFamily::Haar, 1).unwrap();
        assert_eq!(bank.shape().kernel_count(), 16);
        assert!(bank.unpack().unwrap().iter().all(|v| matches!(v, -1 | 0 | 1)));
        bank.verify_replay().unwrap();
    }

    #[test]
    fn cslbp_bank_center_forces_sparsity_floor() {
        let bank = FilterBank::generate(BankShape::new(3, 3, 16, 32), KernelFamily::CsLbp, 0).unwrap();
        assert!(bank.sparsity() >= 1.0 / 9.0, "sparsity {}", bank.sparsity());
    }

    #[test]
    fn kernel_accessor_matches_flat_order() {
        let bank = FilterBank::generate(BankShape::new(3, 3, 2, 3), KernelFamily::Haar, 5).unwrap();
        let flat = bank.unpack().unwrap();
        let k = bank.kernel(2, 1).unwrap();
        let off = (2 * 2 + 1) * 9;
        assert_eq!(k.values(), &flat[off..off + 9]);
    }
}
