//! Symmetric uniform quantization kernels.
//!
//! Scheme (per scale group):
//!   scale = absmax / (2^(b-1) - 1)
//!   q     = clamp(round(x / scale), -(2^(b-1)-1), 2^(b-1)-1)
//!   x~    = q * scale
//!
//! Rounding is half away from zero (`f32::round`), which keeps the scheme
//! sign-symmetric: q(-x) == -q(x). The clamp range is symmetric as well, so
//! -128 never appears in 8-bit output. 4-bit values are held one per i8;
//! nibble packing is an I/O concern handled in the container format.

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

/// Scale floor substituted when a tensor/row/group is entirely zero. All q
/// values are then 0 and dequantization reproduces exact zeros.
pub const MIN_SCALE: f32 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    /// One scale for the whole tensor.
    PerTensor,
    /// One scale per row (activation layout: row = token).
    PerToken,
    /// One scale per column (weight layout: column = output channel).
    PerChannel,
    /// Per output channel, the input dimension split into contiguous groups
    /// of `group_size` rows; scales laid out `[col * n_groups + group]`.
    GroupWise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantParams {
    pub bits: u8,
    pub granularity: Granularity,
    /// Rows per group; meaningful for `GroupWise` only.
    pub group_size: usize,
    pub scales: Vec<f32>,
}

impl QuantParams {
    pub fn new(bits: u8, granularity: Granularity, group_size: usize, scales: Vec<f32>) -> Result<Self> {
        check_bits(bits)?;
        if granularity == Granularity::GroupWise && group_size == 0 {
            return Err(Error::InvalidArg("group_size must be >= 1".into()));
        }
        if scales.is_empty() {
            return Err(Error::EmptyInput);
        }
        if scales.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArg("all scales must be positive and finite".into()));
        }
        Ok(Self {
            bits,
            granularity,
            group_size,
            scales,
        })
    }

    fn n_groups(&self, rows: usize) -> usize {
        rows.div_ceil(self.group_size)
    }

    /// Number of scales this parameter set must carry for an `rows x cols`
    /// tensor.
    fn expected_scales(&self, rows: usize, cols: usize) -> usize {
        match self.granularity {
            Granularity::PerTensor => 1,
            Granularity::PerToken => rows,
            Granularity::PerChannel => cols,
            Granularity::GroupWise => cols * self.n_groups(rows),
        }
    }

    #[inline]
    fn scale_at(&self, rows: usize, i: usize, j: usize) -> f32 {
        match self.granularity {
            Granularity::PerTensor => self.scales[0],
            Granularity::PerToken => self.scales[i],
            Granularity::PerChannel => self.scales[j],
            Granularity::GroupWise => self.scales[j * self.n_groups(rows) + i / self.group_size],
        }
    }
}

/// Integer tensor plus the parameters that produced it. Values stay within
/// the symmetric range for `params.bits`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    rows: usize,
    cols: usize,
    q: Vec<i8>,
    params: QuantParams,
}

impl QuantTensor {
    pub fn from_parts(rows: usize, cols: usize, q: Vec<i8>, params: QuantParams) -> Result<Self> {
        if q.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "q length {} != {}x{}",
                q.len(),
                rows,
                cols
            )));
        }
        if params.scales.len() != params.expected_scales(rows, cols) {
            return Err(Error::ShapeMismatch(format!(
                "{} scales for {:?} over {}x{} (expected {})",
                params.scales.len(),
                params.granularity,
                rows,
                cols,
                params.expected_scales(rows, cols)
            )));
        }
        let qmax = qmax_for(params.bits);
        if q.iter().any(|v| *v < -qmax || *v > qmax) {
            return Err(Error::InvalidArg(format!(
                "integer value outside [-{qmax}, {qmax}]"
            )));
        }
        Ok(Self { rows, cols, q, params })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn q(&self) -> &[i8] {
        &self.q
    }

    pub fn params(&self) -> &QuantParams {
        &self.params
    }
}

fn check_bits(bits: u8) -> Result<()> {
    if bits == 4 || bits == 8 {
        Ok(())
    } else {
        Err(Error::InvalidArg(format!("bits must be 4 or 8, got {bits}")))
    }
}

#[inline]
fn qmax_for(bits: u8) -> i8 {
    ((1i16 << (bits - 1)) - 1) as i8
}

/// scale = absmax / (2^(b-1) - 1), floored at [`MIN_SCALE`] for all-zero data.
pub fn compute_scale(absmax: f32, bits: u8) -> Result<f32> {
    check_bits(bits)?;
    if !(absmax >= 0.0) || !absmax.is_finite() {
        return Err(Error::InvalidArg(format!("absmax must be >= 0, got {absmax}")));
    }
    if absmax == 0.0 {
        return Ok(MIN_SCALE);
    }
    Ok(absmax / qmax_for(bits) as f32)
}

/// Quantize a single row with its own absmax scale. Shared by the per-token
/// path and the KV cache so both round identically.
pub(crate) fn quantize_row(row: &[f32], bits: u8) -> (Vec<i8>, f32) {
    let absmax = row.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let scale = if absmax == 0.0 {
        MIN_SCALE
    } else {
        absmax / qmax_for(bits) as f32
    };
    let qmax = qmax_for(bits) as f32;
    let q = row
        .iter()
        .map(|v| (v / scale).round().clamp(-qmax, qmax) as i8)
        .collect();
    (q, scale)
}

/// q[i,j] = clamp(round(x[i,j] / scale(i,j)), -(2^(b-1)-1), 2^(b-1)-1).
pub fn quantize(x: &Tensor2D, params: &QuantParams) -> Result<QuantTensor> {
    if x.is_empty() {
        return Err(Error::EmptyInput);
    }
    let expected = params.expected_scales(x.rows(), x.cols());
    if params.scales.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "{} scales for {:?} over {}x{} (expected {})",
            params.scales.len(),
            params.granularity,
            x.rows(),
            x.cols(),
            expected
        )));
    }
    let qmax = qmax_for(params.bits) as f32;
    let mut q = Vec::with_capacity(x.rows() * x.cols());
    for i in 0..x.rows() {
        for (j, &v) in x.row(i).iter().enumerate() {
            let s = params.scale_at(x.rows(), i, j);
            q.push((v / s).round().clamp(-qmax, qmax) as i8);
        }
    }
    Ok(QuantTensor {
        rows: x.rows(),
        cols: x.cols(),
        q,
        params: params.clone(),
    })
}

/// out[i,j] = q[i,j] * scale(i,j).
pub fn dequantize(qx: &QuantTensor) -> Tensor2D {
    let mut out = Tensor2D::zeros(qx.rows, qx.cols);
    for i in 0..qx.rows {
        let row = out.row_mut(i);
        for (j, o) in row.iter_mut().enumerate() {
            *o = qx.q[i * qx.cols + j] as f32 * qx.params.scale_at(qx.rows, i, j);
        }
    }
    out
}

/// Fine-grained weight quantization: for each output channel (column), the
/// input dimension is split into contiguous groups of `group_size` rows, each
/// with its own scale. The last group may be short.
pub fn quantize_weight_groupwise(w: &Tensor2D, bits: u8, group_size: usize) -> Result<QuantTensor> {
    check_bits(bits)?;
    if group_size == 0 {
        return Err(Error::InvalidArg("group_size must be >= 1".into()));
    }
    if w.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n_groups = w.rows().div_ceil(group_size);
    let mut scales = vec![0.0f32; w.cols() * n_groups];
    for j in 0..w.cols() {
        for g in 0..n_groups {
            let lo = g * group_size;
            let hi = (lo + group_size).min(w.rows());
            let mut absmax = 0.0f32;
            for i in lo..hi {
                absmax = absmax.max(w.get(i, j).abs());
            }
            scales[j * n_groups + g] = compute_scale(absmax, bits)?;
        }
    }
    let params = QuantParams::new(bits, Granularity::GroupWise, group_size, scales)?;
    quantize(w, &params)
}

/// Per output channel weight quantization (one scale per column).
pub fn quantize_weight_per_channel(w: &Tensor2D, bits: u8) -> Result<QuantTensor> {
    check_bits(bits)?;
    if w.is_empty() {
        return Err(Error::EmptyInput);
    }
    let scales = w
        .absmax_per_col()?
        .into_iter()
        .map(|m| compute_scale(m, bits))
        .collect::<Result<Vec<_>>>()?;
    let params = QuantParams::new(bits, Granularity::PerChannel, 0, scales)?;
    quantize(w, &params)
}

/// Dynamic activation quantization: one scale per row, computed at call time.
pub fn quantize_act_per_token(x: &Tensor2D, bits: u8) -> Result<QuantTensor> {
    check_bits(bits)?;
    if x.is_empty() {
        return Err(Error::EmptyInput);
    }
    let scales = x
        .absmax_per_row()?
        .into_iter()
        .map(|m| compute_scale(m, bits))
        .collect::<Result<Vec<_>>>()?;
    let params = QuantParams::new(bits, Granularity::PerToken, 0, scales)?;
    quantize(x, &params)
}

/// Static activation quantization: a single scale from a calibrated absmax.
/// Runtime values beyond the calibrated range saturate at the clamp.
pub fn quantize_act_per_tensor_static(x: &Tensor2D, calibrated_absmax: f32, bits: u8) -> Result<QuantTensor> {
    let scale = compute_scale(calibrated_absmax, bits)?;
    let params = QuantParams::new(bits, Granularity::PerTensor, 0, vec![scale])?;
    quantize(x, &params)
}

/// Activation-side policy for a fake-quant matrix multiply.
#[derive(Debug, Clone, PartialEq)]
pub enum ActQuantSpec {
    /// Pass activations through unquantized (16-bit-equivalent path).
    None,
    PerTensorStatic { absmax: f32, bits: u8 },
    PerToken { bits: u8 },
}

/// Weight operand for a fake-quant matrix multiply. `Fp` carries either a
/// genuinely unquantized weight or a cached dequantization of one.
#[derive(Debug, Clone, Copy)]
pub enum WeightOperand<'a> {
    Fp(&'a Tensor2D),
    Quantized(&'a QuantTensor),
}

/// Reference fake-quant semantics: dequantize(quantize(x)) . dequantize(w),
/// computed in f32. With `ActQuantSpec::None` and an `Fp` weight this is
/// bitwise identical to the plain matrix product.
pub fn fake_quant_matmul(x: &Tensor2D, act: &ActQuantSpec, w: WeightOperand<'_>) -> Result<Tensor2D> {
    let w_fp;
    let w_ref = match w {
        WeightOperand::Fp(t) => t,
        WeightOperand::Quantized(qt) => {
            w_fp = dequantize(qt);
            &w_fp
        }
    };
    match act {
        ActQuantSpec::None => x.matmul(w_ref),
        ActQuantSpec::PerTensorStatic { absmax, bits } => {
            let xq = quantize_act_per_tensor_static(x, *absmax, *bits)?;
            dequantize(&xq).matmul(w_ref)
        }
        ActQuantSpec::PerToken { bits } => {
            let xq = quantize_act_per_token(x, *bits)?;
            dequantize(&xq).matmul(w_ref)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn seeded(rows: usize, cols: usize, amp: f32, seed: u64) -> Tensor2D {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor2D::from_fn(rows, cols, |_, _| rng.random_range(-amp..amp)).unwrap()
    }

    fn mse(a: &Tensor2D, b: &Tensor2D) -> f64 {
        let n = a.data().len() as f64;
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| ((x - y) as f64).powi(2))
            .sum::<f64>()
            / n
    }

    #[test]
    fn compute_scale_known_values() {
        assert_eq!(compute_scale(127.0, 8).unwrap(), 1.0);
        assert_eq!(compute_scale(7.0, 4).unwrap(), 1.0);
        assert_eq!(compute_scale(0.0, 8).unwrap(), MIN_SCALE);
        assert!(compute_scale(-1.0, 8).is_err());
        assert!(compute_scale(1.0, 3).is_err());
    }

    #[test]
    fn quantize_hand_oracle_per_tensor() {
        // scale = 2/127; 0.5*127/2 = 31.75 -> 32; -63.5 -> -64 (half away from
        // zero); 2.0 -> 127.
        let x = Tensor2D::new(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let scale = compute_scale(2.0, 8).unwrap();
        let params = QuantParams::new(8, Granularity::PerTensor, 0, vec![scale]).unwrap();
        let q = quantize(&x, &params).unwrap();
        assert_eq!(q.q(), &[32, -64, 127]);
    }

    #[test]
    fn quantize_lattice_points_exact() {
        let scale = 0.25f32;
        let x = Tensor2D::new(1, 5, vec![-3.0 * scale, -scale, 0.0, 2.0 * scale, 7.0 * scale]).unwrap();
        let params = QuantParams::new(4, Granularity::PerTensor, 0, vec![scale]).unwrap();
        let q = quantize(&x, &params).unwrap();
        assert_eq!(q.q(), &[-3, -1, 0, 2, 7]);
        let back = dequantize(&q);
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn quantize_groupwise_matches_scalar_loop_oracle() {
        let x = seeded(32, 32, 6.0, 11);
        let q = quantize_weight_groupwise(&x, 4, 8).unwrap();
        let n_groups = 32usize.div_ceil(8);
        for j in 0..32 {
            for g in 0..n_groups {
                let lo = g * 8;
                let hi = (lo + 8).min(32);
                let mut absmax = 0.0f32;
                for i in lo..hi {
                    absmax = absmax.max(x.get(i, j).abs());
                }
                let scale = if absmax == 0.0 { MIN_SCALE } else { absmax / 7.0 };
                assert_eq!(q.params().scales[j * n_groups + g], scale);
                for i in lo..hi {
                    let expect = (x.get(i, j) / scale).round().clamp(-7.0, 7.0) as i8;
                    assert_eq!(q.q()[i * 32 + j], expect, "mismatch at ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn groupwise_scale_counts_and_degenerate_group() {
        let w = seeded(256, 4, 1.0, 3);
        let q = quantize_weight_groupwise(&w, 4, 128).unwrap();
        assert_eq!(q.params().scales.len(), 4 * 2);

        // group_size >= rows degenerates to per-channel
        let q_one = quantize_weight_groupwise(&w, 4, 512).unwrap();
        let q_pc = quantize_weight_per_channel(&w, 4).unwrap();
        assert_eq!(q_one.q(), q_pc.q());
        assert_eq!(q_one.params().scales, q_pc.params().scales);

        assert!(quantize_weight_groupwise(&w, 4, 0).is_err());
    }

    #[test]
    fn groupwise_mse_not_worse_than_per_channel() {
        let mut w = seeded(64, 16, 1.0, 21);
        // amplify a few rows so group scales genuinely differ
        for i in 0..4 {
            for v in w.row_mut(i) {
                *v *= 40.0;
            }
        }
        let grouped = dequantize(&quantize_weight_groupwise(&w, 4, 16).unwrap());
        let per_channel = dequantize(&quantize_weight_per_channel(&w, 4).unwrap());
        assert!(mse(&w, &grouped) <= mse(&w, &per_channel));
    }

    #[test]
    fn per_token_basics() {
        let x = Tensor2D::new(2, 2, vec![1.0, -1.0, 100.0, 50.0]).unwrap();
        let q = quantize_act_per_token(&x, 8).unwrap();
        assert_eq!(q.params().scales, vec![1.0 / 127.0, 100.0 / 127.0]);

        // single token: identical to per-tensor quantization
        let one = Tensor2D::new(1, 4, vec![0.3, -2.0, 1.1, 0.0]).unwrap();
        let qt = quantize_act_per_token(&one, 8).unwrap();
        let scale = compute_scale(one.absmax().unwrap(), 8).unwrap();
        let params = QuantParams::new(8, Granularity::PerTensor, 0, vec![scale]).unwrap();
        let qp = quantize(&one, &params).unwrap();
        assert_eq!(qt.q(), qp.q());
    }

    #[test]
    fn per_token_mse_not_worse_than_per_tensor_on_outlier_rows() {
        let mut x = seeded(32, 16, 1.0, 17);
        for v in x.row_mut(0) {
            *v *= 100.0;
        }
        let per_token = dequantize(&quantize_act_per_token(&x, 8).unwrap());
        let scale = compute_scale(x.absmax().unwrap(), 8).unwrap();
        let params = QuantParams::new(8, Granularity::PerTensor, 0, vec![scale]).unwrap();
        let per_tensor = dequantize(&quantize(&x, &params).unwrap());
        assert!(mse(&x, &per_token) <= mse(&x, &per_tensor));
    }

    #[test]
    fn static_saturates_beyond_calibrated_range() {
        let x = Tensor2D::new(1, 2, vec![2.0, -2.0]).unwrap();
        let q = quantize_act_per_tensor_static(&x, 1.0, 8).unwrap();
        assert_eq!(q.q(), &[127, -127]);

        // in-range round-trip bound
        let y = seeded(8, 8, 0.9, 5);
        let qy = quantize_act_per_tensor_static(&y, 1.0, 8).unwrap();
        let back = dequantize(&qy);
        let scale = 1.0 / 127.0;
        for (a, b) in y.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= scale / 2.0 + 1e-7);
        }
    }

    #[test]
    fn static_with_disjoint_calibration_matches_scalar_oracle() {
        let calib = seeded(16, 8, 3.0, 100);
        let x = seeded(16, 8, 3.0, 200);
        let absmax = calib.absmax().unwrap();
        let q = quantize_act_per_tensor_static(&x, absmax, 8).unwrap();
        let scale = absmax / 127.0;
        for i in 0..16 {
            for j in 0..8 {
                let expect = (x.get(i, j) / scale).round().clamp(-127.0, 127.0) as i8;
                assert_eq!(q.q()[i * 8 + j], expect);
            }
        }
    }

    #[test]
    fn fake_quant_matmul_passthrough_is_bitwise_fp() {
        let x = seeded(8, 16, 2.0, 42);
        let w = seeded(16, 8, 0.5, 43);
        let fp = x.matmul(&w).unwrap();
        let fq = fake_quant_matmul(&x, &ActQuantSpec::None, WeightOperand::Fp(&w)).unwrap();
        assert_eq!(fp.data(), fq.data());
    }

    #[test]
    fn fake_quant_matmul_lattice_identity_weights() {
        // activations on the int lattice with scale 1, identity weights
        let x = Tensor2D::from_fn(4, 4, |r, c| ((r * 4 + c) as f32) - 8.0).unwrap();
        let eye = Tensor2D::from_fn(4, 4, |r, c| if r == c { 1.0 } else { 0.0 }).unwrap();
        let wq = quantize_weight_per_channel(&eye, 8).unwrap();
        let out = fake_quant_matmul(
            &x,
            &ActQuantSpec::PerTensorStatic { absmax: 127.0, bits: 8 },
            WeightOperand::Quantized(&wq),
        )
        .unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn fake_quant_matmul_matches_integer_gemm_oracle() {
        // int32-accumulating oracle over per-token activations and group-wise
        // weights, independent of the f32 fake-quant path
        for seed in 0..20u64 {
            let x = seeded(8, 8, 5.0, 1000 + seed);
            let w = seeded(8, 8, 1.0, 2000 + seed);
            let wq = quantize_weight_groupwise(&w, 4, 4).unwrap();
            let got = fake_quant_matmul(&x, &ActQuantSpec::PerToken { bits: 8 }, WeightOperand::Quantized(&wq)).unwrap();

            let xq = quantize_act_per_token(&x, 8).unwrap();
            let n_groups = 2usize;
            for i in 0..8 {
                for j in 0..8 {
                    let mut total = 0.0f64;
                    for g in 0..n_groups {
                        let mut acc: i32 = 0;
                        for k in g * 4..(g + 1) * 4 {
                            acc += xq.q()[i * 8 + k] as i32 * wq.q()[k * 8 + j] as i32;
                        }
                        total += acc as f64
                            * xq.params().scales[i] as f64
                            * wq.params().scales[j * n_groups + g] as f64;
                    }
                    let diff = (got.get(i, j) as f64 - total).abs();
                    assert!(
                        diff <= 1e-4 * total.abs().max(1e-3),
                        "seed {seed} ({i},{j}): fq {} vs oracle {total}",
                        got.get(i, j)
                    );
                }
            }
        }
    }

    #[test]
    fn scale_shape_mismatch_rejected() {
        let x = seeded(4, 4, 1.0, 1);
        let params = QuantParams::new(8, Granularity::PerToken, 0, vec![1.0; 3]).unwrap();
        assert!(matches!(quantize(&x, &params), Err(Error::ShapeMismatch(_))));
    }

    use crate::error::Error;

    proptest! {
        #[test]
        fn round_trip_bound_all_granularities(seed in 0u64..200, bits in prop::sample::select(vec![4u8, 8u8])) {
            let x = seeded(12, 16, 30.0, seed);
            let qmax = ((1i16 << (bits - 1)) - 1) as f32;

            let per_tensor = QuantParams::new(bits, Granularity::PerTensor, 0,
                vec![compute_scale(x.absmax().unwrap(), bits).unwrap()]).unwrap();
            let per_token = QuantParams::new(bits, Granularity::PerToken, 0,
                x.absmax_per_row().unwrap().into_iter().map(|m| compute_scale(m, bits).unwrap()).collect()).unwrap();
            let per_channel = QuantParams::new(bits, Granularity::PerChannel, 0,
                x.absmax_per_col().unwrap().into_iter().map(|m| compute_scale(m, bits).unwrap()).collect()).unwrap();

            for params in [per_tensor, per_token, per_channel] {
                let q = quantize(&x, &params).unwrap();
                let back = dequantize(&q);
                for i in 0..x.rows() {
                    for j in 0..x.cols() {
                        let s = params.scales[match params.granularity {
                            Granularity::PerTensor => 0,
                            Granularity::PerToken => i,
                            Granularity::PerChannel => j,
                            Granularity::GroupWise => unreachable!(),
                        }];
                        prop_assert!((x.get(i, j) - back.get(i, j)).abs() <= s / 2.0 + 1e-6);
                    }
                }
                // every scale positive, every q in range
                prop_assert!(params.scales.iter().all(|s| *s > 0.0));
                prop_assert!(q.q().iter().all(|v| (*v as f32).abs() <= qmax));
            }

            let gq = quantize_weight_groupwise(&x, bits, 5).unwrap();
            let back = dequantize(&gq);
            let n_groups = x.rows().div_ceil(5);
            for i in 0..x.rows() {
                for j in 0..x.cols() {
                    let s = gq.params().scales[j * n_groups + i / 5];
                    prop_assert!((x.get(i, j) - back.get(i, j)).abs() <= s / 2.0 + 1e-6);
                }
            }
        }

        #[test]
        fn sign_symmetry(seed in 0u64..200) {
            let x = seeded(6, 6, 10.0, seed);
            let neg = Tensor2D::from_fn(6, 6, |r, c| -x.get(r, c)).unwrap();
            let scale = compute_scale(x.absmax().unwrap(), 8).unwrap();
            let params = QuantParams::new(8, Granularity::PerTensor, 0, vec![scale]).unwrap();
            let qp = quantize(&x, &params).unwrap();
            let qn = quantize(&neg, &params).unwrap();
            for (a, b) in qp.q().iter().zip(qn.q()) {
                prop_assert_eq!(*a, -*b);
            }
        }

        #[test]
        fn granularity_refinement_scales(seed in 0u64..200) {
            let x = seeded(16, 8, 25.0, seed);
            // per-token scales never exceed the per-tensor scale
            let st = compute_scale(x.absmax().unwrap(), 8).unwrap();
            for m in x.absmax_per_row().unwrap() {
                prop_assert!(compute_scale(m, 8).unwrap() <= st);
            }
            // group-wise scales never exceed their channel's scale
            let gq = quantize_weight_groupwise(&x, 4, 4).unwrap();
            let pc = quantize_weight_per_channel(&x, 4).unwrap();
            let n_groups = 4usize;
            for j in 0..8 {
                for g in 0..n_groups {
                    prop_assert!(gq.params().scales[j * n_groups + g] <= pc.params().scales[j]);
                }
            }
        }
    }
}
