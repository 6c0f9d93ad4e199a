//! Dense row-major f32 matrices and the calibration statistics built on them.
//!
//! Activations are laid out tokens x channels, weights input-channels x
//! output-channels. All statistics are absolute maxima; the quantizer scales
//! downstream are all max-based.

use crate::error::{Error, Result};

/// Dense row-major matrix of f32. Constructors reject NaN/Inf so every value
/// reachable through a `Tensor2D` is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Tensor2D {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "data length {} != {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(idx));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from a closure over (row, col). The result is validated.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access for internal builders. Callers must keep values finite;
    /// boundary constructors re-validate anything that crosses the crate API.
    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub(crate) fn row_mut(&mut self, r: usize) -> &mut [f32] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    /// Max over |x[i,j]| of the whole tensor.
    pub fn absmax(&self) -> Result<f32> {
        if self.is_empty() {
            return Err(Error::EmptyInput);
        }
        Ok(self.data.iter().fold(0.0f32, |m, v| m.max(v.abs())))
    }

    /// Per-row absolute maxima (one scale per token in activation layout).
    pub fn absmax_per_row(&self) -> Result<Vec<f32>> {
        if self.is_empty() {
            return Err(Error::EmptyInput);
        }
        Ok((0..self.rows)
            .map(|r| self.row(r).iter().fold(0.0f32, |m, v| m.max(v.abs())))
            .collect())
    }

    /// Per-column absolute maxima (channel-wise maxima in activation layout).
    pub fn absmax_per_col(&self) -> Result<Vec<f32>> {
        if self.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut maxima = vec![0.0f32; self.cols];
        for r in 0..self.rows {
            for (m, v) in maxima.iter_mut().zip(self.row(r)) {
                *m = m.max(v.abs());
            }
        }
        Ok(maxima)
    }

    /// Matrix product in f32, row-parallel for larger shapes. Each output row
    /// is accumulated independently in a fixed order, so results are
    /// bit-identical across runs and thread counts.
    pub fn matmul(&self, rhs: &Tensor2D) -> Result<Tensor2D> {
        if self.cols != rhs.rows {
            return Err(Error::ShapeMismatch(format!(
                "matmul {}x{} . {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        if self.is_empty() || rhs.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut out = vec![0.0f32; self.rows * rhs.cols];
        let run_row = |r: usize, out_row: &mut [f32]| {
            let a_row = self.row(r);
            for (k, &a) in a_row.iter().enumerate() {
                let b_row = rhs.row(k);
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        };
        // Parallelize only when there is enough work per row to amortize.
        if self.rows >= 4 && self.cols * rhs.cols >= 16_384 {
            use rayon::prelude::*;
            out.par_chunks_mut(rhs.cols)
                .enumerate()
                .for_each(|(r, out_row)| run_row(r, out_row));
        } else {
            for (r, out_row) in out.chunks_mut(rhs.cols).enumerate() {
                run_row(r, out_row);
            }
        }
        Ok(Tensor2D {
            rows: self.rows,
            cols: rhs.cols,
            data: out,
        })
    }
}

/// Per-layer-input calibration record: channel absolute maxima, the tensor
/// maximum, and how many token rows contributed.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStats {
    pub layer_id: String,
    pub channel_absmax: Vec<f32>,
    pub tensor_absmax: f32,
    pub sample_count: u64,
}

impl ActivationStats {
    /// Stats of a single activation batch (rows = tokens, cols = channels).
    pub fn from_batch(layer_id: impl Into<String>, x: &Tensor2D) -> Result<Self> {
        let channel_absmax = x.absmax_per_col()?;
        let tensor_absmax = channel_absmax.iter().fold(0.0f32, |m, v| m.max(*v));
        Ok(Self {
            layer_id: layer_id.into(),
            channel_absmax,
            tensor_absmax,
            sample_count: x.rows() as u64,
        })
    }

    pub fn from_parts(layer_id: impl Into<String>, channel_absmax: Vec<f32>, sample_count: u64) -> Result<Self> {
        if channel_absmax.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(idx) = channel_absmax.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NonFinite(idx));
        }
        let tensor_absmax = channel_absmax.iter().fold(0.0f32, |m, v| m.max(*v));
        Ok(Self {
            layer_id: layer_id.into(),
            channel_absmax,
            tensor_absmax,
            sample_count,
        })
    }

    pub fn channels(&self) -> usize {
        self.channel_absmax.len()
    }

    /// Element-wise max of channel maxima; sample counts add. Associative and
    /// commutative (max is exact in f32), so parallel reduction order does not
    /// matter.
    pub fn merge(&self, other: &ActivationStats) -> Result<ActivationStats> {
        if self.layer_id != other.layer_id {
            return Err(Error::StatsMismatch(format!(
                "layer id {:?} vs {:?}",
                self.layer_id, other.layer_id
            )));
        }
        if self.channels() != other.channels() {
            return Err(Error::StatsMismatch(format!(
                "channel count {} vs {} for layer {:?}",
                self.channels(),
                other.channels(),
                self.layer_id
            )));
        }
        let channel_absmax: Vec<f32> = self
            .channel_absmax
            .iter()
            .zip(&other.channel_absmax)
            .map(|(a, b)| a.max(*b))
            .collect();
        let tensor_absmax = channel_absmax.iter().fold(0.0f32, |m, v| m.max(*v));
        Ok(ActivationStats {
            layer_id: self.layer_id.clone(),
            channel_absmax,
            tensor_absmax,
            sample_count: self.sample_count + other.sample_count,
        })
    }

    /// Usable quantization levels per channel: 2^bits * m_i / m. Channels far
    /// below the tensor maximum end up with only a handful of levels, which is
    /// exactly the outlier problem the equalizer addresses.
    pub fn effective_bits(&self, bits: u8) -> Result<Vec<f64>> {
        if self.tensor_absmax == 0.0 {
            return Err(Error::DegenerateStats);
        }
        let levels = (1u64 << bits) as f64;
        Ok(self
            .channel_absmax
            .iter()
            .map(|m| levels * (*m as f64) / (self.tensor_absmax as f64))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn t(rows: usize, cols: usize, v: &[f32]) -> Tensor2D {
        Tensor2D::new(rows, cols, v.to_vec()).unwrap()
    }

    fn seeded_uniform(rows: usize, cols: usize, lo: f32, hi: f32, seed: u64) -> Tensor2D {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor2D::from_fn(rows, cols, |_, _| rng.random_range(lo..hi)).unwrap()
    }

    #[test]
    fn constructor_rejects_bad_shapes_and_nonfinite() {
        assert!(matches!(
            Tensor2D::new(2, 2, vec![1.0; 3]),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            Tensor2D::new(1, 2, vec![1.0, f32::NAN]),
            Err(Error::NonFinite(1))
        ));
        assert!(matches!(
            Tensor2D::new(1, 2, vec![f32::INFINITY, 0.0]),
            Err(Error::NonFinite(0))
        ));
    }

    #[test]
    fn absmax_per_tensor_basic() {
        assert_eq!(t(2, 2, &[1.0, -3.0, 2.0, 0.0]).absmax().unwrap(), 3.0);
        assert_eq!(t(1, 2, &[0.0, 0.0]).absmax().unwrap(), 0.0);
        assert!(matches!(Tensor2D::zeros(0, 4).absmax(), Err(Error::EmptyInput)));
    }

    #[test]
    fn absmax_per_tensor_matches_scalar_loop_oracle() {
        let x = seeded_uniform(64, 64, -5.0, 5.0, 42);
        // independent scalar scan
        let mut expect = 0.0f32;
        for r in 0..64 {
            for c in 0..64 {
                let a = x.get(r, c).abs();
                if a > expect {
                    expect = a;
                }
            }
        }
        assert_eq!(x.absmax().unwrap(), expect);
    }

    #[test]
    fn absmax_per_row_basic_and_oracle() {
        assert_eq!(t(2, 2, &[1.0, -3.0, 2.0, 0.0]).absmax_per_row().unwrap(), vec![3.0, 2.0]);
        assert_eq!(t(1, 1, &[-7.0]).absmax_per_row().unwrap(), vec![7.0]);
        let x = seeded_uniform(16, 8, -9.0, 9.0, 7);
        let got = x.absmax_per_row().unwrap();
        for r in 0..16 {
            let mut expect = 0.0f32;
            for c in 0..8 {
                expect = expect.max(x.get(r, c).abs());
            }
            assert_eq!(got[r], expect);
        }
    }

    #[test]
    fn absmax_per_col_basic_and_oracle() {
        assert_eq!(t(2, 2, &[1.0, -3.0, 2.0, 0.0]).absmax_per_col().unwrap(), vec![2.0, 3.0]);
        let fives = Tensor2D::from_fn(3, 4, |_, _| 5.0).unwrap();
        assert_eq!(fives.absmax_per_col().unwrap(), vec![5.0; 4]);
        let x = seeded_uniform(16, 8, -9.0, 9.0, 8);
        let got = x.absmax_per_col().unwrap();
        for c in 0..8 {
            let mut expect = 0.0f32;
            for r in 0..16 {
                expect = expect.max(x.get(r, c).abs());
            }
            assert_eq!(got[c], expect);
        }
    }

    #[test]
    fn merge_stats_basic() {
        let a = ActivationStats::from_parts("l", vec![1.0, 5.0], 2).unwrap();
        let b = ActivationStats::from_parts("l", vec![3.0, 2.0], 1).unwrap();
        let m = a.merge(&b).unwrap();
        assert_eq!(m.channel_absmax, vec![3.0, 5.0]);
        assert_eq!(m.tensor_absmax, 5.0);
        assert_eq!(m.sample_count, 3);

        let mm = a.merge(&a).unwrap();
        assert_eq!(mm.channel_absmax, a.channel_absmax);
        assert_eq!(mm.sample_count, 4);
    }

    #[test]
    fn merge_stats_rejects_mismatches() {
        let a = ActivationStats::from_parts("a", vec![1.0], 1).unwrap();
        let b = ActivationStats::from_parts("b", vec![1.0], 1).unwrap();
        assert!(matches!(a.merge(&b), Err(Error::StatsMismatch(_))));
        let c = ActivationStats::from_parts("a", vec![1.0, 2.0], 1).unwrap();
        assert!(matches!(a.merge(&c), Err(Error::StatsMismatch(_))));
    }

    #[test]
    fn merge_fold_of_single_rows_equals_one_pass() {
        // 512 single-token stats folded together vs one pass over the batch.
        let x = seeded_uniform(512, 16, -20.0, 20.0, 99);
        let mut folded: Option<ActivationStats> = None;
        for r in 0..x.rows() {
            let row = Tensor2D::new(1, x.cols(), x.row(r).to_vec()).unwrap();
            let s = ActivationStats::from_batch("l", &row).unwrap();
            folded = Some(match folded {
                None => s,
                Some(acc) => acc.merge(&s).unwrap(),
            });
        }
        let folded = folded.unwrap();
        let one_pass = ActivationStats::from_batch("l", &x).unwrap();
        assert_eq!(folded, one_pass);
    }

    #[test]
    fn effective_bits_paper_values() {
        let s = ActivationStats::from_parts("l", vec![1.0, 100.0], 1).unwrap();
        let eb = s.effective_bits(8).unwrap();
        assert!((eb[0] - 2.56).abs() < 1e-9);
        assert!((eb[1] - 256.0).abs() < 1e-9);

        let flat = ActivationStats::from_parts("l", vec![3.0; 5], 1).unwrap();
        for v in flat.effective_bits(8).unwrap() {
            assert_eq!(v, 256.0);
        }

        let dead = ActivationStats::from_parts("l", vec![0.0, 0.0], 1).unwrap();
        assert!(matches!(dead.effective_bits(8), Err(Error::DegenerateStats)));
    }

    #[test]
    fn effective_bits_matches_formula_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let maxima: Vec<f32> = (0..32).map(|_| rng.random_range(0.0..500.0f32)).collect();
        let s = ActivationStats::from_parts("l", maxima.clone(), 1).unwrap();
        let m = s.tensor_absmax as f64;
        for (got, mi) in s.effective_bits(4).unwrap().iter().zip(&maxima) {
            let expect = 16.0 * (*mi as f64) / m;
            assert!((got - expect).abs() <= 1e-12 * expect.max(1.0));
        }
    }

    #[test]
    fn matmul_small_known() {
        let a = t(1, 2, &[2.0, 4.0]);
        let b = t(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[6.0, 6.0]);
        assert!(matches!(a.matmul(&t(1, 1, &[1.0])), Err(Error::ShapeMismatch(_))));
    }

    proptest! {
        #[test]
        fn absmax_variants_agree(rows in 1usize..12, cols in 1usize..12, seed in 0u64..500) {
            let x = seeded_uniform(rows, cols, -100.0, 100.0, seed);
            let per_tensor = x.absmax().unwrap();
            let by_row = x.absmax_per_row().unwrap().into_iter().fold(0.0f32, f32::max);
            let by_col = x.absmax_per_col().unwrap().into_iter().fold(0.0f32, f32::max);
            prop_assert_eq!(per_tensor, by_row);
            prop_assert_eq!(per_tensor, by_col);
        }

        #[test]
        fn stats_invariant_under_row_permutation(rows in 2usize..10, cols in 1usize..8, seed in 0u64..500) {
            let x = seeded_uniform(rows, cols, -50.0, 50.0, seed);
            let mut order: Vec<usize> = (0..rows).collect();
            order.reverse();
            let permuted = Tensor2D::from_fn(rows, cols, |r, c| x.get(order[r], c)).unwrap();
            prop_assert_eq!(x.absmax().unwrap(), permuted.absmax().unwrap());
            prop_assert_eq!(x.absmax_per_col().unwrap(), permuted.absmax_per_col().unwrap());
            let rows_orig = x.absmax_per_row().unwrap();
            let rows_perm = permuted.absmax_per_row().unwrap();
            for r in 0..rows {
                prop_assert_eq!(rows_orig[order[r]], rows_perm[r]);
            }
        }

        #[test]
        fn merge_is_associative_and_commutative(seed in 0u64..500) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
                let v: Vec<f32> = (0..6).map(|_| rng.random_range(0.0..10.0f32)).collect();
                ActivationStats::from_parts("l", v, rng.random_range(1..100u64)).unwrap()
            };
            let (a, b, c) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
            let ab_c = a.merge(&b).unwrap().merge(&c).unwrap();
            let a_bc = a.merge(&b.merge(&c).unwrap()).unwrap();
            prop_assert_eq!(&ab_c, &a_bc);
            prop_assert_eq!(a.merge(&b).unwrap(), b.merge(&a).unwrap());
        }
    }
}
