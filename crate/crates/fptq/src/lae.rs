//! Logarithmic activation equalization.
//!
//! Per-channel scales s_i = m_i / (log2(2 + m_i))^alpha divide the activation
//! and multiply into the consumer weight rows, so X' W' == X W exactly. The
//! shift of 2 keeps the log term >= 1; after division every channel maximum
//! collapses to (log2(2 + m_i))^alpha, which grows only logarithmically while
//! inliers are touched gently. Scales depend on activation statistics alone;
//! weights never enter.

use crate::error::{Error, Result};
use crate::tensor::{ActivationStats, Tensor2D};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaeConfig {
    /// Suppression exponent alpha; 1.0 for most models.
    pub alpha: f64,
}

impl Default for LaeConfig {
    fn default() -> Self {
        Self { alpha: 1.0 }
    }
}

impl LaeConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidArg(format!("alpha must be > 0, got {alpha}")));
        }
        Ok(Self { alpha })
    }
}

/// Per-channel equalization scales for one layer input (shared by sibling
/// layers that consume the same normalization output).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaeScales {
    pub layer_id: String,
    pub s: Vec<f32>,
}

impl LaeScales {
    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }
}

/// s_i = m_i / (log2(2 + m_i))^alpha. Dead channels (m_i == 0) get s_i = 1 so
/// application stays a no-op there; the raw formula would yield zero and
/// divide by zero at apply time.
pub fn compute_lae_scales(stats: &ActivationStats, cfg: &LaeConfig) -> LaeScales {
    let s = stats
        .channel_absmax
        .iter()
        .map(|&m| {
            if m == 0.0 {
                1.0
            } else {
                let m = m as f64;
                (m / (2.0 + m).log2().powf(cfg.alpha)) as f32
            }
        })
        .collect();
    LaeScales {
        layer_id: stats.layer_id.clone(),
        s,
    }
}

/// Channel maximum after division by its LAE scale: (log2(2 + m))^alpha for
/// m > 0, and 0 for a dead channel (which keeps s = 1).
pub fn equalized_channel_max(m: f64, alpha: f64) -> f64 {
    if m == 0.0 {
        0.0
    } else {
        (2.0 + m).log2().powf(alpha)
    }
}

/// X' = X diag(s)^-1, W' = diag(s) W. Mathematically X' W' == X W; in f32 the
/// deviation is rounding noise only.
pub fn apply_equalization(x: &Tensor2D, w: &Tensor2D, scales: &LaeScales) -> Result<(Tensor2D, Tensor2D)> {
    if scales.len() != x.cols() || scales.len() != w.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} scales vs X cols {} / W rows {}",
            scales.len(),
            x.cols(),
            w.rows()
        )));
    }
    let x_eq = Tensor2D::from_fn(x.rows(), x.cols(), |r, c| x.get(r, c) / scales.s[c])?;
    let w_eq = Tensor2D::from_fn(w.rows(), w.cols(), |r, c| scales.s[r] * w.get(r, c))?;
    Ok((x_eq, w_eq))
}

/// Fold the activation-side division into the preceding normalization's gain
/// (and bias, when the norm has one). Normalization statistics come from the
/// pre-gain input, so the fused block is exactly equivalent.
pub fn fuse_scales_into_norm(
    norm_gain: &[f32],
    norm_bias: Option<&[f32]>,
    scales: &LaeScales,
) -> Result<(Vec<f32>, Option<Vec<f32>>)> {
    if norm_gain.len() != scales.len() {
        return Err(Error::ShapeMismatch(format!(
            "gain length {} vs {} scales",
            norm_gain.len(),
            scales.len()
        )));
    }
    if let Some(b) = norm_bias {
        if b.len() != scales.len() {
            return Err(Error::ShapeMismatch(format!(
                "bias length {} vs {} scales",
                b.len(),
                scales.len()
            )));
        }
    }
    let gain = norm_gain
        .iter()
        .zip(&scales.s)
        .map(|(g, s)| g / s)
        .collect();
    let bias = norm_bias.map(|b| b.iter().zip(&scales.s).map(|(v, s)| v / s).collect());
    Ok((gain, bias))
}

/// One scale vector for sibling layers fed by the same normalization: take
/// the element-wise max of the siblings' channel maxima first, then compute
/// scales. Using the max guarantees no sibling's equalized range exceeds its
/// own target.
pub fn shared_scales_for_siblings(stats_list: &[&ActivationStats], cfg: &LaeConfig) -> Result<LaeScales> {
    let first = stats_list.first().ok_or(Error::EmptyInput)?;
    let mut combined = first.channel_absmax.clone();
    let mut ids = vec![first.layer_id.as_str()];
    for stats in &stats_list[1..] {
        if stats.channels() != combined.len() {
            return Err(Error::StatsMismatch(format!(
                "sibling channel count {} vs {}",
                stats.channels(),
                combined.len()
            )));
        }
        for (acc, m) in combined.iter_mut().zip(&stats.channel_absmax) {
            *acc = acc.max(*m);
        }
        ids.push(stats.layer_id.as_str());
    }
    let merged = ActivationStats::from_parts(ids.join("+"), combined, 0)?;
    Ok(compute_lae_scales(&merged, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn stats(maxima: &[f32]) -> ActivationStats {
        ActivationStats::from_parts("l", maxima.to_vec(), 1).unwrap()
    }

    #[test]
    fn scales_known_values() {
        let cfg = LaeConfig::default();
        let s = compute_lae_scales(&stats(&[2.0, 14.0, 1022.0]), &cfg);
        assert!((s.s[0] - 1.0).abs() < 1e-6); // 2/log2(4)
        assert!((s.s[1] - 3.5).abs() < 1e-6); // 14/log2(16)
        assert!((s.s[2] - 102.2).abs() < 1e-3); // 1022/log2(1024)

        let cfg2 = LaeConfig::new(2.0).unwrap();
        let s2 = compute_lae_scales(&stats(&[14.0]), &cfg2);
        assert!((s2.s[0] - 0.875).abs() < 1e-6); // 14/16
    }

    #[test]
    fn dead_channel_gets_unit_scale() {
        let s = compute_lae_scales(&stats(&[0.0, 4.0]), &LaeConfig::default());
        assert_eq!(s.s[0], 1.0);
    }

    #[test]
    fn equalized_max_known_values() {
        assert!((equalized_channel_max(1022.0, 1.0) - 10.0).abs() < 1e-12);
        assert!((equalized_channel_max(2.0, 1.0) - 2.0).abs() < 1e-12);
        assert_eq!(equalized_channel_max(0.0, 1.0), 0.0);
    }

    #[test]
    fn apply_equalization_hand_case() {
        let x = Tensor2D::new(1, 2, vec![2.0, 4.0]).unwrap();
        let w = Tensor2D::new(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let s = LaeScales { layer_id: "l".into(), s: vec![2.0, 4.0] };
        let (xe, we) = apply_equalization(&x, &w, &s).unwrap();
        assert_eq!(xe.data(), &[1.0, 1.0]);
        assert_eq!(we.data(), &[2.0, 2.0, 4.0, 4.0]);
        assert_eq!(xe.matmul(&we).unwrap().data(), &[6.0, 6.0]);
        assert_eq!(x.matmul(&w).unwrap().data(), &[6.0, 6.0]);
    }

    #[test]
    fn apply_equalization_unit_scales_identity() {
        let x = Tensor2D::new(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.5]).unwrap();
        let w = Tensor2D::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let s = LaeScales { layer_id: "l".into(), s: vec![1.0; 3] };
        let (xe, we) = apply_equalization(&x, &w, &s).unwrap();
        assert_eq!(xe.data(), x.data());
        assert_eq!(we.data(), w.data());
    }

    #[test]
    fn apply_equalization_dimension_mismatch() {
        let x = Tensor2D::zeros(1, 3);
        let w = Tensor2D::zeros(3, 2);
        let s = LaeScales { layer_id: "l".into(), s: vec![1.0, 2.0] };
        assert!(apply_equalization(&x, &w, &s).is_err());
    }

    #[test]
    fn exactness_seeded_case() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let maxima: Vec<f32> = (0..8).map(|_| rng.random_range(0.5..800.0f32)).collect();
        let x = Tensor2D::from_fn(16, 8, |_, c| rng.random_range(-1.0..1.0f32) * maxima[c]).unwrap();
        let w = Tensor2D::from_fn(8, 4, |_, _| rng.random_range(-1.0..1.0f32)).unwrap();
        let s = compute_lae_scales(&ActivationStats::from_parts("l", maxima, 1).unwrap(), &LaeConfig::default());
        let (xe, we) = apply_equalization(&x, &w, &s).unwrap();
        let reference = x.matmul(&w).unwrap();
        let equalized = xe.matmul(&we).unwrap();
        let ref_max = reference.absmax().unwrap() as f64;
        for (a, b) in reference.data().iter().zip(equalized.data()) {
            assert!(((a - b).abs() as f64) <= 1e-5 * ref_max);
        }
    }

    #[test]
    fn fuse_into_norm_known_and_identity() {
        let s = LaeScales { layer_id: "l".into(), s: vec![2.0, 4.0] };
        let (gain, bias) = fuse_scales_into_norm(&[1.0, 1.0], None, &s).unwrap();
        assert_eq!(gain, vec![0.5, 0.25]);
        assert!(bias.is_none());

        let (gain, bias) = fuse_scales_into_norm(&[1.0, 2.0], Some(&[4.0, 8.0]), &s).unwrap();
        assert_eq!(gain, vec![0.5, 0.5]);
        assert_eq!(bias.unwrap(), vec![2.0, 2.0]);

        let ones = LaeScales { layer_id: "l".into(), s: vec![1.0, 1.0] };
        let (gain, _) = fuse_scales_into_norm(&[0.7, -0.2], None, &ones).unwrap();
        assert_eq!(gain, vec![0.7, -0.2]);

        assert!(fuse_scales_into_norm(&[1.0], None, &s).is_err());
        assert!(fuse_scales_into_norm(&[1.0, 1.0], Some(&[1.0]), &s).is_err());
    }

    #[test]
    fn sibling_sharing_combined_maxima() {
        let a = stats(&[14.0, 2.0]);
        let b = stats(&[2.0, 14.0]);
        let s = shared_scales_for_siblings(&[&a, &b], &LaeConfig::default()).unwrap();
        assert!((s.s[0] - 3.5).abs() < 1e-6);
        assert!((s.s[1] - 3.5).abs() < 1e-6);

        // single sibling degenerates to compute_lae_scales
        let solo = shared_scales_for_siblings(&[&a], &LaeConfig::default()).unwrap();
        assert_eq!(solo.s, compute_lae_scales(&a, &LaeConfig::default()).s);
    }

    #[test]
    fn sibling_sharing_equals_merge_then_compute() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
            let v: Vec<f32> = (0..16).map(|_| rng.random_range(0.0..300.0f32)).collect();
            ActivationStats::from_parts("l", v, 4).unwrap()
        };
        let (a, b, c) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let shared = shared_scales_for_siblings(&[&a, &b, &c], &LaeConfig::default()).unwrap();
        let merged = a.merge(&b).unwrap().merge(&c).unwrap();
        let oracle = compute_lae_scales(&merged, &LaeConfig::default());
        assert_eq!(shared.s, oracle.s);
    }

    #[test]
    fn sibling_channel_mismatch_rejected() {
        let a = stats(&[1.0, 2.0]);
        let b = stats(&[1.0, 2.0, 3.0]);
        assert!(shared_scales_for_siblings(&[&a, &b], &LaeConfig::default()).is_err());
    }

    proptest! {
        #[test]
        fn scale_upper_bound_and_monotone_squash(m in 0.0f32..2000.0, alpha in prop::sample::select(vec![0.5f64, 1.0, 2.0])) {
            let cfg = LaeConfig::new(alpha).unwrap();
            let s = compute_lae_scales(&stats(&[m]), &cfg);
            // s_i <= max(m_i, 1): log denominator is >= 1 for alpha >= ...
            // holds for the alphas above since log2(2+m) >= 1
            if alpha >= 1.0 || m <= 1.0 {
                prop_assert!(s.s[0] <= m.max(1.0) * (1.0 + 1e-6));
            }
            prop_assert!(s.s[0] > 0.0);
        }

        #[test]
        fn equalized_maxima_preserve_order_and_shrink_ratio(
            a in 1.0f64..2000.0, b in 1.0f64..2000.0)
        {
            let (hi, lo) = if a > b { (a, b) } else { (b, a) };
            prop_assume!(hi > lo);
            let eh = equalized_channel_max(hi, 1.0);
            let el = equalized_channel_max(lo, 1.0);
            prop_assert!(eh > el); // order preserved
            prop_assert!(eh / el < hi / lo); // outliers squashed harder
        }

        #[test]
        fn exactness_random_triples(seed in 0u64..100) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let maxima: Vec<f32> = (0..6).map(|_| rng.random_range(0.1..1000.0f32)).collect();
            let x = Tensor2D::from_fn(5, 6, |_, c| rng.random_range(-1.0..1.0f32) * maxima[c]).unwrap();
            let w = Tensor2D::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0f32)).unwrap();
            let s = compute_lae_scales(&ActivationStats::from_parts("l", maxima, 1).unwrap(), &LaeConfig::default());
            let (xe, we) = apply_equalization(&x, &w, &s).unwrap();
            let reference = x.matmul(&w).unwrap();
            let equalized = xe.matmul(&we).unwrap();
            let ref_max = reference.absmax().unwrap() as f64;
            for (p, q) in reference.data().iter().zip(equalized.data()) {
                prop_assert!(((p - q).abs() as f64) <= 1e-5 * ref_max.max(1e-12));
            }
        }
    }
}
