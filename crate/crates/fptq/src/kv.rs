//! Quantized KV cache: per-layer K/V row blocks stored as 8-bit integers with
//! one scale per row, or full-precision rows when quantization is disabled.
//!
//! Every K/V row passes through the same `quantize_row` as the per-token
//! activation path, so full-context and incremental decoding see bit-identical
//! key/value matrices.

use crate::error::{Error, Result};
use crate::quant::quantize_row;
use crate::tensor::Tensor2D;

#[derive(Debug, Clone)]
enum Store {
    Fp(Vec<f32>),
    Quant { q: Vec<i8>, scales: Vec<f32> },
}

impl Store {
    fn new(bits: Option<u8>) -> Self {
        match bits {
            None => Store::Fp(Vec::new()),
            Some(_) => Store::Quant {
                q: Vec::new(),
                scales: Vec::new(),
            },
        }
    }

    fn rows(&self, width: usize) -> usize {
        match self {
            Store::Fp(d) => d.len() / width,
            Store::Quant { q, .. } => q.len() / width,
        }
    }

    fn push_row(&mut self, row: &[f32], bits: Option<u8>) {
        match self {
            Store::Fp(d) => d.extend_from_slice(row),
            Store::Quant { q, scales } => {
                let (qr, scale) = quantize_row(row, bits.expect("quant store requires bits"));
                q.extend_from_slice(&qr);
                scales.push(scale);
            }
        }
    }

    fn dequant(&self, width: usize) -> Tensor2D {
        let rows = self.rows(width);
        let mut out = Tensor2D::zeros(rows, width);
        match self {
            Store::Fp(d) => out.data_mut().copy_from_slice(d),
            Store::Quant { q, scales } => {
                for r in 0..rows {
                    let s = scales[r];
                    for (o, &v) in out.row_mut(r).iter_mut().zip(&q[r * width..(r + 1) * width]) {
                        *o = v as f32 * s;
                    }
                }
            }
        }
        out
    }
}

/// Per-layer cached K and V rows. `bits = None` stores rows untouched.
#[derive(Debug, Clone)]
pub struct KvCache {
    bits: Option<u8>,
    width: usize,
    max_seq: usize,
    committed: usize,
    layers: Vec<(Store, Store)>,
}

impl KvCache {
    pub fn new(n_layers: usize, width: usize, max_seq: usize, bits: Option<u8>) -> Result<Self> {
        if let Some(b) = bits {
            if b != 4 && b != 8 {
                return Err(Error::InvalidArg(format!("kv bits must be 4 or 8, got {b}")));
            }
        }
        Ok(Self {
            bits,
            width,
            max_seq,
            committed: 0,
            layers: (0..n_layers).map(|_| (Store::new(bits), Store::new(bits))).collect(),
        })
    }

    /// Logical number of cached positions.
    pub fn len(&self) -> usize {
        self.committed
    }

    pub fn is_empty(&self) -> bool {
        self.committed == 0
    }

    /// Reserve room for `n` more positions; returns the absolute position of
    /// the first new token.
    pub(crate) fn begin_chunk(&mut self, n: usize) -> Result<usize> {
        if self.committed + n > self.max_seq {
            return Err(Error::CacheOverflow {
                len: self.committed + n,
                max: self.max_seq,
            });
        }
        let start = self.committed;
        self.committed += n;
        Ok(start)
    }

    /// Append this chunk's K/V rows for one layer, quantizing per row.
    pub(crate) fn append(&mut self, layer: usize, k: &Tensor2D, v: &Tensor2D) -> Result<()> {
        if k.cols() != self.width || v.cols() != self.width || k.rows() != v.rows() {
            return Err(Error::ShapeMismatch(format!(
                "kv append {}x{} / {}x{} into width {}",
                k.rows(),
                k.cols(),
                v.rows(),
                v.cols(),
                self.width
            )));
        }
        let (ks, vs) = &mut self.layers[layer];
        if ks.rows(self.width) + k.rows() > self.committed {
            return Err(Error::CacheOverflow {
                len: ks.rows(self.width) + k.rows(),
                max: self.committed,
            });
        }
        for r in 0..k.rows() {
            ks.push_row(k.row(r), self.bits);
            vs.push_row(v.row(r), self.bits);
        }
        Ok(())
    }

    /// Dequantized K and V matrices for one layer (all cached rows so far).
    pub(crate) fn read(&self, layer: usize) -> (Tensor2D, Tensor2D) {
        let (ks, vs) = &self.layers[layer];
        (ks.dequant(self.width), vs.dequant(self.width))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rows(r: usize, c: usize, seed: u64) -> Tensor2D {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor2D::from_fn(r, c, |_, _| rng.random_range(-4.0..4.0f32)).unwrap()
    }

    #[test]
    fn round_trip_error_bounded_by_row_scale() {
        let k = rows(10, 16, 1);
        let v = rows(10, 16, 2);
        let mut cache = KvCache::new(1, 16, 32, Some(8)).unwrap();
        cache.begin_chunk(10).unwrap();
        cache.append(0, &k, &v).unwrap();
        let (kd, vd) = cache.read(0);
        for (orig, deq) in [(&k, &kd), (&v, &vd)] {
            for r in 0..10 {
                let scale = orig.row(r).iter().fold(0.0f32, |m, x| m.max(x.abs())) / 127.0;
                for (a, b) in orig.row(r).iter().zip(deq.row(r)) {
                    assert!((a - b).abs() <= scale / 2.0 + 1e-7);
                }
            }
        }
    }

    #[test]
    fn passthrough_is_exact() {
        let k = rows(5, 8, 3);
        let v = rows(5, 8, 4);
        let mut cache = KvCache::new(1, 8, 16, None).unwrap();
        cache.begin_chunk(5).unwrap();
        cache.append(0, &k, &v).unwrap();
        let (kd, vd) = cache.read(0);
        assert_eq!(kd.data(), k.data());
        assert_eq!(vd.data(), v.data());
    }

    #[test]
    fn overflow_rejected() {
        let mut cache = KvCache::new(1, 4, 6, Some(8)).unwrap();
        cache.begin_chunk(4).unwrap();
        assert!(matches!(cache.begin_chunk(3), Err(Error::CacheOverflow { .. })));
    }

    #[test]
    fn incremental_appends_match_bulk() {
        let k = rows(8, 8, 5);
        let v = rows(8, 8, 6);
        let mut bulk = KvCache::new(1, 8, 16, Some(8)).unwrap();
        bulk.begin_chunk(8).unwrap();
        bulk.append(0, &k, &v).unwrap();

        let mut step = KvCache::new(1, 8, 16, Some(8)).unwrap();
        for r in 0..8 {
            step.begin_chunk(1).unwrap();
            let kr = Tensor2D::new(1, 8, k.row(r).to_vec()).unwrap();
            let vr = Tensor2D::new(1, 8, v.row(r).to_vec()).unwrap();
            step.append(0, &kr, &vr).unwrap();
        }
        let (kb, vb) = bulk.read(0);
        let (ks, vs) = step.read(0);
        assert_eq!(kb.data(), ks.data());
        assert_eq!(vb.data(), vs.data());
    }
}
