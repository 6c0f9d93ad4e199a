//! Calibration: run token batches through the FP model, record per-layer
//! input statistics, and optionally capture a bounded sample of raw
//! activation rows for histograms and reconstruction checks.
//!
//! Samples are processed in parallel; statistics merge by element-wise max
//! and the row capture keeps the budget rows with the smallest hash keys, so
//! reductions are exact semilattice operations and results are bit-identical
//! for any worker count or merge order.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lae::LaeScales;
use crate::model::{TapEvent, ToyModel};
use crate::tensor::{ActivationStats, Tensor2D};

/// Cap on captured raw values per layer.
pub const RAW_CAPTURE_VALUE_BUDGET: usize = 65_536;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CalibSourceKind {
    TokenFile,
    RandomTokens,
}

/// Where calibration (or evaluation) token sequences come from.
#[derive(Debug, Clone)]
pub struct CalibSource {
    pub kind: CalibSourceKind,
    pub path: Option<PathBuf>,
    pub n_samples: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl CalibSource {
    pub fn random(n_samples: usize, seq_len: usize, seed: u64) -> Self {
        Self {
            kind: CalibSourceKind::RandomTokens,
            path: None,
            n_samples,
            seq_len,
            seed,
        }
    }

    pub fn token_file(path: impl Into<PathBuf>, n_samples: usize, seed: u64) -> Self {
        Self {
            kind: CalibSourceKind::TokenFile,
            path: Some(path.into()),
            n_samples,
            seq_len: 0,
            seed,
        }
    }

    /// Materialize the token sequences. Token files hold one
    /// whitespace-separated id sequence per line; sequences are truncated to
    /// `max_seq` and the first `n_samples` lines are used.
    pub fn resolve(&self, vocab_size: usize, max_seq: usize) -> Result<Vec<Vec<u32>>> {
        if self.n_samples == 0 {
            return Err(Error::CalibSource("n_samples must be >= 1".into()));
        }
        match self.kind {
            CalibSourceKind::RandomTokens => {
                if self.seq_len == 0 || self.seq_len > max_seq {
                    return Err(Error::CalibSource(format!(
                        "seq_len must be in 1..={max_seq}, got {}",
                        self.seq_len
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                Ok((0..self.n_samples)
                    .map(|_| {
                        (0..self.seq_len)
                            .map(|_| rng.random_range(0..vocab_size as u32))
                            .collect()
                    })
                    .collect())
            }
            CalibSourceKind::TokenFile => {
                let path = self
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::CalibSource("token file source requires a path".into()))?;
                let text = std::fs::read_to_string(path).map_err(|e| {
                    Error::CalibSource(format!("cannot read {}: {e}", path.display()))
                })?;
                let mut seqs = Vec::new();
                for (lineno, line) in text.lines().enumerate() {
                    if line.trim().is_empty() {
                        continue;
                    }
                    let mut seq = Vec::new();
                    for tok in line.split_whitespace() {
                        let id: u32 = tok.parse().map_err(|_| {
                            Error::CalibSource(format!(
                                "{}:{}: invalid token id {tok:?}",
                                path.display(),
                                lineno + 1
                            ))
                        })?;
                        if id as usize >= vocab_size {
                            return Err(Error::TokenOutOfRange {
                                id,
                                vocab: vocab_size,
                            });
                        }
                        seq.push(id);
                    }
                    seq.truncate(max_seq);
                    seqs.push(seq);
                    if seqs.len() == self.n_samples {
                        break;
                    }
                }
                if seqs.is_empty() {
                    return Err(Error::CalibSource(format!(
                        "{}: no token sequences",
                        path.display()
                    )));
                }
                Ok(seqs)
            }
        }
    }
}

/// Bounded sample of raw activation rows for one layer. Keeps the
/// `budget_rows` rows with the smallest priority keys; keys are hashes of
/// (seed, layer, sample, position), so the selection is independent of
/// processing order.
#[derive(Debug, Clone)]
pub struct RawCapture {
    cols: usize,
    budget_rows: usize,
    rows: Vec<(u64, Vec<f32>)>,
}

impl RawCapture {
    fn new(cols: usize) -> Self {
        Self {
            cols,
            budget_rows: (RAW_CAPTURE_VALUE_BUDGET / cols.max(1)).max(1),
            rows: Vec::new(),
        }
    }

    fn offer(&mut self, key: u64, row: &[f32]) {
        self.rows.push((key, row.to_vec()));
        if self.rows.len() > 2 * self.budget_rows {
            self.compact();
        }
    }

    fn compact(&mut self) {
        self.rows.sort_unstable_by_key(|(k, _)| *k);
        self.rows.truncate(self.budget_rows);
    }

    fn merge(&mut self, mut other: RawCapture) {
        self.rows.append(&mut other.rows);
        self.compact();
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row_count(&self) -> usize {
        self.rows.len().min(self.budget_rows)
    }

    pub fn value_count(&self) -> usize {
        self.row_count() * self.cols
    }

    /// Captured rows as a matrix (tokens x channels).
    pub fn to_tensor(&self) -> Result<Tensor2D> {
        let mut sorted: Vec<&(u64, Vec<f32>)> = self.rows.iter().collect();
        sorted.sort_unstable_by_key(|(k, _)| *k);
        sorted.truncate(self.budget_rows);
        let mut data = Vec::with_capacity(sorted.len() * self.cols);
        for (_, row) in &sorted {
            data.extend_from_slice(row);
        }
        Tensor2D::new(sorted.len(), self.cols, data)
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationResult {
    pub stats: BTreeMap<String, ActivationStats>,
    raw: Option<BTreeMap<String, RawCapture>>,
}

impl CalibrationResult {
    /// Raw per-layer captures; errs when calibration ran without sampling.
    pub fn capture(&self) -> Result<&BTreeMap<String, RawCapture>> {
        self.raw.as_ref().ok_or(Error::NoRawCapture)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct Acc {
    stats: BTreeMap<String, ActivationStats>,
    raw: Option<BTreeMap<String, RawCapture>>,
}

impl Acc {
    fn new(capture: bool) -> Self {
        Self {
            stats: BTreeMap::new(),
            raw: capture.then(BTreeMap::new),
        }
    }

    fn observe(&mut self, layer_id: &str, x: &Tensor2D, seed: u64, sample_idx: usize) {
        match self.stats.get_mut(layer_id) {
            Some(acc) => {
                for r in 0..x.rows() {
                    for (m, v) in acc.channel_absmax.iter_mut().zip(x.row(r)) {
                        *m = m.max(v.abs());
                    }
                }
                acc.tensor_absmax = acc.channel_absmax.iter().fold(0.0f32, |m, v| m.max(*v));
                acc.sample_count += x.rows() as u64;
            }
            None => {
                let s = ActivationStats::from_batch(layer_id, x).expect("non-empty activation");
                self.stats.insert(layer_id.to_string(), s);
            }
        }
        if let Some(raw) = &mut self.raw {
            let cap = raw
                .entry(layer_id.to_string())
                .or_insert_with(|| RawCapture::new(x.cols()));
            let layer_hash = fnv1a(layer_id.as_bytes());
            for r in 0..x.rows() {
                let key = splitmix64(seed ^ layer_hash ^ ((sample_idx as u64) << 20 | r as u64));
                cap.offer(key, x.row(r));
            }
        }
    }

    fn merge(mut self, other: Acc) -> Result<Acc> {
        for (id, s) in other.stats {
            match self.stats.remove(&id) {
                Some(mine) => {
                    self.stats.insert(id, mine.merge(&s)?);
                }
                None => {
                    self.stats.insert(id, s);
                }
            }
        }
        if let (Some(mine), Some(theirs)) = (&mut self.raw, other.raw) {
            for (id, cap) in theirs {
                match mine.get_mut(&id) {
                    Some(acc) => acc.merge(cap),
                    None => {
                        mine.insert(id, cap);
                    }
                }
            }
        }
        Ok(self)
    }
}

/// Collect per-layer input statistics over all samples of a source.
/// Deterministic for a fixed source: merges are order-free.
pub fn calibrate(model: &ToyModel, source: &CalibSource) -> Result<BTreeMap<String, ActivationStats>> {
    Ok(calibrate_with_capture(model, source, false)?.stats)
}

/// Same as [`calibrate`], optionally keeping raw activation rows per layer.
pub fn calibrate_with_capture(
    model: &ToyModel,
    source: &CalibSource,
    capture: bool,
) -> Result<CalibrationResult> {
    let seqs = source.resolve(model.config.vocab_size, model.config.max_seq)?;
    let acc = calibrate_sequences(model, &seqs, capture, source.seed)?;
    Ok(CalibrationResult {
        stats: acc.stats,
        raw: acc.raw,
    })
}

fn calibrate_sequences(model: &ToyModel, seqs: &[Vec<u32>], capture: bool, seed: u64) -> Result<Acc> {
    seqs.par_iter()
        .enumerate()
        .try_fold(
            || Acc::new(capture),
            |mut acc, (idx, seq)| {
                model.forward_tapped(seq, &mut |event| {
                    if let TapEvent::LinearInput { layer_id, x } = event {
                        acc.observe(layer_id, x, seed, idx);
                    }
                })?;
                Ok(acc)
            },
        )
        .try_reduce(|| Acc::new(capture), Acc::merge)
}

/// Binned value counts of one layer's captured activations, before and after
/// equalization. Non-LAE layers repeat the pre counts in the post column.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bin_lo: Vec<f64>,
    pub bin_hi: Vec<f64>,
    pub count_pre: Vec<u64>,
    pub count_post: Vec<u64>,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.bin_lo.len()
    }
}

/// Histogram over the captured rows with symmetric range [-M, M] from the
/// captured absmax.
pub fn histogram_export(capture: &RawCapture, lae: Option<&LaeScales>, bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::InvalidArg("bins must be >= 1".into()));
    }
    let rows = capture.to_tensor()?;
    if rows.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(s) = lae {
        if s.s.len() != rows.cols() {
            return Err(Error::ShapeMismatch(format!(
                "{} LAE scales vs {} channels",
                s.s.len(),
                rows.cols()
            )));
        }
    }
    let mut m = rows.absmax()? as f64;
    if m == 0.0 {
        m = 1.0;
    }
    let width = 2.0 * m / bins as f64;
    let bin_lo: Vec<f64> = (0..bins).map(|b| -m + b as f64 * width).collect();
    let bin_hi: Vec<f64> = (0..bins).map(|b| -m + (b + 1) as f64 * width).collect();
    let index = |v: f64| (((v + m) / width) as usize).min(bins - 1);
    let mut count_pre = vec![0u64; bins];
    let mut count_post = vec![0u64; bins];
    for r in 0..rows.rows() {
        for (c, &v) in rows.row(r).iter().enumerate() {
            count_pre[index(v as f64)] += 1;
            let post = match lae {
                Some(s) => v as f64 / s.s[c] as f64,
                None => v as f64,
            };
            count_post[index(post)] += 1;
        }
    }
    Ok(Histogram {
        bin_lo,
        bin_hi,
        count_pre,
        count_post,
    })
}
