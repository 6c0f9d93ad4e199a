//! W4A8 post-training quantization toolkit.
//!
//! Calibrates a toy LLaMA-style decoder, classifies each linear layer's
//! activation range into a static / equalize+static / dynamic policy, applies
//! logarithmic activation equalization with exact scale fusion into the
//! preceding normalization, group-quantizes weights to 4 bits, and evaluates
//! the result against the full-precision forward via fake quantization.

pub mod calibrate;
pub mod error;
pub mod formats;
pub mod kv;
pub mod model;
pub mod lae;
pub mod qmodel;
pub mod quant;
pub mod recipe;
pub mod report;
pub mod store;
pub mod tensor;

pub use error::{Error, Result};

/// Cap rayon workers from the `FPTQ_THREADS` environment variable. No-op when
/// unset, unparsable, or once a global pool already exists.
pub fn configure_threads_from_env() {
    if let Some(n) = std::env::var("FPTQ_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n >= 1)
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}
