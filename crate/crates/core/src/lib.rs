//! Data-quality calibration and reward engine for instruction distillation.
//!
//! The crate covers the offline side of a distillation pipeline: turning
//! plain-text articles into blocks, prompting (or mocking) a judge model,
//! estimating a score transition matrix from neighbor agreement, calibrating
//! quality scores with a k-NN Bayes posterior, computing the multi-part reward
//! used for group-relative policy optimization, clustering low-quality samples
//! under capacity constraints and assembling ratio-mixed training sets.
//!
//! Every stochastic routine takes an explicit seed; nothing reads global state.

pub mod cluster;
pub mod embed;
pub mod gateway;
pub mod grpo;
pub mod index;
pub mod ingest;
pub mod jsonl;
pub mod metrics;
pub mod model;
pub mod reward;
pub mod scoring;
pub mod select;
pub mod stm;

pub use model::{
    discretize_rating, is_high_quality, validate_sample, InstructionSample, ModelError,
    QualityLabel, RatingVector, TaskType, VariantKind, NUM_LABELS,
};

/// Hex-encoded SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

/// Dot product of two equal-length slices.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm.
#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Scales `v` to unit length in place. Zero vectors are left untouched and
/// `false` is returned.
pub fn normalize_in_place(v: &mut [f64]) -> bool {
    let n = norm(v);
    if n > 0.0 && n.is_finite() {
        v.iter_mut().for_each(|x| *x /= n);
        true
    } else {
        false
    }
}
