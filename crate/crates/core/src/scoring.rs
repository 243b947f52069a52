//! k-NN label histograms, the Bayes posterior over true labels and the
//! piecewise quality reward built on its expectation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index::{IndexError, Neighbor, ReferenceIndex};
use crate::stm::ScoreTransitionModel;

pub const DEFAULT_K: usize = 5;
/// Added to distances before inversion so exact duplicates stay finite.
pub const DISTANCE_EPSILON: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("k = {0} is below the minimum of 2")]
    KTooSmall(usize),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("transition matrix has a zero entry at ({row}, {col}); smooth it first")]
    ZeroTransition { row: usize, col: usize },
    #[error("histogram has {got} bins, model has {expected} labels")]
    BinMismatch { expected: usize, got: usize },
    #[error("distribution sums to {0}, not 1")]
    NotNormalized(f64),
    #[error("invalid reward parameters: {0}")]
    BadParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    None,
    InverseDistance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborHistogram {
    pub h: Vec<f64>,
    pub k: usize,
    pub weighted: bool,
}

/// Histogram over `num_labels` bins from already-retrieved neighbors.
/// Weighted bins are rescaled so their total equals the neighbor count.
pub fn histogram_from_neighbors(
    labels: &[usize],
    distances: &[f64],
    num_labels: usize,
    weighting: Weighting,
) -> NeighborHistogram {
    let mut h = vec![0.0; num_labels];
    match weighting {
        Weighting::None => labels.iter().for_each(|&l| h[l] += 1.0),
        Weighting::InverseDistance => {
            let mut total = 0.0;
            for (&l, &d) in labels.iter().zip(distances) {
                let w = 1.0 / (d.max(0.0) + DISTANCE_EPSILON);
                h[l] += w;
                total += w;
            }
            if total > 0.0 {
                let scale = labels.len() as f64 / total;
                h.iter_mut().for_each(|x| *x *= scale);
            }
        }
    }
    NeighborHistogram {
        h,
        k: labels.len(),
        weighted: weighting == Weighting::InverseDistance,
    }
}

pub fn neighbor_histogram(
    idx: &ReferenceIndex,
    q: &[f64],
    k: usize,
    weighting: Weighting,
) -> Result<NeighborHistogram, ScoringError> {
    if k < 2 {
        return Err(ScoringError::KTooSmall(k));
    }
    let nbrs: Vec<Neighbor> = idx.search(q, k)?;
    let labels: Vec<usize> = nbrs.iter().map(|n| idx.label(n.row).index()).collect();
    let dists: Vec<f64> = nbrs.iter().map(|n| n.distance).collect();
    Ok(histogram_from_neighbors(
        &labels,
        &dists,
        crate::NUM_LABELS,
        weighting,
    ))
}

/// `P(y = i | h) ∝ p_i prod_j T[i][j]^h_j`, evaluated in log space.
pub fn posterior(
    h: &NeighborHistogram,
    m: &ScoreTransitionModel,
) -> Result<Vec<f64>, ScoringError> {
    posterior_from_counts(&h.h, m)
}

pub fn posterior_from_counts(
    h: &[f64],
    m: &ScoreTransitionModel,
) -> Result<Vec<f64>, ScoringError> {
    let c = m.num_labels();
    if h.len() != c {
        return Err(ScoringError::BinMismatch {
            expected: c,
            got: h.len(),
        });
    }
    for (row, r) in m.t.iter().enumerate() {
        if let Some(col) = r.iter().position(|x| *x <= 0.0) {
            return Err(ScoringError::ZeroTransition { row, col });
        }
    }
    let logits: Vec<f64> = (0..c)
        .map(|i| {
            let prior = if m.p[i] > 0.0 {
                m.p[i].ln()
            } else {
                f64::NEG_INFINITY
            };
            prior
                + h.iter()
                    .zip(&m.t[i])
                    .map(|(hj, t)| hj * t.ln())
                    .sum::<f64>()
        })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= z);
    Ok(out)
}

/// Mean label under `dist`.
pub fn expected_score(dist: &[f64]) -> Result<f64, ScoringError> {
    let total: f64 = dist.iter().sum();
    if (total - 1.0).abs() > 1e-9 || dist.iter().any(|x| *x < 0.0) {
        return Err(ScoringError::NotNormalized(total));
    }
    Ok(dist.iter().enumerate().map(|(i, p)| i as f64 * p).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityRewardParams {
    pub lambda_thresh: f64,
    pub kappa_thresh: f64,
    pub alpha_high: f64,
    pub beta_mid: f64,
}

impl Default for QualityRewardParams {
    fn default() -> Self {
        QualityRewardParams {
            lambda_thresh: 4.0,
            kappa_thresh: 3.0,
            alpha_high: 1.0,
            beta_mid: 0.3,
        }
    }
}

impl QualityRewardParams {
    pub fn validate(&self) -> Result<(), ScoringError> {
        if !(self.kappa_thresh < self.lambda_thresh) {
            return Err(ScoringError::BadParams("kappa must be below lambda".into()));
        }
        if !(0.0 <= self.beta_mid && self.beta_mid <= self.alpha_high) {
            return Err(ScoringError::BadParams("need 0 <= beta <= alpha".into()));
        }
        Ok(())
    }
}

/// `alpha` on `[lambda, inf)`, `beta` on `[kappa, lambda)`, else 0.
pub fn quality_reward(s: f64, params: &QualityRewardParams) -> f64 {
    if s >= params.lambda_thresh {
        params.alpha_high
    } else if s >= params.kappa_thresh {
        params.beta_mid
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedScore {
    pub posterior: Vec<f64>,
    pub s_hat: f64,
    pub r_q: f64,
}

/// Immutable bundle of the artifacts needed to calibrate a single embedding.
#[derive(Debug, Clone)]
pub struct QualityScorer {
    pub index: ReferenceIndex,
    pub stm: ScoreTransitionModel,
    pub k: usize,
    pub weighting: Weighting,
    pub params: QualityRewardParams,
}

impl QualityScorer {
    pub fn new(
        index: ReferenceIndex,
        stm: ScoreTransitionModel,
        k: usize,
        weighting: Weighting,
        params: QualityRewardParams,
    ) -> Result<Self, ScoringError> {
        if k < 2 {
            return Err(ScoringError::KTooSmall(k));
        }
        if k > index.len() {
            return Err(IndexError::KTooLarge { k, n: index.len() }.into());
        }
        params.validate()?;
        // Surface zero transitions at construction rather than per query.
        posterior_from_counts(&vec![0.0; stm.num_labels()], &stm)?;
        Ok(QualityScorer {
            index,
            stm,
            k,
            weighting,
            params,
        })
    }

    pub fn score(&self, e: &[f64]) -> Result<CalibratedScore, ScoringError> {
        let h = neighbor_histogram(&self.index, e, self.k, self.weighting)?;
        let posterior = posterior(&h, &self.stm)?;
        let s_hat = expected_score(&posterior)?;
        Ok(CalibratedScore {
            r_q: quality_reward(s_hat, &self.params),
            posterior,
            s_hat,
        })
    }
}
