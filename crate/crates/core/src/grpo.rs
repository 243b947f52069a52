//! Group-relative policy optimization arithmetic over externally supplied
//! rewards and per-token log-probabilities. No model evaluation happens here.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrpoError {
    #[error("group has {0} candidate(s); at least 2 are required")]
    GroupTooSmall(usize),
    #[error("reward {index} is not finite")]
    NonFiniteReward { index: usize },
    #[error("importance ratio must be positive and finite, got {0}")]
    BadRatio(f64),
    #[error("token sequences differ in length ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },
    #[error("group {prompt_id}: {message}")]
    Group { prompt_id: String, message: String },
    #[error("invalid parameters: {0}")]
    BadParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoParams {
    pub eps_std: f64,
    pub eps_clip: f64,
    pub beta_kl: f64,
}

impl Default for GrpoParams {
    fn default() -> Self {
        GrpoParams {
            eps_std: 1e-8,
            eps_clip: 0.2,
            beta_kl: 0.01,
        }
    }
}

impl GrpoParams {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if !(self.eps_std >= 0.0) {
            return Err(GrpoError::BadParams("eps_std must be >= 0".into()));
        }
        if !(self.eps_clip > 0.0 && self.eps_clip < 1.0) {
            return Err(GrpoError::BadParams("eps_clip must lie in (0, 1)".into()));
        }
        if !(self.beta_kl >= 0.0) {
            return Err(GrpoError::BadParams("beta_kl must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRollout {
    pub prompt_id: String,
    pub rewards: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logp_new: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logp_old: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logp_ref: Option<Vec<Vec<f64>>>,
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mu = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, var.sqrt())
}

/// `(R_i - mean) / (std + eps_std)`; a constant group yields zeros.
pub fn group_normalize(rewards: &[f64], eps_std: f64) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    if let Some(index) = rewards.iter().position(|r| !r.is_finite()) {
        return Err(GrpoError::NonFiniteReward { index });
    }
    let (mu, sigma) = mean_std(rewards);
    let denom = sigma + eps_std;
    Ok(rewards
        .iter()
        .map(|r| if denom > 0.0 { (r - mu) / denom } else { 0.0 })
        .collect())
}

/// `min(r A, clip(r, 1 - eps, 1 + eps) A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps_clip: f64) -> Result<f64, GrpoError> {
    if !(ratio > 0.0) || ratio.is_nan() {
        return Err(GrpoError::BadRatio(ratio));
    }
    if advantage == 0.0 {
        return Ok(0.0);
    }
    let clipped = ratio.clamp(1.0 - eps_clip, 1.0 + eps_clip);
    Ok((ratio * advantage).min(clipped * advantage))
}

/// Sequence-level ratio with its logarithm, which stays exact where the
/// ratio itself under- or overflows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRatio {
    pub log_ratio: f64,
    pub ratio: f64,
}

pub fn importance_ratio(new: &[f64], old: &[f64]) -> Result<ImportanceRatio, GrpoError> {
    if new.len() != old.len() {
        return Err(GrpoError::LengthMismatch {
            left: new.len(),
            right: old.len(),
        });
    }
    let log_ratio = new.iter().sum::<f64>() - old.iter().sum::<f64>();
    Ok(ImportanceRatio {
        log_ratio,
        ratio: log_ratio.exp(),
    })
}

/// Token mean of `exp(q - p) - (q - p) - 1` with `p` new and `q` reference
/// log-probabilities; empty sequences contribute 0.
pub fn kl_penalty(new: &[f64], reference: &[f64]) -> Result<f64, GrpoError> {
    if new.len() != reference.len() {
        return Err(GrpoError::LengthMismatch {
            left: new.len(),
            right: reference.len(),
        });
    }
    if new.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = new
        .iter()
        .zip(reference)
        .map(|(p, q)| {
            let d = q - p;
            // exp_m1 keeps small-|d| terms accurate; max guards rounding below 0.
            (d.exp_m1() - d).max(0.0)
        })
        .sum();
    Ok(total / new.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDiagnostics {
    pub prompt_id: String,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub clip_fraction: f64,
    pub kl: f64,
    pub surrogate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoReport {
    pub objective: f64,
    pub per_group: Vec<GroupDiagnostics>,
}

fn group_term(g: &GroupRollout, params: &GrpoParams) -> Result<GroupDiagnostics, GrpoError> {
    let ctx = |message: String| GrpoError::Group {
        prompt_id: g.prompt_id.clone(),
        message,
    };
    let (Some(new), Some(old), Some(reference)) = (&g.logp_new, &g.logp_old, &g.logp_ref) else {
        return Err(ctx("missing log-probability lists".into()));
    };
    let m = g.rewards.len();
    if new.len() != m || old.len() != m || reference.len() != m {
        return Err(ctx(format!(
            "log-probability lists must have {m} candidates"
        )));
    }
    let adv = group_normalize(&g.rewards, params.eps_std).map_err(|e| ctx(e.to_string()))?;
    let (mu, sigma) = mean_std(&g.rewards);
    let mut surrogate = 0.0;
    let mut kl = 0.0;
    let mut clipped = 0usize;
    for i in 0..m {
        let r = importance_ratio(&new[i], &old[i]).map_err(|e| ctx(e.to_string()))?;
        let s =
            clipped_surrogate(r.ratio, adv[i], params.eps_clip).map_err(|e| ctx(e.to_string()))?;
        if s < r.ratio * adv[i] {
            clipped += 1;
        }
        surrogate += s;
        kl += kl_penalty(&new[i], &reference[i]).map_err(|e| ctx(e.to_string()))?;
    }
    Ok(GroupDiagnostics {
        prompt_id: g.prompt_id.clone(),
        mean_reward: mu,
        std_reward: sigma,
        clip_fraction: clipped as f64 / m as f64,
        kl: kl / m as f64,
        surrogate: surrogate / m as f64,
    })
}

/// Mean over groups of (mean clipped surrogate - beta * mean KL).
pub fn grpo_objective(
    groups: &[GroupRollout],
    params: &GrpoParams,
) -> Result<GrpoReport, GrpoError> {
    params.validate()?;
    let per_group = groups
        .iter()
        .map(|g| group_term(g, params))
        .collect::<Result<Vec<_>, _>>()?;
    let objective = if per_group.is_empty() {
        0.0
    } else {
        per_group
            .iter()
            .map(|d| d.surrogate - params.beta_kl * d.kl)
            .sum::<f64>()
            / per_group.len() as f64
    };
    Ok(GrpoReport {
        objective,
        per_group,
    })
}
