//! Multi-part reward: calibrated quality, semantic alignment and format
//! compliance, plus the cluster linearization fed to the distillation model
//! and a batch scorer for external trainers.

use std::sync::{Arc, LazyLock};

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::embed::{centroid, EmbeddingProvider};
use crate::model::{check_embedding, InstructionSample, ModelError, MAX_VARIANTS, MIN_VARIANTS};
use crate::scoring::{QualityScorer, ScoringError};

pub const LINEARIZE_HEADER: &str =
    "Below are several instruction samples that describe the same underlying task. \
Some are noisy, off-topic or incomplete.";

pub const LINEARIZE_FOOTER: &str = "Merge them into a single high-quality instruction sample. \
First reason inside <think></think>, then give the merged sample inside <answer></answer> \
using the lines \"Instruction:\" and \"Output:\".";

pub const DEFAULT_TAU: f64 = 0.7;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("reward weights must be nonnegative and sum to 1 (sum = {0})")]
    BadWeights(f64),
    #[error("tau {0} outside (-1, 1]")]
    BadTau(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0} variants; a cluster needs between {MIN_VARIANTS} and {MAX_VARIANTS}")]
    VariantCount(usize),
    #[error("component {name} = {value} outside its range")]
    ComponentRange { name: &'static str, value: f64 },
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error("{0}")]
    Request(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub w_quality: f64,
    pub w_align: f64,
    pub w_format: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            w_quality: 0.5,
            w_align: 0.4,
            w_format: 0.1,
        }
    }
}

impl RewardWeights {
    pub fn new(w_quality: f64, w_align: f64, w_format: f64) -> Result<Self, RewardError> {
        let w = RewardWeights {
            w_quality,
            w_align,
            w_format,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        let parts = [self.w_quality, self.w_align, self.w_format];
        let sum: f64 = parts.iter().sum();
        if parts.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(RewardError::BadWeights(sum));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentParams {
    pub tau: f64,
}

impl Default for AlignmentParams {
    fn default() -> Self {
        AlignmentParams { tau: DEFAULT_TAU }
    }
}

impl AlignmentParams {
    pub fn new(tau: f64) -> Result<Self, RewardError> {
        if !(tau > -1.0 && tau <= 1.0) {
            return Err(RewardError::BadTau(tau));
        }
        Ok(AlignmentParams { tau })
    }
}

/// 1 when the cosine similarity reaches `tau` (inclusive), else 0.
pub fn alignment_reward(
    e_gen: &[f64],
    e_ref: &[f64],
    params: &AlignmentParams,
) -> Result<f64, RewardError> {
    check_embedding("generated", e_gen, e_gen.len())?;
    check_embedding("reference", e_ref, e_gen.len())?;
    Ok(if crate::dot(e_gen, e_ref) >= params.tau {
        1.0
    } else {
        0.0
    })
}

static FORMAT: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?s)\A<think>(.+?)</think>\s*<answer>(.+)</answer>\z").expect("valid pattern")
});

const TAGS: [&str; 4] = ["<think>", "</think>", "<answer>", "</answer>"];

/// Splits a well-formed reply into `(think, answer)` bodies.
pub fn parse_think_answer(text: &str) -> Option<(&str, &str)> {
    let caps = FORMAT.captures(text.trim())?;
    let think = caps.get(1)?.as_str();
    let answer = caps.get(2)?.as_str();
    if TAGS.iter().any(|t| think.contains(t) || answer.contains(t)) {
        return None;
    }
    Some((think, answer))
}

/// 1 iff the trimmed text is exactly one think block followed by one answer
/// block, both nonempty and free of nested tags.
pub fn format_reward(text: &str) -> f64 {
    if parse_think_answer(text).is_some() {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardComponents {
    pub r_quality: f64,
    pub r_align: f64,
    pub r_format: f64,
    pub s_hat: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_quality: f64,
    pub r_align: f64,
    pub r_format: f64,
    pub total: f64,
    pub s_hat: f64,
}

pub fn total_reward(
    c: &RewardComponents,
    w: &RewardWeights,
) -> Result<RewardBreakdown, RewardError> {
    w.validate()?;
    for (name, value) in [
        ("r_quality", c.r_quality),
        ("r_align", c.r_align),
        ("r_format", c.r_format),
    ] {
        if !(0.0..=1.0).contains(&value) && name != "r_quality" {
            return Err(RewardError::ComponentRange { name, value });
        }
        if !(value >= 0.0 && value.is_finite()) {
            return Err(RewardError::ComponentRange { name, value });
        }
    }
    Ok(RewardBreakdown {
        r_quality: c.r_quality,
        r_align: c.r_align,
        r_format: c.r_format,
        total: w.w_quality * c.r_quality + w.w_align * c.r_align + w.w_format * c.r_format,
        s_hat: c.s_hat,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearizeTemplate {
    pub header: String,
    pub footer: String,
}

impl Default for LinearizeTemplate {
    fn default() -> Self {
        LinearizeTemplate {
            header: LINEARIZE_HEADER.to_string(),
            footer: LINEARIZE_FOOTER.to_string(),
        }
    }
}

/// Header, numbered `Instruction:`/`Output:` segments in input order, footer;
/// blocks separated by blank lines.
pub fn linearize_cluster(
    variants: &[InstructionSample],
    template: &LinearizeTemplate,
) -> Result<String, RewardError> {
    if !(MIN_VARIANTS..=MAX_VARIANTS).contains(&variants.len()) {
        return Err(RewardError::VariantCount(variants.len()));
    }
    let mut blocks = vec![template.header.clone()];
    for (i, v) in variants.iter().enumerate() {
        blocks.push(format!(
            "Sample {}:\nInstruction: {}\nOutput: {}",
            i + 1,
            v.instruction.trim(),
            v.output.trim()
        ));
    }
    blocks.push(template.footer.clone());
    Ok(blocks.join("\n\n"))
}

/// One scoring request. `e_ref` may be replaced by `variant_embeddings`
/// (label-free mode: compare against their centroid). Missing embeddings are
/// computed from the texts when the scorer has an embedding provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub id: Value,
    pub generated_text: String,
    #[serde(default)]
    pub reference_text: Option<String>,
    #[serde(default)]
    pub e_gen: Option<Vec<f64>>,
    #[serde(default)]
    pub e_ref: Option<Vec<f64>>,
    #[serde(default)]
    pub variant_embeddings: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScoreResponse {
    Scored {
        id: Value,
        r_q: f64,
        r_a: f64,
        r_f: f64,
        total: f64,
        s_hat: f64,
    },
    Failed {
        id: Value,
        error: String,
    },
}

impl ScoreResponse {
    pub fn id(&self) -> &Value {
        match self {
            ScoreResponse::Scored { id, .. } | ScoreResponse::Failed { id, .. } => id,
        }
    }

    pub fn is_error(&self) -> bool {
        matches!(self, ScoreResponse::Failed { .. })
    }
}

/// Read-only scoring service state.
#[derive(Clone)]
pub struct Scorer {
    pub quality: Arc<QualityScorer>,
    pub weights: RewardWeights,
    pub alignment: AlignmentParams,
    pub embedder: Option<Arc<dyn EmbeddingProvider>>,
}

impl std::fmt::Debug for Scorer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scorer")
            .field("weights", &self.weights)
            .field("alignment", &self.alignment)
            .field("embedder", &self.embedder.as_ref().map(|e| e.dim()))
            .finish_non_exhaustive()
    }
}

impl Scorer {
    pub fn new(
        quality: QualityScorer,
        weights: RewardWeights,
        alignment: AlignmentParams,
        embedder: Option<Arc<dyn EmbeddingProvider>>,
    ) -> Result<Self, RewardError> {
        weights.validate()?;
        AlignmentParams::new(alignment.tau)?;
        Ok(Scorer {
            quality: Arc::new(quality),
            weights,
            alignment,
            embedder,
        })
    }

    fn embed(&self, text: &str, what: &str) -> Result<Vec<f64>, RewardError> {
        self.embedder
            .as_ref()
            .map(|e| e.embed(text))
            .ok_or_else(|| {
                RewardError::Request(format!("missing {what} and no embedding provider"))
            })
    }

    pub fn score_one(&self, req: &ScoreRequest) -> Result<RewardBreakdown, RewardError> {
        let e_gen = match &req.e_gen {
            Some(e) => e.clone(),
            None => {
                let text = parse_think_answer(&req.generated_text)
                    .map_or(req.generated_text.as_str(), |(_, a)| a);
                self.embed(text, "e_gen")?
            }
        };
        let e_ref = match (&req.e_ref, &req.variant_embeddings, &req.reference_text) {
            (Some(e), _, _) => e.clone(),
            (None, Some(vs), _) => {
                let refs: Vec<&[f64]> = vs.iter().map(Vec::as_slice).collect();
                for v in &refs {
                    check_embedding("variant", v, e_gen.len())?;
                }
                centroid(&refs)
                    .ok_or_else(|| RewardError::Request("variant centroid is undefined".into()))?
            }
            (None, None, Some(text)) => self.embed(text, "e_ref")?,
            (None, None, None) => {
                return Err(RewardError::Request(
                    "need e_ref, variant_embeddings or reference_text".into(),
                ))
            }
        };
        let r_align = alignment_reward(&e_gen, &e_ref, &self.alignment)?;
        let q = self.quality.score(&e_gen)?;
        total_reward(
            &RewardComponents {
                r_quality: q.r_q,
                r_align,
                r_format: format_reward(&req.generated_text),
                s_hat: q.s_hat,
            },
            &self.weights,
        )
    }

    fn respond(&self, req: &ScoreRequest) -> ScoreResponse {
        match self.score_one(req) {
            Ok(b) => ScoreResponse::Scored {
                id: req.id.clone(),
                r_q: b.r_quality,
                r_a: b.r_align,
                r_f: b.r_format,
                total: b.total,
                s_hat: b.s_hat,
            },
            Err(e) => ScoreResponse::Failed {
                id: req.id.clone(),
                error: e.to_string(),
            },
        }
    }

    /// One response per request, in request order; failures are inline.
    pub fn score_batch(&self, requests: &[ScoreRequest]) -> Vec<ScoreResponse> {
        requests.par_iter().map(|r| self.respond(r)).collect()
    }

    /// Scores raw JSON values, so a malformed object yields an inline error
    /// rather than rejecting the whole batch.
    pub fn score_values(&self, items: &[Value]) -> Vec<ScoreResponse> {
        items
            .par_iter()
            .map(|v| match ScoreRequest::deserialize(v) {
                Ok(req) => self.respond(&req),
                Err(e) => ScoreResponse::Failed {
                    id: v.get("id").cloned().unwrap_or(Value::Null),
                    error: format!("malformed request: {e}"),
                },
            })
            .collect()
    }

    /// One NDJSON line in, one out.
    pub fn score_line(&self, line: &str) -> String {
        let resp = match serde_json::from_str::<Value>(line) {
            Ok(v) => self.score_values(std::slice::from_ref(&v)).remove(0),
            Err(e) => ScoreResponse::Failed {
                id: Value::Null,
                error: format!("malformed request: {e}"),
            },
        };
        serde_json::to_string(&resp).expect("response serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::{IndexConfig, ReferenceIndex};
    use crate::model::{QualityLabel, TaskType};
    use crate::scoring::{QualityRewardParams, Weighting};
    use crate::stm::{smooth_stm, symmetric_noise_matrix, ScoreTransitionModel};

    #[test]
    fn alignment_examples() {
        let p = AlignmentParams::default();
        let a = [0.6, 0.8];
        assert_eq!(alignment_reward(&a, &a, &p).unwrap(), 1.0);
        assert_eq!(alignment_reward(&[1.0, 0.0], &[0.0, 1.0], &p).unwrap(), 0.0);
        // cos(60°) = 0.5 exactly in binary for these vectors.
        let b = [0.5, 0.75f64.sqrt()];
        let tau = crate::dot(&[1.0, 0.0], &b);
        let at = AlignmentParams::new(tau).unwrap();
        assert_eq!(alignment_reward(&[1.0, 0.0], &b, &at).unwrap(), 1.0);
        assert!(alignment_reward(&[1.0, 0.0], &[1.0, 0.0, 0.0], &p).is_err());
        assert!(alignment_reward(&[2.0, 0.0], &[1.0, 0.0], &p).is_err());
        assert!(AlignmentParams::new(-1.0).is_err());
    }

    #[test]
    fn format_examples() {
        assert_eq!(format_reward("<think>a</think><answer>b</answer>"), 1.0);
        assert_eq!(
            format_reward("  <think>a\nb</think>\n\n<answer>c\nd</answer>\n"),
            1.0
        );
        assert_eq!(format_reward("<answer>b</answer>"), 0.0);
        assert_eq!(
            format_reward("<think>a</think><answer>b</answer> trailing"),
            0.0
        );
        assert_eq!(format_reward("<think></think><answer>b</answer>"), 0.0);
        assert_eq!(format_reward("<think>a</think><answer></answer>"), 0.0);
        assert_eq!(
            format_reward("<think>a<think>x</think><answer>b</answer>"),
            0.0
        );
        assert_eq!(
            format_reward("<think>a</think><answer>b</answer><answer>c</answer>"),
            0.0
        );
        assert_eq!(format_reward("<think>a</think>x<answer>b</answer>"), 0.0);
    }

    #[test]
    fn total_examples() {
        let w = RewardWeights::default();
        let t = |q, a, f| {
            total_reward(
                &RewardComponents {
                    r_quality: q,
                    r_align: a,
                    r_format: f,
                    s_hat: 0.0,
                },
                &w,
            )
            .unwrap()
            .total
        };
        assert!((t(1.0, 1.0, 1.0) - 1.0).abs() < 1e-15);
        assert!((t(0.3, 1.0, 0.0) - 0.55).abs() < 1e-15);
        assert_eq!(t(0.0, 0.0, 0.0), 0.0);
        assert!(RewardWeights::new(0.5, 0.5, 0.1).is_err());
        assert!(RewardWeights::new(1.2, -0.2, 0.0).is_err());
    }

    fn sample(id: &str, i: &str, o: &str) -> InstructionSample {
        InstructionSample::new(id, i, o, TaskType::Qa)
    }

    #[test]
    fn linearize_examples() {
        let a = sample("a", "What is rust?", "A language.");
        let b = sample("b", "Define rust", "Iron oxide.");
        let t = LinearizeTemplate::default();
        let text = linearize_cluster(&[a.clone(), b.clone()], &t).unwrap();
        assert!(text.starts_with(LINEARIZE_HEADER));
        let p1 = text
            .find("Sample 1:\nInstruction: What is rust?\nOutput: A language.")
            .unwrap();
        let p2 = text
            .find("Sample 2:\nInstruction: Define rust\nOutput: Iron oxide.")
            .unwrap();
        assert!(p1 < p2);
        assert!(text.contains("<think>") && text.contains("<answer>"));
        assert_ne!(text, linearize_cluster(&[b, a.clone()], &t).unwrap());
        assert!(matches!(
            linearize_cluster(&[a], &t),
            Err(RewardError::VariantCount(1))
        ));
    }

    fn scorer() -> Scorer {
        let rows = vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![
                std::f64::consts::FRAC_1_SQRT_2,
                std::f64::consts::FRAC_1_SQRT_2,
            ],
        ];
        let labels = [5, 1, 4].map(|l| QualityLabel::new(l).unwrap()).to_vec();
        let idx = ReferenceIndex::from_vectors(rows, labels, &IndexConfig::default()).unwrap();
        let stm =
            ScoreTransitionModel::new(symmetric_noise_matrix(6, 0.8), vec![1.0 / 6.0; 6]).unwrap();
        let stm = smooth_stm(&stm, 0.02).unwrap();
        let q = QualityScorer::new(idx, stm, 2, Weighting::None, QualityRewardParams::default())
            .unwrap();
        Scorer::new(
            q,
            RewardWeights::default(),
            AlignmentParams::default(),
            None,
        )
        .unwrap()
    }

    fn request(id: i64, e: Vec<f64>) -> ScoreRequest {
        ScoreRequest {
            id: Value::from(id),
            generated_text: "<think>t</think><answer>a</answer>".into(),
            reference_text: None,
            e_gen: Some(e.clone()),
            e_ref: Some(e),
            variant_embeddings: None,
        }
    }

    #[test]
    fn batch_isolates_failures_and_preserves_order() {
        let s = scorer();
        let good = |id| request(id, vec![1.0, 0.0]);
        let mut bad = request(2, vec![1.0, 0.0, 0.0]);
        bad.e_ref = Some(vec![1.0, 0.0, 0.0]);
        let out = s.score_batch(&[good(1), bad, good(3)]);
        assert_eq!(out.len(), 3);
        assert_eq!(
            out.iter()
                .map(|r| r.id().as_i64().unwrap())
                .collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
        assert_eq!(out.iter().filter(|r| r.is_error()).count(), 1);
        assert!(out[1].is_error());
        assert!(s.score_batch(&[]).is_empty());
        let line = s.score_line(&serde_json::to_string(&good(7)).unwrap());
        assert_eq!(
            line,
            s.score_line(&serde_json::to_string(&good(7)).unwrap())
        );
        assert!(line.contains("\"total\""));
        assert!(s.score_line("{oops").contains("\"error\""));
    }

    #[test]
    fn label_free_mode_uses_variant_centroid() {
        let s = scorer();
        let mut r = request(1, vec![1.0, 0.0]);
        r.e_ref = None;
        r.variant_embeddings = Some(vec![vec![1.0, 0.0], vec![0.6, 0.8]]);
        let b = s.score_one(&r).unwrap();
        // centroid ∝ (1.6, 0.8): cosine with (1, 0) is 0.894 ≥ 0.7.
        assert_eq!(b.r_align, 1.0);
        r.variant_embeddings = Some(vec![vec![0.0, 1.0], vec![-0.6, 0.8]]);
        assert_eq!(s.score_one(&r).unwrap().r_align, 0.0);
    }
}
