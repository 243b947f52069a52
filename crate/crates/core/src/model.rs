//! Domain types shared by every stage: samples, quality labels, judge ratings.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// Number of quality labels, `{0, 1, 2, 3, 4, 5}`.
pub const NUM_LABELS: usize = 6;

/// Allowed deviation of an embedding's L2 norm from 1.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// Smallest and largest number of low-quality variants behind one target.
pub const MIN_VARIANTS: usize = 2;
pub const MAX_VARIANTS: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("sample id is empty")]
    EmptyId,
    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),
    #[error("unknown task_type `{0}`")]
    UnknownTaskType(String),
    #[error("unknown variant `{0}`")]
    UnknownVariant(String),
    #[error("embedding of `{id}` has dimension {got}, corpus dimension is {expected}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        got: usize,
    },
    #[error("embedding of `{id}` has norm {norm}, expected 1 within {UNIT_NORM_TOLERANCE}")]
    NonUnitNorm { id: String, norm: f64 },
    #[error("embedding of `{0}` contains a non-finite value")]
    NonFiniteEmbedding(String),
    #[error("quality label {0} outside 0..=5")]
    LabelOutOfRange(i64),
    #[error("judge rating {0} outside 1..=10")]
    RatingOutOfRange(i64),
    #[error("distillation instance needs {MIN_VARIANTS}..={MAX_VARIANTS} variants, got {0}")]
    VariantCount(usize),
    #[error("variant `{id}` has task type {got}, target has {expected}")]
    MixedTaskTypes {
        id: String,
        expected: TaskType,
        got: TaskType,
    },
    #[error("malformed sample record: {0}")]
    Malformed(String),
}

/// The five generation task categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskType {
    Qa,
    Mcq,
    Cs,
    Tfq,
    Para,
}

impl TaskType {
    pub const ALL: [TaskType; 5] = [
        TaskType::Qa,
        TaskType::Mcq,
        TaskType::Cs,
        TaskType::Tfq,
        TaskType::Para,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskType::Qa => "qa",
            TaskType::Mcq => "mcq",
            TaskType::Cs => "cs",
            TaskType::Tfq => "tfq",
            TaskType::Para => "para",
        }
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskType {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| ModelError::UnknownTaskType(s.to_string()))
    }
}

/// How a sample was derived from its source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    Normal,
    CrossTopic,
    Noisy,
    #[default]
    Unknown,
}

impl VariantKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VariantKind::Normal => "normal",
            VariantKind::CrossTopic => "cross_topic",
            VariantKind::Noisy => "noisy",
            VariantKind::Unknown => "unknown",
        }
    }
}

impl FromStr for VariantKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            VariantKind::Normal,
            VariantKind::CrossTopic,
            VariantKind::Noisy,
            VariantKind::Unknown,
        ]
        .into_iter()
        .find(|v| v.as_str() == s)
        .ok_or_else(|| ModelError::UnknownVariant(s.to_string()))
    }
}

/// A quality label in `0..=5`. Judge-derived labels are `1..=5`; `0` marks a
/// rating that could not be parsed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "u8")]
pub struct QualityLabel(u8);

impl QualityLabel {
    pub const FAILED: QualityLabel = QualityLabel(0);

    pub fn new(value: i64) -> Result<Self, ModelError> {
        if (0..NUM_LABELS as i64).contains(&value) {
            Ok(QualityLabel(value as u8))
        } else {
            Err(ModelError::LabelOutOfRange(value))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl TryFrom<i64> for QualityLabel {
    type Error = ModelError;

    fn try_from(value: i64) -> Result<Self, Self::Error> {
        QualityLabel::new(value)
    }
}

impl From<QualityLabel> for u8 {
    fn from(l: QualityLabel) -> u8 {
        l.0
    }
}

impl fmt::Display for QualityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Judge sub-scores, each on a 1..=10 scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingVector {
    pub rarity: u8,
    pub complexity: u8,
    pub informativeness: u8,
    pub overall: u8,
}

impl RatingVector {
    pub fn new(
        rarity: i64,
        complexity: i64,
        informativeness: i64,
        overall: i64,
    ) -> Result<Self, ModelError> {
        let check = |v: i64| {
            if (1..=10).contains(&v) {
                Ok(v as u8)
            } else {
                Err(ModelError::RatingOutOfRange(v))
            }
        };
        Ok(RatingVector {
            rarity: check(rarity)?,
            complexity: check(complexity)?,
            informativeness: check(informativeness)?,
            overall: check(overall)?,
        })
    }

    /// Renders the rating in the judge's JSON response schema.
    pub fn to_judge_json(&self) -> String {
        format!(
            r#"{{"Rarity": {}, "Complexity": {}, "Informativeness": {}, "Overall rating": {}}}"#,
            self.rarity, self.complexity, self.informativeness, self.overall
        )
    }

    /// The label used downstream; only the aggregate field is consulted.
    pub fn label(&self) -> QualityLabel {
        discretize_rating(self.overall as i64).expect("validated at construction")
    }
}

/// Maps a judge "Overall rating" in `1..=10` onto labels `1..=5` via `ceil(x / 2)`.
pub fn discretize_rating(overall: i64) -> Result<QualityLabel, ModelError> {
    if !(1..=10).contains(&overall) {
        return Err(ModelError::RatingOutOfRange(overall));
    }
    QualityLabel::new((overall + 1) / 2)
}

/// Samples at label 4 or above count as high quality.
pub fn is_high_quality(label: QualityLabel) -> bool {
    label.value() >= 4
}

/// One instruction/output pair.
///
/// Fields not known to this type are kept in `extra` and written back on
/// serialization, so records pass through stages without losing annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionSample {
    pub id: String,
    pub instruction: String,
    pub output: String,
    pub task_type: TaskType,
    #[serde(default)]
    pub variant: VariantKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating_raw: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating: Option<QualityLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl InstructionSample {
    pub fn new(
        id: impl Into<String>,
        instruction: impl Into<String>,
        output: impl Into<String>,
        task_type: TaskType,
    ) -> Self {
        InstructionSample {
            id: id.into(),
            instruction: instruction.into(),
            output: output.into(),
            task_type,
            variant: VariantKind::Unknown,
            rating_raw: None,
            rating: None,
            embedding: None,
            source: None,
            extra: Map::new(),
        }
    }

    /// Parses one JSON-lines record, reporting enum violations by name
    /// rather than as a generic decode failure.
    pub fn from_json_str(line: &str) -> Result<Self, ModelError> {
        let value: Value =
            serde_json::from_str(line).map_err(|e| ModelError::Malformed(e.to_string()))?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self, ModelError> {
        if let Some(t) = value.get("task_type").and_then(Value::as_str) {
            t.parse::<TaskType>()?;
        }
        if let Some(v) = value.get("variant").and_then(Value::as_str) {
            v.parse::<VariantKind>()?;
        }
        if let Some(r) = value.get("rating").and_then(Value::as_i64) {
            QualityLabel::new(r)?;
        }
        serde_json::from_value(value).map_err(|e| ModelError::Malformed(e.to_string()))
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("sample serialization is infallible")
    }

    /// Sets the raw judge score and its discretized label together.
    pub fn set_judge_rating(&mut self, rating: &RatingVector) {
        self.rating_raw = Some(rating.overall);
        self.rating = Some(rating.label());
        self.extra.insert(
            "judge".to_string(),
            serde_json::to_value(rating).expect("rating serializes"),
        );
    }

    pub fn is_rated_high(&self) -> bool {
        self.rating.is_some_and(is_high_quality)
    }
}

/// Checks a sample against the per-corpus invariants. Returns it unchanged
/// when they hold.
pub fn validate_sample(s: InstructionSample, dim: usize) -> Result<InstructionSample, ModelError> {
    if s.id.is_empty() {
        return Err(ModelError::EmptyId);
    }
    if let Some(raw) = s.rating_raw {
        if !(1..=10).contains(&raw) {
            return Err(ModelError::RatingOutOfRange(raw as i64));
        }
    }
    if let Some(e) = &s.embedding {
        check_embedding(&s.id, e, dim)?;
    }
    Ok(s)
}

pub(crate) fn check_embedding(id: &str, e: &[f64], dim: usize) -> Result<(), ModelError> {
    if e.len() != dim {
        return Err(ModelError::DimensionMismatch {
            id: id.to_string(),
            expected: dim,
            got: e.len(),
        });
    }
    if e.iter().any(|x| !x.is_finite()) {
        return Err(ModelError::NonFiniteEmbedding(id.to_string()));
    }
    let norm = crate::norm(e);
    if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
        return Err(ModelError::NonUnitNorm {
            id: id.to_string(),
            norm,
        });
    }
    Ok(())
}

/// Validates a whole corpus: unique ids plus every per-sample invariant.
pub fn validate_corpus(samples: &[InstructionSample], dim: usize) -> Result<(), ModelError> {
    let mut seen = std::collections::HashSet::with_capacity(samples.len());
    for s in samples {
        if !seen.insert(s.id.as_str()) {
            return Err(ModelError::DuplicateId(s.id.clone()));
        }
        validate_sample(s.clone(), dim)?;
    }
    Ok(())
}

/// A high-quality target together with the low-quality variants it was
/// degraded into.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillationInstance {
    pub target: InstructionSample,
    pub variants: Vec<InstructionSample>,
}

impl DistillationInstance {
    pub fn new(
        target: InstructionSample,
        variants: Vec<InstructionSample>,
    ) -> Result<Self, ModelError> {
        if !(MIN_VARIANTS..=MAX_VARIANTS).contains(&variants.len()) {
            return Err(ModelError::VariantCount(variants.len()));
        }
        if let Some(v) = variants.iter().find(|v| v.task_type != target.task_type) {
            return Err(ModelError::MixedTaskTypes {
                id: v.id.clone(),
                expected: target.task_type,
                got: v.task_type,
            });
        }
        Ok(DistillationInstance { target, variants })
    }

    pub fn k(&self) -> usize {
        self.variants.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(d: usize, hot: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[hot] = 1.0;
        v
    }

    #[test]
    fn valid_sample_passes_through() {
        let mut s = InstructionSample::new("a", "Q", "A", TaskType::Qa);
        s.embedding = Some(unit(8, 3));
        let out = validate_sample(s.clone(), 8).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn half_norm_embedding_rejected() {
        let mut s = InstructionSample::new("a", "Q", "A", TaskType::Qa);
        let mut e = unit(8, 0);
        e[0] = 0.5;
        s.embedding = Some(e);
        assert!(matches!(
            validate_sample(s, 8),
            Err(ModelError::NonUnitNorm { .. })
        ));
    }

    #[test]
    fn dimension_and_id_checks() {
        let mut s = InstructionSample::new("a", "Q", "A", TaskType::Qa);
        s.embedding = Some(unit(4, 0));
        assert!(matches!(
            validate_sample(s.clone(), 8),
            Err(ModelError::DimensionMismatch {
                expected: 8,
                got: 4,
                ..
            })
        ));
        s.id.clear();
        assert_eq!(validate_sample(s, 4), Err(ModelError::EmptyId));
    }

    #[test]
    fn unknown_task_type_rejected() {
        let line =
            r#"{"id":"x","instruction":"i","output":"o","task_type":"essay","variant":"normal"}"#;
        assert_eq!(
            InstructionSample::from_json_str(line),
            Err(ModelError::UnknownTaskType("essay".into()))
        );
    }

    #[test]
    fn discretize_enumeration() {
        let expected = [1, 1, 2, 2, 3, 3, 4, 4, 5, 5];
        for (x, want) in (1..=10).zip(expected) {
            assert_eq!(discretize_rating(x).unwrap().value(), want, "overall {x}");
        }
        assert_eq!(discretize_rating(10).unwrap().value(), 5);
        assert_eq!(discretize_rating(7).unwrap().value(), 4);
        assert_eq!(discretize_rating(1).unwrap().value(), 1);
        assert!(discretize_rating(0).is_err());
        assert!(discretize_rating(11).is_err());
    }

    #[test]
    fn discretize_is_monotone_and_onto() {
        let labels: Vec<u8> = (1..=10)
            .map(|x| discretize_rating(x).unwrap().value())
            .collect();
        assert!(labels.windows(2).all(|w| w[0] <= w[1]));
        let mut distinct = labels.clone();
        distinct.dedup();
        assert_eq!(distinct, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn high_quality_partition() {
        let high: Vec<u8> = (0..6)
            .filter(|&v| is_high_quality(QualityLabel::new(v).unwrap()))
            .map(|v| v as u8)
            .collect();
        assert_eq!(high, vec![4, 5]);
    }

    #[test]
    fn unknown_fields_survive_round_trip() {
        let line = r#"{"id":"x","instruction":"i","output":"o","task_type":"mcq","variant":"cross_topic","rating_raw":7,"rating":4,"custom":{"a":[1,2]}}"#;
        let s = InstructionSample::from_json_str(line).unwrap();
        assert_eq!(s.rating, Some(QualityLabel::new(4).unwrap()));
        assert_eq!(s.extra["custom"]["a"][1], 2);
        let again = InstructionSample::from_json_str(&s.to_json_string()).unwrap();
        assert_eq!(again, s);
    }

    #[test]
    fn label_out_of_range_in_record() {
        let line = r#"{"id":"x","instruction":"i","output":"o","task_type":"qa","rating":9}"#;
        assert_eq!(
            InstructionSample::from_json_str(line),
            Err(ModelError::LabelOutOfRange(9))
        );
    }

    #[test]
    fn distillation_instance_bounds() {
        let t = InstructionSample::new("t", "i", "o", TaskType::Qa);
        let v = |id: &str, tt| InstructionSample::new(id, "i", "o", tt);
        assert!(DistillationInstance::new(t.clone(), vec![v("a", TaskType::Qa)]).is_err());
        assert!(matches!(
            DistillationInstance::new(t.clone(), vec![v("a", TaskType::Qa), v("b", TaskType::Cs)]),
            Err(ModelError::MixedTaskTypes { .. })
        ));
        let inst =
            DistillationInstance::new(t, vec![v("a", TaskType::Qa), v("b", TaskType::Qa)]).unwrap();
        assert_eq!(inst.k(), 2);
    }

    #[test]
    fn corpus_rejects_duplicate_ids() {
        let a = InstructionSample::new("a", "i", "o", TaskType::Qa);
        assert!(matches!(
            validate_corpus(&[a.clone(), a], 0),
            Err(ModelError::DuplicateId(_))
        ));
    }
}
