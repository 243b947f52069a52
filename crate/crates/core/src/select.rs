//! Long-tail scoring and ratio-mixed training-set assembly.

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::InstructionSample;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectError {
    #[error("k = {k} must be below the {n} points")]
    KTooLarge { k: usize, n: usize },
    #[error("k must be at least 1")]
    KZero,
    #[error("{pool} pool has {available} distinct samples, quota is {quota}")]
    QuotaExceedsPool {
        pool: &'static str,
        quota: usize,
        available: usize,
    },
    #[error("invalid selection config: {0}")]
    BadConfig(String),
    #[error("sample {0} has no embedding")]
    MissingEmbedding(String),
    #[error("row {row} has dimension {got}, expected {expected}")]
    Dimension {
        row: usize,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub budget: usize,
    pub mix_ratio: f64,
    pub k_longtail: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            budget: 10_000,
            mix_ratio: 0.5,
            k_longtail: 10,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<(), SelectError> {
        if self.budget < 1 {
            return Err(SelectError::BadConfig("budget must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return Err(SelectError::BadConfig(
                "mix_ratio must lie in [0, 1]".into(),
            ));
        }
        if self.k_longtail < 1 {
            return Err(SelectError::KZero);
        }
        Ok(())
    }

    /// Mixup share of the budget, rounded half up.
    pub fn mixup_quota(&self) -> usize {
        ((self.budget as f64 * self.mix_ratio + 0.5).floor() as usize).min(self.budget)
    }
}

/// Mean cosine distance from each point to its `k` nearest other points.
pub fn longtail_score(embeddings: &[Vec<f64>], k: usize) -> Result<Vec<f64>, SelectError> {
    let n = embeddings.len();
    if k == 0 {
        return Err(SelectError::KZero);
    }
    if k >= n {
        return Err(SelectError::KTooLarge { k, n });
    }
    let d = embeddings[0].len();
    if let Some(row) = embeddings.iter().position(|e| e.len() != d) {
        return Err(SelectError::Dimension {
            row,
            expected: d,
            got: embeddings[row].len(),
        });
    }
    Ok(embeddings
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut dist: Vec<f64> = embeddings
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, y)| (1.0 - crate::dot(x, y)).max(0.0))
                .collect();
            dist.select_nth_unstable_by(k - 1, f64::total_cmp);
            dist[..k].iter().sum::<f64>() / k as f64
        })
        .collect())
}

/// Long-tail scores for samples carrying embeddings.
pub fn score_samples(samples: &[InstructionSample], k: usize) -> Result<Vec<f64>, SelectError> {
    let rows = samples
        .iter()
        .map(|s| {
            s.embedding
                .clone()
                .ok_or_else(|| SelectError::MissingEmbedding(s.id.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    longtail_score(&rows, k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub sample: InstructionSample,
    pub score: f64,
}

impl Scored {
    pub fn zip(samples: Vec<InstructionSample>, scores: Vec<f64>) -> Vec<Scored> {
        samples
            .into_iter()
            .zip(scores)
            .map(|(sample, score)| Scored { sample, score })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub mixup: Vec<InstructionSample>,
    pub original: Vec<InstructionSample>,
}

impl Selection {
    pub fn into_vec(self) -> Vec<InstructionSample> {
        let mut all = self.mixup;
        all.extend(self.original);
        all
    }
}

/// Identical `(instruction, output)` texts across both pools collapse onto the
/// lowest id. Each pool is then ranked by descending score, ties by id, and
/// cut at its quota; dropped duplicates are replaced by the next ranks.
pub fn mix_select(
    mixup_pool: &[Scored],
    original_pool: &[Scored],
    cfg: &SelectionConfig,
) -> Result<Selection, SelectError> {
    cfg.validate()?;
    let mut survivor: HashMap<(&str, &str), &str> = HashMap::new();
    for s in mixup_pool.iter().chain(original_pool) {
        let key = (s.sample.instruction.as_str(), s.sample.output.as_str());
        let id = s.sample.id.as_str();
        survivor
            .entry(key)
            .and_modify(|cur| {
                if id < *cur {
                    *cur = id;
                }
            })
            .or_insert(id);
    }
    let mut taken: HashSet<(&str, &str)> = HashSet::new();
    let mixup_quota = cfg.mixup_quota();
    let mixup = pick("mixup", mixup_pool, mixup_quota, &survivor, &mut taken)?;
    let original = pick(
        "original",
        original_pool,
        cfg.budget - mixup_quota,
        &survivor,
        &mut taken,
    )?;
    Ok(Selection { mixup, original })
}

fn pick<'a>(
    pool: &'static str,
    items: &'a [Scored],
    quota: usize,
    survivor: &HashMap<(&'a str, &'a str), &'a str>,
    taken: &mut HashSet<(&'a str, &'a str)>,
) -> Result<Vec<InstructionSample>, SelectError> {
    let mut ranked: Vec<&Scored> = items.iter().collect();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.sample.id.cmp(&b.sample.id))
    });
    let mut out = Vec::with_capacity(quota);
    let mut available = 0;
    for s in ranked {
        let key = (s.sample.instruction.as_str(), s.sample.output.as_str());
        if survivor[&key] != s.sample.id || taken.contains(&key) {
            continue;
        }
        available += 1;
        if out.len() < quota {
            taken.insert(key);
            out.push(s.sample.clone());
        }
    }
    if out.len() < quota {
        return Err(SelectError::QuotaExceedsPool {
            pool,
            quota,
            available,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TaskType;

    fn pool(prefix: &str, n: usize) -> Vec<Scored> {
        (0..n)
            .map(|i| Scored {
                sample: InstructionSample::new(
                    format!("{prefix}{i:03}"),
                    format!("{prefix} question {i}"),
                    format!("answer {i}"),
                    TaskType::Qa,
                ),
                score: i as f64 / n as f64,
            })
            .collect()
    }

    fn cfg(budget: usize, ratio: f64) -> SelectionConfig {
        SelectionConfig {
            budget,
            mix_ratio: ratio,
            k_longtail: 10,
        }
    }

    #[test]
    fn quota_examples() {
        let s = mix_select(&pool("m", 20), &pool("o", 20), &cfg(10, 0.7)).unwrap();
        assert_eq!((s.mixup.len(), s.original.len()), (7, 3));
        assert_eq!(s.mixup[0].id, "m019");
        let s = mix_select(&pool("m", 20), &pool("o", 20), &cfg(10, 0.0)).unwrap();
        assert_eq!((s.mixup.len(), s.original.len()), (0, 10));
        assert!(matches!(
            mix_select(&pool("m", 5), &pool("o", 5), &cfg(20, 0.5)),
            Err(SelectError::QuotaExceedsPool { .. })
        ));
        assert_eq!(cfg(5, 0.5).mixup_quota(), 3);
        assert_eq!(cfg(100, 0.7).mixup_quota(), 70);
    }

    #[test]
    fn duplicates_keep_lowest_id_and_backfill() {
        let m = pool("m", 6);
        let mut o = pool("o", 6);
        // The top original item duplicates a mixup item with a lower id.
        o[5].sample.instruction = m[0].sample.instruction.clone();
        o[5].sample.output = m[0].sample.output.clone();
        let s = mix_select(&m, &o, &cfg(6, 0.5)).unwrap();
        let ids: Vec<&str> = s.original.iter().map(|x| x.id.as_str()).collect();
        assert_eq!(ids, vec!["o004", "o003", "o002"]);
        let all = s.into_vec();
        let keys: std::collections::HashSet<_> = all
            .iter()
            .map(|x| (x.instruction.clone(), x.output.clone()))
            .collect();
        assert_eq!(keys.len(), all.len());
    }

    #[test]
    fn ties_break_by_id() {
        let mut m = pool("m", 4);
        m.iter_mut().for_each(|s| s.score = 1.0);
        let s = mix_select(&m, &pool("o", 4), &cfg(2, 1.0)).unwrap();
        assert_eq!(
            s.mixup.iter().map(|x| x.id.as_str()).collect::<Vec<_>>(),
            vec!["m000", "m001"]
        );
    }

    #[test]
    fn longtail_examples() {
        let a = vec![1.0, 0.0, 0.0];
        let dup = vec![a.clone(); 4];
        assert_eq!(longtail_score(&dup, 3).unwrap(), vec![0.0; 4]);

        let mut pts = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.995, 0.0998749, 0.0],
            vec![0.995, -0.0998749, 0.0],
            vec![0.99, 0.0, 0.141067],
        ];
        pts.iter_mut().for_each(|v| {
            crate::normalize_in_place(v);
        });
        pts.push(vec![0.0, 1.0, 0.0]);
        let s = longtail_score(&pts, 2).unwrap();
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(s[4], max);
        assert!(s[..4].iter().all(|x| *x < max));
        assert_eq!(
            longtail_score(&dup, 4),
            Err(SelectError::KTooLarge { k: 4, n: 4 })
        );
    }
}
