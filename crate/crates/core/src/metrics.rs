//! Agreement metrics between calibrated and raw scores, and the stratified
//! reference/evaluation split.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("eval fraction {0} outside (0, 1)")]
    BadFraction(f64),
    #[error("label {label} has {count} member(s); stratification needs at least 2")]
    ClassTooSmall { label: usize, count: usize },
    #[error("distribution sums to {0}, not 1")]
    NotNormalized(f64),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("no samples")]
    Empty,
}

/// Splits indices per label class so each class contributes its
/// proportional share to the evaluation side. Shares are apportioned by
/// largest remainder against `round(N * fraction)`, and every class keeps at
/// least one reference member. Both index lists are returned ascending.
pub fn stratified_split(
    labels: &[usize],
    eval_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), MetricsError> {
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(MetricsError::BadFraction(eval_fraction));
    }
    let mut classes: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        classes.entry(l).or_default().push(i);
    }
    if let Some((&label, members)) = classes.iter().find(|(_, m)| m.len() < 2) {
        return Err(MetricsError::ClassTooSmall {
            label,
            count: members.len(),
        });
    }
    let target = (labels.len() as f64 * eval_fraction).round() as usize;
    let mut quota: Vec<(usize, usize, f64)> = classes
        .iter()
        .map(|(&l, m)| {
            let exact = m.len() as f64 * eval_fraction;
            let q = (exact.floor() as usize).min(m.len() - 1);
            (l, q, exact - exact.floor())
        })
        .collect();
    let assigned: usize = quota.iter().map(|q| q.1).sum();
    let mut order: Vec<usize> = (0..quota.len()).collect();
    order.sort_by(|&a, &b| quota[b].2.total_cmp(&quota[a].2).then(a.cmp(&b)));
    let mut left = target.saturating_sub(assigned);
    for &i in &order {
        if left == 0 {
            break;
        }
        let cap = classes[&quota[i].0].len() - 1;
        if quota[i].1 < cap {
            quota[i].1 += 1;
            left -= 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reference = Vec::new();
    let mut eval = Vec::new();
    for (l, q, _) in quota {
        let mut members = classes[&l].clone();
        members.shuffle(&mut rng);
        eval.extend_from_slice(&members[..q]);
        reference.extend_from_slice(&members[q..]);
    }
    reference.sort_unstable();
    eval.sort_unstable();
    Ok((reference, eval))
}

fn check_distribution(p: &[f64]) -> Result<(), MetricsError> {
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 || p.iter().any(|x| *x < 0.0) {
        return Err(MetricsError::NotNormalized(s));
    }
    Ok(())
}

fn kl_to_mixture(p: &[f64], m: &[f64]) -> f64 {
    p.iter()
        .zip(m)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, mi)| pi * (pi / mi).ln())
        .sum()
}

/// Natural-log Jensen-Shannon divergence.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64, MetricsError> {
    if p.len() != q.len() {
        return Err(MetricsError::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    check_distribution(p)?;
    check_distribution(q)?;
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let js = 0.5 * kl_to_mixture(p, &m) + 0.5 * kl_to_mixture(q, &m);
    Ok(js.clamp(0.0, std::f64::consts::LN_2))
}

pub fn mae(predicted: &[f64], labels: &[f64]) -> Result<f64, MetricsError> {
    if predicted.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            left: predicted.len(),
            right: labels.len(),
        });
    }
    if predicted.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(predicted
        .iter()
        .zip(labels)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / predicted.len() as f64)
}

/// Counts of `predicted - raw`.
pub fn residual_histogram(
    predicted: &[i64],
    raw: &[i64],
) -> Result<BTreeMap<i64, usize>, MetricsError> {
    if predicted.len() != raw.len() {
        return Err(MetricsError::LengthMismatch {
            left: predicted.len(),
            right: raw.len(),
        });
    }
    let mut h = BTreeMap::new();
    for (p, r) in predicted.iter().zip(raw) {
        *h.entry(p - r).or_insert(0) += 1;
    }
    Ok(h)
}

/// Empirical distribution of labels over `0..num_labels`.
pub fn label_distribution(labels: &[usize], num_labels: usize) -> Vec<f64> {
    let mut d = vec![0.0; num_labels];
    labels.iter().for_each(|&l| d[l] += 1.0);
    let n = labels.len().max(1) as f64;
    d.iter_mut().for_each(|x| *x /= n);
    d
}

/// Nearest label, halves rounded up, clamped to `0..num_labels`.
pub fn round_to_label(s: f64, num_labels: usize) -> usize {
    ((s + 0.5).floor().max(0.0) as usize).min(num_labels - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub js: f64,
    pub mae: f64,
    pub residual_hist: BTreeMap<i64, usize>,
    pub n: usize,
}

/// Compares expected scores with reference labels: JS between the
/// distributions of rounded scores and labels, MAE on the raw expectations,
/// and residuals of the rounded scores.
pub fn evaluate(
    s_hat: &[f64],
    labels: &[usize],
    num_labels: usize,
) -> Result<MetricsReport, MetricsError> {
    if s_hat.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            left: s_hat.len(),
            right: labels.len(),
        });
    }
    if s_hat.is_empty() {
        return Err(MetricsError::Empty);
    }
    let rounded: Vec<usize> = s_hat
        .iter()
        .map(|s| round_to_label(*s, num_labels))
        .collect();
    let js = js_divergence(
        &label_distribution(&rounded, num_labels),
        &label_distribution(labels, num_labels),
    )?;
    let label_f: Vec<f64> = labels.iter().map(|l| *l as f64).collect();
    let residual_hist = residual_histogram(
        &rounded.iter().map(|r| *r as i64).collect::<Vec<_>>(),
        &labels.iter().map(|l| *l as i64).collect::<Vec<_>>(),
    )?;
    Ok(MetricsReport {
        js,
        mae: mae(s_hat, &label_f)?,
        residual_hist,
        n: s_hat.len(),
    })
}

/// One line per residual: value, count and a proportional bar.
pub fn histogram_text(h: &BTreeMap<i64, usize>) -> String {
    let max = h.values().copied().max().unwrap_or(0).max(1);
    let mut out = String::new();
    for (r, c) in h {
        let bar = "#".repeat((c * 40).div_ceil(max));
        writeln!(out, "{r:>+3} {c:>7} {bar}").expect("write to string");
    }
    out
}

/// Standalone SVG bar chart of residual counts.
pub fn histogram_svg(h: &BTreeMap<i64, usize>, title: &str) -> String {
    const W: f64 = 480.0;
    const H: f64 = 260.0;
    const PAD: f64 = 36.0;
    let (lo, hi) = match (h.keys().next(), h.keys().next_back()) {
        (Some(a), Some(b)) => (*a.min(&0), *b.max(&0)),
        _ => (0, 0),
    };
    let bins = (hi - lo + 1) as f64;
    let max = h.values().copied().max().unwrap_or(0).max(1) as f64;
    let bw = (W - 2.0 * PAD) / bins;
    let esc = title
        .replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;");
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="18" text-anchor="middle">{esc}</text>"#,
        W / 2.0
    )
    .unwrap();
    writeln!(
        s,
        r##"<line x1="{PAD}" y1="{}" x2="{}" y2="{}" stroke="#333"/>"##,
        H - PAD,
        W - PAD,
        H - PAD
    )
    .unwrap();
    for r in lo..=hi {
        let c = h.get(&r).copied().unwrap_or(0) as f64;
        let x = PAD + (r - lo) as f64 * bw;
        let bh = (H - 2.0 * PAD - 10.0) * c / max;
        writeln!(
            s,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#4a78b0"><title>{r}: {c}</title></rect>"##,
            x + 2.0,
            H - PAD - bh,
            (bw - 4.0).max(1.0),
            bh
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{r:+}</text>"#,
            x + bw / 2.0,
            H - PAD + 14.0
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}
