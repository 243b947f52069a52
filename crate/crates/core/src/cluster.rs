//! Capacity-constrained clustering of unit embeddings.
//!
//! Sizes are fixed up front by [`draw_capacities`]. Centers come from
//! mini-batch k-means, points are placed greedily by descending cosine
//! similarity subject to remaining capacity, and [`refine`] performs
//! size-preserving swaps that strictly improve the similarity objective.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dot;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error("infeasible capacities: N = {n} outside [{lo}, {hi}] for K = {k}, bounds [{c_min}, {c_max}]")]
    Infeasible {
        n: usize,
        k: usize,
        c_min: usize,
        c_max: usize,
        lo: usize,
        hi: usize,
    },
    #[error("K = {k} exceeds N = {n}")]
    TooManyClusters { k: usize, n: usize },
    #[error("capacities sum to {got}, expected {expected}")]
    CapacitySum { expected: usize, got: usize },
    #[error("no points to cluster")]
    Empty,
    #[error("row {row} has dimension {got}, expected {expected}")]
    Dimension {
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("invalid parameter: {0}")]
    BadParam(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapacityVector {
    pub c: Vec<usize>,
    pub c_min: usize,
    pub c_max: usize,
    pub n: usize,
}

/// Draws `K` sizes from a normal truncated to `[c_min, c_max]`, rounds, then
/// moves one unit at a time on the entries with the most slack until the
/// total is `N`. Slack ties go to the larger rounding remainder, then the
/// lower index.
pub fn draw_capacities(
    n: usize,
    k: usize,
    c_min: usize,
    c_max: usize,
    mean: f64,
    std: f64,
    seed: u64,
) -> Result<CapacityVector, ClusterError> {
    let infeasible = || ClusterError::Infeasible {
        n,
        k,
        c_min,
        c_max,
        lo: k.saturating_mul(c_min),
        hi: k.saturating_mul(c_max),
    };
    if k == 0 || c_min > c_max || n < k.saturating_mul(c_min) || n > k.saturating_mul(c_max) {
        return Err(infeasible());
    }
    if !(std >= 0.0) || !mean.is_finite() {
        return Err(ClusterError::BadParam(
            "mean must be finite and std >= 0".into(),
        ));
    }
    let (lo, hi) = (c_min as f64, c_max as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = (std > 0.0).then(|| Normal::new(mean, std).expect("std checked"));
    let draws: Vec<f64> = (0..k)
        .map(|_| match &normal {
            None => mean.clamp(lo, hi),
            Some(dist) => {
                for _ in 0..1_000 {
                    let x = dist.sample(&mut rng);
                    if (lo..=hi).contains(&x) {
                        return x;
                    }
                }
                // Mass inside the bounds is negligible; fall back to clamping.
                dist.sample(&mut rng).clamp(lo, hi)
            }
        })
        .collect();
    let mut c: Vec<usize> = draws
        .iter()
        .map(|x| (x.round() as usize).clamp(c_min, c_max))
        .collect();
    let remainder: Vec<f64> = draws.iter().map(|x| x - x.floor()).collect();
    let mut total: usize = c.iter().sum();
    while total != n {
        let grow = total < n;
        let pick = (0..k)
            .filter(|&i| if grow { c[i] < c_max } else { c[i] > c_min })
            .max_by(|&a, &b| {
                let slack = |i: usize| if grow { c_max - c[i] } else { c[i] - c_min };
                let rem = |i: usize| {
                    if grow {
                        remainder[i]
                    } else {
                        1.0 - remainder[i]
                    }
                };
                slack(a)
                    .cmp(&slack(b))
                    .then(rem(a).total_cmp(&rem(b)))
                    .then(b.cmp(&a))
            })
            .expect("feasibility guarantees slack");
        if grow {
            c[pick] += 1;
            total += 1;
        } else {
            c[pick] -= 1;
            total -= 1;
        }
    }
    Ok(CapacityVector { c, c_min, c_max, n })
}

fn check_rows(rows: &[Vec<f64>]) -> Result<usize, ClusterError> {
    let d = rows.first().ok_or(ClusterError::Empty)?.len();
    for (row, r) in rows.iter().enumerate() {
        if r.len() != d {
            return Err(ClusterError::Dimension {
                row,
                expected: d,
                got: r.len(),
            });
        }
    }
    Ok(d)
}

fn nearest(x: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (i, c) in centers.iter().enumerate() {
        let s = dot(x, c);
        if s > best_sim {
            best_sim = s;
            best = i;
        }
    }
    best
}

/// Mini-batch k-means with per-center learning rate `1 / count`. Centers are
/// seeded from `K` distinct random points and returned at unit norm.
pub fn init_centers(
    embeddings: &[Vec<f64>],
    k: usize,
    batch_size: usize,
    iters: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>, ClusterError> {
    let n = embeddings.len();
    check_rows(embeddings)?;
    if k == 0 {
        return Err(ClusterError::BadParam("K must be positive".into()));
    }
    if k > n {
        return Err(ClusterError::TooManyClusters { k, n });
    }
    if k == n {
        return Ok(embeddings.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    let mut centers: Vec<Vec<f64>> = idx.iter().map(|&i| embeddings[i].clone()).collect();
    let mut counts = vec![0usize; k];
    let b = batch_size.clamp(1, n);
    for _ in 0..iters {
        let batch: Vec<usize> = (0..b).map(|_| rng.random_range(0..n)).collect();
        let owners: Vec<usize> = batch
            .par_iter()
            .map(|&i| nearest(&embeddings[i], &centers))
            .collect();
        for (&i, &c) in batch.iter().zip(&owners) {
            counts[c] += 1;
            let eta = 1.0 / counts[c] as f64;
            for (v, x) in centers[c].iter_mut().zip(&embeddings[i]) {
                *v = (1.0 - eta) * *v + eta * x;
            }
        }
    }
    for (c, &i) in centers.iter_mut().zip(&idx) {
        if !crate::normalize_in_place(c) {
            c.clone_from(&embeddings[i]);
        }
    }
    Ok(centers)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterPlan {
    pub assignment: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    pub capacities: Vec<usize>,
    pub objective: f64,
}

impl ClusterPlan {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.centers.len()];
        self.assignment.iter().for_each(|&a| s[a] += 1);
        s
    }

    /// Member rows of each cluster, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.centers.len()];
        for (i, &a) in self.assignment.iter().enumerate() {
            m[a].push(i);
        }
        m
    }
}

/// Mean cosine similarity between points and their assigned centers.
pub fn plan_objective(embeddings: &[Vec<f64>], assignment: &[usize], centers: &[Vec<f64>]) -> f64 {
    if embeddings.is_empty() {
        return 0.0;
    }
    let total: f64 = embeddings
        .par_iter()
        .zip(assignment)
        .map(|(x, &a)| dot(x, &centers[a]))
        .sum();
    total / embeddings.len() as f64
}

/// Normalized member means; an empty or vanishing mean keeps the old center.
fn recompute_centers(
    embeddings: &[Vec<f64>],
    assignment: &[usize],
    old: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let d = old.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; d]; old.len()];
    for (x, &a) in embeddings.iter().zip(assignment) {
        for (s, v) in sums[a].iter_mut().zip(x) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(old)
        .map(|(mut s, o)| {
            if crate::normalize_in_place(&mut s) {
                s
            } else {
                o.clone()
            }
        })
        .collect()
}

/// Greedy placement over all (point, cluster) pairs by descending
/// similarity, ties by point then cluster index. Centers are then set to the
/// normalized means of their members.
pub fn assign_with_capacity(
    embeddings: &[Vec<f64>],
    centers: &[Vec<f64>],
    caps: &CapacityVector,
) -> Result<ClusterPlan, ClusterError> {
    let n = embeddings.len();
    let k = centers.len();
    let got: usize = caps.c.iter().sum();
    if got != n {
        return Err(ClusterError::CapacitySum { expected: n, got });
    }
    if caps.c.len() != k {
        return Err(ClusterError::BadParam(format!(
            "{} capacities for {k} centers",
            caps.c.len()
        )));
    }
    check_rows(embeddings)?;
    let mut pairs: Vec<(f64, u32, u32)> = embeddings
        .par_iter()
        .enumerate()
        .flat_map_iter(|(i, x)| {
            centers
                .iter()
                .enumerate()
                .map(move |(c, ctr)| (dot(x, ctr), i as u32, c as u32))
        })
        .collect();
    pairs.par_sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut remaining = caps.c.clone();
    let mut assignment = vec![usize::MAX; n];
    let mut placed = 0;
    for (_, i, c) in pairs {
        let (i, c) = (i as usize, c as usize);
        if assignment[i] == usize::MAX && remaining[c] > 0 {
            assignment[i] = c;
            remaining[c] -= 1;
            placed += 1;
            if placed == n {
                break;
            }
        }
    }
    let centers = recompute_centers(embeddings, &assignment, centers);
    let objective = plan_objective(embeddings, &assignment, &centers);
    Ok(ClusterPlan {
        assignment,
        centers,
        capacities: caps.c.clone(),
        objective,
    })
}

/// Candidate clusters examined per point during refinement.
const SWAP_TARGETS: usize = 4;

/// Up to `steps` rounds of size-preserving pair swaps. Within a round the
/// centers are fixed and a swap is taken only if it strictly raises the
/// summed similarity; each round evaluates at most `10 N` pairs, visiting
/// the worst-placed points first. Centers are then re-estimated and kept
/// only if the objective does not drop.
pub fn refine(plan: &ClusterPlan, embeddings: &[Vec<f64>], steps: usize) -> ClusterPlan {
    let n = embeddings.len();
    let mut plan = plan.clone();
    for _ in 0..steps {
        let mut members = plan.members();
        let mut pos = vec![0usize; n];
        for m in &members {
            for (p, &i) in m.iter().enumerate() {
                pos[i] = p;
            }
        }
        let own: Vec<f64> = embeddings
            .par_iter()
            .zip(&plan.assignment)
            .map(|(x, &a)| dot(x, &plan.centers[a]))
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| own[a].total_cmp(&own[b]).then(a.cmp(&b)));

        let mut budget = 10 * n;
        let mut swaps = 0usize;
        for &i in &order {
            if budget == 0 {
                break;
            }
            let a = plan.assignment[i];
            let s_ia = dot(&embeddings[i], &plan.centers[a]);
            let mut targets: Vec<(f64, usize)> = plan
                .centers
                .iter()
                .enumerate()
                .filter(|(b, _)| *b != a)
                .map(|(b, c)| (dot(&embeddings[i], c), b))
                .filter(|(s, _)| *s > s_ia)
                .collect();
            targets.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
            let mut best: Option<(f64, usize)> = None;
            'targets: for &(s_ib, b) in targets.iter().take(SWAP_TARGETS) {
                for &j in &members[b] {
                    if budget == 0 {
                        break 'targets;
                    }
                    budget -= 1;
                    let gain = s_ib + dot(&embeddings[j], &plan.centers[a])
                        - s_ia
                        - dot(&embeddings[j], &plan.centers[b]);
                    if gain > 0.0 && best.is_none_or(|(g, _)| gain > g) {
                        best = Some((gain, j));
                    }
                }
            }
            if let Some((_, j)) = best {
                let b = plan.assignment[j];
                let (pi, pj) = (pos[i], pos[j]);
                members[a][pi] = j;
                members[b][pj] = i;
                pos[i] = pj;
                pos[j] = pi;
                plan.assignment[i] = b;
                plan.assignment[j] = a;
                swaps += 1;
            }
        }
        let before = plan_objective(embeddings, &plan.assignment, &plan.centers);
        let centers = recompute_centers(embeddings, &plan.assignment, &plan.centers);
        let after = plan_objective(embeddings, &plan.assignment, &centers);
        if after >= before {
            plan.centers = centers;
            plan.objective = after;
        } else {
            plan.objective = before;
        }
        if swaps == 0 {
            break;
        }
    }
    plan
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub k: usize,
    pub c_min: usize,
    pub c_max: usize,
    /// Defaults to `N / K`.
    pub mean: Option<f64>,
    /// Defaults to `(c_max - c_min) / 4`.
    pub std: Option<f64>,
    pub batch_size: usize,
    pub iters: usize,
    pub refine_steps: usize,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            k: 2,
            c_min: 2,
            c_max: 20,
            mean: None,
            std: None,
            batch_size: 256,
            iters: 100,
            refine_steps: 10,
            seed: 0,
        }
    }
}

/// Capacities, centers, greedy assignment and refinement in one call.
pub fn cluster(embeddings: &[Vec<f64>], cfg: &ClusterConfig) -> Result<ClusterPlan, ClusterError> {
    let n = embeddings.len();
    check_rows(embeddings)?;
    if cfg.k > n {
        return Err(ClusterError::TooManyClusters { k: cfg.k, n });
    }
    let mean = cfg.mean.unwrap_or(n as f64 / cfg.k.max(1) as f64);
    let std = cfg
        .std
        .unwrap_or((cfg.c_max as f64 - cfg.c_min as f64) / 4.0);
    let caps = draw_capacities(n, cfg.k, cfg.c_min, cfg.c_max, mean, std, cfg.seed)?;
    let centers = init_centers(
        embeddings,
        cfg.k,
        cfg.batch_size,
        cfg.iters,
        cfg.seed ^ 0x9e37_79b9_7f4a_7c15,
    )?;
    let plan = assign_with_capacity(embeddings, &centers, &caps)?;
    Ok(refine(&plan, embeddings, cfg.refine_steps))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        let mut v = v.to_vec();
        crate::normalize_in_place(&mut v);
        v
    }

    #[test]
    fn capacity_examples() {
        for seed in 0..20 {
            let c = draw_capacities(10, 2, 3, 7, 5.0, 1.0, seed).unwrap();
            assert_eq!(c.c.iter().sum::<usize>(), 10);
            assert!(c.c.iter().all(|x| (3..=7).contains(x)));
        }
        assert_eq!(
            draw_capacities(6, 2, 3, 3, 3.0, 0.0, 1).unwrap().c,
            vec![3, 3]
        );
        assert!(matches!(
            draw_capacities(100, 2, 3, 7, 50.0, 1.0, 0),
            Err(ClusterError::Infeasible { hi: 14, .. })
        ));
        assert_eq!(
            draw_capacities(10, 2, 3, 7, 5.0, 1.0, 4),
            draw_capacities(10, 2, 3, 7, 5.0, 1.0, 4)
        );
    }

    fn separable() -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let a = unit(&[1.0, 0.1]);
        let b = unit(&[0.1, 1.0]);
        (vec![a.clone(), a.clone(), b.clone(), b.clone()], vec![a, b])
    }

    #[test]
    fn assignment_examples() {
        let (pts, centers) = separable();
        let caps = CapacityVector {
            c: vec![2, 2],
            c_min: 2,
            c_max: 2,
            n: 4,
        };
        let plan = assign_with_capacity(&pts, &centers, &caps).unwrap();
        assert_eq!(plan.assignment, vec![0, 0, 1, 1]);

        let same = vec![unit(&[1.0, 1.0]); 4];
        let caps13 = CapacityVector {
            c: vec![1, 3],
            c_min: 1,
            c_max: 3,
            n: 4,
        };
        let plan = assign_with_capacity(&same, &centers, &caps13).unwrap();
        assert_eq!(plan.sizes(), vec![1, 3]);

        let short = CapacityVector {
            c: vec![1, 2],
            c_min: 1,
            c_max: 3,
            n: 3,
        };
        assert_eq!(
            assign_with_capacity(&pts, &centers, &short),
            Err(ClusterError::CapacitySum {
                expected: 4,
                got: 3
            })
        );
    }

    #[test]
    fn refine_examples() {
        let (pts, centers) = separable();
        let caps = CapacityVector {
            c: vec![2, 2],
            c_min: 2,
            c_max: 2,
            n: 4,
        };
        let good = assign_with_capacity(&pts, &centers, &caps).unwrap();
        assert_eq!(refine(&good, &pts, 10), good);
        assert_eq!(refine(&good, &pts, 0), good);

        let crossed = ClusterPlan {
            assignment: vec![0, 1, 0, 1],
            centers: centers.clone(),
            capacities: vec![2, 2],
            objective: plan_objective(&pts, &[0, 1, 0, 1], &centers),
        };
        let fixed = refine(&crossed, &pts, 10);
        assert!(fixed.objective > crossed.objective);
        assert_eq!(fixed.sizes(), vec![2, 2]);
        assert_eq!(fixed.assignment[0], fixed.assignment[1]);
        assert_eq!(fixed.assignment[2], fixed.assignment[3]);
        assert_ne!(fixed.assignment[0], fixed.assignment[2]);
    }

    #[test]
    fn init_center_examples() {
        let pts = vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0]), unit(&[1.0, 1.0])];
        assert_eq!(init_centers(&pts, 3, 8, 10, 0).unwrap(), pts);
        assert_eq!(
            init_centers(&pts, 4, 8, 10, 0),
            Err(ClusterError::TooManyClusters { k: 4, n: 3 })
        );
    }

    #[test]
    fn two_blobs_find_both_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let means = [unit(&[1.0, 0.0, 0.0, 0.2]), unit(&[0.0, 1.0, 0.3, 0.0])];
        let mut pts = Vec::new();
        for i in 0..200 {
            let m = &means[i % 2];
            let v: Vec<f64> = m
                .iter()
                .map(|x| x + rng.random_range(-0.05..0.05))
                .collect();
            pts.push(unit(&v));
        }
        let centers = init_centers(&pts, 2, 32, 50, 3).unwrap();
        for m in &means {
            let best = centers
                .iter()
                .map(|c| 1.0 - dot(c, m))
                .fold(f64::INFINITY, f64::min);
            assert!(best < 0.1, "closest center at distance {best}");
        }
    }

    #[test]
    fn end_to_end_is_deterministic_and_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Vec<f64>> = (0..300)
            .map(|_| {
                unit(
                    &(0..8)
                        .map(|_| rng.random_range(-1.0..1.0))
                        .collect::<Vec<_>>(),
                )
            })
            .collect();
        let cfg = ClusterConfig {
            k: 30,
            c_min: 2,
            c_max: 20,
            seed: 5,
            ..ClusterConfig::default()
        };
        let a = cluster(&pts, &cfg).unwrap();
        let b = cluster(&pts, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.sizes(), a.capacities);
    }
}
