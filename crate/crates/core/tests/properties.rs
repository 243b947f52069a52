//! Randomized invariants across the public API.

use std::collections::HashSet;

use mixup_core::cluster::{
    assign_with_capacity, cluster, draw_capacities, init_centers, plan_objective, refine,
    ClusterConfig,
};
use mixup_core::grpo::{clipped_surrogate, group_normalize, kl_penalty, mean_std};
use mixup_core::ingest::{segment_article, split_sentences, SegmentConfig, WordPunctTokenizer};
use mixup_core::metrics::{js_divergence, mae, stratified_split};
use mixup_core::reward::{format_reward, total_reward, RewardComponents, RewardWeights};
use mixup_core::scoring::{
    histogram_from_neighbors, posterior_from_counts, quality_reward, QualityRewardParams, Weighting,
};
use mixup_core::select::{mix_select, Scored, SelectionConfig};
use mixup_core::stm::{
    analytic_stats, consensus_stats, smooth_stm, solve_stm, symmetric_noise_matrix,
    ScoreTransitionModel,
};
use mixup_core::{InstructionSample, TaskType};
use proptest::prelude::*;

fn simplex(raw: &[f64], floor: f64) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    let c = raw.len() as f64;
    raw.iter()
        .map(|x| floor + (1.0 - c * floor) * x / s)
        .collect()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let mut v = v.to_vec();
    if !mixup_core::normalize_in_place(&mut v) {
        v[0] = 1.0;
    }
    v
}

/// Diagonally dominant row: diagonal in (0.55, 0.9), rest spread by weights.
fn dominant_matrix(c: usize, diag: &[f64], off: &[f64]) -> Vec<Vec<f64>> {
    (0..c)
        .map(|i| {
            let w: Vec<f64> = (0..c).filter(|j| *j != i).map(|j| off[i * c + j]).collect();
            let ws: f64 = w.iter().sum();
            let mut it = w.iter();
            (0..c)
                .map(|j| {
                    if i == j {
                        diag[i]
                    } else {
                        (1.0 - diag[i]) * it.next().unwrap() / ws
                    }
                })
                .collect()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn stm_forward_backward_recovery(
        c in 3usize..=6,
        diag in prop::collection::vec(0.55f64..0.9, 6),
        off in prop::collection::vec(0.2f64..1.0, 36),
        praw in prop::collection::vec(0.3f64..1.0, 6),
    ) {
        let t = dominant_matrix(c, &diag[..c], &off);
        let p = simplex(&praw[..c], 0.0);
        let m = solve_stm(&analytic_stats(&t, &p, 3)).unwrap();
        for i in 0..c {
            for j in 0..c {
                prop_assert!((m.t[i][j] - t[i][j]).abs() <= 1e-3,
                    "T[{}][{}]: {} vs {}", i, j, m.t[i][j], t[i][j]);
            }
            prop_assert!((m.p[i] - p[i]).abs() <= 1e-3);
        }
    }
}

proptest! {
    #[test]
    fn smoothing_is_stochastic_and_monotone(
        rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 4), 4),
        a in 0.0f64..0.5,
        b in 0.0f64..0.5,
    ) {
        let t: Vec<Vec<f64>> = rows.iter().map(|r| {
            let r: Vec<f64> = r.iter().map(|x| x + 1e-3).collect();
            simplex(&r, 0.0)
        }).collect();
        let m = ScoreTransitionModel::new(t, vec![0.25; 4]).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let sl = smooth_stm(&m, lo).unwrap();
        let sh = smooth_stm(&m, hi).unwrap();
        let dist = |s: &ScoreTransitionModel| s.t.iter().flatten().map(|x| (x - 0.25).abs()).sum::<f64>();
        for row in &sh.t {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|x| *x >= hi / 4.0 - 1e-15));
        }
        prop_assert!(dist(&sh) <= dist(&sl) + 1e-12);
    }

    #[test]
    fn consensus_is_permutation_invariant(
        labels in prop::collection::vec(0usize..6, 8..40),
        seed in any::<u64>(),
    ) {
        use rand::{seq::SliceRandom, Rng, SeedableRng};
        let n = labels.len();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let knn: Vec<Vec<usize>> = (0..n).map(|i| {
            let mut a = rng.random_range(0..n - 1);
            if a >= i { a += 1; }
            let mut b = rng.random_range(0..n - 1);
            if b >= i { b += 1; }
            vec![a, b]
        }).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        // New position perm[i] holds old point i.
        let mut labels2 = vec![0; n];
        let mut knn2 = vec![Vec::new(); n];
        for i in 0..n {
            labels2[perm[i]] = labels[i];
            knn2[perm[i]] = knn[i].iter().map(|&j| perm[j]).collect();
        }
        let a = consensus_stats(&labels, &knn, 3, 6).unwrap();
        let b = consensus_stats(&labels2, &knn2, 3, 6).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn smoothed_identity_posterior_is_majority_vote(
        labels in prop::collection::vec(0usize..6, 2..12),
    ) {
        let m = ScoreTransitionModel::new(symmetric_noise_matrix(6, 1.0), vec![1.0 / 6.0; 6]).unwrap();
        let m = smooth_stm(&m, 1e-4).unwrap();
        let h = histogram_from_neighbors(&labels, &vec![0.1; labels.len()], 6, Weighting::None);
        let post = posterior_from_counts(&h.h, &m).unwrap();
        let top = h.h.iter().copied().fold(0.0, f64::max);
        prop_assume!(h.h.iter().filter(|x| **x == top).count() == 1);
        let majority = h.h.iter().position(|x| *x == top).unwrap();
        let best = post.iter().copied().fold(0.0, f64::max);
        let argmax = post.iter().position(|x| *x == best).unwrap();
        prop_assert_eq!(argmax, majority);
    }

    #[test]
    fn posterior_ignores_neighbor_order(
        pairs in prop::collection::vec((0usize..6, 0.0f64..1.0), 2..10),
        seed in any::<u64>(),
    ) {
        use rand::{seq::SliceRandom, SeedableRng};
        let m = smooth_stm(
            &ScoreTransitionModel::new(symmetric_noise_matrix(6, 0.7), vec![1.0 / 6.0; 6]).unwrap(),
            0.02,
        ).unwrap();
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        for w in [Weighting::None, Weighting::InverseDistance] {
            let (l1, d1): (Vec<usize>, Vec<f64>) = pairs.iter().copied().unzip();
            let (l2, d2): (Vec<usize>, Vec<f64>) = shuffled.iter().copied().unzip();
            let a = posterior_from_counts(&histogram_from_neighbors(&l1, &d1, 6, w).h, &m).unwrap();
            let b = posterior_from_counts(&histogram_from_neighbors(&l2, &d2, 6, w).h, &m).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quality_reward_steps_only_at_thresholds(s in 0.0f64..5.0, t in 0.0f64..5.0) {
        let p = QualityRewardParams::default();
        let region = |x: f64| (x >= p.kappa_thresh) as u8 + (x >= p.lambda_thresh) as u8;
        if region(s) == region(t) {
            prop_assert_eq!(quality_reward(s, &p), quality_reward(t, &p));
        } else if s < t {
            prop_assert!(quality_reward(s, &p) < quality_reward(t, &p));
        }
    }

    #[test]
    fn total_reward_is_linear(q in 0.0f64..1.0, a in 0.0f64..1.0, f in 0.0f64..1.0, h in 0.0f64..0.5) {
        let w = RewardWeights::default();
        let total = |q, a, f| total_reward(&RewardComponents { r_quality: q, r_align: a, r_format: f, s_hat: 0.0 }, &w).unwrap().total;
        let base = total(q, a, f);
        prop_assert!(((total(q + h, a, f) - base) / h - w.w_quality).abs() < 1e-9 || h < 1e-6);
        if a + h <= 1.0 {
            prop_assert!(((total(q, a + h, f) - base) / h - w.w_align).abs() < 1e-9 || h < 1e-6);
        }
        if f + h <= 1.0 {
            prop_assert!(((total(q, a, f + h) - base) / h - w.w_format).abs() < 1e-9 || h < 1e-6);
        }
    }

    #[test]
    fn rendered_template_always_matches(think in "[^<>]{1,40}", answer in "(?s)[^<>]{1,80}") {
        let text = format!("<think>{think}</think>\n<answer>{answer}</answer>");
        prop_assert_eq!(format_reward(&text), 1.0);
    }

    #[test]
    fn advantages_are_standardized(
        rewards in prop::collection::vec(-5.0f64..5.0, 2..16),
        shift in -10.0f64..10.0,
        scale in 0.1f64..10.0,
    ) {
        let (_, sigma) = mean_std(&rewards);
        prop_assume!(sigma > 1e-6);
        let adv = group_normalize(&rewards, 0.0).unwrap();
        let (mu_a, sd_a) = mean_std(&adv);
        prop_assert!(mu_a.abs() <= 1e-12);
        prop_assert!((sd_a - 1.0).abs() <= 1e-9);
        let moved: Vec<f64> = rewards.iter().map(|r| scale * r + shift).collect();
        let adv2 = group_normalize(&moved, 0.0).unwrap();
        for (x, y) in adv.iter().zip(&adv2) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn surrogate_is_pessimistic(r in 0.01f64..5.0, a in -3.0f64..3.0, eps in 0.01f64..0.99) {
        let s = clipped_surrogate(r, a, eps).unwrap();
        prop_assert!(s <= r * a + 1e-15);
        if (1.0 - eps..=1.0 + eps).contains(&r) {
            prop_assert_eq!(s, r * a);
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_only_at_equality(
        p in prop::collection::vec(-5.0f64..0.0, 1..12),
        d in prop::collection::vec(-2.0f64..2.0, 12),
    ) {
        let q: Vec<f64> = p.iter().zip(&d).map(|(a, b)| a + b).collect();
        let k = kl_penalty(&p, &q).unwrap();
        prop_assert!(k >= 0.0);
        prop_assert_eq!(kl_penalty(&p, &p).unwrap(), 0.0);
        if d[..p.len()].iter().any(|x| x.abs() > 1e-3) {
            prop_assert!(k > 0.0);
        }
    }

    #[test]
    fn js_bounds_and_symmetry(a in prop::collection::vec(0.0f64..1.0, 5), b in prop::collection::vec(0.0f64..1.0, 5)) {
        prop_assume!(a.iter().sum::<f64>() > 1e-3 && b.iter().sum::<f64>() > 1e-3);
        let p = simplex(&a, 0.0);
        let q = simplex(&b, 0.0);
        let j = js_divergence(&p, &q).unwrap();
        prop_assert!((0.0..=std::f64::consts::LN_2).contains(&j));
        prop_assert!((j - js_divergence(&q, &p).unwrap()).abs() < 1e-15);
        prop_assert_eq!(js_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn mae_is_translation_equivariant(
        pairs in prop::collection::vec((0.0f64..5.0, 0.0f64..5.0), 1..20),
        c in -3.0f64..3.0,
    ) {
        let (p, l): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let pc: Vec<f64> = p.iter().map(|x| x + c).collect();
        let lc: Vec<f64> = l.iter().map(|x| x + c).collect();
        prop_assert!((mae(&p, &l).unwrap() - mae(&pc, &lc).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn split_preserves_class_proportions(
        counts in prop::collection::vec(2usize..40, 1..6),
        frac in 0.05f64..0.95,
        seed in any::<u64>(),
    ) {
        let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, n)| std::iter::repeat_n(c, *n)).collect();
        let (r, e) = stratified_split(&labels, frac, seed).unwrap();
        let rs: HashSet<usize> = r.iter().copied().collect();
        prop_assert_eq!(r.len() + e.len(), labels.len());
        prop_assert!(e.iter().all(|i| !rs.contains(i)));
        for (c, n) in counts.iter().enumerate() {
            let got = e.iter().filter(|&&i| labels[i] == c).count() as f64;
            prop_assert!((got - *n as f64 * frac).abs() <= 1.0 + 1e-9, "class {}: {} of {}", c, got, n);
            prop_assert!(r.iter().any(|&i| labels[i] == c));
        }
    }

    #[test]
    fn selection_fills_quotas_without_duplicates(
        m in 5usize..30,
        o in 5usize..30,
        budget in 1usize..10,
        ratio in 0.0f64..=1.0,
        dup_every in 2usize..7,
    ) {
        let mk = |prefix: &str, n: usize, dup: bool| -> Vec<Scored> {
            (0..n).map(|i| {
                let text = if dup && i % dup_every == 0 { format!("shared {i}") } else { format!("{prefix} {i}") };
                Scored {
                    sample: InstructionSample::new(format!("{prefix}{i:03}"), &text, "out", TaskType::Qa),
                    score: ((i * 7919) % 101) as f64,
                }
            }).collect()
        };
        let mixup = mk("m", m, true);
        let original = mk("o", o, true);
        let cfg = SelectionConfig { budget, mix_ratio: ratio, k_longtail: 3 };
        if let Ok(sel) = mix_select(&mixup, &original, &cfg) {
            prop_assert_eq!(sel.mixup.len(), cfg.mixup_quota());
            prop_assert_eq!(sel.original.len(), budget - cfg.mixup_quota());
            let all = sel.into_vec();
            let keys: HashSet<(String, String)> = all.iter().map(|s| (s.instruction.clone(), s.output.clone())).collect();
            prop_assert_eq!(keys.len(), all.len());
        }
    }

    #[test]
    fn selection_is_stable_under_low_additions(extra in 1usize..5) {
        let mk = |prefix: &str, n: usize| -> Vec<Scored> {
            (0..n).map(|i| Scored {
                sample: InstructionSample::new(format!("{prefix}{i:03}"), format!("{prefix} {i}"), "out", TaskType::Qa),
                score: 10.0 + i as f64,
            }).collect()
        };
        let cfg = SelectionConfig { budget: 6, mix_ratio: 0.5, k_longtail: 3 };
        let (m, o) = (mk("m", 8), mk("o", 8));
        let before = mix_select(&m, &o, &cfg).unwrap();
        let mut m2 = m.clone();
        for i in 0..extra {
            m2.push(Scored {
                sample: InstructionSample::new(format!("z{i}"), format!("low {i}"), "out", TaskType::Qa),
                score: -1.0 - i as f64,
            });
        }
        prop_assert_eq!(mix_select(&m2, &o, &cfg).unwrap(), before);
    }

    #[test]
    fn segmentation_without_overlap_reconstructs_sentences(
        words in prop::collection::vec("[a-z]{1,8}(,|;)?", 1..200),
        cuts in prop::collection::vec(0usize..200, 0..30),
        limit in 4usize..40,
    ) {
        let mut text = String::new();
        let cutset: HashSet<usize> = cuts.into_iter().collect();
        for (i, w) in words.iter().enumerate() {
            text.push_str(w);
            text.push_str(if cutset.contains(&i) || i + 1 == words.len() { ". " } else { " " });
        }
        let cfg = SegmentConfig { token_limit: limit, overlap: 0, min_block: 0 };
        let blocks = segment_article(&text, &cfg, &WordPunctTokenizer).unwrap();
        let joined: Vec<&str> = blocks.iter().map(|b| b.text.as_str()).collect();
        prop_assert_eq!(joined.join(" "), split_sentences(&text).join(" "));
        for b in &blocks {
            prop_assert!(b.token_count <= limit);
        }
        prop_assert_eq!(segment_article(&text, &cfg, &WordPunctTokenizer).unwrap(), blocks);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn clustering_is_an_exact_bijection(
        n in 20usize..120,
        k in 2usize..10,
        seed in any::<u64>(),
    ) {
        prop_assume!(k * 2 <= n && n <= k * 20);
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| unit(&(0..6).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())).collect();
        let cfg = ClusterConfig { k, c_min: 2, c_max: 20, seed, ..ClusterConfig::default() };
        let plan = cluster(&pts, &cfg).unwrap();
        prop_assert_eq!(plan.assignment.len(), n);
        prop_assert_eq!(plan.sizes(), plan.capacities.clone());
        prop_assert!(plan.capacities.iter().all(|c| (2..=20).contains(c)));
        prop_assert_eq!(cluster(&pts, &cfg).unwrap(), plan);
    }

    #[test]
    fn refine_never_hurts(n in 20usize..100, k in 2usize..6, seed in any::<u64>(), steps in 0usize..6) {
        prop_assume!(k * 2 <= n && n <= k * 20);
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| unit(&(0..5).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())).collect();
        let caps = draw_capacities(n, k, 2, 20, n as f64 / k as f64, 4.5, seed).unwrap();
        let centers = init_centers(&pts, k, 16, 10, seed).unwrap();
        let plan = assign_with_capacity(&pts, &centers, &caps).unwrap();
        let better = refine(&plan, &pts, steps);
        prop_assert!(better.objective >= plan.objective);
        prop_assert_eq!(better.sizes(), plan.sizes());
        prop_assert!((better.objective - plan_objective(&pts, &better.assignment, &better.centers)).abs() < 1e-12);
    }
}

#[test]
fn two_blob_plan_beats_random_assignments() {
    use rand::{seq::SliceRandom, Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
    let means = [unit(&[1.0, 0.2, 0.0]), unit(&[0.0, 0.3, 1.0])];
    let pts: Vec<Vec<f64>> = (0..200)
        .map(|i| {
            let m = &means[i % 2];
            unit(
                &m.iter()
                    .map(|x| x + rng.random_range(-0.1..0.1))
                    .collect::<Vec<_>>(),
            )
        })
        .collect();
    let cfg = ClusterConfig {
        k: 2,
        c_min: 100,
        c_max: 100,
        seed: 1,
        ..ClusterConfig::default()
    };
    let plan = cluster(&pts, &cfg).unwrap();
    let mut random_total = 0.0;
    for _ in 0..100 {
        let mut a: Vec<usize> = plan.assignment.clone();
        a.shuffle(&mut rng);
        let centers: Vec<Vec<f64>> = (0..2)
            .map(|c| {
                let mut s = vec![0.0; 3];
                for (x, _) in pts.iter().zip(&a).filter(|(_, k)| **k == c) {
                    s.iter_mut().zip(x).for_each(|(t, v)| *t += v);
                }
                unit(&s)
            })
            .collect();
        random_total += plan_objective(&pts, &a, &centers);
    }
    assert!(plan.objective > random_total / 100.0);
}

#[test]
fn analytic_symmetric_noise_is_recovered() {
    let t = symmetric_noise_matrix(6, 0.7);
    let m = solve_stm(&analytic_stats(&t, &[1.0 / 6.0; 6], 3)).unwrap();
    for i in 0..6 {
        for j in 0..6 {
            assert!((m.t[i][j] - t[i][j]).abs() <= 1e-3);
        }
    }
}
