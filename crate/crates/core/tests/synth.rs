use metarm_core::linalg::dot;
use metarm_core::numerics::{logistic, seeded_rng};
use metarm_core::synth::*;
use metarm_core::TaskInstance;

fn two_candidate(r0: f64, r1: f64) -> TaskInstance {
    TaskInstance::tabular(vec![1.0], vec![vec![0.5, 0.5]], None, Some(vec![r0, r1])).unwrap()
}

/// Fraction of comparisons in which candidate 0 is preferred.
fn win_rate(task: &TaskInstance, n: usize, seed: u64) -> f64 {
    let prefs = gen_pref_data(task, n, &mut seeded_rng(seed)).unwrap();
    prefs.iter().filter(|nu| nu.preferred == 0).count() as f64 / n as f64
}

fn binomial_se(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

#[test]
fn prior_mean_is_recovered_by_monte_carlo() {
    let spec = MetaDistributionSpec { n_prompts: 2, n_candidates: 2, prompt_dim: 12, response_dim: 12, ..Default::default() };
    let dist = MetaDistribution::new(spec.clone()).unwrap();
    let n = 1000;
    for split in [Split::Train, Split::Heldout] {
        let mut mean = [0.0; 12];
        for id in 0..n {
            let t = sample_task(&dist, split, id, &mut seeded_rng(task_seed(7, split, id))).unwrap();
            mean.iter_mut().zip(t.true_weights()).for_each(|(m, w)| *m += w / n as f64);
        }
        let se = spec.prior_scale / (n as f64).sqrt();
        for (m, target) in mean.iter().zip(dist.split_mean(split)) {
            assert!((m - target).abs() <= 3.0 * se, "{split}: {m} vs {target}");
        }
    }
    let shift: Vec<f64> = dist.split_mean(Split::Heldout).iter().zip(&dist.prior_mean).map(|(a, b)| a - b).collect();
    assert!((dot(&shift, &shift).sqrt() - spec.shift).abs() < 1e-12);
}

#[test]
fn reference_is_boltzmann_in_true_reward() {
    let dist = MetaDistribution::new(MetaDistributionSpec::default()).unwrap();
    let t = sample_task(&dist, Split::Train, 0, &mut seeded_rng(1)).unwrap();
    let task = &t.task;
    for x in 0..task.n_prompts() {
        let r: Vec<f64> = (0..task.n_candidates(x)).map(|y| task.true_reward_of(x, y).unwrap()).collect();
        let z: f64 = r.iter().map(|v| v.exp()).sum();
        for (y, ri) in r.iter().enumerate() {
            assert!((task.reference[x][y] - ri.exp() / z).abs() < 1e-12);
        }
        assert!((task.reference[x].iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
    assert!((task.prompt_dist.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
}

#[test]
fn fine_tuning_frequencies_match_reference() {
    let mut rng = seeded_rng(2);
    let task = random_tabular_task(3, 4, &mut rng).unwrap();
    let n = 100_000;
    let data = gen_ft_data(&task, n, &mut rng).unwrap();
    let mut counts = vec![vec![0usize; 4]; 3];
    for z in &data {
        counts[z.prompt][z.response] += 1;
    }
    let mut chi2 = 0.0;
    #[allow(clippy::needless_range_loop)]
    for x in 0..3 {
        for y in 0..4 {
            let p = task.prompt_dist[x] * task.reference[x][y];
            let f = counts[x][y] as f64 / n as f64;
            assert!((f - p).abs() <= 4.0 * binomial_se(p, n), "cell ({x},{y}): {f} vs {p}");
            chi2 += (counts[x][y] as f64 - n as f64 * p).powi(2) / (n as f64 * p);
        }
    }
    // 11 degrees of freedom; 99.9% quantile is 31.26.
    assert!(chi2 < 31.26, "chi-square {chi2}");
}

#[test]
fn preference_rates_follow_bradley_terry() {
    let n = 100_000;
    for (i, margin) in [-2.0, -0.5, 0.0, 0.3, 1.0, 3.0].into_iter().enumerate() {
        let task = two_candidate(margin, 0.0);
        let p = logistic(margin);
        let rate = win_rate(&task, n, 100 + i as u64);
        assert!((rate - p).abs() <= 3.0 * binomial_se(p, n), "margin {margin}: {rate} vs {p}");
    }
}

#[test]
fn constant_reward_gives_fair_coin() {
    let n = 100_000;
    let rate = win_rate(&two_candidate(1.7, 1.7), n, 9);
    assert!((rate - 0.5).abs() <= 3.0 * binomial_se(0.5, n));
}

#[test]
fn negated_reward_gives_complementary_rates() {
    let n = 100_000;
    let p = logistic(1.2);
    let pos = win_rate(&two_candidate(1.2, 0.0), n, 11);
    let neg = win_rate(&two_candidate(-1.2, 0.0), n, 11);
    assert!((pos - p).abs() <= 3.0 * binomial_se(p, n));
    assert!((neg - (1.0 - p)).abs() <= 3.0 * binomial_se(p, n));
    assert!((pos + neg - 1.0).abs() <= 6.0 * binomial_se(p, n));
}

#[test]
fn suite_is_reproducible_and_split_tagged() {
    let spec = MetaDistributionSpec { n_prompts: 6, n_ft: 100, n_pref: 50, ..Default::default() };
    let a = generate_suite(&spec).unwrap();
    let b = generate_suite(&spec).unwrap();
    assert_eq!(a.train, b.train);
    assert_eq!(a.heldout, b.heldout);
    assert_eq!(a.train.len(), 8);
    assert_eq!(a.heldout.len(), 4);
    assert!(a.train.iter().all(|t| t.task.split == Split::Train));
    assert!(a.heldout.iter().all(|t| t.task.split == Split::Heldout));
    let other = generate_suite(&MetaDistributionSpec { seed: 1, ..spec }).unwrap();
    assert_ne!(other.train, a.train);
}
