mod common;

use common::{central_diff, gaussian, rel_err};
use metarm_core::models::*;
use metarm_core::numerics::seeded_rng;
use metarm_core::synth::random_feature_task;
use metarm_core::{FeatureMap, Prompt, Response, TaskInstance};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;

fn two_candidate_task(a: Vec<f64>, b: Vec<f64>) -> TaskInstance {
    TaskInstance::new(
        vec![Prompt { id: 0, features: vec![] }],
        vec![vec![Response { id: 0, features: vec![], length: 1 }, Response { id: 1, features: vec![], length: 1 }]],
        FeatureMap { policy: vec![vec![a.clone(), b.clone()]], reward: vec![vec![a, b]] },
        vec![1.0],
        vec![vec![0.5, 0.5]],
        None,
    )
    .unwrap()
}

#[test]
fn uniform_at_zero_weights() {
    let mut rng = seeded_rng(1);
    let task = random_feature_task(2, 4, 5, 3, &mut rng).unwrap();
    let theta = PolicyParams::zeros(5);
    for y in 0..4 {
        assert!((policy_logprob(&theta, &task, 1, y).unwrap() + 4f64.ln()).abs() < 1e-15);
    }
}

#[test]
fn out_of_range_candidate_is_domain_error() {
    let task = random_feature_task(2, 3, 4, 4, &mut seeded_rng(2)).unwrap();
    let theta = PolicyParams::zeros(4);
    assert!(matches!(policy_logprob(&theta, &task, 0, 3), Err(metarm_core::Error::Domain(_))));
    assert!(matches!(policy_grad(&theta, &task, 2, 0), Err(metarm_core::Error::Domain(_))));
}

#[test]
fn rows_normalize_within_1e12() {
    let mut rng = seeded_rng(3);
    for _ in 0..200 {
        let p = rng.random_range(1..=20);
        let n_y = rng.random_range(1..=8);
        let task = random_feature_task(3, n_y, p, 2, &mut rng).unwrap();
        let theta = PolicyParams::new(gaussian(p, 3.0, &mut rng));
        for x in 0..3 {
            let s: f64 = (0..n_y).map(|y| policy_logprob(&theta, &task, x, y).unwrap().exp()).sum();
            assert!((s - 1.0).abs() <= 1e-12, "sum {s}");
        }
    }
}

#[test]
fn common_score_shift_is_invisible() {
    // Adding the same vector c to every candidate's features shifts every
    // score by θ·c.
    let mut rng = seeded_rng(4);
    let task = random_feature_task(1, 5, 6, 2, &mut rng).unwrap();
    let c = gaussian(6, 1.0, &mut rng);
    let mut shifted = task.features.clone();
    for f in shifted.policy[0].iter_mut() {
        f.iter_mut().zip(&c).for_each(|(v, ci)| *v += ci);
    }
    let moved = TaskInstance::new(task.prompts.clone(), task.candidates.clone(), shifted, task.prompt_dist.clone(), task.reference.clone(), None).unwrap();
    let theta = PolicyParams::new(gaussian(6, 1.0, &mut rng));
    for y in 0..5 {
        let a = policy_logprob(&theta, &task, 0, y).unwrap();
        let b = policy_logprob(&theta, &moved, 0, y).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn single_candidate_has_no_gradient_or_curvature() {
    let task = random_feature_task(1, 1, 4, 2, &mut seeded_rng(5)).unwrap();
    let theta = PolicyParams::new(vec![0.3, -1.0, 2.0, 0.5]);
    assert_eq!(policy_logprob(&theta, &task, 0, 0).unwrap(), 0.0);
    assert!(policy_grad(&theta, &task, 0, 0).unwrap().iter().all(|g| g.abs() < 1e-15));
    assert!(policy_hessian(&theta, &task, 0).unwrap().max_abs() < 1e-15);
}

#[test]
fn symmetric_two_way_gradient() {
    let a = vec![1.0, -2.0, 0.5];
    let b = vec![0.0, 1.0, 1.5];
    let v: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let task = two_candidate_task(a, b);
    let theta = PolicyParams::zeros(3);
    let g0 = policy_grad(&theta, &task, 0, 0).unwrap();
    let g1 = policy_grad(&theta, &task, 0, 1).unwrap();
    for i in 0..3 {
        assert!((g0[i] - v[i] / 2.0).abs() < 1e-15);
        assert!((g1[i] + v[i] / 2.0).abs() < 1e-15);
    }
}

#[test]
fn gradient_and_hessian_match_finite_differences() {
    let mut rng = seeded_rng(6);
    for _ in 0..120 {
        let p = rng.random_range(1..=20);
        let n_y = rng.random_range(2..=6);
        let task = random_feature_task(2, n_y, p, 1, &mut rng).unwrap();
        let theta = gaussian(p, 1.0, &mut rng);
        let x = rng.random_range(0..2);
        let y = rng.random_range(0..n_y);
        let params = PolicyParams::new(theta.clone());

        let analytic = policy_grad(&params, &task, x, y).unwrap();
        let fd = central_diff(&theta, 1e-5, |t| policy_logprob(&PolicyParams::new(t.to_vec()), &task, x, y).unwrap());
        assert!(rel_err(&analytic, &fd) <= 1e-7, "grad rel err {}", rel_err(&analytic, &fd));

        let h = policy_hessian(&params, &task, x).unwrap();
        for i in 0..p {
            let col = central_diff(&theta, 1e-5, |t| policy_grad(&PolicyParams::new(t.to_vec()), &task, x, y).unwrap()[i]);
            assert!(rel_err(h.row(i), &col) <= 1e-6, "hessian row {i} rel err {}", rel_err(h.row(i), &col));
        }
    }
}

#[test]
fn hessian_is_negative_semidefinite_and_symmetric() {
    let mut rng = seeded_rng(7);
    for _ in 0..100 {
        let p = rng.random_range(1..=20);
        let n_y = rng.random_range(1..=8);
        let task = random_feature_task(1, n_y, p, 1, &mut rng).unwrap();
        let theta = PolicyParams::new(gaussian(p, 2.0, &mut rng));
        let h = policy_hessian(&theta, &task, 0).unwrap();
        let m = DMatrix::from_row_slice(p, p, h.as_slice());
        assert!((&m - m.transpose()).abs().max() < 1e-15);
        let eig = SymmetricEigen::new(m);
        assert!(eig.eigenvalues.iter().all(|l| *l <= 1e-10), "max eigenvalue {}", eig.eigenvalues.max());
    }
}

#[test]
fn hessian_does_not_depend_on_conditioning_response() {
    // The FD Jacobian of ∇ log π(y|x) is the same matrix for every y.
    let mut rng = seeded_rng(8);
    let task = random_feature_task(1, 5, 6, 1, &mut rng).unwrap();
    let theta = gaussian(6, 1.0, &mut rng);
    let jac = |y: usize| -> Vec<f64> {
        (0..6)
            .flat_map(|i| central_diff(&theta, 1e-5, |t| policy_grad(&PolicyParams::new(t.to_vec()), &task, 0, y).unwrap()[i]))
            .collect()
    };
    let first = jac(0);
    let h = policy_hessian(&PolicyParams::new(theta.clone()), &task, 0).unwrap();
    assert!(rel_err(h.as_slice(), &first) < 1e-6);
    for y in 1..5 {
        assert!(rel_err(&jac(y), &first) < 1e-7);
    }
}

#[test]
fn reward_is_odd_bounded_and_has_fd_gradient() {
    let mut rng = seeded_rng(9);
    let task = random_feature_task(3, 4, 2, 7, &mut rng).unwrap();
    let zero = RewardParams::zeros(7, 1.5).unwrap();
    assert_eq!(reward_value(&zero, &task, 0, 0).unwrap(), 0.0);
    let g0 = reward_grad(&zero, &task, 1, 2).unwrap();
    for (g, f) in g0.iter().zip(task.reward_features(1, 2)) {
        assert!((g - 1.5 * f).abs() < 1e-15);
    }

    for _ in 0..10_000 {
        let r_max = rng.random_range(0.1..5.0);
        let phi = RewardParams::new(gaussian(7, 20.0, &mut rng), r_max).unwrap();
        let (x, y) = (rng.random_range(0..3), rng.random_range(0..4));
        let r = reward_value(&phi, &task, x, y).unwrap();
        assert!(r.abs() <= r_max);
        assert!(r.exp() >= (-r_max).exp() && r.exp() <= r_max.exp());
    }

    for _ in 0..100 {
        let phi_v = gaussian(7, 1.0, &mut rng);
        let phi = RewardParams::new(phi_v.clone(), 2.0).unwrap();
        let neg = RewardParams::new(phi_v.iter().map(|v| -v).collect(), 2.0).unwrap();
        let (x, y) = (rng.random_range(0..3), rng.random_range(0..4));
        assert_eq!(reward_value(&neg, &task, x, y).unwrap(), -reward_value(&phi, &task, x, y).unwrap());
        let analytic = reward_grad(&phi, &task, x, y).unwrap();
        let fd = central_diff(&phi_v, 1e-5, |v| reward_value(&RewardParams::new(v.to_vec(), 2.0).unwrap(), &task, x, y).unwrap());
        assert!(rel_err(&analytic, &fd) <= 1e-7);
    }
}

#[test]
fn reward_directional_derivative_vanishes_orthogonal_to_features() {
    let task = two_candidate_task(vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]);
    let phi = RewardParams::new(vec![0.4, -0.7, 0.2], 1.0).unwrap();
    let g = reward_grad(&phi, &task, 0, 0).unwrap();
    let direction = [0.0, 0.0, 1.0];
    assert_eq!(g.iter().zip(&direction).map(|(a, b)| a * b).sum::<f64>(), 0.0);
}

#[test]
fn rejects_nonpositive_bound() {
    assert!(RewardParams::new(vec![0.0], 0.0).is_err());
    assert!(RewardParams::new(vec![0.0], -1.0).is_err());
}

#[test]
fn kl_conventions() {
    assert_eq!(kl_divergence(&[0.0, 1.0], &[0.5, 0.5]), 2f64.ln());
    assert_eq!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]), f64::INFINITY);
    assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
}
