//! Noise-schedule and sampler properties.

use icc_core::sampler::{
    ddim_step, ddpm_step_to, forward_noising, make_linear_schedule, make_step_indices, predict_z0,
};
use icc_core::{Matrix, Rng};
use proptest::prelude::*;

#[test]
fn forward_noising_moments() {
    let sched = make_linear_schedule(100, 1e-4, 0.02).unwrap();
    let t = 60;
    let z0 = Matrix::filled(200, 250, 1.5);
    let eps = Matrix::randn(200, 250, 1.0, &mut Rng::new(9));
    let z = forward_noising(&z0, t, &eps, &sched).unwrap();
    let n = z.as_slice().len() as f64;
    let mean = z.as_slice().iter().sum::<f64>() / n;
    let var = z.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let ab = sched.alpha_bar(t);
    // Six standard errors of the sample mean / variance.
    let se_mean = ((1.0 - ab) / n).sqrt();
    let se_var = (1.0 - ab) * (2.0 / n).sqrt();
    assert!((mean - 1.5 * ab.sqrt()).abs() < 6.0 * se_mean, "{mean}");
    assert!((var - (1.0 - ab)).abs() < 6.0 * se_var, "{var}");
}

#[test]
fn ddim_with_true_noise_recovers_clean_sample() {
    // With the exact ε the deterministic sampler telescopes to z0.
    let sched = make_linear_schedule(50, 1e-4, 0.02).unwrap();
    let mut rng = Rng::new(3);
    let z0 = Matrix::randn(4, 6, 1.0, &mut rng);
    let eps = Matrix::randn(4, 6, 1.0, &mut rng);
    let steps = make_step_indices(50, 7).unwrap();
    let mut z = forward_noising(&z0, steps[0], &eps, &sched).unwrap();
    for (i, &t) in steps.iter().enumerate() {
        let t_prev = steps.get(i + 1).copied().unwrap_or(0);
        z = ddim_step(&z, &eps, t, t_prev, &sched).unwrap();
    }
    assert!(z.max_abs_diff(&z0).unwrap() < 1e-12);
}

#[test]
fn ddpm_mean_matches_posterior() {
    // E[z_{t-1} | z_t, z0] for the true ε equals the Gaussian posterior mean.
    let sched = make_linear_schedule(20, 1e-3, 0.05).unwrap();
    let t = 12;
    let z0 = Matrix::filled(1, 1, 0.7);
    let eps = Matrix::filled(1, 1, -0.4);
    let zt = forward_noising(&z0, t, &eps, &sched).unwrap();
    let (ab, ab_prev, a) = (sched.alpha_bar(t), sched.alpha_bar(t - 1), sched.alpha(t));
    let posterior = (ab_prev.sqrt() * (1.0 - a) / (1.0 - ab)) * 0.7
        + (a.sqrt() * (1.0 - ab_prev) / (1.0 - ab)) * zt[(0, 0)];
    let mut rng = Rng::new(1);
    let n = 200_000;
    let mut sum = 0.0;
    let mut sq = 0.0;
    for _ in 0..n {
        let v = ddpm_step_to(&zt, &eps, t, t - 1, &sched, &mut rng).unwrap()[(0, 0)];
        sum += v;
        sq += v * v;
    }
    let mean = sum / n as f64;
    let var = sq / n as f64 - mean * mean;
    assert!((mean - posterior).abs() < 5e-4, "{mean} vs {posterior}");
    assert!((var - sched.sigma(t).powi(2)).abs() < 0.02 * sched.sigma(t).powi(2));
}

proptest! {
    #[test]
    fn step_indices_are_a_descending_cover(total in 1usize..1200, frac in 0.0f64..1.0) {
        let n = 1 + ((total - 1) as f64 * frac) as usize;
        let idx = make_step_indices(total, n).unwrap();
        prop_assert_eq!(idx.len(), n);
        prop_assert_eq!(idx[0], total);
        if n > 1 {
            prop_assert_eq!(*idx.last().unwrap(), 1);
        }
        prop_assert!(idx.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn predict_z0_inverts_noising(t in 1usize..100, seed in any::<u64>()) {
        let sched = make_linear_schedule(100, 1e-4, 0.02).unwrap();
        let mut rng = Rng::new(seed);
        let z0 = Matrix::randn(3, 5, 1.0, &mut rng);
        let eps = Matrix::randn(3, 5, 1.0, &mut rng);
        let zt = forward_noising(&z0, t, &eps, &sched).unwrap();
        prop_assert!(predict_z0(&zt, &eps, t, &sched).unwrap().max_abs_diff(&z0).unwrap() < 1e-10);
    }
}

#[test]
fn invalid_requests_are_rejected() {
    assert!(make_step_indices(10, 0).is_err());
    assert!(make_step_indices(10, 11).is_err());
    assert!(make_linear_schedule(0, 1e-4, 0.02).is_err());
    let sched = make_linear_schedule(10, 1e-4, 0.02).unwrap();
    let z = Matrix::zeros(1, 1);
    assert!(ddim_step(&z, &z, 3, 3, &sched).is_err());
    assert!(forward_noising(&z, 11, &z, &sched).is_err());
}
