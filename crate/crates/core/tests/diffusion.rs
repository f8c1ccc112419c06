use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semsr::diffusion::{forward_marginal, forward_step, reverse_step, NoiseSchedule};
use semsr::rng::randn;
use semsr::tensor::LatentTensor;

fn latent(t: Tensor) -> LatentTensor {
    LatentTensor::latent(t).unwrap()
}

// Independent recomputation of the linear schedule's cumulative products.
fn oracle_alpha_bar(t: usize, n: usize, b0: f64, b1: f64) -> f64 {
    (0..=t)
        .map(|s| 1.0 - (b0 + (b1 - b0) * s as f64 / (n - 1) as f64))
        .product()
}

#[test]
fn linear_schedule_matches_oracle() {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    for t in [0, 1, 250, 500, 999] {
        let a = oracle_alpha_bar(t, 1000, 1e-4, 0.02);
        assert!((s.alpha_bars()[t] - a).abs() < 1e-12, "t={t}");
    }
    assert!((s.betas()[0] - 1e-4).abs() < 1e-15);
    assert!((s.betas()[999] - 0.02).abs() < 1e-15);
}

#[test]
fn marginal_moments_monte_carlo() {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let x0 = latent(randn(&mut rng, &[1, 1, 1, n], DType::F64).unwrap());
    let noise = latent(randn(&mut rng, &[1, 1, 1, n], DType::F64).unwrap());
    let xt = forward_marginal(&x0, 500, &s, &noise).unwrap();
    let bar = s.alpha_bars()[500];
    let resid: Vec<f64> = xt
        .to_vec()
        .unwrap()
        .iter()
        .zip(x0.to_vec().unwrap())
        .map(|(x, a)| x - bar.sqrt() * a)
        .collect();
    let mean = resid.iter().sum::<f64>() / n as f64;
    let var = resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let target = 1.0 - bar;
    assert!(mean.abs() < 0.02 * target.sqrt(), "mean {mean}");
    assert!((var - target).abs() < 0.02 * target, "var {var} vs {target}");
}

#[test]
fn chained_steps_agree_with_marginal_in_distribution() {
    // Composing single steps from x0 must give variance 1 - ᾱ_t around √ᾱ_t x0.
    let s = NoiseSchedule::linear(50, 1e-3, 0.05).unwrap();
    let n = 20_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0 = latent(Tensor::ones((1, 1, 1, n), DType::F64, &Device::Cpu).unwrap());
    let mut x = x0.clone();
    for t in 0..s.len() {
        let z = latent(randn(&mut rng, &[1, 1, 1, n], DType::F64).unwrap());
        x = forward_step(&x, t, &s, &z).unwrap();
    }
    let v = x.to_vec().unwrap();
    let bar = *s.alpha_bars().last().unwrap();
    let mean = v.iter().sum::<f64>() / n as f64;
    let var = v.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!((mean - bar.sqrt()).abs() < 0.03);
    assert!((var - (1.0 - bar)).abs() < 0.03 * (1.0 - bar));
}

#[test]
fn reverse_step_inverts_marginal() {
    // A one-jump respacing at t has ᾱ'_0 = ᾱ_t, so a noiseless reverse step
    // with the exact noise maps forward_marginal(x0, t) back onto x0.
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for t in (0..1000).step_by(50) {
        let x0 = latent(randn(&mut rng, &[2, 4, 3, 3], DType::F64).unwrap());
        let eps = latent(randn(&mut rng, &[2, 4, 3, 3], DType::F64).unwrap());
        let xt = forward_marginal(&x0, t, &s, &eps).unwrap();
        let jump = s.respace(&[t]).unwrap();
        let back = reverse_step(&xt, 0, &eps, &jump, None).unwrap();
        let (a, b) = (back.to_vec().unwrap(), x0.to_vec().unwrap());
        let num: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        assert!(num / den <= 1e-6, "t={t}: {}", num / den);
    }
}

#[test]
fn reverse_step_mean_matches_posterior_oracle() {
    // σ = 0 returns (x_t − β_t/√(1−ᾱ_t)·ε)/√α_t.
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let t = 400;
    let (x, e) = (0.7, -1.3);
    let xt = latent(Tensor::new(&[[[[x]]]], &Device::Cpu).unwrap());
    let eps = latent(Tensor::new(&[[[[e]]]], &Device::Cpu).unwrap());
    let got = reverse_step(&xt, t, &eps, &s, None).unwrap().to_vec().unwrap()[0];
    let beta = 1e-4 + (0.02 - 1e-4) * t as f64 / 999.0;
    let bar = oracle_alpha_bar(t, 1000, 1e-4, 0.02);
    let want = (x - beta / (1.0 - bar).sqrt() * e) / (1.0 - beta).sqrt();
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn respaced_schedule_keeps_cumulative_products() {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let ladder = s.ladder(999, 50).unwrap();
    assert_eq!(ladder.len(), 50);
    assert_eq!(ladder[0], 999);
    assert_eq!(*ladder.last().unwrap(), 0);
    let asc: Vec<usize> = ladder.iter().rev().copied().collect();
    let r = s.respace(&asc).unwrap();
    for (k, &t) in asc.iter().enumerate() {
        assert!((r.alpha_bars()[k] - s.alpha_bars()[t]).abs() < 1e-12);
    }
}

#[test]
fn out_of_range_timestep_rejected() {
    let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
    let x = latent(Tensor::zeros((1, 1, 1, 1), DType::F64, &Device::Cpu).unwrap());
    assert!(forward_marginal(&x, 10, &s, &x).is_err());
    assert!(NoiseSchedule::linear(10, 0.5, 1.5).is_err());
}

proptest! {
    #[test]
    fn alpha_bars_strictly_decrease(n in 2usize..400, b0 in 1e-5f64..1e-2, span in 1e-4f64..0.5) {
        let s = NoiseSchedule::linear(n, b0, (b0 + span).min(0.999)).unwrap();
        for w in s.alpha_bars().windows(2) {
            prop_assert!(w[1] < w[0]);
            prop_assert!(w[1] > 0.0);
        }
    }

    #[test]
    fn ladder_is_strictly_decreasing(start in 0usize..1000, steps in 1usize..120) {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let l = s.ladder(start, steps).unwrap();
        prop_assert_eq!(l[0], start);
        prop_assert!(l.len() <= steps);
        for w in l.windows(2) {
            prop_assert!(w[1] < w[0]);
        }
        if steps > 1 && start > 0 {
            prop_assert_eq!(*l.last().unwrap(), 0);
        }
    }

    #[test]
    fn marginal_is_linear_in_inputs(a in -3.0f64..3.0, e in -3.0f64..3.0, t in 0usize..1000) {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let x = latent(Tensor::new(&[[[[a]]]], &Device::Cpu).unwrap());
        let z = latent(Tensor::new(&[[[[e]]]], &Device::Cpu).unwrap());
        let got = forward_marginal(&x, t, &s, &z).unwrap().to_vec().unwrap()[0];
        let bar = s.alpha_bars()[t];
        prop_assert!((got - (bar.sqrt() * a + (1.0 - bar).sqrt() * e)).abs() < 1e-12);
    }
}
