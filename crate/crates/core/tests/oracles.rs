//! Checks against statrs as an independent reference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF, Discrete, DiscreteCDF, Poisson};

use jotrecon::likelihood::{ln_factorial, pmf, tail_prob};
use jotrecon::sensor::sample_poisson;

#[test]
fn tail_matches_reference_cdf() {
    for q in 1..=40u32 {
        for &lam in &[1e-3, 0.01, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 200.0] {
            let reference = Poisson::new(lam).unwrap();
            let p = tail_prob(q, lam).unwrap();
            let expected = reference.sf(q as u64 - 1);
            let tol = 1e-9 * expected.max(1e-300) + 1e-15;
            assert!((p - expected).abs() <= tol, "q={q} lambda={lam}: {p} vs {expected}");
        }
    }
}

#[test]
fn pmf_matches_reference() {
    for n in 0..60u64 {
        assert!((ln_factorial(n) - statrs::function::factorial::ln_factorial(n)).abs() < 1e-10);
        for &lam in &[0.3, 4.0, 25.0] {
            let expected = Poisson::new(lam).unwrap().pmf(n);
            assert!((pmf(n, lam) - expected).abs() <= 1e-12 * expected + 1e-300, "n={n} lambda={lam}");
        }
    }
}

/// Pearson chi-square goodness of fit of sampled counts, bins merged until
/// each expects at least 5 draws.
fn chi_square(lam: f64, draws: usize, seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hist = vec![0usize; 200];
    for _ in 0..draws {
        hist[(sample_poisson(&mut rng, lam) as usize).min(199)] += 1;
    }
    let reference = Poisson::new(lam).unwrap();
    let mut bins: Vec<(f64, usize)> = Vec::new();
    let (mut exp, mut obs) = (0.0, 0usize);
    for (k, &count) in hist.iter().enumerate() {
        exp += reference.pmf(k as u64) * draws as f64;
        obs += count;
        if exp >= 5.0 && reference.sf(k as u64) * draws as f64 >= 5.0 {
            bins.push((exp, obs));
            exp = 0.0;
            obs = 0;
        }
    }
    // whatever mass is left, including the partial bin, forms the last bin
    let dof = bins.len();
    let tail_exp = draws as f64 - bins.iter().map(|b| b.0).sum::<f64>();
    let tail_obs = draws - bins.iter().map(|b| b.1).sum::<usize>();
    bins.push((tail_exp, tail_obs));
    let stat = bins.iter().map(|(e, o)| (*o as f64 - e).powi(2) / e).sum();
    (stat, dof)
}

#[test]
fn sampler_passes_chi_square() {
    for (i, &lam) in [0.5, 2.0, 10.0, 45.0].iter().enumerate() {
        let (stat, df) = chi_square(lam, 20_000, 100 + i as u64);
        let critical = ChiSquared::new(df as f64).unwrap().inverse_cdf(0.99);
        assert!(stat < critical, "lambda={lam}: chi2 {stat:.2} on {df} dof exceeds {critical:.2}");
    }
}
