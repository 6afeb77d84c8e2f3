//! Independent reference computations checked against the library.

use afcsim::afc::{efficiency_analytic, optimize_finesse, MinimumPhaseFilter};
use afcsim::fit::fit_exponential_lifetime;
use afcsim::noise::{
    added_variance_with, calibrate_photon_number, simulate_storage_events, StorageRun, VarianceOptions,
};
use afcsim::spectrum::{square_gaussian_fwhm, AbsorptionSpectrum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Natural optical depth from dB through the transmitted intensity.
fn nat(db: f64) -> f64 {
    -(10f64.powf(-db / 10.0)).ln()
}

/// Infinite Gaussian comb efficiency written out from scratch.
fn eq1(d_db: f64, f: f64, d0_db: f64) -> f64 {
    let dt = nat(d_db) / f;
    let pi = std::f64::consts::PI;
    dt * dt * (-dt).exp() * (-pi * pi / (4.0 * 2f64.ln() * f * f)).exp() * (-nat(d0_db)).exp()
}

#[test]
fn comb_efficiency_matches_reference_formula() {
    for (d, f, d0) in [(18.0, 3.94, 1.0), (18.0, 3.94, 0.08), (5.0, 1.5, 0.0), (40.0, 12.0, 2.5)] {
        let got = efficiency_analytic(d, f, d0).unwrap();
        assert!((got - eq1(d, f, d0)).abs() < 1e-12, "{d} {f} {d0}: {got}");
    }
    assert!((efficiency_analytic(18.0, 3.94, 1.0).unwrap() - 0.244).abs() <= 0.001);
    assert!((efficiency_analytic(18.0, 3.94, 0.08).unwrap() - 0.302).abs() <= 0.002);
}

#[test]
fn optimum_finesse_matches_grid_search() {
    for d in [5.0, 10.0, 18.0, 25.0, 40.0] {
        let opt = optimize_finesse(d, 1.0).unwrap();
        let (mut best_f, mut best) = (0.0, f64::NEG_INFINITY);
        for i in 0..200_000 {
            let f = 1.001 + i as f64 * 1e-4;
            let e = eq1(d, f, 1.0);
            if e > best {
                best = e;
                best_f = f;
            }
        }
        assert!((opt.finesse - best_f).abs() < 0.01, "d {d}: {} vs grid {best_f}", opt.finesse);
        assert!(opt.efficiency >= best - 1e-9);
    }
    let o = optimize_finesse(18.0, 1.0).unwrap();
    assert!((o.finesse - 3.19).abs() < 0.01 && (o.efficiency - 0.258).abs() < 0.001, "{o:?}");
}

#[test]
fn deep_comb_optimum_approaches_half_depth() {
    // Dephasing matters less as the comb deepens: F* → d/2 in natural units.
    let ratio = |d_db: f64| optimize_finesse(d_db, 0.0).unwrap().finesse / (nat(d_db) / 2.0);
    assert!((ratio(60.0) - 1.0).abs() < 0.1, "{}", ratio(60.0));
    assert!((ratio(600.0) - 1.0).abs() < 1e-3, "{}", ratio(600.0));
    assert!(ratio(600.0) < ratio(60.0));
}

#[test]
fn lorentzian_line_gets_dispersive_phase() {
    // A Lorentzian absorber of HWHM γ has the exact causal transfer
    // exp(-(α0/2)·γ/(γ + iΔ)); its phase is (α0/2)·γΔ/(γ² + Δ²).
    let (gamma, peak_db, step) = (0.1, 10.0, 0.005);
    let m = 10_000;
    let f: Vec<f64> = (-m..=m).map(|i| i as f64 * step).collect();
    let a: Vec<f64> = f.iter().map(|x| peak_db * gamma * gamma / (gamma * gamma + x * x)).collect();
    let sp = AbsorptionSpectrum::from_samples(f.clone(), a).unwrap();
    let h = MinimumPhaseFilter::new(&sp).unwrap();
    let half = nat(peak_db) / 2.0;
    let mut worst: f64 = 0.0;
    for (x, z) in f.iter().zip(&h.response) {
        if x.abs() > 5.0 {
            continue;
        }
        let want = half * gamma * x / (gamma * gamma + x * x);
        let amp = (-half * gamma * gamma / (gamma * gamma + x * x)).exp();
        assert!((z.norm() - amp).abs() < 1e-9);
        worst = worst.max((z.arg() - want).abs());
    }
    assert!(worst < 1e-3 * half, "phase error {worst}");
}

#[test]
fn square_gaussian_width_matches_brute_force() {
    // 1 kHz grid: square of 1000 kHz convolved with a 400 kHz FWHM Gaussian.
    let (w, fwhm) = (1000.0, 400.0);
    let sigma = fwhm / (8.0 * 2f64.ln()).sqrt();
    let xs: Vec<f64> = (-2000..=2000).map(|i| i as f64).collect();
    let kernel = |x: f64| (-0.5 * (x / sigma).powi(2)).exp();
    let prof: Vec<f64> = xs
        .iter()
        .map(|&x| (-500..=500).map(|j| j as f64).map(|s| kernel(x - s)).sum())
        .collect();
    let peak = prof.iter().copied().fold(0.0, f64::max);
    let i = prof.iter().position(|v| *v >= 0.5 * peak).unwrap();
    let frac = (0.5 * peak - prof[i - 1]) / (prof[i] - prof[i - 1]);
    let left = xs[i - 1] + frac;
    let brute = -2.0 * left;
    let got = square_gaussian_fwhm(w, fwhm).unwrap();
    assert!((got - brute).abs() < 2.0, "{got} vs {brute}");
}

#[test]
fn lifetime_fit_recovers_synthetic_decay() {
    let truth = 60.0;
    let normal = Normal::new(0.0, 0.05).unwrap();
    let mut within = 0;
    let mut covered = 0;
    let mut sum = 0.0;
    let seeds = 100;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<(f64, f64)> = (0..21)
            .map(|k| {
                let t = 10.0 * k as f64;
                (t, (-t / truth).exp() + normal.sample(&mut rng))
            })
            .collect();
        let fit = fit_exponential_lifetime(&samples).unwrap();
        sum += fit.lifetime_s;
        if (fit.lifetime_s - truth).abs() < 0.1 * truth {
            within += 1;
        }
        if (fit.lifetime_s - truth).abs() < 2.0 * fit.lifetime_stderr_s {
            covered += 1;
        }
    }
    assert!(within >= 95, "{within}/{seeds} within 10%");
    assert!((sum / seeds as f64 - truth).abs() < 0.02 * truth);
    assert!((88..=100).contains(&covered), "{covered}/{seeds} inside 2 standard errors");
}

fn options(resamples: usize) -> VarianceOptions {
    VarianceOptions {
        bootstrap_resamples: resamples,
        ..VarianceOptions::default()
    }
}

#[test]
fn vacuum_input_has_unit_variance() {
    let n = 100_000;
    let run = StorageRun {
        n_events: n,
        mean_photons_at_crystal: 0.0,
        rng_seed: 3,
        ..StorageRun::default()
    };
    let (_, echo) = simulate_storage_events(&run, 0.0).unwrap();
    let v = added_variance_with(&echo, &options(200)).unwrap();
    let sigma = (2.0 / n as f64).sqrt();
    assert!(v.estimate.abs() < 3.0 * sigma, "{}", v.estimate);
}

#[test]
fn injected_noise_round_trips() {
    let (n, seeds, injected) = (20_000, 100, 0.5);
    let total: f64 = (0..seeds)
        .map(|s| {
            let run = StorageRun {
                n_events: n,
                rng_seed: s,
                ..StorageRun::default()
            };
            let (_, echo) = simulate_storage_events(&run, injected).unwrap();
            added_variance_with(&echo, &options(20)).unwrap().estimate
        })
        .sum();
    let mean = total / seeds as f64;
    let sigma = (1.0 + injected) * (2.0 / (n as f64 * seeds as f64)).sqrt();
    assert!((mean - injected).abs() < 4.0 * sigma, "{mean}");
}

#[test]
fn bootstrap_interval_covers_truth() {
    let seeds = 200;
    let covered = (0..seeds)
        .filter(|&s| {
            let run = StorageRun {
                n_events: 5000,
                rng_seed: 1000 + s,
                ..StorageRun::default()
            };
            let (_, echo) = simulate_storage_events(&run, 0.0).unwrap();
            let v = added_variance_with(
                &echo,
                &VarianceOptions {
                    bootstrap_resamples: 400,
                    seed: s,
                    ..VarianceOptions::default()
                },
            )
            .unwrap();
            v.ci95.0 <= 0.0 && 0.0 <= v.ci95.1
        })
        .count();
    let frac = covered as f64 / seeds as f64;
    assert!((0.90..=0.99).contains(&frac), "coverage {frac}");
}

#[test]
fn echo_mean_amplitude_follows_photon_number() {
    let n = 100_000;
    let run = StorageRun {
        n_events: n,
        rng_seed: 11,
        ..StorageRun::default()
    };
    let (_, echo) = simulate_storage_events(&run, 0.0).unwrap();
    let v = added_variance_with(&echo, &options(20)).unwrap();
    let (_, a, b) = v.mean_fit;
    // |β|² = ⟨N⟩·η·T at the detector; the quadrature mean swings ±√2|β|.
    let beta = (0.8 * 0.22 * 10f64.powf(-0.63)).sqrt();
    let want = 2f64.sqrt() * beta;
    assert!(((a * a + b * b).sqrt() - want).abs() < 4.0 * (4.0 / n as f64).sqrt(), "{a} {b} vs {want}");
}

#[test]
fn photon_calibration_undoes_collection_loss() {
    let at_crystal = calibrate_photon_number(0.1875, 6.3).unwrap();
    assert!((at_crystal - 0.8).abs() < 0.001, "{at_crystal}");
    assert!((at_crystal * 10f64.powf(-0.63) - 0.1875).abs() < 1e-12);
}
