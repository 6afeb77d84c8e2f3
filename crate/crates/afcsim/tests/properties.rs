//! Property suites over randomized inputs.

use afcsim::afc::{
    echo_simulate, efficiency_analytic, optimize_finesse, CombParams, MinimumPhaseFilter, Pulse, ToothShape,
};
use afcsim::hyperfine::{transition_frequency, Level, LevelScheme, N_LEVELS};
use afcsim::noise::{simulate_storage_events, StorageRun};
use afcsim::population::{
    apply_burn, apply_sweep, init_thermal, relax, run_protocol, BurnParams, GridSpec, LaserModel, ProtocolScript,
    PumpModel, RelaxationRates, SpectralPopulationGrid, SweepParams,
};
use afcsim::spectrum::{
    convolve_square_gaussian, square_gaussian_fwhm, synthesize, AbsorptionSpectrum, DbCalibration, Window,
};
use proptest::prelude::*;

fn small_spec() -> GridSpec {
    GridSpec {
        half_width_mhz: 400.0,
        coarse_step_khz: 500.0,
        fine_center_mhz: 0.0,
        fine_half_width_mhz: 5.0,
        fine_step_khz: 50.0,
    }
}

fn thermal(t_k: f64) -> (LevelScheme, SpectralPopulationGrid) {
    let s = LevelScheme::default();
    let g = init_thermal(&s, &small_spec(), t_k, 0.0, 1.0).unwrap();
    (s, g)
}

fn level() -> impl Strategy<Value = Level> {
    (0usize..N_LEVELS).prop_map(|i| Level::from_index(i).unwrap())
}

fn burn() -> impl Strategy<Value = BurnParams> {
    (level(), -1i32..=1, -3.0f64..3.0, 50.0f64..1000.0, 1e-6f64..2e-4, 0.0f64..800.0).prop_filter_map(
        "excited level in range",
        |(g, d, c, w, t, r)| {
            let e = g.shifted(d)?;
            Some(BurnParams {
                transition: afcsim::population::TransitionRef::new(g, e),
                center_mhz: c,
                width_khz: w,
                duration_s: t,
                rabi_khz: r,
            })
        },
    )
}

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig {
        failure_persistence: None,
        ..ProptestConfig::with_cases(n)
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

proptest! {
    #![proptest_config(cases(24))]

    #[test]
    fn population_conserved(
        burns in prop::collection::vec(burn(), 1..6),
        sweep_rabi in 0.0f64..500.0,
        sweep_s in 0.0f64..2.0,
        wait_s in 0.0f64..300.0,
        t_k in 0.5f64..5.0,
    ) {
        let (s, mut g) = thermal(t_k);
        let pump = PumpModel::default();
        let laser = LaserModel::default();
        let total = g.total();
        apply_sweep(&mut g, &s, &SweepParams {
            band: 1, center_mhz: 0.0, span_mhz: 300.0, duration_s: sweep_s, sweep_rate_hz: 25.0, rabi_khz: sweep_rabi,
        }, &pump).unwrap();
        prop_assert!(rel(g.total(), total) < 1e-9);
        for b in &burns {
            apply_burn(&mut g, &s, b, &laser, &pump).unwrap();
            prop_assert!(rel(g.total(), total) < 1e-9, "after burn {:?}", b);
        }
        relax(&mut g, &s, wait_s, &RelaxationRates::default()).unwrap();
        prop_assert!(rel(g.total(), total) < 1e-9);
        prop_assert!(g.mass().iter().flatten().all(|v| *v >= -1e-15));
    }

    #[test]
    fn burn_never_fills_its_own_ground_level(b in burn(), t_k in 0.5f64..5.0) {
        let (s, mut g) = thermal(t_k);
        let gi = b.transition.g.index();
        let before: Vec<f64> = g.mass().iter().map(|p| p[gi]).collect();
        apply_burn(&mut g, &s, &b, &LaserModel::default(), &PumpModel::default()).unwrap();
        for (i, p) in g.mass().iter().enumerate() {
            prop_assert!(p[gi] <= before[i] * (1.0 + 1e-12) + 1e-18, "bin {i}");
        }
    }

    #[test]
    fn thermal_grid_is_ladder_fixed_point(t_k in 0.3f64..20.0, dt in 1.0f64..5000.0, k in 1e-4f64..0.1) {
        let (s, mut g) = thermal(t_k);
        let before = g.clone();
        let rates = RelaxationRates { ladder_hz: k, cross_relaxation_hz: 0.0, max_step_s: 1.0 };
        relax(&mut g, &s, dt, &rates).unwrap();
        for (a, b) in g.mass().iter().zip(before.mass()) {
            for (x, y) in a.iter().zip(b) {
                prop_assert!((x - y).abs() <= 1e-9 * y.abs().max(1e-12), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn branching_is_a_distribution(raw in prop::collection::vec(0.0f64..1.0, N_LEVELS * N_LEVELS)) {
        let mut s = LevelScheme::default();
        for g in 0..N_LEVELS {
            for e in 0..N_LEVELS {
                s.osc_strengths[g][e] = raw[g * N_LEVELS + e];
            }
        }
        for e in Level::all() {
            let b = s.branching_ratios(e);
            prop_assert!(b.iter().all(|v| *v >= 0.0));
            prop_assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn catalog_ignores_strength_scale(k in 1e-3f64..1e3) {
        let s = LevelScheme::default();
        let mut t = s.clone();
        t.osc_strengths.iter_mut().flatten().for_each(|v| *v *= k);
        let (a, b) = (s.lambda_catalog(), t.lambda_catalog());
        prop_assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(rel(y.rel_peak_strength, x.rel_peak_strength) < 1e-12);
            prop_assert!(rel(y.rel_background, x.rel_background) < 1e-12);
            prop_assert_eq!(x.storage.center_frequency, y.storage.center_frequency);
        }
    }

    #[test]
    fn splitting_shift_moves_levels_above(k in 0usize..7, delta in -20.0f64..20.0) {
        let s = LevelScheme::default();
        let mut t = s.clone();
        t.ground_splittings[k] += delta;
        for (a, b) in s.transitions().iter().zip(t.transitions()) {
            let fa = transition_frequency(&s, a).unwrap();
            let fb = transition_frequency(&t, &b).unwrap();
            let want = if a.g_level.index() > k { -delta } else { 0.0 };
            prop_assert!((fb - fa - want).abs() < 1e-9, "{} {fa} {fb}", a);
        }
    }

    #[test]
    fn convolution_keeps_area(w in 10.0f64..2000.0, k in 10.0f64..1000.0) {
        let p = convolve_square_gaussian(w, k).unwrap();
        let h = p.x_khz[1] - p.x_khz[0];
        let n = p.profile.len();
        let area = h * (p.profile.iter().sum::<f64>() - 0.5 * (p.profile[0] + p.profile[n - 1]));
        prop_assert!((area - 1.0).abs() < 1e-6, "{area}");
    }

    #[test]
    fn convolved_width_monotone(w in 0.0f64..2000.0, k in 1.0f64..1000.0, dw in 0.0f64..200.0, dk in 0.0f64..200.0) {
        let f = square_gaussian_fwhm(w, k).unwrap();
        prop_assert!(square_gaussian_fwhm(w + dw, k).unwrap() >= f - 1e-9);
        prop_assert!(square_gaussian_fwhm(w, k + dk).unwrap() >= f - 1e-9);
    }

    #[test]
    fn analytic_efficiency_falls_with_background(d in 1.0f64..40.0, f in 1.1f64..20.0, d0 in 0.0f64..5.0, dd0 in 1e-3f64..2.0) {
        prop_assert!(efficiency_analytic(d, f, d0 + dd0).unwrap() < efficiency_analytic(d, f, d0).unwrap());
    }

    #[test]
    fn analytic_efficiency_single_peak_in_depth(f in 1.1f64..20.0, d0 in 0.0f64..3.0) {
        // Scan the natural depth-per-finesse ratio through its optimum at 2.
        let xs: Vec<f64> = (1..=400).map(|i| i as f64 * 0.02).collect();
        let to_db = |x: f64| x * f * 10.0 / std::f64::consts::LN_10;
        let ys: Vec<f64> = xs.iter().map(|x| efficiency_analytic(to_db(*x), f, d0).unwrap()).collect();
        let maxima: Vec<usize> = (1..ys.len() - 1).filter(|&i| ys[i] > ys[i - 1] && ys[i] >= ys[i + 1]).collect();
        prop_assert_eq!(maxima.len(), 1);
        prop_assert!((xs[maxima[0]] - 2.0).abs() <= 0.02);
    }

    #[test]
    fn finesse_optimum_ignores_background_and_matches_grid(d in 2.0f64..40.0, d0a in 0.0f64..3.0, d0b in 0.0f64..3.0) {
        let a = optimize_finesse(d, d0a).unwrap();
        let b = optimize_finesse(d, d0b).unwrap();
        prop_assert!((a.finesse - b.finesse).abs() < 1e-12);
        let mut best = (0.0, f64::NEG_INFINITY);
        let mut f = 1.001;
        while f < 40.0 {
            let e = efficiency_analytic(d, f, d0a).unwrap();
            if e > best.1 {
                best = (f, e);
            }
            f += 0.001;
        }
        prop_assert!((best.0 - a.finesse).abs() < 0.01, "grid {} vs {}", best.0, a.finesse);
    }

    #[test]
    fn samples_deterministic(seed in any::<u64>(), noise in 0.0f64..1.0) {
        let run = StorageRun { n_events: 3000, rng_seed: seed, ..StorageRun::default() };
        let a = simulate_storage_events(&run, noise).unwrap();
        let b = simulate_storage_events(&run, noise).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn losses_compose(a in 0.0f64..10.0, b in 0.0f64..10.0, seed in any::<u64>()) {
        let one = StorageRun { n_events: 2000, rng_seed: seed, collection_loss_db: a + b, ..StorageRun::default() };
        let first = StorageRun { collection_loss_db: a, ..one };
        let mut two = StorageRun { collection_loss_db: b, ..one };
        two.mean_photons_at_crystal = first.mean_photons_at_crystal * afcsim::noise::transmission(a);
        let (x, y) = (simulate_storage_events(&one, 0.0).unwrap(), simulate_storage_events(&two, 0.0).unwrap());
        for (p, q) in x.1.samples.iter().zip(&y.1.samples) {
            prop_assert!((p.1 - q.1).abs() < 1e-12);
        }
    }
}

fn random_spectrum(lines: &[(f64, f64, f64)]) -> AbsorptionSpectrum {
    let n = 1024;
    let f: Vec<f64> = (0..n).map(|i| -10.0 + 20.0 * i as f64 / (n - 1) as f64).collect();
    let a = f
        .iter()
        .map(|x| {
            lines
                .iter()
                .map(|(h, c, w)| h * 20.0 * (-((x - 8.0 * (c - 0.5)) / (0.1 + w)).powi(2)).exp())
                .sum::<f64>()
        })
        .collect();
    AbsorptionSpectrum::from_samples(f, a).unwrap()
}

proptest! {
    #![proptest_config(cases(32))]

    #[test]
    fn filter_causal_and_passive(lines in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 1..10)) {
        let sp = random_spectrum(&lines);
        let h = MinimumPhaseFilter::new(&sp).unwrap();
        prop_assert!(h.pre_pulse_leakage() < 1e-6, "{}", h.pre_pulse_leakage());
        prop_assert!(h.max_gain() <= 1.0 + 1e-12);
    }

    #[test]
    fn echo_energy_bounded(lines in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 1..10), tau in 100.0f64..400.0) {
        let sp = random_spectrum(&lines);
        let r = echo_simulate(&sp, &Pulse::gaussian(tau, 0.0)).unwrap();
        prop_assert!(r.transmitted_fraction + r.free_space_efficiency <= 1.0 + 1e-9);
    }
}

proptest! {
    #![proptest_config(cases(12))]

    #[test]
    fn echo_delay_is_inverse_spacing(spacing in 0.5f64..5.0) {
        let comb = CombParams::new(18.0, spacing, 3.94, 1.0, 51, ToothShape::Gaussian).unwrap();
        let sp = comb.spectrum(&comb.window(10.0, 5.0)).unwrap();
        let tau = 0.3e3 / spacing;
        let r = echo_simulate(&sp, &Pulse::gaussian(tau, 0.0)).unwrap();
        let want = 1e3 / spacing;
        let got = r.echo_delay_ns.expect("echo present");
        prop_assert!((got - want).abs() <= r.time_step_ns, "{got} vs {want} (step {})", r.time_step_ns);
    }
}

#[test]
fn early_echo_not_double_counted() {
    // Single line beside the carrier: its ringing peaks right after the pulse.
    let sp = random_spectrum(&[(0.9504378927615316, 0.0, 0.9153020703622142)]);
    let r = echo_simulate(&sp, &Pulse::gaussian(233.51820320355472, 0.0)).unwrap();
    assert!(r.transmitted_fraction + r.free_space_efficiency <= 1.0 + 1e-9, "{r:?}");
}

#[test]
fn wider_comb_approaches_analytic() {
    // Broadband pulse: a few teeth truncate its spectrum, many do not.
    let pulse = Pulse::gaussian(40.0, 0.0);
    let err = |n: usize| {
        let comb = CombParams::new(18.0, 1.5, 3.94, 1.0, n, ToothShape::Gaussian).unwrap();
        let sp = comb.spectrum(&Window::new(-50.0, 50.0, 5.0)).unwrap();
        (echo_simulate(&sp, &pulse).unwrap().efficiency - comb.efficiency_analytic().unwrap()).abs()
    };
    let errs: Vec<f64> = [3, 5, 11, 51].into_iter().map(err).collect();
    // Converges to the overlap-limited gap rather than to zero.
    assert!(errs.windows(2).all(|w| w[1] <= w[0] + 2e-3), "{errs:?}");
    assert!(errs[3] < 0.02 && errs[3] < 0.2 * errs[0], "{errs:?}");
}

#[test]
fn protocol_bitwise_deterministic() {
    let s = LevelScheme::default();
    let spec = small_spec();
    let script = ProtocolScript::bundled("afc_5tooth").unwrap();
    let run = || {
        let mut g = init_thermal(&s, &spec, 1.5, 0.0, 1.0).unwrap();
        let log = run_protocol(&mut g, &s, &script, &PumpModel::default(), None).unwrap();
        (g, log)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(la, lb);
    assert_eq!(a, b);
}

#[test]
fn protocol_time_linear_in_repeats_and_teeth() {
    let base = ProtocolScript::bundled("afc_5tooth").unwrap();
    let t = |n: usize| base.with_comb(n, 0.0, 1.5).protocol_time();
    assert!((t(10) - 2.0 * t(5)).abs() < 1e-12);
    assert!((t(67) - 67.0 * t(1)).abs() < 1e-12);
    let mut twice = base.clone();
    if let afcsim::population::Step::Cycle(c) = &mut twice.steps[0] {
        c.repeat *= 2;
    }
    assert!((twice.protocol_time() - 2.0 * base.protocol_time()).abs() < 1e-12);
}

#[test]
fn spectra_add_over_populations() {
    let (s, g) = thermal(1.5);
    let cal = DbCalibration::for_grid(&s, &g, 0.0).unwrap();
    let mut g1 = g.clone();
    g1.scale(0.3);
    let mut g2 = g.clone();
    g2.scale(0.7);
    g2.set_classes(-1.0, 1.0, Level::LOWEST);
    let w = Window::new(-20.0, 20.0, 25.0);
    let sum = synthesize(&g1.combined(&g2).unwrap(), &s, &w, &cal, 0.0).unwrap();
    let a = synthesize(&g1, &s, &w, &cal, 0.0).unwrap();
    let b = synthesize(&g2, &s, &w, &cal, 0.0).unwrap();
    for i in 0..sum.frequencies.len() {
        let want = a.absorption_db[i] + b.absorption_db[i] - a.i0_db[i];
        assert!((sum.absorption_db[i] - want).abs() < 1e-9, "{} vs {want}", sum.absorption_db[i]);
    }
}
