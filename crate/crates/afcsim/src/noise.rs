//! Weak coherent pulse storage read out by balanced heterodyne detection:
//! seeded quadrature samples, the added-variance estimate with a bootstrap
//! interval, and the classical 2η bound.
//!
//! Quadratures are in vacuum units: a coherent state of amplitude β at the
//! detector gives samples at phase φ with mean √2·|β|·cos φ and variance 1.

use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::{SQRT_2, TAU};
use std::io::Write;

/// Events generated per independent random stream.
const BLOCK: usize = 4096;

/// Power transmission of a loss in dB.
pub fn transmission(loss_db: f64) -> f64 {
    10f64.powf(-loss_db / 10.0)
}

/// How probe phases are distributed over events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseSampling {
    /// Evenly spaced over [0, 2π) in event order.
    #[default]
    Sweep,
    /// Independent uniform draws.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StorageRun {
    pub n_events: usize,
    /// Mean photon number of the input at the crystal.
    pub mean_photons_at_crystal: f64,
    pub efficiency: f64,
    /// Loss between the crystal and the detector, detector efficiency included.
    pub collection_loss_db: f64,
    pub rng_seed: u64,
    #[serde(default)]
    pub phase_sampling: PhaseSampling,
    /// RMS error of the reference-pulse phase correction, radians.
    #[serde(default)]
    pub phase_jitter_rad: f64,
}

impl Default for StorageRun {
    fn default() -> Self {
        StorageRun {
            n_events: 100_000,
            mean_photons_at_crystal: 0.8,
            efficiency: 0.22,
            collection_loss_db: 6.3,
            rng_seed: 0,
            phase_sampling: PhaseSampling::Sweep,
            phase_jitter_rad: 0.0,
        }
    }
}

impl StorageRun {
    pub fn validate(&self) -> Result<()> {
        if self.n_events < 1 {
            return Err(Error::param("n_events", "need at least one event"));
        }
        if !(self.mean_photons_at_crystal >= 0.0 && self.mean_photons_at_crystal.is_finite()) {
            return Err(Error::param("mean_photons_at_crystal", "must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.efficiency) {
            return Err(Error::param("efficiency", "must lie in [0, 1]"));
        }
        if !(self.collection_loss_db >= 0.0 && self.collection_loss_db.is_finite()) {
            return Err(Error::param("collection_loss_db", "must be finite and non-negative"));
        }
        if !(self.phase_jitter_rad >= 0.0 && self.phase_jitter_rad.is_finite()) {
            return Err(Error::param("phase_jitter_rad", "must be finite and non-negative"));
        }
        Ok(())
    }

    /// Amplitude |β| of the input reference at the detector.
    pub fn input_amplitude(&self) -> f64 {
        (self.mean_photons_at_crystal * transmission(self.collection_loss_db)).sqrt()
    }

    /// Amplitude |β| of the echo at the detector.
    pub fn echo_amplitude(&self) -> f64 {
        self.efficiency.sqrt() * self.input_amplitude()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadratureSamples {
    /// (phase in [0, 2π), quadrature value).
    pub samples: Vec<(f64, f64)>,
    /// Vacuum variance, always 1.
    pub variance_unit: f64,
}

impl QuadratureSamples {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "phase_rad,quadrature")?;
        for (p, v) in &self.samples {
            writeln!(w, "{p:.9},{v:.9}")?;
        }
        Ok(())
    }
}

fn draw(
    run: &StorageRun,
    amplitude: f64,
    variance: f64,
    stream_offset: u64,
) -> Result<QuadratureSamples> {
    let noise = Normal::new(0.0, variance.sqrt()).map_err(|e| Error::param("added_noise", e.to_string()))?;
    let n = run.n_events;
    let mean_scale = SQRT_2 * amplitude;
    let samples = (0..n.div_ceil(BLOCK))
        .into_par_iter()
        .flat_map_iter(|b| {
            let mut rng = ChaCha20Rng::seed_from_u64(run.rng_seed);
            rng.set_stream(2 * b as u64 + stream_offset);
            let lo = b * BLOCK;
            let hi = (lo + BLOCK).min(n);
            (lo..hi)
                .map(|k| {
                    let phase = match run.phase_sampling {
                        PhaseSampling::Sweep => TAU * k as f64 / n as f64,
                        PhaseSampling::Random => rng.random::<f64>() * TAU,
                    };
                    let jitter = if run.phase_jitter_rad > 0.0 {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        run.phase_jitter_rad * z
                    } else {
                        0.0
                    };
                    let value = mean_scale * (phase + jitter).cos() + noise.sample(&mut rng);
                    (phase, value)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(QuadratureSamples { samples, variance_unit: 1.0 })
}

/// Input-reference and echo quadratures for `run`. The echo carries
/// √η of the input amplitude and noise of variance 1 + `added_noise`.
pub fn simulate_storage_events(run: &StorageRun, added_noise: f64) -> Result<(QuadratureSamples, QuadratureSamples)> {
    run.validate()?;
    if !(added_noise >= 0.0 && added_noise.is_finite()) {
        return Err(Error::param("added_noise", "must be finite and non-negative"));
    }
    let input = draw(run, run.input_amplitude(), 1.0, 0)?;
    let echo = draw(run, run.echo_amplitude(), 1.0 + added_noise, 1)?;
    Ok((input, echo))
}

/// Neumaier-compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VarianceOptions {
    pub n_bins: usize,
    pub bootstrap_resamples: usize,
    pub seed: u64,
}

impl Default for VarianceOptions {
    fn default() -> Self {
        VarianceOptions {
            n_bins: 16,
            bootstrap_resamples: 1000,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseBin {
    pub phase_center_rad: f64,
    pub count: usize,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AddedVariance {
    /// Pooled variance minus the vacuum unit.
    pub estimate: f64,
    pub ci95: (f64, f64),
    /// Fitted signal mean: c + a·cos φ + b·sin φ as (c, a, b).
    pub mean_fit: (f64, f64, f64),
    pub bins: Vec<PhaseBin>,
    pub n_samples: usize,
}

impl AddedVariance {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "phase_center_rad,count,variance,added_variance")?;
        for b in &self.bins {
            writeln!(w, "{:.9},{},{:.9},{:.9}", b.phase_center_rad, b.count, b.variance, b.variance - 1.0)?;
        }
        Ok(())
    }
}

/// Least-squares c + a cos φ + b sin φ.
fn fit_sinusoid(samples: &[(f64, f64)]) -> Result<(f64, f64, f64)> {
    let mut m = nalgebra::Matrix3::<f64>::zeros();
    let mut r = nalgebra::Vector3::<f64>::zeros();
    for &(p, v) in samples {
        let x = nalgebra::Vector3::new(1.0, p.cos(), p.sin());
        m += x * x.transpose();
        r += x * v;
    }
    let sol = m
        .lu()
        .solve(&r)
        .ok_or_else(|| Error::Fit("phases do not determine the signal mean".into()))?;
    Ok((sol[0], sol[1], sol[2]))
}

/// Added variance of `echo` with default binning and bootstrap.
pub fn added_variance(echo: &QuadratureSamples) -> Result<AddedVariance> {
    added_variance_with(echo, &VarianceOptions::default())
}

/// Phase-resolved variance minus the vacuum unit. The coherent signal is
/// removed by a sinusoidal fit of the mean versus phase; residuals are
/// pooled with three fitted degrees of freedom. The 95% interval is a
/// seeded percentile bootstrap over samples.
pub fn added_variance_with(echo: &QuadratureSamples, opts: &VarianceOptions) -> Result<AddedVariance> {
    let n = echo.samples.len();
    if n < 100 {
        return Err(Error::param("samples", format!("need at least 100 samples, got {n}")));
    }
    if opts.n_bins < 1 || opts.bootstrap_resamples < 10 {
        return Err(Error::param("variance options", "need ≥1 bin and ≥10 bootstrap resamples"));
    }
    if echo.samples.iter().any(|(p, v)| !(p.is_finite() && v.is_finite())) {
        return Err(Error::param("samples", "must be finite"));
    }
    let (c, a, b) = fit_sinusoid(&echo.samples)?;
    let resid2: Vec<f64> = echo
        .samples
        .iter()
        .map(|&(p, v)| {
            let e = v - (c + a * p.cos() + b * p.sin());
            e * e
        })
        .collect();
    let dof = (n - 3) as f64;
    let pooled = compensated_sum(resid2.iter().copied()) / dof;

    let width = TAU / opts.n_bins as f64;
    let mut acc = vec![(0usize, Vec::new()); opts.n_bins];
    for (&(p, _), r) in echo.samples.iter().zip(&resid2) {
        let k = ((p.rem_euclid(TAU) / width) as usize).min(opts.n_bins - 1);
        acc[k].0 += 1;
        acc[k].1.push(*r);
    }
    let bins = acc
        .into_iter()
        .enumerate()
        .map(|(k, (count, r))| PhaseBin {
            phase_center_rad: (k as f64 + 0.5) * width,
            count,
            variance: if count > 1 { compensated_sum(r) / count as f64 } else { f64::NAN },
        })
        .collect();

    let scale = n as f64 / dof;
    let mut boot: Vec<f64> = (0..opts.bootstrap_resamples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
            rng.set_stream(i as u64);
            let s = compensated_sum((0..n).map(|_| resid2[rng.random_range(0..n)]));
            s / n as f64 * scale - 1.0
        })
        .collect();
    boot.sort_by(f64::total_cmp);
    let q = |f: f64| boot[((f * (boot.len() - 1) as f64).round() as usize).min(boot.len() - 1)];
    Ok(AddedVariance {
        estimate: pooled - 1.0,
        ci95: (q(0.025), q(0.975)),
        mean_fit: (c, a, b),
        bins,
        n_samples: n,
    })
}

/// Largest added noise, in vacuum units, a classical measure-and-prepare
/// device of efficiency `eta` can hide behind.
pub fn classical_bound(eta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::param("efficiency", "must lie in [0, 1]"));
    }
    Ok(2.0 * eta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundComparison {
    pub bound: f64,
    pub added_variance: f64,
    pub beats_classical_bound: bool,
}

/// Compare an added-variance figure (typically the upper 95% bound) with the
/// classical bound at efficiency `eta`.
pub fn compare_to_classical(added_variance: f64, eta: f64) -> Result<BoundComparison> {
    let bound = classical_bound(eta)?;
    Ok(BoundComparison {
        bound,
        added_variance,
        beats_classical_bound: added_variance < bound,
    })
}

/// Mean photon number at the crystal from the mean at the detector and the
/// collection loss.
pub fn calibrate_photon_number(detected_mean_photons: f64, loss_db: f64) -> Result<f64> {
    if !(detected_mean_photons >= 0.0 && loss_db >= 0.0) {
        return Err(Error::param("photon calibration", "inputs must be non-negative"));
    }
    Ok(detected_mean_photons / transmission(loss_db))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(n: usize, seed: u64) -> StorageRun {
        StorageRun {
            n_events: n,
            rng_seed: seed,
            ..StorageRun::default()
        }
    }

    #[test]
    fn photon_calibration() {
        assert!((calibrate_photon_number(0.8 * 10f64.powf(-0.63), 6.3).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(calibrate_photon_number(0.3, 0.0).unwrap(), 0.3);
        assert_eq!(calibrate_photon_number(0.0, 6.3).unwrap(), 0.0);
        assert!(calibrate_photon_number(-1.0, 1.0).is_err());
        assert!(calibrate_photon_number(1.0, -1.0).is_err());
    }

    #[test]
    fn bound_is_twice_efficiency() {
        assert!((classical_bound(0.22).unwrap() - 0.44).abs() < 1e-15);
        assert_eq!(classical_bound(0.0).unwrap(), 0.0);
        assert!(classical_bound(1.5).is_err());
        assert!(compare_to_classical(0.1, 0.22).unwrap().beats_classical_bound);
        assert!(!compare_to_classical(0.5, 0.22).unwrap().beats_classical_bound);
    }

    #[test]
    fn same_seed_same_samples() {
        let (a, b) = simulate_storage_events(&run(10_000, 7), 0.2).unwrap();
        let (c, d) = simulate_storage_events(&run(10_000, 7), 0.2).unwrap();
        assert_eq!(a, c);
        assert_eq!(b, d);
        let (e, _) = simulate_storage_events(&run(10_000, 8), 0.2).unwrap();
        assert_ne!(a, e);
    }

    #[test]
    fn phases_in_range() {
        for sampling in [PhaseSampling::Sweep, PhaseSampling::Random] {
            let r = StorageRun { phase_sampling: sampling, ..run(5000, 1) };
            let (a, _) = simulate_storage_events(&r, 0.0).unwrap();
            assert!(a.samples.iter().all(|(p, _)| (0.0..TAU).contains(p)));
        }
    }

    #[test]
    fn too_few_samples_rejected() {
        let (_, e) = simulate_storage_events(&run(50, 1), 0.0).unwrap();
        assert!(added_variance(&e).is_err());
    }

    #[test]
    fn sinusoid_fit_recovers_amplitude() {
        let r = StorageRun { n_events: 200_000, ..run(1, 3) };
        let (input, echo) = simulate_storage_events(&r, 0.0).unwrap();
        let fi = added_variance(&input).unwrap().mean_fit;
        let fe = added_variance(&echo).unwrap().mean_fit;
        let want_in = SQRT_2 * r.input_amplitude();
        assert!((fi.1 - want_in).abs() < 0.02, "{fi:?} vs {want_in}");
        assert!((fe.1 - want_in * r.efficiency.sqrt()).abs() < 0.02, "{fe:?}");
    }

    #[test]
    fn compensated_sum_beats_naive() {
        let v = [1e16, 1.0, -1e16];
        assert_eq!(compensated_sum(v), 1.0);
    }
}
