//! Absorption spectra synthesized from a population grid, with background
//! decomposition and feature-shape measurement.

use crate::fit::fit_gaussian_peak;
use crate::hyperfine::{Level, LevelScheme, N_LEVELS};
use crate::lineshape::{gaussian_cdf, gaussian_pdf, square_gaussian};
use crate::population::SpectralPopulationGrid;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Peak absorption of the fully anti-polarized |-7/2>g line.
pub const MAX_FEATURE_DB: f64 = 20.0;

/// Frequency window and sampling of a synthesized spectrum, MHz and kHz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Window {
    pub lo_mhz: f64,
    pub hi_mhz: f64,
    pub step_khz: f64,
}

impl Window {
    pub fn new(lo_mhz: f64, hi_mhz: f64, step_khz: f64) -> Window {
        Window { lo_mhz, hi_mhz, step_khz }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.hi_mhz > self.lo_mhz) || !self.lo_mhz.is_finite() || !self.hi_mhz.is_finite() {
            return Err(Error::param("window", "needs lo < hi"));
        }
        if !(self.step_khz > 0.0) {
            return Err(Error::param("window.step_khz", "must be positive"));
        }
        if (self.hi_mhz - self.lo_mhz) / (self.step_khz * 1e-3) > 1e7 {
            return Err(Error::param("window", "too many samples"));
        }
        Ok(())
    }

    fn n_bins(&self) -> usize {
        (((self.hi_mhz - self.lo_mhz) / (self.step_khz * 1e-3)).round() as usize).max(1)
    }
}

/// Maps absorbance (strength × class density per MHz) to dB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DbCalibration {
    pub db_per_unit: f64,
    /// Ion count the impurity line is scaled to.
    pub reference_total: f64,
}

impl DbCalibration {
    /// Calibration under which every class of `grid` moved into |-7/2>g
    /// reads [`MAX_FEATURE_DB`] at the memory frequency.
    pub fn for_grid(scheme: &LevelScheme, grid: &SpectralPopulationGrid, memory_mhz: f64) -> Result<DbCalibration> {
        let (lo, hi) = grid.coverage();
        let line = grid.profile;
        let c = grid.line_center_mhz;
        let norm = line.cdf(hi - c) - line.cdf(lo - c);
        let total = grid.total_population;
        let rho = total * line.density(memory_mhz - c) / norm;
        let s = scheme.strength(Level::LOWEST, Level::LOWEST);
        if !(rho > 0.0 && s > 0.0) {
            return Err(Error::param("calibration", "memory frequency carries no absorption"));
        }
        Ok(DbCalibration { db_per_unit: MAX_FEATURE_DB / (s * rho), reference_total: total })
    }
}

/// Background absorption at the reference frequency, dB.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BackgroundDb {
    pub i0_tail: f64,
    pub bulk_tail: f64,
    pub residual_polarization: f64,
}

impl BackgroundDb {
    pub fn total(&self) -> f64 {
        self.i0_tail + self.bulk_tail + self.residual_polarization
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AbsorptionSpectrum {
    /// Bin centers, MHz.
    pub frequencies: Vec<f64>,
    pub absorption_db: Vec<f64>,
    /// Impurity line contribution.
    pub i0_db: Vec<f64>,
    /// Contribution of the most populated ground level.
    pub bulk_db: Vec<f64>,
    /// Contribution of every other ground level.
    pub residual_db: Vec<f64>,
    /// Part of `residual_db` from the memory level.
    pub memory_db: Vec<f64>,
    pub bulk_level: Level,
    pub memory_level: Level,
    pub reference_mhz: f64,
    pub background_db: BackgroundDb,
}

impl AbsorptionSpectrum {
    pub fn step_mhz(&self) -> f64 {
        if self.frequencies.len() < 2 {
            return 0.0;
        }
        self.frequencies[1] - self.frequencies[0]
    }

    /// Linear interpolation of the absorption at `f`, clamped at the ends.
    pub fn at(&self, f: f64) -> f64 {
        interp(&self.frequencies, &self.absorption_db, f)
    }

    /// A spectrum with uniform absorption `db` over the same frequencies.
    pub fn flat_like(&self, db: f64) -> AbsorptionSpectrum {
        let n = self.frequencies.len();
        AbsorptionSpectrum {
            frequencies: self.frequencies.clone(),
            absorption_db: vec![db; n],
            i0_db: vec![0.0; n],
            bulk_db: vec![0.0; n],
            residual_db: vec![db; n],
            memory_db: vec![0.0; n],
            bulk_level: self.bulk_level,
            memory_level: self.memory_level,
            reference_mhz: self.reference_mhz,
            background_db: BackgroundDb { residual_polarization: db, ..Default::default() },
        }
    }

    /// The same spectrum without the memory level's absorption.
    pub fn background_only(&self) -> AbsorptionSpectrum {
        let strip = |v: &[f64]| -> Vec<f64> { v.iter().zip(&self.memory_db).map(|(a, m)| (a - m).max(0.0)).collect() };
        AbsorptionSpectrum {
            absorption_db: strip(&self.absorption_db),
            residual_db: strip(&self.residual_db),
            memory_db: vec![0.0; self.memory_db.len()],
            ..self.clone()
        }
    }

    /// Spectrum from explicit samples, all attributed to the memory level.
    pub fn from_samples(frequencies: Vec<f64>, absorption_db: Vec<f64>) -> Result<AbsorptionSpectrum> {
        if frequencies.len() != absorption_db.len() || frequencies.len() < 2 {
            return Err(Error::param("spectrum", "need at least 2 matching samples"));
        }
        if frequencies.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::param("spectrum", "frequencies must increase"));
        }
        if absorption_db.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::param("spectrum", "absorption must be finite and non-negative"));
        }
        let n = frequencies.len();
        Ok(AbsorptionSpectrum {
            frequencies,
            residual_db: absorption_db.clone(),
            memory_db: absorption_db.clone(),
            absorption_db,
            i0_db: vec![0.0; n],
            bulk_db: vec![0.0; n],
            bulk_level: Level::HIGHEST,
            memory_level: Level::LOWEST,
            reference_mhz: 0.0,
            background_db: BackgroundDb::default(),
        })
    }

    /// CSV with columns frequency_MHz, absorption_dB, i0_dB, bulk_dB,
    /// residual_dB, memory_dB.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "frequency_MHz,absorption_dB,i0_dB,bulk_dB,residual_dB,memory_dB")?;
        for i in 0..self.frequencies.len() {
            writeln!(
                w,
                "{:.6},{:.9},{:.9},{:.9},{:.9},{:.9}",
                self.frequencies[i],
                self.absorption_db[i],
                self.i0_db[i],
                self.bulk_db[i],
                self.residual_db[i],
                self.memory_db[i]
            )?;
        }
        Ok(())
    }
}

fn interp(x: &[f64], y: &[f64], f: f64) -> f64 {
    let i = x.partition_point(|v| *v < f);
    if i == 0 {
        return y[0];
    }
    if i >= x.len() {
        return y[x.len() - 1];
    }
    let t = (f - x[i - 1]) / (x[i] - x[i - 1]);
    y[i - 1] + t * (y[i] - y[i - 1])
}

/// Cumulative mass of one level at detuning `x`, with mass spread uniformly
/// inside each bin.
fn cumulative_at(edges: &[f64], cum: &[f64], x: f64) -> f64 {
    if x <= edges[0] {
        return 0.0;
    }
    let n = edges.len() - 1;
    if x >= edges[n] {
        return cum[n];
    }
    let i = edges.partition_point(|e| *e <= x) - 1;
    let t = (x - edges[i]) / (edges[i + 1] - edges[i]);
    cum[i] + t * (cum[i + 1] - cum[i])
}

/// Discrete bin-integrated Gaussian kernel for step `h`, normalized.
fn gaussian_taps(fwhm: f64, h: f64) -> Vec<f64> {
    if fwhm <= 0.0 {
        return vec![1.0];
    }
    let half = ((5.0 * fwhm) / h).ceil() as i64;
    let mut taps: Vec<f64> = (-half..=half)
        .map(|k| {
            let x = k as f64 * h;
            gaussian_cdf(x + 0.5 * h, fwhm) - gaussian_cdf(x - 0.5 * h, fwhm)
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|v| *v /= s);
    taps
}

fn convolve_same(data: &[f64], taps: &[f64]) -> Vec<f64> {
    let half = taps.len() / 2;
    let n = data.len();
    (0..n)
        .map(|i| {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let j = i as i64 + k as i64 - half as i64;
                if j >= 0 && (j as usize) < n {
                    acc += t * data[j as usize];
                }
            }
            acc
        })
        .collect()
}

/// Absorption spectrum of `grid` over `window`. Each class contributes a
/// delta-like homogeneous line at every transition frequency shifted by its
/// detuning; the result is broadened by the hyperfine inhomogeneous Gaussian
/// and the impurity line is added. Background components are evaluated at
/// `reference_mhz`. The memory level is the extreme level opposite the bulk,
/// |-7/2>g unless the bulk itself sits there.
pub fn synthesize(
    grid: &SpectralPopulationGrid,
    scheme: &LevelScheme,
    window: &Window,
    calibration: &DbCalibration,
    reference_mhz: f64,
) -> Result<AbsorptionSpectrum> {
    window.validate()?;
    scheme.validate()?;
    let (glo, ghi) = grid.coverage();
    if window.lo_mhz < glo || window.hi_mhz > ghi {
        return Err(Error::WindowOutsideGrid {
            lo: window.lo_mhz,
            hi: window.hi_mhz,
            grid_lo: glo,
            grid_hi: ghi,
        });
    }
    let n = window.n_bins();
    let h = (window.hi_mhz - window.lo_mhz) / n as f64;
    let taps = gaussian_taps(scheme.hyperfine_inhomog_fwhm_khz * 1e-3, h);
    let pad = taps.len() / 2;
    let np = n + 2 * pad;
    let lo = window.lo_mhz - pad as f64 * h;
    let out_edges: Vec<f64> = (0..=np).map(|i| lo + i as f64 * h).collect();

    let transitions = scheme.transitions();
    let edges = grid.edges();
    let mut per_level = vec![vec![0.0; n]; N_LEVELS];
    for g in Level::all() {
        let ts: Vec<_> = transitions.iter().filter(|t| t.g_level == g && t.strength > 0.0).collect();
        if ts.is_empty() {
            continue;
        }
        let cum = grid.cumulative(g);
        if cum[cum.len() - 1] == 0.0 {
            continue;
        }
        let mut raw = vec![0.0; np];
        for t in ts {
            let mut prev = cumulative_at(edges, &cum, out_edges[0] - t.center_frequency);
            for (j, r) in raw.iter_mut().enumerate() {
                let next = cumulative_at(edges, &cum, out_edges[j + 1] - t.center_frequency);
                *r += t.strength * (next - prev) / h;
                prev = next;
            }
        }
        let broadened = convolve_same(&raw, &taps);
        per_level[g.index()] = broadened[pad..pad + n].iter().map(|v| (v * calibration.db_per_unit).max(0.0)).collect();
    }

    let line = scheme.optical_line;
    let i0_scale = calibration.db_per_unit * scheme.i0_strength() * calibration.reference_total;
    let frequencies: Vec<f64> = (0..n).map(|j| window.lo_mhz + (j as f64 + 0.5) * h).collect();
    let i0_db: Vec<f64> = frequencies
        .iter()
        .map(|f| {
            let a = f - 0.5 * h - scheme.i0_center_mhz;
            i0_scale * (line.cdf(a + h) - line.cdf(a)) / h
        })
        .collect();

    let totals = grid.level_totals();
    let bulk = Level::all()
        .max_by(|a, b| totals[a.index()].total_cmp(&totals[b.index()]))
        .unwrap_or(Level::HIGHEST);
    let memory = match bulk {
        Level::LOWEST => Level::HIGHEST,
        _ => Level::LOWEST,
    };
    let bulk_db = per_level[bulk.index()].clone();
    let memory_db = if memory == bulk { vec![0.0; n] } else { per_level[memory.index()].clone() };
    let mut residual_db = vec![0.0; n];
    for g in Level::all().filter(|g| *g != bulk) {
        for (r, v) in residual_db.iter_mut().zip(&per_level[g.index()]) {
            *r += v;
        }
    }
    let absorption_db: Vec<f64> = (0..n).map(|j| i0_db[j] + bulk_db[j] + residual_db[j]).collect();
    let background_db = BackgroundDb {
        i0_tail: interp(&frequencies, &i0_db, reference_mhz),
        bulk_tail: interp(&frequencies, &bulk_db, reference_mhz),
        residual_polarization: interp(&frequencies, &residual_db, reference_mhz),
    };
    Ok(AbsorptionSpectrum {
        frequencies,
        absorption_db,
        i0_db,
        bulk_db,
        residual_db,
        memory_db,
        bulk_level: bulk,
        memory_level: memory,
        reference_mhz,
        background_db,
    })
}

/// Unit-area square ⊛ Gaussian sampled on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SquareGaussianProfile {
    pub x_khz: Vec<f64>,
    pub profile: Vec<f64>,
    pub fwhm_khz: f64,
}

/// Unit-area square of width `w` convolved with a unit-area Gaussian.
fn unit_square_gaussian(x: f64, w: f64, fwhm: f64) -> f64 {
    if w <= 0.0 {
        return gaussian_pdf(x, fwhm);
    }
    if fwhm <= 0.0 {
        let edge = 0.5 * w;
        return if x.abs() < edge {
            1.0 / w
        } else if x.abs() == edge {
            0.5 / w
        } else {
            0.0
        };
    }
    square_gaussian(x, w, fwhm) / w
}

/// Full width at half maximum of a square of width `w` convolved with a
/// Gaussian of FWHM `fwhm`.
pub fn square_gaussian_fwhm(w: f64, fwhm: f64) -> Result<f64> {
    if !(w >= 0.0 && fwhm >= 0.0) || (w == 0.0 && fwhm == 0.0) {
        return Err(Error::param("convolve_square_gaussian", "widths must be non-negative and not both zero"));
    }
    if fwhm == 0.0 {
        return Ok(w);
    }
    if w == 0.0 {
        return Ok(fwhm);
    }
    let half = 0.5 * square_gaussian(0.0, w, fwhm);
    let (mut a, mut b) = (0.0, 0.5 * w + 2.0 * fwhm);
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if square_gaussian(m, w, fwhm) > half {
            a = m;
        } else {
            b = m;
        }
    }
    Ok(a + b)
}

/// Square excitation of width `square_khz` broadened by a Gaussian kernel.
/// The profile has unit area and is sampled finely enough that its
/// trapezoid integral is exact to well below 1e-6.
pub fn convolve_square_gaussian(square_khz: f64, kernel_fwhm_khz: f64) -> Result<SquareGaussianProfile> {
    let fwhm_khz = square_gaussian_fwhm(square_khz, kernel_fwhm_khz)?;
    let scale = if square_khz > 0.0 && kernel_fwhm_khz > 0.0 {
        square_khz.min(kernel_fwhm_khz)
    } else {
        square_khz.max(kernel_fwhm_khz)
    };
    // Half the square is an integer number of steps so its edges fall on samples.
    let mut h = scale / 200.0;
    if square_khz > 0.0 {
        h = 0.5 * square_khz / (0.5 * square_khz / h).ceil();
    }
    let extent = 0.5 * square_khz + 8.0 * kernel_fwhm_khz + h;
    let m = (extent / h).ceil() as i64;
    let x_khz: Vec<f64> = (-m..=m).map(|i| i as f64 * h).collect();
    let profile = x_khz.iter().map(|x| unit_square_gaussian(*x, square_khz, kernel_fwhm_khz)).collect();
    Ok(SquareGaussianProfile { x_khz, profile, fwhm_khz })
}

/// Fitted parameters of an isolated spectral feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FeatureMeasurement {
    /// Absorption above the fitted background at the peak.
    pub peak_db: f64,
    pub fwhm_khz: f64,
    pub background_db: f64,
    pub center_mhz: f64,
}

/// Gaussian fit on a flat background over `center ± span/2`.
pub fn measure_feature(spectrum: &AbsorptionSpectrum, center_mhz: f64, span_mhz: f64) -> Result<FeatureMeasurement> {
    if !(span_mhz > 0.0) {
        return Err(Error::param("span", "must be positive"));
    }
    let (lo, hi) = (center_mhz - 0.5 * span_mhz, center_mhz + 0.5 * span_mhz);
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for (f, a) in spectrum.frequencies.iter().zip(&spectrum.absorption_db) {
        if *f >= lo && *f <= hi {
            x.push(*f);
            y.push(*a);
        }
    }
    if x.len() < 5 {
        return Err(Error::param("span", "covers fewer than 5 samples"));
    }
    let fit = fit_gaussian_peak(&x, &y)?;
    let noise = 3.0 * fit.rms;
    if !(fit.amplitude > noise) || fit.amplitude <= 1e-9 * (1.0 + fit.background.abs()) {
        return Err(Error::Fit(format!(
            "no feature above background: amplitude {:.3e} dB vs 3x fit noise {:.3e} dB",
            fit.amplitude, noise
        )));
    }
    if fit.center < lo || fit.center > hi {
        return Err(Error::Fit(format!("fitted center {:.4} MHz lies outside the span", fit.center)));
    }
    Ok(FeatureMeasurement {
        peak_db: fit.amplitude,
        fwhm_khz: fit.fwhm * 1e3,
        background_db: fit.background,
        center_mhz: fit.center,
    })
}
