//! Atomic frequency comb storage: the analytic efficiency of an infinite
//! Gaussian comb, its optimum finesse, a causal time-domain echo model and
//! impedance-matched cavity projections.
//!
//! Optical depths are quoted in dB of intensity attenuation and converted to
//! natural units (×ln10/10) internally.

use crate::spectrum::{AbsorptionSpectrum, Window};
use crate::{Error, Result};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::f64::consts::{LN_10, LN_2, PI};
use std::io::Write;

/// dB of intensity attenuation to natural optical depth.
pub fn db_to_nat(db: f64) -> f64 {
    db * LN_10 / 10.0
}

/// π²/(4 ln 2), the Gaussian-tooth dephasing constant.
pub fn dephasing_constant() -> f64 {
    PI * PI / (4.0 * LN_2)
}

/// Dephasing factor of a Gaussian-tooth comb with finesse `f`.
pub fn dephasing_factor(f: f64) -> f64 {
    (-dephasing_constant() / (f * f)).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToothShape {
    Gaussian,
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CombParams {
    /// Peak optical depth of a tooth above the background, dB.
    pub peak_od_db: f64,
    pub spacing_mhz: f64,
    pub tooth_fwhm_khz: f64,
    /// Spacing over tooth FWHM.
    pub finesse: f64,
    pub background_db: f64,
    pub n_teeth: usize,
    pub tooth_shape: ToothShape,
}

impl CombParams {
    /// Comb with the tooth width implied by `finesse`.
    pub fn new(
        peak_od_db: f64,
        spacing_mhz: f64,
        finesse: f64,
        background_db: f64,
        n_teeth: usize,
        tooth_shape: ToothShape,
    ) -> Result<CombParams> {
        let c = CombParams {
            peak_od_db,
            spacing_mhz,
            tooth_fwhm_khz: 1e3 * spacing_mhz / finesse,
            finesse,
            background_db,
            n_teeth,
            tooth_shape,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.finesse > 1.0 && self.finesse.is_finite()) {
            return Err(Error::param("finesse", format!("must exceed 1, got {}", self.finesse)));
        }
        if self.n_teeth < 2 {
            return Err(Error::param("n_teeth", "need at least 2 teeth"));
        }
        if !(self.spacing_mhz > 0.0 && self.tooth_fwhm_khz > 0.0) {
            return Err(Error::param("comb", "spacing and tooth width must be positive"));
        }
        if !(self.peak_od_db >= 0.0 && self.background_db >= 0.0) {
            return Err(Error::param("comb", "optical depths must be non-negative"));
        }
        let implied = 1e3 * self.spacing_mhz / self.tooth_fwhm_khz;
        if (implied - self.finesse).abs() > 1e-9 * self.finesse {
            return Err(Error::param(
                "finesse",
                format!("{} disagrees with spacing/FWHM = {implied}", self.finesse),
            ));
        }
        Ok(())
    }

    /// Tooth centers, symmetric about zero detuning.
    pub fn centers_mhz(&self) -> Vec<f64> {
        let mid = (self.n_teeth as f64 - 1.0) / 2.0;
        (0..self.n_teeth).map(|j| (j as f64 - mid) * self.spacing_mhz).collect()
    }

    /// Absorption of the ideal comb at detuning `f`, dB.
    pub fn absorption_db(&self, f: f64) -> f64 {
        let w = self.tooth_fwhm_khz * 1e-3;
        let teeth: f64 = self
            .centers_mhz()
            .iter()
            .map(|c| {
                let x = (f - c) / w;
                match self.tooth_shape {
                    ToothShape::Gaussian => (-4.0 * LN_2 * x * x).exp(),
                    ToothShape::Square if x.abs() < 0.5 => 1.0,
                    ToothShape::Square if x.abs() == 0.5 => 0.5,
                    ToothShape::Square => 0.0,
                }
            })
            .sum();
        self.background_db + self.peak_od_db * teeth
    }

    /// Sampled ideal comb over `window`, with its background recorded.
    pub fn spectrum(&self, window: &Window) -> Result<AbsorptionSpectrum> {
        self.validate()?;
        window.validate()?;
        let step = window.step_khz * 1e-3;
        let n = ((window.hi_mhz - window.lo_mhz) / step).round() as usize + 1;
        let f: Vec<f64> = (0..n).map(|i| window.lo_mhz + i as f64 * step).collect();
        let a = f.iter().map(|&x| self.absorption_db(x)).collect();
        let mut s = AbsorptionSpectrum::from_samples(f, a)?;
        s.background_db.residual_polarization = self.background_db;
        s.memory_db.iter_mut().for_each(|m| *m -= self.background_db);
        Ok(s)
    }

    /// Window spanning every tooth plus `margin_mhz` on each side.
    pub fn window(&self, margin_mhz: f64, step_khz: f64) -> Window {
        let half = 0.5 * (self.n_teeth as f64 - 1.0) * self.spacing_mhz + margin_mhz;
        Window::new(-half, half, step_khz)
    }

    /// Analytic efficiency of an infinite comb with these parameters.
    pub fn efficiency_analytic(&self) -> Result<f64> {
        efficiency_analytic(self.peak_od_db, self.finesse, self.background_db)
    }
}

/// Periodic continuation of one comb period of `spectrum`, centered on
/// `center_mhz`, repeated `n_teeth` times and padded by `margin_mhz` of the
/// background-only absorption at the center. Isolates the effect of a
/// finite number of teeth from the tooth shape.
pub fn tile_period(
    spectrum: &AbsorptionSpectrum,
    center_mhz: f64,
    spacing_mhz: f64,
    n_teeth: usize,
    margin_mhz: f64,
) -> Result<AbsorptionSpectrum> {
    if !(spacing_mhz > 0.0 && margin_mhz >= 0.0) || n_teeth < 1 {
        return Err(Error::param("tile_period", "spacing, margin and tooth count must be positive"));
    }
    let f = &spectrum.frequencies;
    if center_mhz - 0.5 * spacing_mhz < f[0] || center_mhz + 0.5 * spacing_mhz > f[f.len() - 1] {
        return Err(Error::param("tile_period", "one period around the center must lie inside the spectrum"));
    }
    let bg = spectrum.background_only().at(center_mhz);
    let step = spectrum.step_mhz();
    let half = 0.5 * n_teeth as f64 * spacing_mhz;
    let n = ((2.0 * (half + margin_mhz)) / step).round() as usize + 1;
    let freqs: Vec<f64> = (0..n).map(|i| center_mhz - half - margin_mhz + i as f64 * step).collect();
    let a = freqs
        .iter()
        .map(|&x| {
            let u = x - center_mhz;
            if u.abs() > half {
                return bg;
            }
            let wrapped = u - spacing_mhz * (u / spacing_mhz).round();
            spectrum.at(center_mhz + wrapped)
        })
        .collect();
    let mut out = AbsorptionSpectrum::from_samples(freqs, a)?;
    out.memory_db.iter_mut().for_each(|m| *m = (*m - bg).max(0.0));
    out.background_db.residual_polarization = bg;
    Ok(out)
}

/// Forward-echo efficiency of an infinite comb of Gaussian teeth with peak
/// depth `d_db`, finesse `f` and background `d0_db`:
/// (d/F)² e^{-d/F} e^{-π²/(4 ln2 F²)} e^{-d0}.
pub fn efficiency_analytic(d_db: f64, f: f64, d0_db: f64) -> Result<f64> {
    if !(d_db >= 0.0 && d0_db >= 0.0 && d_db.is_finite() && d0_db.is_finite()) {
        return Err(Error::param("optical depth", "must be finite and non-negative"));
    }
    if !(f > 1.0 && f.is_finite()) {
        return Err(Error::param("finesse", format!("must exceed 1, got {f}")));
    }
    let x = db_to_nat(d_db) / f;
    Ok(x * x * (-x).exp() * dephasing_factor(f) * (-db_to_nat(d0_db)).exp())
}

/// Nominal value with the extremes over a box of inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub nominal: f64,
    pub min: f64,
    pub max: f64,
}

/// Efficiency with its range over d ± `d_err` and d0 ± `d0_err` (dB) at
/// fixed finesse. The efficiency falls monotonically with d0 and peaks once
/// in d, at d = 2F in natural units.
pub fn efficiency_interval(d_db: f64, d_err: f64, f: f64, d0_db: f64, d0_err: f64) -> Result<Interval> {
    if !(d_err >= 0.0 && d0_err >= 0.0) {
        return Err(Error::param("uncertainty", "must be non-negative"));
    }
    let nominal = efficiency_analytic(d_db, f, d0_db)?;
    let d_lo = (d_db - d_err).max(0.0);
    let d_hi = d_db + d_err;
    let d0_lo = (d0_db - d0_err).max(0.0);
    let d0_hi = d0_db + d0_err;
    let mut ds = vec![d_lo, d_hi];
    let d_peak = 2.0 * f * 10.0 / LN_10;
    if d_peak > d_lo && d_peak < d_hi {
        ds.push(d_peak);
    }
    let best = ds
        .iter()
        .map(|&d| efficiency_analytic(d, f, d0_lo))
        .collect::<Result<Vec<_>>>()?;
    let worst = [d_lo, d_hi]
        .iter()
        .map(|&d| efficiency_analytic(d, f, d0_hi))
        .collect::<Result<Vec<_>>>()?;
    Ok(Interval {
        nominal,
        min: worst.into_iter().fold(f64::INFINITY, f64::min),
        max: best.into_iter().fold(f64::NEG_INFINITY, f64::max),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FinesseOptimum {
    pub finesse: f64,
    pub efficiency: f64,
}

/// Finesse maximizing [`efficiency_analytic`] at peak depth `d_db`. With
/// x = 1/F the stationary condition is 2a x² + d x - 2 = 0, a = π²/(4 ln2),
/// d natural; the positive root is the maximum. The background only scales
/// the efficiency.
pub fn optimize_finesse(d_db: f64, d0_db: f64) -> Result<FinesseOptimum> {
    if !(d_db > 0.0 && d_db.is_finite()) {
        return Err(Error::param("peak_od_db", "must be positive"));
    }
    if !(d0_db >= 0.0) {
        return Err(Error::param("background_db", "must be non-negative"));
    }
    let a = dephasing_constant();
    let d = db_to_nat(d_db);
    // Rationalized root, stable for large d.
    let x = 4.0 / (d + (d * d + 16.0 * a).sqrt());
    let f = 1.0 / x;
    let x_d = d * x;
    let efficiency = x_d * x_d * (-x_d).exp() * dephasing_factor(f) * (-db_to_nat(d0_db)).exp();
    Ok(FinesseOptimum { finesse: f, efficiency })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PulseShape {
    Gaussian,
    Square,
}

/// Probe pulse: intensity FWHM (or full duration for a square pulse) and
/// carrier detuning on the spectrum's frequency axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pulse {
    pub fwhm_ns: f64,
    pub center_mhz: f64,
    pub shape: PulseShape,
}

impl Pulse {
    pub fn gaussian(fwhm_ns: f64, center_mhz: f64) -> Pulse {
        Pulse {
            fwhm_ns,
            center_mhz,
            shape: PulseShape::Gaussian,
        }
    }

    /// Spectral intensity FWHM, MHz.
    pub fn bandwidth_mhz(&self) -> f64 {
        let tb = match self.shape {
            PulseShape::Gaussian => 2.0 * LN_2 / PI,
            PulseShape::Square => 0.885_893,
        };
        1e3 * tb / self.fwhm_ns
    }

    /// Field envelope at `t_ns` from the pulse center.
    pub fn envelope(&self, t_ns: f64) -> f64 {
        let x = t_ns / self.fwhm_ns;
        match self.shape {
            PulseShape::Gaussian => (-2.0 * LN_2 * x * x).exp(),
            PulseShape::Square if x.abs() < 0.5 => 1.0,
            PulseShape::Square if x.abs() == 0.5 => std::f64::consts::FRAC_1_SQRT_2,
            PulseShape::Square => 0.0,
        }
    }
}

/// Passive minimum-phase amplitude transfer of a sampled absorption
/// spectrum: |H| = e^{-α/2} with the phase fixed by causality.
#[derive(Debug, Clone)]
pub struct MinimumPhaseFilter {
    pub lo_mhz: f64,
    pub step_mhz: f64,
    pub response: Vec<Complex64>,
}

impl MinimumPhaseFilter {
    /// Build from the spectrum's uniform grid, treated as one period of the
    /// discrete transform. The phase comes from the folded cepstrum of the
    /// log-amplitude.
    pub fn new(spectrum: &AbsorptionSpectrum) -> Result<MinimumPhaseFilter> {
        let f = &spectrum.frequencies;
        let a = &spectrum.absorption_db;
        let n = f.len();
        if n < 16 || a.len() != n {
            return Err(Error::Echo("spectrum needs at least 16 samples".into()));
        }
        let step = (f[n - 1] - f[0]) / (n - 1) as f64;
        if !(step > 0.0) || f.windows(2).any(|w| ((w[1] - w[0]) - step).abs() > 1e-6 * step) {
            return Err(Error::Echo("spectrum must be uniformly sampled".into()));
        }
        if a.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Echo("absorption must be finite and non-negative".into()));
        }
        let mut planner = FftPlanner::<f64>::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let mut c: Vec<Complex64> = a.iter().map(|&v| Complex64::new(-0.5 * db_to_nat(v), 0.0)).collect();
        inv.process(&mut c);
        let scale = 1.0 / n as f64;
        let mut folded = vec![Complex64::new(0.0, 0.0); n];
        folded[0] = c[0] * scale;
        for k in 1..n.div_ceil(2) {
            folded[k] = c[k] * (2.0 * scale);
        }
        if n.is_multiple_of(2) {
            folded[n / 2] = c[n / 2] * scale;
        }
        fwd.process(&mut folded);
        let response = folded.into_iter().map(|z| z.exp()).collect();
        Ok(MinimumPhaseFilter {
            lo_mhz: f[0],
            step_mhz: step,
            response,
        })
    }

    pub fn len(&self) -> usize {
        self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response.is_empty()
    }

    /// Time step of the conjugate grid, ns.
    pub fn time_step_ns(&self) -> f64 {
        1e3 / (self.len() as f64 * self.step_mhz)
    }

    /// Largest |H| over the grid.
    pub fn max_gain(&self) -> f64 {
        self.response.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Impulse response on the circular time grid; indices past the middle
    /// are negative times.
    pub fn impulse_response(&self) -> Vec<Complex64> {
        let n = self.len();
        let mut h = self.response.clone();
        FftPlanner::<f64>::new().plan_fft_inverse(n).process(&mut h);
        h.iter_mut().for_each(|z| *z /= n as f64);
        h
    }

    /// Largest |h(t)| at negative times relative to the peak |h|.
    pub fn pre_pulse_leakage(&self) -> f64 {
        let h = self.impulse_response();
        let n = h.len();
        let peak = h.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let pre = h[n.div_ceil(2)..].iter().map(|z| z.norm()).fold(0.0, f64::max);
        if peak > 0.0 {
            pre / peak
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EchoResult {
    /// (time from the input peak in ns, output intensity over input peak
    /// intensity).
    pub time_trace: Vec<(f64, f64)>,
    /// Echo-window energy over the input energy transmitted by the
    /// background-only spectrum.
    pub efficiency: f64,
    /// Peak of the first echo after the input window; `None` without one.
    pub echo_delay_ns: Option<f64>,
    /// Output energy within the input window over the free-space input energy.
    pub transmitted_fraction: f64,
    /// Echo-window energy over the free-space input energy.
    pub free_space_efficiency: f64,
    pub time_step_ns: f64,
}

impl EchoResult {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t_ns,intensity")?;
        for (t, i) in &self.time_trace {
            writeln!(w, "{t:.6},{i:.9e}")?;
        }
        Ok(())
    }
}

/// Relative height above the floor allowed at the spectrum edges.
const EDGE_TOLERANCE: f64 = 0.05;

/// Send `pulse` through the spectrum and integrate the first echo over its
/// peak ± 1.5 input FWHM, excluding the transmitted window. The reference is the same pulse sent through the
/// spectrum with the memory level removed.
pub fn echo_simulate(spectrum: &AbsorptionSpectrum, pulse: &Pulse) -> Result<EchoResult> {
    if !(pulse.fwhm_ns > 0.0 && pulse.fwhm_ns.is_finite() && pulse.center_mhz.is_finite()) {
        return Err(Error::param("pulse", "width must be positive and center finite"));
    }
    let f = &spectrum.frequencies;
    let a = &spectrum.absorption_db;
    if f.len() < 16 {
        return Err(Error::Echo("spectrum needs at least 16 samples".into()));
    }
    let (lo, hi) = (f[0], f[f.len() - 1]);
    let b = pulse.bandwidth_mhz();
    if pulse.center_mhz - 2.0 * b < lo || pulse.center_mhz + 2.0 * b > hi {
        return Err(Error::Echo(format!(
            "pulse band {:.3} ± {:.3} MHz exceeds the spectrum window [{lo}, {hi}] MHz",
            pulse.center_mhz,
            2.0 * b
        )));
    }
    let floor = a.iter().copied().fold(f64::INFINITY, f64::min);
    let range = a.iter().copied().fold(f64::NEG_INFINITY, f64::max) - floor;
    if range > 0.0 {
        for edge in [a[0], a[a.len() - 1]] {
            if edge - floor > EDGE_TOLERANCE * range {
                return Err(Error::Echo(format!(
                    "absorption does not decay to the floor at the window edges ({edge:.3} dB vs floor {floor:.3} dB)"
                )));
            }
        }
    }

    let filter = MinimumPhaseFilter::new(spectrum)?;
    let n = filter.len();
    let dt = filter.time_step_ns();
    let tau = pulse.fwhm_ns;
    let i0 = (4.0 * tau / dt).ceil() as usize;
    let half_window = 1.5 * tau;
    if (i0 as f64 * dt + 4.0 * half_window) * 2.0 > n as f64 * dt {
        return Err(Error::Echo("frequency step too coarse for the pulse duration".into()));
    }
    let df = pulse.center_mhz - filter.lo_mhz;
    let input: Vec<Complex64> = (0..n)
        .map(|k| {
            let t = (k as f64 - i0 as f64) * dt;
            let phase = 2.0 * PI * df * 1e-3 * k as f64 * dt;
            Complex64::from_polar(pulse.envelope(t), phase)
        })
        .collect();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut x = input.clone();
    fwd.process(&mut x);
    let through = |h: &MinimumPhaseFilter| -> Vec<f64> {
        let mut y: Vec<Complex64> = x.iter().zip(&h.response).map(|(a, b)| a * b).collect();
        inv.process(&mut y);
        y.iter().map(|z| (z / n as f64).norm_sqr()).collect()
    };
    let out = through(&filter);
    let e_ref: f64 = through(&MinimumPhaseFilter::new(&spectrum.background_only())?).iter().sum();
    let inp: Vec<f64> = input.iter().map(|z| z.norm_sqr()).collect();
    let e_in: f64 = inp.iter().sum();
    let peak_in = inp.iter().copied().fold(0.0, f64::max);

    let t_of = |k: usize| (k as f64 - i0 as f64) * dt;
    // Energy in center ± half_window, counting only times after `after`.
    let window_energy = |center: f64, after: f64| -> f64 {
        (0..n / 2)
            .filter(|&k| (t_of(k) - center).abs() <= half_window && t_of(k) > after)
            .map(|k| out[k])
            .sum()
    };
    let transmitted = window_energy(0.0, f64::NEG_INFINITY);

    let start = i0 + (half_window / dt).ceil() as usize + 1;
    let stop = n / 2;
    let gmax = out[start..stop].iter().copied().fold(0.0, f64::max);
    let k_peak = (start + 1..stop - 1)
        .find(|&k| out[k] > out[k - 1] && out[k] >= out[k + 1] && out[k] >= 0.5 * gmax);
    let delay = k_peak.map(|k| {
        let (l, c, r) = (out[k - 1], out[k], out[k + 1]);
        let den = l - 2.0 * c + r;
        let shift = if den < 0.0 { 0.5 * (l - r) / den } else { 0.0 };
        t_of(k) + shift * dt
    });
    // An early echo must not recount the transmitted window.
    let echo = delay.map_or(0.0, |d| window_energy(d, half_window));
    let time_trace = (0..stop).map(|k| (t_of(k), out[k] / peak_in)).collect();
    Ok(EchoResult {
        time_trace,
        efficiency: echo / e_ref,
        echo_delay_ns: delay,
        transmitted_fraction: transmitted / e_in,
        free_space_efficiency: echo / e_in,
        time_step_ns: dt,
    })
}

/// Impedance-matched cavity design point. Only the comb parameters enter
/// the projection; the cavity geometry documents how matching is reached.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CavityDesign {
    pub cavity_length_cm: f64,
    pub cavity_finesse: f64,
    pub bandwidth_mhz: f64,
    pub comb_finesse: f64,
    pub peak_od_db: f64,
    pub background_db: f64,
}

impl Default for CavityDesign {
    fn default() -> Self {
        CavityDesign {
            cavity_length_cm: 27.0,
            cavity_finesse: 11.0,
            bandwidth_mhz: 100.0,
            comb_finesse: 9.0,
            peak_od_db: 20.0,
            background_db: 0.08,
        }
    }
}

impl CavityDesign {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            self.cavity_length_cm,
            self.cavity_finesse,
            self.bandwidth_mhz,
            self.comb_finesse,
            self.peak_od_db,
        ];
        if pos.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::param("cavity", "parameters must be positive"));
        }
        if !(self.background_db >= 0.0 && self.background_db.is_finite()) {
            return Err(Error::param("cavity.background_db", "must be non-negative"));
        }
        if self.comb_finesse <= 1.0 {
            return Err(Error::param("cavity.comb_finesse", "must exceed 1"));
        }
        Ok(())
    }
}

/// Efficiency of an impedance-matched cavity memory:
/// (d̃/(d̃ + d₀))² · e^{-π²/(4 ln2 F²)} with d̃ = d/F the mean comb depth,
/// all in natural units.
pub fn cavity_projection(design: &CavityDesign) -> Result<f64> {
    design.validate()?;
    let mean = db_to_nat(design.peak_od_db) / design.comb_finesse;
    let d0 = db_to_nat(design.background_db);
    let matched = mean / (mean + d0);
    Ok(matched * matched * dephasing_factor(design.comb_finesse))
}

/// Background absorption from an impurity scaled from one concentration to
/// another.
pub fn rescale_impurity(background_db: f64, from_fraction: f64, to_fraction: f64) -> Result<f64> {
    if !(from_fraction > 0.0 && to_fraction >= 0.0 && background_db >= 0.0) {
        return Err(Error::param("impurity", "fractions and background must be non-negative"));
    }
    Ok(background_db * to_fraction / from_fraction)
}
