//! Per-level population over inhomogeneous detuning classes.
//!
//! Each bin holds the population mass of every ground level for the ions
//! whose transitions are all rigidly shifted by the bin's detuning. Bins are
//! coarse over the full optical line and fine around the memory region.

mod protocol;
mod relax;
mod script;

pub use protocol::{apply_burn, apply_sweep, run_protocol, BurnParams, ExcitedDecay, PumpModel, StepLog, SweepParams};
pub use relax::{hyperfine_disorder, ladder_generator, relax, RelaxationRates};
pub use script::{BurnStep, LaserModel, ProtocolScript, Step, SweepStep, TransitionRef};

use crate::hyperfine::{Level, LevelScheme, N_LEVELS};
use crate::lineshape::OpticalLine;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Planck constant over Boltzmann constant, K per MHz.
pub const H_OVER_K_K_PER_MHZ: f64 = 4.799_243_073e-5;

pub type Populations = [f64; N_LEVELS];

/// Bin layout of the detuning grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub half_width_mhz: f64,
    pub coarse_step_khz: f64,
    pub fine_center_mhz: f64,
    pub fine_half_width_mhz: f64,
    pub fine_step_khz: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            half_width_mhz: 1600.0,
            coarse_step_khz: 100.0,
            fine_center_mhz: 0.0,
            fine_half_width_mhz: 20.0,
            fine_step_khz: 10.0,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.half_width_mhz > 0.0 && self.coarse_step_khz > 0.0 && self.fine_step_khz > 0.0) {
            return Err(Error::param("grid", "widths and steps must be positive"));
        }
        if self.fine_half_width_mhz < 0.0 {
            return Err(Error::param("grid.fine_half_width_mhz", "must be non-negative"));
        }
        let (lo, hi) = (
            self.fine_center_mhz - self.fine_half_width_mhz,
            self.fine_center_mhz + self.fine_half_width_mhz,
        );
        if lo < -self.half_width_mhz || hi > self.half_width_mhz {
            return Err(Error::param("grid", "fine region must lie inside the grid"));
        }
        let n = 2.0 * self.half_width_mhz / (self.coarse_step_khz * 1e-3)
            + 2.0 * self.fine_half_width_mhz / (self.fine_step_khz * 1e-3);
        if n > 5e6 {
            return Err(Error::param("grid", format!("{n:.0} bins is too many")));
        }
        Ok(())
    }

    /// Bin edges in MHz.
    pub fn edges(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let h = self.half_width_mhz;
        let lo = self.fine_center_mhz - self.fine_half_width_mhz;
        let hi = self.fine_center_mhz + self.fine_half_width_mhz;
        let mut edges = vec![-h];
        let mut push_span = |a: f64, b: f64, step: f64| {
            if b <= a {
                return;
            }
            let n = ((b - a) / step - 1e-9).ceil().max(1.0) as usize;
            for i in 1..=n {
                edges.push(a + (b - a) * i as f64 / n as f64);
            }
        };
        let coarse = self.coarse_step_khz * 1e-3;
        push_span(-h, lo, coarse);
        push_span(lo, hi, self.fine_step_khz * 1e-3);
        push_span(hi, h, coarse);
        Ok(edges)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralPopulationGrid {
    edges: Vec<f64>,
    mass: Vec<Populations>,
    /// Excited-state population per excited level held between burns.
    excited: Vec<Populations>,
    /// Time up to which each bin's excited population has been decayed.
    excited_since: Vec<f64>,
    /// Laboratory time of the pumping sequence, seconds.
    clock_s: f64,
    pub temperature_k: f64,
    pub total_population: f64,
    pub profile: OpticalLine,
    pub line_center_mhz: f64,
}

/// Decay one bin's held excited population from `since` to `now`.
pub(crate) fn decay_bin(
    ground: &mut Populations,
    excited: &mut Populations,
    since: &mut f64,
    now: f64,
    t1: f64,
    branch: &[Populations],
) {
    if excited.iter().any(|v| *v != 0.0) {
        let keep = (-(now - *since) / t1).exp();
        for (e, amount) in excited.iter_mut().enumerate() {
            if *amount != 0.0 {
                let out = *amount * (1.0 - keep);
                for (gp, b) in ground.iter_mut().zip(&branch[e]) {
                    *gp += out * b;
                }
                *amount *= keep;
            }
        }
    }
    *since = now;
}

/// Thermal ground-level occupancies, normalized to 1.
pub fn boltzmann(scheme: &LevelScheme, temperature_k: f64) -> Result<Populations> {
    if !(temperature_k > 0.0) {
        return Err(Error::param("temperature", "must be positive"));
    }
    let mut p = [0.0; N_LEVELS];
    if temperature_k.is_infinite() {
        return Ok([1.0 / N_LEVELS as f64; N_LEVELS]);
    }
    for l in Level::all() {
        p[l.index()] = (-H_OVER_K_K_PER_MHZ * scheme.ground_energy(l) / temperature_k).exp();
    }
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    Ok(p)
}

/// Thermal-equilibrium grid: every class carries Boltzmann occupancies and
/// class masses follow the optical line, truncated to the grid and renormalized.
pub fn init_thermal(
    scheme: &LevelScheme,
    spec: &GridSpec,
    temperature_k: f64,
    line_center_mhz: f64,
    total: f64,
) -> Result<SpectralPopulationGrid> {
    let occ = boltzmann(scheme, temperature_k)?;
    if !(total >= 0.0 && total.is_finite()) {
        return Err(Error::param("total", "must be finite and non-negative"));
    }
    let edges = spec.edges()?;
    let line = scheme.optical_line;
    let cdf: Vec<f64> = edges.iter().map(|&x| line.cdf(x - line_center_mhz)).collect();
    let norm = cdf[cdf.len() - 1] - cdf[0];
    let mass = cdf
        .windows(2)
        .map(|w| {
            let m = total * (w[1] - w[0]) / norm;
            let mut p = [0.0; N_LEVELS];
            for (v, o) in p.iter_mut().zip(occ.iter()) {
                *v = m * o;
            }
            p
        })
        .collect::<Vec<_>>();
    let n = mass.len();
    Ok(SpectralPopulationGrid {
        edges,
        mass,
        excited: vec![[0.0; N_LEVELS]; n],
        excited_since: vec![0.0; n],
        clock_s: 0.0,
        temperature_k,
        total_population: total,
        profile: line,
        line_center_mhz,
    })
}

impl SpectralPopulationGrid {
    pub fn n_bins(&self) -> usize {
        self.mass.len()
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn coverage(&self) -> (f64, f64) {
        (self.edges[0], self.edges[self.edges.len() - 1])
    }

    pub fn center(&self, bin: usize) -> f64 {
        0.5 * (self.edges[bin] + self.edges[bin + 1])
    }

    pub fn width(&self, bin: usize) -> f64 {
        self.edges[bin + 1] - self.edges[bin]
    }

    pub fn detunings(&self) -> Vec<f64> {
        (0..self.n_bins()).map(|i| self.center(i)).collect()
    }

    pub fn mass(&self) -> &[Populations] {
        &self.mass
    }

    pub(crate) fn mass_mut(&mut self) -> &mut [Populations] {
        &mut self.mass
    }

    pub fn excited(&self) -> &[Populations] {
        &self.excited
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut [Populations], &mut [Populations], &mut [f64], f64) {
        (&mut self.mass, &mut self.excited, &mut self.excited_since, self.clock_s)
    }

    pub(crate) fn advance_clock(&mut self, dt: f64) {
        self.clock_s += dt;
    }

    /// Let held excited population decay with lifetime `t1` up to the
    /// current clock.
    pub(crate) fn settle_excited(&mut self, scheme: &LevelScheme, t1: f64) {
        let branch: Vec<Populations> = Level::all().map(|e| scheme.branching_ratios(e)).collect();
        let now = self.clock_s;
        for ((g, x), since) in self.mass.iter_mut().zip(self.excited.iter_mut()).zip(self.excited_since.iter_mut()) {
            decay_bin(g, x, since, now, t1, &branch);
        }
    }

    /// Population density of `level` in `bin` (mass per MHz).
    pub fn density(&self, level: Level, bin: usize) -> f64 {
        self.mass[bin][level.index()] / self.width(bin)
    }

    /// Ground population per level summed over all classes.
    pub fn level_totals(&self) -> Populations {
        let mut t = [0.0; N_LEVELS];
        for p in &self.mass {
            for (a, b) in t.iter_mut().zip(p) {
                *a += b;
            }
        }
        t
    }

    pub fn excited_total(&self) -> f64 {
        self.excited.iter().flat_map(|p| p.iter()).sum()
    }

    /// Ground plus excited population.
    pub fn total(&self) -> f64 {
        self.level_totals().iter().sum::<f64>() + self.excited_total()
    }

    /// Mean ground-level distribution over the whole ensemble.
    pub fn mean_distribution(&self) -> Populations {
        let mut t = self.level_totals();
        let s: f64 = t.iter().sum();
        if s > 0.0 {
            t.iter_mut().for_each(|v| *v /= s);
        }
        t
    }

    /// Index of the bin containing `x`, if any.
    pub fn bin_of(&self, x: f64) -> Option<usize> {
        let (lo, hi) = self.coverage();
        if !(x >= lo && x < hi) {
            return None;
        }
        Some(self.edges.partition_point(|&e| e <= x) - 1)
    }

    /// Bins whose centers fall in [lo, hi].
    pub fn bins_between(&self, lo: f64, hi: f64) -> std::ops::Range<usize> {
        let first = |pred: &dyn Fn(usize) -> bool| {
            let (mut a, mut b) = (0, self.n_bins());
            while a < b {
                let m = (a + b) / 2;
                if pred(m) {
                    a = m + 1;
                } else {
                    b = m;
                }
            }
            a
        };
        let start = first(&|i| self.center(i) < lo);
        let end = first(&|i| self.center(i) <= hi);
        start..end.max(start)
    }

    /// Cumulative mass of `level` at each bin edge.
    pub fn cumulative(&self, level: Level) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.edges.len());
        let mut acc = 0.0;
        out.push(0.0);
        for p in &self.mass {
            acc += p[level.index()];
            out.push(acc);
        }
        out
    }

    /// Empty grid with the same layout.
    pub fn empty_like(&self) -> SpectralPopulationGrid {
        let mut g = self.clone();
        g.mass.iter_mut().for_each(|p| *p = [0.0; N_LEVELS]);
        g.excited.iter_mut().for_each(|p| *p = [0.0; N_LEVELS]);
        g.total_population = 0.0;
        g
    }

    /// Class-wise sum of two grids with identical layout.
    pub fn combined(&self, other: &SpectralPopulationGrid) -> Result<SpectralPopulationGrid> {
        if self.edges != other.edges {
            return Err(Error::param("grid", "layouts differ"));
        }
        let mut g = self.clone();
        for (a, b) in g.mass.iter_mut().zip(&other.mass) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in g.excited.iter_mut().zip(&other.excited) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        g.total_population += other.total_population;
        Ok(g)
    }

    /// Scale all populations in place.
    pub fn scale(&mut self, k: f64) {
        for p in self.mass.iter_mut().chain(self.excited.iter_mut()) {
            p.iter_mut().for_each(|v| *v *= k);
        }
        self.total_population *= k;
    }

    /// Move every class in [lo, hi] entirely into `level`.
    pub fn set_classes(&mut self, lo: f64, hi: f64, level: Level) {
        for i in self.bins_between(lo, hi) {
            let m: f64 = self.mass[i].iter().sum();
            self.mass[i] = [0.0; N_LEVELS];
            self.mass[i][level.index()] = m;
        }
    }

    /// Return any held excited population to the ground levels via branching.
    pub fn release_excited(&mut self, scheme: &LevelScheme) {
        if self.excited_total() == 0.0 {
            return;
        }
        let branch: Vec<Populations> = Level::all().map(|e| scheme.branching_ratios(e)).collect();
        for (g, x) in self.mass.iter_mut().zip(self.excited.iter_mut()) {
            for (e, amount) in x.iter_mut().enumerate() {
                if *amount != 0.0 {
                    for (gp, b) in g.iter_mut().zip(&branch[e]) {
                        *gp += *amount * b;
                    }
                    *amount = 0.0;
                }
            }
        }
    }

    /// CSV export: detuning_MHz, bin_width_MHz, level, density.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "detuning_MHz,bin_width_MHz,level,density_per_MHz")?;
        for i in 0..self.n_bins() {
            for l in Level::all() {
                writeln!(
                    w,
                    "{:.6},{:.6},{},{:.9e}",
                    self.center(i),
                    self.width(i),
                    l,
                    self.density(l, i)
                )?;
            }
        }
        Ok(())
    }
}
