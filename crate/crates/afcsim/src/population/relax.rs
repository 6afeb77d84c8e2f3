//! Hyperfine population relaxation: a nearest-neighbour spin-lattice ladder
//! plus cross-relaxation toward the ensemble-average distribution.
//!
//! The cross-relaxation rate of the ensemble is κ·D², where D is the
//! hyperfine disorder of the ensemble-average distribution q,
//! D = (1 - Σ q_k²) / (1 - 1/8): zero for a fully polarized ensemble and one
//! for equal occupancy.

use super::{Populations, SpectralPopulationGrid, H_OVER_K_K_PER_MHZ};
use crate::hyperfine::{LevelScheme, N_LEVELS};
use crate::{Error, Result};
use nalgebra::{SMatrix, SVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

type Mat8 = SMatrix<f64, N_LEVELS, N_LEVELS>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelaxationRates {
    /// Geometric-mean rate of the single-phonon steps m ↔ m ± 1, 1/s.
    pub ladder_hz: f64,
    /// Cross-relaxation rate of an ensemble with uniform level occupancy, 1/s.
    /// The actual rate scales with the square of [`hyperfine_disorder`].
    pub cross_relaxation_hz: f64,
    /// Longest internal time step, seconds.
    pub max_step_s: f64,
}

impl Default for RelaxationRates {
    fn default() -> Self {
        RelaxationRates {
            ladder_hz: 0.0035,
            cross_relaxation_hz: 0.0088,
            max_step_s: 1.0,
        }
    }
}

impl RelaxationRates {
    pub fn validate(&self) -> Result<()> {
        if !(self.ladder_hz >= 0.0 && self.cross_relaxation_hz >= 0.0) {
            return Err(Error::param("relaxation", "rates must be non-negative"));
        }
        if !(self.max_step_s > 0.0) {
            return Err(Error::param("relaxation.max_step_s", "must be positive"));
        }
        Ok(())
    }

    pub fn ladder_only(&self) -> Self {
        RelaxationRates { cross_relaxation_hz: 0.0, ..*self }
    }
}

/// Generator of the spin-lattice ladder at temperature `t_k`. Upward and
/// downward rates of each adjacent pair are k·e^{∓ΔE/2kT}, which satisfies
/// detailed balance with the Boltzmann occupancies.
pub fn ladder_generator(scheme: &LevelScheme, rate: f64, t_k: f64) -> SMatrix<f64, N_LEVELS, N_LEVELS> {
    let mut l = Mat8::zeros();
    for k in 0..N_LEVELS - 1 {
        let x = if t_k.is_finite() {
            H_OVER_K_K_PER_MHZ * scheme.ground_splittings[k] / (2.0 * t_k)
        } else {
            0.0
        };
        let up = rate * (-x).exp();
        let down = rate * x.exp();
        l[(k + 1, k)] += up;
        l[(k, k)] -= up;
        l[(k, k + 1)] += down;
        l[(k + 1, k + 1)] -= down;
    }
    l
}

/// Probability that two ions drawn from `p` sit in different levels,
/// relative to the same probability for equal occupancy.
pub fn hyperfine_disorder(p: &Populations) -> f64 {
    let n: f64 = p.iter().sum();
    if n <= 0.0 {
        return 0.0;
    }
    let purity: f64 = p.iter().map(|v| (v / n) * (v / n)).sum();
    (1.0 - purity) / (1.0 - 1.0 / N_LEVELS as f64)
}

fn cross_relax(grid: &mut SpectralPopulationGrid, rate: f64, dt: f64) {
    if rate == 0.0 || dt == 0.0 {
        return;
    }
    let mean = grid.mean_distribution();
    let gamma = rate * hyperfine_disorder(&mean).powi(2);
    let keep = (-gamma * dt).exp();
    grid.mass_mut().par_iter_mut().for_each(|p| {
        let n: f64 = p.iter().sum();
        for (v, m) in p.iter_mut().zip(mean.iter()) {
            *v = *v * keep + n * m * (1.0 - keep);
        }
    });
}

/// Evolve the grid for `dt` seconds. Substeps of at most `max_step_s` use a
/// symmetric split: half a cross-relaxation step, an exact ladder step, half
/// a cross-relaxation step. Cross-relaxation keeps the ensemble mean fixed,
/// so each half step is exact for its frozen rate.
pub fn relax(grid: &mut SpectralPopulationGrid, scheme: &LevelScheme, dt: f64, rates: &RelaxationRates) -> Result<()> {
    rates.validate()?;
    if !(dt >= 0.0) {
        return Err(Error::param("dt", "must be non-negative"));
    }
    if dt == 0.0 {
        return Ok(());
    }
    let n = (dt / rates.max_step_s).ceil().max(1.0) as usize;
    let h = dt / n as f64;
    let ladder = (ladder_generator(scheme, rates.ladder_hz, grid.temperature_k) * h).exp();
    for _ in 0..n {
        cross_relax(grid, rates.cross_relaxation_hz, 0.5 * h);
        if rates.ladder_hz > 0.0 {
            grid.mass_mut().par_iter_mut().for_each(|p| {
                let v = ladder * SVector::<f64, N_LEVELS>::from_column_slice(p);
                p.copy_from_slice(v.as_slice());
            });
        }
        cross_relax(grid, rates.cross_relaxation_hz, 0.5 * h);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::{boltzmann, init_thermal, GridSpec};
    use super::*;
    use crate::hyperfine::Level;

    fn spec() -> GridSpec {
        GridSpec {
            half_width_mhz: 200.0,
            coarse_step_khz: 1000.0,
            fine_center_mhz: 0.0,
            fine_half_width_mhz: 2.0,
            fine_step_khz: 50.0,
        }
    }

    #[test]
    fn zero_time_is_identity() {
        let s = LevelScheme::default();
        let mut g = init_thermal(&s, &spec(), 1.5, 0.0, 1.0).unwrap();
        g.set_classes(-0.5, 0.5, Level::LOWEST);
        let before = g.clone();
        relax(&mut g, &s, 0.0, &RelaxationRates::default()).unwrap();
        assert_eq!(g, before);
        assert!(relax(&mut g, &s, -1.0, &RelaxationRates::default()).is_err());
        let bad = RelaxationRates { ladder_hz: -1.0, ..Default::default() };
        assert!(relax(&mut g, &s, 1.0, &bad).is_err());
    }

    #[test]
    fn thermal_grid_is_fixed_point_of_ladder() {
        let s = LevelScheme::default();
        let mut g = init_thermal(&s, &spec(), 1.5, 0.0, 1.0).unwrap();
        let before = g.clone();
        let r = RelaxationRates { ladder_hz: 0.05, cross_relaxation_hz: 0.0, max_step_s: 5.0 };
        relax(&mut g, &s, 500.0, &r).unwrap();
        for (a, b) in g.mass().iter().zip(before.mass()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-9 * y.max(1e-300), "{x} {y}");
            }
        }
    }

    #[test]
    fn ladder_relaxes_to_boltzmann() {
        let s = LevelScheme::default();
        let mut g = init_thermal(&s, &spec(), 0.05, 0.0, 1.0).unwrap();
        g.set_classes(-300.0, 300.0, Level::LOWEST);
        g.temperature_k = 0.05;
        let r = RelaxationRates { ladder_hz: 1.0, cross_relaxation_hz: 0.0, max_step_s: 1.0 };
        relax(&mut g, &s, 200.0, &r).unwrap();
        let want = boltzmann(&s, 0.05).unwrap();
        let got = g.mean_distribution();
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-9, "{got:?} {want:?}");
        }
    }

    #[test]
    fn cross_relaxation_pulls_classes_to_mean_and_conserves() {
        let s = LevelScheme::default();
        let mut g = init_thermal(&s, &spec(), 1.5, 0.0, 1.0).unwrap();
        g.set_classes(-0.5, 0.5, Level::LOWEST);
        let mean = g.mean_distribution();
        let r = RelaxationRates { ladder_hz: 0.0, cross_relaxation_hz: 0.1, max_step_s: 1.0 };
        relax(&mut g, &s, 400.0, &r).unwrap();
        assert!((g.total() - 1.0).abs() < 1e-12);
        let after = g.mean_distribution();
        for (a, b) in after.iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let bin = g.bin_of(0.0).unwrap();
        let n: f64 = g.mass()[bin].iter().sum();
        assert!((g.mass()[bin][0] / n - mean[0]).abs() < 1e-6);
    }

    #[test]
    fn disorder_spans_zero_to_one() {
        assert!((hyperfine_disorder(&[0.125; 8]) - 1.0).abs() < 1e-15);
        assert!((hyperfine_disorder(&[3.0; 8]) - 1.0).abs() < 1e-15);
        let mut p = [0.0; 8];
        p[7] = 1.0;
        assert_eq!(hyperfine_disorder(&p), 0.0);
        p[6] = 1.0;
        assert!((hyperfine_disorder(&p) - 0.5 / 0.875).abs() < 1e-15);
        assert_eq!(hyperfine_disorder(&[0.0; 8]), 0.0);
    }
}
