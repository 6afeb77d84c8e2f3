//! Normalized line profiles used for inhomogeneous lines and burn kernels.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;
use std::f64::consts::{LN_2, PI, SQRT_2};

/// sigma = fwhm * FWHM_TO_SIGMA for a Gaussian.
pub const FWHM_TO_SIGMA: f64 = 0.424_660_900_144_009_5;

pub fn gaussian_pdf(x: f64, fwhm: f64) -> f64 {
    let s = fwhm * FWHM_TO_SIGMA;
    (-0.5 * (x / s).powi(2)).exp() / (s * (2.0 * PI).sqrt())
}

pub fn gaussian_cdf(x: f64, fwhm: f64) -> f64 {
    let s = fwhm * FWHM_TO_SIGMA;
    0.5 * (1.0 + erf(x / (s * SQRT_2)))
}

pub fn lorentz_pdf(x: f64, fwhm: f64) -> f64 {
    let g = 0.5 * fwhm;
    g / (PI * (x * x + g * g))
}

pub fn lorentz_cdf(x: f64, fwhm: f64) -> f64 {
    0.5 + (x / (0.5 * fwhm)).atan() / PI
}

/// Laplace density with scale `b` (mean absolute deviation).
pub fn laplace_pdf(x: f64, b: f64) -> f64 {
    (-x.abs() / b).exp() / (2.0 * b)
}

pub fn laplace_cdf(x: f64, b: f64) -> f64 {
    if x < 0.0 {
        0.5 * (x / b).exp()
    } else {
        1.0 - 0.5 * (-x / b).exp()
    }
}

/// Shape of the broad wing component of the optical line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Wings {
    Lorentzian,
    Gaussian,
}

/// Optical inhomogeneous line: Gaussian core plus a broad wing, unit area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpticalLine {
    pub core_fwhm_mhz: f64,
    pub wing_fwhm_mhz: f64,
    /// Fraction of the area carried by the wing component.
    pub wing_weight: f64,
    pub wings: Wings,
}

impl Default for OpticalLine {
    fn default() -> Self {
        OpticalLine {
            core_fwhm_mhz: 30.0,
            wing_fwhm_mhz: 89.0,
            wing_weight: 0.65,
            wings: Wings::Lorentzian,
        }
    }
}

impl OpticalLine {
    pub fn density(&self, x: f64) -> f64 {
        let wing = match self.wings {
            Wings::Lorentzian => lorentz_pdf(x, self.wing_fwhm_mhz),
            Wings::Gaussian => gaussian_pdf(x, self.wing_fwhm_mhz),
        };
        (1.0 - self.wing_weight) * gaussian_pdf(x, self.core_fwhm_mhz) + self.wing_weight * wing
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let wing = match self.wings {
            Wings::Lorentzian => lorentz_cdf(x, self.wing_fwhm_mhz),
            Wings::Gaussian => gaussian_cdf(x, self.wing_fwhm_mhz),
        };
        (1.0 - self.wing_weight) * gaussian_cdf(x, self.core_fwhm_mhz) + self.wing_weight * wing
    }

    pub fn validate(&self) -> crate::Result<()> {
        if !(self.core_fwhm_mhz > 0.0 && self.wing_fwhm_mhz > 0.0) {
            return Err(crate::Error::param("optical_line", "widths must be positive"));
        }
        if !(0.0..=1.0).contains(&self.wing_weight) {
            return Err(crate::Error::param("optical_line.wing_weight", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Unit-height square of width `w` convolved with a unit-area Gaussian of the
/// given FWHM. The result has area `w` and tends to 1 at the center when the
/// square is much wider than the kernel.
pub fn square_gaussian(x: f64, w: f64, fwhm: f64) -> f64 {
    if fwhm <= 0.0 {
        return if x.abs() <= 0.5 * w { 1.0 } else { 0.0 };
    }
    gaussian_cdf(x + 0.5 * w, fwhm) - gaussian_cdf(x - 0.5 * w, fwhm)
}

/// Unit-height square of width `w` convolved with a Laplace kernel of scale `b`.
pub fn square_laplace(x: f64, w: f64, b: f64) -> f64 {
    if b <= 0.0 {
        return if x.abs() <= 0.5 * w { 1.0 } else { 0.0 };
    }
    laplace_cdf(x + 0.5 * w, b) - laplace_cdf(x - 0.5 * w, b)
}

/// pi^2 / (4 ln 2), the Gaussian-tooth dephasing constant.
pub fn comb_dephasing_constant() -> f64 {
    PI * PI / (4.0 * LN_2)
}
