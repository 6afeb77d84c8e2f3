//! Nonlinear least squares (Levenberg–Marquardt) and the model fits built on it.

use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

#[derive(Debug, Clone)]
pub struct LeastSquares {
    pub params: Vec<f64>,
    /// s²(JᵀJ)⁻¹ at the solution, with s² the residual variance.
    pub covariance: DMatrix<f64>,
    pub rss: f64,
    pub iterations: usize,
}

impl LeastSquares {
    pub fn stderr(&self, i: usize) -> f64 {
        self.covariance[(i, i)].max(0.0).sqrt()
    }

    pub fn rms(&self, n: usize) -> f64 {
        (self.rss / n as f64).sqrt()
    }
}

fn jacobian<F>(f: &F, p: &[f64], r0: &DVector<f64>) -> DMatrix<f64>
where
    F: Fn(&[f64], &mut [f64]),
{
    let (n, k) = (r0.len(), p.len());
    let mut j = DMatrix::zeros(n, k);
    let mut q = p.to_vec();
    let mut rp = vec![0.0; n];
    let mut rm = vec![0.0; n];
    for c in 0..k {
        let h = 1e-6 * p[c].abs().max(1e-6);
        q[c] = p[c] + h;
        f(&q, &mut rp);
        q[c] = p[c] - h;
        f(&q, &mut rm);
        q[c] = p[c];
        for i in 0..n {
            j[(i, c)] = (rp[i] - rm[i]) / (2.0 * h);
        }
    }
    j
}

/// Minimize Σ rᵢ(p)² starting from `p0`. `residuals(p, out)` fills `out`
/// with `n` residuals.
pub fn levenberg_marquardt<F>(residuals: F, p0: &[f64], n: usize) -> Result<LeastSquares>
where
    F: Fn(&[f64], &mut [f64]),
{
    let k = p0.len();
    if n < k {
        return Err(Error::Fit(format!("{n} data points cannot fix {k} parameters")));
    }
    let eval = |p: &[f64]| {
        let mut r = vec![0.0; n];
        residuals(p, &mut r);
        DVector::from_vec(r)
    };
    let mut p = p0.to_vec();
    let mut r = eval(&p);
    let mut rss = r.norm_squared();
    if !rss.is_finite() {
        return Err(Error::Fit("non-finite residuals at the starting point".into()));
    }
    let mut lambda = 1e-3;
    let mut iterations = 0;
    for it in 0..500 {
        iterations = it + 1;
        let j = jacobian(&residuals, &p, &r);
        let jtj = j.transpose() * &j;
        let g = j.transpose() * &r;
        let mut improved = false;
        while lambda < 1e16 {
            let mut a = jtj.clone();
            for d in 0..k {
                a[(d, d)] += lambda * jtj[(d, d)].max(1e-12);
            }
            let Some(step) = a.lu().solve(&(-&g)) else {
                lambda *= 10.0;
                continue;
            };
            let trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let rt = eval(&trial);
            let rss_t = rt.norm_squared();
            if rss_t.is_finite() && rss_t <= rss {
                let rel = (rss - rss_t) / rss.max(f64::MIN_POSITIVE);
                let small_step = step
                    .iter()
                    .zip(&p)
                    .all(|(s, v)| s.abs() <= 1e-12 * (v.abs() + 1e-12));
                p = trial;
                r = rt;
                rss = rss_t;
                lambda = (lambda * 0.3).max(1e-12);
                improved = true;
                if rel < 1e-15 || small_step || rss == 0.0 {
                    return finish(&residuals, p, r, rss, n, iterations);
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    finish(&residuals, p, r, rss, n, iterations)
}

fn finish<F>(f: &F, p: Vec<f64>, r: DVector<f64>, rss: f64, n: usize, iterations: usize) -> Result<LeastSquares>
where
    F: Fn(&[f64], &mut [f64]),
{
    let k = p.len();
    let j = jacobian(f, &p, &r);
    let dof = (n - k).max(1) as f64;
    let covariance = (j.transpose() * &j)
        .try_inverse()
        .map(|m| m * (rss / dof))
        .unwrap_or_else(|| DMatrix::from_element(k, k, f64::NAN));
    Ok(LeastSquares { params: p, covariance, rss, iterations })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LifetimeFit {
    pub lifetime_s: f64,
    pub amplitude: f64,
    pub lifetime_stderr_s: f64,
    pub amplitude_stderr: f64,
}

/// Least-squares fit of A·exp(-t/T) to `(t, amplitude)` samples.
pub fn fit_exponential_lifetime(samples: &[(f64, f64)]) -> Result<LifetimeFit> {
    if samples.len() < 3 {
        return Err(Error::Fit("at least 3 samples are required".into()));
    }
    if samples.iter().any(|(t, a)| !t.is_finite() || !a.is_finite() || *t < 0.0) {
        return Err(Error::Fit("times must be finite and non-negative".into()));
    }
    if samples.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::Fit("times must be strictly increasing".into()));
    }
    let pos: Vec<(f64, f64)> = samples.iter().copied().filter(|(_, a)| *a > 0.0).collect();
    if pos.len() < 3 {
        return Err(Error::Fit("data are not positive".into()));
    }
    // Log-linear regression for the starting point.
    let n = pos.len() as f64;
    let mt = pos.iter().map(|s| s.0).sum::<f64>() / n;
    let my = pos.iter().map(|s| s.1.ln()).sum::<f64>() / n;
    let sxy: f64 = pos.iter().map(|s| (s.0 - mt) * (s.1.ln() - my)).sum();
    let sxx: f64 = pos.iter().map(|s| (s.0 - mt).powi(2)).sum();
    let slope = sxy / sxx;
    let span = samples.last().unwrap().0 - samples[0].0;
    if !(slope < 0.0) || -slope * span < 1e-9 {
        return Err(Error::Fit("data do not decay".into()));
    }
    let a0 = (my - slope * mt).exp();
    let t0 = -1.0 / slope;
    let fit = levenberg_marquardt(
        |p, r| {
            for (ri, (t, a)) in r.iter_mut().zip(samples) {
                *ri = p[0] * (-t / p[1]).exp() - a;
            }
        },
        &[a0, t0],
        samples.len(),
    )?;
    let (amplitude, lifetime_s) = (fit.params[0], fit.params[1]);
    if !(lifetime_s > 0.0 && lifetime_s.is_finite()) {
        return Err(Error::Fit(format!("fitted lifetime {lifetime_s} is not positive")));
    }
    Ok(LifetimeFit {
        lifetime_s,
        amplitude,
        lifetime_stderr_s: fit.stderr(1),
        amplitude_stderr: fit.stderr(0),
    })
}

/// b + A·exp(-4 ln2 (x - x0)² / w²).
pub fn gaussian_on_background(x: f64, p: &[f64]) -> f64 {
    let z = (x - p[2]) / p[3];
    p[0] + p[1] * (-4.0 * std::f64::consts::LN_2 * z * z).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GaussianFit {
    pub background: f64,
    pub amplitude: f64,
    pub center: f64,
    pub fwhm: f64,
    /// Root-mean-square residual.
    pub rms: f64,
}

/// Fit a Gaussian peak on a flat background.
pub fn fit_gaussian_peak(x: &[f64], y: &[f64]) -> Result<GaussianFit> {
    if x.len() != y.len() || x.len() < 5 {
        return Err(Error::Fit("need at least 5 matching samples".into()));
    }
    let mut sorted = y.to_vec();
    sorted.sort_by(f64::total_cmp);
    let b0 = sorted[sorted.len() / 10];
    let (imax, ymax) = y
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if *v > acc.1 { (i, *v) } else { acc });
    let a0 = ymax - b0;
    let scale = sorted[sorted.len() - 1].abs().max(sorted[0].abs()).max(1e-300);
    if !(a0 > 1e-12 * scale) {
        return Err(Error::Fit("no peak above the background".into()));
    }
    let half = b0 + 0.5 * a0;
    let mut lo = imax;
    while lo > 0 && y[lo] > half {
        lo -= 1;
    }
    let mut hi = imax;
    while hi + 1 < y.len() && y[hi] > half {
        hi += 1;
    }
    let step = (x[x.len() - 1] - x[0]) / (x.len() - 1) as f64;
    let w0 = (x[hi] - x[lo]).max(2.0 * step.abs());
    let fit = levenberg_marquardt(
        |p, r| {
            for ((ri, xi), yi) in r.iter_mut().zip(x).zip(y) {
                *ri = gaussian_on_background(*xi, p) - yi;
            }
        },
        &[b0, a0, x[imax], w0],
        x.len(),
    )?;
    let p = &fit.params;
    Ok(GaussianFit {
        background: p[0],
        amplitude: p[1],
        center: p[2],
        fwhm: p[3].abs(),
        rms: fit.rms(x.len()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_decay_recovered() {
        let s: Vec<(f64, f64)> = (0..20).map(|i| (i as f64 * 30.0, 2.0 * (-(i as f64) * 30.0 / 188.0).exp())).collect();
        let f = fit_exponential_lifetime(&s).unwrap();
        assert!((f.lifetime_s - 188.0).abs() < 1e-6, "{f:?}");
        assert!((f.amplitude - 2.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_data_rejected() {
        let flat: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 1.0)).collect();
        assert!(fit_exponential_lifetime(&flat).is_err());
        let neg: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, -1.0)).collect();
        assert!(fit_exponential_lifetime(&neg).is_err());
        assert!(fit_exponential_lifetime(&[(0.0, 1.0), (1.0, 0.5)]).is_err());
        assert!(fit_exponential_lifetime(&[(0.0, 1.0), (0.0, 0.5), (1.0, 0.2)]).is_err());
    }

    #[test]
    fn stderr_scales_with_noise() {
        // Alternating ±1% perturbation: the fit still lands near the generator
        // and reports a non-zero standard error.
        let s: Vec<(f64, f64)> = (0..30)
            .map(|i| {
                let t = i as f64 * 10.0;
                let k = if i % 2 == 0 { 1.01 } else { 0.99 };
                (t, k * (-t / 60.0).exp())
            })
            .collect();
        let f = fit_exponential_lifetime(&s).unwrap();
        assert!((f.lifetime_s - 60.0).abs() < 2.0, "{f:?}");
        assert!(f.lifetime_stderr_s > 0.0 && f.lifetime_stderr_s < 2.0, "{f:?}");
    }

    #[test]
    fn gaussian_peak_recovered() {
        let x: Vec<f64> = (0..301).map(|i| -1.5 + i as f64 * 0.01).collect();
        let truth = [0.51, 18.0, 0.02, 0.38];
        let y: Vec<f64> = x.iter().map(|v| gaussian_on_background(*v, &truth)).collect();
        let f = fit_gaussian_peak(&x, &y).unwrap();
        assert!((f.background - 0.51).abs() < 1e-6);
        assert!((f.amplitude - 18.0).abs() < 1e-6);
        assert!((f.fwhm - 0.38).abs() < 1e-6);
        assert!((f.center - 0.02).abs() < 1e-6);
    }

    #[test]
    fn flat_data_has_no_peak() {
        let x: Vec<f64> = (0..50).map(|i| i as f64).collect();
        assert!(fit_gaussian_peak(&x, &vec![0.5; 50]).is_err());
    }

    #[test]
    fn lm_solves_linear_problem() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let fit = levenberg_marquardt(
            |p, r| {
                for (ri, x) in r.iter_mut().zip(&xs) {
                    *ri = p[0] + p[1] * x - (3.0 - 0.5 * x);
                }
            },
            &[0.0, 0.0],
            xs.len(),
        )
        .unwrap();
        assert!((fit.params[0] - 3.0).abs() < 1e-8 && (fit.params[1] + 0.5).abs() < 1e-8);
    }
}
