//! Left-truncated two-parameter Weibull distribution: density, CDF, sampling,
//! per-plot maximum-likelihood fitting and conversion to DBH histograms.
//!
//! With shape c, scale b and truncation point T the density is
//!
//! ```text
//! f(x) = (c/b) (x/b)^(c-1) exp(-[(x/b)^c - (T/b)^c])   for x >= T, 0 otherwise
//! ```
//!
//! Fitting works on (ln c, ln b) so positivity needs no constraints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::histogram::{class_midpoint, DbhHistogram, NUM_CLASSES, OVERFLOW_FROM_CM};
use crate::optim::{self, Options};
use crate::types::{TreeRecord, DBH_THRESHOLD_CM};

pub const TRUNCATION_CM: f64 = DBH_THRESHOLD_CM;

/// Minimum number of trees for a per-plot fit.
pub const MIN_TREES: usize = 5;

/// Shape values beyond this are treated as a diverging fit.
pub const MAX_SHAPE: f64 = 500.0;

/// A converged fit must have a log-parameter gradient ∞-norm below this
/// times the number of observations.
pub const GRADIENT_ACCEPT_PER_OBS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeibullParams {
    pub shape: f64,
    pub scale: f64,
    pub truncation: f64,
}

impl WeibullParams {
    /// Parameters with the standard 5 cm truncation point.
    pub fn new(shape: f64, scale: f64) -> Result<Self> {
        Self::with_truncation(shape, scale, TRUNCATION_CM)
    }

    pub fn with_truncation(shape: f64, scale: f64, truncation: f64) -> Result<Self> {
        if !(shape > 0.0 && shape.is_finite()) || !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Validation(format!(
                "Weibull parameters must be positive and finite (shape {shape}, scale {scale})"
            )));
        }
        if !(truncation >= 0.0 && truncation.is_finite()) {
            return Err(Error::Validation(format!("invalid truncation point {truncation}")));
        }
        Ok(WeibullParams {
            shape,
            scale,
            truncation,
        })
    }

    /// Whether the scale exceeds the truncation point, the validity condition
    /// for a plot-level distribution.
    pub fn is_valid_fit(&self) -> bool {
        self.scale > self.truncation
    }

    fn z_t(&self) -> f64 {
        (self.truncation / self.scale).powf(self.shape)
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        if x < self.truncation {
            return f64::NEG_INFINITY;
        }
        let (c, b) = (self.shape, self.scale);
        let lx = (x / b).ln();
        c.ln() - b.ln() + (c - 1.0) * lx - ((c * lx).exp() - self.z_t())
    }

    pub fn pdf(&self, x: f64) -> f64 {
        if x < self.truncation {
            0.0
        } else {
            self.ln_pdf(x).exp()
        }
    }

    /// Truncated survival function P(X > x).
    pub fn survival(&self, x: f64) -> f64 {
        if x <= self.truncation {
            return 1.0;
        }
        (-((x / self.scale).powf(self.shape) - self.z_t())).exp()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x < self.truncation {
            return 0.0;
        }
        -(-((x / self.scale).powf(self.shape) - self.z_t())).exp_m1()
    }

    /// Inverse of the truncated CDF for `u` in [0, 1).
    pub fn quantile(&self, u: f64) -> f64 {
        let e = -(-u).ln_1p();
        self.scale * (self.z_t() + e).powf(1.0 / self.shape)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitMethod {
    QuasiNewton,
    NelderMead,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitDiagnostics {
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    /// ∞-norm of the log-likelihood gradient in (ln c, ln b).
    pub gradient_norm: f64,
    pub method: FitMethod,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeibullFit {
    pub params: WeibullParams,
    pub diagnostics: FitDiagnostics,
}

/// Log-likelihood of `x` plus its gradient and Hessian with respect to
/// (ln c, ln b). Terms involving T use the same truncation for all values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLikDerivs {
    pub value: f64,
    pub grad: [f64; 2],
    pub hess: [[f64; 2]; 2],
}

/// Summed log-density and its derivatives in (ln c, ln b).
pub fn log_lik_derivs(x: &[f64], truncation: f64, ln_shape: f64, ln_scale: f64) -> LogLikDerivs {
    let ln_x: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    log_lik_derivs_logs(&ln_x, truncation.ln(), ln_shape, ln_scale)
}

/// [`log_lik_derivs`] on precomputed logarithms of the values and of T.
pub fn log_lik_derivs_logs(ln_x: &[f64], ln_truncation: f64, ln_shape: f64, ln_scale: f64) -> LogLikDerivs {
    let c = ln_shape.exp();
    let n = ln_x.len() as f64;
    let lt = ln_truncation - ln_scale;
    let zt = (c * lt).exp();
    let mut value = 0.0;
    let (mut sum_cl, mut sum_z, mut sum_zl, mut sum_zll) = (0.0, 0.0, 0.0, 0.0);
    for &lnx in ln_x {
        let l = lnx - ln_scale;
        let z = (c * l).exp();
        value += c * l - lnx - z;
        sum_cl += l;
        sum_z += z;
        sum_zl += z * l;
        sum_zll += z * l * l;
    }
    value += n * (ln_shape + zt);
    let ga = n + c * sum_cl - c * sum_zl + n * c * lt * zt;
    let gs = c * (-n + sum_z - n * zt);
    let haa = c * sum_cl - c * sum_zl - c * c * sum_zll + n * (c * lt * zt + c * c * lt * lt * zt);
    let has = c * (-n + sum_z - n * zt) + c * c * (sum_zl - n * lt * zt);
    let hss = -c * c * (sum_z - n * zt);
    LogLikDerivs {
        value,
        grad: [ga, gs],
        hess: [[haa, has], [has, hss]],
    }
}

/// Plot log-likelihood Σ ln f(x_k | c, b).
pub fn log_likelihood(x: &[f64], params: &WeibullParams) -> f64 {
    x.iter().map(|&v| params.ln_pdf(v)).sum()
}

fn moment_start(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0).max(1.0);
    let cv = var.sqrt() / m;
    let c = if cv > 0.0 { cv.powf(-1.086).clamp(0.3, 50.0) } else { 50.0 };
    let b = m / gamma(1.0 + 1.0 / c);
    (c, b)
}

/// Maximum-likelihood fit of a plot's tree list with T = 5 cm.
pub fn fit_ml(trees: &[TreeRecord]) -> Result<WeibullFit> {
    let x: Vec<f64> = trees.iter().map(|t| t.dbh).collect();
    fit_ml_values(&x, TRUNCATION_CM)
}

/// Maximum-likelihood fit of arbitrary values truncated at `truncation`.
///
/// Fails when there are fewer than [`MIN_TREES`] values, when the optimizer
/// does not converge, when the shape diverges, or when the fitted scale does
/// not exceed the truncation point.
pub fn fit_ml_values(x: &[f64], truncation: f64) -> Result<WeibullFit> {
    if x.len() < MIN_TREES {
        return Err(Error::Validation(format!(
            "Weibull fit needs at least {MIN_TREES} trees, got {}",
            x.len()
        )));
    }
    if let Some(v) = x.iter().find(|&&v| !(v >= truncation) || !v.is_finite()) {
        return Err(Error::Validation(format!(
            "value {v} lies below the truncation point {truncation}"
        )));
    }
    let n = x.len() as f64;
    let ln_x: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ln_t = truncation.ln();
    let derivs = |a: f64, s: f64| log_lik_derivs_logs(&ln_x, ln_t, a, s);
    let (c0, b0) = moment_start(x);
    let start = [c0.ln(), b0.ln()];
    let objective = |p: &[f64]| -> Option<(f64, Vec<f64>)> {
        if p[0] > MAX_SHAPE.ln() + 1.0 {
            return None;
        }
        let d = derivs(p[0], p[1]);
        d.value
            .is_finite()
            .then(|| (-d.value, vec![-d.grad[0], -d.grad[1]]))
    };

    let opts = Options::default();
    let bfgs = optim::bfgs(objective, &start, None, opts);
    let (mut p, mut iterations, method) = match bfgs {
        Some(m) if m.converged || m.grad_norm() < GRADIENT_ACCEPT_PER_OBS * n => {
            (m.x, m.iterations, FitMethod::QuasiNewton)
        }
        other => {
            let from = other.map(|m| m.x).unwrap_or_else(|| start.to_vec());
            let (xm, _, it, _) = optim::nelder_mead(
                |p| {
                    if p[0] > MAX_SHAPE.ln() + 1.0 {
                        return f64::INFINITY;
                    }
                    -derivs(p[0], p[1]).value
                },
                &from,
                0.2,
                4000,
                1e-15,
            );
            (xm, it, FitMethod::NelderMead)
        }
    };

    // Newton polishing with the analytic Hessian.
    for _ in 0..8 {
        let d = derivs(p[0], p[1]);
        let [[a, bb], [_, cc]] = d.hess;
        let det = a * cc - bb * bb;
        if !(a < 0.0 && det > 0.0) {
            break;
        }
        let step = [
            -(cc * d.grad[0] - bb * d.grad[1]) / det,
            -(-bb * d.grad[0] + a * d.grad[1]) / det,
        ];
        let cand = [p[0] + step[0], p[1] + step[1]];
        let dn = derivs(cand[0], cand[1]);
        if !(dn.value.is_finite() && dn.value >= d.value - 1e-12 * d.value.abs()) {
            break;
        }
        p = cand.to_vec();
        iterations += 1;
        if dn.grad[0].abs().max(dn.grad[1].abs()) < 1e-10 * n {
            break;
        }
    }

    let d = derivs(p[0], p[1]);
    let gradient_norm = d.grad[0].abs().max(d.grad[1].abs());
    let shape = p[0].exp();
    let scale = p[1].exp();
    let converged = d.value.is_finite() && gradient_norm < GRADIENT_ACCEPT_PER_OBS * n && shape <= MAX_SHAPE;
    let diagnostics = FitDiagnostics {
        log_likelihood: d.value,
        iterations,
        converged,
        gradient_norm,
        method,
    };
    if !(shape <= MAX_SHAPE) {
        return Err(Error::WeibullFit {
            reason: format!("shape diverging (c = {shape:.3e})"),
            diagnostics,
        });
    }
    if !converged {
        return Err(Error::WeibullFit {
            reason: format!("no convergence, gradient norm {gradient_norm:.3e}"),
            diagnostics,
        });
    }
    let params = WeibullParams::with_truncation(shape, scale, truncation).map_err(|_| Error::WeibullFit {
        reason: "non-finite parameters".into(),
        diagnostics,
    })?;
    if !params.is_valid_fit() {
        return Err(Error::WeibullFit {
            reason: format!("scale {scale:.4} does not exceed truncation point {truncation}"),
            diagnostics,
        });
    }
    Ok(WeibullFit { params, diagnostics })
}

/// Expected stems per DBH class for a distribution carrying `total_stems`.
pub fn to_histogram(params: &WeibullParams, total_stems: f64) -> Result<DbhHistogram> {
    if !(total_stems >= 0.0) || !total_stems.is_finite() {
        return Err(Error::Validation(format!("invalid stem total {total_stems}")));
    }
    WeibullParams::with_truncation(params.shape, params.scale, params.truncation)?;
    let mut h = DbhHistogram::zeros();
    if total_stems == 0.0 {
        return Ok(h);
    }
    for (i, count) in h.counts.iter_mut().enumerate().take(NUM_CLASSES) {
        let m = class_midpoint(i);
        *count = total_stems * (params.survival(m - 1.0) - params.survival(m + 1.0));
    }
    h.overflow = total_stems * params.survival(OVERFLOW_FROM_CM);
    Ok(h)
}

/// `n` i.i.d. draws by inverse-CDF sampling, deterministic per seed.
pub fn sample(params: &WeibullParams, n: usize, seed: u64) -> Result<Vec<f64>> {
    WeibullParams::with_truncation(params.shape, params.scale, params.truncation)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_with(params, n, &mut rng))
}

pub fn sample_with<R: Rng + ?Sized>(params: &WeibullParams, n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| params.quantile(rng.random::<f64>())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(c: f64, b: f64) -> WeibullParams {
        WeibullParams::new(c, b).unwrap()
    }

    /// Adaptive Simpson quadrature, kept independent of the closed-form CDF.
    fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
            let (flm, frm) = (f(lm), f(rm));
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                left + right + (left + right - whole) / 15.0
            } else {
                rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
            }
        }
        let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        rec(f, a, b, fa, fm, fb, whole, tol, 50)
    }

    #[test]
    fn pdf_below_truncation_is_zero() {
        assert_eq!(p(2.0, 15.0).pdf(4.9), 0.0);
        assert_eq!(p(0.7, 8.0).cdf(4.9), 0.0);
    }

    #[test]
    fn pdf_at_truncation_exponential_case() {
        assert!((p(1.0, 10.0).pdf(5.0) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn pdf_integrates_to_one() {
        for (c, b) in [(0.8, 8.0), (2.0, 15.0), (4.0, 30.0)] {
            let w = p(c, b);
            let upper = b * ((1e16f64).ln() + (5.0 / b).powf(c)).powf(1.0 / c);
            let total = integrate(&|x| w.pdf(x), 5.0, upper, 1e-12);
            assert!((total - 1.0).abs() < 1e-8, "c={c} b={b}: {total}");
        }
    }

    #[test]
    fn cdf_examples() {
        let w = p(1.0, 10.0);
        assert_eq!(w.cdf(5.0), 0.0);
        let quad = integrate(&|x| w.pdf(x), 5.0, 15.0, 1e-13);
        assert!((quad - 0.6321205588285577).abs() < 1e-10);
        assert!((w.cdf(15.0) - (1.0 - (-1.0f64).exp())).abs() < 1e-14);
        let w = p(2.0, 15.0);
        let x = 15.0 * ((1e12f64).ln() + (5.0f64 / 15.0).powi(2)).sqrt();
        assert!((1.0 - w.cdf(x)).abs() < 1e-12);
    }

    #[test]
    fn cdf_is_antiderivative_of_pdf() {
        let h = 1e-5;
        for (c, b) in [(0.8, 8.0), (2.0, 15.0), (4.0, 30.0), (1.3, 6.0)] {
            let w = p(c, b);
            for x in [5.5, 8.0, 12.0, 20.0, 35.0] {
                let lhs = w.cdf(x + h) - w.cdf(x) - w.pdf(x) * h;
                assert!(lhs.abs() < 1e-8, "c={c} b={b} x={x}: {lhs}");
                let central = (w.cdf(x + h) - w.cdf(x - h)) / (2.0 * h);
                assert!((central - w.pdf(x)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn quantile_inverts_cdf() {
        let w = p(1.7, 12.0);
        for u in [0.0, 0.1, 0.5, 0.9, 0.999] {
            assert!((w.cdf(w.quantile(u)) - u).abs() < 1e-12);
        }
        assert_eq!(w.quantile(0.0), 5.0);
    }

    #[test]
    fn recovery_at_ten_thousand_draws() {
        let truth = p(2.0, 15.0);
        let x = sample(&truth, 10_000, 42).unwrap();
        let fit = fit_ml_values(&x, 5.0).unwrap();
        assert!((fit.params.shape / 2.0 - 1.0).abs() < 0.02, "{:?}", fit.params);
        assert!((fit.params.scale / 15.0 - 1.0).abs() < 0.02, "{:?}", fit.params);
        assert!(fit.diagnostics.converged);
    }

    #[test]
    fn fit_beats_grid() {
        for seed in 0..5u64 {
            let x = sample(&p(1.5 + 0.5 * seed as f64, 10.0 + 3.0 * seed as f64), 40, seed).unwrap();
            let fit = fit_ml_values(&x, 5.0).unwrap();
            let best = fit.diagnostics.log_likelihood;
            for i in 0..200 {
                let c = 0.2 + (10.0 - 0.2) * i as f64 / 199.0;
                for j in 0..200 {
                    let b = 5.01 + (100.0 - 5.01) * j as f64 / 199.0;
                    let ll = log_likelihood(&x, &p(c, b));
                    assert!(best >= ll - 1e-4, "seed {seed}: grid ({c},{b}) {ll} > {best}");
                }
            }
        }
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        let x = sample(&p(2.3, 14.0), 25, 7).unwrap();
        for (a, s) in [(0.5, 2.5), (1.0, 2.8), (-0.3, 2.0)] {
            let d = log_lik_derivs(&x, 5.0, a, s);
            let direct = log_likelihood(&x, &p(a.exp(), s.exp()));
            assert!((d.value - direct).abs() < 1e-9 * direct.abs().max(1.0));
            let h = 1e-6;
            let fa = |aa: f64, ss: f64| log_lik_derivs(&x, 5.0, aa, ss);
            let ga = (fa(a + h, s).value - fa(a - h, s).value) / (2.0 * h);
            let gs = (fa(a, s + h).value - fa(a, s - h).value) / (2.0 * h);
            assert!((ga - d.grad[0]).abs() < 1e-6 * ga.abs().max(1.0));
            assert!((gs - d.grad[1]).abs() < 1e-6 * gs.abs().max(1.0));
            let haa = (fa(a + h, s).grad[0] - fa(a - h, s).grad[0]) / (2.0 * h);
            let has = (fa(a, s + h).grad[0] - fa(a, s - h).grad[0]) / (2.0 * h);
            let hss = (fa(a, s + h).grad[1] - fa(a, s - h).grad[1]) / (2.0 * h);
            assert!((haa - d.hess[0][0]).abs() < 1e-5 * haa.abs().max(1.0));
            assert!((has - d.hess[0][1]).abs() < 1e-5 * has.abs().max(1.0));
            assert!((hss - d.hess[1][1]).abs() < 1e-5 * hss.abs().max(1.0));
        }
    }

    #[test]
    fn identical_dbhs_surface_failure() {
        let r = fit_ml_values(&[12.0; 20], 5.0);
        assert!(matches!(r, Err(Error::WeibullFit { .. })), "{r:?}");
    }

    #[test]
    fn too_few_trees() {
        assert!(matches!(fit_ml_values(&[6.0, 7.0, 8.0, 9.0], 5.0), Err(Error::Validation(_))));
    }

    #[test]
    fn scale_consistency() {
        let x = sample(&p(2.2, 16.0), 300, 3).unwrap();
        let a = fit_ml_values(&x, 5.0).unwrap().params;
        let x2: Vec<f64> = x.iter().map(|v| v * 2.0).collect();
        let b = fit_ml_values(&x2, 10.0).unwrap().params;
        assert!((b.scale / (2.0 * a.scale) - 1.0).abs() < 1e-6);
        assert!((b.shape / a.shape - 1.0).abs() < 1e-6);
    }

    #[test]
    fn histogram_examples() {
        let h = to_histogram(&p(1.0, 10.0), 0.0).unwrap();
        assert_eq!(h.total(), 0.0);
        let h = to_histogram(&p(1.0, 10.0), 100.0).unwrap();
        assert!((h.counts[0] - 100.0 * (1.0 - (-0.2f64).exp())).abs() < 1e-10);
        assert!((h.counts[0] - 18.126924692201818).abs() < 1e-9);
        for (c, b) in [(0.5, 5.5), (2.0, 15.0), (6.0, 45.0)] {
            let h = to_histogram(&p(c, b), 737.0).unwrap();
            assert!((h.total() - 737.0).abs() < 1e-9);
            assert!(h.bins().all(|v| v >= 0.0));
        }
    }

    #[test]
    fn sampling_basics() {
        let w = p(2.0, 15.0);
        assert!(sample(&w, 0, 1).unwrap().is_empty());
        let a = sample(&w, 1000, 9).unwrap();
        assert!(a.iter().all(|&v| v >= 5.0));
        assert_eq!(a, sample(&w, 1000, 9).unwrap());
    }

    #[test]
    fn ks_statistic_small() {
        let w = p(2.0, 15.0);
        let mut x = sample(&w, 100_000, 11).unwrap();
        x.sort_by(f64::total_cmp);
        let n = x.len() as f64;
        let d = x.iter().enumerate().fold(0.0f64, |m, (i, &v)| {
            let f = w.cdf(v);
            m.max((f - i as f64 / n).abs()).max(((i + 1) as f64 / n - f).abs())
        });
        assert!(d < 0.006, "KS {d}");
    }
}
