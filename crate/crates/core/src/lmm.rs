//! Random-intercept linear mixed-effects model fitted by restricted maximum
//! likelihood.
//!
//! ```text
//! y_ij = u_i + β0 + β1 x_ij1 + … + βp x_ijp + ε_ij,   u_i ~ N(0, σ_b²), ε_ij ~ N(0, σ²)
//! ```
//!
//! Fixed effects and σ² are profiled out, leaving a one-dimensional REML
//! criterion in γ = σ_b²/σ². Everything is computed from per-group sufficient
//! statistics, so a fit costs O(groups · p³) once the statistics are built.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::optim::{brent_minimize, brent_root};
use crate::stats::collinear_columns;
use crate::types::{MetricMatrix, Metrics};

pub const INTERCEPT: &str = "(Intercept)";

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct LmmFit {
    /// Predictor names, without the intercept.
    pub variables: Vec<String>,
    /// Intercept followed by one slope per variable.
    pub fixed_coefficients: Vec<f64>,
    pub fixed_se: Vec<f64>,
    pub sigma_b: f64,
    pub sigma: f64,
    pub group_blups: BTreeMap<String, f64>,
    pub reml_loglik: f64,
    /// Log-likelihood at the REML estimates.
    pub ml_loglik: f64,
    pub aic: f64,
    pub n_obs: usize,
    pub n_groups: usize,
}

impl LmmFit {
    pub fn coefficient_names(&self) -> Vec<String> {
        std::iter::once(INTERCEPT.to_string())
            .chain(self.variables.iter().cloned())
            .collect()
    }

    pub fn coefficient(&self, name: &str) -> Option<f64> {
        if name == INTERCEPT {
            return self.fixed_coefficients.first().copied();
        }
        let i = self.variables.iter().position(|v| v == name)?;
        Some(self.fixed_coefficients[i + 1])
    }

    /// Fixed-effect prediction from a row of predictor values ordered like
    /// `variables`.
    pub fn predict_fixed_row(&self, x: &[f64]) -> f64 {
        self.fixed_coefficients[0]
            + self.fixed_coefficients[1..]
                .iter()
                .zip(x)
                .map(|(b, v)| b * v)
                .sum::<f64>()
    }

    /// Fixed part plus the group's predicted intercept when the group was seen
    /// during fitting.
    pub fn predict(&self, metrics: &Metrics, group: Option<&str>) -> Result<f64> {
        let x: Vec<f64> = self
            .variables
            .iter()
            .map(|v| metrics.get(v).copied().ok_or_else(|| Error::MissingMetric(v.clone())))
            .collect::<Result<_>>()?;
        let blup = group.and_then(|g| self.group_blups.get(g)).copied().unwrap_or(0.0);
        Ok(self.predict_fixed_row(&x) + blup)
    }
}

/// Free function form of [`LmmFit::predict`].
pub fn predict(fit: &LmmFit, metrics: &Metrics, group: Option<&str>) -> Result<f64> {
    fit.predict(metrics, group)
}

#[derive(Debug, Clone)]
struct GroupStats {
    id: String,
    n: f64,
    s: DVector<f64>,
    ss: DMatrix<f64>,
    t: f64,
    xy: DVector<f64>,
    yy: f64,
}

/// Quantities of the GLS solution at a fixed variance ratio.
struct Gls {
    beta: DVector<f64>,
    a_chol: Cholesky<f64, nalgebra::Dyn>,
    rhr: f64,
    ln_det_h: f64,
    ln_det_a: f64,
}

/// Sufficient statistics of a random-intercept problem. Predictors and the
/// response are centred internally for conditioning.
#[derive(Debug, Clone)]
pub struct LmmProblem {
    variables: Vec<String>,
    x_means: Vec<f64>,
    y_mean: f64,
    groups: Vec<GroupStats>,
    /// Centred design row, response and group index of every observation.
    rows: Vec<(DVector<f64>, f64, usize)>,
    n: usize,
    /// Number of fixed effects including the intercept.
    p: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceIntervals {
    pub sigma_b: (f64, f64),
    pub sigma: (f64, f64),
}

impl LmmProblem {
    pub fn new(response: &[f64], design: &MetricMatrix, groups: &[String]) -> Result<Self> {
        let n = response.len();
        if design.nrows() != n || groups.len() != n {
            return Err(Error::LengthMismatch {
                observed: n,
                predicted: design.nrows().min(groups.len()),
            });
        }
        let k = design.ncols();
        let p = k + 1;
        if n < p + 1 {
            return Err(Error::Validation(format!(
                "mixed model with {p} fixed effects needs at least {} rows, got {n}",
                p + 1
            )));
        }
        if let Some(v) = response.iter().find(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite response value {v}")));
        }
        check_rank(design)?;

        let x_means: Vec<f64> = (0..k).map(|j| design.column(j).iter().sum::<f64>() / n as f64).collect();
        let y_mean = response.iter().sum::<f64>() / n as f64;
        let mut index: BTreeMap<&str, usize> = BTreeMap::new();
        let mut stats: Vec<GroupStats> = Vec::new();
        let mut rows = Vec::with_capacity(n);
        for (r, g) in groups.iter().enumerate() {
            let gi = *index.entry(g.as_str()).or_insert_with(|| {
                stats.push(GroupStats {
                    id: g.clone(),
                    n: 0.0,
                    s: DVector::zeros(p),
                    ss: DMatrix::zeros(p, p),
                    t: 0.0,
                    xy: DVector::zeros(p),
                    yy: 0.0,
                });
                stats.len() - 1
            });
            let mut x = DVector::zeros(p);
            x[0] = 1.0;
            for j in 0..k {
                x[j + 1] = design.get(r, j) - x_means[j];
            }
            let y = response[r] - y_mean;
            let st = &mut stats[gi];
            st.n += 1.0;
            st.s += &x;
            st.ss += &x * x.transpose();
            st.t += y;
            st.xy += &x * y;
            st.yy += y * y;
            rows.push((x, y, gi));
        }
        Ok(LmmProblem {
            variables: design.names().to_vec(),
            x_means,
            y_mean,
            groups: stats,
            rows,
            n,
            p,
        })
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    fn gls(&self, gamma: f64) -> Option<Gls> {
        let p = self.p;
        let mut a = DMatrix::zeros(p, p);
        let mut c = DVector::zeros(p);
        let mut yhy = 0.0;
        let mut ln_det_h = 0.0;
        for g in &self.groups {
            let w = gamma / (1.0 + g.n * gamma);
            a += &g.ss - &g.s * g.s.transpose() * w;
            c += &g.xy - &g.s * (w * g.t);
            yhy += g.yy - w * g.t * g.t;
            ln_det_h += (g.n * gamma).ln_1p();
        }
        let a_chol = Cholesky::new(a)?;
        let beta = a_chol.solve(&c);
        let rhr = (yhy - beta.dot(&c)).max(0.0);
        let ln_det_a = 2.0 * a_chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Some(Gls {
            beta,
            a_chol,
            rhr,
            ln_det_h,
            ln_det_a,
        })
    }

    fn dof(&self) -> f64 {
        (self.n - self.p) as f64
    }

    /// REML criterion with β and σ² profiled out.
    pub fn profiled_reml(&self, gamma: f64) -> f64 {
        match self.gls(gamma) {
            Some(s) => self.profiled_reml_from(&s),
            None => f64::NEG_INFINITY,
        }
    }

    fn profiled_reml_from(&self, s: &Gls) -> f64 {
        let m = self.dof();
        let sigma2 = s.rhr / m;
        -0.5 * (m * (sigma2.ln() + 1.0 + LN_2PI) + s.ln_det_h + s.ln_det_a)
    }

    /// Derivative of [`Self::profiled_reml`] with respect to γ.
    pub fn profiled_reml_derivative(&self, gamma: f64) -> f64 {
        let Some(s) = self.gls(gamma) else {
            return f64::NAN;
        };
        let sigma2 = s.rhr / self.dof();
        let mut trace = 0.0;
        let mut quad = 0.0;
        for g in &self.groups {
            let d = 1.0 + g.n * gamma;
            let ainv_s = s.a_chol.solve(&g.s);
            trace += g.n / d - g.s.dot(&ainv_s) / (d * d);
            let r = (g.t - g.s.dot(&s.beta)) / d;
            quad += r * r;
        }
        -0.5 * (trace - quad / sigma2)
    }

    /// Unprofiled REML log-likelihood at (σ_b², σ²).
    pub fn reml_loglik(&self, sigma_b2: f64, sigma2: f64) -> f64 {
        let gamma = sigma_b2 / sigma2;
        let Some(s) = self.gls(gamma) else {
            return f64::NEG_INFINITY;
        };
        let m = self.dof();
        -0.5 * (m * (sigma2.ln() + LN_2PI) + s.ln_det_h + s.ln_det_a + s.rhr / sigma2)
    }

    /// REML estimate of the variance ratio γ.
    fn optimize_ratio(&self) -> Result<f64> {
        if self.groups.len() < 2 {
            return Ok(0.0);
        }
        let mut candidates = Vec::new();
        if self.profiled_reml_derivative(0.0) <= 0.0 {
            candidates.push(0.0);
        }
        // Log-spaced scan for interior maxima (derivative + → −).
        let grid: Vec<f64> = (0..=72).map(|k| 10f64.powf(-10.0 + 0.25 * k as f64)).collect();
        let derivs: Vec<f64> = grid.iter().map(|&g| self.profiled_reml_derivative(g)).collect();
        for i in 0..grid.len() - 1 {
            if derivs[i] > 0.0 && derivs[i + 1] <= 0.0 {
                let root = brent_root(
                    |lg| self.profiled_reml_derivative(lg.exp()),
                    grid[i].ln(),
                    grid[i + 1].ln(),
                    1e-14,
                    200,
                )
                .map(f64::exp)
                .unwrap_or(grid[i]);
                candidates.push(root);
            }
        }
        if candidates.is_empty() {
            if derivs.last().is_some_and(|d| *d > 0.0) {
                return Err(Error::NotConverged(
                    "REML variance ratio diverges (residual variance collapses to zero)".into(),
                ));
            }
            candidates.push(0.0);
        }
        Ok(candidates
            .into_iter()
            .map(|g| (g, self.profiled_reml(g)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(g, _)| g)
            .unwrap_or(0.0))
    }

    pub fn fit(&self) -> Result<LmmFit> {
        let gamma = self.optimize_ratio()?;
        let s = self
            .gls(gamma)
            .ok_or_else(|| Error::RankDeficient { columns: self.variables.clone() })?;
        let m = self.dof();
        let sigma2 = s.rhr / m;
        let sigma_b2 = gamma * sigma2;
        let reml_loglik = self.profiled_reml_from(&s);
        let n = self.n as f64;
        let ml_loglik = if sigma2 > 0.0 {
            -0.5 * (n * (LN_2PI + sigma2.ln()) + s.ln_det_h + s.rhr / sigma2)
        } else {
            f64::INFINITY
        };
        let k_params = self.p + 1 + usize::from(self.groups.len() >= 2);
        let aic = -2.0 * ml_loglik + 2.0 * k_params as f64;

        // Back-transform from centred coordinates.
        let mut coef: Vec<f64> = s.beta.iter().copied().collect();
        coef[0] += self.y_mean - (1..self.p).map(|j| coef[j] * self.x_means[j - 1]).sum::<f64>();
        let cov_c = s.a_chol.inverse() * sigma2;
        let mut t = DMatrix::<f64>::identity(self.p, self.p);
        for j in 1..self.p {
            t[(0, j)] = -self.x_means[j - 1];
        }
        let cov = &t * cov_c * t.transpose();
        let fixed_se = (0..self.p).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();

        let group_blups = self
            .groups
            .iter()
            .map(|g| {
                let w = gamma / (1.0 + g.n * gamma);
                (g.id.clone(), w * (g.t - g.s.dot(&s.beta)))
            })
            .collect();

        Ok(LmmFit {
            variables: self.variables.clone(),
            fixed_coefficients: coef,
            fixed_se,
            sigma_b: sigma_b2.max(0.0).sqrt(),
            sigma: sigma2.sqrt(),
            group_blups,
            reml_loglik,
            ml_loglik,
            aic,
            n_obs: self.n,
            n_groups: self.groups.len(),
        })
    }

    /// Leave-one-out predictions (fixed part plus group prediction) with the
    /// variance ratio held at its full-data REML estimate. Each fold removes
    /// one row from its group's statistics and re-solves the GLS equations.
    pub fn loo_predictions_fixed_ratio(&self) -> Result<Vec<f64>> {
        let gamma = self.optimize_ratio()?;
        let p = self.p;
        let mut a = DMatrix::zeros(p, p);
        let mut c = DVector::zeros(p);
        for g in &self.groups {
            let w = gamma / (1.0 + g.n * gamma);
            a += &g.ss - &g.s * g.s.transpose() * w;
            c += &g.xy - &g.s * (w * g.t);
        }
        self.rows
            .iter()
            .map(|(x, y, gi)| {
                let g = &self.groups[*gi];
                let w = gamma / (1.0 + g.n * gamma);
                let n1 = g.n - 1.0;
                let w1 = gamma / (1.0 + n1 * gamma);
                let s1 = &g.s - x;
                let t1 = g.t - y;
                let a1 = &a - (&g.ss - &g.s * g.s.transpose() * w) + (&g.ss - x * x.transpose() - &s1 * s1.transpose() * w1);
                let c1 = &c - (&g.xy - &g.s * (w * g.t)) + (&g.xy - x * *y - &s1 * (w1 * t1));
                let beta = a1
                    .cholesky()
                    .ok_or_else(|| Error::RankDeficient { columns: self.variables.clone() })?
                    .solve(&c1);
                let blup = if n1 > 0.0 { w1 * (t1 - s1.dot(&beta)) } else { 0.0 };
                Ok(x.dot(&beta) + blup + self.y_mean)
            })
            .collect()
    }

    /// Observed responses in input order.
    pub fn responses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.1 + self.y_mean).collect()
    }

    /// Profile-likelihood confidence intervals for σ_b and σ on the REML
    /// criterion at the given confidence level.
    pub fn profile_intervals(&self, fit: &LmmFit, level: f64) -> VarianceIntervals {
        let crit = ChiSquared::new(1.0).map(|d| d.inverse_cdf(level)).unwrap_or(3.841_458_820_694_124);
        let threshold = fit.reml_loglik - 0.5 * crit;

        let profile_sb = |sb: f64| -> f64 {
            let (ls, v) = brent_minimize(
                |ls2| -self.reml_loglik(sb * sb, ls2.exp()),
                (fit.sigma * fit.sigma).ln() - 6.0,
                (fit.sigma * fit.sigma).ln() + 6.0,
                1e-10,
                200,
            );
            let _ = ls;
            -v
        };
        let profile_s = |s: f64| -> f64 {
            let upper = (fit.sigma_b.max(fit.sigma) * 20.0).max(1e-6);
            let (_, v) = brent_minimize(|sb| -self.reml_loglik(sb * sb, s * s), 0.0, upper, 1e-10, 200);
            let at_zero = self.reml_loglik(0.0, s * s);
            (-v).max(at_zero)
        };

        let sigma_b = if self.groups.len() < 2 {
            (0.0, 0.0)
        } else {
            interval(&profile_sb, fit.sigma_b, threshold, true)
        };
        let sigma = interval(&profile_s, fit.sigma, threshold, false);
        VarianceIntervals { sigma_b, sigma }
    }
}

/// Endpoints where a profile crosses `threshold` around its maximizer `est`.
fn interval(profile: &dyn Fn(f64) -> f64, est: f64, threshold: f64, zero_allowed: bool) -> (f64, f64) {
    let g = |v: f64| profile(v) - threshold;
    let lower = if zero_allowed && g(0.0) >= 0.0 {
        0.0
    } else {
        let lo = if zero_allowed { 0.0 } else { est * 1e-6 };
        brent_root(g, lo, est, 1e-12 * est.max(1e-12), 300).unwrap_or(lo)
    };
    let mut hi = est.max(1e-8) * 1.5;
    let mut tries = 0;
    while g(hi) > 0.0 && tries < 60 {
        hi *= 1.5;
        tries += 1;
    }
    let upper = brent_root(g, est, hi, 1e-12 * est.max(1e-12), 300).unwrap_or(hi);
    (lower, upper)
}

fn check_rank(design: &MetricMatrix) -> Result<()> {
    let bad = collinear_columns(design);
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::RankDeficient { columns: bad })
    }
}

/// Fit a random-intercept model by REML.
pub fn fit_reml(response: &[f64], design: &MetricMatrix, groups: &[String]) -> Result<LmmFit> {
    LmmProblem::new(response, design, groups)?.fit()
}
