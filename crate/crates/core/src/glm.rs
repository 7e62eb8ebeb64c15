//! Joint model linking tree DBHs directly to plot metrics.
//!
//! For plot j, ln c_j = x_cj'β_c + u_cj and ln b_j = x_sj'β_s + u_sj, with
//! independent plot intercepts u ~ N(0, σ²) per parameter. The fit maximizes
//!
//! ```text
//! P(β; σ) = Σ_j max_u [ Σ_k ln f(x_jk | c_j, b_j) − ½ Σ_l (u_lj / σ_l)² ]
//! ```
//!
//! over β with Newton steps on the exact profiled information, and chooses σ
//! by maximizing the Laplace approximation of the marginal likelihood with β
//! re-optimized at each σ. A disabled random effect has σ = 0 and u ≡ 0.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::optim::brent_minimize;
use crate::par::{self, Execution};
use crate::ppm::PredictedParams;
use crate::types::PlotRecord;
use crate::weibull::{self, LogLikDerivs, WeibullParams, MAX_SHAPE, MIN_TREES, TRUNCATION_CM};

pub const LINK: &str = "log";

/// Index of the shape and scale components in per-plot pairs.
const SHAPE: usize = 0;
const SCALE: usize = 1;

/// σ below this is treated as the zero boundary.
const SIGMA_FLOOR: f64 = 1e-6;
const SIGMA_CEILING: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlmOptions {
    pub random_shape: bool,
    pub random_scale: bool,
    /// Newton iterations per fixed-effect solve.
    pub max_iter: usize,
    /// Absolute tolerance on σ in the outer search.
    pub sigma_tol: f64,
    pub intervals: bool,
}

impl Default for GlmOptions {
    fn default() -> Self {
        GlmOptions {
            random_shape: true,
            random_scale: true,
            max_iter: 200,
            sigma_tol: 1e-5,
            intervals: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlmModel {
    pub shape_vars: Vec<String>,
    pub scale_vars: Vec<String>,
    /// Intercept first, on the log-link scale.
    pub shape_coefficients: Vec<f64>,
    pub scale_coefficients: Vec<f64>,
    pub shape_se: Vec<f64>,
    pub scale_se: Vec<f64>,
    pub sigma_b_shape: f64,
    pub sigma_b_scale: f64,
    /// Approximate 95% intervals (Wald on ln σ); `None` at the zero boundary.
    pub sigma_ci_shape: Option<(f64, f64)>,
    pub sigma_ci_scale: Option<(f64, f64)>,
    pub penalized_loglik: f64,
    pub laplace_loglik: f64,
    pub n_plots: usize,
    pub n_trees: usize,
    pub plots_excluded: usize,
    /// Conditional modes of the plot intercepts, `[shape, scale]`.
    pub plot_effects: BTreeMap<String, [f64; 2]>,
    pub options: GlmOptions,
}

impl GlmModel {
    pub fn predict_params(&self, plot: &PlotRecord) -> Result<PredictedParams> {
        let xc = plot.metric_vector(&self.shape_vars)?;
        let xs = plot.metric_vector(&self.scale_vars)?;
        let eta_c = linear(&self.shape_coefficients, &xc);
        let eta_s = linear(&self.scale_coefficients, &xs);
        Ok(params_from_linear(eta_c, eta_s))
    }

    pub fn predict_distribution(&self, plot: &PlotRecord, total_stems: f64) -> Result<crate::histogram::DbhHistogram> {
        weibull::to_histogram(&self.predict_params(plot)?.params, total_stems)
    }
}

pub fn predict_params(model: &GlmModel, plot: &PlotRecord) -> Result<PredictedParams> {
    model.predict_params(plot)
}

fn linear(beta: &[f64], x: &[f64]) -> f64 {
    beta[0] + beta[1..].iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
}

/// Map linear predictors through the log link, clamping into the valid region.
pub fn params_from_linear(eta_shape: f64, eta_scale: f64) -> PredictedParams {
    let raw_shape = eta_shape.exp();
    let raw_scale = eta_scale.exp();
    let shape = if raw_shape.is_finite() {
        raw_shape.clamp(crate::ppm::MIN_SHAPE, MAX_SHAPE)
    } else if eta_shape > 0.0 {
        MAX_SHAPE
    } else {
        crate::ppm::MIN_SHAPE
    };
    let min_scale = TRUNCATION_CM + crate::ppm::SCALE_MARGIN_CM;
    let scale = if raw_scale > TRUNCATION_CM {
        raw_scale.min(1e6)
    } else {
        min_scale
    };
    PredictedParams {
        params: WeibullParams {
            shape,
            scale,
            truncation: TRUNCATION_CM,
        },
        raw_shape,
        raw_scale,
        clamped: shape != raw_shape || scale != raw_scale,
    }
}

#[derive(Debug, Clone)]
struct GlmPlot {
    id: String,
    ln_x: Vec<f64>,
    /// Design rows with a leading 1.
    xc: Vec<f64>,
    xs: Vec<f64>,
}

/// Model data in the form used by the objective.
#[derive(Debug, Clone)]
pub struct GlmData {
    plots: Vec<GlmPlot>,
    kc: usize,
    ks: usize,
    ln_t: f64,
    excluded: usize,
}

impl GlmData {
    /// Plots with fewer than [`MIN_TREES`] trees are left out.
    pub fn new(plots: &[PlotRecord], shape_vars: &[String], scale_vars: &[String]) -> Result<Self> {
        let mut out = Vec::new();
        let mut excluded = 0;
        for p in plots {
            if p.trees.len() < MIN_TREES {
                excluded += 1;
                continue;
            }
            let mut xc = vec![1.0];
            xc.extend(p.metric_vector(shape_vars)?);
            let mut xs = vec![1.0];
            xs.extend(p.metric_vector(scale_vars)?);
            out.push(GlmPlot {
                id: p.plot_id.clone(),
                ln_x: p.trees.iter().map(|t| t.dbh.ln()).collect(),
                xc,
                xs,
            });
        }
        if out.is_empty() {
            return Err(Error::Validation(format!(
                "no plot has at least {MIN_TREES} trees for the joint model"
            )));
        }
        Ok(GlmData {
            plots: out,
            kc: shape_vars.len() + 1,
            ks: scale_vars.len() + 1,
            ln_t: TRUNCATION_CM.ln(),
            excluded,
        })
    }

    pub fn n_params(&self) -> usize {
        self.kc + self.ks
    }

    pub fn n_plots(&self) -> usize {
        self.plots.len()
    }

    fn eta(&self, j: usize, theta: &[f64]) -> [f64; 2] {
        let p = &self.plots[j];
        let ec = p.xc.iter().zip(&theta[..self.kc]).map(|(x, b)| x * b).sum();
        let es = p.xs.iter().zip(&theta[self.kc..]).map(|(x, b)| x * b).sum();
        [ec, es]
    }

    fn derivs(&self, j: usize, a: f64, s: f64) -> LogLikDerivs {
        weibull::log_lik_derivs_logs(&self.plots[j].ln_x, self.ln_t, a, s)
    }

    /// Unprofiled objective in (θ, u) and its gradient, u laid out as
    /// `[u_c0, u_s0, u_c1, u_s1, …]`. Components with σ = 0 contribute no
    /// penalty and are expected to be zero.
    pub fn joint_objective(&self, theta: &[f64], u: &[f64], sigma: [f64; 2]) -> (f64, Vec<f64>) {
        let mut value = 0.0;
        let mut grad = vec![0.0; self.n_params() + u.len()];
        for j in 0..self.plots.len() {
            let eta = self.eta(j, theta);
            let uj = [u[2 * j], u[2 * j + 1]];
            let d = self.derivs(j, eta[0] + uj[0], eta[1] + uj[1]);
            value += d.value;
            let p = &self.plots[j];
            for (i, x) in p.xc.iter().enumerate() {
                grad[i] += d.grad[SHAPE] * x;
            }
            for (i, x) in p.xs.iter().enumerate() {
                grad[self.kc + i] += d.grad[SCALE] * x;
            }
            for l in 0..2 {
                let mut g = d.grad[l];
                if sigma[l] > 0.0 {
                    value -= 0.5 * (uj[l] / sigma[l]).powi(2);
                    g -= uj[l] / (sigma[l] * sigma[l]);
                }
                grad[self.n_params() + 2 * j + l] = g;
            }
        }
        (value, grad)
    }
}

/// Inner solution for one plot at fixed θ and σ.
#[derive(Debug, Clone, Copy)]
struct PlotMode {
    u: [f64; 2],
    /// Penalized plot objective at the mode.
    value: f64,
    grad: [f64; 2],
    /// Negative Hessian of the log-likelihood at the mode.
    info: [[f64; 2]; 2],
}

fn precisions(sigma: [f64; 2]) -> [Option<f64>; 2] {
    sigma.map(|s| (s >= SIGMA_FLOOR).then(|| 1.0 / (s * s)))
}

fn penalized(d: &LogLikDerivs, u: [f64; 2], prec: [Option<f64>; 2]) -> f64 {
    d.value
        - (0..2)
            .filter_map(|l| prec[l].map(|p| 0.5 * p * u[l] * u[l]))
            .sum::<f64>()
}

/// Solve a symmetric 2×2 (or 1×1 on the enabled set) system `a δ = g` for a
/// positive-definite `a`, shifting the diagonal when it is not.
fn solve_pd(a: [[f64; 2]; 2], g: [f64; 2], enabled: [bool; 2]) -> [f64; 2] {
    match enabled {
        [true, true] => {
            let tr = a[0][0] + a[1][1];
            let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
            let disc = ((a[0][0] - a[1][1]).powi(2) / 4.0 + a[0][1] * a[0][1]).sqrt();
            let min_eig = tr / 2.0 - disc;
            let shift = if min_eig > 1e-10 * tr.abs().max(1.0) && det > 0.0 {
                0.0
            } else {
                -min_eig + 1e-3 * tr.abs().max(1.0)
            };
            let (p, q, r) = (a[0][0] + shift, a[0][1], a[1][1] + shift);
            let det = p * r - q * q;
            [(r * g[0] - q * g[1]) / det, (p * g[1] - q * g[0]) / det]
        }
        [true, false] => [g[0] / pos(a[0][0]), 0.0],
        [false, true] => [0.0, g[1] / pos(a[1][1])],
        [false, false] => [0.0, 0.0],
    }
}

fn pos(v: f64) -> f64 {
    if v > 1e-10 {
        v
    } else {
        v.abs() + 1.0
    }
}

impl GlmData {
    fn plot_mode(&self, j: usize, eta: [f64; 2], prec: [Option<f64>; 2], start: [f64; 2]) -> PlotMode {
        let enabled = prec.map(|p| p.is_some());
        let n = self.plots[j].ln_x.len() as f64;
        let mut u = [
            if enabled[0] { start[0] } else { 0.0 },
            if enabled[1] { start[1] } else { 0.0 },
        ];
        let mut d = self.derivs(j, eta[0] + u[0], eta[1] + u[1]);
        let mut val = penalized(&d, u, prec);
        if !val.is_finite() && u != [0.0, 0.0] {
            u = [0.0, 0.0];
            d = self.derivs(j, eta[0], eta[1]);
            val = penalized(&d, u, prec);
        }
        if enabled != [false, false] {
            for _ in 0..100 {
                let g = [
                    prec[0].map_or(0.0, |p| d.grad[0] - p * u[0]),
                    prec[1].map_or(0.0, |p| d.grad[1] - p * u[1]),
                ];
                if g[0].abs().max(g[1].abs()) < 1e-11 * (1.0 + n) {
                    break;
                }
                let a = [
                    [-d.hess[0][0] + prec[0].unwrap_or(0.0), -d.hess[0][1]],
                    [-d.hess[1][0], -d.hess[1][1] + prec[1].unwrap_or(0.0)],
                ];
                let step = solve_pd(a, g, enabled);
                let mut alpha = 1.0;
                let mut moved = false;
                for _ in 0..60 {
                    let cand = [u[0] + alpha * step[0], u[1] + alpha * step[1]];
                    let dc = self.derivs(j, eta[0] + cand[0], eta[1] + cand[1]);
                    let vc = penalized(&dc, cand, prec);
                    if vc.is_finite() && vc >= val {
                        moved = vc > val || cand != u;
                        u = cand;
                        d = dc;
                        val = vc;
                        break;
                    }
                    alpha *= 0.5;
                }
                if !moved {
                    break;
                }
            }
        }
        PlotMode {
            u,
            value: val,
            grad: d.grad,
            info: [[-d.hess[0][0], -d.hess[0][1]], [-d.hess[1][0], -d.hess[1][1]]],
        }
    }

    fn modes(&self, theta: &[f64], sigma: [f64; 2], start: &[[f64; 2]]) -> Vec<PlotMode> {
        let prec = precisions(sigma);
        (0..self.plots.len())
            .map(|j| self.plot_mode(j, self.eta(j, theta), prec, start[j]))
            .collect()
    }

    /// Profiled penalized log-likelihood P(θ; σ).
    pub fn profiled_objective(&self, theta: &[f64], sigma: [f64; 2]) -> f64 {
        let zero = vec![[0.0; 2]; self.plots.len()];
        self.modes(theta, sigma, &zero).iter().map(|m| m.value).sum()
    }

    /// Gradient of P(θ; σ): at the inner optimum only the direct term survives.
    pub fn profiled_gradient(&self, theta: &[f64], sigma: [f64; 2]) -> Vec<f64> {
        let zero = vec![[0.0; 2]; self.plots.len()];
        self.gradient_from(&self.modes(theta, sigma, &zero))
    }

    fn gradient_from(&self, modes: &[PlotMode]) -> Vec<f64> {
        let mut g = vec![0.0; self.n_params()];
        for (p, m) in self.plots.iter().zip(modes) {
            for (i, x) in p.xc.iter().enumerate() {
                g[i] += m.grad[SHAPE] * x;
            }
            for (i, x) in p.xs.iter().enumerate() {
                g[self.kc + i] += m.grad[SCALE] * x;
            }
        }
        g
    }

    /// Negative Hessian of P(θ; σ). Per plot the curvature in η is
    /// N − N_{·E}(N_EE + D_EE)⁻¹N_{E·} for enabled effects E.
    fn information_from(&self, modes: &[PlotMode], sigma: [f64; 2]) -> DMatrix<f64> {
        let k = self.n_params();
        let prec = precisions(sigma);
        let mut info = DMatrix::zeros(k, k);
        for (p, m) in self.plots.iter().zip(modes) {
            let c = profiled_curvature(m.info, prec);
            let mut rows: Vec<(usize, f64, usize)> = Vec::with_capacity(k);
            for (i, x) in p.xc.iter().enumerate() {
                rows.push((i, *x, SHAPE));
            }
            for (i, x) in p.xs.iter().enumerate() {
                rows.push((self.kc + i, *x, SCALE));
            }
            for &(r, xr, lr) in &rows {
                for &(q, xq, lq) in &rows {
                    info[(r, q)] += xr * c[lr][lq] * xq;
                }
            }
        }
        info
    }

    /// Laplace approximation of the marginal log-likelihood from plot modes.
    fn laplace_from(&self, modes: &[PlotMode], sigma: [f64; 2]) -> f64 {
        let prec = precisions(sigma);
        modes
            .iter()
            .map(|m| {
                let ld = match prec {
                    [Some(pc), Some(ps)] => {
                        let a = (m.info[0][0] + pc) * (m.info[1][1] + ps) - m.info[0][1] * m.info[1][0];
                        (a / (pc * ps)).ln()
                    }
                    [Some(pc), None] => ((m.info[0][0] + pc) / pc).ln(),
                    [None, Some(ps)] => ((m.info[1][1] + ps) / ps).ln(),
                    [None, None] => 0.0,
                };
                m.value - 0.5 * ld
            })
            .sum()
    }
}

fn profiled_curvature(n: [[f64; 2]; 2], prec: [Option<f64>; 2]) -> [[f64; 2]; 2] {
    match prec {
        [None, None] => n,
        [Some(pc), Some(ps)] => {
            // (N⁻¹ + Σ)⁻¹ written as N − N(N + D)⁻¹N to avoid inverting N.
            let a = [[n[0][0] + pc, n[0][1]], [n[1][0], n[1][1] + ps]];
            let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
            let inv = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];
            let mut out = n;
            for r in 0..2 {
                for q in 0..2 {
                    let mut s = 0.0;
                    for x in 0..2 {
                        for y in 0..2 {
                            s += n[r][x] * inv[x][y] * n[y][q];
                        }
                    }
                    out[r][q] -= s;
                }
            }
            out
        }
        [Some(p), None] | [None, Some(p)] => {
            let e = if prec[0].is_some() { 0 } else { 1 };
            let denom = n[e][e] + p;
            let mut out = n;
            for r in 0..2 {
                for q in 0..2 {
                    out[r][q] -= n[r][e] * n[e][q] / denom;
                }
            }
            out
        }
    }
}

/// Result of maximizing P(θ; σ) over θ at fixed σ.
#[derive(Debug, Clone)]
pub struct FixedSigmaFit {
    pub theta: Vec<f64>,
    pub value: f64,
    pub laplace: f64,
    pub iterations: usize,
    pub converged: bool,
    /// P after each accepted step, starting at the initial point.
    pub history: Vec<f64>,
    modes: Vec<PlotMode>,
    info: DMatrix<f64>,
}

impl GlmData {
    /// Newton iterations on θ with a backtracking line search.
    pub fn fit_fixed_sigma(&self, theta0: &[f64], sigma: [f64; 2], max_iter: usize) -> Result<FixedSigmaFit> {
        let zero = vec![[0.0; 2]; self.plots.len()];
        self.fit_fixed_sigma_from(theta0, sigma, max_iter, &zero)
    }

    fn fit_fixed_sigma_from(
        &self,
        theta0: &[f64],
        sigma: [f64; 2],
        max_iter: usize,
        u0: &[[f64; 2]],
    ) -> Result<FixedSigmaFit> {
        let mut theta = theta0.to_vec();
        let mut modes = self.modes(&theta, sigma, u0);
        let mut value: f64 = modes.iter().map(|m| m.value).sum();
        if !value.is_finite() {
            return Err(Error::NotConverged("joint model objective is not finite at the start".into()));
        }
        let mut history = vec![value];
        let mut converged = false;
        let mut iterations = 0;
        let scale = 1.0 + self.plots.iter().map(|p| p.ln_x.len()).sum::<usize>() as f64;
        while iterations < max_iter {
            let g = DVector::from_vec(self.gradient_from(&modes));
            let info = self.information_from(&modes, sigma);
            let step = newton_direction(&info, &g);
            let decrement = g.dot(&step);
            if decrement.abs() < 1e-12 * scale {
                converged = true;
                break;
            }
            iterations += 1;
            let starts: Vec<[f64; 2]> = modes.iter().map(|m| m.u).collect();
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..50 {
                let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + alpha * s).collect();
                let cm = self.modes(&cand, sigma, &starts);
                let cv: f64 = cm.iter().map(|m| m.value).sum();
                if cv.is_finite() && cv >= value + 1e-4 * alpha * decrement.min(0.0) && cv >= value {
                    accepted = Some((cand, cm, cv));
                    break;
                }
                alpha *= 0.5;
            }
            let Some((cand, cm, cv)) = accepted else {
                // No ascent along the Newton direction: at the optimum to
                // working precision.
                converged = decrement.abs() < 1e-6 * scale;
                break;
            };
            let gain = cv - value;
            theta = cand;
            modes = cm;
            value = cv;
            history.push(value);
            if theta.iter().any(|t| !t.is_finite() || t.abs() > 1e4) {
                return Err(Error::NotConverged(
                    "joint model coefficients diverge (likelihood unbounded)".into(),
                ));
            }
            if gain.abs() < 1e-13 * scale && alpha == 1.0 {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NotConverged(format!(
                "joint model fixed effects did not converge in {max_iter} iterations"
            )));
        }
        let info = self.information_from(&modes, sigma);
        let laplace = self.laplace_from(&modes, sigma);
        Ok(FixedSigmaFit {
            theta,
            value,
            laplace,
            iterations,
            converged,
            history,
            modes,
            info,
        })
    }
}

fn newton_direction(info: &DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    let k = info.nrows();
    let diag_scale = (0..k).map(|i| info[(i, i)].abs()).fold(0.0, f64::max).max(1e-12);
    let mut lambda = 0.0;
    for _ in 0..40 {
        let mut m = info.clone();
        for i in 0..k {
            m[(i, i)] += lambda * diag_scale;
        }
        if let Some(ch) = m.cholesky() {
            return ch.solve(g);
        }
        lambda = if lambda == 0.0 { 1e-8 } else { lambda * 10.0 };
    }
    g / diag_scale
}

/// Pooled starting values: one Weibull fit to all trees, slopes zero.
fn pooled_start(data: &GlmData) -> Result<Vec<f64>> {
    let x: Vec<f64> = data.plots.iter().flat_map(|p| p.ln_x.iter().map(|l| l.exp())).collect();
    let fit = weibull::fit_ml_values(&x, TRUNCATION_CM)?;
    let mut theta = vec![0.0; data.n_params()];
    theta[0] = fit.params.shape.ln();
    theta[data.kc] = fit.params.scale.ln();
    Ok(theta)
}

/// State carried through the outer variance search.
struct Outer<'a> {
    data: &'a GlmData,
    theta: Vec<f64>,
    u: Vec<[f64; 2]>,
    max_iter: usize,
    failure: Option<Error>,
}

impl Outer<'_> {
    fn laplace_at(&mut self, sigma: [f64; 2]) -> f64 {
        match self.data.fit_fixed_sigma_from(&self.theta, sigma, self.max_iter, &self.u) {
            Ok(f) => {
                self.theta = f.theta.clone();
                self.u = f.modes.iter().map(|m| m.u).collect();
                f.laplace
            }
            Err(e) => {
                self.failure.get_or_insert(e);
                f64::NEG_INFINITY
            }
        }
    }
}

/// Maximize the Laplace marginal one σ at a time until the σ vector settles.
/// The first cold cycle searches [0, SIGMA_CEILING]; warm starts and later
/// cycles search a bracket around the current value that widens whenever the
/// optimum lands on its edge. The boundary σ = 0 is compared explicitly
/// whenever a bracket reaches it.
fn search_sigma(outer: &mut Outer, start: [f64; 2], enabled: [bool; 2], tol: f64, warm: bool) -> [f64; 2] {
    let mut sigma = [
        if enabled[0] { start[0] } else { 0.0 },
        if enabled[1] { start[1] } else { 0.0 },
    ];
    if warm {
        if let Some(s) = newton_sigma(outer, sigma, enabled, tol) {
            return s;
        }
    }
    let mut last_change = [f64::INFINITY; 2];
    for cycle in 0..20 {
        let before = sigma;
        for l in 0..2 {
            if !enabled[l] {
                continue;
            }
            let half = if cycle == 0 {
                0.05 * sigma[l] + 0.005
            } else {
                (4.0 * last_change[l]).clamp(2.0 * tol, 0.05 * sigma[l] + 0.005)
            };
            let (mut lo, mut hi) = if cycle == 0 && !warm {
                (0.0, SIGMA_CEILING)
            } else {
                ((sigma[l] - half).max(0.0), (sigma[l] + half).min(SIGMA_CEILING))
            };
            loop {
                // Relative tolerance giving roughly tol/4 in absolute terms.
                let x_tol = 0.25 * tol / sigma[l].max(0.01);
                let (s, v) = brent_minimize(
                    |s| {
                        let mut trial = sigma;
                        trial[l] = s;
                        -outer.laplace_at(trial)
                    },
                    lo,
                    hi,
                    x_tol.clamp(1e-8, 1e-2),
                    100,
                );
                let mut best = (s, v);
                if lo == 0.0 {
                    let mut zero = sigma;
                    zero[l] = 0.0;
                    let v0 = -outer.laplace_at(zero);
                    if v0 <= best.1 {
                        best = (0.0, v0);
                    }
                }
                let width = hi - lo;
                let at_upper = hi < SIGMA_CEILING && best.0 > hi - 0.05 * width;
                let at_lower = lo > 0.0 && best.0 < lo + 0.05 * width;
                sigma[l] = best.0;
                if at_upper {
                    lo = best.0 - 0.1 * width;
                    hi = (best.0 + 2.0 * width).min(SIGMA_CEILING);
                } else if at_lower {
                    hi = best.0 + 0.1 * width;
                    lo = (best.0 - 2.0 * width).max(0.0);
                } else {
                    break;
                }
            }
            last_change[l] = (sigma[l] - before[l]).abs();
        }
        if (0..2).all(|l| (sigma[l] - before[l]).abs() < tol) {
            break;
        }
        if cycle == 0 {
            if let Some(s) = newton_sigma(outer, sigma, enabled, tol) {
                sigma = s;
                break;
            }
        }
    }
    sigma.map(|s| if s < SIGMA_FLOOR { 0.0 } else { s })
}

/// Newton iterations on the Laplace profile with finite-difference
/// derivatives, for starts already near an interior optimum. Returns `None`
/// when the curvature is not negative definite or a step leaves σ > 0, so
/// the caller can fall back to the bracketing search.
fn newton_sigma(outer: &mut Outer, start: [f64; 2], enabled: [bool; 2], tol: f64) -> Option<[f64; 2]> {
    let idx: Vec<usize> = (0..2).filter(|&l| enabled[l]).collect();
    let k = idx.len();
    let h = 1e-3;
    let mut sigma = start;
    if idx.iter().any(|&l| sigma[l] < 10.0 * h) {
        return None;
    }
    let mut f0 = outer.laplace_at(sigma);
    for _ in 0..6 {
        let shifted = |s: [f64; 2], a: usize, da: f64, b: Option<(usize, f64)>| {
            let mut t = s;
            t[a] += da;
            if let Some((b, db)) = b {
                t[b] += db;
            }
            t
        };
        let mut g = DVector::zeros(k);
        let mut hess = DMatrix::zeros(k, k);
        let mut plus = vec![0.0; k];
        for (i, &l) in idx.iter().enumerate() {
            let fp = outer.laplace_at(shifted(sigma, l, h, None));
            let fm = outer.laplace_at(shifted(sigma, l, -h, None));
            g[i] = (fp - fm) / (2.0 * h);
            hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h * h);
            plus[i] = fp;
        }
        if k == 2 {
            let fpp = outer.laplace_at(shifted(sigma, idx[0], h, Some((idx[1], h))));
            let cross = (fpp - plus[0] - plus[1] + f0) / (h * h);
            hess[(0, 1)] = cross;
            hess[(1, 0)] = cross;
        }
        let neg = -hess;
        let step = neg.cholesky()?.solve(&g);
        let mut next = sigma;
        for (i, &l) in idx.iter().enumerate() {
            next[l] += step[i];
            if next[l] <= 0.0 {
                return None;
            }
        }
        let f1 = outer.laplace_at(next);
        if !(f1 >= f0 - 1e-9 * f0.abs()) {
            return None;
        }
        sigma = next;
        f0 = f1;
        if step.amax() < tol {
            return Some(sigma);
        }
    }
    None
}

/// Wald interval on ln σ_l from a finite-difference second derivative of the
/// Laplace profile.
fn sigma_interval(outer: &mut Outer, sigma: [f64; 2], l: usize) -> Option<(f64, f64)> {
    if sigma[l] < 1e-3 {
        return None;
    }
    let h = 0.05;
    let at = |outer: &mut Outer, ls: f64| {
        let mut s = sigma;
        s[l] = ls.exp();
        outer.laplace_at(s)
    };
    let c = sigma[l].ln();
    let f0 = at(outer, c);
    let fp = at(outer, c + h);
    let fm = at(outer, c - h);
    let curv = (fp - 2.0 * f0 + fm) / (h * h);
    (curv < 0.0).then(|| {
        let se = (-1.0 / curv).sqrt();
        (sigma[l] * (-1.959_963_984_540_054 * se).exp(), sigma[l] * (1.959_963_984_540_054 * se).exp())
    })
}

/// Fit the joint model.
pub fn train(plots: &[PlotRecord], scale_vars: &[String], shape_vars: &[String]) -> Result<GlmModel> {
    train_with(plots, scale_vars, shape_vars, &GlmOptions::default(), None)
}

/// Fit with explicit options, optionally warm-started from a previous model
/// on similar data.
pub fn train_with(
    plots: &[PlotRecord],
    scale_vars: &[String],
    shape_vars: &[String],
    options: &GlmOptions,
    warm: Option<&GlmModel>,
) -> Result<GlmModel> {
    let data = GlmData::new(plots, shape_vars, scale_vars)?;
    let enabled = [options.random_shape, options.random_scale];
    let (theta0, sigma0, u0) = match warm {
        Some(m) if m.shape_vars == shape_vars && m.scale_vars == scale_vars => {
            let mut t = m.shape_coefficients.clone();
            t.extend(&m.scale_coefficients);
            let u = data
                .plots
                .iter()
                .map(|p| m.plot_effects.get(&p.id).copied().unwrap_or([0.0; 2]))
                .collect();
            (t, [m.sigma_b_shape, m.sigma_b_scale], u)
        }
        _ => (pooled_start(&data)?, [0.3, 0.3], vec![[0.0; 2]; data.plots.len()]),
    };
    let mut outer = Outer {
        data: &data,
        theta: theta0,
        u: u0,
        max_iter: options.max_iter,
        failure: None,
    };
    let sigma = if enabled == [false, false] {
        [0.0, 0.0]
    } else {
        search_sigma(&mut outer, sigma0, enabled, options.sigma_tol, warm.is_some())
    };
    let fit = data
        .fit_fixed_sigma_from(&outer.theta, sigma, options.max_iter, &outer.u)
        .map_err(|e| outer.failure.take().unwrap_or(e))?;
    let cov = fit
        .info
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::NotConverged("joint model information matrix is singular".into()))?;
    let se: Vec<f64> = (0..data.n_params()).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
    let (ci_c, ci_s) = if options.intervals {
        outer.theta = fit.theta.clone();
        (sigma_interval(&mut outer, sigma, SHAPE), sigma_interval(&mut outer, sigma, SCALE))
    } else {
        (None, None)
    };
    let kc = data.kc;
    Ok(GlmModel {
        shape_vars: shape_vars.to_vec(),
        scale_vars: scale_vars.to_vec(),
        shape_coefficients: fit.theta[..kc].to_vec(),
        scale_coefficients: fit.theta[kc..].to_vec(),
        shape_se: se[..kc].to_vec(),
        scale_se: se[kc..].to_vec(),
        sigma_b_shape: sigma[SHAPE],
        sigma_b_scale: sigma[SCALE],
        sigma_ci_shape: ci_c,
        sigma_ci_scale: ci_s,
        penalized_loglik: fit.value,
        laplace_loglik: fit.laplace,
        n_plots: data.plots.len(),
        n_trees: data.plots.iter().map(|p| p.ln_x.len()).sum(),
        plots_excluded: data.excluded,
        plot_effects: data
            .plots
            .iter()
            .zip(&fit.modes)
            .map(|(p, m)| (p.id.clone(), m.u))
            .collect(),
        options: *options,
    })
}

/// Leave-one-out parameter predictions, each fold warm-started from the
/// full-data fit.
pub fn loo_predict_params(
    plots: &[PlotRecord],
    scale_vars: &[String],
    shape_vars: &[String],
    options: &GlmOptions,
    exec: Execution,
) -> Result<Vec<PredictedParams>> {
    let fold_opts = GlmOptions {
        intervals: false,
        ..*options
    };
    let full = train_with(plots, scale_vars, shape_vars, &fold_opts, None)?;
    par::try_map_range(exec, plots.len(), |i| {
        let rest: Vec<PlotRecord> = plots
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, p)| p.clone())
            .collect();
        train_with(&rest, scale_vars, shape_vars, &fold_opts, Some(&full))?.predict_params(&plots[i])
    })
}
