//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary so the report is printed under `cargo test`.
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 2 7`.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use dbhdist::estimation::{self, ClassificationLayers, EstimateReport};
use dbhdist::glm::{self, GlmData, GlmOptions};
use dbhdist::histogram::{DbhClass, DbhHistogram};
use dbhdist::knn::{self, MsnProjection};
use dbhdist::lmm;
use dbhdist::par::Execution;
use dbhdist::pipeline::{self, Method, MethodSettings, ModelingRules};
use dbhdist::synth::{self, SynthConfig, SynthData};
use dbhdist::types::{MetricMatrix, PlotRecord, Species, TreeRecord};
use dbhdist::varsel::{self, SaConfig};
use dbhdist::weibull::{self, WeibullParams, TRUNCATION_CM};
use dbhdist::{io, Result};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

/// Collects sub-checks of one criterion; the criterion passes when all do.
#[derive(Default)]
struct Checks {
    failed: Vec<String>,
    notes: Vec<String>,
}

impl Checks {
    fn check(&mut self, ok: bool, what: impl Into<String>) {
        let what = what.into();
        if !ok {
            self.failed.push(what.clone());
        }
        self.notes.push(format!("{}{what}", if ok { "" } else { "FAILED " }));
    }

    fn within_time(&mut self, started: Instant, limit: Duration) {
        let t = started.elapsed();
        self.check(t < limit, format!("runtime {:.1}s < {}s", t.as_secs_f64(), limit.as_secs()));
    }

    fn finish(self) -> Outcome {
        Outcome::new(self.failed.is_empty(), self.notes.join("; "))
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

// ---------------------------------------------------------------------------
// 1. Truncated Weibull

/// Independent density of the Weibull truncated below at T.
fn oracle_pdf(x: f64, c: f64, b: f64) -> f64 {
    if x < TRUNCATION_CM {
        return 0.0;
    }
    let z = x / b;
    let zt = TRUNCATION_CM / b;
    c / b * z.powf(c - 1.0) * (zt.powf(c) - z.powf(c)).exp()
}

fn oracle_loglik(x: &[f64], c: f64, b: f64) -> f64 {
    x.iter().map(|&v| oracle_pdf(v, c, b).ln()).sum()
}

/// Inverse-cdf draw from the truncated Weibull.
fn oracle_draw(rng: &mut ChaCha8Rng, c: f64, b: f64) -> f64 {
    let u: f64 = rng.random();
    b * ((TRUNCATION_CM / b).powf(c) - (1.0 - u).ln()).powf(1.0 / c)
}

fn simpson_step<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    // Pre-split so narrow peaks are not missed by the first coarse estimate.
    let pieces = 256;
    let h = (b - a) / pieces as f64;
    (0..pieces)
        .map(|i| {
            let (lo, hi) = (a + i as f64 * h, a + (i + 1) as f64 * h);
            let (fa, fm, fb) = (f(lo), f(0.5 * (lo + hi)), f(hi));
            let whole = (hi - lo) / 6.0 * (fa + 4.0 * fm + fb);
            simpson_step(f, lo, hi, fa, fm, fb, whole, tol / pieces as f64, 40)
        })
        .sum()
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut checks = Checks::default();
    let mut rng = ChaCha8Rng::seed_from_u64(101);

    let mut worst_mass: f64 = 0.0;
    let mut worst_fd: f64 = 0.0;
    for _ in 0..50 {
        let c = rng.random_range(0.6..8.0);
        let b = rng.random_range(6.0..60.0);
        let p = WeibullParams::new(c, b).unwrap();
        // Beyond `upper` the truncated survival is below e^-40.
        let upper = b * ((TRUNCATION_CM / b).powf(c) + 40.0).powf(1.0 / c);
        let mass = adaptive_simpson(&|x| p.pdf(x), TRUNCATION_CM, upper, 1e-12);
        worst_mass = worst_mass.max((mass - 1.0).abs());
        for k in 0..20 {
            let x = TRUNCATION_CM + 0.01 + (upper - TRUNCATION_CM) * 0.3 * k as f64 / 19.0;
            let h = 1e-5;
            let fd = (p.cdf(x + h) - p.cdf(x - h)) / (2.0 * h);
            worst_fd = worst_fd.max((fd - p.pdf(x)).abs());
        }
    }
    checks.check(worst_mass <= 1e-8, format!("max |∫pdf − 1| = {worst_mass:.1e}"));
    checks.check(worst_fd <= 1e-6, format!("max |ΔF/Δx − pdf| = {worst_fd:.1e}"));

    let shapes: Vec<f64> = (0..200).map(|i| (0.2f64.ln() + (10.0f64 / 0.2).ln() * i as f64 / 199.0).exp()).collect();
    let scales: Vec<f64> = (0..200).map(|i| 5.05 + (100.0 - 5.05) * i as f64 / 199.0).collect();
    let mut beaten = 0;
    let mut fit_errors = 0;
    for _ in 0..20 {
        let c = rng.random_range(1.2..5.0);
        let b = rng.random_range(10.0..40.0);
        let n = rng.random_range(30..200);
        let x: Vec<f64> = (0..n).map(|_| oracle_draw(&mut rng, c, b)).collect();
        let grid_best = shapes
            .iter()
            .flat_map(|&gc| scales.iter().map(move |&gb| (gc, gb)))
            .map(|(gc, gb)| oracle_loglik(&x, gc, gb))
            .fold(f64::NEG_INFINITY, f64::max);
        match weibull::fit_ml_values(&x, TRUNCATION_CM) {
            Ok(fit) => {
                if oracle_loglik(&x, fit.params.shape, fit.params.scale) >= grid_best {
                    beaten += 1;
                }
            }
            Err(_) => fit_errors += 1,
        }
    }
    checks.check(beaten == 20, format!("fit ≥ 200×200 grid on {beaten}/20 plots ({fit_errors} fit errors)"));

    let mut worst_rec: f64 = 0.0;
    for (c, b) in [(2.5, 18.0), (1.4, 26.0), (4.0, 30.0)] {
        let x: Vec<f64> = (0..10_000).map(|_| oracle_draw(&mut rng, c, b)).collect();
        match weibull::fit_ml_values(&x, TRUNCATION_CM) {
            Ok(fit) => {
                worst_rec = worst_rec
                    .max((fit.params.shape / c - 1.0).abs())
                    .max((fit.params.scale / b - 1.0).abs());
            }
            Err(_) => worst_rec = f64::INFINITY,
        }
    }
    checks.check(worst_rec <= 0.02, format!("recovery error at n=1e4 {:.2}%", 100.0 * worst_rec));
    checks.within_time(started, Duration::from_secs(30));
    checks.finish()
}

// ---------------------------------------------------------------------------
// 2. MSN distance and CCA

fn forest_plots(n_plots: usize, seed: u64) -> Vec<PlotRecord> {
    let config = SynthConfig {
        n_plots,
        seed,
        ..Default::default()
    };
    synth::generate(&config, Execution::Parallel)
        .unwrap()
        .plots
        .into_iter()
        .filter(|p| p.is_forest && !p.trees.is_empty())
        .collect()
}

/// Column-standardized copy (sample sd) of a metric matrix.
fn standardized(m: &MetricMatrix) -> DMatrix<f64> {
    let x = m.to_dmatrix();
    let n = x.nrows() as f64;
    let mut z = x.clone();
    for j in 0..x.ncols() {
        let col = x.column(j);
        let mean = col.sum() / n;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        for i in 0..x.nrows() {
            z[(i, j)] = (x[(i, j)] - mean) / sd;
        }
    }
    z
}

fn inv_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| 1.0 / v.sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// Canonical coefficients (p × r) and correlations from the SVD of the
/// whitened cross-correlation matrix.
fn whitened_svd_cca(x: &MetricMatrix, y: &MetricMatrix) -> (DMatrix<f64>, Vec<f64>) {
    let (zx, zy) = (standardized(x), standardized(y));
    let d = zx.nrows() as f64 - 1.0;
    let rxx = zx.transpose() * &zx / d;
    let ryy = zy.transpose() * &zy / d;
    let rxy = zx.transpose() * &zy / d;
    let wx = inv_sqrt(&rxx);
    let k = &wx * rxy * inv_sqrt(&ryy);
    let svd = k.svd(true, false);
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let u = svd.u.unwrap();
    let u = DMatrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
    (wx * u, order.iter().map(|&i| svd.singular_values[i]).collect())
}

fn matrix_distance(proj: &MsnProjection, xu: &[f64], xj: &[f64]) -> f64 {
    let p = xu.len();
    let s_inv = DMatrix::from_diagonal(&DVector::from_fn(p, |i, _| 1.0 / proj.predictor_sds[i]));
    let l2 = DMatrix::from_diagonal(&DVector::from_vec(proj.lambda2.clone()));
    let w = &s_inv * &proj.gamma * l2 * proj.gamma.transpose() * &s_inv;
    let d = DVector::from_fn(p, |i, _| xu[i] - xj[i]);
    (d.transpose() * w * d)[(0, 0)]
}

fn criterion_2() -> Outcome {
    let started = Instant::now();
    let mut checks = Checks::default();
    let plots = forest_plots(900, 21);
    let vars = MethodSettings::default().knn_vars;
    let x = MetricMatrix::from_plots(&plots, &vars).unwrap();
    let y = knn::response_matrix(&plots).unwrap();
    let proj = knn::fit_cca(&y, &x).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let pairs: Vec<(usize, usize)> = (0..100)
        .map(|_| (rng.random_range(0..plots.len()), rng.random_range(0..plots.len())))
        .collect();

    let mut worst = 0.0f64;
    for &(u, j) in &pairs {
        let d = knn::msn_distance(&proj, &plots[u].metrics, &plots[j].metrics).unwrap();
        let oracle = matrix_distance(&proj, x.row(u), x.row(j));
        worst = worst.max((d - oracle).abs() / oracle.max(1e-300));
    }
    checks.check(worst <= 1e-12, format!("distance vs matrix product rel {worst:.1e}"));

    let (gamma, rho) = whitened_svd_cca(&x, &y);
    let r = proj.lambda2.len();
    let mut worst_rho = 0.0f64;
    let mut worst_gamma = 0.0f64;
    for k in 0..r {
        worst_rho = worst_rho.max((proj.lambda2[k] - rho[k] * rho[k]).abs());
        let ours = proj.gamma.column(k);
        let theirs = gamma.column(k);
        let sign = if ours.dot(&theirs) < 0.0 { -1.0 } else { 1.0 };
        let diff = (ours - theirs * sign).amax() / theirs.amax();
        worst_gamma = worst_gamma.max(diff);
    }
    checks.check(
        r == rho.len().min(y.ncols()) && worst_rho <= 1e-8 && worst_gamma <= 1e-8,
        format!("CCA vs whitened SVD: {r} pairs, ρ² err {worst_rho:.1e}, Γ rel err {worst_gamma:.1e}"),
    );

    let shifts: Vec<(f64, f64)> = (0..vars.len())
        .map(|i| (if i % 2 == 0 { 1.0 } else { -1.0 } * rng.random_range(0.1..20.0), rng.random_range(-50.0..50.0)))
        .collect();
    let rescaled: Vec<PlotRecord> = plots
        .iter()
        .map(|p| {
            let mut q = p.clone();
            for (v, (a, b)) in vars.iter().zip(&shifts) {
                let m = q.metrics.get_mut(v).unwrap();
                *m = a * *m + b;
            }
            q
        })
        .collect();
    let x2 = MetricMatrix::from_plots(&rescaled, &vars).unwrap();
    let proj2 = knn::fit_cca(&y, &x2).unwrap();
    let mut worst_aff = 0.0f64;
    for &(u, j) in &pairs {
        let d1 = knn::msn_distance(&proj, &plots[u].metrics, &plots[j].metrics).unwrap();
        let d2 = knn::msn_distance(&proj2, &rescaled[u].metrics, &rescaled[j].metrics).unwrap();
        worst_aff = worst_aff.max((d1 - d2).abs() / d1.max(1e-12));
    }
    checks.check(worst_aff <= 1e-8, format!("affine invariance rel {worst_aff:.1e}"));
    checks.within_time(started, Duration::from_secs(10));
    checks.finish()
}

// ---------------------------------------------------------------------------
// 3. Estimator identities

fn criterion_3() -> Outcome {
    let mut checks = Checks::default();
    let data = synth::generate(
        &SynthConfig {
            n_plots: 2000,
            seed: 31,
            ..Default::default()
        },
        Execution::Parallel,
    )
    .unwrap();
    let plots = &data.plots;
    let observed = |p: &PlotRecord| if p.is_forest { p.histogram_per_ha() } else { DbhHistogram::zeros() };

    let zero: BTreeMap<String, DbhHistogram> = plots.iter().map(|p| (p.plot_id.clone(), DbhHistogram::zeros())).collect();
    let r = estimation::estimate(plots, &zero, None).unwrap();
    let exact = r
        .rows
        .iter()
        .all(|row| row.ma_total == row.direct_total && row.ma_variance == row.direct_variance);
    checks.check(exact, "ŷ≡0 gives t̂_MA = t̂ and equal variances exactly");

    let perfect: BTreeMap<String, DbhHistogram> = plots.iter().map(|p| (p.plot_id.clone(), observed(p))).collect();
    let r = estimation::estimate(plots, &perfect, None).unwrap();
    let exact = r.rows.iter().all(|row| row.correction == 0.0 && row.ma_variance == 0.0);
    checks.check(exact, "ŷ≡y gives t̂_C = 0 and Var_MA = 0");

    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let noisy: BTreeMap<String, DbhHistogram> = plots
        .iter()
        .map(|p| {
            let mut h = observed(p);
            for v in h.counts.iter_mut().chain(std::iter::once(&mut h.overflow)) {
                *v = (*v * (1.0 + 0.5 * gauss(&mut rng))).max(0.0) + 40.0 * rng.random::<f64>();
            }
            (p.plot_id.clone(), h)
        })
        .collect();
    let r = estimation::estimate(plots, &noisy, None).unwrap();
    let worst = r
        .rows
        .iter()
        .filter_map(|row| {
            let ratio = row.half_ci_direct_pct? / row.half_ci_ma_pct?;
            Some((row.relative_efficiency - ratio * ratio).abs() / row.relative_efficiency)
        })
        .fold(0.0f64, f64::max);
    checks.check(worst <= 1e-12, format!("RE vs squared half-CI ratio rel {worst:.1e}"));

    // Half-CIs given to two decimals bound the squared ratio to an interval
    // that must contain an RE given to two decimals.
    let (lo, hi) = ((1.775f64 / 1.115).powi(2), (1.785f64 / 1.105).powi(2));
    checks.check(
        (lo..=hi).contains(&2.56),
        format!("(1.78/1.11)² = {:.3}; rounding interval [{lo:.3}, {hi:.3}] holds 2.56", (1.78f64 / 1.11).powi(2)),
    );
    checks.finish()
}

// ---------------------------------------------------------------------------
// 4 and 5. End-to-end relative efficiency

struct Inventory {
    data: SynthData,
    perfect: EstimateReport,
    elapsed: Duration,
}

fn default_inventory() -> &'static Inventory {
    static CELL: OnceLock<Inventory> = OnceLock::new();
    CELL.get_or_init(|| {
        let started = Instant::now();
        let data = synth::generate(&SynthConfig::default(), Execution::Parallel).unwrap();
        let layers = ClassificationLayers::truth(&data.plots);
        let perfect =
            pipeline::run_estimation(&data.plots, &layers, &MethodSettings::default(), true, Execution::Parallel).unwrap();
        Inventory {
            data,
            perfect,
            elapsed: started.elapsed(),
        }
    })
}

fn class_re(report: &EstimateReport) -> Vec<(usize, f64)> {
    report
        .rows
        .iter()
        .filter_map(|r| match r.class {
            DbhClass::Mid(i) => Some((i, r.relative_efficiency)),
            _ => None,
        })
        .collect()
}

fn total_re(report: &EstimateReport) -> f64 {
    report.row(DbhClass::All).unwrap().relative_efficiency
}

fn criterion_4() -> Outcome {
    let inv = default_inventory();
    let mut checks = Checks::default();
    let re = class_re(&inv.perfect);
    let total = total_re(&inv.perfect);
    checks.check(total > 1.2, format!("total RE {total:.3} > 1.2"));
    let (min_i, min_re) = re.iter().copied().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    checks.check(
        min_re >= 0.95,
        format!("min class RE {min_re:.3} at {} cm ≥ 0.95", 6 + 2 * min_i),
    );
    let midpoint = |i: usize| 6.0 + 2.0 * i as f64;
    let left = re.iter().filter(|(i, _)| midpoint(*i) <= 10.0).map(|r| r.1).fold(f64::INFINITY, f64::min);
    let right = re.iter().filter(|(i, _)| midpoint(*i) >= 40.0).map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    checks.check(left > right, format!("min RE ≤10 cm {left:.3} > max RE ≥40 cm {right:.3}"));
    let t = inv.elapsed;
    checks.check(t < Duration::from_secs(300), format!("runtime {:.1}s < 300s", t.as_secs_f64()));
    checks.finish()
}

fn criterion_5() -> Outcome {
    let inv = default_inventory();
    let plots = &inv.data.plots;
    let layers = &inv.data.layers;
    let mut checks = Checks::default();
    let mask_oa = layers.mask_accuracy(plots).unwrap();
    // Species accuracy is assessed where the mask says forest.
    let forest: Vec<&PlotRecord> = plots
        .iter()
        .filter(|p| p.dominant_species.is_some() && layers.entries[&p.plot_id].mapped_forest)
        .collect();
    let species_oa = forest
        .iter()
        .filter(|p| layers.entries[&p.plot_id].mapped_species == p.dominant_species)
        .count() as f64
        / forest.len() as f64;
    checks.check(
        (mask_oa - 0.92).abs() < 0.02 && (species_oa - 0.74).abs() < 0.03,
        format!("mask OA {:.1}%, species OA {:.1}%", 100.0 * mask_oa, 100.0 * species_oa),
    );
    let mapped = pipeline::run_estimation(plots, layers, &MethodSettings::default(), true, Execution::Parallel).unwrap();
    let perfect = class_re(&inv.perfect);
    let degraded = class_re(&mapped);
    let considered: Vec<(usize, f64, f64)> = perfect
        .iter()
        .zip(&degraded)
        .filter(|(p, _)| p.1 > 1.05)
        .map(|(p, m)| (p.0, p.1, m.1))
        .collect();
    let violations: Vec<String> = considered
        .iter()
        .filter(|(_, p, m)| m >= p)
        .map(|(i, p, m)| format!("{} cm {p:.3}->{m:.3}", 6 + 2 * i))
        .collect();
    checks.check(
        !considered.is_empty() && violations.is_empty(),
        format!(
            "RE reduced in {}/{} classes with perfect RE > 1.05{}",
            considered.len() - violations.len(),
            considered.len(),
            if violations.is_empty() { String::new() } else { format!(" (not: {})", violations.join(", ")) }
        ),
    );
    let min_mapped = degraded.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    checks.notes.push(format!(
        "total RE {:.3} -> {:.3}, min class RE with map errors {min_mapped:.3}",
        total_re(&inv.perfect),
        total_re(&mapped)
    ));
    checks.finish()
}

// ---------------------------------------------------------------------------
// 6. Method ranking

fn criterion_6() -> Outcome {
    let settings = MethodSettings::default();
    let mut agreeing = 0;
    let mut notes = Vec::new();
    for seed in 1..=5u64 {
        let config = SynthConfig {
            n_plots: 1100,
            bimodal_fraction: 0.3,
            seed,
            ..Default::default()
        };
        let data = synth::generate(&config, Execution::Parallel).unwrap();
        let plots = pipeline::modeling_set(&data.plots, &ModelingRules::default());
        let sums: Vec<f64> = [Method::Ppm, Method::Glm, Method::Knn]
            .iter()
            .map(|&m| {
                let pred = pipeline::loo_histograms(&plots, m, &settings, Execution::Parallel).unwrap();
                pipeline::evaluate(m, &plots, &pred).unwrap().summed_abs_residual
            })
            .collect();
        let (ppm, glm, nn) = (sums[0], sums[1], sums[2]);
        let ok = nn < glm && glm <= ppm;
        agreeing += usize::from(ok);
        notes.push(format!("seed {seed}: PPM {ppm:.0} GLM {glm:.0} NN {nn:.0}{}", if ok { "" } else { " (out of order)" }));
    }
    Outcome::new(
        agreeing >= 4,
        format!("NN < GLM ≤ PPM in {agreeing}/5 seeds; {}", notes.join("; ")),
    )
}

// ---------------------------------------------------------------------------
// 7. Simulated annealing

/// Leave-one-out RMSE of OLS with intercept, from the hat matrix.
fn press_rmse(x: &DMatrix<f64>, y: &DVector<f64>, cols: &[usize]) -> f64 {
    let n = x.nrows();
    let design = DMatrix::from_fn(n, cols.len() + 1, |i, j| if j == 0 { 1.0 } else { x[(i, cols[j - 1])] });
    let xtx_inv = (design.transpose() * &design).try_inverse().unwrap();
    let beta = &xtx_inv * design.transpose() * y;
    let fitted = &design * beta;
    let mut ss = 0.0;
    for i in 0..n {
        let row = design.row(i);
        let h = (row * &xtx_inv * row.transpose())[(0, 0)];
        ss += ((y[i] - fitted[i]) / (1.0 - h)).powi(2);
    }
    (ss / n as f64).sqrt()
}

fn criterion_7() -> Outcome {
    let mut checks = Checks::default();
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let (n, p) = (150, 20);
    let latent: Vec<f64> = (0..n).map(|_| gauss(&mut rng)).collect();
    let x = DMatrix::from_fn(n, p, |i, _| 0.5 * latent[i] + gauss(&mut rng));
    let y = DVector::from_fn(n, |i, _| 1.0 * x[(i, 3)] - 0.8 * x[(i, 11)] + 0.6 * x[(i, 17)] + 0.7 * gauss(&mut rng));
    let candidates: Vec<String> = (0..p).map(|i| format!("x{i:02}")).collect();
    let cost = |subset: &[String]| -> Result<f64> {
        let cols: Vec<usize> = subset.iter().map(|s| s[1..].parse().unwrap()).collect();
        Ok(press_rmse(&x, &y, &cols))
    };

    let mut best = (f64::INFINITY, vec![]);
    for a in 0..p {
        for b in a + 1..p {
            for c in b + 1..p {
                let v = press_rmse(&x, &y, &[a, b, c]);
                if v < best.0 {
                    best = (v, vec![a, b, c]);
                }
            }
        }
    }
    let optimum: Vec<String> = best.1.iter().map(|&i| candidates[i].clone()).collect();

    let config = SaConfig::default();
    let runs = varsel::all_restarts(&candidates, cost, &config, 5, Execution::Parallel).unwrap();
    let hits = runs.iter().filter(|r| r.best_subset == optimum).count();
    checks.check(hits >= 4, format!("optimum {optimum:?} found in {hits}/5 restarts"));

    let again = varsel::all_restarts(&candidates, cost, &config, 5, Execution::Sequential).unwrap();
    checks.check(runs == again, "identical results and traces on rerun, sequential vs parallel");
    checks.finish()
}

// ---------------------------------------------------------------------------
// 8. Mixed model

fn criterion_8() -> Outcome {
    let mut checks = Checks::default();
    let mut rng = ChaCha8Rng::seed_from_u64(808);

    let mut groups = Vec::new();
    let mut rows = Vec::new();
    for g in 0..30 {
        for _ in 0..rng.random_range(3..10) {
            groups.push(format!("g{g}"));
            rows.push([rng.random_range(0.0..1.0), rng.random_range(5.0..25.0) + g as f64 * 0.1]);
        }
    }
    let n = rows.len();
    let x = DMatrix::from_fn(n, 3, |i, j| if j == 0 { 1.0 } else { rows[i][j - 1] });
    let y0 = DVector::from_fn(n, |i, _| 3.0 + 2.0 * rows[i][0] - 0.5 * rows[i][1] + gauss(&mut rng));
    // Remove the between-group component of the OLS residuals, so the REML
    // optimum sits on the boundary σ_b = 0: y = y0 − D (D'MD)⁻¹ D'M y0.
    let ids: Vec<usize> = groups.iter().map(|g| g[1..].parse().unwrap()).collect();
    let d = DMatrix::from_fn(n, 30, |i, g| f64::from(u8::from(ids[i] == g)));
    let hat = &x * (x.transpose() * &x).try_inverse().unwrap() * x.transpose();
    let m = DMatrix::identity(n, n) - hat;
    let dm = d.transpose() * &m;
    let y = &y0 - &d * (&dm * &d).try_inverse().unwrap() * (&dm * &y0);

    let design = MetricMatrix::new(
        vec!["a".into(), "b".into()],
        (0..n).map(|i| i.to_string()).collect(),
        rows.iter().flatten().copied().collect(),
    )
    .unwrap();
    let yv: Vec<f64> = y.iter().copied().collect();
    let fit = lmm::fit_reml(&yv, &design, &groups).unwrap();
    let beta = (x.transpose() * &x).try_inverse().unwrap() * x.transpose() * &y;
    let resid = &y - &x * &beta;
    let sigma_ols = (resid.norm_squared() / (n - 3) as f64).sqrt();
    let worst_beta = fit
        .fixed_coefficients
        .iter()
        .zip(beta.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    checks.check(
        fit.sigma_b <= 1e-6 && worst_beta <= 1e-6 && (fit.sigma - sigma_ols).abs() <= 1e-6,
        format!(
            "σ_b = {:.1e}; |β − β_OLS| {worst_beta:.1e}; |σ − σ_OLS| {:.1e}",
            fit.sigma_b,
            (fit.sigma - sigma_ols).abs()
        ),
    );

    let (a, r) = (15usize, 8usize);
    let mut y = Vec::new();
    let mut groups = Vec::new();
    for g in 0..a {
        let u = 1.5 * gauss(&mut rng);
        for _ in 0..r {
            y.push(20.0 + u + gauss(&mut rng));
            groups.push(format!("g{g:02}"));
        }
    }
    let empty = MetricMatrix::new(vec![], (0..a * r).map(|i| i.to_string()).collect(), vec![]).unwrap();
    let fit = lmm::fit_reml(&y, &empty, &groups).unwrap();
    let grand = y.iter().sum::<f64>() / (a * r) as f64;
    let means: Vec<f64> = y.chunks(r).map(|c| c.iter().sum::<f64>() / r as f64).collect();
    let msb = means.iter().map(|m| r as f64 * (m - grand).powi(2)).sum::<f64>() / (a - 1) as f64;
    let msw = y
        .chunks(r)
        .zip(&means)
        .flat_map(|(c, m)| c.iter().map(move |v| (v - m).powi(2)))
        .sum::<f64>()
        / (a * (r - 1)) as f64;
    let errs = [
        (fit.sigma.powi(2) - msw).abs(),
        (fit.sigma_b.powi(2) - (msb - msw) / r as f64).abs(),
        (fit.fixed_coefficients[0] - grand).abs(),
        (fit.fixed_se[0] - (msb / (a * r) as f64).sqrt()).abs(),
    ];
    let worst = errs.iter().copied().fold(0.0f64, f64::max);
    checks.check(
        msb > msw && worst <= 1e-6,
        format!("balanced one-way vs ANOVA (σ², σ_b², μ, se μ) max err {worst:.1e}"),
    );
    checks.finish()
}

// ---------------------------------------------------------------------------
// 9. Joint GLM

fn criterion_9() -> Outcome {
    let mut checks = Checks::default();
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let opts = GlmOptions {
        random_shape: false,
        random_scale: false,
        ..Default::default()
    };
    let mut worst = 0.0f64;
    for k in 0..5 {
        let (c, b) = (rng.random_range(1.5..4.5), rng.random_range(12.0..35.0));
        let n = rng.random_range(20..120);
        let mut plot = PlotRecord::new(format!("p{k}"), "g", true);
        plot.dominant_species = Some(Species::Pine);
        plot.trees = (0..n)
            .map(|_| TreeRecord::new(plot.plot_id.clone(), oracle_draw(&mut rng, c, b), Species::Pine).unwrap())
            .collect();
        let ml = weibull::fit_ml(&plot.trees).unwrap().params;
        let model = glm::train_with(std::slice::from_ref(&plot), &[], &[], &opts, None).unwrap();
        worst = worst
            .max((model.shape_coefficients[0].exp() - ml.shape).abs())
            .max((model.scale_coefficients[0].exp() - ml.scale).abs());
    }
    checks.check(worst <= 1e-4, format!("single-plot intercept-only vs ML max err {worst:.1e}"));

    let settings = MethodSettings::default();
    let plots: Vec<PlotRecord> = forest_plots(120, 9).into_iter().take(40).collect();
    let data = GlmData::new(&plots, &settings.shape_vars, &settings.scale_vars).unwrap();
    let sigma = [0.2, 0.12];
    let mut worst_joint = 0.0f64;
    let mut worst_prof = 0.0f64;
    for _ in 0..5 {
        let theta: Vec<f64> = vec![
            rng.random_range(1.5..2.5),
            rng.random_range(-2.0..-1.5),
            rng.random_range(-0.6..-0.4),
            rng.random_range(0.0..0.01),
            rng.random_range(2.4..2.8),
            rng.random_range(-1.1..-0.9),
            rng.random_range(-0.2..-0.1),
            rng.random_range(0.04..0.08),
        ];
        let u: Vec<f64> = (0..2 * data.n_plots()).map(|_| rng.random_range(-0.2..0.2)).collect();
        let (_, g) = data.joint_objective(&theta, &u, sigma);
        let mut all = theta.clone();
        all.extend(&u);
        let f = |v: &[f64]| data.joint_objective(&v[..8], &v[8..], sigma).0;
        for i in 0..all.len() {
            let h = 1e-5 * all[i].abs().max(1.0);
            let (mut up, mut dn) = (all.clone(), all.clone());
            up[i] += h;
            dn[i] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            worst_joint = worst_joint.max((fd - g[i]).abs() / g[i].abs().max(1.0));
        }
        let pg = data.profiled_gradient(&theta, sigma);
        for i in 0..theta.len() {
            let h = 1e-5;
            let (mut up, mut dn) = (theta.clone(), theta.clone());
            up[i] += h;
            dn[i] -= h;
            let fd = (data.profiled_objective(&up, sigma) - data.profiled_objective(&dn, sigma)) / (2.0 * h);
            worst_prof = worst_prof.max((fd - pg[i]).abs() / pg[i].abs().max(1.0));
        }
    }
    checks.check(
        worst_joint <= 1e-6 && worst_prof <= 1e-6,
        format!("gradient vs central differences: joint {worst_joint:.1e}, profiled {worst_prof:.1e}"),
    );
    checks.finish()
}

// ---------------------------------------------------------------------------
// 10. Determinism

fn pipeline_outputs(exec: Execution) -> Vec<(&'static str, Vec<u8>)> {
    let config = SynthConfig {
        n_plots: 1500,
        seed: 1010,
        ..Default::default()
    };
    let data = synth::generate(&config, exec).unwrap();
    let settings = MethodSettings::default();
    let estimate = pipeline::run_estimation(&data.plots, &data.layers, &settings, true, exec).unwrap();
    let modeling = pipeline::modeling_set(&data.plots, &ModelingRules::default());
    let reports: Vec<_> = [Method::Ppm, Method::Knn]
        .iter()
        .map(|&m| {
            let pred = pipeline::loo_histograms(&modeling, m, &settings, exec).unwrap();
            pipeline::evaluate(m, &modeling, &pred).unwrap()
        })
        .collect();
    vec![
        ("plots.csv", io::plots_csv(&data.plots).unwrap()),
        ("trees.csv", io::trees_csv(&data.plots).unwrap()),
        ("layers.csv", io::layers_csv(&data.layers).unwrap()),
        ("estimate.csv", pipeline::estimate_csv(&estimate).unwrap()),
        ("loo_accuracy.csv", pipeline::evaluation_csv(&reports).unwrap()),
        ("residual_sums.csv", pipeline::residual_sums_csv(&reports).unwrap()),
    ]
}

fn criterion_10() -> Outcome {
    let first = pipeline_outputs(Execution::Parallel);
    let second = pipeline_outputs(Execution::Parallel);
    let sequential = pipeline_outputs(Execution::Sequential);
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .zip(&sequential)
        .filter(|((a, b), s)| a.1 != b.1 || a.1 != s.1)
        .map(|((a, _), _)| a.0)
        .collect();
    let bytes: usize = first.iter().map(|f| f.1.len()).sum();
    Outcome::new(
        differing.is_empty() && first.iter().all(|f| !f.1.is_empty()),
        if differing.is_empty() {
            format!("{} report files ({bytes} bytes) byte-identical across two runs and sequential mode", first.len())
        } else {
            format!("differing outputs: {}", differing.join(", "))
        },
    )
}

// ---------------------------------------------------------------------------

const CRITERIA: [(&str, fn() -> Outcome); 10] = [
    ("truncated Weibull correctness", criterion_1),
    ("MSN distance and CCA correctness", criterion_2),
    ("estimator identities", criterion_3),
    ("end-to-end RE gain", criterion_4),
    ("classification-error degradation", criterion_5),
    ("method ranking", criterion_6),
    ("SA variable selection", criterion_7),
    ("LMM REML equivalences", criterion_8),
    ("GLM degeneracy and gradients", criterion_9),
    ("pipeline determinism", criterion_10),
];

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (i, (name, run)) in CRITERIA.iter().enumerate() {
        let id = i + 1;
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let started = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        failures += usize::from(!outcome.pass);
        println!(
            "{} criterion {id:>2} ({name}) [{:.1}s]: {}",
            if outcome.pass { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64(),
            outcome.detail
        );
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
