//! Most-similar-neighbour imputation.
//!
//! Canonical correlation analysis between plot-level responses and remote
//! sensing predictors defines the distance
//!
//! ```text
//! d²(u, j) = (x_u − x_j)' Γ Λ² Γ' (x_u − x_j)
//! ```
//!
//! on standardized predictors. Targets receive the inverse-distance weighted
//! mean of their k nearest reference histograms.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::histogram::{DbhHistogram, NUM_CLASSES};
use crate::par::{self, Execution};
use crate::stats::collinear_columns;
use crate::types::{MetricMatrix, Metrics, PlotRecord};

pub const DEFAULT_K: usize = 5;
/// Squared distances below this count as exact matches.
pub const ZERO_DISTANCE: f64 = 1e-12;
/// Canonical components with a smaller squared correlation are dropped.
pub const MIN_CANONICAL_R2: f64 = 1e-8;

/// Basal area (m²/ha), stems/ha, basal-area weighted mean DBH (cm) and
/// Lorey's height (m).
pub const RESPONSE_NAMES: [&str; 4] = ["G", "N", "DG", "HL"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weighting {
    /// w ∝ 1/d² with d² the squared MSN distance.
    #[default]
    InverseSquared,
    /// w ∝ 1/d.
    Inverse,
}

impl Weighting {
    pub fn as_str(self) -> &'static str {
        match self {
            Weighting::InverseSquared => "inverse_squared",
            Weighting::Inverse => "inverse",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "inverse_squared" => Ok(Weighting::InverseSquared),
            "inverse" => Ok(Weighting::Inverse),
            other => Err(Error::Config(format!(
                "unknown k-NN weighting '{other}' (expected inverse_squared or inverse)"
            ))),
        }
    }

    fn weight(self, d2: f64) -> f64 {
        match self {
            Weighting::InverseSquared => 1.0 / d2,
            Weighting::Inverse => 1.0 / d2.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsnProjection {
    pub variable_names: Vec<String>,
    pub predictor_means: Vec<f64>,
    pub predictor_sds: Vec<f64>,
    /// p × q canonical coefficients for standardized predictors, scaled so
    /// the canonical variates have unit variance.
    pub gamma: DMatrix<f64>,
    /// Squared canonical correlations, nonincreasing.
    pub lambda2: Vec<f64>,
}

impl MsnProjection {
    /// q × p map A with d² = ‖A (x_u − x_j)‖² on raw predictor values.
    pub fn distance_map(&self) -> DMatrix<f64> {
        let p = self.variable_names.len();
        let q = self.lambda2.len();
        DMatrix::from_fn(q, p, |r, c| {
            self.lambda2[r].sqrt() * self.gamma[(c, r)] / self.predictor_sds[c]
        })
    }

    pub fn values(&self, metrics: &Metrics) -> Result<Vec<f64>> {
        self.variable_names
            .iter()
            .map(|v| metrics.get(v).copied().ok_or_else(|| Error::MissingMetric(v.clone())))
            .collect()
    }

    /// Squared distance between raw predictor vectors ordered like
    /// `variable_names`.
    pub fn distance_values(&self, xu: &[f64], xj: &[f64]) -> f64 {
        let mut d2 = 0.0;
        for (r, l2) in self.lambda2.iter().enumerate() {
            let mut proj = 0.0;
            for (c, (a, b)) in xu.iter().zip(xj).enumerate() {
                proj += self.gamma[(c, r)] * (a - b) / self.predictor_sds[c];
            }
            d2 += l2 * proj * proj;
        }
        d2
    }
}

pub fn msn_distance(projection: &MsnProjection, x_u: &Metrics, x_j: &Metrics) -> Result<f64> {
    Ok(projection.distance_values(&projection.values(x_u)?, &projection.values(x_j)?))
}

/// Cross-product sums of rows shifted by fixed centres, so single rows can be
/// removed without recomputing from scratch.
#[derive(Debug, Clone)]
struct Moments {
    n: f64,
    cx: DVector<f64>,
    cy: DVector<f64>,
    sx: DVector<f64>,
    sy: DVector<f64>,
    sxx: DMatrix<f64>,
    syy: DMatrix<f64>,
    sxy: DMatrix<f64>,
}

impl Moments {
    fn new(x: &MetricMatrix, y: &MetricMatrix) -> Self {
        let (p, r, n) = (x.ncols(), y.ncols(), x.nrows());
        let centre = |m: &MetricMatrix, j: usize| m.column(j).iter().sum::<f64>() / n as f64;
        let mut m = Moments {
            n: 0.0,
            cx: DVector::from_fn(p, |j, _| centre(x, j)),
            cy: DVector::from_fn(r, |j, _| centre(y, j)),
            sx: DVector::zeros(p),
            sy: DVector::zeros(r),
            sxx: DMatrix::zeros(p, p),
            syy: DMatrix::zeros(r, r),
            sxy: DMatrix::zeros(p, r),
        };
        for i in 0..n {
            m.update(x.row(i), y.row(i), 1.0);
        }
        m
    }

    fn update(&mut self, x: &[f64], y: &[f64], sign: f64) {
        let dx = DVector::from_fn(x.len(), |j, _| x[j] - self.cx[j]);
        let dy = DVector::from_fn(y.len(), |j, _| y[j] - self.cy[j]);
        self.n += sign;
        self.sx += &dx * sign;
        self.sy += &dy * sign;
        self.sxx += &dx * dx.transpose() * sign;
        self.syy += &dy * dy.transpose() * sign;
        self.sxy += &dx * dy.transpose() * sign;
    }

    fn without(&self, x: &[f64], y: &[f64]) -> Self {
        let mut m = self.clone();
        m.update(x, y, -1.0);
        m
    }

    /// Sample covariance blocks (xx, yy, xy) and predictor means.
    fn covariances(&self) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
        let n = self.n;
        let mx = &self.sx / n;
        let my = &self.sy / n;
        let d = n - 1.0;
        let cxx = (&self.sxx - &mx * self.sx.transpose()) / d;
        let cyy = (&self.syy - &my * self.sy.transpose()) / d;
        let cxy = (&self.sxy - &mx * self.sy.transpose()) / d;
        (cxx, cyy, cxy, mx + &self.cx)
    }

    fn projection(&self, names: &[String]) -> Result<MsnProjection> {
        let (cxx, cyy, cxy, means) = self.covariances();
        let p = cxx.nrows();
        let sdx: Vec<f64> = (0..p).map(|i| cxx[(i, i)].max(0.0).sqrt()).collect();
        let sdy: Vec<f64> = (0..cyy.nrows()).map(|i| cyy[(i, i)].max(0.0).sqrt()).collect();
        if let Some(i) = sdx.iter().position(|s| !(*s > 0.0)) {
            return Err(Error::RankDeficient { columns: vec![names[i].clone()] });
        }
        if sdy.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::RankDeficient { columns: vec!["(constant response)".into()] });
        }
        let rxx = DMatrix::from_fn(p, p, |i, j| cxx[(i, j)] / (sdx[i] * sdx[j]));
        let ryy = DMatrix::from_fn(sdy.len(), sdy.len(), |i, j| cyy[(i, j)] / (sdy[i] * sdy[j]));
        let rxy = DMatrix::from_fn(p, sdy.len(), |i, j| cxy[(i, j)] / (sdx[i] * sdy[j]));
        let (gamma, lambda2) = cca_core(&rxx, &ryy, &rxy)
            .ok_or_else(|| Error::RankDeficient { columns: names.to_vec() })?;
        Ok(MsnProjection {
            variable_names: names.to_vec(),
            predictor_means: means.iter().copied().collect(),
            predictor_sds: sdx,
            gamma,
            lambda2,
        })
    }
}

/// CCA on correlation blocks: with Rxx = LL', the symmetric matrix
/// L⁻¹ Rxy Ryy⁻¹ Ryx L⁻ᵀ has eigenvalues ρ² and eigenvectors W; Γ = L⁻ᵀ W.
fn cca_core(rxx: &DMatrix<f64>, ryy: &DMatrix<f64>, rxy: &DMatrix<f64>) -> Option<(DMatrix<f64>, Vec<f64>)> {
    let lx = rxx.clone().cholesky()?;
    let ly = ryy.clone().cholesky()?;
    let l = lx.l();
    let a = l.solve_lower_triangular(rxy)?;
    let ryy_inv_ryx = ly.solve(&rxy.transpose());
    let b = l.solve_lower_triangular(&ryy_inv_ryx.transpose())?;
    let m = &a * b.transpose();
    let m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let keep: Vec<usize> = order
        .into_iter()
        .filter(|&i| eig.eigenvalues[i] > MIN_CANONICAL_R2)
        .collect();
    let p = rxx.nrows();
    let w = DMatrix::from_fn(p, keep.len(), |r, c| eig.eigenvectors[(r, keep[c])]);
    let gamma = l.transpose().solve_upper_triangular(&w)?;
    let lambda2 = keep.iter().map(|&i| eig.eigenvalues[i].clamp(0.0, 1.0)).collect();
    Some((gamma, lambda2))
}

/// Canonical correlation analysis of responses on predictors.
pub fn fit_cca(responses: &MetricMatrix, predictors: &MetricMatrix) -> Result<MsnProjection> {
    let n = predictors.nrows();
    if responses.nrows() != n {
        return Err(Error::LengthMismatch {
            observed: responses.nrows(),
            predicted: n,
        });
    }
    if n <= predictors.ncols() + responses.ncols() {
        return Err(Error::Validation(format!(
            "canonical correlation needs more than {} rows, got {n}",
            predictors.ncols() + responses.ncols()
        )));
    }
    let mut bad = collinear_columns(predictors);
    bad.extend(collinear_columns(responses));
    if !bad.is_empty() {
        return Err(Error::RankDeficient { columns: bad });
    }
    Moments::new(predictors, responses).projection(predictors.names())
}

/// Plot-level responses for the CCA. Lorey's height is included only when
/// every plot carries tree heights.
pub fn response_matrix(plots: &[PlotRecord]) -> Result<MetricMatrix> {
    let heights: Option<Vec<f64>> = plots.iter().map(PlotRecord::lorey_height).collect();
    let names: Vec<String> = RESPONSE_NAMES[..if heights.is_some() { 4 } else { 3 }]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut data = Vec::with_capacity(plots.len() * names.len());
    for (i, p) in plots.iter().enumerate() {
        data.extend([p.basal_area(), p.stems_per_ha(), p.dg()]);
        if let Some(h) = &heights {
            data.push(h[i]);
        }
    }
    MetricMatrix::new(names, plots.iter().map(|p| p.plot_id.clone()).collect(), data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub plot_id: String,
    /// Predictor values ordered like the projection variables.
    pub metrics: Vec<f64>,
    /// Stems per hectare per DBH class.
    pub histogram: DbhHistogram,
    pub responses: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnnConfig {
    pub k: usize,
    pub weighting: Weighting,
}

impl Default for KnnConfig {
    fn default() -> Self {
        KnnConfig {
            k: DEFAULT_K,
            weighting: Weighting::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnModel {
    pub projection: MsnProjection,
    pub references: Vec<Reference>,
    pub response_names: Vec<String>,
    pub config: KnnConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Imputation {
    /// Stems per hectare per DBH class.
    pub histogram: DbhHistogram,
    pub responses: Vec<f64>,
    /// Reference index and weight of each neighbour, nearest first.
    pub neighbors: Vec<(usize, f64)>,
}

fn references(plots: &[PlotRecord], x: &MetricMatrix, y: &MetricMatrix) -> Vec<Reference> {
    plots
        .iter()
        .enumerate()
        .map(|(i, p)| Reference {
            plot_id: p.plot_id.clone(),
            metrics: x.row(i).to_vec(),
            histogram: p.histogram_per_ha(),
            responses: y.row(i).to_vec(),
        })
        .collect()
}

pub fn fit(plots: &[PlotRecord], variables: &[String], config: KnnConfig) -> Result<KnnModel> {
    if config.k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let x = MetricMatrix::from_plots(plots, variables)?;
    let y = response_matrix(plots)?;
    let projection = fit_cca(&y, &x)?;
    Ok(KnnModel {
        projection,
        references: references(plots, &x, &y),
        response_names: y.names().to_vec(),
        config,
    })
}

/// Weighted combination of the k nearest references among `candidates`.
fn combine(
    map: &DMatrix<f64>,
    refs: &[Reference],
    target: &[f64],
    skip: impl Fn(usize) -> bool,
    config: KnnConfig,
) -> Result<Imputation> {
    let q = map.nrows();
    let zt: Vec<f64> = (0..q)
        .map(|r| (0..target.len()).map(|c| map[(r, c)] * target[c]).sum())
        .collect();
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(refs.len());
    for (j, rf) in refs.iter().enumerate() {
        if skip(j) {
            continue;
        }
        let mut d2 = 0.0;
        for (r, z) in zt.iter().enumerate() {
            let zj: f64 = (0..rf.metrics.len()).map(|c| map[(r, c)] * rf.metrics[c]).sum();
            d2 += (z - zj) * (z - zj);
        }
        dist.push((d2, j));
    }
    if config.k > dist.len() {
        return Err(Error::Validation(format!(
            "k = {} exceeds the {} available references",
            config.k,
            dist.len()
        )));
    }
    let by_distance = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if config.k < dist.len() {
        dist.select_nth_unstable_by(config.k - 1, by_distance);
        dist.truncate(config.k);
    }
    dist.sort_by(by_distance);
    let zero: Vec<usize> = (0..dist.len()).filter(|&i| dist[i].0 < ZERO_DISTANCE).collect();
    let raw: Vec<f64> = if zero.is_empty() {
        dist.iter().map(|(d2, _)| config.weighting.weight(*d2)).collect()
    } else {
        (0..dist.len()).map(|i| if zero.contains(&i) { 1.0 } else { 0.0 }).collect()
    };
    let total: f64 = raw.iter().sum();
    let neighbors: Vec<(usize, f64)> = dist.iter().zip(&raw).map(|((_, j), w)| (*j, w / total)).collect();
    let mut histogram = DbhHistogram::zeros();
    let mut responses = vec![0.0; refs.first().map_or(0, |r| r.responses.len())];
    for &(j, w) in &neighbors {
        histogram.add_scaled(&refs[j].histogram, w);
        for (acc, v) in responses.iter_mut().zip(&refs[j].responses) {
            *acc += w * v;
        }
    }
    // Convex combinations of non-negative counts; clear rounding residue.
    for c in histogram.counts.iter_mut() {
        *c = c.max(0.0);
    }
    histogram.overflow = histogram.overflow.max(0.0);
    Ok(Imputation {
        histogram,
        responses,
        neighbors,
    })
}

impl KnnModel {
    /// Impute a target plot. A reference with the target's plot id is never
    /// used, so a plot cannot be its own neighbour.
    pub fn impute(&self, target: &PlotRecord) -> Result<Imputation> {
        let x = self.projection.values(&target.metrics)?;
        let map = self.projection.distance_map();
        combine(
            &map,
            &self.references,
            &x,
            |j| self.references[j].plot_id == target.plot_id,
            self.config,
        )
    }
}

pub fn impute(model: &KnnModel, target: &PlotRecord) -> Result<Imputation> {
    model.impute(target)
}

/// Leave-one-out imputation of every plot. Each fold re-estimates the CCA
/// without the held-out plot by removing its row from the moment sums.
pub fn loo_impute(
    plots: &[PlotRecord],
    variables: &[String],
    config: KnnConfig,
    exec: Execution,
) -> Result<Vec<Imputation>> {
    let x = MetricMatrix::from_plots(plots, variables)?;
    let y = response_matrix(plots)?;
    fit_cca(&y, &x)?;
    let moments = Moments::new(&x, &y);
    let refs = references(plots, &x, &y);
    par::try_map_range(exec, plots.len(), |i| {
        let projection = moments.without(x.row(i), y.row(i)).projection(variables)?;
        combine(&projection.distance_map(), &refs, x.row(i), |j| j == i, config)
    })
}

/// Three-bin moving average over the DBH classes (the overflow bin is left
/// out), truncated at the edges, then rescaled to the original total.
pub fn smooth(histogram: &DbhHistogram) -> DbhHistogram {
    let c = &histogram.counts;
    let mut out = *histogram;
    for i in 0..NUM_CLASSES {
        let lo = i.saturating_sub(1);
        let hi = (i + 1).min(NUM_CLASSES - 1);
        out.counts[i] = c[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64;
    }
    out.rescaled_to(histogram.total())
}

// Persistence: a model directory holds settings.csv, projection.csv,
// correlations.csv and references.csv.

fn io_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line: line as u64,
        message: message.into(),
    }
}

impl KnnModel {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("settings.csv"))?;
        w.write_record(["key", "value"])?;
        w.write_record(["k", &self.config.k.to_string()])?;
        w.write_record(["weighting", self.config.weighting.as_str()])?;
        w.write_record(["responses", &self.response_names.join(" ")])?;
        w.flush()?;

        let p = &self.projection;
        let q = p.lambda2.len();
        let mut w = csv::Writer::from_path(dir.join("projection.csv"))?;
        let mut header = vec!["variable".to_string(), "mean".into(), "sd".into()];
        header.extend((1..=q).map(|i| format!("gamma_{i}")));
        w.write_record(&header)?;
        for (i, name) in p.variable_names.iter().enumerate() {
            let mut row = vec![name.clone(), p.predictor_means[i].to_string(), p.predictor_sds[i].to_string()];
            row.extend((0..q).map(|r| p.gamma[(i, r)].to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("correlations.csv"))?;
        w.write_record(["component", "rho2"])?;
        for (i, l) in p.lambda2.iter().enumerate() {
            w.write_record([(i + 1).to_string(), l.to_string()])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("references.csv"))?;
        let mut header = vec!["plot_id".to_string()];
        header.extend(p.variable_names.iter().cloned());
        header.extend(self.response_names.iter().map(|r| format!("response_{r}")));
        header.extend((0..NUM_CLASSES).map(|i| format!("n_{}", crate::histogram::class_midpoint(i))));
        header.push("n_overflow".into());
        w.write_record(&header)?;
        for r in &self.references {
            let mut row = vec![r.plot_id.clone()];
            row.extend(r.metrics.iter().map(f64::to_string));
            row.extend(r.responses.iter().map(f64::to_string));
            row.extend(r.histogram.bins().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let num = |path: &Path, line: usize, s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| io_err(path, line, format!("'{s}' is not a number")))
        };

        let path = dir.join("settings.csv");
        let mut config = KnnConfig::default();
        let mut response_names = Vec::new();
        for (i, rec) in csv::Reader::from_path(&path)?.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            match (rec.get(0), rec.get(1)) {
                (Some("k"), Some(v)) => {
                    config.k = v.parse().map_err(|_| io_err(&path, line, "k is not an integer"))?
                }
                (Some("weighting"), Some(v)) => config.weighting = Weighting::parse(v)?,
                (Some("responses"), Some(v)) => response_names = v.split_whitespace().map(String::from).collect(),
                _ => return Err(io_err(&path, line, "unexpected setting")),
            }
        }

        let path = dir.join("projection.csv");
        let mut rdr = csv::Reader::from_path(&path)?;
        let q = rdr.headers()?.len().saturating_sub(3);
        let (mut names, mut means, mut sds, mut gamma_rows) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            if rec.len() != q + 3 {
                return Err(io_err(&path, line, "wrong number of fields"));
            }
            names.push(rec[0].to_string());
            means.push(num(&path, line, &rec[1])?);
            sds.push(num(&path, line, &rec[2])?);
            gamma_rows.push((3..q + 3).map(|c| num(&path, line, &rec[c])).collect::<Result<Vec<_>>>()?);
        }
        let gamma = DMatrix::from_fn(names.len(), q, |r, c| gamma_rows[r][c]);

        let path = dir.join("correlations.csv");
        let mut lambda2 = Vec::new();
        for (i, rec) in csv::Reader::from_path(&path)?.records().enumerate() {
            let rec = rec?;
            lambda2.push(num(&path, i + 2, rec.get(1).unwrap_or(""))?);
        }
        if lambda2.len() != q {
            return Err(io_err(&path, 1, "component count does not match projection"));
        }

        let path = dir.join("references.csv");
        let p = names.len();
        let r = response_names.len();
        let mut refs = Vec::new();
        for (i, rec) in csv::Reader::from_path(&path)?.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            if rec.len() != 1 + p + r + NUM_CLASSES + 1 {
                return Err(io_err(&path, line, "wrong number of fields"));
            }
            let vals = (1..rec.len()).map(|c| num(&path, line, &rec[c])).collect::<Result<Vec<_>>>()?;
            let mut histogram = DbhHistogram::zeros();
            histogram.counts.copy_from_slice(&vals[p + r..p + r + NUM_CLASSES]);
            histogram.overflow = vals[p + r + NUM_CLASSES];
            refs.push(Reference {
                plot_id: rec[0].to_string(),
                metrics: vals[..p].to_vec(),
                responses: vals[p..p + r].to_vec(),
                histogram,
            });
        }
        Ok(KnnModel {
            projection: MsnProjection {
                variable_names: names,
                predictor_means: means,
                predictor_sds: sds,
                gamma,
                lambda2,
            },
            references: refs,
            response_names,
            config,
        })
    }
}
