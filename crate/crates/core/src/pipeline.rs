//! End-to-end workflows: dataset screening, leave-one-out evaluation of the
//! three prediction methods, and model-assisted estimation through map layers.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::estimation::{self, ClassificationLayers, EstimateReport};
use crate::glm::{self, GlmOptions};
use crate::histogram::{DbhClass, DbhHistogram, NUM_CLASSES};
use crate::knn::{self, KnnConfig};
use crate::par::Execution;
use crate::ppm;
use crate::stats;
use crate::types::{PlotRecord, Species};
use crate::weibull;

/// Screening rules that apply to the modeling dataset only. The estimation
/// dataset keeps every plot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelingRules {
    pub min_trees: usize,
    /// Drop forest plots flagged as not single-layered. Missing flags pass.
    pub require_single_layered: bool,
    /// Drop forest plots flagged as split by a stand border. Missing flags pass.
    pub exclude_split_plots: bool,
}

impl Default for ModelingRules {
    fn default() -> Self {
        ModelingRules {
            min_trees: weibull::MIN_TREES,
            require_single_layered: true,
            exclude_split_plots: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ExclusionRule {
    NonForest,
    TooFewTrees,
    NotSingleLayered,
    SplitPlot,
}

impl ExclusionRule {
    pub fn as_str(self) -> &'static str {
        match self {
            ExclusionRule::NonForest => "non_forest",
            ExclusionRule::TooFewTrees => "too_few_trees",
            ExclusionRule::NotSingleLayered => "not_single_layered",
            ExclusionRule::SplitPlot => "split_plot",
        }
    }
}

/// The first rule a plot fails for modeling, if any.
pub fn modeling_exclusion(plot: &PlotRecord, rules: &ModelingRules) -> Option<ExclusionRule> {
    if !plot.is_forest {
        Some(ExclusionRule::NonForest)
    } else if plot.trees.len() < rules.min_trees {
        Some(ExclusionRule::TooFewTrees)
    } else if rules.require_single_layered && plot.single_layered == Some(false) {
        Some(ExclusionRule::NotSingleLayered)
    } else if rules.exclude_split_plots && plot.split_plot == Some(true) {
        Some(ExclusionRule::SplitPlot)
    } else {
        None
    }
}

pub fn modeling_set(plots: &[PlotRecord], rules: &ModelingRules) -> Vec<PlotRecord> {
    plots
        .iter()
        .filter(|p| modeling_exclusion(p, rules).is_none())
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationSummary {
    pub plots: usize,
    pub forest_plots: usize,
    pub trees: usize,
    pub estimation_plots: usize,
    pub modeling_plots: usize,
    /// Plots dropped from the modeling set, by first failing rule.
    pub exclusions: BTreeMap<ExclusionRule, usize>,
}

/// Summarises a loaded dataset. Row-level problems are caught while reading;
/// this reports how the modeling rules partition the remaining plots.
pub fn validate_dataset(plots: &[PlotRecord], rules: &ModelingRules) -> Result<ValidationSummary> {
    check_loo_contract(plots)?;
    estimation::common_inclusion_probability(plots)?;
    let mut exclusions = BTreeMap::new();
    for p in plots {
        if let Some(rule) = modeling_exclusion(p, rules) {
            *exclusions.entry(rule).or_insert(0) += 1;
        }
    }
    let excluded: usize = exclusions.values().sum();
    Ok(ValidationSummary {
        plots: plots.len(),
        forest_plots: plots.iter().filter(|p| p.is_forest).count(),
        trees: plots.iter().map(|p| p.trees.len()).sum(),
        estimation_plots: plots.len(),
        modeling_plots: plots.len() - excluded,
        exclusions,
    })
}

/// Rejects data in which a held-out plot could reappear among its own
/// references: repeated plot ids, or two plots with identical metrics and
/// identical non-empty tree lists.
pub fn check_loo_contract(plots: &[PlotRecord]) -> Result<()> {
    let mut ids = HashMap::new();
    let mut contents: HashMap<String, &str> = HashMap::new();
    for p in plots {
        if ids.insert(p.plot_id.as_str(), ()).is_some() {
            return Err(Error::LooViolation(p.plot_id.clone()));
        }
        if p.trees.is_empty() {
            continue;
        }
        let key = content_key(p);
        if let Some(first) = contents.insert(key, &p.plot_id) {
            return Err(Error::LooViolation(format!("{} (same content as `{first}`)", p.plot_id)));
        }
    }
    Ok(())
}

fn content_key(p: &PlotRecord) -> String {
    let mut key = String::new();
    for (k, v) in &p.metrics {
        key.push_str(&format!("{k}={:x};", v.to_bits()));
    }
    for t in &p.trees {
        key.push_str(&format!("{:x}/{},", t.dbh.to_bits(), t.species));
    }
    key
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Ppm,
    Glm,
    Knn,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Ppm, Method::Glm, Method::Knn];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ppm => "ppm",
            Method::Glm => "glm",
            Method::Knn => "knn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ppm" => Ok(Method::Ppm),
            "glm" => Ok(Method::Glm),
            "knn" | "nn" | "msn" => Ok(Method::Knn),
            other => Err(Error::Config(format!("unknown method `{other}`; expected ppm, glm or knn"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Predictor sets and tuning for the three methods.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSettings {
    pub scale_vars: Vec<String>,
    pub shape_vars: Vec<String>,
    pub knn_vars: Vec<String>,
    pub knn: KnnConfig,
    pub glm: GlmOptions,
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl Default for MethodSettings {
    fn default() -> Self {
        MethodSettings {
            scale_vars: names(&["proph_first", "hskew_first", "h95_all"]),
            shape_vars: names(&["proph_first", "hskew_first", "hcv_first"]),
            knn_vars: names(&["hmax_all", "hmean_first", "h95_all", "proph_first", "hskew_last"]),
            knn: KnnConfig::default(),
            glm: GlmOptions {
                intervals: false,
                ..GlmOptions::default()
            },
        }
    }
}

/// Leave-one-out stems/ha per class for every plot, in input order.
///
/// Parametric predictions are scaled to each plot's observed stem count. NN
/// predictions are smoothed and rescaled to the observed count, so all three
/// methods are compared on the shape of the distribution.
pub fn loo_histograms(
    plots: &[PlotRecord],
    method: Method,
    settings: &MethodSettings,
    exec: Execution,
) -> Result<Vec<DbhHistogram>> {
    check_loo_contract(plots)?;
    let params = match method {
        Method::Ppm => {
            let fits = ppm::fit_plots(plots, exec);
            ppm::loo_predict_params(plots, &fits, &settings.scale_vars, &settings.shape_vars, exec)?
        }
        Method::Glm => {
            glm::loo_predict_params(plots, &settings.scale_vars, &settings.shape_vars, &settings.glm, exec)?
        }
        Method::Knn => {
            let imputed = knn::loo_impute(plots, &settings.knn_vars, settings.knn, exec)?;
            return Ok(imputed
                .iter()
                .zip(plots)
                .map(|(imp, p)| knn::smooth(&imp.histogram).rescaled_to(p.stems_per_ha()))
                .collect());
        }
    };
    params
        .iter()
        .zip(plots)
        .map(|(pp, p)| weibull::to_histogram(&pp.params, p.stems_per_ha()))
        .collect()
}

/// Plot indices of each species stratum. Plots with no dominant species join
/// every stratum; `primary` marks the stratum whose prediction they keep
/// (spruce for those without a species).
#[derive(Debug, Clone, PartialEq)]
pub struct Stratum {
    pub species: Species,
    pub members: Vec<usize>,
    pub primary: Vec<bool>,
}

pub fn strata(plots: &[PlotRecord]) -> Vec<Stratum> {
    Species::ALL
        .iter()
        .map(|&s| {
            let mut members = Vec::new();
            let mut primary = Vec::new();
            for (i, p) in plots.iter().enumerate() {
                match p.dominant_species {
                    Some(d) if d == s => {
                        members.push(i);
                        primary.push(true);
                    }
                    None => {
                        members.push(i);
                        primary.push(s == Species::Spruce);
                    }
                    _ => {}
                }
            }
            Stratum {
                species: s,
                members,
                primary,
            }
        })
        .collect()
}

/// [`loo_histograms`] run separately within each species stratum.
pub fn loo_histograms_stratified(
    plots: &[PlotRecord],
    method: Method,
    settings: &MethodSettings,
    exec: Execution,
) -> Result<Vec<DbhHistogram>> {
    let mut out: Vec<Option<DbhHistogram>> = vec![None; plots.len()];
    for stratum in strata(plots) {
        if stratum.members.is_empty() {
            continue;
        }
        let subset: Vec<PlotRecord> = stratum.members.iter().map(|&i| plots[i].clone()).collect();
        let hists = loo_histograms(&subset, method, settings, exec)?;
        for ((&i, &primary), h) in stratum.members.iter().zip(&stratum.primary).zip(hists) {
            if primary {
                out[i] = Some(h);
            }
        }
    }
    Ok(out.into_iter().map(|h| h.expect("every plot has a primary stratum")).collect())
}

/// Accuracy of one method in one class, stems/ha.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassAccuracy {
    pub class: DbhClass,
    pub observed_mean: f64,
    pub rmse: f64,
    pub md: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub method: Method,
    pub n_plots: usize,
    /// Classes 6–50, overflow, then "All".
    pub rows: Vec<ClassAccuracy>,
    /// Σ over classes 6–50 of |Σ over plots (observed − predicted)|, in stems
    /// counted on the plots.
    pub summed_abs_residual: f64,
    /// Σ over plots and classes 6–50 of |observed − predicted|, in stems.
    pub plotwise_abs_residual: f64,
}

/// Compares observed per-hectare histograms with predictions.
pub fn evaluate(
    method: Method,
    plots: &[PlotRecord],
    predicted: &[DbhHistogram],
) -> Result<EvaluationReport> {
    if plots.len() != predicted.len() {
        return Err(Error::LengthMismatch {
            observed: plots.len(),
            predicted: predicted.len(),
        });
    }
    if plots.is_empty() {
        return Err(Error::Empty("evaluation needs at least one plot"));
    }
    let observed: Vec<DbhHistogram> = plots.iter().map(|p| p.histogram_per_ha()).collect();
    let rows = DbhClass::report_rows()
        .into_iter()
        .map(|class| {
            let y: Vec<f64> = observed.iter().map(|h| class.value(h)).collect();
            let yh: Vec<f64> = predicted.iter().map(|h| class.value(h)).collect();
            Ok(ClassAccuracy {
                class,
                observed_mean: stats::mean(&y),
                rmse: stats::rmse(&y, &yh)?,
                md: stats::mean_difference(&y, &yh)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let to_stems: Vec<f64> = plots.iter().map(|p| 1.0 / p.per_ha_factor()).collect();
    let mut class_sums = [0.0; NUM_CLASSES];
    let mut plotwise = 0.0;
    for ((o, p), f) in observed.iter().zip(predicted).zip(&to_stems) {
        for (c, sum) in class_sums.iter_mut().enumerate() {
            let r = (o.counts[c] - p.counts[c]) * f;
            *sum += r;
            plotwise += r.abs();
        }
    }
    Ok(EvaluationReport {
        method,
        n_plots: plots.len(),
        rows,
        summed_abs_residual: class_sums.iter().map(|s| s.abs()).sum(),
        plotwise_abs_residual: plotwise,
    })
}

/// Per-plot predictions for estimation, as seen through the map layers.
///
/// One NN model is fitted per species stratum over the forest plots of the
/// stratum (plots without a species join all strata). A plot mapped to a
/// stratum it belongs to gets its leave-one-out imputation there; any other
/// mapped-forest plot is imputed by that stratum's model, which does not hold
/// it as a reference. Mapped non-forest plots are predicted as zero.
pub fn knn_estimation_predictions(
    plots: &[PlotRecord],
    layers: &ClassificationLayers,
    settings: &MethodSettings,
    stratify: bool,
    exec: Execution,
) -> Result<BTreeMap<String, DbhHistogram>> {
    check_loo_contract(plots)?;
    let forest: Vec<usize> = (0..plots.len()).filter(|&i| plots[i].is_forest).collect();
    let groups: Vec<(Option<Species>, Vec<usize>)> = if stratify {
        Species::ALL
            .iter()
            .map(|&s| {
                let m = forest
                    .iter()
                    .copied()
                    .filter(|&i| plots[i].dominant_species.is_none_or(|d| d == s))
                    .collect();
                (Some(s), m)
            })
            .collect()
    } else {
        vec![(None, forest)]
    };

    let mut models = Vec::with_capacity(groups.len());
    for (species, members) in &groups {
        let refs: Vec<PlotRecord> = members.iter().map(|&i| plots[i].clone()).collect();
        let loo = knn::loo_impute(&refs, &settings.knn_vars, settings.knn, exec)?;
        let loo: HashMap<String, DbhHistogram> = refs
            .iter()
            .zip(&loo)
            .map(|(p, imp)| (p.plot_id.clone(), imp.histogram))
            .collect();
        let model = knn::fit(&refs, &settings.knn_vars, settings.knn)?;
        models.push((*species, loo, model));
    }

    let predict = |p: &PlotRecord, s: Species| -> Result<DbhHistogram> {
        let (_, loo, model) = models
            .iter()
            .find(|(sp, _, _)| sp.is_none() || *sp == Some(s))
            .expect("a model exists for every species");
        let raw = match loo.get(&p.plot_id) {
            Some(h) => *h,
            None => model.impute(p)?.histogram,
        };
        Ok(knn::smooth(&raw))
    };
    estimation::apply_classification(plots, layers, predict)
}

/// NN-assisted estimation of the per-class totals.
pub fn run_estimation(
    plots: &[PlotRecord],
    layers: &ClassificationLayers,
    settings: &MethodSettings,
    stratify: bool,
    exec: Execution,
) -> Result<EstimateReport> {
    let preds = knn_estimation_predictions(plots, layers, settings, stratify, exec)?;
    estimation::estimate(plots, &preds, None)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// One row per (method, class) plus per-method residual sums.
pub fn evaluation_csv(reports: &[EvaluationReport]) -> Result<Vec<u8>> {
    let header = names(&["method", "class", "n_plots", "observed_mean", "rmse", "md", "relative_rmse_pct"]);
    let rows = reports.iter().flat_map(|r| {
        r.rows.iter().map(move |a| {
            let rel = (a.observed_mean > 0.0).then(|| 100.0 * a.rmse / a.observed_mean);
            vec![
                r.method.to_string(),
                a.class.label(),
                r.n_plots.to_string(),
                a.observed_mean.to_string(),
                a.rmse.to_string(),
                a.md.to_string(),
                fmt_opt(rel),
            ]
        })
    });
    crate::io::to_csv_bytes(&header, rows)
}

pub fn residual_sums_csv(reports: &[EvaluationReport]) -> Result<Vec<u8>> {
    let header = names(&["method", "n_plots", "summed_abs_residual_stems", "plotwise_abs_residual_stems"]);
    let rows = reports.iter().map(|r| {
        vec![
            r.method.to_string(),
            r.n_plots.to_string(),
            r.summed_abs_residual.to_string(),
            r.plotwise_abs_residual.to_string(),
        ]
    });
    crate::io::to_csv_bytes(&header, rows)
}

pub fn estimate_csv(report: &EstimateReport) -> Result<Vec<u8>> {
    let header = names(&[
        "class",
        "n_plots",
        "direct_total",
        "direct_variance",
        "half_ci_direct_pct",
        "synthetic_total",
        "correction",
        "ma_total",
        "ma_variance",
        "half_ci_ma_pct",
        "relative_efficiency",
    ]);
    let rows = report.rows.iter().map(|r| {
        vec![
            r.class.label(),
            report.n_plots.to_string(),
            r.direct_total.to_string(),
            r.direct_variance.to_string(),
            fmt_opt(r.half_ci_direct_pct),
            r.synthetic_total.to_string(),
            r.correction.to_string(),
            r.ma_total.to_string(),
            r.ma_variance.to_string(),
            fmt_opt(r.half_ci_ma_pct),
            r.relative_efficiency.to_string(),
        ]
    });
    crate::io::to_csv_bytes(&header, rows)
}

/// Plain-text table in the layout of a printed inventory report.
pub fn estimate_table(report: &EstimateReport) -> String {
    let mut s = format!(
        "{:>7} {:>14} {:>9} {:>14} {:>9} {:>6}\n",
        "DBH", "direct", "CI95 %", "MA", "CI95 %", "RE"
    );
    let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
    for r in &report.rows {
        s.push_str(&format!(
            "{:>7} {:>14.0} {:>9} {:>14.0} {:>9} {:>6.2}\n",
            r.class.label(),
            r.direct_total,
            pct(r.half_ci_direct_pct),
            r.ma_total,
            pct(r.half_ci_ma_pct),
            r.relative_efficiency
        ));
    }
    s
}
