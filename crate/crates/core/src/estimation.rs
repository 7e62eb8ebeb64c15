//! Direct and model-assisted estimation of study-area stem totals per DBH
//! class.
//!
//! The observation y_i is stems per hectare on plot i (zero on non-forest
//! plots) and π is the per-hectare inclusion probability, so t̂ = Σ y_i/π is
//! a study-area total. The sample variance of the mean, Σ(y − ȳ)²/(n(n−1)),
//! is scaled by (n/π)² to the total scale; relative quantities (half CI in
//! percent, relative efficiency) are unaffected by that factor.
//!
//! Sums run over plots sorted by id, so results do not depend on record
//! order.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::histogram::{DbhClass, DbhHistogram};
use crate::types::{PlotRecord, Species};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.96;

/// Relative tolerance when checking that all plots share one π.
const PI_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectEstimate {
    pub total: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaEstimate {
    /// t̂_MA = synthetic + correction.
    pub total: f64,
    pub variance: f64,
    /// Synthetic total t̃.
    pub synthetic: f64,
    /// Correction term t̂_C = Σ e_i/π.
    pub correction: f64,
}

fn check_pi(pi: f64) -> Result<()> {
    if pi > 0.0 && pi <= 1.0 && pi.is_finite() {
        Ok(())
    } else {
        Err(Error::Validation(format!("inclusion probability must lie in (0, 1], got {pi}")))
    }
}

/// Horvitz–Thompson total and its variance for equal inclusion probability.
pub fn direct_estimate(y: &[f64], pi: f64) -> Result<DirectEstimate> {
    check_pi(pi)?;
    let n = y.len();
    if n < 2 {
        return Err(Error::Validation(format!(
            "variance needs at least 2 plots, got {n}"
        )));
    }
    let nf = n as f64;
    let sum: f64 = y.iter().sum();
    let mean = sum / nf;
    let ss: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let expansion = nf / pi;
    Ok(DirectEstimate {
        total: sum / pi,
        variance: expansion * expansion * ss / (nf * (nf - 1.0)),
    })
}

/// Model-assisted total from observations and predictions.
///
/// Without `synthetic`, t̃ is the sample-based Σ ŷ_i/π, in which case the
/// total equals the direct total and only the variance differs. A wall-to-wall
/// synthetic total replaces it when supplied.
pub fn ma_estimate(y: &[f64], y_hat: &[f64], pi: f64, synthetic: Option<f64>) -> Result<MaEstimate> {
    if y.len() != y_hat.len() {
        return Err(Error::LengthMismatch {
            observed: y.len(),
            predicted: y_hat.len(),
        });
    }
    let residuals: Vec<f64> = y.iter().zip(y_hat).map(|(a, b)| a - b).collect();
    let r = direct_estimate(&residuals, pi)?;
    let synthetic = synthetic.unwrap_or_else(|| y_hat.iter().sum::<f64>() / pi);
    Ok(MaEstimate {
        total: synthetic + r.total,
        variance: r.variance,
        synthetic,
        correction: r.total,
    })
}

/// Var(t̂)/Var(t̂_MA). A zero MA variance gives +∞, or 1 when both are zero.
pub fn relative_efficiency(var_direct: f64, var_ma: f64) -> f64 {
    if var_ma > 0.0 {
        var_direct / var_ma
    } else if var_direct > 0.0 {
        f64::INFINITY
    } else {
        1.0
    }
}

/// Half width of the 95% interval as a percentage of `total`; `None` when the
/// total is not positive.
pub fn half_ci_pct(total: f64, variance: f64) -> Option<f64> {
    (total > 0.0).then(|| 100.0 * Z_95 * variance.max(0.0).sqrt() / total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRow {
    pub class: DbhClass,
    pub direct_total: f64,
    pub direct_variance: f64,
    pub ma_total: f64,
    pub ma_variance: f64,
    pub synthetic_total: f64,
    pub correction: f64,
    pub half_ci_direct_pct: Option<f64>,
    /// Relative to the direct total, so that RE equals the squared ratio of
    /// the two half widths.
    pub half_ci_ma_pct: Option<f64>,
    pub relative_efficiency: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport {
    pub n_plots: usize,
    pub inclusion_probability: f64,
    /// Classes 6–50 cm, overflow, then "All".
    pub rows: Vec<EstimateRow>,
    /// Sum of the direct totals over the classes and overflow.
    pub class_sum_direct: f64,
}

impl EstimateReport {
    pub fn row(&self, class: DbhClass) -> Option<&EstimateRow> {
        self.rows.iter().find(|r| r.class == class)
    }
}

/// The π shared by all plots.
pub fn common_inclusion_probability(plots: &[PlotRecord]) -> Result<f64> {
    let first = plots.first().ok_or(Error::Empty("estimation dataset"))?.inclusion_probability;
    check_pi(first)?;
    if let Some(p) = plots
        .iter()
        .find(|p| (p.inclusion_probability - first).abs() > PI_TOLERANCE * first)
    {
        return Err(Error::Validation(format!(
            "plot `{}` has inclusion probability {} but the dataset uses {first}",
            p.plot_id, p.inclusion_probability
        )));
    }
    Ok(first)
}

/// Direct and model-assisted estimates for every report class.
///
/// `predictions` maps plot id to predicted stems per hectare. Every forest
/// plot needs an entry; a missing non-forest plot is predicted as zero.
/// `synthetic` optionally supplies wall-to-wall synthetic totals.
pub fn estimate(
    plots: &[PlotRecord],
    predictions: &BTreeMap<String, DbhHistogram>,
    synthetic: Option<&DbhHistogram>,
) -> Result<EstimateReport> {
    let pi = common_inclusion_probability(plots)?;
    let mut order: Vec<&PlotRecord> = plots.iter().collect();
    order.sort_by(|a, b| a.plot_id.cmp(&b.plot_id));
    if let Some(w) = order.windows(2).find(|w| w[0].plot_id == w[1].plot_id) {
        return Err(Error::Validation(format!("duplicate plot id `{}`", w[0].plot_id)));
    }

    let mut missing = Vec::new();
    let mut observed = Vec::with_capacity(order.len());
    let mut predicted = Vec::with_capacity(order.len());
    for p in &order {
        observed.push(if p.is_forest {
            p.histogram_per_ha()
        } else {
            DbhHistogram::zeros()
        });
        match predictions.get(&p.plot_id) {
            Some(h) => predicted.push(*h),
            None if p.is_forest => missing.push(p.plot_id.clone()),
            None => predicted.push(DbhHistogram::zeros()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::ValidationReport {
            count: missing.len(),
            messages: missing
                .into_iter()
                .map(|id| format!("no prediction for forest plot `{id}`"))
                .collect(),
        });
    }

    let mut rows = Vec::new();
    for class in DbhClass::report_rows() {
        let y: Vec<f64> = observed.iter().map(|h| class.value(h)).collect();
        let y_hat: Vec<f64> = predicted.iter().map(|h| class.value(h)).collect();
        let d = direct_estimate(&y, pi)?;
        let ma = ma_estimate(&y, &y_hat, pi, synthetic.map(|s| class.value(s)))?;
        rows.push(EstimateRow {
            class,
            direct_total: d.total,
            direct_variance: d.variance,
            ma_total: ma.total,
            ma_variance: ma.variance,
            synthetic_total: ma.synthetic,
            correction: ma.correction,
            half_ci_direct_pct: half_ci_pct(d.total, d.variance),
            half_ci_ma_pct: half_ci_pct(d.total, ma.variance),
            relative_efficiency: relative_efficiency(d.variance, ma.variance),
        });
    }
    let class_sum_direct = rows
        .iter()
        .filter(|r| r.class != DbhClass::All)
        .map(|r| r.direct_total)
        .sum();
    Ok(EstimateReport {
        n_plots: order.len(),
        inclusion_probability: pi,
        rows,
        class_sum_direct,
    })
}

/// Map labels for one plot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerEntry {
    pub mapped_forest: bool,
    pub mapped_species: Option<Species>,
}

/// Forest-mask and species-map labels per plot id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassificationLayers {
    pub entries: BTreeMap<String, LayerEntry>,
}

impl ClassificationLayers {
    /// Layers that reproduce the field truth. Forest plots without a
    /// dominant species are assigned to spruce.
    pub fn truth(plots: &[PlotRecord]) -> Self {
        let entries = plots
            .iter()
            .map(|p| {
                let entry = LayerEntry {
                    mapped_forest: p.is_forest,
                    mapped_species: p
                        .is_forest
                        .then(|| p.dominant_species.unwrap_or(Species::Spruce)),
                };
                (p.plot_id.clone(), entry)
            })
            .collect();
        ClassificationLayers { entries }
    }

    /// Share of plots whose mask label matches the field truth.
    pub fn mask_accuracy(&self, plots: &[PlotRecord]) -> Option<f64> {
        let hits: Vec<bool> = plots
            .iter()
            .filter_map(|p| self.entries.get(&p.plot_id).map(|e| e.mapped_forest == p.is_forest))
            .collect();
        (!hits.is_empty()).then(|| hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64)
    }
}

/// Predictions as seen through the map layers: zero where the mask says
/// non-forest, otherwise the model of the mapped species stratum.
///
/// `predict(plot, stratum)` must honour the leave-one-out contract.
pub fn apply_classification<F>(
    plots: &[PlotRecord],
    layers: &ClassificationLayers,
    predict: F,
) -> Result<BTreeMap<String, DbhHistogram>>
where
    F: Fn(&PlotRecord, Species) -> Result<DbhHistogram>,
{
    let mut out = BTreeMap::new();
    for p in plots {
        let entry = layers.entries.get(&p.plot_id).ok_or_else(|| {
            Error::Validation(format!("no classification layer entry for plot `{}`", p.plot_id))
        })?;
        let h = if entry.mapped_forest {
            let species = entry.mapped_species.ok_or_else(|| {
                Error::Validation(format!(
                    "plot `{}` is mapped as forest but has no mapped species",
                    p.plot_id
                ))
            })?;
            predict(p, species)?
        } else {
            DbhHistogram::zeros()
        };
        out.insert(p.plot_id.clone(), h);
    }
    Ok(out)
}
