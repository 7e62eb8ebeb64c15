//! Parameter prediction: per-plot Weibull fits, then one mixed model each for
//! the scale and the shape, grouped by ALS project.

use crate::error::{Error, Result};
use crate::histogram::DbhHistogram;
use crate::lmm::{LmmFit, LmmProblem};
use crate::par::{self, Execution};
use crate::types::{MetricMatrix, PlotRecord};
use crate::weibull::{self, WeibullParams, TRUNCATION_CM};

pub const MIN_SHAPE: f64 = 0.05;
pub const SCALE_MARGIN_CM: f64 = 0.1;

/// Result of fitting one plot's observed DBHs.
#[derive(Debug, Clone, PartialEq)]
pub enum PlotFit {
    Fitted(WeibullParams),
    Failed(String),
}

impl PlotFit {
    pub fn params(&self) -> Option<WeibullParams> {
        match self {
            PlotFit::Fitted(p) => Some(*p),
            PlotFit::Failed(_) => None,
        }
    }
}

/// Per-plot ML fits in input order.
pub fn fit_plots(plots: &[PlotRecord], exec: Execution) -> Vec<PlotFit> {
    par::map(exec, plots, |p| match weibull::fit_ml(&p.trees) {
        Ok(f) => PlotFit::Fitted(f.params),
        Err(e) => PlotFit::Failed(e.to_string()),
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingReport {
    pub plots_supplied: usize,
    pub plots_used: usize,
    /// Plot id and reason for every plot left out of the regression.
    pub excluded: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpmModel {
    pub scale_fit: LmmFit,
    pub shape_fit: LmmFit,
    pub scale_vars: Vec<String>,
    pub shape_vars: Vec<String>,
    pub report: TrainingReport,
}

/// A predicted parameter pair; `clamped` is set when the linear prediction
/// fell outside the valid region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictedParams {
    pub params: WeibullParams,
    pub raw_shape: f64,
    pub raw_scale: f64,
    pub clamped: bool,
}

/// Training data ready for the two regressions.
struct Responses {
    scale: Vec<f64>,
    shape: Vec<f64>,
    groups: Vec<String>,
    rows: Vec<usize>,
}

fn collect_responses(plots: &[PlotRecord], fits: &[PlotFit], skip: Option<usize>) -> (Responses, TrainingReport) {
    let mut r = Responses {
        scale: Vec::new(),
        shape: Vec::new(),
        groups: Vec::new(),
        rows: Vec::new(),
    };
    let mut report = TrainingReport {
        plots_supplied: plots.len() - usize::from(skip.is_some()),
        ..Default::default()
    };
    for (i, (plot, fit)) in plots.iter().zip(fits).enumerate() {
        if Some(i) == skip {
            continue;
        }
        match fit {
            PlotFit::Fitted(p) => {
                r.scale.push(p.scale);
                r.shape.push(p.shape);
                r.groups.push(plot.project_id.clone());
                r.rows.push(i);
            }
            PlotFit::Failed(reason) => report.excluded.push((plot.plot_id.clone(), reason.clone())),
        }
    }
    report.plots_used = r.rows.len();
    (r, report)
}

fn design(plots: &[PlotRecord], rows: &[usize], vars: &[String]) -> Result<MetricMatrix> {
    let mut data = Vec::with_capacity(rows.len() * vars.len());
    let mut ids = Vec::with_capacity(rows.len());
    for &i in rows {
        data.extend(plots[i].metric_vector(vars)?);
        ids.push(plots[i].plot_id.clone());
    }
    MetricMatrix::new(vars.to_vec(), ids, data)
}

fn check_vars(scale_vars: &[String], shape_vars: &[String]) -> Result<()> {
    if scale_vars.is_empty() || shape_vars.is_empty() {
        return Err(Error::Validation("both parameter models need at least one predictor".into()));
    }
    Ok(())
}

/// Train from precomputed per-plot fits, optionally holding out one plot.
pub fn train_from_fits(
    plots: &[PlotRecord],
    fits: &[PlotFit],
    scale_vars: &[String],
    shape_vars: &[String],
    hold_out: Option<usize>,
) -> Result<PpmModel> {
    check_vars(scale_vars, shape_vars)?;
    if fits.len() != plots.len() {
        return Err(Error::LengthMismatch {
            observed: plots.len(),
            predicted: fits.len(),
        });
    }
    let (resp, report) = collect_responses(plots, fits, hold_out);
    if resp.rows.is_empty() {
        return Err(Error::Validation(format!(
            "all {} per-plot Weibull fits failed",
            report.plots_supplied
        )));
    }
    let scale_fit = LmmProblem::new(&resp.scale, &design(plots, &resp.rows, scale_vars)?, &resp.groups)?.fit()?;
    let shape_fit = LmmProblem::new(&resp.shape, &design(plots, &resp.rows, shape_vars)?, &resp.groups)?.fit()?;
    Ok(PpmModel {
        scale_fit,
        shape_fit,
        scale_vars: scale_vars.to_vec(),
        shape_vars: shape_vars.to_vec(),
        report,
    })
}

pub fn train(plots: &[PlotRecord], scale_vars: &[String], shape_vars: &[String]) -> Result<PpmModel> {
    let fits = fit_plots(plots, Execution::default());
    train_from_fits(plots, &fits, scale_vars, shape_vars, None)
}

/// Clamp a linear prediction into the valid parameter region.
pub fn clamp_params(shape: f64, scale: f64) -> PredictedParams {
    let min_scale = TRUNCATION_CM + SCALE_MARGIN_CM;
    let c = if shape > 0.0 && shape.is_finite() { shape } else { MIN_SHAPE };
    let b = if scale > TRUNCATION_CM && scale.is_finite() { scale } else { min_scale };
    PredictedParams {
        params: WeibullParams { shape: c, scale: b, truncation: TRUNCATION_CM },
        raw_shape: shape,
        raw_scale: scale,
        clamped: c != shape || b != scale,
    }
}

impl PpmModel {
    pub fn predict_params(&self, plot: &PlotRecord) -> Result<PredictedParams> {
        let group = Some(plot.project_id.as_str());
        let scale = self.scale_fit.predict(&plot.metrics, group)?;
        let shape = self.shape_fit.predict(&plot.metrics, group)?;
        Ok(clamp_params(shape, scale))
    }

    pub fn predict_distribution(&self, plot: &PlotRecord, total_stems: f64) -> Result<DbhHistogram> {
        let p = self.predict_params(plot)?;
        weibull::to_histogram(&p.params, total_stems)
    }
}

pub fn predict_distribution(model: &PpmModel, plot: &PlotRecord, total_stems: f64) -> Result<DbhHistogram> {
    model.predict_distribution(plot, total_stems)
}

/// Leave-one-out parameter predictions. Plot `i` never enters the regression
/// that predicts it; its own Weibull fit is dropped from the training pool.
pub fn loo_predict_params(
    plots: &[PlotRecord],
    fits: &[PlotFit],
    scale_vars: &[String],
    shape_vars: &[String],
    exec: Execution,
) -> Result<Vec<PredictedParams>> {
    par::try_map_range(exec, plots.len(), |i| {
        train_from_fits(plots, fits, scale_vars, shape_vars, Some(i))?.predict_params(&plots[i])
    })
}
