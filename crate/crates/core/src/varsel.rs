//! Simulated-annealing search over fixed-size predictor subsets.
//!
//! A move swaps one variable in the subset for one outside it, both chosen
//! uniformly. Worse subsets are accepted when a uniform draw u satisfies
//! u < exp(−Δ/T). The temperature is multiplied by the cooling factor after
//! every `iterations_per_temperature` proposals until it drops below the
//! minimum.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::histogram::NUM_CLASSES;
use crate::knn::{self, KnnConfig};
use crate::lmm::LmmProblem;
use crate::par::{self, Execution};
use crate::ppm::PlotFit;
use crate::stats;
use crate::types::{MetricMatrix, PlotRecord};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaConfig {
    pub initial_temperature: f64,
    pub iterations_per_temperature: usize,
    pub cooling_factor: f64,
    pub subset_size: usize,
    pub seed: u64,
    pub min_temperature: f64,
}

impl Default for SaConfig {
    fn default() -> Self {
        SaConfig {
            initial_temperature: 1.0,
            iterations_per_temperature: 30,
            cooling_factor: 0.92,
            subset_size: 3,
            seed: 1,
            min_temperature: 1e-4,
        }
    }
}

impl SaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cooling_factor > 0.0 && self.cooling_factor < 1.0) {
            return Err(Error::Config(format!(
                "cooling factor must lie in (0, 1), got {}",
                self.cooling_factor
            )));
        }
        if !(self.initial_temperature > 0.0 && self.min_temperature > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if self.iterations_per_temperature == 0 || self.subset_size == 0 {
            return Err(Error::Config(
                "iterations per temperature and subset size must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    pub temperature: f64,
    pub subset: Vec<String>,
    pub cost: f64,
    /// Cost change relative to the current state (0 for the start).
    pub delta: f64,
    /// Uniform draw used by the acceptance test.
    pub u: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaResult {
    pub best_subset: Vec<String>,
    pub best_cost: f64,
    pub trace: Vec<TraceEntry>,
    /// Distinct subsets whose cost was computed.
    pub evaluations: usize,
    pub seed: u64,
}

fn names(candidates: &[String], idx: &[usize]) -> Vec<String> {
    let mut v: Vec<usize> = idx.to_vec();
    v.sort_unstable();
    v.into_iter().map(|i| candidates[i].clone()).collect()
}

/// One annealing run. Costs are memoized per subset.
pub fn anneal<F>(candidates: &[String], cost: F, config: &SaConfig) -> Result<SaResult>
where
    F: Fn(&[String]) -> Result<f64>,
{
    config.validate()?;
    let m = config.subset_size;
    if candidates.len() < m {
        return Err(Error::Config(format!(
            "{} candidate variables cannot fill a subset of {m}",
            candidates.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut memo: HashMap<Vec<usize>, f64> = HashMap::new();
    let mut eval = |idx: &[usize]| -> Result<f64> {
        let mut key = idx.to_vec();
        key.sort_unstable();
        if let Some(c) = memo.get(&key) {
            return Ok(*c);
        }
        let subset = names(candidates, &key);
        let c = cost(&subset).map_err(|e| Error::Cost {
            subset: subset.clone(),
            message: e.to_string(),
        })?;
        if !c.is_finite() {
            return Err(Error::Cost {
                subset,
                message: format!("cost is not finite ({c})"),
            });
        }
        memo.insert(key, c);
        Ok(c)
    };

    // Random initial subset by partial Fisher–Yates.
    let mut pool: Vec<usize> = (0..candidates.len()).collect();
    for i in 0..m {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    let mut current: Vec<usize> = pool[..m].to_vec();
    let mut outside: Vec<usize> = pool[m..].to_vec();
    let mut current_cost = eval(&current)?;
    let mut best = (current.clone(), current_cost);
    let mut trace = vec![TraceEntry {
        iteration: 0,
        temperature: config.initial_temperature,
        subset: names(candidates, &current),
        cost: current_cost,
        delta: 0.0,
        u: 0.0,
        accepted: true,
    }];

    let mut temperature = config.initial_temperature;
    let mut iteration = 0;
    while !outside.is_empty() && temperature >= config.min_temperature {
        for _ in 0..config.iterations_per_temperature {
            iteration += 1;
            let i = rng.random_range(0..m);
            let o = rng.random_range(0..outside.len());
            let mut proposal = current.clone();
            proposal[i] = outside[o];
            let c = eval(&proposal)?;
            let delta = c - current_cost;
            let u: f64 = rng.random();
            let accepted = delta <= 0.0 || u < (-delta / temperature).exp();
            trace.push(TraceEntry {
                iteration,
                temperature,
                subset: names(candidates, &proposal),
                cost: c,
                delta,
                u,
                accepted,
            });
            if accepted {
                outside[o] = current[i];
                current = proposal;
                current_cost = c;
                if c < best.1 {
                    best = (current.clone(), c);
                }
            }
        }
        temperature *= config.cooling_factor;
    }
    Ok(SaResult {
        best_subset: names(candidates, &best.0),
        best_cost: best.1,
        trace,
        evaluations: memo.len(),
        seed: config.seed,
    })
}

/// Best of `restarts` runs seeded `seed, seed + 1, …`; ties go to the lower
/// seed.
pub fn select_with_restarts<F>(
    candidates: &[String],
    cost: F,
    config: &SaConfig,
    restarts: usize,
    exec: Execution,
) -> Result<SaResult>
where
    F: Fn(&[String]) -> Result<f64> + Sync + Send,
{
    let runs = all_restarts(candidates, cost, config, restarts, exec)?;
    Ok(runs
        .into_iter()
        .reduce(|a, b| if b.best_cost < a.best_cost { b } else { a })
        .expect("at least one restart"))
}

/// Every restart's result, in seed order.
pub fn all_restarts<F>(
    candidates: &[String],
    cost: F,
    config: &SaConfig,
    restarts: usize,
    exec: Execution,
) -> Result<Vec<SaResult>>
where
    F: Fn(&[String]) -> Result<f64> + Sync + Send,
{
    if restarts == 0 {
        return Err(Error::Config("restarts must be at least 1".into()));
    }
    par::try_map_range(exec, restarts, |r| {
        let cfg = SaConfig {
            seed: config.seed.wrapping_add(r as u64),
            ..*config
        };
        anneal(candidates, &cost, &cfg)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PpmTarget {
    Scale,
    Shape,
}

/// Cost for one PPM parameter model: relative RMSE of leave-one-out
/// predictions of the per-plot fitted parameter, with the variance ratio
/// fixed at each subset's full-data estimate.
pub fn ppm_cost<'a>(
    plots: &'a [PlotRecord],
    fits: &'a [PlotFit],
    target: PpmTarget,
) -> impl Fn(&[String]) -> Result<f64> + Sync + Send + 'a {
    move |subset: &[String]| {
        let mut y = Vec::new();
        let mut groups = Vec::new();
        let mut data = Vec::new();
        let mut ids = Vec::new();
        for (p, f) in plots.iter().zip(fits) {
            if let Some(w) = f.params() {
                y.push(match target {
                    PpmTarget::Scale => w.scale,
                    PpmTarget::Shape => w.shape,
                });
                groups.push(p.project_id.clone());
                data.extend(p.metric_vector(subset)?);
                ids.push(p.plot_id.clone());
            }
        }
        let design = MetricMatrix::new(subset.to_vec(), ids, data)?;
        let problem = LmmProblem::new(&y, &design, &groups)?;
        let pred = problem.loo_predictions_fixed_ratio()?;
        stats::relative_rmse_pct(&y, &pred).map(|r| r / 100.0)
    }
}

/// Cost for k-NN: mean over the DBH classes of the per-class RMSE between
/// observed and leave-one-out imputed stems per hectare.
pub fn knn_cost<'a>(plots: &'a [PlotRecord], config: KnnConfig) -> impl Fn(&[String]) -> Result<f64> + Sync + Send + 'a {
    let observed: Vec<_> = plots.iter().map(PlotRecord::histogram_per_ha).collect();
    move |subset: &[String]| {
        let imputed = knn::loo_impute(plots, subset, config, Execution::Sequential)?;
        Ok(histogram_rmse(&observed, imputed.iter().map(|i| &i.histogram)))
    }
}

/// Mean over the 23 DBH classes of the per-class RMSE.
pub fn histogram_rmse<'a>(
    observed: &[crate::histogram::DbhHistogram],
    predicted: impl Iterator<Item = &'a crate::histogram::DbhHistogram>,
) -> f64 {
    let mut ss = [0.0; NUM_CLASSES];
    let mut n = 0.0;
    for (o, p) in observed.iter().zip(predicted) {
        for (i, s) in ss.iter_mut().enumerate() {
            *s += (o.counts[i] - p.counts[i]).powi(2);
        }
        n += 1.0;
    }
    ss.iter().map(|s| (s / n).sqrt()).sum::<f64>() / NUM_CLASSES as f64
}
