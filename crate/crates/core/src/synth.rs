//! Synthetic inventories with known ground truth.
//!
//! Each plot carries five latent factors (height, cover, vertical structure,
//! intensity, layering). All 69 metrics are noisy linear functions of the
//! factors mapped to natural units, so a handful of metrics carry signal and
//! the rest act as correlated decoys. Weibull parameters follow a log-linear
//! model in the observed metric values plus project and plot noise, and stem
//! counts are negative binomial with a factor-dependent mean.
//!
//! Plot `i` draws from ChaCha8 stream `i` of the configured seed, so output
//! does not depend on scheduling.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::estimation::{ClassificationLayers, LayerEntry};
use crate::par::{self, Execution};
use crate::types::{
    is_known_metric, Metrics, PlotRecord, Species, TreeRecord, DEFAULT_PLOT_AREA_M2, ECHO_CATEGORIES,
    METRIC_BASE_NAMES,
};
use crate::weibull::{self, WeibullParams, TRUNCATION_CM};

pub const N_FACTORS: usize = 5;

/// Scale offset between the two mixture components is twice this.
pub const BIMODAL_HALF_GAP_CM: f64 = 6.0;
/// Generated shapes are floored here; smaller shapes give tails far beyond
/// any plausible stand.
pub const MIN_SHAPE: f64 = 1.0;

/// Standard deviation of the maximum return height around the tallest tree.
const HMAX_NOISE_M: f64 = 0.5;

const PROJECT_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub metric: String,
    pub coefficient: f64,
}

/// Intercept plus metric terms on the log scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLinear {
    pub intercept: f64,
    pub terms: Vec<Term>,
}

impl LogLinear {
    fn new(intercept: f64, terms: &[(&str, f64)]) -> Self {
        LogLinear {
            intercept,
            terms: terms
                .iter()
                .map(|(m, c)| Term {
                    metric: m.to_string(),
                    coefficient: *c,
                })
                .collect(),
        }
    }

    pub fn eval(&self, metrics: &Metrics) -> Result<f64> {
        self.terms.iter().try_fold(self.intercept, |acc, t| {
            let v = metrics
                .get(&t.metric)
                .ok_or_else(|| Error::MissingMetric(t.metric.clone()))?;
            Ok(acc + t.coefficient * v)
        })
    }

    pub fn variables(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.metric.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_plots: usize,
    pub n_projects: usize,
    /// Stand species proportions in the order spruce, pine, deciduous.
    pub species_mix: [f64; 3],
    pub forest_fraction: f64,
    /// Share of forest plots with no trees above the DBH threshold.
    pub young_forest_fraction: f64,
    pub log_scale: LogLinear,
    pub log_shape: LogLinear,
    /// Additive log-scale effect of the stand species (spruce, pine,
    /// deciduous), on top of the metric model.
    pub species_log_scale: [f64; 3],
    /// Additive log-shape effect of the stand species.
    pub species_log_shape: [f64; 3],
    pub sigma_b_project: f64,
    pub sigma_plot: f64,
    pub stem_count_mean: f64,
    /// Negative binomial size parameter; larger is closer to Poisson.
    pub stem_count_dispersion: f64,
    pub mask_error_rate: f64,
    pub species_error_rate: f64,
    pub bimodal_fraction: f64,
    pub plot_area_m2: f64,
    /// Study-area hectares represented by each plot.
    pub hectares_per_plot: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_plots: 8000,
            n_projects: 40,
            species_mix: [0.40, 0.36, 0.24],
            forest_fraction: 0.865,
            young_forest_fraction: 0.02,
            log_scale: LogLinear::new(2.60, &[("proph_first", -1.01), ("hskew_first", -0.16), ("h95_all", 0.06)]),
            log_shape: LogLinear::new(1.98, &[("proph_first", -1.82), ("hskew_first", -0.56), ("hcv_first", 0.04)]),
            species_log_scale: [0.0, 0.10, -0.15],
            species_log_shape: [0.0, 0.20, -0.25],
            sigma_b_project: 0.05,
            sigma_plot: 0.2,
            stem_count_mean: 25.0,
            stem_count_dispersion: 6.0,
            mask_error_rate: 0.08,
            species_error_rate: 0.26,
            bimodal_fraction: 0.1,
            plot_area_m2: DEFAULT_PLOT_AREA_M2,
            hectares_per_plot: 900.0,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let props = [
            ("forest_fraction", self.forest_fraction),
            ("young_forest_fraction", self.young_forest_fraction),
            ("mask_error_rate", self.mask_error_rate),
            ("species_error_rate", self.species_error_rate),
            ("bimodal_fraction", self.bimodal_fraction),
        ];
        for (name, v) in props.into_iter().chain(self.species_mix.iter().map(|v| ("species_mix", *v))) {
            if !(0.0..=1.0).contains(&v) {
                errs.push(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        let mix: f64 = self.species_mix.iter().sum();
        if (mix - 1.0).abs() > 1e-9 {
            errs.push(format!("species_mix must sum to 1, got {mix}"));
        }
        if self.n_projects == 0 {
            errs.push("n_projects must be at least 1".into());
        }
        for (name, v) in [
            ("stem_count_mean", self.stem_count_mean),
            ("stem_count_dispersion", self.stem_count_dispersion),
            ("plot_area_m2", self.plot_area_m2),
            ("hectares_per_plot", self.hectares_per_plot),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                errs.push(format!("{name} must be positive, got {v}"));
            }
        }
        if self.species_log_scale.iter().chain(&self.species_log_shape).any(|v| !v.is_finite()) {
            errs.push("species effects must be finite".into());
        }
        for (name, v) in [("sigma_b_project", self.sigma_b_project), ("sigma_plot", self.sigma_plot)] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!("{name} must be non-negative, got {v}"));
            }
        }
        for t in self.log_scale.terms.iter().chain(&self.log_shape.terms) {
            if !is_known_metric(&t.metric) {
                errs.push(format!("unknown metric `{}` in coefficient set", t.metric));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::ValidationReport {
                count: errs.len(),
                messages: errs,
            })
        }
    }
}

/// Every latent quantity behind one generated plot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotTruth {
    pub plot_id: String,
    pub project_id: String,
    pub is_forest: bool,
    pub young: bool,
    pub stand_species: Option<Species>,
    pub factors: [f64; N_FACTORS],
    pub project_effect_scale: f64,
    pub project_effect_shape: f64,
    pub plot_effect_scale: f64,
    pub plot_effect_shape: f64,
    /// Parameters of the unimodal model (NaN on non-forest and young plots).
    pub shape: f64,
    pub scale: f64,
    pub bimodal: bool,
    pub expected_stems: f64,
    pub n_trees: usize,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub plots: Vec<PlotRecord>,
    pub layers: ClassificationLayers,
    pub truth: Vec<PlotTruth>,
}

/// Loadings of each base metric on the five factors, before normalization.
const LOADINGS: [[f64; N_FACTORS]; 23] = [
    [0.3, 0.1, 0.0, 0.0, -0.3],   // hmin
    [0.95, 0.0, 0.1, 0.0, 0.1],   // hmax
    [0.85, 0.2, -0.3, 0.0, -0.2], // hmean
    [0.6, 0.0, 0.2, 0.0, 0.5],    // hvar
    [0.0, -0.2, 0.5, 0.0, 0.7],   // hcv
    [0.0, -0.1, 0.8, 0.0, 0.4],   // hskew
    [0.0, 0.0, 0.5, 0.0, -0.4],   // hkurt
    [0.5, 0.3, -0.4, 0.0, -0.4],  // h10
    [0.65, 0.25, -0.35, 0.0, -0.3],
    [0.8, 0.2, -0.3, 0.0, -0.2],
    [0.9, 0.1, -0.15, 0.0, -0.1],
    [0.93, 0.05, -0.05, 0.0, 0.0],
    [0.95, 0.0, 0.0, 0.0, 0.05], // h95
    [0.1, 0.9, 0.0, 0.0, 0.0],   // d0
    [0.1, 0.8, -0.2, 0.0, 0.2],
    [0.2, 0.6, -0.4, 0.0, 0.1],
    [0.2, 0.4, -0.6, 0.0, -0.1],
    [0.1, 0.2, -0.7, 0.0, -0.2],
    [0.0, 0.1, -0.6, 0.0, -0.2], // d9
    [0.0, 0.0, 0.0, 0.8, 0.0],   // ivar
    [0.0, 0.1, 0.0, 0.7, 0.1],   // icv
    [0.0, -0.4, 0.0, 0.6, 0.0],  // igratio
    [0.2, 0.9, 0.0, 0.0, 0.0],   // proph
];

enum Unit {
    /// max(lo, mean + sd·s)
    Linear { mean: f64, sd: f64, lo: f64 },
    /// logistic(mean + sd·s)
    Proportion { mean: f64, sd: f64 },
}

fn unit(base: usize) -> Unit {
    use Unit::*;
    match METRIC_BASE_NAMES[base] {
        "hmin" => Linear { mean: 0.4, sd: 0.3, lo: 0.0 },
        "hmax" => Linear { mean: 19.0, sd: 5.0, lo: 0.0 },
        "hmean" => Linear { mean: 8.5, sd: 3.2, lo: 0.0 },
        "hvar" => Linear { mean: 25.0, sd: 12.0, lo: 0.1 },
        "hcv" => Linear { mean: 0.45, sd: 0.12, lo: 0.01 },
        "hskew" => Linear { mean: -0.1, sd: 0.5, lo: f64::NEG_INFINITY },
        "hkurt" => Linear { mean: 2.8, sd: 0.8, lo: 1.0 },
        "h10" => Linear { mean: 3.0, sd: 2.0, lo: 0.0 },
        "h25" => Linear { mean: 5.5, sd: 2.8, lo: 0.0 },
        "h50" => Linear { mean: 8.5, sd: 3.5, lo: 0.0 },
        "h75" => Linear { mean: 11.0, sd: 3.8, lo: 0.0 },
        "h90" => Linear { mean: 13.5, sd: 4.2, lo: 0.0 },
        "h95" => Linear { mean: 15.0, sd: 4.5, lo: 0.0 },
        "d0" => Proportion { mean: 1.5, sd: 0.8 },
        "d2" => Proportion { mean: 0.8, sd: 0.8 },
        "d4" => Proportion { mean: 0.2, sd: 0.8 },
        "d6" => Proportion { mean: -0.5, sd: 0.8 },
        "d8" => Proportion { mean: -1.5, sd: 0.8 },
        "d9" => Proportion { mean: -2.2, sd: 0.8 },
        "ivar" => Linear { mean: 400.0, sd: 150.0, lo: 1.0 },
        "icv" => Linear { mean: 0.5, sd: 0.12, lo: 0.01 },
        "igratio" => Linear { mean: 0.7, sd: 0.2, lo: 0.01 },
        "proph" => Proportion { mean: 1.9, sd: 0.8 },
        other => unreachable!("no unit for metric `{other}`"),
    }
}

/// Idiosyncratic noise share per echo category.
const ECHO_NOISE: [f64; 3] = [0.25, 0.3, 0.45];

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn metrics_from_factors<R: Rng>(f: &[f64; N_FACTORS], rng: &mut R) -> Metrics {
    let mut out = Metrics::new();
    for (b, base) in METRIC_BASE_NAMES.iter().enumerate() {
        let load = LOADINGS[b];
        let norm = load.iter().map(|v| v * v).sum::<f64>().sqrt();
        let signal: f64 = load.iter().zip(f).map(|(l, x)| l * x).sum::<f64>() / norm;
        let shared = gauss(rng);
        for (e, echo) in ECHO_CATEGORIES.iter().enumerate() {
            let eps = ECHO_NOISE[e];
            let noise = 0.6 * shared + 0.8 * gauss(rng);
            let s = signal * (1.0 - eps * eps).sqrt() + eps * noise;
            let v = match unit(b) {
                Unit::Linear { mean, sd, lo } => (mean + sd * s).max(lo),
                Unit::Proportion { mean, sd } => 1.0 / (1.0 + (-(mean + sd * s)).exp()),
            };
            out.insert(format!("{base}_{echo}"), v);
        }
    }
    out
}

fn draw_species<R: Rng>(mix: &[f64; 3], rng: &mut R) -> Species {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for s in Species::ALL {
        acc += mix[s.index()];
        if u < acc {
            return s;
        }
    }
    Species::Deciduous
}

fn other_species<R: Rng>(s: Species, rng: &mut R) -> Species {
    let others: Vec<Species> = Species::ALL.into_iter().filter(|x| *x != s).collect();
    others[rng.random_range(0..others.len())]
}

fn negative_binomial<R: Rng>(mean: f64, size: f64, rng: &mut R) -> usize {
    let lambda = Gamma::new(size, mean / size).expect("positive gamma parameters").sample(rng);
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda).expect("positive rate").sample(rng) as usize
}

/// Height in metres from DBH, saturating near the plot's top height.
fn tree_height<R: Rng>(dbh: f64, top_height: f64, rng: &mut R) -> f64 {
    let h = 1.3 + (top_height - 1.3) * (1.0 - (-0.06 * dbh).exp()).powf(1.3);
    (h * (0.05 * gauss(rng)).exp()).max(1.3)
}

fn project_effects(config: &SynthConfig) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(PROJECT_STREAM);
    (0..config.n_projects)
        .map(|_| (config.sigma_b_project * gauss(&mut rng), config.sigma_b_project * gauss(&mut rng)))
        .collect()
}

fn plot_id(i: usize) -> String {
    format!("P{i:05}")
}

fn project_id(j: usize) -> String {
    format!("A{j:02}")
}

fn generate_plot(
    i: usize,
    config: &SynthConfig,
    projects: &[(f64, f64)],
    bimodal_threshold: f64,
) -> Result<(PlotRecord, LayerEntry, PlotTruth)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(i as u64);
    let project = i * config.n_projects / config.n_plots.max(1);
    let id = plot_id(i);

    let is_forest = rng.random::<f64>() < config.forest_fraction;
    let young = is_forest && rng.random::<f64>() < config.young_forest_fraction;
    let stand = draw_species(&config.species_mix, &mut rng);
    let mut f = [0.0; N_FACTORS];
    for v in &mut f {
        *v = gauss(&mut rng);
    }
    match stand {
        Species::Spruce => {}
        Species::Pine => f[3] -= 0.5,
        Species::Deciduous => {
            f[0] -= 0.5;
            f[3] += 1.0;
        }
    }
    if !is_forest {
        f[0] -= 2.5;
        f[1] -= 3.0;
    } else if young {
        f[0] -= 2.0;
    }
    let metrics = metrics_from_factors(&f, &mut rng);

    let (pb, pc) = projects[project];
    let (ub, uc) = (config.sigma_plot * gauss(&mut rng), config.sigma_plot * gauss(&mut rng));
    let bimodal = f[4] > bimodal_threshold;

    let mut record = PlotRecord::new(id.clone(), project_id(project), is_forest);
    record.metrics = metrics;
    record.area_m2 = config.plot_area_m2;
    record.inclusion_probability = 1.0 / config.hectares_per_plot;

    let mut truth = PlotTruth {
        plot_id: id.clone(),
        project_id: record.project_id.clone(),
        is_forest,
        young,
        stand_species: is_forest.then_some(stand),
        factors: f,
        project_effect_scale: pb,
        project_effect_shape: pc,
        plot_effect_scale: ub,
        plot_effect_shape: uc,
        shape: f64::NAN,
        scale: f64::NAN,
        bimodal: false,
        expected_stems: 0.0,
        n_trees: 0,
    };

    if is_forest && !young {
        let (sb, sc) = (config.species_log_scale[stand.index()], config.species_log_shape[stand.index()]);
        let shape = (config.log_shape.eval(&record.metrics)? + sc + pc + uc).exp().max(MIN_SHAPE);
        let scale = (config.log_scale.eval(&record.metrics)? + sb + pb + ub).exp().max(TRUNCATION_CM + 0.5);
        let mu = config.stem_count_mean * (0.45 * f[1] - 0.25 * f[0] - 0.5 * 0.45f64.powi(2)).exp();
        let n = negative_binomial(mu, config.stem_count_dispersion, &mut rng);
        let dbhs = if bimodal {
            // Both components keep the plot's shape; only the scale splits.
            let hi = WeibullParams::new(shape, scale + BIMODAL_HALF_GAP_CM)?;
            let lo = WeibullParams::new(shape, (scale - BIMODAL_HALF_GAP_CM).max(TRUNCATION_CM + 1.0))?;
            (0..n)
                .map(|_| {
                    let comp = if rng.random::<bool>() { &hi } else { &lo };
                    comp.quantile(rng.random())
                })
                .collect()
        } else {
            weibull::sample_with(&WeibullParams::new(shape, scale)?, n, &mut rng)
        };
        let top = (record.metrics["h95_all"] * 1.05).max(3.0);
        for d in dbhs {
            let species = if rng.random::<f64>() < 0.8 { stand } else { other_species(stand, &mut rng) };
            let h = tree_height(d, top, &mut rng);
            record.trees.push(TreeRecord::new(id.clone(), d, species)?.with_height(h));
        }
        record.dominant_species = record.basal_area_dominant_species();
        // The highest return comes from the tallest crown actually present.
        if let Some(tallest) = record.trees.iter().filter_map(|t| t.height).reduce(f64::max) {
            for echo in ECHO_CATEGORIES {
                let noisy = tallest + HMAX_NOISE_M * gauss(&mut rng);
                record.metrics.insert(format!("hmax_{echo}"), noisy.max(0.0));
            }
        }
        truth.shape = shape;
        truth.scale = scale;
        truth.bimodal = bimodal;
        truth.expected_stems = mu;
        truth.n_trees = n;
    }

    // Map labels are drawn last so error rates leave everything else intact.
    let mask_wrong = rng.random::<f64>() < config.mask_error_rate;
    let mapped_forest = is_forest != mask_wrong;
    let species_wrong = rng.random::<f64>() < config.species_error_rate;
    let mapped_species = if !mapped_forest {
        None
    } else {
        let draw = draw_species(&config.species_mix, &mut rng);
        let other = other_species(record.dominant_species.unwrap_or(stand), &mut rng);
        Some(match record.dominant_species {
            Some(_) if species_wrong => other,
            Some(s) => s,
            None => draw,
        })
    };
    let layer = LayerEntry {
        mapped_forest,
        mapped_species,
    };
    Ok((record, layer, truth))
}

/// Generates plots, map layers and the truth record.
pub fn generate(config: &SynthConfig, exec: Execution) -> Result<SynthData> {
    config.validate()?;
    let projects = project_effects(config);
    let threshold = if config.bimodal_fraction <= 0.0 {
        f64::INFINITY
    } else if config.bimodal_fraction >= 1.0 {
        f64::NEG_INFINITY
    } else {
        Normal::standard().inverse_cdf(1.0 - config.bimodal_fraction)
    };
    let rows = par::try_map_range(exec, config.n_plots, |i| generate_plot(i, config, &projects, threshold))?;
    let mut plots = Vec::with_capacity(rows.len());
    let mut layers = BTreeMap::new();
    let mut truth = Vec::with_capacity(rows.len());
    for (p, l, t) in rows {
        layers.insert(p.plot_id.clone(), l);
        plots.push(p);
        truth.push(t);
    }
    Ok(SynthData {
        plots,
        layers: ClassificationLayers { entries: layers },
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weibull::fit_ml;

    fn small(n: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            n_plots: n,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn empty_config_gives_empty_dataset() {
        let d = generate(&small(0, 1), Execution::Sequential).unwrap();
        assert!(d.plots.is_empty() && d.truth.is_empty() && d.layers.entries.is_empty());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = small(10, 1);
        c.species_mix = [0.5, 0.5, 0.1];
        assert!(generate(&c, Execution::Sequential).is_err());
        let mut c = small(10, 1);
        c.mask_error_rate = 1.5;
        assert!(c.validate().is_err());
        let mut c = small(10, 1);
        c.log_scale.terms[0].metric = "nope_first".into();
        assert!(c.validate().is_err());
    }

    #[test]
    fn deterministic_and_schedule_independent() {
        let c = small(300, 17);
        let a = generate(&c, Execution::Sequential).unwrap();
        let b = generate(&c, Execution::Parallel).unwrap();
        assert_eq!(a.plots, b.plots);
        assert_eq!(a.layers, b.layers);
        let other = generate(&small(300, 18), Execution::Parallel).unwrap();
        assert_ne!(a.plots, other.plots);
    }

    #[test]
    fn structural_invariants() {
        let d = generate(&small(2000, 3), Execution::Parallel).unwrap();
        for (p, t) in d.plots.iter().zip(&d.truth) {
            assert_eq!(p.metrics.len(), 69);
            assert!(p.trees.iter().all(|t| t.dbh >= 5.0 && t.height.is_some()));
            if !p.is_forest {
                assert!(p.trees.is_empty());
            }
            assert_eq!(p.trees.len(), t.n_trees);
            assert!(d.layers.entries.contains_key(&p.plot_id));
        }
    }

    #[test]
    fn summary_statistics_in_plausible_range() {
        let d = generate(&small(3000, 5), Execution::Parallel).unwrap();
        let forest: Vec<_> = d.plots.iter().filter(|p| p.is_forest).collect();
        let n_mean = forest.iter().map(|p| p.stems_per_ha()).sum::<f64>() / forest.len() as f64;
        let dbhs: Vec<f64> = forest.iter().flat_map(|p| p.dbhs()).collect();
        let dbh_mean = dbhs.iter().sum::<f64>() / dbhs.len() as f64;
        assert!((600.0..=1100.0).contains(&n_mean), "N mean {n_mean}");
        assert!((10.0..=16.0).contains(&dbh_mean), "DBH mean {dbh_mean}");
    }

    #[test]
    fn error_rates_within_binomial_bounds() {
        let c = small(4000, 11);
        let d = generate(&c, Execution::Parallel).unwrap();
        let n = d.plots.len() as f64;
        let mask_err = d.plots.iter().filter(|p| d.layers.entries[&p.plot_id].mapped_forest != p.is_forest).count() as f64;
        let half = 2.576 * (c.mask_error_rate * (1.0 - c.mask_error_rate) / n).sqrt();
        assert!((mask_err / n - c.mask_error_rate).abs() < half);

        let eligible: Vec<_> = d
            .plots
            .iter()
            .filter(|p| p.dominant_species.is_some() && d.layers.entries[&p.plot_id].mapped_forest)
            .collect();
        let m = eligible.len() as f64;
        let wrong = eligible
            .iter()
            .filter(|p| d.layers.entries[&p.plot_id].mapped_species != p.dominant_species)
            .count() as f64;
        let half = 2.576 * (c.species_error_rate * (1.0 - c.species_error_rate) / m).sqrt();
        assert!((wrong / m - c.species_error_rate).abs() < half, "{}", wrong / m);
    }

    #[test]
    fn bimodal_share_tracks_config() {
        let mut c = small(3000, 2);
        c.bimodal_fraction = 0.3;
        let d = generate(&c, Execution::Parallel).unwrap();
        let share = d.truth.iter().filter(|t| t.bimodal).count() as f64
            / d.truth.iter().filter(|t| t.is_forest && !t.young).count() as f64;
        assert!((share - 0.3).abs() < 0.04, "{share}");
    }

    #[test]
    fn noise_free_round_trip_through_fit_ml() {
        let c = SynthConfig {
            n_plots: 1000,
            sigma_b_project: 0.0,
            sigma_plot: 0.0,
            bimodal_fraction: 0.0,
            stem_count_mean: 400.0,
            forest_fraction: 1.0,
            young_forest_fraction: 0.0,
            seed: 8,
            ..Default::default()
        };
        let d = generate(&c, Execution::Parallel).unwrap();
        let mut rel: Vec<f64> = d
            .plots
            .iter()
            .zip(&d.truth)
            .filter(|(p, _)| p.trees.len() >= 5)
            .filter_map(|(p, t)| fit_ml(&p.trees).ok().map(|f| (f.params.shape - t.shape).abs() / t.shape))
            .collect();
        assert!(rel.len() > 900);
        rel.sort_by(f64::total_cmp);
        let median = rel[rel.len() / 2];
        assert!(median < 0.05, "median relative shape error {median}");
    }

    #[test]
    fn scale_metric_coefficients_reproduce_truth() {
        let d = generate(&small(200, 4), Execution::Sequential).unwrap();
        let c = SynthConfig::default();
        for (p, t) in d.plots.iter().zip(&d.truth) {
            if t.is_forest && !t.young {
                let species = c.species_log_scale[t.stand_species.unwrap().index()];
                let expect = c.log_scale.eval(&p.metrics).unwrap() + species + t.project_effect_scale + t.plot_effect_scale;
                assert!((t.scale.ln() - expect).abs() < 1e-12 || t.scale == TRUNCATION_CM + 0.5);
                assert!(t.shape >= MIN_SHAPE);
            }
        }
    }
}
