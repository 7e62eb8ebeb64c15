//! Run configuration: a TOML file, `key=value` overrides on top, and the
//! resolved result written next to every run's outputs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dbhdist::glm::GlmOptions;
use dbhdist::knn::{KnnConfig, Weighting};
use dbhdist::pipeline::{Method, MethodSettings, ModelingRules};
use dbhdist::synth::SynthConfig;
use dbhdist::varsel::SaConfig;
use serde::{Deserialize, Serialize};

use crate::InvalidInput;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: DataConfig,
    pub run: RunConfig,
    pub modeling: ModelingConfig,
    pub ppm: ParamModelConfig,
    pub glm: GlmConfig,
    pub knn: KnnSection,
    pub select: SelectConfig,
    pub simulate: SynthConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub plots: PathBuf,
    pub trees: PathBuf,
    /// Map layers for estimation; `None` uses the field classification.
    pub layers: Option<PathBuf>,
    pub output: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Target of `select-vars`: knn, ppm (both parameter models), glm (same
    /// as ppm), ppm-scale or ppm-shape.
    pub method: String,
    /// Methods compared by `evaluate`.
    pub methods: Vec<String>,
    pub stratify_by_species: bool,
    pub parallel: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelingConfig {
    pub min_trees: usize,
    pub require_single_layered: bool,
    pub exclude_split_plots: bool,
}

/// Predictor lists for the scale and shape models.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamModelConfig {
    pub scale_vars: Vec<String>,
    pub shape_vars: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlmConfig {
    /// Empty lists fall back to the PPM predictors.
    pub scale_vars: Vec<String>,
    pub shape_vars: Vec<String>,
    pub random_shape: bool,
    pub random_scale: bool,
    pub max_iter: usize,
    pub sigma_tol: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnnSection {
    pub vars: Vec<String>,
    pub k: usize,
    pub weighting: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectConfig {
    /// Candidate metrics; empty means every metric column in the data.
    pub candidates: Vec<String>,
    /// Subset size p for k-NN; PPM subsets use `ppm_subset_size`.
    pub knn_subset_size: usize,
    pub ppm_subset_size: usize,
    pub restarts: usize,
    pub initial_temperature: f64,
    pub iterations_per_temperature: usize,
    pub cooling_factor: f64,
    pub min_temperature: f64,
    /// Skip the fit summaries printed for review after selection.
    pub auto: bool,
}

/// One search run by `select-vars`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectTarget {
    Knn,
    PpmScale,
    PpmShape,
}

impl SelectTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            SelectTarget::Knn => "knn",
            SelectTarget::PpmScale => "scale",
            SelectTarget::PpmShape => "shape",
        }
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            data: DataConfig::default(),
            run: RunConfig::default(),
            modeling: ModelingConfig::default(),
            ppm: ParamModelConfig::default(),
            glm: GlmConfig::default(),
            knn: KnnSection::default(),
            select: SelectConfig::default(),
            simulate: SynthConfig::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            plots: "plots.csv".into(),
            trees: "trees.csv".into(),
            layers: None,
            output: "out".into(),
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: "knn".into(),
            methods: vec!["ppm".into(), "glm".into(), "knn".into()],
            stratify_by_species: true,
            parallel: true,
            seed: 1,
        }
    }
}

impl Default for ModelingConfig {
    fn default() -> Self {
        let r = ModelingRules::default();
        ModelingConfig {
            min_trees: r.min_trees,
            require_single_layered: r.require_single_layered,
            exclude_split_plots: r.exclude_split_plots,
        }
    }
}

impl Default for ParamModelConfig {
    fn default() -> Self {
        let s = MethodSettings::default();
        ParamModelConfig {
            scale_vars: s.scale_vars,
            shape_vars: s.shape_vars,
        }
    }
}

impl Default for GlmConfig {
    fn default() -> Self {
        let o = GlmOptions::default();
        GlmConfig {
            scale_vars: Vec::new(),
            shape_vars: Vec::new(),
            random_shape: o.random_shape,
            random_scale: o.random_scale,
            max_iter: o.max_iter,
            sigma_tol: o.sigma_tol,
        }
    }
}

impl Default for KnnSection {
    fn default() -> Self {
        let c = KnnConfig::default();
        KnnSection {
            vars: MethodSettings::default().knn_vars,
            k: c.k,
            weighting: c.weighting.as_str().into(),
        }
    }
}

impl Default for SelectConfig {
    fn default() -> Self {
        let sa = SaConfig::default();
        SelectConfig {
            candidates: Vec::new(),
            knn_subset_size: 5,
            ppm_subset_size: sa.subset_size,
            restarts: 5,
            initial_temperature: sa.initial_temperature,
            iterations_per_temperature: sa.iterations_per_temperature,
            cooling_factor: sa.cooling_factor,
            min_temperature: sa.min_temperature,
            auto: false,
        }
    }
}

impl PipelineConfig {
    /// Loads `path` (if given), applies `overrides` in order, and checks the
    /// result.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                text.parse()
                    .map_err(|e| InvalidInput(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| InvalidInput(format!("config: {e}")))?;
        config.check()?;
        Ok(config)
    }

    fn check(&self) -> Result<()> {
        for m in &self.run.methods {
            Method::parse(m)?;
        }
        self.selection_targets()?;
        Weighting::parse(&self.knn.weighting)?;
        if self.knn.k == 0 {
            bail!(InvalidInput("knn.k must be at least 1".into()));
        }
        if self.ppm.scale_vars.is_empty() || self.ppm.shape_vars.is_empty() {
            bail!(InvalidInput("ppm.scale_vars and ppm.shape_vars must not be empty".into()));
        }
        if self.knn.vars.is_empty() {
            bail!(InvalidInput("knn.vars must not be empty".into()));
        }
        self.sa_config(1).validate()?;
        self.simulate.validate()?;
        Ok(())
    }

    /// Fails unless the input files exist.
    pub fn require_inputs(&self, layers: bool) -> Result<()> {
        let mut missing = Vec::new();
        let mut paths = vec![&self.data.plots, &self.data.trees];
        if layers {
            paths.extend(self.data.layers.as_ref());
        }
        for p in paths {
            if !p.is_file() {
                missing.push(p.display().to_string());
            }
        }
        if !missing.is_empty() {
            bail!(InvalidInput(format!("input file(s) not found: {}", missing.join(", "))));
        }
        Ok(())
    }

    pub fn exec(&self) -> dbhdist::par::Execution {
        if self.run.parallel {
            dbhdist::par::Execution::Parallel
        } else {
            dbhdist::par::Execution::Sequential
        }
    }

    pub fn rules(&self) -> ModelingRules {
        ModelingRules {
            min_trees: self.modeling.min_trees,
            require_single_layered: self.modeling.require_single_layered,
            exclude_split_plots: self.modeling.exclude_split_plots,
        }
    }

    pub fn settings(&self) -> Settings {
        let or_ppm = |v: &Vec<String>, fallback: &Vec<String>| if v.is_empty() { fallback.clone() } else { v.clone() };
        let base = MethodSettings {
            scale_vars: self.ppm.scale_vars.clone(),
            shape_vars: self.ppm.shape_vars.clone(),
            knn_vars: self.knn.vars.clone(),
            knn: KnnConfig {
                k: self.knn.k,
                weighting: Weighting::parse(&self.knn.weighting).expect("checked at load"),
            },
            glm: GlmOptions {
                random_shape: self.glm.random_shape,
                random_scale: self.glm.random_scale,
                max_iter: self.glm.max_iter,
                sigma_tol: self.glm.sigma_tol,
                intervals: false,
            },
        };
        Settings {
            base,
            glm_scale_vars: or_ppm(&self.glm.scale_vars, &self.ppm.scale_vars),
            glm_shape_vars: or_ppm(&self.glm.shape_vars, &self.ppm.shape_vars),
        }
    }

    pub fn selection_targets(&self) -> Result<Vec<SelectTarget>> {
        let m = self.run.method.trim().to_ascii_lowercase();
        Ok(match m.as_str() {
            "ppm-scale" => vec![SelectTarget::PpmScale],
            "ppm-shape" => vec![SelectTarget::PpmShape],
            _ => match Method::parse(&m)? {
                Method::Knn => vec![SelectTarget::Knn],
                Method::Ppm | Method::Glm => vec![SelectTarget::PpmScale, SelectTarget::PpmShape],
            },
        })
    }

    pub fn sa_config(&self, subset_size: usize) -> SaConfig {
        SaConfig {
            initial_temperature: self.select.initial_temperature,
            iterations_per_temperature: self.select.iterations_per_temperature,
            cooling_factor: self.select.cooling_factor,
            subset_size,
            seed: self.run.seed,
            min_temperature: self.select.min_temperature,
        }
    }

    pub fn snapshot(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

/// Method settings plus the GLM's own predictor lists.
#[derive(Debug, Clone)]
pub struct Settings {
    pub base: MethodSettings,
    pub glm_scale_vars: Vec<String>,
    pub glm_shape_vars: Vec<String>,
}

impl Settings {
    /// Settings with the parametric predictor lists of `method`.
    pub fn for_method(&self, method: Method) -> MethodSettings {
        let mut s = self.base.clone();
        if method == Method::Glm {
            s.scale_vars = self.glm_scale_vars.clone();
            s.shape_vars = self.glm_shape_vars.clone();
        }
        s
    }
}

/// Sets a dotted key such as `knn.k=7` or `run.methods=["knn"]`. Values are
/// parsed as TOML and fall back to plain strings.
fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        bail!(InvalidInput(format!("override `{assignment}` is not of the form key=value")));
    };
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!(InvalidInput(format!("override key `{key}` is malformed")));
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = match entry {
            toml::Value::Table(t) => t,
            _ => bail!(InvalidInput(format!("override key `{key}`: `{part}` is not a section"))),
        };
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
