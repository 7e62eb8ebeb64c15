//! Domain records shared across the crate: trees, plots, the metric
//! namespace, and the tabular metric matrix.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::histogram::DbhHistogram;

/// Field DBH threshold and left-truncation point of the diameter model, cm.
pub const DBH_THRESHOLD_CM: f64 = 5.0;

/// Default circular sample plot area, m².
pub const DEFAULT_PLOT_AREA_M2: f64 = 250.0;

/// Per-hectare inclusion probability of a 3 km × 3 km plot grid.
pub const DEFAULT_INCLUSION_PROBABILITY: f64 = 1.0 / 900.0;

/// Statistical metrics computed per echo category.
pub const METRIC_BASE_NAMES: [&str; 23] = [
    "hmin", "hmax", "hmean", "hvar", "hcv", "hskew", "hkurt", "h10", "h25", "h50", "h75", "h90",
    "h95", "d0", "d2", "d4", "d6", "d8", "d9", "ivar", "icv", "igratio", "proph",
];

pub const ECHO_CATEGORIES: [&str; 3] = ["first", "last", "all"];

/// All 69 metric column names, `<metric>_<echo>`, metric-major order.
pub fn metric_namespace() -> Vec<String> {
    METRIC_BASE_NAMES
        .iter()
        .flat_map(|base| ECHO_CATEGORIES.iter().map(move |echo| format!("{base}_{echo}")))
        .collect()
}

pub fn is_known_metric(name: &str) -> bool {
    match name.rsplit_once('_') {
        Some((base, echo)) => METRIC_BASE_NAMES.contains(&base) && ECHO_CATEGORIES.contains(&echo),
        None => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Species {
    Spruce,
    Pine,
    Deciduous,
}

impl Species {
    pub const ALL: [Species; 3] = [Species::Spruce, Species::Pine, Species::Deciduous];

    pub fn as_str(self) -> &'static str {
        match self {
            Species::Spruce => "spruce",
            Species::Pine => "pine",
            Species::Deciduous => "deciduous",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Species::Spruce => 0,
            Species::Pine => 1,
            Species::Deciduous => 2,
        }
    }
}

impl fmt::Display for Species {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Species {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "spruce" => Ok(Species::Spruce),
            "pine" => Ok(Species::Pine),
            "deciduous" => Ok(Species::Deciduous),
            other => Err(Error::Validation(format!("unknown species `{other}`"))),
        }
    }
}

/// One measured stem.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeRecord {
    pub plot_id: String,
    pub dbh: f64,
    pub species: Species,
    /// Measured or modelled tree height in m; used for Lorey's height.
    pub height: Option<f64>,
}

impl TreeRecord {
    pub fn new(plot_id: impl Into<String>, dbh: f64, species: Species) -> Result<Self> {
        if !(dbh >= DBH_THRESHOLD_CM) || !dbh.is_finite() {
            return Err(Error::Validation(format!(
                "tree DBH {dbh} cm is below the {DBH_THRESHOLD_CM} cm threshold"
            )));
        }
        Ok(TreeRecord {
            plot_id: plot_id.into(),
            dbh,
            species,
            height: None,
        })
    }

    pub fn with_height(mut self, height: f64) -> Self {
        self.height = Some(height);
        self
    }

    /// Cross-sectional stem area at breast height, m².
    pub fn basal_area_m2(&self) -> f64 {
        let r = self.dbh / 200.0;
        std::f64::consts::PI * r * r
    }
}

pub type Metrics = BTreeMap<String, f64>;

/// One sample plot with its remote-sensing metrics and measured tree list.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotRecord {
    pub plot_id: String,
    pub project_id: String,
    pub is_forest: bool,
    pub dominant_species: Option<Species>,
    pub metrics: Metrics,
    pub trees: Vec<TreeRecord>,
    pub area_m2: f64,
    pub inclusion_probability: f64,
    pub single_layered: Option<bool>,
    pub split_plot: Option<bool>,
}

impl PlotRecord {
    pub fn new(plot_id: impl Into<String>, project_id: impl Into<String>, is_forest: bool) -> Self {
        PlotRecord {
            plot_id: plot_id.into(),
            project_id: project_id.into(),
            is_forest,
            dominant_species: None,
            metrics: Metrics::new(),
            trees: Vec::new(),
            area_m2: DEFAULT_PLOT_AREA_M2,
            inclusion_probability: DEFAULT_INCLUSION_PROBABILITY,
            single_layered: None,
            split_plot: None,
        }
    }

    pub fn metric(&self, name: &str) -> Result<f64> {
        self.metrics
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingMetric(name.to_string()))
    }

    pub fn metric_vector(&self, names: &[String]) -> Result<Vec<f64>> {
        names.iter().map(|n| self.metric(n)).collect()
    }

    /// Factor converting per-plot counts to per-hectare values.
    pub fn per_ha_factor(&self) -> f64 {
        1.0e4 / self.area_m2
    }

    pub fn stems_per_ha(&self) -> f64 {
        self.trees.len() as f64 * self.per_ha_factor()
    }

    pub fn dbhs(&self) -> Vec<f64> {
        self.trees.iter().map(|t| t.dbh).collect()
    }

    /// Observed stem counts per DBH class on the plot.
    pub fn histogram(&self) -> DbhHistogram {
        let mut h = DbhHistogram::zeros();
        for t in &self.trees {
            h.add(t.dbh, 1.0);
        }
        h
    }

    /// Observed stems per hectare per DBH class.
    pub fn histogram_per_ha(&self) -> DbhHistogram {
        self.histogram().scaled(self.per_ha_factor())
    }

    /// Basal area in m²/ha.
    pub fn basal_area(&self) -> f64 {
        self.trees.iter().map(TreeRecord::basal_area_m2).sum::<f64>() * self.per_ha_factor()
    }

    /// Basal-area weighted mean DBH (cm); zero for an empty plot.
    pub fn dg(&self) -> f64 {
        let (num, den) = self
            .trees
            .iter()
            .fold((0.0, 0.0), |(n, d), t| (n + t.dbh.powi(3), d + t.dbh.powi(2)));
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    }

    /// Lorey's height (basal-area weighted mean height, m). `None` when any
    /// tree on the plot lacks a height.
    pub fn lorey_height(&self) -> Option<f64> {
        if self.trees.is_empty() {
            return Some(0.0);
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for t in &self.trees {
            let g = t.dbh * t.dbh;
            num += g * t.height?;
            den += g;
        }
        Some(num / den)
    }

    /// Dominant species by basal area among the plot's trees.
    pub fn basal_area_dominant_species(&self) -> Option<Species> {
        let mut g = [0.0; 3];
        for t in &self.trees {
            g[t.species.index()] += t.basal_area_m2();
        }
        let (best, val) = g
            .iter()
            .enumerate()
            .fold((0, 0.0), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        (val > 0.0).then_some(Species::ALL[best])
    }
}

/// Dense table of named metric columns, one row per plot.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricMatrix {
    names: Vec<String>,
    row_ids: Vec<String>,
    data: Vec<f64>,
}

impl MetricMatrix {
    pub fn new(names: Vec<String>, row_ids: Vec<String>, data: Vec<f64>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::Validation(format!("duplicate column name `{n}`")));
            }
        }
        if data.len() != names.len() * row_ids.len() {
            return Err(Error::Validation(format!(
                "metric matrix holds {} values, expected {} rows x {} columns",
                data.len(),
                row_ids.len(),
                names.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            let (r, c) = (i / names.len().max(1), i % names.len().max(1));
            return Err(Error::Validation(format!(
                "missing or non-finite value at row `{}` column `{}`",
                row_ids[r], names[c]
            )));
        }
        Ok(MetricMatrix {
            names,
            row_ids,
            data,
        })
    }

    pub fn from_plots(plots: &[PlotRecord], names: &[String]) -> Result<Self> {
        let mut data = Vec::with_capacity(plots.len() * names.len());
        for p in plots {
            data.extend(p.metric_vector(names)?);
        }
        let ids = plots.iter().map(|p| p.plot_id.clone()).collect();
        MetricMatrix::new(names.to_vec(), ids, data)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn nrows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn ncols(&self) -> usize {
        self.names.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.ncols();
        &self.data[i * p..(i + 1) * p]
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.ncols() + col]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.nrows()).map(|r| self.get(r, col)).collect()
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.nrows(), self.ncols(), &self.data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn namespace_has_69_unique_names() {
        let ns = metric_namespace();
        assert_eq!(ns.len(), 69);
        let set: std::collections::HashSet<_> = ns.iter().collect();
        assert_eq!(set.len(), 69);
        assert!(ns.iter().all(|n| is_known_metric(n)));
        assert!(is_known_metric("h95_all"));
        assert!(!is_known_metric("h96_all"));
        assert!(!is_known_metric("h95_middle"));
    }

    #[test]
    fn tree_below_threshold_rejected() {
        assert!(TreeRecord::new("p", 4.99, Species::Pine).is_err());
        assert!(TreeRecord::new("p", f64::NAN, Species::Pine).is_err());
        assert!(TreeRecord::new("p", 5.0, Species::Pine).is_ok());
    }

    #[test]
    fn metric_matrix_rejects_duplicates_and_nan() {
        let r = MetricMatrix::new(vec!["a".into(), "a".into()], vec!["1".into()], vec![1.0, 2.0]);
        assert!(r.is_err());
        let r = MetricMatrix::new(vec!["a".into()], vec!["1".into()], vec![f64::NAN]);
        assert!(r.is_err());
    }

    #[test]
    fn plot_attributes() {
        let mut p = PlotRecord::new("1", "A", true);
        p.trees = vec![
            TreeRecord::new("1", 10.0, Species::Spruce).unwrap().with_height(10.0),
            TreeRecord::new("1", 20.0, Species::Pine).unwrap().with_height(20.0),
        ];
        assert!((p.stems_per_ha() - 80.0).abs() < 1e-12);
        assert!((p.dg() - 9000.0 / 500.0).abs() < 1e-12);
        assert!((p.lorey_height().unwrap() - (100.0 * 10.0 + 400.0 * 20.0) / 500.0).abs() < 1e-12);
        assert_eq!(p.basal_area_dominant_species(), Some(Species::Pine));
    }
}
