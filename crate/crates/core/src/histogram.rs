//! Stem-frequency histograms over 2 cm DBH classes.
//!
//! Classes are identified by their mid-point m = 6, 8, …, 50 cm and cover the
//! half-open interval [m − 1, m + 1). Stems with DBH ≥ 51 cm are pooled into a
//! single overflow bin. Counts are real-valued because imputed histograms are
//! weighted averages.

use std::fmt;

use crate::error::{Error, Result};
use crate::types::{TreeRecord, DBH_THRESHOLD_CM};

pub const BIN_WIDTH_CM: f64 = 2.0;
pub const FIRST_MIDPOINT_CM: f64 = 6.0;
pub const LAST_MIDPOINT_CM: f64 = 50.0;
pub const NUM_CLASSES: usize = 23;
/// Lower edge of the overflow bin.
pub const OVERFLOW_FROM_CM: f64 = LAST_MIDPOINT_CM + BIN_WIDTH_CM / 2.0;

pub fn class_midpoint(index: usize) -> f64 {
    FIRST_MIDPOINT_CM + BIN_WIDTH_CM * index as f64
}

/// Class index for a DBH, or `None` when it falls in the overflow bin.
/// Values below the threshold map to class 0.
pub fn class_index(dbh: f64) -> Option<usize> {
    if dbh >= OVERFLOW_FROM_CM {
        return None;
    }
    let lower = FIRST_MIDPOINT_CM - BIN_WIDTH_CM / 2.0;
    let i = ((dbh - lower) / BIN_WIDTH_CM).floor();
    Some(if i < 0.0 { 0 } else { i as usize })
}

/// A row selector in per-class reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DbhClass {
    Mid(usize),
    Overflow,
    All,
}

impl DbhClass {
    /// Classes 6–50 cm followed by the overflow bin and "All".
    pub fn report_rows() -> Vec<DbhClass> {
        (0..NUM_CLASSES)
            .map(DbhClass::Mid)
            .chain([DbhClass::Overflow, DbhClass::All])
            .collect()
    }

    pub fn value(self, h: &DbhHistogram) -> f64 {
        match self {
            DbhClass::Mid(i) => h.counts[i],
            DbhClass::Overflow => h.overflow,
            DbhClass::All => h.total(),
        }
    }

    pub fn label(self) -> String {
        match self {
            DbhClass::Mid(i) => format!("{}", class_midpoint(i)),
            DbhClass::Overflow => format!(">={OVERFLOW_FROM_CM}"),
            DbhClass::All => "All".to_string(),
        }
    }
}

impl fmt::Display for DbhClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DbhHistogram {
    pub counts: [f64; NUM_CLASSES],
    pub overflow: f64,
}

impl Default for DbhHistogram {
    fn default() -> Self {
        Self::zeros()
    }
}

impl DbhHistogram {
    pub fn zeros() -> Self {
        DbhHistogram {
            counts: [0.0; NUM_CLASSES],
            overflow: 0.0,
        }
    }

    pub fn bin_width(&self) -> f64 {
        BIN_WIDTH_CM
    }

    pub fn add(&mut self, dbh: f64, weight: f64) {
        match class_index(dbh) {
            Some(i) => self.counts[i] += weight,
            None => self.overflow += weight,
        }
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum::<f64>() + self.overflow
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = *self;
        out.counts.iter_mut().for_each(|c| *c *= factor);
        out.overflow *= factor;
        out
    }

    /// Rescale so that `total()` equals `target`. A zero histogram stays zero.
    pub fn rescaled_to(&self, target: f64) -> Self {
        let t = self.total();
        if t > 0.0 {
            self.scaled(target / t)
        } else {
            *self
        }
    }

    /// `self + weight * other`.
    pub fn add_scaled(&mut self, other: &DbhHistogram, weight: f64) {
        for (a, b) in self.counts.iter_mut().zip(other.counts.iter()) {
            *a += weight * b;
        }
        self.overflow += weight * other.overflow;
    }

    pub fn sub(&self, other: &DbhHistogram) -> Self {
        let mut out = *self;
        out.add_scaled(other, -1.0);
        out
    }

    /// The 23 class counts followed by the overflow bin.
    pub fn bins(&self) -> impl Iterator<Item = f64> + '_ {
        self.counts.iter().copied().chain(std::iter::once(self.overflow))
    }
}

/// Bin a single plot's tree list.
pub fn histogram_from_trees(trees: &[TreeRecord], bin_width: f64) -> Result<DbhHistogram> {
    if (bin_width - BIN_WIDTH_CM).abs() > 0.0 {
        return Err(Error::Validation(format!(
            "bin width must be {BIN_WIDTH_CM} cm, got {bin_width}"
        )));
    }
    if let Some(first) = trees.first() {
        if let Some(t) = trees.iter().find(|t| t.plot_id != first.plot_id) {
            return Err(Error::Validation(format!(
                "trees from plots `{}` and `{}` mixed in one histogram",
                first.plot_id, t.plot_id
            )));
        }
    }
    let mut h = DbhHistogram::zeros();
    for t in trees {
        if !(t.dbh >= DBH_THRESHOLD_CM) {
            return Err(Error::Validation(format!(
                "tree in plot `{}` has DBH {} cm < {DBH_THRESHOLD_CM} cm",
                t.plot_id, t.dbh
            )));
        }
        h.add(t.dbh, 1.0);
    }
    Ok(h)
}
