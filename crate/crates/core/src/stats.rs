//! Prediction accuracy measures.

use crate::error::{Error, Result};
use crate::types::MetricMatrix;

fn check(observed: &[f64], predicted: &[f64]) -> Result<()> {
    if observed.len() != predicted.len() {
        return Err(Error::LengthMismatch {
            observed: observed.len(),
            predicted: predicted.len(),
        });
    }
    if observed.is_empty() {
        return Err(Error::Empty("accuracy measures need at least one pair"));
    }
    Ok(())
}

/// Root-mean-squared error.
pub fn rmse(observed: &[f64], predicted: &[f64]) -> Result<f64> {
    check(observed, predicted)?;
    let ss: f64 = observed
        .iter()
        .zip(predicted)
        .map(|(y, p)| (y - p) * (y - p))
        .sum();
    Ok((ss / observed.len() as f64).sqrt())
}

/// Mean of `observed − predicted`; positive values mean underprediction.
pub fn mean_difference(observed: &[f64], predicted: &[f64]) -> Result<f64> {
    check(observed, predicted)?;
    let s: f64 = observed.iter().zip(predicted).map(|(y, p)| y - p).sum();
    Ok(s / observed.len() as f64)
}

/// RMSE as a percentage of the observed mean.
pub fn relative_rmse_pct(observed: &[f64], predicted: &[f64]) -> Result<f64> {
    let r = rmse(observed, predicted)?;
    let mean = observed.iter().sum::<f64>() / observed.len() as f64;
    if mean == 0.0 {
        return Err(Error::Validation("relative RMSE undefined for zero observed mean".into()));
    }
    Ok(100.0 * r / mean)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with the n − 1 divisor.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Columns that are constant or linearly dependent on an intercept and the
/// columns before them, by Gram–Schmidt on the centred data.
pub fn collinear_columns(matrix: &MetricMatrix) -> Vec<String> {
    let n = matrix.nrows();
    let mut basis: Vec<Vec<f64>> = vec![vec![1.0 / (n as f64).sqrt(); n]];
    let mut bad = Vec::new();
    for j in 0..matrix.ncols() {
        let mut v = matrix.column(j);
        let norm0 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || norm <= 1e-10 * norm0 {
            bad.push(matrix.names()[j].clone());
        } else {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    bad
}
