//! Evaluation metrics in the row layout used by the reports.

use serde::{Deserialize, Serialize};

use jointdiff::sampler::mean_and_variance;
use jointdiff::{Error, Result};

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a == 0 {
        return Err(Error::InvalidArgument("empty prediction set".into()));
    }
    if a != b {
        return Err(Error::ShapeMismatch {
            expected: vec![b],
            actual: vec![a],
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub n: usize,
    pub mae: f64,
    /// Sample standard deviation of the absolute errors.
    pub mae_std: f64,
    /// Mean over predictions of the unbiased variance of their samples.
    pub mean_sample_variance: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub n: usize,
    pub accuracy: f64,
}

pub fn regression(predictions: &[f64], targets: &[f64], samples: Option<&[Vec<f64>]>) -> Result<RegressionReport> {
    check_lengths(predictions.len(), targets.len())?;
    let errors: Vec<f64> = predictions.iter().zip(targets).map(|(p, t)| (p - t).abs()).collect();
    let (mae, var) = mean_and_variance(&errors);
    let mean_sample_variance = match samples {
        None => None,
        Some(s) => {
            check_lengths(s.len(), predictions.len())?;
            if s.iter().any(|v| v.len() < 2) {
                return Err(Error::InvalidArgument("sample variance needs at least two samples".into()));
            }
            Some(s.iter().map(|v| mean_and_variance(v).1).sum::<f64>() / s.len() as f64)
        }
    };
    Ok(RegressionReport {
        n: errors.len(),
        mae,
        mae_std: var.sqrt(),
        mean_sample_variance,
    })
}

pub fn classification(predictions: &[usize], targets: &[usize]) -> Result<ClassificationReport> {
    check_lengths(predictions.len(), targets.len())?;
    let hits = predictions.iter().zip(targets).filter(|(p, t)| p == t).count();
    Ok(ClassificationReport {
        n: predictions.len(),
        accuracy: hits as f64 / predictions.len() as f64,
    })
}

/// One report row: method, conditioning set, then the metric columns.
pub fn table_header() -> &'static str {
    "method\tknown\tn\tMAE\tMAE_std\tACC\tmean_sample_variance"
}

pub fn regression_row(method: &str, known: &str, r: &RegressionReport) -> String {
    let var = r.mean_sample_variance.map_or("-".to_string(), |v| format!("{v:.4}"));
    format!("{method}\t{known}\t{}\t{:.4}\t{:.4}\t-\t{var}", r.n, r.mae, r.mae_std)
}

pub fn classification_row(method: &str, known: &str, r: &ClassificationReport) -> String {
    format!("{method}\t{known}\t{}\t-\t-\t{:.4}\t-", r.n, r.accuracy)
}
