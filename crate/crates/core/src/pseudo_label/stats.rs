use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{rank_order, selection_count, PseudoLabelRecord};
use crate::error::{DmtError, Result};

/// Confidence quantiles reported alongside the overall error rate.
pub const REPORT_QUANTILES: [f64; 4] = [0.8, 0.6, 0.4, 0.2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileError {
    /// Fraction of the most confident records considered.
    pub fraction: f64,
    pub count: usize,
    pub errors: usize,
    /// `None` when the quantile holds no records.
    pub error_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub total: usize,
    pub errors: usize,
    pub overall_error_rate: Option<f64>,
    /// Ordered from the widest quantile (top-80%) to the tightest (top-20%).
    pub quantiles: Vec<QuantileError>,
}

/// Error rate of labeled records against ground truth, overall and within
/// the most confident 80/60/40/20 percent. Ignored records are skipped.
pub fn pseudo_label_error_stats(
    records: &[PseudoLabelRecord],
    ground_truth: &HashMap<String, usize>,
) -> Result<ErrorReport> {
    let mut ranked: Vec<(f64, usize, bool)> = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let Some(label) = r.label else { continue };
        let truth = ground_truth.get(&r.sample_id).ok_or_else(|| {
            DmtError::validation(format!("no ground truth for sample {}", r.sample_id))
        })?;
        ranked.push((r.confidence, i, label != *truth));
    }
    ranked.sort_by(|a, b| rank_order((a.0, a.1), (b.0, b.1)));

    let rate = |count: usize, errors: usize| (count > 0).then(|| errors as f64 / count as f64);
    let total = ranked.len();
    let errors = ranked.iter().filter(|r| r.2).count();
    let quantiles = REPORT_QUANTILES
        .iter()
        .map(|&fraction| {
            let count = selection_count(fraction, total);
            let errs = ranked[..count].iter().filter(|r| r.2).count();
            QuantileError {
                fraction,
                count,
                errors: errs,
                error_rate: rate(count, errs),
            }
        })
        .collect();
    Ok(ErrorReport {
        total,
        errors,
        overall_error_rate: rate(total, errors),
        quantiles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pseudo_label::LabelSource;

    fn fixture(wrong_at: Option<usize>) -> (Vec<PseudoLabelRecord>, HashMap<String, usize>) {
        let src = LabelSource::new("f0", 1);
        let mut records = Vec::new();
        let mut truth = HashMap::new();
        for i in 0..10 {
            let id = format!("s{i}");
            // confidence increases with i, so s0 is least confident
            let conf = 0.5 + 0.05 * i as f64;
            let label = if Some(i) == wrong_at { 1 } else { 0 };
            records.push(PseudoLabelRecord::new(&id, Some(label), conf, &src).unwrap());
            truth.insert(id, 0);
        }
        (records, truth)
    }

    #[test]
    fn all_correct() {
        let (records, truth) = fixture(None);
        let rep = pseudo_label_error_stats(&records, &truth).unwrap();
        assert_eq!(rep.overall_error_rate, Some(0.0));
        assert!(rep.quantiles.iter().all(|q| q.error_rate == Some(0.0)));
    }

    #[test]
    fn error_at_lowest_confidence() {
        let (records, truth) = fixture(Some(0));
        let rep = pseudo_label_error_stats(&records, &truth).unwrap();
        assert_eq!(rep.overall_error_rate, Some(0.1));
        let top20 = rep.quantiles.last().unwrap();
        assert_eq!(top20.fraction, 0.2);
        assert_eq!(top20.count, 2);
        assert_eq!(top20.error_rate, Some(0.0));
        let rates: Vec<f64> = rep
            .quantiles
            .iter()
            .map(|q| q.error_rate.unwrap())
            .collect();
        assert!(rates.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn missing_truth_is_error() {
        let (records, mut truth) = fixture(None);
        truth.remove("s3");
        assert!(pseudo_label_error_stats(&records, &truth).is_err());
    }
}
