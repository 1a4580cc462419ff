//! Prediction accuracy metrics.

use crate::channel::ComplexValue;
use crate::error::{domain, Result};

/// Normalized mean square error `sum |pred - truth|^2 / sum |truth|^2`.
pub fn nmse(truth: &[ComplexValue], pred: &[ComplexValue]) -> Result<f64> {
    if truth.len() != pred.len() {
        return domain(format!("nmse length mismatch: {} vs {}", truth.len(), pred.len()));
    }
    if truth.is_empty() {
        return domain("nmse over an empty set");
    }
    let power: f64 = truth.iter().map(|h| h.norm_sqr()).sum();
    if !(power > 0.0) {
        return domain("nmse normalizer is zero");
    }
    let err: f64 = truth.iter().zip(pred).map(|(h, p)| (p - h).norm_sqr()).sum();
    Ok(err / power)
}

/// Prediction SNR in dB, `-10 log10(nmse)`.
pub fn snr_db(nmse: f64) -> Result<f64> {
    if !(nmse > 0.0) {
        return domain(format!("snr is undefined for nmse {nmse}"));
    }
    Ok(-10.0 * nmse.log10())
}

/// SNR of a prediction set, reporting `+inf` for an exact match.
pub fn prediction_snr_db(truth: &[ComplexValue], pred: &[ComplexValue]) -> Result<f64> {
    let e = nmse(truth, pred)?;
    if e == 0.0 {
        Ok(f64::INFINITY)
    } else {
        snr_db(e)
    }
}
