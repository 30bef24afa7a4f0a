use crate::error::{Error, Result};

pub const BCE_EPS: f32 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct BceOutput {
    /// Sum of per-sample losses.
    pub sum: f32,
    /// `sum / n`.
    pub mean: f32,
    /// Gradient of `mean` with respect to each prediction.
    pub grad: Vec<f32>,
}

/// Mean binary cross-entropy over predictions clamped to `[eps, 1 - eps]`.
pub fn bce_loss(pred: &[f32], labels: &[f32]) -> Result<BceOutput> {
    if pred.len() != labels.len() || pred.is_empty() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            pred.len(),
            labels.len()
        )));
    }
    let n = pred.len() as f32;
    let mut sum = 0.0f64;
    let grad = pred
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            sum -= (y * p.ln() + (1.0 - y) * (1.0 - p).ln()) as f64;
            (p - y) / (p * (1.0 - p)) / n
        })
        .collect();
    let sum = sum as f32;
    Ok(BceOutput {
        sum,
        mean: sum / n,
        grad,
    })
}
