//! Prediction-accuracy and training-cost metrics: RMSE (overall and per
//! sunny/cloudy stratum, in original units), training effort, relative
//! RMSE deltas, and the offsite least-squares scale diagnostic.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use helio_tensor::Scalar;

use crate::data::{day_of, Normalizer};
use crate::error::{CoreError, Result};
use crate::synth::SkyLabel;
use crate::train::{ensemble_predict, EnsembleModel, SiteView, TrainItem};

/// sqrt(mean((pred - truth)^2)).
pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(CoreError::Eval(format!("rmse length mismatch: {} vs {}", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(CoreError::Eval("rmse of empty arrays".into()));
    }
    let sse: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

/// Training effort: epochs-to-convergence times training-set size (the
/// total number of samples seen). Fractional epochs appear when averaging
/// across folds.
pub fn training_effort(epochs: f64, train_size: f64) -> f64 {
    epochs * train_size
}

/// 100 * (candidate - baseline) / baseline; negative means the candidate
/// outperforms the baseline.
pub fn delta_rmse_pct(candidate: f64, baseline: f64) -> Result<f64> {
    if !(baseline > 0.0) {
        return Err(CoreError::Eval(format!("delta_rmse_pct baseline must be positive, got {baseline}")));
    }
    Ok(100.0 * (candidate - baseline) / baseline)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationResult {
    /// Original target units (kW or W/m^2).
    pub rmse_overall: f64,
    pub rmse_sunny: f64,
    pub rmse_cloudy: f64,
    pub n_samples: usize,
    pub n_sunny: usize,
    pub n_cloudy: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_rmse_pct: Option<f64>,
}

impl EvaluationResult {
    /// rmse_overall^2 * N == rmse_sunny^2 * N_s + rmse_cloudy^2 * N_c.
    pub fn stratification_residual(&self) -> f64 {
        let total = self.rmse_overall * self.rmse_overall * self.n_samples as f64;
        let parts = self.rmse_sunny * self.rmse_sunny * self.n_sunny as f64
            + self.rmse_cloudy * self.rmse_cloudy * self.n_cloudy as f64;
        (total - parts).abs() / total.max(1e-300)
    }
}

/// Ensemble-mean evaluation on labelled test samples, reported in original
/// units. Every test day must carry a sunny/cloudy label.
pub fn evaluate<T: Scalar>(
    ensemble: &EnsembleModel<T>,
    views: &[SiteView],
    items: &[TrainItem],
    normalizer: &Normalizer,
    labels: &HashMap<i64, SkyLabel>,
    batch_size: usize,
) -> Result<EvaluationResult> {
    if items.is_empty() {
        return Err(CoreError::Eval("no test samples to evaluate".into()));
    }
    let pred = ensemble_predict(ensemble, views, items, normalizer, batch_size)?;
    let truth: Vec<f64> = items.iter().map(|i| i.target_raw).collect();

    let mut sunny_idx = Vec::new();
    let mut cloudy_idx = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let day = day_of(item.t0);
        match labels.get(&day) {
            Some(SkyLabel::Sunny) => sunny_idx.push(i),
            Some(SkyLabel::Cloudy) => cloudy_idx.push(i),
            None => {
                return Err(CoreError::Eval(format!(
                    "test day {} has no sunny/cloudy label",
                    crate::data::format_day(day)
                )))
            }
        }
    }
    let take = |idx: &[usize]| -> (Vec<f64>, Vec<f64>) {
        (idx.iter().map(|&i| pred[i]).collect(), idx.iter().map(|&i| truth[i]).collect())
    };
    let (ps, ts) = take(&sunny_idx);
    let (pc, tc) = take(&cloudy_idx);
    Ok(EvaluationResult {
        rmse_overall: rmse(&pred, &truth)?,
        rmse_sunny: if ps.is_empty() { f64::NAN } else { rmse(&ps, &ts)? },
        rmse_cloudy: if pc.is_empty() { f64::NAN } else { rmse(&pc, &tc)? },
        n_samples: items.len(),
        n_sunny: sunny_idx.len(),
        n_cloudy: cloudy_idx.len(),
        delta_rmse_pct: None,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScaleDiagnostic {
    /// Least-squares-through-origin factor: <pred,truth> / <pred,pred>.
    pub best_factor: f64,
    pub rmse_before: f64,
    pub rmse_after: f64,
    pub pearson_r: f64,
}

/// Fits a single multiplicative factor to the predictions and reports the
/// RMSE before and after scaling. `rmse_after <= rmse_before` always,
/// since c = 1 is in the search space of the least-squares optimum.
pub fn scale_diagnostic(pred: &[f64], truth: &[f64]) -> Result<ScaleDiagnostic> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(CoreError::Eval("scale diagnostic needs equal-length nonempty arrays".into()));
    }
    let pp: f64 = pred.iter().map(|p| p * p).sum();
    if pp == 0.0 {
        return Err(CoreError::Eval("scale diagnostic on all-zero predictions".into()));
    }
    let n = pred.len() as f64;
    let t_mean = truth.iter().sum::<f64>() / n;
    let t_var = truth.iter().map(|t| (t - t_mean) * (t - t_mean)).sum::<f64>();
    if t_var == 0.0 {
        return Err(CoreError::Eval("scale diagnostic on constant ground truth".into()));
    }
    let pt: f64 = pred.iter().zip(truth).map(|(p, t)| p * t).sum();
    let c = pt / pp;
    let scaled: Vec<f64> = pred.iter().map(|p| c * p).collect();

    let p_mean = pred.iter().sum::<f64>() / n;
    let p_var = pred.iter().map(|p| (p - p_mean) * (p - p_mean)).sum::<f64>();
    let cov: f64 = pred.iter().zip(truth).map(|(p, t)| (p - p_mean) * (t - t_mean)).sum();
    let pearson_r = if p_var == 0.0 { 0.0 } else { cov / (p_var * t_var).sqrt() };

    Ok(ScaleDiagnostic {
        best_factor: c,
        rmse_before: rmse(pred, truth)?,
        rmse_after: rmse(&scaled, truth)?,
        pearson_r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use helio_tensor::DetRng;

    #[test]
    fn rmse_worked_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let r = rmse(&[1.0, 2.0], &[0.0, 0.0]).unwrap();
        assert!((r - 2.5f64.sqrt()).abs() < 1e-15); // sqrt(2.5) ~ 1.5811
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(rmse(&[], &[]).is_err());
    }

    #[test]
    fn rmse_matches_direct_sum_oracle() {
        let mut rng = DetRng::seed(1);
        let p: Vec<f64> = (0..257).map(|_| rng.range(-5.0, 5.0)).collect();
        let t: Vec<f64> = (0..257).map(|_| rng.range(-5.0, 5.0)).collect();
        let mut sse = 0.0;
        for i in 0..p.len() {
            sse += (p[i] - t[i]).powi(2);
        }
        let expect = (sse / p.len() as f64).sqrt();
        assert!((rmse(&p, &t).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn training_effort_reproduces_reported_products() {
        // 11.8 epochs x 85,278 samples ~ 1.01M; 9.6 x 438,172 ~ 4.21M
        let te1 = training_effort(11.8, 85_278.0);
        assert!((te1 - 1_006_280.4).abs() < 1e-6);
        assert_eq!(format!("{:.2}", te1 / 1e6), "1.01");
        let te2 = training_effort(9.6, 438_172.0);
        assert!((te2 - 4_206_451.2).abs() < 1e-6);
        assert_eq!(format!("{:.2}", te2 / 1e6), "4.21");
        assert_eq!(training_effort(1.0, 999.0), 999.0);
    }

    #[test]
    fn delta_rmse_examples() {
        assert_eq!(delta_rmse_pct(5.0, 5.0).unwrap(), 0.0);
        assert_eq!(delta_rmse_pct(90.0, 100.0).unwrap(), -10.0);
        assert_eq!(delta_rmse_pct(40.0, 100.0).unwrap(), -60.0);
        assert!(delta_rmse_pct(1.0, 0.0).is_err());
    }

    #[test]
    fn scale_diagnostic_exact_rescale() {
        let truth: Vec<f64> = (1..=50).map(|i| i as f64).collect();
        let pred: Vec<f64> = truth.iter().map(|t| 0.5 * t).collect();
        let d = scale_diagnostic(&pred, &truth).unwrap();
        assert!((d.best_factor - 2.0).abs() < 1e-12);
        assert!(d.rmse_after < 1e-10);
        assert!(d.rmse_before > 0.0);
        assert!((d.pearson_r - 1.0).abs() < 1e-12);

        let ident = scale_diagnostic(&truth, &truth).unwrap();
        assert!((ident.best_factor - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scale_diagnostic_beats_grid_search_oracle() {
        let mut rng = DetRng::seed(9);
        let truth: Vec<f64> = (0..200).map(|_| rng.range(0.0, 100.0)).collect();
        let pred: Vec<f64> = truth.iter().map(|t| 0.37 * t + rng.range(-5.0, 5.0)).collect();
        let d = scale_diagnostic(&pred, &truth).unwrap();
        // 1-D grid over c in [0,5] step 1e-3: the analytic optimum is
        // no worse than any grid point
        let mut best_grid = f64::INFINITY;
        for step in 0..=5000 {
            let c = step as f64 * 1e-3;
            let scaled: Vec<f64> = pred.iter().map(|p| c * p).collect();
            best_grid = best_grid.min(rmse(&scaled, &truth).unwrap());
        }
        assert!(d.rmse_after <= best_grid + 1e-9, "{} vs grid {}", d.rmse_after, best_grid);
        assert!(d.rmse_after <= d.rmse_before);
    }

    #[test]
    fn scale_diagnostic_rejects_degenerate_inputs() {
        assert!(scale_diagnostic(&[0.0, 0.0], &[1.0, 2.0]).is_err());
        assert!(scale_diagnostic(&[1.0, 2.0], &[3.0, 3.0]).is_err());
    }
}
