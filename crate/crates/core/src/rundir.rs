//! Experiment run directory: fully resolved config, per-fold ledger,
//! fold checkpoints, fitted normalizers and a platform manifest —
//! everything needed to re-run or evaluate the experiment.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use helio_tensor::Scalar;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::Normalizer;
use crate::error::{CoreError, Result};
use crate::train::{EnsembleModel, FoldLedger, TrainingLedger};

pub const LEDGER_HEADER: &str = "fold,epochs,train_size,TE,best_val_loss";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    pub platform: String,
    pub wall_time_s: f64,
    pub precision: String,
    /// Fixed engine hyperparameters, recorded for reproducibility.
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

impl RunManifest {
    pub fn current<T: Scalar>(wall_time_s: f64) -> Self {
        RunManifest {
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            platform: format!("{}-{}", std::env::consts::OS, std::env::consts::ARCH),
            wall_time_s,
            precision: T::NAME.to_string(),
            bn_eps: helio_tensor::BN_EPS,
            bn_momentum: helio_tensor::BN_MOMENTUM,
            adam_beta1: helio_tensor::ADAM_BETA1,
            adam_beta2: helio_tensor::ADAM_BETA2,
            adam_epsilon: helio_tensor::ADAM_EPS,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NormalizerRecord {
    site_id: String,
    #[serde(flatten)]
    normalizer: Normalizer,
}

fn ckpt_path(dir: &Path, fold: usize) -> PathBuf {
    dir.join(format!("fold_{fold:02}.ckpt"))
}

pub fn write_run_dir<T: Scalar>(
    dir: &Path,
    resolved_config: &serde_json::Value,
    ensemble: &EnsembleModel<T>,
    ledger: &TrainingLedger,
    wall_time_s: f64,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(resolved_config).expect("config json"))
        .map_err(|e| CoreError::io(dir.join("config.json"), e))?;

    let mut csv = String::from(LEDGER_HEADER);
    csv.push('\n');
    for f in &ledger.folds {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            f.fold, f.epochs_run, f.train_size, f.te, f.best_val_loss
        ));
    }
    fs::write(dir.join("ledger.csv"), csv).map_err(|e| CoreError::io(dir.join("ledger.csv"), e))?;

    for (i, params) in ensemble.folds.iter().enumerate() {
        save_checkpoint(params, &ensemble.config, ensemble.fold_seeds[i], &ckpt_path(dir, i))?;
    }

    let norms: Vec<NormalizerRecord> = ensemble
        .normalizers
        .iter()
        .map(|(site_id, normalizer)| NormalizerRecord { site_id: site_id.clone(), normalizer: *normalizer })
        .collect();
    fs::write(dir.join("normalizers.json"), serde_json::to_string_pretty(&norms).expect("normalizers json"))
        .map_err(|e| CoreError::io(dir.join("normalizers.json"), e))?;

    let manifest = RunManifest::current::<T>(wall_time_s);
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("manifest json"))
        .map_err(|e| CoreError::io(dir.join("manifest.json"), e))?;
    Ok(())
}

pub fn read_ledger(dir: &Path) -> Result<TrainingLedger> {
    let path = dir.join("ledger.csv");
    let text = fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == LEDGER_HEADER => {}
        other => return Err(CoreError::Data(format!("unexpected ledger header: {other:?}"))),
    }
    let mut ledger = TrainingLedger::default();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(CoreError::Data(format!("ledger row has {} columns", cols.len())));
        }
        ledger.folds.push(FoldLedger {
            fold: cols[0].parse().map_err(|e| CoreError::Data(format!("ledger fold: {e}")))?,
            epochs_run: cols[1].parse().map_err(|e| CoreError::Data(format!("ledger epochs: {e}")))?,
            train_size: cols[2].parse().map_err(|e| CoreError::Data(format!("ledger train_size: {e}")))?,
            te: cols[3].parse().map_err(|e| CoreError::Data(format!("ledger TE: {e}")))?,
            best_val_loss: cols[4].parse().map_err(|e| CoreError::Data(format!("ledger loss: {e}")))?,
        });
    }
    Ok(ledger)
}

/// Loads the ensemble back from a run directory. Fold checkpoints must be
/// contiguous from fold_00; the error names the first missing one.
pub fn load_run_dir<T: Scalar>(dir: &Path) -> Result<(EnsembleModel<T>, TrainingLedger)> {
    let ledger = read_ledger(dir)?;
    let k = ledger.folds.len();
    let mut folds = Vec::with_capacity(k);
    let mut fold_seeds = Vec::with_capacity(k);
    let mut config = None;
    for i in 0..k {
        let path = ckpt_path(dir, i);
        if !path.exists() {
            return Err(CoreError::Checkpoint(format!("missing checkpoint for fold {i}: {}", path.display())));
        }
        let (params, manifest) = load_checkpoint::<T>(&path)?;
        fold_seeds.push(manifest.seed);
        match &config {
            None => config = Some(manifest.config),
            Some(c) => {
                if *c != manifest.config {
                    return Err(CoreError::Checkpoint(format!("fold {i} config differs from fold 0")));
                }
            }
        }
        folds.push(params);
    }
    let config = config.ok_or_else(|| CoreError::Checkpoint("run directory has no folds".into()))?;

    let norm_path = dir.join("normalizers.json");
    let norms: Vec<NormalizerRecord> = serde_json::from_str(
        &fs::read_to_string(&norm_path).map_err(|e| CoreError::io(&norm_path, e))?,
    )
    .map_err(|e| CoreError::Data(format!("{}: {e}", norm_path.display())))?;

    Ok((
        EnsembleModel {
            config,
            folds,
            fold_seeds,
            normalizers: norms.into_iter().map(|r| (r.site_id, r.normalizer)).collect(),
        },
        ledger,
    ))
}
