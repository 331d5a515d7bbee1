//! Valid-sample indexing.
//!
//! A timestamp t0 yields a sample iff the target measurement exists at
//! t0+15 and all 8 input frames *and* 8 concurrent measurements exist at
//! t0-14, t0-12, ..., t0. Candidate t0s sit on the stride grid
//! (`t0 % stride == 0`).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::data::dataset::{format_minutes, parse_minutes, SiteDataset};
use crate::error::{CoreError, Result};

/// Input history length (frames and lag values).
pub const LAG_STEPS: usize = 8;
/// Spacing of input frames in minutes.
pub const FRAME_STEP_MIN: i64 = 2;
/// Forecast horizon in minutes.
pub const HORIZON_MIN: i64 = 15;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t0: i64,
    /// t0-14, t0-12, ..., t0.
    pub frame_times: [i64; LAG_STEPS],
    /// Measurements at the frame times (raw units).
    pub lag_values: [f64; LAG_STEPS],
    /// Measurement at t0+15 (raw units).
    pub target: f64,
}

pub fn frame_times(t0: i64) -> [i64; LAG_STEPS] {
    std::array::from_fn(|k| t0 - FRAME_STEP_MIN * (LAG_STEPS as i64 - 1 - k as i64))
}

/// Enumerates valid samples in chronological order.
pub fn build_sample_index(dataset: &SiteDataset, stride_minutes: i64) -> Result<Vec<Sample>> {
    if stride_minutes < 1 {
        return Err(CoreError::Data(format!("stride must be >= 1 minute, got {stride_minutes}")));
    }
    let mut images: BTreeMap<i64, bool> = BTreeMap::new();
    let mut measurements: BTreeMap<i64, f64> = BTreeMap::new();
    for r in &dataset.records {
        if r.image.is_some() {
            images.insert(r.timestamp, true);
        }
        if let Some(m) = r.measurement {
            measurements.insert(r.timestamp, m);
        }
    }

    let mut samples = Vec::new();
    'candidates: for r in &dataset.records {
        let t0 = r.timestamp;
        if t0.rem_euclid(stride_minutes) != 0 {
            continue;
        }
        let Some(&target) = measurements.get(&(t0 + HORIZON_MIN)) else { continue };
        let times = frame_times(t0);
        let mut lags = [0.0; LAG_STEPS];
        for (k, t) in times.iter().enumerate() {
            if !images.contains_key(t) {
                continue 'candidates;
            }
            match measurements.get(t) {
                Some(&m) => lags[k] = m,
                None => continue 'candidates,
            }
        }
        samples.push(Sample { t0, frame_times: times, lag_values: lags, target });
    }
    Ok(samples)
}

/// Writes the `index.csv` cache: `t0,target,f1..f8` with ISO timestamps.
pub fn save_index(samples: &[Sample], path: &Path) -> Result<()> {
    let mut out = String::from("t0,target,f1,f2,f3,f4,f5,f6,f7,f8\n");
    for s in samples {
        out.push_str(&format_minutes(s.t0));
        out.push(',');
        out.push_str(&s.target.to_string());
        for t in s.frame_times {
            out.push(',');
            out.push_str(&format_minutes(t));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| CoreError::io(path, e))
}

/// Reads an `index.csv` cache; lag values are re-read from the dataset by
/// the caller if needed (the cache stores identity, targets and frames).
pub fn load_index(path: &Path, dataset: &SiteDataset) -> Result<Vec<Sample>> {
    let mut measurements: BTreeMap<i64, f64> = BTreeMap::new();
    for r in &dataset.records {
        if let Some(m) = r.measurement {
            measurements.insert(r.timestamp, m);
        }
    }
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CoreError::Data(format!("{}: {e}", path.display())))?;
    let mut samples = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| CoreError::Data(format!("{}: {e}", path.display())))?;
        if row.len() != 2 + LAG_STEPS {
            return Err(CoreError::Data(format!("{}: expected {} columns", path.display(), 2 + LAG_STEPS)));
        }
        let t0 = parse_minutes(&row[0])?;
        let target: f64 = row[1]
            .parse()
            .map_err(|e| CoreError::Data(format!("{}: bad target '{}': {e}", path.display(), &row[1])))?;
        let mut times = [0i64; LAG_STEPS];
        let mut lags = [0.0; LAG_STEPS];
        for k in 0..LAG_STEPS {
            times[k] = parse_minutes(&row[2 + k])?;
            lags[k] = *measurements.get(&times[k]).ok_or_else(|| {
                CoreError::Data(format!(
                    "{}: cached frame {} has no measurement in dataset",
                    path.display(),
                    &row[2 + k]
                ))
            })?;
        }
        samples.push(Sample { t0, frame_times: times, lag_values: lags, target });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset::{Record, SiteDataset, SiteMeta, SkyImage, TargetKind};

    /// Complete synthetic span: measurements every minute, images on the
    /// 2-minute grid.
    fn make_dataset(start: i64, len_min: i64) -> SiteDataset {
        let records = (0..=len_min)
            .map(|m| {
                let ts = start + m;
                Record {
                    timestamp: ts,
                    image: (ts % 2 == 0).then(|| SkyImage::new(4)),
                    measurement: Some(100.0 + ts as f64),
                }
            })
            .collect();
        SiteDataset {
            meta: SiteMeta {
                site_id: "t".into(),
                target_kind: TargetKind::Irradiance,
                units: "W/m^2".into(),
                capacity: None,
                image_size: 4,
                extra: Default::default(),
            },
            records,
        }
    }

    #[test]
    fn complete_day_yields_stride_grid() {
        let ds = make_dataset(1_000_000, 200);
        let samples = build_sample_index(&ds, 2).unwrap();
        assert!(!samples.is_empty());
        // earliest t0 has full history, latest leaves room for the target
        assert_eq!(samples.first().unwrap().t0, 1_000_014);
        assert_eq!(samples.last().unwrap().t0, 1_000_184);
        for pair in samples.windows(2) {
            assert_eq!(pair[1].t0 - pair[0].t0, 2);
        }
        let s = &samples[0];
        assert_eq!(s.frame_times[0], s.t0 - 14);
        assert_eq!(s.frame_times[7], s.t0);
        assert_eq!(s.target, 100.0 + (s.t0 + 15) as f64);
        assert_eq!(s.lag_values[3], 100.0 + (s.t0 - 8) as f64);
    }

    #[test]
    fn missing_frame_drops_exactly_that_t0() {
        let mut ds = make_dataset(2_000_000, 120);
        let full = build_sample_index(&ds, 2).unwrap();
        let victim = full[10].t0;
        // delete the image at victim-6 (a frame for victim and neighbors)
        for r in &mut ds.records {
            if r.timestamp == victim - 6 {
                r.image = None;
            }
        }
        let pruned = build_sample_index(&ds, 2).unwrap();
        let t0s: Vec<i64> = pruned.iter().map(|s| s.t0).collect();
        assert!(!t0s.contains(&victim));
        // t0s whose 14-minute window misses the hole are unaffected
        assert!(t0s.contains(&(victim + 10)));
        assert!(t0s.contains(&(victim - 8)));
        // the hole at victim-6 is a frame for every t0 in [victim-6, victim+8]
        assert_eq!(full.len() - pruned.len(), 8);
    }

    #[test]
    fn empty_dataset_yields_empty_index() {
        let ds = make_dataset(0, 200);
        let empty = SiteDataset { meta: ds.meta.clone(), records: vec![] };
        assert!(build_sample_index(&empty, 2).unwrap().is_empty());
    }

    #[test]
    fn index_cache_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let ds = make_dataset(3_000_000, 120);
        let samples = build_sample_index(&ds, 2).unwrap();
        let path = dir.path().join("index.csv");
        save_index(&samples, &path).unwrap();
        let loaded = load_index(&path, &ds).unwrap();
        assert_eq!(samples, loaded);
    }
}
