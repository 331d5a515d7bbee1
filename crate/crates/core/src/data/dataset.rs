//! On-disk and in-memory dataset representation.
//!
//! A site dataset is a directory:
//!   meta.json            site_id, target_kind, units, capacity, image size
//!   measurements.csv     header `timestamp,value`, ISO-8601 minutes
//!   images/<ts>.png      lossless 8-bit RGB, one per imaged timestamp
//!
//! Timestamps are minutes since the Unix epoch in memory and ISO-8601
//! minute strings (`2021-06-01T08:30`) on disk.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const MINUTES_PER_DAY: i64 = 1440;

pub fn format_minutes(ts: i64) -> String {
    let dt = DateTime::from_timestamp(ts * 60, 0).expect("timestamp in range");
    dt.naive_utc().format("%Y-%m-%dT%H:%M").to_string()
}

pub fn parse_minutes(s: &str) -> Result<i64> {
    let dt = NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M")
        .map_err(|e| CoreError::Data(format!("bad timestamp '{s}': {e}")))?;
    Ok(dt.and_utc().timestamp() / 60)
}

/// Calendar-day index of a timestamp (UTC).
pub fn day_of(ts: i64) -> i64 {
    ts.div_euclid(MINUTES_PER_DAY)
}

pub fn format_day(day: i64) -> String {
    let dt = DateTime::from_timestamp(day * MINUTES_PER_DAY * 60, 0).expect("day in range");
    dt.naive_utc().date().format("%Y-%m-%d").to_string()
}

pub fn parse_day(s: &str) -> Result<i64> {
    let d = NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .map_err(|e| CoreError::Data(format!("bad date '{s}': {e}")))?;
    Ok(day_of(d.and_hms_opt(0, 0, 0).unwrap().and_utc().timestamp() / 60))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    PvPower,
    Irradiance,
}

impl TargetKind {
    pub fn units(&self) -> &'static str {
        match self {
            TargetKind::PvPower => "kW",
            TargetKind::Irradiance => "W/m^2",
        }
    }
}

/// 8-bit RGB sky image, square.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkyImage {
    pub size: u32,
    /// Row-major RGB triples, `3 * size * size` bytes.
    pub data: Vec<u8>,
}

impl SkyImage {
    pub fn new(size: u32) -> Self {
        SkyImage { size, data: vec![0; (size * size * 3) as usize] }
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: u32, y: u32) -> &mut [u8] {
        let i = ((y * self.size + x) * 3) as usize;
        &mut self.data[i..i + 3]
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = ((y * self.size + x) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub timestamp: i64,
    pub image: Option<SkyImage>,
    pub measurement: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SiteMeta {
    pub site_id: String,
    pub target_kind: TargetKind,
    pub units: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<f64>,
    pub image_size: u32,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct SiteDataset {
    pub meta: SiteMeta,
    /// Strictly increasing by timestamp.
    pub records: Vec<Record>,
}

impl SiteDataset {
    pub fn validate(&self) -> Result<()> {
        for pair in self.records.windows(2) {
            if pair[1].timestamp <= pair[0].timestamp {
                return Err(CoreError::Data(format!(
                    "site {}: timestamps not strictly increasing at {}",
                    self.meta.site_id,
                    format_minutes(pair[1].timestamp)
                )));
            }
        }
        for r in &self.records {
            if let Some(m) = r.measurement {
                if !(m >= 0.0) {
                    return Err(CoreError::Data(format!(
                        "site {}: negative or non-finite measurement {m} at {}",
                        self.meta.site_id,
                        format_minutes(r.timestamp)
                    )));
                }
            }
            if let Some(img) = &r.image {
                if img.size != self.meta.image_size || img.data.len() != (img.size * img.size * 3) as usize {
                    return Err(CoreError::Data(format!(
                        "site {}: image size mismatch at {}",
                        self.meta.site_id,
                        format_minutes(r.timestamp)
                    )));
                }
            }
        }
        Ok(())
    }

    /// Distinct calendar days with any record, ascending.
    pub fn days(&self) -> Vec<i64> {
        let mut days: Vec<i64> = self.records.iter().map(|r| day_of(r.timestamp)).collect();
        days.dedup();
        days
    }

    /// Measurements recorded on the given days, in time order.
    pub fn measurements_on_days(&self, days: &[i64]) -> Vec<f64> {
        let set: std::collections::BTreeSet<i64> = days.iter().copied().collect();
        self.records
            .iter()
            .filter(|r| set.contains(&day_of(r.timestamp)))
            .filter_map(|r| r.measurement)
            .collect()
    }
}

pub fn save_dataset(ds: &SiteDataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir.join("images")).map_err(|e| CoreError::io(dir, e))?;
    let meta = serde_json::to_string_pretty(&ds.meta).expect("meta serializes");
    fs::write(dir.join("meta.json"), meta).map_err(|e| CoreError::io(dir.join("meta.json"), e))?;

    let mut csv = String::from("timestamp,value\n");
    for r in &ds.records {
        if let Some(m) = r.measurement {
            csv.push_str(&format!("{},{}\n", format_minutes(r.timestamp), m));
        }
    }
    fs::write(dir.join("measurements.csv"), csv)
        .map_err(|e| CoreError::io(dir.join("measurements.csv"), e))?;

    for r in &ds.records {
        if let Some(img) = &r.image {
            let path = dir.join("images").join(format!("{}.png", format_minutes(r.timestamp)));
            let buf = image::RgbImage::from_raw(img.size, img.size, img.data.clone())
                .ok_or_else(|| CoreError::Data("image buffer size mismatch".into()))?;
            buf.save_with_format(&path, image::ImageFormat::Png)
                .map_err(|e| CoreError::Data(format!("writing {}: {e}", path.display())))?;
        }
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<SiteDataset> {
    let meta_path = dir.join("meta.json");
    let meta: SiteMeta = serde_json::from_str(
        &fs::read_to_string(&meta_path).map_err(|e| CoreError::io(&meta_path, e))?,
    )
    .map_err(|e| CoreError::Data(format!("{}: {e}", meta_path.display())))?;

    let mut by_ts: BTreeMap<i64, Record> = BTreeMap::new();

    let csv_path = dir.join("measurements.csv");
    let mut rdr = csv::Reader::from_path(&csv_path).map_err(|e| CoreError::Data(format!("{}: {e}", csv_path.display())))?;
    for row in rdr.records() {
        let row = row.map_err(|e| CoreError::Data(format!("{}: {e}", csv_path.display())))?;
        if row.len() != 2 {
            return Err(CoreError::Data(format!("{}: expected 2 columns", csv_path.display())));
        }
        let ts = parse_minutes(&row[0])?;
        let value: f64 = row[1]
            .parse()
            .map_err(|e| CoreError::Data(format!("{}: bad value '{}': {e}", csv_path.display(), &row[1])))?;
        by_ts.entry(ts).or_insert(Record { timestamp: ts, image: None, measurement: None }).measurement =
            Some(value);
    }

    let images_dir = dir.join("images");
    if images_dir.is_dir() {
        let mut names: Vec<_> = fs::read_dir(&images_dir)
            .map_err(|e| CoreError::io(&images_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
            .filter(|n| n.ends_with(".png"))
            .collect();
        names.sort();
        for name in names {
            let ts = parse_minutes(name.trim_end_matches(".png"))?;
            let path = images_dir.join(&name);
            let img = image::open(&path)
                .map_err(|e| CoreError::Data(format!("{}: {e}", path.display())))?
                .into_rgb8();
            if img.width() != img.height() {
                return Err(CoreError::Data(format!("{}: image not square", path.display())));
            }
            let sky = SkyImage { size: img.width(), data: img.into_raw() };
            by_ts.entry(ts).or_insert(Record { timestamp: ts, image: None, measurement: None }).image = Some(sky);
        }
    }

    let ds = SiteDataset { meta, records: by_ts.into_values().collect() };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timestamp_round_trip() {
        let ts = parse_minutes("2021-06-01T08:30").unwrap();
        assert_eq!(format_minutes(ts), "2021-06-01T08:30");
        assert_eq!(format_day(day_of(ts)), "2021-06-01");
        assert_eq!(parse_day("2021-06-01").unwrap(), day_of(ts));
    }

    #[test]
    fn validation_rejects_disorder_and_negatives() {
        let meta = SiteMeta {
            site_id: "s".into(),
            target_kind: TargetKind::PvPower,
            units: "kW".into(),
            capacity: None,
            image_size: 4,
            extra: BTreeMap::new(),
        };
        let mk = |ts, m| Record { timestamp: ts, image: None, measurement: m };
        let bad_order = SiteDataset { meta: meta.clone(), records: vec![mk(5, None), mk(5, None)] };
        assert!(bad_order.validate().is_err());
        let bad_value = SiteDataset { meta, records: vec![mk(1, Some(-2.0))] };
        assert!(bad_value.validate().is_err());
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = SkyImage::new(4);
        img.pixel_mut(1, 2).copy_from_slice(&[10, 200, 30]);
        let ds = SiteDataset {
            meta: SiteMeta {
                site_id: "site-x".into(),
                target_kind: TargetKind::Irradiance,
                units: "W/m^2".into(),
                capacity: Some(1000.0),
                image_size: 4,
                extra: BTreeMap::new(),
            },
            records: vec![
                Record { timestamp: 27_030_000, image: Some(img.clone()), measurement: Some(512.25) },
                Record { timestamp: 27_030_001, image: None, measurement: Some(500.0) },
                Record { timestamp: 27_030_002, image: Some(img), measurement: None },
            ],
        };
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.meta.site_id, "site-x");
        assert_eq!(loaded.records.len(), 3);
        assert_eq!(loaded.records[0].measurement, Some(512.25));
        assert_eq!(loaded.records[0].image.as_ref().unwrap().pixel(1, 2), [10, 200, 30]);
        assert_eq!(loaded.records[1].image, None);
        assert_eq!(loaded.records[2].measurement, None);
    }
}
