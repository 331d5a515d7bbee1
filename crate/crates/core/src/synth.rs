//! Deterministic synthetic sites: a sun disk tracking a fixed arc over a
//! gradient sky, Gaussian-blob clouds advected with a seeded random walk,
//! per-site tint and peak scale, and measurements driven by a sinusoidal
//! clear-sky envelope times a sun-occlusion factor. Three presets emulate
//! a clear PV site, a cloudy irradiance site and a dusty irradiance site.
//!
//! Every number below is a generator choice, picked to make heterogeneity
//! visible at desk scale. Identical (regime, seed) yields byte-identical
//! output.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use helio_tensor::DetRng;

use crate::data::dataset::{
    format_day, save_dataset, Record, SiteDataset, SiteMeta, SkyImage, TargetKind, MINUTES_PER_DAY,
};
use crate::error::{CoreError, Result};

/// Multiplicative measurement noise sigma (fraction of the instantaneous
/// value); draws are clamped to +/-4 sigma so the peak bound holds.
pub const NOISE_SIGMA: f64 = 0.01;
const NOISE_CLAMP: f64 = 4.0;
/// Occlusion: factor = 1 - 0.8 * (fraction of the sun disk covered).
const OCCLUSION_DEPTH: f64 = 0.8;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteRegime {
    pub site_id: String,
    pub target_kind: TargetKind,
    /// Peak clear-sky measurement (kW or W/m^2).
    pub peak_scale: f64,
    pub cloudy_day_prob: f64,
    /// Inclusive cloud-count range on cloudy days.
    pub cloud_count_range: [usize; 2],
    /// Cloud drift in pixels per minute.
    pub cloud_speed: f64,
    /// RGB multipliers in (0,1]; a dusty site damps blue.
    pub tint: [f64; 3],
    /// Per-day attenuation factor range (dust/haze); [1,1] disables it.
    pub dust_range: [f64; 2],
    pub day_count: usize,
    pub day_length_minutes: i64,
    pub image_size: u32,
    pub seed: u64,
    /// First generated calendar day (days since epoch).
    pub start_day: i64,
}

impl SiteRegime {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_scale > 0.0) {
            return Err(CoreError::Config("regime.peak_scale must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cloudy_day_prob) {
            return Err(CoreError::Config("regime.cloudy_day_prob must be in [0,1]".into()));
        }
        if self.tint.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(CoreError::Config("regime.tint components must be in (0,1]".into()));
        }
        if self.cloud_count_range[0] > self.cloud_count_range[1] {
            return Err(CoreError::Config("regime.cloud_count_range must be lo <= hi".into()));
        }
        if self.dust_range[0] > self.dust_range[1] || self.dust_range[0] <= 0.0 || self.dust_range[1] > 1.0 {
            return Err(CoreError::Config("regime.dust_range must satisfy 0 < lo <= hi <= 1".into()));
        }
        if self.day_count == 0 || self.day_length_minutes < 40 || self.day_length_minutes >= MINUTES_PER_DAY {
            return Err(CoreError::Config("regime day_count / day_length_minutes out of range".into()));
        }
        if self.image_size < 8 {
            return Err(CoreError::Config("regime.image_size must be at least 8".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkyLabel {
    Sunny,
    Cloudy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DayLabel {
    /// Calendar day (days since epoch).
    pub day: i64,
    pub label: SkyLabel,
}

/// Clear-sky envelope in [0,1]: sin(pi * m / L) clipped at 0, peak 1 at
/// midday, symmetric, exactly zero at the day boundaries.
pub fn clear_sky_envelope(minute_of_day: i64, day_length: i64) -> f64 {
    if minute_of_day <= 0 || minute_of_day >= day_length {
        return 0.0;
    }
    (std::f64::consts::PI * minute_of_day as f64 / day_length as f64).sin().max(0.0)
}

/// Sun-disk center on its arc, in pixel coordinates.
pub fn sun_position(minute_of_day: i64, day_length: i64, image_size: u32) -> (f64, f64) {
    let s = f64::from(image_size);
    let frac = minute_of_day as f64 / day_length as f64;
    let env = clear_sky_envelope(minute_of_day, day_length);
    ((0.08 + 0.84 * frac) * s, (0.88 - 0.72 * env) * s)
}

struct Cloud {
    /// Pixel center per minute of day.
    track: Vec<(f64, f64)>,
    radius: f64,
    intensity: f64,
}

impl Cloud {
    fn alpha(&self, m: usize, x: f64, y: f64) -> f64 {
        let (cx, cy) = self.track[m];
        let d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        self.intensity * (-d2 / (2.0 * self.radius * self.radius)).exp()
    }
}

fn make_clouds(regime: &SiteRegime, day: usize, rng: &mut DetRng) -> Vec<Cloud> {
    let _ = day;
    let s = f64::from(regime.image_size);
    let [lo, hi] = regime.cloud_count_range;
    let count = lo + rng.index(hi - lo + 1);
    let dir = rng.range(0.0, std::f64::consts::TAU);
    let (dx, dy) = (dir.cos(), dir.sin() * 0.3); // mostly horizontal drift
    let minutes = regime.day_length_minutes as usize + 1;
    (0..count)
        .map(|_| {
            let mut x = rng.range(-0.25 * s, 1.25 * s);
            let mut y = rng.range(0.05 * s, 0.95 * s);
            let speed = regime.cloud_speed * rng.range(0.7, 1.3);
            let mut track = Vec::with_capacity(minutes);
            for _ in 0..minutes {
                track.push((x, y));
                x += dx * speed + rng.normal() * 0.15;
                y += dy * speed + rng.normal() * 0.1;
                // wrap horizontally so the field stays populated all day
                let span = 1.5 * s;
                if x > 1.25 * s {
                    x -= span;
                } else if x < -0.25 * s {
                    x += span;
                }
            }
            Cloud { track, radius: rng.range(0.12 * s, 0.30 * s), intensity: rng.range(0.6, 0.95) }
        })
        .collect()
}

fn render_frame(
    regime: &SiteRegime,
    minute_of_day: i64,
    day_length: i64,
    clouds: &[Cloud],
) -> (SkyImage, f64) {
    let size = regime.image_size;
    let s = f64::from(size);
    let (sun_x, sun_y) = sun_position(minute_of_day, day_length, size);
    let sun_r = (s / 10.0).max(2.0);
    let m = minute_of_day as usize;

    let mut img = SkyImage::new(size);
    let mut covered = 0.0f64;
    let mut disk_px = 0.0f64;
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (f64::from(x) + 0.5, f64::from(y) + 0.5);
            // vertical sky gradient
            let t = fy / s;
            let mut r = 96.0 + 44.0 * t;
            let mut g = 140.0 + 36.0 * t;
            let mut b = 205.0 + 28.0 * t;
            // sun disk: brightness falls off from the center, so the
            // luminance argmax pins the disk position
            let d = ((fx - sun_x) * (fx - sun_x) + (fy - sun_y) * (fy - sun_y)).sqrt();
            if d < sun_r + 1.5 {
                let core = (1.0 - d / (sun_r + 1.5)).clamp(0.0, 1.0);
                r += (255.0 - r) * core;
                g += (252.0 - g) * core;
                b += (228.0 - b) * core;
            }
            // cloud cover (screen blend of blob alphas)
            let mut clear = 1.0;
            for c in clouds {
                clear *= 1.0 - c.alpha(m, fx, fy).min(0.999);
            }
            let alpha = 1.0 - clear;
            r += (231.0 - r) * alpha;
            g += (233.0 - g) * alpha;
            b += (238.0 - b) * alpha;
            if d < sun_r {
                covered += alpha;
                disk_px += 1.0;
            }
            let px = img.pixel_mut(x, y);
            px[0] = (r * regime.tint[0]).round().clamp(0.0, 255.0) as u8;
            px[1] = (g * regime.tint[1]).round().clamp(0.0, 255.0) as u8;
            px[2] = (b * regime.tint[2]).round().clamp(0.0, 255.0) as u8;
        }
    }
    let coverage = if disk_px > 0.0 { covered / disk_px } else { 0.0 };
    (img, 1.0 - OCCLUSION_DEPTH * coverage.clamp(0.0, 1.0))
}

/// Occlusion factor without rendering, for measurement-only minutes.
fn occlusion_at(regime: &SiteRegime, minute_of_day: i64, day_length: i64, clouds: &[Cloud]) -> f64 {
    if clouds.is_empty() {
        return 1.0;
    }
    let size = regime.image_size;
    let s = f64::from(size);
    let (sun_x, sun_y) = sun_position(minute_of_day, day_length, size);
    let sun_r = (s / 10.0).max(2.0);
    let m = minute_of_day as usize;
    let mut covered = 0.0f64;
    let mut disk_px = 0.0f64;
    let (x0, x1) = ((sun_x - sun_r - 1.0).floor() as i64, (sun_x + sun_r + 1.0).ceil() as i64);
    let (y0, y1) = ((sun_y - sun_r - 1.0).floor() as i64, (sun_y + sun_r + 1.0).ceil() as i64);
    for y in y0.max(0)..y1.min(i64::from(size)) {
        for x in x0.max(0)..x1.min(i64::from(size)) {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let d = ((fx - sun_x) * (fx - sun_x) + (fy - sun_y) * (fy - sun_y)).sqrt();
            if d < sun_r {
                let mut clear = 1.0;
                for c in clouds {
                    clear *= 1.0 - c.alpha(m, fx, fy).min(0.999);
                }
                covered += 1.0 - clear;
                disk_px += 1.0;
            }
        }
    }
    let coverage = if disk_px > 0.0 { covered / disk_px } else { 0.0 };
    1.0 - OCCLUSION_DEPTH * coverage.clamp(0.0, 1.0)
}

pub fn generate_site(regime: &SiteRegime) -> Result<(SiteDataset, Vec<DayLabel>)> {
    regime.validate()?;
    let day_len = regime.day_length_minutes;
    // center daylight within the day, on the 2-minute grid
    let start_offset = ((MINUTES_PER_DAY - day_len) / 2) & !1;

    let mut records = Vec::new();
    let mut labels = Vec::with_capacity(regime.day_count);
    for d in 0..regime.day_count {
        let day = regime.start_day + d as i64;
        let day_base = day * MINUTES_PER_DAY + start_offset;

        let mut weather = DetRng::named(regime.seed, &format!("day{d}.weather"));
        let cloudy = weather.uniform() < regime.cloudy_day_prob;
        let dust = if regime.dust_range == [1.0, 1.0] {
            1.0
        } else {
            weather.range(regime.dust_range[0], regime.dust_range[1])
        };
        let clouds = if cloudy { make_clouds(regime, d, &mut weather) } else { Vec::new() };
        labels.push(DayLabel { day, label: if cloudy { SkyLabel::Cloudy } else { SkyLabel::Sunny } });

        let mut noise = DetRng::named(regime.seed, &format!("day{d}.noise"));
        for m in 0..=day_len {
            let env = clear_sky_envelope(m, day_len);
            let (image, occ) = if m % 2 == 0 {
                let (img, occ) = render_frame(regime, m, day_len, &clouds);
                (Some(img), occ)
            } else {
                (None, occlusion_at(regime, m, day_len, &clouds))
            };
            let eps = noise.normal().clamp(-NOISE_CLAMP, NOISE_CLAMP);
            let measurement = (regime.peak_scale * env * occ * dust * (1.0 + NOISE_SIGMA * eps)).max(0.0);
            records.push(Record { timestamp: day_base + m, image, measurement: Some(measurement) });
        }
    }

    let meta = SiteMeta {
        site_id: regime.site_id.clone(),
        target_kind: regime.target_kind,
        units: regime.target_kind.units().to_string(),
        capacity: matches!(regime.target_kind, TargetKind::PvPower).then_some(regime.peak_scale),
        image_size: regime.image_size,
        extra: Default::default(),
    };
    let ds = SiteDataset { meta, records };
    ds.validate()?;
    Ok((ds, labels))
}

/// Writes the dataset directory plus `labels.csv` (day,label ground truth).
pub fn write_site(dataset: &SiteDataset, labels: &[DayLabel], dir: &Path) -> Result<()> {
    save_dataset(dataset, dir)?;
    let mut csv = String::from("day,label\n");
    for l in labels {
        csv.push_str(&format!(
            "{},{}\n",
            format_day(l.day),
            match l.label {
                SkyLabel::Sunny => "sunny",
                SkyLabel::Cloudy => "cloudy",
            }
        ));
    }
    fs::write(dir.join("labels.csv"), csv).map_err(|e| CoreError::io(dir.join("labels.csv"), e))
}

pub fn read_labels(dir: &Path) -> Result<Vec<DayLabel>> {
    let path = dir.join("labels.csv");
    let mut rdr = csv::Reader::from_path(&path).map_err(|e| CoreError::Data(format!("{}: {e}", path.display())))?;
    let mut labels = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| CoreError::Data(format!("{}: {e}", path.display())))?;
        let day = crate::data::dataset::parse_day(&row[0])?;
        let label = match &row[1] {
            "sunny" => SkyLabel::Sunny,
            "cloudy" => SkyLabel::Cloudy,
            other => return Err(CoreError::Data(format!("{}: unknown label '{other}'", path.display()))),
        };
        labels.push(DayLabel { day, label });
    }
    Ok(labels)
}

/// The three standing presets. Numbers are generator choices: a clear
/// PV site with a 30 kW system, a cloud-dominated irradiance site, and a
/// mostly-clear dusty irradiance site with a yellow hue and day-to-day
/// haze attenuation.
pub fn default_regimes() -> Vec<SiteRegime> {
    let base = SiteRegime {
        site_id: String::new(),
        target_kind: TargetKind::Irradiance,
        peak_scale: 1000.0,
        cloudy_day_prob: 0.0,
        cloud_count_range: [2, 5],
        cloud_speed: 0.8,
        tint: [1.0, 1.0, 1.0],
        dust_range: [1.0, 1.0],
        day_count: 60,
        day_length_minutes: 480,
        image_size: 64,
        seed: 1,
        start_day: 18_628, // 2021-01-01
    };
    vec![
        SiteRegime {
            site_id: "site-S".into(),
            target_kind: TargetKind::PvPower,
            peak_scale: 30.0,
            cloudy_day_prob: 0.20,
            cloud_count_range: [2, 5],
            cloud_speed: 0.8,
            seed: 101,
            ..base.clone()
        },
        SiteRegime {
            site_id: "site-P".into(),
            cloudy_day_prob: 0.75,
            cloud_count_range: [4, 9],
            cloud_speed: 1.2,
            tint: [0.92, 0.96, 1.0],
            seed: 202,
            start_day: 18_628 + 400,
            ..base.clone()
        },
        SiteRegime {
            site_id: "site-D".into(),
            cloudy_day_prob: 0.10,
            cloud_count_range: [1, 3],
            cloud_speed: 0.6,
            tint: [1.0, 0.82, 0.58],
            dust_range: [0.55, 1.0],
            seed: 303,
            start_day: 18_628 + 800,
            ..base
        },
    ]
}

pub fn preset(name: &str) -> Result<SiteRegime> {
    default_regimes()
        .into_iter()
        .find(|r| r.site_id == name)
        .ok_or_else(|| CoreError::Config(format!("unknown preset '{name}' (site-S, site-P, site-D)")))
}
