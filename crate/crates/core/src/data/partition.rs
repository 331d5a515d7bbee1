//! Test-day carving and day-block cross-validation.
//!
//! The test set is 10 sunny + 10 cloudy whole calendar days (explicit
//! lists for real data, a volatility score for synthetic data); the
//! remaining days form the development set, which day-block shuffling
//! splits into k folds so no day ever straddles train and validation.

use serde::{Deserialize, Serialize};

use helio_tensor::DetRng;

use crate::data::dataset::{day_of, SiteDataset};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub train_days: Vec<i64>,
    pub val_days: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub sunny_test_days: Vec<i64>,
    pub cloudy_test_days: Vec<i64>,
    pub dev_days: Vec<i64>,
    #[serde(default)]
    pub folds: Vec<FoldSpec>,
}

impl Partition {
    pub fn test_days(&self) -> Vec<i64> {
        let mut days = self.sunny_test_days.clone();
        days.extend(&self.cloudy_test_days);
        days.sort_unstable();
        days
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CarveMode {
    /// Configured day lists (the faithful mode for real data).
    Explicit { sunny: Vec<i64>, cloudy: Vec<i64> },
    /// Score each day by the volatility of its clear-sky-normalized
    /// measurement series; highest scores are cloudy, lowest sunny.
    Auto,
}

/// Volatility score per day: the standard deviation of the first
/// difference of the day's measurements after dividing out an empirical
/// clear-sky envelope (per-minute-of-day maximum across all days).
/// Near-horizon points (envelope below 20% of its peak) are skipped.
fn day_scores(dataset: &SiteDataset) -> Vec<(i64, f64)> {
    let mut envelope = std::collections::BTreeMap::<i64, f64>::new();
    for r in &dataset.records {
        if let Some(m) = r.measurement {
            let slot = r.timestamp.rem_euclid(super::dataset::MINUTES_PER_DAY);
            let e = envelope.entry(slot).or_insert(0.0);
            if m > *e {
                *e = m;
            }
        }
    }
    let peak = envelope.values().copied().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Vec::new();
    }
    let floor = 0.2 * peak;

    let mut scores = Vec::new();
    let mut day = None;
    let mut series: Vec<f64> = Vec::new();
    let flush = |day: Option<i64>, series: &mut Vec<f64>, scores: &mut Vec<(i64, f64)>| {
        if let Some(d) = day {
            if series.len() >= 3 {
                let diffs: Vec<f64> = series.windows(2).map(|w| w[1] - w[0]).collect();
                let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
                let var = diffs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / diffs.len() as f64;
                scores.push((d, var.sqrt()));
            }
        }
        series.clear();
    };
    for r in &dataset.records {
        let d = day_of(r.timestamp);
        if day != Some(d) {
            flush(day, &mut series, &mut scores);
            day = Some(d);
        }
        if let Some(m) = r.measurement {
            let slot = r.timestamp.rem_euclid(super::dataset::MINUTES_PER_DAY);
            let e = envelope[&slot];
            if e >= floor {
                series.push(m / e);
            }
        }
    }
    flush(day, &mut series, &mut scores);
    scores
}

/// Splits the dataset's days into sunny/cloudy test days and development
/// days. Fold assignment comes separately from [`day_block_folds`].
pub fn carve_test_days(
    dataset: &SiteDataset,
    mode: &CarveMode,
    n_sunny: usize,
    n_cloudy: usize,
) -> Result<Partition> {
    let all_days = dataset.days();
    let (sunny, cloudy) = match mode {
        CarveMode::Explicit { sunny, cloudy } => {
            for d in sunny.iter().chain(cloudy) {
                if !all_days.contains(d) {
                    return Err(CoreError::Data(format!(
                        "explicit test day {} not present in dataset",
                        super::dataset::format_day(*d)
                    )));
                }
            }
            if sunny.iter().any(|d| cloudy.contains(d)) {
                return Err(CoreError::Data("sunny and cloudy test day lists overlap".into()));
            }
            (sunny.clone(), cloudy.clone())
        }
        CarveMode::Auto => {
            let mut scores = day_scores(dataset);
            if scores.len() < n_sunny + n_cloudy {
                return Err(CoreError::Data(format!(
                    "auto test-day carving needs at least {} scoreable days, found {}",
                    n_sunny + n_cloudy,
                    scores.len()
                )));
            }
            scores.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            let sunny: Vec<i64> = scores[..n_sunny].iter().map(|&(d, _)| d).collect();
            let cloudy: Vec<i64> = scores[scores.len() - n_cloudy..].iter().map(|&(d, _)| d).collect();
            (sunny, cloudy)
        }
    };
    let mut sunny = sunny;
    let mut cloudy = cloudy;
    sunny.sort_unstable();
    cloudy.sort_unstable();
    let dev_days: Vec<i64> = all_days
        .into_iter()
        .filter(|d| !sunny.contains(d) && !cloudy.contains(d))
        .collect();
    Ok(Partition { sunny_test_days: sunny, cloudy_test_days: cloudy, dev_days, folds: Vec::new() })
}

/// Seeded day-block shuffling: shuffle the day list, cut it into k
/// near-equal contiguous blocks, and let fold i validate on block i.
pub fn day_block_folds(dev_days: &[i64], k: usize, seed: u64) -> Result<Vec<FoldSpec>> {
    if k < 2 {
        return Err(CoreError::Config(format!("fold count must be >= 2, got {k}")));
    }
    if dev_days.len() < k {
        return Err(CoreError::Data(format!(
            "day-block folding needs at least {k} development days, got {}",
            dev_days.len()
        )));
    }
    let mut shuffled = dev_days.to_vec();
    DetRng::named(seed, "day_block_shuffle").shuffle(&mut shuffled);

    let n = shuffled.len();
    let (q, r) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0usize;
    for i in 0..k {
        let len = q + usize::from(i < r);
        let mut val_days: Vec<i64> = shuffled[start..start + len].to_vec();
        let mut train_days: Vec<i64> =
            shuffled[..start].iter().chain(&shuffled[start + len..]).copied().collect();
        val_days.sort_unstable();
        train_days.sort_unstable();
        folds.push(FoldSpec { train_days, val_days });
        start += len;
    }
    Ok(folds)
}

/// Fold assignment for reduced (chronological-fraction) day sets, which may
/// have fewer days than folds. With >= k days this is exactly
/// [`day_block_folds`]; below that, the available blocks are reused
/// cyclically (sub-models then differ only by their training seed), and a
/// single day trains all folds with an empty validation set.
pub fn fraction_folds(days: &[i64], k: usize, seed: u64) -> Result<Vec<FoldSpec>> {
    if days.is_empty() {
        return Err(CoreError::Data("fraction produced no days".into()));
    }
    if days.len() >= k {
        return day_block_folds(days, k, seed);
    }
    if days.len() == 1 {
        return Ok(vec![FoldSpec { train_days: days.to_vec(), val_days: Vec::new() }; k]);
    }
    let base = day_block_folds(days, days.len(), seed)?;
    Ok((0..k).map(|i| base[i % base.len()].clone()).collect())
}

/// The earliest ceil(p% * n) development days.
pub fn chronological_fraction(dev_days: &[i64], p: u32) -> Result<Vec<i64>> {
    if !(1..=100).contains(&p) {
        return Err(CoreError::Config(format!("fraction percent must be in 1..=100, got {p}")));
    }
    let mut days = dev_days.to_vec();
    days.sort_unstable();
    let take = (f64::from(p) * days.len() as f64 / 100.0).ceil() as usize;
    days.truncate(take.max(1));
    Ok(days)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check_invariants(dev: &[i64], folds: &[FoldSpec]) {
        let mut validated: Vec<i64> = Vec::new();
        for f in folds {
            assert!(f.train_days.iter().all(|d| !f.val_days.contains(d)), "train/val overlap");
            let mut union: Vec<i64> = f.train_days.iter().chain(&f.val_days).copied().collect();
            union.sort_unstable();
            let mut expect = dev.to_vec();
            expect.sort_unstable();
            assert_eq!(union, expect, "train+val must cover all dev days");
            validated.extend(&f.val_days);
        }
        validated.sort_unstable();
        let mut expect = dev.to_vec();
        expect.sort_unstable();
        assert_eq!(validated, expect, "every dev day validates exactly once");
    }

    #[test]
    fn twenty_days_ten_folds_gives_val_pairs() {
        let days: Vec<i64> = (100..120).collect();
        let folds = day_block_folds(&days, 10, 7).unwrap();
        assert_eq!(folds.len(), 10);
        assert!(folds.iter().all(|f| f.val_days.len() == 2));
        check_invariants(&days, &folds);
    }

    #[test]
    fn remainder_spreads_over_first_blocks() {
        let days: Vec<i64> = (0..23).collect();
        let folds = day_block_folds(&days, 10, 3).unwrap();
        let mut sizes: Vec<usize> = folds.iter().map(|f| f.val_days.len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 2, 2, 2, 2, 2, 2, 3, 3, 3]);
        check_invariants(&days, &folds);
    }

    #[test]
    fn invariants_hold_across_seed_sweep() {
        let days: Vec<i64> = (500..537).collect();
        for seed in 0..100u64 {
            let folds = day_block_folds(&days, 10, seed).unwrap();
            check_invariants(&days, &folds);
        }
    }

    #[test]
    fn shuffle_depends_on_seed_and_is_stable() {
        let days: Vec<i64> = (0..30).collect();
        let a = day_block_folds(&days, 10, 1).unwrap();
        let b = day_block_folds(&days, 10, 1).unwrap();
        let c = day_block_folds(&days, 10, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_small_k_and_small_dev_sets() {
        let days: Vec<i64> = (0..20).collect();
        assert!(day_block_folds(&days, 1, 0).is_err());
        assert!(day_block_folds(&days[..5], 10, 0).is_err());
    }

    #[test]
    fn chronological_fractions_are_nested_prefixes() {
        let days: Vec<i64> = (1000..1249).collect(); // 249 days
        assert_eq!(chronological_fraction(&days, 100).unwrap().len(), 249);
        // ceil(1% of 249) = 3 by the ceiling rule
        assert_eq!(chronological_fraction(&days, 1).unwrap().len(), 3);
        let mut prev: Vec<i64> = Vec::new();
        for p in [1u32, 5, 10, 20, 50, 75, 100] {
            let cur = chronological_fraction(&days, p).unwrap();
            assert!(prev.iter().all(|d| cur.contains(d)), "fraction {p} lost earlier days");
            prev = cur;
        }
        assert!(chronological_fraction(&days, 0).is_err());
        assert!(chronological_fraction(&days, 101).is_err());
    }

    #[test]
    fn fraction_folds_cycle_below_k() {
        let days: Vec<i64> = (0..4).collect();
        let folds = fraction_folds(&days, 10, 5).unwrap();
        assert_eq!(folds.len(), 10);
        for (i, f) in folds.iter().enumerate() {
            assert_eq!(f, &folds[i % 4]);
            assert_eq!(f.train_days.len() + f.val_days.len(), 4);
            assert!(!f.val_days.is_empty());
        }

        let single = fraction_folds(&days[..1], 10, 5).unwrap();
        assert_eq!(single.len(), 10);
        assert!(single.iter().all(|f| f.val_days.is_empty() && f.train_days == days[..1]));
    }
}
