//! The eight-method measurement normalization family, all of the form
//! (X - a) / b, with factors fitted on development-set *input* data only.
//!
//! b is the max, the 95th percentile (nearest-rank) or the population
//! standard deviation, optionally divided by 100; a is the mean for the
//! mean-centered methods and 0 otherwise.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use helio_tensor::Scalar;

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormMethod {
    #[serde(rename = "max")]
    Max,
    #[serde(rename = "p95")]
    P95,
    #[serde(rename = "std")]
    Std,
    #[serde(rename = "mean_std")]
    MeanStd,
    #[serde(rename = "max/100")]
    MaxOver100,
    #[serde(rename = "p95/100")]
    P95Over100,
    #[serde(rename = "std/100")]
    StdOver100,
    #[serde(rename = "mean_std/100")]
    MeanStdOver100,
}

pub const ALL_METHODS: [NormMethod; 8] = [
    NormMethod::Max,
    NormMethod::P95,
    NormMethod::Std,
    NormMethod::MeanStd,
    NormMethod::MaxOver100,
    NormMethod::P95Over100,
    NormMethod::StdOver100,
    NormMethod::MeanStdOver100,
];

impl NormMethod {
    pub fn name(&self) -> &'static str {
        match self {
            NormMethod::Max => "max",
            NormMethod::P95 => "p95",
            NormMethod::Std => "std",
            NormMethod::MeanStd => "mean_std",
            NormMethod::MaxOver100 => "max/100",
            NormMethod::P95Over100 => "p95/100",
            NormMethod::StdOver100 => "std/100",
            NormMethod::MeanStdOver100 => "mean_std/100",
        }
    }

    fn mean_centered(&self) -> bool {
        matches!(self, NormMethod::MeanStd | NormMethod::MeanStdOver100)
    }

    fn over_100(&self) -> bool {
        matches!(
            self,
            NormMethod::MaxOver100 | NormMethod::P95Over100 | NormMethod::StdOver100 | NormMethod::MeanStdOver100
        )
    }
}

impl fmt::Display for NormMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NormMethod {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        ALL_METHODS
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown normalization method '{s}' (one of max, p95, std, mean_std, max/100, p95/100, std/100, mean_std/100)")))
    }
}

/// Fitted affine transform: normalize(x) = (x - a) / b.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub method: NormMethod,
    pub a: f64,
    pub b: f64,
}

impl Normalizer {
    #[inline]
    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.a) / self.b
    }

    #[inline]
    pub fn denormalize(&self, y: f64) -> f64 {
        y * self.b + self.a
    }
}

/// Nearest-rank percentile: the ceil(q*n)-th order statistic.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = (q * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

pub fn fit_normalizer(dev_measurements: &[f64], method: NormMethod) -> Result<Normalizer> {
    let n = dev_measurements.len();
    if n < 2 {
        return Err(CoreError::Data(format!("normalizer fit needs >= 2 values, got {n}")));
    }
    let first = dev_measurements[0];
    if dev_measurements.iter().all(|&v| v == first) {
        return Err(CoreError::Data("normalizer fit on constant data (b would be 0)".into()));
    }
    let mean = dev_measurements.iter().sum::<f64>() / n as f64;
    let raw = match method {
        NormMethod::Max | NormMethod::MaxOver100 => {
            dev_measurements.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        }
        NormMethod::P95 | NormMethod::P95Over100 => {
            let mut sorted = dev_measurements.to_vec();
            sorted.sort_by(f64::total_cmp);
            percentile(&sorted, 0.95)
        }
        NormMethod::Std
        | NormMethod::StdOver100
        | NormMethod::MeanStd
        | NormMethod::MeanStdOver100 => {
            (dev_measurements.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt()
        }
    };
    let b = if method.over_100() { raw / 100.0 } else { raw };
    if !(b > 0.0) {
        return Err(CoreError::Data(format!("degenerate normalization factor b = {b} for method {method}")));
    }
    let a = if method.mean_centered() { mean } else { 0.0 };
    Ok(Normalizer { method, a, b })
}

/// Pixel scaling: 8-bit channel values to [0,1].
pub fn pixel_normalize<T: Scalar>(bytes: &[u8], out: &mut [T]) {
    debug_assert_eq!(bytes.len(), out.len());
    let scale = T::from_f64(1.0 / 255.0);
    for (o, &b) in out.iter_mut().zip(bytes) {
        *o = T::from_f64(f64::from(b)) * scale;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use helio_tensor::DetRng;

    #[test]
    fn max_method_reproduces_pv_row() {
        // values with max 30 -> (a=0, b=30)
        let values = vec![3.0, 12.5, 30.0, 7.2, 21.0];
        let n = fit_normalizer(&values, NormMethod::Max).unwrap();
        assert_eq!((n.a, n.b), (0.0, 30.0));
        assert_eq!(n.normalize(30.0), 1.0);
    }

    #[test]
    fn mean_std_method_reproduces_irradiance_row() {
        // two-point set with mean 301 and population std 270 -> (a=301, b=270)
        let values = vec![31.0, 571.0];
        let n = fit_normalizer(&values, NormMethod::MeanStd).unwrap();
        assert_eq!((n.a, n.b), (301.0, 270.0));
        assert_eq!(n.normalize(301.0), 0.0);
    }

    #[test]
    fn over_100_variants_scale_exactly() {
        let mut rng = DetRng::seed(1);
        let values: Vec<f64> = (0..500).map(|_| rng.range(0.0, 900.0)).collect();
        for (plain, scaled) in [
            (NormMethod::Max, NormMethod::MaxOver100),
            (NormMethod::P95, NormMethod::P95Over100),
            (NormMethod::Std, NormMethod::StdOver100),
            (NormMethod::MeanStd, NormMethod::MeanStdOver100),
        ] {
            let p = fit_normalizer(&values, plain).unwrap();
            let s = fit_normalizer(&values, scaled).unwrap();
            assert_eq!(s.b, p.b / 100.0);
            assert_eq!(s.a, p.a);
        }
    }

    #[test]
    fn p95_of_unit_grid() {
        // 100 values 1..=100: nearest-rank 95th percentile is 95
        let values: Vec<f64> = (1..=100).map(f64::from).collect();
        let n = fit_normalizer(&values, NormMethod::P95).unwrap();
        assert_eq!(n.b, 95.0);
        // x = b normalizes to exactly 1
        assert_eq!(n.normalize(95.0), 1.0);
    }

    #[test]
    fn round_trip_sweep() {
        let mut rng = DetRng::seed(2);
        let fit_values: Vec<f64> = (0..200).map(|_| rng.range(0.0, 1000.0)).collect();
        for method in ALL_METHODS {
            let n = fit_normalizer(&fit_values, method).unwrap();
            for _ in 0..10_000 {
                let x = rng.range(-100.0, 1500.0);
                let rt = n.denormalize(n.normalize(x));
                assert!((rt - x).abs() < 1e-9 * x.abs().max(1.0), "{method}: {x} -> {rt}");
            }
        }
    }

    #[test]
    fn degenerate_input_is_rejected() {
        assert!(fit_normalizer(&[5.0], NormMethod::Max).is_err());
        assert!(fit_normalizer(&[5.0, 5.0, 5.0], NormMethod::Std).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in ALL_METHODS {
            assert_eq!(m.name().parse::<NormMethod>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(serde_json::from_str::<NormMethod>(&json).unwrap(), m);
        }
        assert!("mean".parse::<NormMethod>().is_err());
    }

    #[test]
    fn pixel_scaling_endpoints() {
        let mut out = [0.0f64; 3];
        pixel_normalize(&[0, 255, 128], &mut out);
        assert_eq!(out[0], 0.0);
        assert_eq!(out[1], 1.0);
        assert!((out[2] - 128.0 / 255.0).abs() < 1e-15);
    }
}
