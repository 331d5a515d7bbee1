//! Brute-force reference implementations for oracle tests.
//!
//! These deliberately share no code with the kernels they check: plain
//! nested loops, index arithmetic written from the operation definitions.
//! Gated behind the `oracles` feature so downstream test suites can use
//! them without shipping them in release artifacts.

/// Six-nested-loop direct convolution: 3x3, stride 1, zero padding.
pub fn conv2d_ref(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    (n, c, h, wd, f): (usize, usize, usize, usize, usize),
) -> Vec<f64> {
    let mut out = vec![0.0; n * f * h * wd];
    for ni in 0..n {
        for fi in 0..f {
            for oy in 0..h {
                for ox in 0..wd {
                    let mut acc = b[fi];
                    for ci in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = oy as isize + ky as isize - 1;
                                let ix = ox as isize + kx as isize - 1;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[((ni * c + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w[((fi * c + ci) * 3 + ky) * 3 + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((ni * f + fi) * h + oy) * wd + ox] = acc;
                }
            }
        }
    }
    out
}

/// Triple-loop matrix product plus broadcast bias.
pub fn dense_ref(x: &[f64], w: &[f64], b: &[f64], (n, d, k): (usize, usize, usize)) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for ni in 0..n {
        for ki in 0..k {
            let mut acc = b[ki];
            for di in 0..d {
                acc += x[ni * d + di] * w[di * k + ki];
            }
            out[ni * k + ki] = acc;
        }
    }
    out
}

/// Sliding-window max scan (2x2, stride 2).
pub fn maxpool_ref(x: &[f64], planes: usize, h: usize, wd: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, wd / 2);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let v = x[p * h * wd + (2 * oy + dy) * wd + 2 * ox + dx];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out[p * oh * ow + oy * ow + ox] = best;
            }
        }
    }
    out
}

/// Gathers a channel and computes mean/variance in two explicit passes.
pub fn bn_stats_ref(x: &[f64], n: usize, f: usize, hw: usize, c: usize) -> (f64, f64) {
    let mut values = Vec::with_capacity(n * hw);
    for ni in 0..n {
        values.extend_from_slice(&x[(ni * f + c) * hw..][..hw]);
    }
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
    (mean, var)
}

/// Direct-sum mean squared error.
pub fn mse_ref(pred: &[f64], target: &[f64]) -> f64 {
    assert_eq!(pred.len(), target.len());
    pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64
}
