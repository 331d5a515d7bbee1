//! Central finite-difference gradient checking.
//!
//! Meaningful at 64-bit precision only: the f32 roundoff floor sits above
//! any useful tolerance.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative-deviation floor: deviations are measured against
/// max(|analytic|, |numeric|, this), so near-zero gradients are compared
/// absolutely at `tol * REL_FLOOR` scale instead of amplifying FD noise.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct TensorDeviation {
    pub name: String,
    pub max_rel: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub tensors: Vec<TensorDeviation>,
    pub max_rel: f64,
    pub pass: bool,
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for t in &self.tensors {
            writeln!(
                f,
                "  {:<24} max rel dev {:.3e} (analytic {:.6e} vs numeric {:.6e} at [{}])",
                t.name, t.max_rel, t.analytic, t.numeric, t.worst_index
            )?;
        }
        write!(f, "  overall max rel dev {:.3e} -> {}", self.max_rel, if self.pass { "pass" } else { "FAIL" })
    }
}

/// Compares analytic gradients of `f` against central finite differences.
///
/// `f` must be a pure function of the leaf values (internal RNG streams
/// re-seeded per call are fine; clock- or state-dependent behaviour is not).
pub fn gradcheck<T, F>(f: &F, inputs: &[(String, Tensor<T>)], step: f64, tol: f64) -> Result<GradReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    // analytic pass
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(_, t)| {
            let mut t = t.clone();
            t.track_grad = true;
            tape.leaf(t)
        })
        .collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<T>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("tracked leaf has gradient").to_vec())
        .collect();

    let eval = |tensors: &[Tensor<T>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.track_grad = false;
                tape.leaf(t)
            })
            .collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.data(loss)[0].to_f64())
    };

    let mut work: Vec<Tensor<T>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut tensors = Vec::with_capacity(inputs.len());
    let mut max_rel = 0.0f64;
    for (ti, (name, _)) in inputs.iter().enumerate() {
        let mut dev = TensorDeviation {
            name: name.clone(),
            max_rel: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for j in 0..work[ti].numel() {
            let orig = work[ti].data()[j];
            work[ti].data_mut()[j] = T::from_f64(orig.to_f64() + step);
            let up = eval(&work)?;
            work[ti].data_mut()[j] = T::from_f64(orig.to_f64() - step);
            let down = eval(&work)?;
            work[ti].data_mut()[j] = orig;

            let numeric = (up - down) / (2.0 * step);
            let a = analytic[ti][j].to_f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > dev.max_rel {
                dev.max_rel = rel;
                dev.worst_index = j;
                dev.analytic = a;
                dev.numeric = numeric;
            }
        }
        max_rel = max_rel.max(dev.max_rel);
        tensors.push(dev);
    }
    Ok(GradReport { tensors, max_rel, pass: max_rel < tol })
}
