//! Op-level tests: worked examples frozen from the operation definitions,
//! plus brute-force oracle comparisons on random inputs.

use crate::oracles;
use crate::rng::DetRng;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;
use crate::{AdamState, TensorError};

fn rand_tensor(rng: &mut DetRng, shape: Vec<usize>) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.range(-1.0, 1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// -- conv2d -----------------------------------------------------------------

#[test]
fn conv2d_zero_input_gives_zero_output() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(vec![1, 1, 4, 4]));
    let mut rng = DetRng::seed(1);
    let w = tape.leaf(rand_tensor(&mut rng, vec![1, 1, 3, 3]));
    let b = tape.leaf(Tensor::zeros(vec![1]));
    let y = tape.conv2d(x, w, b).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 4, 4]);
    assert!(tape.data(y).iter().all(|&v| v == 0.0));
}

#[test]
fn conv2d_delta_kernel_is_identity() {
    let mut rng = DetRng::seed(2);
    let mut tape = Tape::<f64>::new();
    let xt = rand_tensor(&mut rng, vec![1, 1, 5, 5]);
    let x = tape.leaf(xt.clone());
    let mut kernel = vec![0.0; 9];
    kernel[4] = 1.0; // center tap
    let w = tape.leaf(Tensor::new(vec![1, 1, 3, 3], kernel).unwrap());
    let b = tape.leaf(Tensor::zeros(vec![1]));
    let y = tape.conv2d(x, w, b).unwrap();
    assert_eq!(tape.data(y), xt.data());
}

#[test]
fn conv2d_matches_six_loop_oracle() {
    let mut rng = DetRng::seed(3);
    for trial in 0..20 {
        let (n, c, f) = (1 + trial % 2, 2, 3);
        let (h, w) = (5, 5);
        let xt = rand_tensor(&mut rng, vec![n, c, h, w]);
        let wt = rand_tensor(&mut rng, vec![f, c, 3, 3]);
        let bt = rand_tensor(&mut rng, vec![f]);
        let expect = oracles::conv2d_ref(xt.data(), wt.data(), bt.data(), (n, c, h, w, f));
        let mut tape = Tape::new();
        let (x, wv, b) = (tape.leaf(xt), tape.leaf(wt), tape.leaf(bt));
        let y = tape.conv2d(x, wv, b).unwrap();
        assert!(max_abs_diff(tape.data(y), &expect) < 1e-12);
    }
}

#[test]
fn conv2d_rejects_channel_mismatch() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(vec![1, 2, 4, 4]));
    let w = tape.leaf(Tensor::zeros(vec![3, 5, 3, 3]));
    let b = tape.leaf(Tensor::zeros(vec![3]));
    assert!(matches!(tape.conv2d(x, w, b), Err(TensorError::ShapeMismatch { .. })));
}

// -- batchnorm2d --------------------------------------------------------------

struct BnVars {
    x: Var,
    gamma: Var,
    beta: Var,
    rm: Var,
    rv: Var,
}

fn bn_vars(tape: &mut Tape<f64>, xt: Tensor<f64>, f: usize) -> BnVars {
    BnVars {
        x: tape.leaf(xt),
        gamma: tape.leaf(Tensor::filled(vec![f], 1.0)),
        beta: tape.leaf(Tensor::zeros(vec![f])),
        rm: tape.leaf(Tensor::zeros(vec![f])),
        rv: tape.leaf(Tensor::filled(vec![f], 1.0)),
    }
}

#[test]
fn batchnorm_constant_channel_maps_to_zero() {
    let mut tape = Tape::new();
    let v = bn_vars(&mut tape, Tensor::filled(vec![2, 3, 2, 2], 7.5), 3);
    let y = tape.batchnorm2d(v.x, v.gamma, v.beta, v.rm, v.rv, Mode::Train, true).unwrap();
    assert!(tape.data(y).iter().all(|&o| o == 0.0));
}

#[test]
fn batchnorm_train_output_is_standardized() {
    let mut rng = DetRng::seed(4);
    let (n, f, h, w) = (4, 3, 4, 4);
    let data: Vec<f64> = (0..n * f * h * w).map(|_| rng.range(-8.0, 8.0)).collect();
    let mut tape = Tape::new();
    let v = bn_vars(&mut tape, Tensor::new(vec![n, f, h, w], data).unwrap(), f);
    let y = tape.batchnorm2d(v.x, v.gamma, v.beta, v.rm, v.rv, Mode::Train, true).unwrap();
    let hw = h * w;
    for c in 0..f {
        let (mean, var) = oracles::bn_stats_ref(tape.data(y), n, f, hw, c);
        assert!(mean.abs() < 1e-6, "channel {c} mean {mean}");
        // output variance is v/(v+eps); at these input scales that is
        // within 1e-6 of one
        assert!((var - 1.0).abs() < 1e-5, "channel {c} var {var}");
    }
}

#[test]
fn batchnorm_matches_two_pass_oracle() {
    let mut rng = DetRng::seed(5);
    let (n, f, h, w) = (3, 4, 5, 5);
    let xt = rand_tensor(&mut rng, vec![n, f, h, w]);
    let gt: Vec<f64> = (0..f).map(|_| rng.range(0.5, 2.0)).collect();
    let bt: Vec<f64> = (0..f).map(|_| rng.range(-1.0, 1.0)).collect();
    let mut tape = Tape::new();
    let x = tape.leaf(xt.clone());
    let gamma = tape.leaf(Tensor::new(vec![f], gt.clone()).unwrap());
    let beta = tape.leaf(Tensor::new(vec![f], bt.clone()).unwrap());
    let rm = tape.leaf(Tensor::zeros(vec![f]));
    let rv = tape.leaf(Tensor::filled(vec![f], 1.0));
    let y = tape.batchnorm2d(x, gamma, beta, rm, rv, Mode::Train, true).unwrap();

    let hw = h * w;
    let mut worst = 0.0f64;
    for c in 0..f {
        let (mean, var) = oracles::bn_stats_ref(xt.data(), n, f, hw, c);
        let inv = 1.0 / (var + crate::BN_EPS).sqrt();
        for ni in 0..n {
            for j in 0..hw {
                let i = (ni * f + c) * hw + j;
                let expect = (xt.data()[i] - mean) * inv * gt[c] + bt[c];
                worst = worst.max((tape.data(y)[i] - expect).abs());
            }
        }
    }
    assert!(worst < 1e-10, "max deviation {worst}");
}

#[test]
fn batchnorm_updates_running_stats_and_eval_uses_them() {
    let mut rng = DetRng::seed(6);
    let (n, f, h, w) = (4, 2, 2, 2);
    let xt = rand_tensor(&mut rng, vec![n, f, h, w]);
    let mut tape = Tape::new();
    let v = bn_vars(&mut tape, xt.clone(), f);
    tape.batchnorm2d(v.x, v.gamma, v.beta, v.rm, v.rv, Mode::Train, true).unwrap();
    let hw = h * w;
    for c in 0..f {
        let (mean, var) = oracles::bn_stats_ref(xt.data(), n, f, hw, c);
        assert!((tape.data(v.rm)[c] - 0.1 * mean).abs() < 1e-12);
        assert!((tape.data(v.rv)[c] - (0.9 + 0.1 * var)).abs() < 1e-12);
    }

    // eval normalizes by the running buffers and leaves them untouched
    let rm_before = tape.data(v.rm).to_vec();
    let y = tape.batchnorm2d(v.x, v.gamma, v.beta, v.rm, v.rv, Mode::Eval, false).unwrap();
    assert_eq!(tape.data(v.rm), &rm_before[..]);
    let c = 0usize;
    let i = c * hw;
    let expect = (xt.data()[i] - rm_before[c]) / (tape.data(v.rv)[c] + crate::BN_EPS).sqrt();
    assert!((tape.data(y)[i] - expect).abs() < 1e-12);
}

#[test]
fn batchnorm_rejects_batch_of_one_in_train_mode() {
    let mut tape = Tape::<f64>::new();
    let v = bn_vars(&mut tape, Tensor::zeros(vec![1, 2, 4, 4]), 2);
    let err = tape.batchnorm2d(v.x, v.gamma, v.beta, v.rm, v.rv, Mode::Train, true);
    assert!(err.is_err());
    let ok = tape.batchnorm2d(v.x, v.gamma, v.beta, v.rm, v.rv, Mode::Eval, false);
    assert!(ok.is_ok());
}

// -- maxpool2 -----------------------------------------------------------------

#[test]
fn maxpool_single_window() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = tape.maxpool2(x).unwrap();
    assert_eq!(tape.data(y), &[4.0]);
}

#[test]
fn maxpool_tie_breaks_to_first_cell() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::filled(vec![1, 1, 4, 4], 2.5).tracked());
    let y = tape.maxpool2(x).unwrap();
    assert!(tape.data(y).iter().all(|&v| v == 2.5));
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    let g = tape.grad(x).unwrap();
    for (i, &gi) in g.iter().enumerate() {
        let (y, x_) = (i / 4, i % 4);
        let first = y % 2 == 0 && x_ % 2 == 0;
        assert_eq!(gi, if first { 1.0 } else { 0.0 }, "index {i}");
    }
}

#[test]
fn maxpool_matches_window_scan_oracle() {
    let mut rng = DetRng::seed(7);
    let xt = rand_tensor(&mut rng, vec![1, 1, 6, 6]);
    let expect = oracles::maxpool_ref(xt.data(), 1, 6, 6);
    let mut tape = Tape::new();
    let x = tape.leaf(xt);
    let y = tape.maxpool2(x).unwrap();
    assert_eq!(tape.data(y), &expect[..]);
}

#[test]
fn maxpool_rejects_odd_dims() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(vec![1, 1, 5, 4]));
    assert!(tape.maxpool2(x).is_err());
}

// -- dense --------------------------------------------------------------------

#[test]
fn dense_identity_and_bias_rows() {
    let mut rng = DetRng::seed(8);
    let xt = rand_tensor(&mut rng, vec![3, 4]);
    let eye: Vec<f64> = (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();

    let mut tape = Tape::new();
    let x = tape.leaf(xt.clone());
    let w = tape.leaf(Tensor::new(vec![4, 4], eye).unwrap());
    let b = tape.leaf(Tensor::zeros(vec![4]));
    let y = tape.dense(x, w, b).unwrap();
    assert_eq!(tape.data(y), xt.data());

    let wz = tape.leaf(Tensor::zeros(vec![4, 2]));
    let bv = tape.leaf(Tensor::new(vec![2], vec![0.5, -1.5]).unwrap());
    let y2 = tape.dense(x, wz, bv).unwrap();
    assert_eq!(tape.data(y2), &[0.5, -1.5, 0.5, -1.5, 0.5, -1.5]);
}

#[test]
fn dense_matches_triple_loop_oracle() {
    let mut rng = DetRng::seed(9);
    let xt = rand_tensor(&mut rng, vec![3, 4]);
    let wt = rand_tensor(&mut rng, vec![4, 2]);
    let bt = rand_tensor(&mut rng, vec![2]);
    let expect = oracles::dense_ref(xt.data(), wt.data(), bt.data(), (3, 4, 2));
    let mut tape = Tape::new();
    let (x, w, b) = (tape.leaf(xt), tape.leaf(wt), tape.leaf(bt));
    let y = tape.dense(x, w, b).unwrap();
    assert!(max_abs_diff(tape.data(y), &expect) < 1e-12);
}

#[test]
fn dense_rejects_dimension_mismatch() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(vec![3, 4]));
    let w = tape.leaf(Tensor::zeros(vec![5, 2]));
    let b = tape.leaf(Tensor::zeros(vec![2]));
    assert!(tape.dense(x, w, b).is_err());
}

// -- relu / dropout / flatten / concat ----------------------------------------

#[test]
fn relu_clamps_negatives() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.data(y), &[0.0, 0.0, 2.0]);
}

#[test]
fn dropout_rate_zero_is_identity_in_both_modes() {
    let mut rng = DetRng::seed(10);
    let mut stream = DetRng::seed(11);
    let xt = rand_tensor(&mut rng, vec![4, 4]);
    let mut tape = Tape::new();
    let x = tape.leaf(xt.clone());
    for mode in [Mode::Train, Mode::Eval] {
        let y = tape.dropout(x, 0.0, mode, &mut stream).unwrap();
        assert_eq!(y, x, "identity should not even create a node");
        assert_eq!(tape.data(y), xt.data());
    }
}

#[test]
fn dropout_inverted_scaling_preserves_mean() {
    let n = 100_000;
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::filled(vec![n], 1.0));
    let mut stream = DetRng::seed(12);
    let y = tape.dropout(x, 0.4, Mode::Train, &mut stream).unwrap();
    let mean: f64 = tape.data(y).iter().sum::<f64>() / n as f64;
    assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    // eval mode passes through untouched
    let z = tape.dropout(x, 0.4, Mode::Eval, &mut stream).unwrap();
    assert_eq!(z, x);
}

#[test]
fn dropout_gradient_equals_mask() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::filled(vec![64], 2.0).tracked());
    let mut stream = DetRng::seed(13);
    let y = tape.dropout(x, 0.4, Mode::Train, &mut stream).unwrap();
    let out = tape.data(y).to_vec();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    let g = tape.grad(x).unwrap();
    for (gi, oi) in g.iter().zip(&out) {
        assert_eq!(*gi, oi / 2.0); // mask value = output / input
    }
}

#[test]
fn dropout_rejects_rate_one() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(vec![2]));
    let mut stream = DetRng::seed(14);
    assert!(tape.dropout(x, 1.0, Mode::Train, &mut stream).is_err());
}

#[test]
fn flatten_collapses_non_batch_axes() {
    let mut rng = DetRng::seed(15);
    let xt = rand_tensor(&mut rng, vec![2, 3, 4, 4]);
    let mut tape = Tape::new();
    let x = tape.leaf(xt.clone());
    let y = tape.flatten(x).unwrap();
    assert_eq!(tape.shape(y), &[2, 48]);
    assert_eq!(tape.data(y), xt.data());
}

#[test]
fn concat_joins_and_splits_along_axis() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap().tracked());
    let b = tape.leaf(Tensor::new(vec![2, 3], vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0]).unwrap().tracked());
    let y = tape.concat(&[a, b], 1).unwrap();
    assert_eq!(tape.shape(y), &[2, 5]);
    assert_eq!(tape.data(y), &[1.0, 2.0, 5.0, 6.0, 7.0, 3.0, 4.0, 8.0, 9.0, 10.0]);

    // gradient splits back to the right slots
    let mask = tape.leaf(Tensor::new(vec![2, 5], vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap());
    let m = tape.mul(y, mask).unwrap();
    let s = tape.sum(m).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(a).unwrap(), &[1.0, 0.0, 0.0, 1.0]);
    assert_eq!(tape.grad(b).unwrap(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn concat_rejects_mismatched_off_axis_dims() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(Tensor::zeros(vec![2, 2]));
    let b = tape.leaf(Tensor::zeros(vec![3, 3]));
    assert!(tape.concat(&[a, b], 1).is_err());
}

// -- mse ------------------------------------------------------------------------

#[test]
fn mse_worked_examples() {
    let mut tape = Tape::new();
    let p = tape.leaf(Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
    let t0 = tape.leaf(Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
    let z = tape.mse_loss(p, t0).unwrap();
    assert_eq!(tape.data(z), &[0.0]);

    let t1 = tape.leaf(Tensor::zeros(vec![2, 1]));
    let l = tape.mse_loss(p, t1).unwrap();
    assert_eq!(tape.data(l), &[2.5]); // (1 + 4) / 2
}

#[test]
fn mse_matches_direct_sum_oracle() {
    let mut rng = DetRng::seed(16);
    let pt = rand_tensor(&mut rng, vec![17, 1]);
    let tt = rand_tensor(&mut rng, vec![17, 1]);
    let expect = oracles::mse_ref(pt.data(), tt.data());
    let mut tape = Tape::new();
    let (p, t) = (tape.leaf(pt), tape.leaf(tt));
    let l = tape.mse_loss(p, t).unwrap();
    assert!((tape.data(l)[0] - expect).abs() < 1e-12);
}

// -- backward machinery ----------------------------------------------------------

#[test]
fn backward_of_sum_is_all_ones() {
    let mut rng = DetRng::seed(17);
    let mut tape = Tape::new();
    let x = tape.leaf(rand_tensor(&mut rng, vec![3, 4]).tracked());
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().iter().all(|&g| g == 1.0));
}

#[test]
fn unused_tracked_leaf_gets_zero_gradient() {
    let mut rng = DetRng::seed(18);
    let mut tape = Tape::new();
    let x = tape.leaf(rand_tensor(&mut rng, vec![4]).tracked());
    let unused = tape.leaf(rand_tensor(&mut rng, vec![5]).tracked());
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(unused).unwrap().iter().all(|&g| g == 0.0));
}

#[test]
fn backward_twice_without_rewind_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::filled(vec![2], 1.0).tracked());
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(TensorError::BackwardTwice)));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::filled(vec![2, 2], 1.0).tracked());
    assert!(matches!(tape.backward(x), Err(TensorError::NotScalar { .. })));
}

#[test]
fn vars_are_tape_scoped() {
    let mut a = Tape::<f64>::new();
    let mut b = Tape::<f64>::new();
    let x = a.leaf(Tensor::zeros(vec![2]));
    assert!(matches!(b.sum(x), Err(TensorError::ForeignVar)));
}

#[test]
fn rewind_allows_another_pass_and_keeps_leaves() {
    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::new(vec![1], vec![2.0]).unwrap().tracked());
    let mark = tape.mark();
    for step in 0..3 {
        let x = tape.leaf(Tensor::new(vec![1], vec![1.0 + step as f64]).unwrap());
        let y = tape.mul(w, x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0 + step as f64]);
        tape.rewind(mark);
        assert!(tape.grad(w).is_none());
        assert_eq!(tape.data(w), &[2.0]);
    }
}

// -- determinism ------------------------------------------------------------------

/// One forward + backward + adam_step sequence, fully seeded.
fn train_step_digest(seed: u64) -> Vec<u64> {
    let mut rng = DetRng::seed(seed);
    let mut tape = Tape::<f64>::new();
    let w = tape.leaf(rand_tensor(&mut rng, vec![8, 4]).tracked());
    let b = tape.leaf(Tensor::zeros(vec![4]).tracked());
    let mark = tape.mark();
    let mut adam_w = AdamState::new(32, 1e-2);
    let mut adam_b = AdamState::new(4, 1e-2);
    for step in 0..4 {
        let x = tape.leaf(rand_tensor(&mut rng, vec![6, 8]));
        let t = tape.leaf(rand_tensor(&mut rng, vec![6, 4]));
        let h = tape.dense(x, w, b).unwrap();
        let r = tape.relu(h).unwrap();
        let mut drop_rng = DetRng::named(seed, &format!("drop.{step}"));
        let d = tape.dropout(r, 0.4, Mode::Train, &mut drop_rng).unwrap();
        let loss = tape.mse_loss(d, t).unwrap();
        tape.backward(loss).unwrap();
        let (pw, gw) = tape.param_and_grad_mut(w).unwrap();
        adam_w.step(pw, &gw.to_vec(), "w").unwrap();
        let (pb, gb) = tape.param_and_grad_mut(b).unwrap();
        adam_b.step(pb, &gb.to_vec(), "b").unwrap();
        tape.rewind(mark);
    }
    tape.data(w).iter().chain(tape.data(b)).map(|v| v.to_bits()).collect()
}

#[test]
fn fixed_seed_training_is_bit_reproducible() {
    assert_eq!(train_step_digest(99), train_step_digest(99));
    assert_ne!(train_step_digest(99), train_step_digest(100));
}

// -- finite outputs -----------------------------------------------------------------

#[test]
fn forward_backward_stay_finite_on_finite_inputs() {
    let mut rng = DetRng::seed(19);
    let mut tape = Tape::new();
    let x = tape.leaf(rand_tensor(&mut rng, vec![2, 3, 8, 8]).tracked());
    let w = tape.leaf(rand_tensor(&mut rng, vec![4, 3, 3, 3]).tracked());
    let b = tape.leaf(rand_tensor(&mut rng, vec![4]).tracked());
    let c = tape.conv2d(x, w, b).unwrap();
    let p = tape.maxpool2(c).unwrap();
    let fl = tape.flatten(p).unwrap();
    let t = tape.leaf(rand_tensor(&mut rng, vec![2, 64]));
    let loss = tape.mse_loss(fl, t).unwrap();
    tape.backward(loss).unwrap();
    for v in [x, w, b] {
        assert!(tape.extract(v).all_finite());
        assert!(tape.grad(v).unwrap().iter().all(|g| g.is_finite()));
    }
}
