//! Reverse-mode gradients checked against the central finite-difference
//! oracle, op by op, on the shapes the contracts name.

mod common;

use common::{finite_diff, max_rel_error, seeded, uniform_vec, uniform_vec_away_from_zero, FD_STEP};
use rand::Rng;
use lscfg::geometry::ClusterConfig;
use lscfg::kernels::KldForm;
use lscfg::losses;
use lscfg::tape::{BnState, Mode, Tape};

const TOL: f64 = 1e-6;

#[test]
fn conv2d_input_gradient() {
    let mut rng = seeded(101);
    let (n, cin, cout, hw) = (2usize, 3usize, 4usize, 8usize);
    let input = uniform_vec(&mut rng, n * cin * hw * hw, -1.0, 1.0);
    let weight = uniform_vec(&mut rng, cout * cin * 9, -0.5, 0.5);
    let bias = uniform_vec(&mut rng, cout, -0.5, 0.5);

    let run = |x: &[f64]| {
        let mut tape = Tape::new();
        let xv = tape.leaf(&[n, cin, hw, hw], x.to_vec()).unwrap();
        let wv = tape.leaf(&[cout, cin, 3, 3], weight.clone()).unwrap();
        let bv = tape.leaf(&[cout], bias.clone()).unwrap();
        let out = tape.conv2d(xv, wv, bv).unwrap();
        let s = tape.sum(out).unwrap();
        tape.value(s)[0]
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(&[n, cin, hw, hw], input.clone()).unwrap();
    let wv = tape.leaf(&[cout, cin, 3, 3], weight.clone()).unwrap();
    let bv = tape.leaf(&[cout], bias.clone()).unwrap();
    let out = tape.conv2d(xv, wv, bv).unwrap();
    let s = tape.sum(out).unwrap();
    tape.backward(s).unwrap();

    let numeric = finite_diff(run, &input, FD_STEP);
    let err = max_rel_error(tape.grad(xv).unwrap(), &numeric);
    assert!(err < TOL, "conv2d input gradient error {err}");
}

#[test]
fn conv2d_weight_and_bias_gradient() {
    let mut rng = seeded(102);
    let (n, cin, cout, hw) = (1usize, 2usize, 3usize, 6usize);
    let input = uniform_vec(&mut rng, n * cin * hw * hw, -1.0, 1.0);
    let weight = uniform_vec(&mut rng, cout * cin * 9, -0.5, 0.5);
    let bias = uniform_vec(&mut rng, cout, -0.5, 0.5);

    let mut tape = Tape::new();
    let xv = tape.leaf(&[n, cin, hw, hw], input.clone()).unwrap();
    let wv = tape.leaf(&[cout, cin, 3, 3], weight.clone()).unwrap();
    let bv = tape.leaf(&[cout], bias.clone()).unwrap();
    let out = tape.conv2d(xv, wv, bv).unwrap();
    let s = tape.sum(out).unwrap();
    tape.backward(s).unwrap();

    let run_w = |w: &[f64]| {
        let mut t = Tape::new();
        let xv = t.leaf(&[n, cin, hw, hw], input.clone()).unwrap();
        let wv = t.leaf(&[cout, cin, 3, 3], w.to_vec()).unwrap();
        let bv = t.leaf(&[cout], bias.clone()).unwrap();
        let out = t.conv2d(xv, wv, bv).unwrap();
        let s = t.sum(out).unwrap();
        t.value(s)[0]
    };
    let err_w = max_rel_error(tape.grad(wv).unwrap(), &finite_diff(run_w, &weight, FD_STEP));
    assert!(err_w < TOL, "conv2d weight gradient error {err_w}");

    let run_b = |b: &[f64]| {
        let mut t = Tape::new();
        let xv = t.leaf(&[n, cin, hw, hw], input.clone()).unwrap();
        let wv = t.leaf(&[cout, cin, 3, 3], weight.clone()).unwrap();
        let bv = t.leaf(&[cout], b.to_vec()).unwrap();
        let out = t.conv2d(xv, wv, bv).unwrap();
        let s = t.sum(out).unwrap();
        t.value(s)[0]
    };
    let err_b = max_rel_error(tape.grad(bv).unwrap(), &finite_diff(run_b, &bias, FD_STEP));
    assert!(err_b < TOL, "conv2d bias gradient error {err_b}");
}

#[test]
fn batchnorm_train_gradient() {
    let mut rng = seeded(103);
    let (n, c, hw) = (2usize, 2usize, 4usize);
    let input = uniform_vec(&mut rng, n * c * hw * hw, -2.0, 2.0);
    let gamma = uniform_vec(&mut rng, c, 0.5, 1.5);
    let beta = uniform_vec(&mut rng, c, -0.5, 0.5);

    // Weight the output so the gradient is not the trivial constant field
    // (per-channel normalization makes d(sum)/dx nearly zero otherwise).
    let probe = uniform_vec(&mut rng, n * c * hw * hw, -1.0, 1.0);

    let run = |x: &[f64]| {
        let mut t = Tape::new();
        let xv = t.leaf(&[n, c, hw, hw], x.to_vec()).unwrap();
        let gv = t.leaf(&[c], gamma.clone()).unwrap();
        let bv = t.leaf(&[c], beta.clone()).unwrap();
        let mut state = BnState::new(c);
        let out = t.batchnorm2d(xv, gv, bv, &mut state, Mode::Train).unwrap();
        let pv = t.leaf(&[n, c, hw, hw], probe.clone()).unwrap();
        let weighted = t.mul(out, pv).unwrap();
        let s = t.sum(weighted).unwrap();
        t.value(s)[0]
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(&[n, c, hw, hw], input.clone()).unwrap();
    let gv = tape.leaf(&[c], gamma.clone()).unwrap();
    let bv = tape.leaf(&[c], beta.clone()).unwrap();
    let mut state = BnState::new(c);
    let out = tape.batchnorm2d(xv, gv, bv, &mut state, Mode::Train).unwrap();
    let pv = tape.leaf(&[n, c, hw, hw], probe.clone()).unwrap();
    let weighted = tape.mul(out, pv).unwrap();
    let s = tape.sum(weighted).unwrap();
    tape.backward(s).unwrap();

    let err = max_rel_error(tape.grad(xv).unwrap(), &finite_diff(run, &input, FD_STEP));
    assert!(err < TOL, "batchnorm input gradient error {err}");

    let run_g = |g: &[f64]| {
        let mut t = Tape::new();
        let xv = t.leaf(&[n, c, hw, hw], input.clone()).unwrap();
        let gv = t.leaf(&[c], g.to_vec()).unwrap();
        let bv = t.leaf(&[c], beta.clone()).unwrap();
        let mut state = BnState::new(c);
        let out = t.batchnorm2d(xv, gv, bv, &mut state, Mode::Train).unwrap();
        let pv = t.leaf(&[n, c, hw, hw], probe.clone()).unwrap();
        let weighted = t.mul(out, pv).unwrap();
        let s = t.sum(weighted).unwrap();
        t.value(s)[0]
    };
    let err_g = max_rel_error(tape.grad(gv).unwrap(), &finite_diff(run_g, &gamma, FD_STEP));
    assert!(err_g < TOL, "batchnorm gamma gradient error {err_g}");
}

#[test]
fn relu_gradient_away_from_kink() {
    let mut rng = seeded(104);
    let input = uniform_vec_away_from_zero(&mut rng, 32, 2.0, 1e-3);
    let probe = uniform_vec(&mut rng, 32, -1.0, 1.0);

    let run = |x: &[f64]| {
        let mut t = Tape::new();
        let xv = t.leaf(&[32], x.to_vec()).unwrap();
        let r = t.relu(xv).unwrap();
        let pv = t.leaf(&[32], probe.clone()).unwrap();
        let w = t.mul(r, pv).unwrap();
        let s = t.sum(w).unwrap();
        t.value(s)[0]
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(&[32], input.clone()).unwrap();
    let r = tape.relu(xv).unwrap();
    let pv = tape.leaf(&[32], probe.clone()).unwrap();
    let w = tape.mul(r, pv).unwrap();
    let s = tape.sum(w).unwrap();
    tape.backward(s).unwrap();

    let err = max_rel_error(tape.grad(xv).unwrap(), &finite_diff(run, &input, FD_STEP));
    assert!(err < TOL, "relu gradient error {err}");
}

#[test]
fn relu_all_negative_input_has_zero_gradient() {
    let mut tape = Tape::new();
    let xv = tape.leaf(&[4], vec![-3.0, -0.5, -1.2, -9.0]).unwrap();
    let r = tape.relu(xv).unwrap();
    assert!(tape.value(r).iter().all(|&v| v == 0.0));
    let s = tape.sum(r).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(xv).unwrap(), &[0.0; 4]);
}

#[test]
fn maxpool_gradient_with_distinct_values() {
    let mut rng = seeded(105);
    // Distinct values with comfortable gaps so h does not flip the argmax.
    let mut input: Vec<f64> = (0..16).map(|i| i as f64 * 0.1).collect();
    use rand::seq::SliceRandom;
    input.shuffle(&mut rng);
    let probe = uniform_vec(&mut rng, 4, -1.0, 1.0);

    let run = |x: &[f64]| {
        let mut t = Tape::new();
        let xv = t.leaf(&[1, 1, 4, 4], x.to_vec()).unwrap();
        let p = t.maxpool2(xv).unwrap();
        let pv = t.leaf(&[1, 1, 2, 2], probe.clone()).unwrap();
        let w = t.mul(p, pv).unwrap();
        let s = t.sum(w).unwrap();
        t.value(s)[0]
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(&[1, 1, 4, 4], input.clone()).unwrap();
    let p = tape.maxpool2(xv).unwrap();
    let pv = tape.leaf(&[1, 1, 2, 2], probe.clone()).unwrap();
    let w = tape.mul(p, pv).unwrap();
    let s = tape.sum(w).unwrap();
    tape.backward(s).unwrap();

    let err = max_rel_error(tape.grad(xv).unwrap(), &finite_diff(run, &input, FD_STEP));
    assert!(err < TOL, "maxpool gradient error {err}");
}

#[test]
fn linear_gradients() {
    let mut rng = seeded(106);
    let (n, din, dout) = (3usize, 5usize, 4usize);
    let input = uniform_vec(&mut rng, n * din, -1.0, 1.0);
    let weight = uniform_vec(&mut rng, dout * din, -1.0, 1.0);
    let bias = uniform_vec(&mut rng, dout, -1.0, 1.0);
    let probe = uniform_vec(&mut rng, n * dout, -1.0, 1.0);

    let run_over = |x: &[f64], w: &[f64], b: &[f64]| {
        let mut t = Tape::new();
        let xv = t.leaf(&[n, din], x.to_vec()).unwrap();
        let wv = t.leaf(&[dout, din], w.to_vec()).unwrap();
        let bv = t.leaf(&[dout], b.to_vec()).unwrap();
        let out = t.linear(xv, wv, bv).unwrap();
        let pv = t.leaf(&[n, dout], probe.clone()).unwrap();
        let wtd = t.mul(out, pv).unwrap();
        let s = t.sum(wtd).unwrap();
        t.value(s)[0]
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(&[n, din], input.clone()).unwrap();
    let wv = tape.leaf(&[dout, din], weight.clone()).unwrap();
    let bv = tape.leaf(&[dout], bias.clone()).unwrap();
    let out = tape.linear(xv, wv, bv).unwrap();
    let pv = tape.leaf(&[n, dout], probe.clone()).unwrap();
    let wtd = tape.mul(out, pv).unwrap();
    let s = tape.sum(wtd).unwrap();
    tape.backward(s).unwrap();

    let gx = finite_diff(|x| run_over(x, &weight, &bias), &input, FD_STEP);
    let gw = finite_diff(|w| run_over(&input, w, &bias), &weight, FD_STEP);
    let gb = finite_diff(|b| run_over(&input, &weight, b), &bias, FD_STEP);
    assert!(max_rel_error(tape.grad(xv).unwrap(), &gx) < TOL);
    assert!(max_rel_error(tape.grad(wv).unwrap(), &gw) < TOL);
    assert!(max_rel_error(tape.grad(bv).unwrap(), &gb) < TOL);
}

#[test]
fn cross_entropy_gradient() {
    let mut rng = seeded(107);
    let (n, c) = (4usize, 5usize);
    let logits = uniform_vec(&mut rng, n * c, -2.0, 2.0);
    let labels = vec![0usize, 3, 2, 4];

    let run = |l: &[f64]| {
        let mut t = Tape::new();
        let lv = t.leaf(&[n, c], l.to_vec()).unwrap();
        let loss = t.cross_entropy(lv, &labels).unwrap();
        t.value(loss)[0]
    };

    let mut tape = Tape::new();
    let lv = tape.leaf(&[n, c], logits.clone()).unwrap();
    let loss = tape.cross_entropy(lv, &labels).unwrap();
    tape.backward(loss).unwrap();

    let err = max_rel_error(tape.grad(lv).unwrap(), &finite_diff(run, &logits, FD_STEP));
    assert!(err < TOL, "cross_entropy gradient error {err}");
}

#[test]
fn kld_gradient_both_forms() {
    let mut rng = seeded(108);
    let (n, d) = (3usize, 2usize);
    let mu = uniform_vec(&mut rng, n * d, -1.0, 1.0);
    let sigma = uniform_vec(&mut rng, n * d, 0.3, 1.8);

    for form in [KldForm::MuSigma, KldForm::Standard] {
        let run_mu = |m: &[f64]| {
            let mut t = Tape::new();
            let mv = t.leaf(&[n, d], m.to_vec()).unwrap();
            let sv = t.leaf(&[n, d], sigma.clone()).unwrap();
            let loss = t.kld(mv, sv, form).unwrap();
            t.value(loss)[0]
        };
        let run_sigma = |s: &[f64]| {
            let mut t = Tape::new();
            let mv = t.leaf(&[n, d], mu.clone()).unwrap();
            let sv = t.leaf(&[n, d], s.to_vec()).unwrap();
            let loss = t.kld(mv, sv, form).unwrap();
            t.value(loss)[0]
        };

        let mut tape = Tape::new();
        let mv = tape.leaf(&[n, d], mu.clone()).unwrap();
        let sv = tape.leaf(&[n, d], sigma.clone()).unwrap();
        let loss = tape.kld(mv, sv, form).unwrap();
        tape.backward(loss).unwrap();

        let em = max_rel_error(tape.grad(mv).unwrap(), &finite_diff(run_mu, &mu, FD_STEP));
        let es = max_rel_error(tape.grad(sv).unwrap(), &finite_diff(run_sigma, &sigma, FD_STEP));
        assert!(em < TOL && es < TOL, "kld gradient errors {em} / {es} ({form:?})");
    }
}

#[test]
fn geometric_gradient_outside_clusters() {
    let cfg = ClusterConfig::circular(5, 0.85, 0.34, 0.79, 0.0).unwrap();
    let mut rng = seeded(109);
    // Strictly outside: radius 1.5..2.5 from each sample's own center.
    let labels = vec![0usize, 2, 4];
    let mut z = Vec::new();
    for &l in &labels {
        let c = cfg.center(l);
        let ang: f64 = uniform_vec(&mut rng, 1, 0.0, std::f64::consts::TAU)[0];
        let rad: f64 = uniform_vec(&mut rng, 1, 1.5, 2.5)[0];
        z.push(c[0] + rad * ang.cos());
        z.push(c[1] + rad * ang.sin());
    }

    let run = |zz: &[f64]| {
        let mut t = Tape::new();
        let zv = t.leaf(&[3, 2], zz.to_vec()).unwrap();
        let loss = losses::geometric_loss(&mut t, zv, &labels, &cfg).unwrap();
        t.value(loss)[0]
    };

    let mut tape = Tape::new();
    let zv = tape.leaf(&[3, 2], z.clone()).unwrap();
    let loss = losses::geometric_loss(&mut tape, zv, &labels, &cfg).unwrap();
    tape.backward(loss).unwrap();

    let err = max_rel_error(tape.grad(zv).unwrap(), &finite_diff(run, &z, FD_STEP));
    assert!(err < TOL, "geometric gradient error {err}");
}

#[test]
fn composed_conv_relu_linear_ce_gradient() {
    // Small composed graph; gradients checked at 20 sampled parameters.
    let mut rng = seeded(110);
    let (n, cin, cout, hw) = (2usize, 1usize, 3usize, 4usize);
    let n_classes = 3;
    let flat = cout * hw * hw;
    let input = uniform_vec(&mut rng, n * cin * hw * hw, -1.0, 1.0);
    let conv_w = uniform_vec(&mut rng, cout * cin * 9, -0.6, 0.6);
    let conv_b = uniform_vec(&mut rng, cout, -0.2, 0.2);
    let lin_w = uniform_vec(&mut rng, n_classes * flat, -0.4, 0.4);
    let lin_b = uniform_vec(&mut rng, n_classes, -0.2, 0.2);
    let labels = vec![0usize, 2];

    let forward = |cw: &[f64], cb: &[f64], lw: &[f64], lb: &[f64]| {
        let mut t = Tape::new();
        let xv = t.leaf(&[n, cin, hw, hw], input.clone()).unwrap();
        let cwv = t.leaf(&[cout, cin, 3, 3], cw.to_vec()).unwrap();
        let cbv = t.leaf(&[cout], cb.to_vec()).unwrap();
        let conv = t.conv2d(xv, cwv, cbv).unwrap();
        let act = t.relu(conv).unwrap();
        let flatv = t.reshape(act, &[n, flat]).unwrap();
        let lwv = t.leaf(&[n_classes, flat], lw.to_vec()).unwrap();
        let lbv = t.leaf(&[n_classes], lb.to_vec()).unwrap();
        let logits = t.linear(flatv, lwv, lbv).unwrap();
        let loss = t.cross_entropy(logits, &labels).unwrap();
        (t, cwv, cbv, lwv, lbv, loss)
    };

    let (mut tape, cwv, cbv, lwv, lbv, loss) = forward(&conv_w, &conv_b, &lin_w, &lin_b);
    tape.backward(loss).unwrap();

    // Sample 20 parameter coordinates across all four tensors.
    let mut picks: Vec<(usize, usize)> = Vec::new();
    let sizes = [conv_w.len(), conv_b.len(), lin_w.len(), lin_b.len()];
    for _ in 0..20 {
        let tensor = rng.gen_range(0..4);
        picks.push((tensor, rng.gen_range(0..sizes[tensor])));
    }

    for (tensor, idx) in picks {
        let h = FD_STEP;
        let eval = |delta: f64| {
            let mut cw = conv_w.clone();
            let mut cb = conv_b.clone();
            let mut lw = lin_w.clone();
            let mut lb = lin_b.clone();
            match tensor {
                0 => cw[idx] += delta,
                1 => cb[idx] += delta,
                2 => lw[idx] += delta,
                _ => lb[idx] += delta,
            }
            let (t, _, _, _, _, l) = forward(&cw, &cb, &lw, &lb);
            t.value(l)[0]
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let analytic = match tensor {
            0 => tape.grad(cwv).unwrap()[idx],
            1 => tape.grad(cbv).unwrap()[idx],
            2 => tape.grad(lwv).unwrap()[idx],
            _ => tape.grad(lbv).unwrap()[idx],
        };
        let err = (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs());
        assert!(err < 1e-5, "composed gradient error {err} at tensor {tensor} idx {idx}");
    }
}

#[test]
fn polar_gradient_in_rotated_and_plain_regions() {
    use lscfg::kernels::PolarParams;
    let params = PolarParams {
        sector_period: std::f64::consts::PI / 3.0,
        inner_test_modulus: 2.0 * std::f64::consts::PI / 9.0,
        prohibited_threshold: std::f64::consts::PI / 18.0,
        extra_rotation: std::f64::consts::PI / 6.0,
    };
    // One point deep in a deflected region (20 deg), one in a pass-through
    // region (5 deg); both far from the decision boundaries.
    let z = vec![
        1.3 * 20f64.to_radians().cos(),
        1.3 * 20f64.to_radians().sin(),
        0.9 * 5f64.to_radians().cos(),
        0.9 * 5f64.to_radians().sin(),
    ];
    let probe = vec![0.7, -0.3, 0.2, 0.9];

    let run = |zz: &[f64]| {
        let mut t = Tape::new();
        let zv = t.leaf(&[2, 2], zz.to_vec()).unwrap();
        let out = t.polar(zv, params).unwrap();
        let pv = t.leaf(&[2, 2], probe.clone()).unwrap();
        let w = t.mul(out, pv).unwrap();
        let s = t.sum(w).unwrap();
        t.value(s)[0]
    };

    let mut tape = Tape::new();
    let zv = tape.leaf(&[2, 2], z.clone()).unwrap();
    let out = tape.polar(zv, params).unwrap();
    let pv = tape.leaf(&[2, 2], probe.clone()).unwrap();
    let w = tape.mul(out, pv).unwrap();
    let s = tape.sum(w).unwrap();
    tape.backward(s).unwrap();

    let err = max_rel_error(tape.grad(zv).unwrap(), &finite_diff(run, &z, FD_STEP));
    assert!(err < TOL, "polar gradient error {err}");
}
