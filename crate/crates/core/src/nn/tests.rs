use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_gradients, check_gradients_in_mode};
use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_input(s: &mut Session<f64>, r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Var {
    let v = (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect();
    s.input(rows, cols, v).unwrap()
}

fn set(ps: &mut ParamSet<f64>, id: ParamId, v: f64) {
    ps.get_mut(id).tensor.values_mut().iter_mut().for_each(|x| *x = v);
}

#[test]
fn fc_zero_input_passes_bias() {
    let mut ps = ParamSet::<f64>::new();
    let fc = Linear::new(&mut ps, "fc", 2, 2, &mut rng(0)).unwrap();
    ps.get_mut(fc.b).tensor.values_mut().copy_from_slice(&[1.0, 2.0]);
    let mut s = Session::new(&ps, false);
    let x = s.input(1, 2, vec![0.0, 0.0]).unwrap();
    let y = fc.forward(&mut s, x).unwrap();
    assert_eq!(s.value(y).values(), &[1.0, 2.0]);
}

#[test]
fn fc_identity() {
    let mut ps = ParamSet::<f64>::new();
    let fc = Linear::new(&mut ps, "fc", 2, 2, &mut rng(0)).unwrap();
    ps.get_mut(fc.w)
        .tensor
        .values_mut()
        .copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
    let mut s = Session::new(&ps, false);
    let x = s.input(1, 2, vec![1.0, 0.0]).unwrap();
    let y = fc.forward(&mut s, x).unwrap();
    assert_eq!(s.value(y).values(), &[1.0, 0.0]);
}

#[test]
fn fc_shape_mismatch_is_dimension_error() {
    let mut ps = ParamSet::<f64>::new();
    let fc = Linear::new(&mut ps, "fc", 3, 2, &mut rng(0)).unwrap();
    let mut s = Session::new(&ps, false);
    let x = s.input(1, 2, vec![0.0, 0.0]).unwrap();
    assert!(matches!(fc.forward(&mut s, x), Err(crate::Error::Shape(_))));
}

#[test]
fn fc_gradient_matches_finite_differences() {
    for seed in 0..10 {
        let mut r = rng(7 + seed);
        let mut ps = ParamSet::<f64>::new();
        let fc = Linear::new(&mut ps, "fc", 4, 2, &mut r).unwrap();
        set(&mut ps, fc.b, 0.3);
        let x: Vec<f64> = (0..12).map(|_| r.random_range(-1.0..1.0)).collect();
        let report = check_gradients(&ps, 1e-5, 64, |s| {
            let xv = s.input(3, 4, x.clone())?;
            let y = fc.forward(s, xv)?;
            let y2 = s.mul(y, y)?;
            Ok(s.sum(y2))
        })
        .unwrap();
        assert!(report.worst() < 1e-4, "seed {seed}: {:?}", report.per_param);
    }
}

#[test]
fn gru_zero_weights_halve_hidden_state() {
    let mut ps = ParamSet::<f64>::new();
    let cell = GruCell::new(&mut ps, "gru", 3, 4, &mut rng(1)).unwrap();
    for id in [cell.w_input, cell.w_hidden] {
        set(&mut ps, id, 0.0);
    }
    let mut s = Session::new(&ps, false);
    let x = s.input(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
    let h0 = s.input(1, 4, vec![0.0; 4]).unwrap();
    let h1 = cell.forward(&mut s, x, h0).unwrap();
    assert_eq!(s.value(h1).values(), &[0.0; 4]);
    let h = s.input(1, 4, vec![1.0, -2.0, 0.25, 4.0]).unwrap();
    let h2 = cell.forward(&mut s, x, h).unwrap();
    let expect = [0.5, -1.0, 0.125, 2.0];
    for (a, b) in s.value(h2).values().iter().zip(expect) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn gru_gradient_matches_finite_differences() {
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let mut ps = ParamSet::<f64>::new();
        let cell = GruCell::new(&mut ps, "gru", 3, 4, &mut r).unwrap();
        for id in [cell.b_input, cell.b_hidden] {
            ps.get_mut(id)
                .tensor
                .values_mut()
                .iter_mut()
                .for_each(|v| *v = r.random_range(-0.5..0.5));
        }
        let x: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
        let report = check_gradients(&ps, 1e-5, 64, |s| {
            let xv = s.input(2, 3, x.clone())?;
            let hv = s.input(2, 4, h.clone())?;
            let h1 = cell.forward(s, xv, hv)?;
            let h2 = cell.forward(s, xv, h1)?;
            let sq = s.mul(h2, h2)?;
            Ok(s.sum(sq))
        })
        .unwrap();
        assert!(report.worst() < 1e-4, "seed {seed}: {:?}", report.per_param);
    }
}

#[test]
fn conv_width_one_identity() {
    let mut ps = ParamSet::<f64>::new();
    let conv = Conv1d::new(&mut ps, "c", 2, 2, 1, 1, 1, Padding::Same, &mut rng(0)).unwrap();
    ps.get_mut(conv.w)
        .tensor
        .values_mut()
        .copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
    let mut s = Session::new(&ps, false);
    let vals = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let x = s.input(3, 2, vals.clone()).unwrap();
    let y = conv.forward(&mut s, x).unwrap();
    assert_eq!(s.value(y).values(), vals.as_slice());
}

#[test]
fn conv_impulse_response() {
    let mut ps = ParamSet::<f64>::new();
    let conv = Conv1d::new(&mut ps, "c", 1, 1, 3, 1, 1, Padding::Same, &mut rng(0)).unwrap();
    set(&mut ps, conv.w, 1.0);
    let mut s = Session::new(&ps, false);
    let mut vals = vec![0.0; 10];
    vals[5] = 1.0;
    let x = s.input(10, 1, vals).unwrap();
    let y = conv.forward(&mut s, x).unwrap();
    let out = s.value(y).values();
    assert_eq!(out.len(), 10);
    for (t, v) in out.iter().enumerate() {
        let expect = if (4..=6).contains(&t) { 1.0 } else { 0.0 };
        assert_eq!(*v, expect, "t={t}");
    }
}

#[test]
fn conv_valid_mode_rejects_short_input() {
    let mut ps = ParamSet::<f64>::new();
    let conv = Conv1d::new(&mut ps, "c", 1, 1, 5, 1, 1, Padding::Valid, &mut rng(0)).unwrap();
    let mut s = Session::new(&ps, false);
    let x = s.input(4, 1, vec![0.0; 4]).unwrap();
    assert!(conv.forward(&mut s, x).is_err());
    assert!(Conv1d::new(&mut ps, "even", 1, 1, 4, 1, 1, Padding::Same, &mut rng(0)).is_err());
}

#[test]
fn conv_gradient_matches_finite_differences() {
    for seed in 0..10 {
        let mut r = rng(200 + seed);
        let mut ps = ParamSet::<f64>::new();
        let a = Conv1d::new(&mut ps, "a", 3, 4, 3, 2, 1, Padding::Same, &mut r).unwrap();
        let b = Conv1d::new(&mut ps, "b", 4, 2, 4, 1, 2, Padding::Explicit(1, 2), &mut r).unwrap();
        let x: Vec<f64> = (0..24).map(|_| r.random_range(-1.0..1.0)).collect();
        let report = check_gradients(&ps, 1e-5, 64, |s| {
            let xv = s.input(8, 3, x.clone())?;
            let h = a.forward(s, xv)?;
            let h = s.tanh(h);
            let y = b.forward(s, h)?;
            let sq = s.mul(y, y)?;
            Ok(s.sum(sq))
        })
        .unwrap();
        assert!(report.worst() < 1e-4, "seed {seed}: {:?}", report.per_param);
    }
}

#[test]
fn highway_gate_limits() {
    let mut ps = ParamSet::<f64>::new();
    let hw = Highway::new(&mut ps, "hw", 3, &mut rng(3)).unwrap();
    let x = vec![0.4, -0.7, 1.2];
    let run = |ps: &ParamSet<f64>| {
        let mut s = Session::new(ps, false);
        let xv = s.input(1, 3, x.clone()).unwrap();
        let y = hw.forward(&mut s, xv).unwrap();
        let t = hw.transform.forward(&mut s, xv).unwrap();
        let t = s.relu(t);
        (s.value(y).values().to_vec(), s.value(t).values().to_vec())
    };
    set(&mut ps, hw.gate.w, 0.0);
    set(&mut ps, hw.gate.b, -20.0);
    let (y, _) = run(&ps);
    for (a, b) in y.iter().zip(&x) {
        assert!((a - b).abs() < 1e-7);
    }
    set(&mut ps, hw.gate.b, 20.0);
    let (y, t) = run(&ps);
    for (a, b) in y.iter().zip(&t) {
        assert!((a - b).abs() < 1e-7);
    }
}

#[test]
fn highway_gradient_matches_finite_differences() {
    for seed in 0..10 {
        let mut r = rng(300 + seed);
        let mut ps = ParamSet::<f64>::new();
        let hw = Highway::new(&mut ps, "hw", 4, &mut r).unwrap();
        let x: Vec<f64> = (0..12).map(|_| r.random_range(-1.0..1.0)).collect();
        let report = check_gradients(&ps, 1e-5, 64, |s| {
            let xv = s.input(3, 4, x.clone())?;
            let y = hw.forward(s, xv)?;
            let sq = s.mul(y, y)?;
            Ok(s.sum(sq))
        })
        .unwrap();
        assert!(report.worst() < 1e-4, "seed {seed}: {:?}", report.per_param);
    }
}

#[test]
fn batch_norm_standardized_input_passes_through() {
    let mut ps = ParamSet::<f64>::new();
    let bn = BatchNorm::new(&mut ps, "bn", 1).unwrap();
    let mut s = Session::new(&ps, true);
    let x = s.input(2, 1, vec![-1.0, 1.0]).unwrap();
    let y = bn.forward(&mut s, x).unwrap();
    for (a, b) in s.value(y).values().iter().zip([-1.0, 1.0]) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn batch_norm_zero_gamma_gives_beta() {
    let mut ps = ParamSet::<f64>::new();
    let bn = BatchNorm::new(&mut ps, "bn", 2).unwrap();
    set(&mut ps, bn.gamma, 0.0);
    ps.get_mut(bn.beta).tensor.values_mut().copy_from_slice(&[0.5, -3.0]);
    for train in [true, false] {
        let mut s = Session::new(&ps, train);
        let x = random_input(&mut s, &mut rng(9), 5, 2);
        let y = bn.forward(&mut s, x).unwrap();
        for row in s.value(y).to_rows() {
            assert_eq!(row, vec![0.5, -3.0]);
        }
    }
}

#[test]
fn batch_norm_normalizes_batch_statistics() {
    let mut ps = ParamSet::<f64>::new();
    let bn = BatchNorm::new(&mut ps, "bn", 3).unwrap();
    let mut s = Session::new(&ps, true);
    let mut r = rng(11);
    let vals: Vec<f64> = (0..30).map(|_| r.random_range(-5.0..9.0)).collect();
    let x = s.input(10, 3, vals).unwrap();
    let y = bn.forward(&mut s, x).unwrap();
    let out = s.value(y).to_rows();
    for j in 0..3 {
        let mean: f64 = out.iter().map(|r| r[j]).sum::<f64>() / 10.0;
        let var: f64 = out.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / 10.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-3);
    }
    assert_eq!(s.take_stat_updates().len(), 2);
}

#[test]
fn batch_norm_train_needs_two_rows() {
    let mut ps = ParamSet::<f64>::new();
    let bn = BatchNorm::new(&mut ps, "bn", 2).unwrap();
    let mut s = Session::new(&ps, true);
    let x = s.input(1, 2, vec![1.0, 2.0]).unwrap();
    assert!(bn.forward(&mut s, x).is_err());
    let mut s = Session::new(&ps, false);
    let x = s.input(1, 2, vec![1.0, 2.0]).unwrap();
    assert!(bn.forward(&mut s, x).is_ok());
}

#[test]
fn batch_norm_gradient_matches_finite_differences() {
    for seed in 0..10 {
        let mut r = rng(400 + seed);
        let mut ps = ParamSet::<f64>::new();
        let fc = Linear::new(&mut ps, "fc", 3, 3, &mut r).unwrap();
        let bn = BatchNorm::new(&mut ps, "bn", 3).unwrap();
        ps.get_mut(bn.gamma)
            .tensor
            .values_mut()
            .iter_mut()
            .for_each(|v| *v = r.random_range(0.5..1.5));
        let x: Vec<f64> = (0..15).map(|_| r.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..15).map(|_| r.random_range(-1.0..1.0)).collect();
        for train in [true, false] {
            let report = check_gradients_in_mode(&ps, train, 1e-5, 64, |s| {
                let xv = s.input(5, 3, x.clone())?;
                let h = fc.forward(s, xv)?;
                let y = bn.forward(s, h)?;
                let wv = s.input(5, 3, w.clone())?;
                let p = s.mul(y, wv)?;
                let t = s.tanh(p);
                Ok(s.sum(t))
            })
            .unwrap();
            assert!(report.worst() < 1e-4, "seed {seed}: {:?}", report.per_param);
        }
    }
}

#[test]
fn composite_chain_gradients() {
    for seed in 0..10 {
        let mut r = rng(500 + seed);
        let mut ps = ParamSet::<f64>::new();
        let a = Linear::new(&mut ps, "a", 3, 4, &mut r).unwrap();
        let cell = GruCell::new(&mut ps, "gru", 4, 5, &mut r).unwrap();
        let b = Linear::new(&mut ps, "b", 5, 2, &mut r).unwrap();
        let x: Vec<f64> = (0..9).map(|_| r.random_range(-1.0..1.0)).collect();
        let report = check_gradients(&ps, 1e-5, 64, |s| {
            let mut h = s.input(1, 5, vec![0.0; 5])?;
            for t in 0..3 {
                let xt = s.input(1, 3, x[t * 3..t * 3 + 3].to_vec())?;
                let e = a.forward(s, xt)?;
                let e = s.tanh(e);
                h = cell.forward(s, e, h)?;
            }
            let y = b.forward(s, h)?;
            let sq = s.mul(y, y)?;
            Ok(s.sum(sq))
        })
        .unwrap();
        assert!(report.worst() < 1e-4, "seed {seed}: {:?}", report.per_param);
    }
}

#[test]
fn ops_gradients_softmax_l2norm_crossentropy() {
    for seed in 0..10 {
        let mut r = rng(600 + seed);
        let mut ps = ParamSet::<f64>::new();
        let w = ps.add_uniform("w", &[4, 3], 1.0, &mut r).unwrap();
        let v = ps.add_uniform("v", &[3, 3], 1.0, &mut r).unwrap();
        let x: Vec<f64> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
        let report = check_gradients(&ps, 1e-5, 64, |s| {
            let xv = s.input(2, 4, x.clone())?;
            let wv = s.p(w);
            let vv = s.p(v);
            let h = s.matmul(xv, wv)?;
            let n = s.l2_normalize_rows(h)?;
            let vn = s.l2_normalize_rows(vv)?;
            let logits = s.matmul_nt(n, vn)?;
            let logits = s.scale(logits, 3.0);
            let sm = s.softmax_rows(logits);
            let c0 = s.slice_cols(sm, 0, 1)?;
            let ctx = s.mul_col(n, c0)?;
            let m = s.mean_rows(ctx)?;
            let ce = s.cross_entropy(logits, &[2, 0])?;
            let ms = s.sum(m);
            let both = s.concat_rows(&[ce, ms])?;
            Ok(s.sum(both))
        })
        .unwrap();
        assert!(report.worst() < 1e-4, "seed {seed}: {:?}", report.per_param);
    }
}

#[test]
fn deterministic_forward() {
    let build = || {
        let mut ps = ParamSet::<f32>::new();
        let cell = GruCell::new(&mut ps, "gru", 3, 4, &mut rng(42)).unwrap();
        let mut s = Session::new(&ps, false);
        let x = s.input(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let h = s.input(2, 4, vec![0.0; 8]).unwrap();
        let y = cell.forward(&mut s, x, h).unwrap();
        s.value(y).values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(build(), build());
}
