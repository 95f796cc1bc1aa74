use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dsp::FrameMatrix;
use crate::nn::gradcheck::check_gradients;
use crate::nn::{ParamSet, Scalar, Session};
use proptest::prelude::*;

fn tiny() -> ModelConfig {
    ModelConfig {
        vocab: 6,
        phone_dim: 3,
        enc_dim: 4,
        enc_bank: 2,
        bank_channels: 2,
        highway_layers: 1,
        spk_dim: 3,
        cond_dim: 4,
        prenet_dim: 3,
        prenet_dropout: 0.0,
        dec_dim: 4,
        attn_dim: 3,
        attn_window: 11,
        n_mels: 3,
        post_bank: 2,
        post_dim: 4,
    }
}

fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    let v: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    crate::speaker::normalize(v).unwrap()
}

fn input(rng: &mut ChaCha8Rng, cfg: &ModelConfig, durations: &[usize]) -> ModelInput {
    let t: usize = durations.iter().sum();
    ModelInput {
        phones: durations.iter().map(|_| rng.random_range(0..cfg.vocab)).collect(),
        durations: durations.to_vec(),
        f0: (0..t)
            .map(|_| {
                if rng.random::<f32>() < 0.2 {
                    0.0
                } else {
                    rng.random_range(80.0..600.0)
                }
            })
            .collect(),
        rmse: (0..t).map(|_| rng.random_range(0.0..0.3)).collect(),
        speaker: unit(rng, cfg.spk_dim),
    }
}

fn mel(rng: &mut ChaCha8Rng, t: usize, m: usize) -> FrameMatrix {
    FrameMatrix::new(t, m, (0..t * m).map(|_| rng.random_range(-4.0..0.0)).collect()).unwrap()
}

fn build<T: Scalar>(cfg: ModelConfig, seed: u64) -> (DurianNet, ParamSet<T>) {
    let mut ps = ParamSet::new();
    let net = DurianNet::build(&mut ps, cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (net, ps)
}

/// Random biases keep ReLU inputs off the kink at zero.
fn jitter_biases(ps: &mut ParamSet<f64>, rng: &mut ChaCha8Rng) {
    for p in ps.iter_mut() {
        if p.trainable && (p.name.ends_with(".b") || p.name.ends_with("beta")) {
            p.tensor
                .values_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
    }
}

fn rows(s: &Session<f32>, v: crate::nn::Var) -> Vec<Vec<f32>> {
    s.value(v).to_rows()
}

#[test]
fn encoder_width_and_single_phone() {
    let cfg = ModelConfig::toy(4);
    let (net, ps) = build::<f32>(cfg, 0);
    let mut s = Session::new(&ps, false);
    let (h, layout) = net.encode(&mut s, &[&[1, 2, 3, 4, 5, 6, 7][..], &[3][..]]).unwrap();
    assert_eq!(s.value(h).shape(), &[8, cfg.enc_dim]);
    assert_eq!(layout.lengths(), &[7, 1]);
    let (h, _) = net.encode(&mut s, &[&[3][..]]).unwrap();
    assert_eq!(s.value(h).shape(), &[1, cfg.enc_dim]);
}

#[test]
fn default_widths() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.condition_input_dim(), 514);
    let (net, ps) = build::<f32>(cfg, 0);
    let mut s = Session::new(&ps, false);
    let (h, _) = net.encode(&mut s, &[&[0, 5, 9][..]]).unwrap();
    assert_eq!(s.value(h).shape(), &[3, 256]);
}

#[test]
fn unknown_phone_is_rejected() {
    let (net, ps) = build::<f32>(tiny(), 0);
    let mut s = Session::new(&ps, false);
    assert!(net.encode(&mut s, &[&[0, 6][..]]).is_err());
}

#[test]
fn encoder_mixes_context() {
    let cfg = ModelConfig::toy(4);
    let (net, ps) = build::<f32>(cfg, 3);
    let a: Vec<usize> = vec![0, 1, 2, 3, 4, 5, 6, 7, 8, 9];
    let mut b = a.clone();
    b.swap(0, 9);
    let mut s = Session::new(&ps, false);
    let (ha, _) = net.encode(&mut s, &[&a[..]]).unwrap();
    let (hb, _) = net.encode(&mut s, &[&b[..]]).unwrap();
    let (ra, rb) = (rows(&s, ha), rows(&s, hb));
    for t in [0, 5, 9] {
        let d: f32 = ra[t].iter().zip(&rb[t]).map(|(x, y)| (x - y).abs()).sum();
        assert!(d > 1e-6, "position {t} unchanged");
    }
}

#[test]
fn batched_encoding_matches_single_items() {
    let cfg = ModelConfig::toy(4);
    let (net, ps) = build::<f32>(cfg, 5);
    let (a, b) = (vec![1usize, 4, 2, 8, 3], vec![7usize, 0]);
    let mut s = Session::new(&ps, false);
    let (hab, _) = net.encode(&mut s, &[&a[..], &b[..]]).unwrap();
    let (ha, _) = net.encode(&mut s, &[&a[..]]).unwrap();
    let (hb, _) = net.encode(&mut s, &[&b[..]]).unwrap();
    let joint = rows(&s, hab);
    let single: Vec<Vec<f32>> = rows(&s, ha).into_iter().chain(rows(&s, hb)).collect();
    for (x, y) in joint.iter().flatten().zip(single.iter().flatten()) {
        assert!((x - y).abs() < 1e-5);
    }
}

#[test]
fn state_expand_examples() {
    let ps = ParamSet::<f32>::new();
    let mut s = Session::new(&ps, false);
    let h = s.input(3, 2, vec![1.0, 1.5, 2.0, 2.5, 3.0, 3.5]).unwrap();
    let layout = SeqLayout::new(vec![3]).unwrap();
    let (e, frames) = state_expand(&mut s, h, &layout, &[&[2, 1, 3][..]]).unwrap();
    assert_eq!(frames.total(), 6);
    let firsts: Vec<f32> = rows(&s, e).iter().map(|r| r[0]).collect();
    assert_eq!(firsts, vec![1.0, 1.0, 2.0, 3.0, 3.0, 3.0]);

    let (e, _) = state_expand(&mut s, h, &layout, &[&[1, 1, 1][..]]).unwrap();
    assert_eq!(s.value(e).values(), s.value(h).values());

    let h2 = s.input(2, 1, vec![4.0, 5.0]).unwrap();
    let l2 = SeqLayout::new(vec![2]).unwrap();
    let (e, _) = state_expand(&mut s, h2, &l2, &[&[0, 2][..]]).unwrap();
    assert_eq!(s.value(e).values(), &[5.0, 5.0]);
    assert!(state_expand(&mut s, h2, &l2, &[&[0, 0][..]]).is_err());
    assert!(state_expand(&mut s, h2, &l2, &[&[1][..]]).is_err());
}

proptest! {
    #[test]
    fn state_expand_copies_rows_exactly(
        d in prop::collection::vec(0usize..6, 1..12),
        seed in any::<u64>(),
    ) {
        prop_assume!(d.iter().sum::<usize>() > 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = d.len();
        let vals: Vec<f32> = (0..n * 4).map(|_| rng.random_range(-1e3..1e3)).collect();
        let ps = ParamSet::<f32>::new();
        let mut s = Session::new(&ps, false);
        let h = s.input(n, 4, vals.clone()).unwrap();
        let layout = SeqLayout::new(vec![n]).unwrap();
        let (e, frames) = state_expand(&mut s, h, &layout, &[&d[..]]).unwrap();
        prop_assert_eq!(frames.total(), d.iter().sum::<usize>());
        let out = rows(&s, e);
        let mut t = 0;
        for (i, &di) in d.iter().enumerate() {
            for _ in 0..di {
                prop_assert_eq!(&out[t][..], &vals[i * 4..i * 4 + 4]);
                t += 1;
            }
        }
    }
}

#[test]
fn condition_zero_weights_give_bias_rows() {
    let cfg = tiny();
    let (net, mut ps) = build::<f32>(cfg, 0);
    ps.get_mut(net.cond_fc.w)
        .tensor
        .values_mut()
        .iter_mut()
        .for_each(|v| *v = 0.0);
    let bias = [0.5, -1.0, 2.0, 0.25];
    ps.get_mut(net.cond_fc.b).tensor.values_mut().copy_from_slice(&bias);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = input(&mut rng, &cfg, &[2, 3]);
    let mut s = Session::new(&ps, false);
    let (h, layout) = net.encode(&mut s, &[&x.phones[..]]).unwrap();
    let (e, frames) = state_expand(&mut s, h, &layout, &[&x.durations[..]]).unwrap();
    let c = net
        .condition(&mut s, e, &frames, &[&x], &FeatureNorm::default())
        .unwrap();
    for r in rows(&s, c) {
        assert_eq!(r, bias);
    }
}

#[test]
fn condition_responds_to_speaker_on_every_frame() {
    let cfg = tiny();
    let (net, ps) = build::<f32>(cfg, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = input(&mut rng, &cfg, &[3, 1, 2]);
    let mut b = a.clone();
    b.speaker = unit(&mut rng, cfg.spk_dim);
    let mut s = Session::new(&ps, false);
    let (h, layout) = net.encode(&mut s, &[&a.phones[..]]).unwrap();
    let (e, frames) = state_expand(&mut s, h, &layout, &[&a.durations[..]]).unwrap();
    let norm = FeatureNorm::default();
    let ca = net.condition(&mut s, e, &frames, &[&a], &norm).unwrap();
    let cb = net.condition(&mut s, e, &frames, &[&b], &norm).unwrap();
    for (ra, rb) in rows(&s, ca).iter().zip(rows(&s, cb).iter()) {
        assert!(ra.iter().zip(rb).any(|(x, y)| x != y));
    }
    let mut short = a.clone();
    short.f0.pop();
    assert!(net.condition(&mut s, e, &frames, &[&short], &norm).is_err());
}

#[test]
fn feature_norm_maps_and_inverts() {
    let n = FeatureNorm {
        f0_max: 1100.0,
        rmse_min: 0.1,
        rmse_max: 0.5,
    };
    assert_eq!(n.f0(0.0), 0.0);
    assert!((n.f0(1100.0) - 1.0).abs() < 1e-6);
    assert!((n.f0_inverse(n.f0(220.0)) - 220.0).abs() < 1e-2);
    assert!((n.rmse(0.3) - 0.5).abs() < 1e-6);
    assert!((n.rmse_inverse(0.5) - 0.3).abs() < 1e-6);
}

fn decode_len(t: usize) -> (usize, usize, Vec<Vec<f32>>) {
    let cfg = tiny();
    let (net, ps) = build::<f32>(cfg, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = input(&mut rng, &cfg, &[t]);
    let mut s = Session::new(&ps, false);
    let f = net.forward(&mut s, &[&x], &FeatureNorm::default(), None).unwrap();
    let att = f.attention.iter().map(|a| s.value(*a).values().to_vec()).collect();
    (f.steps, s.value(f.refined).rows(), att)
}

#[test]
fn decoder_emits_two_frames_per_step() {
    assert_eq!(decode_len(4).0, 2);
    assert_eq!(decode_len(4).1, 4);
    let (steps, frames, att) = decode_len(5);
    assert_eq!((steps, frames), (3, 5));
    for a in &att {
        assert_eq!(a.len(), 11);
        assert!((a.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
    // Last step centres on frame 5 of 0..5; offsets reaching frame 5 and
    // beyond must carry no weight.
    let last = att.last().unwrap();
    assert!(last[5..].iter().all(|w| *w == 0.0));
    assert!(last[..5].iter().all(|w| *w > 0.0));
}

#[test]
fn attention_sums_to_one_across_ragged_batch() {
    let cfg = tiny();
    let (net, ps) = build::<f32>(cfg, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = input(&mut rng, &cfg, &[1, 2]);
    let b = input(&mut rng, &cfg, &[4, 5, 6, 2]);
    let mut s = Session::new(&ps, false);
    let f = net.forward(&mut s, &[&a, &b], &FeatureNorm::default(), None).unwrap();
    assert_eq!(f.steps, 9);
    for v in &f.attention {
        for row in s.value(*v).to_rows() {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }
    assert_eq!(s.value(f.refined).rows(), 20);
}

#[test]
fn teacher_forcing_matches_self_feed_on_first_step() {
    let cfg = tiny();
    let (net, ps) = build::<f32>(cfg, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = input(&mut rng, &cfg, &[2, 3]);
    let target = mel(&mut rng, 5, cfg.n_mels);
    let mut s = Session::new(&ps, false);
    let free = net.forward(&mut s, &[&x], &FeatureNorm::default(), None).unwrap();
    let tf = net
        .forward(&mut s, &[&x], &FeatureNorm::default(), Some(&[&target]))
        .unwrap();
    let (a, b) = (rows(&s, free.coarse), rows(&s, tf.coarse));
    assert_eq!(a[..2], b[..2]);
    assert_ne!(a[2..], b[2..]);
}

#[test]
fn zero_postnet_is_identity() {
    let cfg = tiny();
    let (net, mut ps) = build::<f32>(cfg, 8);
    for p in ps.iter_mut() {
        if p.name.starts_with("post.") {
            p.tensor.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let y = mel(&mut rng, 7, cfg.n_mels);
    for train in [false, true] {
        let mut s = Session::new(&ps, train);
        let layout = SeqLayout::new(vec![7]).unwrap();
        let yv = s.input_f32(7, cfg.n_mels, y.data()).unwrap();
        let out = net.postnet(&mut s, yv, &layout).unwrap();
        assert_eq!(s.value(out).shape(), &[7, cfg.n_mels]);
        assert_eq!(s.value(out).values(), y.data());
    }
}

#[test]
fn postnet_gradients_match_finite_differences() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (net, mut ps) = build::<f64>(cfg, 9);
    jitter_biases(&mut ps, &mut rng);
    let y: Vec<f64> = (0..2 * 6 * cfg.n_mels).map(|_| rng.random_range(-2.0..2.0)).collect();
    let weights: Vec<f64> = (0..y.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let report = check_gradients(&ps, 1e-5, 10, |s| {
        let layout = SeqLayout::new(vec![5, 7])?;
        let yv = s.input(12, cfg.n_mels, y.clone())?;
        let out = net.postnet(s, yv, &layout)?;
        let w = s.input(12, cfg.n_mels, weights.clone())?;
        let prod = s.mul(out, w)?;
        Ok(s.sum(prod))
    })
    .unwrap();
    let post: Vec<_> = report
        .per_param
        .iter()
        .filter(|(n, _)| n.starts_with("post."))
        .collect();
    assert!(!post.is_empty());
    for (name, err) in post {
        assert!(*err < 1e-4, "{name}: {err}");
    }
}

#[test]
fn spectrogram_loss_examples() {
    let ps = ParamSet::<f64>::new();
    let mut s = Session::new(&ps, false);
    let target = vec![0.5, -1.0, 2.0, 3.0];
    let mask = vec![1.0, 1.0];
    let y = s.input(2, 2, target.clone()).unwrap();
    let l = spectrogram_loss(&mut s, y, y, &target, &mask).unwrap();
    assert_eq!(s.value(l).values()[0], 0.0);
    let shifted = s.input(2, 2, target.iter().map(|v| v + 1.0).collect()).unwrap();
    let l = spectrogram_loss(&mut s, y, shifted, &target, &mask).unwrap();
    assert!((s.value(l).values()[0] - 1.0).abs() < 1e-12);
    assert!(spectrogram_loss(&mut s, y, shifted, &target, &[0.0, 0.0]).is_err());
}

proptest! {
    #[test]
    fn spectrogram_loss_ignores_padding(
        vals in prop::collection::vec(-5.0f64..5.0, 12),
        target in prop::collection::vec(-5.0f64..5.0, 6),
        pad in 0usize..5,
    ) {
        let ps = ParamSet::<f64>::new();
        let mut s = Session::new(&ps, false);
        let a = s.input(2, 3, vals[..6].to_vec()).unwrap();
        let b = s.input(2, 3, vals[6..].to_vec()).unwrap();
        let base = spectrogram_loss(&mut s, a, b, &target, &[1.0, 1.0]).unwrap();
        let base = s.value(base).values()[0];

        let padded = |v: &[f64]| {
            let mut out = v.to_vec();
            out.extend(std::iter::repeat_n(0.0, pad * 3));
            out
        };
        let ap = s.input(2 + pad, 3, padded(&vals[..6])).unwrap();
        let bp = s.input(2 + pad, 3, padded(&vals[6..])).unwrap();
        let mut mask = vec![1.0, 1.0];
        mask.extend(std::iter::repeat_n(0.0, pad));
        let l = spectrogram_loss(&mut s, ap, bp, &padded(&target), &mask).unwrap();
        prop_assert!((s.value(l).values()[0] - base).abs() < 1e-12);
    }
}

/// Loss of the full model on a 3-phone, 8-frame utterance.
fn composite_loss<T: Scalar>(
    net: &DurianNet,
    s: &mut Session<T>,
    x: &ModelInput,
    target: &FrameMatrix,
) -> crate::Result<crate::nn::Var> {
    let f = net.forward(s, &[x], &FeatureNorm::default(), Some(&[target]))?;
    let t: Vec<T> = target.data().iter().map(|v| T::lit(*v as f64)).collect();
    let mask = vec![T::one(); target.rows()];
    spectrogram_loss(s, f.coarse, f.refined, &t, &mask)
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (net, mut ps) = build::<f64>(cfg, 11);
    jitter_biases(&mut ps, &mut rng);
    let x = input(&mut rng, &cfg, &[3, 2, 3]);
    let target = mel(&mut rng, 8, cfg.n_mels);
    let report = check_gradients(&ps, 1e-5, 10, |s| composite_loss(&net, s, &x, &target)).unwrap();
    for (name, err) in &report.per_param {
        assert!(*err < 1e-4, "{name}: {err}");
    }

    // Single-precision analytic gradients against the verified double ones.
    // Biases feeding batch norm have zero gradient, so each parameter's
    // error is measured against at least 1% of the global gradient norm.
    let grads64 = {
        let mut s = Session::new(&ps, true);
        let l = composite_loss(&net, &mut s, &x, &target).unwrap();
        s.backward(l).unwrap()
    };
    let ps32: ParamSet<f32> = ps.cast();
    let grads32 = {
        let mut s = Session::new(&ps32, true);
        let l = composite_loss(&net, &mut s, &x, &target).unwrap();
        s.backward(l).unwrap()
    };
    let global: f64 = grads64
        .0
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    for (id, p) in ps.iter() {
        if !p.trainable {
            continue;
        }
        let (Some(a), Some(b)) = (grads64.get(id), grads32.get(id)) else {
            continue;
        };
        let diff: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - *y as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-2 * global);
        assert!(diff / norm < 1e-3, "{}: {}", p.name, diff / norm);
    }
}

#[test]
fn attention_gradients_match_finite_differences() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (net, mut ps) = build::<f64>(cfg, 12);
    jitter_biases(&mut ps, &mut rng);
    let cond: Vec<f64> = (0..9 * cfg.cond_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let target: Vec<f64> = (0..9 * cfg.n_mels).map(|_| rng.random_range(-1.0..1.0)).collect();
    let report = check_gradients(&ps, 1e-5, 10, |s| {
        let frames = SeqLayout::new(vec![9])?;
        let c = s.input(9, cfg.cond_dim, cond.clone())?;
        let d = net.decode(s, c, &frames, None)?;
        let w = s.input(9, cfg.n_mels, target.clone())?;
        let p = s.mul(d.mel, w)?;
        Ok(s.sum(p))
    })
    .unwrap();
    let dec: Vec<_> = report.per_param.iter().filter(|(n, _)| n.starts_with("dec.")).collect();
    assert!(dec.iter().any(|(n, _)| n == "dec.attn.v"));
    for (name, err) in dec {
        assert!(*err < 1e-4, "{name}: {err}");
    }
}

fn toy_items(n: usize, seed: u64) -> (ModelConfig, Vec<TrainItem>) {
    let mut cfg = tiny();
    cfg.prenet_dropout = 0.5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = (0..n)
        .map(|i| {
            let d: Vec<usize> = (0..rng.random_range(2..5)).map(|_| rng.random_range(1..5)).collect();
            let x = input(&mut rng, &cfg, &d);
            let m = mel(&mut rng, x.frames(), cfg.n_mels);
            TrainItem {
                id: format!("u{i}"),
                input: x,
                mel: m,
            }
        })
        .collect();
    (cfg, items)
}

fn quick_config(steps: u64) -> ModelTrainConfig {
    ModelTrainConfig {
        steps,
        batch_size: 2,
        checkpoint_every: 2,
        adam: crate::nn::AdamConfig {
            warmup_steps: 5,
            ..Default::default()
        },
        clip_norm: 1.0,
        seed: 3,
    }
}

#[test]
fn first_step_loss_is_the_plain_forward_loss() {
    let (cfg, items) = toy_items(5, 1);
    let mut model = AcousticModel::new(cfg, FeatureNorm::default(), 1).unwrap();
    let tc = quick_config(1);
    let idx = batch_for_step(items.len(), tc.batch_size, tc.seed, 1).unwrap();
    let batch: Vec<&TrainItem> = idx.iter().map(|&i| &items[i]).collect();
    let expected = batch_loss(&model, &batch, tc.seed, 1).unwrap();
    let (_, hist) = train_model(&mut model, None, &items, &tc, None, |_| {}).unwrap();
    assert_eq!(hist[0].loss, expected);
    assert_eq!(hist[0].lr, 0.001 / 5.0);
}

#[test]
fn resume_reproduces_next_step() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, items) = toy_items(5, 2);
    let sink = CheckpointSink {
        dir: dir.path().to_path_buf(),
        config_hash: "abc".into(),
    };
    let mut model = AcousticModel::new(cfg, FeatureNorm::default(), 2).unwrap();
    let (_, straight) = train_model(&mut model, None, &items, &quick_config(5), Some(&sink), |_| {}).unwrap();

    let ckpt = sink.checkpoint_path(4);
    let (mut resumed, opt, side) = resume(&ckpt, quick_config(5).adam).unwrap();
    assert_eq!((side.step, side.config_hash.as_str()), (4, "abc"));
    assert_eq!(opt.step, 4);
    let (_, more) = train_model(&mut resumed, Some(opt), &items, &quick_config(5), None, |_| {}).unwrap();
    assert_eq!(more.len(), 1);
    assert_eq!(more[0].loss, straight[4].loss);
    assert_eq!(latest_checkpoint(dir.path()).unwrap(), Some(sink.checkpoint_path(5)));

    let log = std::fs::read_to_string(sink.log_path()).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "step,loss,lr");
    assert_eq!(lines.len(), 6);
}

#[test]
fn non_finite_loss_names_the_batch() {
    let (cfg, items) = toy_items(3, 3);
    let mut model = AcousticModel::new(cfg, FeatureNorm::default(), 3).unwrap();
    let id = model.params.id("dec.proj.b").unwrap();
    model.params.get_mut(id).tensor.values_mut()[0] = f32::NAN;
    let err = train_model(&mut model, None, &items, &quick_config(2), None, |_| {}).unwrap_err();
    match err {
        crate::Error::NonFiniteLoss { step, batch } => {
            assert_eq!(step, 1);
            assert!(batch.contains('u'));
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn checkpoint_roundtrip_and_deterministic_inference() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, items) = toy_items(2, 4);
    let model = AcousticModel::new(cfg, FeatureNorm::default(), 4).unwrap();
    let a = model.infer(&items[0].input).unwrap();
    assert_eq!(a, model.infer(&items[0].input).unwrap());
    let path = dir.path().join("m.dsc");
    model.save(&path, "h", 0, 0.0).unwrap();
    let (loaded, _) = AcousticModel::load(&path).unwrap();
    assert_eq!(loaded.infer(&items[0].input).unwrap(), a);
    assert_eq!(a.refined.rows(), items[0].input.frames());
}

#[test]
fn training_reduces_loss_on_tiny_set() {
    let (cfg, items) = toy_items(2, 5);
    let mut model = AcousticModel::new(cfg, FeatureNorm::default(), 5).unwrap();
    let mut tc = quick_config(150);
    tc.adam.base_lr = 0.01;
    let (_, hist) = train_model(&mut model, None, &items, &tc, None, |_| {}).unwrap();
    let first = hist[0].loss;
    let last = hist[hist.len() - 5..].iter().map(|h| h.loss).sum::<f64>() / 5.0;
    assert!(last < 0.7 * first, "{first} → {last}");
}

#[test]
fn mismatched_input_is_rejected() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut x = input(&mut rng, &cfg, &[2, 2]);
    assert!(x.validate(&cfg).is_ok());
    x.durations.push(1);
    assert!(x.validate(&cfg).is_err());
    let mut y = input(&mut rng, &cfg, &[2, 2]);
    y.speaker.pop();
    assert!(y.validate(&cfg).is_err());
}
