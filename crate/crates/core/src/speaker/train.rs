use std::collections::BTreeMap;

use log::{info, warn};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::loss::{multitask_loss, LossConfig};
use super::net::{SpeakerEncoder, MIN_FRAMES};
use crate::dsp::{AudioBuffer, FrameMatrix};
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, AdamConfig, OptimizerState, Session};
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedTrainConfig {
    pub steps: usize,
    pub speakers_per_batch: usize,
    pub utts_per_speaker: usize,
    pub segment_min: usize,
    pub segment_max: usize,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for EmbedTrainConfig {
    fn default() -> Self {
        EmbedTrainConfig {
            steps: 2000,
            speakers_per_batch: 8,
            utts_per_speaker: 2,
            segment_min: 100,
            segment_max: 200,
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            clip_norm: 5.0,
            seed: 1,
        }
    }
}

/// One training sequence (VAD-filtered STFT magnitudes) and its speaker class.
#[derive(Clone, Debug)]
pub struct LabeledFrames {
    pub label: usize,
    pub frames: FrameMatrix,
}

/// `(start, len)` of a random slice with length uniform in
/// `[min, min(max, n)]`. Inputs shorter than `min` are returned whole.
pub fn random_segment<R: Rng>(n: usize, min: usize, max: usize, rng: &mut R) -> (usize, usize) {
    if n <= min {
        if n < min {
            warn!("sequence of {n} frames is shorter than the {min}-frame minimum segment");
        }
        return (0, n);
    }
    let len = rng.random_range(min..=max.min(n));
    let start = rng.random_range(0..=n - len);
    (start, len)
}

/// Additive white noise at an SNR drawn from [10, 20] dB, then a gain in
/// [-6, 6] dB. The result is clipped to [-1, 1].
pub fn augment<R: Rng>(audio: &AudioBuffer, rng: &mut R) -> Result<AudioBuffer> {
    let x = audio.samples();
    let power = x.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / x.len().max(1) as f64;
    let snr_db: f64 = rng.random_range(10.0..20.0);
    let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    let gain = 10f64.powf(rng.random_range(-6.0..6.0) / 20.0);
    let out = x
        .iter()
        .map(|v| {
            let n: f64 = StandardNormal.sample(rng);
            ((*v as f64 + sigma * n) * gain) as f32
        })
        .collect();
    AudioBuffer::clipped(out, audio.sample_rate())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmbedStep {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Multi-task training: each batch samples `speakers_per_batch` classes and
/// `utts_per_speaker` random segments per class.
pub fn train_embedder(
    enc: &mut SpeakerEncoder,
    data: &[LabeledFrames],
    cfg: &EmbedTrainConfig,
    mut on_step: impl FnMut(&EmbedStep),
) -> Result<Vec<EmbedStep>> {
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, d) in data.iter().enumerate() {
        if d.label >= enc.net.config.n_classes {
            return Err(Error::invalid(format!(
                "label {} out of range for {} classes",
                d.label, enc.net.config.n_classes
            )));
        }
        if d.frames.rows() < MIN_FRAMES {
            return Err(Error::invalid(format!(
                "training item {i} has only {} frames",
                d.frames.rows()
            )));
        }
        by_label.entry(d.label).or_default().push(i);
    }
    if by_label.len() < 2 {
        return Err(Error::invalid("speaker training needs at least two classes"));
    }
    if cfg.segment_min < MIN_FRAMES || cfg.segment_max < cfg.segment_min {
        return Err(Error::invalid(format!(
            "segment range {}..{} invalid (minimum {MIN_FRAMES})",
            cfg.segment_min, cfg.segment_max
        )));
    }
    let labels: Vec<usize> = by_label.keys().copied().collect();
    let mut rng = substream(cfg.seed, "embed/batches");
    let mut opt = OptimizerState::new(cfg.adam, &enc.params)?;
    let mut history = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut chosen = labels.clone();
        chosen.shuffle(&mut rng);
        chosen.truncate(cfg.speakers_per_batch.max(2));
        let mut batch = Vec::new();
        for &l in &chosen {
            let pool = &by_label[&l];
            for _ in 0..cfg.utts_per_speaker.max(1) {
                let item = &data[*pool.choose(&mut rng).expect("non-empty")];
                let (start, len) = random_segment(item.frames.rows(), cfg.segment_min, cfg.segment_max, &mut rng);
                batch.push((l, item.frames.slice_rows(start, len)?));
            }
        }
        let (loss, grads) = {
            let mut s = Session::new(&enc.params, true);
            let mut rows = Vec::with_capacity(batch.len());
            for (_, f) in &batch {
                rows.push(enc.net.forward(&mut s, f)?);
            }
            let e = s.concat_rows(&rows)?;
            let ys: Vec<usize> = batch.iter().map(|b| b.0).collect();
            let l = multitask_loss(&mut s, &enc.net, e, &ys, &cfg.loss)?;
            let loss = s.value(l.total).values()[0] as f64;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: opt.step as usize + 1,
                    batch: format!("speakers {chosen:?}"),
                });
            }
            (loss, s.backward(l.total)?)
        };
        enc.params.accumulate(grads);
        clip_grad_norm(&mut enc.params, cfg.clip_norm);
        let lr = opt.step(&mut enc.params)?;
        let rec = EmbedStep {
            step: opt.step,
            loss,
            lr,
        };
        if rec.step.is_multiple_of(100) {
            info!("embed step {} loss {:.4} lr {:.2e}", rec.step, loss, lr);
        }
        on_step(&rec);
        history.push(rec);
    }
    Ok(history)
}
