use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use super::acoustic::{AcousticModel, ModelSidecar};
use super::loss::spectrogram_loss;
use super::net::ModelInput;
use crate::corpus::make_batches;
use crate::dsp::FrameMatrix;
use crate::error::{Error, Result};
use crate::nn::{checkpoint, clip_grad_norm, AdamConfig, OptimizerState, ParamSet, Session, Var};
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelTrainConfig {
    /// Total optimizer steps, counting steps taken before a resume.
    pub steps: u64,
    pub batch_size: usize,
    pub checkpoint_every: u64,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for ModelTrainConfig {
    fn default() -> Self {
        ModelTrainConfig {
            steps: 5000,
            batch_size: 8,
            checkpoint_every: 500,
            adam: AdamConfig {
                warmup_steps: 500,
                ..Default::default()
            },
            clip_norm: 1.0,
            seed: 1,
        }
    }
}

/// One training utterance with its target mel frames.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    pub id: String,
    pub input: ModelInput,
    pub mel: FrameMatrix,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelStep {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Where periodic checkpoints and the CSV log go.
#[derive(Clone, Debug)]
pub struct CheckpointSink {
    pub dir: PathBuf,
    pub config_hash: String,
}

impl CheckpointSink {
    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.dir.join(format!("model_{step:06}.dsc"))
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join("train_log.csv")
    }
}

pub fn optimizer_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("opt")
}

/// Highest-step `model_*.dsc` in `dir`.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(step) = name
            .strip_prefix("model_")
            .and_then(|n| n.strip_suffix(".dsc"))
            .and_then(|n| n.parse::<u64>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| step > *b) {
            best = Some((step, path));
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Model, optimizer state and sidecar of a checkpoint written by [`train_model`].
pub fn resume(path: &Path, adam: AdamConfig) -> Result<(AcousticModel, OptimizerState, ModelSidecar)> {
    let (model, side) = AcousticModel::load(path)?;
    let entries = checkpoint::load_entries(&optimizer_path(path))?;
    let opt = OptimizerState::from_entries(adam, &model.params, entries)?;
    Ok((model, opt, side))
}

/// Indices of the batch used at optimizer step `step` (1-based). Epochs are
/// reshuffled from the seed, so any step can be reproduced after a resume.
pub fn batch_for_step(n: usize, batch_size: usize, seed: u64, step: u64) -> Result<Vec<usize>> {
    if step == 0 {
        return Err(Error::invalid("steps are numbered from 1"));
    }
    let per_epoch = n.div_ceil(batch_size.max(1)) as u64;
    let k = step - 1;
    let mut batches = make_batches(n, batch_size, seed, k / per_epoch)?;
    Ok(batches.swap_remove((k % per_epoch) as usize))
}

/// Train-mode session for optimizer step `step`; its dropout masks depend
/// only on the seed and the step.
pub fn train_session(params: &ParamSet<f32>, seed: u64, step: u64) -> Session<'_, f32> {
    Session::with_rng(params, substream(seed, &format!("model/dropout/{step}")))
}

/// Loss that optimizer step `step` sees on `batch`, without an update.
pub fn batch_loss(model: &AcousticModel, batch: &[&TrainItem], seed: u64, step: u64) -> Result<f64> {
    let mut s = train_session(&model.params, seed, step);
    let l = loss_var(&mut s, model, batch)?;
    Ok(s.value(l).values()[0] as f64)
}

fn loss_var(s: &mut Session<f32>, model: &AcousticModel, batch: &[&TrainItem]) -> Result<Var> {
    let inputs: Vec<&ModelInput> = batch.iter().map(|b| &b.input).collect();
    let mels: Vec<&FrameMatrix> = batch.iter().map(|b| &b.mel).collect();
    let f = model.net.forward(s, &inputs, &model.norm, Some(&mels))?;
    let target: Vec<f32> = mels.iter().flat_map(|m| m.data().iter().copied()).collect();
    let mask = vec![1.0; f.frames.total()];
    spectrogram_loss(s, f.coarse, f.refined, &target, &mask)
}

/// Teacher-forced training from `opt.step + 1` through `cfg.steps`.
pub fn train_model(
    model: &mut AcousticModel,
    opt: Option<OptimizerState>,
    items: &[TrainItem],
    cfg: &ModelTrainConfig,
    sink: Option<&CheckpointSink>,
    mut on_step: impl FnMut(&ModelStep),
) -> Result<(OptimizerState, Vec<ModelStep>)> {
    if items.is_empty() {
        return Err(Error::invalid("no training utterances"));
    }
    for it in items {
        it.input.validate(model.config())?;
        if it.mel.rows() != it.input.frames() || it.mel.cols() != model.config().n_mels {
            return Err(Error::shape(format!(
                "{}: mel is {}×{}, expected {}×{}",
                it.id,
                it.mel.rows(),
                it.mel.cols(),
                it.input.frames(),
                model.config().n_mels
            )));
        }
    }
    let mut opt = match opt {
        Some(o) => o,
        None => OptimizerState::new(cfg.adam, &model.params)?,
    };
    if let Some(sink) = sink {
        std::fs::create_dir_all(&sink.dir)?;
    }
    let mut history = Vec::new();
    while opt.step < cfg.steps {
        let step = opt.step + 1;
        let idx = batch_for_step(items.len(), cfg.batch_size, cfg.seed, step)?;
        let batch: Vec<&TrainItem> = idx.iter().map(|&i| &items[i]).collect();
        let (loss, grads, stats) = {
            let mut s = train_session(&model.params, cfg.seed, step);
            let l = loss_var(&mut s, model, &batch)?;
            let loss = s.value(l).values()[0] as f64;
            if !loss.is_finite() {
                let ids: Vec<&str> = batch.iter().map(|b| b.id.as_str()).collect();
                return Err(Error::NonFiniteLoss {
                    step: step as usize,
                    batch: ids.join(","),
                });
            }
            let grads = s.backward(l)?;
            (loss, grads, s.take_stat_updates())
        };
        model.params.accumulate(grads);
        model.params.apply_stat_updates(stats);
        clip_grad_norm(&mut model.params, cfg.clip_norm);
        let lr = opt.step(&mut model.params)?;
        let rec = ModelStep { step, loss, lr };
        if let Some(sink) = sink {
            append_log(&sink.log_path(), &rec)?;
            if step % cfg.checkpoint_every.max(1) == 0 || step == cfg.steps {
                let path = sink.checkpoint_path(step);
                model.save(&path, &sink.config_hash, step, loss)?;
                checkpoint::save_entries(&optimizer_path(&path), &opt.to_entries(&model.params))?;
            }
        }
        if step % 100 == 0 {
            info!("model step {step} loss {loss:.4} lr {lr:.2e}");
        }
        on_step(&rec);
        history.push(rec);
    }
    Ok((opt, history))
}

fn append_log(path: &Path, rec: &ModelStep) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "step,loss,lr")?;
    }
    writeln!(f, "{},{},{}", rec.step, rec.loss, rec.lr)?;
    Ok(())
}
