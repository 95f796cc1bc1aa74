use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{FeatureNorm, ModelConfig};
use super::net::{DurianNet, Forward, ModelInput};
use crate::dsp::FrameMatrix;
use crate::error::Result;
use crate::nn::{checkpoint, ParamSet, Session};
use crate::rng::substream;
use crate::speaker::sidecar_path;

/// Trained acoustic model in single precision.
#[derive(Clone, Debug)]
pub struct AcousticModel {
    pub net: DurianNet,
    pub params: ParamSet<f32>,
    pub norm: FeatureNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub config_hash: String,
    pub step: u64,
    pub loss: f64,
    pub model: ModelConfig,
    pub norm: FeatureNorm,
}

/// Predicted mel frames of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub coarse: FrameMatrix,
    pub refined: FrameMatrix,
}

impl AcousticModel {
    pub fn new(config: ModelConfig, norm: FeatureNorm, seed: u64) -> Result<Self> {
        let mut params = ParamSet::new();
        let net = DurianNet::build(&mut params, config, &mut substream(seed, "model/init"))?;
        Ok(AcousticModel { net, params, norm })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    /// Self-fed inference in eval mode.
    pub fn infer(&self, input: &ModelInput) -> Result<Prediction> {
        Ok(self.infer_batch(&[input])?.remove(0))
    }

    pub fn infer_batch(&self, inputs: &[&ModelInput]) -> Result<Vec<Prediction>> {
        let mut s = Session::new(&self.params, false);
        let f = self.net.forward(&mut s, inputs, &self.norm, None)?;
        split(&s, &f, self.config().n_mels)
    }

    /// Eval-mode pass that feeds back ground-truth frames.
    pub fn teacher_forced(&self, input: &ModelInput, mel: &FrameMatrix) -> Result<Prediction> {
        let mut s = Session::new(&self.params, false);
        let f = self.net.forward(&mut s, &[input], &self.norm, Some(&[mel]))?;
        Ok(split(&s, &f, self.config().n_mels)?.remove(0))
    }

    pub fn save(&self, path: &Path, config_hash: &str, step: u64, loss: f64) -> Result<()> {
        checkpoint::save_params(path, &self.params)?;
        let side = ModelSidecar {
            config_hash: config_hash.to_string(),
            step,
            loss,
            model: self.net.config,
            norm: self.norm,
        };
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, ModelSidecar)> {
        let side: ModelSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
        let mut model = AcousticModel::new(side.model, side.norm, 0)?;
        checkpoint::load_params(path, &mut model.params)?;
        Ok((model, side))
    }
}

fn split(s: &Session<f32>, f: &Forward, m: usize) -> Result<Vec<Prediction>> {
    let (cv, rv) = (s.value(f.coarse).values(), s.value(f.refined).values());
    let mut out = Vec::with_capacity(f.frames.batch());
    for (i, &len) in f.frames.lengths().iter().enumerate() {
        let range = f.frames.offset(i) * m..(f.frames.offset(i) + len) * m;
        out.push(Prediction {
            coarse: FrameMatrix::new(len, m, cv[range.clone()].to_vec())?,
            refined: FrameMatrix::new(len, m, rv[range].to_vec())?,
        });
    }
    Ok(out)
}
