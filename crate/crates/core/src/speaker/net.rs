use std::path::Path;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::FrameMatrix;
use crate::error::{Error, Result};
use crate::nn::{checkpoint, Conv1d, Linear, Padding, ParamId, ParamSet, Scalar, Session, Tensor, Var};

/// Frames spanned by the three TDNN contexts (5, dilated 3, 1).
pub const MIN_FRAMES: usize = 9;
/// Deterministic inference chunk length.
pub const CHUNK_FRAMES: usize = 150;
const POOL_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedConfig {
    pub input_dim: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub n_classes: usize,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            input_dim: 257,
            channels: 256,
            embed_dim: 256,
            n_classes: 2,
        }
    }
}

/// TDNN frame layers, mean‖std pooling and a projection to the d-vector.
#[derive(Clone, Debug)]
pub struct EmbedNet {
    pub config: EmbedConfig,
    pub tdnn: [Conv1d; 3],
    pub fc: Linear,
    /// LMCL class weights, `n_classes × embed_dim`.
    pub class_w: ParamId,
}

impl EmbedNet {
    pub fn build<T: Scalar, R: Rng>(ps: &mut ParamSet<T>, config: EmbedConfig, rng: &mut R) -> Result<Self> {
        if config.n_classes < 1 || config.channels < 1 || config.embed_dim < 1 {
            return Err(Error::invalid("embedding network sizes must be positive"));
        }
        let c = config.channels;
        let tdnn = [
            Conv1d::new(ps, "spk.tdnn1", config.input_dim, c, 5, 1, 1, Padding::Valid, rng)?,
            Conv1d::new(ps, "spk.tdnn2", c, c, 3, 2, 1, Padding::Valid, rng)?,
            Conv1d::new(ps, "spk.tdnn3", c, c, 1, 1, 1, Padding::Valid, rng)?,
        ];
        let fc = Linear::new(ps, "spk.fc", 2 * c, config.embed_dim, rng)?;
        let limit = (6.0 / (config.n_classes + config.embed_dim) as f64).sqrt();
        let class_w = ps.add_uniform("spk.lmcl.w", &[config.n_classes, config.embed_dim], limit, rng)?;
        Ok(EmbedNet {
            config,
            tdnn,
            fc,
            class_w,
        })
    }

    /// Unit-norm embedding (`1 × embed_dim`) of one sequence of raw STFT
    /// magnitudes, compressed as `ln(1 + |X|)`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, magnitudes: &FrameMatrix) -> Result<Var> {
        let x = self.input(s, magnitudes)?;
        let pre = self.pooled_projection(s, x)?;
        s.l2_normalize_rows(pre)
    }

    pub fn input<T: Scalar>(&self, s: &mut Session<T>, magnitudes: &FrameMatrix) -> Result<Var> {
        if magnitudes.cols() != self.config.input_dim {
            return Err(Error::shape(format!(
                "speaker input has {} bins, network expects {}",
                magnitudes.cols(),
                self.config.input_dim
            )));
        }
        if magnitudes.rows() < MIN_FRAMES {
            return Err(Error::invalid(format!(
                "speaker input has {} frames, need at least {MIN_FRAMES}",
                magnitudes.rows()
            )));
        }
        let v = magnitudes
            .data()
            .iter()
            .map(|m| T::lit((m.max(0.0) as f64).ln_1p()))
            .collect();
        s.input(magnitudes.rows(), magnitudes.cols(), v)
    }

    /// Everything up to (not including) length normalisation.
    pub fn pooled_projection<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.tdnn {
            let y = layer.forward(s, h)?;
            h = s.relu(y);
        }
        let t = s.value(h).rows();
        let mean = s.mean_rows(h)?;
        let spread = s.gather_rows(mean, &vec![0; t])?;
        let centred = s.sub(h, spread)?;
        let sq = s.mul(centred, centred)?;
        let var = s.mean_rows(sq)?;
        let eps = s.constant(Tensor::full(&[1, self.config.channels], T::lit(POOL_EPS)));
        let var = s.add(var, eps)?;
        let std = s.sqrt(var)?;
        let stats = s.concat_cols(&[mean, std])?;
        self.fc.forward(s, stats)
    }

    /// Cosines (`B × n_classes`) between unit-row `embeddings` and the
    /// row-normalised class weights.
    pub fn cosines<T: Scalar>(&self, s: &mut Session<T>, embeddings: Var) -> Result<Var> {
        let w = s.p(self.class_w);
        let wn = s.l2_normalize_rows(w)?;
        s.matmul_nt(embeddings, wn)
    }
}

/// A trained embedding network together with its parameters.
#[derive(Clone, Debug)]
pub struct SpeakerEncoder {
    pub net: EmbedNet,
    pub params: ParamSet<f32>,
}

#[derive(Serialize, Deserialize)]
struct EncoderSidecar {
    config_hash: String,
    step: u64,
    loss: f64,
    embed: EmbedConfig,
}

impl SpeakerEncoder {
    pub fn new<R: Rng>(config: EmbedConfig, rng: &mut R) -> Result<Self> {
        let mut params = ParamSet::new();
        let net = EmbedNet::build(&mut params, config, rng)?;
        Ok(SpeakerEncoder { net, params })
    }

    /// Embedding of one VAD-filtered sequence.
    pub fn embed(&self, magnitudes: &FrameMatrix) -> Result<Vec<f32>> {
        let mut s = Session::new(&self.params, false);
        let e = self.net.forward(&mut s, magnitudes)?;
        Ok(s.value(e).values().to_vec())
    }

    /// Average of the embeddings of consecutive non-overlapping
    /// [`CHUNK_FRAMES`]-frame chunks, re-normalised. Sequences shorter than
    /// one chunk are embedded whole; a trailing partial chunk is dropped.
    pub fn embed_utterance(&self, magnitudes: &FrameMatrix) -> Result<Vec<f32>> {
        let n = magnitudes.rows();
        if n <= CHUNK_FRAMES {
            return self.embed(magnitudes);
        }
        let mut acc = vec![0.0f32; self.net.config.embed_dim];
        for c in 0..n / CHUNK_FRAMES {
            let e = self.embed(&magnitudes.slice_rows(c * CHUNK_FRAMES, CHUNK_FRAMES)?)?;
            acc.iter_mut().zip(&e).for_each(|(a, v)| *a += v);
        }
        normalize(acc)
    }

    /// Enrollment d-vector. Errors below `hard_floor_s` seconds of voiced
    /// audio and warns below `recommended_s`.
    pub fn extract_dvector(
        &self,
        magnitudes: &FrameMatrix,
        hop_s: f64,
        hard_floor_s: f64,
        recommended_s: f64,
    ) -> Result<Vec<f32>> {
        let seconds = magnitudes.rows() as f64 * hop_s;
        if seconds < hard_floor_s {
            return Err(Error::invalid(format!(
                "enrollment has {seconds:.1} s of voiced audio, need at least {hard_floor_s} s"
            )));
        }
        if seconds < recommended_s {
            warn!("enrollment has {seconds:.1} s of voiced audio; {recommended_s} s is recommended");
        }
        self.embed_utterance(magnitudes)
    }

    pub fn save(&self, path: &Path, config_hash: &str, step: u64, loss: f64) -> Result<()> {
        checkpoint::save_params(path, &self.params)?;
        let side = EncoderSidecar {
            config_hash: config_hash.to_string(),
            step,
            loss,
            embed: self.net.config,
        };
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side: EncoderSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
        let mut rng = crate::rng::substream(0, "load");
        let mut enc = SpeakerEncoder::new(side.embed, &mut rng)?;
        checkpoint::load_params(path, &mut enc.params)?;
        Ok(enc)
    }
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

pub fn normalize(mut v: Vec<f32>) -> Result<Vec<f32>> {
    let n = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if n <= 1e-12 || !n.is_finite() {
        return Err(Error::ZeroNorm);
    }
    v.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
    Ok(v)
}

/// Cosine similarity. Zero vectors are rejected.
pub fn cosine_score(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("cosine of {} and {} dims", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na <= 1e-12 || nb <= 1e-12 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0) as f32)
}
