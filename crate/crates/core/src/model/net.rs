use rand::Rng;

use super::cbhg::Cbhg;
use super::config::{FeatureNorm, ModelConfig, FRAMES_PER_STEP};
use super::layout::{expansion_index, SeqLayout};
use crate::dsp::FrameMatrix;
use crate::error::{Error, Result};
use crate::nn::{Embedding, GruCell, Linear, ParamId, ParamSet, Scalar, Session, Var};

/// Logit added to attention positions outside an item.
const MASKED_LOGIT: f64 = -1e9;

/// Conditioning inputs of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub phones: Vec<usize>,
    /// Frames per phone.
    pub durations: Vec<usize>,
    /// Hz per frame, 0 when unvoiced.
    pub f0: Vec<f32>,
    pub rmse: Vec<f32>,
    /// Unit-norm speaker embedding.
    pub speaker: Vec<f32>,
}

impl ModelInput {
    pub fn frames(&self) -> usize {
        self.durations.iter().sum()
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.phones.is_empty() {
            return Err(Error::invalid("phone sequence is empty"));
        }
        if self.durations.len() != self.phones.len() {
            return Err(Error::shape(format!(
                "{} durations for {} phones",
                self.durations.len(),
                self.phones.len()
            )));
        }
        let t = self.frames();
        if t == 0 {
            return Err(Error::invalid("durations sum to zero"));
        }
        if self.f0.len() != t || self.rmse.len() != t {
            return Err(Error::shape(format!(
                "durations cover {t} frames but f0 has {} and rmse {}",
                self.f0.len(),
                self.rmse.len()
            )));
        }
        if self.speaker.len() != cfg.spk_dim {
            return Err(Error::shape(format!(
                "speaker embedding has {} dims, model expects {}",
                self.speaker.len(),
                cfg.spk_dim
            )));
        }
        Ok(())
    }
}

/// Decoder result in packed frame order.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub mel: Var,
    pub steps: usize,
    /// Per step, `batch × window` attention weights.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Forward {
    /// Decoder output before the post-net, `ΣT × n_mels`.
    pub coarse: Var,
    pub refined: Var,
    pub frames: SeqLayout,
    pub steps: usize,
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct DurianNet {
    pub config: ModelConfig,
    pub embedding: Embedding,
    pub enc_fc: Linear,
    pub encoder: Cbhg,
    pub cond_fc: Linear,
    pub prenet: Linear,
    pub gru1: GruCell,
    pub gru2: GruCell,
    pub attn_query: Linear,
    pub attn_key: Linear,
    pub attn_v: ParamId,
    pub proj: Linear,
    pub postnet: Cbhg,
    pub post_proj: Linear,
}

impl DurianNet {
    pub fn build<T: Scalar, R: Rng>(ps: &mut ParamSet<T>, config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config;
        let embedding = Embedding::new(ps, "enc.embed", c.vocab, c.phone_dim, rng)?;
        let enc_fc = Linear::new(ps, "enc.fc", c.phone_dim, c.enc_dim, rng)?;
        let encoder = Cbhg::new(
            ps,
            "enc.cbhg",
            c.enc_dim,
            c.enc_bank,
            c.bank_channels,
            c.highway_layers,
            c.enc_dim,
            rng,
        )?;
        let cond_fc = Linear::new(ps, "cond.fc", c.condition_input_dim(), c.cond_dim, rng)?;
        let prenet = Linear::new(ps, "dec.prenet", c.n_mels, c.prenet_dim, rng)?;
        let gru1 = GruCell::new(ps, "dec.gru1", c.prenet_dim + c.cond_dim, c.dec_dim, rng)?;
        let gru2 = GruCell::new(ps, "dec.gru2", c.dec_dim + c.cond_dim, c.dec_dim, rng)?;
        let attn_query = Linear::new(ps, "dec.attn.query", c.dec_dim, c.attn_dim, rng)?;
        let attn_key = Linear::new(ps, "dec.attn.key", c.cond_dim, c.attn_dim, rng)?;
        let attn_v = ps.add_uniform("dec.attn.v", &[c.attn_dim, 1], (3.0 / c.attn_dim as f64).sqrt(), rng)?;
        let proj = Linear::new(ps, "dec.proj", c.dec_dim + c.cond_dim, FRAMES_PER_STEP * c.n_mels, rng)?;
        let postnet = Cbhg::new(
            ps,
            "post.cbhg",
            c.n_mels,
            c.post_bank,
            c.bank_channels,
            c.highway_layers,
            c.post_dim,
            rng,
        )?;
        let post_proj = Linear::new(ps, "post.proj", c.post_dim, c.n_mels, rng)?;
        Ok(DurianNet {
            config,
            embedding,
            enc_fc,
            encoder,
            cond_fc,
            prenet,
            gru1,
            gru2,
            attn_query,
            attn_key,
            attn_v,
            proj,
            postnet,
            post_proj,
        })
    }

    /// Phone sequences to packed `ΣN × enc_dim` encoder states.
    pub fn encode<T: Scalar>(&self, s: &mut Session<T>, phones: &[&[usize]]) -> Result<(Var, SeqLayout)> {
        let layout = SeqLayout::new(phones.iter().map(|p| p.len()).collect())?;
        let ids: Vec<usize> = phones.iter().flat_map(|p| p.iter().copied()).collect();
        let x = self.embedding.forward(s, &ids)?;
        let x = self.enc_fc.forward(s, x)?;
        let x = s.relu(x);
        let h = self.encoder.forward(s, x, &layout)?;
        Ok((h, layout))
    }

    /// Per-frame conditioning `cond_fc([e ‖ f0 ‖ rmse ‖ D])`.
    pub fn condition<T: Scalar>(
        &self,
        s: &mut Session<T>,
        e: Var,
        frames: &SeqLayout,
        items: &[&ModelInput],
        norm: &FeatureNorm,
    ) -> Result<Var> {
        let total = frames.total();
        if s.value(e).rows() != total || items.len() != frames.batch() {
            return Err(Error::shape("condition: states do not match the frame layout"));
        }
        let mut scalars = Vec::with_capacity(2 * total);
        let mut spk = Vec::with_capacity(items.len() * self.config.spk_dim);
        for (item, &len) in items.iter().zip(frames.lengths()) {
            if item.f0.len() != len || item.rmse.len() != len {
                return Err(Error::shape(format!(
                    "{len} frames but f0 has {} and rmse {}",
                    item.f0.len(),
                    item.rmse.len()
                )));
            }
            if item.speaker.len() != self.config.spk_dim {
                return Err(Error::shape(format!(
                    "speaker embedding has {} dims, model expects {}",
                    item.speaker.len(),
                    self.config.spk_dim
                )));
            }
            for (f, r) in item.f0.iter().zip(&item.rmse) {
                scalars.push(T::lit(norm.f0(*f) as f64));
                scalars.push(T::lit(norm.rmse(*r) as f64));
            }
            spk.extend(item.speaker.iter().map(|v| T::lit(*v as f64)));
        }
        let scalars = s.input(total, 2, scalars)?;
        let spk = s.input(items.len(), self.config.spk_dim, spk)?;
        let spk = s.gather_rows(spk, &frames.row_items())?;
        let x = s.concat_cols(&[e, scalars, spk])?;
        self.cond_fc.forward(s, x)
    }

    /// Autoregressive decoding, two frames per step. With `teacher` (packed
    /// target frames) each step consumes the previous ground-truth frame,
    /// otherwise its own previous output.
    pub fn decode<T: Scalar>(
        &self,
        s: &mut Session<T>,
        cond: Var,
        frames: &SeqLayout,
        teacher: Option<Var>,
    ) -> Result<Decoded> {
        let c = &self.config;
        let (b, m, w) = (frames.batch(), c.n_mels, c.attn_window);
        let half = (w / 2) as isize;
        let steps = frames.max_len().div_ceil(FRAMES_PER_STEP);

        let keys = self.attn_key.forward(s, cond)?;
        let v = s.p(self.attn_v);
        let mut group_sum = vec![T::zero(); b * b * w];
        for i in 0..b {
            for o in 0..w {
                group_sum[i * b * w + i * w + o] = T::one();
            }
        }
        let group_sum = s.input(b, b * w, group_sum)?;
        let repeat_query: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, w)).collect();

        let mut h1 = s.input(b, c.dec_dim, vec![T::zero(); b * c.dec_dim])?;
        let mut h2 = s.input(b, c.dec_dim, vec![T::zero(); b * c.dec_dim])?;
        let mut ctx = s.input(b, c.cond_dim, vec![T::zero(); b * c.cond_dim])?;
        let mut prev = s.input(b, m, vec![T::zero(); b * m])?;
        let mut outs = Vec::with_capacity(steps);
        let mut attention = Vec::with_capacity(steps);
        for step in 0..steps {
            if step > 0 {
                prev = match teacher {
                    Some(t) => s.gather_rows(t, &frames.time_index(FRAMES_PER_STEP * step - 1))?,
                    None => {
                        let last = *outs.last().expect("previous step");
                        s.slice_cols(last, (FRAMES_PER_STEP - 1) * m, m)?
                    }
                };
            }
            let p = self.prenet.forward(s, prev)?;
            let p = s.relu(p);
            let p = s.dropout(p, c.prenet_dropout)?;
            let x1 = s.concat_cols(&[p, ctx])?;
            h1 = self.gru1.forward(s, x1, h1)?;

            let centre = (FRAMES_PER_STEP * step + 1) as isize;
            let (idx, mask) = window(frames, centre, half, w);
            let q = self.attn_query.forward(s, h1)?;
            let q = s.gather_rows(q, &repeat_query)?;
            let k = s.gather_rows(keys, &idx)?;
            let e = s.add(q, k)?;
            let e = s.tanh(e);
            let e = s.matmul(e, v)?;
            let e = s.reshape(e, b, w)?;
            let mask = s.input(b, w, mask.into_iter().map(T::lit).collect())?;
            let e = s.add(e, mask)?;
            let a = s.softmax_rows(e);
            attention.push(a);
            let acol = s.reshape(a, b * w, 1)?;
            let vals = s.gather_rows(cond, &idx)?;
            let weighted = s.mul_col(vals, acol)?;
            ctx = s.matmul(group_sum, weighted)?;

            let x2 = s.concat_cols(&[h1, ctx])?;
            h2 = self.gru2.forward(s, x2, h2)?;
            let o = s.concat_cols(&[h2, ctx])?;
            outs.push(self.proj.forward(s, o)?);
        }

        // Row `step·b + i` of the stacked outputs holds frames 2·step and
        // 2·step + 1 of item `i`; split the halves and pick packed order.
        let stacked = s.concat_rows(&outs)?;
        let mut halves = Vec::with_capacity(FRAMES_PER_STEP);
        for f in 0..FRAMES_PER_STEP {
            halves.push(s.slice_cols(stacked, f * m, m)?);
        }
        let all = s.concat_rows(&halves)?;
        let rows: Vec<usize> = frames
            .lengths()
            .iter()
            .enumerate()
            .flat_map(|(i, &l)| (0..l).map(move |t| (t % FRAMES_PER_STEP) * steps * b + (t / FRAMES_PER_STEP) * b + i))
            .collect();
        let mel = s.gather_rows(all, &rows)?;
        Ok(Decoded { mel, steps, attention })
    }

    /// `ŷ = y′ + proj(cbhg(y′))`.
    pub fn postnet<T: Scalar>(&self, s: &mut Session<T>, y: Var, frames: &SeqLayout) -> Result<Var> {
        let c = self.postnet.forward(s, y, frames)?;
        let c = self.post_proj.forward(s, c)?;
        s.add(y, c)
    }

    pub fn forward<T: Scalar>(
        &self,
        s: &mut Session<T>,
        items: &[&ModelInput],
        norm: &FeatureNorm,
        teacher: Option<&[&FrameMatrix]>,
    ) -> Result<Forward> {
        for item in items {
            item.validate(&self.config)?;
        }
        let phones: Vec<&[usize]> = items.iter().map(|i| i.phones.as_slice()).collect();
        let durations: Vec<&[usize]> = items.iter().map(|i| i.durations.as_slice()).collect();
        let (h, phone_layout) = self.encode(s, &phones)?;
        let (e, frames) = state_expand(s, h, &phone_layout, &durations)?;
        let cond = self.condition(s, e, &frames, items, norm)?;
        let teacher = match teacher {
            Some(t) => Some(pack_frames(s, t, &frames, self.config.n_mels)?),
            None => None,
        };
        let dec = self.decode(s, cond, &frames, teacher)?;
        let refined = self.postnet(s, dec.mel, &frames)?;
        Ok(Forward {
            coarse: dec.mel,
            refined,
            frames,
            steps: dec.steps,
            attention: dec.attention,
        })
    }
}

/// Packed row indices and additive mask of the attention window around
/// `centre` for every item. Positions outside an item are clamped to its
/// range and masked; an item with no valid position (a padding step) keeps
/// the clamped positions unmasked.
fn window(frames: &SeqLayout, centre: isize, half: isize, w: usize) -> (Vec<usize>, Vec<f64>) {
    let mut idx = Vec::with_capacity(frames.batch() * w);
    let mut mask = Vec::with_capacity(frames.batch() * w);
    for (i, &len) in frames.lengths().iter().enumerate() {
        let off = frames.offset(i);
        let start = mask.len();
        for o in 0..w as isize {
            let pos = centre + o - half;
            let inside = pos >= 0 && pos < len as isize;
            idx.push(off + pos.clamp(0, len as isize - 1) as usize);
            mask.push(if inside { 0.0 } else { MASKED_LOGIT });
        }
        if mask[start..].iter().all(|m| *m != 0.0) {
            mask[start..].iter_mut().for_each(|m| *m = 0.0);
        }
    }
    (idx, mask)
}

/// Replicate packed phone states by their durations.
pub fn state_expand<T: Scalar>(
    s: &mut Session<T>,
    h: Var,
    phones: &SeqLayout,
    durations: &[&[usize]],
) -> Result<(Var, SeqLayout)> {
    if durations.len() != phones.batch() {
        return Err(Error::shape("one duration sequence per item is required"));
    }
    let mut idx = Vec::new();
    let mut lengths = Vec::with_capacity(durations.len());
    for (i, d) in durations.iter().enumerate() {
        if d.len() != phones.lengths()[i] {
            return Err(Error::shape(format!(
                "{} durations for {} phones",
                d.len(),
                phones.lengths()[i]
            )));
        }
        let local = expansion_index(d)?;
        lengths.push(local.len());
        idx.extend(local.into_iter().map(|r| r + phones.offset(i)));
    }
    let e = s.gather_rows(h, &idx)?;
    Ok((e, SeqLayout::new(lengths)?))
}

/// Stack frame matrices as one packed constant.
pub fn pack_frames<T: Scalar>(
    s: &mut Session<T>,
    mats: &[&FrameMatrix],
    frames: &SeqLayout,
    dim: usize,
) -> Result<Var> {
    if mats.len() != frames.batch() {
        return Err(Error::shape("one target per item is required"));
    }
    let mut data = Vec::with_capacity(frames.total() * dim);
    for (m, &len) in mats.iter().zip(frames.lengths()) {
        if m.rows() != len || m.cols() != dim {
            return Err(Error::shape(format!(
                "target is {}×{}, expected {len}×{dim}",
                m.rows(),
                m.cols()
            )));
        }
        data.extend(m.data().iter().map(|v| T::lit(*v as f64)));
    }
    s.input(frames.total(), dim, data)
}
