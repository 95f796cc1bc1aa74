use std::ops::{Deref, DerefMut};

use rand::Rng;

use super::params::{Gradients, ParamId, ParamSet};
use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::StageRng;

/// One forward pass: a fresh tape bound to a parameter set.
///
/// In train mode, batch-norm layers queue running-statistic updates that the
/// caller applies with [`ParamSet::apply_stat_updates`] after the step.
pub struct Session<'p, T: Scalar> {
    tape: Tape<T>,
    params: &'p ParamSet<T>,
    train: bool,
    stat_updates: Vec<(ParamId, Vec<T>)>,
    rng: Option<StageRng>,
}

impl<'p, T: Scalar> Session<'p, T> {
    pub fn new(params: &'p ParamSet<T>, train: bool) -> Self {
        Session {
            tape: Tape::new(),
            params,
            train,
            stat_updates: Vec::new(),
            rng: None,
        }
    }

    /// Train-mode session whose dropout masks come from `rng`.
    pub fn with_rng(params: &'p ParamSet<T>, rng: StageRng) -> Self {
        Session {
            rng: Some(rng),
            ..Session::new(params, true)
        }
    }

    /// Inverted dropout with drop probability `p`. Identity unless the
    /// session is in train mode and carries a generator.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !self.train || p <= 0.0 {
            return Ok(x);
        }
        let Some(rng) = self.rng.as_mut() else { return Ok(x) };
        let (r, c) = (self.tape.value(x).rows(), self.tape.value(x).cols());
        let keep = T::lit(1.0 / (1.0 - p));
        let mask = (0..r * c)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let m = self.input(r, c, mask)?;
        self.tape.mul(x, m)
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(self.params, id)
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn input(&mut self, rows: usize, cols: usize, values: Vec<T>) -> Result<Var> {
        Ok(self.tape.constant(Tensor::new(vec![rows, cols], values)?))
    }

    pub fn input_f32(&mut self, rows: usize, cols: usize, values: &[f32]) -> Result<Var> {
        let v = values.iter().map(|x| T::lit(*x as f64)).collect();
        self.input(rows, cols, v)
    }

    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        self.tape.backward(loss)
    }

    pub fn take_stat_updates(&mut self) -> Vec<(ParamId, Vec<T>)> {
        std::mem::take(&mut self.stat_updates)
    }
}

impl<T: Scalar> Deref for Session<'_, T> {
    type Target = Tape<T>;
    fn deref(&self) -> &Tape<T> {
        &self.tape
    }
}

impl<T: Scalar> DerefMut for Session<'_, T> {
    fn deref_mut(&mut self) -> &mut Tape<T> {
        &mut self.tape
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn apply_stat_updates(&mut self, updates: Vec<(ParamId, Vec<T>)>) {
        for (id, v) in updates {
            self.get_mut(id).tensor.values_mut().copy_from_slice(&v);
        }
    }
}

fn xavier(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Fully connected layer, `y = x·W + b` with `W: in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        ps: &mut ParamSet<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = ps.add_uniform(&format!("{name}.w"), &[in_dim, out_dim], xavier(in_dim, out_dim), rng)?;
        let b = ps.add_zeros(&format!("{name}.b"), &[out_dim], true)?;
        Ok(Linear { w, b, in_dim, out_dim })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let (w, b) = (s.p(self.w), s.p(self.b));
        let y = s.matmul(x, w)?;
        s.add_bias(y, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output length equals input length (stride 1, odd kernel).
    Same,
    Valid,
    /// Explicit left/right zero padding in frames.
    Explicit(usize, usize),
}

/// Temporal convolution over a `T×C` sequence. The weight is stored
/// unfolded as `(kernel·C_in)×C_out`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        ps: &mut ParamSet<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        dilation: usize,
        stride: usize,
        padding: Padding,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel == 0 || dilation == 0 || stride == 0 {
            return Err(Error::invalid("conv1d kernel, dilation and stride must be positive"));
        }
        if padding == Padding::Same && (kernel.is_multiple_of(2) || stride != 1) {
            return Err(Error::invalid(format!(
                "same padding needs an odd kernel and stride 1 (kernel {kernel}, stride {stride})"
            )));
        }
        let fan_in = kernel * in_ch;
        let w = ps.add_uniform(&format!("{name}.w"), &[fan_in, out_ch], xavier(fan_in, out_ch), rng)?;
        let b = ps.add_zeros(&format!("{name}.b"), &[out_ch], true)?;
        Ok(Conv1d {
            w,
            b,
            in_ch,
            out_ch,
            kernel,
            dilation,
            stride,
            padding,
        })
    }

    pub fn pads(&self) -> (usize, usize) {
        match self.padding {
            Padding::Same => {
                let p = self.dilation * (self.kernel - 1) / 2;
                (p, p)
            }
            Padding::Valid => (0, 0),
            Padding::Explicit(l, r) => (l, r),
        }
    }

    /// Unfold `x` into the im2col layout this layer multiplies against.
    pub fn unfold<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        if s.value(x).cols() != self.in_ch {
            return Err(Error::shape(format!(
                "conv1d expects {} channels, got {:?}",
                self.in_ch,
                s.value(x).shape()
            )));
        }
        let (l, r) = self.pads();
        s.im2col(x, self.kernel, self.dilation, self.stride, l, r)
    }

    /// Multiply already-unfolded rows by the kernel.
    pub fn apply_unfolded<T: Scalar>(&self, s: &mut Session<T>, cols: Var) -> Result<Var> {
        let (w, b) = (s.p(self.w), s.p(self.b));
        let y = s.matmul(cols, w)?;
        s.add_bias(y, b)
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let cols = self.unfold(s, x)?;
        self.apply_unfolded(s, cols)
    }
}

/// `y = g ⊙ relu(x·W_t + b_t) + (1 − g) ⊙ x`, `g = σ(x·W_g + b_g)`.
#[derive(Clone, Debug)]
pub struct Highway {
    pub transform: Linear,
    pub gate: Linear,
}

impl Highway {
    pub fn new<T: Scalar, R: Rng>(ps: &mut ParamSet<T>, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        let transform = Linear::new(ps, &format!("{name}.transform"), dim, dim, rng)?;
        let gate = Linear::new(ps, &format!("{name}.gate"), dim, dim, rng)?;
        // Start biased toward carrying the input through.
        ps.get_mut(gate.b)
            .tensor
            .values_mut()
            .iter_mut()
            .for_each(|v| *v = T::lit(-1.0));
        Ok(Highway { transform, gate })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let t = self.transform.forward(s, x)?;
        let t = s.relu(t);
        let g = self.gate.forward(s, x)?;
        let g = s.sigmoid(g);
        let diff = s.sub(t, x)?;
        let gated = s.mul(g, diff)?;
        s.add(x, gated)
    }
}

/// GRU cell; gate blocks are ordered reset, update, candidate.
///
/// ```text
/// r  = σ(x·W_ir + b_ir + h·W_hr + b_hr)
/// z  = σ(x·W_iz + b_iz + h·W_hz + b_hz)
/// n  = tanh(x·W_in + b_in + r ⊙ (h·W_hn + b_hn))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub b_input: ParamId,
    pub b_hidden: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn new<T: Scalar, R: Rng>(
        ps: &mut ParamSet<T>,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let k = 1.0 / (hidden_dim as f64).sqrt();
        let h3 = 3 * hidden_dim;
        Ok(GruCell {
            w_input: ps.add_uniform(&format!("{name}.w_input"), &[input_dim, h3], k, rng)?,
            w_hidden: ps.add_uniform(&format!("{name}.w_hidden"), &[hidden_dim, h3], k, rng)?,
            b_input: ps.add_zeros(&format!("{name}.b_input"), &[h3], true)?,
            b_hidden: ps.add_zeros(&format!("{name}.b_hidden"), &[h3], true)?,
            input_dim,
            hidden_dim,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var, h: Var) -> Result<Var> {
        let hd = self.hidden_dim;
        if s.value(x).cols() != self.input_dim || s.value(h).cols() != hd {
            return Err(Error::shape(format!(
                "gru cell ({}→{hd}) got x {:?}, h {:?}",
                self.input_dim,
                s.value(x).shape(),
                s.value(h).shape()
            )));
        }
        if s.value(x).rows() != s.value(h).rows() {
            return Err(Error::shape("gru cell: batch sizes of x and h differ"));
        }
        let (wi, wh, bi, bh) = (
            s.p(self.w_input),
            s.p(self.w_hidden),
            s.p(self.b_input),
            s.p(self.b_hidden),
        );
        let gi = s.matmul(x, wi)?;
        let gi = s.add_bias(gi, bi)?;
        let gh = s.matmul(h, wh)?;
        let gh = s.add_bias(gh, bh)?;

        let ir = s.slice_cols(gi, 0, hd)?;
        let hr = s.slice_cols(gh, 0, hd)?;
        let r = s.add(ir, hr)?;
        let r = s.sigmoid(r);

        let iz = s.slice_cols(gi, hd, hd)?;
        let hz = s.slice_cols(gh, hd, hd)?;
        let z = s.add(iz, hz)?;
        let z = s.sigmoid(z);

        let inn = s.slice_cols(gi, 2 * hd, hd)?;
        let hn = s.slice_cols(gh, 2 * hd, hd)?;
        let rh = s.mul(r, hn)?;
        let n = s.add(inn, rh)?;
        let n = s.tanh(n);

        // h' = n + z ⊙ (h − n)
        let hmn = s.sub(h, n)?;
        let zh = s.mul(z, hmn)?;
        s.add(n, zh)
    }
}

/// Batch normalization over rows with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: ps.add_full(&format!("{name}.gamma"), &[dim], 1.0, true)?,
            beta: ps.add_zeros(&format!("{name}.beta"), &[dim], true)?,
            running_mean: ps.add_zeros(&format!("{name}.running_mean"), &[dim], false)?,
            running_var: ps.add_full(&format!("{name}.running_var"), &[dim], 1.0, false)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let (g, b) = (s.p(self.gamma), s.p(self.beta));
        let eps = T::lit(self.eps);
        if s.is_train() {
            let n = s.value(x).rows();
            let (y, mean, var) = s.batch_norm_train(x, g, b, eps)?;
            let m = T::lit(self.momentum);
            let unbias = T::lit(n as f64 / (n as f64 - 1.0));
            let params = s.params();
            let rm = params.value(self.running_mean).values();
            let rv = params.value(self.running_var).values();
            let new_mean = rm
                .iter()
                .zip(&mean)
                .map(|(r, b)| (T::one() - m) * *r + m * *b)
                .collect();
            let new_var = rv
                .iter()
                .zip(&var)
                .map(|(r, b)| (T::one() - m) * *r + m * *b * unbias)
                .collect();
            s.stat_updates.push((self.running_mean, new_mean));
            s.stat_updates.push((self.running_var, new_var));
            Ok(y)
        } else {
            let params = s.params();
            let mean = params.value(self.running_mean).values().to_vec();
            let var = params.value(self.running_var).values().to_vec();
            s.batch_norm_eval(x, g, b, &mean, &var, eps)
        }
    }
}

/// Lookup table mapping ids to rows.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Scalar, R: Rng>(
        ps: &mut ParamSet<T>,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let limit = (3.0 / dim as f64).sqrt();
        Ok(Embedding {
            table: ps.add_uniform(&format!("{name}.table"), &[vocab, dim], limit, rng)?,
            vocab,
            dim,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab) {
            return Err(Error::invalid(format!(
                "unknown phone id {bad} (table has {})",
                self.vocab
            )));
        }
        let t = s.p(self.table);
        s.gather_rows(t, ids)
    }
}
