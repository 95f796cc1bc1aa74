use rand::Rng;

use super::layout::SeqLayout;
use crate::error::Result;
use crate::nn::{BatchNorm, Conv1d, GruCell, Highway, Padding, ParamSet, Scalar, Session, Var, ZERO_ROW};

/// Convolution bank, highway stack and bidirectional GRU over packed
/// sequences (no max-pooling).
///
/// ```text
/// b = relu(bn(concat_k conv_k(x)))          k = 1..=bank
/// p = bn(conv_3(b)) + x
/// y = bigru(highway^L(p))                    width = out_dim
/// ```
#[derive(Clone, Debug)]
pub struct Cbhg {
    pub bank: Vec<Conv1d>,
    pub bank_bn: BatchNorm,
    pub proj: Conv1d,
    pub proj_bn: BatchNorm,
    pub highways: Vec<Highway>,
    pub forward_gru: GruCell,
    pub backward_gru: GruCell,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Cbhg {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        ps: &mut ParamSet<T>,
        name: &str,
        in_dim: usize,
        bank_width: usize,
        channels: usize,
        highway_layers: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bank = (1..=bank_width)
            .map(|k| {
                let pad = Padding::Explicit((k - 1) / 2, k / 2);
                Conv1d::new(ps, &format!("{name}.bank{k}"), in_dim, channels, k, 1, 1, pad, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let bank_bn = BatchNorm::new(ps, &format!("{name}.bank_bn"), bank_width * channels)?;
        let proj = Conv1d::new(
            ps,
            &format!("{name}.proj"),
            bank_width * channels,
            in_dim,
            3,
            1,
            1,
            Padding::Same,
            rng,
        )?;
        let proj_bn = BatchNorm::new(ps, &format!("{name}.proj_bn"), in_dim)?;
        let highways = (0..highway_layers)
            .map(|i| Highway::new(ps, &format!("{name}.highway{i}"), in_dim, rng))
            .collect::<Result<Vec<_>>>()?;
        let half = out_dim / 2;
        Ok(Cbhg {
            bank,
            bank_bn,
            proj,
            proj_bn,
            highways,
            forward_gru: GruCell::new(ps, &format!("{name}.gru_fw"), in_dim, half, rng)?,
            backward_gru: GruCell::new(ps, &format!("{name}.gru_bw"), in_dim, half, rng)?,
            in_dim,
            out_dim,
        })
    }

    fn gap(&self) -> usize {
        (self.bank.len() / 2).max(1)
    }

    /// `x` holds the rows of every item packed end to end.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var, layout: &SeqLayout) -> Result<Var> {
        let gap = self.gap();
        let gapped = layout.gapped_index(gap);
        let packed = layout.ungapped_index(gap);

        let xg = s.gather_rows(x, &gapped)?;
        let mut outs = Vec::with_capacity(self.bank.len());
        for conv in &self.bank {
            outs.push(conv.forward(s, xg)?);
        }
        let b = s.concat_cols(&outs)?;
        let b = s.gather_rows(b, &packed)?;
        let b = self.bank_bn.forward(s, b)?;
        let b = s.relu(b);

        let bg = s.gather_rows(b, &gapped)?;
        let p = self.proj.forward(s, bg)?;
        let p = s.gather_rows(p, &packed)?;
        let p = self.proj_bn.forward(s, p)?;
        let mut h = s.add(p, x)?;
        for hw in &self.highways {
            h = hw.forward(s, h)?;
        }
        bidirectional(s, &self.forward_gru, &self.backward_gru, h, layout)
    }
}

/// Run two GRUs over each packed item in opposite directions and
/// concatenate their states per row.
pub fn bidirectional<T: Scalar>(
    s: &mut Session<T>,
    fw: &GruCell,
    bw: &GruCell,
    x: Var,
    layout: &SeqLayout,
) -> Result<Var> {
    let (b, max) = (layout.batch(), layout.max_len());
    let steps: Vec<Vec<usize>> = (0..max).map(|t| layout.time_index(t)).collect();

    // Forward states past an item's end are never read, so no masking.
    let mut h = s.input(b, fw.hidden_dim, vec![T::zero(); b * fw.hidden_dim])?;
    let mut fw_states = Vec::with_capacity(max);
    for idx in &steps {
        let xt = s.gather_rows(x, idx)?;
        h = fw.forward(s, xt, h)?;
        fw_states.push(h);
    }

    // Backward states must stay zero until each item's last row.
    let mut h = s.input(b, bw.hidden_dim, vec![T::zero(); b * bw.hidden_dim])?;
    let mut bw_states = vec![h; max];
    for t in (0..max).rev() {
        let idx = &steps[t];
        let xt = s.gather_rows(x, idx)?;
        let next = bw.forward(s, xt, h)?;
        h = if idx.contains(&ZERO_ROW) {
            let mask = idx
                .iter()
                .map(|&i| if i == ZERO_ROW { T::zero() } else { T::one() })
                .collect();
            let m = s.input(b, 1, mask)?;
            let delta = s.sub(next, h)?;
            let delta = s.mul_col(delta, m)?;
            s.add(h, delta)?
        } else {
            next
        };
        bw_states[t] = h;
    }

    let f = s.concat_rows(&fw_states)?;
    let r = s.concat_rows(&bw_states)?;
    let rows: Vec<usize> = layout
        .lengths()
        .iter()
        .enumerate()
        .flat_map(|(i, &l)| (0..l).map(move |t| t * b + i))
        .collect();
    let f = s.gather_rows(f, &rows)?;
    let r = s.gather_rows(r, &rows)?;
    s.concat_cols(&[f, r])
}
