use rand::seq::SliceRandom;

use crate::dsp::FrameMatrix;
use crate::error::{Error, Result};
use crate::rng::substream;

/// Shuffle `0..n` with a stream derived from `seed` and `epoch`, then cut
/// into consecutive groups of `batch_size` (the last may be short).
pub fn make_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::invalid("cannot batch an empty record set"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, &format!("batches/{epoch}")));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Zero-padded stack of variable-length frame matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Padded {
    pub max_len: usize,
    pub dim: usize,
    pub lengths: Vec<usize>,
    /// `batch × max_len × dim`, item-major.
    pub data: Vec<f32>,
    /// `batch × max_len`, 1 for real frames.
    pub mask: Vec<f32>,
}

pub fn pad_frames(items: &[&FrameMatrix]) -> Result<Padded> {
    let first = items
        .first()
        .ok_or_else(|| Error::invalid("cannot pad an empty batch"))?;
    let dim = first.cols();
    if let Some(bad) = items.iter().find(|m| m.cols() != dim) {
        return Err(Error::shape(format!("batch mixes widths {dim} and {}", bad.cols())));
    }
    let max_len = items.iter().map(|m| m.rows()).max().unwrap_or(0);
    let mut data = vec![0.0; items.len() * max_len * dim];
    let mut mask = vec![0.0; items.len() * max_len];
    for (b, m) in items.iter().enumerate() {
        let base = b * max_len * dim;
        data[base..base + m.rows() * dim].copy_from_slice(m.data());
        mask[b * max_len..b * max_len + m.rows()]
            .iter_mut()
            .for_each(|v| *v = 1.0);
    }
    Ok(Padded {
        max_len,
        dim,
        lengths: items.iter().map(|m| m.rows()).collect(),
        data,
        mask,
    })
}
