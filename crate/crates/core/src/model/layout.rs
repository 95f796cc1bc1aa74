use crate::error::{Error, Result};
use crate::nn::ZERO_ROW;

/// Row layout of a batch of variable-length sequences packed end to end.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    lengths: Vec<usize>,
    offsets: Vec<usize>,
}

impl SeqLayout {
    pub fn new(lengths: Vec<usize>) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        if lengths.contains(&0) {
            return Err(Error::invalid("batch contains an empty sequence"));
        }
        let mut offsets = Vec::with_capacity(lengths.len());
        let mut acc = 0;
        for l in &lengths {
            offsets.push(acc);
            acc += l;
        }
        Ok(SeqLayout { lengths, offsets })
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn offset(&self, item: usize) -> usize {
        self.offsets[item]
    }

    pub fn total(&self) -> usize {
        self.lengths.iter().sum()
    }

    pub fn max_len(&self) -> usize {
        self.lengths.iter().copied().max().unwrap_or(0)
    }

    /// Packed row of position `t` in each item, or [`ZERO_ROW`] past its end.
    pub fn time_index(&self, t: usize) -> Vec<usize> {
        self.lengths
            .iter()
            .zip(&self.offsets)
            .map(|(&l, &o)| if t < l { o + t } else { ZERO_ROW })
            .collect()
    }

    /// Gather index that separates items by `gap` zero rows (also before
    /// the first and after the last item), so a convolution with padding up
    /// to `gap` never mixes neighbouring items.
    pub fn gapped_index(&self, gap: usize) -> Vec<usize> {
        let mut idx = Vec::with_capacity(self.total() + gap * (self.batch() + 1));
        idx.extend(std::iter::repeat_n(ZERO_ROW, gap));
        for (&l, &o) in self.lengths.iter().zip(&self.offsets) {
            idx.extend(o..o + l);
            idx.extend(std::iter::repeat_n(ZERO_ROW, gap));
        }
        idx
    }

    /// Inverse of [`gapped_index`](Self::gapped_index): the packed rows.
    pub fn ungapped_index(&self, gap: usize) -> Vec<usize> {
        let mut idx = Vec::with_capacity(self.total());
        for (i, (&l, &o)) in self.lengths.iter().zip(&self.offsets).enumerate() {
            let start = o + gap * (i + 1);
            idx.extend(start..start + l);
        }
        idx
    }

    /// Item index of every packed row.
    pub fn row_items(&self) -> Vec<usize> {
        self.lengths
            .iter()
            .enumerate()
            .flat_map(|(i, &l)| std::iter::repeat_n(i, l))
            .collect()
    }
}

/// Source row of every expanded frame: row `i` repeated `d[i]` times.
pub fn expansion_index(durations: &[usize]) -> Result<Vec<usize>> {
    let total: usize = durations.iter().sum();
    if total == 0 {
        return Err(Error::invalid("durations sum to zero"));
    }
    let mut idx = Vec::with_capacity(total);
    for (i, &d) in durations.iter().enumerate() {
        idx.extend(std::iter::repeat_n(i, d));
    }
    Ok(idx)
}
