use crate::error::{Error, Result};
use crate::nn::{Scalar, Session, Var};

/// `L1(y′, target) + L1(ŷ, target)`, each the mean absolute error over rows
/// with `row_mask = 1`.
pub fn spectrogram_loss<T: Scalar>(
    s: &mut Session<T>,
    coarse: Var,
    refined: Var,
    target: &[T],
    row_mask: &[T],
) -> Result<Var> {
    if s.value(coarse).shape() != s.value(refined).shape() {
        return Err(Error::shape(format!(
            "coarse {:?} and refined {:?} differ",
            s.value(coarse).shape(),
            s.value(refined).shape()
        )));
    }
    let a = s.masked_l1(coarse, target, row_mask)?;
    let b = s.masked_l1(refined, target, row_mask)?;
    s.add(a, b)
}
