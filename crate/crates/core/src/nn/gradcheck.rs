//! Central finite-difference gradient checks in double precision.

use super::layers::Session;
use super::params::ParamSet;
use super::tape::Var;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `(parameter name, relative error)` for every trainable parameter.
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

/// Compare analytic gradients of `loss_fn` against central differences.
///
/// The relative error of a parameter is `‖a − n‖ / max(‖a‖, ‖n‖, 1e-6)` over
/// the checked elements (the floor keeps exactly-zero gradients, such as a
/// bias feeding batch norm, from amplifying rounding noise). At most
/// `max_elems` evenly strided elements of each parameter are perturbed.
/// Sessions run in train mode.
pub fn check_gradients<F>(params: &ParamSet<f64>, eps: f64, max_elems: usize, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Session<f64>) -> Result<Var>,
{
    check_gradients_in_mode(params, true, eps, max_elems, loss_fn)
}

pub fn check_gradients_in_mode<F>(
    params: &ParamSet<f64>,
    train: bool,
    eps: f64,
    max_elems: usize,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Session<f64>) -> Result<Var>,
{
    let analytic = {
        let mut s = Session::new(params, train);
        let loss = loss_fn(&mut s)?;
        s.backward(loss)?
    };
    let eval = |ps: &ParamSet<f64>| -> Result<f64> {
        let mut s = Session::new(ps, train);
        let loss = loss_fn(&mut s)?;
        Ok(s.value(loss).values()[0])
    };

    let mut probe = params.clone();
    let mut per_param = Vec::new();
    for (id, p) in params.iter() {
        if !p.trainable {
            continue;
        }
        let n = p.tensor.numel();
        let step = n.div_ceil(max_elems.max(1)).max(1);
        let zeros = vec![0.0; n];
        let a = analytic.get(id).unwrap_or(&zeros);
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for k in (0..n).step_by(step) {
            let orig = p.tensor.values()[k];
            probe.get_mut(id).tensor.values_mut()[k] = orig + eps;
            let up = eval(&probe)?;
            probe.get_mut(id).tensor.values_mut()[k] = orig - eps;
            let down = eval(&probe)?;
            probe.get_mut(id).tensor.values_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            diff += (a[k] - numeric).powi(2);
            na += a[k].powi(2);
            nn += numeric.powi(2);
        }
        let denom = na.sqrt().max(nn.sqrt()).max(1e-6);
        let rel = diff.sqrt() / denom;
        per_param.push((p.name.clone(), rel));
    }
    Ok(GradCheckReport { per_param })
}
