use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares the tape gradient of a scalar function against central
/// differences at every coordinate of `point`.
///
/// `build` receives a fresh tape (seeded with `seed`, so dropout masks repeat
/// across evaluations) and the leaf holding the point, and returns the scalar
/// root. Relative error is `|a - n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<F>(point: &Tensor, h: f64, seed: u64, mut build: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new(seed);
    let x = tape.param(point.clone());
    let root = build(&mut tape, x)?;
    tape.backward(root)?;
    let analytic = tape.grad(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; point.len()]);

    let mut eval = |p: Tensor| -> Result<f64> {
        let mut t = Tape::new(seed);
        let v = t.param(p);
        let r = build(&mut t, v)?;
        let out = t.value(r);
        if !out.is_scalar() {
            return Err(Error::NonScalarRoot(out.shape().to_vec()));
        }
        Ok(out.item())
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, worst_coordinate: 0, analytic: 0.0, numeric: 0.0 };
    for k in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[k] += h;
        let mut minus = point.clone();
        minus.data_mut()[k] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic[k];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        if rel > report.max_rel_error || k == 0 {
            report = GradCheckReport { max_rel_error: rel, worst_coordinate: k, analytic: a, numeric };
        }
    }
    Ok(report)
}
