//! Central finite-difference check of reverse-mode gradients.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compares the tape gradient of the scalar function `f` at `x` against
/// central differences with step `h`, returning the largest componentwise
/// relative error `|a - n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |p: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(p.clone(), false);
        let o = f(&mut t, v)?;
        Ok(t.value(o).item())
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
