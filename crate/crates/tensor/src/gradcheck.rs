use crate::{Result, Tape, Tensor, Var};

/// Compares the tape gradient of a scalar function with central differences.
///
/// `f` receives a fresh tape and the leaf holding `x`. Returns
/// `max_i |analytic_i - numeric_i| / max(1e-8, |numeric_i|)`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.variable(x);
    let loss = f(&mut tape, xv)?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .get(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut t = Tape::inference();
        let v = t.variable(probe);
        let out = f(&mut t, v)?;
        Ok(t.item(out))
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
