//! Central finite-difference verification of tape gradients.
//!
//! Functions checked here must be deterministic: the harness rebuilds the
//! forward pass many times and compares against the analytic gradient from
//! one backward pass. Behaviour on non-deterministic functions is undefined.
//! Run in `f64`; the relative error reported is
//! `max_i |analytic_i - central_diff_i| / max(1, |analytic_i|)`.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative-error against central differences for a scalar function of one
/// tensor, over every coordinate.
pub fn gradient_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = (0..x.numel()).map(|c| (0, c)).collect();
    gradient_check_multi(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), &coords, h)
}

/// Multi-input variant checking only the listed `(input, coordinate)` pairs.
/// Every input is bound as a grad-requiring leaf, in order.
pub fn gradient_check_multi<F>(
    f: F,
    inputs: &[Tensor<f64>],
    coords: &[(usize, usize)],
    h: f64,
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> =
            tensors.iter().map(|t| tape.leaf(&t.clone().requires_grad(true))).collect();
        let y = f(&mut tape, &vars)?;
        if tape.numel(y) != 1 {
            return Err(Error::contract(format!(
                "gradient_check requires a scalar function, got shape {:?}",
                tape.shape(y)
            )));
        }
        Ok((tape, vars, y))
    };

    let (mut tape, vars, y) = eval(inputs)?;
    tape.backward(y)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .enumerate()
        .map(|(i, &v)| tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].numel()]))
        .collect();

    let mut worst = 0.0f64;
    for &(ti, ci) in coords {
        if ti >= inputs.len() || ci >= inputs[ti].numel() {
            return Err(Error::contract(format!(
                "gradient_check coordinate ({ti},{ci}) out of range"
            )));
        }
        let mut plus = inputs.to_vec();
        let mut minus = inputs.to_vec();
        let bump = |tensors: &mut [Tensor<f64>], delta: f64| {
            let mut data = tensors[ti].data().to_vec();
            data[ci] += delta;
            tensors[ti] = Tensor::new(tensors[ti].shape().to_vec(), data).expect("same shape");
        };
        bump(&mut plus, h);
        bump(&mut minus, -h);
        let (tp, _, yp) = eval(&plus)?;
        let (tm, _, ym) = eval(&minus)?;
        let fd = (tp.value(yp)[0] - tm.value(ym)[0]) / (2.0 * h);
        let a = analytic[ti][ci];
        let rel = (a - fd).abs() / 1.0f64.max(a.abs());
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
