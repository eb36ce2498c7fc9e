//! Central finite-difference oracle used by gradient tests. Only the forward
//! path of the tape is exercised when forming numeric derivatives, so the
//! check stays independent of the backward implementation.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compare analytic gradients of a scalar-valued builder against central
/// finite differences over every input element. Returns the max relative
/// error observed.
pub fn max_grad_error<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let run = |tensors: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| tape.leaf(t.clone().with_grad()))
            .collect();
        let loss = build(&mut tape, &vars)?;
        Ok((tape, vars, loss))
    };

    let (mut tape, vars, loss) = run(inputs)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();

    let mut worst = 0.0f64;
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[ei] += h;
            let (tp, _, lp) = run(&plus)?;
            let fp = tp.value(lp).item();

            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[ei] -= h;
            let (tm, _, lm) = run(&minus)?;
            let fm = tm.value(lm).item();

            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti].data()[ei];
            let scale = a.abs().max(numeric.abs());
            let err = if scale < 1e-6 {
                (a - numeric).abs()
            } else {
                (a - numeric).abs() / scale
            };
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
