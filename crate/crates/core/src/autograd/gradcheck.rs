use std::fmt;

use serde::Serialize;

use super::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Result of comparing tape gradients against five-point central differences.
#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
    /// Smallest ReLU pre-activation magnitude seen at the base point.
    pub relu_margin: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "{:<12} max rel err {:.3e}  {}",
                p.name,
                p.max_rel_error,
                if p.passed { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// `|a - f| / max(|a|, |f|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks every coordinate of every input of `f` against the fourth-order
/// central difference `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h` with
/// `h = step`. `f` must rebuild its graph from the leaves it is handed and
/// return a scalar.
pub fn grad_check<F>(f: F, inputs: &[(&str, Tensor)], step: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let relu_margin = tape.relu_margin();

    let mut values: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut params = Vec::with_capacity(inputs.len());
    for (k, (name, t)) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape()));
        let mut worst: f64 = 0.0;
        for i in 0..t.numel() {
            let orig = values[k].data()[i];
            let mut at = |d: f64| -> Result<f64> {
                values[k].data_mut()[i] = orig + d;
                eval(&values)
            };
            let near = at(step)? - at(-step)?;
            let far = at(2.0 * step)? - at(-2.0 * step)?;
            values[k].data_mut()[i] = orig;
            let numeric = (8.0 * near - far) / (12.0 * step);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
        params.push(ParamCheck {
            name: name.to_string(),
            max_rel_error: worst,
            passed: worst < tol,
        });
    }
    Ok(GradReport {
        params,
        tol,
        relu_margin,
    })
}
