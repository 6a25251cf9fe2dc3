//! Central finite-difference gradient checks in double precision.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Worst disagreement between analytic and numerical gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// `|a - n| / max(|a|, |n|, floor)` at the worst entry.
    pub max_rel_error: f64,
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Number of entries compared.
    pub entries: usize,
}

/// Compares the backward pass of `f` against central differences with step
/// `h` on every entry of every input. `f` receives one leaf per input and
/// must return a scalar.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, floor: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar(&g, out)?;
    g.backward(out)?;

    let mut worst = GradCheck {
        max_rel_error: 0.0,
        input: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        entries: 0,
    };
    let mut probe = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match g.grad(v) {
            Some(d) => d.to_vec(),
            None => alloc::vec![0.0; inputs[k].len()],
        };
        for (j, &a) in analytic.iter().enumerate() {
            let x = inputs[k].data()[j];
            probe[k].data_mut()[j] = x + h;
            let up = eval(&probe)?;
            probe[k].data_mut()[j] = x - h;
            let down = eval(&probe)?;
            probe[k].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst.entries += 1;
            if rel > worst.max_rel_error || !rel.is_finite() {
                worst = GradCheck {
                    max_rel_error: rel,
                    input: k,
                    index: j,
                    analytic: a,
                    numeric,
                    entries: worst.entries,
                };
            }
        }
    }
    Ok(worst)
}

fn scalar(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::contract(alloc::format!(
            "gradient check needs a scalar output, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}
