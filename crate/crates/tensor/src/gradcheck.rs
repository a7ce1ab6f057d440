//! Central finite-difference check of tape gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Per-input comparison of analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Tensor<f64>,
    pub numeric: Tensor<f64>,
}

impl GradCheck {
    /// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`, zero when both gradients vanish.
    pub fn relative_error(&self) -> f64 {
        let diff: f64 = self
            .analytic
            .data()
            .iter()
            .zip(self.numeric.data())
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let scale = self.analytic.norm().max(self.numeric.norm());
        if scale < 1e-12 {
            0.0
        } else {
            diff / scale
        }
    }
}

/// Differentiate the scalar produced by `build` with respect to every tensor in
/// `inputs`, both through the tape and by central differences with `step`.
///
/// `build` receives the graph and one parameter leaf per input (keys `0..n`).
pub fn check_gradients<F>(inputs: &[Tensor<f64>], step: f64, build: F) -> Result<Vec<GradCheck>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values
            .iter()
            .enumerate()
            .map(|(i, t)| g.param(i, t.clone()))
            .collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| g.param(i, t.clone()))
        .collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut reports = Vec::with_capacity(inputs.len());
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
        let mut numeric = Tensor::zeros(inputs[i].shape().to_vec());
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric.data_mut()[j] = (plus - minus) / (2.0 * step);
        }
        reports.push(GradCheck { analytic, numeric });
    }
    Ok(reports)
}
