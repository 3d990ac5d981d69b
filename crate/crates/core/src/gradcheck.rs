//! Central finite-difference oracle for reverse-mode gradients.

use crate::graph::{Graph, Var};
use crate::tensor::{Result, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct Tolerance {
    pub step: f64,
    pub rel: f64,
    pub abs: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel: 1e-3,
            abs: 1e-6,
        }
    }
}

impl Tolerance {
    pub fn accepts(&self, analytic: f64, numeric: f64) -> bool {
        let diff = (analytic - numeric).abs();
        diff <= (self.rel * analytic.abs().max(numeric.abs())).max(self.abs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub checked: usize,
    pub mismatches: Vec<Mismatch>,
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, abs)`.
    pub worst_relative: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences for every element of every tensor in `inputs`.
///
/// `f` receives a fresh graph and one leaf per input, in order.
pub fn check<F>(inputs: &[Tensor], tol: Tolerance, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let tracked: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_grad()).collect();
    let mut g = Graph::new();
    let vars: Vec<Var> = tracked.iter().map(|t| g.leaf(t)).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = probe.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        g.value(loss).item()
    };

    let mut report = GradReport::default();
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for ti in 0..inputs.len() {
        for ei in 0..inputs[ti].len() {
            let orig = inputs[ti].data()[ei];
            probe[ti].data_mut()[ei] = orig + tol.step;
            let up = eval(&probe)?;
            probe[ti].data_mut()[ei] = orig - tol.step;
            let down = eval(&probe)?;
            probe[ti].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * tol.step);
            let a = analytic[ti][ei];
            let scale = a.abs().max(numeric.abs()).max(tol.abs);
            report.worst_relative = report.worst_relative.max((a - numeric).abs() / scale);
            report.checked += 1;
            if !tol.accepts(a, numeric) {
                report.mismatches.push(Mismatch {
                    tensor: ti,
                    index: ei,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
