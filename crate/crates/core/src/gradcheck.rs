//! Central finite-difference checks of graph gradients.

use rand::Rng;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::graph::{Graph, Var};
use crate::seed;
use crate::tensor::Tensor;

/// Absolute floor in the relative-error denominator, so gradients that are
/// zero up to rounding do not blow the ratio up.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub probes: Vec<Probe>,
}

impl GradCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn merge(&mut self, other: GradCheck) {
        self.probes.extend(other.probes);
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares the graph gradient of the scalar `f(inputs)` with central
/// differences at `n_probes` random coordinates.
pub fn check<F>(f: F, inputs: &[Tensor], n_probes: usize, eps: f64, probe_seed: u64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if inputs.is_empty() || inputs.iter().any(|t| t.numel() == 0) {
        return Err(Error::InvalidInput("gradient check needs non-empty inputs".into()));
    }
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new(Exec::Sequential);
        // params rather than constants: objectives may differentiate internally
        let vars: Vec<Var> = ts.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar(out))
    };

    let mut g = Graph::new(Exec::Sequential);
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.grad(out, &vars)?;
    let grads: Vec<Tensor> = grads.iter().map(|&v| g.value(v).clone()).collect();

    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let mut rng = seed::rng(probe_seed, "gradcheck", 0);
    let mut probes = Vec::with_capacity(n_probes);
    for _ in 0..n_probes {
        let mut flat = rng.random_range(0..total);
        let mut input = 0;
        while flat >= inputs[input].numel() {
            flat -= inputs[input].numel();
            input += 1;
        }
        let mut plus = inputs.to_vec();
        plus[input].data_mut()[flat] += eps;
        let mut minus = inputs.to_vec();
        minus[input].data_mut()[flat] -= eps;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
        let analytic = grads[input].data()[flat];
        probes.push(Probe {
            input,
            index: flat,
            analytic,
            numeric,
            rel_err: rel_err(analytic, numeric),
        });
    }
    Ok(GradCheck { probes })
}
