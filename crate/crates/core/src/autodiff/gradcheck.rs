//! Central-difference gradient verification at 64-bit.

use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::{self, RngExt};
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over sampled coordinates of |analytic - central| / max(1, |central|)
    pub max_rel_err: f64,
    pub worst_param: usize,
    pub worst_coord: usize,
    pub coords_checked: usize,
}

/// Verify analytic gradients of a scalar function against central finite
/// differences. `build` must deterministically construct the loss from the
/// given parameter leaves; it is evaluated twice up front and rejected if the
/// two values differ bitwise. At most `samples` coordinates are checked per
/// parameter (all of them when the tensor is small enough).
pub fn grad_check<F>(
    build: F,
    params: &[Tensor<f64>],
    h: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::invalid(alloc::format!("grad_check: h = {h} outside [1e-6, 1e-4]")));
    }

    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|t| g.param(t.clone())).collect::<Result<_>>()?;
        let loss = build(&g, &vars)?;
        g.item(loss)
    };

    let l0 = eval(params)?;
    let l1 = eval(params)?;
    if l0.to_bits() != l1.to_bits() {
        return Err(Error::NonDeterministic { op: "grad_check" });
    }

    let g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect::<Result<_>>()?;
    let loss = build(&g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| g.grad_or_zero(*v)).collect();

    let mut rng = rng::stream(seed, "gradcheck");
    let mut report =
        GradCheckReport { max_rel_err: 0.0, worst_param: 0, worst_coord: 0, coords_checked: 0 };
    let mut work: Vec<Tensor<f64>> = params.to_vec();

    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        let coords: Vec<usize> =
            if n <= samples { (0..n).collect() } else { rng.sample_indices(n, samples) };
        for &ci in &coords {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + h;
            let lp = eval(&work)?;
            work[pi].data_mut()[ci] = orig - h;
            let lm = eval(&work)?;
            work[pi].data_mut()[ci] = orig;

            let central = (lp - lm) / (2.0 * h);
            let a = analytic[pi].data()[ci];
            let rel = (a - central).abs() / central.abs().max(1.0);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = pi;
                report.worst_coord = ci;
            }
        }
    }
    Ok(report)
}

/// Convenience: pretty one-line summary for test output.
pub fn describe(report: &GradCheckReport) -> String {
    alloc::format!(
        "max rel err {:.3e} (param {} coord {}, {} coords checked)",
        report.max_rel_err,
        report.worst_param,
        report.worst_coord,
        report.coords_checked
    )
}
