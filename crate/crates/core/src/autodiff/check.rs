use rayon::prelude::*;

use crate::error::Result;
use crate::tensor::Tensor;

use super::tape::{Tape, Var};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDiffReport {
    pub max_rel_error: f64,
    /// `(param, element, analytic, numeric)` of the worst component.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub components: usize,
}

/// Relative error with the `max(|a|, |b|, 1e-8)` denominator.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn eval<F>(f: &F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).data()[0])
}

/// Compares reverse-mode gradients of the scalar graph built by `f` with the
/// fourth-order central difference
/// `(8(f(θ+h) − f(θ−h)) − (f(θ+2h) − f(θ−2h))) / 12h` with `h = eps`,
/// component by component.
pub fn finite_diff_check<F>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<FiniteDiffReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Sync,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.numel()).map(move |j| (i, j)))
        .collect();

    let numeric: Vec<f64> = coords
        .par_iter()
        .map(|&(i, j)| {
            let mut shifted = params.to_vec();
            let orig = shifted[i].data()[j];
            let mut at = |k: f64| {
                shifted[i].data_mut()[j] = orig + k * eps;
                eval(&f, &shifted)
            };
            let (p1, m1, p2, m2) = (at(1.0)?, at(-1.0)?, at(2.0)?, at(-2.0)?);
            Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps))
        })
        .collect::<Result<_>>()?;

    let mut report = FiniteDiffReport {
        max_rel_error: 0.0,
        worst: None,
        components: coords.len(),
    };
    for (&(i, j), &num) in coords.iter().zip(&numeric) {
        let a = analytic[i].data()[j];
        let err = relative_error(a, num);
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((i, j, a, num));
        }
    }
    Ok(report)
}
