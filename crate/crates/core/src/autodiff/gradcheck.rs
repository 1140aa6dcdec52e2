//! Finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::params::{backward, ParamSet, VarMap};

use super::tape::{Tape, Var};

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

fn eval_loss<F>(loss_fn: &F, params: &ParamSet) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &VarMap<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars = params.to_constants(&tape);
    Ok(loss_fn(&tape, &vars)?.value().item())
}

/// Worst relative error between `backward` and central differences
/// `(f(θ+εe_i) − f(θ−εe_i)) / 2ε` over every coordinate of `params`.
pub fn grad_check<F>(loss_fn: F, params: &ParamSet, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &VarMap<'t>) -> Result<Var<'t>>,
{
    let all: Vec<usize> = (0..params.numel()).collect();
    check_coords(&loss_fn, params, eps, &all)
}

/// Like [`grad_check`] but only over `count` coordinates drawn from `rng`.
pub fn grad_check_sampled<F>(
    loss_fn: F,
    params: &ParamSet,
    eps: f64,
    count: usize,
    rng: &mut impl Rng,
) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &VarMap<'t>) -> Result<Var<'t>>,
{
    let n = params.numel();
    let mut coords = sample(rng, n, count.min(n)).into_vec();
    coords.sort_unstable();
    check_coords(&loss_fn, params, eps, &coords)
}

fn check_coords<F>(loss_fn: &F, params: &ParamSet, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &VarMap<'t>) -> Result<Var<'t>>,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let analytic: Vec<f64> = {
        let tape = Tape::new();
        let vars = params.to_vars(&tape);
        let loss = loss_fn(&tape, &vars)?;
        backward(&tape, loss, &vars)?
            .values()
            .flat_map(|t| t.data().to_vec())
            .collect()
    };
    let base = params.flatten();
    let mut worst = 0.0f64;
    let mut probe = base.clone();
    for &i in coords {
        probe[i] = base[i] + eps;
        let plus = eval_loss(loss_fn, &params.unflatten(&probe)?)?;
        probe[i] = base[i] - eps;
        let minus = eval_loss(loss_fn, &params.unflatten(&probe)?)?;
        probe[i] = base[i];
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn params(v: Vec<f64>) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::vector(v)).unwrap();
        p
    }

    #[test]
    fn quadratic_is_exact() {
        let p = params(vec![1.0, -2.0, 0.5, 3.0]);
        let err = grad_check(
            |_t, v| {
                let x = v.get("x")?;
                x.mul(x)?.scale(0.5)?.sum()
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn constant_loss_zero_error() {
        let p = params(vec![1.0, 2.0]);
        let err = grad_check(
            |t, _v| Ok(t.constant(Tensor::scalar(4.0))),
            &p,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }
}
