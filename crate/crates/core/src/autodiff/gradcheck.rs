//! Central-difference verification of analytic gradients.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{contract, Result};

/// Max over coordinates of `|analytic − numeric| / max(1, |numeric|)` for a scalar `f(x)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_diff_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(x), eps)
}

/// Same as [`finite_diff_check`] for a function of several tensors; every input is checked.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar(&g, out)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar(&g, out)?;
    let grads = g.backward(out)?;
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(v);
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}

/// Checks gradients with respect to named parameters of `store`.
///
/// `f` must bind parameters through [`Graph::param`]. At most `max_coords` coordinates per
/// tensor are probed (evenly strided) to keep large layers affordable.
pub fn finite_diff_check_params<F>(
    f: F,
    store: &ParamStore,
    names: &[&str],
    eps: f64,
    max_coords: usize,
) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    scalar(&g, out)?;
    let grads = g.backward(out)?;
    let analytic = g.param_grads(&grads);
    let mut work = store.clone();
    let mut worst: f64 = 0.0;
    for &name in names {
        let a = analytic
            .get(name)
            .ok_or_else(|| contract(format!("parameter `{name}` not used by f")))?
            .clone();
        let n = a.len();
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let orig = store.get(name)?.data()[i];
            work.get_mut(name)?.data_mut()[i] = orig + eps;
            let fp = {
                let mut g = Graph::new();
                let o = f(&mut g, &work)?;
                scalar(&g, o)?
            };
            work.get_mut(name)?.data_mut()[i] = orig - eps;
            let fm = {
                let mut g = Graph::new();
                let o = f(&mut g, &work)?;
                scalar(&g, o)?
            };
            work.get_mut(name)?.data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            worst = worst.max(rel_err(a.data()[i], numeric));
        }
    }
    Ok(worst)
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn scalar(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(contract(format!("gradient check needs a scalar output, got {:?}", t.shape())));
    }
    Ok(t.item())
}
