//! Finite-difference verification of tape gradients.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Outcome of [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradReport<T = f64> {
    /// Largest elementwise relative error over all inputs.
    pub max_rel_err: T,
    /// `(input, element)` where it occurred.
    pub worst: (usize, usize),
    pub analytic: Vec<Tensor<T>>,
    pub numeric: Vec<Tensor<T>>,
}

/// Compares the tape gradient of a scalar function with central differences.
///
/// `f` builds the function on a fresh graph from parameter leaves holding the
/// inputs. The relative error of each element is
/// `|a - n| / max(|a|, |n|, floor)`; `floor` keeps exact zeros from producing
/// spurious failures.
pub fn grad_check<T, F>(f: F, inputs: &[Tensor<T>], eps: T, floor: T) -> Result<GradReport<T>>
where
    T: Real,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<T>]| -> Result<T> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| g.grad(v).unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    let mut max_rel_err = T::zero();
    let mut worst = (0, 0);
    let two = T::lit(2.0);
    for i in 0..inputs.len() {
        let mut num = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + eps;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = x0 - eps;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let n = (fp - fm) / (two * eps);
            num.data_mut()[j] = n;
            let a = analytic[i].data()[j];
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            if rel > max_rel_err || rel.is_nan() {
                max_rel_err = if rel.is_nan() { T::infinity() } else { rel };
                worst = (i, j);
            }
        }
        numeric.push(num);
    }
    Ok(GradReport { max_rel_err, worst, analytic, numeric })
}

fn scalar_of<T: Real>(g: &Graph<T>, v: Var) -> Result<T> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(TensorError::Contract(format!("function must be scalar, got shape {:?}", t.shape())));
    }
    Ok(t.data()[0])
}
