//! Central finite-difference oracle for verifying reverse-mode gradients.
//!
//! The check is independent of the autodiff path: it re-evaluates the
//! objective from scratch at perturbed inputs and compares the quotient
//! against the recorded gradient.

use ndarray::ArrayD;

use crate::params::ParamStore;
use crate::tensor::{Graph, Tensor};

/// Relative discrepancy between `a` and `b` with an absolute floor, so tiny
/// gradients are compared absolutely (|a - b| < 1e-7 passes at 1e-4).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Checks d(loss)/d(inputs) for a scalar objective built by `f` from leaf
/// tensors. Returns the maximum relative error over every input element.
pub fn check_inputs<F>(f: F, inputs: &[ArrayD<f64>], eps: f64) -> f64
where
    F: Fn(&mut Graph<f64>, &[Tensor]) -> Tensor,
{
    let eval = |arrays: &[ArrayD<f64>]| -> f64 {
        let mut g = Graph::<f64>::new();
        let leaves: Vec<Tensor> = arrays.iter().map(|a| g.leaf(a.clone(), false)).collect();
        let loss = f(&mut g, &leaves);
        g.scalar(loss)
    };

    let mut g = Graph::<f64>::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|a| g.leaf(a.clone(), true)).collect();
    let loss = f(&mut g, &leaves);
    let grads = g.backward(loss);

    let mut worst = 0.0_f64;
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let ad = grads
            .wrt(leaves[i])
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(input.raw_dim()));
        for idx in 0..input.len() {
            let orig = work[i].as_slice().unwrap()[idx];
            work[i].as_slice_mut().unwrap()[idx] = orig + eps;
            let up = eval(&work);
            work[i].as_slice_mut().unwrap()[idx] = orig - eps;
            let dn = eval(&work);
            work[i].as_slice_mut().unwrap()[idx] = orig;
            let fd = (up - dn) / (2.0 * eps);
            worst = worst.max(rel_err(fd, ad.as_slice().unwrap()[idx]));
        }
    }
    worst
}

/// Checks d(loss)/d(params) for an objective built from a parameter store.
/// Perturbs up to `samples` evenly spaced scalar coordinates across all
/// tensors (finite differences over every coordinate of a full model would be
/// needlessly slow).
pub fn check_params<F>(f: F, store: &ParamStore<f64>, samples: usize, eps: f64) -> f64
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Tensor,
{
    let mut g = Graph::<f64>::new();
    let loss = f(&mut g, store);
    let grads = g.backward(loss);
    let used = g.used_params();

    let total: usize = used.iter().map(|(p, _)| store.value(*p).len()).sum();
    let stride = (total / samples.max(1)).max(1);

    let eval = |st: &ParamStore<f64>| -> f64 {
        let mut g = Graph::<f64>::new();
        let loss = f(&mut g, st);
        g.scalar(loss)
    };

    let mut scratch = store.clone();
    let mut worst = 0.0_f64;
    let mut cursor = 0usize;
    for &(pid, node) in &used {
        let len = store.value(pid).len();
        let ad = grads
            .wrt(node)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(store.value(pid).raw_dim()));
        for idx in 0..len {
            let global = cursor + idx;
            if global % stride != 0 {
                continue;
            }
            let orig = scratch.value(pid).as_slice().unwrap()[idx];
            scratch.value_mut(pid).as_slice_mut().unwrap()[idx] = orig + eps;
            let up = eval(&scratch);
            scratch.value_mut(pid).as_slice_mut().unwrap()[idx] = orig - eps;
            let dn = eval(&scratch);
            scratch.value_mut(pid).as_slice_mut().unwrap()[idx] = orig;
            let fd = (up - dn) / (2.0 * eps);
            worst = worst.max(rel_err(fd, ad.as_slice().unwrap()[idx]));
        }
        cursor += len;
    }
    worst
}

