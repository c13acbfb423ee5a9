//! Central finite-difference gradient oracle.
//!
//! This module is deliberately independent of [`crate::graph`]'s backward
//! pass: it only calls forward evaluations, so it can falsify a broken
//! adjoint. Tests across the crate lean on [`check_all_grads`].

use ndarray::ArrayD;

use crate::graph::{Graph, Var};
use crate::scalar::{fl, Scalar};

/// Central-difference gradient of `f` with respect to `inputs[which]`.
pub fn finite_diff_grad<T: Scalar>(
    f: &mut dyn FnMut(&[ArrayD<T>]) -> T,
    inputs: &[ArrayD<T>],
    which: usize,
    eps: T,
) -> ArrayD<T> {
    let mut work: Vec<ArrayD<T>> = inputs.to_vec();
    let mut grad = ArrayD::<T>::zeros(inputs[which].raw_dim());
    let n = inputs[which].len();
    let two = fl::<T>(2.0);
    for i in 0..n {
        let orig = work[which].as_slice().unwrap()[i];
        work[which].as_slice_mut().unwrap()[i] = orig + eps;
        let fp = f(&work);
        work[which].as_slice_mut().unwrap()[i] = orig - eps;
        let fm = f(&work);
        work[which].as_slice_mut().unwrap()[i] = orig;
        grad.as_slice_mut().unwrap()[i] = (fp - fm) / (two * eps);
    }
    grad
}

/// Largest elementwise relative error between two gradients, with an
/// absolute floor so that near-zero entries do not dominate.
pub fn max_rel_err<T: Scalar>(a: &ArrayD<T>, b: &ArrayD<T>, floor: T) -> T {
    assert_eq!(a.shape(), b.shape());
    let mut worst = T::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        let denom = floor.max(x.abs()).max(y.abs());
        let rel = (x - y).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

/// Build the scalar loss described by `build` with every input as a tracked
/// leaf, then compare analytic gradients against central differences.
/// Returns the largest relative error seen; panics if it exceeds `tol`.
pub fn check_all_grads<T: Scalar>(
    inputs: &[ArrayD<T>],
    build: impl Fn(&mut Graph<T>, &[Var]) -> Var,
    eps: T,
    tol: T,
) -> T {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let root = build(&mut g, &vars);
    let grads = g.backward(root);

    let mut eval = |xs: &[ArrayD<T>]| -> T {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let root = build(&mut g, &vars);
        g.scalar_value(root)
    };

    let mut worst = T::zero();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*var)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(inputs[i].raw_dim()));
        let numeric = finite_diff_grad(&mut eval, inputs, i, eps);
        let err = max_rel_err(&analytic, &numeric, fl::<T>(1e-3));
        if err > worst {
            worst = err;
        }
        assert!(
            err <= tol,
            "gradient check failed for input {i}: rel err {} > tol {}",
            err.as_f64(),
            tol.as_f64()
        );
    }
    worst
}
