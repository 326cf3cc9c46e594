use crate::numerics::{Matrix, Parameterized};
use crate::scalar::Scalar;

/// Central-difference gradient of `loss` with respect to every parameter
/// block of `model`, one coordinate at a time.
///
/// `loss` must be deterministic: any sampling noise has to be frozen by the
/// caller. Parameters are restored exactly after each probe.
pub fn finite_diff_grad<T, M, F>(model: &mut M, h: f64, mut loss: F) -> Vec<Matrix<f64>>
where
    T: Scalar,
    M: Parameterized<T>,
    F: FnMut(&M) -> f64,
{
    let shapes: Vec<(usize, usize)> = model.blocks().iter().map(|b| b.value.shape()).collect();
    let mut out = Vec::with_capacity(shapes.len());
    for (bi, &(rows, cols)) in shapes.iter().enumerate() {
        let mut grad = Matrix::<f64>::zeros(rows, cols);
        for j in 0..rows * cols {
            let original = model.blocks()[bi].value.as_slice()[j];
            model.blocks_mut()[bi].value.as_mut_slice()[j] = original + T::lit(h);
            let plus = loss(model);
            model.blocks_mut()[bi].value.as_mut_slice()[j] = original - T::lit(h);
            let minus = loss(model);
            model.blocks_mut()[bi].value.as_mut_slice()[j] = original;
            grad.as_mut_slice()[j] = (plus - minus) / (2.0 * h);
        }
        out.push(grad);
    }
    out
}

/// Elementwise relative error `|a - n| / max(|a|, |n|, floor)`, maximised
/// over all coordinates of all blocks.
pub fn max_relative_error<T: Scalar>(analytic: &[Matrix<T>], numeric: &[Matrix<f64>], floor: f64) -> f64 {
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.shape(), n.shape(), "gradient block shapes differ");
        for (&av, &nv) in a.as_slice().iter().zip(n.as_slice()) {
            let av = av.as_f64();
            let err = (av - nv).abs() / av.abs().max(nv.abs()).max(floor);
            worst = worst.max(err);
        }
    }
    worst
}
