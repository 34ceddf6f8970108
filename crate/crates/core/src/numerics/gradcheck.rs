//! Central finite-difference checking of analytic gradients.

use super::tensor::Tensor;

/// Relative error with a small floor on the denominator so that coordinates
/// whose true gradient vanishes are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Central differences `(f(x+h) − f(x−h)) / 2h` for every coordinate of every
/// input tensor.
pub fn central_differences<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Vec<Vec<f64>>
where
    F: Fn(&[Tensor<f64>]) -> f64,
{
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for ti in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[ti].len());
        for k in 0..inputs[ti].len() {
            let orig = work[ti].data()[k];
            work[ti].data_mut()[k] = orig + h;
            let up = f(&work);
            work[ti].data_mut()[k] = orig - h;
            let down = f(&work);
            work[ti].data_mut()[k] = orig;
            g.push((up - down) / (2.0 * h));
        }
        out.push(g);
    }
    out
}

/// Largest relative error between two gradient sets, with its location.
pub fn max_relative_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> (f64, usize, usize) {
    let mut worst = (0.0, 0, 0);
    for (ti, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (k, (&av, &nv)) in a.iter().zip(n).enumerate() {
            let e = relative_error(av, nv);
            if e > worst.0 {
                worst = (e, ti, k);
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn differences_of_a_cubic() {
        let x = Tensor::from_f64(vec![2], &[1.0, -2.0]).unwrap();
        let g = central_differences(
            |ts| ts[0].data().iter().map(|v| v * v * v).sum(),
            &[x],
            1e-4,
        );
        assert!((g[0][0] - 3.0).abs() < 1e-7);
        assert!((g[0][1] - 12.0).abs() < 1e-7);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(1e-10, 0.0) < 1e-3);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
