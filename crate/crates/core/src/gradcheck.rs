//! Central-difference gradient oracle.

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;

/// Denominator floor for [`relative_error`]: below this magnitude the
/// comparison degrades to an absolute one, where finite-difference
/// truncation noise would otherwise dominate.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// `(f(x+h) − f(x−h)) / 2h` for every scalar of every parameter.
///
/// Each perturbed entry is restored bit-for-bit before moving on.
pub fn finite_diff_gradient<F>(mut loss_fn: F, params: &mut ParamStore, h: f64) -> Result<Gradients>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::contract(format!("finite-difference step must be > 0, got {h}")));
    }
    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    let mut out = Gradients::new();
    for id in ids {
        let (r, c) = params.get(id).value.shape();
        let mut g = Tensor::zeros(r, c);
        for k in 0..r * c {
            let orig = params.get(id).value.data()[k];
            params.get_mut(id).value.data_mut()[k] = orig + h;
            let plus = loss_fn(params);
            params.get_mut(id).value.data_mut()[k] = orig - h;
            let minus = loss_fn(params);
            params.get_mut(id).value.data_mut()[k] = orig;
            g.data_mut()[k] = (plus? - minus?) / (2.0 * h);
        }
        out.insert(id, g);
    }
    Ok(out)
}

/// `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Largest entry-wise relative error over every parameter in `numeric`;
/// parameters missing from `analytic` count as zero gradient.
pub fn max_relative_error(analytic: &Gradients, numeric: &Gradients) -> f64 {
    let mut worst: f64 = 0.0;
    for (id, n) in numeric.iter() {
        match analytic.get(id) {
            Some(a) => {
                for (x, y) in a.data().iter().zip(n.data()) {
                    worst = worst.max(relative_error(*x, *y));
                }
            }
            None => {
                for y in n.data() {
                    worst = worst.max(relative_error(0.0, *y));
                }
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::scalar(3.0)).unwrap();
        let g = finite_diff_gradient(
            |p| {
                let x = p.get(id).value.item();
                Ok(x * x)
            },
            &mut store,
            1e-5,
        )
        .unwrap();
        assert!((g.get(id).unwrap().item() - 6.0).abs() < 1e-9);
        assert_eq!(store.get(id).value.item(), 3.0);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::filled(2, 3, 0.7)).unwrap();
        let g = finite_diff_gradient(|_| Ok(4.2), &mut store, 1e-5).unwrap();
        assert!(g.get(id).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nonpositive_step_rejected() {
        let mut store = ParamStore::new();
        assert!(finite_diff_gradient(|_| Ok(0.0), &mut store, 0.0).is_err());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-6).abs() < 1e-18);
    }
}
