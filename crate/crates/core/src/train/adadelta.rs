use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;

/// Running averages `E[g²]` and `E[Δx²]`, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaDeltaState {
    pub sq_grad: Vec<Tensor>,
    pub sq_update: Vec<Tensor>,
}

impl AdaDeltaState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols()))
            .collect();
        AdaDeltaState {
            sq_grad: zeros.clone(),
            sq_update: zeros,
        }
    }
}

/// One diagonal AdaDelta step over every unfrozen parameter. Parameters with
/// no entry in `grads` have zero gradient: their averages only decay (and
/// they still feel the `l2` term).
pub fn adadelta_update(
    state: &mut AdaDeltaState,
    params: &mut ParamStore,
    grads: &Gradients,
    rho: f64,
    eps: f64,
    l2: f64,
) -> Result<()> {
    if state.sq_grad.len() != params.len() {
        return Err(Error::contract(format!(
            "optimizer state covers {} parameters, store has {}",
            state.sq_grad.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter_mut().enumerate() {
        let (eg, ex) = (&mut state.sq_grad[i], &mut state.sq_update[i]);
        if eg.shape() != p.value.shape() {
            return Err(Error::ShapeMismatch {
                op: "adadelta",
                left: eg.shape(),
                right: p.value.shape(),
            });
        }
        if p.frozen {
            continue;
        }
        let g = grads.get(crate::params::ParamId(i));
        if let Some(g) = g {
            if g.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adadelta",
                    left: g.shape(),
                    right: p.value.shape(),
                });
            }
        }
        let w = p.value.data_mut();
        let (eg, ex) = (eg.data_mut(), ex.data_mut());
        for j in 0..w.len() {
            let mut gj = g.map_or(0.0, |g| g.data()[j]);
            if l2 > 0.0 {
                gj += l2 * w[j];
            }
            eg[j] = rho * eg[j] + (1.0 - rho) * gj * gj;
            let dx = -((ex[j] + eps).sqrt() / (eg[j] + eps).sqrt()) * gj;
            ex[j] = rho * ex[j] + (1.0 - rho) * dx * dx;
            w[j] += dx;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(v)).unwrap();
        s
    }

    #[test]
    fn first_step_unit_gradient() {
        // Independent evaluation of the update rule from zero state.
        let (rho, eps): (f64, f64) = (0.95, 1e-6);
        let eg = (1.0 - rho) * 1.0;
        let expected = -eps.sqrt() / (eg + eps).sqrt();
        assert!((expected + 0.004472091).abs() < 1e-9);
        assert!((expected + 0.0044719).abs() < 1e-6);

        let mut s = store(0.0);
        let mut st = AdaDeltaState::new(&s);
        let mut g = Gradients::new();
        g.insert(s.id("w").unwrap(), Tensor::scalar(1.0));
        adadelta_update(&mut st, &mut s, &g, rho, eps, 0.0).unwrap();
        assert!((s.value("w").unwrap().item() - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut s = store(0.3);
        let mut st = AdaDeltaState::new(&s);
        st.sq_grad[0] = Tensor::scalar(2.0);
        st.sq_update[0] = Tensor::scalar(4.0);
        adadelta_update(&mut st, &mut s, &Gradients::new(), 0.9, 1e-6, 0.0).unwrap();
        assert_eq!(s.value("w").unwrap().item(), 0.3);
        assert!((st.sq_grad[0].item() - 1.8).abs() < 1e-15);
        assert!((st.sq_update[0].item() - 3.6).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameter_untouched() {
        let mut s = store(0.25);
        s.freeze_prefixes(&["w"]);
        let mut st = AdaDeltaState::new(&s);
        let mut g = Gradients::new();
        g.insert(s.id("w").unwrap(), Tensor::scalar(3.0));
        for _ in 0..10 {
            adadelta_update(&mut st, &mut s, &g, 0.95, 1e-6, 0.1).unwrap();
        }
        assert_eq!(s.value("w").unwrap().item().to_bits(), 0.25f64.to_bits());
    }

    #[test]
    fn l2_pulls_toward_zero() {
        let mut s = store(1.0);
        let mut st = AdaDeltaState::new(&s);
        adadelta_update(&mut st, &mut s, &Gradients::new(), 0.95, 1e-6, 0.5).unwrap();
        assert!(s.value("w").unwrap().item() < 1.0);
    }

    #[test]
    fn mismatched_state_rejected() {
        let mut s = store(1.0);
        let mut st = AdaDeltaState::new(&ParamStore::new());
        assert!(adadelta_update(&mut st, &mut s, &Gradients::new(), 0.95, 1e-6, 0.0).is_err());
    }
}
