//! Task-dependent output layers: softmax classifier over the final hidden
//! state and a linear-chain CRF over all hidden states.

pub mod crf;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{init_uniform, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{log_sum_exp, Tensor};

/// `−log softmax(logits)[gold]` on plain values.
pub fn classify_nll(logits: &Tensor, gold: usize) -> Result<f64> {
    if gold >= logits.len() {
        return Err(Error::contract(format!(
            "gold class {gold} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(log_sum_exp(logits.data()) - logits.data()[gold])
}

/// `W_out` (C×h) and `b_out` (C) bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ClassifierParams {
    pub w: Var,
    pub b: Var,
    pub classes: usize,
}

impl ClassifierParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        classes: usize,
        hidden: usize,
        range: f64,
        rng: &mut R,
    ) -> Result<()> {
        if classes < 2 {
            return Err(Error::contract(format!("classifier needs >= 2 classes, got {classes}")));
        }
        store.insert(format!("{prefix}/w"), init_uniform(classes, hidden, -range, range, rng)?)?;
        store.insert(format!("{prefix}/b"), init_uniform(classes, 1, -range, range, rng)?)?;
        Ok(())
    }

    pub fn bind(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        let w = tape.param(store, &format!("{prefix}/w"))?;
        let b = tape.param(store, &format!("{prefix}/b"))?;
        let classes = tape.value(w).rows();
        Ok(ClassifierParams { w, b, classes })
    }

    pub fn logits(&self, tape: &mut Tape, h_last: Var) -> Result<Var> {
        let z = tape.matmul(self.w, h_last)?;
        tape.add(z, self.b)
    }

    pub fn nll(&self, tape: &mut Tape, h_last: Var, gold: usize) -> Result<Var> {
        if gold >= self.classes {
            return Err(Error::contract(format!(
                "gold class {gold} out of range for {} classes",
                self.classes
            )));
        }
        let logits = self.logits(tape, h_last)?;
        let lse = tape.logsumexp(logits)?;
        let picked = tape.pick(logits, gold, 0)?;
        tape.sub(lse, picked)
    }
}

/// Emission projection `W_e` (L×h), `b_e` (L) and transitions `(L+2)×(L+2)`.
#[derive(Clone, Copy, Debug)]
pub struct CrfParams {
    pub w_e: Var,
    pub b_e: Var,
    pub transitions: Var,
    pub labels: usize,
}

impl CrfParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        labels: usize,
        hidden: usize,
        range: f64,
        rng: &mut R,
    ) -> Result<()> {
        if labels == 0 {
            return Err(Error::contract("CRF needs at least one tag"));
        }
        store.insert(format!("{prefix}/w_e"), init_uniform(labels, hidden, -range, range, rng)?)?;
        store.insert(format!("{prefix}/b_e"), init_uniform(labels, 1, -range, range, rng)?)?;
        let mut trans = init_uniform(labels + 2, labels + 2, -range, range, rng)?;
        for k in 0..labels + 2 {
            trans.set(k, crf::bos(labels), 0.0);
            trans.set(crf::eos(labels), k, 0.0);
        }
        store.insert(format!("{prefix}/trans"), trans)?;
        Ok(())
    }

    pub fn bind(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        let w_e = tape.param(store, &format!("{prefix}/w_e"))?;
        let b_e = tape.param(store, &format!("{prefix}/b_e"))?;
        let transitions = tape.param(store, &format!("{prefix}/trans"))?;
        let labels = tape.value(w_e).rows();
        Ok(CrfParams {
            w_e,
            b_e,
            transitions,
            labels,
        })
    }

    /// `(T, L)` emission scores from the per-step hidden states.
    pub fn emissions(&self, tape: &mut Tape, states: &[Var]) -> Result<Var> {
        let h = tape.concat_cols(states)?;
        let z = tape.matmul(self.w_e, h)?;
        let z = tape.add(z, self.b_e)?;
        tape.transpose(z)
    }

    pub fn nll(&self, tape: &mut Tape, states: &[Var], gold: &[usize]) -> Result<Var> {
        let em = self.emissions(tape, states)?;
        tape.crf_nll(em, self.transitions, gold)
    }

    pub fn decode(&self, tape: &mut Tape, states: &[Var]) -> Result<Vec<usize>> {
        let em = self.emissions(tape, states)?;
        let (path, _) = crf::viterbi(tape.value(em), tape.value(self.transitions))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_logits_give_ln2() {
        let nll = classify_nll(&Tensor::vector(vec![0.0, 0.0]), 0).unwrap();
        assert!((nll - 0.693_147).abs() < 1e-6);
    }

    #[test]
    fn saturated_logits_give_tiny_loss() {
        let nll = classify_nll(&Tensor::vector(vec![10.0, -10.0]), 0).unwrap();
        assert!((nll - 2.061e-9).abs() < 1e-11, "{nll}");
    }

    #[test]
    fn gold_out_of_range() {
        assert!(classify_nll(&Tensor::vector(vec![0.0, 0.0]), 2).is_err());
    }

    #[test]
    fn tape_nll_matches_plain_nll() {
        let mut store = ParamStore::new();
        store
            .insert("c/w", Tensor::from_rows(&[vec![0.5, -0.25], vec![0.1, 0.3], vec![-0.7, 0.2]]))
            .unwrap();
        store.insert("c/b", Tensor::vector(vec![0.05, -0.1, 0.2])).unwrap();
        let mut tape = Tape::new();
        let head = ClassifierParams::bind(&mut tape, &store, "c").unwrap();
        let h = tape.constant(Tensor::vector(vec![0.9, -0.4]));
        let loss = head.nll(&mut tape, h, 2).unwrap();
        let logits = store.value("c/w").unwrap().matmul(&Tensor::vector(vec![0.9, -0.4]));
        let mut logits = logits;
        logits.add_assign(store.value("c/b").unwrap());
        let plain = classify_nll(&logits, 2).unwrap();
        assert!((tape.value(loss).item() - plain).abs() < 1e-14);
        assert!(head.nll(&mut tape, h, 3).is_err());
    }
}
