//! Reverse-mode tape.
//!
//! Every value lives in a node; nodes are appended in execution order, so
//! replaying the node list backwards visits each output before its operands.
//! A tape is single-use: build it for one sentence, call [`Tape::backward`],
//! drop it.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::primitive::{Contribution, Primitive};
use crate::tensor::Tensor;

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Origin {
    Constant,
    Param(ParamId),
    Op {
        prim: Primitive,
        operands: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    origin: Origin,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            recording: true,
        }
    }

    /// A tape that evaluates values only; `backward` on it is an error.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, origin: Origin) -> Var {
        self.nodes.push(Node { value, origin });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Origin::Constant)
    }

    /// Leaf node bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        Ok(self.param_by_id(store, id))
    }

    pub fn param_by_id(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Origin::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn apply(&mut self, prim: Primitive, operands: &[Var]) -> Result<Var> {
        let out = {
            let vals: Vec<&Tensor> = operands.iter().map(|v| &self.nodes[v.0].value).collect();
            prim.forward(&vals)?
        };
        let origin = if self.recording {
            Origin::Op {
                prim,
                operands: operands.iter().map(|v| v.0).collect(),
            }
        } else {
            Origin::Constant
        };
        Ok(self.push(out, origin))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Hadamard, &[a, b])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Primitive::ConcatRows, parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Primitive::ConcatCols, parts)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Tanh, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Softmax, &[a])
    }

    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::LogSumExp, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[a])
    }

    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        self.apply(Primitive::Row(i), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Transpose, &[a])
    }

    pub fn pick(&mut self, a: Var, i: usize, j: usize) -> Result<Var> {
        self.apply(Primitive::Pick(i, j), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[a])
    }

    pub fn detach(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Detach, &[a])
    }

    pub fn crf_nll(&mut self, emissions: Var, transitions: Var, gold: &[usize]) -> Result<Var> {
        self.apply(Primitive::CrfNll(gold.to_vec()), &[emissions, transitions])
    }

    /// Gradient of the scalar `loss` with respect to every parameter leaf on this tape.
    /// Parameters that do not influence `loss` are absent from the result.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.recording {
            return Err(Error::contract("backward on a non-recording tape"));
        }
        if self.nodes[loss.0].value.shape() != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));

        let mut out = Gradients::new();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.origin {
                Origin::Constant => {}
                Origin::Param(id) => out.insert(*id, g),
                Origin::Op { prim, operands } => {
                    let vals: Vec<&Tensor> =
                        operands.iter().map(|&i| &self.nodes[i].value).collect();
                    let contribs = prim.backward(&vals, &node.value, &g);
                    for (&i, c) in operands.iter().zip(contribs) {
                        accumulate(&mut grads[i], &self.nodes[i].value, c);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(slot: &mut Option<Tensor>, operand: &Tensor, c: Contribution) {
    match c {
        Contribution::None => {}
        Contribution::Dense(t) => match slot {
            Some(acc) => acc.add_assign(&t),
            None => *slot = Some(t),
        },
        Contribution::Row { row, grad } => {
            let acc = slot.get_or_insert_with(|| Tensor::zeros(operand.rows(), operand.cols()));
            for (a, g) in acc.row_mut(row).iter_mut().zip(&grad) {
                *a += g;
            }
        }
    }
}

/// Runs backward and adds the result into the store's gradient slots.
pub fn backprop(tape: &Tape, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
    let grads = tape.backward(loss)?;
    store.accumulate(&grads);
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, t).unwrap();
        s
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut store = store_with("w", Tensor::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]));
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let loss = tape.sum(w).unwrap();
        backprop(&tape, loss, &mut store).unwrap();
        assert_eq!(store.by_name("w").unwrap().grad, Tensor::filled(2, 2, 1.0));
    }

    #[test]
    fn grad_of_sum_tanh_at_zero_is_ones() {
        let mut store = store_with("w", Tensor::zeros(3, 2));
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let t = tape.tanh(w).unwrap();
        let loss = tape.sum(t).unwrap();
        backprop(&tape, loss, &mut store).unwrap();
        assert_eq!(store.by_name("w").unwrap().grad, Tensor::filled(3, 2, 1.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let store = store_with("w", Tensor::zeros(2, 1));
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn untouched_params_get_no_gradient() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::scalar(1.0)).unwrap();
        store.insert("b", Tensor::scalar(2.0)).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&store, "a").unwrap();
        let _b = tape.param(&store, "b").unwrap();
        let loss = tape.sum(a).unwrap();
        let grads = backprop(&tape, loss, &mut store).unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(store.by_name("b").unwrap().grad.item(), 0.0);
    }

    #[test]
    fn reused_param_accumulates_both_paths() {
        let mut store = store_with("w", Tensor::scalar(3.0));
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let w2 = tape.param(&store, "w").unwrap();
        assert_eq!(w, w2);
        let sq = tape.hadamard(w, w2).unwrap();
        let loss = tape.sum(sq).unwrap();
        backprop(&tape, loss, &mut store).unwrap();
        assert_eq!(store.by_name("w").unwrap().grad.item(), 6.0);
    }

    #[test]
    fn independent_tapes_do_not_share_gradients() {
        let store = store_with("w", Tensor::scalar(2.0));
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let w1 = t1.param(&store, "w").unwrap();
        let w2 = t2.param(&store, "w").unwrap();
        let l1 = t1.scale(w1, 5.0).unwrap();
        let sq = t2.hadamard(w2, w2).unwrap();
        let l2 = t2.sum(sq).unwrap();
        let g1 = t1.backward(l1).unwrap();
        let g2 = t2.backward(l2).unwrap();
        let id = store.id("w").unwrap();
        assert_eq!(g1.get(id).unwrap().item(), 5.0);
        assert_eq!(g2.get(id).unwrap().item(), 4.0);
    }

    #[test]
    fn detach_blocks_gradient() {
        let store = store_with("w", Tensor::scalar(2.0));
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let d = tape.detach(w).unwrap();
        let loss = tape.hadamard(w, d).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(store.id("w").unwrap()).unwrap().item(), 2.0);
    }

    #[test]
    fn inference_tape_refuses_backward() {
        let store = store_with("w", Tensor::scalar(1.0));
        let mut tape = Tape::inference();
        let w = tape.param(&store, "w").unwrap();
        let s = tape.sum(w).unwrap();
        assert_eq!(tape.value(s).item(), 1.0);
        assert!(tape.backward(s).is_err());
    }
}
