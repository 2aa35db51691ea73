//! Vanilla LSTM and the message-fused LSTM† cell.
//!
//! Gates follow the usual formulation on `z = [x; h_{t-1}]`:
//!
//! ```text
//! i = σ(W_i z + b_i)   f = σ(W_f z + b_f)   o = σ(W_o z + b_o)   g = tanh(W_g z + b_g)
//! c_t = f ⊙ c_{t-1} + i ⊙ g
//! h_t = o ⊙ tanh(c_t)                                   (vanilla)
//! h_t = o ⊙ tanh(c_t + q_t ⊙ (W_f^s r_t))               (fused)
//! q_t = σ(W_r^s r_t + W_c^s c_t)
//! ```
//!
//! The fused cell only rewrites the hidden output; the memory carried to the
//! next step is the plain `c_t`. Carrying the fused pre-activation instead
//! would be a one-line change in [`lstm_fused_step`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{init_uniform, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const GATES: [&str; 4] = ["i", "f", "o", "g"];

/// Gate weights and biases bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    pub w_i: Var,
    pub w_f: Var,
    pub w_o: Var,
    pub w_g: Var,
    pub b_i: Var,
    pub b_f: Var,
    pub b_o: Var,
    pub b_g: Var,
    pub input: usize,
    pub hidden: usize,
}

impl LstmParams {
    /// Registers `{prefix}/w_{i,f,o,g}` and `{prefix}/b_{i,f,o,g}`: weights
    /// uniform in `±range`, forget bias `forget_bias`, other biases uniform.
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        range: f64,
        forget_bias: f64,
        rng: &mut R,
    ) -> Result<()> {
        if input == 0 || hidden == 0 {
            return Err(Error::contract("LSTM sizes must be >= 1"));
        }
        for g in GATES {
            store.insert(
                format!("{prefix}/w_{g}"),
                init_uniform(hidden, input + hidden, -range, range, rng)?,
            )?;
        }
        for g in GATES {
            let b = if g == "f" {
                Tensor::filled(hidden, 1, forget_bias)
            } else {
                init_uniform(hidden, 1, -range, range, rng)?
            };
            store.insert(format!("{prefix}/b_{g}"), b)?;
        }
        Ok(())
    }

    pub fn bind(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        let mut p = |n: &str| tape.param(store, &format!("{prefix}/{n}"));
        let (w_i, w_f, w_o, w_g) = (p("w_i")?, p("w_f")?, p("w_o")?, p("w_g")?);
        let (b_i, b_f, b_o, b_g) = (p("b_i")?, p("b_f")?, p("b_o")?, p("b_g")?);
        let (hidden, cols) = tape.value(w_i).shape();
        if cols <= hidden {
            return Err(Error::contract(format!(
                "{prefix}: gate matrix {hidden}x{cols} leaves no input columns"
            )));
        }
        Ok(LstmParams {
            w_i,
            w_f,
            w_o,
            w_g,
            b_i,
            b_f,
            b_o,
            b_g,
            input: cols - hidden,
            hidden,
        })
    }
}

/// Message-fusion matrices `W_f^s`, `W_r^s`, `W_c^s`, all `h×h`.
#[derive(Clone, Copy, Debug)]
pub struct FusionParams {
    pub w_f: Var,
    pub w_r: Var,
    pub w_c: Var,
}

impl FusionParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        hidden: usize,
        range: f64,
        rng: &mut R,
    ) -> Result<()> {
        for n in ["w_f", "w_r", "w_c"] {
            store.insert(format!("{prefix}/{n}"), init_uniform(hidden, hidden, -range, range, rng)?)?;
        }
        Ok(())
    }

    pub fn bind(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        let w_f = tape.param(store, &format!("{prefix}/w_f"))?;
        let w_r = tape.param(store, &format!("{prefix}/w_r"))?;
        let w_c = tape.param(store, &format!("{prefix}/w_c"))?;
        for w in [w_f, w_r, w_c] {
            let (r, c) = tape.value(w).shape();
            if r != c {
                return Err(Error::contract(format!("{prefix}: fusion matrix {r}x{c} is not square")));
            }
        }
        Ok(FusionParams { w_f, w_r, w_c })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(tape: &mut Tape, hidden: usize) -> Self {
        LstmState {
            h: tape.constant(Tensor::zeros(hidden, 1)),
            c: tape.constant(Tensor::zeros(hidden, 1)),
        }
    }
}

struct Gates {
    o: Var,
    c: Var,
}

fn gates(tape: &mut Tape, p: &LstmParams, x: Var, prev: &LstmState) -> Result<Gates> {
    let xd = tape.value(x).shape();
    if xd != (p.input, 1) {
        return Err(Error::ShapeMismatch {
            op: "lstm_step",
            left: xd,
            right: (p.input, 1),
        });
    }
    let z = tape.concat_rows(&[x, prev.h])?;
    let mut affine = |w: Var, b: Var| -> Result<Var> {
        let a = tape.matmul(w, z)?;
        tape.add(a, b)
    };
    let zi = affine(p.w_i, p.b_i)?;
    let zf = affine(p.w_f, p.b_f)?;
    let zo = affine(p.w_o, p.b_o)?;
    let zg = affine(p.w_g, p.b_g)?;
    let i = tape.sigmoid(zi)?;
    let f = tape.sigmoid(zf)?;
    let o = tape.sigmoid(zo)?;
    let g = tape.tanh(zg)?;
    let keep = tape.hadamard(f, prev.c)?;
    let write = tape.hadamard(i, g)?;
    let c = tape.add(keep, write)?;
    Ok(Gates { o, c })
}

pub fn lstm_step(tape: &mut Tape, p: &LstmParams, x: Var, prev: &LstmState) -> Result<LstmState> {
    let Gates { o, c } = gates(tape, p, x, prev)?;
    let tc = tape.tanh(c)?;
    let h = tape.hadamard(o, tc)?;
    Ok(LstmState { h, c })
}

/// LSTM† step: the aggregated message `r` enters the hidden output through
/// the fusion gate.
pub fn lstm_fused_step(
    tape: &mut Tape,
    p: &LstmParams,
    fusion: &FusionParams,
    x: Var,
    prev: &LstmState,
    r: Var,
) -> Result<LstmState> {
    let rd = tape.value(r).shape();
    if rd != (p.hidden, 1) {
        return Err(Error::ShapeMismatch {
            op: "lstm_fused_step",
            left: rd,
            right: (p.hidden, 1),
        });
    }
    let Gates { o, c } = gates(tape, p, x, prev)?;
    let msg = tape.matmul(fusion.w_f, r)?;
    let from_r = tape.matmul(fusion.w_r, r)?;
    let from_c = tape.matmul(fusion.w_c, c)?;
    let pre = tape.add(from_r, from_c)?;
    let gate = tape.sigmoid(pre)?;
    let gated = tape.hadamard(gate, msg)?;
    let fused = tape.add(c, gated)?;
    let tf = tape.tanh(fused)?;
    let h = tape.hadamard(o, tf)?;
    Ok(LstmState { h, c })
}

#[derive(Clone, Copy, Debug)]
pub enum Cell<'a> {
    Vanilla(&'a LstmParams),
    Fused(&'a LstmParams, &'a FusionParams),
}

/// Left-to-right unroll from the zero state. `messages` is required for
/// (and only read by) the fused cell.
pub fn run_sequence(
    tape: &mut Tape,
    cell: Cell<'_>,
    xs: &[Var],
    messages: Option<&[Var]>,
) -> Result<Vec<LstmState>> {
    let params = match cell {
        Cell::Vanilla(p) | Cell::Fused(p, _) => p,
    };
    if let Cell::Fused(..) = cell {
        let n = messages.map_or(0, <[Var]>::len);
        if n != xs.len() {
            return Err(Error::contract(format!(
                "fused unroll needs one message per step: {} inputs, {n} messages",
                xs.len()
            )));
        }
    }
    let mut state = LstmState::zeros(tape, params.hidden);
    let mut out = Vec::with_capacity(xs.len());
    for (t, &x) in xs.iter().enumerate() {
        state = match cell {
            Cell::Vanilla(p) => lstm_step(tape, p, x, &state)?,
            Cell::Fused(p, f) => {
                let r = messages.expect("checked above")[t];
                lstm_fused_step(tape, p, f, x, &state, r)?
            }
        };
        out.push(state);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn scalar_store(weight: f64) -> ParamStore {
        let mut s = ParamStore::new();
        for g in GATES {
            s.insert(format!("l/w_{g}"), Tensor::filled(1, 2, weight)).unwrap();
        }
        for g in GATES {
            s.insert(format!("l/b_{g}"), Tensor::zeros(1, 1)).unwrap();
        }
        for n in ["w_f", "w_r", "w_c"] {
            s.insert(format!("m/{n}"), Tensor::filled(1, 1, weight)).unwrap();
        }
        s
    }

    #[test]
    fn zero_weights_give_zero_state() {
        let store = scalar_store(0.0);
        let mut tape = Tape::new();
        let p = LstmParams::bind(&mut tape, &store, "l").unwrap();
        let x = tape.constant(Tensor::scalar(3.7));
        let z = LstmState::zeros(&mut tape, 1);
        let s = lstm_step(&mut tape, &p, x, &z).unwrap();
        assert_eq!(tape.value(s.c).item(), 0.0);
        assert_eq!(tape.value(s.h).item(), 0.0);
    }

    #[test]
    fn zero_fusion_weights_give_half_gate() {
        let mut store = scalar_store(1.0);
        store.set_value("m/w_r", Tensor::zeros(1, 1)).unwrap();
        store.set_value("m/w_c", Tensor::zeros(1, 1)).unwrap();
        let mut tape = Tape::new();
        let p = LstmParams::bind(&mut tape, &store, "l").unwrap();
        let f = FusionParams::bind(&mut tape, &store, "m").unwrap();
        let x = tape.constant(Tensor::scalar(1.0));
        let r = tape.constant(Tensor::scalar(2.0));
        let z = LstmState::zeros(&mut tape, 1);
        let s = lstm_fused_step(&mut tape, &p, &f, x, &z, r).unwrap();
        let c = tape.value(s.c).item();
        let o = 1.0 / (1.0 + (-1.0f64).exp());
        // q = σ(0) = 0.5, message W_f r = 2.
        let expected = o * (c + 0.5 * 2.0).tanh();
        assert!((tape.value(s.h).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn input_dimension_checked() {
        let store = scalar_store(1.0);
        let mut tape = Tape::new();
        let p = LstmParams::bind(&mut tape, &store, "l").unwrap();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let z = LstmState::zeros(&mut tape, 1);
        assert!(lstm_step(&mut tape, &p, x, &z).is_err());
    }

    #[test]
    fn fused_unroll_needs_messages() {
        let store = scalar_store(1.0);
        let mut tape = Tape::new();
        let p = LstmParams::bind(&mut tape, &store, "l").unwrap();
        let f = FusionParams::bind(&mut tape, &store, "m").unwrap();
        let x = tape.constant(Tensor::scalar(1.0));
        assert!(run_sequence(&mut tape, Cell::Fused(&p, &f), &[x, x], None).is_err());
        let r = tape.constant(Tensor::scalar(0.0));
        assert!(run_sequence(&mut tape, Cell::Fused(&p, &f), &[x, x], Some(&[r])).is_err());
    }

    #[test]
    fn register_sets_forget_bias() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        LstmParams::register(&mut store, "task/0/lstm", 3, 2, 0.1, 1.0, &mut rng).unwrap();
        assert_eq!(store.value("task/0/lstm/b_f").unwrap(), &Tensor::filled(2, 1, 1.0));
        assert_eq!(store.value("task/0/lstm/w_g").unwrap().shape(), (2, 5));
    }
}
