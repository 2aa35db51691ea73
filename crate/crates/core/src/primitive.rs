//! Differentiable primitives: forward rules, shape checks and vector-Jacobian products.

use crate::error::{Error, Result};
use crate::heads::crf;
use crate::tensor::{self, Tensor};

/// The primitive set the model is built from.
///
/// Shape rules (vectors are `(n, 1)` columns):
///
/// | kind          | operands                         | output        |
/// |---------------|----------------------------------|---------------|
/// | `MatMul`      | `(m,k)`, `(k,n)`                 | `(m,n)`       |
/// | `Add`         | `(m,n)`, `(m,n)` or `(m,1)`      | `(m,n)`       |
/// | `Hadamard`    | `(m,n)`, `(m,n)`                 | `(m,n)`       |
/// | `ConcatRows`  | `(m_i,n)`…                       | `(Σm_i,n)`    |
/// | `ConcatCols`  | `(m,n_i)`…                       | `(m,Σn_i)`    |
/// | `Tanh`, `Sigmoid`, `Scale`, `Detach` | `(m,n)`   | `(m,n)`       |
/// | `Softmax`     | `(m,n)`, normalized over all entries | `(m,n)`   |
/// | `LogSumExp`, `Sum` | `(m,n)`                     | `(1,1)`       |
/// | `Row(i)`      | `(m,n)`, `i < m`                 | `(n,1)`       |
/// | `Transpose`   | `(m,n)`                          | `(n,m)`       |
/// | `Pick(i,j)`   | `(m,n)`                          | `(1,1)`       |
/// | `CrfNll(y)`   | emissions `(T,L)`, transitions `(L+2,L+2)`, `len(y) = T` | `(1,1)` |
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Hadamard,
    ConcatRows,
    ConcatCols,
    Tanh,
    Sigmoid,
    Softmax,
    LogSumExp,
    Scale(f64),
    Row(usize),
    Transpose,
    Pick(usize, usize),
    Sum,
    /// Identity whose gradient is dropped.
    Detach,
    /// Negative log-likelihood of a gold tag path under a linear-chain CRF.
    CrfNll(Vec<usize>),
}

/// Gradient flowing into one operand.
#[derive(Debug)]
pub enum Contribution {
    None,
    Dense(Tensor),
    /// Gradient confined to one row of the operand.
    Row { row: usize, grad: Vec<f64> },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Hadamard => "hadamard",
            Primitive::ConcatRows => "concat_rows",
            Primitive::ConcatCols => "concat_cols",
            Primitive::Tanh => "tanh",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Softmax => "softmax",
            Primitive::LogSumExp => "logsumexp",
            Primitive::Scale(_) => "scale",
            Primitive::Row(_) => "row",
            Primitive::Transpose => "transpose",
            Primitive::Pick(..) => "pick",
            Primitive::Sum => "sum",
            Primitive::Detach => "detach",
            Primitive::CrfNll(_) => "crf_nll",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::MatMul | Primitive::Add | Primitive::Hadamard | Primitive::CrfNll(_) => {
                Some(2)
            }
            Primitive::ConcatRows | Primitive::ConcatCols => None,
            _ => Some(1),
        }
    }

    /// Evaluates the primitive. Errors on shape mismatch or non-finite output.
    pub fn forward(&self, operands: &[&Tensor]) -> Result<Tensor> {
        let op = self.name();
        match self.arity() {
            Some(n) if operands.len() != n => {
                return Err(Error::contract(format!(
                    "{op} takes {n} operand(s), got {}",
                    operands.len()
                )))
            }
            None if operands.is_empty() => {
                return Err(Error::contract(format!("{op} needs at least one operand")))
            }
            _ => {}
        }
        let mismatch = |a: &Tensor, b: &Tensor| Error::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        };

        let out = match self {
            Primitive::MatMul => {
                let (a, b) = (operands[0], operands[1]);
                if a.cols() != b.rows() {
                    return Err(mismatch(a, b));
                }
                a.matmul(b)
            }
            Primitive::Add => {
                let (a, b) = (operands[0], operands[1]);
                if a.shape() == b.shape() {
                    let mut out = a.clone();
                    out.add_assign(b);
                    out
                } else if b.cols() == 1 && b.rows() == a.rows() {
                    let mut out = a.clone();
                    let n = a.cols();
                    for (r, &bv) in b.data().iter().enumerate() {
                        out.data_mut()[r * n..(r + 1) * n]
                            .iter_mut()
                            .for_each(|v| *v += bv);
                    }
                    out
                } else {
                    return Err(mismatch(a, b));
                }
            }
            Primitive::Hadamard => {
                let (a, b) = (operands[0], operands[1]);
                if a.shape() != b.shape() {
                    return Err(mismatch(a, b));
                }
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
                Tensor::new(a.rows(), a.cols(), data)?
            }
            Primitive::ConcatRows => {
                let cols = operands[0].cols();
                let mut data = Vec::new();
                let mut rows = 0;
                for t in operands {
                    if t.cols() != cols {
                        return Err(mismatch(operands[0], t));
                    }
                    rows += t.rows();
                    data.extend_from_slice(t.data());
                }
                Tensor::new(rows, cols, data)?
            }
            Primitive::ConcatCols => {
                let rows = operands[0].rows();
                for t in operands {
                    if t.rows() != rows {
                        return Err(mismatch(operands[0], t));
                    }
                }
                let cols: usize = operands.iter().map(|t| t.cols()).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for t in operands {
                        data.extend_from_slice(t.row(r));
                    }
                }
                Tensor::new(rows, cols, data)?
            }
            Primitive::Tanh => operands[0].map(f64::tanh),
            Primitive::Sigmoid => operands[0].map(tensor::sigmoid),
            Primitive::Softmax => {
                let a = operands[0];
                if a.is_empty() {
                    return Err(Error::contract("softmax of an empty tensor"));
                }
                Tensor::new(a.rows(), a.cols(), tensor::softmax(a.data()))?
            }
            Primitive::LogSumExp => {
                if operands[0].is_empty() {
                    return Err(Error::contract("logsumexp of an empty tensor"));
                }
                Tensor::scalar(tensor::log_sum_exp(operands[0].data()))
            }
            Primitive::Scale(c) => operands[0].map(|v| v * c),
            Primitive::Row(i) => {
                let a = operands[0];
                if *i >= a.rows() {
                    return Err(Error::contract(format!(
                        "row {i} out of range for {} rows",
                        a.rows()
                    )));
                }
                Tensor::vector(a.row(*i).to_vec())
            }
            Primitive::Transpose => operands[0].transpose(),
            Primitive::Pick(i, j) => {
                let a = operands[0];
                if *i >= a.rows() || *j >= a.cols() {
                    return Err(Error::contract(format!(
                        "pick ({i}, {j}) out of range for shape {:?}",
                        a.shape()
                    )));
                }
                Tensor::scalar(a.get(*i, *j))
            }
            Primitive::Sum => Tensor::scalar(operands[0].sum()),
            Primitive::Detach => operands[0].clone(),
            Primitive::CrfNll(gold) => {
                let (em, trans) = (operands[0], operands[1]);
                let labels = em.cols();
                if trans.shape() != (labels + 2, labels + 2) {
                    return Err(mismatch(em, trans));
                }
                if gold.len() != em.rows() {
                    return Err(Error::contract(format!(
                        "gold path length {} != {} timesteps",
                        gold.len(),
                        em.rows()
                    )));
                }
                Tensor::scalar(crf::nll(em, trans, gold)?)
            }
        };
        if !out.is_finite() {
            return Err(Error::NumericOverflow { op });
        }
        Ok(out)
    }

    /// Vector-Jacobian product: given `∂L/∂out`, the gradient for each operand.
    pub fn backward(
        &self,
        operands: &[&Tensor],
        output: &Tensor,
        grad_out: &Tensor,
    ) -> Vec<Contribution> {
        use Contribution::{Dense, None as Nothing};
        match self {
            Primitive::MatMul => {
                let (a, b) = (operands[0], operands[1]);
                vec![
                    Dense(grad_out.matmul_transposed(b)),
                    Dense(a.transposed_matmul(grad_out)),
                ]
            }
            Primitive::Add => {
                let b = operands[1];
                let gb = if b.shape() == grad_out.shape() {
                    grad_out.clone()
                } else {
                    let n = grad_out.cols();
                    Tensor::vector(
                        (0..grad_out.rows())
                            .map(|r| grad_out.data()[r * n..(r + 1) * n].iter().sum())
                            .collect(),
                    )
                };
                vec![Dense(grad_out.clone()), Dense(gb)]
            }
            Primitive::Hadamard => {
                let (a, b) = (operands[0], operands[1]);
                let mul = |x: &Tensor| {
                    let data = x.data().iter().zip(grad_out.data()).map(|(p, q)| p * q);
                    Tensor::new(x.rows(), x.cols(), data.collect()).expect("same shape")
                };
                vec![Dense(mul(b)), Dense(mul(a))]
            }
            Primitive::ConcatRows => {
                let cols = grad_out.cols();
                let mut offset = 0;
                operands
                    .iter()
                    .map(|t| {
                        let n = t.len();
                        let slice = grad_out.data()[offset * cols..offset * cols + n].to_vec();
                        offset += t.rows();
                        Dense(Tensor::new(t.rows(), cols, slice).expect("slice shape"))
                    })
                    .collect()
            }
            Primitive::ConcatCols => {
                let rows = grad_out.rows();
                let mut out: Vec<Vec<f64>> =
                    operands.iter().map(|t| Vec::with_capacity(t.len())).collect();
                for r in 0..rows {
                    let mut row = grad_out.row(r);
                    for (t, buf) in operands.iter().zip(out.iter_mut()) {
                        let (head, rest) = row.split_at(t.cols());
                        buf.extend_from_slice(head);
                        row = rest;
                    }
                }
                operands
                    .iter()
                    .zip(out)
                    .map(|(t, d)| Dense(Tensor::new(t.rows(), t.cols(), d).expect("slice")))
                    .collect()
            }
            Primitive::Tanh => {
                let data = output
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(y, g)| g * (1.0 - y * y))
                    .collect();
                vec![Dense(Tensor::new(output.rows(), output.cols(), data).expect("shape"))]
            }
            Primitive::Sigmoid => {
                let data = output
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(y, g)| g * y * (1.0 - y))
                    .collect();
                vec![Dense(Tensor::new(output.rows(), output.cols(), data).expect("shape"))]
            }
            Primitive::Softmax => {
                let inner = tensor::dot(output.data(), grad_out.data());
                let data = output
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(y, g)| y * (g - inner))
                    .collect();
                vec![Dense(Tensor::new(output.rows(), output.cols(), data).expect("shape"))]
            }
            Primitive::LogSumExp => {
                let a = operands[0];
                let g = grad_out.item();
                let lse = output.item();
                vec![Dense(a.map(|v| g * (v - lse).exp()))]
            }
            Primitive::Scale(c) => vec![Dense(grad_out.map(|g| g * c))],
            Primitive::Row(i) => vec![Contribution::Row {
                row: *i,
                grad: grad_out.data().to_vec(),
            }],
            Primitive::Transpose => vec![Dense(grad_out.transpose())],
            Primitive::Pick(i, j) => {
                let a = operands[0];
                let mut g = Tensor::zeros(a.rows(), a.cols());
                g.set(*i, *j, grad_out.item());
                vec![Dense(g)]
            }
            Primitive::Sum => {
                let a = operands[0];
                vec![Dense(Tensor::filled(a.rows(), a.cols(), grad_out.item()))]
            }
            Primitive::Detach => vec![Nothing],
            Primitive::CrfNll(gold) => {
                let (mut ge, mut gt) = crf::nll_gradients(operands[0], operands[1], gold);
                let g = grad_out.item();
                ge.scale_in_place(g);
                gt.scale_in_place(g);
                vec![Dense(ge), Dense(gt)]
            }
        }
    }
}
