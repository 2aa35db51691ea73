//! Linear-chain CRF over `L` tags.
//!
//! Emissions are `(T, L)`. Transitions are `(L+2, L+2)`: index `L` is the
//! begin-of-sentence state and `L+1` the end-of-sentence state. Row `L` holds
//! start scores `A[BOS, y]`, column `L+1` holds stop scores `A[y, EOS]`. The
//! BOS column and EOS row are never read and receive zero gradient.

use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, Tensor};

#[inline]
pub fn bos(labels: usize) -> usize {
    labels
}

#[inline]
pub fn eos(labels: usize) -> usize {
    labels + 1
}

fn check(emissions: &Tensor, transitions: &Tensor) -> Result<()> {
    let l = emissions.cols();
    if emissions.rows() == 0 || l == 0 {
        return Err(Error::contract("CRF needs at least one timestep and one tag"));
    }
    if transitions.shape() != (l + 2, l + 2) {
        return Err(Error::ShapeMismatch {
            op: "crf",
            left: emissions.shape(),
            right: transitions.shape(),
        });
    }
    Ok(())
}

fn check_path(labels: usize, steps: usize, path: &[usize]) -> Result<()> {
    if path.len() != steps {
        return Err(Error::contract(format!(
            "tag path has length {}, expected {steps}",
            path.len()
        )));
    }
    if let Some(&bad) = path.iter().find(|&&y| y >= labels) {
        return Err(Error::contract(format!("tag {bad} out of range for {labels} tags")));
    }
    Ok(())
}

/// Full score of one tag path, including BOS and EOS transitions.
pub fn path_score(emissions: &Tensor, transitions: &Tensor, path: &[usize]) -> Result<f64> {
    check(emissions, transitions)?;
    let l = emissions.cols();
    check_path(l, emissions.rows(), path)?;
    let mut s = transitions.get(bos(l), path[0]);
    for (t, &y) in path.iter().enumerate() {
        s += emissions.get(t, y);
        if t + 1 < path.len() {
            s += transitions.get(y, path[t + 1]);
        }
    }
    s += transitions.get(path[path.len() - 1], eos(l));
    Ok(s)
}

/// Forward recursion in log space. Row `t` holds `log α_t(y)`.
fn forward_table(emissions: &Tensor, transitions: &Tensor) -> Vec<Vec<f64>> {
    let (steps, l) = emissions.shape();
    let mut alpha = Vec::with_capacity(steps);
    alpha.push(
        (0..l)
            .map(|y| transitions.get(bos(l), y) + emissions.get(0, y))
            .collect::<Vec<_>>(),
    );
    let mut scratch = vec![0.0; l];
    for t in 1..steps {
        let prev = &alpha[t - 1];
        let row: Vec<f64> = (0..l)
            .map(|y| {
                for (p, s) in scratch.iter_mut().enumerate() {
                    *s = prev[p] + transitions.get(p, y);
                }
                emissions.get(t, y) + log_sum_exp(&scratch)
            })
            .collect();
        alpha.push(row);
    }
    alpha
}

/// Backward recursion in log space. Row `t` holds `log β_t(y)`.
fn backward_table(emissions: &Tensor, transitions: &Tensor) -> Vec<Vec<f64>> {
    let (steps, l) = emissions.shape();
    let mut beta = vec![vec![0.0; l]; steps];
    for y in 0..l {
        beta[steps - 1][y] = transitions.get(y, eos(l));
    }
    let mut scratch = vec![0.0; l];
    for t in (0..steps - 1).rev() {
        for y in 0..l {
            for (n, s) in scratch.iter_mut().enumerate() {
                *s = transitions.get(y, n) + emissions.get(t + 1, n) + beta[t + 1][n];
            }
            beta[t][y] = log_sum_exp(&scratch);
        }
    }
    beta
}

fn finish(alpha_last: &[f64], transitions: &Tensor) -> f64 {
    let l = alpha_last.len();
    let ends: Vec<f64> = alpha_last
        .iter()
        .enumerate()
        .map(|(y, a)| a + transitions.get(y, eos(l)))
        .collect();
    log_sum_exp(&ends)
}

/// `log Σ_paths exp(score(path))` by the forward algorithm.
pub fn log_partition(emissions: &Tensor, transitions: &Tensor) -> Result<f64> {
    check(emissions, transitions)?;
    let alpha = forward_table(emissions, transitions);
    Ok(finish(alpha.last().expect("T >= 1"), transitions))
}

/// `log Z − score(gold)`; never negative up to rounding.
pub fn nll(emissions: &Tensor, transitions: &Tensor, gold: &[usize]) -> Result<f64> {
    let gold_score = path_score(emissions, transitions, gold)?;
    Ok(log_partition(emissions, transitions)? - gold_score)
}

/// Highest-scoring path and its score. Among equal-scoring paths the
/// lexicographically smallest one wins, i.e. ties go to the lower tag index
/// at the earliest position where candidates differ.
pub fn viterbi(emissions: &Tensor, transitions: &Tensor) -> Result<(Vec<usize>, f64)> {
    check(emissions, transitions)?;
    let (steps, l) = emissions.shape();
    // best[t][y]: best score of the suffix after position t given tag y at t.
    let mut best = vec![vec![0.0; l]; steps];
    for y in 0..l {
        best[steps - 1][y] = transitions.get(y, eos(l));
    }
    for t in (0..steps - 1).rev() {
        for y in 0..l {
            best[t][y] = (0..l)
                .map(|n| transitions.get(y, n) + emissions.get(t + 1, n) + best[t + 1][n])
                .fold(f64::NEG_INFINITY, f64::max);
        }
    }
    let first = |y: usize| transitions.get(bos(l), y) + emissions.get(0, y) + best[0][y];
    let top = (0..l).map(first).fold(f64::NEG_INFINITY, f64::max);
    let mut path = Vec::with_capacity(steps);
    path.push((0..l).find(|&y| first(y) == top).expect("max is attained"));
    for t in 0..steps - 1 {
        let y = path[t];
        let next = (0..l)
            .find(|&n| transitions.get(y, n) + emissions.get(t + 1, n) + best[t + 1][n] == best[t][y])
            .expect("max is attained");
        path.push(next);
    }
    let score = path_score(emissions, transitions, &path)?;
    Ok((path, score))
}

/// Posterior tag marginals `P(y_t = y)`, shape `(T, L)`.
pub fn marginals(emissions: &Tensor, transitions: &Tensor) -> Result<Tensor> {
    check(emissions, transitions)?;
    let (steps, l) = emissions.shape();
    let alpha = forward_table(emissions, transitions);
    let beta = backward_table(emissions, transitions);
    let log_z = finish(&alpha[steps - 1], transitions);
    let mut out = Tensor::zeros(steps, l);
    for t in 0..steps {
        for y in 0..l {
            out.set(t, y, (alpha[t][y] + beta[t][y] - log_z).exp());
        }
    }
    Ok(out)
}

/// Gradients of [`nll`] with respect to emissions and transitions:
/// expected feature counts minus gold feature counts.
///
/// Inputs are assumed validated by the forward pass.
pub fn nll_gradients(emissions: &Tensor, transitions: &Tensor, gold: &[usize]) -> (Tensor, Tensor) {
    let (steps, l) = emissions.shape();
    let alpha = forward_table(emissions, transitions);
    let beta = backward_table(emissions, transitions);
    let log_z = finish(&alpha[steps - 1], transitions);

    let mut ge = Tensor::zeros(steps, l);
    let mut gt = Tensor::zeros(l + 2, l + 2);
    for t in 0..steps {
        for y in 0..l {
            ge.set(t, y, (alpha[t][y] + beta[t][y] - log_z).exp());
        }
    }
    for y in 0..l {
        gt.set(bos(l), y, ge.get(0, y));
        gt.set(y, eos(l), ge.get(steps - 1, y));
    }
    for t in 0..steps.saturating_sub(1) {
        for p in 0..l {
            for n in 0..l {
                let lp = alpha[t][p] + transitions.get(p, n) + emissions.get(t + 1, n)
                    + beta[t + 1][n]
                    - log_z;
                let cur = gt.get(p, n);
                gt.set(p, n, cur + lp.exp());
            }
        }
    }

    for (t, &y) in gold.iter().enumerate() {
        let cur = ge.get(t, y);
        ge.set(t, y, cur - 1.0);
        if t + 1 < gold.len() {
            let cur = gt.get(y, gold[t + 1]);
            gt.set(y, gold[t + 1], cur - 1.0);
        }
    }
    let first = gold[0];
    let last = gold[gold.len() - 1];
    let cur = gt.get(bos(l), first);
    gt.set(bos(l), first, cur - 1.0);
    let cur = gt.get(last, eos(l));
    gt.set(last, eos(l), cur - 1.0);
    (ge, gt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeros(t: usize, l: usize) -> (Tensor, Tensor) {
        (Tensor::zeros(t, l), Tensor::zeros(l + 2, l + 2))
    }

    #[test]
    fn single_step_two_tags_all_zero() {
        let (e, a) = zeros(1, 2);
        assert!((log_partition(&e, &a).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_steps_two_tags_all_zero() {
        let (e, a) = zeros(2, 2);
        assert!((log_partition(&e, &a).unwrap() - 1.386_294).abs() < 1e-6);
        for gold in [[0, 0], [0, 1], [1, 0], [1, 1]] {
            assert!((nll(&e, &a, &gold).unwrap() - 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn single_tag_has_zero_nll_and_zero_path() {
        let e = Tensor::from_rows(&[vec![0.3], vec![-1.2], vec![2.0]]);
        let a = Tensor::from_rows(&[vec![0.5, 0.0, 0.1], vec![0.2, 0.0, 0.0], vec![0.0; 3]]);
        assert!(nll(&e, &a, &[0, 0, 0]).unwrap().abs() < 1e-12);
        let (path, score) = viterbi(&e, &a).unwrap();
        assert_eq!(path, vec![0, 0, 0]);
        assert!((score - log_partition(&e, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn strong_emissions_give_constant_path() {
        let mut e = Tensor::zeros(4, 3);
        for t in 0..4 {
            e.set(t, 2, 5.0);
        }
        let a = Tensor::zeros(5, 5);
        assert_eq!(viterbi(&e, &a).unwrap().0, vec![2; 4]);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let (e, a) = zeros(3, 3);
        assert_eq!(viterbi(&e, &a).unwrap().0, vec![0, 0, 0]);
    }

    #[test]
    fn out_of_range_tag_rejected() {
        let (e, a) = zeros(2, 2);
        assert!(nll(&e, &a, &[0, 2]).is_err());
        assert!(nll(&e, &a, &[0]).is_err());
    }

    #[test]
    fn marginals_are_distributions() {
        let e = Tensor::from_rows(&[vec![0.1, -0.4, 0.9], vec![1.0, 0.2, -0.3]]);
        let a = Tensor::from_rows(&[
            vec![0.1, 0.2, -0.1, 0.0, 0.3],
            vec![-0.5, 0.4, 0.0, 0.0, 0.2],
            vec![0.3, 0.1, 0.2, 0.0, -0.4],
            vec![0.2, -0.3, 0.5, 0.0, 0.0],
            vec![0.0; 5],
        ]);
        let m = marginals(&e, &a).unwrap();
        for t in 0..2 {
            assert!((m.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
