//! Log-domain Sinkhorn with one dustbin row and column.

use serde::{Deserialize, Serialize};

use super::FineError;
use crate::numerics::{log_sum_exp, NumericsError, Tape, Tensor, Var};

/// Partial assignment `(N_h + 1) × (N_p + 1)`; the last row and column are
/// dustbins. Rows sum to 1 (dustbin row to `N_p`), columns to 1 (dustbin
/// column to `N_h`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssignmentMatrix {
    pub probs: Vec<Vec<f64>>,
    pub iterations: usize,
}

impl AssignmentMatrix {
    pub fn num_hints(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn num_instances(&self) -> usize {
        self.probs[0].len() - 1
    }

    pub fn get(&self, hint: usize, inst: usize) -> f64 {
        self.probs[hint][inst]
    }

    /// Largest deviation of any row, column or total sum from its target.
    pub fn marginal_violation(&self) -> f64 {
        let m = self.num_hints();
        let n = self.num_instances();
        let mut worst: f64 = 0.0;
        let mut total = 0.0;
        for (j, row) in self.probs.iter().enumerate() {
            let s: f64 = row.iter().sum();
            total += s;
            let want = if j == m { n as f64 } else { 1.0 };
            worst = worst.max((s - want).abs());
        }
        for i in 0..=n {
            let s: f64 = self.probs.iter().map(|r| r[i]).sum();
            let want = if i == n { m as f64 } else { 1.0 };
            worst = worst.max((s - want).abs());
        }
        worst.max((total - (m + n) as f64).abs())
    }

    pub fn from_log(log_p: &Tensor, iterations: usize) -> Self {
        Self {
            probs: log_p.to_rows().into_iter().map(|r| r.into_iter().map(f64::exp).collect()).collect(),
            iterations,
        }
    }
}

fn log_marginals(m: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mu = vec![0.0; m + 1];
    mu[m] = (n as f64).ln();
    let mut nu = vec![0.0; n + 1];
    nu[n] = (m as f64).ln();
    (mu, nu)
}

/// Plain-`f64` solver. Stops after `iters` rounds or once the row marginals
/// (columns are exact after each round) are within `tol`.
pub fn sinkhorn(
    scores: &[Vec<f64>],
    dustbin: f64,
    iters: usize,
    tol: f64,
) -> Result<AssignmentMatrix, FineError> {
    let m = scores.len();
    let n = scores.first().map_or(0, Vec::len);
    if m == 0 || n == 0 || scores.iter().any(|r| r.len() != n) {
        return Err(FineError::Shape(format!("score matrix must be non-empty and rectangular ({m} rows)")));
    }
    if !dustbin.is_finite() || scores.iter().flatten().any(|v| !v.is_finite()) {
        return Err(FineError::NonFinite);
    }
    if iters == 0 {
        return Err(FineError::Config("sinkhorn iterations must be at least 1".into()));
    }
    let mut z: Vec<Vec<f64>> = scores
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.push(dustbin);
            r
        })
        .collect();
    z.push(vec![dustbin; n + 1]);
    let (mu, nu) = log_marginals(m, n);
    let mut u = vec![0.0; m + 1];
    let mut v = vec![0.0; n + 1];
    let mut done = 0;
    for it in 1..=iters {
        for j in 0..=m {
            let row: Vec<f64> = (0..=n).map(|i| z[j][i] + v[i]).collect();
            u[j] = mu[j] - log_sum_exp(&row);
        }
        for i in 0..=n {
            let col: Vec<f64> = (0..=m).map(|j| z[j][i] + u[j]).collect();
            v[i] = nu[i] - log_sum_exp(&col);
        }
        done = it;
        if tol > 0.0 && row_violation(&z, &u, &v, &mu) < tol {
            break;
        }
    }
    let probs = (0..=m)
        .map(|j| (0..=n).map(|i| (z[j][i] + u[j] + v[i]).exp()).collect())
        .collect();
    Ok(AssignmentMatrix {
        probs,
        iterations: done,
    })
}

fn row_violation(z: &[Vec<f64>], u: &[f64], v: &[f64], mu: &[f64]) -> f64 {
    z.iter()
        .enumerate()
        .map(|(j, row)| {
            let s: f64 = row.iter().zip(v).map(|(a, b)| (a + u[j] + b).exp()).sum();
            (s - mu[j].exp()).abs()
        })
        .fold(0.0, f64::max)
}

/// Differentiable solver on the tape. `scores` is `[N_h, N_p]`, `dustbin` a
/// `[1,1]` scalar. Returns `log P̄` and the number of rounds run; the
/// stopping rule matches [`sinkhorn`].
pub fn sinkhorn_tape(
    tape: &mut Tape,
    scores: Var,
    dustbin: Var,
    iters: usize,
    tol: f64,
) -> Result<(Var, usize), NumericsError> {
    let (m, n) = (tape.value(scores).rows(), tape.value(scores).cols());
    let ones_col = tape.constant(Tensor::filled(m, 1, 1.0));
    let zcol = tape.matmul(ones_col, dustbin)?;
    let top = tape.concat_cols(&[scores, zcol])?;
    let ones_row = tape.constant(Tensor::filled(1, n + 1, 1.0));
    let zrow = tape.matmul(dustbin, ones_row)?;
    let z = tape.concat_rows(&[top, zrow])?;
    let (mu, nu) = log_marginals(m, n);
    let mu_col = tape.constant(Tensor::matrix(m + 1, 1, mu.clone())?);
    let nu_col = tape.constant(Tensor::matrix(n + 1, 1, nu)?);
    let zt = tape.transpose(z);

    let mut v = tape.constant(Tensor::zeros(n + 1, 1));
    let mut u;
    let mut done = 0;
    loop {
        let vr = tape.transpose(v);
        let zv = tape.add_bias(z, vr)?;
        let lse = tape.log_sum_exp_rows(zv)?;
        u = tape.sub(mu_col, lse)?;
        let ur = tape.transpose(u);
        let zu = tape.add_bias(zt, ur)?;
        let lse = tape.log_sum_exp_rows(zu)?;
        v = tape.sub(nu_col, lse)?;
        done += 1;
        if done >= iters {
            break;
        }
        if tol > 0.0 {
            let zv: Vec<Vec<f64>> = tape.value(z).to_rows();
            let uu = tape.value(u).data().to_vec();
            let vv = tape.value(v).data().to_vec();
            if row_violation(&zv, &uu, &vv, &mu) < tol {
                break;
            }
        }
    }
    let zu = tape.add_col(z, u)?;
    let vr = tape.transpose(v);
    let log_p = tape.add_bias(zu, vr)?;
    Ok((log_p, done))
}
