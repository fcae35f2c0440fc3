use crate::batch::SampleBatch;
use crate::error::{FlowError, Result};
use crate::scalar::Real;

/// Largest batch the assignment solver accepts.
pub const MAX_OT_BATCH: usize = 512;

/// Minibatch OT coupling: the permutation `pi` minimizing
/// `sum_i |x0_i - x1_pi(i)|^2`, so `x0[i]` pairs with `x1[pi[i]]`.
pub fn ot_pair<T: Real>(x0: &SampleBatch<T>, x1: &SampleBatch<T>) -> Result<Vec<usize>> {
    x0.check_same_shape(x1, "coupled batch")?;
    let n = x0.len();
    if n > MAX_OT_BATCH {
        return Err(FlowError::Config(format!("OT coupling supports at most {MAX_OT_BATCH} pairs, got {n}")));
    }
    let cost: Vec<f64> = x0
        .rows()
        .flat_map(|a| {
            x1.rows()
                .map(move |b| a.iter().zip(b).map(|(&p, &q)| (p - q).as_f64().powi(2)).sum())
        })
        .collect();
    Ok(assign(&cost, n))
}

pub fn coupling_cost<T: Real>(x0: &SampleBatch<T>, x1: &SampleBatch<T>, perm: &[usize]) -> f64 {
    perm.iter()
        .enumerate()
        .map(|(i, &j)| x0.row(i).iter().zip(x1.row(j)).map(|(&p, &q)| (p - q).as_f64().powi(2)).sum::<f64>())
        .sum()
}

/// Hungarian algorithm with potentials, `O(n^3)`, on a row-major `n x n`
/// cost matrix. Returns the column assigned to each row. Strict comparisons
/// make the lowest column index win ties.
pub(crate) fn assign(cost: &[f64], n: usize) -> Vec<usize> {
    let a = |i: usize, j: usize| cost[(i - 1) * n + (j - 1)];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    // p[j]: row matched to column j (1-based, 0 = none)
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[p[j] - 1] = j - 1;
    }
    perm
}
