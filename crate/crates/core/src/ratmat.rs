//! Exact rational linear algebra for the small integer systems that arise
//! from the anti-diagonal basis matrices and from moment conditions.
//!
//! All systems here are tiny (at most (m+1) x (m+1)) with small integer
//! entries, so `Ratio<i128>` never comes close to overflow.

use num_rational::Ratio;
use num_traits::{One, Zero};

pub type Rat = Ratio<i128>;

pub fn rat(n: i128, d: i128) -> Rat {
    Ratio::new(n, d)
}

pub fn to_f64(r: &Rat) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Exact inverse by Gauss-Jordan elimination. Returns `None` if singular.
pub fn inverse(a: &[Vec<Rat>]) -> Option<Vec<Vec<Rat>>> {
    let n = a.len();
    if a.iter().any(|row| row.len() != n) {
        return None;
    }
    let mut work: Vec<Vec<Rat>> = a.to_vec();
    let mut inv: Vec<Vec<Rat>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| if i == j { Rat::one() } else { Rat::zero() })
                .collect()
        })
        .collect();
    for col in 0..n {
        let pivot_row = (col..n).find(|&r| !work[r][col].is_zero())?;
        work.swap(col, pivot_row);
        inv.swap(col, pivot_row);
        let pivot = work[col][col];
        for j in 0..n {
            work[col][j] /= pivot;
            inv[col][j] /= pivot;
        }
        for r in 0..n {
            if r != col && !work[r][col].is_zero() {
                let factor = work[r][col];
                for j in 0..n {
                    let w = work[col][j];
                    let v = inv[col][j];
                    work[r][j] -= factor * w;
                    inv[r][j] -= factor * v;
                }
            }
        }
    }
    Some(inv)
}

/// Exact rank of a set of row vectors.
pub fn rank(rows: &[Vec<Rat>]) -> usize {
    if rows.is_empty() {
        return 0;
    }
    let cols = rows[0].len();
    let mut work: Vec<Vec<Rat>> = rows.to_vec();
    let mut rank = 0;
    for col in 0..cols {
        let Some(pivot_row) = (rank..work.len()).find(|&r| !work[r][col].is_zero()) else {
            continue;
        };
        work.swap(rank, pivot_row);
        let pivot = work[rank][col];
        for j in 0..cols {
            work[rank][j] /= pivot;
        }
        for r in 0..work.len() {
            if r != rank && !work[r][col].is_zero() {
                let factor = work[r][col];
                for j in 0..cols {
                    let v = work[rank][j];
                    work[r][j] -= factor * v;
                }
            }
        }
        rank += 1;
        if rank == work.len() {
            break;
        }
    }
    rank
}
