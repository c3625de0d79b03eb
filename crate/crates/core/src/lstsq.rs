//! Least squares by Householder QR with column pivoting. Rank-deficient and
//! underdetermined systems get the minimum-norm solution through a complete
//! orthogonal decomposition.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LstsqSolution {
    pub x: Vec<f64>,
    /// Numerical rank of the system matrix.
    pub rank: usize,
    /// `|R_00| / |R_kk|` over the leading `rank` pivots.
    pub condition: f64,
    pub rank_deficient: bool,
}

/// Householder reflector `I - 2 v v^T` with unit `v`, acting on rows `start..`.
struct Reflector {
    start: usize,
    v: Vec<f64>,
}

impl Reflector {
    /// Builds the reflector that maps `x` onto `alpha * e_0`; returns `alpha`.
    fn new(start: usize, x: &[f64]) -> (Option<Self>, f64) {
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return (None, 0.0);
        }
        let alpha = if x[0] > 0.0 { -norm } else { norm };
        let mut v = x.to_vec();
        v[0] -= alpha;
        let vn = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if vn == 0.0 {
            return (None, x[0]);
        }
        v.iter_mut().for_each(|a| *a /= vn);
        (Some(Reflector { start, v }), alpha)
    }

    fn apply(&self, col: &mut [f64]) {
        let seg = &mut col[self.start..self.start + self.v.len()];
        let d: f64 = seg.iter().zip(&self.v).map(|(a, b)| a * b).sum();
        for (a, b) in seg.iter_mut().zip(&self.v) {
            *a -= 2.0 * d * b;
        }
    }
}

/// QR with column pivoting of a column-major `rows x cols` matrix, in place.
/// Returns the reflectors and the column permutation (`perm[j]` is the
/// original index of column `j`).
fn qr_pivoted(a: &mut [f64], rows: usize, cols: usize) -> (Vec<Reflector>, Vec<usize>) {
    let mut perm: Vec<usize> = (0..cols).collect();
    let mut refl = Vec::new();
    let col_norm2 = |a: &[f64], j: usize, k: usize| a[j * rows + k..(j + 1) * rows].iter().map(|v| v * v).sum::<f64>();
    // partial column norms, downdated after each step and recomputed when
    // cancellation has eaten most of their digits
    let mut norms: Vec<f64> = (0..cols).map(|j| col_norm2(a, j, 0)).collect();
    let mut fresh = norms.clone();
    for k in 0..rows.min(cols) {
        let best = (k..cols)
            .max_by(|&i, &j| norms[i].total_cmp(&norms[j]).then(j.cmp(&i)))
            .expect("k < cols");
        if best != k {
            for r in 0..rows {
                a.swap(k * rows + r, best * rows + r);
            }
            perm.swap(k, best);
            norms.swap(k, best);
            fresh.swap(k, best);
        }
        let (h, alpha) = Reflector::new(k, &a[k * rows + k..(k + 1) * rows]);
        if let Some(h) = h {
            for j in k + 1..cols {
                h.apply(&mut a[j * rows..(j + 1) * rows]);
            }
            refl.push(h);
        }
        a[k * rows + k] = alpha;
        a[k * rows + k + 1..(k + 1) * rows].iter_mut().for_each(|v| *v = 0.0);
        for j in k + 1..cols {
            let top = a[j * rows + k];
            norms[j] -= top * top;
            if norms[j] <= 1e-6 * fresh[j] {
                norms[j] = if k + 1 < rows { col_norm2(a, j, k + 1) } else { 0.0 };
                fresh[j] = norms[j];
            }
        }
    }
    (refl, perm)
}

/// Minimizes `||A x - b||` for a column-major `rows x cols` matrix `A`.
/// Among minimizers the one of smallest norm is returned.
pub fn lstsq(a: &[f64], rows: usize, cols: usize, b: &[f64]) -> Result<LstsqSolution> {
    if rows == 0 || cols == 0 || a.len() != rows * cols || b.len() != rows {
        return Err(Error::shape(format!(
            "least squares needs a {rows}x{cols} matrix ({} values) and {rows} targets, got {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::param("least squares input is not finite"));
    }
    let mut r = a.to_vec();
    let (refl, perm) = qr_pivoted(&mut r, rows, cols);
    let mut qtb = b.to_vec();
    for h in &refl {
        h.apply(&mut qtb);
    }
    let diag = |k: usize| r[k * rows + k].abs();
    let steps = rows.min(cols);
    let r00 = diag(0);
    let tol = r00 * f64::EPSILON * rows.max(cols) as f64;
    let rank = if r00 == 0.0 { 0 } else { (0..steps).take_while(|&k| diag(k) > tol).count() };
    let mut x = vec![0.0; cols];
    if rank == 0 {
        return Ok(LstsqSolution {
            x,
            rank,
            condition: f64::INFINITY,
            rank_deficient: true,
        });
    }
    let condition = r00 / diag(rank - 1);
    let z = if rank == cols {
        // back substitution on the leading square block
        let mut z = qtb[..cols].to_vec();
        for i in (0..cols).rev() {
            let s: f64 = (i + 1..cols).map(|j| r[j * rows + i] * z[j]).sum();
            z[i] = (z[i] - s) / r[i * rows + i];
        }
        z
    } else {
        // R_top (rank x cols) = L^T Z^T from the QR of its transpose; the
        // minimum-norm solution of R_top z = c is Z L^-T c.
        let mut t = vec![0.0; cols * rank];
        for i in 0..rank {
            for j in i..cols {
                t[i * cols + j] = r[j * rows + i];
            }
        }
        let mut zrefl = Vec::new();
        for k in 0..rank {
            let (h, alpha) = Reflector::new(k, &t[k * cols + k..(k + 1) * cols]);
            if let Some(h) = h {
                for j in k + 1..rank {
                    h.apply(&mut t[j * cols..(j + 1) * cols]);
                }
                zrefl.push(h);
            }
            t[k * cols + k] = alpha;
            t[k * cols + k + 1..(k + 1) * cols].iter_mut().for_each(|v| *v = 0.0);
        }
        // forward substitution: L^T y = c with L = t[0..rank, 0..rank] upper triangular
        let mut y = vec![0.0; cols];
        for i in 0..rank {
            let s: f64 = (0..i).map(|j| t[i * cols + j] * y[j]).sum();
            y[i] = (qtb[i] - s) / t[i * cols + i];
        }
        for h in zrefl.iter().rev() {
            h.apply(&mut y);
        }
        y
    };
    for (j, &orig) in perm.iter().enumerate() {
        x[orig] = z[j];
    }
    Ok(LstsqSolution {
        x,
        rank,
        condition,
        rank_deficient: rank < cols,
    })
}
