//! One-sided Jacobi SVD and PCA built on it.

use crate::error::{HvplError, Result};

use super::matrix::dot;
use super::Matrix;

pub const MAX_SWEEPS: usize = 100;
const ROTATION_TOL: f64 = 1e-12;

/// Thin SVD `m = U · diag(S) · Vᵀ`.
///
/// For an `r × c` input with `k = min(r, c)`: `U` is `r × k`, `S` has `k`
/// entries sorted descending, `V` is `c × k`.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (c, s) in self.s.iter().enumerate() {
                let v = us.get(r, c) * s;
                us.set(r, c, v);
            }
        }
        us.matmul_t(&self.v).expect("conformable by construction")
    }

    /// Number of singular values above `rel_tol · S_max`.
    pub fn numerical_rank(&self, rel_tol: f64) -> usize {
        let max = self.s.first().copied().unwrap_or(0.0);
        self.s.iter().filter(|&&s| s > rel_tol * max && s > 0.0).count()
    }

    /// `V` completed to a square orthonormal matrix; appended columns span
    /// the null space and correspond to zero singular values.
    pub fn full_v(&self) -> Matrix {
        complete_orthonormal(&self.v)
    }
}

pub fn svd(m: &Matrix) -> Result<Svd> {
    if !m.is_finite() {
        return Err(HvplError::Numeric("svd input contains non-finite values".into()));
    }
    if m.rows() >= m.cols() {
        jacobi_tall(m)
    } else {
        let t = jacobi_tall(&m.transpose())?;
        Ok(Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        })
    }
}

/// One-sided Jacobi on the columns of a matrix with `rows >= cols`.
fn jacobi_tall(m: &Matrix) -> Result<Svd> {
    let (rows, n) = m.shape();
    // cols[i] holds column i of the working matrix, vcols[i] column i of V.
    let at = m.transpose();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|i| at.row(i).to_vec()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            e
        })
        .collect();

    let mut converged = n < 2;
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let alpha = dot(&cols[i], &cols[i]);
                let beta = dot(&cols[j], &cols[j]);
                let gamma = dot(&cols[i], &cols[j]);
                if gamma == 0.0 || gamma.abs() <= ROTATION_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, i, j, c, s);
                rotate(&mut vcols, i, j, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(HvplError::NoConvergence { sweeps: MAX_SWEEPS });
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let smax = order.first().map_or(0.0, |&i| norms[i]);

    let mut u = Matrix::zeros(rows, n);
    let mut v = Matrix::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    let mut defined = 0;
    for (k, &i) in order.iter().enumerate() {
        let sigma = norms[i];
        s.push(sigma);
        for r in 0..n {
            v.set(r, k, vcols[i][r]);
        }
        if sigma > 0.0 && sigma > smax * 1e-13 {
            for r in 0..rows {
                u.set(r, k, cols[i][r] / sigma);
            }
            defined = k + 1;
        }
    }
    if defined < n {
        // Columns with (numerically) zero singular values: fill U with an
        // orthonormal completion of the defined columns.
        let head = u.slice_cols(0, defined)?;
        let full = complete_orthonormal(&head);
        for k in defined..n {
            for r in 0..rows {
                u.set(r, k, full.get(r, k));
            }
        }
    }
    Ok(Svd { u, s, v })
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(j);
    let (a, b) = (&mut lo[i], &mut hi[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let xi = *x;
        let yj = *y;
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}

/// Extends the orthonormal columns of `basis` (`n × k`) to an `n × n`
/// orthonormal matrix using twice-applied modified Gram–Schmidt over the
/// standard basis vectors, taking the largest residual first.
pub fn complete_orthonormal(basis: &Matrix) -> Matrix {
    let (n, k) = basis.shape();
    let mut cols: Vec<Vec<f64>> = (0..k).map(|c| basis.column(c)).collect();
    let mut used = vec![false; n];
    while cols.len() < n {
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for (e, taken) in used.iter().enumerate() {
            if *taken {
                continue;
            }
            let mut v = vec![0.0; n];
            v[e] = 1.0;
            for _ in 0..2 {
                for c in &cols {
                    let p = dot(&v, c);
                    for (x, y) in v.iter_mut().zip(c) {
                        *x -= p * y;
                    }
                }
            }
            let norm = dot(&v, &v).sqrt();
            if best.as_ref().is_none_or(|(b, _, _)| norm > *b) {
                best = Some((norm, e, v));
            }
        }
        let (norm, e, mut v) = best.expect("fewer than n columns leaves a candidate");
        used[e] = true;
        for x in v.iter_mut() {
            *x /= norm;
        }
        cols.push(v);
    }
    let mut out = Matrix::zeros(n, n);
    for (c, col) in cols.iter().enumerate() {
        for (r, v) in col.iter().enumerate() {
            out.set(r, c, *v);
        }
    }
    out
}

/// Result of [`pca_reduce`].
#[derive(Clone, Debug)]
pub struct Pca {
    /// Centered rows projected on the principal directions (`n × k`).
    pub reduced: Matrix,
    /// Principal directions as orthonormal columns (`d × k`).
    pub basis: Matrix,
    pub mean: Vec<f64>,
    /// Fraction of the total variance captured by the `k` directions.
    pub explained_variance: f64,
}

impl Pca {
    pub fn reconstruct(&self) -> Matrix {
        let mut back = self.reduced.matmul_t(&self.basis).expect("conformable");
        for r in 0..back.rows() {
            for (v, m) in back.row_mut(r).iter_mut().zip(&self.mean) {
                *v += m;
            }
        }
        back
    }
}

pub fn pca_reduce(rows: &Matrix, k: usize) -> Result<Pca> {
    let (n, d) = rows.shape();
    if k > d {
        return Err(HvplError::shape(
            "pca_reduce",
            format!("k = {k} exceeds feature dimension {d}"),
        ));
    }
    if n < 2 {
        return Err(HvplError::shape("pca_reduce", "need at least two rows"));
    }
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(rows.row(r)) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut centered = rows.clone();
    for r in 0..n {
        for (v, m) in centered.row_mut(r).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let dec = svd(&centered)?;
    let v_full = dec.full_v();
    let basis = v_full.slice_cols(0, k)?;
    let reduced = centered.matmul(&basis)?;
    let total: f64 = dec.s.iter().map(|s| s * s).sum();
    let kept: f64 = dec.s.iter().take(k).map(|s| s * s).sum();
    let explained_variance = if total > 0.0 { kept / total } else { 1.0 };
    Ok(Pca {
        reduced,
        basis,
        mean,
        explained_variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_matrix, stream};

    fn orthonormality_error(m: &Matrix) -> f64 {
        let g = m.t_matmul(m).unwrap();
        g.max_abs_diff(&Matrix::identity(m.cols())).unwrap()
    }

    #[test]
    fn identity_singular_values() {
        let d = svd(&Matrix::identity(4)).unwrap();
        assert_eq!(d.s, vec![1.0; 4]);
    }

    #[test]
    fn diagonal_singular_values() {
        let d = svd(&Matrix::diag(&[1.0, 3.0, 2.0])).unwrap();
        assert_eq!(d.s, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn random_reconstruction_and_orthonormality() {
        let mut rng = stream(7, "svd");
        for (r, c) in [(6, 4), (4, 6), (20, 20), (3, 1)] {
            let m = gaussian_matrix(&mut rng, r, c, 1.0);
            let d = svd(&m).unwrap();
            let resid = d.reconstruct().sub(&m).unwrap().frobenius_norm();
            assert!(resid <= 1e-8 * m.frobenius_norm(), "{r}x{c}: {resid}");
            assert!(orthonormality_error(&d.u) < 1e-10);
            assert!(orthonormality_error(&d.v) < 1e-10);
            assert!(d.s.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn rank_deficient_keeps_orthonormal_u() {
        let mut rng = stream(8, "svd");
        let g1 = gaussian_matrix(&mut rng, 12, 3, 1.0);
        let g2 = gaussian_matrix(&mut rng, 3, 8, 1.0);
        let m = g1.matmul(&g2).unwrap();
        let d = svd(&m).unwrap();
        assert_eq!(d.numerical_rank(1e-8), 3);
        assert!(orthonormality_error(&d.u) < 1e-10);
        assert!(orthonormality_error(&d.full_v()) < 1e-10);
        let zero = svd(&Matrix::zeros(3, 2)).unwrap();
        assert_eq!(zero.s, vec![0.0, 0.0]);
        assert!(orthonormality_error(&zero.u) < 1e-12);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut m = Matrix::zeros(2, 2);
        m.set(0, 0, f64::NAN);
        assert!(matches!(svd(&m), Err(HvplError::Numeric(_))));
    }

    #[test]
    fn pca_on_a_line_captures_everything() {
        let dir = [1.0, -2.0, 0.5];
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|i| dir.iter().map(|d| d * (i as f64 - 3.0) + 1.0).collect())
            .collect();
        let p = pca_reduce(&Matrix::from_rows(&rows).unwrap(), 1).unwrap();
        assert!(p.explained_variance >= 0.99999);
        assert_eq!(p.reduced.cols(), 1);
    }

    #[test]
    fn pca_full_rank_reconstructs() {
        let mut rng = stream(9, "pca");
        let m = gaussian_matrix(&mut rng, 10, 5, 1.0);
        let p = pca_reduce(&m, 5).unwrap();
        assert!(p.reconstruct().max_abs_diff(&m).unwrap() < 1e-8);
        assert!(orthonormality_error(&p.basis) < 1e-10);
    }

    #[test]
    fn pca_explained_variance_matches_singular_values() {
        let mut rng = stream(10, "pca");
        let m = gaussian_matrix(&mut rng, 20, 8, 1.0);
        let p = pca_reduce(&m, 2).unwrap();
        // Oracle: variance of the reduced coordinates over the total variance.
        let mean: Vec<f64> = (0..8).map(|c| m.column(c).iter().sum::<f64>() / 20.0).collect();
        let total: f64 = (0..20)
            .map(|r| m.row(r).iter().zip(&mean).map(|(v, mu)| (v - mu).powi(2)).sum::<f64>())
            .sum();
        let kept = p.reduced.frobenius_norm().powi(2);
        assert!((p.explained_variance - kept / total).abs() < 1e-12);
    }

    #[test]
    fn pca_rejects_large_k() {
        assert!(matches!(
            pca_reduce(&Matrix::zeros(4, 3), 4),
            Err(HvplError::Shape { .. })
        ));
    }
}
