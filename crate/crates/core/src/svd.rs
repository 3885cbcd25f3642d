//! One-sided Jacobi singular values.

use crate::error::{MhlaError, Result};
use crate::tensor::{dot, DenseMatrix};

pub const MAX_SWEEPS: usize = 100;
const ORTHOGONALITY_TOL: f64 = 1e-12;

/// Singular values in descending order, `min(rows, cols)` of them.
///
/// Columns of the (possibly transposed) input are rotated pairwise until
/// every pair is orthogonal to `1e-12` relative to the product of their
/// norms, or the pair's inner product falls below `(1e-12 * ||m||_F)^2`.
/// The singular values are then the final column norms.
pub fn singular_values(m: &DenseMatrix) -> Result<Vec<f64>> {
    // Orthogonalize along the shorter dimension, one Vec per column.
    let count = m.cols().min(m.rows());
    if count == 0 {
        return Ok(Vec::new());
    }
    let mut cols: Vec<Vec<f64>> = if m.cols() <= m.rows() {
        let t = m.transpose();
        (0..count).map(|j| t.row(j).to_vec()).collect()
    } else {
        (0..count).map(|i| m.row(i).to_vec()).collect()
    };

    let fro = m.frobenius_norm();
    if fro == 0.0 {
        return Ok(vec![0.0; count]);
    }
    let abs_floor = (ORTHOGONALITY_TOL * fro).powi(2);
    let mut norms: Vec<f64> = cols.iter().map(|c| dot(c, c)).collect();

    let mut converged = false;
    let mut residual = 0.0f64;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        residual = 0.0;
        for p in 0..count.saturating_sub(1) {
            for q in (p + 1)..count {
                let alpha = norms[p];
                let beta = norms[q];
                let (left, right) = cols.split_at_mut(q);
                let cp = &mut left[p];
                let cq = &mut right[0];
                let gamma = dot(cp, cq);
                let scale = (alpha * beta).sqrt();
                if gamma.abs() <= abs_floor || gamma.abs() <= ORTHOGONALITY_TOL * scale {
                    continue;
                }
                residual = residual.max(gamma.abs() / scale);
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
                    let xp = *x;
                    let yq = *y;
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
                norms[p] = dot(cp, cp);
                norms[q] = dot(cq, cq);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(MhlaError::SvdNoConvergence {
            sweeps: MAX_SWEEPS,
            residual,
        });
    }
    let mut sigma: Vec<f64> = norms.iter().map(|&n| n.max(0.0).sqrt()).collect();
    sigma.sort_by(|a, b| b.total_cmp(a));
    Ok(sigma)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_has_unit_values() {
        assert_eq!(
            singular_values(&DenseMatrix::identity(3)).unwrap(),
            vec![1.0; 3]
        );
    }

    #[test]
    fn diagonal_values_sorted() {
        let m = DenseMatrix::from_rows(&[[3.0, 0.0], [0.0, 4.0]]).unwrap();
        assert_eq!(singular_values(&m).unwrap(), vec![4.0, 3.0]);
    }

    #[test]
    fn rank_one_outer_product() {
        let u = [0.6, 0.8, 0.0];
        let v = [1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt()];
        let rows: Vec<Vec<f64>> = u
            .iter()
            .map(|&a| v.iter().map(|&b| a * b).collect())
            .collect();
        let s = singular_values(&DenseMatrix::from_rows(&rows).unwrap()).unwrap();
        assert_eq!(s.len(), 2);
        assert!((s[0] - 1.0).abs() < 1e-14);
        assert!(s[1] < 1e-15);
    }

    #[test]
    fn zero_and_empty() {
        assert_eq!(
            singular_values(&DenseMatrix::zeros(2, 3)).unwrap(),
            vec![0.0; 2]
        );
        assert!(singular_values(&DenseMatrix::zeros(0, 3))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn wide_matrix_uses_shorter_side() {
        let m = DenseMatrix::from_rows(&[[1.0, 0.0, 0.0, 0.0], [0.0, 2.0, 0.0, 0.0]]).unwrap();
        assert_eq!(singular_values(&m).unwrap(), vec![2.0, 1.0]);
    }
}
