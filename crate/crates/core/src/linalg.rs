//! Singular values by one-sided Jacobi rotation.
//!
//! At the matrix sizes used here (≤ 256 per side) Jacobi is accurate to a few
//! ulps relative to the largest singular value and needs no external LAPACK.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest side length accepted by the decomposition.
pub const MAX_DIM: usize = 256;

/// Thin SVD `a = u · diag(s) · vᵀ` with `s` sorted descending.
#[derive(Clone, Debug)]
pub struct Svd {
    /// `m × r`
    pub u: Tensor,
    /// length `r = min(m, n)`
    pub s: Vec<f64>,
    /// `n × r`
    pub v: Tensor,
}

pub fn svd(a: &Tensor) -> Result<Svd> {
    let (m, n) = (a.rows(), a.cols());
    for dim in [m, n] {
        if dim > MAX_DIM {
            return Err(Error::DimensionLimit { dim, limit: MAX_DIM });
        }
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("svd"));
    }
    if m < n {
        let t = svd(&a.transpose())?;
        return Ok(Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        });
    }
    // columns of A and of V, stored column-major for cheap rotations
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.at(i, j)).collect()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let tol = 1e-15;
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = col_products(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<(f64, usize)> = cols
        .iter()
        .enumerate()
        .map(|(j, c)| (crate::tensor::l2_norm(c), j))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut u = Tensor::zeros(&[m, n]);
    let mut v = Tensor::zeros(&[n, n]);
    let mut s = Vec::with_capacity(n);
    for (out_j, &(sigma, j)) in order.iter().enumerate() {
        s.push(sigma);
        for i in 0..m {
            let val = if sigma > 0.0 { cols[j][i] / sigma } else { 0.0 };
            u.set(i, out_j, val);
        }
        for i in 0..n {
            v.set(i, out_j, vcols[j][i]);
        }
    }
    Ok(Svd { u, s, v })
}

fn col_products(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let (mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        aa += x * x;
        bb += y * y;
        ab += x * y;
    }
    (aa, bb, ab)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

pub fn singular_values(a: &Tensor) -> Result<Vec<f64>> {
    Ok(svd(a)?.s)
}

/// Largest singular value (operator 2-norm).
pub fn spectral_norm(a: &Tensor) -> Result<f64> {
    Ok(singular_values(a)?.first().copied().unwrap_or(0.0))
}

/// Smallest singular value of a square matrix.
pub fn min_singular_value(a: &Tensor) -> Result<f64> {
    if a.rows() != a.cols() {
        return Err(Error::ShapeMismatch {
            op: "min_singular_value",
            left: vec![a.rows()],
            right: vec![a.cols()],
        });
    }
    Ok(singular_values(a)?.last().copied().unwrap_or(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::matmul;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Power iteration on AᵀA, used only as an independent check.
    fn power_norm(a: &Tensor) -> f64 {
        let ata = matmul(&a.transpose(), a).unwrap();
        let n = ata.cols();
        let mut x = vec![1.0 / (n as f64).sqrt(); n];
        let mut lambda = 0.0;
        for _ in 0..5000 {
            let mut y = vec![0.0; n];
            crate::tensor::vecmat_into(&x, &ata.transpose(), &mut y);
            let norm = crate::tensor::l2_norm(&y);
            lambda = norm;
            x = y.into_iter().map(|v| v / norm).collect();
        }
        lambda.sqrt()
    }

    #[test]
    fn identity_and_diagonal() {
        let i = Tensor::identity(5);
        assert!((spectral_norm(&i).unwrap() - 1.0).abs() < 1e-15);
        assert!((min_singular_value(&i).unwrap() - 1.0).abs() < 1e-15);
        let d = Tensor::diag(&[2.0, 3.0]);
        assert!((spectral_norm(&d).unwrap() - 3.0).abs() < 1e-15);
        assert!((min_singular_value(&d).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn random_matches_power_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&mut rng, 16, 16);
        let jac = spectral_norm(&a).unwrap();
        let pow = power_norm(&a);
        assert!((jac - pow).abs() / pow < 1e-6, "{jac} vs {pow}");
    }

    #[test]
    fn reconstructs_rectangular() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for (m, n) in [(7, 4), (4, 7), (10, 10)] {
            let a = random(&mut rng, m, n);
            let Svd { u, s, v } = svd(&a).unwrap();
            let back = matmul(&matmul(&u, &Tensor::diag(&s)).unwrap(), &v.transpose()).unwrap();
            for (x, y) in a.data().iter().zip(back.data()) {
                assert!((x - y).abs() < 1e-12);
            }
            assert!(s.windows(2).all(|w| w[0] >= w[1]));
            // orthonormal V
            let vtv = matmul(&v.transpose(), &v).unwrap();
            for i in 0..vtv.rows() {
                for j in 0..vtv.cols() {
                    let e = if i == j { 1.0 } else { 0.0 };
                    assert!((vtv.at(i, j) - e).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn frobenius_identity_on_singular_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = random(&mut rng, 12, 9);
        let s = singular_values(&a).unwrap();
        let sum: f64 = s.iter().map(|x| x * x).sum();
        assert!((sum - a.frobenius().powi(2)).abs() / sum < 1e-12);
    }

    #[test]
    fn rejects_large_and_non_square() {
        assert!(matches!(
            spectral_norm(&Tensor::zeros(&[257, 2])),
            Err(Error::DimensionLimit { .. })
        ));
        assert!(min_singular_value(&Tensor::zeros(&[2, 3])).is_err());
    }
}
