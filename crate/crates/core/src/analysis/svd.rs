use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Thin singular value decomposition `A = U diag(s) Vᵀ` with `k = min(m, n)`
/// components, singular values descending.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `m × k`, orthonormal columns (zero columns for zero singular values).
    pub u: Tensor,
    pub singular_values: Vec<f64>,
    /// `n × k`, orthonormal columns.
    pub v: Tensor,
}

impl Svd {
    /// `Σ_{i<r} σᵢ uᵢ vᵢᵀ`.
    pub fn reconstruct(&self, r: usize) -> Tensor {
        let (m, k) = (self.u.shape()[0], self.u.shape()[1]);
        let n = self.v.shape()[0];
        let mut out = Tensor::zeros(&[m, n]);
        let data = out.data_mut();
        for c in 0..r.min(k) {
            let s = self.singular_values[c];
            if s == 0.0 {
                continue;
            }
            for i in 0..m {
                let ui = s * self.u.at(i, c);
                if ui == 0.0 {
                    continue;
                }
                for j in 0..n {
                    data[i * n + j] += ui * self.v.at(j, c);
                }
            }
        }
        out
    }
}

const MAX_SWEEPS: usize = 80;

/// One-sided (Hestenes) Jacobi SVD. Deterministic: a fixed cyclic pivot
/// order, sweeping until no pair of columns is measurably non-orthogonal.
pub fn svd(matrix: &Tensor) -> Result<Svd> {
    if matrix.shape().len() != 2 {
        return Err(Error::Analysis(format!(
            "expected a matrix, got shape {:?}",
            matrix.shape()
        )));
    }
    if !matrix.is_finite() {
        return Err(Error::Analysis("matrix has non-finite entries".into()));
    }
    let (m, n) = (matrix.shape()[0], matrix.shape()[1]);
    if m == 0 || n == 0 {
        return Err(Error::Analysis("matrix is empty".into()));
    }
    if m < n {
        let t = svd(&matrix.transpose())?;
        return Ok(Svd {
            u: t.v,
            singular_values: t.singular_values,
            v: t.u,
        });
    }

    // Columns of A and V, stored column-major for cache-friendly rotations.
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..m).map(|i| matrix.at(i, j)).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| (i == j) as u8 as f64).collect())
        .collect();
    let tol = f64::EPSILON * m as f64;

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = a[p]
                    .iter()
                    .zip(&a[q])
                    .fold((0.0, 0.0, 0.0), |(x, y, z), (&ap, &aq)| {
                        (x + ap * ap, y + aq * aq, z + ap * aq)
                    });
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sigma: Vec<f64> = a
        .iter()
        .map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));
    let mut u = Tensor::zeros(&[m, n]);
    let mut vt = Tensor::zeros(&[n, n]);
    for (c, &j) in order.iter().enumerate() {
        let s = sigma[j];
        if s > 0.0 {
            for (i, x) in a[j].iter().enumerate() {
                u.data_mut()[i * n + c] = x / s;
            }
        }
        for (i, x) in v[j].iter().enumerate() {
            vt.data_mut()[i * n + c] = *x;
        }
    }
    sigma = order.iter().map(|&j| sigma[j]).collect();
    Ok(Svd {
        u,
        singular_values: sigma,
        v: vt,
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitRng;

    fn check(a: &Tensor, tol: f64) {
        let d = svd(a).unwrap();
        let k = d.singular_values.len();
        assert!(d.singular_values.windows(2).all(|w| w[0] >= w[1]));
        assert!(d.singular_values.iter().all(|&s| s >= 0.0));
        assert!(d.reconstruct(k).max_abs_diff(a) < tol);
        let vtv = d.v.transpose().matmul(&d.v).unwrap();
        assert!(vtv.max_abs_diff(&Tensor::identity(k)) < tol);
    }

    #[test]
    fn random_and_rectangular() {
        let mut rng = SplitRng::new(3);
        check(&Tensor::randn(&[30, 30], 1.0, &mut rng), 1e-10);
        check(&Tensor::randn(&[12, 7], 1.0, &mut rng), 1e-10);
        check(&Tensor::randn(&[5, 9], 1.0, &mut rng), 1e-10);
    }

    #[test]
    fn large_matrix_exactness() {
        let mut rng = SplitRng::new(11);
        check(&Tensor::randn(&[200, 200], 1.0, &mut rng), 1e-10);
    }

    #[test]
    fn rank_deficient() {
        let a = Tensor::from_rows(&[
            vec![1.0, 2.0, 3.0],
            vec![2.0, 4.0, 6.0],
            vec![0.0, 0.0, 0.0],
        ])
        .unwrap();
        let d = svd(&a).unwrap();
        assert!((d.singular_values[0] - 14f64.sqrt() * 5f64.sqrt()).abs() < 1e-12);
        assert!(d.singular_values[1].abs() < 1e-12);
        assert!(d.reconstruct(1).max_abs_diff(&a) < 1e-12);
    }

    #[test]
    fn non_finite_rejected() {
        let a = Tensor::from_rows(&[vec![1.0, f64::NAN]]).unwrap();
        assert!(matches!(svd(&a), Err(Error::Analysis(_))));
    }
}
