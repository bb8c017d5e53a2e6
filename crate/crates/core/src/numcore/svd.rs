use crate::error::{invalid, Result};

use super::tensor::Tensor;

/// Rank-`r` factors `M ≈ U · diag(S) · Vᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedSvd {
    /// `[m, r]`.
    pub u: Tensor,
    pub s: Vec<f32>,
    /// `[n, r]`.
    pub v: Tensor,
    pub rank: usize,
}

impl TruncatedSvd {
    pub fn rows(&self) -> usize {
        self.u.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.v.shape()[0]
    }

    /// Floats needed to ship the factors: `m·r + r + r·n`.
    pub fn float_count(&self) -> usize {
        self.rank * (self.rows() + 1 + self.cols())
    }

    pub fn reconstruct(&self) -> Tensor {
        let (m, n, r) = (self.rows(), self.cols(), self.rank);
        let (u, v) = (self.u.data(), self.v.data());
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for k in 0..r {
                    acc += u[i * r + k] as f64 * self.s[k] as f64 * v[j * r + k] as f64;
                }
                out[i * n + j] = acc as f32;
            }
        }
        Tensor::matrix(m, n, out).expect("factor shapes agree")
    }
}

const SWEEPS: usize = 60;

/// Truncated SVD keeping the smallest rank whose squared singular values
/// reach `energy` of the total.
///
/// Computed by one-sided Jacobi rotations in `f64`. An all-zero matrix gives
/// rank 0 and empty factors.
pub fn truncated_svd(m: &Tensor, energy: f64) -> Result<TruncatedSvd> {
    let (rows, cols) = m.dims2()?;
    if !(energy > 0.0 && energy <= 1.0) {
        return Err(invalid(format!("svd energy {energy} outside (0, 1]")));
    }
    if !m.is_finite() {
        return Err(invalid("svd input contains non-finite values"));
    }
    let data: Vec<f64> = m.data().iter().map(|&v| v as f64).collect();
    // Work on the tall orientation so rotations act on the short side.
    let transposed = rows < cols;
    let (h, w, a) = if transposed {
        (cols, rows, transpose(&data, rows, cols))
    } else {
        (rows, cols, data)
    };
    let (left, sigma, right) = jacobi(a, h, w);
    let (u_full, v_full) = if transposed { (right, left) } else { (left, right) };
    let (urows, vrows) = (rows, cols);

    let total: f64 = sigma.iter().map(|s| s * s).sum();
    let smax = sigma.first().copied().unwrap_or(0.0);
    let tol = smax * f64::EPSILON * (rows.max(cols) as f64);
    let mut rank = 0;
    if total > 0.0 {
        let mut cum = 0.0;
        for s in &sigma {
            if *s <= tol {
                break;
            }
            cum += s * s;
            rank += 1;
            if cum >= energy * total * (1.0 - 1e-12) {
                break;
            }
        }
    }
    let k = w;
    let pick = |full: &[f64], n: usize| -> Vec<f32> {
        let mut out = Vec::with_capacity(n * rank);
        for i in 0..n {
            for j in 0..rank {
                out.push(full[i * k + j] as f32);
            }
        }
        out
    };
    Ok(TruncatedSvd {
        u: Tensor::matrix(urows, rank, pick(&u_full, urows))?,
        s: sigma[..rank].iter().map(|&s| s as f32).collect(),
        v: Tensor::matrix(vrows, rank, pick(&v_full, vrows))?,
        rank,
    })
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// Hestenes one-sided Jacobi on a tall `h × w` matrix. Returns
/// `(U: h×w, σ: w, V: w×w)` with singular values sorted descending.
fn jacobi(mut a: Vec<f64>, h: usize, w: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; w * w];
    for i in 0..w {
        v[i * w + i] = 1.0;
    }
    for _ in 0..SWEEPS {
        let mut rotated = false;
        for p in 0..w {
            for q in p + 1..w {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..h {
                    let (x, y) = (a[i * w + p], a[i * w + q]);
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..h {
                    let (x, y) = (a[i * w + p], a[i * w + q]);
                    a[i * w + p] = c * x - s * y;
                    a[i * w + q] = s * x + c * y;
                }
                for i in 0..w {
                    let (x, y) = (v[i * w + p], v[i * w + q]);
                    v[i * w + p] = c * x - s * y;
                    v[i * w + q] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..w)
        .map(|j| (0..h).map(|i| a[i * w + j] * a[i * w + j]).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..w).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]).then(x.cmp(&y)));
    let mut u = vec![0.0; h * w];
    let mut vs = vec![0.0; w * w];
    let mut sigma = Vec::with_capacity(w);
    for (dst, &src) in order.iter().enumerate() {
        let n = norms[src];
        sigma.push(n);
        for i in 0..h {
            u[i * w + dst] = if n > 0.0 { a[i * w + src] / n } else { 0.0 };
        }
        for i in 0..w {
            vs[i * w + dst] = v[i * w + src];
        }
    }
    (u, sigma, vs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rank_one_outer_product() {
        let m = Tensor::matrix(2, 2, vec![3.0, 4.0, 6.0, 8.0]).unwrap();
        let f = truncated_svd(&m, 0.9).unwrap();
        assert_eq!(f.rank, 1);
        for (a, b) in f.reconstruct().data().iter().zip(m.data()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-5);
        }
    }

    #[test]
    fn identity_needs_full_rank() {
        let mut d = vec![0.0; 16];
        for i in 0..4 {
            d[i * 5] = 1.0;
        }
        let f = truncated_svd(&Tensor::matrix(4, 4, d).unwrap(), 1.0).unwrap();
        assert_eq!(f.rank, 4);
    }

    #[test]
    fn zero_matrix_is_rank_zero() {
        let f = truncated_svd(&Tensor::zeros(vec![3, 2]), 0.95).unwrap();
        assert_eq!(f.rank, 0);
        assert_eq!(f.float_count(), 0);
        assert_eq!(f.reconstruct().data(), &[0.0; 6]);
    }

    #[test]
    fn wide_matrix_round_trip() {
        let m = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0]).unwrap();
        let f = truncated_svd(&m, 1.0).unwrap();
        assert_eq!(f.rank, 2);
        assert_eq!(f.u.shape(), &[2, 2]);
        assert_eq!(f.v.shape(), &[3, 2]);
        for (a, b) in f.reconstruct().data().iter().zip(m.data()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-5);
        }
    }

    #[test]
    fn rejects_bad_energy() {
        let m = Tensor::zeros(vec![2, 2]);
        assert!(truncated_svd(&m, 0.0).is_err());
        assert!(truncated_svd(&m, 1.5).is_err());
    }
}
