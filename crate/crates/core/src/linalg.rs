//! Small dense linear algebra on row-major `Vec<f64>` buffers.

/// Eigen-decomposition of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymEigen {
    /// Eigenvalues in descending order.
    pub values: Vec<f64>,
    /// `n × n` row-major; column `j` is the unit eigenvector for `values[j]`.
    pub vectors: Vec<f64>,
    pub n: usize,
}

impl SymEigen {
    pub fn vector(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|r| self.vectors[r * self.n + j]).collect()
    }
}

const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi rotations until the off-diagonal Frobenius norm drops below
/// `1e-12` (relative to the full norm, for matrices larger than unit scale).
pub fn sym_eigen(a: &[f64], n: usize) -> SymEigen {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    // symmetrise against round-off in the caller's assembly
    for i in 0..n {
        for j in (i + 1)..n {
            let s = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = s;
            m[j * n + i] = s;
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let total: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = JACOBI_TOL * total.max(1.0);

    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (new_j, &old_j) in order.iter().enumerate() {
        for r in 0..n {
            vectors[r * n + new_j] = v[r * n + old_j];
        }
    }
    SymEigen { values, vectors, n }
}

/// `a [m×k] · b [k×n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aip * b[p * n + j];
            }
        }
    }
    out
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Modified Gram–Schmidt on the columns of `a [rows × cols]`, dropping
/// columns whose residual norm falls below `tol`. Returns the orthonormal
/// columns as a `rows × rank` matrix and the rank.
pub fn orthonormal_columns(a: &[f64], rows: usize, cols: usize, tol: f64) -> (Vec<f64>, usize) {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for c in 0..cols {
        let mut v: Vec<f64> = (0..rows).map(|r| a[r * cols + c]).collect();
        let scale = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if scale <= tol {
            continue;
        }
        // two passes for numerical orthogonality
        for _ in 0..2 {
            for b in &basis {
                let proj: f64 = b.iter().zip(&v).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(vi, bi)| *vi -= proj * bi);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= tol * scale.max(1.0) {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    let rank = basis.len();
    let mut out = vec![0.0; rows * rank];
    for (j, b) in basis.iter().enumerate() {
        for r in 0..rows {
            out[r * rank + j] = b[r];
        }
    }
    (out, rank)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_diagonalises_and_sorts() {
        let a = [4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 1.0];
        let e = sym_eigen(&a, 3);
        assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
        for j in 0..3 {
            let v = e.vector(j);
            let av = matmul(&a, &v, 3, 3, 1);
            for r in 0..3 {
                assert!((av[r] - e.values[j] * v[r]).abs() < 1e-12);
            }
        }
        let trace: f64 = e.values.iter().sum();
        assert!((trace - 8.0).abs() < 1e-12);
    }

    #[test]
    fn rank_one_symmetric() {
        // (1/2)[(1,1)(1,1)ᵀ + (−1,−1)(−1,−1)ᵀ] = [[1,1],[1,1]]
        let e = sym_eigen(&[1.0, 1.0, 1.0, 1.0], 2);
        assert!((e.values[0] - 2.0).abs() < 1e-14);
        assert!(e.values[1].abs() < 1e-14);
    }

    #[test]
    fn gram_schmidt_drops_dependent_columns() {
        let a = [1.0, 2.0, 0.0, 0.0, 0.0, 1.0];
        let (q, rank) = orthonormal_columns(&a, 2, 3, 1e-12);
        assert_eq!(rank, 2);
        let dotp = q[0] * q[1] + q[2] * q[3];
        assert!(dotp.abs() < 1e-15);
    }
}
