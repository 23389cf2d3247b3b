//! Independent oracles for the acceptance suite in `tests/acceptance.rs`.
//! Nothing here calls into the code it checks beyond building matrices.

use decompnet::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
#[allow(clippy::needless_range_loop)]
pub fn symmetric_eigenvalues(a: &Matrix) -> Vec<f64> {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (m[k][p], m[k][q]);
                    m[k][p] = c * akp - s * akq;
                    m[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * apk - s * aqk;
                    m[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[i][i]).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

/// Orthonormal `n × k` matrix by Gram-Schmidt on random columns.
pub fn random_orthonormal(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < k {
        let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        for _ in 0..2 {
            for c in &cols {
                let p: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(c) {
                    *x -= p * y;
                }
            }
        }
        let nrm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nrm > 1e-3 {
            cols.push(v.into_iter().map(|x| x / nrm).collect());
        }
    }
    Matrix::from_fn(n, k, |i, j| cols[j][i])
}

/// `U diag(s) Vᵀ` with random orthonormal factors.
pub fn with_singular_values(m: usize, n: usize, s: &[f64], rng: &mut ChaCha8Rng) -> Matrix {
    let k = s.len();
    let u = random_orthonormal(m, k, rng);
    let v = random_orthonormal(n, k, rng);
    Matrix::from_fn(m, n, |i, j| {
        (0..k).map(|t| u.get(i, t) * s[t] * v.get(j, t)).sum()
    })
}

/// Descending singular values whose consecutive gaps are at least `min_gap`.
pub fn separated_spectrum(k: usize, min_gap: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut s = Vec::with_capacity(k);
    let mut cur = rng.random_range(0.05..0.5);
    for _ in 0..k {
        s.push(cur);
        cur += min_gap + rng.random_range(0.0..1.0);
    }
    s.reverse();
    s
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn central_difference(x: &Matrix, h: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for k in 0..x.data().len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[k] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[k] = orig;
        grad.data_mut()[k] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Largest componentwise `|a - b| / max(|a|, |b|, 1)`.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Standard error of the mean with the `n − 1` sample variance.
pub fn standard_error(v: &[f64]) -> f64 {
    let m = mean(v);
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
    (var / v.len() as f64).sqrt()
}

/// Largest singular value as the root of the top eigenvalue of `WᵀW`.
pub fn spectral_norm(w: &Matrix) -> f64 {
    symmetric_eigenvalues(&w.transpose().matmul(w))[0]
        .max(0.0)
        .sqrt()
}

/// Singular values as roots of the eigenvalues of the smaller Gram matrix.
pub fn singular_values(w: &Matrix) -> Vec<f64> {
    let gram = if w.rows() >= w.cols() {
        w.transpose().matmul(w)
    } else {
        w.matmul(&w.transpose())
    };
    symmetric_eigenvalues(&gram)
        .into_iter()
        .map(|e| e.max(0.0).sqrt())
        .collect()
}
