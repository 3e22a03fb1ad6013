//! Cyclic Jacobi eigen-decomposition of small symmetric matrices.

use super::DecompositionError;

pub const OFF_DIAGONAL_TOLERANCE: f64 = 1e-12;
pub const MAX_SWEEPS: usize = 100;

/// Eigenpairs in descending eigenvalue order. `vectors[i][j]` is the loading of
/// variable `i` on component `j`; each column's largest-magnitude loading is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Eigen {
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
    pub sweeps: usize,
}

fn off_diagonal_norm(a: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i != j {
                s += v * v;
            }
        }
    }
    s.sqrt()
}

fn validate(a: &[Vec<f64>]) -> Result<(), DecompositionError> {
    let k = a.len();
    if k == 0 || a.iter().any(|r| r.len() != k) {
        return Err(DecompositionError::InsufficientData("matrix must be square and non-empty".into()));
    }
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    for i in 0..k {
        for j in 0..k {
            if !a[i][j].is_finite() {
                return Err(DecompositionError::InsufficientData("matrix has non-finite entries".into()));
            }
            if (a[i][j] - a[j][i]).abs() > 1e-12 * scale.max(1.0) {
                return Err(DecompositionError::InsufficientData("matrix is not symmetric".into()));
            }
        }
    }
    Ok(())
}

/// Sweeps until the off-diagonal Frobenius norm is at most
/// [`OFF_DIAGONAL_TOLERANCE`] times the matrix norm.
pub fn symmetric_eigen(matrix: &[Vec<f64>]) -> Result<Eigen, DecompositionError> {
    validate(matrix)?;
    let k = matrix.len();
    let mut a: Vec<Vec<f64>> = matrix.to_vec();
    let mut v: Vec<Vec<f64>> = (0..k).map(|i| (0..k).map(|j| (i == j) as u8 as f64).collect()).collect();
    let norm = a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();

    let mut sweeps = 0;
    while off_diagonal_norm(&a) > OFF_DIAGONAL_TOLERANCE * norm {
        if sweeps == MAX_SWEEPS {
            return Err(DecompositionError::NotConverged(MAX_SWEEPS));
        }
        sweeps += 1;
        for p in 0..k {
            for q in p + 1..k {
                if a[p][q] == 0.0 {
                    continue;
                }
                let tau = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for row in a.iter_mut() {
                    let (rp, rq) = (row[p], row[q]);
                    row[p] = c * rp - s * rq;
                    row[q] = s * rp + c * rq;
                }
                for col in 0..k {
                    let (pr, qr) = (a[p][col], a[q][col]);
                    a[p][col] = c * pr - s * qr;
                    a[q][col] = s * pr + c * qr;
                }
                a[p][q] = 0.0;
                a[q][p] = 0.0;
                for row in v.iter_mut() {
                    let (rp, rq) = (row[p], row[q]);
                    row[p] = c * rp - s * rq;
                    row[q] = s * rp + c * rq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let mut vectors = vec![vec![0.0; k]; k];
    for (dst, &src) in order.iter().enumerate() {
        let mut pivot = 0;
        for i in 1..k {
            if v[i][src].abs() > v[pivot][src].abs() {
                pivot = i;
            }
        }
        let sign = if v[pivot][src] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..k {
            vectors[i][dst] = sign * v[i][src];
        }
    }
    Ok(Eigen { values, vectors, sweeps })
}
