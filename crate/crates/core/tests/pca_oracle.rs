use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use soilmark_core::decomposition::{explained_variance, pca, symmetric_eigen, PcaMode};
use soilmark_core::raster::{BandDescriptor, GeoTransform, RasterGrid};

type Matrix = Vec<Vec<f64>>;

fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let n = a.len();
    (0..n).map(|i| (0..n).map(|j| (0..n).map(|k| a[i][k] * b[k][j]).sum()).collect()).collect()
}

/// Characteristic polynomial coefficients, lowest degree first (Faddeev–LeVerrier).
fn characteristic_polynomial(a: &Matrix) -> Vec<f64> {
    let n = a.len();
    let mut c = vec![0.0; n + 1];
    c[n] = 1.0;
    let mut m = vec![vec![0.0; n]; n];
    for k in 1..=n {
        let mut next = matmul(a, &m);
        for (i, row) in next.iter_mut().enumerate() {
            row[i] += c[n - k + 1];
        }
        m = next;
        let am = matmul(a, &m);
        c[n - k] = -(0..n).map(|i| am[i][i]).sum::<f64>() / k as f64;
    }
    c
}

fn eval(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &ci| acc * x + ci)
}

fn derivative(c: &[f64]) -> Vec<f64> {
    c.iter().enumerate().skip(1).map(|(i, &ci)| i as f64 * ci).collect()
}

/// Real roots in `[lo, hi]`, ascending: the critical points of `c` split the
/// interval into monotone pieces, each bisected.
fn real_roots(c: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    if c.len() == 2 {
        return vec![-c[0] / c[1]];
    }
    let mut breaks = vec![lo];
    breaks.extend(real_roots(&derivative(c), lo, hi).into_iter().filter(|x| *x > lo && *x < hi));
    breaks.push(hi);
    let mut roots = Vec::new();
    for w in breaks.windows(2) {
        let (mut a, mut b) = (w[0], w[1]);
        let (fa, fb) = (eval(c, a), eval(c, b));
        if fa == 0.0 {
            roots.push(a);
            continue;
        }
        if fa.signum() == fb.signum() {
            continue;
        }
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if mid <= a || mid >= b {
                break;
            }
            if eval(c, mid).signum() == fa.signum() {
                a = mid;
            } else {
                b = mid;
            }
        }
        roots.push(0.5 * (a + b));
    }
    roots
}

fn oracle_eigenvalues(a: &Matrix) -> Vec<f64> {
    let bound = a.iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max) + 1.0;
    let mut roots = real_roots(&characteristic_polynomial(a), -bound, bound);
    roots.sort_by(|x, y| y.total_cmp(x));
    roots
}

fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for q in &cols {
            let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            cols.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    // rows are variables, columns components
    (0..n).map(|i| (0..n).map(|j| cols[j][i]).collect()).collect()
}

/// Descending eigenvalues with pairwise gaps of at least 0.2.
fn planted_spectrum(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut lambda = vec![rng.random_range(0.05..0.5)];
    for _ in 1..4 {
        let prev = *lambda.last().unwrap();
        lambda.push(prev + rng.random_range(0.2..2.0));
    }
    lambda.reverse();
    lambda
}

fn compose(q: &Matrix, lambda: &[f64]) -> Matrix {
    let n = lambda.len();
    (0..n)
        .map(|i| (0..n).map(|j| (0..n).map(|m| q[i][m] * lambda[m] * q[j][m]).sum()).collect())
        .collect()
}

fn to_correlation(a: &Matrix) -> Matrix {
    let n = a.len();
    (0..n).map(|i| (0..n).map(|j| a[i][j] / (a[i][i] * a[j][j]).sqrt()).collect()).collect()
}

fn check_against_oracle(a: &Matrix, planted: Option<&[f64]>) {
    let e = symmetric_eigen(a).unwrap();
    let want = oracle_eigenvalues(a);
    assert_eq!(want.len(), 4, "oracle found {want:?}");
    for (got, w) in e.values.iter().zip(&want) {
        assert!((got - w).abs() < 1e-9, "{:?} vs {want:?}", e.values);
    }
    if let Some(p) = planted {
        for (got, w) in e.values.iter().zip(p) {
            assert!((got - w).abs() < 1e-9);
        }
    }
    for i in 0..4 {
        for j in 0..4 {
            let dot: f64 = (0..4).map(|r| e.vectors[r][i] * e.vectors[r][j]).sum();
            assert!((dot - (i == j) as u8 as f64).abs() < 1e-9);
        }
        // A v = λ v
        for r in 0..4 {
            let av: f64 = (0..4).map(|c| a[r][c] * e.vectors[c][i]).sum();
            assert!((av - e.values[i] * e.vectors[r][i]).abs() < 1e-9);
        }
    }
}

#[test]
fn oracle_recovers_known_polynomial() {
    // diag(4, 3, 2, 1): (x-1)(x-2)(x-3)(x-4) = x^4 - 10x^3 + 35x^2 - 50x + 24
    let a: Matrix = (0..4).map(|i| (0..4).map(|j| if i == j { 4.0 - i as f64 } else { 0.0 }).collect()).collect();
    assert_eq!(characteristic_polynomial(&a), vec![24.0, -50.0, 35.0, -10.0, 1.0]);
    for (got, want) in oracle_eigenvalues(&a).iter().zip([4.0, 3.0, 2.0, 1.0]) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn jacobi_matches_characteristic_polynomial_on_planted_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..20 {
        let lambda = planted_spectrum(&mut rng);
        let q = random_orthogonal(&mut rng, 4);
        let cov = compose(&q, &lambda);
        check_against_oracle(&cov, Some(&lambda));
        check_against_oracle(&to_correlation(&cov), None);
    }
}

fn planted_stack(rng: &mut ChaCha8Rng, q: &Matrix, lambda: &[f64], side: usize) -> RasterGrid {
    let n = side * side;
    let mut planes = vec![vec![0.0; n]; 4];
    for i in 0..n {
        let z: Vec<f64> = (0..4).map(|m| lambda[m].sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
        for (b, plane) in planes.iter_mut().enumerate() {
            plane[i] = 0.2 + 0.01 * b as f64 + (0..4).map(|m| q[b][m] * z[m]).sum::<f64>();
        }
    }
    RasterGrid::from_planes(
        side,
        side,
        GeoTransform::new(0.0, 0.0, 10.0, 10.0, 32632).unwrap(),
        ["B2", "B3", "B4", "B8"].iter().map(|b| BandDescriptor::from_name(b)).collect(),
        planes,
    )
    .unwrap()
}

/// Two-pass sample covariance with an n − 1 denominator.
fn sample_covariance(planes: &[Vec<f64>]) -> Matrix {
    let n = planes[0].len() as f64;
    let means: Vec<f64> = planes.iter().map(|p| p.iter().sum::<f64>() / n).collect();
    let k = planes.len();
    (0..k)
        .map(|i| {
            (0..k)
                .map(|j| {
                    planes[i].iter().zip(&planes[j]).map(|(a, b)| (a - means[i]) * (b - means[j])).sum::<f64>() / (n - 1.0)
                })
                .collect()
        })
        .collect()
}

#[test]
fn score_covariance_diagonal_equals_eigenvalues() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for round in 0..6 {
        let lambda: Vec<f64> = planted_spectrum(&mut rng).iter().map(|l| l * 1e-3).collect();
        let q = random_orthogonal(&mut rng, 4);
        let grid = planted_stack(&mut rng, &q, &lambda, 96);
        let mode = if round % 2 == 0 { PcaMode::Covariance } else { PcaMode::Correlation };
        let r = pca(&grid, &["B2", "B3", "B4", "B8"], mode).unwrap();

        let cov = sample_covariance(grid.planes());
        let expected = if mode == PcaMode::Covariance { cov.clone() } else { to_correlation(&cov) };
        for i in 0..4 {
            for j in 0..4 {
                assert!((r.matrix[i][j] - expected[i][j]).abs() < 1e-12 * expected[i][i].abs().max(1.0));
            }
        }
        for (got, w) in r.eigenvalues.iter().zip(oracle_eigenvalues(&r.matrix)) {
            assert!((got - w).abs() < 1e-9);
        }

        let scores = sample_covariance(r.scores.planes());
        for i in 0..4 {
            assert!(((scores[i][i] - r.eigenvalues[i]) / r.eigenvalues[i]).abs() < 1e-6, "{mode:?} component {i}");
            for j in 0..i {
                assert!(scores[i][j].abs() < 1e-9 * r.eigenvalues[0]);
            }
        }
        let total: f64 = r.explained_variance_ratio.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(explained_variance(&r, 4), Some(r.explained_variance_ratio.iter().sum()));
    }
}
