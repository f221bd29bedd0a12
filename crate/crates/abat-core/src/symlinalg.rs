//! Symmetric-matrix kernels: spatial covariance, cyclic Jacobi
//! eigendecomposition, and the inverse principal square root.
//!
//! Channel counts are small (<= 64), so an O(C^3) Jacobi iteration is
//! both fast enough and deterministic.

use crate::alignment::Trial;
use crate::error::{Error, Result};

/// Symmetric positive semi-definite matrix, dense row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    dim: usize,
    data: Vec<f64>,
}

const SYMMETRY_TOL: f64 = 1e-12;

impl SpdMatrix {
    /// Build from raw row-major data, checking symmetry to 1e-12
    /// (relative to the largest entry) and then symmetrizing exactly.
    pub fn from_data(dim: usize, mut data: Vec<f64>) -> Result<Self> {
        if data.len() != dim * dim {
            return Err(Error::ShapeMismatch {
                op: "SpdMatrix::from_data",
                expected: format!("{} values", dim * dim),
                actual: format!("{}", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("SpdMatrix::from_data".into()));
        }
        let scale = data.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        for i in 0..dim {
            for j in (i + 1)..dim {
                let (a, b) = (data[i * dim + j], data[j * dim + i]);
                if (a - b).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::InvalidConfig(format!(
                        "matrix not symmetric at ({i},{j}): {a} vs {b}"
                    )));
                }
                let avg = 0.5 * (a + b);
                data[i * dim + j] = avg;
                data[j * dim + i] = avg;
            }
        }
        Ok(SpdMatrix { dim, data })
    }

    pub fn identity(dim: usize) -> Self {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        SpdMatrix { dim, data }
    }

    pub fn zeros(dim: usize) -> Self {
        SpdMatrix {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    /// Largest absolute entry of (self - other).
    pub fn max_abs_diff(&self, other: &SpdMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Largest absolute off-identity entry.
    pub fn max_dist_from_identity(&self) -> f64 {
        let mut m = 0.0f64;
        for i in 0..self.dim {
            for j in 0..self.dim {
                let target = if i == j { 1.0 } else { 0.0 };
                m = m.max((self.get(i, j) - target).abs());
            }
        }
        m
    }

    /// self * x where x is a dense (dim x cols) matrix, row-major.
    pub fn apply(&self, x: &[f64], cols: usize) -> Result<Vec<f64>> {
        if x.len() != self.dim * cols {
            return Err(Error::ShapeMismatch {
                op: "SpdMatrix::apply",
                expected: format!("{} values", self.dim * cols),
                actual: format!("{}", x.len()),
            });
        }
        let mut out = vec![0.0; self.dim * cols];
        for i in 0..self.dim {
            for k in 0..self.dim {
                let a = self.data[i * self.dim + k];
                if a == 0.0 {
                    continue;
                }
                let xrow = &x[k * cols..(k + 1) * cols];
                let orow = &mut out[i * cols..(i + 1) * cols];
                for (o, xv) in orow.iter_mut().zip(xrow) {
                    *o += a * xv;
                }
            }
        }
        Ok(out)
    }
}

/// X * X^T of a single trial; exactly symmetric by construction.
pub fn spatial_covariance(trial: &Trial) -> SpdMatrix {
    let c = trial.channels();
    let mut data = vec![0.0; c * c];
    for i in 0..c {
        let ri = trial.row(i);
        for j in i..c {
            let rj = trial.row(j);
            let mut s = 0.0;
            for (a, b) in ri.iter().zip(rj) {
                s += a * b;
            }
            data[i * c + j] = s;
            data[j * c + i] = s;
        }
    }
    SpdMatrix { dim: c, data }
}

/// Arithmetic mean of the per-trial spatial covariances, summed in
/// index order for bit-reproducibility.
pub fn mean_covariance(trials: &[Trial]) -> Result<SpdMatrix> {
    let first = trials.first().ok_or(Error::EmptyInput("mean_covariance"))?;
    let c = first.channels();
    if let Some(bad) = trials.iter().find(|t| t.channels() != c) {
        return Err(Error::ShapeMismatch {
            op: "mean_covariance",
            expected: format!("{c} channels"),
            actual: format!("{} channels", bad.channels()),
        });
    }
    let mut acc = vec![0.0; c * c];
    for t in trials {
        let cov = spatial_covariance(t);
        for (a, v) in acc.iter_mut().zip(&cov.data) {
            *a += v;
        }
    }
    let inv = 1.0 / trials.len() as f64;
    for a in acc.iter_mut() {
        *a *= inv;
    }
    Ok(SpdMatrix { dim: c, data: acc })
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching eigenvectors
/// as columns of a row-major (dim x dim) matrix, with V diag(l) V^T
/// reconstructing the input.
pub fn sym_eig(m: &SpdMatrix) -> Result<(Vec<f64>, Vec<f64>)> {
    const MAX_SWEEPS: usize = 100;
    let n = m.dim;
    let mut a = m.data.clone();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    if n == 1 {
        return Ok((vec![a[0]], v));
    }

    let off = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += a[i * n + j] * a[i * n + j];
            }
        }
        s.sqrt()
    };
    let scale = m
        .data
        .iter()
        .fold(0.0f64, |acc, x| acc.max(x.abs()))
        .max(f64::MIN_POSITIVE);
    let tol = 1e-15 * scale * n as f64;

    let mut sweeps = 0;
    while off(&a) > tol {
        if sweeps >= MAX_SWEEPS {
            return Err(Error::EigNoConvergence {
                residual: off(&a),
                sweeps,
            });
        }
        sweeps += 1;
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() <= tol / (n * n) as f64 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                // rotation angle annihilating a_pq
                let theta = (aqq - app) / (2.0 * apq);
                let t = {
                    let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                    sign / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
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
    order.sort_by(|&i, &j| {
        a[j * n + j]
            .partial_cmp(&a[i * n + i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (new_col, &old_col) in order.iter().enumerate() {
        for r in 0..n {
            vectors[r * n + new_col] = v[r * n + old_col];
        }
    }
    Ok((eigenvalues, vectors))
}

/// Inverse principal square root with an eigenvalue floor:
/// V diag(max(l, floor)^(-1/2)) V^T.
pub fn inv_sqrt(m: &SpdMatrix, floor: f64) -> Result<SpdMatrix> {
    if !(floor > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "inv_sqrt floor must be positive, got {floor}"
        )));
    }
    let n = m.dim;
    let (eigenvalues, v) = sym_eig(m)?;
    let scaled: Vec<f64> = eigenvalues
        .iter()
        .map(|&l| 1.0 / l.max(floor).sqrt())
        .collect();
    // V diag(s) V^T, filling the upper triangle and mirroring
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let mut s = 0.0;
            for k in 0..n {
                s += v[i * n + k] * scaled[k] * v[j * n + k];
            }
            out[i * n + j] = s;
            out[j * n + i] = s;
        }
    }
    Ok(SpdMatrix { dim: n, data: out })
}

/// Default eigenvalue floor used by alignment: 1e-8 x max(lambda_max, 1).
pub fn default_floor(lambda_max: f64) -> f64 {
    1e-8 * lambda_max.max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn trial(c: usize, t: usize, data: Vec<f64>) -> Trial {
        Trial::new(c, t, data, None, 0).unwrap()
    }

    fn random_trial(c: usize, t: usize, seed: u64) -> Trial {
        let mut rng = stream(seed, &[77]);
        let data: Vec<f64> = (0..c * t).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        trial(c, t, data)
    }

    #[test]
    fn covariance_of_scaled_identity() {
        // X = 2*I2 -> X X^T = 4*I2
        let t = trial(2, 2, vec![2.0, 0.0, 0.0, 2.0]);
        let cov = spatial_covariance(&t);
        assert_eq!(cov.data(), &[4.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn covariance_of_rank_one() {
        let t = trial(2, 2, vec![1.0, 1.0, 0.0, 0.0]);
        let cov = spatial_covariance(&t);
        assert_eq!(cov.data(), &[2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn covariance_matches_triple_loop_oracle_and_is_symmetric() {
        let t = random_trial(4, 16, 5);
        let cov = spatial_covariance(&t);
        // naive triple-loop oracle
        for i in 0..4 {
            for j in 0..4 {
                let mut s = 0.0;
                for k in 0..16 {
                    s += t.data()[i * 16 + k] * t.data()[j * 16 + k];
                }
                assert!((cov.get(i, j) - s).abs() < 1e-12);
                assert_eq!(cov.get(i, j), cov.get(j, i)); // exact
            }
        }
    }

    #[test]
    fn mean_covariance_basics() {
        let t1 = trial(2, 2, vec![2.0, 0.0, 0.0, 2.0]); // cov 4I
        let single = mean_covariance(std::slice::from_ref(&t1)).unwrap();
        assert_eq!(single.data(), spatial_covariance(&t1).data());

        let t2 = trial(2, 2, vec![1.0, 0.0, 0.0, 1.0]); // cov I
        let mean = mean_covariance(&[t1, t2]).unwrap();
        assert_eq!(mean.data(), &[2.5, 0.0, 0.0, 2.5]);

        assert!(mean_covariance(&[]).is_err());
    }

    #[test]
    fn eig_diagonal() {
        let m = SpdMatrix::from_data(2, vec![4.0, 0.0, 0.0, 9.0]).unwrap();
        let (l, v) = sym_eig(&m).unwrap();
        assert!((l[0] - 9.0).abs() < 1e-12 && (l[1] - 4.0).abs() < 1e-12);
        // axis-aligned eigenvectors
        assert!((v[0 * 2 + 0].abs() - 0.0).abs() < 1e-12);
        assert!((v[1 * 2 + 0].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eig_two_by_two_analytic() {
        // [[2,1],[1,2]] has eigenvalues 3 and 1
        let m = SpdMatrix::from_data(2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let (l, _) = sym_eig(&m).unwrap();
        assert!((l[0] - 3.0).abs() < 1e-12);
        assert!((l[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eig_reconstructs_random_spd() {
        // build SPD as G G^T
        let mut rng = stream(11, &[3]);
        let n = 8;
        let g: Vec<f64> = (0..n * n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += g[i * n + k] * g[j * n + k];
                }
                data[i * n + j] = s;
            }
        }
        let m = SpdMatrix::from_data(n, data).unwrap();
        let (l, v) = sym_eig(&m).unwrap();

        // nonincreasing, nonnegative
        for w in l.windows(2) {
            assert!(w[0] >= w[1] - 1e-12);
        }
        for &lv in &l {
            assert!(lv >= -1e-10);
        }
        // V diag(l) V^T reconstructs m; V^T V = I
        for i in 0..n {
            for j in 0..n {
                let mut rec = 0.0;
                let mut dot = 0.0;
                for k in 0..n {
                    rec += v[i * n + k] * l[k] * v[j * n + k];
                    dot += v[k * n + i] * v[k * n + j];
                }
                assert!((rec - m.get(i, j)).abs() < 1e-9);
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((dot - target).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn inv_sqrt_diagonal_and_identity() {
        let m = SpdMatrix::from_data(2, vec![4.0, 0.0, 0.0, 9.0]).unwrap();
        let r = inv_sqrt(&m, 1e-8).unwrap();
        assert!((r.get(0, 0) - 0.5).abs() < 1e-12);
        assert!((r.get(1, 1) - 1.0 / 3.0).abs() < 1e-12);
        assert!(r.get(0, 1).abs() < 1e-12);

        let id = SpdMatrix::identity(3);
        let r = inv_sqrt(&id, 1e-8).unwrap();
        assert!(r.max_abs_diff(&SpdMatrix::identity(3)) < 1e-12);
    }

    #[test]
    fn inv_sqrt_floors_rank_deficiency() {
        let m = SpdMatrix::from_data(2, vec![4.0, 0.0, 0.0, 0.0]).unwrap();
        let r = inv_sqrt(&m, 1e-8).unwrap();
        assert!((r.get(0, 0) - 0.5).abs() < 1e-12);
        assert!((r.get(1, 1) - 1e4).abs() < 1e-6);
    }

    #[test]
    fn inv_sqrt_squared_inverts_well_conditioned() {
        let t = random_trial(5, 40, 2);
        let m = spatial_covariance(&t);
        let r = inv_sqrt(&m, 1e-8).unwrap();
        // r * m * r should be I to 1e-8
        let mr = r.apply(m.data(), 5).unwrap();
        let rmr = r.apply(&mr, 5).unwrap();
        let mut worst = 0.0f64;
        for i in 0..5 {
            for j in 0..5 {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((rmr[i * 5 + j] - target).abs());
            }
        }
        assert!(worst < 1e-8, "residual {worst}");
    }
}
