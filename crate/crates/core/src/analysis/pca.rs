//! Two-component PCA through an exact symmetric eigendecomposition of the
//! covariance matrix (cyclic Jacobi sweeps).

use crate::engine::{TracePhase, TrajectoryRecord};
use crate::error::{Error, Result};

/// Eigenvalues in descending order with matching unit eigenvectors.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    /// `vectors[i]` belongs to `values[i]`.
    pub vectors: Vec<Vec<f64>>,
}

/// Cyclic Jacobi eigensolver for a dense symmetric `n × n` matrix stored
/// row-major. Deterministic: rotations visit `(p, q)` pairs in a fixed order.
pub fn symmetric_eigen(matrix: &[f64], n: usize) -> SymmetricEigen {
    assert_eq!(matrix.len(), n * n, "matrix must be n x n");
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|p| (p + 1..n).map(move |q| (p, q)))
            .map(|(p, q)| a[p * n + q] * a[p * n + q])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                // signum(0.0) == 1.0, so equal diagonals rotate by 45°
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
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
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    SymmetricEigen {
        values: order.iter().map(|&i| a[i * n + i]).collect(),
        vectors: order
            .iter()
            .map(|&i| (0..n).map(|k| v[k * n + i]).collect())
            .collect(),
    }
}

/// Fitted two-component basis.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Two orthonormal rows of length `d`.
    pub components: [Vec<f64>; 2],
    /// Top-2 covariance eigenvalues, nonincreasing.
    pub explained_variance: [f64; 2],
    /// Trace of the covariance.
    pub total_variance: f64,
}

impl Pca {
    /// Fits on `rows` (each of length `d`); covariance uses the `n - 1` divisor.
    pub fn fit<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        if n < 3 {
            return Err(Error::Input(format!("PCA needs at least 3 states, got {n}")));
        }
        let d = rows[0].as_ref().len();
        if d < 2 {
            return Err(Error::Input(format!("PCA needs dimension >= 2, got {d}")));
        }
        if rows.iter().any(|r| r.as_ref().len() != d) {
            return Err(Error::Input("PCA rows differ in length".into()));
        }
        let mut mean = vec![0.0f64; d];
        for r in rows {
            for (m, x) in mean.iter_mut().zip(r.as_ref()) {
                *m += *x as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centered: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.as_ref().iter().zip(&mean).map(|(x, m)| *x as f64 - m).collect())
            .collect();
        let mut cov = vec![0.0f64; d * d];
        for row in &centered {
            for i in 0..d {
                let ri = row[i];
                if ri == 0.0 {
                    continue;
                }
                for j in i..d {
                    cov[i * d + j] += ri * row[j];
                }
            }
        }
        let denom = (n - 1) as f64;
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / denom;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        let total_variance: f64 = (0..d).map(|i| cov[i * d + i]).sum();
        if !(total_variance > 0.0) {
            return Err(Error::DegenerateData("all states are identical".into()));
        }
        let eig = symmetric_eigen(&cov, d);
        let mut comps = [eig.vectors[0].clone(), eig.vectors[1].clone()];
        for c in comps.iter_mut() {
            let lead = c
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .expect("d >= 2");
            if c[lead] < 0.0 {
                c.iter_mut().for_each(|x| *x = -*x);
            }
        }
        Ok(Self {
            mean,
            components: comps,
            explained_variance: [eig.values[0].max(0.0), eig.values[1].max(0.0)],
            total_variance,
        })
    }

    pub fn project(&self, x: &[f32]) -> (f64, f64) {
        let proj = |c: &[f64]| {
            x.iter()
                .zip(&self.mean)
                .zip(c)
                .map(|((x, m), c)| (*x as f64 - m) * c)
                .sum()
        };
        (proj(&self.components[0]), proj(&self.components[1]))
    }

    /// Fraction of the total variance captured by each component.
    pub fn explained_ratio(&self) -> [f64; 2] {
        [
            self.explained_variance[0] / self.total_variance,
            self.explained_variance[1] / self.total_variance,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedPoint {
    pub step: Option<usize>,
    pub block: Option<usize>,
    pub phase: TracePhase,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    pub pca: Pca,
    pub points: Vec<ProjectedPoint>,
}

pub(crate) fn project_record(pca: &Pca, record: &TrajectoryRecord) -> Vec<ProjectedPoint> {
    record
        .entries
        .iter()
        .map(|e| {
            let (x, y) = pca.project(&e.hidden);
            ProjectedPoint {
                step: e.step,
                block: e.block,
                phase: e.phase,
                x,
                y,
            }
        })
        .collect()
}

/// Projects one trajectory onto its own top-2 principal components.
pub fn pca_project(record: &TrajectoryRecord) -> Result<PcaProjection> {
    let rows: Vec<&[f32]> = record.entries.iter().map(|e| e.hidden.as_slice()).collect();
    let pca = Pca::fit(&rows)?;
    let points = project_record(&pca, record);
    Ok(PcaProjection { pca, points })
}
