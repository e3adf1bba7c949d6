//! Whitened PCA over flattened per-agent trajectories.
//!
//! Coefficients are `(s - mean) W^T` with the rows of `W` scaled so the
//! fitting population has unit variance per coefficient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PCA_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    n_p: usize,
    mean: Vec<f64>,
    /// `[n_p][dim]`, unit eigenvectors divided by the root eigenvalue.
    components: Vec<Vec<f64>>,
    /// `[n_p][dim]`, unit eigenvectors times the root eigenvalue.
    inverse: Vec<Vec<f64>>,
    explained_variance_ratio: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PcaFile {
    format_version: u32,
    n_p: usize,
    mean: Vec<f64>,
    components: Vec<f64>,
    explained_variance_ratio: Vec<f64>,
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues (descending) and unit eigenvectors as rows.
pub fn symmetric_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut a: Vec<Vec<f64>> = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let scale: f64 = a
        .iter()
        .flatten()
        .map(|x| x * x)
        .sum::<f64>()
        .max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order
        .iter()
        .map(|&i| {
            let mut col: Vec<f64> = (0..n).map(|k| v[k][i]).collect();
            // sign convention: largest-magnitude entry positive
            let big = col
                .iter()
                .cloned()
                .fold(0.0_f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if big < 0.0 {
                col.iter_mut().for_each(|x| *x = -*x);
            }
            col
        })
        .collect();
    (values, vectors)
}

/// Rows are `u / sqrt(lambda)`, so `|w|^2 = 1 / lambda` and the inverse row
/// `u sqrt(lambda)` is `w / |w|^2`. Computed the same way after fit and load so
/// both give bit-identical reconstructions.
fn inverse_rows(components: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    components
        .iter()
        .map(|w| {
            let norm2: f64 = w.iter().map(|v| v * v).sum();
            if !(norm2 > 0.0 && norm2.is_finite()) {
                return Err(Error::InvalidArgument("pca: degenerate component".into()));
            }
            Ok(w.iter().map(|v| v / norm2).collect())
        })
        .collect()
}

/// Fits a whitened PCA with `n_p` components to row vectors.
pub fn fit_pca(population: &[Vec<f64>], n_p: usize) -> Result<PcaModel> {
    let n = population.len();
    let dim = population.first().map_or(0, Vec::len);
    if n_p == 0 || n <= n_p || n_p > dim {
        return Err(Error::InvalidArgument(format!(
            "fit_pca needs population > n_p >= 1 and n_p <= dim (population {n}, n_p {n_p}, dim {dim})"
        )));
    }
    if population
        .iter()
        .any(|r| r.len() != dim || r.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::InvalidArgument(
            "fit_pca: rows must be finite and equally sized".into(),
        ));
    }
    let mut mean = vec![0.0; dim];
    for r in population {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![vec![0.0; dim]; dim];
    for r in population {
        let c: Vec<f64> = r.iter().zip(&mean).map(|(v, m)| v - m).collect();
        for i in 0..dim {
            for j in i..dim {
                cov[i][j] += c[i] * c[j];
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            cov[i][j] /= (n - 1) as f64;
            cov[j][i] = cov[i][j];
        }
    }
    let (values, vectors) = symmetric_eigen(&cov);
    let total: f64 = values.iter().map(|v| v.max(0.0)).sum();
    let floor = 1e-12 * values[0].max(0.0);
    let degenerate: Vec<usize> = (0..n_p)
        .filter(|&k| !(values[k] > floor) || values[k] <= 0.0)
        .collect();
    if total <= 0.0 || !degenerate.is_empty() {
        return Err(Error::RankDeficient(format!(
            "population has zero variance along component(s) {degenerate:?} of the {n_p} requested"
        )));
    }
    let components: Vec<Vec<f64>> = (0..n_p)
        .map(|k| vectors[k].iter().map(|u| u / values[k].sqrt()).collect())
        .collect();
    let inverse = inverse_rows(&components)?;
    let explained_variance_ratio = values[..n_p].iter().map(|v| v / total).collect();
    Ok(PcaModel {
        n_p,
        mean,
        components,
        inverse,
        explained_variance_ratio,
    })
}

impl PcaModel {
    pub fn n_p(&self) -> usize {
        self.n_p
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn explained_variance_ratio(&self) -> &[f64] {
        &self.explained_variance_ratio
    }

    /// Inverse map as a `[n_p, dim]` row-major matrix: `s = mean + c M`.
    pub fn inverse_matrix(&self) -> Vec<f64> {
        self.inverse.iter().flatten().copied().collect()
    }

    pub fn transform(&self, s: &[f64]) -> Result<Vec<f64>> {
        if s.len() != self.dim() {
            return Err(Error::shape("pca transform", &[s.len()], &[self.dim()]));
        }
        Ok(self
            .components
            .iter()
            .map(|w| {
                w.iter()
                    .zip(s)
                    .zip(&self.mean)
                    .map(|((w, v), m)| w * (v - m))
                    .sum()
            })
            .collect())
    }

    pub fn inverse_transform(&self, c: &[f64]) -> Result<Vec<f64>> {
        if c.len() != self.n_p {
            return Err(Error::shape(
                "pca inverse_transform",
                &[c.len()],
                &[self.n_p],
            ));
        }
        let mut out = self.mean.clone();
        for (ck, row) in c.iter().zip(&self.inverse) {
            for (o, u) in out.iter_mut().zip(row) {
                *o += ck * u;
            }
        }
        Ok(out)
    }

    /// Root-mean-square reconstruction error over a population.
    pub fn reconstruction_rms(&self, population: &[Vec<f64>]) -> Result<f64> {
        let mut sq = 0.0;
        let mut count = 0usize;
        for s in population {
            let r = self.inverse_transform(&self.transform(s)?)?;
            sq += r.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            count += s.len();
        }
        Ok((sq / count.max(1) as f64).sqrt())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = PcaFile {
            format_version: PCA_FORMAT_VERSION,
            n_p: self.n_p,
            mean: self.mean.clone(),
            components: self.components.iter().flatten().copied().collect(),
            explained_variance_ratio: self.explained_variance_ratio.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::from_str(&self.to_json().expect("pca serialises")).expect("valid json")
    }

    pub fn from_value(v: serde_json::Value) -> Result<Self> {
        let file: PcaFile = serde_json::from_value(v)?;
        Self::from_file(file)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: PcaFile = serde_json::from_str(s)?;
        Self::from_file(file)
    }

    fn from_file(file: PcaFile) -> Result<Self> {
        if file.format_version != PCA_FORMAT_VERSION {
            return Err(Error::Version {
                found: file.format_version,
                expected: PCA_FORMAT_VERSION,
            });
        }
        let dim = file.mean.len();
        if file.n_p == 0
            || dim == 0
            || file.components.len() != file.n_p * dim
            || file.explained_variance_ratio.len() != file.n_p
        {
            return Err(Error::InvalidArgument(
                "pca file: inconsistent dimensions".into(),
            ));
        }
        let components: Vec<Vec<f64>> = file.components.chunks(dim).map(<[f64]>::to_vec).collect();
        let inverse = inverse_rows(&components)?;
        Ok(PcaModel {
            n_p: file.n_p,
            mean: file.mean,
            components,
            inverse,
            explained_variance_ratio: file.explained_variance_ratio,
        })
    }
}
