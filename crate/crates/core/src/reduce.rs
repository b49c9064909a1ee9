//! Principal component analysis on the sampled feature matrix.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::container::{Tensor, TensorData};
use crate::error::{format_err, invalid, Error, Result};

/// Default reduced dimension.
pub const DEFAULT_PCA_DIM: usize = 75;
/// Band of reduced dimensions that behaves well in practice.
pub const PCA_DIM_BAND: (usize, usize) = (50, 200);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `P × cols`, orthonormal rows ordered by decreasing explained variance.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub(crate) fn to_tensors(&self, prefix: &str) -> Vec<Tensor> {
        vec![
            Tensor {
                name: format!("{prefix}.mean"),
                shape: vec![self.mean.len()],
                data: TensorData::F64(self.mean.clone()),
            },
            Tensor {
                name: format!("{prefix}.components"),
                shape: vec![self.dim(), self.input_dim()],
                data: TensorData::F64(self.components.concat()),
            },
            Tensor {
                name: format!("{prefix}.explained_variance"),
                shape: vec![self.dim()],
                data: TensorData::F64(self.explained_variance.clone()),
            },
        ]
    }

    pub(crate) fn from_tensors(prefix: &str, find: impl Fn(&str) -> Option<Tensor>) -> Result<Self> {
        let get = |name: &str| -> Result<(Vec<usize>, Vec<f64>)> {
            let t = find(&format!("{prefix}.{name}")).ok_or_else(|| format_err(0, format!("missing {prefix}.{name}")))?;
            match t.data {
                TensorData::F64(v) => Ok((t.shape, v)),
                TensorData::F32(_) => Err(format_err(0, format!("{prefix}.{name} must be f64"))),
            }
        };
        let (_, mean) = get("mean")?;
        let (shape, comps) = get("components")?;
        let (_, explained_variance) = get("explained_variance")?;
        if shape.len() != 2 || shape[1] != mean.len() || shape[0] != explained_variance.len() {
            return Err(format_err(0, "inconsistent PCA tensor shapes"));
        }
        let components = if shape[1] == 0 { vec![Vec::new(); shape[0]] } else { comps.chunks(shape[1]).map(<[f64]>::to_vec).collect() };
        Ok(Self { mean, components, explained_variance })
    }
}

/// Fits `p` components to the rows of `x` (samples × features).
///
/// Components are eigenvectors of the unbiased sample covariance; each is
/// signed so its largest-magnitude entry is positive.
pub fn pca_fit(x: &DMatrix<f64>, p: usize) -> Result<PcaModel> {
    let (n, cols) = x.shape();
    if n < 2 {
        return Err(invalid(format!("PCA needs at least 2 rows, got {n}")));
    }
    if p == 0 || p > (n - 1).min(cols) {
        return Err(invalid(format!(
            "PCA dimension {p} must be in 1..={} for a {n}x{cols} matrix",
            (n - 1).min(cols)
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite feature value".into()));
    }
    let mean: DVector<f64> = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..cols).collect();
    // stable on ties: lower index first
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut components = Vec::with_capacity(p);
    let mut explained_variance = Vec::with_capacity(p);
    for &k in order.iter().take(p) {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let mut pivot = 0;
        for (i, e) in v.iter().enumerate() {
            if e.abs() > v[pivot].abs() {
                pivot = i;
            }
        }
        if v[pivot] < 0.0 {
            v.iter_mut().for_each(|e| *e = -*e);
        }
        components.push(v);
        explained_variance.push(eig.eigenvalues[k].max(0.0));
    }
    Ok(PcaModel {
        mean: mean.iter().copied().collect(),
        components,
        explained_variance,
    })
}

/// Projects one vector: `(x − mean) · componentsᵀ`.
pub fn pca_transform(model: &PcaModel, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.input_dim() {
        return Err(invalid(format!(
            "PCA input has {} features, model expects {}",
            x.len(),
            model.input_dim()
        )));
    }
    Ok(model
        .components
        .iter()
        .map(|c| c.iter().zip(x.iter().zip(&model.mean)).map(|(w, (v, m))| w * (v - m)).sum())
        .collect())
}

/// Projects every row of `x`.
pub fn pca_transform_rows(model: &PcaModel, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(x.nrows(), model.dim());
    for (i, row) in x.row_iter().enumerate() {
        let v: Vec<f64> = row.iter().copied().collect();
        let t = pca_transform(model, &v)?;
        for (j, val) in t.into_iter().enumerate() {
            out[(i, j)] = val;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_rows_have_zero_variance() {
        let x = DMatrix::from_row_slice(4, 3, &[1.0, 2.0, 3.0].repeat(4));
        let m = pca_fit(&x, 4).unwrap_err();
        assert!(matches!(m, Error::InvalidArgument(_)));
        let m = pca_fit(&x, 2).unwrap();
        assert!(m.explained_variance.iter().all(|&v| v.abs() < 1e-12));
        let t = pca_transform(&m, &[1.0, 2.0, 3.0]).unwrap();
        assert!(t.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn line_data_gives_line_direction() {
        let x = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 1.0, 2.0, 2.0, 4.0, -1.0, -2.0]);
        let m = pca_fit(&x, 1).unwrap();
        let s5 = 5f64.sqrt();
        assert!((m.components[0][0] - 1.0 / s5).abs() < 1e-12);
        assert!((m.components[0][1] - 2.0 / s5).abs() < 1e-12);
    }

    #[test]
    fn mean_maps_to_origin_and_dim_checked() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 2.0, 5.0]);
        let m = pca_fit(&x, 2).unwrap();
        let t = pca_transform(&m, &m.mean.clone()).unwrap();
        assert!(t.iter().all(|&v| v.abs() < 1e-12));
        assert!(pca_transform(&m, &[1.0]).is_err());
        assert!(pca_fit(&DMatrix::zeros(1, 3), 1).is_err());
    }

    #[test]
    fn fit_is_idempotent() {
        let x = DMatrix::from_fn(7, 4, |i, j| ((i * 7 + j * 3) % 5) as f64 - 0.3 * j as f64);
        assert_eq!(pca_fit(&x, 3).unwrap(), pca_fit(&x, 3).unwrap());
    }
}
