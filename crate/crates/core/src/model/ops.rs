//! Attention and gated-MLP kernels shared by the full-matrix API and the
//! incremental decoder.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Matrix;

/// Gate nonlinearity applied to the first half of the up-projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    Silu,
    Gelu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Silu => x * sigmoid(x),
            Activation::Gelu => {
                // tanh approximation
                const C: f32 = 0.797_884_6;
                0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
            }
        }
    }
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax over `scores[..visible]`; entries past
/// `visible` are set to exactly zero.
pub fn softmax_prefix(scores: &mut [f32], visible: usize) {
    let visible = visible.min(scores.len());
    let max = scores[..visible]
        .iter()
        .copied()
        .fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for s in scores[..visible].iter_mut() {
        *s = (*s - max).exp();
        sum += f64::from(*s);
    }
    for s in scores[..visible].iter_mut() {
        *s = (f64::from(*s) / sum) as f32;
    }
    for s in scores[visible..].iter_mut() {
        *s = 0.0;
    }
}

/// Scaled dot-product attention weights `softmax(Q Kᵀ / √d_head)`.
///
/// With `causal`, row `i` only sees columns `0..=i` and the rest are zero.
pub fn attention_scores(q: &Matrix, k: &Matrix, causal: bool) -> Result<Matrix> {
    if q.shape() != k.shape() {
        return Err(invalid(format!(
            "Q and K shapes differ: {:?} vs {:?}",
            q.shape(),
            k.shape()
        )));
    }
    if !q.is_finite() || !k.is_finite() {
        return Err(Error::Numeric("non-finite attention input".into()));
    }
    let n = q.rows();
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        let row = out.row_mut(i);
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = (dot(q.row(i), k.row(j)) * scale) as f32;
        }
        softmax_prefix(row, if causal { i + 1 } else { n });
    }
    Ok(out)
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

/// Per-row intermediate values of the gated MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpRow {
    pub gate: Vec<f32>,
    pub data: Vec<f32>,
    /// `gate ⊙ data`, the vector fed to the down-projection.
    pub gated: Vec<f32>,
}

/// Up-projects `y`, splits into contiguous halves, and gates:
/// `gate = σ(first half)`, `data = second half`.
pub fn mlp_hidden(y: &[f32], up: &Matrix, activation: Activation) -> MlpRow {
    let z = up.vec_mul(y);
    let half = z.len() / 2;
    let gate: Vec<f32> = z[..half].iter().map(|&v| activation.apply(v)).collect();
    let data = z[half..].to_vec();
    let gated = gate.iter().zip(&data).map(|(g, d)| g * d).collect();
    MlpRow { gate, data, gated }
}

/// Output of [`mlp_block`] for a whole sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpOutput {
    pub output: Matrix,
    pub gate: Matrix,
    pub data: Matrix,
}

/// Gated MLP over every row of `y`: `(σ(Z₁) ⊙ Z₂) · W` with `Z = Y · U`.
pub fn mlp_block(y: &Matrix, up: &Matrix, down: &Matrix, activation: Activation) -> Result<MlpOutput> {
    if !up.cols().is_multiple_of(2) {
        return Err(invalid(format!("MLP width {} is odd", up.cols())));
    }
    if y.cols() != up.rows() || down.rows() != up.cols() / 2 || down.cols() != y.cols() {
        return Err(invalid(format!(
            "MLP shape mismatch: Y {:?}, U {:?}, W {:?}",
            y.shape(),
            up.shape(),
            down.shape()
        )));
    }
    let half = up.cols() / 2;
    let mut gate = Matrix::zeros(y.rows(), half);
    let mut data = Matrix::zeros(y.rows(), half);
    let mut output = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let h = mlp_hidden(y.row(r), up, activation);
        output.row_mut(r).copy_from_slice(&down.vec_mul(&h.gated));
        gate.row_mut(r).copy_from_slice(&h.gate);
        data.row_mut(r).copy_from_slice(&h.data);
    }
    Ok(MlpOutput { output, gate, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_queries_give_uniform_causal_rows() {
        let q = Matrix::zeros(2, 4);
        let a = attention_scores(&q, &q, true).unwrap();
        assert_eq!(a.row(0), &[1.0, 0.0]);
        assert_eq!(a.row(1), &[0.5, 0.5]);
    }

    #[test]
    fn peaked_logits_match_scalar_softmax() {
        // QKᵀ/√d = [[10,0],[0,10]] with d = 2 requires Q = K = √(10·√2)·I.
        let s = (10.0f64 * 2f64.sqrt()).sqrt() as f32;
        let q = Matrix::from_rows(&[vec![s, 0.0], vec![0.0, s]]).unwrap();
        let a = attention_scores(&q, &q, false).unwrap();
        let hi = 1.0 / (1.0 + (-10.0f64).exp());
        let lo = 1.0 - hi;
        assert!((f64::from(a.get(0, 0)) - hi).abs() < 1e-5);
        assert!((f64::from(a.get(0, 1)) - lo).abs() < 1e-6);
        assert!((f64::from(a.get(1, 1)) - hi).abs() < 1e-5);
        assert!((hi - 0.99995).abs() < 1e-5);
    }

    #[test]
    fn attention_rejects_bad_input() {
        let q = Matrix::zeros(2, 4);
        let k = Matrix::zeros(3, 4);
        assert!(matches!(attention_scores(&q, &k, true), Err(Error::InvalidArgument(_))));
        let mut bad = Matrix::zeros(2, 4);
        bad.set(0, 0, f32::NAN);
        assert!(matches!(attention_scores(&bad, &q, true), Err(Error::Numeric(_))));
    }

    #[test]
    fn zero_up_projection_zeroes_everything() {
        let y = Matrix::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap();
        let up = Matrix::zeros(3, 4);
        let down = Matrix::from_rows(&[vec![1.0, 1.0, 1.0], vec![2.0, 2.0, 2.0]]).unwrap();
        let out = mlp_block(&y, &up, &down, Activation::Sigmoid).unwrap();
        assert!(out.output.data().iter().all(|&v| v == 0.0));
        assert!(out.data.data().iter().all(|&v| v == 0.0));
        assert!(out.gate.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn mlp_matches_scalar_evaluation() {
        let y = [0.3f32, -1.2, 0.7, 2.0];
        let up_rows = [
            [0.5f32, -0.1, 0.2, 0.9],
            [0.3, 0.4, -0.6, 0.1],
            [-0.8, 0.2, 0.05, -0.3],
            [0.1, 0.7, 0.4, 0.2],
        ];
        let down_rows = [[1.0f32, -0.5, 0.25, 0.0], [0.3, 0.2, -0.1, 0.6]];
        let up = Matrix::from_rows(&up_rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        let down = Matrix::from_rows(&down_rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        let out = mlp_block(&Matrix::from_rows(&[y.to_vec()]).unwrap(), &up, &down, Activation::Sigmoid).unwrap();

        let mut z = [0.0f64; 4];
        for (j, zj) in z.iter_mut().enumerate() {
            for i in 0..4 {
                *zj += f64::from(y[i]) * f64::from(up_rows[i][j]);
            }
        }
        let gated: Vec<f64> = (0..2).map(|i| 1.0 / (1.0 + (-z[i]).exp()) * z[i + 2]).collect();
        for c in 0..4 {
            let want: f64 = (0..2).map(|i| gated[i] * f64::from(down_rows[i][c])).sum();
            assert!((f64::from(out.output.get(0, c)) - want).abs() < 1e-6, "col {c}");
        }
        assert!((f64::from(out.data.get(0, 1)) - z[3]).abs() < 1e-6);
    }

    #[test]
    fn odd_width_rejected() {
        let y = Matrix::zeros(1, 2);
        let up = Matrix::zeros(2, 3);
        let down = Matrix::zeros(1, 2);
        assert!(matches!(mlp_block(&y, &up, &down, Activation::Sigmoid), Err(Error::InvalidArgument(_))));
    }
}
