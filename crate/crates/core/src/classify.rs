//! Binary soft-margin SVM with a polynomial kernel, solved by pairwise
//! (SMO-style) dual ascent.
//!
//! Classes are encoded as Glitch = +1, Normal = −1.

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::container::{Tensor, TensorData};
use crate::error::{format_err, invalid, Error, Result};
use crate::oracle::Label;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SvmParams {
    pub c: f64,
    pub degree: u32,
    /// Multiplier on the inner product; `None` resolves to `1 / dim`.
    pub kernel_scale: Option<f64>,
    pub kernel_offset: f64,
    pub tolerance: f64,
    pub max_iters: usize,
    /// Scale the glitch-class box constraint by `n_normal / n_glitch`.
    pub balance_classes: bool,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            c: 1.0,
            degree: 3,
            kernel_scale: None,
            kernel_offset: 1.0,
            tolerance: 1e-3,
            max_iters: 100_000,
            balance_classes: false,
        }
    }
}

impl SvmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c.is_finite() && self.c > 0.0) {
            return Err(invalid("SVM C must be positive"));
        }
        if self.degree == 0 {
            return Err(invalid("polynomial degree must be positive"));
        }
        if let Some(s) = self.kernel_scale {
            if !(s.is_finite() && s > 0.0) {
                return Err(invalid("kernel_scale must be positive"));
            }
        }
        if !self.kernel_offset.is_finite() {
            return Err(invalid("kernel_offset must be finite"));
        }
        if !(self.tolerance.is_finite() && self.tolerance > 0.0) {
            return Err(invalid("tolerance must be positive"));
        }
        Ok(())
    }

    fn resolved_scale(&self, dim: usize) -> f64 {
        self.kernel_scale.unwrap_or(1.0 / dim.max(1) as f64)
    }
}

/// `(scale·⟨x, y⟩ + offset)^degree`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolyKernel {
    pub scale: f64,
    pub offset: f64,
    pub degree: u32,
}

impl PolyKernel {
    #[inline]
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        (self.scale * dot + self.offset).powi(self.degree as i32)
    }
}

pub fn kernel(x: &[f64], y: &[f64], params: &SvmParams) -> Result<f64> {
    if x.len() != y.len() {
        return Err(invalid(format!("kernel inputs differ in length: {} vs {}", x.len(), y.len())));
    }
    let k = PolyKernel {
        scale: params.resolved_scale(x.len()),
        offset: params.kernel_offset,
        degree: params.degree,
    };
    Ok(k.eval(x, y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub support_vectors: Vec<Vec<f64>>,
    /// `αᵢ·yᵢ` per support vector.
    pub dual_coefs: Vec<f64>,
    pub bias: f64,
    pub kernel: PolyKernel,
    pub params: SvmParams,
    /// Successful pairwise updates performed.
    pub iterations: usize,
    pub converged: bool,
}

impl SvmModel {
    pub fn dim(&self) -> usize {
        self.support_vectors.first().map_or(0, Vec::len)
    }

    pub fn decision_value(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(invalid(format!("SVM input has {} features, model expects {}", x.len(), self.dim())));
        }
        Ok(self
            .support_vectors
            .iter()
            .zip(&self.dual_coefs)
            .map(|(sv, c)| c * self.kernel.eval(sv, x))
            .sum::<f64>()
            + self.bias)
    }

    pub(crate) fn to_tensors(&self, prefix: &str) -> Vec<Tensor> {
        vec![
            Tensor {
                name: format!("{prefix}.support_vectors"),
                shape: vec![self.support_vectors.len(), self.dim()],
                data: TensorData::F64(self.support_vectors.concat()),
            },
            Tensor {
                name: format!("{prefix}.dual_coefs"),
                shape: vec![self.dual_coefs.len()],
                data: TensorData::F64(self.dual_coefs.clone()),
            },
        ]
    }

    /// Rebuilds from tensors plus the scalar fields carried in a JSON header.
    pub(crate) fn from_tensors(prefix: &str, meta: SvmMeta, find: impl Fn(&str) -> Option<Tensor>) -> Result<Self> {
        let get = |name: &str| -> Result<(Vec<usize>, Vec<f64>)> {
            let t = find(&format!("{prefix}.{name}")).ok_or_else(|| format_err(0, format!("missing {prefix}.{name}")))?;
            match t.data {
                TensorData::F64(v) => Ok((t.shape, v)),
                TensorData::F32(_) => Err(format_err(0, format!("{prefix}.{name} must be f64"))),
            }
        };
        let (shape, sv) = get("support_vectors")?;
        let (_, dual_coefs) = get("dual_coefs")?;
        if shape.len() != 2 || shape[0] != dual_coefs.len() {
            return Err(format_err(0, "inconsistent SVM tensor shapes"));
        }
        let support_vectors = if shape[1] == 0 { vec![Vec::new(); shape[0]] } else { sv.chunks(shape[1]).map(<[f64]>::to_vec).collect() };
        Ok(Self {
            support_vectors,
            dual_coefs,
            bias: meta.bias,
            kernel: meta.kernel,
            params: meta.params,
            iterations: meta.iterations,
            converged: meta.converged,
        })
    }

    pub(crate) fn meta(&self) -> SvmMeta {
        SvmMeta {
            bias: self.bias,
            kernel: self.kernel,
            params: self.params.clone(),
            iterations: self.iterations,
            converged: self.converged,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct SvmMeta {
    pub bias: f64,
    pub kernel: PolyKernel,
    pub params: SvmParams,
    pub iterations: usize,
    pub converged: bool,
}

fn sign(label: Label) -> f64 {
    match label {
        Label::Glitch => 1.0,
        Label::Normal => -1.0,
    }
}

struct Smo {
    k: Vec<f64>,
    n: usize,
    y: Vec<f64>,
    c: Vec<f64>,
    alpha: Vec<f64>,
    err: Vec<f64>,
    b: f64,
    tol: f64,
}

impl Smo {
    #[inline]
    fn kij(&self, i: usize, j: usize) -> f64 {
        self.k[i * self.n + j]
    }

    fn violates(&self, i: usize) -> bool {
        let r = self.err[i] * self.y[i];
        (r < -self.tol && self.alpha[i] < self.c[i]) || (r > self.tol && self.alpha[i] > 0.0)
    }

    fn take_step(&mut self, i: usize, j: usize) -> bool {
        if i == j {
            return false;
        }
        let (ai, aj) = (self.alpha[i], self.alpha[j]);
        let (yi, yj) = (self.y[i], self.y[j]);
        let (ci, cj) = (self.c[i], self.c[j]);
        let (lo, hi) = if yi != yj {
            ((aj - ai).max(0.0), cj.min(ci - ai + aj))
        } else {
            ((ai + aj - ci).max(0.0), cj.min(ai + aj))
        };
        if hi - lo < 1e-12 {
            return false;
        }
        let eta = self.kij(i, i) + self.kij(j, j) - 2.0 * self.kij(i, j);
        if eta <= 1e-12 {
            return false;
        }
        let aj_new = (aj + yj * (self.err[i] - self.err[j]) / eta).clamp(lo, hi);
        if (aj_new - aj).abs() < 1e-12 * (aj_new + aj + 1e-12) {
            return false;
        }
        let ai_new = (ai + yi * yj * (aj - aj_new)).clamp(0.0, ci);
        let (di, dj) = (yi * (ai_new - ai), yj * (aj_new - aj));

        let b1 = self.b - self.err[i] - di * self.kij(i, i) - dj * self.kij(i, j);
        let b2 = self.b - self.err[j] - di * self.kij(i, j) - dj * self.kij(j, j);
        let b_new = if ai_new > 0.0 && ai_new < ci {
            b1
        } else if aj_new > 0.0 && aj_new < cj {
            b2
        } else {
            0.5 * (b1 + b2)
        };
        let db = b_new - self.b;
        for k in 0..self.n {
            self.err[k] += di * self.kij(i, k) + dj * self.kij(j, k) + db;
        }
        self.alpha[i] = ai_new;
        self.alpha[j] = aj_new;
        self.b = b_new;
        true
    }

    /// Bias from the KKT conditions: the mean over free vectors, otherwise
    /// the midpoint of the feasible interval.
    fn final_bias(&self) -> f64 {
        let mut free = Vec::new();
        let (mut lb, mut ub) = (f64::NEG_INFINITY, f64::INFINITY);
        for i in 0..self.n {
            let s: f64 = (0..self.n).map(|j| self.alpha[j] * self.y[j] * self.kij(i, j)).sum();
            let g = self.y[i] - s;
            let at_zero = self.alpha[i] <= 0.0;
            let at_c = self.alpha[i] >= self.c[i];
            if !at_zero && !at_c {
                free.push(g);
            } else if (at_zero && self.y[i] > 0.0) || (at_c && self.y[i] < 0.0) {
                lb = lb.max(g);
            } else {
                ub = ub.min(g);
            }
        }
        if !free.is_empty() {
            free.iter().sum::<f64>() / free.len() as f64
        } else if lb.is_finite() && ub.is_finite() {
            0.5 * (lb + ub)
        } else if lb.is_finite() {
            lb
        } else if ub.is_finite() {
            ub
        } else {
            self.b
        }
    }
}

/// Trains on `rows` with `labels`. Scan order is the input order, so the
/// result is a deterministic function of the inputs.
pub fn svm_train(rows: &[Vec<f64>], labels: &[Label], params: &SvmParams) -> Result<SvmModel> {
    params.validate()?;
    if rows.len() != labels.len() {
        return Err(invalid(format!("{} rows but {} labels", rows.len(), labels.len())));
    }
    let n_glitch = labels.iter().filter(|l| l.is_glitch()).count();
    if n_glitch == 0 || n_glitch == labels.len() {
        return Err(Error::Degenerate("training sample contains a single class".into()));
    }
    let dim = rows[0].len();
    if rows.iter().any(|r| r.len() != dim) {
        return Err(invalid("training rows differ in length"));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite training feature".into()));
    }
    let kernel = PolyKernel {
        scale: params.resolved_scale(dim),
        offset: params.kernel_offset,
        degree: params.degree,
    };
    let n = rows.len();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = kernel.eval(&rows[i], &rows[j]);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("kernel matrix overflowed".into()));
    }
    let y: Vec<f64> = labels.iter().map(|&l| sign(l)).collect();
    let glitch_weight = if params.balance_classes {
        (n - n_glitch) as f64 / n_glitch as f64
    } else {
        1.0
    };
    let c: Vec<f64> = y.iter().map(|&yi| if yi > 0.0 { params.c * glitch_weight } else { params.c }).collect();
    let mut smo = Smo {
        k,
        n,
        err: y.iter().map(|yi| -yi).collect(),
        y,
        c,
        alpha: vec![0.0; n],
        b: 0.0,
        tol: params.tolerance,
    };

    let mut iterations = 0;
    let mut converged = false;
    'outer: loop {
        let mut changed = 0;
        for i in 0..n {
            if !smo.violates(i) {
                continue;
            }
            let mut partners: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let ei = smo.err[i];
            partners.sort_by(|&a, &b| {
                let da = (ei - smo.err[a]).abs();
                let db = (ei - smo.err[b]).abs();
                db.total_cmp(&da).then(a.cmp(&b))
            });
            for j in partners {
                if smo.take_step(i, j) {
                    changed += 1;
                    iterations += 1;
                    break;
                }
            }
            if iterations >= params.max_iters {
                break 'outer;
            }
        }
        if changed == 0 {
            converged = (0..n).all(|i| !smo.violates(i));
            break;
        }
    }
    if !converged {
        warn!(iterations, "SVM solver stopped before all KKT conditions were met");
    }

    let bias = smo.final_bias();
    let mut support_vectors = Vec::new();
    let mut dual_coefs = Vec::new();
    for i in 0..n {
        if smo.alpha[i] > 0.0 {
            support_vectors.push(rows[i].clone());
            dual_coefs.push(smo.alpha[i] * smo.y[i]);
        }
    }
    let mut params = params.clone();
    params.kernel_scale = Some(kernel.scale);
    Ok(SvmModel {
        support_vectors,
        dual_coefs,
        bias,
        kernel,
        params,
        iterations,
        converged,
    })
}

/// Returns the predicted label and raw decision value. A decision value of
/// exactly zero is labelled Glitch.
pub fn svm_predict(model: &SvmModel, x: &[f64]) -> Result<(Label, f64)> {
    let v = model.decision_value(x)?;
    Ok((if v >= 0.0 { Label::Glitch } else { Label::Normal }, v))
}
