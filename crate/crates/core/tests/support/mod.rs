//! Independent reference computations shared by the integration and
//! acceptance tests. Nothing here calls into the library's numeric code.

#![allow(dead_code)]

/// Unbiased covariance of row-major `rows`.
pub fn covariance(rows: &[[f64; 3]]) -> [[f64; 3]; 3] {
    let n = rows.len() as f64;
    let mut mean = [0.0; 3];
    for r in rows {
        for j in 0..3 {
            mean[j] += r[j] / n;
        }
    }
    let mut c = [[0.0; 3]; 3];
    for r in rows {
        for i in 0..3 {
            for j in 0..3 {
                c[i][j] += (r[i] - mean[i]) * (r[j] - mean[j]) / (n - 1.0);
            }
        }
    }
    c
}

/// Eigenvalues of a symmetric 3×3 matrix from its characteristic
/// polynomial (trigonometric root formula), descending.
pub fn eigenvalues_3x3(a: [[f64; 3]; 3]) -> [f64; 3] {
    let p1 = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
    let q = (a[0][0] + a[1][1] + a[2][2]) / 3.0;
    if p1 == 0.0 {
        let mut d = [a[0][0], a[1][1], a[2][2]];
        d.sort_by(|x, y| y.total_cmp(x));
        return d;
    }
    let p2 = (a[0][0] - q).powi(2) + (a[1][1] - q).powi(2) + (a[2][2] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let mut b = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            b[i][j] = (a[i][j] - if i == j { q } else { 0.0 }) / p;
        }
    }
    let det_b = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1]) - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
        + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
    let r = (det_b / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let e1 = q + 2.0 * p * phi.cos();
    let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    let e2 = 3.0 * q - e1 - e3;
    [e1, e2, e3]
}

fn cross(u: [f64; 3], v: [f64; 3]) -> [f64; 3] {
    [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]]
}

/// Unit eigenvector for a simple eigenvalue: the longest cross product of
/// two rows of `A − λI`.
pub fn eigenvector_3x3(a: [[f64; 3]; 3], lambda: f64) -> [f64; 3] {
    let mut m = a;
    for (i, row) in m.iter_mut().enumerate() {
        row[i] -= lambda;
    }
    let cands = [cross(m[0], m[1]), cross(m[0], m[2]), cross(m[1], m[2])];
    let norm = |v: &[f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let best = cands.iter().copied().max_by(|x, y| norm(x).total_cmp(&norm(y))).unwrap();
    let n = norm(&best);
    [best[0] / n, best[1] / n, best[2] / n]
}

/// Largest gap between two vectors allowing a global sign flip.
pub fn sign_free_gap(a: &[f64], b: &[f64]) -> f64 {
    let same = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let flip = a.iter().zip(b).map(|(x, y)| (x + y).abs()).fold(0.0, f64::max);
    same.min(flip)
}

pub const PCA_FIXTURES: [[[f64; 3]; 5]; 3] = [
    [[2.0, 0.0, 1.0], [1.0, 3.0, -1.0], [0.0, 1.0, 4.0], [5.0, 2.0, 0.0], [-1.0, 1.5, 2.0]],
    [[0.1, 0.2, 0.3], [1.4, -0.5, 0.9], [-2.0, 1.1, 0.0], [0.7, 0.7, -1.3], [3.3, -2.2, 0.5]],
    [[10.0, 9.0, 1.0], [12.0, 11.5, -0.5], [8.0, 7.0, 2.0], [11.0, 10.5, 0.2], [9.5, 8.0, 1.7]],
];

/// Dual-form decision value `Σ cᵢ (s⟨svᵢ, x⟩ + o)^d + b`, evaluated with
/// explicit loops and repeated multiplication.
pub fn dual_decision(svs: &[Vec<f64>], coefs: &[f64], bias: f64, scale: f64, offset: f64, degree: u32, x: &[f64]) -> f64 {
    let mut total = bias;
    for (sv, c) in svs.iter().zip(coefs) {
        let mut dot = 0.0;
        for k in 0..x.len() {
            dot += sv[k] * x[k];
        }
        let base = scale * dot + offset;
        let mut pow = 1.0;
        for _ in 0..degree {
            pow *= base;
        }
        total += c * pow;
    }
    total
}

/// Hand-integrated inverse-CDF fixtures: `(a, b, W₁)`.
pub fn wasserstein_fixtures() -> Vec<(Vec<f64>, Vec<f64>, f64)> {
    vec![
        // quantile functions coincide
        (vec![0.0, 1.0], vec![0.0, 0.0, 1.0, 1.0], 0.0),
        // ½·|0−1| + ½·|0−3|
        (vec![0.0], vec![1.0, 3.0], 2.0),
        // pieces (0,⅓]:0, (⅓,½]:1·⅙, (½,⅔]:2·⅙, (⅔,1]:1·⅓
        (vec![0.0, 1.0, 2.0], vec![0.0, 3.0], 5.0 / 6.0),
    ]
}

/// Brute-force up/down neuron sets straight from the definitions.
pub fn brute_neuron_sets(table: &[Vec<f64>], m: f64, quota: f64) -> (Vec<usize>, Vec<usize>) {
    let width = table[0].len();
    let mut up = Vec::new();
    let mut down = Vec::new();
    for i in 0..width {
        let mut above = 0;
        for row in table {
            if row[i] > m {
                above += 1;
            }
        }
        let fraction = above as f64 / table.len() as f64;
        if fraction >= quota {
            up.push(i);
        }
        if above == 0 {
            down.push(i);
        }
    }
    (up, down)
}
