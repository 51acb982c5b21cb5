//! Test-only reference computations on plain `Vec` matrices.
//!
//! Nothing here touches nalgebra or the crate's own solvers: every routine is a
//! direct, unoptimized transcription of the closed-form expression it checks.
//! Integration tests pull this file in with `#[path]`.

#![allow(dead_code)]

pub type Mat = Vec<Vec<f64>>;

pub fn zeros(r: usize, c: usize) -> Mat {
    vec![vec![0.0; c]; r]
}

pub fn transpose(a: &Mat) -> Mat {
    if a.is_empty() {
        return Vec::new();
    }
    (0..a[0].len()).map(|j| a.iter().map(|row| row[j]).collect()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = a.len();
    let m = b.first().map_or(0, |r| r.len());
    let k = b.len();
    let mut out = zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn matvec(a: &Mat, x: &[f64]) -> Vec<f64> {
    a.iter().map(|row| row.iter().zip(x).map(|(p, q)| p * q).sum()).collect()
}

/// Gaussian elimination with partial pivoting; solves `A X = B` for each column of B.
pub fn solve_multi(a: &Mat, b: &Mat) -> Mat {
    let n = a.len();
    let m = b[0].len();
    let mut aug: Mat = (0..n)
        .map(|i| {
            let mut row = a[i].clone();
            row.extend_from_slice(&b[i]);
            row
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| aug[i][col].abs().partial_cmp(&aug[j][col].abs()).unwrap())
            .unwrap();
        aug.swap(col, pivot);
        let p = aug[col][col];
        assert!(p.abs() > 0.0, "oracle: singular system");
        for row in col + 1..n {
            let f = aug[row][col] / p;
            if f != 0.0 {
                for k in col..n + m {
                    aug[row][k] -= f * aug[col][k];
                }
            }
        }
    }
    let mut x = zeros(n, m);
    for j in 0..m {
        for i in (0..n).rev() {
            let mut s = aug[i][n + j];
            for k in i + 1..n {
                s -= aug[i][k] * x[k][j];
            }
            x[i][j] = s / aug[i][i];
        }
    }
    x
}

pub fn solve(a: &Mat, b: &[f64]) -> Vec<f64> {
    let bm: Mat = b.iter().map(|v| vec![*v]).collect();
    solve_multi(a, &bm).into_iter().map(|r| r[0]).collect()
}

pub fn inverse(a: &Mat) -> Mat {
    let n = a.len();
    let id: Mat = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    solve_multi(a, &id)
}

pub fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

pub fn gaussian_cov(h: f64, sill: f64, a: f64) -> f64 {
    sill * (-(h * h) / a).exp()
}

pub fn exponential_cov(h: f64, sill: f64, l: f64) -> f64 {
    sill * (-h / l).exp()
}

/// Double-loop Gram matrix.
pub fn gram(points: &[[f64; 3]], k: &dyn Fn(f64) -> f64) -> Mat {
    let n = points.len();
    let mut out = zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out[i][j] = k(dist(points[i], points[j]));
        }
    }
    out
}

pub fn cross_cov(a: &[[f64; 3]], b: &[[f64; 3]], k: &dyn Fn(f64) -> f64) -> Mat {
    a.iter().map(|p| b.iter().map(|q| k(dist(*p, *q))).collect()).collect()
}

/// Zero-mean GP posterior via explicit inverse:
/// `μ* = K*ᵀ (K + σ²I)⁻¹ y`, `Σ* = K** − K*ᵀ (K + σ²I)⁻¹ K*`.
pub fn gp_posterior(
    x: &[[f64; 3]],
    y: &[f64],
    noise: f64,
    xs: &[[f64; 3]],
    k: &dyn Fn(f64) -> f64,
) -> (Vec<f64>, Mat) {
    let kss = gram(xs, k);
    if x.is_empty() {
        return (vec![0.0; xs.len()], kss);
    }
    let mut kk = gram(x, k);
    for (i, row) in kk.iter_mut().enumerate() {
        row[i] += noise;
    }
    let kinv = inverse(&kk);
    let ks = cross_cov(x, xs, k); // N × N*
    let kst = transpose(&ks);
    let w = matmul(&kst, &kinv); // N* × N
    let mean = matvec(&w, y);
    let reduce = matmul(&w, &ks);
    let mut cov = kss;
    for i in 0..cov.len() {
        for j in 0..cov.len() {
            cov[i][j] -= reduce[i][j];
        }
    }
    (mean, cov)
}

/// Solves the 12×12 normal equations `JᵀJ θ = Jᵀ y` of the affine least-squares
/// problem; θ is row-major `[A | t]`.
pub fn affine_normal_equations(pre: &[[f64; 3]], post: &[[f64; 3]]) -> Vec<f64> {
    let mut jac = Vec::new();
    let mut rhs = Vec::new();
    for (p, q) in pre.iter().zip(post) {
        for r in 0..3 {
            let mut row = vec![0.0; 12];
            row[r * 4] = p[0];
            row[r * 4 + 1] = p[1];
            row[r * 4 + 2] = p[2];
            row[r * 4 + 3] = 1.0;
            jac.push(row);
            rhs.push(q[r]);
        }
    }
    let jt = transpose(&jac);
    let jtj = matmul(&jt, &jac);
    let jty = matvec(&jt, &rhs);
    solve(&jtj, &jty)
}

/// Standard 3-D thin-plate block system `[[U, P], [Pᵀ, 0]] [w; c] = [d; 0]`,
/// `U_ij = ‖x_i − x_j‖`, `P = [1 x y z]`; evaluates the interpolant at `queries`.
pub fn tps_predict(centers: &[[f64; 3]], values: &[f64], queries: &[[f64; 3]]) -> Vec<f64> {
    let n = centers.len();
    let mut a = zeros(n + 4, n + 4);
    let mut b = vec![0.0; n + 4];
    for i in 0..n {
        for j in 0..n {
            a[i][j] = dist(centers[i], centers[j]);
        }
        let poly = [1.0, centers[i][0], centers[i][1], centers[i][2]];
        for k in 0..4 {
            a[i][n + k] = poly[k];
            a[n + k][i] = poly[k];
        }
        b[i] = values[i];
    }
    let coef = solve(&a, &b);
    queries
        .iter()
        .map(|q| {
            let mut s = coef[n] + coef[n + 1] * q[0] + coef[n + 2] * q[1] + coef[n + 3] * q[2];
            for i in 0..n {
                s += coef[i] * dist(centers[i], *q);
            }
            s
        })
        .collect()
}

/// Symmetric eigenvalues by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(a: &Mat) -> Vec<f64> {
    let n = a.len();
    let mut m = a.clone();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    off += m[i][j] * m[i][j];
                }
            }
        }
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
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k][p];
                    let mkq = m[k][q];
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p][k];
                    let mqk = m[q][k];
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i][i]).collect()
}
