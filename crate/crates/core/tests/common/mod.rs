//! Independent reference computations used as oracles by the integration
//! tests. Nothing here calls into the library's numerical routines.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

/// Cyclic Jacobi eigensolver for a symmetric matrix. Returns eigenvalues in
/// descending order with matching unit eigenvector columns.
pub fn jacobi_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut m = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| m[(i, j)].powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| m[(j, j)].partial_cmp(&m[(i, i)]).unwrap());
    let values = idx.iter().map(|&i| m[(i, i)]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| v[(r, idx[c])]);
    (values, vectors)
}

pub fn grid_adjacency(rows: usize, cols: usize) -> DMatrix<f64> {
    let c = rows * cols;
    let mut a = DMatrix::zeros(c, c);
    for r in 0..rows {
        for s in 0..cols {
            let x = r * cols + s;
            if s + 1 < cols {
                a[(x, x + 1)] = 1.0;
                a[(x + 1, x)] = 1.0;
            }
            if r + 1 < rows {
                a[(x, x + cols)] = 1.0;
                a[(x + cols, x)] = 1.0;
            }
        }
    }
    a
}

pub fn walk_pi(adj: &DMatrix<f64>) -> DVector<f64> {
    let deg: Vec<f64> = (0..adj.nrows()).map(|i| adj.row(i).iter().sum()).collect();
    let total: f64 = deg.iter().sum();
    DVector::from_iterator(deg.len(), deg.iter().map(|d| d / total))
}

/// `(W, d, M)` by explicit loops.
pub fn dense_operator(adj: &DMatrix<f64>, pi: &DVector<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let c = adj.nrows();
    let mut w = DMatrix::zeros(c, c);
    for x in 0..c {
        for y in 0..c {
            w[(x, y)] = adj[(x, y)] * pi[x] * pi[y];
        }
    }
    let d: Vec<f64> = (0..c).map(|x| (0..c).map(|y| w[(x, y)]).sum()).collect();
    let mut m = DMatrix::zeros(c, c);
    for x in 0..c {
        for y in 0..c {
            m[(x, y)] = w[(x, y)] / (d[x] * d[y]).sqrt();
        }
    }
    (w, d, m)
}

/// `Σ_{x,y} w_xy ‖z_x − z_y‖²` over both orderings.
pub fn double_sum_energy(z: &DMatrix<f64>, w: &DMatrix<f64>) -> f64 {
    let c = w.nrows();
    let mut e = 0.0;
    for x in 0..c {
        for y in 0..c {
            if w[(x, y)] != 0.0 {
                let diff: f64 = (0..z.nrows()).map(|i| (z[(i, x)] - z[(i, y)]).powi(2)).sum();
                e += w[(x, y)] * diff;
            }
        }
    }
    e
}

/// Largest principal angle (degrees) between two column spaces of equal
/// dimension, via the spectral norm of the difference of orthogonal
/// projectors: `‖P_A − P_B‖₂ = sin θ_max`.
pub fn max_angle_by_projectors(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let pa = projector(a);
    let pb = projector(b);
    let diff = &pa - &pb;
    let (vals, _) = jacobi_eigen(&diff);
    let s = vals.iter().fold(0.0f64, |m, v| m.max(v.abs())).min(1.0);
    s.asin().to_degrees()
}

fn projector(a: &DMatrix<f64>) -> DMatrix<f64> {
    // Gram-Schmidt on the columns.
    let mut q: Vec<DVector<f64>> = Vec::new();
    for j in 0..a.ncols() {
        let mut v = a.column(j).into_owned();
        for u in &q {
            let p = u.dot(&v);
            v -= u * p;
        }
        let n = v.norm();
        if n > 1e-12 {
            q.push(v / n);
        }
    }
    let mut p = DMatrix::zeros(a.nrows(), a.nrows());
    for u in &q {
        p += u * u.transpose();
    }
    p
}

/// Dense row-stochastic matrix of a typed reflecting map, straight from the
/// definition: row `k` (0-based, `k ≥ c`) spreads `1/R_k` over every
/// `j ≤ k` with `x_j ∈ f(x_k)`; rows `k < c` are self-attention.
pub fn dense_reflecting(tokens: &[usize], c: usize, admissible: impl Fn(usize, usize) -> bool) -> DMatrix<f64> {
    let n = tokens.len();
    let mut a = DMatrix::zeros(n, n);
    for k in 0..n {
        if k < c {
            a[(k, k)] = 1.0;
            continue;
        }
        let cols: Vec<usize> = (0..=k).filter(|&j| admissible(tokens[k], tokens[j])).collect();
        for &j in &cols {
            a[(k, j)] = 1.0 / cols.len() as f64;
        }
    }
    a
}

pub fn dense_sink(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |_, j| if j == 0 { 1.0 } else { 0.0 })
}

pub fn dense_uniform(n: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |k, j| {
        if k < c {
            if j == k {
                1.0
            } else {
                0.0
            }
        } else if j <= k {
            1.0 / (k + 1) as f64
        } else {
            0.0
        }
    })
}
