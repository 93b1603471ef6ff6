//! Least-distance quadratic programs `min ‖u‖² s.t. A u ≥ c`.
//!
//! The solver works on the dual through the classic reduction of a
//! least-distance program to nonnegative least squares: with
//! `E = [Aᵀ; cᵀ]` and `f = e_{q+1}`, solve `min ‖E y − f‖` over `y ≥ 0` by
//! an active-set (Lawson–Hanson) method. If the residual `r = E y − f` is
//! nonzero the primal optimum is `u = −r₁..q / r_{q+1}`; otherwise `y` is a
//! Farkas certificate (`Aᵀ y = 0`, `cᵀ y > 0`) that the constraints are
//! infeasible.
//!
//! With `ρ = 1 − cᵀy` one has `u = Aᵀ y / ρ`, so `λ = y / ρ` are the
//! multipliers of the KKT system `u = Aᵀλ`, `λ ≥ 0`, `λ ⊙ (A u − c) = 0`,
//! and `ρ = 1 / (1 + ‖u‖²)`.

use serde::Serialize;
use thiserror::Error;

use crate::linalg::{self, dot, Matrix, Vector};
use crate::network::Sign;
use crate::Real;

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QpError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
}

pub type Result<T> = std::result::Result<T, QpError>;

/// `min ‖u‖²` subject to `A u ≥ c`.
#[derive(Debug, Clone, PartialEq)]
pub struct LeastDistanceQp<T> {
    pub a: Matrix<T>,
    pub c: Vector<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    Infeasible,
    IterationLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution<T> {
    pub u: Vector<T>,
    pub status: QpStatus,
    /// `max(0, max_j c_j − a_jᵀu)`.
    pub max_constraint_residual: T,
    pub iterations: usize,
    /// `λ ≥ 0` with `u = Aᵀ λ`, one per original constraint row.
    pub multipliers: Vector<T>,
    /// Farkas vector `y ≥ 0` with `Aᵀy = 0`, `cᵀy = 1`, when infeasible.
    pub certificate: Option<Vector<T>>,
}

impl<T: Real> LeastDistanceQp<T> {
    pub fn new(a: Matrix<T>, c: Vector<T>) -> Result<Self> {
        if a.rows() != c.len() || a.rows() == 0 || a.cols() == 0 {
            return Err(QpError::Shape(format!(
                "constraint matrix {}×{} with {} right-hand sides",
                a.rows(),
                a.cols(),
                c.len()
            )));
        }
        Ok(LeastDistanceQp { a, c })
    }

    pub fn num_constraints(&self) -> usize {
        self.a.rows()
    }

    pub fn num_vars(&self) -> usize {
        self.a.cols()
    }

    /// `c − A u`, positive entries are violated rows.
    pub fn violations(&self, u: &[T]) -> Vector<T> {
        self.a
            .iter_rows()
            .zip(self.c.iter())
            .map(|(r, &cj)| cj - dot(r, u))
            .collect()
    }

    pub fn max_violation(&self, u: &[T]) -> T {
        self.violations(u).iter().fold(T::zero(), |m, &v| m.max(v))
    }
}

/// Constraints `s_j ((w + Δw)ᵀ v_j + b + Δb) ≥ δ` in the variable
/// `u = (Δw, Δb)`: row `j` of `A` is `s_j (v_jᵀ, 1)` and
/// `c_j = δ − s_j (wᵀ v_j + b)`.
pub fn build_neuron_qp<T: Real>(
    w: &[T],
    b: T,
    vertices: &Matrix<T>,
    signs: &[Sign],
    margin: T,
) -> Result<LeastDistanceQp<T>> {
    if vertices.cols() != w.len() || vertices.rows() != signs.len() {
        return Err(QpError::Shape(format!(
            "{} weights, {}×{} vertices, {} signs",
            w.len(),
            vertices.rows(),
            vertices.cols(),
            signs.len()
        )));
    }
    let q = w.len() + 1;
    let mut a = Matrix::zeros(vertices.rows(), q);
    let mut c = Vector::zeros(vertices.rows());
    for (j, (v, s)) in vertices.iter_rows().zip(signs).enumerate() {
        let sv: T = s.value();
        let row = a.row_mut(j);
        for (r, &x) in row.iter_mut().zip(v) {
            *r = sv * x;
        }
        row[q - 1] = sv;
        c[j] = margin - sv * (dot(w, v) + b);
    }
    LeastDistanceQp::new(a, c)
}

/// Indices of the first occurrence of every distinct `(a_j, c_j)` row.
fn distinct_rows<T: Real>(qp: &LeastDistanceQp<T>) -> Vec<usize> {
    let mut keep: Vec<usize> = Vec::new();
    for j in 0..qp.num_constraints() {
        let dup = keep
            .iter()
            .any(|&k| qp.c[k] == qp.c[j] && qp.a.row(k) == qp.a.row(j));
        if !dup {
            keep.push(j);
        }
    }
    keep
}

/// Solves the least-distance program; see the module docs for the method.
pub fn solve_least_distance<T: Real>(qp: &LeastDistanceQp<T>, tol: T, max_iter: usize) -> Result<QpSolution<T>> {
    if !(tol > T::zero()) {
        return Err(QpError::BadTolerance(tol.f64()));
    }
    let m = qp.num_constraints();
    let q = qp.num_vars();
    let zero_solution = |iterations| QpSolution {
        u: Vector::zeros(q),
        status: QpStatus::Optimal,
        max_constraint_residual: T::zero(),
        iterations,
        multipliers: Vector::zeros(m),
        certificate: None,
    };
    if qp.c.iter().all(|&cj| cj <= T::zero()) {
        return Ok(zero_solution(0));
    }

    let rows = distinct_rows(qp);
    let n = rows.len();
    // Column j of E is (a_j, c_j).
    let col = |j: usize| -> Vec<T> {
        let r = rows[j];
        let mut v = qp.a.row(r).to_vec();
        v.push(qp.c[r]);
        v
    };
    let cols: Vec<Vec<T>> = (0..n).map(col).collect();
    let scale: Vec<T> = cols
        .iter()
        .map(|c| T::one() + c.iter().fold(T::zero(), |m, x| m.max(x.abs())))
        .collect();

    let mut y = vec![T::zero(); n];
    let mut passive = vec![false; n];
    let mut blocked = vec![false; n];
    let mut iterations = 0usize;

    // Residual of the NNLS problem, f − E y.
    let residual = |y: &[T]| -> Vec<T> {
        let mut r = vec![T::zero(); q + 1];
        r[q] = T::one();
        for (j, &yj) in y.iter().enumerate() {
            if yj != T::zero() {
                for (ri, &e) in r.iter_mut().zip(&cols[j]) {
                    *ri -= yj * e;
                }
            }
        }
        r
    };

    let solve_passive = |passive: &[bool]| -> Option<Vec<T>> {
        let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
        let mut ep = Matrix::zeros(q + 1, idx.len());
        for (k, &j) in idx.iter().enumerate() {
            for i in 0..=q {
                ep[(i, k)] = cols[j][i];
            }
        }
        let mut f = Matrix::zeros(q + 1, 1);
        f[(q, 0)] = T::one();
        let s = linalg::least_squares(&ep, &f).ok()?;
        let mut full = vec![T::zero(); n];
        for (k, &j) in idx.iter().enumerate() {
            full[j] = s[(k, 0)];
        }
        Some(full)
    };

    while iterations < max_iter {
        iterations += 1;
        let r = residual(&y);
        // w_j = (a_j, c_j)·(f − E y) = ρ (c_j − a_jᵀu): scaled constraint violation.
        let rho = r[q];
        let mut best: Option<(usize, T)> = None;
        for j in 0..n {
            if passive[j] || blocked[j] {
                continue;
            }
            let wj = dot(&cols[j], &r);
            let thresh = tol * scale[j] * rho.max(T::epsilon());
            if wj > thresh && best.is_none_or(|(_, bw)| wj / scale[j] > bw) {
                best = Some((j, wj / scale[j]));
            }
        }
        let Some((t, _)) = best else {
            break;
        };
        passive[t] = true;
        let before = y.clone();

        loop {
            let Some(s) = solve_passive(&passive) else {
                passive[t] = false;
                y[t] = T::zero();
                break;
            };
            if (0..n).filter(|&j| passive[j]).all(|j| s[j] > T::zero()) {
                y = s;
                break;
            }
            // Step towards s until the first passive coordinate hits zero.
            let mut alpha = T::one();
            let mut hit = None;
            for j in (0..n).filter(|&j| passive[j]) {
                if s[j] <= T::zero() {
                    let a = y[j] / (y[j] - s[j]);
                    if a < alpha || hit.is_none() {
                        alpha = alpha.min(a);
                        hit = Some(j);
                    }
                }
            }
            for j in (0..n).filter(|&j| passive[j]) {
                let yj = y[j];
                y[j] = yj + alpha * (s[j] - yj);
            }
            if let Some(k) = hit {
                y[k] = T::zero();
            }
            for j in 0..n {
                if passive[j] && y[j] <= T::zero() {
                    passive[j] = false;
                    y[j] = T::zero();
                }
            }
            iterations += 1;
            if !passive.iter().any(|&p| p) || iterations >= max_iter {
                break;
            }
        }
        if y == before {
            // Round-off stall: the chosen column cannot enter. Skip it until
            // the passive set changes.
            passive[t] = false;
            blocked[t] = true;
        } else {
            blocked.iter_mut().for_each(|b| *b = false);
        }
    }

    let r = residual(&y);
    let rho = r[q];
    let mut multipliers = Vector::zeros(m);
    let cty: T = (0..n).map(|j| y[j] * qp.c[rows[j]]).sum();
    if rho <= T::of(100.0) * T::epsilon() && cty > T::zero() {
        let mut cert = Vector::zeros(m);
        for j in 0..n {
            cert[rows[j]] = y[j] / cty;
        }
        return Ok(QpSolution {
            u: Vector::zeros(q),
            status: QpStatus::Infeasible,
            max_constraint_residual: qp.max_violation(&vec![T::zero(); q]),
            iterations,
            multipliers,
            certificate: Some(cert),
        });
    }
    let u: Vector<T> = r[..q].iter().map(|&ri| -ri / rho).collect();
    for j in 0..n {
        multipliers[rows[j]] = y[j] / rho;
    }
    let resid = qp.max_violation(&u);
    let feasible = qp
        .violations(&u)
        .iter()
        .zip(qp.a.iter_rows())
        .zip(qp.c.iter())
        .all(|((&v, a), &c)| v <= tol * (T::one() + c.abs() + linalg::norm_inf(a)));
    // A stop on a numerically flat column can leave a tiny violation; report
    // it as non-convergence rather than claim optimality.
    let status = if feasible {
        QpStatus::Optimal
    } else {
        QpStatus::IterationLimit
    };
    Ok(QpSolution {
        u,
        status,
        max_constraint_residual: resid,
        iterations,
        multipliers,
        certificate: None,
    })
}

/// Outcome of intersecting the per-vertex bias intervals of one unit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasInterval {
    /// Largest lower bound on the new bias (`-inf` when none).
    pub lower: f64,
    /// Smallest upper bound on the new bias (`+inf` when none).
    pub upper: f64,
    /// Vertex row that produced `lower`.
    pub lower_vertex: Option<usize>,
    /// Vertex row that produced `upper`.
    pub upper_vertex: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum BiasFeasibility {
    Feasible(BiasInterval),
    Infeasible(BiasInterval),
}

impl BiasFeasibility {
    pub fn is_feasible(&self) -> bool {
        matches!(self, BiasFeasibility::Feasible(_))
    }

    pub fn interval(&self) -> &BiasInterval {
        match self {
            BiasFeasibility::Feasible(i) | BiasFeasibility::Infeasible(i) => i,
        }
    }
}

/// With the weights `w` frozen, finds the set of biases `b` for which
/// `s_j (wᵀ v_j + b) ≥ δ` holds at every vertex row.
pub fn bias_feasible<T: Real>(w: &[T], vertices: &Matrix<T>, signs: &[Sign], margin: T) -> Result<BiasFeasibility> {
    if vertices.cols() != w.len() || vertices.rows() != signs.len() {
        return Err(QpError::Shape(format!(
            "{} weights, {}×{} vertices, {} signs",
            w.len(),
            vertices.rows(),
            vertices.cols(),
            signs.len()
        )));
    }
    let mut iv = BiasInterval {
        lower: f64::NEG_INFINITY,
        upper: f64::INFINITY,
        lower_vertex: None,
        upper_vertex: None,
    };
    for (j, (v, s)) in vertices.iter_rows().zip(signs).enumerate() {
        let wv = dot(w, v);
        match s {
            Sign::Positive => {
                let lo = (margin - wv).f64();
                if lo > iv.lower {
                    iv.lower = lo;
                    iv.lower_vertex = Some(j);
                }
            }
            Sign::Negative => {
                let hi = (-margin - wv).f64();
                if hi < iv.upper {
                    iv.upper = hi;
                    iv.upper_vertex = Some(j);
                }
            }
        }
    }
    Ok(if iv.lower <= iv.upper {
        BiasFeasibility::Feasible(iv)
    } else {
        BiasFeasibility::Infeasible(iv)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qp(rows: &[&[f64]], c: &[f64]) -> LeastDistanceQp<f64> {
        LeastDistanceQp::new(Matrix::from_rows(rows).unwrap(), c.to_vec().into()).unwrap()
    }

    #[test]
    fn build_example() {
        let v = Matrix::from_rows(&[[2.0], [3.0]]).unwrap();
        let p = build_neuron_qp(&[1.0], 0.0, &v, &[Sign::Negative; 2], 0.0).unwrap();
        assert_eq!(p.a.to_rows(), vec![vec![-2.0, -1.0], vec![-3.0, -1.0]]);
        assert_eq!(p.c.0, vec![2.0, 3.0]);

        let sat = build_neuron_qp(&[1.0], 0.0, &v, &[Sign::Positive; 2], 0.0).unwrap();
        assert!(sat.c.iter().all(|&c| c <= 0.0));

        let shifted = build_neuron_qp(&[1.0], 0.0, &v, &[Sign::Negative; 2], 0.25).unwrap();
        for (a, b) in shifted.c.iter().zip(p.c.iter()) {
            assert_eq!(*a, b + 0.25);
        }
        assert!(build_neuron_qp(&[1.0, 2.0], 0.0, &v, &[Sign::Negative; 2], 0.0).is_err());
    }

    #[test]
    fn unconstrained_optimum() {
        let p = qp(&[&[1.0, 2.0], &[-1.0, 0.5]], &[-1.0, 0.0]);
        let s = solve_least_distance(&p, 1e-10, 1000).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert_eq!(s.u.0, vec![0.0, 0.0]);
    }

    #[test]
    fn single_halfspace_projection() {
        let a = [1.0, -2.0, 0.5];
        let p = qp(&[&a], &[3.0]);
        let s = solve_least_distance(&p, 1e-12, 1000).unwrap();
        let n2: f64 = a.iter().map(|x| x * x).sum();
        for (ui, ai) in s.u.iter().zip(a) {
            assert!((ui - 3.0 * ai / n2).abs() < 1e-14);
        }
        assert!((s.multipliers[0] - 3.0 / n2).abs() < 1e-14);
    }

    #[test]
    fn worked_neuron_example() {
        let v = Matrix::from_rows(&[[2.0], [3.0]]).unwrap();
        let p = build_neuron_qp::<f64>(&[1.0], 0.0, &v, &[Sign::Negative; 2], 0.0).unwrap();
        let s = solve_least_distance(&p, 1e-12, 1000).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.u[0] + 0.9).abs() < 1e-12);
        assert!((s.u[1] + 0.3).abs() < 1e-12);
        // New parameters w = 0.1, b = −0.3.
        let (w, b) = (1.0 + s.u[0], s.u[1]);
        assert!((w * 2.0 + b + 0.1).abs() < 1e-12);
        assert!((w * 3.0 + b).abs() < 1e-12);
    }

    #[test]
    fn infeasible_system_has_certificate() {
        // u ≥ 1 and −u ≥ 1.
        let p = qp(&[&[1.0], &[-1.0]], &[1.0, 1.0]);
        let s = solve_least_distance(&p, 1e-10, 1000).unwrap();
        assert_eq!(s.status, QpStatus::Infeasible);
        let y = s.certificate.unwrap();
        assert!(y.iter().all(|&v| v >= 0.0));
        let aty: f64 = y[0] - y[1];
        assert!(aty.abs() < 1e-12);
        assert!(y[0] + y[1] > 0.0);
    }

    #[test]
    fn duplicate_rows_are_harmless() {
        let p = qp(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, -1.0]], &[2.0, 2.0, 0.0]);
        let s = solve_least_distance(&p, 1e-12, 1000).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.u[0] - 1.0).abs() < 1e-12 && (s.u[1] - 1.0).abs() < 1e-12);
        assert_eq!(s.multipliers[1], 0.0);
    }

    #[test]
    fn rejects_bad_tolerance() {
        let p = qp(&[&[1.0]], &[1.0]);
        assert!(solve_least_distance(&p, 0.0, 10).is_err());
    }

    #[test]
    fn bias_only_contradiction() {
        // w = 1, R1 = [0, 1] positive, R2 = [2, 3] negative.
        let v = Matrix::from_rows(&[[0.0], [1.0], [2.0], [3.0]]).unwrap();
        let signs = [Sign::Positive, Sign::Positive, Sign::Negative, Sign::Negative];
        let r = bias_feasible(&[1.0], &v, &signs, 0.0).unwrap();
        assert!(!r.is_feasible());
        let iv = r.interval();
        assert_eq!(iv.lower, 0.0);
        assert_eq!(iv.upper, -3.0);
        assert_eq!(iv.lower_vertex, Some(0));
        assert_eq!(iv.upper_vertex, Some(3));
    }

    #[test]
    fn bias_only_feasible_cases() {
        let v = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        assert!(bias_feasible(&[1.0], &v, &[Sign::Negative; 2], 0.0).unwrap().is_feasible());
        let v2 = Matrix::from_rows(&[[0.0], [1.0], [2.0], [3.0]]).unwrap();
        let r = bias_feasible(&[1.0], &v2, &[Sign::Positive; 4], 0.0).unwrap();
        assert!(r.is_feasible());
        assert_eq!(r.interval().lower, 0.0);
        assert_eq!(r.interval().upper, f64::INFINITY);
    }
}
