//! Sampling certificates that a network is a single affine map on a region.
//!
//! A point agrees with a pattern when every hidden pre-activation satisfies
//! `sign · z ≥ −τ`, i.e. the point lies in the closure of that pattern's
//! polytope up to round-off. On the closure the network still equals the
//! pattern's affine map, so this is the right notion for units that sit
//! exactly on a region's boundary after enforcement with zero margin.

use serde::Serialize;
use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix, Vector};
use crate::network::{ActivationPattern, BatchTrace, MlpNetwork, NetworkError};
use crate::regions::{sample_convex_combinations, ConvexRegion, RegionError};
use crate::signs::SignMap;
use crate::Real;

pub const DEFAULT_SAMPLES: usize = 10_000;
/// Relative residual accepted as exact affinity.
pub const AFFINE_TOL: f64 = 1e-9;
/// Relative slack on `sign · z ≥ 0` when matching patterns.
pub const PATTERN_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VerifyError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("region `{region}` vertex {vertex} does not realise the expected pattern")]
    PatternMismatch { region: String, vertex: usize },
    #[error("regions have dimensions {0} and {1}")]
    DimensionMismatch(usize, usize),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, VerifyError>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AffinityReport {
    pub region_id: String,
    /// All samples and vertices agree with one pattern.
    pub pattern_constant: bool,
    /// That pattern is the expected one.
    pub assigned_pattern_matched: bool,
    /// Max relative deviation of sample outputs from the affine map fitted to
    /// the vertex outputs.
    pub affine_residual: f64,
    /// Same against the closed-form map of the expected pattern.
    pub closed_form_residual: f64,
    pub sampled_constraint_violation: f64,
    pub samples_used: usize,
    /// The vertex set was affinely degenerate and samples joined the fit.
    pub fit_used_samples: bool,
    /// First sample that disagrees with the expected pattern.
    pub counterexample: Option<Vec<f64>>,
}

impl AffinityReport {
    pub fn certified(&self) -> bool {
        self.pattern_constant
            && self.assigned_pattern_matched
            && self.affine_residual <= AFFINE_TOL
            && self.closed_form_residual <= AFFINE_TOL
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HullReport {
    pub region_a: String,
    pub region_b: String,
    pub hull_pattern_constant: bool,
    pub hull_affine_residual: f64,
    pub samples_used: usize,
}

/// Per-unit slack `τ` for a batch of pre-activations.
fn unit_tolerances<T: Real>(z: &Matrix<T>) -> Vec<f64> {
    (0..z.cols())
        .map(|j| {
            let m = z.iter_rows().fold(0.0f64, |m, r| m.max(r[j].f64().abs()));
            PATTERN_TOL * (1.0 + m)
        })
        .collect()
}

/// Whether no hidden unit takes clearly positive and clearly negative
/// values over the traced points.
fn pattern_constant<T: Real>(trace: &BatchTrace<T>, hidden: usize) -> bool {
    trace.pre_activations[..hidden].iter().all(|z| {
        let tol = unit_tolerances(z);
        (0..z.cols()).all(|j| {
            let pos = z.iter_rows().any(|r| r[j].f64() > tol[j]);
            let neg = z.iter_rows().any(|r| r[j].f64() < -tol[j]);
            !(pos && neg)
        })
    })
}

/// Rows of the trace that disagree with `pattern`.
fn mismatching_rows<T: Real>(trace: &BatchTrace<T>, pattern: &ActivationPattern) -> Vec<usize> {
    let rows = trace.input.rows();
    let mut bad = vec![false; rows];
    for (l, z) in trace.pre_activations[..pattern.layers.len()].iter().enumerate() {
        let tol = unit_tolerances(z);
        for (i, r) in z.iter_rows().enumerate() {
            if r.iter()
                .zip(&pattern.layers[l])
                .zip(&tol)
                .any(|((&zv, s), &t)| s.value::<f64>() * zv.f64() < -t)
            {
                bad[i] = true;
            }
        }
    }
    (0..rows).filter(|&i| bad[i]).collect()
}

/// Least-squares affine fit `y ≈ Λ x + γ`, returned as the stacked
/// `(D+1) × K` coefficient matrix.
fn fit_affine<T: Real>(x: &Matrix<T>, y: &Matrix<T>) -> Result<Matrix<T>> {
    let (n, d) = x.shape();
    let mut a = Matrix::zeros(n, d + 1);
    for i in 0..n {
        a.row_mut(i)[..d].copy_from_slice(x.row(i));
        a[(i, d)] = T::one();
    }
    Ok(linalg::least_squares(&a, y)?)
}

/// Max relative deviation of `y` from the affine map `coef` over the rows of `x`.
fn fit_residual<T: Real>(coef: &Matrix<T>, x: &Matrix<T>, y: &Matrix<T>) -> f64 {
    let d = x.cols();
    let mut dev = 0.0f64;
    let mut mag = 0.0f64;
    for (xi, yi) in x.iter_rows().zip(y.iter_rows()) {
        for (k, &yk) in yi.iter().enumerate() {
            let mut p = coef[(d, k)];
            for j in 0..d {
                p += coef[(j, k)] * xi[j];
            }
            dev = dev.max((yk - p).f64().abs());
            mag = mag.max(yk.f64().abs());
        }
    }
    dev / (1.0 + mag)
}

fn map_residual<T: Real>(lambda: &Matrix<T>, gamma: &Vector<T>, x: &Matrix<T>, y: &Matrix<T>) -> f64 {
    let mut dev = 0.0f64;
    let mut mag = 0.0f64;
    for (xi, yi) in x.iter_rows().zip(y.iter_rows()) {
        let p = linalg::matvec(lambda, xi).expect("shapes agree");
        for (k, &yk) in yi.iter().enumerate() {
            dev = dev.max((yk - p[k] - gamma[k]).f64().abs());
            mag = mag.max(yk.f64().abs());
        }
    }
    dev / (1.0 + mag)
}

/// Certifies that `net` is one affine map on `region`, matching `expected`.
pub fn certify_region<T: Real>(
    net: &MlpNetwork<T>,
    region: &ConvexRegion<T>,
    expected: &ActivationPattern,
    n_samples: usize,
    seed: u64,
) -> Result<AffinityReport> {
    let needed = region.num_vertices() + region.dim() + 1;
    if n_samples < needed {
        return Err(VerifyError::TooFewSamples { needed, got: n_samples });
    }
    let hidden = net.num_hidden_layers();
    let samples = region.sample_interior(n_samples, seed);
    let points = region.vertices().vstack(&samples)?;
    let trace = net.forward_trace_batch(&points)?;
    let outputs = trace.output();
    let p = region.num_vertices();

    let constant = pattern_constant(&trace, hidden);
    let bad = mismatching_rows(&trace, expected);
    let counterexample = bad
        .iter()
        .find(|&&i| i >= p)
        .or(bad.first())
        .map(|&i| points.row(i).iter().map(|v| v.f64()).collect());

    let vert_out = Matrix::from_rows(&outputs.to_rows()[..p])?;
    let (coef, fit_used_samples) = match fit_affine(region.vertices(), &vert_out) {
        Ok(c) => (c, false),
        Err(VerifyError::Linalg(LinalgError::RankDeficient { .. })) => (fit_affine(&points, outputs)?, true),
        Err(e) => return Err(e),
    };
    let (lambda, gamma) = net.extract_affine(expected)?;
    let sample_out = Matrix::from_rows(&outputs.to_rows()[p..])?;

    Ok(AffinityReport {
        region_id: region.id.clone(),
        pattern_constant: constant,
        assigned_pattern_matched: bad.is_empty(),
        affine_residual: fit_residual(&coef, &samples, &sample_out),
        closed_form_residual: map_residual(&lambda, &gamma, &points, outputs),
        sampled_constraint_violation: region.violation_at(&sample_out)?.f64(),
        samples_used: n_samples,
        fit_used_samples,
        counterexample,
    })
}

/// Whether every region carries a different global pattern.
pub fn certify_distinct(map: &SignMap) -> bool {
    map.all_distinct()
}

/// Tests whether `net` is a single affine map over the convex hull of both
/// regions.
pub fn hull_check<T: Real>(
    net: &MlpNetwork<T>,
    a: &ConvexRegion<T>,
    b: &ConvexRegion<T>,
    n_samples: usize,
    seed: u64,
) -> Result<HullReport> {
    if a.dim() != b.dim() {
        return Err(VerifyError::DimensionMismatch(a.dim(), b.dim()));
    }
    let corners = a.vertices().vstack(b.vertices())?;
    let samples = sample_convex_combinations(&corners, n_samples, seed);
    let points = corners.vstack(&samples)?;
    let trace = net.forward_trace_batch(&points)?;
    let outputs = trace.output();
    let p = corners.rows();
    let corner_out = Matrix::from_rows(&outputs.to_rows()[..p])?;
    let coef = match fit_affine(&corners, &corner_out) {
        Ok(c) => c,
        Err(VerifyError::Linalg(LinalgError::RankDeficient { .. })) => fit_affine(&points, outputs)?,
        Err(e) => return Err(e),
    };
    Ok(HullReport {
        region_a: a.id.clone(),
        region_b: b.id.clone(),
        hull_pattern_constant: pattern_constant(&trace, net.num_hidden_layers()),
        hull_affine_residual: fit_residual(&coef, &points, outputs),
        samples_used: n_samples,
    })
}

/// Closed-form `(Λ, γ)` of `region` after checking that every vertex
/// realises `expected`.
pub fn extract_region_affine<T: Real>(
    net: &MlpNetwork<T>,
    region: &ConvexRegion<T>,
    expected: &ActivationPattern,
) -> Result<(Matrix<T>, Vector<T>)> {
    let trace = net.forward_trace_batch(region.vertices())?;
    if let Some(&vertex) = mismatching_rows(&trace, expected).first() {
        return Err(VerifyError::PatternMismatch {
            region: region.id.clone(),
            vertex,
        });
    }
    Ok(net.extract_affine(expected)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{LayerParams, Sign};
    use crate::regions::make_interval;

    fn net_1d() -> MlpNetwork<f64> {
        // z = x − 1, y = relu(z): kink at x = 1.
        MlpNetwork::new(
            vec![
                LayerParams::new(Matrix::from_rows(&[[1.0]]).unwrap(), vec![-1.0].into()).unwrap(),
                LayerParams::new(Matrix::from_rows(&[[1.0]]).unwrap(), vec![0.0].into()).unwrap(),
            ],
            0.0,
        )
        .unwrap()
    }

    fn pat(s: Sign) -> ActivationPattern {
        ActivationPattern::new(vec![vec![s]])
    }

    #[test]
    fn region_on_one_side_certifies() {
        let r = ConvexRegion::new("R", make_interval(2.0, 3.0).unwrap()).unwrap();
        let rep = certify_region(&net_1d(), &r, &pat(Sign::Positive), 500, 1).unwrap();
        assert!(rep.certified(), "{rep:?}");
        assert!(rep.counterexample.is_none());
        let wrong = certify_region(&net_1d(), &r, &pat(Sign::Negative), 500, 1).unwrap();
        assert!(wrong.pattern_constant);
        assert!(!wrong.assigned_pattern_matched);
        assert!(wrong.counterexample.is_some());
    }

    #[test]
    fn region_across_kink_fails() {
        let r = ConvexRegion::new("R", make_interval(0.0, 3.0).unwrap()).unwrap();
        let rep = certify_region(&net_1d(), &r, &pat(Sign::Positive), 500, 1).unwrap();
        assert!(!rep.pattern_constant);
        assert!(rep.affine_residual > 1e-3);
        assert!(!rep.certified());
    }

    #[test]
    fn boundary_touching_region_counts_as_matched() {
        let r = ConvexRegion::new("R", make_interval(0.0, 1.0).unwrap()).unwrap();
        let rep = certify_region(&net_1d(), &r, &pat(Sign::Negative), 500, 1).unwrap();
        assert!(rep.certified(), "{rep:?}");
    }

    #[test]
    fn divided_difference() {
        let r = ConvexRegion::new("R", make_interval(2.0, 3.0).unwrap()).unwrap();
        let (l, g) = extract_region_affine(&net_1d(), &r, &pat(Sign::Positive)).unwrap();
        assert_eq!(l[(0, 0)], 1.0);
        assert_eq!(g[0], -1.0);
        assert!(matches!(
            extract_region_affine(&net_1d(), &r, &pat(Sign::Negative)),
            Err(VerifyError::PatternMismatch { vertex: 0, .. })
        ));
    }

    #[test]
    fn too_few_samples() {
        let r = ConvexRegion::new("R", make_interval(2.0, 3.0).unwrap()).unwrap();
        assert!(matches!(
            certify_region(&net_1d(), &r, &pat(Sign::Positive), 3, 1),
            Err(VerifyError::TooFewSamples { needed: 4, got: 3 })
        ));
    }

    #[test]
    fn hull_across_kink() {
        let a = ConvexRegion::new("A", make_interval(-1.0, 0.0).unwrap()).unwrap();
        let b = ConvexRegion::new("B", make_interval(2.0, 3.0).unwrap()).unwrap();
        let h = hull_check(&net_1d(), &a, &b, 500, 2).unwrap();
        assert!(!h.hull_pattern_constant);
        let same = hull_check(&net_1d(), &b, &b, 500, 2).unwrap();
        assert!(same.hull_pattern_constant);
        assert!(same.hull_affine_residual < 1e-12);
    }

    #[test]
    fn distinctness() {
        let one = SignMap::new(vec![("A".into(), pat(Sign::Positive))]);
        assert!(certify_distinct(&one));
        let dup = SignMap::new(vec![("A".into(), pat(Sign::Positive)), ("B".into(), pat(Sign::Positive))]);
        assert!(!certify_distinct(&dup));
    }
}
