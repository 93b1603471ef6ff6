//! Convex regions in vertex representation and the affine output constraints
//! attached to them.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Matrix, Vector};
use crate::Real;

/// Largest box dimension accepted by [`make_box`]; `2^D` vertices are built.
pub const MAX_BOX_DIM: usize = 20;

/// Vertices closer than this in the ∞-norm are merged.
pub const DUPLICATE_VERTEX_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegionError {
    #[error("empty interval [{a}, {b}]")]
    EmptyInterval { a: f64, b: f64 },
    #[error("box bounds must satisfy lo < hi componentwise (axis {axis})")]
    EmptyBox { axis: usize },
    #[error("box of dimension {dim} would have {vertices} vertices (max dimension {MAX_BOX_DIM})")]
    TooManyVertices { dim: usize, vertices: u128 },
    #[error("region `{id}`: {msg}")]
    Invalid { id: String, msg: String },
    #[error("duplicate region id `{0}`")]
    DuplicateId(String),
    #[error("output dimension mismatch: constraint expects {expected}, got {found}")]
    OutputDim { expected: usize, found: usize },
    #[error("{0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, RegionError>;

/// `E y = f`.
#[derive(Debug, Clone, PartialEq)]
pub struct EqualityConstraint<T> {
    pub e: Matrix<T>,
    pub f: Vector<T>,
}

/// `C y ≤ d`.
#[derive(Debug, Clone, PartialEq)]
pub struct InequalityConstraint<T> {
    pub c: Matrix<T>,
    pub d: Vector<T>,
}

impl<T: Real> EqualityConstraint<T> {
    pub fn new(e: Matrix<T>, f: Vector<T>) -> Result<Self> {
        if e.rows() != f.len() {
            return Err(RegionError::Shape(format!(
                "equality has {} rows but {} targets",
                e.rows(),
                f.len()
            )));
        }
        Ok(EqualityConstraint { e, f })
    }

    /// `E y − f`.
    pub fn residual(&self, y: &[T]) -> Result<Vector<T>> {
        check_outputs(self.e.cols(), y.len())?;
        let mut r = linalg::matvec(&self.e, y).expect("checked");
        for (ri, &fi) in r.iter_mut().zip(self.f.iter()) {
            *ri -= fi;
        }
        Ok(r)
    }
}

impl<T: Real> InequalityConstraint<T> {
    pub fn new(c: Matrix<T>, d: Vector<T>) -> Result<Self> {
        if c.rows() != d.len() {
            return Err(RegionError::Shape(format!(
                "inequality has {} rows but {} bounds",
                c.rows(),
                d.len()
            )));
        }
        Ok(InequalityConstraint { c, d })
    }

    /// `C y − d`; positive entries are violations.
    pub fn residual(&self, y: &[T]) -> Result<Vector<T>> {
        check_outputs(self.c.cols(), y.len())?;
        let mut r = linalg::matvec(&self.c, y).expect("checked");
        for (ri, &di) in r.iter_mut().zip(self.d.iter()) {
            *ri -= di;
        }
        Ok(r)
    }
}

fn check_outputs(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(RegionError::OutputDim { expected, found });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexRegion<T> {
    pub id: String,
    vertices: Matrix<T>,
    pub equality: Option<EqualityConstraint<T>>,
    pub inequality: Option<InequalityConstraint<T>>,
}

impl<T: Real> ConvexRegion<T> {
    /// Region spanned by the rows of `vertices`. Near-duplicate rows are merged.
    pub fn new(id: impl Into<String>, vertices: Matrix<T>) -> Result<Self> {
        let id = id.into();
        if vertices.rows() == 0 || vertices.cols() == 0 {
            return Err(RegionError::Invalid {
                id,
                msg: "at least one vertex of positive dimension is required".into(),
            });
        }
        if !vertices.is_finite() {
            return Err(RegionError::Invalid {
                id,
                msg: "non-finite vertex coordinate".into(),
            });
        }
        Ok(ConvexRegion {
            id,
            vertices: dedup_vertices(&vertices),
            equality: None,
            inequality: None,
        })
    }

    pub fn with_equality(mut self, eq: EqualityConstraint<T>) -> Self {
        self.equality = Some(eq);
        self
    }

    pub fn with_inequality(mut self, ineq: InequalityConstraint<T>) -> Self {
        self.inequality = Some(ineq);
        self
    }

    pub fn vertices(&self) -> &Matrix<T> {
        &self.vertices
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.rows()
    }

    pub fn dim(&self) -> usize {
        self.vertices.cols()
    }

    pub fn has_constraints(&self) -> bool {
        self.equality.is_some() || self.inequality.is_some()
    }

    /// Output dimension implied by the attached constraints, if any.
    pub fn output_dim(&self) -> Option<usize> {
        self.equality
            .as_ref()
            .map(|e| e.e.cols())
            .or_else(|| self.inequality.as_ref().map(|c| c.c.cols()))
    }

    /// Worst constraint residual over rows of `outputs`: `|E y − f|` for
    /// equalities, `max(0, C y − d)` for inequalities.
    pub fn violation_at(&self, outputs: &Matrix<T>) -> Result<T> {
        let mut worst = T::zero();
        for y in outputs.iter_rows() {
            if let Some(eq) = &self.equality {
                worst = worst.max(eq.residual(y)?.norm_inf());
            }
            if let Some(ineq) = &self.inequality {
                for r in ineq.residual(y)?.iter() {
                    worst = worst.max(*r);
                }
            }
        }
        Ok(worst)
    }

    /// [`Self::violation_at`] with one output row per vertex.
    pub fn vertex_violation(&self, outputs_at_vertices: &Matrix<T>) -> Result<T> {
        if outputs_at_vertices.rows() != self.num_vertices() {
            return Err(RegionError::Shape(format!(
                "{} output rows for {} vertices",
                outputs_at_vertices.rows(),
                self.num_vertices()
            )));
        }
        self.violation_at(outputs_at_vertices)
    }

    /// `n` random convex combinations of the vertices; weights are normalised
    /// exponential draws.
    pub fn sample_interior(&self, n: usize, seed: u64) -> Matrix<T> {
        sample_convex_combinations(&self.vertices, n, seed)
    }

    /// Axis-aligned bounding box of the vertices.
    pub fn bounds(&self) -> (Vec<T>, Vec<T>) {
        let d = self.dim();
        let mut lo = vec![T::infinity(); d];
        let mut hi = vec![T::neg_infinity(); d];
        for v in self.vertices.iter_rows() {
            for j in 0..d {
                lo[j] = lo[j].min(v[j]);
                hi[j] = hi[j].max(v[j]);
            }
        }
        (lo, hi)
    }

    /// Whether the vertex set is exactly the corner set of its bounding box
    /// (intervals included).
    pub fn is_axis_box(&self) -> bool {
        let d = self.dim();
        if d > MAX_BOX_DIM || self.num_vertices() != 1usize << d {
            return false;
        }
        let (lo, hi) = self.bounds();
        let corners: HashSet<Vec<u64>> = self
            .vertices
            .iter_rows()
            .map(|v| v.iter().map(|x| x.f64().to_bits()).collect())
            .collect();
        corners.len() == 1usize << d
            && (0..1usize << d).all(|mask| {
                let c: Vec<u64> = (0..d)
                    .map(|j| {
                        let bit = (mask >> (d - 1 - j)) & 1;
                        (if bit == 1 { hi[j] } else { lo[j] }).f64().to_bits()
                    })
                    .collect();
                corners.contains(&c)
            })
    }
}

pub(crate) fn sample_convex_combinations<T: Real>(vertices: &Matrix<T>, n: usize, seed: u64) -> Matrix<T> {
    let (p, d) = vertices.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Matrix::zeros(n, d);
    let mut w = vec![0.0f64; p];
    for i in 0..n {
        for wj in w.iter_mut() {
            *wj = Exp1.sample(&mut rng);
        }
        let total: f64 = w.iter().sum();
        let row = out.row_mut(i);
        for (j, v) in vertices.iter_rows().enumerate() {
            let a = T::of(w[j] / total);
            for (r, &x) in row.iter_mut().zip(v) {
                *r += a * x;
            }
        }
    }
    out
}

fn dedup_vertices<T: Real>(vertices: &Matrix<T>) -> Matrix<T> {
    let tol = T::of(DUPLICATE_VERTEX_TOL);
    let mut kept: Vec<&[T]> = Vec::new();
    for v in vertices.iter_rows() {
        let dup = kept.iter().any(|k| {
            k.iter()
                .zip(v)
                .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()))
                <= tol
        });
        if !dup {
            kept.push(v);
        }
    }
    Matrix::from_rows(&kept).expect("rows share a width")
}

/// Ordered collection of regions with unique ids. Disjointness is assumed.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSet<T> {
    regions: Vec<ConvexRegion<T>>,
}

impl<T: Real> RegionSet<T> {
    pub fn new(regions: Vec<ConvexRegion<T>>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &regions {
            if !seen.insert(r.id.clone()) {
                return Err(RegionError::DuplicateId(r.id.clone()));
            }
        }
        if let Some(first) = regions.first() {
            if let Some(bad) = regions.iter().find(|r| r.dim() != first.dim()) {
                return Err(RegionError::Invalid {
                    id: bad.id.clone(),
                    msg: format!("dimension {} differs from {}", bad.dim(), first.dim()),
                });
            }
        }
        Ok(RegionSet { regions })
    }

    pub fn regions(&self) -> &[ConvexRegion<T>] {
        &self.regions
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ConvexRegion<T>> {
        self.regions.iter()
    }

    pub fn get(&self, id: &str) -> Option<&ConvexRegion<T>> {
        self.regions.iter().find(|r| r.id == id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.regions.iter().map(|r| r.id.clone()).collect()
    }

    pub fn total_vertices(&self) -> usize {
        self.regions.iter().map(ConvexRegion::num_vertices).sum()
    }
}

impl<'a, T> IntoIterator for &'a RegionSet<T> {
    type Item = &'a ConvexRegion<T>;
    type IntoIter = std::slice::Iter<'a, ConvexRegion<T>>;
    fn into_iter(self) -> Self::IntoIter {
        self.regions.iter()
    }
}

/// Endpoints of `[a, b]` as a 2×1 vertex matrix.
pub fn make_interval<T: Real>(a: T, b: T) -> Result<Matrix<T>> {
    if !(a < b) {
        return Err(RegionError::EmptyInterval { a: a.f64(), b: b.f64() });
    }
    Ok(Matrix::new(2, 1, vec![a, b]).expect("sized"))
}

/// All `2^D` corners of `[lo, hi]`; corner `k` takes `hi[j]` where bit
/// `D−1−j` of `k` is set, so the first coordinate varies slowest.
pub fn make_box<T: Real>(lo: &[T], hi: &[T]) -> Result<Matrix<T>> {
    let d = lo.len();
    if hi.len() != d || d == 0 {
        return Err(RegionError::Shape(format!(
            "box bounds of lengths {} and {}",
            d,
            hi.len()
        )));
    }
    if d > MAX_BOX_DIM {
        return Err(RegionError::TooManyVertices {
            dim: d,
            vertices: 1u128 << d,
        });
    }
    if let Some(axis) = (0..d).find(|&j| !(lo[j] < hi[j])) {
        return Err(RegionError::EmptyBox { axis });
    }
    let n = 1usize << d;
    let mut m = Matrix::zeros(n, d);
    for k in 0..n {
        for j in 0..d {
            m[(k, j)] = if (k >> (d - 1 - j)) & 1 == 1 { hi[j] } else { lo[j] };
        }
    }
    Ok(m)
}

/// Default gap between abutting boxes: ten machine epsilons.
pub fn default_gap<T: Real>() -> T {
    T::of(10.0) * T::epsilon()
}

/// Splits `[lo, hi]` along `axis` into two congruent boxes whose facing
/// sides are `gap` apart, centred on the box midpoint.
pub fn make_abutting_boxes<T: Real>(lo: &[T], hi: &[T], axis: usize, gap: T) -> Result<(Matrix<T>, Matrix<T>)> {
    if axis >= lo.len() {
        return Err(RegionError::Shape(format!(
            "axis {axis} out of range for dimension {}",
            lo.len()
        )));
    }
    if !(gap >= T::zero()) || !(gap < hi[axis] - lo[axis]) {
        return Err(RegionError::Shape(format!(
            "gap {gap} does not fit in the box width"
        )));
    }
    let two = T::of(2.0);
    let mid = (lo[axis] + hi[axis]) / two;
    let half = gap / two;
    let mut left_hi = hi.to_vec();
    left_hi[axis] = mid - half;
    let mut right_lo = lo.to_vec();
    right_lo[axis] = mid + half;
    Ok((make_box(lo, &left_hi)?, make_box(&right_lo, hi)?))
}

/// JSON form of a region: either explicit `vertices` or an axis box given by
/// `lower` and `upper`, with optional constraints on the network output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vertices: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equality: Option<EqualitySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inequality: Option<InequalitySpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EqualitySpec {
    pub e: Vec<Vec<f64>>,
    pub f: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InequalitySpec {
    pub c: Vec<Vec<f64>>,
    pub d: Vec<f64>,
}

fn matrix_from<T: Real>(rows: &[Vec<f64>], what: &str) -> Result<Matrix<T>> {
    let cast: Vec<Vec<T>> = rows.iter().map(|r| r.iter().map(|&x| T::of(x)).collect()).collect();
    Matrix::from_rows(&cast).map_err(|e| RegionError::Shape(format!("{what}: {e}")))
}

fn rows_of<T: Real>(m: &Matrix<T>) -> Vec<Vec<f64>> {
    m.iter_rows().map(|r| r.iter().map(|x| x.f64()).collect()).collect()
}

impl RegionSpec {
    pub fn build<T: Real>(&self) -> Result<ConvexRegion<T>> {
        let invalid = |msg: &str| RegionError::Invalid {
            id: self.id.clone(),
            msg: msg.into(),
        };
        let vertices = match (&self.vertices, &self.lower, &self.upper) {
            (Some(v), None, None) => matrix_from(v, "vertices")?,
            (None, Some(lo), Some(hi)) => {
                let lo: Vec<T> = lo.iter().map(|&x| T::of(x)).collect();
                let hi: Vec<T> = hi.iter().map(|&x| T::of(x)).collect();
                make_box(&lo, &hi)?
            }
            _ => return Err(invalid("give either `vertices` or both `lower` and `upper`")),
        };
        let mut region = ConvexRegion::new(self.id.clone(), vertices)?;
        if let Some(eq) = &self.equality {
            let f: Vector<T> = eq.f.iter().map(|&x| T::of(x)).collect();
            region = region.with_equality(EqualityConstraint::new(matrix_from(&eq.e, "equality.e")?, f)?);
        }
        if let Some(ineq) = &self.inequality {
            let d: Vector<T> = ineq.d.iter().map(|&x| T::of(x)).collect();
            region = region.with_inequality(InequalityConstraint::new(matrix_from(&ineq.c, "inequality.c")?, d)?);
        }
        if let (Some(e), Some(c)) = (&region.equality, &region.inequality) {
            check_outputs(e.e.cols(), c.c.cols())?;
        }
        Ok(region)
    }

    /// Vertex form of `region`.
    pub fn from_region<T: Real>(region: &ConvexRegion<T>) -> Self {
        RegionSpec {
            id: region.id.clone(),
            vertices: Some(rows_of(region.vertices())),
            lower: None,
            upper: None,
            equality: region.equality.as_ref().map(|e| EqualitySpec {
                e: rows_of(&e.e),
                f: e.f.iter().map(|x| x.f64()).collect(),
            }),
            inequality: region.inequality.as_ref().map(|c| InequalitySpec {
                c: rows_of(&c.c),
                d: c.d.iter().map(|x| x.f64()).collect(),
            }),
        }
    }
}

pub fn build_region_set<T: Real>(specs: &[RegionSpec]) -> Result<RegionSet<T>> {
    RegionSet::new(specs.iter().map(|s| s.build()).collect::<Result<Vec<_>>>()?)
}

pub fn region_specs<T: Real>(set: &RegionSet<T>) -> Vec<RegionSpec> {
    set.iter().map(RegionSpec::from_region).collect()
}
