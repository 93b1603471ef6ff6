//! Assigning one global sign pattern per region.
//!
//! Two heuristics pick each region's sign for every hidden unit from the
//! unit's pre-activations at the region vertices: a majority vote and the
//! sign of the vertex mean. [`ensure_unique`] then repairs collisions so no
//! two regions share a pattern.

use std::collections::HashSet;

use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::network::{ActivationPattern, MlpNetwork, NetworkError, Sign};
use crate::regions::RegionSet;
use crate::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SignError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("regions `{a}` and `{b}` still share a pattern after flipping every hidden unit")]
    Exhausted { a: String, b: String },
    #[error("sign map does not match: {0}")]
    Mismatch(String),
}

pub type Result<T> = std::result::Result<T, SignError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SignMethod {
    #[default]
    Majority,
    Mean,
}

impl std::str::FromStr for SignMethod {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "majority" => Ok(SignMethod::Majority),
            "mean" => Ok(SignMethod::Mean),
            other => Err(format!("unknown sign method `{other}` (expected majority or mean)")),
        }
    }
}

/// Vertex pre-activations: `per_region[i][ℓ]` is `P_i × width_ℓ`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionPreActivations<T> {
    pub ids: Vec<String>,
    pub per_region: Vec<Vec<Matrix<T>>>,
}

impl<T: Real> RegionPreActivations<T> {
    /// Vertex mean of every unit, `[region][layer][unit]`.
    pub fn means(&self) -> Vec<Vec<Vec<T>>> {
        self.per_region
            .iter()
            .map(|layers| layers.iter().map(column_means).collect())
            .collect()
    }
}

fn column_means<T: Real>(m: &Matrix<T>) -> Vec<T> {
    let n = T::of(m.rows() as f64);
    (0..m.cols())
        .map(|j| m.iter_rows().map(|r| r[j]).sum::<T>() / n)
        .collect()
}

/// Ordered region id → pattern map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignMap {
    entries: Vec<(String, ActivationPattern)>,
}

impl SignMap {
    pub fn new(entries: Vec<(String, ActivationPattern)>) -> Self {
        SignMap { entries }
    }

    pub fn entries(&self) -> &[(String, ActivationPattern)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ActivationPattern> {
        self.entries.iter().find(|(k, _)| k == id).map(|(_, p)| p)
    }

    pub fn pattern(&self, i: usize) -> &ActivationPattern {
        &self.entries[i].1
    }

    pub fn pattern_mut(&mut self, i: usize) -> &mut ActivationPattern {
        &mut self.entries[i].1
    }

    /// True iff every pair of patterns differs somewhere.
    pub fn all_distinct(&self) -> bool {
        let mut seen = HashSet::new();
        self.entries.iter().all(|(_, p)| seen.insert(p))
    }

    /// Checks that every region id is present and that each pattern fits the
    /// network's hidden widths.
    pub fn check_against<T: Real>(&self, net: &MlpNetwork<T>, regions: &RegionSet<T>) -> Result<()> {
        let widths = net.hidden_widths();
        for r in regions {
            let p = self
                .get(&r.id)
                .ok_or_else(|| SignError::Mismatch(format!("no pattern for region `{}`", r.id)))?;
            let shape: Vec<usize> = p.layers.iter().map(Vec::len).collect();
            if shape != widths {
                return Err(SignError::Mismatch(format!(
                    "pattern for `{}` has widths {shape:?}, network has {widths:?}",
                    r.id
                )));
            }
        }
        Ok(())
    }
}

impl Serialize for SignMap {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(self.entries.len()))?;
        for (k, v) in &self.entries {
            m.serialize_entry(k, v)?;
        }
        m.end()
    }
}

impl<'de> Deserialize<'de> for SignMap {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let map = serde_json::Map::deserialize(d)?;
        let entries = map
            .into_iter()
            .map(|(k, v)| {
                serde_json::from_value::<ActivationPattern>(v)
                    .map(|p| (k, p))
                    .map_err(serde::de::Error::custom)
            })
            .collect::<std::result::Result<_, _>>()?;
        Ok(SignMap { entries })
    }
}

/// Pushes every region's vertices through the current network and keeps the
/// hidden-layer pre-activations.
pub fn propagate_vertices<T: Real>(net: &MlpNetwork<T>, regions: &RegionSet<T>) -> Result<RegionPreActivations<T>> {
    let hidden = net.num_hidden_layers();
    let per_region = regions
        .iter()
        .map(|r| {
            let mut t = net.forward_trace_batch(r.vertices())?;
            t.pre_activations.truncate(hidden);
            Ok(t.pre_activations)
        })
        .collect::<Result<_>>()?;
    Ok(RegionPreActivations {
        ids: regions.ids(),
        per_region,
    })
}

fn mean_sign<T: Real>(column: impl Iterator<Item = T>, n: usize) -> Sign {
    Sign::of(column.sum::<T>() / T::of(n as f64))
}

fn assign_with<T: Real>(preacts: &RegionPreActivations<T>, rule: impl Fn(&Matrix<T>, usize) -> Sign) -> SignMap {
    let entries = preacts
        .ids
        .iter()
        .zip(&preacts.per_region)
        .map(|(id, layers)| {
            let pattern = layers
                .iter()
                .map(|z| (0..z.cols()).map(|j| rule(z, j)).collect())
                .collect();
            (id.clone(), ActivationPattern::new(pattern))
        })
        .collect();
    SignMap::new(entries)
}

/// Majority vote over vertices, zeros counted positive. Exact ties fall back
/// to the sign of the mean.
pub fn assign_majority<T: Real>(preacts: &RegionPreActivations<T>) -> SignMap {
    assign_with(preacts, |z, j| {
        let pos = z.iter_rows().filter(|r| r[j] >= T::zero()).count();
        let neg = z.rows() - pos;
        match pos.cmp(&neg) {
            std::cmp::Ordering::Greater => Sign::Positive,
            std::cmp::Ordering::Less => Sign::Negative,
            std::cmp::Ordering::Equal => mean_sign(z.iter_rows().map(|r| r[j]), z.rows()),
        }
    })
}

/// Sign of the vertex-mean pre-activation; a zero mean is positive.
pub fn assign_mean<T: Real>(preacts: &RegionPreActivations<T>) -> SignMap {
    assign_with(preacts, |z, j| mean_sign(z.iter_rows().map(|r| r[j]), z.rows()))
}

pub fn assign<T: Real>(method: SignMethod, preacts: &RegionPreActivations<T>) -> SignMap {
    match method {
        SignMethod::Majority => assign_majority(preacts),
        SignMethod::Mean => assign_mean(preacts),
    }
}

/// Repairs duplicate patterns. For each colliding pair the later region
/// flips, one unit at a time, the not-yet-flipped unit with the smallest
/// `|mean pre-activation|`, exhausting the first hidden layer before moving
/// to the next.
pub fn ensure_unique<T: Real>(map: &SignMap, preacts: &RegionPreActivations<T>) -> Result<SignMap> {
    if map.len() != preacts.per_region.len() {
        return Err(SignError::Mismatch(format!(
            "{} patterns for {} regions",
            map.len(),
            preacts.per_region.len()
        )));
    }
    let means = preacts.means();
    // Per region, units in the order they will be flipped.
    let flip_order: Vec<Vec<(usize, usize)>> = means
        .iter()
        .map(|layers| {
            let mut order = Vec::new();
            for (l, m) in layers.iter().enumerate() {
                let mut idx: Vec<usize> = (0..m.len()).collect();
                idx.sort_by(|&a, &b| {
                    m[a].abs()
                        .partial_cmp(&m[b].abs())
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(a.cmp(&b))
                });
                order.extend(idx.into_iter().map(|n| (l, n)));
            }
            order
        })
        .collect();
    let mut next_flip = vec![0usize; map.len()];
    let mut out = map.clone();

    loop {
        let Some((i, j)) = first_duplicate(&out) else {
            return Ok(out);
        };
        let k = next_flip[j];
        let Some(&(l, n)) = flip_order[j].get(k) else {
            return Err(SignError::Exhausted {
                a: out.entries[i].0.clone(),
                b: out.entries[j].0.clone(),
            });
        };
        next_flip[j] += 1;
        let s = &mut out.pattern_mut(j).layers[l][n];
        *s = s.flipped();
    }
}

/// First pair `(i, j)`, `i < j`, of identical patterns, scanning `j` in order.
fn first_duplicate(map: &SignMap) -> Option<(usize, usize)> {
    let pats = map.entries();
    for j in 1..pats.len() {
        for i in 0..j {
            if pats[i].1 == pats[j].1 {
                return Some((i, j));
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::regions::{make_interval, ConvexRegion};

    fn single_unit(ids: &[&str], columns: &[&[f64]]) -> RegionPreActivations<f64> {
        RegionPreActivations {
            ids: ids.iter().map(|s| s.to_string()).collect(),
            per_region: columns
                .iter()
                .map(|c| vec![Matrix::new(c.len(), 1, c.to_vec()).unwrap()])
                .collect(),
        }
    }

    fn sign0(map: &SignMap, i: usize) -> Sign {
        map.pattern(i).layers[0][0]
    }

    #[test]
    fn majority_examples() {
        let p = single_unit(&["a", "b", "c"], &[&[0.5, -0.1, 0.2], &[0.0, -1.0], &[-1.0, -2.0, -0.1]]);
        let m = assign_majority(&p);
        assert_eq!(sign0(&m, 0), Sign::Positive);
        assert_eq!(sign0(&m, 1), Sign::Negative);
        assert_eq!(sign0(&m, 2), Sign::Negative);
    }

    #[test]
    fn mean_examples() {
        let p = single_unit(&["a", "b", "c"], &[&[1.0, 2.0, -0.6], &[-1.0, -2.0, 0.5], &[0.0, 0.0]]);
        let m = assign_mean(&p);
        assert_eq!(sign0(&m, 0), Sign::Positive);
        assert_eq!(sign0(&m, 1), Sign::Negative);
        assert_eq!(sign0(&m, 2), Sign::Positive);
    }

    #[test]
    fn unique_flips_smallest_mean_of_later_region() {
        // Two regions, one layer of five units, identical majority patterns.
        let a = Matrix::from_rows(&[[1.0, -2.0, 3.0, 0.5, -1.0], [2.0, -1.0, 1.0, 0.1, -3.0]]).unwrap();
        let b = Matrix::from_rows(&[[1.0, -2.0, 3.0, 0.05, -1.0], [2.0, -1.0, 1.0, 0.02, -3.0]]).unwrap();
        let p = RegionPreActivations {
            ids: vec!["r1".into(), "r2".into()],
            per_region: vec![vec![a], vec![b]],
        };
        let m = assign_majority(&p);
        assert_eq!(m.pattern(0), m.pattern(1));
        let u = ensure_unique(&m, &p).unwrap();
        assert_eq!(u.pattern(0), m.pattern(0));
        assert_eq!(u.pattern(1).hamming(m.pattern(1)), 1);
        assert_eq!(u.pattern(1).layers[0][3], Sign::Negative);
        assert!(u.all_distinct());
    }

    #[test]
    fn unique_is_noop_on_distinct_maps() {
        let p = single_unit(&["a", "b"], &[&[1.0, 2.0], &[-1.0, -2.0]]);
        let m = assign_mean(&p);
        assert_eq!(ensure_unique(&m, &p).unwrap(), m);
    }

    #[test]
    fn unique_repairs_three_way_collision() {
        let col = Matrix::from_rows(&[[1.0, 0.2, -0.3], [1.5, 0.1, -0.2]]).unwrap();
        let p = RegionPreActivations {
            ids: vec!["a".into(), "b".into(), "c".into()],
            per_region: vec![vec![col.clone()], vec![col.clone()], vec![col]],
        };
        let u = ensure_unique(&assign_mean(&p), &p).unwrap();
        assert!(u.all_distinct());
        for i in 0..3 {
            for j in 0..i {
                assert_ne!(u.pattern(i), u.pattern(j));
            }
        }
    }

    #[test]
    fn unique_errors_when_exhausted() {
        let p = single_unit(&["a", "b", "c"], &[&[1.0], &[1.0], &[1.0]]);
        assert!(matches!(
            ensure_unique(&assign_mean(&p), &p),
            Err(SignError::Exhausted { .. })
        ));
    }

    #[test]
    fn propagate_matches_layer_identity() {
        let net = MlpNetwork::<f64>::init(&[1, 4, 3, 1], 0.01, 4).unwrap();
        let regions = RegionSet::new(vec![
            ConvexRegion::new("a", make_interval(0.0, 1.0).unwrap()).unwrap(),
            ConvexRegion::new("b", Matrix::from_rows(&[[2.5]]).unwrap()).unwrap(),
        ])
        .unwrap();
        let p = propagate_vertices(&net, &regions).unwrap();
        let w1 = &net.layers()[0];
        for (k, v) in regions.regions()[0].vertices().iter_rows().enumerate() {
            for n in 0..4 {
                let expect = w1.weights[(n, 0)] * v[0] + w1.biases[n];
                assert_eq!(p.per_region[0][0][(k, n)], expect);
            }
        }
        let (_, t) = net.forward_trace(&[2.5]).unwrap();
        for l in 0..2 {
            assert_eq!(p.per_region[1][l].row(0), &t.pre_activations[l][..]);
        }
    }

    #[test]
    fn json_shape() {
        let m = SignMap::new(vec![
            ("r1".into(), ActivationPattern::new(vec![vec![Sign::Positive, Sign::Negative], vec![Sign::Negative]])),
            ("r0".into(), ActivationPattern::new(vec![vec![Sign::Negative, Sign::Negative], vec![Sign::Positive]])),
        ]);
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s, r#"{"r1":[[1,-1],[-1]],"r0":[[-1,-1],[1]]}"#);
        assert_eq!(serde_json::from_str::<SignMap>(&s).unwrap(), m);
    }
}
