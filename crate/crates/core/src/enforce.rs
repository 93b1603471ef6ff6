//! Enforcing a [`SignMap`] on a network.
//!
//! Hidden layers are processed in order. Before layer `ℓ` is touched, the
//! vertices of every region are pushed through the already-adjusted layers
//! `0..ℓ`. Each unit of layer `ℓ` then gets the minimal-norm `(Δw, Δb)` that
//! puts all stacked vertices on the side of its hyperplane required by their
//! region's sign, with margin `δ`. Units of one layer are independent, so
//! their programs may be solved on several threads.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::network::{MlpNetwork, NetworkError, Sign};
use crate::qpsolver::{self, BiasFeasibility, BiasInterval, QpError, QpStatus};
use crate::regions::RegionSet;
use crate::signs::{SignError, SignMap};
use crate::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnforceError {
    #[error("invalid enforcement config: {0}")]
    Config(String),
    #[error(transparent)]
    Signs(#[from] SignError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error("sign enforcement failed at {}", describe_failures(&.0.qp_failures))]
    Failed(Box<EnforcementReport>),
}

fn describe_failures(f: &[QpFailure]) -> String {
    f.iter()
        .map(|x| format!("(layer {}, neuron {}: {:?})", x.layer, x.neuron, x.status))
        .collect::<Vec<_>>()
        .join(", ")
}

pub type Result<T> = std::result::Result<T, EnforceError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound = "")]
pub struct EnforceConfig<T: Real> {
    /// Required `sign · z ≥ δ` at every vertex.
    pub margin: T,
    pub qp_tol: T,
    pub qp_max_iter: usize,
    /// Worker threads for the per-unit programs of one layer.
    pub jobs: usize,
}

impl<T: Real> Default for EnforceConfig<T> {
    fn default() -> Self {
        EnforceConfig {
            margin: T::zero(),
            qp_tol: T::of(qpsolver::DEFAULT_TOL),
            qp_max_iter: qpsolver::DEFAULT_MAX_ITER,
            jobs: 1,
        }
    }
}

impl<T: Real> EnforceConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= T::zero()) {
            return Err(EnforceError::Config(format!("margin must be ≥ 0, got {}", self.margin)));
        }
        if !(self.qp_tol > T::zero()) {
            return Err(EnforceError::Config("qp tolerance must be positive".into()));
        }
        if self.jobs == 0 {
            return Err(EnforceError::Config("jobs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QpFailure {
    pub layer: usize,
    pub neuron: usize,
    pub status: QpStatus,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct EnforcementReport {
    /// `‖(Δw, Δb)‖` per hidden layer and unit.
    pub adjustment_norms: Vec<Vec<f64>>,
    /// Frobenius norm of the whole parameter shift.
    pub total_shift: f64,
    /// `min sign · z − δ` over all regions, vertices and units after enforcement.
    pub min_margin: f64,
    /// `max(0, −min_margin)`.
    pub worst_margin_deficit: f64,
    pub qp_failures: Vec<QpFailure>,
    pub layer_seconds: Vec<f64>,
}

impl EnforcementReport {
    pub fn total_seconds(&self) -> f64 {
        self.layer_seconds.iter().sum()
    }
}

/// All region vertices stacked in region order, with the owning region of
/// each row.
pub(crate) fn stacked_vertices<T: Real>(regions: &RegionSet<T>) -> (Matrix<T>, Vec<usize>) {
    let mut stacked = Matrix::zeros(0, 0);
    let mut owner = Vec::new();
    for (i, r) in regions.iter().enumerate() {
        stacked = stacked.vstack(r.vertices()).expect("regions share a dimension");
        owner.extend(std::iter::repeat_n(i, r.num_vertices()));
    }
    (stacked, owner)
}

/// `signs[ℓ][n][row]`: required sign of unit `n` of layer `ℓ` at each stacked row.
fn row_signs<T: Real>(
    net: &MlpNetwork<T>,
    regions: &RegionSet<T>,
    map: &SignMap,
    owner: &[usize],
) -> Result<Vec<Vec<Vec<Sign>>>> {
    map.check_against(net, regions)?;
    let patterns: Vec<_> = regions
        .iter()
        .map(|r| map.get(&r.id).expect("checked"))
        .collect();
    Ok(net
        .hidden_widths()
        .iter()
        .enumerate()
        .map(|(l, &width)| {
            (0..width)
                .map(|n| owner.iter().map(|&i| patterns[i].layers[l][n]).collect())
                .collect()
        })
        .collect())
}

fn check_dims<T: Real>(net: &MlpNetwork<T>, regions: &RegionSet<T>) -> Result<()> {
    if let Some(r) = regions.iter().find(|r| r.dim() != net.input_dim()) {
        return Err(EnforceError::Network(NetworkError::Shape(format!(
            "region `{}` has dimension {}, network input is {}",
            r.id,
            r.dim(),
            net.input_dim()
        ))));
    }
    Ok(())
}

type NeuronResult<T> = std::result::Result<Vec<T>, QpFailure>;

fn solve_unit<T: Real>(
    net: &MlpNetwork<T>,
    layer: usize,
    neuron: usize,
    inputs: &Matrix<T>,
    signs: &[Sign],
    cfg: &EnforceConfig<T>,
) -> Result<NeuronResult<T>> {
    let params = &net.layers()[layer];
    let qp = qpsolver::build_neuron_qp(
        params.weights.row(neuron),
        params.biases[neuron],
        inputs,
        signs,
        cfg.margin,
    )?;
    let sol = qpsolver::solve_least_distance(&qp, cfg.qp_tol, cfg.qp_max_iter)?;
    Ok(match sol.status {
        QpStatus::Optimal => Ok(sol.u.0),
        status => Err(QpFailure {
            layer,
            neuron,
            status,
            residual: sol.max_constraint_residual.f64(),
        }),
    })
}

fn solve_layer<T: Real>(
    net: &MlpNetwork<T>,
    layer: usize,
    inputs: &Matrix<T>,
    signs: &[Vec<Sign>],
    cfg: &EnforceConfig<T>,
) -> Result<Vec<NeuronResult<T>>> {
    let width = signs.len();
    if cfg.jobs <= 1 || width < 2 {
        return (0..width)
            .map(|n| solve_unit(net, layer, n, inputs, &signs[n], cfg))
            .collect();
    }
    let chunk = width.div_ceil(cfg.jobs);
    let mut out: Vec<Result<NeuronResult<T>>> = Vec::with_capacity(width);
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..width)
            .step_by(chunk)
            .map(|start| {
                let end = (start + chunk).min(width);
                scope.spawn(move || {
                    (start..end)
                        .map(|n| solve_unit(net, layer, n, inputs, &signs[n], cfg))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            out.extend(h.join().expect("enforcement worker panicked"));
        }
    });
    out.into_iter().collect()
}

/// Adjusts weights and biases of every hidden layer so that each region's
/// vertices realise the region's pattern with margin `δ`. On any QP failure
/// nothing is changed and [`EnforceError::Failed`] carries the report.
pub fn enforce_signs<T: Real>(
    net: &MlpNetwork<T>,
    regions: &RegionSet<T>,
    map: &SignMap,
    cfg: &EnforceConfig<T>,
) -> Result<(MlpNetwork<T>, EnforcementReport)> {
    cfg.validate()?;
    check_dims(net, regions)?;
    let (mut inputs, owner) = stacked_vertices(regions);
    let signs = row_signs(net, regions, map, &owner)?;
    let mut out = net.clone();
    let mut report = EnforcementReport::default();
    let mut shift2 = 0.0f64;

    for (l, layer_signs) in signs.iter().enumerate() {
        let started = Instant::now();
        let results = solve_layer(&out, l, &inputs, layer_signs, cfg)?;
        let failures: Vec<QpFailure> = results.iter().filter_map(|r| r.as_ref().err().cloned()).collect();
        if !failures.is_empty() {
            report.layer_seconds.push(started.elapsed().as_secs_f64());
            report.qp_failures = failures;
            return Err(EnforceError::Failed(Box::new(report)));
        }
        let mut norms = Vec::with_capacity(results.len());
        {
            let params = out.layer_mut(l);
            for (n, r) in results.into_iter().enumerate() {
                let u = r.expect("failures handled");
                let norm2: f64 = u.iter().map(|x| x.f64() * x.f64()).sum();
                norms.push(norm2.sqrt());
                shift2 += norm2;
                if u.iter().all(|x| *x == T::zero()) {
                    continue;
                }
                let (dw, db) = u.split_at(u.len() - 1);
                for (w, d) in params.weights.row_mut(n).iter_mut().zip(dw) {
                    *w += *d;
                }
                params.biases[n] += db[0];
            }
        }
        report.adjustment_norms.push(norms);
        // Next layer sees the vertex images under the updated layer.
        let z = out.layer_preactivations(l, &inputs)?;
        inputs = z.map(|v| out.activate(v));
        report.layer_seconds.push(started.elapsed().as_secs_f64());
    }
    report.total_shift = shift2.sqrt();
    report.min_margin = verify_margins(&out, regions, map, cfg.margin)?.f64();
    report.worst_margin_deficit = (-report.min_margin).max(0.0);
    Ok((out, report))
}

/// `min sign · z − δ` over every region, vertex, hidden unit and layer;
/// negative values are deficits.
pub fn verify_margins<T: Real>(net: &MlpNetwork<T>, regions: &RegionSet<T>, map: &SignMap, margin: T) -> Result<T> {
    check_dims(net, regions)?;
    map.check_against(net, regions)?;
    let hidden = net.num_hidden_layers();
    let mut worst = T::infinity();
    for r in regions {
        let pattern = map.get(&r.id).expect("checked");
        let t = net.forward_trace_batch(r.vertices())?;
        for (l, z) in t.pre_activations[..hidden].iter().enumerate() {
            for row in z.iter_rows() {
                for (&zv, s) in row.iter().zip(&pattern.layers[l]) {
                    worst = worst.min(s.value::<T>() * zv - margin);
                }
            }
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub enum BiasOnlyOutcome<T> {
    Feasible(MlpNetwork<T>),
    Infeasible {
        layer: usize,
        neuron: usize,
        interval: BiasInterval,
    },
}

/// Baseline that may only move biases: each unit's bias is clamped into the
/// intersection of its per-vertex intervals, or the first empty intersection
/// is reported.
pub fn enforce_bias_only<T: Real>(
    net: &MlpNetwork<T>,
    regions: &RegionSet<T>,
    map: &SignMap,
    margin: T,
) -> Result<BiasOnlyOutcome<T>> {
    if !(margin >= T::zero()) {
        return Err(EnforceError::Config(format!("margin must be ≥ 0, got {margin}")));
    }
    check_dims(net, regions)?;
    let (mut inputs, owner) = stacked_vertices(regions);
    let signs = row_signs(net, regions, map, &owner)?;
    let mut out = net.clone();
    for (l, layer_signs) in signs.iter().enumerate() {
        for (n, s) in layer_signs.iter().enumerate() {
            let params = &out.layers()[l];
            match qpsolver::bias_feasible(params.weights.row(n), &inputs, s, margin)? {
                BiasFeasibility::Infeasible(interval) => {
                    return Ok(BiasOnlyOutcome::Infeasible { layer: l, neuron: n, interval });
                }
                BiasFeasibility::Feasible(iv) => {
                    let b = params.biases[n].f64();
                    let nb = b.clamp(iv.lower, iv.upper);
                    if nb != b {
                        out.layer_mut(l).biases[n] = T::of(nb);
                    }
                }
            }
        }
        let z = out.layer_preactivations(l, &inputs)?;
        inputs = z.map(|v| out.activate(v));
    }
    Ok(BiasOnlyOutcome::Feasible(out))
}
