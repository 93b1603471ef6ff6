//! Pretraining and constrained fine-tuning.
//!
//! [`fine_tune`] assigns one sign map up front, enforces it, and then
//! alternates epochs of Adam on `L_task + λ·L_constraint` with
//! re-enforcement of that same map. The penalty weight `λ` grows when the
//! patience budget runs out while the vertex violation is still above
//! tolerance. The network with the lowest balanced loss is returned.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::enforce::{self, EnforceConfig, EnforceError, EnforcementReport};
use crate::linalg::{Matrix, Vector};
use crate::network::{GradientSet, MlpNetwork, NetworkError};
use crate::qpsolver::{self, LeastDistanceQp, QpStatus};
use crate::regions::{ConvexRegion, RegionError, RegionSet};
use crate::signs::{self, SignError, SignMap, SignMethod};
use crate::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("invalid dataset: {0}")]
    Data(String),
    #[error("non-finite loss during {stage} at epoch {epoch}")]
    NonFinite { stage: &'static str, epoch: usize },
    #[error("enforcement failed: {0}")]
    Enforce(#[from] EnforceError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error(transparent)]
    Signs(#[from] SignError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Mean squared error over all outputs.
    #[default]
    RegressionMse,
    /// Binary cross-entropy on logits; targets in {0, 1}.
    ClassificationBce,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    inputs: Matrix<T>,
    targets: Matrix<T>,
    task: TaskKind,
}

impl<T: Real> Dataset<T> {
    pub fn new(inputs: Matrix<T>, targets: Matrix<T>, task: TaskKind) -> Result<Self> {
        if inputs.rows() != targets.rows() {
            return Err(TrainError::Data(format!(
                "{} input rows but {} target rows",
                inputs.rows(),
                targets.rows()
            )));
        }
        if !inputs.is_finite() || !targets.is_finite() {
            return Err(TrainError::Data("non-finite entry".into()));
        }
        if task == TaskKind::ClassificationBce
            && targets.data().iter().any(|&t| t != T::zero() && t != T::one())
        {
            return Err(TrainError::Data("classification targets must be 0 or 1".into()));
        }
        Ok(Dataset { inputs, targets, task })
    }

    pub fn inputs(&self) -> &Matrix<T> {
        &self.inputs
    }

    pub fn targets(&self) -> &Matrix<T> {
        &self.targets
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let pick = |m: &Matrix<T>| {
            let mut out = Matrix::zeros(idx.len(), m.cols());
            for (k, &i) in idx.iter().enumerate() {
                out.row_mut(k).copy_from_slice(m.row(i));
            }
            out
        };
        Dataset {
            inputs: pick(&self.inputs),
            targets: pick(&self.targets),
            task: self.task,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound = "")]
pub struct TrainConfig<T: Real> {
    pub learning_rate: T,
    /// Fine-tuning rate; `None` means a tenth of `learning_rate`.
    pub finetune_learning_rate: Option<T>,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub min_epochs: usize,
    pub max_epochs: usize,
    pub patience_threshold: usize,
    pub lambda_init: T,
    pub lambda_max: T,
    pub penalty_multiplier: T,
    pub violation_tolerance: T,
    pub filter_equality_data: bool,
    pub sign_method: SignMethod,
    pub enforce: EnforceConfig<T>,
    pub seed: u64,
}

impl<T: Real> Default for TrainConfig<T> {
    fn default() -> Self {
        TrainConfig {
            learning_rate: T::of(1e-3),
            finetune_learning_rate: None,
            batch_size: 256,
            pretrain_epochs: 500,
            min_epochs: 30,
            max_epochs: 50,
            patience_threshold: 20,
            lambda_init: T::one(),
            lambda_max: T::of(100.0),
            penalty_multiplier: T::of(1.5),
            violation_tolerance: T::of(1e-4),
            filter_equality_data: true,
            sign_method: SignMethod::Majority,
            enforce: EnforceConfig::default(),
            seed: 0,
        }
    }
}

impl<T: Real> TrainConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.learning_rate > T::zero()) || self.finetune_learning_rate.is_some_and(|r| !(r > T::zero())) {
            return bad("learning rates must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lambda_init >= T::zero()) || !(self.lambda_init <= self.lambda_max) {
            return bad("need 0 ≤ lambda_init ≤ lambda_max");
        }
        if !(self.penalty_multiplier > T::one()) {
            return bad("penalty_multiplier must exceed 1");
        }
        if !(self.violation_tolerance > T::zero()) {
            return bad("violation_tolerance must be positive");
        }
        if self.min_epochs > self.max_epochs {
            return bad("min_epochs must not exceed max_epochs");
        }
        self.enforce.validate()?;
        Ok(())
    }

    pub fn finetune_rate(&self) -> T {
        self.finetune_learning_rate.unwrap_or(self.learning_rate * T::of(0.1))
    }
}

/// Adam over the flattened parameter vector.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(num_params: usize, lr: T) -> Self {
        Adam {
            lr,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            m: vec![T::zero(); num_params],
            v: vec![T::zero(); num_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T]) {
        self.t += 1;
        let c1 = T::one() - self.beta1.powi(self.t);
        let c2 = T::one() - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (T::one() - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (T::one() - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

fn softplus<T: Real>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Mean task loss of `outputs` against `targets` and its gradient with
/// respect to the outputs.
pub fn task_loss_and_grad<T: Real>(outputs: &Matrix<T>, targets: &Matrix<T>, task: TaskKind) -> (T, Matrix<T>) {
    let n = T::of((outputs.rows() * outputs.cols()).max(1) as f64);
    let mut loss = T::zero();
    let mut grad = Matrix::zeros(outputs.rows(), outputs.cols());
    for (k, (&y, &t)) in outputs.data().iter().zip(targets.data()).enumerate() {
        let (l, g) = match task {
            TaskKind::RegressionMse => ((y - t) * (y - t), T::of(2.0) * (y - t)),
            TaskKind::ClassificationBce => (softplus(y) - t * y, sigmoid(y) - t),
        };
        loss += l;
        grad[(k / outputs.cols(), k % outputs.cols())] = g / n;
    }
    (loss / n, grad)
}

/// Mean task loss of `net` over the whole dataset.
pub fn task_loss<T: Real>(net: &MlpNetwork<T>, data: &Dataset<T>) -> Result<T> {
    if data.is_empty() {
        return Ok(T::zero());
    }
    let out = net.forward_batch(&data.inputs)?;
    Ok(task_loss_and_grad(&out, &data.targets, data.task).0)
}

/// Penalty and its output gradient at one region's vertex outputs.
fn region_penalty<T: Real>(region: &ConvexRegion<T>, outputs: &Matrix<T>) -> Result<(T, Matrix<T>)> {
    let mut total = T::zero();
    let mut grad = Matrix::zeros(outputs.rows(), outputs.cols());
    for (p, y) in outputs.iter_rows().enumerate() {
        if let Some(eq) = &region.equality {
            let r = eq.residual(y)?;
            for (i, &ri) in r.iter().enumerate() {
                total += ri * ri;
                for k in 0..y.len() {
                    grad[(p, k)] += T::of(2.0) * ri * eq.e[(i, k)];
                }
            }
        }
        if let Some(ineq) = &region.inequality {
            let r = ineq.residual(y)?;
            for (i, &ri) in r.iter().enumerate() {
                if ri > T::zero() {
                    total += ri * ri;
                    for k in 0..y.len() {
                        grad[(p, k)] += T::of(2.0) * ri * ineq.c[(i, k)];
                    }
                }
            }
        }
    }
    Ok((total, grad))
}

/// Sum over constrained regions and their vertices of squared equality
/// residuals and squared inequality hinges.
pub fn constraint_penalty<T: Real>(net: &MlpNetwork<T>, regions: &RegionSet<T>) -> Result<T> {
    let mut total = T::zero();
    for r in regions.iter().filter(|r| r.has_constraints()) {
        let out = net.forward_batch(r.vertices())?;
        total += region_penalty(r, &out)?.0;
    }
    Ok(total)
}

/// [`constraint_penalty`] with its parameter gradient.
pub fn constraint_penalty_grad<T: Real>(net: &MlpNetwork<T>, regions: &RegionSet<T>) -> Result<(T, GradientSet<T>)> {
    let mut total = T::zero();
    let mut grads = GradientSet::zeros_like(net);
    for r in regions.iter().filter(|r| r.has_constraints()) {
        let trace = net.forward_trace_batch(r.vertices())?;
        let (p, g) = region_penalty(r, trace.output())?;
        total += p;
        grads.add_scaled(&net.backward_batch(&trace, &g)?, T::one());
    }
    Ok((total, grads))
}

/// Worst vertex residual over all regions, in output units.
pub fn measure_violation<T: Real>(net: &MlpNetwork<T>, regions: &RegionSet<T>) -> Result<T> {
    let mut worst = T::zero();
    for r in regions.iter().filter(|r| r.has_constraints()) {
        let out = net.forward_batch(r.vertices())?;
        worst = worst.max(r.vertex_violation(&out)?);
    }
    Ok(worst)
}

/// `sqrt(avg_task_loss · (1 + V))`.
pub fn balanced_loss<T: Real>(avg_task_loss: T, violation: T) -> Result<T> {
    if !(avg_task_loss >= T::zero()) || !(violation >= T::zero()) {
        return Err(TrainError::Config(format!(
            "balanced loss needs nonnegative inputs, got {avg_task_loss} and {violation}"
        )));
    }
    Ok((avg_task_loss * (T::one() + violation)).sqrt())
}

/// Closed-set membership of `x` in the convex hull of `region`'s vertices.
pub fn region_contains<T: Real>(region: &ConvexRegion<T>, x: &[T]) -> bool {
    if region.is_axis_box() {
        let (lo, hi) = region.bounds();
        return x.iter().zip(lo.iter().zip(&hi)).all(|(v, (l, h))| *v >= *l && *v <= *h);
    }
    // x lies outside the hull iff some affine function is ≥ 1 on every
    // vertex and ≤ −1 at x. Infeasibility of that system is membership.
    let v = region.vertices();
    let d = v.cols();
    let mut a = Matrix::zeros(v.rows() + 1, d + 1);
    for (j, row) in v.iter_rows().enumerate() {
        a.row_mut(j)[..d].copy_from_slice(row);
        a[(j, d)] = T::one();
    }
    for k in 0..d {
        a[(v.rows(), k)] = -x[k];
    }
    a[(v.rows(), d)] = -T::one();
    let c: Vector<T> = vec![T::one(); v.rows() + 1].into();
    let qp = LeastDistanceQp::new(a, c).expect("shapes agree");
    match qpsolver::solve_least_distance(&qp, T::of(qpsolver::DEFAULT_TOL), qpsolver::DEFAULT_MAX_ITER) {
        Ok(sol) => sol.status == QpStatus::Infeasible,
        Err(_) => false,
    }
}

/// Drops samples lying in any equality-constrained region (boundary included).
pub fn filter_equality_regions<T: Real>(data: &Dataset<T>, regions: &RegionSet<T>) -> Dataset<T> {
    let eq: Vec<_> = regions.iter().filter(|r| r.equality.is_some()).collect();
    if eq.is_empty() {
        return data.clone();
    }
    let keep: Vec<usize> = (0..data.len())
        .filter(|&i| !eq.iter().any(|r| region_contains(r, data.inputs.row(i))))
        .collect();
    data.select(&keep)
}

fn epoch_rng(seed: u64, phase: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((phase << 32) | epoch as u64);
    rng
}

/// One pass of mini-batch Adam. Returns the size-weighted mean task loss.
fn run_epoch<T: Real>(
    net: &mut MlpNetwork<T>,
    data: &Dataset<T>,
    regions: Option<(&RegionSet<T>, T)>,
    opt: &mut Adam<T>,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Option<T>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut sum = T::zero();
    let mut params = net.params();
    for chunk in order.chunks(batch_size) {
        let batch = data.select(chunk);
        let trace = net.forward_trace_batch(&batch.inputs)?;
        let (loss, g_out) = task_loss_and_grad(trace.output(), &batch.targets, batch.task);
        let mut grads = net.backward_batch(&trace, &g_out)?;
        let mut total = loss;
        if let Some((regions, lambda)) = regions {
            if lambda > T::zero() {
                let (pen, pg) = constraint_penalty_grad(net, regions)?;
                grads.add_scaled(&pg, lambda);
                total += lambda * pen;
            }
        }
        if !total.is_finite() {
            return Ok(None);
        }
        sum += loss * T::of(chunk.len() as f64);
        opt.step(&mut params, &grads.flatten());
        net.set_params(&params)?;
    }
    Ok(Some(sum / T::of(data.len().max(1) as f64)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct PretrainReport {
    /// Mean mini-batch task loss per epoch.
    pub losses: Vec<f64>,
    pub seconds: f64,
}

/// Minimises the task loss alone for `cfg.pretrain_epochs` epochs.
pub fn pretrain<T: Real>(net: &MlpNetwork<T>, data: &Dataset<T>, cfg: &TrainConfig<T>) -> Result<(MlpNetwork<T>, PretrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::Data("empty dataset".into()));
    }
    check_shapes(net, data)?;
    let started = Instant::now();
    let mut net = net.clone();
    let mut opt = Adam::new(net.num_params(), cfg.learning_rate);
    let mut report = PretrainReport::default();
    for epoch in 0..cfg.pretrain_epochs {
        let mut rng = epoch_rng(cfg.seed, 1, epoch);
        match run_epoch(&mut net, data, None, &mut opt, cfg.batch_size, &mut rng)? {
            Some(l) => report.losses.push(l.f64()),
            None => return Err(TrainError::NonFinite { stage: "pretrain", epoch: epoch + 1 }),
        }
    }
    report.seconds = started.elapsed().as_secs_f64();
    Ok((net, report))
}

fn check_shapes<T: Real>(net: &MlpNetwork<T>, data: &Dataset<T>) -> Result<()> {
    if data.inputs.cols() != net.input_dim() || data.targets.cols() != net.output_dim() {
        return Err(TrainError::Data(format!(
            "dataset is {}→{}, network is {}→{}",
            data.inputs.cols(),
            data.targets.cols(),
            net.input_dim(),
            net.output_dim()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ToleranceMet,
    PatienceExhausted,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Full-dataset mean task loss after re-enforcement.
    pub task_loss: f64,
    pub violation: f64,
    /// Penalty weight used during this epoch.
    pub lambda: f64,
    pub balanced_loss: f64,
    /// Worst sign margin after re-enforcement.
    pub min_margin: f64,
    pub enforce_shift: f64,
    pub enforce_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub pretrain: PretrainReport,
    pub initial_enforcement: EnforcementReport,
    /// Violation right after the initial enforcement.
    pub initial_violation: f64,
    pub epochs: Vec<EpochRecord>,
    pub stop_reason: StopReason,
    /// Epoch of the restored checkpoint; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub best_balanced_loss: f64,
    pub final_violation: f64,
    pub final_task_loss: f64,
    pub finetune_seconds: f64,
    /// Samples used for the task loss after filtering.
    pub task_samples: usize,
}

impl TrainReport {
    pub fn lambda_history(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.lambda).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneOutcome<T> {
    pub net: MlpNetwork<T>,
    pub report: TrainReport,
    pub sign_map: SignMap,
}

/// Computes the unique sign map the fine-tuning loop will hold fixed.
pub fn initial_sign_map<T: Real>(net: &MlpNetwork<T>, regions: &RegionSet<T>, method: SignMethod) -> Result<SignMap> {
    let pre = signs::propagate_vertices(net, regions)?;
    Ok(signs::ensure_unique(&signs::assign(method, &pre), &pre)?)
}

/// Constrained fine-tuning with a sign map computed once from `net`.
pub fn fine_tune<T: Real>(
    net: &MlpNetwork<T>,
    data: &Dataset<T>,
    regions: &RegionSet<T>,
    cfg: &TrainConfig<T>,
) -> Result<FineTuneOutcome<T>> {
    cfg.validate()?;
    let map = initial_sign_map(net, regions, cfg.sign_method)?;
    fine_tune_with_map(net, data, regions, &map, cfg)
}

/// Constrained fine-tuning holding `map` fixed.
pub fn fine_tune_with_map<T: Real>(
    net: &MlpNetwork<T>,
    data: &Dataset<T>,
    regions: &RegionSet<T>,
    map: &SignMap,
    cfg: &TrainConfig<T>,
) -> Result<FineTuneOutcome<T>> {
    cfg.validate()?;
    check_shapes(net, data)?;
    let started = Instant::now();
    let task_data = if cfg.filter_equality_data {
        filter_equality_regions(data, regions)
    } else {
        data.clone()
    };
    if task_data.is_empty() {
        return Err(TrainError::Data("no samples left after filtering".into()));
    }

    let (mut net, initial) = enforce::enforce_signs(net, regions, map, &cfg.enforce)?;
    let initial_violation = measure_violation(&net, regions)?.f64();
    let mut opt = Adam::new(net.num_params(), cfg.finetune_rate());
    let mut lambda = cfg.lambda_init;
    let mut best: Option<(T, MlpNetwork<T>, usize)> = None;
    let mut patience = 0usize;
    let mut epochs = Vec::new();
    let mut stop = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        let mut rng = epoch_rng(cfg.seed, 2, epoch);
        if run_epoch(&mut net, &task_data, Some((regions, lambda)), &mut opt, cfg.batch_size, &mut rng)?.is_none() {
            return Err(TrainError::NonFinite { stage: "fine-tune", epoch });
        }
        let (enforced, rep) = enforce::enforce_signs(&net, regions, map, &cfg.enforce)?;
        net = enforced;
        let v = measure_violation(&net, regions)?;
        let avg = task_loss(&net, &task_data)?;
        if !avg.is_finite() || !v.is_finite() {
            return Err(TrainError::NonFinite { stage: "fine-tune", epoch });
        }
        let lb = balanced_loss(avg, v)?;
        epochs.push(EpochRecord {
            epoch,
            task_loss: avg.f64(),
            violation: v.f64(),
            lambda: lambda.f64(),
            balanced_loss: lb.f64(),
            min_margin: rep.min_margin,
            enforce_shift: rep.total_shift,
            enforce_seconds: rep.total_seconds(),
        });
        if best.as_ref().is_none_or(|(b, _, _)| lb < *b) {
            best = Some((lb, net.clone(), epoch));
            patience = 0;
        } else {
            patience += 1;
        }
        if patience >= cfg.patience_threshold {
            if v > cfg.violation_tolerance && lambda < cfg.lambda_max {
                lambda = (lambda * cfg.penalty_multiplier).min(cfg.lambda_max);
                patience = 0;
            } else {
                stop = StopReason::PatienceExhausted;
                break;
            }
        }
        if v <= cfg.violation_tolerance && epoch >= cfg.min_epochs {
            stop = StopReason::ToleranceMet;
            break;
        }
    }

    let (best_lb, best_epoch) = match best {
        Some((lb, best_net, e)) => {
            net = best_net;
            (lb.f64(), Some(e))
        }
        None => (balanced_loss(task_loss(&net, &task_data)?, measure_violation(&net, regions)?)?.f64(), None),
    };
    let report = TrainReport {
        pretrain: PretrainReport::default(),
        initial_enforcement: initial,
        initial_violation,
        epochs,
        stop_reason: stop,
        best_epoch,
        best_balanced_loss: best_lb,
        final_violation: measure_violation(&net, regions)?.f64(),
        final_task_loss: task_loss(&net, &task_data)?.f64(),
        finetune_seconds: started.elapsed().as_secs_f64(),
        task_samples: task_data.len(),
    };
    Ok(FineTuneOutcome {
        net,
        report,
        sign_map: map.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::LayerParams;
    use crate::regions::{make_box, make_interval, EqualityConstraint, InequalityConstraint};

    fn linear_net(w: f64, b: f64) -> MlpNetwork<f64> {
        MlpNetwork::new(
            vec![
                LayerParams::new(Matrix::from_rows(&[[1.0]]).unwrap(), vec![10.0].into()).unwrap(),
                LayerParams::new(Matrix::from_rows(&[[w]]).unwrap(), vec![b].into()).unwrap(),
            ],
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn balanced_loss_examples() {
        assert_eq!(balanced_loss(0.0, 7.0).unwrap(), 0.0);
        assert_eq!(balanced_loss(4.0, 0.0).unwrap(), 2.0);
        assert_eq!(balanced_loss(1.0, 3.0).unwrap(), 2.0);
        assert!(balanced_loss(-1.0, 0.0).is_err());
        assert!(balanced_loss(1.0, -0.5).is_err());
    }

    #[test]
    fn penalty_arithmetic() {
        // Output 1.0 at a single vertex, target 0.866.
        let net = linear_net(0.0, 1.0);
        let r = ConvexRegion::new("R", Matrix::from_rows(&[[0.5]]).unwrap())
            .unwrap()
            .with_equality(EqualityConstraint::new(Matrix::from_rows(&[[1.0]]).unwrap(), vec![0.866].into()).unwrap());
        let set = RegionSet::new(vec![r]).unwrap();
        let p = constraint_penalty(&net, &set).unwrap();
        assert!((p - 0.134f64 * 0.134).abs() < 1e-12);
        assert!((measure_violation(&net, &set).unwrap() - 0.134).abs() < 1e-12);
    }

    #[test]
    fn satisfied_inequality_has_zero_gradient() {
        let net = MlpNetwork::<f64>::init(&[1, 4, 1], 0.0, 3).unwrap();
        let r = ConvexRegion::new("R", make_interval(0.0, 1.0).unwrap())
            .unwrap()
            .with_inequality(InequalityConstraint::new(Matrix::from_rows(&[[1.0]]).unwrap(), vec![1e6].into()).unwrap());
        let set = RegionSet::new(vec![r]).unwrap();
        let (p, g) = constraint_penalty_grad(&net, &set).unwrap();
        assert_eq!(p, 0.0);
        assert!(g.flatten().iter().all(|&x| x == 0.0));
        let free = RegionSet::new(vec![ConvexRegion::new("F", make_interval(0.0, 1.0).unwrap()).unwrap()]).unwrap();
        assert_eq!(measure_violation(&net, &free).unwrap(), 0.0);
    }

    #[test]
    fn pretrain_fits_least_squares() {
        // y = 2x − 1 is representable exactly; the optimum loss is 0.
        let xs: Vec<[f64; 1]> = (0..32).map(|i| [i as f64 / 31.0]).collect();
        let ys: Vec<[f64; 1]> = xs.iter().map(|x| [2.0 * x[0] - 1.0]).collect();
        let data = Dataset::new(
            Matrix::from_rows(&xs).unwrap(),
            Matrix::from_rows(&ys).unwrap(),
            TaskKind::RegressionMse,
        )
        .unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            batch_size: 32,
            pretrain_epochs: 3000,
            ..TrainConfig::default()
        };
        let (net, rep) = pretrain(&linear_net(0.0, 0.0), &data, &cfg).unwrap();
        assert!(task_loss(&net, &data).unwrap() < 1e-6);
        let (_, rep2) = pretrain(&linear_net(0.0, 0.0), &data, &cfg).unwrap();
        assert_eq!(rep.losses, rep2.losses);
        let zero = TrainConfig { pretrain_epochs: 0, ..cfg };
        let start = linear_net(0.3, 0.1);
        assert_eq!(pretrain(&start, &data, &zero).unwrap().0, start);
    }

    #[test]
    fn filtering_is_closed() {
        let data = Dataset::new(
            Matrix::from_rows(&[[0.0], [1.0], [1.5], [2.0], [3.0]]).unwrap(),
            Matrix::from_rows(&[[0.0]; 5]).unwrap(),
            TaskKind::RegressionMse,
        )
        .unwrap();
        let eq = EqualityConstraint::new(Matrix::from_rows(&[[1.0]]).unwrap(), vec![0.0].into()).unwrap();
        let set = RegionSet::new(vec![ConvexRegion::new("R", make_interval(1.0, 2.0).unwrap())
            .unwrap()
            .with_equality(eq)])
        .unwrap();
        let kept = filter_equality_regions(&data, &set);
        assert_eq!(kept.inputs().column(0), vec![0.0, 3.0]);
        let free = RegionSet::new(vec![ConvexRegion::new("R", make_interval(1.0, 2.0).unwrap()).unwrap()]).unwrap();
        assert_eq!(filter_equality_regions(&data, &free), data);
    }

    #[test]
    fn hull_membership_for_general_polygons() {
        let tri = ConvexRegion::new("T", Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap()).unwrap();
        assert!(region_contains(&tri, &[0.2, 0.2]));
        assert!(region_contains(&tri, &[0.5, 0.5]));
        assert!(region_contains(&tri, &[0.0, 0.0]));
        assert!(!region_contains(&tri, &[0.6, 0.6]));
        assert!(!region_contains(&tri, &[-0.1, 0.2]));
        let sq = ConvexRegion::new("S", make_box(&[0.0, 0.0], &[1.0, 1.0]).unwrap()).unwrap();
        assert!(region_contains(&sq, &[1.0, 0.3]));
        assert!(!region_contains(&sq, &[1.0 + 1e-9, 0.3]));
    }

    #[test]
    fn bce_gradient_matches_sigmoid() {
        let out = Matrix::from_rows(&[[0.0], [2.0]]).unwrap();
        let tgt = Matrix::from_rows(&[[1.0], [0.0]]).unwrap();
        let (l, g) = task_loss_and_grad(&out, &tgt, TaskKind::ClassificationBce);
        let want = (2f64.ln() + (1.0 + 2f64.exp()).ln()) / 2.0;
        assert!((l - want).abs() < 1e-12);
        assert!((g[(0, 0)] + 0.25).abs() < 1e-12);
        assert!((g[(1, 0)] - sigmoid(2.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::<f64>::default().validate().is_ok());
        let bad = TrainConfig::<f64> { penalty_multiplier: 1.0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig::<f64> { lambda_init: 200.0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig::<f64> { violation_tolerance: 0.0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        assert_eq!(TrainConfig::<f64>::default().finetune_rate(), 1e-4);
    }
}
