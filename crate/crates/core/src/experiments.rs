//! Dataset generators, the train → fine-tune → certify pipeline, the two
//! demos and the enforcement benchmark.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cli::ModelFile;
use crate::enforce::{self, BiasOnlyOutcome, EnforceConfig, EnforceError};
use crate::linalg::Matrix;
use crate::network::{ActivationPattern, LayerParams, MlpNetwork};
use crate::qpsolver::BiasInterval;
use crate::regions::{
    self, build_region_set, make_abutting_boxes, make_box, make_interval, ConvexRegion, EqualitySpec, InequalitySpec,
    RegionSet, RegionSpec,
};
use crate::signs::{self, SignMap, SignMethod};
use crate::trainer::{self, Dataset, FineTuneOutcome, TaskKind, TrainConfig, TrainReport};
use crate::verifier::{self, AffinityReport, HullReport};
use crate::{Network, Regions};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment spec: {0}")]
    Config(String),
    #[error("{stage} failed: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

fn stage<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> ExperimentError {
    move |e| ExperimentError::Stage {
        stage,
        message: e.to_string(),
    }
}

fn io_err<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> ExperimentError + '_ {
    move |e| ExperimentError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentName {
    SinRegression,
    SpiralClassification,
    NonconvexSaddle,
    BiasOnlyDemo,
    HullDemo,
    Bench,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    /// Sample count for the regression tasks.
    pub n: usize,
    pub n_per_class: usize,
    pub noise: f64,
    /// Held-out noiseless samples per class for spiral accuracy.
    pub test_per_class: usize,
    /// Points per axis of the prediction dump.
    pub grid: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n: 1000,
            n_per_class: 300,
            noise: 0.02,
            test_per_class: 1000,
            grid: 201,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub activation_slope: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            hidden: vec![64, 64, 64],
            activation_slope: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSpec {
    pub widths: Vec<usize>,
    pub depths: Vec<usize>,
    pub region_counts: Vec<usize>,
    pub input_dim: usize,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            widths: vec![64, 128, 256],
            depths: vec![1, 2, 3],
            region_counts: vec![2, 4, 8],
            input_dim: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: ExperimentName,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetSpec,
    pub regions: Vec<RegionSpec>,
    #[serde(default)]
    pub architecture: Architecture,
    #[serde(default)]
    pub train: TrainConfig<f64>,
    #[serde(default = "default_samples")]
    pub certify_samples: usize,
    #[serde(default)]
    pub bench: BenchSpec,
}

fn default_samples() -> usize {
    verifier::DEFAULT_SAMPLES
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        match self.name {
            ExperimentName::SinRegression | ExperimentName::NonconvexSaddle => {
                if self.dataset.n < if self.name == ExperimentName::SinRegression { 2 } else { 4 } {
                    return bad(format!("dataset.n = {} is too small", self.dataset.n));
                }
            }
            ExperimentName::SpiralClassification => {
                if self.dataset.n_per_class < 10 {
                    return bad("dataset.n_per_class must be at least 10".into());
                }
                if !(self.dataset.noise >= 0.0) {
                    return bad("dataset.noise must be nonnegative".into());
                }
            }
            ExperimentName::Bench => {
                let b = &self.bench;
                if b.widths.is_empty() || b.depths.is_empty() || b.region_counts.is_empty() {
                    return bad("bench lists must be nonempty".into());
                }
            }
            ExperimentName::BiasOnlyDemo | ExperimentName::HullDemo => {}
        }
        if self.is_training() {
            if self.regions.is_empty() {
                return bad("regions: at least one region is required".into());
            }
            if self.architecture.hidden.is_empty() || self.architecture.hidden.contains(&0) {
                return bad("architecture.hidden must list positive widths".into());
            }
            self.train.validate().map_err(|e| ExperimentError::Config(format!("train: {e}")))?;
        }
        Ok(())
    }

    fn is_training(&self) -> bool {
        matches!(
            self.name,
            ExperimentName::SinRegression | ExperimentName::SpiralClassification | ExperimentName::NonconvexSaddle
        )
    }
}

/// Evenly spaced `sin` samples on `[0, 2π]`, endpoints included.
pub fn gen_sin_dataset(n: usize) -> Result<Dataset<f64>> {
    if n < 2 {
        return Err(ExperimentError::Config("sin dataset needs n ≥ 2".into()));
    }
    let xs: Vec<f64> = (0..n).map(|i| 2.0 * PI * i as f64 / (n - 1) as f64).collect();
    let inputs = Matrix::new(n, 1, xs.clone()).expect("sized");
    let targets = Matrix::new(n, 1, xs.iter().map(|x| x.sin()).collect()).expect("sized");
    Dataset::new(inputs, targets, TaskKind::RegressionMse).map_err(stage("dataset"))
}

pub fn sin_region_specs() -> Vec<RegionSpec> {
    vec![
        RegionSpec {
            id: "R1".into(),
            vertices: Some(vec![vec![PI / 3.0], vec![3.0 * PI / 4.0]]),
            lower: None,
            upper: None,
            equality: Some(EqualitySpec {
                e: vec![vec![1.0]],
                f: vec![(PI / 3.0).sin()],
            }),
            inequality: None,
        },
        RegionSpec {
            id: "R2".into(),
            vertices: Some(vec![vec![PI + PI / 3.0], vec![PI + 3.0 * PI / 4.0]]),
            lower: None,
            upper: None,
            equality: None,
            inequality: Some(InequalitySpec {
                c: vec![vec![1.0]],
                d: vec![-0.5],
            }),
        },
    ]
}

/// `R1 = [π/3, 3π/4]` with `y = sin(π/3)` and `R2 = [4π/3, 7π/4]` with `y ≤ −0.5`.
pub fn sin_regions() -> Regions {
    build_region_set(&sin_region_specs()).expect("valid preset")
}

/// Two interleaved spirals with `t ∈ [0, 3π]`, radius `t / 3π`, class 1
/// rotated by `π`, Gaussian noise, coordinates clamped to `[−1, 1]`.
/// Rows hold class 0 first.
pub fn gen_spiral_dataset(n_per_class: usize, noise: f64, seed: u64) -> Result<Dataset<f64>> {
    if n_per_class < 10 {
        return Err(ExperimentError::Config("spiral dataset needs n_per_class ≥ 10".into()));
    }
    let normal = Normal::new(0.0, noise.max(0.0)).map_err(|e| ExperimentError::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(4 * n_per_class);
    let mut y = Vec::with_capacity(2 * n_per_class);
    for class in 0..2 {
        for _ in 0..n_per_class {
            let t = rng.random::<f64>() * 3.0 * PI;
            let r = t / (3.0 * PI);
            let sign = if class == 0 { 1.0 } else { -1.0 };
            for c in [r * t.cos(), r * t.sin()] {
                let jitter = if noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                x.push((sign * c + jitter).clamp(-1.0, 1.0));
            }
            y.push(class as f64);
        }
    }
    let inputs = Matrix::new(2 * n_per_class, 2, x).expect("sized");
    let targets = Matrix::new(2 * n_per_class, 1, y).expect("sized");
    Dataset::new(inputs, targets, TaskKind::ClassificationBce).map_err(stage("dataset"))
}

/// Side-0.3 squares centred on the outer turn of each arm.
pub fn spiral_region_specs() -> Vec<RegionSpec> {
    let square = |id: &str, cx: f64, cy: f64| RegionSpec {
        id: id.into(),
        vertices: None,
        lower: Some(vec![cx - 0.15, cy - 0.15]),
        upper: Some(vec![cx + 0.15, cy + 0.15]),
        equality: None,
        inequality: None,
    };
    let r = 2.5 * PI / (3.0 * PI);
    vec![square("S0", 0.0, r), square("S1", 0.0, -r)]
}

/// Uniform samples on `[−1, 1]²` of `y = x₁² − x₂²`.
pub fn gen_saddle_dataset(n: usize, seed: u64) -> Result<Dataset<f64>> {
    if n < 4 {
        return Err(ExperimentError::Config("saddle dataset needs n ≥ 4".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let a = rng.random_range(-1.0..=1.0);
        let b = rng.random_range(-1.0..=1.0);
        x.extend([a, b]);
        y.push(saddle(a, b));
    }
    Dataset::new(
        Matrix::new(n, 2, x).expect("sized"),
        Matrix::new(n, 1, y).expect("sized"),
        TaskKind::RegressionMse,
    )
    .map_err(stage("dataset"))
}

pub fn saddle(x1: f64, x2: f64) -> f64 {
    x1 * x1 - x2 * x2
}

/// `[−0.5, 0.5] × [−0.25, 0.25]` split at `x₁ = 0` with the given gap, both
/// halves constrained to `y = 0`.
pub fn saddle_region_specs(gap: f64) -> Vec<RegionSpec> {
    let (a, b) = make_abutting_boxes(&[-0.5, -0.25], &[0.5, 0.25], 0, gap).expect("valid split");
    let spec = |id: &str, m: &Matrix<f64>| RegionSpec {
        id: id.into(),
        vertices: Some(m.to_rows()),
        lower: None,
        upper: None,
        equality: Some(EqualitySpec {
            e: vec![vec![1.0]],
            f: vec![0.0],
        }),
        inequality: None,
    };
    vec![spec("left", &a), spec("right", &b)]
}

/// Default spec for each experiment.
pub fn preset(name: ExperimentName) -> ExperimentSpec {
    let base = ExperimentSpec {
        name,
        output_dir: None,
        seed: 0,
        dataset: DatasetSpec::default(),
        regions: Vec::new(),
        architecture: Architecture::default(),
        train: TrainConfig::default(),
        certify_samples: verifier::DEFAULT_SAMPLES,
        bench: BenchSpec::default(),
    };
    match name {
        ExperimentName::SinRegression => ExperimentSpec {
            regions: sin_region_specs(),
            dataset: DatasetSpec { n: 1000, ..DatasetSpec::default() },
            train: TrainConfig {
                learning_rate: 1e-3,
                batch_size: 64,
                pretrain_epochs: 2048,
                min_epochs: 30,
                max_epochs: 500,
                patience_threshold: 20,
                violation_tolerance: 5e-4,
                sign_method: SignMethod::Majority,
                ..TrainConfig::default()
            },
            ..base
        },
        ExperimentName::SpiralClassification => ExperimentSpec {
            regions: spiral_region_specs(),
            architecture: Architecture {
                hidden: vec![32],
                activation_slope: 0.0,
            },
            train: TrainConfig {
                learning_rate: 1e-2,
                batch_size: 64,
                pretrain_epochs: 30,
                min_epochs: 3000,
                max_epochs: 3000,
                patience_threshold: 50,
                sign_method: SignMethod::Majority,
                ..TrainConfig::default()
            },
            ..base
        },
        ExperimentName::NonconvexSaddle => ExperimentSpec {
            regions: saddle_region_specs(regions::default_gap()),
            dataset: DatasetSpec { n: 2000, ..DatasetSpec::default() },
            architecture: Architecture {
                hidden: vec![64, 64],
                activation_slope: 0.01,
            },
            train: TrainConfig {
                learning_rate: 1e-3,
                batch_size: 64,
                pretrain_epochs: 300,
                min_epochs: 10,
                max_epochs: 1000,
                patience_threshold: 20,
                lambda_init: 10.0,
                violation_tolerance: 1e-3,
                ..TrainConfig::default()
            },
            ..base
        },
        ExperimentName::BiasOnlyDemo | ExperimentName::HullDemo | ExperimentName::Bench => base,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub violation: f64,
    pub task_loss: f64,
    /// MSE on samples outside every constrained region (regression only).
    pub mse_outside: Option<f64>,
    /// Held-out noiseless accuracy (classification only).
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub name: ExperimentName,
    pub seed: u64,
    pub tolerance: f64,
    pub baseline: Metrics,
    #[serde(rename = "final")]
    pub final_metrics: Metrics,
    pub train: TrainReport,
    pub affinity: Vec<AffinityReport>,
    pub patterns_distinct: bool,
    pub certified: bool,
    pub tolerance_met: bool,
    pub passed: bool,
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub report: ExperimentReport,
    pub baseline: Network,
    pub net: Network,
    pub sign_map: SignMap,
    pub regions: Regions,
    pub data: Dataset<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasOnlyDemo {
    pub bias_only_feasible: bool,
    pub conflict_layer: Option<usize>,
    pub conflict_neuron: Option<usize>,
    pub interval: Option<BiasInterval>,
    pub full_succeeded: bool,
    pub full_min_margin: Option<f64>,
    pub full_weight: Option<f64>,
    pub full_bias: Option<f64>,
}

impl BiasOnlyDemo {
    pub fn passed(&self) -> bool {
        !self.bias_only_feasible && self.full_succeeded && self.full_min_margin.is_some_and(|m| m >= -1e-8)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HullDemo {
    pub margin: f64,
    pub shared: HullReport,
    pub unique: HullReport,
}

impl HullDemo {
    pub fn passed(&self) -> bool {
        self.shared.hull_pattern_constant
            && self.shared.hull_affine_residual <= verifier::AFFINE_TOL
            && !self.unique.hull_pattern_constant
    }
}

/// One cell of the enforcement-time sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub n_regions: usize,
    pub total_vertices: usize,
    pub net_width: usize,
    pub num_hidden_layers: usize,
    pub t_assign_s: f64,
    pub t_enforce_s: f64,
    /// Enforcement failure, if any; kept out of the CSV.
    pub error: Option<String>,
}

#[derive(Serialize)]
struct BenchCsvRow {
    #[serde(rename = "N_Regions")]
    n_regions: usize,
    #[serde(rename = "Total_Vertices")]
    total_vertices: usize,
    #[serde(rename = "Net_Width")]
    net_width: usize,
    #[serde(rename = "Num_Hidden_L")]
    num_hidden_layers: usize,
    #[serde(rename = "T_Assign_s")]
    t_assign_s: f64,
    #[serde(rename = "T_Enforce_s")]
    t_enforce_s: f64,
}

pub const BENCH_HEADER: [&str; 6] = [
    "N_Regions",
    "Total_Vertices",
    "Net_Width",
    "Num_Hidden_L",
    "T_Assign_s",
    "T_Enforce_s",
];

#[derive(Debug, Clone, PartialEq)]
pub enum RunOutcome {
    Train(Box<TrainOutcome>),
    BiasOnly(BiasOnlyDemo),
    Hull(HullDemo),
    Bench(Vec<BenchRow>),
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        match self {
            RunOutcome::Train(t) => t.report.passed,
            RunOutcome::BiasOnly(d) => d.passed(),
            RunOutcome::Hull(d) => d.passed(),
            RunOutcome::Bench(rows) => rows.iter().all(|r| r.t_assign_s >= 0.0 && r.t_enforce_s >= 0.0),
        }
    }
}

/// Runs `spec` and writes its artifacts when `output_dir` is set.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<RunOutcome> {
    spec.validate()?;
    let out = match spec.name {
        ExperimentName::BiasOnlyDemo => RunOutcome::BiasOnly(run_bias_only_demo()?),
        ExperimentName::HullDemo => RunOutcome::Hull(run_hull_demo(spec.seed, spec.certify_samples)?),
        ExperimentName::Bench => {
            let b = &spec.bench;
            RunOutcome::Bench(run_bench(&b.widths, &b.depths, &b.region_counts, b.input_dim, spec.seed)?)
        }
        _ => RunOutcome::Train(Box::new(run_training(spec)?)),
    };
    if let Some(dir) = &spec.output_dir {
        write_artifacts(dir, &out)?;
    }
    Ok(out)
}

fn metrics(net: &Network, data: &Dataset<f64>, regions: &Regions, test: Option<&Dataset<f64>>) -> Result<Metrics> {
    let violation = trainer::measure_violation(net, regions).map_err(stage("evaluation"))?;
    let task_loss = trainer::task_loss(net, data).map_err(stage("evaluation"))?;
    let mse_outside = match data.task() {
        TaskKind::RegressionMse => {
            let constrained: Vec<&ConvexRegion<f64>> = regions.iter().filter(|r| r.has_constraints()).collect();
            let keep: Vec<usize> = (0..data.len())
                .filter(|&i| !constrained.iter().any(|r| trainer::region_contains(r, data.inputs().row(i))))
                .collect();
            Some(trainer::task_loss(net, &data.select(&keep)).map_err(stage("evaluation"))?)
        }
        TaskKind::ClassificationBce => None,
    };
    let accuracy = match test {
        Some(t) => Some(accuracy(net, t)?),
        None => None,
    };
    Ok(Metrics {
        violation,
        task_loss,
        mse_outside,
        accuracy,
    })
}

/// Fraction of rows whose logit sign matches the 0/1 label.
pub fn accuracy(net: &Network, data: &Dataset<f64>) -> Result<f64> {
    let out = net.forward_batch(data.inputs()).map_err(stage("evaluation"))?;
    let hits = out
        .data()
        .iter()
        .zip(data.targets().data())
        .filter(|(&z, &t)| (z >= 0.0) == (t == 1.0))
        .count();
    Ok(hits as f64 / data.len().max(1) as f64)
}

fn run_training(spec: &ExperimentSpec) -> Result<TrainOutcome> {
    let started = Instant::now();
    let (data, test) = match spec.name {
        ExperimentName::SinRegression => (gen_sin_dataset(spec.dataset.n)?, None),
        ExperimentName::SpiralClassification => (
            gen_spiral_dataset(spec.dataset.n_per_class, spec.dataset.noise, spec.seed)?,
            Some(gen_spiral_dataset(spec.dataset.test_per_class, 0.0, spec.seed.wrapping_add(1))?),
        ),
        ExperimentName::NonconvexSaddle => (gen_saddle_dataset(spec.dataset.n, spec.seed)?, None),
        _ => unreachable!("not a training experiment"),
    };
    let regions: Regions = build_region_set(&spec.regions).map_err(|e| ExperimentError::Config(format!("regions: {e}")))?;
    let in_dim = data.inputs().cols();
    if let Some(r) = regions.iter().find(|r| r.dim() != in_dim) {
        return Err(ExperimentError::Config(format!(
            "regions: `{}` has dimension {}, the dataset has {in_dim}",
            r.id,
            r.dim()
        )));
    }
    let mut dims = vec![in_dim];
    dims.extend(&spec.architecture.hidden);
    dims.push(data.targets().cols());
    let cfg = TrainConfig {
        seed: spec.seed,
        ..spec.train
    };
    let init = MlpNetwork::init(&dims, spec.architecture.activation_slope, spec.seed).map_err(stage("init"))?;
    let (baseline, pre) = trainer::pretrain(&init, &data, &cfg).map_err(stage("pretrain"))?;
    let FineTuneOutcome {
        net,
        mut report,
        sign_map,
    } = trainer::fine_tune(&baseline, &data, &regions, &cfg).map_err(stage("fine-tune"))?;
    report.pretrain = pre;

    let affinity = regions
        .iter()
        .enumerate()
        .map(|(i, r)| {
            verifier::certify_region(
                &net,
                r,
                sign_map.get(&r.id).expect("every region has a pattern"),
                spec.certify_samples,
                spec.seed.wrapping_add(1000 + i as u64),
            )
        })
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(stage("certification"))?;
    let patterns_distinct = verifier::certify_distinct(&sign_map);
    let certified = patterns_distinct && affinity.iter().all(AffinityReport::certified);
    let base_m = metrics(&baseline, &data, &regions, test.as_ref())?;
    let final_m = metrics(&net, &data, &regions, test.as_ref())?;
    let tolerance_met = final_m.violation <= cfg.violation_tolerance;
    Ok(TrainOutcome {
        report: ExperimentReport {
            name: spec.name,
            seed: spec.seed,
            tolerance: cfg.violation_tolerance,
            baseline: base_m,
            final_metrics: final_m,
            train: report,
            affinity,
            patterns_distinct,
            certified,
            tolerance_met,
            passed: tolerance_met && certified,
            total_seconds: started.elapsed().as_secs_f64(),
        },
        baseline,
        net,
        sign_map,
        regions,
        data,
    })
}

/// The two-interval instance where no bias works but a weight change does:
/// `z = x`, `[0, 1]` must be positive and `[2, 3]` negative.
pub fn bias_only_instance() -> (Network, Regions, SignMap) {
    let net = MlpNetwork::new(
        vec![
            LayerParams::new(Matrix::from_rows(&[[1.0]]).unwrap(), vec![0.0].into()).unwrap(),
            LayerParams::new(Matrix::from_rows(&[[1.0]]).unwrap(), vec![0.0].into()).unwrap(),
        ],
        0.0,
    )
    .expect("valid");
    let regions = RegionSet::new(vec![
        ConvexRegion::new("R1", make_interval(0.0, 1.0).unwrap()).unwrap(),
        ConvexRegion::new("R2", make_interval(2.0, 3.0).unwrap()).unwrap(),
    ])
    .expect("valid");
    use crate::network::Sign;
    let map = SignMap::new(vec![
        ("R1".into(), ActivationPattern::new(vec![vec![Sign::Positive]])),
        ("R2".into(), ActivationPattern::new(vec![vec![Sign::Negative]])),
    ]);
    (net, regions, map)
}

/// Margin for the weight-and-bias half of the bias-only demo. At zero the
/// minimal shift collapses to w = b = 0.
pub const BIAS_DEMO_MARGIN: f64 = 0.1;

pub fn run_bias_only_demo() -> Result<BiasOnlyDemo> {
    let (net, regions, map) = bias_only_instance();
    let bias = enforce::enforce_bias_only(&net, &regions, &map, 0.0).map_err(stage("bias-only enforcement"))?;
    let mut demo = BiasOnlyDemo {
        bias_only_feasible: matches!(bias, BiasOnlyOutcome::Feasible(_)),
        conflict_layer: None,
        conflict_neuron: None,
        interval: None,
        full_succeeded: false,
        full_min_margin: None,
        full_weight: None,
        full_bias: None,
    };
    if let BiasOnlyOutcome::Infeasible { layer, neuron, interval } = bias {
        demo.conflict_layer = Some(layer);
        demo.conflict_neuron = Some(neuron);
        demo.interval = Some(interval);
    }
    let cfg = EnforceConfig {
        margin: BIAS_DEMO_MARGIN,
        ..EnforceConfig::default()
    };
    if let Ok((full, rep)) = enforce::enforce_signs(&net, &regions, &map, &cfg) {
        demo.full_succeeded = true;
        demo.full_min_margin = Some(rep.min_margin);
        demo.full_weight = Some(full.layers()[0].weights[(0, 0)]);
        demo.full_bias = Some(full.layers()[0].biases[0]);
    }
    Ok(demo)
}

/// Margin used by the hull demo so that unique patterns differ strictly.
pub const HULL_DEMO_MARGIN: f64 = 0.1;

/// Enforces one shared pattern and, separately, unique patterns on two
/// intervals of a random network, and checks affinity over their hull.
pub fn run_hull_demo(seed: u64, n_samples: usize) -> Result<HullDemo> {
    let net = MlpNetwork::init(&[1, 16, 16, 1], 0.01, seed).map_err(stage("init"))?;
    let a = ConvexRegion::new("A", make_interval(-2.0, -1.0).unwrap()).unwrap();
    let b = ConvexRegion::new("B", make_interval(1.0, 2.0).unwrap()).unwrap();
    let regions = RegionSet::new(vec![a.clone(), b.clone()]).unwrap();
    let cfg = EnforceConfig {
        margin: HULL_DEMO_MARGIN,
        ..EnforceConfig::default()
    };

    let union = RegionSet::new(vec![ConvexRegion::new("AB", a.vertices().vstack(b.vertices()).unwrap()).unwrap()]).unwrap();
    let pre = signs::propagate_vertices(&net, &union).map_err(stage("sign assignment"))?;
    let joint = signs::assign_majority(&pre).pattern(0).clone();
    let shared_map = SignMap::new(vec![("A".into(), joint.clone()), ("B".into(), joint)]);
    let (shared_net, _) = enforce::enforce_signs(&net, &regions, &shared_map, &cfg).map_err(stage("shared enforcement"))?;

    let unique_map = trainer::initial_sign_map(&net, &regions, SignMethod::Majority).map_err(stage("sign assignment"))?;
    let (unique_net, _) = enforce::enforce_signs(&net, &regions, &unique_map, &cfg).map_err(stage("unique enforcement"))?;

    Ok(HullDemo {
        margin: HULL_DEMO_MARGIN,
        shared: verifier::hull_check(&shared_net, &a, &b, n_samples, seed).map_err(stage("hull check"))?,
        unique: verifier::hull_check(&unique_net, &a, &b, n_samples, seed).map_err(stage("hull check"))?,
    })
}

/// `n` pairwise disjoint random boxes in `[−1, 1]^d` with sides in `[0.1, 0.3]`.
pub fn random_boxes(n: usize, d: usize, seed: u64) -> Result<Regions> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut placed: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let mut attempts = 0;
    while placed.len() < n {
        attempts += 1;
        if attempts > 100_000 {
            return Err(ExperimentError::Config(format!("could not place {n} disjoint boxes in dimension {d}")));
        }
        let lo: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..0.7)).collect();
        let hi: Vec<f64> = lo.iter().map(|&l| l + rng.random_range(0.1..0.3)).collect();
        let overlaps = placed
            .iter()
            .any(|(pl, ph)| (0..d).all(|j| lo[j] <= ph[j] && pl[j] <= hi[j]));
        if !overlaps {
            placed.push((lo, hi));
        }
    }
    let regions = placed
        .iter()
        .enumerate()
        .map(|(i, (lo, hi))| ConvexRegion::new(format!("B{i}"), make_box(lo, hi)?))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(stage("bench setup"))?;
    RegionSet::new(regions).map_err(stage("bench setup"))
}

/// Times sign assignment and enforcement over every (regions, width, depth)
/// combination; rows ordered by region count, then width, then depth.
pub fn run_bench(
    widths: &[usize],
    depths: &[usize],
    region_counts: &[usize],
    input_dim: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if widths.is_empty() || depths.is_empty() || region_counts.is_empty() {
        return Err(ExperimentError::Config("bench lists must be nonempty".into()));
    }
    let mut rows = Vec::new();
    for &n in region_counts {
        let regions = random_boxes(n, input_dim, seed.wrapping_add(n as u64))?;
        for &w in widths {
            for &depth in depths {
                let mut dims = vec![input_dim];
                dims.extend(std::iter::repeat_n(w, depth));
                dims.push(1);
                let net = MlpNetwork::init(&dims, 0.01, seed).map_err(stage("bench setup"))?;
                let t0 = Instant::now();
                let map = trainer::initial_sign_map(&net, &regions, SignMethod::Majority);
                let t_assign = t0.elapsed().as_secs_f64();
                let (t_enforce, error) = match map {
                    Ok(map) => {
                        let t1 = Instant::now();
                        let res = enforce::enforce_signs(&net, &regions, &map, &EnforceConfig::default());
                        let t = t1.elapsed().as_secs_f64();
                        (t, res.err().map(|e: EnforceError| e.to_string()))
                    }
                    Err(e) => (0.0, Some(e.to_string())),
                };
                rows.push(BenchRow {
                    n_regions: n,
                    total_vertices: regions.total_vertices(),
                    net_width: w,
                    num_hidden_layers: depth,
                    t_assign_s: t_assign,
                    t_enforce_s: t_enforce,
                    error,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_bench_csv(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(io_err(path))?;
    for r in rows {
        w.serialize(BenchCsvRow {
            n_regions: r.n_regions,
            total_vertices: r.total_vertices,
            net_width: r.net_width,
            num_hidden_layers: r.num_hidden_layers,
            t_assign_s: r.t_assign_s,
            t_enforce_s: r.t_enforce_s,
        })
        .map_err(io_err(path))?;
    }
    if rows.is_empty() {
        w.write_record(BENCH_HEADER).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Serialize)]
struct CurveRow {
    epoch: usize,
    task_loss: f64,
    #[serde(rename = "V")]
    violation: f64,
    lambda: f64,
    #[serde(rename = "L_balanced")]
    balanced_loss: f64,
}

pub fn write_curves_csv(path: &Path, report: &TrainReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(io_err(path))?;
    for e in &report.epochs {
        w.serialize(CurveRow {
            epoch: e.epoch,
            task_loss: e.task_loss,
            violation: e.violation,
            lambda: e.lambda,
            balanced_loss: e.balanced_loss,
        })
        .map_err(io_err(path))?;
    }
    if report.epochs.is_empty() {
        w.write_record(["epoch", "task_loss", "V", "lambda", "L_balanced"]).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Dense grid over the bounding box of the training inputs.
pub fn prediction_grid(data: &Dataset<f64>, per_axis: usize) -> Matrix<f64> {
    let d = data.inputs().cols();
    let per_axis = per_axis.max(2);
    let (mut lo, mut hi) = (vec![f64::INFINITY; d], vec![f64::NEG_INFINITY; d]);
    for r in data.inputs().iter_rows() {
        for j in 0..d {
            lo[j] = lo[j].min(r[j]);
            hi[j] = hi[j].max(r[j]);
        }
    }
    let total = per_axis.pow(d as u32);
    let mut m = Matrix::zeros(total, d);
    for k in 0..total {
        let mut rest = k;
        for j in (0..d).rev() {
            let i = rest % per_axis;
            rest /= per_axis;
            m[(k, j)] = lo[j] + (hi[j] - lo[j]) * i as f64 / (per_axis - 1) as f64;
        }
    }
    m
}

pub fn write_predictions_csv(path: &Path, grid: &Matrix<f64>, baseline: &Network, net: &Network) -> Result<()> {
    let base = baseline.forward_batch(grid).map_err(stage("predictions"))?;
    let fin = net.forward_batch(grid).map_err(stage("predictions"))?;
    let mut w = csv::Writer::from_path(path).map_err(io_err(path))?;
    let mut header: Vec<String> = (0..grid.cols()).map(|j| format!("x{j}")).collect();
    header.extend((0..fin.cols()).map(|k| format!("y{k}")));
    header.extend((0..base.cols()).map(|k| format!("baseline_y{k}")));
    w.write_record(&header).map_err(io_err(path))?;
    for i in 0..grid.rows() {
        let rec: Vec<String> = grid
            .row(i)
            .iter()
            .chain(fin.row(i))
            .chain(base.row(i))
            .map(|v| v.to_string())
            .collect();
        w.write_record(&rec).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(io_err(path))?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn write_artifacts(dir: &Path, out: &RunOutcome) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    match out {
        RunOutcome::Train(t) => {
            ModelFile::from_network(&t.net)
                .with_sign_map(&t.sign_map)
                .with_regions(&t.regions)
                .save(&dir.join("model.json"))
                .map_err(stage("save model"))?;
            ModelFile::from_network(&t.baseline)
                .save(&dir.join("baseline_model.json"))
                .map_err(stage("save model"))?;
            write_json(&dir.join("report.json"), &t.report)?;
            write_curves_csv(&dir.join("curves.csv"), &t.report.train)?;
            let per_axis = if t.data.inputs().cols() == 1 { 1001 } else { 201 };
            write_predictions_csv(
                &dir.join("predictions.csv"),
                &prediction_grid(&t.data, per_axis),
                &t.baseline,
                &t.net,
            )?;
        }
        RunOutcome::BiasOnly(d) => write_json(&dir.join("report.json"), d)?,
        RunOutcome::Hull(d) => write_json(&dir.join("report.json"), d)?,
        RunOutcome::Bench(rows) => {
            write_bench_csv(&dir.join("bench.csv"), rows)?;
            write_json(&dir.join("bench.json"), rows)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sin_dataset_values() {
        let d = gen_sin_dataset(5).unwrap();
        assert!(d.targets().column(0)[2].abs() < 1e-15);
        let two = gen_sin_dataset(2).unwrap();
        assert_eq!(two.inputs().column(0), vec![0.0, 2.0 * PI]);
        assert!(gen_sin_dataset(1).is_err());
        let d = gen_sin_dataset(13).unwrap();
        // x = π/2 is sample 3 of 13.
        assert!((d.targets()[(3, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn sin_region_bounds() {
        let r = sin_regions();
        let r1 = r.get("R1").unwrap().vertices().column(0);
        let r2 = r.get("R2").unwrap().vertices().column(0);
        assert!((r1[0] - 1.04720).abs() < 1e-5 && (r1[1] - 2.35619).abs() < 1e-5);
        assert!((r2[0] - 4.18879).abs() < 1e-5 && (r2[1] - 5.49779).abs() < 1e-5);
        assert_eq!(r.get("R2").unwrap().inequality.as_ref().unwrap().d[0], -0.5);
        assert!((r.get("R1").unwrap().equality.as_ref().unwrap().f[0] - 0.8660254).abs() < 1e-7);
    }

    #[test]
    fn spiral_dataset_shape() {
        let a = gen_spiral_dataset(50, 0.1, 4).unwrap();
        let b = gen_spiral_dataset(50, 0.1, 4).unwrap();
        assert_eq!(a, b);
        let ones = a.targets().data().iter().filter(|&&t| t == 1.0).count();
        assert_eq!(ones, 50);
        assert!(a.inputs().data().iter().all(|v| v.abs() <= 1.0));
        assert!(gen_spiral_dataset(5, 0.0, 0).is_err());
    }

    #[test]
    fn saddle_values() {
        assert_eq!(saddle(0.0, 0.0), 0.0);
        assert_eq!(saddle(1.0, 0.0), 1.0);
        assert_eq!(saddle(0.0, 1.0), -1.0);
        let d = gen_saddle_dataset(10, 1).unwrap();
        for (x, y) in d.inputs().iter_rows().zip(d.targets().iter_rows()) {
            assert_eq!(y[0], saddle(x[0], x[1]));
        }
    }

    #[test]
    fn saddle_boxes_gap() {
        let specs = saddle_region_specs(regions::default_gap());
        let set: Regions = build_region_set(&specs).unwrap();
        let (_, lhi) = set.get("left").unwrap().bounds();
        let (rlo, _) = set.get("right").unwrap().bounds();
        let gap = rlo[0] - lhi[0];
        assert!(gap > 0.0 && gap <= 2.0 * regions::default_gap::<f64>());
    }

    #[test]
    fn random_boxes_disjoint() {
        let set = random_boxes(8, 4, 3).unwrap();
        assert_eq!(set.total_vertices(), 8 * 16);
        let b: Vec<_> = set.iter().map(|r| r.bounds()).collect();
        for i in 0..b.len() {
            for j in i + 1..b.len() {
                assert!((0..4).any(|k| b[i].1[k] < b[j].0[k] || b[j].1[k] < b[i].0[k]));
            }
        }
    }

    #[test]
    fn bench_rejects_empty() {
        assert!(run_bench(&[], &[1], &[2], 4, 0).is_err());
    }

    #[test]
    fn grid_covers_bounds() {
        let d = gen_sin_dataset(10).unwrap();
        let g = prediction_grid(&d, 5);
        assert_eq!(g.rows(), 5);
        assert_eq!(g[(0, 0)], 0.0);
        assert_eq!(g[(4, 0)], 2.0 * PI);
    }
}
