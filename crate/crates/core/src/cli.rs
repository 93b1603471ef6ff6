//! Command-line front end and model persistence.
//!
//! Exit codes: `0` success, `1` the method failed (infeasible QP,
//! tolerance not met, certification failed), `2` usage or config error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::enforce::{self, EnforceConfig, EnforceError};
use crate::experiments::{self, ExperimentError, ExperimentName, ExperimentSpec, RunOutcome};
use crate::linalg::Matrix;
use crate::network::{LayerParams, MlpNetwork};
use crate::regions::{build_region_set, region_specs, RegionSpec};
use crate::signs::{self, SignMap, SignMethod};
use crate::verifier::{self, AffinityReport};
use crate::{Network, Regions};

pub const SCHEMA_VERSION: u32 = 1;
pub const SEED_ENV: &str = "AFFINE_FENCE_SEED";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failure(_) => 1,
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Failure(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerFile {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
}

/// On-disk network. Floats are written in shortest round-trip form, so
/// loading reproduces every parameter bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub schema_version: u32,
    pub activation_slope: f64,
    pub dims: Vec<usize>,
    pub layers: Vec<LayerFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sign_map: Option<SignMap>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regions: Option<Vec<RegionSpec>>,
}

impl ModelFile {
    pub fn from_network(net: &Network) -> Self {
        ModelFile {
            schema_version: SCHEMA_VERSION,
            activation_slope: net.activation_slope(),
            dims: net.dims(),
            layers: net
                .layers()
                .iter()
                .map(|l| LayerFile {
                    weights: l.weights.to_rows(),
                    biases: l.biases.to_vec(),
                })
                .collect(),
            sign_map: None,
            regions: None,
        }
    }

    pub fn with_sign_map(mut self, map: &SignMap) -> Self {
        self.sign_map = Some(map.clone());
        self
    }

    pub fn with_regions(mut self, regions: &Regions) -> Self {
        self.regions = Some(region_specs(regions));
        self
    }

    pub fn to_network(&self) -> Result<Network> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Usage(format!(
                "schema_version: unsupported value {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let w = Matrix::from_rows(&l.weights)
                    .map_err(|e| CliError::Usage(format!("layers[{i}].weights: {e}")))?;
                LayerParams::new(w, l.biases.clone().into()).map_err(|e| CliError::Usage(format!("layers[{i}]: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let net = MlpNetwork::new(layers, self.activation_slope).map_err(|e| CliError::Usage(format!("layers: {e}")))?;
        if net.dims() != self.dims {
            return Err(CliError::Usage(format!(
                "dims: declared {:?} but layers imply {:?}",
                self.dims,
                net.dims()
            )));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

pub fn save_model(path: &Path, net: &Network) -> Result<()> {
    ModelFile::from_network(net).save(path)
}

pub fn load_model(path: &Path) -> Result<Network> {
    ModelFile::load(path)?.to_network()
}

/// Parses JSON from `path`; errors name the offending field.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    parse_json(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn parse_json<T: DeserializeOwned>(text: &str) -> std::result::Result<T, String> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            e.into_inner().to_string()
        } else {
            format!("at `{path}`: {}", e.into_inner())
        }
    })
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Failure(format!("{}: {e}", dir.display())))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Failure(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::Failure(format!("{}: {e}", path.display())))
}

pub fn load_regions(path: &Path) -> Result<Regions> {
    let specs: Vec<RegionSpec> = read_json(path)?;
    build_region_set(&specs).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

#[derive(Debug, Parser)]
#[command(name = "affine-fence", version, about = "Multi-region affine constraints for ReLU networks")]
pub struct Cli {
    /// Master seed; falls back to AFFINE_FENCE_SEED.
    #[arg(long, global = true, env = SEED_ENV)]
    pub seed: Option<u64>,
    /// Threads for the per-neuron programs of one layer.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub jobs: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain, fine-tune and certify from an experiment config.
    Train(TrainArgs),
    /// Assign and enforce sign patterns on a saved model.
    Enforce(EnforceArgs),
    /// Certify per-region affinity of a saved model.
    Verify(VerifyArgs),
    /// Time assignment and enforcement over a grid of architectures.
    Bench(BenchArgs),
    /// Small fixed demonstrations.
    Demo {
        #[command(subcommand)]
        which: DemoCommand,
    },
    /// Print the default config of an experiment as JSON.
    Preset {
        #[arg(value_enum)]
        name: PresetName,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PresetName {
    Sin,
    Spiral,
    Saddle,
    Bench,
}

impl PresetName {
    fn experiment(self) -> ExperimentName {
        match self {
            PresetName::Sin => ExperimentName::SinRegression,
            PresetName::Spiral => ExperimentName::SpiralClassification,
            PresetName::Saddle => ExperimentName::NonconvexSaddle,
            PresetName::Bench => ExperimentName::Bench,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Experiment config (JSON).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    pub config: Option<PathBuf>,
    /// Run a built-in config instead.
    #[arg(long, value_enum)]
    pub preset: Option<PresetName>,
    /// Artifact directory; overrides the config.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Majority,
    Mean,
}

impl From<MethodArg> for SignMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Majority => SignMethod::Majority,
            MethodArg::Mean => SignMethod::Mean,
        }
    }
}

#[derive(Debug, Args)]
pub struct EnforceArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Regions (JSON array); defaults to those embedded in the model.
    #[arg(long)]
    pub regions: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "majority")]
    pub method: MethodArg,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub margin: f64,
    /// Ignore a sign map embedded in the model and assign afresh.
    #[arg(long)]
    pub reassign: bool,
    /// Adjusted model path.
    #[arg(long)]
    pub output: PathBuf,
    /// Enforcement report path; defaults to `<output>.report.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Regions (JSON array); defaults to those embedded in the model.
    #[arg(long)]
    pub regions: Option<PathBuf>,
    /// Sign map (JSON object); defaults to the one embedded in the model.
    #[arg(long)]
    pub signmap: Option<PathBuf>,
    #[arg(long, default_value_t = verifier::DEFAULT_SAMPLES)]
    pub samples: usize,
    /// Write the affinity reports here as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [64usize, 128, 256])]
    pub widths: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 3])]
    pub depths: Vec<usize>,
    #[arg(long = "regions", value_delimiter = ',', default_values_t = [2usize, 4, 8])]
    pub region_counts: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    pub input_dim: usize,
    /// Directory for bench.csv and bench.json.
    #[arg(long, default_value = "bench_out")]
    pub output: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum DemoCommand {
    /// Two intervals no bias shift can separate.
    BiasOnly {
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Shared versus unique patterns on two intervals.
    Hull {
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = verifier::DEFAULT_SAMPLES)]
        samples: usize,
    },
}

/// Parses `args` and runs the command, mapping errors to exit codes.
pub fn run_from_args<I, S>(args: I) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Runs a parsed command; `Ok` carries the exit code.
pub fn run(cli: &Cli) -> Result<u8> {
    let jobs = cli.jobs as usize;
    match &cli.command {
        Command::Train(a) => cmd_train(a, cli.seed, jobs),
        Command::Enforce(a) => cmd_enforce(a, jobs),
        Command::Verify(a) => cmd_verify(a, cli.seed.unwrap_or(0)),
        Command::Bench(a) => cmd_bench(a, cli.seed.unwrap_or(0)),
        Command::Demo { which } => cmd_demo(which, cli.seed.unwrap_or(0)),
        Command::Preset { name } => {
            let spec = experiments::preset(name.experiment());
            println!("{}", serde_json::to_string_pretty(&spec).expect("serialisable"));
            Ok(0)
        }
    }
}

fn code(ok: bool) -> u8 {
    if ok {
        0
    } else {
        1
    }
}

pub fn cmd_train(a: &TrainArgs, seed: Option<u64>, jobs: usize) -> Result<u8> {
    let mut spec: ExperimentSpec = match (&a.config, a.preset) {
        (Some(path), _) => read_json(path)?,
        (None, Some(p)) => experiments::preset(p.experiment()),
        (None, None) => return Err(CliError::Usage("give --config or --preset".into())),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.train.enforce.jobs = jobs;
    if let Some(out) = &a.output {
        spec.output_dir = Some(out.clone());
    }
    if spec.output_dir.is_none() {
        spec.output_dir = Some(PathBuf::from(format!("out/{}", name_of(spec.name))));
    }
    let outcome = experiments::run_experiment(&spec)?;
    print_outcome(&outcome);
    if let Some(dir) = &spec.output_dir {
        println!("artifacts written to {}", dir.display());
    }
    Ok(code(outcome.passed()))
}

fn name_of(n: ExperimentName) -> String {
    serde_json::to_value(n)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_else(|| "experiment".into())
}

fn print_affinity(reports: &[AffinityReport]) {
    println!(
        "{:<12} {:>8} {:>8} {:>12} {:>12} {:>12} {:>8}",
        "region", "constant", "matched", "fit_resid", "closed_resid", "violation", "samples"
    );
    for r in reports {
        println!(
            "{:<12} {:>8} {:>8} {:>12.3e} {:>12.3e} {:>12.3e} {:>8}",
            r.region_id,
            r.pattern_constant,
            r.assigned_pattern_matched,
            r.affine_residual,
            r.closed_form_residual,
            r.sampled_constraint_violation,
            r.samples_used
        );
    }
}

fn print_outcome(out: &RunOutcome) {
    match out {
        RunOutcome::Train(t) => {
            let r = &t.report;
            println!("experiment      {}", name_of(r.name));
            println!(
                "violation       baseline {:.6e}  final {:.6e}  (tolerance {:.1e})",
                r.baseline.violation, r.final_metrics.violation, r.tolerance
            );
            if let (Some(b), Some(f)) = (r.baseline.mse_outside, r.final_metrics.mse_outside) {
                println!("mse outside     baseline {b:.6}  final {f:.6}");
            }
            if let (Some(b), Some(f)) = (r.baseline.accuracy, r.final_metrics.accuracy) {
                println!("accuracy        baseline {:.2}%  final {:.2}%", 100.0 * b, 100.0 * f);
            }
            println!(
                "fine-tune       {} epochs, stop {:?}, best epoch {:?}",
                r.train.epochs.len(),
                r.train.stop_reason,
                r.train.best_epoch
            );
            print_affinity(&r.affinity);
            println!("patterns distinct {}  certified {}  passed {}", r.patterns_distinct, r.certified, r.passed);
        }
        RunOutcome::BiasOnly(d) => {
            match &d.interval {
                Some(iv) if !d.bias_only_feasible => println!(
                    "bias-only: infeasible at layer {} neuron {}: need b ≥ {} and b ≤ {}",
                    d.conflict_layer.unwrap_or(0),
                    d.conflict_neuron.unwrap_or(0),
                    iv.lower,
                    iv.upper
                ),
                _ => println!("bias-only: feasible"),
            }
            match (d.full_succeeded, d.full_weight, d.full_bias, d.full_min_margin) {
                (true, Some(w), Some(b), Some(m)) => {
                    println!("weights+bias: feasible, w = {w:.6}, b = {b:.6}, min margin {m:.3e}")
                }
                _ => println!("weights+bias: failed"),
            }
        }
        RunOutcome::Hull(h) => {
            println!("margin {}", h.margin);
            for (label, r) in [("shared pattern", &h.shared), ("unique patterns", &h.unique)] {
                println!(
                    "{label:<16} hull_pattern_constant {}  hull_affine_residual {:.3e}",
                    r.hull_pattern_constant, r.hull_affine_residual
                );
            }
        }
        RunOutcome::Bench(rows) => {
            println!("{}", experiments::BENCH_HEADER.join("  "));
            for r in rows {
                println!(
                    "{:>9}  {:>14}  {:>9}  {:>12}  {:>10.4}  {:>11.4}",
                    r.n_regions, r.total_vertices, r.net_width, r.num_hidden_layers, r.t_assign_s, r.t_enforce_s
                );
                if let Some(e) = &r.error {
                    eprintln!(
                        "bench cell ({} regions, width {}, depth {}): {e}",
                        r.n_regions, r.net_width, r.num_hidden_layers
                    );
                }
            }
        }
    }
}

fn regions_for(model: &ModelFile, path: Option<&PathBuf>) -> Result<Regions> {
    match (path, &model.regions) {
        (Some(p), _) => load_regions(p),
        (None, Some(specs)) => build_region_set(specs).map_err(|e| CliError::Usage(format!("model regions: {e}"))),
        (None, None) => Err(CliError::Usage("--regions is required (the model embeds none)".into())),
    }
}

pub fn cmd_enforce(a: &EnforceArgs, jobs: usize) -> Result<u8> {
    if !(a.margin >= 0.0) {
        return Err(CliError::Usage(format!("--margin must be ≥ 0, got {}", a.margin)));
    }
    let model = ModelFile::load(&a.model)?;
    let net = model.to_network()?;
    let regions = regions_for(&model, a.regions.as_ref())?;
    let embedded = model
        .sign_map
        .as_ref()
        .filter(|m| !a.reassign && m.check_against(&net, &regions).is_ok());
    let map = match embedded {
        Some(m) => m.clone(),
        None => {
            let pre = signs::propagate_vertices(&net, &regions).map_err(|e| CliError::Usage(e.to_string()))?;
            signs::ensure_unique(&signs::assign(a.method.into(), &pre), &pre)
                .map_err(|e| CliError::Failure(e.to_string()))?
        }
    };
    let cfg = EnforceConfig {
        margin: a.margin,
        jobs,
        ..EnforceConfig::default()
    };
    let report_path = a
        .report
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.report.json", a.output.display())));
    match enforce::enforce_signs(&net, &regions, &map, &cfg) {
        Ok((out, rep)) => {
            ModelFile::from_network(&out)
                .with_sign_map(&map)
                .with_regions(&regions)
                .save(&a.output)?;
            write_json(&report_path, &rep)?;
            println!("total shift    {:.6e}", rep.total_shift);
            println!("min margin     {:.6e}", rep.min_margin);
            println!("wrote {} and {}", a.output.display(), report_path.display());
            Ok(0)
        }
        Err(EnforceError::Failed(rep)) => {
            write_json(&report_path, &*rep)?;
            for f in &rep.qp_failures {
                eprintln!("QP {:?} at layer {}, neuron {}", f.status, f.layer, f.neuron);
            }
            Ok(1)
        }
        Err(e @ EnforceError::Config(_)) => Err(CliError::Usage(e.to_string())),
        Err(e) => Err(CliError::Usage(e.to_string())),
    }
}

pub fn cmd_verify(a: &VerifyArgs, seed: u64) -> Result<u8> {
    let model = ModelFile::load(&a.model)?;
    let net = model.to_network()?;
    let regions = regions_for(&model, a.regions.as_ref())?;
    let map: SignMap = match (&a.signmap, &model.sign_map) {
        (Some(p), _) => read_json(p)?,
        (None, Some(m)) => m.clone(),
        (None, None) => return Err(CliError::Usage("--signmap is required (the model embeds none)".into())),
    };
    map.check_against(&net, &regions).map_err(|e| CliError::Usage(e.to_string()))?;
    let reports = regions
        .iter()
        .enumerate()
        .map(|(i, r)| {
            verifier::certify_region(&net, r, map.get(&r.id).expect("checked"), a.samples, seed.wrapping_add(i as u64))
        })
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    print_affinity(&reports);
    for r in reports.iter().filter(|r| !r.certified()) {
        match &r.counterexample {
            Some(x) => println!("region {}: counterexample at {:?}", r.region_id, x),
            None => println!("region {}: affine residual above {:.0e}", r.region_id, verifier::AFFINE_TOL),
        }
    }
    let distinct = verifier::certify_distinct(&map);
    println!("patterns distinct {distinct}");
    if let Some(p) = &a.report {
        write_json(p, &reports)?;
    }
    Ok(code(distinct && reports.iter().all(AffinityReport::certified)))
}

pub fn cmd_bench(a: &BenchArgs, seed: u64) -> Result<u8> {
    let rows = experiments::run_bench(&a.widths, &a.depths, &a.region_counts, a.input_dim, seed)?;
    fs::create_dir_all(&a.output).map_err(|e| CliError::Failure(format!("{}: {e}", a.output.display())))?;
    experiments::write_bench_csv(&a.output.join("bench.csv"), &rows)?;
    write_json(&a.output.join("bench.json"), &rows)?;
    print_outcome(&RunOutcome::Bench(rows));
    println!("wrote {}", a.output.join("bench.csv").display());
    Ok(0)
}

pub fn cmd_demo(which: &DemoCommand, seed: u64) -> Result<u8> {
    let (outcome, output) = match which {
        DemoCommand::BiasOnly { output } => (RunOutcome::BiasOnly(experiments::run_bias_only_demo()?), output),
        DemoCommand::Hull { output, samples } => (RunOutcome::Hull(experiments::run_hull_demo(seed, *samples)?), output),
    };
    print_outcome(&outcome);
    if let Some(dir) = output {
        let path = dir.join("report.json");
        match &outcome {
            RunOutcome::BiasOnly(d) => write_json(&path, d)?,
            RunOutcome::Hull(d) => write_json(&path, d)?,
            _ => unreachable!(),
        }
    }
    Ok(code(outcome.passed()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_round_trip_is_bit_exact() {
        let net = MlpNetwork::<f64>::init(&[3, 7, 5, 2], 0.01, 11).unwrap();
        let text = serde_json::to_string(&ModelFile::from_network(&net)).unwrap();
        let back: ModelFile = parse_json(&text).unwrap();
        let net2 = back.to_network().unwrap();
        for (a, b) in net.params().iter().zip(net2.params()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn parse_errors_name_the_field() {
        let err = parse_json::<ModelFile>(r#"{"schema_version":1,"activation_slope":"x","dims":[],"layers":[]}"#).unwrap_err();
        assert!(err.contains("activation_slope"), "{err}");
        let err = parse_json::<ExperimentSpec>(r#"{"name":"sin_regression"}"#).unwrap_err();
        assert!(err.contains("regions"), "{err}");
    }

    #[test]
    fn dims_mismatch_rejected() {
        let net = MlpNetwork::<f64>::init(&[1, 2, 1], 0.0, 0).unwrap();
        let mut f = ModelFile::from_network(&net);
        f.dims = vec![1, 3, 1];
        assert!(matches!(f.to_network(), Err(CliError::Usage(_))));
    }

    #[test]
    fn bad_flags_exit_two() {
        assert_eq!(run_from_args(["affine-fence", "bench", "--widths", "abc"]), ExitCode::from(2));
        assert_eq!(run_from_args(["affine-fence", "frobnicate"]), ExitCode::from(2));
    }
}
