//! Experiment configuration, the end-to-end training and evaluation
//! pipeline, and the CSV reports behind the command-line tool.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analytic_model::{
    ladder_throughput, mismatch_loss, optimal_ladder, optimize_tau, quantization_step,
    BackoffLadder, NetworkConfig, NetworkParams,
};
use crate::icl_transformer::{
    attention, loss, predict, round_threshold, train, Batch, LabelScaling, ModelFile, TrainConfig,
    TrainTrace, TransformerParams,
};
use crate::mac_simulator::{run, SimConfig, SimResult};
use crate::prompt_pipeline::{
    build_training_prompts, corrupt_thresholds, embed, fit_scaler, generate_dataset,
    group_by_density, EmbeddedPrompt, FeatureEncoding, LabeledExample, Prompt, PromptBuilder,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub network: NetworkConfig,
    pub train_densities: Vec<usize>,
    pub test_densities: Vec<usize>,
    pub k_max: usize,
    pub cap: u64,
    /// In-context examples per prompt.
    pub m: usize,
    /// Number of training densities.
    pub s: usize,
    /// Extra prompts per (density, query stage) with resampled context.
    pub resample_per_query: usize,
    pub encoding: FeatureEncoding,
    pub label_scaling: LabelScaling,
    pub jitter_pct: f64,
    pub step_size: f64,
    pub max_rounds: usize,
    pub stop_eps: f64,
    /// Query-stage attention mass regarded as converged.
    pub mass_threshold: f64,
    pub b_pct: Vec<f64>,
    pub n_est: usize,
    pub sim_horizon: u64,
    pub validate_densities: Vec<usize>,
    pub validate_seeds: u64,
    pub validate_horizon: u64,
    pub bench_densities: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            network: NetworkConfig::default(),
            train_densities: vec![2, 3, 4, 5, 6],
            test_densities: vec![100, 200, 300, 400, 500],
            k_max: 8,
            cap: 1 << 22,
            m: 9,
            s: 5,
            resample_per_query: 16,
            encoding: FeatureEncoding::StageOneHot,
            label_scaling: LabelScaling::default(),
            jitter_pct: 0.0,
            step_size: 0.05,
            max_rounds: 10_000,
            stop_eps: 2e-5,
            mass_threshold: 0.9,
            b_pct: vec![0.0, 20.0, 40.0, 60.0],
            n_est: 50,
            sim_horizon: 200_000,
            validate_densities: vec![2, 5, 10, 20],
            validate_seeds: 3,
            validate_horizon: 1_000_000,
            bench_densities: vec![100, 200, 300, 400, 500],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(s).context("malformed experiment configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading configuration {}", path.display()))?;
        Self::from_toml_str(&text)
    }

    pub fn params(&self) -> anyhow::Result<NetworkParams> {
        Ok(NetworkParams::from_config(&self.network)?)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            step_size: self.step_size,
            max_rounds: self.max_rounds,
            stop_eps: self.stop_eps,
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.params()?;
        ensure!(!self.train_densities.is_empty(), "train_densities is empty");
        ensure!(!self.test_densities.is_empty(), "test_densities is empty");
        let all = self
            .train_densities
            .iter()
            .chain(&self.test_densities)
            .chain(&self.bench_densities)
            .chain(&self.validate_densities);
        if let Some(n) = all.into_iter().find(|&&n| n < 2) {
            bail!("density {n} is below 2");
        }
        ensure!(self.n_est >= 2, "n_est must be at least 2");
        ensure!(self.k_max <= 40, "k_max {} is too large", self.k_max);
        ensure!(
            self.m == self.k_max + 1,
            "m = {} must equal k_max + 1 = {}",
            self.m,
            self.k_max + 1
        );
        ensure!(
            self.s == self.train_densities.len(),
            "s = {} must equal the number of training densities ({})",
            self.s,
            self.train_densities.len()
        );
        crate::analytic_model::max_beb_w0(self.k_max, self.cap)?;
        ensure!(
            self.mass_threshold > 0.0 && self.mass_threshold < 1.0,
            "mass_threshold must lie in (0, 1)"
        );
        if let Some(b) = self
            .b_pct
            .iter()
            .find(|b| !(b.is_finite() && (0.0..100.0).contains(*b)))
        {
            bail!("b_pct entry {b} outside [0, 100)");
        }
        ensure!(
            self.sim_horizon >= 1 && self.validate_horizon >= 1,
            "horizons must be positive"
        );
        self.train_config().validate()?;
        Ok(())
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Independent seed for a named sub-experiment.
pub fn sub_seed(master: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng.next_u64()
}

const STREAM_DATA: u64 = 1;
const STREAM_PROMPTS: u64 = 2;
const STREAM_EVAL: u64 = 1 << 32;
const STREAM_SIM: u64 = 2 << 32;
const STREAM_VALIDATE: u64 = 3 << 32;

/// Stream for `(density, b)` cells; `b` keyed by its value in hundredths.
fn cell_stream(base: u64, density: usize, b_pct: f64) -> u64 {
    base + ((density as u64) << 16) + (b_pct * 100.0).round() as u64
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub dataset: Vec<LabeledExample>,
    pub builder: PromptBuilder,
    pub prompts: Vec<Prompt>,
    pub batch: Batch,
    pub params: TransformerParams,
    pub trace: TrainTrace,
    /// Loss of `Q = 0` on the training batch.
    pub baseline_loss: f64,
    pub model: ModelFile,
}

/// Training data, prompt batch, and the Q = 0 baseline.
pub fn prepare_training(
    cfg: &ExperimentConfig,
) -> anyhow::Result<(Vec<LabeledExample>, PromptBuilder, Vec<Prompt>, Batch)> {
    let params = cfg.params()?;
    let dataset = generate_dataset(
        &cfg.train_densities,
        cfg.k_max,
        cfg.cap,
        &params,
        cfg.jitter_pct,
        sub_seed(cfg.seed, STREAM_DATA),
    )?;
    let scaler = fit_scaler(&dataset, cfg.encoding, cfg.k_max)?;
    let builder = PromptBuilder::new(scaler, cfg.encoding, cfg.k_max)?;
    let prompts = build_training_prompts(
        &dataset,
        &builder,
        cfg.resample_per_query,
        sub_seed(cfg.seed, STREAM_PROMPTS),
    )?;
    let embedded = prompts.iter().map(embed).collect::<Result<Vec<_>, _>>()?;
    let batch = Batch::new(embedded, cfg.label_scaling)?;
    Ok((dataset, builder, prompts, batch))
}

pub fn train_model(cfg: &ExperimentConfig) -> anyhow::Result<TrainedModel> {
    let (dataset, builder, prompts, batch) = prepare_training(cfg)?;
    let baseline_loss = loss(&TransformerParams::zeros(builder.scaler.dim()), &batch)?;
    let (params, trace) = train(&batch, &cfg.train_config())?;
    let model = ModelFile::new(
        &params,
        cfg.k_max,
        cfg.encoding,
        builder.scaler.clone(),
        cfg.label_scaling,
    );
    Ok(TrainedModel {
        dataset,
        builder,
        prompts,
        batch,
        params,
        trace,
        baseline_loss,
        model,
    })
}

/// Predicted window for every stage, each stage queried against the full
/// prompt of `examples`.
pub fn predict_ladder(
    params: &TransformerParams,
    builder: &PromptBuilder,
    examples: &[LabeledExample],
) -> anyhow::Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(examples.len());
    for e in examples {
        let p = embed(&builder.build(examples, e.stage)?)?;
        out.push((
            predict(params, &p)?,
            attention(params, &p)?.query_stage_mass,
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub seed: u64,
    pub config_hash: String,
    pub density: usize,
    pub stage: usize,
    pub target: u64,
    pub prediction: f64,
    pub rounded: u64,
    pub rel_error: f64,
    pub query_mass: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainDensityRow {
    pub seed: u64,
    pub config_hash: String,
    pub density: usize,
    pub u_star: f64,
    pub u_icl: f64,
    pub rel_loss: f64,
    pub optimal_ladder: String,
    pub icl_ladder: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub seed: u64,
    pub config_hash: String,
    pub step: usize,
    pub loss: f64,
    pub step_norm: f64,
}

/// Per-stage and per-density fidelity of a trained model on its own
/// training densities.
pub fn training_report(
    cfg: &ExperimentConfig,
    trained: &TrainedModel,
) -> anyhow::Result<(Vec<StageRow>, Vec<TrainDensityRow>)> {
    let params = cfg.params()?;
    let hash = cfg.hash();
    let mut stages = Vec::new();
    let mut densities = Vec::new();
    for (density, group) in group_by_density(&trained.dataset) {
        let preds = predict_ladder(&trained.params, &trained.builder, &group)?;
        let mut rounded = Vec::with_capacity(group.len());
        for (e, &(pred, mass)) in group.iter().zip(&preds) {
            let r = round_threshold(pred, cfg.cap);
            rounded.push(r);
            stages.push(StageRow {
                seed: cfg.seed,
                config_hash: hash.clone(),
                density,
                stage: e.stage,
                target: e.label,
                prediction: pred,
                rounded: r,
                rel_error: (r as f64 - e.label as f64).abs() / e.label as f64,
                query_mass: mass,
                converged: 1.0 - mass <= 1.0 - cfg.mass_threshold,
            });
        }
        let best = BackoffLadder::lenient(group.iter().map(|e| e.label).collect(), cfg.cap)?;
        let icl = BackoffLadder::lenient(rounded, cfg.cap)?;
        let u_star = ladder_throughput(&best, density, &params)?;
        let u_icl = ladder_throughput(&icl, density, &params)?;
        densities.push(TrainDensityRow {
            seed: cfg.seed,
            config_hash: hash.clone(),
            density,
            u_star,
            u_icl,
            rel_loss: (u_star - u_icl) / u_star,
            optimal_ladder: best.to_string(),
            icl_ladder: icl.to_string(),
        });
    }
    Ok((stages, densities))
}

pub fn trace_rows(cfg: &ExperimentConfig, trace: &TrainTrace) -> Vec<TraceRow> {
    let hash = cfg.hash();
    trace
        .losses
        .iter()
        .zip(&trace.step_norms)
        .enumerate()
        .map(|(i, (&loss, &step_norm))| TraceRow {
            seed: cfg.seed,
            config_hash: hash.clone(),
            step: i + 1,
            loss,
            step_norm,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveRow {
    pub seed: u64,
    pub config_hash: String,
    pub n_nodes: usize,
    #[serde(rename = "K")]
    pub k_max: usize,
    pub tau_star: Option<f64>,
    pub u_star: Option<f64>,
    #[serde(rename = "W_0")]
    pub w0: Option<u64>,
    pub tau_fit: Option<f64>,
    pub tau_residual: Option<f64>,
    pub u_fit: Option<f64>,
    pub clamped: Option<bool>,
    pub ladder: String,
    pub error: String,
}

pub fn cmd_solve(cfg: &ExperimentConfig) -> anyhow::Result<Vec<SolveRow>> {
    let params = cfg.params()?;
    let hash = cfg.hash();
    let mut densities: Vec<usize> = Vec::new();
    for &n in cfg.train_densities.iter().chain(&cfg.test_densities) {
        if !densities.contains(&n) {
            densities.push(n);
        }
    }
    Ok(densities
        .into_iter()
        .map(|n| {
            let mut row = SolveRow {
                seed: cfg.seed,
                config_hash: hash.clone(),
                n_nodes: n,
                k_max: cfg.k_max,
                tau_star: None,
                u_star: None,
                w0: None,
                tau_fit: None,
                tau_residual: None,
                u_fit: None,
                clamped: None,
                ladder: String::new(),
                error: String::new(),
            };
            let outcome = optimize_tau(n, &params).and_then(|opt| {
                row.tau_star = Some(opt.tau);
                row.u_star = Some(opt.throughput);
                let fit = crate::analytic_model::solve_ladder(opt.tau, n, cfg.k_max, cfg.cap)?;
                let u = ladder_throughput(&fit.ladder, n, &params)?;
                Ok((fit, u))
            });
            match outcome {
                Ok((fit, u)) => {
                    row.w0 = Some(fit.ladder.w0());
                    row.tau_fit = Some(fit.tau);
                    row.tau_residual = Some(fit.residual);
                    row.u_fit = Some(u);
                    row.clamped = Some(fit.clamped);
                    row.ladder = fit.ladder.to_string();
                }
                Err(e) => row.error = e.to_string(),
            }
            row
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub seed: u64,
    pub config_hash: String,
    pub density: usize,
    pub stage: usize,
    pub tp_us: f64,
    pub ts_us: f64,
    pub tc_us: f64,
    pub label: u64,
    pub corrupted: bool,
}

pub fn dataset_rows(cfg: &ExperimentConfig, dataset: &[LabeledExample]) -> Vec<DatasetRow> {
    let hash = cfg.hash();
    dataset
        .iter()
        .map(|e| DatasetRow {
            seed: cfg.seed,
            config_hash: hash.clone(),
            density: e.density,
            stage: e.stage,
            tp_us: e.tp_us,
            ts_us: e.ts_us,
            tc_us: e.tc_us,
            label: e.label,
            corrupted: e.corrupted,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub seed: u64,
    pub config_hash: String,
    pub density: usize,
    pub b_pct: f64,
    pub u_star: Option<f64>,
    pub u_icl: Option<f64>,
    pub u_icl_sim: Option<f64>,
    pub u_model_based: Option<f64>,
    pub min_query_mass: Option<f64>,
    pub optimal_ladder: String,
    pub icl_ladder: String,
    pub error: String,
}

/// Compares ICL ladders built from (possibly corrupted) prompts against the
/// optimum and against the ladder tuned for `n_est`.
pub fn cmd_eval(cfg: &ExperimentConfig, model: &ModelFile) -> anyhow::Result<Vec<EvalRow>> {
    let params = cfg.params()?;
    let hash = cfg.hash();
    let q = model.params()?;
    ensure!(
        model.k_max == cfg.k_max && model.encoding == cfg.encoding,
        "model was trained for K = {} with {:?} features",
        model.k_max,
        model.encoding
    );
    let builder = PromptBuilder::new(model.scaler.clone(), model.encoding, model.k_max)?;
    let benchmark = optimal_ladder(cfg.n_est, cfg.k_max, cfg.cap, &params)?.ladder;
    let mut rows = Vec::new();
    for &n in &cfg.test_densities {
        for &b in &cfg.b_pct {
            let mut row = EvalRow {
                seed: cfg.seed,
                config_hash: hash.clone(),
                density: n,
                b_pct: b,
                u_star: None,
                u_icl: None,
                u_icl_sim: None,
                u_model_based: None,
                min_query_mass: None,
                optimal_ladder: String::new(),
                icl_ladder: String::new(),
                error: String::new(),
            };
            if let Err(e) = eval_cell(cfg, &params, &q, &builder, &benchmark, n, b, &mut row) {
                row.error = format!("{e:#}");
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

#[allow(clippy::too_many_arguments)]
fn eval_cell(
    cfg: &ExperimentConfig,
    params: &NetworkParams,
    q: &TransformerParams,
    builder: &PromptBuilder,
    benchmark: &BackoffLadder,
    n: usize,
    b: f64,
    row: &mut EvalRow,
) -> anyhow::Result<()> {
    let clean = generate_dataset(
        &[n],
        cfg.k_max,
        cfg.cap,
        params,
        cfg.jitter_pct,
        sub_seed(cfg.seed, cell_stream(STREAM_EVAL, n, 0.0)),
    )?;
    let best = BackoffLadder::new(clean.iter().map(|e| e.label).collect(), cfg.cap)?;
    row.optimal_ladder = best.to_string();
    row.u_star = Some(ladder_throughput(&best, n, params)?);
    row.u_model_based = Some(ladder_throughput(benchmark, n, params)?);

    let prompt = corrupt_thresholds(
        &clean,
        b,
        cfg.cap,
        sub_seed(cfg.seed, cell_stream(STREAM_EVAL, n, b)),
    )?;
    let preds = predict_ladder(q, builder, &prompt)?;
    let icl = BackoffLadder::lenient(
        preds
            .iter()
            .map(|(p, _)| round_threshold(*p, cfg.cap))
            .collect(),
        cfg.cap,
    )?;
    row.icl_ladder = icl.to_string();
    row.min_query_mass = Some(preds.iter().map(|(_, m)| *m).fold(f64::INFINITY, f64::min));
    row.u_icl = Some(ladder_throughput(&icl, n, params)?);
    let sim = run(&SimConfig::new(
        n,
        icl,
        *params,
        cfg.sim_horizon,
        sub_seed(cfg.seed, cell_stream(STREAM_SIM, n, b)),
    )?)?;
    row.u_icl_sim = Some(sim.throughput);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidateRow {
    pub seed: u64,
    pub n_nodes: usize,
    #[serde(rename = "K")]
    pub k_max: usize,
    #[serde(rename = "W_0")]
    pub w0: u64,
    pub throughput: f64,
    pub tau_emp: f64,
    pub p_emp: f64,
    pub successes: u64,
    pub collisions: u64,
    pub config_hash: String,
    pub u_model: f64,
    pub tau_model: f64,
    pub rel_dev: f64,
}

/// Simulator against the analytic model on optimal ladders, several seeds
/// per density. Rows carry the simulator seed.
pub fn cmd_validate(cfg: &ExperimentConfig) -> anyhow::Result<Vec<ValidateRow>> {
    let params = cfg.params()?;
    let hash = cfg.hash();
    let mut rows = Vec::new();
    for &n in &cfg.validate_densities {
        let fit = optimal_ladder(n, cfg.k_max, cfg.cap, &params)?;
        let fp = crate::analytic_model::solve_tau(&fit.ladder, n)?;
        let u_model = crate::analytic_model::throughput(fp.tau, n, &params)?;
        for rep in 0..cfg.validate_seeds {
            let seed = sub_seed(cfg.seed, STREAM_VALIDATE + ((n as u64) << 16) + rep);
            let r: SimResult = run(&SimConfig::new(
                n,
                fit.ladder.clone(),
                params,
                cfg.validate_horizon,
                seed,
            )?)?;
            rows.push(ValidateRow {
                seed: r.seed,
                n_nodes: r.n_nodes,
                k_max: r.k_max,
                w0: r.w0,
                throughput: r.throughput,
                tau_emp: r.tx_attempt_rate,
                p_emp: r.collision_rate,
                successes: r.successes,
                collisions: r.collisions,
                config_hash: hash.clone(),
                u_model,
                tau_model: fp.tau,
                rel_dev: (r.throughput - u_model).abs() / u_model,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub seed: u64,
    pub config_hash: String,
    pub n_true: usize,
    pub n_est: usize,
    pub mismatch_loss: f64,
    pub quantization_step: f64,
    /// Loss did not fall below the previous density's by more than one
    /// quantization step.
    pub trend_ok: bool,
}

pub fn cmd_bench(cfg: &ExperimentConfig) -> anyhow::Result<Vec<BenchRow>> {
    let params = cfg.params()?;
    let hash = cfg.hash();
    let mut rows: Vec<BenchRow> = Vec::new();
    for &n in &cfg.bench_densities {
        let loss = mismatch_loss(n, cfg.n_est, cfg.k_max, cfg.cap, &params)?;
        let step = quantization_step(n, cfg.k_max, cfg.cap, &params)?;
        let trend_ok = rows
            .last()
            .map_or(true, |prev| loss >= prev.mismatch_loss - step);
        rows.push(BenchRow {
            seed: cfg.seed,
            config_hash: hash.clone(),
            n_true: n,
            n_est: cfg.n_est,
            mismatch_loss: loss,
            quantization_step: step,
            trend_ok,
        });
    }
    Ok(rows)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Solve,
    Datagen,
    Train,
    Eval,
    Validate,
    Bench,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    schema_version: u32,
    command: Command,
    config_hash: String,
    outputs: &'a [String],
    config: &'a ExperimentConfig,
}

/// Runs one command, writing its CSV files and a `run.json` record into
/// `out`. Returns the paths written.
pub fn execute(
    command: Command,
    cfg: &ExperimentConfig,
    out: &Path,
    model_path: Option<&Path>,
) -> anyhow::Result<Vec<PathBuf>> {
    cfg.validate()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut written = Vec::new();
    let mut emit = |name: &str, f: &dyn Fn(&Path) -> anyhow::Result<()>| -> anyhow::Result<()> {
        let p = out.join(name);
        f(&p)?;
        written.push(p);
        Ok(())
    };
    match command {
        Command::Solve => {
            let rows = cmd_solve(cfg)?;
            emit("solve.csv", &|p| write_csv(p, &rows))?;
        }
        Command::Datagen => {
            let (dataset, _, prompts, _) = prepare_training(cfg)?;
            emit("dataset.csv", &|p| {
                write_csv(p, &dataset_rows(cfg, &dataset))
            })?;
            emit("prompts.json", &|p| {
                Ok(fs::write(p, serde_json::to_string_pretty(&prompts)?)?)
            })?;
        }
        Command::Train => {
            let (dataset, builder, prompts, batch) = prepare_training(cfg)?;
            let baseline = loss(&TransformerParams::zeros(builder.scaler.dim()), &batch)?;
            let (params, trace) = match train(&batch, &cfg.train_config()) {
                Ok(r) => r,
                Err(crate::icl_transformer::TransformerError::Diverged {
                    step,
                    reason,
                    trace,
                }) => {
                    let rows = trace_rows(cfg, &trace);
                    emit("trace.csv", &|p| write_csv(p, &rows))?;
                    bail!("training diverged at step {step}: {reason}");
                }
                Err(e) => return Err(e.into()),
            };
            let model = ModelFile::new(
                &params,
                cfg.k_max,
                cfg.encoding,
                builder.scaler.clone(),
                cfg.label_scaling,
            );
            let trained = TrainedModel {
                dataset,
                builder,
                prompts,
                batch,
                params,
                trace,
                baseline_loss: baseline,
                model,
            };
            let (stages, densities) = training_report(cfg, &trained)?;
            emit("model.json", &|p| {
                Ok(fs::write(p, trained.model.to_json())?)
            })?;
            emit("trace.csv", &|p| {
                write_csv(p, &trace_rows(cfg, &trained.trace))
            })?;
            emit("train_stages.csv", &|p| write_csv(p, &stages))?;
            emit("train_densities.csv", &|p| write_csv(p, &densities))?;
        }
        Command::Eval => {
            let model = match model_path {
                Some(path) => ModelFile::from_json(
                    &fs::read_to_string(path)
                        .with_context(|| format!("reading {}", path.display()))?,
                )?,
                None => train_model(cfg)?.model,
            };
            let rows = cmd_eval(cfg, &model)?;
            emit("eval.csv", &|p| write_csv(p, &rows))?;
        }
        Command::Validate => {
            let rows = cmd_validate(cfg)?;
            emit("validate.csv", &|p| write_csv(p, &rows))?;
        }
        Command::Bench => {
            let rows = cmd_bench(cfg)?;
            emit("bench.csv", &|p| write_csv(p, &rows))?;
        }
    }
    let names: Vec<String> = written
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    let record = RunRecord {
        schema_version: SCHEMA_VERSION,
        command,
        config_hash: cfg.hash(),
        outputs: &names,
        config: cfg,
    };
    let run_path = out.join("run.json");
    fs::write(&run_path, serde_json::to_string_pretty(&record)?)?;
    written.push(run_path);
    Ok(written)
}

/// Canonical prompts of the training set, one per (density, query stage).
pub fn canonical_prompts(trained: &TrainedModel) -> anyhow::Result<Vec<EmbeddedPrompt>> {
    let mut out = Vec::new();
    for (_, group) in group_by_density(&trained.dataset) {
        for e in &group {
            out.push(embed(&trained.builder.build(&group, e.stage)?)?);
        }
    }
    Ok(out)
}
