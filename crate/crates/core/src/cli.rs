//! The `helix` command line: generate, corrupt, train, impute, evaluate,
//! analyze, and ablate subcommands sharing one working directory.
//!
//! A pipeline lives in the output directory (`--out`, default `helix_out`):
//! `generate` writes `data.csv` and `coords.csv`, `corrupt` derives
//! `corrupted.csv` plus `eval_mask.csv`, `train` produces `model.ckpt` and
//! `history.csv`, `impute` writes `imputed_<method>.csv`, and `evaluate`,
//! `analyze`, and `ablate` emit report CSVs beside them. Evaluation metrics
//! are computed on the z-scored scale fitted to the training split.
//!
//! Exit codes: 0 success, 1 usage, 2 data or configuration problems,
//! 3 numeric failures.

use crate::analysis::{
    attention_structure, correlation_bin_curve, embedding_structure, feature_max_correlation,
    gap_length_curve, layer_feature_attention, metrics, EvalReport,
};
use crate::baselines::{impute_baseline, BaselineKind, FillStats};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
use crate::config::{load_config, ConfigError, RunConfig};
use crate::data::{
    load_coords, load_dataset, make_windows, normalize_apply, normalize_fit, normalize_inverse,
    save_coords, save_dataset, split_plan, window_range, DataError, Dataset, NormStats, SplitPlan,
};
use crate::encoder::AttentionRecord;
use crate::missingness::{corrupt, synth_spatial, CorruptionError, Pattern};
use crate::model::{HelixModel, Variant};
use crate::rng::{stream, StreamKind};
use crate::tape::{Mode, Tape};
use crate::tensor::{Tensor, TensorError};
use crate::training::{fit, impute, FitResult, TrainError, WindowSet};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// What fills the gaps: the trained model or one of the naive baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Helix,
    Baseline(BaselineKind),
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Helix => "helix",
            Method::Baseline(kind) => kind.name(),
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "helix" {
            return Ok(Method::Helix);
        }
        s.parse::<BaselineKind>()
            .map(Method::Baseline)
            .map_err(|_| format!("unknown method '{}', expected helix, mean, median, locf, or linear", s))
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let numeric = matches!(
            &e,
            TrainError::NonFiniteLoss { .. } | TrainError::Tensor(TensorError::NonFinite { .. })
        );
        if numeric {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

impl From<CorruptionError> for CliError {
    fn from(e: CorruptionError) -> Self {
        let numeric = matches!(
            &e,
            CorruptionError::NotPositiveDefinite { .. }
                | CorruptionError::Tensor(TensorError::NonFinite { .. })
        );
        if numeric {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse()
}

fn parse_pattern(s: &str) -> Result<Pattern, String> {
    s.parse()
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse()
}

#[derive(Parser, Debug)]
#[command(
    name = "helix",
    version,
    about = "Attention-based multivariate time-series imputation",
    disable_help_subcommand = true
)]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Model variant: full, no_featid, no_fusion, no_hybrid, learnable_pe, gated_fusion.
    #[arg(long, global = true, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Corruption pattern: point, block, or subseq.
    #[arg(long, global = true, value_parser = parse_pattern)]
    pattern: Option<Pattern>,
    /// Corruption rate in (0, 1).
    #[arg(long, global = true)]
    rate: Option<f64>,
    /// Imputation method: helix, mean, median, locf, or linear.
    #[arg(long, global = true, value_parser = parse_method)]
    method: Option<Method>,
    /// Working directory for pipeline files.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic spatially-correlated dataset
    Generate,
    /// Hide observed entries under a missingness pattern
    Corrupt,
    /// Train an imputation model on the corrupted series
    Train,
    /// Fill missing entries with the model or a baseline
    Impute,
    /// Score an imputation against the hidden ground truth
    Evaluate,
    /// Emit structure-discovery and error-curve reports
    Analyze,
    /// Train and score every model variant
    Ablate,
}

/// Resolved settings plus the file layout of the working directory.
struct Ctx {
    config: RunConfig,
    method: Method,
    out: PathBuf,
}

impl Ctx {
    fn from_cli(cli: &Cli) -> Result<Ctx, CliError> {
        let mut config = match &cli.config {
            Some(path) => load_config(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = cli.seed {
            config.seed = seed;
        }
        if let Some(variant) = cli.variant {
            config.model.variant = variant;
        }
        if let Some(pattern) = cli.pattern {
            config.corruption.pattern = pattern;
        }
        if let Some(rate) = cli.rate {
            config.corruption.rate = rate;
        }
        if let Some(out) = &cli.out {
            config.paths.out = Some(out.clone());
        }
        config.validate()?;
        let out = config.paths.out.clone().unwrap_or_else(|| PathBuf::from("helix_out"));
        Ok(Ctx { config, method: cli.method.unwrap_or(Method::Helix), out })
    }

    fn data_csv(&self) -> PathBuf {
        self.config.paths.data.clone().unwrap_or_else(|| self.out.join("data.csv"))
    }

    fn coords_csv(&self) -> PathBuf {
        self.config.paths.coords.clone().unwrap_or_else(|| self.out.join("coords.csv"))
    }

    fn corrupted_csv(&self) -> PathBuf {
        self.out.join("corrupted.csv")
    }

    fn eval_mask_csv(&self) -> PathBuf {
        self.out.join("eval_mask.csv")
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.out.join("model.ckpt")
    }

    fn history_csv(&self) -> PathBuf {
        self.out.join("history.csv")
    }

    fn imputed_csv(&self) -> PathBuf {
        self.out.join(format!("imputed_{}.csv", self.method.name()))
    }

    fn metrics_csv(&self) -> PathBuf {
        self.out.join(format!("metrics_{}.csv", self.method.name()))
    }

    fn ensure_out(&self) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.out)
            .map_err(|e| CliError::Data(format!("cannot create {}: {}", self.out.display(), e)))
    }
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let ctx = Ctx::from_cli(cli)?;
    match cli.command {
        Command::Generate => cmd_generate(&ctx),
        Command::Corrupt => cmd_corrupt(&ctx),
        Command::Train => cmd_train(&ctx),
        Command::Impute => cmd_impute(&ctx),
        Command::Evaluate => cmd_evaluate(&ctx),
        Command::Analyze => cmd_analyze(&ctx),
        Command::Ablate => cmd_ablate(&ctx),
    }
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<(), CliError> {
    let mut text = String::from(header);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    std::fs::write(path, text)
        .map_err(|e| CliError::Data(format!("cannot write {}: {}", path.display(), e)))
}

fn cmd_generate(ctx: &Ctx) -> Result<(), CliError> {
    ctx.ensure_out()?;
    let spec = &ctx.config.synthetic;
    let mut rng = stream(ctx.config.seed, StreamKind::Data, 0);
    let synth = synth_spatial(spec, &mut rng)?;
    let data = Dataset::fully_observed(synth.values)?;
    save_dataset(&ctx.data_csv(), &data)?;
    save_coords(&ctx.coords_csv(), &synth.coords)?;
    println!(
        "generated {} steps x {} stations (length scale {}, noise {}) -> {}",
        data.t_len(),
        data.n_features(),
        spec.length_scale,
        spec.noise_std,
        ctx.data_csv().display()
    );
    Ok(())
}

fn cmd_corrupt(ctx: &Ctx) -> Result<(), CliError> {
    ctx.ensure_out()?;
    let data = load_dataset(&ctx.data_csv())?;
    let c = &ctx.config.corruption;
    let mut rng = stream(ctx.config.seed, StreamKind::Masking, 0);
    let out = corrupt(
        &data.values,
        &data.mask,
        c.pattern,
        c.rate,
        c.block_len,
        c.block_width,
        ctx.config.t_window,
        &mut rng,
    )?;
    save_dataset(
        &ctx.corrupted_csv(),
        &Dataset { times: data.times.clone(), values: out.values, mask: out.mask },
    )?;
    save_dataset(
        &ctx.eval_mask_csv(),
        &Dataset {
            times: data.times,
            mask: Tensor::filled(out.eval_mask.shape().to_vec(), 1.0),
            values: out.eval_mask,
        },
    )?;
    println!(
        "{} corruption at target rate {}: hid {:.4} of observed entries -> {}",
        c.pattern,
        c.rate,
        out.realized_rate,
        ctx.corrupted_csv().display()
    );
    Ok(())
}

/// The corrupted series windowed, normalized, and split for training.
struct Prepared {
    plan: SplitPlan,
    stats: NormStats,
    /// All windows, z-scored and zero-filled where hidden: `[N,T,F]`.
    values: Tensor,
    mask: Tensor,
}

impl Prepared {
    fn new(data: &Dataset, t_window: usize) -> Result<Prepared, CliError> {
        let plan = split_plan(data.t_len(), t_window)?;
        if plan.n_train == 0 || plan.n_val == 0 || plan.n_test == 0 {
            return Err(CliError::Data(format!(
                "split of {} windows gives train/val/test = {}/{}/{}; every split needs at least one window (shorten t_window or provide more data)",
                plan.n_windows, plan.n_train, plan.n_val, plan.n_test
            )));
        }
        let f = data.n_features();
        let train_rows = plan.n_train * t_window;
        let train_values =
            Tensor::new(vec![train_rows, f], data.values.data()[..train_rows * f].to_vec())?;
        let train_mask =
            Tensor::new(vec![train_rows, f], data.mask.data()[..train_rows * f].to_vec())?;
        let stats = normalize_fit(&train_values, &train_mask)?;
        let normalized = normalize_apply(&data.values, &stats)?;
        // hidden entries are zero-filled on the normalized scale
        let masked: Vec<f64> = normalized
            .data()
            .iter()
            .zip(data.mask.data())
            .map(|(&v, &m)| v * m)
            .collect();
        let masked = Tensor::new(normalized.shape().to_vec(), masked)?;
        Ok(Prepared {
            values: make_windows(&masked, &plan)?,
            mask: make_windows(&data.mask, &plan)?,
            plan,
            stats,
        })
    }

    fn set(&self, range: std::ops::Range<usize>) -> Result<WindowSet, CliError> {
        Ok(WindowSet::new(
            window_range(&self.values, range.clone())?,
            window_range(&self.mask, range)?,
        )?)
    }

    fn train_set(&self) -> Result<WindowSet, CliError> {
        self.set(self.plan.train_range())
    }

    fn val_set(&self) -> Result<WindowSet, CliError> {
        self.set(self.plan.val_range())
    }

    fn test_set(&self) -> Result<WindowSet, CliError> {
        self.set(self.plan.test_range())
    }
}

fn train_once(
    config: &RunConfig,
    prepared: &Prepared,
    n_features: usize,
) -> Result<FitResult, CliError> {
    let mut model_config = config.model.clone();
    model_config.n_features = n_features;
    model_config.validate().map_err(CliError::from)?;
    if config.t_window > model_config.t_max && model_config.has_learnable_pe() {
        return Err(CliError::Data(format!(
            "t_window {} exceeds the learnable positional table capacity {}",
            config.t_window, model_config.t_max
        )));
    }
    let model = HelixModel::init(model_config, config.seed)?;
    let result = fit(model, &prepared.train_set()?, &prepared.val_set()?, &config.train_with_seed())?;
    Ok(result)
}

fn cmd_train(ctx: &Ctx) -> Result<(), CliError> {
    ctx.ensure_out()?;
    let data = load_dataset(&ctx.corrupted_csv())?;
    let prepared = Prepared::new(&data, ctx.config.t_window)?;
    let result = train_once(&ctx.config, &prepared, data.n_features())?;
    for warning in &result.warnings {
        eprintln!("warning: {}", warning);
    }
    let mut saved_config = ctx.config.clone();
    saved_config.model = result.model.config.clone();
    save_checkpoint(&ctx.checkpoint_path(), &saved_config, &result.model, Some(&prepared.stats))?;
    let rows: Vec<String> = result
        .history
        .iter()
        .map(|h| format!("{},{},{}", h.epoch, h.train_loss, h.val_mae))
        .collect();
    write_csv(&ctx.history_csv(), "epoch,train_loss,val_mae", &rows)?;
    let best = result
        .history
        .iter()
        .min_by(|a, b| a.val_mae.total_cmp(&b.val_mae))
        .map(|h| (h.epoch, h.val_mae));
    match best {
        Some((epoch, mae)) => println!(
            "trained {} ({} epochs run, best validation MAE {:.6} at epoch {}) -> {}",
            result.model.config.variant,
            result.history.len(),
            mae,
            epoch,
            ctx.checkpoint_path().display()
        ),
        None => println!("trained {} (no epochs run)", result.model.config.variant),
    }
    Ok(())
}

/// Imputes the full series with the checkpointed model. Windows cover the
/// longest prefix; trailing rows keep observed values and fall back to the
/// feature mean where hidden.
pub fn helix_impute_series(ckpt: &Checkpoint, data: &Dataset) -> Result<Tensor, CliError> {
    let f = data.n_features();
    if f != ckpt.config.model.n_features {
        return Err(CliError::Data(format!(
            "checkpoint was trained on {} features, data has {}",
            ckpt.config.model.n_features, f
        )));
    }
    let stats = ckpt
        .norm
        .as_ref()
        .ok_or_else(|| CliError::Data("checkpoint carries no normalization statistics".into()))?;
    let t_window = ckpt.config.t_window;
    let plan = split_plan(data.t_len(), t_window)?;
    let normalized = normalize_apply(&data.values, stats)?;
    let masked: Vec<f64> = normalized
        .data()
        .iter()
        .zip(data.mask.data())
        .map(|(&v, &m)| v * m)
        .collect();
    let masked = Tensor::new(normalized.shape().to_vec(), masked)?;
    let all_range = 0..plan.n_windows;
    let set = WindowSet::new(
        window_range(&make_windows(&masked, &plan)?, all_range.clone())?,
        window_range(&make_windows(&data.mask, &plan)?, all_range)?,
    )?;
    let imputed = impute(&ckpt.model, &set, ckpt.config.train.batch_size)?;
    // stitch windows back, then extend over the trailing partial window
    let covered = plan.n_windows * t_window;
    // tail rows stay 0 on the normalized scale, i.e. the feature mean
    let mut out = vec![0.0; data.values.numel()];
    out[..covered * f].copy_from_slice(&imputed.data()[..covered * f]);
    let restored = normalize_inverse(&Tensor::new(vec![data.t_len(), f], out)?, stats)?;
    // observed entries pass through bit-exactly; only fills come from the model
    let mut merged = restored.data().to_vec();
    for (i, &m) in data.mask.data().iter().enumerate() {
        if m == 1.0 {
            merged[i] = data.values.data()[i];
        }
    }
    Ok(Tensor::new(vec![data.t_len(), f], merged)?)
}

fn baseline_impute_series(
    kind: BaselineKind,
    data: &Dataset,
    t_window: usize,
) -> Result<Tensor, CliError> {
    // mean/median statistics come from the training split only
    let stats = match kind {
        BaselineKind::Mean | BaselineKind::Median => {
            let plan = split_plan(data.t_len(), t_window)?;
            let f = data.n_features();
            let rows = plan.n_train * t_window;
            let values = Tensor::new(vec![rows, f], data.values.data()[..rows * f].to_vec())?;
            let mask = Tensor::new(vec![rows, f], data.mask.data()[..rows * f].to_vec())?;
            Some(FillStats::fit(&values, &mask)?)
        }
        _ => None,
    };
    if let Some(stats) = &stats {
        for &c in &stats.empty_features {
            eprintln!("warning: feature {} has no training observations; filling with 0", c);
        }
    }
    Ok(impute_baseline(kind, &data.values, &data.mask, stats.as_ref())?)
}

fn cmd_impute(ctx: &Ctx) -> Result<(), CliError> {
    ctx.ensure_out()?;
    let data = load_dataset(&ctx.corrupted_csv())?;
    let filled = match ctx.method {
        Method::Helix => {
            let ckpt = load_checkpoint(&ctx.checkpoint_path())?;
            helix_impute_series(&ckpt, &data)?
        }
        Method::Baseline(kind) => baseline_impute_series(kind, &data, ctx.config.t_window)?,
    };
    save_dataset(
        &ctx.imputed_csv(),
        &Dataset {
            times: data.times,
            mask: Tensor::filled(filled.shape().to_vec(), 1.0),
            values: filled,
        },
    )?;
    println!("imputed with {} -> {}", ctx.method.name(), ctx.imputed_csv().display());
    Ok(())
}

/// Loads truth/imputed/eval-mask files and checks they line up.
fn load_eval_inputs(ctx: &Ctx) -> Result<(Dataset, Dataset, Dataset, Dataset), CliError> {
    let truth = load_dataset(&ctx.data_csv())?;
    let corrupted = load_dataset(&ctx.corrupted_csv())?;
    let eval_mask = load_dataset(&ctx.eval_mask_csv())?;
    let imputed = load_dataset(&ctx.imputed_csv())?;
    for (name, d) in [("corrupted", &corrupted), ("eval mask", &eval_mask), ("imputed", &imputed)] {
        if d.values.shape() != truth.values.shape() {
            return Err(CliError::Data(format!(
                "{} file shape {:?} does not match ground truth {:?}",
                name,
                d.values.shape(),
                truth.values.shape()
            )));
        }
    }
    if eval_mask.values.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(CliError::Data("evaluation mask entries must be 0 or 1".into()));
    }
    Ok((truth, corrupted, eval_mask, imputed))
}

/// Test-split rows of a full-length series, z-scored: `[n_test*T, F]`.
fn test_rows(series: &Tensor, plan: &SplitPlan, stats: Option<&NormStats>) -> Result<Tensor, CliError> {
    let f = series.shape()[1];
    let start = (plan.n_train + plan.n_val) * plan.t_window;
    let end = plan.n_windows * plan.t_window;
    let rows = Tensor::new(vec![end - start, f], series.data()[start * f..end * f].to_vec())?;
    Ok(match stats {
        Some(stats) => normalize_apply(&rows, stats)?,
        None => rows,
    })
}

fn cmd_evaluate(ctx: &Ctx) -> Result<(), CliError> {
    ctx.ensure_out()?;
    let (truth, corrupted, eval_mask, imputed) = load_eval_inputs(ctx)?;
    let prepared = Prepared::new(&corrupted, ctx.config.t_window)?;
    let truth_test = test_rows(&truth.values, &prepared.plan, Some(&prepared.stats))?;
    let imputed_test = test_rows(&imputed.values, &prepared.plan, Some(&prepared.stats))?;
    let mask_test = test_rows(&eval_mask.values, &prepared.plan, None)?;
    if !mask_test.data().iter().any(|&v| v == 1.0) {
        return Err(CliError::Data("no evaluation targets fall in the test split".into()));
    }
    let report = metrics(&truth_test, &imputed_test, &mask_test)?;
    print_report(ctx.method.name(), &report);
    let c = &ctx.config.corruption;
    write_csv(
        &ctx.metrics_csv(),
        "method,pattern,rate,n,mae,mse,mre",
        &[format!(
            "{},{},{},{},{},{},{}",
            ctx.method.name(),
            c.pattern,
            c.rate,
            report.n,
            report.mae,
            report.mse,
            report.mre
        )],
    )?;
    Ok(())
}

fn print_report(label: &str, report: &EvalReport) {
    if report.mre_defined {
        println!(
            "{}: MAE {:.6}  MSE {:.6}  MRE {:.6}  ({} entries)",
            label, report.mae, report.mse, report.mre, report.n
        );
    } else {
        println!(
            "{}: MAE {:.6}  MSE {:.6}  MRE undefined (truth sums to zero)  ({} entries)",
            label, report.mae, report.mse, report.n
        );
    }
}

fn record_test_attention(
    ckpt: &Checkpoint,
    test: &WindowSet,
) -> Result<Vec<AttentionRecord>, CliError> {
    let mut records = Vec::new();
    for (start, len) in test.batch_ranges(ckpt.config.train.batch_size) {
        let batch = test.slice(start, len)?;
        let mut tape = Tape::new();
        let mut rng = stream(0, StreamKind::Dropout, 0);
        let out = ckpt.model.forward(
            &mut tape,
            batch.values(),
            batch.mask(),
            Mode::Eval,
            &mut rng,
            true,
        )?;
        records.push(out.attention.expect("recording was requested"));
    }
    Ok(records)
}

fn cmd_analyze(ctx: &Ctx) -> Result<(), CliError> {
    ctx.ensure_out()?;
    let ckpt = load_checkpoint(&ctx.checkpoint_path())?;
    let (truth, corrupted, eval_mask, _) = {
        // the imputed file is optional for analyze; gaps use the model directly
        let truth = load_dataset(&ctx.data_csv())?;
        let corrupted = load_dataset(&ctx.corrupted_csv())?;
        let eval_mask = load_dataset(&ctx.eval_mask_csv())?;
        (truth, corrupted, eval_mask, ())
    };
    let coords = load_coords(&ctx.coords_csv())?;
    let f = corrupted.n_features();
    if coords.len() != f {
        return Err(CliError::Data(format!(
            "coordinates cover {} stations, data has {}",
            coords.len(),
            f
        )));
    }
    let mut summary = String::new();

    // identity embeddings vs geography
    match &ckpt.model.feat_id {
        Some(table) => {
            let report = embedding_structure(table, &coords)?;
            let rows: Vec<String> = (0..f)
                .map(|i| {
                    (0..f)
                        .map(|j| report.similarity.at(&[i, j]).to_string())
                        .collect::<Vec<_>>()
                        .join(",")
                })
                .collect();
            write_csv(&ctx.out.join("embedding_similarity.csv"), &csv_header(f), &rows)?;
            if report.pearson.degenerate {
                writeln!(summary, "embedding similarity vs distance: degenerate (no variance)").unwrap();
            } else {
                writeln!(
                    summary,
                    "embedding similarity vs distance: r = {:.4}, p = {:.3e} over {} pairs",
                    report.pearson.r, report.pearson.p, report.pearson.n
                )
                .unwrap();
            }
        }
        None => {
            writeln!(summary, "embedding similarity: skipped (variant has no identity table)").unwrap();
        }
    }

    // feature attention vs proximity, per layer
    let t_window = ckpt.config.t_window;
    let prepared = Prepared::new(&corrupted, t_window)?;
    let test = prepared.test_set()?;
    let records = record_test_attention(&ckpt, &test)?;
    let per_layer = layer_feature_attention(&records)?;
    let layer_rs = attention_structure(&per_layer, &coords)?;
    {
        let rows: Vec<String> = layer_rs
            .iter()
            .enumerate()
            .map(|(l, p)| {
                if p.degenerate {
                    format!("{},nan,nan,{}", l, p.n)
                } else {
                    format!("{},{},{},{}", l, p.r, p.p, p.n)
                }
            })
            .collect();
        write_csv(&ctx.out.join("attention_layers.csv"), "layer,r,p,n_pairs", &rows)?;
        let trend: Vec<String> = layer_rs
            .iter()
            .map(|p| if p.degenerate { "degenerate".into() } else { format!("{:.4}", p.r) })
            .collect();
        writeln!(summary, "attention-proximity r by layer: [{}]", trend.join(", ")).unwrap();
    }

    // error curves on the test split, z-scored like evaluate
    let truth_norm = normalize_apply(&truth.values, &prepared.stats)?;
    let truth_windows = make_windows(&truth_norm, &prepared.plan)?;
    let truth_test = window_range(&truth_windows, prepared.plan.test_range())?;
    let mask_windows = make_windows(&eval_mask.values, &prepared.plan)?;
    let mask_test = window_range(&mask_windows, prepared.plan.test_range())?;
    let model_test = impute(&ckpt.model, &test, ckpt.config.train.batch_size)?;

    let gaps = gap_length_curve(&truth_test, &model_test, &mask_test)?;
    let rows: Vec<String> = gaps
        .iter()
        .map(|b| format!("{},{},{}", b.label, b.n, b.mae))
        .collect();
    write_csv(&ctx.out.join("gap_curve.csv"), "gap_length,n,mae", &rows)?;
    let gap_text: Vec<String> = gaps
        .iter()
        .map(|b| {
            if b.n == 0 {
                format!("{}: empty", b.label)
            } else {
                format!("{}: {:.4} ({})", b.label, b.mae, b.n)
            }
        })
        .collect();
    writeln!(summary, "MAE by gap length: {}", gap_text.join("  ")).unwrap();

    // model vs linear baseline across correlation terciles
    let linear_raw = baseline_impute_series(BaselineKind::Linear, &corrupted, t_window)?;
    let linear_norm = normalize_apply(&linear_raw, &prepared.stats)?;
    let linear_test = window_range(&make_windows(&linear_norm, &prepared.plan)?, prepared.plan.test_range())?;
    let train_rows_n = prepared.plan.n_train * t_window;
    let train_values = Tensor::new(
        vec![train_rows_n, f],
        corrupted.values.data()[..train_rows_n * f].to_vec(),
    )?;
    let train_mask = Tensor::new(
        vec![train_rows_n, f],
        corrupted.mask.data()[..train_rows_n * f].to_vec(),
    )?;
    let max_corr = feature_max_correlation(&train_values, &train_mask)?;
    let bins = correlation_bin_curve(&truth_test, &model_test, &linear_test, &mask_test, &max_corr)?;
    let rows: Vec<String> = bins
        .iter()
        .map(|b| {
            format!(
                "{:.4},{:.4},{},{},{},{}",
                b.lo, b.hi, b.n, b.model_mae, b.baseline_mae, b.improvement
            )
        })
        .collect();
    write_csv(
        &ctx.out.join("correlation_bins.csv"),
        "corr_lo,corr_hi,n,model_mae,linear_mae,improvement",
        &rows,
    )?;
    for (i, b) in bins.iter().enumerate() {
        writeln!(
            summary,
            "correlation tercile {} (|r| {:.3}..{:.3}): model {:.4} vs linear {:.4} ({:+.1}%)",
            i + 1,
            b.lo,
            b.hi,
            b.model_mae,
            b.baseline_mae,
            100.0 * b.improvement
        )
        .unwrap();
    }

    std::fs::write(ctx.out.join("analysis.txt"), &summary)
        .map_err(|e| CliError::Data(format!("cannot write analysis summary: {}", e)))?;
    print!("{}", summary);
    Ok(())
}

fn csv_header(f: usize) -> String {
    (0..f).map(|c| format!("feat_{}", c)).collect::<Vec<_>>().join(",")
}

fn thread_budget() -> usize {
    std::env::var("HELIX_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

struct AblationRow {
    variant: Variant,
    n_params: usize,
    epochs_run: usize,
    best_val_mae: f64,
    report: EvalReport,
}

fn ablate_variant(
    config: &RunConfig,
    prepared: &Prepared,
    truth_test: &Tensor,
    mask_test: &Tensor,
    n_features: usize,
    variant: Variant,
) -> Result<AblationRow, CliError> {
    let mut config = config.clone();
    config.model.variant = variant;
    let result = train_once(&config, prepared, n_features)?;
    let model_test = impute(&result.model, &prepared.test_set()?, config.train.batch_size)?;
    let report = metrics(truth_test, &model_test, mask_test)?;
    let best_val_mae = result
        .history
        .iter()
        .map(|h| h.val_mae)
        .fold(f64::INFINITY, f64::min);
    Ok(AblationRow {
        variant,
        n_params: result.model.n_params(),
        epochs_run: result.history.len(),
        best_val_mae,
        report,
    })
}

fn cmd_ablate(ctx: &Ctx) -> Result<(), CliError> {
    ctx.ensure_out()?;
    let (truth, corrupted, eval_mask, _) = {
        let truth = load_dataset(&ctx.data_csv())?;
        let corrupted = load_dataset(&ctx.corrupted_csv())?;
        let eval_mask = load_dataset(&ctx.eval_mask_csv())?;
        (truth, corrupted, eval_mask, ())
    };
    let prepared = Prepared::new(&corrupted, ctx.config.t_window)?;
    let truth_norm = normalize_apply(&truth.values, &prepared.stats)?;
    let truth_test = window_range(&make_windows(&truth_norm, &prepared.plan)?, prepared.plan.test_range())?;
    let mask_test = window_range(
        &make_windows(&eval_mask.values, &prepared.plan)?,
        prepared.plan.test_range(),
    )?;
    let n_features = corrupted.n_features();

    let budget = thread_budget();
    let mut rows: Vec<(usize, Result<AblationRow, CliError>)> = Vec::new();
    for wave in Variant::ALL.chunks(budget.max(1)) {
        let mut wave_rows = std::thread::scope(|scope| {
            let handles: Vec<_> = wave
                .iter()
                .map(|&variant| {
                    let config = &ctx.config;
                    let prepared = &prepared;
                    let truth_test = &truth_test;
                    let mask_test = &mask_test;
                    scope.spawn(move || {
                        ablate_variant(config, prepared, truth_test, mask_test, n_features, variant)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("ablation thread panicked"))
                .collect::<Vec<_>>()
        });
        for row in wave_rows.drain(..) {
            rows.push((rows.len(), row));
        }
    }

    let mut csv_rows = Vec::new();
    println!(
        "{:<14} {:>8} {:>7} {:>10} {:>10} {:>10} {:>10}",
        "variant", "params", "epochs", "val_mae", "test_mae", "test_mse", "test_mre"
    );
    for (_, row) in rows {
        let row = row?;
        println!(
            "{:<14} {:>8} {:>7} {:>10.6} {:>10.6} {:>10.6} {:>10.6}",
            row.variant.name(),
            row.n_params,
            row.epochs_run,
            row.best_val_mae,
            row.report.mae,
            row.report.mse,
            row.report.mre
        );
        csv_rows.push(format!(
            "{},{},{},{},{},{},{}",
            row.variant.name(),
            row.n_params,
            row.epochs_run,
            row.best_val_mae,
            row.report.mae,
            row.report.mse,
            row.report.mre
        ));
    }
    write_csv(
        &ctx.out.join("ablation.csv"),
        "variant,n_params,epochs_run,best_val_mae,test_mae,test_mse,test_mre",
        &csv_rows,
    )?;
    println!("wrote {}", ctx.out.join("ablation.csv").display());
    Ok(())
}
