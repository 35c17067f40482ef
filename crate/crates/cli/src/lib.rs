//! Command implementations behind the `heatseg` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use heatseg::ablation::{run_ablation, AblationConfig};
use heatseg::autograd::AdamConfig;
use heatseg::bench::{fit_records, sweep, write_records, Method, SweepConfig, MIN_REPS, MIN_SIZES};
use heatseg::checks::run_checks;
use heatseg::data::{generate_phantoms, load_segmenter, read_dataset, write_dataset, LabelOracle, DEFAULT_TOLERANCE};
use heatseg::network::{train_with, TrainConfig};
use heatseg::parallel::thread_limit;
use heatseg::{evaluate, Error, Network, NetworkConfig, Phantom, Variant};
use serde_json::json;

pub const DEFAULT_DATA_SEED: u64 = 7;
pub const DEFAULT_CASES: usize = 20;
pub const CHECKPOINT_FILE: &str = "model.hck";
pub const CURVE_FILE: &str = "curve.csv";

/// Process exit status for each failure class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitKind {
    Usage,
    Data,
    Divergence,
    Failure,
}

impl ExitKind {
    pub fn code(self) -> i32 {
        match self {
            ExitKind::Usage => 2,
            ExitKind::Data => 3,
            ExitKind::Divergence => 4,
            ExitKind::Failure => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ExitKind::Usage => "usage",
            ExitKind::Data => "data",
            ExitKind::Divergence => "divergence",
            ExitKind::Failure => "failure",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            kind: ExitKind::Usage,
            message: message.into(),
        }
    }

    fn failure(message: impl Into<String>) -> Self {
        Self {
            kind: ExitKind::Failure,
            message: message.into(),
        }
    }

    /// Single-line JSON written to stderr on failure.
    pub fn json_line(&self) -> String {
        json!({ "error": self.kind.as_str(), "code": self.kind.code(), "message": self.message }).to_string()
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::Config(_) => ExitKind::Usage,
            Error::Data(_)
            | Error::Generation(_)
            | Error::Format(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_)
            | Error::Shape(_)
            | Error::Contract(_) => ExitKind::Data,
            Error::Divergence { .. } => ExitKind::Divergence,
            Error::Numeric(_) | Error::Domain(_) => ExitKind::Failure,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "heatseg",
    version,
    about = "Heat conduction segmentation networks at desk scale"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic phantom dataset.
    Gen(GenArgs),
    /// Train one network variant; writes a checkpoint and a loss curve.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Write a checkpoint that predicts the ground truth exactly.
    Oracle(OracleArgs),
    /// Train and score all five variants under one budget.
    Ablate(AblateArgs),
    /// Time the heat operator against spatial and dense baselines.
    Bench(BenchArgs),
    /// Run fast operator property checks.
    Check(CheckArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Spatial shape, e.g. 64x64 or 16x32x32.
    #[arg(long, default_value = "64x64", value_parser = parse_shape)]
    pub shape: Shape,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = DEFAULT_CASES)]
    pub count: usize,
    #[arg(long, default_value_t = DEFAULT_DATA_SEED)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Flags shared by `train` and `ablate`.
#[derive(Debug, Args)]
pub struct BudgetArgs {
    /// Network configuration JSON; defaults to the 2D desk preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory; without it the default phantom set is generated.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Seeds initialisation and shuffling.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 2)]
    pub batch_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub budget: BudgetArgs,
    /// Overrides the variant in the configuration.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// NSD tolerance in voxels.
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tolerance: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub budget: BudgetArgs,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Square grid sides, comma separated; `64` and `64x64` are equivalent.
    #[arg(long, default_value = "64,128,256,512", value_parser = parse_sizes)]
    pub sizes: Sizes,
    /// Comma separated subset of separable-matmul, spatial-oracle, quadratic-mixer.
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    pub methods: Vec<Method>,
    #[arg(long, default_value_t = MIN_REPS)]
    pub reps: usize,
    #[arg(long, default_value_t = 8)]
    pub channels: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Shape(pub Vec<usize>);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sizes(pub Vec<usize>);

fn parse_dims(s: &str) -> Result<Vec<usize>, String> {
    s.split('x')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| format!("bad shape {s:?}, expected e.g. 64x64"))
        })
        .collect()
}

fn parse_shape(s: &str) -> Result<Shape, String> {
    parse_dims(s).map(Shape)
}

fn parse_sizes(s: &str) -> Result<Sizes, String> {
    let mut out = Vec::new();
    for token in s.split(',').filter(|t| !t.trim().is_empty()) {
        let dims = parse_dims(token)?;
        if dims.is_empty() || dims.len() > 2 || dims.iter().any(|&d| d != dims[0] || d == 0) {
            return Err(format!("size {token:?} is not a square grid"));
        }
        out.push(dims[0]);
    }
    Ok(Sizes(out))
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Oracle(a) => cmd_oracle(&a, out),
        Command::Ablate(a) => cmd_ablate(&a, out),
        Command::Bench(a) => cmd_bench(&a, out),
        Command::Check(a) => cmd_check(&a, out),
    }
}

fn require(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError {
            kind: ExitKind::Data,
            message: format!("{what} {} does not exist", path.display()),
        })
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError {
        kind: ExitKind::Data,
        message: format!("cannot create {}: {e}", dir.display()),
    })
}

pub fn cmd_gen(a: &GenArgs, out: &mut dyn Write) -> CliResult<()> {
    let cases = generate_phantoms(a.count, &a.shape.0, a.classes, a.seed)?;
    create_dir(&a.out)?;
    let manifest = write_dataset(&a.out, &cases)?;
    writeln!(out, "wrote {} cases to {}", manifest.cases.len(), a.out.display())?;
    Ok(())
}

fn network_config(path: Option<&Path>) -> CliResult<NetworkConfig> {
    match path {
        Some(p) => {
            require(p, "config")?;
            Ok(NetworkConfig::load(p)?)
        }
        None => Ok(NetworkConfig::desk_2d()),
    }
}

/// Loads `--data` or generates the default phantom set for `cfg`.
fn training_cases(data: Option<&Path>, cfg: &NetworkConfig) -> CliResult<Vec<Phantom>> {
    let cases = match data {
        Some(dir) => read_dataset(dir)?.cases,
        None => generate_phantoms(DEFAULT_CASES, &cfg.patch_size, cfg.num_classes, DEFAULT_DATA_SEED)?,
    };
    if let Some(c) = cases.first() {
        if c.labels.shape() != cfg.patch_size.as_slice() {
            return Err(CliError {
                kind: ExitKind::Data,
                message: format!(
                    "dataset shape {:?} does not match network patch size {:?}",
                    c.labels.shape(),
                    cfg.patch_size
                ),
            });
        }
    }
    Ok(cases)
}

fn train_config(b: &BudgetArgs) -> CliResult<TrainConfig> {
    if !(b.lr >= 0.0 && b.lr.is_finite()) {
        return Err(CliError::usage(format!(
            "--lr must be finite and non-negative, got {}",
            b.lr
        )));
    }
    if b.batch_size == 0 {
        return Err(CliError::usage("--batch-size must be positive"));
    }
    Ok(TrainConfig {
        epochs: b.epochs,
        batch_size: b.batch_size,
        optimizer: AdamConfig {
            lr: b.lr,
            ..AdamConfig::default()
        },
        seed: b.seed,
        threads: thread_limit(),
    })
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let b = &a.budget;
    let mut cfg = network_config(b.config.as_deref())?;
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    let tcfg = train_config(b)?;
    let cases = training_cases(b.data.as_deref(), &cfg)?;
    let mut net = Network::build(&cfg, b.seed)?;
    create_dir(&b.out)?;
    writeln!(
        out,
        "training {} ({} parameters) on {} cases for {} epochs",
        cfg.variant.as_str(),
        net.param_count(),
        cases.len(),
        b.epochs
    )?;
    let mut io_err = None;
    let report = train_with(&mut net, &cases, &tcfg, |r| {
        if let Err(e) = writeln!(
            out,
            "epoch {:>3}  loss {:.6}  train_dsc {:.4}",
            r.epoch, r.loss, r.train_dsc
        ) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    net.checkpoint().write_atomic(&b.out.join(CHECKPOINT_FILE))?;
    report.write_csv(&b.out.join(CURVE_FILE))?;
    fs::write(b.out.join("config.json"), cfg.to_json())?;
    writeln!(out, "wrote {}", b.out.join(CHECKPOINT_FILE).display())?;
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    if !(a.tolerance >= 0.0 && a.tolerance.is_finite()) {
        return Err(CliError::usage(format!(
            "--tolerance must be non-negative, got {}",
            a.tolerance
        )));
    }
    require(&a.checkpoint, "checkpoint")?;
    let model = load_segmenter(&a.checkpoint)?;
    let data = read_dataset(&a.data)?;
    if data.manifest.classes != model.classes() {
        return Err(CliError {
            kind: ExitKind::Data,
            message: format!(
                "dataset has {} classes but the model predicts {}",
                data.manifest.classes,
                model.classes()
            ),
        });
    }
    let report = evaluate(model.as_ref(), &data.cases, a.tolerance)?;
    create_dir(&a.out)?;
    report.write_json(&a.out.join("report.json"))?;
    report.write_csv(&a.out.join("report.csv"))?;
    writeln!(out, "cases {}", report.cases.len())?;
    writeln!(out, "mean DSC {:.4} ± {:.4}", report.mean_dsc, report.std_dsc)?;
    writeln!(out, "mean NSD {:.4} ± {:.4}", report.mean_nsd, report.std_nsd)?;
    Ok(())
}

pub fn cmd_oracle(a: &OracleArgs, out: &mut dyn Write) -> CliResult<()> {
    if a.classes < 2 {
        return Err(CliError::usage("--classes must be at least 2"));
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    LabelOracle { classes: a.classes }.checkpoint().write_atomic(&a.out)?;
    writeln!(out, "wrote {}", a.out.display())?;
    Ok(())
}

pub fn cmd_ablate(a: &AblateArgs, out: &mut dyn Write) -> CliResult<()> {
    let b = &a.budget;
    let cfg = network_config(b.config.as_deref())?;
    let acfg = AblationConfig {
        network: cfg.clone(),
        train: train_config(b)?,
        init_seed: b.seed,
        tolerance: a.tolerance,
        ..AblationConfig::default()
    };
    let cases = training_cases(b.data.as_deref(), &cfg)?;
    create_dir(&b.out)?;
    let table = run_ablation(&cases, &acfg, |r| {
        eprintln!(
            "{:<12} DSC {:.4}  NSD {:.4}  ({:.1} s)",
            r.network, r.dsc_mean, r.nsd_mean, r.train_seconds
        );
    })?;
    let text = table.render();
    fs::write(b.out.join("ablation.md"), &text)?;
    table.write_csv(&b.out.join("ablation.csv"))?;
    write!(out, "{text}")?;
    Ok(())
}

pub fn cmd_bench(a: &BenchArgs, out: &mut dyn Write) -> CliResult<()> {
    if a.sizes.0.len() < MIN_SIZES {
        return Err(CliError::usage(format!(
            "--sizes needs at least {MIN_SIZES} grid sizes, got {}",
            a.sizes.0.len()
        )));
    }
    if a.reps < MIN_REPS {
        return Err(CliError::usage(format!("--reps must be at least {MIN_REPS}")));
    }
    let cfg = SweepConfig {
        sizes: a.sizes.0.clone(),
        methods: if a.methods.is_empty() {
            Method::ALL.to_vec()
        } else {
            a.methods.clone()
        },
        reps: a.reps,
        channels: a.channels,
        seed: a.seed,
        ..SweepConfig::default()
    };
    create_dir(&a.out)?;
    let mut io_err = None;
    let records = sweep(&cfg, |r| {
        if let Err(e) = writeln!(out, "{:<16} N={:<8} {:.6e} s", r.method.as_str(), r.n, r.seconds) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    write_records(&a.out.join("bench.csv"), &records)?;
    let fits = fit_records(&records)?;
    let summary: Vec<_> = fits
        .iter()
        .map(|(m, f)| json!({ "method": m.as_str(), "slope": f.slope, "intercept": f.intercept, "r2": f.r2 }))
        .collect();
    fs::write(
        a.out.join("fits.json"),
        serde_json::to_string_pretty(&summary).map_err(Error::from)?,
    )?;
    for (m, f) in &fits {
        writeln!(out, "{:<16} slope {:.3}  R² {:.4}", m.as_str(), f.slope, f.r2)?;
    }
    Ok(())
}

pub fn cmd_check(a: &CheckArgs, out: &mut dyn Write) -> CliResult<()> {
    let results = run_checks(a.seed)?;
    let mut failed = 0;
    for r in &results {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        writeln!(out, "[{tag}] {:<32} {:.3e} (< {:.0e})", r.name, r.value, r.threshold)?;
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        return Err(CliError::failure(format!(
            "{failed} of {} checks failed",
            results.len()
        )));
    }
    writeln!(out, "all {} checks passed", results.len())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_accept_plain_and_square_forms() {
        assert_eq!(parse_sizes("64,128x128, 256").unwrap(), Sizes(vec![64, 128, 256]));
        assert!(parse_sizes("64x32").is_err());
        assert!(parse_sizes("abc").is_err());
    }

    #[test]
    fn shapes_parse() {
        assert_eq!(parse_shape("16x32x32").unwrap(), Shape(vec![16, 32, 32]));
        assert!(parse_shape("16by32").is_err());
    }

    #[test]
    fn error_kinds_map_to_exit_codes() {
        let code = |e: Error| CliError::from(e).kind.code();
        assert_eq!(code(Error::Config("x".into())), 2);
        assert_eq!(code(Error::Data("x".into())), 3);
        assert_eq!(
            code(Error::Divergence {
                step: 3,
                message: "nan".into()
            }),
            4
        );
        assert_eq!(code(Error::Numeric("x".into())), 1);
    }

    #[test]
    fn error_line_is_json() {
        let line = CliError::usage("bad").json_line();
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["code"], 2);
        assert_eq!(v["error"], "usage");
    }
}
