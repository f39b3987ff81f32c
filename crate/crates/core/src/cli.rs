//! Command-line front end. `main.rs` only forwards `argv` to [`run`].
//!
//! Exit status: 0 on success, 1 on validation errors (including bad flags),
//! 2 on I/O errors and 3 on numerical failures.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::adapters::{AdapterConfig, Method, ProbeConfig};
use crate::error::Error;
use crate::kernel::{Composition, KernelSpec};
use crate::protocol::{
    self, AblationParams, AblationRow, EvalReport, FoldMode, HyperGrid, TransferFile, ENGINE_VERSION,
};
use crate::store::{self, DatasetManifest, StoreError};
use crate::synth::{self, PresetKind, SpaceDim, SynthPreset};

type Result<T> = std::result::Result<T, Error>;

/// Bandwidth used for any space not given an explicit `--beta`.
pub const DEFAULT_BETA: f64 = 2.0;
pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_TAU: f64 = 1.0;

#[derive(Debug, Parser)]
#[command(name = "muka", version, about = "Training-free few-shot adapters over cached embeddings")]
pub struct Cli {
    /// Print per-(seed, fold) results and warnings.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic two-space dataset.
    Synth(SynthArgs),
    /// Check a manifest and its matrix files.
    Validate(ValidateArgs),
    /// Evaluate one adapter configuration.
    Eval(EvalArgs),
    /// Grid-search hyperparameters and write a transfer file.
    Tune(TuneArgs),
    /// Run the four head/kernel ablation configurations.
    Ablate(AblateArgs),
    /// Accuracy as a function of the number of shots.
    ShotsCurve(ShotsCurveArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub preset: PresetKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Dimension of every space.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub train_per_class: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub head_alignment: Option<f64>,
    /// Cross-validation folds to emit (0 for none).
    #[arg(long)]
    pub folds: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = protocol::DEFAULT_SEEDS)]
    pub seeds: Vec<u64>,
    /// `all` runs every cross-validation fold; `none` uses the official split.
    #[arg(long, default_value = "all")]
    pub folds: FoldMode,
    /// Maximum concurrent evaluation units (0 uses every core).
    #[arg(long, env = "MUKA_JOBS", default_value_t = 0)]
    pub jobs: usize,
}

#[derive(Debug, Args, Default)]
pub struct HyperArgs {
    #[arg(long)]
    pub method: Option<Method>,
    /// Adapter config or transfer file; inline flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Per-space bandwidths, e.g. `pengi=2,clap=5`.
    #[arg(long, value_delimiter = ',', value_parser = parse_space_value)]
    pub beta: Vec<(String, f64)>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Space whose text head gives the zero-shot logits (default: first space).
    #[arg(long)]
    pub head_space: Option<String>,
    /// Kernel space for single-space methods (default: the head space).
    #[arg(long)]
    pub kernel_space: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long, default_value_t = 16)]
    pub shots: usize,
    /// Report file (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value_t = 16)]
    pub shots: usize,
    /// Grid file (JSON); inline axes override its values.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<Method>,
    #[arg(long, value_delimiter = ',')]
    pub alpha_values: Vec<f64>,
    /// Values of lambda itself, not of its inverse.
    #[arg(long, value_delimiter = ',')]
    pub lambda_values: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub tau_values: Vec<f64>,
    /// Per-space bandwidth lists, repeatable: `--beta-values pengi=1:2:5`.
    #[arg(long, value_parser = parse_space_list)]
    pub beta_values: Vec<(String, Vec<f64>)>,
    #[arg(long)]
    pub head_space: Option<String>,
    /// Transfer file with the best configuration per method.
    #[arg(long)]
    pub out: PathBuf,
    /// Grid table (CSV); defaults to the transfer path with a `.grid.csv` suffix.
    #[arg(long)]
    pub table: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value_t = 16)]
    pub shots: usize,
    #[arg(long, value_delimiter = ',', value_parser = parse_space_value)]
    pub beta: Vec<(String, f64)>,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    pub lambda: f64,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ShotsCurveArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 4, 8, 16])]
    pub shots_list: Vec<usize>,
    /// Table file (CSV).
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_space_value(s: &str) -> std::result::Result<(String, f64), String> {
    let (name, value) = s
        .split_once('=')
        .ok_or_else(|| format!("expected SPACE=VALUE, got `{s}`"))?;
    let value: f64 = value.parse().map_err(|e| format!("`{value}`: {e}"))?;
    Ok((name.to_string(), value))
}

fn parse_space_list(s: &str) -> std::result::Result<(String, Vec<f64>), String> {
    let (name, values) = s
        .split_once('=')
        .ok_or_else(|| format!("expected SPACE=V1:V2:..., got `{s}`"))?;
    let values = values
        .split(':')
        .map(|v| v.parse::<f64>().map_err(|e| format!("`{v}`: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((name.to_string(), values))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| {
        StoreError::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

fn write_out(path: &Path, body: &str) -> Result<()> {
    Ok(store::write_atomic(path, body.as_bytes())?)
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Builds the adapter config for `eval` and `shots-curve`: the `--config`
/// file (if any) first, then the inline flags on top.
pub fn resolve_config(spaces: &[String], hyper: &HyperArgs) -> Result<AdapterConfig> {
    let betas: BTreeMap<&str, f64> = hyper.beta.iter().map(|(s, b)| (s.as_str(), *b)).collect();
    for s in betas.keys() {
        if !spaces.iter().any(|x| x == s) {
            return Err(Error::Usage(format!("--beta names unknown space `{s}`")));
        }
    }
    let beta_of = |s: &str| betas.get(s).copied().unwrap_or(DEFAULT_BETA);
    let mut config = match &hyper.config {
        Some(path) => load_config_file(path, hyper.method)?,
        None => {
            let method = hyper
                .method
                .ok_or_else(|| Error::Usage("--method is required unless --config is given".into()))?;
            let head = hyper.head_space.clone().unwrap_or_else(|| spaces[0].clone());
            let kspace = hyper.kernel_space.clone().unwrap_or_else(|| head.clone());
            let lambda = hyper.lambda.unwrap_or(DEFAULT_LAMBDA);
            match method {
                Method::ZeroShot => AdapterConfig::zero_shot(&head),
                Method::LinearProbe => AdapterConfig::linear_probe(&head, ProbeConfig::default()),
                Method::Tip => AdapterConfig::tip(&kspace, hyper.alpha.unwrap_or(DEFAULT_ALPHA), beta_of(&kspace))?,
                Method::ProKeR => AdapterConfig::proker(&head, &kspace, beta_of(&kspace), lambda)?,
                Method::Muka => AdapterConfig::muka(&head, spaces.iter().map(|s| (s.clone(), beta_of(s))), lambda)?,
            }
        }
    };
    if let Some(a) = hyper.alpha {
        config.alpha = a;
    }
    if let Some(l) = hyper.lambda {
        config.lambda = l;
    }
    if let Some(t) = hyper.tau {
        config.tau = t;
    }
    if let Some(h) = &hyper.head_space {
        config.zero_shot_space = h.clone();
    }
    if let Some(k) = &hyper.kernel_space {
        if config.kernel.is_product() {
            return Err(Error::Usage("--kernel-space applies to single-space kernels only".into()));
        }
        if config.kernel.beta(k).is_none() {
            let beta = betas.get(k.as_str()).copied().unwrap_or(DEFAULT_BETA);
            config.kernel = KernelSpec::single(k, beta)?;
        }
        config.kernel.composition = Composition::Single(k.clone());
    }
    for (s, b) in &hyper.beta {
        match config.kernel.per_space.iter_mut().find(|bw| &bw.space == s) {
            Some(bw) => bw.beta = *b,
            None if config.method == Method::Muka => {
                return Err(Error::Usage(format!("kernel has no factor for space `{s}`")))
            }
            None => {}
        }
    }
    config.validate()?;
    Ok(config)
}

fn load_config_file(path: &Path, method: Option<Method>) -> Result<AdapterConfig> {
    let text = read_text(path)?;
    if let Ok(transfer) = serde_json::from_str::<TransferFile>(&text) {
        let method = match method {
            Some(m) => m,
            None if transfer.best.len() == 1 => *transfer.best.keys().next().unwrap(),
            None => return Err(Error::Usage("transfer file holds several methods; pass --method".into())),
        };
        return transfer
            .best
            .get(&method)
            .map(|t| t.config.clone())
            .ok_or_else(|| Error::Usage(format!("transfer file has no entry for {method}")));
    }
    let config: AdapterConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Usage(format!("{}: not an adapter config or transfer file: {e}", path.display())))?;
    if let Some(m) = method {
        if m != config.method {
            return Err(Error::Usage(format!(
                "--method {m} conflicts with {} in {}",
                config.method,
                path.display()
            )));
        }
    }
    Ok(config)
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Usage(format!("cannot start worker pool: {e}")))?;
    pool.install(f)
}

fn summary(report: &EvalReport) -> String {
    format!(
        "dataset={} method={} shots={} seeds={} mean_accuracy={:.6}",
        report.dataset,
        report.method,
        report.shots,
        join(&report.seeds),
        report.mean_accuracy
    )
}

fn print_details(report: &EvalReport, verbose: u8) {
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    if verbose > 0 {
        for e in &report.entries {
            let fold = e.fold.map_or("-".to_string(), |f| f.to_string());
            eprintln!("  seed={} fold={} accuracy={:.6}", e.seed, fold, e.accuracy);
        }
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut p = SynthPreset::new(a.preset, a.seed);
    if let Some(n) = a.classes {
        p.num_classes = n;
    }
    if let Some(d) = a.dim {
        p.spaces = p.spaces.iter().map(|s| SpaceDim { name: s.name.clone(), dim: d }).collect();
    }
    if let Some(v) = a.train_per_class {
        p.train_per_class = v;
    }
    if let Some(v) = a.test_per_class {
        p.test_per_class = v;
    }
    if let Some(v) = a.sigma {
        p.sigma = v;
    }
    if let Some(v) = a.head_alignment {
        p.head_alignment = v;
    }
    if let Some(v) = a.folds {
        p.folds = v;
    }
    fs::create_dir_all(&a.out).map_err(|source| StoreError::Io {
        path: a.out.clone(),
        source,
    })?;
    let ds = synth::generate(&p, &a.out)?;
    println!(
        "dataset={} classes={} samples={} spaces={} out={}",
        ds.manifest.name,
        ds.manifest.num_classes(),
        ds.num_samples(),
        join(&ds.manifest.space_names()),
        a.out.join("manifest.json").display()
    );
    Ok(())
}

/// One line of `validate` output.
#[derive(Debug)]
pub struct Check {
    pub name: String,
    pub outcome: std::result::Result<(), StoreError>,
}

fn check(out: &mut Vec<Check>, name: impl Into<String>, outcome: std::result::Result<(), StoreError>) -> bool {
    let ok = outcome.is_ok();
    out.push(Check {
        name: name.into(),
        outcome,
    });
    ok
}

fn load_checked(out: &mut Vec<Check>, label: String, path: &Path) -> Option<store::EmbeddingMatrix> {
    match store::load_matrix(path) {
        Ok(m) => {
            check(out, label, Ok(()));
            Some(m)
        }
        Err(e) => {
            check(out, label, Err(e));
            None
        }
    }
}

/// Runs every manifest and matrix check, continuing past failures where the
/// remaining checks still make sense.
pub fn diagnose(path: &Path) -> Vec<Check> {
    let mut out = Vec::new();
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(source) => {
            check(&mut out, "manifest readable", Err(StoreError::Io { path: path.to_path_buf(), source }));
            return out;
        }
    };
    check(&mut out, "manifest readable", Ok(()));
    let manifest: DatasetManifest = match store::parse_manifest(&text) {
        Ok(m) => m,
        Err(e) => {
            check(&mut out, "manifest schema", Err(e));
            return out;
        }
    };
    check(&mut out, "manifest schema", Ok(()));
    check(&mut out, "manifest structure", manifest.check_structure());
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let n = manifest.num_classes();
    let mut counts: Vec<(String, usize)> = Vec::new();
    for space in &manifest.spaces {
        let name = &space.name;
        if let Some(audio) = load_checked(&mut out, format!("{name}: audio matrix"), &base.join(&space.audio)) {
            let dim_ok = if audio.dim() == space.dim {
                Ok(())
            } else {
                Err(StoreError::SchemaError(format!("declared dim {} but file has {}", space.dim, audio.dim())))
            };
            check(&mut out, format!("{name}: audio dim"), dim_ok);
            check(&mut out, format!("{name}: audio row norms"), store::l2_normalize(&audio).map(|_| ()));
            counts.push((name.clone(), audio.rows()));
        }
        if let Some(head) = load_checked(&mut out, format!("{name}: text head"), &base.join(&space.text_head)) {
            let rows_ok = if head.rows() == n {
                Ok(())
            } else {
                Err(StoreError::ClassCountMismatch {
                    space: name.clone(),
                    expected: n,
                    found: head.rows(),
                })
            };
            check(&mut out, format!("{name}: text head classes"), rows_ok);
            let dim_ok = if head.dim() == space.dim {
                Ok(())
            } else {
                Err(StoreError::SchemaError(format!("declared dim {} but head has {}", space.dim, head.dim())))
            };
            check(&mut out, format!("{name}: text head dim"), dim_ok);
            check(&mut out, format!("{name}: text head norms"), store::ZeroShotHead::from_class_rows(&head).map(|_| ()));
        }
    }
    if let Some((first, expected)) = counts.first().cloned() {
        let mismatch = counts.iter().find(|(_, c)| *c != expected);
        let agree = match mismatch {
            None => Ok(()),
            Some((space, found)) => Err(StoreError::SampleCountMismatch {
                space: space.clone(),
                expected,
                found: *found,
            }),
        };
        check(&mut out, format!("sample counts agree (reference `{first}`)"), agree);
        let max = manifest.labels().keys().next_back().copied();
        let in_range = match max {
            Some(m) if m >= expected => Err(StoreError::SchemaError(format!(
                "sample index {m} out of range for {expected} samples"
            ))),
            _ => Ok(()),
        };
        check(&mut out, "sample indices in range", in_range);
    }
    out
}

fn cmd_validate(a: &ValidateArgs) -> i32 {
    let checks = diagnose(&a.manifest);
    let mut code = 0;
    for c in &checks {
        match &c.outcome {
            Ok(()) => println!("PASS {}", c.name),
            Err(e) => {
                println!("FAIL {}: {e}", c.name);
                if code == 0 {
                    code = if e.is_io() { 2 } else { 1 };
                }
            }
        }
    }
    let failed = checks.iter().filter(|c| c.outcome.is_err()).count();
    println!("{} checks, {} failed", checks.len(), failed);
    code
}

fn cmd_eval(a: &EvalArgs, verbose: u8) -> Result<()> {
    let ds = store::load_manifest(&a.run.manifest)?;
    let config = resolve_config(&ds.manifest.space_names(), &a.hyper)?;
    let report = with_pool(a.run.jobs, || {
        Ok(protocol::run_protocol(&ds, &config, a.shots, &a.run.seeds, a.run.folds)?)
    })?;
    write_out(&a.out, &report.to_json())?;
    print_details(&report, verbose);
    println!("{}", summary(&report));
    Ok(())
}

fn build_grid(a: &TuneArgs, spaces: &[String]) -> Result<HyperGrid> {
    let mut grid = match &a.grid {
        Some(p) => serde_json::from_str(&read_text(p)?)
            .map_err(|e| Error::Usage(format!("{}: invalid grid file: {e}", p.display())))?,
        None => HyperGrid::default_for(spaces),
    };
    if !a.methods.is_empty() {
        grid.methods = a.methods.clone();
    }
    if !a.alpha_values.is_empty() {
        grid.alpha = a.alpha_values.clone();
    }
    if !a.lambda_values.is_empty() {
        grid.lambda = a.lambda_values.clone();
    }
    if !a.tau_values.is_empty() {
        grid.tau = a.tau_values.clone();
    }
    for (s, v) in &a.beta_values {
        grid.beta.insert(s.clone(), v.clone());
    }
    if a.head_space.is_some() {
        grid.head_space = a.head_space.clone();
    }
    Ok(grid)
}

fn cmd_tune(a: &TuneArgs) -> Result<()> {
    let ds = store::load_manifest(&a.run.manifest)?;
    let spaces = ds.manifest.space_names();
    let grid = build_grid(a, &spaces)?;
    let result = with_pool(a.run.jobs, || {
        Ok(protocol::tune(&ds, &grid, a.shots, &a.run.seeds, a.run.folds)?)
    })?;
    let table_path = a.table.clone().unwrap_or_else(|| a.out.with_extension("grid.csv"));
    write_out(&table_path, &protocol::grid_table(&result.rows, &spaces))?;
    write_out(&a.out, &result.transfer.to_json())?;
    for (method, best) in &result.transfer.best {
        println!(
            "dataset={} method={} shots={} seeds={} mean_accuracy={:.6} cells={}",
            ds.manifest.name,
            method,
            a.shots,
            join(&a.run.seeds),
            best.mean_accuracy,
            result.rows.iter().filter(|r| r.config.method == *method).count()
        );
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct AblationReport<'a> {
    engine_version: &'a str,
    dataset: &'a str,
    shots: usize,
    seeds: &'a [u64],
    params: &'a AblationParams,
    rows: &'a [AblationRow],
}

fn cmd_ablate(a: &AblateArgs, verbose: u8) -> Result<()> {
    let ds = store::load_manifest(&a.run.manifest)?;
    let spaces = ds.manifest.space_names();
    let mut params = AblationParams::uniform(&spaces, DEFAULT_BETA, a.lambda);
    params.tau = a.tau;
    for (s, b) in &a.beta {
        if !spaces.contains(s) {
            return Err(Error::Usage(format!("--beta names unknown space `{s}`")));
        }
        params.beta.insert(s.clone(), *b);
    }
    let rows = with_pool(a.run.jobs, || {
        Ok(protocol::ablate(&ds, a.shots, &a.run.seeds, a.run.folds, &params)?)
    })?;
    let report = AblationReport {
        engine_version: ENGINE_VERSION,
        dataset: &ds.manifest.name,
        shots: a.shots,
        seeds: &a.run.seeds,
        params: &params,
        rows: &rows,
    };
    let mut body = serde_json::to_string_pretty(&report).expect("ablation report serializes");
    body.push('\n');
    write_out(&a.out, &body)?;
    for r in &rows {
        print_details(&r.report, verbose);
        println!(
            "({}) zero_shot={} residual={} {}",
            r.label,
            r.zero_shot_space,
            r.residual_space,
            summary(&r.report)
        );
    }
    Ok(())
}

fn cmd_shots_curve(a: &ShotsCurveArgs) -> Result<()> {
    let ds = store::load_manifest(&a.run.manifest)?;
    let config = resolve_config(&ds.manifest.space_names(), &a.hyper)?;
    let points = with_pool(a.run.jobs, || {
        Ok(protocol::shots_curve(&ds, &config, &a.shots_list, &a.run.seeds, a.run.folds)?)
    })?;
    write_out(&a.out, &protocol::shots_table(&points))?;
    for p in &points {
        println!(
            "dataset={} method={} shots={} seeds={} mean_accuracy={:.6}",
            ds.manifest.name,
            config.method,
            p.shots,
            join(&a.run.seeds),
            p.mean_accuracy
        );
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a)?,
        Command::Validate(a) => return Ok(cmd_validate(a)),
        Command::Eval(a) => cmd_eval(a, cli.verbose)?,
        Command::Tune(a) => cmd_tune(a)?,
        Command::Ablate(a) => cmd_ablate(a, cli.verbose)?,
        Command::ShotsCurve(a) => cmd_shots_curve(a)?,
    }
    Ok(0)
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp
                | clap::error::ErrorKind::DisplayVersion
                | clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 0,
                _ => 1,
            };
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
