//! Command-line front end.
//!
//! Settings come from three layers: command-line flags override values in
//! the `--config` TOML file, which override built-in defaults. Failures
//! print one JSON object `{"error": {"category", "message"}}` on stderr
//! and exit with a category-specific nonzero code. Output files are
//! written to a temporary sibling and renamed into place, so a failed run
//! leaves nothing behind.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::estimators::{self, EstimateReport, EstimatorConfig, Method, WeightScheme};
use crate::fednet::manifest::{self, ColumnLayout};
use crate::fednet::Network;
use crate::inference;
use crate::model::ModelFamily;
use crate::simlab::{self, HarnessConfig, MetricsTable, ScenarioConfig};
use crate::SiteDataset;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "tiltfed",
    version,
    about = "Heterogeneity-aware distributed maximum-likelihood estimation",
    after_help = "Precedence: command-line flags override --config file values, which override defaults."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a simulation preset and write metrics and raw-estimate CSVs.
    Simulate(SimulateArgs),
    /// Fit one method to site CSV files listed in a manifest.
    Estimate(EstimateArgs),
    /// Fit several methods side by side.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML file with default values for any of these options.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Rounds T for the iterative methods.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Initial-value weights: uniform, n or invvar.
    #[arg(long)]
    pub weights: Option<String>,
    /// Zero-based index of the local site.
    #[arg(long)]
    pub local_site: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Confidence level for intervals.
    #[arg(long)]
    pub level: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// figure1, figure2, figure3 or common.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Number of sites K.
    #[arg(long)]
    pub sites: Option<usize>,
    /// Comma-separated methods.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// average, homo, m1, m2, m3, onestep, modified or pooled.
    #[arg(long)]
    pub method: Option<String>,
    /// Null value(s) for the Wald test, comma-separated (default 0).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub null: Option<Vec<f64>>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long, conflicts_with = "preset")]
    pub manifest: Option<PathBuf>,
    /// Simulate one replicate of this preset instead of reading a manifest.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub sites: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub null: Option<Vec<f64>>,
    #[command(flatten)]
    pub common: CommonArgs,
}

/// Values accepted in the `--config` file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub manifest: Option<PathBuf>,
    pub preset: Option<String>,
    pub method: Option<String>,
    pub methods: Option<Vec<String>>,
    pub iterations: Option<usize>,
    pub weights: Option<String>,
    pub local_site: Option<usize>,
    pub seed: Option<u64>,
    pub level: Option<f64>,
    pub out: Option<PathBuf>,
    pub replicates: Option<usize>,
    pub sites: Option<usize>,
    pub null: Option<Vec<f64>>,
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Options after merging flags, file and defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub iterations: usize,
    pub weights: WeightScheme,
    pub local_site: usize,
    pub seed: u64,
    pub level: f64,
    pub out: Option<PathBuf>,
}

fn resolve_common(c: &CommonArgs, f: &FileConfig) -> Result<RunConfig> {
    let level = c.level.or(f.level).unwrap_or(0.95);
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!(
            "--level {level} must lie strictly between 0 and 1"
        )));
    }
    let iterations = c.iterations.or(f.iterations).unwrap_or(1);
    if iterations == 0 {
        return Err(Error::Config("--iterations must be at least 1".into()));
    }
    Ok(RunConfig {
        iterations,
        weights: c
            .weights
            .as_deref()
            .or(f.weights.as_deref())
            .map(str::parse)
            .transpose()?
            .unwrap_or_default(),
        local_site: c.local_site.or(f.local_site).unwrap_or(0),
        seed: c.seed.or(f.seed).unwrap_or(20240601),
        level,
        out: c.out.clone().or_else(|| f.out.clone()),
    })
}

fn estimator_config(run: &RunConfig) -> EstimatorConfig {
    EstimatorConfig {
        local_site: run.local_site,
        iterations: run.iterations,
        weights: run.weights,
        ..EstimatorConfig::default()
    }
}

fn parse_methods(list: &[String]) -> Result<Vec<Method>> {
    if list.is_empty() {
        return Err(Error::Config("no methods given".into()));
    }
    list.iter().map(|s| s.trim().parse()).collect()
}

/// Writes all files or none: each goes to a temporary file in its target
/// directory first and is renamed only after every write succeeded.
pub fn write_atomic(files: &[(PathBuf, Vec<u8>)]) -> Result<()> {
    let io = |path: &Path, source: std::io::Error| Error::Io {
        path: path.display().to_string(),
        source,
    };
    let mut staged = Vec::with_capacity(files.len());
    for (path, bytes) in files {
        let dir = match path.parent() {
            Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| io(path, e))?;
        tmp.write_all(bytes).map_err(|e| io(path, e))?;
        tmp.as_file().sync_all().map_err(|e| io(path, e))?;
        staged.push((tmp, path));
    }
    for (tmp, path) in staged {
        tmp.persist(path).map_err(|e| io(path, e.error))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct LedgerSummary {
    total: usize,
    /// Rounds 1, 2, ...
    per_round: Vec<usize>,
    messages: usize,
    max_payload: usize,
}

/// JSON form of a report together with its inference.
pub fn report_json(
    report: &EstimateReport,
    model: &ModelFamily,
    layout: Option<&ColumnLayout>,
    null: &DVector<f64>,
    level: f64,
) -> Result<serde_json::Value> {
    let vec = |v: &DVector<f64>| v.iter().copied().collect::<Vec<f64>>();
    let inference = match &report.covariance {
        Some(cov) => Some(inference::infer(&report.beta_hat, cov, null, level)?),
        None => None,
    };
    Ok(json!({
        "schema_version": SCHEMA_VERSION,
        "method": report.method.label(),
        "family": model.kind.to_string(),
        "p": model.p(),
        "q": model.q(),
        "common": layout.map(|l| l.common.clone()),
        "nuisance_columns": layout.map(|l| l.nuisance.clone()),
        "local_site": report.local_site,
        "iterations": report.iterations,
        "estimate": vec(&report.beta_hat),
        "initial_estimate": report.initial_beta.as_ref().map(vec),
        "inference": inference.as_ref().map(|inf| json!({
            "covariance": inf.covariance,
            "std_errors": inf.std_errors,
            "level": inf.level,
            "intervals": inf.intervals,
            "wald": {
                "null": vec(null),
                "statistic": inf.wald.statistic,
                "dof": inf.wald.dof,
                "p_value": inf.wald.p_value,
            },
        })),
        "nuisance": report.nuisance.iter().map(vec).collect::<Vec<_>>(),
        "residual": report.residual,
        "solver": report.solver_stats,
        "ledger": LedgerSummary {
            total: report.ledger.total(),
            per_round: report.ledger.per_round().iter().skip(1).copied().collect(),
            messages: report.ledger.messages().len(),
            max_payload: report.ledger.max_payload(),
        },
        "warnings": report.warnings,
    }))
}

struct Loaded {
    model: ModelFamily,
    layout: Option<ColumnLayout>,
    datasets: Vec<SiteDataset>,
}

fn load_manifest(path: &Path) -> Result<Loaded> {
    let l = manifest::load_sites(path)?;
    Ok(Loaded {
        model: l.model,
        layout: Some(l.layout),
        datasets: l.datasets,
    })
}

fn load_preset(name: &str, sites: Option<usize>, seed: u64) -> Result<Loaded> {
    let cfgs = simlab::preset(name, sites.unwrap_or(10), 1, seed)?;
    let cfg = &cfgs[0];
    let rep = simlab::generate_scenario(cfg, 0)?;
    Ok(Loaded {
        model: cfg.model()?,
        layout: None,
        datasets: rep.datasets,
    })
}

fn null_vector(null: Option<Vec<f64>>, p: usize) -> Result<DVector<f64>> {
    match null {
        None => Ok(DVector::zeros(p)),
        Some(v) if v.len() == p => Ok(DVector::from_vec(v)),
        Some(v) if v.len() == 1 => Ok(DVector::from_element(p, v[0])),
        Some(v) => Err(Error::Config(format!("--null has {} values for p = {p}", v.len()))),
    }
}

fn fit(method: Method, loaded: &Loaded, cfg: &EstimatorConfig) -> Result<EstimateReport> {
    let pooled = (method == Method::Pooled).then_some(loaded.datasets.as_slice());
    let net = Network::new(loaded.model, loaded.datasets.clone())?;
    estimators::estimate(method, &net, pooled, cfg)
}

fn emit(out: Option<&Path>, bytes: Vec<u8>) -> Result<()> {
    match out {
        Some(path) => write_atomic(&[(path.to_path_buf(), bytes)]),
        None => std::io::stdout().write_all(&bytes).map_err(|source| Error::Io {
            path: "<stdout>".into(),
            source,
        }),
    }
}

fn pretty(v: &serde_json::Value) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("serializable");
    s.push(b'\n');
    s
}

pub fn cmd_estimate(args: EstimateArgs) -> Result<()> {
    let file = load_file_config(args.common.config.as_deref())?;
    let run = resolve_common(&args.common, &file)?;
    let manifest = args
        .manifest
        .or(file.manifest)
        .ok_or_else(|| Error::Config("--manifest is required".into()))?;
    let method: Method = args.method.or(file.method).as_deref().unwrap_or("m2").parse()?;
    let loaded = load_manifest(&manifest)?;
    let null = null_vector(args.null.or(file.null), loaded.model.p())?;
    let report = fit(method, &loaded, &estimator_config(&run))?;
    let v = report_json(&report, &loaded.model, loaded.layout.as_ref(), &null, run.level)?;
    emit(run.out.as_deref(), pretty(&v))
}

/// Relative difference `|a - b| / |b|`.
pub fn relative_difference(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

pub fn cmd_compare(args: CompareArgs) -> Result<()> {
    let file = load_file_config(args.common.config.as_deref())?;
    let run = resolve_common(&args.common, &file)?;
    let methods = parse_methods(
        &args
            .methods
            .or(file.methods)
            .unwrap_or_else(|| ["m1", "m2", "m3", "average"].map(String::from).to_vec()),
    )?;
    let loaded = match (args.manifest.or(file.manifest), args.preset.or(file.preset)) {
        (Some(m), None) => load_manifest(&m)?,
        (None, Some(p)) => load_preset(&p, args.sites.or(file.sites), run.seed)?,
        (None, None) => return Err(Error::Config("give either --manifest or --preset".into())),
        (Some(_), Some(_)) => return Err(Error::Config("--manifest and --preset are exclusive".into())),
    };
    let null = null_vector(args.null.or(file.null), loaded.model.p())?;
    let cfg = estimator_config(&run);
    let reports = methods
        .iter()
        .map(|&m| fit(m, &loaded, &cfg))
        .collect::<Result<Vec<_>>>()?;
    if reports.len() == 1 {
        let v = report_json(&reports[0], &loaded.model, loaded.layout.as_ref(), &null, run.level)?;
        return emit(run.out.as_deref(), pretty(&v));
    }
    emit(
        run.out.as_deref(),
        compare_table(&reports, run.level, loaded.layout.as_ref())?.into_bytes(),
    )
}

/// Fixed-width table, one row per method and coordinate. `rel_diff` is
/// relative to the first method.
pub fn compare_table(reports: &[EstimateReport], level: f64, layout: Option<&ColumnLayout>) -> Result<String> {
    let mut s = format!(
        "{:<10} {:<12} {:>12} {:>10} {:>12} {:>12} {:>10} {:>8}\n",
        "method", "coef", "estimate", "se", "ci_lower", "ci_upper", "rel_diff", "comm"
    );
    let base = &reports[0].beta_hat;
    for r in reports {
        let inter = r
            .covariance
            .as_ref()
            .map(|c| Ok::<_, Error>((inference::std_errors(c)?, inference::ci(&r.beta_hat, c, level)?)))
            .transpose()?;
        for k in 0..r.beta_hat.len() {
            let coef = layout
                .and_then(|l| l.common.get(k).cloned())
                .unwrap_or_else(|| format!("beta[{k}]"));
            let (se, lo, hi) = match &inter {
                Some((se, iv)) => (
                    format!("{:.6}", se[k]),
                    format!("{:.6}", iv[k].lower),
                    format!("{:.6}", iv[k].upper),
                ),
                None => ("-".into(), "-".into(), "-".into()),
            };
            s.push_str(&format!(
                "{:<10} {:<12} {:>12.6} {:>10} {:>12} {:>12} {:>10.4} {:>8}\n",
                r.method.label(),
                coef,
                r.beta_hat[k],
                se,
                lo,
                hi,
                relative_difference(r.beta_hat[k], base[k]),
                r.ledger.total()
            ));
        }
    }
    Ok(s)
}

pub fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let file = load_file_config(args.common.config.as_deref())?;
    let run = resolve_common(&args.common, &file)?;
    let preset = args.preset.or(file.preset).unwrap_or_else(|| "figure1".into());
    let replicates = args.replicates.or(file.replicates).unwrap_or(200);
    let sites = args.sites.or(file.sites).unwrap_or(10);
    let methods = parse_methods(
        &args
            .methods
            .or(file.methods)
            .unwrap_or_else(|| ["average", "homo", "m1", "m2", "m3"].map(String::from).to_vec()),
    )?;
    let out = run
        .out
        .clone()
        .ok_or_else(|| Error::Config("--out directory is required".into()))?;
    fs::create_dir_all(&out).map_err(|source| Error::Io {
        path: out.display().to_string(),
        source,
    })?;
    let scenarios: Vec<ScenarioConfig> = simlab::preset(&preset, sites, replicates, run.seed)?;
    let mut h = HarnessConfig::new(methods);
    h.level = run.level;
    h.estimator.local_site = run.local_site;
    h.estimator.iterations = run.iterations;
    h.estimator.weights = run.weights;
    let mut table = MetricsTable::default();
    for sc in &scenarios {
        table.extend(simlab::run_replications(sc, &h)?);
    }
    let mut metrics = Vec::new();
    simlab::write_metrics_csv(&table, &mut metrics)?;
    let mut raw = Vec::new();
    simlab::write_raw_csv(&table, &mut raw)?;
    write_atomic(&[(out.join("metrics.csv"), metrics), (out.join("raw.csv"), raw)])
}

/// Process exit code for an error category.
pub fn exit_code(e: &Error) -> i32 {
    match e.category() {
        "config" => 2,
        "data" => 3,
        "numeric" => 4,
        "singular" => 5,
        "solver" => 6,
        "protocol" => 7,
        _ => 8,
    }
}

pub fn error_json(category: &str, message: &str) -> String {
    json!({ "error": { "category": category, "message": message } }).to_string()
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) {
                print!("{e}");
                return 0;
            }
            eprintln!("{}", error_json("config", e.to_string().trim()));
            return 2;
        }
    };
    let res = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Compare(a) => cmd_compare(a),
    };
    match res {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_json(e.category(), &e.to_string()));
            exit_code(&e)
        }
    }
}
