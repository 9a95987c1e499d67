use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hiperformer::config::RunConfig;
use hiperformer::data::{build_dataset, load_dataset, save_dataset, Dataset, SceneRecord, Standardizer};
use hiperformer::eval::{evaluate, remove_series_protocol, removal_grid};
use hiperformer::harness::{
    check_equivariance, random_hierarchical_permutation, write_verdicts, LabelMode, SeriesPermutation, TOL_F32, TOL_F64,
};
use hiperformer::model::checkpoint::read_manifest;
use hiperformer::model::{load_checkpoint, HiPerformer, Variant};
use hiperformer::numerics::rng::seeded;
use hiperformer::numerics::{Precision, Real};
use hiperformer::train::{train_to_dir, Loss};
use hiperformer::Error;
use serde_json::json;

const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(name = "hiperformer", version, about = "Simulate, train, evaluate and check set-attention forecasters")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset from the `[data]` section.
    Simulate(SimulateArgs),
    /// Train a model and write a checkpoint plus an NDJSON loss log.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Run the permutation harness; exits 4 when any check fails.
    CheckEquivariance(CheckArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory; overrides the config.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    precision: Option<Precision>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    loss: Option<Loss>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    precision: Option<Precision>,
    /// Remove-series grid as `CLASS:MAX,CLASS:MAX`, e.g. `+:2,-:1`.
    #[arg(long)]
    remove: Option<String>,
}

#[derive(Args)]
struct CheckArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to check; without it a fresh model is built from the config.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    precision: Option<Precision>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long, default_value_t = 20)]
    permutations: usize,
    #[arg(long, default_value_t = 5)]
    scenes: usize,
    #[arg(long, hide = true)]
    inject_fault: Option<f64>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Usage(String),
    #[error("{0} of {1} equivariance checks failed")]
    Property(usize, usize),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(_) | CliError::Usage(_) => 2,
            CliError::Property(..) => 4,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Exclusive claim on an output directory, released on drop.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = dir.join(".hiperformer.lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Usage(format!(
                "{} is in use by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(io_err(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn load_config(common: &Common) -> Result<RunConfig> {
    match &common.config {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::parse("")?),
    }
}

fn out_dir(common: &Common, cfg: &RunConfig) -> Result<PathBuf> {
    common
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .ok_or_else(|| CliError::Usage("no output directory: pass --out or set `output` in the config".into()))
}

fn provenance(cfg: &RunConfig, command: &str) -> serde_json::Value {
    json!({ "tool_version": TOOL_VERSION, "config_hash": cfg.hash(), "command": command })
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json value serializes");
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

/// Explicit path, then the config's `dataset`, then generation from `[data]`.
fn obtain_dataset(explicit: Option<&Path>, cfg: &RunConfig) -> Result<Dataset> {
    if let Some(p) = explicit.or(cfg.dataset.as_deref()) {
        if !p.is_dir() {
            return Err(CliError::Usage(format!("dataset directory {} does not exist", p.display())));
        }
        return Ok(load_dataset(p)?);
    }
    match &cfg.data {
        Some(d) => Ok(build_dataset(&d.spec(), d.seed)?),
        None => Err(CliError::Usage("no dataset: pass --dataset or configure `dataset` or `[data]`".into())),
    }
}

fn split<'a>(ds: &'a Dataset, name: &str) -> Result<&'a [SceneRecord]> {
    match name {
        "train" => Ok(&ds.train),
        "val" => Ok(&ds.val),
        "test" => Ok(&ds.test),
        other => Err(CliError::Usage(format!("unknown split {other:?} (expected train, val or test)"))),
    }
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    let data = cfg
        .data
        .as_mut()
        .ok_or_else(|| CliError::Usage("simulate needs a `[data]` section".into()))?;
    if let Some(s) = args.common.seed {
        data.seed = s;
    }
    let ds = build_dataset(&data.spec(), data.seed)?;
    let out = out_dir(&args.common, &cfg)?;
    let _lock = DirLock::acquire(&out)?;
    save_dataset(&ds, &out)?;
    write_json(&out.join("provenance.json"), &provenance(&cfg, "simulate"))?;
    let m = &ds.manifest;
    println!(
        "{}",
        json!({
            "dataset": out,
            "train": ds.train.len(),
            "val": ds.val.len(),
            "test": ds.test.len(),
            "t_in": m.t_in,
            "t_out": m.t_out,
            "d_in": m.d_in,
            "d_out": m.d_out,
            "master_seed": m.master_seed,
        })
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(s) = args.common.seed {
        cfg.train.seed = s;
    }
    if let Some(p) = args.precision {
        cfg.train.precision = p;
    }
    if let Some(v) = args.variant {
        cfg.model.variant = v;
    }
    if let Some(l) = args.loss {
        cfg.train.loss = l;
    }
    cfg.validate()?;
    let ds = obtain_dataset(args.dataset.as_deref(), &cfg)?;
    let out = out_dir(&args.common, &cfg)?;
    let _lock = DirLock::acquire(&out)?;
    let mc = cfg.model.for_dataset(&ds.manifest);
    let mut meta = BTreeMap::new();
    meta.insert("config_hash".to_string(), json!(cfg.hash()));
    meta.insert("seed".to_string(), json!(cfg.train.seed));
    let (best_epoch, last) = match cfg.train.precision {
        Precision::F64 => {
            let o = train_to_dir::<f64>(mc, &cfg.train, &ds, &out, meta)?;
            (o.best_epoch, o.log.last().cloned())
        }
        Precision::F32 => {
            let o = train_to_dir::<f32>(mc, &cfg.train, &ds, &out, meta)?;
            (o.best_epoch, o.log.last().cloned())
        }
    };
    write_json(&out.join("provenance.json"), &provenance(&cfg, "train"))?;
    println!("{}", json!({ "checkpoint": out.join("checkpoint"), "best_epoch": best_epoch, "last": last }));
    Ok(())
}

fn parse_grid(spec: &str) -> Result<Vec<hiperformer::eval::Removal>> {
    let parts: Vec<(String, usize)> = spec
        .split(',')
        .map(|p| {
            let (class, max) = p
                .rsplit_once(':')
                .ok_or_else(|| CliError::Usage(format!("bad removal entry {p:?} (expected CLASS:MAX)")))?;
            let max = max.parse().map_err(|_| CliError::Usage(format!("bad removal count in {p:?}")))?;
            Ok((class.to_string(), max))
        })
        .collect::<Result<_>>()?;
    match parts.as_slice() {
        [(a, ma), (b, mb)] => Ok(removal_grid(a, *ma, b, *mb)),
        [(a, ma)] => Ok(removal_grid(a, *ma, a, 0)),
        _ => Err(CliError::Usage("removal grid takes one or two classes".into())),
    }
}

fn checkpoint_precision(dir: &Path, requested: Option<Precision>) -> Result<Precision> {
    if let Some(p) = requested {
        return Ok(p);
    }
    Ok(read_manifest(dir)?.precision.parse()?)
}

fn load_with_standardizer<F: Real>(dir: &Path) -> Result<(HiPerformer<F>, Standardizer)> {
    let (model, manifest) = load_checkpoint::<F>(dir)?;
    let st = manifest
        .meta
        .get("standardizer")
        .cloned()
        .ok_or_else(|| CliError::Usage(format!("checkpoint {} carries no standardizer", dir.display())))?;
    let st: Standardizer = serde_json::from_value(st).map_err(|e| {
        CliError::Core(Error::Format {
            what: "checkpoint standardizer".into(),
            detail: e.to_string(),
        })
    })?;
    Ok((model, st))
}

fn check_compatible<F: Real>(model: &HiPerformer<F>, ds: &Dataset) -> Result<()> {
    let c = &model.config;
    let m = &ds.manifest;
    if (c.t_in, c.t_out, c.d_in, c.d_out) != (m.t_in, m.t_out, m.d_in, m.d_out) {
        return Err(CliError::Core(Error::Shape {
            op: "eval",
            detail: format!(
                "checkpoint expects (t_in, t_out, d_in, d_out) = ({}, {}, {}, {}), dataset has ({}, {}, {}, {})",
                c.t_in, c.t_out, c.d_in, c.d_out, m.t_in, m.t_out, m.d_in, m.d_out
            ),
        }));
    }
    Ok(())
}

fn run_eval<F: Real>(args: &EvalArgs, cfg: &RunConfig, ds: &Dataset, out: &Path) -> Result<()> {
    let (model, st) = load_with_standardizer::<F>(&args.checkpoint)?;
    check_compatible(&model, ds)?;
    let scenes = split(ds, &args.split)?;
    let mut header = provenance(cfg, "eval");
    header["split"] = json!(args.split);
    header["checkpoint"] = json!(args.checkpoint);
    let report = evaluate(&model, &st, scenes, header.clone())?;
    let path = out.join("report.ndjson");
    let f = File::create(&path).map_err(|e| io_err(&path, e))?;
    report.write_ndjson(std::io::BufWriter::new(f))?;
    print!("{}", report.to_table());
    if let Some(spec) = &args.remove {
        let grid = parse_grid(spec)?;
        let seed = args.common.seed.unwrap_or(0);
        let cells = remove_series_protocol(&model, &st, scenes, &grid, seed)?;
        let path = out.join("removal.ndjson");
        let mut w = std::io::BufWriter::new(File::create(&path).map_err(|e| io_err(&path, e))?);
        let mut lines = vec![header.to_string()];
        for c in &cells {
            lines.push(
                json!({
                    "removal": c.removal,
                    "aggregate": c.report.aggregate,
                    "reference": c.reference.aggregate,
                    "ade_increase": c.ade_increase(),
                })
                .to_string(),
            );
        }
        for l in lines {
            writeln!(w, "{l}").map_err(|e| io_err(&path, e))?;
        }
        w.flush().map_err(|e| io_err(&path, e))?;
        println!("removal grid: {} cells written to {}", cells.len(), path.display());
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let ds = obtain_dataset(args.dataset.as_deref(), &cfg)?;
    let out = out_dir(&args.common, &cfg)?;
    let _lock = DirLock::acquire(&out)?;
    match checkpoint_precision(&args.checkpoint, args.precision)? {
        Precision::F64 => run_eval::<f64>(args, &cfg, &ds, &out),
        Precision::F32 => run_eval::<f32>(args, &cfg, &ds, &out),
    }
}

fn run_check<F: Real>(args: &CheckArgs, cfg: &RunConfig, ds: &Dataset, out: &Path) -> Result<()> {
    let seed = args.common.seed.unwrap_or(cfg.train.seed);
    let (mut model, st) = match &args.checkpoint {
        Some(dir) => load_with_standardizer::<F>(dir)?,
        None => {
            let mut section = cfg.model;
            if let Some(v) = args.variant {
                section.variant = v;
            }
            let model = HiPerformer::<F>::new(section.for_dataset(&ds.manifest), seed)?;
            (model, Standardizer::fit(&ds.train)?)
        }
    };
    check_compatible(&model, ds)?;
    model.fault = args.inject_fault;
    let tol = if F::NAME == "f32" { TOL_F32 } else { TOL_F64 };
    let all_orders = model.config.variant != Variant::Full;
    let mut rng = seeded(seed);
    let mut verdicts = Vec::new();
    for (k, scene) in ds.test.iter().chain(&ds.val).take(args.scenes).enumerate() {
        let s = st.apply(scene);
        let x = s.x.cast::<F>();
        for j in 0..args.permutations {
            let p = if all_orders {
                SeriesPermutation::random(s.n_series(), &mut rng)
            } else {
                random_hierarchical_permutation(&s.labels, seed ^ ((k as u64) << 32 | j as u64))
            };
            verdicts.push(check_equivariance(&model, &x, &s.labels, &p, tol, LabelMode::Travel)?);
        }
    }
    if verdicts.is_empty() {
        return Err(CliError::Usage("no scenes or permutations to check".into()));
    }
    let path = out.join("verdicts.ndjson");
    let mut w = std::io::BufWriter::new(File::create(&path).map_err(|e| io_err(&path, e))?);
    writeln!(w, "{}", provenance(cfg, "check-equivariance")).map_err(|e| io_err(&path, e))?;
    write_verdicts(&verdicts, &mut w)?;
    w.flush().map_err(|e| io_err(&path, e))?;
    let failed = verdicts.iter().filter(|v| !v.pass).count();
    let worst = verdicts.iter().map(|v| v.deviation).fold(0.0, f64::max);
    println!(
        "{}",
        json!({ "checks": verdicts.len(), "failed": failed, "max_deviation": worst, "tolerance": tol, "verdicts": path })
    );
    if failed > 0 {
        return Err(CliError::Property(failed, verdicts.len()));
    }
    Ok(())
}

fn cmd_check(args: &CheckArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let ds = obtain_dataset(args.dataset.as_deref(), &cfg)?;
    let out = out_dir(&args.common, &cfg)?;
    let _lock = DirLock::acquire(&out)?;
    let precision = match (&args.checkpoint, args.precision) {
        (_, Some(p)) => p,
        (Some(dir), None) => checkpoint_precision(dir, None)?,
        (None, None) => cfg.train.precision,
    };
    match precision {
        Precision::F64 => run_check::<f64>(args, &cfg, &ds, &out),
        Precision::F32 => run_check::<f32>(args, &cfg, &ds, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::CheckEquivariance(a) => cmd_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code())
        }
    }
}
