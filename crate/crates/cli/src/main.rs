//! `mclrd`: dataset generation, two-stage training, evaluation, shift
//! analysis and gradient checking from the command line.
//!
//! Exit codes: 0 success, 1 other failure, 2 usage, 3 missing input,
//! 4 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mclrd_core::analysis::analyze_decomposed_shift;
use mclrd_core::checkpoint;
use mclrd_core::data::{generate_pool, load_pool, write_dataset, SynthConfig, SynthPreset};
use mclrd_core::gradcheck::run_suite;
use mclrd_core::model::McLrd;
use mclrd_core::train::{adapt_with, evaluate, evaluate_pretrain, pretrain, Evaluation, LossReport};
use mclrd_core::{DatasetSplit, Error, ExperimentConfig};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "mclrd", version, about = "Multimodal low-rank decomposers for few-shot video domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus (feature files plus manifest).
    Gen(GenArgs),
    /// Train and freeze the per-modality encoders on source data.
    Pretrain(PretrainArgs),
    /// Train decomposers, routers and heads on source plus k-shot target data.
    Adapt(AdaptArgs),
    /// Target-test accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Per-stream source/target MMD of a model adapted with --no-lada.
    Analyze(EvalArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    ZeroShift,
    ShiftRgb,
    ShiftShared,
    Mixed,
}

impl From<Preset> for SynthPreset {
    fn from(p: Preset) -> Self {
        match p {
            Preset::ZeroShift => SynthPreset::ZeroShift,
            Preset::ShiftRgb => SynthPreset::ShiftRgb,
            Preset::ShiftShared => SynthPreset::ShiftShared,
            Preset::Mixed => SynthPreset::Mixed,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Desk,
    Full,
}

fn parse_k(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(k @ (1 | 5 | 10 | 20)) => Ok(k),
        _ => Err("k must be one of 1, 5, 10, 20".into()),
    }
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum, default_value = "mixed")]
    preset: Preset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Flat key/value file overriding generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = parse_k, default_value = "5")]
    k: usize,
    #[arg(long, value_enum)]
    profile: Option<Profile>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    data: PathBuf,
    /// Pretrained checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the seed stored in the checkpoint.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_k)]
    k: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    no_ldd: bool,
    #[arg(long)]
    no_lrd: bool,
    #[arg(long)]
    no_lac: bool,
    #[arg(long)]
    no_lada: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_k)]
    k: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

/// Inputs the command needs but cannot find.
#[derive(Debug)]
struct MissingInput(PathBuf);

impl std::fmt::Display for MissingInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "missing input: {}", self.0.display())
    }
}

impl std::error::Error for MissingInput {}

/// A failed numeric check that is not a training divergence.
#[derive(Debug)]
struct NumericFailure(String);

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

fn require(path: &Path) -> anyhow::Result<()> {
    if !path.exists() {
        return Err(MissingInput(path.to_path_buf()).into());
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<MissingInput>() {
            return 3;
        }
        if cause.is::<NumericFailure>() {
            return 4;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            match e {
                Error::NonFiniteLoss { .. } | Error::Numeric { .. } => return 4,
                Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => return 3,
                _ => {}
            }
        }
    }
    1
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config_hash: String,
    seed: u64,
    version: &'static str,
    inputs: Vec<String>,
    outputs: Vec<String>,
    wall_time_s: f64,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

struct Run {
    command: &'static str,
    started: Instant,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn new(command: &'static str) -> Self {
        Run {
            command,
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn write(&mut self, path: PathBuf, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(path);
        Ok(())
    }

    /// Writes `run.json` into `dir`.
    fn finish(self, dir: &Path, config_text: &str, seed: u64) -> anyhow::Result<()> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            config_hash: sha256_hex(config_text.as_bytes()),
            seed,
            version: env!("CARGO_PKG_VERSION"),
            inputs: self.inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
            wall_time_s: self.started.elapsed().as_secs_f64(),
        };
        fs::write(dir.join("run.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

fn read_table(path: &Path) -> anyhow::Result<toml::Table> {
    require(path)?;
    let text = fs::read_to_string(path)?;
    text.parse().with_context(|| format!("parsing {}", path.display()))
}

/// Applies flat generator overrides such as `noise_sigma = 0.5` or
/// `shift_per_factor = [0, 0, 3, 3, 0, 0]`.
fn apply_synth_table(cfg: &mut SynthConfig, table: &toml::Table) -> anyhow::Result<()> {
    let float = |k: &str, v: &toml::Value| -> anyhow::Result<f64> {
        v.as_float()
            .or_else(|| v.as_integer().map(|i| i as f64))
            .with_context(|| format!("`{k}` must be a number"))
    };
    let count = |k: &str, v: &toml::Value| -> anyhow::Result<usize> {
        v.as_integer()
            .and_then(|i| usize::try_from(i).ok())
            .with_context(|| format!("`{k}` must be a non-negative integer"))
    };
    for (k, v) in table {
        match k.as_str() {
            "classes" => cfg.classes = count(k, v)?,
            "clips" => cfg.clips = count(k, v)?,
            "d_in" => cfg.d_in = count(k, v)?,
            "n_shared" => cfg.n_shared = count(k, v)?,
            "n_rgb" => cfg.n_rgb = count(k, v)?,
            "n_flow" => cfg.n_flow = count(k, v)?,
            "factor_dim" => cfg.factor_dim = count(k, v)?,
            "noise_sigma" => cfg.noise_sigma = float(k, v)?,
            "latent_sigma" => cfg.latent_sigma = float(k, v)?,
            "envelope_amp" => cfg.envelope_amp = float(k, v)?,
            "source_per_class" => cfg.source_per_class = count(k, v)?,
            "target_per_class" => cfg.target_per_class = count(k, v)?,
            "k" => cfg.k = count(k, v)?,
            "shift_per_factor" => {
                let arr = v.as_array().context("`shift_per_factor` must be an array")?;
                cfg.shift_per_factor = arr.iter().map(|x| float(k, x)).collect::<anyhow::Result<_>>()?;
            }
            other => bail!(Error::Config(format!("unknown generator key `{other}`"))),
        }
    }
    cfg.validate()?;
    Ok(())
}

fn synth_flat_string(cfg: &SynthConfig) -> String {
    let shifts: Vec<String> = cfg.shift_per_factor.iter().map(|s| format!("{s:?}")).collect();
    format!(
        "classes = {}\nclips = {}\nd_in = {}\nn_shared = {}\nn_rgb = {}\nn_flow = {}\nfactor_dim = {}\n\
         noise_sigma = {:?}\nlatent_sigma = {:?}\nenvelope_amp = {:?}\nsource_per_class = {}\n\
         target_per_class = {}\nk = {}\nshift_per_factor = [{}]\nseed = {}\n",
        cfg.classes,
        cfg.clips,
        cfg.d_in,
        cfg.n_shared,
        cfg.n_rgb,
        cfg.n_flow,
        cfg.factor_dim,
        cfg.noise_sigma,
        cfg.latent_sigma,
        cfg.envelope_amp,
        cfg.source_per_class,
        cfg.target_per_class,
        cfg.k,
        shifts.join(", "),
        cfg.seed
    )
}

fn cmd_gen(args: GenArgs) -> anyhow::Result<()> {
    let mut cfg = SynthConfig::preset(args.preset.into(), args.seed);
    if let Some(path) = &args.config {
        apply_synth_table(&mut cfg, &read_table(path)?)?;
    }
    create_dir(&args.out)?;
    let mut run = Run::new("gen");
    run.inputs.extend(args.config.clone());
    let pool = generate_pool(&cfg)?;
    let (manifest, _) = write_dataset(&args.out, &pool, cfg.classes)?;
    run.outputs.push(manifest);
    run.outputs.push(args.out.join("features"));
    let text = synth_flat_string(&cfg);
    run.write(args.out.join("synth.toml"), &text)?;
    println!("wrote {} videos ({} classes) to {}", pool.len(), cfg.classes, args.out.display());
    run.finish(&args.out, &text, args.seed)
}

/// `--data` may name the manifest or the directory holding `manifest.csv`.
fn manifest_path(data: &Path) -> anyhow::Result<PathBuf> {
    let path = if data.is_dir() { data.join("manifest.csv") } else { data.to_path_buf() };
    require(&path)?;
    Ok(path)
}

fn load_split(data: &Path, k: usize, seed: u64) -> anyhow::Result<(DatasetSplit, PathBuf)> {
    let manifest = manifest_path(data)?;
    let (pool, classes) = load_pool(&manifest)?;
    Ok((DatasetSplit::from_pool(pool, classes, k, seed)?, manifest))
}

fn base_config(profile: Option<Profile>, file: Option<&Path>) -> anyhow::Result<ExperimentConfig> {
    let table = file.map(read_table).transpose()?.unwrap_or_default();
    let profile = match profile {
        Some(p) => p,
        None => match table.get("profile").and_then(|v| v.as_str()) {
            Some("full") => Profile::Full,
            Some("desk") | None => Profile::Desk,
            Some(other) => bail!(Error::Config(format!("unknown profile `{other}`"))),
        },
    };
    let mut cfg = match profile {
        Profile::Desk => ExperimentConfig::desk(),
        Profile::Full => ExperimentConfig::default(),
    };
    cfg.apply_table(&table)?;
    Ok(cfg)
}

fn load_checkpoint(path: &Path) -> anyhow::Result<(McLrd, ExperimentConfig)> {
    require(path)?;
    checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn cmd_pretrain(args: PretrainArgs) -> anyhow::Result<()> {
    let mut cfg = base_config(args.profile, args.config.as_deref())?;
    cfg.set_seed(args.seed);
    cfg.pretrain.k = args.k;
    cfg.adapt.k = args.k;
    let (split, manifest) = load_split(&args.data, args.k, args.seed)?;
    // The data fixes the input width, clip count and label space.
    let first = &split.source_train[0];
    cfg.model.d_in = first.rgb.cols();
    cfg.model.clips = first.clips();
    cfg.model.classes = split.classes;
    cfg.validate()?;
    create_dir(&args.out)?;
    let mut run = Run::new("pretrain");
    run.inputs.push(manifest);
    run.inputs.extend(args.config.clone());

    let mut model = McLrd::new(&cfg.model, args.seed)?;
    let report = pretrain(&mut model, &split.source_train, &cfg.pretrain)?;
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in report.epoch_losses.iter().enumerate() {
        csv.push_str(&format!("{e},{l}\n"));
    }
    run.write(args.out.join("pretrain_metrics.csv"), csv)?;
    run.write(args.out.join("pretrained.ckpt"), checkpoint::to_bytes(&model, &cfg)?)?;
    println!(
        "pretrained {} steps, source train accuracy {:.4}",
        report.steps, report.train_accuracy
    );
    let text = cfg.to_flat_string();
    run.finish(&args.out, &text, args.seed)
}

fn cmd_adapt(args: AdaptArgs) -> anyhow::Result<()> {
    let (mut model, mut cfg) = load_checkpoint(&args.ckpt)?;
    if let Some(path) = &args.config {
        cfg.apply_table(&read_table(path)?)?;
    }
    if let Some(seed) = args.seed {
        cfg.set_seed(seed);
    }
    if let Some(k) = args.k {
        cfg.pretrain.k = k;
        cfg.adapt.k = k;
    }
    let t = &mut cfg.adapt.toggles;
    t.dd &= !args.no_ldd;
    t.rd &= !args.no_lrd;
    t.ac &= !args.no_lac;
    t.ada &= !args.no_lada;
    cfg.validate()?;
    let seed = cfg.adapt.seed;
    let (split, manifest) = load_split(&args.data, cfg.adapt.k, seed)?;
    create_dir(&args.out)?;
    let mut run = Run::new("adapt");
    run.inputs.push(manifest);
    run.inputs.push(args.ckpt.clone());

    let mut history: Vec<LossReport> = Vec::new();
    adapt_with(&mut model, &split, &cfg.adapt, |r| history.push(r.clone()))?;
    let acc = evaluate(&model, &split.target_test)?.accuracy;
    let mut csv = format!("{}\n", LossReport::CSV_HEADER);
    for (i, r) in history.iter().enumerate() {
        let last = i + 1 == history.len();
        csv.push_str(&r.csv_row(last.then_some(acc)));
        csv.push('\n');
    }
    run.write(args.out.join("metrics.csv"), csv)?;
    run.write(args.out.join("adapted.ckpt"), checkpoint::to_bytes(&model, &cfg)?)?;
    println!("adapted {} steps, target test accuracy {acc:.4}", history.len());
    let text = cfg.to_flat_string();
    run.finish(&args.out, &text, seed)
}

#[derive(Serialize)]
struct EvalJson {
    accuracy: f64,
    n: usize,
    per_class: Vec<f64>,
    /// `stream` for adapted checkpoints, `pretrain` otherwise.
    heads: &'static str,
}

fn reopen(args: &EvalArgs) -> anyhow::Result<(McLrd, ExperimentConfig, DatasetSplit, PathBuf, u64)> {
    let (model, cfg) = load_checkpoint(&args.ckpt)?;
    let seed = args.seed.unwrap_or(cfg.adapt.seed);
    let k = args.k.unwrap_or(cfg.adapt.k);
    let (split, manifest) = load_split(&args.data, k, seed)?;
    Ok((model, cfg, split, manifest, seed))
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let (model, cfg, split, manifest, seed) = reopen(&args)?;
    create_dir(&args.out)?;
    let mut run = Run::new("eval");
    run.inputs.push(manifest);
    run.inputs.push(args.ckpt.clone());
    let (ev, heads): (Evaluation, _) = if model.state.adapted_with.is_some() {
        (evaluate(&model, &split.target_test)?, "stream")
    } else if model.state.pretrained {
        (evaluate_pretrain(&model, &split.target_test)?, "pretrain")
    } else {
        bail!(Error::State("checkpoint holds an untrained model".into()));
    };
    let json = EvalJson {
        accuracy: ev.accuracy,
        n: ev.n,
        per_class: ev
            .per_class
            .iter()
            .map(|&(c, n)| if n == 0 { 0.0 } else { c as f64 / n as f64 })
            .collect(),
        heads,
    };
    run.write(args.out.join("eval.json"), serde_json::to_string_pretty(&json)? + "\n")?;
    println!("accuracy {:.4} on {} target test videos ({heads} heads)", ev.accuracy, ev.n);
    run.finish(&args.out, &cfg.to_flat_string(), seed)
}

fn cmd_analyze(args: EvalArgs) -> anyhow::Result<()> {
    let (model, cfg, split, manifest, seed) = reopen(&args)?;
    create_dir(&args.out)?;
    let mut run = Run::new("analyze");
    run.inputs.push(manifest);
    run.inputs.push(args.ckpt.clone());
    let report = analyze_decomposed_shift(&model, &split, seed)?;
    let csv = report.to_csv();
    run.write(args.out.join("shift.csv"), &csv)?;
    print!("{csv}");
    run.finish(&args.out, &cfg.to_flat_string(), seed)
}

fn cmd_gradcheck(args: GradcheckArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let reports = run_suite(args.seed)?;
    let mut failed = Vec::new();
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{status:>4}  {:<26} {:>5} entries  max |err| {:.3e}", r.name, r.checked, r.max_abs_err);
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    println!("{} checks in {:.2}s", reports.len(), started.elapsed().as_secs_f64());
    if !failed.is_empty() {
        return Err(NumericFailure(format!("gradient mismatch in {}", failed.join(", "))).into());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Adapt(a) => cmd_adapt(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
