use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use implantmamba::ablate::{self, ABLATION_CSV};
use implantmamba::bench::{self, Variant};
use implantmamba::error::{Error, Result};
use implantmamba::eval::cmd_eval;
use implantmamba::gradcheck::GradCheckConfig;
use implantmamba::gradsuite::{run_suite, SuiteSelection};
use implantmamba::net::{ImplantNet, ModelConfig};
use implantmamba::parallel;
use implantmamba::phantom::{self, make_dataset, write_manifest, PhantomParams, Split, TRAIN_FRACTION};
use implantmamba::train::{cmd_train, RunConfig};

const THREADS_ENV: &str = "IMPLANTMAMBA_THREADS";

const TRAIN_HELP: &str = "\
Outputs in the run directory:
  run_config.json       the effective configuration
  metrics.csv           epoch,dice_loss,slope_loss,total,eval_dice,eval_iou,eval_slope_mae,eval_angular_err_deg,degenerate_sample_count
  metrics.json          the same rows as a JSON report
  steps.csv             step,epoch,lr,dice_loss,slope_loss,total
  checkpoint_best.imtn  parameters at the best eval_dice (plus .json sidecar)
  checkpoint_final.imtn parameters after the last step (plus .json sidecar)";

const EVAL_HELP: &str = "\
Outputs in the output directory:
  eval.csv          split,samples,dice,iou,slope_mae,angular_err_deg,degenerate_sample_count
  eval_samples.csv  index,dice,iou,slope_mae,angular_err_deg,degenerate
  eval.json         summary and per-sample metrics";

const ABLATE_HELP: &str = "\
Outputs in the output directory:
  ablation.csv  row,layer1,layer2,layer3,layer4,scp,params,dice,iou";

const BENCH_HELP: &str = "\
CSV columns: variant,L,N,elems_per_sec
Fitted log-log slopes of runtime against L are printed to stderr.";

const ROOT_HELP: &str = "\
Every failure exits nonzero and prints one JSON object {\"error\", \"code\", \"message\"} to stderr.
Exit codes: 10 dimension, 11 contract, 12 format, 13 integrity, 14 degenerate_geometry,
15 non_finite_loss, 16 gradcheck, 20 io, 21 json, 22 csv; 2 for usage errors.
Set IMPLANTMAMBA_THREADS to cap the worker count.";

#[derive(Parser)]
#[command(name = "implantmamba", version, about = "Implant position and slope prediction on synthetic CBCT phantoms", after_help = ROOT_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a phantom dataset manifest, optionally exporting the volumes.
    Generate(GenerateArgs),
    /// Train a model and write metrics and checkpoints.
    #[command(after_help = TRAIN_HELP)]
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a manifest.
    #[command(after_help = EVAL_HELP)]
    Eval(EvalArgs),
    /// Train and evaluate the nine Mamba placement by SCP configurations.
    #[command(after_help = ABLATE_HELP)]
    Ablate(TrainArgs),
    /// Run the finite-difference gradient suite at f64.
    Gradcheck(GradcheckArgs),
    /// Report trainable parameters of a model configuration.
    ParamCount(ParamCountArgs),
    /// Measure selective-scan throughput against sequence length.
    #[command(after_help = BENCH_HELP)]
    BenchScan(BenchArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Number of phantoms.
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Side of the cubic volumes; a multiple of 16.
    #[arg(long, default_value_t = 32)]
    extent: usize,
    #[arg(long, default_value_t = TRAIN_FRACTION)]
    train_fraction: f64,
    /// Output directory for manifest.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// Also write every volume and mask under <out>/volumes.
    #[arg(long)]
    export: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON file with RunConfig fields; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Start from the four-sample memorization preset.
    #[arg(long)]
    overfit: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    eval_limit: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
    /// RunConfig or ModelConfig JSON the checkpoint must match.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Skip the full-network checks.
    #[arg(long)]
    no_network: bool,
    /// Coordinates sampled per network parameter tensor.
    #[arg(long, default_value_t = 24)]
    network_coords: usize,
    /// Also write the full report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Tiny,
    Full,
}

#[derive(Args)]
struct ParamCountArgs {
    #[arg(long, value_enum, default_value = "tiny")]
    preset: Preset,
    /// RunConfig or ModelConfig JSON; overrides the preset.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "1024,4096,16384,65536")]
    lens: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "16")]
    states: Vec<usize>,
    /// sequential, chunked or chunked<N>.
    #[arg(long, value_delimiter = ',', default_value = "sequential,chunked")]
    variants: Vec<String>,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    /// Minimum seconds per repetition.
    #[arg(long, default_value_t = 0.05)]
    min_secs: f64,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).unwrap_or_default());
}

fn generate(a: &GenerateArgs) -> Result<()> {
    let params = PhantomParams::with_extent(a.extent);
    let records = make_dataset(a.count, a.seed, a.train_fraction, &params)?;
    fs::create_dir_all(&a.out)?;
    let manifest = a.out.join("manifest.jsonl");
    write_manifest(&manifest, &records)?;
    if a.export {
        let dir = a.out.join("volumes");
        fs::create_dir_all(&dir)?;
        let written: Vec<Result<()>> = parallel::map_range(records.len(), |i| {
            let ph = records[i].generate()?;
            phantom::export_volume(&ph, &dir.join(format!("{:05}.imvol", records[i].index)))
        });
        written.into_iter().collect::<Result<Vec<()>>>()?;
    }
    let n_train = records.iter().filter(|r| r.split == Split::Train).count();
    print_json(
        &json!({ "manifest": manifest, "samples": records.len(), "train": n_train, "test": records.len() - n_train }),
    );
    Ok(())
}

fn missing(flag: &str) -> Error {
    Error::Contract(format!("--{flag} is required without --config"))
}

fn run_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match (&a.config, a.overfit) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, true) => RunConfig::overfit(PathBuf::new(), PathBuf::new()),
        (None, false) => RunConfig::new(ModelConfig::tiny(), PathBuf::new(), PathBuf::new()),
    };
    if let Some(m) = &a.manifest {
        cfg.manifest = m.clone();
    } else if a.config.is_none() {
        return Err(missing("manifest"));
    }
    if let Some(o) = &a.out {
        cfg.output_dir = o.clone();
    } else if a.config.is_none() {
        return Err(missing("out"));
    }
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.batch = a.batch.unwrap_or(cfg.batch);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.max_steps = a.max_steps.or(cfg.max_steps);
    cfg.train_limit = a.train_limit.or(cfg.train_limit);
    cfg.eval_limit = a.eval_limit.or(cfg.eval_limit);
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = run_config(a)?;
    let out = cmd_train(&cfg)?;
    let last = out.report.last();
    print_json(&json!({
        "output_dir": cfg.output_dir,
        "steps": out.steps.len(),
        "best_eval_dice": out.best_dice,
        "final": last,
    }));
    Ok(())
}

/// Reads a model config from either a RunConfig or a bare ModelConfig file.
fn model_config(path: &Path) -> Result<ModelConfig> {
    let value: serde_json::Value = serde_json::from_slice(&fs::read(path)?)?;
    let model = match value.get("model") {
        Some(m) => m.clone(),
        None => value,
    };
    let cfg: ModelConfig = serde_json::from_value(model)?;
    cfg.validate()?;
    Ok(cfg)
}

fn eval(a: &EvalArgs) -> Result<()> {
    let expected = a.config.as_deref().map(model_config).transpose()?;
    let report = cmd_eval(&a.checkpoint, &a.manifest, a.split.into(), expected.as_ref())?;
    report.write(&a.out)?;
    print_json(&json!({ "output_dir": a.out, "summary": report.summary }));
    Ok(())
}

fn ablate(a: &TrainArgs) -> Result<()> {
    let cfg = run_config(a)?;
    let rows = ablate::cmd_ablate(&cfg)?;
    fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.output_dir.join(ABLATION_CSV);
    ablate::write_csv(&rows, &path)?;
    print_json(&json!({ "ablation_csv": path, "rows": rows }));
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let sel = SuiteSelection { network: !a.no_network, network_coords: a.network_coords, ..Default::default() };
    let report = run_suite(sel, &GradCheckConfig::default());
    if let Some(path) = &a.json {
        fs::write(path, serde_json::to_vec_pretty(&report)?)?;
    }
    let checked: usize = report.entries.iter().map(|e| e.checked).sum();
    let worst = report.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max);
    for e in report.failures() {
        eprintln!("FAIL {} error={:?}", e.name, e.error);
        for (idx, analytic, numeric, rel) in &e.failures {
            eprintln!("  coord {idx}: analytic {analytic:e} numeric {numeric:e} rel err {rel:.3e}");
        }
    }
    print_json(&json!({
        "checks": report.entries.len(),
        "coordinates": checked,
        "worst_rel_err": worst,
        "seconds": report.seconds,
        "pass": report.pass(),
    }));
    if report.pass() {
        Ok(())
    } else {
        Err(Error::GradCheck(format!("{} checks failed", report.failures().count())))
    }
}

fn param_count(a: &ParamCountArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(path) => model_config(path)?,
        None => match a.preset {
            Preset::Tiny => ModelConfig::tiny(),
            Preset::Full => ModelConfig::full_scale(),
        },
    };
    let store = ImplantNet::new(cfg.clone())?.init_params::<f32>(0)?;
    let mut groups: BTreeMap<String, usize> = BTreeMap::new();
    for (name, t) in store.iter() {
        let group = name.split('.').next().unwrap_or(name);
        *groups.entry(group.to_string()).or_default() += t.numel();
    }
    print_json(&json!({ "total": store.count(), "closed_form": cfg.param_count(), "groups": groups }));
    Ok(())
}

fn bench_scan(a: &BenchArgs) -> Result<()> {
    let variants = a.variants.iter().map(|v| v.parse::<Variant>()).collect::<Result<Vec<_>>>()?;
    let rows = bench::bench_scan(&a.lens, &a.states, &variants, a.reps, a.min_secs)?;
    match &a.out {
        Some(path) => bench::write_csv(&rows, fs::File::create(path)?)?,
        None => bench::write_csv(&rows, std::io::stdout().lock())?,
    }
    for (v, n, s) in bench::slopes(&rows) {
        eprintln!("loglog slope {v} N={n}: {s:.3}");
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::ParamCount(a) => param_count(a),
        Command::BenchScan(a) => bench_scan(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                parallel::init_global_threads(n);
            }
            _ => {
                let e = Error::Contract(format!("{THREADS_ENV} must be a positive integer, got {v:?}"));
                eprintln!("{}", json!({ "error": e.kind(), "code": e.exit_code(), "message": e.to_string() }));
                return ExitCode::from(e.exit_code() as u8);
            }
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "code": e.exit_code(), "message": e.to_string() }));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
