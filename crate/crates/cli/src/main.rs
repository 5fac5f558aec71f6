//! `so3flow`: train, evaluate and sample rotation flows from the command line.

mod config;
mod viz;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};
use so3flow_core::distributions::{target_entropy, TargetSampler, TargetSpec};
use so3flow_core::metrics::{avg_log_likelihood, grid_entropy, mc_entropy, normalization_audit, MetricRecord};
use so3flow_core::model::FlowModel;
use so3flow_core::so3::SO3Grid;
use so3flow_core::training::{generate_split, train, Checkpoint, Trainer, TrainOutputs};

use crate::config::{RunConfig, OUT_DIR_ENV};
use crate::viz::VizRecord;

pub const VERSION: &str = concat!("so3flow ", env!("CARGO_PKG_VERSION"));

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, config or checkpoint: exit 2.
    Usage(String),
    /// Training stopped on a non-finite loss or similar: exit 3.
    Abort(String),
    /// Anything else (I/O during a run): exit 1.
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Abort(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "error: {m}"),
            CliError::Abort(m) => write!(f, "training aborted: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Parser)]
#[command(name = "so3flow", version, about = "Normalizing flows on SO(3)")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone, Default)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model checkpoint written by `train`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory; overrides the config and $SO3FLOW_OUT_DIR.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate data from the configured target, train, write checkpoint and metrics.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Held-out log-likelihood, entropies and normalization of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Draw samples from a checkpoint as JSONL.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: usize,
    },
    /// Monte-Carlo entropy of a checkpoint.
    Entropy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: usize,
    },
    /// Hopf-coordinate records for the renderer, from a checkpoint or the configured target.
    ExportViz {
        #[command(flatten)]
        common: Common,
        /// Number of samples (weight 1/n each).
        #[arg(long, conflicts_with = "grid")]
        n: Option<usize>,
        /// Use a quadrature grid of about this many points, weighted by density.
        #[arg(long)]
        grid: Option<usize>,
    },
}

/// Everything that determined a command's outputs.
#[derive(Serialize)]
struct Resolved<'a> {
    version: &'static str,
    command: &'a str,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    grid: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint: Option<&'a Path>,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<&'a RunConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a so3flow_core::model::ModelConfig>,
}

impl Resolved<'_> {
    fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("resolved config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

fn prepare_out_dir(dir: &Path, resolved: &Resolved) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    let json = serde_json::to_string_pretty(resolved).map_err(runtime)?;
    write_file(&dir.join("resolved_config.json"), &json)?;
    write_file(&dir.join("VERSION"), &format!("{VERSION}\n"))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), CliError> {
    let f = fs::File::create(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(f);
    for row in rows {
        serde_json::to_writer(&mut w, &row).map_err(runtime)?;
        w.write_all(b"\n").map_err(runtime)?;
    }
    w.flush().map_err(runtime)
}

fn write_report(path: &Path, records: &[MetricRecord]) -> Result<(), CliError> {
    for r in records {
        println!("{}", serde_json::to_string(r).map_err(runtime)?);
    }
    write_file(path, &serde_json::to_string_pretty(records).map_err(runtime)?)
}

fn require<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T, CliError> {
    v.as_ref().ok_or_else(|| CliError::Usage(format!("missing --{flag}")))
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let cfg = RunConfig::load(require(&common.config, "config")?)?;
    Ok(cfg.resolve(common.out.clone(), common.seed))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| CliError::Usage(format!("checkpoint {}: {e}", path.display())))
}

/// Output directory for commands without a config: flag, then environment,
/// then the checkpoint's directory.
fn out_dir_near(common: &Common, checkpoint: &Path) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| checkpoint.parent().map(Path::to_path_buf).unwrap_or_default())
}

fn grid(points: usize) -> Result<SO3Grid, CliError> {
    SO3Grid::with_size(points).map_err(|e| CliError::Usage(e.to_string()))
}

fn build_target(cfg: &RunConfig) -> Result<TargetSpec, CliError> {
    cfg.target.build().map_err(|e| CliError::Usage(e.to_string()))
}

fn cmd_train(common: &Common) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let resolved = Resolved {
        version: VERSION,
        command: "train",
        seed: cfg.seed,
        n: None,
        grid: None,
        checkpoint: None,
        config: Some(&cfg),
        model: None,
    };
    prepare_out_dir(&cfg.out_dir, &resolved)?;
    let target = build_target(&cfg)?;
    let sample_grid = grid(cfg.grid.sample_points)?;
    let (train_set, test_set) = generate_split(&target, &sample_grid, &cfg.train).map_err(runtime)?;
    let model = FlowModel::seeded(cfg.model.clone(), cfg.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut trainer = Trainer::new(model, cfg.train.clone()).map_err(|e| CliError::Usage(e.to_string()))?;
    let outputs = TrainOutputs {
        metrics_csv: Some(cfg.out_dir.join("metrics.csv")),
        checkpoint_dir: Some(cfg.out_dir.clone()),
    };
    let log = train(&mut trainer, &train_set, &outputs).map_err(|e| match e {
        so3flow_core::Error::Io { .. } => runtime(e),
        other => CliError::Abort(other.to_string()),
    })?;

    let hash = cfg.hash();
    let mut records = Vec::new();
    if let Some(last) = log.last() {
        records.push(MetricRecord::new("final_batch_nll", last.nll, &hash));
    }
    if !test_set.is_empty() {
        let ll = avg_log_likelihood(&trainer.model, &test_set.x, None).map_err(runtime)?;
        records.push(MetricRecord::new("test_avg_log_likelihood", ll, &hash));
    }
    let h = target_entropy(&target, &grid(cfg.grid.eval_points)?).map_err(runtime)?;
    records.push(MetricRecord::new("target_entropy", h, &hash).with_note("-E[log p], grid quadrature"));
    write_report(&cfg.out_dir.join("report.json"), &records)
}

fn cmd_eval(common: &Common) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let ck_path = require(&common.checkpoint, "checkpoint")?;
    let ck = load_checkpoint(ck_path)?;
    if ck.model.config() != &cfg.model {
        return Err(CliError::Usage(format!(
            "checkpoint {} architecture does not match config model section",
            ck_path.display()
        )));
    }
    let resolved = Resolved {
        version: VERSION,
        command: "eval",
        seed: cfg.seed,
        n: None,
        grid: None,
        checkpoint: Some(ck_path),
        config: Some(&cfg),
        model: None,
    };
    prepare_out_dir(&cfg.out_dir, &resolved)?;
    let hash = cfg.hash();
    let target = build_target(&cfg)?;
    let (_, test_set) = generate_split(&target, &grid(cfg.grid.sample_points)?, &cfg.train).map_err(runtime)?;
    let eval_grid = grid(cfg.grid.eval_points)?;
    let mut records = Vec::new();
    if !test_set.is_empty() {
        let ll = avg_log_likelihood(&ck.model, &test_set.x, None).map_err(runtime)?;
        records.push(MetricRecord::new("avg_log_likelihood", ll, &hash).with_note("held-out split"));
    }
    let th = target_entropy(&target, &eval_grid).map_err(runtime)?;
    records.push(MetricRecord::new("target_entropy", th, &hash).with_note("-E[log p], grid quadrature"));
    let mh = grid_entropy(&ck.model, &eval_grid, None).map_err(runtime)?;
    records.push(MetricRecord::new("model_entropy", mh, &hash).with_note("-E[log p], grid quadrature"));
    let audit = normalization_audit(&ck.model, &eval_grid, None).map_err(runtime)?;
    let note = if audit.pass { "pass" } else { "fail" };
    records.push(MetricRecord::new("normalization", audit.mass, &hash).with_note(note));
    write_report(&cfg.out_dir.join("eval_report.json"), &records)
}

#[derive(Serialize)]
struct SampleRecord {
    quaternion: [f64; 4],
    log_prob: f64,
}

fn cmd_sample(common: &Common, n: usize) -> Result<(), CliError> {
    if n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let ck_path = require(&common.checkpoint, "checkpoint")?;
    let ck = load_checkpoint(ck_path)?;
    let seed = common.seed.unwrap_or(0);
    let out = out_dir_near(common, ck_path);
    prepare_out_dir(
        &out,
        &Resolved {
            version: VERSION,
            command: "sample",
            seed,
            n: Some(n),
            grid: None,
            checkpoint: Some(ck_path),
            config: None,
            model: Some(ck.model.config()),
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = ck.model.sample(n, None, &mut rng).map_err(runtime)?;
    write_jsonl(
        &out.join("samples.jsonl"),
        samples.iter().map(|(r, lp)| SampleRecord {
            quaternion: r.to_quaternion().canonical().to_array(),
            log_prob: *lp,
        }),
    )
}

fn cmd_entropy(common: &Common, n: usize) -> Result<(), CliError> {
    if n < 2 {
        return Err(CliError::Usage("--n must be at least 2".into()));
    }
    let ck_path = require(&common.checkpoint, "checkpoint")?;
    let ck = load_checkpoint(ck_path)?;
    let seed = common.seed.unwrap_or(0);
    let out = out_dir_near(common, ck_path);
    let resolved = Resolved {
        version: VERSION,
        command: "entropy",
        seed,
        n: Some(n),
        grid: None,
        checkpoint: Some(ck_path),
        config: None,
        model: Some(ck.model.config()),
    };
    prepare_out_dir(&out, &resolved)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = mc_entropy(&ck.model, n, None, &mut rng).map_err(runtime)?;
    let rec = MetricRecord::new("mc_entropy", e.value, &resolved.hash())
        .with_stderr(e.stderr)
        .with_note("-E[log p], Monte Carlo over flow samples");
    write_report(&out.join("entropy_report.json"), &[rec])
}

fn cmd_export_viz(common: &Common, n: Option<usize>, grid_points: Option<usize>) -> Result<(), CliError> {
    let seed = common.seed.unwrap_or(0);
    let n = match (n, grid_points) {
        (Some(0), _) => return Err(CliError::Usage("--n must be at least 1".into())),
        (None, None) => Some(10_000),
        (n, _) => n,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (records, out): (Vec<VizRecord>, PathBuf) = if let Some(ck_path) = &common.checkpoint {
        let ck = load_checkpoint(ck_path)?;
        let out = out_dir_near(common, ck_path);
        prepare_out_dir(
            &out,
            &Resolved {
                version: VERSION,
                command: "export-viz",
                seed,
                n,
                grid: grid_points,
                checkpoint: Some(ck_path),
                config: None,
                model: Some(ck.model.config()),
            },
        )?;
        let records = match (n, grid_points) {
            (Some(n), _) => {
                let s = ck.model.sample(n, None, &mut rng).map_err(runtime)?;
                s.iter().map(|(r, _)| VizRecord::new(r, 1.0 / n as f64)).collect()
            }
            (None, Some(g)) => {
                let g = grid(g)?;
                let lp = ck.model.log_prob_batch(g.points(), None).map_err(runtime)?;
                g.points().iter().zip(lp).map(|(r, l)| VizRecord::new(r, l.exp())).collect()
            }
            (None, None) => unreachable!("defaulted above"),
        };
        (records, out)
    } else {
        let cfg = load_config(common)?;
        prepare_out_dir(
            &cfg.out_dir,
            &Resolved {
                version: VERSION,
                command: "export-viz",
                seed: cfg.seed,
                n,
                grid: grid_points,
                checkpoint: None,
                config: Some(&cfg),
                model: None,
            },
        )?;
        let target = build_target(&cfg)?;
        let records = match (n, grid_points) {
            (Some(n), _) => {
                let g = grid(cfg.grid.sample_points)?;
                let s = TargetSampler::new(&target, &g)
                    .and_then(|s| s.sample(n, &mut rng))
                    .map_err(runtime)?;
                s.iter().map(|r| VizRecord::new(r, 1.0 / n as f64)).collect()
            }
            (None, Some(g)) => {
                let g = grid(g)?;
                let lp = target.log_prob_grid(&g).map_err(runtime)?;
                g.points().iter().zip(lp).map(|(r, l)| VizRecord::new(r, l.exp())).collect()
            }
            (None, None) => unreachable!("defaulted above"),
        };
        (records, cfg.out_dir.clone())
    };
    write_jsonl(&out.join("viz.jsonl"), records)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { common } => cmd_train(&common),
        Command::Eval { common } => cmd_eval(&common),
        Command::Sample { common, n } => cmd_sample(&common, n),
        Command::Entropy { common, n } => cmd_entropy(&common, n),
        Command::ExportViz { common, n, grid } => cmd_export_viz(&common, n, grid),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}

