use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use graft::analysis::{self, Format};
use graft::config::Config;
use graft::datagen::{quantize_u8, save_csv, save_idx, Dataset};
use graft::gradcheck::{self, GradCheckOptions, GradCheckReport, F32_TOLERANCE, F64_TOLERANCE};
use graft::protocol::{self, write_log, LogRecord, TrainConfig, TransferCurve};
use graft::surgery::{encode, load_checkpoint, Checkpoint, FreezeSelector};
use graft::zoo::Preset;

/// `println!` that stops quietly once stdout is closed, e.g. piped into `head`.
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write;
        if let Err(e) = writeln!(std::io::stdout(), $($arg)*) {
            if e.kind() == std::io::ErrorKind::BrokenPipe {
                std::process::exit(0);
            }
            return Err(e.into());
        }
    }};
}

#[derive(Parser)]
#[command(name = "graft", version, about = "Layer-freezing transfer experiments on small convolutional networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Overrides the [train] seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Parallel jobs; defaults to GRAFT_WORKERS or the available cores.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a primary model and write its checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Task id; defaults to [task] primary or the first task.
        #[arg(long)]
        task: Option<String>,
    },
    /// Transfer a checkpoint to a task at one cut-point.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        primary: PathBuf,
        /// Task id; defaults to [task] secondary or the second task.
        #[arg(long)]
        task: Option<String>,
        #[arg(long = "l-c", conflicts_with = "group")]
        l_c: Option<usize>,
        /// Block group label, e.g. "Blocks 2 and 3".
        #[arg(long)]
        group: Option<String>,
    },
    /// Sweep l_c from a primary to a secondary task.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Existing primary checkpoint; trained from the config when absent.
        #[arg(long)]
        primary: Option<PathBuf>,
    },
    /// All ordered task pairs for every configured architecture.
    Matrix {
        #[command(flatten)]
        common: Common,
    },
    /// Summarize curves from a JSON report written by sweep or matrix.
    Analyze {
        #[arg(long)]
        input: PathBuf,
        /// Also emit the curves to this file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: EmitFormat,
    },
    /// Export the configured tasks.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "csv")]
        format: DataFormat,
    },
    /// Compare analytic gradients with central differences.
    GradCheck {
        /// Preset to check; every layer kind when absent.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, value_enum, default_value = "f32")]
        precision: Precision,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum EmitFormat {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataFormat {
    Csv,
    Idx,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Serialize)]
struct RunProvenance {
    command: String,
    argv: Vec<String>,
    version: &'static str,
    config: Option<String>,
    config_sha256: Option<String>,
    train_seed: Option<u64>,
    data_seed: Option<u64>,
    workers: Option<usize>,
    outputs: Vec<String>,
    notes: BTreeMap<String, String>,
}

struct Run {
    cfg: Config,
    hash: String,
    config_path: PathBuf,
    out: PathBuf,
    workers: usize,
    outputs: Vec<String>,
    notes: BTreeMap<String, String>,
}

impl Run {
    fn new(common: &Common) -> Result<Self> {
        let (mut cfg, hash) = Config::load(&common.config)?;
        if let Some(s) = common.seed {
            cfg.train.seed = s;
        }
        std::fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
        let workers = common.workers.or(cfg.transfer.workers).unwrap_or_else(protocol::default_workers);
        Ok(Self {
            cfg,
            hash,
            config_path: common.config.clone(),
            out: common.out.clone(),
            workers,
            outputs: Vec::new(),
            notes: BTreeMap::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.out.join(name)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(name);
        std::fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))
    }

    fn train_cfg(&self) -> &TrainConfig {
        &self.cfg.train
    }

    fn finish(mut self, command: &str) -> Result<()> {
        self.notes.insert("schedule".into(), "one SGD schedule for every l_c".into());
        let prov = RunProvenance {
            command: command.into(),
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION"),
            config: Some(self.config_path.display().to_string()),
            config_sha256: Some(self.hash.clone()),
            train_seed: Some(self.cfg.train.seed),
            data_seed: self.cfg.task.synthetic.as_ref().map(|s| s.seed),
            workers: Some(self.workers),
            outputs: self.outputs.clone(),
            notes: self.notes.clone(),
        };
        let p = self.out.join("provenance.json");
        std::fs::write(&p, serde_json::to_string_pretty(&prov)?).with_context(|| format!("writing {}", p.display()))
    }
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    load_checkpoint(&bytes).with_context(|| format!("loading {}", path.display()))
}

fn primary_task<'a>(cfg: &Config, tasks: &'a [Dataset], id: Option<&str>) -> Result<&'a Dataset> {
    Ok(Config::pick(tasks, id.or(cfg.task.primary.as_deref()), 0)?)
}

fn secondary_task<'a>(cfg: &Config, tasks: &'a [Dataset], id: Option<&str>) -> Result<&'a Dataset> {
    Ok(Config::pick(tasks, id.or(cfg.task.secondary.as_deref()), 1)?)
}

fn train_one(run: &mut Run, task: &Dataset) -> Result<(Checkpoint, Vec<LogRecord>)> {
    let spec = run
        .cfg
        .specs(&task.input_shape(), task.classes)?
        .into_iter()
        .next()
        .context("no architecture configured")?;
    let (ckpt, log) = protocol::train_primary(&spec, task, run.train_cfg())?;
    let name = format!("{}.ckpt", task.task_id);
    run.write(&name, &encode(&ckpt)?)?;
    Ok((ckpt, log))
}

fn print_curve(c: &TransferCurve) -> Result<()> {
    let d = analysis::degradation(c)?;
    out!(
        "{} -> {} [{}] baseline {} = {:.4}",
        c.primary_task_id,
        c.secondary_task_id,
        c.architecture,
        c.metric.name(),
        c.baseline.metric
    );
    for (p, dv) in c.points.iter().zip(d.d) {
        out!("  l_c {:>2} {:<16} {:.4}  d = {:+.4}", p.l_c, p.label, p.final_metric, dv);
    }
    out!("  relatedness {:.4}", analysis::relatedness(c)?);
    Ok(())
}

fn emit_curves(run: &mut Run, stem: &str, curves: &[TransferCurve]) -> Result<()> {
    let csv = run.path(&format!("{stem}.csv"));
    analysis::emit(curves, Format::Csv, &csv)?;
    let json = run.path(&format!("{stem}.json"));
    analysis::emit(curves, Format::Json, &json)?;
    Ok(())
}

fn grad_check(preset: Option<String>, precision: Precision, seed: u64) -> Result<bool> {
    let tolerance = if precision == Precision::F64 { F64_TOLERANCE } else { F32_TOLERANCE };
    let reports: Vec<(String, GradCheckReport)> = match preset {
        Some(name) => {
            let p = Preset::parse(&name)?;
            let r = match precision {
                Precision::F32 => gradcheck::preset_grad_check::<f32>(p, seed)?,
                Precision::F64 => gradcheck::preset_grad_check::<f64>(p, seed)?,
            };
            vec![(name, r)]
        }
        None => gradcheck::layer_cases()
            .iter()
            .map(|case| {
                let r = match precision {
                    Precision::F32 => gradcheck::layer_grad_check::<f32>(case, &GradCheckOptions::for_precision::<f32>(seed)),
                    Precision::F64 => gradcheck::layer_grad_check::<f64>(case, &GradCheckOptions::for_precision::<f64>(seed)),
                }?;
                Ok((case.name.to_string(), r))
            })
            .collect::<graft::Result<_>>()?,
    };
    let mut ok = true;
    for (name, r) in &reports {
        let pass = r.max_rel_error < tolerance;
        ok &= pass;
        out!(
            "{name}: max relative error {:.3e} over {} entries (worst {}: analytic {:.6e}, numeric {:.6e}) {}",
            r.max_rel_error,
            r.checked,
            r.worst,
            r.analytic,
            r.numeric,
            if pass { "ok" } else { "FAIL" }
        );
    }
    out!("tolerance {tolerance:e}");
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { common, task } => {
            let mut run = Run::new(&common)?;
            let tasks = run.cfg.tasks()?;
            let t = primary_task(&run.cfg, &tasks, task.as_deref())?.clone();
            let (ckpt, log) = train_one(&mut run, &t)?;
            write_log(&log, &run.path("log.jsonl"))?;
            out!("{}: {:?}", t.task_id, ckpt.provenance.metrics);
            run.finish("train")?;
        }
        Command::Transfer {
            common,
            primary,
            task,
            l_c,
            group,
        } => {
            let mut run = Run::new(&common)?;
            let ckpt = read_checkpoint(&primary)?;
            let selector = match (l_c, group) {
                (Some(l), _) => FreezeSelector::Stages(l),
                (_, Some(g)) => FreezeSelector::Group(g),
                _ => run.cfg.freeze_selector().context("give --l-c, --group or [transfer] l_c")?,
            };
            let tasks = run.cfg.tasks()?;
            let t = secondary_task(&run.cfg, &tasks, task.as_deref())?;
            let result = protocol::gradual_transfer_observed(&ckpt, t, &selector, run.train_cfg(), &mut |_, _, _, _| {})?;
            out!(
                "{} -> {} l_c {} ({}): {} = {:.4}",
                ckpt.provenance.task_id,
                t.task_id,
                result.l_c,
                result.label,
                run.cfg.train.metric.name(),
                result.final_metric
            );
            write_log(&result.log, &run.path("log.jsonl"))?;
            let json = serde_json::to_vec_pretty(&result)?;
            run.write("transfer.json", &json)?;
            run.finish("transfer")?;
        }
        Command::Sweep { common, primary } => {
            let mut run = Run::new(&common)?;
            let tasks = run.cfg.tasks()?;
            let mut log = Vec::new();
            let ckpt = match primary {
                Some(p) => read_checkpoint(&p)?,
                None => {
                    let t = primary_task(&run.cfg, &tasks, None)?.clone();
                    let (c, l) = train_one(&mut run, &t)?;
                    log.extend(l);
                    c
                }
            };
            let secondary = secondary_task(&run.cfg, &tasks, None)?;
            let spec = ckpt.spec.with_classes(secondary.classes);
            let cuts = run.cfg.cut_points(&spec)?;
            let curve = match run.cfg.transfer.kfold {
                Some(k) => {
                    let p = primary_task(&run.cfg, &tasks, None)?;
                    run.notes.insert("kfold".into(), k.to_string());
                    protocol::kfold_sweep(p, secondary, &ckpt.spec, &cuts, run.train_cfg(), k, run.workers)?
                }
                None => protocol::sweep(&ckpt, secondary, &cuts, run.train_cfg(), run.workers)?,
            };
            log.extend(curve.points.iter().flat_map(|p| p.log.clone()));
            log.extend(curve.baseline.log.clone());
            print_curve(&curve)?;
            emit_curves(&mut run, "curve", std::slice::from_ref(&curve))?;
            write_log(&log, &run.path("log.jsonl"))?;
            run.finish("sweep")?;
        }
        Command::Matrix { common } => {
            let mut run = Run::new(&common)?;
            let tasks = run.cfg.tasks()?;
            let first = tasks.first().context("config defines no tasks")?;
            let specs = run.cfg.specs(&first.input_shape(), first.classes)?;
            let m = protocol::cross_matrix(&tasks, &specs, run.train_cfg(), run.workers)?;
            for c in &m.curves {
                print_curve(c)?;
            }
            if !m.curves.is_empty() {
                for r in analysis::rank_tasks(&m.curves)? {
                    out!("{} ~ {}: {:.4}", r.task_a, r.task_b, r.score);
                }
            }
            for c in &m.primaries {
                let name = format!("{}.{}.ckpt", c.provenance.task_id, c.spec.name);
                run.write(&name, &encode(c)?)?;
            }
            let log: Vec<LogRecord> = m
                .curves
                .iter()
                .flat_map(|c| c.points.iter().flat_map(|p| p.log.clone()).chain(c.baseline.log.clone()))
                .collect();
            emit_curves(&mut run, "matrix", &m.curves)?;
            write_log(&log, &run.path("log.jsonl"))?;
            run.finish("matrix")?;
        }
        Command::Analyze { input, out, format } => {
            let report = analysis::parse_report(&input)?;
            for c in &report.curves {
                print_curve(c)?;
            }
            for (k, v) in &report.asymmetry {
                out!("asymmetry {k}: {v:+.4}");
            }
            for r in &report.ranking {
                out!("{} ~ {}: {:.4}", r.task_a, r.task_b, r.score);
            }
            if let Some(out) = out {
                let f = match format {
                    EmitFormat::Csv => Format::Csv,
                    EmitFormat::Json => Format::Json,
                };
                analysis::emit(&report.curves, f, &out)?;
            }
        }
        Command::GenData { common, format } => {
            let mut run = Run::new(&common)?;
            let tasks = run.cfg.raw_tasks()?;
            let mut meta = Vec::new();
            for t in &tasks {
                match format {
                    DataFormat::Csv => {
                        let p = run.path(&format!("{}.csv", t.task_id));
                        save_csv(t, &p)?;
                    }
                    DataFormat::Idx => {
                        let images = run.path(&format!("{}-images.idx", t.task_id));
                        let labels = run.path(&format!("{}-labels.idx", t.task_id));
                        save_idx(&quantize_u8(t), &images, &labels)?;
                    }
                }
                meta.push(serde_json::json!({
                    "task_id": t.task_id,
                    "classes": t.classes,
                    "samples": t.len(),
                    "input_shape": t.input_shape(),
                    "splits": t.splits,
                }));
            }
            run.write("tasks.json", &serde_json::to_vec_pretty(&meta)?)?;
            out!("wrote {} tasks to {}", tasks.len(), run.out.display());
            run.finish("gen-data")?;
        }
        Command::GradCheck { preset, precision, seed } => return grad_check(preset, precision, seed),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
