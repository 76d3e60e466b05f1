use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use avflow::data::{Synth, Task};
use avflow::harness::{
    emit_reports, eval_items, evaluate_saved, generate_data, load_run, preset, run_cfg_sweep, run_experiment,
    write_report_rows, write_svg, DataSpec, ExperimentConfig, ReportRow, CURVES_SVG, EVAL_CSV,
    FINAL_CKPT, METRICS_CSV, SWEEP_CSV,
};
use avflow::Error;

#[derive(Parser)]
#[command(name = "avflow", version, about = "Train and evaluate desk-scale audio flow models")]
struct Cli {
    /// Root for every artifact written by the command.
    #[arg(long, global = true, value_name = "DIR")]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON experiment config or a named preset.
    Train {
        #[arg(required_unless_present = "preset", conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// variants4, mix3, speech2, cfg_sweep or mixgen.
        #[arg(long)]
        preset: Option<String>,
        /// Training and initialization seed for preset runs.
        #[arg(long, default_value_t = 0, requires = "preset")]
        seed: u64,
    },
    /// Evaluate one checkpoint at several guidance scales with paired noise.
    Sweep {
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        scales: Vec<f64>,
        /// Run manifest describing the model; defaults to the one beside the checkpoint.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Saved evaluation set; defaults to the run's own held-out sets.
        #[arg(long)]
        evalset: Option<PathBuf>,
    },
    /// Score a checkpoint on a saved evaluation set.
    Eval {
        checkpoint: PathBuf,
        evalset: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Guidance scale; defaults to the task's usual scale.
        #[arg(long)]
        cfg_scale: Option<f64>,
    },
    /// Render metrics CSV files into one SVG.
    Report {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long, default_value = CURVES_SVG)]
        out: PathBuf,
    },
    /// Write a synthetic evaluation set described by a JSON spec.
    GenData { spec: PathBuf },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Json(_)) => 2,
        Some(Error::NumericAtStep { .. } | Error::NonFinite { .. } | Error::Stiffness { .. }) => 3,
        _ => 1,
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(Error::from)
        .with_context(|| format!("parsing {}", path.display()))
}

fn train_one(cfg: &ExperimentConfig, root: &Path) -> Result<PathBuf> {
    let summary = run_experiment(cfg, root).with_context(|| format!("experiment {}", cfg.experiment_id))?;
    match summary.best {
        Some((step, fad)) => println!(
            "{}: {} steps, best mean toy_fad {fad:.4} at step {step} -> {}",
            cfg.experiment_id,
            summary.steps,
            summary.dir.display()
        ),
        None => println!("{}: {} steps -> {}", cfg.experiment_id, summary.steps, summary.dir.display()),
    }
    Ok(summary.dir)
}

fn sweep_rows(
    ckpt: &Path,
    manifest: Option<&Path>,
    evalset: Option<&Path>,
    scales: &[f64],
) -> Result<Vec<ReportRow>> {
    let (model, run) = load_run(ckpt, manifest)?;
    let cfg = &run.config;
    let mut rows = Vec::new();
    let mut push = |task: Task, evals: Vec<avflow::eval::Evaluation>| {
        for e in &evals {
            println!(
                "{} {task} cfg={}: toy_fad {:.4} onset_acc {:.3} ter {:.3} adherence {:.3}",
                cfg.experiment_id,
                e.report.cfg_scale,
                e.report.toy_fad,
                e.report.onset_acc,
                e.report.token_error_rate,
                e.report.cond_adherence
            );
        }
        rows.extend(evals.iter().map(|e| ReportRow::new(&cfg.experiment_id, e)));
    };
    match evalset {
        Some(dir) => {
            let (set, items) = avflow::data::load_eval_set(dir)?;
            model.config.check_against(&set.data)?;
            let synth = Synth::new(set.data.clone())?;
            push(set.task, run_cfg_sweep(&model, &synth, &items, set.task, &cfg.sampler, scales)?);
        }
        None => {
            let synth = Synth::new(cfg.data.clone())?;
            for task in cfg.eval_tasks() {
                let items = eval_items(&synth, task, cfg.eval_set_size.max(2), cfg.eval_seed)?;
                push(task, run_cfg_sweep(&model, &synth, &items, task, &cfg.sampler, scales)?);
            }
        }
    }
    Ok(rows)
}

fn run(cli: Cli) -> Result<()> {
    let Some(root) = cli.output_dir else {
        bail!(Error::Config("--output-dir is required".into()));
    };
    fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
    match cli.command {
        Command::Train { config, preset: name, seed } => {
            if let Some(path) = config {
                let cfg: ExperimentConfig = read_json(&path)?;
                cfg.validate().with_context(|| format!("validating {}", path.display()))?;
                train_one(&cfg, &root)?;
                return Ok(());
            }
            let p = preset(name.as_deref().expect("clap enforces config or preset"), seed)?;
            let mut csvs = Vec::new();
            for cfg in &p.experiments {
                let dir = train_one(cfg, &root)?;
                csvs.push(dir.join(METRICS_CSV));
                if !p.sweep_scales.is_empty() {
                    let rows = sweep_rows(&dir.join(FINAL_CKPT), None, None, &p.sweep_scales)?;
                    write_report_rows(&dir.join(SWEEP_CSV), &rows)?;
                }
            }
            let paths: Vec<&Path> = csvs.iter().map(PathBuf::as_path).collect();
            let out = root.join(&p.name).join(CURVES_SVG);
            write_svg(&out, &emit_reports(&paths)?)?;
            println!("combined curves -> {}", out.display());
        }
        Command::Sweep { checkpoint, scales, manifest, evalset } => {
            let rows = sweep_rows(&checkpoint, manifest.as_deref(), evalset.as_deref(), &scales)?;
            let out = root.join(SWEEP_CSV);
            write_report_rows(&out, &rows)?;
            println!("{} rows -> {}", rows.len(), out.display());
        }
        Command::Eval { checkpoint, evalset, manifest, cfg_scale } => {
            let (model, run) = load_run(&checkpoint, manifest.as_deref())?;
            let task = avflow::data::load_eval_set(&evalset)?.0.task;
            let mut sampler = run.config.eval_sampler(task);
            if let Some(g) = cfg_scale {
                sampler.cfg_scale = g;
            }
            let e = evaluate_saved(&model, &evalset, &sampler)?;
            let row = ReportRow::new(&run.config.experiment_id, &e);
            println!(
                "{task} cfg={}: toy_fad {:.4} onset_acc {:.3} ter {:.3} adherence {:.3} ({} items, {} failures)",
                row.cfg_scale, row.toy_fad, row.onset_acc, row.token_error_rate, row.cond_adherence, row.n_items, row.failures
            );
            write_report_rows(&root.join(EVAL_CSV), &[row])?;
        }
        Command::Report { csv, out } => {
            let paths: Vec<&Path> = csv.iter().map(PathBuf::as_path).collect();
            let svg = emit_reports(&paths)?;
            if svg.contains("warning: no metric rows") {
                eprintln!("warning: no metric rows in the given files");
            }
            let out = root.join(out);
            write_svg(&out, &svg)?;
            println!("{}", out.display());
        }
        Command::GenData { spec } => {
            let spec: DataSpec = read_json(&spec)?;
            let dir = generate_data(&spec, &root)?;
            println!("{} {} items -> {}", spec.n, spec.task, dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
