use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, RunManifest};
use super::report::{read_metrics, render_svg, write_svg, MetricRow, MetricsWriter};
use crate::data::{load_eval_set, save_eval_set, MetricsReport, Synth, SynthConfig, SyntheticSample, Task};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Evaluation};
use crate::nn::VelocityModel;
use crate::sampler::SamplerConfig;
use crate::train::Trainer;

pub const METRICS_CSV: &str = "metrics.csv";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";
pub const RUN_MANIFEST: &str = "manifest.json";
pub const CURVES_SVG: &str = "curves.svg";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const EVAL_CSV: &str = "eval.csv";

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub steps: usize,
    /// Step and mean toy_fad of the best evaluation, if any ran.
    pub best: Option<(usize, f64)>,
    pub last_eval: Vec<MetricsReport>,
}

/// Held-out set for `task`; the seed depends on the task alone so runs with
/// different training mixes are scored on identical items.
pub fn eval_items(synth: &Synth, task: Task, size: usize, seed: u64) -> Result<Vec<SyntheticSample>> {
    let offset = Task::ALL.iter().position(|&t| t == task).expect("listed task") as u64;
    synth.eval_set(task, size, seed.wrapping_add(offset))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Trains per `cfg`, evaluating every `eval_every` steps, and writes the run's
/// artifacts under `cfg.run_dir(root)`. On failure the CSV and plot written so
/// far are left in place.
pub fn run_experiment(cfg: &ExperimentConfig, root: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let dir = cfg.run_dir(root);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_json(&dir.join(RUN_MANIFEST), &RunManifest::new(cfg))?;

    let synth = Synth::new(cfg.data.clone())?;
    let mut model = VelocityModel::<f32>::new(cfg.model.clone())?;
    if let Some(init) = &cfg.init_checkpoint {
        model.params.load(&root.join(init))?;
    }
    let sets = if cfg.eval_every > 0 {
        cfg.eval_tasks()
            .into_iter()
            .map(|t| Ok((t, eval_items(&synth, t, cfg.eval_set_size, cfg.eval_seed)?)))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    let csv_path = dir.join(METRICS_CSV);
    let mut csv = MetricsWriter::create(&csv_path)?;
    let mut trainer = Trainer::new(model, synth, cfg.train.clone())?;
    let mut summary = RunSummary {
        dir: dir.clone(),
        steps: 0,
        best: None,
        last_eval: Vec::new(),
    };
    let outcome = train_loop(cfg, &mut trainer, &sets, &mut csv, &mut summary);
    csv.flush()?;
    write_svg(&dir.join(CURVES_SVG), &render_svg(&read_metrics(&csv_path)?))?;
    outcome?;

    trainer.model.params.save(&dir.join(FINAL_CKPT))?;
    if summary.best.is_none() {
        trainer.model.params.save(&dir.join(BEST_CKPT))?;
    }
    Ok(summary)
}

fn train_loop(
    cfg: &ExperimentConfig,
    trainer: &mut Trainer,
    sets: &[(Task, Vec<SyntheticSample>)],
    csv: &mut MetricsWriter,
    summary: &mut RunSummary,
) -> Result<()> {
    let mix_id = cfg.train.task_mix.id();
    let row = |step: usize, task: &str, metric: &str, value: f64| MetricRow {
        step,
        experiment_id: cfg.experiment_id.clone(),
        task: task.to_string(),
        metric: metric.to_string(),
        value,
    };
    for step in 1..=cfg.train.total_steps {
        let loss = trainer.step()?;
        summary.steps = step;
        // shortest decimal form of the f32, not its widened binary value
        let loss: f64 = loss.to_string().parse().expect("float display round-trips");
        csv.push(&row(step, &mix_id, "loss", loss))?;
        if cfg.eval_every == 0 || step % cfg.eval_every != 0 {
            continue;
        }
        let mut reports = Vec::with_capacity(sets.len());
        for (task, items) in sets {
            let mut report = evaluate(&trainer.model, &trainer.synth, &cfg.eval_sampler(*task), items, *task)?.report;
            report.step = step;
            report.task_mix = mix_id.clone();
            for (name, value) in report.values() {
                csv.push(&row(step, task.as_str(), name, value))?;
            }
            csv.push(&row(step, task.as_str(), "failures", report.failures as f64))?;
            reports.push(report);
        }
        csv.flush()?;
        let fad = reports.iter().map(|r| r.toy_fad).sum::<f64>() / reports.len().max(1) as f64;
        if fad.is_finite() && summary.best.is_none_or(|(_, b)| fad < b) {
            summary.best = Some((step, fad));
            trainer.model.params.save(&summary.dir.join(BEST_CKPT))?;
        }
        summary.last_eval = reports;
    }
    Ok(())
}

/// Loads a checkpoint together with the run manifest describing its model.
/// Without an explicit manifest, the one beside the checkpoint is used.
pub fn load_run(ckpt: &Path, manifest: Option<&Path>) -> Result<(VelocityModel<f32>, RunManifest)> {
    let default = ckpt.with_file_name(RUN_MANIFEST);
    let manifest = RunManifest::load(manifest.unwrap_or(&default))?;
    manifest.config.validate()?;
    let mut model = VelocityModel::new(manifest.config.model.clone())?;
    model.params.load(ckpt)?;
    Ok((model, manifest))
}

/// Evaluates at each guidance scale from the same start noise per item.
pub fn run_cfg_sweep(
    model: &VelocityModel<f32>,
    synth: &Synth,
    items: &[SyntheticSample],
    task: Task,
    sampler: &SamplerConfig,
    scales: &[f64],
) -> Result<Vec<Evaluation>> {
    if scales.is_empty() {
        return Err(Error::Config("sweep needs at least one guidance scale".into()));
    }
    if let Some(s) = scales.iter().find(|s| !s.is_finite()) {
        return Err(Error::Config(format!("guidance scale {s} is not finite")));
    }
    scales
        .iter()
        .map(|&g| {
            let sc = SamplerConfig {
                cfg_scale: g,
                ..sampler.clone()
            };
            evaluate(model, synth, &sc, items, task)
        })
        .collect()
}

/// One row of `sweep.csv` / `eval.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment_id: String,
    pub variant: String,
    pub task: String,
    pub cfg_scale: f64,
    pub toy_fad: f64,
    pub onset_acc: f64,
    pub token_error_rate: f64,
    pub cond_adherence: f64,
    pub n_items: usize,
    pub failures: usize,
    /// Digest over the per-item start-noise hashes.
    pub noise_digest: String,
}

impl ReportRow {
    pub fn new(experiment_id: &str, e: &Evaluation) -> Self {
        let r = &e.report;
        let digest = e
            .noise_hashes
            .iter()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, &x| (h ^ x).wrapping_mul(0x0100_0000_01b3));
        Self {
            experiment_id: experiment_id.to_string(),
            variant: r.variant.clone(),
            task: r.task.to_string(),
            cfg_scale: r.cfg_scale,
            toy_fad: r.toy_fad,
            onset_acc: r.onset_acc,
            token_error_rate: r.token_error_rate,
            cond_adherence: r.cond_adherence,
            n_items: r.n_items,
            failures: r.failures,
            noise_digest: format!("{digest:016x}"),
        }
    }
}

pub fn write_report_rows(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_report_rows(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

/// Input of `gen-data`: which held-out set to synthesize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub name: String,
    pub task: Task,
    pub n: usize,
    pub seed: u64,
    pub data: SynthConfig,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            name: "evalset".into(),
            task: Task::V2S,
            n: 32,
            seed: 1000,
            data: SynthConfig::default(),
        }
    }
}

/// Writes the set described by `spec` to `root/spec.name`.
pub fn generate_data(spec: &DataSpec, root: &Path) -> Result<PathBuf> {
    if !super::config::is_safe_id(&spec.name) {
        return Err(Error::Config(format!("name {:?} is not a safe directory name", spec.name)));
    }
    if spec.n == 0 {
        return Err(Error::Config("n must be at least 1".into()));
    }
    let synth = Synth::new(spec.data.clone())?;
    let items = synth.eval_set(spec.task, spec.n, spec.seed)?;
    let dir = root.join(&spec.name);
    save_eval_set(&dir, &spec.data, spec.task, spec.seed, &items)?;
    Ok(dir)
}

/// Scores a checkpoint on a saved evaluation set.
pub fn evaluate_saved(model: &VelocityModel<f32>, set_dir: &Path, sampler: &SamplerConfig) -> Result<Evaluation> {
    let (manifest, items) = load_eval_set(set_dir)?;
    model.config.check_against(&manifest.data)?;
    let synth = Synth::new(manifest.data.clone())?;
    evaluate(model, &synth, sampler, &items, manifest.task)
}
