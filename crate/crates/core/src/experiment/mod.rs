//! Config-driven experiments: ablation sweeps with training, count-only
//! reports and trade-off scatter data.

pub mod config;
pub mod reference;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::SwinModel;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::harness::{grad_check, train_with_eval, GradCheckReport, SyntheticVideoDataset, TrainHistory};
use crate::registry::counting::{
    layout_trainable, millions, petl_count, positional_count_report, trainable_count, trainable_count_shared_patt,
    write_positional_csv, PositionRow,
};
use crate::Network;

pub use config::{resolve_out_dir, ExperimentConfig, PlanCheck, RunPlan, SCHEMA_VERSION};

/// One trained run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub config_id: String,
    pub mechanism: String,
    pub d_bottle: usize,
    pub s: f64,
    pub sites: String,
    pub frames: usize,
    pub trainable_count: u64,
    pub trainable_millions: String,
    pub train_top1: f64,
    pub eval_top1: Option<f64>,
    pub seed: u64,
}

/// A report row plus its wall time, which is kept out of the CSV so reruns
/// compare byte for byte.
#[derive(Clone, Debug, Serialize)]
pub struct TimedRow {
    #[serde(flatten)]
    pub row: ReportRow,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub quiet: bool,
    /// Run independent points on separate threads.
    pub parallel: bool,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub out: PathBuf,
    pub rows: Vec<TimedRow>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_report_csv<W: Write>(rows: &[ReportRow], out: W) -> Result<()> {
    let mut w = csv_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("report.csv", e))?;
    Ok(())
}

pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<ReportRow>, _>>()?;
    Ok(rows)
}

fn run_one(plan: &RunPlan, config: &ExperimentConfig, out: &Path) -> Result<(TimedRow, TrainHistory)> {
    let mut model = SwinModel::build(&plan.model, &plan.spec, plan.seed)?;
    let train_set = SyntheticVideoDataset::from_spec(&plan.dataset)?;
    let eval_set = SyntheticVideoDataset::eval_from_spec(&plan.dataset)?;
    let history = train_with_eval(&mut model, &train_set, eval_set.as_ref(), &config.optimizer, plan.seed)?;
    let dir = out.join("runs").join(&plan.id);
    history.save(&dir)?;
    if config.output.checkpoints {
        checkpoint::save(model.registry(), &dir.join("checkpoint.bin"))?;
    }
    let count = model.registry().trainable_count();
    let row = ReportRow {
        config_id: plan.id.clone(),
        mechanism: plan.spec.label(),
        d_bottle: plan.spec.d_bottle,
        s: plan.spec.s_patt,
        sites: plan.spec.patt_sites.to_string(),
        frames: plan.frames,
        trainable_count: count,
        trainable_millions: millions(count),
        train_top1: history.final_train_top1().unwrap_or(0.0),
        eval_top1: history.final_eval_top1(),
        seed: plan.seed,
    };
    let wall_seconds = history.wall_seconds;
    Ok((TimedRow { row, wall_seconds }, history))
}

/// Trains every point of the config's ablation cross product and writes
/// `report.csv`, `report.json`, `config.toml` and per-run histories under
/// `opts.out`.
pub fn run_experiment(config_path: &Path, opts: &RunOptions) -> Result<ExperimentOutcome> {
    let mut config = ExperimentConfig::load(config_path)?;
    if let Some(seed) = opts.seed {
        config.seed = seed;
    }
    run_config(&config, opts)
}

pub fn run_config(config: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentOutcome> {
    let plans = config.plan(PlanCheck::Train)?;
    if !opts.quiet {
        eprintln!("{} run(s) in the ablation cross product", plans.len());
    }
    std::fs::create_dir_all(&opts.out).map_err(|e| Error::io(&opts.out, e))?;
    let resolved = opts.out.join("config.toml");
    std::fs::write(&resolved, config.to_toml()?).map_err(|e| Error::io(&resolved, e))?;

    let report = |plan: &RunPlan, row: &TimedRow| {
        if !opts.quiet {
            eprintln!(
                "{} {} trainable={} train_top1={:.4} ({:.1}s)",
                plan.id, row.row.mechanism, row.row.trainable_count, row.row.train_top1, row.wall_seconds
            );
        }
    };
    let mut rows = Vec::with_capacity(plans.len());
    if opts.parallel && plans.len() > 1 {
        let results: Vec<Result<TimedRow>> = std::thread::scope(|scope| {
            let handles: Vec<_> = plans
                .iter()
                .map(|plan| scope.spawn(move || run_one(plan, config, &opts.out).map(|(row, _)| row)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::config("a run thread panicked"))))
                .collect()
        });
        for (plan, r) in plans.iter().zip(results) {
            let row = r?;
            report(plan, &row);
            rows.push(row);
        }
    } else {
        for plan in &plans {
            let (row, _) = run_one(plan, config, &opts.out)?;
            report(plan, &row);
            rows.push(row);
        }
    }

    let plain: Vec<ReportRow> = rows.iter().map(|r| r.row.clone()).collect();
    let mut w = create(&opts.out.join("report.csv"))?;
    write_report_csv(&plain, &mut w)?;
    w.flush().map_err(|e| Error::io("report.csv", e))?;
    write_json(&opts.out.join("report.json"), &rows)?;
    Ok(ExperimentOutcome {
        out: opts.out.clone(),
        rows,
    })
}

/// One row of a count-only report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountRow {
    pub config_id: String,
    pub mechanism: String,
    pub d_bottle: usize,
    pub sites: String,
    pub frames: usize,
    pub num_classes: usize,
    pub petl_count: u64,
    pub trainable_count: u64,
    pub trainable_millions: String,
    /// Trainable count from enumerating the model layout.
    pub enumerated_count: u64,
    /// Trainable count if PATT shared one up-projection across its sites.
    pub shared_patt_count: u64,
    /// Published count for this configuration, when one exists.
    pub published: Option<String>,
    pub matches_published: Option<bool>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CountReport {
    pub positional: Vec<PositionRow>,
    pub rows: Vec<CountRow>,
}

/// Parameter counts without training: the positional table of the base
/// model and closed-form plus enumerated counts for every ablation point.
pub fn count_config(config: &ExperimentConfig) -> Result<CountReport> {
    let plans = config.plan(PlanCheck::Count)?;
    let positional = positional_count_report(&config.model_config()?);
    let mut rows = Vec::with_capacity(plans.len());
    for plan in &plans {
        let closed = trainable_count(&plan.model, &plan.spec);
        let layout = SwinModel::layout(&plan.model, &plan.spec)?;
        let published = reference::published_count(&plan.model, &plan.spec);
        let shown = millions(closed);
        rows.push(CountRow {
            config_id: plan.id.clone(),
            mechanism: plan.spec.label(),
            d_bottle: plan.spec.d_bottle,
            sites: plan.spec.patt_sites.to_string(),
            frames: plan.frames,
            num_classes: plan.model.num_classes,
            petl_count: petl_count(&plan.model, &plan.spec),
            trainable_count: closed,
            matches_published: published.map(|p| p == shown),
            published: published.map(str::to_string),
            trainable_millions: shown,
            enumerated_count: layout_trainable(&layout, &plan.spec),
            shared_patt_count: trainable_count_shared_patt(&plan.model, &plan.spec),
        });
    }
    Ok(CountReport { positional, rows })
}

/// Writes `positional.csv`, `counts.csv` and `counts.json` under `out`.
pub fn emit_counts(config_path: &Path, out: &Path) -> Result<CountReport> {
    let config = ExperimentConfig::load(config_path)?;
    let report = count_config(&config)?;
    let mut w = create(&out.join("positional.csv"))?;
    write_positional_csv(&report.positional, &mut w)?;
    let mut w = csv_writer(create(&out.join("counts.csv"))?);
    for r in &report.rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("counts.csv", e))?;
    write_json(&out.join("counts.json"), &report)?;
    Ok(report)
}

/// Central-difference check of the first ablation point on its first
/// `samples` training clips.
pub fn grad_check_config(config: &ExperimentConfig, eps: f64, samples: usize) -> Result<GradCheckReport> {
    if samples == 0 {
        return Err(Error::config("gradient check needs at least one sample"));
    }
    let plan = config.plan(PlanCheck::Train)?.into_iter().next().expect("cross product is never empty");
    let model = SwinModel::build(&plan.model, &plan.spec, plan.seed)?;
    let data = SyntheticVideoDataset::from_spec(&plan.dataset)?;
    let idx: Vec<usize> = (0..samples.min(data.len())).collect();
    let (inputs, labels) = data.batch(&idx)?;
    grad_check(&model, &inputs, &labels, eps)
}

/// One scatter point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub mechanism: String,
    pub count_millions: f64,
    pub top1: f64,
}

/// Projects report rows to (count in millions, top-1) grouped by
/// mechanism. Groups are ordered by name and points by count, then top-1.
/// Eval top-1 is used when present, train top-1 otherwise.
pub fn tradeoff_points(rows: &[ReportRow]) -> Result<Vec<TradeoffPoint>> {
    if rows.is_empty() {
        return Err(Error::config("trade-off plot needs at least one report row"));
    }
    let mut groups: BTreeMap<&str, Vec<TradeoffPoint>> = BTreeMap::new();
    for r in rows {
        groups.entry(&r.mechanism).or_default().push(TradeoffPoint {
            mechanism: r.mechanism.clone(),
            count_millions: r.trainable_count as f64 / 1e6,
            top1: r.eval_top1.unwrap_or(r.train_top1),
        });
    }
    Ok(groups
        .into_values()
        .flat_map(|mut g| {
            g.sort_by(|a, b| a.count_millions.total_cmp(&b.count_millions).then(a.top1.total_cmp(&b.top1)));
            g
        })
        .collect())
}

/// Reads a `report.csv` and writes `tradeoff.csv` next to `out`.
pub fn plot_tradeoff(report: &Path, out: &Path) -> Result<Vec<TradeoffPoint>> {
    let points = tradeoff_points(&read_report_csv(report)?)?;
    let mut w = csv_writer(create(out)?);
    for p in &points {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    Ok(points)
}
