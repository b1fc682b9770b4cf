//! The `hcf` command line.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::error::{Error, Result};
use crate::events::{slice_window, EventLog, Vocab};
use crate::metrics::EvalSet;

use super::config::{derive_seed, ExperimentConfig, ModelKind};
use super::export::{DailySeries, LabeledTrace, OutDir};
use super::gradcheck::run_gradcheck;
use super::models::{train_model, Schedule, TrainedModel};
use super::search::run_random_search;
use super::slide::{run_sliding_study, SlideResult};
use super::sweep::{run_window_sweep, SweepResult};

#[derive(Parser, Debug)]
#[command(
    name = "hcf",
    version,
    about = "History-augmented collaborative filtering experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// TOML experiment config; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config field, e.g. `--set hcf.d=16` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated model kinds: historical, mf_implicit, mf_bpr, hcf.
    #[arg(long, value_delimiter = ',')]
    pub models: Vec<String>,
    /// Comma-separated training window sizes in days.
    #[arg(long, value_delimiter = ',')]
    pub windows: Vec<u32>,
    /// Read events from this CSV instead of generating synthetic data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Parse and normalize an event CSV.
    Ingest(Common),
    /// Generate the synthetic drift dataset as CSV.
    Synth(Common),
    /// Fit one model with early stopping on the validation period.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: String,
    },
    /// Score a saved model on the test or validation period.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model_file: PathBuf,
        #[arg(long, default_value = "test", value_parser = ["test", "valid"])]
        period: String,
    },
    /// Training-window sweep for every configured model.
    Sweep(Common),
    /// Window sweep followed by daily sliding retraining over the test period.
    Slide(Common),
    /// Random hyperparameter search for `search.model`.
    Search {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Finite-difference check of the HCF, MF-BPR and MF-implicit gradients.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

impl Common {
    /// Config file, then `--set` overrides, then the dedicated flags.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let base = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        if !self.models.is_empty() {
            let kinds: Vec<String> = self.models.iter().map(|m| format!("\"{}\"", m.trim())).collect();
            overrides.push(format!("models=[{}]", kinds.join(",")));
        }
        if !self.windows.is_empty() {
            let ws: Vec<String> = self.windows.iter().map(u32::to_string).collect();
            overrides.push(format!("window_sizes_days=[{}]", ws.join(",")));
        }
        if let Some(path) = &self.data {
            overrides.push("data.source=\"csv\"".into());
            let quoted = toml::Value::String(path.to_string_lossy().into_owned()).to_string();
            overrides.push(format!("data.csv_path={quoted}"));
        }
        base.with_overrides(&overrides)
    }
}

#[derive(Serialize)]
struct LogSummary {
    events: usize,
    users: usize,
    items: usize,
    first_date: Option<String>,
    last_date: Option<String>,
    days: u32,
}

fn summarize(log: &EventLog) -> LogSummary {
    let range = log.day_range();
    LogSummary {
        events: log.len(),
        users: log.num_users(),
        items: log.num_items(),
        first_date: range.map(|(a, _)| log.date_of(a).to_string()),
        last_date: range.map(|(_, b)| log.date_of(b).to_string()),
        days: range.map_or(0, |(a, b)| b - a + 1),
    }
}

fn model_meta(window: &EventLog, capacity: usize) -> serde_json::Value {
    json!({
        "train_days": window.day_range(),
        "history_capacity": capacity,
        "users": window.users().names(),
        "items": window.items().names(),
    })
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(common) => {
            if common.data.is_none() && common.config.is_none() {
                return Err(Error::Config(
                    "ingest needs --data <csv> or a config with a csv source".into(),
                ));
            }
            let cfg = common.resolve()?;
            write_log(&common, &cfg, "ingest")
        }
        Command::Synth(common) => {
            let cfg = common.resolve()?;
            write_log(&common, &cfg, "synth")
        }
        Command::Train { common, model } => train(&common, ModelKind::parse(&model)?),
        Command::Eval {
            common,
            model_file,
            period,
        } => eval(&common, &model_file, &period),
        Command::Sweep(common) => {
            let cfg = common.resolve()?;
            let log = cfg.load_data()?;
            let sweep = run_window_sweep(&cfg, &log)?;
            let out = OutDir::open(&common.out)?;
            let files = export_sweep(&out, &cfg, &log, &sweep, None)?;
            print_sweep(&sweep);
            out.write_manifest("sweep", &cfg, &files)?;
            Ok(())
        }
        Command::Slide(common) => {
            let cfg = common.resolve()?;
            let log = cfg.load_data()?;
            let sweep = run_window_sweep(&cfg, &log)?;
            let slide = run_sliding_study(&cfg, &log, &sweep)?;
            let out = OutDir::open(&common.out)?;
            let files = export_sweep(&out, &cfg, &log, &sweep, Some(&slide))?;
            for r in &slide.rows {
                println!(
                    "{:<12} {:<12} window {:>3}  mapSym {:.4}",
                    r.model.tag(),
                    format!("{:?}", r.mode).to_lowercase(),
                    r.window_days,
                    r.map_sym
                );
            }
            out.write_manifest("slide", &cfg, &files)?;
            Ok(())
        }
        Command::Search { common, trials } => {
            let mut cfg = common.resolve()?;
            if let Some(t) = trials {
                cfg.search.trials = t;
            }
            let log = cfg.load_data()?;
            let result = run_random_search(&cfg, &log)?;
            let out = OutDir::open(&common.out)?;
            let mut files = vec![out.write_search(&result.trials)?];
            let best = &result.trials[result.best];
            files.push(out.write_json(
                "report.json",
                &json!({ "command": "search", "best": best, "trials": result.trials.len() }),
            )?);
            let toml_path = out.path("best_config.toml");
            std::fs::write(&toml_path, result.best_config.to_toml()?).map_err(|e| Error::io(&toml_path, e))?;
            files.push(toml_path);
            println!("best trial {} validation mapSym {:.4}", best.trial, best.valid_map_sym);
            out.write_manifest("search", &cfg, &files)?;
            Ok(())
        }
        Command::Gradcheck {
            trials,
            seed,
            epsilon,
            tolerance,
            out,
        } => {
            if trials == 0 || !(1e-7..=1e-3).contains(&epsilon) {
                return Err(Error::Config(
                    "gradcheck needs trials >= 1 and epsilon in [1e-7, 1e-3]".into(),
                ));
            }
            let rows = run_gradcheck(seed, trials, epsilon);
            let out = OutDir::open(&out)?;
            out.write_rows("gradcheck.csv", &rows)?;
            let mut worst: Vec<(ModelKind, f64)> = Vec::new();
            for r in &rows {
                match worst.iter_mut().find(|(k, _)| *k == r.model) {
                    Some((_, w)) => *w = w.max(r.max_rel_error),
                    None => worst.push((r.model, r.max_rel_error)),
                }
            }
            let report: Vec<_> = worst
                .iter()
                .map(|(k, w)| json!({ "model": k, "max_rel_error": w, "pass": *w < tolerance }))
                .collect();
            out.write_json("report.json", &report)?;
            for (k, w) in &worst {
                println!("{:<12} max relative error {w:.3e} over {trials} seeds", k.tag());
            }
            match worst.iter().find(|(_, w)| w.is_nan() || *w >= tolerance) {
                Some((k, w)) => Err(Error::GradCheck {
                    model: k.tag().into(),
                    error: *w,
                }),
                None => Ok(()),
            }
        }
    }
}

fn write_log(common: &Common, cfg: &ExperimentConfig, command: &str) -> Result<()> {
    let log = cfg.load_data()?;
    let out = OutDir::open(&common.out)?;
    let events = out.path("events.csv");
    log.save_csv(&events)?;
    let summary = summarize(&log);
    let report = out.write_json("report.json", &json!({ "command": command, "log": summary }))?;
    println!(
        "{} events, {} users, {} items, {} days -> {}",
        summary.events,
        summary.users,
        summary.items,
        summary.days,
        events.display()
    );
    out.write_manifest(command, cfg, &[events, report])?;
    Ok(())
}

fn train(common: &Common, kind: ModelKind) -> Result<()> {
    let cfg = common.resolve()?;
    let log = cfg.load_data()?;
    let split = cfg.split.to_split()?;
    let w = if cfg.train_window_days > 0 {
        cfg.train_window_days
    } else {
        split.train.1 + 1
    };
    let window = slice_window(&log, split.train.1, w).log;
    let valid = log.restrict_days(split.valid.0, split.valid.1);
    let capacity = cfg.history_capacity(kind);
    let set = EvalSet::new(&window, &valid, capacity)?;
    let trained = train_model(
        &cfg,
        kind,
        &window,
        Schedule::EarlyStop(&set),
        derive_seed(cfg.seed, &[7]),
        None,
    )?;
    let report = trained.valid.clone().unwrap_or_else(|| set.evaluate(&trained.model));

    let out = OutDir::open(&common.out)?;
    let model_path = out.path(&format!("model-{}.bin", kind.tag()));
    trained.model.save(&model_path, model_meta(&window, capacity))?;
    let files = vec![
        model_path,
        out.write_trace(&[LabeledTrace {
            epochs: trained.trace.clone(),
            ..LabeledTrace::default()
        }])?,
        out.write_daily(
            &[DailySeries {
                days: report.daily.clone(),
                ..DailySeries::default()
            }],
            cfg.ewma_alpha,
        )?,
        out.write_json(
            "report.json",
            &json!({
                "command": "train",
                "model": kind,
                "window_days": w,
                "best_epoch": trained.best_epoch,
                "skipped_negatives": trained.skipped_negatives,
                "valid": {
                    "map_user": report.map_user,
                    "map_item": report.map_item,
                    "map_sym": report.map_sym,
                    "user_queries": report.user_queries,
                    "item_queries": report.item_queries,
                },
            }),
        )?,
    ];
    println!(
        "{}: best epoch {}, validation mapSym {:.4} (user {:.4}, item {:.4})",
        kind.tag(),
        trained.best_epoch,
        report.map_sym,
        report.map_user,
        report.map_item
    );
    out.write_manifest("train", &cfg, &files)?;
    Ok(())
}

fn eval(common: &Common, model_file: &std::path::Path, period: &str) -> Result<()> {
    let cfg = common.resolve()?;
    let log = cfg.load_data()?;
    let (model, meta) = TrainedModel::load(model_file)?;
    let bad = |what: &str| Error::ModelFormat(format!("model metadata lacks {what}"));
    let (first, last): (u32, u32) =
        serde_json::from_value(meta.get("train_days").cloned().ok_or_else(|| bad("train_days"))?)
            .map_err(|_| bad("train_days"))?;
    let names = |key: &str| -> Result<Vocab> {
        let v: Vec<String> = serde_json::from_value(meta.get(key).cloned().ok_or_else(|| bad(key))?)?;
        Ok(Vocab::from_names(v))
    };
    let (users, items) = (names("users")?, names("items")?);
    let capacity: usize = serde_json::from_value(
        meta.get("history_capacity")
            .cloned()
            .ok_or_else(|| bad("history_capacity"))?,
    )?;
    let days = match period {
        "valid" => cfg.split.valid,
        _ => cfg.split.test,
    };
    if days.0 <= last {
        return Err(Error::Config(format!(
            "{period} period starts on day {}, not after the model's last training day {last}",
            days.0
        )));
    }
    let train = log.restrict_days(first, last).project_onto(&users, &items);
    let context = log.restrict_days(first, days.1).project_onto(&users, &items);
    let set = EvalSet::from_context(context, crate::events::perimeter_of(&train), days, capacity);
    let report = set.evaluate(&model);

    let out = OutDir::open(&common.out)?;
    let files = vec![
        out.write_daily(
            &[DailySeries {
                days: report.daily.clone(),
                ..DailySeries::default()
            }],
            cfg.ewma_alpha,
        )?,
        out.write_json(
            "report.json",
            &json!({
                "command": "eval",
                "model": model.kind(),
                "period": period,
                "days": days,
                "map_user": report.map_user,
                "map_item": report.map_item,
                "map_sym": report.map_sym,
                "user_queries": report.user_queries,
                "item_queries": report.item_queries,
                "degenerate": report.degenerate,
            }),
        )?,
    ];
    println!(
        "{} on {period}: mapSym {:.4} (user {:.4}, item {:.4})",
        model.kind().tag(),
        report.map_sym,
        report.map_user,
        report.map_item
    );
    out.write_manifest("eval", &cfg, &files)?;
    Ok(())
}

/// Writes every sweep output, plus the sliding-study files when given.
pub fn export_sweep(
    out: &OutDir,
    cfg: &ExperimentConfig,
    log: &EventLog,
    sweep: &SweepResult,
    slide: Option<&SlideResult>,
) -> Result<Vec<PathBuf>> {
    let mut files = vec![out.write_sweep(&sweep.rows())?];
    let traces: Vec<LabeledTrace> = sweep
        .cells
        .iter()
        .map(|c| LabeledTrace {
            model: c.row.model.tag().into(),
            window_days: c.row.window_days,
            epochs: c.trace.clone(),
        })
        .collect();
    files.push(out.write_trace(&traces)?);

    let mut series = Vec::new();
    let mut best_rows = Vec::new();
    for &kind in &cfg.models {
        let Some(best) = sweep.best(kind) else { continue };
        best_rows.push(best.row.clone());
        series.push(DailySeries {
            model: kind.tag().into(),
            series: format!("static_{}d", best.row.window_days),
            days: best.test_daily.clone(),
        });
        if let Some(slide) = slide {
            series.push(DailySeries {
                model: kind.tag().into(),
                series: "sliding".into(),
                days: slide
                    .days
                    .iter()
                    .filter(|d| d.model == kind)
                    .map(|d| crate::metrics::DailyMetrics {
                        day: d.day,
                        map_u: d.map_u,
                        map_i: d.map_i,
                        map_sym: d.map_sym,
                    })
                    .collect(),
            });
        }
        if let Some(model) = &best.model {
            let w = best.row.window_days;
            let window = slice_window(log, cfg.split.test.0 - 1, w).log;
            let path = out.path(&format!("model-{}.bin", kind.tag()));
            let mut meta = model_meta(&window, cfg.history_capacity(kind));
            meta["window_days"] = json!(w);
            meta["epochs"] = json!(best.row.epochs);
            model.save(&path, meta)?;
            files.push(path);
        }
    }
    files.push(out.write_daily(&series, cfg.ewma_alpha)?);
    let mut report = json!({
        "command": if slide.is_some() { "slide" } else { "sweep" },
        "sweep": sweep.rows(),
        "best_by_validation": best_rows,
        "test_slice_reads": sweep.test_reads,
    });
    if let Some(slide) = slide {
        files.push(out.write_slide(&slide.rows)?);
        files.push(out.write_slide_days(&slide.days)?);
        report["command"] = json!("slide");
        report["slide"] = json!(slide.rows);
    }
    files.push(out.write_json("report.json", &report)?);
    Ok(files)
}

fn print_sweep(sweep: &SweepResult) {
    println!(
        "{:<12} {:>6} {:>10} {:>10} {:>7}",
        "model", "window", "valid", "test", "epochs"
    );
    for r in sweep.rows() {
        println!(
            "{:<12} {:>6} {:>10.4} {:>10.4} {:>7}{}",
            r.model.tag(),
            r.window_days,
            r.valid_map_sym,
            r.test_map_sym,
            r.epochs,
            if r.truncated { "  (truncated)" } else { "" }
        );
    }
}
