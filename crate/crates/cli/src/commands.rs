use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use evoforecast::data::StandardizeStats;
use evoforecast::eval::{parse_report_csv, report_csv, win_summary_csv, WinComparison};
use evoforecast::report::{fmt_sig, write_atomic};
use evoforecast::rollout::RolloutError;
use evoforecast::{
    analyze_training, apply_standardize, chronological_split, default_partition, fit_standardize, load_csv, rollout,
    Checkpoint, CsvSchema, Forecaster, SegmentPartition, SeriesFrame,
};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{Loaded, RunConfig};
use crate::CliError;

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn write(dir: &Path, name: &str, contents: &[u8]) -> Result<(), CliError> {
    let path = dir.join(name);
    write_atomic(&path, contents).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

/// Config with command-line overrides applied.
fn load(config: &Path, output: Option<PathBuf>, seed: Option<u64>) -> Result<Loaded, CliError> {
    let mut loaded = RunConfig::load(config)?;
    if let Some(dir) = output {
        loaded.config.output_dir = dir;
    }
    if let Some(seed) = seed {
        loaded.config.seed = seed;
    }
    create_dir(&loaded.config.output_dir)?;
    Ok(loaded)
}

/// The only output that varies between identical runs.
fn write_meta(loaded: &Loaded, command: &str, started: Instant) -> Result<(), CliError> {
    let finished = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let meta = json!({
        "command": command,
        "config_sha256": hex_digest(&loaded.raw),
        "seed": loaded.config.seed,
        "version": env!("CARGO_PKG_VERSION"),
        "wall_time_seconds": started.elapsed().as_secs_f64(),
        "finished_unix": finished,
    });
    let text = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    write(&loaded.config.output_dir, "run_meta.json", text.as_bytes())
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn load_frame(cfg: &RunConfig) -> Result<SeriesFrame, CliError> {
    let frame = load_csv(&cfg.dataset.path, &cfg.schema()).map_err(runtime)?;
    Ok(match cfg.dataset.max_rows {
        Some(n) => frame.head(n),
        None => frame,
    })
}

/// Standardized train and validation segments plus the fitted stats.
fn prepare(cfg: &RunConfig, frame: &SeriesFrame) -> Result<(SeriesFrame, SeriesFrame, StandardizeStats), CliError> {
    let parts = chronological_split(frame, &cfg.split, cfg.model.input_len).map_err(runtime)?;
    let stats = fit_standardize(&parts.train).map_err(runtime)?;
    let train = apply_standardize(&parts.train, &stats).map_err(runtime)?;
    let val = apply_standardize(&parts.val, &stats).map_err(runtime)?;
    Ok((train, val, stats))
}

pub fn train(config: &Path, output: Option<PathBuf>, seed: Option<u64>) -> Result<(), CliError> {
    let started = Instant::now();
    let loaded = load(config, output, seed)?;
    let cfg = &loaded.config;
    let frame = load_frame(cfg)?;
    let (train_f, val_f, stats) = prepare(cfg, &frame)?;
    let model = Forecaster::build(cfg.spec(frame.n_channels())).map_err(|e| CliError::Config(e.to_string()))?;
    let (model, history) = evoforecast::train(model, &train_f, &val_f, &cfg.train_config()).map_err(runtime)?;

    let dir = &cfg.output_dir;
    let checkpoint = Checkpoint::from_model(&model).to_json().map_err(runtime)?;
    write(dir, "checkpoint.json", checkpoint.as_bytes())?;
    write(dir, "history.csv", history.to_csv().as_bytes())?;
    let stats_json = serde_json::to_string_pretty(&stats).expect("stats serialize");
    write(dir, "stats.json", stats_json.as_bytes())?;
    write_meta(&loaded, "train", started)?;
    eprintln!(
        "trained {} epochs, best epoch {} (val mse {})",
        history.epochs.len(),
        history.best_epoch,
        fmt_sig(history.best_val_mse())
    );
    Ok(())
}

pub struct PredictArgs {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub horizon: usize,
    pub timestamp_column: Option<String>,
    pub stats: Option<PathBuf>,
    pub trace: bool,
    pub output: PathBuf,
}

pub fn predict(args: PredictArgs) -> Result<(), CliError> {
    let config_err = |what: &Path, e: &dyn std::fmt::Display| CliError::Config(format!("{}: {e}", what.display()));
    if args.horizon == 0 {
        return Err(CliError::Config("horizon must be positive".into()));
    }
    let model = Checkpoint::load(&args.checkpoint)
        .and_then(Checkpoint::into_model)
        .map_err(|e| config_err(&args.checkpoint, &e))?;
    let stats: Option<StandardizeStats> = match &args.stats {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| config_err(p, &e))?;
            Some(serde_json::from_str(&text).map_err(|e| config_err(p, &e))?)
        }
        None => None,
    };
    let schema = CsvSchema {
        timestamp_column: args.timestamp_column.clone(),
        channels: None,
    };
    let input = load_csv(&args.input, &schema).map_err(|e| config_err(&args.input, &e))?;
    let (t, c) = (model.input_len(), model.channels());
    if input.n_channels() != c {
        return Err(CliError::Runtime(format!(
            "input has {} channels, checkpoint expects {c}",
            input.n_channels()
        )));
    }
    if input.n_steps() < t {
        return Err(CliError::Runtime(format!(
            "input has {} rows, the model needs at least T = {t}",
            input.n_steps()
        )));
    }
    let mut history = input.slice_rows(input.n_steps() - t, input.n_steps()).values().to_owned();
    if let Some(s) = &stats {
        if s.mean.len() != c {
            return Err(CliError::Runtime(format!("stats cover {} channels, model has {c}", s.mean.len())));
        }
        s.apply_values(&mut history);
    }

    create_dir(&args.output)?;
    let trace = match rollout(&model, history.view(), args.horizon, args.trace) {
        Ok(trace) => trace,
        Err(RolloutError::NonFiniteBlock { k, partial }) => {
            if let (true, Some(partial)) = (args.trace, partial) {
                write(&args.output, "trace.json", partial.to_json().as_bytes())?;
            }
            return Err(CliError::Runtime(format!("rollout produced non-finite values in block {k}")));
        }
        Err(e) => return Err(runtime(e)),
    };
    let mut y_hat = trace.y_hat.clone();
    if let Some(s) = &stats {
        s.invert_values(&mut y_hat);
    }
    let mut csv = input.channel_names().join(",");
    csv.push('\n');
    for row in y_hat.rows() {
        let cells: Vec<String> = row.iter().map(|v| fmt_sig(*v)).collect();
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    write(&args.output, "predictions.csv", csv.as_bytes())?;
    if args.trace {
        write(&args.output, "trace.json", trace.to_json().as_bytes())?;
    }
    Ok(())
}

pub fn sweep(
    config: &Path,
    output: Option<PathBuf>,
    seed: Option<u64>,
    stride: Option<usize>,
) -> Result<(), CliError> {
    let started = Instant::now();
    let loaded = load(config, output, seed)?;
    let cfg = &loaded.config;
    let mut grid = cfg.grid()?;
    if let Some(s) = stride {
        if s == 0 {
            return Err(CliError::Config("--stride must be positive".into()));
        }
        grid.stride = s;
    }
    let frame = load_frame(cfg)?;
    let outcome = evoforecast::sweep(
        &cfg.recipe(),
        &cfg.dataset_id(),
        &frame,
        &cfg.split,
        &grid,
        &cfg.train_config(),
    )
    .map_err(runtime)?;

    let dir = &cfg.output_dir;
    write(dir, "report.csv", report_csv(&outcome.rows).as_bytes())?;
    let mut runs = String::from("run,T,L,epochs,best_epoch,best_val_mse,error\n");
    for r in &outcome.runs {
        let (epochs, best, val) = match &r.history {
            Some(h) => (h.epochs.len().to_string(), h.best_epoch.to_string(), fmt_sig(h.best_val_mse())),
            None => (String::new(), String::new(), String::new()),
        };
        let error = r.error.as_deref().unwrap_or("").replace([',', '\n'], " ");
        let _ = writeln!(runs, "{},{},{},{epochs},{best},{val},{error}", r.id, r.input_len, r.output_len);
    }
    write(dir, "runs.csv", runs.as_bytes())?;
    write_meta(&loaded, "sweep", started)?;
    let failed = outcome.runs.iter().filter(|r| r.error.is_some()).count();
    eprintln!("{} report rows from {} training runs ({failed} failed)", outcome.rows.len(), outcome.runs.len());
    Ok(())
}

pub fn grad(config: &Path, output: Option<PathBuf>, seed: Option<u64>) -> Result<(), CliError> {
    let started = Instant::now();
    let loaded = load(config, output, seed)?;
    let cfg = &loaded.config;
    let section = cfg.grad.clone().unwrap_or_default();
    if cfg.grad.is_some() && !section.enabled {
        return Err(CliError::Config("gradient analysis is disabled in this config".into()));
    }
    let l = cfg.model.output_len;
    let partition = match &section.boundaries {
        Some(b) => SegmentPartition::from_boundaries(b, true).map_err(|e| CliError::Config(e.to_string()))?,
        None => default_partition(l),
    };
    if partition.output_len() != l {
        return Err(CliError::Config(format!(
            "grad.boundaries end at {}, model L is {l}",
            partition.output_len()
        )));
    }
    let frame = load_frame(cfg)?;
    let (train_f, val_f, _) = prepare(cfg, &frame)?;
    let stats = analyze_training(
        &cfg.spec(frame.n_channels()),
        &train_f,
        &val_f,
        &cfg.train_config(),
        &partition,
    )
    .map_err(runtime)?;

    let dir = &cfg.output_dir;
    write(dir, "similarity.csv", stats.similarity_csv().as_bytes())?;
    write(dir, "dynamics.csv", stats.dynamics_csv().as_bytes())?;
    write(dir, "norm_ratio.csv", stats.norm_ratio_csv().as_bytes())?;
    write(dir, "history.csv", stats.history.to_csv().as_bytes())?;
    write_meta(&loaded, "grad", started)?;
    eprintln!(
        "{} snapshots, max decomposition residual {}",
        stats.snapshots.len(),
        fmt_sig(stats.max_decomposition_residual())
    );
    Ok(())
}

pub fn report(reports: &[PathBuf], comparisons: &Path, output: &Path) -> Result<(), CliError> {
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())));
    let mut records = Vec::new();
    for path in reports {
        let rows = parse_report_csv(&read(path)?).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        records.extend(rows.iter().filter_map(|r| r.record()));
    }
    let specs: Vec<WinComparison> = serde_json::from_str(&read(comparisons)?)
        .map_err(|e| CliError::Config(format!("{}: {e}", comparisons.display())))?;
    let summaries = specs
        .iter()
        .map(|c| evoforecast::win_ratio(&records, c))
        .collect::<Result<Vec<_>, _>>()
        .map_err(runtime)?;
    create_dir(output)?;
    write(output, "win_summary.csv", win_summary_csv(&summaries).as_bytes())
}
