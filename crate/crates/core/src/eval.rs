//! MSE/MAE under direct (DF) and evolutionary (EF) inference, grid sweeps,
//! win-ratio comparisons and the extreme-horizon protocol.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    apply_standardize, chronological_split, fit_standardize, window_at, window_origins,
    DataError, SeriesFrame, SplitSpec,
};
use crate::model::{Forecaster, ForecasterSpec, ModelError, ModelKind, RowBatch};
use crate::report::{fmt_opt, fmt_sig};
use crate::rollout::{rollout_rows, RolloutError};
use crate::train::{train, TrainConfig, TrainError, TrainHistory};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("test frame yields no (T={input_len}, H={horizon}) windows")]
    NoTestWindows { input_len: usize, horizon: usize },
    #[error("DF inference needs L >= H (got L={output_len}, H={horizon})")]
    ModeMismatch { output_len: usize, horizon: usize },
    #[error("non-finite values in block {k}")]
    NonFiniteBlock { k: usize },
    #[error("cell (model={model}, dataset={dataset}, H={horizon}) is missing its {side} record")]
    UnmatchedCell {
        model: String,
        dataset: String,
        horizon: usize,
        side: &'static str,
    },
    #[error("invalid report: {0}")]
    InvalidReport(String),
    #[error(transparent)]
    Rollout(RolloutError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

impl From<RolloutError> for EvalError {
    fn from(e: RolloutError) -> Self {
        match e {
            RolloutError::NonFiniteBlock { k, .. } => EvalError::NonFiniteBlock { k },
            RolloutError::Model(m) => EvalError::Model(m),
            other => EvalError::Rollout(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "DF", alias = "df")]
    Df,
    #[serde(rename = "EF", alias = "ef")]
    Ef,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Df => "DF",
            Mode::Ef => "EF",
        }
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "DF" => Ok(Mode::Df),
            "EF" => Ok(Mode::Ef),
            _ => Err(format!("unknown mode `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub mode: Mode,
    #[serde(rename = "T")]
    pub input_len: usize,
    #[serde(rename = "L")]
    pub output_len: usize,
    #[serde(rename = "H")]
    pub horizon: usize,
    #[serde(default = "one")]
    pub stride: usize,
}

fn one() -> usize {
    1
}

impl EvalConfig {
    pub fn new(mode: Mode, input_len: usize, output_len: usize, horizon: usize) -> Self {
        Self {
            mode,
            input_len,
            output_len,
            horizon,
            stride: 1,
        }
    }

    pub fn for_model(model: &Forecaster, mode: Mode, horizon: usize) -> Self {
        Self::new(mode, model.input_len(), model.output_len(), horizon)
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub model: String,
    pub dataset: String,
    #[serde(rename = "T")]
    pub input_len: usize,
    #[serde(rename = "L")]
    pub output_len: usize,
    #[serde(rename = "H")]
    pub horizon: usize,
    pub mode: Mode,
    pub mse: f64,
    pub mae: f64,
    pub n_windows: usize,
}

const EVAL_CHUNK: usize = 256;

/// Scores the model on every `(T, H)` window of `test` at the configured stride.
pub fn evaluate(
    model: &Forecaster,
    test: &SeriesFrame,
    cfg: &EvalConfig,
    model_id: &str,
    dataset_id: &str,
) -> Result<EvalRecord, EvalError> {
    let (t, l, h) = (cfg.input_len, cfg.output_len, cfg.horizon);
    if (t, l) != (model.input_len(), model.output_len()) {
        return Err(ModelError::ShapeMismatch {
            expected: (model.input_len(), model.output_len()),
            actual: (t, l),
        }
        .into());
    }
    if cfg.mode == Mode::Df && l < h {
        return Err(EvalError::ModeMismatch {
            output_len: l,
            horizon: h,
        });
    }
    let origins: Vec<usize> = window_origins(test, t, h, cfg.stride.max(1)).collect();
    if origins.is_empty() {
        return Err(EvalError::NoTestWindows {
            input_len: t,
            horizon: h,
        });
    }
    let (mut se, mut ae, mut count) = (0.0, 0.0, 0usize);
    for chunk in origins.chunks(EVAL_CHUNK) {
        let samples: Vec<_> = chunk.iter().map(|&o| window_at(test, o, t, h)).collect();
        let batch = RowBatch::from_samples(&samples)?;
        // with L >= H this is a single truncated forward pass, i.e. DF
        let pred = rollout_rows(model, batch.x.view(), batch.samples, h)?;
        for (p, y) in pred.iter().zip(batch.y.iter()) {
            let d = p - y;
            se += d * d;
            ae += d.abs();
        }
        count += pred.len();
    }
    Ok(EvalRecord {
        model: model_id.to_string(),
        dataset: dataset_id.to_string(),
        input_len: t,
        output_len: l,
        horizon: h,
        mode: cfg.mode,
        mse: se / count as f64,
        mae: ae / count as f64,
        n_windows: origins.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    ModeMismatch,
    HorizonExceedsData,
    NonFiniteBlock,
    TrainFailed,
}

impl CellStatus {
    pub fn name(self) -> &'static str {
        match self {
            CellStatus::Ok => "ok",
            CellStatus::ModeMismatch => "mode_mismatch",
            CellStatus::HorizonExceedsData => "horizon_exceeds_data",
            CellStatus::NonFiniteBlock => "non_finite_block",
            CellStatus::TrainFailed => "train_failed",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [
            CellStatus::Ok,
            CellStatus::ModeMismatch,
            CellStatus::HorizonExceedsData,
            CellStatus::NonFiniteBlock,
            CellStatus::TrainFailed,
        ]
        .into_iter()
        .find(|c| c.name() == s)
    }

    fn of_error(e: &EvalError) -> Option<Self> {
        match e {
            EvalError::ModeMismatch { .. } => Some(CellStatus::ModeMismatch),
            EvalError::NoTestWindows { .. } => Some(CellStatus::HorizonExceedsData),
            EvalError::NonFiniteBlock { .. } => Some(CellStatus::NonFiniteBlock),
            _ => None,
        }
    }
}

/// One row of the report CSV; metrics are absent for failed cells.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub dataset: String,
    pub input_len: usize,
    pub output_len: usize,
    pub horizon: usize,
    pub mode: Mode,
    pub status: CellStatus,
    pub mse: Option<f64>,
    pub mae: Option<f64>,
    pub n_windows: usize,
    /// Index of the training run that produced the evaluated model.
    pub train_run: Option<usize>,
}

impl ReportRow {
    fn failed(model: &str, dataset: &str, cfg: &EvalConfig, status: CellStatus) -> Self {
        Self {
            model: model.to_string(),
            dataset: dataset.to_string(),
            input_len: cfg.input_len,
            output_len: cfg.output_len,
            horizon: cfg.horizon,
            mode: cfg.mode,
            status,
            mse: None,
            mae: None,
            n_windows: 0,
            train_run: None,
        }
    }

    pub fn record(&self) -> Option<EvalRecord> {
        match (self.status, self.mse, self.mae) {
            (CellStatus::Ok, Some(mse), Some(mae)) => Some(EvalRecord {
                model: self.model.clone(),
                dataset: self.dataset.clone(),
                input_len: self.input_len,
                output_len: self.output_len,
                horizon: self.horizon,
                mode: self.mode,
                mse,
                mae,
                n_windows: self.n_windows,
            }),
            _ => None,
        }
    }

    fn sort_key(&self) -> (usize, usize, usize, Mode) {
        (self.input_len, self.output_len, self.horizon, self.mode)
    }
}

impl From<EvalRecord> for ReportRow {
    fn from(r: EvalRecord) -> Self {
        Self {
            model: r.model,
            dataset: r.dataset,
            input_len: r.input_len,
            output_len: r.output_len,
            horizon: r.horizon,
            mode: r.mode,
            status: CellStatus::Ok,
            mse: Some(r.mse),
            mae: Some(r.mae),
            n_windows: r.n_windows,
            train_run: None,
        }
    }
}

fn evaluate_cell(
    model: &Forecaster,
    test: &SeriesFrame,
    cfg: &EvalConfig,
    model_id: &str,
    dataset_id: &str,
) -> Result<ReportRow, EvalError> {
    match evaluate(model, test, cfg, model_id, dataset_id) {
        Ok(rec) => Ok(rec.into()),
        Err(e) => match CellStatus::of_error(&e) {
            Some(status) => Ok(ReportRow::failed(model_id, dataset_id, cfg, status)),
            None => Err(e),
        },
    }
}

pub const REPORT_HEADER: &str = "model,dataset,T,L,H,mode,mse,mae,n_windows,status";

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.model,
            r.dataset,
            r.input_len,
            r.output_len,
            r.horizon,
            r.mode.name(),
            fmt_opt(r.mse),
            fmt_opt(r.mae),
            r.n_windows,
            r.status.name()
        );
    }
    out
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>, EvalError> {
    let bad = |m: String| EvalError::InvalidReport(m);
    let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| bad(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.join(",") != REPORT_HEADER {
        return Err(bad(format!("unexpected header `{}`", header.join(","))));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let field = |j: usize| rec.get(j).unwrap_or("").trim();
        let int = |j: usize| {
            field(j)
                .parse::<usize>()
                .map_err(|_| bad(format!("row {i}: bad integer `{}`", field(j))))
        };
        let real = |j: usize| -> Result<Option<f64>, EvalError> {
            let f = field(j);
            if f.is_empty() {
                Ok(None)
            } else {
                f.parse::<f64>()
                    .map(Some)
                    .map_err(|_| bad(format!("row {i}: bad real `{f}`")))
            }
        };
        rows.push(ReportRow {
            model: field(0).to_string(),
            dataset: field(1).to_string(),
            input_len: int(2)?,
            output_len: int(3)?,
            horizon: int(4)?,
            mode: field(5).parse().map_err(bad)?,
            mse: real(6)?,
            mae: real(7)?,
            n_windows: int(8)?,
            status: CellStatus::parse(field(9))
                .ok_or_else(|| bad(format!("row {i}: bad status `{}`", field(9))))?,
            train_run: None,
        });
    }
    Ok(rows)
}

/// Model family and hyperparameters; `T`, `L`, `C` are filled per sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecipe {
    pub kind: ModelKind,
    #[serde(default = "one")]
    pub period: usize,
    #[serde(default)]
    pub per_channel: bool,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_kernel() -> usize {
    25
}
fn default_hidden() -> usize {
    128
}

impl ModelRecipe {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            period: 1,
            per_channel: false,
            kernel: default_kernel(),
            hidden: default_hidden(),
            seed: 0,
        }
    }

    pub fn spec(&self, input_len: usize, output_len: usize, channels: usize) -> ForecasterSpec {
        ForecasterSpec {
            kind: self.kind,
            input_len,
            output_len,
            channels,
            period: self.period,
            per_channel: self.per_channel,
            kernel: self.kernel,
            hidden: self.hidden,
            seed: self.seed,
        }
    }

    pub fn from_spec(spec: &ForecasterSpec) -> Self {
        Self {
            kind: spec.kind,
            period: spec.period,
            per_channel: spec.per_channel,
            kernel: spec.kernel,
            hidden: spec.hidden,
            seed: spec.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    #[serde(rename = "T")]
    pub input_lens: Vec<usize>,
    #[serde(rename = "L")]
    pub output_lens: Vec<usize>,
    #[serde(rename = "H")]
    pub horizons: Vec<usize>,
    pub modes: Vec<Mode>,
    #[serde(default = "one")]
    pub stride: usize,
}

impl SweepGrid {
    pub fn cells(&self) -> usize {
        self.input_lens.len() * self.output_lens.len() * self.horizons.len() * self.modes.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRun {
    pub id: usize,
    pub input_len: usize,
    pub output_len: usize,
    pub history: Option<TrainHistory>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    /// Sorted by `(T, L, H, mode)`.
    pub rows: Vec<ReportRow>,
    pub runs: Vec<TrainingRun>,
}

impl SweepOutcome {
    pub fn records(&self) -> Vec<EvalRecord> {
        self.rows.iter().filter_map(ReportRow::record).collect()
    }
}

/// Splits and standardizes `frame`, trains one model per `(T, L)` and scores
/// it at every `(H, mode)` of the grid. Failed cells are recorded.
pub fn sweep(
    recipe: &ModelRecipe,
    dataset_id: &str,
    frame: &SeriesFrame,
    split: &SplitSpec,
    grid: &SweepGrid,
    train_cfg: &TrainConfig,
) -> Result<SweepOutcome, EvalError> {
    let max_t = grid.input_lens.iter().copied().max().unwrap_or(0);
    let parts = chronological_split(frame, split, max_t)?;
    let stats = fit_standardize(&parts.train)?;
    let train_f = apply_standardize(&parts.train, &stats)?;
    let val_f = apply_standardize(&parts.val, &stats)?;
    let test_f = apply_standardize(&parts.test, &stats)?;

    let pairs: Vec<(usize, usize)> = grid
        .input_lens
        .iter()
        .flat_map(|&t| grid.output_lens.iter().map(move |&l| (t, l)))
        .collect();
    let model_id = recipe.kind.name();
    let cells: Vec<(TrainingRun, Vec<ReportRow>)> = pairs
        .par_iter()
        .enumerate()
        .map(|(id, &(t, l))| {
            let spec = recipe.spec(t, l, frame.n_channels());
            let trained = Forecaster::build(spec)
                .map_err(TrainError::from)
                .and_then(|m| train(m, &train_f, &val_f, train_cfg));
            let mut rows = Vec::new();
            let run = match trained {
                Ok((model, history)) => {
                    for &h in &grid.horizons {
                        for &mode in &grid.modes {
                            let cfg = EvalConfig::new(mode, t, l, h).with_stride(grid.stride);
                            let mut row = evaluate_cell(&model, &test_f, &cfg, model_id, dataset_id)?;
                            row.train_run = Some(id);
                            rows.push(row);
                        }
                    }
                    TrainingRun {
                        id,
                        input_len: t,
                        output_len: l,
                        history: Some(history),
                        error: None,
                    }
                }
                Err(e) => {
                    for &h in &grid.horizons {
                        for &mode in &grid.modes {
                            let cfg = EvalConfig::new(mode, t, l, h);
                            rows.push(ReportRow::failed(model_id, dataset_id, &cfg, CellStatus::TrainFailed));
                        }
                    }
                    TrainingRun {
                        id,
                        input_len: t,
                        output_len: l,
                        history: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            Ok((run, rows))
        })
        .collect::<Result<_, EvalError>>()?;

    let mut runs = Vec::with_capacity(cells.len());
    let mut rows = Vec::new();
    for (run, r) in cells {
        runs.push(run);
        rows.extend(r);
    }
    rows.sort_by_key(ReportRow::sort_key);
    Ok(SweepOutcome { rows, runs })
}

/// EF evaluation at each horizon; horizons without windows or with diverging
/// rollouts are recorded with their status and the series continues.
pub fn extreme_horizon_eval(
    model: &Forecaster,
    test: &SeriesFrame,
    horizons: &[usize],
    model_id: &str,
    dataset_id: &str,
) -> Result<Vec<ReportRow>, EvalError> {
    horizons
        .iter()
        .map(|&h| {
            let cfg = EvalConfig::for_model(model, Mode::Ef, h);
            evaluate_cell(model, test, &cfg, model_id, dataset_id)
        })
        .collect()
}

/// Which `L` values a selector accepts, relative to the cell's `H`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputLenRule {
    Any,
    EqualsH,
    DiffersFromH,
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordSelector {
    pub mode: Mode,
    #[serde(default = "any_l")]
    pub output_len: OutputLenRule,
    #[serde(default, rename = "T")]
    pub input_len: Option<usize>,
}

fn any_l() -> OutputLenRule {
    OutputLenRule::Any
}

impl RecordSelector {
    pub fn matches(&self, r: &EvalRecord) -> bool {
        let l_ok = match self.output_len {
            OutputLenRule::Any => true,
            OutputLenRule::EqualsH => r.output_len == r.horizon,
            OutputLenRule::DiffersFromH => r.output_len != r.horizon,
            OutputLenRule::Fixed(l) => r.output_len == l,
        };
        r.mode == self.mode && l_ok && self.input_len.is_none_or(|t| r.input_len == t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieRule {
    LeftWinsTies,
    RightWinsTies,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinComparison {
    pub name: String,
    pub left: RecordSelector,
    pub right: RecordSelector,
    #[serde(default = "left_wins")]
    pub tie_rule: TieRule,
}

fn left_wins() -> TieRule {
    TieRule::LeftWinsTies
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinSummary {
    pub name: String,
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
    pub win_ratio: f64,
}

/// Compares two selections over matched `(model, dataset, H)` cells and both
/// metrics. When several records on one side match a cell, its best value is used.
pub fn win_ratio(records: &[EvalRecord], cmp: &WinComparison) -> Result<WinSummary, EvalError> {
    type Cell = (String, String, usize);
    let collect = |sel: &RecordSelector| {
        let mut best: BTreeMap<Cell, (f64, f64)> = BTreeMap::new();
        for r in records.iter().filter(|r| sel.matches(r)) {
            let e = best
                .entry((r.model.clone(), r.dataset.clone(), r.horizon))
                .or_insert((f64::INFINITY, f64::INFINITY));
            e.0 = e.0.min(r.mse);
            e.1 = e.1.min(r.mae);
        }
        best
    };
    let left = collect(&cmp.left);
    let right = collect(&cmp.right);
    for (side, a, b) in [("right", &left, &right), ("left", &right, &left)] {
        if let Some((m, d, h)) = a.keys().find(|k| !b.contains_key(*k)) {
            return Err(EvalError::UnmatchedCell {
                model: m.clone(),
                dataset: d.clone(),
                horizon: *h,
                side,
            });
        }
    }
    let (mut wins, mut ties, mut losses) = (0, 0, 0);
    for (key, (l_mse, l_mae)) in &left {
        let (r_mse, r_mae) = right[key];
        for (lv, rv) in [(*l_mse, r_mse), (*l_mae, r_mae)] {
            if lv < rv {
                wins += 1;
            } else if lv == rv {
                ties += 1;
            } else {
                losses += 1;
            }
        }
    }
    let total = wins + ties + losses;
    let credited = match cmp.tie_rule {
        TieRule::LeftWinsTies => wins + ties,
        TieRule::RightWinsTies => wins,
    };
    let win_ratio = if total == 0 {
        0.0
    } else {
        credited as f64 / total as f64
    };
    Ok(WinSummary {
        name: cmp.name.clone(),
        wins,
        ties,
        losses,
        win_ratio,
    })
}

pub fn win_summary_csv(rows: &[WinSummary]) -> String {
    let mut out = String::from("comparison_name,wins,ties,losses,win_ratio\n");
    for s in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            s.name,
            s.wins,
            s.ties,
            s.losses,
            fmt_sig(s.win_ratio)
        );
    }
    out
}
