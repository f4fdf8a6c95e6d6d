//! Series ingestion, chronological splitting, standardization and sliding windows.
//!
//! All slicing is 0-based and half-open. A [`SeriesFrame`] may carry a number of
//! leading *context* rows borrowed from the preceding split segment; those rows
//! may feed window inputs but never appear as targets.

use std::collections::HashSet;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("file contains no data rows")]
    EmptyFile,
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("non-numeric cell at row {row}, column `{column}`: {value:?}")]
    NonNumericCell {
        row: usize,
        column: String,
        value: String,
    },
    #[error("duplicate channel name `{0}`")]
    DuplicateChannel(String),
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error("invalid split ratios: {0}")]
    InvalidSplit(String),
    #[error("split produced an empty {0} segment")]
    DegenerateSplit(&'static str),
    #[error("channel `{0}` has zero variance on the training segment")]
    ZeroVariance(String),
    #[error("channel count mismatch: expected {expected}, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
}

/// A time-ordered `(n_steps × C)` matrix of finite observations.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesFrame {
    values: Array2<f64>,
    channel_names: Vec<String>,
    timestamps: Option<Vec<String>>,
    context_rows: usize,
}

impl SeriesFrame {
    pub fn new(
        values: Array2<f64>,
        channel_names: Vec<String>,
        timestamps: Option<Vec<String>>,
    ) -> Result<Self, DataError> {
        let (n, c) = values.dim();
        if n == 0 || c == 0 {
            return Err(DataError::InvalidFrame(format!("shape ({n}, {c}) is empty")));
        }
        if channel_names.len() != c {
            return Err(DataError::InvalidFrame(format!(
                "{} channel names for {c} columns",
                channel_names.len()
            )));
        }
        let mut seen = HashSet::new();
        for name in &channel_names {
            if !seen.insert(name.as_str()) {
                return Err(DataError::DuplicateChannel(name.clone()));
            }
        }
        if let Some(ts) = &timestamps {
            if ts.len() != n {
                return Err(DataError::InvalidFrame(format!(
                    "{} timestamps for {n} rows",
                    ts.len()
                )));
            }
        }
        if let Some(((row, col), v)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(DataError::NonNumericCell {
                row,
                column: channel_names[col].clone(),
                value: v.to_string(),
            });
        }
        Ok(Self {
            values,
            channel_names,
            timestamps,
            context_rows: 0,
        })
    }

    /// Builds a frame with generated channel names `c0, c1, ...`.
    pub fn from_values(values: Array2<f64>) -> Result<Self, DataError> {
        let names = (0..values.ncols()).map(|c| format!("c{c}")).collect();
        Self::new(values, names, None)
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn n_steps(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_channels(&self) -> usize {
        self.values.ncols()
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn timestamps(&self) -> Option<&[String]> {
        self.timestamps.as_deref()
    }

    /// Number of leading rows borrowed from a preceding segment (never targets).
    pub fn context_rows(&self) -> usize {
        self.context_rows
    }

    /// Rows `[start, end)` as a new frame with no context rows.
    pub fn slice_rows(&self, start: usize, end: usize) -> SeriesFrame {
        SeriesFrame {
            values: self.values.slice(s![start..end, ..]).to_owned(),
            channel_names: self.channel_names.clone(),
            timestamps: self.timestamps.as_ref().map(|t| t[start..end].to_vec()),
            context_rows: 0,
        }
    }

    /// The first `n` rows (or the whole frame if shorter).
    pub fn head(&self, n: usize) -> SeriesFrame {
        let mut out = self.slice_rows(0, n.min(self.n_steps()));
        out.context_rows = self.context_rows.min(out.n_steps());
        out
    }

    /// The frame without its borrowed context rows.
    pub fn nominal(&self) -> SeriesFrame {
        self.slice_rows(self.context_rows, self.n_steps())
    }

    fn with_values(&self, values: Array2<f64>) -> SeriesFrame {
        SeriesFrame {
            values,
            channel_names: self.channel_names.clone(),
            timestamps: self.timestamps.clone(),
            context_rows: self.context_rows,
        }
    }

    /// Number of windows [`iter_windows`] yields at stride 1, honouring context rows.
    pub fn window_count(&self, input_len: usize, output_len: usize) -> usize {
        let skip = self.context_rows.saturating_sub(input_len);
        window_count(self.n_steps(), input_len, output_len).saturating_sub(skip)
    }
}

/// Column selection for [`load_csv`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    /// Column holding opaque timestamp labels; excluded from the channels.
    #[serde(default)]
    pub timestamp_column: Option<String>,
    /// Channels to keep, in order. `None` keeps every non-timestamp column.
    #[serde(default)]
    pub channels: Option<Vec<String>>,
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<SeriesFrame, DataError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<SeriesFrame, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };

    let ts_idx = schema.timestamp_column.as_deref().map(find).transpose()?;
    let channel_idx: Vec<usize> = match &schema.channels {
        Some(names) => names.iter().map(|n| find(n)).collect::<Result<_, _>>()?,
        None => (0..headers.len()).filter(|i| Some(*i) != ts_idx).collect(),
    };
    if channel_idx.is_empty() {
        return Err(DataError::InvalidFrame("no channel columns selected".into()));
    }

    let mut flat = Vec::new();
    let mut stamps = ts_idx.map(|_| Vec::new());
    let mut n_rows = 0;
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        for &ci in &channel_idx {
            let cell = record.get(ci).unwrap_or("").trim();
            let value: f64 = cell.parse().map_err(|_| DataError::NonNumericCell {
                row,
                column: headers[ci].clone(),
                value: cell.to_string(),
            })?;
            if !value.is_finite() {
                return Err(DataError::NonNumericCell {
                    row,
                    column: headers[ci].clone(),
                    value: cell.to_string(),
                });
            }
            flat.push(value);
        }
        if let (Some(ti), Some(stamps)) = (ts_idx, stamps.as_mut()) {
            stamps.push(record.get(ti).unwrap_or("").to_string());
        }
        n_rows += 1;
    }
    if n_rows == 0 {
        return Err(DataError::EmptyFile);
    }
    let values = Array2::from_shape_vec((n_rows, channel_idx.len()), flat)
        .expect("row-major buffer matches shape");
    let names = channel_idx.iter().map(|&i| headers[i].clone()).collect();
    SeriesFrame::new(values, names, stamps)
}

/// Train/validation/test proportions as integer ratio parts, e.g. `6:2:2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratios: [u32; 3],
    #[serde(default = "default_true")]
    pub lookback_overlap: bool,
}

fn default_true() -> bool {
    true
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            ratios: [6, 2, 2],
            lookback_overlap: true,
        }
    }
}

impl SplitSpec {
    pub fn new(train: u32, val: u32, test: u32) -> Self {
        Self {
            ratios: [train, val, test],
            lookback_overlap: true,
        }
    }

    pub fn with_overlap(mut self, overlap: bool) -> Self {
        self.lookback_overlap = overlap;
        self
    }

    /// Row boundaries `(train_end, val_end)` from flooring cumulative fractions.
    pub fn borders(&self, n_steps: usize) -> Result<(usize, usize), DataError> {
        if self.ratios.contains(&0) {
            return Err(DataError::InvalidSplit(format!(
                "ratios must be positive, got {:?}",
                self.ratios
            )));
        }
        let total: u64 = self.ratios.iter().map(|&r| r as u64).sum();
        let n = n_steps as u64;
        let b1 = n * self.ratios[0] as u64 / total;
        let b2 = n * (self.ratios[0] + self.ratios[1]) as u64 / total;
        Ok((b1 as usize, b2 as usize))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: SeriesFrame,
    pub val: SeriesFrame,
    pub test: SeriesFrame,
}

/// Splits a frame into contiguous train/val/test segments.
///
/// With `lookback_overlap`, the val and test segments get up to `context_len`
/// leading rows borrowed from the preceding segment.
pub fn chronological_split(
    frame: &SeriesFrame,
    spec: &SplitSpec,
    context_len: usize,
) -> Result<Split, DataError> {
    let n = frame.n_steps();
    let (b1, b2) = spec.borders(n)?;
    if b1 == 0 {
        return Err(DataError::DegenerateSplit("train"));
    }
    if b2 == b1 {
        return Err(DataError::DegenerateSplit("validation"));
    }
    if n == b2 {
        return Err(DataError::DegenerateSplit("test"));
    }
    let segment = |start: usize, end: usize| {
        let ctx = if spec.lookback_overlap {
            context_len.min(start)
        } else {
            0
        };
        let mut seg = frame.slice_rows(start - ctx, end);
        seg.context_rows = ctx;
        seg
    };
    Ok(Split {
        train: frame.slice_rows(0, b1),
        val: segment(b1, b2),
        test: segment(b2, n),
    })
}

/// Per-channel z-score statistics fitted on the training segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizeStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Fits mean and population standard deviation per channel.
pub fn fit_standardize(train: &SeriesFrame) -> Result<StandardizeStats, DataError> {
    let values = train.values.slice(s![train.context_rows.., ..]);
    let n = values.nrows() as f64;
    let mean: Array1<f64> = values.sum_axis(Axis(0)) / n;
    let mut std = Vec::with_capacity(mean.len());
    for (c, col) in values.axis_iter(Axis(1)).enumerate() {
        let var = col.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        if !(sd > 0.0) {
            return Err(DataError::ZeroVariance(train.channel_names[c].clone()));
        }
        std.push(sd);
    }
    Ok(StandardizeStats {
        mean: mean.to_vec(),
        std,
    })
}

impl StandardizeStats {
    fn check(&self, frame: &SeriesFrame) -> Result<(), DataError> {
        if self.mean.len() != frame.n_channels() {
            return Err(DataError::ChannelMismatch {
                expected: self.mean.len(),
                actual: frame.n_channels(),
            });
        }
        Ok(())
    }

    pub fn apply_values(&self, values: &mut Array2<f64>) {
        for mut row in values.rows_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
    }

    pub fn invert_values(&self, values: &mut Array2<f64>) {
        for mut row in values.rows_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[c] + self.mean[c];
            }
        }
    }
}

pub fn apply_standardize(
    frame: &SeriesFrame,
    stats: &StandardizeStats,
) -> Result<SeriesFrame, DataError> {
    stats.check(frame)?;
    let mut values = frame.values.clone();
    stats.apply_values(&mut values);
    Ok(frame.with_values(values))
}

pub fn invert_standardize(
    frame: &SeriesFrame,
    stats: &StandardizeStats,
) -> Result<SeriesFrame, DataError> {
    stats.check(frame)?;
    let mut values = frame.values.clone();
    stats.invert_values(&mut values);
    Ok(frame.with_values(values))
}

/// Number of `(input_len, output_len)` sliding windows over `n_steps` rows.
pub fn window_count(n_steps: usize, input_len: usize, output_len: usize) -> usize {
    (n_steps + 1).saturating_sub(input_len + output_len)
}

/// One supervised pair: `x` is `T × C`, `y` is `L × C`, `y` starts at `origin_index + T`.
#[derive(Debug, Clone, Copy)]
pub struct WindowSample<'a> {
    pub x: ArrayView2<'a, f64>,
    pub y: ArrayView2<'a, f64>,
    pub origin_index: usize,
}

/// Lazily yields windows at origins `first, first + stride, ...`, where `first`
/// is the smallest origin whose targets clear the frame's context rows.
pub fn iter_windows(
    frame: &SeriesFrame,
    input_len: usize,
    output_len: usize,
    stride: usize,
) -> impl Iterator<Item = WindowSample<'_>> + '_ {
    assert!(stride >= 1, "stride must be at least 1");
    window_origins(frame, input_len, output_len, stride).map(move |o| window_at(frame, o, input_len, output_len))
}

/// Window origins in enumeration order (see [`iter_windows`]).
pub fn window_origins(
    frame: &SeriesFrame,
    input_len: usize,
    output_len: usize,
    stride: usize,
) -> std::iter::StepBy<std::ops::Range<usize>> {
    assert!(stride >= 1, "stride must be at least 1");
    let first = frame.context_rows.saturating_sub(input_len);
    let end = window_count(frame.n_steps(), input_len, output_len).max(first);
    (first..end).step_by(stride)
}

pub fn window_at(
    frame: &SeriesFrame,
    origin: usize,
    input_len: usize,
    output_len: usize,
) -> WindowSample<'_> {
    let split = origin + input_len;
    WindowSample {
        x: frame.values.slice(s![origin..split, ..]),
        y: frame.values.slice(s![split..split + output_len, ..]),
        origin_index: origin,
    }
}
