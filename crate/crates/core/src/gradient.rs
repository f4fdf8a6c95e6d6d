//! Multi-scale gradient analysis of direct (full-horizon) training.
//!
//! The output horizon is partitioned into disjoint segments. At every
//! minibatch, before the optimizer step, the analyzer evaluates each
//! segment-restricted gradient `g_s` alongside the full-horizon gradient
//! `g_all` that drives the update, and records pairwise cosine similarities and
//! the norm ratios `‖g_s‖ / ‖g_all‖`. Snapshots are aggregated globally and per
//! epoch. Zero-norm gradients yield null entries that are counted, not averaged.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SeriesFrame;
use crate::model::{Forecaster, ForecasterSpec, ModelError, ParamVector, RowBatch, SegmentSpec};
use crate::report::fmt_opt;
use crate::train::{train_observed, BatchObserver, TrainConfig, TrainError, TrainHistory};

#[derive(Debug, Error, PartialEq)]
pub enum GradError {
    #[error("gradient has zero norm")]
    ZeroNormGradient,
    #[error("full-horizon gradient has zero norm")]
    ZeroTotalGradient,
    #[error("gradient lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("model has no trainable parameters")]
    NotTrainable,
}

#[derive(Debug, Error)]
pub enum AnalyzeError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Disjoint output segments covering `[0, L)`, optionally followed by the
/// full-horizon pseudo-segment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentPartition {
    segments: Vec<SegmentSpec>,
    include_all: bool,
}

impl SegmentPartition {
    /// Partition from sorted boundaries `0 = b0 < b1 < ... < bm = L`.
    pub fn from_boundaries(boundaries: &[usize], include_all: bool) -> Result<Self, GradError> {
        if boundaries.len() < 2 || boundaries[0] != 0 {
            return Err(GradError::InvalidPartition(format!(
                "boundaries must start at 0 and contain at least two values, got {boundaries:?}"
            )));
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(GradError::InvalidPartition(format!(
                "boundaries must be strictly increasing, got {boundaries:?}"
            )));
        }
        let segments = boundaries
            .windows(2)
            .map(|w| SegmentSpec::new(w[0], w[1]))
            .collect();
        Ok(Self {
            segments,
            include_all,
        })
    }

    pub fn segments(&self) -> &[SegmentSpec] {
        &self.segments
    }
    pub fn include_all(&self) -> bool {
        self.include_all
    }
    pub fn output_len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.end)
    }

    pub fn boundaries(&self) -> Vec<usize> {
        std::iter::once(0).chain(self.segments.iter().map(|s| s.end)).collect()
    }

    /// Labels of the similarity-matrix rows: `"0..96"`, ..., then `"all"`.
    pub fn labels(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .segments
            .iter()
            .map(|s| format!("{}..{}", s.start, s.end))
            .collect();
        if self.include_all {
            out.push("all".into());
        }
        out
    }
}

/// Four segments for `L = 720` as `[0,96) [96,192) [192,336) [336,720)`,
/// near-equal quarters otherwise; always with the full-horizon pseudo-segment.
pub fn default_partition(output_len: usize) -> SegmentPartition {
    let boundaries: Vec<usize> = if output_len == 720 {
        vec![0, 96, 192, 336, 720]
    } else {
        let mut b: Vec<usize> = (0..=4).map(|i| i * output_len / 4).collect();
        b.dedup();
        b
    };
    SegmentPartition::from_boundaries(&boundaries, true).expect("valid quarters")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine_sim(g1: &[f64], g2: &[f64]) -> Result<f64, GradError> {
    if g1.len() != g2.len() {
        return Err(GradError::LengthMismatch(g1.len(), g2.len()));
    }
    let (n1, n2) = (norm(g1), norm(g2));
    if n1 == 0.0 || n2 == 0.0 {
        return Err(GradError::ZeroNormGradient);
    }
    Ok((dot(g1, g2) / (n1 * n2)).clamp(-1.0, 1.0))
}

pub fn norm_ratio(g_s: &[f64], g_all: &[f64]) -> Result<f64, GradError> {
    if g_s.len() != g_all.len() {
        return Err(GradError::LengthMismatch(g_s.len(), g_all.len()));
    }
    let total = norm(g_all);
    if total == 0.0 {
        return Err(GradError::ZeroTotalGradient);
    }
    Ok(norm(g_s) / total)
}

/// Symmetric matrix of optional similarities (null where a norm is zero).
#[derive(Debug, Clone, PartialEq)]
pub struct SimMatrix {
    n: usize,
    entries: Vec<Option<f64>>,
}

impl SimMatrix {
    /// Pairwise similarities of `grads`; the diagonal is exactly 1 for nonzero gradients.
    pub fn from_grads(grads: &[&[f64]]) -> Self {
        let n = grads.len();
        let norms: Vec<f64> = grads.iter().map(|g| norm(g)).collect();
        let mut entries = vec![None; n * n];
        for i in 0..n {
            if norms[i] > 0.0 {
                entries[i * n + i] = Some(1.0);
            }
            for j in i + 1..n {
                let v = cosine_sim(grads[i], grads[j]).ok();
                entries[i * n + j] = v;
                entries[j * n + i] = v;
            }
        }
        Self { n, entries }
    }

    pub fn size(&self) -> usize {
        self.n
    }
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.entries[i * self.n + j]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradSnapshot {
    pub epoch: usize,
    pub batch: usize,
    /// Over the partition's segments, plus `all` when included.
    pub sim: SimMatrix,
    /// `Sim(g_s, g_all)` per segment.
    pub sim_vs_all: Vec<Option<f64>>,
    /// `‖g_s‖ / ‖g_all‖` per segment.
    pub norm_ratio: Vec<Option<f64>>,
    /// Max elementwise `|Σ_s (|s|/L)·g_s − g_all|`.
    pub decomposition_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimCell {
    pub mean: Option<f64>,
    pub n_included: usize,
    pub n_excluded: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DynamicsMetric {
    SimVsAll,
    NormRatio,
}

impl DynamicsMetric {
    pub fn name(self) -> &'static str {
        match self {
            DynamicsMetric::SimVsAll => "sim_vs_all",
            DynamicsMetric::NormRatio => "norm_ratio",
        }
    }
}

/// Mean and population standard deviation over included batches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub n: usize,
    pub n_excluded: usize,
}

impl MeanStd {
    fn of(values: impl Iterator<Item = Option<f64>>) -> Self {
        let mut included = Vec::new();
        let mut n_excluded = 0;
        for v in values {
            match v {
                Some(v) => included.push(v),
                None => n_excluded += 1,
            }
        }
        let n = included.len();
        if n == 0 {
            return Self {
                mean: None,
                std: None,
                n,
                n_excluded,
            };
        }
        let mean = included.iter().sum::<f64>() / n as f64;
        let var = included.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Self {
            mean: Some(mean),
            std: Some(var.sqrt()),
            n,
            n_excluded,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub segment: usize,
    pub metric: DynamicsMetric,
    pub stat: MeanStd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradStats {
    pub partition: SegmentPartition,
    pub labels: Vec<String>,
    /// Mean similarity matrix over all snapshots.
    pub global_sim: Vec<Vec<SimCell>>,
    /// Global mean/std of the norm ratio per segment.
    pub norm_ratio_global: Vec<MeanStd>,
    /// Per (epoch, segment, metric) mean/std over that epoch's batches.
    pub per_epoch: Vec<EpochStat>,
    pub snapshots: Vec<GradSnapshot>,
    pub history: TrainHistory,
}

impl GradStats {
    pub fn aggregate(
        partition: SegmentPartition,
        snapshots: Vec<GradSnapshot>,
        history: TrainHistory,
    ) -> Self {
        let labels = partition.labels();
        let n = labels.len();
        let n_seg = partition.segments().len();
        let global_sim = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let ms = MeanStd::of(snapshots.iter().map(|s| s.sim.get(i, j)));
                        SimCell {
                            mean: ms.mean,
                            n_included: ms.n,
                            n_excluded: ms.n_excluded,
                        }
                    })
                    .collect()
            })
            .collect();
        let norm_ratio_global = (0..n_seg)
            .map(|s| MeanStd::of(snapshots.iter().map(|snap| snap.norm_ratio[s])))
            .collect();

        let mut epochs: Vec<usize> = snapshots.iter().map(|s| s.epoch).collect();
        epochs.dedup();
        let mut per_epoch = Vec::new();
        for &epoch in &epochs {
            let in_epoch: Vec<&GradSnapshot> = snapshots.iter().filter(|s| s.epoch == epoch).collect();
            for segment in 0..n_seg {
                for metric in [DynamicsMetric::SimVsAll, DynamicsMetric::NormRatio] {
                    let stat = MeanStd::of(in_epoch.iter().map(|snap| match metric {
                        DynamicsMetric::SimVsAll => snap.sim_vs_all[segment],
                        DynamicsMetric::NormRatio => snap.norm_ratio[segment],
                    }));
                    per_epoch.push(EpochStat {
                        epoch,
                        segment,
                        metric,
                        stat,
                    });
                }
            }
        }
        Self {
            partition,
            labels,
            global_sim,
            norm_ratio_global,
            per_epoch,
            snapshots,
            history,
        }
    }

    /// `row_segment,col_segment,mean_cosine,n_included,n_excluded`
    pub fn similarity_csv(&self) -> String {
        let mut out = String::from("row_segment,col_segment,mean_cosine,n_included,n_excluded\n");
        for (i, row) in self.global_sim.iter().enumerate() {
            for (j, cell) in row.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    self.labels[i],
                    self.labels[j],
                    fmt_opt(cell.mean),
                    cell.n_included,
                    cell.n_excluded
                );
            }
        }
        out
    }

    /// `epoch,segment,metric,mean,std,n_batches`
    pub fn dynamics_csv(&self) -> String {
        let mut out = String::from("epoch,segment,metric,mean,std,n_batches\n");
        for e in &self.per_epoch {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                e.epoch,
                self.labels[e.segment],
                e.metric.name(),
                fmt_opt(e.stat.mean),
                fmt_opt(e.stat.std),
                e.stat.n
            );
        }
        out
    }

    /// `segment,mean,std,n_included,n_excluded` for the global norm ratios.
    pub fn norm_ratio_csv(&self) -> String {
        let mut out = String::from("segment,mean,std,n_included,n_excluded\n");
        for (s, ms) in self.norm_ratio_global.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                self.labels[s],
                fmt_opt(ms.mean),
                fmt_opt(ms.std),
                ms.n,
                ms.n_excluded
            );
        }
        out
    }

    pub fn max_decomposition_residual(&self) -> f64 {
        self.snapshots
            .iter()
            .map(|s| s.decomposition_residual)
            .fold(0.0, f64::max)
    }
}

/// Records a [`GradSnapshot`] for every training minibatch.
pub struct GradientAnalyzer {
    partition: SegmentPartition,
    snapshots: Vec<GradSnapshot>,
}

impl GradientAnalyzer {
    pub fn new(partition: SegmentPartition) -> Self {
        Self {
            partition,
            snapshots: Vec::new(),
        }
    }

    pub fn snapshot(
        &self,
        epoch: usize,
        batch_index: usize,
        model: &Forecaster,
        batch: &RowBatch,
        full_grad: &ParamVector,
    ) -> Result<GradSnapshot, ModelError> {
        let segs = self.partition.segments();
        let grads = model.batch_loss_and_grads(batch, segs)?;
        let g_all = full_grad.values();
        let mut rows: Vec<&[f64]> = grads.iter().map(|(_, g)| g.values()).collect();
        let sim_vs_all = rows.iter().map(|g| cosine_sim(g, g_all).ok()).collect();
        let norm_ratio = rows.iter().map(|g| norm_ratio(g, g_all).ok()).collect();

        let l = model.output_len() as f64;
        let mut recomposed = vec![0.0; g_all.len()];
        for (seg, g) in segs.iter().zip(&rows) {
            let w = seg.len() as f64 / l;
            for (r, v) in recomposed.iter_mut().zip(g.iter()) {
                *r += w * v;
            }
        }
        let decomposition_residual = recomposed
            .iter()
            .zip(g_all)
            .map(|(r, g)| (r - g).abs())
            .fold(0.0, f64::max);

        if self.partition.include_all() {
            rows.push(g_all);
        }
        Ok(GradSnapshot {
            epoch,
            batch: batch_index,
            sim: SimMatrix::from_grads(&rows),
            sim_vs_all,
            norm_ratio,
            decomposition_residual,
        })
    }

    pub fn into_snapshots(self) -> Vec<GradSnapshot> {
        self.snapshots
    }
}

impl BatchObserver for GradientAnalyzer {
    fn observe(
        &mut self,
        epoch: usize,
        batch_index: usize,
        model: &Forecaster,
        batch: &RowBatch,
        full_grad: &ParamVector,
    ) -> Result<(), ModelError> {
        let snap = self.snapshot(epoch, batch_index, model, batch, full_grad)?;
        self.snapshots.push(snap);
        Ok(())
    }
}

/// Trains a fresh model from `spec` while recording segment-gradient statistics.
pub fn analyze_training(
    spec: &ForecasterSpec,
    train_frame: &SeriesFrame,
    val_frame: &SeriesFrame,
    cfg: &TrainConfig,
    partition: &SegmentPartition,
) -> Result<GradStats, AnalyzeError> {
    if partition.output_len() != spec.output_len {
        return Err(GradError::InvalidPartition(format!(
            "partition covers [0, {}), model output length is {}",
            partition.output_len(),
            spec.output_len
        ))
        .into());
    }
    let model = Forecaster::build(spec.clone())?;
    if model.num_params() == 0 {
        return Err(GradError::NotTrainable.into());
    }
    let mut analyzer = GradientAnalyzer::new(partition.clone());
    let (_, history) = train_observed(model, train_frame, val_frame, cfg, &mut analyzer)?;
    Ok(GradStats::aggregate(
        partition.clone(),
        analyzer.into_snapshots(),
        history,
    ))
}
