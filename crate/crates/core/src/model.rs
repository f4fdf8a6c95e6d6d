//! Fixed-window forecasters `R^{T×C} → R^{L×C}` with exact gradients.
//!
//! Every model is channel-independent: each channel's length-`T` history is
//! mapped to a length-`L` forecast. Internally, batches are laid out as a
//! `(C·B) × T` row matrix in channel-major order (row `c·B + b` is channel `c`
//! of sample `b`), so shared-weight models reduce to a single matrix product.

use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::WindowSample;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid forecaster spec: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("parameter length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty or out-of-range segment [{start}, {end}) for output length {len}")]
    EmptySegment { start: usize, end: usize, len: usize },
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    NaiveSeasonal,
    LinearDirect,
    DecompLinear,
    Mlp,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::NaiveSeasonal => "naive_seasonal",
            ModelKind::LinearDirect => "linear_direct",
            ModelKind::DecompLinear => "decomp_linear",
            ModelKind::Mlp => "mlp",
        }
    }
}

fn default_period() -> usize {
    1
}
fn default_kernel() -> usize {
    25
}
fn default_hidden() -> usize {
    128
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecasterSpec {
    pub kind: ModelKind,
    #[serde(rename = "T")]
    pub input_len: usize,
    #[serde(rename = "L")]
    pub output_len: usize,
    #[serde(rename = "C")]
    pub channels: usize,
    /// Season length for `NaiveSeasonal`.
    #[serde(default = "default_period")]
    pub period: usize,
    /// One weight set per channel instead of shared weights (linear kinds only).
    #[serde(default)]
    pub per_channel: bool,
    /// Moving-average width for `DecompLinear`.
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    /// Hidden width for `Mlp`.
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ForecasterSpec {
    pub fn new(kind: ModelKind, input_len: usize, output_len: usize, channels: usize) -> Self {
        Self {
            kind,
            input_len,
            output_len,
            channels,
            period: default_period(),
            per_channel: false,
            kernel: default_kernel(),
            hidden: default_hidden(),
            seed: 0,
        }
    }

    pub fn with_period(mut self, period: usize) -> Self {
        self.period = period;
        self
    }
    pub fn with_kernel(mut self, kernel: usize) -> Self {
        self.kernel = kernel;
        self
    }
    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self
    }
    pub fn with_per_channel(mut self, per_channel: bool) -> Self {
        self.per_channel = per_channel;
        self
    }
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidSpec(msg));
        if self.input_len == 0 || self.output_len == 0 || self.channels == 0 {
            return bad(format!(
                "T, L, C must be >= 1 (got {}, {}, {})",
                self.input_len, self.output_len, self.channels
            ));
        }
        match self.kind {
            ModelKind::NaiveSeasonal if self.period == 0 || self.period > self.input_len => {
                bad(format!("period {} must lie in [1, T={}]", self.period, self.input_len))
            }
            ModelKind::DecompLinear if self.kernel % 2 == 0 || self.kernel > self.input_len => bad(
                format!("kernel {} must be odd and <= T={}", self.kernel, self.input_len),
            ),
            ModelKind::Mlp if self.hidden == 0 => bad("hidden width must be >= 1".into()),
            ModelKind::Mlp if self.per_channel => {
                bad("per_channel weights are only supported by linear kinds".into())
            }
            _ => Ok(()),
        }
    }

    /// Named parameter blocks in storage order.
    pub fn layout(&self) -> Vec<ParamBlock> {
        let (t, l, h) = (self.input_len, self.output_len, self.hidden);
        let copies = if self.per_channel { self.channels } else { 1 };
        let linear = |prefix: &str| {
            let mut w = vec![l, t];
            let mut b = vec![l];
            if self.per_channel {
                w.insert(0, copies);
                b.insert(0, copies);
            }
            vec![(format!("{prefix}weight"), w), (format!("{prefix}bias"), b)]
        };
        let shapes: Vec<(String, Vec<usize>)> = match self.kind {
            ModelKind::NaiveSeasonal => Vec::new(),
            ModelKind::LinearDirect => linear(""),
            ModelKind::DecompLinear => {
                let mut v = linear("seasonal.");
                v.extend(linear("trend."));
                v
            }
            ModelKind::Mlp => vec![
                ("hidden.weight".into(), vec![h, t]),
                ("hidden.bias".into(), vec![h]),
                ("output.weight".into(), vec![l, h]),
                ("output.bias".into(), vec![l]),
            ],
        };
        let mut offset = 0;
        shapes
            .into_iter()
            .map(|(name, shape)| {
                let len: usize = shape.iter().product();
                let block = ParamBlock {
                    name,
                    range: offset..offset + len,
                    shape,
                };
                offset += len;
                block
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layout().last().map_or(0, |b| b.range.end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBlock {
    pub name: String,
    pub range: Range<usize>,
    pub shape: Vec<usize>,
}

/// Flat parameter (or gradient) vector with its block layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<ParamBlock>,
}

impl ParamVector {
    pub fn zeros(layout: Vec<ParamBlock>) -> Self {
        let n = layout.last().map_or(0, |b| b.range.end);
        Self {
            values: vec![0.0; n],
            layout,
        }
    }

    pub fn from_values(layout: Vec<ParamBlock>, values: Vec<f64>) -> Result<Self, ModelError> {
        let expected = layout.last().map_or(0, |b| b.range.end);
        if values.len() != expected {
            return Err(ModelError::LengthMismatch {
                expected,
                actual: values.len(),
            });
        }
        Ok(Self { values, layout })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
    pub fn layout(&self) -> &[ParamBlock] {
        &self.layout
    }
    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .iter()
            .find(|b| b.name == name)
            .map(|b| &self.values[b.range.clone()])
    }
    pub fn block_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout.iter().find(|b| b.name == name)?.range.clone();
        Some(&mut self.values[range])
    }
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Half-open range `[start, end)` of output steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub start: usize,
    pub end: usize,
}

impl SegmentSpec {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }
    pub fn full(len: usize) -> Self {
        Self { start: 0, end: len }
    }
    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn validate(&self, output_len: usize) -> Result<(), ModelError> {
        if self.start >= self.end || self.end > output_len {
            return Err(ModelError::EmptySegment {
                start: self.start,
                end: self.end,
                len: output_len,
            });
        }
        Ok(())
    }
}

/// A supervised batch in channel-major row layout.
#[derive(Debug, Clone)]
pub struct RowBatch {
    /// `(C·B) × T` inputs.
    pub x: Array2<f64>,
    /// `(C·B) × L` targets.
    pub y: Array2<f64>,
    pub samples: usize,
    pub channels: usize,
}

impl RowBatch {
    pub fn from_samples(samples: &[WindowSample<'_>]) -> Result<Self, ModelError> {
        let first = samples.first().ok_or(ModelError::EmptyBatch)?;
        let (t, c) = first.x.dim();
        let l = first.y.nrows();
        let b = samples.len();
        let mut x = Array2::zeros((c * b, t));
        let mut y = Array2::zeros((c * b, l));
        for (i, s) in samples.iter().enumerate() {
            if s.x.dim() != (t, c) {
                return Err(ModelError::ShapeMismatch {
                    expected: (t, c),
                    actual: s.x.dim(),
                });
            }
            if s.y.dim() != (l, c) {
                return Err(ModelError::ShapeMismatch {
                    expected: (l, c),
                    actual: s.y.dim(),
                });
            }
            for ch in 0..c {
                x.row_mut(ch * b + i).assign(&s.x.column(ch));
                y.row_mut(ch * b + i).assign(&s.y.column(ch));
            }
        }
        Ok(Self {
            x,
            y,
            samples: b,
            channels: c,
        })
    }
}

/// `T × C` matrices to channel-major `(C·B) × T` rows.
pub fn to_rows(inputs: &[ArrayView2<'_, f64>]) -> Array2<f64> {
    let b = inputs.len();
    let (t, c) = inputs.first().map_or((0, 0), |x| x.dim());
    let mut rows = Array2::zeros((c * b, t));
    for (i, x) in inputs.iter().enumerate() {
        for ch in 0..c {
            rows.row_mut(ch * b + i).assign(&x.column(ch));
        }
    }
    rows
}

/// Sample `index` of a channel-major row matrix as a `len × C` matrix.
pub fn sample_from_rows(rows: ArrayView2<'_, f64>, samples: usize, index: usize) -> Array2<f64> {
    let c = rows.nrows() / samples;
    let mut out = Array2::zeros((rows.ncols(), c));
    for ch in 0..c {
        out.column_mut(ch).assign(&rows.row(ch * samples + index));
    }
    out
}

/// Centered moving average of every row, edges padded by replication.
pub fn moving_average_rows(x: ArrayView2<'_, f64>, kernel: usize) -> Array2<f64> {
    let half = (kernel - 1) / 2;
    let t = x.ncols();
    let mut out = Array2::zeros(x.dim());
    let mut padded = vec![0.0; t + 2 * half];
    for (src, mut dst) in x.rows().into_iter().zip(out.rows_mut()) {
        let (first, last) = (src[0], src[t - 1]);
        padded[..half].fill(first);
        padded[t + half..].fill(last);
        for (p, v) in padded[half..half + t].iter_mut().zip(src.iter()) {
            *p = *v;
        }
        for (j, d) in dst.iter_mut().enumerate() {
            *d = padded[j..j + kernel].iter().sum::<f64>() / kernel as f64;
        }
    }
    out
}

/// Per-sample `(trend, seasonal)` decomposition of a `T × C` input.
pub fn decompose(x: ArrayView2<'_, f64>, kernel: usize) -> (Array2<f64>, Array2<f64>) {
    let rows = x.t();
    let trend = moving_average_rows(rows, kernel).reversed_axes();
    let seasonal = &x - &trend;
    (trend, seasonal)
}

/// Intermediate values kept from a forward pass for backpropagation.
enum ForwardCache {
    None,
    Linear,
    Decomp {
        trend: Array2<f64>,
        seasonal: Array2<f64>,
    },
    Mlp {
        hidden: Array2<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forecaster {
    spec: ForecasterSpec,
    params: ParamVector,
}

impl Forecaster {
    /// Builds a model with deterministic seeded initialization.
    pub fn build(spec: ForecasterSpec) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut params = ParamVector::zeros(spec.layout());
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let layout = params.layout.clone();
        for block in &layout {
            let bound = match spec.kind {
                ModelKind::Mlp => {
                    let fan_in = if block.name.starts_with("hidden") {
                        spec.input_len
                    } else {
                        spec.hidden
                    };
                    1.0 / (fan_in as f64).sqrt()
                }
                _ if block.name.ends_with("bias") => 0.0,
                _ => 1.0 / spec.input_len as f64,
            };
            if bound > 0.0 {
                for v in &mut params.values[block.range.clone()] {
                    *v = rng.gen_range(-bound..=bound);
                }
            }
        }
        Ok(Self { spec, params })
    }

    pub fn with_params(spec: ForecasterSpec, values: Vec<f64>) -> Result<Self, ModelError> {
        spec.validate()?;
        let params = ParamVector::from_values(spec.layout(), values)?;
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ForecasterSpec {
        &self.spec
    }
    pub fn input_len(&self) -> usize {
        self.spec.input_len
    }
    pub fn output_len(&self) -> usize {
        self.spec.output_len
    }
    pub fn channels(&self) -> usize {
        self.spec.channels
    }
    pub fn num_params(&self) -> usize {
        self.params.len()
    }
    pub fn params(&self) -> &ParamVector {
        &self.params
    }
    pub fn get_params(&self) -> ParamVector {
        self.params.clone()
    }

    pub fn set_params(&mut self, p: &ParamVector) -> Result<(), ModelError> {
        self.set_param_values(p.values())
    }

    pub fn set_param_values(&mut self, values: &[f64]) -> Result<(), ModelError> {
        if values.len() != self.params.len() {
            return Err(ModelError::LengthMismatch {
                expected: self.params.len(),
                actual: values.len(),
            });
        }
        self.params.values.copy_from_slice(values);
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params.values
    }

    pub fn zero_grad(&self) -> ParamVector {
        ParamVector::zeros(self.params.layout.clone())
    }

    /// Forecast for a single `T × C` input.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>, ModelError> {
        let expected = (self.spec.input_len, self.spec.channels);
        if x.dim() != expected {
            return Err(ModelError::ShapeMismatch {
                expected,
                actual: x.dim(),
            });
        }
        let rows = x.t();
        Ok(self.predict_rows(rows, 1).reversed_axes())
    }

    /// Forecast for a `(C·B) × T` channel-major row batch; returns `(C·B) × L`.
    pub fn predict_rows(&self, rows: ArrayView2<'_, f64>, samples: usize) -> Array2<f64> {
        self.forward(rows, samples).0
    }

    fn linear_slot(&self, prefix: &str) -> LinearSlot {
        let find = |name: String| {
            self.params
                .layout
                .iter()
                .find(|b| b.name == name)
                .map(|b| b.range.start)
                .expect("layout contains linear block")
        };
        LinearSlot {
            weight: find(format!("{prefix}weight")),
            bias: find(format!("{prefix}bias")),
            input_len: self.spec.input_len,
            output_len: self.spec.output_len,
            copies: if self.spec.per_channel {
                self.spec.channels
            } else {
                1
            },
        }
    }

    fn forward(&self, rows: ArrayView2<'_, f64>, samples: usize) -> (Array2<f64>, ForwardCache) {
        debug_assert_eq!(rows.ncols(), self.spec.input_len);
        let p = &self.params.values;
        match self.spec.kind {
            ModelKind::NaiveSeasonal => {
                let (t, period) = (self.spec.input_len, self.spec.period);
                let out = Array2::from_shape_fn((rows.nrows(), self.spec.output_len), |(r, j)| {
                    rows[[r, t - period + j % period]]
                });
                (out, ForwardCache::None)
            }
            ModelKind::LinearDirect => {
                let out = self.linear_slot("").forward(p, rows, samples);
                (out, ForwardCache::Linear)
            }
            ModelKind::DecompLinear => {
                let trend = moving_average_rows(rows, self.spec.kernel);
                let seasonal = &rows - &trend;
                let mut out = self.linear_slot("seasonal.").forward(p, seasonal.view(), samples);
                out += &self.linear_slot("trend.").forward(p, trend.view(), samples);
                (out, ForwardCache::Decomp { trend, seasonal })
            }
            ModelKind::Mlp => {
                let m = self.mlp_slots();
                let mut hidden = rows.dot(&m.w1(p).t());
                hidden += &m.b1(p);
                hidden.mapv_inplace(|v| v.max(0.0));
                let mut out = hidden.dot(&m.w2(p).t());
                out += &m.b2(p);
                (out, ForwardCache::Mlp { hidden })
            }
        }
    }

    fn mlp_slots(&self) -> MlpSlots {
        let start = |name: &str| {
            self.params
                .layout
                .iter()
                .find(|b| b.name == name)
                .map(|b| b.range.start)
                .expect("mlp layout")
        };
        MlpSlots {
            w1: start("hidden.weight"),
            b1: start("hidden.bias"),
            w2: start("output.weight"),
            b2: start("output.bias"),
            input_len: self.spec.input_len,
            hidden: self.spec.hidden,
            output_len: self.spec.output_len,
        }
    }

    fn check_batch(&self, batch: &RowBatch) -> Result<(), ModelError> {
        let expected = (self.spec.channels * batch.samples, self.spec.input_len);
        if batch.samples == 0 || batch.x.nrows() == 0 {
            return Err(ModelError::EmptyBatch);
        }
        if batch.x.dim() != expected {
            return Err(ModelError::ShapeMismatch {
                expected,
                actual: batch.x.dim(),
            });
        }
        let expected_y = (expected.0, self.spec.output_len);
        if batch.y.dim() != expected_y {
            return Err(ModelError::ShapeMismatch {
                expected: expected_y,
                actual: batch.y.dim(),
            });
        }
        Ok(())
    }

    /// Segment-restricted MSE and its exact gradient for a list of samples.
    pub fn loss_and_grad(
        &self,
        batch: &[WindowSample<'_>],
        segment: SegmentSpec,
    ) -> Result<(f64, ParamVector), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let rows = RowBatch::from_samples(batch)?;
        let mut out = self.batch_loss_and_grads(&rows, &[segment])?;
        Ok(out.pop().expect("one segment requested"))
    }

    /// Loss and gradient for each segment, sharing one forward pass.
    ///
    /// The loss for a segment is the mean squared error over samples, channels
    /// and the segment's output steps.
    pub fn batch_loss_and_grads(
        &self,
        batch: &RowBatch,
        segments: &[SegmentSpec],
    ) -> Result<Vec<(f64, ParamVector)>, ModelError> {
        self.check_batch(batch)?;
        for seg in segments {
            seg.validate(self.spec.output_len)?;
        }
        let (pred, cache) = self.forward(batch.x.view(), batch.samples);
        let residual = &pred - &batch.y;
        let n_rows = residual.nrows() as f64;
        segments
            .iter()
            .map(|seg| {
                let r = residual.slice(s![.., seg.start..seg.end]);
                let denom = n_rows * seg.len() as f64;
                let loss = r.iter().map(|v| v * v).sum::<f64>() / denom;
                let dy = r.mapv(|v| 2.0 * v / denom);
                let mut grad = self.zero_grad();
                self.backward(batch, &cache, dy.view(), *seg, &mut grad.values);
                Ok((loss, grad))
            })
            .collect()
    }

    /// Accumulates parameter gradients for output gradient `dy` on `seg` columns.
    fn backward(
        &self,
        batch: &RowBatch,
        cache: &ForwardCache,
        dy: ArrayView2<'_, f64>,
        seg: SegmentSpec,
        grad: &mut [f64],
    ) {
        let p = &self.params.values;
        match (self.spec.kind, cache) {
            (ModelKind::NaiveSeasonal, _) => {}
            (ModelKind::LinearDirect, _) => {
                self.linear_slot("")
                    .backward(batch.x.view(), dy, seg, batch.samples, grad);
            }
            (ModelKind::DecompLinear, ForwardCache::Decomp { trend, seasonal }) => {
                self.linear_slot("seasonal.")
                    .backward(seasonal.view(), dy, seg, batch.samples, grad);
                self.linear_slot("trend.")
                    .backward(trend.view(), dy, seg, batch.samples, grad);
            }
            (ModelKind::Mlp, ForwardCache::Mlp { hidden }) => {
                let m = self.mlp_slots();
                let w2_seg = m.w2(p).slice_move(s![seg.start..seg.end, ..]);
                {
                    let mut gw2 = m.w2_mut(grad);
                    let mut gw2 = gw2.slice_mut(s![seg.start..seg.end, ..]);
                    gw2 += &dy.t().dot(hidden);
                }
                {
                    let mut gb2 = m.b2_mut(grad);
                    let mut gb2 = gb2.slice_mut(s![seg.start..seg.end]);
                    gb2 += &dy.sum_axis(Axis(0));
                }
                let mut dh = dy.dot(&w2_seg);
                dh.zip_mut_with(hidden, |d, &h| {
                    if h <= 0.0 {
                        *d = 0.0;
                    }
                });
                let mut gw1 = m.w1_mut(grad);
                gw1 += &dh.t().dot(&batch.x);
                let mut gb1 = m.b1_mut(grad);
                gb1 += &dh.sum_axis(Axis(0));
            }
            _ => unreachable!("forward cache does not match model kind"),
        }
    }
}

/// Offsets of one (possibly per-channel) `W·x + b` map inside the parameter vector.
struct LinearSlot {
    weight: usize,
    bias: usize,
    input_len: usize,
    output_len: usize,
    copies: usize,
}

impl LinearSlot {
    fn weight<'a>(&self, p: &'a [f64], copy: usize) -> ArrayView2<'a, f64> {
        let n = self.output_len * self.input_len;
        let start = self.weight + copy * n;
        ArrayView2::from_shape((self.output_len, self.input_len), &p[start..start + n])
            .expect("weight block shape")
    }

    fn bias<'a>(&self, p: &'a [f64], copy: usize) -> ArrayView1<'a, f64> {
        let start = self.bias + copy * self.output_len;
        ArrayView1::from(&p[start..start + self.output_len])
    }

    /// Row range handled by weight copy `copy`.
    fn rows(&self, copy: usize, total: usize, samples: usize) -> Range<usize> {
        if self.copies == 1 {
            0..total
        } else {
            copy * samples..(copy + 1) * samples
        }
    }

    fn forward(&self, p: &[f64], x: ArrayView2<'_, f64>, samples: usize) -> Array2<f64> {
        if self.copies == 1 {
            let mut out = x.dot(&self.weight(p, 0).t());
            out += &self.bias(p, 0);
            return out;
        }
        let mut out = Array2::zeros((x.nrows(), self.output_len));
        for copy in 0..self.copies {
            let r = self.rows(copy, x.nrows(), samples);
            let mut block = out.slice_mut(s![r.clone(), ..]);
            block.assign(&x.slice(s![r, ..]).dot(&self.weight(p, copy).t()));
            block += &self.bias(p, copy);
        }
        out
    }

    fn backward(
        &self,
        x: ArrayView2<'_, f64>,
        dy: ArrayView2<'_, f64>,
        seg: SegmentSpec,
        samples: usize,
        grad: &mut [f64],
    ) {
        for copy in 0..self.copies {
            let r = self.rows(copy, x.nrows(), samples);
            let xs = x.slice(s![r.clone(), ..]);
            let ds = dy.slice(s![r, ..]);
            let n = self.output_len * self.input_len;
            let start = self.weight + copy * n;
            let mut gw =
                ArrayViewMut2::from_shape((self.output_len, self.input_len), &mut grad[start..start + n])
                    .expect("weight block shape");
            let mut gw = gw.slice_mut(s![seg.start..seg.end, ..]);
            gw += &ds.t().dot(&xs);
            let start = self.bias + copy * self.output_len + seg.start;
            let mut gb = ArrayViewMut1::from(&mut grad[start..start + seg.len()]);
            gb += &ds.sum_axis(Axis(0));
        }
    }
}

struct MlpSlots {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    input_len: usize,
    hidden: usize,
    output_len: usize,
}

impl MlpSlots {
    fn w1<'a>(&self, p: &'a [f64]) -> ArrayView2<'a, f64> {
        let n = self.hidden * self.input_len;
        ArrayView2::from_shape((self.hidden, self.input_len), &p[self.w1..self.w1 + n]).unwrap()
    }
    fn b1(&self, p: &[f64]) -> Array1<f64> {
        ArrayView1::from(&p[self.b1..self.b1 + self.hidden]).to_owned()
    }
    fn w2<'a>(&self, p: &'a [f64]) -> ArrayView2<'a, f64> {
        let n = self.output_len * self.hidden;
        ArrayView2::from_shape((self.output_len, self.hidden), &p[self.w2..self.w2 + n]).unwrap()
    }
    fn b2(&self, p: &[f64]) -> Array1<f64> {
        ArrayView1::from(&p[self.b2..self.b2 + self.output_len]).to_owned()
    }
    fn w1_mut<'a>(&self, g: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        let n = self.hidden * self.input_len;
        ArrayViewMut2::from_shape((self.hidden, self.input_len), &mut g[self.w1..self.w1 + n]).unwrap()
    }
    fn b1_mut<'a>(&self, g: &'a mut [f64]) -> ArrayViewMut1<'a, f64> {
        ArrayViewMut1::from(&mut g[self.b1..self.b1 + self.hidden])
    }
    fn w2_mut<'a>(&self, g: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        let n = self.output_len * self.hidden;
        ArrayViewMut2::from_shape((self.output_len, self.hidden), &mut g[self.w2..self.w2 + n]).unwrap()
    }
    fn b2_mut<'a>(&self, g: &'a mut [f64]) -> ArrayViewMut1<'a, f64> {
        ArrayViewMut1::from(&mut g[self.b2..self.b2 + self.output_len])
    }
}

/// On-disk model: `{"spec": ..., "param_values": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub spec: ForecasterSpec,
    pub param_values: Vec<f64>,
}

impl Checkpoint {
    pub fn from_model(model: &Forecaster) -> Self {
        Self {
            spec: model.spec.clone(),
            param_values: model.params.values.clone(),
        }
    }

    pub fn into_model(self) -> Result<Forecaster, ModelError> {
        Forecaster::with_params(self.spec, self.param_values)
    }

    pub fn to_json(&self) -> Result<String, ModelError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn param_counts() {
        let spec = ForecasterSpec::new(ModelKind::LinearDirect, 4, 2, 1);
        assert_eq!(Forecaster::build(spec.clone()).unwrap().num_params(), 4 * 2 + 2);
        let spec3 = ForecasterSpec::new(ModelKind::LinearDirect, 4, 2, 3);
        assert_eq!(Forecaster::build(spec3.clone()).unwrap().num_params(), 10);
        assert_eq!(spec3.with_per_channel(true).num_params(), 30);
        let naive = ForecasterSpec::new(ModelKind::NaiveSeasonal, 4, 2, 1).with_period(2);
        assert_eq!(Forecaster::build(naive).unwrap().num_params(), 0);
        let decomp = ForecasterSpec::new(ModelKind::DecompLinear, 4, 2, 1).with_kernel(3);
        assert_eq!(decomp.num_params(), 20);
        let mlp = ForecasterSpec::new(ModelKind::Mlp, 4, 2, 1).with_hidden(3);
        assert_eq!(mlp.num_params(), 3 * 4 + 3 + 2 * 3 + 2);
    }

    #[test]
    fn invalid_specs() {
        let bad = [
            ForecasterSpec::new(ModelKind::LinearDirect, 0, 2, 1),
            ForecasterSpec::new(ModelKind::NaiveSeasonal, 4, 2, 1).with_period(5),
            ForecasterSpec::new(ModelKind::DecompLinear, 4, 2, 1).with_kernel(2),
            ForecasterSpec::new(ModelKind::DecompLinear, 4, 2, 1).with_kernel(5),
            ForecasterSpec::new(ModelKind::Mlp, 4, 2, 1).with_hidden(0),
        ];
        for spec in bad {
            assert!(matches!(Forecaster::build(spec), Err(ModelError::InvalidSpec(_))));
        }
    }

    #[test]
    fn init_ranges() {
        let spec = ForecasterSpec::new(ModelKind::LinearDirect, 8, 3, 1).with_seed(7);
        let m = Forecaster::build(spec).unwrap();
        assert!(m.params().block("weight").unwrap().iter().all(|w| w.abs() <= 1.0 / 8.0));
        assert!(m.params().block("bias").unwrap().iter().all(|&b| b == 0.0));
        let spec = ForecasterSpec::new(ModelKind::Mlp, 9, 3, 1).with_hidden(4).with_seed(7);
        let m = Forecaster::build(spec).unwrap();
        assert!(m.params().block("hidden.weight").unwrap().iter().all(|w| w.abs() <= 1.0 / 3.0));
        assert!(m.params().block("output.bias").unwrap().iter().all(|w| w.abs() <= 0.5));
    }

    #[test]
    fn naive_seasonal_copy_rule() {
        let spec = ForecasterSpec::new(ModelKind::NaiveSeasonal, 4, 4, 1).with_period(2);
        let m = Forecaster::build(spec).unwrap();
        let y = m.predict(array![[1.0], [2.0], [3.0], [4.0]].view()).unwrap();
        assert_eq!(y, array![[3.0], [4.0], [3.0], [4.0]]);
    }

    #[test]
    fn linear_identity() {
        let spec = ForecasterSpec::new(ModelKind::LinearDirect, 3, 3, 2);
        let mut m = Forecaster::build(spec).unwrap();
        let mut p = m.get_params();
        p.block_mut("weight").unwrap().copy_from_slice(&[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        p.block_mut("bias").unwrap().fill(0.0);
        m.set_params(&p).unwrap();
        let x = array![[1.0, -1.0], [2.0, 5.0], [3.0, 0.5]];
        assert_eq!(m.predict(x.view()).unwrap(), x);
    }

    #[test]
    fn moving_average_edge_replication() {
        let (trend, seasonal) = decompose(array![[1.0], [2.0], [3.0], [4.0]].view(), 3);
        let expected = [4.0 / 3.0, 2.0, 3.0, 11.0 / 3.0];
        for (t, e) in trend.iter().zip(expected) {
            assert!((t - e).abs() < 1e-15);
        }
        assert!((seasonal[[0, 0]] - (1.0 - 4.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn decomp_linear_hand_arithmetic() {
        // both maps: output step 0 sums the whole input, step 1 takes the first row
        let spec = ForecasterSpec::new(ModelKind::DecompLinear, 4, 2, 1).with_kernel(3);
        let mut m = Forecaster::build(spec).unwrap();
        let w = [1., 1., 1., 1., 1., 0., 0., 0.];
        let mut p = m.get_params();
        p.block_mut("seasonal.weight").unwrap().copy_from_slice(&w);
        p.block_mut("trend.weight").unwrap().copy_from_slice(&w);
        m.set_params(&p).unwrap();
        let y = m.predict(array![[1.0], [2.0], [3.0], [4.0]].view()).unwrap();
        // trend + seasonal = x, so the sum is 10 and the first row is 1
        assert!((y[[0, 0]] - 10.0).abs() < 1e-12);
        assert!((y[[1, 0]] - 1.0).abs() < 1e-12);

        // seasonal map alone on the seasonal part
        p.block_mut("trend.weight").unwrap().fill(0.0);
        m.set_params(&p).unwrap();
        let y = m.predict(array![[1.0], [2.0], [3.0], [4.0]].view()).unwrap();
        let seasonal_sum = 10.0 - (4.0 / 3.0 + 2.0 + 3.0 + 11.0 / 3.0);
        assert!((y[[0, 0]] - seasonal_sum).abs() < 1e-12);
        assert!((y[[1, 0]] - (1.0 - 4.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn one_parameter_chain_rule() {
        let spec = ForecasterSpec::new(ModelKind::LinearDirect, 1, 1, 1);
        let m = Forecaster::with_params(spec, vec![1.0, 0.0]).unwrap();
        let x = array![[2.0]];
        let y = array![[5.0]];
        let sample = WindowSample {
            x: x.view(),
            y: y.view(),
            origin_index: 0,
        };
        let (loss, grad) = m.loss_and_grad(&[sample], SegmentSpec::full(1)).unwrap();
        assert_eq!(loss, 9.0);
        assert_eq!(grad.values(), &[-12.0, -6.0]);
    }

    #[test]
    fn perfect_fit_has_zero_gradient() {
        let spec = ForecasterSpec::new(ModelKind::LinearDirect, 2, 2, 1);
        let m = Forecaster::with_params(spec, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let x = array![[1.5], [-2.0]];
        let sample = WindowSample {
            x: x.view(),
            y: x.view(),
            origin_index: 0,
        };
        let (loss, grad) = m.loss_and_grad(&[sample], SegmentSpec::new(1, 2)).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.values().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn loss_errors() {
        let spec = ForecasterSpec::new(ModelKind::LinearDirect, 1, 2, 1);
        let m = Forecaster::build(spec).unwrap();
        assert!(matches!(
            m.loss_and_grad(&[], SegmentSpec::full(2)),
            Err(ModelError::EmptyBatch)
        ));
        let x = array![[1.0]];
        let y = array![[1.0], [2.0]];
        let s = WindowSample {
            x: x.view(),
            y: y.view(),
            origin_index: 0,
        };
        assert!(matches!(
            m.loss_and_grad(&[s], SegmentSpec::new(1, 1)),
            Err(ModelError::EmptySegment { .. })
        ));
        assert!(matches!(
            m.loss_and_grad(&[s], SegmentSpec::new(1, 3)),
            Err(ModelError::EmptySegment { .. })
        ));
        assert!(matches!(
            m.predict(array![[1.0, 2.0]].view()),
            Err(ModelError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn params_roundtrip_and_zero() {
        let spec = ForecasterSpec::new(ModelKind::LinearDirect, 3, 2, 2).with_seed(3);
        let mut m = Forecaster::build(spec).unwrap();
        let p = m.get_params();
        m.set_params(&p).unwrap();
        assert_eq!(m.get_params(), p);
        m.set_param_values(&vec![0.0; p.len()]).unwrap();
        let y = m.predict(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]].view()).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
        assert!(matches!(
            m.set_param_values(&[1.0]),
            Err(ModelError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let spec = ForecasterSpec::new(ModelKind::Mlp, 5, 3, 2).with_hidden(6).with_seed(11);
        let m = Forecaster::build(spec).unwrap();
        let text = Checkpoint::from_model(&m).to_json().unwrap();
        let back = Checkpoint::from_json(&text).unwrap().into_model().unwrap();
        assert_eq!(back, m);
        let x = Array2::from_shape_fn((5, 2), |(i, j)| (i as f64 * 0.37 - j as f64).sin());
        let a = m.predict(x.view()).unwrap();
        let b = back.predict(x.view()).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
