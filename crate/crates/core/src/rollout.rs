//! Block-wise recursive rollout of a fixed `T → L` forecaster to horizon `H`.
//!
//! Block `k` (1-based) consumes the last `T` rows of the virtual sequence
//! `[x ; B(1) ; ... ; B(k-1)]`. Depending on how much of that window is made of
//! predictions, the block is in one of three phases:
//!
//! * `Direct` (`k = 1`): the observed history only.
//! * `SemiExtrapolation` (`0 < (k-1)·L < T`): the newest `T - (k-1)·L`
//!   observations followed by every prediction so far.
//! * `PureExtrapolation` (`(k-1)·L >= T`): the newest `T` predictions.
//!
//! The `K = ⌈H/L⌉` blocks are concatenated and truncated to `H` rows.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Forecaster, ModelError};

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("accumulated predictions have {actual} rows, block {k} needs {expected}")]
    AccumLengthMismatch {
        k: usize,
        expected: usize,
        actual: usize,
    },
    #[error("ground truth has {actual} rows, block {k} needs at least {expected}")]
    InsufficientTruth {
        k: usize,
        expected: usize,
        actual: usize,
    },
    #[error("input has shape {actual:?}, expected {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("invalid rollout config: {0}")]
    InvalidConfig(String),
    #[error("block {k} contains non-finite values")]
    NonFiniteBlock {
        k: usize,
        partial: Option<Box<RolloutTrace>>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Direct,
    SemiExtrapolation,
    PureExtrapolation,
}

/// Phase of block `k` (1-based) for input length `t` and output length `l`.
///
/// The boundary `(k-1)·l == t` is pure extrapolation: no observations remain.
pub fn phase_of(k: usize, t: usize, l: usize) -> Phase {
    assert!(k >= 1, "blocks are numbered from 1");
    let produced = (k - 1) * l;
    if k == 1 {
        Phase::Direct
    } else if produced < t {
        Phase::SemiExtrapolation
    } else {
        Phase::PureExtrapolation
    }
}

/// `⌈h / l⌉`.
pub fn block_count(h: usize, l: usize) -> usize {
    h.div_ceil(l)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutConfig {
    #[serde(rename = "T")]
    pub input_len: usize,
    #[serde(rename = "L")]
    pub output_len: usize,
    #[serde(rename = "H")]
    pub horizon: usize,
}

impl RolloutConfig {
    pub fn new(input_len: usize, output_len: usize, horizon: usize) -> Result<Self, RolloutError> {
        if input_len == 0 || output_len == 0 || horizon == 0 {
            return Err(RolloutError::InvalidConfig(format!(
                "T, L, H must be >= 1 (got {input_len}, {output_len}, {horizon})"
            )));
        }
        Ok(Self {
            input_len,
            output_len,
            horizon,
        })
    }

    pub fn blocks(&self) -> usize {
        block_count(self.horizon, self.output_len)
    }

    pub fn phases(&self) -> Vec<Phase> {
        (1..=self.blocks())
            .map(|k| phase_of(k, self.input_len, self.output_len))
            .collect()
    }
}

/// Input of block `k`, built from the history `x` (`T × C`) and the
/// `(k-1)·L` predictions accumulated so far.
pub fn build_block_input(
    x: ArrayView2<'_, f64>,
    y_accum: ArrayView2<'_, f64>,
    k: usize,
    t: usize,
    l: usize,
) -> Result<Array2<f64>, RolloutError> {
    let produced = (k - 1) * l;
    if y_accum.nrows() != produced {
        return Err(RolloutError::AccumLengthMismatch {
            k,
            expected: produced,
            actual: y_accum.nrows(),
        });
    }
    Ok(compose_input(x, y_accum, k, t, l, Axis(0)))
}

/// Like [`build_block_input`] but the predicted portion is taken from ground truth.
pub fn teacher_forced_input(
    x: ArrayView2<'_, f64>,
    y_true: ArrayView2<'_, f64>,
    k: usize,
    t: usize,
    l: usize,
) -> Result<Array2<f64>, RolloutError> {
    let produced = (k - 1) * l;
    if y_true.nrows() < produced {
        return Err(RolloutError::InsufficientTruth {
            k,
            expected: produced,
            actual: y_true.nrows(),
        });
    }
    Ok(compose_input(
        x,
        y_true.slice(s![..produced, ..]),
        k,
        t,
        l,
        Axis(0),
    ))
}

/// Three-phase input construction along the time axis `axis` (rows for
/// `T × C` matrices, columns for channel-major row batches).
fn compose_input(
    x: ArrayView2<'_, f64>,
    y_accum: ArrayView2<'_, f64>,
    k: usize,
    t: usize,
    l: usize,
    axis: Axis,
) -> Array2<f64> {
    let produced = (k - 1) * l;
    match phase_of(k, t, l) {
        Phase::Direct => x.to_owned(),
        Phase::SemiExtrapolation => {
            let recent = x.slice_axis(axis, (produced..t).into());
            concatenate(axis, &[recent.view(), y_accum.view()]).expect("channel counts agree")
        }
        Phase::PureExtrapolation => y_accum
            .slice_axis(axis, (produced - t..produced).into())
            .to_owned(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutTrace {
    pub config: RolloutConfig,
    pub blocks: Vec<Array2<f64>>,
    pub phases: Vec<Phase>,
    /// Block inputs, kept only when tracing is enabled.
    pub inputs: Option<Vec<Array2<f64>>>,
    /// Stitched prediction, `H × C` (shorter in a partial trace).
    pub y_hat: Array2<f64>,
}

#[derive(Serialize)]
struct TraceDump<'a> {
    config: &'a RolloutConfig,
    phases: &'a [Phase],
    blocks: Vec<Vec<Vec<f64>>>,
}

impl RolloutTrace {
    /// `{config, phases, blocks}`; each block is a list of rows.
    pub fn to_json(&self) -> String {
        let blocks = self
            .blocks
            .iter()
            .map(|b| b.rows().into_iter().map(|r| r.to_vec()).collect())
            .collect();
        let dump = TraceDump {
            config: &self.config,
            phases: &self.phases,
            blocks,
        };
        serde_json::to_string_pretty(&dump).expect("trace serializes")
    }
}

fn stitch(blocks: &[Array2<f64>], rows: usize, channels: usize) -> Array2<f64> {
    if blocks.is_empty() {
        return Array2::zeros((0, channels));
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let all = concatenate(Axis(0), &views).expect("blocks share channel count");
    let rows = rows.min(all.nrows());
    all.slice(s![..rows, ..]).to_owned()
}

/// Rolls the model forward to horizon `h` from history `x` (`T × C`).
pub fn rollout(
    model: &Forecaster,
    x: ArrayView2<'_, f64>,
    h: usize,
    trace: bool,
) -> Result<RolloutTrace, RolloutError> {
    let (t, l, c) = (model.input_len(), model.output_len(), model.channels());
    if x.dim() != (t, c) {
        return Err(RolloutError::ShapeMismatch {
            expected: (t, c),
            actual: x.dim(),
        });
    }
    let config = RolloutConfig::new(t, l, h)?;
    let k_total = config.blocks();
    let mut blocks: Vec<Array2<f64>> = Vec::with_capacity(k_total);
    let mut phases = Vec::with_capacity(k_total);
    let mut inputs = trace.then(Vec::new);
    let mut y_accum = Array2::<f64>::zeros((0, c));

    for k in 1..=k_total {
        let input = build_block_input(x, y_accum.view(), k, t, l)?;
        let block = model.predict(input.view())?;
        phases.push(phase_of(k, t, l));
        if let Some(inputs) = inputs.as_mut() {
            inputs.push(input);
        }
        let finite = block.iter().all(|v| v.is_finite());
        if k < k_total {
            y_accum = concatenate(Axis(0), &[y_accum.view(), block.view()])
                .expect("channel counts agree");
        }
        blocks.push(block);
        if !finite {
            let y_hat = stitch(&blocks, h, c);
            let partial = RolloutTrace {
                config,
                blocks,
                phases,
                inputs,
                y_hat,
            };
            return Err(RolloutError::NonFiniteBlock {
                k,
                partial: Some(Box::new(partial)),
            });
        }
    }
    let y_hat = stitch(&blocks, h, c);
    Ok(RolloutTrace {
        config,
        blocks,
        phases,
        inputs,
        y_hat,
    })
}

/// Batched rollout over a channel-major `(C·B) × T` row matrix; returns
/// `(C·B) × h`. Uses the same block construction as [`rollout`].
pub fn rollout_rows(
    model: &Forecaster,
    rows: ArrayView2<'_, f64>,
    samples: usize,
    h: usize,
) -> Result<Array2<f64>, RolloutError> {
    let (t, l) = (model.input_len(), model.output_len());
    let expected = (model.channels() * samples, t);
    if rows.dim() != expected {
        return Err(RolloutError::ShapeMismatch {
            expected,
            actual: rows.dim(),
        });
    }
    let k_total = RolloutConfig::new(t, l, h)?.blocks();
    let mut y_accum = Array2::<f64>::zeros((rows.nrows(), 0));
    for k in 1..=k_total {
        let input = compose_input(rows, y_accum.view(), k, t, l, Axis(1));
        let block = model.predict_rows(input.view(), samples);
        if !block.iter().all(|v| v.is_finite()) {
            return Err(RolloutError::NonFiniteBlock { k, partial: None });
        }
        if k_total == 1 {
            y_accum = block;
        } else {
            y_accum = concatenate(Axis(1), &[y_accum.view(), block.view()])
                .expect("row counts agree");
        }
    }
    if y_accum.ncols() == h {
        Ok(y_accum)
    } else {
        Ok(y_accum.slice(s![.., ..h]).to_owned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ForecasterSpec, ModelKind};
    use ndarray::array;

    #[test]
    fn phase_boundaries() {
        assert_eq!(phase_of(1, 720, 96), Phase::Direct);
        for k in 2..=8 {
            assert_eq!(phase_of(k, 720, 96), Phase::SemiExtrapolation, "k={k}");
        }
        assert_eq!(phase_of(9, 720, 96), Phase::PureExtrapolation);
        assert_eq!(phase_of(2, 4, 2), Phase::SemiExtrapolation);
        assert_eq!(phase_of(3, 4, 2), Phase::PureExtrapolation);
        assert_eq!(phase_of(2, 5, 5), Phase::PureExtrapolation);
        assert_eq!(phase_of(1, 1, 100), Phase::Direct);
    }

    #[test]
    fn block_inputs_by_hand() {
        let x = array![[1.0], [2.0], [3.0], [4.0]];
        assert_eq!(
            build_block_input(x.view(), Array2::zeros((0, 1)).view(), 1, 4, 2).unwrap(),
            x
        );
        let acc = array![[3.0], [4.0]];
        assert_eq!(
            build_block_input(x.view(), acc.view(), 2, 4, 2).unwrap(),
            array![[3.0], [4.0], [3.0], [4.0]]
        );
        let acc = array![[3.0], [4.0], [3.0], [4.0]];
        assert_eq!(
            build_block_input(x.view(), acc.view(), 3, 4, 2).unwrap(),
            array![[3.0], [4.0], [3.0], [4.0]]
        );
        assert!(matches!(
            build_block_input(x.view(), acc.view(), 2, 4, 2),
            Err(RolloutError::AccumLengthMismatch { .. })
        ));
    }

    #[test]
    fn teacher_forcing_by_hand() {
        let x = array![[1.0], [2.0], [3.0], [4.0]];
        let y = array![[9.0], [8.0], [7.0], [6.0]];
        assert_eq!(teacher_forced_input(x.view(), y.view(), 1, 4, 2).unwrap(), x);
        assert_eq!(
            teacher_forced_input(x.view(), y.view(), 2, 4, 2).unwrap(),
            array![[3.0], [4.0], [9.0], [8.0]]
        );
        assert!(matches!(
            teacher_forced_input(x.view(), y.view(), 4, 4, 2),
            Err(RolloutError::InsufficientTruth { .. })
        ));
    }

    fn naive_4_2() -> Forecaster {
        Forecaster::build(ForecasterSpec::new(ModelKind::NaiveSeasonal, 4, 2, 1).with_period(2))
            .unwrap()
    }

    #[test]
    fn naive_three_phase_trace() {
        let m = naive_4_2();
        let x = array![[1.0], [2.0], [3.0], [4.0]];
        let tr = rollout(&m, x.view(), 6, true).unwrap();
        assert_eq!(tr.y_hat, array![[3.0], [4.0], [3.0], [4.0], [3.0], [4.0]]);
        assert_eq!(
            tr.phases,
            [Phase::Direct, Phase::SemiExtrapolation, Phase::PureExtrapolation]
        );
        let inputs = tr.inputs.as_ref().unwrap();
        for (input, block) in inputs.iter().zip(&tr.blocks) {
            assert_eq!(&m.predict(input.view()).unwrap(), block);
        }
        let json: serde_json::Value = serde_json::from_str(&tr.to_json()).unwrap();
        assert_eq!(json["phases"][1], "semi_extrapolation");
        assert_eq!(json["config"]["H"], 6);
        assert_eq!(json["blocks"].as_array().unwrap().len(), 3);
    }

    #[test]
    fn truncation_and_surplus() {
        let m = naive_4_2();
        let x = array![[1.0], [2.0], [3.0], [4.0]];
        let tr = rollout(&m, x.view(), 5, false).unwrap();
        assert_eq!(tr.blocks.len(), 3);
        assert_eq!(tr.y_hat.nrows(), 5);
        assert!(tr.inputs.is_none());
        let tr = rollout(&m, x.view(), 1, false).unwrap();
        assert_eq!(tr.blocks.len(), 1);
        assert_eq!(tr.y_hat, array![[3.0]]);
    }

    #[test]
    fn non_finite_block_aborts_with_partial_trace() {
        let spec = ForecasterSpec::new(ModelKind::LinearDirect, 2, 1, 1);
        // y = 1e200 * (x0 + x1): overflows on the second block
        let m = Forecaster::with_params(spec, vec![1e200, 1e200, 0.0]).unwrap();
        let x = array![[1.0], [1.0]];
        match rollout(&m, x.view(), 4, false) {
            Err(RolloutError::NonFiniteBlock { k, partial }) => {
                assert_eq!(k, 2);
                assert_eq!(partial.unwrap().blocks.len(), 2);
            }
            other => panic!("unexpected {other:?}"),
        }
        let rows = x.t();
        assert!(matches!(
            rollout_rows(&m, rows, 1, 4),
            Err(RolloutError::NonFiniteBlock { k: 2, .. })
        ));
    }

    #[test]
    fn batched_rollout_matches_single() {
        let spec = ForecasterSpec::new(ModelKind::LinearDirect, 3, 2, 2).with_seed(5);
        let m = Forecaster::build(spec).unwrap();
        let xs: Vec<Array2<f64>> = (0..3)
            .map(|b| Array2::from_shape_fn((3, 2), |(i, j)| ((b * 7 + i * 3 + j) as f64).cos()))
            .collect();
        let views: Vec<_> = xs.iter().map(|x| x.view()).collect();
        let rows = crate::model::to_rows(&views);
        let out = rollout_rows(&m, rows.view(), 3, 7).unwrap();
        for (b, x) in xs.iter().enumerate() {
            let single = rollout(&m, x.view(), 7, false).unwrap().y_hat;
            let batched = crate::model::sample_from_rows(out.view(), 3, b);
            for (p, q) in single.iter().zip(batched.iter()) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }
}
