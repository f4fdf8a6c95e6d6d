#![allow(dead_code)]

use evoforecast::{Forecaster, ForecasterSpec, ModelKind, SegmentSpec, SeriesFrame};
use ndarray::Array2;
use rand::Rng;

/// Sum of per-channel sinusoids plus optional uniform noise.
pub fn sinusoid_frame(n: usize, channels: usize, noise: f64, seed: u64) -> SeriesFrame {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let values = Array2::from_shape_fn((n, channels), |(t, c)| {
        let t = t as f64;
        let phase = c as f64 * 0.7;
        (0.3 * t + phase).sin() + 0.5 * (0.05 * t + 2.0 * phase).cos()
            + noise * (rng.gen::<f64>() - 0.5)
    });
    SeriesFrame::from_values(values).unwrap()
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-2.0..2.0))
}

/// A random model of `kind` with random (not init-scaled) parameters.
pub fn random_model(
    kind: ModelKind,
    t: usize,
    l: usize,
    c: usize,
    rng: &mut impl Rng,
) -> Forecaster {
    let mut spec = ForecasterSpec::new(kind, t, l, c)
        .with_seed(rng.gen())
        .with_per_channel(kind != ModelKind::Mlp && rng.gen_bool(0.5));
    spec = match kind {
        ModelKind::NaiveSeasonal => spec.with_period(rng.gen_range(1..=t)),
        ModelKind::DecompLinear => {
            let max_k = if t % 2 == 1 { t } else { t - 1 };
            let k = 2 * rng.gen_range(0..=(max_k - 1) / 2) + 1;
            spec.with_kernel(k)
        }
        ModelKind::Mlp => spec.with_hidden(rng.gen_range(1..=6)),
        ModelKind::LinearDirect => spec,
    };
    let mut m = Forecaster::build(spec).unwrap();
    let values: Vec<f64> = (0..m.num_params()).map(|_| rng.gen_range(-0.6..0.6)).collect();
    m.set_param_values(&values).unwrap();
    m
}

pub const KINDS: [ModelKind; 4] = [
    ModelKind::NaiveSeasonal,
    ModelKind::LinearDirect,
    ModelKind::DecompLinear,
    ModelKind::Mlp,
];

pub const TRAINABLE: [ModelKind; 3] = [ModelKind::LinearDirect, ModelKind::DecompLinear, ModelKind::Mlp];

/// Segment MSE computed from `predict` alone; shares no code with the gradient path.
pub fn segment_loss(model: &Forecaster, xs: &[Array2<f64>], ys: &[Array2<f64>], seg: SegmentSpec) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for (x, y) in xs.iter().zip(ys) {
        let pred = model.predict(x.view()).unwrap();
        for j in seg.start..seg.end {
            for c in 0..y.ncols() {
                sum += (pred[[j, c]] - y[[j, c]]).powi(2);
                n += 1;
            }
        }
    }
    sum / n as f64
}

pub fn central_difference(model: &Forecaster, xs: &[Array2<f64>], ys: &[Array2<f64>], seg: SegmentSpec) -> Vec<f64> {
    let eps = 1e-5;
    let base = model.get_params().into_values();
    let mut probe = model.clone();
    (0..base.len())
        .map(|i| {
            let mut p = base.clone();
            p[i] = base[i] + eps;
            probe.set_param_values(&p).unwrap();
            let up = segment_loss(&probe, xs, ys, seg);
            p[i] = base[i] - eps;
            probe.set_param_values(&p).unwrap();
            let down = segment_loss(&probe, xs, ys, seg);
            (up - down) / (2.0 * eps)
        })
        .collect()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 { 0.0 } else { diff / scale }
}

/// Grows a plain list of rows and feeds the last `T` rows back each step.
pub fn virtual_sequence_oracle(model: &Forecaster, x: &Array2<f64>, h: usize) -> Vec<Vec<f64>> {
    let (t, l) = (model.input_len(), model.output_len());
    let mut seq: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut produced = 0;
    while produced < h {
        let tail = &seq[seq.len() - t..];
        let input = Array2::from_shape_fn((t, x.ncols()), |(i, c)| tail[i][c]);
        let block = model.predict(input.view()).unwrap();
        assert_eq!(block.nrows(), l);
        seq.extend(block.rows().into_iter().map(|r| r.to_vec()));
        produced += l;
    }
    seq[t..t + h].to_vec()
}
