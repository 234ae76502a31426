//! Central-difference gradient checks in `f64`.
//!
//! Each case builds a small random graph, reduces its output to a scalar with
//! a random projection, and compares every analytic input gradient with
//! `(L(x + h) − L(x − h)) / 2h`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{gru_sequence, lstm_sequence, BatchNormState, GruWeights, LstmWeights, Tape, Tensor, Var};
use crate::error::Result;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-6;
/// Denominator floor of the relative error, so gradients that are exactly
/// zero on both sides compare as equal.
pub const FLOOR: f64 = 1e-6;
pub const DEFAULT_SEEDS: u64 = 20;

/// Every differentiable op covered by the suite.
pub const OPS: &[&str] = &[
    "conv2d",
    "batchnorm2d_train",
    "batchnorm2d_eval",
    "film",
    "add_spatial",
    "linear",
    "relu",
    "sigmoid",
    "tanh",
    "add",
    "sub",
    "mul",
    "scale",
    "embedding",
    "global_max_pool",
    "global_avg_pool",
    "coordinate_maps",
    "concat",
    "slice_cols",
    "select_step",
    "reshape",
    "spatial_softmax",
    "softmax_attention_pool",
    "softmax_cross_entropy",
    "gru_sequence",
    "lstm_sequence",
];

#[derive(Debug, Clone, Serialize)]
pub struct OpReport {
    pub op: &'static str,
    pub cases: u64,
    pub max_rel_error: f64,
    pub worst_seed: u64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

fn evaluate(inputs: &[Tensor<f64>], build: &Build<'_>, weights: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let loss = tape.project(out, weights)?;
    Ok(tape.value(loss).data()[0])
}

/// Largest relative error over all elements of all `inputs`.
pub fn check_graph(inputs: Vec<Tensor<f64>>, build: &Build<'_>, rng: &mut impl Rng) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let weights: Vec<f64> = (0..tape.value(out).numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loss = tape.project(out, &weights)?;
    let grads = tape.backward(loss)?;
    let mut worst = 0.0f64;
    let mut probe = inputs.clone();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for (j, &a) in analytic.iter().enumerate() {
            let x0 = inputs[k].data()[j];
            probe[k].data_mut()[j] = x0 + STEP;
            let plus = evaluate(&probe, build, &weights)?;
            probe[k].data_mut()[j] = x0 - STEP;
            let minus = evaluate(&probe, build, &weights)?;
            probe[k].data_mut()[j] = x0;
            worst = worst.max(relative_error(a, (plus - minus) / (2.0 * STEP)));
        }
    }
    Ok(worst)
}

fn uniform(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values at least `gap` away from zero, so ReLU kinks are out of reach.
fn off_kink(rng: &mut impl Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(gap..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Distinct values per pooling window, spaced so a probe cannot swap the max.
fn spaced(rng: &mut impl Rng, shape: &[usize], window: usize) -> Tensor<f64> {
    let mut data = Vec::new();
    for _ in 0..shape.iter().product::<usize>() / window {
        let mut ranks: Vec<usize> = (0..window).collect();
        ranks.shuffle(rng);
        data.extend(ranks.iter().map(|&r| r as f64 * 0.1 - 0.5 + rng.gen_range(0.0..0.01)));
    }
    Tensor::new(shape.to_vec(), data).expect("window divides shape")
}

fn case(op: &str, rng: &mut ChaCha8Rng) -> Result<f64> {
    let r = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| rng.gen_range(lo..=hi);
    match op {
        "conv2d" => {
            let (n, c, o) = (r(rng, 1, 2), r(rng, 1, 3), r(rng, 1, 3));
            let k = if rng.gen_bool(0.3) { 1 } else { 3 };
            let stride = r(rng, 1, 2);
            let pad = r(rng, 0, 1);
            let (h, w) = (r(rng, 3, 6), r(rng, 3, 6));
            let bias = rng.gen_bool(0.5);
            let mut inputs = vec![uniform(rng, &[n, c, h, w]), uniform(rng, &[o, c, k, k])];
            if bias {
                inputs.push(uniform(rng, &[o]));
            }
            check_graph(inputs, &move |t, v| t.conv2d(v[0], v[1], v.get(2).copied(), stride, pad), rng)
        }
        "batchnorm2d_train" | "batchnorm2d_eval" => {
            let train = op.ends_with("train");
            let (n, c, h, w) = (r(rng, 2, 3), r(rng, 1, 3), r(rng, 1, 3), r(rng, 1, 3));
            let affine = rng.gen_bool(0.5);
            let mut inputs = vec![uniform(rng, &[n, c, h, w])];
            if affine {
                inputs.push(uniform(rng, &[c]));
                inputs.push(uniform(rng, &[c]));
            }
            let mut state = BatchNormState::new(c);
            state.mean = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
            state.var = (0..c).map(|_| rng.gen_range(0.2..2.0)).collect();
            check_graph(
                inputs,
                &move |t, v| {
                    let mut st = state.clone();
                    t.batchnorm2d(v[0], v.get(1).copied(), v.get(2).copied(), &mut st, train)
                },
                rng,
            )
        }
        "film" => {
            let (n, c, h, w) = (r(rng, 1, 3), r(rng, 1, 3), r(rng, 1, 4), r(rng, 1, 4));
            let inputs = vec![uniform(rng, &[n, c, h, w]), uniform(rng, &[n, c]), uniform(rng, &[n, c])];
            check_graph(inputs, &|t, v| t.film(v[0], v[1], v[2]), rng)
        }
        "add_spatial" => {
            let (n, c, h, w) = (r(rng, 1, 3), r(rng, 1, 3), r(rng, 1, 4), r(rng, 1, 4));
            let inputs = vec![uniform(rng, &[n, c, h, w]), uniform(rng, &[n, c])];
            check_graph(inputs, &|t, v| t.add_spatial(v[0], v[1]), rng)
        }
        "linear" => {
            let (n, k, m) = (r(rng, 1, 4), r(rng, 1, 5), r(rng, 1, 5));
            let mut inputs = vec![uniform(rng, &[n, k]), uniform(rng, &[k, m])];
            if rng.gen_bool(0.5) {
                inputs.push(uniform(rng, &[m]));
            }
            check_graph(inputs, &|t, v| t.linear(v[0], v[1], v.get(2).copied()), rng)
        }
        "relu" | "sigmoid" | "tanh" | "scale" => {
            let shape = [r(rng, 1, 3), r(rng, 1, 5)];
            let x = if op == "relu" { off_kink(rng, &shape, 0.01) } else { uniform(rng, &shape) };
            let factor = rng.gen_range(-2.0..2.0);
            let op = op.to_owned();
            check_graph(
                vec![x],
                &move |t, v| {
                    Ok(match op.as_str() {
                        "relu" => t.relu(v[0]),
                        "sigmoid" => t.sigmoid(v[0]),
                        "tanh" => t.tanh(v[0]),
                        _ => t.scale(v[0], factor),
                    })
                },
                rng,
            )
        }
        "add" | "sub" | "mul" => {
            let shape = [r(rng, 1, 3), r(rng, 1, 2), r(rng, 1, 3)];
            let inputs = vec![uniform(rng, &shape), uniform(rng, &shape)];
            let op = op.to_owned();
            check_graph(
                inputs,
                &move |t, v| match op.as_str() {
                    "add" => t.add(v[0], v[1]),
                    "sub" => t.sub(v[0], v[1]),
                    _ => t.mul(v[0], v[1]),
                },
                rng,
            )
        }
        "embedding" => {
            let (vocab, e) = (r(rng, 2, 6), r(rng, 1, 4));
            let ids: Vec<usize> = (0..r(rng, 1, 8)).map(|_| rng.gen_range(0..vocab)).collect();
            check_graph(vec![uniform(rng, &[vocab, e])], &move |t, v| t.embedding(v[0], &ids), rng)
        }
        "global_max_pool" => {
            let (n, c, h, w) = (r(rng, 1, 3), r(rng, 1, 3), r(rng, 1, 4), r(rng, 1, 4));
            let x = spaced(rng, &[n, c, h, w], h * w);
            check_graph(vec![x], &|t, v| t.global_max_pool(v[0]), rng)
        }
        "global_avg_pool" => {
            let shape = [r(rng, 1, 3), r(rng, 1, 3), r(rng, 1, 4), r(rng, 1, 4)];
            check_graph(vec![uniform(rng, &shape)], &|t, v| t.global_avg_pool(v[0]), rng)
        }
        "coordinate_maps" => {
            let shape = [r(rng, 1, 2), r(rng, 1, 3), r(rng, 1, 4), r(rng, 1, 4)];
            check_graph(vec![uniform(rng, &shape)], &|t, v| t.append_coords(v[0]), rng)
        }
        "concat" => {
            let (n, a, b) = (r(rng, 1, 3), r(rng, 1, 4), r(rng, 1, 4));
            let inputs = vec![uniform(rng, &[n, a]), uniform(rng, &[n, b])];
            check_graph(inputs, &|t, v| t.concat(v[0], v[1]), rng)
        }
        "slice_cols" => {
            let (n, m) = (r(rng, 1, 3), r(rng, 1, 6));
            let start = rng.gen_range(0..m);
            let len = rng.gen_range(1..=m - start);
            check_graph(vec![uniform(rng, &[n, m])], &move |t, v| t.slice_cols(v[0], start, len), rng)
        }
        "select_step" => {
            let (n, steps, e) = (r(rng, 1, 3), r(rng, 1, 4), r(rng, 1, 3));
            let step = rng.gen_range(0..steps);
            check_graph(vec![uniform(rng, &[n, steps, e])], &move |t, v| t.select_step(v[0], step), rng)
        }
        "reshape" => {
            let (a, b) = (r(rng, 1, 4), r(rng, 1, 4));
            check_graph(vec![uniform(rng, &[a, b])], &move |t, v| t.reshape(v[0], &[b, a]), rng)
        }
        "spatial_softmax" => {
            let shape = [r(rng, 1, 3), r(rng, 1, 4), r(rng, 1, 4)];
            check_graph(vec![uniform(rng, &shape)], &|t, v| t.spatial_softmax(v[0]), rng)
        }
        "softmax_attention_pool" => {
            let (n, c, h, w) = (r(rng, 1, 3), r(rng, 1, 3), r(rng, 1, 3), r(rng, 1, 3));
            let inputs = vec![uniform(rng, &[n, c, h, w]), uniform(rng, &[n, h, w])];
            check_graph(inputs, &|t, v| Ok(t.softmax_attention_pool(v[0], v[1])?.0), rng)
        }
        "softmax_cross_entropy" => {
            let (n, k) = (r(rng, 1, 5), r(rng, 2, 4));
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let x = uniform(rng, &[n, k]).map(|v| 3.0 * v);
            check_graph(vec![x], &move |t, v| t.softmax_cross_entropy(v[0], &labels), rng)
        }
        "gru_sequence" | "lstm_sequence" => {
            let gru = op == "gru_sequence";
            let gates = if gru { 3 } else { 4 };
            let (n, e, h) = (r(rng, 1, 3), r(rng, 1, 3), r(rng, 1, 3));
            let steps = if rng.gen_bool(0.5) { 2 } else { r(rng, 1, 3) };
            let lengths: Vec<usize> = (0..n).map(|_| rng.gen_range(0..=steps)).collect();
            let mut inputs = vec![
                uniform(rng, &[n, steps, e]),
                uniform(rng, &[e, gates * h]),
                uniform(rng, &[h, gates * h]),
                uniform(rng, &[gates * h]),
            ];
            if gru {
                inputs.push(uniform(rng, &[gates * h]));
            }
            check_graph(
                inputs,
                &move |t, v| {
                    if gru {
                        let w = GruWeights {
                            w_ih: v[1],
                            w_hh: v[2],
                            b_ih: v[3],
                            b_hh: v[4],
                        };
                        gru_sequence(t, v[0], &lengths, &w)
                    } else {
                        let w = LstmWeights {
                            w_ih: v[1],
                            w_hh: v[2],
                            bias: v[3],
                        };
                        lstm_sequence(t, v[0], &lengths, &w)
                    }
                },
                rng,
            )
        }
        other => panic!("no gradient check for {other}"),
    }
}

fn op_seed(op: &str, seed: u64) -> u64 {
    op.bytes().fold(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15), |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01B3)
    })
}

/// Runs `seeds` random cases of one op.
pub fn check_op(op: &'static str, seeds: u64) -> Result<OpReport> {
    let mut report = OpReport {
        op,
        cases: seeds,
        max_rel_error: 0.0,
        worst_seed: 0,
    };
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(op_seed(op, seed));
        let err = case(op, &mut rng)?;
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_seed = seed;
        }
    }
    Ok(report)
}

/// The full suite, one report per entry of [`OPS`].
pub fn run_suite(seeds: u64) -> Result<Vec<OpReport>> {
    OPS.iter().map(|op| check_op(op, seeds)).collect()
}
