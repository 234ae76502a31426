//! Recurrent encoders built from tape primitives.
//!
//! Sequences are `[N, T, E]`. A step past a sequence's length leaves its
//! state untouched (`h ← h + m·(h' − h)` with a 0/1 mask `m`), so the final
//! state is the state at the true length and padding contributes nothing.

use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// GRU parameters with gates packed in `r, z, n` order.
#[derive(Debug, Clone, Copy)]
pub struct GruWeights {
    /// `[E, 3H]`
    pub w_ih: Var,
    /// `[H, 3H]`
    pub w_hh: Var,
    /// `[3H]`
    pub b_ih: Var,
    /// `[3H]`
    pub b_hh: Var,
}

/// LSTM parameters with gates packed in `i, f, g, o` order.
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights {
    /// `[E, 4H]`
    pub w_ih: Var,
    /// `[H, 4H]`
    pub w_hh: Var,
    /// `[4H]`
    pub bias: Var,
}

fn check_inputs<T: Scalar>(
    tape: &Tape<T>,
    op: &'static str,
    input: Var,
    lengths: &[usize],
    w_ih: Var,
    w_hh: Var,
    gates: usize,
) -> Result<(usize, usize, usize)> {
    let shape = tape.value(input).shape();
    let &[n, t, e] = shape else {
        return Err(Error::shape(op, format!("input must be [N, T, E], got {shape:?}")));
    };
    if lengths.len() != n || lengths.iter().any(|&l| l > t) {
        return Err(Error::shape(op, format!("lengths {lengths:?} do not fit [{n}, {t}]")));
    }
    let wi = tape.value(w_ih).shape();
    let h = wi.get(1).copied().unwrap_or(0) / gates;
    if wi != [e, gates * h] || tape.value(w_hh).shape() != [h, gates * h] || h == 0 {
        return Err(Error::shape(op, format!("weights {wi:?} do not match embedding {e}")));
    }
    Ok((n, h, lengths.iter().copied().max().unwrap_or(0)))
}

fn step_mask<T: Scalar>(tape: &mut Tape<T>, lengths: &[usize], step: usize, h: usize) -> Var {
    let n = lengths.len();
    let mask = Tensor::from_fn(&[n, h], |i| {
        if step < lengths[i / h] {
            T::one()
        } else {
            T::zero()
        }
    });
    tape.constant(mask)
}

/// `state + mask · (next − state)`
fn masked_update<T: Scalar>(tape: &mut Tape<T>, state: Var, next: Var, mask: Var) -> Result<Var> {
    let delta = tape.sub(next, state)?;
    let kept = tape.mul(mask, delta)?;
    tape.add(state, kept)
}

/// Runs a GRU over `input` and returns the final hidden state `[N, H]`.
pub fn gru_sequence<T: Scalar>(
    tape: &mut Tape<T>,
    input: Var,
    lengths: &[usize],
    w: &GruWeights,
) -> Result<Var> {
    let (n, h, steps) = check_inputs(tape, "gru_sequence", input, lengths, w.w_ih, w.w_hh, 3)?;
    let mut state = tape.constant(Tensor::zeros(&[n, h]));
    for t in 0..steps {
        let x = tape.select_step(input, t)?;
        let gi = tape.linear(x, w.w_ih, Some(w.b_ih))?;
        let gh = tape.linear(state, w.w_hh, Some(w.b_hh))?;
        let (ir, hr) = (tape.slice_cols(gi, 0, h)?, tape.slice_cols(gh, 0, h)?);
        let r = tape.add(ir, hr)?;
        let r = tape.sigmoid(r);
        let (iz, hz) = (tape.slice_cols(gi, h, h)?, tape.slice_cols(gh, h, h)?);
        let z = tape.add(iz, hz)?;
        let z = tape.sigmoid(z);
        let (inn, hn) = (tape.slice_cols(gi, 2 * h, h)?, tape.slice_cols(gh, 2 * h, h)?);
        let rh = tape.mul(r, hn)?;
        let cand = tape.add(inn, rh)?;
        let cand = tape.tanh(cand);
        // h' = (1 − z)·n + z·h = n + z·(h − n)
        let diff = tape.sub(state, cand)?;
        let zd = tape.mul(z, diff)?;
        let next = tape.add(cand, zd)?;
        let mask = step_mask(tape, lengths, t, h);
        state = masked_update(tape, state, next, mask)?;
    }
    Ok(state)
}

/// Runs an LSTM over `input` and returns the final hidden state `[N, H]`.
pub fn lstm_sequence<T: Scalar>(
    tape: &mut Tape<T>,
    input: Var,
    lengths: &[usize],
    w: &LstmWeights,
) -> Result<Var> {
    let (n, h, steps) = check_inputs(tape, "lstm_sequence", input, lengths, w.w_ih, w.w_hh, 4)?;
    let mut state = tape.constant(Tensor::zeros(&[n, h]));
    let mut cell = tape.constant(Tensor::zeros(&[n, h]));
    for t in 0..steps {
        let x = tape.select_step(input, t)?;
        let gi = tape.linear(x, w.w_ih, Some(w.bias))?;
        let gh = tape.linear(state, w.w_hh, None)?;
        let gates = tape.add(gi, gh)?;
        let i = tape.slice_cols(gates, 0, h)?;
        let i = tape.sigmoid(i);
        let f = tape.slice_cols(gates, h, h)?;
        let f = tape.sigmoid(f);
        let g = tape.slice_cols(gates, 2 * h, h)?;
        let g = tape.tanh(g);
        let o = tape.slice_cols(gates, 3 * h, h)?;
        let o = tape.sigmoid(o);
        let fc = tape.mul(f, cell)?;
        let ig = tape.mul(i, g)?;
        let next_cell = tape.add(fc, ig)?;
        let tc = tape.tanh(next_cell);
        let next = tape.mul(o, tc)?;
        let mask = step_mask(tape, lengths, t, h);
        cell = masked_update(tape, cell, next_cell, mask)?;
        state = masked_update(tape, state, next, mask)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn weights(tape: &mut Tape<f64>, e: usize, h: usize) -> GruWeights {
        let f = |k: usize| move |i: usize| ((i * 37 + k * 11) % 17) as f64 / 17.0 - 0.5;
        GruWeights {
            w_ih: tape.param(Tensor::from_fn(&[e, 3 * h], f(1))),
            w_hh: tape.param(Tensor::from_fn(&[h, 3 * h], f(2))),
            b_ih: tape.param(Tensor::from_fn(&[3 * h], f(3))),
            b_hh: tape.param(Tensor::from_fn(&[3 * h], f(4))),
        }
    }

    #[test]
    fn zero_length_gives_zero_state() {
        let mut tape = Tape::<f64>::new();
        let w = weights(&mut tape, 3, 4);
        let x = tape.constant(Tensor::full(&[2, 5, 3], 0.7));
        let h = gru_sequence(&mut tape, x, &[0, 0], &w).unwrap();
        assert_eq!(tape.value(h).data(), [0.0; 8]);
    }

    #[test]
    fn padding_is_ignored() {
        let mut tape = Tape::<f64>::new();
        let w = weights(&mut tape, 3, 4);
        let seq: Vec<f64> = (0..9).map(|i| (i as f64 * 0.3).sin()).collect();
        let short = tape.constant(Tensor::new(vec![1, 3, 3], seq.clone()).unwrap());
        let mut padded = seq;
        padded.extend([9.0; 6]);
        let long = tape.constant(Tensor::new(vec![1, 5, 3], padded).unwrap());
        let a = gru_sequence(&mut tape, short, &[3], &w).unwrap();
        let b = gru_sequence(&mut tape, long, &[3], &w).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn one_step_matches_closed_form() {
        // e = h = 1; hand-computed recurrence from a zero state
        let mut tape = Tape::<f64>::new();
        let w = GruWeights {
            w_ih: tape.param(Tensor::new(vec![1, 3], vec![0.5, -0.4, 0.3]).unwrap()),
            w_hh: tape.param(Tensor::new(vec![1, 3], vec![0.2, 0.1, -0.6]).unwrap()),
            b_ih: tape.param(Tensor::new(vec![3], vec![0.05, 0.0, -0.1]).unwrap()),
            b_hh: tape.param(Tensor::new(vec![3], vec![0.0, 0.2, 0.07]).unwrap()),
        };
        let x = tape.constant(Tensor::new(vec![1, 1, 1], vec![2.0]).unwrap());
        let out = gru_sequence(&mut tape, x, &[1], &w).unwrap();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let r = sig(2.0 * 0.5 + 0.05);
        let z = sig(2.0 * -0.4 + 0.2);
        let n = (2.0 * 0.3 - 0.1 + r * 0.07).tanh();
        let expect = (1.0 - z) * n;
        assert!((tape.value(out).data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn lstm_rejects_bad_lengths() {
        let mut tape = Tape::<f64>::new();
        let w = LstmWeights {
            w_ih: tape.param(Tensor::zeros(&[3, 8])),
            w_hh: tape.param(Tensor::zeros(&[2, 8])),
            bias: tape.param(Tensor::zeros(&[8])),
        };
        let x = tape.constant(Tensor::zeros(&[1, 2, 3]));
        assert!(lstm_sequence(&mut tape, x, &[3], &w).is_err());
        assert!(lstm_sequence(&mut tape, x, &[2], &w).is_ok());
    }
}
