//! Shared oracles for the integration tests.
#![allow(dead_code)]

use a2d_core::numerics::{Tape, Tensor, Var};
use a2d_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `|a − n| / max(|a|, |n|, floor)`. The floor keeps near-zero gradients
/// from turning rounding noise into large relative errors.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Random row-stochastic tensor (rows along the last axis).
pub fn random_distribution(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let cols = *shape.last().unwrap();
    let mut t = Tensor::from_fn(shape, |_| rng.random_range(0.05..1.0));
    for row in t.data_mut().chunks_mut(cols) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    t
}

/// Builds `f` on leaves for `inputs` and reduces it to a scalar with fixed
/// random weights so every output element contributes.
fn scalarize(
    tape: &mut Tape,
    inputs: &[Tensor],
    weights_seed: u64,
    f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<(Var, Vec<Var>)> {
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(&t.clone().requiring_grad())).collect();
    let out = f(tape, &leaves)?;
    let shape = tape.shape(out).to_vec();
    let mut r = rng(weights_seed);
    let w = tape.constant(&Tensor::from_fn(&shape, |_| r.random_range(0.5..1.5)));
    let prod = tape.mul(out, w)?;
    Ok((tape.sum(prod), leaves))
}

/// Largest relative error between the tape gradient and a central
/// difference, over every element of every input.
pub fn max_grad_error(
    inputs: &[Tensor],
    h: f64,
    floor: f64,
    f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, leaves) = scalarize(&mut tape, inputs, 99, f)?;
    let grads = tape.backward(loss)?;
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let (l, _) = scalarize(&mut t, xs, 99, f)?;
        Ok(t.item(l))
    };
    let mut worst: f64 = 0.0;
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(*leaf).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for j in 0..inputs[k].numel() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[j] += h;
            let up = eval(&xs)?;
            xs[k].data_mut()[j] -= 2.0 * h;
            let down = eval(&xs)?;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(analytic[j], numeric, floor));
        }
    }
    Ok(worst)
}

/// Reference dense matmul `[m, k] × [k, n]`.
pub fn matmul_ref(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    out
}

pub fn softmax_ref(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
