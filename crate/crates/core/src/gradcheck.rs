//! Central-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::netdef::{build_model, Model, ModelSpec, PoolMode};
use crate::tensor::Tensor;
use crate::train::{loss_on_tape, LossWeights};

/// Denominator floor for the per-coordinate relative error, so coordinates
/// whose true gradient is zero are judged by their absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the tape gradient of scalar `f(x)` against
/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for every coordinate and
/// returns the largest relative error.
pub fn finite_difference_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let errs = finite_difference_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)?;
    Ok(errs[0])
}

/// Multi-input form: returns the largest relative error per input.
pub fn finite_difference_check_many<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        scalar(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    scalar(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut worst = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[which].shape()));
        let mut max_err = 0.0f64;
        for i in 0..inputs[which].numel() {
            let orig = inputs[which].data()[i];
            probe[which].data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe[which].data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            max_err = max_err.max(relative_error(analytic.data()[i], numeric));
        }
        worst.push(max_err);
    }
    Ok(worst)
}

fn scalar(tape: &Tape<f64>, out: Var) -> Result<f64> {
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::shape("finite_difference_check", format!("non-scalar output {:?}", v.shape())));
    }
    Ok(v.data()[0])
}

/// Uniform values in `[-1, 1)` from a seeded stream.
pub fn uniform_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Reduces a `[C, H, W]` map to a scalar through a full-size random
/// correlation, a linear layer and a cross-entropy, so every output
/// coordinate carries a distinct weight.
fn scalarize(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let probe = tape.leaf(uniform_tensor(&[2, shape[0], shape[1], shape[2]], seed), false);
    let y = tape.conv2d(x, probe, 1, 0)?;
    let y = tape.global_avg_pool(y)?;
    vector_loss(tape, y, seed + 1)
}

fn vector_loss(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let d = tape.value(v).numel();
    let w = tape.leaf(uniform_tensor(&[3, d], seed), false);
    let b = tape.leaf(uniform_tensor(&[3], seed + 1), false);
    let z = tape.fully_connected(v, w, b)?;
    tape.softmax_cross_entropy(z, 1)
}

/// Largest relative error of every differentiable tape operation on small
/// random inputs, labelled by operation and configuration.
pub fn kernel_suite(eps: f64) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    let worst = |v: Vec<f64>| v.into_iter().fold(0.0, f64::max);

    for (n, &(c, h, o, k, s, p)) in [(2, 6, 3, 3, 1, 1), (3, 7, 2, 3, 2, 1), (2, 5, 4, 1, 1, 0)].iter().enumerate() {
        let x = uniform_tensor(&[c, h, h], n as u64);
        let w = uniform_tensor(&[o, c, k, k], 10 + n as u64);
        let errs = finite_difference_check_many(
            |tape, v| {
                let y = tape.conv2d(v[0], v[1], s, p)?;
                scalarize(tape, y, 50)
            },
            &[x, w],
            eps,
        )?;
        out.push((format!("conv2d k{k} s{s} p{p}"), worst(errs)));
    }

    // inputs kept away from the kink
    let x = uniform_tensor(&[2, 4, 4], 3).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    let e = finite_difference_check(
        |tape, x| {
            let y = tape.relu(x);
            scalarize(tape, y, 60)
        },
        &x,
        eps,
    )?;
    out.push(("relu".into(), e));

    let x = uniform_tensor(&[2, 6, 6], 4);
    for (win, stride, pad) in [(2, 2, 0), (3, 2, 1)] {
        let e = finite_difference_check(
            |tape, x| {
                let y = tape.max_pool2d(x, win, stride, pad)?;
                scalarize(tape, y, 70)
            },
            &x,
            eps,
        )?;
        out.push((format!("max_pool2d {win}x{win} s{stride} p{pad}"), e));
    }

    let x = uniform_tensor(&[4, 5, 5], 5);
    let gmp = finite_difference_check(
        |tape, x| {
            let y = tape.global_max_pool(x)?;
            vector_loss(tape, y, 80)
        },
        &x,
        eps,
    )?;
    out.push(("global_max_pool".into(), gmp));
    let gap = finite_difference_check(
        |tape, x| {
            let y = tape.global_avg_pool(x)?;
            vector_loss(tape, y, 81)
        },
        &x,
        eps,
    )?;
    out.push(("global_avg_pool".into(), gap));

    let x = uniform_tensor(&[12], 6);
    let ccp = finite_difference_check(
        |tape, x| {
            let y = tape.cross_channel_avg_pool(x, 3)?;
            vector_loss(tape, y, 90)
        },
        &x,
        eps,
    )?;
    out.push(("cross_channel_avg_pool".into(), ccp));

    let errs = finite_difference_check_many(
        |tape, v| {
            let z = tape.fully_connected(v[0], v[1], v[2])?;
            tape.softmax_cross_entropy(z, 2)
        },
        &[x, uniform_tensor(&[4, 12], 7), uniform_tensor(&[4], 8)],
        eps,
    )?;
    out.push(("fully_connected + softmax_cross_entropy".into(), worst(errs)));

    let errs = finite_difference_check_many(
        |tape, v| {
            let s = tape.scale(v[1], 0.3);
            let y = tape.add(v[0], s)?;
            vector_loss(tape, y, 95)
        },
        &[uniform_tensor(&[6], 12), uniform_tensor(&[6], 13)],
        eps,
    )?;
    out.push(("add + scale".into(), worst(errs)));
    Ok(out)
}

/// Largest relative error of the gradient of the summed stream losses on a
/// 16x16 TinyNet with 3 classes and 2 filters per class. Parameters with at
/// most 300 entries are checked at every coordinate, larger ones at 40
/// random coordinates.
pub fn composed_objective_error(pool: PoolMode, supervision: bool, eps: f64) -> Result<f64> {
    let mut spec = ModelSpec::tinynet(3, 2);
    spec.input_size = 16;
    spec.pool6 = pool;
    let mut model = build_model::<f64>(&spec, &[], 3)?;
    let image = uniform_tensor(&[3, 16, 16], 4).map(|v| 0.5 + 0.5 * v);
    let label = 1;
    let weights = LossWeights::default();

    let loss = |m: &Model<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let fwd = m.forward_on_tape(&mut tape, &image, false)?;
        let (l, _) = loss_on_tape(&mut tape, &fwd, label, weights, supervision)?;
        Ok(tape.value(l).data()[0])
    };
    let mut tape = Tape::new();
    let fwd = model.forward_on_tape(&mut tape, &image, true)?;
    let (l, _) = loss_on_tape(&mut tape, &fwd, label, weights, supervision)?;
    let grads = tape.backward(l)?;
    let analytic: Vec<Tensor<f64>> = fwd
        .params
        .iter()
        .zip(model.params())
        .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0.0f64;
    for (p, g) in analytic.iter().enumerate() {
        let n = g.numel();
        let coords: Vec<usize> = if n <= 300 {
            (0..n).collect()
        } else {
            (0..40).map(|_| rng.gen_range(0..n)).collect()
        };
        for i in coords {
            let orig = model.params()[p].data()[i];
            model.params_mut()[p].data_mut()[i] = orig + eps;
            let plus = loss(&model)?;
            model.params_mut()[p].data_mut()[i] = orig - eps;
            let minus = loss(&model)?;
            model.params_mut()[p].data_mut()[i] = orig;
            worst = worst.max(relative_error(g.data()[i], (plus - minus) / (2.0 * eps)));
        }
    }
    Ok(worst)
}
