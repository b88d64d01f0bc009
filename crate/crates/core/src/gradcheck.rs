//! Finite-difference checks of every tensor op and both losses.
//!
//! Each check contracts the op's output with a random vector `r`, so the
//! scalar `r . op(x)` has the analytic gradient `op_backward(r)`. Inputs to
//! ReLU and max-pool are drawn away from their kinks and ties.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::{contrastive_triplet_loss, hinge_triplet_loss, LossConfig, LossKind, TripletEmbeddings};
use crate::seed::{rng_for, SeededRng};
use crate::tensor::{self, finite_diff_gradcheck, ConvSpec, Mode, Padding, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpCheck {
    pub op: String,
    pub max_relative_error: f64,
}

fn random(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches")
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Values bounded away from zero.
fn off_kink(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let mut t = random(shape, rng);
    t.data_mut().iter_mut().for_each(|v| *v = v.signum() * (0.1 + v.abs()));
    t
}

/// Distinct values on a 0.01 grid, shuffled, so no pool window has a near tie.
fn distinct(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let len: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..len).map(|i| i as f64 * 0.01 - len as f64 * 0.005).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).expect("shape matches")
}

fn check(out: &mut Vec<OpCheck>, op: &str, err: f64) {
    out.push(OpCheck { op: op.to_string(), max_relative_error: err });
}

/// Runs every op check for one seed.
pub fn op_gradchecks(seed: u64, epsilon: f64) -> Result<Vec<OpCheck>> {
    let mut rng = rng_for(seed, &[0x4743]);
    let mut out = Vec::new();

    for (name, spec, shape) in [
        ("conv2d same", ConvSpec::same3x3(2, 3), [2usize, 5, 6]),
        (
            "conv2d valid stride 2",
            ConvSpec { kernel_h: 3, kernel_w: 2, in_channels: 2, out_channels: 2, stride: 2, padding: Padding::Valid },
            [2, 7, 6],
        ),
        (
            "conv2d same stride 2",
            ConvSpec { kernel_h: 3, kernel_w: 3, in_channels: 1, out_channels: 2, stride: 2, padding: Padding::Same },
            [1, 6, 5],
        ),
    ] {
        let x = random(&shape, &mut rng);
        let w = random(&spec.weight_shape(), &mut rng);
        let b = random(&[spec.out_channels], &mut rng);
        let y = tensor::conv2d(&x, &w, &b, &spec)?;
        let r = random(y.shape(), &mut rng);
        let e_in = finite_diff_gradcheck(
            |x| {
                let g = tensor::conv2d_backward(x, &w, &b, &spec, &r)?;
                Ok((dot(&tensor::conv2d(x, &w, &b, &spec)?, &r), g.input.expect("input grad")))
            },
            &x,
            epsilon,
        )?;
        let e_w = finite_diff_gradcheck(
            |w| Ok((dot(&tensor::conv2d(&x, w, &b, &spec)?, &r), tensor::conv2d_backward(&x, w, &b, &spec, &r)?.weights)),
            &w,
            epsilon,
        )?;
        let e_b = finite_diff_gradcheck(
            |b| Ok((dot(&tensor::conv2d(&x, &w, b, &spec)?, &r), tensor::conv2d_backward(&x, &w, b, &spec, &r)?.bias)),
            &b,
            epsilon,
        )?;
        check(&mut out, &format!("{name} input"), e_in);
        check(&mut out, &format!("{name} weights"), e_w);
        check(&mut out, &format!("{name} bias"), e_b);
    }

    let x = off_kink(&[3, 4, 4], &mut rng);
    let r = random(x.shape(), &mut rng);
    let e = finite_diff_gradcheck(|x| Ok((dot(&tensor::relu(x), &r), tensor::relu_backward(x, &r)?)), &x, epsilon)?;
    check(&mut out, "relu", e);

    let x = distinct(&[2, 6, 4], &mut rng);
    let r = random(&[2, 3, 2], &mut rng);
    let e = finite_diff_gradcheck(
        |x| {
            let p = tensor::maxpool2d_with_indices(x)?;
            Ok((dot(&p.output, &r), tensor::maxpool2d_backward(x.shape(), &p.argmax, &r)?))
        },
        &x,
        epsilon,
    )?;
    check(&mut out, "maxpool2d", e);

    let x = random(&[3, 4, 5], &mut rng);
    let r = random(&[3], &mut rng);
    let e = finite_diff_gradcheck(
        |x| Ok((dot(&tensor::global_avg_pool(x)?, &r), tensor::global_avg_pool_backward(x.shape(), &r)?)),
        &x,
        epsilon,
    )?;
    check(&mut out, "global_avg_pool", e);

    let x = random(&[7], &mut rng);
    let w = random(&[4, 7], &mut rng);
    let b = random(&[4], &mut rng);
    let r = random(&[4], &mut rng);
    let f = |x: &Tensor, w: &Tensor, b: &Tensor| -> Result<(f64, tensor::DenseGrads)> {
        Ok((dot(&tensor::dense_affine(x, w, b)?, &r), tensor::dense_affine_backward(x, w, b, &r)?))
    };
    check(&mut out, "dense input", finite_diff_gradcheck(|x| f(x, &w, &b).map(|(v, g)| (v, g.input)), &x, epsilon)?);
    check(&mut out, "dense weights", finite_diff_gradcheck(|w| f(&x, w, &b).map(|(v, g)| (v, g.weights)), &w, epsilon)?);
    check(&mut out, "dense bias", finite_diff_gradcheck(|b| f(&x, &w, b).map(|(v, g)| (v, g.bias)), &b, epsilon)?);

    let x = random(&[12], &mut rng);
    let r = random(&[12], &mut rng);
    let mask_seed = rng.gen::<u64>();
    let e = finite_diff_gradcheck(
        |x| {
            let (y, mask) = tensor::dropout_mask(x, 0.5, Mode::Train, &mut rng_for(mask_seed, &[]))?;
            Ok((dot(&y, &r), tensor::dropout_backward(mask.as_deref(), &r)))
        },
        &x,
        epsilon,
    )?;
    check(&mut out, "dropout", e);

    let a = random(&[3], &mut rng);
    let b = random(&[5], &mut rng);
    let r = random(&[8], &mut rng);
    let e_a = finite_diff_gradcheck(
        |a| Ok((dot(&tensor::concat_channels(&[a, &b])?, &r), tensor::split_channels(&r, &[3, 5])?.remove(0))),
        &a,
        epsilon,
    )?;
    let e_b = finite_diff_gradcheck(
        |b| Ok((dot(&tensor::concat_channels(&[&a, b])?, &r), tensor::split_channels(&r, &[3, 5])?.remove(1))),
        &b,
        epsilon,
    )?;
    check(&mut out, "concat", e_a.max(e_b));

    for kind in [LossKind::Hinge, LossKind::Contrastive] {
        out.push(OpCheck { op: format!("{kind} loss"), max_relative_error: loss_gradcheck(kind, &mut rng, epsilon)? });
    }
    Ok(out)
}

/// Checks a loss at a random point that sits in its smooth active region:
/// the hinge term strictly positive and, for the contrastive loss,
/// `0 < D(q, n) < m`.
fn loss_gradcheck(kind: LossKind, rng: &mut SeededRng, epsilon: f64) -> Result<f64> {
    let cfg = LossConfig { kind, margin: 1.0 };
    let dim = 6;
    let (q, p, n) = loop {
        let q = random(&[dim], rng);
        let p = random(&[dim], rng).map(|v| v * 0.3);
        let n = random(&[dim], rng).map(|v| v * 0.1);
        let n = Tensor::from_vec(q.data().iter().zip(n.data()).map(|(a, b)| a + b).collect());
        let dp = crate::losses::squared_distance(q.data(), p.data());
        let dn = crate::losses::squared_distance(q.data(), n.data());
        let active = match kind {
            LossKind::Hinge => dp - dn + 1.0 > 0.1,
            LossKind::Contrastive => dn > 0.01 && dn.sqrt() < 0.9,
        };
        if active {
            break (q, p, n);
        }
    };
    let eval = |q: &Tensor, p: &Tensor, n: &Tensor| {
        let t = TripletEmbeddings::new(q.data(), p.data(), n.data())?;
        match kind {
            LossKind::Hinge => hinge_triplet_loss(&t, &cfg),
            LossKind::Contrastive => contrastive_triplet_loss(&t, &cfg),
        }
    };
    let e_q = finite_diff_gradcheck(|q| eval(q, &p, &n).map(|o| (o.loss, Tensor::from_vec(o.grad_q))), &q, epsilon)?;
    let e_p = finite_diff_gradcheck(|p| eval(&q, p, &n).map(|o| (o.loss, Tensor::from_vec(o.grad_p))), &p, epsilon)?;
    let e_n = finite_diff_gradcheck(|n| eval(&q, &p, n).map(|o| (o.loss, Tensor::from_vec(o.grad_n))), &n, epsilon)?;
    Ok(e_q.max(e_p).max(e_n))
}
