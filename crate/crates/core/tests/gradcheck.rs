//! Tape gradients of every primitive against central differences.

mod common;

use common::{gradcheck, random_tensor};
use metaproto::autodiff::{BatchNormMode, Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Reduce any output to a scalar with fixed random weights, so every output
/// element gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> Var {
    let w = random_tensor(&mut rng(seed), g.shape(v));
    let w = g.constant(w);
    let p = g.mul(v, w).unwrap();
    g.sum(p)
}

fn check(name: &str, inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var) {
    let err = gradcheck(inputs, H, build);
    assert!(err < TOL, "{name}: max relative error {err:e}");
}

#[test]
fn elementwise() {
    let mut r = rng(1);
    let a = random_tensor(&mut r, &[3, 4]);
    let b = random_tensor(&mut r, &[3, 4]);
    check("add", &[a.clone(), b.clone()], |g, v| {
        let y = g.add(v[0], v[1]).unwrap();
        weighted_sum(g, y, 9)
    });
    check("mul", &[a.clone(), b.clone()], |g, v| {
        let y = g.mul(v[0], v[1]).unwrap();
        weighted_sum(g, y, 9)
    });
    check("scale", &[a.clone()], |g, v| {
        let y = g.scale(v[0], -2.5);
        weighted_sum(g, y, 9)
    });
    // keep arguments away from the kink and the domain edges
    let pos = Tensor::new(vec![6], vec![0.3, 0.7, 1.1, 2.0, 0.05, 3.0]).unwrap();
    check("log", &[pos.clone()], |g, v| {
        let y = g.log(v[0]);
        weighted_sum(g, y, 3)
    });
    check("sqrt", &[pos.clone()], |g, v| {
        let y = g.sqrt(v[0]);
        weighted_sum(g, y, 3)
    });
    check("exp", &[a.clone()], |g, v| {
        let y = g.exp(v[0]);
        weighted_sum(g, y, 9)
    });
    let away = Tensor::new(vec![6], vec![-0.8, 0.4, -0.2, 0.9, 0.15, -1.3]).unwrap();
    check("relu", &[away], |g, v| {
        let y = g.relu(v[0]);
        weighted_sum(g, y, 3)
    });
}

#[test]
fn reductions_and_reshapes() {
    let mut r = rng(2);
    let a = random_tensor(&mut r, &[2, 3, 4]);
    check("sum", &[a.clone()], |g, v| {
        let y = g.mul(v[0], v[0]).unwrap();
        g.sum(y)
    });
    check("mean", &[a.clone()], |g, v| {
        let y = g.mul(v[0], v[0]).unwrap();
        g.mean(y)
    });
    for axis in 0..3 {
        check("mean_over_axis", &[a.clone()], |g, v| {
            let y = g.mean_over_axis(v[0], axis).unwrap();
            weighted_sum(g, y, 4)
        });
        check("max_over_axis", &[a.clone()], |g, v| {
            let y = g.max_over_axis(v[0], axis).unwrap();
            weighted_sum(g, y, 4)
        });
    }
    check("reshape", &[a.clone()], |g, v| {
        let y = g.reshape(v[0], &[6, 4]).unwrap();
        weighted_sum(g, y, 5)
    });
    check("slice_rows", &[a.clone()], |g, v| {
        let y = g.slice_rows(v[0], 1, 2).unwrap();
        weighted_sum(g, y, 5)
    });
    let b = random_tensor(&mut r, &[1, 3, 4]);
    check("concat_rows", &[a, b], |g, v| {
        let y = g.concat_rows(&[v[1], v[0], v[1]]).unwrap();
        weighted_sum(g, y, 5)
    });
}

#[test]
fn linear_algebra() {
    let mut r = rng(3);
    let a = random_tensor(&mut r, &[3, 5]);
    let b = random_tensor(&mut r, &[5, 2]);
    check("matmul", &[a.clone(), b.clone()], |g, v| {
        let y = g.matmul(v[0], v[1]).unwrap();
        weighted_sum(g, y, 6)
    });
    let w = random_tensor(&mut r, &[5, 2]);
    let bias = random_tensor(&mut r, &[2]);
    check("linear", &[a.clone(), w, bias.clone()], |g, v| {
        let y = g.linear(v[0], v[1], v[2]).unwrap();
        weighted_sum(g, y, 6)
    });
    let x = random_tensor(&mut r, &[3, 2]);
    check("add_bias", &[x, bias], |g, v| {
        let y = g.add_bias(v[0], v[1]).unwrap();
        weighted_sum(g, y, 6)
    });
    let q = random_tensor(&mut r, &[4, 5]);
    check("squared_difference_sum", &[q, a], |g, v| {
        let y = g.squared_difference_sum(v[0], v[1]).unwrap();
        weighted_sum(g, y, 6)
    });
}

#[test]
fn convolution_pooling_and_batch_norm() {
    let mut r = rng(4);
    let x = random_tensor(&mut r, &[2, 2, 5, 4]);
    let w = random_tensor(&mut r, &[3, 2, 3, 3]);
    check("conv2d", &[x.clone(), w], |g, v| {
        let y = g.conv2d(v[0], v[1]).unwrap();
        weighted_sum(g, y, 7)
    });
    check("max_pool2d", &[x.clone()], |g, v| {
        let y = g.max_pool2d(v[0]).unwrap();
        weighted_sum(g, y, 7)
    });
    let gamma = random_tensor(&mut r, &[2]);
    let beta = random_tensor(&mut r, &[2]);
    check("batch_norm train", &[x.clone(), gamma.clone(), beta.clone()], |g, v| {
        let y = g.batch_norm(v[0], v[1], v[2], &BatchNormMode::Train).unwrap();
        weighted_sum(g, y, 8)
    });
    let eval = BatchNormMode::Eval { mean: vec![0.1, -0.2], var: vec![0.5, 1.5] };
    check("batch_norm eval", &[x, gamma, beta], |g, v| {
        let y = g.batch_norm(v[0], v[1], v[2], &eval).unwrap();
        weighted_sum(g, y, 8)
    });
}

#[test]
fn losses() {
    let mut r = rng(5);
    let logits = random_tensor(&mut r, &[4, 3]);
    check("softmax_cross_entropy", &[logits.clone()], |g, v| {
        let y = g.softmax_cross_entropy(v[0], &[0, 2, 1, 2]).unwrap();
        weighted_sum(g, y, 10)
    });
    let targets = [1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0];
    check("sigmoid_binary_cross_entropy", &[logits], |g, v| {
        let y = g.sigmoid_binary_cross_entropy(v[0], &targets).unwrap();
        weighted_sum(g, y, 10)
    });
}
