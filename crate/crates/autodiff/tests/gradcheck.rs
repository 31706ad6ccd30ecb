//! Central finite-difference verification of every op's backward pass.
//!
//! All checks run in f64 with step 1e-5 so truncation and rounding both stay
//! well below the 1e-6 comparison tolerance.

use heightlens_autodiff::{Graph, NodeId};
use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn random_array(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    ArrayD::from_shape_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Compare analytic input gradients against central differences on a sample
/// of coordinates of every leaf.
fn check<B>(build: B, shapes: &[&[usize]], seed: u64)
where
    B: Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<ArrayD<f64>> = shapes.iter().map(|s| random_array(s, &mut rng)).collect();

    let eval = |arrays: &[ArrayD<f64>]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = arrays.iter().map(|a| g.leaf(a.clone(), true)).collect();
        let out = build(&mut g, &ids);
        g.scalar(out)
    };

    // analytic
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|a| g.leaf(a.clone(), true)).collect();
    let out = build(&mut g, &ids);
    let grads = g.backward(out);

    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(ids[i])
            .unwrap_or_else(|| panic!("no grad for input {i}"));
        let len = input.len();
        let samples: Vec<usize> = if len <= 8 {
            (0..len).collect()
        } else {
            (0..8).map(|_| rng.random_range(0..len)).collect()
        };
        for &flat in &samples {
            let mut plus = inputs.to_vec();
            plus[i].as_slice_mut().unwrap()[flat] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].as_slice_mut().unwrap()[flat] -= STEP;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            let an = analytic.as_slice().unwrap()[flat];
            let denom = an.abs().max(fd.abs()).max(1e-4);
            assert!(
                (fd - an).abs() / denom < TOL,
                "input {i} flat {flat}: fd={fd} analytic={an}"
            );
        }
    }
}

#[test]
fn conv2d_grad() {
    check(
        |g, ids| {
            let y = g.conv2d(ids[0], ids[1], 1, 1);
            g.sum_all(y)
        },
        &[&[2, 3, 5, 5], &[4, 3, 3, 3]],
        1,
    );
}

#[test]
fn conv2d_strided_grad() {
    check(
        |g, ids| {
            let y = g.conv2d(ids[0], ids[1], 4, 0);
            let y = g.mul(y, y);
            g.mean_all(y)
        },
        &[&[1, 3, 8, 8], &[4, 3, 4, 4]],
        2,
    );
}

#[test]
fn bias_relu_grad() {
    check(
        |g, ids| {
            let y = g.bias_add(ids[0], ids[1]);
            let y = g.relu(y);
            g.sum_all(y)
        },
        &[&[2, 4, 3, 3], &[4]],
        3,
    );
}

#[test]
fn gelu_softplus_exp_abs_grad() {
    check(
        |g, ids| {
            let a = g.gelu(ids[0]);
            let b = g.softplus(a);
            let c = g.exp(b);
            let d = g.abs(c);
            g.mean_all(d)
        },
        &[&[2, 2, 4, 4]],
        4,
    );
}

#[test]
fn arith_grad() {
    check(
        |g, ids| {
            let s = g.add(ids[0], ids[1]);
            let d = g.sub(s, ids[2]);
            let m = g.mul(d, ids[0]);
            let m = g.scale(m, 0.37);
            let m = g.add_const(m, -0.5);
            g.sum_all(m)
        },
        &[&[3, 5], &[3, 5], &[3, 5]],
        5,
    );
}

#[test]
fn concat_grad() {
    check(
        |g, ids| {
            let y = g.concat_c(ids[0], ids[1]);
            let y = g.mul(y, y);
            g.sum_all(y)
        },
        &[&[1, 2, 3, 3], &[1, 3, 3, 3]],
        6,
    );
}

#[test]
fn upsample_pool_grad() {
    check(
        |g, ids| {
            let a = g.upsample_nearest2(ids[0]);
            let b = g.avg_pool2(a);
            let c = g.upsample_bilinear(b, 7, 9);
            let c = g.mul(c, c);
            g.mean_all(c)
        },
        &[&[1, 2, 4, 4]],
        7,
    );
}

#[test]
fn layer_norm_grad() {
    check(
        |g, ids| {
            let y = g.layer_norm_ch(ids[0], ids[1], ids[2], 1e-5);
            let y = g.mul(y, y);
            g.sum_all(y)
        },
        &[&[2, 4, 3, 3], &[4], &[4]],
        8,
    );
}

#[test]
fn attention_pipeline_grad() {
    // q/k/v leaves -> windowed attention -> merge -> scalar
    check(
        |g, ids| {
            let win = 2;
            let heads = 2;
            let (n, c, h, w) = (1, 4, 4, 4);
            let q = g.win_part(ids[0], win, heads);
            let k = g.win_part(ids[1], win, heads);
            let v = g.win_part(ids[2], win, heads);
            let scores = g.batch_matmul(q, k, false, true);
            let scores = g.scale(scores, 1.0 / (2.0f64).sqrt());
            let p = g.softmax_last(scores);
            let o = g.batch_matmul(p, v, false, false);
            let m = g.win_merge(o, win, heads, n, c, h, w);
            let m = g.mul(m, m);
            g.sum_all(m)
        },
        &[&[1, 4, 4, 4], &[1, 4, 4, 4], &[1, 4, 4, 4]],
        9,
    );
}

#[test]
fn batch_matmul_transpose_variants_grad() {
    for (ta, tb, sa, sb) in [
        (false, false, [2usize, 3, 4], [2usize, 4, 5]),
        (true, false, [2, 4, 3], [2, 4, 5]),
        (false, true, [2, 3, 4], [2, 5, 4]),
        (true, true, [2, 4, 3], [2, 5, 4]),
    ] {
        check(
            move |g, ids| {
                let y = g.batch_matmul(ids[0], ids[1], ta, tb);
                let y = g.mul(y, y);
                g.sum_all(y)
            },
            &[&sa, &sb],
            10 + ta as u64 + 2 * tb as u64,
        );
    }
}

#[test]
fn sum_window_reshape_grad() {
    check(
        |g, ids| {
            let r = g.reshape(ids[0], &[1, 1, 6, 4]);
            g.sum_window(r, 1, 0, 3)
        },
        &[&[2, 3, 4]],
        14,
    );
}

#[test]
fn mean_all_grad() {
    check(
        |g, ids| {
            let y = g.mul(ids[0], ids[0]);
            g.mean_all(y)
        },
        &[&[3, 7]],
        15,
    );
}
