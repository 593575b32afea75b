use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Builds `f` on a fresh graph, reduces the output with a fixed random
/// projection and compares the tape gradient with central differences.
fn check<F>(params: Vec<f64>, f: F)
where
    F: Fn(&mut Graph) -> Var,
{
    let proj = |g: &mut Graph, y: Var| {
        let n = g.value(y).len();
        let shape = g.shape(y).to_vec();
        let w = g.input(Tensor::new(shape, random(n, 99)));
        let p = g.mul(y, w);
        g.sum(p)
    };
    let eval = |p: &[f64]| {
        let mut g = Graph::new(p);
        let y = f(&mut g);
        let s = proj(&mut g, y);
        g.value(s).data[0]
    };
    let mut g = Graph::new(&params);
    let y = f(&mut g);
    let s = proj(&mut g, y);
    let analytic = g.backward(s).unwrap();
    let h = 1e-5;
    for i in 0..params.len() {
        let mut p = params.clone();
        p[i] += h;
        let up = eval(&p);
        p[i] -= 2.0 * h;
        let down = eval(&p);
        let fd = (up - down) / (2.0 * h);
        let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
        assert!(err < 1e-5, "param {i}: fd {fd} vs analytic {}", analytic[i]);
    }
}

#[test]
fn conv_and_bias() {
    check(random(2 * 2 * 5 * 5 + 3 * 2 * 9 + 3, 1), |g| {
        let x = g.param(0, vec![2, 2, 5, 5]);
        let w = g.param(100, vec![3, 2, 3, 3]);
        let b = g.param(154, vec![3]);
        g.conv2d(x, w, Some(b), 2, 1)
    });
}

#[test]
fn conv_transpose() {
    check(random(2 * 3 * 2 * 2 + 3 * 2 * 4 + 2, 2), |g| {
        let x = g.param(0, vec![2, 3, 2, 2]);
        let w = g.param(24, vec![3, 2, 2, 2]);
        let b = g.param(48, vec![2]);
        g.conv_transpose(x, w, Some(b))
    });
}

#[test]
fn batch_norm_train_and_eval() {
    check(random(2 * 3 * 3 * 3 + 6, 3), |g| {
        let x = g.param(0, vec![2, 3, 3, 3]);
        let gm = g.param(54, vec![3]);
        let bt = g.param(57, vec![3]);
        let (y, _, _) = g.batch_norm_train(x, gm, bt, 1e-5);
        let y = g.batch_norm_eval(y, gm, bt, &[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0], 1e-5);
        g.relu(y)
    });
}

#[test]
fn layer_norm_gelu() {
    check(random(4 * 6 + 12, 4), |g| {
        let x = g.param(0, vec![2, 2, 6]);
        let gm = g.param(24, vec![6]);
        let bt = g.param(30, vec![6]);
        let y = g.layer_norm(x, gm, bt, 1e-5);
        g.gelu(y)
    });
}

#[test]
fn elementwise_chain() {
    check(random(12, 5), |g| {
        let a = g.param(0, vec![2, 3]);
        let b = g.param(6, vec![2, 3]);
        let s = g.sub(a, b);
        let t = g.tanh(s);
        let m = g.mul(t, a);
        let ab = g.abs(m);
        let sg = g.sigmoid(b);
        let sc = g.scale(sg, 1.7);
        g.add(ab, sc)
    });
}

#[test]
fn pooling_upsample_reshape() {
    check(random(2 * 6 * 6, 6), |g| {
        let x = g.param(0, vec![1, 2, 6, 6]);
        let p = g.max_pool(x);
        let u = g.upsample(p, 4);
        g.reshape(u, vec![2, 144])
    });
}

#[test]
fn bmm_softmax_transpose() {
    check(random(2 * 3 * 4 + 2 * 5 * 4 + 2 * 4 * 3, 7), |g| {
        let a = g.param(0, vec![2, 3, 4]);
        let b = g.param(24, vec![2, 5, 4]);
        let c = g.param(64, vec![2, 4, 3]);
        let ab = g.bmm(a, b, true);
        let s = g.softmax_last(ab);
        let t = g.transpose12(s);
        let ac = g.bmm(a, c, false);
        let k = g.bmm(t, ac, false);
        k
    });
}

#[test]
fn concat_slice_linear() {
    check(random(2 * 2 * 3 + 2 * 3 * 3 + 3 * 4 + 4, 8), |g| {
        let a = g.param(0, vec![2, 2, 3]);
        let b = g.param(12, vec![2, 3, 3]);
        let w = g.param(30, vec![3, 4]);
        let bias = g.param(42, vec![4]);
        let c = g.concat1(&[a, b]);
        let s = g.slice1(c, 1, 3);
        g.linear(s, w, Some(bias))
    });
}

#[test]
fn multi_head_attention() {
    let (n, tq, tk, heads, d) = (2, 3, 4, 2, 2);
    let hd = heads * d;
    let nq = n * tq * hd;
    let nk = n * tk * hd;
    let npe = heads * tq * d;
    check(random(nq + 2 * nk + npe, 9), move |g| {
        let q = g.param(0, vec![n, tq, hd]);
        let k = g.param(nq, vec![n, tk, hd]);
        let v = g.param(nq + nk, vec![n, tk, hd]);
        let pe = g.param(nq + 2 * nk, vec![heads, tq, d]);
        g.attention(q, k, v, Some(pe), heads)
    });
}

#[test]
fn losses() {
    let target = [0u8, 1, 1, 0, 0, 1, 0, 0];
    let mut p = random(2 * 2 * 2 * 2 + 8, 10);
    for v in &mut p[..16] {
        *v = 0.5 + 0.4 * *v;
    }
    check(p, move |g| {
        let x = g.param(0, vec![2, 2, 2, 2]);
        let y = g.param(16, vec![8]);
        let b = g.weighted_bce(x, &target, [0.05, 0.95], 1e-7);
        let m = g.mse(y, &[0.1; 8]);
        let s = g.scale(m, 3.0);
        let t = g.add(b, s);
        g.reshape(t, vec![1])
    });
}

#[test]
fn attention_rows_are_distributions() {
    let p = random(2 * 3 * 4 + 2 * 2 * 5 * 4, 11);
    let mut g = Graph::new(&p);
    let q = g.param(0, vec![2, 3, 4]);
    let k = g.param(24, vec![2, 5, 4]);
    let v = g.param(64, vec![2, 5, 4]);
    let a = g.attention(q, k, v, None, 2);
    for row in g.attention_probs(a).unwrap().chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn non_scalar_root_is_rejected() {
    let p = [1.0, 2.0];
    let mut g = Graph::new(&p);
    let x = g.param(0, vec![2]);
    assert_eq!(g.backward(x), Err(GradError::NotScalar(vec![2])));
}
