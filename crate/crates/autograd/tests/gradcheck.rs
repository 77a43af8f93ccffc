//! Central finite-difference checks for every op on the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unblur_autograd::{Graph, Tensor, Var};

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Builds `f` over the given inputs (all as params), then compares the
/// analytic gradient of the returned scalar against central differences.
fn check(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let eval = |ins: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.scalar(out)
    };
    let h = 1e-6;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).expect("missing gradient");
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / (1e-6 + a.abs().max(numeric.abs()));
            assert!(
                err < 1e-4 || (a - numeric).abs() < 1e-8,
                "input {k} element {i}: analytic {a} numeric {numeric}"
            );
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn elementwise_ops() {
    let mut r = rng();
    let a = random(&mut r, vec![2, 3], 0.2, 2.0);
    let b = random(&mut r, vec![2, 3], -1.5, 1.5);
    check(&[a.clone(), b.clone()], |g, v| {
        let s = g.add(v[0], v[1]);
        let d = g.sub(s, v[1]);
        let m = g.mul(d, v[1]);
        let e = g.exp(m);
        let l = g.log(v[0]);
        let q = g.square(l);
        let t = g.tanh(v[1]);
        let sg = g.sigmoid(v[1]);
        let sp = g.softplus(v[1]);
        let ab = g.abs(v[1]);
        let sc = g.scale(ab, 0.7);
        let sh = g.add_scalar(sc, 3.0);
        let x1 = g.add(e, q);
        let x2 = g.mul(t, sg);
        let x3 = g.add(sp, sh);
        let x4 = g.add(x1, x2);
        let x5 = g.add(x4, x3);
        g.mean(x5)
    });
    check(&[b], |g, v| {
        let r = g.relu(v[0]);
        let l = g.leaky_relu(v[0], 0.2);
        let p = g.mul(r, l);
        let s = g.add(p, l);
        g.sum(s)
    });
}

#[test]
fn conv2d_strided_and_padded() {
    let mut r = rng();
    let x = random(&mut r, vec![2, 2, 6, 5], -1.0, 1.0);
    let w = random(&mut r, vec![3, 2, 3, 3], -0.5, 0.5);
    let b = random(&mut r, vec![3], -0.5, 0.5);
    let probe = random(&mut r, vec![2, 3, 3, 3], -1.0, 1.0);
    check(&[x, w, b, probe], |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1);
        let p = g.mul(y, v[3]);
        g.sum(p)
    });
}

#[test]
fn conv_transpose2d_doubles_resolution() {
    let mut r = rng();
    let x = random(&mut r, vec![2, 3, 3, 2], -1.0, 1.0);
    let w = random(&mut r, vec![3, 2, 4, 4], -0.5, 0.5);
    let b = random(&mut r, vec![2], -0.5, 0.5);
    let probe = random(&mut r, vec![2, 2, 6, 4], -1.0, 1.0);
    check(&[x, w, b, probe], |g, v| {
        let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1);
        assert_eq!(g.shape(y), &[2, 2, 6, 4]);
        let p = g.mul(y, v[3]);
        g.sum(p)
    });
}

#[test]
fn instance_norm_and_pooling() {
    let mut r = rng();
    let x = random(&mut r, vec![2, 2, 4, 4], -1.0, 1.0);
    let probe = random(&mut r, vec![2, 2, 4, 4], -1.0, 1.0);
    let probe2 = random(&mut r, vec![2, 2, 2, 2], -1.0, 1.0);
    check(&[x.clone(), probe], |g, v| {
        let y = g.instance_norm(v[0], 1e-5);
        let p = g.mul(y, v[1]);
        g.sum(p)
    });
    check(&[x, probe2], |g, v| {
        let y = g.avg_pool2(v[0]);
        let p = g.mul(y, v[1]);
        let mp = g.max_pool2(v[0]);
        let pm = g.mul(mp, v[1]);
        let s0 = g.sum(pm);
        let gp = g.global_avg_pool(v[0]);
        let s1 = g.sum(p);
        let sq = g.square(gp);
        let s2 = g.sum(sq);
        let s12 = g.add(s1, s2);
        g.add(s12, s0)
    });
}

#[test]
fn linear_slice_tile_concat() {
    let mut r = rng();
    let x = random(&mut r, vec![3, 4], -1.0, 1.0);
    let w = random(&mut r, vec![6, 4], -1.0, 1.0);
    let b = random(&mut r, vec![6], -1.0, 1.0);
    let feat = random(&mut r, vec![3, 2, 2, 3], -1.0, 1.0);
    let probe = random(&mut r, vec![3, 4, 2, 3], -1.0, 1.0);
    check(&[x, w, b, feat, probe], |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]));
        let mu = g.slice_cols(y, 0, 2);
        let lv = g.slice_cols(y, 4, 2);
        let e = g.exp(lv);
        let z = g.add(mu, e);
        let t = g.tile_spatial(z, 2, 3);
        let cat = g.concat_channels(v[3], t);
        let p = g.mul(cat, v[4]);
        g.sum(p)
    });
}
