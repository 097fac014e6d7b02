//! Central-difference checks of every differentiable op on the tape, in f64.

use bedfuse::graph::{Graph, Unary, Var};
use bedfuse::nn::{ParamId, ParamStore};
use bedfuse::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Build = dyn Fn(&mut Graph<f64>, &ParamStore<f64>, &[ParamId]) -> Var;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero so kinks (relu, abs) are not straddled.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.random_range(0.2..1.0);
        if rng.random::<bool>() { m } else { -m }
    })
}

/// Evaluates `sum(build(..) * r)` for a fixed random projection `r`.
fn loss(store: &ParamStore<f64>, ids: &[ParamId], build: &Build, proj_seed: u64) -> (f64, Graph<f64>, Var) {
    let mut g = Graph::new();
    let y = build(&mut g, store, ids);
    let mut rng = ChaCha8Rng::seed_from_u64(proj_seed);
    let r = random(g.value(y).shape(), &mut rng);
    let p = g.mul_const(y, r).unwrap();
    let l = g.sum(p);
    (g.value(l).data()[0], g, l)
}

fn check(params: Vec<Tensor<f64>>, build: &Build) {
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = params
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.add_weight(format!("p{i}"), t))
        .collect();
    let (_, g, l) = loss(&store, &ids, build, 99);
    let grads = g.backward(l).unwrap();
    let h = 1e-6;
    for &id in &ids {
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        for k in 0..store.value(id).numel() {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + h;
            let (lp, ..) = loss(&store, &ids, build, 99);
            store.value_mut(id).data_mut()[k] = orig - h;
            let (lm, ..) = loss(&store, &ids, build, 99);
            store.value_mut(id).data_mut()[k] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic.data()[k];
            let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-3));
            assert!(err < 1e-5, "{} [{k}]: analytic {a} numeric {numeric}", store.name(id));
        }
    }
}

#[test]
fn conv2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (4, 2, 1)] {
        let x = random(&[2, 3, 6, 5], &mut rng);
        let w = random(&[4, 3, k, k], &mut rng);
        let b = random(&[4], &mut rng);
        check(vec![x, w, b], &move |g, ps, ids| {
            let (x, w, b) = (g.param(ps, ids[0]), g.param(ps, ids[1]), g.param(ps, ids[2]));
            g.conv2d(x, w, Some(b), s, p).unwrap()
        });
    }
}

#[test]
fn conv_transpose2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (k, s, p) in [(4, 2, 1), (3, 1, 1)] {
        let x = random(&[2, 3, 4, 3], &mut rng);
        let w = random(&[3, 2, k, k], &mut rng);
        let b = random(&[2], &mut rng);
        check(vec![x, w, b], &move |g, ps, ids| {
            let (x, w, b) = (g.param(ps, ids[0]), g.param(ps, ids[1]), g.param(ps, ids[2]));
            g.conv_transpose2d(x, w, Some(b), s, p).unwrap()
        });
    }
}

#[test]
fn batch_and_instance_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for per_sample in [false, true] {
        let x = random(&[3, 2, 4, 4], &mut rng);
        let gamma = random(&[2], &mut rng);
        let beta = random(&[2], &mut rng);
        check(vec![x, gamma, beta], &move |g, ps, ids| {
            let (x, ga, be) = (g.param(ps, ids[0]), g.param(ps, ids[1]), g.param(ps, ids[2]));
            g.norm_batch_stats(x, Some(ga), Some(be), per_sample, 1e-5).unwrap().0
        });
    }
    let x = random(&[2, 2, 3, 3], &mut rng);
    check(vec![x], &|g, ps, ids| {
        let x = g.param(ps, ids[0]);
        g.norm_batch_stats(x, None, None, true, 1e-5).unwrap().0
    });
}

#[test]
fn fixed_stats_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[2, 3, 3, 3], &mut rng);
    let gamma = random(&[3], &mut rng);
    let beta = random(&[3], &mut rng);
    check(vec![x, gamma, beta], &|g, ps, ids| {
        let (x, ga, be) = (g.param(ps, ids[0]), g.param(ps, ids[1]), g.param(ps, ids[2]));
        g.norm_fixed_stats(x, Some(ga), Some(be), &[0.1, -0.3, 0.5], &[0.8, 1.5, 0.2], 1e-5).unwrap()
    });
}

#[test]
fn unary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for kind in [
        Unary::Relu,
        Unary::LeakyRelu(0.2),
        Unary::Tanh,
        Unary::Sigmoid,
        Unary::Abs,
        Unary::Square,
        Unary::Affine(-1.5, 0.25),
    ] {
        let x = away_from_zero(&[2, 2, 3, 3], &mut rng);
        check(vec![x], &move |g, ps, ids| {
            let x = g.param(ps, ids[0]);
            g.unary(x, kind)
        });
    }
    let x = Tensor::from_fn(&[1, 1, 2, 4], |i| 0.1 + 0.1 * i as f64);
    check(vec![x], &|g, ps, ids| {
        let x = g.param(ps, ids[0]);
        g.unary(x, Unary::LogClamped(1e-7))
    });
}

#[test]
fn arithmetic_and_shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random(&[2, 3, 4, 4], &mut rng);
    let b = random(&[2, 3, 4, 4], &mut rng);
    let c = random(&[2, 2, 4, 4], &mut rng);
    let w = random(&[3], &mut rng);
    let small = random(&[2, 3, 2, 2], &mut rng);
    let plane = random(&[2, 3], &mut rng);
    check(vec![a, b, c, w, small], &move |g, ps, ids| {
        let v: Vec<Var> = ids.iter().map(|&id| g.param(ps, id)).collect();
        let s = g.add_n(&[v[0], v[1], v[0]]).unwrap();
        let d = g.sub(s, v[1]).unwrap();
        let m = g.mul(d, v[1]).unwrap();
        let cs = g.channel_scale(m, v[3]).unwrap();
        let up = g.upsample_nearest(v[4], 2).unwrap();
        let e = g.add(cs, up).unwrap();
        let pl = g.mul_plane_const(e, plane.clone()).unwrap();
        g.concat_channels(&[pl, v[2]]).unwrap()
    });
}

#[test]
fn mean_reduction() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[2, 2, 3, 3], &mut rng);
    check(vec![x], &|g, ps, ids| {
        let x = g.param(ps, ids[0]);
        let sq = g.unary(x, Unary::Square);
        g.mean(sq)
    });
}
