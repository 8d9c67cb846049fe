//! Finite-difference and brute-force oracles for the network layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::attention::SelfAttention;
use super::layers::{avg_pool, avg_pool_backward, upsample, upsample_backward, Conv2d, Linear};
use super::params::ParamStore;
use super::tensor::Slab;
use super::unet::{NetSpec, Network, Stage};
use crate::error::DefError;

const FD_STEP: f64 = 1e-4;
const REL_TOL: f64 = 1e-3;

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn random_slab(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Slab {
    Slab::from_vec(c, h, w, random_vec(rng, c * h * w)).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn assert_close(analytic: f64, numeric: f64, what: &str) {
    let scale = analytic.abs().max(numeric.abs());
    assert!(
        (analytic - numeric).abs() <= REL_TOL * scale + 1e-8,
        "{what}: analytic {analytic} vs finite difference {numeric}"
    );
}

/// Central differences of `loss` with respect to every entry of `v`.
fn numeric_grad(v: &mut [f64], mut loss: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..v.len())
        .map(|i| {
            let orig = v[i];
            v[i] = orig + FD_STEP;
            let up = loss(v);
            v[i] = orig - FD_STEP;
            let down = loss(v);
            v[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Naive periodic cross-correlation.
fn brute_conv(x: &Slab, weights: &[f64], bias: &[f64], out_ch: usize, k: usize) -> Slab {
    let (h, w) = (x.height as isize, x.width as isize);
    let r = (k / 2) as isize;
    let mut y = Slab::zeros(out_ch, x.height, x.width);
    for o in 0..out_ch {
        for i in 0..h {
            for j in 0..w {
                let mut s = bias.get(o).copied().unwrap_or(0.0);
                for c in 0..x.channels {
                    for a in 0..k as isize {
                        for b in 0..k as isize {
                            let si = (i + a - r).rem_euclid(h) as usize;
                            let sj = (j + b - r).rem_euclid(w) as usize;
                            let wi = ((o * x.channels + c) * k + a as usize) * k + b as usize;
                            s += weights[wi] * x.channel(c)[si * x.width + sj];
                        }
                    }
                }
                y.channel_mut(o)[(i * w + j) as usize] = s;
            }
        }
    }
    y
}

#[test]
fn conv_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::default();
    let conv = Conv2d::new(&mut store, "c", 2, 3, 3, true);
    store.values = random_vec(&mut rng, store.len());
    let x = random_slab(&mut rng, 2, 4, 4);
    let fast = conv.forward(&store.values, &x);
    let slow = brute_conv(
        &x,
        conv.weight.slice(&store.values),
        conv.bias.unwrap().slice(&store.values),
        3,
        3,
    );
    for (a, b) in fast.data.iter().zip(&slow.data) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn identity_pointwise_conv() {
    let mut store = ParamStore::default();
    let conv = Conv2d::new(&mut store, "id", 3, 3, 1, false);
    for c in 0..3 {
        store.values[c * 3 + c] = 1.0;
    }
    let x = random_slab(&mut ChaCha8Rng::seed_from_u64(2), 3, 4, 6);
    assert_eq!(conv.forward(&store.values, &x), x);
}

#[test]
fn conv_translation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::default();
    let conv = Conv2d::new(&mut store, "c", 2, 2, 3, true);
    store.values = random_vec(&mut rng, store.len());
    let (h, w) = (4, 6);
    let x = random_slab(&mut rng, 2, h, w);
    let shift = |s: &Slab, di: usize, dj: usize| {
        let mut out = s.clone();
        for c in 0..s.channels {
            for i in 0..h {
                for j in 0..w {
                    out.channel_mut(c)[((i + di) % h) * w + (j + dj) % w] = s.channel(c)[i * w + j];
                }
            }
        }
        out
    };
    for (di, dj) in [(1, 0), (0, 2), (3, 5)] {
        let a = conv.forward(&store.values, &shift(&x, di, dj));
        let b = shift(&conv.forward(&store.values, &x), di, dj);
        for (p, q) in a.data.iter().zip(&b.data) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (k, bias) in [(3, true), (1, true), (3, false)] {
        let mut store = ParamStore::default();
        let conv = Conv2d::new(&mut store, "c", 2, 3, k, bias);
        store.values = random_vec(&mut rng, store.len());
        let mut x = random_slab(&mut rng, 2, 4, 4);
        let r = random_vec(&mut rng, 3 * 16);

        let dx = conv.backward(&store.values, &mut store.grads, &x, &Slab::from_vec(3, 4, 4, r.clone()).unwrap());
        let mut values = store.values.clone();
        let num = numeric_grad(&mut values, |p| dot(&conv.forward(p, &x).data, &r));
        for (i, (a, n)) in store.grads.iter().zip(&num).enumerate() {
            assert_close(*a, *n, &format!("conv k={k} param {i}"));
        }
        let params = store.values.clone();
        let mut xd = x.data.clone();
        let num_x = numeric_grad(&mut xd, |d| {
            let s = Slab::from_vec(2, 4, 4, d.to_vec()).unwrap();
            dot(&conv.forward(&params, &s).data, &r)
        });
        for (a, n) in dx.data.iter().zip(&num_x) {
            assert_close(*a, *n, "conv input");
        }
        x.data.clear();
    }
}

#[test]
fn linear_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::default();
    let lin = Linear::new(&mut store, "l", 5, 3);
    store.values = random_vec(&mut rng, store.len());
    let x = random_vec(&mut rng, 5);
    let r = random_vec(&mut rng, 3);
    let dx = lin.backward(&store.values, &mut store.grads, &x, &r);
    let mut values = store.values.clone();
    let num = numeric_grad(&mut values, |p| dot(&lin.forward(p, &x), &r));
    for (a, n) in store.grads.iter().zip(&num) {
        assert_close(*a, *n, "linear param");
    }
    let params = store.values.clone();
    let mut xv = x.clone();
    let num_x = numeric_grad(&mut xv, |v| dot(&lin.forward(&params, v), &r));
    for (a, n) in dx.iter().zip(&num_x) {
        assert_close(*a, *n, "linear input");
    }
}

#[test]
fn silu_and_resampling_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_slab(&mut rng, 2, 4, 4);

    let r = random_vec(&mut rng, x.data.len());
    let analytic = super::layers::silu_backward(&x.data, &r);
    let mut xd = x.data.clone();
    let num = numeric_grad(&mut xd, |d| dot(&super::layers::silu(d), &r));
    for (a, n) in analytic.iter().zip(&num) {
        assert_close(*a, *n, "silu");
    }

    let r = random_slab(&mut rng, 2, 2, 2);
    let analytic = avg_pool_backward(&r);
    let mut xd = x.data.clone();
    let num = numeric_grad(&mut xd, |d| {
        dot(&avg_pool(&Slab::from_vec(2, 4, 4, d.to_vec()).unwrap()).data, &r.data)
    });
    for (a, n) in analytic.data.iter().zip(&num) {
        assert_close(*a, *n, "avg pool");
    }

    let r = random_slab(&mut rng, 2, 8, 8);
    let analytic = upsample_backward(&r);
    let mut xd = x.data.clone();
    let num = numeric_grad(&mut xd, |d| {
        dot(&upsample(&Slab::from_vec(2, 4, 4, d.to_vec()).unwrap()).data, &r.data)
    });
    for (a, n) in analytic.data.iter().zip(&num) {
        assert_close(*a, *n, "upsample");
    }
}

#[test]
fn attention_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::default();
    let attn = SelfAttention::new(&mut store, "a", 3);
    store.values = random_vec(&mut rng, store.len());
    let x = random_slab(&mut rng, 3, 2, 4);
    let r = random_slab(&mut rng, 3, 2, 4);
    let (_, cache) = attn.forward(&store.values, &x);
    let dx = attn.backward(&store.values, &mut store.grads, &cache, &r);
    let mut values = store.values.clone();
    let num = numeric_grad(&mut values, |p| dot(&attn.forward(p, &x).0.data, &r.data));
    for (i, (a, n)) in store.grads.iter().zip(&num).enumerate() {
        assert_close(*a, *n, &format!("attention param {i}"));
    }
    let params = store.values.clone();
    let mut xd = x.data.clone();
    let num_x = numeric_grad(&mut xd, |d| {
        let s = Slab::from_vec(3, 2, 4, d.to_vec()).unwrap();
        dot(&attn.forward(&params, &s).0.data, &r.data)
    });
    for (a, n) in dx.data.iter().zip(&num_x) {
        assert_close(*a, *n, "attention input");
    }
}

/// U-Net with every layer type (stem, residual blocks with and without skip
/// projection, time embedding, pooling, upsampling, attention, head) and fewer
/// than 500 parameters.
fn small_spec() -> NetSpec {
    NetSpec {
        in_channels: 1,
        out_channels: 1,
        stages: vec![Stage { channels: 2, downsample: true }],
        activation: super::Activation::Silu,
        time_embed_width: 4,
        attention: true,
    }
}

fn randomized(spec: &NetSpec, seed: u64) -> Network {
    let mut net = Network::new(spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    net.store.values = random_vec(&mut rng, net.num_params()).iter().map(|v| 0.5 * v).collect();
    net
}

#[test]
fn unet_gradients_match_finite_differences() {
    for spec in [small_spec(), NetSpec { time_embed_width: 0, ..small_spec() }] {
        let mut net = randomized(&spec, 11);
        assert!(net.num_params() <= 500, "{} params", net.num_params());
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_slab(&mut rng, 1, 4, 4);
        let r = random_slab(&mut rng, 1, 4, 4);
        let t = (spec.time_embed_width > 0).then_some(37.0);
        net.forward(&x, t).unwrap();
        let dx = net.backward(&r).unwrap();
        let analytic = net.store.grads.clone();

        let frozen = net.clone();
        let mut values = net.store.values.clone();
        let num = numeric_grad(&mut values, |p| {
            let mut n = frozen.clone();
            n.store.values.copy_from_slice(p);
            dot(&n.predict(&x, t).unwrap().data, &r.data)
        });
        for (i, (a, n)) in analytic.iter().zip(&num).enumerate() {
            assert_close(*a, *n, &format!("unet param {i} ({:?})", spec.time_embed_width));
        }
        let mut xd = x.data.clone();
        let num_x = numeric_grad(&mut xd, |d| {
            let s = Slab::from_vec(1, 4, 4, d.to_vec()).unwrap();
            dot(&frozen.predict(&s, t).unwrap().data, &r.data)
        });
        for (a, n) in dx.data.iter().zip(&num_x) {
            assert_close(*a, *n, "unet input");
        }
    }
}

#[test]
fn two_level_unet_gradients() {
    let spec = NetSpec {
        in_channels: 1,
        out_channels: 1,
        stages: vec![
            Stage { channels: 1, downsample: true },
            Stage { channels: 2, downsample: true },
        ],
        activation: super::Activation::Silu,
        time_embed_width: 2,
        attention: true,
    };
    let mut net = randomized(&spec, 21);
    assert!(net.num_params() <= 500);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x = random_slab(&mut rng, 1, 4, 8);
    let r = random_slab(&mut rng, 1, 4, 8);
    net.forward(&x, Some(500.0)).unwrap();
    net.backward(&r).unwrap();
    let analytic = net.store.grads.clone();
    let frozen = net.clone();
    let mut values = net.store.values.clone();
    let num = numeric_grad(&mut values, |p| {
        let mut n = frozen.clone();
        n.store.values.copy_from_slice(p);
        dot(&n.predict(&x, Some(500.0)).unwrap().data, &r.data)
    });
    for (i, (a, n)) in analytic.iter().zip(&num).enumerate() {
        assert_close(*a, *n, &format!("two-level param {i}"));
    }
}

#[test]
fn zero_parameters_give_zero_output() {
    let spec = NetSpec { time_embed_width: 8, ..NetSpec::ladder(3, 2, 4, 2) };
    let mut net = Network::new(&spec, 0).unwrap();
    net.store.values.iter_mut().for_each(|v| *v = 0.0);
    let x = random_slab(&mut ChaCha8Rng::seed_from_u64(8), 3, 8, 8);
    let y = net.predict(&x, Some(10.0)).unwrap();
    assert_eq!((y.channels, y.height, y.width), (2, 8, 8));
    assert!(y.data.iter().all(|v| *v == 0.0));
}

#[test]
fn fresh_network_predicts_zero() {
    let net = Network::new(&NetSpec::ladder(3, 2, 4, 2), 0).unwrap();
    let x = random_slab(&mut ChaCha8Rng::seed_from_u64(9), 3, 8, 8);
    assert!(net.predict(&x, None).unwrap().data.iter().all(|v| *v == 0.0));
}

#[test]
fn backward_is_linear_in_upstream() {
    let mut net = randomized(&small_spec(), 31);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let x = random_slab(&mut rng, 1, 4, 4);
    let r = random_slab(&mut rng, 1, 4, 4);

    net.forward(&x, Some(3.0)).unwrap();
    net.backward(&Slab::zeros(1, 4, 4)).unwrap();
    assert!(net.store.grads.iter().all(|g| *g == 0.0));

    net.forward(&x, Some(3.0)).unwrap();
    net.backward(&r).unwrap();
    let single = std::mem::take(&mut net.store.grads);
    net.store.grads = vec![0.0; single.len()];
    let mut doubled = r.clone();
    doubled.scale(2.0);
    net.forward(&x, Some(3.0)).unwrap();
    net.backward(&doubled).unwrap();
    for (a, b) in net.store.grads.iter().zip(&single) {
        assert!((a - 2.0 * b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
}

#[test]
fn backward_requires_forward() {
    let mut net = randomized(&small_spec(), 41);
    assert!(matches!(net.backward(&Slab::zeros(1, 4, 4)), Err(DefError::BackwardWithoutForward)));
    net.forward(&Slab::zeros(1, 4, 4), Some(1.0)).unwrap();
    net.backward(&Slab::zeros(1, 4, 4)).unwrap();
    assert!(net.backward(&Slab::zeros(1, 4, 4)).is_err());
}

#[test]
fn shape_errors() {
    let net = randomized(&small_spec(), 51);
    assert!(net.predict(&Slab::zeros(2, 4, 4), Some(1.0)).is_err());
    assert!(net.predict(&Slab::zeros(1, 3, 4), Some(1.0)).is_err());
    assert!(net.predict(&Slab::zeros(1, 4, 4), None).is_err());
}
