//! Single-head spatial self-attention with a residual connection. Every grid
//! point is a token whose features are the channel values at that point.

use rand::Rng;

use super::layers::Conv2d;
use super::params::ParamStore;
use super::tensor::{axpy, dot, Slab};

#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub channels: usize,
    query: Conv2d,
    key: Conv2d,
    value: Conv2d,
    proj: Conv2d,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    x: Slab,
    q: Slab,
    k: Slab,
    v: Slab,
    /// Row-stochastic attention weights, `tokens × tokens`.
    attn: Vec<f64>,
    mixed: Slab,
}

/// Transposes a `channels × tokens` slab into `tokens × channels` rows.
fn tokens_major(x: &Slab) -> Vec<f64> {
    let n = x.plane();
    let mut out = vec![0.0; x.data.len()];
    for c in 0..x.channels {
        for (p, v) in x.channel(c).iter().enumerate() {
            out[p * x.channels + c] = *v;
        }
    }
    debug_assert_eq!(out.len(), n * x.channels);
    out
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            channels,
            query: Conv2d::new(store, &format!("{name}.q"), channels, channels, 1, true),
            key: Conv2d::new(store, &format!("{name}.k"), channels, channels, 1, true),
            value: Conv2d::new(store, &format!("{name}.v"), channels, channels, 1, true),
            proj: Conv2d::new(store, &format!("{name}.proj"), channels, channels, 1, true),
        }
    }

    pub fn init<R: Rng>(&self, values: &mut [f64], rng: &mut R) {
        for conv in [&self.query, &self.key, &self.value] {
            conv.init(values, rng, 1.0);
        }
        self.proj.init(values, rng, 0.0);
    }

    pub fn forward(&self, params: &[f64], x: &Slab) -> (Slab, AttentionCache) {
        let n = x.plane();
        let ch = self.channels;
        let scale = 1.0 / (ch as f64).sqrt();
        let q = self.query.forward(params, x);
        let k = self.key.forward(params, x);
        let v = self.value.forward(params, x);
        let qt = tokens_major(&q);
        let kt = tokens_major(&k);
        let mut attn = vec![0.0; n * n];
        for i in 0..n {
            let row = &mut attn[i * n..(i + 1) * n];
            let qi = &qt[i * ch..(i + 1) * ch];
            for (j, s) in row.iter_mut().enumerate() {
                *s = scale * dot(qi, &kt[j * ch..(j + 1) * ch]);
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                total += *s;
            }
            row.iter_mut().for_each(|s| *s /= total);
        }
        // mixed[c][i] = sum_j attn[i][j] v[c][j]
        let mut mixed = Slab::zeros(ch, x.height, x.width);
        for c in 0..ch {
            let vc = v.channel(c);
            let out = mixed.channel_mut(c);
            for (i, o) in out.iter_mut().enumerate() {
                *o = dot(&attn[i * n..(i + 1) * n], vc);
            }
        }
        let mut y = self.proj.forward(params, &mixed);
        y.add_assign(x);
        (y, AttentionCache { x: x.clone(), q, k, v, attn, mixed })
    }

    pub fn backward(
        &self,
        params: &[f64],
        grads: &mut [f64],
        cache: &AttentionCache,
        dy: &Slab,
    ) -> Slab {
        let n = cache.x.plane();
        let ch = self.channels;
        let scale = 1.0 / (ch as f64).sqrt();
        let dmixed = self.proj.backward(params, grads, &cache.mixed, dy);

        // dattn[i][j] = sum_c dmixed[c][i] v[c][j];  dv[c][j] = sum_i attn[i][j] dmixed[c][i]
        let mut dattn = vec![0.0; n * n];
        let mut dv = Slab::zeros(ch, cache.x.height, cache.x.width);
        for c in 0..ch {
            let vc = cache.v.channel(c);
            let dm = dmixed.channel(c);
            let dvc = dv.channel_mut(c);
            for i in 0..n {
                axpy(dm[i], vc, &mut dattn[i * n..(i + 1) * n]);
                axpy(dm[i], &cache.attn[i * n..(i + 1) * n], dvc);
            }
        }
        // Softmax backward, folded with the score scale.
        let mut dscore = dattn;
        for i in 0..n {
            let a = &cache.attn[i * n..(i + 1) * n];
            let row = &mut dscore[i * n..(i + 1) * n];
            let inner = dot(a, row);
            for (d, p) in row.iter_mut().zip(a) {
                *d = scale * p * (*d - inner);
            }
        }
        // dq[c][i] = sum_j dscore[i][j] k[c][j];  dk[c][j] = sum_i dscore[i][j] q[c][i]
        let mut dq = Slab::zeros(ch, cache.x.height, cache.x.width);
        let mut dk = Slab::zeros(ch, cache.x.height, cache.x.width);
        for c in 0..ch {
            let kc = cache.k.channel(c);
            let qc = cache.q.channel(c);
            let dqc = dq.channel_mut(c);
            for i in 0..n {
                dqc[i] = dot(&dscore[i * n..(i + 1) * n], kc);
            }
            let dkc = dk.channel_mut(c);
            for i in 0..n {
                axpy(qc[i], &dscore[i * n..(i + 1) * n], dkc);
            }
        }
        let mut dx = dy.clone();
        dx.add_assign(&self.query.backward(params, grads, &cache.x, &dq));
        dx.add_assign(&self.key.backward(params, grads, &cache.x, &dk));
        dx.add_assign(&self.value.backward(params, grads, &cache.x, &dv));
        dx
    }
}
