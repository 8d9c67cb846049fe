//! Periodic U-Net: residual blocks on an encoder/decoder ladder with skip
//! connections, optional self-attention at the coarsest level, and an
//! optional sinusoidal time embedding injected into every block.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::{AttentionCache, SelfAttention};
use super::embed::time_embedding;
use super::layers::{
    avg_pool, avg_pool_backward, silu, silu_backward, silu_backward_slab, silu_slab, upsample,
    upsample_backward, Conv2d, Linear,
};
use super::params::ParamStore;
use super::tensor::Slab;
use crate::error::{shape_err, DefError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub channels: usize,
    pub downsample: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stages: Vec<Stage>,
    pub activation: Activation,
    /// Width of the sinusoidal time embedding; 0 disables it.
    pub time_embed_width: usize,
    pub attention: bool,
}

impl NetSpec {
    /// Encoder ladder with `depth` stages, doubling channels at each level and
    /// downsampling after every stage.
    pub fn ladder(in_channels: usize, out_channels: usize, base: usize, depth: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            stages: (0..depth)
                .map(|i| Stage { channels: base << i, downsample: true })
                .collect(),
            activation: Activation::Silu,
            time_embed_width: 0,
            attention: true,
        }
    }

    pub fn downsamples(&self) -> usize {
        self.stages.iter().filter(|s| s.downsample).count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(DefError::InvalidConfig("channel counts must be positive".into()));
        }
        if self.stages.is_empty() || self.stages.iter().any(|s| s.channels == 0) {
            return Err(DefError::InvalidConfig("need at least one non-empty stage".into()));
        }
        if self.time_embed_width % 2 != 0 {
            return Err(DefError::InvalidConfig("time embedding width must be even".into()));
        }
        Ok(())
    }

    /// Grid sizes must be divisible by `2^downsamples`.
    pub fn check_grid(&self, height: usize, width: usize) -> Result<()> {
        let f = 1usize << self.downsamples();
        if height % f != 0 || width % f != 0 || height == 0 || width == 0 {
            return Err(DefError::InvalidConfig(format!(
                "grid {height}x{width} not divisible by {f}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    temb: Option<Linear>,
    skip: Option<Conv2d>,
}

#[derive(Debug, Clone)]
struct ResCache {
    x: Slab,
    a1: Slab,
    h1: Slab,
    a2: Slab,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, temb: usize) -> Self {
        Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), in_ch, out_ch, 3, true),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), out_ch, out_ch, 3, true),
            temb: (temb > 0).then(|| Linear::new(store, &format!("{name}.temb"), temb, out_ch)),
            skip: (in_ch != out_ch)
                .then(|| Conv2d::new(store, &format!("{name}.skip"), in_ch, out_ch, 1, true)),
        }
    }

    fn init(&self, values: &mut [f64], rng: &mut ChaCha8Rng) {
        self.conv1.init(values, rng, 2f64.sqrt());
        self.conv2.init(values, rng, 2f64.sqrt() * 0.5);
        if let Some(t) = &self.temb {
            t.init(values, rng, 1.0);
        }
        if let Some(s) = &self.skip {
            s.init(values, rng, 1.0);
        }
    }

    fn forward(&self, p: &[f64], x: &Slab, emb: Option<&[f64]>) -> (Slab, ResCache) {
        let a1 = silu_slab(x);
        let mut h1 = self.conv1.forward(p, &a1);
        if let (Some(t), Some(e)) = (&self.temb, emb) {
            let shift = t.forward(p, e);
            for (o, s) in shift.iter().enumerate() {
                h1.channel_mut(o).iter_mut().for_each(|v| *v += s);
            }
        }
        let a2 = silu_slab(&h1);
        let mut y = self.conv2.forward(p, &a2);
        match &self.skip {
            Some(s) => y.add_assign(&s.forward(p, x)),
            None => y.add_assign(x),
        }
        (y, ResCache { x: x.clone(), a1, h1, a2 })
    }

    /// Returns the input gradient; adds the embedding gradient into `demb`.
    fn backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        c: &ResCache,
        dy: &Slab,
        emb: Option<&[f64]>,
        demb: &mut [f64],
    ) -> Slab {
        let da2 = self.conv2.backward(p, g, &c.a2, dy);
        let dh1 = silu_backward_slab(&c.h1, &da2);
        if let (Some(t), Some(e)) = (&self.temb, emb) {
            let dshift: Vec<f64> = (0..dh1.channels).map(|o| dh1.channel(o).iter().sum()).collect();
            let de = t.backward(p, g, e, &dshift);
            for (d, v) in demb.iter_mut().zip(de) {
                *d += v;
            }
        }
        let da1 = self.conv1.backward(p, g, &c.a1, &dh1);
        let mut dx = silu_backward_slab(&c.x, &da1);
        match &self.skip {
            Some(s) => dx.add_assign(&s.backward(p, g, &c.x, dy)),
            None => dx.add_assign(dy),
        }
        dx
    }
}

#[derive(Debug, Clone)]
struct TimeMlp {
    width: usize,
    linear: Linear,
}

#[derive(Debug, Clone)]
pub struct UNet {
    spec: NetSpec,
    stem: Conv2d,
    time_mlp: Option<TimeMlp>,
    encoder: Vec<ResBlock>,
    middle: ResBlock,
    attention: Option<SelfAttention>,
    decoder: Vec<ResBlock>,
    head: Conv2d,
}

/// Activations saved by [`UNet::forward_train`] for the backward pass.
#[derive(Debug, Clone)]
pub struct UNetCache {
    input: Slab,
    emb0: Vec<f64>,
    emb_pre: Vec<f64>,
    emb: Vec<f64>,
    encoder: Vec<ResCache>,
    skips_channels: Vec<usize>,
    middle: ResCache,
    attention: Option<AttentionCache>,
    decoder: Vec<ResCache>,
    head_in_pre: Slab,
    head_in: Slab,
}

impl UNet {
    pub fn build(spec: &NetSpec, store: &mut ParamStore) -> Result<Self> {
        spec.validate()?;
        let tw = spec.time_embed_width;
        let c0 = spec.stages[0].channels;
        let stem = Conv2d::new(store, "stem", spec.in_channels, c0, 3, true);
        let time_mlp = (tw > 0).then(|| TimeMlp { width: tw, linear: Linear::new(store, "time_mlp", tw, tw) });
        let mut encoder = Vec::new();
        let mut prev = c0;
        for (i, s) in spec.stages.iter().enumerate() {
            encoder.push(ResBlock::new(store, &format!("enc{i}"), prev, s.channels, tw));
            prev = s.channels;
        }
        let middle = ResBlock::new(store, "mid", prev, prev, tw);
        let attention = spec.attention.then(|| SelfAttention::new(store, "mid.attn", prev));
        let mut decoder = Vec::new();
        for (i, s) in spec.stages.iter().enumerate().rev() {
            decoder.push(ResBlock::new(store, &format!("dec{i}"), prev + s.channels, s.channels, tw));
            prev = s.channels;
        }
        let head = Conv2d::new(store, "head", prev, spec.out_channels, 3, false);
        Ok(Self { spec: spec.clone(), stem, time_mlp, encoder, middle, attention, decoder, head })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    /// Deterministic initialization. The output head starts at zero so an
    /// untrained network predicts zeros.
    pub fn init(&self, values: &mut [f64], seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.stem.init(values, &mut rng, 1.0);
        if let Some(m) = &self.time_mlp {
            m.linear.init(values, &mut rng, 1.0);
        }
        for b in self.encoder.iter().chain([&self.middle]).chain(&self.decoder) {
            b.init(values, &mut rng);
        }
        if let Some(a) = &self.attention {
            a.init(values, &mut rng);
        }
        self.head.init(values, &mut rng, 0.0);
    }

    fn check_input(&self, x: &Slab, t: Option<f64>) -> Result<()> {
        if x.channels != self.spec.in_channels {
            return Err(shape_err(
                format!("{} input channels", self.spec.in_channels),
                format!("{} channels", x.channels),
            ));
        }
        self.spec.check_grid(x.height, x.width)?;
        match (self.time_mlp.is_some(), t.is_some()) {
            (true, false) => Err(DefError::InvalidConfig("network expects a timestep".into())),
            (false, true) => Err(DefError::InvalidConfig("network has no time embedding".into())),
            _ => Ok(()),
        }
    }

    pub fn forward_train(&self, p: &[f64], x: &Slab, t: Option<f64>) -> Result<(Slab, UNetCache)> {
        self.check_input(x, t)?;
        let (emb0, emb_pre, emb) = match (&self.time_mlp, t) {
            (Some(m), Some(t)) => {
                let e0 = time_embedding(t, m.width)?;
                let pre = m.linear.forward(p, &e0);
                let e = silu(&pre);
                (e0, pre, e)
            }
            _ => (Vec::new(), Vec::new(), Vec::new()),
        };
        let emb_ref = (!emb.is_empty()).then_some(emb.as_slice());

        let mut h = self.stem.forward(p, x);
        let mut enc_caches = Vec::with_capacity(self.encoder.len());
        let mut skips = Vec::with_capacity(self.encoder.len());
        for (block, stage) in self.encoder.iter().zip(&self.spec.stages) {
            let (y, c) = block.forward(p, &h, emb_ref);
            enc_caches.push(c);
            h = if stage.downsample { avg_pool(&y) } else { y.clone() };
            skips.push(y);
        }
        let (mut h, mid_cache) = self.middle.forward(p, &h, emb_ref);
        let attn_cache = self.attention.as_ref().map(|a| {
            let (y, c) = a.forward(p, &h);
            h = y;
            c
        });
        let mut dec_caches = Vec::with_capacity(self.decoder.len());
        let mut skips_channels = Vec::with_capacity(self.decoder.len());
        for (block, (stage, skip)) in self
            .decoder
            .iter()
            .zip(self.spec.stages.iter().zip(skips.iter()).rev())
        {
            let up = if stage.downsample { upsample(&h) } else { h };
            let joined = up.concat(skip);
            skips_channels.push(skip.channels);
            let (y, c) = block.forward(p, &joined, emb_ref);
            dec_caches.push(c);
            h = y;
        }
        let head_in = silu_slab(&h);
        let out = self.head.forward(p, &head_in);
        Ok((
            out,
            UNetCache {
                input: x.clone(),
                emb0,
                emb_pre,
                emb,
                encoder: enc_caches,
                skips_channels,
                middle: mid_cache,
                attention: attn_cache,
                decoder: dec_caches,
                head_in_pre: h,
                head_in,
            },
        ))
    }

    pub fn forward(&self, p: &[f64], x: &Slab, t: Option<f64>) -> Result<Slab> {
        self.forward_train(p, x, t).map(|(y, _)| y)
    }

    /// Accumulates parameter gradients for upstream gradient `dy`; returns the
    /// input gradient.
    pub fn backward(&self, p: &[f64], g: &mut [f64], cache: &UNetCache, dy: &Slab) -> Slab {
        let emb_ref = (!cache.emb.is_empty()).then_some(cache.emb.as_slice());
        let mut demb = vec![0.0; cache.emb.len()];

        let dhead_in = self.head.backward(p, g, &cache.head_in, dy);
        let mut dh = silu_backward_slab(&cache.head_in_pre, &dhead_in);

        // Decoder block k serves encoder stage S-1-k; walking k backwards
        // leaves dskips ordered by encoder stage.
        let depth = self.decoder.len();
        let mut dskips: Vec<Slab> = Vec::with_capacity(depth);
        for k in (0..depth).rev() {
            let stage = &self.spec.stages[depth - 1 - k];
            let djoined = self.decoder[k].backward(p, g, &cache.decoder[k], &dh, emb_ref, &mut demb);
            let (dup, dskip) = djoined.split(djoined.channels - cache.skips_channels[k]);
            dskips.push(dskip);
            dh = if stage.downsample { upsample_backward(&dup) } else { dup };
        }

        if let (Some(a), Some(c)) = (&self.attention, &cache.attention) {
            dh = a.backward(p, g, c, &dh);
        }
        dh = self.middle.backward(p, g, &cache.middle, &dh, emb_ref, &mut demb);

        for (i, (block, stage)) in self.encoder.iter().zip(&self.spec.stages).enumerate().rev() {
            let mut dy_block = if stage.downsample { avg_pool_backward(&dh) } else { dh };
            dy_block.add_assign(&dskips[i]);
            dh = block.backward(p, g, &cache.encoder[i], &dy_block, emb_ref, &mut demb);
        }
        let dx = self.stem.backward(p, g, &cache.input, &dh);

        if let Some(m) = &self.time_mlp {
            let dpre = silu_backward(&cache.emb_pre, &demb);
            m.linear.backward(p, g, &cache.emb0, &dpre);
        }
        dx
    }
}

/// A U-Net together with its parameters and the activation cache of the most
/// recent training forward pass.
#[derive(Debug, Clone)]
pub struct Network {
    unet: UNet,
    pub store: ParamStore,
    cache: Option<UNetCache>,
}

impl Network {
    pub fn new(spec: &NetSpec, seed: u64) -> Result<Self> {
        let mut store = ParamStore::default();
        let unet = UNet::build(spec, &mut store)?;
        unet.init(&mut store.values, seed);
        Ok(Self { unet, store, cache: None })
    }

    pub fn spec(&self) -> &NetSpec {
        self.unet.spec()
    }

    pub fn num_params(&self) -> usize {
        self.store.len()
    }

    /// Forward pass that keeps activations for [`Network::backward`].
    pub fn forward(&mut self, x: &Slab, t: Option<f64>) -> Result<Slab> {
        let (y, cache) = self.unet.forward_train(&self.store.values, x, t)?;
        self.cache = Some(cache);
        Ok(y)
    }

    /// Accumulates gradients of `<dy, output>` into the store and consumes
    /// the saved activations.
    pub fn backward(&mut self, dy: &Slab) -> Result<Slab> {
        let cache = self.cache.take().ok_or(DefError::BackwardWithoutForward)?;
        let (p, g) = self.store.split();
        let out_ch = self.unet.spec().out_channels;
        dy.check_shape(out_ch, cache.input.height, cache.input.width)?;
        Ok(self.unet.backward(p, g, &cache, dy))
    }

    /// Read-only inference; safe to call concurrently.
    pub fn predict(&self, x: &Slab, t: Option<f64>) -> Result<Slab> {
        self.unet.forward(&self.store.values, x, t)
    }
}
