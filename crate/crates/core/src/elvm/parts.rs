//! Reusable network pieces: a multi-scale encoder with per-scale channel
//! reduction, a skip-connected upsampling trunk, and a Gaussian moment net.

use serde::{Deserialize, Serialize};

use crate::diff::ops::{apply_mask, concat_channels, dropout_mask, split_channels};
use crate::diff::{
    ForwardCache, Gradients, Mode, Net, NetBuilder, ParamStore, RngStream, Shape3, Tensor,
};
use crate::error::{DuqError, Result};

/// Reduced features at 1/2, 1/4 and 1/8 of the input resolution.
#[derive(Clone, Debug)]
pub struct Features {
    pub r1: Tensor,
    pub r2: Tensor,
    pub r3: Tensor,
}

impl Features {
    pub fn batch(&self) -> usize {
        self.r1.batch()
    }

    pub fn tile(&self, times: usize) -> Features {
        Features {
            r1: self.r1.tile_batch(times),
            r2: self.r2.tile_batch(times),
            r3: self.r3.tile_batch(times),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    stages: Vec<Net>,
    reduce: Vec<Net>,
}

#[derive(Clone, Debug)]
pub struct EncoderCache {
    stages: Vec<ForwardCache>,
    reduce: Vec<ForwardCache>,
    masks: Vec<Option<Vec<f64>>>,
}

/// Dropout applied to every backbone feature map when present.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut RngStream,
}

impl Encoder {
    pub fn new(
        name: &str,
        input: Shape3,
        channels: [usize; 3],
        reduce: usize,
        store: &mut ParamStore,
        rng: &mut RngStream,
    ) -> Result<Encoder> {
        let mut shape = input;
        let mut stages = Vec::new();
        let mut reds = Vec::new();
        for (i, &c) in channels.iter().enumerate() {
            let stage = NetBuilder::new(format!("{name}.stage{}", i + 1), shape)
                .conv(c, 3, 2)
                .leaky_relu()
                .build(store, rng)?;
            shape = stage.output_shape();
            let red = NetBuilder::new(format!("{name}.reduce{}", i + 1), shape)
                .conv(reduce, 3, 1)
                .leaky_relu()
                .build(store, rng)?;
            stages.push(stage);
            reds.push(red);
        }
        Ok(Encoder {
            stages,
            reduce: reds,
        })
    }

    pub fn input_shape(&self) -> Shape3 {
        self.stages[0].input_shape()
    }

    pub fn feature_shapes(&self) -> [Shape3; 3] {
        [
            self.reduce[0].output_shape(),
            self.reduce[1].output_shape(),
            self.reduce[2].output_shape(),
        ]
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        x: &Tensor,
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<(Features, EncoderCache)> {
        let mut h = x.clone();
        let mut stages = Vec::with_capacity(3);
        let mut reduce = Vec::with_capacity(3);
        let mut masks = Vec::with_capacity(3);
        let mut outs = Vec::with_capacity(3);
        for (stage, red) in self.stages.iter().zip(&self.reduce) {
            let (e, sc) = stage.forward(store, &h, Mode::Train)?;
            let (e, mask) = match dropout.as_mut() {
                Some(d) if d.rate > 0.0 => {
                    let m = dropout_mask(e.data().len(), d.rate, d.rng);
                    (apply_mask(&e, &m), Some(m))
                }
                _ => (e, None),
            };
            let (r, rc) = red.forward(store, &e, Mode::Train)?;
            stages.push(sc);
            reduce.push(rc);
            masks.push(mask);
            outs.push(r);
            h = e;
        }
        let r3 = outs.pop().expect("three scales");
        let r2 = outs.pop().expect("three scales");
        let r1 = outs.pop().expect("three scales");
        Ok((
            Features { r1, r2, r3 },
            EncoderCache {
                stages,
                reduce,
                masks,
            },
        ))
    }

    /// Backpropagates feature gradients; returns the input gradient.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &EncoderCache,
        dr: [&Tensor; 3],
        mut grads: Option<&mut Gradients>,
    ) -> Result<Tensor> {
        let mut carry: Option<Tensor> = None;
        for i in (0..3).rev() {
            let mut de =
                self.reduce[i].backward(store, &cache.reduce[i], dr[i], grads.as_deref_mut())?;
            if let Some(c) = carry.take() {
                de.add_assign(&c)?;
            }
            if let Some(m) = &cache.masks[i] {
                de = apply_mask(&de, m);
            }
            carry = Some(self.stages[i].backward(
                store,
                &cache.stages[i],
                &de,
                grads.as_deref_mut(),
            )?);
        }
        Ok(carry.expect("three scales"))
    }
}

/// Upsampling decoder: `top` (at 1/8 scale) is fused, then merged with the
/// 1/4 and 1/2 scale skips, ending at full resolution.
#[derive(Clone, Debug)]
pub struct Trunk {
    up2: Net,
    up1: Net,
}

#[derive(Clone, Debug)]
pub struct TrunkCache {
    up2: ForwardCache,
    up1: ForwardCache,
    c_top: usize,
    c_mid: usize,
}

impl Trunk {
    /// `top` is the fused 1/4-scale map produced by a fuse net.
    pub fn new(
        name: &str,
        top: Shape3,
        skips: [Shape3; 2],
        width: usize,
        out: usize,
        store: &mut ParamStore,
        rng: &mut RngStream,
    ) -> Result<Trunk> {
        let [s2, s1] = skips;
        let up2 = NetBuilder::new(format!("{name}.up2"), Shape3::new(top.c + s2.c, s2.h, s2.w))
            .conv(width, 3, 1)
            .leaky_relu()
            .upsample(2)
            .build(store, rng)?;
        let up1 = NetBuilder::new(format!("{name}.up1"), Shape3::new(width + s1.c, s1.h, s1.w))
            .conv(width, 3, 1)
            .leaky_relu()
            .upsample(2)
            .conv(out, 3, 1)
            .leaky_relu()
            .build(store, rng)?;
        Ok(Trunk { up2, up1 })
    }

    pub fn output_shape(&self) -> Shape3 {
        self.up1.output_shape()
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        top: &Tensor,
        r2: &Tensor,
        r1: &Tensor,
    ) -> Result<(Tensor, TrunkCache)> {
        let (h2, c2) = self
            .up2
            .forward(store, &concat_channels(top, r2)?, Mode::Train)?;
        let (h1, c1) = self
            .up1
            .forward(store, &concat_channels(&h2, r1)?, Mode::Train)?;
        Ok((
            h1,
            TrunkCache {
                up2: c2,
                up1: c1,
                c_top: top.shape().c,
                c_mid: h2.shape().c,
            },
        ))
    }

    /// Returns `(d_top, d_r2, d_r1)`.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &TrunkCache,
        dout: &Tensor,
        mut grads: Option<&mut Gradients>,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let d1 = self
            .up1
            .backward(store, &cache.up1, dout, grads.as_deref_mut())?;
        let (dh2, dr1) = split_channels(&d1, cache.c_mid)?;
        let d2 = self
            .up2
            .backward(store, &cache.up2, &dh2, grads.as_deref_mut())?;
        let (dtop, dr2) = split_channels(&d2, cache.c_top)?;
        Ok((dtop, dr2, dr1))
    }
}

/// Fuse net: 3×3 conv over the deepest features (plus any concatenated
/// latent channels), then ×2 upsampling to the next scale.
pub fn fuse_net(
    name: &str,
    input: Shape3,
    width: usize,
    store: &mut ParamStore,
    rng: &mut RngStream,
) -> Result<Net> {
    NetBuilder::new(name, input)
        .conv(width, 3, 1)
        .leaky_relu()
        .upsample(2)
        .build(store, rng)
}

/// Sigmoid-activated 1×1 output layer.
pub fn head_net(
    name: &str,
    input: Shape3,
    store: &mut ParamStore,
    rng: &mut RngStream,
) -> Result<Net> {
    NetBuilder::new(name, input)
        .conv(1, 1, 1)
        .sigmoid()
        .build(store, rng)
}

/// Per-sample diagonal Gaussian moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl Gaussian {
    pub fn standard(k: usize) -> Gaussian {
        Gaussian {
            mu: vec![0.0; k],
            logvar: vec![0.0; k],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `mu + exp(logvar/2)·eps`.
    pub fn reparameterize(&self, eps: &[f64]) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.logvar)
            .zip(eps)
            .map(|((m, lv), e)| m + (lv / 2.0).exp() * e)
            .collect()
    }
}

/// Conv stack followed by two dense heads for the mean and the bounded
/// log-variance of a K-dimensional Gaussian.
#[derive(Clone, Debug)]
pub struct MomentNet {
    convs: Net,
    mu: Net,
    logvar: Net,
    bound: f64,
}

#[derive(Clone, Debug)]
pub struct MomentCache {
    convs: ForwardCache,
    mu: ForwardCache,
    logvar: ForwardCache,
    tanh: Vec<f64>,
}

impl MomentNet {
    pub fn new(
        name: &str,
        input: Shape3,
        channels: &[usize],
        k: usize,
        bound: f64,
        store: &mut ParamStore,
        rng: &mut RngStream,
    ) -> Result<MomentNet> {
        let mut b = NetBuilder::new(format!("{name}.convs"), input);
        for &c in channels {
            b = b.conv(c, 3, 2).leaky_relu();
        }
        let convs = b.build(store, rng)?;
        let feat = convs.output_shape();
        let mu = NetBuilder::new(format!("{name}.mu"), feat)
            .dense(k)
            .build(store, rng)?;
        let logvar = NetBuilder::new(format!("{name}.logvar"), feat)
            .dense(k)
            .build(store, rng)?;
        Ok(MomentNet {
            convs,
            mu,
            logvar,
            bound,
        })
    }

    pub fn input_shape(&self) -> Shape3 {
        self.convs.input_shape()
    }

    pub fn latent_dim(&self) -> usize {
        self.mu.output_shape().numel()
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<(Vec<Gaussian>, MomentCache)> {
        let (h, cc) = self.convs.forward(store, x, Mode::Train)?;
        let (mu, mc) = self.mu.forward(store, &h, Mode::Train)?;
        let (raw, lc) = self.logvar.forward(store, &h, Mode::Train)?;
        let tanh: Vec<f64> = raw.data().iter().map(|r| (r / self.bound).tanh()).collect();
        let k = self.latent_dim();
        let mut out = Vec::with_capacity(x.batch());
        for i in 0..x.batch() {
            let g = Gaussian {
                mu: mu.sample(i).to_vec(),
                logvar: tanh[i * k..(i + 1) * k]
                    .iter()
                    .map(|t| self.bound * t)
                    .collect(),
            };
            if g.mu.iter().chain(&g.logvar).any(|v| !v.is_finite()) {
                return Err(DuqError::Inference(format!(
                    "moment net produced non-finite output for sample {i}"
                )));
            }
            out.push(g);
        }
        Ok((
            out,
            MomentCache {
                convs: cc,
                mu: mc,
                logvar: lc,
                tanh,
            },
        ))
    }

    /// Backpropagates moment gradients; returns the input gradient.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &MomentCache,
        d: &[Gaussian],
        mut grads: Option<&mut Gradients>,
    ) -> Result<Tensor> {
        let n = d.len();
        let k = self.latent_dim();
        let shape = self.mu.output_shape();
        let dmu = Tensor::from_vec(
            n,
            shape,
            d.iter().flat_map(|g| g.mu.iter().copied()).collect(),
        )?;
        let draw: Vec<f64> = d
            .iter()
            .flat_map(|g| g.logvar.iter().copied())
            .zip(&cache.tanh)
            .map(|(g, t)| g * (1.0 - t * t))
            .collect();
        debug_assert_eq!(draw.len(), n * k);
        let draw = Tensor::from_vec(n, shape, draw)?;
        let mut dh = self
            .mu
            .backward(store, &cache.mu, &dmu, grads.as_deref_mut())?;
        dh.add_assign(
            &self
                .logvar
                .backward(store, &cache.logvar, &draw, grads.as_deref_mut())?,
        )?;
        self.convs.backward(store, &cache.convs, &dh, grads)
    }
}
