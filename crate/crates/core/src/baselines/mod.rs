//! Comparison estimators: MC dropout, a five-decoder deep ensemble, and
//! GAN and CVAE latent-variable models, all decomposed by entropy and
//! mutual information over repeated forward passes.

use serde::{Deserialize, Serialize};

use crate::diff::ops::concat_channels;
use crate::diff::{
    ForwardCache, Gradients, Mode, Net, NetBuilder, ParamStore, RngStream, Shape3, Tensor,
    TensorMap,
};
use crate::elvm::parts::{fuse_net, head_net};
use crate::elvm::{
    Dropout, ElvmModel, Encoder, EncoderCache, Features, Gaussian, MomentNet, Trunk, TrunkCache,
};
use crate::error::{DuqError, Result};
use crate::uncertainty::losses::{cross_entropy, cross_entropy_grad, entropy2};

pub const MC_PASSES: usize = 10;
pub const DROPOUT_RATE: f64 = 0.3;
pub const GAN_LAMBDA: f64 = 0.1;
pub const ENSEMBLE_DECODERS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    McDropout,
    DeepEnsemble,
    Gan,
    Cvae,
}

#[derive(Clone, Debug)]
pub struct SampledPredictions {
    pub source: Source,
    pub maps: Vec<TensorMap>,
}

/// Entropy of the mean, mean entropy, and their difference (mutual information).
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub predictive: TensorMap,
    pub aleatoric: TensorMap,
    pub epistemic: TensorMap,
}

pub fn ensemble_decompose(samples: &[TensorMap]) -> Result<Decomposition> {
    if samples.len() < 2 {
        return Err(DuqError::Usage(format!(
            "decomposition needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let first = &samples[0];
    for s in &samples[1..] {
        first.ensure_same_shape(s)?;
    }
    let n = samples.len() as f64;
    let len = first.len();
    let mut mean = vec![0.0; len];
    let mut alea = vec![0.0; len];
    for s in samples {
        for (i, &p) in s.values().iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(DuqError::Domain(format!(
                    "sample value {p} is outside [0, 1]"
                )));
            }
            mean[i] += p / n;
            alea[i] += entropy2(p) / n;
        }
    }
    let pred: Vec<f64> = mean.iter().map(|&m| entropy2(m)).collect();
    let epi = pred.iter().zip(&alea).map(|(p, a)| p - a).collect();
    let (c, h, w) = (first.channels(), first.height(), first.width());
    Ok(Decomposition {
        predictive: TensorMap::new(c, h, w, pred)?,
        aleatoric: TensorMap::new(c, h, w, alea)?,
        epistemic: TensorMap::new(c, h, w, epi)?,
    })
}

pub fn mean_map(samples: &[TensorMap]) -> Result<TensorMap> {
    let first = samples
        .first()
        .ok_or_else(|| DuqError::Usage("empty sample set".into()))?;
    let n = samples.len() as f64;
    let mut acc = vec![0.0; first.len()];
    for s in samples {
        first.ensure_same_shape(s)?;
        for (a, v) in acc.iter_mut().zip(s.values()) {
            *a += v / n;
        }
    }
    TensorMap::new(first.channels(), first.height(), first.width(), acc)
}

/// `passes` dropout-perturbed deterministic predictions of one image.
pub fn mc_dropout_predict(
    model: &ElvmModel,
    store: &ParamStore,
    x: &TensorMap,
    passes: usize,
    rate: f64,
    rng: &mut RngStream,
) -> Result<SampledPredictions> {
    if passes == 0 {
        return Err(DuqError::Usage("mc dropout needs at least one pass".into()));
    }
    let xt = x.to_tensor().tile_batch(passes);
    let out = model.deterministic_batch(store, &xt, Some(Dropout { rate, rng }))?;
    Ok(SampledPredictions {
        source: Source::McDropout,
        maps: (0..passes).map(|i| out.to_map(i)).collect::<Result<_>>()?,
    })
}

/// Generator, adversarial and discriminator losses with their gradients
/// with respect to the discriminator scores.
#[derive(Clone, Debug)]
pub struct GanLosses {
    pub l_gen: f64,
    pub l_adv: f64,
    pub l_dis: f64,
    /// `∂(λ·L_adv)/∂g(pred)`, for the generator update.
    pub d_fake_gen: Vec<f64>,
    pub d_fake_dis: Vec<f64>,
    pub d_real_dis: Vec<f64>,
}

/// `L_gen = L_rec + λ·CE(g(pred), 1)`, `L_dis = CE(g(pred), 0) + CE(g(y), 1)`,
/// each cross-entropy averaged over the score map.
pub fn gan_losses(l_rec: f64, fake: &[f64], real: &[f64], lambda: f64) -> Result<GanLosses> {
    if fake.len() != real.len() || fake.is_empty() {
        return Err(DuqError::Usage(
            "score maps must be nonempty and equal in size".into(),
        ));
    }
    let n = fake.len() as f64;
    let l_adv = fake.iter().map(|&g| cross_entropy(g, 1.0)).sum::<f64>() / n;
    let l_dis = fake.iter().map(|&g| cross_entropy(g, 0.0)).sum::<f64>() / n
        + real.iter().map(|&g| cross_entropy(g, 1.0)).sum::<f64>() / n;
    Ok(GanLosses {
        l_gen: l_rec + lambda * l_adv,
        l_adv,
        l_dis,
        d_fake_gen: fake
            .iter()
            .map(|&g| lambda * cross_entropy_grad(g, 1.0) / n)
            .collect(),
        d_fake_dis: fake
            .iter()
            .map(|&g| cross_entropy_grad(g, 0.0) / n)
            .collect(),
        d_real_dis: real
            .iter()
            .map(|&g| cross_entropy_grad(g, 1.0) / n)
            .collect(),
    })
}

/// Closed-form `KL(N(μp, e^lp) ‖ N(μq, e^lq))` summed over dimensions, with
/// gradients for both arguments.
pub fn kl_diag(post: &Gaussian, prior: &Gaussian) -> Result<(f64, Gaussian, Gaussian)> {
    let k = post.dim();
    if prior.dim() != k || post.logvar.len() != k || prior.logvar.len() != k {
        return Err(DuqError::Usage(
            "posterior and prior moments differ in dimension".into(),
        ));
    }
    let mut kl = 0.0;
    let mut dp = Gaussian::standard(k);
    let mut dq = Gaussian::standard(k);
    for i in 0..k {
        let (mp, lp, mq, lq) = (post.mu[i], post.logvar[i], prior.mu[i], prior.logvar[i]);
        let d = mp - mq;
        let inv = (-lq).exp();
        kl += 0.5 * ((lp.exp() + d * d) * inv - 1.0 + lq - lp);
        dp.mu[i] = d * inv;
        dq.mu[i] = -d * inv;
        dp.logvar[i] = 0.5 * (lp.exp() * inv - 1.0);
        dq.logvar[i] = 0.5 * (1.0 - (lp.exp() + d * d) * inv);
    }
    Ok((kl, dp, dq))
}

pub fn cvae_loss(
    rec: f64,
    mu_post: &[f64],
    logvar_post: &[f64],
    mu_prior: &[f64],
    logvar_prior: &[f64],
) -> Result<f64> {
    let post = Gaussian {
        mu: mu_post.to_vec(),
        logvar: logvar_post.to_vec(),
    };
    let prior = Gaussian {
        mu: mu_prior.to_vec(),
        logvar: logvar_prior.to_vec(),
    };
    Ok(rec + kl_diag(&post, &prior)?.0)
}

/// Fully convolutional discriminator over `concat(x, map)`: four stride-2
/// convolutions and a 1×1 sigmoid output.
pub fn discriminator(
    image: Shape3,
    width: usize,
    store: &mut ParamStore,
    rng: &mut RngStream,
) -> Result<Net> {
    let mut b = NetBuilder::new("disc", Shape3::new(image.c + 1, image.h, image.w));
    for _ in 0..4 {
        b = b.conv(width, 3, 2).leaky_relu();
    }
    b.conv(1, 1, 1).sigmoid().build(store, rng)
}

pub fn discriminate(
    net: &Net,
    store: &ParamStore,
    x: &Tensor,
    map: &Tensor,
) -> Result<(Tensor, ForwardCache)> {
    net.forward(store, &concat_channels(x, map)?, Mode::Train)
}

/// Gradient reaching the map channel of a discriminator input.
pub fn discriminator_backward(
    net: &Net,
    store: &ParamStore,
    cache: &ForwardCache,
    d: &Tensor,
    grads: Option<&mut Gradients>,
) -> Result<Tensor> {
    let dx = net.backward(store, cache, d, grads)?;
    let c = dx.shape().c - 1;
    Ok(crate::diff::ops::split_channels(&dx, c)?.1)
}

/// CVAE posterior `q(z|x,y)`: the prior architecture with the label as an
/// extra input channel.
pub fn posterior_net(
    image: Shape3,
    channels: &[usize],
    k: usize,
    bound: f64,
    store: &mut ParamStore,
    rng: &mut RngStream,
) -> Result<MomentNet> {
    MomentNet::new(
        "posterior",
        Shape3::new(image.c + 1, image.h, image.w),
        channels,
        k,
        bound,
        store,
        rng,
    )
}

/// Shared encoder with several complete decoders.
#[derive(Clone, Debug)]
pub struct DeepEnsemble {
    encoder: Encoder,
    decoders: Vec<(Net, Trunk, Net)>,
}

#[derive(Clone, Debug)]
pub struct DeepEnsembleCache {
    encoder: EncoderCache,
    decoders: Vec<(ForwardCache, TrunkCache, ForwardCache)>,
}

impl DeepEnsemble {
    pub fn new(
        cfg: &crate::elvm::ElvmConfig,
        members: usize,
        store: &mut ParamStore,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let encoder = Encoder::new(
            "enc",
            cfg.input_shape(),
            cfg.encoder_channels,
            cfg.reduce_channels,
            store,
            rng,
        )?;
        let [s1, s2, s3] = encoder.feature_shapes();
        let decoders = (0..members)
            .map(|m| {
                let fuse = fuse_net(&format!("dec{m}.fuse"), s3, cfg.decoder_width, store, rng)?;
                let trunk = Trunk::new(
                    &format!("dec{m}.trunk"),
                    fuse.output_shape(),
                    [s2, s1],
                    cfg.decoder_width,
                    cfg.head_features,
                    store,
                    rng,
                )?;
                let head = head_net(&format!("dec{m}.head"), trunk.output_shape(), store, rng)?;
                Ok((fuse, trunk, head))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DeepEnsemble { encoder, decoders })
    }

    pub fn members(&self) -> usize {
        self.decoders.len()
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        x: &Tensor,
    ) -> Result<(Vec<Tensor>, DeepEnsembleCache)> {
        let (f, ec): (Features, EncoderCache) = self.encoder.forward(store, x, None)?;
        let mut outs = Vec::with_capacity(self.decoders.len());
        let mut caches = Vec::with_capacity(self.decoders.len());
        for (fuse, trunk, head) in &self.decoders {
            let (h, fc) = fuse.forward(store, &f.r3, Mode::Train)?;
            let (t, tc) = trunk.forward(store, &h, &f.r2, &f.r1)?;
            let (y, hc) = head.forward(store, &t, Mode::Train)?;
            outs.push(y);
            caches.push((fc, tc, hc));
        }
        Ok((
            outs,
            DeepEnsembleCache {
                encoder: ec,
                decoders: caches,
            },
        ))
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &DeepEnsembleCache,
        d: &[Tensor],
        grads: &mut Gradients,
    ) -> Result<()> {
        let [s1, s2, s3] = self.encoder.feature_shapes();
        let n = d[0].batch();
        let mut dr1 = Tensor::zeros(n, s1);
        let mut dr2 = Tensor::zeros(n, s2);
        let mut dr3 = Tensor::zeros(n, s3);
        for ((fuse, trunk, head), ((fc, tc, hc), d)) in
            self.decoders.iter().zip(cache.decoders.iter().zip(d))
        {
            let dt = head.backward(store, hc, d, Some(grads))?;
            let (dh, b, a) = trunk.backward(store, tc, &dt, Some(grads))?;
            dr3.add_assign(&fuse.backward(store, fc, &dh, Some(grads))?)?;
            dr2.add_assign(&b)?;
            dr1.add_assign(&a)?;
        }
        self.encoder
            .backward(store, &cache.encoder, [&dr1, &dr2, &dr3], Some(grads))?;
        Ok(())
    }
}
