//! Ensemble-based conditional latent variable model.
//!
//! A shared multi-scale encoder feeds two branches: a stochastic branch in
//! which a spatially broadcast latent vector `z` joins the deepest features
//! and `M` sigmoid heads share one upsampling trunk, and a deterministic
//! branch with its own head. A conditional prior net supplies `p(z|x)`;
//! posterior samples come from Langevin dynamics.

pub mod check;
pub mod langevin;
pub mod parts;

use serde::{Deserialize, Serialize};

pub use check::{grad_check_elvm, grad_check_suite, ElvmProbe, SuiteEntry, SUITE_STEP};
pub use langevin::{
    langevin_step, langevin_update, log_joint, run_chains, LangevinConfig, LatentChain,
    LatentTarget, LinearGaussian,
};
pub use parts::{
    Dropout, Encoder, EncoderCache, Features, Gaussian, MomentCache, MomentNet, Trunk, TrunkCache,
};

use crate::diff::ops::{broadcast_batch, concat_channels, reduce_broadcast_batch, split_channels};
use crate::diff::{
    ForwardCache, Gradients, Mode, Net, ParamStore, RngStream, Shape3, Tensor, TensorMap,
};
use crate::error::{DuqError, Result};
use crate::instrument::PassCounter;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ElvmConfig {
    pub image_size: usize,
    /// Latent dimension `K`.
    pub latent_dim: usize,
    /// Number of last-layer ensemble heads `M`.
    pub ensemble_size: usize,
    pub encoder_channels: [usize; 3],
    pub reduce_channels: usize,
    pub decoder_width: usize,
    /// Channels of the full-resolution map the heads read.
    pub head_features: usize,
    pub prior_channels: Vec<usize>,
    /// Prior log-variances are squashed to `(-bound, bound)`.
    pub logvar_bound: f64,
    /// Deterministic branch reuses the stochastic trunk.
    pub shared_trunk: bool,
}

impl Default for ElvmConfig {
    fn default() -> Self {
        ElvmConfig {
            image_size: 32,
            latent_dim: 8,
            ensemble_size: 5,
            encoder_channels: [16, 32, 64],
            reduce_channels: 16,
            decoder_width: 16,
            head_features: 8,
            prior_channels: vec![8, 16, 16, 16, 16],
            logvar_bound: 5.0,
            shared_trunk: true,
        }
    }
}

impl ElvmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size % 8 != 0 || self.image_size == 0 {
            return Err(DuqError::InvalidConfig(
                "image_size must be a positive multiple of 8".into(),
            ));
        }
        if self.ensemble_size == 0 {
            return Err(DuqError::InvalidConfig(
                "ensemble_size must be at least 1".into(),
            ));
        }
        if self.latent_dim == 0 {
            return Err(DuqError::InvalidConfig(
                "latent_dim must be at least 1".into(),
            ));
        }
        if !(self.logvar_bound > 0.0) {
            return Err(DuqError::InvalidConfig(
                "logvar_bound must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> Shape3 {
        Shape3::new(1, self.image_size, self.image_size)
    }
}

#[derive(Clone, Debug)]
pub struct ElvmModel {
    cfg: ElvmConfig,
    encoder: Encoder,
    prior: MomentNet,
    fuse_z: Net,
    trunk: Trunk,
    heads: Vec<Net>,
    fuse_det: Net,
    trunk_det: Option<Trunk>,
    det_head: Net,
    counter: PassCounter,
}

/// Per-head outputs of a training forward pass, each `n×1×H×W`.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub heads: Vec<Tensor>,
    pub det: Option<Tensor>,
}

#[derive(Clone, Debug)]
struct StochCache {
    fuse: ForwardCache,
    trunk: TrunkCache,
    heads: Vec<ForwardCache>,
    groups: usize,
}

#[derive(Clone, Debug)]
struct DetCache {
    fuse: ForwardCache,
    trunk: TrunkCache,
    head: ForwardCache,
}

#[derive(Clone, Debug)]
pub struct TrainCache {
    batch: usize,
    encoder: EncoderCache,
    stoch: Option<StochCache>,
    det: Option<DetCache>,
}

impl ElvmModel {
    pub fn new(cfg: &ElvmConfig, store: &mut ParamStore, rng: &mut RngStream) -> Result<ElvmModel> {
        cfg.validate()?;
        let input = cfg.input_shape();
        let encoder = Encoder::new(
            "enc",
            input,
            cfg.encoder_channels,
            cfg.reduce_channels,
            store,
            rng,
        )?;
        let prior = MomentNet::new(
            "prior",
            input,
            &cfg.prior_channels,
            cfg.latent_dim,
            cfg.logvar_bound,
            store,
            rng,
        )?;
        let [s1, s2, s3] = encoder.feature_shapes();
        let zin = Shape3::new(s3.c + cfg.latent_dim, s3.h, s3.w);
        let fuse_z = parts::fuse_net("fuse_z", zin, cfg.decoder_width, store, rng)?;
        let trunk = Trunk::new(
            "trunk",
            fuse_z.output_shape(),
            [s2, s1],
            cfg.decoder_width,
            cfg.head_features,
            store,
            rng,
        )?;
        let heads = (0..cfg.ensemble_size)
            .map(|m| parts::head_net(&format!("head{m}"), trunk.output_shape(), store, rng))
            .collect::<Result<Vec<_>>>()?;
        let fuse_det = parts::fuse_net("fuse_det", s3, cfg.decoder_width, store, rng)?;
        let trunk_det = if cfg.shared_trunk {
            None
        } else {
            Some(Trunk::new(
                "trunk_det",
                fuse_det.output_shape(),
                [s2, s1],
                cfg.decoder_width,
                cfg.head_features,
                store,
                rng,
            )?)
        };
        let det_head = parts::head_net("det_head", trunk.output_shape(), store, rng)?;
        Ok(ElvmModel {
            cfg: cfg.clone(),
            encoder,
            prior,
            fuse_z,
            trunk,
            heads,
            fuse_det,
            trunk_det,
            det_head,
            counter: PassCounter::new(),
        })
    }

    pub fn config(&self) -> &ElvmConfig {
        &self.cfg
    }

    pub fn ensemble_size(&self) -> usize {
        self.heads.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    pub fn counter(&self) -> &PassCounter {
        &self.counter
    }

    pub fn set_counter(&mut self, counter: PassCounter) {
        self.counter = counter;
    }

    /// Block indices of the prior net, for gradient-flow checks.
    pub fn prior_blocks(&self, store: &ParamStore) -> Vec<usize> {
        store
            .blocks()
            .iter()
            .enumerate()
            .filter(|(_, b)| b.name.starts_with("prior."))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn encode(
        &self,
        store: &ParamStore,
        x: &Tensor,
        dropout: Option<Dropout<'_>>,
    ) -> Result<(Features, EncoderCache)> {
        self.encoder.forward(store, x, dropout)
    }

    pub fn prior_moments(
        &self,
        store: &ParamStore,
        x: &Tensor,
    ) -> Result<(Vec<Gaussian>, MomentCache)> {
        self.prior.forward(store, x)
    }

    pub fn prior_backward(
        &self,
        store: &ParamStore,
        cache: &MomentCache,
        d: &[Gaussian],
        grads: &mut Gradients,
    ) -> Result<()> {
        self.prior
            .backward(store, cache, d, Some(grads))
            .map(|_| ())
    }

    /// Stochastic trunk on features tiled `z.len() / n` times.
    fn stoch_forward(
        &self,
        store: &ParamStore,
        feats: &Features,
        z: &[Vec<f64>],
    ) -> Result<(Tensor, ForwardCache, TrunkCache)> {
        let n = feats.batch();
        if z.len() % n != 0 || z.is_empty() {
            return Err(DuqError::Shape(format!(
                "{} latent vectors for a batch of {n}",
                z.len()
            )));
        }
        if z.iter().any(|v| v.len() != self.cfg.latent_dim) {
            return Err(DuqError::Usage(format!(
                "latent vectors must have dimension {}",
                self.cfg.latent_dim
            )));
        }
        let groups = z.len() / n;
        let f = if groups == 1 {
            feats.clone()
        } else {
            feats.tile(groups)
        };
        let s3 = f.r3.shape();
        let top = concat_channels(&f.r3, &broadcast_batch(z, s3.h, s3.w)?)?;
        let (h, fc) = self.fuse_z.forward(store, &top, Mode::Train)?;
        let (feat, tc) = self.trunk.forward(store, &h, &f.r2, &f.r1)?;
        Ok((feat, fc, tc))
    }

    /// Returns `(dr1, dr2, dr3, dz)`, the feature gradients summed over tiles.
    fn stoch_backward(
        &self,
        store: &ParamStore,
        fuse: &ForwardCache,
        trunk: &TrunkCache,
        dfeat: &Tensor,
        n: usize,
        mut grads: Option<&mut Gradients>,
    ) -> Result<(Tensor, Tensor, Tensor, Vec<Vec<f64>>)> {
        let (dh, dr2, dr1) = self
            .trunk
            .backward(store, trunk, dfeat, grads.as_deref_mut())?;
        let dtop = self.fuse_z.backward(store, fuse, &dh, grads)?;
        let (dr3, dzmap) = split_channels(&dtop, self.cfg.reduce_channels)?;
        let dz = reduce_broadcast_batch(&dzmap);
        Ok((
            fold_tiles(&dr1, n)?,
            fold_tiles(&dr2, n)?,
            fold_tiles(&dr3, n)?,
            dz,
        ))
    }

    fn det_trunk(&self) -> &Trunk {
        self.trunk_det.as_ref().unwrap_or(&self.trunk)
    }

    /// Training-mode forward. `zs` holds one latent batch per group: a
    /// single group feeds every head, `M` groups feed one head each. `None`
    /// skips the stochastic branch; `with_det = false` skips the
    /// deterministic one.
    pub fn forward_train(
        &self,
        store: &ParamStore,
        x: &Tensor,
        zs: Option<&[Vec<Vec<f64>>]>,
        with_det: bool,
        dropout: Option<Dropout<'_>>,
    ) -> Result<(TrainOutputs, TrainCache)> {
        let n = x.batch();
        let (feats, ec) = self.encode(store, x, dropout)?;
        let mut out = TrainOutputs {
            heads: Vec::new(),
            det: None,
        };
        let stoch = match zs {
            None => None,
            Some(zs) => {
                let groups = zs.len();
                if groups != 1 && groups != self.heads.len() {
                    return Err(DuqError::Usage(format!(
                        "need 1 or {} latent groups, got {groups}",
                        self.heads.len()
                    )));
                }
                let flat: Vec<Vec<f64>> = zs.iter().flat_map(|g| g.iter().cloned()).collect();
                let (feat, fc, tc) = self.stoch_forward(store, &feats, &flat)?;
                let mut hcs = Vec::with_capacity(self.heads.len());
                for (m, head) in self.heads.iter().enumerate() {
                    let input = if groups == 1 {
                        feat.clone()
                    } else {
                        feat.batch_range(m * n, n)
                    };
                    let (y, hc) = head.forward(store, &input, Mode::Train)?;
                    out.heads.push(y);
                    hcs.push(hc);
                }
                self.counter.stochastic(n * groups);
                Some(StochCache {
                    fuse: fc,
                    trunk: tc,
                    heads: hcs,
                    groups,
                })
            }
        };
        let det = if with_det {
            let (h, fc) = self.fuse_det.forward(store, &feats.r3, Mode::Train)?;
            let (feat, tc) = self.det_trunk().forward(store, &h, &feats.r2, &feats.r1)?;
            let (y, hc) = self.det_head.forward(store, &feat, Mode::Train)?;
            out.det = Some(y);
            self.counter.deterministic(n);
            Some(DetCache {
                fuse: fc,
                trunk: tc,
                head: hc,
            })
        } else {
            None
        };
        Ok((
            out,
            TrainCache {
                batch: n,
                encoder: ec,
                stoch,
                det,
            },
        ))
    }

    /// Backward of [`forward_train`](Self::forward_train). Returns the latent
    /// gradients, one batch per group, so callers can route them into the
    /// prior net.
    pub fn backward_train(
        &self,
        store: &ParamStore,
        cache: &TrainCache,
        d_heads: &[Tensor],
        d_det: Option<&Tensor>,
        grads: &mut Gradients,
    ) -> Result<Vec<Vec<Vec<f64>>>> {
        let n = cache.batch;
        let [s1, s2, s3] = self.encoder.feature_shapes();
        let mut dr1 = Tensor::zeros(n, s1);
        let mut dr2 = Tensor::zeros(n, s2);
        let mut dr3 = Tensor::zeros(n, s3);
        let mut dz_groups = Vec::new();
        if let Some(sc) = &cache.stoch {
            if d_heads.len() != self.heads.len() {
                return Err(DuqError::Internal(format!(
                    "{} head gradients for {} heads",
                    d_heads.len(),
                    self.heads.len()
                )));
            }
            let mut parts = Vec::with_capacity(self.heads.len());
            for ((head, hc), d) in self.heads.iter().zip(&sc.heads).zip(d_heads) {
                parts.push(head.backward(store, hc, d, Some(grads))?);
            }
            let dfeat = if sc.groups == 1 {
                let mut acc = parts[0].clone();
                for p in &parts[1..] {
                    acc.add_assign(p)?;
                }
                acc
            } else {
                Tensor::concat_batch(&parts.iter().collect::<Vec<_>>())?
            };
            let (a, b, c, dz) =
                self.stoch_backward(store, &sc.fuse, &sc.trunk, &dfeat, n, Some(grads))?;
            dr1.add_assign(&a)?;
            dr2.add_assign(&b)?;
            dr3.add_assign(&c)?;
            dz_groups = dz.chunks(n).map(|c| c.to_vec()).collect();
        }
        if let (Some(dc), Some(d)) = (&cache.det, d_det) {
            let dfeat = self.det_head.backward(store, &dc.head, d, Some(grads))?;
            let (dh, b, a) = self
                .det_trunk()
                .backward(store, &dc.trunk, &dfeat, Some(grads))?;
            let c = self.fuse_det.backward(store, &dc.fuse, &dh, Some(grads))?;
            dr1.add_assign(&a)?;
            dr2.add_assign(&b)?;
            dr3.add_assign(&c)?;
        }
        self.encoder
            .backward(store, &cache.encoder, [&dr1, &dr2, &dr3], Some(grads))?;
        Ok(dz_groups)
    }

    /// Langevin target for a batch whose features are already encoded.
    pub fn latent_target<'a>(
        &'a self,
        store: &'a ParamStore,
        feats: &'a Features,
        y: &'a Tensor,
    ) -> ElvmLatent<'a> {
        ElvmLatent {
            model: self,
            store,
            feats,
            y,
        }
    }

    /// Runs one Langevin chain per batch entry starting at `z0`.
    pub fn run_langevin(
        &self,
        store: &ParamStore,
        feats: &Features,
        y: &Tensor,
        z0: Vec<Vec<f64>>,
        priors: &[Gaussian],
        cfg: &LangevinConfig,
        rng: &mut RngStream,
    ) -> Result<Vec<LatentChain>> {
        let target = self.latent_target(store, feats, y);
        run_chains(&target, z0, priors, cfg, rng)
    }

    /// `z₀ = μ + exp(logvar/2)·ε` for a single image.
    pub fn prior_sample(
        &self,
        store: &ParamStore,
        x: &TensorMap,
        rng: &mut RngStream,
    ) -> Result<(Vec<f64>, Gaussian)> {
        let (g, _) = self.prior_moments(store, &x.to_tensor())?;
        let g = g.into_iter().next().expect("batch of one");
        let eps = rng.normal_vec(g.dim());
        Ok((g.reparameterize(&eps), g))
    }

    /// Prior draw followed by `cfg.steps` Langevin updates on one image.
    pub fn infer_latent(
        &self,
        store: &ParamStore,
        x: &TensorMap,
        y: &TensorMap,
        cfg: &LangevinConfig,
        rng: &mut RngStream,
    ) -> Result<LatentChain> {
        let xt = x.to_tensor();
        let (z0, g) = self.prior_sample(store, x, rng)?;
        let (feats, _) = self.encode(store, &xt, None)?;
        let prior = if cfg.conditional {
            g
        } else {
            Gaussian::standard(z0.len())
        };
        let mut chains =
            self.run_langevin(store, &feats, &y.to_tensor(), vec![z0], &[prior], cfg, rng)?;
        Ok(chains.pop().expect("one chain"))
    }

    /// All head predictions for a batch under per-sample latents, from one
    /// stochastic pass per image.
    pub fn predict_heads_batch(
        &self,
        store: &ParamStore,
        x: &Tensor,
        z: &[Vec<f64>],
    ) -> Result<Vec<Tensor>> {
        let (out, _) = self.forward_train(
            store,
            x,
            Some(std::slice::from_ref(&z.to_vec())),
            false,
            None,
        )?;
        Ok(out.heads)
    }

    pub fn predict_heads(
        &self,
        store: &ParamStore,
        x: &TensorMap,
        z: &[f64],
    ) -> Result<Vec<TensorMap>> {
        self.predict_heads_batch(store, &x.to_tensor(), &[z.to_vec()])?
            .iter()
            .map(|t| t.to_map(0))
            .collect()
    }

    /// Output of ensemble head `head` (0-based) under latent `z`.
    pub fn forward_stochastic(
        &self,
        store: &ParamStore,
        x: &TensorMap,
        z: &[f64],
        head: usize,
    ) -> Result<TensorMap> {
        if head >= self.heads.len() {
            return Err(DuqError::Usage(format!(
                "head index {head} out of range for {} heads",
                self.heads.len()
            )));
        }
        Ok(self.predict_heads(store, x, z)?.swap_remove(head))
    }

    pub fn deterministic_batch(
        &self,
        store: &ParamStore,
        x: &Tensor,
        dropout: Option<Dropout<'_>>,
    ) -> Result<Tensor> {
        let (out, _) = self.forward_train(store, x, None, true, dropout)?;
        Ok(out.det.expect("deterministic branch requested"))
    }

    pub fn forward_deterministic(&self, store: &ParamStore, x: &TensorMap) -> Result<TensorMap> {
        self.deterministic_batch(store, &x.to_tensor(), None)?
            .to_map(0)
    }
}

/// Sums `n`-sample blocks of a tiled batch back onto one batch.
fn fold_tiles(t: &Tensor, n: usize) -> Result<Tensor> {
    let groups = t.batch() / n;
    let mut acc = t.batch_range(0, n);
    for g in 1..groups {
        acc.add_assign(&t.batch_range(g * n, n))?;
    }
    Ok(acc)
}

/// [`LatentTarget`] view of the model: `f(z)` is the ensemble-mean prediction.
pub struct ElvmLatent<'a> {
    model: &'a ElvmModel,
    store: &'a ParamStore,
    feats: &'a Features,
    y: &'a Tensor,
}

impl LatentTarget for ElvmLatent<'_> {
    fn dim(&self) -> usize {
        self.model.cfg.latent_dim
    }

    fn chains(&self) -> usize {
        self.feats.batch()
    }

    fn residual(&self, z: &[Vec<f64>]) -> Result<Vec<(f64, Vec<f64>)>> {
        let m = self.model;
        let n = self.feats.batch();
        let (feat, fc, tc) = m.stoch_forward(self.store, self.feats, z)?;
        let mut outs = Vec::with_capacity(m.heads.len());
        for head in &m.heads {
            outs.push(head.forward(self.store, &feat, Mode::Train)?);
        }
        let mut mean = outs[0].0.clone();
        for (o, _) in &outs[1..] {
            mean.add_assign(o)?;
        }
        mean.scale(1.0 / outs.len() as f64);
        let mut r = self.y.clone();
        for (a, b) in r.data_mut().iter_mut().zip(mean.data()) {
            *a -= b;
        }
        let sq: Vec<f64> = (0..n)
            .map(|i| r.sample(i).iter().map(|v| v * v).sum())
            .collect();
        let mut up = r;
        up.scale(1.0 / outs.len() as f64);
        let mut dfeat: Option<Tensor> = None;
        for (head, (_, hc)) in m.heads.iter().zip(&outs) {
            let d = head.backward(self.store, hc, &up, None)?;
            match dfeat.as_mut() {
                Some(acc) => acc.add_assign(&d)?,
                None => dfeat = Some(d),
            }
        }
        let (_, _, _, dz) = m.stoch_backward(
            self.store,
            &fc,
            &tc,
            &dfeat.expect("at least one head"),
            n,
            None,
        )?;
        Ok(sq.into_iter().zip(dz).collect())
    }
}
