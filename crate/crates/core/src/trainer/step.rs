use serde::{Deserialize, Serialize};

use super::{Aux, Method, TrainState};
use crate::baselines;
use crate::diff::ops::concat_channels;
use crate::diff::{adam_step, AdamConfig, Gradients, Mode, ParamStore, RngStream, Tensor};
use crate::elvm::{Dropout, Gaussian, LatentChain};
use crate::error::{DuqError, Result};
use crate::uncertainty::losses::{mean_cross_entropy, optimal_slice};
use crate::uncertainty::{
    aleatoric_consistency, attenuated, batch_loss, predictive_consistency, LossMode,
};

/// Batch means of the four losses of one step, taken before the update.
///
/// Comparison methods reuse the columns: `l_d` is the reconstruction or
/// task loss, `l_s` the adversarial or KL term, `l_au` the discriminator
/// loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub l_d: f64,
    pub l_s: f64,
    pub l_au: f64,
    pub l_pu: f64,
}

impl StepLosses {
    pub fn task(&self) -> f64 {
        self.l_d + self.l_s
    }

    fn all_finite(&self) -> bool {
        [self.l_d, self.l_s, self.l_au, self.l_pu]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Which stores a step may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepOptions {
    pub update_theta: bool,
    pub update_alpha: bool,
    pub update_beta: bool,
}

impl Default for StepOptions {
    fn default() -> Self {
        StepOptions {
            update_theta: true,
            update_alpha: true,
            update_beta: true,
        }
    }
}

/// Dumped when a step produces a non-finite loss.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: u64,
    pub losses: StepLosses,
    pub chains: Vec<LatentChain>,
    /// Training indices of the batch, filled in by the loop.
    pub batch: Vec<usize>,
    pub epoch: usize,
}

fn mean_tensor(ts: &[Tensor]) -> Tensor {
    let mut acc = ts[0].clone();
    for t in &ts[1..] {
        acc.add_assign(t).expect("equal shapes");
    }
    acc.scale(1.0 / ts.len() as f64);
    acc
}

fn bce_batch(pred: &Tensor, y: &Tensor) -> Result<(f64, Tensor)> {
    batch_loss(pred.shape(), pred.batch(), |i| {
        mean_cross_entropy(pred.sample(i), y.sample(i))
    })
}

/// `s − mean(s)` per image.
fn centred(s: &Tensor) -> Tensor {
    let mut out = s.clone();
    for i in 0..s.batch() {
        let v = out.sample_mut(i);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter_mut().for_each(|x| *x -= m);
    }
    out
}

fn attenuated_batch(
    pred: &Tensor,
    y: &Tensor,
    s: &Tensor,
    mode: LossMode,
) -> Result<(f64, Tensor, Tensor)> {
    let n = pred.batch();
    let mut ds = Tensor::zeros(n, s.shape());
    let mut value = 0.0;
    let mut dp = Tensor::zeros(n, pred.shape());
    for i in 0..n {
        let a = attenuated(pred.sample(i), y.sample(i), s.sample(i), mode)?;
        value += a.value / n as f64;
        for (d, v) in dp.sample_mut(i).iter_mut().zip(&a.d_pred) {
            *d = v / n as f64;
        }
        for (d, v) in ds.sample_mut(i).iter_mut().zip(&a.d_s) {
            *d = v / n as f64;
        }
    }
    Ok((value, dp, ds))
}

fn update(store: &mut ParamStore, grads: &Gradients, lr: f64, enabled: bool) -> Result<()> {
    if enabled {
        adam_step(store, grads, &AdamConfig::with_lr(lr))?;
    }
    Ok(())
}

impl TrainState {
    /// One update on a batch of images `x` and labels `y`. The losses are
    /// evaluated before the update.
    pub fn train_step(
        &mut self,
        x: &Tensor,
        y: &Tensor,
        lr: f64,
        rng: &mut RngStream,
        opts: StepOptions,
    ) -> Result<StepLosses> {
        if x.batch() != y.batch() || x.batch() == 0 {
            return Err(DuqError::Usage(
                "image and label batches must be nonempty and equal in size".into(),
            ));
        }
        let mut chains = Vec::new();
        let losses = match self.cfg.method {
            Method::Full => self.step_full(x, y, lr, rng, opts, &mut chains),
            Method::Base => self.step_base(x, y, lr, None, opts),
            Method::McDropout => self.step_base(x, y, lr, Some(rng), opts),
            Method::DualHead => self.step_dual_head(x, y, lr, opts),
            Method::DeepEnsemble => self.step_ensemble(x, y, lr, opts),
            Method::Gan => self.step_gan(x, y, lr, rng, opts),
            Method::Cvae => self.step_cvae(x, y, lr, rng, opts),
        };
        let losses = match losses {
            Err(e)
                if matches!(
                    e,
                    DuqError::NonFinite { .. } | DuqError::Domain(_) | DuqError::Inference(_)
                ) =>
            {
                if self.diagnostics.is_none() {
                    self.diagnostics = Some(StepDiagnostics {
                        step: self.steps,
                        losses: StepLosses {
                            l_d: f64::NAN,
                            l_s: f64::NAN,
                            l_au: f64::NAN,
                            l_pu: f64::NAN,
                        },
                        chains,
                        batch: Vec::new(),
                        epoch: self.epochs_done,
                    });
                }
                return Err(e);
            }
            other => other?,
        };
        self.steps += 1;
        self.round_stores();
        Ok(losses)
    }

    fn check_losses(&mut self, losses: StepLosses, chains: &[LatentChain]) -> Result<()> {
        if losses.all_finite() {
            return Ok(());
        }
        self.diagnostics = Some(StepDiagnostics {
            step: self.steps,
            losses,
            chains: chains.to_vec(),
            batch: Vec::new(),
            epoch: self.epochs_done,
        });
        Err(DuqError::non_finite(format!(
            "training loss at step {}",
            self.steps
        )))
    }

    fn step_full(
        &mut self,
        x: &Tensor,
        y: &Tensor,
        lr: f64,
        rng: &mut RngStream,
        opts: StepOptions,
        chains_out: &mut Vec<LatentChain>,
    ) -> Result<StepLosses> {
        let model = self.model.as_ref().expect("full method has an ELVM");
        let heads = self.heads.as_ref().expect("full method has heads");
        let n = x.batch();
        let k = model.latent_dim();
        let m = model.ensemble_size();
        let theta = &self.theta;

        // Inference with the pre-update parameters.
        let (priors, pcache) = model.prior_moments(theta, x)?;
        let eps: Vec<Vec<f64>> = (0..n).map(|_| rng.normal_vec(k)).collect();
        let z0: Vec<Vec<f64>> = priors
            .iter()
            .zip(&eps)
            .map(|(g, e)| g.reparameterize(e))
            .collect();
        let (feats, _) = model.encode(theta, x, None)?;
        let chains =
            model.run_langevin(theta, &feats, y, z0, &priors, &self.cfg.langevin(), rng)?;
        *chains_out = chains.clone();
        let t = self.cfg.langevin_steps;
        let zs: Vec<Vec<Vec<f64>>> = if self.cfg.shared_z {
            vec![chains.iter().map(|c| c.last().to_vec()).collect()]
        } else {
            (0..m)
                .map(|j| {
                    let idx = (t + 1 + j).saturating_sub(m);
                    chains.iter().map(|c| c.states[idx].clone()).collect()
                })
                .collect()
        };

        let (out, cache) = model.forward_train(theta, x, Some(&zs), true, None)?;
        let det = out.det.as_ref().expect("deterministic branch requested");
        let mean = mean_tensor(&out.heads);
        let (s_p, bcache) = heads.predictive(&self.beta, x, &mean, Mode::Train)?;
        let s_up = heads.upsample(&s_p);
        let s_task = centred(&s_up);
        let mode = self.cfg.loss_mode;

        let (l_d, d_det, _) = attenuated_batch(det, y, &s_task, mode)?;
        let mut l_s = 0.0;
        let mut d_heads = Vec::with_capacity(m);
        for h in &out.heads {
            let (l, mut d, _) = attenuated_batch(h, y, &s_task, mode)?;
            l_s += l / m as f64;
            d.scale(1.0 / m as f64);
            d_heads.push(d);
        }
        let mut g_theta = theta.zero_grads();
        let dz = model.backward_train(theta, &cache, &d_heads, Some(&d_det), &mut g_theta)?;

        // Prior: reparameterized task gradient plus the fit to the final chain state.
        let w = self.cfg.prior_fit_weight / n as f64;
        let dprior: Vec<Gaussian> = (0..n)
            .map(|i| {
                let g = &priors[i];
                let zt = chains[i].last();
                let mut d = Gaussian::standard(k);
                for j in 0..k {
                    let total: f64 = dz.iter().map(|grp| grp[i][j]).sum();
                    let sd = (g.logvar[j] / 2.0).exp();
                    let r = (zt[j] - g.mu[j]) * (zt[j] - g.mu[j]) / g.logvar[j].exp();
                    d.mu[j] = total - w * (zt[j] - g.mu[j]) / g.logvar[j].exp();
                    d.logvar[j] = total * eps[i][j] * sd / 2.0 + w * 0.5 * (1.0 - r);
                }
                d
            })
            .collect();
        model.prior_backward(theta, &pcache, &dprior, &mut g_theta)?;

        // Aleatoric head against the optimal prediction.
        let preds: Vec<Vec<&[f64]>> = (0..n)
            .map(|i| out.heads.iter().map(|h| h.sample(i)).collect())
            .collect();
        let (s_a, acache) = heads.aleatoric(&self.alpha, x)?;
        let (l_au, ds_a) = batch_loss(s_a.shape(), n, |i| {
            let f_star = optimal_slice(&preds[i], y.sample(i))?;
            aleatoric_consistency(s_a.sample(i), &f_star)
        })?;
        let mut g_alpha = self.alpha.zero_grads();
        heads.aleatoric_backward(&self.alpha, &acache, &ds_a, &mut g_alpha)?;

        // Predictive head against the ensemble entropy and mean error.
        let (l_pu, ds_up) = batch_loss(s_up.shape(), n, |i| {
            predictive_consistency(s_up.sample(i), &preds[i], y.sample(i))
        })?;
        let mut g_beta = self.beta.zero_grads();
        heads.predictive_backward(
            &self.beta,
            &bcache,
            &heads.upsample_backward(&ds_up),
            &mut g_beta,
        )?;

        let losses = StepLosses {
            l_d,
            l_s,
            l_au,
            l_pu,
        };
        self.check_losses(losses, &chains)?;
        let heads = self.heads.as_ref().expect("full method has heads");
        update(&mut self.theta, &g_theta, lr, opts.update_theta)?;
        update(&mut self.alpha, &g_alpha, lr, opts.update_alpha)?;
        if opts.update_beta {
            update(&mut self.beta, &g_beta, lr, true)?;
            heads.update_running_stats(&mut self.beta, &bcache)?;
        }
        Ok(losses)
    }

    fn step_base(
        &mut self,
        x: &Tensor,
        y: &Tensor,
        lr: f64,
        rng: Option<&mut RngStream>,
        opts: StepOptions,
    ) -> Result<StepLosses> {
        let model = self.model.as_ref().expect("base method has an ELVM");
        let rate = self.cfg.dropout_rate;
        let dropout = rng.map(|rng| Dropout { rate, rng });
        let (out, cache) = model.forward_train(&self.theta, x, None, true, dropout)?;
        let (l_d, d) = bce_batch(out.det.as_ref().expect("deterministic branch"), y)?;
        let mut g = self.theta.zero_grads();
        model.backward_train(&self.theta, &cache, &[], Some(&d), &mut g)?;
        let losses = StepLosses {
            l_d,
            ..Default::default()
        };
        self.check_losses(losses, &[])?;
        update(&mut self.theta, &g, lr, opts.update_theta)?;
        Ok(losses)
    }

    /// Deterministic prediction and a learnable log-variance trained jointly
    /// under the attenuated loss alone.
    fn step_dual_head(
        &mut self,
        x: &Tensor,
        y: &Tensor,
        lr: f64,
        opts: StepOptions,
    ) -> Result<StepLosses> {
        let model = self.model.as_ref().expect("dual-head method has an ELVM");
        let heads = self.heads.as_ref().expect("dual-head method has heads");
        let (out, cache) = model.forward_train(&self.theta, x, None, true, None)?;
        let (s_a, acache) = heads.aleatoric(&self.alpha, x)?;
        let det = out.det.as_ref().expect("deterministic branch");
        let (l_d, d_det, ds) = attenuated_batch(det, y, &s_a, self.cfg.loss_mode)?;
        let mut g_theta = self.theta.zero_grads();
        model.backward_train(&self.theta, &cache, &[], Some(&d_det), &mut g_theta)?;
        let mut g_alpha = self.alpha.zero_grads();
        heads.aleatoric_backward(&self.alpha, &acache, &ds, &mut g_alpha)?;
        let losses = StepLosses {
            l_d,
            ..Default::default()
        };
        self.check_losses(losses, &[])?;
        update(&mut self.theta, &g_theta, lr, opts.update_theta)?;
        update(&mut self.alpha, &g_alpha, lr, opts.update_alpha)?;
        Ok(losses)
    }

    fn step_ensemble(
        &mut self,
        x: &Tensor,
        y: &Tensor,
        lr: f64,
        opts: StepOptions,
    ) -> Result<StepLosses> {
        let ens = self.ensemble.as_ref().expect("deep ensemble");
        let (outs, cache) = ens.forward(&self.theta, x)?;
        let m = outs.len() as f64;
        let mut l_d = 0.0;
        let mut ds = Vec::with_capacity(outs.len());
        for o in &outs {
            let (l, mut d) = bce_batch(o, y)?;
            l_d += l / m;
            d.scale(1.0 / m);
            ds.push(d);
        }
        let mut g = self.theta.zero_grads();
        ens.backward(&self.theta, &cache, &ds, &mut g)?;
        let losses = StepLosses {
            l_d,
            ..Default::default()
        };
        self.check_losses(losses, &[])?;
        update(&mut self.theta, &g, lr, opts.update_theta)?;
        Ok(losses)
    }

    fn step_gan(
        &mut self,
        x: &Tensor,
        y: &Tensor,
        lr: f64,
        rng: &mut RngStream,
        opts: StepOptions,
    ) -> Result<StepLosses> {
        let model = self.model.as_ref().expect("gan generator");
        let Aux::Discriminator(disc) = &self.aux else {
            return Err(DuqError::Internal("gan state without discriminator".into()));
        };
        let n = x.batch();
        let z: Vec<Vec<f64>> = (0..n).map(|_| rng.normal_vec(model.latent_dim())).collect();
        let (out, cache) =
            model.forward_train(&self.theta, x, Some(std::slice::from_ref(&z)), false, None)?;
        let pred = &out.heads[0];
        let (l_rec, mut d_pred) = bce_batch(pred, y)?;
        let (fake, fcache) = baselines::discriminate(disc, &self.aux_store, x, pred)?;
        let (real, rcache) = baselines::discriminate(disc, &self.aux_store, x, y)?;
        let g = baselines::gan_losses(l_rec, fake.data(), real.data(), self.cfg.gan_lambda)?;
        let d_fake = Tensor::from_vec(n, fake.shape(), g.d_fake_gen.clone())?;
        d_pred.add_assign(&baselines::discriminator_backward(
            disc,
            &self.aux_store,
            &fcache,
            &d_fake,
            None,
        )?)?;
        let mut g_theta = self.theta.zero_grads();
        model.backward_train(&self.theta, &cache, &[d_pred], None, &mut g_theta)?;
        let mut g_disc = self.aux_store.zero_grads();
        let d_fake = Tensor::from_vec(n, fake.shape(), g.d_fake_dis)?;
        baselines::discriminator_backward(
            disc,
            &self.aux_store,
            &fcache,
            &d_fake,
            Some(&mut g_disc),
        )?;
        let d_real = Tensor::from_vec(n, real.shape(), g.d_real_dis)?;
        baselines::discriminator_backward(
            disc,
            &self.aux_store,
            &rcache,
            &d_real,
            Some(&mut g_disc),
        )?;
        let losses = StepLosses {
            l_d: l_rec,
            l_s: g.l_adv,
            l_au: g.l_dis,
            l_pu: 0.0,
        };
        self.check_losses(losses, &[])?;
        update(&mut self.theta, &g_theta, lr, opts.update_theta)?;
        update(&mut self.aux_store, &g_disc, lr, opts.update_theta)?;
        Ok(losses)
    }

    fn step_cvae(
        &mut self,
        x: &Tensor,
        y: &Tensor,
        lr: f64,
        rng: &mut RngStream,
        opts: StepOptions,
    ) -> Result<StepLosses> {
        let model = self.model.as_ref().expect("cvae decoder");
        let Aux::Posterior(post_net) = &self.aux else {
            return Err(DuqError::Internal(
                "cvae state without posterior net".into(),
            ));
        };
        let n = x.batch();
        let k = model.latent_dim();
        let (post, qcache) = post_net.forward(&self.aux_store, &concat_channels(x, y)?)?;
        let (priors, pcache) = model.prior_moments(&self.theta, x)?;
        let eps: Vec<Vec<f64>> = (0..n).map(|_| rng.normal_vec(k)).collect();
        let z: Vec<Vec<f64>> = post
            .iter()
            .zip(&eps)
            .map(|(g, e)| g.reparameterize(e))
            .collect();
        let (out, cache) =
            model.forward_train(&self.theta, x, Some(std::slice::from_ref(&z)), false, None)?;
        let (l_rec, d_pred) = bce_batch(&out.heads[0], y)?;
        let mut g_theta = self.theta.zero_grads();
        let dz = model.backward_train(&self.theta, &cache, &[d_pred], None, &mut g_theta)?;
        let mut kl = 0.0;
        let mut dpost = Vec::with_capacity(n);
        let mut dprior = Vec::with_capacity(n);
        for i in 0..n {
            let (v, mut dp, mut dq) = baselines::kl_diag(&post[i], &priors[i])?;
            kl += v / n as f64;
            for j in 0..k {
                dp.mu[j] /= n as f64;
                dp.logvar[j] /= n as f64;
                dq.mu[j] /= n as f64;
                dq.logvar[j] /= n as f64;
                let sd = (post[i].logvar[j] / 2.0).exp();
                dp.mu[j] += dz[0][i][j];
                dp.logvar[j] += dz[0][i][j] * eps[i][j] * sd / 2.0;
            }
            dpost.push(dp);
            dprior.push(dq);
        }
        model.prior_backward(&self.theta, &pcache, &dprior, &mut g_theta)?;
        let mut g_post = self.aux_store.zero_grads();
        post_net.backward(&self.aux_store, &qcache, &dpost, Some(&mut g_post))?;
        let losses = StepLosses {
            l_d: l_rec,
            l_s: kl,
            ..Default::default()
        };
        self.check_losses(losses, &[])?;
        update(&mut self.theta, &g_theta, lr, opts.update_theta)?;
        update(&mut self.aux_store, &g_post, lr, opts.update_theta)?;
        Ok(losses)
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::{tiny, tiny_data};
    use super::*;

    pub fn batch(idx: &[usize]) -> (Tensor, Tensor) {
        let d = tiny_data();
        let x = Tensor::stack(&idx.iter().map(|&i| &d.train[i].image).collect::<Vec<_>>()).unwrap();
        let y = Tensor::stack(
            &idx.iter()
                .map(|&i| &d.train[i].noisy_label)
                .collect::<Vec<_>>(),
        )
        .unwrap();
        (x, y)
    }

    #[test]
    fn every_method_steps() {
        for m in Method::ALL {
            let mut s = TrainState::new(&tiny(m), 16).unwrap();
            let (x, y) = batch(&[0, 1, 2]);
            let before = s.theta.flatten();
            let l = s
                .train_step(
                    &x,
                    &y,
                    1e-3,
                    &mut RngStream::new(0, 9),
                    StepOptions::default(),
                )
                .unwrap();
            assert!(l.task().is_finite() && l.l_d > 0.0, "{m}");
            assert_ne!(before, s.theta.flatten(), "{m}");
            assert!(s.stores().iter().all(|st| st.all_finite()));
        }
    }

    #[test]
    fn gradient_isolation() {
        let cfgs = [
            (false, true, false),
            (false, false, true),
            (true, false, false),
        ];
        for (t, a, b) in cfgs {
            let mut s = TrainState::new(&tiny(Method::Full), 16).unwrap();
            let (x, y) = batch(&[0, 1]);
            let snap = |s: &TrainState| [s.theta.flatten(), s.alpha.flatten(), s.beta.flatten()];
            let before = snap(&s);
            let opts = StepOptions {
                update_theta: t,
                update_alpha: a,
                update_beta: b,
            };
            s.train_step(&x, &y, 1e-3, &mut RngStream::new(1, 0), opts)
                .unwrap();
            let after = snap(&s);
            for (i, on) in [t, a, b].into_iter().enumerate() {
                assert_eq!(before[i] != after[i], on, "store {i} with options {opts:?}");
            }
        }
    }

    #[test]
    fn non_finite_loss_dumps_diagnostics() {
        let mut s = TrainState::new(&tiny(Method::Full), 16).unwrap();
        let (x, y) = batch(&[0, 1]);
        let id = s.heads().unwrap().alpha_net().block_ids()[0];
        s.alpha.block_mut(id)[0] = f64::NAN;
        let err = s.train_step(
            &x,
            &y,
            1e-3,
            &mut RngStream::new(1, 0),
            StepOptions::default(),
        );
        assert!(err.is_err());
        let d = s.take_diagnostics().expect("diagnostics recorded");
        assert_eq!(d.chains.len(), 2);
    }
}
