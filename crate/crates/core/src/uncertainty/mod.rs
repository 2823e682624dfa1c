//! Single-pass uncertainty heads and their training losses.
//!
//! The aleatoric head α maps the image to a full-resolution log-variance
//! `s_a`; the predictive head β maps image and prediction to `s_p` at 1/8
//! resolution. Epistemic uncertainty is the difference of the two
//! normalized maps.

pub mod losses;

use serde::{Deserialize, Serialize};

pub use losses::{
    aleatoric_consistency, attenuated, attenuated_loss, bce_map, bice, bice_loss, binary_entropy,
    cross_entropy, mean_error, minmax, minmax_backward, minmax_norm, optimal_prediction,
    optimal_slice, predictive_consistency, Attenuated, LossMode,
};

use crate::diff::ops::{
    bilinear_resize, bilinear_resize_backward, concat_channels, split_channels,
};
use crate::diff::{
    ForwardCache, Gradients, Mode, Net, NetBuilder, ParamStore, RngStream, Shape3, Tensor,
    TensorMap,
};
use crate::error::{DuqError, Result};
use crate::instrument::PassCounter;

/// Strides of the predictive head.
pub const BETA_STRIDES: [usize; 5] = [2, 1, 2, 1, 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadsConfig {
    pub image_size: usize,
    pub alpha_channels: [usize; 2],
    pub beta_channels: [usize; 4],
}

impl Default for HeadsConfig {
    fn default() -> Self {
        HeadsConfig {
            image_size: 32,
            alpha_channels: [16, 32],
            beta_channels: [64; 4],
        }
    }
}

#[derive(Clone, Debug)]
pub struct UncertaintyHeads {
    cfg: HeadsConfig,
    alpha: Net,
    beta: Net,
    counter: PassCounter,
}

/// Normalized maps of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyBundle {
    pub aleatoric: TensorMap,
    pub predictive: TensorMap,
    /// `predictive − aleatoric`, in `[-1, 1]`.
    pub epistemic_raw: TensorMap,
    pub epistemic: TensorMap,
}

impl UncertaintyHeads {
    pub fn new(
        cfg: &HeadsConfig,
        alpha_store: &mut ParamStore,
        beta_store: &mut ParamStore,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if cfg.image_size % 8 != 0 || cfg.image_size == 0 {
            return Err(DuqError::InvalidConfig(
                "image_size must be a positive multiple of 8".into(),
            ));
        }
        let n = cfg.image_size;
        let [a1, a2] = cfg.alpha_channels;
        let alpha = NetBuilder::new("alpha", Shape3::new(1, n, n))
            .conv(a1, 3, 2)
            .leaky_relu()
            .conv(a2, 3, 2)
            .leaky_relu()
            .upsample(2)
            .conv(a1, 3, 1)
            .leaky_relu()
            .upsample(2)
            .conv(1, 3, 1)
            .build(alpha_store, rng)?;
        let mut b = NetBuilder::new("beta", Shape3::new(2, n, n));
        for (c, s) in cfg.beta_channels.iter().zip(BETA_STRIDES) {
            b = b.conv(*c, 3, s).leaky_relu().batch_norm();
        }
        let beta = b.conv(1, 3, BETA_STRIDES[4]).build(beta_store, rng)?;
        Ok(UncertaintyHeads {
            cfg: cfg.clone(),
            alpha,
            beta,
            counter: PassCounter::new(),
        })
    }

    pub fn config(&self) -> &HeadsConfig {
        &self.cfg
    }

    pub fn set_counter(&mut self, counter: PassCounter) {
        self.counter = counter;
    }

    pub fn counter(&self) -> &PassCounter {
        &self.counter
    }

    pub fn alpha_net(&self) -> &Net {
        &self.alpha
    }

    pub fn beta_net(&self) -> &Net {
        &self.beta
    }

    /// `s_a` at input resolution.
    pub fn aleatoric(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, ForwardCache)> {
        let out = self.alpha.forward(store, x, Mode::Train)?;
        self.counter.heads(x.batch());
        Ok(out)
    }

    pub fn aleatoric_backward(
        &self,
        store: &ParamStore,
        cache: &ForwardCache,
        ds: &Tensor,
        grads: &mut Gradients,
    ) -> Result<()> {
        self.alpha
            .backward(store, cache, ds, Some(grads))
            .map(|_| ())
    }

    /// `s_p` at 1/8 resolution from the image and a prediction map.
    pub fn predictive(
        &self,
        store: &ParamStore,
        x: &Tensor,
        pred: &Tensor,
        mode: Mode,
    ) -> Result<(Tensor, ForwardCache)> {
        let input = concat_channels(x, pred)?;
        let out = self.beta.forward(store, &input, mode)?;
        self.counter.heads(x.batch());
        Ok(out)
    }

    /// Parameter gradients of β, plus the gradient reaching the prediction.
    pub fn predictive_backward(
        &self,
        store: &ParamStore,
        cache: &ForwardCache,
        ds: &Tensor,
        grads: &mut Gradients,
    ) -> Result<Tensor> {
        let d = self.beta.backward(store, cache, ds, Some(grads))?;
        Ok(split_channels(&d, 1)?.1)
    }

    pub fn update_running_stats(
        &self,
        beta_store: &mut ParamStore,
        cache: &ForwardCache,
    ) -> Result<()> {
        self.beta.update_running_stats(beta_store, cache)
    }

    /// Bilinear restoration of `s_p` to input resolution.
    pub fn upsample(&self, s_p: &Tensor) -> Tensor {
        bilinear_resize(s_p, self.cfg.image_size, self.cfg.image_size)
    }

    pub fn upsample_backward(&self, d: &Tensor) -> Tensor {
        bilinear_resize_backward(d, self.beta.output_shape())
    }

    /// Uncertainty maps for a batch from one stochastic prediction per
    /// image (the mean over heads); runs each head once.
    pub fn decompose_batch(
        &self,
        alpha_store: &ParamStore,
        beta_store: &ParamStore,
        x: &Tensor,
        pred: &Tensor,
    ) -> Result<Vec<UncertaintyBundle>> {
        let (s_a, _) = self.aleatoric(alpha_store, x)?;
        let (s_p, _) = self.predictive(beta_store, x, pred, Mode::Eval)?;
        let s_p = self.upsample(&s_p);
        let n = self.cfg.image_size;
        (0..x.batch())
            .map(|i| {
                let a = norm_exp(s_a.sample(i), "aleatoric head")?;
                let p = norm_exp(s_p.sample(i), "predictive head")?;
                bundle(n, a, p)
            })
            .collect()
    }

    pub fn decompose(
        &self,
        alpha_store: &ParamStore,
        beta_store: &ParamStore,
        x: &TensorMap,
        pred: &TensorMap,
    ) -> Result<UncertaintyBundle> {
        let mut b =
            self.decompose_batch(alpha_store, beta_store, &x.to_tensor(), &pred.to_tensor())?;
        Ok(b.pop().expect("batch of one"))
    }
}

fn norm_exp(s: &[f64], what: &str) -> Result<Vec<f64>> {
    if s.iter().any(|v| !v.is_finite()) {
        return Err(DuqError::Inference(format!(
            "{what} produced a non-finite log-variance"
        )));
    }
    losses::normalized_exp(s)
        .map(|(u, _)| u)
        .map_err(|_| DuqError::Inference(format!("{what} log-variance overflows")))
}

/// Assembles a bundle from normalized aleatoric and predictive maps.
pub fn bundle(size: usize, aleatoric: Vec<f64>, predictive: Vec<f64>) -> Result<UncertaintyBundle> {
    let raw: Vec<f64> = predictive
        .iter()
        .zip(&aleatoric)
        .map(|(p, a)| p - a)
        .collect();
    let clamped = raw.iter().map(|v| v.max(0.0)).collect();
    Ok(UncertaintyBundle {
        aleatoric: TensorMap::new(1, size, size, aleatoric)?,
        predictive: TensorMap::new(1, size, size, predictive)?,
        epistemic_raw: TensorMap::new(1, size, size, raw)?,
        epistemic: TensorMap::new(1, size, size, clamped)?,
    })
}

/// Batch mean of per-image values and the per-image gradients scaled to match.
pub fn batch_loss(
    shape: Shape3,
    n: usize,
    mut f: impl FnMut(usize) -> Result<(f64, Vec<f64>)>,
) -> Result<(f64, Tensor)> {
    let mut grad = Tensor::zeros(n, shape);
    let mut total = 0.0;
    for i in 0..n {
        let (l, g) = f(i)?;
        total += l / n as f64;
        for (d, v) in grad.sample_mut(i).iter_mut().zip(g) {
            *d = v / n as f64;
        }
    }
    Ok((total, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> HeadsConfig {
        HeadsConfig {
            image_size: 16,
            alpha_channels: [4, 6],
            beta_channels: [4; 4],
        }
    }

    fn setup() -> (UncertaintyHeads, ParamStore, ParamStore) {
        let mut a = ParamStore::new("alpha");
        let mut b = ParamStore::new("beta");
        let h = UncertaintyHeads::new(&small(), &mut a, &mut b, &mut RngStream::new(1, 0)).unwrap();
        (h, a, b)
    }

    #[test]
    fn head_shapes_and_strides() {
        let (h, _, _) = setup();
        assert_eq!(h.alpha_net().output_shape(), Shape3::new(1, 16, 16));
        assert_eq!(h.beta_net().output_shape(), Shape3::new(1, 2, 2));
        let kinds: Vec<&str> = h.beta_net().specs().map(|s| s.kind_name()).collect();
        assert_eq!(kinds.iter().filter(|k| **k == "batch_norm").count(), 4);
        assert_eq!(kinds.iter().filter(|k| **k == "conv2d").count(), 5);
    }

    #[test]
    fn decompose_ranges_and_counts() {
        let (h, a, b) = setup();
        let mut rng = RngStream::new(2, 0);
        let x = TensorMap::from_fn(1, 16, 16, |_, _, _| rng.uniform());
        let p = TensorMap::from_fn(1, 16, 16, |_, _, _| rng.uniform());
        let bundle = h.decompose(&a, &b, &x, &p).unwrap();
        assert_eq!(h.counter().snapshot().heads, 2);
        for m in [&bundle.aleatoric, &bundle.predictive, &bundle.epistemic] {
            assert!(m.values().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(bundle
            .epistemic_raw
            .values()
            .iter()
            .all(|v| (-1.0..=1.0).contains(v)));
        let raw_ok = bundle
            .epistemic_raw
            .values()
            .iter()
            .zip(
                bundle
                    .predictive
                    .values()
                    .iter()
                    .zip(bundle.aleatoric.values()),
            )
            .all(|(r, (p, a))| *r == p - a);
        assert!(raw_ok);
    }

    #[test]
    fn identical_maps_have_no_epistemic() {
        let v: Vec<f64> = (0..4).map(|i| i as f64 / 3.0).collect();
        let b = bundle(2, v.clone(), v).unwrap();
        assert!(b.epistemic_raw.values().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn non_finite_head_is_inference_error() {
        let (h, mut a, b) = setup();
        let id = h.alpha_net().block_ids()[0];
        a.block_mut(id)[0] = f64::NAN;
        let x = TensorMap::filled(1, 16, 16, 0.5);
        assert!(matches!(
            h.decompose(&a, &b, &x, &x),
            Err(DuqError::Inference(_))
        ));
    }
}
