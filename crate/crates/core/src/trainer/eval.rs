use rayon::prelude::*;

use super::{Method, TrainState};
use crate::baselines::{ensemble_decompose, mc_dropout_predict, mean_map};
use crate::diff::{RngStream, Tensor, TensorMap};
use crate::error::{DuqError, Result};
use crate::metrics::{self, evaluate_image, CalibrationReport, ImageMetrics};
use crate::synth::SyntheticSample;
use crate::uncertainty::binary_entropy;
use crate::uncertainty::losses::normalized_exp;

const EVAL_STREAM: u64 = 3;

/// Prediction and uncertainty maps of one image.
#[derive(Clone, Debug)]
pub struct ImageEval {
    pub file: String,
    pub prediction: TensorMap,
    /// Map the patch-uncertainty metric thresholds.
    pub uncertainty: TensorMap,
    pub aleatoric: TensorMap,
    pub predictive: TensorMap,
    pub epistemic_raw: TensorMap,
    pub epistemic: TensorMap,
    pub metrics: ImageMetrics,
}

#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub report: CalibrationReport,
    pub images: Vec<ImageEval>,
}

struct Maps {
    prediction: TensorMap,
    uncertainty: TensorMap,
    aleatoric: TensorMap,
    predictive: TensorMap,
    epistemic_raw: TensorMap,
}

fn sample_file(s: &SyntheticSample) -> String {
    format!("{}/{:05}", s.split.dir_name(), s.index)
}

impl TrainState {
    fn eval_rng(&self, key: u64) -> RngStream {
        RngStream::new(self.cfg.seed, EVAL_STREAM).derive(key)
    }

    fn sampled(&self, x: &TensorMap, key: u64) -> Result<Vec<TensorMap>> {
        let xt = x.to_tensor();
        let passes = self.cfg.mc_passes;
        let mut rng = self.eval_rng(key);
        match self.cfg.method {
            Method::McDropout => {
                let model = self.model.as_ref().expect("mc dropout model");
                Ok(mc_dropout_predict(
                    model,
                    &self.theta,
                    x,
                    passes,
                    self.cfg.dropout_rate,
                    &mut rng,
                )?
                .maps)
            }
            Method::DeepEnsemble => {
                let ens = self.ensemble.as_ref().expect("deep ensemble");
                let (outs, _) = ens.forward(&self.theta, &xt)?;
                outs.iter().map(|t| t.to_map(0)).collect()
            }
            Method::Gan | Method::Cvae => {
                let model = self.model.as_ref().expect("latent model");
                let k = model.latent_dim();
                let z: Vec<Vec<f64>> = if self.cfg.method == Method::Gan {
                    (0..passes).map(|_| rng.normal_vec(k)).collect()
                } else {
                    let (g, _) = model.prior_moments(&self.theta, &xt)?;
                    (0..passes)
                        .map(|_| g[0].reparameterize(&rng.normal_vec(k)))
                        .collect()
                };
                let out = model.predict_heads_batch(&self.theta, &xt.tile_batch(passes), &z)?;
                (0..passes).map(|i| out[0].to_map(i)).collect()
            }
            m => Err(DuqError::Internal(format!("{m} is not a sampling method"))),
        }
    }

    /// The point prediction alone, as used for validation scores.
    pub fn predict(&self, x: &TensorMap, key: u64) -> Result<TensorMap> {
        if self.cfg.method.is_sampling() {
            return mean_map(&self.sampled(x, key)?);
        }
        let model = self.model.as_ref().expect("deterministic branch");
        model.forward_deterministic(&self.theta, x)
    }

    fn maps(&self, x: &TensorMap, key: u64) -> Result<Maps> {
        let method = self.cfg.method;
        if method.is_sampling() {
            let samples = self.sampled(x, key)?;
            let d = ensemble_decompose(&samples)?;
            return Ok(Maps {
                prediction: mean_map(&samples)?,
                uncertainty: d.predictive.clone(),
                aleatoric: d.aleatoric,
                predictive: d.predictive,
                epistemic_raw: d.epistemic,
            });
        }
        let model = self.model.as_ref().expect("elvm");
        let xt = x.to_tensor();
        match method {
            Method::Full => {
                let heads = self.heads.as_ref().expect("heads");
                let (g, _) = model.prior_moments(&self.theta, &xt)?;
                let z = vec![g[0].mu.clone()];
                let (out, _) = model.forward_train(
                    &self.theta,
                    &xt,
                    Some(std::slice::from_ref(&z)),
                    true,
                    None,
                )?;
                let mut mean = out.heads[0].clone();
                for h in &out.heads[1..] {
                    mean.add_assign(h)?;
                }
                mean.scale(1.0 / out.heads.len() as f64);
                let b = heads
                    .decompose_batch(&self.alpha, &self.beta, &xt, &mean)?
                    .pop()
                    .expect("batch of one");
                Ok(Maps {
                    prediction: out.det.expect("deterministic branch").to_map(0)?,
                    uncertainty: b.predictive.clone(),
                    aleatoric: b.aleatoric,
                    predictive: b.predictive,
                    epistemic_raw: b.epistemic_raw,
                })
            }
            Method::DualHead => {
                let heads = self.heads.as_ref().expect("heads");
                let pred = model.forward_deterministic(&self.theta, x)?;
                let (s, _) = heads.aleatoric(&self.alpha, &xt)?;
                let n = self.image_size;
                let u = TensorMap::new(1, n, n, normalized_exp(s.sample(0))?.0)?;
                Ok(Maps {
                    prediction: pred,
                    uncertainty: u.clone(),
                    aleatoric: u.clone(),
                    predictive: u,
                    epistemic_raw: TensorMap::zeros(1, n, n),
                })
            }
            _ => {
                let pred = model.forward_deterministic(&self.theta, x)?;
                let h = binary_entropy(&pred)?;
                let n = self.image_size;
                Ok(Maps {
                    prediction: pred,
                    uncertainty: h.clone(),
                    aleatoric: h.clone(),
                    predictive: h,
                    epistemic_raw: TensorMap::zeros(1, n, n),
                })
            }
        }
    }

    pub fn evaluate_sample(&self, sample: &SyntheticSample) -> Result<ImageEval> {
        let m = self.maps(&sample.image, sample.index as u64)?;
        let file = sample_file(sample);
        let metrics = evaluate_image(
            &file,
            &m.prediction,
            &sample.noisy_label,
            &m.uncertainty,
            self.cfg.patch_size,
        )?;
        Ok(ImageEval {
            file,
            epistemic: m.epistemic_raw.map(|v| v.max(0.0))?,
            prediction: m.prediction,
            uncertainty: m.uncertainty,
            aleatoric: m.aleatoric,
            predictive: m.predictive,
            epistemic_raw: m.epistemic_raw,
            metrics,
        })
    }

    /// Metrics and maps for every sample, against the observed labels.
    pub fn evaluate(&self, dataset: &str, samples: &[SyntheticSample]) -> Result<EvalOutput> {
        let images: Vec<ImageEval> = samples
            .par_iter()
            .map(|s| self.evaluate_sample(s))
            .collect::<Result<_>>()?;
        let report = CalibrationReport::new(
            dataset,
            self.cfg.method.name(),
            images.iter().map(|i| i.metrics.clone()).collect(),
        )?;
        Ok(EvalOutput { report, images })
    }

    /// Mean MAE, F-measure and dense calibration error of the point
    /// predictions.
    pub fn validation_scores(&self, samples: &[SyntheticSample]) -> Result<(f64, f64, f64)> {
        if samples.is_empty() {
            return Err(DuqError::Usage("empty validation split".into()));
        }
        let per: Vec<(f64, Option<f64>, f64)> = samples
            .par_iter()
            .map(|s| {
                let p = self.predict(&s.image, s.index as u64)?;
                Ok((
                    metrics::mae(&p, &s.noisy_label)?,
                    metrics::f_measure(&p, &s.noisy_label, metrics::DEFAULT_BETA_SQ)?,
                    metrics::ece_dense(&p, &s.noisy_label)?,
                ))
            })
            .collect::<Result<_>>()?;
        let n = per.len() as f64;
        let f: Vec<f64> = per.iter().filter_map(|p| p.1).collect();
        Ok((
            per.iter().map(|p| p.0).sum::<f64>() / n,
            if f.is_empty() {
                0.0
            } else {
                f.iter().sum::<f64>() / f.len() as f64
            },
            per.iter().map(|p| p.2).sum::<f64>() / n,
        ))
    }

    /// Raw `σ² = exp(s)` of the aleatoric head for one image.
    pub fn aleatoric_variance(&self, x: &TensorMap) -> Result<Vec<f64>> {
        let heads = self.heads.as_ref().ok_or_else(|| {
            DuqError::Usage(format!("method {} has no aleatoric head", self.cfg.method))
        })?;
        let (s, _) = heads.aleatoric(&self.alpha, &Tensor::stack(&[x])?)?;
        Ok(s.sample(0).iter().map(|v| v.exp()).collect())
    }
}

/// Mean over images of the across-pixel coefficient of variation of the
/// aleatoric variance.
pub fn sigma_sq_cv(state: &TrainState, samples: &[SyntheticSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let v = state.aleatoric_variance(&s.image)?;
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        total += var.sqrt() / mean;
    }
    Ok(total / samples.len() as f64)
}

/// Pearson correlation between aleatoric maps and true noise fields, pooled
/// over every pixel of every image.
pub fn aleatoric_pearson(images: &[ImageEval], samples: &[SyntheticSample]) -> Result<f64> {
    if images.len() != samples.len() {
        return Err(DuqError::Usage("one evaluation per sample required".into()));
    }
    let a: Vec<f64> = images
        .iter()
        .flat_map(|i| i.aleatoric.values().iter().copied())
        .collect();
    let b: Vec<f64> = samples
        .iter()
        .flat_map(|s| s.noise_field.values().iter().copied())
        .collect();
    Ok(pearson(&a, &b))
}

pub(crate) fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::super::tests::{tiny, tiny_data};
    use super::*;

    #[test]
    fn single_pass_counts() {
        let d = tiny_data();
        let s = TrainState::new(&tiny(Method::Full), 16).unwrap();
        s.counter().reset();
        let out = s.evaluate("tiny", &d.test_id).unwrap();
        let c = s.counter().snapshot();
        let n = d.test_id.len();
        assert_eq!((c.stochastic, c.deterministic, c.heads), (n, n, 2 * n));
        assert_eq!(out.report.images.len(), n);
    }

    #[test]
    fn every_method_evaluates() {
        let d = tiny_data();
        for m in Method::ALL {
            let s = TrainState::new(&tiny(m), 16).unwrap();
            let out = s.evaluate("tiny", &d.val).unwrap();
            for i in &out.images {
                assert!(i
                    .prediction
                    .values()
                    .iter()
                    .all(|v| (0.0..=1.0).contains(v)));
                assert!(i.epistemic.values().iter().all(|v| *v >= 0.0));
                if m.is_sampling() {
                    assert!(i.epistemic_raw.values().iter().all(|v| *v >= -1e-9), "{m}");
                }
            }
            let again = s.evaluate("tiny", &d.val).unwrap();
            assert_eq!(out.report, again.report, "{m}");
        }
    }

    #[test]
    fn pearson_cases() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0], &[0.0, 1.0]), 0.0);
    }
}
