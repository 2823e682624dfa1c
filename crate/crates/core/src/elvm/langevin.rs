//! Unadjusted Langevin dynamics over latent vectors.

use serde::{Deserialize, Serialize};

use super::parts::Gaussian;
use crate::diff::RngStream;
use crate::error::{DuqError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LangevinConfig {
    /// Number of updates `T_L`.
    pub steps: usize,
    /// Step size `s`.
    pub step_size: f64,
    /// Observation noise of the Gaussian likelihood.
    pub sigma_lik: f64,
    /// Use the input-conditioned prior gradient instead of `z`.
    pub conditional: bool,
    /// Add the `s·η` term; off only in drift tests.
    pub inject_noise: bool,
}

impl Default for LangevinConfig {
    fn default() -> Self {
        LangevinConfig {
            steps: 5,
            step_size: 0.1,
            sigma_lik: 0.3,
            conditional: true,
            inject_noise: true,
        }
    }
}

impl LangevinConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size >= 0.0) || !self.step_size.is_finite() {
            return Err(DuqError::InvalidConfig(
                "langevin step size must be non-negative".into(),
            ));
        }
        if !(self.sigma_lik > 0.0) {
            return Err(DuqError::InvalidConfig(
                "likelihood sigma must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Likelihood side of a latent model with one chain per batch entry.
pub trait LatentTarget {
    fn dim(&self) -> usize;
    fn chains(&self) -> usize;
    /// For every chain: `‖y − f(z)‖²` and `Jᵀ(y − f(z))`.
    fn residual(&self, z: &[Vec<f64>]) -> Result<Vec<(f64, Vec<f64>)>>;
}

/// Trajectory of one chain, `z₀ … z_T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentChain {
    pub states: Vec<Vec<f64>>,
    pub step_size: f64,
    pub steps: usize,
    /// `log p(y, z_t | x)` up to an additive constant, per state.
    pub log_joint: Vec<f64>,
}

impl LatentChain {
    pub fn last(&self) -> &[f64] {
        self.states.last().expect("chain holds z0")
    }

    pub fn first(&self) -> &[f64] {
        &self.states[0]
    }
}

fn prior_grad(z: &[f64], prior: &Gaussian, conditional: bool) -> Vec<f64> {
    if conditional {
        z.iter()
            .zip(&prior.mu)
            .zip(&prior.logvar)
            .map(|((z, m), lv)| (z - m) / lv.exp())
            .collect()
    } else {
        z.to_vec()
    }
}

fn log_prior(z: &[f64], prior: &Gaussian, conditional: bool) -> f64 {
    if conditional {
        -0.5 * z
            .iter()
            .zip(&prior.mu)
            .zip(&prior.logvar)
            .map(|((z, m), lv)| (z - m) * (z - m) / lv.exp())
            .sum::<f64>()
    } else {
        -0.5 * z.iter().map(|v| v * v).sum::<f64>()
    }
}

/// Log joint of one state given its residual.
pub fn log_joint(sq_err: f64, z: &[f64], prior: &Gaussian, cfg: &LangevinConfig) -> f64 {
    -sq_err / (2.0 * cfg.sigma_lik * cfg.sigma_lik) + log_prior(z, prior, cfg.conditional)
}

/// `z + (s²/2)·[(1/σ²)·Jᵀ(y−f) − prior_grad] + s·η` with `η` supplied.
pub fn langevin_update(
    z: &[f64],
    jt_resid: &[f64],
    prior: &Gaussian,
    cfg: &LangevinConfig,
    eta: &[f64],
) -> Vec<f64> {
    let s = cfg.step_size;
    let inv_var = 1.0 / (cfg.sigma_lik * cfg.sigma_lik);
    let pg = prior_grad(z, prior, cfg.conditional);
    z.iter()
        .zip(jt_resid)
        .zip(&pg)
        .zip(eta)
        .map(|(((z, j), p), e)| z + 0.5 * s * s * (inv_var * j - p) + s * e)
        .collect()
}

fn draw_noise(k: usize, cfg: &LangevinConfig, rng: &mut RngStream) -> Vec<f64> {
    if cfg.inject_noise {
        rng.normal_vec(k)
    } else {
        vec![0.0; k]
    }
}

fn check_grads(res: &[(f64, Vec<f64>)], step: usize) -> Result<()> {
    for (chain, (e, g)) in res.iter().enumerate() {
        if !e.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(DuqError::Inference(format!(
                "non-finite latent gradient at step {step} of chain {chain}"
            )));
        }
    }
    Ok(())
}

/// One update of every chain.
pub fn langevin_step(
    target: &dyn LatentTarget,
    z: &[Vec<f64>],
    priors: &[Gaussian],
    cfg: &LangevinConfig,
    rng: &mut RngStream,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let res = target.residual(z)?;
    check_grads(&res, 0)?;
    Ok(z.iter()
        .zip(&res)
        .zip(priors)
        .map(|((z, (_, g)), p)| {
            let eta = draw_noise(z.len(), cfg, rng);
            langevin_update(z, g, p, cfg, &eta)
        })
        .collect())
}

/// Runs `cfg.steps` updates from `z0`, recording every state and its log joint.
pub fn run_chains(
    target: &dyn LatentTarget,
    z0: Vec<Vec<f64>>,
    priors: &[Gaussian],
    cfg: &LangevinConfig,
    rng: &mut RngStream,
) -> Result<Vec<LatentChain>> {
    cfg.validate()?;
    let n = target.chains();
    if z0.len() != n || priors.len() != n {
        return Err(DuqError::Shape(format!(
            "{n} chains need {n} start states and priors, got {} and {}",
            z0.len(),
            priors.len()
        )));
    }
    let mut chains: Vec<LatentChain> = z0
        .iter()
        .map(|z| LatentChain {
            states: vec![z.clone()],
            step_size: cfg.step_size,
            steps: cfg.steps,
            log_joint: Vec::with_capacity(cfg.steps + 1),
        })
        .collect();
    let mut z = z0;
    for t in 0..=cfg.steps {
        let res = target.residual(&z)?;
        check_grads(&res, t)?;
        for (i, c) in chains.iter_mut().enumerate() {
            c.log_joint
                .push(log_joint(res[i].0, &z[i], &priors[i], cfg));
        }
        if t == cfg.steps {
            break;
        }
        for i in 0..n {
            let eta = draw_noise(z[i].len(), cfg, rng);
            z[i] = langevin_update(&z[i], &res[i].1, &priors[i], cfg, &eta);
            if z[i].iter().any(|v| !v.is_finite()) {
                return Err(DuqError::Inference(format!(
                    "latent state diverged at step {} of chain {i}",
                    t + 1
                )));
            }
            chains[i].states.push(z[i].clone());
        }
    }
    Ok(chains)
}

/// Elementwise linear generator `f = a·z + b` observed as `y`; its
/// posterior under a standard prior and σ = 1 is `N(a(y−b)/(a²+1), 1/(a²+1))`.
#[derive(Clone, Debug)]
pub struct LinearGaussian {
    pub a: f64,
    pub b: f64,
    /// One observation vector per chain.
    pub y: Vec<Vec<f64>>,
}

impl LinearGaussian {
    pub fn posterior(&self, y: f64) -> (f64, f64) {
        let d = self.a * self.a + 1.0;
        (self.a * (y - self.b) / d, 1.0 / d)
    }
}

impl LatentTarget for LinearGaussian {
    fn dim(&self) -> usize {
        self.y.first().map_or(0, |v| v.len())
    }

    fn chains(&self) -> usize {
        self.y.len()
    }

    fn residual(&self, z: &[Vec<f64>]) -> Result<Vec<(f64, Vec<f64>)>> {
        Ok(z.iter()
            .zip(&self.y)
            .map(|(z, y)| {
                let r: Vec<f64> = z
                    .iter()
                    .zip(y)
                    .map(|(z, y)| y - (self.a * z + self.b))
                    .collect();
                let e = r.iter().map(|v| v * v).sum();
                (e, r.iter().map(|v| self.a * v).collect())
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn standard(n: usize, k: usize) -> Vec<Gaussian> {
        vec![Gaussian::standard(k); n]
    }

    #[test]
    fn zero_step_is_identity() {
        let t = LinearGaussian {
            a: 2.0,
            b: 0.0,
            y: vec![vec![1.0, -1.0]],
        };
        let cfg = LangevinConfig {
            step_size: 0.0,
            ..Default::default()
        };
        let z = vec![vec![0.3, 0.7]];
        let out = langevin_step(&t, &z, &standard(1, 2), &cfg, &mut RngStream::new(1, 1)).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn prior_only_drift() {
        let t = LinearGaussian {
            a: 0.0,
            b: 0.5,
            y: vec![vec![1.0]],
        };
        let cfg = LangevinConfig {
            step_size: 0.2,
            conditional: false,
            inject_noise: false,
            ..Default::default()
        };
        let out = langevin_step(
            &t,
            &[vec![1.5]],
            &standard(1, 1),
            &cfg,
            &mut RngStream::new(1, 1),
        )
        .unwrap();
        assert!((out[0][0] - (1.5 - 0.02 * 1.5)).abs() < 1e-15);
    }

    #[test]
    fn chain_length_and_determinism() {
        let t = LinearGaussian {
            a: 1.0,
            b: 0.0,
            y: vec![vec![1.0]; 3],
        };
        let cfg = LangevinConfig::default();
        let run = || {
            run_chains(
                &t,
                vec![vec![0.0]; 3],
                &standard(3, 1),
                &cfg,
                &mut RngStream::new(4, 2),
            )
            .unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a
            .iter()
            .all(|c| c.states.len() == 6 && c.log_joint.len() == 6));
        let zero = LangevinConfig { steps: 0, ..cfg };
        let c = run_chains(
            &t,
            vec![vec![0.25]; 3],
            &standard(3, 1),
            &zero,
            &mut RngStream::new(4, 2),
        )
        .unwrap();
        assert_eq!(c[0].last(), &[0.25]);
    }
}
