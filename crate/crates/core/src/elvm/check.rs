//! Finite-difference probe of the whole model: every learnable parameter
//! and every latent coordinate under a fixed random read-out of all heads,
//! the deterministic branch and the prior moments.

use super::{ElvmConfig, ElvmModel, Gaussian};
use crate::diff::gradcheck::MIN_PROBES;
use crate::diff::{
    check_target, grad_check, BlockId, Differentiable, GradCheckReport, NetBuilder, ParamStore,
    RngStream, Shape3, Tensor,
};
use crate::error::Result;

pub struct ElvmProbe<'a> {
    model: &'a ElvmModel,
    store: ParamStore,
    x: Tensor,
    z: Vec<Vec<Vec<f64>>>,
    r_heads: Vec<Tensor>,
    r_det: Tensor,
    r_prior: Vec<Gaussian>,
    blocks: Vec<(BlockId, usize)>,
    n_params: usize,
}

impl<'a> ElvmProbe<'a> {
    /// `z` holds one latent batch per head (or a single shared batch).
    pub fn new(
        model: &'a ElvmModel,
        store: &ParamStore,
        x: &Tensor,
        z: Vec<Vec<Vec<f64>>>,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let (out, _) = model.forward_train(store, x, Some(&z), true, None)?;
        let r_heads = out
            .heads
            .iter()
            .map(|h| Tensor::from_vec(h.batch(), h.shape(), rng.normal_vec(h.data().len())))
            .collect::<Result<Vec<_>>>()?;
        let det = out.det.expect("deterministic branch");
        let r_det = Tensor::from_vec(det.batch(), det.shape(), rng.normal_vec(det.data().len()))?;
        let k = model.latent_dim();
        let r_prior = (0..x.batch())
            .map(|_| Gaussian {
                mu: rng.normal_vec(k),
                logvar: rng.normal_vec(k),
            })
            .collect();
        let blocks: Vec<(BlockId, usize)> = (0..store.len())
            .filter(|&i| store.blocks()[i].learnable)
            .map(|i| {
                let id = store_block_id(i);
                (id, store.block(id).len())
            })
            .collect();
        let n_params = blocks.iter().map(|(_, n)| n).sum();
        Ok(ElvmProbe {
            model,
            store: store.clone(),
            x: x.clone(),
            z,
            r_heads,
            r_det,
            r_prior,
            blocks,
            n_params,
        })
    }

    fn locate(&self, mut i: usize) -> std::result::Result<(BlockId, usize), usize> {
        for &(id, n) in &self.blocks {
            if i < n {
                return Ok((id, i));
            }
            i -= n;
        }
        Err(i)
    }

    fn readout(&self, abs: bool) -> Result<f64> {
        let (out, _) = self
            .model
            .forward_train(&self.store, &self.x, Some(&self.z), true, None)?;
        let mut l: f64 = out
            .heads
            .iter()
            .zip(&self.r_heads)
            .map(|(h, r)| dot(h, r, abs))
            .sum();
        l += dot(out.det.as_ref().expect("det"), &self.r_det, abs);
        let (g, _) = self.model.prior_moments(&self.store, &self.x)?;
        let term = |a: f64, b: f64| if abs { (a * b).abs() } else { a * b };
        for (g, r) in g.iter().zip(&self.r_prior) {
            l +=
                g.mu.iter()
                    .zip(&r.mu)
                    .map(|(a, b)| term(*a, *b))
                    .sum::<f64>();
            l += g
                .logvar
                .iter()
                .zip(&r.logvar)
                .map(|(a, b)| term(*a, *b))
                .sum::<f64>();
        }
        Ok(l)
    }

    fn z_index(&self, i: usize) -> (usize, usize, usize) {
        let k = self.model.latent_dim();
        let n = self.x.batch();
        (i / (n * k), (i / k) % n, i % k)
    }
}

fn store_block_id(i: usize) -> BlockId {
    BlockId(i)
}

fn dot(a: &Tensor, b: &Tensor, abs: bool) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| if abs { (x * y).abs() } else { x * y })
        .sum()
}

impl Differentiable for ElvmProbe<'_> {
    fn num_coords(&self) -> usize {
        self.n_params + self.z.len() * self.x.batch() * self.model.latent_dim()
    }

    fn coord(&self, i: usize) -> f64 {
        match self.locate(i) {
            Ok((id, j)) => self.store.block(id)[j],
            Err(r) => {
                let (g, s, k) = self.z_index(r);
                self.z[g][s][k]
            }
        }
    }

    fn set_coord(&mut self, i: usize, value: f64) {
        match self.locate(i) {
            Ok((id, j)) => self.store.block_mut(id)[j] = value,
            Err(r) => {
                let (g, s, k) = self.z_index(r);
                self.z[g][s][k] = value;
            }
        }
    }

    fn loss(&self) -> Result<f64> {
        self.readout(false)
    }

    fn loss_scale(&self) -> Result<f64> {
        self.readout(true)
    }

    fn gradient(&self) -> Result<Vec<f64>> {
        let (_, cache) =
            self.model
                .forward_train(&self.store, &self.x, Some(&self.z), true, None)?;
        let mut grads = self.store.zero_grads();
        let dz = self.model.backward_train(
            &self.store,
            &cache,
            &self.r_heads,
            Some(&self.r_det),
            &mut grads,
        )?;
        let (_, pc) = self.model.prior_moments(&self.store, &self.x)?;
        self.model
            .prior_backward(&self.store, &pc, &self.r_prior, &mut grads)?;
        let mut g = Vec::with_capacity(self.num_coords());
        for &(id, _) in &self.blocks {
            g.extend_from_slice(grads.block(id));
        }
        for group in &dz {
            for v in group {
                g.extend_from_slice(v);
            }
        }
        Ok(g)
    }

    fn describe(&self, i: usize) -> String {
        match self.locate(i) {
            Ok((id, j)) => format!("{}[{j}]", self.store.blocks()[id.index()].name),
            Err(r) => {
                let (g, s, k) = self.z_index(r);
                format!("z[group {g}][sample {s}][{k}]")
            }
        }
    }
}

/// Central-difference check of the full model at random inputs and latents.
pub fn grad_check_elvm(
    model: &ElvmModel,
    store: &ParamStore,
    batch: usize,
    h: f64,
    probes: usize,
    rng: &mut RngStream,
) -> Result<GradCheckReport> {
    let shape = model.config().input_shape();
    let x = Tensor::from_vec(
        batch,
        shape,
        (0..batch * shape.numel()).map(|_| rng.uniform()).collect(),
    )?;
    let z: Vec<Vec<Vec<f64>>> = (0..model.ensemble_size())
        .map(|_| {
            (0..batch)
                .map(|_| rng.normal_vec(model.latent_dim()))
                .collect()
        })
        .collect();
    let mut probe = ElvmProbe::new(model, store, &x, z, rng)?;
    check_target(&mut probe, h, probes, rng)
}

/// Step used by the command-line check and the acceptance suite.
pub const SUITE_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn normal_input(rng: &mut RngStream, n: usize, s: Shape3) -> Result<Tensor> {
    Tensor::from_vec(n, s, rng.normal_vec(n * s.numel()))
}

fn net_entry(
    name: &'static str,
    b: NetBuilder,
    batch: usize,
    rng: &mut RngStream,
) -> Result<SuiteEntry> {
    let mut store = ParamStore::new(name);
    let net = b.build(&mut store, rng)?;
    let x = normal_input(rng, batch, net.input_shape())?;
    Ok(SuiteEntry {
        name,
        report: grad_check(&net, &store, &x, SUITE_STEP, rng)?,
    })
}

/// One small net per layer kind followed by the whole model.
pub fn grad_check_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let root = RngStream::new(seed, 0);
    let s = Shape3::new(2, 6, 6);
    let nets: Vec<(&'static str, NetBuilder, usize)> = vec![
        ("dense", NetBuilder::new("dense", s).dense(5).dense(3), 2),
        (
            "conv2d",
            NetBuilder::new("conv2d", s).conv(3, 3, 1).conv(2, 3, 2),
            2,
        ),
        (
            "leaky_relu",
            NetBuilder::new("leaky_relu", s)
                .conv(3, 3, 1)
                .leaky_relu()
                .conv(1, 1, 1),
            2,
        ),
        (
            "relu",
            NetBuilder::new("relu", s)
                .conv(3, 3, 1)
                .relu()
                .conv(1, 1, 1),
            2,
        ),
        (
            "sigmoid",
            NetBuilder::new("sigmoid", s)
                .conv(3, 3, 1)
                .sigmoid()
                .dense(2),
            2,
        ),
        (
            "batch_norm",
            NetBuilder::new("batch_norm", s)
                .conv(3, 3, 1)
                .batch_norm()
                .conv(1, 3, 2),
            3,
        ),
        (
            "nearest_upsample",
            NetBuilder::new("nearest_upsample", s)
                .conv(2, 3, 2)
                .upsample(2)
                .conv(1, 3, 1),
            2,
        ),
    ];
    let mut out = Vec::with_capacity(nets.len() + 1);
    for (name, b, batch) in nets {
        log::debug!("grad-check {name}");
        out.push(net_entry(name, b, batch, &mut root.derive_named(name))?);
    }
    let cfg = ElvmConfig {
        image_size: 16,
        latent_dim: 3,
        ensemble_size: 3,
        encoder_channels: [4, 6, 8],
        reduce_channels: 4,
        decoder_width: 4,
        head_features: 4,
        prior_channels: vec![4, 4],
        ..Default::default()
    };
    let mut rng = root.derive_named("elvm");
    let mut store = ParamStore::new("theta");
    let model = ElvmModel::new(&cfg, &mut store, &mut rng)?;
    out.push(SuiteEntry {
        name: "elvm",
        report: grad_check_elvm(&model, &store, 2, SUITE_STEP, MIN_PROBES, &mut rng)?,
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let suite = grad_check_suite(0).unwrap();
        assert_eq!(suite.len(), 8);
        for e in &suite {
            assert!(
                e.report.max_relative_error < 1e-4,
                "{}: {:?}",
                e.name,
                e.report
            );
        }
    }
}
