//! Central finite-difference verification of analytic gradients.

use super::net::{trace_kinks, Mode, Net};
use super::params::{BlockId, ParamStore};
use super::rng::RngStream;
use super::tensor::Tensor;
use crate::error::{DuqError, Result};

/// Minimum number of coordinates probed when a target has more.
pub const MIN_PROBES: usize = 256;

/// A scalar function of a flat coordinate vector with an analytic gradient.
pub trait Differentiable {
    fn num_coords(&self) -> usize;
    fn coord(&self, i: usize) -> f64;
    fn set_coord(&mut self, i: usize, value: f64);
    fn loss(&self) -> Result<f64>;
    fn gradient(&self) -> Result<Vec<f64>>;
    fn describe(&self, i: usize) -> String {
        format!("coordinate {i}")
    }
    /// Sum of absolute terms of the loss, which sets its rounding error.
    fn loss_scale(&self) -> Result<f64> {
        self.loss().map(f64::abs)
    }
}

/// Central differences must resolve this many significant digits of a
/// gradient entry for it to be compared.
pub const RESOLVED_DIGITS: i32 = 4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst: String,
    pub probed: usize,
    /// Coordinates whose perturbation moved some rectifier input across
    /// zero; they are replaced by fresh draws.
    pub skipped_kinks: usize,
    /// Coordinates whose gradient sits below the rounding floor of the
    /// central difference.
    pub skipped_unresolved: usize,
    pub resolution_floor: f64,
}

/// `|a − fd| / max(|a|, |fd|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient with central differences of step `h` on
/// every coordinate, or on `probes` randomly chosen ones when there are more.
pub fn check_target(
    target: &mut dyn Differentiable,
    h: f64,
    probes: usize,
    rng: &mut RngStream,
) -> Result<GradCheckReport> {
    if !(h > 0.0) {
        return Err(DuqError::Usage(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let n = target.num_coords();
    let analytic = target.gradient()?;
    if analytic.len() != n {
        return Err(DuqError::Internal(format!(
            "gradient has {} entries for {n} coordinates",
            analytic.len()
        )));
    }
    let mut coords: Vec<usize> = (0..n).collect();
    let probes = probes.max(MIN_PROBES);
    if n > probes {
        rng.shuffle(&mut coords);
    }
    let (_, sig0) = trace_kinks(|| target.loss());
    let floor = f64::EPSILON * target.loss_scale()? / h * 10f64.powi(RESOLVED_DIGITS);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: String::new(),
        probed: 0,
        skipped_kinks: 0,
        skipped_unresolved: 0,
        resolution_floor: floor,
    };
    for &i in &coords {
        if report.probed == probes {
            break;
        }
        if !analytic[i].is_finite() {
            return Err(DuqError::non_finite(format!(
                "analytic gradient at {}",
                target.describe(i)
            )));
        }
        let orig = target.coord(i);
        target.set_coord(i, orig + h);
        let (up, sig_up) = trace_kinks(|| target.loss());
        target.set_coord(i, orig - h);
        let (down, sig_down) = trace_kinks(|| target.loss());
        target.set_coord(i, orig);
        let (up, down) = (up?, down?);
        if !up.is_finite() || !down.is_finite() {
            return Err(DuqError::non_finite(format!(
                "perturbed loss at {}",
                target.describe(i)
            )));
        }
        if sig_up != sig0 || sig_down != sig0 {
            report.skipped_kinks += 1;
            continue;
        }
        let fd = (up - down) / (2.0 * h);
        if analytic[i].abs().max(fd.abs()) < floor {
            report.skipped_unresolved += 1;
            continue;
        }
        report.probed += 1;
        let err = relative_error(analytic[i], fd);
        if err >= report.max_relative_error {
            report.max_relative_error = err;
            report.worst = target.describe(i);
        }
    }
    Ok(report)
}

/// A sequential net under a fixed random linear read-out, with learnable
/// parameters and the input as coordinates.
pub struct NetProbe<'a> {
    net: &'a Net,
    store: ParamStore,
    input: Tensor,
    mode: Mode,
    readout: Tensor,
    blocks: Vec<(BlockId, usize)>,
    n_params: usize,
}

impl<'a> NetProbe<'a> {
    pub fn new(
        net: &'a Net,
        store: &ParamStore,
        input: &Tensor,
        mode: Mode,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let (out, _) = net.forward(store, input, mode)?;
        let readout = Tensor::from_vec(out.batch(), out.shape(), rng.normal_vec(out.data().len()))?;
        let blocks: Vec<(BlockId, usize)> = net
            .block_ids()
            .into_iter()
            .filter(|id| store.blocks()[id.index()].learnable)
            .map(|id| (id, store.block(id).len()))
            .collect();
        let n_params = blocks.iter().map(|(_, n)| n).sum();
        Ok(NetProbe {
            net,
            store: store.clone(),
            input: input.clone(),
            mode,
            readout,
            blocks,
            n_params,
        })
    }

    fn locate(&self, mut i: usize) -> Option<(BlockId, usize)> {
        for &(id, n) in &self.blocks {
            if i < n {
                return Some((id, i));
            }
            i -= n;
        }
        None
    }
}

impl Differentiable for NetProbe<'_> {
    fn num_coords(&self) -> usize {
        self.n_params + self.input.data().len()
    }

    fn coord(&self, i: usize) -> f64 {
        match self.locate(i) {
            Some((id, j)) => self.store.block(id)[j],
            None => self.input.data()[i - self.n_params],
        }
    }

    fn set_coord(&mut self, i: usize, value: f64) {
        match self.locate(i) {
            Some((id, j)) => self.store.block_mut(id)[j] = value,
            None => self.input.data_mut()[i - self.n_params] = value,
        }
    }

    fn loss(&self) -> Result<f64> {
        let (out, _) = self.net.forward(&self.store, &self.input, self.mode)?;
        Ok(out
            .data()
            .iter()
            .zip(self.readout.data())
            .map(|(a, b)| a * b)
            .sum())
    }

    fn loss_scale(&self) -> Result<f64> {
        let (out, _) = self.net.forward(&self.store, &self.input, self.mode)?;
        Ok(out
            .data()
            .iter()
            .zip(self.readout.data())
            .map(|(a, b)| (a * b).abs())
            .sum())
    }

    fn gradient(&self) -> Result<Vec<f64>> {
        let (_, cache) = self.net.forward(&self.store, &self.input, self.mode)?;
        let mut grads = self.store.zero_grads();
        let dx = self
            .net
            .backward(&self.store, &cache, &self.readout, Some(&mut grads))?;
        let mut g = Vec::with_capacity(self.num_coords());
        for &(id, _) in &self.blocks {
            g.extend_from_slice(grads.block(id));
        }
        g.extend_from_slice(dx.data());
        Ok(g)
    }

    fn describe(&self, i: usize) -> String {
        match self.locate(i) {
            Some((id, j)) => format!("{}[{j}]", self.store.blocks()[id.index()].name),
            None => format!("input[{}]", i - self.n_params),
        }
    }
}

/// Finite-difference check of one net at `input` (batch-norm layers use
/// batch statistics, i.e. training mode).
pub fn grad_check(
    net: &Net,
    store: &ParamStore,
    input: &Tensor,
    h: f64,
    rng: &mut RngStream,
) -> Result<GradCheckReport> {
    let mut probe = NetProbe::new(net, store, input, Mode::Train, rng)?;
    check_target(&mut probe, h, MIN_PROBES, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::layer::LayerSpec;
    use crate::diff::net::NetBuilder;
    use crate::diff::tensor::Shape3;

    fn input(rng: &mut RngStream, n: usize, s: Shape3) -> Tensor {
        Tensor::from_vec(n, s, rng.normal_vec(n * s.numel())).unwrap()
    }

    #[test]
    fn linear_dense_is_exact() {
        let mut rng = RngStream::new(11, 0);
        let mut store = ParamStore::new("t");
        let s = Shape3::new(3, 2, 2);
        let net = NetBuilder::new("lin", s)
            .dense(5)
            .dense(2)
            .build(&mut store, &mut rng)
            .unwrap();
        let x = input(&mut rng, 2, s);
        // Each coordinate enters linearly, so central differences are exact
        // for any step and a large one keeps cancellation error negligible.
        let r = grad_check(&net, &store, &x, 0.5, &mut rng).unwrap();
        assert!(r.max_relative_error < 1e-9, "{r:?}");
    }

    #[test]
    fn leaky_relu_conv_stack() {
        let mut rng = RngStream::new(12, 0);
        let mut store = ParamStore::new("t");
        let s = Shape3::new(2, 7, 7);
        let net = NetBuilder::new("c", s)
            .conv(4, 3, 2)
            .leaky_relu()
            .upsample(2)
            .conv(3, 3, 1)
            .relu()
            .conv(1, 1, 1)
            .sigmoid()
            .build(&mut store, &mut rng)
            .unwrap();
        let x = input(&mut rng, 2, s);
        let r = grad_check(&net, &store, &x, 1e-5, &mut rng).unwrap();
        assert!(r.max_relative_error < 1e-4, "{r:?}");
    }

    #[test]
    fn batch_norm_training_mode() {
        let mut rng = RngStream::new(13, 0);
        let mut store = ParamStore::new("t");
        let s = Shape3::new(2, 5, 5);
        let net = NetBuilder::new("bn", s)
            .conv(3, 3, 1)
            .leaky_relu()
            .batch_norm()
            .conv(1, 3, 2)
            .build(&mut store, &mut rng)
            .unwrap();
        let x = input(&mut rng, 3, s);
        let r = grad_check(&net, &store, &x, 1e-5, &mut rng).unwrap();
        assert!(r.max_relative_error < 1e-3, "{r:?}");
    }

    #[test]
    fn rejects_bad_step() {
        let mut rng = RngStream::new(1, 0);
        let mut store = ParamStore::new("t");
        let net = Net::new(
            "s",
            Shape3::new(1, 1, 1),
            &[LayerSpec::Sigmoid],
            &mut store,
            &mut rng,
        )
        .unwrap();
        let x = Tensor::zeros(1, Shape3::new(1, 1, 1));
        assert!(grad_check(&net, &store, &x, 0.0, &mut rng).is_err());
    }
}
