use std::cell::Cell;
use std::sync::atomic::{AtomicU64, Ordering};

use super::layer::{self, BnCache, ConvGeom, LayerSpec, BN_MOMENTUM, DEFAULT_LEAKY_SLOPE};
use super::params::{BlockId, Gradients, ParamStore};
use super::rng::RngStream;
use super::tensor::{Shape3, Tensor};
use crate::error::{DuqError, Result};

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static KINK_TRACE: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Runs `f` while hashing the sign pattern of every rectifier input seen on
/// this thread; two runs with equal hashes took the same linear pieces.
pub fn trace_kinks<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let outer = KINK_TRACE.with(|t| t.replace(Some(0xcbf2_9ce4_8422_2325)));
    let out = f();
    let sig = KINK_TRACE.with(|t| t.replace(outer)).unwrap_or(0);
    (out, sig)
}

fn record_signs(x: &Tensor) {
    KINK_TRACE.with(|t| {
        if let Some(mut h) = t.get() {
            for &v in x.data() {
                h = (h ^ u64::from(v < 0.0)).wrapping_mul(0x0100_0000_01b3);
            }
            t.set(Some(h));
        }
    });
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch norm normalizes with batch statistics.
    Train,
    /// Batch norm normalizes with running averages.
    Eval,
}

#[derive(Clone, Debug)]
enum LayerParams {
    None,
    Affine {
        weight: BlockId,
        bias: BlockId,
    },
    Norm {
        gamma: BlockId,
        beta: BlockId,
        mean: BlockId,
        var: BlockId,
    },
}

#[derive(Clone, Debug)]
struct Layer {
    spec: LayerSpec,
    input: Shape3,
    output: Shape3,
    params: LayerParams,
}

/// A sequential stack of catalog layers whose parameters live in a
/// [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Net {
    id: u64,
    name: String,
    input: Shape3,
    layers: Vec<Layer>,
}

/// Activations recorded by [`Net::forward`] for the matching backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    net_id: u64,
    /// `acts[i]` is the input of layer `i`; the last entry is the output.
    acts: Vec<Tensor>,
    bn: Vec<Option<BnCache>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Tensor {
        self.acts.last().expect("cache always holds the input")
    }

    pub fn input(&self) -> &Tensor {
        &self.acts[0]
    }
}

impl Net {
    /// Validates the layer chain against `input` and registers the
    /// parameters of every layer in `store`, in layer order.
    pub fn new(
        name: impl Into<String>,
        input: Shape3,
        specs: &[LayerSpec],
        store: &mut ParamStore,
        rng: &mut RngStream,
    ) -> Result<Net> {
        let name = name.into();
        let mut shape = input;
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let output = spec
                .output_shape(shape)
                .map_err(|message| DuqError::Config { layer: i, message })?;
            let blocks = spec.init_params(rng);
            let ids: Vec<BlockId> = blocks
                .into_iter()
                .map(|(suffix, data, learnable)| {
                    store.register(format!("{name}.{i}.{suffix}"), data, learnable)
                })
                .collect();
            let params = match spec {
                LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } => LayerParams::Affine {
                    weight: ids[0],
                    bias: ids[1],
                },
                LayerSpec::BatchNorm { .. } => LayerParams::Norm {
                    gamma: ids[0],
                    beta: ids[1],
                    mean: ids[2],
                    var: ids[3],
                },
                _ => LayerParams::None,
            };
            layers.push(Layer {
                spec: spec.clone(),
                input: shape,
                output,
                params,
            });
            shape = output;
        }
        Ok(Net {
            id: NEXT_NET_ID.fetch_add(1, Ordering::Relaxed),
            name,
            input,
            layers,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> Shape3 {
        self.input
    }

    pub fn output_shape(&self) -> Shape3 {
        self.layers.last().map_or(self.input, |l| l.output)
    }

    pub fn specs(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().map(|l| &l.spec)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Every block this net registered, in registration order.
    pub fn block_ids(&self) -> Vec<BlockId> {
        let mut ids = Vec::new();
        for l in &self.layers {
            match l.params {
                LayerParams::None => {}
                LayerParams::Affine { weight, bias } => ids.extend([weight, bias]),
                LayerParams::Norm {
                    gamma,
                    beta,
                    mean,
                    var,
                } => ids.extend([gamma, beta, mean, var]),
            }
        }
        ids
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        input: &Tensor,
        mode: Mode,
    ) -> Result<(Tensor, ForwardCache)> {
        if input.shape() != self.input {
            return Err(DuqError::Config {
                layer: 0,
                message: format!(
                    "net '{}' expects input {}, got {}",
                    self.name,
                    self.input,
                    input.shape()
                ),
            });
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut bn = Vec::with_capacity(self.layers.len());
        acts.push(input.clone());
        for (i, l) in self.layers.iter().enumerate() {
            let x = &acts[i];
            let mut bn_cache = None;
            let y = match (&l.spec, &l.params) {
                (LayerSpec::Conv2d { .. }, LayerParams::Affine { weight, bias }) => {
                    let g = ConvGeom::new(&l.spec, l.input, l.output);
                    layer::conv_forward(x, store.block(*weight), store.block(*bias), &g)
                }
                (LayerSpec::Dense { inputs, outputs }, LayerParams::Affine { weight, bias }) => {
                    layer::dense_forward(
                        x,
                        store.block(*weight),
                        store.block(*bias),
                        *inputs,
                        *outputs,
                    )
                }
                (LayerSpec::LeakyRelu { slope }, _) => {
                    record_signs(x);
                    let mut y = x.clone();
                    for v in y.data_mut() {
                        if *v < 0.0 {
                            *v *= slope;
                        }
                    }
                    y
                }
                (LayerSpec::Relu, _) => {
                    record_signs(x);
                    let mut y = x.clone();
                    for v in y.data_mut() {
                        *v = v.max(0.0);
                    }
                    y
                }
                (LayerSpec::Sigmoid, _) => {
                    let mut y = x.clone();
                    for v in y.data_mut() {
                        *v = layer::sigmoid(*v);
                    }
                    y
                }
                (
                    LayerSpec::BatchNorm { .. },
                    LayerParams::Norm {
                        gamma,
                        beta,
                        mean,
                        var,
                    },
                ) => {
                    let training = mode == Mode::Train;
                    if training && x.batch() * l.input.h * l.input.w < 2 {
                        return Err(DuqError::Config {
                            layer: i,
                            message:
                                "batch norm in training mode needs at least two values per channel"
                                    .into(),
                        });
                    }
                    let (y, c) = layer::bn_forward(
                        x,
                        store.block(*gamma),
                        store.block(*beta),
                        store.block(*mean),
                        store.block(*var),
                        training,
                    );
                    bn_cache = Some(c);
                    y
                }
                (LayerSpec::NearestUpsample { factor }, _) => layer::upsample_forward(x, *factor),
                _ => {
                    return Err(DuqError::Internal(format!(
                        "layer {i} of '{}' has no parameters bound",
                        self.name
                    )))
                }
            };
            acts.push(y);
            bn.push(bn_cache);
        }
        let out = acts.last().expect("non-empty").clone();
        Ok((
            out,
            ForwardCache {
                net_id: self.id,
                acts,
                bn,
            },
        ))
    }

    /// Backpropagates `grad_out` through the cached forward pass.
    ///
    /// Parameter gradients are accumulated into `grads` when given; the
    /// input gradient is always returned.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &ForwardCache,
        grad_out: &Tensor,
        mut grads: Option<&mut Gradients>,
    ) -> Result<Tensor> {
        if cache.net_id != self.id || cache.acts.len() != self.layers.len() + 1 {
            return Err(DuqError::Internal(format!(
                "forward cache does not belong to net '{}'",
                self.name
            )));
        }
        let out = cache.output();
        if grad_out.shape() != out.shape() || grad_out.batch() != out.batch() {
            return Err(DuqError::Internal(format!(
                "output gradient {}x{} does not match cached output {}x{} of '{}'",
                grad_out.batch(),
                grad_out.shape(),
                out.batch(),
                out.shape(),
                self.name
            )));
        }
        if let Some(g) = grads.as_deref() {
            g.check_aligned(store)?;
        }
        let mut dy = grad_out.clone();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let x = &cache.acts[i];
            let y = &cache.acts[i + 1];
            dy = match (&l.spec, &l.params) {
                (LayerSpec::Conv2d { .. }, LayerParams::Affine { weight, bias }) => {
                    let g = ConvGeom::new(&l.spec, l.input, l.output);
                    let pg = grads
                        .as_deref_mut()
                        .map(|gr| two_blocks(gr, *weight, *bias));
                    layer::conv_backward(x, &dy, store.block(*weight), &g, pg, true)
                        .expect("input gradient requested")
                }
                (LayerSpec::Dense { inputs, outputs }, LayerParams::Affine { weight, bias }) => {
                    let pg = grads
                        .as_deref_mut()
                        .map(|gr| two_blocks(gr, *weight, *bias));
                    layer::dense_backward(x, &dy, store.block(*weight), *inputs, *outputs, pg, true)
                        .expect("input gradient requested")
                        .reshaped(l.input)?
                }
                (LayerSpec::LeakyRelu { slope }, _) => {
                    let mut d = dy;
                    for (g, v) in d.data_mut().iter_mut().zip(x.data()) {
                        if *v < 0.0 {
                            *g *= slope;
                        }
                    }
                    d
                }
                (LayerSpec::Relu, _) => {
                    let mut d = dy;
                    for (g, v) in d.data_mut().iter_mut().zip(x.data()) {
                        if *v <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    d
                }
                (LayerSpec::Sigmoid, _) => {
                    let mut d = dy;
                    for (g, s) in d.data_mut().iter_mut().zip(y.data()) {
                        *g *= s * (1.0 - s);
                    }
                    d
                }
                (LayerSpec::BatchNorm { .. }, LayerParams::Norm { gamma, beta, .. }) => {
                    let bc = cache.bn[i]
                        .as_ref()
                        .ok_or_else(|| DuqError::Internal("missing batch-norm cache".into()))?;
                    let pg = grads.as_deref_mut().map(|gr| two_blocks(gr, *gamma, *beta));
                    layer::bn_backward(&dy, bc, store.block(*gamma), pg, true)
                        .expect("input gradient requested")
                }
                (LayerSpec::NearestUpsample { factor }, _) => {
                    layer::upsample_backward(&dy, l.input, *factor)
                }
                _ => {
                    return Err(DuqError::Internal(format!(
                        "layer {i} of '{}' has no parameters bound",
                        self.name
                    )))
                }
            };
        }
        Ok(dy)
    }

    /// Folds the batch statistics of a training-mode pass into the running
    /// averages of every batch-norm layer.
    pub fn update_running_stats(&self, store: &mut ParamStore, cache: &ForwardCache) -> Result<()> {
        if cache.net_id != self.id {
            return Err(DuqError::Internal(format!(
                "forward cache does not belong to net '{}'",
                self.name
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if let (LayerParams::Norm { mean, var, .. }, Some(bc)) = (&l.params, &cache.bn[i]) {
                if !bc.training {
                    continue;
                }
                let count = (cache.acts[i].batch() * l.input.h * l.input.w) as f64;
                let unbias = if count > 1.0 {
                    count / (count - 1.0)
                } else {
                    1.0
                };
                for (r, b) in store.block_mut(*mean).iter_mut().zip(&bc.batch_mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
                for (r, b) in store.block_mut(*var).iter_mut().zip(&bc.batch_var) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b * unbias;
                }
            }
        }
        Ok(())
    }
}

fn two_blocks(grads: &mut Gradients, a: BlockId, b: BlockId) -> (&mut [f64], &mut [f64]) {
    assert!(a.0 < b.0, "weight registered before bias");
    grads.blocks_mut_pair(a, b)
}

/// Fluent construction of a [`Net`] from catalog layers.
pub struct NetBuilder {
    name: String,
    input: Shape3,
    shape: Shape3,
    specs: Vec<LayerSpec>,
}

impl NetBuilder {
    pub fn new(name: impl Into<String>, input: Shape3) -> Self {
        NetBuilder {
            name: name.into(),
            input,
            shape: input,
            specs: Vec::new(),
        }
    }

    fn push(mut self, spec: LayerSpec) -> Self {
        // Shape errors are reported by `build` with the layer index.
        if let Ok(s) = spec.output_shape(self.shape) {
            self.shape = s;
        }
        self.specs.push(spec);
        self
    }

    /// Same-padded convolution from the current channel count.
    pub fn conv(self, out_channels: usize, kernel: usize, stride: usize) -> Self {
        let c = self.shape.c;
        self.push(LayerSpec::conv(c, out_channels, kernel, stride))
    }

    pub fn dense(self, outputs: usize) -> Self {
        let inputs = self.shape.numel();
        self.push(LayerSpec::Dense { inputs, outputs })
    }

    pub fn leaky_relu(self) -> Self {
        self.push(LayerSpec::LeakyRelu {
            slope: DEFAULT_LEAKY_SLOPE,
        })
    }

    pub fn relu(self) -> Self {
        self.push(LayerSpec::Relu)
    }

    pub fn sigmoid(self) -> Self {
        self.push(LayerSpec::Sigmoid)
    }

    pub fn batch_norm(self) -> Self {
        let c = self.shape.c;
        self.push(LayerSpec::BatchNorm { channels: c })
    }

    pub fn upsample(self, factor: usize) -> Self {
        self.push(LayerSpec::NearestUpsample { factor })
    }

    pub fn layer(self, spec: LayerSpec) -> Self {
        self.push(spec)
    }

    pub fn current_shape(&self) -> Shape3 {
        self.shape
    }

    pub fn build(self, store: &mut ParamStore, rng: &mut RngStream) -> Result<Net> {
        Net::new(self.name, self.input, &self.specs, store, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_pointwise_conv() {
        let mut store = ParamStore::new("t");
        let mut rng = RngStream::new(0, 0);
        let net = Net::new(
            "id",
            Shape3::new(1, 3, 3),
            &[LayerSpec::conv(1, 1, 1, 1)],
            &mut store,
            &mut rng,
        )
        .unwrap();
        let ids = net.block_ids();
        store.block_mut(ids[0])[0] = 1.0;
        let x = Tensor::from_vec(
            1,
            Shape3::new(1, 3, 3),
            (0..9).map(|v| v as f64 * 0.3).collect(),
        )
        .unwrap();
        let (y, _) = net.forward(&store, &x, Mode::Eval).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn dense_analytic_value() {
        let mut store = ParamStore::new("t");
        let mut rng = RngStream::new(0, 0);
        let net = Net::new(
            "d",
            Shape3::new(1, 1, 1),
            &[LayerSpec::Dense {
                inputs: 1,
                outputs: 1,
            }],
            &mut store,
            &mut rng,
        )
        .unwrap();
        let ids = net.block_ids();
        store.block_mut(ids[0])[0] = 2.0;
        store.block_mut(ids[1])[0] = 1.0;
        let x = Tensor::from_vec(1, Shape3::new(1, 1, 1), vec![3.0]).unwrap();
        let (y, _) = net.forward(&store, &x, Mode::Eval).unwrap();
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let mut store = ParamStore::new("t");
        let mut rng = RngStream::new(0, 0);
        let net = Net::new(
            "s",
            Shape3::new(1, 1, 1),
            &[LayerSpec::Sigmoid],
            &mut store,
            &mut rng,
        )
        .unwrap();
        let x = Tensor::zeros(1, Shape3::new(1, 1, 1));
        let (_, cache) = net.forward(&store, &x, Mode::Eval).unwrap();
        let dx = net
            .backward(
                &store,
                &cache,
                &Tensor::filled(1, Shape3::new(1, 1, 1), 1.0),
                None,
            )
            .unwrap();
        assert_eq!(dx.data(), &[0.25]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut store = ParamStore::new("t");
        let mut rng = RngStream::new(3, 0);
        let net = NetBuilder::new("n", Shape3::new(2, 6, 6))
            .conv(4, 3, 2)
            .leaky_relu()
            .batch_norm()
            .dense(3)
            .sigmoid()
            .build(&mut store, &mut rng)
            .unwrap();
        let x = Tensor::from_vec(2, Shape3::new(2, 6, 6), rng.normal_vec(144)).unwrap();
        let (y, cache) = net.forward(&store, &x, Mode::Train).unwrap();
        let mut g = store.zero_grads();
        let dx = net
            .backward(&store, &cache, &Tensor::zeros(2, y.shape()), Some(&mut g))
            .unwrap();
        assert!(dx.data().iter().all(|v| *v == 0.0));
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let mut store = ParamStore::new("t");
        let mut rng = RngStream::new(0, 0);
        let err = Net::new(
            "bad",
            Shape3::new(3, 8, 8),
            &[LayerSpec::conv(3, 4, 3, 1), LayerSpec::conv(5, 2, 3, 1)],
            &mut store,
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, DuqError::Config { layer: 1, .. }), "{err}");
        let err = Net::new(
            "even",
            Shape3::new(1, 8, 8),
            &[LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 1,
                kernel: 2,
                stride: 1,
                padding: 0,
            }],
            &mut store,
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, DuqError::Config { layer: 0, .. }));
    }

    #[test]
    fn foreign_cache_is_rejected() {
        let mut store = ParamStore::new("t");
        let mut rng = RngStream::new(0, 0);
        let a = NetBuilder::new("a", Shape3::new(1, 4, 4))
            .conv(1, 3, 1)
            .build(&mut store, &mut rng)
            .unwrap();
        let b = NetBuilder::new("b", Shape3::new(1, 4, 4))
            .conv(1, 3, 1)
            .build(&mut store, &mut rng)
            .unwrap();
        let x = Tensor::zeros(1, Shape3::new(1, 4, 4));
        let (y, cache) = a.forward(&store, &x, Mode::Eval).unwrap();
        assert!(matches!(
            b.backward(&store, &cache, &y, None),
            Err(DuqError::Internal(_))
        ));
    }
}
