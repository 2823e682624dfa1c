//! Training loop: Langevin inference interleaved with three separate Adam
//! updates (θ from the task losses, α from `L_au`, β from `L_pu`), plus the
//! comparison methods, evaluation and checkpoints.

pub mod config;
pub mod eval;
pub mod run;
pub mod step;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use config::{lr_schedule, Method, TrainConfig};
pub use eval::{aleatoric_pearson, sigma_sq_cv, EvalOutput, ImageEval};
pub use run::{train, EpochRecord, TrainLog, TrainOptions, TrainOutcome};
pub use step::{StepDiagnostics, StepLosses, StepOptions};

use crate::baselines::{self, DeepEnsemble};
use crate::checkpoint::{self, Checkpoint};
use crate::diff::{Net, ParamStore, RngStream};
use crate::elvm::{ElvmModel, MomentNet};
use crate::error::{DuqError, Result};
use crate::instrument::PassCounter;
use crate::uncertainty::UncertaintyHeads;

/// What a checkpoint header needs to rebuild the architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub image_size: usize,
    pub epochs_done: usize,
    pub train: TrainConfig,
}

#[derive(Clone, Debug)]
pub(crate) enum Aux {
    None,
    Discriminator(Net),
    Posterior(MomentNet),
}

/// Every network and parameter store of one method.
#[derive(Clone, Debug)]
pub struct TrainState {
    cfg: TrainConfig,
    image_size: usize,
    counter: PassCounter,
    pub(crate) model: Option<ElvmModel>,
    pub(crate) ensemble: Option<DeepEnsemble>,
    pub(crate) heads: Option<UncertaintyHeads>,
    pub(crate) aux: Aux,
    pub theta: ParamStore,
    pub alpha: ParamStore,
    pub beta: ParamStore,
    pub aux_store: ParamStore,
    pub(crate) steps: u64,
    pub(crate) epochs_done: usize,
    pub(crate) diagnostics: Option<StepDiagnostics>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, image_size: usize) -> Result<Self> {
        cfg.validate()?;
        let root = RngStream::new(cfg.seed, 0);
        let mut theta = ParamStore::new("theta");
        let mut alpha = ParamStore::new("alpha");
        let mut beta = ParamStore::new("beta");
        let mut aux_store = ParamStore::new("aux");
        let counter = PassCounter::new();
        let ecfg = cfg.elvm(image_size);
        let mut rng = root.derive_named("init.theta");
        let (model, ensemble) = if cfg.method == Method::DeepEnsemble {
            (
                None,
                Some(DeepEnsemble::new(
                    &ecfg,
                    cfg.ensemble_size,
                    &mut theta,
                    &mut rng,
                )?),
            )
        } else {
            let mut m = ElvmModel::new(&ecfg, &mut theta, &mut rng)?;
            m.set_counter(counter.clone());
            (Some(m), None)
        };
        let heads = if matches!(cfg.method, Method::Full | Method::DualHead) {
            let mut h = UncertaintyHeads::new(
                &cfg.heads(image_size),
                &mut alpha,
                &mut beta,
                &mut root.derive_named("init.heads"),
            )?;
            h.set_counter(counter.clone());
            Some(h)
        } else {
            None
        };
        let mut aux_rng = root.derive_named("init.aux");
        let aux = match cfg.method {
            Method::Gan => Aux::Discriminator(baselines::discriminator(
                ecfg.input_shape(),
                cfg.disc_width,
                &mut aux_store,
                &mut aux_rng,
            )?),
            Method::Cvae => Aux::Posterior(baselines::posterior_net(
                ecfg.input_shape(),
                &ecfg.prior_channels,
                ecfg.latent_dim,
                ecfg.logvar_bound,
                &mut aux_store,
                &mut aux_rng,
            )?),
            _ => Aux::None,
        };
        let mut state = TrainState {
            cfg: cfg.clone(),
            image_size,
            counter,
            model,
            ensemble,
            heads,
            aux,
            theta,
            alpha,
            beta,
            aux_store,
            steps: 0,
            epochs_done: 0,
            diagnostics: None,
        };
        state.round_stores();
        Ok(state)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn method(&self) -> Method {
        self.cfg.method
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn counter(&self) -> &PassCounter {
        &self.counter
    }

    pub fn model(&self) -> Option<&ElvmModel> {
        self.model.as_ref()
    }

    pub fn heads(&self) -> Option<&UncertaintyHeads> {
        self.heads.as_ref()
    }

    /// Diagnostics of the last step that produced a non-finite loss.
    pub fn take_diagnostics(&mut self) -> Option<StepDiagnostics> {
        self.diagnostics.take()
    }

    fn has_heads(&self) -> bool {
        self.heads.is_some()
    }

    fn has_aux(&self) -> bool {
        !matches!(self.aux, Aux::None)
    }

    /// Stores in checkpoint order.
    pub fn stores(&self) -> Vec<&ParamStore> {
        let mut v = vec![&self.theta];
        if self.has_heads() {
            v.push(&self.alpha);
            v.push(&self.beta);
        }
        if self.has_aux() {
            v.push(&self.aux_store);
        }
        v
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        let heads = self.has_heads();
        let aux = self.has_aux();
        let mut v = vec![&mut self.theta];
        if heads {
            v.push(&mut self.alpha);
            v.push(&mut self.beta);
        }
        if aux {
            v.push(&mut self.aux_store);
        }
        v
    }

    pub(crate) fn round_stores(&mut self) {
        for s in self.stores_mut() {
            s.round_to_f32();
        }
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            image_size: self.image_size,
            epochs_done: self.epochs_done,
            train: self.cfg.clone(),
        }
    }

    pub fn encode_checkpoint(&self) -> Result<Vec<u8>> {
        checkpoint::encode(
            self.cfg.method.name(),
            self.cfg.seed,
            &self.spec(),
            &self.stores(),
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::write(
            path,
            self.cfg.method.name(),
            self.cfg.seed,
            &self.spec(),
            &self.stores(),
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let spec: ModelSpec = ck.config()?;
        if spec.train.method.name() != ck.header.method {
            return Err(DuqError::Validation(format!(
                "header method '{}' disagrees with config method '{}'",
                ck.header.method, spec.train.method
            )));
        }
        let mut state = TrainState::new(&spec.train, spec.image_size)?;
        ck.load_into(&mut state.stores_mut())?;
        state.epochs_done = spec.epochs_done;
        Ok(state)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&checkpoint::read(path)?)
    }
}
