use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{lr_schedule, StepLosses, StepOptions, TrainConfig, TrainState};
use crate::diff::{RngStream, Tensor};
use crate::error::{DuqError, Result};
use crate::synth::Dataset;

const STEP_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;

pub const CHECKPOINT_FILE: &str = "checkpoint.duqc";
pub const LOG_FILE: &str = "train_log.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub l_d: f64,
    pub l_s: f64,
    pub l_au: f64,
    pub l_pu: f64,
    pub val_mae: f64,
    pub val_f_beta: f64,
    pub val_ece_d: f64,
    /// Seconds since training started.
    pub wall_time_s: f64,
}

/// One row per epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

fn csv_err(path: &Path, e: csv::Error) -> DuqError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => DuqError::io(path, io),
        other => DuqError::Validation(format!("{}: {other:?}", path.display())),
    }
}

impl TrainLog {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        for r in &self.records {
            w.serialize(r).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| DuqError::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let records = r
            .deserialize()
            .collect::<std::result::Result<Vec<EpochRecord>, _>>()
            .map_err(|e| csv_err(path, e))?;
        Ok(TrainLog { records })
    }

    /// Every column except wall time, for run-to-run comparison.
    pub fn without_wall_time(&self) -> TrainLog {
        TrainLog {
            records: self
                .records
                .iter()
                .map(|r| EpochRecord {
                    wall_time_s: 0.0,
                    ..r.clone()
                })
                .collect(),
        }
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Checkpoint, log and any diagnostics dump are written here.
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: TrainLog,
}

fn batch_tensors(data: &Dataset, idx: &[usize]) -> Result<(Tensor, Tensor)> {
    let x = Tensor::stack(
        &idx.iter()
            .map(|&i| &data.train[i].image)
            .collect::<Vec<_>>(),
    )?;
    let y = Tensor::stack(
        &idx.iter()
            .map(|&i| &data.train[i].noisy_label)
            .collect::<Vec<_>>(),
    )?;
    Ok((x, y))
}

impl TrainState {
    /// One pass over the training split in a seeded order.
    pub fn train_epoch(&mut self, data: &Dataset, epoch: usize) -> Result<StepLosses> {
        let lr = lr_schedule(&self.cfg, epoch);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        RngStream::new(self.cfg.seed, SHUFFLE_STREAM)
            .derive(epoch as u64)
            .shuffle(&mut order);
        let mut sum = StepLosses::default();
        let total = order.len() as f64;
        for chunk in order.chunks(self.cfg.batch_size) {
            let (x, y) = batch_tensors(data, chunk)?;
            let mut rng = RngStream::new(self.cfg.seed, STEP_STREAM).derive(self.steps);
            match self.train_step(&x, &y, lr, &mut rng, StepOptions::default()) {
                Ok(l) => {
                    let w = chunk.len() as f64 / total;
                    sum.l_d += w * l.l_d;
                    sum.l_s += w * l.l_s;
                    sum.l_au += w * l.l_au;
                    sum.l_pu += w * l.l_pu;
                }
                Err(e) => {
                    if let Some(d) = self.diagnostics.as_mut() {
                        d.batch = chunk.to_vec();
                        d.epoch = epoch;
                    }
                    return Err(e);
                }
            }
        }
        self.epochs_done = epoch + 1;
        Ok(sum)
    }
}

/// Trains from scratch. Deterministic given the configuration and data.
pub fn train(cfg: &TrainConfig, data: &Dataset, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(DuqError::Usage(
            "training needs nonempty train and val splits".into(),
        ));
    }
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| DuqError::io(dir, e))?;
    }
    let mut state = TrainState::new(cfg, data.image_size())?;
    let mut log = TrainLog::default();
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        let losses = match state.train_epoch(data, epoch) {
            Ok(l) => l,
            Err(e) => {
                if let (Some(dir), Some(d)) = (&opts.out_dir, state.take_diagnostics()) {
                    let path = dir.join(DIAGNOSTICS_FILE);
                    let text = serde_json::to_string_pretty(&d)?;
                    std::fs::write(&path, text).map_err(|e| DuqError::io(&path, e))?;
                    log::error!(
                        "training aborted; diagnostics written to {}",
                        path.display()
                    );
                }
                return Err(e);
            }
        };
        let (mae, f, ece) = state.validation_scores(&data.val)?;
        let rec = EpochRecord {
            epoch,
            lr: lr_schedule(cfg, epoch),
            l_d: losses.l_d,
            l_s: losses.l_s,
            l_au: losses.l_au,
            l_pu: losses.l_pu,
            val_mae: mae,
            val_f_beta: f,
            val_ece_d: ece,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: l_d {:.4} l_s {:.4} l_au {:.4} l_pu {:.4} val mae {mae:.4} f {f:.4} ece {ece:.4}",
            rec.l_d,
            rec.l_s,
            rec.l_au,
            rec.l_pu
        );
        log.records.push(rec);
    }
    if let Some(dir) = &opts.out_dir {
        state.save(dir.join(CHECKPOINT_FILE))?;
        log.write_csv(dir.join(LOG_FILE))?;
    }
    Ok(TrainOutcome { state, log })
}
