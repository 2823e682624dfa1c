use serde::{Deserialize, Serialize};

use crate::error::{DuqError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BlockId(pub(crate) usize);

impl BlockId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamBlock {
    pub name: String,
    pub data: Vec<f64>,
    /// Non-learnable blocks (batch-norm running statistics) are skipped by
    /// the optimizer but persisted with the rest.
    pub learnable: bool,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl ParamBlock {
    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }
}

/// Named parameter blocks in registration order, with Adam state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    name: String,
    blocks: Vec<ParamBlock>,
    step: u64,
}

/// Name and length of one block, used to validate checkpoints.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub name: String,
    pub len: usize,
    pub learnable: bool,
}

impl ParamStore {
    pub fn new(name: impl Into<String>) -> Self {
        ParamStore {
            name: name.into(),
            blocks: Vec::new(),
            step: 0,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        data: Vec<f64>,
        learnable: bool,
    ) -> BlockId {
        let len = data.len();
        self.blocks.push(ParamBlock {
            name: name.into(),
            data,
            learnable,
            m: vec![0.0; len],
            v: vec![0.0; len],
        });
        BlockId(self.blocks.len() - 1)
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn block(&self, id: BlockId) -> &[f64] {
        &self.blocks[id.0].data
    }

    pub fn block_mut(&mut self, id: BlockId) -> &mut [f64] {
        &mut self.blocks[id.0].data
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn num_values(&self) -> usize {
        self.blocks.iter().map(|b| b.data.len()).sum()
    }

    pub fn num_learnable(&self) -> usize {
        self.blocks
            .iter()
            .filter(|b| b.learnable)
            .map(|b| b.data.len())
            .sum()
    }

    pub fn layout(&self) -> Vec<BlockLayout> {
        self.blocks
            .iter()
            .map(|b| BlockLayout {
                name: b.name.clone(),
                len: b.data.len(),
                learnable: b.learnable,
            })
            .collect()
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            store: self.name.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| vec![0.0; b.data.len()])
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.blocks
            .iter()
            .all(|b| b.data.iter().all(|v| v.is_finite()))
    }

    /// Rounds every value to single precision, matching what a checkpoint
    /// round-trip would produce.
    pub fn round_to_f32(&mut self) {
        for b in &mut self.blocks {
            for v in &mut b.data {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Flat view of every value in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .flat_map(|b| b.data.iter().copied())
            .collect()
    }

    /// Overwrites all values from a flat buffer in registration order.
    pub fn load_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_values() {
            return Err(DuqError::Validation(format!(
                "store '{}' holds {} values, got {}",
                self.name,
                self.num_values(),
                values.len()
            )));
        }
        let mut off = 0;
        for b in &mut self.blocks {
            let n = b.data.len();
            b.data.copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

/// Gradient buffers aligned block-for-block with one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Gradients {
    store: String,
    blocks: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn store_name(&self) -> &str {
        &self.store
    }

    pub fn block(&self, id: BlockId) -> &[f64] {
        &self.blocks[id.0]
    }

    pub fn block_mut(&mut self, id: BlockId) -> &mut [f64] {
        &mut self.blocks[id.0]
    }

    pub fn blocks(&self) -> &[Vec<f64>] {
        &self.blocks
    }

    pub fn norm(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|b| b.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for b in &mut self.blocks {
            for v in b {
                *v *= factor;
            }
        }
    }

    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        if self.blocks.len() != other.blocks.len() {
            return Err(DuqError::Internal(format!(
                "gradient sets for '{}' and '{}' are not aligned",
                self.store, other.store
            )));
        }
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            if a.len() != b.len() {
                return Err(DuqError::Internal("gradient block length mismatch".into()));
            }
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.iter().copied()).collect()
    }

    /// Two distinct blocks borrowed mutably at once; `a` must precede `b`.
    pub(crate) fn blocks_mut_pair(&mut self, a: BlockId, b: BlockId) -> (&mut [f64], &mut [f64]) {
        let (left, right) = self.blocks.split_at_mut(b.0);
        (&mut left[a.0], &mut right[0])
    }

    pub(crate) fn check_aligned(&self, store: &ParamStore) -> Result<()> {
        if self.blocks.len() != store.blocks.len()
            || self
                .blocks
                .iter()
                .zip(&store.blocks)
                .any(|(g, b)| g.len() != b.data.len())
        {
            return Err(DuqError::Internal(format!(
                "gradients for '{}' do not match store '{}'",
                self.store, store.name
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every learnable block.
///
/// The whole step is rejected, leaving parameters and moments untouched,
/// if any gradient is non-finite.
pub fn adam_step(store: &mut ParamStore, grads: &Gradients, cfg: &AdamConfig) -> Result<()> {
    grads.check_aligned(store)?;
    for (b, g) in store.blocks.iter().zip(&grads.blocks) {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(DuqError::non_finite(format!(
                "gradient of block '{}' at index {i}",
                b.name
            )));
        }
    }
    store.step += 1;
    let t = store.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (b, g) in store.blocks.iter_mut().zip(&grads.blocks) {
        if !b.learnable {
            continue;
        }
        for i in 0..b.data.len() {
            let gi = g[i];
            b.m[i] = cfg.beta1 * b.m[i] + (1.0 - cfg.beta1) * gi;
            b.v[i] = cfg.beta2 * b.v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = b.m[i] / bc1;
            let v_hat = b.v[i] / bc2;
            b.data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_parameters() {
        let mut s = ParamStore::new("t");
        let id = s.register("w", vec![0.5, -1.0, 2.0], true);
        let g = s.zero_grads();
        adam_step(&mut s, &g, &AdamConfig::default()).unwrap();
        assert_eq!(s.block(id), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = ParamStore::new("t");
        let id = s.register("w", vec![0.0; 4], true);
        let mut g = s.zero_grads();
        g.block_mut(id).copy_from_slice(&[3.0, -0.01, 1e3, -7.5]);
        let lr = 0.05;
        adam_step(&mut s, &g, &AdamConfig::with_lr(lr)).unwrap();
        for (w, gi) in s.block(id).iter().zip([3.0f64, -0.01, 1e3, -7.5]) {
            assert!((w.abs() - lr).abs() < 1e-6, "{w}");
            assert_eq!(w.signum(), -gi.signum());
        }
    }

    #[test]
    fn quadratic_converges() {
        let mut s = ParamStore::new("t");
        let id = s.register("w", vec![1.0], true);
        let cfg = AdamConfig::with_lr(0.1);
        let mut reached = None;
        for step in 0..200 {
            let mut g = s.zero_grads();
            g.block_mut(id)[0] = 2.0 * s.block(id)[0];
            adam_step(&mut s, &g, &cfg).unwrap();
            if s.block(id)[0].abs() < 0.01 && reached.is_none() {
                reached = Some(step);
            }
        }
        assert!(reached.is_some(), "w = {}", s.block(id)[0]);
    }

    #[test]
    fn non_finite_gradient_aborts_step() {
        let mut s = ParamStore::new("t");
        let a = s.register("a", vec![1.0], true);
        let b = s.register("b", vec![1.0], true);
        let mut g = s.zero_grads();
        g.block_mut(a)[0] = 1.0;
        g.block_mut(b)[0] = f64::NAN;
        let err = adam_step(&mut s, &g, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("'b'"), "{err}");
        assert_eq!(s.block(a)[0], 1.0);
        assert_eq!(s.step(), 0);
    }

    #[test]
    fn non_learnable_blocks_are_frozen() {
        let mut s = ParamStore::new("t");
        let id = s.register("running_mean", vec![0.3], false);
        let mut g = s.zero_grads();
        g.block_mut(id)[0] = 5.0;
        adam_step(&mut s, &g, &AdamConfig::default()).unwrap();
        assert_eq!(s.block(id)[0], 0.3);
    }
}
