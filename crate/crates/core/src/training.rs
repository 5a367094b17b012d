//! Pieces shared by the trainers: loss history, mini-batching, ordered
//! gradient reduction and a multi-network AdamW driver.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::{adamw_update, lr_schedule, AdamState, Network, OptimizerConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

/// Mean mini-batch loss at every optimizer step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossHistory {
    pub records: Vec<LossRecord>,
}

impl LossHistory {
    pub fn push(&mut self, epoch: usize, step: usize, loss: f64) {
        self.records.push(LossRecord { epoch, step, loss });
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Mean batch loss per epoch, in epoch order.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        for r in &self.records {
            if out.len() <= r.epoch {
                out.resize(r.epoch + 1, (0.0, 0));
            }
            out[r.epoch].0 += r.loss;
            out[r.epoch].1 += 1;
        }
        out.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
    }

    pub fn final_epoch_mean(&self) -> Option<f64> {
        self.epoch_means().last().copied()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,step,loss\n");
        for r in &self.records {
            writeln!(s, "{},{},{:?}", r.epoch, r.step, r.loss).unwrap();
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Index batches for one epoch after an in-place shuffle.
pub(crate) fn epoch_batches<R: Rng + ?Sized>(order: &mut [usize], batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    order.shuffle(rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

pub(crate) fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Mean loss and gradient over a batch. Per-sample work runs in parallel;
/// the sum is taken in batch order so results do not depend on scheduling.
pub(crate) fn batch_mean<T, F>(items: &[T], dim: usize, f: F) -> Result<(f64, Vec<f64>)>
where
    T: Sync,
    F: Fn(&T) -> Result<(f64, Vec<f64>)> + Sync,
{
    let parts: Vec<Result<(f64, Vec<f64>)>> = items.par_iter().map(&f).collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; dim];
    for p in parts {
        let (l, g) = p?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let n = items.len().max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

/// AdamW over several networks that share one schedule. Gradients arrive
/// concatenated in network order.
pub(crate) struct JointOptimizer {
    cfg: OptimizerConfig,
    states: Vec<AdamState>,
    step: usize,
}

impl JointOptimizer {
    pub fn new(cfg: OptimizerConfig, nets: &[&Network]) -> Self {
        JointOptimizer {
            cfg,
            states: nets.iter().map(|n| AdamState::new(n.params().len())).collect(),
            step: 0,
        }
    }

    pub fn step(&mut self, nets: &mut [&mut Network], grad: &[f64]) -> Result<()> {
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient entry {i} at step {}",
                self.step + 1
            )));
        }
        self.step += 1;
        let lr = lr_schedule(self.step, &self.cfg);
        let mut offset = 0;
        for (net, state) in nets.iter_mut().zip(&mut self.states) {
            let len = net.params().len();
            adamw_update(net.params_mut(), &grad[offset..offset + len], state, &self.cfg, lr)?;
            offset += len;
        }
        if offset != grad.len() {
            return Err(Error::dim(offset, grad.len(), "joint gradient"));
        }
        Ok(())
    }
}
