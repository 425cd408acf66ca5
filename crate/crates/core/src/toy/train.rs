//! Training loop over freshly generated scenes.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::boxes::{clip, jitter, Bbox};
use super::loss::{assign_targets, compute_losses, LossBreakdown};
use super::model::ToyDetector;
use super::scene::{generate_scene, stack_images, Scene};
use super::ToyConfig;
use crate::error::{Error, Result};
use crate::ops::RoiBox;
use crate::optim::Sgd;
use crate::param::ParamStore;
use crate::tape::Tape;

/// Offset mixed into the run seed for the data stream, so data and weights
/// draw from unrelated generators.
const DATA_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Scenes per step.
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Jittered copies of each ground-truth box used as proposals.
    pub jitter_copies: usize,
    /// Edge jitter as a fraction of box size.
    pub jitter: f64,
    /// Random boxes added per scene.
    pub random_proposals: usize,
    pub fg_iou: f64,
    /// Iterations averaged when reporting initial and final loss.
    pub loss_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 200,
            batch: 2,
            lr: 0.002,
            momentum: 0.9,
            weight_decay: 1e-4,
            jitter_copies: 2,
            jitter: 0.1,
            random_proposals: 6,
            fg_iou: 0.5,
            loss_window: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.loss_window == 0 {
            return Err(Error::invalid(
                "train config",
                "batch and loss_window must be positive",
            ));
        }
        if !(self.lr >= 0.0
            && self.momentum >= 0.0
            && self.weight_decay >= 0.0
            && self.jitter >= 0.0)
        {
            return Err(Error::invalid("train config", "rates must be non-negative"));
        }
        if !(self.fg_iou > 0.0 && self.fg_iou <= 1.0) {
            return Err(Error::invalid("train config", "fg_iou must be in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cls_loss: f64,
    pub box_loss: f64,
    pub mask_loss: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<IterationRecord>,
}

impl TrainLog {
    fn window_mean(records: &[IterationRecord]) -> Option<f64> {
        (!records.is_empty())
            .then(|| records.iter().map(|r| r.total).sum::<f64>() / records.len() as f64)
    }

    /// Mean total loss over the first `window` iterations.
    pub fn initial_loss(&self, window: usize) -> Option<f64> {
        Self::window_mean(&self.records[..window.min(self.records.len())])
    }

    /// Mean total loss over the last `window` iterations.
    pub fn final_loss(&self, window: usize) -> Option<f64> {
        Self::window_mean(&self.records[self.records.len().saturating_sub(window)..])
    }
}

/// Random boxes of side 12..48 inside the image plus jittered copies of every instance box.
pub fn sample_proposals(
    scene: &Scene,
    batch_index: usize,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Vec<RoiBox> {
    let size = scene.size as f64;
    let mut boxes: Vec<Bbox> = Vec::new();
    for inst in &scene.instances {
        for _ in 0..cfg.jitter_copies {
            boxes.push(clip(&jitter(&inst.bbox, cfg.jitter, rng), size));
        }
    }
    for _ in 0..cfg.random_proposals {
        let w = rng.random_range(12.0..48.0f64).min(size);
        let h = rng.random_range(12.0..48.0f64).min(size);
        let x = rng.random_range(0.0..=size - w);
        let y = rng.random_range(0.0..=size - h);
        boxes.push([x, y, x + w, y + h]);
    }
    boxes
        .into_iter()
        .filter(|b| b[2] - b[0] >= 1.0 && b[3] - b[1] >= 1.0)
        .map(|b| RoiBox::new(batch_index, b[0], b[1], b[2], b[3]))
        .collect()
}

/// Stepwise trainer; [`train`] runs it to completion.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: ToyConfig,
    pub model: ToyDetector,
    pub store: ParamStore,
    pub log: TrainLog,
    sgd: Sgd,
    data: ChaCha8Rng,
}

pub struct TrainOutcome {
    pub model: ToyDetector,
    pub store: ParamStore,
    pub log: TrainLog,
}

impl Trainer {
    pub fn new(config: &ToyConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(seed);
        let model = ToyDetector::new(&mut store, config)?;
        let t = &config.train;
        Ok(Trainer {
            config: config.clone(),
            model,
            store,
            log: TrainLog::default(),
            sgd: Sgd::new(t.lr, t.momentum, t.weight_decay),
            data: ChaCha8Rng::seed_from_u64(seed ^ DATA_STREAM),
        })
    }

    pub fn iteration(&self) -> usize {
        self.log.records.len()
    }

    /// One SGD step on a fresh batch.
    pub fn step(&mut self) -> Result<IterationRecord> {
        let iteration = self.iteration();
        let cfg = &self.config;
        // training scenes draw seeds below 2^32; evaluation uses seeds above
        let scenes: Vec<Scene> = (0..cfg.train.batch)
            .map(|_| generate_scene(&cfg.scene, u64::from(self.data.random::<u32>())))
            .collect();
        let refs: Vec<&Scene> = scenes.iter().collect();
        let mut proposals = Vec::new();
        for (b, s) in scenes.iter().enumerate() {
            proposals.extend(sample_proposals(s, b, &cfg.train, &mut self.data));
        }
        let targets = assign_targets(&proposals, &refs, cfg.train.fg_iou, cfg.hroie.mask_size)?;

        let mut tape = Tape::new();
        let images = tape.constant(stack_images(&refs)?);
        let pyr = self.model.features(&mut tape, &self.store, images)?;
        let (cls, deltas) = self
            .model
            .detect(&mut tape, &self.store, &pyr, &proposals)?;
        let masks = if targets.positives.is_empty() {
            None
        } else {
            let pos: Vec<RoiBox> = targets.positives.iter().map(|&i| proposals[i]).collect();
            Some(self.model.mask_logits(&mut tape, &self.store, &pyr, &pos)?)
        };
        let (vars, l): (_, LossBreakdown) =
            compute_losses(&mut tape, cls, deltas, masks, &targets)?;
        if !l.total.is_finite() {
            return Err(Error::Diverged { iteration });
        }
        let grads = tape.backward(vars.total)?;
        self.store.zero_grad();
        self.store.accumulate_grads(&tape, &grads);
        if self
            .store
            .iter()
            .any(|(_, p)| p.grad.first_non_finite().is_some())
        {
            return Err(Error::Diverged { iteration });
        }
        self.sgd.step(&mut self.store);
        let rec = IterationRecord {
            iteration,
            cls_loss: l.cls_loss,
            box_loss: l.box_loss,
            mask_loss: l.mask_loss,
            total: l.total,
        };
        self.log.records.push(rec);
        Ok(rec)
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            model: self.model,
            store: self.store,
            log: self.log,
        }
    }
}

/// Trains for `config.train.iterations` steps from the initialization seeded by `seed`.
pub fn train(config: &ToyConfig, seed: u64) -> Result<TrainOutcome> {
    let mut t = Trainer::new(config, seed)?;
    for _ in 0..config.train.iterations {
        t.step()?;
    }
    Ok(t.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_iterations_leaves_init() {
        let mut cfg = ToyConfig::default();
        cfg.train.iterations = 0;
        let out = train(&cfg, 3).unwrap();
        assert!(out.log.records.is_empty());
        let mut fresh = ParamStore::new(3);
        ToyDetector::new(&mut fresh, &cfg).unwrap();
        for ((_, a), (_, b)) in out.store.iter().zip(fresh.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn window_means() {
        let rec = |i, t| IterationRecord {
            iteration: i,
            cls_loss: t,
            box_loss: 0.0,
            mask_loss: 0.0,
            total: t,
        };
        let log = TrainLog {
            records: (0..5).map(|i| rec(i, i as f64)).collect(),
        };
        assert_eq!(log.initial_loss(2), Some(0.5));
        assert_eq!(log.final_loss(2), Some(3.5));
        assert_eq!(log.final_loss(10), Some(2.0));
        assert_eq!(TrainLog::default().initial_loss(3), None);
    }
}
