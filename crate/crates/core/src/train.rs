//! The optimization loop shared by pretraining, prompt-filter training and
//! finetuning.
//!
//! Each step draws a minibatch from a seeded epoch permutation, runs the
//! per-example forward/backward passes in parallel, sums the gradients in
//! batch order, normalizes by the number of scored targets and applies one
//! AdamW update at the scheduled learning rate. Results do not depend on
//! thread scheduling.

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::encoder::{backward, forward_recorded, EncoderParams, HiddenStates, OutputGrad};
use crate::error::{Error, Result};
use crate::optim::{adamw_step, AdamWHyper, AdamWState, ScheduleConfig};
use crate::rng::{self, Rng};
use crate::tokenizer::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Also fixes the number of optimizer steps (`schedule.total_steps`).
    pub schedule: ScheduleConfig,
    pub adamw: AdamWHyper,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn total_steps(&self) -> usize {
        self.schedule.total_steps
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.adamw.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the loss trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Writes `step,lr,loss` CSV.
pub fn write_loss_trace<W: Write>(trace: &[StepRecord], mut w: W) -> std::io::Result<()> {
    writeln!(w, "step,lr,loss")?;
    for r in trace {
        writeln!(w, "{},{},{}", r.step, r.lr, r.loss)?;
    }
    Ok(())
}

/// Loss sum, number of scored targets, and head-output gradients of the loss
/// sum for one example.
pub(crate) type ExampleGrad = (f64, usize, OutputGrad);

/// Endless seeded sequence of minibatches over `0..n`.
pub(crate) struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: Rng,
}

impl BatchSampler {
    pub(crate) fn new(n: usize, seed: u64) -> Self {
        let mut rng = rng::derived(seed, 0x6261_7463, 0);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        BatchSampler { order, cursor: 0, rng }
    }

    pub(crate) fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Runs `cfg.total_steps()` optimizer steps on `params`.
///
/// `prepare(step, slot, item)` builds the input sequence and target for one
/// batch slot (or `None` to skip it); `score` turns hidden states into an
/// [`ExampleGrad`]. `on_step` sees the parameters after every update.
pub(crate) fn train_loop<T, P, G, S>(
    params: &mut EncoderParams,
    cfg: &TrainConfig,
    n_items: usize,
    prepare: P,
    score: G,
    mut on_step: S,
) -> Result<Vec<StepRecord>>
where
    T: Send,
    P: Fn(usize, usize, usize) -> Result<Option<(TokenSequence, T)>> + Sync,
    G: Fn(&EncoderParams, &HiddenStates, &T) -> Result<ExampleGrad> + Sync,
    S: FnMut(usize, &EncoderParams) -> Result<()>,
{
    cfg.validate()?;
    if n_items == 0 {
        return Err(Error::EmptyCorpus);
    }
    let mut sampler = BatchSampler::new(n_items, cfg.seed);
    let mut state = AdamWState::new(params);
    let mut trace = Vec::with_capacity(cfg.total_steps());
    for step in 1..=cfg.total_steps() {
        let batch = sampler.next_batch(cfg.batch_size);
        let snapshot: &EncoderParams = params;
        let per_example: Vec<Option<(f64, usize, EncoderParams)>> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, &item)| -> Result<_> {
                let Some((seq, target)) = prepare(step, slot, item)? else {
                    return Ok(None);
                };
                let mut drop_rng = rng::derived(cfg.seed, step as u64, slot as u64);
                let cache = forward_recorded(snapshot, &seq, Some(&mut drop_rng))?;
                let (loss, count, out) = score(snapshot, cache.hidden(), &target)?;
                let mut g = snapshot.zeros_like();
                backward(snapshot, &cache, &out, &mut g)?;
                Ok(Some((loss, count, g)))
            })
            .collect::<Result<_>>()?;

        let mut grads = params.zeros_like();
        let mut loss = 0.0;
        let mut count = 0usize;
        for (l, c, g) in per_example.into_iter().flatten() {
            loss += l;
            count += c;
            grads.add_assign(&g);
        }
        if count > 0 {
            grads.scale(1.0 / count as f64);
            loss /= count as f64;
        }
        let lr = cfg.schedule.lr(step)?;
        adamw_step(params, &grads, &mut state, &cfg.adamw, lr)?;
        trace.push(StepRecord { step, lr, loss });
        on_step(step, params)?;
    }
    Ok(trace)
}
