//! Masked-language-model corruption and pretraining.
//!
//! Per sequence, `max(1, round(0.15·m))` of the `m` maskable positions are
//! chosen uniformly without replacement. Each chosen position independently
//! becomes `[MASK]` (80%), a uniformly drawn ordinary token (10%), or stays as
//! it is (10%). Reserved tokens and padding are never chosen. Batches are
//! re-masked every iteration.

use ndarray::Array2;
use rand::Rng as _;

use crate::corpus::{preprocess_instance, Dataset};
use crate::encoder::{init_params, mlm_logits, EncoderConfig, EncoderParams, OutputGrad};
use crate::error::{Error, Result};
use crate::nn::cross_entropy;
use crate::optim::{AdamWHyper, ScheduleConfig};
use crate::rng::{self, Rng};
use crate::tokenizer::{encode, is_reserved, TokenId, TokenSequence, Vocabulary, MASK, RESERVED};
use crate::train::{train_loop, StepRecord, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskingConfig {
    pub select_fraction: f64,
    pub mask_fraction: f64,
    pub random_fraction: f64,
    pub keep_fraction: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            select_fraction: 0.15,
            mask_fraction: 0.80,
            random_fraction: 0.10,
            keep_fraction: 0.10,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.mask_fraction, self.random_fraction, self.keep_fraction];
        let sum: f64 = parts.iter().sum();
        if parts.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("replacement fractions must sum to 1: {self:?}")));
        }
        if !(self.select_fraction > 0.0 && self.select_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "select_fraction {} not in (0, 1)",
                self.select_fraction
            )));
        }
        Ok(())
    }

    /// Number of positions selected out of `maskable`.
    pub fn selection_count(&self, maskable: usize) -> usize {
        if maskable == 0 {
            0
        } else {
            ((self.select_fraction * maskable as f64).round() as usize).clamp(1, maskable)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Replacement {
    Mask,
    Random,
    Keep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub sequences: Vec<TokenSequence>,
    /// Per sequence, the selected positions in ascending order.
    pub positions: Vec<Vec<usize>>,
    /// Original ids at `positions`.
    pub originals: Vec<Vec<TokenId>>,
    pub replacements: Vec<Vec<Replacement>>,
}

/// Positions eligible for selection: real (unpadded) and not reserved.
pub fn maskable_positions(seq: &TokenSequence) -> Vec<usize> {
    (0..seq.ids.len())
        .filter(|&i| seq.attention_mask[i] == 1 && !is_reserved(seq.ids[i]))
        .collect()
}

pub fn apply_masking(batch: &[TokenSequence], cfg: &MaskingConfig, vocab_size: usize, rng: &mut Rng) -> Result<MaskedBatch> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    if vocab_size <= RESERVED {
        return Err(Error::InvalidConfig("vocabulary has no ordinary tokens".into()));
    }
    let mut out = MaskedBatch {
        sequences: Vec::with_capacity(batch.len()),
        positions: Vec::with_capacity(batch.len()),
        originals: Vec::with_capacity(batch.len()),
        replacements: Vec::with_capacity(batch.len()),
    };
    for (b, seq) in batch.iter().enumerate() {
        let candidates = maskable_positions(seq);
        if candidates.is_empty() {
            log::warn!("sequence {b} has no maskable positions; skipped");
        }
        let k = cfg.selection_count(candidates.len());
        let mut chosen: Vec<usize> = rand::seq::index::sample(rng, candidates.len(), k)
            .into_iter()
            .map(|i| candidates[i])
            .collect();
        chosen.sort_unstable();

        let mut corrupted = seq.clone();
        let mut originals = Vec::with_capacity(k);
        let mut kinds = Vec::with_capacity(k);
        for &pos in &chosen {
            originals.push(seq.ids[pos]);
            let u: f64 = rng.random();
            let kind = if u < cfg.mask_fraction {
                corrupted.ids[pos] = MASK;
                Replacement::Mask
            } else if u < cfg.mask_fraction + cfg.random_fraction {
                corrupted.ids[pos] = rng.random_range(RESERVED as TokenId..vocab_size as TokenId);
                Replacement::Random
            } else {
                Replacement::Keep
            };
            kinds.push(kind);
        }
        out.sequences.push(corrupted);
        out.positions.push(chosen);
        out.originals.push(originals);
        out.replacements.push(kinds);
    }
    Ok(out)
}

/// Mean categorical cross-entropy over the scored positions; row `r` of
/// `logits` predicts `originals[r]`.
pub fn mlm_loss(logits: &Array2<f64>, originals: &[TokenId]) -> Result<f64> {
    if originals.is_empty() {
        return Err(Error::EmptySelection);
    }
    if logits.nrows() != originals.len() {
        return Err(Error::LengthMismatch {
            left: logits.nrows(),
            right: originals.len(),
        });
    }
    let total: f64 = originals
        .iter()
        .enumerate()
        .map(|(r, &t)| cross_entropy(logits.row(r), t as usize).0)
        .sum();
    Ok(total / originals.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub train: TrainConfig,
    pub masking: MaskingConfig,
}

impl Default for PretrainConfig {
    /// 3000 steps, batch 64, AdamW with weight decay 0.01, warmup over 500
    /// steps to 1e-4 then linear decay.
    fn default() -> Self {
        PretrainConfig {
            train: TrainConfig {
                schedule: ScheduleConfig::pretrain_default(),
                adamw: AdamWHyper::default(),
                batch_size: 64,
                seed: 0,
            },
            masking: MaskingConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub params: EncoderParams,
    pub trace: Vec<StepRecord>,
}

/// MLM pretraining from a fresh initialization seeded by `cfg.train.seed`.
pub fn pretrain(corpus: &Dataset, vocab: &Vocabulary, config: EncoderConfig, cfg: &PretrainConfig) -> Result<PretrainOutput> {
    let params = init_params(config, cfg.train.seed)?;
    pretrain_from(params, corpus, vocab, cfg)
}

/// MLM training continuing from `params`.
pub fn pretrain_from(
    mut params: EncoderParams,
    corpus: &Dataset,
    vocab: &Vocabulary,
    cfg: &PretrainConfig,
) -> Result<PretrainOutput> {
    cfg.masking.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let config = params.config;
    if vocab.len() != config.vocab_size {
        return Err(Error::ShapeMismatch(format!(
            "vocabulary has {} ids, encoder expects {}",
            vocab.len(),
            config.vocab_size
        )));
    }
    let sequences: Vec<TokenSequence> = corpus
        .instances()
        .iter()
        .map(|inst| encode(vocab, &preprocess_instance(inst, None), config.max_len))
        .collect::<Result<_>>()?;

    let mask_seed = cfg.train.seed ^ 0x6d61_736b_0000_0000;
    let trace = train_loop(
        &mut params,
        &cfg.train,
        sequences.len(),
        |step, slot, item| {
            let mut r = rng::derived(mask_seed, step as u64, slot as u64);
            let mut masked = apply_masking(std::slice::from_ref(&sequences[item]), &cfg.masking, config.vocab_size, &mut r)?;
            if masked.positions[0].is_empty() {
                return Ok(None);
            }
            let seq = masked.sequences.remove(0);
            Ok(Some((seq, (masked.positions.remove(0), masked.originals.remove(0)))))
        },
        |p, hidden, (positions, originals): &(Vec<usize>, Vec<TokenId>)| {
            let logits = mlm_logits(p, hidden, positions)?;
            let mut loss = 0.0;
            let mut mlm = Vec::with_capacity(positions.len());
            for (r, (&pos, &t)) in positions.iter().zip(originals).enumerate() {
                let (l, g) = cross_entropy(logits.row(r), t as usize);
                loss += l;
                mlm.push((pos, g));
            }
            Ok((loss, positions.len(), OutputGrad { mlm, class: None }))
        },
        |_, _| Ok(()),
    )?;
    Ok(PretrainOutput { params, trace })
}
