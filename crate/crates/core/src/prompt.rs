//! Cloze-template refute filter.
//!
//! Input text is wrapped in a template with a single mask slot, the MLM head
//! is read at that slot, and a verbalizer maps the label-word probabilities
//! onto a negative (Refute) versus positive (everything else) decision.

use ndarray::{Array1, ArrayView1};
use rayon::prelude::*;

use crate::corpus::{preprocess_instance, Dataset, Instance, Label};
use crate::encoder::{forward, mlm_logits, EncoderParams, HiddenStates, Mode, OutputGrad};
use crate::error::{Error, Result};
use crate::nn::soft_cross_entropy;
use crate::optim::{AdamWHyper, ScheduleConfig};
use crate::tokenizer::{normalize, TokenId, TokenSequence, Vocabulary, MASK, UNK};
use crate::train::{train_loop, StepRecord, TrainConfig};

pub const INPUT_MARKER: &str = "<INPUT>";
pub const MASK_MARKER: &str = "<MASK>";
pub const DEFAULT_TEMPLATE: &str = "<INPUT>. The statement is <MASK>";
pub const DEFAULT_NEGATIVE_WORDS: [&str; 3] = ["false", "irrelevant", "incorrect"];
pub const DEFAULT_POSITIVE_WORDS: [&str; 3] = ["true", "relevant", "correct"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Input,
    Mask,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(Slot),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pattern: String,
    pieces: Vec<Piece>,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate::new(DEFAULT_TEMPLATE).expect("default template is valid")
    }
}

impl PromptTemplate {
    /// Parses a pattern holding exactly one `<INPUT>` and one `<MASK>`.
    pub fn new(pattern: &str) -> Result<PromptTemplate> {
        for marker in [INPUT_MARKER, MASK_MARKER] {
            let n = pattern.matches(marker).count();
            if n != 1 {
                return Err(Error::InvalidTemplate(format!(
                    "`{pattern}` contains {marker} {n} times, expected once"
                )));
            }
        }
        let mut pieces = Vec::new();
        let mut rest = pattern;
        while !rest.is_empty() {
            let next = [(INPUT_MARKER, Slot::Input), (MASK_MARKER, Slot::Mask)]
                .into_iter()
                .filter_map(|(m, s)| rest.find(m).map(|at| (at, m, s)))
                .min_by_key(|&(at, _, _)| at);
            match next {
                Some((at, marker, slot)) => {
                    if at > 0 {
                        pieces.push(Piece::Text(rest[..at].to_string()));
                    }
                    pieces.push(Piece::Slot(slot));
                    rest = &rest[at + marker.len()..];
                }
                None => {
                    pieces.push(Piece::Text(rest.to_string()));
                    rest = "";
                }
            }
        }
        Ok(PromptTemplate {
            pattern: pattern.to_string(),
            pieces,
        })
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    /// Normalized words of the fixed template text.
    pub fn words(&self) -> Vec<String> {
        self.pieces
            .iter()
            .filter_map(|p| match p {
                Piece::Text(t) => Some(normalize(t)),
                Piece::Slot(_) => None,
            })
            .flatten()
            .collect()
    }
}

/// Fills the template and encodes it to `max_len` ids. When the prompt is too
/// long the input text is cut from its right end; the template text and the
/// mask slot are always kept.
pub fn apply_template(template: &PromptTemplate, text: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    let fixed: usize = template
        .pieces
        .iter()
        .map(|p| match p {
            Piece::Text(t) => vocab.lookup(t).len(),
            Piece::Slot(Slot::Mask) => 1,
            Piece::Slot(Slot::Input) => 0,
        })
        .sum();
    let budget = max_len.saturating_sub(2);
    if fixed > budget {
        return Err(Error::InvalidTemplate(format!(
            "template needs {fixed} tokens but max_len {max_len} leaves {budget}"
        )));
    }
    let mut input = vocab.lookup(text);
    input.truncate(budget - fixed);

    let mut content: Vec<TokenId> = Vec::with_capacity(fixed + input.len());
    let mut mask_at = 0;
    for p in &template.pieces {
        match p {
            Piece::Text(t) => content.extend(vocab.lookup(t)),
            Piece::Slot(Slot::Input) => content.extend_from_slice(&input),
            Piece::Slot(Slot::Mask) => {
                mask_at = content.len();
                content.push(MASK);
            }
        }
    }
    let mut seq = TokenSequence::from_content(&content, max_len);
    // Content starts after CLS.
    seq.mask_position = Some(mask_at + 1);
    Ok(seq)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verbalizer {
    negative: Vec<(String, TokenId)>,
    positive: Vec<(String, TokenId)>,
}

impl Verbalizer {
    /// Every word must be a single known token; the two sets must be disjoint
    /// and nonempty.
    pub fn new<S: AsRef<str>>(negative: &[S], positive: &[S], vocab: &Vocabulary) -> Result<Verbalizer> {
        let resolve = |words: &[S]| -> Result<Vec<(String, TokenId)>> {
            if words.is_empty() {
                return Err(Error::VerbalizerWord("label word set is empty".into()));
            }
            words
                .iter()
                .map(|w| {
                    let w = w.as_ref();
                    let toks = normalize(w);
                    if toks.len() != 1 {
                        return Err(Error::VerbalizerWord(format!("`{w}` is not a single token")));
                    }
                    match vocab.id(&toks[0]) {
                        Some(id) if id != UNK => Ok((toks[0].clone(), id)),
                        _ => Err(Error::VerbalizerWord(format!("`{w}` is not in the vocabulary"))),
                    }
                })
                .collect()
        };
        let negative = resolve(negative)?;
        let positive = resolve(positive)?;
        let all_ids: std::collections::HashSet<TokenId> = negative.iter().chain(&positive).map(|&(_, id)| id).collect();
        if all_ids.len() != negative.len() + positive.len() {
            return Err(Error::VerbalizerWord("label words repeat or overlap between classes".into()));
        }
        Ok(Verbalizer { negative, positive })
    }

    pub fn default_for(vocab: &Vocabulary) -> Result<Verbalizer> {
        Verbalizer::new(&DEFAULT_NEGATIVE_WORDS, &DEFAULT_POSITIVE_WORDS, vocab)
    }

    pub fn negative_words(&self) -> impl Iterator<Item = &str> {
        self.negative.iter().map(|(w, _)| w.as_str())
    }

    pub fn positive_words(&self) -> impl Iterator<Item = &str> {
        self.positive.iter().map(|(w, _)| w.as_str())
    }

    /// Word ids, negative words first.
    fn ids(&self) -> Vec<TokenId> {
        self.negative.iter().chain(&self.positive).map(|&(_, id)| id).collect()
    }
}

/// `vocab` with any missing template and default label words appended, so a
/// vocabulary built from a corpus can host the prompt.
pub fn prompt_vocabulary(vocab: Vocabulary, template: &PromptTemplate, extra_words: &[&str]) -> Vocabulary {
    let mut words = template.words();
    words.extend(DEFAULT_NEGATIVE_WORDS.iter().chain(&DEFAULT_POSITIVE_WORDS).map(|s| s.to_string()));
    words.extend(extra_words.iter().flat_map(|w| normalize(w)));
    vocab.extended(&words)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinaryPrediction {
    pub p_negative: f64,
    pub p_positive: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterDecision {
    Refute,
    Other,
}

impl BinaryPrediction {
    /// Refute iff `p_negative > threshold`.
    pub fn decide(&self, threshold: f64) -> FilterDecision {
        if self.p_negative > threshold {
            FilterDecision::Refute
        } else {
            FilterDecision::Other
        }
    }
}

/// Softmax over the label-word logits only, then summed per side.
pub fn answer_map(mask_logits: ArrayView1<f64>, verbalizer: &Verbalizer) -> Result<BinaryPrediction> {
    let ids = verbalizer.ids();
    if let Some(&id) = ids.iter().find(|&&id| id as usize >= mask_logits.len()) {
        return Err(Error::TokenOutOfRange {
            id,
            size: mask_logits.len(),
        });
    }
    let restricted = restricted_distribution(mask_logits, &ids);
    let n_neg = verbalizer.negative.len();
    Ok(BinaryPrediction {
        p_negative: restricted[..n_neg].iter().sum(),
        p_positive: restricted[n_neg..].iter().sum(),
    })
}

fn restricted_distribution(logits: ArrayView1<f64>, ids: &[TokenId]) -> Vec<f64> {
    let picked: Vec<f64> = ids.iter().map(|&id| logits[id as usize]).collect();
    let max = picked.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = picked.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / z).collect()
}

/// Binary training target: Refute is the negative class.
pub fn is_negative(label: Label) -> bool {
    label == Label::Refute
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    pub train: TrainConfig,
    pub threshold: f64,
}

impl Default for FilterConfig {
    /// The finetuning recipe: 2000 steps, batch 32, warmup over 100 steps to
    /// 5e-6 then cosine decay.
    fn default() -> Self {
        FilterConfig {
            train: TrainConfig {
                schedule: ScheduleConfig::finetune_default(),
                adamw: AdamWHyper::default(),
                batch_size: 32,
                seed: 0,
            },
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FilterModel {
    pub params: EncoderParams,
    pub vocab: Vocabulary,
    pub template: PromptTemplate,
    pub verbalizer: Verbalizer,
    pub threshold: f64,
}

#[derive(Debug, Clone)]
pub struct FilterOutput {
    pub model: FilterModel,
    pub trace: Vec<StepRecord>,
}

/// Finetunes the encoder through the template so that label-word mass at the
/// mask slot moves to the correct side. The target spreads mass evenly over
/// that side's words.
pub fn refute_filter_train(
    train: &Dataset,
    mut params: EncoderParams,
    vocab: &Vocabulary,
    template: &PromptTemplate,
    verbalizer: &Verbalizer,
    cfg: &FilterConfig,
) -> Result<FilterOutput> {
    let labels = train.labels()?;
    if !labels.iter().any(|&l| is_negative(l)) {
        return Err(Error::MissingClass(Label::Refute));
    }
    check_vocab(&params, vocab)?;
    let max_len = params.config.max_len;
    let prompts: Vec<TokenSequence> = train
        .instances()
        .iter()
        .map(|inst| apply_template(template, &preprocess_instance(inst, None), vocab, max_len))
        .collect::<Result<_>>()?;

    let ids = verbalizer.ids();
    let n_neg = verbalizer.negative.len();
    let n_pos = verbalizer.positive.len();
    let target_for = |negative: bool| -> Array1<f64> {
        Array1::from_shape_fn(ids.len(), |j| match (negative, j < n_neg) {
            (true, true) => 1.0 / n_neg as f64,
            (false, false) => 1.0 / n_pos as f64,
            _ => 0.0,
        })
    };
    let targets = [target_for(false), target_for(true)];

    let trace = train_loop(
        &mut params,
        &cfg.train,
        prompts.len(),
        |_, _, item| Ok(Some((prompts[item].clone(), (prompts[item].mask_position, is_negative(labels[item]))))),
        |p, hidden, &(mask_pos, negative): &(Option<usize>, bool)| {
            let pos = mask_pos.expect("template sets the mask position");
            let logits = mlm_logits(p, hidden, &[pos])?;
            let row = logits.row(0);
            let picked = Array1::from_iter(ids.iter().map(|&id| row[id as usize]));
            let (loss, g_restricted) = soft_cross_entropy(picked.view(), targets[negative as usize].view());
            let mut g = Array1::zeros(row.len());
            for (&id, &gj) in ids.iter().zip(&g_restricted) {
                g[id as usize] = gj;
            }
            Ok((
                loss,
                1,
                OutputGrad {
                    mlm: vec![(pos, g)],
                    class: None,
                },
            ))
        },
        |_, _| Ok(()),
    )?;
    Ok(FilterOutput {
        model: FilterModel {
            params,
            vocab: vocab.clone(),
            template: template.clone(),
            verbalizer: verbalizer.clone(),
            threshold: cfg.threshold,
        },
        trace,
    })
}

fn check_vocab(params: &EncoderParams, vocab: &Vocabulary) -> Result<()> {
    if params.config.vocab_size != vocab.len() {
        return Err(Error::ShapeMismatch(format!(
            "vocabulary has {} ids, encoder expects {}",
            vocab.len(),
            params.config.vocab_size
        )));
    }
    Ok(())
}

/// MLM logits at the prompt's mask slot.
pub fn mask_logits(model: &FilterModel, instance: &Instance) -> Result<Array1<f64>> {
    let seq = apply_template(
        &model.template,
        &preprocess_instance(instance, None),
        &model.vocab,
        model.params.config.max_len,
    )?;
    let pos = seq.mask_position.expect("template sets the mask position");
    let hidden: HiddenStates = forward(&model.params, std::slice::from_ref(&seq), Mode::Eval)?.remove(0);
    Ok(mlm_logits(&model.params, &hidden, &[pos])?.row(0).to_owned())
}

pub fn refute_filter_predict(model: &FilterModel, instance: &Instance) -> Result<(FilterDecision, BinaryPrediction)> {
    let pred = answer_map(mask_logits(model, instance)?.view(), &model.verbalizer)?;
    Ok((pred.decide(model.threshold), pred))
}

/// [`refute_filter_predict`] over a dataset, in parallel, in dataset order.
pub fn refute_filter_predict_all(model: &FilterModel, data: &Dataset) -> Result<Vec<(FilterDecision, BinaryPrediction)>> {
    data.instances()
        .par_iter()
        .map(|inst| refute_filter_predict(model, inst))
        .collect()
}
