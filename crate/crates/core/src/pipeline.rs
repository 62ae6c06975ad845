//! Supervised finetuning, k-fold cross-validation with out-of-fold
//! predictions, and two-stage (filter, then 4-way) prediction.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;

use crate::corpus::{preprocess_instance, Dataset, FoldAssignment, Instance, Label};
use crate::encoder::{class_logits, forward, EncoderParams, Mode, OutputGrad};
use crate::error::{Error, Result};
use crate::nn::{argmax, cross_entropy, softmax};
use crate::optim::{AdamWHyper, ScheduleConfig};
use crate::prompt::{refute_filter_predict, FilterDecision, FilterModel};
use crate::tokenizer::{encode, TokenSequence, Vocabulary};
use crate::train::{train_loop, StepRecord, TrainConfig};

/// Probabilities over an ordered class list.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionVector {
    pub classes: Vec<Label>,
    pub probs: Vec<f64>,
}

impl PredictionVector {
    pub fn new(classes: Vec<Label>, probs: Vec<f64>) -> Result<PredictionVector> {
        if classes.len() != probs.len() {
            return Err(Error::LengthMismatch {
                left: classes.len(),
                right: probs.len(),
            });
        }
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("not a distribution: {probs:?}")));
        }
        Ok(PredictionVector { classes, probs })
    }

    /// Highest-probability class; the earliest class wins ties.
    pub fn top(&self) -> Label {
        self.classes[argmax(&self.probs)]
    }

    pub fn prob(&self, label: Label) -> Option<f64> {
        self.classes.iter().position(|&c| c == label).map(|i| self.probs[i])
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierModel {
    pub params: EncoderParams,
    pub classes: Vec<Label>,
    pub vocab: Vocabulary,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneConfig {
    pub train: TrainConfig,
}

impl Default for FinetuneConfig {
    /// 2000 steps, batch 32, warmup over 100 steps to 5e-6 then cosine decay.
    fn default() -> Self {
        FinetuneConfig {
            train: TrainConfig {
                schedule: ScheduleConfig::finetune_default(),
                adamw: AdamWHyper::default(),
                batch_size: 32,
                seed: 0,
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutput {
    pub model: ClassifierModel,
    pub trace: Vec<StepRecord>,
}

fn class_targets(train: &Dataset, classes: &[Label]) -> Result<Vec<usize>> {
    let labels = train.labels()?;
    let targets = labels
        .iter()
        .map(|l| classes.iter().position(|c| c == l).ok_or(Error::ClassNotInList(*l)))
        .collect::<Result<Vec<_>>>()?;
    for (i, &c) in classes.iter().enumerate() {
        if !targets.contains(&i) {
            return Err(Error::MissingClass(c));
        }
    }
    Ok(targets)
}

fn encode_all(data: &Dataset, vocab: &Vocabulary, max_len: usize) -> Result<Vec<TokenSequence>> {
    data.instances()
        .iter()
        .map(|inst| encode(vocab, &preprocess_instance(inst, None), max_len))
        .collect()
}

/// Trains a fresh class head of `classes.len()` outputs, together with the
/// encoder, by cross-entropy on the CLS position.
pub fn finetune(
    params: EncoderParams,
    vocab: &Vocabulary,
    train: &Dataset,
    classes: &[Label],
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutput> {
    finetune_observed(params, vocab, train, classes, cfg, |_, _| Ok(()))
}

/// [`finetune`] with a callback that sees the parameters after every step.
pub(crate) fn finetune_observed(
    params: EncoderParams,
    vocab: &Vocabulary,
    train: &Dataset,
    classes: &[Label],
    cfg: &FinetuneConfig,
    on_step: impl FnMut(usize, &EncoderParams) -> Result<()>,
) -> Result<FinetuneOutput> {
    if classes.is_empty() {
        return Err(Error::InvalidConfig("empty class list".into()));
    }
    if params.config.vocab_size != vocab.len() {
        return Err(Error::ShapeMismatch(format!(
            "vocabulary has {} ids, encoder expects {}",
            vocab.len(),
            params.config.vocab_size
        )));
    }
    let targets = class_targets(train, classes)?;
    let mut params = params.with_class_head(classes.len(), cfg.train.seed)?;
    let sequences = encode_all(train, vocab, params.config.max_len)?;
    let trace = train_loop(
        &mut params,
        &cfg.train,
        sequences.len(),
        |_, _, item| Ok(Some((sequences[item].clone(), targets[item]))),
        |p, hidden, &target: &usize| {
            let (loss, g) = cross_entropy(class_logits(p, hidden).view(), target);
            Ok((
                loss,
                1,
                OutputGrad {
                    mlm: Vec::new(),
                    class: Some(g),
                },
            ))
        },
        on_step,
    )?;
    Ok(FinetuneOutput {
        model: ClassifierModel {
            params,
            classes: classes.to_vec(),
            vocab: vocab.clone(),
        },
        trace,
    })
}

/// Softmax of the class logits.
pub fn predict(model: &ClassifierModel, instance: &Instance) -> Result<PredictionVector> {
    let seq = encode(&model.vocab, &preprocess_instance(instance, None), model.params.config.max_len)?;
    let hidden = forward(&model.params, std::slice::from_ref(&seq), Mode::Eval)?.remove(0);
    let probs = softmax(class_logits(&model.params, &hidden).view());
    Ok(PredictionVector {
        classes: model.classes.clone(),
        probs: probs.to_vec(),
    })
}

/// [`predict`] for every instance, in parallel, in dataset order.
pub fn predict_all(model: &ClassifierModel, data: &Dataset) -> Result<Vec<PredictionVector>> {
    data.instances().par_iter().map(|inst| predict(model, inst)).collect()
}

/// One base model for cross-validation: its starting parameters and its
/// finetuning recipe (including the seed).
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub name: String,
    pub init: EncoderParams,
    pub finetune: FinetuneConfig,
}

#[derive(Debug, Clone)]
pub struct FoldModel {
    pub fold: usize,
    /// Dataset indices this model was trained on.
    pub train_indices: Vec<usize>,
    pub model: ClassifierModel,
}

/// Out-of-fold predictions: one row per training instance, one block of
/// `classes.len()` columns per base model.
#[derive(Debug, Clone, PartialEq)]
pub struct OofMatrix {
    pub ids: Vec<String>,
    pub folds: Vec<usize>,
    pub model_names: Vec<String>,
    pub classes: Vec<Label>,
    pub values: Array2<f64>,
}

impl OofMatrix {
    pub fn width(&self) -> usize {
        self.model_names.len() * self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Prediction of model `m` for row `i`.
    pub fn block(&self, i: usize, m: usize) -> Vec<f64> {
        let c = self.classes.len();
        self.values.row(i).iter().skip(m * c).take(c).copied().collect()
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["instance_id".to_string(), "fold".to_string()];
        for m in &self.model_names {
            for c in &self.classes {
                h.push(format!("{m}:{}", c.name()));
            }
        }
        h
    }

    pub fn write_csv<W: Write>(&self, w: W) -> std::result::Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(self.header())?;
        for (i, id) in self.ids.iter().enumerate() {
            let mut rec = vec![id.clone(), self.folds[i].to_string()];
            rec.extend(self.values.row(i).iter().map(|v| v.to_string()));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, path: &Path) -> Result<OofMatrix> {
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut rdr = csv::Reader::from_reader(r);
        let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
        if header.len() < 3 || header[0] != "instance_id" || header[1] != "fold" {
            return Err(Error::Header {
                path: path.to_path_buf(),
                expected: "instance_id,fold,<model>:<class>...".into(),
                found: header.join(","),
            });
        }
        let mut model_names: Vec<String> = Vec::new();
        let mut columns: Vec<(String, Label)> = Vec::new();
        for col in &header[2..] {
            let (m, c) = col.rsplit_once(':').ok_or_else(|| Error::Header {
                path: path.to_path_buf(),
                expected: "<model>:<class>".into(),
                found: col.clone(),
            })?;
            let label: Label = c.parse().map_err(|_| Error::UnknownCategory {
                name: c.to_string(),
                row: Some(1),
            })?;
            if model_names.last().map(String::as_str) != Some(m) {
                model_names.push(m.to_string());
            }
            columns.push((m.to_string(), label));
        }
        let n_classes = columns.len() / model_names.len();
        let classes: Vec<Label> = columns[..n_classes].iter().map(|(_, l)| *l).collect();
        let consistent = columns.len() == n_classes * model_names.len()
            && columns
                .iter()
                .enumerate()
                .all(|(j, (m, l))| *m == model_names[j / n_classes] && *l == classes[j % n_classes]);
        if !consistent {
            return Err(Error::Header {
                path: path.to_path_buf(),
                expected: "equal class blocks per model".into(),
                found: header.join(","),
            });
        }

        let mut ids = Vec::new();
        let mut folds = Vec::new();
        let mut flat = Vec::new();
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let row = r as u64 + 2;
            let bad = |message: String| Error::MalformedRow {
                path: path.to_path_buf(),
                row,
                message,
            };
            if rec.len() != header.len() {
                return Err(bad(format!("{} fields, expected {}", rec.len(), header.len())));
            }
            ids.push(rec[0].to_string());
            folds.push(rec[1].parse().map_err(|_| bad(format!("bad fold `{}`", &rec[1])))?);
            for v in rec.iter().skip(2) {
                flat.push(v.parse::<f64>().map_err(|_| bad(format!("bad probability `{v}`")))?);
            }
        }
        let values = Array2::from_shape_vec((ids.len(), columns.len()), flat).expect("row lengths checked");
        Ok(OofMatrix {
            ids,
            folds,
            model_names,
            classes,
            values,
        })
    }
}

#[derive(Debug, Clone)]
pub struct CrossValidation {
    /// `models[s][f]`: spec `s` trained without fold `f`.
    pub models: Vec<Vec<FoldModel>>,
    pub oof: OofMatrix,
}

impl CrossValidation {
    /// True when no OOF entry was produced by a model that saw that instance.
    pub fn leakage_free(&self) -> bool {
        self.oof.folds.iter().enumerate().all(|(i, &f)| {
            self.models
                .iter()
                .all(|per_fold| per_fold[f].fold == f && per_fold[f].train_indices.binary_search(&i).is_err())
        })
    }
}

/// For every spec and fold `f`, finetunes on the other folds and predicts
/// fold `f`. Fold trainings run in parallel; results are merged by instance
/// index.
pub fn crossval_train(
    dataset: &Dataset,
    vocab: &Vocabulary,
    folds: &FoldAssignment,
    specs: &[ModelSpec],
    classes: &[Label],
) -> Result<CrossValidation> {
    if folds.len() != dataset.len() {
        return Err(Error::LengthMismatch {
            left: folds.len(),
            right: dataset.len(),
        });
    }
    if specs.is_empty() {
        return Err(Error::InvalidConfig("no model specs".into()));
    }
    for s in specs {
        if s.name.is_empty() || s.name.contains([',', ':', '"']) {
            return Err(Error::InvalidConfig(format!("model name `{}` must be nonempty without , : \"", s.name)));
        }
    }
    let k = folds.k();
    let jobs: Vec<(usize, usize)> = (0..specs.len()).flat_map(|s| (0..k).map(move |f| (s, f))).collect();
    let results: Vec<(FoldModel, Vec<(usize, PredictionVector)>)> = jobs
        .par_iter()
        .map(|&(s, f)| -> Result<_> {
            let train_idx = folds.complement(f);
            let held_idx = folds.members(f);
            let spec = &specs[s];
            log::info!("training {} without fold {f} ({} instances)", spec.name, train_idx.len());
            let out = finetune(spec.init.clone(), vocab, &dataset.subset(&train_idx), classes, &spec.finetune)?;
            let preds = predict_all(&out.model, &dataset.subset(&held_idx))?;
            Ok((
                FoldModel {
                    fold: f,
                    train_indices: train_idx,
                    model: out.model,
                },
                held_idx.into_iter().zip(preds).collect(),
            ))
        })
        .collect::<Result<_>>()?;

    let c = classes.len();
    let mut values = Array2::zeros((dataset.len(), specs.len() * c));
    let mut models: Vec<Vec<FoldModel>> = (0..specs.len()).map(|_| Vec::with_capacity(k)).collect();
    for ((s, _), (model, preds)) in jobs.into_iter().zip(results) {
        for (i, p) in preds {
            for (j, v) in p.probs.into_iter().enumerate() {
                values[[i, s * c + j]] = v;
            }
        }
        models[s].push(model);
    }
    Ok(CrossValidation {
        models,
        oof: OofMatrix {
            ids: dataset.instances().iter().map(|x| x.id.clone()).collect(),
            folds: folds.assignment().to_vec(),
            model_names: specs.iter().map(|s| s.name.clone()).collect(),
            classes: classes.to_vec(),
            values,
        },
    })
}

/// Merges the filter decision with the 4-way prediction into a 5-way result.
/// A Refute decision yields probability one on Refute; otherwise the 4-way
/// probabilities are carried over, Refute gets zero, and the label is the
/// 4-way argmax.
pub fn combine_two_stage(decision: FilterDecision, four_way: &PredictionVector) -> Result<(Label, PredictionVector)> {
    if four_way.classes != Label::NON_REFUTE {
        return Err(Error::ClassListMismatch);
    }
    let mut probs = vec![0.0; Label::ALL.len()];
    let label = match decision {
        FilterDecision::Refute => Label::Refute,
        FilterDecision::Other => {
            for (c, p) in four_way.classes.iter().zip(&four_way.probs) {
                probs[c.index()] = *p;
            }
            four_way.top()
        }
    };
    if decision == FilterDecision::Refute {
        probs[Label::Refute.index()] = 1.0;
    }
    Ok((
        label,
        PredictionVector {
            classes: Label::ALL.to_vec(),
            probs,
        },
    ))
}

pub fn two_stage_predict(
    filter: &FilterModel,
    classifier4: &ClassifierModel,
    instance: &Instance,
) -> Result<(Label, PredictionVector)> {
    let (decision, _) = refute_filter_predict(filter, instance)?;
    let four = predict(classifier4, instance)?;
    combine_two_stage(decision, &four)
}

/// [`two_stage_predict`] over a dataset, in parallel, in dataset order.
pub fn two_stage_predict_all(
    filter: &FilterModel,
    classifier4: &ClassifierModel,
    data: &Dataset,
) -> Result<Vec<(Label, PredictionVector)>> {
    data.instances()
        .par_iter()
        .map(|inst| two_stage_predict(filter, classifier4, inst))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, stratified_kfold, SyntheticSpec};
    use crate::encoder::{init_params, EncoderConfig};
    use crate::optim::ScheduleKind;
    use crate::tokenizer::build_vocab;

    fn four_way(probs: [f64; 4]) -> PredictionVector {
        PredictionVector::new(Label::NON_REFUTE.to_vec(), probs.to_vec()).unwrap()
    }

    #[test]
    fn refute_gate_overrides_classifier() {
        let (l, p) = combine_two_stage(FilterDecision::Refute, &four_way([0.7, 0.1, 0.1, 0.1])).unwrap();
        assert_eq!(l, Label::Refute);
        assert_eq!(p.prob(Label::Refute), Some(1.0));
        assert_eq!(p.probs.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn other_uses_four_way_argmax() {
        let (l, p) = combine_two_stage(FilterDecision::Other, &four_way([0.1, 0.1, 0.2, 0.6])).unwrap();
        assert_eq!(l, Label::InsufficientText);
        assert_eq!(p.prob(Label::Refute), Some(0.0));
        let (l, _) = combine_two_stage(FilterDecision::Other, &four_way([0.25; 4])).unwrap();
        assert_eq!(l, Label::SupportMultimodal);
        let (l, _) = combine_two_stage(FilterDecision::Other, &four_way([0.1, 0.4, 0.4, 0.1])).unwrap();
        assert_eq!(l, Label::SupportText);
    }

    #[test]
    fn four_way_class_order_enforced() {
        let five = PredictionVector::new(Label::ALL.to_vec(), vec![0.2; 5]).unwrap();
        assert!(matches!(combine_two_stage(FilterDecision::Other, &five), Err(Error::ClassListMismatch)));
    }

    fn small_setup(per_class: usize) -> (Dataset, Vocabulary, EncoderParams) {
        let ds = generate_synthetic(SyntheticSpec {
            classes: 5,
            per_class,
            vocab_size: 200,
            seed: 3,
        })
        .unwrap();
        let texts: Vec<String> = ds.instances().iter().map(|i| preprocess_instance(i, None)).collect();
        let vocab = build_vocab(&texts, 400, 1).unwrap();
        let params = init_params(EncoderConfig::tiny(vocab.len(), 24, 5), 1).unwrap();
        (ds, vocab, params)
    }

    fn quick_cfg(steps: usize, seed: u64) -> FinetuneConfig {
        FinetuneConfig {
            train: TrainConfig {
                schedule: ScheduleConfig {
                    kind: ScheduleKind::WarmupCosine,
                    warmup_steps: steps / 10,
                    peak_lr: 3e-3,
                    total_steps: steps,
                    cycles: 1,
                },
                adamw: AdamWHyper::default(),
                batch_size: 16,
                seed,
            },
        }
    }

    #[test]
    fn finetune_rejects_unlisted_class() {
        let (ds, vocab, params) = small_setup(6);
        let r = finetune(params, &vocab, &ds, &Label::NON_REFUTE, &quick_cfg(2, 0));
        assert!(matches!(r, Err(Error::ClassNotInList(Label::Refute))));
    }

    #[test]
    fn finetune_is_deterministic_and_predicts_distributions() {
        let (ds, vocab, params) = small_setup(6);
        let a = finetune(params.clone(), &vocab, &ds, &Label::ALL, &quick_cfg(5, 4)).unwrap();
        let b = finetune(params, &vocab, &ds, &Label::ALL, &quick_cfg(5, 4)).unwrap();
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(a.trace.len(), 5);
        let p = predict(&a.model, &ds.instances()[0]).unwrap();
        assert_eq!(p.classes, Label::ALL.to_vec());
        assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(p, predict(&a.model, &ds.instances()[0]).unwrap());
    }

    #[test]
    fn argmax_ignores_class_logit_shift() {
        let (ds, vocab, params) = small_setup(6);
        let mut m = finetune(params, &vocab, &ds, &Label::ALL, &quick_cfg(3, 0)).unwrap().model;
        let before: Vec<Label> = predict_all(&m, &ds).unwrap().iter().map(PredictionVector::top).collect();
        m.params.cls_b += 7.5;
        let after: Vec<Label> = predict_all(&m, &ds).unwrap().iter().map(PredictionVector::top).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn crossval_shapes_and_provenance() {
        let (ds, vocab, params) = small_setup(5);
        let folds = stratified_kfold(&ds, 5, 0).unwrap();
        let specs: Vec<ModelSpec> = (0..2)
            .map(|s| ModelSpec {
                name: format!("m{s}"),
                init: params.clone(),
                finetune: quick_cfg(2, s),
            })
            .collect();
        let cv = crossval_train(&ds, &vocab, &folds, &specs, &Label::ALL).unwrap();
        assert_eq!(cv.oof.width(), 10);
        assert_eq!(cv.oof.len(), ds.len());
        assert!(cv.leakage_free());
        for i in 0..ds.len() {
            for m in 0..2 {
                assert!((cv.oof.block(i, m).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        let mut buf = Vec::new();
        cv.oof.write_csv(&mut buf).unwrap();
        let back = OofMatrix::read_csv(buf.as_slice(), Path::new("oof.csv")).unwrap();
        assert_eq!(back, cv.oof);
        assert!(String::from_utf8(buf).unwrap().starts_with("instance_id,fold,m0:Support_Multimodal,"));
    }
}
