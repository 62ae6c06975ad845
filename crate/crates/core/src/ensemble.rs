//! Snapshot ensembles, mean ensembles and a stacking meta-learner.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand_distr::{Distribution, Normal};

use crate::corpus::{Dataset, Instance, Label};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::nn::softmax;
use crate::optim::{adamw_step, AdamWHyper, AdamWState, Parameters, ScheduleConfig, ScheduleKind};
use crate::pipeline::{finetune_observed, predict, ClassifierModel, FinetuneConfig, OofMatrix, PredictionVector};
use crate::rng;
use crate::tokenizer::Vocabulary;
use crate::train::{BatchSampler, StepRecord, TrainConfig};

#[derive(Debug, Clone)]
pub struct Snapshot {
    /// 1-based cycle number.
    pub cycle: usize,
    /// Optimizer step after which the snapshot was taken.
    pub step: usize,
    pub model: ClassifierModel,
}

#[derive(Debug, Clone)]
pub struct SnapshotSet {
    pub snapshots: Vec<Snapshot>,
}

#[derive(Debug, Clone)]
pub struct SnapshotOutput {
    pub set: SnapshotSet,
    pub trace: Vec<StepRecord>,
}

/// One finetuning pass under the cyclic schedule, keeping the parameters at
/// the last step of every cycle.
pub fn snapshot_train(
    params: EncoderParams,
    vocab: &Vocabulary,
    train: &Dataset,
    classes: &[Label],
    cfg: &FinetuneConfig,
) -> Result<SnapshotOutput> {
    let sched = cfg.train.schedule;
    if sched.kind != ScheduleKind::Cyclic {
        return Err(Error::InvalidConfig("snapshot training needs the cyclic schedule".into()));
    }
    if sched.cycles < 2 {
        return Err(Error::InvalidConfig(format!("cycles = {}, need at least 2", sched.cycles)));
    }
    sched.validate()?;
    let cycle_len = sched.cycle_len();
    let mut captured: Vec<(usize, usize, EncoderParams)> = Vec::with_capacity(sched.cycles);
    let out = finetune_observed(params, vocab, train, classes, cfg, |step, p| {
        if step % cycle_len == 0 {
            captured.push((step / cycle_len, step, p.clone()));
        }
        Ok(())
    })?;
    let snapshots = captured
        .into_iter()
        .map(|(cycle, step, params)| Snapshot {
            cycle,
            step,
            model: ClassifierModel {
                params,
                classes: out.model.classes.clone(),
                vocab: out.model.vocab.clone(),
            },
        })
        .collect();
    Ok(SnapshotOutput {
        set: SnapshotSet { snapshots },
        trace: out.trace,
    })
}

/// Per-class arithmetic mean. Each class's values are summed in ascending
/// order, so the result does not depend on the order of `preds`.
pub fn mean_ensemble(preds: &[PredictionVector]) -> Result<PredictionVector> {
    let first = preds.first().ok_or(Error::EmptySelection)?;
    if preds.iter().any(|p| p.classes != first.classes || p.probs.len() != first.probs.len()) {
        return Err(Error::ClassListMismatch);
    }
    let n = preds.len() as f64;
    let probs = (0..first.probs.len())
        .map(|c| {
            let mut col: Vec<f64> = preds.iter().map(|p| p.probs[c]).collect();
            col.sort_by(f64::total_cmp);
            col.iter().sum::<f64>() / n
        })
        .collect();
    Ok(PredictionVector {
        classes: first.classes.clone(),
        probs,
    })
}

pub fn snapshot_predict(set: &SnapshotSet, instance: &Instance) -> Result<PredictionVector> {
    let members = set
        .snapshots
        .iter()
        .map(|s| predict(&s.model, instance))
        .collect::<Result<Vec<_>>>()?;
    mean_ensemble(&members)
}

/// Three fully connected layers with ReLU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct StackerParams {
    pub classes: Vec<Label>,
    pub n_models: usize,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

impl Parameters for StackerParams {
    fn tensors(&self) -> Vec<&[f64]> {
        [
            self.w1.as_slice(),
            self.b1.as_slice(),
            self.w2.as_slice(),
            self.b2.as_slice(),
            self.w3.as_slice(),
            self.b3.as_slice(),
        ]
        .into_iter()
        .map(|s| s.expect("standard layout"))
        .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        [
            self.w1.as_slice_mut(),
            self.b1.as_slice_mut(),
            self.w2.as_slice_mut(),
            self.b2.as_slice_mut(),
            self.w3.as_slice_mut(),
            self.b3.as_slice_mut(),
        ]
        .into_iter()
        .map(|s| s.expect("standard layout"))
        .collect()
    }
}

impl StackerParams {
    /// He-normal weights, zero biases.
    pub fn init(classes: &[Label], n_models: usize, hidden: (usize, usize), seed: u64) -> Result<StackerParams> {
        let input = n_models * classes.len();
        if input == 0 || hidden.0 == 0 || hidden.1 == 0 {
            return Err(Error::InvalidConfig("stacker dimensions must be positive".into()));
        }
        let mut r = rng::derived(seed, 0x7374_6b72, 0);
        let mut layer = |fan_in: usize, fan_out: usize| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
            Array2::from_shape_simple_fn((fan_in, fan_out), || normal.sample(&mut r))
        };
        let w1 = layer(input, hidden.0);
        let w2 = layer(hidden.0, hidden.1);
        let w3 = layer(hidden.1, classes.len());
        Ok(StackerParams {
            classes: classes.to_vec(),
            n_models,
            w1,
            b1: Array1::zeros(hidden.0),
            w2,
            b2: Array1::zeros(hidden.1),
            w3,
            b3: Array1::zeros(classes.len()),
        })
    }

    pub fn input_width(&self) -> usize {
        self.w1.nrows()
    }

    fn zeros_like(&self) -> StackerParams {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Output logits for each input row.
    pub fn logits(&self, x: &Array2<f64>) -> Array2<f64> {
        self.forward(x).2
    }

    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let h1 = (x.dot(&self.w1) + &self.b1).mapv(relu);
        let h2 = (h1.dot(&self.w2) + &self.b2).mapv(relu);
        let z = h2.dot(&self.w3) + &self.b3;
        (h1, h2, z)
    }

    /// Mean cross-entropy over the rows of `x` and its gradient.
    pub fn loss_and_grad(&self, x: &Array2<f64>, targets: &[usize]) -> (f64, StackerParams) {
        let n = x.nrows() as f64;
        let (h1, h2, z) = self.forward(x);
        let mut dz = Array2::zeros(z.raw_dim());
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let (l, g) = crate::nn::cross_entropy(z.row(r), t);
            loss += l;
            dz.row_mut(r).assign(&(g / n));
        }
        let mut g = self.zeros_like();
        g.w3 = h2.t().dot(&dz);
        g.b3 = dz.sum_axis(Axis(0));
        let mut dh2 = dz.dot(&self.w3.t());
        dh2.zip_mut_with(&h2, |d, &h| *d *= relu_grad(h));
        g.w2 = h1.t().dot(&dh2);
        g.b2 = dh2.sum_axis(Axis(0));
        let mut dh1 = dh2.dot(&self.w2.t());
        dh1.zip_mut_with(&h1, |d, &h| *d *= relu_grad(h));
        g.w1 = x.t().dot(&dh1);
        g.b1 = dh1.sum_axis(Axis(0));
        (loss / n, g)
    }
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Derivative expressed through the activation output.
fn relu_grad(h: f64) -> f64 {
    if h > 0.0 {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StackerConfig {
    pub hidden: (usize, usize),
    pub train: TrainConfig,
}

impl Default for StackerConfig {
    fn default() -> Self {
        StackerConfig {
            hidden: (64, 32),
            train: TrainConfig {
                schedule: ScheduleConfig {
                    kind: ScheduleKind::WarmupCosine,
                    warmup_steps: 50,
                    peak_lr: 3e-3,
                    total_steps: 1000,
                    cycles: 1,
                },
                adamw: AdamWHyper::default(),
                batch_size: 64,
                seed: 0,
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct StackerOutput {
    pub params: StackerParams,
    pub trace: Vec<StepRecord>,
}

/// Fits the stacker on OOF rows against their gold labels.
pub fn train_stacker(oof: &OofMatrix, labels: &[Label], cfg: &StackerConfig) -> Result<StackerOutput> {
    if oof.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: oof.len(),
            right: labels.len(),
        });
    }
    if oof.values.ncols() != oof.width() {
        return Err(Error::ShapeMismatch(format!(
            "OOF matrix has {} columns, header implies {}",
            oof.values.ncols(),
            oof.width()
        )));
    }
    cfg.train.validate()?;
    if oof.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let targets: Vec<usize> = labels
        .iter()
        .map(|l| oof.classes.iter().position(|c| c == l).ok_or(Error::ClassNotInList(*l)))
        .collect::<Result<_>>()?;
    let mut params = StackerParams::init(&oof.classes, oof.model_names.len(), cfg.hidden, cfg.train.seed)?;
    let mut state = AdamWState::new(&params);
    let mut sampler = BatchSampler::new(oof.len(), cfg.train.seed);
    let mut trace = Vec::with_capacity(cfg.train.total_steps());
    for step in 1..=cfg.train.total_steps() {
        let batch = sampler.next_batch(cfg.train.batch_size.min(oof.len()));
        let x = oof.values.select(Axis(0), &batch);
        let t: Vec<usize> = batch.iter().map(|&i| targets[i]).collect();
        let (loss, grads) = params.loss_and_grad(&x, &t);
        let lr = cfg.train.schedule.lr(step)?;
        adamw_step(&mut params, &grads, &mut state, &cfg.train.adamw, lr)?;
        trace.push(StepRecord { step, lr, loss });
    }
    Ok(StackerOutput { params, trace })
}

/// Applies the stacker to base-model predictions given in training order.
pub fn stacker_predict(stacker: &StackerParams, base_preds: &[PredictionVector]) -> Result<PredictionVector> {
    if base_preds.len() != stacker.n_models {
        return Err(Error::LengthMismatch {
            left: base_preds.len(),
            right: stacker.n_models,
        });
    }
    if base_preds.iter().any(|p| p.classes != stacker.classes) {
        return Err(Error::ClassListMismatch);
    }
    let row: Vec<f64> = base_preds.iter().flat_map(|p| p.probs.iter().copied()).collect();
    stacker_predict_row(stacker, &row)
}

/// Applies the stacker to one concatenated row of probabilities.
pub fn stacker_predict_row(stacker: &StackerParams, row: &[f64]) -> Result<PredictionVector> {
    if row.len() != stacker.input_width() {
        return Err(Error::LengthMismatch {
            left: row.len(),
            right: stacker.input_width(),
        });
    }
    let x = Array2::from_shape_vec((1, row.len()), row.to_vec()).expect("one row");
    let z = stacker.logits(&x);
    Ok(PredictionVector {
        classes: stacker.classes.clone(),
        probs: softmax(z.row(0)).to_vec(),
    })
}

const STACKER_MAGIC: &[u8; 8] = b"PVSTACK1";

pub fn write_stacker<W: Write>(s: &StackerParams, mut w: W) -> std::io::Result<()> {
    w.write_all(STACKER_MAGIC)?;
    let dims = [
        s.n_models,
        s.classes.len(),
        s.input_width(),
        s.w1.ncols(),
        s.w2.ncols(),
    ];
    for d in dims {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for c in &s.classes {
        w.write_all(&(c.index() as u64).to_le_bytes())?;
    }
    for t in s.tensors() {
        for v in t {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_stacker<R: Read>(mut r: R) -> Result<StackerParams> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != STACKER_MAGIC {
        return Err(bad("not a stacker file"));
    }
    let mut u64_at = || -> Result<usize> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(|_| bad("truncated header"))?;
        Ok(u64::from_le_bytes(b) as usize)
    };
    let [n_models, n_classes, input, h1, h2] = [u64_at()?, u64_at()?, u64_at()?, u64_at()?, u64_at()?];
    let classes = (0..n_classes)
        .map(|_| u64_at().and_then(|i| Label::from_index(i).ok_or_else(|| bad("bad class index"))))
        .collect::<Result<Vec<_>>>()?;
    if input != n_models * n_classes {
        return Err(bad("inconsistent dimensions"));
    }
    let mut s = StackerParams::init(&classes, n_models, (h1, h2), 0)?;
    for t in s.tensors_mut() {
        for v in t.iter_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| bad("truncated tensor data"))?;
            *v = f64::from_le_bytes(b);
        }
    }
    Ok(s)
}

pub fn save_stacker(s: &StackerParams, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_stacker(s, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_stacker(path: &Path) -> Result<StackerParams> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_stacker(std::io::BufReader::new(f))
}
