//! Subcommand implementations. Every artifact lives under the configured
//! output directory:
//!
//! ```text
//! vocab.txt  pretrained.ckpt  pretrain_loss.csv
//! five/<model>/fold<f>.ckpt  oof5.csv        finetune --stage five
//! four/<model>/fold<f>.ckpt  oof4.csv        finetune --stage four
//! filter.ckpt  filter_loss.csv               prompt-filter train
//! stacker.bin                                ensemble stacker
//! snapshot/cycle<i>.ckpt                     ensemble snapshot
//! manifest-<command>.txt                     every command
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use log::info;

use promptverify_core::corpus::{
    generate_synthetic, load_dataset, preprocess_instance, stratified_kfold, write_dataset, Dataset, Label, Split,
    SyntheticSpec,
};
use promptverify_core::encoder::{load_checkpoint, save_checkpoint};
use promptverify_core::ensemble::{
    load_stacker, mean_ensemble, save_stacker, snapshot_predict, snapshot_train, stacker_predict, train_stacker,
};
use promptverify_core::metrics::{confusion, f1_report};
use promptverify_core::mlm::{pretrain, PretrainConfig};
use promptverify_core::pipeline::{
    combine_two_stage, crossval_train, predict, ClassifierModel, FinetuneConfig, ModelSpec, OofMatrix,
    PredictionVector,
};
use promptverify_core::prompt::{
    prompt_vocabulary, refute_filter_predict_all, refute_filter_train, FilterConfig, FilterDecision, FilterModel,
    PromptTemplate, Verbalizer,
};
use promptverify_core::tokenizer::{build_vocab, Vocabulary};
use promptverify_core::train::write_loss_trace;

use crate::config::{parse_config, RunConfig};
use crate::manifest::Manifest;
use crate::{Command, EnsembleAction, FilterAction, Stage};

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

impl From<promptverify_core::Error> for Failure {
    fn from(e: promptverify_core::Error) -> Self {
        Failure::Data(e.into())
    }
}

type Outcome = Result<(), Failure>;

pub fn dispatch(cmd: Command) -> Outcome {
    match cmd {
        Command::Synth {
            out,
            classes,
            per_class,
            vocab_size,
            seed,
        } => synth(&out, classes, per_class, vocab_size, seed),
        Command::Pretrain { config } => cmd_pretrain(&Run::open(&config)?),
        Command::Finetune { config, stage } => cmd_finetune(&Run::open(&config)?, stage),
        Command::PromptFilter { action } => match action {
            FilterAction::Train { config } => cmd_filter_train(&Run::open(&config)?),
            FilterAction::Apply { config, input, out } => cmd_filter_apply(&Run::open(&config)?, input, &out),
        },
        Command::Ensemble { action } => match action {
            EnsembleAction::Stacker { config } => cmd_stacker(&Run::open(&config)?),
            EnsembleAction::Snapshot { config, input, out } => cmd_snapshot(&Run::open(&config)?, input, out),
        },
        Command::Predict {
            config,
            method,
            input,
            out,
        } => cmd_predict(&Run::open(&config)?, method, input, out),
        Command::Evaluate { gold, pred, out } => evaluate(&gold, &pred, out.as_deref()),
    }
}

/// A loaded config plus its raw text (hashed into manifests).
struct Run {
    cfg: RunConfig,
    text: String,
}

impl Run {
    fn open(path: &Path) -> Result<Run, Failure> {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let cfg = parse_config(&text, base).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        fs::create_dir_all(&cfg.paths.output_dir)
            .with_context(|| format!("creating {}", cfg.paths.output_dir.display()))?;
        Ok(Run { cfg, text })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.cfg.paths.output_dir.join(name)
    }

    fn train_path(&self) -> Result<&Path, Failure> {
        self.cfg
            .paths
            .train
            .as_deref()
            .ok_or_else(|| Failure::Usage("config sets no train path ([paths] train)".into()))
    }

    fn test_path(&self, input: Option<PathBuf>) -> Result<PathBuf, Failure> {
        input
            .or_else(|| self.cfg.paths.test.clone())
            .ok_or_else(|| Failure::Usage("no input given and config sets no test path ([paths] test)".into()))
    }

    fn manifest(&self, command: &str) -> Manifest {
        let mut m = Manifest::new(command);
        m.config(&self.text, &self.cfg);
        m
    }

    fn write_manifest(&self, name: &str, m: &Manifest) -> Outcome {
        let path = self.out(&format!("manifest-{name}.txt"));
        m.write(&path).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    fn template(&self) -> Result<PromptTemplate, Failure> {
        PromptTemplate::new(&self.cfg.prompt.template).map_err(|e| Failure::Usage(format!("[prompt] template: {e}")))
    }

    fn vocab(&self) -> Result<Vocabulary, Failure> {
        let path = self.out("vocab.txt");
        Ok(Vocabulary::load(&path).with_context(|| format!("loading {} (run `pretrain` first)", path.display()))?)
    }

    fn model_names(&self) -> Vec<String> {
        (0..self.cfg.finetune.models).map(|i| format!("m{i}")).collect()
    }
}

fn stage_dir(stage: Stage) -> &'static str {
    match stage {
        Stage::Five => "five",
        Stage::Four => "four",
    }
}

fn stage_classes(stage: Stage) -> &'static [Label] {
    match stage {
        Stage::Five => &Label::ALL,
        Stage::Four => &Label::NON_REFUTE,
    }
}

fn fold_ckpt(run: &Run, stage: Stage, model: &str, fold: usize) -> PathBuf {
    run.out(stage_dir(stage)).join(model).join(format!("fold{fold}.ckpt"))
}

fn load_labeled(path: &Path) -> Result<Dataset, Failure> {
    Ok(load_dataset(path, true, Split::Train)?)
}

fn synth(out: &Path, classes: usize, per_class: usize, vocab_size: usize, seed: u64) -> Outcome {
    let ds = generate_synthetic(SyntheticSpec {
        classes,
        per_class,
        vocab_size,
        seed,
    })?;
    let file = fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    write_dataset(&ds, file).with_context(|| format!("writing {}", out.display()))?;
    info!("wrote {} instances to {}", ds.len(), out.display());
    Ok(())
}

fn cmd_pretrain(run: &Run) -> Outcome {
    let cfg = &run.cfg;
    let train_path = run.train_path()?;
    let ds = load_dataset(train_path, false, Split::Train)?;
    let texts: Vec<String> = ds.instances().iter().map(|i| preprocess_instance(i, None)).collect();
    let label_words: Vec<&str> = cfg
        .prompt
        .negative_words
        .iter()
        .chain(&cfg.prompt.positive_words)
        .map(String::as_str)
        .collect();
    let vocab = prompt_vocabulary(
        build_vocab(&texts, cfg.vocab_max_size, cfg.vocab_min_freq)?,
        &run.template()?,
        &label_words,
    );
    vocab.save(&run.out("vocab.txt"))?;
    info!("vocabulary: {} ids", vocab.len());

    let enc = cfg.encoder.config(vocab.len(), Label::ALL.len());
    let out = pretrain(
        &ds,
        &vocab,
        enc,
        &PretrainConfig {
            train: cfg.pretrain,
            masking: cfg.masking,
        },
    )?;
    save_checkpoint(&out.params, &run.out("pretrained.ckpt"))?;
    write_trace(&run.out("pretrain_loss.csv"), &out.trace)?;

    let mut m = run.manifest("pretrain");
    m.input("train", train_path).context("hashing train data")?;
    run.write_manifest("pretrain", &m)
}

fn write_trace(path: &Path, trace: &[promptverify_core::train::StepRecord]) -> Outcome {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_loss_trace(trace, std::io::BufWriter::new(f)).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_pretrained(run: &Run) -> Result<promptverify_core::EncoderParams, Failure> {
    let path = run.out("pretrained.ckpt");
    Ok(load_checkpoint(&path).with_context(|| format!("loading {} (run `pretrain` first)", path.display()))?)
}

fn cmd_finetune(run: &Run, stage: Stage) -> Outcome {
    let cfg = &run.cfg;
    let train_path = run.train_path()?;
    let full = load_labeled(train_path)?;
    let vocab = run.vocab()?;
    let init = load_pretrained(run)?;
    let folds = stratified_kfold(&full, cfg.finetune.folds, cfg.finetune.fold_seed)?;
    let (data, folds) = match stage {
        Stage::Five => (full, folds),
        Stage::Four => {
            let labels = full.labels()?;
            let keep: Vec<usize> = (0..full.len()).filter(|&i| labels[i] != Label::Refute).collect();
            (full.subset(&keep), folds.restrict(&keep))
        }
    };
    let specs: Vec<ModelSpec> = run
        .model_names()
        .into_iter()
        .enumerate()
        .map(|(i, name)| {
            let mut train = cfg.finetune.train;
            train.seed += i as u64;
            ModelSpec {
                name,
                init: init.clone(),
                finetune: FinetuneConfig { train },
            }
        })
        .collect();
    let cv = crossval_train(&data, &vocab, &folds, &specs, stage_classes(stage))?;
    for (spec, per_fold) in specs.iter().zip(&cv.models) {
        for fm in per_fold {
            let path = fold_ckpt(run, stage, &spec.name, fm.fold);
            fs::create_dir_all(path.parent().expect("has parent")).context("creating model directory")?;
            save_checkpoint(&fm.model.params, &path)?;
        }
    }
    let oof_path = run.out(&format!("oof{}.csv", stage_classes(stage).len()));
    let f = fs::File::create(&oof_path).with_context(|| format!("creating {}", oof_path.display()))?;
    cv.oof
        .write_csv(std::io::BufWriter::new(f))
        .with_context(|| format!("writing {}", oof_path.display()))?;

    let name = format!("finetune-{}", stage_dir(stage));
    let mut m = run.manifest(&name);
    m.input("train", train_path).context("hashing train data")?;
    run.write_manifest(&name, &m)
}

fn verbalizer(run: &Run, vocab: &Vocabulary) -> Result<Verbalizer, Failure> {
    Verbalizer::new(&run.cfg.prompt.negative_words, &run.cfg.prompt.positive_words, vocab)
        .map_err(|e| Failure::Usage(format!("[prompt] label words: {e}")))
}

fn cmd_filter_train(run: &Run) -> Outcome {
    let train_path = run.train_path()?;
    let ds = load_labeled(train_path)?;
    let vocab = run.vocab()?;
    let template = run.template()?;
    let verb = verbalizer(run, &vocab)?;
    let out = refute_filter_train(
        &ds,
        load_pretrained(run)?,
        &vocab,
        &template,
        &verb,
        &FilterConfig {
            train: run.cfg.prompt.train,
            threshold: run.cfg.prompt.threshold,
        },
    )?;
    save_checkpoint(&out.model.params, &run.out("filter.ckpt"))?;
    write_trace(&run.out("filter_loss.csv"), &out.trace)?;
    let mut m = run.manifest("prompt-filter-train");
    m.input("train", train_path).context("hashing train data")?;
    run.write_manifest("prompt-filter-train", &m)
}

fn load_filter(run: &Run, vocab: &Vocabulary) -> Result<FilterModel, Failure> {
    let path = run.out("filter.ckpt");
    let params =
        load_checkpoint(&path).with_context(|| format!("loading {} (run `prompt-filter train` first)", path.display()))?;
    Ok(FilterModel {
        params,
        vocab: vocab.clone(),
        template: run.template()?,
        verbalizer: verbalizer(run, vocab)?,
        threshold: run.cfg.prompt.threshold,
    })
}

fn cmd_filter_apply(run: &Run, input: Option<PathBuf>, out: &Path) -> Outcome {
    let input = run.test_path(input)?;
    let ds = load_dataset(&input, false, Split::Test)?;
    let vocab = run.vocab()?;
    let filter = load_filter(run, &vocab)?;
    let preds = refute_filter_predict_all(&filter, &ds)?;
    let mut w = csv::Writer::from_path(out).with_context(|| format!("creating {}", out.display()))?;
    w.write_record(["id", "p_negative", "decision"]).context("writing filter output")?;
    for (inst, (decision, p)) in ds.instances().iter().zip(preds) {
        let d = match decision {
            FilterDecision::Refute => "refute",
            FilterDecision::Other => "other",
        };
        w.write_record([inst.id.as_str(), &p.p_negative.to_string(), d])
            .context("writing filter output")?;
    }
    w.flush().context("writing filter output")?;
    let mut m = run.manifest("prompt-filter-apply");
    m.input("data", &input).context("hashing input")?;
    run.write_manifest("prompt-filter-apply", &m)
}

fn cmd_stacker(run: &Run) -> Outcome {
    let train_path = run.train_path()?;
    let ds = load_labeled(train_path)?;
    let oof_path = run.out("oof5.csv");
    let f = fs::File::open(&oof_path)
        .with_context(|| format!("opening {} (run `finetune --stage five` first)", oof_path.display()))?;
    let oof = OofMatrix::read_csv(std::io::BufReader::new(f), &oof_path)?;
    let ids: Vec<&str> = ds.instances().iter().map(|i| i.id.as_str()).collect();
    if oof.ids.iter().map(String::as_str).ne(ids.iter().copied()) {
        return Err(Failure::Data(anyhow!(
            "{} rows do not match the training instances in {}",
            oof_path.display(),
            train_path.display()
        )));
    }
    let out = train_stacker(&oof, &ds.labels()?, &run.cfg.stacker)?;
    save_stacker(&out.params, &run.out("stacker.bin"))?;
    let mut m = run.manifest("ensemble-stacker");
    m.input("train", train_path).context("hashing train data")?;
    m.input("oof", &oof_path).context("hashing OOF predictions")?;
    run.write_manifest("ensemble-stacker", &m)
}

fn cmd_snapshot(run: &Run, input: Option<PathBuf>, out: Option<PathBuf>) -> Outcome {
    let train_path = run.train_path()?;
    let ds = load_labeled(train_path)?;
    let input = run.test_path(input)?;
    let test = load_dataset(&input, false, Split::Test)?;
    let vocab = run.vocab()?;
    let snap = snapshot_train(
        load_pretrained(run)?,
        &vocab,
        &ds,
        &Label::ALL,
        &FinetuneConfig {
            train: run.cfg.snapshot,
        },
    )?;
    let dir = run.out("snapshot");
    fs::create_dir_all(&dir).context("creating snapshot directory")?;
    for s in &snap.set.snapshots {
        save_checkpoint(&s.model.params, &dir.join(format!("cycle{}.ckpt", s.cycle)))?;
    }
    let labels = test
        .instances()
        .iter()
        .map(|inst| snapshot_predict(&snap.set, inst).map(|p| p.top()))
        .collect::<Result<Vec<_>, _>>()?;
    let out = out.unwrap_or_else(|| run.out("predictions-snapshot.csv"));
    write_predictions(&out, &test, &labels)?;
    let mut m = run.manifest("ensemble-snapshot");
    m.input("train", train_path).context("hashing train data")?;
    m.input("data", &input).context("hashing input")?;
    run.write_manifest("ensemble-snapshot", &m)
}

/// The fold models of one base model, averaged.
fn fold_mean(run: &Run, stage: Stage, model: &str, vocab: &Vocabulary, data: &Dataset) -> Result<Vec<PredictionVector>, Failure> {
    let classes = stage_classes(stage);
    let models = (0..run.cfg.finetune.folds)
        .map(|f| {
            let path = fold_ckpt(run, stage, model, f);
            let params = load_checkpoint(&path)
                .with_context(|| format!("loading {} (run `finetune --stage {}` first)", path.display(), stage_dir(stage)))?;
            if params.config.n_classes != classes.len() {
                return Err(anyhow!("{} has {} classes, expected {}", path.display(), params.config.n_classes, classes.len()));
            }
            Ok(ClassifierModel {
                params,
                classes: classes.to_vec(),
                vocab: vocab.clone(),
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let out = data
        .instances()
        .iter()
        .map(|inst| {
            let members = models.iter().map(|m| predict(m, inst)).collect::<Result<Vec<_>, _>>()?;
            mean_ensemble(&members)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(out)
}

fn cmd_predict(run: &Run, method: u8, input: Option<PathBuf>, out: Option<PathBuf>) -> Outcome {
    let input = run.test_path(input)?;
    let data = load_dataset(&input, false, Split::Test)?;
    let vocab = run.vocab()?;
    let names = run.model_names();
    let labels: Vec<Label> = if method == 1 {
        let stacker_path = run.out("stacker.bin");
        let stacker = load_stacker(&stacker_path)
            .with_context(|| format!("loading {} (run `ensemble stacker` first)", stacker_path.display()))?;
        let per_model = names
            .iter()
            .map(|n| fold_mean(run, Stage::Five, n, &vocab, &data))
            .collect::<Result<Vec<_>, _>>()?;
        (0..data.len())
            .map(|i| {
                let base: Vec<PredictionVector> = per_model.iter().map(|p| p[i].clone()).collect();
                stacker_predict(&stacker, &base).map(|p| p.top())
            })
            .collect::<Result<_, _>>()?
    } else {
        let filter = load_filter(run, &vocab)?;
        let decisions = refute_filter_predict_all(&filter, &data)?;
        let per_model = names
            .iter()
            .map(|n| fold_mean(run, Stage::Four, n, &vocab, &data))
            .collect::<Result<Vec<_>, _>>()?;
        (0..data.len())
            .map(|i| {
                let members: Vec<PredictionVector> = per_model.iter().map(|p| p[i].clone()).collect();
                let four = mean_ensemble(&members)?;
                combine_two_stage(decisions[i].0, &four).map(|(l, _)| l)
            })
            .collect::<Result<_, _>>()?
    };
    let out = out.unwrap_or_else(|| run.out(&format!("predictions-method{method}.csv")));
    write_predictions(&out, &data, &labels)?;
    let name = format!("predict-method{method}");
    let mut m = run.manifest(&name);
    m.input("data", &input).context("hashing input")?;
    run.write_manifest(&name, &m)
}

/// `id,category` rows in dataset order.
fn write_predictions(path: &Path, data: &Dataset, labels: &[Label]) -> Outcome {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["id", "category"]).context("writing predictions")?;
    for (inst, l) in data.instances().iter().zip(labels) {
        w.write_record([inst.id.as_str(), l.name()]).context("writing predictions")?;
    }
    w.flush().context("writing predictions")?;
    info!("wrote {} predictions to {}", labels.len(), path.display());
    Ok(())
}

fn read_predictions(path: &Path) -> anyhow::Result<HashMap<String, Label>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != ["id", "category"] {
        return Err(anyhow!("{}: header must be id,category, found {}", path.display(), header.join(",")));
    }
    let mut out = HashMap::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.with_context(|| format!("{}: row {}", path.display(), i + 2))?;
        let label: Label = rec[1]
            .parse()
            .map_err(|_| anyhow!("{}: row {}: unknown category `{}`", path.display(), i + 2, &rec[1]))?;
        if out.insert(rec[0].to_string(), label).is_some() {
            return Err(anyhow!("{}: row {}: duplicate id `{}`", path.display(), i + 2, &rec[0]));
        }
    }
    Ok(out)
}

fn evaluate(gold: &Path, pred: &Path, out: Option<&Path>) -> Outcome {
    let gold_ds = load_labeled(gold)?;
    let preds = read_predictions(pred)?;
    let golds = gold_ds.labels()?;
    let predicted = gold_ds
        .instances()
        .iter()
        .map(|inst| {
            preds
                .get(&inst.id)
                .copied()
                .ok_or_else(|| anyhow!("{} has no prediction for `{}`", pred.display(), inst.id))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let report = f1_report(&confusion(&golds, &predicted, &Label::ALL)?)?;
    print!("{}", report.to_table());
    if let Some(out) = out {
        let f = fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
        report.write_csv(f).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}
