//! Acceptance suite: one check per criterion, each printed as a PASS/FAIL
//! line with its measured values. Exits nonzero if any check fails.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use promptverify_core::corpus::{generate_synthetic, preprocess_instance, stratified_kfold, Dataset, Label, SyntheticSpec};
use promptverify_core::encoder::{backward, class_logits, forward_recorded, init_params, mlm_logits, OutputGrad};
use promptverify_core::ensemble::{mean_ensemble, snapshot_predict, snapshot_train, stacker_predict_row, train_stacker, StackerConfig};
use promptverify_core::metrics::{confusion, per_class_f1, weighted_f1, ConfusionMatrix};
use promptverify_core::mlm::{apply_masking, pretrain, MaskingConfig, PretrainConfig, Replacement};
use promptverify_core::nn::cross_entropy;
use promptverify_core::optim::{lr_warmup_cosine, lr_warmup_linear, AdamWHyper, Parameters, ScheduleConfig, ScheduleKind};
use promptverify_core::pipeline::{crossval_train, finetune, predict, two_stage_predict_all, FinetuneConfig, ModelSpec, OofMatrix, PredictionVector};
use promptverify_core::prompt::{prompt_vocabulary, refute_filter_train, FilterConfig, PromptTemplate, Verbalizer};
use promptverify_core::rng;
use promptverify_core::tokenizer::{build_vocab, is_reserved, TokenSequence, Vocabulary, CLS, PAD, SEP};
use promptverify_core::train::TrainConfig;
use promptverify_core::{EncoderConfig, EncoderParams};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn main() {
    let checks: [(&str, fn() -> Outcome, Option<Duration>); 10] = [
        ("AC1 masking recipe", ac1_masking, Some(Duration::from_secs(10))),
        ("AC2 scheduler golden values", ac2_schedules, None),
        ("AC3 gradient verification", ac3_gradcheck, Some(Duration::from_secs(60))),
        ("AC4 MLM training progress", ac4_pretrain_progress, Some(Duration::from_secs(300))),
        ("AC5 two-stage end-to-end", ac5_two_stage, Some(Duration::from_secs(600))),
        ("AC6 OOF integrity", ac6_oof, None),
        ("AC7 stacking beats mean", ac7_stacking, Some(Duration::from_secs(60))),
        ("AC8 snapshot mechanics", ac8_snapshots, None),
        ("AC9 metrics oracle", ac9_metrics, None),
        ("AC10 CLI determinism", ac10_determinism, None),
    ];
    let mut failed = 0;
    for (name, check, budget) in checks {
        let start = Instant::now();
        let mut o = check();
        let took = start.elapsed();
        if let Some(b) = budget {
            if took > b {
                o.pass = false;
                o.detail.push_str(&format!("; over time budget {b:?}"));
            }
        }
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} {name}: {} ({:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn synthetic(per_class: usize, seed: u64) -> Dataset {
    generate_synthetic(SyntheticSpec {
        classes: 5,
        per_class,
        vocab_size: 500,
        seed,
    })
    .expect("valid spec")
}

fn vocab_for(ds: &Dataset) -> Vocabulary {
    let texts: Vec<String> = ds.instances().iter().map(|i| preprocess_instance(i, None)).collect();
    prompt_vocabulary(build_vocab(&texts, 10_000, 1).unwrap(), &PromptTemplate::default(), &[])
}

fn train_cfg(kind: ScheduleKind, warmup: usize, peak: f64, steps: usize, batch: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        schedule: ScheduleConfig {
            kind,
            warmup_steps: warmup,
            peak_lr: peak,
            total_steps: steps,
            cycles: 1,
        },
        adamw: AdamWHyper::default(),
        batch_size: batch,
        seed,
    }
}

fn sequence(content: &[u32], max_len: usize) -> TokenSequence {
    let mut ids = vec![CLS];
    ids.extend_from_slice(content);
    ids.push(SEP);
    let real = ids.len();
    ids.resize(max_len, PAD);
    let mut attention_mask = vec![1u8; real];
    attention_mask.resize(max_len, 0);
    TokenSequence {
        ids,
        attention_mask,
        mask_position: None,
    }
}

fn ac1_masking() -> Outcome {
    let cfg = MaskingConfig::default();
    let vocab_size = 120;
    let mut counts: HashMap<Replacement, usize> = HashMap::new();
    let mut selected = 0usize;
    let mut bad_count = 0usize;
    let mut bad_special = 0usize;
    let mut seed = 0u64;
    while selected < 100_000 {
        let mut r = rng::seeded(seed);
        let m = 1 + (seed as usize * 7) % 200;
        seed += 1;
        let content: Vec<u32> = (0..m).map(|_| r.random_range(5..vocab_size as u32)).collect();
        let seq = sequence(&content, m + 8);
        let b = apply_masking(std::slice::from_ref(&seq), &cfg, vocab_size, &mut r).unwrap();
        let expect = ((0.15 * m as f64).round() as usize).max(1);
        if b.positions[0].len() != expect {
            bad_count += 1;
        }
        for &p in &b.positions[0] {
            if is_reserved(seq.ids[p]) || seq.attention_mask[p] == 0 {
                bad_special += 1;
            }
        }
        for k in &b.replacements[0] {
            *counts.entry(*k).or_default() += 1;
        }
        selected += b.positions[0].len();
    }
    let frac = |k| *counts.get(&k).unwrap_or(&0) as f64 / selected as f64;
    let (fm, fr, fk) = (frac(Replacement::Mask), frac(Replacement::Random), frac(Replacement::Keep));
    let pass = bad_count == 0
        && bad_special == 0
        && (fm - 0.8).abs() <= 0.01
        && (fr - 0.1).abs() <= 0.01
        && (fk - 0.1).abs() <= 0.01;
    outcome(
        pass,
        format!(
            "{selected} positions over {seed} sequences; mask/random/keep = {fm:.4}/{fr:.4}/{fk:.4}; count mismatches {bad_count}; specials selected {bad_special}"
        ),
    )
}

fn ac2_schedules() -> Outcome {
    let lin = ScheduleConfig::pretrain_default();
    let cos = ScheduleConfig::finetune_default();
    let cases = [
        ("linear(500)", lr_warmup_linear(500, &lin).unwrap(), 1e-4),
        ("linear(1750)", lr_warmup_linear(1750, &lin).unwrap(), 5e-5),
        ("cosine(100)", lr_warmup_cosine(100, &cos).unwrap(), 5e-6),
        ("cosine(1050)", lr_warmup_cosine(1050, &cos).unwrap(), 2.5e-6),
        ("cosine(2000)", lr_warmup_cosine(2000, &cos).unwrap(), 0.0),
    ];
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for (name, got, want) in cases {
        let err = if want == 0.0 { got.abs() } else { ((got - want) / want).abs() };
        worst = worst.max(err);
        parts.push(format!("{name}={got:e}"));
    }
    outcome(worst <= 1e-12, format!("{}; worst relative error {worst:e}", parts.join(", ")))
}

fn ac3_gradcheck() -> Outcome {
    let config = EncoderConfig {
        vocab_size: 40,
        max_len: 12,
        d_model: 16,
        n_heads: 2,
        n_layers: 2,
        d_ff: 32,
        dropout_rate: 0.0,
        n_classes: 5,
    };
    let mut p = init_params(config, 5).unwrap();
    // Move away from the symmetric initialization.
    for (ti, t) in p.tensors_mut().into_iter().enumerate() {
        for (j, x) in t.iter_mut().enumerate() {
            *x += 0.25 * ((1.7 * j as f64) + ti as f64).sin();
        }
    }
    let seq = sequence(&[9, 14, 4, 22, 4, 8, 31, 17], 12);
    let positions = [3usize, 5, 7];
    let targets = [7usize, 30, 12];
    let loss = |p: &EncoderParams| {
        let cache = forward_recorded(p, &seq, None).unwrap();
        let logits = mlm_logits(p, cache.hidden(), &positions).unwrap();
        let mlm: f64 = targets.iter().enumerate().map(|(r, &t)| cross_entropy(logits.row(r), t).0).sum();
        mlm + cross_entropy(class_logits(p, cache.hidden()).view(), 2).0
    };
    let cache = forward_recorded(&p, &seq, None).unwrap();
    let logits = mlm_logits(&p, cache.hidden(), &positions).unwrap();
    let out = OutputGrad {
        mlm: positions
            .iter()
            .zip(targets)
            .enumerate()
            .map(|(r, (&pos, t))| (pos, cross_entropy(logits.row(r), t).1))
            .collect(),
        class: Some(cross_entropy(class_logits(&p, cache.hidden()).view(), 2).1),
    };
    let mut g = p.zeros_like();
    backward(&p, &cache, &out, &mut g).unwrap();

    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut n = 0usize;
    let mut probe = p.clone();
    for ti in 0..p.tensors().len() {
        for j in 0..p.tensors()[ti].len() {
            let orig = p.tensors()[ti][j];
            probe.tensors_mut()[ti][j] = orig + h;
            let up = loss(&probe);
            probe.tensors_mut()[ti][j] = orig - h;
            let down = loss(&probe);
            probe.tensors_mut()[ti][j] = orig;
            let num = (up - down) / (2.0 * h);
            let a = g.tensors()[ti][j];
            // Below 1e-5 the comparison is effectively absolute; rounding in
            // the difference quotient is about 1e-10 there.
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-5));
            n += 1;
        }
    }
    outcome(worst < 1e-4, format!("{n} scalars, max relative error {worst:.3e} (< 1e-4)"))
}

fn ac4_pretrain_progress() -> Outcome {
    let ds = synthetic(100, 11);
    let vocab = vocab_for(&ds);
    let config = EncoderConfig::tiny(vocab.len(), 32, 5);
    let mut cfg = PretrainConfig::default();
    cfg.train.batch_size = 8;
    // Desk-scale override: the 1e-4 peak suits pretrained models; warmup
    // 500, 3000 steps and linear decay are unchanged.
    cfg.train.schedule.peak_lr = 1e-3;
    let out = pretrain(&ds, &vocab, config, &cfg).unwrap();
    let steps = out.trace.len();
    let first = out.trace[..100].iter().map(|r| r.loss).sum::<f64>() / 100.0;
    let last = out.trace[steps - 100..].iter().map(|r| r.loss).sum::<f64>() / 100.0;
    let drop = 1.0 - last / first;
    outcome(
        steps == 3000 && drop >= 0.10,
        format!("{steps} steps, batch 8, peak lr 1e-3; mean loss first 100 {first:.4}, last 100 {last:.4}, drop {:.1}% (>= 10%)", 100.0 * drop),
    )
}

fn ac5_two_stage() -> Outcome {
    let ds = synthetic(100, 11);
    let vocab = vocab_for(&ds);
    let folds = stratified_kfold(&ds, 5, 0).unwrap();
    let train = ds.subset(&folds.complement(0));
    let test = ds.subset(&folds.members(0));
    let config = EncoderConfig::tiny(vocab.len(), 32, 5);
    let pre = pretrain(
        &train,
        &vocab,
        config,
        &PretrainConfig {
            train: train_cfg(ScheduleKind::WarmupLinear, 50, 1e-3, 500, 16, 0),
            masking: MaskingConfig::default(),
        },
    )
    .unwrap();
    let tc = train_cfg(ScheduleKind::WarmupCosine, 30, 1e-3, 300, 16, 1);
    let verb = Verbalizer::default_for(&vocab).unwrap();
    let filter = refute_filter_train(
        &train,
        pre.params.clone(),
        &vocab,
        &PromptTemplate::default(),
        &verb,
        &FilterConfig {
            train: tc,
            threshold: 0.5,
        },
    )
    .unwrap();
    let train4 = train.filter_labels(|l| l != Label::Refute);
    let four = finetune(pre.params, &vocab, &train4, &Label::NON_REFUTE, &FinetuneConfig { train: tc }).unwrap();
    let preds: Vec<Label> = two_stage_predict_all(&filter.model, &four.model, &test)
        .unwrap()
        .into_iter()
        .map(|(l, _)| l)
        .collect();
    let cm = confusion(&test.labels().unwrap(), &preds, &Label::ALL).unwrap();
    let f1 = per_class_f1(&cm);
    let w = weighted_f1(&cm).unwrap();
    let refute = f1[Label::Refute.index()];
    outcome(
        w >= 0.90 && refute >= 0.95,
        format!(
            "held-out fold of {}: weighted F1 {w:.4} (>= 0.90), Refute F1 {refute:.4} (>= 0.95)",
            test.len()
        ),
    )
}

fn ac6_oof() -> Outcome {
    let ds = synthetic(10, 4);
    let vocab = vocab_for(&ds);
    let folds = stratified_kfold(&ds, 5, 2).unwrap();
    let init = init_params(EncoderConfig::tiny(vocab.len(), 24, 5), 0).unwrap();
    let specs: Vec<ModelSpec> = (0..2)
        .map(|s| ModelSpec {
            name: format!("spec{s}"),
            init: init.clone(),
            finetune: FinetuneConfig {
                train: train_cfg(ScheduleKind::WarmupCosine, 2, 1e-3, 20, 8, s),
            },
        })
        .collect();
    let cv = crossval_train(&ds, &vocab, &folds, &specs, &Label::ALL).unwrap();
    let oof = &cv.oof;
    let ids_match = oof.ids.iter().zip(ds.instances()).all(|(a, b)| *a == b.id) && oof.len() == ds.len();
    let mut leaks = 0;
    let mut mismatched = 0;
    for i in 0..ds.len() {
        for (s, per_fold) in cv.models.iter().enumerate() {
            let producer = &per_fold[oof.folds[i]];
            if producer.train_indices.contains(&i) {
                leaks += 1;
            }
            let again = predict(&producer.model, &ds.instances()[i]).unwrap();
            if again.probs != oof.block(i, s) {
                mismatched += 1;
            }
        }
    }
    let pass = ids_match && leaks == 0 && mismatched == 0 && oof.width() == 10 && oof.values.ncols() == 10;
    outcome(
        pass,
        format!(
            "{} rows x {} columns; rows per spec reproduced by their producer: {}; leaked rows {leaks}",
            oof.len(),
            oof.width(),
            if mismatched == 0 { "all" } else { "NOT all" }
        ),
    )
}

/// Honest model: noisy posterior peaked on the gold class. Adversary:
/// confident on a relabelled class.
fn adversary_rows(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Label>) {
    let mut r = rng::seeded(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let softmax = |z: Vec<f64>| {
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|x| x / s).collect::<Vec<f64>>()
    };
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = r.random_range(0..5);
        let honest = softmax((0..5).map(|c| noise.sample(&mut r) + if c == y { 1.5 } else { 0.0 }).collect());
        let flipped = (y + 2) % 5;
        let adversary = softmax((0..5).map(|c| 0.3 * noise.sample(&mut r) + if c == flipped { 4.0 } else { 0.0 }).collect());
        rows.push(honest.into_iter().chain(adversary).collect());
        labels.push(Label::ALL[y]);
    }
    (rows, labels)
}

fn ac7_stacking() -> Outcome {
    let (train_rows, train_labels) = adversary_rows(2000, 1);
    let (test_rows, test_labels) = adversary_rows(1000, 2);
    let oof = OofMatrix {
        ids: (0..train_rows.len()).map(|i| format!("t{i}")).collect(),
        folds: (0..train_rows.len()).map(|i| i % 5).collect(),
        model_names: vec!["honest".into(), "adversary".into()],
        classes: Label::ALL.to_vec(),
        values: ndarray_from(&train_rows),
    };
    let stacker = train_stacker(&oof, &train_labels, &StackerConfig::default()).unwrap().params;
    let mut stack_ok = 0;
    let mut mean_ok = 0;
    let mut swapped_changes = 0;
    for (row, &y) in test_rows.iter().zip(&test_labels) {
        let p = stacker_predict_row(&stacker, row).unwrap();
        stack_ok += (p.top() == y) as usize;
        let members = [
            PredictionVector::new(Label::ALL.to_vec(), row[..5].to_vec()).unwrap(),
            PredictionVector::new(Label::ALL.to_vec(), row[5..].to_vec()).unwrap(),
        ];
        mean_ok += (mean_ensemble(&members).unwrap().top() == y) as usize;
        let swapped: Vec<f64> = row[5..].iter().chain(&row[..5]).copied().collect();
        if stacker_predict_row(&stacker, &swapped).unwrap().probs != p.probs {
            swapped_changes += 1;
        }
    }
    let n = test_rows.len() as f64;
    let (acc_s, acc_m) = (stack_ok as f64 / n, mean_ok as f64 / n);
    outcome(
        acc_s - acc_m >= 0.10 && swapped_changes == test_rows.len(),
        format!(
            "stacker accuracy {:.1}%, mean accuracy {:.1}%, gap {:.1} points (>= 10); swapping model blocks changes every output: {}",
            100.0 * acc_s,
            100.0 * acc_m,
            100.0 * (acc_s - acc_m),
            swapped_changes == test_rows.len()
        ),
    )
}

fn ndarray_from(rows: &[Vec<f64>]) -> ndarray::Array2<f64> {
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    ndarray::Array2::from_shape_vec((rows.len(), rows[0].len()), flat).unwrap()
}

fn ac8_snapshots() -> Outcome {
    let ds = synthetic(8, 5);
    let vocab = vocab_for(&ds);
    let init = init_params(EncoderConfig::tiny(vocab.len(), 24, 5), 0).unwrap();
    let mut train = train_cfg(ScheduleKind::Cyclic, 0, 1e-3, 30, 8, 3);
    train.schedule.cycles = 3;
    let cfg = FinetuneConfig { train };
    let snap = snapshot_train(init.clone(), &vocab, &ds, &Label::ALL, &cfg).unwrap();
    let steps: Vec<usize> = snap.set.snapshots.iter().map(|s| s.step).collect();
    let cycles: Vec<usize> = snap.set.snapshots.iter().map(|s| s.cycle).collect();
    // A single pass: the last snapshot is the end state of one ordinary run
    // with the same schedule.
    let single = finetune(init, &vocab, &ds, &Label::ALL, &cfg).unwrap();
    let last_is_final = snap.set.snapshots.last().map(|s| &s.model.params) == Some(&single.model.params);

    let mut bitwise = true;
    let mut max_sum_err = 0.0f64;
    for inst in ds.instances() {
        let ens = snapshot_predict(&snap.set, inst).unwrap();
        let members: Vec<PredictionVector> = snap.set.snapshots.iter().map(|s| predict(&s.model, inst).unwrap()).collect();
        // Oracle: per class, sum the member values in ascending order, then
        // divide by the member count.
        for c in 0..5 {
            let mut col: Vec<f64> = members.iter().map(|m| m.probs[c]).collect();
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut sum = 0.0;
            for v in col {
                sum += v;
            }
            if (sum / members.len() as f64).to_bits() != ens.probs[c].to_bits() {
                bitwise = false;
            }
        }
        max_sum_err = max_sum_err.max((ens.probs.iter().sum::<f64>() - 1.0).abs());
    }
    let pass = steps == [10, 20, 30] && cycles == [1, 2, 3] && snap.trace.len() == 30 && last_is_final && bitwise && max_sum_err < 1e-9;
    outcome(
        pass,
        format!(
            "captured at steps {steps:?} of {} in one pass; last snapshot equals plain run: {last_is_final}; ensemble bitwise equal to oracle mean: {bitwise}",
            snap.trace.len()
        ),
    )
}

fn ac9_metrics() -> Outcome {
    let cm = ConfusionMatrix::from_counts(
        vec![Label::SupportMultimodal, Label::SupportText],
        vec![vec![8, 2], vec![3, 7]],
    )
    .unwrap();
    let f = per_class_f1(&cm);
    let w = weighted_f1(&cm).unwrap();
    // Hand computation: P0 = 8/11, R0 = 8/10; P1 = 7/9, R1 = 7/10.
    let f0 = 2.0 * (8.0 / 11.0) * (8.0 / 10.0) / (8.0 / 11.0 + 8.0 / 10.0);
    let f1 = 2.0 * (7.0 / 9.0) * (7.0 / 10.0) / (7.0 / 9.0 + 7.0 / 10.0);
    let want_w = 0.5 * f0 + 0.5 * f1;
    let pass = (f[0] - 16.0 / 21.0).abs() < 1e-9
        && (f[0] - f0).abs() < 1e-9
        && (f[1] - 14.0 / 19.0).abs() < 1e-9
        && (f[1] - f1).abs() < 1e-9
        && (w - want_w).abs() < 1e-9
        && (w - 0.7494).abs() < 5e-5;
    outcome(pass, format!("F1 = [{:.6}, {:.6}], weighted {w:.6}", f[0], f[1]))
}

const WORKFLOW_CONFIG: &str = "\
[paths]
train = train.csv
test = test.csv
output_dir = out

[encoder]
max_len = 32
d_model = 16
n_heads = 2
n_layers = 1
d_ff = 32
dropout = 0.1

[pretrain]
steps = 60
warmup = 10
peak_lr = 1e-3
batch_size = 8

[finetune]
steps = 20
warmup = 4
peak_lr = 1e-3
batch_size = 8
models = 2

[prompt]
steps = 30
warmup = 5
peak_lr = 1e-3
batch_size = 8

[stacker]
steps = 100
warmup = 10
";

fn cli(args: &[&str]) -> i32 {
    let mut argv = vec!["promptverify"];
    argv.extend_from_slice(args);
    promptverify_cli::run(argv)
}

fn run_workflow(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let cfg = p("run.cfg");
    fs::write(&cfg, WORKFLOW_CONFIG).map_err(|e| e.to_string())?;
    let (train, test) = (p("train.csv"), p("test.csv"));
    let steps: [Vec<&str>; 9] = [
        vec!["synth", "--out", &train, "--per-class", "10", "--seed", "1"],
        vec!["synth", "--out", &test, "--per-class", "4", "--seed", "2"],
        vec!["pretrain", "--config", &cfg],
        vec!["finetune", "--config", &cfg],
        vec!["finetune", "--config", &cfg, "--stage", "four"],
        vec!["prompt-filter", "train", "--config", &cfg],
        vec!["ensemble", "stacker", "--config", &cfg],
        vec!["predict", "--config", &cfg, "--method", "1"],
        vec!["predict", "--config", &cfg, "--method", "2"],
    ];
    for args in &steps {
        let code = cli(args);
        if code != 0 {
            return Err(format!("`{}` exited with {code}", args.join(" ")));
        }
    }
    ["predictions-method1.csv", "predictions-method2.csv", "manifest-predict-method1.txt", "manifest-predict-method2.txt"]
        .iter()
        .map(|f| {
            fs::read(dir.join("out").join(f))
                .map(|b| (f.to_string(), b))
                .map_err(|e| e.to_string())
        })
        .collect()
}

fn ac10_determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    match (run_workflow(a.path()), run_workflow(b.path())) {
        (Ok(x), Ok(y)) => {
            let same: Vec<bool> = x.iter().zip(&y).map(|(p, q)| p == q).collect();
            let rows = x[0].1.iter().filter(|&&c| c == b'\n').count() - 1;
            outcome(
                same.iter().all(|&s| s),
                format!(
                    "full workflow run twice in separate directories; manifests identical: {}; method 1 and 2 prediction CSVs ({rows} rows each) byte-identical: {}",
                    same[2] && same[3],
                    same[0] && same[1]
                ),
            )
        }
        (Err(e), _) | (_, Err(e)) => outcome(false, e),
    }
}
