//! Run configuration: `key = value` lines grouped under `[section]` headers.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional; missing keys take the defaults below. Unknown sections, unknown
//! keys and repeated keys are errors. Relative paths resolve against the
//! directory holding the config file.
//!
//! ```text
//! [paths]       train, test, output_dir
//! [vocab]       max_size, min_freq
//! [encoder]     max_len, d_model, n_heads, n_layers, d_ff, dropout
//! [masking]     select_fraction, mask_fraction, random_fraction, keep_fraction
//! [pretrain]    steps, warmup, peak_lr, batch_size, weight_decay, seed
//! [finetune]    steps, warmup, peak_lr, batch_size, weight_decay, seed,
//!               folds, fold_seed, models
//! [prompt]      template, negative_words, positive_words, threshold,
//!               steps, warmup, peak_lr, batch_size, weight_decay, seed
//! [snapshot]    steps, cycles, peak_lr, batch_size, weight_decay, seed
//! [stacker]     hidden1, hidden2, steps, warmup, peak_lr, batch_size,
//!               weight_decay, seed
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use promptverify_core::ensemble::StackerConfig;
use promptverify_core::mlm::MaskingConfig;
use promptverify_core::optim::{ScheduleConfig, ScheduleKind};
use promptverify_core::prompt::{DEFAULT_NEGATIVE_WORDS, DEFAULT_POSITIVE_WORDS, DEFAULT_TEMPLATE};
use promptverify_core::train::TrainConfig;
use promptverify_core::EncoderConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

fn err(line: usize, message: impl Into<String>) -> ConfigError {
    ConfigError {
        line: Some(line),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSettings {
    pub max_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
}

impl EncoderSettings {
    pub fn config(&self, vocab_size: usize, n_classes: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            max_len: self.max_len,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            dropout_rate: self.dropout,
            n_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneSettings {
    pub train: TrainConfig,
    pub folds: usize,
    pub fold_seed: u64,
    /// Number of base models; model `i` finetunes with seed `train.seed + i`.
    pub models: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSettings {
    pub template: String,
    pub negative_words: Vec<String>,
    pub positive_words: Vec<String>,
    pub threshold: f64,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub paths: Paths,
    pub vocab_max_size: usize,
    pub vocab_min_freq: usize,
    pub encoder: EncoderSettings,
    pub masking: MaskingConfig,
    pub pretrain: TrainConfig,
    pub finetune: FinetuneSettings,
    pub prompt: PromptSettings,
    pub snapshot: TrainConfig,
    pub stacker: StackerConfig,
}

fn train_config(kind: ScheduleKind, warmup: usize, peak: f64, steps: usize, batch: usize) -> TrainConfig {
    TrainConfig {
        schedule: ScheduleConfig {
            kind,
            warmup_steps: warmup,
            peak_lr: peak,
            total_steps: steps,
            cycles: 1,
        },
        adamw: Default::default(),
        batch_size: batch,
        seed: 0,
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let finetune = train_config(ScheduleKind::WarmupCosine, 100, 5e-6, 2000, 32);
        let mut snapshot = train_config(ScheduleKind::Cyclic, 0, 5e-6, 2000, 32);
        snapshot.schedule.cycles = 4;
        RunConfig {
            paths: Paths {
                train: None,
                test: None,
                output_dir: PathBuf::from("run"),
            },
            vocab_max_size: 30_000,
            vocab_min_freq: 1,
            encoder: EncoderSettings {
                max_len: 256,
                d_model: 64,
                n_heads: 4,
                n_layers: 2,
                d_ff: 256,
                dropout: 0.1,
            },
            masking: MaskingConfig::default(),
            pretrain: train_config(ScheduleKind::WarmupLinear, 500, 1e-4, 3000, 64),
            finetune: FinetuneSettings {
                train: finetune,
                folds: 5,
                fold_seed: 0,
                models: 1,
            },
            prompt: PromptSettings {
                template: DEFAULT_TEMPLATE.to_string(),
                negative_words: DEFAULT_NEGATIVE_WORDS.iter().map(|s| s.to_string()).collect(),
                positive_words: DEFAULT_POSITIVE_WORDS.iter().map(|s| s.to_string()).collect(),
                threshold: 0.5,
                train: finetune,
            },
            snapshot,
            stacker: StackerConfig::default(),
        }
    }
}

struct Entry {
    value: String,
    line: usize,
    used: bool,
}

/// Raw entries of one section, consumed key by key.
struct Section {
    name: String,
    entries: BTreeMap<String, Entry>,
}

impl Section {
    fn take<T: FromStr>(&mut self, key: &str, target: &mut T) -> Result<(), ConfigError> {
        if let Some(e) = self.entries.get_mut(key) {
            e.used = true;
            *target = e
                .value
                .parse()
                .map_err(|_| err(e.line, format!("invalid value `{}` for {}.{key}", e.value, self.name)))?;
        }
        Ok(())
    }

    fn take_path(&mut self, key: &str, base: &Path, target: &mut PathBuf) {
        if let Some(e) = self.entries.get_mut(key) {
            e.used = true;
            *target = base.join(&e.value);
        }
    }

    fn take_list(&mut self, key: &str, target: &mut Vec<String>) {
        if let Some(e) = self.entries.get_mut(key) {
            e.used = true;
            *target = e
                .value
                .split(',')
                .map(|w| w.trim().to_string())
                .filter(|w| !w.is_empty())
                .collect();
        }
    }

    fn take_train(&mut self, t: &mut TrainConfig) -> Result<(), ConfigError> {
        self.take("steps", &mut t.schedule.total_steps)?;
        self.take("warmup", &mut t.schedule.warmup_steps)?;
        self.take("peak_lr", &mut t.schedule.peak_lr)?;
        self.take("batch_size", &mut t.batch_size)?;
        self.take("weight_decay", &mut t.adamw.weight_decay)?;
        self.take("seed", &mut t.seed)
    }

    fn finish(self) -> Result<(), ConfigError> {
        match self.entries.into_iter().filter(|(_, e)| !e.used).min_by_key(|(_, e)| e.line) {
            Some((k, e)) => Err(err(e.line, format!("unknown key `{k}` in [{}]", self.name))),
            None => Ok(()),
        }
    }
}

const SECTIONS: [&str; 9] = [
    "paths", "vocab", "encoder", "masking", "pretrain", "finetune", "prompt", "snapshot", "stacker",
];

fn split_sections(text: &str) -> Result<BTreeMap<String, Section>, ConfigError> {
    let mut sections: BTreeMap<String, Section> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let t = raw.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        if let Some(name) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            let name = name.trim();
            if !SECTIONS.contains(&name) {
                return Err(err(line, format!("unknown section [{name}]")));
            }
            if sections.contains_key(name) {
                return Err(err(line, format!("section [{name}] appears twice")));
            }
            sections.insert(
                name.to_string(),
                Section {
                    name: name.to_string(),
                    entries: BTreeMap::new(),
                },
            );
            current = Some(name.to_string());
            continue;
        }
        let (k, v) = t.split_once('=').ok_or_else(|| err(line, format!("expected key = value, got `{t}`")))?;
        let section = current
            .as_ref()
            .ok_or_else(|| err(line, "key outside of any [section]"))?;
        let entries = &mut sections.get_mut(section).expect("section inserted").entries;
        let key = k.trim().to_string();
        if let Some(prev) = entries.get(&key) {
            return Err(err(line, format!("duplicate key `{key}` (first set on line {})", prev.line)));
        }
        entries.insert(
            key,
            Entry {
                value: v.trim().to_string(),
                line,
                used: false,
            },
        );
    }
    Ok(sections)
}

/// Parses config text; `base` anchors relative paths.
pub fn parse_config(text: &str, base: &Path) -> Result<RunConfig, ConfigError> {
    let mut sections = split_sections(text)?;
    let mut cfg = RunConfig {
        paths: Paths {
            output_dir: base.join("run"),
            ..RunConfig::default().paths
        },
        ..RunConfig::default()
    };
    let mut section = |name: &str| {
        sections.remove(name).unwrap_or(Section {
            name: name.to_string(),
            entries: BTreeMap::new(),
        })
    };

    let mut s = section("paths");
    let mut p = PathBuf::new();
    if s.entries.contains_key("train") {
        s.take_path("train", base, &mut p);
        cfg.paths.train = Some(p.clone());
    }
    if s.entries.contains_key("test") {
        s.take_path("test", base, &mut p);
        cfg.paths.test = Some(p.clone());
    }
    s.take_path("output_dir", base, &mut cfg.paths.output_dir);
    s.finish()?;

    let mut s = section("vocab");
    s.take("max_size", &mut cfg.vocab_max_size)?;
    s.take("min_freq", &mut cfg.vocab_min_freq)?;
    s.finish()?;

    let mut s = section("encoder");
    let e = &mut cfg.encoder;
    s.take("max_len", &mut e.max_len)?;
    s.take("d_model", &mut e.d_model)?;
    s.take("n_heads", &mut e.n_heads)?;
    s.take("n_layers", &mut e.n_layers)?;
    s.take("d_ff", &mut e.d_ff)?;
    s.take("dropout", &mut e.dropout)?;
    s.finish()?;

    let mut s = section("masking");
    let m = &mut cfg.masking;
    s.take("select_fraction", &mut m.select_fraction)?;
    s.take("mask_fraction", &mut m.mask_fraction)?;
    s.take("random_fraction", &mut m.random_fraction)?;
    s.take("keep_fraction", &mut m.keep_fraction)?;
    s.finish()?;

    let mut s = section("pretrain");
    s.take_train(&mut cfg.pretrain)?;
    s.finish()?;

    let mut s = section("finetune");
    s.take_train(&mut cfg.finetune.train)?;
    s.take("folds", &mut cfg.finetune.folds)?;
    s.take("fold_seed", &mut cfg.finetune.fold_seed)?;
    s.take("models", &mut cfg.finetune.models)?;
    s.finish()?;

    let mut s = section("prompt");
    s.take("template", &mut cfg.prompt.template)?;
    s.take_list("negative_words", &mut cfg.prompt.negative_words);
    s.take_list("positive_words", &mut cfg.prompt.positive_words);
    s.take("threshold", &mut cfg.prompt.threshold)?;
    s.take_train(&mut cfg.prompt.train)?;
    s.finish()?;

    let mut s = section("snapshot");
    s.take_train(&mut cfg.snapshot)?;
    s.take("cycles", &mut cfg.snapshot.schedule.cycles)?;
    s.finish()?;

    let mut s = section("stacker");
    s.take("hidden1", &mut cfg.stacker.hidden.0)?;
    s.take("hidden2", &mut cfg.stacker.hidden.1)?;
    s.take_train(&mut cfg.stacker.train)?;
    s.finish()?;

    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig) -> Result<(), ConfigError> {
    let whole = |m: String| ConfigError { line: None, message: m };
    for (name, t) in [
        ("pretrain", &cfg.pretrain),
        ("finetune", &cfg.finetune.train),
        ("prompt", &cfg.prompt.train),
        ("snapshot", &cfg.snapshot),
        ("stacker", &cfg.stacker.train),
    ] {
        t.validate().map_err(|e| whole(format!("[{name}]: {e}")))?;
    }
    cfg.masking.validate().map_err(|e| whole(format!("[masking]: {e}")))?;
    cfg.encoder
        .config(10, 5)
        .validate()
        .map_err(|e| whole(format!("[encoder]: {e}")))?;
    if cfg.finetune.models == 0 {
        return Err(whole("[finetune]: models must be at least 1".into()));
    }
    if cfg.snapshot.schedule.cycles < 2 {
        return Err(whole("[snapshot]: cycles must be at least 2".into()));
    }
    Ok(())
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
        line: None,
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, base)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        parse_config(text, Path::new("/base"))
    }

    #[test]
    fn empty_config_gives_defaults() {
        let c = parse("").unwrap();
        assert_eq!(c.pretrain.schedule.peak_lr, 1e-4);
        assert_eq!(c.pretrain.schedule.warmup_steps, 500);
        assert_eq!(c.pretrain.schedule.total_steps, 3000);
        assert_eq!(c.pretrain.batch_size, 64);
        assert_eq!(c.finetune.train.schedule.total_steps, 2000);
        assert_eq!(c.finetune.train.schedule.peak_lr, 5e-6);
        assert_eq!(c.finetune.train.batch_size, 32);
        assert_eq!(c.finetune.folds, 5);
        assert_eq!(c.encoder.max_len, 256);
        assert_eq!(c.stacker.hidden, (64, 32));
        assert_eq!(c.paths.output_dir, PathBuf::from("/base/run"));
    }

    #[test]
    fn values_and_paths() {
        let c = parse(
            "# comment\n[pretrain]\npeak_lr = 2e-4\nwarmup = 50\n\n[paths]\ntrain = data/t.csv\n[prompt]\nnegative_words = no, wrong\n",
        )
        .unwrap();
        assert_eq!(c.pretrain.schedule.peak_lr, 2e-4);
        assert_eq!(c.pretrain.schedule.warmup_steps, 50);
        assert_eq!(c.paths.train, Some(PathBuf::from("/base/data/t.csv")));
        assert_eq!(c.prompt.negative_words, vec!["no", "wrong"]);
    }

    #[test]
    fn errors_name_lines() {
        let e = parse("[pretrain]\nsteps = 10\nsteps = 20\n").unwrap_err();
        assert_eq!(e.line, Some(3));
        assert!(e.message.contains("duplicate"));
        let e = parse("[pretrain]\nstep = 10\n").unwrap_err();
        assert_eq!(e.line, Some(2));
        assert!(e.message.contains("unknown key"));
        let e = parse("[bogus]\n").unwrap_err();
        assert_eq!(e.line, Some(1));
        let e = parse("steps = 1\n").unwrap_err();
        assert_eq!(e.line, Some(1));
        let e = parse("[pretrain]\nsteps = many\n").unwrap_err();
        assert_eq!(e.line, Some(2));
        assert!(parse("[snapshot]\ncycles = 1\n").is_err());
    }
}
