//! Claim records, CSV ingestion, preprocessing, stratified folds and a
//! synthetic corpus generator.
//!
//! Dataset files are UTF-8 CSV with the fixed header
//! `id,claim,claim_ocr,document,document_ocr,category`; the `category` column
//! may be absent in unlabeled (test) files.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;

/// Column names of the dataset CSV, in order.
pub const CSV_COLUMNS: [&str; 6] = ["id", "claim", "claim_ocr", "document", "document_ocr", "category"];

/// The five verification categories, indexed in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    SupportMultimodal = 0,
    SupportText = 1,
    InsufficientMultimodal = 2,
    InsufficientText = 3,
    Refute = 4,
}

impl Label {
    pub const ALL: [Label; 5] = [
        Label::SupportMultimodal,
        Label::SupportText,
        Label::InsufficientMultimodal,
        Label::InsufficientText,
        Label::Refute,
    ];

    /// The four classes left once refuted claims are filtered out.
    pub const NON_REFUTE: [Label; 4] = [
        Label::SupportMultimodal,
        Label::SupportText,
        Label::InsufficientMultimodal,
        Label::InsufficientText,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Label> {
        Label::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::SupportMultimodal => "Support_Multimodal",
            Label::SupportText => "Support_Text",
            Label::InsufficientMultimodal => "Insufficient_Multimodal",
            Label::InsufficientText => "Insufficient_Text",
            Label::Refute => "Refute",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Label {
    type Err = Error;

    /// Accepts the canonical names (`Support_Text`) as well as hyphenated or
    /// run-together spellings, case-insensitively.
    fn from_str(s: &str) -> Result<Label> {
        let key: String = s
            .trim()
            .chars()
            .filter(|c| !matches!(c, '_' | '-' | ' '))
            .flat_map(char::to_lowercase)
            .collect();
        let label = match key.as_str() {
            "supportmultimodal" => Label::SupportMultimodal,
            "supporttext" => Label::SupportText,
            "insufficientmultimodal" => Label::InsufficientMultimodal,
            "insufficienttext" => Label::InsufficientText,
            "refute" => Label::Refute,
            _ => {
                return Err(Error::UnknownCategory {
                    name: s.to_string(),
                    row: None,
                })
            }
        };
        Ok(label)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub id: String,
    pub claim_text: String,
    pub claim_ocr_text: String,
    pub document_text: String,
    pub document_ocr_text: String,
    pub label: Option<Label>,
}

impl Instance {
    pub fn new(id: impl Into<String>, claim_text: impl Into<String>) -> Self {
        Instance {
            id: id.into(),
            claim_text: claim_text.into(),
            claim_ocr_text: String::new(),
            document_text: String::new(),
            document_ocr_text: String::new(),
            label: None,
        }
    }

    pub fn with_ocr(mut self, ocr: impl Into<String>) -> Self {
        self.claim_ocr_text = ocr.into();
        self
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.label = Some(label);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
    Synthetic,
}

/// An ordered, validated collection of instances.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    instances: Vec<Instance>,
    split: Split,
}

impl Dataset {
    /// Validates id uniqueness, nonempty ids and claims, and all-or-nothing
    /// labeling.
    pub fn new(instances: Vec<Instance>, split: Split) -> Result<Dataset> {
        let mut seen = HashSet::with_capacity(instances.len());
        for inst in &instances {
            if inst.id.is_empty() {
                return Err(Error::InvalidConfig("instance with empty id".into()));
            }
            if inst.claim_text.trim().is_empty() {
                return Err(Error::InvalidConfig(format!("instance `{}` has empty claim", inst.id)));
            }
            if !seen.insert(inst.id.as_str()) {
                return Err(Error::DuplicateId(inst.id.clone()));
            }
        }
        if instances.iter().any(|i| i.label.is_some()) {
            if let Some(bad) = instances.iter().find(|i| i.label.is_none()) {
                return Err(Error::PartiallyLabeled(bad.id.clone()));
            }
        }
        Ok(Dataset { instances, split })
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        !self.instances.is_empty() && self.instances.iter().all(|i| i.label.is_some())
    }

    /// Gold labels, or an error naming the first unlabeled instance.
    pub fn labels(&self) -> Result<Vec<Label>> {
        self.instances
            .iter()
            .map(|i| i.label.ok_or_else(|| Error::Unlabeled(i.id.clone())))
            .collect()
    }

    /// New dataset holding the instances at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            instances: indices.iter().map(|&i| self.instances[i].clone()).collect(),
            split: self.split,
        }
    }

    /// Instances whose label satisfies `keep`.
    pub fn filter_labels(&self, keep: impl Fn(Label) -> bool) -> Dataset {
        Dataset {
            instances: self
                .instances
                .iter()
                .filter(|i| i.label.is_some_and(&keep))
                .cloned()
                .collect(),
            split: self.split,
        }
    }
}

/// Reads a dataset CSV. With `has_labels`, the `category` column is required
/// and parsed; otherwise it is ignored when present.
pub fn load_dataset(path: &Path, has_labels: bool, split: Split) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(file, path, has_labels, split)
}

pub fn read_dataset<R: std::io::Read>(reader: R, path: &Path, has_labels: bool, split: Split) -> Result<Dataset> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let found: Vec<&str> = headers.iter().collect();
    let with_category = found.as_slice() == CSV_COLUMNS;
    let without_category = found.as_slice() == &CSV_COLUMNS[..5];
    if !(with_category || (without_category && !has_labels)) {
        let expected = if has_labels {
            CSV_COLUMNS.join(",")
        } else {
            format!("{} (category optional)", CSV_COLUMNS.join(","))
        };
        return Err(Error::Header {
            path: path.to_path_buf(),
            expected,
            found: found.join(","),
        });
    }

    let mut instances = Vec::new();
    for record in rdr.records() {
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                let row = e.position().map(|p| p.line()).unwrap_or(0);
                return Err(Error::MalformedRow {
                    path: path.to_path_buf(),
                    row,
                    message: e.to_string(),
                });
            }
        };
        let row = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| record.get(i).unwrap_or("").to_string();
        let id = field(0);
        let claim = field(1);
        if id.is_empty() || claim.trim().is_empty() {
            return Err(Error::MalformedRow {
                path: path.to_path_buf(),
                row,
                message: "id and claim must be nonempty".into(),
            });
        }
        let label = if has_labels {
            let name = field(5);
            Some(name.parse::<Label>().map_err(|_| Error::UnknownCategory { name, row: Some(row) })?)
        } else {
            None
        };
        instances.push(Instance {
            id,
            claim_text: claim,
            claim_ocr_text: field(2),
            document_text: field(3),
            document_ocr_text: field(4),
            label,
        });
    }
    Dataset::new(instances, split)
}

/// Writes the dataset in the ingestion format. The `category` column is
/// emitted only for labeled datasets.
pub fn write_dataset<W: std::io::Write>(dataset: &Dataset, writer: W) -> std::result::Result<(), csv::Error> {
    let labeled = dataset.is_labeled();
    let mut wtr = csv::Writer::from_writer(writer);
    let ncols = if labeled { 6 } else { 5 };
    wtr.write_record(&CSV_COLUMNS[..ncols])?;
    for inst in dataset.instances() {
        let mut row = vec![
            inst.id.as_str(),
            inst.claim_text.as_str(),
            inst.claim_ocr_text.as_str(),
            inst.document_text.as_str(),
            inst.document_ocr_text.as_str(),
        ];
        if labeled {
            row.push(inst.label.map(Label::name).unwrap_or(""));
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Model input text: the claim followed by its OCR text, joined by a single
/// space. Document text is never included.
pub fn preprocess_instance(instance: &Instance, max_chars: Option<usize>) -> String {
    let claim = instance.claim_text.trim();
    let ocr = instance.claim_ocr_text.trim();
    let joined = if ocr.is_empty() {
        claim.to_string()
    } else {
        format!("{claim} {ocr}")
    };
    match max_chars {
        Some(n) => joined.chars().take(n).collect(),
        None => joined,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    k: usize,
    assignment: Vec<usize>,
    seed: u64,
}

impl FoldAssignment {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Fold index of instance `i`.
    pub fn fold_of(&self, i: usize) -> usize {
        self.assignment[i]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    /// Instance indices in fold `f`, ascending.
    pub fn members(&self, f: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == f).collect()
    }

    /// Instance indices outside fold `f`, ascending.
    pub fn complement(&self, f: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] != f).collect()
    }

    /// The assignment of the instances at `indices`, in that order, keeping
    /// their fold numbers. Pairs with [`Dataset::subset`].
    pub fn restrict(&self, indices: &[usize]) -> FoldAssignment {
        FoldAssignment {
            k: self.k,
            assignment: indices.iter().map(|&i| self.assignment[i]).collect(),
            seed: self.seed,
        }
    }
}

/// Stratified k-fold assignment.
///
/// Each class's indices are shuffled with the seeded generator and dealt
/// round-robin across folds; the dealing position carries over from one class
/// to the next so total fold sizes also differ by at most one.
pub fn stratified_kfold(dataset: &Dataset, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::InvalidFoldCount(k));
    }
    let labels = dataset.labels()?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); Label::ALL.len()];
    for (i, l) in labels.iter().enumerate() {
        by_class[l.index()].push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if !members.is_empty() && members.len() < k {
            return Err(Error::ClassTooSmall {
                label: Label::ALL[c],
                count: members.len(),
                k,
            });
        }
    }

    let mut rng = rng::seeded(seed);
    let mut assignment = vec![0usize; labels.len()];
    let mut next = 0usize;
    for members in by_class.iter_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            assignment[i] = next;
            next = (next + 1) % k;
        }
    }
    Ok(FoldAssignment { k, assignment, seed })
}

/// Parameters of the synthetic corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

/// Words inserted into refuted claims.
pub const NEGATION_MARKERS: [&str; 4] = ["not", "never", "hoax", "debunked"];

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

fn syllable(i: usize) -> [u8; 2] {
    [CONSONANTS[i % CONSONANTS.len()], VOWELS[(i / CONSONANTS.len()) % VOWELS.len()]]
}

/// Deterministic pseudo-word for index `i`; distinct for distinct `i`.
pub fn synthetic_word(i: usize) -> String {
    let n = CONSONANTS.len() * VOWELS.len();
    let mut out = Vec::with_capacity(6);
    out.extend_from_slice(&syllable(i % n));
    out.extend_from_slice(&syllable((i / n) % n));
    if i >= n * n {
        out.extend_from_slice(&syllable(i / (n * n) - 1));
    }
    String::from_utf8(out).expect("ascii")
}

/// Generates a labeled corpus in which every class draws keywords from its
/// own disjoint pool, mixed into shared filler words. Refuted claims also
/// carry negation markers.
///
/// Word pools depend only on `vocab_size` and `classes`, so corpora generated
/// with different seeds share a vocabulary and can serve as train/test pairs.
pub fn generate_synthetic(spec: SyntheticSpec) -> Result<Dataset> {
    if spec.classes == 0 || spec.per_class == 0 || spec.vocab_size == 0 {
        return Err(Error::InvalidConfig("synthetic corpus counts must be positive".into()));
    }
    if spec.classes > Label::ALL.len() {
        return Err(Error::InvalidConfig(format!("at most {} classes", Label::ALL.len())));
    }
    let per_pool = spec.vocab_size / (2 * spec.classes);
    if per_pool < 2 {
        return Err(Error::VocabTooSmall {
            vocab_size: spec.vocab_size,
            classes: spec.classes,
        });
    }
    let keyword_pool = |c: usize| (c * per_pool..(c + 1) * per_pool).map(synthetic_word).collect::<Vec<_>>();
    let filler: Vec<String> = (spec.classes * per_pool..spec.vocab_size).map(synthetic_word).collect();
    let pools: Vec<Vec<String>> = (0..spec.classes).map(keyword_pool).collect();

    let mut rng = rng::seeded(spec.seed);
    let mut drafts = Vec::with_capacity(spec.classes * spec.per_class);
    for (c, pool) in pools.iter().enumerate() {
        let label = Label::from_index(c).expect("class count checked");
        for _ in 0..spec.per_class {
            let mut words: Vec<&str> = Vec::new();
            for _ in 0..3 {
                words.push(&pool[rng.random_range(0..pool.len())]);
            }
            for _ in 0..5 {
                words.push(&filler[rng.random_range(0..filler.len())]);
            }
            if label == Label::Refute {
                let n = rng.random_range(1..=2);
                for _ in 0..n {
                    words.push(NEGATION_MARKERS[rng.random_range(0..NEGATION_MARKERS.len())]);
                }
            }
            words.shuffle(&mut rng);
            let claim = words.join(" ");

            let ocr = if rng.random_bool(0.5) {
                let mut w = vec![pool[rng.random_range(0..pool.len())].as_str()];
                w.push(&filler[rng.random_range(0..filler.len())]);
                w.push(&filler[rng.random_range(0..filler.len())]);
                w.shuffle(&mut rng);
                w.join(" ")
            } else {
                String::new()
            };
            let document: Vec<&str> = (0..8).map(|_| filler[rng.random_range(0..filler.len())].as_str()).collect();
            drafts.push((claim, ocr, document.join(" "), label));
        }
    }
    drafts.shuffle(&mut rng);

    let instances = drafts
        .into_iter()
        .enumerate()
        .map(|(i, (claim, ocr, document, label))| Instance {
            id: format!("syn-{i:05}"),
            claim_text: claim,
            claim_ocr_text: ocr,
            document_text: document,
            document_ocr_text: String::new(),
            label: Some(label),
        })
        .collect();
    Dataset::new(instances, Split::Synthetic)
}
