//! Dataset ingestion, tokenization and labeled/unlabeled splitting.

mod synth;
mod vocab;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub use synth::{default_grammar, disjoint_grammar, synth_grammar, ClassGrammar};
pub use vocab::{tokenize, Vocabulary, BOS, DEFAULT_MAX_LEN, EOS, NUM_SPECIALS, PAD, SPECIAL_TOKENS, UNK};

/// How a line of a labeled text file carries its label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelFormat {
    /// `LABEL<TAB>text`
    Tsv,
    /// `COARSE:fine text`, keeping the coarse label.
    TrecCoarse,
    /// `COARSE:fine text`, keeping the full `COARSE:fine` label.
    TrecFine,
}

impl FromStr for LabelFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(LabelFormat::Tsv),
            "trec_coarse" => Ok(LabelFormat::TrecCoarse),
            "trec_fine" => Ok(LabelFormat::TrecFine),
            other => Err(Error::InvalidArgument(format!(
                "unknown label format {other:?} (expected tsv, trec_coarse, trec_fine)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextEncoding {
    Utf8,
    Latin1,
    /// UTF-8, falling back to Latin-1 when the bytes are not valid UTF-8.
    #[default]
    Auto,
}

/// Label names in first-seen order. Once frozen, unseen labels are errors.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelMap {
    names: Vec<String>,
    index: HashMap<String, usize>,
    frozen: bool,
}

impl LabelMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names(names: impl IntoIterator<Item = String>) -> Self {
        let mut map = Self::new();
        for n in names {
            map.get_or_insert(&n);
        }
        map.freeze();
        map
    }

    fn get_or_insert(&mut self, label: &str) -> Option<usize> {
        if let Some(&i) = self.index.get(label) {
            return Some(i);
        }
        if self.frozen {
            return None;
        }
        let i = self.names.len();
        self.names.push(label.to_string());
        self.index.insert(label.to_string(), i);
        Some(i)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, i: usize) -> Option<&str> {
        self.names.get(i).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }
}

/// A raw text with its class index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledText {
    pub text: String,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    /// Position in the originating file or corpus.
    pub id: usize,
    pub text: String,
    /// Never contains BOS or interior PAD.
    pub tokens: Vec<usize>,
    pub label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub labeled: Vec<Example>,
    pub unlabeled: Vec<Example>,
    pub test: Vec<Example>,
    pub k: usize,
}

impl DatasetSplit {
    /// Labeled followed by unlabeled examples, i.e. all real training text.
    pub fn real(&self) -> impl Iterator<Item = &Example> {
        self.labeled.iter().chain(&self.unlabeled)
    }

    /// Audit manifest, one `<id>\t<L|U|T>` line per example.
    pub fn manifest(&self) -> String {
        let mut s = String::new();
        for (tag, set) in [("L", &self.labeled), ("U", &self.unlabeled), ("T", &self.test)] {
            for ex in set {
                let _ = writeln!(s, "{}\t{}", ex.id, tag);
            }
        }
        s
    }
}

pub fn decode_bytes(bytes: &[u8], encoding: TextEncoding, path: &Path) -> Result<String> {
    let latin1 = |b: &[u8]| b.iter().map(|&c| c as char).collect::<String>();
    match encoding {
        TextEncoding::Latin1 => Ok(latin1(bytes)),
        TextEncoding::Utf8 => String::from_utf8(bytes.to_vec()).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 1 + bytes[..e.utf8_error().valid_up_to()].iter().filter(|&&b| b == b'\n').count(),
            message: "invalid UTF-8".into(),
        }),
        TextEncoding::Auto => Ok(match std::str::from_utf8(bytes) {
            Ok(s) => s.to_string(),
            Err(_) => latin1(bytes),
        }),
    }
}

/// Parses labeled lines. `path` is used only in error messages.
pub fn parse_label_text(
    content: &str,
    path: &Path,
    format: LabelFormat,
    labels: &mut LabelMap,
) -> Result<Vec<LabeledText>> {
    let mut out = Vec::new();
    for (i, raw) in content.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: &str| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: message.to_string(),
        };
        let (label, text) = match format {
            LabelFormat::Tsv => {
                let (label, text) = line
                    .split_once('\t')
                    .ok_or_else(|| parse_err("expected LABEL<TAB>text"))?;
                if label.trim().is_empty() {
                    return Err(parse_err("empty label"));
                }
                (label.trim().to_string(), text.trim().to_string())
            }
            LabelFormat::TrecCoarse | LabelFormat::TrecFine => {
                let line = line.trim_start();
                let (head, text) = line
                    .split_once(char::is_whitespace)
                    .ok_or_else(|| parse_err("expected COARSE:fine text"))?;
                let (coarse, fine) = head
                    .split_once(':')
                    .ok_or_else(|| parse_err("label is not of the form COARSE:fine"))?;
                if coarse.is_empty() || fine.is_empty() {
                    return Err(parse_err("label is not of the form COARSE:fine"));
                }
                let label = if format == LabelFormat::TrecCoarse { coarse } else { head };
                (label.to_string(), text.trim().to_string())
            }
        };
        let id = labels.get_or_insert(&label).ok_or_else(|| Error::UnknownLabel {
            path: path.to_path_buf(),
            line: line_no,
            label: label.clone(),
        })?;
        out.push(LabeledText { text, label: id });
    }
    if out.is_empty() {
        return Err(Error::NoExamples(path.to_path_buf()));
    }
    Ok(out)
}

/// Reads a labeled text file. Loading training data with an unfrozen map
/// registers labels in first-seen order; freeze the map before loading test
/// data so that unseen labels fail loudly.
pub fn load_label_text(
    path: &Path,
    format: LabelFormat,
    encoding: TextEncoding,
    labels: &mut LabelMap,
) -> Result<Vec<LabeledText>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let content = decode_bytes(&bytes, encoding, path)?;
    parse_label_text(&content, path, format, labels)
}

/// Tokenized train/test data sharing one vocabulary and label map.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub vocab: Vocabulary,
    pub labels: LabelMap,
    pub max_len: usize,
}

impl Corpus {
    /// Builds the vocabulary on the training texts only.
    pub fn new(
        train: &[LabeledText],
        test: &[LabeledText],
        mut labels: LabelMap,
        min_freq: usize,
        max_len: usize,
    ) -> Result<Self> {
        labels.freeze();
        let vocab = Vocabulary::build(train.iter().map(|t| t.text.as_str()), min_freq)?;
        let to_examples = |set: &[LabeledText]| -> Vec<Example> {
            set.iter()
                .enumerate()
                .map(|(id, t)| Example {
                    id,
                    tokens: vocab.encode(&t.text, max_len),
                    text: t.text.clone(),
                    label: Some(t.label),
                })
                .collect()
        };
        Ok(Corpus {
            train: to_examples(train),
            test: to_examples(test),
            vocab,
            labels,
            max_len,
        })
    }

    pub fn k(&self) -> usize {
        self.labels.len()
    }

    pub fn split(&self, fraction: f64, seed: u64) -> Result<DatasetSplit> {
        let mut split = split_labeled(&self.train, fraction, seed, self.k())?;
        split.test = self.test.clone();
        Ok(split)
    }
}

/// Per-class labeled counts for a fraction: the class shares of
/// `floor(fraction * n)` apportioned by largest remainder (ties to the lower
/// class index), with at least one example for every non-empty class.
pub fn labeled_counts(class_sizes: &[usize], fraction: f64) -> Vec<usize> {
    let n: usize = class_sizes.iter().sum();
    let target = (fraction * n as f64 + 1e-9).floor() as usize;
    let quotas: Vec<f64> = class_sizes.iter().map(|&c| fraction * c as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| (q + 1e-9).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..class_sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - counts[a] as f64;
        let rb = quotas[b] - counts[b] as f64;
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &c in order.iter().take(target.saturating_sub(assigned)) {
        counts[c] += 1;
    }
    for (count, &size) in counts.iter_mut().zip(class_sizes) {
        *count = (*count).max(1).min(size);
    }
    counts
}

/// Stratified labeled/unlabeled split. Selection within each class uses a
/// shuffle seeded by `seed`; labels of the unlabeled remainder are removed.
pub fn split_labeled(examples: &[Example], fraction: f64, seed: u64, k: usize) -> Result<DatasetSplit> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} not in (0, 1]")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (pos, ex) in examples.iter().enumerate() {
        let label = ex
            .label
            .ok_or_else(|| Error::InvalidArgument(format!("example {} has no label", ex.id)))?;
        if label >= k {
            return Err(Error::InvalidArgument(format!(
                "example {} has label {label} >= k = {k}",
                ex.id
            )));
        }
        by_class[label].push(pos);
    }
    let sizes: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let counts = labeled_counts(&sizes, fraction);
    let mut rng = rng::from_seed(seed);
    let mut is_labeled = vec![false; examples.len()];
    for (members, &count) in by_class.iter_mut().zip(&counts) {
        members.shuffle(&mut rng);
        for &pos in members.iter().take(count) {
            is_labeled[pos] = true;
        }
    }
    let labeled: Vec<Example> = examples
        .iter()
        .zip(&is_labeled)
        .filter(|(_, &l)| l)
        .map(|(e, _)| e.clone())
        .collect();
    if labeled.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "fraction {fraction} leaves the labeled set empty"
        )));
    }
    let unlabeled = examples
        .iter()
        .zip(&is_labeled)
        .filter(|(_, &l)| !l)
        .map(|(e, _)| Example { label: None, ..e.clone() })
        .collect();
    Ok(DatasetSplit {
        labeled,
        unlabeled,
        test: Vec::new(),
        k,
    })
}

pub fn write_split_manifest(path: &Path, split: &DatasetSplit) -> Result<()> {
    fs::write(path, split.manifest()).map_err(|e| Error::io(PathBuf::from(path), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn examples(labels: &[usize]) -> Vec<Example> {
        labels
            .iter()
            .enumerate()
            .map(|(id, &l)| Example {
                id,
                text: format!("t{id}"),
                tokens: vec![EOS],
                label: Some(l),
            })
            .collect()
    }

    #[test]
    fn tsv_lines_parse_and_freeze() {
        let mut labels = LabelMap::new();
        let got = parse_label_text("pos\tgood film\nneg\tbad film\n\npos\tfine\n", Path::new("x"), LabelFormat::Tsv, &mut labels)
            .unwrap();
        assert_eq!(got.len(), 3);
        assert_eq!(labels.names(), &["pos".to_string(), "neg".to_string()]);
        labels.freeze();
        let err = parse_label_text("neutral\tmeh\n", Path::new("test.tsv"), LabelFormat::Tsv, &mut labels).unwrap_err();
        assert!(matches!(err, Error::UnknownLabel { line: 1, .. }));
    }

    #[test]
    fn malformed_line_names_its_number() {
        let mut labels = LabelMap::new();
        let err = parse_label_text("pos\tok\nno tab here\n", Path::new("f"), LabelFormat::Tsv, &mut labels).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_input_has_no_examples() {
        let mut labels = LabelMap::new();
        let err = parse_label_text("\n\n", Path::new("empty"), LabelFormat::Tsv, &mut labels).unwrap_err();
        assert!(err.to_string().contains("no examples"));
    }

    #[test]
    fn trec_coarse_and_fine_labels() {
        let content = "DESC:manner How did serfdom develop ?\nNUM:date When was Ozzy born ?\nDESC:def What is a pinata ?\n";
        let mut coarse = LabelMap::new();
        let c = parse_label_text(content, Path::new("t"), LabelFormat::TrecCoarse, &mut coarse).unwrap();
        assert_eq!(coarse.len(), 2);
        assert_eq!(c[0].text, "How did serfdom develop ?");
        let mut fine = LabelMap::new();
        parse_label_text(content, Path::new("t"), LabelFormat::TrecFine, &mut fine).unwrap();
        assert_eq!(fine.len(), 3);
        assert_eq!(fine.name(0), Some("DESC:manner"));
    }

    #[test]
    fn trec_without_colon_is_rejected() {
        let mut labels = LabelMap::new();
        assert!(parse_label_text("DESC How ?\n", Path::new("t"), LabelFormat::TrecCoarse, &mut labels).is_err());
    }

    #[test]
    fn latin1_fallback() {
        let bytes = b"pos\tcaf\xe9\n";
        let s = decode_bytes(bytes, TextEncoding::Auto, Path::new("x")).unwrap();
        assert_eq!(s, "pos\tcafé\n");
        assert!(decode_bytes(bytes, TextEncoding::Utf8, Path::new("x")).is_err());
    }

    #[test]
    fn full_fraction_labels_everything() {
        let ex = examples(&[0, 1, 0, 1, 1]);
        let s = split_labeled(&ex, 1.0, 3, 2).unwrap();
        assert_eq!(s.labeled.len(), 5);
        assert!(s.unlabeled.is_empty());
    }

    #[test]
    fn split_is_stratified_disjoint_and_stripped() {
        let labels: Vec<usize> = (0..300).map(|i| i % 3).collect();
        let ex = examples(&labels);
        let s = split_labeled(&ex, 0.1, 9, 3).unwrap();
        assert_eq!(s.labeled.len(), 30);
        assert_eq!(s.unlabeled.len(), 270);
        for c in 0..3 {
            assert_eq!(s.labeled.iter().filter(|e| e.label == Some(c)).count(), 10);
        }
        assert!(s.unlabeled.iter().all(|e| e.label.is_none()));
        let lab: std::collections::HashSet<usize> = s.labeled.iter().map(|e| e.id).collect();
        assert!(s.unlabeled.iter().all(|e| !lab.contains(&e.id)));
    }

    #[test]
    fn tiny_fraction_keeps_one_per_class() {
        let labels: Vec<usize> = (0..50).map(|i| i % 5).collect();
        let s = split_labeled(&examples(&labels), 0.001, 1, 5).unwrap();
        assert_eq!(s.labeled.len(), 5);
    }

    #[test]
    fn invalid_fraction_is_rejected() {
        let ex = examples(&[0, 1]);
        assert!(split_labeled(&ex, 0.0, 1, 2).is_err());
        assert!(split_labeled(&ex, 1.5, 1, 2).is_err());
        assert!(split_labeled(&[], 0.5, 1, 2).is_err());
    }

    #[test]
    fn same_seed_reproduces_and_histograms_match_across_seeds() {
        let labels: Vec<usize> = (0..97).map(|i| (i * 7) % 4).collect();
        let ex = examples(&labels);
        let a = split_labeled(&ex, 0.2, 5, 4).unwrap();
        let b = split_labeled(&ex, 0.2, 5, 4).unwrap();
        assert_eq!(a, b);
        let c = split_labeled(&ex, 0.2, 6, 4).unwrap();
        let hist = |s: &DatasetSplit| {
            let mut h = [0usize; 4];
            s.labeled.iter().for_each(|e| h[e.label.unwrap()] += 1);
            h
        };
        assert_eq!(hist(&a), hist(&c));
        assert_ne!(a.labeled, c.labeled);
    }

    #[test]
    fn manifest_lists_every_example() {
        let ex = examples(&[0, 1, 0, 1]);
        let mut s = split_labeled(&ex, 0.5, 2, 2).unwrap();
        s.test = examples(&[1]);
        let m = s.manifest();
        assert_eq!(m.lines().count(), 5);
        assert!(m.lines().last().unwrap().ends_with("\tT"));
    }
}
