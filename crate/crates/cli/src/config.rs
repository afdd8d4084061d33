//! Flat JSON run configuration: trainer keys plus dataset keys in one
//! object. Unknown keys are errors.

use std::fs;
use std::path::{Path, PathBuf};

use read_lab::checkpoint::sha256_hex;
use read_lab::corpus::{default_grammar, disjoint_grammar, load_label_text, synth_grammar, Corpus, LabelFormat, LabelMap, LabeledText, TextEncoding};
use read_lab::rng::derive_seed;
use read_lab::trainer::{PrecomputedFeatures, TrainConfig, TrainData};
use read_lab::classifier::FeatureTable;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grammar {
    #[default]
    Default,
    Disjoint,
}

/// Where the texts come from. Without `train_path`/`test_path` the
/// synthetic grammar is used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub format: LabelFormat,
    pub encoding: TextEncoding,
    pub grammar: Grammar,
    pub synth_train: usize,
    pub synth_test: usize,
    pub synth_seed: u64,
    pub train_features: Option<PathBuf>,
    pub test_features: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_path: None,
            test_path: None,
            format: LabelFormat::Tsv,
            encoding: TextEncoding::Auto,
            grammar: Grammar::Default,
            synth_train: 1000,
            synth_test: 500,
            synth_seed: 1,
            train_features: None,
            test_features: None,
        }
    }
}

const DATA_KEYS: [&str; 10] = [
    "train_path",
    "test_path",
    "format",
    "encoding",
    "grammar",
    "synth_train",
    "synth_test",
    "synth_seed",
    "train_features",
    "test_features",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn config_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{}: {e}", path.display()))
}

impl RunConfig {
    /// Parses a flat JSON object. Relative paths are resolved against
    /// `base`.
    pub fn from_json(text: &str, origin: &Path, base: &Path) -> Result<Self, CliError> {
        let value: Value = serde_json::from_str(text).map_err(|e| config_err(origin, e))?;
        let Value::Object(all) = value else {
            return Err(config_err(origin, "expected a JSON object"));
        };
        let (data, train): (Map<String, Value>, Map<String, Value>) = all.into_iter().partition(|(k, _)| DATA_KEYS.contains(&k.as_str()));
        let train: TrainConfig = serde_json::from_value(Value::Object(train)).map_err(|e| config_err(origin, e))?;
        let mut data: DataConfig = serde_json::from_value(Value::Object(data)).map_err(|e| config_err(origin, e))?;
        for p in [&mut data.train_path, &mut data.test_path, &mut data.train_features, &mut data.test_features]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(RunConfig { train, data })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| config_err(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, path, base)
    }

    /// The flat object with every default materialized.
    pub fn to_json(&self) -> Value {
        let mut out = Map::new();
        for part in [serde_json::to_value(&self.train), serde_json::to_value(&self.data)] {
            if let Value::Object(m) = part.expect("config serializes") {
                out.extend(m);
            }
        }
        Value::Object(out)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let d = &self.data;
        if d.train_path.is_some() != d.test_path.is_some() {
            return Err(CliError::Config("train_path and test_path must be given together".into()));
        }
        if d.train_features.is_some() != d.test_features.is_some() {
            return Err(CliError::Config("train_features and test_features must be given together".into()));
        }
        if d.train_path.is_none() && (d.synth_train == 0 || d.synth_test == 0) {
            return Err(CliError::Config("synth_train and synth_test must be >= 1".into()));
        }
        Ok(())
    }
}

/// Train and test texts plus their label map, from files or the grammar.
pub fn load_texts(data: &DataConfig) -> Result<(Vec<LabeledText>, Vec<LabeledText>, LabelMap), CliError> {
    let cfg = |e: read_lab::Error| CliError::Config(e.to_string());
    match (&data.train_path, &data.test_path) {
        (Some(train), Some(test)) => {
            let mut labels = LabelMap::new();
            let train = load_label_text(train, data.format, data.encoding, &mut labels).map_err(cfg)?;
            labels.freeze();
            let test = load_label_text(test, data.format, data.encoding, &mut labels).map_err(cfg)?;
            Ok((train, test, labels))
        }
        _ => {
            let g = match data.grammar {
                Grammar::Default => default_grammar(),
                Grammar::Disjoint => disjoint_grammar(),
            };
            let train = synth_grammar(derive_seed(data.synth_seed, "synth", 0), data.synth_train, &g).map_err(cfg)?;
            let test = synth_grammar(derive_seed(data.synth_seed, "synth", 1), data.synth_test, &g).map_err(cfg)?;
            let labels = LabelMap::from_names(g.iter().map(|c| c.name.clone()));
            Ok((train, test, labels))
        }
    }
}

/// The dataset for one run: texts, vocabulary, and the labeled split drawn
/// from the run's seed.
pub fn build_data(config: &RunConfig) -> Result<TrainData, CliError> {
    let (train, test, labels) = load_texts(&config.data)?;
    let t = &config.train;
    let cfg = |e: read_lab::Error| CliError::Config(e.to_string());
    let corpus = Corpus::new(&train, &test, labels, t.min_freq, t.max_len).map_err(cfg)?;
    let split = corpus.split(t.label_fraction, derive_seed(t.seed, "split", 0)).map_err(cfg)?;
    let features = match (&config.data.train_features, &config.data.test_features) {
        (Some(train), Some(test)) => Some(PrecomputedFeatures {
            train: FeatureTable::load(train).map_err(cfg)?,
            test: FeatureTable::load(test).map_err(cfg)?,
        }),
        _ => None,
    };
    Ok(TrainData {
        split,
        vocab: corpus.vocab.clone(),
        labels: corpus.labels.names().to_vec(),
        features,
    })
}

/// SHA-256 of every input file, or of the grammar parameters.
pub fn dataset_checksums(data: &DataConfig) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    let files = [&data.train_path, &data.test_path, &data.train_features, &data.test_features];
    for p in files.into_iter().flatten() {
        let bytes = fs::read(p).map_err(|e| config_err(p, e))?;
        out.push((p.display().to_string(), sha256_hex(&bytes)));
    }
    if data.train_path.is_none() {
        let desc = format!(
            "synth:{:?}:{}:{}:{}",
            data.grammar, data.synth_seed, data.synth_train, data.synth_test
        );
        out.push(("synthetic".into(), sha256_hex(desc.as_bytes())));
    }
    Ok(out)
}
