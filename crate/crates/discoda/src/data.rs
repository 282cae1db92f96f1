//! Corpora of sequence-pair instances, embeddings, and the synthetic
//! two-domain generator.
//!
//! A corpus is a directory of five JSONL split files (`source-train`,
//! `source-dev`, `target-train`, `target-dev`, `target-test`). Each line is
//! one instance: `{"arg1": "...", "arg2": "...", "label": "...", "domain":
//! "source"|"target", "id": "..."}`, with `label` optional. Arguments are
//! whitespace-tokenized on load and joined with single spaces on save.

use crate::error::{Error, Result};
use discoda_ad::rng::{derive_seed, stream};
use discoda_ad::{Scalar, Tensor};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Which domain an instance belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// One sequence-pair instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub arg1: Vec<String>,
    pub arg2: Vec<String>,
    pub label: Option<String>,
    pub domain: Domain,
}

/// Serialized form of an instance (one JSONL line). Field order here fixes
/// the byte layout of generated corpora.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInstance {
    arg1: String,
    arg2: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    domain: Domain,
    id: String,
}

/// Canonical split names and file names inside a corpus directory.
pub const SPLITS: [&str; 5] = [
    "source-train",
    "source-dev",
    "target-train",
    "target-dev",
    "target-test",
];

/// A five-split, two-domain corpus with its label inventory.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub source_train: Vec<Instance>,
    pub source_dev: Vec<Instance>,
    pub target_train: Vec<Instance>,
    pub target_dev: Vec<Instance>,
    pub target_test: Vec<Instance>,
    /// Distinct labels across all splits, sorted lexicographically; index in
    /// this list is the class index everywhere.
    pub labels: Vec<String>,
}

impl Corpus {
    pub fn split(&self, name: &str) -> Option<&[Instance]> {
        match name {
            "source-train" => Some(&self.source_train),
            "source-dev" => Some(&self.source_dev),
            "target-train" => Some(&self.target_train),
            "target-dev" => Some(&self.target_dev),
            "target-test" => Some(&self.target_test),
            _ => None,
        }
    }

    fn splits_mut(&mut self) -> [(&'static str, &mut Vec<Instance>); 5] {
        [
            ("source-train", &mut self.source_train),
            ("source-dev", &mut self.source_dev),
            ("target-train", &mut self.target_train),
            ("target-dev", &mut self.target_dev),
            ("target-test", &mut self.target_test),
        ]
    }

    pub fn splits(&self) -> [(&'static str, &[Instance]); 5] {
        [
            ("source-train", &self.source_train),
            ("source-dev", &self.source_dev),
            ("target-train", &self.target_train),
            ("target-dev", &self.target_dev),
            ("target-test", &self.target_test),
        ]
    }

    /// Loads a corpus directory, inferring the label inventory from the data.
    /// Missing or empty split files yield empty splits with a warning.
    pub fn load(dir: &Path) -> Result<Self> {
        Self::load_impl(dir, None)
    }

    /// Loads a corpus directory and rejects any label outside `expected`.
    pub fn load_with_labels(dir: &Path, expected: &[String]) -> Result<Self> {
        Self::load_impl(dir, Some(expected))
    }

    fn load_impl(dir: &Path, expected: Option<&[String]>) -> Result<Self> {
        let mut corpus = Corpus::default();
        for (name, slot) in corpus.splits_mut() {
            let path = dir.join(format!("{name}.jsonl"));
            if !path.exists() {
                log::warn!("split file {} missing; treating as empty", path.display());
                continue;
            }
            *slot = load_split(&path)?;
            if slot.is_empty() {
                log::warn!("split file {} is empty", path.display());
            }
        }
        let mut seen_ids: HashSet<&str> = HashSet::new();
        let mut labels: HashSet<String> = HashSet::new();
        for (name, instances) in corpus.splits() {
            for inst in instances {
                if !seen_ids.insert(&inst.id) {
                    return Err(Error::Data(format!(
                        "duplicate instance id '{}' (second occurrence in {name})",
                        inst.id
                    )));
                }
                if let Some(label) = &inst.label {
                    if let Some(exp) = expected {
                        if !exp.iter().any(|l| l == label) {
                            return Err(Error::Data(format!(
                                "unknown label '{label}' for instance '{}' in {name} \
                                 (expected one of {exp:?})",
                                inst.id
                            )));
                        }
                    }
                    labels.insert(label.clone());
                }
            }
        }
        corpus.labels = match expected {
            Some(exp) => exp.to_vec(),
            None => {
                let mut v: Vec<String> = labels.into_iter().collect();
                v.sort();
                v
            }
        };
        Ok(corpus)
    }

    /// Writes all five split files into `dir` (created if needed).
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, instances) in self.splits() {
            save_split(&dir.join(format!("{name}.jsonl")), instances)?;
        }
        Ok(())
    }

    /// Index of a label in the inventory.
    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }
}

/// Loads one JSONL split file.
pub fn load_split(path: &Path) -> Result<Vec<Instance>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawInstance = serde_json::from_str(&line).map_err(|e| Error::DataAt {
            path: path.to_path_buf(),
            line: i + 1,
            reason: format!("malformed instance: {e}"),
        })?;
        let arg1: Vec<String> = raw.arg1.split_whitespace().map(String::from).collect();
        let arg2: Vec<String> = raw.arg2.split_whitespace().map(String::from).collect();
        if arg1.is_empty() || arg2.is_empty() {
            return Err(Error::DataAt {
                path: path.to_path_buf(),
                line: i + 1,
                reason: format!("instance '{}' has an empty argument", raw.id),
            });
        }
        out.push(Instance {
            id: raw.id,
            arg1,
            arg2,
            label: raw.label,
            domain: raw.domain,
        });
    }
    Ok(out)
}

/// Writes one JSONL split file.
pub fn save_split(path: &Path, instances: &[Instance]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for inst in instances {
        let raw = RawInstance {
            arg1: inst.arg1.join(" "),
            arg2: inst.arg2.join(" "),
            label: inst.label.clone(),
            domain: inst.domain,
            id: inst.id.clone(),
        };
        serde_json::to_writer(&mut file, &raw)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

/// Maps each instance's label to its class index; errors on unlabeled
/// instances or labels outside the inventory.
pub fn label_ids(instances: &[Instance], labels: &[String]) -> Result<Vec<usize>> {
    instances
        .iter()
        .map(|inst| {
            let label = inst.label.as_ref().ok_or_else(|| {
                Error::Data(format!("instance '{}' has no label", inst.id))
            })?;
            labels
                .iter()
                .position(|l| l == label)
                .ok_or_else(|| Error::Data(format!("unknown label '{label}' for '{}'", inst.id)))
        })
        .collect()
}

/// Copies instances with labels removed (hygiene for the unsupervised path).
pub fn strip_labels(instances: &[Instance]) -> Vec<Instance> {
    instances
        .iter()
        .map(|i| Instance {
            label: None,
            ..i.clone()
        })
        .collect()
}

// ── Vocabulary and embeddings ───────────────────────────────────────────

/// Distinct tokens of the training splits (source-train and target-train),
/// sorted lexicographically. Dev/test-only tokens are out-of-vocabulary by
/// construction.
pub fn build_vocab(corpus: &Corpus) -> Vec<String> {
    let mut set: HashSet<&String> = HashSet::new();
    for inst in corpus.source_train.iter().chain(&corpus.target_train) {
        set.extend(inst.arg1.iter());
        set.extend(inst.arg2.iter());
    }
    let mut v: Vec<String> = set.into_iter().cloned().collect();
    v.sort();
    v
}

/// Row index of the all-zero padding vector.
pub const PAD_ROW: usize = 0;
/// Row index of the shared out-of-vocabulary vector.
pub const OOV_ROW: usize = 1;

/// Token-to-vector table. Row 0 is an all-zero padding vector (never
/// trained), row 1 a single shared out-of-vocabulary vector, and rows 2+
/// follow the vocabulary order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<S> {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    matrix: Tensor<S>,
    dim: usize,
}

/// How much of the vocabulary a pretrained embedding file covered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingCoverage {
    pub vocab: usize,
    pub found: usize,
}

impl<S: Scalar> EmbeddingTable<S> {
    /// Randomly initialized table over a vocabulary (uniform in ±0.5), with
    /// a zero padding row.
    pub fn random(vocab: &[String], dim: usize, seed: u64) -> Self {
        let mut rng = stream(seed, "embeddings.random");
        let rows = vocab.len() + 2;
        let mut matrix = Tensor::rand_uniform(vec![rows, dim], -0.5, 0.5, &mut rng);
        for c in 0..dim {
            *matrix.at_mut(PAD_ROW, c) = S::zero();
        }
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i + 2))
            .collect();
        Self {
            tokens: vocab.to_vec(),
            index,
            matrix,
            dim,
        }
    }

    /// Loads pretrained vectors from a text file (`token v1 .. vd` per
    /// line). Vocabulary tokens absent from the file share the random OOV
    /// row. The dimensionality is inferred from the first line.
    pub fn from_text_file(
        path: &Path,
        vocab: &[String],
        seed: u64,
    ) -> Result<(Self, EmbeddingCoverage)> {
        let wanted: HashSet<&String> = vocab.iter().collect();
        let file = std::fs::File::open(path)?;
        let reader = BufReader::new(file);
        let mut dim: Option<usize> = None;
        let mut found: HashMap<String, Vec<S>> = HashMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let token = parts.next().ok_or_else(|| Error::DataAt {
                path: path.to_path_buf(),
                line: i + 1,
                reason: "missing token".into(),
            })?;
            let values: Vec<S> = parts
                .map(|p| {
                    p.parse::<f64>().map(S::c).map_err(|e| Error::DataAt {
                        path: path.to_path_buf(),
                        line: i + 1,
                        reason: format!("token '{token}': bad value '{p}': {e}"),
                    })
                })
                .collect::<Result<_>>()?;
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(Error::DataAt {
                        path: path.to_path_buf(),
                        line: i + 1,
                        reason: format!(
                            "token '{token}' has {} values, expected {d}",
                            values.len()
                        ),
                    });
                }
                _ => {}
            }
            if wanted.contains(&token.to_string()) {
                found.insert(token.to_string(), values);
            }
        }
        let dim = dim.ok_or_else(|| {
            Error::Data(format!("embedding file {} is empty", path.display()))
        })?;

        // Rows: pad, shared OOV (random), then found tokens in vocab order.
        let mut tokens = Vec::new();
        let mut index = HashMap::new();
        let mut rng = stream(seed, "embeddings.oov");
        let oov: Vec<S> = (0..dim).map(|_| S::c(rng.gen_range(-0.5..0.5))).collect();
        let mut data = vec![S::zero(); dim];
        data.extend_from_slice(&oov);
        for token in vocab {
            if let Some(values) = found.get(token) {
                index.insert(token.clone(), 2 + tokens.len());
                tokens.push(token.clone());
                data.extend_from_slice(values);
            }
        }
        let rows = 2 + tokens.len();
        let matrix = Tensor::new(vec![rows, dim], data).map_err(Error::Numeric)?;
        let coverage = EmbeddingCoverage {
            vocab: vocab.len(),
            found: tokens.len(),
        };
        log::info!(
            "embedding coverage: {}/{} vocabulary tokens found",
            coverage.found,
            coverage.vocab
        );
        Ok((
            Self {
                tokens,
                index,
                matrix,
                dim,
            },
            coverage,
        ))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    pub fn matrix(&self) -> &Tensor<S> {
        &self.matrix
    }

    pub fn matrix_mut(&mut self) -> &mut Tensor<S> {
        &mut self.matrix
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Row index for a token; unknown tokens map to the shared OOV row.
    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(OOV_ROW)
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.lookup(t)).collect()
    }

    /// Rebuilds a table from checkpoint pieces.
    pub fn from_parts(tokens: Vec<String>, matrix: Tensor<S>) -> Result<Self> {
        if matrix.rows() != tokens.len() + 2 {
            return Err(Error::Checkpoint(format!(
                "embedding matrix has {} rows for {} tokens",
                matrix.rows(),
                tokens.len()
            )));
        }
        let dim = matrix.cols();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i + 2))
            .collect();
        Ok(Self {
            tokens,
            index,
            matrix,
            dim,
        })
    }
}

// ── Synthetic two-domain generator ──────────────────────────────────────

/// Configuration for the synthetic generator. `connective_strength` is the
/// probability that a source instance's marker matches its class;
/// `content_strength` is the probability that a content token is drawn from
/// the class pool rather than the shared pool. Content distributions are
/// identical across domains; markers appear only in source instances.
///
/// Defaults use long arguments and diffuse content vocabularies: markers stay
/// class-perfect (so a source-trained classifier leans on them and transfers
/// poorly), while each marker is one token among many, leaving pooled source
/// and target features close enough for adaptation to align them.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub classes: usize,
    pub class_names: Option<Vec<String>>,
    pub class_weights: Option<Vec<f64>>,
    pub markers_per_class: usize,
    pub content_tokens_per_class: usize,
    pub shared_tokens: usize,
    pub arg_len_min: usize,
    pub arg_len_max: usize,
    pub connective_strength: f64,
    pub content_strength: f64,
    pub source_train: usize,
    pub source_dev: usize,
    pub target_train: usize,
    pub target_dev: usize,
    pub target_test: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            classes: 4,
            class_names: None,
            class_weights: None,
            markers_per_class: 2,
            content_tokens_per_class: 48,
            shared_tokens: 96,
            arg_len_min: 8,
            arg_len_max: 16,
            connective_strength: 1.0,
            content_strength: 0.15,
            source_train: 2000,
            source_dev: 400,
            target_train: 2000,
            target_dev: 400,
            target_test: 500,
        }
    }
}

/// Default class names for four classes; otherwise `class_0..class_{K-1}`.
const RELATION_NAMES: [&str; 4] = ["Temporal", "Contingency", "Comparison", "Expansion"];

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("synth: at least 2 classes required".into()));
        }
        if let Some(names) = &self.class_names {
            if names.len() != self.classes {
                return Err(Error::Config(format!(
                    "synth: {} class names for {} classes",
                    names.len(),
                    self.classes
                )));
            }
        }
        if let Some(w) = &self.class_weights {
            if w.len() != self.classes || w.iter().any(|&x| x < 0.0) || w.iter().sum::<f64>() <= 0.0
            {
                return Err(Error::Config("synth: invalid class weights".into()));
            }
        }
        for (name, value) in [
            ("connective_strength", self.connective_strength),
            ("content_strength", self.content_strength),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::Config(format!("synth: {name} must be in [0, 1]")));
            }
        }
        if self.arg_len_min == 0 || self.arg_len_min > self.arg_len_max {
            return Err(Error::Config("synth: invalid argument length range".into()));
        }
        if self.markers_per_class == 0 || self.content_tokens_per_class == 0 {
            return Err(Error::Config("synth: token pools must be non-empty".into()));
        }
        Ok(())
    }

    pub fn class_name(&self, k: usize) -> String {
        match &self.class_names {
            Some(names) => names[k].clone(),
            None if self.classes == 4 => RELATION_NAMES[k].to_string(),
            None => format!("class_{k}"),
        }
    }

    /// Marker tokens for class `k`.
    pub fn markers(&self, k: usize) -> Vec<String> {
        (0..self.markers_per_class)
            .map(|j| format!("mk{k}_{j}"))
            .collect()
    }
}

/// Generates a deterministic synthetic corpus: class-biased content tokens
/// in both domains, class-correlated marker tokens inserted into source
/// arguments only.
pub fn generate(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let weights = cfg
        .class_weights
        .clone()
        .unwrap_or_else(|| vec![1.0; cfg.classes]);
    let class_dist =
        WeightedIndex::new(&weights).map_err(|e| Error::Config(format!("synth weights: {e}")))?;

    let mut corpus = Corpus::default();
    for (name, slot) in corpus.splits_mut() {
        let (count, domain) = match name {
            "source-train" => (cfg.source_train, Domain::Source),
            "source-dev" => (cfg.source_dev, Domain::Source),
            "target-train" => (cfg.target_train, Domain::Target),
            "target-dev" => (cfg.target_dev, Domain::Target),
            "target-test" => (cfg.target_test, Domain::Target),
            _ => unreachable!(),
        };
        let mut rng = stream(cfg.seed, &format!("synth.{name}"));
        for i in 0..count {
            let k = class_dist.sample(&mut rng);
            let mut arg1 = content_tokens(cfg, k, &mut rng);
            let mut arg2 = content_tokens(cfg, k, &mut rng);
            if domain == Domain::Source {
                // One marker per argument, embedded between content tokens.
                let marker_class = if rng.gen_bool(cfg.connective_strength) {
                    k
                } else {
                    rng.gen_range(0..cfg.classes)
                };
                for arg in [&mut arg1, &mut arg2] {
                    let j = rng.gen_range(0..cfg.markers_per_class);
                    let pos = rng.gen_range(0..=arg.len());
                    arg.insert(pos, format!("mk{marker_class}_{j}"));
                }
            }
            slot.push(Instance {
                id: format!("{name}-{i:05}"),
                arg1,
                arg2,
                label: Some(cfg.class_name(k)),
                domain,
            });
        }
    }
    let mut labels: Vec<String> = (0..cfg.classes).map(|k| cfg.class_name(k)).collect();
    labels.sort();
    corpus.labels = labels;
    Ok(corpus)
}

fn content_tokens<R: Rng>(cfg: &SynthConfig, class: usize, rng: &mut R) -> Vec<String> {
    let len = rng.gen_range(cfg.arg_len_min..=cfg.arg_len_max);
    (0..len)
        .map(|_| {
            if rng.gen_bool(cfg.content_strength) {
                let j = rng.gen_range(0..cfg.content_tokens_per_class);
                format!("c{class}_{j}")
            } else {
                let j = rng.gen_range(0..cfg.shared_tokens);
                format!("sh{j}")
            }
        })
        .collect()
}

// ── Labeled-subset sampling ─────────────────────────────────────────────

/// Uniform sample without replacement of `size` labeled instances,
/// reproducible per seed. Sampled instances keep their original order.
pub fn sample_labeled_subset(
    instances: &[Instance],
    size: usize,
    seed: u64,
) -> Result<Vec<Instance>> {
    if size == 0 {
        return Err(Error::Data("labeled subset size must be positive".into()));
    }
    if size > instances.len() {
        return Err(Error::Data(format!(
            "labeled subset size {size} exceeds available {} instances",
            instances.len()
        )));
    }
    let mut rng = stream(seed, "labeled-subset");
    let mut idx: Vec<usize> = rand::seq::index::sample(&mut rng, instances.len(), size).into_vec();
    idx.sort_unstable();
    idx.iter()
        .map(|&i| {
            let inst = &instances[i];
            if inst.label.is_none() {
                return Err(Error::Data(format!(
                    "cannot sample labeled subset: instance '{}' has no label",
                    inst.id
                )));
            }
            Ok(inst.clone())
        })
        .collect()
}

/// Seed used by everything derived from a subset repetition.
pub fn subset_seed(master: u64, repetition: usize) -> u64 {
    derive_seed(master, &format!("subset.rep{repetition}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_lines() -> String {
        [
            r#"{"arg1":"the council voted","arg2":"the measure passed","label":"Contingency","domain":"source","id":"a"}"#,
            r#"{"arg1":"rain fell all day","arg2":"the game went on","label":"Comparison","domain":"source","id":"b"}"#,
            r#"{"arg1":"she packed at dawn","arg2":"she left by noon","label":"Temporal","domain":"target","id":"c"}"#,
            r#"{"arg1":"prices rose","arg2":"wages rose too","label":"Expansion","domain":"target","id":"d"}"#,
        ]
        .join("\n")
    }

    fn write_corpus_dir(dir: &Path) {
        std::fs::create_dir_all(dir).unwrap();
        for name in SPLITS {
            let mut f = std::fs::File::create(dir.join(format!("{name}.jsonl"))).unwrap();
            if name == "source-train" {
                writeln!(f, "{}", fixture_lines()).unwrap();
            }
        }
    }

    #[test]
    fn four_line_fixture_yields_inventory_of_four() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus_dir(dir.path());
        let corpus = Corpus::load(dir.path()).unwrap();
        assert_eq!(corpus.source_train.len(), 4);
        assert_eq!(corpus.labels.len(), 4);
        // Sorted inventory fixes class indices.
        assert_eq!(
            corpus.labels,
            vec!["Comparison", "Contingency", "Expansion", "Temporal"]
        );
        assert_eq!(corpus.label_index("Expansion"), Some(2));
        assert_eq!(
            corpus.source_train[0].arg1,
            vec!["the", "council", "voted"]
        );
    }

    #[test]
    fn save_then_load_round_trips_structurally() {
        let corpus = generate(&SynthConfig {
            source_train: 20,
            source_dev: 5,
            target_train: 20,
            target_dev: 5,
            target_test: 5,
            ..SynthConfig::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        corpus.save(dir.path()).unwrap();
        let back = Corpus::load(dir.path()).unwrap();
        assert_eq!(corpus.labels, back.labels);
        for (name, split) in corpus.splits() {
            assert_eq!(Some(split), back.split(name), "{name}");
        }
    }

    #[test]
    fn malformed_line_is_rejected_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("source-train.jsonl");
        std::fs::write(&path, "{\"arg1\": \"x\"\n").unwrap();
        let err = load_split(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":1"), "{msg}");
        assert!(msg.contains("malformed"), "{msg}");
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus_dir(dir.path());
        let dup = r#"{"arg1":"x y","arg2":"z w","domain":"target","id":"a"}"#;
        std::fs::write(dir.path().join("target-train.jsonl"), dup).unwrap();
        let err = Corpus::load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("duplicate instance id 'a'"));
    }

    #[test]
    fn unknown_label_is_rejected_against_expected_inventory() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus_dir(dir.path());
        let expected: Vec<String> = ["Comparison", "Contingency"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let err = Corpus::load_with_labels(dir.path(), &expected).unwrap_err();
        assert!(err.to_string().contains("unknown label"));
    }

    #[test]
    fn empty_argument_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("source-train.jsonl");
        std::fs::write(
            &path,
            r#"{"arg1":"","arg2":"ok here","domain":"source","id":"x"}"#,
        )
        .unwrap();
        let err = load_split(&path).unwrap_err();
        assert!(err.to_string().contains("empty argument"));
    }

    #[test]
    fn documented_benchmark_class_counts_sum_to_sweep_maximum() {
        // Reference corpus statistics used to size the labeled-subset sweep:
        // per-class training counts and their documented total.
        let class_counts = [704u32, 3622, 2104, 7394];
        let total: u32 = class_counts.iter().sum();
        assert_eq!(total, 13_824);
    }

    // ── Embeddings ──

    #[test]
    fn embedding_text_rows_parse_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vectors.txt");
        std::fs::write(&path, "the 0.1 0.2 -0.3\ncat 1.0 -1.5 0.25\n").unwrap();
        let vocab = vec!["cat".to_string(), "the".to_string()];
        let (table, cov) = EmbeddingTable::<f64>::from_text_file(&path, &vocab, 1).unwrap();
        assert_eq!(cov, EmbeddingCoverage { vocab: 2, found: 2 });
        assert_eq!(table.dim(), 3);
        let the_row = table.lookup("the");
        assert_eq!(
            &table.matrix().data()[the_row * 3..the_row * 3 + 3],
            &[0.1, 0.2, -0.3]
        );
    }

    #[test]
    fn embedding_inconsistent_width_names_offending_token() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vectors.txt");
        std::fs::write(&path, "the 0.1 0.2\ncat 1.0\n").unwrap();
        let err =
            EmbeddingTable::<f64>::from_text_file(&path, &["the".to_string()], 1).unwrap_err();
        assert!(err.to_string().contains("'cat'"), "{err}");
    }

    #[test]
    fn oov_tokens_share_one_row_and_pad_is_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vectors.txt");
        std::fs::write(&path, "known 0.5 0.5\n").unwrap();
        let vocab: Vec<String> = ["known", "missing1", "missing2"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let (table, cov) = EmbeddingTable::<f64>::from_text_file(&path, &vocab, 1).unwrap();
        assert_eq!(cov.found, 1);
        assert_eq!(table.lookup("missing1"), OOV_ROW);
        assert_eq!(table.lookup("missing2"), OOV_ROW);
        assert_eq!(table.lookup("never-seen"), OOV_ROW);
        assert_eq!(table.matrix().data()[0..2], [0.0, 0.0]);
    }

    #[test]
    fn vocab_comes_from_training_splits_only() {
        let mut corpus = generate(&SynthConfig {
            source_train: 10,
            source_dev: 10,
            target_train: 10,
            target_dev: 10,
            target_test: 10,
            ..SynthConfig::default()
        })
        .unwrap();
        corpus.target_dev[0].arg1.push("dev-only-token".to_string());
        let vocab = build_vocab(&corpus);
        assert!(!vocab.contains(&"dev-only-token".to_string()));
        let table = EmbeddingTable::<f64>::random(&vocab, 4, 3);
        assert_eq!(table.lookup("dev-only-token"), OOV_ROW);
    }

    // ── Synthetic generator ──

    #[test]
    fn generator_is_deterministic_per_seed_and_sensitive_to_it() {
        let cfg = SynthConfig {
            source_train: 50,
            source_dev: 10,
            target_train: 50,
            target_dev: 10,
            target_test: 10,
            ..SynthConfig::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        for (name, split) in a.splits() {
            assert_eq!(Some(split), b.split(name), "{name}");
        }
        let c = generate(&SynthConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.source_train, c.source_train);
    }

    #[test]
    fn markers_never_appear_in_target_instances() {
        let corpus = generate(&SynthConfig::default()).unwrap();
        for inst in corpus
            .target_train
            .iter()
            .chain(&corpus.target_dev)
            .chain(&corpus.target_test)
        {
            for tok in inst.arg1.iter().chain(&inst.arg2) {
                assert!(!tok.starts_with("mk"), "marker {tok} in target '{}'", inst.id);
            }
        }
        // ... and source instances carry exactly one marker per argument.
        for inst in corpus.source_train.iter().take(50) {
            for arg in [&inst.arg1, &inst.arg2] {
                assert_eq!(arg.iter().filter(|t| t.starts_with("mk")).count(), 1);
            }
        }
    }

    #[test]
    fn full_strength_markers_make_source_linearly_separable() {
        // A linear probe over bag-of-marker counts (identity weights: score
        // class k by its own marker count) must reach 100% source accuracy
        // when connective strength is 1.0.
        let cfg = SynthConfig {
            connective_strength: 1.0,
            source_train: 300,
            ..SynthConfig::default()
        };
        let corpus = generate(&cfg).unwrap();
        for inst in &corpus.source_train {
            let mut counts = vec![0usize; cfg.classes];
            for tok in inst.arg1.iter().chain(&inst.arg2) {
                for k in 0..cfg.classes {
                    if cfg.markers(k).contains(tok) {
                        counts[k] += 1;
                    }
                }
            }
            let best = (0..cfg.classes).max_by_key(|&k| counts[k]).unwrap();
            assert_eq!(
                Some(cfg.class_name(best)),
                inst.label,
                "probe misclassified '{}'",
                inst.id
            );
        }
    }

    #[test]
    fn label_marginals_match_configured_ratios_by_chi_squared() {
        let cfg = SynthConfig {
            class_weights: Some(vec![1.0, 2.0, 3.0, 4.0]),
            source_train: 4000,
            ..SynthConfig::default()
        };
        let corpus = generate(&cfg).unwrap();
        let mut counts = vec![0f64; 4];
        for inst in &corpus.source_train {
            let k = corpus
                .labels
                .iter()
                .position(|l| Some(l) == inst.label.as_ref())
                .unwrap();
            counts[k] += 1.0;
        }
        // Expected counts follow the configured weights (aligned to the
        // sorted inventory).
        let names: Vec<String> = (0..4).map(|k| cfg.class_name(k)).collect();
        let mut expected = vec![0f64; 4];
        let total: f64 = 10.0;
        for (k, name) in names.iter().enumerate() {
            let idx = corpus.labels.iter().position(|l| l == name).unwrap();
            expected[idx] = 4000.0 * (k + 1) as f64 / total;
        }
        let chi2: f64 = counts
            .iter()
            .zip(&expected)
            .map(|(&o, &e)| (o - e) * (o - e) / e)
            .sum();
        // Critical value for 3 degrees of freedom at significance 0.01.
        assert!(chi2 < 11.345, "chi-squared {chi2:.2} too large");
    }

    #[test]
    fn synth_rejects_invalid_configs() {
        assert!(generate(&SynthConfig {
            classes: 1,
            ..SynthConfig::default()
        })
        .is_err());
        assert!(generate(&SynthConfig {
            connective_strength: 1.5,
            ..SynthConfig::default()
        })
        .is_err());
        assert!(generate(&SynthConfig {
            arg_len_min: 9,
            arg_len_max: 8,
            ..SynthConfig::default()
        })
        .is_err());
    }

    // ── Subset sampling ──

    #[test]
    fn subset_sampling_is_exact_unique_and_reproducible() {
        let corpus = generate(&SynthConfig {
            target_train: 100,
            ..SynthConfig::default()
        })
        .unwrap();
        let a = sample_labeled_subset(&corpus.target_train, 30, 5).unwrap();
        let b = sample_labeled_subset(&corpus.target_train, 30, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 30);
        let ids: HashSet<&str> = a.iter().map(|i| i.id.as_str()).collect();
        assert_eq!(ids.len(), 30, "no duplicates");
        let c = sample_labeled_subset(&corpus.target_train, 30, 6).unwrap();
        assert_ne!(a, c, "different seeds draw different subsets");
        // Full-size sample returns every instance.
        let full = sample_labeled_subset(&corpus.target_train, 100, 5).unwrap();
        assert_eq!(full, corpus.target_train);
    }

    #[test]
    fn subset_sampling_rejects_bad_sizes() {
        let corpus = generate(&SynthConfig {
            target_train: 10,
            ..SynthConfig::default()
        })
        .unwrap();
        assert!(sample_labeled_subset(&corpus.target_train, 0, 1).is_err());
        assert!(sample_labeled_subset(&corpus.target_train, 11, 1).is_err());
    }

    #[test]
    fn strip_labels_removes_every_label() {
        let corpus = generate(&SynthConfig {
            target_train: 10,
            ..SynthConfig::default()
        })
        .unwrap();
        let stripped = strip_labels(&corpus.target_train);
        assert!(stripped.iter().all(|i| i.label.is_none()));
        assert_eq!(stripped[0].arg1, corpus.target_train[0].arg1);
    }
}
