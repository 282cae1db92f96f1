//! Versioned binary checkpoints.
//!
//! A checkpoint file holds everything needed to resume a training stage and
//! reproduce its remaining trajectory bit for bit: named `f64` parameter
//! arrays with shapes, optimizer state, the full resolved config (plus its
//! SHA-256 in the header as an integrity check), the seed, the vocabulary,
//! and per-epoch history.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "DACP" | version u32 | seed u64 | config sha256 [32 bytes]
//! meta_len u32 | meta JSON (CheckpointMeta)
//! n_arrays u32 | array*
//! array := name_len u16 | name utf-8 | ndim u8 | dim u64 * ndim | f64 * numel
//! ```
//!
//! Nothing in the file depends on wall-clock time, so two runs with the same
//! seed and inputs produce byte-identical checkpoints.

use crate::dann::{DannConfig, DannEpoch, DannState};
use crate::data::{EmbeddingTable, Instance};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::heads::{ClassifierParams, DiscriminatorParams, ReconstructorParams};
use crate::train::{
    fingerprint, AdaptEpoch, AdaptState, BestModel, PretrainEpoch, PretrainState, TrainConfig,
};
use discoda_ad::{Adam, ParamSet, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read as IoRead, Write as IoWrite};
use std::path::Path;

const MAGIC: &[u8; 4] = b"DACP";
const VERSION: u32 = 1;

/// One named tensor in the container.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// JSON metadata block: everything that is not a float array.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// `"pretrain"`, `"adapt"`, or `"dann"`.
    pub stage: String,
    /// The resolved stage config, embedded verbatim.
    pub config: serde_json::Value,
    pub labels: Vec<String>,
    /// Vocabulary backing the embedding tables (order defines row indices).
    pub vocab: Vec<String>,
    pub embedding_dim: usize,
    pub epochs_done: usize,
    pub since_improve: usize,
    pub best_epoch: Option<usize>,
    pub best_value: Option<f64>,
    #[serde(default)]
    pub pretrain_history: Vec<PretrainEpoch>,
    #[serde(default)]
    pub adapt_history: Vec<AdaptEpoch>,
    #[serde(default)]
    pub dann_history: Vec<DannEpoch>,
    /// Labeled target instances of the supervised step, stored inline so the
    /// subset survives resume regardless of corpus files.
    #[serde(default)]
    pub labeled_subset: Vec<Instance>,
}

/// A parsed checkpoint file.
#[derive(Debug, Clone)]
pub struct Container {
    pub seed: u64,
    pub meta: CheckpointMeta,
    pub arrays: Vec<Array>,
}

fn config_hash(config: &serde_json::Value) -> Result<[u8; 32]> {
    let bytes = serde_json::to_vec(config)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.into())
}

/// Serializes and writes a container. The config hash in the header is
/// computed from `meta.config`.
pub fn write_container(path: &Path, c: &Container) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&c.seed.to_le_bytes());
    buf.extend_from_slice(&config_hash(&c.meta.config)?);
    let meta = serde_json::to_vec(&c.meta)?;
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta);
    buf.extend_from_slice(&(c.arrays.len() as u32).to_le_bytes());
    for a in &c.arrays {
        let name = a.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::Checkpoint(format!(
                "array name too long: {} bytes",
                name.len()
            )));
        }
        let numel: usize = a.shape.iter().product();
        if numel != a.data.len() {
            return Err(Error::Checkpoint(format!(
                "array '{}' has {} values for shape {:?}",
                a.name,
                a.data.len(),
                a.shape
            )));
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(a.shape.len() as u8);
        for &d in &a.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &a.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("checkpoint file truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads and validates a container: magic, version, and the config hash
/// against the embedded config.
pub fn read_container(path: &Path) -> Result<Container> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let seed = r.u64()?;
    let stored_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
    if config_hash(&meta.config)? != stored_hash {
        return Err(Error::Checkpoint(
            "config hash mismatch: header does not match embedded config".into(),
        ));
    }
    let n_arrays = r.u32()? as usize;
    let mut arrays = Vec::with_capacity(n_arrays);
    for _ in 0..n_arrays {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("array name is not valid UTF-8".into()))?
            .to_string();
        let ndim = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        arrays.push(Array { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last array",
            bytes.len() - r.pos
        )));
    }
    Ok(Container { seed, meta, arrays })
}

// ── Parameter-set and optimizer array bridges ───────────────────────────

/// Appends every tensor of `set` as `prefix + name`.
pub fn push_set(arrays: &mut Vec<Array>, prefix: &str, set: &dyn ParamSet<f64>) {
    set.visit(&mut |name, t| {
        arrays.push(Array {
            name: format!("{prefix}{name}"),
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        });
    });
}

/// Overwrites every tensor of `set` from `prefix + name` arrays; every
/// visited name must be present with a matching shape.
pub fn load_set(arrays: &[Array], prefix: &str, set: &mut dyn ParamSet<f64>) -> Result<()> {
    let by_name: std::collections::HashMap<&str, &Array> =
        arrays.iter().map(|a| (a.name.as_str(), a)).collect();
    let mut missing = Vec::new();
    set.visit_mut(&mut |name, t| {
        let full = format!("{prefix}{name}");
        match by_name.get(full.as_str()) {
            Some(a) if a.shape == t.shape() => t.data_mut().copy_from_slice(&a.data),
            Some(a) => missing.push(format!(
                "{full} (shape {:?} in file, {:?} in model)",
                a.shape,
                t.shape()
            )),
            None => missing.push(full),
        }
    });
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Checkpoint(format!(
            "checkpoint is missing or mismatches arrays: {}",
            missing.join(", ")
        )))
    }
}

fn push_adam(arrays: &mut Vec<Array>, prefix: &str, opt: &Adam<f64>) {
    for (name, shape, data) in opt.state_arrays() {
        arrays.push(Array {
            name: format!("{prefix}{name}"),
            shape,
            data,
        });
    }
}

fn load_adam(arrays: &[Array], prefix: &str, opt: &mut Adam<f64>) {
    let state: Vec<(String, Vec<usize>, Vec<f64>)> = arrays
        .iter()
        .filter_map(|a| {
            a.name
                .strip_prefix(prefix)
                .map(|n| (n.to_string(), a.shape.clone(), a.data.clone()))
        })
        .collect();
    opt.load_state_arrays(&state);
}

fn embed_arrays(enc: &EncoderParams<f64>) -> (Vec<String>, usize) {
    (enc.embed.tokens().to_vec(), enc.embed.dim())
}

/// Rebuilds an embedding table of the right shape; values are overwritten
/// by [`load_set`] afterwards.
fn blank_embed(vocab: &[String], dim: usize) -> Result<EmbeddingTable<f64>> {
    let rows = vocab.len() + 2;
    EmbeddingTable::from_parts(
        vocab.to_vec(),
        Tensor::new(vec![rows, dim], vec![0.0; rows * dim])
            .map_err(|e| Error::Checkpoint(format!("embedding shape: {e}")))?,
    )
}

fn meta_config<T: serde::de::DeserializeOwned>(meta: &CheckpointMeta) -> Result<T> {
    serde_json::from_value(meta.config.clone()).map_err(|e| {
        Error::Checkpoint(format!("embedded config does not parse for this stage: {e}"))
    })
}

fn expect_stage(meta: &CheckpointMeta, stage: &str) -> Result<()> {
    if meta.stage != stage {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds stage '{}', expected '{stage}'",
            meta.stage
        )));
    }
    Ok(())
}

/// Which training stage a checkpoint file holds, without loading the model.
pub fn checkpoint_stage(path: &Path) -> Result<String> {
    Ok(read_container(path)?.meta.stage)
}

// ── Stage: pretrain ─────────────────────────────────────────────────────

pub fn save_pretrain(path: &Path, state: &PretrainState<f64>, cfg: &TrainConfig) -> Result<()> {
    let (vocab, dim) = embed_arrays(&state.encoder);
    let mut arrays = Vec::new();
    push_set(&mut arrays, "enc.", &state.encoder);
    push_set(&mut arrays, "cls.", &state.classifier);
    if let Some(b) = &state.best {
        push_set(&mut arrays, "best.enc.", &b.encoder);
        push_set(&mut arrays, "best.cls.", &b.classifier);
    }
    push_adam(&mut arrays, "opt.", &state.opt);
    let meta = CheckpointMeta {
        stage: "pretrain".into(),
        config: serde_json::to_value(cfg)?,
        labels: state.labels.clone(),
        vocab,
        embedding_dim: dim,
        epochs_done: state.epochs_done,
        since_improve: state.since_improve,
        best_epoch: state.best.as_ref().map(|b| b.epoch),
        best_value: state.best.as_ref().map(|b| b.value),
        pretrain_history: state.history.clone(),
        adapt_history: Vec::new(),
        dann_history: Vec::new(),
        labeled_subset: Vec::new(),
    };
    write_container(
        path,
        &Container {
            seed: cfg.seed,
            meta,
            arrays,
        },
    )
}

pub fn load_pretrain(path: &Path) -> Result<(PretrainState<f64>, TrainConfig)> {
    let c = read_container(path)?;
    expect_stage(&c.meta, "pretrain")?;
    let cfg: TrainConfig = meta_config(&c.meta)?;
    let mut encoder = EncoderParams::init(
        blank_embed(&c.meta.vocab, c.meta.embedding_dim)?,
        cfg.encoder_dims(),
        0,
    );
    encoder.train_embeddings = cfg.train_embeddings;
    let mut classifier = ClassifierParams::init(encoder.rep_dim(), c.meta.labels.len(), 0);
    load_set(&c.arrays, "enc.", &mut encoder)?;
    load_set(&c.arrays, "cls.", &mut classifier)?;
    let best = match (c.meta.best_epoch, c.meta.best_value) {
        (Some(epoch), Some(value)) => {
            let mut be = encoder.clone();
            let mut bc = classifier.clone();
            load_set(&c.arrays, "best.enc.", &mut be)?;
            load_set(&c.arrays, "best.cls.", &mut bc)?;
            Some(BestModel {
                encoder: be,
                classifier: bc,
                value,
                epoch,
            })
        }
        _ => None,
    };
    let mut opt = Adam::new(cfg.lr_classification);
    load_adam(&c.arrays, "opt.", &mut opt);
    let state = PretrainState {
        encoder,
        classifier,
        opt,
        labels: c.meta.labels.clone(),
        epochs_done: c.meta.epochs_done,
        since_improve: c.meta.since_improve,
        best,
        history: c.meta.pretrain_history.clone(),
    };
    Ok((state, cfg))
}

// ── Stage: adapt ────────────────────────────────────────────────────────

pub fn save_adapt(path: &Path, state: &AdaptState<f64>, cfg: &TrainConfig) -> Result<()> {
    let (vocab, dim) = embed_arrays(&state.ms);
    let mut arrays = Vec::new();
    push_set(&mut arrays, "ms.", &state.ms);
    push_set(&mut arrays, "c.", &state.c);
    push_set(&mut arrays, "mt.", &state.mt);
    push_set(&mut arrays, "d.", &state.d);
    push_set(&mut arrays, "mr.", &state.mr);
    if let Some(b) = &state.best {
        push_set(&mut arrays, "best.mt.", &b.encoder);
        push_set(&mut arrays, "best.c.", &b.classifier);
    }
    push_adam(&mut arrays, "opt_disc.", &state.opt_disc);
    push_adam(&mut arrays, "opt_conf.", &state.opt_conf);
    push_adam(&mut arrays, "opt_sup.", &state.opt_sup);
    let meta = CheckpointMeta {
        stage: "adapt".into(),
        config: serde_json::to_value(cfg)?,
        labels: state.labels.clone(),
        vocab,
        embedding_dim: dim,
        epochs_done: state.epochs_done,
        since_improve: state.since_improve,
        best_epoch: state.best.as_ref().map(|b| b.epoch),
        best_value: state.best.as_ref().map(|b| b.value),
        pretrain_history: Vec::new(),
        adapt_history: state.history.clone(),
        dann_history: Vec::new(),
        labeled_subset: state.labeled_subset.clone(),
    };
    write_container(
        path,
        &Container {
            seed: cfg.seed,
            meta,
            arrays,
        },
    )
}

pub fn load_adapt(path: &Path) -> Result<(AdaptState<f64>, TrainConfig)> {
    let c = read_container(path)?;
    expect_stage(&c.meta, "adapt")?;
    let cfg: TrainConfig = meta_config(&c.meta)?;
    let embed = blank_embed(&c.meta.vocab, c.meta.embedding_dim)?;
    let mut ms = EncoderParams::init(embed, cfg.encoder_dims(), 0);
    ms.train_embeddings = cfg.train_embeddings;
    let mut mt = ms.clone();
    let k = c.meta.labels.len();
    let mut cls = ClassifierParams::init(ms.rep_dim(), k, 0);
    let mut d = DiscriminatorParams::init(ms.rep_dim(), cfg.disc_dims(), 0);
    let mut mr = ReconstructorParams::init(ms.rep_dim(), cfg.recon_dims(), 0);
    load_set(&c.arrays, "ms.", &mut ms)?;
    load_set(&c.arrays, "c.", &mut cls)?;
    load_set(&c.arrays, "mt.", &mut mt)?;
    load_set(&c.arrays, "d.", &mut d)?;
    load_set(&c.arrays, "mr.", &mut mr)?;
    let best = match (c.meta.best_epoch, c.meta.best_value) {
        (Some(epoch), Some(value)) => {
            let mut be = mt.clone();
            let mut bc = cls.clone();
            load_set(&c.arrays, "best.mt.", &mut be)?;
            load_set(&c.arrays, "best.c.", &mut bc)?;
            Some(BestModel {
                encoder: be,
                classifier: bc,
                value,
                epoch,
            })
        }
        _ => None,
    };
    let mut opt_disc = Adam::new(cfg.lr_adversarial);
    let mut opt_conf = Adam::new(cfg.lr_adversarial);
    let mut opt_sup = Adam::new(cfg.lr_classification);
    load_adam(&c.arrays, "opt_disc.", &mut opt_disc);
    load_adam(&c.arrays, "opt_conf.", &mut opt_conf);
    load_adam(&c.arrays, "opt_sup.", &mut opt_sup);
    let ms_print = fingerprint(&ms);
    let c_print = if c.meta.labeled_subset.is_empty() {
        Some(fingerprint(&cls))
    } else {
        None
    };
    let state = AdaptState {
        ms,
        c: cls,
        mt,
        d,
        mr,
        opt_disc,
        opt_conf,
        opt_recon: discoda_ad::Sgd::new(cfg.lr_reconstruction),
        opt_sup,
        labels: c.meta.labels.clone(),
        labeled_subset: c.meta.labeled_subset.clone(),
        epochs_done: c.meta.epochs_done,
        since_improve: c.meta.since_improve,
        best,
        history: c.meta.adapt_history.clone(),
        ms_print,
        c_print,
    };
    Ok((state, cfg))
}

// ── Stage: dann ─────────────────────────────────────────────────────────

pub fn save_dann(path: &Path, state: &DannState<f64>, cfg: &DannConfig) -> Result<()> {
    let (vocab, dim) = embed_arrays(&state.encoder);
    let mut arrays = Vec::new();
    push_set(&mut arrays, "enc.", &state.encoder);
    push_set(&mut arrays, "cls.", &state.classifier);
    push_set(&mut arrays, "d.", &state.d);
    if let Some(b) = &state.best {
        push_set(&mut arrays, "best.enc.", &b.encoder);
        push_set(&mut arrays, "best.cls.", &b.classifier);
    }
    push_adam(&mut arrays, "opt.", &state.opt);
    let meta = CheckpointMeta {
        stage: "dann".into(),
        config: serde_json::to_value(cfg)?,
        labels: state.labels.clone(),
        vocab,
        embedding_dim: dim,
        epochs_done: state.epochs_done,
        since_improve: state.since_improve,
        best_epoch: state.best.as_ref().map(|b| b.epoch),
        best_value: state.best.as_ref().map(|b| b.value),
        pretrain_history: Vec::new(),
        adapt_history: Vec::new(),
        dann_history: state.history.clone(),
        labeled_subset: Vec::new(),
    };
    write_container(
        path,
        &Container {
            seed: cfg.base.seed,
            meta,
            arrays,
        },
    )
}

pub fn load_dann(path: &Path) -> Result<(DannState<f64>, DannConfig)> {
    let c = read_container(path)?;
    expect_stage(&c.meta, "dann")?;
    let cfg: DannConfig = meta_config(&c.meta)?;
    let mut encoder = EncoderParams::init(
        blank_embed(&c.meta.vocab, c.meta.embedding_dim)?,
        cfg.base.encoder_dims(),
        0,
    );
    encoder.train_embeddings = cfg.base.train_embeddings;
    let mut classifier = ClassifierParams::init(encoder.rep_dim(), c.meta.labels.len(), 0);
    let mut d = DiscriminatorParams::init(encoder.rep_dim(), cfg.base.disc_dims(), 0);
    load_set(&c.arrays, "enc.", &mut encoder)?;
    load_set(&c.arrays, "cls.", &mut classifier)?;
    load_set(&c.arrays, "d.", &mut d)?;
    let best = match (c.meta.best_epoch, c.meta.best_value) {
        (Some(epoch), Some(value)) => {
            let mut be = encoder.clone();
            let mut bc = classifier.clone();
            load_set(&c.arrays, "best.enc.", &mut be)?;
            load_set(&c.arrays, "best.cls.", &mut bc)?;
            Some(BestModel {
                encoder: be,
                classifier: bc,
                value,
                epoch,
            })
        }
        _ => None,
    };
    let mut opt = Adam::new(cfg.lr);
    load_adam(&c.arrays, "opt.", &mut opt);
    let state = DannState {
        encoder,
        classifier,
        d,
        opt,
        labels: c.meta.labels.clone(),
        epochs_done: c.meta.epochs_done,
        since_improve: c.meta.since_improve,
        best,
        history: c.meta.dann_history.clone(),
    };
    Ok((state, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dann::train_dann;
    use crate::testkit::{embed_for, tiny_cfg, tiny_corpus};
    use crate::train::{adapt, pretrain, AdaptState, PretrainState};

    fn tmpdir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("discoda-ckpt-{tag}-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn container_round_trips_exactly() {
        let dir = tmpdir("roundtrip");
        let path = dir.join("c.ckpt");
        let meta = CheckpointMeta {
            stage: "pretrain".into(),
            config: serde_json::json!({"a": 1, "b": [1.5, -2.25]}),
            labels: vec!["x".into(), "y".into()],
            vocab: vec!["tok".into()],
            embedding_dim: 3,
            epochs_done: 2,
            since_improve: 1,
            best_epoch: Some(1),
            best_value: Some(0.75),
            pretrain_history: Vec::new(),
            adapt_history: Vec::new(),
            dann_history: Vec::new(),
            labeled_subset: Vec::new(),
        };
        let arrays = vec![
            Array {
                name: "w".into(),
                shape: vec![2, 3],
                data: vec![1.0, -0.5, 0.25, f64::MIN_POSITIVE, 1e300, -0.0],
            },
            Array {
                name: "scalar".into(),
                shape: vec![],
                data: vec![42.0],
            },
        ];
        let c = Container {
            seed: 9,
            meta,
            arrays: arrays.clone(),
        };
        write_container(&path, &c).unwrap();
        let back = read_container(&path).unwrap();
        assert_eq!(back.seed, 9);
        assert_eq!(back.meta.stage, "pretrain");
        assert_eq!(back.meta.best_value, Some(0.75));
        assert_eq!(back.arrays, arrays);
        // Bit-level check on an awkward value.
        assert_eq!(back.arrays[0].data[5].to_bits(), (-0.0f64).to_bits());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn tampered_files_are_rejected() {
        let dir = tmpdir("tamper");
        let path = dir.join("c.ckpt");
        let c = Container {
            seed: 1,
            meta: CheckpointMeta {
                stage: "pretrain".into(),
                config: serde_json::json!({"k": 1}),
                labels: vec![],
                vocab: vec![],
                embedding_dim: 1,
                epochs_done: 0,
                since_improve: 0,
                best_epoch: None,
                best_value: None,
                pretrain_history: Vec::new(),
                adapt_history: Vec::new(),
                dann_history: Vec::new(),
                labeled_subset: Vec::new(),
            },
            arrays: vec![],
        };
        write_container(&path, &c).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();

        // Bad magic.
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(read_container(&path).is_err());

        // Config byte flipped inside the meta JSON: hash mismatch.
        let json_pos = bytes
            .windows(4)
            .position(|w| w == b"\"k\":")
            .expect("embedded config present");
        bytes[json_pos + 4] = b'2';
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_container(&path).is_err());

        // Truncation.
        let c2 = Container {
            seed: 1,
            meta: read_container_meta_fixture(),
            arrays: vec![Array {
                name: "w".into(),
                shape: vec![4],
                data: vec![0.0; 4],
            }],
        };
        write_container(&path, &c2).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 5]).unwrap();
        assert!(read_container(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    fn read_container_meta_fixture() -> CheckpointMeta {
        CheckpointMeta {
            stage: "pretrain".into(),
            config: serde_json::json!({}),
            labels: vec![],
            vocab: vec![],
            embedding_dim: 1,
            epochs_done: 0,
            since_improve: 0,
            best_epoch: None,
            best_value: None,
            pretrain_history: Vec::new(),
            adapt_history: Vec::new(),
            dann_history: Vec::new(),
            labeled_subset: Vec::new(),
        }
    }

    #[test]
    fn pretrain_resume_is_bitwise_identical_to_an_uninterrupted_run() {
        let corpus = tiny_corpus(31);
        let mut cfg = tiny_cfg(31);
        cfg.pretrain_epochs = 4;
        cfg.patience = 99;
        let full = pretrain(&corpus, embed_for(&corpus, &cfg), &cfg).unwrap();

        let dir = tmpdir("pre-resume");
        let path = dir.join("p.ckpt");
        let mut half = PretrainState::new(&corpus, embed_for(&corpus, &cfg), &cfg).unwrap();
        half.run_epoch(&corpus, &cfg).unwrap();
        half.run_epoch(&corpus, &cfg).unwrap();
        save_pretrain(&path, &half, &cfg).unwrap();
        let (mut resumed, cfg2) = load_pretrain(&path).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(resumed.epochs_done, 2);
        while !resumed.finished(&cfg2) {
            resumed.run_epoch(&corpus, &cfg2).unwrap();
        }
        assert_eq!(fingerprint(&full.encoder), fingerprint(&resumed.encoder));
        assert_eq!(
            fingerprint(&full.classifier),
            fingerprint(&resumed.classifier)
        );
        assert_eq!(full.history.len(), resumed.history.len());
        let (fe, fc) = full.best_model();
        let (re, rc) = resumed.best_model();
        assert_eq!(fingerprint(&fe), fingerprint(&re));
        assert_eq!(fingerprint(&fc), fingerprint(&rc));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn adapt_resume_is_bitwise_identical_to_an_uninterrupted_run() {
        let corpus = tiny_corpus(32);
        let mut cfg = tiny_cfg(32);
        cfg.pretrain_epochs = 1;
        cfg.adapt_epochs = 3;
        cfg.patience = 99;
        let pre = pretrain(&corpus, embed_for(&corpus, &cfg), &cfg).unwrap();
        let (ms, c) = pre.best_model();
        let subset = corpus.target_train[..4].to_vec();
        let full = adapt(&corpus, ms.clone(), c.clone(), subset.clone(), &cfg).unwrap();

        let dir = tmpdir("adapt-resume");
        let path = dir.join("a.ckpt");
        let mut half = AdaptState::new(&corpus, ms, c, subset, &cfg).unwrap();
        half.run_epoch(&corpus, &cfg).unwrap();
        save_adapt(&path, &half, &cfg).unwrap();
        let (mut resumed, cfg2) = load_adapt(&path).unwrap();
        assert_eq!(resumed.epochs_done, 1);
        assert_eq!(resumed.labeled_subset.len(), 4);
        while !resumed.finished(&cfg2) {
            resumed.run_epoch(&corpus, &cfg2).unwrap();
        }
        for (a, b) in [
            (fingerprint(&full.ms), fingerprint(&resumed.ms)),
            (fingerprint(&full.c), fingerprint(&resumed.c)),
            (fingerprint(&full.mt), fingerprint(&resumed.mt)),
            (fingerprint(&full.d), fingerprint(&resumed.d)),
            (fingerprint(&full.mr), fingerprint(&resumed.mr)),
        ] {
            assert_eq!(a, b);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn dann_resume_is_bitwise_identical_to_an_uninterrupted_run() {
        let corpus = tiny_corpus(33);
        let mut cfg = crate::dann::DannConfig::desk(33);
        cfg.base = tiny_cfg(33);
        cfg.base.patience = 99;
        cfg.epochs = 3;
        let full = train_dann(&corpus, embed_for(&corpus, &cfg.base), &cfg).unwrap();

        let dir = tmpdir("dann-resume");
        let path = dir.join("d.ckpt");
        let mut half = DannState::new(&corpus, embed_for(&corpus, &cfg.base), &cfg).unwrap();
        half.run_epoch(&corpus, &cfg).unwrap();
        save_dann(&path, &half, &cfg).unwrap();
        let (mut resumed, cfg2) = load_dann(&path).unwrap();
        while !resumed.finished(&cfg2) {
            resumed.run_epoch(&corpus, &cfg2).unwrap();
        }
        assert_eq!(fingerprint(&full.encoder), fingerprint(&resumed.encoder));
        assert_eq!(fingerprint(&full.d), fingerprint(&resumed.d));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn identical_runs_write_byte_identical_checkpoints() {
        let corpus = tiny_corpus(34);
        let mut cfg = tiny_cfg(34);
        cfg.pretrain_epochs = 2;
        let dir = tmpdir("bytes");
        let pa = dir.join("a.ckpt");
        let pb = dir.join("b.ckpt");
        for p in [&pa, &pb] {
            let state = pretrain(&corpus, embed_for(&corpus, &cfg), &cfg).unwrap();
            save_pretrain(p, &state, &cfg).unwrap();
        }
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn loading_the_wrong_stage_is_rejected() {
        let corpus = tiny_corpus(35);
        let mut cfg = tiny_cfg(35);
        cfg.pretrain_epochs = 1;
        let dir = tmpdir("stage");
        let path = dir.join("p.ckpt");
        let state = pretrain(&corpus, embed_for(&corpus, &cfg), &cfg).unwrap();
        save_pretrain(&path, &state, &cfg).unwrap();
        assert!(load_adapt(&path).is_err());
        assert!(load_dann(&path).is_err());
        assert!(load_pretrain(&path).is_ok());
        std::fs::remove_dir_all(&dir).ok();
    }
}
