//! Staged training.
//!
//! Stage 1 ([`pretrain`]) fits a source encoder and classifier on labeled
//! source pairs. Stage 2 ([`adapt`]) freezes both, clones the encoder into a
//! target encoder, and alternates three kinds of updates per epoch:
//!
//! 1. adversarial: the discriminator learns to tell source features from
//!    target features (features detached), then the target encoder is
//!    updated to make the frozen discriminator call its features "source";
//! 2. reconstruction: a bottlenecked reconstructor maps target-encoder
//!    features onto the frozen source encoder's features of the same
//!    instances, updating both the target encoder and the reconstructor;
//! 3. supervised (optional): plain cross-entropy on a small labeled target
//!    subset, updating the target encoder and the classifier.
//!
//! Each update kind has its own optimizer and touches a fixed parameter
//! bundle; [`fingerprint`] hashes make those boundaries checkable.

use crate::data::{label_ids, Corpus, EmbeddingTable, Instance};
use crate::encoder::{encode_batch, encode_instance, EncoderDims, EncoderParams};
use crate::error::{Error, Result};
use crate::eval::ConfusionMatrix;
use crate::heads::{
    class_logits, source_probability, ClassifierParams, DiscDims, DiscriminatorParams,
    ReconDims, ReconstructorParams,
};
use crate::losses::{
    classification_loss, confusion_loss, discriminator_loss, reconstruction_loss,
    supervised_loss,
};
use discoda_ad::optim::{collect_grads, Adam, Joint, Sgd};
use discoda_ad::rng::{derive_seed, epoch_order};
use discoda_ad::tape::Tape;
use discoda_ad::{GradMap, ParamSet, Scalar};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Shuffle-stream tags. The source-classification stream is shared with the
/// joint baseline in [`crate::dann`] so that, with reversal strength zero,
/// it consumes source batches in exactly the pretraining order.
pub(crate) const SHUFFLE_SOURCE: &str = "shuffle.source";
pub(crate) const SHUFFLE_TARGET: &str = "shuffle.target";
pub(crate) const SHUFFLE_RECON: &str = "shuffle.recon";
pub(crate) const SHUFFLE_SUPERVISED: &str = "shuffle.supervised";

/// All knobs of the staged pipeline. `Default` holds the reference-scale
/// values; [`TrainConfig::desk`] is a small preset for synthetic corpora.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// LSTM hidden units per direction.
    pub hidden: usize,
    /// Width of randomly initialized embeddings (ignored when a pretrained
    /// table is loaded).
    pub embedding_dim: usize,
    /// Tokens kept per argument; longer arguments are truncated.
    pub max_len: usize,
    pub disc_h1: usize,
    pub disc_h2: usize,
    pub recon_h1: usize,
    pub recon_bottleneck: usize,
    pub recon_h2: usize,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub adapt_epochs: usize,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    /// Adam rate for classification objectives (pretraining and the
    /// supervised target step).
    pub lr_classification: f64,
    /// Adam rate for both adversarial updates.
    pub lr_adversarial: f64,
    /// SGD rate for the reconstruction update.
    pub lr_reconstruction: f64,
    pub label_smoothing: f64,
    /// Power-iteration steps per discriminator update.
    pub sn_iterations: usize,
    /// Update embedding rows during training. Off by default: frozen rows
    /// keep source and target encoders comparable when the table is a
    /// pretrained one. The desk preset turns it on because its embeddings
    /// are random and carry no structure worth preserving.
    pub train_embeddings: bool,
    pub use_spectral_norm: bool,
    pub use_label_smoothing: bool,
    pub use_reconstruction: bool,
    /// Verify after every update that only the designated parameter bundle
    /// changed (slow; meant for tests).
    pub stage_checks: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            hidden: 50,
            embedding_dim: 300,
            max_len: 80,
            disc_h1: 200,
            disc_h2: 200,
            recon_h1: 120,
            recon_bottleneck: 15,
            recon_h2: 120,
            batch_size: 32,
            pretrain_epochs: 30,
            adapt_epochs: 30,
            patience: 5,
            lr_classification: 1e-4,
            lr_adversarial: 1e-6,
            lr_reconstruction: 1e-2,
            label_smoothing: 0.1,
            sn_iterations: 1,
            train_embeddings: false,
            use_spectral_norm: true,
            use_label_smoothing: true,
            use_reconstruction: true,
            stage_checks: false,
        }
    }
}

impl TrainConfig {
    /// Small widths and faster rates suited to the synthetic corpora used
    /// in tests; same architecture and schedule shape as the default.
    pub fn desk(seed: u64) -> Self {
        Self {
            seed,
            hidden: 8,
            embedding_dim: 12,
            max_len: 16,
            disc_h1: 16,
            disc_h2: 12,
            recon_h1: 16,
            recon_bottleneck: 6,
            recon_h2: 16,
            batch_size: 16,
            pretrain_epochs: 12,
            adapt_epochs: 50,
            patience: 50,
            lr_classification: 3e-3,
            lr_adversarial: 3e-4,
            lr_reconstruction: 1e-2,
            train_embeddings: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, usize); 10] = [
            ("hidden", self.hidden),
            ("embedding_dim", self.embedding_dim),
            ("max_len", self.max_len),
            ("disc_h1", self.disc_h1),
            ("disc_h2", self.disc_h2),
            ("recon_h1", self.recon_h1),
            ("recon_bottleneck", self.recon_bottleneck),
            ("recon_h2", self.recon_h2),
            ("batch_size", self.batch_size),
            ("sn_iterations", self.sn_iterations),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("lr_classification", self.lr_classification),
            ("lr_adversarial", self.lr_adversarial),
            ("lr_reconstruction", self.lr_reconstruction),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a positive number")));
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing must lie in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        Ok(())
    }

    pub fn encoder_dims(&self) -> EncoderDims {
        EncoderDims::with_hidden(self.hidden, self.max_len)
    }

    pub fn disc_dims(&self) -> DiscDims {
        DiscDims {
            h1: self.disc_h1,
            h2: self.disc_h2,
        }
    }

    pub fn recon_dims(&self) -> ReconDims {
        ReconDims {
            h1: self.recon_h1,
            bottleneck: self.recon_bottleneck,
            h2: self.recon_h2,
        }
    }

    /// Effective smoothing for the source classification objective.
    pub fn smoothing(&self) -> f64 {
        if self.use_label_smoothing {
            self.label_smoothing
        } else {
            0.0
        }
    }
}

/// SHA-256 over names, shapes, and little-endian `f64` values of a parameter
/// set, in visit order. Two sets with the same fingerprint hold bitwise-equal
/// parameters.
pub fn fingerprint<S: Scalar>(set: &dyn ParamSet<S>) -> String {
    let mut hasher = Sha256::new();
    set.visit(&mut |name, t| {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        for &d in t.shape() {
            hasher.update((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            hasher.update(v.to_f64c().to_le_bytes());
        }
    });
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

// ── Prediction ──────────────────────────────────────────────────────────

/// Instances scored per tape; bounds peak graph size during inference.
const PREDICT_CHUNK: usize = 64;

/// Greedy class predictions; ties resolve to the lowest class index.
pub fn predict<S: Scalar>(
    enc: &EncoderParams<S>,
    cls: &ClassifierParams<S>,
    instances: &[Instance],
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(instances.len());
    for chunk in instances.chunks(PREDICT_CHUNK) {
        let mut tape = Tape::new();
        let en = enc.stage_frozen(&mut tape);
        let cn = cls.stage_frozen(&mut tape);
        for inst in chunk {
            let rep = encode_instance(&mut tape, enc, &en, inst)?;
            let logits = class_logits(&mut tape, &cn, rep)?;
            let row = tape.value(logits);
            let mut best = 0;
            for (i, &v) in row.data().iter().enumerate() {
                if v > row.data()[best] {
                    best = i;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Macro F1 of predictions against gold labels; `None` when the split is
/// empty or not fully labeled (no early-stopping signal available).
pub fn labeled_macro_f1<S: Scalar>(
    enc: &EncoderParams<S>,
    cls: &ClassifierParams<S>,
    instances: &[Instance],
    labels: &[String],
) -> Result<Option<f64>> {
    if instances.is_empty() || instances.iter().any(|i| i.label.is_none()) {
        return Ok(None);
    }
    let gold = label_ids(instances, labels)?;
    let pred = predict(enc, cls, instances)?;
    let cm = ConfusionMatrix::from_pairs(&gold, &pred, labels)?;
    Ok(Some(cm.macro_f1()))
}

// ── Pretraining ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    /// Macro F1 on the source dev split, when it is labeled and nonempty.
    pub dev_macro_f1: Option<f64>,
}

/// Snapshot of the best-so-far model by dev metric.
#[derive(Debug, Clone)]
pub struct BestModel<S> {
    pub encoder: EncoderParams<S>,
    pub classifier: ClassifierParams<S>,
    pub value: f64,
    pub epoch: usize,
}

/// Resumable pretraining state; every field is carried by checkpoints.
#[derive(Debug, Clone)]
pub struct PretrainState<S: Scalar> {
    pub encoder: EncoderParams<S>,
    pub classifier: ClassifierParams<S>,
    pub opt: Adam<S>,
    pub labels: Vec<String>,
    pub epochs_done: usize,
    pub since_improve: usize,
    pub best: Option<BestModel<S>>,
    pub history: Vec<PretrainEpoch>,
}

pub(crate) fn require_labeled(instances: &[Instance], split: &str) -> Result<()> {
    if let Some(bad) = instances.iter().find(|i| i.label.is_none()) {
        return Err(Error::Data(format!(
            "instance '{}' in {split} has no label",
            bad.id
        )));
    }
    Ok(())
}

impl<S: Scalar> PretrainState<S> {
    pub fn new(corpus: &Corpus, embed: EmbeddingTable<S>, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if corpus.source_train.is_empty() {
            return Err(Error::Data("source training split is empty".into()));
        }
        require_labeled(&corpus.source_train, "source-train")?;
        if corpus.labels.len() < 2 {
            return Err(Error::Data(format!(
                "need at least 2 classes, found {:?}",
                corpus.labels
            )));
        }
        let mut encoder = EncoderParams::init(
            embed,
            cfg.encoder_dims(),
            derive_seed(cfg.seed, "init.encoder.source"),
        );
        encoder.train_embeddings = cfg.train_embeddings;
        let classifier = ClassifierParams::init(
            encoder.rep_dim(),
            corpus.labels.len(),
            derive_seed(cfg.seed, "init.classifier"),
        );
        Ok(Self {
            encoder,
            classifier,
            opt: Adam::new(S::c(cfg.lr_classification)),
            labels: corpus.labels.clone(),
            epochs_done: 0,
            since_improve: 0,
            best: None,
            history: Vec::new(),
        })
    }

    /// True once the epoch budget is spent or patience has run out (the
    /// latter only when a dev metric exists).
    pub fn finished(&self, cfg: &TrainConfig) -> bool {
        if self.epochs_done >= cfg.pretrain_epochs {
            return true;
        }
        self.best.is_some() && self.since_improve >= cfg.patience
    }

    /// The best model by dev metric, or the current one when no dev metric
    /// was ever available.
    pub fn best_model(&self) -> (EncoderParams<S>, ClassifierParams<S>) {
        match &self.best {
            Some(b) => (b.encoder.clone(), b.classifier.clone()),
            None => (self.encoder.clone(), self.classifier.clone()),
        }
    }

    /// One pass over the source training split.
    pub fn run_epoch(&mut self, corpus: &Corpus, cfg: &TrainConfig) -> Result<PretrainEpoch> {
        let instances = &corpus.source_train;
        let targets = label_ids(instances, &self.labels)?;
        let order = epoch_order(cfg.seed, SHUFFLE_SOURCE, self.epochs_done, instances.len());
        let mut loss_sum = 0.0;
        for batch_ids in order.chunks(cfg.batch_size) {
            let batch: Vec<&Instance> = batch_ids.iter().map(|&i| &instances[i]).collect();
            let batch_targets: Vec<usize> = batch_ids.iter().map(|&i| targets[i]).collect();
            let mut tape = Tape::new();
            let en = self.encoder.stage(&mut tape);
            let cn = self.classifier.stage(&mut tape);
            let reps = encode_batch(&mut tape, &self.encoder, &en, &batch)?;
            let loss = classification_loss(
                &mut tape,
                &cn,
                &reps,
                &batch_targets,
                self.labels.len(),
                cfg.smoothing(),
            )?;
            loss_sum += tape.value(loss).item().to_f64c() * batch.len() as f64;
            let grads = tape.backward(loss)?;
            let mut gm = GradMap::new();
            collect_grads(&tape, &grads, &en.entries, "enc.", &mut gm);
            collect_grads(&tape, &grads, &cn.entries, "cls.", &mut gm);
            let mut joint = Joint::new(vec![
                ("enc.", &mut self.encoder as &mut dyn ParamSet<S>),
                ("cls.", &mut self.classifier),
            ]);
            self.opt.step(&mut joint, &gm)?;
        }
        let train_loss = loss_sum / instances.len() as f64;
        let dev_macro_f1 = labeled_macro_f1(
            &self.encoder,
            &self.classifier,
            &corpus.source_dev,
            &self.labels,
        )?;
        let record = PretrainEpoch {
            epoch: self.epochs_done,
            train_loss,
            dev_macro_f1,
        };
        self.epochs_done += 1;
        if let Some(f1) = dev_macro_f1 {
            if self.best.as_ref().map_or(true, |b| f1 > b.value) {
                self.best = Some(BestModel {
                    encoder: self.encoder.clone(),
                    classifier: self.classifier.clone(),
                    value: f1,
                    epoch: record.epoch,
                });
                self.since_improve = 0;
            } else {
                self.since_improve += 1;
            }
        }
        self.history.push(record.clone());
        log::info!(
            "pretrain epoch {}: loss {:.4}, dev macro F1 {}",
            record.epoch,
            record.train_loss,
            record
                .dev_macro_f1
                .map_or("n/a".to_string(), |v| format!("{v:.4}"))
        );
        Ok(record)
    }
}

/// Runs pretraining to completion and returns the final state.
pub fn pretrain<S: Scalar>(
    corpus: &Corpus,
    embed: EmbeddingTable<S>,
    cfg: &TrainConfig,
) -> Result<PretrainState<S>> {
    let mut state = PretrainState::new(corpus, embed, cfg)?;
    while !state.finished(cfg) {
        state.run_epoch(corpus, cfg)?;
    }
    Ok(state)
}

// ── Adaptation ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptEpoch {
    pub epoch: usize,
    /// Mean discriminator objective across its updates this epoch.
    pub disc_loss: f64,
    /// Mean target-encoder confusion objective across its updates.
    pub confusion_loss: f64,
    pub recon_loss: Option<f64>,
    pub supervised_loss: Option<f64>,
    /// Logged total: the sum of the enabled loss terms above, each with
    /// coefficient one. Disabling a component removes exactly its term.
    pub objective: f64,
    /// Domain accuracy of the frozen discriminator on held-out dev features
    /// (both dev splits nonempty), measured after the epoch's updates.
    pub disc_dev_accuracy: Option<f64>,
    /// Macro F1 of (target encoder + classifier) on the target dev split.
    pub dev_macro_f1: Option<f64>,
}

/// Resumable adaptation state. The source encoder and classifier are frozen
/// inputs here; the classifier changes only through the supervised step.
#[derive(Debug, Clone)]
pub struct AdaptState<S: Scalar> {
    pub ms: EncoderParams<S>,
    pub c: ClassifierParams<S>,
    pub mt: EncoderParams<S>,
    pub d: DiscriminatorParams<S>,
    pub mr: ReconstructorParams<S>,
    pub opt_disc: Adam<S>,
    pub opt_conf: Adam<S>,
    pub opt_recon: Sgd<S>,
    pub opt_sup: Adam<S>,
    pub labels: Vec<String>,
    /// Labeled target instances for the optional supervised step; fixed for
    /// the whole run (and across resumes).
    pub labeled_subset: Vec<Instance>,
    pub epochs_done: usize,
    pub since_improve: usize,
    pub best: Option<BestModel<S>>,
    pub history: Vec<AdaptEpoch>,
    pub(crate) ms_print: String,
    pub(crate) c_print: Option<String>,
}

impl<S: Scalar> AdaptState<S> {
    pub fn new(
        corpus: &Corpus,
        ms: EncoderParams<S>,
        c: ClassifierParams<S>,
        labeled_subset: Vec<Instance>,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if corpus.target_train.is_empty() {
            return Err(Error::Data("target training split is empty".into()));
        }
        if corpus.source_train.is_empty() {
            return Err(Error::Data(
                "adversarial adaptation needs source training instances".into(),
            ));
        }
        require_labeled(&labeled_subset, "labeled subset")?;
        label_ids(&labeled_subset, &corpus.labels)?;
        if c.num_classes() != corpus.labels.len() {
            return Err(Error::Train(format!(
                "classifier has {} classes but the corpus has {}",
                c.num_classes(),
                corpus.labels.len()
            )));
        }
        let rep = ms.rep_dim();
        let mt = ms.clone();
        let d = DiscriminatorParams::init(
            rep,
            cfg.disc_dims(),
            derive_seed(cfg.seed, "init.discriminator"),
        );
        let mr = ReconstructorParams::init(
            rep,
            cfg.recon_dims(),
            derive_seed(cfg.seed, "init.reconstructor"),
        );
        let ms_print = fingerprint(&ms);
        let c_print = if labeled_subset.is_empty() {
            Some(fingerprint(&c))
        } else {
            None
        };
        Ok(Self {
            ms,
            c,
            mt,
            d,
            mr,
            opt_disc: Adam::new(S::c(cfg.lr_adversarial)),
            opt_conf: Adam::new(S::c(cfg.lr_adversarial)),
            opt_recon: Sgd::new(S::c(cfg.lr_reconstruction)),
            opt_sup: Adam::new(S::c(cfg.lr_classification)),
            labels: corpus.labels.clone(),
            labeled_subset,
            epochs_done: 0,
            since_improve: 0,
            best: None,
            history: Vec::new(),
            ms_print,
            c_print,
        })
    }

    pub fn finished(&self, cfg: &TrainConfig) -> bool {
        if self.epochs_done >= cfg.adapt_epochs {
            return true;
        }
        self.best.is_some() && self.since_improve >= cfg.patience
    }

    /// Best (target encoder, classifier) by target-dev macro F1, or the
    /// current pair when no dev metric was available.
    pub fn best_model(&self) -> (EncoderParams<S>, ClassifierParams<S>) {
        match &self.best {
            Some(b) => (b.encoder.clone(), b.classifier.clone()),
            None => (self.mt.clone(), self.c.clone()),
        }
    }

    fn all_prints(&self) -> [String; 5] {
        [
            fingerprint(&self.ms),
            fingerprint(&self.c),
            fingerprint(&self.mt),
            fingerprint(&self.d),
            fingerprint(&self.mr),
        ]
    }

    fn assert_stage(
        &self,
        before: &[String; 5],
        may_change: &[usize],
        step: &str,
    ) -> Result<()> {
        const NAMES: [&str; 5] = [
            "source encoder",
            "classifier",
            "target encoder",
            "discriminator",
            "reconstructor",
        ];
        let after = self.all_prints();
        for i in 0..5 {
            if !may_change.contains(&i) && before[i] != after[i] {
                return Err(Error::Train(format!(
                    "{} changed during a {step} update",
                    NAMES[i]
                )));
            }
        }
        Ok(())
    }

    /// One adaptation epoch: adversarial pass, reconstruction pass, and
    /// (with a labeled subset) a supervised pass.
    pub fn run_epoch(&mut self, corpus: &Corpus, cfg: &TrainConfig) -> Result<AdaptEpoch> {
        let epoch = self.epochs_done;
        let src = &corpus.source_train;
        let tgt = &corpus.target_train;

        // Adversarial pass: one discriminator update and one target-encoder
        // update per target batch, with source batches cycling.
        let tgt_order = epoch_order(cfg.seed, SHUFFLE_TARGET, epoch, tgt.len());
        let src_order = epoch_order(cfg.seed, SHUFFLE_SOURCE, epoch, src.len());
        let src_batches: Vec<&[usize]> = src_order.chunks(cfg.batch_size).collect();
        let mut disc_sum = 0.0;
        let mut conf_sum = 0.0;
        let mut steps = 0usize;
        for (bi, tgt_ids) in tgt_order.chunks(cfg.batch_size).enumerate() {
            let src_ids = src_batches[bi % src_batches.len()];
            let tgt_batch: Vec<&Instance> = tgt_ids.iter().map(|&i| &tgt[i]).collect();
            let src_batch: Vec<&Instance> = src_ids.iter().map(|&i| &src[i]).collect();

            // Discriminator update (features detached inside the loss).
            let before = cfg.stage_checks.then(|| self.all_prints());
            if cfg.use_spectral_norm {
                self.d.spectral_update(cfg.sn_iterations);
            }
            {
                let mut tape = Tape::new();
                let en_s = self.ms.stage_frozen(&mut tape);
                let en_t = self.mt.stage_frozen(&mut tape);
                let dn = self.d.stage(&mut tape, cfg.use_spectral_norm);
                let fs = encode_batch(&mut tape, &self.ms, &en_s, &src_batch)?;
                let ft = encode_batch(&mut tape, &self.mt, &en_t, &tgt_batch)?;
                let loss = discriminator_loss(&mut tape, &dn, &fs, &ft)?;
                disc_sum += tape.value(loss).item().to_f64c();
                let grads = tape.backward(loss)?;
                let mut gm = GradMap::new();
                collect_grads(&tape, &grads, &dn.entries, "", &mut gm);
                self.opt_disc.step(&mut self.d, &gm)?;
            }
            if let Some(before) = before {
                self.assert_stage(&before, &[3], "discriminator")?;
            }

            // Target-encoder update against the frozen discriminator.
            let before = cfg.stage_checks.then(|| self.all_prints());
            {
                let mut tape = Tape::new();
                let en_t = self.mt.stage(&mut tape);
                let dn = self.d.stage_frozen(&mut tape, cfg.use_spectral_norm);
                let ft = encode_batch(&mut tape, &self.mt, &en_t, &tgt_batch)?;
                let loss = confusion_loss(&mut tape, &dn, &ft)?;
                conf_sum += tape.value(loss).item().to_f64c();
                let grads = tape.backward(loss)?;
                let mut gm = GradMap::new();
                collect_grads(&tape, &grads, &en_t.entries, "", &mut gm);
                self.opt_conf.step(&mut self.mt, &gm)?;
            }
            if let Some(before) = before {
                self.assert_stage(&before, &[2], "target-encoder")?;
            }
            steps += 1;
        }

        // Reconstruction pass.
        let recon_loss = if cfg.use_reconstruction {
            let order = epoch_order(cfg.seed, SHUFFLE_RECON, epoch, tgt.len());
            let mut sum = 0.0;
            let mut n = 0usize;
            for ids in order.chunks(cfg.batch_size) {
                let batch: Vec<&Instance> = ids.iter().map(|&i| &tgt[i]).collect();
                let before = cfg.stage_checks.then(|| self.all_prints());
                let mut tape = Tape::new();
                let en_s = self.ms.stage_frozen(&mut tape);
                let en_t = self.mt.stage(&mut tape);
                let rn = self.mr.stage(&mut tape);
                let ft = encode_batch(&mut tape, &self.mt, &en_t, &batch)?;
                let fs = encode_batch(&mut tape, &self.ms, &en_s, &batch)?;
                let loss = reconstruction_loss(&mut tape, &rn, &ft, &fs)?;
                sum += tape.value(loss).item().to_f64c();
                n += 1;
                let grads = tape.backward(loss)?;
                let mut gm = GradMap::new();
                collect_grads(&tape, &grads, &en_t.entries, "mt.", &mut gm);
                collect_grads(&tape, &grads, &rn.entries, "mr.", &mut gm);
                let mut joint = Joint::new(vec![
                    ("mt.", &mut self.mt as &mut dyn ParamSet<S>),
                    ("mr.", &mut self.mr),
                ]);
                self.opt_recon.step(&mut joint, &gm)?;
                if let Some(before) = before {
                    self.assert_stage(&before, &[2, 4], "reconstruction")?;
                }
            }
            Some(sum / n.max(1) as f64)
        } else {
            None
        };

        // Supervised pass on the labeled target subset.
        let supervised_loss_mean = if self.labeled_subset.is_empty() {
            None
        } else {
            let subset = self.labeled_subset.clone();
            let targets = label_ids(&subset, &self.labels)?;
            let order = epoch_order(cfg.seed, SHUFFLE_SUPERVISED, epoch, subset.len());
            let mut sum = 0.0;
            for ids in order.chunks(cfg.batch_size) {
                let batch: Vec<&Instance> = ids.iter().map(|&i| &subset[i]).collect();
                let batch_targets: Vec<usize> = ids.iter().map(|&i| targets[i]).collect();
                let before = cfg.stage_checks.then(|| self.all_prints());
                let mut tape = Tape::new();
                let en_t = self.mt.stage(&mut tape);
                let cn = self.c.stage(&mut tape);
                let reps = encode_batch(&mut tape, &self.mt, &en_t, &batch)?;
                let loss =
                    supervised_loss(&mut tape, &cn, &reps, &batch_targets, self.labels.len())?;
                sum += tape.value(loss).item().to_f64c() * batch.len() as f64;
                let grads = tape.backward(loss)?;
                let mut gm = GradMap::new();
                collect_grads(&tape, &grads, &en_t.entries, "mt.", &mut gm);
                collect_grads(&tape, &grads, &cn.entries, "c.", &mut gm);
                let mut joint = Joint::new(vec![
                    ("mt.", &mut self.mt as &mut dyn ParamSet<S>),
                    ("c.", &mut self.c),
                ]);
                self.opt_sup.step(&mut joint, &gm)?;
                if let Some(before) = before {
                    self.assert_stage(&before, &[1, 2], "supervised")?;
                }
            }
            Some(sum / subset.len() as f64)
        };

        // End-of-epoch diagnostics and bookkeeping.
        let disc_dev_accuracy =
            discriminator_dev_accuracy(self, &corpus.source_dev, &corpus.target_dev, cfg)?;
        let dev_macro_f1 =
            labeled_macro_f1(&self.mt, &self.c, &corpus.target_dev, &self.labels)?;
        let disc_loss = disc_sum / steps.max(1) as f64;
        let confusion = conf_sum / steps.max(1) as f64;
        let record = AdaptEpoch {
            epoch,
            disc_loss,
            confusion_loss: confusion,
            recon_loss,
            supervised_loss: supervised_loss_mean,
            objective: disc_loss
                + confusion
                + recon_loss.unwrap_or(0.0)
                + supervised_loss_mean.unwrap_or(0.0),
            disc_dev_accuracy,
            dev_macro_f1,
        };
        self.epochs_done += 1;
        if let Some(f1) = dev_macro_f1 {
            if self.best.as_ref().map_or(true, |b| f1 > b.value) {
                self.best = Some(BestModel {
                    encoder: self.mt.clone(),
                    classifier: self.c.clone(),
                    value: f1,
                    epoch,
                });
                self.since_improve = 0;
            } else {
                self.since_improve += 1;
            }
        }
        self.history.push(record.clone());

        // Frozen-input invariants, cheap enough to hold every epoch: the
        // source encoder never moves; without a labeled subset, neither
        // does the classifier.
        if fingerprint(&self.ms) != self.ms_print {
            return Err(Error::Train(
                "source encoder changed during adaptation".into(),
            ));
        }
        if let Some(cp) = &self.c_print {
            if &fingerprint(&self.c) != cp {
                return Err(Error::Train(
                    "classifier changed during unsupervised adaptation".into(),
                ));
            }
        }
        log::info!(
            "adapt epoch {}: disc {:.4}, confusion {:.4}, recon {}, sup {}, disc dev acc {}, dev macro F1 {}",
            record.epoch,
            record.disc_loss,
            record.confusion_loss,
            fmt_opt(record.recon_loss),
            fmt_opt(record.supervised_loss),
            fmt_opt(record.disc_dev_accuracy),
            fmt_opt(record.dev_macro_f1),
        );
        Ok(record)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".to_string(), |v| format!("{v:.4}"))
}

/// Domain accuracy of the current discriminator on held-out dev instances:
/// source-dev features from the source encoder, target-dev features from the
/// target encoder. `None` when either split is empty.
pub fn discriminator_dev_accuracy<S: Scalar>(
    state: &AdaptState<S>,
    source_dev: &[Instance],
    target_dev: &[Instance],
    cfg: &TrainConfig,
) -> Result<Option<f64>> {
    if source_dev.is_empty() || target_dev.is_empty() {
        return Ok(None);
    }
    let mut correct = 0usize;
    for (instances, enc, is_source) in [
        (source_dev, &state.ms, true),
        (target_dev, &state.mt, false),
    ] {
        for chunk in instances.chunks(PREDICT_CHUNK) {
            let mut tape = Tape::new();
            let en = enc.stage_frozen(&mut tape);
            let dn = state.d.stage_frozen(&mut tape, cfg.use_spectral_norm);
            for inst in chunk {
                let rep = encode_instance(&mut tape, enc, &en, inst)?;
                let p = source_probability(&mut tape, &dn, rep)?;
                let says_source = tape.value(p).item().to_f64c() > 0.5;
                if says_source == is_source {
                    correct += 1;
                }
            }
        }
    }
    Ok(Some(
        correct as f64 / (source_dev.len() + target_dev.len()) as f64,
    ))
}

/// Runs adaptation to completion from a pretrained encoder and classifier.
pub fn adapt<S: Scalar>(
    corpus: &Corpus,
    ms: EncoderParams<S>,
    c: ClassifierParams<S>,
    labeled_subset: Vec<Instance>,
    cfg: &TrainConfig,
) -> Result<AdaptState<S>> {
    let mut state = AdaptState::new(corpus, ms, c, labeled_subset, cfg)?;
    while !state.finished(cfg) {
        state.run_epoch(corpus, cfg)?;
    }
    Ok(state)
}
