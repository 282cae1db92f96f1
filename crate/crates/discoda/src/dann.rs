//! Joint adversarial baseline with a gradient reversal layer.
//!
//! Unlike the staged pipeline in [`crate::train`], this system trains one
//! shared encoder, the classifier, and a domain discriminator together in a
//! single loop. Each step minimizes the source classification loss plus a
//! domain-classification loss whose gradient is multiplied by `-lambda`
//! where it enters the encoder, so the encoder is pushed to make the two
//! domains indistinguishable while the discriminator learns to separate
//! them. The discriminator here is unnormalized by default, as in the
//! benchmark this reproduces; a flag turns spectral normalization on to
//! equalize ablations.

use crate::data::{label_ids, Corpus, EmbeddingTable, Instance};
use crate::encoder::{encode_batch, EncoderParams};
use crate::error::{Error, Result};
use crate::heads::{ClassifierParams, DiscriminatorParams};
use crate::losses::{classification_loss, domain_loss};
use crate::train::{
    labeled_macro_f1, require_labeled, BestModel, TrainConfig, SHUFFLE_SOURCE, SHUFFLE_TARGET,
};
use discoda_ad::rng::derive_seed;
use discoda_ad::rng::epoch_order;
use discoda_ad::tape::Tape;
use discoda_ad::{collect_grads, Adam, GradMap, Joint, ParamSet, Scalar};
use serde::{Deserialize, Serialize};

/// Configuration of the joint baseline. Architecture widths, seed, batch
/// size, and label smoothing come from the embedded [`TrainConfig`]; the
/// fields here are specific to the joint loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DannConfig {
    pub base: TrainConfig,
    /// Reversal strength: encoder gradients from the domain loss are scaled
    /// by `-lambda`. Zero disables adaptation entirely (useful as a
    /// source-only control).
    pub lambda: f64,
    /// Single Adam rate shared by encoder, classifier, and discriminator.
    pub lr: f64,
    pub epochs: usize,
    /// Off by default: the benchmark discriminator is unnormalized.
    pub use_spectral_norm: bool,
}

impl Default for DannConfig {
    fn default() -> Self {
        Self {
            base: TrainConfig::default(),
            lambda: 0.25,
            lr: 2e-4,
            epochs: 30,
            use_spectral_norm: false,
        }
    }
}

impl DannConfig {
    /// Desk-scale preset matching [`TrainConfig::desk`].
    pub fn desk(seed: u64) -> Self {
        Self {
            base: TrainConfig::desk(seed),
            lr: 3e-3,
            epochs: 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be a positive number, got {}",
                self.lr
            )));
        }
        Ok(())
    }

    /// Backward scale applied where domain gradients enter the encoder.
    /// Normalized so that `lambda == 0` yields positive zero, keeping the
    /// zero-strength run bit-for-bit identical to source-only training.
    fn reversal_factor<S: Scalar>(&self) -> S {
        if self.lambda == 0.0 {
            S::zero()
        } else {
            S::c(-self.lambda)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DannEpoch {
    pub epoch: usize,
    /// Mean source classification loss over the epoch's batches.
    pub cls_loss: f64,
    /// Mean domain loss over the epoch's batches.
    pub domain_loss: f64,
    /// Macro F1 on the target dev split, when labeled and nonempty.
    pub dev_macro_f1: Option<f64>,
}

/// Resumable state of the joint loop.
#[derive(Debug, Clone)]
pub struct DannState<S: Scalar> {
    pub encoder: EncoderParams<S>,
    pub classifier: ClassifierParams<S>,
    pub d: DiscriminatorParams<S>,
    pub opt: Adam<S>,
    pub labels: Vec<String>,
    pub epochs_done: usize,
    pub since_improve: usize,
    pub best: Option<BestModel<S>>,
    pub history: Vec<DannEpoch>,
}

impl<S: Scalar> DannState<S> {
    pub fn new(corpus: &Corpus, embed: EmbeddingTable<S>, cfg: &DannConfig) -> Result<Self> {
        cfg.validate()?;
        if corpus.source_train.is_empty() || corpus.target_train.is_empty() {
            return Err(Error::Data(
                "joint training needs both source and target training splits".into(),
            ));
        }
        require_labeled(&corpus.source_train, "source-train")?;
        if corpus.labels.len() < 2 {
            return Err(Error::Data(format!(
                "need at least 2 classes, found {:?}",
                corpus.labels
            )));
        }
        // Same initialization streams as the staged pipeline, so a
        // zero-strength run starts from the source-only parameters.
        let base = &cfg.base;
        let mut encoder = EncoderParams::init(
            embed,
            base.encoder_dims(),
            derive_seed(base.seed, "init.encoder.source"),
        );
        encoder.train_embeddings = base.train_embeddings;
        let classifier = ClassifierParams::init(
            encoder.rep_dim(),
            corpus.labels.len(),
            derive_seed(base.seed, "init.classifier"),
        );
        let d = DiscriminatorParams::init(
            encoder.rep_dim(),
            base.disc_dims(),
            derive_seed(base.seed, "init.discriminator"),
        );
        Ok(Self {
            encoder,
            classifier,
            d,
            opt: Adam::new(S::c(cfg.lr)),
            labels: corpus.labels.clone(),
            epochs_done: 0,
            since_improve: 0,
            best: None,
            history: Vec::new(),
        })
    }

    pub fn finished(&self, cfg: &DannConfig) -> bool {
        if self.epochs_done >= cfg.epochs {
            return true;
        }
        self.best.is_some() && self.since_improve >= cfg.base.patience
    }

    /// Best (encoder, classifier) by target-dev macro F1, or the current
    /// pair when no dev metric was available.
    pub fn best_model(&self) -> (EncoderParams<S>, ClassifierParams<S>) {
        match &self.best {
            Some(b) => (b.encoder.clone(), b.classifier.clone()),
            None => (self.encoder.clone(), self.classifier.clone()),
        }
    }

    /// One joint epoch driven by source batches; each batch is balanced
    /// with an equal number of target instances, cycling through the
    /// target split.
    pub fn run_epoch(&mut self, corpus: &Corpus, cfg: &DannConfig) -> Result<DannEpoch> {
        let base = &cfg.base;
        let src = &corpus.source_train;
        let tgt = &corpus.target_train;
        let targets = label_ids(src, &self.labels)?;
        let src_order = epoch_order(base.seed, SHUFFLE_SOURCE, self.epochs_done, src.len());
        let tgt_order = epoch_order(base.seed, SHUFFLE_TARGET, self.epochs_done, tgt.len());
        let factor = cfg.reversal_factor::<S>();
        let mut cls_sum = 0.0;
        let mut dom_sum = 0.0;
        let mut steps = 0usize;
        for (bi, src_ids) in src_order.chunks(base.batch_size).enumerate() {
            let src_batch: Vec<&Instance> = src_ids.iter().map(|&i| &src[i]).collect();
            let batch_targets: Vec<usize> = src_ids.iter().map(|&i| targets[i]).collect();
            let start = bi * base.batch_size;
            let tgt_batch: Vec<&Instance> = (0..src_ids.len())
                .map(|j| &tgt[tgt_order[(start + j) % tgt.len()]])
                .collect();
            if cfg.use_spectral_norm {
                self.d.spectral_update(base.sn_iterations);
            }
            let mut tape = Tape::new();
            let en = self.encoder.stage(&mut tape);
            let cn = self.classifier.stage(&mut tape);
            let dn = self.d.stage(&mut tape, cfg.use_spectral_norm);
            let src_reps = encode_batch(&mut tape, &self.encoder, &en, &src_batch)?;
            let tgt_reps = encode_batch(&mut tape, &self.encoder, &en, &tgt_batch)?;
            let cls = classification_loss(
                &mut tape,
                &cn,
                &src_reps,
                &batch_targets,
                self.labels.len(),
                base.smoothing(),
            )?;
            let mut feats = Vec::with_capacity(src_reps.len() + tgt_reps.len());
            let mut domains = Vec::with_capacity(feats.capacity());
            for &r in src_reps.iter().chain(&tgt_reps) {
                feats.push(tape.grad_scale(r, factor));
                domains.push(if feats.len() <= src_reps.len() { 0 } else { 1 });
            }
            let dom = domain_loss(&mut tape, &dn, &feats, &domains)?;
            let total = tape.add(cls, dom)?;
            cls_sum += tape.value(cls).item().to_f64c();
            dom_sum += tape.value(dom).item().to_f64c();
            steps += 1;
            let grads = tape.backward(total)?;
            let mut gm = GradMap::new();
            collect_grads(&tape, &grads, &en.entries, "enc.", &mut gm);
            collect_grads(&tape, &grads, &cn.entries, "cls.", &mut gm);
            collect_grads(&tape, &grads, &dn.entries, "d.", &mut gm);
            let mut joint = Joint::new(vec![
                ("enc.", &mut self.encoder as &mut dyn ParamSet<S>),
                ("cls.", &mut self.classifier),
                ("d.", &mut self.d),
            ]);
            self.opt.step(&mut joint, &gm)?;
        }
        let dev_macro_f1 =
            labeled_macro_f1(&self.encoder, &self.classifier, &corpus.target_dev, &self.labels)?;
        let record = DannEpoch {
            epoch: self.epochs_done,
            cls_loss: cls_sum / steps.max(1) as f64,
            domain_loss: dom_sum / steps.max(1) as f64,
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
            "joint epoch {}: cls {:.4}, domain {:.4}, target dev macro F1 {}",
            record.epoch,
            record.cls_loss,
            record.domain_loss,
            record
                .dev_macro_f1
                .map_or("n/a".to_string(), |v| format!("{v:.4}")),
        );
        Ok(record)
    }
}

/// Runs the joint baseline to completion.
pub fn train_dann<S: Scalar>(
    corpus: &Corpus,
    embed: EmbeddingTable<S>,
    cfg: &DannConfig,
) -> Result<DannState<S>> {
    let mut state = DannState::new(corpus, embed, cfg)?;
    while !state.finished(cfg) {
        state.run_epoch(corpus, cfg)?;
    }
    Ok(state)
}
