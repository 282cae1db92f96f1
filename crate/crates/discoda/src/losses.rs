//! Training objectives over staged graphs.
//!
//! Every function takes already-encoded pair representations (tape node ids)
//! and returns a scalar loss node. Stop-gradient boundaries live here:
//! the discriminator objective detaches both feature batches, and the
//! reconstruction objective detaches its (source-encoder) target, so callers
//! cannot accidentally leak gradients across stages.

use crate::data::{EmbeddingTable, Instance};
use crate::encoder::{encode_batch, EncoderDims, EncoderParams};
use crate::error::{Error, Result};
use crate::heads::{
    class_logits, domain_logits, reconstruct, smoothed_targets, ClassifierNodes,
    ClassifierParams, DiscDims, DiscriminatorNodes, DiscriminatorParams, ReconDims,
    ReconstructorNodes, ReconstructorParams,
};
use discoda_ad::check::CheckReport;
use discoda_ad::optim::collect_grads;
use discoda_ad::rng::stream;
use discoda_ad::tape::{NodeId, Tape};
use discoda_ad::{GradMap, ParamSet, Scalar, Tensor};
use rand::Rng;

/// Mean smoothed cross-entropy of class predictions against integer targets.
/// `eps = 0` recovers plain cross-entropy.
pub fn classification_loss<S: Scalar>(
    tape: &mut Tape<S>,
    cls: &ClassifierNodes,
    reps: &[NodeId],
    targets: &[usize],
    classes: usize,
    eps: f64,
) -> Result<NodeId> {
    if reps.is_empty() {
        return Err(Error::Train("classification loss over an empty batch".into()));
    }
    if reps.len() != targets.len() {
        return Err(Error::Train(format!(
            "{} representations but {} targets",
            reps.len(),
            targets.len()
        )));
    }
    let mut terms = Vec::with_capacity(reps.len());
    for (&rep, &y) in reps.iter().zip(targets) {
        let logits = class_logits(tape, cls, rep)?;
        let lsm = tape.log_softmax(logits)?;
        let q = smoothed_targets::<S>(classes, y, eps)?;
        let qn = tape.constant(Tensor::row(&q));
        let weighted = tape.mul(qn, lsm)?;
        let nll = tape.sum(weighted)?;
        terms.push(tape.scale(nll, S::c(-1.0)));
    }
    Ok(tape.mean_many(&terms)?)
}

/// Discriminator objective: negative log-likelihood of the true domains,
/// with source features scored as class 0 and target features as class 1.
/// Both feature batches are detached, so only discriminator parameters
/// receive gradients.
pub fn discriminator_loss<S: Scalar>(
    tape: &mut Tape<S>,
    d: &DiscriminatorNodes,
    source_feats: &[NodeId],
    target_feats: &[NodeId],
) -> Result<NodeId> {
    if source_feats.is_empty() || target_feats.is_empty() {
        return Err(Error::Train("discriminator loss needs both domains".into()));
    }
    let score = |tape: &mut Tape<S>, feats: &[NodeId], col: usize| -> Result<NodeId> {
        let mut terms = Vec::with_capacity(feats.len());
        for &f in feats {
            let frozen = tape.detach(f);
            let logits = domain_logits(tape, d, frozen)?;
            let lsm = tape.log_softmax(logits)?;
            terms.push(tape.pick(lsm, col)?);
        }
        let mean = tape.mean_many(&terms)?;
        Ok(tape.scale(mean, S::c(-1.0)))
    };
    let on_source = score(tape, source_feats, 0)?;
    let on_target = score(tape, target_feats, 1)?;
    Ok(tape.add(on_source, on_target)?)
}

/// Target-encoder confusion objective: negative log-probability that the
/// (frozen) discriminator assigns "source" to target features. Gradients
/// flow through the features into the target encoder; the caller stages the
/// discriminator frozen.
pub fn confusion_loss<S: Scalar>(
    tape: &mut Tape<S>,
    d: &DiscriminatorNodes,
    target_feats: &[NodeId],
) -> Result<NodeId> {
    if target_feats.is_empty() {
        return Err(Error::Train("confusion loss over an empty batch".into()));
    }
    let mut terms = Vec::with_capacity(target_feats.len());
    for &f in target_feats {
        let logits = domain_logits(tape, d, f)?;
        let lsm = tape.log_softmax(logits)?;
        terms.push(tape.pick(lsm, 0)?);
    }
    let mean = tape.mean_many(&terms)?;
    Ok(tape.scale(mean, S::c(-1.0)))
}

/// Reconstruction objective: mean squared L2 distance between the
/// reconstructor's output on target-encoder features and the detached
/// source-encoder features of the same instances.
pub fn reconstruction_loss<S: Scalar>(
    tape: &mut Tape<S>,
    mr: &ReconstructorNodes,
    target_feats: &[NodeId],
    source_feats: &[NodeId],
) -> Result<NodeId> {
    if target_feats.is_empty() {
        return Err(Error::Train("reconstruction loss over an empty batch".into()));
    }
    if target_feats.len() != source_feats.len() {
        return Err(Error::Train(format!(
            "{} target features but {} source features",
            target_feats.len(),
            source_feats.len()
        )));
    }
    let mut terms = Vec::with_capacity(target_feats.len());
    for (&ft, &fs) in target_feats.iter().zip(source_feats) {
        let rebuilt = reconstruct(tape, mr, ft)?;
        let anchor = tape.detach(fs);
        terms.push(tape.squared_l2(rebuilt, anchor)?);
    }
    Ok(tape.mean_many(&terms)?)
}

/// Supervised objective on labeled target instances: plain (unsmoothed)
/// cross-entropy, updating both the target encoder and the classifier.
pub fn supervised_loss<S: Scalar>(
    tape: &mut Tape<S>,
    cls: &ClassifierNodes,
    reps: &[NodeId],
    targets: &[usize],
    classes: usize,
) -> Result<NodeId> {
    classification_loss(tape, cls, reps, targets, classes, 0.0)
}

/// Domain-classification negative log-likelihood for joint adversarial
/// training: one term per feature, scored against its true domain column.
/// The caller decides what flows backward (e.g. via a gradient-reversal
/// node on the features).
pub fn domain_loss<S: Scalar>(
    tape: &mut Tape<S>,
    d: &DiscriminatorNodes,
    feats: &[NodeId],
    domains: &[usize],
) -> Result<NodeId> {
    if feats.is_empty() {
        return Err(Error::Train("domain loss over an empty batch".into()));
    }
    if feats.len() != domains.len() {
        return Err(Error::Train(format!(
            "{} features but {} domain labels",
            feats.len(),
            domains.len()
        )));
    }
    let mut terms = Vec::with_capacity(feats.len());
    for (&f, &dom) in feats.iter().zip(domains) {
        let logits = domain_logits(tape, d, f)?;
        let lsm = tape.log_softmax(logits)?;
        terms.push(tape.pick(lsm, dom)?);
    }
    let mean = tape.mean_many(&terms)?;
    Ok(tape.scale(mean, S::c(-1.0)))
}

// ── Finite-difference checks over model parameters ──────────────────────

/// Perturbs one coordinate of one named tensor in place.
fn nudge<S: Scalar, P: ParamSet<S>>(params: &mut P, name: &str, coord: usize, delta: f64) {
    params.visit_mut(&mut |n, t| {
        if n == name {
            t.data_mut()[coord] += S::c(delta);
        }
    });
}

/// Central finite differences over every coordinate of `base` (minus names
/// rejected by `skip`), compared against `analytic` local-name gradients.
/// Returns `(checked coordinates, max relative error)`.
pub(crate) fn fd_over_params<S: Scalar, P: ParamSet<S> + Clone>(
    base: &P,
    skip: &dyn Fn(&str) -> bool,
    eval: &mut dyn FnMut(&P) -> Result<f64>,
    analytic: &GradMap<S>,
    h: f64,
) -> Result<(usize, f64)> {
    let mut shapes: Vec<(String, usize)> = Vec::new();
    base.visit(&mut |name, t| {
        if !skip(name) {
            shapes.push((name.to_string(), t.numel()));
        }
    });
    let mut max_rel = 0.0f64;
    let mut count = 0usize;
    for (name, numel) in &shapes {
        let grad = analytic
            .get(name)
            .cloned()
            .unwrap_or_else(|| vec![S::zero(); *numel]);
        for j in 0..*numel {
            count += 1;
            let mut up = base.clone();
            nudge(&mut up, name, j, h);
            let mut down = base.clone();
            nudge(&mut down, name, j, -h);
            let fd = (eval(&up)? - eval(&down)?) / (2.0 * h);
            let an = grad[j].to_f64c();
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok((count, max_rel))
}

/// Fixtures for the objective-level gradient checks: two tiny encoders,
/// all three heads, and a handful of synthetic instances per domain.
pub(crate) struct CheckRig {
    pub(crate) ms: EncoderParams<f64>,
    pub(crate) mt: EncoderParams<f64>,
    pub(crate) cls: ClassifierParams<f64>,
    pub(crate) d: DiscriminatorParams<f64>,
    pub(crate) mr: ReconstructorParams<f64>,
    pub(crate) source: Vec<Instance>,
    pub(crate) target: Vec<Instance>,
    pub(crate) targets_src: Vec<usize>,
    pub(crate) targets_tgt: Vec<usize>,
    pub(crate) classes: usize,
}

pub(crate) fn check_rig(seed: u64) -> CheckRig {
    use crate::data::SynthConfig;
    let cfg = SynthConfig {
        seed,
        classes: 3,
        markers_per_class: 1,
        content_tokens_per_class: 4,
        shared_tokens: 6,
        arg_len_min: 2,
        arg_len_max: 4,
        source_train: 3,
        source_dev: 1,
        target_train: 3,
        target_dev: 1,
        target_test: 1,
        ..SynthConfig::default()
    };
    let corpus = crate::data::generate(&cfg).expect("tiny synthetic corpus");
    let vocab = crate::data::build_vocab(&corpus);
    let embed = EmbeddingTable::<f64>::random(&vocab, 3, seed);
    let dims = EncoderDims::with_hidden(2, 16);
    let mut ms = EncoderParams::init(embed.clone(), dims, seed);
    ms.train_embeddings = true;
    let mut mt = EncoderParams::init(embed, dims, seed + 1);
    mt.train_embeddings = true;
    let rep = ms.rep_dim();
    let cls = ClassifierParams::init(rep, cfg.classes, seed + 2);
    let mut d = DiscriminatorParams::init(rep, DiscDims { h1: 5, h2: 4 }, seed + 3);
    let mut mr = ReconstructorParams::init(
        rep,
        ReconDims {
            h1: 5,
            bottleneck: 2,
            h2: 5,
        },
        seed + 4,
    );
    // Push hidden pre-activations away from the leaky-ReLU kink, where a
    // finite-difference step would straddle the slope change.
    let mut kick = stream(seed, "bias-kick");
    for head in [&mut d as &mut dyn ParamSet<f64>, &mut mr] {
        head.visit_mut(&mut |name, t| {
            if name.starts_with('b') {
                for v in t.data_mut() {
                    let mag: f64 = kick.gen_range(0.2..0.5);
                    *v = if kick.gen_bool(0.5) { mag } else { -mag };
                }
            }
        });
    }
    let source = corpus.source_train.clone();
    let target = corpus.target_train.clone();
    let targets_src = crate::data::label_ids(&source, &corpus.labels).expect("labeled");
    let targets_tgt = crate::data::label_ids(&target, &corpus.labels).expect("labeled");
    CheckRig {
        ms,
        mt,
        cls,
        d,
        mr,
        source,
        target,
        targets_src,
        targets_tgt,
        classes: cfg.classes,
    }
}

fn refs(v: &[Instance]) -> Vec<&Instance> {
    v.iter().collect()
}

/// Never finite-difference the spectral-norm statistics: the forward pass
/// treats the stored estimate as a constant, so those tensors are state,
/// not differentiable parameters.
fn skip_sn(name: &str) -> bool {
    name.starts_with("sn.")
}

/// Finite-difference checks of every training objective, each over the
/// parameter bundles that objective is allowed to update.
pub fn objective_check_suite(seed: u64, h: f64) -> Result<Vec<CheckReport>> {
    let rig = check_rig(seed);
    let mut reports = Vec::new();

    // Classification: gradients into the encoder (embeddings included) and
    // the classifier.
    {
        let value = |ms: &EncoderParams<f64>, cls: &ClassifierParams<f64>| -> Result<f64> {
            let mut tape = Tape::new();
            let enc = ms.stage(&mut tape);
            let cn = cls.stage(&mut tape);
            let reps = encode_batch(&mut tape, ms, &enc, &refs(&rig.source))?;
            let loss =
                classification_loss(&mut tape, &cn, &reps, &rig.targets_src, rig.classes, 0.1)?;
            Ok(tape.value(loss).item())
        };
        let mut tape = Tape::new();
        let enc = rig.ms.stage(&mut tape);
        let cn = rig.cls.stage(&mut tape);
        let reps = encode_batch(&mut tape, &rig.ms, &enc, &refs(&rig.source))?;
        let loss =
            classification_loss(&mut tape, &cn, &reps, &rig.targets_src, rig.classes, 0.1)?;
        let grads = tape.backward(loss)?;
        let mut enc_grads = GradMap::new();
        collect_grads(&tape, &grads, &enc.entries, "", &mut enc_grads);
        let mut cls_grads = GradMap::new();
        collect_grads(&tape, &grads, &cn.entries, "", &mut cls_grads);

        let (n1, e1) = fd_over_params(
            &rig.ms,
            &|_| false,
            &mut |ms| value(ms, &rig.cls),
            &enc_grads,
            h,
        )?;
        let (n2, e2) = fd_over_params(
            &rig.cls,
            &|_| false,
            &mut |cls| value(&rig.ms, cls),
            &cls_grads,
            h,
        )?;
        reports.push(CheckReport {
            label: "classification_objective".to_string(),
            params: n1 + n2,
            max_rel_err: e1.max(e2),
        });
    }

    // Discriminator update: features from both encoders are detached, so
    // the only differentiable parameters are the discriminator's.
    {
        let mut d = rig.d.clone();
        d.spectral_update(1);
        let value = |d: &DiscriminatorParams<f64>| -> Result<f64> {
            let mut tape = Tape::new();
            let enc_s = rig.ms.stage_frozen(&mut tape);
            let enc_t = rig.mt.stage_frozen(&mut tape);
            let dn = d.stage(&mut tape, true);
            let fs = encode_batch(&mut tape, &rig.ms, &enc_s, &refs(&rig.source))?;
            let ft = encode_batch(&mut tape, &rig.mt, &enc_t, &refs(&rig.target))?;
            let loss = discriminator_loss(&mut tape, &dn, &fs, &ft)?;
            Ok(tape.value(loss).item())
        };
        let mut tape = Tape::new();
        let enc_s = rig.ms.stage_frozen(&mut tape);
        let enc_t = rig.mt.stage_frozen(&mut tape);
        let dn = d.stage(&mut tape, true);
        let fs = encode_batch(&mut tape, &rig.ms, &enc_s, &refs(&rig.source))?;
        let ft = encode_batch(&mut tape, &rig.mt, &enc_t, &refs(&rig.target))?;
        let loss = discriminator_loss(&mut tape, &dn, &fs, &ft)?;
        let grads = tape.backward(loss)?;
        let mut d_grads = GradMap::new();
        collect_grads(&tape, &grads, &dn.entries, "", &mut d_grads);
        let (n, e) = fd_over_params(&d, &skip_sn, &mut |d| value(d), &d_grads, h)?;
        reports.push(CheckReport {
            label: "discriminator_objective".to_string(),
            params: n,
            max_rel_err: e,
        });
    }

    // Confusion update: the discriminator is frozen; gradients flow through
    // it into the target encoder.
    {
        let mut d = rig.d.clone();
        d.spectral_update(1);
        let value = |mt: &EncoderParams<f64>| -> Result<f64> {
            let mut tape = Tape::new();
            let enc_t = mt.stage(&mut tape);
            let dn = d.stage_frozen(&mut tape, true);
            let ft = encode_batch(&mut tape, mt, &enc_t, &refs(&rig.target))?;
            let loss = confusion_loss(&mut tape, &dn, &ft)?;
            Ok(tape.value(loss).item())
        };
        let mut tape = Tape::new();
        let enc_t = rig.mt.stage(&mut tape);
        let dn = d.stage_frozen(&mut tape, true);
        let ft = encode_batch(&mut tape, &rig.mt, &enc_t, &refs(&rig.target))?;
        let loss = confusion_loss(&mut tape, &dn, &ft)?;
        let grads = tape.backward(loss)?;
        let mut mt_grads = GradMap::new();
        collect_grads(&tape, &grads, &enc_t.entries, "", &mut mt_grads);
        let (n, e) = fd_over_params(&rig.mt, &|_| false, &mut |mt| value(mt), &mt_grads, h)?;
        reports.push(CheckReport {
            label: "confusion_objective".to_string(),
            params: n,
            max_rel_err: e,
        });
    }

    // Reconstruction: gradients into the target encoder and reconstructor;
    // the source-encoder anchor is detached.
    {
        let value = |mt: &EncoderParams<f64>, mr: &ReconstructorParams<f64>| -> Result<f64> {
            let mut tape = Tape::new();
            let enc_s = rig.ms.stage_frozen(&mut tape);
            let enc_t = mt.stage(&mut tape);
            let rn = mr.stage(&mut tape);
            let ft = encode_batch(&mut tape, mt, &enc_t, &refs(&rig.target))?;
            let fs = encode_batch(&mut tape, &rig.ms, &enc_s, &refs(&rig.target))?;
            let loss = reconstruction_loss(&mut tape, &rn, &ft, &fs)?;
            Ok(tape.value(loss).item())
        };
        let mut tape = Tape::new();
        let enc_s = rig.ms.stage_frozen(&mut tape);
        let enc_t = rig.mt.stage(&mut tape);
        let rn = rig.mr.stage(&mut tape);
        let ft = encode_batch(&mut tape, &rig.mt, &enc_t, &refs(&rig.target))?;
        let fs = encode_batch(&mut tape, &rig.ms, &enc_s, &refs(&rig.target))?;
        let loss = reconstruction_loss(&mut tape, &rn, &ft, &fs)?;
        let grads = tape.backward(loss)?;
        let mut mt_grads = GradMap::new();
        collect_grads(&tape, &grads, &enc_t.entries, "", &mut mt_grads);
        let mut mr_grads = GradMap::new();
        collect_grads(&tape, &grads, &rn.entries, "", &mut mr_grads);
        let (n1, e1) = fd_over_params(
            &rig.mt,
            &|_| false,
            &mut |mt| value(mt, &rig.mr),
            &mt_grads,
            h,
        )?;
        let (n2, e2) = fd_over_params(
            &rig.mr,
            &|_| false,
            &mut |mr| value(&rig.mt, mr),
            &mr_grads,
            h,
        )?;
        reports.push(CheckReport {
            label: "reconstruction_objective".to_string(),
            params: n1 + n2,
            max_rel_err: e1.max(e2),
        });
    }

    // Supervised target step: gradients into the target encoder and the
    // classifier, plain cross-entropy.
    {
        let value = |mt: &EncoderParams<f64>, cls: &ClassifierParams<f64>| -> Result<f64> {
            let mut tape = Tape::new();
            let enc_t = mt.stage(&mut tape);
            let cn = cls.stage(&mut tape);
            let reps = encode_batch(&mut tape, mt, &enc_t, &refs(&rig.target))?;
            let loss = supervised_loss(&mut tape, &cn, &reps, &rig.targets_tgt, rig.classes)?;
            Ok(tape.value(loss).item())
        };
        let mut tape = Tape::new();
        let enc_t = rig.mt.stage(&mut tape);
        let cn = rig.cls.stage(&mut tape);
        let reps = encode_batch(&mut tape, &rig.mt, &enc_t, &refs(&rig.target))?;
        let loss = supervised_loss(&mut tape, &cn, &reps, &rig.targets_tgt, rig.classes)?;
        let grads = tape.backward(loss)?;
        let mut mt_grads = GradMap::new();
        collect_grads(&tape, &grads, &enc_t.entries, "", &mut mt_grads);
        let mut cls_grads = GradMap::new();
        collect_grads(&tape, &grads, &cn.entries, "", &mut cls_grads);
        let (n1, e1) = fd_over_params(
            &rig.mt,
            &|_| false,
            &mut |mt| value(mt, &rig.cls),
            &mt_grads,
            h,
        )?;
        let (n2, e2) = fd_over_params(
            &rig.cls,
            &|_| false,
            &mut |cls| value(&rig.mt, cls),
            &cls_grads,
            h,
        )?;
        reports.push(CheckReport {
            label: "supervised_target_objective".to_string(),
            params: n1 + n2,
            max_rel_err: e1.max(e2),
        });
    }

    // Joint domain-adversarial objective: a reversal node sits between the
    // shared encoder and the domain loss, so the encoder's analytic gradient
    // must match finite differences of `cls − λ·dom`, while the classifier
    // sees `cls` and the (unnormalized) discriminator sees `dom` alone.
    {
        let lambda = 0.25;
        let value = |ms: &EncoderParams<f64>,
                     cls: &ClassifierParams<f64>,
                     d: &DiscriminatorParams<f64>|
         -> Result<(f64, f64)> {
            let mut tape = Tape::new();
            let en = ms.stage(&mut tape);
            let cn = cls.stage(&mut tape);
            let dn = d.stage(&mut tape, false);
            let fs = encode_batch(&mut tape, ms, &en, &refs(&rig.source))?;
            let ft = encode_batch(&mut tape, ms, &en, &refs(&rig.target))?;
            let cls_loss =
                classification_loss(&mut tape, &cn, &fs, &rig.targets_src, rig.classes, 0.1)?;
            let mut feats: Vec<NodeId> = Vec::with_capacity(fs.len() + ft.len());
            let mut domains = Vec::with_capacity(feats.capacity());
            for &r in fs.iter().chain(&ft) {
                feats.push(r);
                domains.push(usize::from(feats.len() > fs.len()));
            }
            let dom = domain_loss(&mut tape, &dn, &feats, &domains)?;
            Ok((tape.value(cls_loss).item(), tape.value(dom).item()))
        };

        let mut tape = Tape::new();
        let en = rig.ms.stage(&mut tape);
        let cn = rig.cls.stage(&mut tape);
        let dn = rig.d.stage(&mut tape, false);
        let fs = encode_batch(&mut tape, &rig.ms, &en, &refs(&rig.source))?;
        let ft = encode_batch(&mut tape, &rig.ms, &en, &refs(&rig.target))?;
        let cls_loss =
            classification_loss(&mut tape, &cn, &fs, &rig.targets_src, rig.classes, 0.1)?;
        let mut feats: Vec<NodeId> = Vec::with_capacity(fs.len() + ft.len());
        let mut domains = Vec::with_capacity(feats.capacity());
        for &r in fs.iter().chain(&ft) {
            feats.push(tape.grad_scale(r, -lambda));
            domains.push(usize::from(feats.len() > fs.len()));
        }
        let dom = domain_loss(&mut tape, &dn, &feats, &domains)?;
        let total = tape.add(cls_loss, dom)?;
        let grads = tape.backward(total)?;
        let mut enc_grads = GradMap::new();
        collect_grads(&tape, &grads, &en.entries, "", &mut enc_grads);
        let mut cls_grads = GradMap::new();
        collect_grads(&tape, &grads, &cn.entries, "", &mut cls_grads);
        let mut d_grads = GradMap::new();
        collect_grads(&tape, &grads, &dn.entries, "", &mut d_grads);

        let (n1, e1) = fd_over_params(
            &rig.ms,
            &|_| false,
            &mut |ms| value(ms, &rig.cls, &rig.d).map(|(c, m)| c - lambda * m),
            &enc_grads,
            h,
        )?;
        let (n2, e2) = fd_over_params(
            &rig.cls,
            &|_| false,
            &mut |cls| value(&rig.ms, cls, &rig.d).map(|(c, _)| c),
            &cls_grads,
            h,
        )?;
        let (n3, e3) = fd_over_params(
            &rig.d,
            &skip_sn,
            &mut |d| value(&rig.ms, &rig.cls, d).map(|(_, m)| m),
            &d_grads,
            h,
        )?;
        reports.push(CheckReport {
            label: "domain_objective".to_string(),
            params: n1 + n2 + n3,
            max_rel_err: e1.max(e2).max(e3),
        });
    }

    Ok(reports)
}
