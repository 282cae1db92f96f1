//! End-to-end stage runners shared by the command line and the integration
//! tests: each runner drives one training stage to completion and writes a
//! standard artifact set into an output directory — a checkpoint, the
//! resolved configuration, a per-epoch history CSV, and evaluation reports
//! for the relevant splits. Keeping this glue in one place guarantees the
//! command line and the tests exercise identical code paths.

use crate::checkpoint;
use crate::data::{build_vocab, generate, Corpus, EmbeddingTable, Instance, SynthConfig};
use crate::dann::{DannConfig, DannEpoch, DannState};
use crate::encoder::EncoderParams;
use crate::error::Result;
use crate::eval::{write_reports, ConfusionMatrix};
use crate::heads::ClassifierParams;
use crate::sweep::{run_sweep, SweepPlan, SweepResult};
use crate::train::{predict, AdaptEpoch, AdaptState, PretrainEpoch, PretrainState, TrainConfig};
use discoda_ad::rng::derive_seed;
use serde::Serialize;
use std::path::{Path, PathBuf};

/// The embedding table every stage starts from: one random vector per
/// corpus token, drawn from a stream derived from the training seed.
pub fn embedding_for(corpus: &Corpus, cfg: &TrainConfig) -> EmbeddingTable<f64> {
    EmbeddingTable::random(
        &build_vocab(corpus),
        cfg.embedding_dim,
        derive_seed(cfg.seed, "embed"),
    )
}

/// Serializes a resolved configuration next to the artifacts it produced.
pub fn write_config<T: Serialize>(path: &Path, cfg: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(cfg)?)?;
    Ok(())
}

fn cell(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:.6}"))
}

/// `pretrain_history.csv`: epoch, training loss, source-dev macro F1.
pub fn pretrain_history_csv(history: &[PretrainEpoch]) -> String {
    let mut out = String::from("epoch,train_loss,dev_macro_f1\n");
    for e in history {
        out.push_str(&format!(
            "{},{:.6},{}\n",
            e.epoch,
            e.train_loss,
            cell(e.dev_macro_f1)
        ));
    }
    out
}

/// `adapt_history.csv`: epoch, the four loss terms (blank when disabled),
/// their logged sum, held-out discriminator accuracy, target-dev macro F1.
pub fn adapt_history_csv(history: &[AdaptEpoch]) -> String {
    let mut out = String::from(
        "epoch,disc_loss,confusion_loss,recon_loss,supervised_loss,objective,\
         disc_dev_accuracy,dev_macro_f1\n",
    );
    for e in history {
        out.push_str(&format!(
            "{},{:.6},{:.6},{},{},{:.6},{},{}\n",
            e.epoch,
            e.disc_loss,
            e.confusion_loss,
            cell(e.recon_loss),
            cell(e.supervised_loss),
            e.objective,
            cell(e.disc_dev_accuracy),
            cell(e.dev_macro_f1)
        ));
    }
    out
}

/// `dann_history.csv`: epoch, classification loss, domain loss, target-dev
/// macro F1.
pub fn dann_history_csv(history: &[DannEpoch]) -> String {
    let mut out = String::from("epoch,cls_loss,domain_loss,dev_macro_f1\n");
    for e in history {
        out.push_str(&format!(
            "{},{:.6},{:.6},{}\n",
            e.epoch,
            e.cls_loss,
            e.domain_loss,
            cell(e.dev_macro_f1)
        ));
    }
    out
}

/// Predicts `instances`, writes `predictions.csv` (and, when every instance
/// is labeled, the confusion-matrix report set) into `out`, and returns the
/// macro F1 when it is defined.
pub fn evaluate_split(
    enc: &EncoderParams<f64>,
    cls: &ClassifierParams<f64>,
    instances: &[Instance],
    labels: &[String],
    out: Option<&Path>,
) -> Result<Option<f64>> {
    if instances.is_empty() {
        return Ok(None);
    }
    let pred = predict(enc, cls, instances)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let mut csv = String::from("id,gold,predicted\n");
        for (inst, &p) in instances.iter().zip(&pred) {
            csv.push_str(&format!(
                "{},{},{}\n",
                inst.id,
                inst.label.as_deref().unwrap_or(""),
                labels[p]
            ));
        }
        std::fs::write(dir.join("predictions.csv"), csv)?;
    }
    if instances.iter().any(|i| i.label.is_none()) {
        return Ok(None);
    }
    let gold = crate::data::label_ids(instances, labels)?;
    let cm = ConfusionMatrix::from_pairs(&gold, &pred, labels)?;
    if let Some(dir) = out {
        write_reports(dir, &cm)?;
    }
    Ok(Some(cm.macro_f1()))
}

/// Generates a synthetic corpus and writes its five split files plus the
/// resolved generator configuration into `out`.
pub fn run_synth(cfg: &SynthConfig, out: &Path) -> Result<Corpus> {
    let corpus = generate(cfg)?;
    corpus.save(out)?;
    write_config(&out.join("synth_config.json"), cfg)?;
    Ok(corpus)
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub state: PretrainState<f64>,
    pub checkpoint: PathBuf,
    /// Best model's macro F1 on the source dev split.
    pub source_dev_f1: Option<f64>,
    /// Best model's macro F1 on the target test split — the source-only
    /// transfer baseline.
    pub target_test_f1: Option<f64>,
}

/// Runs (or resumes) source pretraining and writes `pretrain.ckpt`,
/// `pretrain_config.json`, `pretrain_history.csv`, and evaluation reports
/// under `source_dev/` and `target_test/`.
pub fn run_pretrain(
    corpus: &Corpus,
    cfg: &TrainConfig,
    resume: Option<PretrainState<f64>>,
    out: &Path,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let mut state = match resume {
        Some(s) => s,
        None => PretrainState::new(corpus, embedding_for(corpus, cfg), cfg)?,
    };
    while !state.finished(cfg) {
        state.run_epoch(corpus, cfg)?;
    }
    let checkpoint = out.join("pretrain.ckpt");
    checkpoint::save_pretrain(&checkpoint, &state, cfg)?;
    write_config(&out.join("pretrain_config.json"), cfg)?;
    std::fs::write(
        out.join("pretrain_history.csv"),
        pretrain_history_csv(&state.history),
    )?;
    let (enc, cls) = state.best_model();
    let source_dev_f1 = evaluate_split(
        &enc,
        &cls,
        &corpus.source_dev,
        &corpus.labels,
        Some(&out.join("source_dev")),
    )?;
    let target_test_f1 = evaluate_split(
        &enc,
        &cls,
        &corpus.target_test,
        &corpus.labels,
        Some(&out.join("target_test")),
    )?;
    Ok(PretrainOutcome {
        state,
        checkpoint,
        source_dev_f1,
        target_test_f1,
    })
}

/// Where an adaptation run starts from.
pub enum AdaptStart {
    /// A pretrained source encoder and classifier, plus the labeled target
    /// subset for the optional supervised step (empty for unsupervised).
    Fresh {
        encoder: EncoderParams<f64>,
        classifier: ClassifierParams<f64>,
        subset: Vec<Instance>,
    },
    /// A previously saved adaptation state.
    Resume(Box<AdaptState<f64>>),
}

#[derive(Debug)]
pub struct AdaptOutcome {
    pub state: AdaptState<f64>,
    pub checkpoint: PathBuf,
    /// Best target model's macro F1 on the target test split.
    pub target_test_f1: Option<f64>,
    /// Discriminator accuracy on held-out features after the final epoch.
    pub disc_dev_accuracy: Option<f64>,
}

/// Runs (or resumes) adversarial adaptation and writes `adapt.ckpt`,
/// `adapt_config.json`, `adapt_history.csv`, and target-test reports.
pub fn run_adapt(
    corpus: &Corpus,
    start: AdaptStart,
    cfg: &TrainConfig,
    out: &Path,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let mut state = match start {
        AdaptStart::Fresh {
            encoder,
            classifier,
            subset,
        } => AdaptState::new(corpus, encoder, classifier, subset, cfg)?,
        AdaptStart::Resume(s) => *s,
    };
    while !state.finished(cfg) {
        state.run_epoch(corpus, cfg)?;
    }
    let checkpoint = out.join("adapt.ckpt");
    checkpoint::save_adapt(&checkpoint, &state, cfg)?;
    write_config(&out.join("adapt_config.json"), cfg)?;
    std::fs::write(
        out.join("adapt_history.csv"),
        adapt_history_csv(&state.history),
    )?;
    let (enc, cls) = state.best_model();
    let target_test_f1 = evaluate_split(
        &enc,
        &cls,
        &corpus.target_test,
        &corpus.labels,
        Some(&out.join("target_test")),
    )?;
    let disc_dev_accuracy = state.history.last().and_then(|e| e.disc_dev_accuracy);
    Ok(AdaptOutcome {
        state,
        checkpoint,
        target_test_f1,
        disc_dev_accuracy,
    })
}

#[derive(Debug)]
pub struct DannOutcome {
    pub state: DannState<f64>,
    pub checkpoint: PathBuf,
    pub target_test_f1: Option<f64>,
}

/// Runs (or resumes) the joint gradient-reversal baseline and writes
/// `dann.ckpt`, `dann_config.json`, `dann_history.csv`, and target-test
/// reports.
pub fn run_dann(
    corpus: &Corpus,
    cfg: &DannConfig,
    resume: Option<DannState<f64>>,
    out: &Path,
) -> Result<DannOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let mut state = match resume {
        Some(s) => s,
        None => DannState::new(corpus, embedding_for(corpus, &cfg.base), cfg)?,
    };
    while !state.finished(cfg) {
        state.run_epoch(corpus, cfg)?;
    }
    let checkpoint = out.join("dann.ckpt");
    checkpoint::save_dann(&checkpoint, &state, cfg)?;
    write_config(&out.join("dann_config.json"), cfg)?;
    std::fs::write(
        out.join("dann_history.csv"),
        dann_history_csv(&state.history),
    )?;
    let (enc, cls) = state.best_model();
    let target_test_f1 = evaluate_split(
        &enc,
        &cls,
        &corpus.target_test,
        &corpus.labels,
        Some(&out.join("target_test")),
    )?;
    Ok(DannOutcome {
        state,
        checkpoint,
        target_test_f1,
    })
}

/// Runs the labeled-subset sweep and writes its CSVs, chart, and the
/// resolved plan and training configuration.
pub fn run_sweep_stage(
    corpus: &Corpus,
    cfg: &TrainConfig,
    plan: &SweepPlan,
    out: &Path,
) -> Result<SweepResult> {
    let result = run_sweep(corpus, &embedding_for(corpus, cfg), cfg, plan)?;
    result.write_reports(out)?;
    write_config(&out.join("sweep_plan.json"), plan)?;
    write_config(&out.join("sweep_config.json"), cfg)?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::{tiny_cfg, tiny_corpus};

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "discoda-pipeline-{}-{}",
            name,
            std::process::id()
        ));
        std::fs::remove_dir_all(&dir).ok();
        dir
    }

    #[test]
    fn history_csvs_render_missing_values_as_blank_cells() {
        let pre = vec![PretrainEpoch {
            epoch: 0,
            train_loss: 1.25,
            dev_macro_f1: None,
        }];
        assert_eq!(
            pretrain_history_csv(&pre),
            "epoch,train_loss,dev_macro_f1\n0,1.250000,\n"
        );
        let adapt = vec![AdaptEpoch {
            epoch: 3,
            disc_loss: 0.5,
            confusion_loss: 0.25,
            recon_loss: None,
            supervised_loss: Some(0.125),
            objective: 0.875,
            disc_dev_accuracy: Some(0.5),
            dev_macro_f1: None,
        }];
        let csv = adapt_history_csv(&adapt);
        assert!(csv.ends_with("3,0.500000,0.250000,,0.125000,0.875000,0.500000,\n"));
        let dann = vec![DannEpoch {
            epoch: 1,
            cls_loss: 2.0,
            domain_loss: 0.7,
            dev_macro_f1: Some(0.25),
        }];
        assert_eq!(
            dann_history_csv(&dann),
            "epoch,cls_loss,domain_loss,dev_macro_f1\n1,2.000000,0.700000,0.250000\n"
        );
    }

    #[test]
    fn synth_runner_writes_splits_and_config() {
        let out = tmp("synth");
        let cfg = crate::testkit::tiny_corpus_config(9);
        let corpus = run_synth(&cfg, &out).unwrap();
        for split in [
            "source-train",
            "source-dev",
            "target-train",
            "target-dev",
            "target-test",
        ] {
            assert!(out.join(format!("{split}.jsonl")).exists());
        }
        assert!(out.join("synth_config.json").exists());
        let reloaded = Corpus::load(&out).unwrap();
        assert_eq!(reloaded.labels, corpus.labels);
        assert_eq!(reloaded.source_train.len(), corpus.source_train.len());
        std::fs::remove_dir_all(&out).ok();
    }

    #[test]
    fn pretrain_runner_writes_artifacts_and_scores() {
        let out = tmp("pretrain");
        let corpus = tiny_corpus(11);
        let cfg = tiny_cfg(11);
        let o = run_pretrain(&corpus, &cfg, None, &out).unwrap();
        assert!(o.checkpoint.exists());
        assert!(out.join("pretrain_config.json").exists());
        let history = std::fs::read_to_string(out.join("pretrain_history.csv")).unwrap();
        assert_eq!(history.lines().count(), 1 + cfg.pretrain_epochs);
        for d in ["source_dev", "target_test"] {
            assert!(out.join(d).join("predictions.csv").exists());
            assert!(out.join(d).join("metrics.csv").exists());
        }
        let f1 = o.source_dev_f1.unwrap();
        assert!((0.0..=1.0).contains(&f1));
        assert!((0.0..=1.0).contains(&o.target_test_f1.unwrap()));
        // The checkpoint round-trips into a usable state.
        let (loaded, _) = checkpoint::load_pretrain(&o.checkpoint).unwrap();
        assert_eq!(loaded.epochs_done, o.state.epochs_done);
        std::fs::remove_dir_all(&out).ok();
    }

    #[test]
    fn adapt_and_dann_runners_write_artifacts() {
        let corpus = tiny_corpus(12);
        let cfg = tiny_cfg(12);
        let pre_out = tmp("adapt-pre");
        let pre = run_pretrain(&corpus, &cfg, None, &pre_out).unwrap();
        let (enc, cls) = pre.state.best_model();

        let out = tmp("adapt");
        let o = run_adapt(
            &corpus,
            AdaptStart::Fresh {
                encoder: enc,
                classifier: cls,
                subset: Vec::new(),
            },
            &cfg,
            &out,
        )
        .unwrap();
        assert!(o.checkpoint.exists());
        let history = std::fs::read_to_string(out.join("adapt_history.csv")).unwrap();
        assert_eq!(history.lines().count(), 1 + cfg.adapt_epochs);
        assert!(out.join("target_test").join("metrics.csv").exists());
        assert!((0.0..=1.0).contains(&o.target_test_f1.unwrap()));
        assert!((0.0..=1.0).contains(&o.disc_dev_accuracy.unwrap()));

        let dann_out = tmp("dann");
        let mut dcfg = crate::dann::DannConfig::desk(12);
        dcfg.base = cfg.clone();
        dcfg.epochs = 2;
        let d = run_dann(&corpus, &dcfg, None, &dann_out).unwrap();
        assert!(d.checkpoint.exists());
        assert!(dann_out.join("dann_history.csv").exists());
        assert!((0.0..=1.0).contains(&d.target_test_f1.unwrap()));

        for p in [&pre_out, &out, &dann_out] {
            std::fs::remove_dir_all(p).ok();
        }
    }

    #[test]
    fn resumed_pretraining_matches_a_straight_run() {
        let corpus = tiny_corpus(13);
        let mut cfg = tiny_cfg(13);
        cfg.pretrain_epochs = 4;
        let straight_out = tmp("resume-a");
        let straight = run_pretrain(&corpus, &cfg, None, &straight_out).unwrap();

        let mut half = cfg.clone();
        half.pretrain_epochs = 2;
        let half_out = tmp("resume-b");
        let first = run_pretrain(&corpus, &half, None, &half_out).unwrap();
        let (loaded, _) = checkpoint::load_pretrain(&first.checkpoint).unwrap();
        let resumed_out = tmp("resume-c");
        let resumed = run_pretrain(&corpus, &cfg, Some(loaded), &resumed_out).unwrap();

        assert_eq!(
            crate::train::fingerprint(&straight.state.encoder),
            crate::train::fingerprint(&resumed.state.encoder)
        );
        assert_eq!(straight.target_test_f1, resumed.target_test_f1);
        for p in [&straight_out, &half_out, &resumed_out] {
            std::fs::remove_dir_all(p).ok();
        }
    }

    #[test]
    fn sweep_stage_writes_plan_and_reports() {
        let corpus = tiny_corpus(14);
        let mut cfg = tiny_cfg(14);
        cfg.pretrain_epochs = 1;
        cfg.adapt_epochs = 1;
        let plan = SweepPlan {
            fractions: vec![1.0],
            repeats: 1,
            seed: 14,
            parallel: false,
        };
        let out = tmp("sweep");
        let res = run_sweep_stage(&corpus, &cfg, &plan, &out).unwrap();
        assert_eq!(res.points.len(), 3);
        for f in [
            "sweep.csv",
            "sweep_summary.csv",
            "sweep.svg",
            "sweep_plan.json",
            "sweep_config.json",
        ] {
            assert!(out.join(f).exists(), "missing {f}");
        }
        std::fs::remove_dir_all(&out).ok();
    }

    #[test]
    fn evaluate_split_handles_unlabeled_data() {
        let corpus = tiny_corpus(15);
        let cfg = tiny_cfg(15);
        let embed = embedding_for(&corpus, &cfg);
        let enc = EncoderParams::init(embed, cfg.encoder_dims(), 1);
        let cls = ClassifierParams::init(enc.rep_dim(), corpus.labels.len(), 2);
        let mut unlabeled = corpus.target_test.clone();
        for i in &mut unlabeled {
            i.label = None;
        }
        let out = tmp("eval-unlabeled");
        let f1 = evaluate_split(&enc, &cls, &unlabeled, &corpus.labels, Some(&out)).unwrap();
        assert!(f1.is_none());
        assert!(out.join("predictions.csv").exists());
        assert!(!out.join("metrics.csv").exists());
        assert!(evaluate_split(&enc, &cls, &[], &corpus.labels, None)
            .unwrap()
            .is_none());
        std::fs::remove_dir_all(&out).ok();
    }
}
