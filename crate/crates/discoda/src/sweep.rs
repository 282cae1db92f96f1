//! Labeled-subset supervision sweep.
//!
//! For a grid of fractions of the target training set, three systems are
//! trained per repetition and scored by macro F1 on the target test split:
//!
//! - **supervised**: encoder and classifier trained from scratch on the
//!   sampled labeled subset alone;
//! - **pretraining**: the source-pretrained encoder and classifier
//!   fine-tuned on the subset (no adversarial components);
//! - **full**: the staged adaptation pipeline with the subset driving its
//!   supervised step.
//!
//! Source pretraining does not depend on the subset, so it runs once per
//! repetition and is shared by the second and third systems. Repetitions
//! use independent derived seeds and may run on parallel threads; results
//! are identical either way.

use crate::data::{sample_labeled_subset, Corpus, EmbeddingTable, Instance};
use crate::encoder::{encode_batch, EncoderParams};
use crate::error::{Error, Result};
use crate::eval::{line_chart_svg, macro_f1, mean, std_error, Series};
use crate::heads::ClassifierParams;
use crate::losses::supervised_loss;
use crate::train::{labeled_macro_f1, predict, pretrain, TrainConfig};
use discoda_ad::rng::{derive_seed, epoch_order};
use discoda_ad::tape::Tape;
use discoda_ad::{collect_grads, Adam, GradMap, Joint, ParamSet};
use serde::{Deserialize, Serialize};

/// The supervision grid: fractions of the target training split to label,
/// and how many independently seeded repetitions to average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepPlan {
    pub fractions: Vec<f64>,
    pub repeats: usize,
    pub seed: u64,
    /// Run repetitions on parallel threads.
    pub parallel: bool,
}

impl Default for SweepPlan {
    fn default() -> Self {
        Self {
            fractions: (1..=10).map(|i| i as f64 / 10.0).collect(),
            repeats: 3,
            seed: 42,
            parallel: true,
        }
    }
}

impl SweepPlan {
    pub fn validate(&self) -> Result<()> {
        if self.fractions.is_empty() {
            return Err(Error::Config("sweep needs at least one fraction".into()));
        }
        for &f in &self.fractions {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!(
                    "fractions must lie in (0, 1], got {f}"
                )));
            }
        }
        if self.fractions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "fractions must be strictly increasing".into(),
            ));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be positive".into()));
        }
        Ok(())
    }

    /// Subset sizes for a target training split of `n` instances: rounded,
    /// at least 1, duplicates collapsed (possible on small corpora).
    pub fn sizes(&self, n: usize) -> Vec<(f64, usize)> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        for &f in &self.fractions {
            let size = ((f * n as f64).round() as usize).clamp(1, n);
            if out.last().map_or(true, |&(_, s)| s != size) {
                out.push((f, size));
            } else {
                log::warn!("fraction {f} rounds to a duplicate subset size {size}; skipped");
            }
        }
        out
    }
}

/// One trained system in the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepSystem {
    Supervised,
    Pretraining,
    Full,
}

impl SweepSystem {
    pub const ALL: [SweepSystem; 3] = [
        SweepSystem::Supervised,
        SweepSystem::Pretraining,
        SweepSystem::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepSystem::Supervised => "supervised",
            SweepSystem::Pretraining => "pretraining",
            SweepSystem::Full => "full",
        }
    }
}

/// One (system, fraction, repetition) measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub system: SweepSystem,
    pub fraction: f64,
    pub size: usize,
    pub rep: usize,
    /// Macro F1 on the target test split, in [0, 1].
    pub macro_f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    /// The realized (fraction, size) grid.
    pub grid: Vec<(f64, usize)>,
}

/// Plain supervised training on a labeled set with target-dev early
/// stopping; shared by the supervised and pretraining systems.
fn supervised_training(
    corpus: &Corpus,
    mut enc: EncoderParams<f64>,
    mut cls: ClassifierParams<f64>,
    subset: &[Instance],
    cfg: &TrainConfig,
    shuffle_tag: &str,
) -> Result<(EncoderParams<f64>, ClassifierParams<f64>)> {
    let targets = crate::data::label_ids(subset, &corpus.labels)?;
    let mut opt = Adam::new(cfg.lr_classification);
    let mut best: Option<(f64, EncoderParams<f64>, ClassifierParams<f64>)> = None;
    let mut since_improve = 0usize;
    for epoch in 0..cfg.adapt_epochs {
        let order = epoch_order(cfg.seed, shuffle_tag, epoch, subset.len());
        for ids in order.chunks(cfg.batch_size) {
            let batch: Vec<&Instance> = ids.iter().map(|&i| &subset[i]).collect();
            let batch_targets: Vec<usize> = ids.iter().map(|&i| targets[i]).collect();
            let mut tape = Tape::new();
            let en = enc.stage(&mut tape);
            let cn = cls.stage(&mut tape);
            let reps = encode_batch(&mut tape, &enc, &en, &batch)?;
            let loss = supervised_loss(
                &mut tape,
                &cn,
                &reps,
                &batch_targets,
                corpus.labels.len(),
            )?;
            let grads = tape.backward(loss)?;
            let mut gm = GradMap::new();
            collect_grads(&tape, &grads, &en.entries, "enc.", &mut gm);
            collect_grads(&tape, &grads, &cn.entries, "cls.", &mut gm);
            let mut joint = Joint::new(vec![
                ("enc.", &mut enc as &mut dyn ParamSet<f64>),
                ("cls.", &mut cls),
            ]);
            opt.step(&mut joint, &gm)?;
        }
        if let Some(f1) = labeled_macro_f1(&enc, &cls, &corpus.target_dev, &corpus.labels)? {
            if best.as_ref().map_or(true, |(b, _, _)| f1 > *b) {
                best = Some((f1, enc.clone(), cls.clone()));
                since_improve = 0;
            } else {
                since_improve += 1;
                if since_improve >= cfg.patience {
                    break;
                }
            }
        }
    }
    Ok(match best {
        Some((_, e, c)) => (e, c),
        None => (enc, cls),
    })
}

/// Trains all three systems for one repetition and returns its points.
fn run_rep(
    corpus: &Corpus,
    embed: &EmbeddingTable<f64>,
    base: &TrainConfig,
    grid: &[(f64, usize)],
    rep: usize,
    rep_seed: u64,
) -> Result<Vec<SweepPoint>> {
    let mut cfg = base.clone();
    cfg.seed = rep_seed;
    let gold: Vec<usize> = crate::data::label_ids(&corpus.target_test, &corpus.labels)?;
    let k = corpus.labels.len();
    let score = |enc: &EncoderParams<f64>, cls: &ClassifierParams<f64>| -> Result<f64> {
        let pred = predict(enc, cls, &corpus.target_test)?;
        macro_f1(&gold, &pred, k)
    };

    // Source pretraining is subset-independent: run once, share below.
    let pre = pretrain(corpus, embed.clone(), &cfg)?;
    let (pre_enc, pre_cls) = pre.best_model();

    let mut points = Vec::with_capacity(grid.len() * SweepSystem::ALL.len());
    for &(fraction, size) in grid {
        let subset = sample_labeled_subset(
            &corpus.target_train,
            size,
            derive_seed(rep_seed, &format!("subset.{size}")),
        )?;

        let mut scratch_enc = EncoderParams::init(
            embed.clone(),
            cfg.encoder_dims(),
            derive_seed(rep_seed, "init.encoder.supervised"),
        );
        scratch_enc.train_embeddings = cfg.train_embeddings;
        let scratch_cls = ClassifierParams::init(
            scratch_enc.rep_dim(),
            k,
            derive_seed(rep_seed, "init.classifier.supervised"),
        );
        let (e, c) = supervised_training(
            corpus,
            scratch_enc,
            scratch_cls,
            &subset,
            &cfg,
            "shuffle.supervised-only",
        )?;
        points.push(SweepPoint {
            system: SweepSystem::Supervised,
            fraction,
            size,
            rep,
            macro_f1: score(&e, &c)?,
        });

        let (e, c) = supervised_training(
            corpus,
            pre_enc.clone(),
            pre_cls.clone(),
            &subset,
            &cfg,
            "shuffle.finetune",
        )?;
        points.push(SweepPoint {
            system: SweepSystem::Pretraining,
            fraction,
            size,
            rep,
            macro_f1: score(&e, &c)?,
        });

        let adapted = crate::train::adapt(corpus, pre_enc.clone(), pre_cls.clone(), subset, &cfg)?;
        let (e, c) = adapted.best_model();
        points.push(SweepPoint {
            system: SweepSystem::Full,
            fraction,
            size,
            rep,
            macro_f1: score(&e, &c)?,
        });
    }
    Ok(points)
}

/// Runs the whole sweep. With `plan.parallel`, repetitions run on separate
/// threads; the result is identical to the sequential order.
pub fn run_sweep(
    corpus: &Corpus,
    embed: &EmbeddingTable<f64>,
    base: &TrainConfig,
    plan: &SweepPlan,
) -> Result<SweepResult> {
    plan.validate()?;
    base.validate()?;
    if corpus.target_test.is_empty() {
        return Err(Error::Data("sweep needs a target test split".into()));
    }
    let grid = plan.sizes(corpus.target_train.len());
    let rep_seeds: Vec<u64> = (0..plan.repeats)
        .map(|r| derive_seed(plan.seed, &format!("sweep.rep{r}")))
        .collect();
    let mut per_rep: Vec<Result<Vec<SweepPoint>>> = Vec::new();
    if plan.parallel && plan.repeats > 1 {
        per_rep = std::thread::scope(|s| {
            let handles: Vec<_> = rep_seeds
                .iter()
                .enumerate()
                .map(|(r, &seed)| {
                    let grid = &grid;
                    s.spawn(move || run_rep(corpus, embed, base, grid, r, seed))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
        });
    } else {
        for (r, &seed) in rep_seeds.iter().enumerate() {
            per_rep.push(run_rep(corpus, embed, base, &grid, r, seed));
        }
    }
    let mut points = Vec::new();
    for rep in per_rep {
        points.extend(rep?);
    }
    Ok(SweepResult { points, grid })
}

impl SweepResult {
    /// Per (system, grid point): mean macro F1 and its standard error
    /// across repetitions.
    pub fn summary(&self) -> Vec<(SweepSystem, f64, usize, f64, f64)> {
        let mut rows = Vec::new();
        for system in SweepSystem::ALL {
            for &(fraction, size) in &self.grid {
                let vals: Vec<f64> = self
                    .points
                    .iter()
                    .filter(|p| p.system == system && p.size == size)
                    .map(|p| p.macro_f1)
                    .collect();
                if !vals.is_empty() {
                    rows.push((system, fraction, size, mean(&vals), std_error(&vals)));
                }
            }
        }
        rows
    }

    /// Mean macro F1 of one system along the grid, in grid order.
    pub fn mean_curve(&self, system: SweepSystem) -> Vec<f64> {
        self.summary()
            .into_iter()
            .filter(|(s, ..)| *s == system)
            .map(|(_, _, _, m, _)| m)
            .collect()
    }

    /// Raw per-point CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("system,fraction,size,rep,macro_f1\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{:.4},{},{},{:.4}\n",
                p.system.name(),
                p.fraction,
                p.size,
                p.rep,
                p.macro_f1
            ));
        }
        out
    }

    /// Aggregated CSV: one row per system and grid point.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("system,fraction,size,mean_macro_f1,std_error\n");
        for (system, fraction, size, m, se) in self.summary() {
            out.push_str(&format!(
                "{},{:.4},{},{:.4},{:.4}\n",
                system.name(),
                fraction,
                size,
                m,
                se
            ));
        }
        out
    }

    /// Macro F1 (mean over repetitions) versus labeled-subset size, one
    /// series per system, with standard-error bars.
    pub fn chart_svg(&self) -> String {
        let mut series = Vec::new();
        for system in SweepSystem::ALL {
            let points: Vec<(f64, f64, f64)> = self
                .summary()
                .into_iter()
                .filter(|(s, ..)| *s == system)
                .map(|(_, _, size, m, se)| (size as f64, m, se))
                .collect();
            series.push(Series {
                name: system.name().to_string(),
                points,
            });
        }
        line_chart_svg(
            "Macro F1 versus labeled target instances",
            "labeled target instances",
            "macro F1",
            &series,
        )
    }

    /// Writes `sweep.csv`, `sweep_summary.csv`, and `sweep.svg` into `dir`.
    pub fn write_reports(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("sweep.csv"), self.to_csv())?;
        std::fs::write(dir.join("sweep_summary.csv"), self.summary_csv())?;
        std::fs::write(dir.join("sweep.svg"), self.chart_svg())?;
        Ok(())
    }
}
