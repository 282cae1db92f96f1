//! Throwaway diagnostic: dump discriminator output distributions and a
//! logistic-regression oracle on held-out adapted features.

use discoda::ad::Tape;
use discoda::checkpoint::load_adapt;
use discoda::data::{Corpus, Instance};
use discoda::encoder::{encode_instance, EncoderParams};
use discoda::heads::source_probability;
use std::path::Path;

fn feats(enc: &EncoderParams<f64>, instances: &[Instance]) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for chunk in instances.chunks(64) {
        let mut tape = Tape::new();
        let en = enc.stage_frozen(&mut tape);
        for inst in chunk {
            let rep = encode_instance(&mut tape, enc, &en, inst).unwrap();
            out.push(tape.value(rep).data().to_vec());
        }
    }
    out
}

fn probs(
    state: &discoda::train::AdaptState<f64>,
    enc: &EncoderParams<f64>,
    instances: &[Instance],
    sn: bool,
) -> Vec<f64> {
    let mut out = Vec::new();
    for chunk in instances.chunks(64) {
        let mut tape = Tape::new();
        let _en = enc.stage_frozen(&mut tape);
        let dn = state.d.stage_frozen(&mut tape, sn);
        let en = enc.stage_frozen(&mut tape);
        for inst in chunk {
            let rep = encode_instance(&mut tape, enc, &en, inst).unwrap();
            let p = source_probability(&mut tape, &dn, rep).unwrap();
            out.push(tape.value(p).item());
        }
        let _ = _en;
    }
    out
}

fn stats(name: &str, v: &[f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut hist = [0usize; 10];
    for &x in v {
        hist[((x * 10.0) as usize).min(9)] += 1;
    }
    println!("{name}: mean {mean:.4} sd {sd:.4} hist {hist:?}");
}

fn logreg_acc(xs: &[Vec<f64>], ys: &[f64]) -> f64 {
    let d = xs[0].len();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let n = xs.len() as f64;
    for _ in 0..2000 {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            let p = 1.0 / (1.0 + (-z).exp());
            let e = p - y;
            for (g, xi) in gw.iter_mut().zip(x) {
                *g += e * xi / n;
            }
            gb += e / n;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= 0.5 * g;
        }
        b -= 0.5 * gb;
    }
    let correct = xs
        .iter()
        .zip(ys)
        .filter(|(x, &y)| {
            let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            (z > 0.0) == (y > 0.5)
        })
        .count();
    correct as f64 / xs.len() as f64
}

fn fresh_disc(ckpt: &Path, data: &Path) {
    use discoda::ad::{collect_grads, Adam, GradMap};
    use discoda::encoder::encode_batch;
    use discoda::heads::DiscriminatorParams;
    use discoda::losses::discriminator_loss;

    let (state, cfg) = discoda::checkpoint::load_pretrain(ckpt).unwrap();
    let corpus = Corpus::load_with_labels(data, &state.labels).unwrap();
    let (enc, _) = state.best_model();
    let mut d: DiscriminatorParams<f64> = DiscriminatorParams::init(enc.rep_dim(), cfg.disc_dims(), 123);
    let mut opt = Adam::new(cfg.lr_adversarial);
    let n = corpus.source_train.len().min(corpus.target_train.len());
    for epoch in 0..5 {
        for start in (0..n).step_by(cfg.batch_size) {
            let end = (start + cfg.batch_size).min(n);
            let src: Vec<&Instance> = corpus.source_train[start..end].iter().collect();
            let tgt: Vec<&Instance> = corpus.target_train[start..end].iter().collect();
            if cfg.use_spectral_norm {
                d.spectral_update(cfg.sn_iterations);
            }
            let mut tape = Tape::new();
            let en = enc.stage_frozen(&mut tape);
            let dn = d.stage(&mut tape, cfg.use_spectral_norm);
            let fs = encode_batch(&mut tape, &enc, &en, &src).unwrap();
            let ft = encode_batch(&mut tape, &enc, &en, &tgt).unwrap();
            let loss = discriminator_loss(&mut tape, &dn, &fs, &ft).unwrap();
            let grads = tape.backward(loss).unwrap();
            let mut gm = GradMap::new();
            collect_grads(&tape, &grads, &dn.entries, "", &mut gm);
            opt.step(&mut d, &gm).unwrap();
        }
        let acc = {
            let mut correct = 0usize;
            for (side, is_source) in [(&corpus.source_dev, true), (&corpus.target_dev, false)] {
                for chunk in side.chunks(64) {
                    let mut tape = Tape::new();
                    let en = enc.stage_frozen(&mut tape);
                    let dn = d.stage_frozen(&mut tape, cfg.use_spectral_norm);
                    for inst in chunk {
                        let rep = encode_instance(&mut tape, &enc, &en, inst).unwrap();
                        let p = source_probability(&mut tape, &dn, rep).unwrap();
                        if (tape.value(p).item() > 0.5) == is_source {
                            correct += 1;
                        }
                    }
                }
            }
            correct as f64 / (corpus.source_dev.len() + corpus.target_dev.len()) as f64
        };
        println!("fresh-disc epoch {epoch}: dev accuracy {acc:.4}");
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.len() > 3 && args[3] == "fresh" {
        fresh_disc(Path::new(&args[1]), Path::new(&args[2]));
        return;
    }
    let (state, cfg) = load_adapt(Path::new(&args[1])).unwrap();
    let corpus = Corpus::load_with_labels(Path::new(&args[2]), &state.labels).unwrap();

    let ps = probs(&state, &state.ms, &corpus.source_dev, cfg.use_spectral_norm);
    let pt = probs(&state, &state.mt, &corpus.target_dev, cfg.use_spectral_norm);
    stats("D(source_dev)", &ps);
    stats("D(target_dev)", &pt);
    let acc = (ps.iter().filter(|p| **p > 0.5).count() + pt.iter().filter(|p| **p <= 0.5).count())
        as f64
        / (ps.len() + pt.len()) as f64;
    println!("D threshold accuracy: {acc:.4}");

    let fs = feats(&state.ms, &corpus.source_dev);
    let ft = feats(&state.mt, &corpus.target_dev);
    let d = fs[0].len();
    let mu = |v: &[Vec<f64>]| -> Vec<f64> {
        let mut m = vec![0.0; d];
        for x in v {
            for (mi, xi) in m.iter_mut().zip(x) {
                *mi += xi / v.len() as f64;
            }
        }
        m
    };
    let (ms, mt) = (mu(&fs), mu(&ft));
    let gap: f64 = ms
        .iter()
        .zip(&mt)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let spread = |v: &[Vec<f64>], m: &[f64]| -> f64 {
        (v.iter()
            .map(|x| {
                x.iter()
                    .zip(m)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / v.len() as f64)
            .sqrt()
    };
    println!(
        "feature mean gap {gap:.4}; source spread {:.4}; target spread {:.4}",
        spread(&fs, &ms),
        spread(&ft, &mt)
    );

    let mut xs = fs;
    xs.extend(ft);
    let mut ys = vec![1.0; corpus.source_dev.len()];
    ys.extend(vec![0.0; corpus.target_dev.len()]);
    println!("logistic-regression oracle accuracy: {:.4}", logreg_acc(&xs, &ys));
}
