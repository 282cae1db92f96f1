//! Evaluation and reporting: confusion matrices, per-class precision /
//! recall / F1, macro aggregation, rank correlation, and simple SVG charts.

use crate::error::{Error, Result};
use serde::Serialize;
use std::fmt::Write as _;
use std::path::Path;

/// Per-class metrics derived from a confusion matrix.
#[derive(Debug, Clone, Serialize)]
pub struct ClassMetrics {
    pub label: String,
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// A `K x K` confusion matrix indexed `[gold][predicted]`.
#[derive(Debug, Clone)]
pub struct ConfusionMatrix {
    labels: Vec<String>,
    counts: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn new(labels: &[String]) -> Self {
        Self {
            labels: labels.to_vec(),
            counts: vec![0; labels.len() * labels.len()],
        }
    }

    /// A matrix over anonymous classes `0..k`.
    pub fn indexed(k: usize) -> Self {
        let labels: Vec<String> = (0..k).map(|i| i.to_string()).collect();
        Self::new(&labels)
    }

    pub fn from_pairs(gold: &[usize], pred: &[usize], labels: &[String]) -> Result<Self> {
        if gold.len() != pred.len() {
            return Err(Error::Data(format!(
                "{} gold labels but {} predictions",
                gold.len(),
                pred.len()
            )));
        }
        let mut cm = Self::new(labels);
        for (&g, &p) in gold.iter().zip(pred) {
            cm.record(g, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, gold: usize, pred: usize) -> Result<()> {
        let k = self.k();
        if gold >= k || pred >= k {
            return Err(Error::Data(format!(
                "class pair ({gold}, {pred}) out of range for {k} classes"
            )));
        }
        self.counts[gold * k + pred] += 1;
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn count(&self, gold: usize, pred: usize) -> usize {
        self.counts[gold * self.k() + pred]
    }

    /// Number of gold instances of one class.
    pub fn support(&self, gold: usize) -> usize {
        (0..self.k()).map(|p| self.count(gold, p)).sum()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let hits: usize = (0..self.k()).map(|i| self.count(i, i)).sum();
        hits as f64 / total as f64
    }

    /// Rows normalized to sum to one; all-zero rows stay zero.
    pub fn row_normalized(&self) -> Vec<f64> {
        let k = self.k();
        let mut out = vec![0.0; k * k];
        for g in 0..k {
            let support = self.support(g);
            if support == 0 {
                continue;
            }
            for p in 0..k {
                out[g * k + p] = self.count(g, p) as f64 / support as f64;
            }
        }
        out
    }

    /// Precision, recall, and F1 per class. A zero denominator yields zero,
    /// so absent classes drag the macro average down instead of poisoning it.
    pub fn per_class(&self) -> Vec<ClassMetrics> {
        let k = self.k();
        (0..k)
            .map(|c| {
                let tp = self.count(c, c);
                let predicted: usize = (0..k).map(|g| self.count(g, c)).sum();
                let support = self.support(c);
                let precision = ratio(tp, predicted);
                let recall = ratio(tp, support);
                let f1 = if precision + recall == 0.0 {
                    0.0
                } else {
                    2.0 * precision * recall / (precision + recall)
                };
                ClassMetrics {
                    label: self.labels[c].clone(),
                    support,
                    precision,
                    recall,
                    f1,
                }
            })
            .collect()
    }

    /// Unweighted mean of the per-class F1 scores, over the full label
    /// inventory.
    pub fn macro_f1(&self) -> f64 {
        let per = self.per_class();
        macro_average(&per.iter().map(|m| m.f1).collect::<Vec<_>>())
    }

    /// Raw counts as CSV (`gold \ predicted`).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("gold\\predicted");
        for l in &self.labels {
            let _ = write!(out, ",{l}");
        }
        out.push('\n');
        for g in 0..self.k() {
            let _ = write!(out, "{}", self.labels[g]);
            for p in 0..self.k() {
                let _ = write!(out, ",{}", self.count(g, p));
            }
            out.push('\n');
        }
        out
    }

    /// Row-normalized matrix as CSV with four fraction digits.
    pub fn normalized_csv(&self) -> String {
        let norm = self.row_normalized();
        let k = self.k();
        let mut out = String::from("gold\\predicted");
        for l in &self.labels {
            let _ = write!(out, ",{l}");
        }
        out.push('\n');
        for g in 0..k {
            let _ = write!(out, "{}", self.labels[g]);
            for p in 0..k {
                let _ = write!(out, ",{:.4}", norm[g * k + p]);
            }
            out.push('\n');
        }
        out
    }

    /// Per-class metrics as CSV with four fraction digits, followed by the
    /// macro-F1 and accuracy summary rows.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("label,support,precision,recall,f1\n");
        for m in self.per_class() {
            let _ = writeln!(
                out,
                "{},{},{:.4},{:.4},{:.4}",
                m.label, m.support, m.precision, m.recall, m.f1
            );
        }
        let _ = writeln!(out, "macro,{},,,{:.4}", self.total(), self.macro_f1());
        let _ = writeln!(out, "accuracy,{},,,{:.4}", self.total(), self.accuracy());
        out
    }

    /// Human-readable summary table.
    pub fn summary(&self) -> String {
        let width = self
            .labels
            .iter()
            .map(|l| l.len())
            .max()
            .unwrap_or(5)
            .max(8);
        let mut out = format!(
            "{:<width$}  {:>7}  {:>9}  {:>7}  {:>7}\n",
            "class", "support", "precision", "recall", "f1"
        );
        for m in self.per_class() {
            let _ = writeln!(
                out,
                "{:<width$}  {:>7}  {:>9.4}  {:>7.4}  {:>7.4}",
                m.label, m.support, m.precision, m.recall, m.f1
            );
        }
        let _ = writeln!(
            out,
            "\nmacro F1 {:.4}   accuracy {:.4}   instances {}",
            self.macro_f1(),
            self.accuracy(),
            self.total()
        );
        out
    }
}

fn ratio(num: usize, denom: usize) -> f64 {
    if denom == 0 {
        0.0
    } else {
        num as f64 / denom as f64
    }
}

/// Unweighted mean; empty input yields zero.
pub fn macro_average(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Macro F1 over anonymous classes `0..k`.
pub fn macro_f1(gold: &[usize], pred: &[usize], k: usize) -> Result<f64> {
    let labels: Vec<String> = (0..k).map(|i| i.to_string()).collect();
    Ok(ConfusionMatrix::from_pairs(gold, pred, &labels)?.macro_f1())
}

/// Writes the standard report files for one evaluation into `dir`:
/// `metrics.csv`, `confusion.csv`, `confusion_normalized.csv`, `summary.txt`.
pub fn write_reports(dir: &Path, cm: &ConfusionMatrix) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.csv"), cm.metrics_csv())?;
    std::fs::write(dir.join("confusion.csv"), cm.to_csv())?;
    std::fs::write(dir.join("confusion_normalized.csv"), cm.normalized_csv())?;
    std::fs::write(dir.join("summary.txt"), cm.summary())?;
    Ok(())
}

/// Sample mean.
pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Standard error of the mean (sample standard deviation over `sqrt(n)`);
/// zero for fewer than two values.
pub fn std_error(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// Ranks with ties sharing their average rank (1-based).
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0; // mean of ranks i+1 ..= j+1
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Data(format!(
            "rank correlation over {} xs and {} ys",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::Data(
            "rank correlation needs at least two points".into(),
        ));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let mx = mean(&rx);
    let my = mean(&ry);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Data(
            "rank correlation undefined for a constant sequence".into(),
        ));
    }
    Ok(cov / (vx.sqrt() * vy.sqrt()))
}

/// One line in a chart: `(x, mean, standard error)` triples.
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64, f64)>,
}

/// Renders series as an SVG line chart with error bars. Pure string
/// assembly; deterministic for fixed input.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const ML: f64 = 64.0; // left margin
    const MR: f64 = 24.0;
    const MT: f64 = 40.0;
    const MB: f64 = 56.0;
    const COLORS: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

    let all: Vec<(f64, f64, f64)> = series.iter().flat_map(|s| s.points.clone()).collect();
    let (x_min, x_max) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.0), hi.max(p.0))
        });
    let (y_min, y_max) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.1 - p.2), hi.max(p.1 + p.2))
        });
    let x_span = if x_max > x_min { x_max - x_min } else { 1.0 };
    let pad = ((y_max - y_min) * 0.08).max(0.01);
    let (y_lo, y_hi) = (y_min - pad, y_max + pad);
    let sx = |x: f64| ML + (x - x_min) / x_span * (W - ML - MR);
    let sy = |y: f64| H - MB - (y - y_lo) / (y_hi - y_lo) * (H - MT - MB);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{:.1}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{title}</text>\n",
        W / 2.0
    );
    // Axes.
    let _ = writeln!(
        svg,
        "<line x1=\"{ML}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n\
         <line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{:.1}\" stroke=\"black\"/>",
        H - MB,
        W - MR,
        H - MB,
        H - MB
    );
    let _ = writeln!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{x_label}</text>\n\
         <text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{y_label}</text>",
        (ML + W - MR) / 2.0,
        H - 14.0,
        (MT + H - MB) / 2.0,
        (MT + H - MB) / 2.0
    );
    // Ticks: five per axis.
    for i in 0..=4 {
        let fx = x_min + x_span * i as f64 / 4.0;
        let px = sx(fx);
        let _ = writeln!(
            svg,
            "<line x1=\"{px:.1}\" y1=\"{:.1}\" x2=\"{px:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n\
             <text x=\"{px:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{fx:.2}</text>",
            H - MB,
            H - MB + 5.0,
            H - MB + 20.0
        );
        let fy = y_lo + (y_hi - y_lo) * i as f64 / 4.0;
        let py = sy(fy);
        let _ = writeln!(
            svg,
            "<line x1=\"{:.1}\" y1=\"{py:.1}\" x2=\"{ML}\" y2=\"{py:.1}\" stroke=\"black\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{fy:.3}</text>",
            ML - 5.0,
            ML - 8.0,
            py + 4.0
        );
    }
    // Series.
    for (si, s) in series.iter().enumerate() {
        let color = COLORS[si % COLORS.len()];
        let path: Vec<String> = s
            .points
            .iter()
            .map(|(x, y, _)| format!("{:.1},{:.1}", sx(*x), sy(*y)))
            .collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\" points=\"{}\"/>",
            path.join(" ")
        );
        for (x, y, se) in &s.points {
            let (px, py) = (sx(*x), sy(*y));
            let _ = writeln!(
                svg,
                "<circle cx=\"{px:.1}\" cy=\"{py:.1}\" r=\"2.6\" fill=\"{color}\"/>"
            );
            if *se > 0.0 {
                let (top, bot) = (sy(y + se), sy(y - se));
                let _ = writeln!(
                    svg,
                    "<line x1=\"{px:.1}\" y1=\"{top:.1}\" x2=\"{px:.1}\" y2=\"{bot:.1}\" \
                     stroke=\"{color}\"/>\n\
                     <line x1=\"{:.1}\" y1=\"{top:.1}\" x2=\"{:.1}\" y2=\"{top:.1}\" stroke=\"{color}\"/>\n\
                     <line x1=\"{:.1}\" y1=\"{bot:.1}\" x2=\"{:.1}\" y2=\"{bot:.1}\" stroke=\"{color}\"/>",
                    px - 3.0,
                    px + 3.0,
                    px - 3.0,
                    px + 3.0
                );
            }
        }
        // Legend entry.
        let ly = MT + 16.0 * si as f64;
        let _ = writeln!(
            svg,
            "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
            W - MR - 150.0,
            W - MR - 126.0,
            W - MR - 120.0,
            ly + 4.0,
            s.name
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("class_{i}")).collect()
    }

    /// Counting oracle: tally every cell by hand for a small fixed case.
    #[test]
    fn counts_precision_recall_and_f1_match_hand_tallies() {
        let gold = [0usize, 0, 1, 2, 2, 2];
        let pred = [0usize, 1, 1, 2, 0, 2];
        let cm = ConfusionMatrix::from_pairs(&gold, &pred, &labels(3)).unwrap();
        assert_eq!(cm.count(0, 0), 1);
        assert_eq!(cm.count(0, 1), 1);
        assert_eq!(cm.count(1, 1), 1);
        assert_eq!(cm.count(2, 2), 2);
        assert_eq!(cm.count(2, 0), 1);
        assert_eq!(cm.total(), 6);
        let per = cm.per_class();
        assert!((per[0].precision - 0.5).abs() < 1e-12);
        assert!((per[0].recall - 0.5).abs() < 1e-12);
        assert!((per[0].f1 - 0.5).abs() < 1e-12);
        assert!((per[1].precision - 0.5).abs() < 1e-12);
        assert!((per[1].recall - 1.0).abs() < 1e-12);
        assert!((per[1].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((per[2].precision - 1.0).abs() < 1e-12);
        assert!((per[2].recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((per[2].f1 - 0.8).abs() < 1e-12);
        let expected_macro = (0.5 + 2.0 / 3.0 + 0.8) / 3.0;
        assert!((cm.macro_f1() - expected_macro).abs() < 1e-12);
        assert!((cm.accuracy() - 4.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn absent_classes_contribute_zero_f1_to_the_macro_average() {
        let gold = [0usize, 1, 0, 1];
        let pred = [0usize, 1, 0, 1];
        let cm = ConfusionMatrix::from_pairs(&gold, &pred, &labels(3)).unwrap();
        assert!((cm.macro_f1() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn pair_order_does_not_matter() {
        let gold = [0usize, 1, 2, 0, 1, 2, 1];
        let pred = [1usize, 1, 2, 0, 0, 2, 1];
        let cm1 = ConfusionMatrix::from_pairs(&gold, &pred, &labels(3)).unwrap();
        let perm = [6usize, 2, 4, 0, 5, 1, 3];
        let g2: Vec<usize> = perm.iter().map(|&i| gold[i]).collect();
        let p2: Vec<usize> = perm.iter().map(|&i| pred[i]).collect();
        let cm2 = ConfusionMatrix::from_pairs(&g2, &p2, &labels(3)).unwrap();
        assert!((cm1.macro_f1() - cm2.macro_f1()).abs() < 1e-15);
        assert_eq!(cm1.to_csv(), cm2.to_csv());
    }

    #[test]
    fn relabeling_classes_permutes_per_class_rows() {
        let gold = [0usize, 0, 1, 2, 2];
        let pred = [0usize, 1, 1, 2, 0];
        let cm = ConfusionMatrix::from_pairs(&gold, &pred, &labels(3)).unwrap();
        // Swap classes 0 and 2 everywhere.
        let swap = |v: usize| match v {
            0 => 2,
            2 => 0,
            x => x,
        };
        let g2: Vec<usize> = gold.iter().map(|&v| swap(v)).collect();
        let p2: Vec<usize> = pred.iter().map(|&v| swap(v)).collect();
        let cm2 = ConfusionMatrix::from_pairs(&g2, &p2, &labels(3)).unwrap();
        let (a, b) = (cm.per_class(), cm2.per_class());
        assert!((a[0].f1 - b[2].f1).abs() < 1e-15);
        assert!((a[2].f1 - b[0].f1).abs() < 1e-15);
        assert!((cm.macro_f1() - cm2.macro_f1()).abs() < 1e-15);
    }

    #[test]
    fn normalized_rows_sum_to_one_or_stay_zero() {
        let gold = [0usize, 0, 1];
        let pred = [0usize, 1, 1];
        let cm = ConfusionMatrix::from_pairs(&gold, &pred, &labels(3)).unwrap();
        let norm = cm.row_normalized();
        assert!((norm[0] + norm[1] + norm[2] - 1.0).abs() < 1e-12);
        assert_eq!(&norm[6..9], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn csv_outputs_use_four_fraction_digits() {
        let gold = [0usize, 0, 0, 1, 1, 2];
        let pred = [0usize, 0, 1, 1, 2, 2];
        let cm = ConfusionMatrix::from_pairs(&gold, &pred, &labels(3)).unwrap();
        let metrics = cm.metrics_csv();
        assert!(metrics.contains("0.6667"), "{metrics}");
        let norm = cm.normalized_csv();
        assert!(norm.contains("0.3333"), "{norm}");
        assert!(cm.to_csv().starts_with("gold\\predicted,class_0"));
    }

    #[test]
    fn out_of_range_classes_are_rejected() {
        let mut cm = ConfusionMatrix::indexed(2);
        assert!(cm.record(0, 2).is_err());
        assert!(cm.record(2, 0).is_err());
        assert!(ConfusionMatrix::from_pairs(&[0], &[0, 1], &labels(2)).is_err());
    }

    #[test]
    fn spearman_hits_the_monotone_extremes() {
        let xs = [0.1, 0.2, 0.3, 0.4, 0.5];
        let up = [1.0, 4.0, 9.0, 16.0, 25.0];
        let down = [5.0, 4.0, 3.0, 2.0, 1.0];
        assert!((spearman(&xs, &up).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&xs, &down).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_averages_tied_ranks() {
        let xs = [1.0, 2.0, 2.0, 3.0];
        let ys = [1.0, 2.0, 3.0, 4.0];
        let expected = 4.5 / (4.5f64.sqrt() * 5.0f64.sqrt());
        assert!((spearman(&xs, &ys).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn spearman_rejects_degenerate_input() {
        assert!(spearman(&[1.0], &[2.0]).is_err());
        assert!(spearman(&[1.0, 2.0], &[3.0]).is_err());
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn standard_error_of_three_consecutive_integers() {
        let se = std_error(&[40.0, 41.0, 42.0]);
        assert!((se - 0.5774).abs() < 1e-4);
        assert_eq!(std_error(&[7.0]), 0.0);
    }

    #[test]
    fn chart_renders_every_series_with_error_bars() {
        let series = [
            Series {
                name: "full".into(),
                points: vec![(0.1, 0.4, 0.02), (0.5, 0.6, 0.01), (1.0, 0.7, 0.0)],
            },
            Series {
                name: "baseline".into(),
                points: vec![(0.1, 0.3, 0.05), (0.5, 0.4, 0.02), (1.0, 0.5, 0.01)],
            },
        ];
        let svg = line_chart_svg("sweep", "labeled fraction", "macro F1", &series);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("full"));
        assert!(svg.contains("baseline"));
        assert!(svg.contains("labeled fraction"));
        // Error bars: one vertical + two caps per point with nonzero spread.
        assert!(svg.matches("<circle").count() >= 6);
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn macro_average_is_a_plain_mean() {
        assert!((macro_average(&[31.25, 48.04, 25.15, 59.15]) - 40.8975).abs() < 1e-10);
        assert_eq!(macro_average(&[]), 0.0);
    }
}
