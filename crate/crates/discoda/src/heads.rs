//! Model heads that consume pair representations: the sense classifier, the
//! domain discriminator (with spectral weight normalization), and the
//! bottlenecked feature reconstructor.

use crate::error::{Error, Result};
use discoda_ad::rng::stream;
use discoda_ad::tape::{NodeId, Tape};
use discoda_ad::{ParamSet, Scalar, Tensor};
use serde::{Deserialize, Serialize};

/// Negative-side slope shared by the discriminator and reconstructor hidden
/// activations.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Smallest admissible spectral-norm estimate; divisions use this floor.
pub const SIGMA_FLOOR: f64 = 1e-12;

fn linear_init<S: Scalar>(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> Tensor<S> {
    let bound = 1.0 / (rows as f64).sqrt();
    Tensor::rand_uniform(vec![rows, cols], -bound, bound, rng)
}

// ── Classifier ──────────────────────────────────────────────────────────

/// Single affine layer mapping a pair representation to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams<S> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

impl<S: Scalar> ClassifierParams<S> {
    pub fn init(rep_dim: usize, classes: usize, seed: u64) -> Self {
        let mut rng = stream(seed, "classifier");
        Self {
            w: linear_init(rep_dim, classes, &mut rng),
            b: Tensor::zeros(vec![1, classes]),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.b.numel()
    }

    pub fn stage(&self, tape: &mut Tape<S>) -> ClassifierNodes {
        self.stage_as(tape, true)
    }

    pub fn stage_frozen(&self, tape: &mut Tape<S>) -> ClassifierNodes {
        self.stage_as(tape, false)
    }

    fn stage_as(&self, tape: &mut Tape<S>, trainable: bool) -> ClassifierNodes {
        let w = tape.param(&self.w, trainable);
        let b = tape.param(&self.b, trainable);
        ClassifierNodes {
            w,
            b,
            entries: vec![("w".to_string(), w), ("b".to_string(), b)],
        }
    }
}

impl<S: Scalar> ParamSet<S> for ClassifierParams<S> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        f("w", &self.w);
        f("b", &self.b);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        f("w", &mut self.w);
        f("b", &mut self.b);
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierNodes {
    pub w: NodeId,
    pub b: NodeId,
    pub entries: Vec<(String, NodeId)>,
}

/// Class logits `[rows, K]` for pair representations `[rows, rep_dim]`.
pub fn class_logits<S: Scalar>(
    tape: &mut Tape<S>,
    nodes: &ClassifierNodes,
    rep: NodeId,
) -> Result<NodeId> {
    let scores = tape.matmul(rep, nodes.w)?;
    Ok(tape.add_bias(scores, nodes.b)?)
}

/// Class probabilities via softmax over the logits.
pub fn classify<S: Scalar>(
    tape: &mut Tape<S>,
    nodes: &ClassifierNodes,
    rep: NodeId,
) -> Result<NodeId> {
    let logits = class_logits(tape, nodes, rep)?;
    Ok(tape.softmax(logits)?)
}

/// Label-smoothed target distribution: the true class keeps `1 - eps` extra
/// mass and every class (including the true one) receives `eps / K`.
pub fn smoothed_targets<S: Scalar>(classes: usize, truth: usize, eps: f64) -> Result<Vec<S>> {
    if classes < 2 {
        return Err(Error::Config(format!(
            "label smoothing needs at least 2 classes, got {classes}"
        )));
    }
    if truth >= classes {
        return Err(Error::Config(format!(
            "true class {truth} out of range for {classes} classes"
        )));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Config(format!(
            "smoothing must lie in [0, 1), got {eps}"
        )));
    }
    let uniform = eps / classes as f64;
    Ok((0..classes)
        .map(|k| {
            let q = if k == truth { 1.0 - eps + uniform } else { uniform };
            S::c(q)
        })
        .collect())
}

// ── Discriminator with spectral normalization ──────────────────────────

/// Hidden widths of the two discriminator layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscDims {
    pub h1: usize,
    pub h2: usize,
}

/// Power-iteration state for one weight matrix `[rows, cols]`: persistent
/// left/right singular-vector estimates and the current spectral-norm
/// estimate (kept as tensors so checkpoints and fingerprints carry them).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralState<S> {
    pub left: Tensor<S>,
    pub right: Tensor<S>,
    pub sigma: Tensor<S>,
}

impl<S: Scalar> SpectralState<S> {
    fn init(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> Self {
        let mut left = Tensor::rand_uniform(vec![rows], -1.0, 1.0, rng);
        normalize(left.data_mut());
        Self {
            left,
            right: Tensor::zeros(vec![cols]),
            sigma: Tensor::new(vec![1], vec![S::one()]).expect("unit shape"),
        }
    }

    pub fn sigma_value(&self) -> S {
        self.sigma.data()[0]
    }
}

/// Normalizes in place; leaves near-zero vectors untouched so degenerate
/// weights cannot produce NaN.
fn normalize<S: Scalar>(v: &mut [S]) {
    let norm = v.iter().map(|&x| x * x).sum::<S>().sqrt();
    if norm.to_f64c() > 1e-30 {
        for x in v {
            *x /= norm;
        }
    }
}

/// One power-iteration update for `w` `[rows, cols]`; refreshes the stored
/// singular-vector estimates and the spectral-norm estimate.
fn power_iterate<S: Scalar>(w: &Tensor<S>, state: &mut SpectralState<S>, iters: usize) {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    for _ in 0..iters {
        // right <- normalize(W^T left)
        let left = state.left.data().to_vec();
        let right = state.right.data_mut();
        for (c, r_out) in right.iter_mut().enumerate() {
            *r_out = (0..rows).map(|r| w.at(r, c) * left[r]).sum();
        }
        normalize(right);
        // left <- normalize(W right)
        let right = state.right.data().to_vec();
        let left = state.left.data_mut();
        for (r, l_out) in left.iter_mut().enumerate() {
            *l_out = (0..cols).map(|c| w.at(r, c) * right[c]).sum();
        }
        normalize(left);
    }
    let mut sigma = S::zero();
    for r in 0..rows {
        for c in 0..cols {
            sigma += state.left.data()[r] * w.at(r, c) * state.right.data()[c];
        }
    }
    let floor = S::c(SIGMA_FLOOR);
    state.sigma.data_mut()[0] = if sigma > floor { sigma } else { floor };
}

/// Two hidden layers with leaky-ReLU activations and a two-way softmax
/// output (column 0 = source, column 1 = target). Every weight matrix is
/// divided by its running spectral-norm estimate when staged with
/// normalization enabled; the estimate enters the graph as a constant.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams<S> {
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
    pub w3: Tensor<S>,
    pub b3: Tensor<S>,
    pub sn: [SpectralState<S>; 3],
}

impl<S: Scalar> DiscriminatorParams<S> {
    pub fn init(rep_dim: usize, dims: DiscDims, seed: u64) -> Self {
        let mut rng = stream(seed, "discriminator");
        let w1 = linear_init(rep_dim, dims.h1, &mut rng);
        let w2 = linear_init(dims.h1, dims.h2, &mut rng);
        let w3 = linear_init(dims.h2, 2, &mut rng);
        let sn = [
            SpectralState::init(rep_dim, dims.h1, &mut rng),
            SpectralState::init(dims.h1, dims.h2, &mut rng),
            SpectralState::init(dims.h2, 2, &mut rng),
        ];
        Self {
            w1,
            b1: Tensor::zeros(vec![1, dims.h1]),
            w2,
            b2: Tensor::zeros(vec![1, dims.h2]),
            w3,
            b3: Tensor::zeros(vec![1, 2]),
            sn,
        }
    }

    /// Runs `iters` power-iteration steps on every layer, updating the
    /// persistent estimates. Called once per discriminator update.
    pub fn spectral_update(&mut self, iters: usize) {
        power_iterate(&self.w1, &mut self.sn[0], iters);
        power_iterate(&self.w2, &mut self.sn[1], iters);
        power_iterate(&self.w3, &mut self.sn[2], iters);
    }

    /// Current spectral-norm estimates per layer.
    pub fn sigmas(&self) -> [S; 3] {
        [
            self.sn[0].sigma_value(),
            self.sn[1].sigma_value(),
            self.sn[2].sigma_value(),
        ]
    }

    /// The effective (normalized) weight matrices the forward pass uses.
    pub fn normalized_weights(&self) -> [Tensor<S>; 3] {
        let scale = |w: &Tensor<S>, s: S| {
            let mut out = w.clone();
            for v in out.data_mut() {
                *v /= s;
            }
            out
        };
        let s = self.sigmas();
        [
            scale(&self.w1, s[0]),
            scale(&self.w2, s[1]),
            scale(&self.w3, s[2]),
        ]
    }

    pub fn stage(&self, tape: &mut Tape<S>, use_sn: bool) -> DiscriminatorNodes {
        self.stage_as(tape, true, use_sn)
    }

    pub fn stage_frozen(&self, tape: &mut Tape<S>, use_sn: bool) -> DiscriminatorNodes {
        self.stage_as(tape, false, use_sn)
    }

    fn stage_as(&self, tape: &mut Tape<S>, trainable: bool, use_sn: bool) -> DiscriminatorNodes {
        let mut entries = Vec::new();
        let mut weight =
            |tape: &mut Tape<S>, w: &Tensor<S>, sigma: S, name: &str| -> NodeId {
                let raw = tape.param(w, trainable);
                entries.push((name.to_string(), raw));
                if use_sn {
                    tape.scale(raw, S::one() / sigma)
                } else {
                    raw
                }
            };
        let s = self.sigmas();
        let w1 = weight(tape, &self.w1, s[0], "w1");
        let w2 = weight(tape, &self.w2, s[1], "w2");
        let w3 = weight(tape, &self.w3, s[2], "w3");
        let mut bias = |tape: &mut Tape<S>, b: &Tensor<S>, name: &str| -> NodeId {
            let id = tape.param(b, trainable);
            entries.push((name.to_string(), id));
            id
        };
        let b1 = bias(tape, &self.b1, "b1");
        let b2 = bias(tape, &self.b2, "b2");
        let b3 = bias(tape, &self.b3, "b3");
        DiscriminatorNodes {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            entries,
        }
    }
}

impl<S: Scalar> ParamSet<S> for DiscriminatorParams<S> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        f("w1", &self.w1);
        f("b1", &self.b1);
        f("w2", &self.w2);
        f("b2", &self.b2);
        f("w3", &self.w3);
        f("b3", &self.b3);
        for (i, st) in self.sn.iter().enumerate() {
            f(&format!("sn.{i}.left"), &st.left);
            f(&format!("sn.{i}.right"), &st.right);
            f(&format!("sn.{i}.sigma"), &st.sigma);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        f("w1", &mut self.w1);
        f("b1", &mut self.b1);
        f("w2", &mut self.w2);
        f("b2", &mut self.b2);
        f("w3", &mut self.w3);
        f("b3", &mut self.b3);
        for (i, st) in self.sn.iter_mut().enumerate() {
            f(&format!("sn.{i}.left"), &mut st.left);
            f(&format!("sn.{i}.right"), &mut st.right);
            f(&format!("sn.{i}.sigma"), &mut st.sigma);
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiscriminatorNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub w3: NodeId,
    pub b3: NodeId,
    /// `(local name, raw leaf)` pairs — gradients flow to the raw weights
    /// through the normalization scale.
    pub entries: Vec<(String, NodeId)>,
}

/// Domain logits `[rows, 2]`.
pub fn domain_logits<S: Scalar>(
    tape: &mut Tape<S>,
    nodes: &DiscriminatorNodes,
    rep: NodeId,
) -> Result<NodeId> {
    let slope = S::c(LEAKY_SLOPE);
    let a1 = tape.matmul(rep, nodes.w1)?;
    let a1 = tape.add_bias(a1, nodes.b1)?;
    let h1 = tape.leaky_relu(a1, slope);
    let a2 = tape.matmul(h1, nodes.w2)?;
    let a2 = tape.add_bias(a2, nodes.b2)?;
    let h2 = tape.leaky_relu(a2, slope);
    let a3 = tape.matmul(h2, nodes.w3)?;
    Ok(tape.add_bias(a3, nodes.b3)?)
}

/// Probability that a representation came from the source domain.
pub fn source_probability<S: Scalar>(
    tape: &mut Tape<S>,
    nodes: &DiscriminatorNodes,
    rep: NodeId,
) -> Result<NodeId> {
    let logits = domain_logits(tape, nodes, rep)?;
    let probs = tape.softmax(logits)?;
    Ok(tape.pick(probs, 0)?)
}

// ── Reconstructor ───────────────────────────────────────────────────────

/// Hidden widths of the reconstructor: wide, narrow bottleneck, wide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconDims {
    pub h1: usize,
    pub bottleneck: usize,
    pub h2: usize,
}

/// Four affine layers (`rep -> h1 -> bottleneck -> h2 -> rep`) with
/// leaky-ReLU hidden activations and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructorParams<S> {
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
    pub w3: Tensor<S>,
    pub b3: Tensor<S>,
    pub w4: Tensor<S>,
    pub b4: Tensor<S>,
}

impl<S: Scalar> ReconstructorParams<S> {
    pub fn init(rep_dim: usize, dims: ReconDims, seed: u64) -> Self {
        let mut rng = stream(seed, "reconstructor");
        Self {
            w1: linear_init(rep_dim, dims.h1, &mut rng),
            b1: Tensor::zeros(vec![1, dims.h1]),
            w2: linear_init(dims.h1, dims.bottleneck, &mut rng),
            b2: Tensor::zeros(vec![1, dims.bottleneck]),
            w3: linear_init(dims.bottleneck, dims.h2, &mut rng),
            b3: Tensor::zeros(vec![1, dims.h2]),
            w4: linear_init(dims.h2, rep_dim, &mut rng),
            b4: Tensor::zeros(vec![1, rep_dim]),
        }
    }

    pub fn stage(&self, tape: &mut Tape<S>) -> ReconstructorNodes {
        self.stage_as(tape, true)
    }

    pub fn stage_frozen(&self, tape: &mut Tape<S>) -> ReconstructorNodes {
        self.stage_as(tape, false)
    }

    fn stage_as(&self, tape: &mut Tape<S>, trainable: bool) -> ReconstructorNodes {
        let mut entries = Vec::new();
        let mut reg = |tape: &mut Tape<S>, t: &Tensor<S>, name: &str| -> NodeId {
            let id = tape.param(t, trainable);
            entries.push((name.to_string(), id));
            id
        };
        let w1 = reg(tape, &self.w1, "w1");
        let b1 = reg(tape, &self.b1, "b1");
        let w2 = reg(tape, &self.w2, "w2");
        let b2 = reg(tape, &self.b2, "b2");
        let w3 = reg(tape, &self.w3, "w3");
        let b3 = reg(tape, &self.b3, "b3");
        let w4 = reg(tape, &self.w4, "w4");
        let b4 = reg(tape, &self.b4, "b4");
        ReconstructorNodes {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            w4,
            b4,
            entries,
        }
    }
}

impl<S: Scalar> ParamSet<S> for ReconstructorParams<S> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        f("w1", &self.w1);
        f("b1", &self.b1);
        f("w2", &self.w2);
        f("b2", &self.b2);
        f("w3", &self.w3);
        f("b3", &self.b3);
        f("w4", &self.w4);
        f("b4", &self.b4);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        f("w1", &mut self.w1);
        f("b1", &mut self.b1);
        f("w2", &mut self.w2);
        f("b2", &mut self.b2);
        f("w3", &mut self.w3);
        f("b3", &mut self.b3);
        f("w4", &mut self.w4);
        f("b4", &mut self.b4);
    }
}

#[derive(Debug, Clone)]
pub struct ReconstructorNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub w3: NodeId,
    pub b3: NodeId,
    pub w4: NodeId,
    pub b4: NodeId,
    pub entries: Vec<(String, NodeId)>,
}

/// Maps a representation `[rows, R]` back to the representation space.
pub fn reconstruct<S: Scalar>(
    tape: &mut Tape<S>,
    nodes: &ReconstructorNodes,
    rep: NodeId,
) -> Result<NodeId> {
    let slope = S::c(LEAKY_SLOPE);
    let a1 = tape.matmul(rep, nodes.w1)?;
    let a1 = tape.add_bias(a1, nodes.b1)?;
    let h1 = tape.leaky_relu(a1, slope);
    let a2 = tape.matmul(h1, nodes.w2)?;
    let a2 = tape.add_bias(a2, nodes.b2)?;
    let h2 = tape.leaky_relu(a2, slope);
    let a3 = tape.matmul(h2, nodes.w3)?;
    let a3 = tape.add_bias(a3, nodes.b3)?;
    let h3 = tape.leaky_relu(a3, slope);
    let a4 = tape.matmul(h3, nodes.w4)?;
    Ok(tape.add_bias(a4, nodes.b4)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn zero_params<S: Scalar, P: ParamSet<S>>(p: &mut P) {
        p.visit_mut(&mut |name, t| {
            if !name.starts_with("sn.") {
                for v in t.data_mut() {
                    *v = S::zero();
                }
            }
        });
    }

    #[test]
    fn zero_classifier_predicts_uniformly() {
        let mut cls = ClassifierParams::<f64>::init(6, 4, 1);
        zero_params(&mut cls);
        let mut tape = Tape::new();
        let nodes = cls.stage_frozen(&mut tape);
        let rep = tape.constant(Tensor::row(&[0.3, -0.2, 0.5, 0.9, -0.4, 0.1]));
        let probs = classify(&mut tape, &nodes, rep).unwrap();
        for &p in tape.value(probs).data() {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn classifier_matches_closed_form_softmax() {
        // Identity-ish weights routing the rep straight to the logits.
        let mut cls = ClassifierParams::<f64>::init(4, 4, 2);
        zero_params(&mut cls);
        for i in 0..4 {
            *cls.w.at_mut(i, i) = 1.0;
        }
        let mut tape = Tape::new();
        let nodes = cls.stage_frozen(&mut tape);
        let rep = tape.constant(Tensor::row(&[2.0, 0.0, 0.0, 0.0]));
        let probs = classify(&mut tape, &nodes, rep).unwrap();
        let denom = 2.0f64.exp() + 3.0;
        let expected = [2.0f64.exp() / denom, 1.0 / denom, 1.0 / denom, 1.0 / denom];
        for (got, want) in tape.value(probs).data().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn smoothing_at_a_tenth_over_four_classes() {
        let q = smoothed_targets::<f64>(4, 2, 0.1).unwrap();
        assert!((q[2] - 0.925).abs() < 1e-15);
        for k in [0usize, 1, 3] {
            assert!((q[k] - 0.025).abs() < 1e-15);
        }
        let sum: f64 = q.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn smoothing_sums_to_one_and_preserves_argmax() {
        for &eps in &[0.0, 0.1, 0.3, 0.5, 0.74, 0.7499] {
            for classes in 2..=6 {
                for truth in 0..classes {
                    let q = smoothed_targets::<f64>(classes, truth, eps).unwrap();
                    let sum: f64 = q.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-12, "eps={eps} k={classes}");
                    let argmax = q
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .unwrap()
                        .0;
                    assert_eq!(argmax, truth, "eps={eps} k={classes}");
                }
            }
        }
    }

    #[test]
    fn smoothing_rejects_bad_arguments() {
        assert!(smoothed_targets::<f64>(1, 0, 0.1).is_err());
        assert!(smoothed_targets::<f64>(4, 4, 0.1).is_err());
        assert!(smoothed_targets::<f64>(4, 0, 1.0).is_err());
        assert!(smoothed_targets::<f64>(4, 0, -0.1).is_err());
    }

    #[test]
    fn zero_discriminator_is_maximally_unsure() {
        let mut d = DiscriminatorParams::<f64>::init(6, DiscDims { h1: 5, h2: 4 }, 3);
        zero_params(&mut d);
        let mut tape = Tape::new();
        let nodes = d.stage_frozen(&mut tape, false);
        let rep = tape.constant(Tensor::row(&[0.5, -0.1, 0.9, 0.0, -0.7, 0.2]));
        let p = source_probability(&mut tape, &nodes, rep).unwrap();
        assert!((tape.value(p).item() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn power_iteration_finds_the_top_singular_value_of_a_diagonal() {
        let mut d = DiscriminatorParams::<f64>::init(2, DiscDims { h1: 2, h2: 2 }, 4);
        d.w1 = Tensor::new(vec![2, 2], vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        d.spectral_update(50);
        assert!((d.sigmas()[0] - 3.0).abs() < 1e-9);
        let normed = &d.normalized_weights()[0];
        // The normalized matrix has top singular value 1.
        assert!((normed.at(0, 0) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn identity_weights_are_left_unchanged_by_normalization() {
        let mut d = DiscriminatorParams::<f64>::init(3, DiscDims { h1: 3, h2: 3 }, 5);
        let mut eye = Tensor::zeros(vec![3, 3]);
        for i in 0..3 {
            *eye.at_mut(i, i) = 1.0;
        }
        d.w2 = eye.clone();
        d.spectral_update(1);
        assert!((d.sigmas()[1] - 1.0).abs() < 1e-12);
        for (got, want) in d.normalized_weights()[1].data().iter().zip(eye.data()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn fifty_iterations_match_an_svd_oracle_on_a_random_matrix() {
        let mut d = DiscriminatorParams::<f64>::init(10, DiscDims { h1: 10, h2: 10 }, 6);
        d.spectral_update(50);
        for (w, sigma) in [(&d.w1, d.sigmas()[0]), (&d.w2, d.sigmas()[1])] {
            let m = DMatrix::from_row_slice(10, 10, w.data());
            let top = m.svd(false, false).singular_values[0];
            assert!(
                (sigma - top).abs() < 1e-6,
                "power iteration {sigma} vs svd {top}"
            );
        }
    }

    #[test]
    fn staged_normalization_divides_weights_by_sigma() {
        let mut d = DiscriminatorParams::<f64>::init(2, DiscDims { h1: 2, h2: 2 }, 7);
        d.w1 = Tensor::new(vec![2, 2], vec![4.0, 0.0, 0.0, 2.0]).unwrap();
        d.spectral_update(50);
        let mut tape = Tape::new();
        let nodes = d.stage_frozen(&mut tape, true);
        // The node the forward pass multiplies by is the scaled weight.
        let staged = tape.value(nodes.w1);
        assert!((staged.at(0, 0) - 1.0).abs() < 1e-9);
        assert!((staged.at(1, 1) - 0.5).abs() < 1e-9);
        // The raw leaf recorded for gradient extraction is unscaled.
        let raw_id = nodes.entries.iter().find(|(n, _)| n == "w1").unwrap().1;
        assert_eq!(tape.value(raw_id).at(0, 0), 4.0);
        let eff = d.normalized_weights();
        assert!((eff[0].at(0, 0) - 1.0).abs() < 1e-9);
        assert!((eff[0].at(1, 1) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn degenerate_zero_weights_survive_normalization() {
        let mut d = DiscriminatorParams::<f64>::init(3, DiscDims { h1: 3, h2: 3 }, 8);
        zero_params(&mut d);
        d.spectral_update(5);
        assert_eq!(d.sigmas()[0], SIGMA_FLOOR);
        let mut tape = Tape::new();
        let nodes = d.stage_frozen(&mut tape, true);
        let rep = tape.constant(Tensor::row(&[0.1, 0.2, 0.3]));
        let p = source_probability(&mut tape, &nodes, rep).unwrap();
        assert!(tape.value(p).all_finite());
        assert!((tape.value(p).item() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_reconstructor_maps_to_zero() {
        let mut mr = ReconstructorParams::<f64>::init(
            6,
            ReconDims {
                h1: 5,
                bottleneck: 2,
                h2: 5,
            },
            9,
        );
        zero_params(&mut mr);
        let mut tape = Tape::new();
        let nodes = mr.stage_frozen(&mut tape);
        let rep = tape.constant(Tensor::row(&[0.5, -0.1, 0.9, 0.0, -0.7, 0.2]));
        let out = reconstruct(&mut tape, &nodes, rep).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reconstructor_keeps_the_representation_width() {
        let mr = ReconstructorParams::<f64>::init(
            8,
            ReconDims {
                h1: 6,
                bottleneck: 3,
                h2: 6,
            },
            10,
        );
        let mut tape = Tape::new();
        let nodes = mr.stage_frozen(&mut tape);
        let rep = tape.constant(Tensor::rand_uniform(
            vec![1, 8],
            -1.0,
            1.0,
            &mut stream(1, "recon-width"),
        ));
        let out = reconstruct(&mut tape, &nodes, rep).unwrap();
        assert_eq!(tape.value(out).shape(), &[1, 8]);
    }

    /// The Jacobian of the reconstructor at any point factors through the
    /// narrow layer, so its rank cannot exceed the bottleneck width.
    #[test]
    fn jacobian_rank_is_bounded_by_the_bottleneck() {
        let rep_dim = 10;
        let bottleneck = 3;
        let mr = ReconstructorParams::<f64>::init(
            rep_dim,
            ReconDims {
                h1: 8,
                bottleneck,
                h2: 8,
            },
            11,
        );
        let mut tape = Tape::new();
        let nodes = mr.stage_frozen(&mut tape);
        let x = Tensor::rand_uniform(vec![1, rep_dim], -1.0, 1.0, &mut stream(2, "jacobian"))
            .with_grad(true);
        let rep = tape.leaf(&x);
        let out = reconstruct(&mut tape, &nodes, rep).unwrap();
        let mut jac = Vec::with_capacity(rep_dim * rep_dim);
        for i in 0..rep_dim {
            let yi = tape.pick(out, i).unwrap();
            let grads = tape.backward(yi).unwrap();
            jac.extend(grads.dense(rep, rep_dim));
        }
        let m = DMatrix::from_row_slice(rep_dim, rep_dim, &jac);
        let svals = m.svd(false, false).singular_values;
        let rank = svals.iter().filter(|&&s| s > 1e-9).count();
        assert!(rank <= bottleneck, "rank {rank} > bottleneck {bottleneck}");
    }
}
