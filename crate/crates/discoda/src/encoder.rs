//! Sequence-pair encoder: a shared bidirectional LSTM with inner attention.
//!
//! Each argument is embedded, scanned by forward and backward LSTM passes at
//! its true length, and pooled by inner attention: position `i` contributes a
//! projected vector `z_i = h_i W_c + b_c` weighted by
//! `alpha_i = softmax_i(tanh(h_i W_w + b_w) u_w)`. The pair representation is
//! the concatenation of the two argument vectors; both arguments share one
//! set of encoder parameters.

use crate::data::{EmbeddingTable, Instance, PAD_ROW};
use crate::error::{Error, Result};
use discoda_ad::rng::stream;
use discoda_ad::tape::{NodeId, Tape};
use discoda_ad::{ParamSet, Scalar, Tensor};
use serde::{Deserialize, Serialize};

/// Width configuration for the encoder. `proj` is the width of the projected
/// position vectors `z_i`, `attention` the width of the attention space; the
/// hidden state passed to both is `2 * hidden` wide (two directions).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub hidden: usize,
    pub proj: usize,
    pub attention: usize,
    pub max_len: usize,
}

impl EncoderDims {
    /// Conventional widths: `z_i` and the attention space both as wide as
    /// the bidirectional hidden state.
    pub fn with_hidden(hidden: usize, max_len: usize) -> Self {
        Self {
            hidden,
            proj: 2 * hidden,
            attention: 2 * hidden,
            max_len,
        }
    }
}

const GATES: [&str; 4] = ["i", "f", "g", "o"];

/// One LSTM direction: per-gate input, hidden, and bias tensors
/// (gate order: input, forget, cell, output).
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell<S> {
    pub w_x: [Tensor<S>; 4],
    pub w_h: [Tensor<S>; 4],
    pub b: [Tensor<S>; 4],
}

impl<S: Scalar> LstmCell<S> {
    fn init(embed_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = stream(seed, "lstm");
        let bound = 1.0 / (hidden as f64).sqrt();
        let w = |rng: &mut _| Tensor::rand_uniform(vec![embed_dim, hidden], -bound, bound, rng);
        let u = |rng: &mut _| Tensor::rand_uniform(vec![hidden, hidden], -bound, bound, rng);
        let w_x = [w(&mut rng), w(&mut rng), w(&mut rng), w(&mut rng)];
        let w_h = [u(&mut rng), u(&mut rng), u(&mut rng), u(&mut rng)];
        // Biases start at zero except the forget gate, which opens at +1.
        let b = [
            Tensor::zeros(vec![1, hidden]),
            Tensor::full(vec![1, hidden], S::one()),
            Tensor::zeros(vec![1, hidden]),
            Tensor::zeros(vec![1, hidden]),
        ];
        Self { w_x, w_h, b }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        for (g, name) in GATES.iter().enumerate() {
            f(&format!("{prefix}.{name}.w_x"), &self.w_x[g]);
            f(&format!("{prefix}.{name}.w_h"), &self.w_h[g]);
            f(&format!("{prefix}.{name}.b"), &self.b[g]);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        for (g, name) in GATES.iter().enumerate() {
            f(&format!("{prefix}.{name}.w_x"), &mut self.w_x[g]);
            f(&format!("{prefix}.{name}.w_h"), &mut self.w_h[g]);
            f(&format!("{prefix}.{name}.b"), &mut self.b[g]);
        }
    }
}

/// Encoder parameters, including the (normally frozen) embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<S> {
    pub embed: EmbeddingTable<S>,
    pub fwd: LstmCell<S>,
    pub bwd: LstmCell<S>,
    pub w_c: Tensor<S>,
    pub b_c: Tensor<S>,
    pub w_w: Tensor<S>,
    pub b_w: Tensor<S>,
    pub u_w: Tensor<S>,
    pub dims: EncoderDims,
    /// When true, staged embedding tables receive gradients (off by
    /// default; the padding row still never moves because nothing gathers
    /// it).
    pub train_embeddings: bool,
}

impl<S: Scalar> EncoderParams<S> {
    pub fn init(embed: EmbeddingTable<S>, dims: EncoderDims, seed: u64) -> Self {
        let e = embed.dim();
        let h2 = 2 * dims.hidden;
        let mut rng = stream(seed, "attention");
        let bound_h = 1.0 / (h2 as f64).sqrt();
        let bound_a = 1.0 / (dims.attention as f64).sqrt();
        Self {
            embed,
            fwd: LstmCell::init(e, dims.hidden, discoda_ad::rng::derive_seed(seed, "fwd")),
            bwd: LstmCell::init(e, dims.hidden, discoda_ad::rng::derive_seed(seed, "bwd")),
            w_c: Tensor::rand_uniform(vec![h2, dims.proj], -bound_h, bound_h, &mut rng),
            b_c: Tensor::zeros(vec![1, dims.proj]),
            w_w: Tensor::rand_uniform(vec![h2, dims.attention], -bound_h, bound_h, &mut rng),
            b_w: Tensor::zeros(vec![1, dims.attention]),
            u_w: Tensor::rand_uniform(vec![dims.attention, 1], -bound_a, bound_a, &mut rng),
            dims,
            train_embeddings: false,
        }
    }

    /// Width of a pair representation (two concatenated argument vectors).
    pub fn rep_dim(&self) -> usize {
        2 * self.dims.proj
    }

    /// Registers all parameters on a tape. `trainable` controls gradient
    /// tracking (embeddings additionally require `train_embeddings`).
    pub fn stage(&self, tape: &mut Tape<S>) -> EncoderNodes {
        self.stage_as(tape, true)
    }

    pub fn stage_frozen(&self, tape: &mut Tape<S>) -> EncoderNodes {
        self.stage_as(tape, false)
    }

    fn stage_as(&self, tape: &mut Tape<S>, trainable: bool) -> EncoderNodes {
        let mut entries = Vec::new();
        let mut stage_cell = |tape: &mut Tape<S>, cell: &LstmCell<S>, prefix: &str| {
            let mut ids = CellNodes {
                w_x: [0; 4],
                w_h: [0; 4],
                b: [0; 4],
            };
            for (g, name) in GATES.iter().enumerate() {
                ids.w_x[g] = tape.param(&cell.w_x[g], trainable);
                ids.w_h[g] = tape.param(&cell.w_h[g], trainable);
                ids.b[g] = tape.param(&cell.b[g], trainable);
                entries.push((format!("{prefix}.{name}.w_x"), ids.w_x[g]));
                entries.push((format!("{prefix}.{name}.w_h"), ids.w_h[g]));
                entries.push((format!("{prefix}.{name}.b"), ids.b[g]));
            }
            ids
        };
        let fwd = stage_cell(tape, &self.fwd, "fwd");
        let bwd = stage_cell(tape, &self.bwd, "bwd");
        let embed = tape.param(self.embed.matrix(), trainable && self.train_embeddings);
        entries.push(("embed".to_string(), embed));
        let mut att = |t: &mut Tape<S>, tensor: &Tensor<S>, name: &str| {
            let id = t.param(tensor, trainable);
            entries.push((name.to_string(), id));
            id
        };
        let w_c = att(tape, &self.w_c, "att.w_c");
        let b_c = att(tape, &self.b_c, "att.b_c");
        let w_w = att(tape, &self.w_w, "att.w_w");
        let b_w = att(tape, &self.b_w, "att.b_w");
        let u_w = att(tape, &self.u_w, "att.u_w");
        EncoderNodes {
            embed,
            fwd,
            bwd,
            w_c,
            b_c,
            w_w,
            b_w,
            u_w,
            entries,
        }
    }
}

impl<S: Scalar> ParamSet<S> for EncoderParams<S> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        self.fwd.visit("fwd", f);
        self.bwd.visit("bwd", f);
        f("embed", self.embed.matrix());
        f("att.w_c", &self.w_c);
        f("att.b_c", &self.b_c);
        f("att.w_w", &self.w_w);
        f("att.b_w", &self.b_w);
        f("att.u_w", &self.u_w);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        self.fwd.visit_mut("fwd", f);
        self.bwd.visit_mut("bwd", f);
        f("embed", self.embed.matrix_mut());
        f("att.w_c", &mut self.w_c);
        f("att.b_c", &mut self.b_c);
        f("att.w_w", &mut self.w_w);
        f("att.b_w", &mut self.b_w);
        f("att.u_w", &mut self.u_w);
    }
}

/// Tape ids of one staged LSTM direction.
#[derive(Debug, Clone, Copy)]
pub struct CellNodes {
    pub w_x: [NodeId; 4],
    pub w_h: [NodeId; 4],
    pub b: [NodeId; 4],
}

/// Tape ids of a staged encoder.
#[derive(Debug, Clone)]
pub struct EncoderNodes {
    pub embed: NodeId,
    pub fwd: CellNodes,
    pub bwd: CellNodes,
    pub w_c: NodeId,
    pub b_c: NodeId,
    pub w_w: NodeId,
    pub b_w: NodeId,
    pub u_w: NodeId,
    /// `(local name, node)` pairs for gradient extraction.
    pub entries: Vec<(String, NodeId)>,
}

fn lstm_step<S: Scalar>(
    tape: &mut Tape<S>,
    cell: &CellNodes,
    x: NodeId,
    h: NodeId,
    c: NodeId,
) -> Result<(NodeId, NodeId)> {
    let mut pre = [0; 4];
    for g in 0..4 {
        let xs = tape.matmul(x, cell.w_x[g])?;
        let hs = tape.matmul(h, cell.w_h[g])?;
        let s = tape.add(xs, hs)?;
        pre[g] = tape.add(s, cell.b[g])?;
    }
    let i = tape.sigmoid(pre[0]);
    let f = tape.sigmoid(pre[1]);
    let g = tape.tanh(pre[2]);
    let o = tape.sigmoid(pre[3]);
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let tc = tape.tanh(c_next);
    let h_next = tape.mul(o, tc)?;
    Ok((h_next, c_next))
}

/// Runs one LSTM direction over embedded rows; returns hidden states indexed
/// by sequence position regardless of scan direction.
fn run_direction<S: Scalar>(
    tape: &mut Tape<S>,
    cell: &CellNodes,
    xs: &[NodeId],
    hidden: usize,
    reverse: bool,
) -> Result<Vec<NodeId>> {
    let mut h = tape.constant(Tensor::zeros(vec![1, hidden]));
    let mut c = tape.constant(Tensor::zeros(vec![1, hidden]));
    let mut states = Vec::with_capacity(xs.len());
    let order: Vec<usize> = if reverse {
        (0..xs.len()).rev().collect()
    } else {
        (0..xs.len()).collect()
    };
    for &t in &order {
        let (h2, c2) = lstm_step(tape, cell, xs[t], h, c)?;
        h = h2;
        c = c2;
        states.push(h);
    }
    if reverse {
        states.reverse();
    }
    Ok(states)
}

/// Inner attention over hidden-state rows `h` (`[n, 2H]`). The mask selects
/// which positions may receive weight; masked positions get exactly zero.
/// Returns the pooled argument vector `[1, proj]` and the weights `[n, 1]`.
pub fn inner_attention<S: Scalar>(
    tape: &mut Tape<S>,
    nodes: &EncoderNodes,
    h: NodeId,
    mask: &[bool],
) -> Result<(NodeId, NodeId)> {
    let n = tape.value(h).rows();
    if mask.len() != n {
        return Err(Error::Train(format!(
            "attention mask length {} != {} positions",
            mask.len(),
            n
        )));
    }
    if !mask.iter().any(|&b| b) {
        return Err(Error::Train("attention mask excludes every position".into()));
    }
    let zc = tape.matmul(h, nodes.w_c)?;
    let z = tape.add_bias(zc, nodes.b_c)?;
    let uw = tape.matmul(h, nodes.w_w)?;
    let ub = tape.add_bias(uw, nodes.b_w)?;
    let u = tape.tanh(ub);
    let scores = tape.matmul(u, nodes.u_w)?;
    let alpha = tape.softmax_masked(scores, Some(mask))?;
    let alpha_row = tape.transpose(alpha)?;
    let pooled = tape.matmul(alpha_row, z)?;
    Ok((pooled, alpha))
}

/// Encodes one token-id sequence into an argument vector `[1, proj]`.
pub fn encode_arg<S: Scalar>(
    tape: &mut Tape<S>,
    params: &EncoderParams<S>,
    nodes: &EncoderNodes,
    token_ids: &[usize],
) -> Result<NodeId> {
    if token_ids.is_empty() {
        return Err(Error::Train("cannot encode an empty token sequence".into()));
    }
    let ids: Vec<usize> = token_ids
        .iter()
        .copied()
        .take(params.dims.max_len)
        .collect();
    debug_assert!(
        ids.iter().all(|&i| i != PAD_ROW),
        "padding row gathered in a real sequence"
    );
    let emb = tape.gather(nodes.embed, &ids)?;
    let xs: Vec<NodeId> = (0..ids.len())
        .map(|t| tape.slice_rows(emb, t, t + 1))
        .collect::<std::result::Result<_, _>>()?;
    let fwd = run_direction(tape, &nodes.fwd, &xs, params.dims.hidden, false)?;
    let bwd = run_direction(tape, &nodes.bwd, &xs, params.dims.hidden, true)?;
    let rows: Vec<NodeId> = fwd
        .iter()
        .zip(&bwd)
        .map(|(&f, &b)| tape.concat(&[f, b], 1))
        .collect::<std::result::Result<_, _>>()?;
    let h = if rows.len() == 1 {
        rows[0]
    } else {
        tape.concat(&rows, 0)?
    };
    let mask = vec![true; ids.len()];
    let (pooled, _) = inner_attention(tape, nodes, h, &mask)?;
    Ok(pooled)
}

/// Encodes a pair of token-id sequences into `[1, 2 * proj]`.
pub fn encode_pair<S: Scalar>(
    tape: &mut Tape<S>,
    params: &EncoderParams<S>,
    nodes: &EncoderNodes,
    arg1: &[usize],
    arg2: &[usize],
) -> Result<NodeId> {
    let a1 = encode_arg(tape, params, nodes, arg1)?;
    let a2 = encode_arg(tape, params, nodes, arg2)?;
    Ok(tape.concat(&[a1, a2], 1)?)
}

/// Encodes a batch of instances into one pair-representation node each.
pub fn encode_batch<S: Scalar>(
    tape: &mut Tape<S>,
    params: &EncoderParams<S>,
    nodes: &EncoderNodes,
    batch: &[&Instance],
) -> Result<Vec<NodeId>> {
    batch
        .iter()
        .map(|inst| encode_instance(tape, params, nodes, inst))
        .collect()
}

/// Encodes a corpus instance using the encoder's own embedding table.
pub fn encode_instance<S: Scalar>(
    tape: &mut Tape<S>,
    params: &EncoderParams<S>,
    nodes: &EncoderNodes,
    inst: &Instance,
) -> Result<NodeId> {
    if inst.arg1.is_empty() || inst.arg2.is_empty() {
        return Err(Error::Data(format!(
            "instance '{}' has an empty argument",
            inst.id
        )));
    }
    let ids1 = params.embed.ids(&inst.arg1);
    let ids2 = params.embed.ids(&inst.arg2);
    encode_pair(tape, params, nodes, &ids1, &ids2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Domain, EmbeddingTable};
    use discoda_ad::check::central_diff_check;

    fn toy_vocab(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("tok{i}")).collect()
    }

    fn toy_params(hidden: usize, dim: usize, seed: u64) -> EncoderParams<f64> {
        let table = EmbeddingTable::random(&toy_vocab(8), dim, seed);
        EncoderParams::init(table, EncoderDims::with_hidden(hidden, 80), seed)
    }

    fn zeroed(params: &mut EncoderParams<f64>) {
        params.visit_mut(&mut |name, t| {
            if name != "embed" {
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
        });
    }

    #[test]
    fn reference_widths_produce_a_200_wide_pair_vector() {
        let params = toy_params(50, 300, 1);
        assert_eq!(params.rep_dim(), 200);
        let mut tape = Tape::new();
        let nodes = params.stage_frozen(&mut tape);
        let rep = encode_pair(&mut tape, &params, &nodes, &[2, 3, 4], &[5, 6]).unwrap();
        assert_eq!(tape.value(rep).shape(), &[1, 200]);
    }

    #[test]
    fn zero_weights_give_zero_hidden_states_and_zero_pair_vector() {
        let mut params = toy_params(3, 4, 2);
        zeroed(&mut params);
        let mut tape = Tape::new();
        let nodes = params.stage_frozen(&mut tape);
        let rep = encode_pair(&mut tape, &params, &nodes, &[2, 3], &[4]).unwrap();
        assert!(tape.value(rep).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_token_sequences_encode() {
        let params = toy_params(3, 4, 3);
        let mut tape = Tape::new();
        let nodes = params.stage_frozen(&mut tape);
        let rep = encode_pair(&mut tape, &params, &nodes, &[2], &[3]).unwrap();
        assert_eq!(tape.value(rep).shape(), &[1, 2 * params.dims.proj]);
        assert!(tape.value(rep).all_finite());
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let params = toy_params(3, 4, 3);
        let mut tape = Tape::new();
        let nodes = params.stage_frozen(&mut tape);
        assert!(encode_pair(&mut tape, &params, &nodes, &[], &[2]).is_err());
    }

    /// Scalar-case oracle: hand-unrolled two-step LSTM recurrence with
    /// hidden size 1 and embedding size 1, computed with plain arithmetic.
    #[test]
    fn two_token_forward_matches_hand_unrolled_recurrence() {
        let mut params = toy_params(1, 1, 4);
        // Overwrite with known scalars.
        let consts = [
            ("fwd.i.w_x", 0.3),
            ("fwd.i.w_h", -0.2),
            ("fwd.i.b", 0.1),
            ("fwd.f.w_x", 0.5),
            ("fwd.f.w_h", 0.4),
            ("fwd.f.b", 1.0),
            ("fwd.g.w_x", -0.6),
            ("fwd.g.w_h", 0.2),
            ("fwd.g.b", 0.0),
            ("fwd.o.w_x", 0.7),
            ("fwd.o.w_h", -0.1),
            ("fwd.o.b", -0.2),
        ];
        params.visit_mut(&mut |name, t| {
            if let Some((_, v)) = consts.iter().find(|(n, _)| *n == name) {
                t.data_mut()[0] = *v;
            }
        });
        let emb_rows: Vec<f64> = {
            let m = params.embed.matrix();
            vec![m.at(2, 0), m.at(3, 0)]
        };
        // Route tokens 2 and 3 through the forward direction by hand.
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h = 0.0;
        let mut c = 0.0;
        let mut states = Vec::new();
        for &xe in &emb_rows {
            let i = sig(0.3 * xe + -0.2 * h + 0.1);
            let f = sig(0.5 * xe + 0.4 * h + 1.0);
            let g = (-0.6 * xe + 0.2 * h).tanh();
            let o = sig(0.7 * xe + -0.1 * h + -0.2);
            c = f * c + i * g;
            h = o * c.tanh();
            states.push(h);
        }

        let mut tape = Tape::new();
        let nodes = params.stage_frozen(&mut tape);
        let emb = tape.gather(nodes.embed, &[2, 3]).unwrap();
        let xs: Vec<_> = (0..2)
            .map(|t| tape.slice_rows(emb, t, t + 1).unwrap())
            .collect();
        let got = run_direction(&mut tape, &nodes.fwd, &xs, 1, false).unwrap();
        for (s, &id) in states.iter().zip(&got) {
            assert!((tape.value(id).data()[0] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_on_single_position_returns_that_projection() {
        let params = toy_params(2, 3, 5);
        let mut tape = Tape::new();
        let nodes = params.stage_frozen(&mut tape);
        let h = tape.constant(Tensor::row(&[0.3, -0.7, 0.2, 0.9]));
        let (pooled, alpha) = inner_attention(&mut tape, &nodes, h, &[true]).unwrap();
        assert_eq!(tape.value(alpha).data(), &[1.0]);
        // pooled == z_1 == h W_c + b_c
        let zc = tape.matmul(h, nodes.w_c).unwrap();
        let z = tape.add_bias(zc, nodes.b_c).unwrap();
        assert_eq!(tape.value(pooled).data(), tape.value(z).data());
    }

    #[test]
    fn identical_positions_share_attention_uniformly() {
        let params = toy_params(2, 3, 6);
        let mut tape = Tape::new();
        let nodes = params.stage_frozen(&mut tape);
        let row = [0.4, -0.1, 0.8, 0.05];
        let mut data = Vec::new();
        for _ in 0..3 {
            data.extend_from_slice(&row);
        }
        let h = tape.constant(Tensor::new(vec![3, 4], data).unwrap());
        let (_, alpha) = inner_attention(&mut tape, &nodes, h, &[true; 3]).unwrap();
        for &a in tape.value(alpha).data() {
            assert!((a - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_direct_formula_oracle() {
        let params = toy_params(2, 3, 7);
        let mut tape = Tape::new();
        let nodes = params.stage_frozen(&mut tape);
        let h_data = [0.3, -0.2, 0.5, 0.1, -0.7, 0.4, 0.0, 0.9, 0.2, -0.5, 0.6, -0.1];
        let h = tape.constant(Tensor::new(vec![3, 4], h_data.to_vec()).unwrap());
        let (pooled, alpha) = inner_attention(&mut tape, &nodes, h, &[true; 3]).unwrap();

        // Direct-formula oracle with explicit loops.
        let wc = &params.w_c;
        let ww = &params.w_w;
        let uw = &params.u_w;
        let a_dim = params.dims.attention;
        let mut scores = [0.0f64; 3];
        for i in 0..3 {
            let hrow = &h_data[i * 4..(i + 1) * 4];
            let mut s = 0.0;
            for a in 0..a_dim {
                let mut pre = params.b_w.data()[a];
                for (j, &hv) in hrow.iter().enumerate() {
                    pre += hv * ww.at(j, a);
                }
                s += pre.tanh() * uw.data()[a];
            }
            scores[i] = s;
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        let weights: Vec<f64> = exps.iter().map(|e| e / denom).collect();
        let mut expected = vec![0.0f64; params.dims.proj];
        for i in 0..3 {
            let hrow = &h_data[i * 4..(i + 1) * 4];
            for (p, exp_v) in expected.iter_mut().enumerate() {
                let mut z = params.b_c.data()[p];
                for (j, &hv) in hrow.iter().enumerate() {
                    z += hv * wc.at(j, p);
                }
                *exp_v += weights[i] * z;
            }
        }

        for (got, want) in tape.value(alpha).data().iter().zip(&weights) {
            assert!((got - want).abs() < 1e-12);
        }
        for (got, want) in tape.value(pooled).data().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12);
        }
        let sum: f64 = tape.value(alpha).data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-10);
    }

    #[test]
    fn masked_positions_receive_exactly_zero_weight() {
        let params = toy_params(2, 3, 8);
        let mut tape = Tape::new();
        let nodes = params.stage_frozen(&mut tape);
        let h = tape.constant(Tensor::rand_uniform(
            vec![4, 4],
            -1.0,
            1.0,
            &mut stream(1, "mask-test"),
        ));
        let mask = [true, false, true, false];
        let (_, alpha) = inner_attention(&mut tape, &nodes, h, &mask).unwrap();
        let w = tape.value(alpha).data();
        assert_eq!(w[1], 0.0);
        assert_eq!(w[3], 0.0);
        assert!((w[0] + w[2] - 1.0).abs() < 1e-12);
        assert!(inner_attention(&mut tape, &nodes, h, &[false; 4]).is_err());
    }

    #[test]
    fn swapping_arguments_swaps_the_pair_halves() {
        let params = toy_params(2, 3, 9);
        let mut tape = Tape::new();
        let nodes = params.stage_frozen(&mut tape);
        let ab = encode_pair(&mut tape, &params, &nodes, &[2, 3], &[4, 5, 6]).unwrap();
        let ba = encode_pair(&mut tape, &params, &nodes, &[4, 5, 6], &[2, 3]).unwrap();
        let p = params.dims.proj;
        let ab_v = tape.value(ab).data().to_vec();
        let ba_v = tape.value(ba).data().to_vec();
        assert_eq!(ab_v[..p], ba_v[p..]);
        assert_eq!(ab_v[p..], ba_v[..p]);
    }

    #[test]
    fn shared_encoder_gives_identical_vectors_for_identical_arguments() {
        let params = toy_params(2, 3, 10);
        let mut tape = Tape::new();
        let nodes = params.stage_frozen(&mut tape);
        let r1 = encode_pair(&mut tape, &params, &nodes, &[2, 3, 4], &[2, 3, 4]).unwrap();
        let v = tape.value(r1).data();
        let p = params.dims.proj;
        assert_eq!(v[..p], v[p..]);
    }

    #[test]
    fn over_long_sequences_encode_like_their_prefix() {
        let table = EmbeddingTable::<f64>::random(&toy_vocab(8), 3, 11);
        let mut dims = EncoderDims::with_hidden(2, 80);
        dims.max_len = 4;
        let params = EncoderParams::init(table, dims, 11);
        let mut tape = Tape::new();
        let nodes = params.stage_frozen(&mut tape);
        let long: Vec<usize> = vec![2, 3, 4, 5, 6, 7];
        let a = encode_arg(&mut tape, &params, &nodes, &long).unwrap();
        let b = encode_arg(&mut tape, &params, &nodes, &long[..4]).unwrap();
        assert_eq!(tape.value(a).data(), tape.value(b).data());
    }

    #[test]
    fn encode_instance_maps_tokens_through_the_table() {
        let params = toy_params(2, 3, 12);
        let inst = Instance {
            id: "x".into(),
            arg1: vec!["tok2".into(), "never-seen".into()],
            arg2: vec!["tok5".into()],
            label: None,
            domain: Domain::Target,
        };
        let mut tape = Tape::new();
        let nodes = params.stage_frozen(&mut tape);
        let via_instance = encode_instance(&mut tape, &params, &nodes, &inst).unwrap();
        let ids1 = params.embed.ids(&inst.arg1);
        assert_eq!(ids1[1], crate::data::OOV_ROW);
        let direct = encode_pair(
            &mut tape,
            &params,
            &nodes,
            &ids1,
            &params.embed.ids(&inst.arg2),
        )
        .unwrap();
        assert_eq!(tape.value(via_instance).data(), tape.value(direct).data());
    }

    /// Full-path finite-difference check: gradients through embedding
    /// gather, both LSTM directions, attention, and concatenation.
    #[test]
    fn full_encoder_gradient_matches_finite_differences() {
        let mut params = toy_params(2, 3, 13);
        params.train_embeddings = true;
        let mut leaves: Vec<Tensor<f64>> = Vec::new();
        params.visit(&mut |_, t| leaves.push(t.clone()));
        let names = params.names();
        let template = params.clone();
        let report = central_diff_check(
            "encoder_path",
            &leaves,
            &move |tape, ids| {
                // Rebuild the node layout over the checker's leaves so the
                // perturbed values flow through the real encoding path.
                let mut p = template.clone();
                let mut i = 0;
                p.visit_mut(&mut |_, t| {
                    *t = tape.value(ids[i]).clone();
                    i += 1;
                });
                let by_name: std::collections::HashMap<&str, NodeId> = names
                    .iter()
                    .map(|n| n.as_str())
                    .zip(ids.iter().copied())
                    .collect();
                let cell = |prefix: &str| CellNodes {
                    w_x: core::array::from_fn(|g| {
                        by_name[format!("{prefix}.{}.w_x", GATES[g]).as_str()]
                    }),
                    w_h: core::array::from_fn(|g| {
                        by_name[format!("{prefix}.{}.w_h", GATES[g]).as_str()]
                    }),
                    b: core::array::from_fn(|g| {
                        by_name[format!("{prefix}.{}.b", GATES[g]).as_str()]
                    }),
                };
                let nodes = EncoderNodes {
                    embed: by_name["embed"],
                    fwd: cell("fwd"),
                    bwd: cell("bwd"),
                    w_c: by_name["att.w_c"],
                    b_c: by_name["att.b_c"],
                    w_w: by_name["att.w_w"],
                    b_w: by_name["att.b_w"],
                    u_w: by_name["att.u_w"],
                    entries: Vec::new(),
                };
                let rep = encode_pair(tape, &p, &nodes, &[2, 3, 4], &[5, 3])
                    .expect("valid toy inputs");
                let sq = tape.mul(rep, rep)?;
                tape.mean(sq)
            },
            1e-5,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "rel err {:.3e}",
            report.max_rel_err
        );
    }
}
