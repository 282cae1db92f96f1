//! Gradient checking against central finite differences.
//!
//! The checker is deliberately independent of the backward pass: it re-runs
//! the forward computation at perturbed inputs and compares the two-sided
//! difference quotient `(f(x+h) - f(x-h)) / 2h` against the tape's analytic
//! gradient. [`primitive_suite`] covers every differentiable primitive on
//! randomized inputs (kinked ops are sampled away from their kinks), and
//! [`random_plan`] builds randomized compositions of the smooth primitives
//! for property testing.

use crate::error::AdResult;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use rand::Rng;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub label: String,
    pub params: usize,
    pub max_rel_err: f64,
}

impl CheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Renders reports as an aligned table with a pass/fail column.
pub fn format_table(reports: &[CheckReport], tol: f64) -> String {
    let width = reports
        .iter()
        .map(|r| r.label.len())
        .max()
        .unwrap_or(4)
        .max(9);
    let mut out = format!(
        "{:<width$}  {:>7}  {:>12}  status\n",
        "check", "params", "max rel err",
    );
    for r in reports {
        out.push_str(&format!(
            "{:<width$}  {:>7}  {:>12.3e}  {}\n",
            r.label,
            r.params,
            r.max_rel_err,
            if r.passes(tol) { "ok" } else { "FAIL" },
        ));
    }
    out
}

/// Checks the analytic gradient of `build` (a closure that records a scalar
/// loss over the given leaves) against central finite differences with step
/// `h`, one coordinate at a time.
///
/// Relative error uses `|analytic - fd| / max(|analytic|, |fd|, 1e-6)`.
pub fn central_diff_check<S: Scalar>(
    label: &str,
    leaves: &[Tensor<S>],
    build: &dyn Fn(&mut Tape<S>, &[NodeId]) -> AdResult<NodeId>,
    h: f64,
) -> AdResult<CheckReport> {
    let eval = |ts: &[Tensor<S>]| -> AdResult<S> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = ts.iter().map(|t| tape.leaf(t)).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.value(loss).item())
    };

    // Analytic gradients from one recorded pass.
    let mut tape = Tape::new();
    let tracked: Vec<Tensor<S>> = leaves.iter().map(|t| t.clone().with_grad(true)).collect();
    let ids: Vec<NodeId> = tracked.iter().map(|t| tape.leaf(t)).collect();
    let loss = build(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<S>> = ids
        .iter()
        .zip(leaves)
        .map(|(&id, t)| grads.dense(id, t.numel()))
        .collect();

    let mut work: Vec<Tensor<S>> = leaves.to_vec();
    let mut max_rel = 0.0f64;
    let mut params = 0usize;
    let hs = S::c(h);
    for li in 0..leaves.len() {
        for j in 0..leaves[li].numel() {
            params += 1;
            let orig = work[li].data()[j];
            work[li].data_mut()[j] = orig + hs;
            let up = eval(&work)?.to_f64c();
            work[li].data_mut()[j] = orig - hs;
            let down = eval(&work)?.to_f64c();
            work[li].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = analytic[li][j].to_f64c();
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(CheckReport {
        label: label.to_string(),
        params,
        max_rel_err: max_rel,
    })
}

fn uniform<S: Scalar, R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor<S> {
    Tensor::rand_uniform(shape.to_vec(), lo, hi, rng)
}

/// Uniform samples with `|x| >= margin`, for ops with a kink at zero.
fn away_from_zero<S: Scalar, R: Rng>(shape: &[usize], margin: f64, rng: &mut R) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.gen_range(margin..1.0);
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            S::c(sign * mag)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data agree")
}

/// Finite-difference checks for every differentiable primitive, each wrapped
/// in a small scalarizing composition. `grad_scale` is excluded: its backward
/// rule is intentionally not the derivative of its (identity) forward, so it
/// is verified by exact unit tests instead.
pub fn primitive_suite<S: Scalar>(seed: u64, h: f64) -> AdResult<Vec<CheckReport>> {
    let mut rng = crate::rng::stream(seed, "gradcheck.primitives");
    let mut reports = Vec::new();

    let a23: Tensor<S> = uniform(&[2, 3], -1.0, 1.0, &mut rng);
    let b32: Tensor<S> = uniform(&[3, 2], -1.0, 1.0, &mut rng);
    reports.push(central_diff_check(
        "matmul",
        &[a23.clone(), b32],
        &|t, ids| {
            let p = t.matmul(ids[0], ids[1])?;
            let y = t.tanh(p);
            t.mean(y)
        },
        h,
    )?);

    let x34: Tensor<S> = uniform(&[3, 4], -1.0, 1.0, &mut rng);
    let y34: Tensor<S> = uniform(&[3, 4], -1.0, 1.0, &mut rng);
    reports.push(central_diff_check(
        "add",
        &[x34.clone(), y34.clone()],
        &|t, ids| {
            let s = t.add(ids[0], ids[1])?;
            let y = t.tanh(s);
            t.mean(y)
        },
        h,
    )?);

    let bias: Tensor<S> = uniform(&[1, 4], -1.0, 1.0, &mut rng);
    reports.push(central_diff_check(
        "add_bias",
        &[x34.clone(), bias],
        &|t, ids| {
            let s = t.add_bias(ids[0], ids[1])?;
            let y = t.tanh(s);
            t.mean(y)
        },
        h,
    )?);

    reports.push(central_diff_check(
        "multiply",
        &[x34.clone(), y34.clone()],
        &|t, ids| {
            let p = t.mul(ids[0], ids[1])?;
            let y = t.tanh(p);
            t.mean(y)
        },
        h,
    )?);

    reports.push(central_diff_check(
        "concat",
        &[x34.clone(), y34.clone()],
        &|t, ids| {
            let c0 = t.concat(&[ids[0], ids[1]], 0)?;
            let c1 = t.concat(&[ids[0], ids[1]], 1)?;
            let y0 = t.tanh(c0);
            let y1 = t.tanh(c1);
            let m0 = t.mean(y0)?;
            let m1 = t.mean(y1)?;
            t.add(m0, m1)
        },
        h,
    )?);

    reports.push(central_diff_check(
        "transpose",
        &[a23.clone()],
        &|t, ids| {
            let tr = t.transpose(ids[0])?;
            let y = t.tanh(tr);
            t.mean(y)
        },
        h,
    )?);

    reports.push(central_diff_check(
        "tanh",
        &[x34.clone()],
        &|t, ids| {
            let y = t.tanh(ids[0]);
            t.mean(y)
        },
        h,
    )?);

    reports.push(central_diff_check(
        "sigmoid",
        &[x34.clone()],
        &|t, ids| {
            let y = t.sigmoid(ids[0]);
            t.mean(y)
        },
        h,
    )?);

    let kinky: Tensor<S> = away_from_zero(&[3, 4], 0.2, &mut rng);
    reports.push(central_diff_check(
        "relu",
        &[kinky.clone()],
        &|t, ids| {
            let r = t.relu(ids[0]);
            let y = t.tanh(r);
            t.mean(y)
        },
        h,
    )?);

    reports.push(central_diff_check(
        "leaky_relu",
        &[kinky],
        &|t, ids| {
            let r = t.leaky_relu(ids[0], S::c(0.01));
            let y = t.tanh(r);
            t.mean(y)
        },
        h,
    )?);

    let logits: Tensor<S> = uniform(&[1, 5], -2.0, 2.0, &mut rng);
    let probe: Tensor<S> = uniform(&[1, 5], -1.0, 1.0, &mut rng);
    {
        let probe = probe.clone();
        reports.push(central_diff_check(
            "softmax",
            &[logits.clone()],
            &|t, ids| {
                let s = t.softmax(ids[0])?;
                let w = t.constant(probe.clone());
                let p = t.mul(s, w)?;
                t.sum(p)
            },
            h,
        )?);
    }

    {
        let probe = probe.clone();
        let mask = [true, false, true, true, false];
        reports.push(central_diff_check(
            "softmax_masked",
            &[logits.clone()],
            &|t, ids| {
                let s = t.softmax_masked(ids[0], Some(&mask))?;
                let w = t.constant(probe.clone());
                let p = t.mul(s, w)?;
                t.sum(p)
            },
            h,
        )?);
    }

    reports.push(central_diff_check(
        "log_softmax",
        &[logits],
        &|t, ids| {
            let s = t.log_softmax(ids[0])?;
            let w = t.constant(probe.clone());
            let p = t.mul(s, w)?;
            t.sum(p)
        },
        h,
    )?);

    let positive: Tensor<S> = uniform(&[2, 3], 0.4, 1.6, &mut rng);
    reports.push(central_diff_check(
        "log",
        &[positive],
        &|t, ids| {
            let l = t.log(ids[0]);
            t.mean(l)
        },
        h,
    )?);

    reports.push(central_diff_check(
        "scale",
        &[x34.clone()],
        &|t, ids| {
            let s = t.scale(ids[0], S::c(0.7));
            let y = t.tanh(s);
            t.mean(y)
        },
        h,
    )?);

    reports.push(central_diff_check(
        "mean",
        &[x34.clone()],
        &|t, ids| {
            let p = t.mul(ids[0], ids[0])?;
            t.mean(p)
        },
        h,
    )?);

    reports.push(central_diff_check(
        "sum",
        &[x34.clone()],
        &|t, ids| {
            let y = t.tanh(ids[0]);
            t.sum(y)
        },
        h,
    )?);

    reports.push(central_diff_check(
        "squared_l2",
        &[x34.clone(), y34],
        &|t, ids| t.squared_l2(ids[0], ids[1]),
        h,
    )?);

    let table: Tensor<S> = uniform(&[4, 3], -1.0, 1.0, &mut rng);
    reports.push(central_diff_check(
        "embedding_gather",
        &[table],
        &|t, ids| {
            // Repeated row id exercises scatter-add accumulation.
            let g = t.gather(ids[0], &[2, 0, 2, 1])?;
            let y = t.tanh(g);
            t.mean(y)
        },
        h,
    )?);

    let x43: Tensor<S> = uniform(&[4, 3], -1.0, 1.0, &mut rng);
    reports.push(central_diff_check(
        "slice_rows",
        &[x43],
        &|t, ids| {
            let s = t.slice_rows(ids[0], 1, 3)?;
            let y = t.tanh(s);
            t.mean(y)
        },
        h,
    )?);

    reports.push(central_diff_check(
        "pick",
        &[x34.clone()],
        &|t, ids| {
            let y = t.tanh(ids[0]);
            t.pick(y, 5)
        },
        h,
    )?);

    reports.push(central_diff_check(
        "mean_many",
        &[x34],
        &|t, ids| {
            let y = t.tanh(ids[0]);
            let a = t.pick(y, 0)?;
            let b = t.pick(y, 3)?;
            let c = t.pick(y, 7)?;
            t.mean_many(&[a, b, c])
        },
        h,
    )?);

    Ok(reports)
}

/// Randomized three-layer network: embeddings through two nonlinear layers
/// and a log-softmax readout, checked over all parameters.
pub fn three_layer_network_check<S: Scalar>(seed: u64, h: f64) -> AdResult<CheckReport> {
    let mut rng = crate::rng::stream(seed, "gradcheck.network");
    let x: Tensor<S> = uniform(&[1, 4], -1.0, 1.0, &mut rng);
    let w1: Tensor<S> = uniform(&[4, 5], -0.7, 0.7, &mut rng);
    let b1: Tensor<S> = uniform(&[1, 5], -0.3, 0.3, &mut rng);
    let w2: Tensor<S> = uniform(&[5, 4], -0.7, 0.7, &mut rng);
    let b2: Tensor<S> = uniform(&[1, 4], -0.3, 0.3, &mut rng);
    let w3: Tensor<S> = uniform(&[4, 3], -0.7, 0.7, &mut rng);
    let b3: Tensor<S> = uniform(&[1, 3], -0.3, 0.3, &mut rng);
    central_diff_check(
        "three_layer_network",
        &[x, w1, b1, w2, b2, w3, b3],
        &|t, ids| {
            let h1 = t.matmul(ids[0], ids[1])?;
            let h1 = t.add(h1, ids[2])?;
            let h1 = t.tanh(h1);
            let h2 = t.matmul(h1, ids[3])?;
            let h2 = t.add(h2, ids[4])?;
            let h2 = t.sigmoid(h2);
            let logits = t.matmul(h2, ids[5])?;
            let logits = t.add(logits, ids[6])?;
            let lsm = t.log_softmax(logits)?;
            let nll = t.pick(lsm, 1)?;
            Ok(t.scale(nll, S::c(-1.0)))
        },
        h,
    )
}

// ── Random smooth-op graphs ─────────────────────────────────────────────

/// One step of a replayable random graph over smooth primitives.
#[derive(Debug, Clone)]
pub enum PlanOp {
    Tanh(usize),
    Sigmoid(usize),
    Scale(usize),
    Add(usize, usize),
    Mul(usize, usize),
    Matmul(usize, usize),
    Transpose(usize),
    Softmax(usize),
    Concat0(usize, usize),
}

/// A replayable random computation over a pool of leaf matrices.
#[derive(Debug, Clone)]
pub struct GraphPlan {
    pub leaf_shapes: Vec<(usize, usize)>,
    pub ops: Vec<PlanOp>,
}

/// Samples a random plan of 3..=6 smooth ops over 2 leaves.
pub fn random_plan(seed: u64) -> GraphPlan {
    let mut rng = crate::rng::stream(seed, "gradcheck.plan");
    let rows = rng.gen_range(2..4usize);
    let cols = rng.gen_range(2..4usize);
    let leaf_shapes = vec![(rows, cols), (rows, cols)];
    let mut shapes = leaf_shapes.clone();
    let mut ops = Vec::new();
    let n_ops = rng.gen_range(3..=6usize);
    for _ in 0..n_ops {
        let i = rng.gen_range(0..shapes.len());
        let j = rng.gen_range(0..shapes.len());
        let (ri, ci) = shapes[i];
        let (rj, cj) = shapes[j];
        let choice = rng.gen_range(0..8u32);
        let (op, shape) = match choice {
            0 => (PlanOp::Tanh(i), (ri, ci)),
            1 => (PlanOp::Sigmoid(i), (ri, ci)),
            2 => (PlanOp::Scale(i), (ri, ci)),
            3 if shapes[i] == shapes[j] => (PlanOp::Add(i, j), (ri, ci)),
            4 if shapes[i] == shapes[j] => (PlanOp::Mul(i, j), (ri, ci)),
            5 if ci == rj => (PlanOp::Matmul(i, j), (ri, cj)),
            6 => (PlanOp::Transpose(i), (ci, ri)),
            7 if ci == cj => (PlanOp::Concat0(i, j), (ri + rj, ci)),
            _ => (PlanOp::Softmax(i), (ri, ci)),
        };
        ops.push(op);
        shapes.push(shape);
    }
    GraphPlan { leaf_shapes, ops }
}

/// Finite-difference check of a random plan; the loss is the mean of the
/// final pool entry.
pub fn check_plan<S: Scalar>(plan: &GraphPlan, seed: u64, h: f64) -> AdResult<CheckReport> {
    let mut rng = crate::rng::stream(seed, "gradcheck.plan.leaves");
    let leaves: Vec<Tensor<S>> = plan
        .leaf_shapes
        .iter()
        .map(|&(r, c)| uniform(&[r, c], -0.9, 0.9, &mut rng))
        .collect();
    let ops = plan.ops.clone();
    central_diff_check(
        &format!("random_graph_{seed}"),
        &leaves,
        &move |t, ids| {
            let mut pool: Vec<NodeId> = ids.to_vec();
            for op in &ops {
                let next = match *op {
                    PlanOp::Tanh(i) => t.tanh(pool[i]),
                    PlanOp::Sigmoid(i) => t.sigmoid(pool[i]),
                    PlanOp::Scale(i) => t.scale(pool[i], S::c(0.6)),
                    PlanOp::Add(i, j) => t.add(pool[i], pool[j])?,
                    PlanOp::Mul(i, j) => t.mul(pool[i], pool[j])?,
                    PlanOp::Matmul(i, j) => t.matmul(pool[i], pool[j])?,
                    PlanOp::Transpose(i) => t.transpose(pool[i])?,
                    PlanOp::Softmax(i) => t.softmax(pool[i])?,
                    PlanOp::Concat0(i, j) => t.concat(&[pool[i], pool[j]], 0)?,
                };
                pool.push(next);
            }
            t.mean(*pool.last().expect("non-empty pool"))
        },
        h,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    #[test]
    fn every_primitive_matches_finite_differences() {
        let reports = primitive_suite::<f64>(11, H).unwrap();
        assert!(reports.len() >= 19, "suite covers all primitives");
        for r in &reports {
            assert!(
                r.passes(TOL),
                "{} rel err {:.3e} exceeds {TOL}",
                r.label,
                r.max_rel_err
            );
        }
    }

    #[test]
    fn three_layer_network_matches_finite_differences() {
        let r = three_layer_network_check::<f64>(5, H).unwrap();
        assert!(r.passes(TOL), "rel err {:.3e}", r.max_rel_err);
    }

    #[test]
    fn hundred_random_smooth_graphs_match_finite_differences() {
        for seed in 0..100u64 {
            let plan = random_plan(seed);
            let r = check_plan::<f64>(&plan, seed, H).unwrap();
            assert!(
                r.passes(TOL),
                "seed {seed}: rel err {:.3e} (plan {:?})",
                r.max_rel_err,
                plan
            );
        }
    }

    #[test]
    fn format_table_reports_status() {
        let reports = vec![
            CheckReport {
                label: "good".into(),
                params: 3,
                max_rel_err: 1e-9,
            },
            CheckReport {
                label: "bad".into(),
                params: 2,
                max_rel_err: 0.5,
            },
        ];
        let table = format_table(&reports, 1e-4);
        assert!(table.contains("ok"));
        assert!(table.contains("FAIL"));
    }
}
