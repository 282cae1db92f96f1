//! Optimizers over named parameter sets.
//!
//! Model components expose their tensors through [`ParamSet`], a visitor
//! keyed by stable hierarchical names. An optimizer step takes a [`GradMap`]
//! (name -> dense gradient) and updates exactly the parameters named in it,
//! validating every gradient and every updated value for finiteness first so
//! a failed step never leaves a half-updated model.

use crate::error::{AdError, AdResult};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::collections::HashMap;

/// Named gradients, as extracted from a tape after `backward`.
pub type GradMap<S> = HashMap<String, Vec<S>>;

/// A collection of named parameter tensors.
///
/// Names must be stable across runs: they key optimizer state, checkpoint
/// arrays, and non-finite diagnostics.
pub trait ParamSet<S: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<S>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>));

    /// Names in visit order.
    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |name, _| out.push(name.to_string()));
        out
    }

    /// Total number of scalar parameters.
    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }
}

/// Several parameter sets optimized as one, with a distinct name prefix per
/// part (e.g. `"enc."`, `"cls."`) so names stay unique and optimizer state
/// stays stable.
pub struct Joint<'a, S: Scalar> {
    parts: Vec<(&'a str, &'a mut dyn ParamSet<S>)>,
}

impl<'a, S: Scalar> Joint<'a, S> {
    pub fn new(parts: Vec<(&'a str, &'a mut dyn ParamSet<S>)>) -> Self {
        Self { parts }
    }
}

impl<S: Scalar> ParamSet<S> for Joint<'_, S> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        for (prefix, part) in &self.parts {
            part.visit(&mut |name, t| f(&format!("{prefix}{name}"), t));
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        for (prefix, part) in &mut self.parts {
            part.visit_mut(&mut |name, t| f(&format!("{prefix}{name}"), t));
        }
    }
}

/// Copies the gradients of staged parameter leaves into a [`GradMap`] under
/// `prefix + local name`. Leaves the tape never touched contribute zeros.
pub fn collect_grads<S: Scalar>(
    tape: &crate::tape::Tape<S>,
    grads: &crate::tape::Gradients<S>,
    entries: &[(String, crate::tape::NodeId)],
    prefix: &str,
    out: &mut GradMap<S>,
) {
    for (name, id) in entries {
        let numel = tape.value(*id).numel();
        out.insert(format!("{prefix}{name}"), grads.dense(*id, numel));
    }
}

fn check_grads<S: Scalar>(grads: &GradMap<S>) -> AdResult<()> {
    for (name, g) in grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(AdError::NonFiniteGradient { param: name.clone() });
        }
    }
    Ok(())
}

/// Adam with bias correction.
///
/// First and second moments are kept per parameter name; parameters absent
/// from the gradient map are left untouched (their moments do not decay).
#[derive(Debug, Clone)]
pub struct Adam<S: Scalar> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    step: u64,
    moments: HashMap<String, (Vec<S>, Vec<S>)>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: S) -> Self {
        Self {
            lr,
            beta1: S::c(0.9),
            beta2: S::c(0.999),
            eps: S::c(1e-8),
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. Validates all gradients up front and every
    /// updated parameter afterwards; any non-finite value aborts the step
    /// with the offending parameter's name before anything is written.
    pub fn step<P: ParamSet<S>>(&mut self, params: &mut P, grads: &GradMap<S>) -> AdResult<()> {
        check_grads(grads)?;
        self.step += 1;
        let t = self.step;
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let bc1 = S::one() - b1.powi(t as i32);
        let bc2 = S::one() - b2.powi(t as i32);
        let mut failed: Option<String> = None;
        let moments = &mut self.moments;
        params.visit_mut(&mut |name, tensor| {
            if failed.is_some() {
                return;
            }
            let Some(g) = grads.get(name) else { return };
            debug_assert_eq!(g.len(), tensor.numel(), "gradient size for {name}");
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![S::zero(); g.len()], vec![S::zero(); g.len()]));
            let data = tensor.data_mut();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (S::one() - b1) * g[i];
                v[i] = b2 * v[i] + (S::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + eps);
                if !data[i].is_finite() {
                    failed = Some(name.to_string());
                    return;
                }
            }
        });
        match failed {
            Some(param) => Err(AdError::NonFiniteParam { param }),
            None => Ok(()),
        }
    }

    /// Serializes moments and the step counter as named arrays
    /// (`m.<param>`, `v.<param>`, `step`), sorted for stable output.
    pub fn state_arrays(&self) -> Vec<(String, Vec<usize>, Vec<S>)> {
        let mut out = vec![("step".to_string(), vec![], vec![S::c(self.step as f64)])];
        let mut names: Vec<&String> = self.moments.keys().collect();
        names.sort();
        for name in names {
            let (m, v) = &self.moments[name];
            out.push((format!("m.{name}"), vec![m.len()], m.clone()));
            out.push((format!("v.{name}"), vec![v.len()], v.clone()));
        }
        out
    }

    /// Restores state produced by [`Adam::state_arrays`].
    pub fn load_state_arrays(&mut self, arrays: &[(String, Vec<usize>, Vec<S>)]) {
        self.moments.clear();
        self.step = 0;
        let mut halves: HashMap<String, (Option<Vec<S>>, Option<Vec<S>>)> = HashMap::new();
        for (name, _, data) in arrays {
            if name == "step" {
                self.step = data[0].to_f64c() as u64;
            } else if let Some(p) = name.strip_prefix("m.") {
                halves.entry(p.to_string()).or_default().0 = Some(data.clone());
            } else if let Some(p) = name.strip_prefix("v.") {
                halves.entry(p.to_string()).or_default().1 = Some(data.clone());
            }
        }
        for (name, (m, v)) in halves {
            if let (Some(m), Some(v)) = (m, v) {
                self.moments.insert(name, (m, v));
            }
        }
    }
}

/// Plain stochastic gradient descent: `p -= lr * g`.
#[derive(Debug, Clone)]
pub struct Sgd<S: Scalar> {
    pub lr: S,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(lr: S) -> Self {
        Self { lr }
    }

    /// Applies one update with the same finiteness guarantees as Adam.
    pub fn step<P: ParamSet<S>>(&self, params: &mut P, grads: &GradMap<S>) -> AdResult<()> {
        check_grads(grads)?;
        let lr = self.lr;
        let mut failed: Option<String> = None;
        params.visit_mut(&mut |name, tensor| {
            if failed.is_some() {
                return;
            }
            let Some(g) = grads.get(name) else { return };
            debug_assert_eq!(g.len(), tensor.numel(), "gradient size for {name}");
            let data = tensor.data_mut();
            for i in 0..g.len() {
                data[i] = data[i] - lr * g[i];
                if !data[i].is_finite() {
                    failed = Some(name.to_string());
                    return;
                }
            }
        });
        match failed {
            Some(param) => Err(AdError::NonFiniteParam { param }),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct OneParam {
        w: Tensor<f64>,
    }

    impl ParamSet<f64> for OneParam {
        fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<f64>)) {
            f("w", &self.w);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f64>)) {
            f("w", &mut self.w);
        }
    }

    fn grads(g: &[f64]) -> GradMap<f64> {
        let mut m = GradMap::new();
        m.insert("w".to_string(), g.to_vec());
        m
    }

    #[test]
    fn adam_first_step_magnitude_is_lr_times_sign() {
        // With bias correction, the first update is lr * g / (|g| + eps).
        let mut p = OneParam {
            w: Tensor::row(&[1.0]),
        };
        let mut adam = Adam::new(1e-4);
        adam.step(&mut p, &grads(&[0.5])).unwrap();
        let delta = 1.0 - p.w.data()[0];
        let expected = 1e-4 * 0.5 / (0.5 + 1e-8);
        assert!((delta - expected).abs() < 1e-12, "delta {delta}");
    }

    #[test]
    fn adam_zero_gradient_first_step_leaves_params_unchanged() {
        let mut p = OneParam {
            w: Tensor::row(&[3.0, -4.0]),
        };
        let mut adam = Adam::new(1e-2);
        adam.step(&mut p, &grads(&[0.0, 0.0])).unwrap();
        assert_eq!(p.w.data(), &[3.0, -4.0]);
    }

    #[test]
    fn adam_missing_gradient_skips_parameter() {
        let mut p = OneParam {
            w: Tensor::row(&[1.0]),
        };
        let mut adam = Adam::new(1e-2);
        adam.step(&mut p, &GradMap::new()).unwrap();
        assert_eq!(p.w.data(), &[1.0]);
    }

    #[test]
    fn adam_rejects_nan_gradient_with_parameter_name() {
        let mut p = OneParam {
            w: Tensor::row(&[1.0]),
        };
        let mut adam = Adam::new(1e-2);
        let err = adam.step(&mut p, &grads(&[f64::NAN])).unwrap_err();
        assert_eq!(
            err,
            AdError::NonFiniteGradient {
                param: "w".to_string()
            }
        );
        // Aborted step leaves the parameter untouched.
        assert_eq!(p.w.data(), &[1.0]);
    }

    #[test]
    fn sgd_step_matches_hand_computation() {
        let mut p = OneParam {
            w: Tensor::row(&[1.0]),
        };
        Sgd::new(1e-2).step(&mut p, &grads(&[0.5])).unwrap();
        assert!((p.w.data()[0] - 0.995).abs() < 1e-15);
    }

    #[test]
    fn adam_state_round_trips_through_arrays() {
        let mut p = OneParam {
            w: Tensor::row(&[1.0, 2.0]),
        };
        let mut adam = Adam::new(1e-3);
        adam.step(&mut p, &grads(&[0.1, -0.2])).unwrap();
        adam.step(&mut p, &grads(&[0.3, 0.4])).unwrap();
        let arrays = adam.state_arrays();

        let mut fresh = Adam::new(1e-3);
        fresh.load_state_arrays(&arrays);
        assert_eq!(fresh.step_count(), 2);

        // Continuing from restored state matches continuing the original.
        let mut p2 = OneParam {
            w: Tensor::new(vec![1, 2], p.w.data().to_vec()).unwrap(),
        };
        adam.step(&mut p, &grads(&[0.05, 0.05])).unwrap();
        fresh.step(&mut p2, &grads(&[0.05, 0.05])).unwrap();
        assert_eq!(p.w.data(), p2.w.data());
    }
}
