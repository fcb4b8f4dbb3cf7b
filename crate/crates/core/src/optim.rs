//! LAMB and Adafactor, operating on plain tensor lists so they work both on
//! full model parameter sets and on small synthetic test problems.
//!
//! LAMB is Adam with bias correction plus a per-tensor trust ratio
//! `||w|| / ||update||`. Adafactor keeps factored row/column accumulators for
//! matrix tensors (`V ~ R C^T / sum(R)`) and a full second moment for
//! vectors and scalars, with RMS clipping of the update and the decayed
//! second-moment schedule `beta2_hat = 1 - t^-0.8`.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::model::ModelConfig;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Lamb,
    Adafactor,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct OptHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// RMS clipping threshold for the Adafactor update.
    pub clip_threshold: f64,
    /// When false, LAMB degenerates to AdamW (trust ratio pinned to 1).
    pub trust_ratio: bool,
}

impl Default for OptHyper {
    fn default() -> Self {
        OptHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_threshold: 1.0,
            trust_ratio: true,
        }
    }
}

impl OptHyper {
    /// Reference learning rates for the four model sizes.
    pub fn preset_lr(model: &str) -> Option<f64> {
        match model {
            "base" => Some(1.27e-3),
            "medium" => Some(3e-4),
            "large" | "mega" => Some(1e-4),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("betas must be in [0, 1)".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::InvalidConfig("lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorState<S> {
    Lamb {
        m: Tensor<S>,
        v: Tensor<S>,
    },
    AdafactorFactored {
        r: Tensor<S>,
        c: Tensor<S>,
        m: Tensor<S>,
    },
    AdafactorFull {
        v: Tensor<S>,
        m: Tensor<S>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptState<S> {
    pub step: u64,
    pub tensors: Vec<TensorState<S>>,
}

impl<S: Scalar> OptState<S> {
    pub fn new(kind: OptimizerKind, params: &[&Tensor<S>]) -> Self {
        let tensors = params
            .iter()
            .map(|p| match kind {
                OptimizerKind::Lamb => TensorState::Lamb {
                    m: p.zeros_like(),
                    v: p.zeros_like(),
                },
                OptimizerKind::Adafactor => {
                    if p.is_matrix() {
                        TensorState::AdafactorFactored {
                            r: Tensor::zeros(&[p.rows()]),
                            c: Tensor::zeros(&[p.cols()]),
                            m: p.zeros_like(),
                        }
                    } else {
                        TensorState::AdafactorFull {
                            v: p.zeros_like(),
                            m: p.zeros_like(),
                        }
                    }
                }
            })
            .collect();
        OptState { step: 0, tensors }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self.tensors.first() {
            Some(TensorState::Lamb { .. }) | None => OptimizerKind::Lamb,
            _ => OptimizerKind::Adafactor,
        }
    }
}

fn check_finite<S: Scalar>(grads: &[&Tensor<S>]) -> Result<()> {
    for (i, g) in grads.iter().enumerate() {
        if !g.all_finite() {
            return Err(Error::NanGrad(format!("tensor {i}")));
        }
    }
    Ok(())
}

/// One LAMB step over a tensor list. `params`, `grads` and `state.tensors`
/// must be index-aligned.
pub fn lamb_step<S: Scalar>(
    params: &mut [&mut Tensor<S>],
    grads: &[&Tensor<S>],
    state: &mut OptState<S>,
    hyper: &OptHyper,
) -> Result<()> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.tensors.len());
    check_finite(grads)?;
    state.step += 1;
    let t = state.step as i32;
    let b1 = S::cast_from(hyper.beta1);
    let b2 = S::cast_from(hyper.beta2);
    let one = S::one();
    let bc1 = one - b1.powi(t);
    let bc2 = one - b2.powi(t);
    let eps = S::cast_from(hyper.eps);
    let wd = S::cast_from(hyper.weight_decay);
    let lr = S::cast_from(hyper.lr);

    for ((p, g), st) in params.iter_mut().zip(grads).zip(&mut state.tensors) {
        let TensorState::Lamb { m, v } = st else {
            panic!("LAMB step on non-LAMB state");
        };
        let pw = p.as_mut_slice();
        let gw = g.as_slice();
        let mw = m.as_mut_slice();
        let vw = v.as_mut_slice();
        let mut w_norm = S::zero();
        let mut u_norm = S::zero();
        let mut update = vec![S::zero(); pw.len()];
        for i in 0..pw.len() {
            mw[i] = b1 * mw[i] + (one - b1) * gw[i];
            vw[i] = b2 * vw[i] + (one - b2) * gw[i] * gw[i];
            let m_hat = mw[i] / bc1;
            let v_hat = vw[i] / bc2;
            let u = m_hat / (v_hat.sqrt() + eps) + wd * pw[i];
            update[i] = u;
            w_norm += pw[i] * pw[i];
            u_norm += u * u;
        }
        let ratio = if hyper.trust_ratio {
            let wn = w_norm.sqrt();
            let un = u_norm.sqrt();
            if wn == S::zero() || un == S::zero() {
                one
            } else {
                wn / un
            }
        } else {
            one
        };
        for i in 0..pw.len() {
            pw[i] = pw[i] - lr * ratio * update[i];
        }
    }
    Ok(())
}

/// One Adafactor step. Matrix tensors use factored row/column second-moment
/// accumulators; vectors and scalars use the full second moment.
pub fn adafactor_step<S: Scalar>(
    params: &mut [&mut Tensor<S>],
    grads: &[&Tensor<S>],
    state: &mut OptState<S>,
    hyper: &OptHyper,
) -> Result<()> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.tensors.len());
    check_finite(grads)?;
    state.step += 1;
    let t = state.step as f64;
    // Decayed second-moment schedule from the original recipe.
    let b2_hat = S::cast_from(1.0 - t.powf(-0.8));
    let b1 = S::cast_from(hyper.beta1);
    let one = S::one();
    let eps = S::cast_from(1e-30);
    let wd = S::cast_from(hyper.weight_decay);
    let lr = S::cast_from(hyper.lr);
    let clip = S::cast_from(hyper.clip_threshold);

    for ((p, g), st) in params.iter_mut().zip(grads).zip(&mut state.tensors) {
        let pw = p.as_mut_slice();
        let gw = g.as_slice();
        let mut update = vec![S::zero(); pw.len()];
        match st {
            TensorState::AdafactorFactored { r, c, m } => {
                let rows = r.numel();
                let cols = c.numel();
                let rw = r.as_mut_slice();
                let cw = c.as_mut_slice();
                for i in 0..rows {
                    let mut sum = S::zero();
                    for j in 0..cols {
                        let gg = gw[i * cols + j];
                        sum += gg * gg + eps;
                    }
                    rw[i] = b2_hat * rw[i] + (one - b2_hat) * sum;
                }
                for j in 0..cols {
                    let mut sum = S::zero();
                    for i in 0..rows {
                        let gg = gw[i * cols + j];
                        sum += gg * gg + eps;
                    }
                    cw[j] = b2_hat * cw[j] + (one - b2_hat) * sum;
                }
                let r_sum: S = rw.iter().copied().sum();
                let inv_r_sum = r_sum.recip();
                for i in 0..rows {
                    for j in 0..cols {
                        let v_hat = rw[i] * cw[j] * inv_r_sum;
                        update[i * cols + j] = gw[i * cols + j] / v_hat.sqrt();
                    }
                }
                apply_update(pw, &mut update, m, b1, lr, wd, clip);
            }
            TensorState::AdafactorFull { v, m } => {
                let vw = v.as_mut_slice();
                for i in 0..pw.len() {
                    vw[i] = b2_hat * vw[i] + (one - b2_hat) * (gw[i] * gw[i] + eps);
                    update[i] = gw[i] / vw[i].sqrt();
                }
                apply_update(pw, &mut update, m, b1, lr, wd, clip);
            }
            TensorState::Lamb { .. } => panic!("Adafactor step on LAMB state"),
        }
    }
    Ok(())
}

fn apply_update<S: Scalar>(
    pw: &mut [S],
    update: &mut [S],
    m: &mut Tensor<S>,
    b1: S,
    lr: S,
    wd: S,
    clip: S,
) {
    let one = S::one();
    // RMS clip.
    let mut sq = S::zero();
    for &u in update.iter() {
        sq += u * u;
    }
    let rms = (sq / S::cast_from(update.len() as f64)).sqrt();
    let denom = (rms / clip).max(one);
    let mw = m.as_mut_slice();
    for i in 0..pw.len() {
        let u = update[i] / denom;
        mw[i] = b1 * mw[i] + (one - b1) * u;
        pw[i] = pw[i] - lr * (mw[i] + wd * pw[i]);
    }
}

/// Accumulator element counts for an optimizer choice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Footprint {
    pub first_moment: u64,
    pub second_moment: u64,
}

impl Footprint {
    pub fn total(&self) -> u64 {
        self.first_moment + self.second_moment
    }
}

/// Count accumulator elements for arbitrary tensor shapes. A "matrix" is a
/// 2-D shape with both dims > 1, mirroring the factoring rule above.
pub fn footprint_for_shapes(shapes: &[Vec<usize>], kind: OptimizerKind) -> Footprint {
    let mut first = 0u64;
    let mut second = 0u64;
    for shape in shapes {
        let n: u64 = shape.iter().product::<usize>() as u64;
        first += n;
        match kind {
            OptimizerKind::Lamb => second += n,
            OptimizerKind::Adafactor => {
                if shape.len() == 2 && shape[0] > 1 && shape[1] > 1 {
                    second += (shape[0] + shape[1]) as u64;
                } else {
                    second += n;
                }
            }
        }
    }
    Footprint {
        first_moment: first,
        second_moment: second,
    }
}

pub fn memory_footprint(config: &ModelConfig, kind: OptimizerKind) -> Footprint {
    let shapes: Vec<Vec<usize>> = config.tensor_shapes().into_iter().map(|(_, s)| s).collect();
    footprint_for_shapes(&shapes, kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use rand::{Rng, SeedableRng};

    fn single(v: Vec<f64>, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(shape, v)
    }

    #[test]
    fn lamb_zero_gradient_is_identity() {
        let mut p = single(vec![0.5, -0.3], &[2]);
        let g = single(vec![0.0, 0.0], &[2]);
        let mut state = OptState::new(OptimizerKind::Lamb, &[&p]);
        let hyper = OptHyper::default();
        let before = p.clone();
        lamb_step(&mut [&mut p], &[&g], &mut state, &hyper).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn lamb_single_scalar_hand_computed() {
        // w=1, g=0.1, beta1=0.9, beta2=0.999, lr=0.01, t=1.
        let mut p = single(vec![1.0], &[1]);
        let g = single(vec![0.1], &[1]);
        let mut state = OptState::new(OptimizerKind::Lamb, &[&p]);
        let hyper = OptHyper {
            lr: 0.01,
            ..OptHyper::default()
        };
        lamb_step(&mut [&mut p], &[&g], &mut state, &hyper).unwrap();
        // m=0.01, v=1e-5; m_hat=0.1, v_hat=0.01; u=0.1/(0.1+1e-8);
        // trust ratio = |1| / |u|; w -= lr * r * u = 1 - 0.01.
        let u: f64 = 0.1 / (0.01f64.sqrt() + 1e-8);
        let r = 1.0 / u.abs();
        let expected = 1.0 - 0.01 * r * u;
        assert!((p.as_slice()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn lamb_trust_ratio_scales_with_weight_norm() {
        // With weight_decay=0 the update u is w-independent, so scaling w by
        // c scales the trust ratio by c and the applied delta likewise.
        let hyper = OptHyper {
            lr: 0.01,
            weight_decay: 0.0,
            ..OptHyper::default()
        };
        let g = single(vec![0.2, -0.1], &[2]);
        let run = |scale: f64| -> f64 {
            let mut p = single(vec![1.0 * scale, 2.0 * scale], &[2]);
            let before = p.clone();
            let mut state = OptState::new(OptimizerKind::Lamb, &[&p]);
            lamb_step(&mut [&mut p], &[&g], &mut state, &hyper).unwrap();
            // norm of applied delta
            before
                .as_slice()
                .iter()
                .zip(p.as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        let d1 = run(1.0);
        let d3 = run(3.0);
        assert!((d3 / d1 - 3.0).abs() < 1e-9);
    }

    #[test]
    fn lamb_rejects_nan_grad() {
        let mut p = single(vec![1.0], &[1]);
        let g = single(vec![f64::NAN], &[1]);
        let mut state = OptState::new(OptimizerKind::Lamb, &[&p]);
        assert!(matches!(
            lamb_step(&mut [&mut p], &[&g], &mut state, &OptHyper::default()),
            Err(Error::NanGrad(_))
        ));
    }

    #[test]
    fn adafactor_rank_one_second_moment_is_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let rows = rng.gen_range(2..6);
            let cols = rng.gen_range(2..6);
            let r: Vec<f64> = (0..rows).map(|_| rng.gen_range(0.1..2.0)).collect();
            let c: Vec<f64> = (0..cols).map(|_| rng.gen_range(0.1..2.0)).collect();
            // g with g^2 = r c^T exactly.
            let g: Vec<f64> = (0..rows * cols)
                .map(|idx| (r[idx / cols] * c[idx % cols]).sqrt())
                .collect();
            let g = single(g, &[rows, cols]);
            let mut p = Tensor::<f64>::zeros(&[rows, cols]);
            let mut state = OptState::new(OptimizerKind::Adafactor, &[&p]);
            adafactor_step(&mut [&mut p], &[&g], &mut state, &OptHyper::default()).unwrap();
            let TensorState::AdafactorFactored { r: rr, c: cc, .. } = &state.tensors[0] else {
                panic!("expected factored state");
            };
            let r_sum: f64 = rr.as_slice().iter().sum();
            for i in 0..rows {
                for j in 0..cols {
                    let v_hat = rr.as_slice()[i] * cc.as_slice()[j] / r_sum;
                    let exact = r[i] * c[j];
                    assert!((v_hat - exact).abs() < 1e-12, "v_hat {v_hat} vs {exact}");
                }
            }
        }
    }

    #[test]
    fn adafactor_vector_uses_full_state() {
        let p = Tensor::<f64>::zeros(&[5]);
        let state = OptState::new(OptimizerKind::Adafactor, &[&p]);
        assert!(matches!(state.tensors[0], TensorState::AdafactorFull { .. }));
    }

    #[test]
    fn adafactor_constant_matrix_hand_computed() {
        // 2x2 all-ones gradient, first step. With b2_hat = 0 at t=1:
        // R_i = 2(1+eps), C_j = 2(1+eps), sum R = 4(1+eps);
        // v_hat = (1+eps) per entry; u = 1/sqrt(1+eps) ~ 1; RMS(u)=|u| -> clip
        // leaves it at threshold 1.0; m = 0.1*u; w -= lr*m.
        let hyper = OptHyper {
            lr: 0.01,
            beta1: 0.9,
            ..OptHyper::default()
        };
        let mut p = Tensor::<f64>::zeros(&[2, 2]);
        let g = single(vec![1.0; 4], &[2, 2]);
        let mut state = OptState::new(OptimizerKind::Adafactor, &[&p]);
        adafactor_step(&mut [&mut p], &[&g], &mut state, &hyper).unwrap();
        let u = 1.0 / (1.0 + 1e-30f64).sqrt();
        let expected = -0.01 * (1.0 - 0.9) * u;
        for &w in p.as_slice() {
            assert!((w - expected).abs() < 1e-15, "{w} vs {expected}");
        }
    }

    #[test]
    fn adafactor_second_moment_nonnegative() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut p = Tensor::<f64>::zeros(&[4, 3]);
        let mut state = OptState::new(OptimizerKind::Adafactor, &[&p]);
        for _ in 0..20 {
            let g: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let g = single(g, &[4, 3]);
            adafactor_step(&mut [&mut p], &[&g], &mut state, &OptHyper::default()).unwrap();
            let TensorState::AdafactorFactored { r, c, .. } = &state.tensors[0] else {
                unreachable!()
            };
            assert!(r.as_slice().iter().all(|&x| x >= 0.0));
            assert!(c.as_slice().iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn footprint_examples() {
        let f = footprint_for_shapes(&[vec![100, 200]], OptimizerKind::Lamb);
        assert_eq!(f.total(), 40_000);
        let f = footprint_for_shapes(&[vec![100, 200]], OptimizerKind::Adafactor);
        assert_eq!(f.second_moment, 300);
        // scalar parameter: m and v.
        let f = footprint_for_shapes(&[vec![1]], OptimizerKind::Lamb);
        assert_eq!(f.total(), 2);
        let f = footprint_for_shapes(&[vec![1]], OptimizerKind::Adafactor);
        assert_eq!(f.total(), 2);
    }

    #[test]
    fn adafactor_never_larger_than_lamb() {
        for cfg in [
            ModelConfig {
                variant: Variant::Gpt2,
                context: 16,
                d_model: 8,
                n_heads: 2,
                n_layers: 2,
                vocab: 50,
                seed: 0,
            },
            ModelConfig::base(),
        ] {
            let a = memory_footprint(&cfg, OptimizerKind::Adafactor);
            let l = memory_footprint(&cfg, OptimizerKind::Lamb);
            assert!(a.total() <= l.total());
            assert!(a.second_moment < l.second_moment);
        }
    }

    /// Both optimizers strictly decrease a convex quadratic over 100 steps.
    #[test]
    fn optimizers_decrease_convex_quadratic() {
        let coeffs = vec![0.5, 1.0, 2.0, 4.0];
        let objective = |w: &Tensor<f64>| -> f64 {
            w.as_slice()
                .iter()
                .zip(&coeffs)
                .map(|(wi, a)| 0.5 * a * wi * wi)
                .sum()
        };
        let gradient = |w: &Tensor<f64>| -> Tensor<f64> {
            Tensor::from_vec(
                &[4],
                w.as_slice().iter().zip(&coeffs).map(|(wi, a)| a * wi).collect(),
            )
        };
        for kind in [OptimizerKind::Lamb, OptimizerKind::Adafactor] {
            let mut w = Tensor::from_vec(&[4], vec![1.0, -2.0, 0.5, 3.0]);
            let mut state = OptState::new(kind, &[&w]);
            let hyper = OptHyper {
                lr: 0.01,
                ..OptHyper::default()
            };
            let mut prev = objective(&w);
            for _ in 0..100 {
                let g = gradient(&w);
                match kind {
                    OptimizerKind::Lamb => {
                        lamb_step(&mut [&mut w], &[&g], &mut state, &hyper).unwrap()
                    }
                    OptimizerKind::Adafactor => {
                        adafactor_step(&mut [&mut w], &[&g], &mut state, &hyper).unwrap()
                    }
                }
                let now = objective(&w);
                assert!(now < prev, "{kind:?} failed to decrease: {prev} -> {now}");
                prev = now;
            }
        }
    }
}
