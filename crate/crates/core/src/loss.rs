//! Learnable-weight L1 pose loss and its temporal (multi-frame) extension.
//!
//! Single image:
//! `|p - p̂|₁ e^(-β) + β + |logq - log q̂|₁ e^(-γ) + γ`.
//!
//! A tuple of frames adds `temporal_alpha` times the same expression over all
//! ordered pairs `i != j`, applied to relative residuals
//! `(p_i - p_j) - (p̂_i - p̂_j)` and `(logq_i - logq_j) - (log q̂_i - log q̂_j)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pose, Vec3};
use crate::model::PoseNetworkOutput;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("non-finite value in loss input")]
    NonFinite,
    #[error("{preds} predictions for {targets} targets")]
    LengthMismatch { preds: usize, targets: usize },
    #[error("empty tuple")]
    Empty,
}

/// The two learnable log-weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossState {
    pub beta: f64,
    pub gamma: f64,
}

impl LossState {
    pub const BETA0: f64 = 0.0;
    pub const GAMMA0: f64 = -3.0;

    pub fn new(beta: f64, gamma: f64) -> Self {
        Self { beta, gamma }
    }
}

impl Default for LossState {
    fn default() -> Self {
        Self::new(Self::BETA0, Self::GAMMA0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemporalConfig {
    pub temporal_alpha: f64,
    /// Frame spacing `s` between tuple members.
    pub frame_spacing: usize,
    /// Sample `(i, i+s, i+2s)` triplets; otherwise `(i, i+s)` pairs.
    pub triplet: bool,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        Self {
            temporal_alpha: 1.0,
            frame_spacing: 10,
            triplet: true,
        }
    }
}

impl TemporalConfig {
    pub fn tuple_len(&self) -> usize {
        if self.triplet {
            3
        } else {
            2
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.temporal_alpha >= 0.0 && self.temporal_alpha.is_finite()) {
            return Err(format!(
                "temporal_alpha {} must be >= 0",
                self.temporal_alpha
            ));
        }
        if self.frame_spacing == 0 {
            return Err("frame_spacing must be >= 1".into());
        }
        Ok(())
    }
}

/// Gradient of a loss with respect to one prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PredGrad {
    pub p: Vec3,
    pub logq: Vec3,
}

/// A loss value with its gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct LossEval {
    pub value: f64,
    /// Sum of the per-frame terms.
    pub absolute: f64,
    /// Sum of the pairwise terms, before multiplication by `temporal_alpha`.
    pub pairwise: f64,
    pub preds: Vec<PredGrad>,
    pub d_beta: f64,
    pub d_gamma: f64,
}

fn l1(v: &Vec3) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

fn sign(v: &Vec3) -> Vec3 {
    v.map(|x| {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    })
}

fn check(pred: &PoseNetworkOutput, target: &Pose, state: &LossState) -> Result<(), LossError> {
    let finite = pred.p.iter().chain(pred.logq.iter()).all(|v| v.is_finite())
        && target.p.iter().all(|v| v.is_finite())
        && state.beta.is_finite()
        && state.gamma.is_finite();
    if finite {
        Ok(())
    } else {
        Err(LossError::NonFinite)
    }
}

/// One weighted term given position and rotation residuals.
struct Term {
    value: f64,
    d_dp: Vec3,
    d_dr: Vec3,
    d_beta: f64,
    d_gamma: f64,
}

fn weighted_term(dp: &Vec3, dr: &Vec3, state: &LossState) -> Term {
    let wb = (-state.beta).exp();
    let wg = (-state.gamma).exp();
    let (lp, lr) = (l1(dp), l1(dr));
    Term {
        value: lp * wb + state.beta + lr * wg + state.gamma,
        d_dp: sign(dp) * wb,
        d_dr: sign(dr) * wg,
        d_beta: 1.0 - lp * wb,
        d_gamma: 1.0 - lr * wg,
    }
}

pub fn single_image_loss(
    pred: &PoseNetworkOutput,
    target: &Pose,
    state: &LossState,
) -> Result<f64, LossError> {
    Ok(single_image_loss_eval(pred, target, state)?.value)
}

pub fn single_image_loss_eval(
    pred: &PoseNetworkOutput,
    target: &Pose,
    state: &LossState,
) -> Result<LossEval, LossError> {
    check(pred, target, state)?;
    let dp = pred.p - target.p;
    let dr = pred.logq - target.log_q().0;
    let t = weighted_term(&dp, &dr, state);
    Ok(LossEval {
        value: t.value,
        absolute: t.value,
        pairwise: 0.0,
        preds: vec![PredGrad {
            p: t.d_dp,
            logq: t.d_dr,
        }],
        d_beta: t.d_beta,
        d_gamma: t.d_gamma,
    })
}

/// `∂loss/∂β = 1 - |Δp|₁ e^(-β)`.
pub fn loss_grad_beta(
    pred: &PoseNetworkOutput,
    target: &Pose,
    state: &LossState,
) -> Result<f64, LossError> {
    check(pred, target, state)?;
    Ok(1.0 - l1(&(pred.p - target.p)) * (-state.beta).exp())
}

/// `∂loss/∂γ = 1 - |Δlogq|₁ e^(-γ)`.
pub fn loss_grad_gamma(
    pred: &PoseNetworkOutput,
    target: &Pose,
    state: &LossState,
) -> Result<f64, LossError> {
    check(pred, target, state)?;
    Ok(1.0 - l1(&(pred.logq - target.log_q().0)) * (-state.gamma).exp())
}

pub fn temporal_loss(
    preds: &[PoseNetworkOutput],
    targets: &[Pose],
    state: &LossState,
    cfg: &TemporalConfig,
) -> Result<f64, LossError> {
    Ok(temporal_loss_eval(preds, targets, state, cfg)?.value)
}

pub fn temporal_loss_eval(
    preds: &[PoseNetworkOutput],
    targets: &[Pose],
    state: &LossState,
    cfg: &TemporalConfig,
) -> Result<LossEval, LossError> {
    if preds.len() != targets.len() {
        return Err(LossError::LengthMismatch {
            preds: preds.len(),
            targets: targets.len(),
        });
    }
    if preds.is_empty() {
        return Err(LossError::Empty);
    }
    let target_logs: Vec<Vec3> = targets.iter().map(|t| t.log_q().0).collect();
    let mut out = LossEval {
        value: 0.0,
        absolute: 0.0,
        pairwise: 0.0,
        preds: vec![PredGrad::default(); preds.len()],
        d_beta: 0.0,
        d_gamma: 0.0,
    };
    for (i, (pred, target)) in preds.iter().zip(targets).enumerate() {
        let e = single_image_loss_eval(pred, target, state)?;
        out.absolute += e.value;
        out.preds[i] = e.preds[0];
        out.d_beta += e.d_beta;
        out.d_gamma += e.d_gamma;
    }
    let alpha = cfg.temporal_alpha;
    for i in 0..preds.len() {
        for j in 0..preds.len() {
            if i == j {
                continue;
            }
            let dp = (preds[i].p - preds[j].p) - (targets[i].p - targets[j].p);
            let dr = (preds[i].logq - preds[j].logq) - (target_logs[i] - target_logs[j]);
            let t = weighted_term(&dp, &dr, state);
            out.pairwise += t.value;
            out.preds[i].p += t.d_dp * alpha;
            out.preds[j].p -= t.d_dp * alpha;
            out.preds[i].logq += t.d_dr * alpha;
            out.preds[j].logq -= t.d_dr * alpha;
            out.d_beta += alpha * t.d_beta;
            out.d_gamma += alpha * t.d_gamma;
        }
    }
    out.value = out.absolute + alpha * out.pairwise;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::UnitQuaternion;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn pred(p: [f64; 3], logq: [f64; 3]) -> PoseNetworkOutput {
        PoseNetworkOutput::from_raw(Vec3::from(p), Vec3::from(logq)).unwrap()
    }

    fn as_pred(pose: &Pose) -> PoseNetworkOutput {
        PoseNetworkOutput::from_raw(pose.p, pose.log_q().0).unwrap()
    }

    fn target(p: [f64; 3], q: UnitQuaternion) -> Pose {
        Pose::new(Vec3::from(p), q).unwrap()
    }

    #[test]
    fn zero_residual_at_initial_weights() {
        let t = target([1.0, 2.0, 3.0], UnitQuaternion::identity());
        let l = single_image_loss(&as_pred(&t), &t, &LossState::default()).unwrap();
        assert_eq!(l, -3.0);
    }

    #[test]
    fn unit_position_residual() {
        let t = target([0.0, 0.0, 0.0], UnitQuaternion::identity());
        let p = pred([0.5, -0.25, 0.25], [0.0; 3]);
        let l = single_image_loss(&p, &t, &LossState::new(0.0, 0.0)).unwrap();
        assert_eq!(l, 1.0);
    }

    #[test]
    fn hand_derived_case() {
        let x90 = UnitQuaternion::new(FRAC_1_SQRT_2, FRAC_1_SQRT_2, 0.0, 0.0).unwrap();
        let t = target([0.0; 3], x90);
        let p = pred([1.0, 2.0, 3.0], [0.0; 3]);
        let l = single_image_loss(&p, &t, &LossState::default()).unwrap();
        // 6 + 0.7853981 * 20.0855369 - 3 = 18.77514
        assert!((l - 18.77514).abs() < 1e-4, "{l}");
        let script = 6.0 + std::f64::consts::FRAC_PI_4 * 3f64.exp() - 3.0;
        assert!((l - script).abs() < 1e-6);
    }

    #[test]
    fn beta_gradient_examples() {
        let t = target([0.0; 3], UnitQuaternion::identity());
        let exact = pred([0.0; 3], [0.1, 0.0, 0.0]);
        for beta in [-2.0, 0.0, 1.5] {
            let g = loss_grad_beta(&exact, &t, &LossState::new(beta, 0.0)).unwrap();
            assert_eq!(g, 1.0);
        }
        let off = pred([1.0, 0.0, 0.0], [0.0; 3]);
        assert_eq!(
            loss_grad_beta(&off, &t, &LossState::new(0.0, 0.0)).unwrap(),
            0.0
        );
    }

    #[test]
    fn rejects_non_finite() {
        let t = target([0.0; 3], UnitQuaternion::identity());
        let mut p = pred([0.0; 3], [0.0; 3]);
        p.p.x = f64::NAN;
        assert_eq!(
            single_image_loss(&p, &t, &LossState::default()),
            Err(LossError::NonFinite)
        );
    }

    /// Brute-force ordered-pair enumerator.
    fn ordered_pairs(n: usize) -> usize {
        let mut count = 0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    count += 1;
                }
            }
        }
        count
    }

    #[test]
    fn temporal_all_exact() {
        let targets: Vec<Pose> = (0..3)
            .map(|i| target([i as f64, 0.0, 1.0], UnitQuaternion::identity()))
            .collect();
        let preds: Vec<_> = targets.iter().map(as_pred).collect();
        let l = temporal_loss(
            &preds,
            &targets,
            &LossState::default(),
            &TemporalConfig::default(),
        )
        .unwrap();
        let expected = 3.0 * -3.0 + ordered_pairs(3) as f64 * -3.0;
        assert_eq!(ordered_pairs(3), 6);
        assert_eq!(l, expected);
        assert_eq!(l, -27.0);
    }

    #[test]
    fn temporal_length_mismatch() {
        let t = vec![Pose::identity(); 3];
        let p = vec![as_pred(&Pose::identity()); 2];
        assert!(matches!(
            temporal_loss(&p, &t, &LossState::default(), &TemporalConfig::default()),
            Err(LossError::LengthMismatch { .. })
        ));
    }

    fn arb_pred() -> impl Strategy<Value = PoseNetworkOutput> {
        (
            prop::array::uniform3(-5.0f64..5.0),
            prop::array::uniform3(-1.0f64..1.0),
        )
            .prop_map(|(p, l)| pred(p, l))
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (
            prop::array::uniform3(-5.0f64..5.0),
            prop::array::uniform3(-1.0f64..1.0),
        )
            .prop_map(|(p, l)| {
                let q = crate::geometry::quat_exp(&crate::geometry::LogQuaternion(Vec3::from(l)))
                    .unwrap();
                target(p, q)
            })
    }

    fn arb_state() -> impl Strategy<Value = LossState> {
        (-3.0f64..3.0, -4.0f64..2.0).prop_map(|(b, g)| LossState::new(b, g))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn weight_gradients_match_finite_differences(p in arb_pred(), t in arb_pose(), s in arb_state()) {
            let h = 1e-6;
            let f = |s: LossState| single_image_loss(&p, &t, &s).unwrap();
            let nb = (f(LossState::new(s.beta + h, s.gamma)) - f(LossState::new(s.beta - h, s.gamma))) / (2.0 * h);
            let ng = (f(LossState::new(s.beta, s.gamma + h)) - f(LossState::new(s.beta, s.gamma - h))) / (2.0 * h);
            prop_assert!((loss_grad_beta(&p, &t, &s).unwrap() - nb).abs() < 1e-6);
            prop_assert!((loss_grad_gamma(&p, &t, &s).unwrap() - ng).abs() < 1e-6);
            let e = single_image_loss_eval(&p, &t, &s).unwrap();
            prop_assert_eq!(e.d_beta, loss_grad_beta(&p, &t, &s).unwrap());
        }

        #[test]
        fn hemisphere_invariance(
            p in arb_pred(),
            pos in prop::array::uniform3(-5.0f64..5.0),
            raw in prop::array::uniform4(-1.0f64..1.0),
            s in arb_state(),
        ) {
            prop_assume!(raw.iter().map(|x| x * x).sum::<f64>() > 1e-3);
            let q = UnitQuaternion::from_unnormalized(raw[0], raw[1], raw[2], raw[3]).unwrap();
            let t = target(pos, q);
            let flipped = target(pos, -q);
            prop_assert_eq!(single_image_loss(&p, &t, &s).unwrap(), single_image_loss(&p, &flipped, &s).unwrap());
        }

        #[test]
        fn unit_weights_give_plain_l1(p in arb_pred(), t in arb_pose()) {
            let l = single_image_loss(&p, &t, &LossState::new(0.0, 0.0)).unwrap();
            let plain = l1(&(p.p - t.p)) + l1(&(p.logq - t.log_q().0));
            prop_assert_eq!(l, plain);
        }

        #[test]
        fn monotone_in_position_residual(p in arb_pred(), t in arb_pose(), s in arb_state(), extra in 0.01f64..3.0) {
            let base = single_image_loss(&p, &t, &s).unwrap();
            let mut far = p;
            let dir = p.p - t.p;
            far.p.x += if dir.x >= 0.0 { extra } else { -extra };
            prop_assert!(single_image_loss(&far, &t, &s).unwrap() > base);
        }

        #[test]
        fn temporal_reduces_to_single(p in arb_pred(), t in arb_pose(), s in arb_state()) {
            let single = single_image_loss(&p, &t, &s).unwrap();
            let tuple = temporal_loss(&[p], &[t], &s, &TemporalConfig::default()).unwrap();
            prop_assert_eq!(single, tuple);
        }

        #[test]
        fn temporal_alpha_zero_is_sum_of_singles(
            ps in prop::collection::vec(arb_pred(), 3),
            ts in prop::collection::vec(arb_pose(), 3),
            s in arb_state(),
        ) {
            let cfg = TemporalConfig { temporal_alpha: 0.0, ..TemporalConfig::default() };
            let sum: f64 = ps.iter().zip(&ts).map(|(p, t)| single_image_loss(p, t, &s).unwrap()).sum();
            prop_assert_eq!(temporal_loss(&ps, &ts, &s, &cfg).unwrap(), sum);
        }

        #[test]
        fn temporal_reversal_invariant(
            ps in prop::collection::vec(arb_pred(), 3),
            ts in prop::collection::vec(arb_pose(), 3),
            s in arb_state(),
        ) {
            let cfg = TemporalConfig::default();
            let fwd = temporal_loss(&ps, &ts, &s, &cfg).unwrap();
            let rp: Vec<_> = ps.iter().rev().cloned().collect();
            let rt: Vec<_> = ts.iter().rev().cloned().collect();
            let rev = temporal_loss(&rp, &rt, &s, &cfg).unwrap();
            prop_assert!((fwd - rev).abs() < 1e-9);
        }

        #[test]
        fn temporal_prediction_gradients(
            ps in prop::collection::vec(arb_pred(), 3),
            ts in prop::collection::vec(arb_pose(), 3),
            s in arb_state(),
        ) {
            let cfg = TemporalConfig::default();
            let e = temporal_loss_eval(&ps, &ts, &s, &cfg).unwrap();
            let h = 1e-7;
            for k in 0..3 {
                for axis in 0..3 {
                    let mut plus = ps.clone();
                    let mut minus = ps.clone();
                    plus[k].p[axis] += h;
                    minus[k].p[axis] -= h;
                    let n = (temporal_loss(&plus, &ts, &s, &cfg).unwrap()
                        - temporal_loss(&minus, &ts, &s, &cfg).unwrap()) / (2.0 * h);
                    // L1 kinks are measure-zero; tolerance covers rounding only
                    prop_assert!((e.preds[k].p[axis] - n).abs() < 1e-4 * (1.0 + n.abs()));
                }
            }
        }
    }
}
