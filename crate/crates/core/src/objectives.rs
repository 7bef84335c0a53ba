//! Per-timestep losses and their analytic gradients with respect to logits.
//!
//! Every `*_eval` returns the scalar loss together with `∂L/∂z`. The LCO
//! losses pull the current logits toward a closed-form target; SFT, PPO and
//! REINFORCE are the baselines they are compared against.

use std::fmt;
use std::str::FromStr;

use crate::dist::{
    check_index, check_same_len, kl_term, log_softmax, pairwise_sum, softmax, AdvantageVector,
    LogitVector, ProbVector,
};
use crate::error::{LcoError, Result};
use crate::target::OptimalTarget;

/// Default PPO clip range.
pub const DEFAULT_CLIP_EPSILON: f64 = 0.2;

/// Behavioral probabilities below this make the PPO ratio meaningless.
pub const MIN_BEHAVIOR_PROB: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ObjectiveKind {
    Sft,
    Ppo,
    Reinforce,
    LcoMse,
    LcoLch,
    LcoKld,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 6] = [
        ObjectiveKind::Sft,
        ObjectiveKind::Ppo,
        ObjectiveKind::Reinforce,
        ObjectiveKind::LcoMse,
        ObjectiveKind::LcoLch,
        ObjectiveKind::LcoKld,
    ];

    pub const LCO: [ObjectiveKind; 3] = [
        ObjectiveKind::LcoMse,
        ObjectiveKind::LcoLch,
        ObjectiveKind::LcoKld,
    ];

    pub fn is_lco(self) -> bool {
        matches!(
            self,
            ObjectiveKind::LcoMse | ObjectiveKind::LcoLch | ObjectiveKind::LcoKld
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Sft => "SFT",
            ObjectiveKind::Ppo => "PPO",
            ObjectiveKind::Reinforce => "REINFORCE",
            ObjectiveKind::LcoMse => "LCO_MSE",
            ObjectiveKind::LcoLch => "LCO_LCH",
            ObjectiveKind::LcoKld => "LCO_KLD",
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectiveKind {
    type Err = LcoError;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        ObjectiveKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| LcoError::invalid(format!("unknown objective {s:?}")))
    }
}

/// A loss value and its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub value: f64,
    pub logit_gradient: Vec<f64>,
}

impl LossEval {
    fn zero(len: usize, value: f64) -> Self {
        Self {
            value,
            logit_gradient: vec![0.0; len],
        }
    }
}

/// Everything a per-timestep loss needs from the behavioral snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepContext {
    z_old: LogitVector,
    pi_old: ProbVector,
    sampled_action: usize,
    advantages: AdvantageVector,
    beta: f64,
    clip_epsilon: f64,
}

impl TimestepContext {
    pub fn new(
        z_old: LogitVector,
        sampled_action: usize,
        advantages: AdvantageVector,
        beta: f64,
        clip_epsilon: f64,
    ) -> Result<Self> {
        check_index(sampled_action, z_old.len())?;
        check_same_len(advantages.len(), z_old.len())?;
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(LcoError::invalid(format!("beta must be > 0, got {beta}")));
        }
        if !(clip_epsilon > 0.0 && clip_epsilon < 1.0) {
            return Err(LcoError::invalid(format!(
                "clip epsilon must be in (0, 1), got {clip_epsilon}"
            )));
        }
        let pi_old = z_old.softmax();
        Ok(Self {
            z_old,
            pi_old,
            sampled_action,
            advantages,
            beta,
            clip_epsilon,
        })
    }

    pub fn z_old(&self) -> &LogitVector {
        &self.z_old
    }

    pub fn pi_old(&self) -> &ProbVector {
        &self.pi_old
    }

    pub fn sampled_action(&self) -> usize {
        self.sampled_action
    }

    pub fn advantages(&self) -> &AdvantageVector {
        &self.advantages
    }

    /// Advantage of the sampled action.
    pub fn sampled_advantage(&self) -> f64 {
        self.advantages.get(self.sampled_action)
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn clip_epsilon(&self) -> f64 {
        self.clip_epsilon
    }

    pub fn vocab(&self) -> usize {
        self.z_old.len()
    }

    /// The closed-form target `(π*, z*)` implied by this snapshot.
    pub fn optimal_target(&self) -> OptimalTarget {
        OptimalTarget::from_context(self)
    }
}

fn check_logits(z: &[f64], vocab: usize) -> Result<()> {
    check_same_len(z.len(), vocab)?;
    crate::dist::check_finite(z, "logits")
}

/// Negative log-likelihood of `target`; gradient `π − e_target`.
pub fn sft_eval(z: &[f64], target: usize) -> Result<LossEval> {
    check_index(target, z.len())?;
    let log_pi = log_softmax(z)?;
    let mut grad: Vec<f64> = log_pi.iter().map(|l| l.exp()).collect();
    grad[target] -= 1.0;
    Ok(LossEval {
        value: -log_pi[target],
        logit_gradient: grad,
    })
}

/// Probability ratio `π_θ(a) / π_old(a)` of the sampled action.
pub fn ppo_ratio(ctx: &TimestepContext, z: &[f64]) -> Result<f64> {
    check_logits(z, ctx.vocab())?;
    let a = ctx.sampled_action;
    let p_old = ctx.pi_old[a];
    if p_old < MIN_BEHAVIOR_PROB {
        return Err(LcoError::DegenerateRatio { pi_old: p_old });
    }
    let log_p = log_softmax(z)?[a];
    let log_p_old = log_softmax(&ctx.z_old)?[a];
    Ok((log_p - log_p_old).exp())
}

fn is_active(advantage: f64, ratio: f64, eps: f64) -> bool {
    (advantage > 0.0 && ratio < 1.0 + eps) || (advantage < 0.0 && ratio > 1.0 - eps)
}

/// Whether the clipped surrogate has a non-zero gradient at `z`.
pub fn ppo_active(ctx: &TimestepContext, z: &[f64]) -> Result<bool> {
    let r = ppo_ratio(ctx, z)?;
    Ok(is_active(ctx.sampled_advantage(), r, ctx.clip_epsilon))
}

/// Clipped surrogate `−min(r·A, clip(r, 1−ε, 1+ε)·A)` for the sampled action.
///
/// In the clipped region the value is the constant clipped branch and the
/// gradient is exactly zero.
pub fn ppo_eval(ctx: &TimestepContext, z: &[f64]) -> Result<LossEval> {
    let r = ppo_ratio(ctx, z)?;
    let adv = ctx.sampled_advantage();
    let eps = ctx.clip_epsilon;
    let clipped = r.clamp(1.0 - eps, 1.0 + eps);
    let value = -(r * adv).min(clipped * adv);
    if !is_active(adv, r, eps) {
        return Ok(LossEval::zero(z.len(), value));
    }
    let a = ctx.sampled_action;
    let pi = softmax(z)?;
    let scale = adv / ctx.pi_old[a] * pi[a];
    let grad = pi
        .iter()
        .enumerate()
        .map(|(i, &p)| scale * (p - if i == a { 1.0 } else { 0.0 }))
        .collect();
    Ok(LossEval {
        value,
        logit_gradient: grad,
    })
}

/// The unclipped surrogate `−r·A`, smooth everywhere; used by the gradient
/// and curvature oracles.
pub fn ppo_unclipped_value(ctx: &TimestepContext, z: &[f64]) -> Result<f64> {
    Ok(-ppo_ratio(ctx, z)? * ctx.sampled_advantage())
}

/// Lowest value the clipped surrogate can reach for this context.
pub fn ppo_loss_floor(ctx: &TimestepContext) -> f64 {
    let adv = ctx.sampled_advantage();
    let eps = ctx.clip_epsilon;
    if adv > 0.0 {
        -adv * (1.0 + eps)
    } else if adv < 0.0 {
        -adv * (1.0 - eps)
    } else {
        0.0
    }
}

/// `−A · log π_θ(a)`.
pub fn reinforce_eval(ctx: &TimestepContext, z: &[f64]) -> Result<LossEval> {
    check_logits(z, ctx.vocab())?;
    let adv = ctx.sampled_advantage();
    let mut out = sft_eval(z, ctx.sampled_action)?;
    out.value *= adv;
    out.logit_gradient.iter_mut().for_each(|g| *g *= adv);
    Ok(out)
}

/// `(1/|V|) Σ (z − z*)²`.
pub fn lco_mse_eval(z: &[f64], z_star: &[f64]) -> Result<LossEval> {
    check_same_len(z.len(), z_star.len())?;
    let n = z.len() as f64;
    let diff: Vec<f64> = z.iter().zip(z_star).map(|(a, b)| a - b).collect();
    let value = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let grad = diff.iter().map(|d| 2.0 * d / n).collect();
    Ok(LossEval {
        value,
        logit_gradient: grad,
    })
}

/// `log cosh x` without overflow: `|x| + ln(1 + e^{−2|x|}) − ln 2`.
pub fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        // cosh x = 1 + 2 sinh²(x/2); no cancellation for small residuals
        let s = (0.5 * a).sinh();
        return (2.0 * s * s).ln_1p();
    }
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// `(1/|V|) Σ log cosh(z − z*)`.
pub fn lco_lch_eval(z: &[f64], z_star: &[f64]) -> Result<LossEval> {
    check_same_len(z.len(), z_star.len())?;
    let n = z.len() as f64;
    let diff: Vec<f64> = z.iter().zip(z_star).map(|(a, b)| a - b).collect();
    let value = diff.iter().map(|&d| log_cosh(d)).sum::<f64>() / n;
    let grad = diff.iter().map(|d| d.tanh() / n).collect();
    Ok(LossEval {
        value,
        logit_gradient: grad,
    })
}

/// Forward KL `KL(π* ‖ softmax(z))`; gradient `softmax(z) − π*`.
pub fn lco_kld_eval(z: &[f64], pi_star: &ProbVector) -> Result<LossEval> {
    check_same_len(z.len(), pi_star.len())?;
    let log_pi = log_softmax(z)?;
    let pi: Vec<f64> = log_pi.iter().map(|l| l.exp()).collect();
    let value = pi_star
        .iter()
        .zip(&pi)
        .zip(&log_pi)
        .map(|((&ps, &q), &lq)| {
            if q > 0.0 {
                kl_term(ps, q)
            } else {
                ps * (ps.ln() - lq) - ps
            }
        })
        .sum();
    let grad = pi
        .iter()
        .zip(pi_star.iter())
        .map(|(q, ps)| q - ps)
        .collect();
    Ok(LossEval {
        value,
        logit_gradient: grad,
    })
}

/// Dispatches to the per-objective evaluator. SFT treats the sampled action
/// as its target; LCO objectives use the snapshot's closed-form target.
pub fn evaluate(kind: ObjectiveKind, ctx: &TimestepContext, z: &[f64]) -> Result<LossEval> {
    match kind {
        ObjectiveKind::Sft => {
            check_logits(z, ctx.vocab())?;
            sft_eval(z, ctx.sampled_action)
        }
        ObjectiveKind::Ppo => ppo_eval(ctx, z),
        ObjectiveKind::Reinforce => reinforce_eval(ctx, z),
        ObjectiveKind::LcoMse | ObjectiveKind::LcoLch | ObjectiveKind::LcoKld => {
            evaluate_with_target(kind, &ctx.optimal_target(), z)
        }
    }
}

/// LCO losses against an explicit target.
pub fn evaluate_with_target(
    kind: ObjectiveKind,
    target: &OptimalTarget,
    z: &[f64],
) -> Result<LossEval> {
    match kind {
        ObjectiveKind::LcoMse => lco_mse_eval(z, target.z_star()),
        ObjectiveKind::LcoLch => lco_lch_eval(z, target.z_star()),
        ObjectiveKind::LcoKld => lco_kld_eval(z, target.pi_star()),
        other => Err(LcoError::invalid(format!(
            "{other} does not fit a closed-form target"
        ))),
    }
}

/// Mean loss over a batch of timesteps, plus the per-timestep evaluations.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEval {
    pub value: f64,
    pub per_timestep: Vec<LossEval>,
}

/// Uniformly weighted empirical mean over `(context, logits)` pairs.
pub fn batch_eval(
    kind: ObjectiveKind,
    items: &[(TimestepContext, LogitVector)],
) -> Result<BatchEval> {
    if items.is_empty() {
        return Err(LcoError::invalid("empty batch"));
    }
    let per_timestep = items
        .iter()
        .map(|(ctx, z)| evaluate(kind, ctx, z))
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<f64> = per_timestep.iter().map(|e| e.value).collect();
    let value = pairwise_sum(&values) / items.len() as f64;
    Ok(BatchEval {
        value,
        per_timestep,
    })
}

/// `Σ g`: the softmax-family gradients must vanish on the all-ones direction.
pub fn gradient_mass(grad: &[f64]) -> f64 {
    grad.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(z_old: Vec<f64>, a: usize, adv: Vec<f64>) -> TimestepContext {
        TimestepContext::new(
            LogitVector::new(z_old).unwrap(),
            a,
            AdvantageVector::dense(adv).unwrap(),
            1.0,
            DEFAULT_CLIP_EPSILON,
        )
        .unwrap()
    }

    /// Logits whose softmax puts `p` on action 0 of a two-action vocabulary.
    fn logits_for(p: f64) -> Vec<f64> {
        vec![(p / (1.0 - p)).ln(), 0.0]
    }

    #[test]
    fn sft_symmetric_point() {
        let e = sft_eval(&[0.0, 0.0], 0).unwrap();
        assert!((e.value - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(e.logit_gradient, vec![-0.5, 0.5]);
    }

    #[test]
    fn sft_at_optimum() {
        let e = sft_eval(&[800.0, 0.0, -5.0], 0).unwrap();
        assert_eq!(e.value, 0.0);
        assert!(e.logit_gradient.iter().all(|g| g.abs() < 1e-300));
    }

    #[test]
    fn ppo_gate_cases() {
        let eps = DEFAULT_CLIP_EPSILON;
        let pos = ctx(logits_for(0.4), 0, vec![1.0, 0.0]);
        assert!(ppo_active(&pos, &logits_for(0.4)).unwrap());
        let over = 0.4 * (1.0 + eps + 0.01);
        assert!(!ppo_active(&pos, &logits_for(over)).unwrap());

        let neg = ctx(logits_for(0.4), 0, vec![-1.0, 0.0]);
        let under = 0.4 * (1.0 - eps - 0.01);
        assert!(!ppo_active(&neg, &logits_for(under)).unwrap());
        assert!(ppo_active(&neg, &logits_for(0.4)).unwrap());

        let zero = ctx(vec![0.0, 0.0], 0, vec![0.0, 0.0]);
        assert!(!ppo_active(&zero, &[0.0, 0.0]).unwrap());
    }

    #[test]
    fn ppo_hand_substituted_gradient() {
        let c = ctx(vec![0.0, 0.0], 0, vec![-1.0, 0.0]);
        let e = ppo_eval(&c, &[0.0, 0.0]).unwrap();
        assert_eq!(e.logit_gradient, vec![0.5, -0.5]);
        assert_eq!(e.value, 1.0);
    }

    #[test]
    fn ppo_zero_advantage() {
        let c = ctx(vec![0.3, -0.2], 1, vec![0.0, 0.0]);
        let e = ppo_eval(&c, &[0.1, 0.4]).unwrap();
        assert_eq!(e.value, 0.0);
        assert_eq!(e.logit_gradient, vec![0.0, 0.0]);
    }

    #[test]
    fn ppo_clipped_reports_clip_branch() {
        let c = ctx(logits_for(0.5), 0, vec![1.0, 0.0]);
        let e = ppo_eval(&c, &logits_for(0.9)).unwrap();
        assert!((e.value + 1.2).abs() < 1e-15);
        assert_eq!(e.logit_gradient, vec![0.0, 0.0]);
    }

    #[test]
    fn ppo_degenerate_ratio() {
        let c = ctx(vec![0.0, 800.0], 0, vec![1.0, 0.0]);
        assert!(matches!(
            ppo_eval(&c, &[0.0, 0.0]),
            Err(LcoError::DegenerateRatio { .. })
        ));
    }

    #[test]
    fn reinforce_reductions() {
        let c0 = ctx(vec![0.2, -0.1, 0.4], 2, vec![0.0, 0.0, 0.0]);
        let e = reinforce_eval(&c0, &[1.0, 0.0, -1.0]).unwrap();
        assert_eq!(e.value, 0.0);
        assert!(e.logit_gradient.iter().all(|&g| g == 0.0));

        let c1 = ctx(vec![0.2, -0.1, 0.4], 2, vec![0.0, 0.0, 1.0]);
        let z = [1.0, 0.0, -1.0];
        assert_eq!(reinforce_eval(&c1, &z).unwrap(), sft_eval(&z, 2).unwrap());
    }

    #[test]
    fn mse_examples() {
        let e = lco_mse_eval(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((e.value, e.logit_gradient), (0.0, vec![0.0, 0.0]));
        let e = lco_mse_eval(&[1.0, 0.0, 0.0, 0.0], &[0.0; 4]).unwrap();
        assert_eq!(e.value, 0.25);
        assert_eq!(e.logit_gradient, vec![0.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn lch_examples() {
        let e = lco_lch_eval(&[0.3, -0.7], &[0.3, -0.7]).unwrap();
        assert_eq!((e.value, e.logit_gradient), (0.0, vec![0.0, 0.0]));
        // residual far beyond exp overflow
        let e = lco_lch_eval(&[1e4, 0.0], &[0.0, 0.0]).unwrap();
        assert!(e.value.is_finite());
        assert!((e.value - (1e4 - std::f64::consts::LN_2) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn log_cosh_branches_agree() {
        for x in [1e-4f64, 1.0001e-4, -1e-4, 3e-7] {
            let x2 = x * x;
            let series = x2 / 2.0 - x2 * x2 / 12.0 + x2 * x2 * x2 / 45.0;
            assert!((log_cosh(x) / series - 1.0).abs() < 1e-15);
        }
        // both sides of the branch switch
        for x in [1.0 - 1e-12, 1.0f64] {
            assert!((log_cosh(x) - x.cosh().ln()).abs() < 1e-15);
        }
        assert_eq!(log_cosh(0.0), 0.0);
    }

    #[test]
    fn kld_examples() {
        let pi_star = ProbVector::uniform(2).unwrap();
        let e = lco_kld_eval(&[3f64.ln(), 0.0], &pi_star).unwrap();
        assert!((e.logit_gradient[0] - 0.25).abs() < 1e-15);
        assert!((e.logit_gradient[1] + 0.25).abs() < 1e-15);
        let z = [0.4, -1.2, 2.0];
        let e = lco_kld_eval(&z, &softmax(&z).unwrap()).unwrap();
        assert!(e.value.abs() < 1e-15);
        assert!(e.logit_gradient.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn batch_mean() {
        let c = ctx(vec![0.0, 1.0, -1.0], 1, vec![0.5, 1.0, -0.2]);
        let z = LogitVector::new(vec![0.3, 0.1, -0.4]).unwrap();
        let single = evaluate(ObjectiveKind::LcoKld, &c, &z).unwrap();
        let one = batch_eval(ObjectiveKind::LcoKld, &[(c.clone(), z.clone())]).unwrap();
        assert_eq!(one.value, single.value);
        let two = batch_eval(ObjectiveKind::LcoKld, &[(c.clone(), z.clone()), (c, z)]).unwrap();
        assert_eq!(two.value, single.value);
        assert!(batch_eval(ObjectiveKind::Sft, &[]).is_err());
    }

    #[test]
    fn kind_round_trip() {
        for k in ObjectiveKind::ALL {
            assert_eq!(k.name().parse::<ObjectiveKind>().unwrap(), k);
        }
        assert_eq!(
            "lco-kld".parse::<ObjectiveKind>().unwrap(),
            ObjectiveKind::LcoKld
        );
        assert!("GRPO".parse::<ObjectiveKind>().is_err());
    }

    #[test]
    fn context_validation() {
        let z = LogitVector::new(vec![0.0, 0.0]).unwrap();
        let a = AdvantageVector::zeros(2);
        assert!(TimestepContext::new(z.clone(), 2, a.clone(), 1.0, 0.2).is_err());
        assert!(TimestepContext::new(z.clone(), 0, a.clone(), 0.0, 0.2).is_err());
        assert!(TimestepContext::new(z.clone(), 0, a.clone(), 1.0, 1.0).is_err());
        assert!(TimestepContext::new(z, 0, AdvantageVector::zeros(3), 1.0, 0.2).is_err());
    }
}
