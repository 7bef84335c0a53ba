//! Closed-form optimum of the KL-regularized expected-advantage objective,
//! the advantage estimators that feed it, and the optimal logit shift.

use crate::dist::{
    check_finite, check_same_len, kl_divergence, log_softmax, softmax_unchecked, AdvantageVector,
    LogitVector, ProbVector,
};
use crate::error::{LcoError, Result};
use crate::objectives::TimestepContext;

/// Default KL coefficient β.
pub const DEFAULT_BETA: f64 = 1.0;

/// The optimal policy and its representative logits for one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalTarget {
    pi_star: ProbVector,
    z_star: LogitVector,
}

impl OptimalTarget {
    /// `z* = z_old + A/β`, `π* = softmax(z*)`.
    pub fn new(z_old: &LogitVector, advantages: &AdvantageVector, beta: f64) -> Result<Self> {
        let z_star = optimal_logits(z_old, advantages, beta)?;
        let pi_star = z_star.softmax();
        Ok(Self { pi_star, z_star })
    }

    pub(crate) fn from_context(ctx: &TimestepContext) -> Self {
        let inv = 1.0 / ctx.beta();
        let z: Vec<f64> = ctx
            .z_old()
            .iter()
            .zip(ctx.advantages().values())
            .map(|(z, a)| z + a * inv)
            .collect();
        let pi_star = ProbVector::new(softmax_unchecked(&z)).expect("softmax of finite logits");
        let z_star = LogitVector::new(z).expect("finite logits plus finite advantages");
        Self { pi_star, z_star }
    }

    pub fn pi_star(&self) -> &ProbVector {
        &self.pi_star
    }

    pub fn z_star(&self) -> &LogitVector {
        &self.z_star
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(LcoError::invalid(format!("beta must be > 0, got {beta}")));
    }
    Ok(())
}

/// `π*(i) ∝ π_old(i) · exp(A_i / β)`, normalized in log space.
pub fn optimal_policy(
    pi_old: &ProbVector,
    advantages: &AdvantageVector,
    beta: f64,
) -> Result<ProbVector> {
    check_same_len(pi_old.len(), advantages.len())?;
    check_beta(beta)?;
    let scores: Vec<f64> = pi_old
        .iter()
        .zip(advantages.values())
        .map(|(&p, &a)| {
            if p > 0.0 {
                p.ln() + a / beta
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    ProbVector::new(softmax_unchecked(&scores))
}

/// `z*_i = z_old,i + A_i / β`.
pub fn optimal_logits(
    z_old: &LogitVector,
    advantages: &AdvantageVector,
    beta: f64,
) -> Result<LogitVector> {
    check_same_len(z_old.len(), advantages.len())?;
    check_beta(beta)?;
    LogitVector::new(
        z_old
            .iter()
            .zip(advantages.values())
            .map(|(z, a)| z + a / beta)
            .collect(),
    )
}

/// `E_π[A] − β · KL(π ‖ π_old)`, the objective `π*` maximizes.
pub fn regularized_objective(
    pi: &ProbVector,
    pi_old: &ProbVector,
    advantages: &AdvantageVector,
    beta: f64,
) -> Result<f64> {
    check_same_len(pi.len(), advantages.len())?;
    let expected: f64 = pi.iter().zip(advantages.values()).map(|(p, a)| p * a).sum();
    Ok(expected - beta * kl_divergence(pi, pi_old)?)
}

/// Inputs of the three advantage estimators.
#[derive(Debug, Clone, PartialEq)]
pub enum AdvantageEstimator {
    /// Advantage known only for the sampled action.
    SparseSampled { action: usize, advantage: f64 },
    /// `A_i = log φ(i|s)` from an external scorer.
    DenseLogprob { log_probs: Vec<f64> },
    /// `A_i = log φ_DPO(i|s) − log φ_ref(i|s)`.
    DenseDpoRatio {
        dpo_log_probs: Vec<f64>,
        ref_log_probs: Vec<f64>,
    },
}

fn check_log_probs(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(LcoError::EstimatorDomain {
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}

pub fn estimate_advantages(
    estimator: &AdvantageEstimator,
    vocab: usize,
) -> Result<AdvantageVector> {
    match estimator {
        AdvantageEstimator::SparseSampled { action, advantage } => {
            AdvantageVector::sparse(vocab, *action, *advantage)
        }
        AdvantageEstimator::DenseLogprob { log_probs } => {
            check_same_len(log_probs.len(), vocab)?;
            check_log_probs(log_probs)?;
            AdvantageVector::dense(log_probs.clone())
        }
        AdvantageEstimator::DenseDpoRatio {
            dpo_log_probs,
            ref_log_probs,
        } => {
            check_same_len(dpo_log_probs.len(), vocab)?;
            check_same_len(ref_log_probs.len(), vocab)?;
            check_log_probs(dpo_log_probs)?;
            check_log_probs(ref_log_probs)?;
            AdvantageVector::dense(
                dpo_log_probs
                    .iter()
                    .zip(ref_log_probs)
                    .map(|(d, r)| d - r)
                    .collect(),
            )
        }
    }
}

/// Converts a probability row into log-probabilities for the dense estimators.
pub fn log_probs_from_probs(p: &[f64]) -> Vec<f64> {
    p.iter().map(|x| x.ln()).collect()
}

/// Log-probabilities of a row of scorer logits.
pub fn log_probs_from_logits(z: &[f64]) -> Result<Vec<f64>> {
    check_finite(z, "scorer logits")?;
    log_softmax(z)
}

/// The constant `C` minimizing `‖A + C·1‖²`, i.e. `−mean(A)`.
pub fn optimal_shift(advantages: &AdvantageVector) -> f64 {
    let n = advantages.len();
    if n == 0 {
        return 0.0;
    }
    -crate::dist::pairwise_sum(advantages.values()) / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{normalize_advantages, softmax, total_variation, Normalization};

    #[test]
    fn zero_advantage_keeps_behavior() {
        let pi_old = ProbVector::new(vec![0.1, 0.6, 0.3]).unwrap();
        let pi = optimal_policy(&pi_old, &AdvantageVector::zeros(3), 1.0).unwrap();
        assert!(total_variation(&pi, &pi_old).unwrap() < 1e-16);
        let z = LogitVector::new(vec![0.5, -1.0, 2.0]).unwrap();
        assert_eq!(
            optimal_logits(&z, &AdvantageVector::zeros(3), 2.0).unwrap(),
            z
        );
    }

    #[test]
    fn huge_beta_limit() {
        let pi_old = ProbVector::new(vec![0.2, 0.3, 0.5]).unwrap();
        let a = AdvantageVector::dense(vec![5.0, -3.0, 1.0]).unwrap();
        let pi = optimal_policy(&pi_old, &a, 1e9).unwrap();
        assert!(total_variation(&pi, &pi_old).unwrap() < 1e-8);
    }

    #[test]
    fn uniform_prior_is_softmax_of_advantage() {
        let pi = optimal_policy(
            &ProbVector::uniform(2).unwrap(),
            &AdvantageVector::dense(vec![1.0, -1.0]).unwrap(),
            1.0,
        )
        .unwrap();
        let expected = softmax(&[1.0, -1.0]).unwrap();
        assert!(total_variation(&pi, &expected).unwrap() < 1e-16);
    }

    #[test]
    fn optimal_logits_direct_substitution() {
        let z = optimal_logits(
            &LogitVector::zeros(2).unwrap(),
            &AdvantageVector::dense(vec![1.0, -1.0]).unwrap(),
            1.0,
        )
        .unwrap();
        assert_eq!(&*z, &[1.0, -1.0]);
    }

    #[test]
    fn large_advantage_over_beta_does_not_overflow() {
        let pi_old = ProbVector::uniform(3).unwrap();
        let a = AdvantageVector::dense(vec![1e4, 0.0, -1e4]).unwrap();
        let pi = optimal_policy(&pi_old, &a, 1e-2).unwrap();
        assert_eq!(&*pi, &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn estimators() {
        let sparse = estimate_advantages(
            &AdvantageEstimator::SparseSampled {
                action: 3,
                advantage: 2.0,
            },
            5,
        )
        .unwrap();
        assert_eq!(sparse.values(), &[0.0, 0.0, 0.0, 2.0, 0.0]);
        assert_eq!(sparse.mask(), Some(&[3usize][..]));

        let lp = vec![-0.5, -1.5, -2.5];
        let dpo = estimate_advantages(
            &AdvantageEstimator::DenseDpoRatio {
                dpo_log_probs: lp.clone(),
                ref_log_probs: lp,
            },
            3,
        )
        .unwrap();
        assert_eq!(dpo.values(), &[0.0; 3]);

        let uni = estimate_advantages(
            &AdvantageEstimator::DenseLogprob {
                log_probs: log_probs_from_probs(&[0.25; 4]),
            },
            4,
        )
        .unwrap();
        assert!(uni.values().iter().all(|&a| (a + 4f64.ln()).abs() < 1e-15));
        let centered = normalize_advantages(&uni, Normalization::Center);
        assert_eq!(centered.values(), &[0.0; 4]);
    }

    #[test]
    fn estimator_domain_error() {
        let bad = AdvantageEstimator::DenseLogprob {
            log_probs: log_probs_from_probs(&[0.5, 0.5, 0.0]),
        };
        assert_eq!(
            estimate_advantages(&bad, 3),
            Err(LcoError::EstimatorDomain {
                index: 2,
                value: f64::NEG_INFINITY
            })
        );
    }

    #[test]
    fn shift_examples() {
        assert_eq!(
            optimal_shift(&AdvantageVector::dense(vec![1.0, -1.0]).unwrap()),
            0.0
        );
        assert_eq!(
            optimal_shift(&AdvantageVector::dense(vec![2.0; 3]).unwrap()),
            -2.0
        );
    }

    #[test]
    fn context_target_matches_free_functions() {
        let z = LogitVector::new(vec![0.3, -0.4, 1.1]).unwrap();
        let a = AdvantageVector::dense(vec![0.5, 0.0, -2.0]).unwrap();
        let ctx = TimestepContext::new(z.clone(), 1, a.clone(), 0.7, 0.2).unwrap();
        let t = ctx.optimal_target();
        assert_eq!(t, OptimalTarget::new(&z, &a, 0.7).unwrap());
        let pi = optimal_policy(&z.softmax(), &a, 0.7).unwrap();
        assert!(total_variation(&pi, t.pi_star()).unwrap() < 1e-15);
    }
}
