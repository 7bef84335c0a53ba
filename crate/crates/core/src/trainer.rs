//! Gradient-descent training of a [`PolicyModel`] on a [`ToyEnvironment`].
//!
//! Each step rolls out episodes under a behavioral snapshot `θ_old`, turns
//! rewards or scorer tables into advantages, evaluates the configured loss at
//! the current parameters and applies `θ ← θ − η ∇_θ L` with
//! `∇_θ L = (1/N) Σ Jᵀ ∇_z L`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::convexity::gradient_norm_bound;
use crate::dist::{
    entropy, normalize_in_place, sample_action, AdvantageVector, LogitVector, Normalization,
};
use crate::error::{LcoError, Result};
use crate::linalg::norm;
use crate::model::{PolicyModel, ToyEnvironment};
use crate::objectives::{
    evaluate, ppo_loss_floor, ObjectiveKind, TimestepContext, DEFAULT_CLIP_EPSILON,
};
use crate::target::{estimate_advantages, AdvantageEstimator, DEFAULT_BETA};

/// Where per-action advantages come from.
#[derive(Debug, Clone, PartialEq)]
pub enum EstimatorSpec {
    /// Reward-to-go of the sampled token; zero elsewhere.
    Sparse,
    /// `A_t = log φ(·|t)`, one row per timestep.
    DenseLogprob { rows: Vec<Vec<f64>> },
    /// `A_t = log φ_DPO(·|t) − log φ_ref(·|t)`.
    DenseDpo {
        dpo_rows: Vec<Vec<f64>>,
        ref_rows: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub objective: ObjectiveKind,
    pub learning_rate: f64,
    pub steps: usize,
    pub beta: f64,
    pub clip_epsilon: f64,
    pub estimator: EstimatorSpec,
    pub normalize: bool,
    pub normalization: Normalization,
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
    /// Steps between refreshes of `θ_old`.
    pub snapshot_interval: usize,
    pub episodes_per_step: usize,
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            objective: ObjectiveKind::LcoKld,
            learning_rate: 0.1,
            steps: 1000,
            beta: DEFAULT_BETA,
            clip_epsilon: DEFAULT_CLIP_EPSILON,
            estimator: EstimatorSpec::Sparse,
            normalize: false,
            normalization: Normalization::Center,
            grad_clip_norm: None,
            seed: 0,
            snapshot_interval: 1,
            episodes_per_step: 1,
            temperature: 0.6,
            top_p: 0.95,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self, env: &ToyEnvironment) -> Result<()> {
        let bad = |msg: String| Err(LcoError::InvalidInput(msg));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            ));
        }
        if self.steps == 0 {
            return bad("steps must be >= 1".into());
        }
        if self.snapshot_interval == 0 {
            return bad("snapshot_interval must be >= 1".into());
        }
        if self.episodes_per_step == 0 {
            return bad("episodes_per_step must be >= 1".into());
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return bad(format!("beta must be > 0, got {}", self.beta));
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad(format!(
                "clip_epsilon must be in (0, 1), got {}",
                self.clip_epsilon
            ));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return bad(format!("grad_clip_norm must be > 0, got {c}"));
            }
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad(format!("top_p must be in (0, 1], got {}", self.top_p));
        }
        let check_rows = |rows: &[Vec<f64>], what: &str| -> Result<()> {
            if rows.len() < env.horizon() {
                return bad(format!(
                    "{what} has {} rows, horizon is {}",
                    rows.len(),
                    env.horizon()
                ));
            }
            if let Some((t, r)) = rows
                .iter()
                .enumerate()
                .find(|(_, r)| r.len() != env.vocab())
            {
                return bad(format!(
                    "{what} row {t} has {} entries, vocabulary is {}",
                    r.len(),
                    env.vocab()
                ));
            }
            Ok(())
        };
        match &self.estimator {
            EstimatorSpec::Sparse => {}
            EstimatorSpec::DenseLogprob { rows } => check_rows(rows, "scorer table")?,
            EstimatorSpec::DenseDpo { dpo_rows, ref_rows } => {
                check_rows(dpo_rows, "DPO table")?;
                check_rows(ref_rows, "reference table")?;
            }
        }
        if self.objective == ObjectiveKind::Sft && env.target().is_none() {
            return bad("SFT needs a target-sequence environment".into());
        }
        Ok(())
    }
}

/// Which way the sampled advantages pointed in a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvantageBucket {
    Positive,
    Negative,
}

impl AdvantageBucket {
    pub fn name(self) -> &'static str {
        match self {
            AdvantageBucket::Positive => "positive",
            AdvantageBucket::Negative => "negative",
        }
    }
}

/// Per-step training diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsRecord {
    pub step: usize,
    pub loss: f64,
    /// `‖∇_θ L‖` before clipping.
    pub grad_norm_param: f64,
    /// Mean `|∂L/∂z_a|` at the sampled action.
    pub grad_sampled_logit: f64,
    /// Mean `|∂L/∂z_i|` over the other actions.
    pub grad_nonsampled_logit: f64,
    /// Mean entropy of `π_θ` at the visited states, in nats.
    pub entropy: f64,
    /// Mean `π_θ(a_t)` of the sampled actions.
    pub sampled_prob: f64,
    pub adv_bucket: AdvantageBucket,
    /// Envelope on `grad_norm_param`; see [`sample_bound`].
    pub bound: Option<f64>,
}

/// One timestep of a rollout: the state and what the behavioral policy saw.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub state: Vec<usize>,
    pub ctx: TimestepContext,
}

/// The frozen data of one step: contexts do not change with `θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub samples: Vec<Sample>,
}

/// Loss and parameter gradient over a rollout, plus per-sample detail.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutEval {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub per_sample: Vec<SampleEval>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleEval {
    pub z: LogitVector,
    pub value: f64,
    pub logit_gradient: Vec<f64>,
}

/// Mean loss `(1/N) Σ L_t(z_θ(s_t))` and its gradient `(1/N) Σ Jᵀ ∇_z L_t`.
pub fn rollout_loss(
    model: &PolicyModel,
    params: &[f64],
    kind: ObjectiveKind,
    rollout: &Rollout,
) -> Result<RolloutEval> {
    if rollout.samples.is_empty() {
        return Err(LcoError::invalid("empty rollout"));
    }
    let probe = model.with_params(params.to_vec())?;
    let n = rollout.samples.len() as f64;
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    let mut per_sample = Vec::with_capacity(rollout.samples.len());
    for s in &rollout.samples {
        let z = probe.forward(&s.state)?;
        let e = evaluate(kind, &s.ctx, &z)?;
        let g = probe.vjp(&s.state, &e.logit_gradient)?;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b / n);
        loss += e.value / n;
        per_sample.push(SampleEval {
            z,
            value: e.value,
            logit_gradient: e.logit_gradient,
        });
    }
    Ok(RolloutEval {
        loss,
        grad,
        per_sample,
    })
}

/// Envelope on one sample's parameter-gradient norm.
///
/// LCO objectives use their gradient-norm bounds. SFT and PPO use the KLD
/// form `σ √(2 (L − L_floor))` with `L_floor` the least attainable value
/// (0 for SFT, the clipped branch for PPO); SFT satisfies it by Pinsker,
/// PPO need not. REINFORCE has none.
pub fn sample_bound(
    kind: ObjectiveKind,
    ctx: &TimestepContext,
    value: f64,
    sigma_max: f64,
) -> Result<Option<f64>> {
    let vocab = ctx.vocab();
    Ok(match kind {
        k if k.is_lco() => Some(gradient_norm_bound(k, value.max(0.0), sigma_max, vocab)?),
        ObjectiveKind::Sft => Some(gradient_norm_bound(
            ObjectiveKind::LcoKld,
            value.max(0.0),
            sigma_max,
            vocab,
        )?),
        ObjectiveKind::Ppo => {
            let excess = (value - ppo_loss_floor(ctx)).max(0.0);
            Some(gradient_norm_bound(
                ObjectiveKind::LcoKld,
                excess,
                sigma_max,
                vocab,
            )?)
        }
        _ => None,
    })
}

pub struct Trainer {
    env: ToyEnvironment,
    config: TrainerConfig,
    model: PolicyModel,
    snapshot: PolicyModel,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(model: PolicyModel, env: ToyEnvironment, config: TrainerConfig) -> Result<Self> {
        config.validate(&env)?;
        if model.vocab() != env.vocab() || model.horizon() != env.horizon() {
            return Err(LcoError::invalid("model shape differs from environment"));
        }
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            snapshot: model.clone(),
            model,
            env,
            config,
            rng,
            step: 0,
        })
    }

    pub fn model(&self) -> &PolicyModel {
        &self.model
    }

    /// The behavioral parameters `θ_old` used by the next rollout.
    pub fn snapshot(&self) -> &PolicyModel {
        &self.snapshot
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn env(&self) -> &ToyEnvironment {
        &self.env
    }

    /// Steps taken so far.
    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Refreshes `θ_old` at the start of each snapshot window.
    fn maybe_refresh(&mut self) {
        if self.step.is_multiple_of(self.config.snapshot_interval) {
            self.snapshot = self.model.clone();
        }
    }

    fn step_advantages(&self, t: usize, action: usize, scalar: f64) -> Result<AdvantageVector> {
        let v = self.env.vocab();
        let est = match &self.config.estimator {
            EstimatorSpec::Sparse => AdvantageEstimator::SparseSampled {
                action,
                advantage: scalar,
            },
            EstimatorSpec::DenseLogprob { rows } => AdvantageEstimator::DenseLogprob {
                log_probs: rows[t].clone(),
            },
            EstimatorSpec::DenseDpo { dpo_rows, ref_rows } => AdvantageEstimator::DenseDpoRatio {
                dpo_log_probs: dpo_rows[t].clone(),
                ref_log_probs: ref_rows[t].clone(),
            },
        };
        let mut a = estimate_advantages(&est, v)?;
        if self.config.normalize && !matches!(self.config.estimator, EstimatorSpec::Sparse) {
            a = crate::dist::normalize_advantages(&a, self.config.normalization);
        }
        Ok(a)
    }

    /// Samples episodes under `θ_old` and freezes their contexts. SFT is
    /// teacher-forced on the environment's target sequence.
    pub fn rollout(&mut self) -> Result<Rollout> {
        self.maybe_refresh();
        let horizon = self.env.horizon();
        let mut episodes = Vec::with_capacity(self.config.episodes_per_step);
        for _ in 0..self.config.episodes_per_step {
            let mut tokens = Vec::with_capacity(horizon);
            let mut z_olds = Vec::with_capacity(horizon);
            for t in 0..horizon {
                let z_old = self.snapshot.forward(&tokens)?;
                let a = match (self.config.objective, self.env.target()) {
                    (ObjectiveKind::Sft, Some(target)) => target[t],
                    _ => sample_action(
                        &z_old.softmax(),
                        self.config.temperature,
                        self.config.top_p,
                        &mut self.rng,
                    )?,
                };
                z_olds.push(z_old);
                tokens.push(a);
            }
            let rewards = self.env.token_rewards(&tokens)?;
            let mut to_go = rewards.clone();
            for t in (0..horizon.saturating_sub(1)).rev() {
                to_go[t] += to_go[t + 1];
            }
            episodes.push((tokens, z_olds, to_go));
        }

        if self.config.normalize && matches!(self.config.estimator, EstimatorSpec::Sparse) {
            let mut all: Vec<f64> = episodes.iter().flat_map(|e| e.2.iter().copied()).collect();
            normalize_in_place(&mut all, self.config.normalization);
            for (e, chunk) in episodes.iter_mut().zip(all.chunks(horizon)) {
                e.2.copy_from_slice(chunk);
            }
        }

        let mut samples = Vec::with_capacity(episodes.len() * horizon);
        for (tokens, z_olds, scalars) in episodes {
            for (t, z_old) in z_olds.into_iter().enumerate() {
                let adv = self.step_advantages(t, tokens[t], scalars[t])?;
                let ctx = TimestepContext::new(
                    z_old,
                    tokens[t],
                    adv,
                    self.config.beta,
                    self.config.clip_epsilon,
                )?;
                samples.push(Sample {
                    state: tokens[..t].to_vec(),
                    ctx,
                });
            }
        }
        Ok(Rollout { samples })
    }

    /// Evaluates the rollout at the current parameters, records diagnostics
    /// and applies the (optionally clipped) gradient step.
    pub fn apply(&mut self, rollout: &Rollout) -> Result<DynamicsRecord> {
        let kind = self.config.objective;
        let eval = rollout_loss(&self.model, self.model.params(), kind, rollout)?;
        let step = self.step + 1;
        let grad_norm = norm(&eval.grad);
        if !grad_norm.is_finite() || !eval.loss.is_finite() {
            let bad = eval.grad.iter().position(|g| !g.is_finite());
            return Err(LcoError::NonFiniteGradient {
                step,
                detail: format!(
                    "loss {}, first non-finite parameter gradient at {:?}",
                    eval.loss, bad
                ),
            });
        }

        let n = rollout.samples.len() as f64;
        let v = self.env.vocab() as f64;
        let (mut sampled_g, mut other_g, mut ent, mut prob, mut adv) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let mut bound = Some(0.0);
        for (s, e) in rollout.samples.iter().zip(&eval.per_sample) {
            let a = s.ctx.sampled_action();
            let pi = e.z.softmax();
            sampled_g += e.logit_gradient[a].abs() / n;
            let rest: f64 = e
                .logit_gradient
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != a)
                .map(|(_, g)| g.abs())
                .sum();
            other_g += rest / (v - 1.0) / n;
            ent += entropy(&pi) / n;
            prob += pi[a] / n;
            adv += s.ctx.sampled_advantage();
            if let Some(acc) = bound {
                let sigma = self.model.jacobian(&s.state)?.sigma_max;
                bound = sample_bound(kind, &s.ctx, e.value, sigma)?.map(|b| acc + b / n);
            }
        }

        let mut update = eval.grad;
        if let Some(c) = self.config.grad_clip_norm {
            if grad_norm > c {
                update.iter_mut().for_each(|g| *g *= c / grad_norm);
            }
        }
        let eta = self.config.learning_rate;
        let params: Vec<f64> = self
            .model
            .params()
            .iter()
            .zip(&update)
            .map(|(p, g)| p - eta * g)
            .collect();
        self.model.set_params(params)?;
        self.step = step;

        Ok(DynamicsRecord {
            step,
            loss: eval.loss,
            grad_norm_param: grad_norm,
            grad_sampled_logit: sampled_g,
            grad_nonsampled_logit: other_g,
            entropy: ent,
            sampled_prob: prob,
            adv_bucket: if adv >= 0.0 {
                AdvantageBucket::Positive
            } else {
                AdvantageBucket::Negative
            },
            bound,
        })
    }

    pub fn train_step(&mut self) -> Result<DynamicsRecord> {
        let rollout = self.rollout()?;
        self.apply(&rollout)
    }

    /// Runs the configured number of steps.
    pub fn run(&mut self) -> Result<Vec<DynamicsRecord>> {
        (0..self.config.steps).map(|_| self.train_step()).collect()
    }
}
