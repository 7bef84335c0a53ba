//! Softmax policy families over token-prefix states, their parameter
//! Jacobians, and the toy generation environments they are trained on.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dist::{check_finite, LogitVector};
use crate::error::{LcoError, Result};
use crate::linalg::{norm, power_iteration, Matrix};

pub const MAX_VOCAB: usize = 64;
pub const MAX_HORIZON: usize = 16;
/// Upper limit on tabular parameter count (states × vocabulary).
pub const MAX_TABULAR_PARAMS: usize = 1 << 20;
pub const DEFAULT_MLP_WIDTH: usize = 16;
pub const DEFAULT_MLP_INIT_SCALE: f64 = 0.1;

/// How episodes are scored.
#[derive(Debug, Clone, PartialEq)]
pub enum RewardRule {
    /// Verifier-style: `+1` when the whole sequence equals `target`, `−1` otherwise.
    TargetMatch { target: Vec<usize> },
    /// Per-token reward `rows[t][a_t]`.
    ScorerTable { rows: Vec<Vec<f64>> },
}

/// Autoregressive generation over a small vocabulary with a fixed horizon.
/// The state at step `t` is the prefix of the first `t` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEnvironment {
    vocab: usize,
    horizon: usize,
    reward: RewardRule,
}

impl ToyEnvironment {
    pub fn new(vocab: usize, horizon: usize, reward: RewardRule) -> Result<Self> {
        if !(2..=MAX_VOCAB).contains(&vocab) {
            return Err(LcoError::invalid(format!(
                "vocabulary size must be in 2..={MAX_VOCAB}, got {vocab}"
            )));
        }
        if !(1..=MAX_HORIZON).contains(&horizon) {
            return Err(LcoError::invalid(format!(
                "horizon must be in 1..={MAX_HORIZON}, got {horizon}"
            )));
        }
        match &reward {
            RewardRule::TargetMatch { target } => {
                if target.len() != horizon {
                    return Err(LcoError::invalid(format!(
                        "target sequence has {} tokens, horizon is {horizon}",
                        target.len()
                    )));
                }
                if let Some(&t) = target.iter().find(|&&t| t >= vocab) {
                    return Err(LcoError::invalid(format!(
                        "target token {t} outside vocabulary"
                    )));
                }
            }
            RewardRule::ScorerTable { rows } => {
                if rows.len() < horizon {
                    return Err(LcoError::invalid(format!(
                        "scorer table has {} rows, horizon is {horizon}",
                        rows.len()
                    )));
                }
                for (t, row) in rows.iter().enumerate() {
                    if row.len() != vocab {
                        return Err(LcoError::invalid(format!(
                            "scorer row {t} has {} entries",
                            row.len()
                        )));
                    }
                    check_finite(row, "scorer rewards")?;
                }
            }
        }
        Ok(Self {
            vocab,
            horizon,
            reward,
        })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn reward_rule(&self) -> &RewardRule {
        &self.reward
    }

    pub fn target(&self) -> Option<&[usize]> {
        match &self.reward {
            RewardRule::TargetMatch { target } => Some(target),
            RewardRule::ScorerTable { .. } => None,
        }
    }

    /// Reward received after each token of a complete episode.
    pub fn token_rewards(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        if tokens.len() != self.horizon {
            return Err(LcoError::invalid("episode length differs from horizon"));
        }
        Ok(match &self.reward {
            RewardRule::TargetMatch { target } => {
                let mut r = vec![0.0; self.horizon];
                r[self.horizon - 1] = if tokens == target.as_slice() {
                    1.0
                } else {
                    -1.0
                };
                r
            }
            RewardRule::ScorerTable { rows } => tokens
                .iter()
                .enumerate()
                .map(|(t, &a)| rows[t][a])
                .collect(),
        })
    }

    pub fn check_state(&self, state: &[usize]) -> Result<()> {
        if state.len() >= self.horizon || state.iter().any(|&a| a >= self.vocab) {
            return Err(LcoError::InvalidState(state.to_vec()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelFamily {
    /// One free logit row per prefix state.
    Tabular,
    /// `z = W φ(s)` with fixed state features.
    Linear,
    /// `z = W₂ tanh(W₁ φ(s) + b₁) + b₂`.
    Mlp1 { width: usize },
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelFamily::Tabular => write!(f, "TABULAR"),
            ModelFamily::Linear => write!(f, "LINEAR"),
            ModelFamily::Mlp1 { width } => write!(f, "MLP1 width={width}"),
        }
    }
}

impl FromStr for ModelFamily {
    type Err = LcoError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "TABULAR" => Ok(ModelFamily::Tabular),
            "LINEAR" => Ok(ModelFamily::Linear),
            "MLP1" => Ok(ModelFamily::Mlp1 {
                width: DEFAULT_MLP_WIDTH,
            }),
            other => Err(LcoError::invalid(format!("unknown model family {other:?}"))),
        }
    }
}

/// Parameter initialization.
#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    Zeros,
    /// Independent draws from `U[−scale, scale]`.
    Uniform {
        scale: f64,
    },
}

/// `∂z/∂θ` at one state and its largest singular value.
#[derive(Debug, Clone)]
pub struct JacobianInfo {
    /// `|V| × |θ|`.
    pub j: Matrix,
    pub sigma_max: f64,
}

impl JacobianInfo {
    pub fn new(j: Matrix) -> Result<Self> {
        let sigma_max = power_iteration(&j.gram_rows())?.max(0.0).sqrt();
        Ok(Self { j, sigma_max })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    family: ModelFamily,
    vocab: usize,
    horizon: usize,
    params: Vec<f64>,
}

fn tabular_state_count(vocab: usize, horizon: usize) -> Option<usize> {
    let mut total: usize = 0;
    let mut level: usize = 1;
    for _ in 0..horizon {
        total = total.checked_add(level)?;
        level = level.checked_mul(vocab)?;
    }
    Some(total)
}

impl PolicyModel {
    pub fn new(
        family: ModelFamily,
        vocab: usize,
        horizon: usize,
        init: &Init,
        seed: u64,
    ) -> Result<Self> {
        if !(2..=MAX_VOCAB).contains(&vocab) || !(1..=MAX_HORIZON).contains(&horizon) {
            return Err(LcoError::invalid(format!(
                "unsupported shape: vocab {vocab}, horizon {horizon}"
            )));
        }
        if let ModelFamily::Mlp1 { width } = family {
            if width == 0 {
                return Err(LcoError::invalid("MLP width must be >= 1"));
            }
        }
        let count = Self::param_count_for(family, vocab, horizon)?;
        let params = match init {
            Init::Zeros => vec![0.0; count],
            Init::Uniform { scale } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..count)
                    .map(|_| scale * rng.random_range(-1.0..=1.0))
                    .collect()
            }
        };
        Ok(Self {
            family,
            vocab,
            horizon,
            params,
        })
    }

    pub fn for_env(
        family: ModelFamily,
        env: &ToyEnvironment,
        init: &Init,
        seed: u64,
    ) -> Result<Self> {
        Self::new(family, env.vocab(), env.horizon(), init, seed)
    }

    pub fn param_count_for(family: ModelFamily, vocab: usize, horizon: usize) -> Result<usize> {
        let d = feature_dim(vocab, horizon);
        Ok(match family {
            ModelFamily::Tabular => {
                let params = tabular_state_count(vocab, horizon)
                    .and_then(|s| s.checked_mul(vocab))
                    .filter(|&p| p <= MAX_TABULAR_PARAMS)
                    .ok_or_else(|| {
                        LcoError::invalid(format!(
                            "tabular model for vocab {vocab}, horizon {horizon} exceeds {MAX_TABULAR_PARAMS} parameters"
                        ))
                    })?;
                params
            }
            ModelFamily::Linear => vocab * d,
            ModelFamily::Mlp1 { width } => width * d + width + vocab * width + vocab,
        })
    }

    pub fn family(&self) -> ModelFamily {
        self.family
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(LcoError::invalid(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        check_finite(&params, "parameters")?;
        self.params = params;
        Ok(())
    }

    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        let mut m = self.clone();
        m.set_params(params)?;
        Ok(m)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Adds `logits` to the output at every state: the tabular rows, the
    /// linear bias column, or the MLP output bias.
    pub fn add_output_bias(&mut self, logits: &[f64]) -> Result<()> {
        if logits.len() != self.vocab {
            return Err(LcoError::invalid("bias length differs from vocabulary"));
        }
        let v = self.vocab;
        match self.family {
            ModelFamily::Tabular => {
                for row in self.params.chunks_mut(v) {
                    row.iter_mut().zip(logits).for_each(|(p, b)| *p += b);
                }
            }
            ModelFamily::Linear => {
                let d = feature_dim(self.vocab, self.horizon);
                for (a, b) in logits.iter().enumerate() {
                    self.params[a * d] += b;
                }
            }
            ModelFamily::Mlp1 { .. } => {
                let start = self.params.len() - v;
                self.params[start..]
                    .iter_mut()
                    .zip(logits)
                    .for_each(|(p, b)| *p += b);
            }
        }
        Ok(())
    }

    fn check_state(&self, state: &[usize]) -> Result<()> {
        if state.len() >= self.horizon || state.iter().any(|&a| a >= self.vocab) {
            return Err(LcoError::InvalidState(state.to_vec()));
        }
        Ok(())
    }

    /// Row index of a prefix in the tabular layout.
    pub fn state_index(&self, state: &[usize]) -> Result<usize> {
        self.check_state(state)?;
        let offset = tabular_state_count(self.vocab, state.len()).unwrap_or(0);
        let local = state.iter().fold(0usize, |acc, &a| acc * self.vocab + a);
        Ok(offset + local)
    }

    /// State features: bias, one-hot position, one-hot previous token.
    pub fn features(&self, state: &[usize]) -> Result<Vec<f64>> {
        self.check_state(state)?;
        Ok(features(self.vocab, self.horizon, state))
    }

    pub fn forward(&self, state: &[usize]) -> Result<LogitVector> {
        self.forward_with(&self.params, state)
    }

    /// Logits under an arbitrary parameter vector of the right length.
    pub fn forward_with(&self, params: &[f64], state: &[usize]) -> Result<LogitVector> {
        if params.len() != self.params.len() {
            return Err(LcoError::invalid("parameter vector length mismatch"));
        }
        self.check_state(state)?;
        let v = self.vocab;
        let z = match self.family {
            ModelFamily::Tabular => {
                let row = self.state_index(state)?;
                params[row * v..(row + 1) * v].to_vec()
            }
            ModelFamily::Linear => {
                let phi = features(v, self.horizon, state);
                let d = phi.len();
                (0..v)
                    .map(|a| crate::linalg::dot(&params[a * d..(a + 1) * d], &phi))
                    .collect()
            }
            ModelFamily::Mlp1 { width } => {
                let phi = features(v, self.horizon, state);
                let layout = MlpLayout::new(width, phi.len(), v);
                let h = layout.hidden(params, &phi);
                layout.output(params, &h)
            }
        };
        LogitVector::new(z)
    }

    /// `Jᵀ g` for a logit-space vector `g`, without forming `J`.
    pub fn vjp(&self, state: &[usize], g: &[f64]) -> Result<Vec<f64>> {
        if g.len() != self.vocab {
            return Err(LcoError::invalid(
                "cotangent length differs from vocabulary",
            ));
        }
        self.check_state(state)?;
        let v = self.vocab;
        let mut out = vec![0.0; self.params.len()];
        match self.family {
            ModelFamily::Tabular => {
                let row = self.state_index(state)?;
                out[row * v..(row + 1) * v].copy_from_slice(g);
            }
            ModelFamily::Linear => {
                let phi = features(v, self.horizon, state);
                let d = phi.len();
                for a in 0..v {
                    for (o, f) in out[a * d..(a + 1) * d].iter_mut().zip(&phi) {
                        *o = g[a] * f;
                    }
                }
            }
            ModelFamily::Mlp1 { width } => {
                let phi = features(v, self.horizon, state);
                let layout = MlpLayout::new(width, phi.len(), v);
                layout.backward(&self.params, &phi, g, &mut out);
            }
        }
        Ok(out)
    }

    pub fn jacobian(&self, state: &[usize]) -> Result<JacobianInfo> {
        self.jacobian_with(&self.params, state)
    }

    /// Dense `|V| × |θ|` Jacobian; row `a` is `∂z_a/∂θ`.
    pub fn jacobian_with(&self, params: &[f64], state: &[usize]) -> Result<JacobianInfo> {
        let probe = self.with_params(params.to_vec())?;
        let v = self.vocab;
        let mut rows = Vec::with_capacity(v);
        let mut e = vec![0.0; v];
        for a in 0..v {
            e[a] = 1.0;
            rows.push(probe.vjp(state, &e)?);
            e[a] = 0.0;
        }
        JacobianInfo::new(Matrix::from_rows(&rows)?)
    }

    /// Relative error of the first-order expansion of the logits from
    /// `theta` to `theta_star`.
    pub fn linearization_residual(
        &self,
        theta: &[f64],
        theta_star: &[f64],
        state: &[usize],
    ) -> Result<f64> {
        let z = self.forward_with(theta, state)?;
        let z_star = self.forward_with(theta_star, state)?;
        let jac = self.jacobian_with(theta, state)?;
        let delta: Vec<f64> = theta_star.iter().zip(theta).map(|(a, b)| a - b).collect();
        let predicted = jac.j.matvec(&delta);
        let actual: Vec<f64> = z_star.iter().zip(z.iter()).map(|(a, b)| a - b).collect();
        let resid: Vec<f64> = actual.iter().zip(&predicted).map(|(a, p)| a - p).collect();
        Ok(norm(&resid) / norm(&actual).max(1e-12))
    }

    /// Every prefix state in tabular order.
    pub fn states(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new()];
        let mut frontier = vec![Vec::new()];
        for _ in 1..self.horizon {
            let mut next = Vec::new();
            for s in &frontier {
                for a in 0..self.vocab {
                    let mut t: Vec<usize> = s.clone();
                    t.push(a);
                    next.push(t);
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }
}

pub fn feature_dim(vocab: usize, horizon: usize) -> usize {
    1 + horizon + vocab
}

fn features(vocab: usize, horizon: usize, state: &[usize]) -> Vec<f64> {
    let mut phi = vec![0.0; feature_dim(vocab, horizon)];
    phi[0] = 1.0;
    phi[1 + state.len()] = 1.0;
    if let Some(&last) = state.last() {
        phi[1 + horizon + last] = 1.0;
    }
    phi
}

/// Offsets of the MLP weights inside the flat parameter vector:
/// `W₁ (width × d) | b₁ (width) | W₂ (|V| × width) | b₂ (|V|)`.
struct MlpLayout {
    width: usize,
    d: usize,
    vocab: usize,
}

impl MlpLayout {
    fn new(width: usize, d: usize, vocab: usize) -> Self {
        Self { width, d, vocab }
    }

    fn b1(&self) -> usize {
        self.width * self.d
    }

    fn w2(&self) -> usize {
        self.b1() + self.width
    }

    fn b2(&self) -> usize {
        self.w2() + self.vocab * self.width
    }

    fn hidden(&self, p: &[f64], phi: &[f64]) -> Vec<f64> {
        (0..self.width)
            .map(|j| {
                let pre =
                    crate::linalg::dot(&p[j * self.d..(j + 1) * self.d], phi) + p[self.b1() + j];
                pre.tanh()
            })
            .collect()
    }

    fn output(&self, p: &[f64], h: &[f64]) -> Vec<f64> {
        (0..self.vocab)
            .map(|a| {
                let w = &p[self.w2() + a * self.width..self.w2() + (a + 1) * self.width];
                crate::linalg::dot(w, h) + p[self.b2() + a]
            })
            .collect()
    }

    fn backward(&self, p: &[f64], phi: &[f64], g: &[f64], out: &mut [f64]) {
        let h = self.hidden(p, phi);
        for a in 0..self.vocab {
            out[self.b2() + a] = g[a];
            for j in 0..self.width {
                out[self.w2() + a * self.width + j] = g[a] * h[j];
            }
        }
        for j in 0..self.width {
            let back: f64 = (0..self.vocab)
                .map(|a| g[a] * p[self.w2() + a * self.width + j])
                .sum();
            let delta = back * (1.0 - h[j] * h[j]);
            out[self.b1() + j] = delta;
            for (m, f) in phi.iter().enumerate() {
                out[j * self.d + m] = delta * f;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env() -> ToyEnvironment {
        ToyEnvironment::new(
            3,
            3,
            RewardRule::TargetMatch {
                target: vec![2, 0, 1],
            },
        )
        .unwrap()
    }

    #[test]
    fn tabular_identity_row() {
        let m = PolicyModel::for_env(ModelFamily::Tabular, &env(), &Init::Zeros, 0).unwrap();
        assert_eq!(m.param_count(), (1 + 3 + 9) * 3);
        assert_eq!(&*m.forward(&[]).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn tabular_indices_are_a_bijection() {
        let m = PolicyModel::for_env(ModelFamily::Tabular, &env(), &Init::Zeros, 0).unwrap();
        let idx: Vec<usize> = m
            .states()
            .iter()
            .map(|s| m.state_index(s).unwrap())
            .collect();
        assert_eq!(idx, (0..13).collect::<Vec<_>>());
    }

    #[test]
    fn linear_zero_weights() {
        let m = PolicyModel::for_env(ModelFamily::Linear, &env(), &Init::Zeros, 0).unwrap();
        for s in m.states() {
            assert!(m.forward(&s).unwrap().iter().all(|&z| z == 0.0));
        }
    }

    #[test]
    fn unknown_state() {
        let m = PolicyModel::for_env(ModelFamily::Linear, &env(), &Init::Zeros, 0).unwrap();
        assert_eq!(
            m.forward(&[0, 1, 2]),
            Err(LcoError::InvalidState(vec![0, 1, 2]))
        );
        assert_eq!(m.forward(&[5]), Err(LcoError::InvalidState(vec![5])));
    }

    #[test]
    fn tabular_jacobian_is_selection() {
        let m = PolicyModel::for_env(
            ModelFamily::Tabular,
            &env(),
            &Init::Uniform { scale: 1.0 },
            3,
        )
        .unwrap();
        let jac = m.jacobian(&[1]).unwrap();
        assert_eq!(jac.sigma_max, 1.0);
        let row = m.state_index(&[1]).unwrap();
        for a in 0..3 {
            for c in 0..m.param_count() {
                let expected = if c == row * 3 + a { 1.0 } else { 0.0 };
                assert_eq!(jac.j[(a, c)], expected);
            }
        }
    }

    #[test]
    fn linear_sigma_is_feature_norm() {
        let m = PolicyModel::for_env(
            ModelFamily::Linear,
            &env(),
            &Init::Uniform { scale: 0.5 },
            1,
        )
        .unwrap();
        for s in m.states() {
            let phi = m.features(&s).unwrap();
            let jac = m.jacobian(&s).unwrap();
            assert!((jac.sigma_max - norm(&phi)).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_linear_families_have_zero_residual() {
        for fam in [ModelFamily::Tabular, ModelFamily::Linear] {
            let m = PolicyModel::for_env(fam, &env(), &Init::Uniform { scale: 1.0 }, 5).unwrap();
            let other =
                PolicyModel::for_env(fam, &env(), &Init::Uniform { scale: 3.0 }, 6).unwrap();
            for s in m.states() {
                let r = m
                    .linearization_residual(m.params(), other.params(), &s)
                    .unwrap();
                assert!(r < 1e-12, "{fam}: {r}");
            }
        }
    }

    #[test]
    fn output_bias_applies_everywhere() {
        for fam in [
            ModelFamily::Tabular,
            ModelFamily::Linear,
            ModelFamily::Mlp1 { width: 4 },
        ] {
            let mut m = PolicyModel::for_env(fam, &env(), &Init::Zeros, 0).unwrap();
            m.add_output_bias(&[1.0, -2.0, 0.5]).unwrap();
            for s in m.states() {
                assert_eq!(&*m.forward(&s).unwrap(), &[1.0, -2.0, 0.5], "{fam}");
            }
        }
    }

    #[test]
    fn env_validation_and_rewards() {
        let e = env();
        assert_eq!(e.token_rewards(&[2, 0, 1]).unwrap(), vec![0.0, 0.0, 1.0]);
        assert_eq!(e.token_rewards(&[2, 0, 0]).unwrap(), vec![0.0, 0.0, -1.0]);
        assert!(ToyEnvironment::new(3, 2, RewardRule::TargetMatch { target: vec![0] }).is_err());
        assert!(ToyEnvironment::new(1, 2, RewardRule::TargetMatch { target: vec![0, 0] }).is_err());
        assert!(ToyEnvironment::new(65, 1, RewardRule::TargetMatch { target: vec![0] }).is_err());
        let scorer = ToyEnvironment::new(
            2,
            2,
            RewardRule::ScorerTable {
                rows: vec![vec![0.5, -1.0], vec![2.0, 0.0]],
            },
        )
        .unwrap();
        assert_eq!(scorer.token_rewards(&[1, 0]).unwrap(), vec![-1.0, 2.0]);
    }

    #[test]
    fn oversized_tabular_rejected() {
        assert!(PolicyModel::new(ModelFamily::Tabular, 64, 16, &Init::Zeros, 0).is_err());
        assert!(PolicyModel::new(ModelFamily::Linear, 64, 16, &Init::Zeros, 0).is_ok());
    }
}
