//! Exact gradient descent of the MSE and log-cosh LCO losses through an
//! affine logit map, compared against the geometric-decay bounds.

use crate::dist::{check_finite, AdvantageVector, LogitVector};
use crate::error::{LcoError, Result};
use crate::linalg::{min_norm_solve, norm, symmetric_eigen, Matrix};
use crate::model::{ModelFamily, PolicyModel};
use crate::objectives::{lco_lch_eval, lco_mse_eval, ObjectiveKind};
use crate::target::optimal_logits;

/// Residual radius inside which the log-cosh bound is asserted.
pub const LCH_NEIGHBORHOOD: f64 = 0.5;

/// Relative slack on `loss ≤ bound`.
pub const BOUND_RELATIVE_SLACK: f64 = 1e-6;

/// Logits that depend affinely on the parameters: `z(θ) = offset + J θ`.
#[derive(Debug, Clone)]
pub struct AffineLogits {
    offset: Vec<f64>,
    jacobian: Matrix,
}

impl AffineLogits {
    pub fn new(offset: Vec<f64>, jacobian: Matrix) -> Result<Self> {
        if offset.len() != jacobian.rows() {
            return Err(LcoError::invalid(
                "offset length differs from Jacobian rows",
            ));
        }
        if offset.len() < 2 {
            return Err(LcoError::invalid("need at least two logits"));
        }
        check_finite(&offset, "offset")?;
        check_finite(jacobian.as_slice(), "Jacobian")?;
        Ok(Self { offset, jacobian })
    }

    /// The logit map of a tabular or linear model at one state. Both are
    /// exactly linear in θ, so the offset is zero.
    pub fn from_model(model: &PolicyModel, state: &[usize]) -> Result<Self> {
        if let ModelFamily::Mlp1 { .. } = model.family() {
            return Err(LcoError::invalid(
                "convergence experiments need a TABULAR or LINEAR model",
            ));
        }
        let j = model.jacobian(state)?.j;
        Self::new(vec![0.0; model.vocab()], j)
    }

    pub fn vocab(&self) -> usize {
        self.offset.len()
    }

    pub fn param_count(&self) -> usize {
        self.jacobian.cols()
    }

    pub fn jacobian(&self) -> &Matrix {
        &self.jacobian
    }

    pub fn logits(&self, theta: &[f64]) -> Vec<f64> {
        self.jacobian
            .matvec(theta)
            .iter()
            .zip(&self.offset)
            .map(|(a, b)| a + b)
            .collect()
    }
}

/// `max_i |1 − η c λ_i|` over the eigenvalues of `J Jᵀ`.
pub fn spectral_radius(j: &Matrix, eta: f64, c: f64) -> Result<f64> {
    check_finite(j.as_slice(), "Jacobian")?;
    let eig = symmetric_eigen(&j.gram_rows())?;
    Ok(eig
        .values
        .iter()
        .map(|l| (1.0 - eta * c * l).abs())
        .fold(0.0, f64::max))
}

/// The curvature constant `c` of the recursion: `2/|V|` for MSE, `1/|V|` for LCH.
pub fn curvature_constant(objective: ObjectiveKind, vocab: usize) -> Result<f64> {
    let n = vocab as f64;
    match objective {
        ObjectiveKind::LcoMse => Ok(2.0 / n),
        ObjectiveKind::LcoLch => Ok(1.0 / n),
        other => Err(LcoError::invalid(format!(
            "no convergence experiment for {other}"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergeConfig {
    pub objective: ObjectiveKind,
    pub learning_rate: f64,
    pub beta: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergeRow {
    pub k: usize,
    pub loss: f64,
    pub bound: f64,
    /// `‖z_k − z*‖_∞`.
    pub residual_inf: f64,
    /// Whether the bound is claimed at this step.
    pub asserted: bool,
}

impl ConvergeRow {
    pub fn within_bound(&self) -> bool {
        self.loss <= self.bound * (1.0 + BOUND_RELATIVE_SLACK)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergeReport {
    pub rho: f64,
    /// The behavioral logits actually reproduced by `θ₀`.
    pub z_old: Vec<f64>,
    /// Rows for `k = 0..=steps`.
    pub rows: Vec<ConvergeRow>,
}

impl ConvergeReport {
    /// Asserted steps where the loss exceeds the bound.
    pub fn bound_violations(&self) -> Vec<usize> {
        self.rows
            .iter()
            .filter(|r| r.asserted && !r.within_bound())
            .map(|r| r.k)
            .collect()
    }

    /// Steps `k` with `L(θ_k) > L(θ_{k−1})`, restricted to asserted pairs.
    pub fn monotonicity_violations(&self) -> Vec<usize> {
        self.rows
            .windows(2)
            .filter(|w| w[0].asserted && w[1].asserted)
            .filter(|w| w[1].loss > w[0].loss * (1.0 + 1e-12))
            .map(|w| w[1].k)
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.bound_violations().is_empty() && self.monotonicity_violations().is_empty()
    }
}

/// Runs `steps` exact gradient-descent updates `θ ← θ − η Jᵀ ∇_z L` starting
/// from parameters that reproduce `z_old`, toward `z* = z_old + A/β`.
///
/// When `z_old` lies outside the range of `J` the least-squares projection is
/// used instead and reported back in [`ConvergeReport::z_old`].
pub fn converge_experiment(
    map: &AffineLogits,
    z_old: &[f64],
    advantages: &AdvantageVector,
    config: &ConvergeConfig,
) -> Result<ConvergeReport> {
    let v = map.vocab();
    if z_old.len() != v || advantages.len() != v {
        return Err(LcoError::invalid(
            "z_old and advantages must match the vocabulary",
        ));
    }
    if !(config.learning_rate >= 0.0) || !config.learning_rate.is_finite() {
        return Err(LcoError::invalid(format!(
            "learning rate must be >= 0, got {}",
            config.learning_rate
        )));
    }
    let c = curvature_constant(config.objective, v)?;
    let rho = spectral_radius(map.jacobian(), config.learning_rate, c)?;
    if rho >= 1.0 {
        return Err(LcoError::StepSizeTooLarge { rho });
    }

    let shifted: Vec<f64> = z_old.iter().zip(&map.offset).map(|(z, o)| z - o).collect();
    let theta0 = min_norm_solve(map.jacobian(), &shifted)?;
    let z0 = LogitVector::new(map.logits(&theta0))?;
    // validates β and the advantages
    optimal_logits(&z0, advantages, config.beta)?;
    let lead = match config.objective {
        ObjectiveKind::LcoMse => 1.0 / v as f64,
        _ => 0.5 / v as f64,
    };
    let a_norm = advantages.norm();
    let scale = lead * a_norm * a_norm / (config.beta * config.beta);

    // For an affine map the update θ ← θ − η Jᵀ g moves the logits by
    // −η J Jᵀ g, so the residual e = z − z* follows e ← e − η J Jᵀ ∇L(e).
    // Iterating on e directly keeps full relative precision as e → 0.
    let gram = map.jacobian().gram_rows();
    let mut e: Vec<f64> = advantages
        .values()
        .iter()
        .map(|a| -a / config.beta)
        .collect();
    let origin = vec![0.0; v];

    let eval = |e: &[f64]| match config.objective {
        ObjectiveKind::LcoMse => lco_mse_eval(e, &origin),
        _ => lco_lch_eval(e, &origin),
    };

    let mut rows = Vec::with_capacity(config.steps + 1);
    for k in 0..=config.steps {
        let ev = eval(&e)?;
        let residual_inf = e.iter().map(|x| x.abs()).fold(0.0, f64::max);
        let asserted = match config.objective {
            ObjectiveKind::LcoMse => true,
            _ => residual_inf <= LCH_NEIGHBORHOOD,
        };
        rows.push(ConvergeRow {
            k,
            loss: ev.value,
            bound: scale * rho.powi(2 * k as i32),
            residual_inf,
            asserted,
        });
        if k == config.steps {
            break;
        }
        let step = gram.matvec(&ev.logit_gradient);
        if !step.iter().all(|x| x.is_finite()) {
            return Err(LcoError::NonFiniteGradient {
                step: k,
                detail: format!("‖J Jᵀ g‖ = {}", norm(&step)),
            });
        }
        e.iter_mut()
            .zip(&step)
            .for_each(|(x, d)| *x -= config.learning_rate * d);
    }
    Ok(ConvergeReport {
        rho,
        z_old: z0.into_vec(),
        rows,
    })
}
