//! Logit-space curvature of every objective: analytic and finite-difference
//! Hessians, eigenvalue extremes, negative-curvature witnesses for PPO,
//! first-order directionality and the LCO gradient-norm bounds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dist::{check_index, check_same_len, LogitVector, ProbVector};
use crate::error::{LcoError, Result};
use crate::linalg::{dot, symmetric_eigen, Matrix};
use crate::objectives::{
    evaluate_with_target, lco_kld_eval, lco_lch_eval, lco_mse_eval, ppo_active, ppo_ratio,
    ppo_unclipped_value, sft_eval, ObjectiveKind, TimestepContext,
};
use crate::target::OptimalTarget;

/// Quadratic forms at or above this are treated as round-off, not curvature.
pub const WITNESS_TOLERANCE: f64 = 1e-8;

/// Random trials the witness search makes before giving up.
pub const WITNESS_TRIALS: usize = 100_000;

/// Slack allowed when comparing a gradient norm with its bound.
pub const BOUND_SLACK: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct HessianReport {
    pub matrix: Matrix,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    /// A direction with `vᵀHv < −1e-8`, when one was found.
    pub witness: Option<Vec<f64>>,
}

impl HessianReport {
    fn from_matrix(matrix: Matrix) -> Result<Self> {
        let eig = symmetric_eigen(&matrix)?;
        let n = eig.values.len();
        let min_eigenvalue = eig.values[0];
        let witness = (min_eigenvalue < -WITNESS_TOLERANCE)
            .then(|| (0..n).map(|r| eig.vectors[(r, 0)]).collect::<Vec<_>>())
            .filter(|v| matrix.quadratic_form(v) < -WITNESS_TOLERANCE);
        Ok(Self {
            min_eigenvalue,
            max_eigenvalue: eig.values[n - 1],
            witness,
            matrix,
        })
    }
}

/// A point in logit space together with what its objective needs.
#[derive(Debug, Clone)]
pub enum CurvaturePoint {
    Sft {
        z: LogitVector,
        target: usize,
    },
    Ppo {
        ctx: TimestepContext,
        z: LogitVector,
    },
    LcoMse {
        z: LogitVector,
        z_star: LogitVector,
    },
    LcoLch {
        z: LogitVector,
        z_star: LogitVector,
    },
    LcoKld {
        z: LogitVector,
        pi_star: ProbVector,
    },
}

impl CurvaturePoint {
    pub fn kind(&self) -> ObjectiveKind {
        match self {
            CurvaturePoint::Sft { .. } => ObjectiveKind::Sft,
            CurvaturePoint::Ppo { .. } => ObjectiveKind::Ppo,
            CurvaturePoint::LcoMse { .. } => ObjectiveKind::LcoMse,
            CurvaturePoint::LcoLch { .. } => ObjectiveKind::LcoLch,
            CurvaturePoint::LcoKld { .. } => ObjectiveKind::LcoKld,
        }
    }

    pub fn logits(&self) -> &LogitVector {
        match self {
            CurvaturePoint::Sft { z, .. }
            | CurvaturePoint::Ppo { z, .. }
            | CurvaturePoint::LcoMse { z, .. }
            | CurvaturePoint::LcoLch { z, .. }
            | CurvaturePoint::LcoKld { z, .. } => z,
        }
    }

    /// Loss at arbitrary logits `x` with the point's fixed data. PPO uses the
    /// smooth unclipped branch; callers check activity separately.
    fn value_at(&self, x: &[f64]) -> Result<f64> {
        Ok(match self {
            CurvaturePoint::Sft { target, .. } => sft_eval(x, *target)?.value,
            CurvaturePoint::Ppo { ctx, .. } => ppo_unclipped_value(ctx, x)?,
            CurvaturePoint::LcoMse { z_star, .. } => lco_mse_eval(x, z_star)?.value,
            CurvaturePoint::LcoLch { z_star, .. } => lco_lch_eval(x, z_star)?.value,
            CurvaturePoint::LcoKld { pi_star, .. } => lco_kld_eval(x, pi_star)?.value,
        })
    }
}

/// `diag(π) − ππᵀ`.
pub fn softmax_covariance(pi: &[f64]) -> Matrix {
    Matrix::from_fn(pi.len(), pi.len(), |i, j| {
        if i == j {
            pi[i] - pi[i] * pi[i]
        } else {
            -pi[i] * pi[j]
        }
    })
}

/// `sech x` without overflow.
fn sech(x: f64) -> f64 {
    let e = (-x.abs()).exp();
    2.0 * e / (1.0 + e * e)
}

/// Entry-wise PPO loss Hessian in the active region,
/// `−(A/π_old(a)) · π_a · [(e_a − π)(e_a − π)ᵀ − (diag π − ππᵀ)]`.
fn ppo_hessian(pi: &[f64], k: usize, advantage: f64, pi_old_k: f64) -> Matrix {
    let lead = -advantage / pi_old_k * pi[k];
    let ind = |i: usize, j: usize| if i == j { 1.0 } else { 0.0 };
    Matrix::from_fn(pi.len(), pi.len(), |i, j| {
        lead * ((ind(k, j) - pi[j]) * (ind(k, i) - pi[i]) - pi[i] * (ind(i, j) - pi[j]))
    })
}

pub fn hessian_analytic(point: &CurvaturePoint) -> Result<HessianReport> {
    let matrix = match point {
        CurvaturePoint::Sft { z, target } => {
            check_index(*target, z.len())?;
            softmax_covariance(&z.softmax())
        }
        CurvaturePoint::LcoKld { z, pi_star } => {
            check_same_len(z.len(), pi_star.len())?;
            softmax_covariance(&z.softmax())
        }
        CurvaturePoint::LcoMse { z, z_star } => {
            check_same_len(z.len(), z_star.len())?;
            let mut m = Matrix::identity(z.len());
            m.scale(2.0 / z.len() as f64);
            m
        }
        CurvaturePoint::LcoLch { z, z_star } => {
            check_same_len(z.len(), z_star.len())?;
            let n = z.len() as f64;
            let d: Vec<f64> = z
                .iter()
                .zip(z_star.iter())
                .map(|(a, b)| sech(a - b).powi(2) / n)
                .collect();
            Matrix::diagonal(&d)
        }
        CurvaturePoint::Ppo { ctx, z } => {
            if !ppo_active(ctx, z)? {
                return Err(LcoError::InactiveRegion {
                    ratio: ppo_ratio(ctx, z)?,
                    advantage: ctx.sampled_advantage(),
                });
            }
            let k = ctx.sampled_action();
            ppo_hessian(&z.softmax(), k, ctx.sampled_advantage(), ctx.pi_old()[k])
        }
    };
    HessianReport::from_matrix(matrix)
}

/// Central second differences of the scalar loss, symmetrized.
pub fn hessian_numeric(point: &CurvaturePoint, step: f64) -> Result<HessianReport> {
    if !(step > 0.0) {
        return Err(LcoError::invalid("finite-difference step must be > 0"));
    }
    let z = point.logits();
    let n = z.len();
    let mut x = z.to_vec();

    let eval = |x: &[f64], offset: (usize, usize)| -> Result<f64> {
        if let CurvaturePoint::Ppo { ctx, .. } = point {
            if !ppo_active(ctx, x)? {
                return Err(LcoError::Kink {
                    ratio: ppo_ratio(ctx, x)?,
                    offset,
                });
            }
        }
        point.value_at(x)
    };

    let mut h = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut corner = |si: f64, sj: f64| -> Result<f64> {
                x[i] += si * step;
                x[j] += sj * step;
                let v = eval(&x, (i, j));
                x[i] -= si * step;
                x[j] -= sj * step;
                v
            };
            let pp = corner(1.0, 1.0)?;
            let pm = corner(1.0, -1.0)?;
            let mp = corner(-1.0, 1.0)?;
            let mm = corner(-1.0, -1.0)?;
            let v = (pp - pm - mp + mm) / (4.0 * step * step);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    HessianReport::from_matrix(h)
}

/// `vᵀ H_PPO v` for the on-policy Hessian with unit-magnitude advantage of
/// sign `advantage_sign`: `sign · (D(v) − (v_k − E(v))²)`, where `E` and `D`
/// are the mean and variance of `v` under `π`.
pub fn ppo_quadratic_form(pi: &[f64], k: usize, advantage_sign: f64, v: &[f64]) -> f64 {
    let mean = dot(pi, v);
    let second = pi.iter().zip(v).map(|(p, x)| p * x * x).sum::<f64>();
    let variance = second - mean * mean;
    let dev = v[k] - mean;
    advantage_sign.signum() * (variance - dev * dev)
}

/// Whether the on-policy PPO Hessian has a negative direction at all.
///
/// With a positive advantage that needs `π_k < 1/2`; with a negative one it
/// needs either a third action carrying mass or `π_k > 1/2`. Elsewhere the
/// Hessian is positive semi-definite.
pub fn ppo_has_negative_curvature(pi: &[f64], k: usize, advantage_sign: f64) -> bool {
    if advantage_sign > 0.0 {
        pi[k] < 0.5
    } else if advantage_sign < 0.0 {
        let others = pi
            .iter()
            .enumerate()
            .filter(|&(i, &p)| i != k && p > 0.0)
            .count();
        others >= 2 || pi[k] > 0.5
    } else {
        false
    }
}

/// Finds `v` with `vᵀ H_PPO v < −1e-8`: tries `e_k`, then the lowest
/// eigenvector, then a seeded random search that places `v_k` outside (for
/// positive advantages) or at (for negative ones) the band `E(v) ± √D(v)`.
pub fn ppo_witness(pi: &ProbVector, k: usize, advantage_sign: f64, seed: u64) -> Result<Vec<f64>> {
    let n = pi.len();
    if n < 2 {
        return Err(LcoError::invalid("witness search needs at least 2 actions"));
    }
    check_index(k, n)?;
    if advantage_sign == 0.0 || !advantage_sign.is_finite() {
        return Err(LcoError::invalid("advantage sign must be +1 or -1"));
    }
    let form = |v: &[f64]| ppo_quadratic_form(pi, k, advantage_sign, v);

    let mut basis = vec![0.0; n];
    basis[k] = 1.0;
    if form(&basis) < -WITNESS_TOLERANCE {
        return Ok(basis);
    }

    let h = ppo_hessian(pi, k, advantage_sign.signum(), pi[k]);
    let eig = symmetric_eigen(&h)?;
    let lowest: Vec<f64> = (0..n).map(|r| eig.vectors[(r, 0)]).collect();
    if form(&lowest) < -WITNESS_TOLERANCE {
        return Ok(lowest);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = vec![0.0; n];
    for _ in 0..WITNESS_TRIALS {
        v.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        let mean_rest: f64 = (0..n)
            .filter(|&i| i != k)
            .map(|i| pi[i] * v[i])
            .sum::<f64>();
        if advantage_sign > 0.0 {
            // push v_k far from the rest of the distribution
            v[k] += rng.random_range(1.0..10.0) * if rng.random::<bool>() { 1.0 } else { -1.0 };
        } else if pi[k] < 1.0 {
            // v_k = E(v) exactly
            v[k] = mean_rest / (1.0 - pi[k]);
        }
        if form(&v) < -WITNESS_TOLERANCE {
            return Ok(v);
        }
    }
    Err(LcoError::WitnessSearchFailed {
        trials: WITNESS_TRIALS,
    })
}

/// `⟨∇_z L, z − z*⟩` for an LCO objective.
pub fn directionality(kind: ObjectiveKind, z: &[f64], target: &OptimalTarget) -> Result<f64> {
    if !kind.is_lco() {
        return Err(LcoError::invalid(format!(
            "directionality is defined for LCO objectives, not {kind}"
        )));
    }
    let grad = evaluate_with_target(kind, target, z)?.logit_gradient;
    let disp: Vec<f64> = z
        .iter()
        .zip(target.z_star().iter())
        .map(|(a, b)| a - b)
        .collect();
    Ok(dot(&grad, &disp))
}

/// Upper bound on `‖∇_θ L‖` as a function of the loss and `σ_max` of the
/// logit Jacobian. Monotone increasing in `loss_value`.
pub fn gradient_norm_bound(
    kind: ObjectiveKind,
    loss_value: f64,
    sigma_max: f64,
    vocab: usize,
) -> Result<f64> {
    if !(loss_value >= 0.0) {
        return Err(LcoError::invalid(format!(
            "loss must be >= 0, got {loss_value}"
        )));
    }
    if !(sigma_max >= 0.0) {
        return Err(LcoError::invalid(format!(
            "sigma_max must be >= 0, got {sigma_max}"
        )));
    }
    if vocab == 0 {
        return Err(LcoError::invalid("empty vocabulary"));
    }
    let n = vocab as f64;
    Ok(match kind {
        ObjectiveKind::LcoMse => 2.0 / n * sigma_max * (n * loss_value).sqrt(),
        ObjectiveKind::LcoLch => sigma_max / n * (n * -(-2.0 * loss_value).exp_m1()).sqrt(),
        ObjectiveKind::LcoKld => sigma_max * (2.0 * loss_value).sqrt(),
        other => {
            return Err(LcoError::invalid(format!(
                "no gradient-norm bound for {other}"
            )))
        }
    })
}

/// One comparison of an actual parameter-gradient norm with its bound.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundCheck {
    pub objective: ObjectiveKind,
    pub actual_gradient_norm: f64,
    pub bound_value: f64,
    pub sigma_max: f64,
    pub satisfied: bool,
}

impl BoundCheck {
    pub fn new(
        objective: ObjectiveKind,
        actual_gradient_norm: f64,
        bound_value: f64,
        sigma_max: f64,
    ) -> Self {
        Self {
            objective,
            actual_gradient_norm,
            bound_value,
            sigma_max,
            satisfied: actual_gradient_norm <= bound_value + BOUND_SLACK,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::AdvantageVector;

    fn lv(v: &[f64]) -> LogitVector {
        LogitVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn sft_uniform_two() {
        let r = hessian_analytic(&CurvaturePoint::Sft {
            z: lv(&[0.0, 0.0]),
            target: 0,
        })
        .unwrap();
        let expected = Matrix::from_rows(&[vec![0.25, -0.25], vec![-0.25, 0.25]]).unwrap();
        assert_eq!(r.matrix, expected);
        assert!(r.min_eigenvalue.abs() < 1e-15);
        assert!((r.max_eigenvalue - 0.5).abs() < 1e-15);
        assert!(r.witness.is_none());
    }

    #[test]
    fn mse_is_scaled_identity() {
        let r = hessian_analytic(&CurvaturePoint::LcoMse {
            z: lv(&[1.0, 2.0, 3.0, 4.0]),
            z_star: lv(&[0.0; 4]),
        })
        .unwrap();
        let mut expected = Matrix::identity(4);
        expected.scale(0.5);
        assert_eq!(r.matrix, expected);
    }

    #[test]
    fn lch_at_target() {
        let z = lv(&[0.2, -0.3, 0.9]);
        let r = hessian_analytic(&CurvaturePoint::LcoLch {
            z: z.clone(),
            z_star: z,
        })
        .unwrap();
        let mut expected = Matrix::identity(3);
        expected.scale(1.0 / 3.0);
        assert!(r.matrix.max_abs_diff(&expected) < 1e-16);
    }

    #[test]
    fn covariance_has_null_direction() {
        let pi = [0.1, 0.2, 0.3, 0.4];
        let h = softmax_covariance(&pi);
        let ones = h.matvec(&[1.0; 4]);
        assert!(ones.iter().all(|x| x.abs() < 1e-16));
        assert!(crate::linalg::min_eigenvalue(&h).unwrap() >= -1e-12);
    }

    #[test]
    fn ppo_hessian_requires_active_point() {
        let ctx = TimestepContext::new(
            lv(&[0.0, 0.0]),
            0,
            AdvantageVector::dense(vec![1.0, 0.0]).unwrap(),
            1.0,
            0.2,
        )
        .unwrap();
        // ratio 0.9/0.5 = 1.8 > 1.2
        let z = lv(&[(9.0f64).ln(), 0.0]);
        assert!(matches!(
            hessian_analytic(&CurvaturePoint::Ppo { ctx, z }),
            Err(LcoError::InactiveRegion { .. })
        ));
    }

    #[test]
    fn ppo_numeric_detects_kink() {
        let ctx = TimestepContext::new(
            lv(&[0.0, 0.0]),
            0,
            AdvantageVector::dense(vec![1.0, 0.0]).unwrap(),
            1.0,
            0.2,
        )
        .unwrap();
        // ratio exactly at the 1 + ε boundary
        let z = lv(&[(1.5f64).ln(), 0.0]);
        assert!(matches!(
            hessian_numeric(&CurvaturePoint::Ppo { ctx, z }, 1e-4),
            Err(LcoError::Kink { .. })
        ));
    }

    #[test]
    fn quadratic_form_boundary_and_witnesses() {
        let half = [0.5, 0.5];
        assert_eq!(ppo_quadratic_form(&half, 0, 1.0, &[1.0, 0.0]), 0.0);

        let pi = [0.1, 0.9];
        let q = ppo_quadratic_form(&pi, 0, 1.0, &[1.0, 0.0]);
        assert!((q - (0.09 - 0.81)).abs() < 1e-15);
        let w = ppo_witness(&ProbVector::new(pi.to_vec()).unwrap(), 0, 1.0, 0).unwrap();
        assert_eq!(w, vec![1.0, 0.0]);

        let pi = ProbVector::new(vec![0.9, 0.1]).unwrap();
        let w = ppo_witness(&pi, 0, -1.0, 0).unwrap();
        assert!(ppo_quadratic_form(&pi, 0, -1.0, &w) < -WITNESS_TOLERANCE);
    }

    #[test]
    fn witness_fails_where_hessian_is_psd() {
        // positive advantage on a majority action: on-policy Hessian is PSD
        let pi = ProbVector::new(vec![0.7, 0.2, 0.1]).unwrap();
        assert!(!ppo_has_negative_curvature(&pi, 0, 1.0));
        assert_eq!(
            ppo_witness(&pi, 0, 1.0, 3),
            Err(LcoError::WitnessSearchFailed {
                trials: WITNESS_TRIALS
            })
        );
    }

    #[test]
    fn bound_examples() {
        for k in ObjectiveKind::LCO {
            assert_eq!(gradient_norm_bound(k, 0.0, 3.0, 5).unwrap(), 0.0);
        }
        assert_eq!(
            gradient_norm_bound(ObjectiveKind::LcoKld, 0.5, 1.0, 7).unwrap(),
            1.0
        );
        assert_eq!(
            gradient_norm_bound(ObjectiveKind::LcoMse, 1.0, 2.0, 4).unwrap(),
            2.0
        );
        assert!(gradient_norm_bound(ObjectiveKind::LcoMse, -1.0, 1.0, 4).is_err());
        assert!(gradient_norm_bound(ObjectiveKind::Ppo, 1.0, 1.0, 4).is_err());
    }

    #[test]
    fn directionality_examples() {
        let z_old = lv(&[0.0, 0.5, -1.0, 2.0]);
        let a = AdvantageVector::dense(vec![1.0, -0.5, 0.0, 0.25]).unwrap();
        let t = OptimalTarget::new(&z_old, &a, 1.0).unwrap();
        for k in ObjectiveKind::LCO {
            assert_eq!(directionality(k, t.z_star(), &t).unwrap(), 0.0);
        }
        let z = [0.3, 0.1, 0.0, -0.2];
        let d: f64 = z
            .iter()
            .zip(t.z_star().iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let got = directionality(ObjectiveKind::LcoMse, &z, &t).unwrap();
        assert!((got - 0.5 * d).abs() < 1e-14);
        assert!(directionality(ObjectiveKind::Sft, &z, &t).is_err());
    }
}
