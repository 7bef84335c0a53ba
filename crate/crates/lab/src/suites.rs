//! Property suites behind `lco-lab verify`. Each suite draws its cases from a
//! generator seeded by the case index, so reports are reproducible.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lco_core::converge::{converge_experiment, AffineLogits, ConvergeConfig};
use lco_core::convexity::{
    directionality, gradient_norm_bound, hessian_analytic, hessian_numeric,
    ppo_has_negative_curvature, ppo_witness, CurvaturePoint, HessianReport, BOUND_SLACK,
    WITNESS_TOLERANCE,
};
use lco_core::dist::{
    normalize_advantages, total_variation, AdvantageVector, LogitVector, Normalization, ProbVector,
};
use lco_core::linalg::{norm, symmetric_eigen};
use lco_core::model::{Init, ModelFamily, PolicyModel, RewardRule, ToyEnvironment};
use lco_core::objectives::{
    lco_kld_eval, lco_lch_eval, lco_mse_eval, ppo_active, ppo_eval, reinforce_eval, sft_eval,
    LossEval, TimestepContext,
};
use lco_core::target::{
    optimal_logits, optimal_policy, optimal_shift, regularized_objective, OptimalTarget,
};
use lco_core::trainer::{EstimatorSpec, Trainer, TrainerConfig};
use lco_core::{ObjectiveKind, Result};

pub const GRADIENT_CASES: usize = 200;
pub const GRADIENT_SIZES: [usize; 4] = [2, 3, 5, 16];
pub const FD_STEP: f64 = 1e-5;
pub const FD_RELATIVE_TOLERANCE: f64 = 1e-6;
pub const FD_FLOOR: f64 = 1e-8;

/// Gradient implementations under test; swapped out by the mutation check.
#[derive(Clone, Copy)]
pub struct GradientImpls {
    pub sft: fn(&[f64], usize) -> Result<LossEval>,
    pub ppo: fn(&TimestepContext, &[f64]) -> Result<LossEval>,
    pub reinforce: fn(&TimestepContext, &[f64]) -> Result<LossEval>,
    pub mse: fn(&[f64], &[f64]) -> Result<LossEval>,
    pub lch: fn(&[f64], &[f64]) -> Result<LossEval>,
    pub kld: fn(&[f64], &ProbVector) -> Result<LossEval>,
}

impl Default for GradientImpls {
    fn default() -> Self {
        Self {
            sft: sft_eval,
            ppo: ppo_eval,
            reinforce: reinforce_eval,
            mse: lco_mse_eval,
            lch: lco_lch_eval,
            kld: lco_kld_eval,
        }
    }
}

fn sft_sign_flipped(z: &[f64], target: usize) -> Result<LossEval> {
    let mut e = sft_eval(z, target)?;
    e.logit_gradient.iter_mut().for_each(|g| *g = -*g);
    Ok(e)
}

impl GradientImpls {
    /// Known faults for the mutation check.
    pub fn with_fault(name: &str) -> Option<Self> {
        match name {
            "sft-sign" => Some(Self {
                sft: sft_sign_flipped,
                ..Self::default()
            }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub label: String,
    pub passed: usize,
    pub total: usize,
    /// Worst observed value of the checked quantity.
    pub worst: f64,
}

impl Check {
    fn new(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            passed: 0,
            total: 0,
            worst: f64::NAN,
        }
    }

    fn record(&mut self, ok: bool) {
        self.total += 1;
        self.passed += usize::from(ok);
    }

    /// Tracks a quantity whose largest value matters.
    fn max_of(&mut self, value: f64) {
        self.worst = if self.worst.is_nan() {
            value
        } else {
            self.worst.max(value)
        };
    }

    fn min_of(&mut self, value: f64) {
        self.worst = if self.worst.is_nan() {
            value
        } else {
            self.worst.min(value)
        };
    }

    pub fn ok(&self) -> bool {
        self.passed == self.total
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub checks: Vec<Check>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::ok)
    }

    pub fn counts(&self) -> (usize, usize) {
        self.checks
            .iter()
            .fold((0, 0), |(p, t), c| (p + c.passed, t + c.total))
    }
}

pub struct Suite {
    pub name: &'static str,
    pub group: &'static str,
    run: fn(&GradientImpls) -> Vec<Check>,
}

impl Suite {
    pub fn run(&self, impls: &GradientImpls) -> SuiteReport {
        let start = Instant::now();
        let checks = (self.run)(impls);
        SuiteReport {
            name: self.name,
            checks,
            elapsed: start.elapsed(),
        }
    }

    /// `filter` selects a whole group (`hessian`) or one suite (`hessian-ppo`).
    pub fn selected_by(&self, filter: &str) -> bool {
        self.group == filter || self.name == filter
    }
}

pub fn all_suites() -> Vec<Suite> {
    vec![
        Suite {
            name: "gradient",
            group: "gradient",
            run: gradient_suite,
        },
        Suite {
            name: "hessian-psd",
            group: "hessian",
            run: |_| hessian_psd_suite(),
        },
        Suite {
            name: "hessian-ppo",
            group: "hessian",
            run: |_| hessian_ppo_suite(),
        },
        Suite {
            name: "hessian-agreement",
            group: "hessian",
            run: |_| hessian_agreement_suite(),
        },
        Suite {
            name: "directionality",
            group: "directionality",
            run: |_| directionality_suite(),
        },
        Suite {
            name: "target",
            group: "target",
            run: |_| target_suite(),
        },
        Suite {
            name: "bound",
            group: "bound",
            run: |_| bound_suite(),
        },
        Suite {
            name: "convergence",
            group: "convergence",
            run: |_| convergence_suite(),
        },
        Suite {
            name: "recovery",
            group: "recovery",
            run: |_| recovery_suite(),
        },
    ]
}

pub fn suite_names() -> Vec<&'static str> {
    all_suites().iter().map(|s| s.name).collect()
}

/// Runs the selected suites on worker threads; reports come back in suite order.
pub fn run_suites(filter: Option<&str>, impls: &GradientImpls) -> Vec<SuiteReport> {
    let suites: Vec<Suite> = all_suites()
        .into_iter()
        .filter(|s| filter.is_none_or(|f| s.selected_by(f)))
        .collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = suites
            .iter()
            .map(|s| scope.spawn(move || s.run(impls)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("suite thread panicked"))
            .collect()
    })
}

fn case_rng(suite: u64, case: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(suite.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ case as u64)
}

fn uniform_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn logits(v: Vec<f64>) -> LogitVector {
    LogitVector::new(v).expect("finite logits")
}

fn random_context(rng: &mut impl Rng, n: usize, advantage: f64) -> TimestepContext {
    let z_old = logits(uniform_vec(rng, n, 2.0));
    let k = rng.random_range(0..n);
    TimestepContext::new(
        z_old,
        k,
        AdvantageVector::sparse(n, k, advantage).expect("index in range"),
        1.0,
        0.2,
    )
    .expect("valid context")
}

fn sign(rng: &mut impl Rng) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

/// `max_i |g_i − fd_i| / max(‖fd‖_∞, floor)` with central differences of `f`.
fn fd_error(f: &dyn Fn(&[f64]) -> Result<f64>, z: &[f64], grad: &[f64]) -> Result<f64> {
    let mut fd = Vec::with_capacity(z.len());
    let mut x = z.to_vec();
    for i in 0..z.len() {
        x[i] = z[i] + FD_STEP;
        let hi = f(&x)?;
        x[i] = z[i] - FD_STEP;
        let lo = f(&x)?;
        x[i] = z[i];
        fd.push((hi - lo) / (2.0 * FD_STEP));
    }
    let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(FD_FLOOR);
    Ok(grad
        .iter()
        .zip(&fd)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
        / scale)
}

/// Whether every stencil point of the finite-difference check stays on the active branch.
fn stencil_active(ctx: &TimestepContext, z: &[f64]) -> bool {
    let mut x = z.to_vec();
    (0..z.len()).all(|i| {
        [FD_STEP, -FD_STEP].iter().all(|d| {
            x[i] = z[i] + d;
            let ok = ppo_active(ctx, &x).unwrap_or(false);
            x[i] = z[i];
            ok
        })
    })
}

fn gradient_suite(impls: &GradientImpls) -> Vec<Check> {
    let mut out = Vec::new();
    for (oi, kind) in ObjectiveKind::ALL.into_iter().enumerate() {
        let mut check = Check::new(format!("{kind} analytic vs central differences (rel err)"));
        let mut case = 0usize;
        while check.total < GRADIENT_CASES {
            let mut rng = case_rng(100 + oi as u64, case);
            case += 1;
            let n = GRADIENT_SIZES[check.total % GRADIENT_SIZES.len()];
            let z = uniform_vec(&mut rng, n, 3.0);
            let result = match kind {
                ObjectiveKind::Sft => {
                    let t = rng.random_range(0..n);
                    let g = (impls.sft)(&z, t).map(|e| e.logit_gradient);
                    g.and_then(|g| fd_error(&|x| Ok((impls.sft)(x, t)?.value), &z, &g))
                }
                ObjectiveKind::Ppo | ObjectiveKind::Reinforce => {
                    let a = sign(&mut rng) * rng.random_range(0.1..2.0);
                    let ctx = random_context(&mut rng, n, a);
                    let f = if kind == ObjectiveKind::Ppo {
                        impls.ppo
                    } else {
                        impls.reinforce
                    };
                    let x: Vec<f64> = if kind == ObjectiveKind::Ppo {
                        ctx.z_old()
                            .iter()
                            .map(|v| v + rng.random_range(-0.05..0.05))
                            .collect()
                    } else {
                        z.clone()
                    };
                    if kind == ObjectiveKind::Ppo && !stencil_active(&ctx, &x) {
                        continue;
                    }
                    f(&ctx, &x)
                        .and_then(|e| fd_error(&|y| Ok(f(&ctx, y)?.value), &x, &e.logit_gradient))
                }
                ObjectiveKind::LcoMse | ObjectiveKind::LcoLch => {
                    let zs = uniform_vec(&mut rng, n, 3.0);
                    let f = if kind == ObjectiveKind::LcoMse {
                        impls.mse
                    } else {
                        impls.lch
                    };
                    f(&z, &zs)
                        .and_then(|e| fd_error(&|y| Ok(f(y, &zs)?.value), &z, &e.logit_gradient))
                }
                ObjectiveKind::LcoKld => {
                    let ps = logits(uniform_vec(&mut rng, n, 3.0)).softmax();
                    (impls.kld)(&z, &ps).and_then(|e| {
                        fd_error(&|y| Ok((impls.kld)(y, &ps)?.value), &z, &e.logit_gradient)
                    })
                }
            };
            match result {
                Ok(err) => {
                    check.max_of(err);
                    check.record(err <= FD_RELATIVE_TOLERANCE);
                }
                Err(_) => check.record(false),
            }
        }
        out.push(check);
    }
    out
}

fn random_distribution_logits(rng: &mut impl Rng) -> LogitVector {
    let n = rng.random_range(2..=16);
    let scale = rng.random_range(0.1..6.0);
    logits(uniform_vec(rng, n, scale))
}

fn hessian_psd_suite() -> Vec<Check> {
    let cases = 1000;
    let mut sft = Check::new("SFT min eigenvalue >= -1e-9");
    let mut kld = Check::new("LCO_KLD min eigenvalue >= -1e-9");
    let mut mse = Check::new("LCO_MSE Hessian = (2/|V|) I within 1e-12 (max dev)");
    let mut lch = Check::new("LCO_LCH eigenvalues in [sech^2(R)/|V|, 1/|V|], > 0 (min margin)");
    for case in 0..cases {
        let mut rng = case_rng(200, case);
        let z = random_distribution_logits(&mut rng);
        let n = z.len();
        let t = rng.random_range(0..n);
        let zs = logits(uniform_vec(&mut rng, n, 4.0));
        let ps = zs.softmax();

        let min_eig = |point: CurvaturePoint, check: &mut Check| match hessian_analytic(&point) {
            Ok(r) => {
                check.min_of(r.min_eigenvalue);
                check.record(r.min_eigenvalue >= -1e-9);
            }
            Err(_) => check.record(false),
        };
        min_eig(
            CurvaturePoint::Sft {
                z: z.clone(),
                target: t,
            },
            &mut sft,
        );
        min_eig(
            CurvaturePoint::LcoKld {
                z: z.clone(),
                pi_star: ps,
            },
            &mut kld,
        );

        match hessian_analytic(&CurvaturePoint::LcoMse {
            z: z.clone(),
            z_star: zs.clone(),
        }) {
            Ok(r) => {
                let target = 2.0 / n as f64;
                let eig = symmetric_eigen(&r.matrix)
                    .map(|e| e.values)
                    .unwrap_or_default();
                let dev = eig.iter().map(|l| (l - target).abs()).fold(0.0, f64::max);
                mse.max_of(dev);
                mse.record(eig.len() == n && dev <= 1e-12);
            }
            Err(_) => mse.record(false),
        }

        match hessian_analytic(&CurvaturePoint::LcoLch {
            z: z.clone(),
            z_star: zs.clone(),
        }) {
            Ok(r) => {
                let nf = n as f64;
                let radius = z
                    .iter()
                    .zip(zs.iter())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                let floor = (1.0 / radius.cosh()).powi(2) / nf;
                let diagonal = (0..n).all(|i| (0..n).all(|j| i == j || r.matrix[(i, j)] == 0.0));
                let values: Vec<f64> = (0..n).map(|i| r.matrix[(i, i)]).collect();
                let margin = values
                    .iter()
                    .map(|&l| (l - floor * (1.0 - 1e-12)).min(1.0 / nf * (1.0 + 1e-12) - l))
                    .fold(f64::INFINITY, f64::min);
                lch.min_of(margin);
                lch.record(diagonal && values.iter().all(|&l| l > 0.0) && margin >= 0.0);
            }
            Err(_) => lch.record(false),
        }
    }
    vec![sft, kld, mse, lch]
}

/// A non-degenerate PPO configuration: every probability strictly inside
/// (0, 1), evaluated at an active point near the snapshot.
fn ppo_point(rng: &mut impl Rng, advantage_sign: f64) -> (TimestepContext, LogitVector) {
    loop {
        let n = rng.random_range(2..=16);
        let magnitude = rng.random_range(0.1..2.0);
        let ctx = random_context(rng, n, advantage_sign * magnitude);
        let z: Vec<f64> = ctx
            .z_old()
            .iter()
            .map(|v| v + rng.random_range(-0.05..0.05))
            .collect();
        if ppo_active(&ctx, &z).unwrap_or(false) {
            return (ctx, logits(z));
        }
    }
}

fn hessian_ppo_suite() -> Vec<Check> {
    let mut out = Vec::new();
    let mut explained = Check::new(
        "PPO configurations without a witness are exactly the predicted PSD ones (count)",
    );
    for (si, s) in [1.0, -1.0].into_iter().enumerate() {
        let label = if s > 0.0 { "positive" } else { "negative" };
        let mut check = Check::new(format!(
            "PPO witness v'Hv < -1e-8, {label} advantage (min form)"
        ));
        for case in 0..100 {
            let mut rng = case_rng(300 + si as u64, case);
            let (ctx, z) = ppo_point(&mut rng, s);
            let k = ctx.sampled_action();
            let pi = z.softmax();
            let found = hessian_analytic(&CurvaturePoint::Ppo {
                ctx: ctx.clone(),
                z: z.clone(),
            })
            .ok()
            .zip(ppo_witness(&pi, k, s, case as u64).ok())
            .map(|(h, v)| h.matrix.quadratic_form(&v))
            .filter(|form| *form < -WITNESS_TOLERANCE);
            if let Some(form) = found {
                check.min_of(form);
            }
            check.record(found.is_some());
            explained.record(found.is_some() == ppo_has_negative_curvature(&pi, k, s));
        }
        out.push(check);
    }
    explained.worst = (explained.total - out.iter().map(|c| c.passed).sum::<usize>()) as f64;
    out.push(explained);
    out
}

fn hessian_agreement_suite() -> Vec<Check> {
    let kinds = [
        ObjectiveKind::Sft,
        ObjectiveKind::Ppo,
        ObjectiveKind::LcoMse,
        ObjectiveKind::LcoLch,
        ObjectiveKind::LcoKld,
    ];
    let mut out = Vec::new();
    for (ki, kind) in kinds.into_iter().enumerate() {
        let mut check = Check::new(format!(
            "{kind} analytic vs numeric Hessian within 1e-5 (max dev)"
        ));
        let mut case = 0;
        while check.total < 100 {
            let mut rng = case_rng(400 + ki as u64, case);
            case += 1;
            let n = rng.random_range(2..=8);
            let z = logits(uniform_vec(&mut rng, n, 2.0));
            let point = match kind {
                ObjectiveKind::Sft => CurvaturePoint::Sft {
                    z,
                    target: rng.random_range(0..n),
                },
                ObjectiveKind::Ppo => {
                    let s = sign(&mut rng);
                    let (ctx, z) = ppo_point(&mut rng, s);
                    CurvaturePoint::Ppo { ctx, z }
                }
                ObjectiveKind::LcoMse => CurvaturePoint::LcoMse {
                    z,
                    z_star: logits(uniform_vec(&mut rng, n, 2.0)),
                },
                ObjectiveKind::LcoLch => CurvaturePoint::LcoLch {
                    z,
                    z_star: logits(uniform_vec(&mut rng, n, 2.0)),
                },
                _ => CurvaturePoint::LcoKld {
                    z,
                    pi_star: logits(uniform_vec(&mut rng, n, 2.0)).softmax(),
                },
            };
            let pair: Result<(HessianReport, HessianReport)> =
                hessian_analytic(&point).and_then(|a| Ok((a, hessian_numeric(&point, 1e-4)?)));
            match pair {
                Ok((a, b)) => {
                    let dev = a.matrix.max_abs_diff(&b.matrix);
                    check.max_of(dev);
                    check.record(dev <= 1e-5);
                }
                // a stencil across the clip boundary is skipped, not failed
                Err(lco_core::LcoError::Kink { .. }) => continue,
                Err(_) => check.record(false),
            }
        }
        out.push(check);
    }
    out
}

fn directionality_suite() -> Vec<Check> {
    let mut out = Vec::new();
    for (ki, kind) in ObjectiveKind::LCO.into_iter().enumerate() {
        let mut check = Check::new(format!("{kind} <grad, z - z*> >= -1e-12 (min)"));
        for case in 0..1000 {
            let mut rng = case_rng(500 + ki as u64, case);
            let n = rng.random_range(2..=16);
            let z_old = logits(uniform_vec(&mut rng, n, 3.0));
            let a = AdvantageVector::dense(uniform_vec(&mut rng, n, 2.0)).expect("finite");
            let target =
                OptimalTarget::new(&z_old, &a, rng.random_range(0.2..3.0)).expect("valid target");
            let z = uniform_vec(&mut rng, n, 4.0);
            match directionality(kind, &z, &target) {
                Ok(d) => {
                    check.min_of(d);
                    check.record(d >= -1e-12);
                }
                Err(_) => check.record(false),
            }
        }
        out.push(check);
    }
    out
}

/// Minimizes `Σ (A_i + C)²` by a grid over `[−max A, −min A]` followed by
/// golden-section refinement around the best grid point.
fn shift_by_search(a: &[f64]) -> f64 {
    let f = |c: f64| a.iter().map(|x| (x + c) * (x + c)).sum::<f64>();
    let lo = -a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let hi = -a.iter().cloned().fold(f64::INFINITY, f64::min);
    if hi <= lo {
        return lo;
    }
    let steps = 1000;
    let h = (hi - lo) / steps as f64;
    let best = (0..=steps)
        .map(|i| lo + i as f64 * h)
        .fold(lo, |b, c| if f(c) < f(b) { c } else { b });
    let (mut l, mut r) = (best - h, best + h);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    while r - l > 1e-10 {
        let (m1, m2) = (r - g * (r - l), l + g * (r - l));
        if f(m1) < f(m2) {
            r = m2;
        } else {
            l = m1;
        }
    }
    (l + r) / 2.0
}

fn target_suite() -> Vec<Check> {
    let mut consistency = Check::new("softmax(z*) = pi* within 1e-10 (max dev)");
    for case in 0..500 {
        let mut rng = case_rng(600, case);
        let n = rng.random_range(2..=16);
        let z_old = logits(uniform_vec(&mut rng, n, 3.0));
        let a = AdvantageVector::dense(uniform_vec(&mut rng, n, 3.0)).expect("finite");
        let beta = rng.random_range(0.1..5.0);
        let dev = optimal_logits(&z_old, &a, beta).and_then(|zs| {
            let p = optimal_policy(&z_old.softmax(), &a, beta)?;
            Ok(zs
                .softmax()
                .iter()
                .zip(p.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max))
        });
        match dev {
            Ok(d) => {
                consistency.max_of(d);
                consistency.record(d <= 1e-10);
            }
            Err(_) => consistency.record(false),
        }
    }

    let mut optimality = Check::new("pi* beats 1e4 perturbations on E[A] - beta KL (min gap)");
    for case in 0..200 {
        let mut rng = case_rng(601, case);
        let n = rng.random_range(2..=8);
        let z_old = logits(uniform_vec(&mut rng, n, 2.0));
        let pi_old = z_old.softmax();
        let a = AdvantageVector::dense(uniform_vec(&mut rng, n, 2.0)).expect("finite");
        let beta = rng.random_range(0.2..3.0);
        let zs = optimal_logits(&z_old, &a, beta).expect("valid");
        let best = regularized_objective(&zs.softmax(), &pi_old, &a, beta).expect("valid");
        let mut ok = true;
        let mut gap = f64::INFINITY;
        for _ in 0..10_000 {
            let scale = 10f64.powf(rng.random_range(-3.0..0.5));
            let p = logits(
                zs.iter()
                    .map(|x| x + rng.random_range(-scale..scale))
                    .collect(),
            )
            .softmax();
            let v = regularized_objective(&p, &pi_old, &a, beta).expect("valid");
            gap = gap.min(best - v);
            ok &= v <= best + 1e-12;
        }
        optimality.min_of(gap);
        optimality.record(ok);
    }

    let mut shift = Check::new("optimal_shift = grid-search minimizer within 1e-6 (max dev)");
    let mut normalized = Check::new("optimal_shift of centered advantages = 0 within 1e-12 (max)");
    for case in 0..500 {
        let mut rng = case_rng(602, case);
        let n = rng.random_range(2..=16);
        let offset = rng.random_range(-5.0..5.0);
        let a = AdvantageVector::dense(
            uniform_vec(&mut rng, n, 3.0)
                .into_iter()
                .map(|x| x + offset)
                .collect(),
        )
        .expect("finite");
        let dev = (optimal_shift(&a) - shift_by_search(a.values())).abs();
        shift.max_of(dev);
        shift.record(dev <= 1e-6);
        let c = optimal_shift(&normalize_advantages(&a, Normalization::Center)).abs();
        normalized.max_of(c);
        normalized.record(c <= 1e-12);
    }
    vec![consistency, optimality, shift, normalized]
}

fn random_family(rng: &mut impl Rng) -> ModelFamily {
    match rng.random_range(0..3) {
        0 => ModelFamily::Tabular,
        1 => ModelFamily::Linear,
        _ => ModelFamily::Mlp1 {
            width: rng.random_range(2..=8),
        },
    }
}

fn random_state(rng: &mut impl Rng, vocab: usize, horizon: usize) -> Vec<usize> {
    let len = rng.random_range(0..horizon);
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

fn bound_suite() -> Vec<Check> {
    let mut out = Vec::new();
    for (ki, kind) in ObjectiveKind::LCO.into_iter().enumerate() {
        let mut check = Check::new(format!("{kind} |J'g| <= bound + 1e-9 (min slack)"));
        for case in 0..500 {
            let mut rng = case_rng(700 + ki as u64, case);
            let (v, h) = (rng.random_range(2..=6), rng.random_range(1..=3));
            let family = random_family(&mut rng);
            let scale = rng.random_range(0.1..1.5);
            let seed = rng.random();
            let result =
                PolicyModel::new(family, v, h, &Init::Uniform { scale }, seed).and_then(|m| {
                    let state = random_state(&mut rng, v, h);
                    let z = m.forward(&state)?;
                    let z_old = logits(uniform_vec(&mut rng, v, 2.0));
                    let a = AdvantageVector::dense(uniform_vec(&mut rng, v, 2.0))?;
                    let target = OptimalTarget::new(&z_old, &a, rng.random_range(0.3..3.0))?;
                    let e = lco_core::objectives::evaluate_with_target(kind, &target, &z)?;
                    let g = m.vjp(&state, &e.logit_gradient)?;
                    let sigma = m.jacobian(&state)?.sigma_max;
                    Ok(gradient_norm_bound(kind, e.value, sigma, v)? + BOUND_SLACK - norm(&g))
                });
            match result {
                Ok(slack) => {
                    check.min_of(slack);
                    check.record(slack >= 0.0);
                }
                Err(_) => check.record(false),
            }
        }
        out.push(check);
    }
    out
}

/// One seeded convergence run as the suite and the acceptance test configure it.
pub fn convergence_case(
    family: ModelFamily,
    objective: ObjectiveKind,
    seed: u64,
) -> Result<lco_core::converge::ConvergeReport> {
    let mut rng = case_rng(800, seed as usize);
    let v = rng.random_range(2..=8);
    let horizon = 3;
    let model = PolicyModel::new(family, v, horizon, &Init::Zeros, seed)?;
    let state = random_state(&mut rng, v, horizon);
    let map = AffineLogits::from_model(&model, &state)?;
    let z_old = uniform_vec(&mut rng, v, 2.0);
    let a = AdvantageVector::dense(uniform_vec(&mut rng, v, 1.0))?;
    let beta = rng.random_range(0.5..2.0);
    let c = lco_core::converge::curvature_constant(objective, v)?;
    let lambda_max = symmetric_eigen(&map.jacobian().gram_rows())?
        .values
        .last()
        .copied()
        .unwrap_or(1.0);
    let rho_target = rng.random_range(0.5..0.97);
    let learning_rate = (1.0 - rho_target) / (c * lambda_max);
    converge_experiment(
        &map,
        &z_old,
        &a,
        &ConvergeConfig {
            objective,
            learning_rate,
            beta,
            steps: 500,
        },
    )
}

fn convergence_suite() -> Vec<Check> {
    let mut out = Vec::new();
    for objective in [ObjectiveKind::LcoMse, ObjectiveKind::LcoLch] {
        for family in [ModelFamily::Tabular, ModelFamily::Linear] {
            let mut bound = Check::new(format!(
                "{objective} {family} loss <= bound (1+1e-6), 20 seeds x 500 steps (max ratio)"
            ));
            let mut mono = Check::new(format!(
                "{objective} {family} loss non-increasing (violating steps)"
            ));
            for seed in 0..20 {
                match convergence_case(family, objective, seed) {
                    Ok(r) => {
                        for row in r.rows.iter().filter(|row| row.asserted) {
                            if row.bound > 0.0 {
                                bound.max_of(row.loss / row.bound);
                            }
                            bound.record(row.within_bound());
                        }
                        let bad = r.monotonicity_violations().len();
                        mono.max_of(bad as f64);
                        mono.record(bad == 0);
                    }
                    Err(_) => {
                        bound.record(false);
                        mono.record(false);
                    }
                }
            }
            out.push(bound);
            out.push(mono);
        }
    }
    out
}

/// Steps a frozen-target TABULAR + LCO_KLD run needs to reach TV < 1e-6,
/// or `None` within `max_steps`.
pub fn recovery_case(seed: u64, max_steps: usize) -> Result<Option<usize>> {
    let mut rng = case_rng(900, seed as usize);
    let v = rng.random_range(3..=8);
    let scorer = logits(uniform_vec(&mut rng, v, 1.0));
    let row = lco_core::target::log_probs_from_logits(&scorer)?;
    let env = ToyEnvironment::new(
        v,
        1,
        RewardRule::ScorerTable {
            rows: vec![vec![0.0; v]],
        },
    )?;
    let model = PolicyModel::for_env(
        ModelFamily::Tabular,
        &env,
        &Init::Uniform { scale: 1.0 },
        seed,
    )?;
    let z_old = model.forward(&[])?;
    let a = AdvantageVector::dense(row.clone())?;
    let pi_star = OptimalTarget::new(&z_old, &a, 1.0)?.pi_star().clone();
    let config = TrainerConfig {
        objective: ObjectiveKind::LcoKld,
        learning_rate: 0.5,
        steps: max_steps,
        beta: 1.0,
        estimator: EstimatorSpec::DenseLogprob { rows: vec![row] },
        seed,
        snapshot_interval: max_steps + 1,
        ..TrainerConfig::default()
    };
    let mut trainer = Trainer::new(model, env, config)?;
    for step in 1..=max_steps {
        trainer.train_step()?;
        if total_variation(&trainer.model().forward(&[])?.softmax(), &pi_star)? < 1e-6 {
            return Ok(Some(step));
        }
    }
    Ok(None)
}

fn recovery_suite() -> Vec<Check> {
    let mut check =
        Check::new("TABULAR LCO_KLD frozen targets reach TV < 1e-6 within 1e4 steps (max steps)");
    for seed in 0..20 {
        match recovery_case(seed, 10_000) {
            Ok(Some(steps)) => {
                check.max_of(steps as f64);
                check.record(true);
            }
            _ => check.record(false),
        }
    }
    vec![check]
}

/// Human-readable report, one line per suite followed by its checks.
pub fn format_report(reports: &[SuiteReport]) -> String {
    let mut s = String::new();
    for r in reports {
        let (p, t) = r.counts();
        s.push_str(&format!(
            "{:<5} {:<18} {p}/{t} cases  ({:.2}s)\n",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.elapsed.as_secs_f64()
        ));
        for c in &r.checks {
            s.push_str(&format!(
                "      {} {:>5}/{:<5} {}  worst={:.3e}\n",
                if c.ok() { "ok  " } else { "FAIL" },
                c.passed,
                c.total,
                c.label,
                c.worst
            ));
        }
    }
    s
}
