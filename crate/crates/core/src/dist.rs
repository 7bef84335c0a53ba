//! Probability primitives over a finite action vocabulary.
//!
//! Everything here is a pure function of its inputs. Logits are plain `f64`
//! slices; [`LogitVector`] and [`ProbVector`] are validated owners for the
//! places where an invariant has to travel with the data.

use std::ops::Deref;

use rand::Rng;

use crate::error::{LcoError, Result};

/// Absolute tolerance on the total mass of a [`ProbVector`].
pub const MASS_TOLERANCE: f64 = 1e-12;

/// Standard-deviation floor used by [`Normalization::CenterScale`].
pub const STD_FLOOR: f64 = 1e-8;

/// Finite logits over a vocabulary of at least two actions.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(LcoError::invalid(format!(
                "logit vector needs at least 2 entries, got {}",
                values.len()
            )));
        }
        check_finite(&values, "logits")?;
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Result<Self> {
        Self::new(vec![0.0; len])
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn softmax(&self) -> ProbVector {
        ProbVector(softmax_unchecked(&self.0))
    }
}

impl Deref for LogitVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// A probability distribution: non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(LcoError::invalid("empty distribution"));
        }
        check_finite(&values, "probabilities")?;
        if let Some(i) = values.iter().position(|&p| p < 0.0) {
            return Err(LcoError::invalid(format!(
                "negative probability at index {i}"
            )));
        }
        let mass: f64 = values.iter().sum();
        if (mass - 1.0).abs() > MASS_TOLERANCE {
            return Err(LcoError::invalid(format!(
                "probabilities sum to {mass}, not 1"
            )));
        }
        Ok(Self(values))
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        check_finite(weights, "weights")?;
        if weights.iter().any(|&w| w < 0.0) {
            return Err(LcoError::invalid("negative weight"));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(LcoError::invalid("weights have zero total mass"));
        }
        Ok(Self(weights.iter().map(|w| w / total).collect()))
    }

    pub fn uniform(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(LcoError::invalid("empty distribution"));
        }
        Ok(Self(vec![1.0 / len as f64; len]))
    }

    pub fn one_hot(len: usize, index: usize) -> Result<Self> {
        check_index(index, len)?;
        let mut v = vec![0.0; len];
        v[index] = 1.0;
        Ok(Self(v))
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ProbVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Per-action advantages, optionally carrying the set of actions with real signal.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageVector {
    values: Vec<f64>,
    mask: Option<Vec<usize>>,
}

impl AdvantageVector {
    pub fn dense(values: Vec<f64>) -> Result<Self> {
        check_finite(&values, "advantages")?;
        Ok(Self { values, mask: None })
    }

    /// Advantage `value` at `index`, exact zeros elsewhere.
    pub fn sparse(len: usize, index: usize, value: f64) -> Result<Self> {
        check_index(index, len)?;
        if !value.is_finite() {
            return Err(LcoError::invalid("non-finite advantage"));
        }
        let mut values = vec![0.0; len];
        values[index] = value;
        Ok(Self {
            values,
            mask: Some(vec![index]),
        })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
            mask: None,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> Option<&[usize]> {
        self.mask.as_deref()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, index: usize) -> f64 {
        self.values[index]
    }

    /// Euclidean norm.
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|a| a * a).sum::<f64>().sqrt()
    }
}

pub(crate) fn check_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(LcoError::invalid(format!(
            "non-finite {what} at index {i}: {}",
            values[i]
        ))),
        None => Ok(()),
    }
}

pub(crate) fn check_index(index: usize, len: usize) -> Result<()> {
    if index >= len {
        return Err(LcoError::invalid(format!(
            "action index {index} out of range for vocabulary of {len}"
        )));
    }
    Ok(())
}

pub(crate) fn check_same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(LcoError::invalid(format!("length mismatch: {a} vs {b}")));
    }
    Ok(())
}

fn max_of(z: &[f64]) -> f64 {
    z.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// `log Σ exp(z_i)` with the max shifted out.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = max_of(z);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + z.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_unchecked(z: &[f64]) -> Vec<f64> {
    let m = max_of(z);
    let mut out: Vec<f64> = z.iter().map(|&x| (x - m).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

pub fn softmax(z: &[f64]) -> Result<ProbVector> {
    if z.is_empty() {
        return Err(LcoError::invalid("empty logit vector"));
    }
    check_finite(z, "logits")?;
    Ok(ProbVector(softmax_unchecked(z)))
}

pub fn log_softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(LcoError::invalid("empty logit vector"));
    }
    check_finite(z, "logits")?;
    let m = max_of(z);
    let shifted: Vec<f64> = z.iter().map(|&x| x - m).collect();
    let lse = shifted.iter().map(|x| x.exp()).sum::<f64>().ln();
    Ok(shifted.into_iter().map(|x| x - lse).collect())
}

/// Shannon entropy in nats, with `0 · log 0 = 0`.
pub fn entropy(p: &ProbVector) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// One term `(q − p) − p ln(q/p)` of `KL(p ‖ q)`. The `q − p` parts sum to
/// zero over normalized vectors; keeping them makes every term non-negative
/// and, with the series below, accurate when `q ≈ p`.
pub(crate) fn kl_term(p: f64, q: f64) -> f64 {
    if p == 0.0 {
        return q;
    }
    let r = (q - p) / p;
    if r.abs() < 1e-2 {
        // r − ln(1 + r) = Σ_{k≥2} (−r)^k / k
        let mut sum = 0.0;
        for k in (2..=14).rev() {
            sum = sum * -r + 1.0 / k as f64;
        }
        p * r * r * sum
    } else {
        (q - p) - p * (q / p).ln()
    }
}

/// `KL(p ‖ q)` in nats.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    check_same_len(p.len(), q.len())?;
    let mut total = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q.iter()).enumerate() {
        if qi == 0.0 && pi > 0.0 {
            return Err(LcoError::DivergenceUndefined { index: i });
        }
        total += kl_term(pi, qi);
    }
    Ok(total)
}

pub fn total_variation(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    check_same_len(p.len(), q.len())?;
    Ok(0.5
        * p.iter()
            .zip(q.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>())
}

/// How [`normalize_advantages`] rescales after centering.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Normalization {
    #[default]
    Center,
    /// Center, then divide by the population standard deviation when it exceeds `floor`.
    CenterScale { floor: f64 },
}

/// Centers scalar samples; shared by the vector and per-sample normalizers.
pub fn normalize_in_place(values: &mut [f64], mode: Normalization) {
    if values.is_empty() {
        return;
    }
    let n = values.len() as f64;
    let mean = pairwise_sum(values) / n;
    values.iter_mut().for_each(|v| *v -= mean);
    // second pass removes the residual left by the first subtraction
    let residual = pairwise_sum(values) / n;
    values.iter_mut().for_each(|v| *v -= residual);
    if let Normalization::CenterScale { floor } = mode {
        let std = (values.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        if std > floor {
            values.iter_mut().for_each(|v| *v /= std);
        }
    }
}

/// Centers the advantages over the whole vocabulary.
///
/// The result is dense: centering moves mass onto unmasked actions, so any
/// sparse mask is dropped.
pub fn normalize_advantages(a: &AdvantageVector, mode: Normalization) -> AdvantageVector {
    let mut values = a.values.clone();
    normalize_in_place(&mut values, mode);
    AdvantageVector { values, mask: None }
}

/// Draws an action after temperature scaling and nucleus (top-p) truncation.
///
/// Truncation keeps the smallest descending-probability prefix whose mass
/// reaches `top_p`; equal probabilities are ordered by lower index.
pub fn sample_action<R: Rng + ?Sized>(
    p: &ProbVector,
    temperature: f64,
    top_p: f64,
    rng: &mut R,
) -> Result<usize> {
    let weights = nucleus_distribution(p, temperature, top_p)?;
    let u: f64 = rng.random::<f64>();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        acc += w;
        last = i;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(last)
}

/// The renormalized distribution [`sample_action`] draws from.
pub fn nucleus_distribution(p: &ProbVector, temperature: f64, top_p: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(LcoError::invalid(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(LcoError::invalid(format!(
            "top_p must be in (0, 1], got {top_p}"
        )));
    }
    let scaled: Vec<f64> = p
        .iter()
        .map(|&x| {
            if x > 0.0 {
                x.ln() / temperature
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let tempered = softmax_unchecked(&scaled);

    let mut order: Vec<usize> = (0..tempered.len()).collect();
    order.sort_by(|&a, &b| tempered[b].total_cmp(&tempered[a]).then(a.cmp(&b)));

    let mut kept = vec![0.0; tempered.len()];
    let mut mass = 0.0;
    for &i in &order {
        if tempered[i] == 0.0 {
            break;
        }
        kept[i] = tempered[i];
        mass += tempered[i];
        if mass + 1e-12 >= top_p {
            break;
        }
    }
    kept.iter_mut().for_each(|w| *w /= mass);
    Ok(kept)
}

/// Fixed-order pairwise summation; the result does not depend on how
/// callers chunk the work.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 8;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_symmetric_inputs() {
        assert_eq!(&*softmax(&[0.0, 0.0]).unwrap(), &[0.5, 0.5]);
        assert_eq!(&*softmax(&[0.0; 4]).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(
            softmax(&[0.0, f64::NAN]),
            Err(LcoError::InvalidInput(_))
        ));
        assert!(matches!(
            log_softmax(&[f64::INFINITY, 0.0]),
            Err(LcoError::InvalidInput(_))
        ));
        assert!(LogitVector::new(vec![1.0]).is_err());
    }

    #[test]
    fn log_softmax_constant_rows() {
        assert!(close(
            &log_softmax(&[0.0, 0.0]).unwrap(),
            &[-LN2, -LN2],
            1e-15
        ));
        for a in [-700.0, -3.5, 0.0, 12.0, 1e6] {
            let ls = log_softmax(&[a, a, a]).unwrap();
            assert!(close(&ls, &[-(3f64.ln()); 3], 1e-15), "{a}: {ls:?}");
        }
    }

    #[test]
    fn entropy_edges() {
        assert!((entropy(&ProbVector::uniform(4).unwrap()) - 4f64.ln()).abs() < 1e-15);
        assert_eq!(entropy(&ProbVector::one_hot(5, 2).unwrap()), 0.0);
    }

    #[test]
    fn kl_examples_and_support() {
        let p = ProbVector::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let hot = ProbVector::one_hot(6, 4).unwrap();
        let uni = ProbVector::uniform(6).unwrap();
        assert!((kl_divergence(&hot, &uni).unwrap() - 6f64.ln()).abs() < 1e-15);
        assert_eq!(
            kl_divergence(&uni, &hot),
            Err(LcoError::DivergenceUndefined { index: 0 })
        );
    }

    #[test]
    fn total_variation_examples() {
        let a = ProbVector::new(vec![0.7, 0.3]).unwrap();
        let b = ProbVector::new(vec![0.3, 0.7]).unwrap();
        assert!((total_variation(&a, &b).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(total_variation(&a, &a).unwrap(), 0.0);
        let x = ProbVector::one_hot(3, 0).unwrap();
        let y = ProbVector::one_hot(3, 2).unwrap();
        assert_eq!(total_variation(&x, &y).unwrap(), 1.0);
        assert!(total_variation(&a, &x).is_err());
    }

    #[test]
    fn normalize_examples() {
        let run = |v: Vec<f64>| {
            normalize_advantages(&AdvantageVector::dense(v).unwrap(), Normalization::Center)
                .values()
                .to_vec()
        };
        assert_eq!(run(vec![1.0, -1.0]), vec![1.0, -1.0]);
        assert_eq!(run(vec![2.0, 2.0, 2.0]), vec![0.0, 0.0, 0.0]);
        assert_eq!(run(vec![3.0, 1.0, -1.0, 1.0]), vec![2.0, 0.0, -2.0, 0.0]);
    }

    #[test]
    fn normalize_scale_mode_respects_floor() {
        let flat = AdvantageVector::dense(vec![5.0; 3]).unwrap();
        let out = normalize_advantages(&flat, Normalization::CenterScale { floor: STD_FLOOR });
        assert_eq!(out.values(), &[0.0; 3]);
        let v = AdvantageVector::dense(vec![3.0, -1.0]).unwrap();
        let out = normalize_advantages(&v, Normalization::CenterScale { floor: STD_FLOOR });
        assert!(close(out.values(), &[1.0, -1.0], 1e-15));
    }

    #[test]
    fn sparse_advantage_mask() {
        let a = AdvantageVector::sparse(5, 3, 2.0).unwrap();
        assert_eq!(a.values(), &[0.0, 0.0, 0.0, 2.0, 0.0]);
        assert_eq!(a.mask(), Some(&[3usize][..]));
        assert!(AdvantageVector::sparse(5, 5, 1.0).is_err());
    }

    #[test]
    fn sampling_one_hot() {
        let p = ProbVector::one_hot(4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (t, top) in [(0.6, 0.95), (1.0, 1.0), (3.0, 0.1)] {
            for _ in 0..50 {
                assert_eq!(sample_action(&p, t, top, &mut rng).unwrap(), 2);
            }
        }
    }

    #[test]
    fn nucleus_prefix() {
        let p = ProbVector::new(vec![0.5, 0.3, 0.2]).unwrap();
        let w = nucleus_distribution(&p, 1.0, 0.7).unwrap();
        assert!(close(&w, &[0.625, 0.375, 0.0], 1e-15));
    }

    #[test]
    fn nucleus_ties_prefer_lower_index() {
        let p = ProbVector::uniform(4).unwrap();
        let w = nucleus_distribution(&p, 1.0, 0.5).unwrap();
        assert!(close(&w, &[0.5, 0.5, 0.0, 0.0], 1e-15));
    }

    #[test]
    fn sampling_rejects_bad_knobs() {
        let p = ProbVector::uniform(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_action(&p, 0.0, 1.0, &mut rng).is_err());
        assert!(sample_action(&p, 1.0, 0.0, &mut rng).is_err());
        assert!(sample_action(&p, 1.0, 1.5, &mut rng).is_err());
    }

    #[test]
    fn pairwise_matches_naive_on_small_inputs() {
        let v: Vec<f64> = (0..100).map(|i| i as f64 * 0.25).collect();
        assert_eq!(pairwise_sum(&v), v.iter().sum::<f64>());
    }
}
