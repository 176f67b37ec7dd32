//! Sampling-based estimators of `KL(p ‖ q)`.
//!
//! Every estimator here is an average of per-sample terms (Horvitz–Thompson
//! is the exception: it is a sum over the distinct sampled strings). The
//! per-sample terms are exposed separately so the [`crate::oracle`] module can
//! take exact expectations of the `M = 1` form by enumeration.
//!
//! Notation used below: `f(y) = log p(y) − log q(y)` and the control variate
//! `g(y) = q(y) / p(y)`, whose mean under `p` is one.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{PaddedSeq, Seq, TabularLM};
use crate::sampling::SampleBatch;

/// Pilot size used for the estimated optimal control-variate coefficient.
pub const DEFAULT_PILOT_SIZE: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum EstimatorId {
    /// Plain Monte Carlo.
    Mc,
    /// Horvitz–Thompson over the distinct strings of a with-replacement draw.
    Ht,
    /// Control variate `q/p − 1` with a fixed coefficient.
    Cv { alpha: f64 },
    /// Control variate with the coefficient estimated from a separate pilot batch.
    CvPilot,
    /// Rao–Blackwellized Monte Carlo.
    Rb,
    /// Importance-weighted MC with samples from an old policy.
    OffPolicyMc,
    /// Importance-weighted RB with samples from an old policy.
    OffPolicyRb,
    /// The trust-region style estimator `(π/π_old) · log(π_old/q)`.
    PpoMc,
    /// The naive Rao–Blackwellization of [`EstimatorId::PpoMc`]; biased.
    PpoRbNaive,
}

impl EstimatorId {
    /// Whether samples come from an old policy rather than from `p` itself.
    pub fn is_off_policy(self) -> bool {
        matches!(
            self,
            EstimatorId::OffPolicyMc | EstimatorId::OffPolicyRb | EstimatorId::PpoMc | EstimatorId::PpoRbNaive
        )
    }
}

impl fmt::Display for EstimatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EstimatorId::Mc => f.write_str("mc"),
            EstimatorId::Ht => f.write_str("ht"),
            EstimatorId::Cv { alpha } => write!(f, "cv={alpha}"),
            EstimatorId::CvPilot => f.write_str("cv-pilot"),
            EstimatorId::Rb => f.write_str("rb"),
            EstimatorId::OffPolicyMc => f.write_str("offpolicy-mc"),
            EstimatorId::OffPolicyRb => f.write_str("offpolicy-rb"),
            EstimatorId::PpoMc => f.write_str("ppo-mc"),
            EstimatorId::PpoRbNaive => f.write_str("ppo-rb-naive"),
        }
    }
}

impl FromStr for EstimatorId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let id = match s.trim() {
            "mc" => EstimatorId::Mc,
            "ht" => EstimatorId::Ht,
            "cv-pilot" => EstimatorId::CvPilot,
            "rb" => EstimatorId::Rb,
            "offpolicy-mc" => EstimatorId::OffPolicyMc,
            "offpolicy-rb" => EstimatorId::OffPolicyRb,
            "ppo-mc" => EstimatorId::PpoMc,
            "ppo-rb-naive" => EstimatorId::PpoRbNaive,
            other => match other.strip_prefix("cv=").map(str::parse::<f64>) {
                Some(Ok(alpha)) if alpha.is_finite() => EstimatorId::Cv { alpha },
                _ => return Err(Error::UnknownEstimator(other.to_string())),
            },
        };
        Ok(id)
    }
}

/// An estimate together with the per-sample terms it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub estimator: EstimatorId,
    pub value: f64,
    pub per_sample: Vec<f64>,
    pub m: usize,
    /// Set for estimators known not to target `KL(p ‖ q)`.
    pub biased: bool,
}

impl Estimate {
    fn mean_of(estimator: EstimatorId, per_sample: Vec<f64>, m: usize) -> Self {
        let value = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
        Estimate {
            estimator,
            value,
            per_sample,
            m,
            biased: false,
        }
    }

    /// Number of negative per-sample terms.
    pub fn nonneg_violations(&self) -> usize {
        self.per_sample.iter().filter(|&&t| t < 0.0).count()
    }

    /// One `estimator,M,seed,value,nonneg_violations` CSV row (no newline).
    pub fn csv_row(&self, seed: u64) -> String {
        format!(
            "{},{},{},{},{}",
            self.estimator,
            self.m,
            seed,
            self.value,
            self.nonneg_violations()
        )
    }
}

pub const ESTIMATE_CSV_HEADER: &str = "estimator,M,seed,value,nonneg_violations";

/// Inclusion probability of a string under with-replacement sampling of size `m`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InclusionProb {
    pub pi: f64,
    pub draws: usize,
}

impl InclusionProb {
    /// `1 − (1 − p)^m`, evaluated as `−expm1(m · ln_1p(−p))`.
    pub fn with_replacement(p: f64, draws: usize) -> Result<Self> {
        if draws == 0 {
            return Err(Error::InvalidArgument("HT design needs at least one draw".into()));
        }
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::SupportViolation(format!(
                "inclusion probability undefined for p(y)={p}"
            )));
        }
        let pi = if p == 1.0 {
            1.0
        } else {
            -(draws as f64 * (-p).ln_1p()).exp_m1()
        };
        Ok(InclusionProb { pi, draws })
    }
}

/// `f(y) = log p(y) − log q(y)`.
pub fn log_ratio(p: &TabularLM, q: &TabularLM, y: &Seq) -> Result<f64> {
    let lp = p.seq_logprob(y)?;
    let lq = q.seq_logprob(y)?;
    if lp == f64::NEG_INFINITY {
        return Err(Error::SupportViolation("sample has zero probability under p".into()));
    }
    if lq == f64::NEG_INFINITY {
        return Err(Error::SupportViolation("sample has zero probability under q".into()));
    }
    Ok(lp - lq)
}

/// Ratio `new(y) / old(y)`; `old(y)` must be positive.
pub fn importance_weight(new: &TabularLM, old: &TabularLM, y: &Seq) -> Result<f64> {
    let lo = old.seq_logprob(y)?;
    if lo == f64::NEG_INFINITY {
        return Err(Error::SupportViolation("sample has zero probability under π_old".into()));
    }
    Ok((new.seq_logprob(y)? - lo).exp())
}

fn per_sample<F>(batch: &SampleBatch, term: F) -> Result<Vec<f64>>
where
    F: FnMut(&Seq) -> Result<f64>,
{
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    batch.seqs().iter().map(term).collect()
}

pub fn mc_estimate(batch: &SampleBatch, p: &TabularLM, q: &TabularLM) -> Result<Estimate> {
    p.check_compatible(q)?;
    let terms = per_sample(batch, |y| log_ratio(p, q, y))?;
    Ok(Estimate::mean_of(EstimatorId::Mc, terms, batch.len()))
}

/// Horvitz–Thompson estimate over a set of distinct strings drawn with
/// replacement in `draws` draws. `per_sample` holds the weighted term of each
/// distinct string and `value` is their sum.
pub fn ht_estimate(sample_set: &[Seq], p: &TabularLM, q: &TabularLM, draws: usize) -> Result<Estimate> {
    p.check_compatible(q)?;
    if sample_set.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut terms = Vec::with_capacity(sample_set.len());
    for y in sample_set {
        let py = p.seq_logprob(y)?.exp();
        let incl = InclusionProb::with_replacement(py, draws)?;
        terms.push(py / incl.pi * log_ratio(p, q, y)?);
    }
    Ok(Estimate {
        estimator: EstimatorId::Ht,
        value: terms.iter().sum(),
        per_sample: terms,
        m: draws,
        biased: false,
    })
}

/// Horvitz–Thompson estimate from a raw with-replacement batch: duplicates
/// are removed by exact string equality and the design size is the batch size.
pub fn ht_from_batch(batch: &SampleBatch, p: &TabularLM, q: &TabularLM) -> Result<Estimate> {
    let distinct: BTreeSet<&Seq> = batch.seqs().iter().collect();
    let set: Vec<Seq> = distinct.into_iter().cloned().collect();
    ht_estimate(&set, p, q, batch.len())
}

/// `f(y) + α (g(y) − 1)`.
pub fn cv_term(p: &TabularLM, q: &TabularLM, y: &Seq, alpha: f64) -> Result<f64> {
    let f = log_ratio(p, q, y)?;
    let t = f + alpha * (-f).exp_m1();
    if !t.is_finite() {
        return Err(Error::NonFinite(format!("control-variate term {t}")));
    }
    Ok(t)
}

pub fn cv_estimate(batch: &SampleBatch, p: &TabularLM, q: &TabularLM, alpha: f64) -> Result<Estimate> {
    p.check_compatible(q)?;
    if !alpha.is_finite() {
        return Err(Error::NonFinite(format!("alpha={alpha}")));
    }
    let terms = per_sample(batch, |y| cv_term(p, q, y, alpha))?;
    Ok(Estimate::mean_of(EstimatorId::Cv { alpha }, terms, batch.len()))
}

/// `−cov(f, g) / var(g)` from a pilot batch, with unbiased (`M − 1`) moments.
pub fn estimate_alpha_star(pilot: &SampleBatch, p: &TabularLM, q: &TabularLM) -> Result<f64> {
    p.check_compatible(q)?;
    let m = pilot.len();
    if m < 2 {
        return Err(Error::InvalidArgument(format!("pilot size {m} < 2")));
    }
    let fs = per_sample(pilot, |y| log_ratio(p, q, y))?;
    let gs: Vec<f64> = fs.iter().map(|f| (-f).exp()).collect();
    let mean_f = fs.iter().sum::<f64>() / m as f64;
    let mean_g = gs.iter().sum::<f64>() / m as f64;
    let denom = (m - 1) as f64;
    let cov = fs
        .iter()
        .zip(&gs)
        .map(|(f, g)| (f - mean_f) * (g - mean_g))
        .sum::<f64>()
        / denom;
    let var_g = gs.iter().map(|g| (g - mean_g).powi(2)).sum::<f64>() / denom;
    if !(var_g > 0.0) {
        return Err(Error::DegenerateVariance("pilot sample variance of q/p is zero".into()));
    }
    Ok(-cov / var_g)
}

/// Weighted variant of [`estimate_alpha_star`]: each string carries a
/// non-negative weight and moments are taken under the normalised weights.
/// Passing the full support weighted by `p` recovers the exact coefficient.
pub fn estimate_alpha_star_weighted(
    seqs: &[Seq],
    weights: &[f64],
    p: &TabularLM,
    q: &TabularLM,
) -> Result<f64> {
    p.check_compatible(q)?;
    if seqs.len() != weights.len() {
        return Err(Error::InvalidArgument("one weight per sequence required".into()));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::InvalidArgument("weights must be non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("weights sum to zero".into()));
    }
    let mut fs = Vec::with_capacity(seqs.len());
    for (y, &w) in seqs.iter().zip(weights) {
        fs.push(if w > 0.0 { log_ratio(p, q, y)? } else { 0.0 });
    }
    let gs: Vec<f64> = fs.iter().map(|f| (-f).exp()).collect();
    let wmean = |xs: &[f64]| xs.iter().zip(weights).map(|(x, w)| x * w).sum::<f64>() / total;
    let mean_f = wmean(&fs);
    let mean_g = wmean(&gs);
    let cov: f64 = (0..fs.len())
        .map(|i| weights[i] * (fs[i] - mean_f) * (gs[i] - mean_g))
        .sum::<f64>()
        / total;
    let var_g: f64 = (0..gs.len())
        .map(|i| weights[i] * (gs[i] - mean_g).powi(2))
        .sum::<f64>()
        / total;
    if !(var_g > 0.0) {
        return Err(Error::DegenerateVariance("weighted variance of q/p is zero".into()));
    }
    Ok(-cov / var_g)
}

/// Control-variate estimate whose coefficient comes from a separate pilot batch.
/// Returns the coefficient used alongside the estimate.
pub fn cv_pilot_estimate(
    pilot: &SampleBatch,
    batch: &SampleBatch,
    p: &TabularLM,
    q: &TabularLM,
) -> Result<(f64, Estimate)> {
    let alpha = estimate_alpha_star(pilot, p, q)?;
    let mut est = cv_estimate(batch, p, q, alpha)?;
    est.estimator = EstimatorId::CvPilot;
    Ok((alpha, est))
}

/// Exact next-symbol KL at 1-based padded position `n`.
pub fn position_kl(p: &TabularLM, q: &TabularLM, padded: &PaddedSeq, n: usize) -> Result<f64> {
    p.padded_next_dist(padded, n)?
        .kl_to(&q.padded_next_dist(padded, n)?)
}

/// Rao–Blackwellized term: the sum over padded positions `1..=|y|+1` of the
/// exact next-symbol KL at the sampled prefix.
pub fn rb_term(p: &TabularLM, q: &TabularLM, y: &Seq) -> Result<f64> {
    let tokens = y.tokens();
    let mut total = 0.0;
    for n in 0..=tokens.len() {
        total += p.next_dist(&tokens[..n])?.kl_to(&q.next_dist(&tokens[..n])?)?;
    }
    Ok(total)
}

pub fn rb_estimate(batch: &SampleBatch, p: &TabularLM, q: &TabularLM) -> Result<Estimate> {
    p.check_compatible(q)?;
    let terms = per_sample(batch, |y| rb_term(p, q, y))?;
    Ok(Estimate::mean_of(EstimatorId::Rb, terms, batch.len()))
}

/// Log ratio of the symbol at 1-based padded position `n`.
pub fn stepwise_mc_term(p: &TabularLM, q: &TabularLM, y: &Seq, n: usize) -> Result<f64> {
    let padded = PaddedSeq::new(y.clone());
    let dp = p.padded_next_dist(&padded, n)?;
    let dq = q.padded_next_dist(&padded, n)?;
    let sym = padded.symbol_at(n).unwrap_or(dp.eos());
    let (lp, lq) = (dp.log_prob(sym), dq.log_prob(sym));
    if lp == f64::NEG_INFINITY || lq == f64::NEG_INFINITY {
        return Err(Error::SupportViolation(format!("zero step probability at position {n}")));
    }
    Ok(lp - lq)
}

fn check_position(n: usize) -> Result<()> {
    if n == 0 {
        Err(Error::InvalidArgument("positions are 1-based".into()))
    } else {
        Ok(())
    }
}

pub fn stepwise_mc(batch: &SampleBatch, p: &TabularLM, q: &TabularLM, n: usize) -> Result<Estimate> {
    check_position(n)?;
    let terms = per_sample(batch, |y| stepwise_mc_term(p, q, y, n))?;
    Ok(Estimate::mean_of(EstimatorId::Mc, terms, batch.len()))
}

pub fn stepwise_rb(batch: &SampleBatch, p: &TabularLM, q: &TabularLM, n: usize) -> Result<Estimate> {
    check_position(n)?;
    let terms = per_sample(batch, |y| position_kl(p, q, &PaddedSeq::new(y.clone()), n))?;
    Ok(Estimate::mean_of(EstimatorId::Rb, terms, batch.len()))
}

/// Sum of step-wise MC terms over positions `1..=horizon`.
pub fn mc_truncated_term(p: &TabularLM, q: &TabularLM, y: &Seq, horizon: usize) -> Result<f64> {
    (1..=horizon).map(|n| stepwise_mc_term(p, q, y, n)).sum()
}

/// Sum of exact position KLs over positions `1..=horizon`.
pub fn rb_truncated_term(p: &TabularLM, q: &TabularLM, y: &Seq, horizon: usize) -> Result<f64> {
    let padded = PaddedSeq::new(y.clone());
    (1..=horizon).map(|n| position_kl(p, q, &padded, n)).sum()
}

pub fn mc_truncated(batch: &SampleBatch, p: &TabularLM, q: &TabularLM, horizon: usize) -> Result<Estimate> {
    check_position(horizon)?;
    let terms = per_sample(batch, |y| mc_truncated_term(p, q, y, horizon))?;
    Ok(Estimate::mean_of(EstimatorId::Mc, terms, batch.len()))
}

pub fn rb_truncated(batch: &SampleBatch, p: &TabularLM, q: &TabularLM, horizon: usize) -> Result<Estimate> {
    check_position(horizon)?;
    let terms = per_sample(batch, |y| rb_truncated_term(p, q, y, horizon))?;
    Ok(Estimate::mean_of(EstimatorId::Rb, terms, batch.len()))
}

fn check_triple(pi: &TabularLM, pi_old: &TabularLM, q: &TabularLM) -> Result<()> {
    pi.check_compatible(pi_old)?;
    pi.check_compatible(q)
}

/// `(π/π_old)(y) · log(π/q)(y)` for `y ~ π_old`.
pub fn offpolicy_mc(batch: &SampleBatch, pi: &TabularLM, pi_old: &TabularLM, q: &TabularLM) -> Result<Estimate> {
    check_triple(pi, pi_old, q)?;
    let terms = per_sample(batch, |y| Ok(importance_weight(pi, pi_old, y)? * log_ratio(pi, q, y)?))?;
    Ok(Estimate::mean_of(EstimatorId::OffPolicyMc, terms, batch.len()))
}

/// `(π/π_old)(y) · Σ_n KL(π(·|y_{<n}) ‖ q(·|y_{<n}))` for `y ~ π_old`.
pub fn offpolicy_rb(batch: &SampleBatch, pi: &TabularLM, pi_old: &TabularLM, q: &TabularLM) -> Result<Estimate> {
    check_triple(pi, pi_old, q)?;
    let terms = per_sample(batch, |y| Ok(importance_weight(pi, pi_old, y)? * rb_term(pi, q, y)?))?;
    Ok(Estimate::mean_of(EstimatorId::OffPolicyRb, terms, batch.len()))
}

/// `(π/π_old)(y) · log(π_old/q)(y)` for `y ~ π_old`. Its mean is
/// `KL(π ‖ q) − KL(π ‖ π_old)`, not `KL(π ‖ q)`.
pub fn ppo_mc(batch: &SampleBatch, pi: &TabularLM, pi_old: &TabularLM, q: &TabularLM) -> Result<Estimate> {
    check_triple(pi, pi_old, q)?;
    let terms = per_sample(batch, |y| Ok(importance_weight(pi, pi_old, y)? * log_ratio(pi_old, q, y)?))?;
    Ok(Estimate::mean_of(EstimatorId::PpoMc, terms, batch.len()))
}

/// Replaces the log ratio of [`ppo_mc`] with per-position expectations under
/// `π_old`. This does not estimate the same quantity as [`ppo_mc`]; the
/// result is flagged `biased`.
pub fn ppo_rb_naive(batch: &SampleBatch, pi: &TabularLM, pi_old: &TabularLM, q: &TabularLM) -> Result<Estimate> {
    check_triple(pi, pi_old, q)?;
    let terms = per_sample(batch, |y| Ok(importance_weight(pi, pi_old, y)? * rb_term(pi_old, q, y)?))?;
    let mut est = Estimate::mean_of(EstimatorId::PpoRbNaive, terms, batch.len());
    est.biased = true;
    Ok(est)
}

/// The single-sample (`M = 1`) term of an estimator.
///
/// `behavior` is the sampling policy `π_old` for off-policy estimators and
/// must be `None` otherwise. HT and pilot-based CV are not single-sample
/// estimators and are rejected.
pub fn single_sample_term(
    id: EstimatorId,
    p: &TabularLM,
    q: &TabularLM,
    behavior: Option<&TabularLM>,
    y: &Seq,
) -> Result<f64> {
    match (id, behavior) {
        (EstimatorId::Mc, None) => log_ratio(p, q, y),
        (EstimatorId::Cv { alpha }, None) => cv_term(p, q, y, alpha),
        (EstimatorId::Rb, None) => rb_term(p, q, y),
        (EstimatorId::OffPolicyMc, Some(old)) => Ok(importance_weight(p, old, y)? * log_ratio(p, q, y)?),
        (EstimatorId::OffPolicyRb, Some(old)) => Ok(importance_weight(p, old, y)? * rb_term(p, q, y)?),
        (EstimatorId::PpoMc, Some(old)) => Ok(importance_weight(p, old, y)? * log_ratio(old, q, y)?),
        (EstimatorId::PpoRbNaive, Some(old)) => Ok(importance_weight(p, old, y)? * rb_term(old, q, y)?),
        (EstimatorId::Ht | EstimatorId::CvPilot, _) => Err(Error::InvalidArgument(format!(
            "{id} has no single-sample form"
        ))),
        (_, None) => Err(Error::InvalidArgument(format!("{id} requires a behaviour policy"))),
        (_, Some(_)) => Err(Error::InvalidArgument(format!("{id} is on-policy"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (TabularLM, TabularLM) {
        (
            TabularLM::geometric(0.3, 3).unwrap(),
            TabularLM::geometric(0.5, 3).unwrap(),
        )
    }

    fn batch(p: &TabularLM, lens: &[usize]) -> SampleBatch {
        SampleBatch::from_seqs(p, lens.iter().map(|&l| Seq::new(vec![0; l])).collect()).unwrap()
    }

    const D: f64 = 0.08228287850505178;

    #[test]
    fn mc_examples() {
        let (p, q) = fixture();
        let e = mc_estimate(&batch(&p, &[1]), &p, &q).unwrap();
        assert!((e.value - (0.21f64 / 0.25).ln()).abs() < 1e-14);
        let e = mc_estimate(&batch(&p, &[0, 1]), &p, &q).unwrap();
        assert!((e.value - 0.081060).abs() < 1e-6);
        assert_eq!(mc_estimate(&batch(&p, &[0, 2, 3]), &p, &p).unwrap().value, 0.0);
    }

    #[test]
    fn ht_examples() {
        let (p, q) = fixture();
        let e = ht_estimate(&[Seq::new(vec![0])], &p, &q, 1).unwrap();
        assert!((e.value + 0.174353).abs() < 1e-6);
        let mc = mc_estimate(&batch(&p, &[1]), &p, &q).unwrap();
        assert!((e.value - mc.value).abs() < 1e-14);
        let incl = InclusionProb::with_replacement(0.21, 2).unwrap();
        assert!((incl.pi - 0.3759).abs() < 1e-14);
        assert!(ht_estimate(&[Seq::empty()], &p, &q, 0).is_err());
    }

    #[test]
    fn ht_dedupes_batches() {
        let (p, q) = fixture();
        let e = ht_from_batch(&batch(&p, &[1, 1, 0]), &p, &q).unwrap();
        assert_eq!(e.per_sample.len(), 2);
        assert_eq!(e.m, 3);
    }

    #[test]
    fn cv_examples() {
        let (p, q) = fixture();
        let b = batch(&p, &[1]);
        let e = cv_estimate(&b, &p, &q, 1.0).unwrap();
        assert!((e.value - 0.016123).abs() < 1e-6);
        assert!(e.value >= 0.0);
        let b2 = batch(&p, &[0, 1, 3]);
        assert_eq!(
            cv_estimate(&b2, &p, &q, 0.0).unwrap().value,
            mc_estimate(&b2, &p, &q).unwrap().value
        );
        let alpha_star = 0.5543980924299976;
        let e = cv_estimate(&b, &p, &q, alpha_star).unwrap();
        assert!((e.value + 0.06875375049144493).abs() < 1e-12);
        assert!(cv_estimate(&b, &p, &q, f64::NAN).is_err());
    }

    #[test]
    fn pilot_alpha_star_needs_variation() {
        let (p, _) = fixture();
        let pilot = batch(&p, &[0, 1, 2]);
        assert!(matches!(
            estimate_alpha_star(&pilot, &p, &p),
            Err(Error::DegenerateVariance(_))
        ));
        assert!(estimate_alpha_star(&batch(&p, &[1]), &p, &p).is_err());
    }

    #[test]
    fn weighted_pilot_over_full_support_is_exact() {
        let (p, q) = fixture();
        let seqs: Vec<Seq> = (0..=3).map(|l| Seq::new(vec![0; l])).collect();
        let w: Vec<f64> = seqs.iter().map(|y| p.seq_logprob(y).unwrap().exp()).collect();
        let a = estimate_alpha_star_weighted(&seqs, &w, &p, &q).unwrap();
        assert!((a - 0.5543980924299976).abs() < 1e-10);
    }

    #[test]
    fn rb_examples() {
        let (p, q) = fixture();
        let rb = |l| rb_estimate(&batch(&p, &[l]), &p, &q).unwrap().value;
        assert!((rb(0) - D).abs() < 1e-14);
        assert!((rb(1) - 2.0 * D).abs() < 1e-14);
        assert!((rb(2) - 3.0 * D).abs() < 1e-14);
        assert!((rb(3) - 3.0 * D).abs() < 1e-14);
        assert!((rb(3) - 0.246849).abs() < 1e-6);
    }

    #[test]
    fn stepwise_examples() {
        let (p, q) = fixture();
        let b = batch(&p, &[1]);
        assert!((stepwise_mc(&b, &p, &q, 1).unwrap().value - (0.6f64).ln()).abs() < 1e-14);
        assert_eq!(stepwise_mc(&b, &p, &q, 5).unwrap().value, 0.0);
        assert_eq!(stepwise_rb(&batch(&p, &[3]), &p, &q, 5).unwrap().value, 0.0);
        let b = batch(&p, &[0, 1, 2, 3, 3]);
        let full = rb_estimate(&b, &p, &q).unwrap();
        let trunc = rb_truncated(&b, &p, &q, 4).unwrap();
        assert_eq!(full.per_sample, trunc.per_sample);
        let mc = mc_estimate(&b, &p, &q).unwrap();
        let mct = mc_truncated(&b, &p, &q, 4).unwrap();
        for (a, b) in mc.per_sample.iter().zip(&mct.per_sample) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(stepwise_mc(&b, &p, &q, 0).is_err());
    }

    #[test]
    fn off_policy_reduces_to_on_policy() {
        let (p, q) = fixture();
        let b = batch(&p, &[0, 1, 2, 3]);
        let mc = mc_estimate(&b, &p, &q).unwrap();
        let off = offpolicy_mc(&b, &p, &p, &q).unwrap();
        assert!((mc.value - off.value).abs() < 1e-14);
        let rb = rb_estimate(&b, &p, &q).unwrap();
        let off = offpolicy_rb(&b, &p, &p, &q).unwrap();
        assert!((rb.value - off.value).abs() < 1e-14);
    }

    #[test]
    fn ppo_naive_is_flagged() {
        let (p, q) = fixture();
        let old = TabularLM::geometric(0.4, 3).unwrap();
        let b = batch(&old, &[0, 2]);
        assert!(ppo_rb_naive(&b, &p, &old, &q).unwrap().biased);
        assert!(!ppo_mc(&b, &p, &old, &q).unwrap().biased);
        assert!(ppo_mc(&b, &p, &q, &q).unwrap().value.abs() < 1e-15);
    }

    #[test]
    fn support_violations_surface() {
        let p = TabularLM::geometric(0.3, 3).unwrap();
        let q = TabularLM::new(p.alphabet().clone(), 0, 3, vec![0.0, -1e308]).unwrap();
        // q assigns exp(-huge) = 0 to EOS, so every string is impossible under q.
        let b = batch(&p, &[1]);
        assert!(matches!(mc_estimate(&b, &p, &q), Err(Error::SupportViolation(_))));
        assert!(matches!(rb_estimate(&b, &p, &q), Err(Error::SupportViolation(_))));
    }

    #[test]
    fn estimator_ids_parse() {
        for s in ["mc", "ht", "cv=1", "cv=0.25", "cv-pilot", "rb", "offpolicy-mc", "ppo-rb-naive"] {
            let id: EstimatorId = s.parse().unwrap();
            assert_eq!(id.to_string(), s);
        }
        assert!("kl3".parse::<EstimatorId>().is_err());
        assert!("cv=abc".parse::<EstimatorId>().is_err());
    }

    #[test]
    fn csv_row_layout() {
        let (p, q) = fixture();
        let e = mc_estimate(&batch(&p, &[1, 0]), &p, &q).unwrap();
        let row = e.csv_row(17);
        assert!(row.starts_with("mc,2,17,"));
        assert!(row.ends_with(",1"));
    }
}
