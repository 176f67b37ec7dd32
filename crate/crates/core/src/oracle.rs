//! Exact quantities by enumerating the finite support of a [`TabularLM`].
//!
//! Prefixes and strings are visited depth-first with children in symbol
//! order; a string is emitted after all of its extensions (EOS last).

use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimators::{ht_estimate, log_ratio, single_sample_term, EstimatorId};
use crate::gradients::{grad_log_prob, GradVector};
use crate::model::{Alphabet, NextDist, Seq, TabularLM};

/// Largest number of ordered draws enumerated by [`exact_ht_moments`].
const MAX_HT_TUPLES: usize = 5_000_000;

/// Every string of length at most `max_len`, in enumeration order.
pub fn support(model: &TabularLM) -> Vec<Seq> {
    fn walk(model: &TabularLM, prefix: &mut Vec<usize>, out: &mut Vec<Seq>) {
        if prefix.len() < model.max_len() {
            for s in 0..model.alphabet().len() {
                prefix.push(s);
                walk(model, prefix, out);
                prefix.pop();
            }
        }
        out.push(Seq::new(prefix.clone()));
    }
    let mut out = Vec::new();
    walk(model, &mut Vec::new(), &mut out);
    out
}

/// Visits every prefix of length at most `max_len` in pre-order with its log
/// prefix probability and next-symbol distribution.
pub fn for_each_prefix<F>(model: &TabularLM, mut visit: F) -> Result<()>
where
    F: FnMut(&[usize], f64, &NextDist) -> Result<()>,
{
    fn walk<F>(model: &TabularLM, prefix: &mut Vec<usize>, logprob: f64, visit: &mut F) -> Result<()>
    where
        F: FnMut(&[usize], f64, &NextDist) -> Result<()>,
    {
        let dist = model.next_dist(prefix)?;
        visit(prefix, logprob, &dist)?;
        if prefix.len() < model.max_len() {
            for s in 0..model.alphabet().len() {
                prefix.push(s);
                walk(model, prefix, logprob + dist.log_prob(s), visit)?;
                prefix.pop();
            }
        }
        Ok(())
    }
    walk(model, &mut Vec::new(), 0.0, &mut visit)
}

/// Contribution of one prefix to the local decomposition of the KL.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixTerm {
    pub prefix: Seq,
    /// Prefix probability under `p`.
    pub weight: f64,
    /// `KL(p(·|prefix) ‖ q(·|prefix))`.
    pub local_kl: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactReport {
    pub kl: f64,
    /// Populated by [`exact_kl_local`]; empty for [`exact_kl_enum`].
    pub per_prefix: Vec<PrefixTerm>,
}

#[derive(Serialize)]
struct PrefixJson<'a> {
    prefix: &'a str,
    weight: f64,
    local_kl: f64,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    kl: f64,
    per_prefix: Vec<PrefixJson<'a>>,
}

impl ExactReport {
    pub fn to_json(&self, alphabet: &Alphabet) -> Result<String> {
        let rendered: Vec<String> = self.per_prefix.iter().map(|t| alphabet.render(&t.prefix)).collect();
        let json = ReportJson {
            kl: self.kl,
            per_prefix: self
                .per_prefix
                .iter()
                .zip(&rendered)
                .map(|(t, s)| PrefixJson {
                    prefix: s,
                    weight: t.weight,
                    local_kl: t.local_kl,
                })
                .collect(),
        };
        Ok(serde_json::to_string(&json)?)
    }
}

/// `KL(p ‖ q) = Σ_y p(y) (log p(y) − log q(y))` over the whole support.
pub fn exact_kl_enum(p: &TabularLM, q: &TabularLM) -> Result<ExactReport> {
    p.check_compatible(q)?;
    let mut kl = 0.0;
    for y in support(p) {
        let lp = p.seq_logprob(&y)?;
        if lp == f64::NEG_INFINITY {
            continue;
        }
        let lq = q.seq_logprob(&y)?;
        if lq == f64::NEG_INFINITY {
            return Err(Error::SupportViolation(format!(
                "q assigns zero probability to a string with p={}",
                lp.exp()
            )));
        }
        kl += lp.exp() * (lp - lq);
    }
    Ok(ExactReport {
        kl,
        per_prefix: Vec::new(),
    })
}

/// Shorthand for `exact_kl_enum(p, q)?.kl`.
pub fn exact_kl(p: &TabularLM, q: &TabularLM) -> Result<f64> {
    Ok(exact_kl_enum(p, q)?.kl)
}

/// `KL(p ‖ q) = Σ_prefix π_p(prefix) · KL(p(·|prefix) ‖ q(·|prefix))` over
/// prefixes shorter than the horizon.
pub fn exact_kl_local(p: &TabularLM, q: &TabularLM) -> Result<ExactReport> {
    p.check_compatible(q)?;
    let mut per_prefix = Vec::new();
    let mut kl = 0.0;
    for_each_prefix(p, |prefix, logprob, dp| {
        if p.at_horizon(prefix) {
            return Ok(());
        }
        let weight = logprob.exp();
        let local_kl = if weight > 0.0 {
            dp.kl_to(&q.next_dist(prefix)?)?
        } else {
            0.0
        };
        kl += weight * local_kl;
        per_prefix.push(PrefixTerm {
            prefix: Seq::new(prefix.to_vec()),
            weight,
            local_kl,
        });
        Ok(())
    })?;
    Ok(ExactReport { kl, per_prefix })
}

/// Mean and variance of a single-sample statistic under the sampling model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentReport {
    pub mean: f64,
    pub variance: f64,
    /// Number of strings with positive probability.
    pub support_size: usize,
}

/// Exact moments of `stat(y)` for `y ~ sampler`.
pub fn exact_moments<F>(sampler: &TabularLM, mut stat: F) -> Result<MomentReport>
where
    F: FnMut(&Seq) -> Result<f64>,
{
    let mut outcomes = Vec::new();
    for y in support(sampler) {
        let w = sampler.seq_logprob(&y)?.exp();
        if w > 0.0 {
            outcomes.push((w, stat(&y)?));
        }
    }
    Ok(moments_of(&outcomes))
}

fn moments_of(outcomes: &[(f64, f64)]) -> MomentReport {
    let mean: f64 = outcomes.iter().map(|(w, v)| w * v).sum();
    let variance: f64 = outcomes.iter().map(|(w, v)| w * (v - mean).powi(2)).sum();
    MomentReport {
        mean,
        variance,
        support_size: outcomes.len(),
    }
}

/// Exact moments of the single-sample form of an estimator.
///
/// Samples are drawn from `p`, or from `behavior` (π_old) for off-policy
/// estimators, where `p` plays the role of the current policy π.
pub fn exact_estimator_moments(
    id: EstimatorId,
    p: &TabularLM,
    q: &TabularLM,
    behavior: Option<&TabularLM>,
) -> Result<MomentReport> {
    p.check_compatible(q)?;
    if let Some(b) = behavior {
        p.check_compatible(b)?;
    }
    let sampler = if id.is_off_policy() {
        behavior.ok_or_else(|| Error::InvalidArgument(format!("{id} requires a behaviour policy")))?
    } else {
        p
    };
    exact_moments(sampler, |y| single_sample_term(id, p, q, behavior, y))
}

/// Exact moments of the Horvitz–Thompson estimator over all ordered
/// with-replacement draws of size `draws` from `p`.
pub fn exact_ht_moments(p: &TabularLM, q: &TabularLM, draws: usize) -> Result<MomentReport> {
    p.check_compatible(q)?;
    if draws == 0 {
        return Err(Error::InvalidArgument("HT design needs at least one draw".into()));
    }
    let mut atoms = Vec::new();
    for y in support(p) {
        let w = p.seq_logprob(&y)?.exp();
        if w > 0.0 {
            atoms.push((y, w));
        }
    }
    let n = atoms.len();
    let tuples = u32::try_from(draws)
        .ok()
        .and_then(|d| n.checked_pow(d))
        .filter(|&t| t <= MAX_HT_TUPLES)
        .ok_or_else(|| Error::InvalidArgument(format!("{n}^{draws} draws is too many to enumerate")))?;
    let mut outcomes = Vec::with_capacity(tuples);
    let mut idx = vec![0usize; draws];
    loop {
        let prob: f64 = idx.iter().map(|&i| atoms[i].1).product();
        let mut set: Vec<usize> = idx.clone();
        set.sort_unstable();
        set.dedup();
        let seqs: Vec<Seq> = set.iter().map(|&i| atoms[i].0.clone()).collect();
        outcomes.push((prob, ht_estimate(&seqs, p, q, draws)?.value));
        // odometer
        let mut k = 0;
        while k < draws {
            idx[k] += 1;
            if idx[k] < n {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
        if k == draws {
            break;
        }
    }
    let mut report = moments_of(&outcomes);
    report.support_size = n;
    Ok(report)
}

/// Exact moments of `f = log p/q` and `g = q/p` under `p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ControlVariateMoments {
    pub mean_f: f64,
    pub var_f: f64,
    pub var_g: f64,
    pub cov_fg: f64,
}

impl ControlVariateMoments {
    /// `−cov(f, g) / var(g)`.
    pub fn alpha_star(&self) -> Result<f64> {
        if !(self.var_g > 0.0) {
            return Err(Error::DegenerateVariance("var(q/p) is zero".into()));
        }
        Ok(-self.cov_fg / self.var_g)
    }

    /// Single-sample variance of the control-variate estimator at `alpha`.
    pub fn cv_variance(&self, alpha: f64) -> f64 {
        self.var_f + alpha * alpha * self.var_g + 2.0 * alpha * self.cov_fg
    }

    pub fn corr(&self) -> f64 {
        self.cov_fg / (self.var_f * self.var_g).sqrt()
    }
}

/// Requires mutual absolute continuity on the finite support, so that
/// `E_p[q/p] = 1`.
pub fn exact_cv_moments(p: &TabularLM, q: &TabularLM) -> Result<ControlVariateMoments> {
    p.check_compatible(q)?;
    let mut outcomes = Vec::new();
    for y in support(p) {
        let lp = p.seq_logprob(&y)?;
        let lq = q.seq_logprob(&y)?;
        match (lp == f64::NEG_INFINITY, lq == f64::NEG_INFINITY) {
            (true, true) => continue,
            (false, false) => {}
            _ => {
                return Err(Error::SupportViolation(
                    "p and q are not mutually absolutely continuous".into(),
                ))
            }
        }
        let f = log_ratio(p, q, &y)?;
        outcomes.push((lp.exp(), f, (lq - lp).exp()));
    }
    let mean_f: f64 = outcomes.iter().map(|(w, f, _)| w * f).sum();
    let var_f = outcomes.iter().map(|(w, f, _)| w * (f - mean_f).powi(2)).sum();
    let var_g = outcomes.iter().map(|(w, _, g)| w * (g - 1.0).powi(2)).sum();
    let cov_fg = outcomes
        .iter()
        .map(|(w, f, g)| w * (f - mean_f) * (g - 1.0))
        .sum();
    Ok(ControlVariateMoments {
        mean_f,
        var_f,
        var_g,
        cov_fg,
    })
}

/// `cov_p(f, g)`, which equals `−KL(p‖q) − KL(q‖p)`.
pub fn exact_cov_f_g(p: &TabularLM, q: &TabularLM) -> Result<f64> {
    Ok(exact_cv_moments(p, q)?.cov_fg)
}

/// The variance-minimising control-variate coefficient.
pub fn exact_alpha_star(p: &TabularLM, q: &TabularLM) -> Result<f64> {
    exact_cv_moments(p, q)?.alpha_star()
}

/// `∇_θ KL(p_θ ‖ q)`, obtained by differentiating the finite sum
/// `Σ_y p_θ(y) (log p_θ(y) − log q(y))` term by term:
/// `Σ_y p(y) (f(y) + 1) ∇ log p(y)`.
pub fn exact_grad_kl(p: &TabularLM, q: &TabularLM) -> Result<GradVector> {
    p.check_compatible(q)?;
    let mut grad = GradVector::for_model(p);
    for y in support(p) {
        let w = p.seq_logprob(&y)?.exp();
        if w == 0.0 {
            continue;
        }
        let f = log_ratio(p, q, &y)?;
        grad.add_scaled(&grad_log_prob(p, &y)?, w * (f + 1.0));
    }
    Ok(grad)
}

/// Exact mean and mean squared error of a vector-valued statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct GradMoments {
    pub mean: GradVector,
    /// `E‖g(y) − target‖²`.
    pub mse: f64,
}

/// Exact moments of `grad(y)` for `y ~ sampler`, with the squared error
/// measured against `target`.
pub fn exact_grad_moments<F>(sampler: &TabularLM, target: &GradVector, mut grad: F) -> Result<GradMoments>
where
    F: FnMut(&Seq) -> Result<GradVector>,
{
    let mut mean = GradVector::zeros(target.len());
    let mut mse = 0.0;
    for y in support(sampler) {
        let w = sampler.seq_logprob(&y)?.exp();
        if w == 0.0 {
            continue;
        }
        let g = grad(&y)?;
        mse += w * g.sq_dist(target);
        mean.add_scaled(&g, w);
    }
    Ok(GradMoments { mean, mse })
}

/// `½ Σ_y |p(y) − q(y)|`.
pub fn total_variation(p: &TabularLM, q: &TabularLM) -> Result<f64> {
    p.check_compatible(q)?;
    let mut tv = 0.0;
    for y in support(p) {
        tv += (p.seq_logprob(&y)?.exp() - q.seq_logprob(&y)?.exp()).abs();
    }
    Ok(0.5 * tv)
}
