//! Score functions and estimators of `∇_θ KL(π_θ ‖ q)` for tabular policies.
//!
//! θ is the flattened logit table of the policy. A position whose context is
//! row `c` and whose emitted symbol is `s` has score row
//! `∂ log softmax_c(s) / ∂θ_{c,σ} = 1{σ = s} − softmax_c(σ)`; forced-EOS
//! positions do not depend on θ.

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};
use crate::estimators::{importance_weight, log_ratio};
use crate::model::{NextDist, Seq, TabularLM};
use crate::sampling::SampleBatch;

/// Default step for central finite differences.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

pub const GRAD_CSV_HEADER: &str = "coordinate,analytic,finite_diff,rel_err";

/// Flat vector laid out like the policy's logit table.
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector(Vec<f64>);

impl GradVector {
    pub fn zeros(len: usize) -> Self {
        GradVector(vec![0.0; len])
    }

    pub fn for_model(model: &TabularLM) -> Self {
        GradVector::zeros(model.num_params())
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        GradVector(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &GradVector, scale: f64) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in &mut self.0 {
            *a *= factor;
        }
    }

    pub fn dot(&self, other: &GradVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn sq_dist(&self, other: &GradVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).powi(2)).sum()
    }

    pub fn max_abs_diff(&self, other: &GradVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `‖self − reference‖ / max(1, ‖reference‖)`.
    pub fn rel_err(&self, reference: &GradVector) -> f64 {
        self.sq_dist(reference).sqrt() / reference.norm().max(1.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    fn check_finite(self, what: &str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(format!("{what} gradient")))
        }
    }
}

impl Index<usize> for GradVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for GradVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// Adds `scale · (e_symbol − dist)` to the row of `context`.
fn add_score_row(grad: &mut GradVector, row_len: usize, context: usize, dist: &NextDist, symbol: usize, scale: f64) {
    let base = context * row_len;
    for (j, &pj) in dist.probs().iter().enumerate() {
        grad[base + j] -= scale * pj;
    }
    grad[base + symbol] += scale;
}

/// `∇_θ log π_θ(y)`, accumulated over padded positions `1..=|y|+1`.
pub fn grad_log_prob(policy: &TabularLM, seq: &Seq) -> Result<GradVector> {
    let mut grad = GradVector::for_model(policy);
    accumulate_score(policy, seq.tokens(), true, 1.0, &mut grad)?;
    Ok(grad)
}

/// `∇_θ log π_θ(prefix)` for the prefix probability: no EOS step.
pub fn grad_log_prefix_prob(policy: &TabularLM, prefix: &[usize]) -> Result<GradVector> {
    let mut grad = GradVector::for_model(policy);
    accumulate_score(policy, prefix, false, 1.0, &mut grad)?;
    Ok(grad)
}

fn accumulate_score(
    policy: &TabularLM,
    tokens: &[usize],
    with_eos: bool,
    scale: f64,
    grad: &mut GradVector,
) -> Result<()> {
    let steps = if with_eos { tokens.len() + 1 } else { tokens.len() };
    for n in 0..steps {
        let prefix = &tokens[..n];
        if policy.at_horizon(prefix) {
            if n < tokens.len() {
                return Err(Error::HorizonViolation {
                    len: tokens.len(),
                    max_len: policy.max_len(),
                });
            }
            continue;
        }
        let dist = policy.next_dist(prefix)?;
        let symbol = tokens.get(n).copied().unwrap_or(dist.eos());
        add_score_row(grad, policy.row_len(), policy.context_index(prefix), &dist, symbol, scale);
    }
    Ok(())
}

fn check_batch(batch: &SampleBatch, policy: &TabularLM, q: &TabularLM) -> Result<()> {
    policy.check_compatible(q)?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(())
}

/// Single-sample score-function gradient `f(y) ∇ log π(y)`.
pub fn mc_grad_term(policy: &TabularLM, q: &TabularLM, y: &Seq) -> Result<GradVector> {
    let f = log_ratio(policy, q, y)?;
    let mut grad = GradVector::for_model(policy);
    accumulate_score(policy, y.tokens(), true, f, &mut grad)?;
    Ok(grad)
}

/// `(1/M) Σ_m f(y_m) ∇ log π(y_m)`.
pub fn mc_grad(batch: &SampleBatch, policy: &TabularLM, q: &TabularLM) -> Result<GradVector> {
    check_batch(batch, policy, q)?;
    let mut total = GradVector::for_model(policy);
    for y in batch.seqs() {
        total.add_scaled(&mc_grad_term(policy, q, y)?, 1.0);
    }
    total.scale(1.0 / batch.len() as f64);
    total.check_finite("mc")
}

/// Per-position local terms of the Rao–Blackwellized gradient at one prefix:
/// adds `KL · prefix_score + Σ_σ π(σ)(r(σ) − KL) e_{c,σ}` and returns `KL`,
/// where `r = log π − log q` over `Σ ∪ {EOS}`.
fn add_local_kl_grad(
    policy: &TabularLM,
    q: &TabularLM,
    prefix: &[usize],
    prefix_score: Option<&GradVector>,
    scale: f64,
    grad: &mut GradVector,
) -> Result<f64> {
    if policy.at_horizon(prefix) {
        return Ok(0.0);
    }
    let dp = policy.next_dist(prefix)?;
    let dq = q.next_dist(prefix)?;
    let kl = dp.kl_to(&dq)?;
    if let Some(score) = prefix_score {
        grad.add_scaled(score, scale * kl);
    }
    let base = policy.context_index(prefix) * policy.row_len();
    for (j, &pj) in dp.probs().iter().enumerate() {
        if pj > 0.0 {
            let r = dp.log_prob(j) - dq.log_prob(j);
            grad[base + j] += scale * pj * (r - kl);
        }
    }
    Ok(kl)
}

/// Single-sample Rao–Blackwellized gradient.
///
/// For every padded position `n` the exact expectation over the next symbol
/// `Y ∈ Σ ∪ {EOS}` of `log(π/q)(Y | y_{<n}) · (∇ log π(y_{<n}) + ∇ log π(Y | y_{<n}))`.
/// The prefix score is carried incrementally along the sample.
pub fn rb_grad_term(policy: &TabularLM, q: &TabularLM, y: &Seq) -> Result<GradVector> {
    let tokens = y.tokens();
    let mut grad = GradVector::for_model(policy);
    let mut prefix_score = GradVector::for_model(policy);
    for n in 0..=tokens.len() {
        let prefix = &tokens[..n];
        add_local_kl_grad(policy, q, prefix, Some(&prefix_score), 1.0, &mut grad)?;
        if n < tokens.len() {
            let dist = policy.next_dist(prefix)?;
            add_score_row(
                &mut prefix_score,
                policy.row_len(),
                policy.context_index(prefix),
                &dist,
                tokens[n],
                1.0,
            );
        }
    }
    Ok(grad)
}

pub fn rb_grad(batch: &SampleBatch, policy: &TabularLM, q: &TabularLM) -> Result<GradVector> {
    check_batch(batch, policy, q)?;
    let mut total = GradVector::for_model(policy);
    for y in batch.seqs() {
        total.add_scaled(&rb_grad_term(policy, q, y)?, 1.0);
    }
    total.scale(1.0 / batch.len() as f64);
    total.check_finite("rb")
}

/// Which inner estimator an off-policy gradient differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradKind {
    Mc,
    Rb,
}

impl std::fmt::Display for GradKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GradKind::Mc => "mc",
            GradKind::Rb => "rb",
        })
    }
}

impl std::str::FromStr for GradKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mc" => Ok(GradKind::Mc),
            "rb" => Ok(GradKind::Rb),
            other => Err(Error::UnknownEstimator(other.to_string())),
        }
    }
}

/// θ-gradient of one off-policy term with the sample held fixed.
///
/// MC: `∇[w f] = w (f + 1) ∇ log π(y)`.
/// RB: `∇[w R] = w R ∇ log π(y) + w ∇R`, with `R` the sum of position KLs.
pub fn offpolicy_grad_term(
    policy: &TabularLM,
    pi_old: &TabularLM,
    q: &TabularLM,
    y: &Seq,
    kind: GradKind,
) -> Result<GradVector> {
    let w = importance_weight(policy, pi_old, y)?;
    let mut grad = GradVector::for_model(policy);
    match kind {
        GradKind::Mc => {
            let f = log_ratio(policy, q, y)?;
            accumulate_score(policy, y.tokens(), true, w * (f + 1.0), &mut grad)?;
        }
        GradKind::Rb => {
            let tokens = y.tokens();
            let mut total_kl = 0.0;
            for n in 0..=tokens.len() {
                total_kl += add_local_kl_grad(policy, q, &tokens[..n], None, w, &mut grad)?;
            }
            accumulate_score(policy, tokens, true, w * total_kl, &mut grad)?;
        }
    }
    Ok(grad)
}

/// Gradient of the off-policy MC or RB estimate over a batch from `π_old`.
pub fn offpolicy_grad(
    batch: &SampleBatch,
    policy: &TabularLM,
    pi_old: &TabularLM,
    q: &TabularLM,
    kind: GradKind,
) -> Result<GradVector> {
    check_batch(batch, policy, q)?;
    policy.check_compatible(pi_old)?;
    let mut total = GradVector::for_model(policy);
    for y in batch.seqs() {
        total.add_scaled(&offpolicy_grad_term(policy, pi_old, q, y, kind)?, 1.0);
    }
    total.scale(1.0 / batch.len() as f64);
    total.check_finite("off-policy")
}

/// Central differences `(fn(θ + h e_i) − fn(θ − h e_i)) / 2h`.
pub fn finite_diff<F>(mut func: F, theta: &[f64], h: f64) -> Result<GradVector>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step h={h}")));
    }
    let mut point = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        point[i] = theta[i] + h;
        let plus = func(&point)?;
        point[i] = theta[i] - h;
        let minus = func(&point)?;
        point[i] = theta[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("function value at coordinate {i}")));
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(GradVector(out))
}

/// Finite differences of a function of a model's logits.
pub fn finite_diff_model<F>(model: &TabularLM, mut func: F, h: f64) -> Result<GradVector>
where
    F: FnMut(&TabularLM) -> Result<f64>,
{
    finite_diff(|theta| func(&model.with_logits(theta.to_vec())?), model.logits(), h)
}

/// `coordinate,analytic,finite_diff,rel_err` rows comparing two gradients.
pub fn grad_report_csv(analytic: &GradVector, numeric: &GradVector) -> String {
    let mut out = String::from(GRAD_CSV_HEADER);
    out.push('\n');
    for (i, (a, b)) in analytic.values().iter().zip(numeric.values()).enumerate() {
        let rel = (a - b).abs() / b.abs().max(1.0);
        out.push_str(&format!("{i},{a},{b},{rel}\n"));
    }
    out
}
