//! The exact-identity suite over seeded random model pairs.
//!
//! Each identity records the largest deviation seen across pairs and the
//! number of pairs on which it failed.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimators::{cv_term, log_ratio, rb_term, EstimatorId};
use crate::gradients::{
    finite_diff_model, grad_log_prob, mc_grad_term, offpolicy_grad_term, rb_grad_term, GradKind, DEFAULT_FD_STEP,
};
use crate::model::{Alphabet, TabularLM};
use crate::oracle::{
    exact_cv_moments, exact_estimator_moments, exact_grad_kl, exact_grad_moments, exact_ht_moments, exact_kl,
    exact_kl_enum, exact_kl_local, exact_moments, support, total_variation,
};
use crate::sampling::child_stream;

/// Largest support on which the Horvitz–Thompson design is enumerated.
pub const HT_MAX_SUPPORT: usize = 20;
/// Largest number of draws in the enumerated Horvitz–Thompson design.
pub const HT_MAX_DRAWS: usize = 3;

/// A target `p`, a reference `q` and an old policy for off-policy checks.
#[derive(Debug, Clone)]
pub struct PairCase {
    pub index: usize,
    pub p: TabularLM,
    pub q: TabularLM,
    pub behavior: TabularLM,
}

/// Seeded random case: one to three symbols, order 0 or 1, horizon 1 to 6,
/// logits uniform in `[-1.5, 1.5]`. Every tenth case has `q = p`.
pub fn random_case(seed: u64, index: usize) -> Result<PairCase> {
    use rand::Rng;
    let mut rng = child_stream(seed, index as u64);
    let n_sym = rng.gen_range(1..=3);
    let order = rng.gen_range(0..=1);
    let max_len = rng.gen_range(1..=6);
    let alphabet = Alphabet::from_chars(&"abc"[..n_sym])?;
    let p = TabularLM::random(alphabet.clone(), order, max_len, 1.5, &mut rng)?;
    let q = if index.is_multiple_of(10) {
        p.clone()
    } else {
        TabularLM::random(alphabet.clone(), order, max_len, 1.5, &mut rng)?
    };
    let behavior = TabularLM::random(alphabet, order, max_len, 1.5, &mut rng)?;
    Ok(PairCase { index, p, q, behavior })
}

/// Groups of identities that can be run separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Family {
    Oracle,
    Unbiased,
    HorvitzThompson,
    Variance,
    ControlVariate,
    NonNegative,
    Gradient,
    Ppo,
}

impl Family {
    pub const ALL: [Family; 8] = [
        Family::Oracle,
        Family::Unbiased,
        Family::HorvitzThompson,
        Family::Variance,
        Family::ControlVariate,
        Family::NonNegative,
        Family::Gradient,
        Family::Ppo,
    ];
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Oracle => "oracle",
            Family::Unbiased => "unbiased",
            Family::HorvitzThompson => "ht",
            Family::Variance => "variance",
            Family::ControlVariate => "cv",
            Family::NonNegative => "nonneg",
            Family::Gradient => "gradient",
            Family::Ppo => "ppo",
        })
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.to_string() == s.trim())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown identity family {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub pairs: usize,
    pub seed: u64,
    pub families: Vec<Family>,
    /// Replaces the RB statistic with `2f − RB` in the variance check.
    pub perturb_rb: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            pairs: 100,
            seed: 0,
            families: Family::ALL.to_vec(),
            perturb_rb: false,
        }
    }
}

/// Aggregated result of one identity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityCheck {
    pub name: String,
    pub tolerance: f64,
    pub max_deviation: f64,
    /// Pairs on which the identity was evaluated.
    pub checked: usize,
    pub failures: usize,
    /// Index of the first failing pair.
    pub first_failure: Option<usize>,
}

impl IdentityCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub pairs: usize,
    pub seed: u64,
    pub checks: Vec<IdentityCheck>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(IdentityCheck::passed)
    }

    pub fn check(&self, name: &str) -> Option<&IdentityCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("identity,checked,failures,max_deviation,tolerance,status\n");
        for c in &self.checks {
            out.push_str(&format!(
                "{},{},{},{:e},{:e},{}\n",
                c.name,
                c.checked,
                c.failures,
                c.max_deviation,
                c.tolerance,
                if c.passed() { "pass" } else { "FAIL" }
            ));
        }
        out
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{:<4} {:<28} max dev {:>10.3e} (tol {:.0e}) on {} pairs",
                if c.passed() { "PASS" } else { "FAIL" },
                c.name,
                c.max_deviation,
                c.tolerance,
                c.checked
            )?;
        }
        Ok(())
    }
}

/// One observation of one identity on one pair.
struct Obs {
    name: String,
    tolerance: f64,
    deviation: f64,
    ok: bool,
}

struct Recorder(Vec<Obs>);

impl Recorder {
    /// Collapses repeated observations of an identity into one per case.
    fn finish(self) -> Vec<Obs> {
        let mut out: Vec<Obs> = Vec::new();
        for o in self.0 {
            match out.iter_mut().find(|e| e.name == o.name) {
                Some(e) => {
                    if !(o.deviation <= e.deviation) {
                        e.deviation = o.deviation;
                    }
                    e.ok &= o.ok;
                }
                None => out.push(o),
            }
        }
        out
    }

    /// Passes when `deviation ≤ tolerance`.
    fn within(&mut self, name: impl Into<String>, tolerance: f64, deviation: f64) {
        let ok = deviation <= tolerance;
        self.flag(name, tolerance, deviation, ok);
    }

    fn flag(&mut self, name: impl Into<String>, tolerance: f64, deviation: f64, ok: bool) {
        self.0.push(Obs {
            name: name.into(),
            tolerance,
            deviation,
            ok: ok && deviation.is_finite(),
        });
    }
}

fn check_case(case: &PairCase, config: &SuiteConfig) -> Result<Vec<Obs>> {
    let (p, q, old) = (&case.p, &case.q, &case.behavior);
    let mut rec = Recorder(Vec::new());
    let kl = exact_kl(p, q)?;
    let has = |f: Family| config.families.contains(&f);

    if has(Family::Oracle) {
        let local = exact_kl_local(p, q)?.kl;
        rec.within("oracle-consistency", 1e-10, (exact_kl_enum(p, q)?.kl - local).abs());
    }

    if has(Family::Unbiased) {
        let cv = exact_cv_moments(p, q)?;
        let mut ids = vec![
            ("unbiased-mc", EstimatorId::Mc),
            ("unbiased-cv-0", EstimatorId::Cv { alpha: 0.0 }),
            ("unbiased-cv-1", EstimatorId::Cv { alpha: 1.0 }),
            ("unbiased-rb", EstimatorId::Rb),
        ];
        if let Ok(alpha) = cv.alpha_star() {
            ids.push(("unbiased-cv-alpha*", EstimatorId::Cv { alpha }));
        }
        for (name, id) in ids {
            rec.within(name, 1e-10, (exact_estimator_moments(id, p, q, None)?.mean - kl).abs());
        }
        for (name, id) in [
            ("unbiased-offpolicy-mc", EstimatorId::OffPolicyMc),
            ("unbiased-offpolicy-rb", EstimatorId::OffPolicyRb),
        ] {
            rec.within(name, 1e-10, (exact_estimator_moments(id, p, q, Some(old))?.mean - kl).abs());
        }
    }

    if has(Family::HorvitzThompson) && support(p).len() <= HT_MAX_SUPPORT {
        for m in 1..=HT_MAX_DRAWS {
            rec.within("unbiased-ht", 1e-10, (exact_ht_moments(p, q, m)?.mean - kl).abs());
        }
    }

    if has(Family::Variance) {
        let var_mc = exact_estimator_moments(EstimatorId::Mc, p, q, None)?.variance;
        let var_rb = if config.perturb_rb {
            exact_moments(p, |y| Ok(2.0 * log_ratio(p, q, y)? - rb_term(p, q, y)?))?.variance
        } else {
            exact_estimator_moments(EstimatorId::Rb, p, q, None)?.variance
        };
        let excess = var_rb - var_mc;
        let strict = total_variation(p, q)? > 1e-6;
        let ok = excess <= 1e-12 && (!strict || excess < 0.0);
        rec.flag("variance-ordering", 1e-12, excess.max(0.0), ok);
    }

    if has(Family::ControlVariate) {
        let cv = exact_cv_moments(p, q)?;
        let reverse = exact_kl(q, p)?;
        rec.within("cv-covariance", 1e-10, (cv.cov_fg + kl + reverse).abs());
        if let Ok(alpha_star) = cv.alpha_star() {
            let var_at = |alpha: f64| -> Result<f64> { Ok(exact_moments(p, |y| cv_term(p, q, y, alpha))?.variance) };
            let predicted = cv.var_f * (1.0 - cv.corr().powi(2));
            rec.within("cv-optimal-variance", 1e-10, (var_at(alpha_star)? - predicted).abs());

            let (lo, hi) = (alpha_star.min(0.0) * 2.0, alpha_star.max(0.0) * 2.0);
            let mut worst = f64::NEG_INFINITY;
            for i in 0..=10 {
                let alpha = lo + (hi - lo) * i as f64 / 10.0;
                worst = worst.max(var_at(alpha)? - cv.var_f);
            }
            rec.within("cv-safe-interval", 1e-10, worst.max(0.0));
            let outside = 2.0 * alpha_star + 0.1 * alpha_star.signum();
            let gain = var_at(outside)? - cv.var_f;
            rec.flag("cv-outside-interval-hurts", 0.0, (-gain).max(0.0), gain > 0.0);

            let helps = var_at(1.0)? <= cv.var_f;
            rec.flag("cv-alpha-one-rule", 0.0, 0.0, helps == (alpha_star >= 0.5));
        }
    }

    if has(Family::NonNegative) {
        let mut min_term = f64::INFINITY;
        for y in support(p) {
            if p.seq_logprob(&y)? > f64::NEG_INFINITY {
                min_term = min_term.min(rb_term(p, q, &y)?).min(cv_term(p, q, &y, 1.0)?);
            }
        }
        rec.within("nonneg-rb-cv1", 1e-12, (-min_term).max(0.0));
    }

    if has(Family::Gradient) {
        let grad = exact_grad_kl(p, q)?;
        let fd = finite_diff_model(p, |m| exact_kl(m, q), DEFAULT_FD_STEP)?;
        rec.within("grad-kl-finite-diff", 1e-6, grad.rel_err(&fd));
        let mut worst = 0.0f64;
        for y in support(p).iter().take(4) {
            let fd = finite_diff_model(p, |m| m.seq_logprob(y), DEFAULT_FD_STEP)?;
            worst = worst.max(grad_log_prob(p, y)?.rel_err(&fd));
        }
        rec.within("grad-logprob-finite-diff", 1e-6, worst);

        let mc = exact_grad_moments(p, &grad, |y| mc_grad_term(p, q, y))?;
        let rb = exact_grad_moments(p, &grad, |y| rb_grad_term(p, q, y))?;
        rec.within("grad-unbiased-mc", 1e-8, mc.mean.max_abs_diff(&grad));
        rec.within("grad-unbiased-rb", 1e-8, rb.mean.max_abs_diff(&grad));
        for (name, kind) in [("grad-unbiased-offpolicy-mc", GradKind::Mc), ("grad-unbiased-offpolicy-rb", GradKind::Rb)] {
            let m = exact_grad_moments(old, &grad, |y| offpolicy_grad_term(p, old, q, y, kind))?;
            rec.within(name, 1e-8, m.mean.max_abs_diff(&grad));
        }
        rec.within("grad-mse-ordering", 1e-12, (rb.mse - mc.mse).max(0.0));
    }

    if has(Family::Ppo) {
        let ppo = exact_estimator_moments(EstimatorId::PpoMc, p, q, Some(old))?.mean;
        rec.within("ppo-decomposition", 1e-10, (ppo + exact_kl(p, old)? - kl).abs());
    }

    Ok(rec.finish())
}

/// Runs the selected identity families over `config.pairs` random cases in
/// parallel; results are merged in case order.
pub fn run_identity_suite(config: &SuiteConfig) -> Result<VerifyReport> {
    if config.pairs == 0 {
        return Err(Error::InvalidArgument("pairs must be at least 1".into()));
    }
    let per_case: Vec<Result<Vec<Obs>>> = (0..config.pairs)
        .into_par_iter()
        .map(|i| check_case(&random_case(config.seed, i)?, config))
        .collect();
    let mut checks: Vec<IdentityCheck> = Vec::new();
    for (i, obs) in per_case.into_iter().enumerate() {
        for o in obs? {
            let pos = match checks.iter().position(|c| c.name == o.name) {
                Some(pos) => pos,
                None => {
                    checks.push(IdentityCheck {
                        name: o.name.clone(),
                        tolerance: o.tolerance,
                        max_deviation: 0.0,
                        checked: 0,
                        failures: 0,
                        first_failure: None,
                    });
                    checks.len() - 1
                }
            };
            let c = &mut checks[pos];
            if !(o.deviation <= c.max_deviation) {
                c.max_deviation = o.deviation;
            }
            c.checked += 1;
            if !o.ok {
                c.failures += 1;
                c.first_failure.get_or_insert(i);
            }
        }
    }
    Ok(VerifyReport {
        pairs: config.pairs,
        seed: config.seed,
        checks,
    })
}
