//! Toy KL-regularised policy optimisation with a REINFORCE leave-one-out
//! baseline, Pareto sweeps over the KL coefficient and a label permutation
//! test on the joint front.

use std::fmt;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimators::{mc_estimate, rb_estimate};
use crate::gradients::{grad_log_prob, mc_grad, rb_grad, GradKind, GradVector};
use crate::model::{Alphabet, Seq, TabularLM};
use crate::oracle::{exact_kl, exact_moments};
use crate::sampling::{derive_seed, sample, stream, StreamRng};

/// Deterministic bounded rewards on strings.
#[derive(Debug, Clone, PartialEq)]
pub enum Reward {
    /// Fraction of tokens equal to `target`; zero for the empty string.
    TargetFrac { target: usize },
    /// The same value for every string.
    Constant(f64),
}

impl Reward {
    /// Parses `target-frac`, `target-frac:<symbol>`, `constant:<value>` or `zero`.
    /// Plain `target-frac` targets the first symbol of the alphabet.
    pub fn parse(id: &str, alphabet: &Alphabet) -> Result<Self> {
        let id = id.trim();
        if id == "target-frac" {
            return Ok(Reward::TargetFrac { target: 0 });
        }
        if id == "zero" {
            return Ok(Reward::Constant(0.0));
        }
        if let Some(sym) = id.strip_prefix("target-frac:") {
            let target = alphabet
                .index_of(sym)
                .ok_or_else(|| Error::UnknownReward(id.to_string()))?;
            return Ok(Reward::TargetFrac { target });
        }
        if let Some(v) = id.strip_prefix("constant:") {
            return match v.parse::<f64>() {
                Ok(c) if c.is_finite() => Ok(Reward::Constant(c)),
                _ => Err(Error::UnknownReward(id.to_string())),
            };
        }
        Err(Error::UnknownReward(id.to_string()))
    }
}

pub fn toy_reward(seq: &Seq, reward: &Reward) -> f64 {
    match *reward {
        Reward::TargetFrac { target } => {
            if seq.is_empty() {
                0.0
            } else {
                seq.tokens().iter().filter(|&&t| t == target).count() as f64 / seq.len() as f64
            }
        }
        Reward::Constant(c) => c,
    }
}

/// Expected reward under `policy`, by enumeration.
pub fn exact_expected_reward(policy: &TabularLM, reward: &Reward) -> Result<f64> {
    Ok(exact_moments(policy, |y| Ok(toy_reward(y, reward)))?.mean)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    /// KL coefficient β.
    pub beta: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// RLOO group size.
    pub group_size: usize,
    #[serde(serialize_with = "serialize_display")]
    pub kl_grad_estimator: GradKind,
    pub base_seed: u64,
    pub reward_id: String,
}

fn serialize_display<S: serde::Serializer, T: fmt::Display>(v: &T, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(v)
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 0.07,
            lr: 1.0,
            steps: 200,
            batch_size: 16,
            group_size: 2,
            kl_grad_estimator: GradKind::Rb,
            base_seed: 0,
            reward_id: "target-frac".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta={} must be finite and non-negative", self.beta));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr={} must be finite and non-negative", self.lr));
        }
        if self.group_size < 2 {
            return bad(format!("RLOO group size {} < 2", self.group_size));
        }
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(self.group_size) {
            return bad(format!(
                "batch_size {} must be a positive multiple of the group size {}",
                self.batch_size, self.group_size
            ));
        }
        Ok(())
    }
}

/// Reference model used by the toy experiments: three symbols, bigram
/// context, horizon five, logits uniform in `[-1, 1]`.
pub fn default_reference() -> TabularLM {
    let alphabet = Alphabet::from_chars("abc").expect("valid alphabet");
    TabularLM::random(alphabet, 1, 5, 1.0, &mut stream(0x005E_ED0F_0001)).expect("valid model")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    /// Mean reward of the batch sampled at this step.
    pub avg_reward: f64,
    /// Exact `KL(policy ‖ reference)` of the policy that produced the batch.
    pub exact_kl: f64,
    /// KL estimate from the batch with the configured estimator.
    pub est_kl: f64,
}

/// Leave-one-out advantages within consecutive groups of `k`:
/// `A_i = (1/(k−1)) Σ_{j≠i} (r_i − r_j)`, exactly zero for constant rewards.
pub fn rloo_advantages(rewards: &[f64], k: usize) -> Result<Vec<f64>> {
    if k < 2 || !rewards.len().is_multiple_of(k) {
        return Err(Error::InvalidArgument(format!(
            "{} rewards cannot be split into groups of {k}",
            rewards.len()
        )));
    }
    let mut out = Vec::with_capacity(rewards.len());
    for group in rewards.chunks(k) {
        for (i, &ri) in group.iter().enumerate() {
            let diff: f64 = group
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &rj)| ri - rj)
                .sum();
            out.push(diff / (k - 1) as f64);
        }
    }
    Ok(out)
}

/// `(1/B) Σ_i A_i ∇ log π(y_i)`.
pub fn reward_gradient(policy: &TabularLM, seqs: &[Seq], advantages: &[f64]) -> Result<GradVector> {
    let mut grad = GradVector::for_model(policy);
    for (y, &a) in seqs.iter().zip(advantages) {
        if a != 0.0 {
            grad.add_scaled(&grad_log_prob(policy, y)?, a);
        }
    }
    grad.scale(1.0 / seqs.len() as f64);
    Ok(grad)
}

/// Gradients and metrics of one optimisation step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub policy: TabularLM,
    pub point: TrajectoryPoint,
    pub reward_grad: GradVector,
    pub kl_grad: GradVector,
}

/// One RLOO step: sample, compute the reward and KL gradients on the batch,
/// and move θ by `lr · (reward_grad − β · kl_grad)`.
pub fn rloo_step(
    policy: &TabularLM,
    reference: &TabularLM,
    config: &TrainConfig,
    reward: &Reward,
    step: usize,
    rng: &mut StreamRng,
) -> Result<StepOutcome> {
    policy.check_compatible(reference)?;
    let batch = sample(policy, rng, config.batch_size)?;
    let rewards: Vec<f64> = batch.seqs().iter().map(|y| toy_reward(y, reward)).collect();
    let advantages = rloo_advantages(&rewards, config.group_size)?;
    let reward_grad = reward_gradient(policy, batch.seqs(), &advantages)?;
    let (kl_grad, est_kl) = match config.kl_grad_estimator {
        GradKind::Mc => (mc_grad(&batch, policy, reference)?, mc_estimate(&batch, policy, reference)?.value),
        GradKind::Rb => (rb_grad(&batch, policy, reference)?, rb_estimate(&batch, policy, reference)?.value),
    };
    let point = TrajectoryPoint {
        step,
        avg_reward: rewards.iter().sum::<f64>() / rewards.len() as f64,
        exact_kl: exact_kl(policy, reference)?,
        est_kl,
    };
    let logits: Vec<f64> = policy
        .logits()
        .iter()
        .zip(reward_grad.values().iter().zip(kl_grad.values()))
        .map(|(&t, (&r, &k))| t + config.lr * (r - config.beta * k))
        .collect();
    if let Some(i) = logits.iter().position(|l| !l.is_finite()) {
        return Err(Error::NonFinite(format!(
            "update produced logit {i} = {} at step {step} (beta={}, lr={})",
            logits[i], config.beta, config.lr
        )));
    }
    Ok(StepOutcome {
        policy: policy.with_logits(logits)?,
        point,
        reward_grad,
        kl_grad,
    })
}

/// A finished run: its trajectory and final policy.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub trajectory: Vec<TrajectoryPoint>,
    pub policy: TabularLM,
}

/// Runs `config.steps` RLOO steps from a copy of the reference.
pub fn train_run(reference: &TabularLM, config: &TrainConfig) -> Result<TrainRun> {
    config.validate()?;
    let reward = Reward::parse(&config.reward_id, reference.alphabet())?;
    let mut rng = stream(config.base_seed);
    let mut policy = reference.clone();
    let mut trajectory = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let out = rloo_step(&policy, reference, config, &reward, step, &mut rng)?;
        trajectory.push(out.point);
        policy = out.policy;
    }
    Ok(TrainRun { trajectory, policy })
}

pub fn train(reference: &TabularLM, config: &TrainConfig) -> Result<Vec<TrajectoryPoint>> {
    Ok(train_run(reference, config)?.trajectory)
}

pub const TRAJECTORY_CSV_HEADER: &str = "run_id,estimator,beta,seed,step,avg_reward,exact_kl,est_kl";
pub const PARETO_CSV_HEADER: &str = "run_id,estimator,beta,final_reward,final_kl,on_front";

pub fn trajectory_csv_rows(run_id: &str, config: &TrainConfig, trajectory: &[TrajectoryPoint]) -> String {
    let mut out = String::new();
    for p in trajectory {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            run_id,
            config.kl_grad_estimator,
            config.beta,
            config.base_seed,
            p.step,
            p.avg_reward,
            p.exact_kl,
            p.est_kl
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParetoPoint {
    pub run_id: String,
    #[serde(serialize_with = "serialize_display")]
    pub estimator: GradKind,
    pub beta: f64,
    pub seed: u64,
    /// Exact expected reward of the final policy.
    pub final_reward: f64,
    /// Exact KL of the final policy from the reference.
    pub final_kl: f64,
    pub on_front: bool,
}

impl ParetoPoint {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.run_id, self.estimator, self.beta, self.final_reward, self.final_kl, self.on_front
        )
    }
}

/// `a` dominates `b` when it has strictly higher reward and strictly lower KL.
pub fn dominates(a: &ParetoPoint, b: &ParetoPoint) -> bool {
    a.final_reward > b.final_reward && a.final_kl < b.final_kl
}

/// Marks every point that no other point dominates.
pub fn mark_front(points: &mut [ParetoPoint]) {
    let flags: Vec<bool> = (0..points.len())
        .map(|i| !points.iter().any(|other| dominates(other, &points[i])))
        .collect();
    for (p, f) in points.iter_mut().zip(flags) {
        p.on_front = f;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub betas: Vec<f64>,
    pub runs_per_beta: usize,
    pub estimators: Vec<GradKind>,
    /// Template for every run; β, estimator and seed are overridden.
    pub base: TrainConfig,
}

impl SweepConfig {
    /// Six β values evenly spaced over `[0.01, 0.1]`, three seeds, both estimators.
    pub fn toy() -> Self {
        SweepConfig {
            betas: (0..6).map(|i| (10 + 18 * i) as f64 / 1000.0).collect(),
            runs_per_beta: 3,
            estimators: vec![GradKind::Mc, GradKind::Rb],
            base: TrainConfig::default(),
        }
    }

    /// The per-run configurations in output order: estimator, then β, then seed.
    pub fn runs(&self) -> Vec<(String, TrainConfig)> {
        let mut runs = Vec::new();
        for &est in &self.estimators {
            for &beta in &self.betas {
                for r in 0..self.runs_per_beta {
                    let config = TrainConfig {
                        beta,
                        kl_grad_estimator: est,
                        base_seed: derive_seed(self.base.base_seed, r as u64),
                        ..self.base.clone()
                    };
                    runs.push((format!("{est}-b{beta:.3}-r{r}"), config));
                }
            }
        }
        runs
    }
}

/// Run id, configuration and trajectory of one sweep run.
pub type RunRecord = (String, TrainConfig, Vec<TrajectoryPoint>);

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub points: Vec<ParetoPoint>,
    pub runs: Vec<RunRecord>,
}

/// Trains one model per (estimator, β, seed) in parallel and marks the joint
/// Pareto front of final exact reward against final exact KL. Runs with the
/// same seed index share their sampling stream seed across β and estimators.
pub fn pareto_sweep(reference: &TabularLM, sweep: &SweepConfig) -> Result<SweepResult> {
    if sweep.betas.is_empty() || sweep.runs_per_beta == 0 || sweep.estimators.is_empty() {
        return Err(Error::InvalidArgument("empty sweep grid".into()));
    }
    let reward = Reward::parse(&sweep.base.reward_id, reference.alphabet())?;
    let results: Vec<Result<(ParetoPoint, RunRecord)>> = sweep
        .runs()
        .into_par_iter()
        .map(|(run_id, config)| {
            let run = train_run(reference, &config)?;
            let point = ParetoPoint {
                run_id: run_id.clone(),
                estimator: config.kl_grad_estimator,
                beta: config.beta,
                seed: config.base_seed,
                final_reward: exact_expected_reward(&run.policy, &reward)?,
                final_kl: exact_kl(&run.policy, reference)?,
                on_front: false,
            };
            Ok((point, (run_id, config, run.trajectory)))
        })
        .collect();
    let mut points = Vec::with_capacity(results.len());
    let mut runs = Vec::with_capacity(results.len());
    for r in results {
        let (p, run) = r?;
        points.push(p);
        runs.push(run);
    }
    mark_front(&mut points);
    Ok(SweepResult { points, runs })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PermutationResult {
    /// Fraction of joint-front points carrying the tested label.
    pub statistic: f64,
    /// Expected fraction under random labelling.
    pub null_mean: f64,
    pub p_value: f64,
    pub front_size: usize,
    pub n_perm: usize,
}

/// Smallest accepted number of permutations.
pub const MIN_PERMUTATIONS: usize = 100;

/// Two-sided permutation test of the share of `label` among joint-front
/// points. Labels are shuffled `n_perm` times; the p-value is
/// `(1 + #{|T_perm − E| ≥ |T_obs − E|}) / (1 + n_perm)`.
pub fn permutation_test(points: &[ParetoPoint], label: GradKind, n_perm: usize, seed: u64) -> Result<PermutationResult> {
    if n_perm < MIN_PERMUTATIONS {
        return Err(Error::InvalidArgument(format!(
            "n_perm={n_perm} is below the minimum of {MIN_PERMUTATIONS}"
        )));
    }
    let labels: Vec<bool> = points.iter().map(|p| p.estimator == label).collect();
    let hits = labels.iter().filter(|&&l| l).count();
    if hits == 0 || hits == labels.len() {
        return Err(Error::InvalidArgument("both estimator labels must be present".into()));
    }
    let mut marked = points.to_vec();
    mark_front(&mut marked);
    let front: Vec<usize> = (0..marked.len()).filter(|&i| marked[i].on_front).collect();
    let null_mean = hits as f64 / labels.len() as f64;
    let share = |labels: &[bool]| front.iter().filter(|&&i| labels[i]).count() as f64 / front.len() as f64;
    let statistic = share(&labels);

    let first = &points[0];
    if points
        .iter()
        .all(|p| p.final_reward == first.final_reward && p.final_kl == first.final_kl)
    {
        log::warn!("all points coincide; permutation test is degenerate, reporting p = 1");
        return Ok(PermutationResult {
            statistic,
            null_mean,
            p_value: 1.0,
            front_size: front.len(),
            n_perm,
        });
    }

    let observed = (statistic - null_mean).abs();
    let mut rng = stream(seed);
    let mut shuffled = labels.clone();
    let mut extreme = 0usize;
    for _ in 0..n_perm {
        shuffled.shuffle(&mut rng);
        if (share(&shuffled) - null_mean).abs() >= observed - 1e-12 {
            extreme += 1;
        }
    }
    Ok(PermutationResult {
        statistic,
        null_mean,
        p_value: (1 + extreme) as f64 / (1 + n_perm) as f64,
        front_size: front.len(),
        n_perm,
    })
}
