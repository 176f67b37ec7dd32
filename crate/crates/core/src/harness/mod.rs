//! Experiment orchestration behind the command-line tool: config loading,
//! seeded replications, summary tables and CSV/JSON output.

pub mod config;
pub mod stats;
pub mod suite;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimators::{
    cv_estimate, cv_pilot_estimate, ht_from_batch, mc_estimate, rb_estimate, Estimate, EstimatorId,
    DEFAULT_PILOT_SIZE, ESTIMATE_CSV_HEADER,
};
use crate::gradients::{
    finite_diff_model, grad_log_prob, grad_report_csv, mc_grad_term, rb_grad_term, GradKind, DEFAULT_FD_STEP,
};
use crate::model::{Alphabet, TabularLM};
use crate::oracle::{exact_grad_kl, exact_grad_moments, exact_kl, exact_kl_local, support};
use crate::rlhf::{
    default_reference, pareto_sweep, permutation_test, train, trajectory_csv_rows, SweepConfig, TrainConfig,
    PARETO_CSV_HEADER, TRAJECTORY_CSV_HEADER,
};
use crate::sampling::{child_stream, derive_seed, sample};

pub use config::Config;
pub use stats::{Summary, SummaryRow, SummaryTable};
pub use suite::{run_identity_suite, Family, SuiteConfig, VerifyReport};

/// Settings shared by every command; command-line flags override the config.
#[derive(Debug, Clone, PartialEq)]
pub struct Globals {
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
}

impl Default for Globals {
    fn default() -> Self {
        Globals {
            seed: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

const SECTIONS: &[&str] = &["", "model", "estimate", "verify", "grad-check", "train", "pareto"];

fn base_seed(config: &Config, globals: &Globals, section: &str) -> Result<u64> {
    if let Some(s) = globals.seed {
        return Ok(s);
    }
    match config.parsed(section, "seed")? {
        Some(s) => Ok(s),
        None => config.parsed_or("", "seed", 0),
    }
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, contents)?;
    Ok(path)
}

/// Builds the `(p, q)` pair described by `[model]`.
///
/// `kind = geometric` (default): one symbol with continuation probabilities
/// `p_a`, `q_a` and horizon `max_len` (defaults 0.3, 0.5, 3).
/// `kind = random`: logits uniform in `[-scale, scale]` drawn from `p_seed`
/// and `q_seed` over `alphabet`, `order`, `max_len`.
/// `kind = files`: models loaded from the paths `p` and `q`.
pub fn load_model_pair(config: &Config) -> Result<(TabularLM, TabularLM)> {
    const S: &str = "model";
    let kind = config.get(S, "kind").unwrap_or("geometric");
    match kind {
        "geometric" => {
            config.check_keys(S, &["kind", "p_a", "q_a", "max_len"])?;
            let max_len = config.parsed_or(S, "max_len", 3)?;
            Ok((
                TabularLM::geometric(config.parsed_or(S, "p_a", 0.3)?, max_len)?,
                TabularLM::geometric(config.parsed_or(S, "q_a", 0.5)?, max_len)?,
            ))
        }
        "random" => {
            config.check_keys(S, &["kind", "alphabet", "order", "max_len", "scale", "p_seed", "q_seed"])?;
            let alphabet = Alphabet::from_chars(config.get(S, "alphabet").unwrap_or("ab"))?;
            let order = config.parsed_or(S, "order", 1)?;
            let max_len = config.parsed_or(S, "max_len", 4)?;
            let scale = config.parsed_or(S, "scale", 1.0)?;
            let p_seed = config.parsed_or(S, "p_seed", 1)?;
            let q_seed = config.parsed_or(S, "q_seed", 2)?;
            let build = |seed| TabularLM::random(alphabet.clone(), order, max_len, scale, &mut child_stream(seed, 0));
            Ok((build(p_seed)?, build(q_seed)?))
        }
        "files" => {
            config.check_keys(S, &["kind", "p", "q"])?;
            let path = |key| {
                config
                    .path(S, key)
                    .ok_or_else(|| Error::InvalidArgument(format!("[model] kind = files needs `{key}`")))
            };
            let p = TabularLM::load(path("p")?)?;
            let q = TabularLM::load(path("q")?)?;
            p.check_compatible(&q)?;
            Ok((p, q))
        }
        other => Err(Error::InvalidArgument(format!("unknown model kind {other:?}"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateConfig {
    pub estimators: Vec<EstimatorId>,
    pub m_grid: Vec<usize>,
    pub replications: usize,
    pub pilot_size: usize,
    pub seed: u64,
}

impl EstimateConfig {
    pub fn from_config(config: &Config, globals: &Globals) -> Result<Self> {
        const S: &str = "estimate";
        config.check_keys(S, &["estimators", "m", "replications", "pilot_size", "seed"])?;
        let estimators = config
            .list(S, "estimators")?
            .unwrap_or_else(|| vec![EstimatorId::Mc, EstimatorId::Rb]);
        let out = EstimateConfig {
            estimators,
            m_grid: config.list(S, "m")?.unwrap_or_else(|| vec![1]),
            replications: config.parsed_or(S, "replications", 10_000)?,
            pilot_size: config.parsed_or(S, "pilot_size", DEFAULT_PILOT_SIZE)?,
            seed: base_seed(config, globals, S)?,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::InvalidArgument("replications must be at least 1".into()));
        }
        if self.m_grid.is_empty() || self.m_grid.contains(&0) {
            return Err(Error::InvalidArgument("M grid must be non-empty with M ≥ 1".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::InvalidArgument("no estimators selected".into()));
        }
        if let Some(id) = self.estimators.iter().find(|id| id.is_off_policy()) {
            return Err(Error::InvalidArgument(format!(
                "{id} needs a behaviour policy and is not available in estimate"
            )));
        }
        if self.pilot_size < 2 && self.estimators.contains(&EstimatorId::CvPilot) {
            return Err(Error::InvalidArgument("pilot_size must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EstimateReport {
    /// `None` when `q` misses part of the support of `p`.
    pub exact_kl: Option<f64>,
    pub table: SummaryTable,
    pub files: Vec<PathBuf>,
}

fn run_estimator(
    id: EstimatorId,
    p: &TabularLM,
    q: &TabularLM,
    cfg: &EstimateConfig,
    rep_seed: u64,
    m_index: usize,
    batch: &crate::sampling::SampleBatch,
) -> Result<Estimate> {
    match id {
        EstimatorId::Mc => mc_estimate(batch, p, q),
        EstimatorId::Rb => rb_estimate(batch, p, q),
        EstimatorId::Ht => ht_from_batch(batch, p, q),
        EstimatorId::Cv { alpha } => cv_estimate(batch, p, q, alpha),
        EstimatorId::CvPilot => {
            let mut rng = child_stream(rep_seed, (1 << 32) + m_index as u64);
            let pilot = sample(p, &mut rng, cfg.pilot_size)?;
            Ok(cv_pilot_estimate(&pilot, batch, p, q)?.1)
        }
        other => Err(Error::InvalidArgument(format!("{other} is not available in estimate"))),
    }
}

fn status_of(err: &Error) -> String {
    match err {
        Error::SupportViolation(_) => "support-violation".into(),
        Error::DegenerateVariance(_) => "degenerate-variance".into(),
        _ => "error".into(),
    }
}

/// Replication `r` at grid index `i` samples `M` strings from
/// `child_stream(derive_seed(seed, r), i)`; every estimator sees that batch.
pub fn cmd_estimate(config: &Config, globals: &Globals) -> Result<EstimateReport> {
    config.check_sections(SECTIONS)?;
    let (p, q) = load_model_pair(config)?;
    let cfg = EstimateConfig::from_config(config, globals)?;
    let exact = match exact_kl_local(&p, &q) {
        Ok(report) => {
            write_file(&globals.out_dir, "exact.json", &report.to_json(p.alphabet())?)?;
            Some(report.kl)
        }
        Err(Error::SupportViolation(msg)) => {
            log::warn!("exact KL is infinite: {msg}");
            None
        }
        Err(e) => return Err(e),
    };

    // values[r][m_index][estimator]
    let per_rep: Vec<Result<Vec<Vec<Result<Estimate>>>>> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| {
            let rep_seed = derive_seed(cfg.seed, r as u64);
            cfg.m_grid
                .iter()
                .enumerate()
                .map(|(mi, &m)| {
                    let batch = sample(&p, &mut child_stream(rep_seed, mi as u64), m)?;
                    Ok(cfg
                        .estimators
                        .iter()
                        .map(|&id| run_estimator(id, &p, &q, &cfg, rep_seed, mi, &batch))
                        .collect())
                })
                .collect()
        })
        .collect();
    let per_rep = per_rep.into_iter().collect::<Result<Vec<_>>>()?;

    let mut csv = format!("{ESTIMATE_CSV_HEADER}\n");
    let mut table = SummaryTable::default();
    for (ei, id) in cfg.estimators.iter().enumerate() {
        for (mi, &m) in cfg.m_grid.iter().enumerate() {
            let mut values = Vec::with_capacity(cfg.replications);
            let mut failure = None;
            for (r, rep) in per_rep.iter().enumerate() {
                match &rep[mi][ei] {
                    Ok(est) => {
                        values.push(est.value);
                        csv.push_str(&est.csv_row(derive_seed(cfg.seed, r as u64)));
                        csv.push('\n');
                    }
                    Err(e) => {
                        failure.get_or_insert_with(|| (status_of(e), e.to_string()));
                    }
                }
            }
            let row = match failure {
                None => SummaryRow {
                    estimator: id.to_string(),
                    m,
                    summary: Some(Summary::of(&values)?),
                    status: "ok".into(),
                },
                Some((status, msg)) => {
                    log::warn!("{id} at M={m} marked invalid: {msg}");
                    SummaryRow {
                        estimator: id.to_string(),
                        m,
                        summary: None,
                        status,
                    }
                }
            };
            table.rows.push(row);
        }
    }
    let files = vec![
        write_file(&globals.out_dir, "estimates.csv", &csv)?,
        write_file(&globals.out_dir, "summary.csv", &table.to_csv())?,
    ];
    Ok(EstimateReport {
        exact_kl: exact,
        table,
        files,
    })
}

/// Runs the identity suite configured by `[verify]` (`pairs`, `seed`,
/// `families`, `perturb_rb`); `perturb_rb` from the command line wins.
pub fn cmd_verify(config: &Config, globals: &Globals, perturb_rb: bool) -> Result<VerifyReport> {
    const S: &str = "verify";
    config.check_sections(SECTIONS)?;
    config.check_keys(S, &["pairs", "seed", "families", "perturb_rb"])?;
    let suite = SuiteConfig {
        pairs: config.parsed_or(S, "pairs", 100)?,
        seed: base_seed(config, globals, S)?,
        families: config.list(S, "families")?.unwrap_or_else(|| Family::ALL.to_vec()),
        perturb_rb: perturb_rb || config.parsed_or(S, "perturb_rb", false)?,
    };
    let report = run_identity_suite(&suite)?;
    write_file(&globals.out_dir, "verify.csv", &report.to_csv())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    /// Relative error of the exact KL gradient against finite differences.
    pub grad_kl_rel_err: f64,
    /// Largest relative error of `∇ log p(y)` against finite differences.
    pub grad_logprob_rel_err: f64,
    pub mse_mc: f64,
    pub mse_rb: f64,
    pub grad_norm: f64,
}

/// Finite-difference table for the exact KL gradient and the exact
/// single-sample MSE of the MC and RB gradient estimators.
pub fn cmd_grad_check(config: &Config, globals: &Globals) -> Result<GradCheckReport> {
    const S: &str = "grad-check";
    config.check_sections(SECTIONS)?;
    config.check_keys(S, &["step"])?;
    let h = config.parsed_or(S, "step", DEFAULT_FD_STEP)?;
    let (p, q) = load_model_pair(config)?;
    let grad = exact_grad_kl(&p, &q)?;
    let fd = finite_diff_model(&p, |m| exact_kl(m, &q), h)?;
    let mut logprob_err = 0.0f64;
    for y in support(&p) {
        let fd_y = finite_diff_model(&p, |m| m.seq_logprob(&y), h)?;
        logprob_err = logprob_err.max(grad_log_prob(&p, &y)?.rel_err(&fd_y));
    }
    let mc = exact_grad_moments(&p, &grad, |y| mc_grad_term(&p, &q, y))?;
    let rb = exact_grad_moments(&p, &grad, |y| rb_grad_term(&p, &q, y))?;
    let report = GradCheckReport {
        grad_kl_rel_err: grad.rel_err(&fd),
        grad_logprob_rel_err: logprob_err,
        mse_mc: mc.mse,
        mse_rb: rb.mse,
        grad_norm: grad.norm(),
    };
    write_file(&globals.out_dir, "grad_check.csv", &grad_report_csv(&grad, &fd))?;
    write_file(&globals.out_dir, "grad_check.json", &serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Reads `[train]`: `beta`, `lr`, `steps`, `batch_size`, `k`, `estimator`,
/// `reward`, `seed`.
pub fn train_config(config: &Config, globals: &Globals) -> Result<TrainConfig> {
    const S: &str = "train";
    config.check_keys(S, &["beta", "lr", "steps", "batch_size", "k", "estimator", "reward", "seed"])?;
    let d = TrainConfig::default();
    let out = TrainConfig {
        beta: config.parsed_or(S, "beta", d.beta)?,
        lr: config.parsed_or(S, "lr", d.lr)?,
        steps: config.parsed_or(S, "steps", d.steps)?,
        batch_size: config.parsed_or(S, "batch_size", d.batch_size)?,
        group_size: config.parsed_or(S, "k", d.group_size)?,
        kl_grad_estimator: config.parsed_or::<GradKind>(S, "estimator", d.kl_grad_estimator)?,
        base_seed: base_seed(config, globals, S)?,
        reward_id: config.get(S, "reward").unwrap_or(&d.reward_id).to_string(),
    };
    out.validate()?;
    Ok(out)
}

/// The reference policy: `p` of `[model]` when that section exists,
/// otherwise the default toy reference.
pub fn reference_model(config: &Config) -> Result<TabularLM> {
    if config.has_section("model") {
        Ok(load_model_pair(config)?.0)
    } else {
        Ok(default_reference())
    }
}

pub fn cmd_train(config: &Config, globals: &Globals) -> Result<Vec<crate::rlhf::TrajectoryPoint>> {
    config.check_sections(SECTIONS)?;
    let cfg = train_config(config, globals)?;
    let reference = reference_model(config)?;
    let trajectory = train(&reference, &cfg)?;
    let csv = format!(
        "{TRAJECTORY_CSV_HEADER}\n{}",
        trajectory_csv_rows("train", &cfg, &trajectory)
    );
    write_file(&globals.out_dir, "trajectory.csv", &csv)?;
    Ok(trajectory)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BetaTrend {
    pub estimator: String,
    /// Spearman correlation of β with final exact KL.
    pub rho: f64,
    /// One-sided permutation p-value for a decreasing trend.
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParetoSummary {
    pub runs: usize,
    pub front_size: usize,
    /// Share of joint-front points trained with the RB KL gradient.
    pub rb_front_fraction: f64,
    pub null_fraction: f64,
    pub p_value: f64,
    pub n_perm: usize,
    pub beta_trend: Vec<BetaTrend>,
}

/// Reads `[pareto]`: `betas`, `runs_per_beta`, `n_perm`; run settings come
/// from `[train]`.
pub fn cmd_pareto(config: &Config, globals: &Globals) -> Result<ParetoSummary> {
    const S: &str = "pareto";
    config.check_sections(SECTIONS)?;
    config.check_keys(S, &["betas", "runs_per_beta", "n_perm"])?;
    let toy = SweepConfig::toy();
    let sweep = SweepConfig {
        betas: config.list(S, "betas")?.unwrap_or(toy.betas),
        runs_per_beta: config.parsed_or(S, "runs_per_beta", toy.runs_per_beta)?,
        estimators: toy.estimators,
        base: train_config(config, globals)?,
    };
    let n_perm = config.parsed_or(S, "n_perm", 1000)?;
    let reference = reference_model(config)?;
    let result = pareto_sweep(&reference, &sweep)?;
    let test = permutation_test(&result.points, GradKind::Rb, n_perm, derive_seed(sweep.base.base_seed, 1 << 40))?;

    let mut beta_trend = Vec::new();
    for est in &sweep.estimators {
        let pts: Vec<_> = result.points.iter().filter(|p| p.estimator == *est).collect();
        let betas: Vec<f64> = pts.iter().map(|p| p.beta).collect();
        let kls: Vec<f64> = pts.iter().map(|p| p.final_kl).collect();
        if sweep.betas.len() > 1 {
            let t = stats::spearman_decreasing_test(&betas, &kls, n_perm, derive_seed(sweep.base.base_seed, 1 << 41))?;
            beta_trend.push(BetaTrend {
                estimator: est.to_string(),
                rho: t.rho,
                p_value: t.p_value,
            });
        }
    }

    let mut pareto_csv = format!("{PARETO_CSV_HEADER}\n");
    for p in &result.points {
        pareto_csv.push_str(&p.csv_row());
        pareto_csv.push('\n');
    }
    let mut traj_csv = format!("{TRAJECTORY_CSV_HEADER}\n");
    for (run_id, cfg, trajectory) in &result.runs {
        traj_csv.push_str(&trajectory_csv_rows(run_id, cfg, trajectory));
    }
    let summary = ParetoSummary {
        runs: result.points.len(),
        front_size: test.front_size,
        rb_front_fraction: test.statistic,
        null_fraction: test.null_mean,
        p_value: test.p_value,
        n_perm,
        beta_trend,
    };
    write_file(&globals.out_dir, "pareto.csv", &pareto_csv)?;
    write_file(&globals.out_dir, "trajectories.csv", &traj_csv)?;
    write_file(&globals.out_dir, "summary.json", &serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}
