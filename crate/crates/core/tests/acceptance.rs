//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any failed.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rbkl::estimators::{cv_term, rb_term, EstimatorId};
use rbkl::gradients::GradVector;
use rbkl::harness::{self, run_identity_suite, Config, Family, Globals, SuiteConfig, VerifyReport};
use rbkl::oracle::{exact_estimator_moments, exact_kl};
use rbkl::rlhf::{default_reference, rloo_step, Reward, TrainConfig};
use rbkl::sampling::{child_stream, sample, stream};
use rbkl::TabularLM;

/// KL(G(0.3) ‖ G(0.5)) at horizon 3, from an independent enumeration.
const FIXTURE_KL: f64 = 0.11437320112202201;
/// Exact single-sample variances of MC and RB on the same fixture.
const FIXTURE_VAR_MC: f64 = 0.16553781103402293;
const FIXTURE_VAR_RB: f64 = 0.0028293802885327253;

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);

fn scratch_dir(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name)
}

fn suite(families: &[Family]) -> Result<VerifyReport, String> {
    run_identity_suite(&SuiteConfig {
        families: families.to_vec(),
        ..SuiteConfig::default()
    })
    .map_err(|e| e.to_string())
}

/// Passes when every listed identity was checked and held.
fn require(report: &VerifyReport, names: &[&str]) -> Outcome {
    let mut parts = Vec::new();
    for name in names {
        let c = report.check(name).ok_or_else(|| format!("{name} was not evaluated"))?;
        let line = format!("{name} max dev {:.2e} on {} pairs", c.max_deviation, c.checked);
        if !c.passed() {
            return Err(format!("{line}, {} failures (first at pair {:?})", c.failures, c.first_failure));
        }
        parts.push(line);
    }
    Ok(parts.join("; "))
}

fn oracle_consistency() -> Outcome {
    let r = suite(&[Family::Oracle])?;
    if r.pairs != 100 {
        return Err(format!("ran {} pairs", r.pairs));
    }
    require(&r, &["oracle-consistency"])
}

fn unbiasedness() -> Outcome {
    let r = suite(&[Family::Unbiased, Family::HorvitzThompson])?;
    require(
        &r,
        &[
            "unbiased-mc",
            "unbiased-cv-0",
            "unbiased-cv-1",
            "unbiased-cv-alpha*",
            "unbiased-rb",
            "unbiased-offpolicy-mc",
            "unbiased-offpolicy-rb",
            "unbiased-ht",
        ],
    )
}

fn variance_ordering() -> Outcome {
    let r = suite(&[Family::Variance])?;
    require(&r, &["variance-ordering"])
}

fn control_variates() -> Outcome {
    let r = suite(&[Family::ControlVariate])?;
    require(
        &r,
        &[
            "cv-covariance",
            "cv-optimal-variance",
            "cv-safe-interval",
            "cv-outside-interval-hurts",
            "cv-alpha-one-rule",
        ],
    )
}

fn nonnegativity_fuzz() -> Outcome {
    const PAIRS: usize = 20;
    const PER_PAIR: usize = 5_000;
    let (mut rb_neg, mut cv_neg, mut total) = (0usize, 0usize, 0usize);
    let mut min_seen = f64::INFINITY;
    for i in 0..PAIRS {
        let case = harness::suite::random_case(0xF022, i).map_err(|e| e.to_string())?;
        let batch = sample(&case.p, &mut child_stream(0xF022, 1000 + i as u64), PER_PAIR).map_err(|e| e.to_string())?;
        for y in batch.seqs() {
            let rb = rb_term(&case.p, &case.q, y).map_err(|e| e.to_string())?;
            let cv = cv_term(&case.p, &case.q, y, 1.0).map_err(|e| e.to_string())?;
            rb_neg += usize::from(rb < 0.0);
            cv_neg += usize::from(cv < 0.0);
            min_seen = min_seen.min(rb).min(cv);
            total += 1;
        }
    }
    let line = format!("{total} samples: {rb_neg} negative RB, {cv_neg} negative CV(1), min value {min_seen:.3e}");
    if total == PAIRS * PER_PAIR && rb_neg == 0 && cv_neg == 0 {
        Ok(line)
    } else {
        Err(line)
    }
}

fn gradient_correctness() -> Outcome {
    let r = suite(&[Family::Gradient])?;
    require(
        &r,
        &[
            "grad-logprob-finite-diff",
            "grad-kl-finite-diff",
            "grad-unbiased-mc",
            "grad-unbiased-rb",
            "grad-unbiased-offpolicy-mc",
            "grad-unbiased-offpolicy-rb",
            "grad-mse-ordering",
        ],
    )
}

fn ppo_identities() -> Outcome {
    let r = suite(&[Family::Ppo])?;
    let decomposition = require(&r, &["ppo-decomposition"])?;
    let g = |a| TabularLM::geometric(a, 3).map_err(|e| e.to_string());
    let (pi, old, q) = (g(0.3)?, g(0.4)?, g(0.5)?);
    let mean = |id| {
        exact_estimator_moments(id, &pi, &q, Some(&old))
            .map(|m| m.mean)
            .map_err(|e| e.to_string())
    };
    let bias = (mean(EstimatorId::PpoRbNaive)? - mean(EstimatorId::PpoMc)?).abs();
    let line = format!("{decomposition}; naive RB-PPO bias {bias:.6} on G(0.3)/G(0.4)/G(0.5)");
    if bias > 1e-3 {
        Ok(line)
    } else {
        Err(line)
    }
}

fn sampling_reproduction() -> Outcome {
    let p = TabularLM::geometric(0.3, 3).map_err(|e| e.to_string())?;
    let q = TabularLM::geometric(0.5, 3).map_err(|e| e.to_string())?;
    let kl = exact_kl(&p, &q).map_err(|e| e.to_string())?;
    if (kl - FIXTURE_KL).abs() > 1e-12 {
        return Err(format!("oracle KL {kl} disagrees with the frozen value {FIXTURE_KL}"));
    }
    let config = Config::parse("[model]\nkind = geometric\np_a = 0.3\nq_a = 0.5\nmax_len = 3\n[estimate]\nestimators = mc, rb\nm = 1\nreplications = 10000\nseed = 8\n")
        .map_err(|e| e.to_string())?;
    let globals = Globals {
        seed: None,
        out_dir: scratch_dir("estimate"),
    };
    let report = harness::cmd_estimate(&config, &globals).map_err(|e| e.to_string())?;
    let get = |name| {
        report
            .table
            .row(name, 1)
            .and_then(|r| r.summary)
            .ok_or_else(|| format!("missing {name} row"))
    };
    let (mc, rb) = (get("mc")?, get("rb")?);
    let z_mc = (mc.mean - FIXTURE_KL).abs() / mc.se();
    let z_rb = (rb.mean - FIXTURE_KL).abs() / rb.se();
    let target = (FIXTURE_VAR_RB / FIXTURE_VAR_MC).sqrt();
    let ratio = rb.std / mc.std;
    let line = format!(
        "mc {:.6} ± {:.6} (z {z_mc:.2}), rb {:.6} ± {:.6} (z {z_rb:.2}), std ratio {ratio:.4} vs {target:.4}",
        mc.mean, mc.std, rb.mean, rb.std
    );
    if z_mc <= 5.0 && z_rb <= 5.0 && (ratio / target - 1.0).abs() <= 0.2 && mc.count == 10_000 {
        Ok(line)
    } else {
        Err(line)
    }
}

fn constant_reward_is_stationary() -> Result<(), String> {
    let reference = default_reference();
    let config = TrainConfig {
        beta: 0.0,
        ..TrainConfig::default()
    };
    let reward = Reward::Constant(0.75);
    let mut rng = stream(9);
    let mut policy = reference.clone();
    for step in 0..20 {
        let out = rloo_step(&policy, &reference, &config, &reward, step, &mut rng).map_err(|e| e.to_string())?;
        if out.reward_grad != GradVector::for_model(&policy) || out.policy.logits() != policy.logits() {
            return Err(format!("constant reward moved the policy at step {step}"));
        }
        policy = out.policy;
    }
    Ok(())
}

fn rlhf_sweep() -> Outcome {
    constant_reward_is_stationary()?;
    let config = Config::parse("[pareto]\nn_perm = 1000\n").map_err(|e| e.to_string())?;
    let run = |name: &str| -> Result<(harness::ParetoSummary, Vec<Vec<u8>>), String> {
        let globals = Globals {
            seed: Some(0),
            out_dir: scratch_dir(name),
        };
        let s = harness::cmd_pareto(&config, &globals).map_err(|e| e.to_string())?;
        let files = ["pareto.csv", "trajectories.csv", "summary.json"]
            .iter()
            .map(|f| std::fs::read(globals.out_dir.join(f)).map_err(|e| e.to_string()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((s, files))
    };
    let (first, files_a) = run("pareto-a")?;
    let (_, files_b) = run("pareto-b")?;
    if files_a != files_b {
        return Err("repeated sweep produced different outputs".into());
    }
    let pareto_csv = String::from_utf8_lossy(&files_a[0]);
    let rows = pareto_csv.lines().skip(1).count();
    let on_front = pareto_csv.lines().skip(1).filter(|l| l.ends_with(",true")).count();
    let line = format!(
        "{rows} runs, {on_front} on front, RB front fraction {:.3}, permutation p = {:.4}, stationary under constant reward",
        first.rb_front_fraction, first.p_value
    );
    if rows == 36 && on_front == first.front_size && (0.0..=1.0).contains(&first.p_value) {
        Ok(line)
    } else {
        Err(line)
    }
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("oracle consistency", Duration::from_secs(10), oracle_consistency),
        ("exact unbiasedness", Duration::from_secs(60), unbiasedness),
        ("RB variance ordering", Duration::from_secs(60), variance_ordering),
        ("control-variate identities", Duration::from_secs(60), control_variates),
        ("non-negativity fuzz", Duration::from_secs(60), nonnegativity_fuzz),
        ("gradient correctness", Duration::from_secs(120), gradient_correctness),
        ("PPO decomposition and naive RB bias", Duration::from_secs(60), ppo_identities),
        ("sampling-scale estimate table", Duration::from_secs(30), sampling_reproduction),
        ("RLHF sweep, front and permutation test", Duration::from_secs(600), rlhf_sweep),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) if elapsed <= budget => (true, d),
            Ok(d) => (false, format!("{d}; exceeded the {budget:?} budget")),
            Err(d) => (false, d),
        };
        failed += usize::from(!ok);
        println!(
            "[{}] criterion {}: {name} ({:.1}s): {detail}",
            if ok { "PASS" } else { "FAIL" },
            i + 1,
            elapsed.as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
