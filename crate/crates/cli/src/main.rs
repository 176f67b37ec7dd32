//! `rbkl`: KL estimator experiments on tabular sequence models.
//!
//! Exit codes: 0 on success, 1 when a verification fails or a run aborts,
//! 2 on usage or configuration errors.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use rbkl::harness::{self, Config, Globals};
use rbkl::Error;

#[derive(Debug, Parser)]
#[command(name = "rbkl", version, about = "Monte Carlo and Rao-Blackwellized KL estimation on tabular sequence models")]
struct Cli {
    /// Config file with [section] headers and key = value lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; overrides any seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Replicated estimates with a mean ± std table per estimator and M.
    Estimate {
        /// Comma-separated estimators, e.g. mc,rb,cv=1,cv-pilot,ht.
        #[arg(long)]
        estimators: Option<String>,
        /// Comma-separated sample sizes.
        #[arg(long)]
        m: Option<String>,
        #[arg(long)]
        replications: Option<usize>,
    },
    /// Exact identity suite over seeded random model pairs.
    Verify {
        #[arg(long)]
        pairs: Option<usize>,
        /// Replace the RB statistic by 2f - RB in the variance check.
        #[arg(long)]
        perturb_rb: bool,
    },
    /// Finite-difference checks and exact gradient MSE comparison.
    GradCheck,
    /// One KL-regularised RLOO run.
    Train {
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        /// KL gradient estimator: mc or rb.
        #[arg(long)]
        estimator: Option<String>,
    },
    /// β sweep for both KL gradient estimators, Pareto front and permutation test.
    Pareto {
        #[arg(long)]
        n_perm: Option<usize>,
    },
}

fn is_usage_error(err: &anyhow::Error) -> bool {
    err.chain().any(|cause| {
        matches!(
            cause.downcast_ref::<Error>(),
            Some(
                Error::InvalidArgument(_)
                    | Error::Parse { .. }
                    | Error::UnknownEstimator(_)
                    | Error::UnknownReward(_)
                    | Error::Io(_)
            )
        )
    })
}

fn load_config(cli: &Cli) -> anyhow::Result<Config> {
    match &cli.config {
        Some(path) => Config::load(path).with_context(|| format!("reading config {}", path.display())),
        None => Ok(Config::default()),
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Error::InvalidArgument("--jobs must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global()?;
    }
    let mut config = load_config(&cli)?;
    let globals = Globals {
        seed: cli.seed,
        out_dir: cli.out.clone(),
    };
    match cli.command {
        Command::Estimate {
            estimators,
            m,
            replications,
        } => {
            if let Some(v) = estimators {
                config.set("estimate", "estimators", v);
            }
            if let Some(v) = m {
                config.set("estimate", "m", v);
            }
            if let Some(v) = replications {
                config.set("estimate", "replications", v.to_string());
            }
            let report = harness::cmd_estimate(&config, &globals)?;
            match report.exact_kl {
                Some(kl) => println!("exact KL = {kl:.10}"),
                None => println!("exact KL = inf (support violation)"),
            }
            print!("{}", report.table);
            for f in &report.files {
                log::info!("wrote {}", f.display());
            }
            Ok(true)
        }
        Command::Verify { pairs, perturb_rb } => {
            if let Some(v) = pairs {
                config.set("verify", "pairs", v.to_string());
            }
            let report = harness::cmd_verify(&config, &globals, perturb_rb)?;
            print!("{report}");
            println!("{}", if report.passed() { "all identities hold" } else { "verification FAILED" });
            Ok(report.passed())
        }
        Command::GradCheck => {
            let r = harness::cmd_grad_check(&config, &globals)?;
            println!("grad KL vs finite differences: rel err {:.3e}", r.grad_kl_rel_err);
            println!("grad log p vs finite differences: max rel err {:.3e}", r.grad_logprob_rel_err);
            println!("exact MSE mc_grad = {:.10}", r.mse_mc);
            println!("exact MSE rb_grad = {:.10}", r.mse_rb);
            let ok = r.mse_rb <= r.mse_mc + 1e-12 && r.grad_kl_rel_err <= 1e-6 && r.grad_logprob_rel_err <= 1e-6;
            println!("{}", if ok { "MSE(rb) <= MSE(mc)" } else { "gradient check FAILED" });
            Ok(ok)
        }
        Command::Train { beta, steps, estimator } => {
            if let Some(v) = beta {
                config.set("train", "beta", v.to_string());
            }
            if let Some(v) = steps {
                config.set("train", "steps", v.to_string());
            }
            if let Some(v) = estimator {
                config.set("train", "estimator", v);
            }
            let trajectory = harness::cmd_train(&config, &globals)?;
            if let (Some(first), Some(last)) = (trajectory.first(), trajectory.last()) {
                println!(
                    "steps={} reward {:.4} -> {:.4}, exact KL {:.4} -> {:.4}",
                    trajectory.len(),
                    first.avg_reward,
                    last.avg_reward,
                    first.exact_kl,
                    last.exact_kl
                );
            }
            Ok(true)
        }
        Command::Pareto { n_perm } => {
            if let Some(v) = n_perm {
                config.set("pareto", "n_perm", v.to_string());
            }
            let s = harness::cmd_pareto(&config, &globals)?;
            println!("runs={} front size={}", s.runs, s.front_size);
            println!(
                "rb front fraction = {:.4} (null {:.4}), permutation p-value = {:.4}",
                s.rb_front_fraction, s.null_fraction, s.p_value
            );
            for t in &s.beta_trend {
                println!("{}: spearman(beta, final KL) = {:.4}, p = {:.4}", t.estimator, t.rho, t.p_value);
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            if is_usage_error(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
