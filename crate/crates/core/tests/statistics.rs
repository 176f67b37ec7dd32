//! Seeded statistical checks of the sampling estimators and the sweep tools.

use std::path::PathBuf;

use rand::Rng;
use rbkl::estimators::mc_estimate;
use rbkl::gradients::GradKind;
use rbkl::harness::stats::{spearman_decreasing_test, Summary};
use rbkl::harness::{cmd_estimate, Config, Globals};
use rbkl::oracle::{exact_estimator_moments, exact_kl};
use rbkl::rlhf::{default_reference, pareto_sweep, permutation_test, ParetoPoint, SweepConfig};
use rbkl::sampling::{child_stream, derive_seed, sample, stream};
use rbkl::estimators::EstimatorId;
use rbkl::TabularLM;

fn out_dir(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("statistics").join(name)
}

fn fixture() -> (TabularLM, TabularLM) {
    (TabularLM::geometric(0.3, 3).unwrap(), TabularLM::geometric(0.5, 3).unwrap())
}

#[test]
fn mc_variance_shrinks_as_one_over_m() {
    let (p, q) = fixture();
    let var_f = exact_estimator_moments(EstimatorId::Mc, &p, &q, None).unwrap().variance;
    let reps = 10_000;
    let values: Vec<f64> = (0..reps)
        .map(|r| {
            let batch = sample(&p, &mut child_stream(derive_seed(21, r), 0), 10).unwrap();
            mc_estimate(&batch, &p, &q).unwrap().value
        })
        .collect();
    let s = Summary::of(&values).unwrap();
    let empirical = s.std * s.std;
    // Relative standard error of a sample variance is about sqrt(2 / (R − 1)).
    let rse = (2.0 / (reps as f64 - 1.0)).sqrt();
    assert!(((empirical / (var_f / 10.0)) - 1.0).abs() < 5.0 * rse, "{empirical} vs {}", var_f / 10.0);
}

#[test]
fn estimate_table_over_an_m_grid() {
    let config = Config::parse("[estimate]\nestimators = mc, rb, cv=1, ht\nm = 1, 5, 10\nreplications = 4000\nseed = 5\n").unwrap();
    let globals = Globals {
        seed: None,
        out_dir: out_dir("grid"),
    };
    let report = cmd_estimate(&config, &globals).unwrap();
    assert_eq!(report.table.rows.len(), 12);
    let kl = report.exact_kl.unwrap();
    for row in &report.table.rows {
        let s = row.summary.unwrap();
        assert!((s.mean - kl).abs() <= 5.0 * s.se() + 1e-12, "{} M={}", row.estimator, row.m);
    }
    let std = |m| report.table.row("mc", m).unwrap().summary.unwrap().std;
    for m in [5, 10] {
        let ratio = std(m) / std(1) * (m as f64).sqrt();
        assert!((ratio - 1.0).abs() < 0.1, "M={m}: ratio {ratio}");
    }
    let csv = std::fs::read_to_string(globals.out_dir.join("estimates.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("estimator,M,seed,value,nonneg_violations"));
    assert_eq!(csv.lines().count(), 1 + 4 * 3 * 4000);
}

#[test]
fn identical_models_give_zero_everywhere() {
    let config = Config::parse("[model]\np_a = 0.4\nq_a = 0.4\n[estimate]\nestimators = mc, rb\nm = 1, 4\nreplications = 200\n").unwrap();
    let report = cmd_estimate(
        &config,
        &Globals {
            seed: Some(1),
            out_dir: out_dir("identical"),
        },
    )
    .unwrap();
    assert_eq!(report.exact_kl, Some(0.0));
    for row in &report.table.rows {
        assert_eq!(row.summary.unwrap().mean, 0.0);
    }
    assert_eq!(report.table.row("rb", 1).unwrap().summary.unwrap().std, 0.0);
}

#[test]
fn support_violation_marks_rows_invalid() {
    // q puts all mass on the empty string, so KL(p‖q) is infinite.
    let p = TabularLM::geometric(0.5, 2).unwrap();
    let q = TabularLM::new(p.alphabet().clone(), 0, 2, vec![-1e308, 0.0]).unwrap();
    let dir = out_dir("violation");
    std::fs::create_dir_all(&dir).unwrap();
    p.save(dir.join("p.model")).unwrap();
    q.save(dir.join("q.model")).unwrap();
    std::fs::write(
        dir.join("run.cfg"),
        "[model]\nkind = files\np = p.model\nq = q.model\n[estimate]\nestimators = mc, rb\nreplications = 50\n",
    )
    .unwrap();
    let config = Config::load(dir.join("run.cfg")).unwrap();
    let report = cmd_estimate(&config, &Globals { seed: None, out_dir: dir.clone() }).unwrap();
    assert_eq!(report.exact_kl, None);
    for row in &report.table.rows {
        assert!(row.summary.is_none());
        assert_eq!(row.status, "support-violation");
    }
    assert!(exact_kl(&p, &q).is_err());
}

#[test]
fn permutation_p_values_are_calibrated_under_the_null() {
    let mut p_values = Vec::new();
    for trial in 0..100u64 {
        let mut rng = stream(derive_seed(99, trial));
        let points: Vec<ParetoPoint> = (0..24)
            .map(|i| ParetoPoint {
                run_id: i.to_string(),
                estimator: if rng.gen::<bool>() { GradKind::Rb } else { GradKind::Mc },
                beta: 0.0,
                seed: 0,
                final_reward: rng.gen(),
                final_kl: rng.gen(),
                on_front: false,
            })
            .collect();
        if points.iter().all(|p| p.estimator == points[0].estimator) {
            continue;
        }
        p_values.push(permutation_test(&points, GradKind::Rb, 200, trial).unwrap().p_value);
    }
    p_values.sort_by(f64::total_cmp);
    let median = p_values[p_values.len() / 2];
    assert!((0.2..=0.8).contains(&median), "median p = {median}");
}

#[test]
fn final_kl_decreases_with_beta() {
    let sweep = SweepConfig {
        runs_per_beta: 5,
        estimators: vec![GradKind::Rb],
        ..SweepConfig::toy()
    };
    let result = pareto_sweep(&default_reference(), &sweep).unwrap();
    let betas: Vec<f64> = result.points.iter().map(|p| p.beta).collect();
    let kls: Vec<f64> = result.points.iter().map(|p| p.final_kl).collect();
    let test = spearman_decreasing_test(&betas, &kls, 2000, 3).unwrap();
    assert!(test.rho < 0.0 && test.p_value < 0.05, "{test:?}");
}
