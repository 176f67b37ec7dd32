//! End-to-end behaviour of the KL-regularised RLOO loop on the toy fixture.

use rbkl::gradients::GradKind;
use rbkl::rlhf::{default_reference, train, train_run, TrainConfig};

fn config(beta: f64) -> TrainConfig {
    TrainConfig {
        beta,
        ..TrainConfig::default()
    }
}

#[test]
fn identical_seeds_give_identical_trajectories() {
    let reference = default_reference();
    for kind in [GradKind::Mc, GradKind::Rb] {
        let c = TrainConfig {
            kl_grad_estimator: kind,
            steps: 60,
            base_seed: 17,
            ..config(0.05)
        };
        assert_eq!(train(&reference, &c).unwrap(), train(&reference, &c).unwrap());
    }
}

#[test]
fn pure_reward_maximisation_improves_reward() {
    let traj = train(&default_reference(), &config(0.0)).unwrap();
    assert_eq!(traj.len(), 200);
    let head: f64 = traj[..10].iter().map(|p| p.avg_reward).sum::<f64>() / 10.0;
    let tail: f64 = traj[190..].iter().map(|p| p.avg_reward).sum::<f64>() / 10.0;
    assert!(tail > head, "{head} -> {tail}");
}

#[test]
fn default_beta_run_keeps_kl_finite() {
    let traj = train(&default_reference(), &config(0.07)).unwrap();
    assert!(traj.iter().all(|p| p.exact_kl.is_finite() && p.exact_kl >= 0.0 && p.est_kl.is_finite()));
}

#[test]
fn huge_beta_pins_the_policy_to_the_reference() {
    // SGD is only stable while lr · β times the KL curvature stays small.
    let c = TrainConfig {
        lr: 1e-4,
        steps: 50,
        ..config(1e3)
    };
    let run = train_run(&default_reference(), &c).unwrap();
    assert!(run.trajectory.iter().all(|p| p.exact_kl <= 1e-3));
}

#[test]
fn kl_penalty_never_increases_kl_under_zero_reward() {
    let reference = default_reference();
    for seed in 0..3 {
        let base = TrainConfig {
            reward_id: "zero".into(),
            base_seed: seed,
            ..config(0.0)
        };
        let free = train_run(&reference, &base).unwrap();
        let penalised = train_run(&reference, &TrainConfig { beta: 0.1, ..base }).unwrap();
        let kl = |r: &rbkl::rlhf::TrainRun| r.trajectory.last().unwrap().exact_kl;
        assert!(kl(&penalised) <= kl(&free));
    }
}
