//! End-to-end pipeline checks at a small training budget: determinism,
//! phase isolation, budget accounting, model-quality floors, and the run
//! directory artifact contract.

use std::sync::OnceLock;

use farl_core::data::derive_seed;
use farl_core::envs::scripted::sample_near_failure_state;
use farl_core::envs::{env_reset, failure_distance, TaskId};
use farl_core::policy::default_policy_spec;
use farl_core::policy::PolicyBundle;
use farl_core::shield::{ShieldMode, DECISIONS_CSV_HEADER};
use farl_core::trainer::{
    evaluate, generate_demo_bundle, normalized_return, policy_fingerprint, run_offline_phase,
    run_online_phase, wm_fingerprint, DemoBundle, OfflineArtifacts, OfflineReport, RunConfig,
    RunMetrics, RunSummary, SUMMARY_SCHEMA_VERSION,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config() -> RunConfig {
    RunConfig {
        task: TaskId::BoundedPush,
        seed: 7,
        online_budget: 600,
        rollout_steps: 200,
        eval_episodes: 10,
        task_demo_count: 20,
        recovery_demo_count: 20,
        failure_transitions: 1200,
        bc_epochs: 40,
        recovery_bc_epochs: 40,
        offline_epochs: 5,
        wm_steps: 5000,
        qsafe_steps: 5000,
        ..RunConfig::default()
    }
}

struct Shared {
    cfg: RunConfig,
    demos: DemoBundle,
    artifacts: OfflineArtifacts,
    report: OfflineReport,
}

/// One offline run shared by every test below; training it per-test would
/// dominate the suite's runtime without adding coverage.
fn shared() -> &'static Shared {
    static CELL: OnceLock<Shared> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut cfg = small_config();
        // Train the Q_safe critic too so every shield backend is available.
        cfg.safety.mode = ShieldMode::QSafe;
        let demos = generate_demo_bundle(&cfg).expect("demo generation");
        let (artifacts, report) = run_offline_phase(&cfg, &demos).expect("offline phase");
        Shared {
            cfg,
            demos,
            artifacts,
            report,
        }
    })
}

#[test]
fn offline_phase_is_deterministic() {
    let s = shared();
    let (again, _) = run_offline_phase(&s.cfg, &s.demos).expect("offline rerun");
    assert_eq!(
        policy_fingerprint(&s.artifacts.task_policy),
        policy_fingerprint(&again.task_policy)
    );
    assert_eq!(
        policy_fingerprint(&s.artifacts.recovery_policy),
        policy_fingerprint(&again.recovery_policy)
    );
    assert_eq!(
        wm_fingerprint(&s.artifacts.world_model),
        wm_fingerprint(&again.world_model)
    );
    assert_eq!(
        s.artifacts.expert_return.to_bits(),
        again.expert_return.to_bits()
    );
}

#[test]
fn offline_policy_beats_random_baseline() {
    let s = shared();
    let norm = normalized_return(
        s.report.offline_eval.mean_return,
        s.artifacts.expert_return,
        s.artifacts.random_return,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let random = PolicyBundle::init(default_policy_spec(), &mut rng);
    let random_eval = evaluate(&random, s.cfg.task, s.cfg.eval_episodes, 99).unwrap();
    let random_norm = normalized_return(
        random_eval.mean_return,
        s.artifacts.expert_return,
        s.artifacts.random_return,
    );
    assert!(
        norm > random_norm + 10.0,
        "offline {norm:.1} vs random {random_norm:.1}"
    );
}

#[test]
fn finetune_does_not_regress_from_bc() {
    // Re-derive the pure BC policy along the same seed path the offline phase
    // uses, so the comparison isolates the clipped fine-tune stage.
    let s = shared();
    let bc = farl_core::policy::bc_train(
        &s.demos.task,
        default_policy_spec(),
        s.cfg.bc_epochs,
        s.cfg.ppo.lr_policy,
        derive_seed(s.cfg.seed, 10),
    )
    .unwrap();
    let bc_eval = evaluate(
        &bc.bundle,
        s.cfg.task,
        s.cfg.eval_episodes,
        derive_seed(s.cfg.seed, 17),
    )
    .unwrap();
    assert!(
        s.report.offline_eval.mean_return >= bc_eval.mean_return,
        "finetuned {} vs bc {}",
        s.report.offline_eval.mean_return,
        bc_eval.mean_return
    );
}

#[test]
fn world_model_ranks_holdout_constraints() {
    let s = shared();
    assert!(
        s.report.wm.holdout_constraint_auc >= 0.85,
        "AUC {}",
        s.report.wm.holdout_constraint_auc
    );
    assert!(!s.report.wm.quality_warning);
    assert!(s.report.wm.holdout_chat_cost1 > s.report.wm.holdout_chat_cost0);
}

#[test]
fn open_loop_decoder_error_stays_bounded() {
    let s = shared();
    let one = s.report.wm.holdout_decoder_rmse_one_step;
    let open = s.report.wm.holdout_decoder_rmse_open_loop;
    assert!(one.is_finite() && one > 0.0);
    assert!(
        open <= 2.0 * one,
        "open-loop RMSE {open} vs one-step {one}"
    );
}

#[test]
fn qsafe_separates_boundary_from_interior() {
    let s = shared();
    let critic = s.artifacts.qsafe.as_ref().expect("qsafe trained");
    let policy = &s.artifacts.task_policy;
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut near = Vec::new();
    let mut interior = Vec::new();
    while near.len() < 30 || interior.len() < 30 {
        if near.len() < 30 {
            let st = sample_near_failure_state(s.cfg.task, &mut rng);
            let obs = st.observation();
            near.push(critic.estimate(&obs, &policy.act_mean(&obs).unwrap()).unwrap());
        }
        let st = env_reset(s.cfg.task, &mut rng);
        if failure_distance(s.cfg.task, &st) > 0.2 && interior.len() < 30 {
            let obs = st.observation();
            interior.push(critic.estimate(&obs, &policy.act_mean(&obs).unwrap()).unwrap());
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let gap = mean(&near) - mean(&interior);
    assert!(gap > 0.1, "boundary-interior Q_safe gap {gap}");
}

#[test]
fn online_none_mode_is_deterministic_and_spends_exact_budget() {
    let s = shared();
    let mut cfg = s.cfg.clone();
    cfg.safety.mode = ShieldMode::None;
    cfg.online_budget = 500; // not a multiple of rollout_steps on purpose
    let a = run_online_phase(&cfg, &s.artifacts).expect("online a");
    let b = run_online_phase(&cfg, &s.artifacts).expect("online b");
    assert_eq!(a.metrics.total_env_steps, 500);
    assert_eq!(b.metrics.total_env_steps, 500);
    assert_eq!(
        policy_fingerprint(&a.policy),
        policy_fingerprint(&b.policy)
    );
    assert_eq!(a.metrics.episodes.len(), b.metrics.episodes.len());
    for (x, y) in a.metrics.episodes.iter().zip(&b.metrics.episodes) {
        assert_eq!(x.ret.to_bits(), y.ret.to_bits());
        assert_eq!(x.steps, y.steps);
    }
    // No shield: zero firings, and every decision has estimate 0.
    assert!(a.metrics.episodes.iter().all(|e| e.shield_firings == 0));
    assert!(a.decisions.iter().all(|d| !d.fired));
}

#[test]
fn online_phase_leaves_frozen_components_untouched() {
    let s = shared();
    let recovery_fp = policy_fingerprint(&s.artifacts.recovery_policy);
    let wm_fp = wm_fingerprint(&s.artifacts.world_model);
    let task_fp = policy_fingerprint(&s.artifacts.task_policy);
    let mut cfg = s.cfg.clone();
    cfg.safety.mode = ShieldMode::WorldModel;
    cfg.online_budget = 400;
    let out = run_online_phase(&cfg, &s.artifacts).expect("online");
    assert_eq!(recovery_fp, policy_fingerprint(&s.artifacts.recovery_policy));
    assert_eq!(wm_fp, wm_fingerprint(&s.artifacts.world_model));
    // The input task policy is untouched; the updated copy must differ.
    assert_eq!(task_fp, policy_fingerprint(&s.artifacts.task_policy));
    assert_ne!(task_fp, policy_fingerprint(&out.policy));
}

#[test]
fn shield_decisions_fire_exactly_above_threshold() {
    let s = shared();
    let mut cfg = s.cfg.clone();
    cfg.safety.mode = ShieldMode::WorldModel;
    cfg.online_budget = 400;
    let out = run_online_phase(&cfg, &s.artifacts).expect("online");
    assert_eq!(out.decisions.len(), 400);
    for d in &out.decisions {
        assert_eq!(d.fired, d.estimate > d.eps_safe, "step {}", d.step);
    }
    let fired_total: usize = out.metrics.episodes.iter().map(|e| e.shield_firings).sum();
    let fired_decisions = out.decisions.iter().filter(|d| d.fired).count();
    // Episode tallies can lag by a truncated final episode, never lead.
    assert!(fired_total <= fired_decisions);
}

#[test]
fn run_dir_contains_complete_consistent_artifacts() {
    let s = shared();
    let mut cfg = s.cfg.clone();
    cfg.safety.mode = ShieldMode::QSafe;
    cfg.online_budget = 400;
    let out = run_online_phase(&cfg, &s.artifacts).expect("online");
    let dir = tempfile::tempdir().unwrap();
    let summary =
        farl_core::trainer::write_run_dir(dir.path(), &cfg, &s.report, &s.artifacts, &out)
            .expect("write run dir");

    for name in ["metrics.csv", "decisions.csv", "summary.json"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
    for name in [
        "task_policy.json",
        "recovery_policy.json",
        "value.json",
        "world_model",
        "qsafe.json",
    ] {
        assert!(
            dir.path().join("checkpoints").join(name).exists(),
            "checkpoints/{name} missing"
        );
    }

    let episodes = RunMetrics::read_csv_episodes(&dir.path().join("metrics.csv")).unwrap();
    assert_eq!(episodes.len(), summary.episode_count);

    let decisions = std::fs::read_to_string(dir.path().join("decisions.csv")).unwrap();
    let mut lines = decisions.lines();
    assert_eq!(lines.next(), Some(DECISIONS_CSV_HEADER));
    assert_eq!(lines.count(), 400);

    let parsed: RunSummary =
        serde_json::from_slice(&std::fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(parsed.schema_version, SUMMARY_SCHEMA_VERSION);
    assert_eq!(parsed.total_env_steps, 400);
    assert_eq!(
        parsed.normalized_return_after,
        normalized_return(
            parsed.mean_return_after,
            s.artifacts.expert_return,
            s.artifacts.random_return
        )
    );

    let reloaded = farl_core::trainer::load_policy(
        &dir.path().join("checkpoints").join("task_policy.json"),
    )
    .unwrap();
    assert_eq!(policy_fingerprint(&reloaded), policy_fingerprint(&out.policy));
}

#[test]
fn demo_bundle_covers_all_tasks() {
    for task in TaskId::ALL {
        let mut cfg = small_config();
        cfg.task = task;
        cfg.seed = derive_seed(11, task as u64);
        cfg.task_demo_count = 8;
        cfg.recovery_demo_count = 8;
        cfg.failure_transitions = 400;
        let bundle = generate_demo_bundle(&cfg).unwrap_or_else(|e| panic!("{task}: {e}"));
        assert_eq!(bundle.task.trajectories.len(), 8);
        assert_eq!(bundle.recovery.trajectories.len(), 8);
        assert!(bundle.failure.transition_count() >= 400, "{task}");
        assert!(bundle.failure.trajectories.iter().all(|t| t.ends_failed()));
    }
}
