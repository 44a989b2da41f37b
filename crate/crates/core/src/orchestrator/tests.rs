use super::*;
use crate::preference::LabelSource as Provenance;

fn tiny(mode: Mode) -> RunConfig {
    RunConfig {
        mode,
        meta: MetaConfig {
            hidden: vec![8, 8],
            ensemble_size: 3,
            inner_lr: 0.01,
            fallback_epochs: 20,
            ..MetaConfig::default()
        },
        sac: SacConfig {
            hidden: vec![8],
            batch_size: 16,
            random_steps: 100,
            buffer_capacity: 10_000,
            ..SacConfig::default()
        },
        schedule: FeedbackSchedule {
            frequency: 200,
            per_session: 6,
            budget: 36,
            constant: true,
        },
        total_steps: 1600,
        eval_every: 400,
        eval_episodes: 2,
        seed: 7,
        ..RunConfig::default()
    }
}

fn meta_handle(cfg: &RunConfig) -> CheckpointHandle {
    CheckpointHandle::from_ensemble(RewardEnsemble::from_config(cfg.family, &cfg.meta, 99))
}

fn oracle(cfg: &RunConfig) -> OracleLabeler {
    OracleLabeler::new(cfg.task(), cfg.env.clone())
}

#[test]
fn budget_36_in_sixes_gives_six_sessions() {
    let cfg = tiny(Mode::FewShot);
    let h = meta_handle(&cfg);
    let out = run(&cfg, Some(&h), &mut oracle(&cfg), &mut NoObserver).unwrap();
    assert_eq!(out.sessions, 6);
    assert_eq!(out.feedback_used, 36);
    let steps: Vec<u64> = out.session_records().map(|s| s.step).collect();
    assert_eq!(steps, vec![200, 400, 600, 800, 1000, 1200]);
    // oracle labels agree with themselves
    for s in out.session_records() {
        assert_eq!(s.agreement.correct, 1.0);
        assert_eq!(s.labels.len(), 6);
    }
    let strategies: Vec<Strategy> = out.session_records().map(|s| s.strategy).collect();
    assert_eq!(strategies[0], Strategy::Uniform);
    assert!(strategies[1..].iter().all(|s| *s == Strategy::Disagreement));
    assert_eq!(out.evals().count(), 4);
}

#[test]
fn sessions_follow_the_frequency() {
    let cfg = RunConfig {
        total_steps: 3000,
        schedule: FeedbackSchedule {
            frequency: 500,
            per_session: 2,
            budget: 100,
            constant: true,
        },
        eval_every: 3000,
        ..tiny(Mode::Scratch)
    };
    let out = run(&cfg, None, &mut oracle(&cfg), &mut NoObserver).unwrap();
    let steps: Vec<u64> = out.session_records().map(|s| s.step).collect();
    assert_eq!(steps, vec![500, 1000, 1500, 2000, 2500, 3000]);
}

#[test]
fn skips_are_charged_but_not_trained_on() {
    let cfg = tiny(Mode::FewShot);
    let h = meta_handle(&cfg);
    let mut labeler = SkippingLabeler::new(oracle(&cfg), 3);
    let out = run(&cfg, Some(&h), &mut labeler, &mut NoObserver).unwrap();
    assert_eq!(out.feedback_used, 36);
    assert_eq!(out.skips, 12);
    assert_eq!(out.dataset.len(), 24);
    let last = out.session_records().last().unwrap();
    assert_eq!((last.feedback_used, last.skips, last.dataset_size), (36, 12, 24));
    for s in out.session_records() {
        assert_eq!(s.labeled + s.skipped, s.labels.len());
    }
}

#[test]
fn scratch_never_opens_the_checkpoint() {
    let cfg = tiny(Mode::Scratch);
    let h = CheckpointHandle::from_path("/nonexistent/checkpoint.bin");
    let out = run(&cfg, Some(&h), &mut oracle(&cfg), &mut NoObserver).unwrap();
    assert!(!h.was_accessed());
    assert_eq!(out.sessions, 6);
}

#[test]
fn checkpoint_modes_require_a_matching_checkpoint() {
    let cfg = tiny(Mode::FewShot);
    assert!(matches!(run(&cfg, None, &mut oracle(&cfg), &mut NoObserver), Err(Error::Config(_))));
    let missing = CheckpointHandle::from_path("/nonexistent/checkpoint.bin");
    assert!(matches!(
        run(&cfg, Some(&missing), &mut oracle(&cfg), &mut NoObserver),
        Err(Error::Config(_))
    ));
    let wrong = CheckpointHandle::from_ensemble(RewardEnsemble::new(Family::VelocityTrack, &[8], 3, 1e-3, 0));
    assert!(matches!(
        run(&cfg, Some(&wrong), &mut oracle(&cfg), &mut NoObserver),
        Err(Error::Config(_))
    ));
}

#[test]
fn oracle_sac_has_no_sessions() {
    let cfg = tiny(Mode::OracleSac);
    let out = run(&cfg, None, &mut oracle(&cfg), &mut NoObserver).unwrap();
    assert_eq!(out.sessions, 0);
    assert!(out.ensemble.is_none());
    assert_eq!(out.session_records().count(), 0);
}

#[test]
fn identical_seeds_give_identical_streams() {
    let cfg = tiny(Mode::FewShot);
    let go = || {
        let h = meta_handle(&cfg);
        let mut lines = Vec::new();
        let mut obs = |r: &MetricsRecord| lines.push(r.to_line());
        run(&cfg, Some(&h), &mut oracle(&cfg), &mut obs).unwrap();
        lines
    };
    assert_eq!(go(), go());
}

#[test]
fn final_reward_equals_offline_adaptation_of_the_label_log() {
    let cfg = tiny(Mode::FewShot);
    let h = meta_handle(&cfg);
    let out = run(&cfg, Some(&h), &mut oracle(&cfg), &mut NoObserver).unwrap();
    let meta = h.load().unwrap();
    let refs: Vec<&Query> = out.dataset.iter().collect();
    let (offline, _) = adapt(&meta, &refs, &cfg.meta).unwrap();
    assert_eq!(out.ensemble.unwrap(), offline);
}

#[test]
fn answer_log_replay_reproduces_the_dataset() {
    let cfg = tiny(Mode::FewShot);
    let h = meta_handle(&cfg);
    let out = run(&cfg, Some(&h), &mut SkippingLabeler::new(oracle(&cfg), 4), &mut NoObserver).unwrap();
    let log: Vec<(u64, Label)> = out
        .session_records()
        .flat_map(|s| s.query_ids.iter().copied().zip(s.labels.iter().copied()))
        .collect();
    let mut replay = ScriptedLabeler::new(log, Provenance::Human);
    let again = run(&cfg, Some(&h), &mut replay, &mut NoObserver).unwrap();
    assert_eq!(again.dataset.len(), out.dataset.len());
    for (a, b) in again.dataset.iter().zip(&out.dataset) {
        assert_eq!((a.id, &a.first, &a.second, a.label()), (b.id, &b.first, &b.second, b.label()));
        assert_eq!(a.source(), Some(Provenance::Human));
    }
}

#[test]
fn init_mode_keeps_training_without_reset() {
    let cfg = tiny(Mode::Init);
    let h = meta_handle(&cfg);
    let out = run(&cfg, Some(&h), &mut oracle(&cfg), &mut NoObserver).unwrap();
    for s in out.session_records() {
        assert!(s.inner_steps.iter().all(|&n| n == 0));
    }
    assert_eq!(out.sessions, 6);
}

#[test]
fn short_labeler_answers_are_rejected() {
    struct Lazy;
    impl LabelSource for Lazy {
        fn label_session(&mut self, req: &SessionRequest<'_>) -> Result<Vec<Label>> {
            Ok(vec![Label::Prefer1; req.queries.len() - 1])
        }
    }
    let cfg = tiny(Mode::Scratch);
    assert!(matches!(run(&cfg, None, &mut Lazy, &mut NoObserver), Err(Error::Labeler(_))));
}

#[test]
fn static_policy_earns_minus_horizon_times_distance() {
    let env = EnvConfig::default();
    let task = test_task(Family::PointMass);
    let start = env.reset_to(Family::PointMass, vec![0.0; 4]).unwrap();
    let mut zero = |_: &[f64]| Ok(vec![0.0, 0.0]);
    let (ret, last) = rollout_from(&mut zero, &task, &env, start).unwrap();
    let want = -200.0 * (0.75f64 * 0.75 + 0.8 * 0.8).sqrt();
    assert!((ret - want).abs() < 1e-9, "{ret} vs {want}");
    assert_eq!(last, vec![0.0; 4]);
}

#[test]
fn evaluation_is_deterministic() {
    let agent = SacAgent::new(Family::PointMass, tiny(Mode::OracleSac).sac, 3).unwrap();
    let task = test_task(Family::PointMass);
    let env = EnvConfig::default();
    let a = evaluate(&agent, &task, &env, 3, 11).unwrap();
    assert_eq!(a, evaluate(&agent, &task, &env, 3, 11).unwrap());
    assert!(a.mean_return < 0.0);
    assert!(evaluate(&agent, &task, &env, 0, 11).is_err());
}

#[test]
fn session_size_respects_remaining_budget() {
    let s = FeedbackSchedule {
        per_session: 8,
        budget: 20,
        ..FeedbackSchedule::default()
    };
    assert_eq!(s.session_size(0), 8);
    assert_eq!(s.session_size(16), 4);
    assert_eq!(s.session_size(20), 0);
}
