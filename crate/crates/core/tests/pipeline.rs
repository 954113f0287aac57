use std::fs;

use hvpl::harness::eval::evaluate;
use hvpl::harness::store::RunStore;
use hvpl::harness::train::{train_task, Experiment, RunState};
use hvpl::harness::{run_experiment, TrainConfig};
use hvpl::HvplError;

fn small(split: Vec<usize>) -> TrainConfig {
    TrainConfig {
        d: 32,
        heads: 2,
        state_dim: 8,
        frames: 2,
        height: 16,
        width: 16,
        detector_layers: 2,
        frame_prompt_len: 4,
        video_prompt_len: 4,
        gss_layers: 2,
        msa_layers: 2,
        split,
        train_videos: 6,
        test_videos: 4,
        epochs: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn one_task_training_halves_the_loss() {
    let cfg = TrainConfig {
        split: vec![4],
        train_videos: 40,
        epochs: 30,
        ..TrainConfig::default()
    };
    let exp = Experiment::new(cfg).unwrap();
    let mut state = RunState::new(&exp.cfg);
    train_task(&exp, &mut state, 1, None).unwrap();
    let log = &state.logs[0];
    assert!(
        log.final_loss < 0.5 * log.initial_loss,
        "initial {} final {}",
        log.initial_loss,
        log.final_loss
    );
}

#[test]
fn only_the_last_feature_space_survives() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&small(vec![2, 2, 2]), Some(dir.path())).unwrap();
    assert_eq!(out.state.completed, 3);
    let spaces: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("ortho_space_t") && n.ends_with(".hvpl"))
        .collect();
    assert_eq!(spaces, vec!["ortho_space_t3.hvpl".to_string()]);
    assert_eq!(out.state.space.as_ref().map(|s| s.task), Some(3));
    assert_eq!(out.report.evaluations.len(), 3);
}

#[test]
fn cached_features_of_old_tasks_are_removed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        cache_features: true,
        ..small(vec![2, 2])
    };
    let exp = Experiment::new(cfg).unwrap();
    let store = RunStore::create(dir.path()).unwrap();
    let mut state = RunState::new(&exp.cfg);
    train_task(&exp, &mut state, 1, Some(&store)).unwrap();
    train_task(&exp, &mut state, 2, Some(&store)).unwrap();
    assert!(store.old_training_files(2).unwrap().is_empty());
    store.rehearsal_audit(2).unwrap();
}

#[test]
fn planted_old_training_video_fails_the_audit() {
    let dir = tempfile::tempdir().unwrap();
    let exp = Experiment::new(small(vec![2, 2])).unwrap();
    let store = RunStore::create(dir.path()).unwrap();
    let mut state = RunState::new(&exp.cfg);
    train_task(&exp, &mut state, 1, Some(&store)).unwrap();
    fs::write(dir.path().join("t1-train-000.hvpl"), b"").unwrap();
    let err = train_task(&exp, &mut state, 2, Some(&store)).unwrap_err();
    assert!(matches!(err, HvplError::State(_)), "{err}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn stored_state_reloads_and_reevaluates_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(vec![2, 2]);
    let out = run_experiment(&cfg, Some(dir.path())).unwrap();
    let store = RunStore::open(dir.path()).unwrap();
    assert_eq!(store.load_config().unwrap(), cfg);
    let loaded = store.load_state(&cfg).unwrap();
    assert_eq!(loaded.completed, 2);
    assert_eq!(loaded.prompts, out.state.prompts);
    assert_eq!(loaded.heads, out.state.heads);
    assert_eq!(loaded.decoder, out.state.decoder);
    assert_eq!(loaded.counters, out.state.counters);
    assert_eq!(
        loaded.space.as_ref().map(|s| (s.task, s.v0.clone())),
        out.state.space.as_ref().map(|s| (s.task, s.v0.clone()))
    );
    let exp = Experiment::new(cfg).unwrap();
    let again = evaluate(&exp, &loaded).unwrap();
    assert_eq!(Some(&again.evaluation), out.report.evaluations.last());
    for t in 1..=2 {
        assert!(dir.path().join(format!("predictions_t{t}.jsonl")).exists());
    }
}

#[test]
fn reports_do_not_depend_on_the_thread_count() {
    let cfg = small(vec![2, 1]);
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let out = pool.install(|| run_experiment(&cfg, None)).unwrap();
        serde_json::to_string(&out.report).unwrap()
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn disabled_components_still_produce_reports() {
    for cfg in [
        TrainConfig {
            disable_video_prompt: true,
            ..small(vec![2, 1])
        },
        TrainConfig {
            disable_gtssm: true,
            disable_ogc: true,
            ..small(vec![2, 1])
        },
    ] {
        let out = run_experiment(&cfg, None).unwrap();
        assert!(out.report.evaluations.iter().all(|e| e.overall.is_some()));
        assert!(out.report.fap.value.is_some() || !out.report.fap.excluded.is_empty());
    }
}
