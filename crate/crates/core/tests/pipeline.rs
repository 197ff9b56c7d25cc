mod common;

use std::path::Path;

use chronoline::pipeline::{self, DetectOptions, GenerateOptions, Run, Stage, TrainOptions};
use chronoline::Error;

fn reference() -> std::path::PathBuf {
    common::data("planted_ref.jsonl")
}

fn through_reward(run: &Run) {
    pipeline::cmd_detect(
        run,
        &DetectOptions {
            reference: Some(reference()),
            ..Default::default()
        },
    )
    .unwrap();
    pipeline::cmd_candidates(run, None).unwrap();
    pipeline::cmd_simulate_annotation(run, &reference()).unwrap();
    pipeline::cmd_learn_reward(run).unwrap();
}

fn files_under(dir: &Path) -> Vec<String> {
    let mut out: Vec<String> = std::fs::read_dir(dir)
        .map(|rd| rd.map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect())
        .unwrap_or_default();
    out.sort();
    out
}

#[test]
fn toy_run_end_to_end() {
    let root = tempfile::tempdir().unwrap();
    let run = Run::new(common::toy_config(root.path(), 0), "e2e").unwrap();
    let events = pipeline::cmd_detect(
        &run,
        &DetectOptions {
            reference: Some(reference()),
            ..Default::default()
        },
    )
    .unwrap();
    let dates: Vec<String> = events.iter().map(|e| e.date().to_string()).collect();
    let mut sorted = dates.clone();
    sorted.sort();
    assert_eq!(sorted, ["2021-03-04", "2021-06-18", "2021-09-27"]);
    for e in &events {
        assert_eq!(e.cluster.members.len(), 4);
    }

    let candidates = pipeline::cmd_candidates(&run, None).unwrap();
    assert_eq!(candidates.len(), 5);
    let ids: std::collections::BTreeSet<_> = candidates.iter().map(|c| &c.id).collect();
    assert_eq!(ids.len(), 5, "candidates are distinct");

    assert_eq!(pipeline::cmd_simulate_annotation(&run, &reference()).unwrap(), 10);
    let learned = pipeline::cmd_learn_reward(&run).unwrap();
    assert_eq!(learned.pairs, 10);
    assert!(!learned.keywords.is_empty());
    assert!(learned.config.alpha > 0.0);

    let out = pipeline::cmd_train(&run, &TrainOptions::default()).unwrap();
    assert!(out.finished);
    assert_eq!(pipeline::read_train_log(&run).unwrap().len(), 3 * 40);

    let generated = pipeline::cmd_generate(
        &run,
        &GenerateOptions {
            zero_shot: false,
            reference: Some(reference()),
        },
    )
    .unwrap();
    assert!(generated.timeline.is_well_formed());
    assert_eq!(generated.metrics.unwrap().date_f1, 1.0);
    assert!(run.path(pipeline::METRICS_FILE).exists());
    let state = run.load_state().unwrap().unwrap();
    assert_eq!(state.stage, Stage::Generated);
    assert_eq!(state.completed.len(), 6);
}

#[test]
fn stages_are_gated_without_side_effects() {
    let root = tempfile::tempdir().unwrap();
    let run = Run::new(common::toy_config(root.path(), 0), "gated").unwrap();
    assert!(matches!(pipeline::cmd_candidates(&run, None), Err(Error::Stage(_))));
    assert!(matches!(pipeline::cmd_train(&run, &TrainOptions::default()), Err(Error::Stage(_))));
    assert!(!run.dir.exists());

    pipeline::cmd_detect(&run, &DetectOptions::default()).unwrap();
    let before = files_under(&run.dir);
    let err = pipeline::cmd_learn_reward(&run).unwrap_err();
    assert!(matches!(err, Error::Stage(_)), "{err}");
    assert!(matches!(pipeline::cmd_train(&run, &TrainOptions::default()), Err(Error::Stage(_))));
    assert!(matches!(
        pipeline::cmd_generate(&run, &GenerateOptions::default()),
        Err(Error::Stage(_))
    ));
    assert_eq!(files_under(&run.dir), before);

    // Removing an artifact closes the gate again.
    pipeline::cmd_candidates(&run, None).unwrap();
    std::fs::remove_file(run.path(pipeline::CANDIDATES_FILE)).unwrap();
    assert!(matches!(
        pipeline::cmd_simulate_annotation(&run, &reference()),
        Err(Error::Stage(_))
    ));
}

#[test]
fn changed_config_is_rejected() {
    let root = tempfile::tempdir().unwrap();
    let run = Run::new(common::toy_config(root.path(), 0), "cfg").unwrap();
    pipeline::cmd_detect(&run, &DetectOptions::default()).unwrap();
    let mut cfg = common::toy_config(root.path(), 0);
    cfg.candidates.count = 4;
    let changed = Run::new(cfg, "cfg").unwrap();
    assert!(matches!(pipeline::cmd_candidates(&changed, None), Err(Error::Validation(_))));
}

#[test]
fn empty_corpus_is_rejected_before_anything_is_written() {
    let root = tempfile::tempdir().unwrap();
    let empty = root.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let run = Run::new(common::toy_config(root.path(), 0), "empty").unwrap();
    let opts = DetectOptions {
        corpus: Some(empty),
        ..Default::default()
    };
    assert!(pipeline::cmd_detect(&run, &opts).is_err());
    assert!(!run.dir.exists());
}

#[test]
fn interrupted_training_resumes_to_the_same_policy() {
    let root = tempfile::tempdir().unwrap();
    let whole = Run::new(common::toy_config(&root.path().join("a"), 3), "r").unwrap();
    through_reward(&whole);
    assert!(pipeline::cmd_train(&whole, &TrainOptions::default()).unwrap().finished);

    let split = Run::new(common::toy_config(&root.path().join("b"), 3), "r").unwrap();
    through_reward(&split);
    let mut calls = 0;
    loop {
        calls += 1;
        let out = pipeline::cmd_train(
            &split,
            &TrainOptions {
                max_episodes: Some(23),
                ..Default::default()
            },
        )
        .unwrap();
        if out.finished {
            break;
        }
        assert!(matches!(
            pipeline::cmd_generate(&split, &GenerateOptions::default()),
            Err(Error::Stage(_))
        ));
    }
    assert!(calls > 3);
    let read = |run: &Run, f: &str| std::fs::read(run.path(f)).unwrap();
    assert_eq!(read(&whole, pipeline::POLICY_FILE), read(&split, pipeline::POLICY_FILE));
    assert_eq!(read(&whole, pipeline::TRAIN_LOG_FILE), read(&split, pipeline::TRAIN_LOG_FILE));
}

#[test]
fn same_seed_same_artifacts() {
    let root = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for dir in ["x", "y"] {
        let run = Run::new(common::toy_config(&root.path().join(dir), 9), "d").unwrap();
        through_reward(&run);
        pipeline::cmd_train(&run, &TrainOptions::default()).unwrap();
        pipeline::cmd_generate(&run, &GenerateOptions::default()).unwrap();
        outputs.push(
            [
                pipeline::CANDIDATES_FILE,
                pipeline::SCORE_MODEL_FILE,
                pipeline::POLICY_FILE,
                pipeline::TIMELINE_FILE,
            ]
            .map(|f| std::fs::read(run.path(f)).unwrap()),
        );
    }
    for (i, (a, b)) in outputs[0].iter().zip(&outputs[1]).enumerate() {
        assert!(a == b, "artifact {i} differs");
    }
}

#[test]
fn zero_shot_needs_only_candidates() {
    let root = tempfile::tempdir().unwrap();
    let run = Run::new(common::toy_config(root.path(), 0), "zs").unwrap();
    pipeline::cmd_detect(&run, &DetectOptions::default()).unwrap();
    pipeline::cmd_candidates(&run, None).unwrap();
    let out = pipeline::cmd_generate(
        &run,
        &GenerateOptions {
            zero_shot: true,
            reference: Some(reference()),
        },
    )
    .unwrap();
    assert_eq!(out.path, run.path(pipeline::ZERO_SHOT_FILE));
    assert_eq!(run.load_state().unwrap().unwrap().stage, Stage::Candidates);
}
