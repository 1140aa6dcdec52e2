use std::fs;
use std::path::{Path, PathBuf};

use mtl_core::data::corpus_io::CORPUS_FILE;
use mtl_core::data::{dump_corpus, load_corpus, TaskSet};
use mtl_core::harness::{
    compare_runs, evaluate_run, read_report, run_experiment, ExperimentConfig, RunReport, Strategy,
};
use mtl_core::Error;

fn tiny(pairs: &[(&str, &str)]) -> ExperimentConfig {
    let mut all: Vec<(String, String)> = [
        ("data.mono_train", "60"),
        ("data.mono_val", "8"),
        ("data.mono_test", "6"),
        ("data.cs_train", "60"),
        ("data.cs_val", "8"),
        ("data.cs_test", "6"),
        ("run.iterations", "20"),
        ("run.eval_every", "10"),
        ("rescore_lm.iterations", "20"),
        ("decode.width", "2"),
        ("decode.max_len", "20"),
        ("ft.max_epochs", "2"),
    ]
    .iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    all.extend(pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())));
    ExperimentConfig::default().with_overrides(&all).unwrap()
}

fn bytes(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap()
}

#[test]
fn identical_runs_write_identical_files() {
    let cfg = tiny(&[("rescore", "true"), ("finetune", "true")]);
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_experiment(&cfg, &a, false).unwrap();
    run_experiment(&cfg, &b, false).unwrap();
    for f in ["curves.csv", "report.json", "transcripts.jsonl", "metadata.json", "config.txt"] {
        assert_eq!(bytes(&a, f), bytes(&b, f), "{f}");
    }
}

#[test]
fn rerun_from_snapshot_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let cfg = tiny(&[("strategy", "joint")]);
    run_experiment(&cfg, &a, false).unwrap();
    let snap = ExperimentConfig::load(&a.join("config.txt")).unwrap();
    assert_eq!(snap, cfg);
    let b = tmp.path().join("b");
    run_experiment(&snap, &b, false).unwrap();
    assert_eq!(bytes(&a, "curves.csv"), bytes(&b, "curves.csv"));
    assert_eq!(bytes(&a, "report.json"), bytes(&b, "report.json"));
    // Re-evaluation from the stored checkpoints rewrites the same report.
    let before = bytes(&a, "report.json");
    evaluate_run(&a).unwrap();
    assert_eq!(before, bytes(&a, "report.json"));
}

#[test]
fn interrupted_run_resumes_to_the_same_result() {
    let tmp = tempfile::tempdir().unwrap();
    let full = tiny(&[]);
    let whole = tmp.path().join("whole");
    run_experiment(&full, &whole, false).unwrap();

    // A run stopped after its checkpoint at iteration 10 looks like a
    // finished 10-iteration run carrying the full config snapshot.
    let cut = tmp.path().join("cut");
    run_experiment(&tiny(&[("run.iterations", "10")]), &cut, false).unwrap();
    fs::write(cut.join("config.txt"), full.to_text()).unwrap();
    run_experiment(&full, &cut, true).unwrap();
    assert_eq!(bytes(&whole, "curves.csv"), bytes(&cut, "curves.csv"));
    assert_eq!(bytes(&whole, "report.json"), bytes(&cut, "report.json"));

    let other = tiny(&[("meta.alpha", "0.2")]);
    assert!(matches!(run_experiment(&other, &cut, true), Err(Error::Config(_))));
}

#[test]
fn untrained_only_cs_run_reports_baseline_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(&[("strategy", "only_cs"), ("roster", "CS"), ("run.iterations", "0")]);
    let r = run_experiment(&cfg, tmp.path(), false).unwrap();
    assert_eq!(r.strategy, Strategy::OnlyCs);
    assert_eq!(r.roster, vec!["CS".to_string()]);
    assert_eq!(r.selected_iteration, 0);
    let cs = &r.eval.tasks["CS"];
    let cer = cs.cer.unwrap();
    assert!(cer.is_finite() && cer > 0.0, "{cer}");
    assert!(cs.loss.unwrap() > 0.0);
    let lines = fs::read_to_string(tmp.path().join("transcripts.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 3 * 6);
}

#[test]
fn language_model_runs_report_perplexity() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(&[("model", "lm"), ("strategy", "joint"), ("finetune", "true")]);
    let r = run_experiment(&cfg, tmp.path(), false).unwrap();
    for (k, m) in &r.eval.tasks {
        assert!(m.cer.is_none(), "{k}");
        let (ppl, loss) = (m.perplexity.unwrap(), m.loss.unwrap());
        assert!((ppl - loss.exp()).abs() < 1e-9);
    }
    let ft = r.finetune.unwrap();
    assert!(ft.best_val <= ft.initial_val);
    assert!(matches!(
        mtl_core::harness::decode_run(tmp.path(), mtl_core::data::Corpus::Cs, mtl_core::models::Split::Test, 1, false),
        Err(Error::Setup(_))
    ));
}

fn two_runs(tmp: &Path) -> (PathBuf, PathBuf, RunReport) {
    let (base, ft) = (tmp.join("base"), tmp.join("ft"));
    run_experiment(&tiny(&[("strategy", "joint"), ("run.iterations", "10")]), &base, false).unwrap();
    let r = run_experiment(
        &tiny(&[("strategy", "joint"), ("run.iterations", "10"), ("finetune", "true"), ("run.id", "ft")]),
        &ft,
        false,
    )
    .unwrap();
    (base, ft, r)
}

#[test]
fn comparisons_against_self_and_with_absent_tasks() {
    let tmp = tempfile::tempdir().unwrap();
    let (base, ft, _) = two_runs(tmp.path());

    let own = compare_runs(&[base.clone()], &base, None).unwrap();
    assert_eq!(own.metric, "cer");
    for c in own.rows[0].cells.values() {
        let d = c.delta.unwrap();
        assert_eq!((d.absolute, d.relative_pct), (0.0, 0.0));
    }
    assert_eq!(own.rows[0].iterations_to_threshold, Some(10));

    let cmp = compare_runs(&[base.clone(), ft.clone()], &base, None).unwrap();
    assert!(cmp.tasks.contains(&"pre_ft/CS".to_string()));
    let absent = &cmp.rows[0].cells["pre_ft/CS"];
    assert_eq!((absent.value, absent.delta), (None, None));
    let present = &cmp.rows[1].cells["pre_ft/CS"];
    assert!(present.value.is_some() && present.delta.is_none());
    assert!(cmp.to_table().contains("absent"));
}

#[test]
fn differing_test_splits_are_not_comparable() {
    let tmp = tempfile::tempdir().unwrap();
    let (base, ft, mut r) = two_runs(tmp.path());
    r.test_checksums.insert("CS".into(), "0".repeat(64));
    fs::write(ft.join("report.json"), serde_json::to_string_pretty(&r).unwrap()).unwrap();
    assert!(matches!(compare_runs(&[ft.clone()], &base, None), Err(Error::Comparability(_))));
    assert_eq!(read_report(&ft).unwrap().test_checksums["CS"], "0".repeat(64));
}

#[test]
fn runs_on_a_stored_corpus_match_generated_ones() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(&[("strategy", "joint"), ("run.iterations", "10")]);
    let corpus = tmp.path().join("corpus");
    dump_corpus(&TaskSet::generate(&cfg.data).unwrap(), &cfg.data, &corpus).unwrap();
    let loaded = tiny(&[
        ("strategy", "joint"),
        ("run.iterations", "10"),
        ("run.corpus_dir", corpus.to_str().unwrap()),
    ]);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_experiment(&cfg, &a, false).unwrap();
    run_experiment(&loaded, &b, false).unwrap();
    assert_eq!(bytes(&a, "curves.csv"), bytes(&b, "curves.csv"));
    assert_eq!(read_report(&a).unwrap().eval, read_report(&b).unwrap().eval);

    let path = corpus.join(CORPUS_FILE);
    let text = fs::read(&path).unwrap();
    fs::write(&path, &text[..text.len() / 2]).unwrap();
    assert!(matches!(load_corpus(&corpus), Err(Error::Corruption(_))));
    assert!(matches!(run_experiment(&loaded, &tmp.path().join("c"), false), Err(Error::Corruption(_))));
}

#[test]
fn invalid_configs_list_every_offending_key() {
    let err = ExperimentConfig::default()
        .with_overrides(&[
            ("run.eval_every".into(), "0".into()),
            ("transducer.vocab_size".into(), "12".into()),
            ("roster".into(), "EN+XX".into()),
        ])
        .unwrap_err();
    let Error::Config(msgs) = err else { panic!("{err:?}") };
    for key in ["run.eval_every", "transducer.vocab_size", "roster"] {
        assert!(msgs.iter().any(|m| m.starts_with(key)), "{key}: {msgs:?}");
    }
}
