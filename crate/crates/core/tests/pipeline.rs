use std::fs;
use std::path::Path;

use ocds::model::corpus::TokenCorpus;
use ocds::pipeline::fixture::{planted_fixture, FixtureConfig, FixtureFiles};
use ocds::pipeline::{run_pipeline, run_through, PipelineConfig, RunManifest, Stage};
use ocds::Error;

fn fixture_in(dir: &Path, seed: u64) -> (FixtureFiles, ocds::pipeline::fixture::PlantedFixture) {
    let f = planted_fixture(&FixtureConfig { seed, ..Default::default() }).unwrap();
    (f.write(&dir.join("data")).unwrap(), f)
}

fn ran(m: &RunManifest) -> Vec<&str> {
    m.stages.iter().filter(|r| !r.skipped).map(|r| r.stage.as_str()).collect()
}

const ARTIFACTS: [&str; 6] = [
    "gamma.tsv",
    "scorer.json",
    "scores.tsv",
    "selection.tsv",
    "selected.bin",
    "selected_ids.tsv",
];

#[test]
fn two_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (fa, _) = fixture_in(a.path(), 4);
    let (fb, _) = fixture_in(b.path(), 4);
    let ma = run_pipeline(&fa.pipeline_config(&a.path().join("run"), 1), false).unwrap();
    let mb = run_pipeline(&fb.pipeline_config(&b.path().join("run"), 1), false).unwrap();
    for name in ARTIFACTS {
        let x = fs::read(a.path().join("run").join(name)).unwrap();
        let y = fs::read(b.path().join("run").join(name)).unwrap();
        assert_eq!(x, y, "{name} differs");
    }
    assert_eq!(ma.artifacts, mb.artifacts);
}

#[test]
fn rerun_skips_and_force_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let (files, _) = fixture_in(dir.path(), 0);
    let cfg = files.pipeline_config(&dir.path().join("run"), 0);
    let first = run_pipeline(&cfg, false).unwrap();
    assert_eq!(ran(&first).len(), 6);
    let second = run_pipeline(&cfg, false).unwrap();
    assert!(ran(&second).is_empty());
    assert_eq!(first.artifacts, second.artifacts);
    let forced = run_pipeline(&cfg, true).unwrap();
    assert_eq!(ran(&forced).len(), 6);
    assert_eq!(first.artifacts, forced.artifacts);
}

#[test]
fn deleted_output_is_regenerated_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (files, _) = fixture_in(dir.path(), 2);
    let run = dir.path().join("run");
    let cfg = files.pipeline_config(&run, 0);
    run_pipeline(&cfg, false).unwrap();
    for name in ["gamma.tsv", "scores.tsv", "checkpoints/ckpt_000040.bin"] {
        let before = fs::read(run.join(name)).unwrap();
        fs::remove_file(run.join(name)).unwrap();
        let m = run_pipeline(&cfg, false).unwrap();
        assert_eq!(fs::read(run.join(name)).unwrap(), before, "{name}");
        // downstream inputs are unchanged, so later stages stay cached
        assert_eq!(ran(&m).len(), 1, "{name}: {:?}", ran(&m));
    }
}

#[test]
fn changing_selection_reruns_only_select() {
    let dir = tempfile::tempdir().unwrap();
    let (files, _) = fixture_in(dir.path(), 1);
    let mut cfg = files.pipeline_config(&dir.path().join("run"), 0);
    run_pipeline(&cfg, false).unwrap();
    cfg.select.ratio = 0.25;
    let m = run_pipeline(&cfg, false).unwrap();
    assert_eq!(ran(&m), vec!["select"]);
    let sel = ocds::select::read_selection(&dir.path().join("run/selection.tsv")).unwrap();
    assert_eq!(sel.len(), 16);
}

#[test]
fn full_ratio_without_noise_keeps_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let (files, _) = fixture_in(dir.path(), 3);
    let mut cfg = files.pipeline_config(&dir.path().join("run"), 0);
    cfg.select.ratio = 1.0;
    cfg.select.tau = 0.0;
    run_pipeline(&cfg, false).unwrap();
    let selected = TokenCorpus::read(&dir.path().join("run/selected.bin")).unwrap();
    let corpus = TokenCorpus::read(&files.corpus).unwrap();
    assert_eq!(selected, corpus);
    let map = fs::read_to_string(dir.path().join("run/selected_ids.tsv")).unwrap();
    assert!(map.lines().skip(1).enumerate().all(|(i, l)| l == format!("{i}\t{i}")));
}

#[test]
fn planted_signal_precision() {
    let mut precisions = Vec::new();
    for seed in 0..10 {
        let dir = tempfile::tempdir().unwrap();
        let (files, f) = fixture_in(dir.path(), seed);
        run_pipeline(&files.pipeline_config(&dir.path().join("run"), seed), false).unwrap();
        let sel = ocds::select::read_selection(&dir.path().join("run/selection.tsv")).unwrap();
        assert_eq!(sel.len(), 32);
        precisions.push(sel.iter().filter(|&&i| f.clean[i]).count() as f64 / sel.len() as f64);
    }
    precisions.sort_by(f64::total_cmp);
    let median = 0.5 * (precisions[4] + precisions[5]);
    assert!(median >= 0.8, "{precisions:?}");
}

#[test]
fn failing_stage_is_named_and_earlier_stages_persist() {
    let dir = tempfile::tempdir().unwrap();
    let (files, _) = fixture_in(dir.path(), 0);
    // downstream over a different vocabulary
    let other = TokenCorpus {
        vocab_size: 5,
        sequences: vec![vec![0, 1, 2, 3, 4]],
    };
    other.write(&files.downstream).unwrap();
    let run = dir.path().join("run");
    let err = run_pipeline(&files.pipeline_config(&run, 0), false).unwrap_err();
    assert_eq!(err.stage(), Some("solve"));
    assert!(!err.is_numerical());
    let m = RunManifest::read(&run.join("manifest.json")).unwrap();
    let done: Vec<&str> = m.stages.iter().map(|r| r.stage.as_str()).collect();
    assert_eq!(done, vec!["sample-proxy", "pretrain-proxy"]);
    assert!(run.join("proxy.bin").exists());
}

#[test]
fn divergent_solver_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let (files, _) = fixture_in(dir.path(), 0);
    let mut cfg = files.pipeline_config(&dir.path().join("run"), 0);
    cfg.solver.lr = 50.0;
    cfg.solver.steps = 100;
    let err = run_pipeline(&cfg, false).unwrap_err();
    assert!(err.is_numerical(), "{err}");
    assert!(matches!(err.stage(), Some("pretrain-proxy" | "solve")), "{err}");
}

#[test]
fn validation_rejects_bad_configs() {
    let dir = tempfile::tempdir().unwrap();
    let (files, _) = fixture_in(dir.path(), 0);
    let mut cfg = files.pipeline_config(&dir.path().join("run"), 0);
    cfg.proxy.size = 65;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = files.pipeline_config(&dir.path().join("run"), 0);
    cfg.paths.corpus = dir.path().join("missing.bin");
    assert!(matches!(run_pipeline(&cfg, false), Err(Error::Config(_))));
}

#[test]
fn partial_runs_stop_at_the_requested_stage() {
    let dir = tempfile::tempdir().unwrap();
    let (files, _) = fixture_in(dir.path(), 0);
    let run = dir.path().join("run");
    let cfg = files.pipeline_config(&run, 0);
    let m = run_through(&cfg, Stage::Solve, false).unwrap();
    assert_eq!(m.stages.len(), 3);
    assert!(run.join("gamma.tsv").exists() && !run.join("scorer.json").exists());
    let m = run_through(&cfg, Stage::Select, false).unwrap();
    assert_eq!(ran(&m), vec!["scorer", "score", "select"]);
}

#[test]
fn text_corpus_with_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("vocab.txt"), "<unk>\na\nb\nc\nd\n").unwrap();
    let lines: Vec<String> = (0..24)
        .map(|i| if i % 2 == 0 { "a b c d a b c d a b".to_string() } else { "d a c b b d a c a d".to_string() })
        .collect();
    fs::write(p.join("corpus.txt"), lines.join("\n")).unwrap();
    fs::write(p.join("down.txt"), "a b c d a b c d\nb c d a b c d a\n").unwrap();
    let toml = r#"
        seed = 7
        [paths]
        corpus = "corpus.txt"
        downstream = "down.txt"
        vocab = "vocab.txt"
        out = "run"
        [proxy]
        size = 20
        [solver]
        lr = 0.05
        outer_lr = 1e-6
        steps = 10
        checkpoints = 2
        batch_size = 8
        pretrain_steps = 10
        [select]
        ratio = 0.5
        tau = 0.0
        seed = 0
    "#;
    fs::write(p.join("pipeline.toml"), toml).unwrap();
    let cfg = PipelineConfig::load(&p.join("pipeline.toml")).unwrap();
    let m = run_pipeline(&cfg, false).unwrap();
    assert_eq!(m.stages.len(), 6);
    let sel = ocds::select::read_selection(&p.join("run/selection.tsv")).unwrap();
    assert_eq!(sel.len(), 12);
    assert!(sel.iter().all(|i| i % 2 == 0), "{sel:?}");
}
