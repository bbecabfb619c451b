use std::fs;
use std::path::Path;

use d3pmlab::checkpoint::Checkpoint;
use d3pmlab::harness::{
    prepare, read_report, run_experiment, train_cell, ExperimentConfig, CHECKPOINT_FILE, ERROR_FILE, REPORT_FILE,
    TRAIN_LOG_FILE,
};
use d3pmlab::metrics::ModelKind;
use d3pmlab::train::TrainLog;

fn write_toy_corpus(dir: &Path) {
    fs::create_dir_all(dir).unwrap();
    for (name, reps) in [("train", 2000), ("valid", 300), ("test", 300)] {
        fs::write(dir.join(format!("{name}.txt")), "a b c d ".repeat(reps)).unwrap();
    }
}

fn toy_config(root: &Path, extra: &[&str]) -> ExperimentConfig {
    write_toy_corpus(&root.join("data"));
    let mut text = format!(
        "experiment.name=toy\ndata.path={}\nout.dir={}\n",
        root.join("data").display(),
        root.join("out").display()
    );
    text.push_str(
        "tokenizer.vocab_size=12\ntokenizer.alphabet=observed\nT=10\nsampling.steps=10\n\
         model.length=8\nloader.batch_size=8\nloader.eval_batch_size=8\neval.token_budget=256\n\
         model.embed_dim=8\nmodel.hidden=16\noptim.lr=0.3\noptim.warmup=10\ntrain.steps=60\n",
    );
    for line in extra {
        text.push_str(line);
        text.push('\n');
    }
    let c = ExperimentConfig::parse(&text).unwrap();
    c.validate().unwrap();
    c
}

#[test]
fn shipped_configs_are_valid() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["toy.conf", "wikitext103.conf"] {
        ExperimentConfig::load(root.join(name), &[]).unwrap();
    }
}

#[test]
fn diverging_cell_is_isolated() {
    let tmp = tempfile::tempdir().unwrap();
    let config = toy_config(tmp.path(), &["seeds=1,2", "cell.d3pm.2.optim.lr=1000", "harness.jobs=3"]);
    let table = run_experiment(&config).unwrap();
    assert_eq!(table.failures(), 1);
    let failed = &table.cells.iter().find(|c| c.outcome.is_err()).unwrap();
    assert_eq!((failed.model, failed.seed), (ModelKind::D3pm, 2));
    assert!(failed.outcome.as_ref().unwrap_err().contains("non-finite"), "{:?}", failed.outcome);

    let md = fs::read_to_string(config.experiment_dir().join("comparison.md")).unwrap();
    assert!(md.contains("| D3PM | 2 | FAILED |"), "{md}");
    assert!(!md.contains("| D3PM | 1 | FAILED |"));
    let bad = config.cell_dir(ModelKind::D3pm, 2);
    assert!(bad.join(ERROR_FILE).is_file());
    assert!(!bad.join(REPORT_FILE).exists());
    for (kind, seed) in [(ModelKind::Ar, 1), (ModelKind::Ar, 2), (ModelKind::D3pm, 1)] {
        let r = read_report(&config, kind, seed).unwrap();
        assert!(r.nll.is_finite());
        assert_eq!(&r, table.report(kind, seed).unwrap());
        assert!(!config.cell_dir(kind, seed).join(ERROR_FILE).exists());
    }
    // the healthy d3pm cell matches a run without the bad neighbour
    let solo_root = tempfile::tempdir().unwrap();
    let solo = toy_config(solo_root.path(), &["seeds=1", "models=d3pm"]);
    let solo_table = run_experiment(&solo).unwrap();
    assert_eq!(
        fs::read(config.cell_dir(ModelKind::D3pm, 1).join(REPORT_FILE)).unwrap(),
        fs::read(solo.cell_dir(ModelKind::D3pm, 1).join(REPORT_FILE)).unwrap()
    );
    assert_eq!(solo_table.failures(), 0);
}

#[test]
fn rerun_gives_identical_reports() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = toy_config(a.path(), &["harness.jobs=2"]);
    let cb = toy_config(b.path(), &["harness.jobs=1"]);
    run_experiment(&ca).unwrap();
    run_experiment(&cb).unwrap();
    for (kind, seed) in ca.cell_list() {
        for file in [REPORT_FILE, CHECKPOINT_FILE, TRAIN_LOG_FILE] {
            assert_eq!(
                fs::read(ca.cell_dir(kind, seed).join(file)).unwrap(),
                fs::read(cb.cell_dir(kind, seed).join(file)).unwrap(),
                "{kind}/{seed}/{file}"
            );
        }
    }
}

#[test]
fn resumed_training_matches_uninterrupted() {
    for kind in [ModelKind::Ar, ModelKind::D3pm] {
        let model = format!("models={kind}");
        let full_root = tempfile::tempdir().unwrap();
        let full = toy_config(full_root.path(), &[&model, "train.steps=90", "train.checkpoint_every=30"]);
        let prep = prepare(&full).unwrap();
        let whole = train_cell(&prep, &full, kind, 1).unwrap();
        assert_eq!(whole.resumed_from, 0);

        let part_root = tempfile::tempdir().unwrap();
        let first = toy_config(part_root.path(), &[&model, "train.steps=40", "train.checkpoint_every=30"]);
        let prep = prepare(&first).unwrap();
        train_cell(&prep, &first, kind, 1).unwrap();
        let mut second = first.clone();
        second.train_steps = 90;
        let resumed = train_cell(&prep, &second, kind, 1).unwrap();
        assert_eq!(resumed.resumed_from, 40);

        let a = Checkpoint::load(full.cell_dir(kind, 1).join(CHECKPOINT_FILE)).unwrap();
        let b = Checkpoint::load(second.cell_dir(kind, 1).join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(a.header.step, 90);
        assert!(a.params.iter().zip(&b.params).all(|(x, y)| x.to_bits() == y.to_bits()), "{kind}");
        let log = TrainLog::from_csv(&fs::read_to_string(second.cell_dir(kind, 1).join(TRAIN_LOG_FILE)).unwrap()).unwrap();
        assert_eq!(log, whole.log);
        assert_eq!(log.rows.iter().map(|r| r.global_step).collect::<Vec<_>>(), (1..=90).collect::<Vec<_>>());
    }
}

#[test]
fn changed_settings_start_fresh() {
    let root = tempfile::tempdir().unwrap();
    let config = toy_config(root.path(), &["models=ar", "train.steps=20"]);
    let prep = prepare(&config).unwrap();
    train_cell(&prep, &config, ModelKind::Ar, 1).unwrap();
    let mut other = config.clone();
    other.lr = 0.1;
    other.train_steps = 30;
    assert_eq!(train_cell(&prep, &other, ModelKind::Ar, 1).unwrap().resumed_from, 0);
    let mut longer = other.clone();
    longer.train_steps = 40;
    assert_eq!(train_cell(&prep, &longer, ModelKind::Ar, 1).unwrap().resumed_from, 30);
}
