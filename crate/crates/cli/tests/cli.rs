use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn d3pmlab(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_d3pmlab")).args(args).env("D3PMLAB_OUT", out).output().unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let data = dir.join("data");
    fs::create_dir_all(&data).unwrap();
    for (name, reps) in [("train", 1000), ("valid", 200), ("test", 200)] {
        fs::write(data.join(format!("{name}.txt")), "a b c d ".repeat(reps)).unwrap();
    }
    let path = dir.join("tiny.conf");
    fs::write(
        &path,
        format!(
            "experiment.name=tiny\ndata.path={}\nout.dir=ignored\ntokenizer.vocab_size=12\ntokenizer.alphabet=observed\n\
             T=8\nsampling.steps=8\nmodel.length=8\nloader.batch_size=8\neval.token_budget=128\n\
             model.embed_dim=8\nmodel.hidden=8\noptim.lr=0.3\noptim.warmup=5\ntrain.steps=30\nseeds=3\n",
            data.display()
        ),
    )
    .unwrap();
    path.display().to_string()
}

#[test]
fn verify_succeeds_with_exit_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = d3pmlab(&["verify"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    for suite in ["matrix", "posterior", "nelbo", "gradient", "metric-identity", "reference-table"] {
        assert!(text.contains(&format!("PASS {suite}")), "{text}");
    }
    let json = d3pmlab(&["verify", "--json"], tmp.path());
    assert!(String::from_utf8(json.stdout).unwrap().contains("\"passed\": true"));
}

#[test]
fn config_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_config(tmp.path());
    let bad = d3pmlab(&["train-ar", "--config", &config, "--set", "sampling.steps=100"], tmp.path());
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("config error"));
    let unknown = d3pmlab(&["compare", "--config", &config, "--set", "no.such.key=1"], tmp.path());
    assert_eq!(unknown.status.code(), Some(2));
    let missing = d3pmlab(&["compare", "--config", "/nonexistent.conf"], tmp.path());
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_three() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_config(tmp.path());
    let out = d3pmlab(&["eval", "--config", &config, "--model", "ar"], tmp.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no checkpoint"));
    let diverging = d3pmlab(&["compare", "--config", &config, "--set", "models=d3pm", "--set", "optim.lr=1000"], tmp.path());
    assert_eq!(diverging.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&diverging.stdout).contains("FAILED"));
}

#[test]
fn train_eval_sample_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let out_root = tmp.path().join("runs");
    let config = tiny_config(tmp.path());
    let tok = d3pmlab(&["tokenizer-train", "--config", &config], &out_root);
    assert!(tok.status.success());
    assert!(out_root.join("tiny/vocab.json").is_file(), "D3PMLAB_OUT not honoured");

    for (train, model) in [("train-ar", "ar"), ("train-d3pm", "d3pm")] {
        let t = d3pmlab(&[train, "--config", &config, "--seed", "3"], &out_root);
        assert!(t.status.success(), "{}", String::from_utf8_lossy(&t.stderr));
        let cell = out_root.join("tiny").join(model).join("3");
        assert!(cell.join("checkpoint.bin").is_file());
        assert_eq!(fs::read_to_string(cell.join("train_log.csv")).unwrap().lines().count(), 31);

        let e = d3pmlab(&["eval", "--config", &config, "--model", model], &out_root);
        assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
        let report = fs::read_to_string(cell.join("report.json")).unwrap();
        assert!(report.contains("\"token_count\": 128"), "{report}");

        let s = d3pmlab(&["sample", "--config", &config, "--model", model, "--count", "2"], &out_root);
        assert!(s.status.success(), "{}", String::from_utf8_lossy(&s.stderr));
        assert_eq!(String::from_utf8(s.stdout).unwrap().lines().count(), 2);
    }

    let c = d3pmlab(&["compare", "--config", &config], &out_root);
    assert!(c.status.success(), "{}", String::from_utf8_lossy(&c.stderr));
    let table = String::from_utf8(c.stdout).unwrap();
    assert!(table.starts_with("| Model | Seed | BPT | NLL | PPL |"));
    assert!(out_root.join("tiny/comparison.md").is_file());
    assert!(out_root.join("tiny/aggregate.json").is_file());
}
