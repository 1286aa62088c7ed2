use std::fs;
use std::path::Path;

use serde_json::Value;

fn gik(args: &[&str]) -> i32 {
    gik::run(std::iter::once("gik").chain(args.iter().copied())).code()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

const GT: &str = concat!(
    r#"{"case_id":"a","duration":10.0,"spans":[{"label":"Edema","verdict":"positive","t_start":1.0,"t_end":4.0}]}"#,
    "\n",
    r#"{"case_id":"b","duration":12.0,"spans":[{"label":"Cardiomegaly","verdict":"negative","t_start":2.0,"t_end":3.0},{"label":"PleuralEffusion","verdict":"uncertain","t_start":5.0,"t_end":9.5}]}"#,
    "\n",
);

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(gik(&["--help"]), 0);
    assert_eq!(gik(&["pipeline", "--no-such-flag"]), 1);
    assert_eq!(gik(&["frobnicate"]), 1);
    let out = tmp.path().join("out");
    assert_eq!(gik(&["evaluate", "--out", path(&out)]), 1, "missing --pred-file is a usage error");
    let missing = tmp.path().join("missing.jsonl");
    assert_eq!(gik(&["evaluate", "--pred", path(&missing), "--gt", path(&missing), "--out", path(&out)]), 2);
    let bad = tmp.path().join("bad.jsonl");
    fs::write(&bad, "{not json\n").unwrap();
    assert_eq!(gik(&["evaluate", "--pred", path(&bad), "--gt", path(&bad), "--out", path(&out)]), 2);
}

#[test]
fn evaluating_ground_truth_against_itself_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let gt = tmp.path().join("gt.jsonl");
    fs::write(&gt, GT).unwrap();
    let out = tmp.path().join("eval");
    assert_eq!(gik(&["evaluate", "--pred", path(&gt), "--gt", path(&gt), "--out", path(&out)]), 0);
    let report = json(&out.join("evaluation.json"));
    assert_eq!(report["bleu"][0], 1.0);
    assert_eq!(report["bleu"][3], 1.0);
    assert_eq!(report["precision"], 1.0);
    assert_eq!(report["recall"], 1.0);
    assert_eq!(report["n_matched"], 3);
    assert!(out.join("start_hist.csv").is_file());
    assert!(out.join("run_config.json").is_file());
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("run.toml");
    fs::write(&config, "seed = 5\ncases = 3\nout = \"from-config\"\nfps = 2.0\n").unwrap();
    assert_eq!(gik(&["synth", "--config", path(&config), "--cases", "4"]), 0);
    let out = tmp.path().join("from-config");
    let cfg = json(&out.join("run_config.json"));
    assert_eq!(cfg["seed"], 5);
    assert_eq!(cfg["cases"], 4);
    assert_eq!(cfg["render"]["fps"], 2.0);
    assert_eq!(fs::read_to_string(out.join("manifest.csv")).unwrap().lines().count(), 5);

    let unknown = tmp.path().join("unknown.toml");
    fs::write(&unknown, "sedd = 5\n").unwrap();
    assert_eq!(gik(&["synth", "--config", path(&unknown)]), 1);
}

#[test]
fn pipeline_is_deterministic_and_matches_single_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(gik(&["pipeline", "--seed", "3", "--cases", "12", "--out", path(out)]), 0);
    }
    for file in ["evaluate/evaluation.json", "predict/predictions.jsonl", "label/gt.jsonl", "extract-roi/roi_summary.json"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }

    let manifest = a.join("synth/manifest.csv");
    let single = tmp.path().join("single");
    let stage = |name: &str| single.join(name);
    let common = ["--seed", "3", "--cases", "12", "--manifest", path(&manifest)];
    for name in ["label", "predict"] {
        let out = stage(name);
        let mut args = vec![name, "--out", path(&out)];
        args.extend(common);
        assert_eq!(gik(&args), 0, "{name}");
    }
    for file in ["gt.jsonl", "labels.jsonl", "vocab.txt"] {
        assert_eq!(fs::read(a.join("label").join(file)).unwrap(), fs::read(stage("label").join(file)).unwrap(), "{file}");
    }
    assert_eq!(
        fs::read(a.join("predict/predictions.jsonl")).unwrap(),
        fs::read(stage("predict").join("predictions.jsonl")).unwrap()
    );

    let preds = a.join("predict/predictions.jsonl");
    let gt = a.join("predict/gt_eval.jsonl");
    let vocab = a.join("label/vocab.txt");
    let out = stage("evaluate");
    assert_eq!(
        gik(&["evaluate", "--pred", path(&preds), "--gt", path(&gt), "--vocab", path(&vocab), "--out", path(&out)]),
        0
    );
    assert_eq!(
        fs::read(a.join("evaluate/evaluation.json")).unwrap(),
        fs::read(out.join("evaluation.json")).unwrap()
    );
}
