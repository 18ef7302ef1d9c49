use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn rulesmith(run_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rulesmith"))
        .arg("--run-dir")
        .arg(run_dir)
        .args(args)
        .env_remove("LLM_MODEL")
        .env_remove("LLM_BASE_URL")
        .env_remove("LLM_API_KEY")
        .output()
        .unwrap()
}

fn prepare(run_dir: &Path) {
    let corpus = fixtures().join("corpus.jsonl");
    for args in [&["ingest", "--corpus", corpus.to_str().unwrap()][..], &["segment"], &["label"]] {
        let out = rulesmith(run_dir, args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

fn guideline_args() -> Vec<String> {
    vec![
        "--guideline".into(),
        fixtures().join("guideline.md").display().to_string(),
        "--annotation-guideline".into(),
        fixtures().join("annotation_guideline.md").display().to_string(),
    ]
}

#[test]
fn even_votes_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = rulesmith(dir.path(), &["triage", "--backend", "mock", "--votes", "4"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("odd"));
}

#[test]
fn unknown_flag_and_missing_path_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(rulesmith(dir.path(), &["segment", "--bogus"]).status.code(), Some(2));
    assert_eq!(rulesmith(dir.path(), &["ingest", "--corpus", "/no/such/file"]).status.code(), Some(2));
    assert_eq!(rulesmith(dir.path(), &["triage", "--backend", "http", "--model", "m"]).status.code(), Some(2));
}

#[test]
fn malformed_input_is_an_operational_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"kind\":\"note\"}\n").unwrap();
    let out = rulesmith(dir.path(), &["ingest", "--corpus", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn mock_triage_writes_predictions_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path());
    let mut args = vec!["triage".to_string(), "--backend".into(), "mock".into(), "--votes".into(), "5".into()];
    args.extend(guideline_args());
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = rulesmith(dir.path(), &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let triage = dir.path().join("triage");
    assert!(triage.join("predictions.jsonl").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(triage.join("manifest.triage.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["votes"], 5);
    assert_eq!(manifest["config_digest"].as_str().unwrap().len(), 64);
    assert!(manifest["outputs"]["predictions.jsonl"].is_string());
}

#[test]
fn eval_prf_on_count_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    for (name, expected) in [("counts_98_882_2", [0.10, 0.98, 0.18]), ("counts_99_1139_1", [0.08, 0.99, 0.15])] {
        let fixture = fixtures().join("prf").join(name);
        let out = rulesmith(
            dir.path(),
            &[
                "eval",
                "prf",
                "--predictions",
                fixture.join("predictions.jsonl").to_str().unwrap(),
                "--labels",
                fixture.join("labels.jsonl").to_str().unwrap(),
            ],
        );
        assert!(out.status.success());
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
        let r = &report["rounded"];
        assert_eq!([r["precision"].as_f64().unwrap(), r["recall"].as_f64().unwrap(), r["f1"].as_f64().unwrap()], expected);
    }
}

fn triage_model(dir: &Path, config: &Path, flag: Option<&str>, env: Option<&str>) -> String {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rulesmith"));
    cmd.arg("--run-dir").arg(dir).arg("--config").arg(config).arg("triage");
    cmd.args(guideline_args());
    if let Some(m) = flag {
        cmd.args(["--model", m]);
    }
    cmd.env_remove("LLM_MODEL");
    if let Some(m) = env {
        cmd.env("LLM_MODEL", m);
    }
    let out = cmd.output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("triage/manifest.triage.json")).unwrap()).unwrap();
    manifest["config"]["llm"]["model"].as_str().unwrap().to_string()
}

#[test]
fn flags_beat_env_beat_file() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path());
    let config = dir.path().join("cfg.toml");
    std::fs::write(&config, "backend = \"mock\"\nmodel = \"from-file\"\nvotes = 3\n").unwrap();
    assert_eq!(triage_model(dir.path(), &config, None, None), "from-file");
    assert_eq!(triage_model(dir.path(), &config, None, Some("from-env")), "from-env");
    assert_eq!(triage_model(dir.path(), &config, Some("from-flag"), Some("from-env")), "from-flag");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("cfg.toml");
    std::fs::write(&config, "modle = \"typo\"\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_rulesmith"))
        .arg("--config")
        .arg(&config)
        .arg("segment")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn match_prints_final_matches() {
    let dir = tempfile::tempdir().unwrap();
    let rules = fixtures().join("reference_rules.jsonl");
    let out = rulesmith(
        dir.path(),
        &["match", "--rules", rules.to_str().unwrap(), "--text", "No signs of infection. Small abscess."],
    );
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<serde_json::Value> = stdout.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 1);
    assert_eq!(lines[0]["rule_id"], "ref-002");
}

#[test]
fn replay_reproduces_a_recorded_run() {
    use rulesmith_core::batch::BatchOptions;
    use rulesmith_core::llm_gateway::{LexiconMock, RecordingBackend};
    use rulesmith_core::triage::{triage_corpus, TriageConfig};
    use rulesmith_core::{Gateway, GuidelineDoc, Snippet};
    use std::sync::Arc;

    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path());
    let cassette = dir.path().join("cassette.jsonl");
    let snippets: Vec<Snippet> = rulesmith_core::jsonl::read(&dir.path().join("snippets.jsonl")).unwrap();
    let config = TriageConfig::new(
        "recorded-model",
        GuidelineDoc::load(&fixtures().join("guideline.md")).unwrap(),
        GuidelineDoc::load(&fixtures().join("annotation_guideline.md")).unwrap(),
    );
    let recorder = Gateway::new(RecordingBackend::new(Arc::new(LexiconMock::default()), &cassette));
    let recorded = dir.path().join("recorded");
    triage_corpus(&snippets, &recorder, &config, &recorded, &BatchOptions::default()).unwrap();

    let mut args = vec![
        "triage".to_string(),
        "--backend".into(),
        "replay".into(),
        "--cassette".into(),
        cassette.display().to_string(),
        "--model".into(),
        "recorded-model".into(),
    ];
    args.extend(guideline_args());
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = rulesmith(dir.path(), &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for file in ["predictions.jsonl", "transcripts.jsonl", "triage.summary.json"] {
        assert_eq!(
            std::fs::read(recorded.join(file)).unwrap(),
            std::fs::read(dir.path().join("triage").join(file)).unwrap(),
            "{file}"
        );
    }

    // A different model name changes every request key, so nothing replays.
    let mut miss: Vec<&str> = args.clone();
    let pos = miss.iter().position(|a| *a == "recorded-model").unwrap();
    miss[pos] = "other-model";
    let unused = dir.path().join("unused").display().to_string();
    miss.extend(["--out", unused.as_str()]);
    let out = rulesmith(dir.path(), &miss);
    assert_eq!(out.status.code(), Some(1));
}
