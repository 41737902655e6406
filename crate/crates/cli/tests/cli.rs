use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn duet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_duet"))
        .args(args)
        .env_remove("DUET_BASE_URL")
        .env_remove("DUET_API_KEY")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Ingests and indexes the 2-row fixture and writes a mock config next to it.
fn workspace(dir: &Path, internal_fallback: Option<&str>) -> PathBuf {
    let fx = fixtures();
    let hotpot = fx.join("hotpot_2row.json");
    let out = duet(&["ingest", "--input", p(&hotpot), "--out", p(&dir.join("corpus.jsonl"))]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let fallback = internal_fallback.map_or("null".to_owned(), |f| format!("{f:?}"));
    let cfg = format!(
        r#"{{"corpus":"corpus.jsonl","index":"index.jsonl",
            "internal":{{"kind":"mock","script":{:?},"fallback":{fallback}}},
            "external":{{"kind":"mock","script":{:?},"fallback":"unknown"}},
            "embedder":{{"kind":"hashed","dim":256}},
            "referee":{{"strategy":"alignment","delta":0.05}},"workers":2,"seed":0}}"#,
        p(&fx.join("internal_script.jsonl")),
        p(&fx.join("external_script.jsonl")),
    );
    let cfg_path = dir.join("duet.json");
    std::fs::write(&cfg_path, cfg).unwrap();
    let out = duet(&["--config", p(&cfg_path), "index"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    cfg_path
}

#[test]
fn simulate_reports_the_union_bound() {
    let out = duet(&["simulate", "--pi", "0.231", "--pe", "0.327", "--judge-quality", "1", "--rho", "0"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = String::from_utf8(out.stdout).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("delta,accuracy,gain,union_bound"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 5);
    for r in &rows {
        assert!((r[3] - 0.4825).abs() < 5e-5, "{r:?}");
        let sigma = (0.4825f64 * 0.5175 / 100_000.0).sqrt();
        assert!((r[1] - 0.4825).abs() < 3.0 * sigma + 5e-5, "{r:?}");
    }
}

#[test]
fn simulate_rejects_bad_parameters() {
    let out = duet(&["simulate", "--pi", "1.5"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("p_i"));
}

#[test]
fn simulate_writes_csv_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sim.csv");
    let out = duet(&["simulate", "--trials", "1000", "--delta-sweep", "0,0.1", "--out", p(&path)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(out.stdout.is_empty());
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 3);
}

#[test]
fn ingest_empty_file_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.json");
    std::fs::write(&empty, "").unwrap();
    let out = duet(&["ingest", "--input", p(&empty), "--out", p(&dir.path().join("c.jsonl"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("malformed JSON at byte offset 0"), "{}", stderr(&out));
    assert!(!dir.path().join("c.jsonl").exists());
}

#[test]
fn run_with_mocks_on_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path(), Some("unknown"));
    let questions = fixtures().join("hotpot_2row.json");
    let mut outputs = Vec::new();
    for workers in ["1", "4"] {
        let run = dir.path().join(format!("run{workers}.jsonl"));
        let out = duet(&["--config", p(&cfg), "run", "--questions", p(&questions), "--out", p(&run), "--workers", workers]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let bytes = std::fs::read(&run).unwrap();
        assert_eq!(bytes.iter().filter(|&&b| b == b'\n').count(), 2);
        outputs.push(bytes);
    }
    assert_eq!(outputs[0], outputs[1]);

    let out = duet(&["eval", "--run", p(&dir.path().join("run1.jsonl")), "--gold", p(&questions), "--json"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["report"]["em"], 1.0);
    assert_eq!(v["report"]["per_arm"]["internal"]["em"], 0.5);

    let out = duet(&["eval", "--run", p(&dir.path().join("run1.jsonl")), "--gold", p(&questions)]);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("Final answer") && table.contains("External arm"), "{table}");
}

#[test]
fn answer_prints_a_record() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path(), Some("unknown"));
    let out = duet(&[
        "--config",
        p(&cfg),
        "answer",
        "--question",
        "Which river flows through both Vienna and Budapest?",
        "--strategy",
        "text_feature",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["verdict"]["strategy"], "text_feature");
    assert!(v["timings"].is_null());
}

#[test]
fn failed_rows_exit_one_but_keep_the_rest() {
    let dir = tempfile::tempdir().unwrap();
    // the internal script has no fallback: q1 and q2 match, anything else fails
    let cfg = workspace(dir.path(), None);
    let questions = dir.path().join("q.jsonl");
    std::fs::write(
        &questions,
        concat!(
            r#"{"qid":"a","question":"The Eiffel Tower stands in which capital city?"}"#,
            "\n",
            r#"{"qid":"b","question":"Zzyzx?"}"#,
            "\n"
        ),
    )
    .unwrap();
    let run = dir.path().join("run.jsonl");
    let out = duet(&["--config", p(&cfg), "run", "--questions", p(&questions), "--out", p(&run)]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    let text = std::fs::read_to_string(&run).unwrap();
    let rows: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["verdict"]["final_answer"], "Paris");
    assert!(rows[1]["error"].is_string());
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"retreival_k": 3}"#).unwrap();
    let out = duet(&["--config", p(&cfg), "simulate"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("parsing config"));

    let out = duet(&["run", "--questions", "nowhere.jsonl", "--out", p(&dir.path().join("r.jsonl"))]);
    assert_eq!(code(&out), 2);

    let out = duet(&["simulate", "--no-such-flag"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path(), Some("unknown"));
    let moved = dir.path().join("elsewhere.jsonl");
    std::fs::rename(dir.path().join("corpus.jsonl"), &moved).unwrap();
    let out = duet(&["--config", p(&cfg), "answer", "--question", "Eiffel Tower?", "--corpus", p(&moved)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn build_sft_writes_all_families() {
    let dir = tempfile::tempdir().unwrap();
    let hotpot = fixtures().join("hotpot_2row.json");
    let out = duet(&[
        "build-sft", "--input", p(&hotpot), "--out-dir", p(dir.path()), "--noise", "2", "--negatives", "1", "--seed", "4",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let count = |name: &str| std::fs::read_to_string(dir.path().join(name)).unwrap().lines().count();
    assert_eq!(count("internal_sft.jsonl"), 2);
    assert_eq!(count("external_sft.jsonl"), 2);
    assert_eq!(count("judge_pairs.jsonl"), 4);

    // two distinct answers cannot supply three negatives each; the other files are still written
    let again = tempfile::tempdir().unwrap();
    let out = duet(&["build-sft", "--input", p(&hotpot), "--out-dir", p(again.path())]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(again.path().join("internal_sft.jsonl").exists());
    assert!(!again.path().join("judge_pairs.jsonl").exists());
}

#[test]
fn every_subcommand_has_help() {
    for sub in ["ingest", "index", "answer", "run", "build-sft", "eval", "simulate"] {
        let out = duet(&[sub, "--help"]);
        assert_eq!(code(&out), 0, "{sub}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("--"), "{sub}");
    }
}
