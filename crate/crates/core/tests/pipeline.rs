mod common;

use std::sync::Arc;

use common::{fixture_duet, fixture_questions, two_row_fixture};
use duet_core::backends::{BackendError, MockGenerator};
use duet_core::eval::{evaluate_records, EvalError, ReportArm};
use duet_core::pipeline::{answer_batch, parse_run, read_run, run_questions, BatchOptions, DegradeReason, RunBody};
use duet_core::referee::{ChosenArm, VerdictSource};
use duet_core::retriever::{build_index, IndexParams};
use duet_core::{Duet, Exec, GenerationRequest, GenerationResult, Generator, PipelineConfig, RefereeConfig};

struct Down;

impl Generator for Down {
    fn generate(&self, _: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        Err(BackendError::Unavailable {
            attempts: 1,
            message: "down".into(),
        })
    }

    fn model_name(&self) -> &str {
        "down"
    }
}

fn duet_with(internal: Arc<dyn Generator>, external: Arc<dyn Generator>) -> Duet {
    let (_, corpus) = two_row_fixture();
    let index = build_index(&corpus, IndexParams::default()).unwrap();
    let cfg = PipelineConfig::new(internal, external, RefereeConfig::text_feature(0.05));
    Duet::new(Arc::new(corpus), Arc::new(index), cfg).unwrap()
}

#[test]
fn fixture_run_answers_both_questions() {
    let records = run_questions(&fixture_duet(), &fixture_questions(), 2, BatchOptions::default());
    let finals: Vec<&str> = records
        .iter()
        .map(|r| match &r.body {
            RunBody::Answer(a) => a.verdict.final_answer.as_str(),
            RunBody::Error { error, .. } => panic!("{error}"),
        })
        .collect();
    assert_eq!(finals, ["Paris", "Danube"]);
    let RunBody::Answer(first) = &records[0].body else { unreachable!() };
    assert_eq!(first.retrieved[0].doc_id, "q1:Eiffel Tower");
    assert!(first.retrieved.len() <= 5);
    assert!(first.degraded.is_none());
    assert_eq!(first.verdict.strategy, VerdictSource::Alignment);
}

#[test]
fn run_file_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.jsonl");
    let duet = fixture_duet();
    answer_batch(&duet, &fixture_questions(), 1, &path, BatchOptions::default()).unwrap();
    let parsed = read_run(&path).unwrap();
    let fresh = run_questions(&duet, &fixture_questions(), 1, BatchOptions::default());
    assert_eq!(parsed, fresh);
}

#[test]
fn execution_modes_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let duet = fixture_duet();
    let mut bytes = Vec::new();
    for (i, exec) in [Exec::Sequential, Exec::default()].into_iter().enumerate() {
        let path = dir.path().join(format!("{i}.jsonl"));
        answer_batch(&duet, &fixture_questions(), 3, &path, BatchOptions { exec, record_timings: false }).unwrap();
        bytes.push(std::fs::read(path).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn internal_failure_degrades_to_external() {
    let duet = duet_with(Arc::new(Down), Arc::new(MockGenerator::constant("Danube")));
    let a = duet.answer("q2", "Which river flows through both Vienna and Budapest?").unwrap();
    assert!(a.answer_internal.is_none());
    assert_eq!(a.degraded.unwrap().reason, DegradeReason::InternalFailed);
    assert_eq!(a.verdict.final_answer, "Danube");
    assert_eq!(a.verdict.strategy, VerdictSource::Fallback);
    assert_eq!(a.verdict.chosen_arm, ChosenArm::External);
}

#[test]
fn external_failure_degrades_to_internal() {
    let duet = duet_with(Arc::new(MockGenerator::constant("Paris")), Arc::new(Down));
    let a = duet.answer("q1", "The Eiffel Tower stands in which capital city?").unwrap();
    assert!(a.answer_external.is_none());
    assert!(a.retrieved.is_empty());
    assert_eq!(a.degraded.unwrap().reason, DegradeReason::ExternalFailed);
    assert_eq!(a.verdict.chosen_arm, ChosenArm::Internal);
}

#[test]
fn no_hits_skip_the_external_arm() {
    let duet = duet_with(Arc::new(MockGenerator::constant("Paris")), Arc::new(MockGenerator::constant("never")));
    let a = duet.answer("q9", "Zzyzx qwerty?").unwrap();
    assert!(a.retrieved.is_empty());
    assert!(a.answer_external.is_none());
    assert_eq!(a.degraded.unwrap().reason, DegradeReason::NoRetrievalHits);
    assert_eq!(a.verdict.final_answer, "Paris");
}

#[test]
fn failing_question_becomes_an_error_row() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.jsonl");
    let duet = duet_with(Arc::new(Down), Arc::new(MockGenerator::constant("x")));
    // q1 retrieves documents but both arms fail; q2 finds nothing, so it has no arm left either
    let questions = vec![
        ("q1".to_owned(), "Eiffel Tower".to_owned()),
        ("q2".to_owned(), "Zzyzx".to_owned()),
    ];
    let summary = answer_batch(&duet, &questions, 2, &path, BatchOptions::default()).unwrap();
    assert_eq!(summary.rows, 2);
    let rows = read_run(&path).unwrap();
    assert!(!rows[0].is_error());
    assert!(rows[1].is_error());
    assert_eq!(rows[1].qid(), "q2");
    assert_eq!(summary.errors, 1);
}

#[test]
fn unwritable_output_fails_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("missing/run.jsonl");
    assert!(answer_batch(&fixture_duet(), &fixture_questions(), 1, &path, BatchOptions::default()).is_err());
}

#[test]
fn evaluation_of_fixture_run() {
    let (gold, _) = two_row_fixture();
    let records = run_questions(&fixture_duet(), &fixture_questions(), 1, BatchOptions::default());
    let report = evaluate_records(&records, &gold, Exec::default()).unwrap();
    assert_eq!(report.n, 2);
    assert_eq!(report.em, 1.0);
    assert_eq!(report.per_arm[&ReportArm::Internal].em, 0.5);
    assert_eq!(report.per_arm[&ReportArm::External].em, 1.0);
    assert_eq!(report.referee_gain_vs_external, 0.0);
    assert_eq!(report.error_rows, 0);
}

#[test]
fn error_rows_count_as_wrong_and_unknown_qids_are_rejected() {
    let (gold, _) = two_row_fixture();
    let raw = concat!(
        r#"{"format_version":1,"qid":"q1","error":"both arms failed"}"#,
        "\n",
        r#"{"format_version":1,"qid":"q2","question":"?","answer_internal":null,"answer_external":{"text":"Danube","arm":"external","gen_meta":{"text":"Danube","model_name":"m"}},"retrieved":[],"verdict":{"final_answer":"Danube","chosen_arm":"external","score_internal":null,"score_external":null,"strategy":"fallback"},"degraded":{"reason":"internal_failed","detail":"down"}}"#,
        "\n"
    );
    let rows = parse_run(raw).unwrap();
    let report = evaluate_records(&rows, &gold, Exec::Sequential).unwrap();
    assert_eq!(report.em, 0.5);
    assert_eq!(report.error_rows, 1);
    assert_eq!(report.degraded_rows, 1);
    assert_eq!(report.per_arm[&ReportArm::Internal].n, 0);
    assert_eq!(report.per_arm[&ReportArm::External].n, 1);

    let stray = parse_run(r#"{"format_version":1,"qid":"nope","error":"x"}"#).unwrap();
    assert!(matches!(
        evaluate_records(&stray, &gold, Exec::Sequential),
        Err(EvalError::UnknownQid { line: 1, .. })
    ));
}
