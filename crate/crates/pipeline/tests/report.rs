mod common;

use common::*;
use ptqlora::compare::{compare_stages, stage_matches, CompareSpec};
use ptqlora::error::PipelineError;
use ptqlora::manifest::RunManifest;
use ptqlora::report::{build_report, emit_report, ReportFormat};
use ptqlora_core::eval::WilcoxonMode;
use ptqlora_core::{QuantMethod, StageLabel};

const BNB: QuantMethod = QuantMethod::BnbNf4;

fn best_row(t: &ptqlora::report::ReportTable, column: &str) -> StageLabel {
    let c = t.columns.iter().position(|x| x == column).unwrap();
    let rows: Vec<_> = t.rows.iter().filter(|r| r.best[c]).collect();
    assert_eq!(rows.len(), 1, "exactly one best cell in {column}");
    rows[0].stage
}

#[test]
fn summarization_r1_marks_the_qlora_row() {
    let m = manifest(
        0,
        BNB,
        [
            vec![generation("summarization", 0.5534)],
            vec![generation("summarization", 0.5534)],
            vec![generation("summarization", 0.5701)],
        ],
    );
    let t = build_report(&[m]).unwrap();
    assert_eq!(best_row(&t, "summarization/R1"), StageLabel::PtqQlora(BNB));
}

#[test]
fn call_outcome_f1_marks_the_qlora_row() {
    let m = manifest(
        0,
        BNB,
        [
            vec![classification("call_outcome", 0.7984)],
            vec![classification("call_outcome", 0.7963)],
            vec![classification("call_outcome", 0.835)],
        ],
    );
    let t = build_report(std::slice::from_ref(&m)).unwrap();
    assert_eq!(
        best_row(&t, "call_outcome/F1-micro"),
        StageLabel::PtqQlora(BNB)
    );
    let text = emit_report(&[m], ReportFormat::Table).unwrap();
    assert!(text.contains("0.8350*"), "{text}");
}

#[test]
fn single_manifest_gives_one_row_per_stage_and_ties_go_to_the_earlier_stage() {
    let m = manifest(
        0,
        BNB,
        [
            vec![classification("c", 0.5)],
            vec![classification("c", 0.5)],
            vec![classification("c", 0.4)],
        ],
    );
    let t = build_report(std::slice::from_ref(&m)).unwrap();
    let labels: Vec<StageLabel> = t.rows.iter().map(|r| r.stage).collect();
    assert_eq!(labels, RunManifest::expected_order(BNB));
    assert_eq!(best_row(&t, "c/F1-micro"), StageLabel::Sft16Bit);
    let text = emit_report(&[m], ReportFormat::Table).unwrap();
    assert_eq!(text.lines().count(), 5, "{text}");
    assert_eq!(text.matches('*').count(), 3, "{text}");
}

#[test]
fn several_manifests_are_averaged_per_stage() {
    let a = manifest(
        0,
        BNB,
        [
            vec![classification("c", 0.2)],
            vec![classification("c", 0.4)],
            vec![classification("c", 0.6)],
        ],
    );
    let b = manifest(
        1,
        BNB,
        [
            vec![classification("c", 0.4)],
            vec![classification("c", 0.6)],
            vec![classification("c", 0.6)],
        ],
    );
    let g = manifest(
        0,
        QuantMethod::Gptq,
        [
            vec![classification("c", 0.2)],
            vec![classification("c", 0.1)],
            vec![classification("c", 0.9)],
        ],
    );
    let t = build_report(&[a, b, g]).unwrap();
    assert_eq!(t.rows.len(), 5);
    let row = |l: StageLabel| t.rows.iter().find(|r| r.stage == l).unwrap();
    let f1 = t.columns.iter().position(|c| c == "c/F1-micro").unwrap();
    assert_eq!(row(StageLabel::Sft16Bit).runs, 3);
    assert!((row(StageLabel::Ptq(BNB)).values[f1] - 0.5).abs() < 1e-12);
    assert_eq!(
        best_row(&t, "c/F1-micro"),
        StageLabel::PtqQlora(QuantMethod::Gptq)
    );
}

#[test]
fn inconsistent_metric_sets_are_an_error() {
    let a = manifest(
        0,
        BNB,
        [
            vec![classification("c", 0.2)],
            vec![classification("c", 0.4)],
            vec![classification("c", 0.6)],
        ],
    );
    let b = manifest(
        1,
        BNB,
        [
            vec![classification("d", 0.2)],
            vec![classification("d", 0.4)],
            vec![classification("d", 0.6)],
        ],
    );
    assert!(matches!(
        build_report(&[a, b]),
        Err(PipelineError::Report(_))
    ));
    assert!(matches!(build_report(&[]), Err(PipelineError::Report(_))));
}

#[test]
fn csv_quotes_and_lists_best_columns() {
    let m = manifest(
        0,
        BNB,
        [
            vec![classification("call, outcome", 0.1)],
            vec![classification("call, outcome", 0.3)],
            vec![classification("call, outcome", 0.2)],
        ],
    );
    let csv = emit_report(&[m], ReportFormat::Csv).unwrap();
    let mut rdr = csv::Reader::from_reader(csv.as_bytes());
    let header = rdr.headers().unwrap().clone();
    assert_eq!(&header[2], "call, outcome/Precision");
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(&rows[1][0], "PTQ-BNB-4bit");
    assert_eq!(&rows[1][4], "0.3000");
    assert!(rows[1][5].contains("call, outcome/F1-micro"));
    assert_eq!(&rows[0][5], "");
    assert!(csv.contains("\"call, outcome/Precision\""));
}

fn spec(a: &str, b: &str, metric: &str) -> CompareSpec {
    CompareSpec {
        stage_a: a.into(),
        stage_b: b.into(),
        metric: metric.into(),
        task: None,
        mode: WilcoxonMode::Auto,
    }
}

#[test]
fn stage_patterns() {
    assert!(stage_matches("PTQ-*-4bit", "PTQ-GPTQ-4bit"));
    assert!(!stage_matches("PTQ-*-4bit", "PTQ-GPTQ-4bit+QLoRA"));
    assert!(stage_matches("PTQ-*-4bit+QLoRA", "PTQ-BNB-4bit+QLoRA"));
    assert!(stage_matches("*", "SFT-16bit"));
    assert!(stage_matches("SFT-16bit", "SFT-16bit"));
    assert!(!stage_matches("SFT", "SFT-16bit"));
    assert!(stage_matches("P*-*bit", "PTQ-BNB-4bit"));
}

#[test]
fn identical_stages_give_a_degenerate_flag() {
    let ms: Vec<_> = (0..4)
        .map(|s| {
            manifest(
                s,
                BNB,
                [
                    vec![classification("c", 0.5)],
                    vec![classification("c", 0.5)],
                    vec![classification("c", 0.5)],
                ],
            )
        })
        .collect();
    let c = compare_stages(&ms, &spec("PTQ-*-4bit+QLoRA", "PTQ-*-4bit", "F1-micro")).unwrap();
    assert!(c.degenerate());
    assert_eq!(c.p_value(), 1.0);
    assert!(!c.significant());
    assert!(c.render().contains("degenerate"));
}

#[test]
fn constant_shift_over_eight_conditions_is_exactly_two_over_256() {
    let ms: Vec<_> = (0..8)
        .map(|s| {
            let base = 0.3 + 0.05 * s as f64;
            manifest(
                s,
                BNB,
                [
                    vec![classification("c", base)],
                    vec![classification("c", base)],
                    vec![classification("c", base + 0.01)],
                ],
            )
        })
        .collect();
    let c = compare_stages(&ms, &spec("PTQ-*-4bit+QLoRA", "PTQ-*-4bit", "f1")).unwrap();
    assert_eq!(c.pairs.len(), 8);
    assert_eq!(c.p_value(), 2.0 / 256.0);
    assert!(c.significant());
    let r = c.pairs.result.as_ref().unwrap();
    assert_eq!(r.n_effective, 8);
    assert!(r.median_difference > 0.0);
}

#[test]
fn compare_pairs_by_condition_and_task() {
    let ms = reference_manifests();
    let c = compare_stages(&ms, &spec("PTQ-*-4bit+QLoRA", "PTQ-*-4bit", "F1-micro")).unwrap();
    assert_eq!(c.pairs.len(), 24);
    assert!(c
        .pairs
        .conditions
        .iter()
        .any(|x| x == "Qwen2-7b bnb-nf4 call_purpose"));
    let one = CompareSpec {
        task: Some("banking77".into()),
        ..spec("PTQ-*-4bit+QLoRA", "PTQ-*-4bit", "F1-micro")
    };
    assert_eq!(compare_stages(&ms, &one).unwrap().pairs.len(), 6);
}

#[test]
fn no_pairs_is_an_error() {
    let ms = reference_manifests();
    assert!(compare_stages(&ms, &spec("PTQ-AWQ-*", "PTQ-*-4bit", "F1-micro")).is_err());
    assert!(compare_stages(&ms, &spec("PTQ-*-4bit+QLoRA", "PTQ-*-4bit", "R1")).is_err());
}
