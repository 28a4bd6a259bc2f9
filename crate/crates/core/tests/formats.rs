use std::io::Cursor;

use aedkit::corpus::read_dataset;
use aedkit::dynamics::{read_traces_from, validate_traces, write_traces_to, TraceSet};
use aedkit::scoring::score_dataset;
use aedkit::{EpochMode, Error, Method};

// Written the way Python's json.dumps lays it out, with spaces after separators.
const EXPORTED: &str = r#"{"instance_id": "x1", "tokens": ["a", "b", "</s>"], "epochs": 2, "p": [[0.25, 0.5, 0.75], [0.5, 0.5, 1.0]], "q": [[0.5, 0.25, 0.125], [0.25, 0.25, 0.0]]}
{"instance_id": "x2", "tokens": ["</s>"], "epochs": 2, "p": [[0.1], [0.3]], "q": [[0.6], [0.2]]}
{"instance_id": "x3", "tokens": ["c", "</s>"], "epochs": 2, "p": [[0.9, 0.8], [0.95, 0.85]], "q": [[0.05, 0.1], [0.02, 0.05]]}
"#;

const DATASET: &str = r#"{"id": "x1", "instruction": "i", "output": "a b"}
{"id": "x2", "instruction": "i", "output": ""}
{"id": "x3", "instruction": "i", "output": "c"}
"#;

#[test]
fn exporter_style_file_validates_and_scores() {
    let ts: TraceSet = read_traces_from(Cursor::new(EXPORTED)).unwrap();
    let ds = read_dataset(Cursor::new(DATASET)).unwrap();
    let report = validate_traces(&ts, &ds);
    assert!(report.is_clean(), "{:?}", report.findings);

    let st = score_dataset(
        &ts,
        &[Method::PMu],
        &[EpochMode::AllEpochs, EpochMode::LastEpoch],
        1,
    );
    let hand_x1 = -((0.25 + 0.5 + 0.75) / 3.0 + (0.5 + 0.5 + 1.0) / 3.0) / 2.0;
    let hand_x2 = -(0.1 + 0.3) / 2.0;
    let hand_x3 = -((0.9 + 0.8) / 2.0 + (0.95 + 0.85) / 2.0) / 2.0;
    for (id, want) in [("x1", hand_x1), ("x2", hand_x2), ("x3", hand_x3)] {
        let got = st.get(id, Method::PMu, EpochMode::AllEpochs).unwrap();
        assert!((got - want).abs() < 1e-9, "{id}: {got} vs {want}");
    }
    let last = st.get("x1", Method::PMu, EpochMode::LastEpoch).unwrap();
    assert!((last + 2.0 / 3.0).abs() < 1e-9);
}

#[test]
fn write_read_round_trip_is_exact() {
    let ts: TraceSet = read_traces_from(Cursor::new(EXPORTED)).unwrap();
    let mut buf = Vec::new();
    write_traces_to(&mut buf, &ts).unwrap();
    let again: TraceSet = read_traces_from(Cursor::new(&buf)).unwrap();
    assert_eq!(ts, again);
    let mut buf2 = Vec::new();
    write_traces_to(&mut buf2, &again).unwrap();
    assert_eq!(buf, buf2);
}

#[test]
fn f32_traces_read_and_score() {
    let ts: TraceSet<f32> = read_traces_from(Cursor::new(EXPORTED)).unwrap();
    let st = score_dataset(&ts, &Method::ALL, &EpochMode::ALL, 2);
    let got = st.get("x2", Method::PMu, EpochMode::AllEpochs).unwrap();
    assert!((got + 0.2).abs() < 1e-6);
}

#[test]
fn epochs_field_must_match_rows() {
    let bad = r#"{"instance_id": "x", "tokens": ["a"], "epochs": 3, "p": [[0.5], [0.5]], "q": [[0.1], [0.1]]}"#;
    let err = read_traces_from::<f64, _>(Cursor::new(bad)).unwrap_err();
    assert!(
        matches!(
            err,
            Error::Malformed { line: 1, .. } | Error::TraceShape { .. }
        ),
        "{err}"
    );
}

#[test]
fn mixed_epoch_counts_are_rejected() {
    let mixed = format!(
        "{}\n{}\n",
        r#"{"instance_id": "x", "tokens": ["a"], "epochs": 1, "p": [[0.5]], "q": [[0.1]]}"#,
        r#"{"instance_id": "y", "tokens": ["a"], "epochs": 2, "p": [[0.5], [0.5]], "q": [[0.1], [0.1]]}"#
    );
    assert!(read_traces_from::<f64, _>(Cursor::new(mixed)).is_err());
}

#[test]
fn evaluation_is_thread_invariant() {
    use aedkit::aggregation::{aggregate_tasks, Stat};
    use aedkit::evaluation::{evaluate_threaded, CategoryMode};
    use aedkit::{Dataset, ErrorCategory, Instance, ScoreTable64, SplitLabel};

    let mut instances = Vec::new();
    let mut st = ScoreTable64::new();
    for i in 0..40 {
        let split = if i % 5 == 0 {
            SplitLabel::Error
        } else {
            SplitLabel::Clean
        };
        let mut inst = Instance::new(format!("i{i}"), "x", "y")
            .with_task(format!("t{}", i % 4))
            .with_split(split);
        if split == SplitLabel::Error {
            inst = inst.with_category(ErrorCategory::ALL[i % 3]);
        }
        instances.push(inst);
        for m in Method::ALL {
            for e in EpochMode::ALL {
                st.insert(
                    format!("i{i}"),
                    m,
                    e,
                    ((i * 7 + m as usize * 3) % 11) as f64,
                );
            }
        }
    }
    let ds = Dataset::new(instances).unwrap();
    let mut tst = aggregate_tasks(&st, &ds, Stat::Mean).unwrap();
    tst.extend(aggregate_tasks(&st, &ds, Stat::Median).unwrap());
    for mode in [CategoryMode::Global, CategoryMode::Paired] {
        let one = evaluate_threaded(&st, &ds, Some(&tst), mode, 1).unwrap();
        for threads in [2, 3, 8] {
            assert_eq!(
                one,
                evaluate_threaded(&st, &ds, Some(&tst), mode, threads).unwrap()
            );
        }
    }
}
