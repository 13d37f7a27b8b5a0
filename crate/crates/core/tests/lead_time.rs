use chrono::NaiveDate;
use cxr_core::evaluator::{cohort_lead_report, lead_time, Capture, CaseTimeline};

fn d(s: &str) -> NaiveDate {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
}

/// A case whose only positive capture sits `lead` days before confirmation.
fn case_with_lead(id: &str, lead: Option<i64>) -> CaseTimeline {
    let confirm = d("2020-02-20");
    let captures = match lead {
        Some(l) => vec![Capture {
            date: confirm - chrono::Duration::days(l),
            positive: true,
        }],
        None => vec![Capture {
            date: d("2020-02-01"),
            positive: false,
        }],
    };
    CaseTimeline::new(id, None, Some(confirm), captures)
}

#[test]
fn lead_time_counts_calendar_days() {
    let case = CaseTimeline::new(
        "a",
        None,
        Some(d("2020-01-31")),
        vec![Capture {
            date: d("2020-01-14"),
            positive: true,
        }],
    );
    assert_eq!(lead_time(&case), Some(17));
}

#[test]
fn earliest_positive_capture_wins() {
    let case = CaseTimeline::new(
        "a",
        None,
        Some(d("2020-01-31")),
        vec![
            Capture {
                date: d("2020-01-20"),
                positive: true,
            },
            Capture {
                date: d("2020-01-10"),
                positive: false,
            },
            Capture {
                date: d("2020-01-16"),
                positive: true,
            },
        ],
    );
    assert_eq!(lead_time(&case), Some(15));
}

#[test]
fn lead_time_undefined_without_positive_or_confirmation() {
    assert_eq!(lead_time(&case_with_lead("a", None)), None);
    let unconfirmed = CaseTimeline::new(
        "b",
        None,
        None,
        vec![Capture {
            date: d("2020-01-10"),
            positive: true,
        }],
    );
    assert_eq!(lead_time(&unconfirmed), None);
}

#[test]
fn late_detection_gives_negative_lead() {
    assert_eq!(lead_time(&case_with_lead("a", Some(-3))), Some(-3));
}

#[test]
fn cohort_counts_match_hand_fixtures() {
    let r = cohort_lead_report(&[case_with_lead("a", Some(6))]);
    assert_eq!((r.at_least_2_days, r.at_least_5_days), (1, 1));

    let r = cohort_lead_report(&[
        case_with_lead("a", Some(1)),
        case_with_lead("b", Some(3)),
        case_with_lead("c", None),
    ]);
    assert_eq!((r.at_least_2_days, r.at_least_5_days), (1, 0));
    assert_eq!(r.defined, 2);

    let r = cohort_lead_report(&[]);
    assert_eq!((r.at_least_2_days, r.at_least_5_days, r.defined), (0, 0, 0));
}

#[test]
fn boundaries_are_inclusive() {
    let r = cohort_lead_report(&[case_with_lead("a", Some(2)), case_with_lead("b", Some(5))]);
    assert_eq!((r.at_least_2_days, r.at_least_5_days), (2, 1));
}

#[test]
fn report_csv_has_one_row_per_case() {
    let r = cohort_lead_report(&[case_with_lead("b", Some(2)), case_with_lead("a", None)]);
    let mut buf = Vec::new();
    r.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("a,"));
    assert!(lines[2].starts_with("b,"));
}
