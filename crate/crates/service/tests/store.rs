use std::collections::BTreeMap;
use std::io::Write;

use chrono::{TimeZone, Utc};
use cxr_core::cascade::FinalClass;
use cxr_service::store::{HeatmapKind, ListQuery, NewScreening, StageResult, Store, RECORDS_FILE};

fn screening(class: FinalClass, day: u32) -> NewScreening {
    let positive = class != FinalClass::Normal;
    NewScreening {
        created_at: Utc.with_ymd_and_hms(2024, 3, day, 12, 0, 0).unwrap(),
        final_class: class,
        stage2: StageResult {
            prob: if positive { 0.9 } else { 0.1 },
            decision: positive,
            threshold: 0.5,
        },
        stage3: positive.then(|| StageResult {
            prob: if class == FinalClass::Covid { 0.8 } else { 0.2 },
            decision: class == FinalClass::Covid,
            threshold: 0.5,
        }),
        flags: Vec::new(),
        model_versions: BTreeMap::new(),
        file_name: None,
        original_png: vec![1, 2, 3],
        heatmaps: vec![(HeatmapKind::Stage2Cam, vec![4, 5])],
    }
}

fn filled(dir: &std::path::Path) -> Store {
    let store = Store::open(dir).unwrap();
    for i in 0..45u32 {
        let class = FinalClass::ALL[(i % 3) as usize];
        store.insert(screening(class, 1 + i / 5)).unwrap();
    }
    store
}

fn query(f: impl FnOnce(&mut ListQuery)) -> ListQuery {
    let mut q = ListQuery::default();
    f(&mut q);
    q
}

#[test]
fn pages_of_twenty_newest_first() {
    let dir = tempfile::tempdir().unwrap();
    let store = filled(dir.path());
    let p1 = store.list(&ListQuery::default()).unwrap();
    assert_eq!((p1.total, p1.pages, p1.page_size, p1.items.len()), (45, 3, 20, 20));
    assert_eq!(p1.items[0].id, 45);
    assert!(p1.items.windows(2).all(|w| w[0].id > w[1].id));
    let p3 = store.list(&query(|q| q.page = Some(3))).unwrap();
    assert_eq!(p3.items.len(), 5);
    assert_eq!(p3.items.last().unwrap().id, 1);
    assert!(store.list(&query(|q| q.page = Some(4))).unwrap().items.is_empty());
}

#[test]
fn filters_by_class_and_date() {
    let dir = tempfile::tempdir().unwrap();
    let store = filled(dir.path());
    let covid = store.list(&query(|q| q.class = Some("covid".into()))).unwrap();
    assert_eq!(covid.total, 15);
    assert!(covid.items.iter().all(|r| r.final_class == FinalClass::Covid));
    // Days 2 and 3 hold records 6..=15.
    let window = store
        .list(&query(|q| {
            q.from = Some("2024-03-02".into());
            q.to = Some("2024-03-03".into());
        }))
        .unwrap();
    assert_eq!(window.total, 10);
    assert!(window.items.iter().all(|r| (6..=15).contains(&r.id)));
}

#[test]
fn bad_queries_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let store = filled(dir.path());
    assert!(store.list(&query(|q| q.class = Some("flu".into()))).is_err());
    assert!(store.list(&query(|q| q.from = Some("03/02/2024".into()))).is_err());
    assert!(store.list(&query(|q| q.page = Some(0))).is_err());
    assert!(store.list(&query(|q| q.page_size = Some(0))).is_err());
    assert!(store.list(&query(|q| q.page_size = Some(1000))).is_err());
}

#[test]
fn reopen_keeps_records_and_drops_a_torn_tail() {
    let dir = tempfile::tempdir().unwrap();
    drop(filled(dir.path()));
    let mut f = std::fs::OpenOptions::new()
        .append(true)
        .open(dir.path().join(RECORDS_FILE))
        .unwrap();
    f.write_all(b"{\"id\": 46, \"created").unwrap();
    drop(f);
    let store = Store::open(dir.path()).unwrap();
    assert_eq!(store.len(), 45);
    assert!(store.audit().is_empty());
    let next = store.insert(screening(FinalClass::Normal, 20)).unwrap();
    assert_eq!(next.id, 46);
    assert!(store.heatmap_path(46, HeatmapKind::Stage2Cam).unwrap().is_file());
    assert!(store.heatmap_path(46, HeatmapKind::Guided).is_none());
}

#[test]
fn audit_flags_inconsistent_records() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let mut bad = screening(FinalClass::Normal, 1);
    bad.stage2.decision = true;
    let r = store.insert(bad).unwrap();
    store.insert(screening(FinalClass::Covid, 1)).unwrap();
    assert_eq!(store.audit(), vec![r.id]);
}
