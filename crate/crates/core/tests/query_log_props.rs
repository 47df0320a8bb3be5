use std::fs::OpenOptions;
use std::io::Write;

use chrono::{Duration, NaiveDate, TimeZone, Utc};
use dnsward::query_log::{read_all, read_range, LogWriter, RecordFilter};
use dnsward::{Action, Class, QueryRecord};
use proptest::prelude::*;

fn record() -> impl Strategy<Value = QueryRecord> {
    (
        0i64..(4 * 86_400),
        prop::sample::select(vec!["red", "green", "blue_2", "a-b"]),
        "[a-z]{1,8}\\.(com|ru|example)",
        any::<u16>(),
        0..3usize,
        any::<bool>(),
        0u8..16,
        prop::option::of(prop::collection::vec("[a-z]{1,6}", 0..3)),
    )
        .prop_map(|(secs, org, qname, qtype, class, blocked, rcode, tags)| {
            let class = Class::ALL[class];
            QueryRecord {
                ts: Utc.with_ymd_and_hms(2018, 9, 16, 0, 0, 0).unwrap() + Duration::seconds(secs),
                org_id: org.into(),
                matched_domain: (class != Class::Benign).then(|| qname.clone()),
                qname,
                qtype,
                class,
                action: if blocked { Action::Blocked } else { Action::Forwarded },
                rcode,
                tags,
            }
        })
}

fn sort_key(r: &QueryRecord) -> (NaiveDate, String, chrono::DateTime<Utc>) {
    (r.date(), r.org_id.clone(), r.ts)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn append_then_read_roundtrip(mut recs in prop::collection::vec(record(), 0..300)) {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut w = LogWriter::new(dir.path()).unwrap();
            for r in &recs {
                w.append(r).unwrap();
            }
        }
        let mut back: Vec<QueryRecord> = read_all(dir.path(), RecordFilter::default()).unwrap().collect();
        // Files are read date-major, then org; within a file order is arrival order.
        recs.sort_by_key(sort_key);
        back.sort_by_key(sort_key);
        prop_assert_eq!(back, recs);
    }

    #[test]
    fn filter_equals_refilter(recs in prop::collection::vec(record(), 0..200), class in 0..3usize, org in prop::option::of(prop::sample::select(vec!["red", "green"]))) {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut w = LogWriter::new(dir.path()).unwrap();
            for r in &recs {
                w.append(r).unwrap();
            }
        }
        let from = NaiveDate::from_ymd_opt(2018, 9, 16).unwrap();
        let to = NaiveDate::from_ymd_opt(2018, 9, 19).unwrap();
        let filter = RecordFilter { org: org.map(String::from), class: Some(Class::ALL[class]) };
        let filtered: Vec<QueryRecord> = read_range(dir.path(), from, to, filter.clone()).unwrap().collect();
        let refiltered: Vec<QueryRecord> = read_range(dir.path(), from, to, RecordFilter::default())
            .unwrap()
            .filter(|r| filter.matches(r))
            .collect();
        prop_assert_eq!(filtered, refiltered);
    }
}

#[test]
fn partial_final_line_is_skipped_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let r = QueryRecord {
        ts: Utc.with_ymd_and_hms(2018, 9, 17, 10, 0, 0).unwrap(),
        org_id: "green".into(),
        qname: "chaturbate.org".into(),
        qtype: 1,
        class: Class::Benign,
        action: Action::Forwarded,
        rcode: 0,
        matched_domain: None,
        tags: None,
    };
    {
        let mut w = LogWriter::new(dir.path()).unwrap();
        for _ in 0..5 {
            w.append(&r).unwrap();
        }
    }
    let path = LogWriter::path_for(dir.path(), "green", r.date());
    OpenOptions::new().append(true).open(&path).unwrap().write_all(b"{\"ts\":\"2018-09-17T1").unwrap();
    let mut reader = read_all(dir.path(), RecordFilter::default()).unwrap();
    let n = reader.by_ref().count();
    assert_eq!((n, reader.skipped(), reader.scanned()), (5, 1, 6));
}
