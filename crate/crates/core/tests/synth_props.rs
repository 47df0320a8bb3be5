//! Statistical properties of generated traffic, checked on plan counts
//! (cheap) and, where names matter, on materialised records.

use std::collections::{BTreeMap, HashSet};

use chrono::{Datelike, NaiveDate, Weekday};
use dnsward::analytics::{daily_aggregate, group_report, top_domains};
use dnsward::org::Group;
use dnsward::traffic_synth::{
    default_profiles, default_scenario, plan, Intervention, Scenario, SynthProfile, BURST_QNAME,
};
use dnsward::Class;
use proptest::prelude::*;

fn ymd(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).unwrap()
}

fn weekend(d: NaiveDate) -> bool {
    matches!(d.weekday(), Weekday::Sat | Weekday::Sun)
}

/// One plain org: no bad eggs, bursts or episodes.
fn plain(amplitude: f64) -> SynthProfile {
    let mut p = default_profiles().remove(0);
    p.weekday_amplitude = amplitude;
    p.n_users = 20;
    p
}

fn single(p: SynthProfile, start: NaiveDate, end: NaiveDate) -> Scenario {
    Scenario { start, end, profiles: vec![p], peak: None }
}

#[test]
fn weekday_amplitude_is_recovered() {
    // Eight whole weeks, Monday to Sunday.
    let s = single(plain(5.0), ymd(2018, 1, 1), ymd(2018, 2, 25));
    let p = plan(&s, 42).unwrap();
    let (mut wd, mut nwd, mut we, mut nwe) = (0u64, 0u64, 0u64, 0u64);
    for c in p.counts() {
        if weekend(c.date) {
            we += c.total();
            nwe += 1;
        } else {
            wd += c.total();
            nwd += 1;
        }
    }
    let ratio = (wd as f64 / nwd as f64) / (we as f64 / nwe as f64);
    assert!((ratio - 5.0).abs() <= 0.2 * 5.0, "ratio {ratio}");
}

#[test]
fn intervention_scales_post_rate() {
    let mut prof = plain(3.0);
    prof.pools.grey.iter_mut().for_each(|g| g.weight *= 20.0);
    let date = ymd(2018, 6, 1);
    for mult in [0.25, 0.5, 2.0] {
        prof.intervention = Some(Intervention { date, grey_multiplier: mult, malicious_multiplier: 1.0 });
        let s = single(prof.clone(), ymd(2018, 3, 1), ymd(2018, 8, 31));
        let p = plan(&s, 9).unwrap();
        let mean = |post: bool| {
            let days: Vec<u64> = p.counts().filter(|c| (c.date >= date) == post).map(|c| c.count(Class::Grey)).collect();
            assert!(days.len() >= 60);
            days.iter().sum::<u64>() as f64 / days.len() as f64
        };
        let (pre, post) = (mean(false), mean(true));
        let want = pre * mult;
        assert!((post - want).abs() <= 0.15 * want, "mult {mult}: pre {pre} post {post}");
    }
}

#[test]
fn default_scenario_properties() {
    let s = default_scenario();
    let p = plan(&s, 7).unwrap();

    // Around a million queries; not a measured figure, just the design volume.
    let total = p.total();
    assert!((500_000..=2_000_000).contains(&total), "total {total}");

    let recs: Vec<_> = p.records().collect();
    assert_eq!(recs.len() as u64, total);

    let top = top_domains(&recs, 1, &HashSet::new()).unwrap();
    assert_eq!(top[0].0, BURST_QNAME);
    let excluded: HashSet<String> = [BURST_QNAME.to_string()].into();
    let rest = top_domains(&recs, 10, &excluded).unwrap();
    assert!(rest.iter().all(|(q, _)| q != BURST_QNAME));

    let aggs = daily_aggregate(&recs);
    let rep = group_report(&aggs, &s.groups()).unwrap();
    let summary = |g: Group| rep.summaries.iter().find(|s| s.group == g).unwrap();
    let (c, t) = (summary(Group::Control), summary(Group::Treatment));
    assert!(c.mean_malicious_proportion.unwrap() < t.mean_malicious_proportion.unwrap());

    let grey = |org: &str| {
        let (mut g, mut n) = (0u64, 0u64);
        for a in aggs.iter().filter(|a| a.org_id == org) {
            g += a.grey;
            n += a.total;
        }
        g as f64 / n as f64
    };
    assert!(grey("green") > grey("yellow"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn plan_is_a_function_of_seed(seed in any::<u64>()) {
        let s = single(plain(2.0), ymd(2018, 5, 1), ymd(2018, 5, 21));
        let a = plan(&s, seed).unwrap();
        let b = plan(&s, seed).unwrap();
        let ca: Vec<_> = a.counts().cloned().collect();
        let cb: Vec<_> = b.counts().cloned().collect();
        prop_assert_eq!(&ca, &cb);
        // Materialised records match the per-day class counts exactly.
        let mut per_day: BTreeMap<(NaiveDate, Class), u64> = BTreeMap::new();
        for r in a.records() {
            *per_day.entry((r.ts.date_naive(), r.class)).or_default() += 1;
        }
        for c in &ca {
            for class in Class::ALL {
                prop_assert_eq!(per_day.get(&(c.date, class)).copied().unwrap_or(0), c.count(class));
            }
        }
    }
}
