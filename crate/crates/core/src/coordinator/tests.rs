use super::*;
use crate::matmul::{Matrix, RowRange};

fn ep(port: u16) -> Endpoint {
    Endpoint::new("127.0.0.1", port).unwrap()
}

fn id(s: &str) -> ProviderId {
    ProviderId::new(s)
}

fn matmul() -> Vec<String> {
    vec!["matmul".to_owned()]
}

fn beat(c: &mut Coordinator, who: &str, at: f64, speed: f64) {
    c.ingest_heartbeat(PerformanceSample::new(id(who), at, speed, 0.0).unwrap())
        .unwrap();
}

/// a, b, c registered on ports 1..3 with one heartbeat each at t = 0.
fn cluster(speeds: &[(&str, f64)]) -> Coordinator {
    let mut c = Coordinator::new(CoordinatorConfig::default()).unwrap();
    for (i, (who, speed)) in speeds.iter().enumerate() {
        c.register_provider(id(who), ep(i as u16 + 1), matmul()).unwrap();
        beat(&mut c, who, 0.0, *speed);
    }
    c
}

fn request(rows: usize, policy: Policy) -> JobRequest {
    JobRequest {
        job_id: 42,
        workload: "matmul".into(),
        policy,
        reply: ep(9000),
        first: Matrix::new(rows, 2, (0..rows * 2).map(|v| v as f64).collect()).unwrap(),
        second_cols: 2,
    }
}

fn allotments(r: &JobRecord) -> Vec<(String, u64)> {
    r.plan.allotments().iter().map(|(p, n)| (p.to_string(), *n)).collect()
}

#[test]
fn registration_adds_and_updates_entries() {
    let mut c = Coordinator::new(CoordinatorConfig::default()).unwrap();
    c.register_provider(id("a"), ep(1), matmul()).unwrap();
    assert_eq!(c.table().len(), 1);
    c.register_provider(id("a"), ep(2), matmul()).unwrap();
    assert_eq!(c.table().len(), 1);
    assert_eq!(c.table().get(&id("a")).unwrap().endpoint, ep(2));
    assert!(matches!(
        c.register_provider(id(""), ep(1), matmul()),
        Err(Error::RegistrationRejected(_))
    ));
}

#[test]
fn provider_without_services_is_never_planned() {
    let mut c = cluster(&[("a", 1.0)]);
    c.register_provider(id("idle"), ep(7), Vec::<String>::new()).unwrap();
    beat(&mut c, "idle", 0.0, 100.0);
    let r = c.plan_job(&request(10, Policy::Homogenized), 1.0).unwrap();
    assert_eq!(allotments(&r), vec![("a".to_owned(), 10)]);
}

#[test]
fn history_is_bounded() {
    let mut c = cluster(&[("a", 1.0)]);
    for i in 1..=64 {
        beat(&mut c, "a", i as f64, 2.0);
    }
    let entry = c.table().get(&id("a")).unwrap();
    assert_eq!(entry.history.len(), 64);
    assert_eq!(entry.history[0].reported_at, 1.0);
    assert_eq!(entry.last_seen, Some(64.0));
}

#[test]
fn out_of_order_heartbeats_are_sorted() {
    let mut c = cluster(&[("a", 1.0)]);
    beat(&mut c, "a", 5.0, 1.0);
    beat(&mut c, "a", 3.0, 1.0);
    let times: Vec<f64> = c
        .table()
        .get(&id("a"))
        .unwrap()
        .history
        .iter()
        .map(|s| s.reported_at)
        .collect();
    assert_eq!(times, vec![0.0, 3.0, 5.0]);
}

#[test]
fn heartbeat_from_unknown_provider_is_rejected() {
    let mut c = cluster(&[("a", 1.0)]);
    let s = PerformanceSample::new(id("ghost"), 0.0, 1.0, 0.0).unwrap();
    assert!(matches!(c.ingest_heartbeat(s), Err(Error::UnknownProvider(_))));
}

#[test]
fn homogenized_plan_follows_performance() {
    let c = cluster(&[("a", 2.0), ("b", 1.0), ("c", 1.0)]);
    let r = c.plan_job(&request(800, Policy::Homogenized), 1.0).unwrap();
    assert_eq!(
        allotments(&r),
        vec![("a".into(), 400), ("b".into(), 200), ("c".into(), 200)]
    );
    assert_eq!(r.total_load, 800);
    // 200 rows at 1 row/s, each row costing 2·2/64² of a calibration row.
    assert!((r.predicted_finish - 200.0 * 4.0 / 4096.0).abs() < 1e-12);
}

#[test]
fn equal_plan_ignores_performance() {
    let c = cluster(&[("a", 2.0), ("b", 1.0), ("c", 1.0)]);
    let r = c.plan_job(&request(800, Policy::EqualSplit), 1.0).unwrap();
    assert_eq!(
        allotments(&r),
        vec![("a".into(), 267), ("b".into(), 267), ("c".into(), 266)]
    );
}

#[test]
fn stale_providers_are_skipped() {
    let mut c = cluster(&[("a", 1.0), ("b", 1.0)]);
    let window = c.config().staleness_window;
    beat(&mut c, "b", window, 1.0);
    let r = c.plan_job(&request(10, Policy::Homogenized), window + 0.5).unwrap();
    assert_eq!(allotments(&r), vec![("b".into(), 10)]);
    assert!(matches!(
        c.plan_job(&request(10, Policy::Homogenized), 10.0 * window),
        Err(Error::NoProviders(_))
    ));
}

#[test]
fn fully_loaded_provider_falls_below_the_floor() {
    let mut c = cluster(&[("a", 1.0)]);
    c.register_provider(id("busy"), ep(8), matmul()).unwrap();
    c.ingest_heartbeat(PerformanceSample::new(id("busy"), 0.0, 5.0, 1.0).unwrap())
        .unwrap();
    let r = c.plan_job(&request(10, Policy::Homogenized), 1.0).unwrap();
    assert_eq!(allotments(&r), vec![("a".into(), 10)]);
}

#[test]
fn status_reports_every_entry() {
    let mut c = cluster(&[("a", 2.0)]);
    c.register_provider(id("new"), ep(5), matmul()).unwrap();
    c.record_round_trip(&id("a"), 0.25);
    let s = c.status(1.5);
    assert_eq!(s.len(), 2);
    assert_eq!(s[0].provider, id("a"));
    assert_eq!(s[0].performance, Some(2.0));
    assert_eq!(s[0].last_seen_age, Some(1.5));
    assert_eq!(s[0].round_trip, Some(0.25));
    assert!(s[0].fresh);
    assert_eq!(s[1].performance, None);
    assert!(!s[1].fresh);
}

#[test]
fn config_reads_key_value_files() {
    let kv = KvFile::parse("heartbeat_interval = 0.5\nhalf_life = 10\n").unwrap();
    let cfg = CoordinatorConfig::from_kv(&kv).unwrap();
    assert_eq!(cfg.heartbeat_interval, 0.5);
    assert_eq!(cfg.staleness_window, 1.5);
    assert_eq!(cfg.ewma.half_life, 10.0);
    assert!(CoordinatorConfig::from_kv(&KvFile::parse("nonsense = 1").unwrap()).is_err());
    assert!(CoordinatorConfig::from_kv(&KvFile::parse("heartbeat_interval = -1").unwrap()).is_err());
}

#[test]
fn snapshot_restores_registrations() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("registry.json");
    let cfg = CoordinatorConfig {
        snapshot_path: Some(path.clone()),
        ..Default::default()
    };
    let mut c = Coordinator::new(cfg.clone()).unwrap();
    c.register_provider(id("a"), ep(11), matmul()).unwrap();
    c.register_provider(id("b"), ep(12), vec!["matmul".to_owned(), "other".to_owned()])
        .unwrap();
    let restored = Coordinator::new(cfg).unwrap();
    assert_eq!(restored.table().len(), 2);
    let b = restored.table().get(&id("b")).unwrap();
    assert_eq!(b.endpoint, ep(12));
    assert!(b.services.contains("other"));
    assert!(b.history.is_empty());
}

#[derive(Default)]
struct MockOutbox {
    unreachable: BTreeSet<ProviderId>,
    reached: Vec<ProviderId>,
    delivered: Vec<(ProviderId, Message)>,
    replies: Vec<Message>,
}

impl Outbox for MockOutbox {
    fn reach(&mut self, provider: &ProviderId, _: &Endpoint) -> Result<Option<f64>> {
        self.reached.push(provider.clone());
        if self.unreachable.contains(provider) {
            Err(Error::ChannelClosed)
        } else {
            Ok(Some(0.001))
        }
    }

    fn deliver(&mut self, provider: &ProviderId, message: Message) -> Result<()> {
        self.delivered.push((provider.clone(), message));
        Ok(())
    }

    fn reply(&mut self, message: Message) -> Result<()> {
        self.replies.push(message);
        Ok(())
    }
}

fn sub_ranges(out: &MockOutbox) -> Vec<(String, RowRangeTuple)> {
    out.delivered
        .iter()
        .map(|(p, m)| match &m.body {
            Body::SubRequest {
                range, block, client, ..
            } => {
                assert_eq!(block.rows(), range.len());
                assert_eq!(client, &ep(9000));
                (p.to_string(), (range.start, range.end))
            }
            other => panic!("unexpected {other:?}"),
        })
        .collect()
}

type RowRangeTuple = (usize, usize);

#[test]
fn dispatch_sends_sub_requests_then_acceptance() {
    let c = cluster(&[("a", 2.0), ("b", 1.0), ("c", 1.0)]);
    let req = request(800, Policy::Homogenized);
    let record = c.plan_job(&req, 1.0).unwrap();
    let mut out = MockOutbox::default();
    let outcome = dispatch(&c, &req, record, &mut out).unwrap();
    assert_eq!(
        sub_ranges(&out),
        vec![
            ("a".into(), (0, 400)),
            ("b".into(), (400, 600)),
            ("c".into(), (600, 800))
        ]
    );
    assert_eq!(out.replies.len(), 1);
    match &out.replies[0].body {
        Body::JobAccepted { participants, .. } => assert_eq!(participants.len(), 3),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(outcome.round_trips.len(), 3);
    // The blocks carry the right rows of the first operand.
    let (_, msg) = &out.delivered[1];
    if let Body::SubRequest { block, .. } = &msg.body {
        assert_eq!(block, &req.first.row_block(RowRange::new(400, 600).unwrap()).unwrap());
    }
}

#[test]
fn zero_allotment_gets_no_sub_request() {
    let c = cluster(&[("a", 1000.0), ("b", 1.0)]);
    let req = request(3, Policy::Homogenized);
    let record = c.plan_job(&req, 1.0).unwrap();
    assert_eq!(record.plan.allotment(&id("b")), Some(0));
    let mut out = MockOutbox::default();
    dispatch(&c, &req, record, &mut out).unwrap();
    assert_eq!(sub_ranges(&out), vec![("a".into(), (0, 3))]);
    assert_eq!(out.reached, vec![id("a")]);
}

#[test]
fn unreachable_provider_triggers_one_replan() {
    let c = cluster(&[("a", 2.0), ("b", 1.0), ("c", 1.0)]);
    let req = request(800, Policy::Homogenized);
    let record = c.plan_job(&req, 1.0).unwrap();
    let mut out = MockOutbox {
        unreachable: [id("b")].into(),
        ..Default::default()
    };
    let outcome = dispatch(&c, &req, record, &mut out).unwrap();
    assert_eq!(sub_ranges(&out), vec![("a".into(), (0, 533)), ("c".into(), (533, 800))]);
    assert_eq!(outcome.record.plan.len(), 2);
    assert!(matches!(out.replies[0].body, Body::JobAccepted { .. }));
}

#[test]
fn second_failure_fails_the_job() {
    let c = cluster(&[("a", 2.0), ("b", 1.0), ("c", 1.0)]);
    let req = request(800, Policy::Homogenized);
    let record = c.plan_job(&req, 1.0).unwrap();
    let mut out = MockOutbox {
        unreachable: [id("a"), id("b"), id("c")].into(),
        ..Default::default()
    };
    let err = dispatch(&c, &req, record, &mut out).unwrap_err();
    assert!(matches!(err, Error::JobFailed { job_id: 42, .. }));
    assert!(out.delivered.is_empty());
    match &out.replies[0].body {
        Body::Error { code, .. } => assert_eq!(code, "JobFailed"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn replan_that_loses_a_second_provider_fails() {
    struct Flaky(MockOutbox, usize);
    impl Outbox for Flaky {
        fn reach(&mut self, p: &ProviderId, e: &Endpoint) -> Result<Option<f64>> {
            self.1 += 1;
            // b fails the first round, c fails the second.
            let fail = (self.1 <= 3 && p.as_str() == "b") || (self.1 > 3 && p.as_str() == "c");
            if fail {
                Err(Error::ChannelClosed)
            } else {
                self.0.reach(p, e)
            }
        }
        fn deliver(&mut self, p: &ProviderId, m: Message) -> Result<()> {
            self.0.deliver(p, m)
        }
        fn reply(&mut self, m: Message) -> Result<()> {
            self.0.reply(m)
        }
    }
    let c = cluster(&[("a", 2.0), ("b", 1.0), ("c", 1.0)]);
    let req = request(800, Policy::Homogenized);
    let record = c.plan_job(&req, 1.0).unwrap();
    let mut out = Flaky(MockOutbox::default(), 0);
    assert!(matches!(
        dispatch(&c, &req, record, &mut out),
        Err(Error::JobFailed { .. })
    ));
    assert!(out.0.delivered.is_empty());
}

#[test]
fn dispatched_ranges_partition_the_rows() {
    let c = cluster(&[("a", 3.7), ("b", 1.3), ("c", 0.4), ("d", 2.2)]);
    for rows in [1usize, 2, 5, 17, 333] {
        for policy in [Policy::Homogenized, Policy::EqualSplit] {
            let req = request(rows, policy);
            let record = c.plan_job(&req, 1.0).unwrap();
            let mut out = MockOutbox::default();
            dispatch(&c, &req, record, &mut out).unwrap();
            let mut next = 0;
            for (_, (start, end)) in sub_ranges(&out) {
                assert_eq!(start, next);
                assert!(end > start);
                next = end;
            }
            assert_eq!(next, rows);
        }
    }
}

#[test]
fn plan_does_not_depend_on_registration_order() {
    let speeds = [("a", 3.0), ("b", 1.5), ("c", 1.5), ("d", 0.7)];
    let forward = cluster(&speeds);
    let mut reversed_speeds = speeds;
    reversed_speeds.reverse();
    let mut backward = Coordinator::new(CoordinatorConfig::default()).unwrap();
    for (who, speed) in reversed_speeds {
        let port = speeds.iter().position(|(w, _)| *w == who).unwrap() as u16 + 1;
        backward.register_provider(id(who), ep(port), matmul()).unwrap();
        beat(&mut backward, who, 0.0, speed);
    }
    let req = request(101, Policy::Homogenized);
    assert_eq!(
        forward.plan_job(&req, 1.0).unwrap(),
        backward.plan_job(&req, 1.0).unwrap()
    );
}
