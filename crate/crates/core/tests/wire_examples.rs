//! Golden frames. The same bytes appear in docs/protocol.md.

use homogen::matmul::{Matrix, RowRange};
use homogen::scheduler::ProviderId;
use homogen::transport::{decode, encode, Body, Endpoint, Message, Participant, Policy, ProviderStatus};

fn ep(port: u16) -> Endpoint {
    Endpoint::new("10.0.0.2", port).unwrap()
}

fn examples() -> Vec<(&'static str, Message)> {
    let m2 = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
    vec![
        (
            "register",
            Message::new(
                0,
                "p1",
                Body::Register {
                    endpoint: ep(7701),
                    services: vec!["matmul".into()],
                },
            ),
        ),
        (
            "register_ack",
            Message::new(
                0,
                "coordinator",
                Body::RegisterAck {
                    heartbeat_interval: 2.0,
                    staleness_window: 6.0,
                },
            ),
        ),
        (
            "heartbeat",
            Message::new(
                0,
                "p1",
                Body::Heartbeat {
                    raw_speed: 1.0,
                    load_factor: 0.0,
                },
            ),
        ),
        (
            "job_request",
            Message::new(
                7,
                "client",
                Body::JobRequest {
                    workload: "matmul".into(),
                    policy: Policy::Homogenized,
                    reply: ep(7800),
                    first: m2.clone(),
                    second_cols: 2,
                },
            ),
        ),
        (
            "job_accepted",
            Message::new(
                7,
                "coordinator",
                Body::JobAccepted {
                    predicted_finish: 0.5,
                    participants: vec![Participant {
                        provider: ProviderId::new("p1"),
                        endpoint: ep(7701),
                        range: RowRange::new(0, 2).unwrap(),
                        performance: 1.0,
                    }],
                },
            ),
        ),
        (
            "sub_request",
            Message::new(
                7,
                "coordinator",
                Body::SubRequest {
                    workload: "matmul".into(),
                    range: RowRange::new(0, 1).unwrap(),
                    first_rows: 2,
                    client: ep(7800),
                    block: Matrix::from_rows(&[&[1.0, 2.0]]).unwrap(),
                },
            ),
        ),
        (
            "broadcast_operand",
            Message::new(
                7,
                "client",
                Body::BroadcastOperand {
                    operand: Matrix::identity(2),
                },
            ),
        ),
        (
            "partial_result",
            Message::new(
                7,
                "p1",
                Body::PartialResult {
                    range: RowRange::new(0, 1).unwrap(),
                    compute_seconds: 0.25,
                    block: Matrix::from_rows(&[&[1.0, 2.0]]).unwrap(),
                },
            ),
        ),
        (
            "error",
            Message::new(
                7,
                "p1",
                Body::Error {
                    code: "OperandTimeout".into(),
                    detail: "late".into(),
                },
            ),
        ),
        ("status_query", Message::new(0, "ops", Body::StatusQuery)),
        (
            "status_report",
            Message::new(
                0,
                "coordinator",
                Body::StatusReport {
                    providers: vec![ProviderStatus {
                        provider: ProviderId::new("p1"),
                        endpoint: ep(7701),
                        services: vec!["matmul".into()],
                        performance: Some(1.0),
                        last_seen_age: Some(0.5),
                        round_trip: None,
                        fresh: true,
                    }],
                },
            ),
        ),
    ]
}

const GOLDEN: &[(&str, &str)] = &[
    (
        "register",
        "0000002301000000000000000000027031000831302e302e302e321e15000100066d61746d756c",
    ),
    (
        "register_ack",
        "00000026020000000000000000000b636f6f7264696e61746f7240000000000000004018000000000000",
    ),
    (
        "heartbeat",
        "0000001d030000000000000000000270313ff00000000000000000000000000000",
    ),
    (
        "job_request",
        "000000520400000000000000070006636c69656e7400066d61746d756c00000831302e302e302e321e780000000200000002000000023ff0000000000000400000000000000040080000000000004010000000000000",
    ),
    (
        "job_accepted",
        "0000004a080000000000000007000b636f6f7264696e61746f723fe00000000000000000000100027031000831302e302e302e321e15000000000000000000000000000000023ff0000000000000",
    ),
    (
        "sub_request",
        "0000005a050000000000000007000b636f6f7264696e61746f7200066d61746d756c000000000000000000000000000000010000000000000002000831302e302e302e321e7800000001000000023ff00000000000004000000000000000",
    ),
    (
        "broadcast_operand",
        "000000390600000000000000070006636c69656e7400000002000000023ff0000000000000000000000000000000000000000000003ff0000000000000",
    ),
    (
        "partial_result",
        "0000003d07000000000000000700027031000000000000000000000000000000013fd000000000000000000001000000023ff00000000000004000000000000000",
    ),
    (
        "error",
        "0000002509000000000000000700027031000e4f706572616e6454696d656f7574000000046c617465",
    ),
    (
        "status_query",
        "0000000e0a000000000000000000036f7073",
    ),
    (
        "status_report",
        "000000480b0000000000000000000b636f6f7264696e61746f720000000100027031000831302e302e302e321e15000100066d61746d756c013ff0000000000000013fe00000000000000001",
    ),
];

#[test]
fn frames_match_the_documented_bytes() {
    let ex = examples();
    assert_eq!(ex.len(), GOLDEN.len());
    for ((name, m), (gname, ghex)) in ex.iter().zip(GOLDEN) {
        assert_eq!(name, gname);
        let bytes = encode(m).unwrap();
        assert_eq!(hex(&bytes), *ghex, "{name}");
        assert_eq!(&decode(&bytes).unwrap(), m, "{name}");
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
