mod common;

use std::time::Duration;

use common::TestBroker;
use mqttz_core::bench::workload::{DutyCycle, EcgWorkloadPlan, WorkloadTarget};
use mqttz_core::bench::{run_ecg_workload, BenchError, Profile};
use mqttz_core::client::TransportSecurity;

fn target(b: &TestBroker) -> WorkloadTarget {
    WorkloadTarget { broker: b.addr.to_string(), tee_public: b.tee_public(), security: TransportSecurity::Plaintext }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn one_publisher_stream_arrives_intact() {
    let b = TestBroker::start("* pubsub ecg/#\n").await;
    for profile in [Profile::Paper, Profile::Raw] {
        let plan = EcgWorkloadPlan {
            publishers: 1,
            duty: DutyCycle::AlwaysOn,
            duration: Duration::from_secs(10),
            drain: Duration::from_secs(2),
            ..EcgWorkloadPlan::for_profile(profile)
        };
        let report = run_ecg_workload(&plan, &target(&b)).await.unwrap();
        let stats = &report.publishers[0].1;
        assert_eq!(stats.batches_sent, 10);
        assert_eq!(stats.received, vec![(10, stats.plain_bytes)]);
        assert!(report.passed(), "{}", report.summary());
        let per_batch = stats.wire_bytes / stats.batches_sent;
        println!("{profile}: {per_batch} wire bytes per batch");
        match profile {
            Profile::Paper => assert!(per_batch <= 350, "{per_batch}"),
            Profile::Raw => assert!(per_batch > 642, "{per_batch}"),
        }
    }
    b.stop().await;
}

#[tokio::test]
async fn unreachable_broker_is_reported() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let plan = EcgWorkloadPlan { publishers: 1, duration: Duration::from_secs(10), ..EcgWorkloadPlan::paper() };
    let t = WorkloadTarget { broker: addr.to_string(), tee_public: [0; 32], security: TransportSecurity::Plaintext };
    assert!(matches!(run_ecg_workload(&plan, &t).await, Err(BenchError::BrokerUnreachable(_))));
}

#[tokio::test]
async fn wrong_identity_is_a_handshake_failure() {
    let b = TestBroker::start("* pubsub ecg/#\n").await;
    let plan = EcgWorkloadPlan { publishers: 1, duration: Duration::from_secs(10), ..EcgWorkloadPlan::paper() };
    let t = WorkloadTarget { tee_public: [7; 32], ..target(&b) };
    assert!(matches!(run_ecg_workload(&plan, &t).await, Err(BenchError::HandshakeFailure(_))));
    b.stop().await;
}
