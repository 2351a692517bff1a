#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Duration;

use homogen::coordinator::{self, CoordinatorConfig, CoordinatorHandle};
use homogen::provider::{self, ProviderConfig, ProviderHandle};
use homogen::transport::channel::wait_until;
use homogen::transport::{Endpoint, Network};

pub struct Cluster {
    pub network: Arc<dyn Network>,
    pub coordinator: CoordinatorHandle,
    pub providers: Vec<ProviderHandle>,
}

pub struct ProviderSpec {
    pub calibration: Option<f64>,
    pub slowdown: f64,
}

impl ProviderSpec {
    pub fn fixed(speed: f64) -> Self {
        ProviderSpec {
            calibration: Some(speed),
            slowdown: 1.0,
        }
    }

    pub fn measured(slowdown: f64) -> Self {
        ProviderSpec {
            calibration: None,
            slowdown,
        }
    }
}

pub const HEARTBEAT: f64 = 0.2;

/// Coordinator plus one provider per spec, all on `network`; returns once
/// every provider is eligible for planning.
pub fn start(network: Arc<dyn Network>, specs: &[ProviderSpec]) -> Cluster {
    let coordinator = coordinator::spawn(
        network.clone(),
        &Endpoint::bind_any("127.0.0.1"),
        CoordinatorConfig::with_heartbeat_interval(HEARTBEAT),
    )
    .expect("coordinator starts");
    let mut providers = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        let mut cfg = ProviderConfig::new(
            format!("p{}", i + 1),
            coordinator.endpoint().clone(),
            Endpoint::bind_any("127.0.0.1"),
        );
        cfg.heartbeat_interval = HEARTBEAT;
        cfg.calibration = spec.calibration;
        cfg.slowdown = spec.slowdown;
        cfg.operand_timeout = 10.0;
        providers.push(provider::spawn(network.clone(), cfg).expect("provider starts"));
    }
    let n = specs.len();
    let ready = wait_until(Duration::from_secs(10), || {
        coordinator.with_state(|c, now| c.eligible("matmul", now, &BTreeSet::new()).len() == n)
    });
    assert!(ready, "providers never became eligible");
    Cluster {
        network,
        coordinator,
        providers,
    }
}
