//! End-to-end pipeline checks on the branching ISP fixture and the bundled
//! backbone: implant a deviation, scan, and confirm the verdict names the
//! right device with the right kind.

use std::collections::BTreeSet;

use pathwarden::detection::{
    estimate_congestion, scan_for_attacks, CongestionEstimator, DetectionConfig, VerdictKind,
};
use pathwarden::netmodel::{build_state, DeviceId, PortId};
use pathwarden::sim::experiment::{AttackMix, Experiment, ExperimentConfig};
use pathwarden::sim::{topo, Activation, AttackImplant, ImplantAction, ImplantScope, Network};
use pathwarden::trajectory::LabelConfig;

fn fixture() -> (Network, pathwarden::netmodel::NetworkSnapshot) {
    let (t, r, _) = topo::branching_isp();
    let state = build_state(&t, &r).unwrap();
    let mut net = Network::new(state, 1, 1_000_000, LabelConfig::default());
    let snap = net.snapshot();
    (net, snap)
}

fn det() -> DetectionConfig {
    DetectionConfig { probe_seed: 11, ..DetectionConfig::default() }
}

#[test]
fn benign_fixture_scans_clean() {
    let (mut net, snap) = fixture();
    let cfg = det();
    let est = CongestionEstimator::clean(&cfg);
    for target in snap.devices.keys() {
        let outcome =
            scan_for_attacks(&snap, target, PortId(0), &mut net, &est, &cfg, 1).unwrap();
        for v in &outcome.verdicts {
            assert_eq!(v.kind, VerdictKind::Benign, "target {target}: {v:?}");
        }
    }
}

#[test]
fn replay_side_path_flags_the_replicating_device() {
    let (mut net, snap) = fixture();
    net.implant(AttackImplant::single(
        DeviceId::new("b"),
        ImplantAction::Replay { to: DeviceId::new("f") },
        ImplantScope::AllPackets,
        Activation::Always,
    ))
    .unwrap();
    let cfg = det();
    let est = CongestionEstimator::clean(&cfg);
    let outcome =
        scan_for_attacks(&snap, &DeviceId::new("a"), PortId(0), &mut net, &est, &cfg, 1).unwrap();
    let flagged: Vec<_> = outcome
        .verdicts
        .iter()
        .filter(|v| v.kind != VerdictKind::Benign)
        .collect();
    assert!(!flagged.is_empty(), "the replicated copy must be noticed");
    for v in &flagged {
        assert_eq!(v.kind, VerdictKind::Replay, "{v:?}");
        assert_eq!(v.malicious_devices, BTreeSet::from([DeviceId::new("b")]), "{v:?}");
    }
}

#[test]
fn mid_path_drop_localizes_to_the_dropper() {
    let (mut net, snap) = fixture();
    net.implant(AttackImplant::single(
        DeviceId::new("c"),
        ImplantAction::Drop { selectivity: 1.0 },
        ImplantScope::AllPackets,
        Activation::Always,
    ))
    .unwrap();
    let cfg = det();
    let est = CongestionEstimator::clean(&cfg);
    let outcome =
        scan_for_attacks(&snap, &DeviceId::new("a"), PortId(0), &mut net, &est, &cfg, 1).unwrap();
    let drops: Vec<_> = outcome
        .verdicts
        .iter()
        .filter(|v| v.kind == VerdictKind::Drop)
        .collect();
    assert!(!drops.is_empty());
    for v in &drops {
        assert_eq!(v.malicious_devices, BTreeSet::from([DeviceId::new("c")]), "{v:?}");
    }
    // No other device is blamed by any verdict.
    for v in &outcome.verdicts {
        if v.kind != VerdictKind::Benign {
            assert_eq!(v.malicious_devices, BTreeSet::from([DeviceId::new("c")]));
        }
    }
}

#[test]
fn misroute_delay_generation_each_get_their_kind() {
    // Misroute at c toward i's port for traffic that should go via d.
    let (mut net, snap) = fixture();
    let to_b = snap
        .links
        .iter()
        .find(|((a, _), (b, _))| a.as_str() == "c" && b.as_str() == "b")
        .map(|((_, p), _)| *p)
        .unwrap();
    net.implant(AttackImplant::single(
        DeviceId::new("c"),
        ImplantAction::Misroute { to: to_b },
        ImplantScope::AllPackets,
        Activation::Always,
    ))
    .unwrap();
    let cfg = det();
    let est = CongestionEstimator::clean(&cfg);
    let outcome =
        scan_for_attacks(&snap, &DeviceId::new("a"), PortId(0), &mut net, &est, &cfg, 1).unwrap();
    let kinds: BTreeSet<VerdictKind> = outcome
        .verdicts
        .iter()
        .filter(|v| v.kind != VerdictKind::Benign)
        .map(|v| v.kind)
        .collect();
    assert!(kinds.contains(&VerdictKind::Misroute), "got {kinds:?}");

    // Delay at d, far beyond the 2ms floor.
    let (mut net, snap) = fixture();
    net.implant(AttackImplant::single(
        DeviceId::new("d"),
        ImplantAction::Delay { amount: 50_000_000 },
        ImplantScope::AllPackets,
        Activation::Always,
    ))
    .unwrap();
    let est = CongestionEstimator::clean(&cfg);
    let outcome =
        scan_for_attacks(&snap, &DeviceId::new("a"), PortId(0), &mut net, &est, &cfg, 1).unwrap();
    let delays: Vec<_> = outcome
        .verdicts
        .iter()
        .filter(|v| v.kind == VerdictKind::Delay)
        .collect();
    assert!(!delays.is_empty());
    for v in &delays {
        assert_eq!(v.malicious_devices, BTreeSet::from([DeviceId::new("d")]), "{v:?}");
    }

    // Generation at c rewriting the destination toward g.
    let (mut net, snap) = fixture();
    net.implant(AttackImplant::single(
        DeviceId::new("c"),
        ImplantAction::Generate {
            rewrite: pathwarden::header::HeaderPattern::parse("0111xxxx").unwrap(),
        },
        ImplantScope::AllPackets,
        Activation::Always,
    ))
    .unwrap();
    let est = CongestionEstimator::clean(&cfg);
    let outcome =
        scan_for_attacks(&snap, &DeviceId::new("a"), PortId(0), &mut net, &est, &cfg, 1).unwrap();
    let gens: Vec<_> = outcome
        .verdicts
        .iter()
        .filter(|v| v.kind == VerdictKind::Generation)
        .collect();
    assert!(!gens.is_empty(), "verdicts: {:?}", outcome.verdicts.iter().map(|v| v.kind).collect::<Vec<_>>());
    for v in &gens {
        assert_eq!(v.malicious_devices, BTreeSet::from([DeviceId::new("c")]), "{v:?}");
    }
}

#[test]
fn stale_snapshot_aborts_the_scan() {
    let (mut net, snap) = fixture();
    // Mutate the live state after taking the snapshot.
    net.state
        .install_rules(&DeviceId::new("g"), vec![])
        .unwrap();
    let cfg = det();
    let est = CongestionEstimator::clean(&cfg);
    let err = scan_for_attacks(&snap, &DeviceId::new("a"), PortId(0), &mut net, &est, &cfg, 1)
        .unwrap_err();
    assert!(matches!(
        err,
        pathwarden::detection::DetectError::StaleSnapshot { .. }
    ));
}

#[test]
fn congestion_calibration_keeps_single_losses_demoted() {
    // Congested fixture, no implants: scans stay benign because drops on
    // calibrated paths demote and never confirm.
    let (t, r, _) = topo::branching_isp();
    let state = build_state(&t, &r).unwrap();
    let mut net = Network::new(state, 5, 1_000_000, LabelConfig::default());
    net.set_congestion(Some(pathwarden::sim::CongestionModel {
        drop_rate: 0.02,
        max_jitter: 150_000,
    }));
    let snap = net.snapshot();
    let cfg = det();

    // Calibration: run traffic through every pair a few times.
    let mut units = Vec::new();
    for unit in 0..4u64 {
        let start = net.observations().len();
        for (i, dst) in ["a", "b", "c", "c1", "d", "e", "f", "g", "i"].iter().enumerate() {
            for (j, src) in ["a", "b", "c", "c1", "d", "e", "f", "g", "i"].iter().enumerate() {
                if src == dst {
                    continue;
                }
                for k in 0..3u16 {
                    let fields = pathwarden::trajectory::PacketHeaderFields {
                        src_addr: (unit as u32) << 16 | (i as u32) << 8 | j as u32,
                        dst_addr: 0,
                        protocol: 6,
                        ip_id: k,
                        src_port: 1000 + k,
                        dst_port: 80,
                        ttl: 64,
                    }
                    .with_forwarding_bits(topo::branching_isp_dst_bits(dst), 8);
                    net.inject(&DeviceId::new(*src), PortId(0), fields);
                    net.run_until_idle();
                    net.advance_clock(500_000);
                }
            }
        }
        units.push(net.observations()[start..].to_vec());
    }
    let est = estimate_congestion(&snap, &units, &cfg);

    let mut nonbenign = 0;
    for target in snap.devices.keys() {
        let outcome =
            scan_for_attacks(&snap, target, PortId(0), &mut net, &est, &cfg, 1).unwrap();
        nonbenign += outcome
            .verdicts
            .iter()
            .filter(|v| v.kind != VerdictKind::Benign)
            .count();
    }
    assert_eq!(nonbenign, 0, "benign congestion must not raise verdicts");
}

#[test]
fn aarnet_experiment_detects_a_standard_mix() {
    let mut cfg = ExperimentConfig::named("aarnet");
    cfg.seed = 21;
    cfg.flows = 150;
    cfg.attacks = Some(AttackMix::standard(10));
    let mut exp = Experiment::new(cfg).unwrap();
    let implants = exp.implant_configured_attacks().unwrap();
    assert_eq!(implants.len(), 10);
    let report = exp.run().unwrap();
    let metrics = report.final_metrics();
    assert_eq!(metrics.implanted, 10);
    assert_eq!(metrics.reachable, 10, "all planned implants act");
    assert_eq!(
        metrics.detected, 10,
        "missed: {:?}",
        metrics.per_attack.iter().filter(|a| !a.detected).collect::<Vec<_>>()
    );
    assert_eq!(metrics.false_positives, 0);
}
