//! Equivalence checking of the symbolic header-space engine against an
//! independent oracle: simulate every concrete header through the network
//! one at a time and compare reachability and trajectories exactly.
//!
//! The oracle shares nothing with the symbolic path but the flow-table
//! lookup semantics themselves; it walks single headers hop by hop, stopping
//! at the first device revisit exactly where the symbolic engine prunes, so
//! the two sides must agree bit for bit on loop-free reachability.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::header::HeaderPattern;
use crate::hsa;
use crate::netmodel::{
    build_state, DeviceId, DeviceRules, FlowRule, NetworkSnapshot, PortId, RuleAction, RulesFile,
    TopologyDevice, TopologyFile, TopologyLink,
};
use crate::sim::rulegen::generate_rules;

/// One concrete header walked hop by hop. Returns the device sequence
/// (source first) and whether the walk ended by revisiting a device.
pub fn concrete_walk(
    snap: &NetworkSnapshot,
    src: &DeviceId,
    port: PortId,
    header: u128,
) -> (Vec<DeviceId>, bool) {
    let mut path = vec![src.clone()];
    let mut here = src.clone();
    let mut in_port = port;
    let mut h = header;
    loop {
        let Some(device) = snap.device(&here) else {
            return (path, false);
        };
        let Some(rule) = device.lookup(h, in_port) else {
            return (path, false); // table miss: default drop
        };
        match &rule.action {
            RuleAction::Drop => return (path, false),
            RuleAction::ToController => {
                path.push(DeviceId::controller());
                return (path, false);
            }
            RuleAction::Flood => {
                // Flood is excluded from oracle-generated networks; a walk
                // cannot follow more than one copy.
                return (path, false);
            }
            RuleAction::Forward(p) => {
                if let Some(rw) = &rule.rewrite {
                    h = rw.rewrite_header(h);
                }
                let Some((next, next_port)) = snap.link_peer(&here, *p) else {
                    return (path, false); // delivered out of an edge port
                };
                if path.contains(next) {
                    return (path, true); // loop: stop where the symbolic engine prunes
                }
                path.push(next.clone());
                here = next.clone();
                in_port = *next_port;
            }
        }
    }
}

/// Outcome of checking one network exhaustively.
#[derive(Debug, Clone, Serialize)]
pub struct CaseOutcome {
    pub name: String,
    pub devices: usize,
    pub header_bits: u16,
    pub pairs_checked: usize,
    pub headers_walked: u64,
    pub loops_seen: usize,
    pub mismatches: Vec<String>,
}

impl CaseOutcome {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Exhaustively compare `expected_trajectories` with per-header simulation
/// for every ordered device pair of the snapshot.
pub fn check_network(snap: &NetworkSnapshot, name: &str) -> CaseOutcome {
    let width = snap.header_bits;
    let header_count: u128 = 1 << width;
    let mut outcome = CaseOutcome {
        name: name.to_string(),
        devices: snap.device_count(),
        header_bits: width,
        pairs_checked: 0,
        headers_walked: 0,
        loops_seen: 0,
        mismatches: Vec::new(),
    };

    for src in snap.devices.keys() {
        // Oracle: walk every header once from this source.
        let mut reach: BTreeMap<DeviceId, BTreeMap<u128, Vec<DeviceId>>> = BTreeMap::new();
        for h in 0..header_count {
            outcome.headers_walked += 1;
            let (walk, looped) = concrete_walk(snap, src, PortId(0), h);
            if looped {
                outcome.loops_seen += 1;
            }
            for (i, d) in walk.iter().enumerate().skip(1) {
                reach.entry(d.clone()).or_default().insert(h, walk[..=i].to_vec());
            }
        }

        let symbolic = match hsa::propagate(snap, src, PortId(0)) {
            Ok(map) => map,
            Err(e) => {
                outcome.mismatches.push(format!("{src}: propagate failed: {e}"));
                continue;
            }
        };

        let mut dsts: BTreeSet<DeviceId> =
            snap.devices.keys().filter(|d| *d != src).cloned().collect();
        dsts.insert(DeviceId::controller());
        for dst in dsts {
            outcome.pairs_checked += 1;
            let (space, trajectories) = symbolic.to_destination(&dst);
            let oracle = reach.get(&dst).cloned().unwrap_or_default();
            for h in 0..header_count {
                let sym_hit = space.matches(h);
                let ora_hit = oracle.contains_key(&h);
                if sym_hit != ora_hit {
                    outcome.mismatches.push(format!(
                        "{src}→{dst} header {h:0w$b}: symbolic={sym_hit} oracle={ora_hit}",
                        w = width as usize
                    ));
                    continue;
                }
                if !ora_hit {
                    continue;
                }
                // The unique symbolic trajectory carrying this header must
                // be the oracle's truncated walk.
                let carrying: Vec<&hsa::ExpectedTrajectory> = trajectories
                    .iter()
                    .filter(|t| t.injected_space.matches(h))
                    .collect();
                if carrying.len() != 1 {
                    outcome.mismatches.push(format!(
                        "{src}→{dst} header {h:0w$b}: {} symbolic trajectories claim it",
                        carrying.len(),
                        w = width as usize
                    ));
                    continue;
                }
                if carrying[0].devices != oracle[&h] {
                    outcome.mismatches.push(format!(
                        "{src}→{dst} header {h:0w$b}: symbolic path {:?} oracle path {:?}",
                        carrying[0].devices,
                        oracle[&h],
                        w = width as usize
                    ));
                }
            }
            // Path sets must coincide exactly.
            let sym_paths: BTreeSet<Vec<DeviceId>> =
                trajectories.iter().map(|t| t.devices.clone()).collect();
            let ora_paths: BTreeSet<Vec<DeviceId>> = oracle.values().cloned().collect();
            if sym_paths != ora_paths {
                outcome.mismatches.push(format!(
                    "{src}→{dst}: symbolic paths {sym_paths:?} vs oracle {ora_paths:?}"
                ));
            }
        }
    }
    outcome
}

/// Deterministic random connected topology: a spanning tree plus extra
/// chords.
fn random_topology(rng: &mut ChaCha8Rng, devices: usize) -> TopologyFile {
    let names: Vec<String> = (0..devices).map(|i| format!("v{i}")).collect();
    let mut links: Vec<(usize, usize)> = Vec::new();
    for i in 1..devices {
        links.push((rng.gen_range(0..i), i));
    }
    let extra = rng.gen_range(0..=devices / 2);
    for _ in 0..extra {
        let a = rng.gen_range(0..devices);
        let b = rng.gen_range(0..devices);
        if a != b && !links.contains(&(a, b)) && !links.contains(&(b, a)) {
            links.push((a, b));
        }
    }
    let mut port_next = vec![1u16; devices];
    let mut topo_links = Vec::new();
    for (a, b) in links {
        topo_links.push(TopologyLink(names[a].clone(), port_next[a], names[b].clone(), port_next[b]));
        port_next[a] += 1;
        port_next[b] += 1;
    }
    TopologyFile {
        devices: names
            .iter()
            .enumerate()
            .map(|(i, n)| TopologyDevice { id: n.clone(), ports: port_next[i] })
            .collect(),
        links: topo_links,
        hosts: vec![],
    }
}

/// Adversarial rules: random overlapping wildcard matches, shadowing
/// priorities, port-constrained entries, drops and controller punts.
fn random_rules(rng: &mut ChaCha8Rng, topo: &TopologyFile, width: u16) -> RulesFile {
    let mut tables = Vec::new();
    for dev in &topo.devices {
        let n = rng.gen_range(1..=6);
        let mut rules = Vec::new();
        for _ in 0..n {
            let mut mask = 0u128;
            let mut value = 0u128;
            for bit in 0..width {
                match rng.gen_range(0..3) {
                    0 => {}
                    1 => mask |= 1 << bit,
                    _ => {
                        mask |= 1 << bit;
                        value |= 1 << bit;
                    }
                }
            }
            let pattern = HeaderPattern::from_bits(width, value, mask);
            let action = match rng.gen_range(0..10) {
                0 => RuleAction::Drop,
                1 => RuleAction::ToController,
                _ => RuleAction::Forward(PortId(rng.gen_range(0..dev.ports))),
            };
            let in_port = if rng.gen_bool(0.2) {
                Some(PortId(rng.gen_range(0..dev.ports)))
            } else {
                None
            };
            rules.push(FlowRule {
                priority: rng.gen_range(0..8),
                pattern,
                in_port,
                action,
                rewrite: None,
            });
        }
        tables.push(DeviceRules { device: dev.id.clone(), rules });
    }
    RulesFile { header_bits: width, tables }
}

#[derive(Debug, Serialize)]
pub struct SuiteReport {
    pub cases: Vec<CaseOutcome>,
}

impl SuiteReport {
    pub fn all_ok(&self) -> bool {
        self.cases.iter().all(|c| c.ok())
    }

    pub fn total_headers(&self) -> u64 {
        self.cases.iter().map(|c| c.headers_walked).sum()
    }
}

/// Run the oracle-equivalence suite: half routing-style generated networks,
/// half adversarial random rule tables, every network at most `max_devices`
/// devices and `header_bits` wide.
pub fn run_suite(max_devices: usize, header_bits: u16, cases: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0eac1e);
    let mut out = Vec::new();
    for case in 0..cases {
        let devices = rng.gen_range(2..=max_devices.max(2));
        let width = rng.gen_range(3..=header_bits.max(3));
        let topo = random_topology(&mut rng, devices);
        let (rules, kind) = if case % 2 == 0 {
            let prefixes = rng.gen_range(1..=(1usize << (width.min(4) - 1)));
            match generate_rules(&topo, prefixes, width, rng.gen()) {
                Ok(gen) => (gen.rules, "routing"),
                Err(_) => (random_rules(&mut rng, &topo, width), "adversarial"),
            }
        } else {
            (random_rules(&mut rng, &topo, width), "adversarial")
        };
        let snap = match build_state(&topo, &rules) {
            Ok(mut s) => s.snapshot(),
            Err(e) => {
                out.push(CaseOutcome {
                    name: format!("case-{case}"),
                    devices,
                    header_bits: width,
                    pairs_checked: 0,
                    headers_walked: 0,
                    loops_seen: 0,
                    mismatches: vec![format!("build failed: {e}")],
                });
                continue;
            }
        };
        out.push(check_network(&snap, &format!("case-{case}-{kind}-d{devices}-w{width}")));
    }
    SuiteReport { cases: out }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::topo;

    #[test]
    fn fixture_matches_the_oracle_exactly() {
        let (t, r, _) = topo::branching_isp();
        let snap = build_state(&t, &r).unwrap().snapshot();
        let outcome = check_network(&snap, "branching-isp");
        assert!(outcome.ok(), "{:?}", outcome.mismatches);
        assert!(outcome.pairs_checked > 0);
    }

    #[test]
    fn small_random_suite_is_equivalent() {
        let report = run_suite(5, 8, 6, 42);
        for c in &report.cases {
            assert!(c.ok(), "{}: {:?}", c.name, c.mismatches);
        }
    }

    #[test]
    fn rewrites_stay_equivalent() {
        // Line of three where d1 rewrites the low bits before forwarding.
        let mut topo = topo::line(3);
        topo.hosts.clear();
        let rules = RulesFile {
            header_bits: 4,
            tables: vec![
                DeviceRules {
                    device: "d0".into(),
                    rules: vec![FlowRule {
                        priority: 1,
                        pattern: HeaderPattern::parse("xxxx").unwrap(),
                        in_port: None,
                        action: RuleAction::Forward(PortId(1)),
                        rewrite: None,
                    }],
                },
                DeviceRules {
                    device: "d1".into(),
                    rules: vec![
                        FlowRule {
                            priority: 2,
                            pattern: HeaderPattern::parse("1xxx").unwrap(),
                            in_port: None,
                            action: RuleAction::Forward(PortId(2)),
                            rewrite: Some(HeaderPattern::parse("xx00").unwrap()),
                        },
                        FlowRule {
                            priority: 1,
                            pattern: HeaderPattern::parse("xxxx").unwrap(),
                            in_port: None,
                            action: RuleAction::Drop,
                            rewrite: None,
                        },
                    ],
                },
                DeviceRules {
                    device: "d2".into(),
                    rules: vec![FlowRule {
                        priority: 1,
                        pattern: HeaderPattern::parse("1x00").unwrap(),
                        in_port: None,
                        action: RuleAction::Forward(PortId(0)),
                        rewrite: None,
                    }],
                },
            ],
        };
        let snap = build_state(&topo, &rules).unwrap().snapshot();
        let outcome = check_network(&snap, "rewrite-line");
        assert!(outcome.ok(), "{:?}", outcome.mismatches);
    }
}
