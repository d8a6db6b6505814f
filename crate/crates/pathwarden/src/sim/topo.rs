//! Bundled topologies and test fixtures.
//!
//! Port convention: port 0 of every device is its host/injection edge port;
//! link ports are allocated upward from 1 in declaration order.

use std::collections::BTreeMap;

use crate::header::HeaderPattern;
use crate::netmodel::{
    DeviceRules, FlowRule, PortId, RuleAction, RulesFile, TopologyDevice, TopologyFile,
    TopologyHost, TopologyLink,
};

/// Incrementally builds a topology with automatic port allocation.
pub struct TopoBuilder {
    ports: BTreeMap<String, u16>,
    links: Vec<TopologyLink>,
    order: Vec<String>,
}

impl TopoBuilder {
    pub fn new(devices: &[&str]) -> Self {
        TopoBuilder {
            ports: devices.iter().map(|d| (d.to_string(), 1)).collect(),
            links: Vec::new(),
            order: devices.iter().map(|d| d.to_string()).collect(),
        }
    }

    pub fn link(&mut self, a: &str, b: &str) -> &mut Self {
        let pa = self.alloc(a);
        let pb = self.alloc(b);
        self.links.push(TopologyLink(a.into(), pa, b.into(), pb));
        self
    }

    fn alloc(&mut self, device: &str) -> u16 {
        let p = self
            .ports
            .get_mut(device)
            .unwrap_or_else(|| panic!("undeclared device {device}"));
        let out = *p;
        *p += 1;
        out
    }

    /// Port of `a` on the link toward `b`, if such a link was added.
    pub fn port_toward(&self, a: &str, b: &str) -> Option<u16> {
        self.links.iter().find_map(|TopologyLink(x, px, y, py)| {
            if x == a && y == b {
                Some(*px)
            } else if y == a && x == b {
                Some(*py)
            } else {
                None
            }
        })
    }

    pub fn build(&self) -> TopologyFile {
        TopologyFile {
            devices: self
                .order
                .iter()
                .map(|d| TopologyDevice { id: d.clone(), ports: self.ports[d] })
                .collect(),
            links: self.links.clone(),
            hosts: self
                .order
                .iter()
                .map(|d| TopologyHost { id: format!("h-{d}"), device: d.clone(), port: 0 })
                .collect(),
        }
    }
}

/// Twelve-device Australian backbone: a coastal ring with inland spurs,
/// transcribed at city granularity.
pub fn aarnet() -> TopologyFile {
    let mut b = TopoBuilder::new(&[
        "perth",
        "adelaide",
        "alice",
        "darwin",
        "melbourne",
        "hobart",
        "canberra",
        "sydney",
        "armidale",
        "brisbane",
        "townsville",
        "cairns",
    ]);
    b.link("perth", "adelaide")
        .link("adelaide", "melbourne")
        .link("melbourne", "hobart")
        .link("melbourne", "canberra")
        .link("canberra", "sydney")
        .link("sydney", "armidale")
        .link("armidale", "brisbane")
        .link("sydney", "brisbane")
        .link("brisbane", "townsville")
        .link("townsville", "cairns")
        .link("adelaide", "alice")
        .link("alice", "darwin")
        .link("darwin", "cairns");
    b.build()
}

/// Fifty-four-device research-network-scale topology: a ring with nine
/// deterministic chords, giving mixed degrees and a moderate diameter.
pub fn zib54() -> TopologyFile {
    let names: Vec<String> = (0..54).map(|i| format!("n{i:02}")).collect();
    let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    let mut b = TopoBuilder::new(&refs);
    for i in 0..54 {
        let a = names[i].clone();
        let c = names[(i + 1) % 54].clone();
        b.link(&a, &c);
    }
    for i in (0..54).step_by(6) {
        let a = names[i].clone();
        let c = names[(i + 17) % 54].clone();
        b.link(&a, &c);
    }
    b.build()
}

pub fn line(n: usize) -> TopologyFile {
    let names: Vec<String> = (0..n).map(|i| format!("d{i}")).collect();
    let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    let mut b = TopoBuilder::new(&refs);
    for i in 1..n {
        let a = names[i - 1].clone();
        let c = names[i].clone();
        b.link(&a, &c);
    }
    b.build()
}

pub fn ring(n: usize) -> TopologyFile {
    let names: Vec<String> = (0..n).map(|i| format!("d{i}")).collect();
    let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    let mut b = TopoBuilder::new(&refs);
    for i in 0..n {
        let a = names[i].clone();
        let c = names[(i + 1) % n].clone();
        b.link(&a, &c);
    }
    b.build()
}

pub fn star(leaves: usize) -> TopologyFile {
    let mut names = vec!["hub".to_string()];
    names.extend((0..leaves).map(|i| format!("leaf{i}")));
    let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    let mut b = TopoBuilder::new(&refs);
    for i in 0..leaves {
        let leaf = format!("leaf{i}");
        b.link("hub", &leaf);
    }
    b.build()
}

/// Spine of three transit devices with leaves hanging off each, the shape
/// where trajectory density singles out the transit layer.
pub fn transit_spine() -> TopologyFile {
    let mut b = TopoBuilder::new(&["a", "b", "c", "d", "e", "f", "g", "h", "i"]);
    b.link("a", "b")
        .link("c", "b")
        .link("b", "g")
        .link("g", "d")
        .link("g", "f")
        .link("f", "h")
        .link("f", "i")
        .link("f", "e");
    b.build()
}

/// Nine-device ISP fixture with a deliberate branch and an off-path side
/// link, plus hand-written routes. The control plane routes a → c1 over the
/// spine through c, splitting over d or i on the low header bit; f and g sit
/// off that path but know routes of their own, so a replicated copy handed
/// to f travels f → e on f's own table.
///
/// Returns the topology, the rules (width 8, one /4 prefix per device) and
/// the prefix owner order.
pub fn branching_isp() -> (TopologyFile, RulesFile, Vec<&'static str>) {
    let devices = ["a", "b", "c", "c1", "d", "e", "f", "g", "i"];
    let mut b = TopoBuilder::new(&devices);
    b.link("a", "b")
        .link("b", "c")
        .link("c", "d")
        .link("c", "i")
        .link("d", "e")
        .link("i", "e")
        .link("e", "c1")
        .link("b", "f")
        .link("f", "e")
        .link("g", "f")
        .link("g", "c");

    // Device k owns the /4 prefix with its index in the top four bits.
    let prefix = |k: usize| -> String {
        let mut s = String::new();
        for bit in (0..4).rev() {
            s.push(if k & (1 << bit) != 0 { '1' } else { '0' });
        }
        s + "xxxx"
    };
    let idx =
        |d: &str| -> usize { devices.iter().position(|x| *x == d).expect("fixture device") };

    // Next hop per (device, destination); None = local delivery.
    let route = |from: &str, to: &str| -> Option<&'static str> {
        if from == to {
            return None;
        }
        Some(match (from, to) {
            ("a", _) => "b",
            ("b", "a") => "a",
            ("b", "f") => "f",
            ("b", _) => "c",
            ("c", "a") | ("c", "b") | ("c", "f") => "b",
            ("c", "g") => "g",
            ("c", "d") => "d",
            ("c", "i") => "i",
            ("c", _) => unreachable!("handled by the split rules"),
            ("d", "e") | ("d", "c1") => "e",
            ("d", _) => "c",
            ("i", "e") | ("i", "c1") => "e",
            ("i", _) => "c",
            ("e", "c1") => "c1",
            ("e", "d") => "d",
            ("e", "i") => "i",
            ("e", "f") | ("e", "g") => "f",
            ("e", _) => "d",
            ("f", "e") | ("f", "c1") => "e",
            ("f", "g") => "g",
            ("f", _) => "b",
            ("g", "f") | ("g", "e") | ("g", "c1") => "f",
            ("g", _) => "c",
            ("c1", _) => "e",
            _ => unreachable!("fixture route table"),
        })
    };

    let mut tables = Vec::new();
    for from in devices {
        let mut rules = Vec::new();
        for to in devices {
            let pat = HeaderPattern::parse(&prefix(idx(to))).unwrap();
            if from == to {
                rules.push(FlowRule {
                    priority: 1,
                    pattern: pat,
                    in_port: None,
                    action: RuleAction::Forward(PortId(0)),
                    rewrite: None,
                });
                continue;
            }
            // The expected split: c reaches e and c1 over d or i depending
            // on the low bit.
            if from == "c" && (to == "e" || to == "c1") {
                let base = prefix(idx(to));
                let even = format!("{}xxx0", &base[..4]);
                let odd = format!("{}xxx1", &base[..4]);
                for (p, via) in [(even, "d"), (odd, "i")] {
                    rules.push(FlowRule {
                        priority: 2,
                        pattern: HeaderPattern::parse(&p).unwrap(),
                        in_port: None,
                        action: RuleAction::Forward(PortId(b.port_toward("c", via).unwrap())),
                        rewrite: None,
                    });
                }
                continue;
            }
            let via = route(from, to).expect("non-local");
            rules.push(FlowRule {
                priority: 1,
                pattern: pat,
                in_port: None,
                action: RuleAction::Forward(PortId(b.port_toward(from, via).unwrap())),
                rewrite: None,
            });
        }
        tables.push(DeviceRules { device: from.to_string(), rules });
    }

    (
        b.build(),
        RulesFile { header_bits: 8, tables },
        devices.to_vec(),
    )
}

/// Destination header bits that route to the named fixture device.
pub fn branching_isp_dst_bits(device: &str) -> u128 {
    let devices = ["a", "b", "c", "c1", "d", "e", "f", "g", "i"];
    let idx = devices.iter().position(|x| *x == device).expect("fixture device") as u128;
    idx << 4
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{build_snapshot, build_state, DeviceId};

    #[test]
    fn aarnet_has_twelve_connected_devices() {
        let topo = aarnet();
        assert_eq!(topo.devices.len(), 12);
        let rules = RulesFile { header_bits: 8, tables: vec![] };
        let snap = build_snapshot(&topo, &rules).unwrap();
        assert_eq!(snap.device_count(), 12);
        // Every device is linked.
        for d in snap.devices.keys() {
            assert!(
                snap.links.keys().any(|(a, _)| a == d),
                "{d} has no links"
            );
        }
    }

    #[test]
    fn zib54_has_fifty_four_devices() {
        let topo = zib54();
        assert_eq!(topo.devices.len(), 54);
        assert_eq!(topo.links.len(), 54 + 9);
    }

    #[test]
    fn branching_fixture_expects_the_split_paths() {
        let (topo, rules, _) = branching_isp();
        let mut state = build_state(&topo, &rules).unwrap();
        let snap = state.snapshot();
        let (space, trajs) = crate::hsa::expected_trajectories(
            &snap,
            &DeviceId::new("a"),
            &DeviceId::new("c1"),
            PortId(0),
        )
        .unwrap();
        assert!(!space.is_empty());
        let mut seqs: Vec<Vec<&str>> = trajs
            .iter()
            .map(|t| t.devices.iter().map(|d| d.as_str()).collect())
            .collect();
        seqs.sort();
        assert_eq!(
            seqs,
            vec![
                vec!["a", "b", "c", "d", "e", "c1"],
                vec!["a", "b", "c", "i", "e", "c1"],
            ]
        );
    }

    #[test]
    fn fixture_side_path_routes_f_to_e() {
        let (topo, rules, _) = branching_isp();
        let mut state = build_state(&topo, &rules).unwrap();
        let snap = state.snapshot();
        let (_, trajs) = crate::hsa::expected_trajectories(
            &snap,
            &DeviceId::new("f"),
            &DeviceId::new("e"),
            PortId(0),
        )
        .unwrap();
        assert_eq!(trajs.len(), 1);
        assert_eq!(trajs[0].devices.len(), 2);
    }
}
