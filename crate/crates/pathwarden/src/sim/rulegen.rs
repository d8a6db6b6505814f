//! Forwarding-table synthesis: spread destination prefixes uniformly across
//! devices as local prefixes and realize shortest-path routes toward each
//! owner, ties broken by device id.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::header::HeaderPattern;
use crate::netmodel::{DeviceRules, FlowRule, PortId, RuleAction, RulesFile, TopologyFile, TopologyLink};

#[derive(Debug, Error)]
pub enum RuleGenError {
    #[error("topology is disconnected: components {0:?}")]
    Disconnected(Vec<Vec<String>>),
    #[error("{prefixes} prefixes need {need} bits, header width is {width}")]
    WidthTooSmall { prefixes: usize, need: u16, width: u16 },
    #[error("cannot generate rules for an empty topology")]
    Empty,
}

/// Undirected adjacency with the port used toward each neighbor.
pub(crate) fn adjacency(topo: &TopologyFile) -> BTreeMap<String, BTreeMap<String, u16>> {
    let mut adj: BTreeMap<String, BTreeMap<String, u16>> = BTreeMap::new();
    for d in &topo.devices {
        adj.entry(d.id.clone()).or_default();
    }
    for TopologyLink(a, pa, b, pb) in &topo.links {
        adj.entry(a.clone()).or_default().insert(b.clone(), *pa);
        adj.entry(b.clone()).or_default().insert(a.clone(), *pb);
    }
    adj
}

fn components(adj: &BTreeMap<String, BTreeMap<String, u16>>) -> Vec<Vec<String>> {
    let mut seen: BTreeSet<&String> = BTreeSet::new();
    let mut comps = Vec::new();
    for start in adj.keys() {
        if seen.contains(start) {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen.insert(start);
        while let Some(v) = queue.pop_front() {
            comp.push(v.clone());
            for n in adj[v].keys() {
                if seen.insert(n) {
                    queue.push_back(n);
                }
            }
        }
        comps.push(comp);
    }
    comps
}

/// Hop distances from `origin` over the adjacency.
fn bfs_distances(adj: &BTreeMap<String, BTreeMap<String, u16>>, origin: &str) -> BTreeMap<String, usize> {
    let mut dist = BTreeMap::from([(origin.to_string(), 0usize)]);
    let mut queue = VecDeque::from([origin.to_string()]);
    while let Some(v) = queue.pop_front() {
        let d = dist[&v];
        for n in adj[&v].keys() {
            if !dist.contains_key(n) {
                dist.insert(n.clone(), d + 1);
                queue.push_back(n.clone());
            }
        }
    }
    dist
}

/// The number of index bits a prefix set of this size occupies.
pub fn prefix_length(prefix_count: usize) -> u16 {
    (usize::BITS - (prefix_count.max(1) - 1).leading_zeros()).max(1) as u16
}

/// The match pattern of prefix `i` at the given widths.
pub fn prefix_pattern(i: usize, plen: u16, width: u16) -> HeaderPattern {
    let value = (i as u128) << (width - plen);
    let mask = (((1u128 << plen) - 1) << (width - plen)) & if width == 128 { u128::MAX } else { (1 << width) - 1 };
    HeaderPattern::from_bits(width, value, mask)
}

/// Generated rules plus the ownership map the harness uses to aim traffic.
#[derive(Debug, Clone)]
pub struct GeneratedRules {
    pub rules: RulesFile,
    /// Prefix index → owning device.
    pub owners: Vec<String>,
    pub prefix_len: u16,
}

impl GeneratedRules {
    /// A concrete destination-address bit pattern inside prefix `i`.
    pub fn dst_bits(&self, prefix: usize, entropy: u128) -> u128 {
        let width = self.rules.header_bits;
        let host_bits = width - self.prefix_len;
        let host_mask = if host_bits == 0 { 0 } else { (1u128 << host_bits) - 1 };
        ((prefix as u128) << host_bits) | (entropy & host_mask)
    }

    /// Prefixes owned by the named device.
    pub fn prefixes_of(&self, device: &str) -> Vec<usize> {
        self.owners
            .iter()
            .enumerate()
            .filter(|(_, o)| o.as_str() == device)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Assign `prefix_count` prefixes uniformly at random to devices and compute
/// per-device forwarding tables realizing shortest paths toward each owner.
pub fn generate_rules(
    topo: &TopologyFile,
    prefix_count: usize,
    header_bits: u16,
    seed: u64,
) -> Result<GeneratedRules, RuleGenError> {
    if topo.devices.is_empty() {
        return Err(RuleGenError::Empty);
    }
    let adj = adjacency(topo);
    let comps = components(&adj);
    if comps.len() > 1 {
        return Err(RuleGenError::Disconnected(comps));
    }
    let plen = prefix_length(prefix_count);
    if plen > header_bits {
        return Err(RuleGenError::WidthTooSmall { prefixes: prefix_count, need: plen, width: header_bits });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let device_ids: Vec<String> = topo.devices.iter().map(|d| d.id.clone()).collect();
    // Uniform spread: deal devices out in shuffled batches so ownership
    // stays balanced at any prefix count.
    let mut owners: Vec<String> = Vec::with_capacity(prefix_count);
    while owners.len() < prefix_count {
        let mut batch = device_ids.clone();
        batch.shuffle(&mut rng);
        owners.extend(batch);
    }
    owners.truncate(prefix_count);

    // Distance fields per owner device (deduplicated).
    let mut dist_fields: BTreeMap<&str, BTreeMap<String, usize>> = BTreeMap::new();
    for o in &owners {
        dist_fields
            .entry(o.as_str())
            .or_insert_with(|| bfs_distances(&adj, o));
    }

    let mut tables: BTreeMap<&str, Vec<FlowRule>> = BTreeMap::new();
    for (i, owner) in owners.iter().enumerate() {
        let pattern = prefix_pattern(i, plen, header_bits);
        let dist = &dist_fields[owner.as_str()];
        for dev in &device_ids {
            let rule = if dev == owner {
                FlowRule {
                    priority: plen as u32,
                    pattern,
                    in_port: None,
                    action: RuleAction::Forward(PortId(0)),
                    rewrite: None,
                }
            } else {
                // Smallest-id neighbor strictly closer to the owner.
                let my_d = dist[dev];
                let (next, port) = adj[dev]
                    .iter()
                    .find(|(n, _)| dist[*n] == my_d - 1)
                    .expect("connected graph has a downhill neighbor");
                let _ = next;
                FlowRule {
                    priority: plen as u32,
                    pattern,
                    in_port: None,
                    action: RuleAction::Forward(PortId(*port)),
                    rewrite: None,
                }
            };
            tables.entry(dev.as_str()).or_default().push(rule);
        }
    }

    Ok(GeneratedRules {
        rules: RulesFile {
            header_bits,
            tables: tables
                .into_iter()
                .map(|(device, rules)| DeviceRules { device: device.to_string(), rules })
                .collect(),
        },
        owners,
        prefix_len: plen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{build_state, DeviceId};
    use crate::sim::topo;

    #[test]
    fn aarnet_with_forty_prefixes_is_on_the_order_of_four_hundred_rules() {
        let gen = generate_rules(&topo::aarnet(), 40, 32, 7).unwrap();
        let total: usize = gen.rules.tables.iter().map(|t| t.rules.len()).sum();
        assert!((300..=600).contains(&total), "got {total}");
        // Ownership is spread: every device owns at least one prefix at
        // this prefix-to-device ratio.
        for d in topo::aarnet().devices {
            assert!(!gen.prefixes_of(&d.id).is_empty(), "{} owns nothing", d.id);
        }
    }

    #[test]
    fn single_device_gets_only_local_delivery_rules() {
        let gen = generate_rules(&topo::line(1), 3, 8, 1).unwrap();
        assert_eq!(gen.rules.tables.len(), 1);
        for rule in &gen.rules.tables[0].rules {
            assert_eq!(rule.action, RuleAction::Forward(PortId(0)));
        }
    }

    #[test]
    fn three_node_line_routes_match_hand_computed_shortest_paths() {
        // d0 -- d1 -- d2, three prefixes. Wherever a prefix lives, d0 must
        // send non-local traffic right, d2 left, d1 toward the owner.
        let line = topo::line(3);
        let gen = generate_rules(&line, 3, 8, 11).unwrap();
        let mut state = build_state(&line, &gen.rules).unwrap();
        let snap = state.snapshot();
        for (i, owner) in gen.owners.iter().enumerate() {
            let bits = gen.dst_bits(i, 0);
            for dev in ["d0", "d1", "d2"] {
                let hit = snap
                    .device(&DeviceId::new(dev))
                    .unwrap()
                    .lookup(bits, PortId(0))
                    .expect("every prefix has a rule");
                let RuleAction::Forward(port) = hit.action else {
                    panic!("expected forward");
                };
                if dev == owner {
                    assert_eq!(port, PortId(0), "{dev} delivers its own prefix");
                } else {
                    // The next hop must be strictly closer to the owner.
                    let expected_port = match (dev, owner.as_str()) {
                        ("d0", _) => 1,                  // only fabric port
                        ("d2", _) => 1,                  // only fabric port
                        ("d1", "d0") => 1,               // toward d0
                        ("d1", "d2") => 2,               // toward d2
                        _ => unreachable!(),
                    };
                    assert_eq!(port, PortId(expected_port), "{dev} toward {owner}");
                }
            }
        }
    }

    #[test]
    fn disconnected_topology_names_its_components() {
        let mut topo = topo::line(2);
        topo.devices.push(crate::netmodel::TopologyDevice { id: "island".into(), ports: 2 });
        let err = generate_rules(&topo, 4, 8, 1).unwrap_err();
        match err {
            RuleGenError::Disconnected(comps) => {
                assert_eq!(comps.len(), 2);
                assert!(comps.iter().any(|c| c == &vec!["island".to_string()]));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn generated_networks_deliver_every_prefix() {
        // Concrete forwarding from every device toward every prefix ends at
        // the owner (no loops, no black holes).
        let topo = topo::aarnet();
        let gen = generate_rules(&topo, 16, 16, 3).unwrap();
        let mut state = build_state(&topo, &gen.rules).unwrap();
        let snap = state.snapshot();
        for (i, owner) in gen.owners.iter().enumerate() {
            let bits = gen.dst_bits(i, 5);
            for start in snap.devices.keys() {
                let mut here = start.clone();
                let mut hops = 0;
                loop {
                    hops += 1;
                    assert!(hops < 64, "loop from {start} to prefix {i}");
                    let rule = snap.device(&here).unwrap().lookup(bits, PortId(0)).unwrap();
                    let RuleAction::Forward(p) = rule.action else { panic!() };
                    if p == PortId(0) {
                        assert_eq!(here.as_str(), owner, "delivered at the wrong device");
                        break;
                    }
                    here = snap.link_peer(&here, p).expect("wired port").0.clone();
                }
            }
        }
    }
}
