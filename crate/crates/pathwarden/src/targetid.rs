//! Inspection prioritization: score forwarding devices by how commonly
//! packet trajectories traverse them, and partition the device set into
//! ordered scanning groups.
//!
//! The sampler is frequency-quantile based with both-extremes promotion: the
//! most traversed devices get top priority, the least traversed nonzero
//! devices are promoted alongside them, and devices that appear in no
//! trajectory at all form the final, explicitly flagged group — a device
//! that should carry traffic but never shows up is itself suspicious.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::netmodel::{DeviceId, NetworkSnapshot};
use crate::trajectory::{Trajectory, TrajectoryStore};

#[derive(Debug, Error)]
pub enum TargetIdError {
    #[error("empty trajectory corpus: no basis for prioritization")]
    EmptyCorpus,
    #[error("group count must be at least 2, got {0}")]
    TooFewGroups(usize),
}

/// The set of all deduplicated trajectories collected across labels and
/// ports for one network.
#[derive(Debug, Default, Clone)]
pub struct TrajectoryCorpus {
    all: Vec<Trajectory>,
}

impl TrajectoryCorpus {
    pub fn from_store(store: &TrajectoryStore) -> Self {
        TrajectoryCorpus { all: store.iter().cloned().collect() }
    }

    pub fn from_trajectories(all: Vec<Trajectory>) -> Self {
        TrajectoryCorpus { all }
    }

    pub fn len(&self) -> usize {
        self.all.len()
    }

    pub fn is_empty(&self) -> bool {
        self.all.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Trajectory> {
        self.all.iter()
    }
}

/// Representativeness score per device: the fraction of distinct
/// trajectories that visit it (cumulative frequency of occurrence in packet
/// paths). Scores are in `[0, 1]`; devices never observed are absent.
pub fn representativeness(
    corpus: &TrajectoryCorpus,
) -> Result<BTreeMap<DeviceId, f64>, TargetIdError> {
    if corpus.is_empty() {
        return Err(TargetIdError::EmptyCorpus);
    }
    let total = corpus.len() as f64;
    let mut visits: BTreeMap<DeviceId, usize> = BTreeMap::new();
    for tr in corpus.iter() {
        let mut seen = BTreeSet::new();
        for (d, _) in &tr.hops {
            if seen.insert(d.clone()) {
                *visits.entry(d.clone()).or_default() += 1;
            }
        }
    }
    Ok(visits.into_iter().map(|(d, n)| (d, n as f64 / total)).collect())
}

/// Ordered scanning groups. Group 0 is scanned first.
#[derive(Debug, Clone, Serialize)]
pub struct ScanPlan {
    pub groups: Vec<BTreeSet<DeviceId>>,
    pub scores: BTreeMap<DeviceId, f64>,
    /// Devices with installed forwarding state but zero observed
    /// trajectories; they form the last group.
    pub silent: BTreeSet<DeviceId>,
}

impl ScanPlan {
    /// All devices in scan order.
    pub fn scan_order(&self) -> Vec<DeviceId> {
        self.groups.iter().flat_map(|g| g.iter().cloned()).collect()
    }

    /// A plan with no prioritization signal: every device in one group.
    pub fn uniform(snap: &NetworkSnapshot) -> ScanPlan {
        let all: BTreeSet<DeviceId> = snap.devices.keys().cloned().collect();
        ScanPlan {
            scores: all.iter().map(|d| (d.clone(), 0.0)).collect(),
            groups: if all.is_empty() { Vec::new() } else { vec![all.clone()] },
            silent: BTreeSet::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }
}

/// Bucket the snapshot's devices into `k` priority groups.
///
/// Devices with nonzero scores are cut into `k − 1` quantile bands by score;
/// the band boundaries collapse when scores tie, so a uniform corpus yields
/// a single band. Devices tied at the minimum nonzero score are promoted
/// into group 0 (the sampler keeps both extremes). Zero-score devices form
/// the final group and are flagged.
pub fn build_scan_plan(
    corpus: &TrajectoryCorpus,
    snap: &NetworkSnapshot,
    k: usize,
) -> Result<ScanPlan, TargetIdError> {
    if k < 2 {
        return Err(TargetIdError::TooFewGroups(k));
    }
    let observed = representativeness(corpus)?;

    let mut scores: BTreeMap<DeviceId, f64> = BTreeMap::new();
    for id in snap.devices.keys() {
        scores.insert(id.clone(), observed.get(id).copied().unwrap_or(0.0));
    }
    // Trajectories may mention the controller sentinel; it is not a
    // forwarding device and is not scheduled.
    let silent: BTreeSet<DeviceId> = scores
        .iter()
        .filter(|(_, s)| **s == 0.0)
        .map(|(d, _)| d.clone())
        .collect();

    let mut nonzero: Vec<(&DeviceId, f64)> =
        scores.iter().filter(|(_, s)| **s > 0.0).map(|(d, s)| (d, *s)).collect();
    nonzero.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(b.0)));

    let bands = k - 1;
    let mut groups: Vec<BTreeSet<DeviceId>> = vec![BTreeSet::new(); bands];
    if !nonzero.is_empty() {
        let sorted_scores: Vec<f64> = nonzero.iter().map(|(_, s)| *s).collect();
        // Interior quantile thresholds; a device lands in the band indexed
        // by how many thresholds sit strictly above its score.
        let thresholds: Vec<f64> = (1..bands)
            .map(|j| sorted_scores[(sorted_scores.len() * j / bands).min(sorted_scores.len() - 1)])
            .collect();
        let min_score = *sorted_scores.last().expect("nonempty");
        for (d, s) in &nonzero {
            let band = if *s == min_score {
                0 // least-representative promotion
            } else {
                thresholds.iter().filter(|t| **t > *s).count()
            };
            groups[band].insert((*d).clone());
        }
    }
    groups.retain(|g| !g.is_empty());
    if !silent.is_empty() {
        groups.push(silent.clone());
    }

    Ok(ScanPlan { groups, scores, silent })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{build_state, DeviceRules, RulesFile, TopologyDevice, TopologyFile, TopologyLink};
    use crate::trajectory::PacketLabel;
    use crate::netmodel::PortId;
    use crate::SimNs;

    fn tr(label: u64, seq: &[&str]) -> Trajectory {
        Trajectory {
            label: PacketLabel(label),
            port: PortId(0),
            hops: seq.iter().enumerate().map(|(i, d)| (DeviceId::new(*d), i as SimNs)).collect(),
        }
    }

    fn snapshot_of(devices: &[&str]) -> crate::netmodel::NetworkSnapshot {
        let topo = TopologyFile {
            devices: devices.iter().map(|d| TopologyDevice { id: d.to_string(), ports: 4 }).collect(),
            links: (1..devices.len())
                .map(|i| TopologyLink(devices[i - 1].into(), 2, devices[i].into(), 1))
                .collect(),
            hosts: vec![],
        };
        let rules = RulesFile { header_bits: 4, tables: Vec::<DeviceRules>::new() };
        build_state(&topo, &rules).unwrap().snapshot()
    }

    /// Spine-and-leaves corpus where the transit devices b, g, f carry
    /// nearly every path.
    fn spine_corpus() -> TrajectoryCorpus {
        let mut label = 0;
        let mut all = Vec::new();
        let leaves_left = ["a", "c"];
        let leaves_right = ["h", "i", "e"];
        for l in leaves_left {
            for r in leaves_right {
                label += 1;
                all.push(tr(label, &[l, "b", "g", "f", r]));
            }
        }
        all.push(tr(100, &["a", "b", "c"]));
        all.push(tr(101, &["h", "f", "i"]));
        TrajectoryCorpus::from_trajectories(all)
    }

    #[test]
    fn transit_devices_score_highest() {
        let corpus = spine_corpus();
        let scores = representativeness(&corpus).unwrap();
        let mut ranked: Vec<(&DeviceId, f64)> = scores.iter().map(|(d, s)| (d, *s)).collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(b.0)));
        let top3: Vec<&str> = ranked.iter().take(3).map(|(d, _)| d.as_str()).collect();
        for d in ["b", "g", "f"] {
            assert!(top3.contains(&d), "expected {d} in top 3, got {top3:?}");
        }
    }

    #[test]
    fn single_trajectory_scores_its_members_one() {
        let corpus = TrajectoryCorpus::from_trajectories(vec![tr(1, &["a", "b", "c"])]);
        let scores = representativeness(&corpus).unwrap();
        for d in ["a", "b", "c"] {
            assert_eq!(scores[&DeviceId::new(d)], 1.0);
        }
        assert!(!scores.contains_key(&DeviceId::new("z")));
    }

    #[test]
    fn star_hub_scores_strictly_highest() {
        // Trajectories between all leaf pairs through hub h.
        let leaves = ["l1", "l2", "l3", "l4"];
        let mut all = Vec::new();
        let mut label = 0;
        for a in leaves {
            for b in leaves {
                if a < b {
                    label += 1;
                    all.push(tr(label, &[a, "hub", b]));
                }
            }
        }
        let corpus = TrajectoryCorpus::from_trajectories(all);
        let scores = representativeness(&corpus).unwrap();
        let hub = scores[&DeviceId::new("hub")];
        assert_eq!(hub, 1.0);
        for l in leaves {
            assert!(scores[&DeviceId::new(l)] < hub);
        }
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let corpus = TrajectoryCorpus::default();
        assert!(matches!(representativeness(&corpus), Err(TargetIdError::EmptyCorpus)));
    }

    #[test]
    fn plan_partitions_the_device_set() {
        let snap = snapshot_of(&["a", "b", "c", "e", "f", "g", "h", "i", "zz"]);
        let plan = build_scan_plan(&spine_corpus(), &snap, 3).unwrap();
        let mut seen = BTreeSet::new();
        for g in &plan.groups {
            for d in g {
                assert!(seen.insert(d.clone()), "{d} appears twice");
            }
        }
        assert_eq!(seen.len(), snap.device_count());
        // Spine devices are in the top group.
        for d in ["b", "g", "f"] {
            assert!(plan.groups[0].contains(&DeviceId::new(d)));
        }
        // zz carries rules but no trajectories: final flagged group.
        assert!(plan.silent.contains(&DeviceId::new("zz")));
        assert!(plan.groups.last().unwrap().contains(&DeviceId::new("zz")));
    }

    #[test]
    fn equal_scores_collapse_to_a_single_group() {
        let snap = snapshot_of(&["a", "b", "c"]);
        let corpus = TrajectoryCorpus::from_trajectories(vec![tr(1, &["a", "b", "c"])]);
        let plan = build_scan_plan(&corpus, &snap, 3).unwrap();
        assert_eq!(plan.groups.len(), 1);
        assert_eq!(plan.groups[0].len(), 3);
    }

    #[test]
    fn least_representative_nonzero_devices_are_promoted() {
        let mut all = Vec::new();
        for i in 0..10 {
            all.push(tr(i, &["hub", "mid"]));
        }
        all.push(tr(90, &["hub", "mid", "rare"]));
        let snap = snapshot_of(&["hub", "mid", "rare"]);
        let plan = build_scan_plan(&TrajectoryCorpus::from_trajectories(all), &snap, 3).unwrap();
        assert!(plan.groups[0].contains(&DeviceId::new("rare")));
        assert!(plan.groups[0].contains(&DeviceId::new("hub")));
    }

    #[test]
    fn adding_a_trajectory_through_a_device_never_decreases_its_score() {
        let mut all = vec![tr(1, &["a", "b"]), tr(2, &["c", "b"]), tr(3, &["c", "a"])];
        let before = representativeness(&TrajectoryCorpus::from_trajectories(all.clone())).unwrap();
        all.push(tr(4, &["x", "b", "y"]));
        let after = representativeness(&TrajectoryCorpus::from_trajectories(all)).unwrap();
        assert!(after[&DeviceId::new("b")] >= before[&DeviceId::new("b")]);
    }

    #[test]
    fn duplicating_the_corpus_keeps_the_grouping() {
        let snap = snapshot_of(&["a", "b", "c", "e", "f", "g", "h", "i"]);
        let base = spine_corpus();
        let doubled = TrajectoryCorpus::from_trajectories(
            base.iter().cloned().chain(base.iter().cloned()).collect(),
        );
        let p1 = build_scan_plan(&base, &snap, 3).unwrap();
        let p2 = build_scan_plan(&doubled, &snap, 3).unwrap();
        assert_eq!(p1.groups, p2.groups);
    }
}
