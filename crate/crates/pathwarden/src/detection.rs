//! The detection engine: probe every peer of a target device, compare the
//! trajectories packets actually took against the trajectories the snapshot
//! says they should take, classify the malicious action, and localize the
//! device responsible.
//!
//! Classification checks the rules in a fixed order — benign, replay,
//! misroute, drop, generation, delay — so overlapping conditions resolve
//! deterministically. Replay is distinguished from misroute by journey
//! completeness: a replayer delivers the intended path *and* leaks extra
//! copies, a misrouter diverts the packet so the intended path never
//! completes. Localization walks the reconstructed paths against the best
//! matching expected path and flags the device that forwarded wrong, which
//! for loop-free paths coincides with the last device of the ordered
//! intersection of actual and expected.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::hsa::{self, ExpectedTrajectory};
use crate::netmodel::{DeviceId, NetworkSnapshot, PortId};
use crate::trajectory::{
    build_walk_forest, label_packet, LabelConfig, Observation, ObservedOutput, PacketHeaderFields,
    PacketLabel, Walk, WalkOrigin,
};
use crate::SimNs;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("snapshot went stale during the scan (epoch {epoch})")]
    StaleSnapshot { epoch: u64 },
    #[error("target device {0} is not in the snapshot")]
    UnknownTarget(DeviceId),
    #[error(transparent)]
    Hsa(#[from] hsa::HsaError),
}

/// The five malicious forwarding actions, plus benign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictKind {
    Benign,
    Replay,
    Misroute,
    Drop,
    Generation,
    Delay,
}

impl std::fmt::Display for VerdictKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            VerdictKind::Benign => "benign",
            VerdictKind::Replay => "replay",
            VerdictKind::Misroute => "misroute",
            VerdictKind::Drop => "drop",
            VerdictKind::Generation => "generation",
            VerdictKind::Delay => "delay",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictNote {
    /// Structure matched no rule cleanly; misroute was the fallthrough.
    AnomalousStructure,
    /// Non-benign but no device could be pinned.
    Unlocalizable,
    /// Drop seen on a trajectory whose benign drop rate exceeds the
    /// demotion threshold; needs repeated confirmation.
    SuspectedCongestionDrop { benign_rate: f64 },
    /// Suspected delay that did not repeat.
    SuspectedJitter,
    /// Verdict survived congestion demotion.
    CongestionConfirmed { confirmations: usize },
    /// The trajectory had no calibration coverage; conservative defaults.
    UncalibratedPath,
    /// Label never injected by the control plane or any host.
    UnexpectedLabel,
    /// Trajectory count toward the controller exceeded the baseline.
    ControllerFlood { count: usize, threshold: f64 },
}

/// Expected-vs-actual evidence for one probed pair.
#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryPair {
    pub src: DeviceId,
    pub dst: DeviceId,
    pub port: PortId,
    /// Interior device sequences (endpoints stripped) of every expected
    /// trajectory for the pair.
    pub expected: Vec<Vec<DeviceId>>,
    /// The expected trajectory classification runs against: longest common
    /// prefix with the actual walk, ties by lexicographic device id.
    pub best_expected: Vec<DeviceId>,
    /// Interior devices actually visited, in first-visit order across all
    /// reconstructed walks of the probe.
    pub actual: Vec<DeviceId>,
    pub destination_reached: bool,
    pub t_e: SimNs,
    pub t_a: SimNs,
    pub t_d: SimNs,
    #[serde(skip)]
    pub walks: Vec<Walk>,
    #[serde(skip)]
    pub entry_sender: Option<DeviceId>,
    #[serde(skip)]
    pub injected_at: SimNs,
    #[serde(skip)]
    pub expected_full: Vec<Vec<DeviceId>>,
    #[serde(skip)]
    pub hop_interval: SimNs,
}

/// One classified finding.
#[derive(Debug, Clone, Serialize)]
pub struct Verdict {
    pub sweep: u64,
    pub target: DeviceId,
    pub peer: DeviceId,
    pub port: PortId,
    pub kind: VerdictKind,
    pub malicious_devices: BTreeSet<DeviceId>,
    pub notes: Vec<VerdictNote>,
    pub evidence: TrajectoryPair,
    pub emitted_at: SimNs,
}

/// Tunables for one detection run. Every threshold is pinned here; nothing
/// is left to later calibration.
#[derive(Debug, Clone)]
pub struct DetectionConfig {
    /// Independent probes per (target, peer) pair before judging it.
    pub probes_per_pair: usize,
    /// Extra probes spent confirming a demoted (congestion-suspect) verdict.
    pub confirm_retries: usize,
    /// Confirmations required before a demoted verdict is upheld (r).
    pub confirmations_required: usize,
    /// A demoted drop is additionally confirmed only when the same device
    /// truncates at least this fraction of the pair's probes; benign loss
    /// spreads across the path, targeted loss repeats in one place.
    pub confirm_fraction: f64,
    /// Lower bound for the congestion delay allowance T_d.
    pub t_d_floor: SimNs,
    /// Benign drop rate above which single drop events are demoted.
    pub demote_threshold: f64,
    /// Calibration instances a path needs before its measured drop rate is
    /// trusted to clear drops without confirmation; sparser paths always
    /// demote. A rate of zero over a dozen samples cannot rule out
    /// percent-level congestion.
    pub min_calibration_instances: usize,
    /// Nominal per-hop latency used for expected traversal times.
    pub hop_interval: SimNs,
    /// Seed for probe header selection; fixed seed = reproducible probes.
    pub probe_seed: u64,
    /// Use the literal set-cardinality drop condition instead of the prefix
    /// formulation (see [`classify`] for the difference).
    pub literal_drop_rule: bool,
    /// Standard deviations above the calibration mean that flag a
    /// controller-bound trajectory flood.
    pub controller_sigma: f64,
    /// Controller-trajectory count below which the flood check never fires.
    pub controller_flood_min: usize,
    pub label: LabelConfig,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig {
            probes_per_pair: 3,
            confirm_retries: 12,
            confirmations_required: 3,
            confirm_fraction: 0.3,
            t_d_floor: 2_000_000,
            demote_threshold: 0.001,
            min_calibration_instances: 50,
            hop_interval: 1_000_000,
            probe_seed: 0,
            literal_drop_rule: false,
            controller_sigma: 3.0,
            controller_flood_min: 5,
            label: LabelConfig::default(),
        }
    }
}

// ---------------------------------------------------------------------------
// Classification
// ---------------------------------------------------------------------------

fn is_subsequence(needle: &[DeviceId], hay: &[DeviceId]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|d| it.any(|h| h == d))
}

/// Classify one expected-vs-actual pair. Total: every pair receives exactly
/// one kind, and the checks run in the fixed precedence order.
///
/// When the observations split into several walks (a branch in the packet's
/// history), the walks carry more structure than the flattened device set:
/// an intact expected journey plus any extra branch is a replay no matter
/// how the copies interleave in time.
pub fn classify(pair: &TrajectoryPair, cfg: &DetectionConfig) -> (VerdictKind, Vec<VerdictNote>) {
    let e = &pair.best_expected;
    let a = &pair.actual;
    let off: Vec<&DeviceId> = a.iter().filter(|d| !e.contains(d)).collect();
    let common: Vec<&DeviceId> = a.iter().filter(|d| e.contains(d)).collect();
    let delta = pair.t_a.saturating_sub(pair.t_e);

    let walk_interiors: Vec<Vec<DeviceId>> = pair
        .walks
        .iter()
        .filter(|w| matches!(w.origin, crate::trajectory::WalkOrigin::Injected { .. }))
        .map(|w| TrajectoryPair::interior(&w.devices(), &pair.src, &pair.dst))
        .collect();
    let complete = |interior: &Vec<DeviceId>| pair.expected.iter().any(|exp| exp == interior);

    // 1. benign: the (single) walk equals some expected trajectory and
    //    arrived in time.
    if pair.destination_reached && delta <= pair.t_d {
        if walk_interiors.len() == 1 && complete(&walk_interiors[0]) {
            return (VerdictKind::Benign, Vec::new());
        }
        if walk_interiors.is_empty() && pair.expected.iter().any(|exp| exp == a) {
            return (VerdictKind::Benign, Vec::new());
        }
    }

    // 2. replay: the intended journey is still complete and extra copies
    //    exist beside it.
    if walk_interiors.len() > 1 && walk_interiors.iter().any(complete) {
        let all_complete = walk_interiors.iter().all(complete);
        let notes = if all_complete {
            // Pure duplication onto another valid branch: no foreign device,
            // but a single packet cannot walk two paths at once.
            vec![VerdictNote::AnomalousStructure]
        } else {
            Vec::new()
        };
        return (VerdictKind::Replay, notes);
    }
    if !off.is_empty() {
        let a_without_off: Vec<DeviceId> =
            a.iter().filter(|d| e.contains(d)).cloned().collect();
        if &a_without_off == e {
            return (VerdictKind::Replay, Vec::new());
        }
    }

    // 3. misroute: diverged through foreign devices with the intended path
    //    broken, or a forwarding loop (triangle routing revisits a device,
    //    with or without leaving the expected device set).
    if !off.is_empty() && !common.is_empty() {
        return (VerdictKind::Misroute, Vec::new());
    }
    let looped = pair.walks.iter().any(|w| {
        let devices = w.devices();
        let unique: BTreeSet<&DeviceId> = devices.iter().collect();
        unique.len() < devices.len()
    });
    if looped {
        return (VerdictKind::Misroute, Vec::new());
    }

    // 4. drop: the walk is a prefix of the expected path and the destination
    //    was never reached. (The strict mode keeps the literal cardinality
    //    condition, which misses mid-path drops whose walk stays inside E.)
    if pair.literal_mode_drop(cfg, &off) {
        return (VerdictKind::Drop, Vec::new());
    }

    // 5. generation: no overlap at all — the label changed or the packet was
    //    fabricated, so its trajectory is undefined.
    if common.is_empty() && !a.is_empty() {
        return (VerdictKind::Generation, Vec::new());
    }

    // 6. delay: right path, too slow.
    if delta > pair.t_d {
        return (VerdictKind::Delay, Vec::new());
    }

    (VerdictKind::Misroute, vec![VerdictNote::AnomalousStructure])
}

impl TrajectoryPair {
    fn literal_mode_drop(&self, cfg: &DetectionConfig, off: &[&DeviceId]) -> bool {
        let e = &self.best_expected;
        let a = &self.actual;
        if cfg.literal_drop_rule {
            return !is_subsequence(a, e) && a.len() < e.len();
        }
        off.is_empty() && !self.destination_reached && a.len() <= e.len() && a[..] == e[..a.len()]
    }

    /// Interior form of a full path: endpoints stripped.
    fn interior(path: &[DeviceId], src: &DeviceId, dst: &DeviceId) -> Vec<DeviceId> {
        path.iter().filter(|d| *d != src && *d != dst).cloned().collect()
    }
}

// ---------------------------------------------------------------------------
// Localization
// ---------------------------------------------------------------------------

/// Index of the first hop where `walk` departs from `expected`; `None` when
/// the walk is a (possibly complete) prefix of the expected path.
fn divergence_index(walk: &[DeviceId], expected: &[DeviceId]) -> Option<usize> {
    for (i, d) in walk.iter().enumerate() {
        if expected.get(i) != Some(d) {
            return Some(i);
        }
    }
    None
}

/// Localize the device(s) responsible for a non-benign pair.
pub fn localize(pair: &TrajectoryPair, kind: VerdictKind) -> (BTreeSet<DeviceId>, Vec<VerdictNote>) {
    debug_assert_ne!(kind, VerdictKind::Benign);
    let mut out = BTreeSet::new();
    let mut notes = Vec::new();
    let best_full = pair
        .expected_full
        .iter()
        .find(|f| TrajectoryPair::interior(f, &pair.src, &pair.dst) == pair.best_expected)
        .cloned()
        .unwrap_or_else(|| {
            let mut f = vec![pair.src.clone()];
            f.extend(pair.best_expected.iter().cloned());
            f.push(pair.dst.clone());
            f
        });

    match kind {
        VerdictKind::Benign => {}
        VerdictKind::Delay => {
            // Retrace time hop by hop: flag the first hop whose cumulative
            // time exceeds expectation by more than its share of T_d.
            if let Some(walk) = pair.primary_walk() {
                let n = walk.hops.len();
                let mut flagged = None;
                let mut cum_actual: SimNs = 0;
                for (i, hop) in walk.hops.iter().enumerate() {
                    let prev = if i == 0 { pair.injected_at } else { walk.hops[i - 1].timestamp };
                    cum_actual += hop.timestamp.saturating_sub(prev);
                    let cum_expected = pair.hop_interval * (i as SimNs + 1);
                    let share = (pair.t_d as f64 * (i + 1) as f64 / n as f64) as SimNs;
                    if cum_actual.saturating_sub(cum_expected) > share {
                        flagged = Some(hop.device.clone());
                        break;
                    }
                }
                match flagged {
                    Some(d) => {
                        out.insert(d);
                    }
                    None => {
                        out.insert(walk.hops[n - 1].device.clone());
                    }
                }
            }
        }
        VerdictKind::Generation => {
            // Fabricated or modified packets enter mid-network; the wired
            // sender of the first observation is the injection point.
            if let Some(sender) = &pair.entry_sender {
                out.insert(sender.clone());
            } else if let Some((walk, idx)) = pair.first_diverging_walk(&best_full) {
                if idx > 0 {
                    out.insert(walk[idx - 1].clone());
                } else {
                    out.insert(walk[0].clone());
                }
            } else if let Some(first) = pair.actual.first() {
                out.insert(first.clone());
            }
        }
        VerdictKind::Replay | VerdictKind::Misroute | VerdictKind::Drop => {
            if kind == VerdictKind::Replay {
                // Replication forks the observation forest; the fork device
                // is the replicator. Handles copies aimed at the intended
                // destination too, where no foreign device ever appears.
                for fork in pair.fork_devices() {
                    out.insert(fork);
                }
            }
            if out.is_empty() {
                if let Some((walk, idx)) = pair.first_diverging_walk(&best_full) {
                    // The device that forwarded off-path. For loop-free
                    // walks this is the last member of the ordered
                    // intersection of actual and expected before the
                    // divergence.
                    if idx > 0 {
                        out.insert(walk[idx - 1].clone());
                    } else {
                        out.insert(walk[0].clone());
                    }
                } else if let Some(walk) = pair.primary_walk() {
                    // No structural divergence: a pure truncation. The
                    // deepest observed device swallowed the packet.
                    out.insert(walk.hops.last().expect("walks are non-empty").device.clone());
                }
            }
        }
    }

    if out.is_empty() {
        notes.push(VerdictNote::Unlocalizable);
    }
    (out, notes)
}

impl TrajectoryPair {
    /// Devices where the observation forest forks: the last hop shared by a
    /// pair of distinct walks. A fork means one device emitted the packet
    /// more than once.
    fn fork_devices(&self) -> BTreeSet<DeviceId> {
        let mut forks = BTreeSet::new();
        for (i, a) in self.walks.iter().enumerate() {
            for b in self.walks.iter().skip(i + 1) {
                let shared = a
                    .node_ids
                    .iter()
                    .zip(b.node_ids.iter())
                    .take_while(|(x, y)| x == y)
                    .count();
                if shared > 0 && (shared < a.hops.len() || shared < b.hops.len()) {
                    forks.insert(a.hops[shared - 1].device.clone());
                }
            }
        }
        forks
    }

    /// The injection-rooted walk with the most hops (the main storyline).
    fn primary_walk(&self) -> Option<&Walk> {
        self.walks
            .iter()
            .filter(|w| matches!(w.origin, WalkOrigin::Injected { .. }))
            .max_by_key(|w| w.hops.len())
            .or_else(|| self.walks.first())
    }

    /// First walk (in forest order) that structurally departs from every
    /// expected full path, with its divergence index against the expected
    /// path it shares the longest prefix with. Walks that fully realize an
    /// expected journey are not deviations and are skipped.
    fn first_diverging_walk(&self, best_full: &[DeviceId]) -> Option<(Vec<DeviceId>, usize)> {
        for w in &self.walks {
            let devices = w.devices();
            if self.expected_full.iter().any(|f| *f == devices) {
                continue;
            }
            let anchor = self
                .expected_full
                .iter()
                .max_by_key(|f| common_prefix_len(f, &devices))
                .map(|f| f.as_slice())
                .unwrap_or(best_full);
            if let Some(idx) = divergence_index(&devices, anchor) {
                return Some((devices, idx));
            }
            // A walk longer than the expected path diverges right after it.
            if devices.len() > anchor.len() {
                return Some((devices, anchor.len()));
            }
        }
        None
    }
}

// ---------------------------------------------------------------------------
// Congestion estimation
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Clone)]
struct PathStats {
    instances: usize,
    dropped: usize,
    /// Traversal-time excess over nominal, per completed instance.
    excesses: Vec<SimNs>,
}

/// Per-trajectory congestion profile estimated from passive observation of
/// calibration traffic: how often a path loses packets benignly and how much
/// delay it absorbs.
#[derive(Debug, Default)]
pub struct CongestionEstimator {
    per_path: BTreeMap<Vec<DeviceId>, PathStats>,
    t_d_floor: SimNs,
    demote_threshold: f64,
    min_instances: usize,
    /// Per-device controller-bound trajectory counts, one entry per
    /// calibration unit.
    controller_counts: BTreeMap<DeviceId, Vec<usize>>,
    controller_units: usize,
    pub warnings: Vec<String>,
}

impl CongestionEstimator {
    /// Permissive estimator for congestion-free runs: floor-only T_d, no
    /// demotion anywhere.
    pub fn clean(cfg: &DetectionConfig) -> Self {
        CongestionEstimator {
            t_d_floor: cfg.t_d_floor,
            demote_threshold: cfg.demote_threshold,
            min_instances: cfg.min_calibration_instances,
            ..Default::default()
        }
    }

    /// Maximum delay attributable to congestion on this path.
    pub fn t_d(&self, path: &[DeviceId]) -> SimNs {
        match self.per_path.get(path) {
            None => self.t_d_floor,
            Some(stats) if stats.excesses.is_empty() => self.t_d_floor,
            Some(stats) => {
                let mut ex = stats.excesses.clone();
                ex.sort_unstable();
                let idx = ((ex.len() as f64 * 0.99).ceil() as usize).clamp(1, ex.len()) - 1;
                ex[idx].max(self.t_d_floor)
            }
        }
    }

    /// Observed benign drop rate, `None` when the path never appeared in
    /// calibration traffic.
    pub fn benign_drop_rate(&self, path: &[DeviceId]) -> Option<f64> {
        self.per_path
            .get(path)
            .filter(|s| s.instances > 0)
            .map(|s| s.dropped as f64 / s.instances as f64)
    }

    /// Should a drop on this path be demoted to suspected-congestion and
    /// confirmed by repetition? Paths without calibration coverage — or with
    /// too little of it to trust a near-zero rate — demote conservatively.
    pub fn should_demote_drop(&self, path: &[DeviceId]) -> (bool, Option<f64>, bool) {
        let instances = self.per_path.get(path).map_or(0, |s| s.instances);
        match self.benign_drop_rate(path) {
            None => (true, None, true),
            Some(rate) => (
                rate > self.demote_threshold || instances < self.min_instances,
                Some(rate),
                instances < self.min_instances,
            ),
        }
    }

    /// Flood threshold (mean + sigma·std of calibration counts) for
    /// controller-bound trajectories attributed to `device`.
    pub fn controller_threshold(&self, device: &DeviceId, sigma: f64) -> f64 {
        if self.controller_units == 0 {
            return f64::INFINITY;
        }
        let counts = self.controller_counts.get(device);
        let n = self.controller_units as f64;
        let (sum, sumsq) = counts
            .map(|c| {
                c.iter()
                    .fold((0.0, 0.0), |(s, q), &x| (s + x as f64, q + (x * x) as f64))
            })
            .unwrap_or((0.0, 0.0));
        let mean = sum / n;
        let var = (sumsq / n - mean * mean).max(0.0);
        mean + sigma * var.sqrt() + 1e-9
    }
}

/// Estimate congestion characteristics from benign-run observations, one
/// batch per calibration unit.
pub fn estimate_congestion(
    snap: &NetworkSnapshot,
    calibration_units: &[Vec<Observation>],
    cfg: &DetectionConfig,
) -> CongestionEstimator {
    let mut est = CongestionEstimator::clean(cfg);
    est.controller_units = calibration_units.len();
    if calibration_units.is_empty() {
        est.warnings
            .push("no calibration data: conservative defaults everywhere".into());
        return est;
    }
    for unit in calibration_units {
        let mut labels: BTreeSet<PacketLabel> = BTreeSet::new();
        for o in unit {
            labels.insert(o.label);
        }
        let mut unit_controller: BTreeMap<DeviceId, usize> = BTreeMap::new();
        for label in labels {
            let forest = build_walk_forest(snap, label, unit);
            if forest.collision {
                continue;
            }
            for walk in &forest.walks {
                if !matches!(walk.origin, WalkOrigin::Injected { .. }) {
                    continue;
                }
                let path = walk.devices();
                let last = walk.hops.last().expect("non-empty walk");
                let completed = walk_completed(snap, last);
                if last.device.is_controller() {
                    if let Some(prev) = walk.hops.iter().rev().nth(1) {
                        *unit_controller.entry(prev.device.clone()).or_default() += 1;
                    }
                }
                let stats = est.per_path.entry(path).or_default();
                stats.instances += 1;
                if completed {
                    let nominal = cfg.hop_interval * (walk.hops.len() as SimNs - 1);
                    let took = last.timestamp - walk.hops[0].timestamp;
                    stats.excesses.push(took.saturating_sub(nominal));
                } else {
                    stats.dropped += 1;
                }
            }
        }
        for (dev, count) in unit_controller {
            est.controller_counts.entry(dev).or_default().push(count);
        }
    }
    // Pad missing units with zero counts so means are over all units.
    for counts in est.controller_counts.values_mut() {
        while counts.len() < est.controller_units {
            counts.push(0);
        }
    }
    let thin: usize = est.per_path.values().filter(|s| s.instances < 3).count();
    if thin > 0 {
        est.warnings.push(format!(
            "{thin} paths have fewer than 3 calibration instances; their drops demote conservatively"
        ));
    }
    est
}

/// Did this final hop leave the fabric on purpose (delivery), as opposed to
/// vanishing mid-flight?
fn walk_completed(snap: &NetworkSnapshot, last: &Observation) -> bool {
    if last.device.is_controller() {
        return true;
    }
    match last.out_port {
        ObservedOutput::Drop => true, // the table intended the drop
        ObservedOutput::ToController => false, // controller never saw it
        ObservedOutput::Port(p) => snap.link_peer(&last.device, p).is_none(),
    }
}

// ---------------------------------------------------------------------------
// Scanning
// ---------------------------------------------------------------------------

/// Everything a probe run returned: the label under test plus every
/// observation recorded while the probe was in flight (other labels seen in
/// the window are generation evidence).
#[derive(Debug, Clone)]
pub struct ProbeTrace {
    pub injected_at: SimNs,
    pub label: PacketLabel,
    pub observations: Vec<Observation>,
}

/// The data plane the scanner probes. Implemented by the simulator; a live
/// deployment would implement it against real packet injection.
pub trait ProbeDriver {
    fn run_probe(&mut self, src: &DeviceId, port: PortId, packet: PacketHeaderFields) -> ProbeTrace;
    /// Has the live network diverged from this snapshot?
    fn state_is_stale(&self, snap: &NetworkSnapshot) -> bool;
    fn now(&self) -> SimNs;
}

/// Result of scanning one target device on one port.
#[derive(Debug, Default)]
pub struct ScanOutcome {
    pub verdicts: Vec<Verdict>,
    /// Peers with an empty header space from the target: recorded, not an
    /// attack by itself.
    pub unreachable: Vec<DeviceId>,
    pub probes_sent: usize,
    /// Probe observation sets flagged as label collisions.
    pub invalid_trajectories: usize,
}

/// Scan one target device against every other device and the controller.
///
/// For each peer, a probe packet is drawn at random from the computed
/// header space (so an attacker cannot predict it), injected at the target,
/// and the reconstructed walk is classified. Aborts with
/// [`DetectError::StaleSnapshot`] if the live state changes mid-scan.
pub fn scan_for_attacks(
    snap: &NetworkSnapshot,
    target: &DeviceId,
    port: PortId,
    driver: &mut dyn ProbeDriver,
    estimator: &CongestionEstimator,
    cfg: &DetectionConfig,
    sweep: u64,
) -> Result<ScanOutcome, DetectError> {
    if snap.device(target).is_none() {
        return Err(DetectError::UnknownTarget(target.clone()));
    }
    if driver.state_is_stale(snap) {
        return Err(DetectError::StaleSnapshot { epoch: snap.epoch });
    }
    let mut out = ScanOutcome::default();
    let reach = hsa::propagate(snap, target, port)?;

    let mut peers: Vec<DeviceId> = snap.devices.keys().filter(|d| *d != target).cloned().collect();
    peers.push(DeviceId::controller());

    for peer in peers {
        if driver.state_is_stale(snap) {
            return Err(DetectError::StaleSnapshot { epoch: snap.epoch });
        }
        // Probes are drawn from the headers whose journey ends at the peer;
        // transit-only reachability gives no probe a defined endpoint.
        let (space, trajectories) = reach.to_terminal_destination(&peer);
        if space.is_empty() {
            out.unreachable.push(peer);
            continue;
        }
        // Per-pair probe randomness: what one pair draws never shifts what
        // another pair will draw, so pair scans replay and parallelize.
        let mut rng = seeded_rng(cfg.probe_seed, target, &peer, port, sweep);
        let mut pair_verdicts = judge_pair(
            snap, target, &peer, port, &trajectories, &space, driver, estimator, cfg, sweep,
            &mut rng, &mut out,
        );
        out.verdicts.append(&mut pair_verdicts);
    }
    Ok(out)
}

fn seeded_rng(
    seed: u64,
    target: &DeviceId,
    peer: &DeviceId,
    port: PortId,
    sweep: u64,
) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    target.hash(&mut h);
    peer.hash(&mut h);
    port.hash(&mut h);
    sweep.hash(&mut h);
    rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ h.finish())
}

/// Build a probe packet whose forwarding bits hit `point`.
fn probe_packet<R: rand::Rng>(rng: &mut R, point: u128, width: u16) -> PacketHeaderFields {
    PacketHeaderFields {
        src_addr: rng.gen(),
        dst_addr: 0,
        protocol: 6,
        ip_id: rng.gen(),
        src_port: rng.gen(),
        dst_port: rng.gen(),
        ttl: 64,
    }
    .with_forwarding_bits(point, width)
}

#[allow(clippy::too_many_arguments)]
fn judge_pair(
    snap: &NetworkSnapshot,
    target: &DeviceId,
    peer: &DeviceId,
    port: PortId,
    trajectories: &[ExpectedTrajectory],
    space: &crate::header::HeaderSpace,
    driver: &mut dyn ProbeDriver,
    estimator: &CongestionEstimator,
    cfg: &DetectionConfig,
    sweep: u64,
    rng: &mut rand_chacha::ChaCha8Rng,
    out: &mut ScanOutcome,
) -> Vec<Verdict> {
    let mut verdicts: Vec<Verdict> = Vec::new();
    let mut benign_evidence: Option<TrajectoryPair> = None;
    // (kind, devices) → (count, notes, evidence)
    let mut suspected: BTreeMap<VerdictKind, Vec<(BTreeSet<DeviceId>, TrajectoryPair, Vec<VerdictNote>)>> =
        BTreeMap::new();
    // Stratified probing: the base probes each land in a distinct region of
    // the header space, so a scoped attacker hiding in one prefix still
    // meets a probe. Suspicion focuses the confirmation retries back on the
    // region that misbehaved. Points inside a region are random, so probe
    // headers stay unpredictable.
    let mut pending: Vec<crate::header::HeaderPattern> =
        space.disjoint_cover().into_iter().take(16).collect();
    pending.reverse(); // consumed back to front, deterministic order
    let mut uniform_fill = cfg.probes_per_pair.saturating_sub(pending.len());
    let mut retries_left = cfg.confirm_retries;
    let mut focus: Option<crate::header::HeaderPattern> = None;
    let mut probes_done = 0usize;

    loop {
        let region = if let Some(r) = &focus {
            if retries_left == 0 {
                focus = None;
                continue;
            }
            retries_left -= 1;
            Some(*r)
        } else if let Some(r) = pending.pop() {
            Some(r)
        } else if uniform_fill > 0 {
            uniform_fill -= 1;
            None
        } else {
            break;
        };
        let point = match region {
            Some(piece) => piece.sample(rng),
            None => match space.sample(rng) {
                Some(p) => p,
                None => break,
            },
        };
        probes_done += 1;
        let packet = probe_packet(rng, point, snap.header_bits);
        let trace = driver.run_probe(target, port, packet);
        out.probes_sent += 1;

        // Foreign labels born during the probe window: generation evidence.
        for v in foreign_label_verdicts(snap, target, peer, port, &trace, cfg, sweep, driver.now())
        {
            if !verdicts.iter().any(|existing: &Verdict| {
                existing.kind == v.kind && existing.malicious_devices == v.malicious_devices
            }) {
                verdicts.push(v);
            }
        }

        let forest = build_walk_forest(snap, trace.label, &trace.observations);
        if forest.collision {
            out.invalid_trajectories += 1;
            continue;
        }
        let pair = build_pair(snap, target, peer, port, trajectories, &forest.walks, &trace, estimator, cfg);
        let (kind, mut notes) = classify(&pair, cfg);
        if kind == VerdictKind::Benign {
            benign_evidence.get_or_insert(pair);
            continue;
        }
        let probed_region = region.unwrap_or_else(|| {
            crate::header::HeaderPattern::exact(snap.header_bits, point)
        });
        let (devices, loc_notes) = localize(&pair, kind);
        notes.extend(loc_notes);

        // One probe can carry evidence against several devices at once (a
        // fork at a replicator plus a truncation at a dropper farther on);
        // decompose it so every implicated device gets its own finding —
        // the continuation analysis over the unexplained device sets.
        let mut findings: Vec<(VerdictKind, BTreeSet<DeviceId>, Vec<VerdictNote>)> =
            vec![(kind, devices, notes)];
        findings.extend(supplementary_findings(&pair, kind, cfg));

        for (kind, devices, mut notes) in findings {
            let needs_confirmation = match kind {
                VerdictKind::Drop => {
                    let key: Vec<DeviceId> = full_path_of(&pair);
                    let (demote, rate, uncalibrated) = estimator.should_demote_drop(&key);
                    if uncalibrated {
                        notes.push(VerdictNote::UncalibratedPath);
                    }
                    if demote {
                        notes.push(VerdictNote::SuspectedCongestionDrop {
                            benign_rate: rate.unwrap_or(0.0),
                        });
                    }
                    demote
                }
                VerdictKind::Delay => true, // jitter needs repetition
                _ => false,
            };

            if needs_confirmation {
                suspected.entry(kind).or_default().push((devices, pair.clone(), notes));
                // Focus the remaining retries on the region that misbehaved.
                focus.get_or_insert(probed_region);
                let (modal_devices, modal_count) = modal_of(&suspected[&kind]);
                let needed = cfg
                    .confirmations_required
                    .max((cfg.confirm_fraction * probes_done as f64).ceil() as usize);
                if modal_count >= needed {
                    let entries = suspected.remove(&kind).expect("just inserted");
                    let (devices, pair, mut notes) = entries
                        .into_iter()
                        .find(|(d, _, _)| *d == modal_devices)
                        .expect("modal set comes from the entries");
                    notes.push(VerdictNote::CongestionConfirmed { confirmations: modal_count });
                    if !verdicts
                        .iter()
                        .any(|v| v.kind == kind && v.malicious_devices == devices)
                    {
                        verdicts.push(Verdict {
                            sweep,
                            target: target.clone(),
                            peer: peer.clone(),
                            port,
                            kind,
                            malicious_devices: devices,
                            notes,
                            evidence: pair,
                            emitted_at: driver.now(),
                        });
                    }
                    focus = None; // confirmed: move on to the remaining regions
                }
                continue;
            }

            if !verdicts
                .iter()
                .any(|v| v.kind == kind && v.malicious_devices == devices)
            {
                verdicts.push(Verdict {
                    sweep,
                    target: target.clone(),
                    peer: peer.clone(),
                    port,
                    kind,
                    malicious_devices: devices,
                    notes,
                    evidence: pair.clone(),
                    emitted_at: driver.now(),
                });
            }
        }
    }

    // Unconfirmed suspicions decay into annotated benign verdicts.
    let unconfirmed: Vec<VerdictNote> = suspected
        .iter()
        .flat_map(|(kind, entries)| {
            entries.first().map(|(_, _, notes)| match kind {
                VerdictKind::Delay => VerdictNote::SuspectedJitter,
                _ => notes
                    .iter()
                    .find(|n| matches!(n, VerdictNote::SuspectedCongestionDrop { .. }))
                    .cloned()
                    .unwrap_or(VerdictNote::SuspectedJitter),
            })
        })
        .collect();

    if verdicts.is_empty() {
        let evidence = benign_evidence
            .or_else(|| suspected.into_values().flatten().next().map(|(_, p, _)| p));
        if let Some(evidence) = evidence {
            verdicts.push(Verdict {
                sweep,
                target: target.clone(),
                peer: peer.clone(),
                port,
                kind: VerdictKind::Benign,
                malicious_devices: BTreeSet::new(),
                notes: unconfirmed,
                evidence,
                emitted_at: driver.now(),
            });
        }
    }
    verdicts
}

/// Evidence in the pair beyond what the primary classification covered:
/// forks not yet attributed to a replicator, truncated walks not yet
/// attributed to a dropper, and per-hop time blowups not yet attributed to
/// a delayer.
fn supplementary_findings(
    pair: &TrajectoryPair,
    primary: VerdictKind,
    cfg: &DetectionConfig,
) -> Vec<(VerdictKind, BTreeSet<DeviceId>, Vec<VerdictNote>)> {
    let mut out = Vec::new();

    // Forks mean replication even when the pair as a whole classified as
    // something else (the original may have died downstream).
    if primary != VerdictKind::Replay {
        let forks = pair.fork_devices();
        if !forks.is_empty() {
            out.push((VerdictKind::Replay, forks, Vec::new()));
        }
    }

    // Walks that end mid-fabric without reaching the destination (or the
    // controller) are truncations; the deepest device of each swallowed the
    // packet. The primary drop finding already covers the primary walk.
    if primary != VerdictKind::Drop {
        let mut truncated: BTreeSet<DeviceId> = BTreeSet::new();
        for w in &pair.walks {
            let last = &w.hops.last().expect("non-empty walk").device;
            if last != &pair.dst && !last.is_controller() {
                // Looping walks are misroute evidence, not truncation.
                let devices = w.devices();
                let unique: BTreeSet<&DeviceId> = devices.iter().collect();
                if unique.len() == devices.len() {
                    truncated.insert(last.clone());
                }
            }
        }
        for device in truncated {
            out.push((VerdictKind::Drop, BTreeSet::from([device]), Vec::new()));
        }
    }

    // Per-hop time blowups show even on walks that never complete.
    if primary != VerdictKind::Delay {
        if let Some(walk) = pair.primary_walk() {
            let n = walk.hops.len();
            let mut cum_actual: SimNs = 0;
            for (i, hop) in walk.hops.iter().enumerate() {
                let prev = if i == 0 { pair.injected_at } else { walk.hops[i - 1].timestamp };
                cum_actual += hop.timestamp.saturating_sub(prev);
                let cum_expected = pair.hop_interval * (i as SimNs + 1);
                let share = (pair.t_d as f64 * (i + 1) as f64 / n as f64) as SimNs;
                if cum_actual.saturating_sub(cum_expected) > share.max(cfg.t_d_floor) {
                    out.push((
                        VerdictKind::Delay,
                        BTreeSet::from([hop.device.clone()]),
                        Vec::new(),
                    ));
                    break;
                }
            }
        }
    }

    out
}

/// Most frequent localization among confirmations with its count; ties
/// resolve deterministically.
fn modal_of(
    entries: &[(BTreeSet<DeviceId>, TrajectoryPair, Vec<VerdictNote>)],
) -> (BTreeSet<DeviceId>, usize) {
    let mut counts: BTreeMap<BTreeSet<DeviceId>, usize> = BTreeMap::new();
    for (devices, _, _) in entries {
        *counts.entry(devices.clone()).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
        .unwrap_or_default()
}

fn full_path_of(pair: &TrajectoryPair) -> Vec<DeviceId> {
    let mut full = vec![pair.src.clone()];
    full.extend(pair.best_expected.iter().cloned());
    full.push(pair.dst.clone());
    full
}

/// Walks under labels the scan never injected, rooted mid-network: packets
/// born inside the fabric during the probe window.
#[allow(clippy::too_many_arguments)]
fn foreign_label_verdicts(
    snap: &NetworkSnapshot,
    target: &DeviceId,
    peer: &DeviceId,
    port: PortId,
    trace: &ProbeTrace,
    cfg: &DetectionConfig,
    sweep: u64,
    now: SimNs,
) -> Vec<Verdict> {
    let mut labels: BTreeSet<PacketLabel> = trace.observations.iter().map(|o| o.label).collect();
    labels.remove(&trace.label);
    let mut out = Vec::new();
    for label in labels {
        let forest = build_walk_forest(snap, label, &trace.observations);
        for walk in &forest.walks {
            if let WalkOrigin::MidNetwork { sender } = &walk.origin {
                let mut devices = BTreeSet::new();
                let mut notes = vec![VerdictNote::UnexpectedLabel];
                match sender {
                    Some(s) => {
                        devices.insert(s.clone());
                    }
                    None => notes.push(VerdictNote::Unlocalizable),
                }
                let pair = TrajectoryPair {
                    src: target.clone(),
                    dst: peer.clone(),
                    port,
                    expected: Vec::new(),
                    best_expected: Vec::new(),
                    actual: walk.devices(),
                    destination_reached: false,
                    t_e: 0,
                    t_a: 0,
                    t_d: cfg.t_d_floor,
                    walks: vec![walk.clone()],
                    entry_sender: sender.clone(),
                    injected_at: trace.injected_at,
                    expected_full: Vec::new(),
                    hop_interval: cfg.hop_interval,
                };
                out.push(Verdict {
                    sweep,
                    target: target.clone(),
                    peer: peer.clone(),
                    port,
                    kind: VerdictKind::Generation,
                    malicious_devices: devices,
                    notes,
                    evidence: pair,
                    emitted_at: now,
                });
            }
        }
    }
    out
}

/// Assemble the expected-vs-actual pair for one probe.
#[allow(clippy::too_many_arguments)]
fn build_pair(
    snap: &NetworkSnapshot,
    src: &DeviceId,
    dst: &DeviceId,
    port: PortId,
    trajectories: &[ExpectedTrajectory],
    walks: &[Walk],
    trace: &ProbeTrace,
    estimator: &CongestionEstimator,
    cfg: &DetectionConfig,
) -> TrajectoryPair {
    let expected_full: Vec<Vec<DeviceId>> = trajectories.iter().map(|t| t.devices.clone()).collect();
    let expected: Vec<Vec<DeviceId>> = expected_full
        .iter()
        .map(|f| TrajectoryPair::interior(f, src, dst))
        .collect();

    // First-visit order across all walks, by observation timestamp.
    let mut all_obs: Vec<&Observation> = walks.iter().flat_map(|w| w.hops.iter()).collect();
    all_obs.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.device.cmp(&b.device)));
    let mut combined_full: Vec<DeviceId> = Vec::new();
    for o in &all_obs {
        if !combined_full.contains(&o.device) {
            combined_full.push(o.device.clone());
        }
    }
    let actual = TrajectoryPair::interior(&combined_full, src, dst);
    let destination_reached = combined_full.iter().any(|d| d == dst);

    // Best expected: longest common prefix with the combined walk, ties by
    // lexicographic device sequence.
    let best_expected = expected_full
        .iter()
        .max_by(|x, y| {
            let lx = common_prefix_len(x, &combined_full);
            let ly = common_prefix_len(y, &combined_full);
            lx.cmp(&ly).then_with(|| y.cmp(x))
        })
        .map(|f| TrajectoryPair::interior(f, src, dst))
        .unwrap_or_default();

    let entry_sender = walks.iter().find_map(|w| match &w.origin {
        WalkOrigin::MidNetwork { sender } => sender.clone(),
        _ => None,
    });

    let full_best = {
        let mut f = vec![src.clone()];
        f.extend(best_expected.iter().cloned());
        f.push(dst.clone());
        f
    };
    let t_e = cfg.hop_interval * (full_best.len() as SimNs - 1);
    let t_a = walks
        .iter()
        .filter(|w| w.devices().iter().any(|d| d == dst))
        .map(|w| w.hops.last().expect("non-empty").timestamp)
        .max()
        .or_else(|| all_obs.last().map(|o| o.timestamp))
        .map(|ts| ts.saturating_sub(trace.injected_at))
        .unwrap_or(0);
    let t_d = estimator.t_d(&full_best);

    let _ = snap;
    TrajectoryPair {
        src: src.clone(),
        dst: dst.clone(),
        port,
        expected,
        best_expected,
        actual,
        destination_reached,
        t_e,
        t_a,
        t_d,
        walks: walks.to_vec(),
        entry_sender,
        injected_at: trace.injected_at,
        expected_full,
        hop_interval: cfg.hop_interval,
    }
}

fn common_prefix_len(a: &[DeviceId], b: &[DeviceId]) -> usize {
    a.iter().zip(b.iter()).take_while(|(x, y)| x == y).count()
}

// ---------------------------------------------------------------------------
// Corpus-level checks
// ---------------------------------------------------------------------------

/// Findings from the traffic corpus itself, independent of probing.
#[derive(Debug, Default)]
pub struct CorpusFindings {
    pub verdicts: Vec<Verdict>,
    pub collisions: usize,
}

/// Sweep the traffic observations for packets born mid-network and for
/// abnormal trajectory counts toward the controller.
pub fn analyze_corpus(
    snap: &NetworkSnapshot,
    scan_round: &[Observation],
    estimator: &CongestionEstimator,
    cfg: &DetectionConfig,
    sweep: u64,
    now: SimNs,
) -> CorpusFindings {
    let mut findings = CorpusFindings::default();
    let labels: BTreeSet<PacketLabel> = scan_round.iter().map(|o| o.label).collect();
    let mut controller_counts: BTreeMap<DeviceId, usize> = BTreeMap::new();
    let mut flagged_generators: BTreeSet<DeviceId> = BTreeSet::new();

    for label in labels {
        let forest = build_walk_forest(snap, label, scan_round);
        if forest.collision {
            findings.collisions += 1;
            continue;
        }
        for walk in &forest.walks {
            let last = walk.hops.last().expect("non-empty");
            if last.device.is_controller() {
                if let Some(prev) = walk.hops.iter().rev().nth(1) {
                    *controller_counts.entry(prev.device.clone()).or_default() += 1;
                }
            }
            if let WalkOrigin::MidNetwork { sender: Some(sender) } = &walk.origin {
                if flagged_generators.insert(sender.clone()) {
                    findings.verdicts.push(Verdict {
                        sweep,
                        target: sender.clone(),
                        peer: last.device.clone(),
                        port: walk.hops[0].in_port,
                        kind: VerdictKind::Generation,
                        malicious_devices: BTreeSet::from([sender.clone()]),
                        notes: vec![VerdictNote::UnexpectedLabel],
                        evidence: TrajectoryPair {
                            src: sender.clone(),
                            dst: last.device.clone(),
                            port: walk.hops[0].in_port,
                            expected: Vec::new(),
                            best_expected: Vec::new(),
                            actual: walk.devices(),
                            destination_reached: false,
                            t_e: 0,
                            t_a: 0,
                            t_d: cfg.t_d_floor,
                            walks: vec![walk.clone()],
                            entry_sender: Some(sender.clone()),
                            injected_at: walk.hops[0].timestamp,
                            expected_full: Vec::new(),
                            hop_interval: cfg.hop_interval,
                        },
                        emitted_at: now,
                    });
                }
            }
        }
    }

    for (device, count) in controller_counts {
        if count < cfg.controller_flood_min {
            continue;
        }
        let threshold = estimator.controller_threshold(&device, cfg.controller_sigma);
        if (count as f64) > threshold {
            findings.verdicts.push(Verdict {
                sweep,
                target: device.clone(),
                peer: DeviceId::controller(),
                port: PortId(0),
                kind: VerdictKind::Replay,
                malicious_devices: BTreeSet::from([device.clone()]),
                notes: vec![VerdictNote::ControllerFlood { count, threshold }],
                evidence: TrajectoryPair {
                    src: device.clone(),
                    dst: DeviceId::controller(),
                    port: PortId(0),
                    expected: Vec::new(),
                    best_expected: Vec::new(),
                    actual: Vec::new(),
                    destination_reached: true,
                    t_e: 0,
                    t_a: 0,
                    t_d: cfg.t_d_floor,
                    walks: Vec::new(),
                    entry_sender: None,
                    injected_at: now,
                    expected_full: Vec::new(),
                    hop_interval: cfg.hop_interval,
                },
                emitted_at: now,
            });
        }
    }
    findings
}

/// Derive a probe label the way the scanner will (exposed for harnesses).
pub fn probe_label(fields: &PacketHeaderFields, cfg: &DetectionConfig) -> PacketLabel {
    label_packet(fields, &cfg.label)
}
