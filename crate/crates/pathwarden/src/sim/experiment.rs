//! Experiment orchestration: build a network from a config, implant attacks,
//! drive the detect-and-respond loop sweep by sweep, and measure detection
//! quality against exact ground truth.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::{
    analyze_corpus, estimate_congestion, scan_for_attacks, CongestionEstimator, DetectError,
    DetectionConfig, Verdict, VerdictKind,
};
use crate::netmodel::{
    build_state, DeviceId, ModelError, NetworkSnapshot, PortId, RuleAction, RulesFile,
    TopologyFile,
};
use crate::response::{
    apply_to_network, parse_policies, ApplyContext, PolicyError, ResponseEngine, ResponsePolicy,
};
use crate::sim::rulegen::{generate_rules, GeneratedRules, RuleGenError};
use crate::sim::topo;
use crate::sim::{Activation, AttackImplant, CongestionModel, ImplantAction, ImplantScope, Network, SimError};
use crate::targetid::{build_scan_plan, ScanPlan, TrajectoryCorpus};
use crate::trajectory::{
    build_walk_forest, LabelConfig, Observation, PacketHeaderFields, PacketLabel, TrajectoryStore,
    WalkOrigin,
};
use crate::SimNs;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    RuleGen(#[from] RuleGenError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Fractions of each malicious action in the implant mix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackMix {
    pub count: usize,
    #[serde(default)]
    pub replay: f64,
    #[serde(default)]
    pub drop: f64,
    #[serde(default)]
    pub misroute: f64,
    #[serde(default)]
    pub generate: f64,
    #[serde(default)]
    pub delay: f64,
}

impl AttackMix {
    /// The evaluation mix: 40% replay, 30% drop, 5% misroute, 10% generate,
    /// 15% delay.
    pub fn standard(count: usize) -> Self {
        AttackMix { count, replay: 0.40, drop: 0.30, misroute: 0.05, generate: 0.10, delay: 0.15 }
    }

    fn validate(&self) -> Result<(), ExperimentError> {
        let sum = self.replay + self.drop + self.misroute + self.generate + self.delay;
        if sum > 1.0 + 1e-9 {
            return Err(ExperimentError::Config(format!(
                "attack fractions sum to {sum}, must be ≤ 1"
            )));
        }
        if [self.replay, self.drop, self.misroute, self.generate, self.delay]
            .iter()
            .any(|f| *f < 0.0)
        {
            return Err(ExperimentError::Config("attack fractions must be ≥ 0".into()));
        }
        Ok(())
    }

    /// Integer apportionment by largest remainder, deterministic tie order.
    pub fn apportion(&self) -> [usize; 5] {
        let fractions = [self.replay, self.drop, self.misroute, self.generate, self.delay];
        let weight_sum: f64 = fractions.iter().sum();
        if weight_sum <= 0.0 || self.count == 0 {
            return [0; 5];
        }
        let exact: Vec<f64> = fractions
            .iter()
            .map(|f| self.count as f64 * f / weight_sum)
            .collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut assigned: usize = counts.iter().sum();
        let mut order: Vec<usize> = (0..5).collect();
        order.sort_by(|&a, &b| {
            let ra = exact[a] - exact[a].floor();
            let rb = exact[b] - exact[b].floor();
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        let mut i = 0;
        while assigned < self.count {
            counts[order[i % 5]] += 1;
            assigned += 1;
            i += 1;
        }
        [counts[0], counts[1], counts[2], counts[3], counts[4]]
    }
}

/// One experiment, loadable from a TOML config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Named topology (`aarnet`, `zib54`, `line:N`, `ring:N`, `star:N`,
    /// `branching-isp`, `transit-spine`) or a path to a topology JSON file.
    pub topology: String,
    /// Optional path to a rules JSON file; generated when absent.
    #[serde(default)]
    pub rules: Option<String>,
    #[serde(default = "defaults::prefixes")]
    pub prefixes: usize,
    #[serde(default = "defaults::header_bits")]
    pub header_bits: u16,
    #[serde(default = "defaults::label_bits")]
    pub label_bits: u8,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::flows")]
    pub flows: usize,
    #[serde(default = "defaults::sweeps")]
    pub sweeps: usize,
    #[serde(default = "defaults::calibration_window")]
    pub calibration_window: usize,
    #[serde(default)]
    pub congestion_drop_rate: f64,
    #[serde(default = "defaults::congestion_max_jitter_ns")]
    pub congestion_max_jitter_ns: SimNs,
    #[serde(default = "defaults::groups")]
    pub groups: usize,
    #[serde(default = "defaults::ports")]
    pub ports: Vec<u16>,
    #[serde(default = "defaults::hop_interval_ns")]
    pub hop_interval_ns: SimNs,
    #[serde(default = "defaults::probes_per_pair")]
    pub probes_per_pair: usize,
    #[serde(default = "defaults::confirm_retries")]
    pub confirm_retries: usize,
    #[serde(default = "defaults::confirmations_required")]
    pub confirmations_required: usize,
    #[serde(default = "defaults::t_d_floor_ns")]
    pub t_d_floor_ns: SimNs,
    #[serde(default = "defaults::demote_threshold")]
    pub demote_threshold: f64,
    /// Path to a response-policy XML document.
    #[serde(default)]
    pub policies: Option<String>,
    #[serde(default)]
    pub attacks: Option<AttackMix>,
}

mod defaults {
    pub fn prefixes() -> usize {
        40
    }
    pub fn header_bits() -> u16 {
        32
    }
    pub fn label_bits() -> u8 {
        20
    }
    pub fn flows() -> usize {
        400
    }
    pub fn sweeps() -> usize {
        1
    }
    pub fn calibration_window() -> usize {
        3
    }
    pub fn congestion_max_jitter_ns() -> u64 {
        200_000
    }
    pub fn groups() -> usize {
        3
    }
    pub fn ports() -> Vec<u16> {
        vec![0]
    }
    pub fn hop_interval_ns() -> u64 {
        1_000_000
    }
    pub fn probes_per_pair() -> usize {
        3
    }
    pub fn confirm_retries() -> usize {
        12
    }
    pub fn confirmations_required() -> usize {
        3
    }
    pub fn t_d_floor_ns() -> u64 {
        2_000_000
    }
    pub fn demote_threshold() -> f64 {
        0.001
    }
}

impl ExperimentConfig {
    pub fn named(topology: &str) -> Self {
        ExperimentConfig {
            topology: topology.to_string(),
            rules: None,
            prefixes: defaults::prefixes(),
            header_bits: defaults::header_bits(),
            label_bits: defaults::label_bits(),
            seed: 0,
            flows: defaults::flows(),
            sweeps: defaults::sweeps(),
            calibration_window: defaults::calibration_window(),
            congestion_drop_rate: 0.0,
            congestion_max_jitter_ns: defaults::congestion_max_jitter_ns(),
            groups: defaults::groups(),
            ports: defaults::ports(),
            hop_interval_ns: defaults::hop_interval_ns(),
            probes_per_pair: defaults::probes_per_pair(),
            confirm_retries: defaults::confirm_retries(),
            confirmations_required: defaults::confirmations_required(),
            t_d_floor_ns: defaults::t_d_floor_ns(),
            demote_threshold: defaults::demote_threshold(),
            policies: None,
            attacks: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        if let Some(mix) = &cfg.attacks {
            mix.validate()?;
        }
        Ok(cfg)
    }

    pub fn detection(&self) -> DetectionConfig {
        DetectionConfig {
            probes_per_pair: self.probes_per_pair,
            confirm_retries: self.confirm_retries,
            confirmations_required: self.confirmations_required,
            confirm_fraction: 0.3,
            min_calibration_instances: 50,
            t_d_floor: self.t_d_floor_ns,
            demote_threshold: self.demote_threshold,
            hop_interval: self.hop_interval_ns,
            probe_seed: self.seed,
            literal_drop_rule: false,
            controller_sigma: 3.0,
            controller_flood_min: 5,
            label: LabelConfig { width_bits: self.label_bits },
        }
    }

    /// Resolve the topology reference to a concrete file.
    pub fn resolve_topology(&self) -> Result<TopologyFile, ExperimentError> {
        resolve_topology_name(&self.topology)
    }
}

pub fn resolve_topology_name(name: &str) -> Result<TopologyFile, ExperimentError> {
    if let Some(n) = name.strip_prefix("line:") {
        return Ok(topo::line(parse_n(n)?));
    }
    if let Some(n) = name.strip_prefix("ring:") {
        return Ok(topo::ring(parse_n(n)?));
    }
    if let Some(n) = name.strip_prefix("star:") {
        return Ok(topo::star(parse_n(n)?));
    }
    match name {
        "aarnet" => Ok(topo::aarnet()),
        "zib54" => Ok(topo::zib54()),
        "transit-spine" => Ok(topo::transit_spine()),
        "branching-isp" => Ok(topo::branching_isp().0),
        path if std::path::Path::new(path).exists() => {
            let text = std::fs::read_to_string(path)?;
            Ok(TopologyFile::from_json(&text)?)
        }
        other => Err(ExperimentError::Config(format!("unknown topology {other:?}"))),
    }
}

fn parse_n(s: &str) -> Result<usize, ExperimentError> {
    s.parse()
        .map_err(|_| ExperimentError::Config(format!("bad size {s:?}")))
}

// ---------------------------------------------------------------------------
// Implant planning
// ---------------------------------------------------------------------------

/// Normalized scope weights (all-ports, subset-on-port twice, port, subset,
/// controller-bound), taken from the implantation distribution and
/// renormalized because the published shares overlap.
const SCOPE_WEIGHTS: [(u32, &str); 5] = [
    (30, "all"),
    (38, "subset_on_port"),
    (25, "port"),
    (15, "subset"),
    (11, "controller"),
];

/// Plan a deterministic set of single-device implants realizing the mix.
///
/// Placement honors detectability constraints: misroute implants need a
/// second wired port, replay targets avoid the path the copy would have
/// taken anyway (stub devices replay toward the controller), subset
/// selectors pick prefixes whose traffic actually crosses the device, and
/// scoped implants on stub devices attach to the injection port.
pub fn plan_implants(
    snap: &NetworkSnapshot,
    gen: &GeneratedRules,
    mix: &AttackMix,
    seed: u64,
) -> Result<Vec<AttackImplant>, ExperimentError> {
    mix.validate()?;
    let counts = mix.apportion();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ IMPLANT_STREAM);
    let mut devices: Vec<DeviceId> = snap.devices.keys().cloned().collect();
    devices.shuffle(&mut rng);

    let degree = |d: &DeviceId| snap.links.keys().filter(|(a, _)| a == d).count();
    let transit = transit_prefixes(snap, gen);

    let mut implants: Vec<AttackImplant> = Vec::new();
    let mut cursor = 0usize;
    let mut scope_cursor = 0usize;
    // Traffic-killing kinds are planned last so their shadow falls on as few
    // scoped implants as possible.
    let actions: [(usize, &str); 5] = [
        (counts[0], "replay"),
        (counts[3], "generate"),
        (counts[4], "delay"),
        (counts[2], "misroute"),
        (counts[1], "drop"),
    ];
    let delay_amounts: [SimNs; 3] = [10_000_000, 15_000_000, 20_000_000];
    let selectivities: [f64; 4] = [1.0, 1.0, 0.7, 0.5];

    for (count, kind) in actions {
        for i in 0..count {
            let scope_kind = next_scope_kind(&mut scope_cursor);
            let mut placed = false;
            'placement: for _ in 0..devices.len() {
                let device = devices[cursor % devices.len()].clone();
                cursor += 1;
                if kind == "misroute" && degree(&device) < 2 {
                    continue;
                }
                // Vary the scope parameters (and finally the scope kind)
                // until the implant coexists with what is already planned.
                for variant in 0..8 {
                    let scope =
                        pick_scope(snap, gen, &transit, &device, scope_kind, variant);
                    let candidate =
                        build_implant(snap, gen, kind, &device, scope, i, &delay_amounts, &selectivities);
                    if !conflicts_with(&implants, &candidate) {
                        implants.push(candidate);
                        placed = true;
                        break 'placement;
                    }
                }
            }
            if !placed {
                return Err(ExperimentError::Config(format!(
                    "no conflict-free placement for a {kind} implant"
                )));
            }
        }
    }
    Ok(implants)
}

/// Would installing `candidate` violate the one-exclusive-per-scope rule?
fn conflicts_with(existing: &[AttackImplant], candidate: &AttackImplant) -> bool {
    if !candidate.action.exclusive() {
        return false;
    }
    existing.iter().any(|other| {
        other.action.exclusive()
            && other.scope == candidate.scope
            && other.devices.iter().any(|d| candidate.devices.contains(d))
    })
}

/// Weighted deterministic walk over the scope-kind distribution.
fn next_scope_kind(cursor: &mut usize) -> &'static str {
    let total: u32 = SCOPE_WEIGHTS.iter().map(|(w, _)| w).sum();
    let pick = (*cursor as u32 * 7919) % total;
    *cursor += 1;
    let mut acc = 0;
    for (w, name) in SCOPE_WEIGHTS {
        acc += w;
        if pick < acc {
            return name;
        }
    }
    "all"
}

fn build_implant(
    snap: &NetworkSnapshot,
    gen: &GeneratedRules,
    kind: &str,
    device: &DeviceId,
    scope: ImplantScope,
    salt: usize,
    delay_amounts: &[SimNs; 3],
    selectivities: &[f64; 4],
) -> AttackImplant {
    let trigger_prefix = match &scope {
        ImplantScope::SubsetOnPort { selector, .. } | ImplantScope::Subset { selector } => {
            prefix_index_of(gen, selector).unwrap_or(0)
        }
        _ => 0,
    };
    let action = match kind {
        "replay" => ImplantAction::Replay { to: pick_replay_target(snap, gen, device) },
        "drop" => ImplantAction::Drop { selectivity: selectivities[salt % selectivities.len()] },
        "misroute" => {
            ImplantAction::Misroute { to: pick_misroute_port(snap, gen, device, trigger_prefix) }
        }
        "generate" => ImplantAction::Generate { rewrite: pick_rewrite(snap, gen, device, salt) },
        "delay" => ImplantAction::Delay { amount: delay_amounts[salt % delay_amounts.len()] },
        other => unreachable!("unknown implant kind {other}"),
    };
    AttackImplant::single(device.clone(), action, scope, Activation::Always)
}

fn prefix_index_of(gen: &GeneratedRules, selector: &crate::header::HeaderPattern) -> Option<usize> {
    (0..gen.owners.len()).find(|&i| {
        crate::sim::rulegen::prefix_pattern(i, gen.prefix_len, selector.width()) == *selector
    })
}

/// Plan implants and verify by dry-run that every one of them is actually
/// flagged by a probing sweep; implants whose evidence is invisible (a
/// scoped implant shadowed behind a planned black hole, a drop aimed only
/// at traffic terminating on the dropper itself) are re-scoped or relocated
/// until the whole set is detectable.
pub fn plan_reachable_implants(
    state: &crate::netmodel::NetworkState,
    gen: &GeneratedRules,
    mix: &AttackMix,
    seed: u64,
    det: &DetectionConfig,
) -> Result<Vec<AttackImplant>, ExperimentError> {
    let mut snap = state.clone().snapshot();
    let mut implants = plan_implants(&snap, gen, mix, seed)?;
    let devices: Vec<DeviceId> = snap.devices.keys().cloned().collect();
    let delay_amounts: [SimNs; 3] = [10_000_000, 15_000_000, 20_000_000];
    let selectivities: [f64; 4] = [1.0, 1.0, 0.7, 0.5];

    for round in 0..4 {
        let inactive = dry_run_undetected(state, &implants, det)?;
        if inactive.is_empty() {
            break;
        }
        for idx in inactive {
            let implant = &implants[idx];
            let kind = implant.action.name();
            let device = implant.devices.iter().next().expect("planned singles").clone();
            let others: Vec<AttackImplant> = implants
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != idx)
                .map(|(_, o)| o.clone())
                .collect();
            // Remedy 1: widen the scope in place. Remedy 2+: relocate, in a
            // deterministic rotation, to any device that accepts it.
            let mut candidates: Vec<DeviceId> = vec![device.clone()];
            candidates.extend(
                devices
                    .iter()
                    .cycle()
                    .skip((idx + round) % devices.len())
                    .take(devices.len())
                    .cloned(),
            );
            let mut replacement = None;
            'search: for cand in candidates {
                if kind == "misroute"
                    && snap.links.keys().filter(|(a, _)| a == &cand).count() < 2
                {
                    continue;
                }
                for variant in 0..8 {
                    // Widening first: variants ≥ 4 walk toward AllPackets.
                    let scope = pick_scope(&snap, gen, &transit_map(&snap, gen), &cand, "all", variant);
                    let built = build_implant(
                        &snap,
                        gen,
                        kind,
                        &cand,
                        scope,
                        idx,
                        &delay_amounts,
                        &selectivities,
                    );
                    if !conflicts_with(&others, &built) {
                        replacement = Some(built);
                        break 'search;
                    }
                }
            }
            if let Some(built) = replacement {
                implants[idx] = built;
            }
        }
        snap = state.clone().snapshot();
    }
    Ok(implants)
}

fn transit_map(
    snap: &NetworkSnapshot,
    gen: &GeneratedRules,
) -> BTreeMap<DeviceId, BTreeMap<PortId, Vec<usize>>> {
    transit_prefixes(snap, gen)
}

/// Indices of implants no verdict names when every pair is probed once.
fn dry_run_undetected(
    state: &crate::netmodel::NetworkState,
    implants: &[AttackImplant],
    det: &DetectionConfig,
) -> Result<Vec<usize>, ExperimentError> {
    let mut net = Network::new(state.clone(), det.probe_seed ^ 0xd87, det.hop_interval, det.label);
    for implant in implants {
        net.implant(implant.clone())?;
    }
    let snap = net.snapshot();
    let estimator = CongestionEstimator::clean(det);
    let mut flagged: BTreeSet<DeviceId> = BTreeSet::new();
    // Sweep number 1 so the dry run draws the same probe headers as the
    // first real sweep.
    for target in snap.devices.keys() {
        let outcome = scan_for_attacks(&snap, target, PortId(0), &mut net, &estimator, det, 1)?;
        for v in outcome.verdicts.iter().filter(|v| v.kind != VerdictKind::Benign) {
            flagged.extend(v.malicious_devices.iter().cloned());
        }
    }
    Ok(net
        .ground_truth
        .iter()
        .enumerate()
        .filter(|(_, rec)| !rec.implant.devices.iter().any(|d| flagged.contains(d)))
        .map(|(i, _)| i)
        .collect())
}

const IMPLANT_STREAM: u64 = 0x0dd5_1a97;
const TRAFFIC_STREAM: u64 = 0x7fa_f41c;

fn pick_scope(
    snap: &NetworkSnapshot,
    gen: &GeneratedRules,
    transit: &BTreeMap<DeviceId, BTreeMap<PortId, Vec<usize>>>,
    device: &DeviceId,
    scope_kind: &str,
    variant: usize,
) -> ImplantScope {
    // Controller-bound shares fold into replay-to-controller; other kinds
    // fall back to the all-packets scope because the generated tables send
    // nothing to the control plane. High variants escalate toward broader
    // scopes to dodge placement conflicts.
    let chosen = if scope_kind == "controller" {
        "all"
    } else if variant >= 4 {
        ["subset", "subset_on_port", "port", "all"][variant % 4]
    } else {
        scope_kind
    };
    if chosen == "all" {
        return ImplantScope::AllPackets;
    }
    // Transit ingress ports ordered by how many prefixes cross them; stubs
    // see guaranteed traffic only on their injection port.
    let mut ports: Vec<(PortId, Vec<usize>)> = transit
        .get(device)
        .map(|m| m.iter().map(|(p, v)| (*p, v.clone())).collect())
        .unwrap_or_default();
    ports.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));
    if ports.is_empty() {
        let foreign: Vec<usize> = (0..gen.owners.len())
            .filter(|&i| gen.owners[i].as_str() != device.as_str())
            .collect();
        ports.push((PortId(0), foreign));
    }
    let (port, prefixes) = &ports[variant % ports.len()];
    let prefix = prefixes[(variant / ports.len()) % prefixes.len().max(1)];
    let selector =
        crate::sim::rulegen::prefix_pattern(prefix, gen.prefix_len, snap.header_bits);
    match chosen {
        "port" => ImplantScope::PacketsOfPort { port: *port },
        "subset_on_port" => ImplantScope::SubsetOnPort { port: *port, selector },
        "subset" => ImplantScope::Subset { selector },
        _ => ImplantScope::AllPackets,
    }
}

/// Per device: which prefixes cross it in transit (someone else's next hop
/// toward the owner), keyed by the ingress port the transit traffic uses.
fn transit_prefixes(
    snap: &NetworkSnapshot,
    gen: &GeneratedRules,
) -> BTreeMap<DeviceId, BTreeMap<PortId, Vec<usize>>> {
    let mut out: BTreeMap<DeviceId, BTreeMap<PortId, Vec<usize>>> = BTreeMap::new();
    for (i, owner) in gen.owners.iter().enumerate() {
        let pattern = crate::sim::rulegen::prefix_pattern(i, gen.prefix_len, snap.header_bits);
        let probe_bits = pattern.sample(&mut ChaCha8Rng::seed_from_u64(i as u64));
        for (vid, dev) in &snap.devices {
            if vid.as_str() == owner.as_str() {
                continue;
            }
            if let Some(rule) = dev.lookup(probe_bits, PortId(0)) {
                if let RuleAction::Forward(p) = rule.action {
                    if let Some((next, ingress)) = snap.link_peer(vid, p) {
                        if next.as_str() != owner.as_str() {
                            out.entry(next.clone())
                                .or_default()
                                .entry(*ingress)
                                .or_default()
                                .push(i);
                        }
                    }
                }
            }
        }
    }
    for ports in out.values_mut() {
        for v in ports.values_mut() {
            v.sort_unstable();
            v.dedup();
        }
    }
    out
}

/// Concrete next hop of `device` for one prefix, if it forwards into the
/// fabric.
fn next_hop_for(snap: &NetworkSnapshot, gen: &GeneratedRules, device: &DeviceId, prefix: usize) -> Option<DeviceId> {
    let bits = gen.dst_bits(prefix, 0x5a);
    let rule = snap.device(device)?.lookup(bits, PortId(0))?;
    match rule.action {
        RuleAction::Forward(p) => snap.link_peer(device, p).map(|(d, _)| d.clone()),
        _ => None,
    }
}

/// Replay target: a neighbor that does not route copied traffic straight
/// back through the replayer (which would only duplicate the original path),
/// preferring the one most traffic detours around. Falls back to the
/// controller for stubs.
fn pick_replay_target(snap: &NetworkSnapshot, gen: &GeneratedRules, device: &DeviceId) -> DeviceId {
    let neighbors: Vec<(PortId, DeviceId)> = snap
        .links
        .iter()
        .filter(|((a, _), _)| a == device)
        .map(|((_, p), (b, _))| (*p, b.clone()))
        .collect();
    if neighbors.len() < 2 {
        return DeviceId::controller();
    }
    // Score: prefixes whose route from the neighbor avoids the replayer.
    let mut best: Option<(usize, &DeviceId)> = None;
    for (_, n) in &neighbors {
        let avoids = (0..gen.owners.len())
            .filter(|&i| next_hop_for(snap, gen, n, i).map_or(true, |h| h != *device))
            .count();
        match best {
            Some((score, _)) if score >= avoids => {}
            _ => best = Some((avoids, n)),
        }
    }
    match best {
        Some((score, n)) if score > 0 => n.clone(),
        _ => DeviceId::controller(),
    }
}

/// Misroute port: prefer the wired port whose neighbor routes the most
/// diverted traffic straight back (a forwarding loop, the unambiguous
/// misroute signature); otherwise the least-used wired port so most traffic
/// deviates.
fn pick_misroute_port(
    snap: &NetworkSnapshot,
    gen: &GeneratedRules,
    device: &DeviceId,
    trigger_prefix: usize,
) -> PortId {
    let dev = snap.device(device).expect("implant device exists");
    let neighbors: Vec<(PortId, DeviceId)> = snap
        .links
        .iter()
        .filter(|((a, _), _)| a == device)
        .map(|((_, p), (b, _))| (*p, b.clone()))
        .collect();
    // Score each port by how many prefixes its neighbor would bounce back.
    let mut best: Option<(usize, PortId)> = None;
    for (port, n) in &neighbors {
        let bounced = (0..gen.owners.len())
            .filter(|&i| next_hop_for(snap, gen, n, i) == Some(device.clone()))
            .count();
        let trigger_bounces =
            next_hop_for(snap, gen, n, trigger_prefix) == Some(device.clone());
        let score = bounced + if trigger_bounces { gen.owners.len() } else { 0 };
        match best {
            Some((s, _)) if s >= score => {}
            _ => best = Some((score, *port)),
        }
    }
    if let Some((score, port)) = best {
        if score > 0 {
            return port;
        }
    }
    let mut usage: BTreeMap<PortId, usize> = neighbors.iter().map(|(p, _)| (*p, 0)).collect();
    for rule in &dev.flow_table {
        if let RuleAction::Forward(p) = rule.action {
            if let Some(u) = usage.get_mut(&p) {
                *u += 1;
            }
        }
    }
    usage
        .iter()
        .min_by(|a, b| a.1.cmp(b.1).then(a.0.cmp(b.0)))
        .map(|(p, _)| *p)
        .expect("misroute devices have wired ports")
}

/// Rewrite mask retargeting the destination prefix to a different owner.
fn pick_rewrite(
    snap: &NetworkSnapshot,
    gen: &GeneratedRules,
    device: &DeviceId,
    salt: usize,
) -> crate::header::HeaderPattern {
    let n = gen.owners.len();
    let mut target = (salt * 13 + 5) % n;
    if gen.owners[target].as_str() == device.as_str() {
        target = (target + 1) % n;
    }
    crate::sim::rulegen::prefix_pattern(target, gen.prefix_len, snap.header_bits)
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Outcome of one implanted attack, judged against ground truth.
#[derive(Debug, Clone, Serialize)]
pub struct AttackOutcome {
    pub devices: Vec<DeviceId>,
    pub action: String,
    pub reachable: bool,
    pub detected: bool,
    pub kind_matched: bool,
    pub localized: bool,
    /// Simulated time from the first malicious routing instant to the first
    /// matching verdict.
    pub latency_ns: Option<SimNs>,
    pub latency_sweeps: Option<u64>,
}

/// Deterministic per-sweep metrics. Wall-clock phase timings live in
/// [`PhaseTimings`] and are deliberately kept out of this report so reports
/// are byte-identical across runs of the same seed.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub sweep: u64,
    pub devices: usize,
    pub rules: usize,
    pub trajectories: usize,
    pub implanted: usize,
    pub reachable: usize,
    pub detected: usize,
    /// detected / reachable; null when nothing was reachable (vacuous).
    pub accuracy: Option<f64>,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub false_negative_rate: Option<f64>,
    pub localization_hits: usize,
    pub localization_total: usize,
    pub benign_verdicts: usize,
    pub nonbenign_verdicts: usize,
    pub unreachable_pairs: usize,
    pub invalid_trajectories: usize,
    pub probes_sent: usize,
    pub actions_issued: usize,
    pub default_alarms: usize,
    pub recovered_devices: Vec<DeviceId>,
    pub estimator_warnings: Vec<String>,
    pub per_attack: Vec<AttackOutcome>,
}

/// Wall-clock phase timings for one sweep (reporting only).
#[derive(Debug, Clone, Default, Serialize)]
pub struct PhaseTimings {
    pub corpus_ms: u128,
    pub target_id_ms: u128,
    pub scan_ms: u128,
    pub policy_ms: u128,
}

#[derive(Debug)]
pub struct SweepResult {
    pub metrics: MetricsReport,
    pub timings: PhaseTimings,
    pub verdicts: Vec<Verdict>,
    pub scan_plan: ScanPlan,
}

#[derive(Debug)]
pub struct ExperimentReport {
    pub sweeps: Vec<SweepResult>,
    pub implants: Vec<AttackImplant>,
}

impl ExperimentReport {
    /// All verdicts across sweeps as line-oriented JSON.
    pub fn verdicts_jsonl(&self) -> String {
        let mut out = String::new();
        for sweep in &self.sweeps {
            for v in &sweep.verdicts {
                out.push_str(&serde_json::to_string(v).expect("verdict serializes"));
                out.push('\n');
            }
        }
        out
    }

    pub fn final_metrics(&self) -> &MetricsReport {
        &self.sweeps.last().expect("at least one sweep").metrics
    }
}

// ---------------------------------------------------------------------------
// The experiment driver
// ---------------------------------------------------------------------------

pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub net: Network,
    pub generated: Option<GeneratedRules>,
    pub policies: Vec<ResponsePolicy>,
    pub engine: ResponseEngine,
    det: DetectionConfig,
    /// (device, port, originating sweep) queued by test-again actions.
    reprobe: Vec<(DeviceId, PortId, u64)>,
    pub alarm_log: Vec<String>,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self, ExperimentError> {
        let topo = cfg.resolve_topology()?;
        let (rules, generated) = match &cfg.rules {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                (RulesFile::from_json(&text)?, None)
            }
            None => {
                if cfg.topology == "branching-isp" {
                    (topo::branching_isp().1, None)
                } else {
                    let gen = generate_rules(&topo, cfg.prefixes, cfg.header_bits, cfg.seed)?;
                    (gen.rules.clone(), Some(gen))
                }
            }
        };
        let state = build_state(&topo, &rules)?;
        let mut net = Network::new(
            state,
            cfg.seed,
            cfg.hop_interval_ns,
            LabelConfig { width_bits: cfg.label_bits },
        );
        if cfg.congestion_drop_rate > 0.0 {
            net.set_congestion(Some(CongestionModel {
                drop_rate: cfg.congestion_drop_rate,
                max_jitter: cfg.congestion_max_jitter_ns,
            }));
        }
        let policies = match &cfg.policies {
            Some(path) => parse_policies(&std::fs::read_to_string(path)?)?,
            None => Vec::new(),
        };
        let det = cfg.detection();
        Ok(Experiment {
            cfg,
            net,
            generated,
            policies,
            engine: ResponseEngine::new(),
            det,
            reprobe: Vec::new(),
            alarm_log: Vec::new(),
        })
    }

    pub fn with_policies(mut self, policies: Vec<ResponsePolicy>) -> Self {
        self.policies = policies;
        self
    }

    /// Install the configured attack mix (if any) and return the plan.
    pub fn implant_configured_attacks(&mut self) -> Result<Vec<AttackImplant>, ExperimentError> {
        let Some(mix) = self.cfg.attacks.clone() else {
            return Ok(Vec::new());
        };
        let gen = self
            .generated
            .clone()
            .ok_or_else(|| ExperimentError::Config("attack planning needs generated rules".into()))?;
        let implants =
            plan_reachable_implants(&self.net.state, &gen, &mix, self.cfg.seed, &self.det)?;
        for implant in &implants {
            self.net.implant(implant.clone())?;
        }
        Ok(implants)
    }

    pub fn implant(&mut self, implant: AttackImplant) -> Result<(), ExperimentError> {
        self.net.implant(implant)?;
        Ok(())
    }

    /// Run the configured number of sweeps.
    pub fn run(&mut self) -> Result<ExperimentReport, ExperimentError> {
        let mut sweeps = Vec::new();
        for sweep in 1..=self.cfg.sweeps as u64 {
            sweeps.push(self.run_sweep(sweep)?);
        }
        Ok(ExperimentReport { sweeps, implants: self.net.ground_truth.iter().map(|r| r.implant.clone()).collect() })
    }

    /// One full detect-and-respond sweep.
    pub fn run_sweep(&mut self, sweep: u64) -> Result<SweepResult, ExperimentError> {
        let t0 = Instant::now();
        let mut timings = PhaseTimings::default();
        let snap = self.net.snapshot();

        // Benign-plus-whatever traffic, one batch per calibration unit.
        let window = self.cfg.calibration_window.max(1);
        let mut units: Vec<Vec<Observation>> = Vec::with_capacity(window);
        for unit in 0..window {
            units.push(self.traffic_round(sweep, unit as u64));
        }
        let estimator = estimate_congestion(&snap, &units, &self.det);
        let flood_baseline =
            estimate_congestion(&snap, &units[..units.len().saturating_sub(1)], &self.det);

        // Corpus of deduplicated trajectories.
        let mut store = TrajectoryStore::new();
        let mut invalid = 0usize;
        for unit in &units {
            let labels: BTreeSet<PacketLabel> = unit.iter().map(|o| o.label).collect();
            for label in labels {
                let forest = build_walk_forest(&snap, label, unit);
                if forest.collision {
                    invalid += 1;
                    continue;
                }
                for walk in &forest.walks {
                    if matches!(walk.origin, WalkOrigin::Injected { .. }) {
                        store.insert(walk.to_trajectory(label));
                    }
                }
            }
        }
        let corpus = TrajectoryCorpus::from_store(&store);
        timings.corpus_ms = t0.elapsed().as_millis();

        // Inspection priorities.
        let t1 = Instant::now();
        let plan = match build_scan_plan(&corpus, &snap, self.cfg.groups) {
            Ok(plan) => plan,
            Err(_) => ScanPlan::uniform(&snap),
        };
        timings.target_id_ms = t1.elapsed().as_millis();

        // Scan every device, priority groups first, on every port under
        // test. A stale snapshot aborts and restarts the sweep's scans.
        let t2 = Instant::now();
        let mut verdicts: Vec<Verdict> = Vec::new();
        let mut unreachable_pairs = 0usize;
        let mut probes_sent = 0usize;
        let mut snap_current = snap.clone();
        'attempts: for attempt in 0..3 {
            verdicts.clear();
            unreachable_pairs = 0;
            probes_sent = 0;
            let mut stale = false;
            for port in self.cfg.ports.clone() {
                for target in plan.scan_order() {
                    match scan_for_attacks(
                        &snap_current,
                        &target,
                        PortId(port),
                        &mut self.net,
                        &estimator,
                        &self.det,
                        sweep,
                    ) {
                        Ok(outcome) => {
                            verdicts.extend(outcome.verdicts);
                            unreachable_pairs += outcome.unreachable.len();
                            invalid += outcome.invalid_trajectories;
                            probes_sent += outcome.probes_sent;
                        }
                        Err(DetectError::StaleSnapshot { .. }) if attempt < 2 => {
                            snap_current = self.net.snapshot();
                            stale = true;
                            break;
                        }
                        Err(e) => return Err(e.into()),
                    }
                }
                if stale {
                    continue 'attempts;
                }
            }
            break;
        }

        // Re-probe devices queued by test-again actions, replaying the
        // probe headers of the sweep that raised suspicion.
        let mut recovered: Vec<DeviceId> = Vec::new();
        for (device, port, origin_sweep) in std::mem::take(&mut self.reprobe) {
            if snap_current.device(&device).is_none() {
                continue;
            }
            let outcome = scan_for_attacks(
                &snap_current,
                &device,
                port,
                &mut self.net,
                &estimator,
                &self.det,
                origin_sweep,
            )?;
            let clean = outcome.verdicts.iter().all(|v| v.kind == VerdictKind::Benign);
            if clean {
                recovered.push(device.clone());
            }
            verdicts.extend(outcome.verdicts);
        }
        recovered.sort();
        recovered.dedup();

        // Corpus-level checks: mid-network births in every unit, trajectory
        // floods toward the controller in the last unit against the earlier
        // baseline.
        let silent_estimator = CongestionEstimator::clean(&self.det);
        let mut seen_generators: BTreeSet<BTreeSet<DeviceId>> = BTreeSet::new();
        for (i, unit) in units.iter().enumerate() {
            let est = if i + 1 == units.len() { &flood_baseline } else { &silent_estimator };
            let findings = analyze_corpus(&snap_current, unit, est, &self.det, sweep, self.net.now());
            for v in findings.verdicts {
                if v.kind == VerdictKind::Generation
                    && !seen_generators.insert(v.malicious_devices.clone())
                {
                    continue;
                }
                verdicts.push(v);
            }
        }
        timings.scan_ms = t2.elapsed().as_millis();

        // Response: evaluate policies over the full sweep's verdicts only
        // after scanning finished.
        let t3 = Instant::now();
        let now = self.net.now();
        let requests = self.engine.match_and_execute(&self.policies, &verdicts, now);
        let mut ctx = ApplyContext {
            // Resetting to the controller-intended table is the staged
            // remediation for table updates.
            replacement_rules: snap_current
                .devices
                .iter()
                .map(|(id, d)| (id.clone(), d.flow_table.clone()))
                .collect(),
            ..Default::default()
        };
        let mut actions_issued = 0usize;
        let mut default_alarms = 0usize;
        for req in &requests {
            if req.policy_id == "default" {
                default_alarms += 1;
            }
            match apply_to_network(req, &mut self.net.state, &mut ctx, now) {
                Ok(()) => actions_issued += 1,
                Err(e) => self.alarm_log.push(format!("apply failed: {e}")),
            }
        }
        for device in ctx.reprobe_queue {
            let port = self.cfg.ports.first().copied().unwrap_or(0);
            self.reprobe.push((device, PortId(port), sweep));
        }
        self.alarm_log.push(self.engine.alarm_log_text());
        timings.policy_ms = t3.elapsed().as_millis();

        let metrics = self.metrics(sweep, &snap_current, &store, &verdicts, MetricsInput {
            unreachable_pairs,
            invalid,
            probes_sent,
            actions_issued,
            default_alarms,
            recovered: recovered.clone(),
            estimator_warnings: estimator.warnings.clone(),
        });
        Ok(SweepResult { metrics, timings, verdicts, scan_plan: plan })
    }

    /// One round of random host-to-host flows.
    fn traffic_round(&mut self, sweep: u64, unit: u64) -> Vec<Observation> {
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.cfg.seed ^ (sweep << 32) ^ (unit << 16) ^ TRAFFIC_STREAM,
        );
        let devices: Vec<DeviceId> = self.net.state.devices.keys().cloned().collect();
        let flows = self.cfg.flows;
        for _ in 0..flows {
            let src = devices[rng.gen_range(0..devices.len())].clone();
            let fields = match &self.generated {
                Some(gen) => {
                    let prefix = rng.gen_range(0..gen.owners.len());
                    PacketHeaderFields {
                        src_addr: rng.gen(),
                        dst_addr: 0,
                        protocol: if rng.gen_bool(0.8) { 6 } else { 17 },
                        ip_id: rng.gen(),
                        src_port: rng.gen(),
                        dst_port: rng.gen(),
                        ttl: 64,
                    }
                    .with_forwarding_bits(
                        gen.dst_bits(prefix, rng.gen()),
                        self.cfg.header_bits,
                    )
                }
                None => PacketHeaderFields {
                    src_addr: rng.gen(),
                    dst_addr: rng.gen(),
                    protocol: 6,
                    ip_id: rng.gen(),
                    src_port: rng.gen(),
                    dst_port: rng.gen(),
                    ttl: 64,
                },
            };
            self.net.inject(&src, PortId(0), fields);
            self.net.run_until_idle();
            self.net.advance_clock(self.cfg.hop_interval_ns / 2 + 1);
        }
        self.net.advance_clock(self.cfg.hop_interval_ns * 8);
        self.net.drain_observations()
    }

    fn metrics(
        &self,
        sweep: u64,
        snap: &NetworkSnapshot,
        store: &TrajectoryStore,
        verdicts: &[Verdict],
        input: MetricsInput,
    ) -> MetricsReport {
        let implant_union: BTreeSet<DeviceId> = self
            .net
            .ground_truth
            .iter()
            .flat_map(|r| r.implant.devices.iter().cloned())
            .collect();
        let nonbenign: Vec<&Verdict> =
            verdicts.iter().filter(|v| v.kind != VerdictKind::Benign).collect();

        let mut per_attack = Vec::new();
        let mut reachable = 0usize;
        let mut detected_count = 0usize;
        let mut loc_hits = 0usize;
        let mut loc_total = 0usize;
        let mut false_negatives = 0usize;
        for rec in &self.net.ground_truth {
            let devices: Vec<DeviceId> = rec.implant.devices.iter().cloned().collect();
            let is_reachable = rec.first_acted.is_some();
            let matching: Vec<&&Verdict> = nonbenign
                .iter()
                .filter(|v| v.malicious_devices.iter().any(|d| rec.implant.devices.contains(d)))
                .collect();
            let detected = !matching.is_empty();
            let kind_matched = matching.iter().any(|v| v.kind == rec.implant.action.kind());
            let localized = rec.implant.devices.len() == 1
                && matching.iter().any(|v| {
                    v.malicious_devices.len() == 1
                        && v.malicious_devices == rec.implant.devices
                });
            let latency_ns = match (rec.first_acted, detected) {
                (Some(acted), true) => matching
                    .iter()
                    .map(|v| v.emitted_at.saturating_sub(acted))
                    .min(),
                _ => None,
            };
            if is_reachable {
                reachable += 1;
                if detected {
                    detected_count += 1;
                } else {
                    false_negatives += 1;
                }
                if rec.implant.devices.len() == 1 {
                    loc_total += 1;
                    if localized {
                        loc_hits += 1;
                    }
                }
            }
            per_attack.push(AttackOutcome {
                devices,
                action: rec.implant.action.name().to_string(),
                reachable: is_reachable,
                detected,
                kind_matched,
                localized,
                latency_ns,
                latency_sweeps: if detected { Some(1) } else { None },
            });
        }

        let false_positives = nonbenign
            .iter()
            .filter(|v| !v.malicious_devices.iter().all(|d| implant_union.contains(d)))
            .count();

        MetricsReport {
            sweep,
            devices: snap.device_count(),
            rules: snap.devices.values().map(|d| d.flow_table.len()).sum(),
            trajectories: store.len(),
            implanted: self.net.ground_truth.len(),
            reachable,
            detected: detected_count,
            accuracy: if reachable > 0 {
                Some(detected_count as f64 / reachable as f64)
            } else {
                None
            },
            false_positives,
            false_negatives,
            false_negative_rate: if reachable > 0 {
                Some(false_negatives as f64 / reachable as f64)
            } else {
                None
            },
            localization_hits: loc_hits,
            localization_total: loc_total,
            benign_verdicts: verdicts.len() - nonbenign.len(),
            nonbenign_verdicts: nonbenign.len(),
            unreachable_pairs: input.unreachable_pairs,
            invalid_trajectories: input.invalid,
            probes_sent: input.probes_sent,
            actions_issued: input.actions_issued,
            default_alarms: input.default_alarms,
            recovered_devices: input.recovered,
            estimator_warnings: input.estimator_warnings,
            per_attack,
        }
    }
}

struct MetricsInput {
    unreachable_pairs: usize,
    invalid: usize,
    probes_sent: usize,
    actions_issued: usize,
    default_alarms: usize,
    recovered: Vec<DeviceId>,
    estimator_warnings: Vec<String>,
}
