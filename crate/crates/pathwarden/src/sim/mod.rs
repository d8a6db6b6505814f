//! Deterministic network simulator: a discrete-event engine that forwards
//! packets per device flow tables, records trusted per-hop observations,
//! and lets the harness implant malicious forwarding behavior that deviates
//! from the tables at runtime without ever touching the snapshot the
//! detection engine scans.

pub mod experiment;
pub mod rulegen;
pub mod topo;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::{ProbeDriver, ProbeTrace};
use crate::header::HeaderPattern;
use crate::netmodel::{
    state_changed, DeviceId, NetworkSnapshot, NetworkState, PortId, RuleAction,
};
use crate::trajectory::{
    label_packet, LabelConfig, Observation, ObservedOutput, PacketHeaderFields, PacketLabel,
};
use crate::SimNs;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("implant targets unknown device {0}")]
    UnknownDevice(DeviceId),
    #[error("replay target {to} is not a neighbor of {device} (and not the controller)")]
    ReplayTargetUnreachable { device: DeviceId, to: DeviceId },
    #[error("misroute port {port} on {device} is not wired")]
    MisroutePortUnwired { device: DeviceId, port: PortId },
    #[error("conflicting implants on {device} for one scope: {a} vs {b}")]
    ConflictingImplants { device: DeviceId, a: String, b: String },
    #[error("delay amount must be positive")]
    ZeroDelay,
    #[error("drop selectivity must be in (0, 1], got {0}")]
    BadSelectivity(f64),
}

/// The malicious behavior a compromised device exhibits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImplantAction {
    /// Copy matching packets to a third destination (a neighbor, or the
    /// controller) while still forwarding the original.
    Replay { to: DeviceId },
    /// Swallow matching packets: selectivity 1.0 is a black hole, anything
    /// lower a gray hole.
    Drop { selectivity: f64 },
    /// Forward matching packets out the wrong port.
    Misroute { to: PortId },
    /// Rewrite matching packets (modification changes the label, so the
    /// rewritten packet is a generated one).
    Generate { rewrite: HeaderPattern },
    /// Sit on matching packets before processing them.
    Delay { amount: SimNs },
}

impl ImplantAction {
    pub fn kind(&self) -> crate::detection::VerdictKind {
        use crate::detection::VerdictKind;
        match self {
            ImplantAction::Replay { .. } => VerdictKind::Replay,
            ImplantAction::Drop { .. } => VerdictKind::Drop,
            ImplantAction::Misroute { .. } => VerdictKind::Misroute,
            ImplantAction::Generate { .. } => VerdictKind::Generation,
            ImplantAction::Delay { .. } => VerdictKind::Delay,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ImplantAction::Replay { .. } => "replay",
            ImplantAction::Drop { .. } => "drop",
            ImplantAction::Misroute { .. } => "misroute",
            ImplantAction::Generate { .. } => "generate",
            ImplantAction::Delay { .. } => "delay",
        }
    }

    /// Drop, misroute and generate fight over the same packet; replay and
    /// delay compose with anything.
    pub(crate) fn exclusive(&self) -> bool {
        matches!(
            self,
            ImplantAction::Drop { .. } | ImplantAction::Misroute { .. } | ImplantAction::Generate { .. }
        )
    }
}

/// Which traffic the implant affects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImplantScope {
    /// All packets on all ports.
    AllPackets,
    /// Every packet arriving on one port.
    PacketsOfPort { port: PortId },
    /// A header subset arriving on one port.
    SubsetOnPort { port: PortId, selector: HeaderPattern },
    /// A header subset on any port.
    Subset { selector: HeaderPattern },
    /// Packets whose intended action sends them to the control plane.
    ControllerDestined,
}

impl ImplantScope {
    fn matches(&self, bits: u128, in_port: PortId, intended: &Option<RuleAction>) -> bool {
        match self {
            ImplantScope::AllPackets => true,
            ImplantScope::PacketsOfPort { port } => in_port == *port,
            ImplantScope::SubsetOnPort { port, selector } => {
                in_port == *port && selector.matches(bits)
            }
            ImplantScope::Subset { selector } => selector.matches(bits),
            ImplantScope::ControllerDestined => {
                matches!(intended, Some(RuleAction::ToController))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Always,
    Probabilistic { p: f64 },
}

/// One implanted threat. Runtime deviation only: the snapshot keeps showing
/// the controller-intended rules.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackImplant {
    pub devices: BTreeSet<DeviceId>,
    pub action: ImplantAction,
    pub scope: ImplantScope,
    pub activation: Activation,
}

impl AttackImplant {
    pub fn single(
        device: DeviceId,
        action: ImplantAction,
        scope: ImplantScope,
        activation: Activation,
    ) -> Self {
        AttackImplant { devices: BTreeSet::from([device]), action, scope, activation }
    }

    pub fn is_compound(&self) -> bool {
        self.devices.len() > 1
    }
}

/// Ground-truth bookkeeping for one implant.
#[derive(Debug, Clone, Serialize)]
pub struct ImplantRecord {
    pub implant: AttackImplant,
    /// First simulated instant the implant deviated a packet.
    pub first_acted: Option<SimNs>,
    pub acted_count: u64,
    pub acted_on_probe: bool,
}

/// Benign loss and queueing injected on every link transit.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CongestionModel {
    pub drop_rate: f64,
    pub max_jitter: SimNs,
}

#[derive(Debug, Clone)]
struct PacketInFlight {
    fields: PacketHeaderFields,
    bits: u128,
    label: PacketLabel,
    device: DeviceId,
    in_port: PortId,
    ttl: u16,
    /// Replicated copies are never replicated again.
    copy: bool,
}

/// The live network under simulation.
pub struct Network {
    pub state: NetworkState,
    implants: BTreeMap<DeviceId, Vec<usize>>,
    pub ground_truth: Vec<ImplantRecord>,
    congestion: Option<CongestionModel>,
    clock: SimNs,
    seq: u64,
    events: BinaryHeap<Reverse<(SimNs, u64, usize)>>,
    in_flight: Vec<PacketInFlight>,
    observations: Vec<Observation>,
    label_cfg: LabelConfig,
    hop_interval: SimNs,
    rng: ChaCha8Rng,
    probe_mode: bool,
}

impl Network {
    pub fn new(state: NetworkState, seed: u64, hop_interval: SimNs, label_cfg: LabelConfig) -> Self {
        Network {
            state,
            implants: BTreeMap::new(),
            ground_truth: Vec::new(),
            congestion: None,
            clock: 0,
            seq: 0,
            events: BinaryHeap::new(),
            in_flight: Vec::new(),
            observations: Vec::new(),
            label_cfg,
            hop_interval,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed),
            probe_mode: false,
        }
    }

    pub fn set_congestion(&mut self, model: Option<CongestionModel>) {
        self.congestion = model;
    }

    pub fn snapshot(&mut self) -> NetworkSnapshot {
        self.state.snapshot()
    }

    pub fn now(&self) -> SimNs {
        self.clock
    }

    pub fn label_config(&self) -> LabelConfig {
        self.label_cfg
    }

    /// Validate and install an implant. The snapshot never reflects it.
    pub fn implant(&mut self, implant: AttackImplant) -> Result<(), SimError> {
        for device in &implant.devices {
            let Some(_) = self.state.devices.get(device) else {
                return Err(SimError::UnknownDevice(device.clone()));
            };
            match &implant.action {
                ImplantAction::Replay { to } => {
                    let neighbor = self
                        .state
                        .links
                        .iter()
                        .any(|((a, _), (b, _))| a == device && b == to);
                    if !neighbor && !to.is_controller() {
                        return Err(SimError::ReplayTargetUnreachable {
                            device: device.clone(),
                            to: to.clone(),
                        });
                    }
                }
                ImplantAction::Misroute { to } => {
                    if !self.state.links.contains_key(&(device.clone(), *to)) {
                        return Err(SimError::MisroutePortUnwired {
                            device: device.clone(),
                            port: *to,
                        });
                    }
                }
                ImplantAction::Drop { selectivity } => {
                    if !(*selectivity > 0.0 && *selectivity <= 1.0) {
                        return Err(SimError::BadSelectivity(*selectivity));
                    }
                }
                ImplantAction::Delay { amount } => {
                    if *amount == 0 {
                        return Err(SimError::ZeroDelay);
                    }
                }
                ImplantAction::Generate { .. } => {}
            }
            // Two behavior-exclusive implants cannot share a device+scope.
            if implant.action.exclusive() {
                for &idx in self.implants.get(device).into_iter().flatten() {
                    let other = &self.ground_truth[idx];
                    if other.implant.action.exclusive() && other.implant.scope == implant.scope {
                        return Err(SimError::ConflictingImplants {
                            device: device.clone(),
                            a: other.implant.action.name().into(),
                            b: implant.action.name().into(),
                        });
                    }
                }
            }
        }
        let idx = self.ground_truth.len();
        for device in &implant.devices {
            self.implants.entry(device.clone()).or_default().push(idx);
        }
        self.ground_truth.push(ImplantRecord {
            implant,
            first_acted: None,
            acted_count: 0,
            acted_on_probe: false,
        });
        Ok(())
    }

    pub fn clear_implants(&mut self) {
        self.implants.clear();
        self.ground_truth.clear();
    }

    /// Inject a packet at `(device, port)` right now.
    pub fn inject(&mut self, device: &DeviceId, port: PortId, fields: PacketHeaderFields) -> PacketLabel {
        let bits = fields.forwarding_bits(self.state.header_bits);
        let label = label_packet(&fields, &self.label_cfg);
        let ttl = (self.state.devices.len() as u16) * 2 + 4;
        self.schedule(
            self.clock,
            PacketInFlight {
                fields,
                bits,
                label,
                device: device.clone(),
                in_port: port,
                ttl,
                copy: false,
            },
        );
        label
    }

    fn schedule(&mut self, at: SimNs, packet: PacketInFlight) {
        let idx = self.in_flight.len();
        self.in_flight.push(packet);
        self.events.push(Reverse((at, self.seq, idx)));
        self.seq += 1;
    }

    /// Run the event loop until no packets remain in flight.
    pub fn run_until_idle(&mut self) {
        while let Some(Reverse((at, _, idx))) = self.events.pop() {
            self.clock = self.clock.max(at);
            let packet = self.in_flight[idx].clone();
            self.process_arrival(at, packet);
        }
        self.in_flight.clear();
    }

    /// Observations recorded so far (monotone, never reordered).
    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn drain_observations(&mut self) -> Vec<Observation> {
        std::mem::take(&mut self.observations)
    }

    fn process_arrival(&mut self, at: SimNs, mut packet: PacketInFlight) {
        if packet.device.is_controller() {
            // Terminal: record with the sender's control channel as ingress.
            self.observations.push(Observation {
                label: packet.label,
                device: DeviceId::controller(),
                in_port: packet.in_port,
                out_port: ObservedOutput::Drop,
                timestamp: at,
            });
            return;
        }
        let Some(device) = self.state.devices.get(&packet.device) else {
            return; // device removed mid-flight
        };
        if packet.ttl == 0 {
            return;
        }
        packet.ttl -= 1;

        let intended_rule = device.lookup(packet.bits, packet.in_port).cloned();
        let intended_action = intended_rule.as_ref().map(|r| r.action.clone());

        // Gather matching implants in install order. Selective behavior is
        // a pure function of (packet label, device, implant), so a flow is
        // treated consistently and runs replay bit for bit.
        let matching: Vec<usize> = self
            .implants
            .get(&packet.device)
            .into_iter()
            .flatten()
            .copied()
            .filter(|&i| {
                let rec = &self.ground_truth[i];
                rec.implant.scope.matches(packet.bits, packet.in_port, &intended_action)
            })
            .filter(|&i| match self.ground_truth[i].implant.activation {
                Activation::Always => true,
                Activation::Probabilistic { p } => {
                    selective_roll(packet.label, &packet.device, i, 0x0ac7) < p
                }
            })
            .collect();

        // Deviations recorded after the device borrow ends.
        let mut acted: Vec<(usize, SimNs)> = Vec::new();

        // Malicious processing delay happens before the device acts (and
        // before its observation is taken).
        let mut delay: SimNs = 0;
        for &i in &matching {
            if let ImplantAction::Delay { amount } = self.ground_truth[i].implant.action {
                delay += amount;
                acted.push((i, at + delay));
            }
        }
        let obs_time = at + delay;

        // The device reports the action its table prescribes; deviation is
        // cloaked from the report but not from downstream receivers.
        let reported = match &intended_action {
            Some(RuleAction::Forward(p)) => ObservedOutput::Port(*p),
            Some(RuleAction::Flood) => ObservedOutput::Port(
                device
                    .ports
                    .iter()
                    .copied()
                    .find(|p| *p != packet.in_port)
                    .unwrap_or(packet.in_port),
            ),
            Some(RuleAction::ToController) => ObservedOutput::ToController,
            Some(RuleAction::Drop) | None => ObservedOutput::Drop,
        };
        self.observations.push(Observation {
            label: packet.label,
            device: packet.device.clone(),
            in_port: packet.in_port,
            out_port: reported,
            timestamp: obs_time,
        });

        // Rewrite applied by the intended rule itself (benign middlebox).
        let mut bits = packet.bits;
        let mut fields = packet.fields;
        if let Some(rule) = &intended_rule {
            if let Some(rw) = &rule.rewrite {
                bits = rw.rewrite_header(bits);
                fields = fields.with_forwarding_bits(bits, self.state.header_bits);
            }
        }

        #[derive(Clone)]
        enum Out {
            Port(PortId),
            Controller,
        }
        let mut primary: Vec<Out> = match &intended_action {
            Some(RuleAction::Forward(p)) => vec![Out::Port(*p)],
            Some(RuleAction::Flood) => device
                .ports
                .iter()
                .copied()
                .filter(|p| *p != packet.in_port)
                .map(Out::Port)
                .collect(),
            Some(RuleAction::ToController) => vec![Out::Controller],
            Some(RuleAction::Drop) | None => Vec::new(),
        };
        let mut copies: Vec<(Out, PacketHeaderFields, u128, PacketLabel)> = Vec::new();
        let mut label = packet.label;
        // Drop, misroute and generate fight over the same packet; the first
        // matching one wins and the packet is not re-disputed (in particular
        // a dropped packet stays dropped).
        let mut exclusive_done = false;

        for &i in &matching {
            let action = self.ground_truth[i].implant.action.clone();
            if action.exclusive() && exclusive_done {
                continue;
            }
            match action {
                ImplantAction::Delay { .. } => {}
                ImplantAction::Replay { to } => {
                    if packet.copy {
                        continue; // copies do not breed copies
                    }
                    let out = if to.is_controller() {
                        Out::Controller
                    } else {
                        let port = self
                            .state
                            .links
                            .iter()
                            .find(|((a, _), (b, _))| *a == packet.device && *b == to)
                            .map(|((_, p), _)| *p)
                            .expect("validated at implant time");
                        Out::Port(port)
                    };
                    // The copy carries the original (pre-modification) form.
                    copies.push((out, packet.fields, packet.bits, packet.label));
                    acted.push((i, obs_time));
                }
                ImplantAction::Generate { rewrite } => {
                    exclusive_done = true;
                    let new_bits = rewrite.rewrite_header(bits);
                    if new_bits != bits || label_packet(&fields, &self.label_cfg) != label {
                        bits = new_bits;
                        fields = fields.with_forwarding_bits(bits, self.state.header_bits);
                        label = label_packet(&fields, &self.label_cfg);
                        // The modified packet follows the table of its new
                        // header.
                        primary = match device.lookup(bits, packet.in_port).map(|r| &r.action) {
                            Some(RuleAction::Forward(p)) => vec![Out::Port(*p)],
                            Some(RuleAction::Flood) => device
                                .ports
                                .iter()
                                .copied()
                                .filter(|p| *p != packet.in_port)
                                .map(Out::Port)
                                .collect(),
                            Some(RuleAction::ToController) => vec![Out::Controller],
                            Some(RuleAction::Drop) | None => Vec::new(),
                        };
                        acted.push((i, obs_time));
                    }
                }
                ImplantAction::Drop { selectivity } => {
                    exclusive_done = true;
                    let roll = selective_roll(packet.label, &packet.device, i, 0xd0b9);
                    if roll < selectivity && !primary.is_empty() {
                        primary.clear();
                        acted.push((i, obs_time));
                    }
                }
                ImplantAction::Misroute { to } => {
                    exclusive_done = true;
                    let deviates = match primary.first() {
                        Some(Out::Port(p)) => *p != to,
                        _ => true,
                    };
                    if deviates {
                        primary = vec![Out::Port(to)];
                        acted.push((i, obs_time));
                    }
                }
            }
        }

        for (i, t) in acted {
            self.mark_acted(i, t);
        }
        let was_copy = packet.copy;
        for out in primary {
            self.send(&packet.device, out_port_of(&out), matches!(out, Out::Controller), obs_time, fields, bits, label, packet.ttl, was_copy);
        }
        for (out, cfields, cbits, clabel) in copies {
            self.send(&packet.device, out_port_of(&out), matches!(out, Out::Controller), obs_time, cfields, cbits, clabel, packet.ttl, true);
        }

        fn out_port_of(o: &Out) -> Option<PortId> {
            match o {
                Out::Port(p) => Some(*p),
                Out::Controller => None,
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn send(
        &mut self,
        from: &DeviceId,
        port: Option<PortId>,
        to_controller: bool,
        at: SimNs,
        fields: PacketHeaderFields,
        bits: u128,
        label: PacketLabel,
        ttl: u16,
        copy: bool,
    ) {
        if to_controller {
            if self.state.blocked_to_controller.contains(from) {
                return;
            }
            let channel = self
                .controller_channel(from)
                .expect("sender exists while sending");
            let arrive = at + self.hop_interval;
            self.schedule(
                arrive,
                PacketInFlight {
                    fields,
                    bits,
                    label,
                    device: DeviceId::controller(),
                    in_port: channel,
                    ttl,
                    copy,
                },
            );
            return;
        }
        let Some(port) = port else { return };
        let Some((next, next_port)) = self.state.links.get(&(from.clone(), port)).cloned() else {
            return; // edge port: delivered out of the fabric
        };
        let mut latency = self.hop_interval;
        if let Some(c) = self.congestion {
            if self.rng.gen::<f64>() < c.drop_rate {
                return; // benign loss
            }
            if c.max_jitter > 0 {
                latency += self.rng.gen_range(0..=c.max_jitter);
            }
        }
        self.schedule(
            at + latency,
            PacketInFlight { fields, bits, label, device: next, in_port: next_port, ttl, copy },
        );
    }

    fn controller_channel(&self, device: &DeviceId) -> Option<PortId> {

        self.state
            .devices
            .keys()
            .position(|d| d == device)
            .map(|i| PortId(i as u16))
    }

    fn mark_acted(&mut self, idx: usize, at: SimNs) {
        let rec = &mut self.ground_truth[idx];
        rec.first_acted.get_or_insert(at);
        rec.acted_count += 1;
        if self.probe_mode {
            rec.acted_on_probe = true;
        }
    }

    /// Advance the clock (used between traffic rounds and probes so windows
    /// never overlap).
    pub fn advance_clock(&mut self, by: SimNs) {
        self.clock += by;
    }
}

/// Deterministic selectivity roll in [0, 1).
fn selective_roll(label: PacketLabel, device: &DeviceId, implant: usize, salt: u64) -> f64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    label.hash(&mut h);
    device.hash(&mut h);
    implant.hash(&mut h);
    salt.hash(&mut h);
    (h.finish() >> 11) as f64 / (1u64 << 53) as f64
}

impl ProbeDriver for Network {
    fn run_probe(&mut self, src: &DeviceId, port: PortId, packet: PacketHeaderFields) -> ProbeTrace {
        let start = self.observations.len();
        let injected_at = self.clock;
        self.probe_mode = true;
        let label = self.inject(src, port, packet);
        self.run_until_idle();
        self.probe_mode = false;
        // Quiet gap so the next window cannot interleave with this one.
        self.advance_clock(self.hop_interval * 4 + 1);
        ProbeTrace { injected_at, label, observations: self.observations[start..].to_vec() }
    }

    fn state_is_stale(&self, snap: &NetworkSnapshot) -> bool {
        state_changed(snap, &self.state)
    }

    fn now(&self) -> SimNs {
        self.clock
    }
}
