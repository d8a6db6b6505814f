//! Simulated SDN model: topology graph, forwarding devices with
//! priority-ordered flow tables, hosts, a controller sentinel, and immutable
//! snapshots taken for scanning.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::header::{HeaderPattern, HeaderSpace};

/// Identifier of a forwarding device. Device identity is ground truth:
/// devices may lie about anything except who they are.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DeviceId(pub String);

impl DeviceId {
    pub fn new(s: impl Into<String>) -> Self {
        DeviceId(s.into())
    }

    /// The controller sentinel. It is not a forwarding device; packets sent
    /// to the control plane terminate here so controller-bound trajectories
    /// are first-class.
    pub fn controller() -> Self {
        DeviceId("@controller".into())
    }

    pub fn is_controller(&self) -> bool {
        self.0 == "@controller"
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for DeviceId {
    fn from(s: &str) -> Self {
        DeviceId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PortId(pub u16);

impl fmt::Display for PortId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HostId(pub String);

/// What a matched rule does with the packet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleAction {
    Forward(PortId),
    Drop,
    Flood,
    ToController,
}

/// One flow-table entry. Highest priority wins; ties go to the earlier rule
/// in insertion order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowRule {
    pub priority: u32,
    #[serde(rename = "match")]
    pub pattern: HeaderPattern,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_port: Option<PortId>,
    pub action: RuleAction,
    /// Optional bit-masking rewrite applied when the packet is forwarded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewrite: Option<HeaderPattern>,
}

impl FlowRule {
    pub fn matches(&self, header: u128, in_port: PortId) -> bool {
        self.in_port.map_or(true, |p| p == in_port) && self.pattern.matches(header)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForwardingDevice {
    pub id: DeviceId,
    pub ports: Vec<PortId>,
    /// Kept sorted by descending priority, insertion order within a priority.
    pub flow_table: Vec<FlowRule>,
}

impl ForwardingDevice {
    pub fn new(id: DeviceId, port_count: u16) -> Self {
        ForwardingDevice {
            id,
            ports: (0..port_count).map(PortId).collect(),
            flow_table: Vec::new(),
        }
    }

    /// Install rules, normalizing to first-match order.
    pub fn install_rules(&mut self, mut rules: Vec<FlowRule>) {
        // Stable sort keeps insertion order inside a priority band.
        rules.sort_by(|a, b| b.priority.cmp(&a.priority));
        self.flow_table = rules;
    }

    /// First matching rule for a concrete header, or None (table miss).
    pub fn lookup(&self, header: u128, in_port: PortId) -> Option<&FlowRule> {
        self.flow_table.iter().find(|r| r.matches(header, in_port))
    }
}

/// Immutable capture of topology plus flow state; one scan sweep is
/// evaluated against exactly one snapshot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSnapshot {
    pub header_bits: u16,
    pub devices: BTreeMap<DeviceId, ForwardingDevice>,
    /// Directed adjacency: both directions of every bidirectional link are
    /// present, so a lookup answers "who is wired to this port".
    pub links: BTreeMap<(DeviceId, PortId), (DeviceId, PortId)>,
    pub hosts: BTreeMap<HostId, (DeviceId, PortId)>,
    pub epoch: u64,
}

impl NetworkSnapshot {
    /// Neighbor wired to `(device, port)`, if any.
    pub fn link_peer(&self, device: &DeviceId, port: PortId) -> Option<&(DeviceId, PortId)> {
        self.links.get(&(device.clone(), port))
    }

    pub fn device(&self, id: &DeviceId) -> Option<&ForwardingDevice> {
        self.devices.get(id)
    }

    pub fn device_count(&self) -> usize {
        self.devices.len()
    }

    /// Virtual control-channel port the controller sentinel uses for
    /// messages from `device`. Channel identity is ground truth: a device
    /// cannot spoof another device's channel.
    pub fn controller_channel(&self, device: &DeviceId) -> Option<PortId> {
        self.devices
            .keys()
            .position(|d| d == device)
            .map(|i| PortId(i as u16))
    }

    /// Inverse of [`controller_channel`](Self::controller_channel).
    pub fn controller_channel_sender(&self, port: PortId) -> Option<DeviceId> {
        self.devices.keys().nth(port.0 as usize).cloned()
    }

    /// Ports of a device that have no link attached (host / injection side).
    pub fn edge_ports(&self, id: &DeviceId) -> Vec<PortId> {
        match self.devices.get(id) {
            None => Vec::new(),
            Some(d) => d
                .ports
                .iter()
                .copied()
                .filter(|p| !self.links.contains_key(&(id.clone(), *p)))
                .collect(),
        }
    }
}

/// Mutable live network the simulator and the response engine act on.
/// Snapshots are frozen copies with a bumped epoch.
#[derive(Debug, Clone)]
pub struct NetworkState {
    pub header_bits: u16,
    pub devices: BTreeMap<DeviceId, ForwardingDevice>,
    pub links: BTreeMap<(DeviceId, PortId), (DeviceId, PortId)>,
    pub hosts: BTreeMap<HostId, (DeviceId, PortId)>,
    /// Devices whose controller-bound messages are administratively blocked.
    pub blocked_to_controller: BTreeSet<DeviceId>,
    epoch_counter: u64,
}

impl NetworkState {
    pub fn snapshot(&mut self) -> NetworkSnapshot {
        self.epoch_counter += 1;
        NetworkSnapshot {
            header_bits: self.header_bits,
            devices: self.devices.clone(),
            links: self.links.clone(),
            hosts: self.hosts.clone(),
            epoch: self.epoch_counter,
        }
    }

    pub fn remove_device_links(&mut self, id: &DeviceId) {
        self.links
            .retain(|(a, _), (b, _)| a != id && b != id);
    }

    pub fn install_rules(&mut self, id: &DeviceId, rules: Vec<FlowRule>) -> Result<(), ModelError> {
        match self.devices.get_mut(id) {
            Some(d) => {
                d.install_rules(rules);
                Ok(())
            }
            None => Err(ModelError::UnknownDevice(id.clone())),
        }
    }
}

/// True iff any flow table or link differs from the snapshot. Used to abort
/// a scan whose snapshot went stale mid-flight.
pub fn state_changed(snapshot: &NetworkSnapshot, live: &NetworkState) -> bool {
    snapshot.links != live.links
        || snapshot.devices.len() != live.devices.len()
        || snapshot.devices.iter().any(|(id, dev)| {
            live.devices
                .get(id)
                .map_or(true, |l| l.flow_table != dev.flow_table || l.ports != dev.ports)
        })
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopologyFile {
    pub devices: Vec<TopologyDevice>,
    #[serde(default)]
    pub links: Vec<TopologyLink>,
    #[serde(default)]
    pub hosts: Vec<TopologyHost>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopologyDevice {
    pub id: String,
    pub ports: u16,
}

/// One bidirectional link: `[device, port, device, port]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopologyLink(pub String, pub u16, pub String, pub u16);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopologyHost {
    pub id: String,
    pub device: String,
    pub port: u16,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RulesFile {
    /// Configured header width L; every match pattern must have this width.
    pub header_bits: u16,
    pub tables: Vec<DeviceRules>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeviceRules {
    pub device: String,
    pub rules: Vec<FlowRule>,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unknown device {0}")]
    UnknownDevice(DeviceId),
    #[error("link references unknown device {0}")]
    DanglingDevice(String),
    #[error("link references port {port} missing on device {device}")]
    DanglingPort { device: String, port: u16 },
    #[error("duplicate device id {0}")]
    DuplicateDevice(String),
    #[error("device id {0} is reserved")]
    ReservedId(String),
    #[error("device {0} declares no ports")]
    NoPorts(String),
    #[error("port ({device}, {port}) is wired twice")]
    PortInUse { device: String, port: u16 },
    #[error("rule {index} on device {device} has width {got}, configured width is {want}")]
    RuleWidth { device: String, index: usize, got: u16, want: u16 },
}

impl TopologyFile {
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        serde_json::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("topology serializes")
    }
}

impl RulesFile {
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        serde_json::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("rules serialize")
    }
}

/// Validate the two input files and assemble the live network they describe.
pub fn build_state(topology: &TopologyFile, rules: &RulesFile) -> Result<NetworkState, ModelError> {
    let mut devices: BTreeMap<DeviceId, ForwardingDevice> = BTreeMap::new();
    for d in &topology.devices {
        if d.id.starts_with('@') {
            return Err(ModelError::ReservedId(d.id.clone()));
        }
        if d.ports == 0 {
            return Err(ModelError::NoPorts(d.id.clone()));
        }
        let id = DeviceId::new(&d.id);
        if devices.contains_key(&id) {
            return Err(ModelError::DuplicateDevice(d.id.clone()));
        }
        devices.insert(id.clone(), ForwardingDevice::new(id, d.ports));
    }

    let mut links = BTreeMap::new();
    for TopologyLink(a, pa, b, pb) in &topology.links {
        for (dev, port) in [(a, pa), (b, pb)] {
            let id = DeviceId::new(dev);
            let d = devices
                .get(&id)
                .ok_or_else(|| ModelError::DanglingDevice(dev.clone()))?;
            if !d.ports.contains(&PortId(*port)) {
                return Err(ModelError::DanglingPort { device: dev.clone(), port: *port });
            }
        }
        let ka = (DeviceId::new(a), PortId(*pa));
        let kb = (DeviceId::new(b), PortId(*pb));
        if links.contains_key(&ka) {
            return Err(ModelError::PortInUse { device: a.clone(), port: *pa });
        }
        if links.contains_key(&kb) {
            return Err(ModelError::PortInUse { device: b.clone(), port: *pb });
        }
        links.insert(ka.clone(), kb.clone());
        links.insert(kb, ka);
    }

    let mut hosts = BTreeMap::new();
    for h in &topology.hosts {
        let id = DeviceId::new(&h.device);
        let d = devices
            .get(&id)
            .ok_or_else(|| ModelError::DanglingDevice(h.device.clone()))?;
        if !d.ports.contains(&PortId(h.port)) {
            return Err(ModelError::DanglingPort { device: h.device.clone(), port: h.port });
        }
        hosts.insert(HostId(h.id.clone()), (id, PortId(h.port)));
    }

    for table in &rules.tables {
        let id = DeviceId::new(&table.device);
        if !devices.contains_key(&id) {
            return Err(ModelError::DanglingDevice(table.device.clone()));
        }
        for (i, rule) in table.rules.iter().enumerate() {
            if rule.pattern.width() != rules.header_bits {
                return Err(ModelError::RuleWidth {
                    device: table.device.clone(),
                    index: i,
                    got: rule.pattern.width(),
                    want: rules.header_bits,
                });
            }
            if let Some(rw) = &rule.rewrite {
                if rw.width() != rules.header_bits {
                    return Err(ModelError::RuleWidth {
                        device: table.device.clone(),
                        index: i,
                        got: rw.width(),
                        want: rules.header_bits,
                    });
                }
            }
        }
        devices
            .get_mut(&id)
            .expect("checked above")
            .install_rules(table.rules.clone());
    }

    Ok(NetworkState {
        header_bits: rules.header_bits,
        devices,
        links,
        hosts,
        blocked_to_controller: BTreeSet::new(),
        epoch_counter: 0,
    })
}

/// Parse the two files and return the first snapshot (epoch 1).
pub fn build_snapshot(
    topology: &TopologyFile,
    rules: &RulesFile,
) -> Result<NetworkSnapshot, ModelError> {
    Ok(build_state(topology, rules)?.snapshot())
}

/// Header space matched by any rule of the table (diagnostic helper).
pub fn table_match_space(device: &ForwardingDevice, width: u16) -> HeaderSpace {
    let mut hs = HeaderSpace::empty(width);
    for r in &device.flow_table {
        hs.add(r.pattern);
    }
    hs
}
