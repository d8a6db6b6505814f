//! Policy-driven response: parse administrator policies from XML, match them
//! against detection verdicts, honor exception hierarchies and validity
//! windows, and translate the matches into controller actions.
//!
//! A policy names one subject, an object, one or more actions, an optional
//! condition (equality tests on verdict kind, device and port, AND-combined),
//! zero or more exceptions and a validity time in milliseconds. A policy is
//! suppressed while any policy it excepts on is active — matched and
//! unexpired — which is how operators build hierarchies. Verdicts matched by
//! no policy fall back to an alarm.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use quick_xml::events::Event;
use quick_xml::Reader;
use serde::Serialize;
use thiserror::Error;

use crate::detection::{Verdict, VerdictKind};
use crate::netmodel::{DeviceId, FlowRule, NetworkState, PortId};
use crate::SimNs;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("xml error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("unknown action name {name:?} at {path}")]
    UnknownAction { path: String, name: String },
    #[error("duplicate policy id {0:?}")]
    DuplicateId(String),
    #[error("policy {policy:?} excepts on unknown policy {reference:?}")]
    DanglingException { policy: String, reference: String },
    #[error("exception cycle involving policy {0:?}")]
    ExceptionCycle(String),
    #[error("policy {0:?} has validity 0; it could never act")]
    ZeroValidity(String),
}

#[derive(Debug, Error)]
pub enum ResponseError {
    #[error("action request from policy {policy:?} expired at {expired_at}, now {now}")]
    Expired { policy: String, expired_at: SimNs, now: SimNs },
    #[error("unknown device {0}")]
    UnknownDevice(DeviceId),
    #[error("no replacement rules staged for device {0}")]
    NoReplacementRules(DeviceId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicySubject {
    Device(DeviceId),
    Controller,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyObject {
    Packet(String),
    Flow(String),
    Switch(DeviceId),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyAction {
    Isolate(DeviceId),
    UpdateForwardingTable(DeviceId),
    Alarm,
    BlockMessages(DeviceId),
    TestAgain(DeviceId),
}

impl PolicyAction {
    pub fn target(&self) -> Option<&DeviceId> {
        match self {
            PolicyAction::Isolate(d)
            | PolicyAction::UpdateForwardingTable(d)
            | PolicyAction::BlockMessages(d)
            | PolicyAction::TestAgain(d) => Some(d),
            PolicyAction::Alarm => None,
        }
    }
}

/// Equality tests AND-combined; absent fields match anything.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Condition {
    pub kind: Option<VerdictKind>,
    pub device: Option<DeviceId>,
    pub port: Option<PortId>,
}

impl Condition {
    pub fn matches(&self, verdict: &Verdict) -> bool {
        if verdict.kind == VerdictKind::Benign {
            return false;
        }
        if let Some(k) = self.kind {
            if verdict.kind != k {
                return false;
            }
        }
        if let Some(d) = &self.device {
            if !verdict.malicious_devices.contains(d) {
                return false;
            }
        }
        if let Some(p) = self.port {
            if verdict.port != p {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ResponsePolicy {
    pub id: String,
    pub subject: PolicySubject,
    pub object: PolicyObject,
    pub actions: Vec<PolicyAction>,
    pub condition: Condition,
    pub exceptions: Vec<String>,
    pub validity_ms: u64,
}

/// One action the controller is asked to take.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActionRequest {
    pub action: PolicyAction,
    pub policy_id: String,
    pub issued_at: SimNs,
    pub expires_at: SimNs,
    /// Set when another policy also acts on the same device this sweep.
    pub conflict_with: Option<String>,
}

// ---------------------------------------------------------------------------
// XML parsing
// ---------------------------------------------------------------------------

/// Parse the policy document. Duplicate ids, dangling or cyclic exception
/// references, unknown action names and multi-subject policies are rejected
/// with the offending element path.
pub fn parse_policies(xml: &str) -> Result<Vec<ResponsePolicy>, PolicyError> {
    let mut reader = Reader::from_str(xml);
    reader.config_mut().trim_text(true);
    let mut policies: Vec<ResponsePolicy> = Vec::new();
    let mut current: Option<PolicyBuilder> = None;
    let mut index = 0usize;

    loop {
        match reader.read_event() {
            Err(e) => {
                return Err(PolicyError::Schema {
                    path: format!("byte {}", reader.buffer_position()),
                    message: e.to_string(),
                })
            }
            Ok(Event::Eof) => break,
            Ok(Event::Start(el)) | Ok(Event::Empty(el)) => {
                let name = String::from_utf8_lossy(el.name().as_ref()).to_string();
                let attrs = collect_attrs(&el, &format!("policies/policy[{index}]/{name}"))?;
                match name.as_str() {
                    "policies" => {}
                    "policy" => {
                        index += 1;
                        let path = format!("policies/policy[{index}]");
                        let id = attrs.get("id").cloned().ok_or_else(|| PolicyError::Schema {
                            path: path.clone(),
                            message: "missing id attribute".into(),
                        })?;
                        current = Some(PolicyBuilder::new(id, path));
                    }
                    _ => {
                        let Some(b) = current.as_mut() else {
                            return Err(PolicyError::Schema {
                                path: name.clone(),
                                message: "element outside <policy>".into(),
                            });
                        };
                        b.element(&name, &attrs)?;
                    }
                }
            }
            Ok(Event::End(el)) => {
                if el.name().as_ref() == b"policy" {
                    let b = current.take().ok_or_else(|| PolicyError::Schema {
                        path: "policies".into(),
                        message: "unbalanced </policy>".into(),
                    })?;
                    policies.push(b.finish()?);
                }
            }
            Ok(_) => {}
        }
    }

    let mut ids = BTreeSet::new();
    for p in &policies {
        if !ids.insert(p.id.clone()) {
            return Err(PolicyError::DuplicateId(p.id.clone()));
        }
    }
    for p in &policies {
        for exc in &p.exceptions {
            if !ids.contains(exc) {
                return Err(PolicyError::DanglingException {
                    policy: p.id.clone(),
                    reference: exc.clone(),
                });
            }
        }
    }
    check_exception_acyclic(&policies)?;
    Ok(policies)
}

fn collect_attrs(
    el: &quick_xml::events::BytesStart<'_>,
    path: &str,
) -> Result<BTreeMap<String, String>, PolicyError> {
    let mut out = BTreeMap::new();
    for attr in el.attributes() {
        let attr = attr.map_err(|e| PolicyError::Schema { path: path.to_string(), message: e.to_string() })?;
        out.insert(
            String::from_utf8_lossy(attr.key.as_ref()).to_string(),
            String::from_utf8_lossy(&attr.value).to_string(),
        );
    }
    Ok(out)
}

struct PolicyBuilder {
    id: String,
    path: String,
    subject: Option<PolicySubject>,
    object: Option<PolicyObject>,
    actions: Vec<PolicyAction>,
    condition: Condition,
    exceptions: Vec<String>,
    validity_ms: Option<u64>,
}

impl PolicyBuilder {
    fn new(id: String, path: String) -> Self {
        PolicyBuilder {
            id,
            path,
            subject: None,
            object: None,
            actions: Vec::new(),
            condition: Condition::default(),
            exceptions: Vec::new(),
            validity_ms: None,
        }
    }

    fn schema(&self, element: &str, message: impl Into<String>) -> PolicyError {
        PolicyError::Schema {
            path: format!("{}/{}", self.path, element),
            message: message.into(),
        }
    }

    fn element(&mut self, name: &str, attrs: &BTreeMap<String, String>) -> Result<(), PolicyError> {
        match name {
            "subject" => {
                if self.subject.is_some() {
                    return Err(self.schema("subject", "each policy may have only one subject"));
                }
                self.subject = Some(match (attrs.get("device"), attrs.get("controller")) {
                    (Some(d), None) => PolicySubject::Device(DeviceId::new(d)),
                    (None, Some(_)) => PolicySubject::Controller,
                    _ => return Err(self.schema("subject", "expected device=… or controller=\"true\"")),
                });
            }
            "object" => {
                self.object = Some(
                    if let Some(p) = attrs.get("packet") {
                        PolicyObject::Packet(p.clone())
                    } else if let Some(f) = attrs.get("flow") {
                        PolicyObject::Flow(f.clone())
                    } else if let Some(s) = attrs.get("switch") {
                        PolicyObject::Switch(DeviceId::new(s))
                    } else {
                        return Err(self.schema("object", "expected packet=…, flow=… or switch=…"));
                    },
                );
            }
            "action" => {
                let action_name = attrs
                    .get("name")
                    .ok_or_else(|| self.schema("action", "missing name attribute"))?;
                let device = || -> Result<DeviceId, PolicyError> {
                    attrs
                        .get("device")
                        .map(DeviceId::new)
                        .ok_or_else(|| self.schema("action", format!("{action_name} needs device=…")))
                };
                let action = match action_name.as_str() {
                    "isolate" => PolicyAction::Isolate(device()?),
                    "update_forwarding_table" => PolicyAction::UpdateForwardingTable(device()?),
                    "alarm" => PolicyAction::Alarm,
                    "block_messages" => PolicyAction::BlockMessages(device()?),
                    "test_again" => PolicyAction::TestAgain(device()?),
                    other => {
                        return Err(PolicyError::UnknownAction {
                            path: format!("{}/action", self.path),
                            name: other.to_string(),
                        })
                    }
                };
                self.actions.push(action);
            }
            "condition" => {
                if let Some(k) = attrs.get("kind") {
                    self.condition.kind = Some(match k.as_str() {
                        "replay" => VerdictKind::Replay,
                        "misroute" => VerdictKind::Misroute,
                        "drop" => VerdictKind::Drop,
                        "generation" => VerdictKind::Generation,
                        "delay" => VerdictKind::Delay,
                        other => return Err(self.schema("condition", format!("unknown kind {other:?}"))),
                    });
                }
                if let Some(d) = attrs.get("device") {
                    self.condition.device = Some(DeviceId::new(d));
                }
                if let Some(p) = attrs.get("port") {
                    let port: u16 = p
                        .parse()
                        .map_err(|_| self.schema("condition", format!("bad port {p:?}")))?;
                    self.condition.port = Some(PortId(port));
                }
            }
            "exception" => {
                let reference = attrs
                    .get("policy")
                    .ok_or_else(|| self.schema("exception", "missing policy attribute"))?;
                self.exceptions.push(reference.clone());
            }
            "validity" => {
                let ms = attrs
                    .get("ms")
                    .ok_or_else(|| self.schema("validity", "missing ms attribute"))?;
                self.validity_ms = Some(
                    ms.parse()
                        .map_err(|_| self.schema("validity", format!("bad duration {ms:?}")))?,
                );
            }
            other => return Err(self.schema(other, "unknown element")),
        }
        Ok(())
    }

    fn finish(mut self) -> Result<ResponsePolicy, PolicyError> {
        let Some(subject) = self.subject.take() else {
            return Err(self.schema("subject", "missing"));
        };
        let Some(object) = self.object.take() else {
            return Err(self.schema("object", "missing"));
        };
        if self.actions.is_empty() {
            return Err(self.schema("action", "a policy needs at least one action"));
        }
        let Some(validity_ms) = self.validity_ms else {
            return Err(self.schema("validity", "missing"));
        };
        if validity_ms == 0 {
            return Err(PolicyError::ZeroValidity(self.id));
        }
        Ok(ResponsePolicy {
            id: self.id,
            subject,
            object,
            actions: self.actions,
            condition: self.condition,
            exceptions: self.exceptions,
            validity_ms,
        })
    }
}

fn check_exception_acyclic(policies: &[ResponsePolicy]) -> Result<(), PolicyError> {
    let by_id: BTreeMap<&str, &ResponsePolicy> =
        policies.iter().map(|p| (p.id.as_str(), p)).collect();
    // 0 = unvisited, 1 = in progress, 2 = done
    let mut state: BTreeMap<&str, u8> = BTreeMap::new();
    fn visit<'a>(
        id: &'a str,
        by_id: &BTreeMap<&'a str, &'a ResponsePolicy>,
        state: &mut BTreeMap<&'a str, u8>,
    ) -> Result<(), PolicyError> {
        match state.get(id) {
            Some(1) => return Err(PolicyError::ExceptionCycle(id.to_string())),
            Some(2) => return Ok(()),
            _ => {}
        }
        state.insert(id, 1);
        if let Some(p) = by_id.get(id) {
            for exc in &p.exceptions {
                visit(exc.as_str(), by_id, state)?;
            }
        }
        state.insert(id, 2);
        Ok(())
    }
    for p in policies {
        visit(p.id.as_str(), &by_id, &mut state)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Matching and execution
// ---------------------------------------------------------------------------

/// Structured alarm record, one JSON line per alarm in the log.
#[derive(Debug, Clone, Serialize)]
pub struct AlarmRecord {
    pub time: SimNs,
    pub policy_id: String,
    pub kind: VerdictKind,
    pub devices: Vec<DeviceId>,
    pub target: DeviceId,
    pub peer: DeviceId,
}

/// Evaluates policies against sweep verdicts, remembering which policies are
/// active (matched, unexpired) so exceptions can suppress across sweeps.
#[derive(Debug, Default)]
pub struct ResponseEngine {
    active: BTreeMap<String, SimNs>,
    pub alarm_log: Vec<AlarmRecord>,
}

impl ResponseEngine {
    pub fn new() -> Self {
        Self::default()
    }

    /// Is `policy_id` active (previously matched, not yet expired)?
    pub fn is_active(&self, policy_id: &str, now: SimNs) -> bool {
        self.active.get(policy_id).is_some_and(|&exp| exp > now)
    }

    /// Match the sweep's verdicts against the policies and emit the action
    /// requests, deterministically: policies evaluate in ascending id order,
    /// exceptions suppress while their target is active, expired activations
    /// are pruned, and any non-benign verdict that ends up with no action
    /// gets the default alarm.
    pub fn match_and_execute(
        &mut self,
        policies: &[ResponsePolicy],
        verdicts: &[Verdict],
        now: SimNs,
    ) -> Vec<ActionRequest> {
        self.active.retain(|_, exp| *exp > now);

        let mut ordered: Vec<&ResponsePolicy> = policies.iter().collect();
        ordered.sort_by(|a, b| a.id.cmp(&b.id));

        let nonbenign: Vec<&Verdict> =
            verdicts.iter().filter(|v| v.kind != VerdictKind::Benign).collect();

        // Which policies match which verdicts this sweep.
        let matched: BTreeMap<&str, Vec<&Verdict>> = ordered
            .iter()
            .map(|p| {
                let hits: Vec<&Verdict> = nonbenign
                    .iter()
                    .copied()
                    .filter(|v| p.condition.matches(v))
                    .collect();
                (p.id.as_str(), hits)
            })
            .collect();

        // Resolve activity in exception order: a policy is active when it
        // matched and no policy it excepts on is active. The exception graph
        // is acyclic (validated at parse), so memoized recursion terminates.
        let by_id: BTreeMap<&str, &ResponsePolicy> =
            ordered.iter().map(|p| (p.id.as_str(), *p)).collect();
        let mut activity: BTreeMap<String, bool> = BTreeMap::new();
        fn resolve(
            id: &str,
            by_id: &BTreeMap<&str, &ResponsePolicy>,
            matched: &BTreeMap<&str, Vec<&Verdict>>,
            previously_active: &BTreeMap<String, SimNs>,
            now: SimNs,
            activity: &mut BTreeMap<String, bool>,
        ) -> bool {
            if let Some(&a) = activity.get(id) {
                return a;
            }
            let Some(p) = by_id.get(id) else {
                return false;
            };
            let mut is_active = !matched.get(id).map_or(true, |v| v.is_empty())
                || previously_active.get(id).is_some_and(|&exp| exp > now);
            if is_active {
                for exc in &p.exceptions {
                    let exc_active = resolve(exc, by_id, matched, previously_active, now, activity)
                        || previously_active.get(exc.as_str()).is_some_and(|&exp| exp > now);
                    if exc_active {
                        is_active = false;
                        break;
                    }
                }
            }
            activity.insert(id.to_string(), is_active);
            is_active
        }

        let mut requests: Vec<ActionRequest> = Vec::new();
        let mut served: BTreeSet<usize> = BTreeSet::new(); // verdict indices with actions
        let verdict_index: BTreeMap<*const Verdict, usize> = nonbenign
            .iter()
            .enumerate()
            .map(|(i, v)| (*v as *const Verdict, i))
            .collect();

        for p in &ordered {
            let hits = &matched[p.id.as_str()];
            if hits.is_empty() {
                continue;
            }
            let active = resolve(p.id.as_str(), &by_id, &matched, &self.active, now, &mut activity);
            if !active {
                continue;
            }
            self.active.insert(p.id.clone(), now + p.validity_ms * 1_000_000);
            for v in hits {
                served.insert(verdict_index[&(*v as *const Verdict)]);
            }
            for action in &p.actions {
                let req = ActionRequest {
                    action: action.clone(),
                    policy_id: p.id.clone(),
                    issued_at: now,
                    expires_at: now + p.validity_ms * 1_000_000,
                    conflict_with: None,
                };
                if !requests.iter().any(|r| r.action == req.action && r.policy_id == req.policy_id) {
                    requests.push(req);
                }
            }
            for v in hits {
                self.alarm_log.push(AlarmRecord {
                    time: now,
                    policy_id: p.id.clone(),
                    kind: v.kind,
                    devices: v.malicious_devices.iter().cloned().collect(),
                    target: v.target.clone(),
                    peer: v.peer.clone(),
                });
            }
        }

        // Default alarm for verdicts no policy served.
        for (i, v) in nonbenign.iter().enumerate() {
            if !served.contains(&i) {
                requests.push(ActionRequest {
                    action: PolicyAction::Alarm,
                    policy_id: "default".into(),
                    issued_at: now,
                    expires_at: now + 1_000_000,
                    conflict_with: None,
                });
                self.alarm_log.push(AlarmRecord {
                    time: now,
                    policy_id: "default".into(),
                    kind: v.kind,
                    devices: v.malicious_devices.iter().cloned().collect(),
                    target: v.target.clone(),
                    peer: v.peer.clone(),
                });
            }
        }

        // Conflicting simultaneous actions on one device execute in
        // ascending policy-id order and carry a note about each other.
        let mut by_target: BTreeMap<DeviceId, Vec<usize>> = BTreeMap::new();
        for (i, r) in requests.iter().enumerate() {
            if let Some(t) = r.action.target() {
                by_target.entry(t.clone()).or_default().push(i);
            }
        }
        for idxs in by_target.values() {
            if idxs.len() > 1 {
                for window in idxs.windows(2) {
                    let earlier = requests[window[0]].policy_id.clone();
                    requests[window[1]].conflict_with = Some(earlier);
                }
            }
        }
        requests
    }

    /// Render the alarm log as line-oriented structured text.
    pub fn alarm_log_text(&self) -> String {
        let mut out = String::new();
        for rec in &self.alarm_log {
            let _ = writeln!(out, "{}", serde_json::to_string(rec).expect("alarm serializes"));
        }
        out
    }
}

/// Extra context [`apply_to_network`] needs beyond the topology itself.
#[derive(Debug, Default)]
pub struct ApplyContext {
    /// Replacement flow tables staged by the harness for
    /// `update_forwarding_table` actions.
    pub replacement_rules: BTreeMap<DeviceId, Vec<FlowRule>>,
    /// Devices queued for re-probing by `test_again` actions.
    pub reprobe_queue: Vec<DeviceId>,
    /// Alarms raised by `alarm` actions applied directly to the network.
    pub alarms: Vec<String>,
}

/// Apply one unexpired action request to the live network.
pub fn apply_to_network(
    req: &ActionRequest,
    state: &mut NetworkState,
    ctx: &mut ApplyContext,
    now: SimNs,
) -> Result<(), ResponseError> {
    if now >= req.expires_at {
        return Err(ResponseError::Expired {
            policy: req.policy_id.clone(),
            expired_at: req.expires_at,
            now,
        });
    }
    let known = |d: &DeviceId| state.devices.contains_key(d);
    match &req.action {
        PolicyAction::Isolate(d) => {
            if !known(d) {
                return Err(ResponseError::UnknownDevice(d.clone()));
            }
            state.remove_device_links(d);
        }
        PolicyAction::UpdateForwardingTable(d) => {
            if !known(d) {
                return Err(ResponseError::UnknownDevice(d.clone()));
            }
            let rules = ctx
                .replacement_rules
                .get(d)
                .cloned()
                .ok_or_else(|| ResponseError::NoReplacementRules(d.clone()))?;
            state.install_rules(d, rules).expect("device known");
        }
        PolicyAction::Alarm => {
            ctx.alarms.push(format!("alarm from policy {} at {}", req.policy_id, now));
        }
        PolicyAction::BlockMessages(d) => {
            if !known(d) {
                return Err(ResponseError::UnknownDevice(d.clone()));
            }
            state.blocked_to_controller.insert(d.clone());
        }
        PolicyAction::TestAgain(d) => {
            if !known(d) {
                return Err(ResponseError::UnknownDevice(d.clone()));
            }
            ctx.reprobe_queue.push(d.clone());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::TrajectoryPair;

    fn verdict(kind: VerdictKind, device: &str) -> Verdict {
        Verdict {
            sweep: 1,
            target: DeviceId::new("a"),
            peer: DeviceId::new("e"),
            port: PortId(0),
            kind,
            malicious_devices: BTreeSet::from([DeviceId::new(device)]),
            notes: vec![],
            evidence: TrajectoryPair {
                src: DeviceId::new("a"),
                dst: DeviceId::new("e"),
                port: PortId(0),
                expected: vec![],
                best_expected: vec![],
                actual: vec![],
                destination_reached: false,
                t_e: 0,
                t_a: 0,
                t_d: 0,
                walks: vec![],
                entry_sender: None,
                injected_at: 0,
                expected_full: vec![],
                hop_interval: 1,
            },
            emitted_at: 0,
        }
    }

    const WORKED_EXAMPLES: &str = r#"
<policies>
  <policy id="fd-f-reroute">
    <subject device="g"/>
    <object switch="f"/>
    <condition device="f"/>
    <action name="update_forwarding_table" device="g"/>
    <validity ms="60000"/>
  </policy>
  <policy id="fd-f-block-messages">
    <subject controller="true"/>
    <object switch="f"/>
    <condition device="f"/>
    <action name="block_messages" device="f"/>
    <validity ms="60000"/>
  </policy>
  <policy id="fd-b-isolate">
    <subject device="b"/>
    <object switch="b"/>
    <condition device="b"/>
    <action name="isolate" device="b"/>
    <exception policy="fd-f-reroute"/>
    <validity ms="60000"/>
  </policy>
</policies>
"#;

    #[test]
    fn parses_the_worked_example_policies() {
        let policies = parse_policies(WORKED_EXAMPLES).unwrap();
        assert_eq!(policies.len(), 3);
        assert_eq!(policies[0].id, "fd-f-reroute");
        assert_eq!(policies[0].subject, PolicySubject::Device(DeviceId::new("g")));
        assert_eq!(
            policies[0].actions,
            vec![PolicyAction::UpdateForwardingTable(DeviceId::new("g"))]
        );
        assert_eq!(policies[2].exceptions, vec!["fd-f-reroute"]);
    }

    #[test]
    fn two_subjects_violate_the_schema() {
        let xml = r#"
<policies>
  <policy id="p">
    <subject device="g"/>
    <subject device="h"/>
    <object switch="f"/>
    <action name="alarm"/>
    <validity ms="1"/>
  </policy>
</policies>"#;
        let err = parse_policies(xml).unwrap_err();
        assert!(matches!(err, PolicyError::Schema { ref message, .. } if message.contains("one subject")));
    }

    #[test]
    fn unknown_action_is_rejected_with_path() {
        let xml = r#"
<policies>
  <policy id="p">
    <subject device="g"/>
    <object switch="f"/>
    <action name="explode" device="f"/>
    <validity ms="1"/>
  </policy>
</policies>"#;
        let err = parse_policies(xml).unwrap_err();
        match err {
            PolicyError::UnknownAction { path, name } => {
                assert_eq!(name, "explode");
                assert!(path.contains("policy[1]"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn duplicate_ids_and_dangling_exceptions_are_rejected() {
        let dup = r#"
<policies>
  <policy id="p"><subject device="a"/><object switch="a"/><action name="alarm"/><validity ms="1"/></policy>
  <policy id="p"><subject device="b"/><object switch="b"/><action name="alarm"/><validity ms="1"/></policy>
</policies>"#;
        assert!(matches!(parse_policies(dup), Err(PolicyError::DuplicateId(_))));

        let dangling = r#"
<policies>
  <policy id="p"><subject device="a"/><object switch="a"/><action name="alarm"/><exception policy="nope"/><validity ms="1"/></policy>
</policies>"#;
        assert!(matches!(parse_policies(dangling), Err(PolicyError::DanglingException { .. })));
    }

    #[test]
    fn exception_cycles_are_rejected() {
        let xml = r#"
<policies>
  <policy id="p1"><subject device="a"/><object switch="a"/><action name="alarm"/><exception policy="p2"/><validity ms="1"/></policy>
  <policy id="p2"><subject device="b"/><object switch="b"/><action name="alarm"/><exception policy="p1"/><validity ms="1"/></policy>
</policies>"#;
        assert!(matches!(parse_policies(xml), Err(PolicyError::ExceptionCycle(_))));
    }

    #[test]
    fn empty_policy_set_runs_alarm_only() {
        let mut engine = ResponseEngine::new();
        let verdicts = vec![verdict(VerdictKind::Drop, "b")];
        let reqs = engine.match_and_execute(&[], &verdicts, 0);
        assert_eq!(reqs.len(), 1);
        assert_eq!(reqs[0].action, PolicyAction::Alarm);
        assert_eq!(reqs[0].policy_id, "default");
    }

    #[test]
    fn worked_example_one_fd_f_matches_both_policies() {
        let policies = parse_policies(WORKED_EXAMPLES).unwrap();
        let mut engine = ResponseEngine::new();
        let verdicts = vec![verdict(VerdictKind::Misroute, "f")];
        let reqs = engine.match_and_execute(&policies, &verdicts, 0);
        let actions: BTreeSet<&PolicyAction> = reqs.iter().map(|r| &r.action).collect();
        assert!(actions.contains(&PolicyAction::UpdateForwardingTable(DeviceId::new("g"))));
        assert!(actions.contains(&PolicyAction::BlockMessages(DeviceId::new("f"))));
        assert_eq!(reqs.len(), 2);
    }

    #[test]
    fn worked_example_two_active_exception_suppresses() {
        let policies = parse_policies(WORKED_EXAMPLES).unwrap();
        let mut engine = ResponseEngine::new();
        // Sweep 1: FD(f) malicious; the reroute policy becomes active.
        engine.match_and_execute(&policies, &[verdict(VerdictKind::Misroute, "f")], 0);
        assert!(engine.is_active("fd-f-reroute", 1));
        // Sweep 2: only FD(b) malicious; its policy excepts on the still
        // active FD(f) policy, so no isolate is issued — only the default
        // alarm for the unserved verdict.
        let reqs = engine.match_and_execute(&policies, &[verdict(VerdictKind::Misroute, "b")], 1_000_000);
        assert!(reqs.iter().all(|r| r.action != PolicyAction::Isolate(DeviceId::new("b"))));
        assert_eq!(reqs.len(), 1);
        assert_eq!(reqs[0].action, PolicyAction::Alarm);
        assert_eq!(reqs[0].policy_id, "default");
    }

    #[test]
    fn expired_exception_no_longer_suppresses() {
        let policies = parse_policies(WORKED_EXAMPLES).unwrap();
        let mut engine = ResponseEngine::new();
        engine.match_and_execute(&policies, &[verdict(VerdictKind::Misroute, "f")], 0);
        // 60s validity; jump past it.
        let later = 61_000 * 1_000_000;
        let reqs = engine.match_and_execute(&policies, &[verdict(VerdictKind::Misroute, "b")], later);
        assert!(reqs.iter().any(|r| r.action == PolicyAction::Isolate(DeviceId::new("b"))));
    }

    #[test]
    fn determinism_same_inputs_same_actions() {
        let policies = parse_policies(WORKED_EXAMPLES).unwrap();
        let verdicts = vec![verdict(VerdictKind::Misroute, "f"), verdict(VerdictKind::Drop, "b")];
        let r1 = ResponseEngine::new().match_and_execute(&policies, &verdicts, 5);
        let r2 = ResponseEngine::new().match_and_execute(&policies, &verdicts, 5);
        assert_eq!(format!("{r1:?}"), format!("{r2:?}"));
    }

    #[test]
    fn conflicting_actions_on_one_device_are_ordered_and_noted() {
        let xml = r#"
<policies>
  <policy id="a-isolate"><subject device="b"/><object switch="b"/><condition device="b"/><action name="isolate" device="b"/><validity ms="1000"/></policy>
  <policy id="b-update"><subject device="b"/><object switch="b"/><condition device="b"/><action name="update_forwarding_table" device="b"/><validity ms="1000"/></policy>
</policies>"#;
        let policies = parse_policies(xml).unwrap();
        let mut engine = ResponseEngine::new();
        let reqs = engine.match_and_execute(&policies, &[verdict(VerdictKind::Drop, "b")], 0);
        assert_eq!(reqs.len(), 2);
        assert_eq!(reqs[0].policy_id, "a-isolate");
        assert_eq!(reqs[1].policy_id, "b-update");
        assert_eq!(reqs[1].conflict_with.as_deref(), Some("a-isolate"));
    }

    #[test]
    fn apply_rejects_expired_requests_and_unknown_devices() {
        use crate::netmodel::{build_state, RulesFile, TopologyDevice, TopologyFile};
        let topo = TopologyFile {
            devices: vec![TopologyDevice { id: "b".into(), ports: 2 }],
            links: vec![],
            hosts: vec![],
        };
        let rules = RulesFile { header_bits: 4, tables: vec![] };
        let mut state = build_state(&topo, &rules).unwrap();
        let mut ctx = ApplyContext::default();
        let req = ActionRequest {
            action: PolicyAction::Isolate(DeviceId::new("b")),
            policy_id: "p".into(),
            issued_at: 0,
            expires_at: 10,
            conflict_with: None,
        };
        assert!(matches!(
            apply_to_network(&req, &mut state, &mut ctx, 10),
            Err(ResponseError::Expired { .. })
        ));
        let req2 = ActionRequest {
            action: PolicyAction::Isolate(DeviceId::new("zz")),
            policy_id: "p".into(),
            issued_at: 0,
            expires_at: 10,
            conflict_with: None,
        };
        assert!(matches!(
            apply_to_network(&req2, &mut state, &mut ctx, 5),
            Err(ResponseError::UnknownDevice(_))
        ));
    }

    #[test]
    fn isolate_removes_links_and_alarm_leaves_topology_alone() {
        use crate::netmodel::{build_state, RulesFile, TopologyDevice, TopologyFile, TopologyLink};
        let topo = TopologyFile {
            devices: vec![
                TopologyDevice { id: "a".into(), ports: 2 },
                TopologyDevice { id: "b".into(), ports: 2 },
            ],
            links: vec![TopologyLink("a".into(), 1, "b".into(), 1)],
            hosts: vec![],
        };
        let rules = RulesFile { header_bits: 4, tables: vec![] };
        let mut state = build_state(&topo, &rules).unwrap();
        let mut ctx = ApplyContext::default();
        let mk = |action: PolicyAction| ActionRequest {
            action,
            policy_id: "p".into(),
            issued_at: 0,
            expires_at: 1_000,
            conflict_with: None,
        };
        apply_to_network(&mk(PolicyAction::Alarm), &mut state, &mut ctx, 1).unwrap();
        assert_eq!(state.links.len(), 2);
        assert_eq!(ctx.alarms.len(), 1);
        apply_to_network(&mk(PolicyAction::Isolate(DeviceId::new("b"))), &mut state, &mut ctx, 1)
            .unwrap();
        assert!(state.links.is_empty());
    }
}
