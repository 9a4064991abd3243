//! Exhaustive interleaving explorer for the ring protocol.
//!
//! The device and host are small step machines built on the same
//! [`HostRings`] / [`DeviceRingView`] code the simulator uses. Every
//! interleaving of their atomic steps is enumerated depth-first, with
//! flow-control messages delivered in any order. States are memoized.

use std::collections::HashSet;
use std::fmt;

use thiserror::Error;

use super::{DeviceRingView, HostRings, MetadataRecord, RingConfig, RingViolation};

pub const MAX_CAPACITY: u64 = 4;
pub const MAX_TOTAL_STEPS: u32 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Machine {
    /// Payload written, then metadata, then tails published.
    Shipped,
    /// Metadata written and published before the payload lands.
    BrokenMetaFirst,
}

impl Machine {
    pub fn as_str(self) -> &'static str {
        match self {
            Machine::Shipped => "shipped",
            Machine::BrokenMetaFirst => "broken-meta-first",
        }
    }
}

impl std::str::FromStr for Machine {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "shipped" => Ok(Machine::Shipped),
            "broken-meta-first" => Ok(Machine::BrokenMetaFirst),
            other => Err(format!(
                "unknown machine `{other}` (expected shipped or broken-meta-first)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Budget {
    pub capacity: u64,
    pub device_steps: u32,
    pub host_steps: u32,
}

impl Default for Budget {
    fn default() -> Self {
        Budget {
            capacity: 2,
            device_steps: 6,
            host_steps: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BudgetError {
    #[error("capacity {0} exceeds explorer limit {MAX_CAPACITY}")]
    Capacity(u64),
    #[error("capacity must be at least 1")]
    ZeroCapacity,
    #[error("{0} total steps exceed explorer limit {MAX_TOTAL_STEPS}")]
    Steps(u32),
}

impl Budget {
    pub fn check(&self) -> Result<(), BudgetError> {
        if self.capacity == 0 {
            return Err(BudgetError::ZeroCapacity);
        }
        if self.capacity > MAX_CAPACITY {
            return Err(BudgetError::Capacity(self.capacity));
        }
        let total = self.device_steps + self.host_steps;
        if total > MAX_TOTAL_STEPS {
            return Err(BudgetError::Steps(total));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Step {
    Reserve,
    WritePayload,
    WriteMeta,
    Publish,
    ApplyFlowControl(usize),
    Poll,
    FetchMeta,
    ConsumePayload(usize),
    AdvanceHeads,
    SendFlowControl,
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Step::Reserve => f.write_str("dev:reserve"),
            Step::WritePayload => f.write_str("dev:write-payload"),
            Step::WriteMeta => f.write_str("dev:write-meta"),
            Step::Publish => f.write_str("dev:publish-tail"),
            Step::ApplyFlowControl(i) => write!(f, "dev:apply-fc[{i}]"),
            Step::Poll => f.write_str("host:poll"),
            Step::FetchMeta => f.write_str("host:fetch-meta"),
            Step::ConsumePayload(i) => write!(f, "host:consume[{i}]"),
            Step::AdvanceHeads => f.write_str("host:advance-heads"),
            Step::SendFlowControl => f.write_str("host:send-fc"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Violation {
    pub violation: RingViolation,
    pub steps: Vec<Step>,
}

impl Violation {
    pub fn family(&self) -> &'static str {
        self.violation.family()
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {} after", self.family(), self.violation)?;
        for s in &self.steps {
            write!(f, " {s}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Report {
    pub machine: Machine,
    pub budget: Budget,
    pub states: usize,
    pub violations: Vec<Violation>,
}

/// Where the device is in writing its current record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Phase {
    Idle,
    Reserved {
        p: u64,
        m: u64,
    },
    PayloadDone {
        p: u64,
        m: u64,
    },
    MetaDone {
        p: u64,
        m: u64,
    },
    /// Broken machine: metadata already published, payload pending.
    MetaPublished {
        p: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct State {
    host: HostRings,
    dev: DeviceRingView,
    phase: Phase,
    produced: u64,
    /// Metadata tail the host last observed.
    polled: u64,
    pool: Vec<MetadataRecord>,
    in_flight: Vec<(u64, u64)>,
    device_left: u32,
    host_left: u32,
}

fn record(dev: &DeviceRingView, p: u64, m: u64, produced: u64, slot_size: u64) -> MetadataRecord {
    MetadataRecord {
        seq: m,
        payload_slot: p % dev.capacity,
        payload_index: p,
        result_offset: produced * slot_size,
        length: slot_size,
        kernel_id: 0,
        last: false,
    }
}

impl State {
    fn enabled(&self, machine: Machine) -> Vec<Step> {
        let mut out = Vec::new();
        if self.device_left > 0 {
            match (self.phase, machine) {
                (Phase::Idle, _) => {
                    let mut probe = self.dev;
                    if probe.device_reserve(1, 1).is_ok() {
                        out.push(Step::Reserve);
                    }
                }
                (Phase::Reserved { .. }, Machine::Shipped) => out.push(Step::WritePayload),
                (Phase::PayloadDone { .. }, _) => out.push(Step::WriteMeta),
                (Phase::MetaDone { .. }, _) => out.push(Step::Publish),
                (Phase::Reserved { .. }, Machine::BrokenMetaFirst) => out.push(Step::WriteMeta),
                (Phase::MetaPublished { .. }, _) => out.push(Step::WritePayload),
            }
            for i in 0..self.in_flight.len() {
                out.push(Step::ApplyFlowControl(i));
            }
        }
        if self.host_left > 0 {
            out.push(Step::Poll);
            if self.host.host_poll_meta_tail().start < self.polled {
                out.push(Step::FetchMeta);
            }
            for i in 0..self.pool.len() {
                out.push(Step::ConsumePayload(i));
            }
            out.push(Step::AdvanceHeads);
            out.push(Step::SendFlowControl);
        }
        out
    }

    fn apply(&mut self, step: Step, machine: Machine) -> Result<(), RingViolation> {
        let slot_size = self.host.slot_size;
        match step {
            Step::Reserve => {
                self.device_left -= 1;
                let r = self
                    .dev
                    .device_reserve(1, 1)
                    .expect("reserve only enabled when it succeeds");
                self.phase = Phase::Reserved {
                    p: r.payload[0],
                    m: r.meta[0],
                };
            }
            Step::WritePayload => {
                self.device_left -= 1;
                match self.phase {
                    Phase::Reserved { p, m } => {
                        self.host.write_payload(p)?;
                        self.phase = Phase::PayloadDone { p, m };
                    }
                    Phase::MetaPublished { p } => {
                        self.host.write_payload(p)?;
                        self.host.publish_payload_tail(p + 1)?;
                        self.produced += 1;
                        self.phase = Phase::Idle;
                    }
                    _ => unreachable!(),
                }
            }
            Step::WriteMeta => {
                self.device_left -= 1;
                match (self.phase, machine) {
                    (Phase::PayloadDone { p, m }, _) => {
                        let rec = record(&self.dev, p, m, self.produced, slot_size);
                        self.host.write_meta(m, rec)?;
                        self.phase = Phase::MetaDone { p, m };
                    }
                    (Phase::Reserved { p, m }, Machine::BrokenMetaFirst) => {
                        let rec = record(&self.dev, p, m, self.produced, slot_size);
                        self.host.write_meta(m, rec)?;
                        self.host.publish_meta_tail(m + 1)?;
                        self.phase = Phase::MetaPublished { p };
                    }
                    _ => unreachable!(),
                }
            }
            Step::Publish => {
                self.device_left -= 1;
                let Phase::MetaDone { p, m } = self.phase else {
                    unreachable!()
                };
                self.host.publish_payload_tail(p + 1)?;
                self.host.publish_meta_tail(m + 1)?;
                self.produced += 1;
                self.phase = Phase::Idle;
            }
            Step::ApplyFlowControl(i) => {
                self.device_left -= 1;
                let (ph, mh) = self.in_flight.remove(i);
                self.dev.apply_flow_control(ph, mh);
            }
            Step::Poll => {
                self.host_left -= 1;
                self.polled = self.host.meta().tail();
            }
            Step::FetchMeta => {
                self.host_left -= 1;
                if let Some(r) = self.host.fetch_meta()? {
                    self.pool.push(r);
                }
            }
            Step::ConsumePayload(i) => {
                self.host_left -= 1;
                let r = self.pool.remove(i);
                self.host.host_consume_payload(&r)?;
            }
            Step::AdvanceHeads => {
                self.host_left -= 1;
                self.host.advance_heads();
            }
            Step::SendFlowControl => {
                self.host_left -= 1;
                self.in_flight.push(self.host.heads());
            }
        }
        Ok(())
    }

    fn indexes(&self) -> [(&'static str, u64); 6] {
        [
            ("payload head", self.host.payload().head()),
            ("metadata head", self.host.meta().head()),
            ("payload tail", self.host.payload().tail()),
            ("metadata tail", self.host.meta().tail()),
            ("device payload head", self.dev.local_payload_head),
            ("device metadata head", self.dev.local_meta_head),
        ]
    }
}

fn check_monotone(before: &State, after: &State) -> Result<(), RingViolation> {
    for ((what, from), (_, to)) in before.indexes().into_iter().zip(after.indexes()) {
        if to < from {
            return Err(RingViolation::NonMonotonic { what, from, to });
        }
    }
    Ok(())
}

pub fn explore(machine: Machine, budget: Budget) -> Result<Report, BudgetError> {
    budget.check()?;
    let cfg = RingConfig {
        capacity: budget.capacity,
        ..RingConfig::default()
    };
    let init = State {
        host: HostRings::new(&cfg),
        dev: DeviceRingView::new(budget.capacity),
        phase: Phase::Idle,
        produced: 0,
        polled: 0,
        pool: Vec::new(),
        in_flight: Vec::new(),
        device_left: budget.device_steps,
        host_left: budget.host_steps,
    };
    let mut seen = HashSet::new();
    let mut violations = Vec::new();
    let mut path = Vec::new();
    dfs(&init, machine, &mut seen, &mut path, &mut violations);
    Ok(Report {
        machine,
        budget,
        states: seen.len(),
        violations,
    })
}

fn dfs(state: &State, machine: Machine, seen: &mut HashSet<State>, path: &mut Vec<Step>, out: &mut Vec<Violation>) {
    if !seen.insert(state.clone()) {
        return;
    }
    for step in state.enabled(machine) {
        let mut next = state.clone();
        path.push(step);
        let result = next
            .apply(step, machine)
            .and_then(|_| check_monotone(state, &next))
            .and_then(|_| next.dev.check_against(&next.host));
        match result {
            Ok(()) => dfs(&next, machine, seen, path, out),
            Err(violation) => out.push(Violation {
                violation,
                steps: path.clone(),
            }),
        }
        path.pop();
    }
}
