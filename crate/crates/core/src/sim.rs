//! Deterministic discrete-event engine.
//!
//! Time is an integer count of picoseconds. Pending events are dispatched in
//! ascending `(fire_at, seq)` order, so two events scheduled for the same
//! instant fire in insertion order.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashSet};
use std::fmt;
use std::io::Write;
use std::ops::{Add, AddAssign, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulated time in picoseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub const fn ps(v: u64) -> Self {
        SimTime(v)
    }

    pub const fn ns(v: u64) -> Self {
        SimTime(v * 1_000)
    }

    pub const fn us(v: u64) -> Self {
        SimTime(v * 1_000_000)
    }

    pub const fn as_ps(self) -> u64 {
        self.0
    }

    pub fn as_ns_f64(self) -> f64 {
        self.0 as f64 / 1_000.0
    }

    pub fn as_us_f64(self) -> f64 {
        self.0 as f64 / 1_000_000.0
    }

    /// Half of this duration, truncated to the picosecond.
    pub const fn half(self) -> Self {
        SimTime(self.0 / 2)
    }

    pub fn saturating_sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(rhs.0))
    }

    /// Duration of one cycle of a clock at `freq_hz`, truncated to whole
    /// picoseconds (3 GHz -> 333 ps, 2 GHz -> 500 ps).
    pub fn cycle_of(freq_hz: u64) -> SimTime {
        SimTime(1_000_000_000_000 / freq_hz.max(1))
    }

    /// Time to move `bytes` over a link of `bytes_per_sec`, rounded up.
    pub fn transfer(bytes: u64, bytes_per_sec: u64) -> SimTime {
        if bytes == 0 {
            return SimTime::ZERO;
        }
        let num = bytes as u128 * 1_000_000_000_000u128;
        let den = bytes_per_sec.max(1) as u128;
        SimTime(num.div_ceil(den) as u64)
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        self.0 += rhs.0;
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ps", self.0)
    }
}

/// Unique event identifier. Equal to the insertion sequence number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventId(pub u64);

/// Who receives an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ActorId {
    Host,
    Ccm,
    Fabric,
    Other(u32),
}

impl fmt::Display for ActorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActorId::Host => f.write_str("host"),
            ActorId::Ccm => f.write_str("ccm"),
            ActorId::Fabric => f.write_str("fabric"),
            ActorId::Other(n) => write!(f, "actor{n}"),
        }
    }
}

/// Payloads name their kind for the dispatch trace.
pub trait PayloadKind {
    fn kind(&self) -> &'static str;
}

#[derive(Debug, Clone)]
pub struct Event<P> {
    pub id: EventId,
    pub fire_at: SimTime,
    pub seq: u64,
    pub target: ActorId,
    pub payload: P,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("negative delay {0} ps")]
    NegativeDelay(i64),
    #[error("engine already finished")]
    Finished,
    #[error("event cap of {cap} dispatches exceeded at t={now}; likely livelock")]
    Livelock { cap: u64, now: SimTime },
}

/// Receives dispatched events.
pub trait Actor<P> {
    type Error: From<SimError>;

    fn handle(&mut self, engine: &mut Engine<P>, event: Event<P>) -> Result<(), Self::Error>;
}

struct Pending<P> {
    key: Reverse<(SimTime, u64)>,
    target: ActorId,
    payload: P,
}

impl<P> PartialEq for Pending<P> {
    fn eq(&self, other: &Self) -> bool {
        self.key == other.key
    }
}
impl<P> Eq for Pending<P> {}
impl<P> PartialOrd for Pending<P> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl<P> Ord for Pending<P> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key.cmp(&other.key)
    }
}

pub const DEFAULT_EVENT_CAP: u64 = 1_000_000_000;

pub struct Engine<P> {
    now: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Pending<P>>,
    live: HashSet<u64>,
    dispatched: u64,
    event_cap: u64,
    finished: bool,
    trace: Option<Box<dyn Write>>,
}

impl<P> Default for Engine<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> Engine<P> {
    pub fn new() -> Self {
        Engine {
            now: SimTime::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
            live: HashSet::new(),
            dispatched: 0,
            event_cap: DEFAULT_EVENT_CAP,
            finished: false,
            trace: None,
        }
    }

    pub fn with_event_cap(mut self, cap: u64) -> Self {
        self.event_cap = cap;
        self
    }

    /// Emit one tab-separated line per dispatch to `sink`.
    pub fn with_trace(mut self, sink: Box<dyn Write>) -> Self {
        self.trace = Some(sink);
        self
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.live.len()
    }

    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    pub fn schedule(&mut self, target: ActorId, delay: SimTime, payload: P) -> Result<EventId, SimError> {
        if self.finished {
            return Err(SimError::Finished);
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Pending {
            key: Reverse((self.now + delay, seq)),
            target,
            payload,
        });
        self.live.insert(seq);
        Ok(EventId(seq))
    }

    /// Signed-delay entry point for callers computing offsets arithmetically.
    pub fn schedule_signed(&mut self, target: ActorId, delay_ps: i64, payload: P) -> Result<EventId, SimError> {
        if delay_ps < 0 {
            return Err(SimError::NegativeDelay(delay_ps));
        }
        self.schedule(target, SimTime(delay_ps as u64), payload)
    }

    /// Schedule at an absolute time, which must not be in the past.
    pub fn schedule_at(&mut self, target: ActorId, at: SimTime, payload: P) -> Result<EventId, SimError> {
        if at < self.now {
            return Err(SimError::NegativeDelay(at.0 as i64 - self.now.0 as i64));
        }
        let delay = at - self.now;
        self.schedule(target, delay, payload)
    }

    pub fn cancel(&mut self, id: EventId) -> bool {
        self.live.remove(&id.0)
    }

    fn pop(&mut self) -> Option<Event<P>> {
        while let Some(p) = self.queue.pop() {
            let Reverse((fire_at, seq)) = p.key;
            if self.live.remove(&seq) {
                return Some(Event {
                    id: EventId(seq),
                    fire_at,
                    seq,
                    target: p.target,
                    payload: p.payload,
                });
            }
        }
        None
    }

    /// Dispatch everything pending, in total order, until nothing is left.
    /// Returns the clock value of the last dispatch (0 for an empty run).
    pub fn run_until_idle<A>(&mut self, actor: &mut A) -> Result<SimTime, A::Error>
    where
        A: Actor<P>,
        P: PayloadKind,
    {
        while let Some(ev) = self.pop() {
            if self.dispatched >= self.event_cap {
                return Err(SimError::Livelock {
                    cap: self.event_cap,
                    now: self.now,
                }
                .into());
            }
            debug_assert!(ev.fire_at >= self.now);
            self.now = ev.fire_at;
            self.dispatched += 1;
            if let Some(sink) = self.trace.as_mut() {
                // Trace output is best effort; a broken sink must not alter the run.
                let _ = writeln!(
                    sink,
                    "{}\t{}\t{}\t{}",
                    ev.fire_at.0,
                    ev.seq,
                    ev.target,
                    ev.payload.kind()
                );
            }
            actor.handle(self, ev)?;
        }
        self.finished = true;
        if let Some(sink) = self.trace.as_mut() {
            let _ = sink.flush();
        }
        Ok(self.now)
    }
}
