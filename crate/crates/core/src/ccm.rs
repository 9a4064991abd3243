//! CCM device model: µthread pool scheduling and the KAI DMA executor.
//!
//! Both pieces are plain state machines; the simulation drives them with the
//! current time and turns their outputs into events.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheduler {
    Fifo,
    Rr,
}

impl Scheduler {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheduler::Fifo => "fifo",
            Scheduler::Rr => "rr",
        }
    }
}

impl fmt::Display for Scheduler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheduler {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "fifo" => Ok(Scheduler::Fifo),
            "rr" => Ok(Scheduler::Rr),
            other => Err(format!("unknown scheduler `{other}` (expected fifo or rr)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CcmConfig {
    pub n_units: u32,
    pub threads_per_unit: u32,
    pub freq_hz: u64,
    pub scheduler: Scheduler,
    pub ooo_streaming: bool,
    /// Slots per DMA request.
    pub streaming_factor: u64,
    /// Cycles spent handing a task to a µthread.
    pub assign_cycles: u64,
}

impl Default for CcmConfig {
    fn default() -> Self {
        CcmConfig {
            n_units: 16,
            threads_per_unit: 16,
            freq_hz: 2_000_000_000,
            scheduler: Scheduler::Fifo,
            ooo_streaming: true,
            streaming_factor: 1,
            assign_cycles: 1,
        }
    }
}

impl CcmConfig {
    pub fn uthreads(&self) -> usize {
        (self.n_units * self.threads_per_unit) as usize
    }

    pub fn assign_overhead(&self) -> SimTime {
        SimTime(SimTime::cycle_of(self.freq_hz).as_ps() * self.assign_cycles)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.n_units == 0 {
            return Err("ccm.n_units: must be >= 1".into());
        }
        if self.threads_per_unit == 0 {
            return Err("ccm.threads_per_unit: must be >= 1".into());
        }
        if self.freq_hz == 0 {
            return Err("ccm.freq_hz: must be > 0".into());
        }
        if self.streaming_factor == 0 {
            return Err("ccm.streaming_factor: must be >= 1".into());
        }
        Ok(())
    }
}

/// Physical address window whose stores the packet filter treats as kernel
/// launches.
pub const OFFLOAD_RANGE: std::ops::Range<u64> = 0x7f00_0000_0000..0x7f00_0001_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreClass {
    Plain,
    KernelLaunch,
}

pub fn classify_store(addr: u64) -> StoreClass {
    if OFFLOAD_RANGE.contains(&addr) {
        StoreClass::KernelLaunch
    } else {
        StoreClass::Plain
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueuedTask {
    pub kernel: u32,
    pub task: usize,
    pub ready_at: SimTime,
    pub compute: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Assignment {
    pub kernel: u32,
    pub task: usize,
    pub uthread: usize,
    pub start: SimTime,
    pub end: SimTime,
}

/// A pool of identical µthreads fed from one task queue. Also used for the
/// host's task execution.
#[derive(Debug, Clone)]
pub struct TaskPool {
    policy: Scheduler,
    n_units: usize,
    threads_per_unit: usize,
    overhead: SimTime,
    busy: Vec<bool>,
    queue: VecDeque<QueuedTask>,
    /// Position in the round-robin µthread cycle.
    cursor: usize,
}

impl TaskPool {
    pub fn new(policy: Scheduler, n_units: u32, threads_per_unit: u32, overhead: SimTime) -> Self {
        let n = (n_units * threads_per_unit) as usize;
        TaskPool {
            policy,
            n_units: n_units as usize,
            threads_per_unit: threads_per_unit as usize,
            overhead,
            busy: vec![false; n],
            queue: VecDeque::new(),
            cursor: 0,
        }
    }

    pub fn uthreads(&self) -> usize {
        self.busy.len()
    }

    pub fn unit_of(&self, uthread: usize) -> usize {
        uthread / self.threads_per_unit
    }

    /// Take a µthread out of service (e.g. a dedicated handler context).
    pub fn reserve_uthread(&mut self, uthread: usize) {
        self.busy[uthread] = true;
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    pub fn idle(&self) -> bool {
        self.queue.is_empty() && self.busy.iter().all(|b| !b)
    }

    pub fn push(&mut self, task: QueuedTask) {
        self.queue.push_back(task);
    }

    pub fn release(&mut self, uthread: usize) {
        debug_assert!(self.busy[uthread]);
        self.busy[uthread] = false;
    }

    fn lowest_free(&self) -> Option<usize> {
        self.busy.iter().position(|b| !b)
    }

    /// Next free µthread in thread-major order across units: thread 0 of every
    /// unit, then thread 1 of every unit, and so on.
    fn next_free_rr(&mut self) -> Option<usize> {
        let n = self.busy.len();
        for step in 0..n {
            let k = (self.cursor + step) % n;
            let id = (k % self.n_units) * self.threads_per_unit + k / self.n_units;
            if !self.busy[id] {
                self.cursor = (k + 1) % n;
                return Some(id);
            }
        }
        None
    }

    /// Assign as many queued tasks as possible at `now`. Returns the
    /// assignments and, when work is blocked only on readiness, the earliest
    /// time worth retrying.
    pub fn dispatch(&mut self, now: SimTime) -> (Vec<Assignment>, Option<SimTime>) {
        let mut out = Vec::new();
        let mut wake = None;
        match self.policy {
            Scheduler::Fifo => {
                while let Some(front) = self.queue.front().copied() {
                    if front.ready_at > now {
                        wake = Some(front.ready_at);
                        break;
                    }
                    let Some(u) = self.lowest_free() else { break };
                    self.queue.pop_front();
                    out.push(self.start(front, u, now));
                }
            }
            Scheduler::Rr => {
                let mut rotations = 0;
                while !self.queue.is_empty() && self.busy.iter().any(|b| !b) {
                    let front = self.queue.pop_front().expect("nonempty");
                    if front.ready_at > now {
                        wake = Some(wake.map_or(front.ready_at, |w: SimTime| w.min(front.ready_at)));
                        self.queue.push_back(front);
                        rotations += 1;
                        if rotations >= self.queue.len() {
                            break;
                        }
                        continue;
                    }
                    rotations = 0;
                    let u = self.next_free_rr().expect("a free µthread exists");
                    out.push(self.start(front, u, now));
                }
                if rotations == 0 {
                    wake = None;
                }
            }
        }
        (out, wake)
    }

    fn start(&mut self, t: QueuedTask, uthread: usize, now: SimTime) -> Assignment {
        self.busy[uthread] = true;
        Assignment {
            kernel: t.kernel,
            task: t.task,
            uthread,
            start: now,
            end: now + self.overhead + t.compute,
        }
    }
}

/// A slot-aligned piece of a kernel's result space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Chunk {
    pub kernel: u32,
    pub index: u64,
    pub offset: u64,
    pub len: u64,
    /// Final record of the kernel's stream.
    pub last: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecutorError {
    #[error("kernel {kernel}: result offset {offset} produced twice")]
    DuplicateOffset { kernel: u32, offset: u64 },
    #[error("kernel {kernel}: result {offset}+{bytes} outside {total}-byte result space")]
    OutOfRange {
        kernel: u32,
        offset: u64,
        bytes: u64,
        total: u64,
    },
    #[error("kernel {0} is not registered with the DMA executor")]
    UnknownKernel(u32),
}

#[derive(Debug, Clone)]
struct Stream {
    kernel: u32,
    total: u64,
    filled: Vec<u64>,
    /// Completed chunk indexes in completion order (OoO) awaiting issue.
    ready: VecDeque<u64>,
    /// In-order mode: completed flags and next index to stream.
    done: Vec<bool>,
    next: u64,
    produced: Vec<(u64, u64)>,
    issued: u64,
    complete: bool,
}

impl Stream {
    fn chunks(&self) -> u64 {
        self.filled.len() as u64
    }

    fn pending(&self, ooo: bool) -> u64 {
        if ooo {
            self.ready.len() as u64
        } else {
            let mut i = self.next;
            while i < self.chunks() && self.done[i as usize] {
                i += 1;
            }
            i - self.next
        }
    }
}

/// Collects produced result bytes into slot-sized chunks and decides when a
/// DMA batch is due.
#[derive(Debug, Clone)]
pub struct DmaExecutor {
    slot: u64,
    sf: u64,
    ooo: bool,
    streams: VecDeque<Stream>,
}

impl DmaExecutor {
    pub fn new(slot: u64, sf: u64, ooo: bool) -> Self {
        DmaExecutor {
            slot,
            sf,
            ooo,
            streams: VecDeque::new(),
        }
    }

    pub fn register(&mut self, kernel: u32, total: u64) {
        let n = total.div_ceil(self.slot) as usize;
        self.streams.push_back(Stream {
            kernel,
            total,
            filled: vec![0; n],
            ready: VecDeque::new(),
            done: vec![false; n],
            next: 0,
            produced: Vec::new(),
            issued: 0,
            complete: false,
        });
    }

    fn stream(&mut self, kernel: u32) -> Result<&mut Stream, ExecutorError> {
        self.streams
            .iter_mut()
            .find(|s| s.kernel == kernel)
            .ok_or(ExecutorError::UnknownKernel(kernel))
    }

    pub fn on_result(&mut self, kernel: u32, offset: u64, bytes: u64) -> Result<(), ExecutorError> {
        if bytes == 0 {
            return Ok(());
        }
        let slot = self.slot;
        let s = self.stream(kernel)?;
        if offset + bytes > s.total {
            return Err(ExecutorError::OutOfRange {
                kernel,
                offset,
                bytes,
                total: s.total,
            });
        }
        // Byte ranges are disjoint per task; an overlap means double output.
        let pos = s.produced.partition_point(|&(o, _)| o < offset);
        let clash_prev = pos > 0 && s.produced[pos - 1].0 + s.produced[pos - 1].1 > offset;
        let clash_next = pos < s.produced.len() && s.produced[pos].0 < offset + bytes;
        if clash_prev || clash_next {
            return Err(ExecutorError::DuplicateOffset { kernel, offset });
        }
        s.produced.insert(pos, (offset, bytes));
        let mut at = offset;
        let end = offset + bytes;
        while at < end {
            let idx = at / slot;
            let chunk_end = ((idx + 1) * slot).min(s.total);
            let take = chunk_end.min(end) - at;
            s.filled[idx as usize] += take;
            if s.filled[idx as usize] == chunk_end - idx * slot {
                s.ready.push_back(idx);
                s.done[idx as usize] = true;
            }
            at += take;
        }
        Ok(())
    }

    /// The kernel's last task finished; its remainder may now be flushed.
    /// A stream already drained (trailing zero-byte tasks) is left alone.
    pub fn on_kernel_complete(&mut self, kernel: u32) {
        if let Ok(s) = self.stream(kernel) {
            s.complete = true;
        }
    }

    /// Size of the next batch, without taking it. A batch is due when SF
    /// chunks are pending, or when a completed kernel has any left.
    pub fn due(&self) -> Option<u64> {
        let s = self.streams.front()?;
        let p = s.pending(self.ooo);
        if p >= self.sf {
            Some(self.sf)
        } else if s.complete && p > 0 {
            Some(p)
        } else {
            None
        }
    }

    /// Remove and return the due batch.
    pub fn take(&mut self) -> Option<Vec<Chunk>> {
        let n = self.due()?;
        let slot = self.slot;
        let ooo = self.ooo;
        let s = self.streams.front_mut().expect("due implies a stream");
        let mut out = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let idx = if ooo {
                s.ready.pop_front().expect("pending")
            } else {
                let i = s.next;
                s.next += 1;
                i
            };
            let offset = idx * slot;
            out.push(Chunk {
                kernel: s.kernel,
                index: idx,
                offset,
                len: (offset + slot).min(s.total) - offset,
                last: false,
            });
        }
        s.issued += n;
        if s.issued == s.chunks() {
            out.last_mut().expect("n >= 1").last = true;
            self.streams.pop_front();
        }
        Some(out)
    }

    pub fn is_drained(&self) -> bool {
        self.streams.is_empty()
    }
}
