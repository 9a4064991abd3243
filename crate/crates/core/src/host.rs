//! Host side: configuration, offload mechanisms, and the KAI ready pool.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ccm::Scheduler;
use crate::ring::MetadataRecord;
use crate::sim::SimTime;
use crate::workloads::HostTask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mechanism {
    /// Remote polling of a device mailbox over CXL.io.
    #[serde(rename = "rp")]
    Rp,
    /// Barriered CXL.mem store whose reply is held until the kernel ends.
    #[serde(rename = "bs")]
    Bs,
    /// Asynchronous back-streaming with local polling.
    #[serde(rename = "kai")]
    Kai,
    /// Back-streaming with one interrupt per DMA request.
    #[serde(rename = "kai-int")]
    KaiInterrupt,
}

impl Mechanism {
    pub const ALL: [Mechanism; 4] = [Mechanism::Rp, Mechanism::Bs, Mechanism::Kai, Mechanism::KaiInterrupt];

    pub fn as_str(self) -> &'static str {
        match self {
            Mechanism::Rp => "rp",
            Mechanism::Bs => "bs",
            Mechanism::Kai => "kai",
            Mechanism::KaiInterrupt => "kai-int",
        }
    }

    pub fn streams(self) -> bool {
        matches!(self, Mechanism::Kai | Mechanism::KaiInterrupt)
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mechanism {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "rp" => Ok(Mechanism::Rp),
            "bs" => Ok(Mechanism::Bs),
            "kai" => Ok(Mechanism::Kai),
            "kai-int" | "kai_interrupt" => Ok(Mechanism::KaiInterrupt),
            other => Err(format!("unknown mechanism `{other}` (expected rp, bs, kai or kai-int)")),
        }
    }
}

/// Local polling interval. `pN` labels are N x 50 ns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Polling(pub SimTime);

pub const POLL_BASE: SimTime = SimTime::ns(50);

impl Polling {
    pub fn label(n: u64) -> Polling {
        Polling(SimTime(POLL_BASE.as_ps() * n))
    }
}

impl FromStr for Polling {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let bad = || format!("bad polling interval `{s}` (expected pN, or a number with ps/ns/us)");
        if let Some(n) = s.strip_prefix('p') {
            let n: u64 = n.parse().map_err(|_| bad())?;
            if n == 0 {
                return Err(bad());
            }
            return Ok(Polling::label(n));
        }
        let (num, scale) = if let Some(v) = s.strip_suffix("ps") {
            (v, 1)
        } else if let Some(v) = s.strip_suffix("ns") {
            (v, 1_000)
        } else if let Some(v) = s.strip_suffix("us") {
            (v, 1_000_000)
        } else {
            (s, 1_000)
        };
        let v: u64 = num.trim().parse().map_err(|_| bad())?;
        if v == 0 {
            return Err(bad());
        }
        Ok(Polling(SimTime(v * scale)))
    }
}

impl TryFrom<String> for Polling {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<Polling> for String {
    fn from(p: Polling) -> String {
        p.to_string()
    }
}

impl fmt::Display for Polling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ps = self.0.as_ps();
        if ps.is_multiple_of(POLL_BASE.as_ps()) {
            write!(f, "p{}", ps / POLL_BASE.as_ps())
        } else {
            write!(f, "{ps}ps")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HostConfig {
    pub n_units: u32,
    pub threads_per_unit: u32,
    pub freq_hz: u64,
    pub polling_interval: Polling,
    pub rp_interval_ps: u64,
    pub scheduler: Scheduler,
    pub mechanism: Option<Mechanism>,
    /// Host cycles charged per local poll tick.
    pub poll_cost_cycles: u64,
    /// RP spins on one dedicated host µthread instead of releasing it
    /// between mailbox polls.
    pub rp_pin_uthread: bool,
}

impl Default for HostConfig {
    fn default() -> Self {
        HostConfig {
            n_units: 32,
            threads_per_unit: 2,
            freq_hz: 3_000_000_000,
            polling_interval: Polling::label(1),
            rp_interval_ps: 1_000_000,
            scheduler: Scheduler::Fifo,
            mechanism: None,
            poll_cost_cycles: 10,
            rp_pin_uthread: false,
        }
    }
}

impl HostConfig {
    pub fn rp_interval(&self) -> SimTime {
        SimTime(self.rp_interval_ps)
    }

    pub fn poll_cost(&self) -> SimTime {
        SimTime(SimTime::cycle_of(self.freq_hz).as_ps() * self.poll_cost_cycles)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.n_units == 0 {
            return Err("host.n_units: must be >= 1".into());
        }
        if self.threads_per_unit == 0 {
            return Err("host.threads_per_unit: must be >= 1".into());
        }
        if self.freq_hz == 0 {
            return Err("host.freq_hz: must be > 0".into());
        }
        if self.rp_interval_ps == 0 {
            return Err("host.rp_interval_ps: must be > 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct KernelDeps {
    /// Host tasks reading each chunk.
    readers: Vec<Vec<usize>>,
    /// Reader tasks of each chunk that have not started yet.
    refs: Vec<u32>,
    records: Vec<Option<MetadataRecord>>,
    pooled: Vec<bool>,
    /// Chunks each task still waits for.
    missing: Vec<u32>,
    /// Waiting on a predecessor task.
    blocked: Vec<bool>,
    successors: Vec<Vec<usize>>,
    released: Vec<bool>,
    last_seen: bool,
}

/// Host-side readiness bookkeeping: which result chunks have arrived and
/// which host tasks they unlock.
#[derive(Debug, Clone)]
pub struct ReadyPool {
    slot: u64,
    kernels: BTreeMap<u32, KernelDeps>,
}

impl ReadyPool {
    pub fn new(slot: u64) -> Self {
        ReadyPool {
            slot,
            kernels: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, kernel: u32, total_bytes: u64, tasks: &[HostTask]) {
        let n_chunks = total_bytes.div_ceil(self.slot) as usize;
        let mut readers = vec![Vec::new(); n_chunks];
        let mut missing = vec![0u32; tasks.len()];
        let mut successors = vec![Vec::new(); tasks.len()];
        let mut blocked = vec![false; tasks.len()];
        for t in tasks {
            let first = t.depends_on.start / self.slot;
            let last = (t.depends_on.end - 1) / self.slot;
            for c in first..=last {
                readers[c as usize].push(t.id);
            }
            missing[t.id] = (last - first + 1) as u32;
            if let Some(p) = t.after {
                successors[p].push(t.id);
                blocked[t.id] = true;
            }
        }
        let refs = readers.iter().map(|r| r.len() as u32).collect();
        self.kernels.insert(
            kernel,
            KernelDeps {
                readers,
                refs,
                records: vec![None; n_chunks],
                pooled: vec![false; n_chunks],
                missing,
                blocked,
                successors,
                released: vec![false; tasks.len()],
                last_seen: false,
            },
        );
    }

    fn deps(&mut self, kernel: u32) -> &mut KernelDeps {
        self.kernels
            .get_mut(&kernel)
            .expect("kernel registered with ready pool")
    }

    fn runnable(k: &mut KernelDeps, t: usize, out: &mut Vec<usize>) {
        if k.missing[t] == 0 && !k.blocked[t] && !k.released[t] {
            k.released[t] = true;
            out.push(t);
        }
    }

    /// Place one fetched metadata record in the pool. Returns newly runnable
    /// tasks (ascending id) and whether the payload slot has no readers and
    /// can be released immediately.
    pub fn pool(&mut self, rec: MetadataRecord) -> (Vec<usize>, bool) {
        let slot = self.slot;
        let k = self.deps(rec.kernel_id);
        let c = (rec.result_offset / slot) as usize;
        debug_assert!(!k.pooled[c], "chunk pooled twice");
        k.pooled[c] = true;
        k.records[c] = Some(rec);
        k.last_seen |= rec.last;
        let mut out = Vec::new();
        for i in 0..k.readers[c].len() {
            let t = k.readers[c][i];
            k.missing[t] -= 1;
            Self::runnable(k, t, &mut out);
        }
        out.sort_unstable();
        (out, k.refs[c] == 0)
    }

    /// All result bytes of `kernel` arrived at once (RP and BS).
    pub fn pool_all(&mut self, kernel: u32) -> Vec<usize> {
        let k = self.deps(kernel);
        k.pooled.iter_mut().for_each(|p| *p = true);
        k.missing.iter_mut().for_each(|m| *m = 0);
        k.last_seen = true;
        let mut out = Vec::new();
        for t in 0..k.missing.len() {
            Self::runnable(k, t, &mut out);
        }
        out
    }

    /// A task starts: returns the records whose payload slots it was the last
    /// reader of.
    pub fn on_start(&mut self, kernel: u32, reads: &std::ops::Range<u64>) -> Vec<MetadataRecord> {
        let slot = self.slot;
        let k = self.deps(kernel);
        let mut out = Vec::new();
        for c in (reads.start / slot)..=((reads.end - 1) / slot) {
            let c = c as usize;
            k.refs[c] -= 1;
            if k.refs[c] == 0 {
                if let Some(r) = k.records[c] {
                    out.push(r);
                }
            }
        }
        out
    }

    pub fn on_finish(&mut self, kernel: u32, task: usize) -> Vec<usize> {
        let k = self.deps(kernel);
        let mut out = Vec::new();
        for i in 0..k.successors[task].len() {
            let s = k.successors[task][i];
            k.blocked[s] = false;
            Self::runnable(k, s, &mut out);
        }
        out
    }

    /// Whether the final record of `kernel` has been pooled.
    pub fn streamed(&self, kernel: u32) -> bool {
        self.kernels.get(&kernel).is_some_and(|k| k.last_seen)
    }

    pub fn forget(&mut self, kernel: u32) {
        self.kernels.remove(&kernel);
    }
}
