//! Shared helpers for the integration targets, including a closed-form
//! model of the serialized (BS) pipeline that does not use the simulator.
#![allow(dead_code)]

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use ccmsim::host::{Mechanism, Polling};
use ccmsim::simulation::{simulate, RunOutput, SimConfig};
use ccmsim::workloads::{preset, TaskGraph};

pub fn graph(name: &str) -> TaskGraph {
    preset(name).unwrap().generate().unwrap()
}

pub fn run_cfg(g: &TaskGraph, cfg: &SimConfig) -> RunOutput {
    simulate(g, cfg, None).unwrap_or_else(|e| panic!("{} under {}: {e}", g.name, cfg.mechanism))
}

pub fn run(g: &TaskGraph, m: Mechanism) -> RunOutput {
    run_cfg(g, &SimConfig::new(m))
}

pub fn run_polling(g: &TaskGraph, m: Mechanism, p: u64) -> RunOutput {
    let mut cfg = SimConfig::new(m);
    cfg.host.polling_interval = Polling::label(p);
    run_cfg(g, &cfg)
}

pub fn e2e(out: &RunOutput) -> f64 {
    out.report.e2e_ps as f64
}

pub fn geomean(xs: &[f64]) -> f64 {
    (xs.iter().map(|x| x.ln()).sum::<f64>() / xs.len() as f64).exp()
}

/// ceil(bytes / bandwidth) in picoseconds.
pub fn wire_ps(bytes: u64, bytes_per_sec: u64) -> u64 {
    let num = bytes as u128 * 1_000_000_000_000;
    num.div_ceil(bytes_per_sec as u128) as u64
}

/// Makespan of `durations` run strictly in queue order on `threads` identical
/// workers; item i may not start before `ready[i]` nor before item i-1 starts.
pub fn fifo_makespan(threads: usize, durations: &[u64], ready: &[u64]) -> u64 {
    let mut free: BinaryHeap<Reverse<u64>> = (0..threads).map(|_| Reverse(0)).collect();
    let mut last_start = 0;
    let mut end = 0;
    for (d, r) in durations.iter().zip(ready) {
        let Reverse(f) = free.pop().unwrap();
        let s = f.max(*r).max(last_start);
        last_start = s;
        free.push(Reverse(s + d));
        end = end.max(s + d);
    }
    end
}

/// Makespan of host tasks where a task with a predecessor becomes runnable
/// when that predecessor ends. Runnable tasks are served by (ready, id).
pub fn chained_makespan(threads: usize, durations: &[u64], after: &[Option<usize>]) -> u64 {
    let mut free: BinaryHeap<Reverse<u64>> = (0..threads).map(|_| Reverse(0)).collect();
    let mut runnable: BinaryHeap<Reverse<(u64, usize)>> = (0..durations.len())
        .filter(|&i| after[i].is_none())
        .map(|i| Reverse((0, i)))
        .collect();
    let mut last_start = 0;
    let mut end = 0;
    while let Some(Reverse((r, i))) = runnable.pop() {
        let Reverse(f) = free.pop().unwrap();
        let s = f.max(r).max(last_start);
        last_start = s;
        let e = s + durations[i];
        free.push(Reverse(e));
        end = end.max(e);
        for (j, a) in after.iter().enumerate() {
            if *a == Some(i) {
                runnable.push(Reverse((e, j)));
            }
        }
    }
    end
}

/// Per-phase durations of one serialized iteration.
#[derive(Debug, Clone, Copy, Default)]
pub struct Phases {
    pub launch: u64,
    pub compute: u64,
    pub data: u64,
    pub host: u64,
}

impl Phases {
    pub fn total(&self) -> u64 {
        self.launch + self.compute + self.data + self.host
    }
}

/// Closed-form BS pipeline: a one-way descriptor store, the CCM makespan,
/// the withheld reply's return half, a blocking result load, then host work.
pub fn bs_oracle(g: &TaskGraph, cfg: &SimConfig) -> Vec<Phases> {
    let bw = cfg.fabric.link_bandwidth;
    let rtt = cfg.fabric.mem_rtt_ps;
    let one_way = rtt / 2;
    let cycle = 1_000_000_000_000 / cfg.ccm.freq_hz;
    let assign = cycle * cfg.ccm.assign_cycles;
    let ccm_threads = (cfg.ccm.n_units * cfg.ccm.threads_per_unit) as usize;
    let host_threads = (g.host_units_override.unwrap_or(cfg.host.n_units) * cfg.host.threads_per_unit) as usize;
    g.iterations
        .iter()
        .map(|it| {
            let durations: Vec<u64> = it.kernel.tasks.iter().map(|t| t.compute_ps + assign).collect();
            let ready: Vec<u64> = it.kernel.tasks.iter().map(|t| t.ready_ps).collect();
            let hd: Vec<u64> = it.host_tasks.iter().map(|h| h.compute_ps).collect();
            let after: Vec<Option<usize>> = it.host_tasks.iter().map(|h| h.after).collect();
            Phases {
                launch: wire_ps(64, bw) + one_way,
                compute: fifo_makespan(ccm_threads, &durations, &ready),
                data: (rtt - one_way) + rtt + wire_ps(it.kernel.result_bytes_total, bw),
                host: chained_makespan(host_threads, &hd, &after),
            }
        })
        .collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}
