//! One full run: workload, device, host and link driven by the engine, with
//! every observable interval written to the trace.

use std::collections::BTreeSet;
use std::io::Write;

use thiserror::Error;

use crate::ccm::{CcmConfig, DmaExecutor, ExecutorError, QueuedTask, TaskPool};
use crate::fabric::{Endpoint, Fabric, FabricConfig, FabricError, FabricMessage, FabricRecord, MessageKind, Traffic};
use crate::host::{HostConfig, Mechanism, ReadyPool};
use crate::metrics::{self, IdleBasis, MetricsError, MetricsReport, TraceRecord, TransferKind, UnitCounts};
use crate::ring::{DeviceRingView, HostRings, MetadataRecord, Reservation, ReserveError, RingConfig, RingViolation};
use crate::sim::{Actor, ActorId, Engine, Event, PayloadKind, SimError, SimTime};
use crate::workloads::TaskGraph;

/// Bytes of a kernel descriptor / launch packet.
pub const DESCRIPTOR_BYTES: u64 = 64;
/// RP enqueue/dequeue doorbell writes and flow-control stores.
pub const DOORBELL_BYTES: u64 = 16;
/// RP mailbox status read.
pub const MAILBOX_BYTES: u64 = 8;
const DMA_REGION: u32 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub host: HostConfig,
    pub ccm: CcmConfig,
    pub fabric: FabricConfig,
    pub ring: RingConfig,
    pub mechanism: Mechanism,
    pub idle_basis: IdleBasis,
}

impl SimConfig {
    pub fn new(mechanism: Mechanism) -> Self {
        SimConfig {
            host: HostConfig::default(),
            ccm: CcmConfig::default(),
            fabric: FabricConfig::default(),
            ring: RingConfig::default(),
            mechanism,
            idle_basis: IdleBasis::Engaged,
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Engine(#[from] SimError),
    #[error("fabric: {0}")]
    Fabric(#[from] FabricError),
    #[error("ring invariant violated ({family}): {0}", family = .0.family())]
    Ring(#[from] RingViolation),
    #[error("DMA executor: {0}")]
    Executor(#[from] ExecutorError),
    #[error("ring reservation: {0}")]
    Reserve(ReserveError),
    #[error("simulation stalled at {at}: iteration {iteration} never completed")]
    Stalled { iteration: u32, at: SimTime },
    #[error("ring trace check failed: {0}")]
    RingTrace(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl RunError {
    /// Short name of the violated invariant, for diagnostics.
    pub fn invariant(&self) -> &'static str {
        match self {
            RunError::Engine(SimError::Livelock { .. }) => "termination",
            RunError::Engine(_) => "engine",
            RunError::Fabric(_) => "fabric",
            RunError::Ring(v) => v.family(),
            RunError::Executor(_) => "byte-conservation",
            RunError::Reserve(_) => "reservation",
            RunError::Stalled { .. } => "progress",
            RunError::RingTrace(_) => "ring-trace",
            RunError::Metrics(_) => "trace-completeness",
        }
    }
}

#[derive(Debug)]
pub struct RunOutput {
    pub trace: Vec<TraceRecord>,
    pub report: MetricsReport,
    pub fabric_log: Vec<FabricRecord>,
    pub ring_snapshots: u64,
    pub events: u64,
}

#[derive(Debug, Clone, Copy)]
enum Ev {
    StartIteration(u32),
    LaunchArrive(u32),
    CcmDispatch,
    CcmTaskDone { kernel: u32, task: u32, uthread: u32 },
    RpEnqueue(u32),
    RpPoll(u32),
    RpPollArrive { kernel: u32, reply_at: SimTime },
    RpPollReply { kernel: u32, done: bool },
    RpDequeued(u32),
    BsReply(u32),
    ResultsLoaded(u32),
    DmaVisible(u32),
    FcArrive { payload_head: u64, meta_head: u64 },
    PollTick,
    InterruptArrive,
    InterruptDone,
    HostDispatch,
    HostTaskDone { kernel: u32, task: u32, uthread: u32 },
}

impl PayloadKind for Ev {
    fn kind(&self) -> &'static str {
        match self {
            Ev::StartIteration(_) => "start_iteration",
            Ev::LaunchArrive(_) => "launch_arrive",
            Ev::CcmDispatch => "ccm_dispatch",
            Ev::CcmTaskDone { .. } => "ccm_task_done",
            Ev::RpEnqueue(_) => "rp_enqueue",
            Ev::RpPoll(_) => "rp_poll",
            Ev::RpPollArrive { .. } => "rp_poll_arrive",
            Ev::RpPollReply { .. } => "rp_poll_reply",
            Ev::RpDequeued(_) => "rp_dequeued",
            Ev::BsReply(_) => "bs_reply",
            Ev::ResultsLoaded(_) => "results_loaded",
            Ev::DmaVisible(_) => "dma_visible",
            Ev::FcArrive { .. } => "fc_arrive",
            Ev::PollTick => "poll_tick",
            Ev::InterruptArrive => "interrupt_arrive",
            Ev::InterruptDone => "interrupt_done",
            Ev::HostDispatch => "host_dispatch",
            Ev::HostTaskDone { .. } => "host_task_done",
        }
    }
}

#[derive(Debug, Default, Clone)]
struct IterState {
    started: bool,
    ended: bool,
    ccm_left: usize,
    ccm_unassigned: usize,
    ccm_last_end: SimTime,
    ccm_end: Option<SimTime>,
    host_left: usize,
    results_in: bool,
    rp_arm: SimTime,
}

struct DmaBatch {
    reservation: Reservation,
    records: Vec<MetadataRecord>,
}

struct Sim<'a> {
    graph: &'a TaskGraph,
    cfg: &'a SimConfig,
    mech: Mechanism,
    fabric: Fabric,
    ccm_pool: TaskPool,
    host_pool: TaskPool,
    executor: DmaExecutor,
    rings: HostRings,
    view: DeviceRingView,
    ready: ReadyPool,
    iters: Vec<IterState>,
    trace: Vec<TraceRecord>,
    batches: Vec<Option<DmaBatch>>,
    ccm_wake: Option<SimTime>,
    host_wake: Option<SimTime>,
    dma_blocked: bool,
    fc_sent: (u64, u64),
    kai_in_flight: u32,
    poll_armed: bool,
    handler_free: SimTime,
    dma_in_flight: u32,
    fc_in_flight: u32,
}

fn msg(kind: MessageKind, src: Endpoint, bytes: u64, traffic: Traffic) -> FabricMessage {
    let dst = match src {
        Endpoint::Host => Endpoint::Ccm,
        Endpoint::Ccm => Endpoint::Host,
    };
    FabricMessage {
        kind,
        src,
        dst,
        bytes,
        traffic,
    }
}

const CCM: ActorId = ActorId::Ccm;
const HOST: ActorId = ActorId::Host;

impl<'a> Sim<'a> {
    fn new(graph: &'a TaskGraph, cfg: &'a SimConfig) -> Self {
        let mech = cfg.mechanism;
        let host_units = graph.host_units_override.unwrap_or(cfg.host.n_units);
        let mut host_pool = TaskPool::new(cfg.host.scheduler, host_units, cfg.host.threads_per_unit, SimTime::ZERO);
        // The interrupt handler, or a pinned RP poller, owns µthread 0.
        if mech == Mechanism::KaiInterrupt || (mech == Mechanism::Rp && cfg.host.rp_pin_uthread) {
            host_pool.reserve_uthread(0);
        }
        let mut fabric = Fabric::new(cfg.fabric.clone());
        fabric.register_host_region(DMA_REGION);
        Sim {
            graph,
            cfg,
            mech,
            fabric,
            ccm_pool: TaskPool::new(
                cfg.ccm.scheduler,
                cfg.ccm.n_units,
                cfg.ccm.threads_per_unit,
                cfg.ccm.assign_overhead(),
            ),
            host_pool,
            executor: DmaExecutor::new(cfg.ring.slot_size, cfg.ccm.streaming_factor, cfg.ccm.ooo_streaming),
            rings: HostRings::new(&cfg.ring),
            view: DeviceRingView::new(cfg.ring.capacity),
            ready: ReadyPool::new(cfg.ring.slot_size),
            iters: vec![IterState::default(); graph.iterations.len()],
            trace: Vec::new(),
            batches: Vec::new(),
            ccm_wake: None,
            host_wake: None,
            dma_blocked: false,
            fc_sent: (0, 0),
            kai_in_flight: 0,
            poll_armed: false,
            handler_free: SimTime::ZERO,
            dma_in_flight: 0,
            fc_in_flight: 0,
        }
    }

    fn snapshot(&mut self, at: SimTime) {
        let (hp, hm) = self.rings.heads();
        self.trace.push(TraceRecord::RingState {
            at,
            capacity: self.cfg.ring.capacity,
            host_payload_head: hp,
            host_meta_head: hm,
            device_payload_head: self.view.local_payload_head,
            device_meta_head: self.view.local_meta_head,
            payload_tail: self.rings.payload().tail(),
            meta_tail: self.rings.meta().tail(),
        });
    }

    fn start_iteration(&mut self, eng: &mut Engine<Ev>, k: u32) -> Result<(), RunError> {
        let now = eng.now();
        let it = &self.graph.iterations[k as usize];
        let st = &mut self.iters[k as usize];
        if st.started {
            return Ok(());
        }
        st.started = true;
        st.host_left = it.host_tasks.len();
        self.trace.push(TraceRecord::IterationStart { iteration: k, at: now });
        self.ready.register(k, it.kernel.result_bytes_total, &it.host_tasks);
        let launch = msg(
            MessageKind::MemStore,
            Endpoint::Host,
            DESCRIPTOR_BYTES,
            Traffic::Control,
        );
        let d = self.fabric.send_mem(now, launch)?;
        let acked = d.completion.expect("stores are acknowledged");
        match self.mech {
            Mechanism::Rp => {
                self.trace.push(TraceRecord::Launch {
                    kernel: k,
                    start: now,
                    end: acked,
                });
                eng.schedule_at(HOST, acked, Ev::RpEnqueue(k))?;
            }
            Mechanism::Bs => {
                // The reply is withheld; launch ends when the barrier arms.
                self.trace.push(TraceRecord::Launch {
                    kernel: k,
                    start: now,
                    end: d.at_receiver,
                });
                eng.schedule_at(CCM, d.at_receiver, Ev::LaunchArrive(k))?;
            }
            Mechanism::Kai | Mechanism::KaiInterrupt => {
                self.trace.push(TraceRecord::Launch {
                    kernel: k,
                    start: now,
                    end: acked,
                });
                eng.schedule_at(CCM, d.at_receiver, Ev::LaunchArrive(k))?;
                self.kai_in_flight += 1;
                if self.mech == Mechanism::Kai && !self.poll_armed {
                    self.poll_armed = true;
                    eng.schedule(HOST, self.cfg.host.polling_interval.0, Ev::PollTick)?;
                }
            }
        }
        Ok(())
    }

    fn launch_arrive(&mut self, eng: &mut Engine<Ev>, k: u32) -> Result<(), RunError> {
        let now = eng.now();
        let kernel = &self.graph.iterations[k as usize].kernel;
        if self.mech.streams() {
            self.executor.register(k, kernel.result_bytes_total);
        }
        for (i, t) in kernel.tasks.iter().enumerate() {
            self.ccm_pool.push(QueuedTask {
                kernel: k,
                task: i,
                ready_at: now + SimTime(t.ready_ps),
                compute: SimTime(t.compute_ps),
            });
        }
        let st = &mut self.iters[k as usize];
        st.ccm_left = kernel.tasks.len();
        st.ccm_unassigned = kernel.tasks.len();
        self.ccm_dispatch(eng)
    }

    fn ccm_dispatch(&mut self, eng: &mut Engine<Ev>) -> Result<(), RunError> {
        let now = eng.now();
        let (assigned, wake) = self.ccm_pool.dispatch(now);
        for a in assigned {
            let unit = self.ccm_pool.unit_of(a.uthread) as u32;
            self.trace.push(TraceRecord::CcmTask {
                kernel: a.kernel,
                task: a.task as u32,
                unit,
                uthread: a.uthread as u32,
                start: a.start,
                end: a.end,
            });
            let st = &mut self.iters[a.kernel as usize];
            st.ccm_unassigned -= 1;
            st.ccm_last_end = st.ccm_last_end.max(a.end);
            eng.schedule_at(
                CCM,
                a.end,
                Ev::CcmTaskDone {
                    kernel: a.kernel,
                    task: a.task as u32,
                    uthread: a.uthread as u32,
                },
            )?;
        }
        if let Some(w) = wake {
            if self.ccm_wake != Some(w) {
                self.ccm_wake = Some(w);
                eng.schedule_at(CCM, w, Ev::CcmDispatch)?;
            }
        }
        Ok(())
    }

    fn ccm_task_done(&mut self, eng: &mut Engine<Ev>, k: u32, task: u32, uthread: u32) -> Result<(), RunError> {
        let now = eng.now();
        self.ccm_pool.release(uthread as usize);
        let t = &self.graph.iterations[k as usize].kernel.tasks[task as usize];
        let (offset, bytes) = (t.offset, t.result_bytes);
        let st = &mut self.iters[k as usize];
        st.ccm_left -= 1;
        let kernel_done = st.ccm_left == 0;
        if kernel_done {
            st.ccm_end = Some(now);
        }
        if self.mech.streams() {
            self.executor.on_result(k, offset, bytes)?;
            if kernel_done {
                self.executor.on_kernel_complete(k);
            }
            self.pump_dma(eng)?;
        } else if kernel_done && self.mech == Mechanism::Bs {
            eng.schedule_at(HOST, self.fabric.release_reply(now), Ev::BsReply(k))?;
        }
        self.ccm_dispatch(eng)
    }

    /// Issue every due DMA batch the rings have room for.
    fn pump_dma(&mut self, eng: &mut Engine<Ev>) -> Result<(), RunError> {
        let now = eng.now();
        while let Some(n) = self.executor.due() {
            let reservation = match self.view.device_reserve(n, n) {
                Ok(r) => r,
                Err(ReserveError::WouldBlock) => {
                    self.dma_blocked = true;
                    return Ok(());
                }
                Err(e) => return Err(RunError::Reserve(e)),
            };
            self.dma_blocked = false;
            let chunks = self.executor.take().expect("due batch");
            debug_assert_eq!(chunks.len() as u64, n);
            let cap = self.cfg.ring.capacity;
            let records: Vec<MetadataRecord> = chunks
                .iter()
                .zip(reservation.payload.iter().zip(&reservation.meta))
                .map(|(c, (&p, &m))| MetadataRecord {
                    seq: m,
                    payload_slot: p % cap,
                    payload_index: p,
                    result_offset: c.offset,
                    length: c.len,
                    kernel_id: c.kernel,
                    last: c.last,
                })
                .collect();
            let bytes: u64 = chunks.iter().map(|c| c.len).sum::<u64>() + n * self.cfg.ring.meta_record_bytes;
            let d = self.fabric.dma_write(now, DMA_REGION, bytes)?;
            self.trace.push(TraceRecord::Transfer {
                kernel: chunks[0].kernel,
                kind: TransferKind::Dma,
                bytes,
                start: now,
                end: d.at_receiver,
            });
            let id = self.batches.len() as u32;
            self.batches.push(Some(DmaBatch { reservation, records }));
            self.dma_in_flight += 1;
            eng.schedule_at(HOST, d.at_receiver, Ev::DmaVisible(id))?;
            if self.mech == Mechanism::KaiInterrupt {
                let at = self.fabric.raise_interrupt(d.wire_end);
                eng.schedule_at(HOST, at, Ev::InterruptArrive)?;
            }
        }
        Ok(())
    }

    fn dma_visible(&mut self, eng: &mut Engine<Ev>, id: u32) -> Result<(), RunError> {
        let b = self.batches[id as usize].take().expect("batch lands once");
        self.dma_in_flight -= 1;
        self.rings
            .device_commit(&b.reservation.payload, &b.reservation.meta, &b.records)?;
        self.view.check_against(&self.rings)?;
        self.snapshot(eng.now());
        Ok(())
    }

    fn send_flow_control(&mut self, eng: &mut Engine<Ev>) -> Result<(), RunError> {
        let heads = self.rings.heads();
        if heads == self.fc_sent {
            return Ok(());
        }
        self.fc_sent = heads;
        let m = msg(
            MessageKind::FlowControlStore,
            Endpoint::Host,
            DOORBELL_BYTES,
            Traffic::FlowControl,
        );
        let d = self.fabric.send_mem(eng.now(), m)?;
        self.fc_in_flight += 1;
        eng.schedule_at(
            CCM,
            d.at_receiver,
            Ev::FcArrive {
                payload_head: heads.0,
                meta_head: heads.1,
            },
        )?;
        Ok(())
    }

    fn fc_arrive(&mut self, eng: &mut Engine<Ev>, ph: u64, mh: u64) -> Result<(), RunError> {
        self.fc_in_flight -= 1;
        self.view.apply_flow_control(ph, mh);
        self.view.check_against(&self.rings)?;
        self.snapshot(eng.now());
        if self.dma_blocked {
            self.pump_dma(eng)?;
        }
        Ok(())
    }

    /// Move all published metadata into the ready pool. Tasks unlocked here
    /// become runnable at `ready_at`.
    fn drain(&mut self, eng: &mut Engine<Ev>, ready_at: SimTime) -> Result<u32, RunError> {
        let records = self.rings.fetch_all()?;
        let n = records.len() as u32;
        let mut finished = BTreeSet::new();
        for rec in records {
            let (runnable, release) = self.ready.pool(rec);
            for t in runnable {
                self.push_host(rec.kernel_id, t, ready_at);
            }
            if release {
                self.rings.host_consume_payload(&rec)?;
            }
            if rec.last {
                finished.insert(rec.kernel_id);
            }
        }
        let before = self.rings.heads();
        self.rings.advance_heads();
        if n > 0 || self.rings.heads() != before {
            self.snapshot(eng.now());
        }
        self.send_flow_control(eng)?;
        for k in finished {
            self.kai_in_flight -= 1;
            self.results_complete(eng, k)?;
        }
        self.host_dispatch(eng)?;
        Ok(n)
    }

    fn poll_tick(&mut self, eng: &mut Engine<Ev>) -> Result<(), RunError> {
        let now = eng.now();
        let cost = self.cfg.host.poll_cost();
        let pooled = self.drain(eng, now + cost)?;
        self.trace.push(TraceRecord::Poll { at: now, pooled, cost });
        if self.kai_in_flight > 0 && self.deadlocked() {
            let iteration = self.iters.iter().position(|s| !s.ended).unwrap_or(0) as u32;
            return Err(RunError::Stalled { iteration, at: now });
        }
        if self.kai_in_flight > 0 {
            eng.schedule(HOST, self.cfg.host.polling_interval.0, Ev::PollTick)?;
        } else {
            self.poll_armed = false;
        }
        Ok(())
    }

    /// The device waits on ring space that no pending host work can free.
    fn deadlocked(&self) -> bool {
        self.dma_blocked
            && self.dma_in_flight == 0
            && self.fc_in_flight == 0
            && self.rings.host_poll_meta_tail().is_empty()
            && self.rings.heads() == self.fc_sent
            && self.host_pool.idle()
            && self.ccm_pool.idle()
    }

    fn interrupt_arrive(&mut self, eng: &mut Engine<Ev>) -> Result<(), RunError> {
        let start = eng.now().max(self.handler_free);
        let end = start + self.cfg.fabric.interrupt_handling();
        self.handler_free = end;
        self.trace.push(TraceRecord::Interrupt { start, end });
        eng.schedule_at(HOST, end, Ev::InterruptDone)?;
        Ok(())
    }

    fn rp_enqueue(&mut self, eng: &mut Engine<Ev>, k: u32) -> Result<(), RunError> {
        let now = eng.now();
        let m = msg(MessageKind::IoWrite, Endpoint::Host, DOORBELL_BYTES, Traffic::Control);
        let d = self.fabric.send_io(now, m)?;
        let done = d.completion.expect("io writes are acknowledged");
        self.trace.push(TraceRecord::Launch {
            kernel: k,
            start: now,
            end: done,
        });
        eng.schedule_at(CCM, d.at_receiver, Ev::LaunchArrive(k))?;
        self.iters[k as usize].rp_arm = done;
        eng.schedule_at(HOST, done + self.cfg.host.rp_interval(), Ev::RpPoll(k))?;
        Ok(())
    }

    fn rp_poll(&mut self, eng: &mut Engine<Ev>, k: u32) -> Result<(), RunError> {
        let m = msg(MessageKind::IoRead, Endpoint::Host, MAILBOX_BYTES, Traffic::MailboxPoll);
        let d = self.fabric.send_io(eng.now(), m)?;
        let reply_at = d.completion.expect("io reads reply");
        eng.schedule_at(CCM, d.at_receiver, Ev::RpPollArrive { kernel: k, reply_at })?;
        Ok(())
    }

    fn rp_poll_arrive(&mut self, eng: &mut Engine<Ev>, k: u32, reply_at: SimTime) -> Result<(), RunError> {
        let st = &self.iters[k as usize];
        // The mailbox reads complete once the last task has ended, including
        // a task ending at this very instant.
        let done = st.ccm_left > 0 && st.ccm_unassigned == 0 && st.ccm_last_end <= eng.now() || st.ccm_end.is_some();
        eng.schedule_at(HOST, reply_at, Ev::RpPollReply { kernel: k, done })?;
        Ok(())
    }

    fn rp_poll_reply(&mut self, eng: &mut Engine<Ev>, k: u32, done: bool) -> Result<(), RunError> {
        let now = eng.now();
        if !done {
            let arm = self.iters[k as usize].rp_arm;
            let i = self.cfg.host.rp_interval().as_ps();
            let next = arm.as_ps() + ((now.as_ps() - arm.as_ps()) / i + 1) * i;
            eng.schedule_at(HOST, SimTime(next), Ev::RpPoll(k))?;
            return Ok(());
        }
        let m = msg(MessageKind::IoWrite, Endpoint::Host, DOORBELL_BYTES, Traffic::Control);
        let d = self.fabric.send_io(now, m)?;
        let end = d.completion.expect("io writes are acknowledged");
        self.trace.push(TraceRecord::Launch {
            kernel: k,
            start: now,
            end,
        });
        eng.schedule_at(HOST, end, Ev::RpDequeued(k))?;
        Ok(())
    }

    /// Bulk load of the whole result; `from` is when data movement began.
    fn load_results(&mut self, eng: &mut Engine<Ev>, k: u32, from: SimTime) -> Result<(), RunError> {
        let bytes = self.graph.iterations[k as usize].kernel.result_bytes_total;
        let m = msg(MessageKind::MemLoad, Endpoint::Host, bytes, Traffic::ResultData);
        let d = self.fabric.send_mem(eng.now(), m)?;
        let end = d.completion.expect("loads reply");
        self.trace.push(TraceRecord::Transfer {
            kernel: k,
            kind: TransferKind::ResultLoad,
            bytes,
            start: from,
            end,
        });
        eng.schedule_at(HOST, end, Ev::ResultsLoaded(k))?;
        Ok(())
    }

    fn results_loaded(&mut self, eng: &mut Engine<Ev>, k: u32) -> Result<(), RunError> {
        let now = eng.now();
        self.iters[k as usize].results_in = true;
        for t in self.ready.pool_all(k) {
            self.push_host(k, t, now);
        }
        self.results_complete(eng, k)?;
        self.host_dispatch(eng)
    }

    /// All of kernel `k`'s results are at the host.
    fn results_complete(&mut self, eng: &mut Engine<Ev>, k: u32) -> Result<(), RunError> {
        self.iters[k as usize].results_in = true;
        if !self.graph.dependent && (k as usize + 1) < self.iters.len() {
            eng.schedule(HOST, SimTime::ZERO, Ev::StartIteration(k + 1))?;
        }
        self.check_iteration_end(eng, k)
    }

    fn check_iteration_end(&mut self, eng: &mut Engine<Ev>, k: u32) -> Result<(), RunError> {
        let st = &mut self.iters[k as usize];
        if st.ended || st.host_left > 0 || !st.results_in {
            return Ok(());
        }
        st.ended = true;
        self.trace.push(TraceRecord::IterationEnd {
            iteration: k,
            at: eng.now(),
        });
        self.ready.forget(k);
        if self.graph.dependent && (k as usize + 1) < self.iters.len() {
            eng.schedule(HOST, SimTime::ZERO, Ev::StartIteration(k + 1))?;
        }
        Ok(())
    }

    fn push_host(&mut self, k: u32, task: usize, ready_at: SimTime) {
        let t = &self.graph.iterations[k as usize].host_tasks[task];
        self.host_pool.push(QueuedTask {
            kernel: k,
            task,
            ready_at,
            compute: SimTime(t.compute_ps),
        });
    }

    fn host_dispatch(&mut self, eng: &mut Engine<Ev>) -> Result<(), RunError> {
        let (assigned, wake) = self.host_pool.dispatch(eng.now());
        let mut consumed = false;
        for a in assigned {
            let unit = self.host_pool.unit_of(a.uthread) as u32;
            self.trace.push(TraceRecord::HostTask {
                kernel: a.kernel,
                task: a.task as u32,
                unit,
                uthread: a.uthread as u32,
                start: a.start,
                end: a.end,
            });
            eng.schedule_at(
                HOST,
                a.end,
                Ev::HostTaskDone {
                    kernel: a.kernel,
                    task: a.task as u32,
                    uthread: a.uthread as u32,
                },
            )?;
            if self.mech.streams() {
                let reads = &self.graph.iterations[a.kernel as usize].host_tasks[a.task].depends_on;
                for rec in self.ready.on_start(a.kernel, reads) {
                    self.rings.host_consume_payload(&rec)?;
                    consumed = true;
                }
            }
        }
        // Without a polling loop, freed slots are reported right away.
        if consumed && self.mech == Mechanism::KaiInterrupt {
            self.rings.advance_heads();
            self.snapshot(eng.now());
            self.send_flow_control(eng)?;
        }
        if let Some(w) = wake {
            if self.host_wake != Some(w) {
                self.host_wake = Some(w);
                eng.schedule_at(HOST, w, Ev::HostDispatch)?;
            }
        }
        Ok(())
    }

    fn host_task_done(&mut self, eng: &mut Engine<Ev>, k: u32, task: u32, uthread: u32) -> Result<(), RunError> {
        let now = eng.now();
        self.host_pool.release(uthread as usize);
        self.iters[k as usize].host_left -= 1;
        for s in self.ready.on_finish(k, task as usize) {
            self.push_host(k, s, now);
        }
        self.check_iteration_end(eng, k)?;
        self.host_dispatch(eng)
    }
}

impl Actor<Ev> for Sim<'_> {
    type Error = RunError;

    fn handle(&mut self, eng: &mut Engine<Ev>, ev: Event<Ev>) -> Result<(), RunError> {
        match ev.payload {
            Ev::StartIteration(k) => self.start_iteration(eng, k),
            Ev::LaunchArrive(k) => self.launch_arrive(eng, k),
            Ev::CcmDispatch => {
                if self.ccm_wake == Some(eng.now()) {
                    self.ccm_wake = None;
                }
                self.ccm_dispatch(eng)
            }
            Ev::CcmTaskDone { kernel, task, uthread } => self.ccm_task_done(eng, kernel, task, uthread),
            Ev::RpEnqueue(k) => self.rp_enqueue(eng, k),
            Ev::RpPoll(k) => self.rp_poll(eng, k),
            Ev::RpPollArrive { kernel, reply_at } => self.rp_poll_arrive(eng, kernel, reply_at),
            Ev::RpPollReply { kernel, done } => self.rp_poll_reply(eng, kernel, done),
            Ev::RpDequeued(k) => {
                let now = eng.now();
                self.load_results(eng, k, now)
            }
            Ev::BsReply(k) => {
                let from = self.iters[k as usize].ccm_end.expect("reply follows kernel end");
                self.load_results(eng, k, from)
            }
            Ev::ResultsLoaded(k) => self.results_loaded(eng, k),
            Ev::DmaVisible(id) => self.dma_visible(eng, id),
            Ev::FcArrive {
                payload_head,
                meta_head,
            } => self.fc_arrive(eng, payload_head, meta_head),
            Ev::PollTick => self.poll_tick(eng),
            Ev::InterruptArrive => self.interrupt_arrive(eng),
            Ev::InterruptDone => {
                let now = eng.now();
                self.drain(eng, now).map(|_| ())
            }
            Ev::HostDispatch => {
                if self.host_wake == Some(eng.now()) {
                    self.host_wake = None;
                }
                self.host_dispatch(eng)
            }
            Ev::HostTaskDone { kernel, task, uthread } => self.host_task_done(eng, kernel, task, uthread),
        }
    }
}

/// Run `graph` to completion under `cfg`. `dispatch_trace`, when given,
/// receives one line per dispatched event.
pub fn simulate(
    graph: &TaskGraph,
    cfg: &SimConfig,
    dispatch_trace: Option<Box<dyn Write>>,
) -> Result<RunOutput, RunError> {
    let mut eng: Engine<Ev> = Engine::new();
    if let Some(sink) = dispatch_trace {
        eng = eng.with_trace(sink);
    }
    let mut sim = Sim::new(graph, cfg);
    if !graph.iterations.is_empty() {
        eng.schedule(HOST, SimTime::ZERO, Ev::StartIteration(0))?;
    }
    let end = eng.run_until_idle(&mut sim)?;
    if let Some(i) = sim.iters.iter().position(|s| !s.ended) {
        return Err(RunError::Stalled {
            iteration: i as u32,
            at: end,
        });
    }
    let ring_snapshots = metrics::check_ring_trace(&sim.trace).map_err(RunError::RingTrace)?;
    let units = UnitCounts {
        host: graph.host_units_override.unwrap_or(cfg.host.n_units),
        ccm: cfg.ccm.n_units,
    };
    let report = metrics::report(&sim.trace, !cfg.mechanism.streams(), units, cfg.idle_basis)?;
    Ok(RunOutput {
        trace: sim.trace,
        report,
        fabric_log: sim.fabric.into_records(),
        ring_snapshots,
        events: eng.dispatched(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workloads::{preset, CcmTask, HostTask, Iteration, Kernel};

    fn tiny(compute_ps: u64, results: u64) -> TaskGraph {
        let tasks: Vec<CcmTask> = (0..results / 4)
            .map(|i| CcmTask {
                offset: i * 4,
                compute_ps,
                result_bytes: 4,
                ready_ps: 0,
            })
            .collect();
        TaskGraph {
            name: "tiny".into(),
            iterations: vec![Iteration {
                kernel: Kernel {
                    tasks,
                    result_bytes_total: results,
                },
                host_tasks: vec![HostTask {
                    id: 0,
                    depends_on: 0..results,
                    compute_ps: 1_000_000,
                    after: None,
                }],
            }],
            dependent: true,
            host_units_override: None,
        }
    }

    fn run(g: &TaskGraph, m: Mechanism) -> RunOutput {
        simulate(g, &SimConfig::new(m), None).unwrap()
    }

    #[test]
    fn bs_single_iteration_is_closed_form() {
        let g = tiny(10_000_000, 64);
        let out = run(&g, Mechanism::Bs);
        // store 35 ns + ~2 ps wire, one 10 µs task plus 500 ps assignment,
        // reply 35 ns, load 70 ns + 2 ns wire, host 1 µs.
        let f = FabricConfig::default();
        let wire64 = f.transfer(DESCRIPTOR_BYTES).as_ps();
        let expect = wire64 + 35_000 + 500 + 10_000_000 + 35_000 + 70_000 + f.transfer(64).as_ps() + 1_000_000;
        // 16 tasks on 16 units run in parallel.
        assert_eq!(out.report.e2e_ps, expect);
        let r = &out.report;
        assert_eq!(r.launch_ps + r.t_c_ps + r.t_d_ps + r.t_h_ps, r.e2e_ps);
    }

    #[test]
    fn rp_detection_is_quantized_to_poll_grid() {
        let g = tiny(300_000, 4);
        let rp = run(&g, Mechanism::Rp);
        let bs = run(&g, Mechanism::Bs);
        assert!(rp.report.e2e_ps > bs.report.e2e_ps + 1_000_000);
    }

    #[test]
    fn kai_never_loads_results_over_the_link() {
        let g = tiny(1_000_000, 256);
        for m in [Mechanism::Kai, Mechanism::KaiInterrupt] {
            let out = run(&g, m);
            assert!(!out.fabric_log.iter().any(|r| r.message.kind == MessageKind::MemLoad));
            assert!(out.ring_snapshots > 0);
        }
    }

    #[test]
    fn every_preset_completes_under_every_mechanism() {
        for name in crate::workloads::ALL_PRESETS {
            let g = preset(name).unwrap().generate().unwrap();
            for m in Mechanism::ALL {
                let out = simulate(&g, &SimConfig::new(m), None).unwrap_or_else(|e| panic!("{name} under {m}: {e}"));
                assert!(out.report.e2e_ps > 0, "{name} {m}");
                assert_eq!(out.report.iterations.len(), g.iterations.len());
            }
        }
    }

    fn per_chunk_host_tasks(mut g: TaskGraph) -> TaskGraph {
        let total = g.iterations[0].kernel.result_bytes_total;
        g.iterations[0].host_tasks = (0..total / 32)
            .map(|i| HostTask {
                id: i as usize,
                depends_on: i * 32..(i + 1) * 32,
                compute_ps: 10_000,
                after: None,
            })
            .collect();
        g
    }

    #[test]
    fn tiny_ring_forces_flow_control_without_stalling() {
        let g = per_chunk_host_tasks(tiny(100_000, 4096));
        let mut cfg = SimConfig::new(Mechanism::Kai);
        cfg.ring.capacity = 4;
        let out = simulate(&g, &cfg, None).unwrap();
        assert!(out
            .fabric_log
            .iter()
            .any(|r| r.message.kind == MessageKind::FlowControlStore));
    }

    #[test]
    fn pinned_rp_poller_takes_a_host_uthread() {
        // 64 one-µs host tasks fill every µthread; pinning one adds a wave.
        let mut g = tiny(100_000, 4);
        g.iterations[0].host_tasks = (0..64)
            .map(|i| HostTask {
                id: i,
                depends_on: 0..4,
                compute_ps: 1_000_000,
                after: None,
            })
            .collect();
        let free = run(&g, Mechanism::Rp).report.e2e_ps;
        let mut cfg = SimConfig::new(Mechanism::Rp);
        cfg.host.rp_pin_uthread = true;
        let pinned = simulate(&g, &cfg, None).unwrap().report.e2e_ps;
        assert_eq!(pinned, free + 1_000_000);
    }

    #[test]
    fn ring_smaller_than_a_task_dependency_is_reported_as_stall() {
        let g = tiny(100_000, 4096);
        let mut cfg = SimConfig::new(Mechanism::Kai);
        cfg.ring.capacity = 4;
        let err = simulate(&g, &cfg, None).unwrap_err();
        assert!(matches!(err, RunError::Stalled { .. }), "{err}");
    }
}
