//! CXL link model between host and CCM.
//!
//! Every message pays its protocol latency (round trip for request/response
//! kinds, half a round trip for posted writes and interrupts) plus its
//! serialization time on the direction channel that carries its bytes. Each
//! direction is a FIFO server shared by mem and io traffic.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::SimTime;

pub const GIB: u64 = 1 << 30;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FabricConfig {
    pub mem_rtt_ps: u64,
    pub io_rtt_ps: u64,
    pub dma_prep_ps: u64,
    pub interrupt_handling_ps: u64,
    /// Bytes per second, per direction.
    pub link_bandwidth: u64,
    pub cacheline: u64,
}

impl Default for FabricConfig {
    fn default() -> Self {
        FabricConfig {
            mem_rtt_ps: 70_000,
            io_rtt_ps: 350_000,
            dma_prep_ps: 500_000,
            interrupt_handling_ps: 50_000_000,
            link_bandwidth: 32 * GIB,
            cacheline: 64,
        }
    }
}

impl FabricConfig {
    pub fn mem_rtt(&self) -> SimTime {
        SimTime(self.mem_rtt_ps)
    }
    pub fn io_rtt(&self) -> SimTime {
        SimTime(self.io_rtt_ps)
    }
    pub fn dma_prep(&self) -> SimTime {
        SimTime(self.dma_prep_ps)
    }
    pub fn interrupt_handling(&self) -> SimTime {
        SimTime(self.interrupt_handling_ps)
    }

    pub fn transfer(&self, bytes: u64) -> SimTime {
        SimTime::transfer(bytes, self.link_bandwidth)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.link_bandwidth == 0 {
            return Err("fabric.link_bandwidth: must be > 0".into());
        }
        if self.cacheline == 0 {
            return Err("fabric.cacheline: must be > 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    MemStore,
    MemLoad,
    IoWrite,
    IoRead,
    DmaPostedWrite,
    Interrupt,
    FlowControlStore,
}

impl MessageKind {
    /// Request/response kinds return a completion to the sender.
    pub fn has_reply(self) -> bool {
        matches!(
            self,
            MessageKind::MemStore | MessageKind::MemLoad | MessageKind::IoWrite | MessageKind::IoRead
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::MemStore => "mem_store",
            MessageKind::MemLoad => "mem_load",
            MessageKind::IoWrite => "io_write",
            MessageKind::IoRead => "io_read",
            MessageKind::DmaPostedWrite => "dma_posted_write",
            MessageKind::Interrupt => "interrupt",
            MessageKind::FlowControlStore => "flow_control_store",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Endpoint {
    Host,
    Ccm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    HostToDevice,
    DeviceToHost,
}

/// What a message carries, for trace consumers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Traffic {
    Control,
    ResultData,
    MailboxPoll,
    FlowControl,
    Notification,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FabricMessage {
    pub kind: MessageKind,
    pub src: Endpoint,
    pub dst: Endpoint,
    pub bytes: u64,
    pub traffic: Traffic,
}

/// Timing outcome of one message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delivery {
    pub issued: SimTime,
    /// When the payload bytes occupy the direction channel (empty for 0 B).
    pub wire_start: SimTime,
    pub wire_end: SimTime,
    pub direction: Direction,
    /// When the receiver observes the request (store data, load request, DMA data).
    pub at_receiver: SimTime,
    /// When the sender observes the reply, for reply-carrying kinds.
    pub completion: Option<SimTime>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FabricRecord {
    pub message: FabricMessage,
    pub delivery: Delivery,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FabricError {
    #[error("{0:?} is not a {1} message")]
    WrongKind(MessageKind, &'static str),
    #[error("zero-byte DMA request")]
    EmptyDma,
    #[error("DMA destination region {0} is not registered")]
    UnregisteredRegion(u32),
    #[error("message from {0:?} to itself")]
    SelfAddressed(Endpoint),
}

#[derive(Debug, Clone)]
pub struct Fabric {
    cfg: FabricConfig,
    h2d_free: SimTime,
    d2h_free: SimTime,
    regions: Vec<u32>,
    log: Vec<FabricRecord>,
}

impl Fabric {
    pub fn new(cfg: FabricConfig) -> Self {
        Fabric {
            cfg,
            h2d_free: SimTime::ZERO,
            d2h_free: SimTime::ZERO,
            regions: Vec::new(),
            log: Vec::new(),
        }
    }

    pub fn config(&self) -> &FabricConfig {
        &self.cfg
    }

    pub fn register_host_region(&mut self, region: u32) {
        if !self.regions.contains(&region) {
            self.regions.push(region);
        }
    }

    pub fn records(&self) -> &[FabricRecord] {
        &self.log
    }

    pub fn into_records(self) -> Vec<FabricRecord> {
        self.log
    }

    /// Put `bytes` on the channel for `dir` no earlier than `ready`.
    fn occupy(&mut self, dir: Direction, ready: SimTime, bytes: u64) -> (SimTime, SimTime) {
        if bytes == 0 {
            return (ready, ready);
        }
        let free = match dir {
            Direction::HostToDevice => &mut self.h2d_free,
            Direction::DeviceToHost => &mut self.d2h_free,
        };
        let start = ready.max(*free);
        let end = start + SimTime::transfer(bytes, self.cfg.link_bandwidth);
        *free = end;
        (start, end)
    }

    fn direction_of(src: Endpoint) -> Direction {
        match src {
            Endpoint::Host => Direction::HostToDevice,
            Endpoint::Ccm => Direction::DeviceToHost,
        }
    }

    fn request_reply(&mut self, now: SimTime, msg: FabricMessage, rtt: SimTime) -> Result<Delivery, FabricError> {
        if msg.src == msg.dst {
            return Err(FabricError::SelfAddressed(msg.src));
        }
        let half = rtt.half();
        let out_dir = Self::direction_of(msg.src);
        let back_dir = Self::direction_of(msg.dst);
        let delivery = match msg.kind {
            // Data rides with the request.
            MessageKind::MemStore | MessageKind::IoWrite | MessageKind::FlowControlStore => {
                let (ws, we) = self.occupy(out_dir, now, msg.bytes);
                let at_receiver = we + half;
                Delivery {
                    issued: now,
                    wire_start: ws,
                    wire_end: we,
                    direction: out_dir,
                    at_receiver,
                    completion: if msg.kind == MessageKind::FlowControlStore {
                        None
                    } else {
                        Some(at_receiver + (rtt - half))
                    },
                }
            }
            // Data rides with the reply.
            MessageKind::MemLoad | MessageKind::IoRead => {
                let at_receiver = now + half;
                let (ws, we) = self.occupy(back_dir, at_receiver, msg.bytes);
                Delivery {
                    issued: now,
                    wire_start: ws,
                    wire_end: we,
                    direction: back_dir,
                    at_receiver,
                    completion: Some(we + (rtt - half)),
                }
            }
            other => return Err(FabricError::WrongKind(other, "request/response")),
        };
        self.log.push(FabricRecord { message: msg, delivery });
        Ok(delivery)
    }

    /// CXL.mem load or store; completion at `now + mem_rtt + transfer` when
    /// the channel is idle.
    pub fn send_mem(&mut self, now: SimTime, msg: FabricMessage) -> Result<Delivery, FabricError> {
        match msg.kind {
            MessageKind::MemLoad | MessageKind::MemStore | MessageKind::FlowControlStore => {
                let rtt = self.cfg.mem_rtt();
                self.request_reply(now, msg, rtt)
            }
            k => Err(FabricError::WrongKind(k, "CXL.mem")),
        }
    }

    pub fn send_io(&mut self, now: SimTime, msg: FabricMessage) -> Result<Delivery, FabricError> {
        match msg.kind {
            MessageKind::IoRead | MessageKind::IoWrite => {
                let rtt = self.cfg.io_rtt();
                self.request_reply(now, msg, rtt)
            }
            k => Err(FabricError::WrongKind(k, "CXL.io")),
        }
    }

    /// Completion of a reply the receiver withheld (the barriered store) and
    /// released at `released_at` on the device side.
    pub fn release_reply(&self, released_at: SimTime) -> SimTime {
        released_at + (self.cfg.mem_rtt() - self.cfg.mem_rtt().half())
    }

    /// Device-initiated posted write. Returns the time the data is visible at
    /// the host. No acknowledgment reaches the host-visible layer.
    pub fn dma_write(&mut self, now: SimTime, region: u32, bytes: u64) -> Result<Delivery, FabricError> {
        if bytes == 0 {
            return Err(FabricError::EmptyDma);
        }
        if !self.regions.contains(&region) {
            return Err(FabricError::UnregisteredRegion(region));
        }
        let ready = now + self.cfg.dma_prep();
        let (ws, we) = self.occupy(Direction::DeviceToHost, ready, bytes);
        let delivery = Delivery {
            issued: now,
            wire_start: ws,
            wire_end: we,
            direction: Direction::DeviceToHost,
            at_receiver: we + self.cfg.io_rtt().half(),
            completion: None,
        };
        self.log.push(FabricRecord {
            message: FabricMessage {
                kind: MessageKind::DmaPostedWrite,
                src: Endpoint::Ccm,
                dst: Endpoint::Host,
                bytes,
                traffic: Traffic::ResultData,
            },
            delivery,
        });
        Ok(delivery)
    }

    /// Interrupt from the device; returns when the host handler may start.
    pub fn raise_interrupt(&mut self, now: SimTime) -> SimTime {
        let at = now + self.cfg.io_rtt().half();
        self.log.push(FabricRecord {
            message: FabricMessage {
                kind: MessageKind::Interrupt,
                src: Endpoint::Ccm,
                dst: Endpoint::Host,
                bytes: 0,
                traffic: Traffic::Notification,
            },
            delivery: Delivery {
                issued: now,
                wire_start: now,
                wire_end: now,
                direction: Direction::DeviceToHost,
                at_receiver: at,
                completion: None,
            },
        });
        at
    }
}
