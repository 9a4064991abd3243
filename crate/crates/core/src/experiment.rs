//! Experiment configuration: TOML parsing with field-path diagnostics, run
//! planning over sweep axes, and execution into report rows.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ccm::{CcmConfig, Scheduler};
use crate::fabric::FabricConfig;
use crate::host::{HostConfig, Mechanism, Polling};
use crate::metrics::{CsvRow, IdleBasis};
use crate::ring::RingConfig;
use crate::simulation::{simulate, RunError, RunOutput, SimConfig};
use crate::workloads::{self, TaskGraph, WorkloadParams};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {msg}")]
    Invalid { path: String, msg: String },
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ConfigError {
    pub fn invalid(path: impl Into<String>, msg: impl Into<String>) -> Self {
        ConfigError::Invalid {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Section validators report `section.field: message`.
    fn from_validator(msg: String) -> Self {
        match msg.split_once(": ") {
            Some((path, rest)) => ConfigError::invalid(path, rest),
            None => ConfigError::invalid("config", msg),
        }
    }
}

/// Streaming factor as written by users: slots, an `sfN` label (2^(N-1)
/// slots), or `full` for one DMA per kernel result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SfRaw", into = "String")]
pub enum SfSpec {
    Slots(u64),
    Full,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SfRaw {
    N(u64),
    S(String),
}

impl TryFrom<SfRaw> for SfSpec {
    type Error = String;
    fn try_from(r: SfRaw) -> Result<Self, String> {
        match r {
            SfRaw::N(n) => SfSpec::from_str(&n.to_string()),
            SfRaw::S(s) => SfSpec::from_str(&s),
        }
    }
}

impl From<SfSpec> for String {
    fn from(s: SfSpec) -> String {
        s.to_string()
    }
}

impl FromStr for SfSpec {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let t = s.trim().to_ascii_lowercase();
        if t == "full" {
            return Ok(SfSpec::Full);
        }
        let n = if let Some(label) = t.strip_prefix("sf") {
            let k: u32 = label.parse().map_err(|_| format!("bad SF label `{s}`"))?;
            if k == 0 || k > 32 {
                return Err(format!("SF label `{s}` out of range (sf1..sf32)"));
            }
            1u64 << (k - 1)
        } else {
            t.parse().map_err(|_| format!("bad streaming factor `{s}`"))?
        };
        if n == 0 {
            return Err("streaming factor must be >= 1".into());
        }
        Ok(SfSpec::Slots(n))
    }
}

impl fmt::Display for SfSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SfSpec::Slots(n) => write!(f, "{n}"),
            SfSpec::Full => f.write_str("full"),
        }
    }
}

impl SfSpec {
    /// Slots per DMA for `graph`; `full` covers the largest kernel result.
    pub fn resolve(self, graph: &TaskGraph, slot: u64) -> u64 {
        match self {
            SfSpec::Slots(n) => n,
            SfSpec::Full => graph
                .iterations
                .iter()
                .map(|i| i.kernel.result_bytes_total.div_ceil(slot))
                .max()
                .unwrap_or(1)
                .max(1),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSection {
    pub preset: Option<String>,
    /// Complete generator parameters, tagged by `generator`.
    pub params: Option<toml::Table>,
    /// Field overrides applied on top of the preset or params.
    #[serde(default)]
    pub overrides: toml::Table,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub idle_basis: IdleBasis,
    pub baseline: Mechanism,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection {
            idle_basis: IdleBasis::Engaged,
            baseline: Mechanism::Rp,
        }
    }
}

/// Sweep axes. An empty axis contributes the single base value.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepAxes {
    pub presets: Vec<String>,
    pub mechanisms: Vec<Mechanism>,
    pub polling: Vec<Polling>,
    pub sf: Vec<SfSpec>,
    pub scheduler: Vec<Scheduler>,
    pub ooo: Vec<bool>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub workload: WorkloadSection,
    #[serde(default)]
    pub host: HostConfig,
    #[serde(default)]
    pub ccm: CcmConfig,
    #[serde(default)]
    pub fabric: FabricConfig,
    #[serde(default)]
    pub ring: RingConfig,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default)]
    pub sweep: SweepAxes,
    /// Overrides the generator seed of randomized workloads.
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

fn path_error<E: fmt::Display>(e: serde_path_to_error::Error<E>, prefix: &str) -> ConfigError {
    let p = e.path().to_string();
    let path = match (prefix.is_empty(), p.as_str()) {
        (true, ".") => "config".to_string(),
        (true, _) => p,
        (false, ".") => prefix.to_string(),
        (false, _) => format!("{prefix}.{p}"),
    };
    // The inner message may carry TOML source context; keep its first line.
    let msg = e.into_inner().to_string();
    let msg = msg
        .lines()
        .rev()
        .find(|l| !l.trim().is_empty())
        .unwrap_or("")
        .trim()
        .to_string();
    ConfigError::invalid(path, msg)
}

/// Command-line choices that override the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub mechanism: Option<Mechanism>,
    pub polling: Option<Polling>,
    pub sf: Option<SfSpec>,
    pub scheduler: Option<Scheduler>,
    pub ooo: Option<bool>,
    pub seed: Option<u64>,
}

/// One fully specified simulation.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub run_id: u32,
    pub workload: String,
    pub params: WorkloadParams,
    pub mechanism: Mechanism,
    pub polling: Polling,
    pub sf: SfSpec,
    pub scheduler: Scheduler,
    pub ooo: bool,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::parse(text).map_err(|e| {
            let msg = e.to_string();
            ConfigError::invalid("config", msg.lines().last().unwrap_or("parse error").trim())
        })?;
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| path_error(e, ""))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.host.validate().map_err(ConfigError::from_validator)?;
        self.ccm.validate().map_err(ConfigError::from_validator)?;
        self.fabric.validate().map_err(ConfigError::from_validator)?;
        self.ring.validate().map_err(ConfigError::from_validator)?;
        if self.workload.preset.is_some() == self.workload.params.is_some() {
            return Err(ConfigError::invalid(
                "workload",
                "set exactly one of `preset` or `params`",
            ));
        }
        for (i, p) in self.sweep.presets.iter().enumerate() {
            workloads::preset(p).map_err(|e| ConfigError::invalid(format!("sweep.presets[{i}]"), e.to_string()))?;
        }
        if !self.sweep.sf.is_empty() && self.sweep.sf.iter().all(|s| *s == SfSpec::Slots(0)) {
            return Err(ConfigError::invalid("sweep.sf", "streaming factor must be >= 1"));
        }
        Ok(())
    }

    /// Workload parameters for `preset` (or the configured one), with
    /// overrides and the seed applied.
    pub fn workload_params(
        &self,
        preset: Option<&str>,
        seed: Option<u64>,
    ) -> Result<(String, WorkloadParams), ConfigError> {
        let (name, base) = match (preset, self.workload.preset.as_deref(), &self.workload.params) {
            (Some(p), _, _) | (None, Some(p), _) => {
                let params =
                    workloads::preset(p).map_err(|e| ConfigError::invalid("workload.preset", e.to_string()))?;
                let table = toml::Table::try_from(&params)
                    .map_err(|e| ConfigError::invalid("workload.preset", e.to_string()))?;
                (p.to_string(), table)
            }
            (None, None, Some(t)) => ("custom".to_string(), t.clone()),
            (None, None, None) => return Err(ConfigError::invalid("workload", "no workload given")),
        };
        let mut table = base;
        for (k, v) in &self.workload.overrides {
            if k == "generator" {
                return Err(ConfigError::invalid(
                    "workload.overrides.generator",
                    "cannot change the generator",
                ));
            }
            table.insert(k.clone(), v.clone());
        }
        let mut params: WorkloadParams =
            serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| path_error(e, "workload"))?;
        if let (Some(s), WorkloadParams::Graph(g)) = (seed.or(self.seed), &mut params) {
            g.seed = s;
        }
        Ok((name, params))
    }

    /// Every run of the cross product of the sweep axes, in stable order.
    /// With `single`, axes are ignored and one run is planned.
    pub fn plan(&self, ov: &Overrides, single: bool) -> Result<Vec<RunSpec>, ConfigError> {
        fn axis<T: Clone>(values: &[T], base: T, single: bool) -> Vec<T> {
            if single || values.is_empty() {
                vec![base]
            } else {
                values.to_vec()
            }
        }
        let base_mech = ov.mechanism.or(self.host.mechanism);
        let mechanisms: Vec<Mechanism> = match ov.mechanism {
            Some(m) => vec![m],
            None if !single && !self.sweep.mechanisms.is_empty() => self.sweep.mechanisms.clone(),
            None => vec![base_mech.ok_or_else(|| {
                ConfigError::invalid("host.mechanism", "no mechanism given (set it or pass --mechanism)")
            })?],
        };
        let presets: Vec<Option<String>> = if single || self.sweep.presets.is_empty() {
            vec![None]
        } else {
            self.sweep.presets.iter().cloned().map(Some).collect()
        };
        let polling = match ov.polling {
            Some(p) => vec![p],
            None => axis(&self.sweep.polling, self.host.polling_interval, single),
        };
        let sfs = match ov.sf {
            Some(s) => vec![s],
            None => axis(&self.sweep.sf, SfSpec::Slots(self.ccm.streaming_factor), single),
        };
        let schedulers = match ov.scheduler {
            Some(s) => vec![s],
            None => axis(&self.sweep.scheduler, self.ccm.scheduler, single),
        };
        let ooos = match ov.ooo {
            Some(o) => vec![o],
            None => axis(&self.sweep.ooo, self.ccm.ooo_streaming, single),
        };
        let mut out = Vec::new();
        for preset in &presets {
            let (workload, params) = self.workload_params(preset.as_deref(), ov.seed)?;
            let graph = params
                .generate()
                .map_err(|e| ConfigError::invalid("workload", e.to_string()))?;
            for &mechanism in &mechanisms {
                for &polling in &polling {
                    for &sf in &sfs {
                        let slots = sf.resolve(&graph, self.ring.slot_size);
                        if mechanism.streams() && slots > self.ring.capacity {
                            return Err(ConfigError::invalid(
                                "ring.capacity",
                                format!(
                                    "capacity {} is smaller than streaming factor {slots}",
                                    self.ring.capacity
                                ),
                            ));
                        }
                        for &scheduler in &schedulers {
                            for &ooo in &ooos {
                                out.push(RunSpec {
                                    run_id: out.len() as u32,
                                    workload: workload.clone(),
                                    params: params.clone(),
                                    mechanism,
                                    polling,
                                    sf,
                                    scheduler,
                                    ooo,
                                });
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn sim_config(&self, spec: &RunSpec, graph: &TaskGraph) -> SimConfig {
        let mut host = self.host.clone();
        host.polling_interval = spec.polling;
        host.mechanism = Some(spec.mechanism);
        let mut ccm = self.ccm.clone();
        ccm.scheduler = spec.scheduler;
        ccm.ooo_streaming = spec.ooo;
        ccm.streaming_factor = spec.sf.resolve(graph, self.ring.slot_size);
        SimConfig {
            host,
            ccm,
            fabric: self.fabric.clone(),
            ring: self.ring.clone(),
            mechanism: spec.mechanism,
            idle_basis: self.metrics.idle_basis,
        }
    }
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("run {run_id}: invariant `{invariant}` violated: {source}")]
    Invariant {
        run_id: u32,
        invariant: &'static str,
        #[source]
        source: RunError,
    },
}

impl ExecError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ExecError::Config(_) => 2,
            ExecError::Invariant { .. } => 3,
        }
    }
}

/// Execute one planned run, optionally streaming the event dispatch trace.
pub fn execute(
    cfg: &ExperimentConfig,
    spec: &RunSpec,
    dispatch_trace: Option<Box<dyn std::io::Write>>,
) -> Result<(CsvRow, RunOutput), ExecError> {
    let graph = spec
        .params
        .generate()
        .map_err(|e| ConfigError::invalid("workload", e.to_string()))?;
    let sim_cfg = cfg.sim_config(spec, &graph);
    let out = simulate(&graph, &sim_cfg, dispatch_trace).map_err(|source| ExecError::Invariant {
        run_id: spec.run_id,
        invariant: source.invariant(),
        source,
    })?;
    let streams = spec.mechanism.streams();
    let na = || "n/a".to_string();
    let r = &out.report;
    let row = CsvRow {
        run_id: spec.run_id,
        mechanism: spec.mechanism.to_string(),
        workload: spec.workload.clone(),
        polling_ps: if spec.mechanism == Mechanism::Kai {
            spec.polling.0.as_ps().to_string()
        } else {
            na()
        },
        sf: if streams {
            sim_cfg.ccm.streaming_factor.to_string()
        } else {
            na()
        },
        scheduler: spec.scheduler.to_string(),
        ooo: if streams {
            (if spec.ooo { "on" } else { "off" }).to_string()
        } else {
            na()
        },
        e2e_ps: r.e2e_ps,
        t_c_ps: r.t_c_ps,
        t_d_ps: r.t_d_ps,
        t_h_ps: r.t_h_ps,
        host_idle_ps: r.host_idle_ps,
        ccm_idle_ps: r.ccm_idle_ps,
        norm_vs_baseline: None,
    };
    Ok((row, out))
}
