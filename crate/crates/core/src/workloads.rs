//! Abstract task graphs for the evaluated application domains.
//!
//! Durations come from per-domain cost constants. Each named preset fixes the
//! constants so the serialized (RP/BS) breakdown lands on the target ratio;
//! the arithmetic behind every preset is written next to it.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One unit of CCM work, run by a single µthread.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CcmTask {
    /// Byte offset of this task's output in the kernel's result space.
    pub offset: u64,
    pub compute_ps: u64,
    /// Zero for partial-sum tasks whose value is folded into a later task.
    pub result_bytes: u64,
    /// Input availability relative to kernel launch.
    pub ready_ps: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostTask {
    pub id: usize,
    /// Result bytes this task reads.
    pub depends_on: Range<u64>,
    pub compute_ps: u64,
    /// Host task that must finish first (a running reduction).
    pub after: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Kernel {
    pub tasks: Vec<CcmTask>,
    pub result_bytes_total: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Iteration {
    pub kernel: Kernel,
    pub host_tasks: Vec<HostTask>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskGraph {
    pub name: String,
    pub iterations: Vec<Iteration>,
    /// Iteration i+1 waits for iteration i's host tasks. When false it only
    /// waits for iteration i's results to reach the host.
    pub dependent: bool,
    pub host_units_override: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WorkloadError {
    #[error("workload.{field}: {msg}")]
    Invalid { field: &'static str, msg: String },
    #[error("unknown workload preset `{0}`")]
    UnknownPreset(String),
}

fn invalid(field: &'static str, msg: impl Into<String>) -> WorkloadError {
    WorkloadError::Invalid { field, msg: msg.into() }
}

impl TaskGraph {
    /// Structural checks every generator's output must pass.
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.iterations.is_empty() {
            return Err(invalid("iterations", "no iterations"));
        }
        for it in &self.iterations {
            let k = &it.kernel;
            if k.tasks.is_empty() {
                return Err(invalid("tasks", "kernel with zero tasks"));
            }
            if k.tasks.iter().any(|t| t.compute_ps == 0) {
                return Err(invalid("tasks", "task with zero compute time"));
            }
            let sum: u64 = k.tasks.iter().map(|t| t.result_bytes).sum();
            if sum != k.result_bytes_total || sum == 0 {
                return Err(invalid(
                    "tasks",
                    format!("result bytes {sum} do not match kernel total {}", k.result_bytes_total),
                ));
            }
            for (i, h) in it.host_tasks.iter().enumerate() {
                if h.id != i {
                    return Err(invalid("host_tasks", "host task ids must be dense"));
                }
                if h.depends_on.is_empty() || h.depends_on.end > k.result_bytes_total {
                    return Err(invalid(
                        "host_tasks",
                        format!(
                            "task {i} depends on {:?} outside 0..{}",
                            h.depends_on, k.result_bytes_total
                        ),
                    ));
                }
                if h.after.is_some_and(|a| a >= i) {
                    return Err(invalid("host_tasks", format!("task {i} chained to a later task")));
                }
            }
        }
        Ok(())
    }
}

/// Split `total` into `parts` near-equal integers, larger parts first.
fn split_even(total: u64, parts: u64) -> impl Iterator<Item = u64> {
    let base = total / parts;
    let extra = total % parts;
    (0..parts).map(move |i| base + u64::from(i < extra))
}

/// Contiguous byte ranges of `total`, aligned to `align`, one per part.
fn ranges(total: u64, parts: u64, align: u64) -> Vec<Range<u64>> {
    let units = total.div_ceil(align);
    let mut out = Vec::with_capacity(parts as usize);
    let mut start = 0;
    for n in split_even(units, parts) {
        if n == 0 {
            continue;
        }
        let end = ((start + n) * align).min(total);
        out.push(start * align..end);
        start += n;
    }
    out
}

// ---------------------------------------------------------------- KNN

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnnParams {
    pub dim: u64,
    pub rows: u64,
    pub k: u64,
    /// Elements of one row handled by one CCM task.
    pub slice_elems: u64,
    pub ccm_ps_per_elem: u64,
    /// Host top-k cost per candidate row.
    pub host_ps_per_row: u64,
    /// Rows merged by one host task of the running top-k.
    pub chunk_rows: u64,
}

pub const KNN_DISTANCE_BYTES: u64 = 4;

impl KnnParams {
    /// Dimension-slice tasks in row order; the last slice of a row emits the
    /// row's 4-byte distance. The host folds rows into a running top-k in
    /// fixed-size chunks, each merge waiting for the previous one.
    pub fn generate(&self) -> Result<TaskGraph, WorkloadError> {
        if self.dim == 0 {
            return Err(invalid("dim", "must be >= 1"));
        }
        if self.rows == 0 {
            return Err(invalid("rows", "must be >= 1"));
        }
        if self.k == 0 || self.k > self.rows {
            return Err(invalid("k", format!("must be in 1..={}", self.rows)));
        }
        for (f, v) in [
            ("slice_elems", self.slice_elems),
            ("ccm_ps_per_elem", self.ccm_ps_per_elem),
            ("host_ps_per_row", self.host_ps_per_row),
            ("chunk_rows", self.chunk_rows),
        ] {
            if v == 0 {
                return Err(invalid(f, "must be >= 1"));
            }
        }
        let slices = self.dim.div_ceil(self.slice_elems);
        let mut tasks = Vec::with_capacity((self.rows * slices) as usize);
        for r in 0..self.rows {
            for (s, elems) in split_even(self.dim, slices).enumerate() {
                let last = s as u64 == slices - 1;
                tasks.push(CcmTask {
                    offset: r * KNN_DISTANCE_BYTES,
                    compute_ps: elems * self.ccm_ps_per_elem,
                    result_bytes: if last { KNN_DISTANCE_BYTES } else { 0 },
                    ready_ps: 0,
                });
            }
        }
        let total = self.rows * KNN_DISTANCE_BYTES;
        let chunk_bytes = self.chunk_rows * KNN_DISTANCE_BYTES;
        let host_tasks = (0..total.div_ceil(chunk_bytes))
            .map(|i| {
                let start = i * chunk_bytes;
                let end = (start + chunk_bytes).min(total);
                HostTask {
                    id: i as usize,
                    depends_on: start..end,
                    compute_ps: (end - start) / KNN_DISTANCE_BYTES * self.host_ps_per_row,
                    after: i.checked_sub(1).map(|p| p as usize),
                }
            })
            .collect();
        Ok(TaskGraph {
            name: format!("knn-d{}-r{}", self.dim, self.rows),
            iterations: vec![Iteration {
                kernel: Kernel {
                    tasks,
                    result_bytes_total: total,
                },
                host_tasks,
            }],
            dependent: true,
            host_units_override: None,
        })
    }
}

// ---------------------------------------------------------------- graphs

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    Sssp,
    Pagerank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphParams {
    pub kind: GraphKind,
    pub n_v: u64,
    pub n_e: u64,
    pub iterations: u32,
    pub ccm_tasks: u64,
    pub host_tasks: u64,
    pub ccm_ps_per_edge: u64,
    pub host_ps_per_vertex: u64,
    /// Per-iteration active fraction is drawn uniformly from this range.
    pub active_min: f64,
    pub active_max: f64,
    /// Leading fraction of CCM tasks whose input arrives late.
    pub late_fraction: f64,
    /// Arrival time of those late inputs.
    pub late_ready_ps: u64,
    pub seed: u64,
}

const VERTEX_BYTES: u64 = 4;

impl GraphParams {
    /// Active fraction per iteration: a seeded uniform draw in
    /// `[active_min, active_max]`, identical for identical seeds.
    pub fn active_schedule(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.iterations)
            .map(|_| {
                if self.active_max > self.active_min {
                    rng.gen_range(self.active_min..=self.active_max)
                } else {
                    self.active_min
                }
            })
            .collect()
    }

    /// Edge partitions per iteration, each emitting the updated values of its
    /// active vertices; host tasks apply the updates over vertex ranges.
    pub fn generate(&self) -> Result<TaskGraph, WorkloadError> {
        for (f, v) in [
            ("n_v", self.n_v),
            ("n_e", self.n_e),
            ("ccm_tasks", self.ccm_tasks),
            ("host_tasks", self.host_tasks),
            ("ccm_ps_per_edge", self.ccm_ps_per_edge),
            ("host_ps_per_vertex", self.host_ps_per_vertex),
        ] {
            if v == 0 {
                return Err(invalid(f, "must be >= 1"));
            }
        }
        if self.iterations == 0 {
            return Err(invalid("iterations", "must be >= 1"));
        }
        if !(0.0 < self.active_min && self.active_min <= self.active_max && self.active_max <= 1.0) {
            return Err(invalid("active_min", "need 0 < active_min <= active_max <= 1"));
        }
        if !(0.0..=1.0).contains(&self.late_fraction) {
            return Err(invalid("late_fraction", "must be within [0, 1]"));
        }
        let late = (self.late_fraction * self.ccm_tasks as f64).round() as u64;
        let mut iterations = Vec::new();
        for frac in self.active_schedule() {
            let active_v = ((self.n_v as f64 * frac).round() as u64).max(self.ccm_tasks);
            let active_e = ((self.n_e as f64 * frac).round() as u64).max(self.ccm_tasks);
            // Equal edge counts per partition keep every wave the same length.
            let edges_per_task = active_e.div_ceil(self.ccm_tasks);
            let mut offset = 0;
            let tasks: Vec<CcmTask> = split_even(active_v, self.ccm_tasks)
                .enumerate()
                .map(|(i, v)| {
                    let t = CcmTask {
                        offset,
                        compute_ps: edges_per_task * self.ccm_ps_per_edge,
                        result_bytes: v * VERTEX_BYTES,
                        ready_ps: if (i as u64) < late { self.late_ready_ps } else { 0 },
                    };
                    offset += v * VERTEX_BYTES;
                    t
                })
                .collect();
            let total = active_v * VERTEX_BYTES;
            let host_tasks = ranges(total, self.host_tasks, VERTEX_BYTES)
                .into_iter()
                .enumerate()
                .map(|(id, r)| HostTask {
                    id,
                    compute_ps: (r.end - r.start) / VERTEX_BYTES * self.host_ps_per_vertex,
                    depends_on: r,
                    after: None,
                })
                .collect();
            iterations.push(Iteration {
                kernel: Kernel {
                    tasks,
                    result_bytes_total: total,
                },
                host_tasks,
            });
        }
        Ok(TaskGraph {
            name: match self.kind {
                GraphKind::Sssp => "sssp".into(),
                GraphKind::Pagerank => "pagerank".into(),
            },
            iterations,
            dependent: true,
            host_units_override: None,
        })
    }
}

// ---------------------------------------------------------------- OLAP

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Query {
    #[serde(rename = "q1_1")]
    Q1_1,
    #[serde(rename = "q1_2")]
    Q1_2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OlapParams {
    pub query: Query,
    pub rows: u64,
    pub selectivity: f64,
    pub ccm_tasks: u64,
    pub host_tasks: u64,
    pub ccm_ps_per_row: u64,
    /// Host join/aggregate cost per scanned row's worth of output.
    pub host_ps_per_byte: u64,
}

impl OlapParams {
    /// Filter tasks over row partitions emit 4 bytes per qualifying row (at
    /// least a 4-byte count when none qualify); host tasks aggregate ranges.
    pub fn generate(&self) -> Result<TaskGraph, WorkloadError> {
        for (f, v) in [
            ("rows", self.rows),
            ("ccm_tasks", self.ccm_tasks),
            ("host_tasks", self.host_tasks),
            ("ccm_ps_per_row", self.ccm_ps_per_row),
            ("host_ps_per_byte", self.host_ps_per_byte),
        ] {
            if v == 0 {
                return Err(invalid(f, "must be >= 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.selectivity) {
            return Err(invalid("selectivity", "must be within [0, 1]"));
        }
        let rows_per_task = self.rows.div_ceil(self.ccm_tasks);
        let q = self.selectivity * rows_per_task as f64;
        let mut offset = 0;
        let tasks: Vec<CcmTask> = (0..self.ccm_tasks)
            .map(|j| {
                // Deterministic spread of qualifying rows over partitions.
                let hits = ((j + 1) as f64 * q).floor() as u64 - (j as f64 * q).floor() as u64;
                let bytes = 4 * hits.max(1);
                let t = CcmTask {
                    offset,
                    compute_ps: rows_per_task * self.ccm_ps_per_row,
                    result_bytes: bytes,
                    ready_ps: 0,
                };
                offset += bytes;
                t
            })
            .collect();
        let total = offset;
        let host_tasks = ranges(total, self.host_tasks, 4)
            .into_iter()
            .enumerate()
            .map(|(id, r)| HostTask {
                id,
                compute_ps: (r.end - r.start) * self.host_ps_per_byte,
                depends_on: r,
                after: None,
            })
            .collect();
        Ok(TaskGraph {
            name: match self.query {
                Query::Q1_1 => "ssb-q1_1".into(),
                Query::Q1_2 => "ssb-q1_2".into(),
            },
            iterations: vec![Iteration {
                kernel: Kernel {
                    tasks,
                    result_bytes_total: total,
                },
                host_tasks,
            }],
            dependent: true,
            host_units_override: None,
        })
    }
}

// ---------------------------------------------------------------- LLM

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmParams {
    pub hidden: u64,
    pub heads: u64,
    pub tokens: u64,
    pub batch: u64,
    pub layers: u32,
    /// Token blocks per head on the CCM.
    pub tasks_per_head: u64,
    pub ccm_ps_per_token_dim: u64,
    /// Host cost per element of a head's output slice.
    pub host_ps_per_elem: u64,
    /// Final per-layer host step over the whole intermediate.
    pub host_final_ps: u64,
    pub host_units_override: Option<u32>,
}

impl LlmParams {
    /// Per layer: attention tasks grouped by head on the CCM, a small
    /// `[batch, hidden]` fp32 intermediate, then one host task per head slice
    /// and a final host task over the full intermediate.
    pub fn generate(&self) -> Result<TaskGraph, WorkloadError> {
        for (f, v) in [
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("tokens", self.tokens),
            ("batch", self.batch),
            ("tasks_per_head", self.tasks_per_head),
            ("ccm_ps_per_token_dim", self.ccm_ps_per_token_dim),
            ("host_ps_per_elem", self.host_ps_per_elem),
            ("host_final_ps", self.host_final_ps),
        ] {
            if v == 0 {
                return Err(invalid(f, "must be >= 1"));
            }
        }
        if self.layers == 0 {
            return Err(invalid("layers", "must be >= 1"));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(invalid("heads", "must divide hidden"));
        }
        if self.host_units_override == Some(0) {
            return Err(invalid("host_units_override", "must be >= 1"));
        }
        let head_dim = self.hidden / self.heads;
        let head_bytes = head_dim * self.batch * 4;
        let per_head = self.tasks_per_head.min(self.tokens).min(head_bytes);
        let mut iterations = Vec::new();
        for _ in 0..self.layers {
            let mut tasks = Vec::new();
            for h in 0..self.heads {
                let mut offset = h * head_bytes;
                for (toks, bytes) in split_even(self.tokens, per_head).zip(split_even(head_bytes, per_head)) {
                    tasks.push(CcmTask {
                        offset,
                        compute_ps: toks * head_dim * self.ccm_ps_per_token_dim,
                        result_bytes: bytes,
                        ready_ps: 0,
                    });
                    offset += bytes;
                }
            }
            let total = self.heads * head_bytes;
            let mut host_tasks: Vec<HostTask> = (0..self.heads)
                .map(|h| HostTask {
                    id: h as usize,
                    depends_on: h * head_bytes..(h + 1) * head_bytes,
                    compute_ps: head_dim * self.batch * self.host_ps_per_elem,
                    after: None,
                })
                .collect();
            host_tasks.push(HostTask {
                id: self.heads as usize,
                depends_on: 0..total,
                compute_ps: self.host_final_ps,
                after: None,
            });
            iterations.push(Iteration {
                kernel: Kernel {
                    tasks,
                    result_bytes_total: total,
                },
                host_tasks,
            });
        }
        Ok(TaskGraph {
            name: "llm".into(),
            iterations,
            dependent: true,
            host_units_override: self.host_units_override,
        })
    }
}

// ---------------------------------------------------------------- presets

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "lowercase")]
pub enum WorkloadParams {
    Knn(KnnParams),
    Graph(GraphParams),
    Olap(OlapParams),
    Llm(LlmParams),
}

impl WorkloadParams {
    pub fn generate(&self) -> Result<TaskGraph, WorkloadError> {
        let g = match self {
            WorkloadParams::Knn(p) => p.generate()?,
            WorkloadParams::Graph(p) => p.generate()?,
            WorkloadParams::Olap(p) => p.generate()?,
            WorkloadParams::Llm(p) => p.generate()?,
        };
        g.validate()?;
        Ok(g)
    }
}

/// The eight evaluation presets, in reporting order.
pub const EVAL_PRESETS: [&str; 8] = [
    "knn-d2048-r128",
    "knn-d1024-r256",
    "knn-d512-r512",
    "sssp",
    "pagerank-fig4",
    "ssb-q1_1",
    "ssb-q1_2",
    "llm-opt2.7b",
];

/// Every shipped preset name.
pub const ALL_PRESETS: [&str; 9] = [
    "knn-d2048-r128",
    "knn-d1024-r256",
    "knn-d512-r512",
    "sssp",
    "sssp-skew",
    "pagerank-fig4",
    "ssb-q1_1",
    "ssb-q1_2",
    "llm-opt2.7b",
];

fn knn(dim: u64, rows: u64) -> WorkloadParams {
    // 64-element slices give 4096 tasks (16 waves on 256 µthreads) for every
    // dim x rows = 2^18 shape. Slice: 64 x 8 ns = 512 ns, so T_C = 16 x 512.5
    // ns = 8.2 µs. Host top-k: 12.8 ns per row, merged one payload slot (8
    // rows, 102 ns) at a time.
    WorkloadParams::Knn(KnnParams {
        dim,
        rows,
        k: 10.min(rows),
        slice_elems: 64,
        ccm_ps_per_elem: 8_000,
        host_ps_per_row: 12_800,
        chunk_rows: 8,
    })
}

fn graph(kind: GraphKind) -> GraphParams {
    match kind {
        // All vertices active: 4 x 299067 B = 1.196 MB, T_D = 70 ns + 34.82 µs
        // = 34.89 µs at 32 GiB/s. T_C = 34.89 x 49.9/48 = 36.27 µs = 16 waves
        // of 2.267 µs; 239 edges per task -> 9.49 ns per edge.
        // T_H = 34.89 x 2.1/48 = 1.53 µs = one wave of 64 host tasks over 4673
        // vertices -> 327 ps per vertex.
        GraphKind::Pagerank => GraphParams {
            kind,
            n_v: 299_067,
            n_e: 977_676,
            iterations: 4,
            ccm_tasks: 4096,
            host_tasks: 64,
            ccm_ps_per_edge: 9_490,
            host_ps_per_vertex: 327,
            active_min: 1.0,
            active_max: 1.0,
            late_fraction: 0.0,
            late_ready_ps: 0,
            seed: 7,
        },
        // At full activity: T_D = 30.85 µs (1.057 MB), T_C = 16 waves of 3.09
        // µs (180 edges x 17.2 ns), T_H = 16 host waves of 2.7 µs (258
        // vertices x 10.5 ns) -- roughly 40/25/35.
        GraphKind::Sssp => GraphParams {
            kind,
            n_v: 264_346,
            n_e: 733_846,
            iterations: 6,
            ccm_tasks: 4096,
            host_tasks: 1024,
            ccm_ps_per_edge: 17_200,
            host_ps_per_vertex: 10_500,
            active_min: 0.3,
            active_max: 1.0,
            late_fraction: 0.0,
            late_ready_ps: 0,
            seed: 7,
        },
    }
}

pub fn preset(name: &str) -> Result<WorkloadParams, WorkloadError> {
    Ok(match name {
        "knn-d2048-r128" => knn(2048, 128),
        "knn-d1024-r256" => knn(1024, 256),
        "knn-d512-r512" => knn(512, 512),
        "sssp" => WorkloadParams::Graph(graph(GraphKind::Sssp)),
        // One full-activity iteration whose first eighth of the edge
        // partitions waits for inputs until half of the nominal kernel time.
        "sssp-skew" => WorkloadParams::Graph(GraphParams {
            iterations: 1,
            active_min: 1.0,
            active_max: 1.0,
            late_fraction: 0.125,
            late_ready_ps: 8 * 3_096_000,
            ..graph(GraphKind::Sssp)
        }),
        "pagerank-fig4" => WorkloadParams::Graph(graph(GraphKind::Pagerank)),
        // Q1_2 under BS: 22.53 / 0.64 / 76.83. 4096 partitions of 256 rows at
        // 5.1 ps per row -> 16 waves of 1.306 µs = 20.9 µs. Selectivity 0.002
        // gives mostly 4-byte counts: 16.4 KB -> T_D = 0.55 µs. Host: 1024
        // tasks, 16 waves on 64 µthreads, 16 B each at 279 ns/B -> 71.4 µs.
        "ssb-q1_2" => WorkloadParams::Olap(OlapParams {
            query: Query::Q1_2,
            rows: 1 << 20,
            selectivity: 0.002,
            ccm_tasks: 4096,
            host_tasks: 1024,
            ccm_ps_per_row: 5_100,
            host_ps_per_byte: 279_000,
        }),
        // Q1_1 scans the same table with a wider filter and a lighter
        // aggregate.
        "ssb-q1_1" => WorkloadParams::Olap(OlapParams {
            query: Query::Q1_1,
            rows: 1 << 20,
            selectivity: 0.01,
            ccm_tasks: 4096,
            host_tasks: 1024,
            ccm_ps_per_row: 5_100,
            host_ps_per_byte: 120_000,
        }),
        // OPT-2.7B attention block: hidden 2560, 32 heads of 80, 1K tokens,
        // batch 4 -> 40 KB fp32 intermediate per layer. 128 token blocks per
        // head = 4096 tasks of 8 x 80 x 1.5625 ns = 1 µs. Host: 3 µs per head
        // slice plus a 2 µs final step.
        "llm-opt2.7b" => WorkloadParams::Llm(LlmParams {
            hidden: 2560,
            heads: 32,
            tokens: 1024,
            batch: 4,
            layers: 4,
            tasks_per_head: 128,
            ccm_ps_per_token_dim: 1_562,
            host_ps_per_elem: 9_375,
            host_final_ps: 2_000_000,
            host_units_override: None,
        }),
        other => return Err(WorkloadError::UnknownPreset(other.into())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn total_result(g: &TaskGraph) -> Vec<u64> {
        g.iterations.iter().map(|i| i.kernel.result_bytes_total).collect()
    }

    #[test]
    fn knn_result_sizes() {
        let g = preset("knn-d2048-r128").unwrap().generate().unwrap();
        assert_eq!(total_result(&g), vec![512]);
        let g = preset("knn-d512-r512").unwrap().generate().unwrap();
        assert_eq!(total_result(&g), vec![2048]);
    }

    #[test]
    fn knn_minimal() {
        let p = KnnParams {
            dim: 1,
            rows: 1,
            k: 1,
            slice_elems: 64,
            ccm_ps_per_elem: 1,
            host_ps_per_row: 1,
            chunk_rows: 32,
        };
        let g = p.generate().unwrap();
        assert_eq!(g.iterations[0].kernel.tasks.len(), 1);
        assert_eq!(g.iterations[0].kernel.result_bytes_total, 4);
        assert_eq!(g.iterations[0].host_tasks.len(), 1);
    }

    #[test]
    fn knn_rejects_bad_k() {
        let WorkloadParams::Knn(mut p) = preset("knn-d512-r512").unwrap() else {
            unreachable!()
        };
        p.k = 513;
        assert!(p.generate().is_err());
        p.k = 0;
        assert!(p.generate().is_err());
    }

    #[test]
    fn graph_full_activity_bytes() {
        let WorkloadParams::Graph(mut p) = preset("pagerank-fig4").unwrap() else {
            unreachable!()
        };
        p.iterations = 1;
        let g = p.generate().unwrap();
        assert_eq!(total_result(&g), vec![4 * 299_067]);
    }

    #[test]
    fn graph_schedule_is_seeded() {
        let WorkloadParams::Graph(p) = preset("sssp").unwrap() else {
            unreachable!()
        };
        let a = p.active_schedule();
        assert_eq!(a, p.active_schedule());
        assert!(a.iter().all(|f| (0.3..=1.0).contains(f)));
        let q = GraphParams { seed: 8, ..p.clone() };
        assert_ne!(a, q.active_schedule());
    }

    #[test]
    fn olap_selectivity_bounds() {
        let WorkloadParams::Olap(p) = preset("ssb-q1_2").unwrap() else {
            unreachable!()
        };
        let lo = OlapParams {
            selectivity: 0.0,
            ..p.clone()
        }
        .generate()
        .unwrap();
        assert_eq!(total_result(&lo), vec![4 * 4096]);
        let hi = OlapParams { selectivity: 1.0, ..p }.generate().unwrap();
        assert_eq!(total_result(&hi), vec![4 * (1 << 20)]);
    }

    #[test]
    fn llm_intermediate_is_small() {
        let g = preset("llm-opt2.7b").unwrap().generate().unwrap();
        let it = &g.iterations[0];
        assert_eq!(it.kernel.result_bytes_total, 2560 * 4 * 4);
        assert!(it.host_tasks.len() * 100 < it.kernel.tasks.len());
    }

    #[test]
    fn llm_single_token() {
        let WorkloadParams::Llm(p) = preset("llm-opt2.7b").unwrap() else {
            unreachable!()
        };
        let g = LlmParams {
            tokens: 1,
            layers: 1,
            ..p
        }
        .generate()
        .unwrap();
        assert_eq!(g.iterations[0].kernel.tasks.len(), 32);
    }

    #[test]
    fn every_preset_is_valid_and_offsets_are_owned_once() {
        for name in ALL_PRESETS {
            let g = preset(name).unwrap().generate().unwrap();
            for it in &g.iterations {
                let k = &it.kernel;
                let mut owner = vec![0u8; k.result_bytes_total as usize];
                for t in &k.tasks {
                    for b in t.offset..t.offset + t.result_bytes {
                        owner[b as usize] += 1;
                    }
                }
                assert!(owner.iter().all(|&c| c == 1), "{name}");
                let sum: u64 = k.tasks.iter().map(|t| t.result_bytes).sum();
                assert_eq!(sum, k.result_bytes_total, "{name}");
            }
        }
    }

    #[test]
    fn generation_is_pure() {
        for name in ALL_PRESETS {
            let p = preset(name).unwrap();
            assert_eq!(p.generate().unwrap(), p.generate().unwrap());
        }
    }

    #[test]
    fn unknown_preset() {
        assert_eq!(preset("tpch").unwrap_err(), WorkloadError::UnknownPreset("tpch".into()));
    }
}
