//! Trace records and everything computed from them: the T_C / T_D / T_H
//! decomposition, idle times, ring-invariant replay, and CSV/JSON reports.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::sim::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferKind {
    /// Host load of result bytes (RP, BS).
    ResultLoad,
    /// Device DMA of streamed payload and metadata (KAI).
    Dma,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceRecord {
    IterationStart {
        iteration: u32,
        at: SimTime,
    },
    IterationEnd {
        iteration: u32,
        at: SimTime,
    },
    Launch {
        kernel: u32,
        start: SimTime,
        end: SimTime,
    },
    CcmTask {
        kernel: u32,
        task: u32,
        unit: u32,
        uthread: u32,
        start: SimTime,
        end: SimTime,
    },
    HostTask {
        kernel: u32,
        task: u32,
        unit: u32,
        uthread: u32,
        start: SimTime,
        end: SimTime,
    },
    Transfer {
        kernel: u32,
        kind: TransferKind,
        bytes: u64,
        start: SimTime,
        end: SimTime,
    },
    Poll {
        at: SimTime,
        pooled: u32,
        cost: SimTime,
    },
    Interrupt {
        start: SimTime,
        end: SimTime,
    },
    /// Ring indexes after any step that moves them.
    RingState {
        at: SimTime,
        capacity: u64,
        host_payload_head: u64,
        host_meta_head: u64,
        device_payload_head: u64,
        device_meta_head: u64,
        payload_tail: u64,
        meta_tail: u64,
    },
}

type Interval = (u64, u64);

/// Sorted, disjoint cover of the input intervals.
pub fn union(mut v: Vec<Interval>) -> Vec<Interval> {
    v.retain(|(s, e)| e > s);
    v.sort_unstable();
    let mut out: Vec<Interval> = Vec::with_capacity(v.len());
    for (s, e) in v {
        match out.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

pub fn measure(u: &[Interval]) -> u64 {
    u.iter().map(|(s, e)| e - s).sum()
}

/// Length of `a` not covered by `b`; both must be unions.
pub fn measure_minus(a: &[Interval], b: &[Interval]) -> u64 {
    let mut covered = 0;
    let mut j = 0;
    for &(s, e) in a {
        while j < b.len() && b[j].1 <= s {
            j += 1;
        }
        let mut k = j;
        while k < b.len() && b[k].0 < e {
            covered += e.min(b[k].1) - s.max(b[k].0);
            k += 1;
        }
    }
    measure(a) - covered
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IdleBasis {
    /// Average over units that ran at least one task.
    #[default]
    Engaged,
    /// Average over every unit of the side.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnitCounts {
    pub host: u32,
    pub ccm: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationSpan {
    pub iteration: u32,
    pub start: SimTime,
    pub end: SimTime,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub e2e_ps: u64,
    pub t_c_ps: u64,
    pub t_d_ps: u64,
    pub t_h_ps: u64,
    pub host_idle_ps: u64,
    pub ccm_idle_ps: u64,
    pub launch_ps: u64,
    pub poll_ticks: u64,
    pub poll_cost_ps: u64,
    pub interrupts: u64,
    pub iterations: Vec<IterationSpan>,
}

impl MetricsReport {
    /// T_C, T_D, T_H as fractions of their sum.
    pub fn breakdown(&self) -> (f64, f64, f64) {
        let sum = (self.t_c_ps + self.t_d_ps + self.t_h_ps) as f64;
        if sum == 0.0 {
            return (0.0, 0.0, 0.0);
        }
        (
            self.t_c_ps as f64 / sum,
            self.t_d_ps as f64 / sum,
            self.t_h_ps as f64 / sum,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("incomplete trace: iteration {0} started but never ended")]
    Incomplete(u32),
}

/// T_C, T_D, T_H as interval unions. With `serialized`, transfer time
/// overlapping either side's compute is not counted as data movement.
pub fn decompose(trace: &[TraceRecord], serialized: bool) -> (u64, u64, u64) {
    let mut c = Vec::new();
    let mut h = Vec::new();
    let mut d = Vec::new();
    for r in trace {
        match *r {
            TraceRecord::CcmTask { start, end, .. } => c.push((start.as_ps(), end.as_ps())),
            TraceRecord::HostTask { start, end, .. } => h.push((start.as_ps(), end.as_ps())),
            TraceRecord::Transfer { start, end, .. } => d.push((start.as_ps(), end.as_ps())),
            _ => {}
        }
    }
    let cu = union(c.clone());
    let hu = union(h.clone());
    let du = union(d);
    let t_d = if serialized {
        c.extend(h);
        measure_minus(&du, &union(c))
    } else {
        measure(&du)
    };
    (measure(&cu), t_d, measure(&hu))
}

fn side_idle(busy: BTreeMap<u32, Vec<Interval>>, e2e: u64, units: u32, basis: IdleBasis) -> u64 {
    let engaged = busy.len() as u64;
    let idle_sum: u64 = busy.into_values().map(|v| e2e - measure(&union(v)).min(e2e)).sum();
    match basis {
        IdleBasis::Engaged if engaged > 0 => idle_sum / engaged,
        IdleBasis::Engaged => 0,
        IdleBasis::All => {
            let idle_units = u64::from(units).saturating_sub(engaged);
            (idle_sum + idle_units * e2e) / u64::from(units.max(1))
        }
    }
}

/// Mean over processing units of the time not spent running tasks: launch
/// latency, waiting on the other side, and stalls inside one's own phase.
pub fn idle_times(trace: &[TraceRecord], e2e: u64, units: UnitCounts, basis: IdleBasis) -> (u64, u64) {
    let mut host: BTreeMap<u32, Vec<Interval>> = BTreeMap::new();
    let mut ccm: BTreeMap<u32, Vec<Interval>> = BTreeMap::new();
    for r in trace {
        match *r {
            TraceRecord::HostTask { unit, start, end, .. } => {
                host.entry(unit).or_default().push((start.as_ps(), end.as_ps()))
            }
            TraceRecord::CcmTask { unit, start, end, .. } => {
                ccm.entry(unit).or_default().push((start.as_ps(), end.as_ps()))
            }
            _ => {}
        }
    }
    (
        side_idle(host, e2e, units.host, basis),
        side_idle(ccm, e2e, units.ccm, basis),
    )
}

pub fn report(
    trace: &[TraceRecord],
    serialized: bool,
    units: UnitCounts,
    basis: IdleBasis,
) -> Result<MetricsReport, MetricsError> {
    let mut starts: BTreeMap<u32, SimTime> = BTreeMap::new();
    let mut iterations = Vec::new();
    let mut launch = 0;
    let mut poll_ticks = 0;
    let mut poll_cost = 0;
    let mut interrupts = 0;
    for r in trace {
        match *r {
            TraceRecord::IterationStart { iteration, at } => {
                starts.insert(iteration, at);
            }
            TraceRecord::IterationEnd { iteration, at } => {
                let start = starts.remove(&iteration).unwrap_or(SimTime::ZERO);
                iterations.push(IterationSpan {
                    iteration,
                    start,
                    end: at,
                });
            }
            TraceRecord::Launch { start, end, .. } => launch += (end - start).as_ps(),
            TraceRecord::Poll { cost, .. } => {
                poll_ticks += 1;
                poll_cost += cost.as_ps();
            }
            TraceRecord::Interrupt { .. } => interrupts += 1,
            _ => {}
        }
    }
    if let Some((&it, _)) = starts.iter().next() {
        return Err(MetricsError::Incomplete(it));
    }
    let e2e = iterations.iter().map(|i| i.end.as_ps()).max().unwrap_or(0);
    let (t_c, t_d, t_h) = decompose(trace, serialized);
    let (host_idle, ccm_idle) = if iterations.is_empty() {
        (0, 0)
    } else {
        idle_times(trace, e2e, units, basis)
    };
    Ok(MetricsReport {
        e2e_ps: e2e,
        t_c_ps: t_c,
        t_d_ps: t_d,
        t_h_ps: t_h,
        host_idle_ps: host_idle,
        ccm_idle_ps: ccm_idle,
        launch_ps: launch,
        poll_ticks,
        poll_cost_ps: poll_cost,
        interrupts,
        iterations,
    })
}

/// Replay ring snapshots and check the four safety properties plus device
/// head staleness. Returns the number of snapshots checked.
pub fn check_ring_trace(trace: &[TraceRecord]) -> Result<u64, String> {
    let mut prev: Option<[u64; 6]> = None;
    let mut n = 0;
    for r in trace {
        let TraceRecord::RingState {
            at,
            capacity,
            host_payload_head: hp,
            host_meta_head: hm,
            device_payload_head: dp,
            device_meta_head: dm,
            payload_tail: pt,
            meta_tail: mt,
        } = *r
        else {
            continue;
        };
        n += 1;
        let cur = [hp, hm, dp, dm, pt, mt];
        if let Some(p) = prev {
            const NAMES: [&str; 6] = [
                "host payload head",
                "host metadata head",
                "device payload head",
                "device metadata head",
                "payload tail",
                "metadata tail",
            ];
            for i in 0..6 {
                if cur[i] < p[i] {
                    return Err(format!("{} moved backwards at {at}: {} -> {}", NAMES[i], p[i], cur[i]));
                }
            }
        }
        if dp > hp || dm > hm {
            return Err(format!("device head ahead of host head at {at}"));
        }
        if pt < hp || mt < hm {
            return Err(format!("head passed tail at {at}"));
        }
        if pt - hp > capacity || mt - hm > capacity {
            return Err(format!("occupancy above capacity {capacity} at {at}"));
        }
        prev = Some(cur);
    }
    Ok(n)
}

/// One CSV row. Field order is the stable output contract.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CsvRow {
    pub run_id: u32,
    pub mechanism: String,
    pub workload: String,
    pub polling_ps: String,
    pub sf: String,
    pub scheduler: String,
    pub ooo: String,
    pub e2e_ps: u64,
    pub t_c_ps: u64,
    pub t_d_ps: u64,
    pub t_h_ps: u64,
    pub host_idle_ps: u64,
    pub ccm_idle_ps: u64,
    pub norm_vs_baseline: Option<f64>,
}

pub const CSV_HEADER: [&str; 14] = [
    "run_id",
    "mechanism",
    "workload",
    "polling_ps",
    "sf",
    "scheduler",
    "ooo",
    "e2e_ps",
    "t_c_ps",
    "t_d_ps",
    "t_h_ps",
    "host_idle_ps",
    "ccm_idle_ps",
    "norm_vs_baseline",
];

/// Fill `norm_vs_baseline` with e2e over the first `baseline` row of the same
/// workload.
pub fn normalize(rows: &mut [CsvRow], baseline: &str) {
    let mut base: BTreeMap<String, u64> = BTreeMap::new();
    for r in rows.iter() {
        if r.mechanism == baseline {
            base.entry(r.workload.clone()).or_insert(r.e2e_ps);
        }
    }
    for r in rows.iter_mut() {
        r.norm_vs_baseline = base
            .get(&r.workload)
            .filter(|b| **b > 0)
            .map(|b| r.e2e_ps as f64 / *b as f64);
    }
}

pub fn write_csv<W: Write>(out: W, rows: &[CsvRow]) -> Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct Point<'a> {
    run_id: u32,
    workload: &'a str,
    polling_ps: &'a str,
    sf: &'a str,
    scheduler: &'a str,
    ooo: &'a str,
    e2e_ps: u64,
    norm_vs_baseline: Option<f64>,
}

#[derive(Debug, Serialize)]
struct Series<'a> {
    mechanism: &'a str,
    points: Vec<Point<'a>>,
}

/// One series per mechanism, in order of first appearance.
pub fn json_series(rows: &[CsvRow]) -> serde_json::Value {
    let mut series: Vec<Series> = Vec::new();
    for r in rows {
        let idx = match series.iter().position(|s| s.mechanism == r.mechanism) {
            Some(i) => i,
            None => {
                series.push(Series {
                    mechanism: &r.mechanism,
                    points: Vec::new(),
                });
                series.len() - 1
            }
        };
        series[idx].points.push(Point {
            run_id: r.run_id,
            workload: &r.workload,
            polling_ps: &r.polling_ps,
            sf: &r.sf,
            scheduler: &r.scheduler,
            ooo: &r.ooo,
            e2e_ps: r.e2e_ps,
            norm_vs_baseline: r.norm_vs_baseline,
        });
    }
    serde_json::json!({ "series": series })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: u64) -> SimTime {
        SimTime(v)
    }

    fn task(host: bool, unit: u32, s: u64, e: u64) -> TraceRecord {
        if host {
            TraceRecord::HostTask {
                kernel: 0,
                task: 0,
                unit,
                uthread: unit,
                start: t(s),
                end: t(e),
            }
        } else {
            TraceRecord::CcmTask {
                kernel: 0,
                task: 0,
                unit,
                uthread: unit,
                start: t(s),
                end: t(e),
            }
        }
    }

    fn xfer(s: u64, e: u64) -> TraceRecord {
        TraceRecord::Transfer {
            kernel: 0,
            kind: TransferKind::ResultLoad,
            bytes: 64,
            start: t(s),
            end: t(e),
        }
    }

    /// Serialized single iteration: launch 10, C 100, D 20, H 50.
    fn serialized() -> Vec<TraceRecord> {
        vec![
            TraceRecord::IterationStart { iteration: 0, at: t(0) },
            TraceRecord::Launch {
                kernel: 0,
                start: t(0),
                end: t(10),
            },
            task(false, 0, 10, 110),
            task(false, 1, 10, 110),
            xfer(110, 130),
            task(true, 0, 130, 180),
            TraceRecord::IterationEnd {
                iteration: 0,
                at: t(180),
            },
        ]
    }

    const UNITS: UnitCounts = UnitCounts { host: 2, ccm: 2 };

    #[test]
    fn union_and_minus() {
        let u = union(vec![(5, 10), (0, 3), (2, 4), (10, 12)]);
        assert_eq!(u, vec![(0, 4), (5, 12)]);
        assert_eq!(measure(&u), 11);
        assert_eq!(measure_minus(&u, &[(3, 6), (11, 20)]), 11 - 1 - 1 - 1);
    }

    #[test]
    fn serialized_components_sum_to_e2e() {
        let r = report(&serialized(), true, UNITS, IdleBasis::Engaged).unwrap();
        assert_eq!((r.t_c_ps, r.t_d_ps, r.t_h_ps), (100, 20, 50));
        assert_eq!(r.launch_ps + r.t_c_ps + r.t_d_ps + r.t_h_ps, r.e2e_ps);
        assert_eq!(r.host_idle_ps, 130);
        assert_eq!(r.ccm_idle_ps, 80);
    }

    #[test]
    fn overlapped_components_exceed_e2e() {
        let trace = vec![
            TraceRecord::IterationStart { iteration: 0, at: t(0) },
            task(false, 0, 0, 100),
            xfer(20, 110),
            task(true, 0, 40, 120),
            TraceRecord::IterationEnd {
                iteration: 0,
                at: t(120),
            },
        ];
        let r = report(&trace, false, UNITS, IdleBasis::Engaged).unwrap();
        assert!(r.t_c_ps + r.t_d_ps + r.t_h_ps > r.e2e_ps);
        let s = report(&trace, true, UNITS, IdleBasis::Engaged).unwrap();
        assert_eq!(s.t_d_ps, 0);
    }

    #[test]
    fn empty_trace_is_zero() {
        let r = report(&[], true, UNITS, IdleBasis::Engaged).unwrap();
        assert_eq!((r.e2e_ps, r.t_c_ps, r.t_d_ps, r.t_h_ps), (0, 0, 0, 0));
        assert_eq!((r.host_idle_ps, r.ccm_idle_ps), (0, 0));
    }

    #[test]
    fn incomplete_trace_rejected() {
        let trace = vec![TraceRecord::IterationStart { iteration: 0, at: t(0) }];
        assert_eq!(
            report(&trace, true, UNITS, IdleBasis::Engaged),
            Err(MetricsError::Incomplete(0))
        );
    }

    #[test]
    fn all_units_basis_counts_idle_units() {
        let r = report(&serialized(), true, UNITS, IdleBasis::All).unwrap();
        // Host: unit 0 idle 130, unit 1 idle 180.
        assert_eq!(r.host_idle_ps, (130 + 180) / 2);
    }

    #[test]
    fn ratios_scale_invariant() {
        let scaled: Vec<TraceRecord> = serialized()
            .into_iter()
            .map(|r| {
                let s = |x: SimTime| SimTime(x.as_ps() * 1000);
                match r {
                    TraceRecord::CcmTask {
                        kernel,
                        task,
                        unit,
                        uthread,
                        start,
                        end,
                    } => TraceRecord::CcmTask {
                        kernel,
                        task,
                        unit,
                        uthread,
                        start: s(start),
                        end: s(end),
                    },
                    TraceRecord::HostTask {
                        kernel,
                        task,
                        unit,
                        uthread,
                        start,
                        end,
                    } => TraceRecord::HostTask {
                        kernel,
                        task,
                        unit,
                        uthread,
                        start: s(start),
                        end: s(end),
                    },
                    TraceRecord::Transfer {
                        kernel,
                        kind,
                        bytes,
                        start,
                        end,
                    } => TraceRecord::Transfer {
                        kernel,
                        kind,
                        bytes,
                        start: s(start),
                        end: s(end),
                    },
                    other => other,
                }
            })
            .collect();
        let a = report(&serialized(), true, UNITS, IdleBasis::Engaged)
            .unwrap()
            .breakdown();
        let b = report(&scaled, true, UNITS, IdleBasis::Engaged).unwrap().breakdown();
        assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12 && (a.2 - b.2).abs() < 1e-12);
    }

    fn row(id: u32, mech: &str, e2e: u64) -> CsvRow {
        CsvRow {
            run_id: id,
            mechanism: mech.into(),
            workload: "knn".into(),
            polling_ps: "n/a".into(),
            sf: "n/a".into(),
            scheduler: "fifo".into(),
            ooo: "n/a".into(),
            e2e_ps: e2e,
            t_c_ps: 0,
            t_d_ps: 0,
            t_h_ps: 0,
            host_idle_ps: 0,
            ccm_idle_ps: 0,
            norm_vs_baseline: None,
        }
    }

    #[test]
    fn baseline_normalization() {
        let mut rows = vec![row(0, "rp", 200), row(1, "kai", 100)];
        normalize(&mut rows, "rp");
        assert_eq!(rows[1].norm_vs_baseline, Some(0.5));
        assert_eq!(rows[0].norm_vs_baseline, Some(1.0));
    }

    #[test]
    fn empty_csv_is_header_only() {
        let mut buf = Vec::new();
        write_csv(&mut buf, &[]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().trim_end(), CSV_HEADER.join(","));
    }

    #[test]
    fn csv_columns_in_order() {
        let mut buf = Vec::new();
        write_csv(&mut buf, &[row(3, "bs", 7)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let line = text.lines().nth(1).unwrap();
        assert_eq!(line, "3,bs,knn,n/a,n/a,fifo,n/a,7,0,0,0,0,0,");
    }

    #[test]
    fn series_per_mechanism() {
        let rows = vec![row(0, "rp", 1), row(1, "kai", 1), row(2, "rp", 1)];
        let v = json_series(&rows);
        let s = v["series"].as_array().unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0]["points"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn ring_trace_replay() {
        let snap = |hp, dp, pt| TraceRecord::RingState {
            at: t(0),
            capacity: 4,
            host_payload_head: hp,
            host_meta_head: hp,
            device_payload_head: dp,
            device_meta_head: dp,
            payload_tail: pt,
            meta_tail: pt,
        };
        assert_eq!(check_ring_trace(&[snap(0, 0, 2), snap(1, 0, 4), snap(1, 1, 5)]), Ok(3));
        assert!(check_ring_trace(&[snap(0, 1, 2)]).is_err());
        assert!(check_ring_trace(&[snap(0, 0, 5)]).is_err());
        assert!(check_ring_trace(&[snap(1, 0, 2), snap(0, 0, 2)]).is_err());
    }
}
