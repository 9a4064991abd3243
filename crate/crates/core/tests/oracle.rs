mod common;

use ccmsim::host::Mechanism;
use ccmsim::simulation::SimConfig;
use ccmsim::workloads::{CcmTask, HostTask, Iteration, Kernel, TaskGraph, ALL_PRESETS, EVAL_PRESETS};
use common::*;
use proptest::prelude::*;

#[test]
fn bs_presets_match_closed_form() {
    let cfg = SimConfig::new(Mechanism::Bs);
    for name in EVAL_PRESETS {
        let g = graph(name);
        let expect: u64 = bs_oracle(&g, &cfg).iter().map(Phases::total).sum();
        let out = run_cfg(&g, &cfg);
        let err = rel_err(e2e(&out), expect as f64);
        assert!(
            err < 0.01,
            "{name}: sim {} vs oracle {expect} ({:.3}%)",
            out.report.e2e_ps,
            err * 100.0
        );
    }
}

#[test]
fn bs_phase_breakdown_matches_closed_form() {
    let cfg = SimConfig::new(Mechanism::Bs);
    for name in EVAL_PRESETS {
        let g = graph(name);
        let phases = bs_oracle(&g, &cfg);
        let r = run_cfg(&g, &cfg).report;
        let sum = |f: fn(&Phases) -> u64| phases.iter().map(f).sum::<u64>() as f64;
        for (label, got, want) in [
            ("T_C", r.t_c_ps, sum(|p| p.compute)),
            ("T_D", r.t_d_ps, sum(|p| p.data)),
            ("T_H", r.t_h_ps, sum(|p| p.host)),
        ] {
            assert!(rel_err(got as f64, want) < 0.01, "{name} {label}: {got} vs {want}");
        }
    }
}

#[test]
fn bs_idle_times_follow_the_serialized_identity() {
    for name in EVAL_PRESETS {
        let r = run(&graph(name), Mechanism::Bs).report;
        let host_wait = (r.t_c_ps + r.t_d_ps) as f64;
        let ccm_wait = (r.t_d_ps + r.t_h_ps) as f64;
        assert!(
            rel_err(r.host_idle_ps as f64, host_wait) < 0.05,
            "{name} host idle {r:?}"
        );
        assert!(rel_err(r.ccm_idle_ps as f64, ccm_wait) < 0.05, "{name} ccm idle {r:?}");
    }
}

#[test]
fn every_run_keeps_ring_invariants() {
    for name in ALL_PRESETS {
        let g = graph(name);
        for m in [Mechanism::Kai, Mechanism::KaiInterrupt] {
            let out = run(&g, m);
            let n = ccmsim::metrics::check_ring_trace(&out.trace).unwrap();
            assert!(n > 0, "{name} {m}: no ring snapshots");
        }
    }
}

fn small_graph(ccm: Vec<(u64, u64)>, host: Vec<u64>, iterations: usize) -> TaskGraph {
    let n = ccm.len() as u64;
    let tasks: Vec<CcmTask> = ccm
        .iter()
        .enumerate()
        .map(|(i, &(c, r))| CcmTask {
            offset: i as u64 * 4,
            compute_ps: c,
            result_bytes: 4,
            ready_ps: r,
        })
        .collect();
    let host_tasks = host
        .iter()
        .enumerate()
        .map(|(i, &c)| HostTask {
            id: i,
            depends_on: 0..n * 4,
            compute_ps: c,
            after: None,
        })
        .collect();
    let it = Iteration {
        kernel: Kernel {
            tasks,
            result_bytes_total: n * 4,
        },
        host_tasks,
    };
    TaskGraph {
        name: "random".into(),
        iterations: vec![it; iterations],
        dependent: true,
        host_units_override: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bs_random_graphs_match_closed_form_exactly(
        ccm in prop::collection::vec((1u64..5_000_000, 0u64..2_000_000), 1..600),
        host in prop::collection::vec(1u64..3_000_000, 1..150),
        iterations in 1usize..4,
        ccm_units in 1u32..4,
    ) {
        let all_ready = ccm.iter().all(|&(_, r)| r == 0);
        let g = small_graph(ccm, host, iterations);
        let mut cfg = SimConfig::new(Mechanism::Bs);
        cfg.ccm.n_units = ccm_units;
        let expect: u64 = bs_oracle(&g, &cfg).iter().map(Phases::total).sum();
        let out = run_cfg(&g, &cfg);
        prop_assert_eq!(out.report.e2e_ps, expect);
        // Waiting for late inputs is neither compute nor transfer.
        let r = &out.report;
        let phases = r.launch_ps + r.t_c_ps + r.t_d_ps + r.t_h_ps;
        prop_assert!(phases <= r.e2e_ps);
        if all_ready {
            prop_assert_eq!(phases, r.e2e_ps);
        }
    }

    #[test]
    fn bs_without_input_delays_is_exactly_serialized(
        ccm in prop::collection::vec(1u64..5_000_000, 1..600),
        host in prop::collection::vec(1u64..3_000_000, 1..150),
        iterations in 1usize..4,
    ) {
        let g = small_graph(ccm.into_iter().map(|c| (c, 0)).collect(), host, iterations);
        let r = run(&g, Mechanism::Bs).report;
        prop_assert_eq!(r.launch_ps + r.t_c_ps + r.t_d_ps + r.t_h_ps, r.e2e_ps);
    }

    #[test]
    fn streamed_runs_finish_and_keep_ring_invariants(
        ccm in prop::collection::vec((1u64..2_000_000, 0u64..1_000_000), 8..400),
        host in prop::collection::vec(1u64..500_000, 1..40),
        sf in 1u64..9,
        ooo: bool,
    ) {
        let g = small_graph(ccm, host, 2);
        for m in [Mechanism::Kai, Mechanism::KaiInterrupt] {
            let mut cfg = SimConfig::new(m);
            cfg.ccm.streaming_factor = sf;
            cfg.ccm.ooo_streaming = ooo;
            let out = run_cfg(&g, &cfg);
            prop_assert!(out.report.t_c_ps <= out.report.e2e_ps);
            prop_assert!(ccmsim::metrics::check_ring_trace(&out.trace).is_ok());
        }
    }
}
