use std::sync::Arc;

use flashspec::drafting::DraftConfig;
use flashspec::models::{MixedDraft, ProbModel, TabularConfig, TabularMarkovModel};
use flashspec::simulator::{
    ar_step_latency, draft_schedule, preset, preset_names, price_cycle, projection_accounting, seed_profile,
    simulate_decode, verify_latency, verify_latency_pruned, DraftSchedule, ExecutionPlan, HardwareConfig, Overlap,
};
use flashspec::verification::{run_decode, CycleRecord, DecodeOptions, TreePolicy};
use proptest::prelude::*;

/// (preset, compute, io, total) as tabulated for the flash-backed phone.
const TABLE: [(&str, f64, f64, f64); 4] = [
    ("oneplus12-llama3.1-8b", 93.2, 990.6, 1083.8),
    ("oneplus12-qwen3-4b", 131.5, 474.4, 605.9),
    ("oneplus12-qwen3-8b", 96.6, 953.4, 1050.0),
    ("oneplus12-qwen3-14b", 141.2, 1967.1, 2108.3),
];

fn llama() -> HardwareConfig {
    preset("oneplus12-llama3.1-8b").unwrap()
}

fn records(policy: TreePolicy, alpha: f64, horizon: usize) -> Vec<CycleRecord> {
    let target = Arc::new(TabularMarkovModel::new(TabularConfig { vocab_size: 24, order: 2, sharpness: 2.0, seed: 4 }).unwrap());
    let draft = MixedDraft::new(target.clone() as Arc<dyn ProbModel>, alpha, 1, 2.0, 5).unwrap();
    let opts = DecodeOptions::new(policy, seed_profile(&llama(), 64, 1.1).unwrap());
    run_decode(target.as_ref(), &draft, &[1, 2], horizon, opts).unwrap().cycles
}

#[test]
fn table_anchors_for_every_preset() {
    assert_eq!(preset_names().count(), TABLE.len());
    for (name, compute, io, total) in TABLE {
        let cfg = preset(name).unwrap();
        assert!((cfg.compute(1, 1) - compute).abs() < 1e-6, "{name}");
        assert_eq!(cfg.io_ms_per_invocation, io);
        let ar = ar_step_latency(&cfg);
        assert!((ar - total).abs() <= total * 1e-3, "{name}: {ar}");
        let mut sum = cfg.clone();
        sum.overlap = Overlap::Sum;
        assert!((verify_latency(&sum, 1, 1).unwrap() - ar).abs() < 1e-9);
    }
}

#[test]
fn thirty_two_rows_double_compute() {
    for (name, ..) in TABLE {
        let cfg = preset(name).unwrap();
        let ratio = cfg.compute(32, 1) / cfg.compute(1, 1);
        assert!((ratio - 2.0).abs() < 1e-6, "{name}: {ratio}");
    }
}

#[test]
fn worked_examples() {
    let mut cfg = llama();
    cfg.io_ms_per_invocation = 0.0;
    assert!((ar_step_latency(&cfg) - 93.2).abs() < 1e-6);
    let mut cfg = llama();
    cfg.overlap = Overlap::Max;
    cfg.verify_compute.c0 = 400.0 - cfg.verify_compute.c_row - cfg.verify_compute.c_leaf;
    assert!((verify_latency(&cfg, 1, 1).unwrap() - 990.6).abs() < 1e-9);
    cfg.dram_resident_frac = 0.5;
    assert!((verify_latency(&cfg, 1, 1).unwrap() - 495.3).abs() < 1e-9);

    cfg.batch_min = 4;
    assert_eq!(draft_schedule(&[1, 1, 1], &cfg, DraftSchedule::BatchAware), 3.0 * cfg.draft_cpu_ms);
    assert_eq!(draft_schedule(&[6], &cfg, DraftSchedule::BatchAware), cfg.draft_npu.n0 + 6.0 * cfg.draft_npu.n1);
    assert_eq!(draft_schedule(&[6], &cfg, DraftSchedule::CpuSerial), 6.0 * cfg.draft_cpu_ms);

    let p = projection_accounting(16, 3, &cfg).unwrap();
    assert_eq!(p.waste_rows, 12);
    assert!((p.eager_ms - 16.0 * cfg.proj_ms_per_row).abs() < 1e-9);
    assert!((p.ondemand_ms - 4.0 * cfg.proj_cpu_ms_per_row).abs() < 1e-9);
    assert_eq!(projection_accounting(16, 15, &cfg).unwrap().waste_rows, 0);
    assert!(projection_accounting(4, 4, &cfg).is_err());
}

proptest! {
    #[test]
    fn draft_schedule_matches_case_analysis(counts in prop::collection::vec(0usize..12, 0..10), bmin in 1usize..8) {
        let mut cfg = llama();
        cfg.batch_min = bmin;
        let mut want = 0.0;
        for &c in &counts {
            if c < bmin {
                want += c as f64 * cfg.draft_cpu_ms;
            } else {
                want += cfg.draft_npu.n0 + cfg.draft_npu.n1 * c as f64;
            }
        }
        prop_assert!((draft_schedule(&counts, &cfg, DraftSchedule::BatchAware) - want).abs() < 1e-9);
    }

    #[test]
    fn affine_difference(rows in 1usize..64, extra in 0usize..32, l1 in 1usize..8, l2 in 1usize..8) {
        let mut cfg = llama();
        cfg.overlap = Overlap::Sum;
        let c = cfg.verify_compute;
        let d = verify_latency(&cfg, rows + extra, l2).unwrap() - verify_latency(&cfg, rows, l1).unwrap();
        prop_assert!((d - (extra as f64 * c.c_row + (l2 as f64 - l1 as f64) * c.c_leaf)).abs() < 1e-9);
    }

    #[test]
    fn pruned_pricing_interpolates(rows in 2usize..40, kept_frac in 0.0f64..1.0, f in 0.0f64..1.0) {
        let mut cfg = llama();
        cfg.early_exit_frac = f;
        let kept = 1 + ((rows - 1) as f64 * kept_frac) as usize;
        let (full, _) = verify_latency_pruned(&cfg, (rows, 2), (rows, 2)).unwrap();
        prop_assert!((full - cfg.compute(rows, 2)).abs() < 1e-9);
        let (cut, _) = verify_latency_pruned(&cfg, (rows, 2), (kept, 1)).unwrap();
        prop_assert!(cut <= full + 1e-9);
        prop_assert!(cut >= cfg.compute(kept, 1) - 1e-9);
    }
}

#[test]
fn flash_ar_throughput() {
    let recs = records(TreePolicy::RootOnly, 0.5, 40);
    let (trace, m) = simulate_decode(&recs, &llama(), ExecutionPlan::FLASH_AR).unwrap();
    assert_eq!(m.tokens, 40);
    assert!((m.tokens_per_s - 1000.0 / 1083.8).abs() < 1e-9);
    assert!((m.tokens_per_s - 0.9227).abs() < 5e-5);
    assert!((m.speedup_vs_flash_ar - 1.0).abs() < 1e-12);
    assert_eq!(trace.draft_ms, 0.0);
}

#[test]
fn trace_conserves_time() {
    for (policy, plan) in [
        (TreePolicy::Chain { len: 8 }, ExecutionPlan::BASELINE_SD),
        (TreePolicy::Balanced { branching: 2, budget_rows: 16 }, ExecutionPlan::BASELINE_SD),
        (TreePolicy::Greedy(DraftConfig::default()), ExecutionPlan::HYBRID),
    ] {
        let recs = records(policy, 0.6, 64);
        let (trace, m) = simulate_decode(&recs, &llama(), plan).unwrap();
        let parts: f64 = trace.cycles.iter().map(|c| c.draft_ms + c.verify_ms + c.projection_ms).sum();
        assert!((trace.total_ms - parts).abs() < 1e-9 * parts);
        assert!((trace.total_ms - (trace.draft_ms + trace.verify_ms + trace.projection_ms)).abs() < 1e-9 * parts);
        assert!((m.tokens_per_s - m.tokens as f64 * 1000.0 / trace.total_ms).abs() < 1e-12);
        assert_eq!(m.cycles, recs.len());
        for (c, r) in trace.cycles.iter().zip(&recs) {
            assert_eq!(*c, price_cycle(r, &llama(), plan).unwrap());
            match plan.projection {
                flashspec::simulator::Projection::OnDemand => {
                    assert_eq!(c.projections_ondemand, r.accepted_len + 1);
                    assert_eq!(c.projections_eager, 0);
                }
                flashspec::simulator::Projection::Eager => {
                    assert_eq!(c.projections_eager, r.rows_after_prune);
                    assert_eq!(c.projections_ondemand, 0);
                }
            }
        }
    }
}

#[test]
fn throughput_is_monotone_in_costs() {
    let recs = records(TreePolicy::Greedy(DraftConfig::default()), 0.6, 64);
    let base = llama();
    let tps = |cfg: &HardwareConfig| simulate_decode(&recs, cfg, ExecutionPlan::HYBRID).unwrap().1.tokens_per_s;
    let t0 = tps(&base);
    let mut c = base.clone();
    c.io_ms_per_invocation *= 2.0;
    assert!(tps(&c) < t0);
    for bump in 0..3 {
        let mut c = base.clone();
        match bump {
            0 => c.verify_compute.c0 += 2000.0,
            1 => c.verify_compute.c_row += 100.0,
            _ => c.verify_compute.c_leaf += 300.0,
        }
        assert!(tps(&c) <= t0);
    }
    let mut sum = base.clone();
    sum.overlap = Overlap::Sum;
    let mut more_io = sum.clone();
    more_io.io_ms_per_invocation *= 2.0;
    assert!(tps(&more_io) < tps(&sum));
}

#[test]
fn profile_seed_matches_pricing() {
    let cfg = llama();
    let p = seed_profile(&cfg, 32, 1.1).unwrap();
    for (r, l) in [(1, 1), (8, 3), (32, 32), (17, 9)] {
        assert!((p.estimate((r, l)).unwrap() - verify_latency(&cfg, r, l).unwrap()).abs() < 1e-9);
    }
}

#[test]
fn invalid_hardware_is_rejected() {
    let mut c = llama();
    c.io_ms_per_invocation = -1.0;
    assert!(c.validate().is_err());
    let mut c = llama();
    c.dram_resident_frac = 1.5;
    assert!(c.validate().is_err());
    let mut c = llama();
    c.batch_min = 0;
    assert!(c.validate().is_err());
    assert!(preset("nope").is_err());
    assert!(verify_latency(&llama(), 0, 1).is_err());
}
