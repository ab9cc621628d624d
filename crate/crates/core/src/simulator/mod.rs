//! Deterministic latency model of a DRAM-flash smartphone with a CPU and an
//! NPU. Every action of a decode run is priced from the per-cycle records;
//! nothing here depends on wall-clock time.

mod presets;

pub use presets::{preset, preset_names, PRESETS};

use serde::{Deserialize, Serialize};

use crate::drafting::LatencyProfile;
use crate::error::{Error, Result};
use crate::verification::{CycleClock, CycleMeasurement, CycleRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Overlap {
    /// I/O and compute run back to back.
    Sum,
    /// Layer-wise streaming hides the shorter of the two.
    Max,
}

impl Overlap {
    pub fn combine(self, io: f64, compute: f64) -> f64 {
        match self {
            Overlap::Sum => io + compute,
            Overlap::Max => io.max(compute),
        }
    }
}

/// `compute = c0 + c_row * |T| + c_leaf * L_T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyCompute {
    pub c0: f64,
    pub c_row: f64,
    pub c_leaf: f64,
}

/// Batched NPU draft latency `n0 + n1 * batch`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NpuDraft {
    pub n0: f64,
    pub n1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareConfig {
    pub name: String,
    #[serde(default)]
    pub device: String,
    #[serde(default)]
    pub model: String,
    /// Flash streaming time of one full target pass.
    pub io_ms_per_invocation: f64,
    /// Combination rule for speculative verification. Flash-AR always sums.
    pub overlap: Overlap,
    pub verify_compute: VerifyCompute,
    /// Eager NPU output projection per verified row.
    pub proj_ms_per_row: f64,
    /// On-demand CPU output projection per accepted-path row.
    pub proj_cpu_ms_per_row: f64,
    pub draft_cpu_ms: f64,
    pub draft_npu: NpuDraft,
    pub batch_min: usize,
    /// Fraction of target layers resident in DRAM; scales I/O by `1 - frac`.
    pub dram_resident_frac: f64,
    /// Fraction of verification compute spent before the early-exit layer.
    pub early_exit_frac: f64,
}

impl HardwareConfig {
    pub fn validate(&self) -> Result<()> {
        let c = &self.verify_compute;
        let all = [
            self.io_ms_per_invocation,
            c.c0,
            c.c_row,
            c.c_leaf,
            self.proj_ms_per_row,
            self.proj_cpu_ms_per_row,
            self.draft_cpu_ms,
            self.draft_npu.n0,
            self.draft_npu.n1,
        ];
        if all.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::config(format!("hardware '{}' has a negative or non-finite latency", self.name)));
        }
        if !(0.0..=1.0).contains(&self.dram_resident_frac) {
            return Err(Error::config("hardware.dram_resident_frac must be in [0,1]"));
        }
        if !(0.0..=1.0).contains(&self.early_exit_frac) {
            return Err(Error::config("hardware.early_exit_frac must be in [0,1]"));
        }
        if self.batch_min == 0 {
            return Err(Error::config("hardware.batch_min must be at least 1"));
        }
        Ok(())
    }

    pub fn io_effective(&self) -> f64 {
        (1.0 - self.dram_resident_frac) * self.io_ms_per_invocation
    }

    pub fn compute(&self, rows: usize, leaves: usize) -> f64 {
        let c = &self.verify_compute;
        c.c0 + c.c_row * rows as f64 + c.c_leaf * leaves as f64
    }
}

/// One autoregressive target step, I/O and compute summed.
pub fn ar_step_latency(cfg: &HardwareConfig) -> f64 {
    Overlap::Sum.combine(cfg.io_effective(), cfg.compute(1, 1))
}

pub fn verify_latency(cfg: &HardwareConfig, rows: usize, leaves: usize) -> Result<f64> {
    if rows == 0 || leaves == 0 {
        return Err(Error::contract("verification shape must have rows >= 1 and leaves >= 1"));
    }
    Ok(cfg.overlap.combine(cfg.io_effective(), cfg.compute(rows, leaves)))
}

/// Verification of a tree drafted as `(rows, leaves)` and cut to
/// `(kept, kept_leaves)` at the early-exit layer. All rows run up to the
/// exit layer, only kept rows run past it.
pub fn verify_latency_pruned(
    cfg: &HardwareConfig,
    (rows, leaves): (usize, usize),
    (kept, kept_leaves): (usize, usize),
) -> Result<(f64, f64)> {
    if kept > rows || kept == 0 || leaves == 0 || kept_leaves == 0 {
        return Err(Error::contract("pruned shape must be non-empty and no larger than the drafted shape"));
    }
    let c = &cfg.verify_compute;
    let f = cfg.early_exit_frac;
    let eff_rows = rows as f64 * f + kept as f64 * (1.0 - f);
    let eff_leaves = leaves as f64 * f + kept_leaves as f64 * (1.0 - f);
    let compute = c.c0 + c.c_row * eff_rows + c.c_leaf * eff_leaves;
    Ok((compute, cfg.overlap.combine(cfg.io_effective(), compute)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DraftSchedule {
    /// Every expansion runs alone on the CPU.
    CpuSerial,
    /// Levels with at least `batch_min` ready expansions go to the NPU as a
    /// batch; smaller ones stay on the CPU.
    BatchAware,
}

/// Draft latency for a construction trace given the ready expansions per
/// step.
pub fn draft_schedule(counts: &[usize], cfg: &HardwareConfig, sched: DraftSchedule) -> f64 {
    counts
        .iter()
        .map(|&n| match sched {
            DraftSchedule::BatchAware if n >= cfg.batch_min => cfg.draft_npu.n0 + cfg.draft_npu.n1 * n as f64,
            _ => n as f64 * cfg.draft_cpu_ms,
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    /// All verified rows are projected on the NPU.
    Eager,
    /// Only the accepted path plus the fallback row, on the CPU.
    OnDemand,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionCost {
    pub eager_ms: f64,
    pub ondemand_ms: f64,
    pub waste_rows: usize,
}

pub fn projection_accounting(rows: usize, accepted_len: usize, cfg: &HardwareConfig) -> Result<ProjectionCost> {
    if accepted_len + 1 > rows {
        return Err(Error::contract(format!("accepted_len + 1 = {} exceeds {rows} verified rows", accepted_len + 1)));
    }
    Ok(ProjectionCost {
        eager_ms: rows as f64 * cfg.proj_ms_per_row,
        ondemand_ms: (accepted_len + 1) as f64 * cfg.proj_cpu_ms_per_row,
        waste_rows: rows - (accepted_len + 1),
    })
}

/// How a policy uses the hardware.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    /// Price every cycle as a plain autoregressive step.
    pub autoregressive: bool,
    pub draft: DraftSchedule,
    pub projection: Projection,
}

impl ExecutionPlan {
    pub const FLASH_AR: Self =
        Self { autoregressive: true, draft: DraftSchedule::CpuSerial, projection: Projection::Eager };
    pub const BASELINE_SD: Self =
        Self { autoregressive: false, draft: DraftSchedule::CpuSerial, projection: Projection::Eager };
    pub const HYBRID: Self =
        Self { autoregressive: false, draft: DraftSchedule::BatchAware, projection: Projection::OnDemand };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleCost {
    pub cycle: usize,
    pub rows: usize,
    pub rows_after_prune: usize,
    pub accepted_len: usize,
    pub emitted: usize,
    pub draft_ms: f64,
    pub verify_io_ms: f64,
    pub verify_compute_ms: f64,
    /// Combined I/O and compute after overlap.
    pub verify_ms: f64,
    pub projection_ms: f64,
    pub projections_eager: usize,
    pub projections_ondemand: usize,
    /// Eager projection time spent on rows off the accepted path.
    pub waste_ms: f64,
}

impl CycleCost {
    pub fn total_ms(&self) -> f64 {
        self.draft_ms + self.verify_ms + self.projection_ms
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tokens: usize,
    pub cycles: usize,
    pub total_ms: f64,
    pub tokens_per_s: f64,
    pub mean_accepted_len: f64,
    pub target_calls_per_token: f64,
    pub waste_fraction: f64,
    pub speedup_vs_flash_ar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleTrace {
    pub cycles: Vec<CycleCost>,
    pub draft_ms: f64,
    pub verify_ms: f64,
    pub projection_ms: f64,
    pub waste_ms: f64,
    pub total_ms: f64,
}

pub fn price_cycle(record: &CycleRecord, cfg: &HardwareConfig, plan: ExecutionPlan) -> Result<CycleCost> {
    let io = cfg.io_effective();
    let mut cost = CycleCost {
        cycle: record.index,
        rows: record.rows,
        rows_after_prune: record.rows_after_prune,
        accepted_len: record.accepted_len,
        emitted: record.emitted,
        draft_ms: 0.0,
        verify_io_ms: io,
        verify_compute_ms: 0.0,
        verify_ms: 0.0,
        projection_ms: 0.0,
        projections_eager: 0,
        projections_ondemand: 0,
        waste_ms: 0.0,
    };
    if plan.autoregressive {
        cost.verify_compute_ms = cfg.compute(1, 1);
        cost.verify_ms = ar_step_latency(cfg);
        return Ok(cost);
    }
    cost.draft_ms = draft_schedule(&record.expansions_per_depth, cfg, plan.draft);
    let (compute, verify) = verify_latency_pruned(
        cfg,
        (record.rows, record.leaves),
        (record.rows_after_prune, record.leaves_after_prune),
    )?;
    cost.verify_compute_ms = compute;
    cost.verify_ms = verify;
    let proj = projection_accounting(record.rows_after_prune, record.accepted_len, cfg)?;
    match plan.projection {
        Projection::Eager => {
            cost.projection_ms = proj.eager_ms;
            cost.projections_eager = record.rows_after_prune;
            cost.waste_ms = proj.waste_rows as f64 * cfg.proj_ms_per_row;
        }
        Projection::OnDemand => {
            cost.projection_ms = proj.ondemand_ms;
            cost.projections_ondemand = record.accepted_len + 1;
        }
    }
    Ok(cost)
}

pub fn simulate_decode(
    records: &[CycleRecord],
    cfg: &HardwareConfig,
    plan: ExecutionPlan,
) -> Result<(ScheduleTrace, Metrics)> {
    cfg.validate()?;
    let cycles: Vec<CycleCost> = records.iter().map(|r| price_cycle(r, cfg, plan)).collect::<Result<_>>()?;
    let sum = |f: fn(&CycleCost) -> f64| cycles.iter().map(f).sum::<f64>();
    let draft_ms = sum(|c| c.draft_ms);
    let verify_ms = sum(|c| c.verify_ms);
    let projection_ms = sum(|c| c.projection_ms);
    let waste_ms = sum(|c| c.waste_ms);
    let total_ms = sum(CycleCost::total_ms);
    let tokens: usize = cycles.iter().map(|c| c.emitted).sum();
    let n = cycles.len();
    let tokens_per_s = if total_ms > 0.0 { tokens as f64 * 1000.0 / total_ms } else { 0.0 };
    let ar_tps = 1000.0 / ar_step_latency(cfg);
    let metrics = Metrics {
        tokens,
        cycles: n,
        total_ms,
        tokens_per_s,
        mean_accepted_len: if n > 0 { cycles.iter().map(|c| c.accepted_len).sum::<usize>() as f64 / n as f64 } else { 0.0 },
        target_calls_per_token: if tokens > 0 { n as f64 / tokens as f64 } else { 0.0 },
        waste_fraction: if verify_ms + projection_ms > 0.0 { waste_ms / (verify_ms + projection_ms) } else { 0.0 },
        speedup_vs_flash_ar: tokens_per_s / ar_tps,
    };
    Ok((ScheduleTrace { cycles, draft_ms, verify_ms, projection_ms, waste_ms, total_ms }, metrics))
}

/// Offline verification profile over every shape up to `max_rows`, as the
/// hardware would measure it with no pruning.
pub fn seed_profile(cfg: &HardwareConfig, max_rows: usize, penalty: f64) -> Result<LatencyProfile> {
    LatencyProfile::from_fn(max_rows, penalty, |r, l| cfg.overlap.combine(cfg.io_effective(), cfg.compute(r, l)))
}

/// Feeds priced cycles back into the drafter's online statistics.
pub struct SimClock<'a> {
    pub cfg: &'a HardwareConfig,
    pub plan: ExecutionPlan,
}

impl CycleClock for SimClock<'_> {
    fn measure(&self, record: &CycleRecord) -> Result<CycleMeasurement> {
        let cost = price_cycle(record, self.cfg, self.plan)?;
        let expansions: usize = record.expansions_per_depth.iter().sum();
        Ok(CycleMeasurement {
            draft_ms_per_expansion: (expansions > 0).then(|| cost.draft_ms / expansions as f64),
            verify_ms: cost.verify_ms,
        })
    }
}

/// Solves for the eager projection rate and compute offset that make a set of
/// fixed-shape cycles average `verify_ms` per cycle with `waste_ms` of it
/// spent on rows off the accepted path. I/O is assumed fully hidden or absent.
pub fn calibrate_projection(
    records: &[CycleRecord],
    base: &HardwareConfig,
    verify_ms: f64,
    waste_ms: f64,
) -> Result<HardwareConfig> {
    if records.is_empty() {
        return Err(Error::contract("calibration needs at least one cycle"));
    }
    let n = records.len() as f64;
    let waste_rows = records.iter().map(|r| (r.rows_after_prune - (r.accepted_len + 1)) as f64).sum::<f64>() / n;
    if waste_rows <= 0.0 {
        return Err(Error::contract("calibration cycles have no wasted rows"));
    }
    let rate = waste_ms / waste_rows;
    let mut cfg = base.clone();
    cfg.proj_ms_per_row = rate;
    cfg.dram_resident_frac = 1.0;
    // Shift c0 so that compute plus eager projection hits the target on average.
    let mean_compute = records.iter().map(|r| cfg.compute(r.rows_after_prune, r.leaves_after_prune)).sum::<f64>() / n;
    let mean_proj = records.iter().map(|r| r.rows_after_prune as f64 * rate).sum::<f64>() / n;
    cfg.verify_compute.c0 += verify_ms - mean_proj - mean_compute;
    if cfg.verify_compute.c0 < 0.0 {
        return Err(Error::config("calibration target is below the compute floor"));
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn llama() -> HardwareConfig {
        preset("oneplus12-llama3.1-8b").unwrap()
    }

    #[test]
    fn ar_anchor() {
        assert!((ar_step_latency(&llama()) - 1083.8).abs() < 1e-6);
        let mut cfg = llama();
        cfg.dram_resident_frac = 1.0;
        assert!((ar_step_latency(&cfg) - 93.2).abs() < 1e-6);
    }

    #[test]
    fn verify_rules() {
        let mut cfg = llama();
        cfg.overlap = Overlap::Sum;
        assert!((verify_latency(&cfg, 1, 1).unwrap() - ar_step_latency(&cfg)).abs() < 1e-9);
        let d = verify_latency(&cfg, 32, 3).unwrap() - verify_latency(&cfg, 16, 1).unwrap();
        assert!((d - (16.0 * cfg.verify_compute.c_row + 2.0 * cfg.verify_compute.c_leaf)).abs() < 1e-9);
        cfg.overlap = Overlap::Max;
        cfg.verify_compute = VerifyCompute { c0: 400.0, c_row: 0.0, c_leaf: 0.0 };
        assert_eq!(verify_latency(&cfg, 4, 1).unwrap(), 990.6);
    }

    #[test]
    fn thirty_two_rows_cost_twice_one() {
        let cfg = llama();
        assert!((cfg.compute(32, 1) / cfg.compute(1, 1) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn draft_schedule_cases() {
        let cfg = llama();
        assert_eq!(draft_schedule(&[1, 1, 1], &cfg, DraftSchedule::BatchAware), 24.0);
        assert_eq!(draft_schedule(&[6], &cfg, DraftSchedule::BatchAware), 12.0 + 9.0);
        assert_eq!(draft_schedule(&[6], &cfg, DraftSchedule::CpuSerial), 48.0);
    }

    #[test]
    fn projection_counts() {
        let cfg = llama();
        let p = projection_accounting(16, 3, &cfg).unwrap();
        assert_eq!(p.waste_rows, 12);
        assert_eq!(p.eager_ms, 16.0 * cfg.proj_ms_per_row);
        assert_eq!(p.ondemand_ms, 4.0 * cfg.proj_cpu_ms_per_row);
        assert_eq!(projection_accounting(16, 15, &cfg).unwrap().waste_rows, 0);
        assert!(projection_accounting(4, 4, &cfg).is_err());
    }

    #[test]
    fn pruned_pricing_reduces_to_full() {
        let cfg = llama();
        let (c, _) = verify_latency_pruned(&cfg, (10, 3), (10, 3)).unwrap();
        assert!((c - cfg.compute(10, 3)).abs() < 1e-9);
        let (c2, _) = verify_latency_pruned(&cfg, (10, 3), (5, 2)).unwrap();
        assert!(c2 < c);
    }

    #[test]
    fn validation() {
        let mut cfg = llama();
        cfg.dram_resident_frac = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = llama();
        cfg.draft_cpu_ms = -1.0;
        assert!(cfg.validate().is_err());
    }
}
