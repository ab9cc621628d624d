//! Experiment runner: builds models from a config, runs seeded trials under a
//! policy, prices them on the simulated device and writes reports.

mod config;

pub use config::{
    apply_override, parse_override, BalancedSpec, DraftSpec, ExperimentConfig, HardwareSpec, ModelSpec, PolicyName,
};

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::drafting::LatencyProfile;
use crate::error::{Error, Result};
use crate::models::{
    LayeredConfig, LayeredModel, LayeredTargetModel, MixedDraft, ProbModel, TabularConfig, TabularMarkovModel,
    TabularProbe,
};
use crate::predictor::{candidate_agreement, generate_dataset, train, EarlyExitPredictor, LossPoint};
use crate::pruning::PredictorPruner;
use crate::simulator::{seed_profile, simulate_decode, ExecutionPlan, HardwareConfig, Metrics, ScheduleTrace, SimClock};
use crate::tree::TokenId;
use crate::verification::{run_decode, CycleRecord, DecodeOptions, TreePolicy};

pub struct Models {
    pub target: Arc<dyn LayeredModel>,
    pub draft: Arc<MixedDraft>,
}

pub fn build_models(cfg: &ExperimentConfig) -> Result<Models> {
    let target: Arc<dyn LayeredModel> = match &cfg.model {
        ModelSpec::Tabular { vocab_size, order, sharpness, seed, probe_layers, probe_dim, probe_seed } => {
            let table = TabularMarkovModel::new(TabularConfig {
                vocab_size: *vocab_size,
                order: *order,
                sharpness: *sharpness,
                seed: *seed,
            })?;
            Arc::new(TabularProbe::new(Arc::new(table), *probe_layers, *probe_dim, *probe_seed)?)
        }
        ModelSpec::Layered { vocab_size, context, layers, hidden_dim, logit_scale, seed } => {
            Arc::new(LayeredTargetModel::new(LayeredConfig {
                vocab_size: *vocab_size,
                context: *context,
                layers: *layers,
                hidden_dim: *hidden_dim,
                logit_scale: *logit_scale,
                seed: *seed,
            })?)
        }
    };
    let as_prob: Arc<dyn ProbModel> = target.clone();
    let d = &cfg.draft;
    let draft = Arc::new(MixedDraft::new(as_prob, d.alpha, d.noise_order, d.noise_sharpness, d.seed)?);
    Ok(Models { target, draft })
}

/// Seeded prompt for `trial`; each trial draws from its own stream.
pub fn trial_prompt(cfg: &ExperimentConfig, trial: usize) -> Vec<TokenId> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(trial as u64);
    let v = cfg.model.vocab_size();
    (0..cfg.prompt_len).map(|_| rng.random_range(0..v) as TokenId).collect()
}

pub fn digest_tokens(tokens: &[TokenId]) -> String {
    let mut h = Sha256::new();
    for t in tokens {
        h.update(t.to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn geomean(xs: &[f64]) -> f64 {
    if xs.is_empty() || xs.iter().any(|&x| x <= 0.0) {
        return 0.0;
    }
    (xs.iter().map(|x| x.ln()).sum::<f64>() / xs.len() as f64).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub layer: usize,
    pub examples: usize,
    pub epochs: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub agreement_before: f64,
    pub agreement_after: f64,
}

pub struct TrainedPredictor {
    pub predictor: EarlyExitPredictor,
    pub curve: Vec<LossPoint>,
    pub summary: TrainingSummary,
}

/// Trains an early-exit predictor for the config's target and draft pair.
pub fn train_predictor(cfg: &ExperimentConfig, models: &Models) -> Result<TrainedPredictor> {
    let zero = EarlyExitPredictor::for_model(models.target.as_ref(), cfg.train.layer)?;
    let data = generate_dataset(
        models.target.as_ref(),
        models.draft.as_ref(),
        zero.layer,
        cfg.drafting.k,
        cfg.train.examples,
        cfg.model.context_len().max(cfg.prompt_len),
        cfg.train.seed,
    )?;
    let (predictor, curve) = train(&zero, &data, &cfg.train)?;
    let summary = TrainingSummary {
        layer: zero.layer,
        examples: data.len(),
        epochs: cfg.train.epochs,
        initial_loss: curve[0].total,
        final_loss: curve.last().expect("curve has the initial point").total,
        agreement_before: candidate_agreement(&zero, &data),
        agreement_after: candidate_agreement(&predictor, &data),
    };
    Ok(TrainedPredictor { predictor, curve, summary })
}

pub fn execution_plan(policy: PolicyName) -> ExecutionPlan {
    match policy {
        PolicyName::FlashAr => ExecutionPlan::FLASH_AR,
        PolicyName::ChainSd | PolicyName::BalancedTree => ExecutionPlan::BASELINE_SD,
        PolicyName::Lever | PolicyName::LeverNoprune => ExecutionPlan::HYBRID,
    }
}

pub fn tree_policy(cfg: &ExperimentConfig) -> TreePolicy {
    match cfg.policy {
        PolicyName::FlashAr => TreePolicy::RootOnly,
        PolicyName::ChainSd => TreePolicy::Chain { len: cfg.chain_len },
        PolicyName::BalancedTree => {
            TreePolicy::Balanced { branching: cfg.balanced.branching, budget_rows: cfg.balanced.budget_rows }
        }
        PolicyName::Lever | PolicyName::LeverNoprune => TreePolicy::Greedy(cfg.drafting.clone()),
    }
}

pub struct TrialRun {
    pub trial: usize,
    pub prompt: Vec<TokenId>,
    pub tokens: Vec<TokenId>,
    pub records: Vec<CycleRecord>,
    pub trace: ScheduleTrace,
    pub metrics: Metrics,
}

/// Runs one seeded trial. `record_trees` keeps every drafted and pruned tree
/// in the cycle records.
pub fn run_trial(
    cfg: &ExperimentConfig,
    models: &Models,
    hw: &HardwareConfig,
    profile: &LatencyProfile,
    predictor: Option<&EarlyExitPredictor>,
    trial: usize,
    record_trees: bool,
) -> Result<TrialRun> {
    let plan = execution_plan(cfg.policy);
    let pruner = predictor.map(|p| PredictorPruner { model: models.target.as_ref(), predictor: p, cfg: cfg.prune.clone() });
    let clock = SimClock { cfg: hw, plan };
    let mut opts = DecodeOptions::new(tree_policy(cfg), profile.clone());
    opts.draft_ms_init = hw.draft_cpu_ms;
    opts.record_trees = record_trees;
    if matches!(cfg.policy, PolicyName::Lever | PolicyName::LeverNoprune) {
        opts.clock = Some(&clock);
    }
    if let Some(p) = &pruner {
        opts.pruner = Some(p);
        opts.replay_unpruned = true;
    }
    let prompt = trial_prompt(cfg, trial);
    let target: &dyn ProbModel = models.target.as_ref();
    let out = run_decode(target, models.draft.as_ref(), &prompt, cfg.horizon, opts)?;
    let (trace, metrics) = simulate_decode(&out.cycles, hw, plan)?;
    Ok(TrialRun { trial, prompt, tokens: out.tokens, records: out.cycles, trace, metrics })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial: usize,
    pub prompt: Vec<TokenId>,
    pub metrics: Metrics,
    pub prune_rejections: usize,
    /// Verified rows past the early-exit layer over drafted rows.
    pub rows_kept_frac: f64,
    pub output_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub geomean_tokens_per_s: f64,
    pub geomean_speedup_vs_flash_ar: f64,
    pub mean_accepted_len: f64,
    pub mean_target_calls_per_token: f64,
    pub mean_waste_fraction: f64,
}

impl Aggregate {
    pub fn from_trials(trials: &[TrialReport]) -> Self {
        let col = |f: fn(&Metrics) -> f64| trials.iter().map(|t| f(&t.metrics)).collect::<Vec<_>>();
        let mean = |xs: Vec<f64>| if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
        Self {
            geomean_tokens_per_s: geomean(&col(|m| m.tokens_per_s)),
            geomean_speedup_vs_flash_ar: geomean(&col(|m| m.speedup_vs_flash_ar)),
            mean_accepted_len: mean(col(|m| m.mean_accepted_len)),
            mean_target_calls_per_token: mean(col(|m| m.target_calls_per_token)),
            mean_waste_fraction: mean(col(|m| m.waste_fraction)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub experiment: u64,
    pub model: u64,
    pub draft: u64,
    pub train: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub name: String,
    pub policy: PolicyName,
    pub config_hash: String,
    pub seeds: Seeds,
    pub config: ExperimentConfig,
    pub trials: Vec<TrialReport>,
    pub aggregate: Aggregate,
    pub training: Option<TrainingSummary>,
    /// Digest over every trial's output, in trial order.
    pub output_digest: String,
}

pub struct Experiment {
    pub report: Report,
    pub runs: Vec<TrialRun>,
    pub trained: Option<TrainedPredictor>,
}

/// Runs every trial of `cfg`. Trials run on separate threads and are merged
/// in trial order, so the result does not depend on scheduling.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Experiment> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    let hw = cfg.hardware()?;
    cfg.hardware = HardwareSpec::Inline(hw.clone());
    let models = build_models(&cfg)?;
    let profile = seed_profile(&hw, cfg.profile_max_rows, LatencyProfile::DEFAULT_PENALTY)?;

    let mut trained = None;
    let mut loaded = None;
    if cfg.policy.needs_predictor() {
        match &cfg.predictor_checkpoint {
            Some(path) => {
                let p = EarlyExitPredictor::load(Path::new(path))?;
                if p.vocab_size != models.target.vocab_size() || p.hidden_dim != models.target.hidden_dim() {
                    return Err(Error::config(format!("checkpoint {path} does not match the target model")));
                }
                loaded = Some(p);
            }
            None => trained = Some(train_predictor(&cfg, &models)?),
        }
    }
    let predictor = loaded.as_ref().or(trained.as_ref().map(|t| &t.predictor));

    let runs: Vec<TrialRun> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..cfg.trials)
            .map(|i| {
                let (cfg, models, hw, profile) = (&cfg, &models, &hw, &profile);
                s.spawn(move || run_trial(cfg, models, hw, profile, predictor, i, false))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("trial thread panicked")).collect::<Result<_>>()
    })?;

    let trials: Vec<TrialReport> = runs
        .iter()
        .map(|r| {
            let drafted: usize = r.records.iter().map(|c| c.rows).sum();
            let kept: usize = r.records.iter().map(|c| c.rows_after_prune).sum();
            TrialReport {
                trial: r.trial,
                prompt: r.prompt.clone(),
                metrics: r.metrics,
                prune_rejections: r.records.iter().filter(|c| c.prune.as_ref().is_some_and(|p| p.rejected)).count(),
                rows_kept_frac: if drafted > 0 { kept as f64 / drafted as f64 } else { 1.0 },
                output_digest: digest_tokens(&r.tokens),
            }
        })
        .collect();
    let mut all = Sha256::new();
    for r in &runs {
        for t in &r.tokens {
            all.update(t.to_le_bytes());
        }
    }
    let canonical = cfg.canonical_json()?;
    let report = Report {
        name: cfg.name.clone(),
        policy: cfg.policy,
        config_hash: hex::encode(Sha256::digest(canonical.as_bytes())),
        seeds: Seeds { experiment: cfg.seed, model: cfg.model.seed(), draft: cfg.draft.seed, train: cfg.train.seed },
        aggregate: Aggregate::from_trials(&trials),
        trials,
        training: trained.as_ref().map(|t| t.summary.clone()),
        output_digest: hex::encode(all.finalize()),
        config: cfg,
    };
    Ok(Experiment { report, runs, trained })
}

#[derive(Serialize)]
struct TrialRow<'a> {
    trial: usize,
    prompt: String,
    tokens: usize,
    cycles: usize,
    total_ms: f64,
    tokens_per_s: f64,
    mean_accepted_len: f64,
    target_calls_per_token: f64,
    waste_fraction: f64,
    speedup_vs_flash_ar: f64,
    prune_rejections: usize,
    rows_kept_frac: f64,
    output_digest: &'a str,
}

#[derive(Serialize)]
struct TraceRow {
    trial: usize,
    cycle: usize,
    rows: usize,
    leaves: usize,
    rows_after_prune: usize,
    leaves_after_prune: usize,
    accepted_len: usize,
    unpruned_accepted_len: Option<usize>,
    emitted: usize,
    reliability: f64,
    hit: Option<bool>,
    prune_rejected: Option<bool>,
    draft_ms: f64,
    verify_io_ms: f64,
    verify_compute_ms: f64,
    verify_ms: f64,
    projection_ms: f64,
    projections_eager: usize,
    projections_ondemand: usize,
    waste_ms: f64,
}

pub fn report_json(report: &Report) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)? + "\n")
}

pub fn report_csv(report: &Report) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for t in &report.trials {
        let m = &t.metrics;
        w.serialize(TrialRow {
            trial: t.trial,
            prompt: t.prompt.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" "),
            tokens: m.tokens,
            cycles: m.cycles,
            total_ms: m.total_ms,
            tokens_per_s: m.tokens_per_s,
            mean_accepted_len: m.mean_accepted_len,
            target_calls_per_token: m.target_calls_per_token,
            waste_fraction: m.waste_fraction,
            speedup_vs_flash_ar: m.speedup_vs_flash_ar,
            prune_rejections: t.prune_rejections,
            rows_kept_frac: t.rows_kept_frac,
            output_digest: &t.output_digest,
        })?;
    }
    into_string(w)
}

pub fn trace_csv(runs: &[TrialRun]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for run in runs {
        for (rec, cost) in run.records.iter().zip(&run.trace.cycles) {
            w.serialize(TraceRow {
                trial: run.trial,
                cycle: rec.index,
                rows: rec.rows,
                leaves: rec.leaves,
                rows_after_prune: rec.rows_after_prune,
                leaves_after_prune: rec.leaves_after_prune,
                accepted_len: rec.accepted_len,
                unpruned_accepted_len: rec.unpruned_accepted_len,
                emitted: rec.emitted,
                reliability: rec.reliability,
                hit: rec.hit,
                prune_rejected: rec.prune.as_ref().map(|p| p.rejected),
                draft_ms: cost.draft_ms,
                verify_io_ms: cost.verify_io_ms,
                verify_compute_ms: cost.verify_compute_ms,
                verify_ms: cost.verify_ms,
                projection_ms: cost.projection_ms,
                projections_eager: cost.projections_eager,
                projections_ondemand: cost.projections_ondemand,
                waste_ms: cost.waste_ms,
            })?;
        }
    }
    into_string(w)
}

pub fn loss_curve_csv(curve: &[LossPoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in curve {
        w.serialize(p)?;
    }
    into_string(w)
}

fn into_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Writes `report.json`, `report.csv`, `trace.csv` and, when a predictor was
/// trained, `predictor.json` and `loss_curve.csv`.
pub fn write_outputs(exp: &Experiment, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), report_json(&exp.report)?)?;
    std::fs::write(dir.join("report.csv"), report_csv(&exp.report)?)?;
    std::fs::write(dir.join("trace.csv"), trace_csv(&exp.runs)?)?;
    if let Some(t) = &exp.trained {
        t.predictor.save(&dir.join("predictor.json"))?;
        std::fs::write(dir.join("loss_curve.csv"), loss_curve_csv(&t.curve)?)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub policy: PolicyName,
    pub tokens_per_s: f64,
    pub mean_accepted_len: f64,
    pub target_calls_per_token: f64,
    pub speedup_vs_flash_ar: f64,
    /// Throughput relative to the reference policy.
    pub normalized: f64,
    pub output_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub normalized_to: PolicyName,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn row(&self, policy: PolicyName) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.policy == policy)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        into_string(w)
    }
}

fn check_shared(a: &ExperimentConfig, b: &ExperimentConfig) -> Result<()> {
    let mismatch = |field: &str| Err(Error::config(format!("policies disagree on shared field '{field}'")));
    if a.model != b.model {
        return mismatch("model");
    }
    if a.draft != b.draft {
        return mismatch("draft");
    }
    if a.hardware()? != b.hardware()? {
        return mismatch("hardware");
    }
    if a.horizon != b.horizon {
        return mismatch("horizon");
    }
    if a.trials != b.trials || a.seed != b.seed || a.prompt_len != b.prompt_len {
        return mismatch("seeds");
    }
    Ok(())
}

/// Runs each config and tabulates throughput normalized to `normalize_to`.
/// Configs must agree on model, draft, hardware, horizon and seeds.
pub fn compare_policies(cfgs: &[ExperimentConfig], normalize_to: PolicyName) -> Result<(Comparison, Vec<Experiment>)> {
    let first = cfgs.first().ok_or_else(|| Error::config("nothing to compare"))?;
    for c in &cfgs[1..] {
        check_shared(first, c)?;
    }
    if !cfgs.iter().any(|c| c.policy == normalize_to) {
        return Err(Error::config(format!("reference policy {normalize_to} is not among the compared configs")));
    }
    let exps: Vec<Experiment> = cfgs.iter().map(run_experiment).collect::<Result<_>>()?;
    let reference = exps
        .iter()
        .find(|e| e.report.policy == normalize_to)
        .map(|e| e.report.aggregate.geomean_tokens_per_s)
        .expect("checked above");
    let rows = exps
        .iter()
        .map(|e| {
            let a = &e.report.aggregate;
            ComparisonRow {
                policy: e.report.policy,
                tokens_per_s: a.geomean_tokens_per_s,
                mean_accepted_len: a.mean_accepted_len,
                target_calls_per_token: a.mean_target_calls_per_token,
                speedup_vs_flash_ar: a.geomean_speedup_vs_flash_ar,
                normalized: if reference > 0.0 { a.geomean_tokens_per_s / reference } else { 0.0 },
                output_digest: e.report.output_digest.clone(),
            }
        })
        .collect();
    Ok((Comparison { normalized_to: normalize_to, rows }, exps))
}
