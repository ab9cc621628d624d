use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flashspec::drafting::LatencyProfile;
use flashspec::harness::{
    compare_policies, loss_curve_csv, parse_override, run_experiment, train_predictor, write_outputs, build_models,
    ExperimentConfig, PolicyName,
};
use flashspec::simulator::{preset, preset_names, seed_profile};
use flashspec::Result;

#[derive(Parser)]
#[command(name = "flashspec", version, about = "Speculative decoding engine with a flash-backed phone simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON). A previous report.json also works.
    #[arg(long)]
    config: PathBuf,
    /// Override the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Hardware preset name.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dotted override, e.g. `--set drafting.k=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write report.json, report.csv and trace.csv.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: Option<String>,
    },
    /// Run several policies on the same setup and tabulate them.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated policy names.
        #[arg(long, default_value = "flash_ar,chain_sd,balanced_tree,lever,lever_noprune")]
        policies: String,
        #[arg(long, default_value = "lever")]
        normalize_to: String,
    },
    /// Train an early-exit predictor and write the checkpoint and loss curve.
    TrainPredictor {
        #[command(flatten)]
        common: Common,
    },
    /// Build or inspect latency profiles.
    Profile {
        #[command(subcommand)]
        action: ProfileAction,
    },
}

#[derive(Subcommand)]
enum ProfileAction {
    /// Seed a profile from a hardware preset.
    Build {
        #[arg(long)]
        preset: String,
        #[arg(long, default_value_t = 64)]
        max_rows: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a profile, or query one shape.
    Inspect {
        #[arg(long)]
        file: PathBuf,
        /// `rows,leaves`
        #[arg(long)]
        shape: Option<String>,
        #[arg(long, default_value_t = LatencyProfile::DEFAULT_PENALTY)]
        penalty: f64,
    },
    /// List shipped hardware presets.
    Presets,
}

fn load(common: &Common, policy: Option<&str>) -> Result<ExperimentConfig> {
    let mut overrides = Vec::new();
    if let Some(p) = &common.preset {
        overrides.push(("hardware".to_string(), p.clone()));
    }
    if let Some(s) = common.seed {
        overrides.push(("seed".to_string(), s.to_string()));
    }
    if let Some(p) = policy {
        overrides.push(("policy".to_string(), p.to_string()));
    }
    for s in &common.set {
        overrides.push(parse_override(s)?);
    }
    ExperimentConfig::load(&common.config, &overrides)
}

fn out_dir(common: &Common, cfg: &ExperimentConfig) -> PathBuf {
    common.out.clone().or_else(|| cfg.out_dir.as_ref().map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("out"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { common, policy } => {
            let cfg = load(&common, policy.as_deref())?;
            let exp = run_experiment(&cfg)?;
            let dir = out_dir(&common, &cfg);
            write_outputs(&exp, &dir)?;
            let a = &exp.report.aggregate;
            println!(
                "{}: {:.4} tok/s, speedup {:.3}x, accepted {:.3}/cycle -> {}",
                exp.report.policy,
                a.geomean_tokens_per_s,
                a.geomean_speedup_vs_flash_ar,
                a.mean_accepted_len,
                dir.display()
            );
        }
        Command::Compare { common, policies, normalize_to } => {
            let base = load(&common, None)?;
            let mut cfgs = Vec::new();
            for p in policies.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                let mut c = base.clone();
                c.policy = p.parse()?;
                cfgs.push(c);
            }
            let (table, exps) = compare_policies(&cfgs, normalize_to.parse::<PolicyName>()?)?;
            let dir = out_dir(&common, &base);
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join("compare.csv"), table.to_csv()?)?;
            std::fs::write(dir.join("compare.json"), serde_json::to_string_pretty(&table)? + "\n")?;
            for e in &exps {
                write_outputs(e, &dir.join(e.report.policy.as_str()))?;
            }
            println!("{:<14} {:>10} {:>9} {:>11} {:>9} {:>10}", "policy", "tok/s", "accepted", "calls/tok", "vs AR", "normalized");
            for r in &table.rows {
                println!(
                    "{:<14} {:>10.4} {:>9.3} {:>11.3} {:>9.3} {:>10.3}",
                    r.policy.as_str(),
                    r.tokens_per_s,
                    r.mean_accepted_len,
                    r.target_calls_per_token,
                    r.speedup_vs_flash_ar,
                    r.normalized
                );
            }
        }
        Command::TrainPredictor { common } => {
            let cfg = load(&common, None)?;
            let models = build_models(&cfg)?;
            let t = train_predictor(&cfg, &models)?;
            let dir = out_dir(&common, &cfg);
            std::fs::create_dir_all(&dir)?;
            t.predictor.save(&dir.join("predictor.json"))?;
            std::fs::write(dir.join("loss_curve.csv"), loss_curve_csv(&t.curve)?)?;
            let s = &t.summary;
            println!(
                "layer {}: loss {:.5} -> {:.5}, candidate agreement {:.3} -> {:.3}",
                s.layer, s.initial_loss, s.final_loss, s.agreement_before, s.agreement_after
            );
        }
        Command::Profile { action } => match action {
            ProfileAction::Build { preset: name, max_rows, out } => {
                let hw = preset(&name)?;
                seed_profile(&hw, max_rows, LatencyProfile::DEFAULT_PENALTY)?.save(&out)?;
                println!("wrote {} shapes to {}", max_rows * (max_rows + 1) / 2, out.display());
            }
            ProfileAction::Inspect { file, shape, penalty } => inspect(&file, shape.as_deref(), penalty)?,
            ProfileAction::Presets => {
                for n in preset_names() {
                    println!("{n}");
                }
            }
        },
    }
    Ok(())
}

fn inspect(file: &Path, shape: Option<&str>, penalty: f64) -> Result<()> {
    let p = LatencyProfile::load(file, penalty)?;
    match shape {
        Some(s) => {
            let (r, l) = s
                .split_once(',')
                .and_then(|(r, l)| Some((r.trim().parse().ok()?, l.trim().parse().ok()?)))
                .ok_or_else(|| flashspec::Error::Config(format!("shape '{s}' is not rows,leaves")))?;
            println!("{:.3}", p.estimate((r, l))?);
        }
        None => {
            println!("rows,leaves,ms");
            for t in p.triples() {
                println!("{},{},{}", t.0, t.1, t.2);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
