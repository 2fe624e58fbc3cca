use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{Parser, Subcommand};

use scda::io::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use scda::io::config::{load_config, ExperimentConfig};
use scda::io::lock::RunDirLock;
use scda::io::metrics::write_metrics;
use scda::io::report::{write_eval, write_report, EvalRow};
use scda::orchestrator::{self, fisher_analysis, Strategy};

#[derive(Parser)]
#[command(
    name = "scda",
    version,
    about = "Safe continual domain adaptation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy on the randomized domain and store it with its Fisher diagonal.
    Pretrain {
        /// Experiment config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a pretrained policy target by target under one strategy.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, ignore_case = true, value_parser = strategy_parser())]
        strategy: Strategy,
        /// Domain profile name from the config.
        #[arg(long)]
        domain: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Deterministic evaluation of one or more checkpoints.
    Eval {
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        /// `all` or a single target id.
        #[arg(long, default_value = "all")]
        targets: String,
        /// Domain profile; the config's evaluation profile by default.
        #[arg(long)]
        domain: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fisher importance against relative parameter change between two checkpoints.
    Fisher {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
        /// Parameter block; the weights into the output layer by default.
        #[arg(long)]
        block: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate metrics and evaluations below a directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain, adapt under every strategy, evaluate and report for every seed in the config.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output root; the config's output_dir by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn strategy_parser() -> impl TypedValueParser<Value = Strategy> {
    PossibleValuesParser::new(Strategy::ALL.map(Strategy::label))
        .map(|s| Strategy::from_str(&s).expect("listed strategy"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Pretrain { config, seed, out } => {
            let cfg = read_config(config.as_deref())?;
            let _lock = RunDirLock::acquire(&out)?;
            pretrain(&cfg, seed, &out)?;
        }
        Command::Adapt {
            checkpoint,
            strategy,
            domain,
            seed,
            out,
        } => {
            let ckpt = load_checkpoint(&checkpoint)
                .with_context(|| format!("loading {}", checkpoint.display()))?;
            let cfg = checkpoint_config(&ckpt)?;
            let _lock = RunDirLock::acquire(&out)?;
            adapt(&ckpt, &cfg, strategy, &domain, seed, &out)?;
        }
        Command::Eval {
            checkpoint,
            targets,
            domain,
            out,
        } => {
            let _lock = RunDirLock::acquire(&out)?;
            let mut rows = Vec::new();
            for path in &checkpoint {
                let ckpt =
                    load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
                rows.extend(eval(&ckpt, &targets, domain.as_deref())?);
            }
            let path = out.join("eval.csv");
            write_eval(&rows, &path)?;
            for r in &rows {
                println!(
                    "{} target {}: reward {:.4} cost {:.4} total {:.4}",
                    r.run_id, r.target_id, r.episode_reward, r.episode_cost, r.total
                );
            }
            eprintln!("wrote {}", path.display());
        }
        Command::Fisher {
            before,
            after,
            block,
            out,
        } => {
            let b = load_checkpoint(&before)
                .with_context(|| format!("loading {}", before.display()))?;
            let a =
                load_checkpoint(&after).with_context(|| format!("loading {}", after.display()))?;
            let _lock = RunDirLock::acquire(&out)?;
            let analysis = fisher_analysis(&b, &a.policy.flat_params(), block.as_deref())?;
            let mut w = csv::Writer::from_path(out.join("fisher.csv"))?;
            w.write_record(["param_id", "fisher", "relative_change"])?;
            for r in &analysis.rows {
                w.write_record([
                    r.param_id.to_string(),
                    format!("{:.9e}", r.fisher),
                    format!("{:.9e}", r.relative_change),
                ])?;
            }
            w.flush()?;
            let summary = format!(
                "block = {}\nparameters = {}\nspearman = {:.6}\n",
                analysis.block,
                analysis.rows.len(),
                analysis.spearman
            );
            fs::write(out.join("fisher_summary.txt"), &summary)?;
            print!("{summary}");
        }
        Command::Report { input, out } => {
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            let charts = write_report(&input, &out)?;
            eprintln!("wrote {} and {} charts", out.display(), charts.len());
        }
        Command::Sweep { config, out } => {
            let cfg = read_config(config.as_deref())?;
            let root = out.unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
            let _lock = RunDirLock::acquire(&root)?;
            sweep(&cfg, &root)?;
        }
    }
    Ok(())
}

fn read_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => load_config(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

/// The config a checkpoint was produced with, checked against its hash.
fn checkpoint_config(ckpt: &Checkpoint) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::from_toml(&ckpt.config_toml).context("checkpoint config")?;
    if cfg.hash()? != ckpt.config_hash {
        bail!("checkpoint config does not match its stored hash");
    }
    Ok(cfg)
}

fn pretrain(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<PathBuf> {
    let n = cfg.pretrain.n_iterations;
    let result = orchestrator::pretrain_with(cfg, seed, |row| {
        if (row.iteration + 1) % 10 == 0 || row.iteration + 1 == n {
            eprintln!(
                "pretrain seed {seed} iter {}/{n}: total {:.4} cost {:.4} stage {}",
                row.iteration + 1,
                row.total,
                row.avg_timestep_cost,
                row.stage
            );
        }
    })?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    write_metrics(&result.metrics, &out.join("metrics.csv"))?;
    let path = out.join("pretrain.ckpt");
    save_checkpoint(&result.checkpoint, &path)?;
    eprintln!("wrote {}", path.display());
    Ok(path)
}

fn snapshot_tag(strategy: Strategy, k: usize, target: usize) -> String {
    format!("adapt:{strategy}:{k}:{target}")
}

/// Strategy, snapshot index and adapted target from a checkpoint phase tag.
fn parse_tag(tag: &str) -> Result<(String, usize, usize)> {
    if tag == "pretrain" {
        return Ok(("pretrain".into(), 0, 0));
    }
    let parts: Vec<&str> = tag.split(':').collect();
    match parts.as_slice() {
        ["adapt", s, k, t] => Ok((s.to_string(), k.parse()?, t.parse()?)),
        _ => bail!("unrecognized checkpoint phase tag {tag:?}"),
    }
}

fn adapt(
    ckpt: &Checkpoint,
    cfg: &ExperimentConfig,
    strategy: Strategy,
    domain: &str,
    seed: u64,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let profile = cfg.profile(domain)?;
    let record = orchestrator::adapt(ckpt, strategy, profile, cfg, seed)?;
    write_metrics(&record.metrics, &out.join("metrics.csv"))?;
    let mut paths = Vec::new();
    let mut policy = ckpt.policy.clone();
    for (k, (params, &target)) in record
        .snapshots
        .iter()
        .zip(&record.target_sequence)
        .enumerate()
    {
        policy.set_flat_params(params)?;
        let snap = Checkpoint {
            phase: snapshot_tag(strategy, k, target),
            seed,
            policy: policy.clone(),
            critics: record.final_critics.clone(),
            ..ckpt.clone()
        };
        let path = out.join(format!("snapshot_{k}.ckpt"));
        save_checkpoint(&snap, &path)?;
        paths.push(path);
    }
    eprintln!(
        "adapted seed {seed} with {strategy}: {} iterations, {} snapshots in {}",
        record.metrics.len(),
        paths.len(),
        out.display()
    );
    Ok(paths)
}

fn eval(ckpt: &Checkpoint, targets: &str, domain: Option<&str>) -> Result<Vec<EvalRow>> {
    let cfg = checkpoint_config(ckpt)?;
    let ids = if targets == "all" {
        cfg.target_ids()
    } else {
        let id: usize = targets
            .parse()
            .with_context(|| format!("--targets expects `all` or a target id, got {targets:?}"))?;
        if !cfg.target_ids().contains(&id) {
            bail!("unknown target id {id}");
        }
        vec![id]
    };
    let profile = cfg.profile(domain.unwrap_or(&cfg.eval.profile))?;
    let (strategy, snapshot, adapted_target) = parse_tag(&ckpt.phase)?;
    let evals = orchestrator::evaluate(
        &ckpt.policy,
        &cfg,
        profile,
        &ids,
        cfg.eval.episodes_per_target,
        ckpt.seed,
    )?;
    Ok(evals
        .into_iter()
        .map(|e| EvalRow {
            run_id: format!("s{}-{strategy}", ckpt.seed),
            seed: ckpt.seed,
            strategy: strategy.clone(),
            snapshot,
            adapted_target,
            target_id: e.target_id,
            episode_reward: e.episode_reward,
            episode_cost: e.episode_cost,
            total: e.total,
        })
        .collect())
}

fn sweep(cfg: &ExperimentConfig, root: &Path) -> Result<()> {
    let domain = cfg.eval.profile.clone();
    for &seed in &cfg.seeds {
        let seed_dir = root.join(format!("seed{seed}"));
        let pre_dir = seed_dir.join("pretrain");
        fs::create_dir_all(&pre_dir)?;
        let ckpt_path = pretrain(cfg, seed, &pre_dir)?;
        let ckpt = load_checkpoint(&ckpt_path)?;
        for strategy in Strategy::ALL {
            let dir = seed_dir.join(strategy.label());
            fs::create_dir_all(&dir)?;
            let snaps = adapt(&ckpt, cfg, strategy, &cfg.adapt.profile, seed, &dir)?;
            let mut rows = Vec::new();
            for p in &snaps {
                rows.extend(eval(&load_checkpoint(p)?, "all", Some(&domain))?);
            }
            write_eval(&rows, &dir.join("eval.csv"))?;
        }
    }
    let report = root.join("report.md");
    write_report(root, &report)?;
    eprintln!("wrote {}", report.display());
    Ok(())
}
