use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use simagent::clock::SystemClock;
use simagent::config::{stage_seed, RunConfig};
use simagent::pipeline::{self, RunDir};
use simagent::{Error, Result};
use simagent_core::generator::Template;
use simagent_core::posttrain::Method;

#[derive(Parser)]
#[command(name = "simagent", version, about = "Token-based multi-agent traffic simulation")]
struct Cli {
    /// Experiment config (TOML); keys not set fall back to the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; overrides `run_dir` from the config.
    #[arg(long, global = true)]
    dir: Option<PathBuf>,
    /// Config override, e.g. `--set train.epochs=2`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic scenario set (and a held-out set).
    Generate(GenerateArgs),
    /// Tokenize every track of a scenario set.
    Tokenize {
        #[arg(long)]
        scenarios: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Next-token pretraining.
    Pretrain {
        #[arg(long)]
        scenarios: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reward fine-tuning of a pretrained checkpoint.
    Posttrain {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        scenarios: Option<PathBuf>,
        /// sft | reinforce | a2c | grpo
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample rollouts, optionally with safety search and clustering.
    Rollout(RolloutArgs),
    /// Score rollouts against the recorded futures.
    Evaluate {
        #[arg(long)]
        scenarios: Option<PathBuf>,
        #[arg(long)]
        rollouts: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render logs, reports and rollouts to SVG/CSV.
    Plot {
        #[arg(long)]
        scenarios: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        max_scenes: usize,
    },
    /// Print the effective config.
    Config,
}

#[derive(Args)]
struct GenerateArgs {
    /// Template name or `all`. Repeatable.
    #[arg(long = "template")]
    templates: Vec<String>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    eval_count: Option<usize>,
    /// Set seed; defaults to one drawn from the root seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    eval_out: Option<PathBuf>,
}

#[derive(Args)]
struct RolloutArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    scenarios: Option<PathBuf>,
    #[arg(long, overrides_with = "no_search")]
    search: bool,
    #[arg(long)]
    no_search: bool,
    #[arg(long)]
    cluster: bool,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn templates(names: &[String], cfg: &RunConfig) -> Result<Vec<Template>> {
    if names.is_empty() {
        return Ok(cfg.generate.templates.clone());
    }
    let mut out = Vec::new();
    for n in names {
        if n == "all" {
            out.extend(Template::ALL);
        } else {
            out.push(Template::parse(n).ok_or_else(|| Error::Config(format!("unknown template `{n}` (straight, curve, intersection, merge, all)")))?);
        }
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let dir = RunDir::new(cli.dir.clone().unwrap_or_else(|| PathBuf::from(&cfg.run_dir)));
    let or = |p: Option<PathBuf>, d: PathBuf| p.unwrap_or(d);
    match cli.command {
        Command::Generate(a) => {
            let t = templates(&a.templates, &cfg)?;
            let seed = a.seed.unwrap_or_else(|| cfg.generate_seed());
            let count = a.count.unwrap_or(cfg.generate.count);
            let out = or(a.out, dir.scenarios());
            let set = pipeline::generate(&out, &t, count, seed)?;
            println!("wrote {} scenarios to {}", set.entries.len(), out.display());
            let eval_count = a.eval_count.unwrap_or(cfg.generate.eval_count);
            if eval_count > 0 {
                let eval_out = or(a.eval_out, dir.eval());
                let e = pipeline::generate(&eval_out, &t, eval_count, stage_seed(seed, "eval"))?;
                println!("wrote {} held-out scenarios to {}", e.entries.len(), eval_out.display());
            }
        }
        Command::Tokenize { scenarios, out } => {
            let out = or(out, dir.tokens());
            let d = pipeline::tokenize_set(&cfg, &or(scenarios, dir.scenarios()), &out)?;
            let n: usize = d.scenarios.iter().map(Vec::len).sum();
            println!("tokenized {n} tracks to {}", out.display());
        }
        Command::Pretrain { scenarios, out } => {
            let out = or(out, dir.pretrain_ckpt());
            let log = pipeline::pretrain(&cfg, &or(scenarios, dir.scenarios()), &out, &dir.pretrain_log(), &mut |l| {
                let v = l.val_loss.map_or(String::new(), |v| format!(" val_loss {v:.4} val_acc {:.3}", l.val_acc.unwrap_or(0.0)));
                eprintln!("epoch {} step {} lr {:.2e} train_loss {:.4} train_acc {:.3}{v}", l.epoch, l.step, l.lr, l.train_loss, l.train_acc);
            })?;
            println!("pretrained {} steps on {} samples; checkpoint {}", log.report.steps, log.report.train_samples, out.display());
        }
        Command::Posttrain { checkpoint, scenarios, method, out } => {
            if let Some(m) = method {
                cfg.posttrain.method = Method::parse(&m).ok_or_else(|| Error::Config(format!("unknown method `{m}` (sft, reinforce, a2c, grpo)")))?;
            }
            let out = or(out, dir.posttrain_ckpt());
            let log = pipeline::posttrain(&cfg, &or(checkpoint, dir.pretrain_ckpt()), &or(scenarios, dir.scenarios()), &out, &dir.posttrain_log())?;
            if let Some(w) = &log.report.warning {
                eprintln!("warning: {w}");
            }
            println!("{} post-training: {} updates, max KL {:.4}, KL to reference {:.4}; checkpoint {}", log.report.method.name(), log.report.updates.len(), log.report.max_kl, log.kl_to_reference, out.display());
        }
        Command::Rollout(a) => {
            if a.search {
                cfg.testtime.use_search = true;
            }
            if a.no_search {
                cfg.testtime.use_search = false;
            }
            if a.cluster {
                cfg.testtime.use_cluster = true;
            }
            if let Some(n) = a.n {
                cfg.testtime.n = n;
            }
            if let Some(b) = a.budget {
                cfg.testtime.max_candidate_budget = b;
            }
            cfg.validate()?;
            let ckpt = a.checkpoint.unwrap_or_else(|| if dir.posttrain_ckpt().exists() { dir.posttrain_ckpt() } else { dir.pretrain_ckpt() });
            let out = or(a.out, dir.rollouts());
            let rs = pipeline::rollout(&cfg, &ckpt, &or(a.scenarios, dir.eval()), &out, &dir.timing(), &SystemClock::new())?;
            for e in rs.entries.iter().filter(|e| e.warning.is_some()) {
                eprintln!("warning: scenario {}: {}", e.scenario, e.warning.as_deref().unwrap_or(""));
            }
            println!("wrote rollouts for {} scenarios to {}", rs.entries.len(), out.display());
        }
        Command::Evaluate { scenarios, rollouts, out } => {
            let out = or(out, dir.report());
            let r = pipeline::evaluate(&cfg, &or(scenarios, dir.eval()), &or(rollouts, dir.rollouts()), &out)?;
            let m = &r.metrics;
            println!(
                "realism {:.4} ade {:.3} min_ade {:.3} collision {:.4} offroad {:.4}; report {}",
                m.realism,
                m.mean_ade,
                m.mean_min_ade,
                m.collision_rate,
                m.offroad_rate,
                out.display()
            );
        }
        Command::Plot { scenarios, max_scenes } => {
            let files = pipeline::plot_run(&dir, &or(scenarios, dir.eval()), max_scenes)?;
            for f in files {
                println!("{}", f.display());
            }
        }
        Command::Config => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
