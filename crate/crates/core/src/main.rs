use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use profil::cli::pipeline::{self, Workspace};
use profil::cli::ExperimentConfig;

#[derive(Parser)]
#[command(name = "profil", about = "Probe-filtered GRPO experiments on ModChain")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (dotted key = value lines).
    #[arg(long, short)]
    config: PathBuf,
    /// Artifact directory.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Behavior-clone the base policy on theater demonstrations.
    Pretrain(Common),
    /// Train the frozen-base probe.
    TrainProbe(Common),
    /// Run GRPO for the configured condition.
    Grpo(Common),
    /// Decode held-out tasks with the trained policy.
    Eval(Common),
    /// Frozen-probe AUROC on every checkpoint.
    Audit(Common),
    /// Probe perf ratio at each threshold in eval.thresholds_sweep.
    SweepTheta(Common),
    /// Activation-steering comparison on the trained policy.
    Steer(Common),
    /// Aggregate every evaluated condition into report tables.
    Report(Common),
    /// All stages except steering, then the report.
    Run(Common),
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let (Command::Pretrain(c)
    | Command::TrainProbe(c)
    | Command::Grpo(c)
    | Command::Eval(c)
    | Command::Audit(c)
    | Command::SweepTheta(c)
    | Command::Steer(c)
    | Command::Report(c)
    | Command::Run(c)) = &cli.command;
    let cfg = ExperimentConfig::load(&c.config).with_context(|| format!("loading {}", c.config.display()))?;
    let ws = Workspace::new(&c.out, cfg);
    match cli.command {
        Command::Pretrain(_) => {
            pipeline::pretrain(&ws)?;
        }
        Command::TrainProbe(_) => {
            let p = pipeline::train_probe(&ws)?;
            println!("held-out AUROC {:.3} (epoch {})", p.held_out_auroc, p.best_epoch);
        }
        Command::Grpo(_) => {
            pipeline::grpo(&ws)?;
        }
        Command::Eval(_) => {
            let r = pipeline::eval(&ws)?;
            let acc = r.iter().filter(|x| x.correct).count() as f64 / r.len() as f64;
            let perf = r.iter().map(|x| x.perf_ratio_oracle).sum::<f64>() / r.len() as f64;
            println!("{}: accuracy {acc:.3}, perf ratio {perf:.3}", ws.cfg.grpo.condition);
        }
        Command::Audit(_) => {
            for row in pipeline::audit(&ws)? {
                match row.auroc {
                    Some(a) => println!("step {:>4}: AUROC {a:.3}", row.checkpoint),
                    None => println!("step {:>4}: single class", row.checkpoint),
                }
            }
        }
        Command::SweepTheta(_) => {
            let vals = pipeline::sweep_theta(&ws)?;
            for (t, v) in ws.cfg.eval.thresholds_sweep.iter().zip(vals) {
                match v {
                    Some(v) => println!("theta {t}: {v:.3}"),
                    None => println!("theta {t}: no scored steps"),
                }
            }
        }
        Command::Steer(_) => {
            for r in pipeline::steer(&ws)? {
                println!(
                    "c={}: perf {:.3} acc {:.3} len {:.2}",
                    r.coefficient, r.perf_ratio, r.accuracy, r.mean_steps
                );
            }
        }
        Command::Report(_) => {
            pipeline::report(&ws.root, &ws.cfg)?;
            print!("{}", std::fs::read_to_string(ws.root.join("report/metrics.csv"))?);
        }
        Command::Run(_) => {
            pipeline::run_workspace(&ws)?;
            print!("{}", std::fs::read_to_string(ws.root.join("report/metrics.csv"))?);
        }
    }
    Ok(())
}
