use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use qkdprov::config::{parse_scheme, ExperimentConfig};
use qkdprov::harness::{self, HarnessError, Solver};
use qkdprov_rl::Scheme;

#[derive(Parser)]
#[command(name = "qkdprov", version, about = "Wavelength reservation planning for QKD-secured federated learning")]
struct Cli {
    /// Flat `key = value` experiment file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Also write a gnuplot script next to each curve.
    #[arg(long, global = true)]
    plot: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Expected cost of uniform per-link reservation levels.
    CostStructure,
    /// SIP against the EVF and random baselines over a sweep.
    Compare {
        #[arg(long)]
        sweep: Option<String>,
        /// Comma-separated sweep values.
        #[arg(long)]
        values: Option<String>,
    },
    /// Train one scheme on one seed.
    Train {
        #[arg(long)]
        scheme: String,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Train every configured scheme over every configured seed.
    Convergence {
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Final training loss across secret-key budgets.
    FelCurve,
    /// Reserve the demand of one known level.
    SolveDet {
        #[arg(long)]
        level: Option<u32>,
    },
    /// Two-stage stochastic plan.
    SolveSip,
    Baseline {
        #[arg(value_enum)]
        kind: BaselineKind,
    },
    /// Exhaustive search on small instances.
    Oracle {
        #[arg(long, default_value_t = 3)]
        paths: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineKind {
    Evf,
    Random,
}

fn build_config(cli: &Cli) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("override `{o}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim()).map_err(HarnessError::Config)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    match &cli.command {
        Command::Compare { sweep, values } => {
            if let Some(s) = sweep {
                cfg.set("sweep", s).map_err(HarnessError::Config)?;
            }
            if let Some(v) = values {
                cfg.set("sweep_values", v).map_err(HarnessError::Config)?;
            }
        }
        Command::Train { episodes: Some(e), .. } | Command::Convergence { episodes: Some(e) } => cfg.episodes = *e,
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, HarnessError> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, contents)?;
    Ok(path)
}

fn run(cli: &Cli) -> Result<(), HarnessError> {
    let cfg = build_config(cli)?;
    let out = &cfg.out;
    match &cli.command {
        Command::CostStructure => {
            let cs = harness::run_cost_structure(&harness::load_instance(&cfg)?)?;
            let p = write(out, "cost_structure.csv", &cs.to_csv())?;
            if cli.plot {
                write(out, "cost_structure.gp", &harness::plot_script("cost_structure.csv", "Uniform reservation", "level", "expected cost", 1, &[2, 3, 4]))?;
            }
            println!("best uniform level {} -> {}", cs.best_level(), p.display());
        }
        Command::Compare { .. } => {
            let c = harness::run_comparison(&cfg)?;
            let name = format!("compare_{}.csv", c.variable.name());
            let p = write(out, &name, &c.to_csv())?;
            if cli.plot {
                let gp = format!("compare_{}.gp", c.variable.name());
                write(out, &gp, &harness::plot_script(&name, "Scheme comparison", c.variable.name(), "expected cost", 2, &[3, 4, 5]))?;
            }
            for r in &c.rows {
                println!(
                    "{}={}: sip {:.1} evf {:.1} ({:.3}x) random {:.1} ({:.3}x)",
                    c.variable.name(),
                    r.value,
                    r.sip,
                    r.evf,
                    r.evf / r.sip,
                    r.random_mean,
                    r.random_mean / r.sip
                );
            }
            println!("-> {}", p.display());
        }
        Command::Train { scheme, .. } => {
            let scheme: Scheme =
                parse_scheme(scheme).ok_or_else(|| HarnessError::Config(format!("unknown scheme `{scheme}`")))?;
            let run = harness::run_train(&cfg, scheme, cfg.seed)?;
            let tag = format!("{}_seed{}", scheme.name(), cfg.seed);
            let p = write(out, &format!("train_{tag}.csv"), &run.log_csv())?;
            let last = run.log.len() - 1;
            let m = run.agents.iter().position(|a| a.role == qkdprov_rl::agents::Role::Manager).unwrap_or(0);
            write(out, &format!("trace_{tag}.csv"), &run.trace_csv(m, last))?;
            let dir = out.join(format!("checkpoints_{tag}"));
            std::fs::create_dir_all(&dir)?;
            for a in &run.agents {
                a.policy.save(dir.join(format!("agent{}_policy.mlp", a.id))).map_err(io_err)?;
                for (i, q) in a.q.iter().enumerate() {
                    q.save(dir.join(format!("agent{}_q{}.mlp", a.id, i + 1))).map_err(io_err)?;
                }
            }
            let tail = qkdprov_rl::agents::final_mean_reward(&run.log, 10);
            println!("{}: final 10-episode mean reward {tail:.4} -> {}", scheme.name(), p.display());
        }
        Command::Convergence { .. } => {
            let c = harness::run_convergence(&cfg)?;
            let p = write(out, "convergence.csv", &c.curve_csv())?;
            write(out, "convergence_summary.csv", &c.summary_csv())?;
            if cli.plot {
                write(out, "convergence.gp", &harness::plot_script("convergence.csv", "Median reward", "episode", "reward", 1, &(2..2 + c.schemes().len()).collect::<Vec<_>>()))?;
            }
            println!("best trailing reward {:.4}, threshold {:.4}", c.best, c.threshold);
            for s in c.schemes() {
                println!(
                    "{}: median episodes to threshold {} (per seed {:?})",
                    s.name(),
                    c.median_episodes_to_threshold(s),
                    c.episodes_to_threshold(s)
                );
            }
            println!("-> {}", p.display());
        }
        Command::FelCurve => {
            let pts = harness::run_fel_curve(&cfg)?;
            let p = write(out, "fel_curve.csv", &qkdprov_core::fel::curve_to_csv(&pts))?;
            if cli.plot {
                write(out, "fel_curve.gp", &harness::plot_script("fel_curve.csv", "Loss against key rate", "rate", "loss", 1, &[3]))?;
            }
            for pt in &pts {
                println!("rate {} workers {} loss {:.5}", pt.rate, pt.workers, pt.final_loss);
            }
            println!("-> {}", p.display());
        }
        Command::SolveDet { level } => solve(&cfg, Solver::Deterministic(*level), "deterministic")?,
        Command::SolveSip => solve(&cfg, Solver::Sip, "sip")?,
        Command::Baseline { kind } => match kind {
            BaselineKind::Evf => solve(&cfg, Solver::Evf, "evf")?,
            BaselineKind::Random => solve(&cfg, Solver::Random, "random")?,
        },
        Command::Oracle { paths } => solve(&cfg, Solver::Oracle { paths: *paths }, "oracle")?,
    }
    Ok(())
}

fn io_err(e: qkdprov_rl::neural::NeuralError) -> HarnessError {
    HarnessError::Io(std::io::Error::other(e.to_string()))
}

fn solve(cfg: &ExperimentConfig, solver: Solver, name: &str) -> Result<(), HarnessError> {
    let inst = harness::load_instance(cfg)?;
    let report = harness::run_solver(&inst, solver, cfg.seed)?;
    let p = write(&cfg.out, &format!("{name}_plan.csv"), &report.to_csv(&inst.topology, &inst.scenarios))?;
    println!(
        "{name}: first stage {:.2}, expected second stage {:.2}, expected total {:.2} ({:?}) -> {}",
        report.cost.first_stage,
        report.cost.expected_second_stage(),
        report.expected_total(),
        report.wall_time,
        p.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_infeasible() { 2 } else { 1 })
        }
    }
}
