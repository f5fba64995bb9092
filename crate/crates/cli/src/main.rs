use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use iptm::harness::{
    self, compare, dp_policy, load_cycle_spec, ControllerKind, ExperimentConfig, HarnessError,
    RunReport, SweepParam,
};

/// Power/thermal management benchmark for a power-split hybrid.
#[derive(Debug, Parser)]
#[command(name = "iptm", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (TOML); omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for the coarse-preview noise.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Bundled cycle name (nedc-like, nycc-like) or cycle CSV path.
    #[arg(long, global = true)]
    cycle: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate one controller over a cycle.
    Run {
        /// rule-based, baseline-mpc, mh-mpc or dp.
        #[arg(long)]
        controller: Option<String>,
        #[arg(long)]
        label: Option<String>,
    },
    /// Fuel savings of several runs against a reference. Without report
    /// files, runs every controller on the configured cycle.
    Compare {
        /// Summary JSON files written by `run`.
        reports: Vec<PathBuf>,
        /// Label of the reference run (default: the rule-based one).
        #[arg(long)]
        reference: Option<String>,
    },
    /// Solve and store the DP policy for the configured cycle.
    DpSolve {
        /// Re-solve even if a matching policy is cached.
        #[arg(long)]
        force: bool,
    },
    /// Repeat a run over values of one parameter.
    Sweep {
        #[arg(long)]
        controller: Option<String>,
        /// lambda, n, h, dt2 or noise_std.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
}

fn config_error(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

fn load_config(c: &Common, controller: Option<&str>) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(cy) = &c.cycle {
        cfg.cycle = cy.clone();
    }
    if let Some(k) = controller {
        cfg.controller = ControllerKind::parse(k)
            .ok_or_else(|| config_error(format!("unknown controller {k:?}")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<(), HarnessError> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d).map_err(|e| HarnessError::Io {
            path: d.display().to_string(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| HarnessError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn summary_line(r: &RunReport) -> String {
    format!(
        "{}: fuel {:.5} kg, SOC {:.4} -> {:.4}, coolant [{:.1}, {:.1}] °C, mean solve {:.2} ms",
        r.label,
        r.total_fuel,
        r.soc_init,
        r.terminal_soc,
        r.t_cl_min,
        r.t_cl_max,
        1e3 * r.solve_time.mean
    )
}

fn execute(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Run { controller, label } => {
            let mut cfg = load_config(&cli.common, controller.as_deref())?;
            if label.is_some() {
                cfg.label = label;
            }
            let out = harness::run(&cfg)?;
            println!("{}", summary_line(&out.report));
            println!("wrote {}", cfg.out_dir.join(format!("{}.json", cfg.label())).display());
        }
        Command::Compare { reports, reference } => {
            let cfg = load_config(&cli.common, None)?;
            let list: Vec<RunReport> = if reports.is_empty() {
                let mut v = Vec::new();
                for k in ControllerKind::ALL {
                    let c = ExperimentConfig {
                        controller: k,
                        label: None,
                        ..cfg.clone()
                    };
                    let r = harness::run(&c)?.report;
                    println!("{}", summary_line(&r));
                    v.push(r);
                }
                v
            } else {
                let mut v = Vec::new();
                for p in &reports {
                    let text = std::fs::read_to_string(p)
                        .map_err(|e| config_error(format!("{}: {e}", p.display())))?;
                    v.push(RunReport::from_json(&text)?);
                }
                v
            };
            let reference = match reference {
                Some(r) => r,
                None => list
                    .iter()
                    .find(|r| r.controller == ControllerKind::RuleBased.as_str())
                    .map(|r| r.label.clone())
                    .ok_or_else(|| config_error("no rule-based report; pass --reference"))?,
            };
            let table = compare(&list, &reference)?;
            print!("{}", table.to_text());
            write(&cfg.out_dir.join("comparison.csv"), &table.to_csv())?;
            write(
                &cfg.out_dir.join("comparison.json"),
                &serde_json::to_string_pretty(&table).expect("table serializes"),
            )?;
        }
        Command::DpSolve { force } => {
            let cfg = load_config(&cli.common, Some("dp"))?;
            let cycle = load_cycle_spec(&cfg.cycle)?;
            let t0 = std::time::Instant::now();
            let (policy, hit) = dp_policy(&cfg, &cycle, force)?;
            let x0 = cfg.initial_state();
            let summary = serde_json::json!({
                "cycle": cycle.name,
                "policy_file": cfg.policy_file(),
                "cache_hit": hit,
                "predicted_fuel": policy.value(0, &x0),
                "soc_band": policy.soc_band,
                "seconds": t0.elapsed().as_secs_f64(),
            });
            println!(
                "DP policy {} ({}), predicted fuel {:.5} kg",
                cfg.policy_file().display(),
                if hit { "cached" } else { "solved" },
                policy.value(0, &x0)
            );
            write(
                &cfg.out_dir.join(format!("dp-solve-{}.json", cfg.cycle_stem())),
                &serde_json::to_string_pretty(&summary).expect("summary serializes"),
            )?;
        }
        Command::Sweep {
            controller,
            param,
            values,
        } => {
            let cfg = load_config(&cli.common, controller.as_deref())?;
            let p = SweepParam::parse(&param)
                .ok_or_else(|| config_error(format!("unknown sweep parameter {param:?}")))?;
            let reports = harness::sweep(&cfg, p, &values)?;
            let mut csv = format!("{},total_fuel_kg,terminal_soc,soc_range,mean_solve_time_s\n", p.as_str());
            for (v, r) in values.iter().zip(&reports) {
                println!("{} = {v}: {}", p.as_str(), summary_line(r));
                csv += &format!("{v},{},{},{},{}\n", r.total_fuel, r.terminal_soc, r.soc_range, r.solve_time.mean);
            }
            let stem = format!("sweep-{}-{}", cfg.label(), p.as_str());
            write(&cfg.out_dir.join(format!("{stem}.csv")), &csv)?;
            write(
                &cfg.out_dir.join(format!("{stem}.json")),
                &serde_json::to_string_pretty(&reports).expect("reports serialize"),
            )?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
