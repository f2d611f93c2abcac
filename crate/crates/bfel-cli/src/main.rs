//! `bfel` — experiment runner and artifact tooling for the federated edge
//! learning simulator.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use bfel_cli::chainfile;
use bfel_cli::config::ExperimentConfig;
use bfel_cli::dataset;
use bfel_cli::output;
use bfel_cli::verify::verify_run_dir;
use bfel_core::federation::run_experiment;

#[derive(Parser)]
#[command(name = "bfel", about = "Blockchain-empowered federated edge learning simulator", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a config file.
    Run {
        config: PathBuf,
        /// Output directory (default: runs/<config stem>-<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one experiment per value of a config parameter, same seed.
    Sweep {
        config: PathBuf,
        /// Parameter to vary: rho, momentum, clip_norm, theta,
        /// learning_rate, epochs, batch_size, seed.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// Output directory (default: sweeps/<config stem>-<param>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Revalidate every artifact in a run directory.
    Verify { run_dir: PathBuf },
    /// Print one block of a chain file as structured text.
    InspectBlock { chain_file: PathBuf, height: u64 },
    /// Validate a single chain file (hash links, Merkle roots; signatures
    /// too when the run config is supplied).
    VerifyChain {
        chain_file: PathBuf,
        /// Config of the run that produced the chain, for signature checks.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Verify every anchor on the main chain of a run directory.
    VerifyAnchors { run_dir: PathBuf },
    /// Print the metrics CSV of a run directory to stdout.
    ExportMetrics { run_dir: PathBuf },
}

fn main() {
    if let Err(err) = dispatch() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn dispatch() -> Result<()> {
    match Cli::parse().command {
        Command::Run { config, out } => cmd_run(&config, out),
        Command::Sweep { config, param, values, out } => cmd_sweep(&config, &param, &values, out),
        Command::Verify { run_dir } => cmd_verify(&run_dir),
        Command::InspectBlock { chain_file, height } => cmd_inspect_block(&chain_file, height),
        Command::VerifyChain { chain_file, config } => cmd_verify_chain(&chain_file, config.as_deref()),
        Command::VerifyAnchors { run_dir } => cmd_verify_anchors(&run_dir),
        Command::ExportMetrics { run_dir } => cmd_export_metrics(&run_dir),
    }
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

fn execute_run(config_path: &Path, cfg: &ExperimentConfig, out_dir: &Path) -> Result<String> {
    let dir = config_dir(config_path);
    let run_cfg = cfg.to_run_config(&dir)?;
    let (train, test) = dataset::prepare(&cfg.dataset, &dir, cfg.seed)?;
    let result = run_experiment(&run_cfg, &train, &test).map_err(|e| anyhow::anyhow!("{e}"))?;
    let summary = output::summary_line(&cfg.scenario, cfg.seed, &result);

    // The run directory must be self-contained: copy any referenced fault
    // script next to the config copy and point at the copy.
    let mut stored = cfg.clone();
    if !cfg.attack.fault_script.is_empty() {
        let source = if Path::new(&cfg.attack.fault_script).is_absolute() {
            PathBuf::from(&cfg.attack.fault_script)
        } else {
            dir.join(&cfg.attack.fault_script)
        };
        let text = std::fs::read_to_string(&source)
            .with_context(|| format!("reading fault script {}", source.display()))?;
        std::fs::create_dir_all(out_dir)?;
        std::fs::write(out_dir.join("fault_script.txt"), text)?;
        stored.attack.fault_script = "fault_script.txt".to_string();
    }
    let config_text = stored.to_toml()?;
    output::write_run_dir(out_dir, &config_text, &result, &summary)?;
    Ok(summary)
}

fn cmd_run(config_path: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    let stem = config_path.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    let out_dir = out.unwrap_or_else(|| PathBuf::from("runs").join(format!("{stem}-{}", cfg.seed)));
    let summary = execute_run(config_path, &cfg, &out_dir)?;
    println!("{summary}");
    println!("artifacts: {}", out_dir.display());
    Ok(())
}

fn cmd_sweep(config_path: &Path, param: &str, values: &[String], out: Option<PathBuf>) -> Result<()> {
    if values.is_empty() {
        bail!("sweep needs at least one value");
    }
    let base = ExperimentConfig::load(config_path)?;
    let stem = config_path.file_stem().and_then(|s| s.to_str()).unwrap_or("sweep");
    let out_dir = out.unwrap_or_else(|| PathBuf::from("sweeps").join(format!("{stem}-{param}")));
    std::fs::create_dir_all(&out_dir)?;

    let mut comparison = String::from("value,final_accuracy,compression_ratio,exposure_ratio,total_bytes,simulated_time_ms\n");
    for value in values {
        let mut cfg = base.clone();
        cfg.set_parameter(param, value)?;
        let run_dir = out_dir.join(format!("{param}-{value}"));
        let summary = execute_run(config_path, &cfg, &run_dir)?;
        println!("{summary}");
        let fields = output::parse_summary(&summary)?;
        comparison.push_str(&format!(
            "{},{},{},{},{},{}\n",
            value,
            fields["final_accuracy"],
            fields["compression_ratio"],
            fields["exposure_ratio"],
            fields["total_bytes"],
            fields["simulated_time_ms"],
        ));
    }
    let table = out_dir.join("comparison.csv");
    std::fs::write(&table, comparison)?;
    println!("comparison table: {}", table.display());
    Ok(())
}

fn cmd_verify(run_dir: &Path) -> Result<()> {
    let report = verify_run_dir(run_dir)?;
    print!("{}", report.render());
    if !report.all_passed() {
        std::process::exit(1);
    }
    Ok(())
}

fn cmd_inspect_block(chain_file: &Path, height: u64) -> Result<()> {
    let chain = chainfile::read_chain(chain_file)?;
    let block = chain
        .blocks()
        .get(height as usize)
        .with_context(|| format!("no block at height {height} (chain height {})", chain.height()))?;
    print!("{}", output::render_block_text(block));
    Ok(())
}

fn cmd_verify_chain(chain_file: &Path, config: Option<&Path>) -> Result<()> {
    let chain = chainfile::read_chain(chain_file)?;
    let authority = match config {
        Some(path) => {
            let cfg = ExperimentConfig::load(path)?;
            let run_cfg = cfg.to_run_config(&config_dir(path))?;
            Some(bfel_core::federation::build_authority(&run_cfg).map_err(|e| anyhow::anyhow!("{e}"))?)
        }
        None => None,
    };
    let validity = chain.validate_chain(authority.as_ref());
    match validity {
        bfel_core::ledger::ChainValidity::Valid => {
            println!(
                "{}: valid ({} blocks{})",
                chain.chain_id(),
                chain.blocks().len(),
                if authority.is_some() { ", signatures checked" } else { ", structure only" }
            );
            Ok(())
        }
        bfel_core::ledger::ChainValidity::InvalidAt { height, reason } => {
            println!("{}: INVALID at height {height}: {reason}", chain.chain_id());
            std::process::exit(1);
        }
    }
}

fn cmd_verify_anchors(run_dir: &Path) -> Result<()> {
    let mut main = None;
    let mut others = Vec::new();
    for path in output::chain_paths(run_dir)? {
        let chain = chainfile::read_chain(&path)?;
        if chain.kind() == bfel_core::ledger::ChainKind::Main {
            main = Some(chain);
        } else {
            others.push(chain);
        }
    }
    let main = main.context("no main chain in run directory")?;
    let mut failures = 0;
    let anchors = bfel_core::ledger::main_chain_anchors(&main);
    for entry in &anchors {
        let rec = &entry.record;
        let target = others.iter().find(|c| c.chain_id() == rec.subchain_id);
        let ok = match target {
            Some(chain) => bfel_core::ledger::verify_anchor(rec, chain).unwrap_or(false),
            None => false,
        };
        println!(
            "{} anchor {} {}..={}",
            if ok { "ok  " } else { "FAIL" },
            rec.subchain_id,
            rec.from_height,
            rec.to_height
        );
        if !ok {
            failures += 1;
        }
    }
    println!("{} anchors, {} failures", anchors.len(), failures);
    if failures > 0 {
        std::process::exit(1);
    }
    Ok(())
}

fn cmd_export_metrics(run_dir: &Path) -> Result<()> {
    let rows = output::read_metrics(&run_dir.join("metrics.csv"))?;
    println!("{}", bfel_core::federation::MetricsRow::CSV_HEADER);
    for row in rows {
        println!("{}", row.csv_row());
    }
    Ok(())
}
