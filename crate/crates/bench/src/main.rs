use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use qte_bench::config::ExperimentConfig;
use qte_bench::experiment::{expert_demos, run, sweep_k, sweep_mode};
use qte_bench::plot::plot_rows;
use qte_bench::report::read_rows_from;
use qte_core::agent::{read_demos, write_demos, Agent};
use qte_core::env::generate;
use qte_core::expansion::{qte_traced, write_trace};
use qte_core::qmodel::load_checkpoint;
use qte_core::voxelgrid::voxelize;

/// Coarse-to-fine Q-attention experiments.
///
/// Any config key may also be given as `--key=value`, e.g. `--agent.k=5`,
/// applied after the config file.
#[derive(Parser)]
#[command(name = "qte", version)]
struct Cli {
    /// Flat key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Named base config: desk, full_scale, demos20, demos40.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every seed, writing per-seed and merged CSVs.
    Run,
    /// Run once per K and emit a final-success table.
    SweepK {
        #[arg(long, value_delimiter = ',', default_value = "1,2,5,10")]
        ks: Vec<usize>,
    },
    /// Run every expansion mode and emit a table with relative wall-clock.
    SweepMode,
    /// Render SVG learning curves from CSVs.
    Plot {
        #[arg(required = true)]
        csvs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write scripted-expert demos as JSON lines.
    DemoGen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump the expansion tree for one observation.
    InspectTree {
        /// Scene seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Network weights; fresh weights from `--net-seed` otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        net_seed: u64,
        /// Take the observation from the first state of a demo file instead.
        #[arg(long)]
        demos: Option<PathBuf>,
        /// Trace destination; stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also dump the root voxel grid here.
        #[arg(long)]
        grid: Option<PathBuf>,
    },
}

/// Splits `--key=value` config overrides from the arguments clap sees.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let probe = ExperimentConfig::default();
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        if let Some((k, v)) = a.strip_prefix("--").and_then(|s| s.split_once('=')) {
            if probe.clone().set(k, v).is_ok() || k.contains('.') || k == "task" || k == "seeds" {
                overrides.push((k.to_string(), v.to_string()));
                continue;
            }
        }
        rest.push(a);
    }
    (rest, overrides)
}

fn main() -> Result<()> {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    let mut cfg = ExperimentConfig::named(&cli.preset)?;
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
    }
    for (k, v) in &overrides {
        cfg.set(k, v).with_context(|| format!("override --{k}={v}"))?;
    }
    cfg.validate()?;

    match cli.command {
        Command::Run => {
            let out = run(&cfg)?;
            for p in &out.per_seed {
                println!("{}", p.display());
            }
            println!("{}", out.merged.display());
        }
        Command::SweepK { ks } => {
            let out = sweep_k(&cfg, &ks)?;
            print!("{}", out.table);
            println!("{}", out.table_path.display());
        }
        Command::SweepMode => {
            let out = sweep_mode(&cfg)?;
            print!("{}", out.table);
            println!("{}", out.table_path.display());
        }
        Command::Plot { csvs, out } => {
            let mut rows = Vec::new();
            for p in &csvs {
                rows.extend(read_rows_from(p)?);
            }
            for p in plot_rows(&rows, &out.unwrap_or_else(|| cfg.out_root()))? {
                println!("{}", p.display());
            }
        }
        Command::DemoGen { seed, out } => {
            let demos = expert_demos(&cfg.scene()?, seed, cfg.demos)?;
            if let Some(dir) = out.parent() {
                std::fs::create_dir_all(dir)?;
            }
            let mut w = BufWriter::new(File::create(&out)?);
            write_demos(&demos, &mut w)?;
            w.flush()?;
            println!("{} demos -> {}", demos.len(), out.display());
        }
        Command::InspectTree {
            seed,
            checkpoint,
            net_seed,
            demos,
            out,
            grid,
        } => {
            let agent_cfg = cfg.agent()?;
            let mut agent = Agent::new(agent_cfg.clone(), net_seed)?;
            if let Some(p) = checkpoint {
                load_checkpoint(agent.online_mut(), BufReader::new(File::open(&p)?))
                    .with_context(|| format!("loading {}", p.display()))?;
            }
            let obs = match demos {
                Some(p) => {
                    let d = read_demos(BufReader::new(File::open(&p)?))?;
                    match d.first().and_then(|d| d.states.first()) {
                        Some(s) => s.obs.clone(),
                        None => bail!("{} holds no demo states", p.display()),
                    }
                }
                None => generate(&cfg.scene()?, seed)?.observe(false),
            };
            let root = agent_cfg.root_spec()?;
            let (result, trace) = qte_traced(agent.online(), 0, &obs, &root, &agent_cfg.expansion)?;
            match out {
                Some(p) => write_trace(&trace, BufWriter::new(File::create(p)?))?,
                None => write_trace(&trace, std::io::stdout().lock())?,
            }
            if let Some(p) = grid {
                voxelize(&obs, &root).write_records(BufWriter::new(File::create(p)?))?;
            }
            eprintln!(
                "value {:.6} root {} path {}",
                result.value,
                result.root_index,
                result.path.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
            );
        }
    }
    Ok(())
}
