//! Seeded training runs and sweeps.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use qte_core::agent::{Agent, Demo, ExpansionMode};
use qte_core::env::{generate, scripted_expert, SceneSpec, TaskEnv};
use qte_core::qmodel::save_checkpoint;

use crate::config::ExperimentConfig;
use crate::error::BenchError;
use crate::report::{final_results, k_trend, read_rows_from, summary_table, write_rows_to, FinalResult, Row};

const DEMO_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;

/// Instance seed for item `i` of a stream belonging to run seed `seed`.
pub fn stream_seed(stream: u64, seed: u64, i: u64) -> u64 {
    (stream << 56) ^ (seed << 28) ^ i
}

pub fn expert_demos(scene: &SceneSpec, seed: u64, count: usize) -> Result<Vec<Demo>, BenchError> {
    (0..count as u64)
        .map(|d| Ok(scripted_expert(&generate(scene, stream_seed(DEMO_STREAM, seed, d))?)))
        .collect()
}

/// Greedy success rate and mean return over the fixed evaluation episodes of `seed`.
pub fn evaluate(agent: &Agent, cfg: &ExperimentConfig, scene: &SceneSpec, seed: u64) -> Result<(f64, f64), BenchError> {
    let ids: Vec<u64> = (0..cfg.eval_episodes as u64).collect();
    let outcomes = cfg.exec().map(&ids, |&i| {
        let mut env = TaskEnv::new(scene.clone())?;
        agent.evaluate_episode(&mut env, stream_seed(EVAL_STREAM, seed, i))
    });
    let mut wins = 0.0;
    let mut ret = 0.0;
    for o in outcomes {
        let o = o?;
        wins += f64::from(u8::from(o.success));
        ret += o.total_return;
    }
    let n = cfg.eval_episodes.max(1) as f64;
    Ok((wins / n, ret / n))
}

/// Trains one seed, evaluating at step 0 and whenever another `eval.interval`
/// env steps have passed.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<Row>, BenchError> {
    Ok(train_seed(cfg, seed)?.0)
}

/// [`run_seed`] that also hands back the trained agent.
pub fn train_seed(cfg: &ExperimentConfig, seed: u64) -> Result<(Vec<Row>, Agent), BenchError> {
    let scene = cfg.scene()?;
    let mut agent = Agent::new(cfg.agent()?, seed)?;
    agent.ingest_demos(&expert_demos(&scene, seed, cfg.demos)?)?;
    let mut env = TaskEnv::new(scene.clone())?;
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut losses = [0.0f64; 2];
    let mut loss_count = 0usize;
    let mut next_eval = 0u64;
    let mut episode = 0u64;
    loop {
        if agent.env_steps() >= next_eval {
            let (success_rate, mean_return) = evaluate(&agent, cfg, &scene, seed)?;
            let avg = |i: usize| if loss_count == 0 { f64::NAN } else { losses[i] / loss_count as f64 };
            rows.push(Row {
                env_step: agent.env_steps(),
                seed,
                task: cfg.task.clone(),
                k: cfg.k,
                mode: cfg.mode.to_string(),
                success_rate,
                mean_return,
                loss_d0: avg(0),
                loss_d1: avg(1),
                wall_ms: if cfg.wall_clock { start.elapsed().as_millis() as u64 } else { 0 },
            });
            losses = [0.0; 2];
            loss_count = 0;
            next_eval = agent.env_steps() + cfg.eval_interval;
        }
        if agent.env_steps() >= cfg.steps {
            break;
        }
        let rec = agent.run_episode(&mut env, stream_seed(TRAIN_STREAM, seed, episode), true)?;
        episode += 1;
        for l in rec.steps.iter().filter_map(|s| s.losses.as_ref()) {
            for (i, v) in l.depths.iter().take(2).enumerate() {
                losses[i] += v;
            }
            loss_count += 1;
        }
    }
    Ok((rows, agent))
}

/// Paths written by [`run`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub per_seed: Vec<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    pub merged: PathBuf,
    pub rows: Vec<Row>,
}

/// Runs every seed and writes one CSV and one checkpoint per seed plus a
/// merged CSV into `dir`.
pub fn run_into(cfg: &ExperimentConfig, dir: &Path) -> Result<RunOutput, BenchError> {
    cfg.validate()?;
    let results = cfg.exec().map(&cfg.seeds, |&s| train_seed(cfg, s));
    let name = cfg.run_name();
    let mut per_seed = Vec::new();
    let mut checkpoints = Vec::new();
    let mut merged_rows = Vec::new();
    for (seed, result) in cfg.seeds.iter().zip(results) {
        let (rows, agent) = result?;
        let path = dir.join(format!("{name}_seed{seed}.csv"));
        write_rows_to(&rows, &path)?;
        per_seed.push(path);
        let ckpt = dir.join(format!("{name}_seed{seed}.ckpt"));
        let mut w = BufWriter::new(File::create(&ckpt)?);
        save_checkpoint(agent.online(), &mut w)?;
        w.flush()?;
        checkpoints.push(ckpt);
        merged_rows.extend(rows);
    }
    let merged = dir.join(format!("{name}.csv"));
    write_rows_to(&merged_rows, &merged)?;
    Ok(RunOutput {
        per_seed,
        checkpoints,
        merged,
        rows: merged_rows,
    })
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput, BenchError> {
    run_into(cfg, &cfg.out_root())
}

/// Summary produced by a sweep; tables come only from the written CSVs.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    pub csvs: Vec<PathBuf>,
    pub results: Vec<FinalResult>,
    pub table: String,
    pub table_path: PathBuf,
}

fn results_from_csvs(csvs: &[PathBuf]) -> Result<Vec<FinalResult>, BenchError> {
    let mut rows = Vec::new();
    for p in csvs {
        rows.extend(read_rows_from(p)?);
    }
    Ok(final_results(&rows))
}

pub fn sweep_k(cfg: &ExperimentConfig, ks: &[usize]) -> Result<SweepOutput, BenchError> {
    if ks.is_empty() {
        return Err(BenchError::Invalid("k values must be nonempty".into()));
    }
    let dir = cfg.out_root();
    let mut csvs = Vec::new();
    for &k in ks {
        let c = ExperimentConfig { k, ..cfg.clone() };
        csvs.push(run_into(&c, &dir)?.merged);
    }
    let results = results_from_csvs(&csvs)?;
    let mut table = summary_table(&results, false);
    match k_trend(&results) {
        Some(r) => table.push_str(&format!("\nspearman(k, final success) = {r:.3}\n")),
        None => table.push_str("\nspearman(k, final success) undefined (constant input)\n"),
    }
    let table_path = dir.join(format!("sweep_k_{}_{}.md", cfg.task, cfg.mode));
    std::fs::write(&table_path, &table)?;
    Ok(SweepOutput {
        csvs,
        results,
        table,
        table_path,
    })
}

/// Runs all four expansion modes with wall-clock recording on.
pub fn sweep_mode(cfg: &ExperimentConfig) -> Result<SweepOutput, BenchError> {
    let dir = cfg.out_root();
    let mut csvs = Vec::new();
    for mode in ExpansionMode::ALL {
        let c = ExperimentConfig {
            mode,
            wall_clock: true,
            ..cfg.clone()
        };
        csvs.push(run_into(&c, &dir)?.merged);
    }
    let results = results_from_csvs(&csvs)?;
    let table = summary_table(&results, true);
    let table_path = dir.join(format!("sweep_mode_{}_k{}.md", cfg.task, cfg.k));
    std::fs::write(&table_path, &table)?;
    Ok(SweepOutput {
        csvs,
        results,
        table,
        table_path,
    })
}
