//! CSV learning-curve rows, summary tables and rank statistics.
//!
//! Every CSV starts with a version comment line followed by the header
//! `env_step,seed,task,k,mode,success_rate,mean_return,loss_d0,loss_d1,wall_ms`.
//! Loss cells are `NaN` for evaluations with no training since the previous one.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::BenchError;

pub const CSV_VERSION: &str = "# qte-bench csv v1";
pub const COLUMNS: [&str; 10] = [
    "env_step",
    "seed",
    "task",
    "k",
    "mode",
    "success_rate",
    "mean_return",
    "loss_d0",
    "loss_d1",
    "wall_ms",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub env_step: u64,
    pub seed: u64,
    pub task: String,
    pub k: usize,
    pub mode: String,
    pub success_rate: f64,
    pub mean_return: f64,
    pub loss_d0: f64,
    pub loss_d1: f64,
    pub wall_ms: u64,
}

impl Row {
    /// Identifies the configuration a row belongs to.
    pub fn label(&self) -> String {
        format!("k={} {}", self.k, self.mode)
    }
}

pub fn write_rows<W: Write>(rows: &[Row], mut w: W) -> Result<(), BenchError> {
    writeln!(w, "{CSV_VERSION}")?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(COLUMNS)?;
    for r in rows {
        out.write_record([
            r.env_step.to_string(),
            r.seed.to_string(),
            r.task.clone(),
            r.k.to_string(),
            r.mode.clone(),
            r.success_rate.to_string(),
            r.mean_return.to_string(),
            r.loss_d0.to_string(),
            r.loss_d1.to_string(),
            r.wall_ms.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_rows_to(rows: &[Row], path: &Path) -> Result<(), BenchError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut buf = Vec::new();
    write_rows(rows, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// Parses a CSV; errors name the 1-based file line.
pub fn read_rows<R: Read>(r: R) -> Result<Vec<Row>, BenchError> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(COLUMNS) {
        return Err(BenchError::Parse {
            line: rdr.position().line() as usize,
            msg: format!("unexpected header {:?}", headers.iter().collect::<Vec<_>>()),
        });
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| BenchError::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let bad = |col: usize| BenchError::Parse {
            line,
            msg: format!("bad {} value {:?}", COLUMNS[col], &rec[col]),
        };
        macro_rules! field {
            ($i:expr) => {
                rec[$i].trim().parse().map_err(|_| bad($i))?
            };
        }
        rows.push(Row {
            env_step: field!(0),
            seed: field!(1),
            task: rec[2].to_string(),
            k: field!(3),
            mode: rec[4].to_string(),
            success_rate: field!(5),
            mean_return: field!(6),
            loss_d0: field!(7),
            loss_d1: field!(8),
            wall_ms: field!(9),
        });
    }
    Ok(rows)
}

pub fn read_rows_from(path: &Path) -> Result<Vec<Row>, BenchError> {
    let f = std::fs::File::open(path)?;
    read_rows(f).map_err(|e| match e {
        BenchError::Parse { line, msg } => BenchError::Parse {
            line,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// 1-based ranks, ties get the average of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rank correlation: Pearson correlation of average ranks.
/// `None` when either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len());
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        None
    } else {
        Some(cov / (vx * vy).sqrt())
    }
}

/// Last evaluation per seed of one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalResult {
    pub task: String,
    pub k: usize,
    pub mode: String,
    pub per_seed: BTreeMap<u64, f64>,
    /// Mean over seeds of the `wall_ms` of the last row.
    pub wall_ms: f64,
}

impl FinalResult {
    pub fn values(&self) -> Vec<f64> {
        self.per_seed.values().copied().collect()
    }

    pub fn mean(&self) -> f64 {
        mean(&self.values())
    }

    pub fn std(&self) -> f64 {
        std_dev(&self.values())
    }
}

/// Groups rows by (task, k, mode) and keeps the final success of every seed.
pub fn final_results(rows: &[Row]) -> Vec<FinalResult> {
    let mut groups: BTreeMap<(String, usize, String), BTreeMap<u64, &Row>> = BTreeMap::new();
    for r in rows {
        let slot = groups
            .entry((r.task.clone(), r.k, r.mode.clone()))
            .or_default()
            .entry(r.seed)
            .or_insert(r);
        if r.env_step >= slot.env_step {
            *slot = r;
        }
    }
    groups
        .into_iter()
        .map(|((task, k, mode), seeds)| {
            let walls: Vec<f64> = seeds.values().map(|r| r.wall_ms as f64).collect();
            FinalResult {
                task,
                k,
                mode,
                per_seed: seeds.iter().map(|(&s, r)| (s, r.success_rate)).collect(),
                wall_ms: mean(&walls),
            }
        })
        .collect()
}

/// Markdown table of final success, mean ± std across seeds. With
/// `relative_wall`, adds wall-clock relative to the fastest configuration.
pub fn summary_table(results: &[FinalResult], relative_wall: bool) -> String {
    let fastest = results.iter().map(|r| r.wall_ms).fold(f64::INFINITY, f64::min);
    let mut s = String::new();
    if relative_wall {
        s.push_str("| task | k | mode | seeds | final success | std | wall ms | relative wall |\n");
        s.push_str("|---|---|---|---|---|---|---|---|\n");
    } else {
        s.push_str("| task | k | mode | seeds | final success | std |\n");
        s.push_str("|---|---|---|---|---|---|\n");
    }
    for r in results {
        let _ = write!(
            s,
            "| {} | {} | {} | {} | {:.3} | {:.3} |",
            r.task,
            r.k,
            r.mode,
            r.per_seed.len(),
            r.mean(),
            r.std()
        );
        if relative_wall {
            let rel = if fastest > 0.0 { r.wall_ms / fastest } else { f64::NAN };
            let _ = write!(s, " {:.0} | {:.2} |", r.wall_ms, rel);
        }
        s.push('\n');
    }
    s
}

/// Spearman correlation between K and per-seed final success.
pub fn k_trend(results: &[FinalResult]) -> Option<f64> {
    let mut ks = Vec::new();
    let mut ys = Vec::new();
    for r in results {
        for v in r.per_seed.values() {
            ks.push(r.k as f64);
            ys.push(*v);
        }
    }
    if ks.len() < 2 {
        return None;
    }
    spearman(&ks, &ys)
}
