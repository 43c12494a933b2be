use std::path::Path;
use std::process::Command;

use qte_bench::plot::{curves, plot_rows};
use qte_bench::report::{read_rows_from, std_dev, Row};

const FAST: [&str; 5] = [
    "--steps=40",
    "--eval.interval=20",
    "--eval.episodes=5",
    "--agent.batch_size=8",
    "--demos=3",
];

fn qte(out: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_qte"))
        .env("QTE_OUT", out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &std::process::Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn run_is_byte_deterministic_and_honours_out_env() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut args = vec!["run", "--seeds=0,1,2,3,4"];
    args.extend(FAST);
    ok(&qte(a.path(), &args));
    ok(&qte(b.path(), &args));
    let name = "reach_ambiguous_k3_k10_both.csv";
    let x = std::fs::read(a.path().join(name)).unwrap();
    let y = std::fs::read(b.path().join(name)).unwrap();
    assert_eq!(x, y);
    let rows = read_rows_from(&a.path().join(name)).unwrap();
    let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    seeds.dedup();
    assert_eq!(seeds, vec![0, 1, 2, 3, 4]);
    for s in 0..5 {
        assert!(a.path().join(format!("reach_ambiguous_k3_k10_both_seed{s}.csv")).exists());
        assert!(a.path().join(format!("reach_ambiguous_k3_k10_both_seed{s}.ckpt")).exists());
        let steps: Vec<u64> = rows.iter().filter(|r| r.seed == s).map(|r| r.env_step).collect();
        assert_eq!(steps, vec![0, 20, 40]);
    }
}

#[test]
fn zero_steps_gives_only_initial_row() {
    let d = tempfile::tempdir().unwrap();
    let mut args = vec!["run", "--seeds=7"];
    args.extend(FAST);
    args.push("--steps=0");
    ok(&qte(d.path(), &args));
    let rows = read_rows_from(&d.path().join("reach_ambiguous_k3_k10_both.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].env_step, 0);
    assert!(rows[0].loss_d0.is_nan());
}

#[test]
fn config_file_errors_name_the_line() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("bad.cfg");
    std::fs::write(&cfg, "# experiment\nagent.k=5\nagent.k=five\n").unwrap();
    let out = qte(d.path(), &["--config", cfg.to_str().unwrap(), "run"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
    let out = qte(d.path(), &["run", "--task=reach_nowhere"]);
    assert!(!out.status.success());
}

#[test]
fn config_file_then_flag_override() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("exp.cfg");
    std::fs::write(&cfg, "task=reach_unique\nagent.k=3\nseeds=4\nsteps=0\neval.episodes=3\n").unwrap();
    ok(&qte(d.path(), &["--config", cfg.to_str().unwrap(), "run", "--agent.k=2"]));
    assert!(d.path().join("reach_unique_k2_both.csv").exists());
}

#[test]
fn sweeps_emit_tables_from_csvs() {
    let d = tempfile::tempdir().unwrap();
    let mut args = vec!["sweep-k", "--ks", "1,3", "--seeds=0,1"];
    args.extend(FAST);
    let out = qte(d.path(), &args);
    ok(&out);
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("| reach_ambiguous_k3 | 1 | both | 2 |"), "{table}");
    assert!(table.contains("spearman"));

    let mut args = vec!["sweep-mode", "--seeds=0", "--agent.k=1"];
    args.extend(FAST);
    let out = qte(d.path(), &args);
    ok(&out);
    let table = String::from_utf8_lossy(&out.stdout);
    for m in ["none", "act", "target", "both"] {
        assert!(table.contains(&format!("| {m} |")), "{table}");
    }
    assert!(table.contains("relative wall"));
    // K=1: none and act are the same run apart from labels and timing
    let strip = |m: &str| -> Vec<(u64, f64, f64)> {
        read_rows_from(&d.path().join(format!("reach_ambiguous_k3_k1_{m}.csv")))
            .unwrap()
            .iter()
            .map(|r| (r.env_step, r.success_rate, r.loss_d0))
            .collect()
    };
    assert_eq!(format!("{:?}", strip("none")), format!("{:?}", strip("act")));
}

#[test]
fn demo_gen_and_inspect_tree() {
    let d = tempfile::tempdir().unwrap();
    let demos = d.path().join("demos.jsonl");
    ok(&qte(d.path(), &["demo-gen", "--out", demos.to_str().unwrap(), "--demos=4", "--task=stack2_ambiguous"]));
    let text = std::fs::read_to_string(&demos).unwrap();
    assert!(text.lines().next().unwrap().contains("\"version\":1"));
    assert_eq!(text.lines().count(), 1 + 4 * 5);

    let trace = d.path().join("trace.txt");
    let grid = d.path().join("grid.txt");
    let out = qte(
        d.path(),
        &[
            "inspect-tree",
            "--demos",
            demos.to_str().unwrap(),
            "--out",
            trace.to_str().unwrap(),
            "--grid",
            grid.to_str().unwrap(),
            "--agent.k=3",
        ],
    );
    ok(&out);
    let t = std::fs::read_to_string(&trace).unwrap();
    // root record, three top-k roots, their final-depth leaves
    assert!(t.lines().filter(|l| !l.starts_with('#')).count() >= 4, "{t}");
    assert_eq!(std::fs::read_to_string(&grid).unwrap().lines().count(), 512);
}

fn fixture_rows() -> Vec<Row> {
    let success = [
        [0.0, 0.5, 0.75],
        [0.0, 0.25, 1.0],
        [0.1, 0.5, 0.5],
        [0.0, 0.75, 1.0],
        [0.05, 0.4, 0.9],
    ];
    let mut rows = Vec::new();
    for (seed, curve) in success.iter().enumerate() {
        for (i, &s) in curve.iter().enumerate() {
            rows.push(Row {
                env_step: 100 * i as u64,
                seed: seed as u64,
                task: "reach_ambiguous_k3".into(),
                k: 10,
                mode: "both".into(),
                success_rate: s,
                mean_return: 100.0 * s,
                loss_d0: 1.0,
                loss_d1: 1.0,
                wall_ms: 0,
            });
        }
    }
    rows
}

#[test]
fn plot_band_matches_population_std() {
    let rows = fixture_rows();
    let c = curves(&rows);
    let curve = &c["reach_ambiguous_k3"]["k=10 both"];
    // spreadsheet STDEV.P of each column
    let expected = [0.04, 0.16309506430300091, 0.18867962264113208];
    for (i, &(_, m, sd)) in curve.iter().enumerate() {
        let col: Vec<f64> = rows.iter().filter(|r| r.env_step == 100 * i as u64).map(|r| r.success_rate).collect();
        assert!((sd - std_dev(&col)).abs() < 1e-12);
        assert!((sd - expected[i]).abs() < 1e-12, "{sd}");
        assert!((m - col.iter().sum::<f64>() / 5.0).abs() < 1e-12);
    }
    let one: Vec<Row> = rows.iter().filter(|r| r.seed == 0).cloned().collect();
    assert!(curves(&one)["reach_ambiguous_k3"]["k=10 both"].iter().all(|p| p.2 == 0.0));

    let d = tempfile::tempdir().unwrap();
    let files = plot_rows(&rows, d.path()).unwrap();
    assert_eq!(files.len(), 1);
    let svg = std::fs::read_to_string(&files[0]).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("polygon") && svg.contains("polyline"));
    let again = plot_rows(&rows, d.path()).unwrap();
    assert_eq!(std::fs::read_to_string(&again[0]).unwrap(), svg);
}

#[test]
fn plot_rejects_empty_and_malformed_input() {
    let d = tempfile::tempdir().unwrap();
    let out_dir = d.path().join("plots");
    assert!(plot_rows(&[], &out_dir).is_err());
    assert!(!out_dir.exists());

    let csv = d.path().join("bad.csv");
    std::fs::write(
        &csv,
        "# qte-bench csv v1\nenv_step,seed,task,k,mode,success_rate,mean_return,loss_d0,loss_d1,wall_ms\n0,0,t,1,none,oops,0,0,0,0\n",
    )
    .unwrap();
    let out = qte(d.path(), &["plot", csv.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
    assert!(!out_dir.exists());
}
