use pgvlab_cli::config::{nearest_key, parse_config};
use pgvlab_cli::runner::{read_csv, run_experiment, RunOptions};
use std::path::Path;
use std::process::Command;

const THEORY: &str = r#"
kind = "theory"
master_seed = 3
seeds = [0, 1]

[theory]
t_values = [1, 2, 4]
n_values = [1, 3]
deltas = [1.0, 0.5]
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pgvlab"))
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run(text: &str, out: &Path, workers: usize, offset: u64) -> std::path::PathBuf {
    let cfg = parse_config(text).unwrap();
    run_experiment(&cfg, &RunOptions { out: Some(out.to_path_buf()), workers: Some(workers), seed_offset: offset })
        .unwrap()
        .data_file
}

#[test]
fn unknown_key_names_the_nearest_valid_one_with_its_line() {
    let err = parse_config("kind = \"agents\"\nseeds = [0]\n\n[agent]\nclip_coeff = 0.1\n").unwrap_err();
    assert_eq!(err.0.len(), 1);
    assert_eq!(err.0[0].line, Some(5));
    assert!(err.0[0].message.contains("did you mean \"clip\""), "{}", err.0[0].message);
    assert_eq!(nearest_key("n_estimate", &["n_estimates", "probe_batch"]), Some("n_estimates"));
}

#[test]
fn out_of_range_values_are_rejected() {
    let err = parse_config("kind = \"agents\"\nseeds = [0]\n[agent]\nlam = 1.5\n").unwrap_err();
    assert!(err.to_string().contains("line 4: agent.lam: 1.5 is out of range"), "{err}");
    let err = parse_config("kind = \"theory\"\nseeds = [0]\n[theory]\nmixing = -0.1\nt_values = [0]\n").unwrap_err();
    assert_eq!(err.0.len(), 2);
}

#[test]
fn every_problem_is_reported_at_once() {
    let err = parse_config("kind = \"fig1\"\nseeds = []\ncolour = 1\n[agent]\nlam = 0.9\n").unwrap_err();
    let text = err.to_string();
    assert!(text.contains("seeds: must list at least one seed"));
    assert!(text.contains("colour: unknown key"));
    assert!(text.contains("section is not used by kind = \"fig1\""));
}

#[test]
fn syntax_errors_carry_a_line() {
    let err = parse_config("kind = \"theory\"\nseeds = [0\n").unwrap_err();
    assert!(err.0[0].line.is_some());
}

#[test]
fn hash_ignores_key_order_but_not_values() {
    let a = parse_config("kind = \"theory\"\nseeds = [1]\n[theory]\nmixing = 0.3\nlogit_scale = 2.0\n").unwrap();
    let b = parse_config("seeds = [1]\nkind = \"theory\"\n[theory]\nlogit_scale = 2.0\nmixing = 0.3\n").unwrap();
    let c = parse_config("kind = \"theory\"\nseeds = [1]\n[theory]\nmixing = 0.31\nlogit_scale = 2.0\n").unwrap();
    assert_eq!(a.hash, b.hash);
    assert_ne!(a.hash, c.hash);
    assert_eq!(a.hash.len(), 64);
}

#[test]
fn empty_seed_list_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", "kind = \"theory\"\nseeds = []\n");
    let out = bin().args(["validate"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    let out = bin().args(["run"]).arg(&cfg).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("theory.csv").exists());
}

#[test]
fn validate_accepts_a_good_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "ok.toml", THEORY);
    let out = bin().arg("validate").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("ok (theory config"));
}

#[test]
fn binary_runs_and_honours_the_thread_cap() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "t.toml", THEORY);
    let out = bin()
        .arg("run")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("o"))
        .args(["--workers", "4"])
        .env("PGVLAB_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("(2 workers)"));
    assert!(dir.path().join("o/theory.csv").exists());
    assert!(dir.path().join("o/run_record.csv").exists());
}

#[test]
fn theory_csv_schema_and_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let path = run(THEORY, dir.path(), 1, 0);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("# schema=v1\n"));
    let (header, rows) = read_csv(&path).unwrap();
    assert_eq!(
        header.join(","),
        "mdp_seed,S,A,T,N,delta,var_total,var_marg,var_poldep,delta_N,delta_T,thm_lhs,thm_rhs,ma_preferred,verdict_matches"
    );
    assert_eq!(rows.len(), 2 * 3 * 2 * 2);
    for r in &rows {
        let t: f64 = r[3].parse().unwrap();
        let total: f64 = r[6].parse().unwrap();
        let parts: f64 = r[7].parse::<f64>().unwrap() + r[8].parse::<f64>().unwrap();
        assert!((t * total - parts).abs() <= 1e-12 * (1.0 + parts.abs()));
        let lhs: f64 = r[11].parse().unwrap();
        let rhs: f64 = r[12].parse().unwrap();
        assert_eq!(r[13], (lhs >= rhs).to_string());
        assert_eq!(r[14], "true");
    }
}

#[test]
fn output_bytes_do_not_depend_on_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let a = std::fs::read(run(THEORY, &dir.path().join("a"), 1, 0)).unwrap();
    let b = std::fs::read(run(THEORY, &dir.path().join("b"), 3, 0)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn seed_offset_shifts_the_listed_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let one = THEORY.replace("seeds = [0, 1]", "seeds = [1]");
    let zero = THEORY.replace("seeds = [0, 1]", "seeds = [0]");
    let a = std::fs::read(run(&one, &dir.path().join("a"), 1, 0)).unwrap();
    let b = std::fs::read(run(&zero, &dir.path().join("b"), 1, 1)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn run_record_keeps_hash_and_timings() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(THEORY).unwrap();
    run(THEORY, dir.path(), 1, 0);
    let (header, rows) = read_csv(&dir.path().join("run_record.csv")).unwrap();
    assert_eq!(header[0], "config_hash");
    assert!(header.contains(&"wall_ms".to_string()));
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert_eq!(r[0], cfg.hash);
        assert_eq!(r[5], "ok");
    }
}

#[test]
fn small_fig1_agents_and_probe_runs() {
    let dir = tempfile::tempdir().unwrap();
    let fig1 = "kind = \"fig1\"\nseeds = [0]\n[fig1]\nbatches = [16]\nn_values = [1, 2]\nmax_steps = 200\ngain_episodes = 2\n";
    let (h, rows) = read_csv(&run(fig1, &dir.path().join("f"), 1, 0)).unwrap();
    assert_eq!(h.join(","), "batch,N,seed,steps_to_solve,mean_update_gain");
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r[3].is_empty() || r[3].parse::<usize>().is_ok()));

    let agents = "kind = \"agents\"\nseeds = [0]\nenv = \"cartpole\"\n[agent]\nvariants = [\"ppo\", \"mbma\"]\nbatch_size = 64\nminibatch = 32\nepochs = 1\nextra = 2\nhorizon = 2\ntotal_steps = 256\neval_interval = 128\neval_episodes = 1\nhidden = [8]\nmodel_hidden = [8]\nq_hidden = [8]\nmodel_steps = 2\nq_epochs = 1\n";
    let (h, rows) = read_csv(&run(agents, &dir.path().join("a"), 1, 0)).unwrap();
    assert_eq!(h.join(","), "variant,seed,step,eval_return");
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0][0], "PPO");
    assert_eq!(rows[2][0], "MBMA");

    let probe = "kind = \"probe\"\nseeds = [0]\n[agent]\nbatch_size = 64\nminibatch = 32\nepochs = 1\nhidden = [8]\nmodel_hidden = [8]\nq_hidden = [8]\nmodel_steps = 5\nq_epochs = 1\n[probe]\ntotal_steps = 128\nn_checkpoints = 2\nn_estimates = 3\nprobe_batch = 16\nextra = 2\nhorizon = 2\n";
    let (h, rows) = read_csv(&run(probe, &dir.path().join("p"), 1, 0)).unwrap();
    assert_eq!(h.join(","), "checkpoint,method,rel_bias,rel_var,mean_grad_norm,excluded_params");
    assert_eq!(rows.len(), 2 * 4);
    assert_eq!(rows.iter().map(|r| r[1].as_str()).collect::<Vec<_>>()[..4], ["AC", "QMA", "MBMA", "MBPO"]);
    for r in &rows {
        assert!(r[2].parse::<f64>().unwrap() >= 0.0);
        assert!(r[3].parse::<f64>().unwrap() >= 0.0);
    }
}
