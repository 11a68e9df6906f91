//! Experiment execution: expands a config into independent cells, runs them
//! on a bounded worker pool and streams rows into the CSV sinks.

use crate::config::{ExperimentConfig, Kind, Weighting};
use crate::sink::{self, fmt_f64, CsvSink};
use pgvlab_core::agents::{fig1_run, run_training};
use pgvlab_core::envs::generate_random_mdp;
use pgvlab_core::envs::make_env;
use pgvlab_core::probe::{run_probe, train_gathering_agent};
use pgvlab_core::variance::{
    clt_variance, delta_reports, exact_moments, ma_optimality, random_logits, StepWeight,
};
use pgvlab_core::{AgentConfig, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

pub const THREADS_ENV: &str = "PGVLAB_THREADS";

pub fn artifact_version() -> String {
    match option_env!("PGVLAB_GIT_DESCRIBE") {
        Some(g) => format!("pgvlab-{}-{g}", env!("CARGO_PKG_VERSION")),
        None => format!("pgvlab-{}", env!("CARGO_PKG_VERSION")),
    }
}

#[derive(Debug)]
pub enum RunError {
    Io(std::io::Error),
    Setup(String),
    /// Some cells failed; the rows of the others were still written.
    Cells { failed: usize, total: usize, first: String },
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Io(e) => write!(f, "io: {e}"),
            RunError::Setup(m) => f.write_str(m),
            RunError::Cells { failed, total, first } => write!(f, "{failed} of {total} cells failed; first: {first}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Io(e)
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub seed_offset: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { out: None, workers: None, seed_offset: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub data_file: PathBuf,
    pub cells: usize,
    pub rows: usize,
    pub workers: usize,
}

/// Requested workers, else the available cores, capped by `PGVLAB_THREADS`.
pub fn resolve_workers(requested: Option<usize>, cap: Option<&str>) -> usize {
    let base = requested.unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    let cap = cap.and_then(|c| c.trim().parse::<usize>().ok()).filter(|&c| c >= 1);
    cap.map_or(base, |c| base.min(c)).max(1)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed a cell's RNGs from the master seed and its listed seed.
pub fn cell_seed(master: u64, seed: u64) -> u64 {
    splitmix64(master ^ splitmix64(seed))
}

#[derive(Clone, Debug, PartialEq)]
enum Cell {
    Theory { seed: u64 },
    Fig1 { batch: usize, n: usize, seed: u64 },
    Agents { variant: Variant, seed: u64 },
    Probe { seed: u64 },
}

impl Cell {
    fn seed(&self) -> u64 {
        match self {
            Cell::Theory { seed } | Cell::Fig1 { seed, .. } | Cell::Agents { seed, .. } | Cell::Probe { seed } => *seed,
        }
    }

    fn label(&self) -> String {
        match self {
            Cell::Theory { seed } => format!("mdp={seed}"),
            Cell::Fig1 { batch, n, seed } => format!("batch={batch} N={n} seed={seed}"),
            Cell::Agents { variant, seed } => format!("{variant} seed={seed}"),
            Cell::Probe { seed } => format!("seed={seed}"),
        }
    }
}

fn cells(cfg: &ExperimentConfig, offset: u64) -> Vec<Cell> {
    let seeds: Vec<u64> = cfg.seeds.iter().map(|s| s.wrapping_add(offset)).collect();
    match cfg.kind {
        Kind::Theory => seeds.iter().map(|&seed| Cell::Theory { seed }).collect(),
        Kind::Fig1 => {
            let mut out = Vec::new();
            for &batch in &cfg.fig1.batches {
                for &n in &cfg.fig1.n_values {
                    out.extend(seeds.iter().map(|&seed| Cell::Fig1 { batch, n, seed }));
                }
            }
            out
        }
        Kind::Agents => {
            let mut out = Vec::new();
            for &variant in &cfg.agents.variants {
                out.extend(seeds.iter().map(|&seed| Cell::Agents { variant, seed }));
            }
            out
        }
        Kind::Probe => seeds.iter().map(|&seed| Cell::Probe { seed }).collect(),
    }
}

fn data_file(kind: Kind) -> (&'static str, &'static [&'static str]) {
    match kind {
        Kind::Theory => ("theory.csv", sink::THEORY_COLUMNS),
        Kind::Fig1 => ("fig1.csv", sink::FIG1_COLUMNS),
        Kind::Agents => ("curves.csv", sink::CURVES_COLUMNS),
        Kind::Probe => ("bias_variance.csv", sink::BIAS_VARIANCE_COLUMNS),
    }
}

type Rows = Vec<Vec<String>>;

/// Theory rows of one random MDP: sizes, policy and MDP all follow from the
/// cell seed.
pub fn theory_rows(cfg: &ExperimentConfig, seed: u64) -> pgvlab_core::Result<Rows> {
    let th = &cfg.theory;
    let cs = cell_seed(cfg.master_seed, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cs);
    let s = rng.random_range(2..=th.max_states);
    let a = rng.random_range(2..=th.max_actions);
    let mdp = generate_random_mdp(cs, s, a, th.reward_scale, th.mixing)?;
    let logits = random_logits(cs, s * a, th.logit_scale);
    // enough lags for every T and for the delta-T tail
    let mut lags = 0;
    for &t in &th.t_values {
        for &d in &th.deltas {
            lags = lags.max(t + (d * t as f64).ceil() as usize - 1);
        }
    }
    let weight = match th.weighting {
        Weighting::Uniform => StepWeight::Uniform,
        Weighting::Discounted => StepWeight::Discounted,
    };
    let m = exact_moments(&mdp, &logits, lags, weight)?;
    let mut rows = Vec::new();
    for &t in &th.t_values {
        for &n in &th.n_values {
            let v = clt_variance(&m, t, n)?;
            for &d in &th.deltas {
                let dr = delta_reports(&m, t, n, d)?;
                let opt = ma_optimality(&m, t, n, d)?;
                let (dn, dt) = (dr.delta_n_trace(), dr.delta_t_trace());
                rows.push(vec![
                    seed.to_string(),
                    s.to_string(),
                    a.to_string(),
                    t.to_string(),
                    n.to_string(),
                    fmt_f64(d),
                    fmt_f64(v.total_trace()),
                    fmt_f64(v.marginalized_trace()),
                    fmt_f64(v.policy_dependent_trace()),
                    fmt_f64(dn),
                    fmt_f64(dt),
                    fmt_f64(opt.lhs),
                    fmt_f64(opt.rhs),
                    opt.ma_preferred.to_string(),
                    (opt.ma_preferred == (dn <= dt)).to_string(),
                ]);
            }
        }
    }
    Ok(rows)
}

fn fig1_rows(cfg: &ExperimentConfig, batch: usize, n: usize, seed: u64) -> pgvlab_core::Result<Rows> {
    let run = pgvlab_core::agents::Fig1Config { batch, n, ..cfg.fig1.base.clone() };
    let o = fig1_run(&run, cell_seed(cfg.master_seed, seed))?;
    Ok(vec![vec![
        batch.to_string(),
        n.to_string(),
        seed.to_string(),
        o.steps_to_solve.map(|s| s.to_string()).unwrap_or_default(),
        fmt_f64(o.mean_update_gain),
    ]])
}

fn agents_rows(cfg: &ExperimentConfig, variant: Variant, seed: u64) -> pgvlab_core::Result<Rows> {
    let cs = cell_seed(cfg.master_seed, seed);
    let mut env = make_env(&cfg.env, cs)?;
    let mut eval_env = make_env(&cfg.env, splitmix64(cs))?;
    let a = &cfg.agents;
    let agent = AgentConfig { variant, ..a.agent.clone() };
    let (curve, _) =
        run_training(env.as_mut(), eval_env.as_mut(), &agent, cs, a.total_steps, a.eval_interval, a.eval_episodes)?;
    Ok(curve
        .points
        .iter()
        .map(|(step, r)| vec![variant.to_string(), seed.to_string(), step.to_string(), fmt_f64(*r)])
        .collect())
}

fn probe_rows(cfg: &ExperimentConfig, seed: u64) -> pgvlab_core::Result<Rows> {
    let cs = cell_seed(cfg.master_seed, seed);
    let p = &cfg.probe;
    let mut env = make_env(&cfg.env, cs)?;
    let checkpoints = train_gathering_agent(env.as_mut(), &cfg.agents.agent, p.total_steps, p.probe.n_checkpoints, cs)?;
    let mut probe_env = make_env(&cfg.env, splitmix64(cs))?;
    let rows = run_probe(probe_env.as_mut(), &p.probe, &checkpoints, cs)?;
    Ok(rows
        .iter()
        .map(|r| {
            vec![
                r.checkpoint.to_string(),
                r.method.to_string(),
                fmt_f64(r.relative_bias),
                fmt_f64(r.relative_variance),
                fmt_f64(r.mean_grad_norm),
                r.excluded_params.to_string(),
            ]
        })
        .collect())
}

fn run_cell(cfg: &ExperimentConfig, cell: &Cell) -> pgvlab_core::Result<Rows> {
    match *cell {
        Cell::Theory { seed } => theory_rows(cfg, seed),
        Cell::Fig1 { batch, n, seed } => fig1_rows(cfg, batch, n, seed),
        Cell::Agents { variant, seed } => agents_rows(cfg, variant, seed),
        Cell::Probe { seed } => probe_rows(cfg, seed),
    }
}

struct Finished {
    index: usize,
    rows: pgvlab_core::Result<Rows>,
    started_ms: u128,
    wall_ms: u128,
}

/// Run every cell of `cfg`, writing the data CSV and `run_record.csv` under
/// the output directory. Completed rows stay on disk if a later cell fails.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary, RunError> {
    let out_dir = opts.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("results"));
    std::fs::create_dir_all(&out_dir)?;
    let workers = resolve_workers(opts.workers, std::env::var(THREADS_ENV).ok().as_deref());
    let cells = cells(cfg, opts.seed_offset);
    let (name, columns) = data_file(cfg.kind);
    let data_path = out_dir.join(name);
    let mut data = CsvSink::create(&data_path, columns)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| RunError::Setup(format!("cannot start {workers} workers: {e}")))?;

    let (tx, rx) = mpsc::channel::<Finished>();
    let mut finished: Vec<Option<Finished>> = (0..cells.len()).map(|_| None).collect();
    let mut io_error = None;
    std::thread::scope(|scope| {
        let cells = &cells;
        let pool = &pool;
        scope.spawn(move || {
            pool.scope(|s| {
                for (index, cell) in cells.iter().enumerate() {
                    let tx = tx.clone();
                    s.spawn(move |_| {
                        let started_ms = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis());
                        let t0 = Instant::now();
                        let rows = run_cell(cfg, cell);
                        let _ = tx.send(Finished { index, rows, started_ms, wall_ms: t0.elapsed().as_millis() });
                    });
                }
            });
        });
        for f in rx {
            let rows = f.rows.as_ref().map(|r| r.clone()).unwrap_or_default();
            if io_error.is_none() {
                if let Err(e) = data.submit(f.index, rows) {
                    io_error = Some(e);
                }
            }
            let i = f.index;
            finished[i] = Some(f);
        }
    });
    if let Some(e) = io_error {
        return Err(e.into());
    }

    let mut record = CsvSink::create(&out_dir.join("run_record.csv"), sink::RUN_RECORD_COLUMNS)?;
    let version = artifact_version();
    let mut failed = Vec::new();
    let mut record_rows = Vec::with_capacity(cells.len());
    for (cell, f) in cells.iter().zip(&finished) {
        let f = f.as_ref().expect("every cell reports back");
        let (outcome, n) = match &f.rows {
            Ok(r) => ("ok".to_string(), r.len()),
            Err(e) => {
                failed.push(format!("{}: {e}", cell.label()));
                (format!("error: {e}").replace([',', '\n'], ";"), 0)
            }
        };
        record_rows.push(vec![
            cfg.hash.clone(),
            version.clone(),
            cfg.kind.as_str().to_string(),
            cell.label(),
            cell.seed().to_string(),
            outcome,
            n.to_string(),
            f.started_ms.to_string(),
            f.wall_ms.to_string(),
        ]);
    }
    record.submit(0, record_rows)?;
    if !failed.is_empty() {
        return Err(RunError::Cells { failed: failed.len(), total: cells.len(), first: failed[0].clone() });
    }
    Ok(RunSummary { out_dir, data_file: data_path, cells: cells.len(), rows: data.rows_written(), workers })
}

/// Read a data CSV written by this crate: returns the header and the rows.
pub fn read_csv(path: &Path) -> std::io::Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(l) if l == sink::SCHEMA_LINE => {}
        other => {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("expected {:?} as the first line, found {other:?}", sink::SCHEMA_LINE),
            ))
        }
    }
    let header = lines.next().unwrap_or("").split(',').map(str::to_string).collect();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worker_cap() {
        assert_eq!(resolve_workers(Some(8), Some("2")), 2);
        assert_eq!(resolve_workers(Some(1), Some("4")), 1);
        assert_eq!(resolve_workers(Some(3), Some("junk")), 3);
        assert_eq!(resolve_workers(Some(0), None), 1);
    }

    #[test]
    fn cell_seeds_differ() {
        assert_ne!(cell_seed(0, 1), cell_seed(0, 2));
        assert_ne!(cell_seed(0, 1), cell_seed(1, 1));
        assert_eq!(cell_seed(5, 9), cell_seed(5, 9));
    }
}
