//! Experiment configuration: TOML parsing, validation with line numbers and
//! nearest-key suggestions, and a hash that ignores key order.

use pgvlab_core::agents::AnnealDirection;
use pgvlab_core::ndiff::Activation;
use pgvlab_core::{AgentConfig, Method, ProbeConfig, Variant};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use toml::{Table, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Theory,
    Fig1,
    Agents,
    Probe,
}

impl Kind {
    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Theory => "theory",
            Kind::Fig1 => "fig1",
            Kind::Agents => "agents",
            Kind::Probe => "probe",
        }
    }

    /// Sections this kind reads.
    fn sections(self) -> &'static [&'static str] {
        match self {
            Kind::Theory => &["theory"],
            Kind::Fig1 => &["fig1"],
            Kind::Agents => &["agent"],
            Kind::Probe => &["agent", "probe"],
        }
    }
}

/// Per-step weighting of the tabular estimator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weighting {
    Uniform,
    Discounted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TheorySettings {
    pub max_states: usize,
    pub max_actions: usize,
    pub t_values: Vec<usize>,
    pub n_values: Vec<usize>,
    pub deltas: Vec<f64>,
    pub mixing: f64,
    pub reward_scale: f64,
    pub logit_scale: f64,
    pub weighting: Weighting,
}

impl Default for TheorySettings {
    fn default() -> Self {
        TheorySettings {
            max_states: 5,
            max_actions: 3,
            t_values: vec![1, 2, 4, 8, 16],
            n_values: vec![1, 2, 4, 8],
            deltas: vec![1.0],
            mixing: 0.5,
            reward_scale: 1.0,
            logit_scale: 1.0,
            weighting: Weighting::Uniform,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fig1Settings {
    pub batches: Vec<usize>,
    pub n_values: Vec<usize>,
    pub base: pgvlab_core::agents::Fig1Config,
}

impl Default for Fig1Settings {
    fn default() -> Self {
        Fig1Settings { batches: vec![32, 128, 512], n_values: vec![1, 2, 4], base: Default::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentsSettings {
    pub variants: Vec<Variant>,
    pub total_steps: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub agent: AgentConfig,
}

impl Default for AgentsSettings {
    fn default() -> Self {
        AgentsSettings {
            variants: Variant::ALL.to_vec(),
            total_steps: 200_000,
            eval_interval: 10_000,
            eval_episodes: 10,
            agent: AgentConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSettings {
    /// Real steps of the gathering run.
    pub total_steps: usize,
    pub probe: ProbeConfig,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings { total_steps: 200_000, probe: ProbeConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub kind: Kind,
    pub master_seed: u64,
    pub seeds: Vec<u64>,
    pub env: String,
    pub out: Option<PathBuf>,
    pub theory: TheorySettings,
    pub fig1: Fig1Settings,
    pub agents: AgentsSettings,
    pub probe: ProbeSettings,
    /// Hex SHA-256 of the canonical form.
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Every problem found in a config, in source order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<Diagnostic>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

const TOP_KEYS: &[&str] = &["kind", "master_seed", "seeds", "env", "out", "theory", "fig1", "agent", "probe"];
const THEORY_KEYS: &[&str] = &[
    "max_states",
    "max_actions",
    "t_values",
    "n_values",
    "deltas",
    "mixing",
    "reward_scale",
    "logit_scale",
    "weighting",
];
const FIG1_KEYS: &[&str] = &[
    "batches",
    "n_values",
    "horizon",
    "gamma",
    "lam",
    "hidden",
    "actor_lr",
    "critic_lr",
    "critic_epochs",
    "max_grad_norm",
    "max_steps",
    "eval_every",
    "solve_window",
    "solve_threshold",
    "gain_episodes",
];
const AGENT_KEYS: &[&str] = &[
    "variants",
    "total_steps",
    "eval_interval",
    "eval_episodes",
    "batch_size",
    "extra",
    "horizon",
    "clip",
    "lam",
    "gamma",
    "epochs",
    "minibatch",
    "value_coef",
    "max_grad_norm",
    "anneal_fraction",
    "anneal",
    "actor_lr",
    "critic_lr",
    "hidden",
    "activation",
    "model_hidden",
    "model_lr",
    "model_steps",
    "model_batch",
    "q_hidden",
    "q_lr",
    "q_epochs",
    "buffer_capacity",
];
const PROBE_KEYS: &[&str] =
    &["total_steps", "n_estimates", "probe_batch", "n_checkpoints", "methods", "extra", "horizon", "gamma", "lam"];

/// Closest valid key to a misspelt one. A key that contains, or is contained
/// in, a valid key wins outright; otherwise the best normalized edit
/// similarity of at least 0.5.
pub fn nearest_key<'a>(unknown: &str, candidates: &[&'a str]) -> Option<&'a str> {
    let u = unknown.to_ascii_lowercase();
    let contained = candidates
        .iter()
        .filter(|c| u.contains(*c) || c.contains(u.as_str()))
        .max_by_key(|c| c.len());
    if let Some(c) = contained {
        return Some(c);
    }
    candidates
        .iter()
        .map(|c| (strsim::normalized_damerau_levenshtein(&u, c), *c))
        .filter(|(s, _)| *s >= 0.5)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, c)| c)
}

/// 1-based line of `key` inside `[section]` (or before any header).
fn key_line(text: &str, section: Option<&str>, key: &str) -> Option<usize> {
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(rest) = line.strip_prefix('[') {
            current = rest.split(']').next().map(|s| s.trim().to_string());
            if section.is_none() && current.as_deref() == Some(key) {
                return Some(i + 1);
            }
            continue;
        }
        if current.as_deref() != section {
            continue;
        }
        let lhs = line.split('=').next().unwrap_or("").trim().trim_matches('"');
        if line.contains('=') && lhs == key {
            return Some(i + 1);
        }
    }
    None
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

struct Reader<'a> {
    text: &'a str,
    section: Option<&'a str>,
    table: &'a Table,
    diags: &'a mut Vec<Diagnostic>,
}

impl Reader<'_> {
    fn err(&mut self, key: &str, message: String) {
        let line = key_line(self.text, self.section, key);
        let name = match self.section {
            Some(s) => format!("{s}.{key}"),
            None => key.to_string(),
        };
        self.diags.push(Diagnostic { line, message: format!("{name}: {message}") });
    }

    fn check_unknown(&mut self, allowed: &[&str]) {
        let unknown: Vec<String> = self.table.keys().filter(|k| !allowed.contains(&k.as_str())).cloned().collect();
        for k in unknown {
            let msg = match nearest_key(&k, allowed) {
                Some(s) => format!("unknown key (did you mean \"{s}\"?)"),
                None => "unknown key".to_string(),
            };
            self.err(&k, msg);
        }
    }

    fn int(&mut self, key: &str, default: usize, min: usize) -> usize {
        match self.table.get(key) {
            None => default,
            Some(Value::Integer(i)) if *i >= min as i64 => *i as usize,
            Some(Value::Integer(i)) => {
                self.err(key, format!("{i} is out of range (must be >= {min})"));
                default
            }
            Some(v) => {
                self.err(key, format!("expected an integer, found {}", v.type_str()));
                default
            }
        }
    }

    fn float(&mut self, key: &str, default: f64, ok: impl Fn(f64) -> bool, range: &str) -> f64 {
        let x = match self.table.get(key) {
            None => return default,
            Some(Value::Float(x)) => *x,
            Some(Value::Integer(i)) => *i as f64,
            Some(v) => {
                self.err(key, format!("expected a number, found {}", v.type_str()));
                return default;
            }
        };
        if x.is_finite() && ok(x) {
            x
        } else {
            self.err(key, format!("{x} is out of range (must be in {range})"));
            default
        }
    }

    fn list<T>(&mut self, key: &str, default: Vec<T>, mut item: impl FnMut(&Value) -> Result<T, String>) -> Vec<T> {
        let Some(v) = self.table.get(key) else {
            return default;
        };
        let Value::Array(xs) = v else {
            self.err(key, format!("expected an array, found {}", v.type_str()));
            return default;
        };
        let mut out = Vec::with_capacity(xs.len());
        for x in xs {
            match item(x) {
                Ok(t) => out.push(t),
                Err(m) => {
                    self.err(key, m);
                    return default;
                }
            }
        }
        if out.is_empty() {
            self.err(key, "must not be empty".to_string());
            return default;
        }
        out
    }

    fn ints(&mut self, key: &str, default: Vec<usize>, min: usize) -> Vec<usize> {
        self.list(key, default, |v| match v {
            Value::Integer(i) if *i >= min as i64 => Ok(*i as usize),
            Value::Integer(i) => Err(format!("{i} is out of range (must be >= {min})")),
            other => Err(format!("expected integers, found {}", other.type_str())),
        })
    }

    fn string(&mut self, key: &str) -> Option<String> {
        match self.table.get(key) {
            None => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(v) => {
                self.err(key, format!("expected a string, found {}", v.type_str()));
                None
            }
        }
    }
}

fn positive(x: f64) -> bool {
    x > 0.0
}

fn unit_closed(x: f64) -> bool {
    (0.0..=1.0).contains(&x)
}

fn gamma_range(x: f64) -> bool {
    x > 0.0 && x <= 1.0
}

/// Parse and validate a config; every problem is reported, not only the
/// first.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigErrors> {
    let table: Table = text.parse().map_err(|e: toml::de::Error| {
        let line = e.span().map(|s| line_of_offset(text, s.start));
        ConfigErrors(vec![Diagnostic { line, message: e.message().to_string() }])
    })?;
    let mut diags = Vec::new();
    let mut top = Reader { text, section: None, table: &table, diags: &mut diags };
    top.check_unknown(TOP_KEYS);

    let kind = match top.string("kind").as_deref() {
        Some("theory") => Some(Kind::Theory),
        Some("fig1") => Some(Kind::Fig1),
        Some("agents") => Some(Kind::Agents),
        Some("probe") => Some(Kind::Probe),
        Some(other) => {
            top.err("kind", format!("unknown kind {other:?} (expected theory, fig1, agents or probe)"));
            None
        }
        None => {
            if !table.contains_key("kind") {
                top.diags.push(Diagnostic { line: None, message: "missing required key \"kind\"".into() });
            }
            None
        }
    };
    let master_seed = match table.get("master_seed") {
        None => 0,
        Some(Value::Integer(i)) if *i >= 0 => *i as u64,
        Some(_) => {
            top.err("master_seed", "expected a non-negative integer".into());
            0
        }
    };
    let seeds: Vec<u64> = match table.get("seeds") {
        None => {
            top.diags.push(Diagnostic { line: None, message: "missing required key \"seeds\"".into() });
            Vec::new()
        }
        Some(Value::Array(xs)) if xs.is_empty() => {
            top.err("seeds", "must list at least one seed".into());
            Vec::new()
        }
        Some(Value::Array(xs)) => {
            let parsed: Option<Vec<u64>> =
                xs.iter().map(|x| x.as_integer().filter(|i| *i >= 0).map(|i| i as u64)).collect();
            match parsed {
                Some(s) => {
                    if s.iter().collect::<BTreeSet<_>>().len() != s.len() {
                        top.err("seeds", "contains duplicates".into());
                    }
                    s
                }
                None => {
                    top.err("seeds", "expected non-negative integers".into());
                    Vec::new()
                }
            }
        }
        Some(v) => {
            top.err("seeds", format!("expected an array, found {}", v.type_str()));
            Vec::new()
        }
    };
    let env = top.string("env").unwrap_or_else(|| "pointmass".to_string());
    if !["cartpole", "pointmass"].contains(&env.as_str()) {
        top.err("env", format!("unknown environment {env:?} (expected cartpole or pointmass)"));
    }
    let out = top.string("out").map(PathBuf::from);

    let empty = Table::new();
    let mut sections: Vec<(&str, &Table)> = Vec::new();
    for name in ["theory", "fig1", "agent", "probe"] {
        match table.get(name) {
            None => sections.push((name, &empty)),
            Some(Value::Table(t)) => {
                if let Some(k) = kind {
                    if !k.sections().contains(&name) {
                        top.err(name, format!("section is not used by kind = \"{}\"", k.as_str()));
                    }
                }
                sections.push((name, t));
            }
            Some(v) => {
                top.err(name, format!("expected a table, found {}", v.type_str()));
                sections.push((name, &empty));
            }
        }
    }
    let get = |n: &str| sections.iter().find(|(s, _)| *s == n).map(|(_, t)| *t).unwrap_or(&empty);

    let theory = read_theory(&mut Reader { text, section: Some("theory"), table: get("theory"), diags: &mut diags });
    let fig1 = read_fig1(&mut Reader { text, section: Some("fig1"), table: get("fig1"), diags: &mut diags });
    let agents = read_agent(&mut Reader { text, section: Some("agent"), table: get("agent"), diags: &mut diags });
    let probe = read_probe(&mut Reader { text, section: Some("probe"), table: get("probe"), diags: &mut diags });

    if !diags.is_empty() {
        diags.sort_by_key(|d| d.line.unwrap_or(0));
        return Err(ConfigErrors(diags));
    }
    Ok(ExperimentConfig {
        kind: kind.expect("kind checked above"),
        master_seed,
        seeds,
        env,
        out,
        theory,
        fig1,
        agents,
        probe,
        hash: config_hash(&table),
    })
}

fn read_theory(r: &mut Reader) -> TheorySettings {
    r.check_unknown(THEORY_KEYS);
    let d = TheorySettings::default();
    let weighting = match r.string("weighting").as_deref() {
        None | Some("uniform") => Weighting::Uniform,
        Some("discounted") => Weighting::Discounted,
        Some(other) => {
            r.err("weighting", format!("unknown weighting {other:?} (expected uniform or discounted)"));
            Weighting::Uniform
        }
    };
    let max_states = r.int("max_states", d.max_states, 2);
    let max_actions = r.int("max_actions", d.max_actions, 2);
    if max_states > 64 {
        r.err("max_states", format!("{max_states} is out of range (must be <= 64)"));
    }
    if max_actions > 64 {
        r.err("max_actions", format!("{max_actions} is out of range (must be <= 64)"));
    }
    TheorySettings {
        max_states,
        max_actions,
        t_values: r.ints("t_values", d.t_values, 1),
        n_values: r.ints("n_values", d.n_values, 1),
        deltas: r.list("deltas", d.deltas, |v| match v.as_float().or(v.as_integer().map(|i| i as f64)) {
            Some(x) if x > 0.0 && x.is_finite() => Ok(x),
            Some(x) => Err(format!("{x} is out of range (must be > 0)")),
            None => Err(format!("expected numbers, found {}", v.type_str())),
        }),
        mixing: r.float("mixing", d.mixing, unit_closed, "[0, 1]"),
        reward_scale: r.float("reward_scale", d.reward_scale, |_| true, "finite numbers"),
        logit_scale: r.float("logit_scale", d.logit_scale, |x| x >= 0.0, "[0, inf)"),
        weighting,
    }
}

fn read_fig1(r: &mut Reader) -> Fig1Settings {
    r.check_unknown(FIG1_KEYS);
    let d = Fig1Settings::default();
    let b = d.base;
    Fig1Settings {
        batches: r.ints("batches", d.batches, 1),
        n_values: r.ints("n_values", d.n_values, 1),
        base: pgvlab_core::agents::Fig1Config {
            batch: b.batch,
            n: b.n,
            horizon: r.int("horizon", b.horizon, 0),
            gamma: r.float("gamma", b.gamma, gamma_range, "(0, 1]"),
            lam: r.float("lam", b.lam, unit_closed, "[0, 1]"),
            hidden: r.ints("hidden", b.hidden, 1),
            actor_lr: r.float("actor_lr", b.actor_lr, positive, "(0, inf)"),
            critic_lr: r.float("critic_lr", b.critic_lr, positive, "(0, inf)"),
            critic_epochs: r.int("critic_epochs", b.critic_epochs, 1),
            max_grad_norm: r.float("max_grad_norm", b.max_grad_norm, positive, "(0, inf)"),
            max_steps: r.int("max_steps", b.max_steps, 1),
            eval_every: r.int("eval_every", b.eval_every, 1),
            solve_window: r.int("solve_window", b.solve_window, 1),
            solve_threshold: r.float("solve_threshold", b.solve_threshold, |_| true, "finite numbers"),
            gain_episodes: r.int("gain_episodes", b.gain_episodes, 1),
        },
    }
}

fn read_agent(r: &mut Reader) -> AgentsSettings {
    r.check_unknown(AGENT_KEYS);
    let d = AgentsSettings::default();
    let a = d.agent;
    let variants = r.list("variants", d.variants, |v| {
        v.as_str().ok_or_else(|| format!("expected strings, found {}", v.type_str()))?.parse::<Variant>().map_err(|e| e.to_string())
    });
    let anneal = match r.string("anneal").as_deref() {
        None => a.anneal,
        Some("up") => AnnealDirection::Up,
        Some("down") => AnnealDirection::Down,
        Some(other) => {
            r.err("anneal", format!("unknown direction {other:?} (expected up or down)"));
            a.anneal
        }
    };
    let activation = match r.string("activation").as_deref() {
        None => a.activation,
        Some("tanh") => Activation::Tanh,
        Some("relu") => Activation::Relu,
        Some(other) => {
            r.err("activation", format!("unknown activation {other:?} (expected tanh or relu)"));
            a.activation
        }
    };
    AgentsSettings {
        variants,
        total_steps: r.int("total_steps", d.total_steps, 1),
        eval_interval: r.int("eval_interval", d.eval_interval, 1),
        eval_episodes: r.int("eval_episodes", d.eval_episodes, 1),
        agent: AgentConfig {
            variant: a.variant,
            batch_size: r.int("batch_size", a.batch_size, 1),
            extra: r.int("extra", a.extra, 0),
            horizon: r.int("horizon", a.horizon, 0),
            clip: r.float("clip", a.clip, |x| x > 0.0 && x < 1.0, "(0, 1)"),
            lam: r.float("lam", a.lam, unit_closed, "[0, 1]"),
            gamma: r.float("gamma", a.gamma, gamma_range, "(0, 1]"),
            epochs: r.int("epochs", a.epochs, 1),
            minibatch: r.int("minibatch", a.minibatch, 1),
            value_coef: r.float("value_coef", a.value_coef, |x| x >= 0.0, "[0, inf)"),
            max_grad_norm: r.float("max_grad_norm", a.max_grad_norm, positive, "(0, inf)"),
            anneal_fraction: r.float("anneal_fraction", a.anneal_fraction, unit_closed, "[0, 1]"),
            anneal,
            actor_lr: r.float("actor_lr", a.actor_lr, positive, "(0, inf)"),
            critic_lr: r.float("critic_lr", a.critic_lr, positive, "(0, inf)"),
            hidden: r.ints("hidden", a.hidden, 1),
            activation,
            model_hidden: r.ints("model_hidden", a.model_hidden, 1),
            model_lr: r.float("model_lr", a.model_lr, positive, "(0, inf)"),
            model_steps: r.int("model_steps", a.model_steps, 0),
            model_batch: r.int("model_batch", a.model_batch, 1),
            q_hidden: r.ints("q_hidden", a.q_hidden, 1),
            q_lr: r.float("q_lr", a.q_lr, positive, "(0, inf)"),
            q_epochs: r.int("q_epochs", a.q_epochs, 0),
            buffer_capacity: r.int("buffer_capacity", a.buffer_capacity, 1),
            train_all_models: a.train_all_models,
        },
    }
}

fn read_probe(r: &mut Reader) -> ProbeSettings {
    r.check_unknown(PROBE_KEYS);
    let d = ProbeSettings::default();
    let p = d.probe;
    ProbeSettings {
        total_steps: r.int("total_steps", d.total_steps, 1),
        probe: ProbeConfig {
            n_estimates: r.int("n_estimates", p.n_estimates, 2),
            probe_batch: r.int("probe_batch", p.probe_batch, 1),
            n_checkpoints: r.int("n_checkpoints", p.n_checkpoints, 1),
            methods: r.list("methods", p.methods, |v| {
                v.as_str().ok_or_else(|| format!("expected strings, found {}", v.type_str()))?.parse::<Method>().map_err(|e| e.to_string())
            }),
            extra: r.int("extra", p.extra, 0),
            horizon: r.int("horizon", p.horizon, 0),
            gamma: r.float("gamma", p.gamma, gamma_range, "(0, 1]"),
            lam: r.float("lam", p.lam, unit_closed, "[0, 1]"),
        },
    }
}

/// Canonical text of a TOML value: tables with sorted keys, floats in
/// shortest round-trip form.
fn canonical(v: &Value, out: &mut String) {
    match v {
        Value::Table(t) => {
            let mut keys: Vec<&String> = t.keys().collect();
            keys.sort();
            out.push('{');
            for k in keys {
                out.push_str(&format!("{k:?}="));
                canonical(&t[k.as_str()], out);
                out.push(';');
            }
            out.push('}');
        }
        Value::Array(xs) => {
            out.push('[');
            for x in xs {
                canonical(x, out);
                out.push(',');
            }
            out.push(']');
        }
        Value::String(s) => out.push_str(&format!("{s:?}")),
        Value::Integer(i) => out.push_str(&format!("i{i}")),
        Value::Float(x) => out.push_str(&format!("f{x:?}")),
        Value::Boolean(b) => out.push_str(&b.to_string()),
        Value::Datetime(d) => out.push_str(&format!("d{d}")),
    }
}

pub fn config_hash(table: &Table) -> String {
    let mut s = String::new();
    canonical(&Value::Table(table.clone()), &mut s);
    let digest = Sha256::digest(s.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suggestions() {
        assert_eq!(nearest_key("clip_coeff", AGENT_KEYS), Some("clip"));
        assert_eq!(nearest_key("bach_size", AGENT_KEYS), Some("batch_size"));
        assert_eq!(nearest_key("zzzzzz", AGENT_KEYS), None);
    }

    #[test]
    fn key_lines() {
        let t = "kind = \"fig1\"\n\n[fig1]\nlam = 0.9\n[agent]\nlam = 0.5\n";
        assert_eq!(key_line(t, Some("agent"), "lam"), Some(6));
        assert_eq!(key_line(t, Some("fig1"), "lam"), Some(4));
        assert_eq!(key_line(t, None, "kind"), Some(1));
    }
}
