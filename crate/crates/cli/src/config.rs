//! Scenario files: a TOML document with fixed sections and keys.
//!
//! Parsing keeps going after the first problem so that one run reports every
//! error, each prefixed with the line it refers to.

use std::fmt::Write as _;
use std::path::Path;

use tabs_core::{
    ArrivalProfile, EnergyParams, FluidParams, FluidState, InitialCondition, PhaseTypeService, Policy, ServiceModel,
    SimConfig,
};
use toml::{Table, Value};

use crate::CliError;

/// One accepted key: where it lives, its unit and its default.
pub struct KeySpec {
    pub section: &'static str,
    pub key: &'static str,
    pub unit: &'static str,
    pub default: &'static str,
    pub doc: &'static str,
}

const fn key(
    section: &'static str,
    key: &'static str,
    unit: &'static str,
    default: &'static str,
    doc: &'static str,
) -> KeySpec {
    KeySpec { section, key, unit, default, doc }
}

/// Times are measured in mean service times; rates per mean service time.
pub const KEYS: &[KeySpec] = &[
    key("system", "n_servers", "servers", "required", "number of servers N"),
    key("system", "buffer", "tasks per server", "10", "queue capacity B including the task in service"),
    key("arrivals", "kind", "-", "constant", "constant | sinusoid | table"),
    key("arrivals", "rate", "tasks per server per time unit", "required for constant", "arrival rate lambda"),
    key("arrivals", "base", "tasks per server per time unit", "required for sinusoid", "lambda(t) = base + amplitude sin(t / period)"),
    key("arrivals", "amplitude", "tasks per server per time unit", "required for sinusoid", "sinusoid amplitude"),
    key("arrivals", "period", "time units", "required for sinusoid", "sinusoid time scale"),
    key("arrivals", "times", "time units", "required for table", "breakpoints of a piecewise constant rate"),
    key("arrivals", "rates", "tasks per server per time unit", "required for table", "rate from each breakpoint on"),
    key("timers", "mu", "per time unit", "required unless mu_inverse", "standby rate"),
    key("timers", "mu_inverse", "time units", "-", "mean standby period 1/mu"),
    key("timers", "nu", "per time unit", "required unless nu_inverse", "setup rate"),
    key("timers", "nu_inverse", "time units", "-", "mean setup period 1/nu"),
    key("service", "kind", "-", "exponential", "exponential | phase_type"),
    key("service", "r", "probabilities", "required for phase_type", "initial phase distribution"),
    key("service", "R", "probabilities", "zero matrix", "phase transition matrix, one row per phase"),
    key("service", "gamma", "per time unit", "required for phase_type", "phase completion rates"),
    key("service", "normalize", "bool", "false", "rescale gamma so the mean service time is 1"),
    key("policy", "name", "-", "tabs", "tabs | jiq | delayedoff"),
    key("policy", "compare", "list of policies", "tabs, jiq (+ delayedoff for exponential service)", "policies for `compare` and `sweep`"),
    key("energy", "p_full", "W", "200", "power when busy or in setup"),
    key("energy", "p_idle", "W", "140", "power when idle and on"),
    key("run", "horizon", "time units", "250", "simulated time"),
    key("run", "sample_interval", "time units", "1", "spacing of trace samples"),
    key("run", "seed", "-", "1", "seed of replication 0; replication k uses seed + k"),
    key("run", "replications", "runs", "20", "independent simulation runs"),
    key("run", "warmup_fraction", "fraction of horizon", "0.4", "discarded prefix before averaging, in [0, 1)"),
    key("run", "dt", "time units", "0.001", "fluid integration step"),
    key("run", "initial", "-", "all_idle_on", "all_idle_on | all_idle_off"),
    key("run", "tasks", "bool", "false", "also write per-task records"),
    key("sweep", "parameter", "-", "required", "mu_inverse | nu_inverse | n_servers | lambda"),
    key("sweep", "values", "list", "required", "values of the swept parameter"),
];

const REQUIRED_SECTIONS: [&str; 3] = ["system", "arrivals", "timers"];

/// Text for `--help`: every section and key with units and defaults.
pub fn keys_help() -> String {
    let mut out = String::from("CONFIG KEYS (times in mean service times):\n");
    let mut section = "";
    for k in KEYS {
        if k.section != section {
            section = k.section;
            let _ = writeln!(out, "  [{section}]");
        }
        let _ = writeln!(out, "    {:<16} {} [{}] (default: {})", k.key, k.doc, k.unit, k.default);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartState {
    AllIdleOn,
    AllIdleOff,
}

impl StartState {
    pub fn name(self) -> &'static str {
        match self {
            StartState::AllIdleOn => "all_idle_on",
            StartState::AllIdleOff => "all_idle_off",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    MuInverse,
    NuInverse,
    NServers,
    Lambda,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::MuInverse => "mu_inverse",
            SweepParam::NuInverse => "nu_inverse",
            SweepParam::NServers => "n_servers",
            SweepParam::Lambda => "lambda",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [SweepParam::MuInverse, SweepParam::NuInverse, SweepParam::NServers, SweepParam::Lambda]
            .into_iter()
            .find(|p| p.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub horizon: f64,
    pub sample_interval: f64,
    pub seed: u64,
    pub replications: usize,
    pub warmup_fraction: f64,
    pub dt: f64,
    pub initial: StartState,
    pub tasks: bool,
}

/// A fully validated scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    /// Output directory name, taken from the file stem.
    pub name: String,
    pub n_servers: usize,
    pub buffer: usize,
    pub arrivals: ArrivalProfile,
    pub mu: f64,
    pub nu: f64,
    pub service: ServiceModel,
    pub policy: Policy,
    /// Explicit `[policy] compare` list, if any.
    pub compare: Option<Vec<Policy>>,
    pub energy: EnergyParams,
    pub run: RunSettings,
    pub sweep: Option<Sweep>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub replications: Option<usize>,
    pub dt: Option<f64>,
    pub warmup_fraction: Option<f64>,
}

pub fn parse_config(path: &Path) -> Result<ScenarioConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Invalid(vec![format!("{}: cannot read: {e}", path.display())]))?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("scenario").to_string();
    parse_str(&text, &name).map_err(|e| match e {
        CliError::Invalid(errs) => {
            CliError::Invalid(errs.into_iter().map(|m| format!("{}:{m}", path.display())).collect())
        }
        other => other,
    })
}

/// Parses scenario text; `name` becomes the output directory name.
pub fn parse_str(text: &str, name: &str) -> Result<ScenarioConfig, CliError> {
    let table: Table = text.parse().map_err(|e: toml::de::Error| {
        let line = e.span().map(|s| line_of(text, s.start)).unwrap_or(0);
        CliError::Invalid(vec![format!("{line}: {}", e.message())])
    })?;
    let mut p = Parser { text, table: &table, errors: Vec::new() };
    let cfg = p.build(name);
    if p.errors.is_empty() {
        Ok(cfg)
    } else {
        Err(CliError::Invalid(p.errors))
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

struct Parser<'a> {
    text: &'a str,
    table: &'a Table,
    errors: Vec<String>,
}

impl Parser<'_> {
    /// Line of `key` inside `[section]`, or of the section header when `key`
    /// is empty. Falls back to 0 for keys written in inline tables.
    fn line(&self, section: &str, key: &str) -> usize {
        let mut current = "";
        for (i, raw) in self.text.lines().enumerate() {
            let l = raw.trim();
            if let Some(h) = l.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
                current = h.trim();
                if key.is_empty() && current == section {
                    return i + 1;
                }
                continue;
            }
            if !key.is_empty() && current == section {
                if let Some(rest) = l.strip_prefix(key) {
                    if rest.trim_start().starts_with('=') {
                        return i + 1;
                    }
                }
            }
        }
        0
    }

    fn err(&mut self, section: &str, key: &str, msg: impl std::fmt::Display) {
        let line = self.line(section, key);
        let place = if key.is_empty() { format!("[{section}]") } else { format!("[{section}] {key}") };
        self.errors.push(format!("{line}: {place}: {msg}"));
    }

    fn section(&self, name: &str) -> Option<&Table> {
        self.table.get(name).and_then(Value::as_table)
    }

    fn value(&self, section: &str, key: &str) -> Option<&Value> {
        self.section(section).and_then(|t| t.get(key))
    }

    fn check_layout(&mut self) {
        for (name, value) in self.table {
            let Some(t) = value.as_table() else {
                self.errors.push(format!("{}: unknown top-level key `{name}`", self.line_top(name)));
                continue;
            };
            if !KEYS.iter().any(|k| k.section == name) {
                self.err(name, "", "unknown section");
                continue;
            }
            for k in t.keys() {
                if !KEYS.iter().any(|s| s.section == name && s.key == k) {
                    self.err(name, k, "unknown key");
                }
            }
        }
        for s in REQUIRED_SECTIONS {
            if self.section(s).is_none() {
                self.errors.push(format!("0: missing section [{s}]"));
            }
        }
    }

    fn line_top(&self, key: &str) -> usize {
        self.text.lines().position(|l| l.trim_start().starts_with(key)).map_or(0, |i| i + 1)
    }

    fn num(&mut self, section: &str, key: &str) -> Option<f64> {
        match self.value(section, key)? {
            Value::Float(x) => Some(*x),
            Value::Integer(i) => Some(*i as f64),
            other => {
                self.err(section, key, format!("expected a number, found {}", other.type_str()));
                None
            }
        }
    }

    fn int(&mut self, section: &str, key: &str) -> Option<i64> {
        match self.value(section, key)? {
            Value::Integer(i) => Some(*i),
            other => {
                self.err(section, key, format!("expected an integer, found {}", other.type_str()));
                None
            }
        }
    }

    fn string(&mut self, section: &str, key: &str) -> Option<String> {
        match self.value(section, key)? {
            Value::String(s) => Some(s.clone()),
            other => {
                self.err(section, key, format!("expected a string, found {}", other.type_str()));
                None
            }
        }
    }

    fn boolean(&mut self, section: &str, key: &str) -> Option<bool> {
        match self.value(section, key)? {
            Value::Boolean(b) => Some(*b),
            other => {
                self.err(section, key, format!("expected true or false, found {}", other.type_str()));
                None
            }
        }
    }

    fn list(&mut self, section: &str, key: &str) -> Option<Vec<f64>> {
        let Value::Array(items) = self.value(section, key)? else {
            self.err(section, key, "expected a list of numbers");
            return None;
        };
        let nums: Option<Vec<f64>> = items
            .iter()
            .map(|v| match v {
                Value::Float(x) => Some(*x),
                Value::Integer(i) => Some(*i as f64),
                _ => None,
            })
            .collect();
        if nums.is_none() {
            self.err(section, key, "expected a list of numbers");
        }
        nums
    }

    fn matrix(&mut self, section: &str, key: &str) -> Option<Vec<Vec<f64>>> {
        let Value::Array(rows) = self.value(section, key)? else {
            self.err(section, key, "expected a list of rows");
            return None;
        };
        let parsed: Option<Vec<Vec<f64>>> = rows
            .iter()
            .map(|row| {
                row.as_array()?
                    .iter()
                    .map(|v| v.as_float().or_else(|| v.as_integer().map(|i| i as f64)))
                    .collect()
            })
            .collect();
        if parsed.is_none() {
            self.err(section, key, "expected a list of rows of numbers");
        }
        parsed
    }

    /// Reads a strictly positive number, reporting `what` on failure.
    fn positive(&mut self, section: &str, key: &str, what: &str) -> Option<f64> {
        let x = self.num(section, key)?;
        if x.is_finite() && x > 0.0 {
            Some(x)
        } else {
            self.err(section, key, format!("{what} must be positive, got {x}"));
            None
        }
    }

    /// Like [`Parser::positive`], with a default for an absent key.
    fn positive_or(&mut self, section: &str, key: &str, what: &str, default: f64) -> Option<f64> {
        if self.value(section, key).is_none() {
            Some(default)
        } else {
            self.positive(section, key, what)
        }
    }

    fn count(&mut self, section: &str, key: &str, default: usize) -> usize {
        match self.int(section, key) {
            None => default,
            Some(i) if i >= 1 => i as usize,
            Some(i) => {
                self.err(section, key, format!("must be at least 1, got {i}"));
                default
            }
        }
    }

    fn arrivals(&mut self) -> ArrivalProfile {
        let fallback = ArrivalProfile::Constant(0.5);
        let kind = self.string("arrivals", "kind").unwrap_or_else(|| "constant".into());
        let require = |p: &mut Self, key: &str| {
            if p.value("arrivals", key).is_none() {
                p.err("arrivals", "", format!("`{key}` is required for kind = \"{kind}\""));
            }
        };
        let profile = match kind.as_str() {
            "constant" => {
                require(self, "rate");
                self.num("arrivals", "rate").map(ArrivalProfile::Constant)
            }
            "sinusoid" => {
                for k in ["base", "amplitude", "period"] {
                    require(self, k);
                }
                let base = self.num("arrivals", "base");
                let amplitude = self.num("arrivals", "amplitude");
                let period = self.num("arrivals", "period");
                match (base, amplitude, period) {
                    (Some(base), Some(amplitude), Some(period)) => {
                        Some(ArrivalProfile::Sinusoid { base, amplitude, period })
                    }
                    _ => None,
                }
            }
            "table" => {
                require(self, "times");
                require(self, "rates");
                let times = self.list("arrivals", "times");
                let rates = self.list("arrivals", "rates");
                times.zip(rates).map(|(times, rates)| ArrivalProfile::Table { times, rates })
            }
            other => {
                self.err("arrivals", "kind", format!("unknown arrival kind `{other}`"));
                None
            }
        };
        let Some(profile) = profile else { return fallback };
        match profile.validate() {
            Ok(()) => profile,
            Err(e) => {
                self.err("arrivals", "", e);
                fallback
            }
        }
    }

    /// Reads a rate given either directly or as its mean period.
    fn timer(&mut self, rate_key: &str, inverse_key: &str, what: &str) -> f64 {
        let direct = self.value("timers", rate_key).is_some();
        let inverse = self.value("timers", inverse_key).is_some();
        match (direct, inverse) {
            (true, true) => {
                self.err("timers", inverse_key, format!("give either `{rate_key}` or `{inverse_key}`, not both"));
                1.0
            }
            (false, false) => {
                if self.section("timers").is_some() {
                    self.err("timers", "", format!("`{rate_key}` or `{inverse_key}` is required"));
                }
                1.0
            }
            (true, false) => self.positive("timers", rate_key, what).unwrap_or(1.0),
            (false, true) => {
                self.positive("timers", inverse_key, &format!("mean period for the {what}")).map_or(1.0, |x| 1.0 / x)
            }
        }
    }

    fn service(&mut self) -> ServiceModel {
        let kind = self.string("service", "kind").unwrap_or_else(|| "exponential".into());
        match kind.as_str() {
            "exponential" => {
                for k in ["r", "R", "gamma", "normalize"] {
                    if self.value("service", k).is_some() {
                        self.err("service", k, "only used with kind = \"phase_type\"");
                    }
                }
                ServiceModel::UnitExponential
            }
            "phase_type" => {
                for k in ["r", "gamma"] {
                    if self.value("service", k).is_none() {
                        self.err("service", "", format!("`{k}` is required for kind = \"phase_type\""));
                    }
                }
                let r = self.list("service", "r");
                let gamma = self.list("service", "gamma");
                let rows = self.matrix("service", "R");
                let normalize = self.boolean("service", "normalize").unwrap_or(false);
                let (Some(r), Some(gamma)) = (r, gamma) else { return ServiceModel::UnitExponential };
                let k = r.len();
                let rows = rows.unwrap_or_else(|| vec![vec![0.0; k]; k]);
                let built = if normalize {
                    PhaseTypeService::normalized(r, rows, gamma)
                } else {
                    PhaseTypeService::new(r, rows, gamma)
                };
                match built {
                    Ok(d) if (d.mean_service_time() - 1.0).abs() > 1e-6 => {
                        self.err(
                            "service",
                            "gamma",
                            format!(
                                "mean service time is {} but times are measured in mean service times; \
                                 rescale gamma or set normalize = true",
                                d.mean_service_time()
                            ),
                        );
                        ServiceModel::UnitExponential
                    }
                    Ok(d) => ServiceModel::PhaseType(d),
                    Err(e) => {
                        self.err("service", "", e);
                        ServiceModel::UnitExponential
                    }
                }
            }
            other => {
                self.err("service", "kind", format!("unknown service kind `{other}`"));
                ServiceModel::UnitExponential
            }
        }
    }

    fn policy_name(&mut self, key: &str, name: &str) -> Option<Policy> {
        let p = Policy::parse(name);
        if p.is_none() {
            self.err("policy", key, format!("unknown policy `{name}` (expected tabs, jiq or delayedoff)"));
        }
        p
    }

    fn policies(&mut self, service: &ServiceModel) -> (Policy, Option<Vec<Policy>>) {
        let policy = match self.string("policy", "name") {
            Some(n) => self.policy_name("name", &n).unwrap_or(Policy::Tabs),
            None => Policy::Tabs,
        };
        let compare = match self.value("policy", "compare") {
            None => None,
            Some(Value::Array(items)) => {
                let names: Vec<String> = items.iter().filter_map(|v| v.as_str().map(String::from)).collect();
                if names.len() != items.len() || names.is_empty() {
                    self.err("policy", "compare", "expected a non-empty list of policy names");
                    None
                } else {
                    let list: Vec<Policy> = names.iter().filter_map(|n| self.policy_name("compare", n)).collect();
                    let mut seen = Vec::new();
                    for p in &list {
                        if seen.contains(p) {
                            self.err("policy", "compare", format!("policy `{}` listed twice", p.name()));
                        }
                        seen.push(*p);
                    }
                    Some(list)
                }
            }
            Some(_) => {
                self.err("policy", "compare", "expected a list of policy names");
                None
            }
        };
        if !service.is_exponential() {
            let uses_delayed = policy == Policy::DelayedOff
                || compare.as_ref().is_some_and(|c| c.contains(&Policy::DelayedOff));
            if uses_delayed {
                self.err("policy", "", "the delayed-off baseline requires exponential service");
            }
        }
        (policy, compare)
    }

    fn run(&mut self) -> RunSettings {
        let horizon = self.positive_or("run", "horizon", "horizon", 250.0);
        let sample_interval = self.positive_or("run", "sample_interval", "sample interval", 1.0);
        let seed = match self.int("run", "seed") {
            Some(s) if s >= 0 => s as u64,
            Some(s) => {
                self.err("run", "seed", format!("seed must be non-negative, got {s}"));
                1
            }
            None => 1,
        };
        let replications = self.count("run", "replications", 20);
        let warmup_fraction = match self.num("run", "warmup_fraction") {
            Some(w) if (0.0..1.0).contains(&w) => w,
            Some(w) => {
                self.err("run", "warmup_fraction", format!("warmup fraction must lie in [0, 1), got {w}"));
                0.4
            }
            None => 0.4,
        };
        let dt = self.positive_or("run", "dt", "step size", 1e-3);
        let initial = match self.string("run", "initial").as_deref() {
            None | Some("all_idle_on") => StartState::AllIdleOn,
            Some("all_idle_off") => StartState::AllIdleOff,
            Some(other) => {
                self.err("run", "initial", format!("unknown initial state `{other}` (expected all_idle_on or all_idle_off)"));
                StartState::AllIdleOn
            }
        };
        let tasks = self.boolean("run", "tasks").unwrap_or(false);
        if let (Some(h), Some(s)) = (horizon, sample_interval) {
            if s > h {
                self.err("run", "sample_interval", format!("sample interval {s} exceeds the horizon {h}"));
            }
        }
        RunSettings {
            horizon: horizon.unwrap_or(250.0),
            sample_interval: sample_interval.unwrap_or(1.0),
            seed,
            replications,
            warmup_fraction,
            dt: dt.unwrap_or(1e-3),
            initial,
            tasks,
        }
    }

    fn sweep(&mut self) -> Option<Sweep> {
        self.section("sweep")?;
        let param = match self.string("sweep", "parameter") {
            None => {
                self.err("sweep", "", "`parameter` is required");
                None
            }
            Some(name) => {
                let p = SweepParam::parse(&name);
                if p.is_none() {
                    self.err(
                        "sweep",
                        "parameter",
                        format!("cannot sweep `{name}` (expected mu_inverse, nu_inverse, n_servers or lambda)"),
                    );
                }
                p
            }
        };
        if self.value("sweep", "values").is_none() {
            self.err("sweep", "", "`values` is required");
        }
        let values = self.list("sweep", "values");
        let (param, values) = (param?, values?);
        if values.is_empty() {
            self.err("sweep", "values", "sweep list is empty");
            return None;
        }
        for &v in &values {
            let ok = match param {
                SweepParam::NServers => v >= 1.0 && v.fract() == 0.0,
                _ => v.is_finite() && v > 0.0,
            };
            if !ok {
                let need = if param == SweepParam::NServers { "a positive integer" } else { "positive" };
                self.err("sweep", "values", format!("{} value {v} must be {need}", param.name()));
            }
        }
        Some(Sweep { param, values })
    }

    fn build(&mut self, name: &str) -> ScenarioConfig {
        self.check_layout();
        let n_servers = if self.section("system").is_some() && self.value("system", "n_servers").is_none() {
            self.err("system", "", "`n_servers` is required");
            1
        } else {
            self.count("system", "n_servers", 1)
        };
        let buffer = self.count("system", "buffer", 10);
        let arrivals = if self.section("arrivals").is_some() { self.arrivals() } else { ArrivalProfile::Constant(0.5) };
        let mu = self.timer("mu", "mu_inverse", "standby rate");
        let nu = self.timer("nu", "nu_inverse", "setup rate");
        let service = self.service();
        let (policy, compare) = self.policies(&service);
        let p_full = self.num("energy", "p_full").unwrap_or(200.0);
        let p_idle = self.num("energy", "p_idle").unwrap_or(140.0);
        let energy = EnergyParams::new(p_full, p_idle).unwrap_or_else(|e| {
            self.err("energy", "", e);
            EnergyParams::default()
        });
        let run = self.run();
        if policy == Policy::Jiq && run.initial == StartState::AllIdleOff {
            self.err("run", "initial", "JIQ servers never turn off; start from all_idle_on");
        }
        let sweep = self.sweep();
        ScenarioConfig {
            name: name.to_string(),
            n_servers,
            buffer,
            arrivals,
            mu,
            nu,
            service,
            policy,
            compare,
            energy,
            run,
            sweep,
        }
    }
}

impl ScenarioConfig {
    /// Applies command-line overrides, validating each.
    pub fn apply(&mut self, o: &Overrides) -> Result<(), CliError> {
        let mut errs = Vec::new();
        if let Some(seed) = o.seed {
            if seed > i64::MAX as u64 {
                errs.push(format!("--seed must be at most {}, got {seed}", i64::MAX));
            }
            self.run.seed = seed;
        }
        if let Some(r) = o.replications {
            if r == 0 {
                errs.push("--replications must be at least 1".to_string());
            }
            self.run.replications = r;
        }
        if let Some(dt) = o.dt {
            if !(dt.is_finite() && dt > 0.0) {
                errs.push(format!("--dt must be positive, got {dt}"));
            }
            self.run.dt = dt;
        }
        if let Some(w) = o.warmup_fraction {
            if !(0.0..1.0).contains(&w) {
                errs.push(format!("--warmup-fraction must lie in [0, 1), got {w}"));
            }
            self.run.warmup_fraction = w;
        }
        if errs.is_empty() { Ok(()) } else { Err(CliError::Invalid(errs)) }
    }

    /// Policies for `compare` and `sweep`.
    pub fn compare_list(&self) -> Vec<Policy> {
        if let Some(c) = &self.compare {
            return c.clone();
        }
        let mut list = vec![Policy::Tabs, Policy::Jiq];
        if self.service.is_exponential() {
            list.push(Policy::DelayedOff);
        }
        list
    }

    /// Simulation settings for one run of `policy` with the given seed.
    pub fn sim_config(&self, policy: Policy, seed: u64) -> SimConfig {
        SimConfig {
            n_servers: self.n_servers,
            buffer: self.buffer,
            arrivals: self.arrivals.clone(),
            mu: self.mu,
            nu: self.nu,
            service: self.service.clone(),
            policy,
            horizon: self.run.horizon,
            sample_interval: self.run.sample_interval,
            seed,
            initial: match self.run.initial {
                StartState::AllIdleOn => InitialCondition::AllIdleOn,
                StartState::AllIdleOff => InitialCondition::AllIdleOff,
            },
            record_tasks: true,
            check_invariants: false,
        }
    }

    pub fn fluid_params(&self) -> Result<FluidParams, CliError> {
        FluidParams::new(self.arrivals.clone(), self.mu, self.nu, self.buffer, self.service.clone())
            .map_err(|e| CliError::Invalid(vec![e.to_string()]))
    }

    pub fn fluid_initial(&self) -> FluidState {
        let k = self.service.phases();
        match self.run.initial {
            StartState::AllIdleOn => FluidState::all_idle_on(self.buffer, k),
            StartState::AllIdleOff => FluidState::all_idle_off(self.buffer, k),
        }
    }

    /// The scenario with the swept parameter set to `value`.
    pub fn at_sweep_value(&self, param: SweepParam, value: f64) -> ScenarioConfig {
        let mut c = self.clone();
        match param {
            SweepParam::MuInverse => c.mu = 1.0 / value,
            SweepParam::NuInverse => c.nu = 1.0 / value,
            SweepParam::NServers => c.n_servers = value as usize,
            SweepParam::Lambda => c.arrivals = ArrivalProfile::Constant(value),
        }
        c
    }

    /// The resolved scenario as a scenario file that parses back to itself.
    pub fn echo(&self) -> String {
        let mut root = Table::new();
        let mut put = |section: &str, key: &str, v: Value| {
            root.entry(section.to_string())
                .or_insert_with(|| Value::Table(Table::new()))
                .as_table_mut()
                .expect("sections are tables")
                .insert(key.to_string(), v);
        };
        let floats = |xs: &[f64]| Value::Array(xs.iter().map(|&x| Value::Float(x)).collect());
        put("system", "n_servers", Value::Integer(self.n_servers as i64));
        put("system", "buffer", Value::Integer(self.buffer as i64));
        match &self.arrivals {
            ArrivalProfile::Constant(l) => {
                put("arrivals", "kind", "constant".into());
                put("arrivals", "rate", Value::Float(*l));
            }
            ArrivalProfile::Sinusoid { base, amplitude, period } => {
                put("arrivals", "kind", "sinusoid".into());
                put("arrivals", "base", Value::Float(*base));
                put("arrivals", "amplitude", Value::Float(*amplitude));
                put("arrivals", "period", Value::Float(*period));
            }
            ArrivalProfile::Table { times, rates } => {
                put("arrivals", "kind", "table".into());
                put("arrivals", "times", floats(times));
                put("arrivals", "rates", floats(rates));
            }
        }
        put("timers", "mu", Value::Float(self.mu));
        put("timers", "nu", Value::Float(self.nu));
        match &self.service {
            ServiceModel::UnitExponential => put("service", "kind", "exponential".into()),
            ServiceModel::PhaseType(d) => {
                put("service", "kind", "phase_type".into());
                put("service", "r", floats(d.initial()));
                put("service", "R", Value::Array(d.transitions().iter().map(|row| floats(row)).collect()));
                put("service", "gamma", floats(d.rates()));
            }
        }
        put("policy", "name", self.policy.name().into());
        if let Some(c) = &self.compare {
            put("policy", "compare", Value::Array(c.iter().map(|p| p.name().into()).collect()));
        }
        put("energy", "p_full", Value::Float(self.energy.p_full));
        put("energy", "p_idle", Value::Float(self.energy.p_idle));
        let r = &self.run;
        put("run", "horizon", Value::Float(r.horizon));
        put("run", "sample_interval", Value::Float(r.sample_interval));
        put("run", "seed", Value::Integer(r.seed as i64));
        put("run", "replications", Value::Integer(r.replications as i64));
        put("run", "warmup_fraction", Value::Float(r.warmup_fraction));
        put("run", "dt", Value::Float(r.dt));
        put("run", "initial", r.initial.name().into());
        put("run", "tasks", Value::Boolean(r.tasks));
        if let Some(s) = &self.sweep {
            put("sweep", "parameter", s.param.name().into());
            put("sweep", "values", floats(&s.values));
        }
        toml::to_string(&root).expect("scenario tables serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "[system]\nn_servers = 100\n[arrivals]\nrate = 0.3\n[timers]\nmu_inverse = 10\nnu = 0.1\n";

    fn errors(text: &str) -> Vec<String> {
        match parse_str(text, "t") {
            Err(CliError::Invalid(e)) => e,
            other => panic!("expected validation errors, got {other:?}"),
        }
    }

    #[test]
    fn minimal_file_gets_defaults() {
        let c = parse_str(BASE, "t").unwrap();
        assert_eq!(c.n_servers, 100);
        assert_eq!(c.buffer, 10);
        assert_eq!(c.arrivals, ArrivalProfile::Constant(0.3));
        assert_eq!((c.mu, c.nu), (0.1, 0.1));
        assert_eq!(c.policy, Policy::Tabs);
        assert_eq!(c.run.replications, 20);
        assert_eq!(c.compare_list(), vec![Policy::Tabs, Policy::Jiq, Policy::DelayedOff]);
    }

    #[test]
    fn zero_standby_rate_is_rejected() {
        let e = errors(&BASE.replace("mu_inverse = 10", "mu = 0"));
        assert_eq!(e, vec!["6: [timers] mu: standby rate must be positive, got 0"]);
    }

    #[test]
    fn every_error_is_reported() {
        let text = "[system]\nn_servers = 0\nbufer = 3\n[arrivals]\nrate = -1\n[timers]\nmu = 1\nnu = \"fast\"\n[extra]\n";
        let e = errors(text);
        assert_eq!(e.len(), 5, "{e:#?}");
        assert!(e.contains(&"3: [system] bufer: unknown key".to_string()));
        assert!(e.contains(&"9: [extra]: unknown section".to_string()));
        assert!(e.iter().any(|m| m.starts_with("2: [system] n_servers")));
        assert!(e.iter().any(|m| m.starts_with("4: [arrivals]: invalid rate")));
        assert!(e.iter().any(|m| m.starts_with("8: [timers] nu: expected a number")));
    }

    #[test]
    fn missing_sections_are_named() {
        let e = errors("[system]\nn_servers = 5\n");
        assert_eq!(e, vec!["0: missing section [arrivals]", "0: missing section [timers]"]);
    }

    #[test]
    fn phase_type_needs_a_distribution() {
        let text = format!("{BASE}[service]\nkind = \"phase_type\"\nr = [0.6, 0.3]\ngamma = [2, 0.4]\n");
        let e = errors(&text);
        assert_eq!(e.len(), 1);
        assert!(e[0].starts_with("8: [service]: ") && e[0].contains("initial distribution sums to 0.89"), "{e:?}");
    }

    #[test]
    fn phase_type_mean_must_be_one() {
        let text = format!("{BASE}[service]\nkind = \"phase_type\"\nr = [0.5, 0.5]\ngamma = [2, 0.4]\n");
        assert!(errors(&text)[0].contains("mean service time is 1.5"));
        let c = parse_str(&format!("{text}normalize = true\n"), "t").unwrap();
        let ServiceModel::PhaseType(d) = c.service else { panic!() };
        assert!((d.mean_service_time() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn delayed_off_needs_exponential_service() {
        let text = format!(
            "{BASE}[service]\nkind = \"phase_type\"\nr = [0.75, 0.25]\ngamma = [2, 0.4]\n[policy]\ncompare = [\"tabs\", \"delayedoff\"]\n"
        );
        assert!(errors(&text)[0].contains("requires exponential service"));
    }

    #[test]
    fn sweeps_validate_their_values() {
        let e = errors(&format!("{BASE}[sweep]\nparameter = \"nu_inverse\"\nvalues = []\n"));
        assert_eq!(e, vec!["10: [sweep] values: sweep list is empty"]);
        let e = errors(&format!("{BASE}[sweep]\nparameter = \"n_servers\"\nvalues = [10, 2.5]\n"));
        assert!(e[0].contains("must be a positive integer"));
        let e = errors(&format!("{BASE}[sweep]\nparameter = \"buffer\"\nvalues = [1]\n"));
        assert!(e[0].contains("cannot sweep `buffer`"));
    }

    #[test]
    fn syntax_errors_carry_a_line() {
        let e = errors("[system]\nn_servers = \n");
        assert!(e[0].starts_with("2: "), "{e:?}");
    }

    #[test]
    fn echo_parses_back_to_the_same_scenario() {
        let text = format!(
            "{BASE}[service]\nkind = \"phase_type\"\nr = [0.75, 0.25]\nR = [[0, 0], [0, 0]]\ngamma = [2, 0.4]\n\
             [policy]\ncompare = [\"jiq\", \"tabs\"]\n[run]\nseed = 7\ninitial = \"all_idle_off\"\n\
             [sweep]\nparameter = \"mu_inverse\"\nvalues = [1, 10]\n"
        );
        let c = parse_str(&text, "t").unwrap();
        let again = parse_str(&c.echo(), "t").unwrap();
        assert_eq!(c, again);
        assert_eq!(c.echo(), again.echo());
    }

    #[test]
    fn help_lists_every_key() {
        let help = keys_help();
        for k in KEYS {
            assert!(help.contains(&format!("[{}]", k.section)));
            assert!(help.contains(k.key) && help.contains(k.unit));
        }
    }

    #[test]
    fn overrides_are_validated() {
        let mut c = parse_str(BASE, "t").unwrap();
        let bad = Overrides { replications: Some(0), dt: Some(-1.0), ..Default::default() };
        let Err(CliError::Invalid(e)) = c.apply(&bad) else { panic!() };
        assert_eq!(e.len(), 2);
        c.apply(&Overrides { seed: Some(9), ..Default::default() }).unwrap();
        assert_eq!(c.run.seed, 9);
    }
}
