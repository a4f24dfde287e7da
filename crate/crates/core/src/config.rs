//! Experiment configuration: a flat `key = value` file with `[section]`
//! headers. Lists are comma-separated; `#` starts a comment.
//!
//! ```text
//! [grid]
//! width = 4
//! height = 4
//!
//! [fire]
//! states = 2,3,6,7
//! reward = 0.25
//!
//! [fire 180]          # segment starting at step 180
//! states = 5,9
//! ```
//!
//! Every key is optional; omitted keys take the defaults of the 4×4
//! reference scenario (start state 13, γ = 0.9, 50 replications).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::engine::{EngineConfig, PeriodMode, PeriodPolicy, Strategy};
use crate::mdp::{FireSchedule, GridSpec, RewardField};
use crate::metrics::Coverage;
use crate::qlearning::{DecaySchedule, LearnParams};
use crate::seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{field}: {message}")]
    Field { field: String, message: String },
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

fn field_err(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: field.to_string(),
        message: message.into(),
    }
}

pub const DEFAULT_FIRE_STATES: [usize; 4] = [2, 3, 6, 7];
pub const DEFAULT_FIRE_REWARD: f64 = 0.25;
pub const DEFAULT_START: usize = 13;

/// Where the fire is over time.
#[derive(Debug, Clone, PartialEq)]
pub enum FireSpec {
    /// Explicit segments (a single one for a stationary fire).
    Segments(FireSchedule),
    /// Starts from `initial`, then every `every` steps a `block_w`×`block_h`
    /// block of cells with reward `reward` is placed uniformly at random,
    /// always at a different position than before.
    Relocating {
        initial: RewardField,
        block_w: u32,
        block_h: u32,
        reward: f64,
        every: u64,
    },
}

/// Swept parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Agents,
    Steps,
    TempHalf,
    AlphaHalf,
    /// Fixed learning rate (`alpha_max = alpha_min`).
    Alpha,
    TempMax,
    Gamma,
}

impl SweepParam {
    pub const ALL: [SweepParam; 7] = [
        SweepParam::Agents,
        SweepParam::Steps,
        SweepParam::TempHalf,
        SweepParam::AlphaHalf,
        SweepParam::Alpha,
        SweepParam::TempMax,
        SweepParam::Gamma,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Agents => "agents",
            SweepParam::Steps => "steps",
            SweepParam::TempHalf => "temp_half",
            SweepParam::AlphaHalf => "alpha_half",
            SweepParam::Alpha => "alpha",
            SweepParam::TempMax => "temp_max",
            SweepParam::Gamma => "gamma",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }
}

/// What each replication measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Measure {
    /// Fixed-length run of `total_steps`.
    #[default]
    Fire,
    /// Run until full exploration (capped by `coverage_cap`).
    Coverage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxis {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub grid: GridSpec,
    pub fire: FireSpec,
    /// One start state per agent.
    pub starts: Vec<usize>,
    pub total_steps: u64,
    pub replications: usize,
    pub seed: u64,
    pub params: LearnParams,
    pub strategy: Strategy,
    pub period: Option<PeriodPolicy>,
    pub coverage: Coverage,
    pub coverage_cap: u64,
    pub measure: Measure,
    pub sweep: Option<SweepAxis>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let grid = GridSpec::new(4, 4).unwrap();
        let field = RewardField::with_fire_states(grid, &DEFAULT_FIRE_STATES, DEFAULT_FIRE_REWARD).unwrap();
        Self {
            grid,
            fire: FireSpec::Segments(FireSchedule::stationary(field)),
            starts: vec![DEFAULT_START; 10],
            total_steps: 180,
            replications: 50,
            seed: 1,
            params: LearnParams::default(),
            strategy: Strategy::Boltzmann,
            period: None,
            coverage: Coverage::States,
            coverage_cap: 100_000,
            measure: Measure::Fire,
            sweep: None,
        }
    }
}

impl ExperimentConfig {
    pub fn num_agents(&self) -> usize {
        self.starts.len()
    }

    /// Sets the agent count, keeping the first agent's start state for all.
    pub fn set_agents(&mut self, n: usize) {
        let start = self.starts.first().copied().unwrap_or(DEFAULT_START);
        self.starts = vec![start; n];
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.starts.is_empty() {
            return Err(field_err("agents.count", "at least one agent is required"));
        }
        for &s in &self.starts {
            self.grid
                .check_index(s)
                .map_err(|_| field_err("agents.start", format!("state out of range: {s}")))?;
        }
        if self.total_steps == 0 {
            return Err(field_err("run.steps", "must be at least 1"));
        }
        if self.replications == 0 {
            return Err(field_err("run.replications", "must be at least 1"));
        }
        LearnParams::new(self.params.gamma, self.params.alpha, self.params.temperature)
            .map_err(|e| field_err("learning", e.to_string()))?;
        match self.strategy {
            Strategy::Boltzmann if self.params.temperature.v_min() <= 0.0 => {
                return Err(field_err("learning.temp_min", "Boltzmann exploration needs temp_min > 0"))
            }
            Strategy::EpsilonGreedy if self.params.temperature.v_max() > 1.0 => {
                return Err(field_err("learning.temp_max", "epsilon schedule must stay within [0, 1]"))
            }
            _ => {}
        }
        if let FireSpec::Relocating {
            block_w,
            block_h,
            every,
            ..
        } = &self.fire
        {
            if *block_w == 0 || *block_h == 0 || *block_w > self.grid.width() || *block_h > self.grid.height() {
                return Err(field_err("fire.block", format!("{block_w}x{block_h} does not fit the grid")));
            }
            if *every == 0 {
                return Err(field_err("fire.every", "must be at least 1"));
            }
        }
        if let Some(axis) = &self.sweep {
            if axis.values.is_empty() {
                return Err(field_err("sweep.values", "needs at least one value"));
            }
            for (i, &v) in axis.values.iter().enumerate() {
                let mut probe = self.clone();
                probe.sweep = None;
                probe
                    .apply(axis.param, v)
                    .and_then(|_| probe.validate())
                    .map_err(|e| field_err("sweep.values", format!("value #{i} ({v}): {e}")))?;
            }
        }
        Ok(())
    }

    /// Overrides one parameter with a sweep value.
    pub fn apply(&mut self, param: SweepParam, value: f64) -> Result<(), ConfigError> {
        let bad = |msg: &str| field_err(param.name(), format!("{msg}, got {value}"));
        let count = |v: f64| -> Result<u64, ConfigError> {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as u64)
            } else {
                Err(bad("must be a positive integer"))
            }
        };
        let p = &mut self.params;
        match param {
            SweepParam::Agents => self.set_agents(count(value)? as usize),
            SweepParam::Steps => self.total_steps = count(value)?,
            SweepParam::TempHalf => {
                p.temperature = p.temperature.with_half_life(value).map_err(|e| bad(&e.to_string()))?
            }
            SweepParam::AlphaHalf => p.alpha = p.alpha.with_half_life(value).map_err(|e| bad(&e.to_string()))?,
            SweepParam::Alpha => {
                if !(0.0..=1.0).contains(&value) {
                    return Err(bad("must lie in [0, 1]"));
                }
                p.alpha = DecaySchedule::new(value, value, p.alpha.half_life()).unwrap();
            }
            SweepParam::TempMax => {
                p.temperature = DecaySchedule::new(value, p.temperature.v_min(), p.temperature.half_life())
                    .map_err(|e| bad(&e.to_string()))?
            }
            SweepParam::Gamma => {
                if !(0.0..1.0).contains(&value) {
                    return Err(bad("must lie in [0, 1)"));
                }
                p.gamma = value;
            }
        }
        Ok(())
    }

    /// Fire schedule for one run. Random relocation draws from a stream
    /// derived from the run seed.
    pub fn schedule_for(&self, run_seed: u64, total_steps: u64) -> FireSchedule {
        match &self.fire {
            FireSpec::Segments(s) => s.clone(),
            FireSpec::Relocating {
                initial,
                block_w,
                block_h,
                reward,
                every,
            } => {
                use rand::Rng;
                let mut rng = seed::stream_rng(seed::derive_seed(run_seed, FIRE_STREAM, 0));
                let (gw, gh) = (self.grid.width(), self.grid.height());
                let positions = (gw - block_w + 1) * (gh - block_h + 1);
                let block_at = |pos: u32| {
                    let (x0, y0) = (pos % (gw - block_w + 1), pos / (gw - block_w + 1));
                    let states: Vec<usize> = (y0..y0 + block_h)
                        .flat_map(|y| (x0..x0 + block_w).map(move |x| (y * gw + x) as usize))
                        .collect();
                    RewardField::with_fire_states(self.grid, &states, *reward).unwrap()
                };
                let mut segments = vec![(0, initial.clone())];
                let mut start = *every;
                while start < total_steps {
                    let previous = &segments.last().unwrap().1;
                    let mut field = block_at(rng.random_range(0..positions));
                    // Resample until the fire actually moves; a single-position
                    // grid can only repeat itself.
                    while positions > 1 && &field == previous {
                        field = block_at(rng.random_range(0..positions));
                    }
                    segments.push((start, field));
                    start += every;
                }
                FireSchedule::new(segments).unwrap()
            }
        }
    }

    pub fn engine_config(&self, run_seed: u64, total_steps: u64) -> EngineConfig {
        EngineConfig {
            grid: self.grid,
            schedule: self.schedule_for(run_seed, total_steps),
            params: self.params,
            strategy: self.strategy,
            period: self.period,
            starts: self.starts.iter().map(|&s| self.grid.cell(s).unwrap()).collect(),
            seed: run_seed,
        }
    }

    /// Renders the fully resolved configuration in the file format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let p = &self.params;
        let _ = writeln!(out, "[grid]\nwidth = {}\nheight = {}\n", self.grid.width(), self.grid.height());
        let _ = writeln!(out, "[agents]\ncount = {}", self.starts.len());
        if self.starts.iter().all(|&s| s == self.starts[0]) {
            let _ = writeln!(out, "start = {}\n", self.starts[0]);
        } else {
            let _ = writeln!(out, "starts = {}\n", join(&self.starts));
        }
        let strategy = match self.strategy {
            Strategy::Boltzmann => "boltzmann",
            Strategy::EpsilonGreedy => "epsilon-greedy",
            Strategy::Greedy => "greedy",
        };
        let coverage = match self.coverage {
            Coverage::States => "states",
            Coverage::StateActions => "state-actions",
        };
        let _ = writeln!(
            out,
            "[run]\nsteps = {}\nreplications = {}\nseed = {}\nstrategy = {strategy}\ncoverage = {coverage}\ncoverage_cap = {}\n",
            self.total_steps, self.replications, self.seed, self.coverage_cap
        );
        let _ = writeln!(
            out,
            "[learning]\ngamma = {}\nalpha_max = {}\nalpha_min = {}\nalpha_half = {}\ntemp_max = {}\ntemp_min = {}\ntemp_half = {}\n",
            p.gamma,
            p.alpha.v_max(),
            p.alpha.v_min(),
            p.alpha.half_life(),
            p.temperature.v_max(),
            p.temperature.v_min(),
            p.temperature.half_life()
        );
        match &self.fire {
            FireSpec::Segments(s) => {
                for (i, (start, field)) in s.segments().iter().enumerate() {
                    if i == 0 {
                        out.push_str("[fire]\n");
                    } else {
                        let _ = writeln!(out, "[fire {start}]");
                    }
                    write_field(&mut out, field);
                }
            }
            FireSpec::Relocating {
                initial,
                block_w,
                block_h,
                reward,
                every,
            } => {
                out.push_str("[fire]\n");
                write_field(&mut out, initial);
                // `write_field` already emitted a blank line; keep relocation keys in the same section.
                out.pop();
                let _ = writeln!(
                    out,
                    "relocate = random\nblock = {block_w}x{block_h}\nblock_reward = {reward}\nevery = {every}\n"
                );
            }
        }
        if let Some(period) = &self.period {
            let mode = match period.mode {
                PeriodMode::Reset => "reset",
                PeriodMode::CarryForward => "carry",
            };
            let _ = writeln!(
                out,
                "[period]\nlength = {}\nmode = {mode}\nwarm_restart = {}\n",
                period.length, period.warm_restart
            );
        }
        if let Some(axis) = &self.sweep {
            let metric = match self.measure {
                Measure::Fire => "fire",
                Measure::Coverage => "coverage",
            };
            let _ = writeln!(
                out,
                "[sweep]\nparam = {}\nvalues = {}\nmetric = {metric}\n",
                axis.param.name(),
                join(&axis.values)
            );
        }
        out
    }
}

/// Domain tag for fire-relocation streams.
const FIRE_STREAM: u64 = 0xF12E_0000_0000_0001;

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn write_field(out: &mut String, field: &RewardField) {
    let fire = field.fire_states();
    let uniform = fire.windows(2).all(|w| field.value(w[0]) == field.value(w[1]));
    if uniform && !fire.is_empty() {
        let _ = writeln!(out, "states = {}\nreward = {}\n", join(&fire), field.value(fire[0]));
    } else {
        let _ = writeln!(out, "values = {}\n", join(field.values()));
    }
}

/// Raw `key = value` entries grouped by section, with source line numbers.
#[derive(Debug, Default)]
struct RawDoc {
    sections: Vec<RawSection>,
}

#[derive(Debug)]
struct RawSection {
    name: String,
    arg: Option<String>,
    line: usize,
    entries: BTreeMap<String, (String, usize)>,
}

fn parse_raw(text: &str) -> Result<RawDoc, ConfigError> {
    let mut doc = RawDoc::default();
    doc.sections.push(RawSection {
        name: String::new(),
        arg: None,
        line: 0,
        entries: BTreeMap::new(),
    });
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap().trim();
        if content.is_empty() {
            continue;
        }
        if let Some(inner) = content.strip_prefix('[') {
            let inner = inner.strip_suffix(']').ok_or_else(|| ConfigError::Parse {
                line,
                message: "unterminated section header".into(),
            })?;
            let mut parts = inner.split_whitespace();
            let name = parts.next().ok_or_else(|| ConfigError::Parse {
                line,
                message: "empty section header".into(),
            })?;
            let arg = parts.next().map(str::to_string);
            if parts.next().is_some() {
                return Err(ConfigError::Parse {
                    line,
                    message: "section header takes at most one argument".into(),
                });
            }
            doc.sections.push(RawSection {
                name: name.to_string(),
                arg,
                line,
                entries: BTreeMap::new(),
            });
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Parse {
            line,
            message: format!("expected `key = value`, found `{content}`"),
        })?;
        let key = key.trim();
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(ConfigError::Parse {
                line,
                message: format!("invalid key `{key}`"),
            });
        }
        let section = doc.sections.last_mut().unwrap();
        if section
            .entries
            .insert(key.to_string(), (value.trim().to_string(), line))
            .is_some()
        {
            return Err(ConfigError::Parse {
                line,
                message: format!("duplicate key `{key}`"),
            });
        }
    }
    Ok(doc)
}

/// Typed access to one section's entries; tracks which keys were consumed.
struct Section<'a> {
    name: String,
    entries: BTreeMap<String, (String, usize)>,
    _doc: std::marker::PhantomData<&'a ()>,
}

impl Section<'_> {
    fn take(&mut self, key: &str) -> Option<(String, usize)> {
        self.entries.remove(key)
    }

    fn field(&self, key: &str) -> String {
        if self.name.is_empty() {
            key.to_string()
        } else {
            format!("{}.{}", self.name, key)
        }
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        let field = self.field(key);
        match self.take(key) {
            None => Ok(None),
            Some((v, line)) => v.parse().map(Some).map_err(|e| ConfigError::Parse {
                line,
                message: format!("{field}: cannot parse `{v}`: {e}"),
            }),
        }
    }

    fn list<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        let field = self.field(key);
        match self.take(key) {
            None => Ok(None),
            Some((v, line)) => v
                .split(',')
                .map(|item| {
                    item.trim().parse().map_err(|e| ConfigError::Parse {
                        line,
                        message: format!("{field}: cannot parse list item `{}`: {e}", item.trim()),
                    })
                })
                .collect::<Result<Vec<_>, _>>()
                .map(Some),
        }
    }

    fn finish(self) -> Result<(), ConfigError> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((key, (_, line))) => Err(ConfigError::Parse {
                line,
                message: format!("unknown key `{key}` in [{}]", self.name),
            }),
        }
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_config(&text, path.parent())
}

/// Parses configuration text. Relative `field` paths resolve against `base`.
pub fn parse_config(text: &str, base: Option<&Path>) -> Result<ExperimentConfig, ConfigError> {
    let doc = parse_raw(text)?;
    let mut cfg = ExperimentConfig::default();
    let mut fire_sections = Vec::new();
    let mut seen = Vec::new();
    let mut grid_size = (4u32, 4u32);
    let mut agents: (Option<usize>, Option<usize>, Option<Vec<usize>>) = (None, None, None);

    // Grid first: every state index below is checked against it.
    let mut sections: Vec<RawSection> = doc.sections;
    sections.sort_by_key(|s| (s.name != "grid", s.line));
    for raw in sections {
        if raw.name.is_empty() {
            if let Some((key, (_, line))) = raw.entries.into_iter().next() {
                return Err(ConfigError::Parse {
                    line,
                    message: format!("key `{key}` outside any section"),
                });
            }
            continue;
        }
        let key = (raw.name.clone(), raw.arg.clone());
        if seen.contains(&key) {
            return Err(ConfigError::Parse {
                line: raw.line,
                message: format!("duplicate section [{}]", raw.name),
            });
        }
        seen.push(key);
        if raw.arg.is_some() && raw.name != "fire" {
            return Err(ConfigError::Parse {
                line: raw.line,
                message: format!("section [{}] takes no argument", raw.name),
            });
        }
        let mut sec = Section {
            name: raw.name.clone(),
            entries: raw.entries,
            _doc: std::marker::PhantomData,
        };
        match raw.name.as_str() {
            "grid" => {
                grid_size.0 = sec.parse("width")?.unwrap_or(4);
                grid_size.1 = sec.parse("height")?.unwrap_or(4);
                cfg.grid = GridSpec::new(grid_size.0, grid_size.1).map_err(|e| field_err("grid", e.to_string()))?;
                sec.finish()?;
            }
            "agents" => {
                agents = (sec.parse("count")?, sec.parse("start")?, sec.list("starts")?);
                sec.finish()?;
            }
            "run" => {
                if let Some(v) = sec.parse("steps")? {
                    cfg.total_steps = v;
                }
                if let Some(v) = sec.parse("replications")? {
                    cfg.replications = v;
                }
                if let Some(v) = sec.parse("seed")? {
                    cfg.seed = v;
                }
                if let Some(v) = sec.parse::<String>("strategy")? {
                    cfg.strategy = match v.as_str() {
                        "boltzmann" => Strategy::Boltzmann,
                        "epsilon-greedy" => Strategy::EpsilonGreedy,
                        "greedy" => Strategy::Greedy,
                        other => return Err(field_err("run.strategy", format!("unknown strategy `{other}`"))),
                    };
                }
                if let Some(v) = sec.parse::<String>("coverage")? {
                    cfg.coverage = match v.as_str() {
                        "states" => Coverage::States,
                        "state-actions" => Coverage::StateActions,
                        other => return Err(field_err("run.coverage", format!("unknown coverage `{other}`"))),
                    };
                }
                if let Some(v) = sec.parse("coverage_cap")? {
                    cfg.coverage_cap = v;
                }
                sec.finish()?;
            }
            "learning" => {
                let p = &mut cfg.params;
                if let Some(v) = sec.parse("gamma")? {
                    p.gamma = v;
                }
                let a = (
                    sec.parse("alpha_max")?.unwrap_or(p.alpha.v_max()),
                    sec.parse("alpha_min")?.unwrap_or(p.alpha.v_min()),
                    sec.parse("alpha_half")?.unwrap_or(p.alpha.half_life()),
                );
                p.alpha = DecaySchedule::new(a.0, a.1, a.2).map_err(|e| field_err("learning.alpha", e.to_string()))?;
                let t = (
                    sec.parse("temp_max")?.unwrap_or(p.temperature.v_max()),
                    sec.parse("temp_min")?.unwrap_or(p.temperature.v_min()),
                    sec.parse("temp_half")?.unwrap_or(p.temperature.half_life()),
                );
                p.temperature =
                    DecaySchedule::new(t.0, t.1, t.2).map_err(|e| field_err("learning.temp", e.to_string()))?;
                sec.finish()?;
            }
            "fire" => {
                let start: u64 = match &raw.arg {
                    None => 0,
                    Some(a) => a.parse().map_err(|_| ConfigError::Parse {
                        line: raw.line,
                        message: format!("fire segment start `{a}` is not a step number"),
                    })?,
                };
                fire_sections.push((start, raw.line, parse_fire_section(&mut sec, cfg.grid, base)?, sec));
            }
            "period" => {
                let length: u64 = sec
                    .parse("length")?
                    .ok_or_else(|| field_err("period.length", "required when [period] is present"))?;
                let mode = match sec.parse::<String>("mode")?.as_deref() {
                    None | Some("reset") => PeriodMode::Reset,
                    Some("carry") | Some("carry-forward") => PeriodMode::CarryForward,
                    Some(other) => return Err(field_err("period.mode", format!("unknown mode `{other}`"))),
                };
                let mut policy =
                    PeriodPolicy::new(length, mode).map_err(|e| field_err("period.length", e.to_string()))?;
                if let Some(w) = sec.parse::<f64>("warm_restart")? {
                    if w.is_nan() || w < 0.0 {
                        return Err(field_err("period.warm_restart", "must be nonnegative"));
                    }
                    policy.warm_restart = w;
                }
                cfg.period = Some(policy);
                sec.finish()?;
            }
            "sweep" => {
                let name: String = sec
                    .parse("param")?
                    .ok_or_else(|| field_err("sweep.param", "required when [sweep] is present"))?;
                let param = SweepParam::from_name(&name)
                    .ok_or_else(|| field_err("sweep.param", format!("unknown parameter `{name}`")))?;
                let values = sec
                    .list("values")?
                    .ok_or_else(|| field_err("sweep.values", "required when [sweep] is present"))?;
                cfg.measure = match sec.parse::<String>("metric")?.as_deref() {
                    None | Some("fire") => Measure::Fire,
                    Some("coverage") => Measure::Coverage,
                    Some(other) => return Err(field_err("sweep.metric", format!("unknown metric `{other}`"))),
                };
                cfg.sweep = Some(SweepAxis { param, values });
                sec.finish()?;
            }
            other => {
                return Err(ConfigError::Parse {
                    line: raw.line,
                    message: format!("unknown section [{other}]"),
                })
            }
        }
    }

    let (count, start, starts) = agents;
    cfg.starts = match (starts, start) {
        (Some(_), Some(_)) => return Err(field_err("agents", "give either `start` or `starts`, not both")),
        (Some(list), None) => {
            if count.is_some_and(|c| c != list.len()) {
                return Err(field_err("agents.starts", "length must equal agents.count"));
            }
            for &s in &list {
                cfg.grid
                    .check_index(s)
                    .map_err(|_| field_err("agents.starts", format!("state out of range: {s}")))?;
            }
            list
        }
        (None, start) => {
            let start = start.unwrap_or(DEFAULT_START);
            cfg.grid
                .check_index(start)
                .map_err(|_| field_err("agents.start", format!("state out of range: {start}")))?;
            vec![start; count.unwrap_or(10)]
        }
    };

    fire_sections.sort_by_key(|(start, ..)| *start);
    cfg.fire = build_fire(cfg.grid, fire_sections)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parsed keys of one `[fire]` section before assembly.
struct FireSection {
    field: Option<RewardField>,
    relocate: Option<(u32, u32, Option<f64>, Option<u64>)>,
}

fn parse_fire_section(sec: &mut Section<'_>, grid: GridSpec, base: Option<&Path>) -> Result<FireSection, ConfigError> {
    let states: Option<Vec<usize>> = sec.list("states")?;
    let reward: Option<f64> = sec.parse("reward")?;
    let values: Option<Vec<f64>> = sec.list("values")?;
    let path: Option<String> = sec.parse("field")?;
    let given = [states.is_some(), values.is_some(), path.is_some()]
        .iter()
        .filter(|b| **b)
        .count();
    if given > 1 {
        return Err(field_err(&sec.field("states"), "give only one of `states`, `values`, `field`"));
    }
    let field = if let Some(states) = states {
        for &s in &states {
            grid.check_index(s)
                .map_err(|_| field_err(&sec.field("states"), format!("state out of range: {s}")))?;
        }
        let reward = reward.unwrap_or(DEFAULT_FIRE_REWARD);
        Some(RewardField::with_fire_states(grid, &states, reward).map_err(|e| field_err(&sec.field("reward"), e.to_string()))?)
    } else if let Some(values) = values {
        if reward.is_some() {
            return Err(field_err(&sec.field("reward"), "only valid together with `states`"));
        }
        Some(RewardField::new(grid, values).map_err(|e| field_err(&sec.field("values"), e.to_string()))?)
    } else if let Some(path) = path {
        let mut full = PathBuf::from(&path);
        if full.is_relative() {
            if let Some(base) = base {
                full = base.join(full);
            }
        }
        Some(read_reward_csv(&full, grid).map_err(|e| field_err(&sec.field("field"), e))?)
    } else {
        if reward.is_some() {
            return Err(field_err(&sec.field("reward"), "only valid together with `states`"));
        }
        None
    };

    let relocate = match sec.parse::<String>("relocate")?.as_deref() {
        None | Some("none") => None,
        Some("random") => {
            let block: String = sec.parse("block")?.unwrap_or_else(|| "2x2".into());
            let (w, h) = block
                .split_once('x')
                .and_then(|(w, h)| Some((w.trim().parse().ok()?, h.trim().parse().ok()?)))
                .ok_or_else(|| field_err(&sec.field("block"), format!("expected WxH, got `{block}`")))?;
            Some((w, h, sec.parse("block_reward")?, sec.parse("every")?))
        }
        Some(other) => return Err(field_err(&sec.field("relocate"), format!("unknown mode `{other}`"))),
    };
    Ok(FireSection { field, relocate })
}

fn build_fire(
    grid: GridSpec,
    sections: Vec<(u64, usize, FireSection, Section<'_>)>,
) -> Result<FireSpec, ConfigError> {
    let default_field =
        || RewardField::with_fire_states(grid, &DEFAULT_FIRE_STATES, DEFAULT_FIRE_REWARD).map_err(|e| field_err("fire", e.to_string()));
    if sections.is_empty() {
        return Ok(FireSpec::Segments(FireSchedule::stationary(default_field()?)));
    }
    if sections[0].0 != 0 {
        return Err(field_err("fire", "the first fire segment must be the plain [fire] section"));
    }
    let mut segments = Vec::new();
    let mut relocate = None;
    let n = sections.len();
    for (start, line, parsed, sec) in sections {
        sec.finish()?;
        if let Some(r) = parsed.relocate {
            if start != 0 || n > 1 {
                return Err(ConfigError::Parse {
                    line,
                    message: "random relocation cannot be combined with explicit segments".into(),
                });
            }
            relocate = Some(r);
        }
        let field = match parsed.field {
            Some(f) => f,
            None if start == 0 => default_field()?,
            None => return Err(field_err(&format!("fire {start}"), "segment needs `states`, `values` or `field`")),
        };
        segments.push((start, field));
    }
    if let Some((block_w, block_h, block_reward, every)) = relocate {
        let initial = segments.remove(0).1;
        let reward = block_reward.unwrap_or_else(|| {
            let fire = initial.fire_states();
            fire.first().map_or(DEFAULT_FIRE_REWARD, |&s| initial.value(s))
        });
        if !reward.is_finite() || reward <= 0.0 {
            return Err(field_err("fire.block_reward", "must be positive"));
        }
        return Ok(FireSpec::Relocating {
            initial,
            block_w,
            block_h,
            reward,
            every: every.unwrap_or(180),
        });
    }
    FireSchedule::new(segments)
        .map(FireSpec::Segments)
        .map_err(|e| field_err("fire", e.to_string()))
}

/// Reads a `state_index,reward` CSV covering every state of `grid`.
pub fn read_reward_csv(path: &Path, grid: GridSpec) -> Result<RewardField, String> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let headers = reader.headers().map_err(|e| e.to_string())?.clone();
    if headers.iter().collect::<Vec<_>>() != ["state_index", "reward"] {
        return Err(format!("{}: expected header `state_index,reward`", path.display()));
    }
    let mut values = vec![None; grid.num_states()];
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| e.to_string())?;
        let row = i + 2;
        let state: usize = rec
            .get(0)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| format!("line {row}: bad state index"))?;
        let reward: f64 = rec
            .get(1)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| format!("line {row}: bad reward"))?;
        let slot = values
            .get_mut(state)
            .ok_or_else(|| format!("line {row}: state out of range: {state}"))?;
        if slot.replace(reward).is_some() {
            return Err(format!("line {row}: duplicate state {state}"));
        }
    }
    let values = values
        .into_iter()
        .enumerate()
        .map(|(i, v)| v.ok_or_else(|| format!("missing state {i}")))
        .collect::<Result<Vec<_>, _>>()?;
    RewardField::new(grid, values).map_err(|e| e.to_string())
}

pub fn write_reward_csv<W: std::io::Write>(writer: W, field: &RewardField) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["state_index", "reward"])?;
    for (i, v) in field.values().iter().enumerate() {
        w.write_record([i.to_string(), v.to_string()])?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = parse_config("[grid]\nwidth = 4\nheight = 4\n[fire]\nstates = 2,3,6,7\n", None).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.num_agents(), 10);
        assert_eq!(cfg.starts[0], 13);
        assert_eq!(cfg.params.gamma, 0.9);
        assert_eq!(cfg.replications, 50);
        assert_eq!(parse_config("", None).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn out_of_range_fire_state() {
        let err = parse_config("[fire]\nstates = 2,16\n", None).unwrap_err();
        assert!(err.to_string().contains("state out of range"), "{err}");
        assert!(matches!(err, ConfigError::Field { ref field, .. } if field == "fire.states"));
    }

    #[test]
    fn sweep_parses_into_points() {
        let cfg = parse_config("[sweep]\nparam = temp_half\nvalues = 10, 25, 50, 100, 200\n", None).unwrap();
        let axis = cfg.sweep.as_ref().unwrap();
        assert_eq!(axis.param, SweepParam::TempHalf);
        assert_eq!(axis.values.len() * cfg.replications, 5 * 50);
    }

    #[test]
    fn zero_agents_rejected() {
        let err = parse_config("[agents]\ncount = 0\n", None).unwrap_err();
        assert!(matches!(err, ConfigError::Field { ref field, .. } if field == "agents.count"));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = parse_config("[grid]\nwidth = 4\nheight four\n", None).unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 3, .. }), "{err:?}");
        let err = parse_config("[run]\n\n# comment\nsteps = abc\n", None).unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 4, .. }), "{err:?}");
        let err = parse_config("[run]\nstep = 5\n", None).unwrap_err();
        assert!(err.to_string().contains("unknown key `step`"));
        let err = parse_config("[bogus]\n", None).unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 1, .. }));
        let err = parse_config("steps = 5\n", None).unwrap_err();
        assert!(err.to_string().contains("outside any section"));
        let err = parse_config("[run]\nsteps = 5\nsteps = 6\n", None).unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 3, .. }));
    }

    #[test]
    fn grid_section_order_does_not_matter() {
        let cfg = parse_config("[fire]\nstates = 24\n[grid]\nwidth = 5\nheight = 5\n", None).unwrap();
        assert_eq!(cfg.grid.num_states(), 25);
        let err = parse_config("[fire]\nstates = 24\n", None).unwrap_err();
        assert!(err.to_string().contains("state out of range"));
    }

    #[test]
    fn segments_and_relocation() {
        let cfg = parse_config(
            "[period]\nlength = 180\n[fire]\nstates = 2,3,6,7\n[fire 180]\nstates = 5,9\nreward = 0.5\n",
            None,
        )
        .unwrap();
        let sched = cfg.schedule_for(1, 360);
        assert_eq!(sched.segment_starts().collect::<Vec<_>>(), vec![0, 180]);
        assert_eq!(sched.active(200).fire_states(), vec![5, 9]);
        assert_eq!(cfg.period.unwrap().mode, PeriodMode::Reset);

        let cfg = parse_config("[fire]\nrelocate = random\nblock = 1x2\nevery = 100\n", None).unwrap();
        let a = cfg.schedule_for(7, 350);
        assert_eq!(a.segment_starts().collect::<Vec<_>>(), vec![0, 100, 200, 300]);
        assert_eq!(a, cfg.schedule_for(7, 350));
        for pair in a.segments().windows(2) {
            assert_ne!(pair[0].1, pair[1].1);
        }
        for (_, f) in &a.segments()[1..] {
            let fire = f.fire_states();
            assert_eq!(fire.len(), 2);
            assert_eq!(fire[1] - fire[0], 4);
            assert_eq!(f.value(fire[0]), DEFAULT_FIRE_REWARD);
        }
        assert!(parse_config("[fire]\nrelocate = random\nblock = 5x1\n", None).is_err());
        assert!(parse_config("[fire]\nrelocate = random\n[fire 100]\nstates = 1\n", None).is_err());
        assert!(parse_config("[fire 100]\nstates = 1\n", None).is_err());
    }

    #[test]
    fn echo_round_trips() {
        let texts = [
            "",
            "[agents]\nstarts = 0,5,15\n[run]\nstrategy = epsilon-greedy\ncoverage = state-actions\n",
            "[fire]\nvalues = 0,0.5,0.25,0,0,0,0,0,0,0,0,0,0,0,0,1\n[fire 90]\nstates = 1\n[period]\nlength = 90\nmode = carry\nwarm_restart = 1.5\n",
            "[fire]\nstates = 2,3\nrelocate = random\nblock = 2x1\nevery = 60\n[sweep]\nparam = agents\nvalues = 1,2,4\nmetric = coverage\n",
        ];
        for t in texts {
            let cfg = parse_config(t, None).unwrap();
            let echoed = cfg.to_text();
            assert_eq!(parse_config(&echoed, None).unwrap(), cfg, "{echoed}");
        }
    }

    #[test]
    fn sweep_values_validated() {
        assert!(parse_config("[sweep]\nparam = agents\nvalues = 1,0\n", None).is_err());
        assert!(parse_config("[sweep]\nparam = gamma\nvalues = 0.5,1.0\n", None).is_err());
        assert!(parse_config("[sweep]\nparam = nope\nvalues = 1\n", None).is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.apply(SweepParam::Alpha, 0.5).unwrap();
        assert_eq!(cfg.params.alpha.value(1e9), 0.5);
        cfg.apply(SweepParam::Agents, 3.0).unwrap();
        assert_eq!(cfg.starts, vec![13; 3]);
    }

    #[test]
    fn reward_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let grid = GridSpec::new(2, 2).unwrap();
        let field = RewardField::new(grid, vec![0.0, 1.0 / 3.0, 0.125, 0.0]).unwrap();
        let path = dir.path().join("r.csv");
        write_reward_csv(std::fs::File::create(&path).unwrap(), &field).unwrap();
        assert_eq!(read_reward_csv(&path, grid).unwrap(), field);

        std::fs::write(dir.path().join("cfg.txt"), "[grid]\nwidth = 2\nheight = 2\n[agents]\nstart = 0\n[fire]\nfield = r.csv\n").unwrap();
        let cfg = load_config(&dir.path().join("cfg.txt")).unwrap();
        assert_eq!(cfg.schedule_for(0, 10).active(0), &field);

        std::fs::write(&path, "state_index,reward\n0,1\n0,1\n1,0\n2,0\n3,0\n").unwrap();
        assert!(read_reward_csv(&path, grid).unwrap_err().contains("duplicate"));
        std::fs::write(&path, "state_index,reward\n0,1\n").unwrap();
        assert!(read_reward_csv(&path, grid).unwrap_err().contains("missing state 1"));
    }
}
