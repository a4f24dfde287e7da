//! `marl`: run experiments, sweeps and adaptation studies, serve the shared
//! table to agent processes, and turn images into reward fields.
//!
//! Exit codes: 0 success, 1 usage, 2 configuration, 3 runtime, 4 network.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use marl_core::config::{load_config, ConfigError, ExperimentConfig, SweepAxis, SweepParam};
use marl_core::harness::{self, HarnessError};
use marl_core::net::{self, Client, ServerConfig};
use marl_core::reward::{self, FireClassifier};
use marl_core::seed::derive_seed;

#[derive(Parser)]
#[command(name = "marl", version, about = "Multi-agent Q-learning over a shared table")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replicated runs of one scenario.
    Run(Common),
    /// One row of replicated runs per value of the swept parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Parameter to sweep (overrides the config's [sweep] section).
        #[arg(long)]
        param: Option<String>,
        /// Comma-separated values for --param.
        #[arg(long, value_delimiter = ',', requires = "param")]
        values: Option<Vec<f64>>,
    },
    /// Per-period fire-time fractions under a moving fire.
    Adapt(Common),
    /// Serve the shared table over TCP.
    Serve {
        #[command(flatten)]
        common: Common,
        /// Server address.
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: String,
        /// Exit after this many agents have finished.
        #[arg(long)]
        expect: Option<usize>,
    },
    /// Drive one agent against a running server.
    Agent {
        #[command(flatten)]
        common: Common,
        /// Server address.
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: String,
        /// Connect and request timeout in milliseconds.
        #[arg(long, default_value_t = 10_000)]
        timeout_ms: u64,
    },
    /// Convert a P6 PPM image into a reward field CSV.
    Reward {
        /// Input image, binary PPM (P6).
        #[arg(long)]
        image: PathBuf,
        /// Tile grid as COLSxROWS.
        #[arg(long, default_value = "4x4")]
        grid: String,
        /// Magnification of the source image; tile values are divided by it.
        #[arg(long, default_value_t = 1.0)]
        zoom: f64,
        /// Smallest red channel counted as fire.
        #[arg(long, default_value_t = FireClassifier::default().min_red)]
        min_red: u8,
        /// Largest green channel counted as fire.
        #[arg(long, default_value_t = FireClassifier::default().max_green)]
        max_green: u8,
        /// Largest blue channel counted as fire.
        #[arg(long, default_value_t = FireClassifier::default().max_blue)]
        max_blue: u8,
        /// Output CSV file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment configuration file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Number of agents; overrides the config.
    #[arg(long)]
    agents: Option<usize>,
    /// Steps per run; overrides the config.
    #[arg(long)]
    steps: Option<u64>,
    /// Replications per point; overrides the config.
    #[arg(long)]
    replications: Option<usize>,
}

enum Failure {
    Usage(String),
    Config(String),
    Runtime(String),
    Network(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
            Failure::Network(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Config(m) | Failure::Runtime(m) | Failure::Network(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(c) => c.into(),
            HarnessError::NoPeriod | HarnessError::MisalignedChange(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn io_failure(path: &Path) -> impl Fn(io::Error) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{}: {e}", path.display()))
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, Failure> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.agents {
            cfg.set_agents(n);
        }
        if let Some(n) = self.steps {
            cfg.total_steps = n;
        }
        if let Some(n) = self.replications {
            cfg.replications = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    match invoke(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                // clap diagnostics arrive fully formatted.
                Failure::Usage(m) if m.starts_with("error:") => eprintln!("{m}"),
                other => eprintln!("marl: {}", other.message()),
            }
            ExitCode::from(f.exit_code())
        }
    }
}

/// Parses `args` (program name first) and runs the command.
fn invoke<I, T>(args: I) -> Result<(), Failure>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(cli.command),
        Err(e) if e.use_stderr() => Err(Failure::Usage(e.render().to_string().trim_end().to_string())),
        Err(e) => {
            // --help and --version.
            let _ = e.print();
            Ok(())
        }
    }
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run(common) => {
            let cfg = common.resolve()?;
            let out = harness::run_experiment(&cfg)?;
            harness::write_run_outputs(&common.out, &cfg, &out).map_err(io_failure(&common.out))?;
            let f = out.summary.fire_fraction;
            println!(
                "{} runs, {} agents, {} steps: fire-time fraction {:.4} (std {:.4})",
                f.n,
                cfg.num_agents(),
                cfg.total_steps,
                f.mean,
                f.std
            );
            Ok(())
        }
        Command::Sweep { common, param, values } => {
            let mut cfg = common.resolve()?;
            if let Some(name) = param {
                let param = SweepParam::from_name(&name)
                    .ok_or_else(|| Failure::Usage(format!("unknown sweep parameter `{name}`")))?;
                let values = match (values, &cfg.sweep) {
                    (Some(v), _) => v,
                    (None, Some(axis)) if axis.param == param => axis.values.clone(),
                    (None, _) => return Err(Failure::Usage("--param needs --values".into())),
                };
                cfg.sweep = Some(SweepAxis { param, values });
                cfg.validate()?;
            }
            let out = harness::run_sweep(&cfg)?;
            harness::write_sweep_outputs(&common.out, &cfg, &out).map_err(io_failure(&common.out))?;
            for row in &out.rows {
                println!(
                    "{} = {}: fire-time fraction {:.4}{}",
                    out.param_name,
                    row.param_value,
                    row.summary.fire_fraction.mean,
                    row.summary
                        .coverage_steps
                        .map(|c| format!(", coverage steps {:.1}", c.mean))
                        .unwrap_or_default()
                );
            }
            Ok(())
        }
        Command::Adapt(common) => {
            let cfg = common.resolve()?;
            let out = harness::run_adaptation(&cfg)?;
            harness::write_adapt_outputs(&common.out, &cfg, &out).map_err(io_failure(&common.out))?;
            if out.degenerate {
                eprintln!("marl: warning: the fire never moves in this run; adaptation is trivial");
            }
            for p in &out.periods {
                println!(
                    "period {} (from step {}): fire-time fraction {:.4}",
                    p.period, p.start_step, p.fire_fraction.mean
                );
            }
            Ok(())
        }
        Command::Serve { common, addr, expect } => serve(&common, &addr, expect),
        Command::Agent {
            common,
            addr,
            timeout_ms,
        } => agent(&common, &addr, Duration::from_millis(timeout_ms)),
        Command::Reward {
            image,
            grid,
            zoom,
            min_red,
            max_green,
            max_blue,
            out,
        } => {
            let (cols, rows) = grid
                .split_once('x')
                .and_then(|(c, r)| Some((c.parse::<u32>().ok()?, r.parse::<u32>().ok()?)))
                .ok_or_else(|| Failure::Usage(format!("--grid expects COLSxROWS, got `{grid}`")))?;
            if cols == 0 || rows == 0 {
                return Err(Failure::Usage("--grid dimensions must be positive".into()));
            }
            let file = File::open(&image).map_err(io_failure(&image))?;
            let img = reward::read_ppm(BufReader::new(file))
                .map_err(|e| Failure::Runtime(format!("{}: {e}", image.display())))?;
            let clf = FireClassifier {
                min_red,
                max_green,
                max_blue,
            };
            let field = reward::reward_field_from_image(&img, cols, rows, zoom, &clf)
                .map_err(|e| Failure::Runtime(e.to_string()))?;
            match out {
                Some(path) => marl_core::config::write_reward_csv(BufWriter::new(File::create(&path).map_err(io_failure(&path))?), &field)
                    .map_err(io_failure(&path)),
                None => marl_core::config::write_reward_csv(io::stdout().lock(), &field)
                    .map_err(|e| Failure::Runtime(e.to_string())),
            }
        }
    }
}

/// The server seeds agent streams like replication 0 of `marl run`, so a
/// single networked agent reproduces that run's table exactly.
fn serve(common: &Common, addr: &str, expect: Option<usize>) -> Result<(), Failure> {
    let cfg = common.resolve()?;
    let server = net::serve(
        addr,
        ServerConfig {
            num_states: cfg.grid.num_states(),
            params: cfg.params,
            strategy: cfg.strategy,
            run_seed: derive_seed(cfg.seed, 0, 0),
            expect_agents: expect,
        },
    )
    .map_err(|e| Failure::Network(format!("cannot listen on {addr}: {e}")))?;
    println!("listening on {}", server.local_addr());
    let _ = io::stdout().flush();
    let report = server.wait();
    let dir = &common.out;
    let write = || -> io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("resolved.cfg"), cfg.to_text())?;
        report.qtable.write_csv(BufWriter::new(File::create(dir.join("qtable.csv"))?))?;
        harness::write_values_csv(BufWriter::new(File::create(dir.join("values.csv"))?), &report.qtable)?;
        net::write_wal_csv(BufWriter::new(File::create(dir.join("wal.csv"))?), &report.log)
    };
    write().map_err(io_failure(dir))?;
    println!(
        "{} agents, {} logged operations; table written to {}",
        report.agents_registered,
        report.log.len(),
        dir.display()
    );
    Ok(())
}

fn agent(common: &Common, addr: &str, timeout: Duration) -> Result<(), Failure> {
    let cfg = common.resolve()?;
    let schedule = cfg.schedule_for(derive_seed(cfg.seed, 0, 0), cfg.total_steps);
    let client = Client::connect(addr, timeout).map_err(|e| Failure::Network(format!("{addr}: {e}")))?;
    let starts = cfg.starts.clone();
    let grid = cfg.grid;
    let start = move |id: usize| grid.cell(starts.get(id).copied().unwrap_or(starts[0])).expect("validated start");
    let run = net::run_agent(client, grid, &schedule, start, cfg.total_steps)
        .map_err(|e| Failure::Network(format!("partial run: {e}")))?;
    let m = &run.metrics;
    println!(
        "agent {}: {} steps, {} on fire, fire-time fraction {:.4}",
        run.agent_id,
        m.total_agent_steps,
        m.fire_steps,
        m.fire_steps as f64 / m.total_agent_steps.max(1) as f64
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exit(args: &[&str]) -> (u8, String) {
        let argv = std::iter::once("marl").chain(args.iter().copied());
        match invoke(argv) {
            Ok(()) => (0, String::new()),
            Err(f) => (f.exit_code(), f.message().to_string()),
        }
    }

    fn path(p: &Path) -> &str {
        p.to_str().unwrap()
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(exit(&[]).0, 1);
        assert_eq!(exit(&["frobnicate"]).0, 1);
        assert_eq!(exit(&["run", "--agents", "many"]).0, 1);
        assert_eq!(exit(&["sweep", "--param", "nope", "--values", "1"]).0, 1);
        assert_eq!(exit(&["reward", "--image", "x.ppm", "--grid", "4by4"]).0, 1);
        assert_eq!(exit(&["reward", "--image", "x.ppm", "--grid", "0x3"]).0, 1);
    }

    #[test]
    fn config_errors_exit_two() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.cfg");
        fs::write(&bad, "[fire]\nstates = 2,99\n").unwrap();
        let (code, msg) = exit(&["run", "--config", path(&bad)]);
        assert_eq!(code, 2);
        assert!(msg.contains("state out of range"), "{msg}");

        fs::write(&bad, "[grid]\nwidth 4\n").unwrap();
        let (code, msg) = exit(&["run", "--config", path(&bad)]);
        assert_eq!(code, 2);
        assert!(msg.contains("line 2"), "{msg}");

        assert_eq!(exit(&["run", "--agents", "0"]).0, 2);
        assert_eq!(exit(&["run", "--config", "/nonexistent/x.cfg"]).0, 2);
        // Adaptation without a period section.
        assert_eq!(exit(&["adapt", "--replications", "1"]).0, 2);
    }

    #[test]
    fn runtime_and_network_errors() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("x.ppm");
        fs::write(&img, b"P3\n1 1\n255\n0 0 0\n").unwrap();
        assert_eq!(exit(&["reward", "--image", path(&img)]).0, 3);
        assert_eq!(exit(&["reward", "--image", "/nonexistent.ppm"]).0, 3);
        let (code, msg) = exit(&["agent", "--addr", "127.0.0.1:9", "--timeout-ms", "500"]);
        assert_eq!(code, 4, "{msg}");
    }

    #[test]
    fn run_writes_expected_files() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let args = ["run", "--replications", "3", "--steps", "50", "--seed", "9", "--out", path(&out)];
        assert_eq!(exit(&args).0, 0);
        let runs = fs::read_to_string(out.join("runs.csv")).unwrap();
        let mut lines = runs.lines();
        assert_eq!(
            lines.next(),
            Some("replication,seed,n_agents,agent_steps,fire_steps,fire_fraction,coverage_step")
        );
        assert_eq!(lines.count(), 3);
        let resolved = fs::read_to_string(out.join("resolved.cfg")).unwrap();
        assert!(resolved.contains("seed = 9") && resolved.contains("steps = 50"));
        assert_eq!(fs::read_to_string(out.join("values.csv")).unwrap().lines().count(), 17);
    }

    #[test]
    fn sweep_csv_is_sorted_by_value() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("s");
        let args = ["sweep", "--param", "agents", "--values", "4,1,2", "--replications", "2", "--out", path(&out)];
        assert_eq!(exit(&args).0, 0);
        let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
        let agents: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
        assert_eq!(agents, ["1", "2", "4"]);
    }

    #[test]
    fn solid_red_image_saturates_every_cell() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("red.ppm");
        let mut bytes = b"P6\n8 6\n255\n".to_vec();
        bytes.extend([255u8, 0, 0].repeat(48));
        fs::write(&img, bytes).unwrap();
        let out = dir.path().join("r.csv");
        assert_eq!(exit(&["reward", "--image", path(&img), "--grid", "4x3", "--out", path(&out)]).0, 0);
        let text = fs::read_to_string(&out).unwrap();
        let rewards: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
        assert_eq!(rewards, vec!["1"; 12]);
        assert_eq!(exit(&["reward", "--image", path(&img), "--zoom", "0.5"]).0, 3);
    }
}
