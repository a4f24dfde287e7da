//! Table server: one thread per connection, one mutex around all state.
//!
//! Each request runs entirely under the lock, so updates are applied
//! atomically in arrival order and reads never see a half-applied update.
//! Every update and reset is appended to an in-memory log that can be
//! replayed to rebuild the final table.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};

use crate::engine::Strategy;
use crate::mdp::Action;
use crate::qlearning::{Experience, LearnParams, QError, QTable};
use crate::seed::{self, StreamRng};

use super::{ErrorCode, ProtocolError, Request, Response, MAX_LINE};

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub num_states: usize,
    pub params: LearnParams,
    pub strategy: Strategy,
    /// Seeds the per-agent action streams exactly as an in-process run with
    /// this run seed would.
    pub run_seed: u64,
    /// Finish once this many registered agents have left (BYE or disconnect).
    pub expect_agents: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LogOp {
    Update {
        agent: usize,
        experience: Experience,
        /// Schedule clock the update was applied at.
        clock: f64,
        alpha: f64,
        new_q: f64,
    },
    Reset,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub seq: u64,
    pub op: LogOp,
}

/// Final table and arrival-order log.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerReport {
    pub qtable: QTable,
    pub log: Vec<LogEntry>,
    pub agents_registered: usize,
}

struct State {
    config: ServerConfig,
    qtable: QTable,
    rngs: Vec<StreamRng>,
    updates: u64,
    step: u64,
    clock_origin: u64,
    log: Vec<LogEntry>,
    departed: usize,
}

impl State {
    /// Global step: updates per registered agent, never moving backwards
    /// when a late agent registers.
    fn advance_step(&mut self) {
        if !self.rngs.is_empty() {
            self.step = self.step.max(self.updates / self.rngs.len() as u64);
        }
    }

    fn clock(&self) -> f64 {
        (self.step - self.clock_origin) as f64
    }

    fn check_state(&self, s: usize) -> Result<(), ProtocolError> {
        if s < self.config.num_states {
            Ok(())
        } else {
            Err(ProtocolError {
                code: ErrorCode::Range,
                message: format!("state out of range: {s}"),
            })
        }
    }

    fn handle(&mut self, req: Request, session: &mut Option<usize>) -> Result<Response, ProtocolError> {
        let need_agent = |session: &Option<usize>| {
            session.ok_or_else(|| ProtocolError {
                code: ErrorCode::State,
                message: "HELLO required first".into(),
            })
        };
        match req {
            Request::Hello => {
                if session.is_some() {
                    return Err(ProtocolError {
                        code: ErrorCode::State,
                        message: "already registered".into(),
                    });
                }
                let id = self.rngs.len();
                self.rngs.push(seed::agent_rng(self.config.run_seed, id));
                *session = Some(id);
                Ok(Response::Agent(id))
            }
            Request::GetQ(s) => {
                self.check_state(s)?;
                Ok(Response::QRow(*self.qtable.row(s).expect("checked")))
            }
            Request::Direct(s) => {
                let agent = need_agent(session)?;
                self.check_state(s)?;
                let exploration = self.config.params.temperature.value(self.clock());
                let row = *self.qtable.row(s).expect("checked");
                let action = self
                    .config
                    .strategy
                    .choose(&row, exploration, &mut self.rngs[agent])
                    .map_err(range_error)?;
                Ok(Response::Act(action))
            }
            Request::Update {
                state,
                action,
                reward,
                next_state,
            } => {
                let agent = need_agent(session)?;
                self.check_state(state)?;
                self.check_state(next_state)?;
                let experience = Experience {
                    state,
                    action,
                    reward,
                    next_state,
                };
                let clock = self.clock();
                let alpha = self.config.params.alpha.value(clock);
                let new_q = self
                    .qtable
                    .update(&experience, alpha, self.config.params.gamma)
                    .map_err(range_error)?;
                self.updates += 1;
                self.advance_step();
                let seq = self.log.len() as u64;
                self.log.push(LogEntry {
                    seq,
                    op: LogOp::Update {
                        agent,
                        experience,
                        clock,
                        alpha,
                        new_q,
                    },
                });
                Ok(Response::Q(new_q))
            }
            Request::Reset => {
                self.qtable.reset();
                self.clock_origin = self.step;
                let seq = self.log.len() as u64;
                self.log.push(LogEntry { seq, op: LogOp::Reset });
                Ok(Response::Ok)
            }
            Request::Bye => Ok(Response::Ok),
        }
    }

    fn report(&self) -> ServerReport {
        ServerReport {
            qtable: self.qtable.clone(),
            log: self.log.clone(),
            agents_registered: self.rngs.len(),
        }
    }
}

fn range_error(e: QError) -> ProtocolError {
    ProtocolError {
        code: ErrorCode::Range,
        message: e.to_string(),
    }
}

struct Shared {
    state: Mutex<State>,
    finished: Condvar,
    stop: AtomicBool,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, State> {
        // A panicking connection thread cannot leave the table half-updated:
        // every mutation completes before the response is formatted.
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn is_done(&self, state: &State) -> bool {
        self.stop.load(Ordering::SeqCst) || state.config.expect_agents.is_some_and(|n| state.departed >= n)
    }
}

/// A running server.
pub struct ServerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    acceptor: Option<JoinHandle<()>>,
}

/// Binds `addr` and starts accepting connections.
pub fn serve(addr: impl ToSocketAddrs, config: ServerConfig) -> io::Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    let addr = listener.local_addr()?;
    let shared = Arc::new(Shared {
        state: Mutex::new(State {
            qtable: QTable::new(config.num_states),
            config,
            rngs: Vec::new(),
            updates: 0,
            step: 0,
            clock_origin: 0,
            log: Vec::new(),
            departed: 0,
        }),
        finished: Condvar::new(),
        stop: AtomicBool::new(false),
    });
    let acceptor = {
        let shared = Arc::clone(&shared);
        thread::spawn(move || accept_loop(listener, shared))
    };
    Ok(ServerHandle {
        addr,
        shared,
        acceptor: Some(acceptor),
    })
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    for stream in listener.incoming() {
        if shared.stop.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = stream else { continue };
        let shared = Arc::clone(&shared);
        thread::spawn(move || {
            let _ = handle_connection(stream, &shared);
        });
    }
}

fn handle_connection(stream: TcpStream, shared: &Shared) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let mut session = None;
    let mut buf = Vec::new();
    let result = loop {
        buf.clear();
        let n = (&mut reader).take(MAX_LINE as u64 + 1).read_until(b'\n', &mut buf)?;
        if n == 0 {
            break Ok(());
        }
        let mut leaving = false;
        let response = if buf.last() != Some(&b'\n') && n > MAX_LINE {
            // Drain the rest of the oversized line before answering.
            let mut sink = Vec::new();
            reader.read_until(b'\n', &mut sink)?;
            Response::error(&ProtocolError::parse("line too long"))
        } else {
            match std::str::from_utf8(&buf) {
                Err(_) => Response::error(&ProtocolError::parse("request is not UTF-8")),
                Ok(line) => match Request::parse(line) {
                    Err(e) => Response::error(&e),
                    Ok(req) => {
                        leaving = req == Request::Bye && session.is_some();
                        shared
                            .lock()
                            .handle(req, &mut session)
                            .unwrap_or_else(|e| Response::error(&e))
                    }
                },
            }
        };
        if let Err(e) = writeln!(writer, "{response}").and_then(|_| writer.flush()) {
            break Err(e);
        }
        // Count the departure only once the reply is out, so a server that
        // exits on the last departure never cuts off that reply.
        if leaving {
            session = None;
            shared.lock().departed += 1;
            shared.finished.notify_all();
        }
    };
    if session.is_some() {
        shared.lock().departed += 1;
        shared.finished.notify_all();
    }
    result
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Current table and log without stopping the server.
    pub fn snapshot(&self) -> ServerReport {
        self.shared.lock().report()
    }

    /// Blocks until the expected number of agents has left (forever if no
    /// count was configured), then stops accepting connections.
    pub fn wait(mut self) -> ServerReport {
        {
            let mut state = self.shared.lock();
            while !self.shared.is_done(&state) {
                state = self.shared.finished.wait(state).unwrap_or_else(|e| e.into_inner());
            }
        }
        self.stop_acceptor();
        self.shared.lock().report()
    }

    pub fn shutdown(mut self) -> ServerReport {
        self.stop_acceptor();
        self.shared.lock().report()
    }

    fn stop_acceptor(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        self.shared.finished.notify_all();
        if let Some(handle) = self.acceptor.take() {
            // Wake the blocking accept so the loop sees the stop flag.
            let _ = TcpStream::connect(self.addr);
            let _ = handle.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_acceptor();
    }
}

/// Rebuilds the table from a log by re-applying every update, with the
/// learning rate recomputed from the logged clock.
pub fn replay(log: &[LogEntry], num_states: usize, params: &LearnParams) -> Result<QTable, QError> {
    let mut q = QTable::new(num_states);
    for entry in log {
        match entry.op {
            LogOp::Update { experience, clock, .. } => {
                q.update(&experience, params.alpha.value(clock), params.gamma)?;
            }
            LogOp::Reset => q.reset(),
        }
    }
    Ok(q)
}

pub const WAL_CSV_HEADER: [&str; 10] = [
    "seq",
    "op",
    "agent",
    "state",
    "action",
    "reward",
    "next_state",
    "clock",
    "alpha",
    "new_q",
];

/// Writes the log with full-precision floats.
pub fn write_wal_csv<W: Write>(writer: W, log: &[LogEntry]) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(WAL_CSV_HEADER)?;
    for e in log {
        let mut rec = vec![e.seq.to_string()];
        match e.op {
            LogOp::Update {
                agent,
                experience: x,
                clock,
                alpha,
                new_q,
            } => rec.extend([
                "UPDATE".to_string(),
                agent.to_string(),
                x.state.to_string(),
                x.action.name().to_string(),
                x.reward.to_string(),
                x.next_state.to_string(),
                clock.to_string(),
                alpha.to_string(),
                new_q.to_string(),
            ]),
            LogOp::Reset => {
                rec.push("RESET".to_string());
                rec.extend(std::iter::repeat_n(String::new(), 8));
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()
}

pub fn read_wal_csv(path: &Path) -> Result<Vec<LogEntry>, String> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    let mut log = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| e.to_string())?;
        let line = i + 2;
        let get = |k: usize| rec.get(k).unwrap_or("");
        let num = |k: usize| -> Result<f64, String> {
            get(k).parse().map_err(|_| format!("line {line}: bad {}", WAL_CSV_HEADER[k]))
        };
        let int = |k: usize| -> Result<usize, String> {
            get(k).parse().map_err(|_| format!("line {line}: bad {}", WAL_CSV_HEADER[k]))
        };
        let seq = int(0)? as u64;
        let op = match get(1) {
            "RESET" => LogOp::Reset,
            "UPDATE" => LogOp::Update {
                agent: int(2)?,
                experience: Experience {
                    state: int(3)?,
                    action: Action::from_name(get(4)).ok_or(format!("line {line}: bad action"))?,
                    reward: num(5)?,
                    next_state: int(6)?,
                },
                clock: num(7)?,
                alpha: num(8)?,
                new_q: num(9)?,
            },
            other => return Err(format!("line {line}: unknown op `{other}`")),
        };
        log.push(LogEntry { seq, op });
    }
    Ok(log)
}
