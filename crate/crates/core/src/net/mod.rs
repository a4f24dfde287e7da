//! The shared table over TCP: a line protocol, a server owning the table and
//! schedule clocks, a blocking client, and an agent loop driving a scenario
//! through the client.
//!
//! Requests and responses are single lines of space-separated fields:
//!
//! | request                    | response                     |
//! |----------------------------|------------------------------|
//! | `HELLO`                    | `OK AGENT <id>`              |
//! | `GETQ <s>`                 | `OK QROW <q0> <q1> <q2> <q3>`|
//! | `DIRECT <s>`               | `OK ACT <LEFT\|RIGHT\|UP\|DOWN>`|
//! | `UPDATE <s> <a> <r> <s'>`  | `OK Q <new value>`           |
//! | `RESET`                    | `OK`                         |
//! | `BYE`                      | `OK`                         |
//!
//! Failures answer `ERR <code> <reason>` and keep the connection open.

mod agent;
mod client;
mod server;

use std::fmt;

pub use agent::{run_agent, AgentError, AgentRun};
pub use client::{Client, ClientError};
pub use server::{read_wal_csv, replay, serve, write_wal_csv, LogEntry, LogOp, ServerConfig, ServerHandle, ServerReport};

use crate::mdp::Action;
use crate::qlearning::QRow;

/// Longest accepted request line, in bytes.
pub const MAX_LINE: usize = 4096;

/// Error codes carried by `ERR` responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCode {
    /// Unknown verb, wrong arity, or unparsable field.
    Parse = 1,
    /// Well-formed but out-of-range value.
    Range = 2,
    /// Request not valid in the session's current state.
    State = 3,
}

impl ErrorCode {
    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            1 => Some(ErrorCode::Parse),
            2 => Some(ErrorCode::Range),
            3 => Some(ErrorCode::State),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolError {
    pub code: ErrorCode,
    pub message: String,
}

impl ProtocolError {
    fn parse(message: impl Into<String>) -> Self {
        Self {
            code: ErrorCode::Parse,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Request {
    Hello,
    GetQ(usize),
    Direct(usize),
    Update {
        state: usize,
        action: Action,
        reward: f64,
        next_state: usize,
    },
    Reset,
    Bye,
}

impl Request {
    pub fn parse(line: &str) -> Result<Self, ProtocolError> {
        let fields: Vec<&str> = line.split_ascii_whitespace().collect();
        let Some((&verb, args)) = fields.split_first() else {
            return Err(ProtocolError::parse("empty request"));
        };
        let arity = |n: usize| {
            if args.len() == n {
                Ok(())
            } else {
                Err(ProtocolError::parse(format!("{verb} takes {n} argument(s), got {}", args.len())))
            }
        };
        let index = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| ProtocolError::parse(format!("bad state index `{s}`")))
        };
        Ok(match verb {
            "HELLO" => {
                arity(0)?;
                Request::Hello
            }
            "GETQ" => {
                arity(1)?;
                Request::GetQ(index(args[0])?)
            }
            "DIRECT" => {
                arity(1)?;
                Request::Direct(index(args[0])?)
            }
            "UPDATE" => {
                arity(4)?;
                let action = Action::from_name(args[1])
                    .ok_or_else(|| ProtocolError::parse(format!("bad action `{}`", args[1])))?;
                let reward = args[2]
                    .parse::<f64>()
                    .map_err(|_| ProtocolError::parse(format!("bad reward `{}`", args[2])))?;
                Request::Update {
                    state: index(args[0])?,
                    action,
                    reward,
                    next_state: index(args[3])?,
                }
            }
            "RESET" => {
                arity(0)?;
                Request::Reset
            }
            "BYE" => {
                arity(0)?;
                Request::Bye
            }
            other => return Err(ProtocolError::parse(format!("unknown verb `{}`", truncate(other)))),
        })
    }
}

impl fmt::Display for Request {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Request::Hello => f.write_str("HELLO"),
            Request::GetQ(s) => write!(f, "GETQ {s}"),
            Request::Direct(s) => write!(f, "DIRECT {s}"),
            Request::Update {
                state,
                action,
                reward,
                next_state,
            } => write!(f, "UPDATE {state} {} {} {next_state}", action.name(), format_real(*reward)),
            Request::Reset => f.write_str("RESET"),
            Request::Bye => f.write_str("BYE"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Agent(usize),
    QRow(QRow),
    Act(Action),
    Q(f64),
    Ok,
    Err { code: u32, message: String },
}

impl Response {
    pub fn error(e: &ProtocolError) -> Self {
        Response::Err {
            code: e.code as u32,
            message: e.message.clone(),
        }
    }

    pub fn parse(line: &str) -> Result<Self, String> {
        let mut fields = line.split_ascii_whitespace();
        let bad = || format!("malformed response `{}`", truncate(line));
        match fields.next() {
            Some("OK") => {}
            Some("ERR") => {
                let code = fields.next().and_then(|c| c.parse().ok()).ok_or_else(bad)?;
                return Ok(Response::Err {
                    code,
                    message: fields.collect::<Vec<_>>().join(" "),
                });
            }
            _ => return Err(bad()),
        }
        let rest: Vec<&str> = fields.collect();
        let real = |s: &str| s.parse::<f64>().map_err(|_| bad());
        match rest.as_slice() {
            [] => Ok(Response::Ok),
            ["AGENT", id] => id.parse().map(Response::Agent).map_err(|_| bad()),
            ["QROW", a, b, c, d] => Ok(Response::QRow([real(a)?, real(b)?, real(c)?, real(d)?])),
            ["ACT", name] => Action::from_name(name).map(Response::Act).ok_or_else(bad),
            ["Q", v] => Ok(Response::Q(real(v)?)),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for Response {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Response::Agent(id) => write!(f, "OK AGENT {id}"),
            Response::QRow(row) => {
                f.write_str("OK QROW")?;
                for q in row {
                    write!(f, " {}", format_real(*q))?;
                }
                Ok(())
            }
            Response::Act(a) => write!(f, "OK ACT {}", a.name()),
            Response::Q(v) => write!(f, "OK Q {}", format_real(*v)),
            Response::Ok => f.write_str("OK"),
            Response::Err { code, message } => write!(f, "ERR {code} {message}"),
        }
    }
}

/// Shortest decimal rendering of `v` rounded to 12 significant digits.
pub fn format_real(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    let rounded: f64 = format!("{v:.11e}").parse().expect("formatted float parses");
    rounded.to_string()
}

fn truncate(s: &str) -> &str {
    match s.char_indices().nth(40) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}
