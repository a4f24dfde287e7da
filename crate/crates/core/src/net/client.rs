//! Blocking client for the table server.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use thiserror::Error;

use crate::mdp::Action;
use crate::qlearning::{Experience, QRow};

use super::{Request, Response, MAX_LINE};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot connect: {0}")]
    Connect(io::Error),
    #[error("request timed out")]
    Timeout,
    #[error("connection closed by server")]
    ConnectionReset,
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("server error {code}: {message}")]
    Server { code: u32, message: String },
    #[error("i/o error: {0}")]
    Io(io::Error),
}

impl From<io::Error> for ClientError {
    fn from(e: io::Error) -> Self {
        use io::ErrorKind::*;
        match e.kind() {
            WouldBlock | TimedOut => ClientError::Timeout,
            ConnectionReset | ConnectionAborted | BrokenPipe | UnexpectedEof => ClientError::ConnectionReset,
            _ => ClientError::Io(e),
        }
    }
}

pub struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Client {
    /// Connects with `timeout` applying to the connect and to every request.
    pub fn connect(addr: impl ToSocketAddrs, timeout: Duration) -> Result<Self, ClientError> {
        let mut last = io::Error::new(io::ErrorKind::InvalidInput, "address resolved to nothing");
        for a in addr.to_socket_addrs().map_err(ClientError::Connect)? {
            match TcpStream::connect_timeout(&a, timeout) {
                Ok(stream) => {
                    stream.set_read_timeout(Some(timeout))?;
                    stream.set_write_timeout(Some(timeout))?;
                    stream.set_nodelay(true)?;
                    return Ok(Self {
                        writer: stream.try_clone()?,
                        reader: BufReader::new(stream),
                    });
                }
                Err(e) => last = e,
            }
        }
        Err(ClientError::Connect(last))
    }

    /// Sends one raw line and reads one response. `ERR` responses are
    /// returned as values, not errors.
    pub fn send_line(&mut self, line: &str) -> Result<Response, ClientError> {
        writeln!(self.writer, "{line}")?;
        self.writer.flush()?;
        let mut buf = String::new();
        let n = (&mut self.reader).take(MAX_LINE as u64).read_line(&mut buf)?;
        if n == 0 {
            return Err(ClientError::ConnectionReset);
        }
        if !buf.ends_with('\n') {
            return Err(ClientError::Protocol("unterminated or oversized response".into()));
        }
        Response::parse(buf.trim_end()).map_err(ClientError::Protocol)
    }

    fn request(&mut self, req: Request) -> Result<Response, ClientError> {
        match self.send_line(&req.to_string())? {
            Response::Err { code, message } => Err(ClientError::Server { code, message }),
            other => Ok(other),
        }
    }

    fn unexpected(req: Request, resp: Response) -> ClientError {
        ClientError::Protocol(format!("unexpected response `{resp}` to `{req}`"))
    }

    pub fn hello(&mut self) -> Result<usize, ClientError> {
        match self.request(Request::Hello)? {
            Response::Agent(id) => Ok(id),
            r => Err(Self::unexpected(Request::Hello, r)),
        }
    }

    pub fn get_q(&mut self, state: usize) -> Result<QRow, ClientError> {
        match self.request(Request::GetQ(state))? {
            Response::QRow(row) => Ok(row),
            r => Err(Self::unexpected(Request::GetQ(state), r)),
        }
    }

    pub fn direct(&mut self, state: usize) -> Result<Action, ClientError> {
        match self.request(Request::Direct(state))? {
            Response::Act(a) => Ok(a),
            r => Err(Self::unexpected(Request::Direct(state), r)),
        }
    }

    /// Submits an experience; returns the updated value as reported on the
    /// wire (12 significant digits).
    pub fn update(&mut self, exp: &Experience) -> Result<f64, ClientError> {
        let req = Request::Update {
            state: exp.state,
            action: exp.action,
            reward: exp.reward,
            next_state: exp.next_state,
        };
        match self.request(req)? {
            Response::Q(v) => Ok(v),
            r => Err(Self::unexpected(req, r)),
        }
    }

    pub fn reset(&mut self) -> Result<(), ClientError> {
        self.expect_ok(Request::Reset)
    }

    pub fn bye(mut self) -> Result<(), ClientError> {
        self.expect_ok(Request::Bye)
    }

    fn expect_ok(&mut self, req: Request) -> Result<(), ClientError> {
        match self.request(req)? {
            Response::Ok => Ok(()),
            r => Err(Self::unexpected(req, r)),
        }
    }
}
