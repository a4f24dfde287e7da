use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::thread;
use std::time::Duration;

use marl_core::config::ExperimentConfig;
use marl_core::mdp::Action;
use marl_core::net::{self, Client, ClientError, LogOp, Response, ServerConfig, ServerHandle};
use marl_core::qlearning::{DecaySchedule, Experience, LearnParams};
use marl_core::seed::derive_seed;
use marl_core::{Engine, Strategy};
use proptest::prelude::*;

const TIMEOUT: Duration = Duration::from_secs(10);

fn start(params: LearnParams, expect: Option<usize>) -> ServerHandle {
    net::serve(
        "127.0.0.1:0",
        ServerConfig {
            num_states: 16,
            params,
            strategy: Strategy::Boltzmann,
            run_seed: 7,
            expect_agents: expect,
        },
    )
    .unwrap()
}

fn fixed_alpha(alpha: f64, gamma: f64) -> LearnParams {
    LearnParams {
        gamma,
        alpha: DecaySchedule::constant(alpha).unwrap(),
        temperature: DecaySchedule::constant(1.0).unwrap(),
    }
}

fn connect(server: &ServerHandle) -> Client {
    Client::connect(server.local_addr(), TIMEOUT).unwrap()
}

#[test]
fn zero_table_update_and_row_echo() {
    let server = start(fixed_alpha(0.9, 0.9), None);
    let mut c = connect(&server);
    assert_eq!(c.hello().unwrap(), 0);
    let exp = Experience {
        state: 2,
        action: Action::Right,
        reward: 1.0,
        next_state: 3,
    };
    assert_eq!(c.send_line("UPDATE 2 RIGHT 1 3").unwrap(), Response::Q(0.9));
    assert_eq!(c.get_q(2).unwrap(), [0.0, 0.9, 0.0, 0.0]);
    // Second update: 0.9 + 0.9 * (1 + 0.9 * 0 - 0.9).
    let v = c.update(&exp).unwrap();
    assert_eq!(v, 0.99);
    c.bye().unwrap();
    let report = server.shutdown();
    assert_eq!(report.log.len(), 2);
    assert_eq!(report.agents_registered, 1);
}

#[test]
fn errors_carry_codes_and_keep_the_connection() {
    let server = start(LearnParams::default(), None);
    let mut c = connect(&server);
    let code = |r: Response| match r {
        Response::Err { code, .. } => code,
        other => panic!("expected ERR, got {other}"),
    };
    assert_eq!(code(c.send_line("DIRECT 3").unwrap()), 3);
    assert_eq!(code(c.send_line("UPDATE 1 LEFT 0 0").unwrap()), 3);
    assert_eq!(code(c.send_line("FROB").unwrap()), 1);
    assert_eq!(code(c.send_line("GETQ x").unwrap()), 1);
    assert_eq!(code(c.send_line("GETQ 16").unwrap()), 2);
    assert_eq!(code(c.send_line(&"A".repeat(10_000)).unwrap()), 1);
    c.hello().unwrap();
    assert_eq!(code(c.send_line("HELLO").unwrap()), 3);
    assert_eq!(code(c.send_line("UPDATE 1 LEFT 0 99").unwrap()), 2);
    assert_eq!(code(c.send_line("UPDATE 1 LEFT NaN 2").unwrap()), 2);
    assert!(matches!(c.direct(99), Err(ClientError::Server { code: 2, .. })));
    assert!(matches!(c.send_line("DIRECT 13").unwrap(), Response::Act(_)));
    assert!(server.snapshot().log.is_empty());
}

#[test]
fn non_utf8_request_is_a_parse_error() {
    let server = start(LearnParams::default(), None);
    let mut s = TcpStream::connect(server.local_addr()).unwrap();
    s.write_all(b"GETQ \xff\xfe\nGETQ 0\n").unwrap();
    let mut r = BufReader::new(s);
    let mut line = String::new();
    r.read_line(&mut line).unwrap();
    assert!(line.starts_with("ERR 1"), "{line}");
    line.clear();
    r.read_line(&mut line).unwrap();
    assert_eq!(line, "OK QROW 0 0 0 0\n");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn garbage_lines_never_crash_the_server(lines in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..80), 1..8)) {
        let server = start(LearnParams::default(), None);
        let mut s = TcpStream::connect(server.local_addr()).unwrap();
        s.set_read_timeout(Some(TIMEOUT)).unwrap();
        let mut r = BufReader::new(s.try_clone().unwrap());
        for bytes in &lines {
            let bytes: Vec<u8> = bytes.iter().copied().filter(|b| *b != b'\n').collect();
            s.write_all(&bytes).unwrap();
            s.write_all(b"\n").unwrap();
            let mut reply = String::new();
            r.read_line(&mut reply).unwrap();
            prop_assert!(reply.starts_with("OK") || reply.starts_with("ERR "), "{:?}", reply);
        }
        // Still serving.
        let mut c = connect(&server);
        prop_assert_eq!(c.get_q(0).unwrap(), [0.0; 4]);
    }
}

#[test]
fn interleaved_updates_are_never_lost() {
    const PER_CLIENT: usize = 5_000;
    let server = start(fixed_alpha(0.3, 0.0), None);
    let addr = server.local_addr();
    let workers: Vec<_> = [1.0, 2.0]
        .into_iter()
        .map(|reward| {
            thread::spawn(move || {
                let mut c = Client::connect(addr, TIMEOUT).unwrap();
                c.hello().unwrap();
                for _ in 0..PER_CLIENT {
                    c.update(&Experience {
                        state: 0,
                        action: Action::Left,
                        reward,
                        next_state: 1,
                    })
                    .unwrap();
                }
                c.bye().unwrap();
            })
        })
        .collect();
    for w in workers {
        w.join().unwrap();
    }
    let report = server.shutdown();
    assert_eq!(report.log.len(), 2 * PER_CLIENT);
    // Independent fold over the arrival order: q <- q + 0.3 (r - q).
    let mut q = 0.0;
    for e in &report.log {
        let LogOp::Update { experience, new_q, .. } = e.op else { panic!() };
        q += 0.3 * (experience.reward - q);
        assert_eq!(new_q, q);
    }
    assert_eq!(report.qtable.get(0, Action::Left), q);
    let by_agent = |a: usize| {
        report
            .log
            .iter()
            .filter(|e| matches!(e.op, LogOp::Update { agent, .. } if agent == a))
            .count()
    };
    assert_eq!((by_agent(0), by_agent(1)), (PER_CLIENT, PER_CLIENT));
    let seqs: Vec<u64> = report.log.iter().map(|e| e.seq).collect();
    assert!(seqs.iter().enumerate().all(|(i, s)| *s == i as u64));
}

#[test]
fn single_networked_agent_matches_in_process_run() {
    let mut cfg = ExperimentConfig::default();
    cfg.set_agents(1);
    let run_seed = derive_seed(cfg.seed, 0, 0);
    let server = net::serve(
        "127.0.0.1:0",
        ServerConfig {
            num_states: 16,
            params: cfg.params,
            strategy: cfg.strategy,
            run_seed,
            expect_agents: Some(1),
        },
    )
    .unwrap();
    let ec = cfg.engine_config(run_seed, cfg.total_steps);
    let start = ec.starts[0];
    let run = net::run_agent(connect(&server), cfg.grid, &ec.schedule, |_| start, cfg.total_steps).unwrap();
    let report = server.wait();

    let mut engine = Engine::new(ec).unwrap();
    let metrics = engine.run(cfg.total_steps).unwrap();
    assert_eq!(&report.qtable, engine.qtable());
    assert_eq!(run.metrics, metrics);
    assert_eq!(net::replay(&report.log, 16, &cfg.params).unwrap(), report.qtable);
}

#[test]
fn concurrent_agents_match_log_replay() {
    let cfg = ExperimentConfig::default();
    let server = net::serve(
        "127.0.0.1:0",
        ServerConfig {
            num_states: 16,
            params: cfg.params,
            strategy: cfg.strategy,
            run_seed: 11,
            expect_agents: Some(4),
        },
    )
    .unwrap();
    let addr = server.local_addr();
    let schedule = cfg.schedule_for(11, 200);
    let agents: Vec<_> = (0..4)
        .map(|_| {
            let schedule = schedule.clone();
            let grid = cfg.grid;
            thread::spawn(move || {
                let c = Client::connect(addr, TIMEOUT).unwrap();
                net::run_agent(c, grid, &schedule, |_| grid.cell(13).unwrap(), 200).unwrap()
            })
        })
        .collect();
    let mut ids: Vec<usize> = agents.into_iter().map(|h| h.join().unwrap().agent_id).collect();
    let report = server.wait();
    ids.sort();
    assert_eq!(ids, vec![0, 1, 2, 3]);
    assert_eq!(report.log.len(), 800);
    assert_eq!(net::replay(&report.log, 16, &cfg.params).unwrap(), report.qtable);
    // The clock advances once per four updates.
    let clocks: Vec<f64> = report
        .log
        .iter()
        .map(|e| match e.op {
            LogOp::Update { clock, .. } => clock,
            LogOp::Reset => unreachable!(),
        })
        .collect();
    assert_eq!(clocks.last(), Some(&199.0));
}

#[test]
fn reset_clears_table_and_restarts_clock() {
    let server = start(LearnParams::default(), None);
    let mut c = connect(&server);
    c.hello().unwrap();
    let exp = Experience {
        state: 5,
        action: Action::Up,
        reward: 1.0,
        next_state: 1,
    };
    for _ in 0..10 {
        c.update(&exp).unwrap();
    }
    c.reset().unwrap();
    assert_eq!(c.get_q(5).unwrap(), [0.0; 4]);
    assert_eq!(c.update(&exp).unwrap(), 0.9);
    let report = server.shutdown();
    assert_eq!(report.log[10].op, LogOp::Reset);
    let LogOp::Update { clock, .. } = report.log[11].op else { panic!() };
    assert_eq!(clock, 0.0);
    assert_eq!(net::replay(&report.log, 16, &LearnParams::default()).unwrap(), report.qtable);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("wal.csv");
    net::write_wal_csv(std::fs::File::create(&path).unwrap(), &report.log).unwrap();
    assert_eq!(net::read_wal_csv(&path).unwrap(), report.log);
}

#[test]
fn client_errors_are_distinct() {
    let closed = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = closed.local_addr().unwrap();
    drop(closed);
    assert!(matches!(Client::connect(addr, TIMEOUT), Err(ClientError::Connect(_))));

    let silent = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = silent.local_addr().unwrap();
    let keep = thread::spawn(move || {
        let (s, _) = silent.accept().unwrap();
        thread::sleep(Duration::from_millis(800));
        drop(s);
    });
    let mut c = Client::connect(addr, Duration::from_millis(200)).unwrap();
    assert!(matches!(c.get_q(0), Err(ClientError::Timeout)));
    keep.join().unwrap();

    let closer = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = closer.local_addr().unwrap();
    let t = thread::spawn(move || {
        let (s, _) = closer.accept().unwrap();
        let mut line = String::new();
        BufReader::new(&s).read_line(&mut line).unwrap();
    });
    let mut c = Client::connect(addr, TIMEOUT).unwrap();
    let err = c.hello().unwrap_err();
    assert!(matches!(err, ClientError::ConnectionReset), "{err:?}");
    t.join().unwrap();

    let liar = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = liar.local_addr().unwrap();
    let t = thread::spawn(move || {
        let (mut s, _) = liar.accept().unwrap();
        let mut line = String::new();
        BufReader::new(&s).read_line(&mut line).unwrap();
        s.write_all(b"OK Q 1\n").unwrap();
    });
    let mut c = Client::connect(addr, TIMEOUT).unwrap();
    assert!(matches!(c.hello(), Err(ClientError::Protocol(_))));
    t.join().unwrap();
}

#[test]
fn direct_follows_boltzmann_distribution() {
    // Constant T = 1 and a row of (1, 0, 0, 0): P(LEFT) = e / (e + 3).
    let server = start(fixed_alpha(1.0, 0.0), None);
    let mut c = connect(&server);
    c.hello().unwrap();
    c.update(&Experience {
        state: 4,
        action: Action::Left,
        reward: 1.0,
        next_state: 4,
    })
    .unwrap();
    let n = 4000;
    let left = (0..n).filter(|_| c.direct(4).unwrap() == Action::Left).count() as f64;
    let p = std::f64::consts::E / (std::f64::consts::E + 3.0);
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    assert!((left - n as f64 * p).abs() < 4.0 * sigma, "{left}");
}
