#![allow(clippy::field_reassign_with_default)]

use marl_core::config::{parse_config, ExperimentConfig, FireSpec, SweepAxis, SweepParam};
use marl_core::engine::{PeriodMode, PeriodPolicy};
use marl_core::harness;
use marl_core::metrics::fire_time_fraction;
use marl_core::engine::Strategy as ActionStrategy;
use marl_core::Engine;
use proptest::prelude::*;

#[test]
fn results_do_not_depend_on_thread_count() {
    let mut cfg = ExperimentConfig::default();
    cfg.replications = 6;
    cfg.sweep = Some(SweepAxis {
        param: SweepParam::TempHalf,
        values: vec![25.0, 100.0],
    });
    let on = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| harness::run_sweep(&cfg).unwrap())
    };
    assert_eq!(on(1), on(4));
}

#[test]
fn horizon_points_are_prefixes_of_one_run() {
    let mut cfg = ExperimentConfig::default();
    cfg.replications = 3;
    cfg.sweep = Some(SweepAxis {
        param: SweepParam::Steps,
        values: vec![60.0, 120.0],
    });
    let sweep = harness::run_sweep(&cfg).unwrap();
    // The 60-step mean must equal the first 60 ticks of 120-step runs.
    let mut prefix = Vec::new();
    for r in 0..3 {
        let seed = marl_core::seed::derive_seed(cfg.seed, 0, r);
        let mut engine = Engine::new(cfg.engine_config(seed, 120)).unwrap();
        prefix.push(fire_time_fraction(&engine.run(60).unwrap()).unwrap());
    }
    let mean = prefix.iter().sum::<f64>() / 3.0;
    assert!((sweep.rows[0].summary.fire_fraction.mean - mean).abs() < 1e-15);
}

#[test]
fn carry_forward_keeps_learning_across_a_static_fire() {
    // Without relocation, keeping the table should beat wiping it.
    let mut cfg = ExperimentConfig::default();
    cfg.total_steps = 360;
    cfg.replications = 20;
    let mut period = |mode| {
        cfg.period = Some(PeriodPolicy::new(180, mode).unwrap());
        harness::run_adaptation(&cfg).unwrap().periods[1].fire_fraction.mean
    };
    let carry = period(PeriodMode::CarryForward);
    let reset = period(PeriodMode::Reset);
    assert!(carry > reset, "carry {carry} reset {reset}");
}

#[test]
fn greedy_strategy_runs_from_config() {
    let cfg = parse_config("[run]\nstrategy = greedy\nreplications = 2\nsteps = 30\n", None).unwrap();
    assert_eq!(cfg.strategy, ActionStrategy::Greedy);
    let out = harness::run_experiment(&cfg).unwrap();
    // All-zero table and lowest-index ties: everyone walks left and stays.
    assert_eq!(out.summary.fire_fraction.mean, 0.0);
    assert_eq!(out.runs[0].metrics.visit_counts[12], 10 * 30);
}

fn arb_config() -> impl Strategy<Value = ExperimentConfig> {
    (
        1u32..6,
        1u32..6,
        1usize..5,
        1u64..500,
        0.0f64..0.99,
        1.0f64..200.0,
        prop::option::of((1u64..200, any::<bool>())),
        any::<u64>(),
    )
        .prop_map(|(w, h, agents, steps, gamma, half, period, seed)| {
            let text = format!(
                "[grid]\nwidth = {w}\nheight = {h}\n[fire]\nstates = {}\nreward = 0.5\n[agents]\ncount = {agents}\nstart = 0\n\
                 [run]\nsteps = {steps}\nseed = {seed}\n[learning]\ngamma = {gamma}\ntemp_half = {half}\n{}",
                w * h - 1,
                period
                    .map(|(len, carry)| format!("[period]\nlength = {len}\nmode = {}\n", if carry { "carry" } else { "reset" }))
                    .unwrap_or_default()
            );
            parse_config(&text, None).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn resolved_config_round_trips(cfg in arb_config()) {
        prop_assert_eq!(parse_config(&cfg.to_text(), None).unwrap(), cfg);
    }

    #[test]
    fn relocated_fire_always_moves(seed in any::<u64>(), every in 1u64..50) {
        let cfg = parse_config(&format!("[fire]\nrelocate = random\nblock = 2x2\nevery = {every}\n"), None).unwrap();
        let FireSpec::Relocating { .. } = cfg.fire else { panic!() };
        let sched = cfg.schedule_for(seed, 400);
        for pair in sched.segments().windows(2) {
            prop_assert_ne!(&pair[0].1, &pair[1].1);
            prop_assert_eq!(pair[1].0 - pair[0].0, every);
        }
    }
}
