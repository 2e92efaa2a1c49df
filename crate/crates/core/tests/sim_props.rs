mod common;

use datadock_core::broker::{DepBonusMode, SelectionPolicy};
use datadock_core::exec::{ExecBackend, HookContext, StatusCode};
use datadock_core::orchestrator::TaskState;
use datadock_core::registry::write_hook;
use datadock_core::sim::{build_and_run, decides_failure, ResourceSpec, ScenarioSpec, SimBackend, SimProfile, Workload};
use datadock_core::{digest, TaskId};
use proptest::prelude::*;

use common::{World, BLOB};

fn workload() -> impl Strategy<Value = Workload> {
    prop_oneof![
        (1usize..4).prop_map(|length| Workload::Chain { length }),
        (1usize..30).prop_map(|tasks| Workload::Independent { tasks }),
        (1usize..20, 0.0f64..0.6).prop_map(|(tasks, edge_prob)| Workload::RandomDag { tasks, edge_prob }),
    ]
}

fn scenario() -> impl Strategy<Value = ScenarioSpec> {
    (
        any::<u64>(),
        1usize..6,
        workload(),
        proptest::collection::vec((0u64..3, prop_oneof![Just(0.0), Just(0.25)], any::<u64>()), 1..4),
        prop_oneof![Just(SelectionPolicy::Heuristic), Just(SelectionPolicy::RoundRobin)],
    )
        .prop_map(|(seed, subjects, workload, resources, policy)| ScenarioSpec {
            seed,
            tick_budget: 300,
            subjects,
            policy,
            dep_bonus: DepBonusMode::PerDependency,
            resources: resources
                .into_iter()
                .enumerate()
                .map(|(i, (latency_ticks, failure_prob, rng_seed))| {
                    ResourceSpec::new(&format!("r{i}"), SimProfile { latency_ticks, failure_prob, rng_seed, ..Default::default() })
                })
                .collect(),
            workload,
        })
}

fn run(spec: &ScenarioSpec) -> datadock_core::sim::Metrics {
    let dir = tempfile::tempdir().unwrap();
    build_and_run(dir.path(), spec).unwrap().1
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn same_seed_same_history(spec in scenario()) {
        let a = run(&spec);
        let b = run(&spec);
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.non_terminal, 0);
        prop_assert_eq!(a.finished + a.failed, a.tasks);
    }

    #[test]
    fn gravity_never_moves_more_data_than_round_robin(
        seed in any::<u64>(),
        subjects in 1usize..8,
        length in 2usize..4,
        n in 2usize..4,
        latency in 0u64..2,
    ) {
        let spec = |policy| ScenarioSpec {
            seed,
            tick_budget: 300,
            subjects,
            policy,
            dep_bonus: DepBonusMode::PerDependency,
            resources: (0..n).map(|i| ResourceSpec::new(&format!("r{i}"), SimProfile { latency_ticks: latency, ..Default::default() })).collect(),
            workload: Workload::Chain { length },
        };
        let h = run(&spec(SelectionPolicy::Heuristic));
        let rr = run(&spec(SelectionPolicy::RoundRobin));
        prop_assert_eq!(h.finished, subjects * length);
        prop_assert_eq!(rr.finished, subjects * length);
        prop_assert!(h.transfers <= rr.transfers);
        prop_assert_eq!(h.transfers, subjects as u64);
    }

    #[test]
    fn status_follows_latency_then_the_seeded_outcome(
        latency in 0u64..6,
        dispatch in 0u64..50,
        p in 0.0f64..1.0,
        seed in any::<u64>(),
        n in 1u64..99_999_999,
    ) {
        let dir = tempfile::tempdir().unwrap();
        write_hook(dir.path(), "start", "#!/bin/sh\nexit 0\n").unwrap();
        let task = TaskId(format!("t{n:08}"));
        let mut backend = SimBackend::new("r1", SimProfile { latency_ticks: latency, failure_prob: p, rng_seed: seed, native_synthetic: false, ..Default::default() });
        backend.start(&HookContext { task: &task, work_dir: dir.path(), now: dispatch }).unwrap();
        let outcome = if decides_failure(seed, &task, p) { StatusCode::Failed } else { StatusCode::Finished };
        for now in dispatch..dispatch + latency + 4 {
            let code = backend.status(&HookContext { task: &task, work_dir: dir.path(), now }).unwrap();
            let want = if now - dispatch <= latency { StatusCode::Running } else { outcome };
            prop_assert_eq!(code, want, "tick {}", now);
        }
        prop_assert_eq!(decides_failure(seed, &task, 0.0), false);
        prop_assert_eq!(decides_failure(seed, &task, 1.0), true);
    }

    #[test]
    fn exit_codes_map_onto_the_protocol(code in proptest::option::of(-5i32..300)) {
        let want = match code {
            Some(0) => StatusCode::Running,
            Some(1) => StatusCode::Finished,
            Some(2) => StatusCode::Failed,
            _ => StatusCode::Unknown,
        };
        prop_assert_eq!(StatusCode::from_exit(code), want);
    }
}

#[test]
fn failure_draws_are_calibrated() {
    for p in [0.1, 0.346, 0.8] {
        let hits = (1..=20_000u64).filter(|n| decides_failure(7, &TaskId(format!("t{n:08}")), p)).count();
        let rate = hits as f64 / 20_000.0;
        let sigma = (p * (1.0 - p) / 20_000.0).sqrt();
        assert!((rate - p).abs() < 4.0 * sigma, "p={p}: observed {rate}");
    }
}

#[test]
fn down_resources_refuse_work() {
    let dir = tempfile::tempdir().unwrap();
    let mut backend = SimBackend::new("r1", SimProfile { down: true, ..Default::default() });
    assert_eq!(backend.probe(), datadock_core::broker::ResourceStatus::Down);
    let task = TaskId::from("t00000001");
    assert!(backend.start(&HookContext { task: &task, work_dir: dir.path(), now: 0 }).is_err());
    backend.set_down(false);
    assert_eq!(backend.probe(), datadock_core::broker::ResourceStatus::Ok);
}

/// Runs one step task per subject and returns every archived output tree.
fn outputs(native: bool) -> Vec<(String, digest::FileTree)> {
    let mut w = World::new();
    let app = w.blob_app("step", &["in"]);
    w.sim_resource("r1", SimProfile { latency_ticks: 1, native_synthetic: native, ..Default::default() }, &[(&app, 1)]);
    for s in 0..3 {
        w.upload(&format!("sub-{s}"), &["raw"], &format!("raw {s}\n"));
    }
    let rule = w.rule(&app, &[("in", BLOB, &["raw"])], &["out"]);
    w.p.evaluate_rule(&rule).unwrap();
    w.settle(20);
    assert!(w.p.tasks().tasks().all(|t| t.state == TaskState::Finished));
    let ids: Vec<_> = w.p.warehouse().objects().filter(|o| o.has_tag("out")).map(|o| (o.subject.clone(), o.id.clone())).collect();
    ids.into_iter()
        .map(|(s, id)| {
            let dest = w.root().join("check").join(id.as_str());
            (s, w.p.warehouse().fetch_object(&id, &dest).unwrap())
        })
        .collect()
}

#[test]
fn native_and_shell_synthetic_runs_agree() {
    let native = outputs(true);
    assert_eq!(native.len(), 3);
    assert_eq!(native, outputs(false));
}
