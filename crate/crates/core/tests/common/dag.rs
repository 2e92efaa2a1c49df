//! Random task DAGs over three blob apps and two simulated resources.

use datadock_core::orchestrator::{Binding, TaskRequest};
use datadock_core::sim::SimProfile;
use datadock_core::{AppId, TaskId};
use proptest::prelude::*;

use super::World;

/// A task: up to two upstream outputs it consumes plus extra ordering deps.
#[derive(Clone, Debug)]
pub struct Node {
    pub inputs: Vec<usize>,
    pub after: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Dag {
    pub nodes: Vec<Node>,
    pub failure_prob: f64,
    pub latency: [u64; 2],
    pub seeds: [u64; 2],
}

pub fn dag(max: usize) -> impl Strategy<Value = Dag> {
    (1..=max)
        .prop_flat_map(|n| {
            let nodes = (0..n)
                .map(|i| {
                    let earlier = proptest::collection::vec(0..i.max(1), 0..=2.min(i));
                    let extra = proptest::collection::vec(0..i.max(1), 0..=1.min(i));
                    (earlier, extra).prop_map(|(mut inputs, after)| {
                        inputs.sort();
                        inputs.dedup();
                        Node { inputs, after }
                    })
                })
                .collect::<Vec<_>>();
            (nodes, prop_oneof![Just(0.0), Just(0.2), Just(0.5)], [0u64..3, 0u64..3], any::<[u64; 2]>())
        })
        .prop_map(|(nodes, failure_prob, latency, seeds)| Dag { nodes, failure_prob, latency, seeds })
}

pub struct Built {
    pub w: World,
    pub ids: Vec<TaskId>,
}

pub fn build(d: &Dag) -> Built {
    let mut w = World::new();
    let src = w.blob_app("src", &[]);
    let step = w.blob_app("step", &["in"]);
    let join = w.blob_app("join", &["in1", "in2"]);
    let apps: [(&AppId, i64); 3] = [(&src, 10), (&step, 10), (&join, 10)];
    for k in 0..2 {
        let profile = SimProfile {
            latency_ticks: d.latency[k],
            failure_prob: d.failure_prob,
            rng_seed: d.seeds[k],
            ..Default::default()
        };
        w.sim_resource(&format!("r{k}"), profile, &apps);
    }
    let inst = w.p.create_instance(&w.project).unwrap().id;
    let mut ids: Vec<TaskId> = Vec::new();
    for (i, node) in d.nodes.iter().enumerate() {
        let out = |t: usize| Binding::TaskOutput { task: ids[t].clone(), slot: "out".into() };
        let mut req = match node.inputs.as_slice() {
            [] => TaskRequest::new(inst.clone(), src.clone(), w.owner.clone()),
            [a] => TaskRequest::new(inst.clone(), step.clone(), w.owner.clone()).bind("in", out(*a)),
            [a, b, ..] => TaskRequest::new(inst.clone(), join.clone(), w.owner.clone())
                .bind("in1", out(*a))
                .bind("in2", out(*b)),
        };
        req.deps = node.after.iter().map(|&j| ids[j].clone()).collect();
        req.subject = Some(format!("sub-{i}"));
        ids.push(w.p.submit_task(req).unwrap().id);
    }
    Built { w, ids }
}
