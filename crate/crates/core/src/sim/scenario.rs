//! End-to-end scenarios over simulated resources.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::broker::{BackendSpec, DepBonusMode, ResourceDescriptor, ResourceKind, ScoringOptions, SelectionPolicy};
use crate::error::{Error, Result};
use crate::ids::{AppId, InstanceId, ObjectId, ResourceId, TaskId, UserId};
use crate::orchestrator::{Binding, TaskRequest, TaskState, Transition};
use crate::pipeline::{InputSelector, RuleDefinition};
use crate::platform::{Platform, PlatformConfig};
use crate::registry::Slot;
use crate::warehouse::{ArchiveRequest, DatatypeFlags, FileSpec};

use super::synthetic::{SyntheticApp, SyntheticOutput};
use super::SimProfile;

pub const BLOB_DATATYPE: &str = "sim/blob";
const MAX_FAN_IN: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceSpec {
    pub id: ResourceId,
    #[serde(default = "shared")]
    pub kind: ResourceKind,
    #[serde(default)]
    pub owner: Option<UserId>,
    /// Default score for every scenario app.
    #[serde(default = "ten")]
    pub default_score: i64,
    #[serde(default)]
    pub profile: SimProfile,
}

fn shared() -> ResourceKind {
    ResourceKind::Shared
}

fn ten() -> i64 {
    10
}

impl ResourceSpec {
    pub fn new(id: &str, profile: SimProfile) -> Self {
        Self {
            id: id.into(),
            kind: ResourceKind::Shared,
            owner: None,
            default_score: 10,
            profile,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Workload {
    /// A chain of `length` pipeline rules, each consuming the previous rule's output per subject.
    Chain { length: usize },
    /// `tasks` unrelated single-input tasks spread over the subjects.
    Independent { tasks: usize },
    /// Random DAG: task `i` depends on each earlier task with probability `edge_prob`.
    RandomDag { tasks: usize, edge_prob: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    #[serde(default)]
    pub seed: u64,
    pub tick_budget: u64,
    pub subjects: usize,
    #[serde(default)]
    pub policy: SelectionPolicy,
    #[serde(default)]
    pub dep_bonus: DepBonusMode,
    pub resources: Vec<ResourceSpec>,
    pub workload: Workload,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tasks: usize,
    pub finished: usize,
    pub failed: usize,
    pub non_terminal: usize,
    /// finished / terminal tasks.
    pub success_rate: f64,
    pub transfers: u64,
    /// Transfers by app name (one app per chain stage).
    pub transfers_by_app: BTreeMap<String, u64>,
    pub per_resource: BTreeMap<ResourceId, usize>,
    pub ticks_used: u64,
    pub trace: Vec<Transition>,
}

/// Runs a scenario in a scratch directory that is removed afterwards.
pub fn run_scenario(spec: &ScenarioSpec) -> Result<Metrics> {
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_nanos());
    let root = std::env::temp_dir().join(format!("datadock-scenario-{}-{nanos}", std::process::id()));
    let result = run_scenario_in(&root, spec);
    if let Err(e) = fs::remove_dir_all(&root) {
        log::warn!("cannot remove {}: {e}", root.display());
    }
    result
}

/// Builds the scenario world under `root` (which must be empty or absent) and drives it.
pub fn run_scenario_in(root: &Path, spec: &ScenarioSpec) -> Result<Metrics> {
    Ok(build_and_run(root, spec)?.1)
}

/// Like [`run_scenario_in`] but also hands back the platform for inspection.
pub fn build_and_run(root: &Path, spec: &ScenarioSpec) -> Result<(Platform, Metrics)> {
    validate(spec)?;
    let config = PlatformConfig {
        scoring: ScoringOptions {
            dep_bonus: spec.dep_bonus,
            policy: spec.policy,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut p = Platform::open(root, config)?;
    let owner = UserId::from("sim");
    let project = p.create_project(&owner, "scenario")?;
    p.register_datatype(BLOB_DATATYPE, vec![FileSpec::required("blob.txt")], DatatypeFlags::default())?;

    let mut apps: Vec<AppId> = Vec::new();
    let names: Vec<(String, usize)> = match spec.workload {
        Workload::Chain { length } => (1..=length).map(|i| (format!("stage_{i}"), 1)).collect(),
        Workload::Independent { .. } => vec![("single".to_owned(), 1)],
        Workload::RandomDag { .. } => (1..=MAX_FAN_IN).map(|k| (format!("merge_{k}"), k)).collect(),
    };
    for (name, fan_in) in &names {
        let app = SyntheticApp {
            name: name.clone(),
            version: "1.0".into(),
            inputs: (1..=*fan_in)
                .map(|i| Slot::new(if *fan_in == 1 { "in".to_owned() } else { format!("in{i}") }, BLOB_DATATYPE))
                .collect(),
            outputs: vec![SyntheticOutput {
                slot: Slot::new("out", BLOB_DATATYPE),
                files: vec!["blob.txt".into()],
                features: None,
            }],
        };
        let dir = root.join("services").join(name);
        apps.push(p.register_synthetic_app(&dir, &app)?.id);
    }

    for r in &spec.resources {
        p.register_resource(ResourceDescriptor {
            id: r.id.clone(),
            name: r.id.to_string(),
            kind: r.kind,
            owner: r.owner.clone(),
            geolocation: r.profile.geolocation.clone(),
            queue_length: r.profile.queue_length,
            backend: BackendSpec::Sim(r.profile.clone()),
            enabled_services: apps.iter().map(|a| (a.clone(), r.default_score)).collect(),
        })?;
    }

    let staging = root.join("staging");
    let mut imported: Vec<ObjectId> = Vec::new();
    for s in 0..spec.subjects {
        let dir = staging.join(format!("sub-{s:04}"));
        fs::create_dir_all(&dir).map_err(|e| Error::storage(&dir, e))?;
        let path = dir.join("blob.txt");
        fs::write(&path, format!("subject {s} seed {}\n", spec.seed)).map_err(|e| Error::storage(&path, e))?;
        let obj = p.upload_object(ArchiveRequest {
            project: project.id.clone(),
            datatype: BLOB_DATATYPE.into(),
            source_dir: dir,
            datatype_tags: vec![],
            tags: vec!["raw".into()],
            subject: format!("sub-{s:04}"),
            session: None,
            provenance_task: None,
        })?;
        imported.push(obj.id);
    }

    let mut ticks_used = 0;
    match spec.workload {
        Workload::Chain { length } => {
            let mut rules = Vec::new();
            for (i, app) in apps.iter().enumerate().take(length) {
                let input_tag = if i == 0 { "raw".to_owned() } else { format!("stage{i}") };
                rules.push(
                    p.define_rule(RuleDefinition {
                        project: project.id.clone(),
                        app: app.clone(),
                        input_selectors: BTreeMap::from([(
                            "in".to_owned(),
                            InputSelector {
                                datatype: BLOB_DATATYPE.into(),
                                include_tags: vec![input_tag],
                                exclude_tags: vec![],
                            },
                        )]),
                        config: BTreeMap::new(),
                        output_tags: vec![format!("stage{}", i + 1)],
                    })?
                    .id,
                );
            }
            while ticks_used < spec.tick_budget {
                let mut submitted = 0;
                for r in &rules {
                    submitted += p.evaluate_rule(r)?.submissions.len();
                }
                let moved = p.tick()?.len();
                ticks_used += 1;
                if submitted == 0 && moved == 0 && all_terminal(&p) {
                    break;
                }
            }
        }
        Workload::Independent { tasks } => {
            let inst = p.create_instance(&project.id)?;
            for i in 0..tasks {
                let obj = imported
                    .get(i % spec.subjects.max(1))
                    .ok_or_else(|| Error::validation("independent workload needs subjects"))?;
                submit(&mut p, &inst.id, &apps[0], &owner, i, vec![("in".into(), Binding::Object(obj.clone()))], vec![])?;
            }
            ticks_used = drive(&mut p, spec.tick_budget)?;
        }
        Workload::RandomDag { tasks, edge_prob } => {
            let inst = p.create_instance(&project.id)?;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let mut ids: Vec<TaskId> = Vec::new();
            for i in 0..tasks {
                let parents: Vec<TaskId> = ids.iter().filter(|_| rng.gen::<f64>() < edge_prob).cloned().collect();
                let fan_in = parents.len().clamp(1, MAX_FAN_IN);
                let slot = |k: usize| if fan_in == 1 { "in".to_owned() } else { format!("in{k}") };
                let bindings: Vec<(String, Binding)> = if parents.is_empty() {
                    let obj = imported
                        .get(i % spec.subjects.max(1))
                        .ok_or_else(|| Error::validation("random DAG workload needs subjects"))?;
                    vec![(slot(1), Binding::Object(obj.clone()))]
                } else {
                    parents
                        .iter()
                        .take(MAX_FAN_IN)
                        .enumerate()
                        .map(|(k, t)| (slot(k + 1), Binding::TaskOutput { task: t.clone(), slot: "out".into() }))
                        .collect()
                };
                let extra = parents.iter().skip(MAX_FAN_IN).cloned().collect();
                let t = submit(&mut p, &inst.id, &apps[fan_in - 1], &owner, i, bindings, extra)?;
                ids.push(t);
            }
            ticks_used = drive(&mut p, spec.tick_budget)?;
        }
    }

    let metrics = metrics(&p, ticks_used);
    Ok((p, metrics))
}

fn validate(spec: &ScenarioSpec) -> Result<()> {
    if spec.resources.is_empty() {
        return Err(Error::validation("scenario needs at least one resource"));
    }
    for r in &spec.resources {
        r.profile.validate()?;
    }
    match spec.workload {
        Workload::Chain { length: 0 } => Err(Error::validation("chain length must be positive")),
        Workload::RandomDag { edge_prob, .. } if !(0.0..=1.0).contains(&edge_prob) => {
            Err(Error::validation("edge_prob must lie in [0, 1]"))
        }
        _ if spec.subjects == 0 => Err(Error::validation("scenario needs at least one subject")),
        _ => Ok(()),
    }
}

fn submit(
    p: &mut Platform,
    instance: &InstanceId,
    app: &AppId,
    owner: &UserId,
    i: usize,
    bindings: Vec<(String, Binding)>,
    deps: Vec<TaskId>,
) -> Result<TaskId> {
    let mut req = TaskRequest::new(instance.clone(), app.clone(), owner.clone());
    req.config.insert("param".into(), serde_json::Value::from(i as u64));
    req.bindings = bindings.into_iter().collect();
    req.deps = deps;
    Ok(p.submit_task(req)?.id)
}

fn all_terminal(p: &Platform) -> bool {
    p.tasks().tasks().all(|t| t.state.is_terminal())
}

fn drive(p: &mut Platform, budget: u64) -> Result<u64> {
    let mut used = 0;
    while used < budget && !all_terminal(p) {
        p.tick()?;
        used += 1;
    }
    Ok(used)
}

fn metrics(p: &Platform, ticks_used: u64) -> Metrics {
    let mut m = Metrics {
        ticks_used,
        trace: p.tasks().transitions().to_vec(),
        ..Default::default()
    };
    for t in p.tasks().tasks() {
        m.tasks += 1;
        match t.state {
            TaskState::Finished => m.finished += 1,
            TaskState::Failed | TaskState::Stopped | TaskState::Removed => m.failed += 1,
            TaskState::Requested | TaskState::Running => m.non_terminal += 1,
        }
        if let (Some(r), Some(_)) = (&t.resource, &t.dispatched_at) {
            *m.per_resource.entry(r.clone()).or_default() += 1;
        }
        if let Some(s) = &t.staging {
            m.transfers += s.transfers;
            let name = p.registry().app(&t.app).map_or_else(|_| t.app.to_string(), |a| a.name.clone());
            *m.transfers_by_app.entry(name).or_default() += s.transfers;
        }
    }
    let terminal = m.finished + m.failed;
    m.success_rate = if terminal == 0 { 0.0 } else { m.finished as f64 / terminal as f64 };
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(workload: Workload, policy: SelectionPolicy) -> ScenarioSpec {
        ScenarioSpec {
            seed: 7,
            tick_budget: 100,
            subjects: 4,
            policy,
            dep_bonus: DepBonusMode::PerDependency,
            resources: ["r1", "r2", "r3"]
                .iter()
                .map(|id| ResourceSpec::new(id, SimProfile { latency_ticks: 1, ..Default::default() }))
                .collect(),
            workload,
        }
    }

    #[test]
    fn chain_completes_and_colocates() {
        let dir = tempfile::tempdir().unwrap();
        let m = run_scenario_in(dir.path(), &spec(Workload::Chain { length: 3 }, SelectionPolicy::Heuristic)).unwrap();
        assert_eq!((m.tasks, m.finished), (12, 12));
        assert_eq!(m.success_rate, 1.0);
        assert_eq!(m.transfers_by_app["stage_1"], 4);
        assert_eq!(m.transfers_by_app["stage_2"] + m.transfers_by_app["stage_3"], 0);
    }

    #[test]
    fn seeded_runs_repeat() {
        let s = ScenarioSpec {
            resources: vec![ResourceSpec::new(
                "r1",
                SimProfile { latency_ticks: 1, failure_prob: 0.3, rng_seed: 3, ..Default::default() },
            )],
            ..spec(Workload::RandomDag { tasks: 12, edge_prob: 0.3 }, SelectionPolicy::Heuristic)
        };
        let a = run_scenario(&s).unwrap();
        let b = run_scenario(&s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.non_terminal, 0);
    }
}
