//! Workflow instances, tasks and their state machine.
//!
//! ```text
//! requested ──> running ──> finished
//!     │            ├──────> failed
//!     │            └──────> stopped
//!     ├──> failed | stopped | removed
//! ```
//!
//! Terminal states absorb. Transitions are appended to `transitions.jsonl`
//! and each task is snapshotted to `tasks/<id>.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::ids::{format_id, AppId, InstanceId, ObjectId, ProjectId, ResourceId, RuleId, TaskId, Tick, UserId};
use crate::persist;
use crate::registry::App;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskState {
    Requested,
    Running,
    Finished,
    Failed,
    Stopped,
    Removed,
}

impl TaskState {
    pub fn is_terminal(self) -> bool {
        !matches!(self, TaskState::Requested | TaskState::Running)
    }

    /// Terminal and not finished: children can never run.
    pub fn dooms_children(self) -> bool {
        matches!(self, TaskState::Failed | TaskState::Stopped | TaskState::Removed)
    }

    pub fn can_become(self, to: TaskState) -> bool {
        use TaskState::*;
        matches!(
            (self, to),
            (Requested, Running | Failed | Stopped | Removed) | (Running, Finished | Failed | Stopped)
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskState::Requested => "requested",
            TaskState::Running => "running",
            TaskState::Finished => "finished",
            TaskState::Failed => "failed",
            TaskState::Stopped => "stopped",
            TaskState::Removed => "removed",
        }
    }
}

impl fmt::Display for TaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where an input slot's data comes from.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binding {
    /// An archived warehouse object.
    Object(ObjectId),
    /// An output slot of another task in the same instance, resolved once it finishes.
    TaskOutput { task: TaskId, slot: String },
}

impl Binding {
    /// Parses `d00000001` or `t00000003:out`.
    pub fn parse(s: &str) -> Self {
        match s.split_once(':') {
            Some((task, slot)) => Binding::TaskOutput {
                task: TaskId::from(task),
                slot: slot.to_owned(),
            },
            None => Binding::Object(ObjectId::from(s)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobHandle {
    pub task: TaskId,
    pub resource: ResourceId,
    pub backend_job_id: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagingReport {
    pub transfers: u64,
    pub bytes: u64,
    pub local: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: InstanceId,
    pub project: ProjectId,
    pub created_at: Tick,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: TaskId,
    pub instance: InstanceId,
    pub project: ProjectId,
    pub app: AppId,
    pub submitter: UserId,
    pub service_digest: Option<String>,
    pub config: BTreeMap<String, Value>,
    pub bindings: BTreeMap<String, Binding>,
    /// Bindings resolved to object ids at dispatch.
    #[serde(default)]
    pub inputs: BTreeMap<String, ObjectId>,
    pub deps: Vec<TaskId>,
    pub state: TaskState,
    pub resource: Option<ResourceId>,
    pub preferred_resource: Option<ResourceId>,
    pub subject: Option<String>,
    #[serde(default)]
    pub session: Option<String>,
    #[serde(default)]
    pub output_tags: Vec<String>,
    #[serde(default)]
    pub rule: Option<RuleId>,
    pub work_dir: Option<PathBuf>,
    pub fail_reason: Option<String>,
    #[serde(default)]
    pub note: Option<String>,
    pub job: Option<JobHandle>,
    #[serde(default)]
    pub dispatched_at: Option<Tick>,
    #[serde(default)]
    pub unknown_polls: u32,
    #[serde(default)]
    pub staging: Option<StagingReport>,
    /// Output slot → archived object.
    #[serde(default)]
    pub outputs: BTreeMap<String, ObjectId>,
    pub timestamps: BTreeMap<TaskState, Tick>,
}

impl Task {
    /// Tasks whose outputs feed this one: explicit deps plus producers of bound inputs.
    pub fn data_deps(&self, producer_of: impl Fn(&ObjectId) -> Option<TaskId>) -> Vec<TaskId> {
        let mut deps: BTreeSet<TaskId> = self.deps.iter().cloned().collect();
        for b in self.bindings.values() {
            match b {
                Binding::Object(o) => deps.extend(producer_of(o)),
                Binding::TaskOutput { task, .. } => {
                    deps.insert(task.clone());
                }
            }
        }
        deps.into_iter().collect()
    }
}

/// A recorded state change. `from == None` marks submission.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub seq: u64,
    pub tick: Tick,
    pub task: TaskId,
    pub from: Option<TaskState>,
    pub to: TaskState,
    pub reason: Option<String>,
    pub resource: Option<ResourceId>,
}

/// Everything a caller supplies to submit a task.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskRequest {
    pub instance: InstanceId,
    pub app: AppId,
    #[serde(default)]
    pub config: BTreeMap<String, Value>,
    #[serde(default)]
    pub bindings: BTreeMap<String, Binding>,
    #[serde(default)]
    pub deps: Vec<TaskId>,
    #[serde(default)]
    pub preferred_resource: Option<ResourceId>,
    pub submitter: UserId,
    #[serde(default)]
    pub subject: Option<String>,
    #[serde(default)]
    pub session: Option<String>,
    #[serde(default)]
    pub output_tags: Vec<String>,
    #[serde(default)]
    pub rule: Option<RuleId>,
}

impl TaskRequest {
    pub fn new(instance: InstanceId, app: AppId, submitter: UserId) -> Self {
        Self {
            instance,
            app,
            config: BTreeMap::new(),
            bindings: BTreeMap::new(),
            deps: Vec::new(),
            preferred_resource: None,
            submitter,
            subject: None,
            session: None,
            output_tags: Vec::new(),
            rule: None,
        }
    }

    pub fn bind(mut self, slot: &str, binding: Binding) -> Self {
        self.bindings.insert(slot.to_owned(), binding);
        self
    }
}

/// Renders the `config.json` handed to a service.
///
/// User keys sit at the top level next to `_app`, `_task`, `_inputs` and
/// `_outputs`; keys are sorted and the document is pretty-printed with a
/// trailing newline.
pub fn render_config_json(task: &Task, app: &App) -> String {
    let mut doc: BTreeMap<String, Value> = task.config.clone();
    doc.insert("_app".into(), Value::from(app.id.as_str()));
    doc.insert("_task".into(), Value::from(task.id.as_str()));
    let slots = |slots: &[crate::registry::Slot], dir: &str, only_bound: bool| -> Value {
        Value::Array(
            slots
                .iter()
                .filter(|s| !only_bound || task.bindings.contains_key(&s.slot_id))
                .map(|s| {
                    serde_json::json!({
                        "id": s.slot_id,
                        "datatype": s.datatype,
                        "path": format!("{dir}/{}", s.slot_id),
                    })
                })
                .collect(),
        )
    };
    doc.insert("_inputs".into(), slots(&app.input_slots, "inputs", true));
    doc.insert("_outputs".into(), slots(&app.output_slots, "outputs", false));
    let mut s = serde_json::to_string_pretty(&doc).expect("config serializes");
    s.push('\n');
    s
}

#[derive(Debug)]
pub struct TaskStore {
    root: PathBuf,
    instances: BTreeMap<InstanceId, Instance>,
    tasks: BTreeMap<TaskId, Task>,
    transitions: Vec<Transition>,
    next_instance: u64,
    next_task: u64,
}

impl TaskStore {
    pub fn open(root: &Path) -> Result<Self> {
        let instances: Vec<Instance> =
            persist::read_json(&root.join("instances.json"))?.unwrap_or_default();
        let task_dir = root.join("tasks");
        let mut tasks = BTreeMap::new();
        if task_dir.is_dir() {
            for entry in fs::read_dir(&task_dir).map_err(|e| Error::storage(&task_dir, e))? {
                let path = entry.map_err(|e| Error::storage(&task_dir, e))?.path();
                if path.extension().and_then(|e| e.to_str()) == Some("json") {
                    if let Some(t) = persist::read_json::<Task>(&path)? {
                        tasks.insert(t.id.clone(), t);
                    }
                }
            }
        }
        let transitions = persist::read_jsonl(&root.join("transitions.jsonl"))?;
        let counter = |ids: Vec<&str>| {
            ids.into_iter()
                .filter_map(|id| id.get(1..)?.parse::<u64>().ok())
                .max()
                .map_or(1, |m| m + 1)
        };
        Ok(Self {
            root: root.to_owned(),
            next_instance: counter(instances.iter().map(|i| i.id.as_str()).collect()),
            next_task: counter(tasks.keys().map(|k: &TaskId| k.as_str()).collect()),
            instances: instances.into_iter().map(|i| (i.id.clone(), i)).collect(),
            tasks,
            transitions,
        })
    }

    pub fn create_instance(&mut self, project: ProjectId, now: Tick) -> Result<Instance> {
        let inst = Instance {
            id: InstanceId(format_id('i', self.next_instance)),
            project,
            created_at: now,
        };
        self.instances.insert(inst.id.clone(), inst.clone());
        let list: Vec<&Instance> = self.instances.values().collect();
        if let Err(e) = persist::write_json(&self.root.join("instances.json"), &list) {
            self.instances.remove(&inst.id);
            return Err(e);
        }
        self.next_instance += 1;
        Ok(inst)
    }

    pub fn instance(&self, id: &InstanceId) -> Result<&Instance> {
        self.instances
            .get(id)
            .ok_or_else(|| Error::not_found("instance", id.as_str()))
    }

    pub fn instances(&self) -> impl Iterator<Item = &Instance> {
        self.instances.values()
    }

    pub fn instance_tasks(&self, id: &InstanceId) -> Vec<&Task> {
        self.tasks.values().filter(|t| &t.instance == id).collect()
    }

    pub(crate) fn next_task_id(&self) -> TaskId {
        TaskId(format_id('t', self.next_task))
    }

    pub(crate) fn insert_new(&mut self, task: Task, tick: Tick) -> Result<Transition> {
        self.save(&task)?;
        self.next_task += 1;
        let tr = self.record(Transition {
            seq: 0,
            tick,
            task: task.id.clone(),
            from: None,
            to: TaskState::Requested,
            reason: None,
            resource: None,
        })?;
        self.tasks.insert(task.id.clone(), task);
        Ok(tr)
    }

    pub(crate) fn save(&self, task: &Task) -> Result<()> {
        persist::write_json(&self.root.join("tasks").join(format!("{}.json", task.id)), task)
    }

    pub(crate) fn update(&mut self, task: Task) -> Result<()> {
        self.save(&task)?;
        self.tasks.insert(task.id.clone(), task);
        Ok(())
    }

    fn record(&mut self, mut tr: Transition) -> Result<Transition> {
        tr.seq = self.transitions.last().map_or(1, |t| t.seq + 1);
        persist::append_jsonl(&self.root.join("transitions.jsonl"), &tr)?;
        self.transitions.push(tr.clone());
        Ok(tr)
    }

    /// Applies a state change; the task snapshot is durable before the journal entry.
    pub(crate) fn transition(
        &mut self,
        id: &TaskId,
        to: TaskState,
        reason: Option<String>,
        tick: Tick,
    ) -> Result<Transition> {
        let mut task = self.task(id)?.clone();
        if !task.state.can_become(to) {
            return Err(Error::InvalidTransition {
                task: id.to_string(),
                from: task.state.to_string(),
                to: to.to_string(),
            });
        }
        let from = task.state;
        task.state = to;
        task.timestamps.insert(to, tick);
        if matches!(to, TaskState::Failed) {
            task.fail_reason = reason.clone();
        }
        let resource = task.resource.clone();
        self.update(task)?;
        self.record(Transition {
            seq: 0,
            tick,
            task: id.clone(),
            from: Some(from),
            to,
            reason,
            resource,
        })
    }

    pub fn task(&self, id: &TaskId) -> Result<&Task> {
        self.tasks
            .get(id)
            .ok_or_else(|| Error::not_found("task", id.as_str()))
    }

    pub fn tasks(&self) -> impl Iterator<Item = &Task> {
        self.tasks.values()
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn task_events(&self, id: &TaskId) -> Vec<Transition> {
        self.transitions.iter().filter(|t| &t.task == id).cloned().collect()
    }

    /// Direct children of `id`.
    pub fn children(&self, id: &TaskId) -> Vec<TaskId> {
        self.tasks
            .values()
            .filter(|t| t.deps.contains(id))
            .map(|t| t.id.clone())
            .collect()
    }

    /// Whether `from` can reach `to` following dependency edges.
    pub fn depends_on(&self, from: &TaskId, to: &TaskId) -> bool {
        let mut stack = vec![from.clone()];
        let mut seen = BTreeSet::new();
        while let Some(t) = stack.pop() {
            if &t == to {
                return true;
            }
            if !seen.insert(t.clone()) {
                continue;
            }
            if let Some(task) = self.tasks.get(&t) {
                stack.extend(task.deps.iter().cloned());
            }
        }
        false
    }

    pub fn max_tick(&self) -> Tick {
        self.transitions.iter().map(|t| t.tick).max().unwrap_or(0)
    }
}
