//! The platform facade: every store plus the scheduler.
//!
//! All mutations go through `&mut Platform`, which makes the scheduler the
//! single serialized writer of task state.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::broker::{
    Residency, Resource, ResourceBroker, ResourceDescriptor, ResourceStatus, ScoreContext,
    ScoreRequest, ScoringOptions,
};
use crate::digest::{self, DigestAlgorithm};
use crate::error::{Error, Result};
use crate::exec::{ExecBackend, HookContext, StatusCode};
use crate::ids::{AppId, ObjectId, ProjectId, ResourceId, TaskId, Tick, UserId};
use crate::orchestrator::{
    render_config_json, Binding, Instance, JobHandle, StagingReport, Task, TaskRequest, TaskState,
    TaskStore, Transition,
};
use crate::persist;
use crate::pipeline::PipelineStore;
use crate::provenance::{self, AppSummary, Graph, ProvenanceRecord, ProvenanceStore, PublicationRecord};
use crate::registry::{self, App, AppDescriptor, AppRegistry, DockingResult, Verdict};
use crate::sim::{self, SyntheticApp};
use crate::warehouse::{
    validate_object, ArchiveRequest, DataObject, Datatype, DatatypeFlags, FileSpec, Project,
    ProjectUpdate, Warehouse, DEFAULT_BUCKET,
};

pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlatformConfig {
    pub bucket: String,
    pub digest: DigestAlgorithm,
    /// Wall-clock length of one tick in the service loop.
    pub tick_ms: u64,
    pub scoring: ScoringOptions,
    /// Consecutive `unknown` status polls tolerated before a task fails.
    pub status_unknown_limit: u32,
    /// Fail collation on the first malformed payload instead of skipping it.
    pub strict_collation: bool,
    /// Outlier threshold `k` used when curating reference ranges.
    pub outlier_k: f64,
}

impl Default for PlatformConfig {
    fn default() -> Self {
        Self {
            bucket: DEFAULT_BUCKET.to_owned(),
            digest: DigestAlgorithm::Sha256,
            tick_ms: 1000,
            scoring: ScoringOptions::default(),
            status_unknown_limit: 3,
            strict_collation: false,
            outlier_k: 2.0,
        }
    }
}

impl PlatformConfig {
    /// Reads `<root>/config.json` when present.
    pub fn load(root: &Path) -> Result<Self> {
        Ok(persist::read_json(&root.join(CONFIG_FILE))?.unwrap_or_default())
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        persist::write_json(&root.join(CONFIG_FILE), self)
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
struct Clock {
    now: Tick,
}

pub struct Platform {
    root: PathBuf,
    config: PlatformConfig,
    warehouse: Warehouse,
    registry: AppRegistry,
    broker: ResourceBroker,
    tasks: TaskStore,
    provenance: ProvenanceStore,
    pub(crate) pipelines: PipelineStore,
    residency: Residency,
    backends: BTreeMap<ResourceId, Box<dyn ExecBackend>>,
    clock: Tick,
}

impl std::fmt::Debug for Platform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Platform")
            .field("root", &self.root)
            .field("clock", &self.clock)
            .finish_non_exhaustive()
    }
}

impl Platform {
    /// Opens (or initializes) a platform rooted at `root`, restoring all state.
    pub fn open(root: &Path, config: PlatformConfig) -> Result<Self> {
        let warehouse = Warehouse::open(root, &config.bucket, config.digest)?;
        let registry = AppRegistry::open(root)?;
        let broker = ResourceBroker::open(root)?;
        let tasks = TaskStore::open(root)?;
        let provenance = ProvenanceStore::open(root)?;
        let pipelines = PipelineStore::open(root)?;
        let clock = persist::read_json::<Clock>(&root.join("clock.json"))?
            .map_or(0, |c| c.now)
            .max(tasks.max_tick());

        let mut residency = Residency::default();
        for t in tasks.tasks() {
            if let (TaskState::Finished, Some(r)) = (t.state, &t.resource) {
                residency.record_task(t.id.clone(), r.clone());
            }
        }
        for o in warehouse.objects() {
            if let Some(t) = &o.provenance_task {
                residency.record_object(o.id.clone(), t.clone());
            }
        }

        let mut platform = Self {
            root: root.to_owned(),
            config,
            warehouse,
            registry,
            broker,
            tasks,
            provenance,
            pipelines,
            residency,
            backends: BTreeMap::new(),
            clock,
        };
        let interrupted: Vec<TaskId> = platform
            .tasks
            .tasks()
            .filter(|t| t.state == TaskState::Requested && t.dispatched_at.is_some())
            .map(|t| t.id.clone())
            .collect();
        for id in interrupted {
            log::warn!("task {id} was mid-dispatch at shutdown");
            platform.fail(&id, "dispatch_interrupted", None, clock)?;
        }
        Ok(platform)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &PlatformConfig {
        &self.config
    }

    pub fn now(&self) -> Tick {
        self.clock
    }

    pub fn warehouse(&self) -> &Warehouse {
        &self.warehouse
    }

    pub fn registry(&self) -> &AppRegistry {
        &self.registry
    }

    pub fn broker(&self) -> &ResourceBroker {
        &self.broker
    }

    pub fn tasks(&self) -> &TaskStore {
        &self.tasks
    }

    pub fn provenance(&self) -> &ProvenanceStore {
        &self.provenance
    }

    pub fn pipelines(&self) -> &PipelineStore {
        &self.pipelines
    }

    pub fn residency(&self) -> &Residency {
        &self.residency
    }

    // ---- warehouse ----

    pub fn create_project(&mut self, owner: &UserId, name: &str) -> Result<Project> {
        self.warehouse.create_project(owner, name)
    }

    pub fn update_project(&mut self, id: &ProjectId, update: ProjectUpdate) -> Result<Project> {
        self.warehouse.update_project(id, update)
    }

    pub fn register_datatype(&mut self, name: &str, file_spec: Vec<FileSpec>, flags: DatatypeFlags) -> Result<Datatype> {
        self.warehouse.register_datatype(name, file_spec, flags)
    }

    /// Archives user-supplied data. Uploaded objects are provenance roots.
    pub fn upload_object(&mut self, mut req: ArchiveRequest) -> Result<DataObject> {
        req.provenance_task = None;
        self.warehouse.archive_object(req, self.clock)
    }

    // ---- apps ----

    pub fn register_app(&mut self, desc: AppDescriptor) -> Result<App> {
        let wh = &self.warehouse;
        self.registry.register_app(desc, |d| wh.datatype(d).is_ok())
    }

    /// Registers the service whose `app.json` sits in `dir`.
    pub fn register_service_dir(&mut self, dir: &Path) -> Result<App> {
        let desc = AppDescriptor::from_service_dir(dir)?;
        self.register_app(desc)
    }

    /// Writes a synthetic service into `dir` and registers it.
    pub fn register_synthetic_app(&mut self, dir: &Path, app: &SyntheticApp) -> Result<App> {
        for slot in app.inputs.iter().chain(app.outputs.iter().map(|o| &o.slot)) {
            self.warehouse.datatype(&slot.datatype)?;
        }
        let desc = sim::write_service(dir, app)?;
        self.register_app(desc)
    }

    /// Smart docking of staged objects against an app.
    pub fn dock(&self, app: &AppId, staged: &[ObjectId]) -> Result<DockingResult> {
        let app = self.registry.app(app)?;
        let objects = staged
            .iter()
            .map(|o| self.warehouse.object(o).cloned())
            .collect::<Result<Vec<_>>>()?;
        Ok(registry::check_docking(app, &objects))
    }

    /// Bindings for an accepted docking; rejected or ambiguous staging is an error.
    pub fn bind_staged(&self, app: &AppId, staged: &[ObjectId]) -> Result<BTreeMap<String, Binding>> {
        let result = self.dock(app, staged)?;
        match result.verdict {
            Verdict::Accepted => Ok(result
                .bindings
                .into_iter()
                .map(|(slot, obj)| (slot, Binding::Object(obj)))
                .collect()),
            _ => Err(Error::Docking { reasons: result.reasons }),
        }
    }

    pub fn compatible_apps(&self, staged: &[ObjectId]) -> Result<Vec<App>> {
        let objects = staged
            .iter()
            .map(|o| self.warehouse.object(o).cloned())
            .collect::<Result<Vec<_>>>()?;
        Ok(registry::compatible_apps(&objects, self.registry.apps())
            .into_iter()
            .cloned()
            .collect())
    }

    // ---- resources ----

    pub fn register_resource(&mut self, desc: ResourceDescriptor) -> Result<Resource> {
        if let crate::broker::BackendSpec::Sim(p) = &desc.backend {
            p.validate()?;
        }
        self.broker.register_resource(desc)
    }

    pub fn enable_service(&mut self, resource: &ResourceId, app: &AppId, default_score: i64) -> Result<Resource> {
        self.broker.enable_service(resource, app, default_score)
    }

    fn backend(&mut self, id: &ResourceId) -> Result<&mut Box<dyn ExecBackend>> {
        if !self.backends.contains_key(id) {
            let spec = self.broker.resource(id)?.backend.clone();
            self.backends
                .insert(id.clone(), sim::backend_for(id.as_str(), &spec));
        }
        Ok(self.backends.get_mut(id).expect("backend just inserted"))
    }

    /// Probes a resource and records its status.
    pub fn monitor_resource(&mut self, id: &ResourceId) -> Result<ResourceStatus> {
        let status = self.backend(id)?.probe();
        self.broker.set_status(id, status)?;
        Ok(status)
    }

    /// Flips the `down` flag of a simulated resource and re-probes it.
    pub fn sim_set_down(&mut self, id: &ResourceId, down: bool) -> Result<ResourceStatus> {
        let mut spec = self.broker.resource(id)?.backend.clone();
        match &mut spec {
            crate::broker::BackendSpec::Sim(p) => p.down = down,
            crate::broker::BackendSpec::Process => {
                return Err(Error::validation(format!("resource {id} is not simulated")))
            }
        }
        self.broker.update_backend(id, spec)?;
        self.backends.remove(id);
        self.monitor_resource(id)
    }

    // ---- tasks ----

    pub fn create_instance(&mut self, project: &ProjectId) -> Result<Instance> {
        self.warehouse.project(project)?;
        self.tasks.create_instance(project.clone(), self.clock)
    }

    pub fn submit_task(&mut self, req: TaskRequest) -> Result<Task> {
        let instance = self.tasks.instance(&req.instance)?.clone();
        let app = self.registry.app(&req.app)?.clone();
        let config = app.apply_config(&req.config)?;

        let mut deps: Vec<TaskId> = Vec::new();
        for d in &req.deps {
            let parent = self.tasks.task(d)?;
            if parent.instance != instance.id {
                return Err(Error::validation(format!(
                    "dependency {d} belongs to instance {}, not {}",
                    parent.instance, instance.id
                )));
            }
            if !deps.contains(d) {
                deps.push(d.clone());
            }
        }

        let mut reasons = Vec::new();
        let mut subject = req.subject.clone();
        let mut session = req.session.clone();
        for (slot_id, binding) in &req.bindings {
            let slot = app.input_slot(slot_id).ok_or_else(|| {
                Error::validation(format!("app {} has no input slot {slot_id}", app.id))
            })?;
            match binding {
                Binding::Object(o) => {
                    let obj = self.warehouse.object(o)?;
                    if obj.project != instance.project {
                        return Err(Error::validation(format!(
                            "object {o} belongs to project {}, not {}",
                            obj.project, instance.project
                        )));
                    }
                    if !slot.accepts(obj) {
                        reasons.push(format!(
                            "slot {slot_id}: object {o} ({}) is not compatible",
                            obj.datatype
                        ));
                    }
                    subject.get_or_insert_with(|| obj.subject.clone());
                    if session.is_none() {
                        session = obj.session.clone();
                    }
                }
                Binding::TaskOutput { task, slot: out } => {
                    let parent = self.tasks.task(task)?;
                    if parent.instance != instance.id {
                        return Err(Error::validation(format!(
                            "task {task} belongs to instance {}, not {}",
                            parent.instance, instance.id
                        )));
                    }
                    let parent_app = self.registry.app(&parent.app)?;
                    let produced = parent_app.output_slot(out).ok_or_else(|| {
                        Error::validation(format!("app {} has no output slot {out}", parent_app.id))
                    })?;
                    let compatible = produced.datatype == slot.datatype
                        && slot
                            .required_datatype_tags
                            .iter()
                            .all(|t| produced.required_datatype_tags.contains(t));
                    if !compatible {
                        reasons.push(format!(
                            "slot {slot_id}: output {task}:{out} ({}) is not compatible",
                            produced.datatype
                        ));
                    }
                    if let Some(s) = &parent.subject {
                        subject.get_or_insert_with(|| s.clone());
                    }
                    if session.is_none() {
                        session = parent.session.clone();
                    }
                    if !deps.contains(task) {
                        deps.push(task.clone());
                    }
                }
            }
        }
        for slot in &app.input_slots {
            if !slot.optional && !req.bindings.contains_key(&slot.slot_id) {
                reasons.push(format!("slot {}: no compatible object", slot.slot_id));
            }
        }
        if !reasons.is_empty() {
            return Err(Error::Docking { reasons });
        }
        if let Some(r) = &req.preferred_resource {
            self.broker.resource(r)?;
        }

        let now = self.clock;
        let task = Task {
            id: self.tasks.next_task_id(),
            instance: instance.id,
            project: instance.project,
            app: app.id,
            submitter: req.submitter,
            service_digest: None,
            config,
            bindings: req.bindings,
            inputs: BTreeMap::new(),
            deps,
            state: TaskState::Requested,
            resource: None,
            preferred_resource: req.preferred_resource,
            subject,
            session,
            output_tags: req.output_tags,
            rule: req.rule,
            work_dir: None,
            fail_reason: None,
            note: None,
            job: None,
            dispatched_at: None,
            unknown_polls: 0,
            staging: None,
            outputs: BTreeMap::new(),
            timestamps: BTreeMap::from([(TaskState::Requested, now)]),
        };
        self.tasks.insert_new(task.clone(), now)?;
        Ok(task)
    }

    /// Adds dependencies to a requested task, refusing any that would close a cycle.
    pub fn add_deps(&mut self, id: &TaskId, deps: &[TaskId]) -> Result<Task> {
        let mut task = self.tasks.task(id)?.clone();
        if task.state != TaskState::Requested {
            return Err(Error::validation(format!("task {id} is {}; only requested tasks take new deps", task.state)));
        }
        for d in deps {
            let parent = self.tasks.task(d)?;
            if parent.instance != task.instance {
                return Err(Error::validation(format!("dependency {d} is in another instance")));
            }
            if d == id || self.tasks.depends_on(d, id) {
                return Err(Error::Cycle(format!("{id} -> {d} closes a cycle")));
            }
        }
        for d in deps {
            if !task.deps.contains(d) {
                task.deps.push(d.clone());
            }
        }
        self.tasks.update(task.clone())?;
        Ok(task)
    }

    pub fn stop_task(&mut self, id: &TaskId) -> Result<Task> {
        let now = self.clock;
        let task = self.tasks.task(id)?.clone();
        match task.state {
            TaskState::Requested => {}
            TaskState::Running => {
                if let (Some(job), Some(dir)) = (&task.job, &task.work_dir) {
                    let backend = self.backend(&job.resource)?;
                    if let Err(e) = backend.stop(&HookContext { task: id, work_dir: dir, now }) {
                        log::warn!("task {id}: stop hook: {e}");
                    }
                }
            }
            other => {
                return Err(Error::InvalidTransition {
                    task: id.to_string(),
                    from: other.to_string(),
                    to: TaskState::Stopped.to_string(),
                })
            }
        }
        self.tasks.transition(id, TaskState::Stopped, None, now)?;
        self.propagate_failures(now)?;
        Ok(self.tasks.task(id)?.clone())
    }

    pub fn remove_task(&mut self, id: &TaskId) -> Result<Task> {
        let now = self.clock;
        self.tasks.transition(id, TaskState::Removed, None, now)?;
        self.propagate_failures(now)?;
        Ok(self.tasks.task(id)?.clone())
    }

    pub fn task_events(&self, id: &TaskId) -> Result<Vec<Transition>> {
        self.tasks.task(id)?;
        Ok(self.tasks.task_events(id))
    }

    fn fail(&mut self, id: &TaskId, reason: &str, note: Option<String>, now: Tick) -> Result<Transition> {
        if let Some(note) = note {
            let mut t = self.tasks.task(id)?.clone();
            t.note = Some(note);
            self.tasks.update(t)?;
        }
        self.tasks.transition(id, TaskState::Failed, Some(reason.to_owned()), now)
    }

    /// Explicit deps plus producers of bound objects.
    fn data_deps(&self, task: &Task) -> Vec<TaskId> {
        task.data_deps(|o| self.warehouse.object(o).ok().and_then(|o| o.provenance_task.clone()))
    }

    // ---- scheduler ----

    /// Advances the logical clock by one and runs a scheduler pass.
    pub fn tick(&mut self) -> Result<Vec<Transition>> {
        let now = self.clock + 1;
        self.scheduler_tick(now)
    }

    /// One scheduler pass: probe resources, poll running tasks, propagate
    /// failures, dispatch ready tasks.
    pub fn scheduler_tick(&mut self, now: Tick) -> Result<Vec<Transition>> {
        self.clock = self.clock.max(now);
        let now = self.clock;
        let ids: Vec<ResourceId> = self.broker.resources().map(|r| r.id.clone()).collect();
        for r in &ids {
            self.monitor_resource(r)?;
        }

        let mut out = Vec::new();
        let running: Vec<TaskId> = self
            .tasks
            .tasks()
            .filter(|t| t.state == TaskState::Running)
            .map(|t| t.id.clone())
            .collect();
        for id in running {
            out.extend(self.poll(&id, now)?);
        }
        out.extend(self.propagate_failures(now)?);

        let ready: Vec<TaskId> = self
            .tasks
            .tasks()
            .filter(|t| t.state == TaskState::Requested)
            .filter(|t| {
                t.deps.iter().all(|d| {
                    self.tasks
                        .task(d)
                        .is_ok_and(|p| p.state == TaskState::Finished)
                })
            })
            .map(|t| t.id.clone())
            .collect();
        for id in ready {
            out.extend(self.dispatch(&id, now)?);
        }
        out.extend(self.propagate_failures(now)?);
        persist::write_json(&self.root.join("clock.json"), &Clock { now })?;
        Ok(out)
    }

    fn propagate_failures(&mut self, now: Tick) -> Result<Vec<Transition>> {
        let mut out = Vec::new();
        loop {
            let doomed: Vec<TaskId> = self
                .tasks
                .tasks()
                .filter(|t| t.state == TaskState::Requested)
                .filter(|t| {
                    t.deps.iter().any(|d| {
                        self.tasks
                            .task(d)
                            .is_ok_and(|p| p.state.dooms_children())
                    })
                })
                .map(|t| t.id.clone())
                .collect();
            if doomed.is_empty() {
                return Ok(out);
            }
            for id in doomed {
                out.push(self.fail(&id, "parent_failed", None, now)?);
            }
        }
    }

    fn dispatch(&mut self, id: &TaskId, now: Tick) -> Result<Vec<Transition>> {
        let mut task = self.tasks.task(id)?.clone();
        let app = self.registry.app(&task.app)?.clone();
        let avoid_public = self.warehouse.project(&task.project)?.avoid_public_resources;
        let req = ScoreRequest {
            task: id.clone(),
            service: app.id.clone(),
            deps: self.data_deps(&task),
            preferred_resource: task.preferred_resource.clone(),
        };
        let ctx = ScoreContext {
            residency: &self.residency,
            submitter: &task.submitter,
            avoid_public_resources: avoid_public,
            options: self.config.scoring,
        };
        let selection = match self.broker.select_resource(&req, &ctx) {
            Ok(s) => s,
            Err(Error::NoResource { .. }) => {
                let note = "no qualified resource; retrying next tick".to_owned();
                if task.note.as_deref() != Some(note.as_str()) {
                    task.note = Some(note);
                    self.tasks.update(task)?;
                }
                return Ok(Vec::new());
            }
            Err(e) => return Err(e),
        };
        let resource = selection.resource;

        let work_dir = self
            .root
            .join("resources")
            .join(resource.as_str())
            .join("tasks")
            .join(id.as_str());
        if work_dir.exists() {
            fs::remove_dir_all(&work_dir).map_err(|e| Error::storage(&work_dir, e))?;
        }
        fs::create_dir_all(&work_dir).map_err(|e| Error::storage(&work_dir, e))?;
        persist::write_atomic(&work_dir.join("_resource_selection.txt"), selection.report.as_bytes())?;
        task.resource = Some(resource.clone());
        task.work_dir = Some(work_dir.clone());
        task.note = None;

        let mut inputs = BTreeMap::new();
        for (slot, binding) in task.bindings.clone() {
            let obj = match binding {
                Binding::Object(o) => Some(o.clone()),
                Binding::TaskOutput { task: parent, slot: out } => {
                    self.tasks.task(&parent)?.outputs.get(&out).cloned()
                }
            };
            match obj {
                Some(o) => {
                    inputs.insert(slot, o);
                }
                None => {
                    self.tasks.update(task)?;
                    let note = format!("slot {slot}: upstream output missing");
                    return Ok(vec![self.fail(id, "staging_failed", Some(note), now)?]);
                }
            }
        }
        task.inputs = inputs;

        match self.stage_inputs(&task, &resource, &work_dir) {
            Ok(report) => task.staging = Some(report),
            Err(e) => {
                self.tasks.update(task)?;
                return Ok(vec![self.fail(id, "staging_failed", Some(e.to_string()), now)?]);
            }
        }
        match registry::resolve_service(&app, &work_dir) {
            Ok(svc) => task.service_digest = Some(svc.digest),
            Err(e) => {
                self.tasks.update(task)?;
                return Ok(vec![self.fail(id, "start_failed", Some(e.to_string()), now)?]);
            }
        }
        persist::write_atomic(&work_dir.join("config.json"), render_config_json(&task, &app).as_bytes())?;

        // Durable before `start` runs: a crash from here on never re-runs it.
        task.dispatched_at = Some(now);
        self.tasks.update(task.clone())?;

        let started = self
            .backend(&resource)?
            .start(&HookContext { task: id, work_dir: &work_dir, now });
        match started {
            Ok(job_id) => {
                task.job = Some(JobHandle {
                    task: id.clone(),
                    resource: resource.clone(),
                    backend_job_id: job_id,
                });
                task.unknown_polls = 0;
                self.tasks.update(task)?;
                Ok(vec![self.tasks.transition(id, TaskState::Running, None, now)?])
            }
            Err(e) => Ok(vec![self.fail(id, "start_failed", Some(e.to_string()), now)?]),
        }
    }

    /// Places every resolved input under `inputs/<slot>/`. Objects produced on
    /// `resource` are copied from the producer's work dir; the rest are fetched
    /// from the warehouse and counted as transfers.
    pub fn stage_inputs(&self, task: &Task, resource: &ResourceId, work_dir: &Path) -> Result<StagingReport> {
        let mut report = StagingReport::default();
        for (slot, obj) in &task.inputs {
            let dest = work_dir.join("inputs").join(slot);
            let local = self
                .local_copy_source(obj)
                .filter(|_| self.residency.object_resource(obj) == Some(resource));
            match local {
                Some(src) => {
                    digest::copy_tree(&src, &dest)
                        .map_err(|e| Error::Staging(format!("{obj}: {e}")))?;
                    report.local += 1;
                }
                None => {
                    self.warehouse
                        .fetch_object(obj, &dest)
                        .map_err(|e| Error::Staging(format!("{obj}: {e}")))?;
                    report.transfers += 1;
                    report.bytes += self.warehouse.object(obj)?.size;
                }
            }
        }
        Ok(report)
    }

    fn local_copy_source(&self, obj: &ObjectId) -> Option<PathBuf> {
        let producer = self.warehouse.object(obj).ok()?.provenance_task.clone()?;
        let task = self.tasks.task(&producer).ok()?;
        let slot = task.outputs.iter().find(|(_, o)| *o == obj)?.0;
        let dir = task.work_dir.as_ref()?.join("outputs").join(slot);
        dir.is_dir().then_some(dir)
    }

    /// Runs the `status` hook of a running task and applies the result.
    pub fn poll_task(&mut self, id: &TaskId) -> Result<TaskState> {
        let now = self.clock;
        self.poll(id, now)?;
        Ok(self.tasks.task(id)?.state)
    }

    fn poll(&mut self, id: &TaskId, now: Tick) -> Result<Vec<Transition>> {
        let mut task = self.tasks.task(id)?.clone();
        let (Some(job), Some(dir), TaskState::Running) = (task.job.clone(), task.work_dir.clone(), task.state) else {
            return Err(Error::validation(format!("task {id} has no live job")));
        };
        let code = match self
            .backend(&job.resource)?
            .status(&HookContext { task: id, work_dir: &dir, now })
        {
            Ok(c) => c,
            Err(e) => {
                log::warn!("task {id}: status: {e}");
                StatusCode::Unknown
            }
        };
        match code {
            StatusCode::Running => {
                if task.unknown_polls > 0 {
                    task.unknown_polls = 0;
                    self.tasks.update(task)?;
                }
                Ok(Vec::new())
            }
            StatusCode::Finished => match self.finalize_task(id, now) {
                Ok(_) => Ok(vec![self.tasks.transition(id, TaskState::Finished, None, now)?]),
                Err(e) => Ok(vec![self.fail(id, "invalid_output", Some(e.to_string()), now)?]),
            },
            StatusCode::Failed => Ok(vec![self.fail(id, "app_failed", None, now)?]),
            StatusCode::Unknown => {
                task.unknown_polls += 1;
                log::info!("task {id}: status unknown ({} in a row)", task.unknown_polls);
                let limit_hit = task.unknown_polls >= self.config.status_unknown_limit;
                self.tasks.update(task)?;
                if limit_hit {
                    Ok(vec![self.fail(id, "status_unknown", None, now)?])
                } else {
                    Ok(Vec::new())
                }
            }
        }
    }

    /// Validates and archives every output slot of a task whose job completed,
    /// then records provenance and residency. Nothing is archived unless every
    /// required slot validates.
    pub fn finalize_task(&mut self, id: &TaskId, now: Tick) -> Result<Vec<DataObject>> {
        let mut task = self.tasks.task(id)?.clone();
        if !task.outputs.is_empty() {
            return Err(Error::Conflict(format!("task {id} already finalized")));
        }
        let app = self.registry.app(&task.app)?.clone();
        let (Some(work_dir), Some(resource)) = (task.work_dir.clone(), task.resource.clone()) else {
            return Err(Error::validation(format!("task {id} never ran")));
        };
        let outputs = work_dir.join("outputs");
        let mut plan = Vec::new();
        for slot in &app.output_slots {
            let dir = outputs.join(&slot.slot_id);
            if !dir.is_dir() {
                if slot.optional {
                    continue;
                }
                return Err(Error::Rejected {
                    datatype: slot.datatype.clone(),
                    violations: vec![format!("outputs/{} missing", slot.slot_id)],
                });
            }
            let files = digest::list_files(&dir)?;
            let check = validate_object(&files, self.warehouse.datatype(&slot.datatype)?);
            if !check.is_ok() {
                return Err(Error::Rejected {
                    datatype: slot.datatype.clone(),
                    violations: check.violations,
                });
            }
            plan.push((slot.clone(), dir));
        }

        let config_path = work_dir.join("config.json");
        let config_json = fs::read_to_string(&config_path).map_err(|e| Error::storage(&config_path, e))?;
        let subject = task.subject.clone().unwrap_or_else(|| "unassigned".to_owned());
        let mut objects = Vec::new();
        for (slot, dir) in plan {
            let obj = self.warehouse.archive_object(
                ArchiveRequest {
                    project: task.project.clone(),
                    datatype: slot.datatype.clone(),
                    source_dir: dir,
                    datatype_tags: slot.required_datatype_tags.clone(),
                    tags: task.output_tags.clone(),
                    subject: subject.clone(),
                    session: task.session.clone(),
                    provenance_task: Some(id.clone()),
                },
                now,
            )?;
            task.outputs.insert(slot.slot_id.clone(), obj.id.clone());
            objects.push((slot.slot_id, obj));
        }
        self.tasks.update(task.clone())?;

        let mut timestamps = task.timestamps.clone();
        timestamps.insert(TaskState::Finished, now);
        let records = objects
            .iter()
            .map(|(slot, obj)| ProvenanceRecord {
                object: obj.id.clone(),
                task: id.clone(),
                app: app.id.clone(),
                app_version: app.version.clone(),
                service_digest: task.service_digest.clone().unwrap_or_default(),
                config: task.config.clone(),
                config_json: config_json.clone(),
                input_objects: task.inputs.values().cloned().collect::<BTreeSet<_>>().into_iter().collect(),
                inputs: task.inputs.clone(),
                output_slot: slot.clone(),
                resource: resource.clone(),
                timestamps: timestamps.clone(),
            })
            .collect();
        self.provenance.record(records)?;

        self.residency.record_task(id.clone(), resource);
        for (_, obj) in &objects {
            self.residency.record_object(obj.id.clone(), id.clone());
        }
        Ok(objects.into_iter().map(|(_, o)| o).collect())
    }

    // ---- provenance ----

    pub fn provenance_graph(&self, object: &ObjectId) -> Result<Graph> {
        self.warehouse.object(object)?;
        Ok(self.provenance.graph(object))
    }

    pub fn reproduce_script(&self, object: &ObjectId) -> Result<String> {
        let target = self.warehouse.object(object)?;
        Ok(provenance::reproduce_script(&self.provenance, target, |o| {
            self.warehouse.object(o).ok().cloned()
        }))
    }

    pub fn create_publication(
        &mut self,
        project: &ProjectId,
        objects: &[ObjectId],
        apps: &[AppId],
        notebooks: Vec<String>,
    ) -> Result<PublicationRecord> {
        self.warehouse.project(project)?;
        let objects = objects
            .iter()
            .map(|o| self.warehouse.object(o).cloned())
            .collect::<Result<Vec<_>>>()?;
        let apps = apps
            .iter()
            .map(|a| {
                self.registry.app(a).map(|a| AppSummary {
                    id: a.id.clone(),
                    name: a.name.clone(),
                    version: a.version.clone(),
                    doi: a.doi.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.provenance
            .publish(project.clone(), &objects, apps, notebooks, self.clock)
    }
}
