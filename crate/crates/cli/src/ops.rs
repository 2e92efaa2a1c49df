//! Operations shared by the command line and the HTTP service.
//!
//! Every CLI subcommand and every API endpoint builds a [`Request`] and hands
//! it to [`execute`], so both surfaces have identical effects on a store.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use datadock_core::broker::ResourceDescriptor;
use datadock_core::orchestrator::{Binding, TaskRequest};
use datadock_core::pipeline::RuleDefinition;
use datadock_core::reduce::{build_reference, classify_table};
use datadock_core::sim::{run_scenario, ScenarioSpec};
use datadock_core::warehouse::{ArchiveRequest, DatatypeFlags, FileSpec, ObjectQuery, ProjectUpdate, Visibility};
use datadock_core::{
    AppId, Error, InstanceId, ObjectId, Platform, ProjectId, ReferenceRange, ResourceId, Result, RuleId, TaskId,
    UserId,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Request {
    ProjectCreate {
        name: String,
        owner: Option<UserId>,
        #[serde(default)]
        visibility: Option<Visibility>,
        #[serde(default)]
        avoid_public_resources: Option<bool>,
        #[serde(default)]
        dua_text: Option<String>,
    },
    ProjectList,
    DatatypeRegister {
        name: String,
        file_spec: Vec<FileSpec>,
        #[serde(default)]
        is_statistical_feature: bool,
        #[serde(default)]
        bids_compatible: bool,
        #[serde(default)]
        feature_table: Option<datadock_core::warehouse::FeatureTable>,
    },
    DatatypeList,
    DataUpload {
        project: ProjectId,
        datatype: String,
        source_dir: PathBuf,
        #[serde(default)]
        datatype_tags: Vec<String>,
        #[serde(default)]
        tags: Vec<String>,
        subject: String,
        #[serde(default)]
        session: Option<String>,
    },
    DataQuery {
        project: ProjectId,
        #[serde(default)]
        datatype: Option<String>,
        #[serde(default)]
        include_tags: Vec<String>,
        #[serde(default)]
        exclude_tags: Vec<String>,
        #[serde(default)]
        subject: Option<String>,
    },
    DataGet {
        id: ObjectId,
    },
    DataFetch {
        id: ObjectId,
        dest: PathBuf,
    },
    AppRegister {
        service_dir: PathBuf,
    },
    AppList,
    TaskSubmit {
        app: AppId,
        #[serde(default)]
        project: Option<ProjectId>,
        #[serde(default)]
        instance: Option<InstanceId>,
        submitter: Option<UserId>,
        /// `slot -> d00000001` or `slot -> t00000002:out`.
        #[serde(default)]
        bindings: BTreeMap<String, String>,
        /// Objects to match against the app's slots automatically.
        #[serde(default)]
        staged: Vec<ObjectId>,
        #[serde(default)]
        config: BTreeMap<String, Value>,
        #[serde(default)]
        deps: Vec<TaskId>,
        #[serde(default)]
        preferred_resource: Option<ResourceId>,
        #[serde(default)]
        output_tags: Vec<String>,
    },
    TaskStatus {
        id: TaskId,
    },
    TaskStop {
        id: TaskId,
    },
    TaskEvents {
        id: TaskId,
    },
    Tick {
        #[serde(default = "one")]
        count: u64,
    },
    RuleDefine {
        rule: RuleDefinition,
    },
    RuleRun {
        project: ProjectId,
        #[serde(default = "one")]
        ticks: u64,
    },
    RuleRearm {
        id: RuleId,
        subject: String,
    },
    ResourceRegister {
        resource: ResourceDescriptor,
    },
    ResourceEnable {
        id: ResourceId,
        app: AppId,
        score: i64,
    },
    ResourceList,
    ReferenceBuild {
        project: ProjectId,
        datatype: String,
        #[serde(default)]
        source: Option<String>,
        /// Overrides the configured outlier threshold.
        #[serde(default)]
        k: Option<f64>,
        #[serde(default)]
        no_curation: bool,
        #[serde(default)]
        out: Option<PathBuf>,
    },
    ReferenceClassify {
        project: ProjectId,
        reference: PathBuf,
    },
    Collate {
        project: ProjectId,
        #[serde(default)]
        datatypes: Vec<String>,
        #[serde(default)]
        out_dir: Option<PathBuf>,
        #[serde(default = "tidy_stem")]
        stem: String,
    },
    Provenance {
        id: ObjectId,
    },
    Reproduce {
        id: ObjectId,
    },
    PubCreate {
        project: ProjectId,
        objects: Vec<ObjectId>,
        #[serde(default)]
        apps: Vec<AppId>,
        #[serde(default)]
        notebooks: Vec<String>,
    },
    SimRun {
        scenario: ScenarioSpec,
        #[serde(default)]
        include_trace: bool,
    },
}

fn one() -> u64 {
    1
}

fn tidy_stem() -> String {
    "features".to_owned()
}

impl Request {
    /// Read-only requests never touch the store's write paths.
    pub fn is_mutating(&self) -> bool {
        !matches!(
            self,
            Request::ProjectList
                | Request::DatatypeList
                | Request::DataQuery { .. }
                | Request::DataGet { .. }
                | Request::AppList
                | Request::TaskStatus { .. }
                | Request::TaskEvents { .. }
                | Request::ResourceList
                | Request::ReferenceClassify { .. }
                | Request::Provenance { .. }
                | Request::Reproduce { .. }
        )
    }

    /// Fills the acting user from a transport-level identity when the request has none.
    pub fn with_user(mut self, user: &UserId) -> Self {
        match &mut self {
            Request::ProjectCreate { owner: u @ None, .. } | Request::TaskSubmit { submitter: u @ None, .. } => {
                *u = Some(user.clone());
            }
            _ => {}
        }
        self
    }
}

fn to_value<T: Serialize>(v: T) -> Result<Value> {
    Ok(serde_json::to_value(v)?)
}

fn required_user(u: Option<UserId>, what: &str) -> Result<UserId> {
    u.ok_or_else(|| Error::Validation(format!("{what} is required")))
}

/// Runs one request against the platform and returns its JSON result.
pub fn execute(p: &mut Platform, req: Request) -> Result<Value> {
    match req {
        Request::ProjectCreate { name, owner, visibility, avoid_public_resources, dua_text } => {
            let owner = required_user(owner, "owner")?;
            let project = p.create_project(&owner, &name)?;
            if visibility.is_some() || avoid_public_resources.is_some() || dua_text.is_some() {
                let update = ProjectUpdate {
                    visibility,
                    avoid_public_resources,
                    dua_text,
                    ..Default::default()
                };
                return to_value(p.update_project(&project.id, update)?);
            }
            to_value(project)
        }
        Request::ProjectList => to_value(p.warehouse().projects().collect::<Vec<_>>()),
        Request::DatatypeRegister { name, file_spec, is_statistical_feature, bids_compatible, feature_table } => {
            let flags = DatatypeFlags { is_statistical_feature, bids_compatible, feature_table };
            to_value(p.register_datatype(&name, file_spec, flags)?)
        }
        Request::DatatypeList => to_value(p.warehouse().datatypes().collect::<Vec<_>>()),
        Request::DataUpload { project, datatype, source_dir, datatype_tags, tags, subject, session } => {
            to_value(p.upload_object(ArchiveRequest {
                project,
                datatype,
                source_dir,
                datatype_tags,
                tags,
                subject,
                session,
                provenance_task: None,
            })?)
        }
        Request::DataQuery { project, datatype, include_tags, exclude_tags, subject } => {
            let query = ObjectQuery { datatype, include_tags, exclude_tags, subject };
            to_value(p.warehouse().query_objects(&project, &query)?)
        }
        Request::DataGet { id } => to_value(p.warehouse().object(&id)?),
        Request::DataFetch { id, dest } => {
            let tree = p.warehouse().fetch_object(&id, &dest)?;
            Ok(json!({ "object": id, "dest": dest, "files": tree }))
        }
        Request::AppRegister { service_dir } => to_value(p.register_service_dir(&service_dir)?),
        Request::AppList => to_value(p.registry().apps().collect::<Vec<_>>()),
        Request::TaskSubmit {
            app,
            project,
            instance,
            submitter,
            bindings,
            staged,
            config,
            deps,
            preferred_resource,
            output_tags,
        } => {
            let submitter = required_user(submitter, "submitter")?;
            let instance = match (instance, project) {
                (Some(i), _) => i,
                (None, Some(project)) => p.create_instance(&project)?.id,
                (None, None) => return Err(Error::Validation("instance or project is required".into())),
            };
            let mut req = TaskRequest::new(instance, app.clone(), submitter);
            if !staged.is_empty() {
                req.bindings = p.bind_staged(&app, &staged)?;
            }
            for (slot, b) in &bindings {
                req.bindings.insert(slot.clone(), Binding::parse(b));
            }
            req.config = config;
            req.deps = deps;
            req.preferred_resource = preferred_resource;
            req.output_tags = output_tags;
            to_value(p.submit_task(req)?)
        }
        Request::TaskStatus { id } => to_value(p.tasks().task(&id)?),
        Request::TaskStop { id } => to_value(p.stop_task(&id)?),
        Request::TaskEvents { id } => to_value(p.task_events(&id)?),
        Request::Tick { count } => {
            let mut transitions = Vec::new();
            for _ in 0..count {
                transitions.extend(p.tick()?);
            }
            Ok(json!({ "now": p.now(), "transitions": transitions }))
        }
        Request::RuleDefine { rule } => to_value(p.define_rule(rule)?),
        Request::RuleRun { project, ticks } => to_value(p.run_rules(&project, ticks)?),
        Request::RuleRearm { id, subject } => to_value(p.rearm_rule(&id, &subject)?),
        Request::ResourceRegister { resource } => to_value(p.register_resource(resource)?),
        Request::ResourceEnable { id, app, score } => to_value(p.enable_service(&id, &app, score)?),
        Request::ResourceList => to_value(p.broker().resources().collect::<Vec<_>>()),
        Request::ReferenceBuild { project, datatype, source, k, no_curation, out } => {
            let collation = p.collate_features::<f64>(&project, std::slice::from_ref(&datatype))?;
            let k = if no_curation { None } else { Some(k.unwrap_or(p.config().outlier_k)) };
            let source = source.unwrap_or_else(|| project.to_string());
            let (reference, diagnostics) = build_reference(&collation.table, &source, k)?;
            if let Some(out) = &out {
                reference.write(out)?;
            }
            Ok(json!({ "reference": reference, "diagnostics": diagnostics }))
        }
        Request::ReferenceClassify { project, reference } => {
            let reference = ReferenceRange::from_json(&fs::read_to_string(&reference)?)?;
            let collation = p.collate_features::<f64>(&project, std::slice::from_ref(&reference.datatype))?;
            to_value(classify_table(&collation.table, &reference))
        }
        Request::Collate { project, datatypes, out_dir, stem } => {
            let collation = p.collate_features::<f64>(&project, &datatypes)?;
            if let Some(dir) = &out_dir {
                collation.write(dir, &stem)?;
            }
            Ok(json!({
                "rows": collation.table.rows.len(),
                "tsv": collation.table.to_tsv(),
                "sidecar": collation.sidecar,
                "diagnostics": collation.diagnostics,
            }))
        }
        Request::Provenance { id } => to_value(p.provenance_graph(&id)?),
        Request::Reproduce { id } => Ok(Value::String(p.reproduce_script(&id)?)),
        Request::PubCreate { project, objects, apps, notebooks } => {
            to_value(p.create_publication(&project, &objects, &apps, notebooks)?)
        }
        Request::SimRun { scenario, include_trace } => {
            let mut metrics = run_scenario(&scenario)?;
            if !include_trace {
                metrics.trace.clear();
            }
            to_value(metrics)
        }
    }
}

/// A transport-neutral error: HTTP status, stable kind and message.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub kind: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reasons: Vec<String>,
}

impl ApiError {
    pub fn new(status: u16, kind: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            kind: kind.to_owned(),
            message: message.into(),
            reasons: Vec::new(),
        }
    }

    pub fn malformed(message: impl Into<String>) -> Self {
        Self::new(400, "malformed_request", message)
    }
}

impl From<&Error> for ApiError {
    fn from(e: &Error) -> Self {
        let (status, kind) = match e {
            Error::NotFound { .. } => (404, "not_found"),
            Error::Validation(_) => (400, "validation"),
            Error::Json(_) => (400, "malformed_request"),
            Error::Conflict(_) => (409, "conflict"),
            Error::InvalidTransition { .. } => (409, "invalid_transition"),
            Error::Cycle(_) => (409, "cycle"),
            Error::Rejected { .. } => (422, "rejected"),
            Error::Docking { .. } => (422, "docking"),
            Error::Contract(_) | Error::Source(_) => (422, "service"),
            Error::InsufficientData(_) | Error::UndefinedCorrelation | Error::DegenerateFit(_) => {
                (422, "insufficient_data")
            }
            Error::NoResource { .. } => (503, "no_resource"),
            Error::Integrity { .. } => (500, "integrity"),
            Error::Staging(_) | Error::Storage { .. } | Error::Io(_) => (500, "storage"),
        };
        let mut out = ApiError::new(status, kind, e.to_string());
        match e {
            Error::Docking { reasons } => out.reasons = reasons.clone(),
            Error::Rejected { violations, .. } => out.reasons = violations.clone(),
            _ => {}
        }
        out
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError::from(&e)
    }
}

/// The uniform response envelope.
pub fn envelope(result: &std::result::Result<Value, ApiError>) -> Value {
    match result {
        Ok(data) => json!({ "ok": true, "data": data }),
        Err(e) => json!({ "ok": false, "error": e }),
    }
}
