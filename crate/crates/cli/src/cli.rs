//! Argument parsing and text rendering for the `datadock` binary.

use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use datadock_core::warehouse::{FeatureTable, FileSpec, Visibility};
use datadock_core::{AppId, InstanceId, ObjectId, ProjectId, ResourceId, RuleId, TaskId, UserId};
use serde::de::DeserializeOwned;
use serde_json::Value;

use crate::ops::Request;

#[derive(Debug, Parser)]
#[command(name = "datadock", version, about = "Data-aware workflow orchestration")]
pub struct Cli {
    /// Store root directory.
    #[arg(long, env = "DATADOCK_ROOT", default_value = ".", global = true)]
    pub root: PathBuf,

    /// Platform config file (defaults to `<root>/config.json`).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Acting user for commands that record one.
    #[arg(long, env = "DATADOCK_USER", global = true)]
    pub user: Option<String>,

    /// Print machine-readable JSON.
    #[arg(long, global = true)]
    pub json: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    #[command(subcommand)]
    Project(ProjectCmd),
    #[command(subcommand)]
    Datatype(DatatypeCmd),
    #[command(subcommand)]
    Data(DataCmd),
    #[command(subcommand)]
    App(AppCmd),
    #[command(subcommand)]
    Task(TaskCmd),
    /// Advance the scheduler by logical ticks.
    Tick {
        #[arg(long, default_value_t = 1)]
        count: u64,
    },
    #[command(subcommand)]
    Rule(RuleCmd),
    #[command(subcommand)]
    Resource(ResourceCmd),
    #[command(subcommand)]
    Reference(ReferenceCmd),
    /// Collate statistical-feature objects into a tidy table.
    Collate {
        #[arg(long)]
        project: String,
        #[arg(long = "datatype")]
        datatypes: Vec<String>,
        /// Write `<stem>.tsv` and `<stem>.json` here instead of printing the table.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, default_value = "features")]
        stem: String,
    },
    /// Print an object's lineage graph.
    Provenance {
        object: String,
        /// Graphviz output instead of JSON.
        #[arg(long)]
        dot: bool,
    },
    /// Print the shell script that regenerates an object.
    Reproduce { object: String },
    #[command(subcommand)]
    Pub(PubCmd),
    #[command(subcommand)]
    Sim(SimCmd),
    /// Serve the JSON API and run the scheduler loop.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

#[derive(Debug, Subcommand)]
pub enum ProjectCmd {
    Create {
        #[arg(long)]
        name: String,
        #[arg(long)]
        owner: Option<String>,
        #[arg(long, value_enum)]
        visibility: Option<VisibilityArg>,
        /// Keep this project's tasks off public resources.
        #[arg(long)]
        avoid_public: bool,
        #[arg(long)]
        dua: Option<String>,
    },
    List,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum VisibilityArg {
    Private,
    Public,
}

#[derive(Debug, Subcommand)]
pub enum DatatypeCmd {
    Register {
        #[arg(long)]
        name: String,
        /// Required file pattern (repeatable).
        #[arg(long = "file")]
        files: Vec<String>,
        /// Optional file pattern (repeatable).
        #[arg(long = "optional")]
        optional: Vec<String>,
        #[arg(long)]
        statistical_feature: bool,
        #[arg(long)]
        bids: bool,
        /// JSON file describing the feature-table layout.
        #[arg(long)]
        feature_table: Option<PathBuf>,
    },
    List,
}

#[derive(Debug, Subcommand)]
pub enum DataCmd {
    Upload {
        #[arg(long)]
        project: String,
        #[arg(long)]
        datatype: String,
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        subject: String,
        #[arg(long)]
        session: Option<String>,
        #[arg(long = "tag")]
        tags: Vec<String>,
        #[arg(long = "datatype-tag")]
        datatype_tags: Vec<String>,
    },
    Query {
        #[arg(long)]
        project: String,
        #[arg(long)]
        datatype: Option<String>,
        #[arg(long = "tag")]
        include_tags: Vec<String>,
        #[arg(long = "exclude-tag")]
        exclude_tags: Vec<String>,
        #[arg(long)]
        subject: Option<String>,
    },
    Show {
        object: String,
    },
    Fetch {
        object: String,
        #[arg(long)]
        dest: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum AppCmd {
    /// Register the service whose `app.json` is in `dir`.
    Register { dir: PathBuf },
    List,
}

#[derive(Debug, Subcommand)]
pub enum TaskCmd {
    Submit(SubmitArgs),
    Status { task: String },
    Stop { task: String },
    /// Print the task's state transitions.
    Events { task: String },
}

#[derive(Debug, Args)]
pub struct SubmitArgs {
    #[arg(long)]
    pub app: String,
    /// Create a fresh workflow instance in this project.
    #[arg(long, conflicts_with = "instance")]
    pub project: Option<String>,
    #[arg(long)]
    pub instance: Option<String>,
    /// `slot=d00000001` or `slot=t00000002:out` (repeatable).
    #[arg(long = "bind", value_parser = parse_pair)]
    pub bindings: Vec<(String, String)>,
    /// Objects matched to slots automatically (repeatable).
    #[arg(long = "stage")]
    pub staged: Vec<String>,
    /// `key=<json value>` (repeatable); bare strings are accepted.
    #[arg(long = "set", value_parser = parse_pair)]
    pub settings: Vec<(String, String)>,
    #[arg(long = "dep")]
    pub deps: Vec<String>,
    #[arg(long = "prefer")]
    pub preferred_resource: Option<String>,
    #[arg(long = "output-tag")]
    pub output_tags: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum RuleCmd {
    /// Define a rule from a JSON rule file.
    Define { file: PathBuf },
    /// Evaluate the project's active rules while ticking the scheduler.
    Run {
        #[arg(long)]
        project: String,
        #[arg(long, default_value_t = 1)]
        ticks: u64,
    },
    /// Allow a failed subject to be resubmitted.
    Rearm {
        rule: String,
        #[arg(long)]
        subject: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum ResourceCmd {
    /// Register a resource from a JSON descriptor file.
    Register { file: PathBuf },
    Enable {
        resource: String,
        #[arg(long)]
        app: String,
        #[arg(long)]
        score: i64,
    },
    List,
}

#[derive(Debug, Subcommand)]
pub enum ReferenceCmd {
    Build {
        #[arg(long)]
        project: String,
        #[arg(long)]
        datatype: String,
        #[arg(long)]
        source: Option<String>,
        /// Outlier threshold in standard deviations.
        #[arg(long, conflicts_with = "no_curation")]
        k: Option<f64>,
        #[arg(long)]
        no_curation: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Classify {
        #[arg(long)]
        project: String,
        #[arg(long)]
        reference: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum PubCmd {
    Create {
        #[arg(long)]
        project: String,
        #[arg(long = "object", required = true)]
        objects: Vec<String>,
        #[arg(long = "app")]
        apps: Vec<String>,
        #[arg(long = "notebook")]
        notebooks: Vec<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum SimCmd {
    /// Run a scenario file and print its metrics.
    Run {
        scenario: PathBuf,
        /// Include the transition trace in the output.
        #[arg(long)]
        trace: bool,
    },
}

fn parse_pair(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.to_owned(), v.to_owned()))
        .ok_or_else(|| format!("expected key=value, got {s:?}"))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

impl Cli {
    /// Translates the parsed command line into a platform request.
    pub fn request(&self) -> Result<Request> {
        let user = self.user.as_deref().map(UserId::from);
        let req = match &self.command {
            Command::Project(ProjectCmd::Create { name, owner, visibility, avoid_public, dua }) => Request::ProjectCreate {
                name: name.clone(),
                owner: owner.as_deref().map(UserId::from).or(user),
                visibility: visibility.map(|v| match v {
                    VisibilityArg::Private => Visibility::Private,
                    VisibilityArg::Public => Visibility::Public,
                }),
                avoid_public_resources: avoid_public.then_some(true),
                dua_text: dua.clone(),
            },
            Command::Project(ProjectCmd::List) => Request::ProjectList,
            Command::Datatype(DatatypeCmd::Register { name, files, optional, statistical_feature, bids, feature_table }) => {
                let feature_table: Option<FeatureTable> = feature_table.as_deref().map(read_json).transpose()?;
                Request::DatatypeRegister {
                    name: name.clone(),
                    file_spec: files
                        .iter()
                        .map(FileSpec::required)
                        .chain(optional.iter().map(FileSpec::optional))
                        .collect(),
                    is_statistical_feature: *statistical_feature,
                    bids_compatible: *bids,
                    feature_table,
                }
            }
            Command::Datatype(DatatypeCmd::List) => Request::DatatypeList,
            Command::Data(DataCmd::Upload { project, datatype, dir, subject, session, tags, datatype_tags }) => {
                Request::DataUpload {
                    project: ProjectId::from(project.as_str()),
                    datatype: datatype.clone(),
                    source_dir: dir.clone(),
                    datatype_tags: datatype_tags.clone(),
                    tags: tags.clone(),
                    subject: subject.clone(),
                    session: session.clone(),
                }
            }
            Command::Data(DataCmd::Query { project, datatype, include_tags, exclude_tags, subject }) => Request::DataQuery {
                project: ProjectId::from(project.as_str()),
                datatype: datatype.clone(),
                include_tags: include_tags.clone(),
                exclude_tags: exclude_tags.clone(),
                subject: subject.clone(),
            },
            Command::Data(DataCmd::Show { object }) => Request::DataGet { id: ObjectId::from(object.as_str()) },
            Command::Data(DataCmd::Fetch { object, dest }) => Request::DataFetch {
                id: ObjectId::from(object.as_str()),
                dest: dest.clone(),
            },
            Command::App(AppCmd::Register { dir }) => Request::AppRegister { service_dir: dir.clone() },
            Command::App(AppCmd::List) => Request::AppList,
            Command::Task(TaskCmd::Submit(a)) => Request::TaskSubmit {
                app: AppId::from(a.app.as_str()),
                project: a.project.as_deref().map(ProjectId::from),
                instance: a.instance.as_deref().map(InstanceId::from),
                submitter: user,
                bindings: a.bindings.iter().cloned().collect(),
                staged: a.staged.iter().map(|s| ObjectId::from(s.as_str())).collect(),
                config: a
                    .settings
                    .iter()
                    .map(|(k, v)| {
                        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.clone()));
                        (k.clone(), value)
                    })
                    .collect::<BTreeMap<_, _>>(),
                deps: a.deps.iter().map(|d| TaskId::from(d.as_str())).collect(),
                preferred_resource: a.preferred_resource.as_deref().map(ResourceId::from),
                output_tags: a.output_tags.clone(),
            },
            Command::Task(TaskCmd::Status { task }) => Request::TaskStatus { id: TaskId::from(task.as_str()) },
            Command::Task(TaskCmd::Stop { task }) => Request::TaskStop { id: TaskId::from(task.as_str()) },
            Command::Task(TaskCmd::Events { task }) => Request::TaskEvents { id: TaskId::from(task.as_str()) },
            Command::Tick { count } => Request::Tick { count: *count },
            Command::Rule(RuleCmd::Define { file }) => Request::RuleDefine { rule: read_json(file)? },
            Command::Rule(RuleCmd::Run { project, ticks }) => Request::RuleRun {
                project: ProjectId::from(project.as_str()),
                ticks: *ticks,
            },
            Command::Rule(RuleCmd::Rearm { rule, subject }) => Request::RuleRearm {
                id: RuleId::from(rule.as_str()),
                subject: subject.clone(),
            },
            Command::Resource(ResourceCmd::Register { file }) => Request::ResourceRegister { resource: read_json(file)? },
            Command::Resource(ResourceCmd::Enable { resource, app, score }) => Request::ResourceEnable {
                id: ResourceId::from(resource.as_str()),
                app: AppId::from(app.as_str()),
                score: *score,
            },
            Command::Resource(ResourceCmd::List) => Request::ResourceList,
            Command::Reference(ReferenceCmd::Build { project, datatype, source, k, no_curation, out }) => {
                Request::ReferenceBuild {
                    project: ProjectId::from(project.as_str()),
                    datatype: datatype.clone(),
                    source: source.clone(),
                    k: *k,
                    no_curation: *no_curation,
                    out: out.clone(),
                }
            }
            Command::Reference(ReferenceCmd::Classify { project, reference }) => Request::ReferenceClassify {
                project: ProjectId::from(project.as_str()),
                reference: reference.clone(),
            },
            Command::Collate { project, datatypes, out_dir, stem } => Request::Collate {
                project: ProjectId::from(project.as_str()),
                datatypes: datatypes.clone(),
                out_dir: out_dir.clone(),
                stem: stem.clone(),
            },
            Command::Provenance { object, .. } => Request::Provenance { id: ObjectId::from(object.as_str()) },
            Command::Reproduce { object } => Request::Reproduce { id: ObjectId::from(object.as_str()) },
            Command::Pub(PubCmd::Create { project, objects, apps, notebooks }) => Request::PubCreate {
                project: ProjectId::from(project.as_str()),
                objects: objects.iter().map(|o| ObjectId::from(o.as_str())).collect(),
                apps: apps.iter().map(|a| AppId::from(a.as_str())).collect(),
                notebooks: notebooks.clone(),
            },
            Command::Sim(SimCmd::Run { scenario, trace }) => Request::SimRun {
                scenario: read_json(scenario)?,
                include_trace: *trace,
            },
            Command::Serve { .. } => bail!("serve is not a platform request"),
        };
        Ok(req)
    }
}

/// Human-readable rendering of a successful result.
pub fn render_text(command: &Command, data: &Value) -> String {
    match (command, data) {
        (Command::Reproduce { .. }, Value::String(script)) => script.clone(),
        (Command::Provenance { dot: true, .. }, graph) => serde_json::from_value::<datadock_core::provenance::Graph>(graph.clone())
            .map(|g| g.to_dot())
            .unwrap_or_else(|_| pretty(graph)),
        (Command::Collate { out_dir: None, .. }, Value::Object(m)) => {
            m.get("tsv").and_then(Value::as_str).map_or_else(|| pretty(data), str::to_owned)
        }
        (_, Value::Array(items)) => items.iter().map(|v| summary(v) + "\n").collect(),
        (_, v) => summary(v) + "\n",
    }
}

fn pretty(v: &Value) -> String {
    serde_json::to_string_pretty(v).expect("value serializes") + "\n"
}

/// `id` followed by whichever descriptive fields the record has.
fn summary(v: &Value) -> String {
    let Some(obj) = v.as_object() else {
        return v.to_string();
    };
    let Some(id) = obj.get("id").and_then(Value::as_str) else {
        return pretty(v).trim_end().to_owned();
    };
    let mut line = id.to_owned();
    for key in ["name", "state", "datatype", "subject", "app", "kind", "status", "version", "doi"] {
        match obj.get(key) {
            Some(Value::String(s)) => line.push_str(&format!("\t{key}={s}")),
            Some(v @ Value::Number(_)) => line.push_str(&format!("\t{key}={v}")),
            _ => {}
        }
    }
    line
}
