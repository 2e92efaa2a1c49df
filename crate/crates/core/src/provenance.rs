//! Lineage records, provenance graphs, reproduce scripts and publications.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::digest::DigestAlgorithm;
use crate::error::{Error, Result};
use crate::ids::{AppId, ObjectId, ProjectId, ResourceId, TaskId, Tick};
use crate::orchestrator::TaskState;
use crate::persist;
use crate::warehouse::DataObject;

pub const PUB_DOI_PREFIX: &str = "10.25663/sim.pub.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub object: ObjectId,
    pub task: TaskId,
    pub app: AppId,
    pub app_version: String,
    pub service_digest: String,
    pub config: BTreeMap<String, Value>,
    /// The exact `config.json` the service saw.
    pub config_json: String,
    pub input_objects: Vec<ObjectId>,
    /// Input slot → object.
    pub inputs: BTreeMap<String, ObjectId>,
    pub output_slot: String,
    pub resource: ResourceId,
    pub timestamps: BTreeMap<TaskState, Tick>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Object,
    Task,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub kind: NodeKind,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub from: String,
    pub to: String,
    /// `input_to` (object → task) or `produced_by` (task → object).
    pub label: String,
}

/// Ancestry of one object. Edges follow data flow.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Graph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

impl Graph {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph provenance {\n");
        for n in &self.nodes {
            let shape = match n.kind {
                NodeKind::Object => "ellipse",
                NodeKind::Task => "box",
            };
            let _ = writeln!(s, "  \"{}\" [shape={shape}];", n.id);
        }
        for e in &self.edges {
            let _ = writeln!(s, "  \"{}\" -> \"{}\" [label=\"{}\"];", e.from, e.to, e.label);
        }
        s.push_str("}\n");
        s
    }

    pub fn task_nodes(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|n| n.kind == NodeKind::Task)
            .map(|n| n.id.as_str())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PublicationRecord {
    pub doi: String,
    pub project: ProjectId,
    pub objects: Vec<ObjectId>,
    pub apps: Vec<AppId>,
    pub notebooks: Vec<String>,
    pub created_at: Tick,
    pub manifest_path: PathBuf,
}

/// App fields copied into a publication manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppSummary {
    pub id: AppId,
    pub name: String,
    pub version: String,
    pub doi: String,
}

#[derive(Debug)]
pub struct ProvenanceStore {
    root: PathBuf,
    records: BTreeMap<ObjectId, ProvenanceRecord>,
    publications: Vec<PublicationRecord>,
}

impl ProvenanceStore {
    pub fn open(root: &Path) -> Result<Self> {
        let records: Vec<ProvenanceRecord> = persist::read_jsonl(&root.join("provenance.jsonl"))?;
        let publications = persist::read_json(&root.join("publications.json"))?.unwrap_or_default();
        Ok(Self {
            root: root.to_owned(),
            records: records.into_iter().map(|r| (r.object.clone(), r)).collect(),
            publications,
        })
    }

    /// Persists one record per produced object.
    pub fn record(&mut self, records: Vec<ProvenanceRecord>) -> Result<Vec<ProvenanceRecord>> {
        let mut seen = BTreeSet::new();
        for r in &records {
            if self.records.contains_key(&r.object) || !seen.insert(&r.object) {
                return Err(Error::Conflict(format!("provenance for {} already recorded", r.object)));
            }
        }
        for r in &records {
            persist::append_jsonl(&self.root.join("provenance.jsonl"), r)?;
            self.records.insert(r.object.clone(), r.clone());
        }
        Ok(records)
    }

    pub fn get(&self, object: &ObjectId) -> Option<&ProvenanceRecord> {
        self.records.get(object)
    }

    pub fn records(&self) -> impl Iterator<Item = &ProvenanceRecord> {
        self.records.values()
    }

    /// Ancestor records of `object` in dependency order (producers first).
    pub fn ancestry(&self, object: &ObjectId) -> Vec<&ProvenanceRecord> {
        let mut tasks: BTreeMap<&TaskId, Vec<&ProvenanceRecord>> = BTreeMap::new();
        let mut stack = vec![object];
        let mut seen = BTreeSet::new();
        while let Some(o) = stack.pop() {
            if !seen.insert(o) {
                continue;
            }
            if let Some(r) = self.records.get(o) {
                tasks.entry(&r.task).or_default().push(r);
                stack.extend(r.input_objects.iter());
            }
        }
        // Kahn's algorithm over tasks, smallest id first among ready ones.
        let producer: BTreeMap<&ObjectId, &TaskId> = tasks
            .values()
            .flatten()
            .map(|r| (&r.object, &r.task))
            .collect();
        let parents: BTreeMap<&TaskId, BTreeSet<&TaskId>> = tasks
            .iter()
            .map(|(t, recs)| {
                let ps = recs[0]
                    .input_objects
                    .iter()
                    .filter_map(|o| producer.get(o).copied())
                    .collect();
                (*t, ps)
            })
            .collect();
        let mut done: BTreeSet<&TaskId> = BTreeSet::new();
        let mut order = Vec::new();
        while done.len() < parents.len() {
            let next = parents
                .iter()
                .find(|(t, ps)| !done.contains(*t) && ps.iter().all(|p| done.contains(p)))
                .map(|(t, _)| *t)
                .expect("provenance is acyclic");
            done.insert(next);
            let mut recs = tasks[next].clone();
            recs.sort_by(|a, b| a.output_slot.cmp(&b.output_slot));
            order.extend(recs);
        }
        order
    }

    pub fn graph(&self, object: &ObjectId) -> Graph {
        let mut nodes = BTreeSet::new();
        let mut edges = BTreeSet::new();
        let mut stack = vec![object.clone()];
        let mut seen = BTreeSet::new();
        while let Some(o) = stack.pop() {
            if !seen.insert(o.clone()) {
                continue;
            }
            nodes.insert(Node { id: o.to_string(), kind: NodeKind::Object });
            if let Some(r) = self.records.get(&o) {
                nodes.insert(Node { id: r.task.to_string(), kind: NodeKind::Task });
                edges.insert(Edge {
                    from: r.task.to_string(),
                    to: o.to_string(),
                    label: "produced_by".into(),
                });
                for i in &r.input_objects {
                    edges.insert(Edge {
                        from: i.to_string(),
                        to: r.task.to_string(),
                        label: "input_to".into(),
                    });
                    stack.push(i.clone());
                }
            }
        }
        Graph {
            nodes: nodes.into_iter().collect(),
            edges: edges.into_iter().collect(),
        }
    }

    pub fn publications(&self) -> &[PublicationRecord] {
        &self.publications
    }

    pub(crate) fn publish(
        &mut self,
        project: ProjectId,
        objects: &[DataObject],
        apps: Vec<AppSummary>,
        notebooks: Vec<String>,
        now: Tick,
    ) -> Result<PublicationRecord> {
        if objects.is_empty() {
            return Err(Error::validation("publication needs at least one object"));
        }
        if let Some(o) = objects.iter().find(|o| o.project != project) {
            return Err(Error::validation(format!(
                "object {} belongs to project {}, not {}",
                o.id, o.project, project
            )));
        }
        let n = self.publications.len() + 1;
        let doi = format!("{PUB_DOI_PREFIX}{n}");
        let manifest_rel = PathBuf::from("publications").join(format!("pub.{n}.json"));
        let manifest = serde_json::json!({
            "doi": doi,
            "project": project,
            "created_at": now,
            "objects": objects.iter().map(|o| {
                let prov = self.records.get(&o.id).map(|r| serde_json::json!({
                    "task": r.task,
                    "app": r.app,
                    "app_version": r.app_version,
                    "service_digest": r.service_digest,
                    "inputs": r.input_objects,
                }));
                serde_json::json!({
                    "id": o.id,
                    "datatype": o.datatype,
                    "subject": o.subject,
                    "session": o.session,
                    "tags": o.tags,
                    "archive_path": o.archive_path,
                    "content_hash": o.content_hash,
                    "provenance": prov,
                })
            }).collect::<Vec<_>>(),
            "apps": apps,
            "notebooks": notebooks,
        });
        persist::write_json(&self.root.join(&manifest_rel), &manifest)?;
        let record = PublicationRecord {
            doi,
            project,
            objects: objects.iter().map(|o| o.id.clone()).collect(),
            apps: apps.into_iter().map(|a| a.id).collect(),
            notebooks,
            created_at: now,
            manifest_path: manifest_rel,
        };
        self.publications.push(record.clone());
        if let Err(e) = persist::write_json(&self.root.join("publications.json"), &self.publications) {
            self.publications.pop();
            return Err(e);
        }
        Ok(record)
    }
}

const HEREDOC: &str = "DATADOCK_CONFIG_EOF";

/// Renders a POSIX shell script that re-runs the ancestry of `target`.
///
/// `lookup` resolves object metadata for imported roots.
pub fn reproduce_script(
    store: &ProvenanceStore,
    target: &DataObject,
    lookup: impl Fn(&ObjectId) -> Option<DataObject>,
) -> String {
    let records = store.ancestry(&target.id);
    let mut task_order: Vec<&TaskId> = Vec::new();
    let mut by_task: BTreeMap<&TaskId, Vec<&ProvenanceRecord>> = BTreeMap::new();
    for r in &records {
        if !by_task.contains_key(&r.task) {
            task_order.push(&r.task);
        }
        by_task.entry(&r.task).or_default().push(r);
    }
    let produced: BTreeMap<&ObjectId, &ProvenanceRecord> =
        records.iter().map(|r| (&r.object, *r)).collect();
    let imports: BTreeSet<&ObjectId> = records
        .iter()
        .flat_map(|r| r.input_objects.iter())
        .filter(|o| !produced.contains_key(o))
        .collect();

    let mut s = String::new();
    s.push_str("#!/bin/sh\n");
    let _ = writeln!(s, "# Reproduces object {} ({}).", target.id, target.datatype);
    s.push_str("# Resource choices are not pinned: every task re-runs locally.\n");
    s.push_str("# Service sources are expected under $SERVICES_DIR/<app id>.\n#\n");
    s.push_str("# objects:\n");
    let _ = writeln!(s, "#   {} target", target.id);
    for r in &records {
        if r.object != target.id {
            let _ = writeln!(s, "#   {} from {}", r.object, r.task);
        }
    }
    for o in &imports {
        let _ = writeln!(s, "#   {o} imported");
    }
    s.push_str("# tasks:\n");
    for t in &task_order {
        let r = by_task[t][0];
        let _ = writeln!(
            s,
            "#   {} app={} version={} service={}",
            t, r.app, r.app_version, r.service_digest
        );
    }
    s.push_str("set -e\n");
    s.push_str("SERVICES_DIR=${SERVICES_DIR:-$PWD/services}\n");
    s.push_str("IMPORTS_DIR=${IMPORTS_DIR:-$PWD/imports}\n");
    s.push_str(
        r#"file_digest() {
  case "$1" in
    sha256) if command -v sha256sum >/dev/null 2>&1; then sha256sum "$2"; else shasum -a 256 "$2"; fi ;;
    sha512) if command -v sha512sum >/dev/null 2>&1; then sha512sum "$2"; else shasum -a 512 "$2"; fi ;;
  esac | cut -d' ' -f1
}
run_task() {
  (cd "$1" && ./start)
  while :; do
    set +e
    (cd "$1" && ./status)
    rc=$?
    set -e
    case $rc in
      0) sleep 1 ;;
      1) return 0 ;;
      *) echo "$1: status exited with $rc" >&2; exit 1 ;;
    esac
  done
}
"#,
    );

    for o in &imports {
        s.push('\n');
        let meta = lookup(o);
        let _ = writeln!(s, "# IMPORT {o}: manual placement required.");
        if let Some(m) = &meta {
            let _ = writeln!(
                s,
                "# Copy the archive of {o} ({}, subject {}) to $IMPORTS_DIR/{o}.tar",
                m.datatype, m.subject
            );
        }
        let _ = writeln!(
            s,
            "[ -f \"$IMPORTS_DIR/{o}.tar\" ] || {{ echo \"missing $IMPORTS_DIR/{o}.tar\" >&2; exit 1; }}"
        );
        if let Some((algo, hex)) = meta.as_ref().and_then(|m| DigestAlgorithm::from_tagged(&m.content_hash)) {
            let _ = writeln!(
                s,
                "[ \"$(file_digest {} \"$IMPORTS_DIR/{o}.tar\")\" = \"{hex}\" ] || {{ echo \"{o}: content hash mismatch\" >&2; exit 1; }}",
                algo.name()
            );
        }
        let _ = writeln!(s, "mkdir -p \"$IMPORTS_DIR/{o}\"");
        let _ = writeln!(s, "tar -xf \"$IMPORTS_DIR/{o}.tar\" -C \"$IMPORTS_DIR/{o}\"");
    }

    for t in &task_order {
        let r = by_task[t][0];
        let dir = format!("task-{t}");
        s.push('\n');
        let _ = writeln!(s, "# TASK {t}: app {} version {}", r.app, r.app_version);
        let _ = writeln!(s, "rm -rf {dir}");
        let _ = writeln!(s, "mkdir -p {dir}");
        let _ = writeln!(s, "cp -R \"$SERVICES_DIR/{}/.\" {dir}/", r.app);
        let _ = writeln!(s, "cat > {dir}/config.json <<'{HEREDOC}'");
        s.push_str(&r.config_json);
        if !r.config_json.ends_with('\n') {
            s.push('\n');
        }
        let _ = writeln!(s, "{HEREDOC}");
        for (slot, obj) in &r.inputs {
            let _ = writeln!(s, "mkdir -p {dir}/inputs/{slot}");
            match produced.get(obj) {
                Some(p) => {
                    let _ = writeln!(
                        s,
                        "cp -R task-{}/outputs/{}/. {dir}/inputs/{slot}/",
                        p.task, p.output_slot
                    );
                }
                None => {
                    let _ = writeln!(s, "cp -R \"$IMPORTS_DIR/{obj}/.\" {dir}/inputs/{slot}/");
                }
            }
        }
        let _ = writeln!(s, "run_task {dir}");
    }

    s.push('\n');
    match produced.get(&target.id) {
        Some(r) => {
            let _ = writeln!(s, "echo \"{}: task-{}/outputs/{}\"", target.id, r.task, r.output_slot);
        }
        None => {
            let _ = writeln!(s, "echo \"{}: $IMPORTS_DIR/{}\"", target.id, target.id);
        }
    }
    s
}
