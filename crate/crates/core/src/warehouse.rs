//! Projects, datatypes and archived data objects.
//!
//! On-disk layout below the store root:
//!
//! ```text
//! datatypes.json                      registry of every datatype
//! projects.json                       all projects
//! <bucket>/<projectID>/<objectID>.tar archived payloads
//! <bucket>/<projectID>/index.jsonl    one DataObject record per line
//! ```
//!
//! An object becomes visible only after its tar has been renamed into place
//! and its index record appended.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Cursor, Read};
use std::path::{Path, PathBuf};

use glob::{MatchOptions, Pattern};
use serde::{Deserialize, Serialize};

use crate::digest::{self, DigestAlgorithm, FileTree};
use crate::error::{Error, Result};
use crate::ids::{format_id, ObjectId, ProjectId, TaskId, Tick, UserId};
use crate::persist;

pub const DEFAULT_BUCKET: &str = "warehouse";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Visibility {
    #[default]
    Private,
    Public,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Project {
    pub id: ProjectId,
    pub name: String,
    pub owner: UserId,
    pub admins: BTreeSet<UserId>,
    pub members: BTreeSet<UserId>,
    pub visibility: Visibility,
    pub avoid_public_resources: bool,
    pub dua_text: Option<String>,
}

/// Optional project settings applied after creation.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ProjectUpdate {
    pub visibility: Option<Visibility>,
    pub avoid_public_resources: Option<bool>,
    pub dua_text: Option<String>,
    #[serde(default)]
    pub add_members: Vec<UserId>,
    #[serde(default)]
    pub add_admins: Vec<UserId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileSpec {
    /// Glob over datatype-relative paths, e.g. `t1.nii.gz` or `*.tsv`.
    pub pattern: String,
    pub required: bool,
}

impl FileSpec {
    pub fn required(pattern: impl Into<String>) -> Self {
        Self {
            pattern: pattern.into(),
            required: true,
        }
    }

    pub fn optional(pattern: impl Into<String>) -> Self {
        Self {
            pattern: pattern.into(),
            required: false,
        }
    }
}

/// How a statistical-feature payload maps onto tidy rows.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "layout", rename_all = "snake_case")]
pub enum FeatureTable {
    /// One row per (structure, measure).
    Long {
        file: String,
        structure_column: String,
        measure_column: String,
        value_column: String,
    },
    /// One row per structure, one column per measure.
    Wide {
        file: String,
        structure_column: String,
        measure_columns: Vec<String>,
    },
}

impl FeatureTable {
    pub fn file(&self) -> &str {
        match self {
            FeatureTable::Long { file, .. } | FeatureTable::Wide { file, .. } => file,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DatatypeFlags {
    #[serde(default)]
    pub is_statistical_feature: bool,
    #[serde(default)]
    pub bids_compatible: bool,
    #[serde(default)]
    pub feature_table: Option<FeatureTable>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Datatype {
    pub name: String,
    pub file_spec: Vec<FileSpec>,
    pub is_statistical_feature: bool,
    pub bids_compatible: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_table: Option<FeatureTable>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataObject {
    pub id: ObjectId,
    pub project: ProjectId,
    pub datatype: String,
    pub datatype_tags: Vec<String>,
    pub tags: Vec<String>,
    pub subject: String,
    pub session: Option<String>,
    pub archive_path: String,
    pub content_hash: String,
    pub size: u64,
    pub provenance_task: Option<TaskId>,
    pub created_at: Tick,
}

impl DataObject {
    pub fn has_tag(&self, tag: &str) -> bool {
        self.tags.iter().any(|t| t == tag)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationResult {
    pub violations: Vec<String>,
    pub warnings: Vec<String>,
}

impl ValidationResult {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Everything needed to archive one staged file tree.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArchiveRequest {
    pub project: ProjectId,
    pub datatype: String,
    pub source_dir: PathBuf,
    #[serde(default)]
    pub datatype_tags: Vec<String>,
    #[serde(default)]
    pub tags: Vec<String>,
    pub subject: String,
    #[serde(default)]
    pub session: Option<String>,
    #[serde(default)]
    pub provenance_task: Option<TaskId>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ObjectQuery {
    pub datatype: Option<String>,
    #[serde(default)]
    pub include_tags: Vec<String>,
    #[serde(default)]
    pub exclude_tags: Vec<String>,
    pub subject: Option<String>,
}

impl ObjectQuery {
    pub fn matches(&self, obj: &DataObject) -> bool {
        self.datatype.as_deref().is_none_or(|d| obj.datatype == d)
            && self.subject.as_deref().is_none_or(|s| obj.subject == s)
            && self.include_tags.iter().all(|t| obj.has_tag(t))
            && !self.exclude_tags.iter().any(|t| obj.has_tag(t))
    }
}

pub fn validate_object(files: &[String], datatype: &Datatype) -> ValidationResult {
    let opts = MatchOptions {
        case_sensitive: true,
        require_literal_separator: true,
        require_literal_leading_dot: false,
    };
    let patterns: Vec<(Option<Pattern>, &FileSpec)> = datatype
        .file_spec
        .iter()
        .map(|spec| (Pattern::new(&spec.pattern).ok(), spec))
        .collect();
    let matches = |pat: &Option<Pattern>, spec: &FileSpec, file: &str| match pat {
        Some(p) => p.matches_with(file, opts),
        None => spec.pattern == file,
    };

    let mut result = ValidationResult::default();
    for (pat, spec) in &patterns {
        if spec.required && !files.iter().any(|f| matches(pat, spec, f)) {
            result.violations.push(format!("{} missing", spec.pattern));
        }
    }
    for file in files {
        if !patterns.iter().any(|(pat, spec)| matches(pat, spec, file)) {
            result.warnings.push(format!("{file} unmatched by datatype"));
        }
    }
    result
}

#[derive(Debug)]
pub struct Warehouse {
    root: PathBuf,
    bucket: String,
    algo: DigestAlgorithm,
    projects: BTreeMap<ProjectId, Project>,
    datatypes: BTreeMap<String, Datatype>,
    objects: BTreeMap<ObjectId, DataObject>,
    next_project: u64,
    next_object: u64,
}

impl Warehouse {
    pub fn open(root: &Path, bucket: &str, algo: DigestAlgorithm) -> Result<Self> {
        if bucket.is_empty() || bucket.contains('/') {
            return Err(Error::validation(format!("invalid bucket name {bucket:?}")));
        }
        fs::create_dir_all(root).map_err(|e| Error::storage(root, e))?;
        let projects: Vec<Project> =
            persist::read_json(&root.join("projects.json"))?.unwrap_or_default();
        let datatypes: Vec<Datatype> =
            persist::read_json(&root.join("datatypes.json"))?.unwrap_or_default();
        let mut wh = Warehouse {
            root: root.to_owned(),
            bucket: bucket.to_owned(),
            algo,
            next_project: next_counter(projects.iter().map(|p| p.id.as_str())),
            projects: projects.into_iter().map(|p| (p.id.clone(), p)).collect(),
            datatypes: datatypes.into_iter().map(|d| (d.name.clone(), d)).collect(),
            objects: BTreeMap::new(),
            next_object: 1,
        };
        for pid in wh.projects.keys().cloned().collect::<Vec<_>>() {
            for obj in persist::read_jsonl::<DataObject>(&wh.index_path(&pid))? {
                wh.objects.insert(obj.id.clone(), obj);
            }
        }
        wh.next_object = next_counter(wh.objects.keys().map(|k| k.as_str()));
        Ok(wh)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn bucket(&self) -> &str {
        &self.bucket
    }

    pub fn digest_algorithm(&self) -> DigestAlgorithm {
        self.algo
    }

    fn index_path(&self, project: &ProjectId) -> PathBuf {
        self.root
            .join(&self.bucket)
            .join(project.as_str())
            .join("index.jsonl")
    }

    pub fn archive_path_for(&self, project: &ProjectId, object: &ObjectId) -> String {
        format!("{}/{}/{}.tar", self.bucket, project, object)
    }

    pub fn absolute_archive_path(&self, obj: &DataObject) -> PathBuf {
        self.root.join(&obj.archive_path)
    }

    // ---- projects ----

    pub fn create_project(&mut self, owner: &UserId, name: &str) -> Result<Project> {
        if name.trim().is_empty() {
            return Err(Error::validation("project name must not be empty"));
        }
        if owner.as_str().trim().is_empty() {
            return Err(Error::validation("project owner must not be empty"));
        }
        let id = ProjectId(format_id('p', self.next_project));
        let project = Project {
            id: id.clone(),
            name: name.to_owned(),
            owner: owner.clone(),
            admins: BTreeSet::from([owner.clone()]),
            members: BTreeSet::from([owner.clone()]),
            visibility: Visibility::Private,
            avoid_public_resources: false,
            dua_text: None,
        };
        self.projects.insert(id.clone(), project.clone());
        if let Err(e) = self.save_projects() {
            self.projects.remove(&id);
            return Err(e);
        }
        self.next_project += 1;
        Ok(project)
    }

    pub fn update_project(&mut self, id: &ProjectId, update: ProjectUpdate) -> Result<Project> {
        let project = self
            .projects
            .get_mut(id)
            .ok_or_else(|| Error::not_found("project", id.as_str()))?;
        if let Some(v) = update.visibility {
            project.visibility = v;
        }
        if let Some(a) = update.avoid_public_resources {
            project.avoid_public_resources = a;
        }
        if update.dua_text.is_some() {
            project.dua_text = update.dua_text;
        }
        for m in update.add_members {
            project.members.insert(m);
        }
        for a in update.add_admins {
            project.members.insert(a.clone());
            project.admins.insert(a);
        }
        let out = project.clone();
        self.save_projects()?;
        Ok(out)
    }

    fn save_projects(&self) -> Result<()> {
        let list: Vec<&Project> = self.projects.values().collect();
        persist::write_json(&self.root.join("projects.json"), &list)
    }

    pub fn project(&self, id: &ProjectId) -> Result<&Project> {
        self.projects
            .get(id)
            .ok_or_else(|| Error::not_found("project", id.as_str()))
    }

    pub fn projects(&self) -> impl Iterator<Item = &Project> {
        self.projects.values()
    }

    // ---- datatypes ----

    pub fn register_datatype(
        &mut self,
        name: &str,
        file_spec: Vec<FileSpec>,
        flags: DatatypeFlags,
    ) -> Result<Datatype> {
        if name.trim().is_empty() {
            return Err(Error::validation("datatype name must not be empty"));
        }
        if self.datatypes.contains_key(name) {
            return Err(Error::Conflict(format!("datatype {name} already registered")));
        }
        if !file_spec.iter().any(|s| s.required) {
            return Err(Error::validation(format!(
                "datatype {name}: file spec needs at least one required entry"
            )));
        }
        if let Some(bad) = file_spec.iter().find(|s| Pattern::new(&s.pattern).is_err()) {
            return Err(Error::validation(format!(
                "datatype {name}: invalid pattern {:?}",
                bad.pattern
            )));
        }
        if flags.feature_table.is_some() && !flags.is_statistical_feature {
            return Err(Error::validation(format!(
                "datatype {name}: feature_table requires is_statistical_feature"
            )));
        }
        let dt = Datatype {
            name: name.to_owned(),
            file_spec,
            is_statistical_feature: flags.is_statistical_feature,
            bids_compatible: flags.bids_compatible,
            feature_table: flags.feature_table,
        };
        self.datatypes.insert(dt.name.clone(), dt.clone());
        let list: Vec<&Datatype> = self.datatypes.values().collect();
        if let Err(e) = persist::write_json(&self.root.join("datatypes.json"), &list) {
            self.datatypes.remove(name);
            return Err(e);
        }
        Ok(dt)
    }

    pub fn datatype(&self, name: &str) -> Result<&Datatype> {
        self.datatypes
            .get(name)
            .ok_or_else(|| Error::not_found("datatype", name))
    }

    pub fn datatypes(&self) -> impl Iterator<Item = &Datatype> {
        self.datatypes.values()
    }

    // ---- objects ----

    pub fn archive_object(&mut self, req: ArchiveRequest, now: Tick) -> Result<DataObject> {
        self.project(&req.project)?;
        let datatype = self.datatype(&req.datatype)?.clone();
        if req.subject.trim().is_empty() {
            return Err(Error::validation("subject must not be empty"));
        }
        let files = digest::list_files(&req.source_dir)?;
        let validation = validate_object(&files, &datatype);
        if !validation.is_ok() {
            return Err(Error::Rejected {
                datatype: datatype.name,
                violations: validation.violations,
            });
        }
        for w in &validation.warnings {
            log::warn!("archiving {}: {w}", req.datatype);
        }

        let bytes = build_tar(&req.source_dir, &files)?;
        let id = ObjectId(format_id('d', self.next_object));
        let obj = DataObject {
            archive_path: self.archive_path_for(&req.project, &id),
            id,
            project: req.project,
            datatype: req.datatype,
            datatype_tags: req.datatype_tags,
            tags: req.tags,
            subject: req.subject,
            session: req.session,
            content_hash: self.algo.digest(&bytes),
            size: bytes.len() as u64,
            provenance_task: req.provenance_task,
            created_at: now,
        };
        persist::write_atomic(&self.absolute_archive_path(&obj), &bytes)?;
        persist::append_jsonl(&self.index_path(&obj.project), &obj)?;
        self.next_object += 1;
        self.objects.insert(obj.id.clone(), obj.clone());
        Ok(obj)
    }

    pub fn object(&self, id: &ObjectId) -> Result<&DataObject> {
        self.objects
            .get(id)
            .ok_or_else(|| Error::not_found("object", id.as_str()))
    }

    pub fn objects(&self) -> impl Iterator<Item = &DataObject> {
        self.objects.values()
    }

    /// Objects of `project` matching `query`, newest first (ties: larger id first).
    pub fn query_objects(&self, project: &ProjectId, query: &ObjectQuery) -> Result<Vec<DataObject>> {
        self.project(project)?;
        let mut out: Vec<DataObject> = self
            .objects
            .values()
            .filter(|o| &o.project == project && query.matches(o))
            .cloned()
            .collect();
        out.sort_by(|a, b| b.created_at.cmp(&a.created_at).then_with(|| b.id.cmp(&a.id)));
        Ok(out)
    }

    /// Distinct subjects with at least one object in `project`.
    pub fn subjects(&self, project: &ProjectId) -> BTreeSet<String> {
        self.objects
            .values()
            .filter(|o| &o.project == project)
            .map(|o| o.subject.clone())
            .collect()
    }

    /// Reads and verifies an object's tar bytes.
    pub fn read_archive(&self, id: &ObjectId) -> Result<Vec<u8>> {
        let obj = self.object(id)?;
        let path = self.absolute_archive_path(obj);
        let bytes = fs::read(&path).map_err(|e| Error::storage(&path, e))?;
        let (algo, _) = DigestAlgorithm::from_tagged(&obj.content_hash)
            .ok_or_else(|| Error::validation(format!("unknown digest {}", obj.content_hash)))?;
        let found = algo.digest(&bytes);
        if found != obj.content_hash {
            return Err(Error::Integrity {
                id: id.to_string(),
                expected: obj.content_hash.clone(),
                found,
            });
        }
        Ok(bytes)
    }

    /// Extracts a verified object into `dest` and returns its file tree.
    pub fn fetch_object(&self, id: &ObjectId, dest: &Path) -> Result<FileTree> {
        let bytes = self.read_archive(id)?;
        fs::create_dir_all(dest).map_err(|e| Error::storage(dest, e))?;
        let mut archive = tar::Archive::new(Cursor::new(bytes));
        archive.set_preserve_permissions(true);
        for entry in archive.entries()? {
            let mut entry = entry?;
            entry.unpack_in(dest).map_err(|e| Error::storage(dest, e))?;
        }
        let tree = digest::file_tree(dest)?;
        let obj = self.object(id)?;
        let files: Vec<String> = tree.keys().cloned().collect();
        let check = validate_object(&files, self.datatype(&obj.datatype)?);
        if !check.is_ok() {
            return Err(Error::Rejected {
                datatype: obj.datatype.clone(),
                violations: check.violations,
            });
        }
        Ok(tree)
    }

    /// Reads one datatype-relative file out of a verified archive.
    pub fn read_object_file(&self, id: &ObjectId, rel: &str) -> Result<Option<Vec<u8>>> {
        let bytes = self.read_archive(id)?;
        let mut archive = tar::Archive::new(Cursor::new(bytes));
        for entry in archive.entries()? {
            let mut entry = entry?;
            let path = entry.path()?.to_string_lossy().replace('\\', "/");
            if path == rel {
                let mut buf = Vec::new();
                entry.read_to_end(&mut buf)?;
                return Ok(Some(buf));
            }
        }
        Ok(None)
    }
}

fn next_counter<'a>(ids: impl Iterator<Item = &'a str>) -> u64 {
    ids.filter_map(|id| id.get(1..)?.parse::<u64>().ok())
        .max()
        .map_or(1, |m| m + 1)
}

/// Deterministic ustar archive: sorted entries, zeroed mtime and ownership.
fn build_tar(root: &Path, files: &[String]) -> Result<Vec<u8>> {
    let mut builder = tar::Builder::new(Vec::new());
    for rel in files {
        let path = root.join(rel);
        let data = fs::read(&path).map_err(|e| Error::storage(&path, e))?;
        let mut header = tar::Header::new_ustar();
        header.set_size(data.len() as u64);
        header.set_mode(if digest::is_executable(&path) { 0o755 } else { 0o644 });
        header.set_mtime(0);
        header.set_uid(0);
        header.set_gid(0);
        header.set_entry_type(tar::EntryType::Regular);
        builder.append_data(&mut header, rel, data.as_slice())?;
    }
    Ok(builder.into_inner()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1w() -> Datatype {
        Datatype {
            name: "neuro/anat/t1w".into(),
            file_spec: vec![FileSpec::required("t1.nii.gz")],
            is_statistical_feature: false,
            bids_compatible: true,
            feature_table: None,
        }
    }

    fn files(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn exact_match_validates() {
        let r = validate_object(&files(&["t1.nii.gz"]), &t1w());
        assert!(r.is_ok());
        assert!(r.warnings.is_empty());
    }

    #[test]
    fn empty_tree_names_missing_pattern() {
        let r = validate_object(&[], &t1w());
        assert_eq!(r.violations, vec!["t1.nii.gz missing".to_string()]);
    }

    #[test]
    fn extra_file_is_a_warning() {
        let staged = files(&["t1.nii.gz", "extra.txt"]);
        let r = validate_object(&staged, &t1w());
        assert!(r.is_ok());
        // oracle: staged files minus those matched by any pattern
        let unmatched: Vec<&String> = staged.iter().filter(|f| *f != "t1.nii.gz").collect();
        assert_eq!(r.warnings.len(), unmatched.len());
        assert!(r.warnings[0].starts_with("extra.txt"));
    }

    #[test]
    fn glob_does_not_cross_directories() {
        let dt = Datatype {
            file_spec: vec![FileSpec::required("*.tsv")],
            ..t1w()
        };
        assert!(!validate_object(&files(&["sub/x.tsv"]), &dt).is_ok());
        assert!(validate_object(&files(&["x.tsv"]), &dt).is_ok());
    }

    #[test]
    fn ids_sort_in_creation_order() {
        assert!(format_id('d', 9) < format_id('d', 10));
        assert_eq!(next_counter(["d00000009", "d00000010"].into_iter()), 11);
    }
}
