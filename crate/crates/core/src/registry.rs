//! App registry: ABCD services with typed slots, simulated DOIs and smart docking.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::digest;
use crate::error::{Error, Result};
use crate::ids::{format_id, AppId, ObjectId};
use crate::persist;
use crate::warehouse::DataObject;

pub const APP_DOI_PREFIX: &str = "10.25663/sim.app.";
pub const HOOKS: [&str; 3] = ["start", "status", "stop"];

/// An input or output slot. On output slots `required_datatype_tags` are the
/// datatype tags stamped onto the produced objects.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    #[serde(rename = "id")]
    pub slot_id: String,
    pub datatype: String,
    #[serde(default)]
    pub required_datatype_tags: Vec<String>,
    #[serde(default)]
    pub optional: bool,
}

impl Slot {
    pub fn new(id: impl Into<String>, datatype: impl Into<String>) -> Self {
        Self {
            slot_id: id.into(),
            datatype: datatype.into(),
            required_datatype_tags: Vec::new(),
            optional: false,
        }
    }

    pub fn accepts(&self, obj: &DataObject) -> bool {
        obj.datatype == self.datatype
            && self
                .required_datatype_tags
                .iter()
                .all(|t| obj.datatype_tags.contains(t))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfigType {
    String,
    Number,
    Integer,
    Boolean,
    Any,
}

impl ConfigType {
    fn admits(self, v: &Value) -> bool {
        match self {
            ConfigType::String => v.is_string(),
            ConfigType::Number => v.is_number(),
            ConfigType::Integer => v.is_i64() || v.is_u64(),
            ConfigType::Boolean => v.is_boolean(),
            ConfigType::Any => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigParam {
    pub key: String,
    #[serde(rename = "type")]
    pub kind: ConfigType,
    #[serde(default)]
    pub default: Option<Value>,
}

/// Contents of a service's `app.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppDescriptor {
    pub name: String,
    #[serde(default)]
    pub service_ref: String,
    #[serde(default = "default_version")]
    pub version: String,
    #[serde(default)]
    pub input_slots: Vec<Slot>,
    #[serde(default)]
    pub output_slots: Vec<Slot>,
    #[serde(default)]
    pub config_schema: Vec<ConfigParam>,
}

fn default_version() -> String {
    "main".to_owned()
}

impl AppDescriptor {
    /// Loads `<dir>/app.json`; an empty `service_ref` defaults to `dir`.
    pub fn from_service_dir(dir: &Path) -> Result<Self> {
        let path = dir.join("app.json");
        let mut desc: AppDescriptor = persist::read_json(&path)?
            .ok_or_else(|| Error::Source(format!("{} not found", path.display())))?;
        if desc.service_ref.is_empty() {
            desc.service_ref = dir.display().to_string();
        }
        Ok(desc)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct App {
    pub id: AppId,
    pub name: String,
    pub service_ref: String,
    pub version: String,
    pub input_slots: Vec<Slot>,
    pub output_slots: Vec<Slot>,
    pub config_schema: Vec<ConfigParam>,
    pub doi: String,
}

impl App {
    pub fn input_slot(&self, id: &str) -> Option<&Slot> {
        self.input_slots.iter().find(|s| s.slot_id == id)
    }

    pub fn output_slot(&self, id: &str) -> Option<&Slot> {
        self.output_slots.iter().find(|s| s.slot_id == id)
    }

    pub fn service_path(&self) -> PathBuf {
        service_path(&self.service_ref)
    }

    /// Fills defaults and type-checks user config against the schema.
    pub fn apply_config(&self, config: &BTreeMap<String, Value>) -> Result<BTreeMap<String, Value>> {
        let mut out = config.clone();
        if let Some(k) = out.keys().find(|k| k.starts_with('_')) {
            return Err(Error::validation(format!("config key {k} is reserved")));
        }
        for param in &self.config_schema {
            match out.get(&param.key) {
                Some(v) if !param.kind.admits(v) => {
                    return Err(Error::validation(format!(
                        "config {}: expected {:?}, got {v}",
                        param.key, param.kind
                    )))
                }
                Some(_) => {}
                None => match &param.default {
                    Some(d) => {
                        out.insert(param.key.clone(), d.clone());
                    }
                    None => {
                        return Err(Error::validation(format!("config {} is required", param.key)))
                    }
                },
            }
        }
        Ok(out)
    }
}

fn service_path(service_ref: &str) -> PathBuf {
    PathBuf::from(service_ref.strip_prefix("file://").unwrap_or(service_ref))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Accepted,
    Rejected,
    Ambiguous,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DockingResult {
    pub verdict: Verdict,
    pub bindings: BTreeMap<String, ObjectId>,
    pub reasons: Vec<String>,
}

/// Matches staged objects to an app's input slots by datatype and datatype tags.
pub fn check_docking(app: &App, staged: &[DataObject]) -> DockingResult {
    let mut bindings = BTreeMap::new();
    let mut reasons = Vec::new();
    let mut rejected = false;
    let mut ambiguous = false;

    if let Some(first) = staged.first() {
        if staged.iter().any(|o| o.project != first.project) {
            return DockingResult {
                verdict: Verdict::Rejected,
                bindings,
                reasons: vec!["staged objects span more than one project".into()],
            };
        }
    }

    for slot in &app.input_slots {
        let matches: Vec<&DataObject> = staged.iter().filter(|o| slot.accepts(o)).collect();
        match matches.as_slice() {
            [] if slot.optional => {}
            [] => {
                rejected = true;
                reasons.push(format!("slot {}: no compatible object", slot.slot_id));
            }
            [one] => {
                bindings.insert(slot.slot_id.clone(), one.id.clone());
            }
            many => {
                let ids: Vec<&str> = many.iter().map(|o| o.id.as_str()).collect();
                reasons.push(format!(
                    "slot {}: {} compatible objects ({})",
                    slot.slot_id,
                    many.len(),
                    ids.join(", ")
                ));
                if !slot.optional {
                    ambiguous = true;
                }
            }
        }
    }

    let verdict = if rejected {
        Verdict::Rejected
    } else if ambiguous {
        Verdict::Ambiguous
    } else {
        Verdict::Accepted
    };
    if verdict != Verdict::Accepted {
        bindings.clear();
    }
    DockingResult {
        verdict,
        bindings,
        reasons,
    }
}

/// Apps whose docking against `staged` is accepted or ambiguous.
pub fn compatible_apps<'a>(staged: &[DataObject], apps: impl IntoIterator<Item = &'a App>) -> Vec<&'a App> {
    apps.into_iter()
        .filter(|app| check_docking(app, staged).verdict != Verdict::Rejected)
        .collect()
}

/// Service source copied into a task work dir.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedService {
    pub dir: PathBuf,
    pub digest: String,
}

/// Checks that a service source carries the three ABCD hooks.
pub fn check_hooks(dir: &Path) -> Result<()> {
    for hook in HOOKS {
        let path = dir.join(hook);
        if !path.is_file() {
            return Err(Error::Contract(format!("{hook} missing")));
        }
        if !digest::is_executable(&path) {
            return Err(Error::Contract(format!("{hook} not executable")));
        }
    }
    Ok(())
}

/// Copies the app's service source into `work_dir`.
pub fn resolve_service(app: &App, work_dir: &Path) -> Result<ResolvedService> {
    let src = app.service_path();
    if !src.is_dir() {
        return Err(Error::Source(format!("service {} not found", src.display())));
    }
    check_hooks(&src)?;
    let digest = digest::tree_digest(&src)?;
    digest::copy_tree(&src, work_dir)?;
    Ok(ResolvedService {
        dir: work_dir.to_owned(),
        digest,
    })
}

#[derive(Debug)]
pub struct AppRegistry {
    path: PathBuf,
    apps: BTreeMap<AppId, App>,
    next: u64,
}

impl AppRegistry {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("apps.json");
        let apps: Vec<App> = persist::read_json(&path)?.unwrap_or_default();
        let next = apps
            .iter()
            .filter_map(|a| a.doi.strip_prefix(APP_DOI_PREFIX)?.parse::<u64>().ok())
            .max()
            .map_or(1, |n| n + 1);
        Ok(Self {
            path,
            apps: apps.into_iter().map(|a| (a.id.clone(), a)).collect(),
            next,
        })
    }

    pub fn register_app(
        &mut self,
        desc: AppDescriptor,
        datatype_exists: impl Fn(&str) -> bool,
    ) -> Result<App> {
        if desc.name.trim().is_empty() {
            return Err(Error::validation("app name must not be empty"));
        }
        for slot in desc.input_slots.iter().chain(&desc.output_slots) {
            if !datatype_exists(&slot.datatype) {
                return Err(Error::validation(format!(
                    "slot {}: unknown datatype {}",
                    slot.slot_id, slot.datatype
                )));
            }
        }
        for slots in [&desc.input_slots, &desc.output_slots] {
            let mut seen = std::collections::BTreeSet::new();
            if let Some(dup) = slots.iter().find(|s| !seen.insert(&s.slot_id)) {
                return Err(Error::validation(format!("duplicate slot id {}", dup.slot_id)));
            }
        }
        let src = service_path(&desc.service_ref);
        if !src.is_dir() {
            return Err(Error::Source(format!(
                "service {} is not a readable directory",
                desc.service_ref
            )));
        }

        let n = self.next;
        let app = App {
            id: AppId(format_id('a', n)),
            name: desc.name,
            service_ref: desc.service_ref,
            version: desc.version,
            input_slots: desc.input_slots,
            output_slots: desc.output_slots,
            config_schema: desc.config_schema,
            doi: format!("{APP_DOI_PREFIX}{n}"),
        };
        self.apps.insert(app.id.clone(), app.clone());
        if let Err(e) = self.save() {
            self.apps.remove(&app.id);
            return Err(e);
        }
        self.next += 1;
        Ok(app)
    }

    fn save(&self) -> Result<()> {
        let list: Vec<&App> = self.apps.values().collect();
        persist::write_json(&self.path, &list)
    }

    pub fn app(&self, id: &AppId) -> Result<&App> {
        self.apps
            .get(id)
            .ok_or_else(|| Error::not_found("app", id.as_str()))
    }

    pub fn apps(&self) -> impl Iterator<Item = &App> {
        self.apps.values()
    }
}

/// Writes a minimal hook script; used by tests and the synthetic apps.
pub fn write_hook(dir: &Path, name: &str, body: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, body).map_err(|e| Error::storage(&path, e))?;
    digest::set_executable(&path)
}
