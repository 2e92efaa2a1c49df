//! Resource registry and the resource-selection heuristic.
//!
//! Scoring of one candidate resource for one task:
//!
//! * the service must be enabled on the resource; its default score is the base
//! * +5 for each data dependency whose outputs were produced on the resource
//! * +10 when the resource is private and owned by the submitting user
//! * +15 when the submitter named the resource as preferred
//! * public resources are ineligible for projects that avoid them
//! * resources whose monitor reports a failure are ineligible
//!
//! The highest total wins; ties go to the lexicographically smallest id.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{AppId, ObjectId, ResourceId, TaskId, UserId};
use crate::persist;
use crate::sim::SimProfile;

pub const DEP_BONUS: i64 = 5;
pub const EXCLUSIVE_BONUS: i64 = 10;
pub const PREFERRED_BONUS: i64 = 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResourceKind {
    Public,
    Shared,
    Private,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResourceStatus {
    #[default]
    Ok,
    Down,
}

/// How hooks are executed on a resource.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum BackendSpec {
    /// Hooks run as local subprocesses in the task work dir.
    #[default]
    Process,
    /// Logical-tick simulated cluster.
    Sim(SimProfile),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resource {
    pub id: ResourceId,
    pub name: String,
    pub kind: ResourceKind,
    pub owner: Option<UserId>,
    pub enabled_services: BTreeMap<AppId, i64>,
    pub status: ResourceStatus,
    pub geolocation: Option<String>,
    pub queue_length: u32,
    pub backend: BackendSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceDescriptor {
    pub id: ResourceId,
    #[serde(default)]
    pub name: String,
    pub kind: ResourceKind,
    #[serde(default)]
    pub owner: Option<UserId>,
    #[serde(default)]
    pub geolocation: Option<String>,
    #[serde(default)]
    pub queue_length: u32,
    #[serde(default)]
    pub backend: BackendSpec,
    #[serde(default)]
    pub enabled_services: BTreeMap<AppId, i64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepBonusMode {
    /// +5 for every resident dependency.
    #[default]
    PerDependency,
    /// +5 once when any dependency is resident.
    Flat,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPolicy {
    #[default]
    Heuristic,
    /// Baseline that cycles through qualified resources, ignoring scores.
    RoundRobin,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoringOptions {
    #[serde(default)]
    pub dep_bonus: DepBonusMode,
    /// Extension: subtract `floor(queue_length / q)` when set.
    #[serde(default)]
    pub queue_penalty_divisor: Option<u32>,
    #[serde(default)]
    pub policy: SelectionPolicy,
}

/// Where each finished task's outputs live.
#[derive(Clone, Debug, Default)]
pub struct Residency {
    tasks: BTreeMap<TaskId, ResourceId>,
    objects: BTreeMap<ObjectId, TaskId>,
}

impl Residency {
    pub fn record_task(&mut self, task: TaskId, resource: ResourceId) {
        self.tasks.insert(task, resource);
    }

    pub fn record_object(&mut self, object: ObjectId, task: TaskId) {
        self.objects.insert(object, task);
    }

    pub fn task_resource(&self, task: &TaskId) -> Option<&ResourceId> {
        self.tasks.get(task)
    }

    pub fn object_resource(&self, object: &ObjectId) -> Option<&ResourceId> {
        self.objects.get(object).and_then(|t| self.tasks.get(t))
    }
}

/// The parts of a task that scoring looks at.
#[derive(Clone, Debug)]
pub struct ScoreRequest {
    pub task: TaskId,
    pub service: AppId,
    /// Data dependencies: tasks whose outputs this task consumes.
    pub deps: Vec<TaskId>,
    pub preferred_resource: Option<ResourceId>,
}

pub struct ScoreContext<'a> {
    pub residency: &'a Residency,
    pub submitter: &'a UserId,
    pub avoid_public_resources: bool,
    pub options: ScoringOptions,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub resource: ResourceId,
    pub base: i64,
    pub dep_bonus: i64,
    pub exclusive_bonus: i64,
    pub preferred_bonus: i64,
    #[serde(default)]
    pub queue_penalty: i64,
    pub total: i64,
    pub disqualified: bool,
    pub disqualify_reason: Option<String>,
}

pub fn score_resource(req: &ScoreRequest, resource: &Resource, ctx: &ScoreContext<'_>) -> ScoreBreakdown {
    let enabled = resource.enabled_services.get(&req.service).copied();
    let base = enabled.unwrap_or(0);
    let resident = req
        .deps
        .iter()
        .filter(|d| ctx.residency.task_resource(d) == Some(&resource.id))
        .count() as i64;
    let dep_bonus = match ctx.options.dep_bonus {
        DepBonusMode::PerDependency => DEP_BONUS * resident,
        DepBonusMode::Flat if resident > 0 => DEP_BONUS,
        DepBonusMode::Flat => 0,
    };
    let exclusive_bonus = match (&resource.kind, &resource.owner) {
        (ResourceKind::Private, Some(owner)) if owner == ctx.submitter => EXCLUSIVE_BONUS,
        _ => 0,
    };
    let preferred_bonus = if req.preferred_resource.as_ref() == Some(&resource.id) {
        PREFERRED_BONUS
    } else {
        0
    };
    let queue_penalty = match ctx.options.queue_penalty_divisor {
        Some(q) if q > 0 => -((resource.queue_length / q) as i64),
        _ => 0,
    };
    let disqualify_reason = if enabled.is_none() {
        Some("not_enabled")
    } else if resource.kind == ResourceKind::Public && ctx.avoid_public_resources {
        Some("public_avoided")
    } else if resource.status == ResourceStatus::Down {
        Some("down")
    } else {
        None
    };
    ScoreBreakdown {
        resource: resource.id.clone(),
        base,
        dep_bonus,
        exclusive_bonus,
        preferred_bonus,
        queue_penalty,
        total: base + dep_bonus + exclusive_bonus + preferred_bonus + queue_penalty,
        disqualified: disqualify_reason.is_some(),
        disqualify_reason: disqualify_reason.map(str::to_owned),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub resource: ResourceId,
    pub scores: Vec<ScoreBreakdown>,
    pub report: String,
}

/// Highest qualified total; ties broken by smallest resource id.
pub fn argmax(scores: &[ScoreBreakdown]) -> Option<&ScoreBreakdown> {
    scores
        .iter()
        .filter(|s| !s.disqualified)
        .fold(None, |best: Option<&ScoreBreakdown>, s| match best {
            Some(b) if b.total > s.total || (b.total == s.total && b.resource <= s.resource) => Some(b),
            _ => Some(s),
        })
}

pub fn render_report(task: &TaskId, scores: &[ScoreBreakdown], selected: Option<&ResourceId>, queue: bool) -> String {
    let mut out = format!("task={task}\n");
    for s in scores {
        let _ = write!(
            out,
            "resource={} base={} dep={} excl={} pref={}",
            s.resource, s.base, s.dep_bonus, s.exclusive_bonus, s.preferred_bonus
        );
        if queue {
            let _ = write!(out, " queue={}", s.queue_penalty);
        }
        let _ = write!(out, " total={}", s.total);
        if let Some(reason) = &s.disqualify_reason {
            let _ = write!(out, " DISQUALIFIED:{reason}");
        }
        out.push('\n');
    }
    match selected {
        Some(r) => {
            let _ = writeln!(out, "selected={r}");
        }
        None => out.push_str("selected=none\n"),
    }
    out
}

#[derive(Debug)]
pub struct ResourceBroker {
    path: PathBuf,
    resources: BTreeMap<ResourceId, Resource>,
    rr_cursor: usize,
}

impl ResourceBroker {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("resources.json");
        let list: Vec<Resource> = persist::read_json(&path)?.unwrap_or_default();
        Ok(Self {
            path,
            resources: list.into_iter().map(|r| (r.id.clone(), r)).collect(),
            rr_cursor: 0,
        })
    }

    fn save(&self) -> Result<()> {
        let list: Vec<&Resource> = self.resources.values().collect();
        persist::write_json(&self.path, &list)
    }

    pub fn register_resource(&mut self, desc: ResourceDescriptor) -> Result<Resource> {
        if desc.id.as_str().trim().is_empty() {
            return Err(Error::validation("resource id must not be empty"));
        }
        if self.resources.contains_key(&desc.id) {
            return Err(Error::Conflict(format!("resource {} already registered", desc.id)));
        }
        match (desc.kind, &desc.owner) {
            (ResourceKind::Private, None) => {
                return Err(Error::validation("private resource requires an owner"))
            }
            (ResourceKind::Public | ResourceKind::Shared, Some(_)) => {
                return Err(Error::validation("only private resources have an owner"))
            }
            _ => {}
        }
        let name = if desc.name.is_empty() {
            desc.id.to_string()
        } else {
            desc.name
        };
        let res = Resource {
            id: desc.id,
            name,
            kind: desc.kind,
            owner: desc.owner,
            enabled_services: desc.enabled_services,
            status: ResourceStatus::Ok,
            geolocation: desc.geolocation,
            queue_length: desc.queue_length,
            backend: desc.backend,
        };
        self.resources.insert(res.id.clone(), res.clone());
        if let Err(e) = self.save() {
            self.resources.remove(&res.id);
            return Err(e);
        }
        Ok(res)
    }

    pub fn enable_service(&mut self, id: &ResourceId, service: &AppId, default_score: i64) -> Result<Resource> {
        let res = self
            .resources
            .get_mut(id)
            .ok_or_else(|| Error::not_found("resource", id.as_str()))?;
        res.enabled_services.insert(service.clone(), default_score);
        let out = res.clone();
        self.save()?;
        Ok(out)
    }

    pub fn set_status(&mut self, id: &ResourceId, status: ResourceStatus) -> Result<()> {
        let res = self
            .resources
            .get_mut(id)
            .ok_or_else(|| Error::not_found("resource", id.as_str()))?;
        if res.status != status {
            res.status = status;
            self.save()?;
        }
        Ok(())
    }

    pub fn update_backend(&mut self, id: &ResourceId, backend: BackendSpec) -> Result<()> {
        let res = self
            .resources
            .get_mut(id)
            .ok_or_else(|| Error::not_found("resource", id.as_str()))?;
        res.backend = backend;
        self.save()
    }

    pub fn resource(&self, id: &ResourceId) -> Result<&Resource> {
        self.resources
            .get(id)
            .ok_or_else(|| Error::not_found("resource", id.as_str()))
    }

    pub fn resources(&self) -> impl Iterator<Item = &Resource> {
        self.resources.values()
    }

    /// Scores every registered resource and picks one according to the policy.
    pub fn select_resource(&mut self, req: &ScoreRequest, ctx: &ScoreContext<'_>) -> Result<Selection> {
        let scores: Vec<ScoreBreakdown> = self
            .resources
            .values()
            .map(|r| score_resource(req, r, ctx))
            .collect();
        let picked = match ctx.options.policy {
            SelectionPolicy::Heuristic => argmax(&scores).map(|s| s.resource.clone()),
            SelectionPolicy::RoundRobin => {
                let qualified: Vec<&ScoreBreakdown> = scores.iter().filter(|s| !s.disqualified).collect();
                if qualified.is_empty() {
                    None
                } else {
                    let pick = qualified[self.rr_cursor % qualified.len()].resource.clone();
                    self.rr_cursor += 1;
                    Some(pick)
                }
            }
        };
        let report = render_report(
            &req.task,
            &scores,
            picked.as_ref(),
            ctx.options.queue_penalty_divisor.is_some(),
        );
        match picked {
            Some(resource) => Ok(Selection {
                resource,
                scores,
                report,
            }),
            None => Err(Error::NoResource {
                task: req.task.to_string(),
                report,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resource(id: &str, kind: ResourceKind, owner: Option<&str>, score: Option<i64>) -> Resource {
        Resource {
            id: id.into(),
            name: id.into(),
            kind,
            owner: owner.map(UserId::from),
            enabled_services: score
                .map(|s| BTreeMap::from([(AppId::from("app"), s)]))
                .unwrap_or_default(),
            status: ResourceStatus::Ok,
            geolocation: None,
            queue_length: 0,
            backend: BackendSpec::Process,
        }
    }

    fn req(deps: &[&str], preferred: Option<&str>) -> ScoreRequest {
        ScoreRequest {
            task: "t9".into(),
            service: "app".into(),
            deps: deps.iter().map(|d| TaskId::from(*d)).collect(),
            preferred_resource: preferred.map(ResourceId::from),
        }
    }

    fn ctx<'a>(res: &'a Residency, user: &'a UserId, avoid: bool) -> ScoreContext<'a> {
        ScoreContext {
            residency: res,
            submitter: user,
            avoid_public_resources: avoid,
            options: ScoringOptions::default(),
        }
    }

    #[test]
    fn base_only() {
        let r = resource("r1", ResourceKind::Shared, None, Some(5));
        let user = UserId::from("alice");
        let s = score_resource(&req(&[], None), &r, &ctx(&Residency::default(), &user, false));
        assert_eq!((s.total, s.disqualified), (5, false));
    }

    #[test]
    fn all_bonuses_stack() {
        let r = resource("r1", ResourceKind::Private, Some("alice"), Some(5));
        let mut res = Residency::default();
        res.record_task("t1".into(), "r1".into());
        res.record_task("t2".into(), "r1".into());
        let user = UserId::from("alice");
        let s = score_resource(&req(&["t1", "t2"], Some("r1")), &r, &ctx(&res, &user, false));
        assert_eq!(s.base, 5);
        assert_eq!(s.dep_bonus, 10);
        assert_eq!(s.exclusive_bonus, 10);
        assert_eq!(s.preferred_bonus, 15);
        assert_eq!(s.total, 40);
    }

    #[test]
    fn flat_mode_counts_once() {
        let r = resource("r1", ResourceKind::Shared, None, Some(5));
        let mut res = Residency::default();
        res.record_task("t1".into(), "r1".into());
        res.record_task("t2".into(), "r1".into());
        let user = UserId::from("bob");
        let mut c = ctx(&res, &user, false);
        c.options.dep_bonus = DepBonusMode::Flat;
        assert_eq!(score_resource(&req(&["t1", "t2"], None), &r, &c).dep_bonus, 5);
    }

    #[test]
    fn disqualifications() {
        let user = UserId::from("alice");
        let res = Residency::default();
        let off = resource("r1", ResourceKind::Shared, None, None);
        let s = score_resource(&req(&[], None), &off, &ctx(&res, &user, false));
        assert_eq!(s.disqualify_reason.as_deref(), Some("not_enabled"));

        let public = resource("r2", ResourceKind::Public, None, Some(5));
        let s = score_resource(&req(&[], None), &public, &ctx(&res, &user, true));
        assert_eq!(s.disqualify_reason.as_deref(), Some("public_avoided"));

        let mut down = resource("r3", ResourceKind::Shared, None, Some(5));
        down.status = ResourceStatus::Down;
        let s = score_resource(&req(&[], None), &down, &ctx(&res, &user, false));
        assert_eq!(s.disqualify_reason.as_deref(), Some("down"));
    }

    #[test]
    fn private_of_someone_else_gets_no_exclusive_bonus() {
        let r = resource("r1", ResourceKind::Private, Some("carol"), Some(5));
        let user = UserId::from("alice");
        let s = score_resource(&req(&[], None), &r, &ctx(&Residency::default(), &user, false));
        assert_eq!(s.exclusive_bonus, 0);
    }

    #[test]
    fn queue_penalty_extension() {
        let mut r = resource("r1", ResourceKind::Shared, None, Some(5));
        r.queue_length = 7;
        let user = UserId::from("alice");
        let res = Residency::default();
        let mut c = ctx(&res, &user, false);
        c.options.queue_penalty_divisor = Some(3);
        let s = score_resource(&req(&[], None), &r, &c);
        assert_eq!((s.queue_penalty, s.total), (-2, 3));
    }

    #[test]
    fn argmax_ties_go_to_smallest_id() {
        let mk = |id: &str, total| ScoreBreakdown {
            resource: id.into(),
            base: total,
            dep_bonus: 0,
            exclusive_bonus: 0,
            preferred_bonus: 0,
            queue_penalty: 0,
            total,
            disqualified: false,
            disqualify_reason: None,
        };
        assert_eq!(argmax(&[mk("r2", 20), mk("r1", 5)]).unwrap().resource.as_str(), "r2");
        assert_eq!(argmax(&[mk("r2", 5), mk("r1", 5)]).unwrap().resource.as_str(), "r1");
        assert!(argmax(&[]).is_none());
    }

    #[test]
    fn report_format() {
        let user = UserId::from("alice");
        let res = Residency::default();
        let scores = vec![
            score_resource(&req(&[], None), &resource("r1", ResourceKind::Shared, None, Some(5)), &ctx(&res, &user, false)),
            score_resource(&req(&[], None), &resource("r2", ResourceKind::Shared, None, None), &ctx(&res, &user, false)),
        ];
        let text = render_report(&"t9".into(), &scores, Some(&"r1".into()), false);
        assert_eq!(
            text,
            "task=t9\n\
             resource=r1 base=5 dep=0 excl=0 pref=0 total=5\n\
             resource=r2 base=0 dep=0 excl=0 pref=0 total=0 DISQUALIFIED:not_enabled\n\
             selected=r1\n"
        );
    }
}
