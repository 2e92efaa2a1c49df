//! Declarative per-subject batch rules.
//!
//! A rule binds an app's input slots to warehouse queries. Each evaluation
//! walks the project's subjects and submits one task per subject whose inputs
//! resolve and whose outputs do not exist yet. Evaluations are appended to
//! `evaluations.jsonl`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::ids::{format_id, AppId, InstanceId, ObjectId, ProjectId, RuleId, TaskId, Tick};
use crate::orchestrator::{Binding, TaskRequest, TaskState};
use crate::persist;
use crate::platform::Platform;
use crate::warehouse::ObjectQuery;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSelector {
    pub datatype: String,
    #[serde(default)]
    pub include_tags: Vec<String>,
    #[serde(default)]
    pub exclude_tags: Vec<String>,
}

/// The user-facing rule definition (also the rule file format).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleDefinition {
    pub project: ProjectId,
    pub app: AppId,
    pub input_selectors: BTreeMap<String, InputSelector>,
    #[serde(default)]
    pub config: BTreeMap<String, Value>,
    #[serde(default)]
    pub output_tags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineRule {
    pub id: RuleId,
    pub project: ProjectId,
    pub app: AppId,
    /// Workflow instance the rule submits into.
    pub instance: InstanceId,
    pub input_selectors: BTreeMap<String, InputSelector>,
    pub config: BTreeMap<String, Value>,
    pub output_tags: Vec<String>,
    pub active: bool,
    /// Failed tasks that no longer block resubmission.
    #[serde(default)]
    pub rearmed: BTreeSet<TaskId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    OutputExists,
    TaskInFlight,
    /// A previous task for the subject failed and has not been re-armed.
    TaskFailed,
    InputsMissing,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submission {
    pub subject: String,
    pub bindings: BTreeMap<String, ObjectId>,
    pub task: TaskId,
    /// `ambiguous_resolved` notes: slots where the newest of several matches was taken.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ambiguous_resolved: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skip {
    pub subject: String,
    pub reason: SkipReason,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleEvaluation {
    pub rule: RuleId,
    pub tick: Tick,
    pub submissions: Vec<Submission>,
    pub skipped: Vec<Skip>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSummary {
    pub rule: RuleId,
    pub submissions: usize,
    pub completions: usize,
    pub failures: usize,
    pub in_flight: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub ticks: u64,
    pub rules: Vec<RuleSummary>,
}

#[derive(Debug)]
pub struct PipelineStore {
    root: PathBuf,
    rules: BTreeMap<RuleId, PipelineRule>,
    next: u64,
}

impl PipelineStore {
    pub(crate) fn open(root: &Path) -> Result<Self> {
        let rules: Vec<PipelineRule> = persist::read_json(&root.join("rules.json"))?.unwrap_or_default();
        let next = rules
            .iter()
            .filter_map(|r| r.id.as_str().get(1..)?.parse::<u64>().ok())
            .max()
            .map_or(1, |n| n + 1);
        Ok(Self {
            root: root.to_owned(),
            rules: rules.into_iter().map(|r| (r.id.clone(), r)).collect(),
            next,
        })
    }

    fn save(&self) -> Result<()> {
        let list: Vec<&PipelineRule> = self.rules.values().collect();
        persist::write_json(&self.root.join("rules.json"), &list)
    }

    fn put(&mut self, rule: PipelineRule) -> Result<()> {
        let previous = self.rules.insert(rule.id.clone(), rule.clone());
        if let Err(e) = self.save() {
            match previous {
                Some(p) => self.rules.insert(p.id.clone(), p),
                None => self.rules.remove(&rule.id),
            };
            return Err(e);
        }
        Ok(())
    }

    pub fn rule(&self, id: &RuleId) -> Result<&PipelineRule> {
        self.rules
            .get(id)
            .ok_or_else(|| Error::not_found("rule", id.as_str()))
    }

    pub fn rules(&self) -> impl Iterator<Item = &PipelineRule> {
        self.rules.values()
    }

    pub fn evaluations(&self) -> Result<Vec<RuleEvaluation>> {
        persist::read_jsonl(&self.root.join("evaluations.jsonl"))
    }
}

impl Platform {
    pub fn define_rule(&mut self, def: RuleDefinition) -> Result<PipelineRule> {
        self.warehouse().project(&def.project)?;
        let app = self.registry().app(&def.app)?.clone();
        for (slot_id, sel) in &def.input_selectors {
            let slot = app.input_slot(slot_id).ok_or_else(|| {
                Error::validation(format!("app {} has no input slot {slot_id}", app.id))
            })?;
            if slot.datatype != sel.datatype {
                return Err(Error::validation(format!(
                    "selector for slot {slot_id} asks for {}, slot takes {}",
                    sel.datatype, slot.datatype
                )));
            }
        }
        let uncovered: Vec<&str> = app
            .input_slots
            .iter()
            .filter(|s| !s.optional && !def.input_selectors.contains_key(&s.slot_id))
            .map(|s| s.slot_id.as_str())
            .collect();
        if !uncovered.is_empty() {
            return Err(Error::validation(format!(
                "rule leaves required slots uncovered: {}",
                uncovered.join(", ")
            )));
        }
        let config = app.apply_config(&def.config)?;
        let instance = self.create_instance(&def.project)?;
        let rule = PipelineRule {
            id: RuleId(format_id('r', self.pipelines.next)),
            project: def.project,
            app: def.app,
            instance: instance.id,
            input_selectors: def.input_selectors,
            config,
            output_tags: def.output_tags,
            active: true,
            rearmed: BTreeSet::new(),
        };
        self.pipelines.put(rule.clone())?;
        self.pipelines.next += 1;
        Ok(rule)
    }

    pub fn set_rule_active(&mut self, id: &RuleId, active: bool) -> Result<PipelineRule> {
        let mut rule = self.pipelines.rule(id)?.clone();
        rule.active = active;
        self.pipelines.put(rule.clone())?;
        Ok(rule)
    }

    /// Lets the rule resubmit for `subject` despite earlier failures.
    /// Returns the failed tasks that were re-armed.
    pub fn rearm_rule(&mut self, id: &RuleId, subject: &str) -> Result<Vec<TaskId>> {
        let mut rule = self.pipelines.rule(id)?.clone();
        let failed: Vec<TaskId> = self
            .tasks()
            .tasks()
            .filter(|t| t.rule.as_ref() == Some(id) && t.subject.as_deref() == Some(subject))
            .filter(|t| t.state.dooms_children() && !rule.rearmed.contains(&t.id))
            .map(|t| t.id.clone())
            .collect();
        rule.rearmed.extend(failed.iter().cloned());
        self.pipelines.put(rule)?;
        Ok(failed)
    }

    pub fn evaluate_rule(&mut self, id: &RuleId) -> Result<RuleEvaluation> {
        let rule = self.pipelines.rule(id)?.clone();
        let now = self.now();
        let mut eval = RuleEvaluation {
            rule: rule.id.clone(),
            tick: now,
            submissions: Vec::new(),
            skipped: Vec::new(),
        };
        if !rule.active {
            return Ok(eval);
        }
        let app = self.registry().app(&rule.app)?.clone();
        let submitter = self.warehouse().project(&rule.project)?.owner.clone();

        let mut in_flight = BTreeSet::new();
        let mut failed = BTreeSet::new();
        for t in self.tasks().tasks().filter(|t| t.rule.as_ref() == Some(id)) {
            let Some(s) = t.subject.clone() else { continue };
            if !t.state.is_terminal() {
                in_flight.insert(s);
            } else if t.state.dooms_children() && !rule.rearmed.contains(&t.id) {
                failed.insert(s);
            }
        }
        let produced: BTreeSet<String> = self
            .warehouse()
            .objects()
            .filter(|o| o.project == rule.project)
            .filter(|o| rule.output_tags.iter().all(|t| o.has_tag(t)))
            .filter(|o| {
                o.provenance_task
                    .as_ref()
                    .and_then(|t| self.tasks().task(t).ok())
                    .is_some_and(|t| t.app == rule.app)
            })
            .map(|o| o.subject.clone())
            .collect();

        for subject in self.warehouse().subjects(&rule.project) {
            let reason = if in_flight.contains(&subject) {
                Some(SkipReason::TaskInFlight)
            } else if produced.contains(&subject) {
                Some(SkipReason::OutputExists)
            } else if failed.contains(&subject) {
                Some(SkipReason::TaskFailed)
            } else {
                None
            };
            if let Some(reason) = reason {
                eval.skipped.push(Skip { subject, reason });
                continue;
            }

            let mut bindings = BTreeMap::new();
            let mut notes = Vec::new();
            let mut missing = false;
            for slot in &app.input_slots {
                let Some(sel) = rule.input_selectors.get(&slot.slot_id) else { continue };
                let query = ObjectQuery {
                    datatype: Some(sel.datatype.clone()),
                    include_tags: sel.include_tags.clone(),
                    exclude_tags: sel.exclude_tags.clone(),
                    subject: Some(subject.clone()),
                };
                let found: Vec<_> = self
                    .warehouse()
                    .query_objects(&rule.project, &query)?
                    .into_iter()
                    .filter(|o| slot.accepts(o))
                    .collect();
                match found.as_slice() {
                    [] if slot.optional => {}
                    [] => missing = true,
                    [newest, rest @ ..] => {
                        if !rest.is_empty() {
                            let others: Vec<&str> = rest.iter().map(|o| o.id.as_str()).collect();
                            notes.push(format!(
                                "slot {}: took {} over {}",
                                slot.slot_id,
                                newest.id,
                                others.join(", ")
                            ));
                        }
                        bindings.insert(slot.slot_id.clone(), newest.id.clone());
                    }
                }
            }
            if missing {
                eval.skipped.push(Skip { subject, reason: SkipReason::InputsMissing });
                continue;
            }

            let mut req = TaskRequest::new(rule.instance.clone(), rule.app.clone(), submitter.clone());
            req.config = rule.config.clone();
            req.bindings = bindings
                .iter()
                .map(|(s, o)| (s.clone(), Binding::Object(o.clone())))
                .collect();
            req.subject = Some(subject.clone());
            req.output_tags = rule.output_tags.clone();
            req.rule = Some(rule.id.clone());
            let task = self.submit_task(req)?;
            eval.submissions.push(Submission {
                subject,
                bindings,
                task: task.id,
                ambiguous_resolved: notes,
            });
        }
        persist::append_jsonl(&self.pipelines.root.join("evaluations.jsonl"), &eval)?;
        Ok(eval)
    }

    /// Alternates rule evaluation and scheduler ticks `ticks` times.
    pub fn run_rules(&mut self, project: &ProjectId, ticks: u64) -> Result<RunSummary> {
        self.warehouse().project(project)?;
        let ids: Vec<RuleId> = self
            .pipelines
            .rules()
            .filter(|r| &r.project == project)
            .map(|r| r.id.clone())
            .collect();
        let mut submitted: BTreeMap<RuleId, usize> = BTreeMap::new();
        for _ in 0..ticks {
            for id in &ids {
                let eval = self.evaluate_rule(id)?;
                *submitted.entry(id.clone()).or_default() += eval.submissions.len();
            }
            self.tick()?;
        }
        let rules = ids
            .into_iter()
            .map(|id| {
                let mut s = RuleSummary {
                    submissions: submitted.get(&id).copied().unwrap_or(0),
                    rule: id.clone(),
                    ..Default::default()
                };
                for t in self.tasks().tasks().filter(|t| t.rule.as_ref() == Some(&id)) {
                    match t.state {
                        TaskState::Finished => s.completions += 1,
                        TaskState::Failed => s.failures += 1,
                        TaskState::Requested | TaskState::Running => s.in_flight += 1,
                        TaskState::Stopped | TaskState::Removed => {}
                    }
                }
                s
            })
            .collect();
        Ok(RunSummary { ticks, rules })
    }
}
