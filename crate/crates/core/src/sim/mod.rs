//! Simulated compute resources, deterministic synthetic apps and scenarios.
//!
//! Time is logical: a job dispatched at tick `t` reports running while
//! `now - t <= latency_ticks` and completes afterwards. Whether it fails is
//! decided once, at dispatch, from the resource seed and the task id, so traces
//! do not depend on polling cadence.

mod scenario;
mod synthetic;

use std::fs;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::broker::ResourceStatus;
use crate::error::{Error, Result};
use crate::exec::{self, ExecBackend, HookContext, StatusCode};
use crate::ids::{TaskId, Tick};
use crate::persist;

pub use scenario::{
    build_and_run, run_scenario, run_scenario_in, Metrics, ResourceSpec, ScenarioSpec, Workload,
    BLOB_DATATYPE,
};
pub use synthetic::{
    run_native, write_service, FeatureOutput, SyntheticApp, SyntheticOutput, SYNTHETIC_MANIFEST,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimProfile {
    #[serde(default)]
    pub latency_ticks: u64,
    #[serde(default)]
    pub failure_prob: f64,
    #[serde(default)]
    pub down: bool,
    #[serde(default)]
    pub queue_length: u32,
    #[serde(default)]
    pub geolocation: Option<String>,
    #[serde(default)]
    pub rng_seed: u64,
    /// Run synthetic apps in-process instead of forking their hooks.
    #[serde(default = "yes")]
    pub native_synthetic: bool,
}

fn yes() -> bool {
    true
}

impl Default for SimProfile {
    fn default() -> Self {
        Self {
            latency_ticks: 0,
            failure_prob: 0.0,
            down: false,
            queue_length: 0,
            geolocation: None,
            rng_seed: 0,
            native_synthetic: true,
        }
    }
}

impl SimProfile {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.failure_prob) {
            return Err(Error::validation("failure_prob must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Per-job record kept in the work dir so status survives restarts.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct SimJob {
    dispatch_tick: Tick,
    latency_ticks: u64,
    fails: bool,
}

const SIM_JOB_FILE: &str = "_sim_job.json";

/// Seeded, per-task failure draw.
pub fn decides_failure(seed: u64, task: &TaskId, failure_prob: f64) -> bool {
    // FNV-1a over the task id, mixed with the resource seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in task.as_str().bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ h);
    rng.gen::<f64>() < failure_prob
}

#[derive(Debug)]
pub struct SimBackend {
    resource: String,
    profile: SimProfile,
}

impl SimBackend {
    pub fn new(resource: impl Into<String>, profile: SimProfile) -> Self {
        Self {
            resource: resource.into(),
            profile,
        }
    }

    pub fn profile(&self) -> &SimProfile {
        &self.profile
    }

    pub fn set_down(&mut self, down: bool) {
        self.profile.down = down;
    }
}

impl ExecBackend for SimBackend {
    fn probe(&mut self) -> ResourceStatus {
        if self.profile.down {
            ResourceStatus::Down
        } else {
            ResourceStatus::Ok
        }
    }

    fn start(&mut self, ctx: &HookContext<'_>) -> Result<String> {
        if self.profile.down {
            return Err(Error::Contract(format!("resource {} unreachable", self.resource)));
        }
        let native = self.profile.native_synthetic && ctx.work_dir.join(SYNTHETIC_MANIFEST).is_file();
        if native {
            run_native(ctx.work_dir)?;
        } else {
            match exec::run_hook(ctx.work_dir, "start")? {
                Some(0) => {}
                code => return Err(Error::Contract(format!("start exited with {code:?}"))),
            }
        }
        let job = SimJob {
            dispatch_tick: ctx.now,
            latency_ticks: self.profile.latency_ticks,
            fails: decides_failure(self.profile.rng_seed, ctx.task, self.profile.failure_prob),
        };
        persist::write_json(&ctx.work_dir.join(SIM_JOB_FILE), &job)?;
        let jobid = exec::read_jobid(ctx.work_dir)
            .filter(|_| !native)
            .unwrap_or_else(|| format!("sim-{}-{}", self.resource, ctx.task));
        persist::write_atomic(&ctx.work_dir.join("jobid"), format!("{jobid}\n").as_bytes())?;
        Ok(jobid)
    }

    fn status(&mut self, ctx: &HookContext<'_>) -> Result<StatusCode> {
        let job: SimJob = match persist::read_json(&ctx.work_dir.join(SIM_JOB_FILE))? {
            Some(j) => j,
            None => return Ok(StatusCode::Unknown),
        };
        if ctx.now.saturating_sub(job.dispatch_tick) <= job.latency_ticks {
            return Ok(StatusCode::Running);
        }
        if job.fails || ctx.work_dir.join(synthetic::FAILED_MARKER).exists() {
            Ok(StatusCode::Failed)
        } else {
            Ok(StatusCode::Finished)
        }
    }

    fn stop(&mut self, ctx: &HookContext<'_>) -> Result<()> {
        let path = ctx.work_dir.join(SIM_JOB_FILE);
        if path.exists() {
            fs::remove_file(&path).map_err(|e| Error::storage(&path, e))?;
        }
        Ok(())
    }
}

/// Builds the backend for a resource.
pub(crate) fn backend_for(resource: &str, spec: &crate::broker::BackendSpec) -> Box<dyn ExecBackend> {
    match spec {
        crate::broker::BackendSpec::Process => Box::new(exec::ProcessBackend::new(resource)),
        crate::broker::BackendSpec::Sim(p) => Box::new(SimBackend::new(resource, p.clone())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    fn start(backend: &mut SimBackend, dir: &Path, task: &TaskId, now: Tick) {
        crate::registry::write_hook(dir, "start", "#!/bin/sh\nexit 0\n").unwrap();
        let ctx = HookContext { task, work_dir: dir, now };
        backend.start(&ctx).unwrap();
    }

    fn poll(backend: &mut SimBackend, dir: &Path, task: &TaskId, now: Tick) -> StatusCode {
        backend.status(&HookContext { task, work_dir: dir, now }).unwrap()
    }

    #[test]
    fn latency_two_finishes_on_third_poll() {
        let dir = tempfile::tempdir().unwrap();
        let task = TaskId::from("t1");
        let mut b = SimBackend::new("r1", SimProfile { latency_ticks: 2, ..Default::default() });
        start(&mut b, dir.path(), &task, 10);
        let trace: Vec<StatusCode> = (11..=13).map(|t| poll(&mut b, dir.path(), &task, t)).collect();
        assert_eq!(trace, vec![StatusCode::Running, StatusCode::Running, StatusCode::Finished]);
        assert!(dir.path().join("jobid").is_file());
    }

    #[test]
    fn certain_failure_reports_failed() {
        let dir = tempfile::tempdir().unwrap();
        let task = TaskId::from("t1");
        let mut b = SimBackend::new("r1", SimProfile { failure_prob: 1.0, ..Default::default() });
        start(&mut b, dir.path(), &task, 0);
        assert_eq!(poll(&mut b, dir.path(), &task, 1), StatusCode::Failed);
    }

    #[test]
    fn down_profile_probes_down() {
        let mut b = SimBackend::new("r1", SimProfile { down: true, ..Default::default() });
        assert_eq!(b.probe(), ResourceStatus::Down);
        b.set_down(false);
        assert_eq!(b.probe(), ResourceStatus::Ok);
    }

    #[test]
    fn failure_draw_is_seeded() {
        let t = TaskId::from("t00000042");
        let a: Vec<bool> = (0..50).map(|s| decides_failure(s, &t, 0.5)).collect();
        let b: Vec<bool> = (0..50).map(|s| decides_failure(s, &t, 0.5)).collect();
        assert_eq!(a, b);
        assert!(a.iter().any(|x| *x) && a.iter().any(|x| !*x));
    }
}
