//! ABCD hook execution.
//!
//! Every service exposes three executables at the root of its work dir:
//! `start` launches the job (and may write a `jobid` file), `status` reports
//! progress through its exit code, `stop` terminates the job.

use std::fs::{self, OpenOptions};
use std::path::Path;
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::broker::ResourceStatus;
use crate::error::{Error, Result};
use crate::ids::{TaskId, Tick};

/// Exit-code protocol of the `status` hook.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatusCode {
    Running = 0,
    Finished = 1,
    Failed = 2,
    Unknown = 3,
}

impl StatusCode {
    pub fn from_exit(code: Option<i32>) -> Self {
        match code {
            Some(0) => StatusCode::Running,
            Some(1) => StatusCode::Finished,
            Some(2) => StatusCode::Failed,
            _ => StatusCode::Unknown,
        }
    }

    pub fn code(self) -> i32 {
        self as i32
    }
}

pub struct HookContext<'a> {
    pub task: &'a TaskId,
    pub work_dir: &'a Path,
    pub now: Tick,
}

/// A compute resource's job-control surface.
pub trait ExecBackend: Send {
    /// Liveness probe used by the resource monitor.
    fn probe(&mut self) -> ResourceStatus;

    /// Runs `start`; returns the backend job id. An error means the start failed.
    fn start(&mut self, ctx: &HookContext<'_>) -> Result<String>;

    fn status(&mut self, ctx: &HookContext<'_>) -> Result<StatusCode>;

    fn stop(&mut self, ctx: &HookContext<'_>) -> Result<()>;
}

/// Runs `<work_dir>/<hook>` with the work dir as cwd; output goes to `_<hook>.log`.
pub fn run_hook(work_dir: &Path, hook: &str) -> Result<Option<i32>> {
    let path = work_dir.join(hook);
    if !path.is_file() {
        return Err(Error::Contract(format!("{hook} missing")));
    }
    let log_path = work_dir.join(format!("_{hook}.log"));
    let log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::storage(&log_path, e))?;
    let err_log = log.try_clone().map_err(|e| Error::storage(&log_path, e))?;
    let status = Command::new(&path)
        .current_dir(work_dir)
        .stdin(Stdio::null())
        .stdout(Stdio::from(log))
        .stderr(Stdio::from(err_log))
        .status()
        .map_err(|e| Error::Contract(format!("cannot execute {hook}: {e}")))?;
    Ok(status.code())
}

/// Reads the `jobid` file written by `start`, if any.
pub fn read_jobid(work_dir: &Path) -> Option<String> {
    fs::read_to_string(work_dir.join("jobid"))
        .ok()
        .map(|s| s.trim().to_owned())
        .filter(|s| !s.is_empty())
}

/// Hooks run directly as local subprocesses.
#[derive(Debug, Default)]
pub struct ProcessBackend {
    resource: String,
}

impl ProcessBackend {
    pub fn new(resource: impl Into<String>) -> Self {
        Self {
            resource: resource.into(),
        }
    }
}

impl ExecBackend for ProcessBackend {
    fn probe(&mut self) -> ResourceStatus {
        ResourceStatus::Ok
    }

    fn start(&mut self, ctx: &HookContext<'_>) -> Result<String> {
        match run_hook(ctx.work_dir, "start")? {
            Some(0) => Ok(read_jobid(ctx.work_dir)
                .unwrap_or_else(|| format!("{}:{}", self.resource, ctx.task))),
            code => Err(Error::Contract(format!("start exited with {code:?}"))),
        }
    }

    fn status(&mut self, ctx: &HookContext<'_>) -> Result<StatusCode> {
        Ok(StatusCode::from_exit(run_hook(ctx.work_dir, "status")?))
    }

    fn stop(&mut self, ctx: &HookContext<'_>) -> Result<()> {
        match run_hook(ctx.work_dir, "stop")? {
            Some(0) => Ok(()),
            code => Err(Error::Contract(format!("stop exited with {code:?}"))),
        }
    }
}
