use std::fs;
use std::path::{Path, PathBuf};

use datadock_core::broker::{BackendSpec, ResourceDescriptor, ResourceKind};
use datadock_core::registry::Slot;
use datadock_core::sim::{write_service, SimProfile, SyntheticApp, SyntheticOutput};
use datadock_core::AppId;

pub const BLOB: &str = "test/blob";

/// Input files and service definitions that live outside any store.
pub struct Fixtures {
    pub dir: tempfile::TempDir,
}

impl Fixtures {
    pub fn new() -> Self {
        Self { dir: tempfile::tempdir().unwrap() }
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    /// A directory holding a single `name` file.
    pub fn upload_dir(&self, label: &str, name: &str, body: &str) -> PathBuf {
        let dir = self.path().join("uploads").join(label);
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join(name), body).unwrap();
        dir
    }

    /// Writes a one-input blob service and returns its directory.
    pub fn service(&self, name: &str) -> PathBuf {
        let app = SyntheticApp {
            name: name.into(),
            version: "1.0".into(),
            inputs: vec![Slot::new("in", BLOB)],
            outputs: vec![SyntheticOutput {
                slot: Slot::new("out", BLOB),
                files: vec!["blob.txt".into()],
                features: None,
            }],
        };
        let dir = self.path().join("services").join(name);
        write_service(&dir, &app).unwrap();
        dir
    }

    pub fn resource(&self, id: &str, app: &AppId) -> ResourceDescriptor {
        ResourceDescriptor {
            id: id.into(),
            name: id.into(),
            kind: ResourceKind::Shared,
            owner: None,
            geolocation: None,
            queue_length: 0,
            backend: BackendSpec::Sim(SimProfile { latency_ticks: 1, ..Default::default() }),
            enabled_services: [(app.clone(), 10)].into(),
        }
    }

    pub fn resource_file(&self, id: &str, app: &AppId) -> PathBuf {
        let path = self.path().join(format!("{id}.json"));
        fs::write(&path, serde_json::to_string(&self.resource(id, app)).unwrap()).unwrap();
        path
    }
}
