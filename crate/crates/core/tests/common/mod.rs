#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use datadock_core::broker::{BackendSpec, ResourceDescriptor, ResourceKind};
use datadock_core::pipeline::{InputSelector, RuleDefinition};
use datadock_core::registry::Slot;
use datadock_core::sim::{FeatureOutput, SimProfile, SyntheticApp, SyntheticOutput};
use datadock_core::warehouse::{ArchiveRequest, DataObject, DatatypeFlags, FeatureTable, FileSpec};
use datadock_core::{AppId, Platform, PlatformConfig, ProjectId, RuleId, UserId};
use tempfile::TempDir;

pub mod dag;

pub const BLOB: &str = "test/blob";
pub const FEATURES: &str = "test/features";

pub struct World {
    pub dir: TempDir,
    pub p: Platform,
    pub owner: UserId,
    pub project: ProjectId,
}

impl World {
    pub fn new() -> Self {
        Self::with_config(PlatformConfig::default())
    }

    pub fn with_config(config: PlatformConfig) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut p = Platform::open(dir.path(), config).unwrap();
        let owner = UserId::from("alice");
        let project = p.create_project(&owner, "study").unwrap().id;
        p.register_datatype(BLOB, vec![FileSpec::required("blob.txt")], DatatypeFlags::default())
            .unwrap();
        p.register_datatype(
            FEATURES,
            vec![FileSpec::required("features.tsv")],
            DatatypeFlags {
                is_statistical_feature: true,
                bids_compatible: false,
                feature_table: Some(FeatureTable::Long {
                    file: "features.tsv".into(),
                    structure_column: "structure".into(),
                    measure_column: "measure".into(),
                    value_column: "value".into(),
                }),
            },
        )
        .unwrap();
        Self { dir, p, owner, project }
    }

    pub fn root(&self) -> &Path {
        self.dir.path()
    }

    /// Reopens the platform from disk, as after a restart.
    pub fn reopen(&mut self) {
        let config = self.p.config().clone();
        self.p = Platform::open(self.dir.path(), config).unwrap();
    }

    pub fn staging(&self, name: &str) -> PathBuf {
        let d = self.dir.path().join("staging").join(name);
        fs::create_dir_all(&d).unwrap();
        d
    }

    pub fn upload(&mut self, subject: &str, tags: &[&str], content: &str) -> DataObject {
        let n = self.p.warehouse().objects().count();
        let dir = self.staging(&format!("up-{n}"));
        fs::write(dir.join("blob.txt"), content).unwrap();
        self.p
            .upload_object(ArchiveRequest {
                project: self.project.clone(),
                datatype: BLOB.into(),
                source_dir: dir,
                datatype_tags: vec![],
                tags: tags.iter().map(|t| t.to_string()).collect(),
                subject: subject.into(),
                session: None,
                provenance_task: None,
            })
            .unwrap()
    }

    /// A synthetic blob-to-blob app with the given input slots.
    pub fn blob_app(&mut self, name: &str, inputs: &[&str]) -> AppId {
        let app = SyntheticApp {
            name: name.into(),
            version: "1.0".into(),
            inputs: inputs.iter().map(|s| Slot::new(*s, BLOB)).collect(),
            outputs: vec![SyntheticOutput {
                slot: Slot::new("out", BLOB),
                files: vec!["blob.txt".into()],
                features: None,
            }],
        };
        let dir = self.dir.path().join("services").join(name);
        self.p.register_synthetic_app(&dir, &app).unwrap().id
    }

    /// A synthetic app turning one blob into a statistical-feature table.
    pub fn feature_app(&mut self, name: &str, structures: &[&str], measures: &[&str]) -> AppId {
        let app = SyntheticApp {
            name: name.into(),
            version: "1.0".into(),
            inputs: vec![Slot::new("in", BLOB)],
            outputs: vec![SyntheticOutput {
                slot: Slot::new("features", FEATURES),
                files: vec![],
                features: Some(FeatureOutput {
                    file: "features.tsv".into(),
                    structures: structures.iter().map(|s| s.to_string()).collect(),
                    measures: measures.iter().map(|s| s.to_string()).collect(),
                }),
            }],
        };
        let dir = self.dir.path().join("services").join(name);
        self.p.register_synthetic_app(&dir, &app).unwrap().id
    }

    pub fn sim_resource(&mut self, id: &str, profile: SimProfile, apps: &[(&AppId, i64)]) {
        self.p
            .register_resource(ResourceDescriptor {
                id: id.into(),
                name: id.into(),
                kind: ResourceKind::Shared,
                owner: None,
                geolocation: None,
                queue_length: 0,
                backend: BackendSpec::Sim(profile),
                enabled_services: apps.iter().map(|(a, s)| ((*a).clone(), *s)).collect(),
            })
            .unwrap();
    }

    pub fn rule(&mut self, app: &AppId, selectors: &[(&str, &str, &[&str])], output_tags: &[&str]) -> RuleId {
        self.p
            .define_rule(RuleDefinition {
                project: self.project.clone(),
                app: app.clone(),
                input_selectors: selectors
                    .iter()
                    .map(|(slot, dt, tags)| {
                        (
                            slot.to_string(),
                            InputSelector {
                                datatype: dt.to_string(),
                                include_tags: tags.iter().map(|t| t.to_string()).collect(),
                                exclude_tags: vec![],
                            },
                        )
                    })
                    .collect::<BTreeMap<_, _>>(),
                config: BTreeMap::new(),
                output_tags: output_tags.iter().map(|t| t.to_string()).collect(),
            })
            .unwrap()
            .id
    }

    /// Ticks until every task is terminal or `budget` runs out.
    pub fn settle(&mut self, budget: u64) -> u64 {
        for i in 0..budget {
            if self.p.tasks().tasks().all(|t| t.state.is_terminal()) {
                return i;
            }
            self.p.tick().unwrap();
        }
        budget
    }
}

pub fn quick() -> SimProfile {
    SimProfile { latency_ticks: 0, ..Default::default() }
}
