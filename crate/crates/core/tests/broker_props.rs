use std::collections::BTreeMap;

use datadock_core::broker::{
    argmax, score_resource, BackendSpec, DepBonusMode, Residency, Resource, ResourceBroker, ResourceDescriptor,
    ResourceKind, ResourceStatus, ScoreBreakdown, ScoreContext, ScoreRequest, ScoringOptions, SelectionPolicy,
};
use datadock_core::{AppId, Error, ResourceId, TaskId, UserId};
use proptest::prelude::*;

#[derive(Clone, Debug)]
struct World {
    resources: Vec<Resource>,
    /// For each dependency, the index of the resource holding it (if any).
    deps: Vec<Option<usize>>,
    preferred: Option<usize>,
    submitter: UserId,
    avoid_public: bool,
    flat: bool,
}

impl World {
    fn residency(&self) -> Residency {
        let mut r = Residency::default();
        for (i, holder) in self.deps.iter().enumerate() {
            if let Some(h) = holder {
                r.record_task(dep(i), self.resources[*h].id.clone());
            }
        }
        r
    }

    fn request(&self) -> ScoreRequest {
        ScoreRequest {
            task: "t99999999".into(),
            service: "svc".into(),
            deps: (0..self.deps.len()).map(dep).collect(),
            preferred_resource: self.preferred.map(|i| self.resources[i].id.clone()),
        }
    }

    fn scores(&self) -> Vec<ScoreBreakdown> {
        let residency = self.residency();
        let ctx = ScoreContext {
            residency: &residency,
            submitter: &self.submitter,
            avoid_public_resources: self.avoid_public,
            options: ScoringOptions {
                dep_bonus: if self.flat { DepBonusMode::Flat } else { DepBonusMode::PerDependency },
                ..Default::default()
            },
        };
        let req = self.request();
        self.resources.iter().map(|r| score_resource(&req, r, &ctx)).collect()
    }

    fn pick(&self) -> Option<ResourceId> {
        argmax(&self.scores()).map(|s| s.resource.clone())
    }
}

fn dep(i: usize) -> TaskId {
    TaskId(format!("t{:08}", i + 1))
}

fn resource_strategy() -> impl Strategy<Value = (ResourceKind, Option<&'static str>, Option<i64>, bool)> {
    let kind_and_owner = prop_oneof![
        Just((ResourceKind::Public, None)),
        Just((ResourceKind::Shared, None)),
        Just((ResourceKind::Private, Some("alice"))),
        Just((ResourceKind::Private, Some("bob"))),
    ];
    (kind_and_owner, proptest::option::weighted(0.85, 0i64..=20), prop::bool::weighted(0.15))
        .prop_map(|((kind, owner), score, down)| (kind, owner, score, down))
}

fn world() -> impl Strategy<Value = World> {
    proptest::collection::vec(resource_strategy(), 1..7)
        .prop_flat_map(|specs| {
            let n = specs.len();
            (
                Just(specs),
                proptest::collection::vec(proptest::option::of(0..n), 0..5),
                proptest::option::of(0..n),
                prop_oneof![Just("alice"), Just("bob")],
                any::<bool>(),
                prop::bool::weighted(0.25),
            )
        })
        .prop_map(|(specs, deps, preferred, submitter, avoid_public, flat)| World {
            resources: specs
                .into_iter()
                .enumerate()
                .map(|(i, (kind, owner, score, down))| Resource {
                    id: ResourceId(format!("r{i:02}")),
                    name: String::new(),
                    kind,
                    owner: owner.map(UserId::from),
                    enabled_services: score.map(|s| (AppId::from("svc"), s)).into_iter().collect(),
                    status: if down { ResourceStatus::Down } else { ResourceStatus::Ok },
                    geolocation: None,
                    queue_length: 0,
                    backend: BackendSpec::Process,
                })
                .collect(),
            deps,
            preferred,
            submitter: UserId::from(submitter),
            avoid_public,
            flat,
        })
}

fn qualified(w: &World, r: &Resource) -> bool {
    r.enabled_services.contains_key(&AppId::from("svc"))
        && r.status == ResourceStatus::Ok
        && !(w.avoid_public && r.kind == ResourceKind::Public)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn selection_matches_exhaustive_search(w in world()) {
        let scores = w.scores();
        let best = w
            .resources
            .iter()
            .zip(&scores)
            .filter(|(r, _)| qualified(&w, r))
            .map(|(r, s)| (s.total, std::cmp::Reverse(r.id.clone())))
            .max()
            .map(|(_, std::cmp::Reverse(id))| id);
        prop_assert_eq!(w.pick(), best);
    }

    #[test]
    fn disqualified_resources_are_never_selected(w in world()) {
        if let Some(id) = w.pick() {
            let r = w.resources.iter().find(|r| r.id == id).unwrap();
            prop_assert!(qualified(&w, r));
        } else {
            prop_assert!(w.resources.iter().all(|r| !qualified(&w, r)));
        }
    }

    #[test]
    fn raising_the_winner_keeps_it_winning(w in world(), bump in 1i64..10) {
        if let Some(id) = w.pick() {
            let mut better = w.clone();
            let r = better.resources.iter_mut().find(|r| r.id == id).unwrap();
            *r.enabled_services.get_mut(&AppId::from("svc")).unwrap() += bump;
            prop_assert_eq!(better.pick(), Some(id.clone()));
            let mut worse = w.clone();
            for r in worse.resources.iter_mut().filter(|r| r.id != id) {
                if let Some(s) = r.enabled_services.get_mut(&AppId::from("svc")) {
                    *s -= bump;
                }
            }
            prop_assert_eq!(worse.pick(), Some(id));
        }
    }

    #[test]
    fn scores_never_drop_when_data_moves_in(w in world(), target in 0usize..7) {
        let target = target % w.resources.len();
        let before = w.scores();
        let mut more = w.clone();
        more.deps.push(Some(target));
        let after = more.scores();
        for (b, a) in before.iter().zip(&after) {
            if a.resource == w.resources[target].id {
                prop_assert!(a.total >= b.total);
                prop_assert!(a.total <= b.total + 5);
            } else {
                prop_assert_eq!(a.total, b.total);
            }
        }
    }

    #[test]
    fn gravity_pulls_work_to_the_data(k in 1usize..5, n in 2usize..5, base in 0i64..20) {
        let resources: Vec<Resource> = (0..n)
            .map(|i| Resource {
                id: ResourceId(format!("r{i:02}")),
                name: String::new(),
                kind: ResourceKind::Shared,
                owner: None,
                enabled_services: BTreeMap::from([(AppId::from("svc"), base)]),
                status: ResourceStatus::Ok,
                geolocation: None,
                queue_length: 0,
                backend: BackendSpec::Process,
            })
            .collect();
        let holder = n - 1;
        let w = World { resources, deps: vec![Some(holder); k], preferred: None, submitter: UserId::from("alice"), avoid_public: false, flat: false };
        prop_assert_eq!(w.pick(), Some(w.resources[holder].id.clone()));
        let s = &w.scores()[holder];
        prop_assert_eq!(s.dep_bonus, 5 * k as i64);
        let flat = World { flat: true, ..w.clone() };
        prop_assert_eq!(flat.scores()[holder].dep_bonus, 5);
    }

    #[test]
    fn breakdown_adds_up_and_report_lists_everyone(w in world()) {
        for s in w.scores() {
            prop_assert_eq!(s.total, s.base + s.dep_bonus + s.exclusive_bonus + s.preferred_bonus + s.queue_penalty);
            prop_assert_eq!(s.disqualified, s.disqualify_reason.is_some());
        }
        let dir = tempfile::tempdir().unwrap();
        let mut broker = ResourceBroker::open(dir.path()).unwrap();
        for r in &w.resources {
            broker.register_resource(ResourceDescriptor {
                id: r.id.clone(),
                name: r.name.clone(),
                kind: r.kind,
                owner: r.owner.clone(),
                geolocation: None,
                queue_length: 0,
                backend: BackendSpec::Process,
                enabled_services: r.enabled_services.clone(),
            }).unwrap();
            broker.set_status(&r.id, r.status).unwrap();
        }
        let residency = w.residency();
        let ctx = ScoreContext {
            residency: &residency,
            submitter: &w.submitter,
            avoid_public_resources: w.avoid_public,
            options: ScoringOptions {
                dep_bonus: if w.flat { DepBonusMode::Flat } else { DepBonusMode::PerDependency },
                ..Default::default()
            },
        };
        let report = match broker.select_resource(&w.request(), &ctx) {
            Ok(sel) => {
                prop_assert_eq!(Some(sel.resource.clone()), w.pick());
                prop_assert_eq!(&sel.scores, &w.scores());
                sel.report
            }
            Err(Error::NoResource { report, .. }) => {
                prop_assert_eq!(w.pick(), None);
                report
            }
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        for r in &w.resources {
            prop_assert!(report.contains(r.id.as_str()), "report omits {}", r.id);
        }
    }

    #[test]
    fn round_robin_only_visits_qualified_resources(w in world(), rounds in 1usize..12) {
        let dir = tempfile::tempdir().unwrap();
        let mut broker = ResourceBroker::open(dir.path()).unwrap();
        for r in &w.resources {
            broker.register_resource(ResourceDescriptor {
                id: r.id.clone(),
                name: String::new(),
                kind: r.kind,
                owner: r.owner.clone(),
                geolocation: None,
                queue_length: 0,
                backend: BackendSpec::Process,
                enabled_services: r.enabled_services.clone(),
            }).unwrap();
            broker.set_status(&r.id, r.status).unwrap();
        }
        let residency = Residency::default();
        let ctx = ScoreContext {
            residency: &residency,
            submitter: &w.submitter,
            avoid_public_resources: w.avoid_public,
            options: ScoringOptions { policy: SelectionPolicy::RoundRobin, ..Default::default() },
        };
        let ok: Vec<&ResourceId> = w.resources.iter().filter(|r| qualified(&w, r)).map(|r| &r.id).collect();
        for i in 0..rounds {
            match broker.select_resource(&w.request(), &ctx) {
                Ok(sel) => prop_assert_eq!(&sel.resource, ok[i % ok.len()]),
                Err(_) => prop_assert!(ok.is_empty()),
            }
        }
    }
}
