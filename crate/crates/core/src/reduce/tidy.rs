//! Tidy long-format feature tables and their JSON sidecar.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{AppId, ObjectId, TaskId, Tick};
use crate::num::Real;
use crate::persist;
use crate::warehouse::FeatureTable;

pub const TIDY_HEADER: &str = "subject\tsession\tdatatype\tstructure\tmeasure\tvalue\tsource_object";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TidyRow<T> {
    pub subject: String,
    pub session: Option<String>,
    pub datatype: String,
    pub structure: String,
    pub measure: String,
    pub value: T,
    pub source_object: ObjectId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TidyTable<T> {
    pub rows: Vec<TidyRow<T>>,
}

impl<T> Default for TidyTable<T> {
    fn default() -> Self {
        Self { rows: Vec::new() }
    }
}

impl<T: Real> TidyTable<T> {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from(TIDY_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.subject,
                r.session.as_deref().unwrap_or(""),
                r.datatype,
                r.structure,
                r.measure,
                r.value,
                r.source_object
            );
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == TIDY_HEADER => {}
            other => {
                return Err(Error::validation(format!("unexpected tidy header {other:?}")))
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(Error::validation(format!("line {}: expected 7 fields", i + 2)));
            }
            let value: f64 = f[5]
                .parse()
                .map_err(|_| Error::validation(format!("line {}: bad value {:?}", i + 2, f[5])))?;
            rows.push(TidyRow {
                subject: f[0].to_owned(),
                session: (!f[1].is_empty()).then(|| f[1].to_owned()),
                datatype: f[2].to_owned(),
                structure: f[3].to_owned(),
                measure: f[4].to_owned(),
                value: T::from_f64_lossy(value),
                source_object: ObjectId::from(f[6]),
            });
        }
        Ok(Self { rows })
    }

    /// Values grouped by (structure, measure).
    pub fn groups(&self) -> BTreeMap<(String, String), Vec<T>> {
        let mut out: BTreeMap<(String, String), Vec<T>> = BTreeMap::new();
        for r in &self.rows {
            out.entry((r.structure.clone(), r.measure.clone()))
                .or_default()
                .push(r.value);
        }
        out
    }

    pub fn datatypes(&self) -> BTreeSet<&str> {
        self.rows.iter().map(|r| r.datatype.as_str()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceEntry {
    pub object: ObjectId,
    pub task: Option<TaskId>,
    pub app: Option<AppId>,
    pub app_version: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sidecar {
    pub sources: Vec<SourceEntry>,
    pub generated_at: Tick,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Collation<T> {
    pub table: TidyTable<T>,
    pub sidecar: Sidecar,
    /// One line per skipped object.
    pub diagnostics: Vec<String>,
}

impl<T: Real> Collation<T> {
    /// Writes `<stem>.tsv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        persist::write_atomic(&dir.join(format!("{stem}.tsv")), self.table.to_tsv().as_bytes())?;
        persist::write_json(&dir.join(format!("{stem}.json")), &self.sidecar)
    }
}

/// Parses one statistical-feature payload into `(structure, measure, value)` triples.
pub fn parse_feature_payload<T: Real>(text: &str, layout: &FeatureTable) -> Result<Vec<(String, String, T)>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::validation("empty feature table"))?
        .split('\t')
        .collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| Error::validation(format!("column {name} missing")))
    };
    let parse = |s: &str, line: usize| -> Result<T> {
        let v: f64 = s
            .trim()
            .parse()
            .map_err(|_| Error::validation(format!("line {line}: non-numeric value {s:?}")))?;
        if !v.is_finite() {
            return Err(Error::validation(format!("line {line}: non-finite value")));
        }
        Ok(T::from_f64_lossy(v))
    };
    let mut out = Vec::new();
    match layout {
        FeatureTable::Long { structure_column, measure_column, value_column, .. } => {
            let (si, mi, vi) = (col(structure_column)?, col(measure_column)?, col(value_column)?);
            for (n, line) in lines.enumerate() {
                let f: Vec<&str> = line.split('\t').collect();
                let get = |i: usize| {
                    f.get(i)
                        .copied()
                        .ok_or_else(|| Error::validation(format!("line {}: too few fields", n + 2)))
                };
                out.push((get(si)?.to_owned(), get(mi)?.to_owned(), parse(get(vi)?, n + 2)?));
            }
        }
        FeatureTable::Wide { structure_column, measure_columns, .. } => {
            let si = col(structure_column)?;
            let mcols = measure_columns
                .iter()
                .map(|m| col(m).map(|i| (m, i)))
                .collect::<Result<Vec<_>>>()?;
            for (n, line) in lines.enumerate() {
                let f: Vec<&str> = line.split('\t').collect();
                let get = |i: usize| {
                    f.get(i)
                        .copied()
                        .ok_or_else(|| Error::validation(format!("line {}: too few fields", n + 2)))
                };
                let structure = get(si)?;
                for (m, i) in &mcols {
                    out.push((structure.to_owned(), (*m).clone(), parse(get(*i)?, n + 2)?));
                }
            }
        }
    }
    let mut seen = BTreeSet::new();
    for (s, m, _) in &out {
        if !seen.insert((s, m)) {
            return Err(Error::validation(format!("duplicate entry for {s}/{m}")));
        }
    }
    Ok(out)
}
