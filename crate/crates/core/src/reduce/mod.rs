//! The reduce step: tidy collation, reference ranges, QA bands and statistics.

mod reference;
mod stats;
mod tidy;

pub use reference::{build_reference, classify_band, classify_table, Band, BandRow, ReferenceEntry, ReferenceRange};
pub use stats::{detect_outliers, fit_polynomial, mean, pearson_r, rmse, sample_sd, PolyFit};
pub use tidy::{parse_feature_payload, Collation, Sidecar, SourceEntry, TidyRow, TidyTable, TIDY_HEADER};

use crate::error::{Error, Result};
use crate::ids::ProjectId;
use crate::num::Real;
use crate::platform::Platform;

impl Platform {
    /// Collates statistical-feature objects of `project` into one tidy table.
    ///
    /// An empty `datatypes` filter selects every statistical-feature datatype.
    /// Malformed payloads are skipped with a diagnostic unless the platform
    /// runs with strict collation.
    pub fn collate_features<T: Real>(&self, project: &ProjectId, datatypes: &[String]) -> Result<Collation<T>> {
        self.warehouse().project(project)?;
        let selected: Vec<String> = if datatypes.is_empty() {
            self.warehouse()
                .datatypes()
                .filter(|d| d.is_statistical_feature)
                .map(|d| d.name.clone())
                .collect()
        } else {
            for name in datatypes {
                if !self.warehouse().datatype(name)?.is_statistical_feature {
                    return Err(Error::validation(format!(
                        "datatype {name} is not a statistical feature"
                    )));
                }
            }
            datatypes.to_vec()
        };

        let mut objects: Vec<_> = self
            .warehouse()
            .objects()
            .filter(|o| &o.project == project && selected.contains(&o.datatype))
            .collect();
        objects.sort_by(|a, b| (&a.subject, &a.session, &a.id).cmp(&(&b.subject, &b.session, &b.id)));

        let mut out = Collation {
            table: TidyTable::default(),
            sidecar: Sidecar { sources: Vec::new(), generated_at: self.now() },
            diagnostics: Vec::new(),
        };
        for obj in objects {
            let dt = self.warehouse().datatype(&obj.datatype)?;
            let parsed = match &dt.feature_table {
                None => Err(Error::validation(format!("datatype {} declares no feature table", dt.name))),
                Some(layout) => self
                    .warehouse()
                    .read_object_file(&obj.id, layout.file())
                    .and_then(|bytes| {
                        let bytes = bytes.ok_or_else(|| Error::validation(format!("{} missing", layout.file())))?;
                        let text = String::from_utf8(bytes)
                            .map_err(|_| Error::validation("payload is not UTF-8"))?;
                        parse_feature_payload::<T>(&text, layout)
                    }),
            };
            let triples = match parsed {
                Ok(t) => t,
                Err(e) if self.config().strict_collation => return Err(e),
                Err(e) => {
                    log::warn!("collate: skipping {}: {e}", obj.id);
                    out.diagnostics.push(format!("{}: {e}", obj.id));
                    continue;
                }
            };
            for (structure, measure, value) in triples {
                out.table.rows.push(TidyRow {
                    subject: obj.subject.clone(),
                    session: obj.session.clone(),
                    datatype: obj.datatype.clone(),
                    structure,
                    measure,
                    value,
                    source_object: obj.id.clone(),
                });
            }
            let record = self.provenance().get(&obj.id);
            out.sidecar.sources.push(SourceEntry {
                object: obj.id.clone(),
                task: record.map(|r| r.task.clone()),
                app: record.map(|r| r.app.clone()),
                app_version: record.map(|r| r.app_version.clone()),
            });
        }
        Ok(out)
    }
}
