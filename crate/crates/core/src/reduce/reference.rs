//! Reference ranges and ±1/±2 SD quality bands.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::ObjectId;
use crate::num::Real;
use crate::persist;

use super::stats::{detect_outliers, mean, sample_sd};
use super::tidy::TidyTable;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ReferenceEntry<T> {
    pub structure: String,
    pub measure: String,
    pub mean: T,
    pub sd: T,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ReferenceRange<T> {
    pub datatype: String,
    pub source: String,
    pub entries: Vec<ReferenceEntry<T>>,
}

impl<T: Real> ReferenceRange<T> {
    pub fn entry(&self, structure: &str, measure: &str) -> Option<&ReferenceEntry<T>> {
        self.entries
            .iter()
            .find(|e| e.structure == structure && e.measure == measure)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reference serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        persist::write_atomic(path, self.to_json().as_bytes())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Within1,
    Within2,
    Outside2,
}

/// Edges are inclusive inward: |z| = 1 is `Within1`, |z| = 2 is `Within2`.
pub fn classify_band<T: Real>(value: T, mean: T, sd: T) -> Band {
    let dev = (value - mean).abs();
    if sd == T::zero() {
        return if dev == T::zero() { Band::Within1 } else { Band::Outside2 };
    }
    let z = dev / sd;
    if z <= T::one() {
        Band::Within1
    } else if z <= T::lit(2.0) {
        Band::Within2
    } else {
        Band::Outside2
    }
}

/// Builds a reference range from one datatype's rows.
///
/// Each (structure, measure) group is curated with [`detect_outliers`] at
/// threshold `k` (`None` keeps every value); groups left with fewer than two
/// values are omitted and reported in the returned diagnostics.
pub fn build_reference<T: Real>(
    table: &TidyTable<T>,
    source: &str,
    k: Option<T>,
) -> Result<(ReferenceRange<T>, Vec<String>)> {
    if table.rows.is_empty() {
        return Err(Error::InsufficientData("reference needs a nonempty table".into()));
    }
    let datatypes = table.datatypes();
    if datatypes.len() != 1 {
        return Err(Error::validation(format!(
            "reference tables must hold one datatype, found {}",
            datatypes.len()
        )));
    }
    let datatype = datatypes.into_iter().next().expect("one datatype").to_owned();
    let mut entries = Vec::new();
    let mut diagnostics = Vec::new();
    for ((structure, measure), values) in table.groups() {
        let kept: Vec<T> = match (k, values.len()) {
            (Some(k), n) if n >= 2 => {
                let mask = detect_outliers(&values, k)?;
                values
                    .iter()
                    .zip(mask)
                    .filter(|(_, out)| !out)
                    .map(|(v, _)| *v)
                    .collect()
            }
            _ => values,
        };
        if kept.len() < 2 {
            diagnostics.push(format!(
                "{structure}/{measure}: {} value(s) after curation, omitted",
                kept.len()
            ));
            continue;
        }
        entries.push(ReferenceEntry {
            structure,
            measure,
            mean: mean(&kept)?,
            sd: sample_sd(&kept)?,
            n: kept.len(),
        });
    }
    Ok((
        ReferenceRange {
            datatype,
            source: source.to_owned(),
            entries,
        },
        diagnostics,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct BandRow<T> {
    pub subject: String,
    pub structure: String,
    pub measure: String,
    pub value: T,
    pub band: Band,
    pub source_object: ObjectId,
}

/// Classifies every row that has a matching reference entry.
pub fn classify_table<T: Real>(table: &TidyTable<T>, reference: &ReferenceRange<T>) -> Vec<BandRow<T>> {
    table
        .rows
        .iter()
        .filter(|r| r.datatype == reference.datatype)
        .filter_map(|r| {
            let e = reference.entry(&r.structure, &r.measure)?;
            Some(BandRow {
                subject: r.subject.clone(),
                structure: r.structure.clone(),
                measure: r.measure.clone(),
                value: r.value,
                band: classify_band(r.value, e.mean, e.sd),
                source_object: r.source_object.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reduce::tidy::TidyRow;

    fn table(values: &[f64]) -> TidyTable<f64> {
        TidyTable {
            rows: values
                .iter()
                .enumerate()
                .map(|(i, v)| TidyRow {
                    subject: format!("s{i}"),
                    session: None,
                    datatype: "x/feat".into(),
                    structure: "L".into(),
                    measure: "vol".into(),
                    value: *v,
                    source_object: format!("d{i}").into(),
                })
                .collect(),
        }
    }

    #[test]
    fn band_edges() {
        assert_eq!(classify_band(5.0, 5.0, 1.0), Band::Within1);
        assert_eq!(classify_band(6.0, 5.0, 1.0), Band::Within1);
        assert_eq!(classify_band(6.5, 5.0, 1.0), Band::Within2);
        assert_eq!(classify_band(7.0, 5.0, 1.0), Band::Within2);
        assert_eq!(classify_band(8.0, 5.0, 1.0), Band::Outside2);
        assert_eq!(classify_band(5.0, 5.0, 0.0), Band::Within1);
        assert_eq!(classify_band(5.1, 5.0, 0.0), Band::Outside2);
    }

    #[test]
    fn reference_of_one_two_three() {
        let (r, diag) = build_reference(&table(&[1.0, 2.0, 3.0]), "test", Some(2.0)).unwrap();
        assert!(diag.is_empty());
        let e = &r.entries[0];
        assert_eq!((e.mean, e.sd, e.n), (2.0, 1.0, 3));
    }

    #[test]
    fn outlier_excluded_from_reference() {
        let mut v = vec![0.0; 99];
        v.push(10.0);
        let (cur, _) = build_reference(&table(&v), "t", Some(2.0)).unwrap();
        let (raw, _) = build_reference(&table(&v), "t", None).unwrap();
        assert_eq!(cur.entries[0].n, 99);
        assert_eq!(cur.entries[0].mean, 0.0);
        assert!((raw.entries[0].mean - 0.1).abs() < 1e-12);
    }

    #[test]
    fn constant_group_has_zero_sd_and_small_groups_are_dropped() {
        let (r, _) = build_reference(&table(&[4.0, 4.0, 4.0]), "t", Some(2.0)).unwrap();
        assert_eq!(r.entries[0].sd, 0.0);
        let (r, diag) = build_reference(&table(&[4.0]), "t", Some(2.0)).unwrap();
        assert!(r.entries.is_empty());
        assert_eq!(diag.len(), 1);
        assert!(build_reference(&table(&[]), "t", Some(2.0)).is_err());
    }

    #[test]
    fn json_round_trip_is_byte_identical() {
        let (r, _) = build_reference(&table(&[0.1, 0.2, 0.7, 1.0 / 3.0]), "t", None).unwrap();
        let a = r.to_json();
        let b = ReferenceRange::<f64>::from_json(&a).unwrap().to_json();
        assert_eq!(a, b);
    }
}
