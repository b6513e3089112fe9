//! CSV forms of the feature table and the per-lesion table.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FeatureError, FeatureRegistry, FeatureVector};

/// Registry-aligned rows, one per patient.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    /// Hash of the registry the columns came from, when known.
    pub registry_hash: Option<String>,
    pub names: Vec<String>,
    pub rows: Vec<FeatureVector>,
}

impl FeatureTable {
    pub fn new(registry: &FeatureRegistry, rows: Vec<FeatureVector>) -> Self {
        Self {
            registry_hash: Some(registry.hash()),
            names: registry.names(),
            rows,
        }
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Writes `# registry=<hash> features=<n>` followed by the CSV body.
    /// Floats use the shortest representation that parses back to the same
    /// bits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), FeatureError> {
        writeln!(
            out,
            "# registry={} features={}",
            self.registry_hash.as_deref().unwrap_or("none"),
            self.names.len()
        )?;
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["patientId".to_string(), "label".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for row in &self.rows {
            if row.values.len() != self.names.len() {
                return Err(FeatureError::Table(format!(
                    "row {} has {} values for {} columns",
                    row.patient_id,
                    row.values.len(),
                    self.names.len()
                )));
            }
            let mut rec = vec![row.patient_id.clone(), row.label.to_string()];
            rec.extend(row.values.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FeatureError> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, FeatureError> {
        let mut reader = BufReader::new(input);
        let mut registry_hash = None;
        let mut first = String::new();
        reader.read_line(&mut first)?;
        let rest: Box<dyn Read> = if let Some(comment) = first.strip_prefix('#') {
            registry_hash = comment
                .split_whitespace()
                .find_map(|tok| tok.strip_prefix("registry="))
                .filter(|h| *h != "none")
                .map(str::to_string);
            Box::new(reader)
        } else {
            Box::new(std::io::Cursor::new(first.into_bytes()).chain(reader))
        };
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(rest);
        let header = r.headers()?.clone();
        if header.get(0) != Some("patientId") {
            return Err(FeatureError::Table("first column must be patientId".into()));
        }
        if header.get(1) != Some("label") {
            return Err(FeatureError::Table("label column missing".into()));
        }
        let names: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
        let mut rows = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let patient_id = rec[0].to_string();
            let label: u8 = match &rec[1] {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(FeatureError::Table(format!(
                        "row {}: label must be 0 or 1, got {other:?}",
                        line + 1
                    )))
                }
            };
            let mut values = Vec::with_capacity(names.len());
            for (k, cell) in rec.iter().skip(2).enumerate() {
                let v: f64 = cell.trim().parse().map_err(|_| {
                    FeatureError::Table(format!("row {}: column {} is not a number: {cell:?}", line + 1, names[k]))
                })?;
                if !v.is_finite() {
                    return Err(FeatureError::Table(format!(
                        "row {}: column {} is not finite",
                        line + 1,
                        names[k]
                    )));
                }
                values.push(v);
            }
            rows.push(FeatureVector {
                patient_id,
                values,
                label,
            });
        }
        Ok(Self {
            registry_hash,
            names,
            rows,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FeatureError> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LesionRecord {
    pub patient_id: String,
    pub lesion_id: usize,
    pub artery: String,
    pub voxel_count: usize,
    #[serde(rename = "peakHU")]
    pub peak_hu: i16,
    #[serde(rename = "meanHU")]
    pub mean_hu: f64,
    #[serde(rename = "agatston2D")]
    pub agatston_2d: f64,
    pub volume_score: f64,
    pub mass_score: f64,
}

pub fn write_lesion_csv<W: Write>(out: W, records: &[LesionRecord]) -> Result<(), FeatureError> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_lesion_csv<R: Read>(input: R) -> Result<Vec<LesionRecord>, FeatureError> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<Result<Vec<_>, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(values: Vec<Vec<f64>>) -> FeatureTable {
        let names = (0..values[0].len()).map(|i| format!("f{i}")).collect();
        FeatureTable {
            registry_hash: Some("abc".into()),
            names,
            rows: values
                .into_iter()
                .enumerate()
                .map(|(i, v)| FeatureVector {
                    patient_id: format!("p,{i}"),
                    values: v,
                    label: (i % 2) as u8,
                })
                .collect(),
        }
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_bit_exact(rows in prop::collection::vec(prop::collection::vec(-1e12f64..1e12, 3), 1..6)) {
            let t = table(rows);
            let mut buf = Vec::new();
            t.write_csv(&mut buf).unwrap();
            let back = FeatureTable::read_csv(buf.as_slice()).unwrap();
            prop_assert_eq!(&back.names, &t.names);
            for (a, b) in back.rows.iter().zip(&t.rows) {
                prop_assert_eq!(&a.patient_id, &b.patient_id);
                for (x, y) in a.values.iter().zip(&b.values) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
            prop_assert_eq!(back.registry_hash.as_deref(), Some("abc"));
        }
    }

    #[test]
    fn tiny_and_huge_values_survive() {
        let t = table(vec![vec![1e-300, 0.1 + 0.2, 5e300]]);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(FeatureTable::read_csv(buf.as_slice()).unwrap().rows, t.rows);
    }

    #[test]
    fn rejects_nan_and_missing_label() {
        let bad = "patientId,label,a\np1,0,NaN\n";
        assert!(FeatureTable::read_csv(bad.as_bytes()).is_err());
        let nolabel = "patientId,a\np1,1.0\n";
        let err = FeatureTable::read_csv(nolabel.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("label column missing"));
        let ok = "patientId,label,a\np1,1,2.5\n";
        let t = FeatureTable::read_csv(ok.as_bytes()).unwrap();
        assert_eq!(t.registry_hash, None);
        assert_eq!(t.rows[0].values, vec![2.5]);
    }

    #[test]
    fn lesion_csv_round_trip() {
        let recs = vec![LesionRecord {
            patient_id: "p1".into(),
            lesion_id: 0,
            artery: "LAD".into(),
            voxel_count: 4,
            peak_hu: 300,
            mean_hu: 300.0,
            agatston_2d: 3.0,
            volume_score: 2.5,
            mass_score: 0.75,
        }];
        let mut buf = Vec::new();
        write_lesion_csv(&mut buf, &recs).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("patientId,lesionId,artery,voxelCount,peakHU"));
        assert_eq!(read_lesion_csv(buf.as_slice()).unwrap(), recs);
    }
}
