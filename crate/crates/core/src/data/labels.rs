//! Label tables in the ChestX-ray14 metadata layout.
//!
//! ```text
//! Image Index,Finding Labels,Patient ID
//! 00000001_000.png,Cardiomegaly|Emphysema,1
//! 00000002_000.png,No Finding,2
//! ```
//!
//! Extra columns are ignored on input, so the public metadata file can be
//! read directly. Findings are written in canonical order.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, ParseErrorKind, Result};

/// The fourteen pathologies, in the conventional reporting order.
pub const PATHOLOGIES: [&str; 14] = [
    "Atelectasis",
    "Cardiomegaly",
    "Effusion",
    "Infiltration",
    "Mass",
    "Nodule",
    "Pneumonia",
    "Pneumothorax",
    "Consolidation",
    "Edema",
    "Emphysema",
    "Fibrosis",
    "Pleural Thickening",
    "Hernia",
];

pub const NO_FINDING: &str = "No Finding";

const COL_IMAGE: &str = "Image Index";
const COL_LABELS: &str = "Finding Labels";
const COL_PATIENT: &str = "Patient ID";

/// Canonical spelling of a pathology name. The public metadata writes
/// `Pleural_Thickening`; both spellings are accepted.
pub fn canonical_pathology(name: &str) -> Option<&'static str> {
    let name = name.trim();
    PATHOLOGIES
        .iter()
        .copied()
        .find(|p| *p == name || p.replace(' ', "_") == name)
}

pub fn pathology_index(name: &str) -> Option<usize> {
    let canonical = canonical_pathology(name)?;
    PATHOLOGIES.iter().position(|p| *p == canonical)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelRecord {
    pub image_id: String,
    pub patient_id: String,
    /// Canonical pathology names, in [`PATHOLOGIES`] order, without
    /// duplicates. Empty means no finding.
    pub labels: Vec<&'static str>,
}

impl LabelRecord {
    pub fn has(&self, pathology: &str) -> bool {
        self.labels.contains(&pathology)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelTable {
    records: Vec<LabelRecord>,
    ids: HashSet<String>,
}

impl LabelTable {
    pub fn new() -> Self {
        LabelTable::default()
    }

    /// Adds a row. Label names are canonicalized and sorted; unknown names
    /// and repeated image ids are rejected.
    pub fn push<'a>(
        &mut self,
        image_id: &str,
        patient_id: &str,
        labels: impl IntoIterator<Item = &'a str>,
    ) -> Result<()> {
        let mut indices = Vec::new();
        for name in labels {
            let i = pathology_index(name)
                .ok_or_else(|| Error::Config(format!("unknown pathology {name:?}")))?;
            indices.push(i);
        }
        self.push_indices(image_id, patient_id, indices)
    }

    fn push_indices(
        &mut self,
        image_id: &str,
        patient_id: &str,
        mut indices: Vec<usize>,
    ) -> Result<()> {
        if image_id.is_empty() || patient_id.is_empty() {
            return Err(Error::Config(
                "image and patient ids must be non-empty".into(),
            ));
        }
        if !self.ids.insert(image_id.to_string()) {
            return Err(Error::Config(format!("duplicate image id {image_id:?}")));
        }
        indices.sort_unstable();
        indices.dedup();
        self.records.push(LabelRecord {
            image_id: image_id.to_string(),
            patient_id: patient_id.to_string(),
            labels: indices.into_iter().map(|i| PATHOLOGIES[i]).collect(),
        });
        Ok(())
    }

    pub fn records(&self) -> &[LabelRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&LabelRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }

    /// Rows whose image id passes `keep`, in table order.
    pub fn filter(&self, mut keep: impl FnMut(&LabelRecord) -> bool) -> LabelTable {
        let records: Vec<_> = self.records.iter().filter(|r| keep(r)).cloned().collect();
        let ids = records.iter().map(|r| r.image_id.clone()).collect();
        LabelTable { records, ids }
    }

    pub fn from_reader(reader: impl Read, source: &str) -> Result<Self> {
        let mut csv = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = csv
            .headers()
            .map_err(|e| Error::malformed(source, 1, e.to_string()))?
            .clone();
        let column = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim_start_matches('\u{feff}') == name)
                .ok_or_else(|| Error::parse(source, 1, ParseErrorKind::MissingColumn(name.into())))
        };
        let (ci, cl, cp) = (
            column(COL_IMAGE)?,
            column(COL_LABELS)?,
            column(COL_PATIENT)?,
        );
        let mut table = LabelTable::new();
        for record in csv.records() {
            let record = record.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                Error::malformed(source, line, e.to_string())
            })?;
            let line = record.position().map_or(0, |p| p.line());
            let image = &record[ci];
            let patient = &record[cp];
            if image.is_empty() || patient.is_empty() {
                return Err(Error::malformed(source, line, "empty image or patient id"));
            }
            let mut indices = Vec::new();
            let findings = &record[cl];
            if findings != NO_FINDING && !findings.is_empty() {
                for token in findings.split('|') {
                    let i = pathology_index(token).ok_or_else(|| {
                        Error::parse(
                            source,
                            line,
                            ParseErrorKind::UnknownLabel(token.trim().into()),
                        )
                    })?;
                    indices.push(i);
                }
            }
            if table.ids.contains(image) {
                return Err(Error::parse(
                    source,
                    line,
                    ParseErrorKind::DuplicateImage(image.into()),
                ));
            }
            table.push_indices(image, patient, indices)?;
        }
        Ok(table)
    }

    pub fn write_to(&self, writer: impl Write) -> Result<()> {
        let mut csv = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| Error::io("<label csv>", e.into());
        csv.write_record([COL_IMAGE, COL_LABELS, COL_PATIENT])
            .map_err(io)?;
        for r in &self.records {
            let findings = if r.labels.is_empty() {
                NO_FINDING.to_string()
            } else {
                r.labels.join("|")
            };
            csv.write_record([r.image_id.as_str(), &findings, &r.patient_id])
                .map_err(io)?;
        }
        csv.flush().map_err(|e| Error::io("<label csv>", e))
    }
}

pub fn parse_label_csv(path: impl AsRef<Path>) -> Result<LabelTable> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    LabelTable::from_reader(std::io::BufReader::new(file), &path.display().to_string())
}

pub fn write_label_csv(table: &LabelTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    table.write_to(std::io::BufWriter::new(file))
}

/// `1.0` where `target` is among the image's findings, else `0.0`.
pub fn binary_labels(table: &LabelTable, target: &str) -> Result<Vec<f64>> {
    let target = canonical_pathology(target).ok_or_else(|| {
        Error::Config(format!(
            "unknown pathology {target:?}; valid names: {}",
            PATHOLOGIES.join(", ")
        ))
    })?;
    Ok(table
        .records()
        .iter()
        .map(|r| if r.has(target) { 1.0 } else { 0.0 })
        .collect())
}
