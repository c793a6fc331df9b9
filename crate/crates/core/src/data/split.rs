//! Patient-disjoint train/validation/test splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use super::labels::LabelTable;
use crate::error::{Error, Result};
use crate::rng::{self, NS_SPLIT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|split| split.name() == s)
            .ok_or_else(|| Error::Split(format!("unknown split {s:?}")))
    }
}

/// Patient ids per split.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitAssignment {
    patients: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn split_of(&self, patient_id: &str) -> Option<Split> {
        self.patients.get(patient_id).copied()
    }

    pub fn patients(&self, split: Split) -> BTreeSet<&str> {
        self.patients
            .iter()
            .filter(|(_, s)| **s == split)
            .map(|(p, _)| p.as_str())
            .collect()
    }

    pub fn patient_count(&self) -> usize {
        self.patients.len()
    }

    /// Rows of `table` whose patient falls in `split`, in table order.
    pub fn select(&self, table: &LabelTable, split: Split) -> LabelTable {
        table.filter(|r| self.split_of(&r.patient_id) == Some(split))
    }

    /// Image counts per split for the rows of `table`.
    pub fn image_counts(&self, table: &LabelTable) -> [usize; 3] {
        let mut counts = [0; 3];
        for r in table.records() {
            if let Some(s) = self.split_of(&r.patient_id) {
                counts[s as usize] += 1;
            }
        }
        counts
    }

    pub fn write_to(&self, writer: impl Write) -> Result<()> {
        let mut csv = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| Error::io("<splits csv>", e.into());
        csv.write_record(["Patient ID", "Split"]).map_err(io)?;
        for (patient, split) in &self.patients {
            csv.write_record([patient.as_str(), split.name()])
                .map_err(io)?;
        }
        csv.flush().map_err(|e| Error::io("<splits csv>", e))
    }

    pub fn from_reader(reader: impl Read, source: &str) -> Result<Self> {
        let mut csv = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = csv
            .headers()
            .map_err(|e| Error::malformed(source, 1, e.to_string()))?;
        if headers.iter().collect::<Vec<_>>() != ["Patient ID", "Split"] {
            return Err(Error::malformed(
                source,
                1,
                "expected header `Patient ID,Split`",
            ));
        }
        let mut patients = BTreeMap::new();
        for record in csv.records() {
            let record = record.map_err(|e| {
                Error::malformed(source, e.position().map_or(0, |p| p.line()), e.to_string())
            })?;
            let line = record.position().map_or(0, |p| p.line());
            let split: Split = record[1].parse().map_err(|_| {
                Error::malformed(source, line, format!("unknown split {:?}", &record[1]))
            })?;
            if patients.insert(record[0].to_string(), split).is_some() {
                return Err(Error::malformed(
                    source,
                    line,
                    format!("patient {:?} listed twice", &record[0]),
                ));
            }
        }
        Ok(SplitAssignment { patients })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(std::io::BufReader::new(file), &path.display().to_string())
    }
}

/// Number of patients given to each split: `floor(r · P)` for train and
/// validation, the remainder to test.
pub fn split_sizes(patients: usize, ratios: (f64, f64, f64)) -> Result<[usize; 3]> {
    let (train, val, test) = ratios;
    if !(train > 0.0 && val > 0.0 && test > 0.0) || ((train + val + test) - 1.0).abs() > 1e-9 {
        return Err(Error::Split(format!(
            "ratios must be positive and sum to 1, got ({train}, {val}, {test})"
        )));
    }
    if patients < 3 {
        return Err(Error::Split(format!(
            "need at least 3 patients, got {patients}"
        )));
    }
    // The small slack keeps products such as 0.29 · 100 from flooring to 28.
    let floor = |r: f64| ((r * patients as f64) + 1e-9).floor() as usize;
    let (n_train, n_val) = (floor(train), floor(val));
    Ok([n_train, n_val, patients - n_train - n_val])
}

/// Shuffles the sorted patient ids with the `split` stream of `seed` and
/// deals them out by [`split_sizes`].
pub fn patient_split(
    table: &LabelTable,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitAssignment> {
    let unique: BTreeSet<&str> = table
        .records()
        .iter()
        .map(|r| r.patient_id.as_str())
        .collect();
    let mut order: Vec<&str> = unique.into_iter().collect();
    let sizes = split_sizes(order.len(), ratios)?;
    rng::shuffle(&mut rng::stream(seed, NS_SPLIT), &mut order);
    let mut patients = BTreeMap::new();
    let mut next = order.into_iter();
    for (split, size) in Split::ALL.into_iter().zip(sizes) {
        for p in next.by_ref().take(size) {
            patients.insert(p.to_string(), split);
        }
    }
    Ok(SplitAssignment { patients })
}
