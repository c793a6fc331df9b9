//! Rater and prediction CSV files, and the agreement and AUROC reports.

use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use super::bootstrap::{resample_indices, BootstrapResult, PairedDifference};
use super::metrics::{auroc, multi_rater_f1, multi_rater_f1_on, RaterMatrix};
use crate::error::{Error, ParseErrorKind, Result};

pub const COL_IMAGE: &str = "Image Index";

/// Formats `x` with `decimals` places, rounding half away from zero after
/// snapping to nine decimals, so decimal inputs such as 0.3865 round the
/// way they read rather than the way their binary approximation falls.
pub fn format_fixed(x: f64, decimals: u32) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    let nano = (x.abs() * 1e9).round() as u128;
    let unit = 10u128.pow(9 - decimals.min(9));
    let scaled = (nano + unit / 2) / unit;
    let sign = if x < 0.0 && scaled != 0 { "-" } else { "" };
    if decimals == 0 {
        return format!("{sign}{scaled}");
    }
    let pow = 10u128.pow(decimals);
    format!(
        "{sign}{}.{:0width$}",
        scaled / pow,
        scaled % pow,
        width = decimals as usize
    )
}

fn csv_reader(reader: impl Read) -> csv::Reader<impl Read> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader)
}

/// Header and rows of an `Image Index,<name>...` file, with line numbers.
fn read_matrix(
    reader: impl Read,
    source: &str,
) -> Result<(Vec<String>, Vec<(u64, String, Vec<String>)>)> {
    let mut csv = csv_reader(reader);
    let headers = csv
        .headers()
        .map_err(|e| Error::malformed(source, 1, e.to_string()))?
        .clone();
    if headers.get(0).map(|h| h.trim_start_matches('\u{feff}')) != Some(COL_IMAGE) {
        return Err(Error::parse(
            source,
            1,
            ParseErrorKind::MissingColumn(COL_IMAGE.into()),
        ));
    }
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    if names.is_empty() {
        return Err(Error::malformed(
            source,
            1,
            "no value columns after the image column",
        ));
    }
    let mut rows = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for record in csv.records() {
        let record = record.map_err(|e| {
            Error::malformed(source, e.position().map_or(0, |p| p.line()), e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let id = record[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(Error::parse(
                source,
                line,
                ParseErrorKind::DuplicateImage(id),
            ));
        }
        rows.push((
            line,
            id,
            record.iter().skip(1).map(str::to_string).collect(),
        ));
    }
    Ok((names, rows))
}

/// Reads `Image Index,<rater1>,...` with `0`/`1` entries.
pub fn read_rater_csv(reader: impl Read, source: &str) -> Result<RaterMatrix> {
    let (names, rows) = read_matrix(reader, source)?;
    let mut labels = vec![Vec::with_capacity(rows.len()); names.len()];
    let mut ids = Vec::with_capacity(rows.len());
    for (line, id, values) in rows {
        for (r, v) in values.iter().enumerate() {
            labels[r].push(match v.as_str() {
                "0" => false,
                "1" => true,
                _ => {
                    return Err(Error::malformed(
                        source,
                        line,
                        format!("rater {:?} label {v:?} is not 0 or 1", names[r]),
                    ))
                }
            });
        }
        ids.push(id);
    }
    RaterMatrix::new(ids, names, labels)
}

pub fn load_rater_csv(path: impl AsRef<Path>) -> Result<RaterMatrix> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_rater_csv(file, &path.display().to_string())
}

/// Per-image class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub image_ids: Vec<String>,
    pub class_names: Vec<String>,
    /// `probabilities[i][c]`.
    pub probabilities: Vec<Vec<f64>>,
}

impl Predictions {
    pub fn column(&self, c: usize) -> Vec<f64> {
        self.probabilities.iter().map(|row| row[c]).collect()
    }

    /// Reads `Image Index,<class1>,...` with probabilities in `[0, 1]`.
    pub fn from_reader(reader: impl Read, source: &str) -> Result<Self> {
        let (class_names, rows) = read_matrix(reader, source)?;
        let mut image_ids = Vec::with_capacity(rows.len());
        let mut probabilities = Vec::with_capacity(rows.len());
        for (line, id, values) in rows {
            let row = values
                .iter()
                .map(|v| match v.parse::<f64>() {
                    Ok(p) if (0.0..=1.0).contains(&p) => Ok(p),
                    _ => Err(Error::malformed(
                        source,
                        line,
                        format!("{v:?} is not a probability"),
                    )),
                })
                .collect::<Result<Vec<_>>>()?;
            image_ids.push(id);
            probabilities.push(row);
        }
        Ok(Predictions {
            image_ids,
            class_names,
            probabilities,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Predictions::from_reader(file, &path.display().to_string())
    }

    /// Probabilities are written in shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(COL_IMAGE);
        for c in &self.class_names {
            s.push(',');
            s.push_str(c);
        }
        s.push('\n');
        for (id, row) in self.image_ids.iter().zip(&self.probabilities) {
            s.push_str(id);
            for p in row {
                let _ = write!(s, ",{p:?}");
            }
            s.push('\n');
        }
        s
    }
}

/// One line of the agreement report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub name: String,
    pub f1: BootstrapResult,
}

/// Per-rater F1 with intervals, the radiologist average, and the model
/// minus average difference when a model rater is flagged.
#[derive(Clone, Debug, PartialEq)]
pub struct AgreementReport {
    pub raters: Vec<ReportRow>,
    pub radiologist_average: BootstrapResult,
    pub model: Option<ReportRow>,
    pub difference: Option<PairedDifference>,
    pub degenerate: bool,
}

pub const AVERAGE_ROW: &str = "Radiologist Avg.";
pub const DIFFERENCE_ROW: &str = "Difference";

/// Builds the agreement report with one shared resample stream: every
/// interval and the paired difference use the same resampled images.
pub fn agreement_report(m: &RaterMatrix, n_samples: usize, seed: u64) -> Result<AgreementReport> {
    let n = m.num_images();
    if n == 0 || n_samples == 0 {
        return Err(Error::Config(
            "agreement report needs images and bootstrap samples".into(),
        ));
    }
    let point = multi_rater_f1(m)?;
    let mut per_rater = vec![Vec::with_capacity(n_samples); m.num_raters()];
    let mut average = Vec::with_capacity(n_samples);
    let mut difference = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let s = multi_rater_f1_on(m, &resample_indices(n, seed, i))?;
        for (acc, v) in per_rater.iter_mut().zip(&s.per_rater) {
            acc.push(*v);
        }
        if let Some(model) = m.model {
            difference.push(s.per_rater[model] - s.radiologist_average);
        }
        average.push(s.radiologist_average);
    }
    let mut rows: Vec<ReportRow> = per_rater
        .into_iter()
        .enumerate()
        .map(|(r, samples)| ReportRow {
            name: m.rater_names[r].clone(),
            f1: BootstrapResult::from_samples(point.per_rater[r], samples, seed),
        })
        .collect();
    let model = m.model.map(|i| rows.remove(i));
    let difference = m.model.map(|i| {
        PairedDifference::from_samples(
            point.per_rater[i] - point.radiologist_average,
            difference,
            seed,
        )
    });
    Ok(AgreementReport {
        raters: rows,
        radiologist_average: BootstrapResult::from_samples(
            point.radiologist_average,
            average,
            seed,
        ),
        model,
        difference,
        degenerate: point.degenerate,
    })
}

impl AgreementReport {
    /// `row,f1,ci_low,ci_high,significant` at three decimals.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,f1,ci_low,ci_high,significant\n");
        let mut line = |name: &str, r: &BootstrapResult, sig: &str| {
            let _ = writeln!(
                s,
                "{name},{},{},{},{sig}",
                format_fixed(r.estimate, 3),
                format_fixed(r.ci_low, 3),
                format_fixed(r.ci_high, 3)
            );
        };
        for row in &self.raters {
            line(&row.name, &row.f1, "");
        }
        line(AVERAGE_ROW, &self.radiologist_average, "");
        if let Some(m) = &self.model {
            line(&m.name, &m.f1, "");
        }
        if let Some(d) = &self.difference {
            line(
                DIFFERENCE_ROW,
                &d.result,
                if d.significant { "yes" } else { "no" },
            );
        }
        if self.degenerate {
            s.push_str("# some label pairs had no positives; their F1 counts as 1.0\n");
        }
        s
    }
}

/// `class,auroc` rows at four decimals; classes with a single label value
/// are reported as `undefined`.
pub fn auroc_csv(
    class_names: &[String],
    scores: &[Vec<f64>],
    labels: &[Vec<bool>],
) -> Result<String> {
    let mut s = String::from("class,auroc\n");
    for ((name, sc), y) in class_names.iter().zip(scores).zip(labels) {
        let value = match auroc(sc, y) {
            Ok(a) => format_fixed(a, 4),
            Err(Error::UndefinedMetric(_)) => "undefined".to_string(),
            Err(e) => return Err(e),
        };
        let _ = writeln!(s, "{name},{value}");
    }
    Ok(s)
}
