//! Synthetic chest-film stand-ins: a noisy intensity gradient with one
//! textured elliptical blob per present finding.
//!
//! Each class has its own grating orientation and period, so classes are
//! told apart by texture rather than brightness. Every image is rendered
//! from a plan drawn from its own indexed stream, which makes it possible
//! to re-render any image with one motif suppressed.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use super::labels::{canonical_pathology, write_label_csv, LabelTable};
use super::netpbm::Pnm;
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng, NS_DATA};

/// Probability that each class is present in an image.
pub const PREVALENCE: f64 = 0.3;
const BACKGROUND: f64 = 0.35;
const MAX_SLOPE: f64 = 0.15;
const AMPLITUDE: f64 = 0.5;
const NS_PATIENTS: &str = "data.patients";

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub num_images: usize,
    /// Canonical pathology names; index `c` selects the motif.
    pub classes: Vec<String>,
    pub noise_sigma: f64,
    /// Semi-axis lengths in pixels, drawn uniformly from this range.
    pub blob_radius_range: (f64, f64),
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            image_size: 64,
            num_images: 2000,
            classes: vec!["Pneumonia".into()],
            noise_sigma: 0.05,
            blob_radius_range: (6.0, 12.0),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_images == 0 || self.image_size == 0 {
            return Err(Error::Config(
                "num_images and image_size must be positive".into(),
            ));
        }
        if self.classes.is_empty() {
            return Err(Error::Config(
                "synthetic spec needs at least one class".into(),
            ));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if canonical_pathology(c) != Some(c.as_str()) {
                return Err(Error::Config(format!(
                    "unknown pathology {c:?} in synthetic classes"
                )));
            }
            if self.classes[..i].contains(c) {
                return Err(Error::Config(format!("duplicate synthetic class {c:?}")));
            }
        }
        let (lo, hi) = self.blob_radius_range;
        if !(lo >= 1.0 && hi >= lo) || 2.0 * hi + 2.0 > self.image_size as f64 {
            return Err(Error::Config(format!(
                "blob_radius_range ({lo}, {hi}) does not fit a {}-pixel image",
                self.image_size
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }

    pub fn image_id(&self, index: usize) -> String {
        format!("synth_{index:05}.pgm")
    }
}

/// Inclusive pixel box of one rendered motif.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Region {
    pub image_id: String,
    pub class: String,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Region {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..=self.x1).contains(&x) && (self.y0..=self.y1).contains(&y)
    }
}

#[derive(Clone, Copy, Debug)]
struct Motif {
    present: bool,
    cx: f64,
    cy: f64,
    ra: f64,
    rb: f64,
    tilt: f64,
}

impl Motif {
    /// Normalized elliptical radius squared; the motif covers `< 1`.
    fn rho2(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.tilt.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.ra).powi(2) + (v / self.rb).powi(2)
    }
}

struct Plan {
    slope: f64,
    direction: f64,
    motifs: Vec<Motif>,
    noise: Vec<f64>,
}

/// Grating orientation and period of class `c` out of `n`.
fn texture(c: usize, n: usize) -> (f64, f64) {
    (PI * c as f64 / n as f64, 4.0 + 1.5 * (c % 4) as f64)
}

fn plan(spec: &SyntheticSpec, index: usize) -> Plan {
    let mut rng: StreamRng = rng::indexed_stream(spec.seed, NS_DATA, index as u64);
    let size = spec.image_size as f64;
    let slope = MAX_SLOPE * rng::uniform_f64(&mut rng);
    let direction = 2.0 * PI * rng::uniform_f64(&mut rng);
    let (lo, hi) = spec.blob_radius_range;
    let motifs = spec
        .classes
        .iter()
        .map(|_| {
            let present = rng::uniform_f64(&mut rng) < PREVALENCE;
            let span = size - 1.0 - 2.0 * hi;
            Motif {
                present,
                cx: hi + span * rng::uniform_f64(&mut rng),
                cy: hi + span * rng::uniform_f64(&mut rng),
                ra: lo + (hi - lo) * rng::uniform_f64(&mut rng),
                rb: lo + (hi - lo) * rng::uniform_f64(&mut rng),
                tilt: PI * rng::uniform_f64(&mut rng),
            }
        })
        .collect();
    let noise = (0..spec.image_size * spec.image_size)
        .map(|_| spec.noise_sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Plan {
        slope,
        direction,
        motifs,
        noise,
    }
}

/// Intensities in `[0, 1]` of image `index`, optionally with the motif of
/// class index `suppress` left out.
pub fn render_plane(spec: &SyntheticSpec, index: usize, suppress: Option<usize>) -> Vec<f64> {
    let p = plan(spec, index);
    let n = spec.image_size;
    let half = (n as f64 - 1.0) / 2.0;
    let (ds, dc) = p.direction.sin_cos();
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = (x as f64, y as f64);
            let mut v =
                BACKGROUND + p.slope * ((fx - half) * dc + (fy - half) * ds) / half.max(1.0);
            for (c, m) in p.motifs.iter().enumerate() {
                if !m.present || suppress == Some(c) {
                    continue;
                }
                let r2 = m.rho2(fx, fy);
                if r2 < 1.0 {
                    let (angle, period) = texture(c, spec.classes.len());
                    let along = (fx - m.cx) * angle.cos() + (fy - m.cy) * angle.sin();
                    let grating = 0.6 + 0.4 * (2.0 * PI * along / period).cos();
                    v += AMPLITUDE * (1.0 - r2).powi(2) * grating;
                }
            }
            out.push((v + p.noise[y * n + x]).clamp(0.0, 1.0));
        }
    }
    out
}

fn bounding_box(m: &Motif, size: usize) -> Option<(usize, usize, usize, usize)> {
    let reach = m.ra.max(m.rb).ceil() as isize + 1;
    let (cx, cy) = (m.cx.round() as isize, m.cy.round() as isize);
    let clip = |v: isize| v.clamp(0, size as isize - 1) as usize;
    let mut bbox: Option<(usize, usize, usize, usize)> = None;
    for y in clip(cy - reach)..=clip(cy + reach) {
        for x in clip(cx - reach)..=clip(cx + reach) {
            if m.rho2(x as f64, y as f64) < 1.0 {
                bbox = Some(match bbox {
                    None => (x, y, x, y),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                });
            }
        }
    }
    bbox
}

pub struct SyntheticData {
    pub spec: SyntheticSpec,
    pub table: LabelTable,
    /// One entry per present motif, in image then class order.
    pub regions: Vec<Region>,
    /// Images in table order.
    pub images: Vec<Pnm>,
}

impl SyntheticData {
    pub fn image(&self, image_id: &str) -> Option<&Pnm> {
        let i = self
            .table
            .records()
            .iter()
            .position(|r| r.image_id == image_id)?;
        self.images.get(i)
    }

    /// Regions of `class` on `image_id`.
    pub fn regions_for<'a>(
        &'a self,
        image_id: &'a str,
        class: &'a str,
    ) -> impl Iterator<Item = &'a Region> {
        self.regions
            .iter()
            .filter(move |r| r.image_id == image_id && r.class == class)
    }

    /// Writes `images/*.pgm`, `labels.csv` and `regions.csv` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let images = dir.join("images");
        std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        for (r, img) in self.table.records().iter().zip(&self.images) {
            img.save(images.join(&r.image_id))?;
        }
        write_label_csv(&self.table, dir.join("labels.csv"))?;
        write_regions(&self.regions, dir.join("regions.csv"))
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut patients = rng::stream(spec.seed, NS_PATIENTS);
    let mut table = LabelTable::new();
    let mut regions = Vec::new();
    let mut images = Vec::with_capacity(spec.num_images);
    let (mut patient, mut left) = (0usize, 0usize);
    for i in 0..spec.num_images {
        if left == 0 {
            patient += 1;
            left = 1 + rng::uniform_index(&mut patients, 3);
        }
        left -= 1;
        let id = spec.image_id(i);
        let p = plan(spec, i);
        let mut labels = Vec::new();
        for (c, m) in p.motifs.iter().enumerate() {
            if !m.present {
                continue;
            }
            labels.push(spec.classes[c].as_str());
            if let Some((x0, y0, x1, y1)) = bounding_box(m, spec.image_size) {
                regions.push(Region {
                    image_id: id.clone(),
                    class: spec.classes[c].clone(),
                    x0,
                    y0,
                    x1,
                    y1,
                });
            }
        }
        table.push(&id, &patient.to_string(), labels)?;
        let plane = render_plane(spec, i, None);
        images.push(Pnm::from_unit_plane(
            spec.image_size,
            spec.image_size,
            &plane,
        ));
    }
    Ok(SyntheticData {
        spec: spec.clone(),
        table,
        regions,
        images,
    })
}

pub fn write_regions(regions: &[Region], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut csv = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let io = |e: csv::Error| Error::io(path, e.into());
    csv.write_record(["image_id", "class", "x0", "y0", "x1", "y1"])
        .map_err(io)?;
    for r in regions {
        csv.write_record([
            r.image_id.clone(),
            r.class.clone(),
            r.x0.to_string(),
            r.y0.to_string(),
            r.x1.to_string(),
            r.y1.to_string(),
        ])
        .map_err(io)?;
    }
    csv.into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?
        .flush()
        .map_err(|e| Error::io(path, e))
}

pub fn read_regions(path: impl AsRef<Path>) -> Result<Vec<Region>> {
    let path = path.as_ref();
    let source = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut csv = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(std::io::BufReader::new(file));
    let headers = csv
        .headers()
        .map_err(|e| Error::malformed(&source, 1, e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != ["image_id", "class", "x0", "y0", "x1", "y1"] {
        return Err(Error::malformed(
            &source,
            1,
            "expected header `image_id,class,x0,y0,x1,y1`",
        ));
    }
    let mut out = Vec::new();
    for record in csv.records() {
        let record = record.map_err(|e| {
            Error::malformed(&source, e.position().map_or(0, |p| p.line()), e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let coord = |i: usize| -> Result<usize> {
            record[i].parse().map_err(|_| {
                Error::malformed(
                    &source,
                    line,
                    format!("invalid coordinate {:?}", &record[i]),
                )
            })
        };
        out.push(Region {
            image_id: record[0].to_string(),
            class: record[1].to_string(),
            x0: coord(2)?,
            y0: coord(3)?,
            x1: coord(4)?,
            y1: coord(5)?,
        });
    }
    Ok(out)
}
