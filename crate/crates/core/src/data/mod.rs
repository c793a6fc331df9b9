//! Label tables, patient splits, preprocessing and the synthetic generator.

pub mod image;
pub mod labels;
pub mod netpbm;
pub mod split;
pub mod synth;

use std::path::Path;

pub use image::{bilinear, channel_stats, flip_horizontal, normalize, resize_image};
pub use labels::{
    binary_labels, canonical_pathology, parse_label_csv, pathology_index, write_label_csv,
    LabelRecord, LabelTable, NO_FINDING, PATHOLOGIES,
};
pub use netpbm::Pnm;
pub use split::{patient_split, split_sizes, Split, SplitAssignment};
pub use synth::{
    generate_synthetic, read_regions, render_plane, write_regions, Region, SyntheticData,
    SyntheticSpec,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images and targets stacked for the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub ids: Vec<String>,
    /// `[N, C, S, S]` raw intensities in `[0, 1]`.
    pub images: Tensor,
    /// `[N, K]` binary targets, one column per class.
    pub targets: Tensor,
    pub class_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset from the rows of `table`, fetching each image with
    /// `load` and bringing it to `channels × size × size`. Gray images are
    /// replicated to three channels; color images are averaged to one.
    pub fn from_table(
        table: &LabelTable,
        class_names: &[String],
        channels: usize,
        size: usize,
        mut load: impl FnMut(&str) -> Result<Tensor>,
    ) -> Result<Self> {
        let mut columns = Vec::with_capacity(class_names.len());
        for class in class_names {
            columns.push(binary_labels(table, class)?);
        }
        let n = table.len();
        let targets = Tensor::from_fn(&[n, class_names.len()], |i| {
            columns[i % class_names.len()][i / class_names.len()]
        });
        let mut values = Vec::with_capacity(n * channels * size * size);
        for r in table.records() {
            let img = adapt_channels(load(&r.image_id)?, channels, &r.image_id)?;
            values.extend_from_slice(resize_image(&img, size)?.values());
        }
        Ok(Dataset {
            ids: table.records().iter().map(|r| r.image_id.clone()).collect(),
            images: Tensor::new(vec![n, channels, size, size], values)?,
            targets,
            class_names: class_names.to_vec(),
        })
    }

    /// Loads `images/<id>` (or `<id>` directly) under `dir` for each row.
    pub fn load_dir(
        dir: impl AsRef<Path>,
        table: &LabelTable,
        class_names: &[String],
        channels: usize,
        size: usize,
    ) -> Result<Self> {
        let dir = dir.as_ref();
        Dataset::from_table(table, class_names, channels, size, |id| {
            let nested = dir.join("images").join(id);
            let path = if nested.exists() {
                nested
            } else {
                dir.join(id)
            };
            Ok(Pnm::load(path)?.to_tensor())
        })
    }

    pub fn from_synthetic(
        data: &SyntheticData,
        table: &LabelTable,
        class_names: &[String],
    ) -> Result<Self> {
        let size = data.spec.image_size;
        Dataset::from_table(table, class_names, 1, size, |id| {
            data.image(id)
                .map(Pnm::to_tensor)
                .ok_or_else(|| Error::Config(format!("no synthetic image {id:?}")))
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    fn image_len(&self) -> usize {
        self.images.values().len() / self.len().max(1)
    }

    /// `([B, C, S, S] images, B·K targets)` for the given rows.
    pub fn batch(&self, rows: &[usize]) -> (Tensor, Vec<f64>) {
        let (il, k) = (self.image_len(), self.num_classes());
        let mut dims = self.images.dims().to_vec();
        dims[0] = rows.len();
        let mut images = Vec::with_capacity(rows.len() * il);
        let mut targets = Vec::with_capacity(rows.len() * k);
        for &r in rows {
            images.extend_from_slice(&self.images.values()[r * il..(r + 1) * il]);
            targets.extend_from_slice(&self.targets.values()[r * k..(r + 1) * k]);
        }
        (Tensor::new(dims, images).expect("batch dims"), targets)
    }

    /// Target column of class `c`.
    pub fn column(&self, c: usize) -> Vec<f64> {
        self.targets
            .values()
            .iter()
            .skip(c)
            .step_by(self.num_classes())
            .copied()
            .collect()
    }
}

fn adapt_channels(img: Tensor, channels: usize, id: &str) -> Result<Tensor> {
    let [c, h, w] = img.dims()[..] else {
        return Err(Error::shape(format!(
            "image {id:?} has dims {:?}",
            img.dims()
        )));
    };
    match (c, channels) {
        (a, b) if a == b => Ok(img),
        (1, n) => Tensor::new(vec![n, h, w], img.values().repeat(n)),
        (3, 1) => {
            let plane = h * w;
            let v = img.values();
            Tensor::new(
                vec![1, h, w],
                (0..plane)
                    .map(|i| (v[i] + v[plane + i] + v[2 * plane + i]) / 3.0)
                    .collect(),
            )
        }
        _ => Err(Error::shape(format!(
            "image {id:?} has {c} channels, model expects {channels}"
        ))),
    }
}
