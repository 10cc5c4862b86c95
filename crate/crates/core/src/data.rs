//! Image datasets: IDX ingestion and class subsets.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::Label;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<Tensor<f32>>,
    labels: Vec<Label>,
    label_universe: Vec<Label>,
}

impl Dataset {
    /// Builds a dataset whose label universe is the sorted set of labels present.
    pub fn new(images: Vec<Tensor<f32>>, labels: Vec<Label>) -> Result<Self> {
        let mut universe = labels.clone();
        universe.sort_unstable();
        universe.dedup();
        Self::with_universe(images, labels, universe)
    }

    pub fn with_universe(images: Vec<Tensor<f32>>, labels: Vec<Label>, mut label_universe: Vec<Label>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        label_universe.sort_unstable();
        label_universe.dedup();
        if let Some(&bad) = labels.iter().find(|l| label_universe.binary_search(l).is_err()) {
            return Err(Error::UnknownClass(bad));
        }
        if let Some(first) = images.first() {
            if let Some(other) = images.iter().find(|t| t.shape() != first.shape()) {
                return Err(Error::Shape(format!(
                    "dataset mixes image shapes {:?} and {:?}",
                    first.shape(),
                    other.shape()
                )));
            }
        }
        Ok(Self {
            images,
            labels,
            label_universe,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Tensor<f32>] {
        &self.images
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn label_universe(&self) -> &[Label] {
        &self.label_universe
    }

    pub fn get(&self, i: usize) -> (&Tensor<f32>, Label) {
        (&self.images[i], self.labels[i])
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.images.first().map(Tensor::shape)
    }

    pub fn class_counts(&self) -> BTreeMap<Label, usize> {
        let mut counts = BTreeMap::new();
        for &l in &self.labels {
            *counts.entry(l).or_insert(0) += 1;
        }
        counts
    }

    /// Keeps only the requested classes, preserving order and original labels.
    pub fn subset(&self, classes: &[Label]) -> Result<Dataset> {
        if let Some(&bad) = classes.iter().find(|c| self.label_universe.binary_search(c).is_err()) {
            return Err(Error::UnknownClass(bad));
        }
        let keep: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        Dataset::with_universe(
            keep.iter().map(|&i| self.images[i].clone()).collect(),
            keep.iter().map(|&i| self.labels[i]).collect(),
            classes.to_vec(),
        )
    }

    /// The first `n` samples of each class, in dataset order.
    pub fn take_per_class(&self, n: usize) -> Dataset {
        let mut seen: BTreeMap<Label, usize> = BTreeMap::new();
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let c = seen.entry(self.labels[i]).or_insert(0);
                *c += 1;
                *c <= n
            })
            .collect();
        Dataset {
            images: keep.iter().map(|&i| self.images[i].clone()).collect(),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
            label_universe: self.label_universe.clone(),
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.offset as u64,
            reason: reason.into(),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let Some(b) = self.bytes.get(self.offset..self.offset + 4) else {
            return Err(self.err("unexpected end of header"));
        };
        self.offset += 4;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let magic = self.u32()?;
        if magic != expected {
            self.offset -= 4;
            return Err(self.err(format!("bad magic 0x{magic:08x}, expected 0x{expected:08x}")));
        }
        Ok(())
    }

    fn payload(&self, len: usize) -> Result<&[u8]> {
        let rest = &self.bytes[self.offset..];
        if rest.len() != len {
            return Err(self.err(format!(
                "payload holds {} bytes but the header declares {len}",
                rest.len()
            )));
        }
        Ok(rest)
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an IDX image file (`0x00000803`, `[n, rows, cols]`) into `[1, rows, cols]`
/// tensors scaled to `[0, 1]`.
pub fn read_idx_images(path: &Path) -> Result<Vec<Tensor<f32>>> {
    let bytes = read(path)?;
    let mut cur = Cursor {
        bytes: &bytes,
        offset: 0,
        path,
    };
    cur.magic(IDX_IMAGES_MAGIC)?;
    let n = cur.u32()? as usize;
    let rows = cur.u32()? as usize;
    let cols = cur.u32()? as usize;
    if rows == 0 || cols == 0 {
        return Err(cur.err(format!("degenerate image size {rows}x{cols}")));
    }
    let pixels = cur.payload(n * rows * cols)?;
    Ok(pixels
        .chunks_exact(rows * cols)
        .map(|px| {
            let data = px.iter().map(|&b| b as f32 / 255.0).collect();
            Tensor::new(vec![1, rows, cols], data).expect("chunk matches shape")
        })
        .collect())
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<Label>> {
    let bytes = read(path)?;
    let mut cur = Cursor {
        bytes: &bytes,
        offset: 0,
        path,
    };
    cur.magic(IDX_LABELS_MAGIC)?;
    let n = cur.u32()? as usize;
    Ok(cur.payload(n)?.iter().map(|&b| b as Label).collect())
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if images.len() != labels.len() {
        return Err(Error::Parse {
            path: labels_path.to_path_buf(),
            offset: 4,
            reason: format!("{} labels for {} images", labels.len(), images.len()),
        });
    }
    Dataset::new(images, labels)
}

/// Serializes a dataset back to an IDX image/label pair.
pub fn write_idx(data: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let shape = data.image_shape().unwrap_or(&[1, 1, 1]);
    if shape[0] != 1 {
        return Err(Error::Shape(format!("IDX stores single-channel images, got {shape:?}")));
    }
    let mut img = Vec::new();
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(data.len() as u32).to_be_bytes());
    img.extend_from_slice(&(shape[1] as u32).to_be_bytes());
    img.extend_from_slice(&(shape[2] as u32).to_be_bytes());
    for t in data.images() {
        img.extend(t.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    let mut lab = Vec::new();
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(data.len() as u32).to_be_bytes());
    for &l in data.labels() {
        let b = u8::try_from(l).map_err(|_| Error::InvalidArgument(format!("label {l} does not fit in a byte")))?;
        lab.push(b);
    }
    fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))?;
    Ok(())
}
