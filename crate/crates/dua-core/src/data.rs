//! Image datasets with access accounting.
//!
//! A [`TaskDataset`] owns a batch of grayscale images plus optional labels.
//! Every pixel or label read goes through an accessor that bumps a shared
//! counter, so tests can assert who touched what: label-free estimators must
//! leave `label_reads` at zero, and adaptation code must never read a user's
//! evaluation split. Clones share the counters, so reads through a clone are
//! attributed to the original dataset.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DuaError, Result};

/// Read counters shared by a dataset and all of its clones.
#[derive(Debug, Default)]
pub struct AccessStats {
    pixel_reads: AtomicU64,
    label_reads: AtomicU64,
}

impl AccessStats {
    pub fn pixel_reads(&self) -> u64 {
        self.pixel_reads.load(Ordering::Relaxed)
    }

    pub fn label_reads(&self) -> u64 {
        self.label_reads.load(Ordering::Relaxed)
    }

    fn bump_pixels(&self) {
        self.pixel_reads.fetch_add(1, Ordering::Relaxed);
    }

    fn bump_labels(&self) {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
    }
}

/// A batch of same-sized grayscale images for one task (or one user), with
/// pixel values in `[0, 1]` and optional class labels.
#[derive(Debug, Clone)]
pub struct TaskDataset {
    id: String,
    height: usize,
    width: usize,
    pixels: Vec<f64>,
    labels: Option<Vec<u8>>,
    stats: Arc<AccessStats>,
}

impl TaskDataset {
    pub fn new(
        id: impl Into<String>,
        height: usize,
        width: usize,
        pixels: Vec<f64>,
        labels: Option<Vec<u8>>,
    ) -> Result<Self> {
        let id = id.into();
        let dim = height * width;
        if dim == 0 {
            return Err(DuaError::ShapeMismatch(format!(
                "dataset `{id}` has zero-sized images"
            )));
        }
        if pixels.len() % dim != 0 {
            return Err(DuaError::ShapeMismatch(format!(
                "dataset `{id}`: {} pixels do not divide into {height}x{width} images",
                pixels.len()
            )));
        }
        let n = pixels.len() / dim;
        if let Some(ref labels) = labels {
            if labels.len() != n {
                return Err(DuaError::ShapeMismatch(format!(
                    "dataset `{id}`: {} labels for {n} images",
                    labels.len()
                )));
            }
        }
        if let Some(bad) = pixels.iter().find(|p| !p.is_finite() || **p < 0.0 || **p > 1.0) {
            return Err(DuaError::ShapeMismatch(format!(
                "dataset `{id}`: pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            id,
            height,
            width,
            pixels,
            labels,
            stats: Arc::new(AccessStats::default()),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.height * self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn has_labels(&self) -> bool {
        self.labels.is_some()
    }

    pub fn stats(&self) -> &AccessStats {
        &self.stats
    }

    /// All pixel data, row-major, one image per `dim()` chunk.
    pub fn pixels(&self) -> &[f64] {
        self.stats.bump_pixels();
        &self.pixels
    }

    /// Pixels of image `i`.
    pub fn sample(&self, i: usize) -> &[f64] {
        self.stats.bump_pixels();
        let d = self.dim();
        &self.pixels[i * d..(i + 1) * d]
    }

    pub fn labels(&self) -> Result<&[u8]> {
        self.stats.bump_labels();
        self.labels
            .as_deref()
            .ok_or_else(|| DuaError::MissingLabels(self.id.clone()))
    }

    pub fn label(&self, i: usize) -> Result<u8> {
        Ok(self.labels()?[i])
    }

    /// Distinct labels present in the dataset.
    pub fn classes(&self) -> Result<BTreeSet<u8>> {
        Ok(self.labels()?.iter().copied().collect())
    }

    /// A pixels-only view. The view type has no label accessor at all, which
    /// is what makes "estimated without labels" checkable at compile time.
    pub fn unlabeled(&self) -> UnlabeledView<'_> {
        UnlabeledView {
            id: &self.id,
            pixels: &self.pixels,
            dim: self.dim(),
            stats: &self.stats,
        }
    }

    /// A clone that physically carries no labels.
    pub fn strip_labels(&self) -> TaskDataset {
        TaskDataset {
            id: format!("{}#nolabels", self.id),
            height: self.height,
            width: self.width,
            pixels: self.pixels.clone(),
            labels: None,
            stats: Arc::clone(&self.stats),
        }
    }

    /// New dataset holding the given samples, in order.
    pub fn subset(&self, indices: &[usize], id: impl Into<String>) -> Result<TaskDataset> {
        let d = self.dim();
        let mut pixels = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            pixels.extend_from_slice(self.sample(i));
        }
        let labels = match &self.labels {
            Some(all) => {
                self.stats.bump_labels();
                Some(indices.iter().map(|&i| all[i]).collect())
            }
            None => None,
        };
        TaskDataset::new(id, self.height, self.width, pixels, labels)
    }

    /// Samples whose label is in `classes`.
    pub fn filter_classes(&self, classes: &[u8], id: impl Into<String>) -> Result<TaskDataset> {
        let labels = self.labels()?;
        let indices: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, l)| classes.contains(l))
            .map(|(i, _)| i)
            .collect();
        self.subset(&indices, id)
    }

    /// Seeded split into two parts; the first gets `round(frac * n)` samples.
    pub fn split(&self, frac: f64, seed: u64, id_a: &str, id_b: &str) -> Result<(TaskDataset, TaskDataset)> {
        let n = self.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = (frac * n as f64).round() as usize;
        let a = self.subset(&idx[..cut], id_a)?;
        let b = self.subset(&idx[cut..], id_b)?;
        Ok((a, b))
    }

    /// Seeded class-stratified split into two halves of equal size (+-1 per
    /// class). Keeps every class represented on both sides.
    pub fn split_half_stratified(
        &self,
        seed: u64,
        id_a: &str,
        id_b: &str,
    ) -> Result<(TaskDataset, TaskDataset)> {
        let labels = self.labels()?.to_vec();
        let classes: BTreeSet<u8> = labels.iter().copied().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx_a = Vec::new();
        let mut idx_b = Vec::new();
        for class in classes {
            let mut members: Vec<usize> = labels
                .iter()
                .enumerate()
                .filter(|(_, l)| **l == class)
                .map(|(i, _)| i)
                .collect();
            members.shuffle(&mut rng);
            let cut = members.len() / 2;
            idx_a.extend_from_slice(&members[..cut]);
            idx_b.extend_from_slice(&members[cut..]);
        }
        idx_a.sort_unstable();
        idx_b.sort_unstable();
        let a = self.subset(&idx_a, id_a)?;
        let b = self.subset(&idx_b, id_b)?;
        Ok((a, b))
    }
}

/// Borrowed pixels-only view of a dataset. Deliberately exposes no way to
/// reach labels.
#[derive(Clone, Copy)]
pub struct UnlabeledView<'a> {
    id: &'a str,
    pixels: &'a [f64],
    dim: usize,
    stats: &'a AccessStats,
}

impl<'a> UnlabeledView<'a> {
    pub fn id(&self) -> &str {
        self.id
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sample(&self, i: usize) -> &'a [f64] {
        self.stats.bump_pixels();
        &self.pixels[i * self.dim..(i + 1) * self.dim]
    }

    pub fn pixels(&self) -> &'a [f64] {
        self.stats.bump_pixels();
        self.pixels
    }
}
