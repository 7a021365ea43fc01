//! Pixel-level data model: per-task exports of feature maps and label masks,
//! and the flattened pixel sets the transport solver consumes.

use std::collections::BTreeSet;

use ndarray::{Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label value that is never a valid class id.
pub const IGNORE_SENTINEL: u16 = u16::MAX;

/// Void label used by Cityscapes-style masks; ignored unless told otherwise.
pub const DEFAULT_IGNORE_LABEL: u16 = 255;

/// Feature maps and label masks exported for one task.
///
/// `features` is `[n, H, W, C]`, `labels` is `[n, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskExport {
    pub features: Array4<f32>,
    pub labels: Array3<u16>,
    pub class_count: u32,
    pub ignore_labels: BTreeSet<u16>,
}

impl TaskExport {
    /// Builds an export with the default ignore set `{255}`.
    pub fn new(features: Array4<f32>, labels: Array3<u16>, class_count: u32) -> Result<Self> {
        Self::with_ignore_labels(features, labels, class_count, [DEFAULT_IGNORE_LABEL])
    }

    pub fn with_ignore_labels(
        features: Array4<f32>,
        labels: Array3<u16>,
        class_count: u32,
        ignore_labels: impl IntoIterator<Item = u16>,
    ) -> Result<Self> {
        let export = TaskExport {
            features,
            labels,
            class_count,
            ignore_labels: ignore_labels.into_iter().collect(),
        };
        export.validate()?;
        Ok(export)
    }

    /// `(n, H, W, C)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.features.shape();
        (s[0], s[1], s[2], s[3])
    }

    pub fn pixel_count(&self) -> usize {
        self.labels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fs = self.features.shape();
        let ls = self.labels.shape();
        if fs[..3] != ls[..] {
            return Err(Error::Validation(format!(
                "features shape {fs:?} disagrees with labels shape {ls:?} on (n, H, W)"
            )));
        }
        if fs.contains(&0) {
            return Err(Error::Validation(format!(
                "all dimensions must be positive, got features shape {fs:?}"
            )));
        }
        if u32::try_from(fs.iter().max().copied().unwrap_or(0)).is_err() {
            return Err(Error::Validation("dimension exceeds u32 range".into()));
        }
        if self.class_count == 0 {
            return Err(Error::Validation("class_count must be positive".into()));
        }
        if self.ignore_labels.contains(&IGNORE_SENTINEL) {
            return Err(Error::Validation(format!(
                "{IGNORE_SENTINEL} is reserved and cannot be listed as an ignore label"
            )));
        }
        if self.labels.iter().any(|&l| l == IGNORE_SENTINEL) {
            return Err(Error::Validation(format!(
                "label value {IGNORE_SENTINEL} is reserved"
            )));
        }
        Ok(())
    }

    /// Number of pixels per label value, including ignored labels.
    pub fn label_histogram(&self) -> std::collections::BTreeMap<u16, usize> {
        let mut hist = std::collections::BTreeMap::new();
        for &l in self.labels.iter() {
            *hist.entry(l).or_insert(0) += 1;
        }
        hist
    }
}

/// Flattened `(feature, label)` pairs for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelSet {
    /// `[P, C]`.
    pub features: Array2<f32>,
    pub labels: Vec<u16>,
    pub class_count: u32,
}

impl PixelSet {
    pub fn new(features: Array2<f32>, labels: Vec<u16>, class_count: u32) -> Result<Self> {
        let set = PixelSet {
            features,
            labels,
            class_count,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.nrows() != self.labels.len() {
            return Err(Error::Validation(format!(
                "{} feature rows but {} labels",
                self.features.nrows(),
                self.labels.len()
            )));
        }
        if self.features.ncols() == 0 {
            return Err(Error::Validation(
                "feature dimension must be positive".into(),
            ));
        }
        if self.class_count == 0 {
            return Err(Error::Validation("class_count must be positive".into()));
        }
        if let Some(&bad) = self
            .labels
            .iter()
            .find(|&&l| u32::from(l) >= self.class_count)
        {
            return Err(Error::Validation(format!(
                "label {bad} is outside the declared {} classes",
                self.class_count
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Rows at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> PixelSet {
        PixelSet {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.class_count as usize];
        for &l in &self.labels {
            hist[l as usize] += 1;
        }
        hist
    }
}

/// Flattens an export into a pixel set, dropping ignored pixels.
///
/// Rows follow row-major `(image, row, column)` order.
pub fn flatten_to_pixelset(export: &TaskExport) -> Result<PixelSet> {
    export.validate()?;
    let (n, h, w, c) = export.dims();
    let total = n * h * w;
    let features = export.features.as_standard_layout();
    let flat = features.as_slice().expect("standard layout is contiguous");
    let labels = export.labels.as_standard_layout();
    let labels = labels.as_slice().expect("standard layout is contiguous");

    let keep: Vec<usize> = (0..total)
        .filter(|&p| !export.ignore_labels.contains(&labels[p]))
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptySet(format!(
            "all {total} pixels carry ignored labels"
        )));
    }

    let mut out = Vec::with_capacity(keep.len() * c);
    for &p in &keep {
        out.extend_from_slice(&flat[p * c..(p + 1) * c]);
    }
    let kept_labels: Vec<u16> = keep.iter().map(|&p| labels[p]).collect();
    let features = Array2::from_shape_vec((keep.len(), c), out).expect("sized above");
    PixelSet::new(features, kept_labels, export.class_count)
}

/// Per-channel mean and standard deviation used for optional standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Pooled statistics over every row of all given sets.
    pub fn pooled(sets: &[&PixelSet]) -> Result<Self> {
        let dim = sets
            .first()
            .map(|s| s.feature_dim())
            .ok_or_else(|| Error::EmptySet("no pixel sets given".into()))?;
        if sets.iter().any(|s| s.feature_dim() != dim) {
            return Err(Error::Dimension(
                "pixel sets disagree on channel count".into(),
            ));
        }
        let rows: usize = sets.iter().map(|s| s.len()).sum();
        if rows == 0 {
            return Err(Error::EmptySet("pixel sets contain no rows".into()));
        }
        let mut mean = vec![0.0f64; dim];
        for set in sets {
            for row in set.features.rows() {
                for (m, &v) in mean.iter_mut().zip(row.iter()) {
                    *m += f64::from(v);
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0f64; dim];
        for set in sets {
            for row in set.features.rows() {
                for ((s, &v), m) in var.iter_mut().zip(row.iter()).zip(&mean) {
                    let d = f64::from(v) - m;
                    *s += d * d;
                }
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / rows as f64).sqrt();
                // constant channels are centred but left unscaled
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(ChannelStats { mean, std })
    }

    pub fn apply(&self, set: &mut PixelSet) {
        for mut row in set.features.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = ((f64::from(*v) - m) / s) as f32;
            }
        }
    }
}

/// Standardizes both sets channel-wise using statistics pooled over the pair.
pub fn standardize_pair(source: &mut PixelSet, target: &mut PixelSet) -> Result<ChannelStats> {
    let stats = ChannelStats::pooled(&[source, target])?;
    stats.apply(source);
    stats.apply(target);
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Array4};

    fn tiny_export() -> TaskExport {
        // n=1, H=2, W=2, C=3; feature value encodes (row, col, channel)
        let features =
            Array4::from_shape_fn((1, 2, 2, 3), |(_, r, c, k)| (r * 100 + c * 10 + k) as f32);
        let labels = Array3::from_shape_vec((1, 2, 2), vec![0, 1, 2, 5]).unwrap();
        TaskExport::with_ignore_labels(features, labels, 6, []).unwrap()
    }

    #[test]
    fn flatten_is_row_major() {
        let set = flatten_to_pixelset(&tiny_export()).unwrap();
        assert_eq!(set.len(), 4);
        assert_eq!(set.labels, vec![0, 1, 2, 5]);
        let firsts: Vec<f32> = set.features.column(0).to_vec();
        assert_eq!(firsts, vec![0.0, 10.0, 100.0, 110.0]);
        assert_eq!(set.features.row(3).to_vec(), vec![110.0, 111.0, 112.0]);
    }

    #[test]
    fn flatten_filters_ignored() {
        let mut export = tiny_export();
        export.ignore_labels.insert(5);
        let set = flatten_to_pixelset(&export).unwrap();
        assert_eq!(set.len(), 3);
        assert!(!set.labels.contains(&5));
    }

    #[test]
    fn all_ignored_is_empty_set() {
        let features = Array4::zeros((1, 1, 2, 1));
        let labels = Array3::from_elem((1, 1, 2), 255u16);
        let export = TaskExport::new(features, labels, 3).unwrap();
        assert!(matches!(
            flatten_to_pixelset(&export),
            Err(Error::EmptySet(_))
        ));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let features = Array4::zeros((1, 2, 2, 3));
        let labels = Array3::zeros((1, 2, 3));
        assert!(matches!(
            TaskExport::new(features, labels, 2),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn sentinel_label_rejected() {
        let features = Array4::zeros((1, 1, 1, 1));
        let labels = Array3::from_elem((1, 1, 1), IGNORE_SENTINEL);
        assert!(TaskExport::new(features, labels, 2).is_err());
    }

    #[test]
    fn out_of_range_label_rejected_after_flatten() {
        let features = Array4::zeros((1, 1, 2, 1));
        let labels = Array3::from_shape_vec((1, 1, 2), vec![0, 7]).unwrap();
        let export = TaskExport::with_ignore_labels(features, labels, 3, []).unwrap();
        assert!(matches!(
            flatten_to_pixelset(&export),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn standardize_centres_channels() {
        let a = PixelSet::new(
            Array2::from_shape_vec((2, 2), vec![1.0, 5.0, 3.0, 5.0]).unwrap(),
            vec![0, 0],
            1,
        )
        .unwrap();
        let mut b = a.clone();
        let mut a2 = a.clone();
        let stats = standardize_pair(&mut a2, &mut b).unwrap();
        assert_eq!(stats.mean, vec![2.0, 5.0]);
        assert_eq!(stats.std, vec![1.0, 1.0]);
        assert_eq!(a2.features.column(0).to_vec(), vec![-1.0, 1.0]);
        assert_eq!(a2.features.column(1).to_vec(), vec![0.0, 0.0]);
    }
}
