//! Synthetic multi-object scenes with full labels, ground-truth masks,
//! single-positive annotation dropping, and the two-view augmentations
//! used by the contrastive branch.

mod augment;
mod generate;
mod io;

pub use augment::{apply_flip, augment_view, transport_mask, AugmentParams, View, ViewKind, ViewPair};
pub use generate::{drop_to_single_positive, generate_dataset};
pub use io::{load_dataset, save_dataset};

use crate::error::{Result, ScobError};

/// Shape primitives used to render class objects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Bar,
}

/// Built-in palette: one shape kind and base color per class. Colors come
/// in confusable pairs (warm/warm, green/teal, blue/purple) so that the
/// channel jitter in augmentation keeps the task from collapsing into
/// pure color lookup.
pub const PALETTE: [(ShapeKind, [f64; 3]); 6] = [
    (ShapeKind::Circle, [0.85, 0.25, 0.20]),
    (ShapeKind::Square, [0.90, 0.55, 0.15]),
    (ShapeKind::Triangle, [0.25, 0.75, 0.30]),
    (ShapeKind::Cross, [0.20, 0.70, 0.65]),
    (ShapeKind::Ring, [0.25, 0.35, 0.85]),
    (ShapeKind::Bar, [0.60, 0.30, 0.80]),
];

/// Generation parameters for a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    /// Number of classes L.
    pub num_classes: usize,
    /// Square image side S.
    pub image_size: usize,
    pub num_train: usize,
    pub num_val: usize,
    /// Inclusive range for the number of distinct object classes per image.
    pub positives_range: (usize, usize),
    /// Standard deviation of the background pixel noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_classes: 6,
            image_size: 64,
            num_train: 2000,
            num_val: 500,
            positives_range: (1, 3),
            noise_sigma: 0.05,
            seed: 7,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(ScobError::Config("num_classes must be >= 2".into()));
        }
        if self.num_classes > PALETTE.len() {
            return Err(ScobError::Config(format!(
                "palette has {} entries, smaller than {} classes",
                PALETTE.len(),
                self.num_classes
            )));
        }
        if self.image_size < 32 {
            return Err(ScobError::Config("image_size must be >= 32".into()));
        }
        let (lo, hi) = self.positives_range;
        if lo < 1 || hi < lo || hi > self.num_classes {
            return Err(ScobError::Config(format!(
                "positives_range ({lo},{hi}) must satisfy 1 <= lo <= hi <= L"
            )));
        }
        if self.num_train == 0 || self.num_val == 0 {
            return Err(ScobError::Config("num_train and num_val must be positive".into()));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(ScobError::Config("noise_sigma must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Expected number of positive labels per image: the midpoint of the
    /// positives range. Used as the distribution prior during training.
    pub fn expected_positives(&self) -> f64 {
        let (lo, hi) = self.positives_range;
        (lo + hi) as f64 / 2.0
    }
}

/// One rendered scene with full labels `y`, observed labels `z`, and
/// per-class ground-truth masks at image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: u32,
    /// Channel-major pixels, 3 * S * S, all in [0, 1].
    pub pixels: Vec<f64>,
    pub y: Vec<u8>,
    pub z: Vec<u8>,
    /// `gt_masks[c]` is an S*S binary grid; empty vector for absent classes.
    pub gt_masks: Vec<Vec<u8>>,
}

impl ImageSample {
    pub fn positive_count(&self) -> usize {
        self.y.iter().filter(|&&v| v == 1).count()
    }

    /// Index of the single observed positive. Errors when z is not one-hot.
    pub fn observed_class(&self) -> Result<usize> {
        let ones: Vec<usize> = self
            .z
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1)
            .map(|(i, _)| i)
            .collect();
        if ones.len() != 1 {
            return Err(ScobError::Contract(format!(
                "sample {}: z must be one-hot, has {} positives",
                self.id,
                ones.len()
            )));
        }
        Ok(ones[0])
    }
}

/// Train and validation splits sharing one [`DatasetSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<ImageSample>,
    pub val: Vec<ImageSample>,
}

impl Dataset {
    /// For each class, the train-sample indexes whose observed label is
    /// that class. Used for positive selection in the contrastive branch.
    pub fn class_index(&self) -> Vec<Vec<usize>> {
        let mut idx = vec![Vec::new(); self.spec.num_classes];
        for (i, s) in self.train.iter().enumerate() {
            if let Ok(c) = s.observed_class() {
                idx[c].push(i);
            }
        }
        idx
    }

    /// True once every training sample carries a one-hot observed label.
    pub fn is_single_positive(&self) -> bool {
        self.train
            .iter()
            .all(|s| s.z.iter().filter(|&&v| v == 1).count() == 1)
    }
}
