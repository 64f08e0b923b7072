//! Two-view augmentation: horizontal flip, per-channel multiplicative
//! jitter, and light additive noise. No cropping — crops can put different
//! objects into the two views of a multi-object scene, which breaks the
//! positive-pair assumption of the contrastive branch.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::rng::SeedRng;

use super::ImageSample;

pub const JITTER_RANGE: (f64, f64) = (0.8, 1.2);
pub const VIEW_NOISE_SIGMA: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewKind {
    Online,
    Target,
}

/// Enough information to map masks between the source frame and the view
/// frame: only the flip moves pixels, jitter and noise are positionwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub jitter: [f64; 3],
}

/// Augmented pixels plus the transform record that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub kind: ViewKind,
    pub pixels: Vec<f64>,
    pub record: AugmentParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub online: View,
    pub target: View,
}

/// Mirror a channel-major image horizontally.
pub fn apply_flip(pixels: &[f64], size: usize) -> Vec<f64> {
    let mut out = vec![0.0; pixels.len()];
    for ch in 0..3 {
        let plane = &pixels[ch * size * size..(ch + 1) * size * size];
        let oplane = &mut out[ch * size * size..(ch + 1) * size * size];
        for y in 0..size {
            for x in 0..size {
                oplane[y * size + x] = plane[y * size + (size - 1 - x)];
            }
        }
    }
    out
}

/// Map a binary grid (any resolution) into the frame described by the
/// transform record.
pub fn transport_mask(mask: &[f64], h: usize, w: usize, record: &AugmentParams) -> Vec<f64> {
    if !record.flip {
        return mask.to_vec();
    }
    let mut out = vec![0.0; mask.len()];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = mask[y * w + (w - 1 - x)];
        }
    }
    out
}

pub fn draw_params(rng: &mut SeedRng) -> AugmentParams {
    let flip = rng.random_range(0.0..1.0) < 0.5;
    let jitter = [
        rng.random_range(JITTER_RANGE.0..JITTER_RANGE.1),
        rng.random_range(JITTER_RANGE.0..JITTER_RANGE.1),
        rng.random_range(JITTER_RANGE.0..JITTER_RANGE.1),
    ];
    AugmentParams { flip, jitter }
}

/// Produce one augmented view of a sample. The flip flag is retained in
/// the record so activation masks can be carried into the view frame.
pub fn augment_view(sample: &ImageSample, kind: ViewKind, size: usize, rng: &mut SeedRng) -> View {
    let params = draw_params(rng);
    let mut pixels = if params.flip {
        apply_flip(&sample.pixels, size)
    } else {
        sample.pixels.clone()
    };
    for ch in 0..3 {
        let f = params.jitter[ch];
        for v in pixels[ch * size * size..(ch + 1) * size * size].iter_mut() {
            *v = (*v * f).clamp(0.0, 1.0);
        }
    }
    let noise = Normal::new(0.0, VIEW_NOISE_SIGMA).expect("valid sigma");
    for v in pixels.iter_mut() {
        *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
    }
    View {
        kind,
        pixels,
        record: params,
    }
}
