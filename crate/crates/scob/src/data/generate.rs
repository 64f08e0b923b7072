//! Scene rendering and the single-positive annotation protocol.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, ScobError};
use crate::rng::{rng_stream, SeedRng};

use super::{Dataset, DatasetSpec, ImageSample, ShapeKind, PALETTE};

fn inside(kind: ShapeKind, dx: f64, dy: f64, r: f64) -> bool {
    match kind {
        ShapeKind::Circle => dx * dx + dy * dy <= r * r,
        ShapeKind::Square => dx.abs() <= 0.9 * r && dy.abs() <= 0.9 * r,
        ShapeKind::Triangle => {
            // upward triangle: width grows linearly from apex to base
            let t = (dy + r) / (2.0 * r);
            (0.0..=1.0).contains(&t) && dx.abs() <= t * r
        }
        ShapeKind::Cross => {
            (dx.abs() <= 0.33 * r && dy.abs() <= r) || (dy.abs() <= 0.33 * r && dx.abs() <= r)
        }
        ShapeKind::Ring => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= 0.36 * r * r
        }
        ShapeKind::Bar => dx.abs() <= r && dy.abs() <= 0.35 * r,
    }
}

fn render_sample(spec: &DatasetSpec, id: u32, rng: &mut SeedRng) -> ImageSample {
    let s = spec.image_size;
    let l = spec.num_classes;
    let noise = Normal::new(0.0, spec.noise_sigma.max(1e-12)).expect("valid sigma");

    // noisy gray background
    let mut pixels = vec![0.0f64; 3 * s * s];
    for v in pixels.iter_mut() {
        *v = (0.45 + noise.sample(rng)).clamp(0.0, 1.0);
    }

    let (lo, hi) = spec.positives_range;
    let k = rng.random_range(lo..=hi);
    let mut classes: Vec<usize> = (0..l).collect();
    classes.shuffle(rng);
    classes.truncate(k);

    let mut y = vec![0u8; l];
    let mut gt_masks: Vec<Vec<u8>> = vec![Vec::new(); l];

    let r_lo = (s as f64) * 3.0 / 32.0;
    let r_hi = (s as f64) * 3.0 / 16.0;
    for &c in &classes {
        y[c] = 1;
        let (kind, base) = PALETTE[c];
        let r = rng.random_range(r_lo..r_hi);
        let cx = rng.random_range(r + 1.0..s as f64 - r - 1.0);
        let cy = rng.random_range(r + 1.0..s as f64 - r - 1.0);
        let brightness = rng.random_range(0.85..1.15);

        let mut mask = vec![0u8; s * s];
        let x0 = (cx - r).floor().max(0.0) as usize;
        let x1 = ((cx + r).ceil() as usize).min(s - 1);
        let y0 = (cy - r).floor().max(0.0) as usize;
        let y1 = ((cy + r).ceil() as usize).min(s - 1);
        for py in y0..=y1 {
            for px in x0..=x1 {
                if inside(kind, px as f64 - cx, py as f64 - cy, r) {
                    mask[py * s + px] = 1;
                    for ch in 0..3 {
                        pixels[ch * s * s + py * s + px] = (base[ch] * brightness).clamp(0.0, 1.0);
                    }
                }
            }
        }
        gt_masks[c] = mask;
    }

    // pixels are persisted as f32; quantize now so save/load is bit-exact
    for v in pixels.iter_mut() {
        *v = *v as f32 as f64;
    }

    ImageSample {
        id,
        pixels,
        y: y.clone(),
        z: y,
        gt_masks,
    }
}

/// Render `num_train + num_val` scenes. Every sample is generated from its
/// own RNG stream derived from `(spec.seed, id)`, so generation is
/// order-independent and reproducible.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let train: Vec<ImageSample> = (0..spec.num_train)
        .map(|i| {
            let id = i as u32;
            render_sample(spec, id, &mut rng_stream(spec.seed, id as u64))
        })
        .collect();
    let val: Vec<ImageSample> = (0..spec.num_val)
        .map(|i| {
            let id = (spec.num_train + i) as u32;
            render_sample(spec, id, &mut rng_stream(spec.seed, id as u64))
        })
        .collect();
    Ok(Dataset {
        spec: spec.clone(),
        train,
        val,
    })
}

/// Keep exactly one positive label per training sample, chosen uniformly
/// among its true positives. Performed once; the choice is stored in `z`
/// and persists through serialization so every run sees the same labels.
/// Validation samples keep their full label vector.
pub fn drop_to_single_positive(dataset: &mut Dataset, seed: u64) -> Result<()> {
    for sample in dataset.train.iter_mut() {
        let positives: Vec<usize> = sample
            .y
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1)
            .map(|(i, _)| i)
            .collect();
        if positives.is_empty() {
            return Err(ScobError::Data(format!(
                "sample {} has no positive label to retain",
                sample.id
            )));
        }
        let mut rng = rng_stream(seed, sample.id as u64);
        let keep = positives[rng.random_range(0..positives.len())];
        sample.z.iter_mut().for_each(|v| *v = 0);
        sample.z[keep] = 1;
    }
    Ok(())
}
