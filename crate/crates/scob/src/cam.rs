//! Gradient class-activation maps and their binary semantic masks.
//!
//! The activation of class `c` over a token grid is the ReLU of the
//! channel-averaged product between each channel's spatially-averaged
//! score gradient and the channel's feature map. Masks come from
//! thresholding a small windowed mean of the min-max-normalized
//! activation.

use crate::autodiff::Tape;
use crate::error::{Result, ScobError};
use crate::nn::{forward, BindMode, ForwardOpts, MaskPair, ModelConfig, ParamSet};

/// Fixed smoothing window side for mask extraction; the smallest odd
/// window, sized for 8x8 and 4x4 grids.
pub const CAM_WINDOW: usize = 3;

/// Nonnegative class evidence over a stage grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    pub grid: Vec<f64>,
    pub h: usize,
    pub w: usize,
    pub class: usize,
    pub stage: u8,
}

/// Binary foreground mask derived from an activation map.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMask {
    pub grid: Vec<f64>,
    pub h: usize,
    pub w: usize,
    pub class: usize,
    pub stage: u8,
    pub iteration: u64,
}

impl SemanticMask {
    pub fn foreground_fraction(&self) -> f64 {
        self.grid.iter().sum::<f64>() / self.grid.len() as f64
    }
}

/// Weight each feature channel by the spatial mean of its score gradient,
/// average over channels, and clamp at zero.
///
/// `features` and `grads` are [h*w, k] token grids (row t = grid cell t).
pub fn gradient_activation(
    features: &[f64],
    grads: &[f64],
    h: usize,
    w: usize,
    class: usize,
    stage: u8,
) -> Result<ActivationMap> {
    if features.len() != grads.len() {
        return Err(ScobError::Dimension(format!(
            "gradient_activation: features {} vs grads {}",
            features.len(),
            grads.len()
        )));
    }
    let t = h * w;
    if t == 0 || features.len() % t != 0 {
        return Err(ScobError::Dimension(format!(
            "gradient_activation: {} values do not tile a {h}x{w} grid",
            features.len()
        )));
    }
    let k = features.len() / t;
    // per-channel weight: spatial mean of the gradient
    let mut weights = vec![0.0; k];
    for row in grads.chunks_exact(k) {
        for (wk, &g) in weights.iter_mut().zip(row) {
            *wk += g;
        }
    }
    let inv_t = 1.0 / t as f64;
    weights.iter_mut().for_each(|wk| *wk *= inv_t);

    let inv_k = 1.0 / k as f64;
    let grid: Vec<f64> = features
        .chunks_exact(k)
        .map(|row| {
            let s: f64 = row.iter().zip(&weights).map(|(f, wk)| f * wk).sum();
            (s * inv_k).max(0.0)
        })
        .collect();
    Ok(ActivationMap { grid, h, w, class, stage })
}

/// Min-max normalize to [0, 1]. A flat map has no foreground evidence and
/// returns `None`; callers emit an all-zero mask for it.
pub fn normalize_minmax(map: &ActivationMap) -> Option<ActivationMap> {
    let mx = map.grid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mn = map.grid.iter().cloned().fold(f64::INFINITY, f64::min);
    if mx <= mn {
        return None;
    }
    let scale = 1.0 / (mx - mn);
    Some(ActivationMap {
        grid: map.grid.iter().map(|v| (v - mn) * scale).collect(),
        ..map.clone()
    })
}

/// Threshold the windowed mean of a normalized activation map.
///
/// Window sums are zero-padded at the borders and always divided by l*l,
/// so border cells need proportionally stronger evidence.
pub fn threshold_cam(map: &ActivationMap, gamma_cam: f64, l: usize) -> Result<SemanticMask> {
    if !(0.0..=1.0).contains(&gamma_cam) {
        return Err(ScobError::Config(format!("gamma_cam {gamma_cam} outside [0, 1]")));
    }
    if l % 2 == 0 || l > map.h.min(map.w) {
        return Err(ScobError::Config(format!(
            "window length {l} must be odd and fit the {}x{} grid",
            map.h, map.w
        )));
    }
    let r = (l / 2) as isize;
    let inv = 1.0 / (l * l) as f64;
    let (h, w) = (map.h as isize, map.w as isize);
    let mut grid = vec![0.0; map.grid.len()];
    for i in 0..h {
        for j in 0..w {
            let mut sum = 0.0;
            for u in (i - r)..=(i + r) {
                if u < 0 || u >= h {
                    continue;
                }
                for v in (j - r)..=(j + r) {
                    if v < 0 || v >= w {
                        continue;
                    }
                    sum += map.grid[(u * w + v) as usize];
                }
            }
            if sum * inv >= gamma_cam {
                grid[(i * w + j) as usize] = 1.0;
            }
        }
    }
    Ok(SemanticMask {
        grid,
        h: map.h,
        w: map.w,
        class: map.class,
        stage: map.stage,
        iteration: 0,
    })
}

/// Output of one expectation step for one image.
#[derive(Debug, Clone)]
pub struct EStepOutput {
    pub masks: MaskPair,
    pub activations: [ActivationMap; 2],
    /// Class probabilities from the same forward pass.
    pub probs: Vec<f64>,
}

/// Extract semantic masks for the observed class of one image from a
/// frozen model state.
///
/// Runs an unguided forward pass (all-zero masks), backpropagates the
/// sigmoid score of the observed class to the two stage grids, and
/// thresholds the resulting activations. Parameters are read-only; the
/// output depends only on (parameters, pixels, z).
pub fn e_step(
    params: &ParamSet,
    cfg: &ModelConfig,
    pixels: &[f64],
    z: &[u8],
    gamma_cam: f64,
) -> Result<EStepOutput> {
    let ones: Vec<usize> = z
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == 1)
        .map(|(i, _)| i)
        .collect();
    if ones.len() != 1 {
        return Err(ScobError::Contract(format!(
            "e_step: z must be one-hot, found {} positives",
            ones.len()
        )));
    }
    e_step_for_class(params, cfg, pixels, Some(ones[0]), gamma_cam, &MaskPair::zeros(cfg))
}

/// Mask extraction for an explicit class (or the top-scoring class when
/// `class` is `None`), with the forward pass gated by `guidance` masks.
pub fn e_step_for_class(
    params: &ParamSet,
    cfg: &ModelConfig,
    pixels: &[f64],
    class: Option<usize>,
    gamma_cam: f64,
    guidance: &MaskPair,
) -> Result<EStepOutput> {
    let mut tape = Tape::new();
    let out = forward(
        &mut tape,
        params,
        cfg,
        pixels,
        guidance,
        BindMode::Frozen,
        ForwardOpts {
            retain_stage_grads: true,
            capture_attention: false,
        },
    )?;
    let probs = tape.values(out.probs).to_vec();
    let class = match class {
        Some(c) => {
            if c >= cfg.num_classes {
                return Err(ScobError::Contract(format!("class {c} out of range")));
            }
            c
        }
        None => probs
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| a.total_cmp(b))
            .map(|(i, _)| i)
            .expect("nonempty probabilities"),
    };
    let p_c = tape.slice_vec(out.probs, class, 1)?;
    tape.backward(p_c)?;

    let (g3, g4) = cfg.grids();
    let mut masks = MaskPair::zeros(cfg);
    let mut activations = Vec::with_capacity(2);
    for (tokens, grid, stage) in [(out.stage3_tokens, g3, 3u8), (out.stage4_tokens, g4, 4u8)] {
        let feats = tape.values(tokens);
        let grads = tape
            .grad(tokens)
            .ok_or_else(|| ScobError::Contract("e_step: stage gradient missing".into()))?;
        let act = gradient_activation(feats, grads, grid, grid, class, stage)?;
        // largest odd window that fits; CAM_WINDOW on the production grids
        let l = if grid >= CAM_WINDOW { CAM_WINDOW } else { 1 };
        let mask_grid = match normalize_minmax(&act) {
            Some(norm) => threshold_cam(&norm, gamma_cam, l)?.grid,
            None => vec![0.0; grid * grid],
        };
        if stage == 3 {
            masks.stage3 = mask_grid;
        } else {
            masks.stage4 = mask_grid;
        }
        activations.push(act);
    }
    let [a3, a4]: [ActivationMap; 2] = activations.try_into().expect("two stages");
    Ok(EStepOutput {
        masks,
        activations: [a3, a4],
        probs,
    })
}

/// Max-pool a full-resolution binary mask down to a stage grid.
pub fn downsample_max(mask: &[u8], size: usize, grid: usize) -> Vec<f64> {
    if mask.is_empty() {
        return vec![0.0; grid * grid];
    }
    let factor = size / grid;
    let mut out = vec![0.0; grid * grid];
    for gy in 0..grid {
        for gx in 0..grid {
            let mut any = 0.0;
            'block: for py in gy * factor..(gy + 1) * factor {
                for px in gx * factor..(gx + 1) * factor {
                    if mask[py * size + px] == 1 {
                        any = 1.0;
                        break 'block;
                    }
                }
            }
            out[gy * grid + gx] = any;
        }
    }
    out
}

/// Intersection-over-union of two binary grids.
pub fn mask_iou(a: &[f64], b: &[f64]) -> f64 {
    let mut inter = 0.0;
    let mut union = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let (x, y) = (x > 0.5, y > 0.5);
        if x && y {
            inter += 1.0;
        }
        if x || y {
            union += 1.0;
        }
    }
    if union == 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Nearest-neighbor upsample of a grid to an image-sized byte plane,
/// mapping [0,1] to [0,255].
pub fn upsample_to_bytes(grid: &[f64], gh: usize, gw: usize, size: usize) -> Vec<u8> {
    let mut out = vec![0u8; size * size];
    for y in 0..size {
        let gy = y * gh / size;
        for x in 0..size {
            let gx = x * gw / size;
            let v = grid[gy * gw + gx].clamp(0.0, 1.0);
            out[y * size + x] = (v * 255.0).round() as u8;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, test_pixels, tiny_config};

    #[test]
    fn nonpositive_gradients_give_zero_activation() {
        let features = vec![1.0, 2.0, 3.0, 4.0]; // [2x1 grid? use h=2,w=2,k=1]
        let grads = vec![-1.0, -0.5, 0.0, -2.0];
        let act = gradient_activation(&features, &grads, 2, 2, 0, 3).unwrap();
        assert!(act.grid.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_cell_single_channel_hand_value() {
        // k=1, h=w=1: weight = grad = 2, activation = relu(2 * 3) = 6
        let act = gradient_activation(&[3.0], &[2.0], 1, 1, 0, 3).unwrap();
        assert_eq!(act.grid, vec![6.0]);
    }

    #[test]
    fn activation_scales_linearly_in_features() {
        let features = vec![0.5, 1.5, 2.0, 0.1, 0.7, 0.3];
        let grads = vec![0.2, 0.4, 0.1, 0.9, 0.6, 0.5];
        let a = gradient_activation(&features, &grads, 3, 1, 0, 3).unwrap();
        let scaled: Vec<f64> = features.iter().map(|v| v * 2.5).collect();
        let b = gradient_activation(&scaled, &grads, 3, 1, 0, 3).unwrap();
        for (x, y) in a.grid.iter().zip(b.grid.iter()) {
            assert!((y - 2.5 * x).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_activation_gives_zero_mask() {
        let act = ActivationMap { grid: vec![0.0; 64], h: 8, w: 8, class: 0, stage: 3 };
        let mask = threshold_cam(&act, 0.5, 3).unwrap();
        assert!(mask.grid.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_one_map_keeps_interior_drops_corners() {
        let act = ActivationMap { grid: vec![1.0; 64], h: 8, w: 8, class: 0, stage: 3 };
        let mask = threshold_cam(&act, 0.5, 3).unwrap();
        // corner window covers 4 of 9 padded cells: 4/9 < 0.5
        assert_eq!(mask.grid[0], 0.0);
        assert_eq!(mask.grid[7], 0.0);
        assert_eq!(mask.grid[56], 0.0);
        assert_eq!(mask.grid[63], 0.0);
        // interior windows are full: 9/9 >= 0.5
        for i in 1..7 {
            for j in 1..7 {
                assert_eq!(mask.grid[i * 8 + j], 1.0);
            }
        }
        // edge (non-corner) cells cover 6 of 9: 6/9 >= 0.5
        assert_eq!(mask.grid[1], 1.0);
    }

    #[test]
    fn threshold_is_monotone_in_gamma() {
        let grid: Vec<f64> = (0..64).map(|i| ((i * 37) % 64) as f64 / 63.0).collect();
        let act = ActivationMap { grid, h: 8, w: 8, class: 0, stage: 3 };
        let low = threshold_cam(&act, 0.3, 3).unwrap();
        let high = threshold_cam(&act, 0.7, 3).unwrap();
        for (lo, hi) in low.grid.iter().zip(high.grid.iter()) {
            assert!(hi <= lo, "raising gamma must never add foreground");
        }
    }

    #[test]
    fn gamma_out_of_range_is_config_error() {
        let act = ActivationMap { grid: vec![0.0; 16], h: 4, w: 4, class: 0, stage: 4 };
        assert!(matches!(threshold_cam(&act, 1.5, 3), Err(ScobError::Config(_))));
        assert!(matches!(threshold_cam(&act, -0.1, 3), Err(ScobError::Config(_))));
        assert!(matches!(threshold_cam(&act, 0.5, 4), Err(ScobError::Config(_))));
    }

    #[test]
    fn flat_activation_normalizes_to_none() {
        let act = ActivationMap { grid: vec![0.7; 16], h: 4, w: 4, class: 1, stage: 4 };
        assert!(normalize_minmax(&act).is_none());
    }

    #[test]
    fn e_step_is_read_only_and_pure() {
        let cfg = tiny_config();
        let params = init_params(&cfg, 5).unwrap();
        let pixels = test_pixels(cfg.image_size, 6);
        let z = vec![0u8, 1, 0];
        let before = params.checksum();
        let a = e_step(&params, &cfg, &pixels, &z, 0.5).unwrap();
        let b = e_step(&params, &cfg, &pixels, &z, 0.5).unwrap();
        assert_eq!(params.checksum(), before, "e_step must not mutate parameters");
        assert_eq!(a.masks, b.masks);
        assert_eq!(a.probs, b.probs);
    }

    #[test]
    fn e_step_rejects_non_one_hot() {
        let cfg = tiny_config();
        let params = init_params(&cfg, 5).unwrap();
        let pixels = test_pixels(cfg.image_size, 6);
        assert!(matches!(
            e_step(&params, &cfg, &pixels, &[1, 1, 0], 0.5),
            Err(ScobError::Contract(_))
        ));
        assert!(matches!(
            e_step(&params, &cfg, &pixels, &[0, 0, 0], 0.5),
            Err(ScobError::Contract(_))
        ));
    }

    #[test]
    fn e_step_outputs_are_binary_and_nonnegative() {
        let cfg = tiny_config();
        let params = init_params(&cfg, 9).unwrap();
        let pixels = test_pixels(cfg.image_size, 10);
        let out = e_step(&params, &cfg, &pixels, &[1, 0, 0], 0.5).unwrap();
        assert!(out.masks.stage3.iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(out.masks.stage4.iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(out.activations[0].grid.iter().all(|&v| v >= 0.0));
        assert!(out.activations[1].grid.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn downsample_max_marks_any_hit_block() {
        let mut mask = vec![0u8; 64]; // 8x8
        mask[9] = 1; // block (0,0) at 4x4 -> grid (0,0) hit? 8/4=2 factor; (1,1) in block (0,0)
        let grid = downsample_max(&mask, 8, 4);
        assert_eq!(grid[0], 1.0);
        assert_eq!(grid.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn empty_mask_downsamples_to_zeros() {
        let grid = downsample_max(&[], 8, 4);
        assert!(grid.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn iou_basics() {
        assert_eq!(mask_iou(&[1.0, 0.0], &[1.0, 0.0]), 1.0);
        assert_eq!(mask_iou(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(mask_iou(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((mask_iou(&[1.0, 1.0, 0.0], &[1.0, 0.0, 0.0]) - 0.5).abs() < 1e-12);
    }
}
