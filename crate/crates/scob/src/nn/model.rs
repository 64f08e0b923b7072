//! The recognition model: a four-stage convolutional backbone feeding two
//! masked transformers (one per tapped stage) and a shared classification
//! head. A plain two-convolution head can replace the transformers for
//! baseline comparisons.

use rand::Rng;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Result, ScobError};
use crate::rng::rng_stream;

use super::attention::{smt_layer, BindMode, Binder, HeadCapture};
use super::param::{embedding_uniform, kaiming_uniform, xavier_uniform, Param, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    /// Backbone + two masked transformers + affine head.
    Smt,
    /// Backbone + two plain convolution layers + affine head; no masks.
    ConvBaseline,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Channel widths of the four stride-2 stages.
    pub widths: [usize; 4],
    pub image_size: usize,
    pub num_classes: usize,
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub arch: Arch,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            widths: [32, 64, 128, 128],
            image_size: 64,
            num_classes: 6,
            d_model: 128,
            num_layers: 2,
            num_heads: 4,
            hidden_dim: 256,
            arch: Arch::Smt,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.num_heads != 0 {
            return Err(ScobError::Config(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(ScobError::Config("d_model must be even (split positional halves)".into()));
        }
        if self.image_size % 16 != 0 {
            return Err(ScobError::Config(
                "image_size must be divisible by 16 (four stride-2 stages)".into(),
            ));
        }
        if self.num_layers == 0 || self.num_classes < 2 {
            return Err(ScobError::Config("need >= 1 layer and >= 2 classes".into()));
        }
        Ok(())
    }

    /// (side of stage-3 grid, side of stage-4 grid).
    pub fn grids(&self) -> (usize, usize) {
        (self.image_size / 8, self.image_size / 16)
    }

    /// Dimension of the pooled contrastive feature.
    pub fn feature_dim(&self) -> usize {
        2 * self.d_model
    }
}

/// Binary guidance masks for the two tapped stages, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair {
    pub stage3: Vec<f64>,
    pub stage4: Vec<f64>,
}

impl MaskPair {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (g3, g4) = cfg.grids();
        MaskPair {
            stage3: vec![0.0; g3 * g3],
            stage4: vec![0.0; g4 * g4],
        }
    }
}

/// Handles into the forward recording.
pub struct ForwardOutput {
    /// [L] raw scores.
    pub logits: Tensor,
    /// [L] sigmoid probabilities.
    pub probs: Tensor,
    /// [2 * d_model] pooled feature used by the contrastive branch.
    pub pooled: Tensor,
    /// Backbone token grids [T, K]; gradient-retained on request.
    pub stage3_tokens: Tensor,
    pub stage4_tokens: Tensor,
    /// Per-head attention tensors when capture was requested.
    pub captures: Vec<HeadCapture>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOpts {
    /// Keep gradients at the stage token grids (needed for activation maps).
    pub retain_stage_grads: bool,
    /// Record per-head attention logits/weights.
    pub capture_attention: bool,
}

/// Initialize all parameters for the configuration, deterministically from
/// the seed.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = rng_stream(seed, 0x6d6f64);
    let mut ps = ParamSet::new();
    let w = cfg.widths;
    let chans = [3, w[0], w[1], w[2]];
    for stage in 0..4 {
        let (cin, cout) = (chans[stage], w[stage]);
        ps.insert(
            &format!("backbone.stage{}.w", stage + 1),
            kaiming_uniform(vec![cout, cin, 3, 3], cin * 9, &mut rng),
        );
        ps.insert(&format!("backbone.stage{}.b", stage + 1), Param::zeros(vec![cout]));
    }
    match cfg.arch {
        Arch::Smt => {
            let d = cfg.d_model;
            let half = d / 2;
            let (g3, g4) = cfg.grids();
            for (tag, grid, k) in [("3", g3, w[2]), ("4", g4, w[3])] {
                ps.insert(&format!("map{tag}.w"), xavier_uniform(vec![k, d], k, d, &mut rng));
                ps.insert(&format!("map{tag}.b"), Param::zeros(vec![d]));
                ps.insert(&format!("pos{tag}.row"), embedding_uniform(vec![grid, half], &mut rng));
                ps.insert(&format!("pos{tag}.col"), embedding_uniform(vec![grid, half], &mut rng));
                for l in 0..cfg.num_layers {
                    let p = format!("smt{tag}.l{l}");
                    for wn in ["wq", "wk", "wv", "wo"] {
                        ps.insert(&format!("{p}.{wn}"), xavier_uniform(vec![d, d], d, d, &mut rng));
                    }
                    ps.insert(&format!("{p}.bo"), Param::zeros(vec![d]));
                    ps.insert(
                        &format!("{p}.ff1w"),
                        xavier_uniform(vec![d, cfg.hidden_dim], d, cfg.hidden_dim, &mut rng),
                    );
                    ps.insert(&format!("{p}.ff1b"), Param::zeros(vec![cfg.hidden_dim]));
                    ps.insert(
                        &format!("{p}.ff2w"),
                        xavier_uniform(vec![cfg.hidden_dim, d], cfg.hidden_dim, d, &mut rng),
                    );
                    ps.insert(&format!("{p}.ff2b"), Param::zeros(vec![d]));
                }
            }
            let fd = cfg.feature_dim();
            ps.insert(
                "head.w",
                xavier_uniform(vec![fd, cfg.num_classes], fd, cfg.num_classes, &mut rng),
            );
            ps.insert("head.b", Param::zeros(vec![cfg.num_classes]));
        }
        Arch::ConvBaseline => {
            let c = w[3];
            ps.insert("bhead.c1.w", kaiming_uniform(vec![c, c, 3, 3], c * 9, &mut rng));
            ps.insert("bhead.c1.b", Param::zeros(vec![c]));
            ps.insert("bhead.c2.w", kaiming_uniform(vec![c, c, 3, 3], c * 9, &mut rng));
            ps.insert("bhead.c2.b", Param::zeros(vec![c]));
            ps.insert(
                "bhead.fc.w",
                xavier_uniform(vec![c, cfg.num_classes], c, cfg.num_classes, &mut rng),
            );
            ps.insert("bhead.fc.b", Param::zeros(vec![cfg.num_classes]));
        }
    }
    Ok(ps)
}

fn backbone(
    tape: &mut Tape,
    binder: &Binder,
    cfg: &ModelConfig,
    pixels: &[f64],
) -> Result<(Tensor, Tensor)> {
    let s = cfg.image_size;
    if pixels.len() != 3 * s * s {
        return Err(ScobError::Dimension(format!(
            "backbone: expected 3x{s}x{s} pixels, got {} values",
            pixels.len()
        )));
    }
    let mut x = tape.constant(pixels.to_vec(), &[3, s, s])?;
    let mut stage3 = None;
    for stage in 1..=4 {
        let w = binder.get(tape, &format!("backbone.stage{stage}.w"))?;
        let b = binder.get(tape, &format!("backbone.stage{stage}.b"))?;
        let c = tape.conv2d(x, w, b, 2)?;
        x = tape.relu(c);
        if stage == 3 {
            stage3 = Some(x);
        }
    }
    Ok((stage3.expect("stage 3 recorded"), x))
}

fn smt_stack(
    tape: &mut Tape,
    binder: &Binder,
    cfg: &ModelConfig,
    tag: &str,
    tokens: Tensor,
    grid: usize,
    mask: &[f64],
    mut capture: Option<&mut Vec<HeadCapture>>,
) -> Result<Tensor> {
    if mask.len() != grid * grid {
        return Err(ScobError::Contract(format!(
            "stage {tag}: mask has {} cells, grid is {grid}x{grid}",
            mask.len()
        )));
    }
    let mw = binder.get(tape, &format!("map{tag}.w"))?;
    let mb = binder.get(tape, &format!("map{tag}.b"))?;
    let proj = tape.matmul(tokens, mw, false)?;
    let mut x = tape.add_row(proj, mb)?;

    let rows = binder.get(tape, &format!("pos{tag}.row"))?;
    let cols = binder.get(tape, &format!("pos{tag}.col"))?;
    let pos = tape.grid_pos_encode(rows, cols, grid, grid)?;

    let keep_vals: Vec<f64> = mask.iter().map(|&m| 1.0 - m).collect();
    let keep = tape.constant(keep_vals, &[grid * grid])?;

    for l in 0..cfg.num_layers {
        x = smt_layer(
            tape,
            binder,
            &format!("smt{tag}.l{l}"),
            x,
            pos,
            keep,
            cfg.num_heads,
            capture.as_deref_mut(),
        )?;
    }
    tape.mean_axis0(x)
}

/// Full forward pass for one image.
pub fn forward(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &ModelConfig,
    pixels: &[f64],
    masks: &MaskPair,
    mode: BindMode,
    opts: ForwardOpts,
) -> Result<ForwardOutput> {
    let binder = Binder { params, mode };
    let (s3, s4) = backbone(tape, &binder, cfg, pixels)?;
    let stage3_tokens = tape.chw_tokens(s3)?;
    let stage4_tokens = tape.chw_tokens(s4)?;
    if opts.retain_stage_grads {
        tape.retain_grad(stage3_tokens);
        tape.retain_grad(stage4_tokens);
    }
    let (g3, g4) = cfg.grids();
    let mut captures = Vec::new();
    let (pooled, logits) = match cfg.arch {
        Arch::Smt => {
            let cap = if opts.capture_attention { Some(&mut captures) } else { None };
            let p3 = smt_stack(tape, &binder, cfg, "3", stage3_tokens, g3, &masks.stage3, cap)?;
            let cap = if opts.capture_attention { Some(&mut captures) } else { None };
            let p4 = smt_stack(tape, &binder, cfg, "4", stage4_tokens, g4, &masks.stage4, cap)?;
            let pooled = tape.concat_vec(&[p3, p4])?;
            let fd = cfg.feature_dim();
            let row = tape.reshape(pooled, &[1, fd])?;
            let hw = binder.get(tape, "head.w")?;
            let hb = binder.get(tape, "head.b")?;
            let lg = tape.matmul(row, hw, false)?;
            let lg = tape.add_row(lg, hb)?;
            let logits = tape.reshape(lg, &[cfg.num_classes])?;
            (pooled, logits)
        }
        Arch::ConvBaseline => {
            let w1 = binder.get(tape, "bhead.c1.w")?;
            let b1 = binder.get(tape, "bhead.c1.b")?;
            let w2 = binder.get(tape, "bhead.c2.w")?;
            let b2 = binder.get(tape, "bhead.c2.b")?;
            let c1 = tape.conv2d(s4, w1, b1, 1)?;
            let c1 = tape.relu(c1);
            let c2 = tape.conv2d(c1, w2, b2, 1)?;
            let c2 = tape.relu(c2);
            let toks = tape.chw_tokens(c2)?;
            let pooled = tape.mean_axis0(toks)?;
            let c = cfg.widths[3];
            let row = tape.reshape(pooled, &[1, c])?;
            let fw = binder.get(tape, "bhead.fc.w")?;
            let fb = binder.get(tape, "bhead.fc.b")?;
            let lg = tape.matmul(row, fw, false)?;
            let lg = tape.add_row(lg, fb)?;
            let logits = tape.reshape(lg, &[cfg.num_classes])?;
            (pooled, logits)
        }
    };
    let probs = tape.sigmoid(logits);
    Ok(ForwardOutput {
        logits,
        probs,
        pooled,
        stage3_tokens,
        stage4_tokens,
        captures,
    })
}

/// A small configuration for fast tests: 16x16 input, thin stages.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        widths: [4, 6, 8, 8],
        image_size: 16,
        num_classes: 3,
        d_model: 8,
        num_layers: 1,
        num_heads: 2,
        hidden_dim: 16,
        arch: Arch::Smt,
    }
}

/// Deterministic pseudo-random pixels for tests.
pub fn test_pixels(size: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_stream(seed, 0x7069);
    (0..3 * size * size).map(|_| rng.random_range(0.0..1.0)).collect()
}
