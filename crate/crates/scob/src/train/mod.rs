//! The bootstrapping training loop.
//!
//! Per batch: extract semantic masks from the pre-batch model state
//! (expectation step), insert pooled object features into the per-class
//! priority trees, take one optimizer step on the symmetric
//! classification loss (network + label estimator), then one on the
//! contrastive loss against target-network positives and priority-tree
//! negatives. The target network trails by an exponential moving average
//! once per epoch.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointData};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Tape, Tensor};
use crate::cam::{downsample_max, e_step_for_class, EStepOutput};
use crate::contrastive::{encode_target, info_nce, momentum_update};
use crate::data::{augment_view, transport_mask, AugmentParams, Dataset, ViewKind};
use crate::error::{Result, ScobError};
use crate::eval::{
    histogram_unknown_negatives, mean_average_precision, mean_unknown_negative_prob, prf_metrics,
};
use crate::ipt::{IptForest, IptNode};
use crate::losses::{loss_class, DistributionPrior, EstimatorMatrix};
use crate::nn::{
    adam_step, forward, init_params, AdamConfig, Arch, BindMode, ForwardOpts, MaskPair,
    ModelConfig, ParamSet,
};
use crate::rng::{restore_state, rng_stream, save_state, SeedRng};

pub const HISTOGRAM_BINS: usize = 50;

/// All knobs of a training run. Serialized as a flat key=value block in
/// config files and checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_estimator: f64,
    pub lr_smt: f64,
    pub lr_head: f64,
    pub lr_others: f64,
    pub gamma_cam: f64,
    pub tau: f64,
    pub lambda_c: f64,
    pub alpha: f64,
    pub xi: f64,
    pub k_negatives: usize,
    pub ipt_capacity: usize,
    pub seed: u64,
    pub momentum_per_step: bool,
    pub eval_refine: bool,
    pub no_cl: bool,
    pub no_cam: bool,
    pub random_negatives: bool,
    pub joint_optim: bool,
    pub two_stage: bool,
    pub gt_masks: bool,
    pub arch: Arch,
    pub widths: [usize; 4],
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            lr_estimator: 0.01,
            lr_smt: 4e-4,
            lr_head: 0.01,
            lr_others: 1e-3,
            gamma_cam: 0.5,
            tau: 1.0,
            lambda_c: 0.1,
            alpha: 0.999,
            xi: 0.3,
            k_negatives: 16,
            ipt_capacity: 80,
            seed: 0,
            momentum_per_step: false,
            eval_refine: true,
            no_cl: false,
            no_cam: false,
            random_negatives: false,
            joint_optim: false,
            two_stage: false,
            gt_masks: false,
            arch: Arch::Smt,
            widths: [32, 64, 128, 128],
            d_model: 128,
            num_layers: 2,
            num_heads: 4,
            hidden_dim: 256,
        }
    }
}

impl TrainConfig {
    /// Small model preset sized for full ablation sweeps on one CPU core.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 8,
            widths: [8, 16, 32, 32],
            d_model: 32,
            num_layers: 2,
            num_heads: 4,
            hidden_dim: 64,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lr_estimator", self.lr_estimator),
            ("lr_smt", self.lr_smt),
            ("lr_head", self.lr_head),
            ("lr_others", self.lr_others),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ScobError::Config(format!("{name} must be positive")));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 || self.k_negatives == 0 || self.ipt_capacity == 0
        {
            return Err(ScobError::Config(
                "epochs, batch_size, k_negatives, ipt_capacity must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.gamma_cam) {
            return Err(ScobError::Config("gamma_cam outside [0, 1]".into()));
        }
        if !(self.tau > 0.0) {
            return Err(ScobError::Config("tau must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(ScobError::Config("alpha outside [0, 1)".into()));
        }
        if !(0.0..0.5).contains(&self.xi) {
            return Err(ScobError::Config("xi outside [0, 0.5)".into()));
        }
        if self.no_cl && self.random_negatives {
            return Err(ScobError::Config(
                "no_cl disables negative sampling; random_negatives has no effect".into(),
            ));
        }
        if self.joint_optim && self.two_stage {
            return Err(ScobError::Config("joint_optim and two_stage are exclusive".into()));
        }
        if self.gt_masks && self.no_cam {
            return Err(ScobError::Config("gt_masks and no_cam are exclusive".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, image_size: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            widths: self.widths,
            image_size,
            num_classes,
            d_model: self.d_model,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            hidden_dim: self.hidden_dim,
            arch: self.arch,
        }
    }

    fn lr_for(&self, name: &str) -> f64 {
        if name.starts_with("smt") || name.starts_with("pos") {
            self.lr_smt
        } else if name.starts_with("map") || name.starts_with("head") || name.starts_with("bhead") {
            self.lr_head
        } else {
            self.lr_others
        }
    }

    /// Named ablation variant derived from this configuration.
    pub fn variant(&self, name: &str) -> Result<TrainConfig> {
        let mut cfg = self.clone();
        cfg.arch = Arch::Smt;
        cfg.no_cl = false;
        cfg.no_cam = false;
        cfg.random_negatives = false;
        cfg.joint_optim = false;
        cfg.two_stage = false;
        cfg.gt_masks = false;
        match name {
            "full" => {}
            "no_cl" => cfg.no_cl = true,
            "no_cam" => cfg.no_cam = true,
            "baseline" => {
                cfg.arch = Arch::ConvBaseline;
                cfg.no_cl = true;
            }
            "random_negatives" => cfg.random_negatives = true,
            "joint_optim" => cfg.joint_optim = true,
            "two_stage" => cfg.two_stage = true,
            "gt_masks" => cfg.gt_masks = true,
            other => {
                return Err(ScobError::Config(format!(
                    "unknown variant '{other}' (expected full, no_cl, no_cam, baseline, \
                     random_negatives, joint_optim, two_stage, gt_masks)"
                )))
            }
        }
        Ok(cfg)
    }

    /// Flat key=value serialization, one key per line, sorted.
    pub fn to_kv_string(&self) -> String {
        let mut kv: BTreeMap<&str, String> = BTreeMap::new();
        kv.insert("epochs", self.epochs.to_string());
        kv.insert("batch_size", self.batch_size.to_string());
        kv.insert("lr_estimator", self.lr_estimator.to_string());
        kv.insert("lr_smt", self.lr_smt.to_string());
        kv.insert("lr_head", self.lr_head.to_string());
        kv.insert("lr_others", self.lr_others.to_string());
        kv.insert("gamma_cam", self.gamma_cam.to_string());
        kv.insert("tau", self.tau.to_string());
        kv.insert("lambda_c", self.lambda_c.to_string());
        kv.insert("alpha", self.alpha.to_string());
        kv.insert("xi", self.xi.to_string());
        kv.insert("k_negatives", self.k_negatives.to_string());
        kv.insert("ipt_capacity", self.ipt_capacity.to_string());
        kv.insert("seed", self.seed.to_string());
        kv.insert("momentum_per_step", self.momentum_per_step.to_string());
        kv.insert("eval_refine", self.eval_refine.to_string());
        kv.insert("no_cl", self.no_cl.to_string());
        kv.insert("no_cam", self.no_cam.to_string());
        kv.insert("random_negatives", self.random_negatives.to_string());
        kv.insert("joint_optim", self.joint_optim.to_string());
        kv.insert("two_stage", self.two_stage.to_string());
        kv.insert("gt_masks", self.gt_masks.to_string());
        kv.insert(
            "arch",
            match self.arch {
                Arch::Smt => "smt".to_string(),
                Arch::ConvBaseline => "baseline".to_string(),
            },
        );
        kv.insert(
            "widths",
            format!(
                "{},{},{},{}",
                self.widths[0], self.widths[1], self.widths[2], self.widths[3]
            ),
        );
        kv.insert("d_model", self.d_model.to_string());
        kv.insert("num_layers", self.num_layers.to_string());
        kv.insert("num_heads", self.num_heads.to_string());
        kv.insert("hidden_dim", self.hidden_dim.to_string());
        let mut s = String::new();
        for (k, v) in kv {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Apply one `key=value` override.
    pub fn set_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| ScobError::Config(format!("bad value '{value}' for {what}"));
        match key {
            "epochs" => self.epochs = value.parse().map_err(|_| bad(key))?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad(key))?,
            "lr_estimator" => self.lr_estimator = value.parse().map_err(|_| bad(key))?,
            "lr_smt" => self.lr_smt = value.parse().map_err(|_| bad(key))?,
            "lr_head" => self.lr_head = value.parse().map_err(|_| bad(key))?,
            "lr_others" => self.lr_others = value.parse().map_err(|_| bad(key))?,
            "gamma_cam" => self.gamma_cam = value.parse().map_err(|_| bad(key))?,
            "tau" => self.tau = value.parse().map_err(|_| bad(key))?,
            "lambda_c" => self.lambda_c = value.parse().map_err(|_| bad(key))?,
            "alpha" => self.alpha = value.parse().map_err(|_| bad(key))?,
            "xi" => self.xi = value.parse().map_err(|_| bad(key))?,
            "k_negatives" => self.k_negatives = value.parse().map_err(|_| bad(key))?,
            "ipt_capacity" => self.ipt_capacity = value.parse().map_err(|_| bad(key))?,
            "seed" => self.seed = value.parse().map_err(|_| bad(key))?,
            "momentum_per_step" => self.momentum_per_step = value.parse().map_err(|_| bad(key))?,
            "eval_refine" => self.eval_refine = value.parse().map_err(|_| bad(key))?,
            "no_cl" => self.no_cl = value.parse().map_err(|_| bad(key))?,
            "no_cam" => self.no_cam = value.parse().map_err(|_| bad(key))?,
            "random_negatives" => self.random_negatives = value.parse().map_err(|_| bad(key))?,
            "joint_optim" => self.joint_optim = value.parse().map_err(|_| bad(key))?,
            "two_stage" => self.two_stage = value.parse().map_err(|_| bad(key))?,
            "gt_masks" => self.gt_masks = value.parse().map_err(|_| bad(key))?,
            "arch" => {
                self.arch = match value {
                    "smt" => Arch::Smt,
                    "baseline" => Arch::ConvBaseline,
                    _ => return Err(bad(key)),
                }
            }
            "widths" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| p.trim().parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(key))?;
                if parts.len() != 4 {
                    return Err(bad(key));
                }
                self.widths = [parts[0], parts[1], parts[2], parts[3]];
            }
            "d_model" => self.d_model = value.parse().map_err(|_| bad(key))?,
            "num_layers" => self.num_layers = value.parse().map_err(|_| bad(key))?,
            "num_heads" => self.num_heads = value.parse().map_err(|_| bad(key))?,
            "hidden_dim" => self.hidden_dim = value.parse().map_err(|_| bad(key))?,
            other => return Err(ScobError::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parse a flat key=value block ('#' starts a comment line).
    pub fn from_kv_text(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        cfg.apply_kv_text(text)?;
        Ok(cfg)
    }

    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                ScobError::Config(format!("line {}: expected key=value, got '{line}'", ln + 1))
            })?;
            self.set_kv(k.trim(), v.trim())?;
        }
        Ok(())
    }
}

/// Ordered phases of one batch iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    EStep,
    IptInsert,
    ClassStep,
    ContrastStep,
    MomentumUpdate,
    EpochEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub t: u64,
    pub phase: Phase,
}

/// One metrics CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub t: u64,
    pub loss_class: f64,
    pub loss_cont: f64,
    pub val_map: f64,
    pub val_of1: f64,
    pub val_cf1: f64,
    pub mean_unknown_neg_prob: f64,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,t,loss_class,loss_cont,val_mAP,val_OF1,val_CF1,mean_unknown_neg_prob,wall_seconds";

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.t,
            self.loss_class,
            self.loss_cont,
            self.val_map,
            self.val_of1,
            self.val_cf1,
            self.mean_unknown_neg_prob,
            self.wall_seconds
        )
    }
}

/// Full mutable training state.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: TrainConfig,
    pub model_cfg: ModelConfig,
    pub online: ParamSet,
    pub target: ParamSet,
    pub estimator: EstimatorMatrix,
    pub forest: IptForest,
    pub epoch: usize,
    pub t: u64,
    pub rng: SeedRng,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub metrics: Vec<MetricsRecord>,
    pub events: Vec<Event>,
    /// (epoch, normalized bin frequencies over unknown negatives)
    pub histograms: Vec<(usize, Vec<f64>)>,
}

/// True when every batch's phases appear in the canonical order.
pub fn alg1_order_ok(events: &[Event]) -> bool {
    fn rank(p: Phase) -> u8 {
        match p {
            Phase::EStep => 0,
            Phase::IptInsert => 1,
            Phase::ClassStep => 2,
            Phase::ContrastStep => 3,
            Phase::MomentumUpdate => 4,
            Phase::EpochEnd => 5,
        }
    }
    let mut per_t: BTreeMap<u64, Vec<Phase>> = BTreeMap::new();
    for e in events {
        if matches!(e.phase, Phase::MomentumUpdate | Phase::EpochEnd) {
            continue; // epoch-cadence phases are outside the batch body
        }
        per_t.entry(e.t).or_default().push(e.phase);
    }
    per_t
        .values()
        .all(|phases| phases.windows(2).all(|w| rank(w[0]) < rank(w[1])))
}

fn init_state(config: &TrainConfig, dataset: &Dataset) -> Result<ModelState> {
    config.validate()?;
    if !dataset.is_single_positive() {
        return Err(ScobError::Contract(
            "dataset must be reduced to single-positive labels before training".into(),
        ));
    }
    let model_cfg = config.model_config(dataset.spec.image_size, dataset.spec.num_classes);
    model_cfg.validate()?;
    let online = init_params(&model_cfg, config.seed)?;
    let target = online.clone();
    let observed: Vec<Vec<u8>> = dataset.train.iter().map(|s| s.z.clone()).collect();
    let ids: Vec<u32> = dataset.train.iter().map(|s| s.id).collect();
    let mut est_rng = rng_stream(config.seed, 0x657374);
    let estimator = EstimatorMatrix::init(&observed, ids, config.xi, &mut est_rng)?;
    let forest = IptForest::new(dataset.spec.num_classes, config.ipt_capacity);
    Ok(ModelState {
        config: config.clone(),
        model_cfg,
        online,
        target,
        estimator,
        forest,
        epoch: 0,
        t: 0,
        rng: rng_stream(config.seed, 0x747261),
    })
}

/// Per-sample batch preparation: augmented views and the positive pick.
struct Prep {
    index: usize,
    z_class: usize,
    online_pixels: Vec<f64>,
    online_record: AugmentParams,
    positive_pixels: Vec<f64>,
    positive_record: AugmentParams,
    masks: MaskPair,
}

fn mask_extraction(
    state: &ModelState,
    pixels: &[f64],
    z_class: usize,
    masks_enabled: bool,
) -> Result<Option<EStepOutput>> {
    let cfg = &state.config;
    if matches!(cfg.arch, Arch::ConvBaseline) || !masks_enabled || cfg.no_cam || cfg.gt_masks {
        return Ok(None);
    }
    let zeros = MaskPair::zeros(&state.model_cfg);
    let first = e_step_for_class(
        &state.online,
        &state.model_cfg,
        pixels,
        Some(z_class),
        cfg.gamma_cam,
        &zeros,
    )?;
    if cfg.joint_optim {
        // entangled variant: re-extract with the fresh masks gating the
        // same forward, so guidance and optimization state are coupled
        // within the step instead of coming from the clean snapshot
        let second = e_step_for_class(
            &state.online,
            &state.model_cfg,
            pixels,
            Some(z_class),
            cfg.gamma_cam,
            &first.masks,
        )?;
        return Ok(Some(second));
    }
    Ok(Some(first))
}

fn prepare_batch(
    state: &mut ModelState,
    dataset: &Dataset,
    class_index: &[Vec<usize>],
    chunk: &[usize],
    masks_enabled: bool,
) -> Result<(Vec<Prep>, bool)> {
    let size = dataset.spec.image_size;
    let (g3, g4) = state.model_cfg.grids();
    let mut preps = Vec::with_capacity(chunk.len());
    // augmentation and positive picks draw from the state RNG in a fixed
    // order, one sample at a time
    for &i in chunk {
        let sample = &dataset.train[i];
        let z_class = sample.observed_class()?;
        let online = augment_view(sample, ViewKind::Online, size, &mut state.rng);
        let pool = &class_index[z_class];
        let positive_idx = if pool.iter().any(|&j| j != i) {
            loop {
                let j = pool[state.rng.random_range(0..pool.len())];
                if j != i {
                    break Some(j);
                }
            }
        } else {
            None // self-positive fallback: second augmentation of the anchor
        };
        let positive_sample = positive_idx.map(|j| &dataset.train[j]).unwrap_or(sample);
        let target = augment_view(positive_sample, ViewKind::Target, size, &mut state.rng);
        preps.push(Prep {
            index: i,
            z_class,
            online_pixels: online.pixels,
            online_record: online.record,
            positive_pixels: target.pixels,
            positive_record: target.record,
            masks: MaskPair {
                stage3: vec![0.0; g3 * g3],
                stage4: vec![0.0; g4 * g4],
            },
        });
    }
    // mask production (expectation step) from the pre-batch snapshot
    let mut ran_e_step = false;
    for prep in preps.iter_mut() {
        if state.config.gt_masks && masks_enabled && matches!(state.config.arch, Arch::Smt) {
            let sample = &dataset.train[prep.index];
            let full = &sample.gt_masks[prep.z_class];
            let m3 = downsample_max(full, size, g3);
            let m4 = downsample_max(full, size, g4);
            prep.masks = MaskPair {
                stage3: transport_mask(&m3, g3, g3, &prep.online_record),
                stage4: transport_mask(&m4, g4, g4, &prep.online_record),
            };
        } else if let Some(out) =
            mask_extraction(state, &prep.online_pixels, prep.z_class, masks_enabled)?
        {
            prep.masks = out.masks;
            ran_e_step = true;
        }
    }
    Ok((preps, ran_e_step))
}

/// Masks for the target encode: carried from the anchor's online-view
/// frame into the positive's target-view frame.
fn target_masks(prep: &Prep, g3: usize, g4: usize) -> MaskPair {
    let flip = prep.online_record.flip != prep.positive_record.flip;
    let rec = AugmentParams {
        flip,
        jitter: [1.0; 3],
    };
    MaskPair {
        stage3: transport_mask(&prep.masks.stage3, g3, g3, &rec),
        stage4: transport_mask(&prep.masks.stage4, g4, g4, &rec),
    }
}

fn diagnostic_dump(out_dir: Option<&Path>, state: &ModelState, ids: &[u32], what: &str) {
    if let Some(dir) = out_dir {
        let text = format!(
            "non-finite {what} at t={} epoch={}\nbatch sample ids: {:?}\nonline checksum: {:016x}\n",
            state.t,
            state.epoch,
            ids,
            state.online.checksum()
        );
        let _ = std::fs::write(dir.join("diagnostic_batch.txt"), text);
    }
}

fn train_batch(
    state: &mut ModelState,
    dataset: &Dataset,
    preps: &[Prep],
    ran_e_step: bool,
    prior: &DistributionPrior,
    adam: &AdamConfig,
    events: &mut Vec<Event>,
    train_preds: &mut [Vec<f64>],
    out_dir: Option<&Path>,
) -> Result<(f64, f64)> {
    let cfg = state.config.clone();
    let l = dataset.spec.num_classes;
    let (g3, g4) = state.model_cfg.grids();
    if ran_e_step {
        events.push(Event { t: state.t, phase: Phase::EStep });
    }

    // ---- classification forward (one tape for the whole batch)
    let mut tape = Tape::new();
    let mut p_rows: Vec<Tensor> = Vec::with_capacity(preps.len());
    let mut y_rows: Vec<Tensor> = Vec::with_capacity(preps.len());
    let mut est_leaves: Vec<(usize, Tensor)> = Vec::with_capacity(preps.len());
    let mut pooled_feats: Vec<Vec<f64>> = Vec::with_capacity(preps.len());
    let mut probs_vals: Vec<Vec<f64>> = Vec::with_capacity(preps.len());
    for prep in preps {
        let out = forward(
            &mut tape,
            &state.online,
            &state.model_cfg,
            &prep.online_pixels,
            &prep.masks,
            BindMode::Trainable,
            ForwardOpts::default(),
        )?;
        probs_vals.push(tape.values(out.probs).to_vec());
        pooled_feats.push(tape.values(out.pooled).to_vec());
        p_rows.push(out.probs);
        let row = prep.index;
        let leaf = tape.leaf(state.estimator.logits_row(row).to_vec(), &[l], true)?;
        let y = tape.sigmoid(leaf);
        est_leaves.push((row, leaf));
        y_rows.push(y);
    }
    let z_rows: Vec<&[u8]> = preps
        .iter()
        .map(|p| dataset.train[p.index].z.as_slice())
        .collect();
    let loss = loss_class(&mut tape, &p_rows, &y_rows, &z_rows, prior)?;
    let loss_class_val = tape.value_scalar(loss);
    if !loss_class_val.is_finite() {
        let ids: Vec<u32> = preps.iter().map(|p| dataset.train[p.index].id).collect();
        diagnostic_dump(out_dir, state, &ids, "classification loss");
        return Err(ScobError::Numeric(format!(
            "classification loss is not finite at t={} (batch ids {ids:?})",
            state.t
        )));
    }

    // ---- priority-tree insertion, before any parameter update
    events.push(Event { t: state.t, phase: Phase::IptInsert });
    for (prep, (feat, probs)) in preps.iter().zip(pooled_feats.iter().zip(probs_vals.iter())) {
        let confidence = probs[prep.z_class].clamp(0.0, 1.0);
        state.forest.insert(IptNode::new(
            prep.z_class,
            feat.clone(),
            confidence,
            dataset.train[prep.index].id,
        ))?;
    }

    // ---- classification maximization step
    tape.backward(loss)?;
    for (name, grad) in tape.param_grads() {
        let lr = cfg.lr_for(name);
        adam_step(state.online.get_mut(name)?, grad, lr, adam)?;
    }
    for (row, leaf) in &est_leaves {
        let grad = tape
            .grad(*leaf)
            .ok_or_else(|| ScobError::Contract("estimator row missing gradient".into()))?
            .to_vec();
        state
            .estimator
            .adam_step_row(*row, &grad, cfg.lr_estimator, adam)?;
    }
    events.push(Event { t: state.t, phase: Phase::ClassStep });

    // record the batch predictions for the unknown-negative statistics
    for (prep, probs) in preps.iter().zip(probs_vals.iter()) {
        train_preds[prep.index] = probs.clone();
    }

    // ---- contrastive maximization step
    let mut loss_cont_val = 0.0;
    if !cfg.no_cl {
        let mut tape2 = Tape::new();
        let mut losses: Vec<Tensor> = Vec::with_capacity(preps.len());
        let mut any_negatives = false;
        for prep in preps {
            let out = forward(
                &mut tape2,
                &state.online,
                &state.model_cfg,
                &prep.online_pixels,
                &prep.masks,
                BindMode::Trainable,
                ForwardOpts::default(),
            )?;
            let tmasks = target_masks(prep, g3, g4);
            let positive = encode_target(
                &state.target,
                &state.model_cfg,
                &prep.positive_pixels,
                &tmasks,
            )?;
            let negatives: Vec<Vec<f64>> = if cfg.random_negatives {
                // uniform draws over all stored nodes outside the anchor class
                let mut candidates: Vec<(usize, usize)> = Vec::new();
                for c in 0..l {
                    if c == prep.z_class {
                        continue;
                    }
                    for ni in 0..state.forest.tree(c).len() {
                        candidates.push((c, ni));
                    }
                }
                let take = cfg.k_negatives.min(candidates.len());
                // partial shuffle, deterministic from the state RNG
                for i in 0..take {
                    let j = state.rng.random_range(i..candidates.len());
                    candidates.swap(i, j);
                }
                candidates[..take]
                    .iter()
                    .map(|&(c, ni)| state.forest.tree(c).nodes()[ni].feature.clone())
                    .collect()
            } else {
                let per_class = cfg.k_negatives.div_ceil(l.saturating_sub(1).max(1));
                let mut nodes = state.forest.pop_top(prep.z_class, per_class);
                nodes.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
                nodes.truncate(cfg.k_negatives);
                nodes.into_iter().map(|n| n.feature).collect()
            };
            if !negatives.is_empty() {
                any_negatives = true;
            }
            let li = info_nce(&mut tape2, out.pooled, &positive, &negatives, cfg.tau, cfg.lambda_c)?;
            losses.push(li);
        }
        if any_negatives {
            let stacked = tape2.concat_vec(&losses)?;
            let sum = tape2.sum_all(stacked);
            let mean = tape2.mul_scalar(sum, 1.0 / preps.len() as f64);
            loss_cont_val = tape2.value_scalar(mean);
            if !loss_cont_val.is_finite() {
                let ids: Vec<u32> = preps.iter().map(|p| dataset.train[p.index].id).collect();
                diagnostic_dump(out_dir, state, &ids, "contrastive loss");
                return Err(ScobError::Numeric(format!(
                    "contrastive loss is not finite at t={} (batch ids {ids:?})",
                    state.t
                )));
            }
            tape2.backward(mean)?;
            for (name, grad) in tape2.param_grads() {
                let lr = cfg.lr_for(name);
                adam_step(state.online.get_mut(name)?, grad, lr, adam)?;
            }
        }
        events.push(Event { t: state.t, phase: Phase::ContrastStep });
    }
    Ok((loss_class_val, loss_cont_val))
}

/// Class probabilities for one image at inference time. With `refine`,
/// masks for the top-scoring class are extracted from the first pass and
/// gate the second.
pub fn predict_one(
    params: &ParamSet,
    model_cfg: &ModelConfig,
    pixels: &[f64],
    gamma_cam: f64,
    refine: bool,
) -> Result<Vec<f64>> {
    if !refine || matches!(model_cfg.arch, Arch::ConvBaseline) {
        let mut tape = Tape::new();
        let out = forward(
            &mut tape,
            params,
            model_cfg,
            pixels,
            &MaskPair::zeros(model_cfg),
            BindMode::Frozen,
            ForwardOpts::default(),
        )?;
        return Ok(tape.values(out.probs).to_vec());
    }
    let zeros = MaskPair::zeros(model_cfg);
    let est = e_step_for_class(params, model_cfg, pixels, None, gamma_cam, &zeros)?;
    let mut tape = Tape::new();
    let out = forward(
        &mut tape,
        params,
        model_cfg,
        pixels,
        &est.masks,
        BindMode::Frozen,
        ForwardOpts::default(),
    )?;
    Ok(tape.values(out.probs).to_vec())
}

/// Score matrix for a sample set.
pub fn predict_scores(
    params: &ParamSet,
    model_cfg: &ModelConfig,
    samples: &[crate::data::ImageSample],
    gamma_cam: f64,
    refine: bool,
) -> Result<Vec<Vec<f64>>> {
    samples
        .iter()
        .map(|s| predict_one(params, model_cfg, &s.pixels, gamma_cam, refine))
        .collect()
}

/// Pixelwise mask quality of extracted activations against ground-truth
/// masks on a sample set, micro-averaged over both stage grids and all
/// positive classes. Returns (precision, recall, F1).
pub fn cam_quality(
    params: &ParamSet,
    model_cfg: &ModelConfig,
    samples: &[crate::data::ImageSample],
    gamma_cam: f64,
) -> Result<(f64, f64, f64)> {
    let (g3, g4) = model_cfg.grids();
    let size = model_cfg.image_size;
    let zeros = MaskPair::zeros(model_cfg);
    let mut predicted: Vec<Vec<f64>> = Vec::new();
    let mut truth: Vec<Vec<f64>> = Vec::new();
    for sample in samples {
        for class in 0..model_cfg.num_classes {
            if sample.y[class] != 1 {
                continue;
            }
            let out = e_step_for_class(params, model_cfg, &sample.pixels, Some(class), gamma_cam, &zeros)?;
            predicted.push(out.masks.stage3);
            truth.push(downsample_max(&sample.gt_masks[class], size, g3));
            predicted.push(out.masks.stage4);
            truth.push(downsample_max(&sample.gt_masks[class], size, g4));
        }
    }
    let pred_refs: Vec<&[f64]> = predicted.iter().map(|m| m.as_slice()).collect();
    let truth_refs: Vec<&[f64]> = truth.iter().map(|m| m.as_slice()).collect();
    crate::eval::cam_mask_metrics(&pred_refs, &truth_refs)
}

/// Mean predicted positive count per sample over a score matrix.
pub fn mean_predicted_positives(scores: &[Vec<f64>]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().map(|r| r.iter().sum::<f64>()).sum::<f64>() / scores.len() as f64
}

fn run_epochs(
    mut state: ModelState,
    dataset: &Dataset,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let cfg = state.config.clone();
    let adam = AdamConfig::default();
    let prior = DistributionPrior::new(
        dataset
            .spec
            .expected_positives()
            .clamp(1.0, dataset.spec.num_classes as f64),
        dataset.spec.num_classes,
    )?;
    let class_index = dataset.class_index();
    let n_train = dataset.train.len();
    let val_y: Vec<Vec<u8>> = dataset.val.iter().map(|s| s.y.clone()).collect();
    let train_y: Vec<Vec<u8>> = dataset.train.iter().map(|s| s.y.clone()).collect();
    let train_z: Vec<Vec<u8>> = dataset.train.iter().map(|s| s.z.clone()).collect();

    let mut metrics = Vec::new();
    let mut events = Vec::new();
    let mut histograms = Vec::new();

    let first_epoch = state.epoch + 1;
    for epoch in first_epoch..=cfg.epochs {
        let wall = Instant::now();
        let warmup_epochs = cfg.epochs.div_ceil(3);
        let masks_enabled = !(cfg.two_stage && epoch <= warmup_epochs);

        let mut indices: Vec<usize> = (0..n_train).collect();
        indices.shuffle(&mut state.rng);

        let mut train_preds: Vec<Vec<f64>> = vec![Vec::new(); n_train];
        let mut sum_class = 0.0;
        let mut sum_cont = 0.0;
        let mut batches = 0.0;
        for chunk in indices.chunks(cfg.batch_size) {
            state.t += 1;
            let (preps, ran_e_step) =
                prepare_batch(&mut state, dataset, &class_index, chunk, masks_enabled)?;
            let (lc, lk) = train_batch(
                &mut state,
                dataset,
                &preps,
                ran_e_step,
                &prior,
                &adam,
                &mut events,
                &mut train_preds,
                out_dir,
            )?;
            sum_class += lc;
            sum_cont += lk;
            batches += 1.0;
            if cfg.momentum_per_step {
                momentum_update(&mut state.target, &state.online, cfg.alpha)?;
                events.push(Event { t: state.t, phase: Phase::MomentumUpdate });
            }
        }
        if !cfg.momentum_per_step {
            momentum_update(&mut state.target, &state.online, cfg.alpha)?;
            events.push(Event { t: state.t, phase: Phase::MomentumUpdate });
        }
        state.epoch = epoch;

        let scores = predict_scores(
            &state.online,
            &state.model_cfg,
            &dataset.val,
            cfg.gamma_cam,
            cfg.eval_refine,
        )?;
        let (val_map, _) = mean_average_precision(&scores, &val_y)?;
        let prf = prf_metrics(&scores, &val_y, 0.5)?;
        let hist = histogram_unknown_negatives(&train_preds, &train_y, &train_z, HISTOGRAM_BINS)?;
        let munp = mean_unknown_negative_prob(&train_preds, &train_y, &train_z);
        histograms.push((epoch, hist));
        metrics.push(MetricsRecord {
            epoch,
            t: state.t,
            loss_class: sum_class / batches,
            loss_cont: sum_cont / batches,
            val_map,
            val_of1: prf.of1,
            val_cf1: prf.cf1,
            mean_unknown_neg_prob: munp,
            wall_seconds: wall.elapsed().as_secs_f64(),
        });
        events.push(Event { t: state.t, phase: Phase::EpochEnd });

        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
            let ckpt = state_to_checkpoint(&state);
            save_checkpoint(&ckpt, &dir.join(format!("epoch_{epoch:03}.ckpt")))?;
            save_checkpoint(&ckpt, &dir.join("latest.ckpt"))?;
            write_metrics_csv(&metrics, &dir.join("metrics.csv"))?;
            write_histograms_csv(&histograms, &dir.join("histograms.csv"))?;
        }
    }
    Ok(TrainOutcome {
        state,
        metrics,
        events,
        histograms,
    })
}

/// Run the full bootstrapping loop on a single-positive dataset.
pub fn run_bootstrap(
    config: &TrainConfig,
    dataset: &Dataset,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let state = init_state(config, dataset)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    run_epochs(state, dataset, out_dir)
}

pub fn state_to_checkpoint(state: &ModelState) -> CheckpointData {
    CheckpointData {
        config_text: state.config.to_kv_string(),
        epoch: state.epoch as u32,
        t: state.t,
        online: state.online.clone(),
        target: state.target.clone(),
        estimator: state.estimator.clone(),
        forest_capacity: state.config.ipt_capacity as u32,
        forest_nodes: (0..state.forest.num_classes())
            .map(|c| state.forest.tree(c).nodes().to_vec())
            .collect(),
        rng: save_state(&state.rng),
    }
}

/// Rebuild training state from a checkpoint, for the given dataset.
pub fn state_from_checkpoint(data: CheckpointData, dataset: &Dataset) -> Result<ModelState> {
    let config = TrainConfig::from_kv_text(&data.config_text)?;
    config.validate()?;
    let model_cfg = config.model_config(dataset.spec.image_size, dataset.spec.num_classes);
    model_cfg.validate()?;
    if data.estimator.num_samples != dataset.train.len() {
        return Err(ScobError::Contract(format!(
            "checkpoint estimator has {} rows, dataset has {} training samples",
            data.estimator.num_samples,
            dataset.train.len()
        )));
    }
    let forest = checkpoint::forest_from_nodes(data.forest_nodes, data.forest_capacity as usize);
    Ok(ModelState {
        config,
        model_cfg,
        online: data.online,
        target: data.target,
        estimator: data.estimator,
        forest,
        epoch: data.epoch as usize,
        t: data.t,
        rng: restore_state(&data.rng),
    })
}

/// Resume training from a checkpoint; the stored configuration is
/// authoritative and must describe the same run.
pub fn resume_bootstrap(
    checkpoint_path: &Path,
    dataset: &Dataset,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let data = load_checkpoint(checkpoint_path)?;
    let state = state_from_checkpoint(data, dataset)?;
    if state.epoch >= state.config.epochs {
        return Err(ScobError::Contract(format!(
            "checkpoint already covers {} of {} epochs",
            state.epoch, state.config.epochs
        )));
    }
    run_epochs(state, dataset, out_dir)
}

pub fn write_metrics_csv(metrics: &[MetricsRecord], path: &Path) -> Result<()> {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in metrics {
        s.push_str(&m.csv_row());
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn write_histograms_csv(histograms: &[(usize, Vec<f64>)], path: &Path) -> Result<()> {
    let mut s = String::from("epoch,bin_low,bin_high,frequency\n");
    for (epoch, freqs) in histograms {
        let bins = freqs.len();
        for (i, f) in freqs.iter().enumerate() {
            let lo = i as f64 / bins as f64;
            let hi = (i + 1) as f64 / bins as f64;
            let _ = writeln!(s, "{epoch},{lo},{hi},{f}");
        }
    }
    std::fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{drop_to_single_positive, generate_dataset, DatasetSpec};

    fn toy_dataset() -> Dataset {
        let spec = DatasetSpec {
            num_train: 24,
            num_val: 8,
            ..DatasetSpec::default()
        };
        let mut ds = generate_dataset(&spec).unwrap();
        drop_to_single_positive(&mut ds, 13).unwrap();
        ds
    }

    fn toy_config() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            widths: [4, 8, 12, 12],
            d_model: 16,
            num_layers: 1,
            num_heads: 2,
            hidden_dim: 32,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_kv_round_trip() {
        let mut cfg = TrainConfig::desk();
        cfg.no_cl = true;
        cfg.seed = 42;
        cfg.arch = Arch::ConvBaseline;
        let text = cfg.to_kv_string();
        let parsed = TrainConfig::from_kv_text(&text).unwrap();
        assert_eq!(cfg, parsed);
    }

    #[test]
    fn invalid_flag_combinations_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.no_cl = true;
        cfg.random_negatives = true;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::default();
        cfg.joint_optim = true;
        cfg.two_stage = true;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn smoke_run_emits_checkpoint_and_metrics() {
        let ds = toy_dataset();
        let cfg = toy_config();
        let dir = std::env::temp_dir().join("scob-train-smoke");
        let _ = std::fs::remove_dir_all(&dir);
        let out = run_bootstrap(&cfg, &ds, Some(&dir)).unwrap();
        assert_eq!(out.metrics.len(), 1);
        assert!(out.metrics[0].loss_class.is_finite());
        assert!(dir.join("epoch_001.ckpt").exists());
        assert!(dir.join("metrics.csv").exists());
        assert!(dir.join("histograms.csv").exists());
        assert!(alg1_order_ok(&out.events));
        assert!(out.state.forest.total_len() > 0);
    }

    #[test]
    fn no_cl_skips_contrastive_phase() {
        let ds = toy_dataset();
        let mut cfg = toy_config();
        cfg.no_cl = true;
        let out = run_bootstrap(&cfg, &ds, None).unwrap();
        assert!(out.events.iter().all(|e| e.phase != Phase::ContrastStep));
        assert_eq!(out.metrics[0].loss_cont, 0.0);
    }

    #[test]
    fn training_requires_single_positive_labels() {
        let spec = DatasetSpec {
            num_train: 8,
            num_val: 4,
            positives_range: (2, 3),
            ..DatasetSpec::default()
        };
        let ds = generate_dataset(&spec).unwrap(); // no dropping applied
        let err = run_bootstrap(&toy_config(), &ds, None).unwrap_err();
        assert!(matches!(err, ScobError::Contract(_)));
    }

    #[test]
    fn estimator_rows_outside_batches_do_not_change_within_one_batch() {
        // one batch of size 8 touches exactly 8 rows
        let ds = toy_dataset();
        let mut cfg = toy_config();
        cfg.batch_size = 8;
        let state = init_state(&cfg, &ds).unwrap();
        let before = state.estimator.logits.clone();
        // run a single epoch; every sample is visited exactly once, so each
        // row must have exactly one optimizer step
        let out = run_bootstrap(&cfg, &ds, None).unwrap();
        assert!(out.state.estimator.row_steps.iter().all(|&s| s == 1));
        assert_ne!(out.state.estimator.logits, before);
    }

    #[test]
    fn target_network_is_touched_only_by_momentum() {
        let ds = toy_dataset();
        let mut cfg = toy_config();
        cfg.alpha = 0.5;
        let out = run_bootstrap(&cfg, &ds, None).unwrap();
        // after one epoch: target = 0.5 * init + 0.5 * online(final)
        let init = init_params(&out.state.model_cfg, cfg.seed).unwrap();
        for (name, p) in out.state.target.iter() {
            let i = init.get(name).unwrap();
            let o = out.state.online.get(name).unwrap();
            for ((tv, iv), ov) in p.values.iter().zip(i.values.iter()).zip(o.values.iter()) {
                let expect = 0.5 * iv + 0.5 * ov;
                assert!((tv - expect).abs() < 1e-12, "{name}: {tv} vs {expect}");
            }
        }
    }

    #[test]
    fn fixed_seed_reproduces_metrics_exactly() {
        let ds = toy_dataset();
        let cfg = toy_config();
        let a = run_bootstrap(&cfg, &ds, None).unwrap();
        let b = run_bootstrap(&cfg, &ds, None).unwrap();
        let strip = |m: &MetricsRecord| {
            (
                m.epoch,
                m.t,
                m.loss_class.to_bits(),
                m.loss_cont.to_bits(),
                m.val_map.to_bits(),
                m.mean_unknown_neg_prob.to_bits(),
            )
        };
        let av: Vec<_> = a.metrics.iter().map(strip).collect();
        let bv: Vec<_> = b.metrics.iter().map(strip).collect();
        assert_eq!(av, bv);
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted_run() {
        let ds = toy_dataset();
        let mut cfg = toy_config();
        cfg.epochs = 3;
        let dir = std::env::temp_dir().join("scob-train-resume");
        let _ = std::fs::remove_dir_all(&dir);
        let full = run_bootstrap(&cfg, &ds, Some(&dir)).unwrap();

        let resumed = resume_bootstrap(&dir.join("epoch_001.ckpt"), &ds, None).unwrap();
        assert_eq!(resumed.metrics.len(), 2);
        for (a, b) in full.metrics[1..].iter().zip(resumed.metrics.iter()) {
            assert_eq!(a.epoch, b.epoch);
            assert_eq!(a.loss_class.to_bits(), b.loss_class.to_bits());
            assert_eq!(a.loss_cont.to_bits(), b.loss_cont.to_bits());
            assert_eq!(a.val_map.to_bits(), b.val_map.to_bits());
        }
        // final parameters bit-identical
        for (name, p) in full.state.online.iter() {
            let q = resumed.state.online.get(name).unwrap();
            assert_eq!(p.values, q.values, "parameter {name} differs after resume");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let ds = toy_dataset();
        let cfg = toy_config();
        let out = run_bootstrap(&cfg, &ds, None).unwrap();
        let data = state_to_checkpoint(&out.state);
        let dir = std::env::temp_dir().join("scob-ckpt-roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("x.ckpt");
        save_checkpoint(&data, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(data, loaded);
    }

    #[test]
    fn corrupt_checkpoint_is_rejected_cleanly() {
        let dir = std::env::temp_dir().join("scob-ckpt-bad");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxx").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(ScobError::Format(_))));
    }

    #[test]
    fn gt_masks_variant_runs() {
        let ds = toy_dataset();
        let mut cfg = toy_config();
        cfg.gt_masks = true;
        let out = run_bootstrap(&cfg, &ds, None).unwrap();
        assert!(out.metrics[0].loss_class.is_finite());
    }

    #[test]
    fn baseline_variant_runs_without_masks() {
        let ds = toy_dataset();
        let mut cfg = toy_config();
        cfg = cfg.variant("baseline").unwrap();
        cfg.epochs = 1;
        let out = run_bootstrap(&cfg, &ds, None).unwrap();
        assert!(out.metrics[0].loss_class.is_finite());
        assert!(out.events.iter().all(|e| e.phase != Phase::EStep));
    }
}
