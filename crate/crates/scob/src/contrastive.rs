//! Object-level contrastive learning: dual-network encoding, the adapted
//! InfoNCE loss over priority-tree negatives, and the momentum update
//! that lets the target network trail the online one.

use crate::autodiff::{Tape, Tensor};
use crate::error::{Result, ScobError};
use crate::nn::{forward, BindMode, ForwardOpts, ForwardOutput, MaskPair, ModelConfig, ParamSet};

/// Cosine-normalize a vector on the tape; gradients flow through the
/// normalization.
pub fn l2_normalize(tape: &mut Tape, h: Tensor) -> Result<Tensor> {
    let n2 = tape.dot(h, h)?;
    let n2 = tape.add_scalar(n2, 1e-12);
    let norm = tape.sqrt(n2);
    let one = tape.scalar(1.0)?;
    let inv = tape.div(one, norm)?;
    tape.scale(h, inv)
}

/// Cosine-normalize detached feature values.
pub fn l2_normalize_values(v: &[f64]) -> Vec<f64> {
    let n = (v.iter().map(|x| x * x).sum::<f64>() + 1e-12).sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Adapted InfoNCE: `-lambda_c / (1 + m) * log(exp(s+/tau) / (exp(s+/tau)
/// + sum_j exp(s-_j/tau)))` over cosine similarities, where `m` is the
/// negative count. With no negatives the ratio is 1 and the loss is
/// exactly zero.
///
/// The anchor is a tape tensor; positive and negatives are detached
/// feature values (they come from the target network and the priority
/// trees).
pub fn info_nce(
    tape: &mut Tape,
    anchor: Tensor,
    positive: &[f64],
    negatives: &[Vec<f64>],
    tau: f64,
    lambda_c: f64,
) -> Result<Tensor> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(ScobError::Config(format!("temperature tau {tau} must be positive")));
    }
    if negatives.is_empty() {
        return tape.scalar(0.0);
    }
    let d = tape.shape(anchor).to_vec();
    if positive.len() != d[0] || negatives.iter().any(|n| n.len() != d[0]) {
        return Err(ScobError::Dimension("info_nce: feature dimensions differ".into()));
    }
    let m = negatives.len();
    let hn = l2_normalize(tape, anchor)?;

    let pos = tape.constant(l2_normalize_values(positive), &[d[0]])?;
    let s_pos = tape.dot(hn, pos)?;
    let s_pos = tape.mul_scalar(s_pos, 1.0 / tau);

    let mut sims = Vec::with_capacity(m + 1);
    sims.push(s_pos);
    for neg in negatives {
        let nv = tape.constant(l2_normalize_values(neg), &[d[0]])?;
        let s = tape.dot(hn, nv)?;
        sims.push(tape.mul_scalar(s, 1.0 / tau));
    }
    let stacked = tape.concat_vec(&sims)?;
    // stable log-sum-exp: shift by the max similarity (a constant shift
    // leaves the gradient unchanged)
    let shift = tape
        .values(stacked)
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let shifted = tape.add_scalar(stacked, -shift);
    let exps = tape.exp(shifted);
    let sum = tape.sum_all(exps);
    let lse = tape.log(sum);
    let lse = tape.add_scalar(lse, shift);
    let diff = tape.sub(lse, s_pos)?;
    Ok(tape.mul_scalar(diff, lambda_c / (1.0 + m as f64)))
}

/// Differentiable pooled feature (and logits) of the online network for
/// one augmented view under the given masks.
pub fn encode_online(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &ModelConfig,
    pixels: &[f64],
    masks: &MaskPair,
) -> Result<ForwardOutput> {
    forward(
        tape,
        params,
        cfg,
        pixels,
        masks,
        BindMode::Trainable,
        ForwardOpts::default(),
    )
}

/// Detached pooled feature from the target parameters. Runs on its own
/// tape with frozen bindings, so no gradient can ever reach the target.
pub fn encode_target(
    target: &ParamSet,
    cfg: &ModelConfig,
    pixels: &[f64],
    masks: &MaskPair,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let out = forward(
        &mut tape,
        target,
        cfg,
        pixels,
        masks,
        BindMode::Frozen,
        ForwardOpts::default(),
    )?;
    Ok(tape.values(out.pooled).to_vec())
}

/// Exponential-moving-average update: every target parameter becomes
/// `alpha * target + (1 - alpha) * online`.
pub fn momentum_update(target: &mut ParamSet, online: &ParamSet, alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(ScobError::Config(format!("momentum alpha {alpha} outside [0, 1)")));
    }
    if !target.same_structure(online) {
        return Err(ScobError::Contract(
            "momentum_update: target and online parameter structures differ".into(),
        ));
    }
    let one_minus = 1.0 - alpha;
    let names: Vec<String> = online.iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let ov = online.get(&name)?.values.clone();
        let tp = target.get_mut(&name)?;
        for (t, o) in tp.values.iter_mut().zip(ov.iter()) {
            *t = alpha * *t + one_minus * *o;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, test_pixels, tiny_config, Param};

    #[test]
    fn zero_negatives_gives_exactly_zero() {
        let mut tape = Tape::new();
        let h = tape.leaf(vec![0.3, -0.2, 0.9], &[3], true).unwrap();
        let l = info_nce(&mut tape, h, &[1.0, 0.0, 0.0], &[], 1.0, 0.1).unwrap();
        assert_eq!(tape.value_scalar(l), 0.0);
    }

    #[test]
    fn symmetric_single_negative_hand_value() {
        // positive and negative identical: ratio 1/2, loss = 0.1 * 0.5 * ln 2
        let mut tape = Tape::new();
        let h = tape.constant(vec![2.0, 0.0], &[2]).unwrap();
        let other = vec![0.5, 0.5];
        let l = info_nce(&mut tape, h, &other, &[other.clone()], 1.0, 0.1).unwrap();
        let expect = 0.1 * 0.5 * std::f64::consts::LN_2;
        assert!((tape.value_scalar(l) - expect).abs() < 1e-12);
    }

    #[test]
    fn loss_is_nonnegative_on_random_geometry() {
        let mut rng = crate::rng::rng_stream(17, 0);
        use rand::Rng;
        for _ in 0..50 {
            let mut tape = Tape::new();
            let hv: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let h = tape.constant(hv, &[4]).unwrap();
            let pos: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let negs: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let l = info_nce(&mut tape, h, &pos, &negs, 1.0, 0.1).unwrap();
            assert!(tape.value_scalar(l) >= 0.0);
        }
    }

    #[test]
    fn loss_decreases_as_positive_similarity_rises() {
        let neg = vec![0.0, 1.0];
        let mut last = f64::INFINITY;
        for step in 0..9 {
            let theta = std::f64::consts::PI * (1.0 - step as f64 / 8.0); // cos from -1 to 1
            let mut tape = Tape::new();
            let h = tape.constant(vec![1.0, 0.0], &[2]).unwrap();
            let pos = vec![theta.cos(), theta.sin()];
            let l = info_nce(&mut tape, h, &pos, &[neg.clone()], 1.0, 0.1).unwrap();
            let v = tape.value_scalar(l);
            assert!(v < last, "loss must fall strictly as cos similarity rises");
            last = v;
        }
    }

    #[test]
    fn non_positive_temperature_is_config_error() {
        let mut tape = Tape::new();
        let h = tape.constant(vec![1.0], &[1]).unwrap();
        assert!(matches!(
            info_nce(&mut tape, h, &[1.0], &[vec![1.0]], 0.0, 0.1),
            Err(ScobError::Config(_))
        ));
    }

    #[test]
    fn gradient_reaches_the_anchor() {
        let mut tape = Tape::new();
        let h = tape.leaf(vec![0.6, -0.1, 0.3], &[3], true).unwrap();
        let l = info_nce(
            &mut tape,
            h,
            &[1.0, 0.0, 0.0],
            &[vec![0.0, 1.0, 0.0]],
            1.0,
            0.1,
        )
        .unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(h).unwrap().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn momentum_fixed_point_and_boundaries() {
        let cfg = tiny_config();
        let online = init_params(&cfg, 1).unwrap();
        let mut target = online.clone();
        momentum_update(&mut target, &online, 0.999).unwrap();
        for (name, p) in target.iter() {
            let o = online.get(name).unwrap();
            for (a, b) in p.values.iter().zip(o.values.iter()) {
                assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
            }
        }
        // alpha = 0 copies the online network exactly
        let mut target = init_params(&cfg, 2).unwrap();
        momentum_update(&mut target, &online, 0.0).unwrap();
        for (name, p) in target.iter() {
            assert_eq!(p.values, online.get(name).unwrap().values);
        }
    }

    #[test]
    fn momentum_hand_blend() {
        let mut target = crate::nn::ParamSet::new();
        target.insert("w", Param::new(vec![1], vec![0.0]));
        let mut online = crate::nn::ParamSet::new();
        online.insert("w", Param::new(vec![1], vec![1.0]));
        momentum_update(&mut target, &online, 0.999).unwrap();
        assert!((target.get("w").unwrap().values[0] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn momentum_is_a_contraction_toward_online() {
        let cfg = tiny_config();
        let online = init_params(&cfg, 3).unwrap();
        let mut target = init_params(&cfg, 4).unwrap();
        let dist = |t: &crate::nn::ParamSet| {
            let mut s = 0.0;
            for (name, p) in t.iter() {
                let o = online.get(name).unwrap();
                for (a, b) in p.values.iter().zip(o.values.iter()) {
                    s += (a - b) * (a - b);
                }
            }
            s.sqrt()
        };
        let before = dist(&target);
        momentum_update(&mut target, &online, 0.9).unwrap();
        let after = dist(&target);
        assert!((after - 0.9 * before).abs() < 1e-12 * before.max(1.0));
    }

    #[test]
    fn momentum_structure_mismatch_is_contract_error() {
        let cfg = tiny_config();
        let online = init_params(&cfg, 5).unwrap();
        let mut target = crate::nn::ParamSet::new();
        target.insert("w", Param::new(vec![1], vec![0.0]));
        assert!(matches!(
            momentum_update(&mut target, &online, 0.5),
            Err(ScobError::Contract(_))
        ));
    }

    #[test]
    fn target_encoding_matches_online_when_parameters_match() {
        let cfg = tiny_config();
        let params = init_params(&cfg, 6).unwrap();
        let pixels = test_pixels(cfg.image_size, 7);
        let masks = MaskPair::zeros(&cfg);
        let target_feat = encode_target(&params, &cfg, &pixels, &masks).unwrap();
        let mut tape = Tape::new();
        let out = encode_online(&mut tape, &params, &cfg, &pixels, &masks).unwrap();
        assert_eq!(tape.values(out.pooled), target_feat.as_slice());
        assert_eq!(target_feat.len(), cfg.feature_dim());
    }

    #[test]
    fn online_encoding_sends_gradients_to_parameters() {
        let cfg = tiny_config();
        let params = init_params(&cfg, 8).unwrap();
        let pixels = test_pixels(cfg.image_size, 9);
        let masks = MaskPair::zeros(&cfg);
        let mut tape = Tape::new();
        let out = encode_online(&mut tape, &params, &cfg, &pixels, &masks).unwrap();
        let l = info_nce(
            &mut tape,
            out.pooled,
            &vec![0.5; cfg.feature_dim()],
            &[vec![-0.5; cfg.feature_dim()]],
            1.0,
            0.1,
        )
        .unwrap();
        tape.backward(l).unwrap();
        let grads = tape.param_grads();
        assert!(!grads.is_empty());
        assert!(grads
            .iter()
            .any(|(_, g)| g.iter().any(|&v| v != 0.0)));
    }
}
