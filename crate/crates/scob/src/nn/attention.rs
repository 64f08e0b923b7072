//! Masked multi-head attention block.
//!
//! Queries and keys are computed from `(x + pos) * keep`, where `keep` is
//! `1 - mask` per token — a masked token contributes an exactly-zero
//! query/key input, so its key logits vanish no matter what its features
//! are. The value path sees the unmasked token features. The q/k/v
//! projections carry no bias, which is what makes the zero-logit property
//! exact.

use crate::autodiff::{Tape, Tensor};
use crate::error::Result;

use super::param::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BindMode {
    /// Parameters are gradient-tracked leaves named after the parameter.
    Trainable,
    /// Parameters enter the tape as constants.
    Frozen,
}

/// Binds named parameters from a [`ParamSet`] onto a tape.
pub struct Binder<'a> {
    pub params: &'a ParamSet,
    pub mode: BindMode,
}

impl Binder<'_> {
    pub fn get(&self, tape: &mut Tape, name: &str) -> Result<Tensor> {
        let p = self.params.get(name)?;
        match self.mode {
            BindMode::Trainable => tape.bind(name, &p.values, &p.shape),
            BindMode::Frozen => tape.bind_frozen(&p.values, &p.shape),
        }
    }
}

/// Interior attention tensors captured for inspection.
pub struct HeadCapture {
    /// Pre-softmax scaled logits, [T, T]; row = query, column = key.
    pub logits: Tensor,
    /// Post-softmax attention weights, [T, T].
    pub weights: Tensor,
}

/// One attention + feed-forward layer.
///
/// `x`: [T, d] layer input; `pos`: [T, d] positional encodings;
/// `keep`: [T] with entries `1 - mask`. Returns the layer output [T, d].
#[allow(clippy::too_many_arguments)]
pub fn smt_layer(
    tape: &mut Tape,
    binder: &Binder,
    prefix: &str,
    x: Tensor,
    pos: Tensor,
    keep: Tensor,
    num_heads: usize,
    mut capture: Option<&mut Vec<HeadCapture>>,
) -> Result<Tensor> {
    let d = tape.shape(x)[1];
    let d_head = d / num_heads;
    let scale = 1.0 / (d_head as f64).sqrt();

    let x_pos = tape.add(x, pos)?;
    let qk_in = tape.scale_rows(x_pos, keep)?;

    let wq = binder.get(tape, &format!("{prefix}.wq"))?;
    let wk = binder.get(tape, &format!("{prefix}.wk"))?;
    let wv = binder.get(tape, &format!("{prefix}.wv"))?;
    let q = tape.matmul(qk_in, wq, false)?;
    let k = tape.matmul(qk_in, wk, false)?;
    let v = tape.matmul(x, wv, false)?;

    let mut heads = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let qh = tape.slice_cols(q, h * d_head, d_head)?;
        let kh = tape.slice_cols(k, h * d_head, d_head)?;
        let vh = tape.slice_cols(v, h * d_head, d_head)?;
        let raw = tape.matmul(qh, kh, true)?;
        let logits = tape.mul_scalar(raw, scale);
        let weights = tape.softmax(logits)?;
        if let Some(cap) = capture.as_deref_mut() {
            cap.push(HeadCapture { logits, weights });
        }
        heads.push(tape.matmul(weights, vh, false)?);
    }
    let merged = tape.concat_cols(&heads)?;
    let wo = binder.get(tape, &format!("{prefix}.wo"))?;
    let bo = binder.get(tape, &format!("{prefix}.bo"))?;
    let proj = tape.matmul(merged, wo, false)?;
    let attn_out = tape.add_row(proj, bo)?;
    let x = tape.add(x, attn_out)?;

    let w1 = binder.get(tape, &format!("{prefix}.ff1w"))?;
    let b1 = binder.get(tape, &format!("{prefix}.ff1b"))?;
    let w2 = binder.get(tape, &format!("{prefix}.ff2w"))?;
    let b2 = binder.get(tape, &format!("{prefix}.ff2b"))?;
    let h1 = tape.matmul(x, w1, false)?;
    let h1 = tape.add_row(h1, b1)?;
    let h1 = tape.relu(h1);
    let h2 = tape.matmul(h1, w2, false)?;
    let h2 = tape.add_row(h2, b2)?;
    tape.add(x, h2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::nn::param::{xavier_uniform, Param, ParamSet};
    use crate::rng::rng_stream;

    fn layer_params(d: usize, hidden: usize, seed: u64) -> ParamSet {
        let mut rng = rng_stream(seed, 0);
        let mut ps = ParamSet::new();
        for w in ["wq", "wk", "wv", "wo"] {
            ps.insert(&format!("l.{w}"), xavier_uniform(vec![d, d], d, d, &mut rng));
        }
        ps.insert("l.bo", Param::zeros(vec![d]));
        ps.insert("l.ff1w", xavier_uniform(vec![d, hidden], d, hidden, &mut rng));
        ps.insert("l.ff1b", Param::zeros(vec![hidden]));
        ps.insert("l.ff2w", xavier_uniform(vec![hidden, d], hidden, d, &mut rng));
        ps.insert("l.ff2b", Param::zeros(vec![d]));
        ps
    }

    fn tokens(t: usize, d: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_stream(seed, 1);
        use rand::Rng;
        (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Forward with an explicit keep vector; `skip_scale` omits the
    /// masking op entirely for the reference path.
    fn run(
        ps: &ParamSet,
        xv: &[f64],
        posv: &[f64],
        keepv: &[f64],
        t: usize,
        d: usize,
        heads: usize,
        skip_scale: bool,
    ) -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let binder = Binder { params: ps, mode: BindMode::Frozen };
        let x = tape.constant(xv.to_vec(), &[t, d]).unwrap();
        let pos = tape.constant(posv.to_vec(), &[t, d]).unwrap();
        let keep = tape.constant(keepv.to_vec(), &[t]).unwrap();
        let out = if skip_scale {
            // reference: same block with the row-scaling node removed
            let d_head = d / heads;
            let scale = 1.0 / (d_head as f64).sqrt();
            let qk_in = tape.add(x, pos).unwrap();
            let wq = binder.get(&mut tape, "l.wq").unwrap();
            let wk = binder.get(&mut tape, "l.wk").unwrap();
            let wv = binder.get(&mut tape, "l.wv").unwrap();
            let q = tape.matmul(qk_in, wq, false).unwrap();
            let k = tape.matmul(qk_in, wk, false).unwrap();
            let v = tape.matmul(x, wv, false).unwrap();
            let mut hs = Vec::new();
            for h in 0..heads {
                let qh = tape.slice_cols(q, h * d_head, d_head).unwrap();
                let kh = tape.slice_cols(k, h * d_head, d_head).unwrap();
                let vh = tape.slice_cols(v, h * d_head, d_head).unwrap();
                let raw = tape.matmul(qh, kh, true).unwrap();
                let logits = tape.mul_scalar(raw, scale);
                let w = tape.softmax(logits).unwrap();
                hs.push(tape.matmul(w, vh, false).unwrap());
            }
            let merged = tape.concat_cols(&hs).unwrap();
            let wo = binder.get(&mut tape, "l.wo").unwrap();
            let bo = binder.get(&mut tape, "l.bo").unwrap();
            let proj = tape.matmul(merged, wo, false).unwrap();
            let a = tape.add_row(proj, bo).unwrap();
            let x1 = tape.add(x, a).unwrap();
            let w1 = binder.get(&mut tape, "l.ff1w").unwrap();
            let b1 = binder.get(&mut tape, "l.ff1b").unwrap();
            let w2 = binder.get(&mut tape, "l.ff2w").unwrap();
            let b2 = binder.get(&mut tape, "l.ff2b").unwrap();
            let h1 = tape.matmul(x1, w1, false).unwrap();
            let h1 = tape.add_row(h1, b1).unwrap();
            let h1 = tape.relu(h1);
            let h2 = tape.matmul(h1, w2, false).unwrap();
            let h2 = tape.add_row(h2, b2).unwrap();
            tape.add(x1, h2).unwrap()
        } else {
            let mut cap = Vec::new();
            let out = smt_layer(&mut tape, &binder, "l", x, pos, keep, heads, Some(&mut cap)).unwrap();
            let logits: Vec<Vec<f64>> = cap.iter().map(|c| tape.values(c.logits).to_vec()).collect();
            let weights: Vec<Vec<f64>> = cap.iter().map(|c| tape.values(c.weights).to_vec()).collect();
            return (tape.values(out).to_vec(), logits, weights);
        };
        (tape.values(out).to_vec(), vec![], vec![])
    }

    #[test]
    fn zero_mask_equals_unmasked_reference() {
        let (t, d, heads) = (6, 8, 2);
        let ps = layer_params(d, 16, 3);
        let xv = tokens(t, d, 4);
        let posv = tokens(t, d, 5);
        let keep = vec![1.0; t]; // mask all zeros
        let (masked, _, _) = run(&ps, &xv, &posv, &keep, t, d, heads, false);
        let (reference, _, _) = run(&ps, &xv, &posv, &keep, t, d, heads, true);
        for (a, b) in masked.iter().zip(reference.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fully_masked_token_has_exactly_zero_key_logits() {
        let (t, d, heads) = (5, 8, 2);
        let ps = layer_params(d, 16, 7);
        let xv = tokens(t, d, 8);
        let posv = tokens(t, d, 9);
        let mut keep = vec![1.0; t];
        keep[2] = 0.0; // token 2 masked
        let (_, logits, _) = run(&ps, &xv, &posv, &keep, t, d, heads, false);
        for head in &logits {
            for row in 0..t {
                assert_eq!(head[row * t + 2], 0.0, "key logit of masked token must be 0");
            }
            // masked token as query: all its logits are zero too
            for col in 0..t {
                assert_eq!(head[2 * t + col], 0.0);
            }
        }
    }

    #[test]
    fn perturbing_masked_token_leaves_logits_unchanged() {
        let (t, d, heads) = (5, 8, 2);
        let ps = layer_params(d, 16, 11);
        let mut xv = tokens(t, d, 12);
        let posv = tokens(t, d, 13);
        let mut keep = vec![1.0; t];
        keep[1] = 0.0;
        let (out_a, logits_a, _) = run(&ps, &xv, &posv, &keep, t, d, heads, false);
        for c in 0..d {
            xv[d + c] += 0.37 * (c as f64 + 1.0); // perturb masked token 1
        }
        let (out_b, logits_b, _) = run(&ps, &xv, &posv, &keep, t, d, heads, false);
        for (ha, hb) in logits_a.iter().zip(logits_b.iter()) {
            for (a, b) in ha.iter().zip(hb.iter()) {
                assert!((a - b).abs() < 1e-12, "attention logits must not move");
            }
        }
        // but the value path does see the perturbation
        assert!(out_a.iter().zip(out_b.iter()).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn all_ones_mask_gives_uniform_attention() {
        let (t, d, heads) = (6, 8, 2);
        let ps = layer_params(d, 16, 21);
        let xv = tokens(t, d, 22);
        let posv = tokens(t, d, 23);
        let keep = vec![0.0; t]; // mask all ones
        let (_, logits, weights) = run(&ps, &xv, &posv, &keep, t, d, heads, false);
        for head in &logits {
            assert!(head.iter().all(|&v| v == 0.0));
        }
        let uniform = 1.0 / t as f64;
        for head in &weights {
            for &w in head {
                assert!((w - uniform).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn masked_block_gradient_matches_finite_differences() {
        // 2x2 token grid, gradient with respect to the token features
        let (t, d, heads) = (4, 8, 2);
        let ps = layer_params(d, 16, 31);
        let posv = tokens(t, d, 32);
        let keepv = vec![1.0, 0.0, 1.0, 1.0];
        let f: crate::autodiff::ScalarFn = &|tape, x| {
            let binder = Binder { params: &ps, mode: BindMode::Frozen };
            let pos = tape.constant(posv.clone(), &[t, d])?;
            let keep = tape.constant(keepv.clone(), &[t])?;
            let out = smt_layer(tape, &binder, "l", x, pos, keep, heads, None)?;
            let sq = tape.mul(out, out)?;
            Ok(tape.mean_all(sq))
        };
        let xv = tokens(t, d, 33);
        let err = finite_diff_check(f, &xv, &[t, d], 1e-5).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
