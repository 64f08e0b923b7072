//! Classification losses for single-positive training: the one-hot
//! positive term, pseudo-label cross-entropy against a trainable label
//! estimator, a batch-level expected-positive-count regularizer, and
//! their symmetric combination.

use rand::Rng;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Result, ScobError};
use crate::nn::{adam_step_slice, AdamConfig};
use crate::rng::SeedRng;

/// Probabilities are clamped to this margin inside every logarithm.
pub const PROB_CLAMP: f64 = 1e-7;

/// Expected number of positive labels per image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistributionPrior {
    pub k: f64,
    pub num_classes: usize,
}

impl DistributionPrior {
    pub fn new(k: f64, num_classes: usize) -> Result<Self> {
        if !(1.0..=num_classes as f64).contains(&k) {
            return Err(ScobError::Config(format!(
                "prior k={k} outside [1, {num_classes}]"
            )));
        }
        Ok(DistributionPrior { k, num_classes })
    }
}

/// Trainable soft-label matrix: one row of class logits per training
/// sample, optimized alongside the network. Rows keep their own
/// adaptive-moment state so batch updates touch nothing else.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorMatrix {
    pub num_samples: usize,
    pub num_classes: usize,
    pub sample_ids: Vec<u32>,
    pub logits: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub row_steps: Vec<u64>,
}

impl EstimatorMatrix {
    /// Observed positives start with sigmoid above 0.99; unknown entries
    /// start uniform in [0.5 - xi, 0.5 + xi] on the probability scale.
    pub fn init(observed: &[Vec<u8>], sample_ids: Vec<u32>, xi: f64, rng: &mut SeedRng) -> Result<Self> {
        if !(0.0..0.5).contains(&xi) {
            return Err(ScobError::Config(format!("xi {xi} outside [0, 0.5)")));
        }
        let num_samples = observed.len();
        if num_samples == 0 {
            return Err(ScobError::Config("estimator needs at least one sample".into()));
        }
        let num_classes = observed[0].len();
        if sample_ids.len() != num_samples {
            return Err(ScobError::Contract("sample_ids length mismatch".into()));
        }
        let known_logit = (0.995f64 / 0.005).ln(); // sigmoid ~ 0.995
        let mut logits = Vec::with_capacity(num_samples * num_classes);
        for row in observed {
            if row.len() != num_classes {
                return Err(ScobError::Dimension("ragged observed-label rows".into()));
            }
            for &zv in row {
                if zv == 1 {
                    logits.push(known_logit);
                } else {
                    let u = if xi == 0.0 {
                        0.5
                    } else {
                        rng.random_range(0.5 - xi..0.5 + xi)
                    };
                    logits.push((u / (1.0 - u)).ln());
                }
            }
        }
        let n = logits.len();
        Ok(EstimatorMatrix {
            num_samples,
            num_classes,
            sample_ids,
            logits,
            m: vec![0.0; n],
            v: vec![0.0; n],
            row_steps: vec![0; num_samples],
        })
    }

    pub fn logits_row(&self, n: usize) -> &[f64] {
        &self.logits[n * self.num_classes..(n + 1) * self.num_classes]
    }

    /// Sigmoid probabilities of row n.
    pub fn probs_row(&self, n: usize) -> Vec<f64> {
        self.logits_row(n)
            .iter()
            .map(|l| 1.0 / (1.0 + (-l).exp()))
            .collect()
    }

    /// One adaptive-moment step on a single row.
    pub fn adam_step_row(&mut self, n: usize, grad: &[f64], lr: f64, cfg: &AdamConfig) -> Result<()> {
        if grad.len() != self.num_classes {
            return Err(ScobError::Contract("estimator row gradient length mismatch".into()));
        }
        self.row_steps[n] += 1;
        let steps = self.row_steps[n];
        let lo = n * self.num_classes;
        let hi = lo + self.num_classes;
        adam_step_slice(
            &mut self.logits[lo..hi],
            &mut self.m[lo..hi],
            &mut self.v[lo..hi],
            steps,
            grad,
            lr,
            cfg,
        );
        Ok(())
    }
}

fn one_hot_index(z: &[u8]) -> Result<usize> {
    let ones: Vec<usize> = z
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == 1)
        .map(|(i, _)| i)
        .collect();
    if ones.len() != 1 {
        return Err(ScobError::Contract(format!(
            "expected one-hot label, found {} positives",
            ones.len()
        )));
    }
    Ok(ones[0])
}

/// `-log p_c` for the single observed class; all other coordinates of `p`
/// are ignored.
pub fn bce_single_positive(tape: &mut Tape, p: Tensor, z: &[u8]) -> Result<Tensor> {
    if tape.shape(p) != [z.len()] {
        return Err(ScobError::Dimension(format!(
            "bce_single_positive: p {:?} vs z length {}",
            tape.shape(p),
            z.len()
        )));
    }
    let c = one_hot_index(z)?;
    let pc = tape.slice_vec(p, c, 1)?;
    let pc = tape.clamp(pc, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let lg = tape.log(pc);
    Ok(tape.mul_scalar(lg, -1.0))
}

/// Mean binary cross-entropy of `p` against soft targets `y_soft`, with a
/// stop-gradient on the targets: no gradient ever reaches `y_soft`.
pub fn bce_pseudo(tape: &mut Tape, p: Tensor, y_soft: Tensor) -> Result<Tensor> {
    if tape.shape(p) != tape.shape(y_soft) {
        return Err(ScobError::Dimension("bce_pseudo: shape mismatch".into()));
    }
    let y = tape.stop_gradient(y_soft);
    let pc = tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let log_p = tape.log(pc);
    let neg_p = tape.mul_scalar(p, -1.0);
    let one_minus_p = tape.add_scalar(neg_p, 1.0);
    let omp = tape.clamp(one_minus_p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let log_omp = tape.log(omp);
    let neg_y = tape.mul_scalar(y, -1.0);
    let one_minus_y = tape.add_scalar(neg_y, 1.0);
    let t1 = tape.mul(y, log_p)?;
    let t2 = tape.mul(one_minus_y, log_omp)?;
    let s = tape.add(t1, t2)?;
    let mean = tape.mean_all(s);
    Ok(tape.mul_scalar(mean, -1.0))
}

/// `((k_hat - k) / L)^2` where `k_hat` is the batch mean of summed class
/// probabilities.
pub fn expected_positive_regularizer(
    tape: &mut Tape,
    p_rows: &[Tensor],
    prior: &DistributionPrior,
) -> Result<Tensor> {
    if p_rows.is_empty() {
        return Err(ScobError::Contract("expected_positive_regularizer: empty batch".into()));
    }
    let all = tape.concat_vec(p_rows)?;
    let sum = tape.sum_all(all);
    let khat = tape.mul_scalar(sum, 1.0 / p_rows.len() as f64);
    let gap = tape.add_scalar(khat, -prior.k);
    let scaled = tape.mul_scalar(gap, 1.0 / prior.num_classes as f64);
    tape.mul(scaled, scaled)
}

/// Batch mean of pseudo-label and single-positive cross-entropies plus
/// the distribution constraint on the predictions `a_rows`. Targets
/// `b_rows` are stop-gradded.
pub fn loss_sp(
    tape: &mut Tape,
    a_rows: &[Tensor],
    b_rows: &[Tensor],
    z_rows: &[&[u8]],
    prior: &DistributionPrior,
) -> Result<Tensor> {
    if a_rows.len() != b_rows.len() || a_rows.len() != z_rows.len() {
        return Err(ScobError::Contract("loss_sp: batch length mismatch".into()));
    }
    let mut terms = Vec::with_capacity(a_rows.len());
    for ((&a, &b), &z) in a_rows.iter().zip(b_rows.iter()).zip(z_rows.iter()) {
        let pseudo = bce_pseudo(tape, a, b)?;
        let single = bce_single_positive(tape, a, z)?;
        terms.push(tape.add(pseudo, single)?);
    }
    let stacked = tape.concat_vec(&terms)?;
    let sum = tape.sum_all(stacked);
    let mean = tape.mul_scalar(sum, 1.0 / a_rows.len() as f64);
    let epr = expected_positive_regularizer(tape, a_rows, prior)?;
    tape.add(mean, epr)
}

/// Symmetric classification loss: the average of `loss_sp` with the
/// network predictions as student and the estimator as teacher, and the
/// same with the roles switched. Gradients reach the network through the
/// first term and the estimator through the second.
pub fn loss_class(
    tape: &mut Tape,
    p_rows: &[Tensor],
    y_rows: &[Tensor],
    z_rows: &[&[u8]],
    prior: &DistributionPrior,
) -> Result<Tensor> {
    let a = loss_sp(tape, p_rows, y_rows, z_rows, prior)?;
    let b = loss_sp(tape, y_rows, p_rows, z_rows, prior)?;
    let s = tape.add(a, b)?;
    Ok(tape.mul_scalar(s, 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_stream;

    fn prior2() -> DistributionPrior {
        DistributionPrior::new(1.5, 4).unwrap()
    }

    #[test]
    fn single_positive_values() {
        let mut tape = Tape::new();
        let p = tape.constant(vec![0.3, 1.0, 0.2], &[3]).unwrap();
        let l = bce_single_positive(&mut tape, p, &[0, 1, 0]).unwrap();
        assert!(tape.value_scalar(l).abs() < 1e-6, "perfect prediction -> ~0");

        let mut tape = Tape::new();
        let p = tape.constant(vec![0.5, 0.9], &[2]).unwrap();
        let l = bce_single_positive(&mut tape, p, &[1, 0]).unwrap();
        assert!((tape.value_scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn single_positive_ignores_unobserved_coordinates() {
        let base = vec![0.5, 0.7, 0.1];
        let z = [0u8, 1, 0];
        let eval = |p: Vec<f64>| {
            let mut tape = Tape::new();
            let t = tape.constant(p, &[3]).unwrap();
            let l = bce_single_positive(&mut tape, t, &z).unwrap();
            tape.value_scalar(l)
        };
        let a = eval(base.clone());
        let mut perturbed = base;
        perturbed[0] = 0.99;
        perturbed[2] = 0.01;
        assert_eq!(a, eval(perturbed));
    }

    #[test]
    fn non_one_hot_is_contract_error() {
        let mut tape = Tape::new();
        let p = tape.constant(vec![0.5, 0.5], &[2]).unwrap();
        assert!(matches!(
            bce_single_positive(&mut tape, p, &[1, 1]),
            Err(ScobError::Contract(_))
        ));
    }

    #[test]
    fn pseudo_bce_half_everywhere_is_ln2() {
        let mut tape = Tape::new();
        let p = tape.constant(vec![0.5; 4], &[4]).unwrap();
        let y = tape.constant(vec![0.5; 4], &[4]).unwrap();
        let l = bce_pseudo(&mut tape, p, y).unwrap();
        assert!((tape.value_scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn pseudo_bce_matched_hard_labels_nearly_zero() {
        let mut tape = Tape::new();
        let vals = vec![1e-9, 1.0 - 1e-9, 1e-9];
        let p = tape.constant(vals.clone(), &[3]).unwrap();
        let y = tape.constant(vals, &[3]).unwrap();
        let l = bce_pseudo(&mut tape, p, y).unwrap();
        assert!(tape.value_scalar(l) < 1e-5);
    }

    #[test]
    fn pseudo_bce_sends_no_gradient_to_targets() {
        let mut tape = Tape::new();
        let p = tape.leaf(vec![0.3, 0.8], &[2], true).unwrap();
        let y = tape.leaf(vec![0.6, 0.4], &[2], true).unwrap();
        let l = bce_pseudo(&mut tape, p, y).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(p).is_some());
        assert!(tape.grad(y).is_none(), "stop-gradient must block the target");
    }

    #[test]
    fn epr_zero_gap_and_hand_value() {
        let prior = prior2();
        // khat == k -> 0
        let mut tape = Tape::new();
        let rows = [
            tape.constant(vec![0.75, 0.75, 0.0, 0.0], &[4]).unwrap(),
            tape.constant(vec![0.0, 0.0, 0.75, 0.75], &[4]).unwrap(),
        ];
        let l = expected_positive_regularizer(&mut tape, &rows, &prior).unwrap();
        assert_eq!(tape.value_scalar(l), 0.0);

        // b=2, L=4, all 0.5 -> khat=2, ((2-1.5)/4)^2 = 0.015625 exactly
        let mut tape = Tape::new();
        let rows = [
            tape.constant(vec![0.5; 4], &[4]).unwrap(),
            tape.constant(vec![0.5; 4], &[4]).unwrap(),
        ];
        let l = expected_positive_regularizer(&mut tape, &rows, &prior).unwrap();
        assert_eq!(tape.value_scalar(l), 0.015625);
    }

    #[test]
    fn epr_invariant_under_joint_permutation() {
        let prior = prior2();
        let rows_a = [vec![0.1, 0.9, 0.3, 0.6], vec![0.8, 0.2, 0.5, 0.4]];
        let eval = |rows: &[Vec<f64>]| {
            let mut tape = Tape::new();
            let ts: Vec<_> = rows
                .iter()
                .map(|r| tape.constant(r.clone(), &[4]).unwrap())
                .collect();
            let l = expected_positive_regularizer(&mut tape, &ts, &prior).unwrap();
            tape.value_scalar(l)
        };
        // swap batch rows and permute label columns jointly
        let perm = [2usize, 0, 3, 1];
        let rows_b: Vec<Vec<f64>> = [1, 0]
            .iter()
            .map(|&r| perm.iter().map(|&c| rows_a[r][c]).collect())
            .collect();
        assert_eq!(eval(&rows_a), eval(&rows_b));
    }

    #[test]
    fn loss_sp_decomposes_into_its_terms() {
        let prior = prior2();
        let a_vals = [vec![0.3, 0.7, 0.2, 0.9], vec![0.6, 0.1, 0.8, 0.4]];
        let b_vals = [vec![0.5, 0.6, 0.4, 0.8], vec![0.7, 0.2, 0.6, 0.3]];
        let z: [&[u8]; 2] = [&[0, 1, 0, 0], &[0, 0, 1, 0]];

        let mut tape = Tape::new();
        let a: Vec<_> = a_vals.iter().map(|v| tape.constant(v.clone(), &[4]).unwrap()).collect();
        let b: Vec<_> = b_vals.iter().map(|v| tape.constant(v.clone(), &[4]).unwrap()).collect();
        let combined = loss_sp(&mut tape, &a, &b, &z, &prior).unwrap();
        let combined = tape.value_scalar(combined);

        // independent term evaluation
        let mut sum = 0.0;
        for n in 0..2 {
            let mut tape = Tape::new();
            let at = tape.constant(a_vals[n].clone(), &[4]).unwrap();
            let bt = tape.constant(b_vals[n].clone(), &[4]).unwrap();
            let pseudo = bce_pseudo(&mut tape, at, bt).unwrap();
            let single = bce_single_positive(&mut tape, at, z[n]).unwrap();
            sum += tape.value_scalar(pseudo) + tape.value_scalar(single);
        }
        let mut tape = Tape::new();
        let a: Vec<_> = a_vals.iter().map(|v| tape.constant(v.clone(), &[4]).unwrap()).collect();
        let epr = expected_positive_regularizer(&mut tape, &a, &prior).unwrap();
        let expect = sum / 2.0 + tape.value_scalar(epr);
        assert!((combined - expect).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_with_matching_prior_vanish() {
        let prior = DistributionPrior::new(1.0, 2).unwrap();
        let mut tape = Tape::new();
        let rows = [
            tape.constant(vec![1.0, 0.0], &[2]).unwrap(),
            tape.constant(vec![0.0, 1.0], &[2]).unwrap(),
        ];
        let z: [&[u8]; 2] = [&[1, 0], &[0, 1]];
        let l = loss_sp(&mut tape, &rows, &rows, &z, &prior).unwrap();
        assert!(tape.value_scalar(l) < 1e-5);
    }

    #[test]
    fn loss_class_is_the_symmetric_average() {
        let prior = prior2();
        let p_vals = [vec![0.3, 0.7, 0.2, 0.9]];
        let y_vals = [vec![0.5, 0.6, 0.4, 0.8]];
        let z: [&[u8]; 1] = [&[0, 1, 0, 0]];
        let mut tape = Tape::new();
        let p: Vec<_> = p_vals.iter().map(|v| tape.constant(v.clone(), &[4]).unwrap()).collect();
        let y: Vec<_> = y_vals.iter().map(|v| tape.constant(v.clone(), &[4]).unwrap()).collect();
        let combined = loss_class(&mut tape, &p, &y, &z, &prior).unwrap();
        let t1 = loss_sp(&mut tape, &p, &y, &z, &prior).unwrap();
        let t2 = loss_sp(&mut tape, &y, &p, &z, &prior).unwrap();
        let expect = 0.5 * (tape.value_scalar(t1) + tape.value_scalar(t2));
        assert!((tape.value_scalar(combined) - expect).abs() < 1e-12);
    }

    #[test]
    fn estimator_gradient_flows_through_second_term() {
        let prior = DistributionPrior::new(1.5, 2).unwrap();
        let mut tape = Tape::new();
        // network predictions constant, estimator trainable and wrong
        let p = vec![tape.constant(vec![0.9, 0.1], &[2]).unwrap()];
        let y_logits = tape.leaf(vec![-2.0, 2.0], &[2], true).unwrap();
        let y = vec![tape.sigmoid(y_logits)];
        let z: [&[u8]; 1] = [&[1, 0]];
        let l = loss_class(&mut tape, &p, &y, &z, &prior).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(y_logits).expect("estimator gradient present");
        assert!(g.iter().any(|&v| v.abs() > 1e-6));
    }

    #[test]
    fn estimator_init_ranges() {
        let observed = vec![vec![0u8, 1, 0], vec![1, 0, 0]];
        let ids = vec![0, 1];
        let mut rng = rng_stream(3, 0);
        let est = EstimatorMatrix::init(&observed, ids.clone(), 0.3, &mut rng).unwrap();
        for n in 0..2 {
            let probs = est.probs_row(n);
            for (c, &p) in probs.iter().enumerate() {
                if observed[n][c] == 1 {
                    assert!(p >= 0.99, "observed entry must start near 1, got {p}");
                } else {
                    assert!((0.2..=0.8).contains(&p), "unknown entry {p} outside [0.2, 0.8]");
                }
            }
        }
        // xi = 0: unknown entries exactly 0.5
        let mut rng = rng_stream(3, 1);
        let est = EstimatorMatrix::init(&observed, ids, 0.0, &mut rng).unwrap();
        assert_eq!(est.probs_row(0)[0], 0.5);
        assert_eq!(est.probs_row(0)[2], 0.5);
    }

    #[test]
    fn estimator_init_scan_spans_most_of_the_range() {
        let observed: Vec<Vec<u8>> = (0..500).map(|_| vec![0u8, 1]).collect();
        let ids: Vec<u32> = (0..500).collect();
        let mut rng = rng_stream(7, 0);
        let est = EstimatorMatrix::init(&observed, ids, 0.3, &mut rng).unwrap();
        let unknowns: Vec<f64> = (0..500).map(|n| est.probs_row(n)[0]).collect();
        let mn = unknowns.iter().cloned().fold(f64::INFINITY, f64::min);
        let mx = unknowns.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(mn >= 0.2 && mx <= 0.8);
        assert!(mn < 0.25 && mx > 0.75, "empirical span [{mn}, {mx}] too narrow");
    }

    #[test]
    fn bad_xi_is_config_error() {
        let mut rng = rng_stream(1, 0);
        assert!(matches!(
            EstimatorMatrix::init(&[vec![1u8]], vec![0], 0.5, &mut rng),
            Err(ScobError::Config(_))
        ));
    }

    #[test]
    fn adam_row_update_touches_only_that_row() {
        let observed = vec![vec![0u8, 1], vec![1, 0], vec![0, 1]];
        let mut rng = rng_stream(5, 0);
        let mut est = EstimatorMatrix::init(&observed, vec![0, 1, 2], 0.3, &mut rng).unwrap();
        let before = est.logits.clone();
        est.adam_step_row(1, &[0.5, -0.5], 0.01, &AdamConfig::default()).unwrap();
        assert_eq!(&est.logits[0..2], &before[0..2]);
        assert_eq!(&est.logits[4..6], &before[4..6]);
        assert_ne!(&est.logits[2..4], &before[2..4]);
    }
}
