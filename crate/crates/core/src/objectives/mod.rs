//! Pretraining losses for the connector: cross-modal InfoNCE, modality
//! matching, masked-segment reconstruction, and their weighted total.

mod pretrain;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dqt::DqtError;
use crate::numeric::{NumericError, Real, Tape, Tensor, Var};
use crate::patching::PatchError;
use crate::smiles::SmilesError;

pub use pretrain::{
    lr_at, majority_targets, pretrain_dqt, prepare_sample, DqtTrainConfig, PretrainHeads, PretrainReport,
    PretrainSample, StepLosses,
};

/// Cosine denominators are floored at this value.
pub const COSINE_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("row {row} of modality {modality} has zero norm")]
    ZeroVector { row: usize, modality: usize },
    #[error("no dynamic token was masked")]
    NothingMasked,
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("invalid objective settings: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Dqt(#[from] DqtError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Smiles(#[from] SmilesError),
}

/// Loss weights, contrastive temperature and masking rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub tau: f64,
    pub mask_fraction: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            tau: 0.10,
            mask_fraction: 0.15,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let lambdas = [self.lambda1, self.lambda2, self.lambda3];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(ObjectiveError::InvalidConfig(format!("lambdas {lambdas:?} must be finite and ≥ 0")));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(ObjectiveError::InvalidConfig(format!("tau {} must be positive", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.mask_fraction) {
            return Err(ObjectiveError::InvalidConfig(format!(
                "mask_fraction {} not in [0, 1]",
                self.mask_fraction
            )));
        }
        Ok(())
    }
}

fn check_nonzero<F: Real>(t: &Tensor<F>, modality: usize) -> Result<(), ObjectiveError> {
    for row in 0..t.rows() {
        let n = t.row(row).iter().map(|&v| v * v).sum::<F>().sqrt().as_f64();
        if n < COSINE_FLOOR {
            return Err(ObjectiveError::ZeroVector { row, modality });
        }
    }
    Ok(())
}

/// Symmetric InfoNCE between paired rows of `a` (modality 0) and `b`
/// (modality 1): the mean over both directions of the cross-entropy of
/// cosine/τ similarities against the matching item.
pub fn info_nce_on_tape<F: Real>(tape: &mut Tape<F>, a: Var, b: Var, tau: f64) -> Result<Var, ObjectiveError> {
    let (av, bv) = (tape.value(a), tape.value(b));
    if av.rows() != bv.rows() || av.rows() == 0 || av.cols() != bv.cols() {
        return Err(ObjectiveError::InvalidBatch(format!(
            "paired embeddings {:?} and {:?}",
            av.shape(),
            bv.shape()
        )));
    }
    check_nonzero(av, 0)?;
    check_nonzero(bv, 1)?;
    let n = av.rows();
    let an = tape.l2_normalize_rows(a, COSINE_FLOOR)?;
    let bn = tape.l2_normalize_rows(b, COSINE_FLOOR)?;
    let targets: Vec<usize> = (0..n).collect();
    let mask = vec![true; n];
    let s_ab = tape.matmul_t(an, bn)?;
    let s_ab = tape.scale(s_ab, 1.0 / tau)?;
    let s_ba = tape.matmul_t(bn, an)?;
    let s_ba = tape.scale(s_ba, 1.0 / tau)?;
    let l_ab = tape.cross_entropy(s_ab, &targets, &mask)?;
    let l_ba = tape.cross_entropy(s_ba, &targets, &mask)?;
    Ok(tape.weighted_sum(&[(l_ab, 0.5), (l_ba, 0.5)])?)
}

/// Mean cross-entropy of `means · W` against modality labels.
pub fn modality_match_on_tape<F: Real>(
    tape: &mut Tape<F>,
    means: Var,
    w: Var,
    labels: &[usize],
) -> Result<Var, ObjectiveError> {
    let logits = tape.matmul(means, w)?;
    if tape.value(logits).rows() != labels.len() {
        return Err(ObjectiveError::InvalidBatch(format!(
            "{} labels for {} rows",
            labels.len(),
            tape.value(logits).rows()
        )));
    }
    Ok(tape.cross_entropy(logits, labels, &vec![true; labels.len()])?)
}

/// Mean cross-entropy of decoder logits over masked segments.
pub fn masked_recon_on_tape<F: Real>(tape: &mut Tape<F>, logits: Var, targets: &[usize]) -> Result<Var, ObjectiveError> {
    if targets.is_empty() {
        return Err(ObjectiveError::NothingMasked);
    }
    Ok(tape.cross_entropy(logits, targets, &vec![true; targets.len()])?)
}

pub fn info_nce<F: Real>(a: &Tensor<F>, b: &Tensor<F>, tau: f64) -> Result<f64, ObjectiveError> {
    let mut tape = Tape::new();
    let (av, bv) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
    let l = info_nce_on_tape(&mut tape, av, bv, tau)?;
    Ok(tape.value(l).item().as_f64())
}

pub fn modality_match_loss<F: Real>(means: &Tensor<F>, w: &Tensor<F>, labels: &[usize]) -> Result<f64, ObjectiveError> {
    let mut tape = Tape::new();
    let (m, wv) = (tape.leaf(means.clone()), tape.leaf(w.clone()));
    let l = modality_match_on_tape(&mut tape, m, wv, labels)?;
    Ok(tape.value(l).item().as_f64())
}

pub fn masked_recon_loss<F: Real>(logits: &Tensor<F>, targets: &[usize]) -> Result<f64, ObjectiveError> {
    if targets.is_empty() {
        return Err(ObjectiveError::NothingMasked);
    }
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone());
    let out = masked_recon_on_tape(&mut tape, l, targets)?;
    Ok(tape.value(out).item().as_f64())
}

/// `λ1·l1 + λ2·l2 + λ3·l3`.
pub fn total_loss(l1: f64, l2: f64, l3: f64, c: &ObjectiveConfig) -> f64 {
    c.lambda1 * l1 + c.lambda2 * l2 + c.lambda3 * l3
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{grad_check_with, GradCheckOptions, Stencil};
    use std::f64::consts::LN_2;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn single_item_is_zero() {
        let a = t(1, 3, &[0.3, -1.0, 2.0]);
        let b = t(1, 3, &[5.0, 1.0, 0.0]);
        assert_eq!(info_nce(&a, &b, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn orthogonal_pairs() {
        let a = t(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let got = info_nce(&a, &a, 1.0).unwrap();
        let oracle = (1.0 + (-1.0f64).exp()).ln();
        assert!((got - oracle).abs() < 1e-12, "{got}");
        assert!((oracle - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn duplicate_items_at_high_temperature() {
        let a = t(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let got = info_nce(&a, &a, 1e6).unwrap();
        assert!((got - LN_2).abs() < 1e-6);
    }

    #[test]
    fn zero_vector_and_shape_errors() {
        let a = t(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let b = t(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(info_nce(&a, &b, 0.1), Err(ObjectiveError::ZeroVector { row: 1, modality: 0 })));
        assert!(matches!(info_nce(&b, &a, 0.1), Err(ObjectiveError::ZeroVector { row: 1, modality: 1 })));
        assert!(matches!(info_nce(&b, &t(1, 2, &[1.0, 0.0]), 0.1), Err(ObjectiveError::InvalidBatch(_))));
    }

    #[test]
    fn info_nce_is_nonnegative_and_permutation_invariant() {
        let a = Tensor::from_fn(4, 3, |r, c| ((r * 3 + c) as f64 * 0.9).sin() + 0.1);
        let b = Tensor::from_fn(4, 3, |r, c| ((r * 3 + c) as f64 * 1.7).cos());
        let base = info_nce(&a, &b, 0.1).unwrap();
        assert!(base >= 0.0);
        let perm = [2usize, 0, 3, 1];
        let ap = Tensor::from_fn(4, 3, |r, c| a.get(perm[r], c));
        let bp = Tensor::from_fn(4, 3, |r, c| b.get(perm[r], c));
        assert!((info_nce(&ap, &bp, 0.1).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn modality_match_cases() {
        let means = t(3, 2, &[0.5, -1.0, 2.0, 0.1, 0.0, 3.0]);
        let zero = t(2, 2, &[0.0; 4]);
        assert!((modality_match_loss(&means, &zero, &[0, 1, 1]).unwrap() - LN_2).abs() < 1e-12);
        // hand case: one item, logits = [0.5·1 + (−1)·0, 0.5·0 + (−1)·2] = [0.5, −2]
        let one = t(1, 2, &[0.5, -1.0]);
        let w = t(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let hand = -(0.5f64 - (0.5f64.exp() + (-2.0f64).exp()).ln());
        assert!((modality_match_loss(&one, &w, &[0]).unwrap() - hand).abs() < 1e-12);
        let perfect = t(2, 2, &[100.0, -100.0, -100.0, 100.0]);
        let eye = t(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert!(modality_match_loss(&perfect, &eye, &[0, 1]).unwrap() < 1e-12);
    }

    #[test]
    fn recon_cases() {
        let uniform = Tensor::<f64>::zeros(&[3, 39]);
        assert!((masked_recon_loss(&uniform, &[0, 5, 38]).unwrap() - 39f64.ln()).abs() < 1e-12);
        // hand case: rows [1, 0, 0] → target 0 and [0, 2, 0] → target 2
        let logits = t(2, 3, &[1.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
        let lse1 = (1f64.exp() + 2.0).ln();
        let lse2 = (2.0 + 2f64.exp()).ln();
        let hand = ((lse1 - 1.0) + lse2) / 2.0;
        assert!((masked_recon_loss(&logits, &[0, 2]).unwrap() - hand).abs() < 1e-12);
        let perfect = t(1, 3, &[0.0, 80.0, 0.0]);
        assert!(masked_recon_loss(&perfect, &[1]).unwrap() < 1e-12);
        assert!(matches!(masked_recon_loss(&logits, &[]), Err(ObjectiveError::NothingMasked)));
    }

    #[test]
    fn total_is_weighted_sum() {
        let c = ObjectiveConfig { lambda1: 1.0, lambda2: 0.0, lambda3: 0.0, ..Default::default() };
        assert_eq!(total_loss(0.7, 3.0, 9.0, &c), 0.7);
        let z = ObjectiveConfig { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, ..Default::default() };
        assert_eq!(total_loss(0.7, 3.0, 9.0, &z), 0.0);
        let h = ObjectiveConfig { lambda1: 0.5, lambda2: 0.25, lambda3: 0.25, ..Default::default() };
        assert_eq!(total_loss(2.0, 4.0, 8.0, &h), 4.0);
    }

    #[test]
    fn config_validation() {
        assert!(ObjectiveConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(ObjectiveConfig { lambda2: -1.0, ..Default::default() }.validate().is_err());
        assert!(ObjectiveConfig { mask_fraction: 1.5, ..Default::default() }.validate().is_err());
        assert!(ObjectiveConfig::default().validate().is_ok());
    }

    fn embedder_check(which: usize) -> f64 {
        let x = Tensor::from_fn(3, 4, |r, c| ((r * 4 + c) as f64 * 0.83).sin());
        let y = Tensor::from_fn(3, 4, |r, c| ((r * 4 + c) as f64 * 0.29).cos());
        let w = Tensor::from_fn(4, 5, |r, c| ((r * 5 + c) as f64 * 1.1).sin() * 0.7);
        let cls = Tensor::from_fn(5, 2, |r, c| (r as f64 - c as f64) * 0.2);
        let opts = GradCheckOptions { h: 1e-4, stencil: Stencil::Central4, ..Default::default() };
        grad_check_with(&[w, cls], &opts, |tape: &mut Tape<f64>, v: &[Var]| {
            let xv = tape.leaf(x.clone());
            let yv = tape.leaf(y.clone());
            let a = tape.matmul(xv, v[0])?;
            let b = tape.matmul(yv, v[0])?;
            match which {
                0 => info_nce_on_tape(tape, a, b, 0.1),
                1 => modality_match_on_tape(tape, a, v[1], &[0, 1, 1]),
                _ => masked_recon_on_tape(tape, b, &[4, 0, 2]),
            }
        })
        .unwrap()
        .max_rel_error
    }

    #[test]
    fn gradients_through_each_loss() {
        for which in 0..3 {
            let err = embedder_check(which);
            assert!(err <= 1e-5, "loss {which}: {err}");
        }
    }
}
