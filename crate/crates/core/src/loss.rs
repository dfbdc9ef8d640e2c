//! Training objectives. Losses are negated SI-SNR in dB, so lower is better.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::metrics::si_snr_with_grad;

/// Negated SI-SNR and its gradient with respect to `est`.
pub fn neg_si_snr(est: &[f64], reference: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (v, mut g) = si_snr_with_grad(est, reference)?;
    g.iter_mut().for_each(|x| *x = -*x);
    Ok((-v, g))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrPitLoss {
    pub value: f64,
    /// Index into `refs` of the speaker assigned to the cue channel.
    pub argmin: usize,
    pub grad_cue: Vec<f64>,
    pub grad_residual: Vec<f64>,
    /// SI-SNR of the cue against the chosen speaker.
    pub cue_si_snr_db: f64,
    /// SI-SNR of the residual against the sum of the other speakers.
    pub residual_si_snr_db: f64,
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or_else(|| a.len().cmp(&b.len()))
}

/// One-and-rest permutation-invariant loss:
/// `min_i  l(cue, refs[i]) + l(residual, Σ_{n≠i} refs[n]) / (N − 1)`.
///
/// Candidates are evaluated in a canonical (sorted) reference order, so the
/// value is bit-identical under any permutation of `refs`.
pub fn orpit_loss(cue: &[f64], residual: &[f64], refs: &[Vec<f64>]) -> Result<OrPitLoss> {
    let n = refs.len();
    if n < 2 {
        return Err(Error::SizeMismatch(format!(
            "one-and-rest loss needs at least 2 references, got {n}"
        )));
    }
    let len = cue.len();
    if residual.len() != len {
        return Err(Error::LengthMismatch(residual.len(), len));
    }
    if let Some(r) = refs.iter().find(|r| r.len() != len) {
        return Err(Error::LengthMismatch(r.len(), len));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| lexicographic(&refs[a], &refs[b]));

    let weight = 1.0 / (n - 1) as f64;
    let mut best: Option<OrPitLoss> = None;
    for &i in &order {
        let mut rest = vec![0.0; len];
        for &k in order.iter().filter(|&&k| k != i) {
            rest.iter_mut().zip(&refs[k]).for_each(|(a, b)| *a += b);
        }
        let (cue_loss, grad_cue) = neg_si_snr(cue, &refs[i])?;
        let (res_loss, mut grad_residual) = neg_si_snr(residual, &rest)?;
        let value = cue_loss + weight * res_loss;
        if best.as_ref().is_none_or(|b| value < b.value) {
            grad_residual.iter_mut().for_each(|g| *g *= weight);
            best = Some(OrPitLoss {
                value,
                argmin: i,
                grad_cue,
                grad_residual,
                cue_si_snr_db: -cue_loss,
                residual_si_snr_db: -res_loss,
            });
        }
    }
    Ok(best.expect("at least two candidates"))
}
