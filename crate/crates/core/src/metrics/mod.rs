//! Scale-invariant SNR and permutation-aligned scoring.
//!
//! All metric math runs in `f64`. The SI-SNR denominator carries a relative
//! floor `SI_SNR_EPS · ‖s_target‖²`, so a perfect estimate scores
//! [`SI_SNR_CAP_DB`] instead of `+inf`; the lower end is clamped at
//! `-SI_SNR_CAP_DB` (zero projection onto the reference).

pub mod assignment;

use crate::error::{Error, Result};

pub const SI_SNR_EPS: f64 = 1e-8;
/// `10·log10(1/SI_SNR_EPS)`.
pub const SI_SNR_CAP_DB: f64 = 80.0;

/// Permutations are searched exhaustively up to this many sources.
pub const EXHAUSTIVE_MAX_SOURCES: usize = 6;

const DB_PER_NEPER: f64 = 10.0 / std::f64::consts::LN_10;

pub fn mean_normalize(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    Ok(x.iter().map(|v| v - mean).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_pair(est: &[f64], reference: &[f64]) -> Result<()> {
    if est.is_empty() || reference.is_empty() {
        return Err(Error::EmptyInput);
    }
    if est.len() != reference.len() {
        return Err(Error::LengthMismatch(est.len(), reference.len()));
    }
    Ok(())
}

struct Projection {
    est: Vec<f64>,
    target: Vec<f64>,
    target_energy: f64,
    denom: f64,
    db: f64,
    clamped: bool,
}

fn project(est: &[f64], reference: &[f64]) -> Result<Projection> {
    check_pair(est, reference)?;
    let s = mean_normalize(reference)?;
    let e = mean_normalize(est)?;
    let ref_energy = dot(&s, &s);
    let peak = reference.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if ref_energy == 0.0 || ref_energy <= s.len() as f64 * (peak * 1e-12).powi(2) {
        return Err(Error::ZeroEnergyReference);
    }
    let alpha = dot(&e, &s) / ref_energy;
    let target: Vec<f64> = s.iter().map(|v| alpha * v).collect();
    let target_energy = dot(&target, &target);
    let noise_energy: f64 = e.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum();
    let denom = noise_energy + SI_SNR_EPS * target_energy;
    let (db, clamped) = if target_energy <= 0.0 || denom <= 0.0 {
        (-SI_SNR_CAP_DB, true)
    } else {
        let db = DB_PER_NEPER * (target_energy / denom).ln();
        if db < -SI_SNR_CAP_DB {
            (-SI_SNR_CAP_DB, true)
        } else {
            (db, false)
        }
    };
    Ok(Projection {
        est: e,
        target,
        target_energy,
        denom,
        db,
        clamped,
    })
}

/// SI-SNR in dB of `est` against `reference`, both mean-normalized first.
pub fn si_snr(est: &[f64], reference: &[f64]) -> Result<f64> {
    Ok(project(est, reference)?.db)
}

/// SI-SNR together with its gradient with respect to `est`.
///
/// The gradient is zero where the value is clamped at the lower cap.
pub fn si_snr_with_grad(est: &[f64], reference: &[f64]) -> Result<(f64, Vec<f64>)> {
    let p = project(est, reference)?;
    if p.clamped {
        return Ok((p.db, vec![0.0; est.len()]));
    }
    // d/dŝ of 10·log10(P / (E + εP)) with P = ‖t‖², E + εP = ‖ŝ - t‖² + ε‖t‖².
    let a = 2.0 / p.target_energy;
    let b = 2.0 / p.denom;
    let mut g: Vec<f64> = p
        .est
        .iter()
        .zip(&p.target)
        .map(|(&e, &t)| {
            let noise = e - t;
            DB_PER_NEPER * (a * t - b * (noise + SI_SNR_EPS * t))
        })
        .collect();
    let mean = g.iter().sum::<f64>() / g.len() as f64;
    g.iter_mut().for_each(|v| *v -= mean);
    Ok((p.db, g))
}

pub fn si_snr_improvement(est: &[f64], reference: &[f64], mix: &[f64]) -> Result<f64> {
    Ok(si_snr(est, reference)? - si_snr(mix, reference)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentReport {
    /// `permutation[i]` is the reference index matched to estimate `i`.
    pub permutation: Vec<usize>,
    pub per_source_si_snr_db: Vec<f64>,
    pub mean_si_snr_db: f64,
    /// Present when a mixture was supplied.
    pub mean_si_snr_improvement_db: Option<f64>,
}

/// `matrix[i][j] = si_snr(ests[i], refs[j])`.
pub fn si_snr_matrix(ests: &[Vec<f64>], refs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    ests.iter()
        .map(|e| refs.iter().map(|r| si_snr(e, r)).collect())
        .collect()
}

/// Exhaustive search over all permutations of a square score matrix.
/// Ties keep the lexicographically first permutation.
pub fn exhaustive_best_permutation(scores: &[Vec<f64>]) -> Vec<usize> {
    let n = scores.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = perm.clone();
    let mut best_total = f64::NEG_INFINITY;
    loop {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| scores[i][j]).sum();
        if total > best_total {
            best_total = total;
            best.copy_from_slice(&perm);
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    best
}

/// Hungarian-method solution on a square score matrix.
pub fn assignment_best_permutation(scores: &[Vec<f64>]) -> Vec<usize> {
    assignment::maximize(scores).into_iter().map(|(_, c)| c).collect()
}

pub(crate) fn next_permutation(v: &mut [usize]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let mut i = v.len() - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = v.len() - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

/// Best-permutation alignment of `ests` to `refs` by mean SI-SNR.
pub fn best_permutation_alignment(ests: &[Vec<f64>], refs: &[Vec<f64>]) -> Result<AlignmentReport> {
    align(ests, refs, None)
}

/// As [`best_permutation_alignment`], also reporting improvement over `mix`.
pub fn best_permutation_alignment_with_mixture(
    ests: &[Vec<f64>],
    refs: &[Vec<f64>],
    mix: &[f64],
) -> Result<AlignmentReport> {
    align(ests, refs, Some(mix))
}

fn align(ests: &[Vec<f64>], refs: &[Vec<f64>], mix: Option<&[f64]>) -> Result<AlignmentReport> {
    if ests.is_empty() || ests.len() != refs.len() {
        return Err(Error::SizeMismatch(format!(
            "{} estimates vs {} references",
            ests.len(),
            refs.len()
        )));
    }
    let len = refs[0].len();
    if let Some(bad) = ests.iter().chain(refs).find(|s| s.len() != len) {
        return Err(Error::LengthMismatch(bad.len(), len));
    }
    let scores = si_snr_matrix(ests, refs)?;
    let permutation = if ests.len() <= EXHAUSTIVE_MAX_SOURCES {
        exhaustive_best_permutation(&scores)
    } else {
        assignment_best_permutation(&scores)
    };
    let per_source: Vec<f64> = permutation
        .iter()
        .enumerate()
        .map(|(i, &j)| scores[i][j])
        .collect();
    let mean = per_source.iter().sum::<f64>() / per_source.len() as f64;
    let improvement = match mix {
        Some(mix) => {
            let mut total = 0.0;
            for (i, &j) in permutation.iter().enumerate() {
                total += per_source[i] - si_snr(mix, &refs[j])?;
            }
            Some(total / per_source.len() as f64)
        }
        None => None,
    };
    Ok(AlignmentReport {
        permutation,
        per_source_si_snr_db: per_source,
        mean_si_snr_db: mean,
        mean_si_snr_improvement_db: improvement,
    })
}
