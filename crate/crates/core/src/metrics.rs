//! Separation quality in decibels: SI-SDR and an instantaneous projection
//! variant of SDR/SIR/SAR, with permutation alignment of estimates.

use std::fmt;

use itertools::Itertools;

use crate::error::{Error, Result};
use crate::linalg::dot;

/// Error energy at or below this fraction of the signal energy is treated as
/// exactly zero and reported as [`Db::INFINITE`].
pub const EXACT_ENERGY_RATIO: f64 = 1e-20;

/// Largest source count accepted by the exhaustive permutation search.
pub const MAX_ALIGN_SOURCES: usize = 8;

/// A level in dB. Perfect results are the [`Db::INFINITE`] sentinel.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Db(pub f64);

impl Db {
    pub const INFINITE: Db = Db(f64::INFINITY);
    pub const NEG_INFINITE: Db = Db(f64::NEG_INFINITY);

    /// `10·log10(signal/error)` with explicit sentinels for degenerate energies.
    pub fn from_energies(signal: f64, error: f64) -> Db {
        if signal <= 0.0 {
            Db::NEG_INFINITE
        } else if error <= signal * EXACT_ENERGY_RATIO {
            Db::INFINITE
        } else {
            Db(10.0 * (signal / error).log10())
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_infinite(self) -> bool {
        self.0.is_infinite()
    }

    /// `self − baseline`; equal values (including two sentinels) give 0.
    pub fn improvement_over(self, baseline: Db) -> Db {
        if self == baseline {
            Db(0.0)
        } else {
            Db(self.0 - baseline.0)
        }
    }

    /// Value clamped to ±1000 dB so sentinels can be ranked and summed.
    fn rank_value(self) -> f64 {
        self.0.clamp(-1000.0, 1000.0)
    }
}

impl fmt::Display for Db {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 == f64::INFINITY {
            f.write_str("inf")
        } else if self.0 == f64::NEG_INFINITY {
            f.write_str("-inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

fn check_reference(estimate: &[f64], reference: &[f64]) -> Result<()> {
    if estimate.len() != reference.len() {
        return Err(Error::shape("metric", reference.len(), estimate.len()));
    }
    if reference.iter().all(|&x| x == 0.0) {
        return Err(Error::invalid("reference signal is all zeros"));
    }
    Ok(())
}

/// Scale-invariant SDR: `10·log10(‖αs‖² / ‖αs − ŝ‖²)` with `α = ⟨ŝ,s⟩/‖s‖²`.
pub fn si_sdr(estimate: &[f64], reference: &[f64]) -> Result<Db> {
    check_reference(estimate, reference)?;
    let alpha = dot(estimate, reference) / dot(reference, reference);
    let mut target = 0.0;
    let mut error = 0.0;
    for (&e, &r) in estimate.iter().zip(reference) {
        let t = alpha * r;
        target += t * t;
        error += (t - e) * (t - e);
    }
    Ok(Db::from_energies(target, error))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BssMetrics {
    pub sdr: Db,
    pub sir: Db,
    pub sar: Db,
}

/// Solves the symmetric positive definite system `g·x = b` by Gaussian
/// elimination with partial pivoting, failing on (near) singular `g`.
fn solve_gram(mut g: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    let scale = (0..n).map(|i| g[i][i]).fold(0.0, f64::max);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&a, &b| g[a][col].abs().total_cmp(&g[b][col].abs()))
            .expect("non-empty range");
        if g[pivot][col].abs() <= 1e-10 * scale {
            return Err(Error::Degenerate("reference signals are linearly dependent".into()));
        }
        g.swap(col, pivot);
        b.swap(col, pivot);
        let (upper, lower) = g.split_at_mut(col + 1);
        let pivot_row = &upper[col];
        for (offset, row) in lower.iter_mut().enumerate() {
            let factor = row[col] / pivot_row[col];
            for (x, p) in row[col..].iter_mut().zip(&pivot_row[col..]) {
                *x -= factor * p;
            }
            b[col + 1 + offset] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| g[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / g[row][row];
    }
    Ok(x)
}

/// SDR/SIR/SAR of `estimate` against `references[target]`.
///
/// The estimate is split into the projection on the target reference, the
/// remaining projection on the span of all references (interference) and the
/// orthogonal residual (artifacts). The three parts are mutually orthogonal,
/// so energies are combined additively.
pub fn bss_metrics<R: AsRef<[f64]>>(estimate: &[f64], references: &[R], target: usize) -> Result<BssMetrics> {
    let refs: Vec<&[f64]> = references.iter().map(AsRef::as_ref).collect();
    let Some(&reference) = refs.get(target) else {
        return Err(Error::invalid(format!("target index {target} out of range")));
    };
    for r in &refs {
        check_reference(estimate, r)?;
    }
    let n = refs.len();
    let len = estimate.len();

    let gram: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| dot(refs[i], refs[j])).collect()).collect();
    let rhs: Vec<f64> = refs.iter().map(|r| dot(r, estimate)).collect();
    let coeffs = solve_gram(gram.clone(), rhs.clone())?;

    let target_coeff = rhs[target] / gram[target][target];
    let mut e_target = 0.0;
    let mut e_interf = 0.0;
    let mut e_artif = 0.0;
    for i in 0..len {
        let s_t = target_coeff * reference[i];
        let proj: f64 = coeffs.iter().zip(&refs).map(|(c, r)| c * r[i]).sum();
        e_target += s_t * s_t;
        e_interf += (proj - s_t) * (proj - s_t);
        e_artif += (estimate[i] - proj) * (estimate[i] - proj);
    }
    Ok(BssMetrics {
        sdr: Db::from_energies(e_target, e_interf + e_artif),
        sir: Db::from_energies(e_target, e_interf),
        sar: Db::from_energies(e_target + e_interf, e_artif),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceMetrics {
    pub si_sdr: Db,
    pub sdr: Db,
    pub sir: Db,
    pub sar: Db,
    pub si_sdr_i: Db,
    pub sdr_i: Db,
    pub sir_i: Db,
    pub sar_i: Db,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparationReport {
    /// `permutation[j]` is the estimate assigned to reference `j`.
    pub permutation: Vec<usize>,
    /// Metrics per reference source.
    pub sources: Vec<SourceMetrics>,
}

impl SeparationReport {
    pub fn mean_si_sdr_i(&self) -> f64 {
        self.sources.iter().map(|s| s.si_sdr_i.0).sum::<f64>() / self.sources.len() as f64
    }
}

/// Aligns estimates to references by the permutation with the highest mean
/// SI-SDR, then reports every metric and its improvement over using the
/// mixture itself as the estimate.
pub fn align_and_report<E: AsRef<[f64]>, R: AsRef<[f64]>>(
    estimates: &[E],
    references: &[R],
    mixture: &[f64],
) -> Result<SeparationReport> {
    let n = references.len();
    if estimates.len() != n {
        return Err(Error::shape("align_and_report", format!("{n} estimates"), estimates.len()));
    }
    if n == 0 || n > MAX_ALIGN_SOURCES {
        return Err(Error::invalid(format!(
            "alignment supports 1..={MAX_ALIGN_SOURCES} sources, got {n}"
        )));
    }
    let si: Vec<Vec<Db>> = references
        .iter()
        .map(|r| estimates.iter().map(|e| si_sdr(e.as_ref(), r.as_ref())).collect())
        .collect::<Result<_>>()?;

    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in (0..n).permutations(n) {
        let score: f64 = perm.iter().enumerate().map(|(j, &e)| si[j][e].rank_value()).sum();
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, perm));
        }
    }
    let (_, permutation) = best.expect("at least one permutation");

    let sources = (0..n)
        .map(|j| {
            let est = estimates[permutation[j]].as_ref();
            let reference = references[j].as_ref();
            let m = bss_metrics(est, references, j)?;
            let base = bss_metrics(mixture, references, j)?;
            let si_sdr_est = si[j][permutation[j]];
            let si_sdr_mix = si_sdr(mixture, reference)?;
            Ok(SourceMetrics {
                si_sdr: si_sdr_est,
                sdr: m.sdr,
                sir: m.sir,
                sar: m.sar,
                si_sdr_i: si_sdr_est.improvement_over(si_sdr_mix),
                sdr_i: m.sdr.improvement_over(base.sdr),
                sir_i: m.sir.improvement_over(base.sir),
                sar_i: m.sar.improvement_over(base.sar),
            })
        })
        .collect::<Result<_>>()?;
    Ok(SeparationReport { permutation, sources })
}
