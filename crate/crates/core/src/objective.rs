//! Affinity (Gram-matching) losses for deep clustering and the Chimera blend.
//!
//! The loss `‖VVᵀ − YYᵀ‖²_F` is evaluated through the expansion
//! `‖VᵀV‖²_F + ‖YᵀY‖²_F − 2‖VᵀY‖²_F`, which never forms a `TF x TF` matrix.
//! DC and M-DC differ only in the rows of `Y`.

use itertools::Itertools;

use crate::error::{Error, Result};
use crate::linalg::{norm, Matrix};
use crate::simplex::{simplex_vertices, TargetMode};

/// Allowed deviation of an embedding row norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-6;

/// Largest row count the pairwise oracle accepts by default.
pub const PAIRWISE_CAP: usize = 4096;

/// Row-normalized `rows x D` embeddings, one row per time-frequency bin.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    data: Matrix,
}

impl EmbeddingMatrix {
    /// Wraps `data`, rejecting rows whose norm is not 1 within [`NORM_TOLERANCE`].
    pub fn new(data: Matrix) -> Result<Self> {
        if data.rows() == 0 || data.cols() == 0 {
            return Err(Error::invalid("embedding matrix must be non-empty"));
        }
        for (i, row) in data.iter_rows().enumerate() {
            let n = norm(row);
            if !n.is_finite() || (n - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::invalid(format!(
                    "embedding row {i} has norm {n}, expected 1"
                )));
            }
        }
        Ok(Self { data })
    }

    /// Normalizes every row of `data` to unit length.
    pub fn normalize(mut data: Matrix) -> Result<Self> {
        for i in 0..data.rows() {
            let row = data.row_mut(i);
            let n = norm(row);
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Degenerate(format!("row {i} cannot be normalized")));
            }
            row.iter_mut().for_each(|x| *x /= n);
        }
        Self::new(data)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.data
    }

    pub fn into_matrix(self) -> Matrix {
        self.data
    }

    pub fn rows(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        Self {
            data: self.data.select_rows(indices),
        }
    }
}

/// `rows x N` target matrix built from per-bin dominant-speaker labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMatrix {
    data: Matrix,
    mode: TargetMode,
    n_speakers: usize,
}

impl TargetMatrix {
    pub fn from_labels(labels: &[usize], n_speakers: usize, mode: TargetMode) -> Result<Self> {
        if n_speakers == 0 {
            return Err(Error::invalid("target matrix needs at least one speaker"));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= n_speakers) {
            return Err(Error::invalid(format!(
                "label {l} at row {i} out of range for {n_speakers} speakers"
            )));
        }
        let mut data = Matrix::zeros(labels.len(), n_speakers);
        match mode {
            TargetMode::OneHot => {
                for (i, &l) in labels.iter().enumerate() {
                    data[(i, l)] = 1.0;
                }
            }
            TargetMode::Simplex => {
                let simplex = simplex_vertices(n_speakers)?;
                for (i, &l) in labels.iter().enumerate() {
                    data.row_mut(i).copy_from_slice(simplex.vertex(l));
                }
            }
        }
        Ok(Self {
            data,
            mode,
            n_speakers,
        })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.data
    }

    pub fn mode(&self) -> TargetMode {
        self.mode
    }

    pub fn n_speakers(&self) -> usize {
        self.n_speakers
    }

    pub fn rows(&self) -> usize {
        self.data.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// `dL/dV`, same shape as the embeddings.
    pub gradient: Option<Matrix>,
}

fn check_rows(v: &Matrix, y: &Matrix) -> Result<()> {
    if v.rows() != y.rows() {
        return Err(Error::shape("affinity loss", format!("{} target rows", v.rows()), y.rows()));
    }
    Ok(())
}

/// Expanded-form affinity loss on raw matrices. Rows of `v` are not required
/// to be normalized, which is what finite-difference checks need.
pub fn affinity_loss_raw(v: &Matrix, y: &Matrix) -> Result<f64> {
    check_rows(v, y)?;
    let vv = v.t_matmul(v)?;
    let yy = y.t_matmul(y)?;
    let vy = v.t_matmul(y)?;
    Ok(vv.frobenius_sq() + yy.frobenius_sq() - 2.0 * vy.frobenius_sq())
}

/// `4·V(VᵀV) − 4·Y(YᵀV)`, the gradient of [`affinity_loss_raw`] in `v`.
pub fn affinity_gradient_raw(v: &Matrix, y: &Matrix) -> Result<Matrix> {
    check_rows(v, y)?;
    let vv = v.t_matmul(v)?;
    let yv = y.t_matmul(v)?;
    let mut grad = v.matmul(&vv)?;
    grad.add_scaled(&y.matmul(&yv)?, -1.0)?;
    grad.scale(4.0);
    Ok(grad)
}

pub fn affinity_loss_expanded(v: &EmbeddingMatrix, y: &TargetMatrix) -> Result<LossValue> {
    let value = affinity_loss_raw(v.matrix(), y.matrix())?;
    Ok(LossValue {
        value: value.max(0.0),
        gradient: None,
    })
}

/// Loss value together with `dL/dV`. The gradient treats the rows of `V` as
/// free variables; the normalization Jacobian is applied by the network.
pub fn affinity_loss_gradient(v: &EmbeddingMatrix, y: &TargetMatrix) -> Result<LossValue> {
    let value = affinity_loss_raw(v.matrix(), y.matrix())?;
    let gradient = affinity_gradient_raw(v.matrix(), y.matrix())?;
    Ok(LossValue {
        value: value.max(0.0),
        gradient: Some(gradient),
    })
}

/// Direct `‖VVᵀ − YYᵀ‖²_F`. Quadratic in the row count, kept as a reference.
pub fn affinity_loss_pairwise(v: &EmbeddingMatrix, y: &TargetMatrix) -> Result<LossValue> {
    affinity_loss_pairwise_capped(v, y, PAIRWISE_CAP)
}

pub fn affinity_loss_pairwise_capped(
    v: &EmbeddingMatrix,
    y: &TargetMatrix,
    cap: usize,
) -> Result<LossValue> {
    check_rows(v.matrix(), y.matrix())?;
    if v.rows() > cap {
        return Err(Error::invalid(format!(
            "pairwise loss materializes a {0}x{0} matrix; cap is {cap} rows",
            v.rows()
        )));
    }
    let gv = v.matrix().gram();
    let gy = y.matrix().gram();
    let value = gv
        .as_slice()
        .iter()
        .zip(gy.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(LossValue {
        value,
        gradient: None,
    })
}

/// Chimera objective `α·L_DC/(TF) + (1−α)·L_MI/(TF)` with both heads' gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ChimeraLoss {
    pub value: f64,
    /// Unweighted affinity loss, absent when `α = 0`.
    pub dc_loss: Option<f64>,
    /// Unweighted permutation-minimal mask loss, absent when `α = 1`.
    pub mi_loss: Option<f64>,
    /// Speaker assignment used by the mask term: mask `n` is matched to source `permutation[n]`.
    pub permutation: Option<Vec<usize>>,
    pub grad_embeddings: Option<Matrix>,
    pub grad_masks: Option<Vec<Matrix>>,
}

/// Borrowed inputs of the mask-inference term.
#[derive(Debug, Clone, Copy)]
pub struct MaskTerm<'a> {
    /// `N` estimated ratio masks, each `T x F`.
    pub masks: &'a [Matrix],
    /// Mixture magnitudes `T x F`.
    pub mix_mag: &'a Matrix,
    /// `N` source magnitudes, each `T x F`.
    pub src_mags: &'a [Matrix],
}

pub fn chimera_loss(
    v: &EmbeddingMatrix,
    y: &TargetMatrix,
    mask_term: MaskTerm<'_>,
    alpha: f64,
) -> Result<ChimeraLoss> {
    chimera_loss_impl(v, y, mask_term, alpha, false)
}

pub fn chimera_loss_with_gradient(
    v: &EmbeddingMatrix,
    y: &TargetMatrix,
    mask_term: MaskTerm<'_>,
    alpha: f64,
) -> Result<ChimeraLoss> {
    chimera_loss_impl(v, y, mask_term, alpha, true)
}

fn chimera_loss_impl(
    v: &EmbeddingMatrix,
    y: &TargetMatrix,
    term: MaskTerm<'_>,
    alpha: f64,
    with_gradient: bool,
) -> Result<ChimeraLoss> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let (t, f) = term.mix_mag.shape();
    let bins = (t * f) as f64;
    if bins == 0.0 {
        return Err(Error::invalid("mixture spectrogram is empty"));
    }

    let mut out = ChimeraLoss {
        value: 0.0,
        dc_loss: None,
        mi_loss: None,
        permutation: None,
        grad_embeddings: None,
        grad_masks: None,
    };

    // Each branch is skipped outright when its weight is zero, so a zero
    // weight never leaks its (possibly non-finite) contribution.
    if alpha > 0.0 {
        let dc = affinity_loss_raw(v.matrix(), y.matrix())?.max(0.0);
        out.value += alpha * dc / bins;
        out.dc_loss = Some(dc);
        if with_gradient {
            let mut g = affinity_gradient_raw(v.matrix(), y.matrix())?;
            g.scale(alpha / bins);
            out.grad_embeddings = Some(g);
        }
    }

    if alpha < 1.0 {
        let (mi, perm) = mask_loss(term)?;
        out.value += (1.0 - alpha) * mi / bins;
        out.mi_loss = Some(mi);
        if with_gradient {
            let c = 2.0 * (1.0 - alpha) / bins;
            let grads = term
                .masks
                .iter()
                .zip(&perm)
                .map(|(m, &s)| {
                    let mut g = Matrix::zeros(t, f);
                    let it = g
                        .as_mut_slice()
                        .iter_mut()
                        .zip(m.as_slice())
                        .zip(term.mix_mag.as_slice())
                        .zip(term.src_mags[s].as_slice());
                    for (((g, &m), &x), &s) in it {
                        *g = c * (m * x - s) * x;
                    }
                    g
                })
                .collect();
            out.grad_masks = Some(grads);
        }
        out.permutation = Some(perm);
    }
    Ok(out)
}

fn check_mask_term(term: &MaskTerm<'_>) -> Result<()> {
    let n = term.src_mags.len();
    let shape = term.mix_mag.shape();
    if term.masks.len() != n {
        return Err(Error::shape("mask loss", format!("{n} masks"), term.masks.len()));
    }
    for m in term.masks.iter().chain(term.src_mags) {
        if m.shape() != shape {
            return Err(Error::shape("mask loss", format!("{shape:?}"), format!("{:?}", m.shape())));
        }
    }
    for m in term.masks {
        if let Some(x) = m.as_slice().iter().find(|x| !(-1e-12..=1.0 + 1e-12).contains(*x)) {
            return Err(Error::invalid(format!("mask entry {x} outside [0, 1]")));
        }
    }
    Ok(())
}

/// `min_π Σ_n ‖m_n ⊙ |X| − |S_π(n)|‖²_F` and the minimizing assignment.
/// Ties go to the lexicographically first permutation.
pub fn mask_loss(term: MaskTerm<'_>) -> Result<(f64, Vec<usize>)> {
    check_mask_term(&term)?;
    let n = term.masks.len();
    // cost[i][j]: error of mask i against source j
    let cost: Vec<Vec<f64>> = term
        .masks
        .iter()
        .map(|m| {
            term.src_mags
                .iter()
                .map(|s| {
                    m.as_slice()
                        .iter()
                        .zip(term.mix_mag.as_slice())
                        .zip(s.as_slice())
                        .map(|((&m, &x), &s)| (m * x - s).powi(2))
                        .sum()
                })
                .collect()
        })
        .collect();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in (0..n).permutations(n) {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        if best.as_ref().is_none_or(|(b, _)| total < *b) {
            best = Some((total, perm));
        }
    }
    best.ok_or_else(|| Error::invalid("mask loss needs at least one source"))
}
