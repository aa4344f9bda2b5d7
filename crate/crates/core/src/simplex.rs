//! Regular-simplex targets.
//!
//! `N` speakers are placed on the vertices of an `(N-1)`-simplex inscribed in
//! the unit hypersphere. Vertices are expressed in the ambient
//! `N`-dimensional coordinates, so row `n` is the one-hot vector `e_n` moved
//! towards the centroid and rescaled to unit length.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Which target rows the affinity loss compares against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TargetMode {
    /// One-hot indicator rows (original deep clustering).
    OneHot,
    /// Regular-simplex vertex rows (manifold-aware deep clustering).
    Simplex,
}

impl fmt::Display for TargetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetMode::OneHot => "onehot",
            TargetMode::Simplex => "simplex",
        })
    }
}

impl FromStr for TargetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "onehot" | "one-hot" => Ok(TargetMode::OneHot),
            "simplex" => Ok(TargetMode::Simplex),
            other => Err(Error::invalid(format!("unknown target mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexVertices {
    n_speakers: usize,
    vertices: Matrix,
}

impl SimplexVertices {
    pub fn n_speakers(&self) -> usize {
        self.n_speakers
    }

    /// `N x N` matrix, one vertex per row.
    pub fn vertices(&self) -> &Matrix {
        &self.vertices
    }

    pub fn vertex(&self, speaker: usize) -> &[f64] {
        self.vertices.row(speaker)
    }
}

fn check_speakers(n_speakers: usize) -> Result<()> {
    if n_speakers < 2 {
        return Err(Error::invalid(format!(
            "a simplex target needs at least 2 speakers, got {n_speakers}"
        )));
    }
    Ok(())
}

/// `(peak, off)` entries of every vertex row: the coordinate on the vertex's
/// own axis and the coordinate on every other axis.
fn vertex_entries(n_speakers: usize) -> (f64, f64) {
    let n = n_speakers as f64;
    let scale = (n / (n - 1.0)).sqrt();
    ((n - 1.0) / n * scale, -1.0 / n * scale)
}

pub fn simplex_vertices(n_speakers: usize) -> Result<SimplexVertices> {
    check_speakers(n_speakers)?;
    let (peak, off) = vertex_entries(n_speakers);
    let mut vertices = Matrix::zeros(n_speakers, n_speakers);
    for i in 0..n_speakers {
        for j in 0..n_speakers {
            vertices[(i, j)] = if i == j { peak } else { off };
        }
    }
    Ok(SimplexVertices {
        n_speakers,
        vertices,
    })
}

/// Target cosine between two bins: `1` for the same speaker, `-1/(N-1)` otherwise.
pub fn target_cosine(n_speakers: usize, same_speaker: bool) -> Result<f64> {
    check_speakers(n_speakers)?;
    Ok(if same_speaker {
        1.0
    } else {
        -1.0 / (n_speakers as f64 - 1.0)
    })
}

/// Largest coordinate-wise distance between a simplex vertex and the one-hot
/// row it replaces. Goes to zero as the speaker count grows.
pub fn limit_deviation(n_speakers: usize) -> Result<f64> {
    check_speakers(n_speakers)?;
    // All rows are permutations of one another, so one row suffices and
    // large N never needs the N x N matrix.
    let (peak, off) = vertex_entries(n_speakers);
    Ok((1.0 - peak).abs().max(off.abs()))
}
