//! Principal components through the Gram matrix.
//!
//! For a tall `n x d` matrix `A`, the `d x d` Gram matrix `AᵀA = V S² Vᵀ`
//! yields the right singular vectors and singular values from a small
//! symmetric eigenproblem, and the left singular vectors follow as
//! `U = A V S⁻¹`. Only the `d x d` matrix is ever decomposed.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Eigenvalues below this fraction of the largest are treated as zero.
pub const EIGEN_CLAMP: f64 = 1e-12;

/// Exact `AᵀA`, accumulated over row blocks and symmetrized.
pub fn gram_matrix(a: &DMatrix<f64>) -> DMatrix<f64> {
    let d = a.ncols();
    let block = 4096;
    let starts: Vec<usize> = (0..a.nrows()).step_by(block).collect();
    let mut g = starts
        .par_iter()
        .map(|&s| {
            let rows = a.rows(s, block.min(a.nrows() - s));
            rows.transpose() * rows
        })
        .reduce(|| DMatrix::zeros(d, d), |x, y| x + y);
    for i in 0..d {
        for j in (i + 1)..d {
            let m = 0.5 * (g[(i, j)] + g[(j, i)]);
            g[(i, j)] = m;
            g[(j, i)] = m;
        }
    }
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    /// `d x d`, columns are right singular vectors.
    pub v: DMatrix<f64>,
    /// Descending, non-negative.
    pub singular_values: Vec<f64>,
    /// `n x d` left singular vectors; zero columns where `rank_deficient`.
    pub u: DMatrix<f64>,
    /// Per component: singular value treated as zero.
    pub rank_deficient: Vec<bool>,
    /// Column means subtracted before decomposition, if centering was requested.
    pub column_means: Option<Vec<f64>>,
}

impl PcaResult {
    pub fn rank(&self) -> usize {
        self.rank_deficient.iter().filter(|z| !**z).count()
    }

    /// `U S Vᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let s =
            DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&self.singular_values));
        &self.u * s * self.v.transpose()
    }
}

/// Optionally mean-center the columns of `a`.
pub fn center_columns(a: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let means: Vec<f64> = a.column_iter().map(|c| c.mean()).collect();
    let mut out = a.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(-means[j]);
    }
    (out, means)
}

/// Singular value decomposition of `a` via its Gram matrix.
pub fn gram_svd(a: &DMatrix<f64>, center: bool) -> PcaResult {
    let (a, column_means) = if center {
        let (c, m) = center_columns(a);
        (c, Some(m))
    } else {
        (a.clone(), None)
    };
    let d = a.ncols();
    let eig = SymmetricEigen::new(gram_matrix(&a));

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let max_ev = order
        .first()
        .map(|&i| eig.eigenvalues[i].max(0.0))
        .unwrap_or(0.0);

    let mut v = DMatrix::zeros(d, d);
    let mut singular_values = Vec::with_capacity(d);
    let mut rank_deficient = Vec::with_capacity(d);
    for (col, &i) in order.iter().enumerate() {
        let ev = eig.eigenvalues[i];
        let zero = max_ev == 0.0 || ev.is_nan() || ev <= EIGEN_CLAMP * max_ev;
        singular_values.push(if zero { 0.0 } else { ev.sqrt() });
        rank_deficient.push(zero);

        let mut vec = eig.eigenvectors.column(i).into_owned();
        // Largest-magnitude entry positive.
        let pivot = vec.iter().copied().fold(
            0.0f64,
            |best, x| if x.abs() > best.abs() { x } else { best },
        );
        if pivot < 0.0 {
            vec.neg_mut();
        }
        v.set_column(col, &vec);
    }

    let av = &a * &v;
    let mut u = DMatrix::zeros(a.nrows(), d);
    for j in 0..d {
        if !rank_deficient[j] {
            u.set_column(j, &(av.column(j) / singular_values[j]));
        }
    }

    PcaResult {
        v,
        singular_values,
        u,
        rank_deficient,
        column_means,
    }
}

/// Coordinates of the rows of `a` on the requested components (0-based).
pub fn project(a: &DMatrix<f64>, pca: &PcaResult, components: &[usize]) -> DMatrix<f64> {
    let a = match &pca.column_means {
        Some(means) => {
            let mut c = a.clone();
            for (j, mut col) in c.column_iter_mut().enumerate() {
                col.add_scalar_mut(-means[j]);
            }
            c
        }
        None => a.clone(),
    };
    let mut basis = DMatrix::zeros(pca.v.nrows(), components.len());
    for (k, &c) in components.iter().enumerate() {
        basis.set_column(k, &pca.v.column(c));
    }
    a * basis
}

/// Named component selections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Components {
    First3,
    Last3,
}

impl Components {
    pub fn indices(self, d: usize) -> Vec<usize> {
        match self {
            Components::First3 => (0..3.min(d)).collect(),
            Components::Last3 => (d.saturating_sub(3)..d).collect(),
        }
    }

    /// Column labels, 1-based.
    pub fn labels(self, d: usize) -> Vec<String> {
        self.indices(d)
            .iter()
            .map(|i| format!("c{}", i + 1))
            .collect()
    }
}

impl std::str::FromStr for Components {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "first3" => Ok(Components::First3),
            "last3" => Ok(Components::Last3),
            _ => Err(format!(
                "unknown component preset {s:?} (expected first3 or last3)"
            )),
        }
    }
}

pub fn rows_to_matrix(rows: &[crate::profile::FeatureRow]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), crate::profile::N_FEATURES, |i, j| rows[i][j])
}
