//! Sparse Hermitian matrices stored by their upper triangle.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Hermitian matrix of order `n`. Only entries `(i, j)` with `i <= j` are
/// stored; the lower triangle is implied by conjugate symmetry.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SparseHermitian {
    pub n: usize,
    entries: BTreeMap<(usize, usize), Complex64>,
}

impl SparseHermitian {
    pub fn new(n: usize) -> Self {
        SparseHermitian {
            n,
            entries: BTreeMap::new(),
        }
    }

    /// Adds `value` to entry `(i, j)` and its conjugate to `(j, i)`. On the
    /// diagonal only the real part is kept.
    pub fn add(&mut self, i: usize, j: usize, value: Complex64) {
        debug_assert!(i < self.n && j < self.n);
        let (key, v) = match i.cmp(&j) {
            std::cmp::Ordering::Less => ((i, j), value),
            std::cmp::Ordering::Greater => ((j, i), value.conj()),
            std::cmp::Ordering::Equal => ((i, i), Complex64::new(value.re, 0.0)),
        };
        *self.entries.entry(key).or_default() += v;
    }

    pub fn add_real(&mut self, i: usize, j: usize, value: f64) {
        self.add(i, j, Complex64::new(value, 0.0));
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        if i <= j {
            self.entries.get(&(i, j)).copied().unwrap_or_default()
        } else {
            self.entries.get(&(j, i)).copied().unwrap_or_default().conj()
        }
    }

    /// Stored upper-triangle entries in row-major order.
    pub fn upper(&self) -> impl Iterator<Item = ((usize, usize), Complex64)> + '_ {
        self.entries.iter().map(|(k, v)| (*k, *v))
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &SparseHermitian, alpha: f64) {
        for (k, v) in &other.entries {
            *self.entries.entry(*k).or_default() += v * alpha;
        }
    }

    pub fn scaled(&self, alpha: f64) -> SparseHermitian {
        let mut out = SparseHermitian::new(self.n);
        out.add_scaled(self, alpha);
        out
    }

    /// `v^H A v`, real for Hermitian `A`.
    pub fn quad_form(&self, v: &[Complex64]) -> f64 {
        self.entries
            .iter()
            .map(|(&(i, j), a)| {
                if i == j {
                    a.re * v[i].norm_sqr()
                } else {
                    2.0 * (v[i].conj() * a * v[j]).re
                }
            })
            .sum()
    }

    /// `trace(A W)` for a Hermitian `W` given entrywise.
    pub fn trace_with(&self, w: impl Fn(usize, usize) -> Complex64) -> f64 {
        self.entries
            .iter()
            .map(|(&(i, j), a)| {
                if i == j {
                    a.re * w(i, i).re
                } else {
                    2.0 * (a * w(i, j).conj()).re
                }
            })
            .sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.values().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn to_dense(&self) -> DMatrix<Complex64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (&(i, j), &v) in &self.entries {
            m[(i, j)] = v;
            m[(j, i)] = v.conj();
        }
        m
    }

    pub fn is_zero(&self, tol: f64) -> bool {
        self.max_abs() <= tol
    }
}
