//! Finitely supported distributions on the real line.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Atoms whose values differ by at most this much are coalesced.
pub const MERGE_TOL: f64 = 1e-12;

/// Distribution with finitely many atoms `(value, mass)`, sorted by value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteLaw<T> {
    atoms: Vec<(T, T)>,
}

impl<T: Scalar> DiscreteLaw<T> {
    /// Sorts the weighted values and merges atoms within [`MERGE_TOL`] of the
    /// first value of their group. Zero-mass entries are dropped.
    pub fn from_weighted(items: impl IntoIterator<Item = (T, T)>) -> Self {
        let mut items: Vec<(T, T)> = items.into_iter().filter(|&(_, p)| p > T::zero()).collect();
        items.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite law values"));
        let tol = T::lit(MERGE_TOL);
        let mut atoms: Vec<(T, T)> = Vec::with_capacity(items.len());
        for (v, p) in items {
            match atoms.last_mut() {
                Some(last) if (v - last.0).abs() <= tol => last.1 = last.1 + p,
                _ => atoms.push((v, p)),
            }
        }
        Self { atoms }
    }

    pub fn atoms(&self) -> &[(T, T)] {
        &self.atoms
    }

    pub fn total_mass(&self) -> T {
        self.atoms.iter().map(|a| a.1).sum()
    }

    /// `E f(X)`.
    pub fn expectation(&self, mut f: impl FnMut(T) -> T) -> T {
        self.atoms.iter().map(|&(v, p)| p * f(v)).sum()
    }

    /// `P(X <= x)`.
    pub fn cdf(&self, x: T) -> T {
        self.atoms.iter().take_while(|a| a.0 <= x).map(|a| a.1).sum()
    }

    /// Law of `f(X)`, re-sorted and re-merged.
    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Self::from_weighted(self.atoms.iter().map(|&(v, p)| (f(v), p)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merges_close_atoms() {
        let law = DiscreteLaw::from_weighted([(1.0, 0.25), (1.0 + 1e-14, 0.25), (-1.0, 0.5)]);
        assert_eq!(law.atoms(), &[(-1.0, 0.5), (1.0, 0.5)]);
        assert_eq!(law.cdf(0.0), 0.5);
        assert_eq!(law.expectation(|x| x * x), 1.0);
    }

    #[test]
    fn keeps_distinct_atoms() {
        let law = DiscreteLaw::from_weighted([(0.0, 0.5), (1e-9, 0.5)]);
        assert_eq!(law.atoms().len(), 2);
        assert_eq!(law.map(|x| x * 0.0).atoms(), &[(0.0, 1.0)]);
    }
}
