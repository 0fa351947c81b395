//! Dense tableau simplex for the small feasibility programs of the
//! no-arbitrage check. Only problems of the form
//! `max c.x  s.t.  A x <= b, x >= 0` with `b >= 0` are needed, so the slack
//! basis is always feasible and no phase one is required.

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum LpOutcome<T> {
    Optimal { value: T, x: Vec<T> },
    Unbounded,
}

/// Bland's rule keeps degenerate pivots (many zero right-hand sides) from cycling.
pub(crate) fn maximize<T: Scalar>(c: &[T], a: &[Vec<T>], b: &[T]) -> LpOutcome<T> {
    let m = a.len();
    let n = c.len();
    let eps = T::lit(1e-12);
    let width = n + m + 1;
    let mut tab = vec![vec![T::zero(); width]; m + 1];
    for i in 0..m {
        debug_assert!(b[i] >= T::zero());
        tab[i][..n].copy_from_slice(&a[i]);
        tab[i][n + i] = T::one();
        tab[i][width - 1] = b[i];
    }
    for j in 0..n {
        tab[m][j] = -c[j];
    }
    let mut basis: Vec<usize> = (n..n + m).collect();

    let max_iter = 50 * (n + m + 1);
    for _ in 0..max_iter {
        let Some(enter) = (0..n + m).find(|&j| tab[m][j] < -eps) else {
            let mut x = vec![T::zero(); n];
            for (i, &bv) in basis.iter().enumerate() {
                if bv < n {
                    x[bv] = tab[i][width - 1];
                }
            }
            return LpOutcome::Optimal { value: tab[m][width - 1], x };
        };
        let mut leave: Option<usize> = None;
        for i in 0..m {
            if tab[i][enter] > eps {
                let ratio = tab[i][width - 1] / tab[i][enter];
                leave = match leave {
                    None => Some(i),
                    Some(l) => {
                        let best = tab[l][width - 1] / tab[l][enter];
                        if ratio < best - eps || ((ratio - best).abs() <= eps && basis[i] < basis[l]) {
                            Some(i)
                        } else {
                            Some(l)
                        }
                    }
                };
            }
        }
        let Some(row) = leave else {
            return LpOutcome::Unbounded;
        };
        let piv = tab[row][enter];
        for v in tab[row].iter_mut() {
            *v = *v / piv;
        }
        let pivot_row = tab[row].clone();
        for (i, r) in tab.iter_mut().enumerate() {
            if i != row {
                let f = r[enter];
                if f != T::zero() {
                    for (v, &p) in r.iter_mut().zip(&pivot_row) {
                        *v = *v - f * p;
                    }
                }
            }
        }
        basis[row] = enter;
    }
    // Bland's rule terminates; reaching this point means numerical trouble.
    LpOutcome::Unbounded
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textbook_problem() {
        // max 3x + 5y, x <= 4, 2y <= 12, 3x + 2y <= 18 -> (2, 6), 36
        let out = maximize::<f64>(&[3.0, 5.0], &[vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 2.0]], &[4.0, 12.0, 18.0]);
        match out {
            LpOutcome::Optimal { value, x } => {
                assert!((value - 36.0).abs() < 1e-12);
                assert!((x[0] - 2.0).abs() < 1e-12 && (x[1] - 6.0).abs() < 1e-12);
            }
            _ => panic!("expected optimum"),
        }
    }

    #[test]
    fn detects_unbounded() {
        assert_eq!(maximize(&[1.0, 1.0], &[vec![1.0, -1.0]], &[1.0]), LpOutcome::Unbounded);
    }

    #[test]
    fn degenerate_zero_rhs() {
        // max x - y with x - y <= 0 and -x + y <= 0: optimum 0 at the origin.
        let out = maximize::<f64>(&[1.0, -1.0], &[vec![1.0, -1.0], vec![-1.0, 1.0]], &[0.0, 0.0]);
        assert!(matches!(out, LpOutcome::Optimal { value, .. } if value.abs() < 1e-15));
    }
}
