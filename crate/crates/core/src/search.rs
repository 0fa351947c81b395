//! Derivative-free maximisation over small balls: coarse multi-start grid,
//! golden-section refinement in one dimension, compass search otherwise.

use std::cmp::Ordering;

use crate::scalar::{norm, Scalar};

const GOLDEN: f64 = 0.618_033_988_749_894_9;

/// Maximises `f` on `[a, b]` assuming unimodality, to bracket width `tol`.
pub fn golden_max<T: Scalar>(mut f: impl FnMut(T) -> T, mut a: T, mut b: T, tol: T) -> (T, T) {
    let g = T::lit(GOLDEN);
    let mut x1 = b - g * (b - a);
    let mut x2 = a + g * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while b - a > tol {
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = f(x2);
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = f(x1);
        }
    }
    let mid = (a + b) * T::lit(0.5);
    let fm = f(mid);
    [(x1, f1), (x2, f2), (mid, fm)].into_iter().fold((mid, fm), |best, c| if c.1 > best.1 { c } else { best })
}

/// Candidate maximiser with the deterministic preference order: larger
/// value, then smaller norm, then lexicographically smaller coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate<T> {
    pub point: Vec<T>,
    pub value: T,
}

impl<T: Scalar> Candidate<T> {
    /// Whether `self` is preferred to `other`; values within `tie` count as equal.
    pub fn beats(&self, other: &Self, tie: T) -> bool {
        let scale = T::one().max(self.value.abs()).max(other.value.abs());
        if self.value > other.value + tie * scale {
            return true;
        }
        if other.value > self.value + tie * scale {
            return false;
        }
        let (na, nb) = (norm(&self.point), norm(&other.point));
        if na != nb {
            return na < nb;
        }
        self.point
            .iter()
            .zip(&other.point)
            .map(|(a, b)| a.partial_cmp(b).unwrap_or(Ordering::Equal))
            .find(|o| *o != Ordering::Equal)
            == Some(Ordering::Less)
    }
}

/// Settings of [`maximize_in_ball`].
#[derive(Clone, Copy, Debug)]
pub struct BallSearch<T> {
    /// Radius of the coarse grid.
    pub radius: T,
    /// Radius the refinement may move within (at least `radius`).
    pub refine_radius: T,
    /// Coarse points per coordinate (made odd so the origin is included).
    pub coarse_points: usize,
    /// Final step / bracket width.
    pub tol: T,
    /// Relative tolerance under which two values tie.
    pub tie: T,
    /// Number of coarse local maxima that get refined.
    pub starts: usize,
    /// Coarse grids are repeated at radii `radius / 4^j` down to this scale,
    /// so that huge radii do not hide optima near the origin.
    pub inner_radius: T,
}

impl<T: Scalar> BallSearch<T> {
    /// `radius, radius / 4, ...` while above `inner_radius` (at least one entry).
    fn shells(&self) -> Vec<T> {
        let mut out = vec![self.radius];
        let mut r = self.radius * T::lit(0.25);
        while r > self.inner_radius && out.len() < 64 {
            out.push(r);
            r = r * T::lit(0.25);
        }
        out
    }
}

/// Maximises `f` over the ball of radius `refine_radius` in `R^dim`,
/// seeding from a coarse tensor grid on the ball of radius `radius`.
/// The origin is always a candidate.
pub fn maximize_in_ball<T: Scalar>(dim: usize, search: &BallSearch<T>, f: impl Fn(&[T]) -> T) -> Candidate<T> {
    let origin = Candidate { point: vec![T::zero(); dim], value: f(&vec![T::zero(); dim]) };
    if dim == 0 || search.radius <= T::zero() {
        return origin;
    }
    let n = search.coarse_points.max(3) | 1;
    let half = (n / 2) as i64;
    let shells = search.shells();
    let mut best = origin.clone();
    let consider = |c: Candidate<T>, best: &mut Candidate<T>| {
        if c.beats(best, search.tie) {
            *best = c;
        }
    };

    if dim == 1 {
        let mut pts: Vec<T> = Vec::new();
        for &r in &shells {
            let spacing = r / T::lit(half as f64);
            pts.extend((-half..=half).map(|i| spacing * T::lit(i as f64)));
        }
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
        pts.dedup();
        let n = pts.len();
        let vals: Vec<T> = pts.iter().map(|&x| f(&[x])).collect();
        let mut peaks: Vec<usize> = (0..n)
            .filter(|&i| (i == 0 || vals[i] >= vals[i - 1]) && (i + 1 == n || vals[i] >= vals[i + 1]))
            .collect();
        peaks.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap_or(Ordering::Equal));
        for &i in peaks.iter().take(search.starts) {
            consider(Candidate { point: vec![pts[i]], value: vals[i] }, &mut best);
            let lo = if i == 0 { -search.refine_radius } else { pts[i - 1] };
            let hi = if i + 1 == n { search.refine_radius } else { pts[i + 1] };
            let (x, v) = golden_max(|x| f(&[x]), lo, hi, search.tol);
            consider(Candidate { point: vec![x], value: v }, &mut best);
        }
        return best;
    }

    // Coarse tensor grids restricted to the ball, one per shell.
    let mut seeds: Vec<(Candidate<T>, T)> = Vec::new();
    for &r in &shells {
        let spacing = r / T::lit(half as f64);
        let mut idx = vec![-half; dim];
        loop {
            let p: Vec<T> = idx.iter().map(|&i| spacing * T::lit(i as f64)).collect();
            if norm(&p) <= r * T::lit(1.0 + 1e-12) {
                let value = f(&p);
                seeds.push((Candidate { point: p, value }, spacing));
            }
            let mut k = 0;
            while k < dim {
                idx[k] += 1;
                if idx[k] <= half {
                    break;
                }
                idx[k] = -half;
                k += 1;
            }
            if k == dim {
                break;
            }
        }
    }
    seeds.sort_by(|a, b| b.0.value.partial_cmp(&a.0.value).unwrap_or(Ordering::Equal));
    for (seed, spacing) in seeds.into_iter().take(search.starts) {
        consider(seed.clone(), &mut best);
        let refined = compass_search(&f, seed, spacing, search.tol, search.refine_radius);
        consider(refined, &mut best);
    }
    best
}

/// Compass search: try `+-step` along each axis, move on improvement,
/// halve the step otherwise; stays inside the ball of radius `radius`.
pub fn compass_search<T: Scalar>(f: &impl Fn(&[T]) -> T, start: Candidate<T>, step: T, tol: T, radius: T) -> Candidate<T> {
    let mut cur = start;
    let mut step = step;
    let dim = cur.point.len();
    while step > tol {
        let mut moved = false;
        for k in 0..dim {
            for sgn in [T::one(), -T::one()] {
                let mut p = cur.point.clone();
                p[k] = p[k] + sgn * step;
                if norm(&p) > radius {
                    continue;
                }
                let v = f(&p);
                if v > cur.value {
                    cur = Candidate { point: p, value: v };
                    moved = true;
                }
            }
        }
        if !moved {
            step = step * T::lit(0.5);
        }
    }
    cur
}

#[cfg(test)]
mod tests {
    use super::*;

    fn search(radius: f64) -> BallSearch<f64> {
        BallSearch { radius, refine_radius: radius, coarse_points: 41, tol: 1e-9, tie: 1e-12, starts: 3, inner_radius: radius }
    }

    #[test]
    fn golden_finds_parabola_peak() {
        let (x, v) = golden_max(|x: f64| -(x - 0.3).powi(2), -2.0, 2.0, 1e-10);
        assert!((x - 0.3).abs() < 1e-8 && v.abs() < 1e-15);
    }

    #[test]
    fn bimodal_picks_global_peak() {
        let f = |p: &[f64]| (-(p[0] - 2.0).powi(2)).exp() + 1.5 * (-(p[0] + 3.0).powi(2)).exp();
        let best = maximize_in_ball(1, &search(5.0), f);
        assert!((best.point[0] + 3.0).abs() < 1e-4, "{best:?}");
    }

    #[test]
    fn ties_prefer_origin() {
        let best = maximize_in_ball(1, &search(3.0), |_p: &[f64]| 1.0);
        assert_eq!(best.point, vec![0.0]);
        let best = maximize_in_ball(2, &search(3.0), |_p: &[f64]| 1.0);
        assert_eq!(best.point, vec![0.0, 0.0]);
    }

    #[test]
    fn two_dimensional_quadratic() {
        let f = |p: &[f64]| -(p[0] - 0.7).powi(2) - 2.0 * (p[1] + 0.2).powi(2);
        let best = maximize_in_ball(2, &search(2.0), f);
        assert!((best.point[0] - 0.7).abs() < 1e-7 && (best.point[1] + 0.2).abs() < 1e-7);
    }

    #[test]
    fn shells_find_narrow_peak_in_huge_ball() {
        let f = |p: &[f64]| -((p[0] - 0.8).powi(2) + p.get(1).map_or(0.0, |y| (y + 0.3).powi(2))).sqrt().min(5.0);
        let mut s = search(1e6);
        s.inner_radius = 0.5;
        let best = maximize_in_ball(1, &s, f);
        assert!((best.point[0] - 0.8).abs() < 1e-6, "{best:?}");
        let best = maximize_in_ball(2, &s, f);
        assert!((best.point[0] - 0.8).abs() < 1e-6 && (best.point[1] + 0.3).abs() < 1e-6, "{best:?}");
    }

    #[test]
    fn boundary_refinement_uses_outer_radius() {
        let mut s = search(1.0);
        s.refine_radius = 2.0;
        let best = maximize_in_ball(1, &s, |p: &[f64]| -(p[0] - 1.5).powi(2));
        assert!((best.point[0] - 1.5).abs() < 1e-7);
    }
}
