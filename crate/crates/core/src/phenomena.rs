//! Desk-scale reproductions of two negative results: expected utility with
//! a bounded-below utility can increase forever in the position size, and
//! the laws of one-step payoffs need not be closed under weak convergence.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preferences::UtilityFunction;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum PhenomenaError {
    #[error("utility `{0}` diverges at -infinity; the non-existence construction needs a bounded-below utility")]
    NotBoundedBelow(String),
    #[error("position grid must be strictly increasing with at least two points")]
    BadGrid,
    #[error("probability {0} outside (0, 1)")]
    BadProbability(f64),
    #[error("ladder index must be at least 1")]
    BadIndex,
}

/// `E u(phi dS)` along a position grid in the `+-1` market.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceSweep<T> {
    pub phi: Vec<T>,
    pub values: Vec<T>,
    /// Values strictly increase along the grid.
    pub increasing: bool,
    /// `p u(+inf) + (1 - p) u(-inf)`, approached but never attained.
    pub limit: T,
    /// `limit - value` at each grid point.
    pub gaps: Vec<T>,
    /// Gaps strictly decrease along the grid.
    pub gap_shrinking: bool,
}

/// Sweeps `E u(phi dS)` with `P(dS = 1) = p_up`, `P(dS = -1) = 1 - p_up`.
pub fn nonexistence_sweep<T: Scalar>(
    p_up: T,
    u: &UtilityFunction<T>,
    phi_grid: &[T],
) -> Result<DivergenceSweep<T>, PhenomenaError> {
    if u.limma() {
        return Err(PhenomenaError::NotBoundedBelow(u.name().into()));
    }
    if !(p_up > T::zero() && p_up < T::one()) {
        return Err(PhenomenaError::BadProbability(p_up.to_f64_lossy()));
    }
    if phi_grid.len() < 2 || phi_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(PhenomenaError::BadGrid);
    }
    let q = T::one() - p_up;
    let values: Vec<T> = phi_grid.iter().map(|&phi| p_up * u.eval(phi) + q * u.eval(-phi)).collect();
    let far = T::lit(1e6);
    let limit = p_up * u.eval(far) + q * u.eval(-far);
    let gaps: Vec<T> = values.iter().map(|&v| limit - v).collect();
    Ok(DivergenceSweep {
        phi: phi_grid.to_vec(),
        increasing: values.windows(2).all(|w| w[1] > w[0]),
        gap_shrinking: gaps.windows(2).all(|w| w[1] < w[0]),
        values,
        limit,
        gaps,
    })
}

/// `g_n(x) = n (x - k/n)` on `[k/n, (k+1)/n)`, with `g_n(1) = 1`.
pub fn ladder_map<T: Scalar>(n: usize, x: T) -> T {
    if x >= T::one() {
        return T::one();
    }
    let nx = T::lit(n as f64) * x;
    nx - nx.floor()
}

/// Exact `P(U <= a, g_n(U) <= b)`: the sum over branches `k` of the length
/// of `[k/n, (k+b)/n] cap [0, a]`.
pub fn ladder_mass<T: Scalar>(n: usize, a: T, b: T) -> T {
    let nf = T::lit(n as f64);
    (0..n)
        .map(|k| {
            let k = T::lit(k as f64);
            ((a.min((k + b) / nf)) - k / nf).max(T::zero())
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadderEntry<T> {
    pub n: usize,
    /// `max |mu_n([0,a] x [0,b]) - a b|` over the rectangle grid.
    pub distance: T,
    /// `1 / n`.
    pub bound: T,
}

/// Rectangle corners `i / m`, `i = 0..=m`.
pub fn rectangle_grid<T: Scalar>(m: usize) -> Vec<T> {
    (0..=m).map(|i| T::lit(i as f64 / m as f64)).collect()
}

/// Distance of `Law(U, g_n(U))` to the uniform law on the square, for each `n`.
pub fn weak_convergence_ladder<T: Scalar>(n_values: &[usize], grid: &[T]) -> Result<Vec<LadderEntry<T>>, PhenomenaError> {
    if n_values.contains(&0) {
        return Err(PhenomenaError::BadIndex);
    }
    Ok(n_values
        .par_iter()
        .map(|&n| {
            let mut distance = T::zero();
            for &a in grid {
                for &b in grid {
                    distance = distance.max((ladder_mass(n, a, b) - a * b).abs());
                }
            }
            LadderEntry { n, distance, bound: T::one() / T::lit(n as f64) }
        })
        .collect())
}

/// One-step market with `dS = -1` w.p. 1/2 and `dS = f_k(U)` w.p. `2^-(k+1)`,
/// truncated at `k = K` with the tail mass folded into band `K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleMarket<T> {
    pub k_max: usize,
    /// `P(Y = k)` for `k = 1..=K`; `P(Y = -1) = 1/2`.
    pub band_probs: Vec<T>,
}

impl<T: Scalar> CounterexampleMarket<T> {
    pub fn new(k_max: usize) -> Self {
        let k_max = k_max.max(1);
        let band_probs = (1..=k_max)
            .map(|k| if k < k_max { T::lit(0.5f64.powi(k as i32 + 1)) } else { T::lit(0.5f64.powi(k as i32)) })
            .collect();
        Self { k_max, band_probs }
    }

    /// `q_k(x) = cos(2 pi k x) / 2`.
    pub fn q(k: usize, x: T) -> T {
        T::lit(0.5) * (T::lit(2.0) * T::PI() * T::lit(k as f64) * x).cos()
    }

    /// `f_k(x) = 3^k + 1/2 + q_k(x)`.
    pub fn f(k: usize, x: T) -> T {
        T::lit(3f64.powi(k as i32)) + T::lit(0.5) + Self::q(k, x)
    }

    /// `2 3^k + 2 < 3^(k+1)` for every `k = 1..=K`, in integer arithmetic.
    pub fn bands_disjoint(&self) -> bool {
        (1..=self.k_max as u32).all(|k| {
            let p = 3u128.checked_pow(k);
            let q = 3u128.checked_pow(k + 1);
            matches!((p, q), (Some(p), Some(q)) if 2 * p + 2 < q)
        })
    }

    /// `f_k >= 3^k` and `|q_k| <= 1/2` on `points` equispaced samples.
    pub fn check_increments(&self, points: usize) -> bool {
        (0..=points).all(|i| {
            let x = T::lit(i as f64 / points as f64);
            (1..=self.k_max).all(|k| {
                Self::q(k, x).abs() <= T::lit(0.5) && Self::f(k, x) >= T::lit(3f64.powi(k as i32))
            })
        })
    }
}

/// Discretisation of the closedness probe.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeGrid {
    /// Equal cells of `[0, 1]` whose midpoints carry the law of `U`.
    pub cells: usize,
    /// Quantile levels `j / quantiles` of the limit law at which CDFs are compared.
    pub quantiles: usize,
}

impl Default for ProbeGrid {
    fn default() -> Self {
        Self { cells: 1 << 14, quantiles: 200 }
    }
}

/// Moment residual of one dictionary strategy at one band.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow<T> {
    pub strategy: String,
    pub k: usize,
    /// `int g q_k`.
    pub c_k: T,
    /// `(3/2 - int g)(3^k + 1/2)`.
    pub bound: T,
    pub residual: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosednessReport<T> {
    pub k_max: usize,
    pub bands_disjoint: bool,
    pub increments_ok: bool,
    /// `(n, distance(Law(phi_n dS), nu))`.
    pub ladder: Vec<(usize, T)>,
    pub residuals: Vec<ResidualRow<T>>,
    /// Dictionary strategy with the smallest largest residual, and that residual.
    pub best_strategy: (String, T),
    /// Distance of `Law(3/2 dS)` to `nu`.
    pub constant_distance: T,
}

/// A named predictable strategy `g(U)`.
pub type NamedStrategy<T> = (String, Box<dyn Fn(T) -> T + Send + Sync>);

/// Dictionary of predictable strategies `g(U)` used for the moment residuals.
pub fn strategy_dictionary<T: Scalar>() -> Vec<NamedStrategy<T>> {
    type M<T> = CounterexampleMarket<T>;
    vec![
        ("const_1".into(), Box::new(|_| T::one())),
        ("const_1.5".into(), Box::new(|_| T::lit(1.5))),
        ("const_2".into(), Box::new(|_| T::lit(2.0))),
        ("1.5+0.1q1".into(), Box::new(|x| T::lit(1.5) + T::lit(0.1) * M::<T>::q(1, x))),
        ("1.5+0.1q2".into(), Box::new(|x| T::lit(1.5) + T::lit(0.1) * M::<T>::q(2, x))),
        ("1+x".into(), Box::new(|x| T::one() + x)),
    ]
}

struct BandLaws<T> {
    /// Per band (index 0 is `Y = -1`): sorted payoff samples of the strategy.
    samples: Vec<Vec<T>>,
}

impl<T: Scalar> BandLaws<T> {
    fn of(market: &CounterexampleMarket<T>, grid: &ProbeGrid, g: &dyn Fn(T) -> T) -> Self {
        let mids: Vec<T> = (0..grid.cells).map(|i| T::lit((i as f64 + 0.5) / grid.cells as f64)).collect();
        let mut samples = vec![{
            let mut v: Vec<T> = mids.iter().map(|&u| -g(u)).collect();
            v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            v
        }];
        for k in 1..=market.k_max {
            let mut v: Vec<T> = mids.iter().map(|&u| g(u) * CounterexampleMarket::f(k, u)).collect();
            v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            samples.push(v);
        }
        Self { samples }
    }

    fn cdf(&self, band: usize, y: T) -> T {
        let s = &self.samples[band];
        T::lit(s.partition_point(|&v| v <= y) as f64 / s.len() as f64)
    }
}

/// Conditional CDF of the limit law `nu = Law(V dS)` with `V` uniform on `[1, 2]`.
fn limit_cdf<T: Scalar>(band: usize, y: T, mids: &[T]) -> T {
    let clamp = |t: T| t.max(T::zero()).min(T::one());
    if band == 0 {
        return clamp(y + T::lit(2.0));
    }
    let total: T = mids.iter().map(|&u| clamp(y / CounterexampleMarket::f(band, u) - T::one())).sum();
    total / T::lit(mids.len() as f64)
}

/// Quantiles of the limit law per band, by bisection on its CDF.
fn limit_quantiles<T: Scalar>(market: &CounterexampleMarket<T>, grid: &ProbeGrid, mids: &[T]) -> Vec<Vec<T>> {
    (0..=market.k_max)
        .map(|band| {
            let (lo, hi) = if band == 0 {
                (T::lit(-2.0), T::lit(-1.0))
            } else {
                let s = T::lit(3f64.powi(band as i32));
                (s, T::lit(2.0) * (s + T::one()))
            };
            (1..grid.quantiles)
                .map(|j| {
                    let level = T::lit(j as f64 / grid.quantiles as f64);
                    let (mut a, mut b) = (lo, hi);
                    for _ in 0..60 {
                        let m = (a + b) * T::lit(0.5);
                        if limit_cdf(band, m, mids) < level {
                            a = m;
                        } else {
                            b = m;
                        }
                    }
                    b
                })
                .collect()
        })
        .collect()
}

/// Largest per-band conditional CDF gap on the quantile grid of `nu`.
fn band_distance<T: Scalar>(laws: &BandLaws<T>, quantiles: &[Vec<T>], mids: &[T]) -> T {
    let mut d = T::zero();
    for (band, qs) in quantiles.iter().enumerate() {
        for &y in qs {
            d = d.max((laws.cdf(band, y) - limit_cdf(band, y, mids)).abs());
        }
    }
    d
}

/// Runs the closedness probe: distances of `Law(phi_n dS)` to `nu` along the
/// ladder, moment residuals of the dictionary strategies, and the distance
/// of the only residual-free constant strategy `3/2` to `nu`.
pub fn closedness_probe<T: Scalar>(k_max: usize, n_values: &[usize], grid: &ProbeGrid) -> Result<ClosednessReport<T>, PhenomenaError> {
    if n_values.contains(&0) {
        return Err(PhenomenaError::BadIndex);
    }
    let market = CounterexampleMarket::<T>::new(k_max);
    let mids: Vec<T> = (0..grid.cells).map(|i| T::lit((i as f64 + 0.5) / grid.cells as f64)).collect();
    let quantiles = limit_quantiles(&market, grid, &mids);

    let ladder: Vec<(usize, T)> = n_values
        .par_iter()
        .map(|&n| {
            let laws = BandLaws::of(&market, grid, &|u| ladder_map(n, u) + T::one());
            (n, band_distance(&laws, &quantiles, &mids))
        })
        .collect();

    let cells = T::lit(grid.cells as f64);
    let mut residuals = Vec::new();
    let mut best: Option<(String, T)> = None;
    for (name, g) in strategy_dictionary::<T>() {
        let mean: T = mids.iter().map(|&u| g(u)).sum::<T>() / cells;
        let mut worst = T::zero();
        for k in 1..=market.k_max {
            let c_k: T = mids.iter().map(|&u| g(u) * CounterexampleMarket::q(k, u)).sum::<T>() / cells;
            let bound = (T::lit(1.5) - mean) * (T::lit(3f64.powi(k as i32)) + T::lit(0.5));
            let residual = c_k - bound;
            worst = worst.max(residual.abs());
            residuals.push(ResidualRow { strategy: name.clone(), k, c_k, bound, residual });
        }
        if best.as_ref().is_none_or(|b| worst < b.1) {
            best = Some((name, worst));
        }
    }
    let constant = BandLaws::of(&market, grid, &|_| T::lit(1.5));
    Ok(ClosednessReport {
        k_max: market.k_max,
        bands_disjoint: market.bands_disjoint(),
        increments_ok: market.check_increments(1000),
        ladder,
        residuals,
        best_strategy: best.expect("non-empty dictionary"),
        constant_distance: band_distance(&constant, &quantiles, &mids),
    })
}
