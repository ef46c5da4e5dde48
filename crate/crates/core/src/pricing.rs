//! Joint assortment and price optimization for MNL revenue.
//!
//! For utilities `u_i(p)` that decrease in price, the optimal revenue of an
//! assortment `S` is the unique root `mu*` of
//!
//! ```text
//! F(mu) = sum_{i in S} phi_i(mu) - mu,   phi_i(mu) = max_p (p - mu) exp(u_i(p))
//! ```
//!
//! and the optimal prices are the maximizers inside each `phi_i(mu*)`. With a
//! capacity `K` the best assortment at level `mu` is the `K` items with the
//! largest positive `phi_i(mu)`, so the same bisection runs on
//! `G(mu) = top-K sum - mu`.

use rayon::prelude::*;

use crate::error::{domain, Result, TjapError};
use crate::mnl::{clamped_exp, revenue};

/// Tolerance on `mu` for the fixed-point bisection.
pub const BISECTION_TOL: f64 = 1e-7;
/// Width at which golden-section refinement of a grid cell stops.
pub const GOLDEN_TOL: f64 = 1e-7;
/// Default number of uniform price grid points.
pub const DEFAULT_GRID_POINTS: usize = 512;

/// A utility curve `p -> u(p)` on `[0, P]`.
pub trait UtilityCurve: Sync {
    fn eval(&self, p: f64) -> f64;
}

/// `u(p) = intercept - slope * p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearUtility {
    pub intercept: f64,
    pub slope: f64,
}

impl LinearUtility {
    pub fn new(intercept: f64, slope: f64) -> Self {
        Self { intercept, slope }
    }
}

impl UtilityCurve for LinearUtility {
    fn eval(&self, p: f64) -> f64 {
        self.intercept - self.slope * p
    }
}

/// Utility sampled on a uniform grid, linearly interpolated between points.
#[derive(Debug, Clone, PartialEq)]
pub struct GridUtility {
    p_max: f64,
    values: Vec<f64>,
}

impl GridUtility {
    pub fn new(grid: &PriceGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return domain(format!(
                "curve has {} samples, grid has {} points",
                values.len(),
                grid.len()
            ));
        }
        Ok(Self {
            p_max: grid.p_max(),
            values,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

impl UtilityCurve for GridUtility {
    fn eval(&self, p: f64) -> f64 {
        let n = self.values.len();
        if n == 1 || self.p_max == 0.0 {
            return self.values[0];
        }
        let pos = (p / self.p_max).clamp(0.0, 1.0) * (n - 1) as f64;
        let k = (pos.floor() as usize).min(n - 2);
        let w = pos - k as f64;
        self.values[k] * (1.0 - w) + self.values[k + 1] * w
    }
}

impl<F: Fn(f64) -> f64 + Sync> UtilityCurve for F {
    fn eval(&self, p: f64) -> f64 {
        self(p)
    }
}

/// Uniform price grid on `[0, P]` including both endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceGrid {
    p_max: f64,
    points: Vec<f64>,
}

impl PriceGrid {
    pub fn new(p_max: f64, n_points: usize) -> Result<Self> {
        if !(p_max > 0.0) || !p_max.is_finite() {
            return domain(format!("price cap must be positive and finite, got {p_max}"));
        }
        if n_points < 2 {
            return domain("price grid needs at least 2 points");
        }
        let step = p_max / (n_points - 1) as f64;
        let mut points: Vec<f64> = (0..n_points).map(|k| k as f64 * step).collect();
        points[n_points - 1] = p_max;
        Ok(Self { p_max, points })
    }

    pub fn p_max(&self) -> f64 {
        self.p_max
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn step(&self) -> f64 {
        self.p_max / (self.points.len() - 1) as f64
    }
}

/// Checks that a curve is nonincreasing and `lipschitz`-Lipschitz at the
/// grid points.
pub fn validate_curve(curve: &dyn UtilityCurve, grid: &PriceGrid, lipschitz: f64) -> Result<()> {
    let pts = grid.points();
    for w in pts.windows(2) {
        let (a, b) = (curve.eval(w[0]), curve.eval(w[1]));
        if b > a + 1e-12 {
            return domain(format!("curve increases between {} and {}", w[0], w[1]));
        }
        if (a - b) > lipschitz * (w[1] - w[0]) + 1e-9 {
            return domain(format!(
                "curve drops faster than {lipschitz} between {} and {}",
                w[0], w[1]
            ));
        }
    }
    Ok(())
}

/// An assortment with posted prices and its fixed-point revenue.
#[derive(Debug, Clone, PartialEq)]
pub struct PricedAssortment {
    pub items: Vec<usize>,
    pub prices: Vec<f64>,
    pub value: f64,
}

impl PricedAssortment {
    pub fn empty() -> Self {
        Self {
            items: Vec::new(),
            prices: Vec::new(),
            value: 0.0,
        }
    }
}

/// `phi(mu)` and its maximizing price.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PhiValue {
    pub value: f64,
    pub price: f64,
    /// `e^{u(price)}`, minus the derivative of `phi` in `mu`.
    pub weight: f64,
}

/// A curve tabulated on the price grid so repeated `phi(mu)` evaluations only
/// rescan cached weights.
pub struct PhiTable<'a> {
    curve: &'a dyn UtilityCurve,
    grid: &'a PriceGrid,
    weight: Vec<f64>,
    price_weight: Vec<f64>,
}

impl<'a> PhiTable<'a> {
    pub fn new(curve: &'a dyn UtilityCurve, grid: &'a PriceGrid) -> Self {
        let weight: Vec<f64> = grid
            .points()
            .iter()
            .map(|&p| clamped_exp(curve.eval(p)))
            .collect();
        let price_weight = grid.points().iter().zip(&weight).map(|(p, w)| p * w).collect();
        Self {
            curve,
            grid,
            weight,
            price_weight,
        }
    }

    /// Grid maximum of `(p - mu) e^{u(p)}` without refinement.
    pub fn grid_phi(&self, mu: f64) -> f64 {
        // independent lanes let the compiler vectorize the scan
        const LANES: usize = 8;
        let mut lanes = [f64::NEG_INFINITY; LANES];
        let pw = self.price_weight.chunks_exact(LANES);
        let w = self.weight.chunks_exact(LANES);
        let (pw_tail, w_tail) = (pw.remainder(), w.remainder());
        for (a, b) in pw.zip(w) {
            for k in 0..LANES {
                let v = a[k] - mu * b[k];
                lanes[k] = if v > lanes[k] { v } else { lanes[k] };
            }
        }
        let mut best = lanes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (a, b) in pw_tail.iter().zip(w_tail) {
            best = best.max(a - mu * b);
        }
        best
    }

    /// Grid maximum of `(p - mu) e^{u(p)}`, refined by golden-section search
    /// over the cells adjacent to the winning grid point.
    pub fn phi(&self, mu: f64) -> PhiValue {
        let best = self.grid_phi(mu);
        let best_k = self
            .price_weight
            .iter()
            .zip(&self.weight)
            .position(|(pw, w)| pw - mu * w == best)
            .unwrap_or(0);
        let pts = self.grid.points();
        let lo = pts[best_k.saturating_sub(1)];
        let hi = pts[(best_k + 1).min(pts.len() - 1)];
        let f = |p: f64| (p - mu) * clamped_exp(self.curve.eval(p));
        let (p_ref, v_ref) = golden_max(&f, lo, hi, GOLDEN_TOL);
        if v_ref > best {
            PhiValue {
                value: v_ref,
                price: p_ref,
                weight: clamped_exp(self.curve.eval(p_ref)),
            }
        } else {
            PhiValue {
                value: best,
                price: pts[best_k],
                weight: self.weight[best_k],
            }
        }
    }
}

fn golden_max(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while b - a > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    let p = 0.5 * (a + b);
    (p, f(p))
}

/// `phi(mu) = sup_p (p - mu) e^{u(p)}` over the grid, with golden-section
/// refinement of the winning cell.
pub fn phi_item(mu: f64, curve: &dyn UtilityCurve, grid: &PriceGrid) -> PhiValue {
    PhiTable::new(curve, grid).phi(mu)
}

/// Shrinks a bracket `[lo, hi]` with `f(lo) > 0 >= f(hi)` to width
/// `BISECTION_TOL`.
fn bisect_decreasing(mut lo: f64, mut hi: f64, mut f: impl FnMut(f64) -> f64) -> (f64, f64) {
    while hi - lo > BISECTION_TOL {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo, hi)
}

/// Root of `F(mu) = Phi(mu) - mu` on `[0, P]`, where `Phi` is a convex,
/// nonincreasing sum of `phi` values.
///
/// `coarse` is a grid-only lower bound of `Phi`, so its root lies below the
/// refined one. Starting there, Newton steps on the convex `F` stay below the
/// root; each step is accepted only once `F(x + tol) > 0` shows the root is
/// still ahead, and the search stops when `[x, x + tol]` brackets it.
/// `fine` returns `(Phi, -Phi')`.
fn solve_fixed_point(
    p_max: f64,
    mut coarse: impl FnMut(f64) -> f64,
    mut fine: impl FnMut(f64) -> (f64, f64),
) -> f64 {
    // any lower bracket works as a Newton start, so the coarse pass stays loose
    let mut lo = 0.0;
    let mut hi = p_max;
    while hi - lo > 1e-4 * p_max.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if coarse(mid) - mid > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    const MAX_NEWTON: usize = 60;
    for _ in 0..MAX_NEWTON {
        hi = (lo + BISECTION_TOL).min(p_max);
        if hi >= p_max || fine(hi).0 - hi <= 0.0 {
            return 0.5 * (lo + hi);
        }
        let (phi, slope) = fine(lo);
        let f = phi - lo;
        let step = f / (slope + 1.0);
        lo = if step.is_finite() {
            (lo + step).max(hi).min(p_max)
        } else {
            hi
        };
    }
    // the Newton iterates stalled; finish with plain bisection
    let (lo, hi) = bisect_decreasing(lo, p_max, |mu| fine(mu).0 - mu);
    0.5 * (lo + hi)
}

/// Optimal prices and revenue for the fixed assortment formed by `curves`.
/// Item indices in the result are positions in `curves`.
pub fn fixed_point_revenue(curves: &[&dyn UtilityCurve], grid: &PriceGrid) -> PricedAssortment {
    if curves.is_empty() {
        return PricedAssortment::empty();
    }
    let tables: Vec<PhiTable> = curves.iter().map(|c| PhiTable::new(*c, grid)).collect();
    let mu = solve_fixed_point(
        grid.p_max(),
        |mu| tables.iter().map(|t| t.grid_phi(mu)).sum(),
        |mu| {
            tables.iter().fold((0.0, 0.0), |(v, w), t| {
                let p = t.phi(mu);
                (v + p.value, w + p.weight)
            })
        },
    );
    let prices = tables.iter().map(|t| t.phi(mu).price).collect();
    PricedAssortment {
        items: (0..curves.len()).collect(),
        prices,
        value: mu,
    }
}

/// Indices of the `k` largest positive values, ties broken by lower index.
fn top_k_positive(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).filter(|&i| values[i] > 0.0).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Best assortment of at most `capacity` items and its prices, over the
/// catalog described by `curves`.
pub fn optimal_assortment_and_prices(
    curves: &[&dyn UtilityCurve],
    capacity: usize,
    grid: &PriceGrid,
) -> Result<PricedAssortment> {
    if curves.is_empty() {
        return domain("catalog must contain at least one item");
    }
    if capacity == 0 {
        return domain("capacity must be at least 1");
    }
    let tables: Vec<PhiTable> = curves.iter().map(|c| PhiTable::new(*c, grid)).collect();
    Ok(optimize_tables(&tables, capacity, grid.p_max()))
}

pub(crate) fn optimize_tables(tables: &[PhiTable], capacity: usize, p_max: f64) -> PricedAssortment {
    let mut coarse = vec![0.0; tables.len()];
    let mut fine = vec![PhiValue::default(); tables.len()];
    let mu = solve_fixed_point(
        p_max,
        |mu| {
            for (s, t) in coarse.iter_mut().zip(tables) {
                *s = t.grid_phi(mu);
            }
            top_k_sum(&mut coarse, capacity)
        },
        |mu| {
            for (s, t) in fine.iter_mut().zip(tables) {
                *s = t.phi(mu);
            }
            let values: Vec<f64> = fine.iter().map(|p| p.value).collect();
            top_k_positive(&values, capacity)
                .into_iter()
                .fold((0.0, 0.0), |(v, w), i| (v + fine[i].value, w + fine[i].weight))
        },
    );
    let phis: Vec<PhiValue> = tables.iter().map(|t| t.phi(mu)).collect();
    let values: Vec<f64> = phis.iter().map(|p| p.value).collect();
    let mut items = top_k_positive(&values, capacity);
    items.sort_unstable();
    let prices = items.iter().map(|&i| phis[i].price).collect();
    PricedAssortment {
        items,
        prices,
        value: mu,
    }
}

/// Sum of the `k` largest positive entries. Reorders `values`.
fn top_k_sum(values: &mut [f64], k: usize) -> f64 {
    let k = k.min(values.len());
    if k < values.len() {
        values.select_nth_unstable_by(k, |a, b| b.total_cmp(a));
    }
    values[..k].iter().filter(|v| **v > 0.0).sum()
}

/// Single-item optimum of `p * sigmoid(intercept - slope * p)` on `[0, P]`.
///
/// The first-order condition `slope * p * (1 - q(p)) = 1` has a strictly
/// increasing left side, so its root is bracketed and found by bisection; if
/// the condition is still negative at `P` the optimum is the cap itself.
pub fn single_item_optimal_price(intercept: f64, slope: f64, p_max: f64) -> Result<(f64, f64)> {
    if !(slope > 0.0) {
        return domain(format!("price slope must be positive, got {slope}"));
    }
    let foc = |p: f64| {
        let q = 1.0 / (1.0 + (slope * p - intercept).exp());
        slope * p * (1.0 - q) - 1.0
    };
    let p = if foc(p_max) <= 0.0 {
        p_max
    } else {
        let (mut lo, mut hi) = (0.0, p_max);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if foc(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 * p_max.max(1.0) {
                break;
            }
        }
        0.5 * (lo + hi)
    };
    let q = 1.0 / (1.0 + (slope * p - intercept).exp());
    Ok((p, p * q))
}

/// Largest catalog the brute-force oracle accepts.
pub const ORACLE_MAX_ITEMS: usize = 8;

/// Exhaustive grid search over assortments and prices.
///
/// Every assortment with `|S| <= capacity` is visited. For `|S| <= 3` all
/// combinations of grid prices are enumerated; larger assortments use
/// per-item best-response ascent on the grid, restarted from five uniform
/// starting prices.
pub fn brute_force_joint_oracle(
    curves: &[&dyn UtilityCurve],
    capacity: usize,
    p_max: f64,
    grid_step: f64,
) -> Result<PricedAssortment> {
    let n = curves.len();
    if n > ORACLE_MAX_ITEMS {
        return Err(TjapError::Refused(format!(
            "brute-force oracle handles at most {ORACLE_MAX_ITEMS} items, got {n}"
        )));
    }
    if !(grid_step >= 1e-3) {
        return Err(TjapError::Refused(format!("grid step {grid_step} below 0.001")));
    }
    if !(p_max > 0.0) {
        return domain("price cap must be positive");
    }
    let n_pts = (p_max / grid_step).floor() as usize + 1;
    let prices: Vec<f64> = (0..n_pts).map(|k| k as f64 * grid_step).collect();
    let weights: Vec<Vec<f64>> = curves
        .iter()
        .map(|c| prices.iter().map(|&p| clamped_exp(c.eval(p))).collect())
        .collect();

    let mut best = PricedAssortment::empty();
    for size in 1..=capacity.min(n) {
        for subset in combinations(n, size) {
            let cand = if size <= 3 {
                exhaustive_prices(&subset, &weights, &prices)
            } else {
                ascent_prices(&subset, &weights, &prices)
            };
            if cand.value > best.value {
                best = cand;
            }
        }
    }
    Ok(best)
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::with_capacity(k), &mut out);
    out
}

fn exhaustive_prices(subset: &[usize], weights: &[Vec<f64>], prices: &[f64]) -> PricedAssortment {
    let w: Vec<&[f64]> = subset.iter().map(|&i| weights[i].as_slice()).collect();
    let pw: Vec<Vec<f64>> = w
        .iter()
        .map(|wi| wi.iter().zip(prices).map(|(w, p)| w * p).collect())
        .collect();
    let m = prices.len();
    let (value, idx) = match subset.len() {
        1 => (0..m).map(|a| (pw[0][a] / (1.0 + w[0][a]), vec![a])).fold(
            (f64::NEG_INFINITY, vec![]),
            |acc, c| if c.0 > acc.0 { c } else { acc },
        ),
        2 => (0..m)
            .into_par_iter()
            .map(|a| {
                let mut best = (f64::NEG_INFINITY, vec![]);
                for b in 0..m {
                    let v = (pw[0][a] + pw[1][b]) / (1.0 + w[0][a] + w[1][b]);
                    if v > best.0 {
                        best = (v, vec![a, b]);
                    }
                }
                best
            })
            .reduce(|| (f64::NEG_INFINITY, vec![]), pick_better),
        3 => (0..m)
            .into_par_iter()
            .map(|a| {
                let mut best = (f64::NEG_INFINITY, vec![]);
                for b in 0..m {
                    let num = pw[0][a] + pw[1][b];
                    let den = 1.0 + w[0][a] + w[1][b];
                    let (mut bv, mut bc) = (f64::NEG_INFINITY, 0);
                    for c in 0..m {
                        let v = (num + pw[2][c]) / (den + w[2][c]);
                        if v > bv {
                            bv = v;
                            bc = c;
                        }
                    }
                    if bv > best.0 {
                        best = (bv, vec![a, b, bc]);
                    }
                }
                best
            })
            .reduce(|| (f64::NEG_INFINITY, vec![]), pick_better),
        _ => unreachable!("exhaustive search is limited to three items"),
    };
    PricedAssortment {
        items: subset.to_vec(),
        prices: idx.iter().map(|&k| prices[k]).collect(),
        value,
    }
}

fn pick_better(a: (f64, Vec<usize>), b: (f64, Vec<usize>)) -> (f64, Vec<usize>) {
    // ties go to the lexicographically smaller price index vector
    if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
        b
    } else {
        a
    }
}

fn ascent_prices(subset: &[usize], weights: &[Vec<f64>], prices: &[f64]) -> PricedAssortment {
    let m = prices.len();
    let starts = [0, m / 4, m / 2, (3 * m) / 4, m - 1];
    let eval = |idx: &[usize]| {
        let ps: Vec<f64> = idx.iter().map(|&k| prices[k]).collect();
        let us: Vec<f64> = subset
            .iter()
            .zip(idx)
            .map(|(&i, &k)| weights[i][k].ln())
            .collect();
        revenue(&ps, &us)
    };
    let mut best = (f64::NEG_INFINITY, vec![]);
    for &s in &starts {
        let mut idx = vec![s; subset.len()];
        let mut val = eval(&idx);
        loop {
            let mut improved = false;
            for j in 0..subset.len() {
                let mut num = 0.0;
                let mut den = 1.0;
                for (jj, (&i, &k)) in subset.iter().zip(&idx).enumerate() {
                    if jj != j {
                        num += prices[k] * weights[i][k];
                        den += weights[i][k];
                    }
                }
                let wi = &weights[subset[j]];
                let (mut bk, mut bv) = (idx[j], val);
                for k in 0..m {
                    let v = (num + prices[k] * wi[k]) / (den + wi[k]);
                    if v > bv + 1e-15 {
                        bv = v;
                        bk = k;
                    }
                }
                if bk != idx[j] {
                    idx[j] = bk;
                    val = bv;
                    improved = true;
                }
            }
            if !improved {
                break;
            }
        }
        if val > best.0 {
            best = (val, idx);
        }
    }
    PricedAssortment {
        items: subset.to_vec(),
        prices: best.1.iter().map(|&k| prices[k]).collect(),
        value: best.0,
    }
}
