//! Decision rules: the optimistic transfer learner and the baselines built
//! from the same episodic machinery.

mod learner;

pub use learner::{AlgorithmKind, DecisionRule, EpisodeState, EpisodicLearner, EstimatorKind, LearnerSpec};

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{domain, Result};
use crate::estimation::Observation;
use crate::geometry::FisherMatrix;
use crate::mnl::{Assortment, ParamVector};

/// What the seller posts in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub assortment: Assortment,
    /// One price per offered item, in assortment order.
    pub prices: Vec<f64>,
    pub forced: bool,
}

impl Action {
    pub fn empty() -> Self {
        Self {
            assortment: Assortment::empty(),
            prices: Vec::new(),
            forced: false,
        }
    }
}

/// The select/observe contract a simulated run drives.
pub trait Policy: Send {
    fn select_action(&mut self, t: usize, contexts: &[Vec<f64>]) -> Result<Action>;

    /// Feeds back the target observation of round `t` and the source
    /// observations generated in the same round.
    fn observe(&mut self, t: usize, target: &Observation, sources: &[Observation]) -> Result<()>;

    /// Current episode index (0 while warming up).
    fn episode(&self) -> usize;

    /// Frozen parameter estimate, if any.
    fn estimate(&self) -> Option<&ParamVector>;
}

/// Cached factorization of `W + lambda0 I` with the two radii.
#[derive(Debug, Clone)]
pub struct BonusGeometry {
    chol: Cholesky<f64, Dyn>,
    pub alpha: f64,
    pub beta: f64,
}

impl BonusGeometry {
    pub fn new(w: &FisherMatrix, lambda0: f64, alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha >= 0.0 && beta >= 0.0) {
            return domain("bonus radii must be nonnegative");
        }
        let n = w.dim();
        let reg = w.matrix() + DMatrix::identity(n, n) * lambda0;
        let chol = reg.cholesky().ok_or_else(|| {
            crate::TjapError::Domain("regularized geometry is not positive definite".into())
        })?;
        Ok(Self { chol, alpha, beta })
    }

    /// `x^T (W + lambda0 I)^{-1} x`.
    pub fn mahalanobis_sq(&self, x: &[f64]) -> f64 {
        let v = nalgebra::DVector::from_column_slice(x);
        let z = self.chol.solve(&v);
        v.dot(&z).max(0.0)
    }

    pub fn bonus(&self, x: &[f64]) -> f64 {
        let inf = x.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        self.alpha * self.mahalanobis_sq(x).sqrt() + self.beta * inf
    }

    /// Bonus of `x(p) = (x, -p x)` along the whole price grid. The Mahalanobis
    /// term is the square root of a quadratic in `p`, so only two solves are
    /// needed per item.
    pub fn bonus_curve(&self, x: &[f64], prices: &[f64]) -> Vec<f64> {
        let d = x.len();
        let mut a = nalgebra::DVector::zeros(2 * d);
        let mut b = nalgebra::DVector::zeros(2 * d);
        for j in 0..d {
            a[j] = x[j];
            b[d + j] = -x[j];
        }
        let za = self.chol.solve(&a);
        let zb = self.chol.solve(&b);
        let (qa, qab, qb) = (a.dot(&za), a.dot(&zb), b.dot(&zb));
        let inf = x.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        prices
            .iter()
            .map(|&p| {
                let quad = (qa + 2.0 * p * qab + p * p * qb).max(0.0);
                self.alpha * quad.sqrt() + self.beta * inf * p.abs().max(1.0)
            })
            .collect()
    }
}

/// `alpha |x|_{(W + lambda0 I)^{-1}} + beta |x|_inf`.
pub fn two_radius_bonus(x: &[f64], w: &FisherMatrix, lambda0: f64, alpha: f64, beta: f64) -> Result<f64> {
    if x.len() != w.dim() {
        return domain("feature and geometry dimensions differ");
    }
    Ok(BonusGeometry::new(w, lambda0, alpha, beta)?.bonus(x))
}

/// Tightest curve below `bar_v` that decreases at rate at least `l0`:
/// `min_{j <= k} bar_v[j] - l0 (p[k] - p[j])`, in one forward pass.
pub fn envelope(bar_v: &[f64], prices: &[f64], l0: f64) -> Result<Vec<f64>> {
    if bar_v.len() != prices.len() {
        return domain("curve and grid lengths differ");
    }
    if prices.windows(2).any(|w| w[1] < w[0]) {
        return domain("price grid must be sorted ascending");
    }
    let mut running = f64::INFINITY;
    Ok(bar_v
        .iter()
        .zip(prices)
        .map(|(&v, &p)| {
            running = running.min(v + l0 * p);
            running - l0 * p
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bonus_examples() {
        let eye = FisherMatrix::zeros(2);
        assert_eq!(two_radius_bonus(&[0.3, 0.4], &eye, 1.0, 0.0, 0.0).unwrap(), 0.0);
        assert!((two_radius_bonus(&[1.0, 0.0], &eye, 1.0, 2.0, 0.0).unwrap() - 2.0).abs() < 1e-15);
        // W + I = diag(4, 1)
        let w = FisherMatrix::new(DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
            3.0, 0.0,
        ])))
        .unwrap();
        assert!((two_radius_bonus(&[1.0, 0.0], &w, 1.0, 1.0, 3.0).unwrap() - 3.5).abs() < 1e-14);
    }

    #[test]
    fn bonus_curve_matches_pointwise_bonus() {
        let m = DMatrix::from_row_slice(
            4,
            4,
            &[
                2.0, 0.3, 0.1, 0.0, 0.3, 1.5, 0.0, 0.2, 0.1, 0.0, 1.0, 0.4, 0.0, 0.2, 0.4, 3.0,
            ],
        );
        let g = BonusGeometry::new(&FisherMatrix::new(m).unwrap(), 0.5, 1.3, 0.7).unwrap();
        let x = [0.4, 0.9];
        let prices = [0.0, 0.5, 1.0, 1.7];
        let curve = g.bonus_curve(&x, &prices);
        for (p, b) in prices.iter().zip(curve) {
            let direct = g.bonus(&crate::mnl::augment(&x, *p));
            assert!((direct - b).abs() < 1e-12);
        }
    }

    #[test]
    fn envelope_examples() {
        let prices: Vec<f64> = (0..11).map(|k| k as f64 * 0.1).collect();
        let flat = vec![2.0; 11];
        let env = envelope(&flat, &prices, 0.5).unwrap();
        for (e, p) in env.iter().zip(&prices) {
            assert!((e - (2.0 - 0.5 * p)).abs() < 1e-15);
        }
        let line: Vec<f64> = prices.iter().map(|p| 2.0 - 0.5 * p).collect();
        let env = envelope(&line, &prices, 0.5).unwrap();
        for (e, v) in env.iter().zip(&line) {
            assert!((e - v).abs() < 1e-15);
        }
        assert!(envelope(&[1.0, 2.0], &[1.0, 0.0], 1.0).is_err());
    }
}
