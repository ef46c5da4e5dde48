//! Multinomial-logit choice model: features, utilities, choice probabilities,
//! sampling, expected revenue and the global price cap.
//!
//! The outside (no-purchase) option always sits at index 0 of probability and
//! one-hot vectors. Offered items follow in assortment order.

use nalgebra::DVector;
use rand::Rng;

use crate::error::{domain, Result};

/// Systematic utilities are clamped to `[-UTILITY_CLAMP, UTILITY_CLAMP]`
/// before exponentiation.
pub const UTILITY_CLAMP: f64 = 40.0;

#[inline]
pub(crate) fn clamped_exp(v: f64) -> f64 {
    v.clamp(-UTILITY_CLAMP, UTILITY_CLAMP).exp()
}

/// Item covariates with every entry in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(x: Vec<f64>) -> Result<Self> {
        if x.is_empty() {
            return domain("feature vector must have at least one entry");
        }
        if let Some(v) = x.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return domain(format!("feature entry {v} outside [-1, 1]"));
        }
        Ok(Self(x))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// `(x, -p x)`: the feature that multiplies the stacked parameter `(theta, gamma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedFeature {
    values: Vec<f64>,
    price: f64,
}

impl AugmentedFeature {
    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn price(&self) -> f64 {
        self.price
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }
}

/// Builds the augmented feature after checking `0 <= p <= p_max`.
pub fn augment_feature(x: &FeatureVector, p: f64, p_max: f64) -> Result<AugmentedFeature> {
    if !(0.0..=p_max).contains(&p) {
        return domain(format!("price {p} outside [0, {p_max}]"));
    }
    Ok(AugmentedFeature {
        values: augment(x.as_slice(), p),
        price: p,
    })
}

/// Unchecked augmentation used on hot paths where prices come from the grid.
pub fn augment(x: &[f64], p: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * x.len());
    out.extend_from_slice(x);
    out.extend(x.iter().map(|v| -p * v));
    out
}

/// Stacked preference and price-sensitivity parameters `(theta, gamma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(DVector<f64>);

impl ParamVector {
    /// Wraps a stacked vector of even length `2d`.
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if values.is_empty() || !values.len().is_multiple_of(2) {
            return domain(format!("parameter length {} is not 2d with d >= 1", values.len()));
        }
        Ok(Self(values))
    }

    pub fn from_parts(theta: &[f64], gamma: &[f64]) -> Result<Self> {
        if theta.len() != gamma.len() {
            return domain("theta and gamma lengths differ");
        }
        Self::new(DVector::from_iterator(
            2 * theta.len(),
            theta.iter().chain(gamma).copied(),
        ))
    }

    pub fn zeros(d: usize) -> Self {
        Self(DVector::zeros(2 * d))
    }

    /// Feature dimension `d`; the vector itself has `2d` entries.
    pub fn feature_dim(&self) -> usize {
        self.0.len() / 2
    }

    pub fn theta(&self) -> &[f64] {
        &self.0.as_slice()[..self.feature_dim()]
    }

    pub fn gamma(&self) -> &[f64] {
        &self.0.as_slice()[self.feature_dim()..]
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    /// Utility intercept `<x, theta>` and price slope `<x, gamma>` for one item,
    /// so that `v(p) = intercept - slope * p`.
    pub fn linear_utility(&self, x: &[f64]) -> (f64, f64) {
        let d = self.feature_dim();
        let s = self.0.as_slice();
        let mut a = 0.0;
        let mut b = 0.0;
        for j in 0..d {
            a += x[j] * s[j];
            b += x[j] * s[d + j];
        }
        (a, b)
    }

    pub fn utility(&self, x: &[f64], p: f64) -> f64 {
        let (a, b) = self.linear_utility(x);
        a - b * p
    }
}

/// A set of distinct catalog indices of size at most `K`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assortment(Vec<usize>);

impl Assortment {
    pub fn new(items: Vec<usize>, catalog_size: usize, capacity: usize) -> Result<Self> {
        if items.len() > capacity {
            return domain(format!(
                "assortment of {} exceeds capacity {capacity}",
                items.len()
            ));
        }
        for (k, &i) in items.iter().enumerate() {
            if i >= catalog_size {
                return domain(format!("item {i} outside catalog of {catalog_size}"));
            }
            if items[..k].contains(&i) {
                return domain(format!("item {i} listed twice"));
            }
        }
        Ok(Self(items))
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn items(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Result of one customer visit. `slot` 0 is the outside option; slot `k >= 1`
/// is the `k`-th offered item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChoiceOutcome {
    pub slot: usize,
}

impl ChoiceOutcome {
    pub fn outside() -> Self {
        Self { slot: 0 }
    }

    pub fn is_purchase(&self) -> bool {
        self.slot > 0
    }

    /// Catalog index of the purchased item, if any.
    pub fn item(&self, assortment: &Assortment) -> Option<usize> {
        (self.slot > 0).then(|| assortment.items()[self.slot - 1])
    }

    /// One-hot vector over `{outside} ∪ S`.
    pub fn one_hot(&self, assortment_len: usize) -> Vec<f64> {
        let mut y = vec![0.0; assortment_len + 1];
        y[self.slot] = 1.0;
        y
    }
}

/// Choice probabilities `(q_0, q_1, ..., q_|S|)` with the outside option first.
pub fn choice_probabilities(utilities: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(utilities.len() + 1);
    out.push(1.0);
    let mut denom = 1.0;
    for &v in utilities {
        let e = clamped_exp(v);
        denom += e;
        out.push(e);
    }
    for q in &mut out {
        *q /= denom;
    }
    out
}

/// Categorical draw by inverse CDF against a uniform `u` in `[0, 1)`.
pub fn sample_choice_from_uniform(probabilities: &[f64], u: f64) -> ChoiceOutcome {
    let mut acc = 0.0;
    for (slot, q) in probabilities.iter().enumerate() {
        acc += q;
        if u < acc {
            return ChoiceOutcome { slot };
        }
    }
    // u landed in the rounding gap above the last partial sum
    let slot = probabilities.iter().rposition(|&q| q > 0.0).unwrap_or(0);
    ChoiceOutcome { slot }
}

pub fn sample_choice<R: Rng + ?Sized>(probabilities: &[f64], rng: &mut R) -> ChoiceOutcome {
    sample_choice_from_uniform(probabilities, rng.random::<f64>())
}

/// Expected revenue `sum_i p_i q_i` of an offer.
pub fn expected_revenue(assortment: &Assortment, prices: &[f64], utilities: &[f64]) -> Result<f64> {
    if prices.len() != assortment.len() || utilities.len() != assortment.len() {
        return domain(format!(
            "assortment has {} items but {} prices and {} utilities",
            assortment.len(),
            prices.len(),
            utilities.len()
        ));
    }
    Ok(revenue(prices, utilities))
}

pub(crate) fn revenue(prices: &[f64], utilities: &[f64]) -> f64 {
    let q = choice_probabilities(utilities);
    prices.iter().zip(&q[1..]).map(|(p, q)| p * q).sum()
}

/// Principal branch of Lambert W for `z >= 0`, by Newton iteration on
/// `w e^w = z`.
pub fn lambert_w0(z: f64) -> Result<f64> {
    if !(z >= 0.0) || !z.is_finite() {
        return domain(format!("lambert_w0 needs finite z >= 0, got {z}"));
    }
    if z == 0.0 {
        return Ok(0.0);
    }
    let mut w = if z < 1.0 {
        z / (1.0 + z)
    } else {
        let l = z.ln();
        (l - l.ln().max(0.0)).max(0.5)
    };
    for _ in 0..100 {
        let ew = w.exp();
        let f = w * ew - z;
        let step = f / (ew * (w + 1.0));
        w -= step;
        if step.abs() <= 1e-10 * (1.0 + w.abs()) {
            return Ok(w);
        }
    }
    Ok(w)
}

/// Common upper bound on optimal prices: `P = (W(K e^M) + 1) / L0`, where `M`
/// bounds the zero-price utility and `L0` is the price-sensitivity floor.
pub fn price_cap(max_zero_price_utility: f64, capacity: usize, sensitivity_floor: f64) -> Result<f64> {
    if !(sensitivity_floor > 0.0) {
        return domain(format!(
            "sensitivity floor must be positive, got {sensitivity_floor}"
        ));
    }
    if capacity == 0 {
        return domain("capacity must be at least 1");
    }
    let z = capacity as f64 * max_zero_price_utility.exp();
    Ok((lambert_w0(z)? + 1.0) / sensitivity_floor)
}
