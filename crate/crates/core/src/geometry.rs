//! Fisher information bookkeeping: per-round increments, rolling per-market
//! matrices, pooled episodic geometry and the forced-exploration gate.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result, TjapError};
use crate::linalg::{asymmetry, dot, jacobi_eigenvalues};
use crate::mnl::choice_probabilities;

/// Symmetry tolerance for Fisher matrices, relative to the largest entry.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Off-diagonal stopping tolerance of the Jacobi sweeps.
pub const JACOBI_TOL: f64 = 1e-10;

/// Symmetric positive semidefinite `2d x 2d` information matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherMatrix(DMatrix<f64>);

impl FisherMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self(DMatrix::zeros(dim, dim))
    }

    /// Wraps `m` after checking squareness and symmetry.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&m)?;
        Ok(Self(m))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn add_assign(&mut self, other: &FisherMatrix) {
        self.0 += &other.0;
    }

    /// Adds `scale * x x^T`. The lower triangle mirrors the upper one so the
    /// result stays exactly symmetric.
    pub fn add_outer(&mut self, x: &[f64], scale: f64) {
        let n = self.dim();
        for a in 0..n {
            let xa = scale * x[a];
            for (b, &xb) in x.iter().enumerate().take(n).skip(a) {
                let v = xa * xb;
                self.0[(a, b)] += v;
                if b != a {
                    self.0[(b, a)] += v;
                }
            }
        }
    }

    pub fn min_eigenvalue(&self) -> Result<f64> {
        min_eigenvalue(&self.0)
    }

    pub fn set_zero(&mut self) {
        self.0.fill(0.0);
    }
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return domain(format!("matrix is {}x{}, expected square", m.nrows(), m.ncols()));
    }
    let scale = m.amax().max(1.0);
    let asym = asymmetry(m);
    if asym > SYMMETRY_TOL * scale {
        return domain(format!("matrix is not symmetric (asymmetry {asym:.3e})"));
    }
    Ok(())
}

/// Fisher information of one MNL round at `nu`:
/// `sum_i q_i x_i x_i^T - (sum_i q_i x_i)(sum_i q_i x_i)^T`.
///
/// `features` holds the augmented feature of each offered item. An empty
/// assortment contributes nothing.
pub fn fisher_increment(features: &[&[f64]], nu: &[f64]) -> FisherMatrix {
    let dim = nu.len();
    let mut out = FisherMatrix::zeros(dim);
    if features.is_empty() {
        return out;
    }
    let utilities: Vec<f64> = features.iter().map(|x| dot(x, nu)).collect();
    let q = choice_probabilities(&utilities);
    let mut mean = vec![0.0; dim];
    for (k, x) in features.iter().enumerate() {
        out.add_outer(x, q[k + 1]);
        for j in 0..dim {
            mean[j] += q[k + 1] * x[j];
        }
    }
    out.add_outer(&mean, -1.0);
    out
}

/// `V_0 + sum_h w_h V_h` with summation in market order.
pub fn pool_geometry(
    target: &FisherMatrix,
    sources: &[FisherMatrix],
    weights: &[f64],
) -> Result<FisherMatrix> {
    if sources.len() != weights.len() {
        return domain(format!(
            "{} source matrices but {} weights",
            sources.len(),
            weights.len()
        ));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0)) {
        return domain(format!("market weight must be nonnegative, got {w}"));
    }
    let mut w_mat = target.0.clone();
    for (v, &w) in sources.iter().zip(weights) {
        if v.dim() != target.dim() {
            return domain("source and target matrices have different dimensions");
        }
        if w == 1.0 {
            w_mat += &v.0;
        } else if w != 0.0 {
            w_mat += &v.0 * w;
        }
    }
    Ok(FisherMatrix(w_mat))
}

/// Weight `1 / (1 + chi2)` of a source market.
pub fn market_weight(chi2: f64) -> Result<f64> {
    if !(chi2 >= 0.0) {
        return domain(format!("chi-square mismatch must be nonnegative, got {chi2}"));
    }
    Ok(1.0 / (1.0 + chi2))
}

pub const MISMATCH_BINS: usize = 16;

/// Binned chi-square divergence `chi2(P_target || P_source)` of per-coordinate
/// marginals on `[0,1]`, averaged over coordinates. Each bin count gets one
/// pseudo-observation.
pub fn chi2_mismatch(target: &[Vec<f64>], source: &[Vec<f64>]) -> Result<f64> {
    let d = match (target.first(), source.first()) {
        (Some(a), Some(b)) if a.len() == b.len() && !a.is_empty() => a.len(),
        _ => return domain("mismatch needs nonempty samples of equal dimension"),
    };
    let histogram = |rows: &[Vec<f64>], j: usize| -> Result<Vec<f64>> {
        let mut counts = vec![1.0; MISMATCH_BINS];
        for r in rows {
            let v = *r
                .get(j)
                .ok_or_else(|| TjapError::Domain("ragged context rows".into()))?;
            let bin = ((v.clamp(0.0, 1.0) * MISMATCH_BINS as f64) as usize).min(MISMATCH_BINS - 1);
            counts[bin] += 1.0;
        }
        let total: f64 = counts.iter().sum();
        Ok(counts.into_iter().map(|c| c / total).collect())
    };
    let mut sum = 0.0;
    for j in 0..d {
        let p = histogram(target, j)?;
        let q = histogram(source, j)?;
        sum += p.iter().zip(&q).map(|(p, q)| (p - q) * (p - q) / q).sum::<f64>();
    }
    Ok(sum / d as f64)
}

/// Smallest eigenvalue of a symmetric matrix by cyclic Jacobi sweeps.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    check_symmetric(m)?;
    Ok(jacobi_eigenvalues(m, JACOBI_TOL)?.first().copied().unwrap_or(0.0))
}

/// Constants of the forced-exploration gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub kappa: f64,
    /// Covariance floor of augmented features; `None` takes the scenario's value.
    pub c_min: Option<f64>,
    /// `Lambda_m = c_lambda_cap * c_min * |T_m|`.
    pub c_lambda_cap: f64,
    /// Upper bound on forced rounds per episode as a fraction of its length.
    pub forced_fraction_cap: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            kappa: 0.1,
            c_min: None,
            c_lambda_cap: 0.05,
            forced_fraction_cap: 1.0 / 32.0,
        }
    }
}

pub const DEFAULT_C_MIN: f64 = 0.25;

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0) {
            return Err(TjapError::Config(format!(
                "kappa must be positive, got {}",
                self.kappa
            )));
        }
        if let Some(c) = self.c_min {
            if !(c > 0.0) {
                return Err(TjapError::Config(format!("c_min must be positive, got {c}")));
            }
        }
        if !(self.c_lambda_cap > 0.0) {
            return Err(TjapError::Config("c_lambda_cap must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.forced_fraction_cap) {
            return Err(TjapError::Config("forced_fraction_cap must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// `kappa^2 K q C_min / 2`.
pub fn gate_threshold(q_prev: f64, kappa: f64, capacity: usize, c_min: f64) -> f64 {
    kappa * kappa * capacity as f64 * q_prev * c_min / 2.0
}

/// True when the episode is within `q_prev` rounds of its end and the target
/// curvature is still below the threshold. The eigenvalue is only computed
/// inside the window.
pub fn gate_is_open(
    v_target: &FisherMatrix,
    q_prev: f64,
    kappa: f64,
    capacity: usize,
    c_min: f64,
    rounds_left: usize,
) -> Result<bool> {
    if !(q_prev >= 0.0) {
        return domain(format!("q must be nonnegative, got {q_prev}"));
    }
    if rounds_left as f64 > q_prev {
        return Ok(false);
    }
    Ok(v_target.min_eigenvalue()? <= gate_threshold(q_prev, kappa, capacity, c_min))
}

/// `ceil(max{2 Lambda/(kappa^2 K C), 8 K d (1 + P^2)/(kappa^2 K C) log(2d/eta)})`.
///
/// Saturates at `u64::MAX` for extreme inputs.
pub fn forced_exploration_length(
    lambda_m: f64,
    kappa: f64,
    capacity: usize,
    c_min: f64,
    d: usize,
    p_max: f64,
    eta: f64,
) -> Result<u64> {
    if !(lambda_m > 0.0 && kappa > 0.0 && c_min > 0.0 && eta > 0.0) || capacity == 0 || d == 0 {
        return domain("forced exploration length needs positive inputs");
    }
    if !(p_max >= 0.0) {
        return domain(format!("price cap must be nonnegative, got {p_max}"));
    }
    let denom = kappa * kappa * capacity as f64 * c_min;
    let first = 2.0 * lambda_m / denom;
    let second =
        8.0 * capacity as f64 * d as f64 * (1.0 + p_max * p_max) / denom * (2.0 * d as f64 / eta).ln();
    Ok(first.max(second).ceil() as u64)
}

/// `Lambda_m = c * C_min * |T_m|`.
pub fn lambda_schedule(c_lambda_cap: f64, c_min: f64, episode_len: usize) -> f64 {
    c_lambda_cap * c_min * episode_len as f64
}

/// Rolling per-market information and the frozen pooled geometry.
#[derive(Debug, Clone)]
pub struct GeometryState {
    /// Index 0 is the target market.
    pub rolling: Vec<FisherMatrix>,
    pub frozen: FisherMatrix,
    pub weights: Vec<f64>,
}

impl GeometryState {
    pub fn new(dim: usize, sources: usize) -> Self {
        Self {
            rolling: vec![FisherMatrix::zeros(dim); sources + 1],
            frozen: FisherMatrix::zeros(dim),
            weights: vec![1.0; sources],
        }
    }

    pub fn target(&self) -> &FisherMatrix {
        &self.rolling[0]
    }

    pub fn add(&mut self, market: usize, increment: &FisherMatrix) -> Result<()> {
        let v = self
            .rolling
            .get_mut(market)
            .ok_or_else(|| TjapError::Domain(format!("unknown market {market}")))?;
        v.add_assign(increment);
        Ok(())
    }

    /// Freezes `W = V_0 + sum_h w_h V_h` and zeroes the rolling matrices.
    pub fn freeze(&mut self) -> Result<&FisherMatrix> {
        self.frozen = pool_geometry(&self.rolling[0], &self.rolling[1..], &self.weights)?;
        for v in &mut self.rolling {
            v.set_zero();
        }
        Ok(&self.frozen)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn increment_examples() {
        let nu = [0.0, 0.0];
        assert_eq!(fisher_increment(&[], &nu), FisherMatrix::zeros(2));
        let e1 = [1.0, 0.0];
        let f = fisher_increment(&[&e1], &nu);
        assert!((f.matrix()[(0, 0)] - 0.25).abs() < 1e-15);
        assert_eq!(f.matrix()[(1, 1)], 0.0);
    }

    #[test]
    fn pool_examples() {
        let a = FisherMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 2.0])).unwrap();
        let b = FisherMatrix::new(DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 1.0])).unwrap();
        let c = FisherMatrix::new(DMatrix::identity(2, 2)).unwrap();
        let plain = pool_geometry(&a, &[b.clone(), c.clone()], &[1.0, 1.0]).unwrap();
        assert_eq!(plain.matrix(), &(a.matrix() + b.matrix() + c.matrix()));
        let none = pool_geometry(&a, &[b.clone(), c.clone()], &[0.0, 0.0]).unwrap();
        assert_eq!(none, a);
        let weighted = pool_geometry(&a, &[b.clone(), c.clone()], &[2.0, 0.5]).unwrap();
        assert_eq!(
            weighted.matrix(),
            &(a.matrix() + b.matrix() * 2.0 + c.matrix() * 0.5)
        );
        assert!(pool_geometry(&a, &[b], &[-1.0]).is_err());
    }

    #[test]
    fn weight_examples() {
        assert_eq!(market_weight(0.0).unwrap(), 1.0);
        assert_eq!(market_weight(1.0).unwrap(), 0.5);
        assert!(market_weight(1e300).unwrap() < 1e-299);
        assert!(market_weight(-0.1).is_err());
    }

    #[test]
    fn mismatch_zero_for_identical_samples() {
        let rows: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64 / 50.0, 0.3]).collect();
        assert_eq!(chi2_mismatch(&rows, &rows).unwrap(), 0.0);
        let shifted: Vec<Vec<f64>> = rows.iter().map(|r| vec![r[0] * 0.1, 0.9]).collect();
        assert!(chi2_mismatch(&rows, &shifted).unwrap() > 0.5);
    }

    #[test]
    fn min_eigenvalue_examples() {
        assert!((min_eigenvalue(&DMatrix::identity(4, 4)).unwrap() - 1.0).abs() < 1e-15);
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]));
        assert_eq!(min_eigenvalue(&d).unwrap(), 1.0);
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1e-3, 1.0]);
        assert!(min_eigenvalue(&asym).is_err());
    }

    #[test]
    fn gate_examples() {
        let zero = FisherMatrix::zeros(2);
        assert!(!gate_is_open(&zero, 3.0, 0.1, 5, 0.5, 4).unwrap());
        assert!(gate_is_open(&zero, 3.0, 0.1, 5, 0.5, 3).unwrap());
        assert!((gate_threshold(20.0, 0.1, 5, 0.5) - 0.25).abs() < 1e-15);
        let v = FisherMatrix::new(DMatrix::identity(2, 2) * 0.3).unwrap();
        assert!(!gate_is_open(&v, 20.0, 0.1, 5, 0.5, 1).unwrap());
    }

    #[test]
    fn forced_length_examples() {
        assert_eq!(
            forced_exploration_length(1.0, 1.0, 1, 1.0, 1, 0.0, 2.0).unwrap(),
            2
        );
        // independent re-evaluation of both branches
        let first = 2.0 * 10.0 / (0.01 * 5.0 * 0.5);
        let second = 8.0 * 5.0 * 10.0 * 5.0 / (0.01 * 5.0 * 0.5) * (20.0_f64 / 0.01).ln();
        assert!(second > first);
        let q = forced_exploration_length(10.0, 0.1, 5, 0.5, 10, 2.0, 0.01).unwrap();
        assert_eq!(q, second.ceil() as u64);
        assert_eq!(q, 608_073);
    }

    #[test]
    fn forced_length_first_branch_is_linear() {
        // log(2d/eta) = 0 isolates the first branch
        let a = forced_exploration_length(3.0, 0.5, 2, 0.4, 1, 1.0, 2.0).unwrap();
        let b = forced_exploration_length(6.0, 0.5, 2, 0.4, 1, 1.0, 2.0).unwrap();
        assert_eq!(a, 30);
        assert_eq!(b, 60);
    }

    #[test]
    fn freeze_resets_rolling() {
        let mut g = GeometryState::new(2, 1);
        let inc = fisher_increment(&[&[1.0, 0.5]], &[0.1, -0.2]);
        g.add(0, &inc).unwrap();
        g.add(1, &inc).unwrap();
        let w = g.freeze().unwrap().clone();
        assert_eq!(w.matrix(), &(inc.matrix() * 2.0));
        assert!(g.rolling.iter().all(|v| v.matrix().iter().all(|&x| x == 0.0)));
        assert!(g.add(2, &inc).is_err());
    }
}
