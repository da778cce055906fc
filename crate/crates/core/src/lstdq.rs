//! Two-dimensional LSTDQ over pairs of candidate Q-functions.
//!
//! For candidates `Q_i, Q_j` the feature map `φ_{i,j}` makes whichever of the
//! two is `Q^π` linearly realizable, so the LSTDQ residual `‖Aθ - b‖_∞` of the
//! coefficient vector representing `Q_i` scores `Q_i`. Coordinates of that
//! residual are correlations between a discriminator and the TD error of
//! `Q_i`.
//!
//! Monte-Carlo estimates enter products only across independent rollout
//! halves: every moment is the symmetrized cross product
//! `½ (φ_A ψ_Bᵀ + φ_B ψ_Aᵀ)`, so the estimate of `E[φ ψᵀ]` stays unbiased even
//! when both factors come from the same candidate.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Weights};
use crate::error::{Error, Result};
use crate::qcache::QCache;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// `[Q_i, Q_j]`
    Vanilla,
    /// `[Q_i / c_i, Q_j / c_j]`
    Normalized,
    /// `[Q_i / c_i, (Q_j - Q_i) / c_{j,i}]`
    NormalizedDiff,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Vanilla, Variant::Normalized, Variant::NormalizedDiff];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::Normalized => "normalized",
            Variant::NormalizedDiff => "normalized_diff",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }
}

/// Relative floor applied to estimated standard deviations, in units of `v_max`.
pub const NORMALIZER_FLOOR: f64 = 1e-8;

/// Discriminator scales estimated on the weighted data: `c[i]` is the
/// standard deviation of `Q_i(s, a)` and `c_diff[j * m + i]` that of
/// `Q_j - Q_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizers {
    pub m: usize,
    pub c: Vec<f64>,
    pub c_diff: Vec<f64>,
}

fn weighted_sd(weights: &Weights, f: impl Fn(usize) -> f64) -> f64 {
    let mean = weights.mean(&f);
    weights.mean(|t| (f(t) - mean).powi(2)).max(0.0).sqrt()
}

impl Normalizers {
    pub fn estimate(cache: &QCache, weights: &Weights, v_max: f64) -> Normalizers {
        let m = cache.m();
        let floor = NORMALIZER_FLOOR * v_max;
        let c = (0..m).map(|i| weighted_sd(weights, |t| cache.q_sa(i, t)).max(floor)).collect();
        let mut c_diff = vec![1.0; m * m];
        for j in 0..m {
            for i in 0..m {
                if i != j {
                    c_diff[j * m + i] =
                        weighted_sd(weights, |t| cache.q_sa(j, t) - cache.q_sa(i, t)).max(floor);
                }
            }
        }
        Normalizers { m, c, c_diff }
    }

    pub fn ones(m: usize) -> Normalizers {
        Normalizers { m, c: vec![1.0; m], c_diff: vec![1.0; m * m] }
    }
}

/// Feature map for the ordered pair `(i, j)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaturePair {
    pub variant: Variant,
    pub i: usize,
    pub j: usize,
    pub norm_ci: f64,
    /// `c_j` for `Normalized`, `c_{j,i}` for `NormalizedDiff`, 1 for `Vanilla`.
    pub norm_cij: f64,
}

impl FeaturePair {
    pub fn new(variant: Variant, i: usize, j: usize, norms: &Normalizers) -> Result<FeaturePair> {
        if i == j {
            return Err(Error::InvalidArgument(format!("pair ({i}, {j}) compares a candidate with itself")));
        }
        if i >= norms.m || j >= norms.m {
            return Err(Error::InvalidArgument(format!("pair ({i}, {j}) out of range")));
        }
        let (norm_ci, norm_cij) = match variant {
            Variant::Vanilla => (1.0, 1.0),
            Variant::Normalized => (norms.c[i], norms.c[j]),
            Variant::NormalizedDiff => (norms.c[i], norms.c_diff[j * norms.m + i]),
        };
        if !(norm_ci > 0.0 && norm_cij > 0.0) {
            return Err(Error::InvalidArgument("normalizers must be positive".into()));
        }
        Ok(FeaturePair { variant, i, j, norm_ci, norm_cij })
    }

    /// Feature vector from the two candidates' values at one point.
    #[inline]
    pub fn features(&self, qi: f64, qj: f64) -> [f64; 2] {
        match self.variant {
            Variant::Vanilla => [qi, qj],
            Variant::Normalized => [qi / self.norm_ci, qj / self.norm_cij],
            Variant::NormalizedDiff => [qi / self.norm_ci, (qj - qi) / self.norm_cij],
        }
    }

    /// Coefficients `θ` with `φ_{i,j}ᵀ θ = Q_i` (`first`) or `Q_j`.
    pub fn theta(&self, first: bool) -> [f64; 2] {
        match (self.variant, first) {
            (Variant::Vanilla, true) => [1.0, 0.0],
            (Variant::Vanilla, false) => [0.0, 1.0],
            (Variant::Normalized, true) => [self.norm_ci, 0.0],
            (Variant::Normalized, false) => [0.0, self.norm_cij],
            (Variant::NormalizedDiff, true) => [self.norm_ci, 0.0],
            (Variant::NormalizedDiff, false) => [self.norm_ci, self.norm_cij],
        }
    }
}

pub type Mat2 = [[f64; 2]; 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstdMoments {
    pub sigma: Mat2,
    pub sigma_cross: Mat2,
    pub a_mat: Mat2,
    pub b_vec: [f64; 2],
    pub sigma_min_a: f64,
}

impl LstdMoments {
    pub fn from_parts(sigma: Mat2, sigma_cross: Mat2, b_vec: [f64; 2], discount: f64) -> LstdMoments {
        let mut a_mat = [[0.0; 2]; 2];
        for r in 0..2 {
            for c in 0..2 {
                a_mat[r][c] = sigma[r][c] - discount * sigma_cross[r][c];
            }
        }
        LstdMoments { sigma, sigma_cross, a_mat, b_vec, sigma_min_a: smallest_singular_value(&a_mat) }
    }

    /// `Aθ - b`.
    pub fn residual(&self, theta: [f64; 2]) -> [f64; 2] {
        let a = &self.a_mat;
        [
            a[0][0] * theta[0] + a[0][1] * theta[1] - self.b_vec[0],
            a[1][0] * theta[0] + a[1][1] * theta[1] - self.b_vec[1],
        ]
    }
}

/// Smallest singular value of a 2x2 matrix, as `|det| / σ_max`.
pub fn smallest_singular_value(a: &Mat2) -> f64 {
    let fro2 = a[0][0].powi(2) + a[0][1].powi(2) + a[1][0].powi(2) + a[1][1].powi(2);
    let det = (a[0][0] * a[1][1] - a[0][1] * a[1][0]).abs();
    let disc = (fro2 * fro2 - 4.0 * det * det).max(0.0).sqrt();
    let s_max = ((fro2 + disc) / 2.0).sqrt();
    if s_max == 0.0 {
        0.0
    } else {
        det / s_max
    }
}

/// Per-point inputs for one pair: features at `(s, a)` and `(s', π)` from both halves.
struct PairPoint {
    phi_a: [f64; 2],
    phi_b: [f64; 2],
    next_a: [f64; 2],
    next_b: [f64; 2],
    r: f64,
}

fn pair_points<'a>(
    cache: &'a QCache,
    data: &'a Dataset,
    pair: &'a FeaturePair,
) -> Result<impl Fn(usize) -> PairPoint + 'a> {
    let h = cache.halves()?;
    let n = cache.n();
    if data.n() != n {
        return Err(Error::Dimension(format!("cache has {n} points, dataset {}", data.n())));
    }
    if pair.i >= cache.m() || pair.j >= cache.m() {
        return Err(Error::InvalidArgument("pair index outside the cache".into()));
    }
    let (i, j) = (pair.i * n, pair.j * n);
    Ok(move |t: usize| PairPoint {
        phi_a: pair.features(h.q_sa_a[i + t], h.q_sa_a[j + t]),
        phi_b: pair.features(h.q_sa_b[i + t], h.q_sa_b[j + t]),
        next_a: pair.features(h.q_next_a[i + t], h.q_next_a[j + t]),
        next_b: pair.features(h.q_next_b[i + t], h.q_next_b[j + t]),
        r: data.transitions[t].r,
    })
}

fn check_weights(weights: &Weights, n: usize) -> Result<()> {
    match weights.max_index() {
        Some(k) if k >= n => Err(Error::InvalidArgument(format!("weight index {k} outside dataset of {n}"))),
        _ => Ok(()),
    }
}

/// Empirical `Σ`, `Σ^cr`, `A`, `b` under `weights`.
pub fn empirical_moments(
    cache: &QCache,
    data: &Dataset,
    pair: &FeaturePair,
    weights: &Weights,
) -> Result<LstdMoments> {
    check_weights(weights, cache.n())?;
    let point = pair_points(cache, data, pair)?;
    let mut sigma = [[0.0; 2]; 2];
    let mut cross = [[0.0; 2]; 2];
    let mut b = [0.0; 2];
    for &(t, w) in &weights.entries {
        let p = point(t);
        for r in 0..2 {
            for c in 0..2 {
                sigma[r][c] += w * 0.5 * (p.phi_a[r] * p.phi_b[c] + p.phi_b[r] * p.phi_a[c]);
                cross[r][c] += w * 0.5 * (p.phi_a[r] * p.next_b[c] + p.phi_b[r] * p.next_a[c]);
            }
            b[r] += w * 0.5 * (p.phi_a[r] + p.phi_b[r]) * p.r;
        }
    }
    Ok(LstdMoments::from_parts(sigma, cross, b, cache.manifest.discount))
}

/// `‖Aθ - b‖_∞`.
pub fn lstdq_param_loss(moments: &LstdMoments, theta: [f64; 2]) -> f64 {
    let r = moments.residual(theta);
    r[0].abs().max(r[1].abs())
}

/// `|E_D[d_k · (Q_c(s,a) - r - γ Q_c(s',π))]|` for both discriminators `d_k`
/// of the pair and both candidates `c ∈ {i, j}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairCorrelation {
    /// Discriminator correlations with the TD error of `Q_i`.
    pub for_i: [f64; 2],
    /// Discriminator correlations with the TD error of `Q_j`.
    pub for_j: [f64; 2],
}

/// Signed version of [`PairCorrelation`] (before the absolute value).
pub fn signed_pair_correlation(
    cache: &QCache,
    data: &Dataset,
    pair: &FeaturePair,
    weights: &Weights,
) -> Result<([f64; 2], [f64; 2])> {
    check_weights(weights, cache.n())?;
    let point = pair_points(cache, data, pair)?;
    let gamma = cache.manifest.discount;
    let (ti, tj) = (pair.theta(true), pair.theta(false));
    let dot = |x: [f64; 2], th: [f64; 2]| x[0] * th[0] + x[1] * th[1];
    let mut for_i = [0.0; 2];
    let mut for_j = [0.0; 2];
    for &(t, w) in &weights.entries {
        let p = point(t);
        let td = |phi: [f64; 2], next: [f64; 2], th| dot(phi, th) - p.r - gamma * dot(next, th);
        let (td_i_a, td_i_b) = (td(p.phi_a, p.next_a, ti), td(p.phi_b, p.next_b, ti));
        let (td_j_a, td_j_b) = (td(p.phi_a, p.next_a, tj), td(p.phi_b, p.next_b, tj));
        for k in 0..2 {
            for_i[k] += w * 0.5 * (p.phi_a[k] * td_i_b + p.phi_b[k] * td_i_a);
            for_j[k] += w * 0.5 * (p.phi_a[k] * td_j_b + p.phi_b[k] * td_j_a);
        }
    }
    Ok((for_i, for_j))
}

pub fn pairwise_td_correlation(
    cache: &QCache,
    data: &Dataset,
    pair: &FeaturePair,
    weights: &Weights,
) -> Result<PairCorrelation> {
    let (i, j) = signed_pair_correlation(cache, data, pair, weights)?;
    Ok(PairCorrelation { for_i: [i[0].abs(), i[1].abs()], for_j: [j[0].abs(), j[1].abs()] })
}

pub fn sigma_min_diagnostic(moments: &LstdMoments) -> f64 {
    smallest_singular_value(&moments.a_mat)
}

/// `min_{i ≠ star} σ_min(A_{i, star})`, the coverage quantity of the
/// tournament guarantee when candidate `star` is `Q^π`.
pub fn tournament_sigma_min(
    cache: &QCache,
    data: &Dataset,
    variant: Variant,
    weights: &Weights,
    star: usize,
    v_max: f64,
) -> Result<f64> {
    let norms = Normalizers::estimate(cache, weights, v_max);
    let mut best = f64::INFINITY;
    for i in (0..cache.m()).filter(|&i| i != star) {
        let pair = FeaturePair::new(variant, i, star, &norms)?;
        best = best.min(sigma_min_diagnostic(&empirical_moments(cache, data, &pair, weights)?));
    }
    Ok(best)
}
