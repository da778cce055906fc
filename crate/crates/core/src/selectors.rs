//! Model-selection losses over cached Q-value estimates.
//!
//! Model-free selectors read only the dataset and the `Q(s, a)` / `Q(s', π)`
//! entries of a [`QCache`]. The regression-style selectors additionally read
//! the mixed-model backups `T_{M_j} Q_i`, and the naive model-based loss
//! samples next states from the candidate models directly.
//!
//! Every loss is an expectation under [`Weights`], so bootstrap replicates and
//! exact population expectations run through the same code.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SampleMode, Transition, Weights};
use crate::error::{Error, Result};
use crate::lstdq::{Normalizers, Variant};
use crate::mdp::{Simulator, TabularMdp};
use crate::qcache::QCache;
use crate::rng::{stream, tag};

/// Cell widths of the BVFT-style baseline, in units of `v_max`.
pub const DEFAULT_RESOLUTIONS: [f64; 4] = [0.02, 0.05, 0.1, 0.2];

/// Next-state samples per data point for the naive model loss.
pub const NAIVE_SAMPLES: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub enum Selector {
    TdSquared,
    AvgBellman,
    LstdTournament(Variant),
    /// BVFT-style baseline; a resolution of 0 groups only identical value pairs.
    Bvft(Vec<f64>),
    NaiveModelBased(usize),
    RegressionZitovsky,
    RegressionAntos,
    SignFlip,
    Random,
}

impl Selector {
    pub fn id(&self) -> &'static str {
        match self {
            Selector::TdSquared => "td_squared",
            Selector::AvgBellman => "avg_bellman",
            Selector::LstdTournament(_) => "lstd_tournament",
            Selector::Bvft(_) => "bvft",
            Selector::NaiveModelBased(_) => "naive_model_based",
            Selector::RegressionZitovsky => "regression_zitovsky",
            Selector::RegressionAntos => "regression_antos",
            Selector::SignFlip => "sign_flip",
            Selector::Random => "random",
        }
    }

    pub fn variant(&self) -> Option<Variant> {
        match self {
            Selector::LstdTournament(v) => Some(*v),
            _ => None,
        }
    }

    pub fn needs_backups(&self) -> bool {
        matches!(self, Selector::RegressionZitovsky | Selector::RegressionAntos | Selector::SignFlip)
    }

    pub fn needs_models(&self) -> bool {
        matches!(self, Selector::NaiveModelBased(_))
    }

    /// Every selector, with default settings and all tournament variants.
    pub fn all() -> Vec<Selector> {
        let mut out = vec![Selector::TdSquared, Selector::AvgBellman];
        out.extend(Variant::ALL.into_iter().map(Selector::LstdTournament));
        out.extend([
            Selector::Bvft(DEFAULT_RESOLUTIONS.to_vec()),
            Selector::NaiveModelBased(NAIVE_SAMPLES),
            Selector::RegressionZitovsky,
            Selector::RegressionAntos,
            Selector::SignFlip,
            Selector::Random,
        ]);
        out
    }

    /// Work that depends on the cache but not on the bootstrap weights.
    pub fn prepare(&self, input: &PrepareInput<'_>) -> Result<Prepared> {
        Ok(match self {
            Selector::Bvft(res) => Prepared::Bvft(BvftPartition::new(input.cache, res, input.v_max)?),
            Selector::NaiveModelBased(k) => {
                let models = input.models.ok_or_else(|| {
                    Error::InvalidArgument("naive_model_based needs the candidate models".into())
                })?;
                Prepared::Naive(naive_point_losses(models, input.data, *k, input.seed)?)
            }
            _ => Prepared::Nothing,
        })
    }

    pub fn losses(&self, ctx: &Context<'_>, prepared: &Prepared) -> Result<Losses> {
        let plain = |v: Vec<f64>| Losses { raw_losses: v.clone(), losses: v };
        check_inputs(ctx)?;
        let (cache, data, w) = (ctx.cache, ctx.data, ctx.weights);
        Ok(match (self, prepared) {
            (Selector::TdSquared, _) => plain(td_squared(cache, data, w)),
            (Selector::AvgBellman, _) => plain(avg_bellman(cache, data, w)),
            (Selector::LstdTournament(v), _) => plain(lstd_tournament(cache, data, w, *v, ctx.v_max)?),
            (Selector::Bvft(_), Prepared::Bvft(p)) => plain(p.losses(cache, data, w)?.losses),
            (Selector::Bvft(res), _) => plain(bvft(cache, data, w, res, ctx.v_max)?.losses),
            (Selector::NaiveModelBased(_), Prepared::Naive(points)) => plain(weighted_rows(points, cache.m(), w)),
            (Selector::NaiveModelBased(k), _) => {
                let models = ctx.models.ok_or_else(|| {
                    Error::InvalidArgument("naive_model_based needs the candidate models".into())
                })?;
                plain(naive_model_based(models, data, w, *k, ctx.seed)?)
            }
            (Selector::RegressionZitovsky, _) => plain(regression_zitovsky(cache, data, w)?.losses),
            (Selector::RegressionAntos, _) => {
                let r = regression_antos(cache, data, w)?;
                Losses { losses: r.losses, raw_losses: r.raw_losses }
            }
            (Selector::SignFlip, _) => plain(sign_flip(cache, data, w)?),
            (Selector::Random, _) => plain(random_losses(cache.m(), ctx.seed, ctx.stream_key)),
        })
    }

    pub fn select(
        &self,
        ctx: &Context<'_>,
        prepared: &Prepared,
        returns: &[f64],
        true_return: Option<f64>,
    ) -> Result<SelectorResult> {
        let Losses { losses, raw_losses } = self.losses(ctx, prepared)?;
        if returns.len() != losses.len() {
            return Err(Error::Dimension(format!("{} returns for {} candidates", returns.len(), losses.len())));
        }
        let chosen = argmin(&losses);
        let predicted_return = returns[chosen];
        Ok(SelectorResult {
            selector_id: self.id().to_string(),
            variant: self.variant(),
            losses,
            raw_losses,
            chosen,
            predicted_return,
            ope_error: true_return.map(|j| (predicted_return - j).abs()),
        })
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Selector::LstdTournament(v) => write!(f, "lstd_tournament:{}", v.name()),
            Selector::Bvft(res) => {
                let list: Vec<String> = res.iter().map(|r| r.to_string()).collect();
                write!(f, "bvft:{}", list.join(","))
            }
            Selector::NaiveModelBased(k) => write!(f, "naive_model_based:{k}"),
            other => f.write_str(other.id()),
        }
    }
}

impl FromStr for Selector {
    type Err = Error;

    /// `name[:argument]`, e.g. `lstd_tournament:vanilla`, `bvft:0.05,0.1`,
    /// `naive_model_based:32`.
    fn from_str(s: &str) -> Result<Selector> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let bad = |what: &str| Error::InvalidArgument(format!("selector {s:?}: {what}"));
        let no_arg = |sel: Selector| match arg {
            None => Ok(sel),
            Some(_) => Err(bad("takes no argument")),
        };
        match name {
            "td_squared" => no_arg(Selector::TdSquared),
            "avg_bellman" => no_arg(Selector::AvgBellman),
            "regression_zitovsky" => no_arg(Selector::RegressionZitovsky),
            "regression_antos" => no_arg(Selector::RegressionAntos),
            "sign_flip" => no_arg(Selector::SignFlip),
            "random" => no_arg(Selector::Random),
            "lstd_tournament" => match arg {
                None => Ok(Selector::LstdTournament(Variant::NormalizedDiff)),
                Some(v) => Variant::parse(v).map(Selector::LstdTournament).ok_or_else(|| bad("unknown variant")),
            },
            "bvft" => match arg {
                None => Ok(Selector::Bvft(DEFAULT_RESOLUTIONS.to_vec())),
                Some(list) => {
                    let res: std::result::Result<Vec<f64>, _> = list.split(',').map(|x| x.trim().parse()).collect();
                    let res = res.map_err(|_| bad("resolutions must be numbers"))?;
                    if res.is_empty() || res.iter().any(|&r| !r.is_finite() || r < 0.0) {
                        return Err(bad("resolutions must be non-negative"));
                    }
                    Ok(Selector::Bvft(res))
                }
            },
            "naive_model_based" => match arg {
                None => Ok(Selector::NaiveModelBased(NAIVE_SAMPLES)),
                Some(k) => match k.parse::<usize>() {
                    Ok(k) if k > 0 => Ok(Selector::NaiveModelBased(k)),
                    _ => Err(bad("sample count must be a positive integer")),
                },
            },
            _ => Err(bad("unknown selector")),
        }
    }
}

impl Serialize for Selector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Selector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub struct PrepareInput<'a> {
    pub cache: &'a QCache,
    pub data: &'a Dataset,
    pub v_max: f64,
    pub models: Option<&'a [TabularMdp]>,
    pub seed: u64,
}

pub enum Prepared {
    Nothing,
    Bvft(BvftPartition),
    /// Per-point naive losses, `[m x n]`.
    Naive(Vec<f64>),
}

/// Inputs of one loss evaluation.
#[derive(Clone, Copy)]
pub struct Context<'a> {
    pub cache: &'a QCache,
    pub data: &'a Dataset,
    pub weights: &'a Weights,
    pub v_max: f64,
    /// Candidate models in cache order, for model-based losses.
    pub models: Option<&'a [TabularMdp]>,
    pub seed: u64,
    /// Extra stream key words for randomized selectors.
    pub stream_key: &'a [u64],
}

fn check_inputs(ctx: &Context<'_>) -> Result<()> {
    let n = ctx.cache.n();
    if ctx.data.n() != n {
        return Err(Error::Dimension(format!("cache has {n} points, dataset {}", ctx.data.n())));
    }
    if ctx.cache.m() == 0 {
        return Err(Error::InvalidArgument("no candidates".into()));
    }
    if let Some(k) = ctx.weights.max_index() {
        if k >= n {
            return Err(Error::InvalidArgument(format!("weight index {k} outside dataset of {n}")));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Losses {
    /// Losses used for ranking.
    pub losses: Vec<f64>,
    /// Losses before any clipping.
    pub raw_losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorResult {
    pub selector_id: String,
    pub variant: Option<Variant>,
    pub losses: Vec<f64>,
    pub raw_losses: Vec<f64>,
    pub chosen: usize,
    pub predicted_return: f64,
    pub ope_error: Option<f64>,
}

/// Index of the smallest loss; ties go to the lowest index and NaN never wins.
pub fn argmin(losses: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in losses.iter().enumerate() {
        if l < losses[best] || (losses[best].is_nan() && !l.is_nan()) {
            best = i;
        }
    }
    best
}

fn td_error(cache: &QCache, data: &Dataset, i: usize, t: usize) -> f64 {
    cache.q_sa(i, t) - data.transitions[t].r - cache.manifest.discount * cache.q_next(i, t)
}

/// `E_D[(Q_i(s,a) - r - γ Q_i(s',π))²]`.
pub fn td_squared(cache: &QCache, data: &Dataset, weights: &Weights) -> Vec<f64> {
    (0..cache.m()).map(|i| weights.mean(|t| td_error(cache, data, i, t).powi(2))).collect()
}

/// `|E_D[Q_i(s,a) - r - γ Q_i(s',π)]|`.
pub fn avg_bellman(cache: &QCache, data: &Dataset, weights: &Weights) -> Vec<f64> {
    (0..cache.m()).map(|i| weights.mean(|t| td_error(cache, data, i, t)).abs()).collect()
}

/// Raw cross-fitted correlations `C[k][i] = E_D[½ (Q_k^A TD_i^B + Q_k^B TD_i^A)]`,
/// `[m x m]` row-major with the discriminator index `k` first. Row `m` (the
/// last) holds the constant discriminator.
pub fn raw_correlations(cache: &QCache, data: &Dataset, weights: &Weights) -> Result<Vec<f64>> {
    let h = cache.halves()?;
    let (m, n) = (cache.m(), cache.n());
    let gamma = cache.manifest.discount;
    let mut corr = vec![0.0; (m + 1) * m];
    let mut td_a = vec![0.0; m];
    let mut td_b = vec![0.0; m];
    for &(t, w) in &weights.entries {
        let r = data.transitions[t].r;
        for i in 0..m {
            td_a[i] = h.q_sa_a[i * n + t] - r - gamma * h.q_next_a[i * n + t];
            td_b[i] = h.q_sa_b[i * n + t] - r - gamma * h.q_next_b[i * n + t];
        }
        for k in 0..m {
            let (qa, qb) = (0.5 * w * h.q_sa_a[k * n + t], 0.5 * w * h.q_sa_b[k * n + t]);
            let row = &mut corr[k * m..(k + 1) * m];
            for i in 0..m {
                row[i] += qa * td_b[i] + qb * td_a[i];
            }
        }
        let row = &mut corr[m * m..];
        for i in 0..m {
            row[i] += 0.5 * w * (td_b[i] + td_a[i]);
        }
    }
    Ok(corr)
}

/// `max_{j ≠ i} max_k |E_D[φ_k · TD_i]|` over the two discriminators of the
/// pair feature `φ_{i,j}`. A lone candidate is tested against itself.
pub fn lstd_tournament(
    cache: &QCache,
    data: &Dataset,
    weights: &Weights,
    variant: Variant,
    v_max: f64,
) -> Result<Vec<f64>> {
    let m = cache.m();
    let corr = raw_correlations(cache, data, weights)?;
    let c = |k: usize, i: usize| corr[k * m + i];
    let norms = match variant {
        Variant::Vanilla => Normalizers::ones(m),
        _ => Normalizers::estimate(cache, weights, v_max),
    };
    Ok((0..m)
        .map(|i| {
            let own = c(i, i).abs() / norms.c[i];
            let partner = |j: usize| match variant {
                Variant::Vanilla => c(j, i).abs(),
                Variant::Normalized => c(j, i).abs() / norms.c[j],
                Variant::NormalizedDiff => (c(j, i) - c(i, i)).abs() / norms.c_diff[j * m + i],
            };
            (0..m).filter(|&j| j != i).map(partner).fold(own, f64::max)
        })
        .collect())
}

/// The tournament with the constant function as the only discriminator.
pub fn constant_discriminator_tournament(cache: &QCache, data: &Dataset, weights: &Weights) -> Result<Vec<f64>> {
    let m = cache.m();
    let corr = raw_correlations(cache, data, weights)?;
    Ok(corr[m * m..].iter().map(|x| x.abs()).collect())
}

/// Cell assignment of every data point for every candidate pair and resolution.
#[derive(Clone, Debug)]
pub struct BvftPartition {
    m: usize,
    pub resolutions: Vec<f64>,
    /// `[resolution][pair]`: cell index per data point and the number of cells.
    cells: Vec<Vec<(Vec<u32>, usize)>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BvftLosses {
    pub losses: Vec<f64>,
    /// `[resolution][i * m + j]`: projected loss of `Q_i` on the cells of `(Q_i, Q_j)`.
    pub per_resolution: Vec<Vec<f64>>,
}

fn pair_list(m: usize) -> Vec<(usize, usize)> {
    if m == 1 {
        return vec![(0, 0)];
    }
    (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).collect()
}

fn cell_key(x: f64, width: f64) -> u64 {
    if width > 0.0 {
        (x / width).floor() as i64 as u64
    } else {
        (x + 0.0).to_bits()
    }
}

impl BvftPartition {
    pub fn new(cache: &QCache, resolutions: &[f64], v_max: f64) -> Result<BvftPartition> {
        if resolutions.is_empty() {
            return Err(Error::InvalidArgument("bvft needs at least one resolution".into()));
        }
        if resolutions.iter().any(|&r| !r.is_finite() || r < 0.0) {
            return Err(Error::InvalidArgument("bvft resolutions must be non-negative".into()));
        }
        let (m, n) = (cache.m(), cache.n());
        let pairs = pair_list(m);
        let cells = resolutions
            .iter()
            .map(|&rho| {
                let width = rho * v_max;
                pairs
                    .iter()
                    .map(|&(i, j)| {
                        let mut keyed: Vec<((u64, u64), usize)> = (0..n)
                            .map(|t| ((cell_key(cache.q_sa(i, t), width), cell_key(cache.q_sa(j, t), width)), t))
                            .collect();
                        keyed.sort_unstable();
                        let mut ids = vec![0u32; n];
                        let mut count = 0usize;
                        for (pos, &(key, t)) in keyed.iter().enumerate() {
                            if pos > 0 && keyed[pos - 1].0 != key {
                                count += 1;
                            }
                            ids[t] = count as u32;
                        }
                        (ids, if n == 0 { 0 } else { count + 1 })
                    })
                    .collect()
            })
            .collect();
        Ok(BvftPartition { m, resolutions: resolutions.to_vec(), cells })
    }

    /// Projected residual `Σ_c W_c (mean_c Q_i - mean_c (r + γ Q_i(s',π)))²`
    /// per pair and resolution; per candidate the minimum over resolutions
    /// and then the maximum over partners.
    pub fn losses(&self, cache: &QCache, data: &Dataset, weights: &Weights) -> Result<BvftLosses> {
        let m = self.m;
        if cache.m() != m {
            return Err(Error::Dimension(format!("partition built for {m} candidates, cache has {}", cache.m())));
        }
        let pairs = pair_list(m);
        let mut per_resolution = Vec::with_capacity(self.resolutions.len());
        for cells in &self.cells {
            let mut pairwise = vec![f64::NAN; m * m];
            for (&(i, j), (ids, count)) in pairs.iter().zip(cells) {
                let mut mass = vec![0.0; *count];
                let mut sum_i = vec![0.0; *count];
                let mut sum_j = vec![0.0; *count];
                for &(t, w) in &weights.entries {
                    let c = ids[t] as usize;
                    mass[c] += w;
                    sum_i[c] += w * td_error(cache, data, i, t);
                    sum_j[c] += w * td_error(cache, data, j, t);
                }
                let proj = |sum: &[f64]| -> f64 {
                    mass.iter().zip(sum).filter(|(&w, _)| w > 0.0).map(|(&w, &s)| s * s / w).sum()
                };
                pairwise[i * m + j] = proj(&sum_i);
                pairwise[j * m + i] = proj(&sum_j);
            }
            per_resolution.push(pairwise);
        }
        let losses = (0..m)
            .map(|i| {
                let partners: Vec<usize> = if m == 1 { vec![0] } else { (0..m).filter(|&j| j != i).collect() };
                partners
                    .into_iter()
                    .map(|j| per_resolution.iter().map(|p| p[i * m + j]).fold(f64::INFINITY, f64::min))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        Ok(BvftLosses { losses, per_resolution })
    }
}

pub fn bvft(cache: &QCache, data: &Dataset, weights: &Weights, resolutions: &[f64], v_max: f64) -> Result<BvftLosses> {
    BvftPartition::new(cache, resolutions, v_max)?.losses(cache, data, weights)
}

fn id_key(id: &str) -> u64 {
    // FNV-1a, so streams follow the model rather than its position in a subset.
    id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Per-point `mean_k ‖x(s') - x(s̃_k)‖` with `s̃_k ~ P_i(·|s, a)`, `[m x n]`.
pub fn naive_point_losses(models: &[TabularMdp], data: &Dataset, samples: usize, seed: u64) -> Result<Vec<f64>> {
    if samples == 0 {
        return Err(Error::InvalidArgument("naive loss needs at least one sample".into()));
    }
    let mut out = Vec::with_capacity(models.len() * data.n());
    for model in models {
        data.check_model(model)?;
        let coords = model
            .coords
            .as_ref()
            .ok_or_else(|| Error::InvalidModel(format!("{} has no state coordinates", model.id)))?;
        let sim = Simulator::new(model);
        let key = id_key(&model.id);
        for (t, tr) in data.transitions.iter().enumerate() {
            let mut rng = stream(seed, &[tag::NAIVE, key, t as u64]);
            let target = coords[tr.s_next];
            let total: f64 = (0..samples)
                .map(|_| {
                    let x = coords[sim.step(tr.s, tr.a, &mut rng)];
                    ((x[0] - target[0]).powi(2) + (x[1] - target[1]).powi(2)).sqrt()
                })
                .sum();
            out.push(total / samples as f64);
        }
    }
    Ok(out)
}

fn weighted_rows(points: &[f64], m: usize, weights: &Weights) -> Vec<f64> {
    let n = points.len() / m;
    (0..m).map(|i| weights.mean(|t| points[i * n + t])).collect()
}

/// `E_{(s,a,s') ~ D, s̃ ~ P_i(s,a)} ‖x(s') - x(s̃)‖`.
pub fn naive_model_based(
    models: &[TabularMdp],
    data: &Dataset,
    weights: &Weights,
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let points = naive_point_losses(models, data, samples, seed)?;
    Ok(weighted_rows(&points, models.len(), weights))
}

fn backup_table(cache: &QCache) -> Result<&[f64]> {
    let b = cache.backups()?;
    if b.len() != cache.m() * cache.m() * cache.n() {
        return Err(Error::Dimension("backup tensor has the wrong size".into()));
    }
    Ok(b)
}

/// `E_D[(g - r - γ Q_i(s',π))²]` for every `g = T_{M_j} Q_i`, `[m x m]`.
fn regression_fits(cache: &QCache, data: &Dataset, weights: &Weights, b: &[f64]) -> Vec<f64> {
    let (m, n) = (cache.m(), cache.n());
    let gamma = cache.manifest.discount;
    let mut fits = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            fits[i * m + j] = weights.mean(|t| {
                let y = data.transitions[t].r + gamma * cache.q_next(i, t);
                (QCache::backup_at(b, m, n, i, j, t) - y).powi(2)
            });
        }
    }
    fits
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionLosses {
    pub losses: Vec<f64>,
    pub raw_losses: Vec<f64>,
    /// Index `j` of the fitted backup `T_{M_j} Q_i` per candidate.
    pub fitted: Vec<usize>,
}

/// Regress `r + γ Q_i(s',π)` onto `{T_{M_j} Q_i}_j`, then score
/// `E_D[(ĝ_i - Q_i)²]`.
pub fn regression_zitovsky(cache: &QCache, data: &Dataset, weights: &Weights) -> Result<RegressionLosses> {
    let b = backup_table(cache)?;
    let (m, n) = (cache.m(), cache.n());
    let fits = regression_fits(cache, data, weights, b);
    let fitted: Vec<usize> = (0..m).map(|i| argmin(&fits[i * m..(i + 1) * m])).collect();
    let losses: Vec<f64> = (0..m)
        .map(|i| weights.mean(|t| (QCache::backup_at(b, m, n, i, fitted[i], t) - cache.q_sa(i, t)).powi(2)))
        .collect();
    Ok(RegressionLosses { raw_losses: losses.clone(), losses, fitted })
}

/// TD-squared minus the best regression fit within `{T_{M_j} Q_i}_j`,
/// clipped at 0 for ranking.
pub fn regression_antos(cache: &QCache, data: &Dataset, weights: &Weights) -> Result<RegressionLosses> {
    let b = backup_table(cache)?;
    let m = cache.m();
    let fits = regression_fits(cache, data, weights, b);
    let td = td_squared(cache, data, weights);
    let fitted: Vec<usize> = (0..m).map(|i| argmin(&fits[i * m..(i + 1) * m])).collect();
    let raw_losses: Vec<f64> = (0..m).map(|i| td[i] - fits[i * m + fitted[i]]).collect();
    Ok(RegressionLosses { losses: raw_losses.iter().map(|&x| x.max(0.0)).collect(), raw_losses, fitted })
}

/// `max_j E_D[sgn(Q_i - T_{M_j} Q_i) · (Q_i(s,a) - r - γ Q_i(s',π))]` with `sgn(0) = 1`.
pub fn sign_flip(cache: &QCache, data: &Dataset, weights: &Weights) -> Result<Vec<f64>> {
    let b = backup_table(cache)?;
    let (m, n) = (cache.m(), cache.n());
    Ok((0..m)
        .map(|i| {
            (0..m)
                .map(|j| {
                    weights.mean(|t| {
                        let q = cache.q_sa(i, t);
                        let sign = if q - QCache::backup_at(b, m, n, i, j, t) >= 0.0 { 1.0 } else { -1.0 };
                        sign * td_error(cache, data, i, t)
                    })
                })
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}

/// Independent uniform losses, so the argmin is a uniform random candidate.
pub fn random_losses(m: usize, seed: u64, key: &[u64]) -> Vec<f64> {
    let mut full = Vec::with_capacity(key.len() + 1);
    full.push(tag::RANDOM_SELECT);
    full.extend_from_slice(key);
    let mut rng = stream(seed, &full);
    (0..m).map(|_| rng.random::<f64>()).collect()
}

/// Centre state with four corner neighbours at `(±1, ±1)`: the true model
/// moves to a uniform corner, the rival stays at the centre. Returns
/// `[truth, rival]` and `n` transitions from the centre sampled from the truth.
pub fn naive_counterexample(n: usize, seed: u64) -> Result<(Vec<TabularMdp>, Dataset)> {
    let coords = vec![[0.0, 0.0], [1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]];
    let build = |id: &str, centre_row: [f64; 5]| -> Result<TabularMdp> {
        let mut p = vec![0.0; 25];
        p[..5].copy_from_slice(&centre_row);
        for s in 1..5 {
            p[s * 5 + s] = 1.0;
        }
        TabularMdp::new(id, 5, 1, p, vec![0.0; 5], 0.9, vec![1.0, 0.0, 0.0, 0.0, 0.0], 1.0)?.with_coords(coords.clone())
    };
    let truth = build("corners", [0.0, 0.25, 0.25, 0.25, 0.25])?;
    let rival = build("stay", [1.0, 0.0, 0.0, 0.0, 0.0])?;
    let sim = Simulator::new(&truth);
    let mut rng = stream(seed, &[tag::DATASET]);
    let transitions = (0..n)
        .map(|index| Transition { s: 0, a: 0, r: 0.0, s_next: sim.step(0, 0, &mut rng), index })
        .collect();
    let data = Dataset {
        transitions,
        behavior_id: "only_action".into(),
        seed,
        mode: SampleMode::Iid,
        source_model_id: truth.id.clone(),
        num_states: 5,
        num_actions: 1,
    };
    Ok((vec![truth, rival], data))
}
