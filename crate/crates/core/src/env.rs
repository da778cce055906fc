//! Parametric gridworld families, target-policy ladders and grid sanity checks.
//!
//! A world is a `width x height` grid with four move actions. Two orthogonal
//! perturbations generate a family of related MDPs: `noise` replaces the
//! chosen action by a uniformly random one, and `drift` pushes the agent one
//! extra cell down after a move.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mdp::{exact_return, optimal_q, Policy, TabularMdp};

pub const NUM_MOVES: usize = 4;
const MOVES: [(i64, i64); NUM_MOVES] = [(0, -1), (1, 0), (0, 1), (-1, 0)];
const DOWN: usize = 2;
/// Scale of the distance-shaped step reward; the goal pays 1 per step.
const SHAPING: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldLayout {
    pub width: usize,
    pub height: usize,
    pub goal: [usize; 2],
    #[serde(default)]
    pub pits: Vec<[usize; 2]>,
    pub starts: Vec<[usize; 2]>,
    pub discount: f64,
}

impl Default for WorldLayout {
    fn default() -> Self {
        WorldLayout {
            width: 8,
            height: 8,
            goal: [7, 0],
            pits: vec![[3, 7], [4, 7], [5, 7], [6, 7], [7, 7], [3, 4], [4, 4]],
            starts: vec![[0, 7], [0, 6]],
            discount: 0.95,
        }
    }
}

impl WorldLayout {
    pub fn num_cells(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn cell(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn xy(&self, cell: usize) -> (usize, usize) {
        (cell % self.width, cell / self.width)
    }

    fn in_bounds(&self, p: [usize; 2]) -> bool {
        p[0] < self.width && p[1] < self.height
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("empty world".into()));
        }
        if !self.in_bounds(self.goal) {
            return Err(Error::InvalidArgument("degenerate world: goal outside the grid".into()));
        }
        if self.pits.contains(&self.goal) {
            return Err(Error::InvalidArgument("degenerate world: goal cell is a pit".into()));
        }
        if self.starts.is_empty() {
            return Err(Error::InvalidArgument("world has no start cell".into()));
        }
        for p in self.pits.iter().chain(&self.starts) {
            if !self.in_bounds(*p) {
                return Err(Error::InvalidArgument(format!("cell {p:?} outside the grid")));
            }
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(Error::InvalidArgument(format!("discount {} outside [0, 1)", self.discount)));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON of the layout.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("layout serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    fn shift(&self, cell: usize, mv: usize) -> usize {
        let (x, y) = self.xy(cell);
        let (dx, dy) = MOVES[mv];
        let nx = x as i64 + dx;
        let ny = y as i64 + dy;
        if nx < 0 || ny < 0 || nx >= self.width as i64 || ny >= self.height as i64 {
            cell
        } else {
            self.cell(nx as usize, ny as usize)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvParams {
    /// Probability of an extra downward push after each move.
    pub drift: f64,
    /// Probability that the chosen action is replaced by a uniform one.
    pub noise: f64,
    #[serde(default)]
    pub world: WorldLayout,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Drift,
    Noise,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Drift => "drift",
            Axis::Noise => "noise",
        }
    }
}

impl EnvParams {
    pub fn get(&self, axis: Axis) -> f64 {
        match axis {
            Axis::Drift => self.drift,
            Axis::Noise => self.noise,
        }
    }

    pub fn with(&self, axis: Axis, value: f64) -> EnvParams {
        let mut p = self.clone();
        match axis {
            Axis::Drift => p.drift = value,
            Axis::Noise => p.noise = value,
        }
        p
    }
}

/// Builds the gridworld MDP for `params`.
pub fn make_world(params: &EnvParams) -> Result<TabularMdp> {
    let w = &params.world;
    w.validate()?;
    for (name, v) in [("drift", params.drift), ("noise", params.noise)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!("{name} = {v} outside [0, 1]")));
        }
    }
    let ns = w.num_cells();
    let goal = w.cell(w.goal[0], w.goal[1]);
    let mut terminal = vec![false; ns];
    terminal[goal] = true;
    for p in &w.pits {
        terminal[w.cell(p[0], p[1])] = true;
    }
    let max_dist = (w.width + w.height - 2).max(1) as f64;

    let mut transition = vec![0.0; ns * NUM_MOVES * ns];
    let mut reward = vec![0.0; ns * NUM_MOVES];
    for s in 0..ns {
        let (x, y) = w.xy(s);
        let shaped = if s == goal {
            1.0
        } else if terminal[s] {
            0.0
        } else {
            let d = x.abs_diff(w.goal[0]) + y.abs_diff(w.goal[1]);
            SHAPING * (1.0 - d as f64 / max_dist)
        };
        for a in 0..NUM_MOVES {
            reward[s * NUM_MOVES + a] = shaped;
            let row = &mut transition[(s * NUM_MOVES + a) * ns..(s * NUM_MOVES + a + 1) * ns];
            if terminal[s] {
                row[s] = 1.0;
                continue;
            }
            for (e, dir) in (0..NUM_MOVES).enumerate() {
                let mut q = params.noise / NUM_MOVES as f64;
                if e == a {
                    q += 1.0 - params.noise;
                }
                if q == 0.0 {
                    continue;
                }
                let c1 = w.shift(s, dir);
                if terminal[c1] || params.drift == 0.0 {
                    row[c1] += q;
                } else {
                    row[c1] += q * (1.0 - params.drift);
                    row[w.shift(c1, DOWN)] += q * params.drift;
                }
            }
        }
    }
    // Re-normalize away accumulated rounding so rows sum to 1 within 1e-12.
    for row in transition.chunks_mut(ns) {
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= z);
    }
    let mut d0 = vec![0.0; ns];
    for st in &w.starts {
        d0[w.cell(st[0], st[1])] += 1.0 / w.starts.len() as f64;
    }
    let coords = (0..ns)
        .map(|s| {
            let (x, y) = w.xy(s);
            [x as f64, y as f64]
        })
        .collect();
    let id = format!("world_d{}_n{}", params.drift, params.noise);
    TabularMdp::new(id, ns, NUM_MOVES, transition, reward, w.discount, d0, 1.0)?.with_coords(coords)
}

/// `LIN(start, stop, count)`: `count` evenly spaced values including both ends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub start: f64,
    pub stop: f64,
    pub count: usize,
}

impl GridSpec {
    pub fn values(&self) -> Result<Vec<f64>> {
        if self.count == 0 {
            return Err(Error::InvalidArgument("grid count must be at least 1".into()));
        }
        if self.count == 1 {
            return Ok(vec![self.start]);
        }
        let step = (self.stop - self.start) / (self.count - 1) as f64;
        Ok((0..self.count)
            .map(|k| if k + 1 == self.count { self.stop } else { self.start + step * k as f64 })
            .collect())
    }
}

#[derive(Clone, Debug)]
pub struct Grid {
    pub axis: Axis,
    pub values: Vec<f64>,
    pub models: Vec<TabularMdp>,
    /// One entry per value that had to be clamped into `[0, 1]`.
    pub warnings: Vec<String>,
}

/// Serializable description of a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridManifest {
    pub axis: Axis,
    pub values: Vec<f64>,
    pub model_ids: Vec<String>,
    pub layout_hash: String,
    pub base: EnvParams,
    pub warnings: Vec<String>,
}

impl Grid {
    pub fn manifest(&self, base: &EnvParams) -> GridManifest {
        GridManifest {
            axis: self.axis,
            values: self.values.clone(),
            model_ids: self.models.iter().map(|m| m.id.clone()).collect(),
            layout_hash: base.world.hash(),
            base: base.clone(),
            warnings: self.warnings.clone(),
        }
    }
}

pub fn grid_model_id(axis: Axis, index: usize) -> String {
    format!("{}_{index:02}", axis.name())
}

/// Builds one model per grid value, varying only `axis`.
pub fn make_grid(base: &EnvParams, axis: Axis, spec: &GridSpec) -> Result<Grid> {
    let raw = spec.values()?;
    let mut values = Vec::with_capacity(raw.len());
    let mut warnings = Vec::new();
    for v in raw {
        let c = v.clamp(0.0, 1.0);
        if c != v {
            let msg = format!("{} value {v} clamped to {c}", axis.name());
            log::warn!("{msg}");
            warnings.push(msg);
        }
        values.push(c);
    }
    let models = values
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let mut m = make_world(&base.with(axis, v))?;
            m.id = grid_model_id(axis, k);
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Grid { axis, values, models, warnings })
}

/// Softmax of `q / temperature` per state.
pub fn softmax_policy(id: impl Into<String>, q: &[f64], ns: usize, na: usize, temperature: f64) -> Result<Policy> {
    let mut dist = Vec::with_capacity(ns * na);
    for s in 0..ns {
        let row = &q[s * na..(s + 1) * na];
        let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = row.iter().map(|v| ((v - top) / temperature).exp()).collect();
        let z: f64 = w.iter().sum();
        dist.extend(w.iter().map(|x| x / z));
    }
    Policy::new(id, ns, na, dist)
}

/// Temperature ladder used for target policies, highest first, in units of `v_max`.
pub const TEMPERATURE_HIGH: f64 = 0.07;
pub const TEMPERATURE_LOW: f64 = 0.002;

pub fn temperature_ladder(count: usize, v_max: f64) -> Vec<f64> {
    (0..count)
        .map(|k| {
            let frac = if count > 1 { k as f64 / (count - 1) as f64 } else { 0.0 };
            v_max * TEMPERATURE_HIGH * (TEMPERATURE_LOW / TEMPERATURE_HIGH).powf(frac)
        })
        .collect()
}

pub fn target_policy_id(k: usize) -> String {
    format!("target_{k:02}")
}

/// Softmax policies over the optimal action values of `reference`, ordered
/// from most to least stochastic.
pub fn make_target_policies(reference: &TabularMdp, count: usize) -> Result<Vec<Policy>> {
    if count == 0 {
        return Err(Error::InvalidArgument("need at least one target policy".into()));
    }
    let q = optimal_q(reference);
    temperature_ladder(count, reference.v_max())
        .into_iter()
        .enumerate()
        .map(|(k, t)| softmax_policy(target_policy_id(k), &q, reference.num_states, reference.num_actions, t))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SanityReport {
    pub model_ids: Vec<String>,
    pub policy_ids: Vec<String>,
    /// `returns[p][m] = J_{M_m}(π_p)`.
    pub returns: Vec<Vec<f64>>,
    pub threshold: f64,
    /// Range of `J` across models, per policy.
    pub range_across_models: Vec<f64>,
    /// Range of `J` across policies, per model.
    pub range_across_policies: Vec<f64>,
    pub degenerate_in_models: bool,
    pub degenerate_in_policies: bool,
}

impl SanityReport {
    pub fn passed(&self) -> bool {
        !self.degenerate_in_models && !self.degenerate_in_policies
    }
}

fn range(xs: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    hi - lo
}

/// Exact `J_M(π)` matrix with flags for grids where returns barely vary.
pub fn sanity_check_grid(models: &[TabularMdp], policies: &[Policy]) -> Result<SanityReport> {
    if models.is_empty() || policies.is_empty() {
        return Err(Error::InvalidArgument("sanity check needs models and policies".into()));
    }
    let returns = policies
        .iter()
        .map(|p| models.iter().map(|m| exact_return(m, p)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let v_max = models.iter().map(|m| m.v_max()).fold(0.0, f64::max);
    let threshold = 0.05 * v_max;
    let range_across_models: Vec<f64> = returns.iter().map(|row| range(row.iter().cloned())).collect();
    let range_across_policies: Vec<f64> =
        (0..models.len()).map(|m| range(returns.iter().map(|row| row[m]))).collect();
    Ok(SanityReport {
        model_ids: models.iter().map(|m| m.id.clone()).collect(),
        policy_ids: policies.iter().map(|p| p.id.clone()).collect(),
        degenerate_in_models: range_across_models.iter().any(|&r| r < threshold),
        degenerate_in_policies: range_across_policies.iter().any(|&r| r < threshold),
        returns,
        threshold,
        range_across_models,
        range_across_policies,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(drift: f64, noise: f64) -> EnvParams {
        EnvParams { drift, noise, world: WorldLayout::default() }
    }

    #[test]
    fn noiseless_world_is_deterministic() {
        let m = make_world(&params(0.0, 0.0)).unwrap();
        for row in m.transition.chunks(m.num_states) {
            assert_eq!(row.iter().filter(|&&p| p > 0.0).count(), 1);
        }
    }

    #[test]
    fn full_noise_makes_actions_irrelevant() {
        let m = make_world(&params(0.3, 1.0)).unwrap();
        for s in 0..m.num_states {
            for a in 1..m.num_actions {
                assert_eq!(m.p_row(s, a), m.p_row(s, 0));
            }
        }
    }

    #[test]
    fn world_is_deterministic_function_of_params() {
        let a = make_world(&params(0.2, 0.4)).unwrap();
        let b = make_world(&params(0.2, 0.4)).unwrap();
        assert_eq!(a, b);
        assert!(a.transition.iter().zip(&b.transition).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn degenerate_world_rejected() {
        let mut p = params(0.1, 0.1);
        p.world.goal = [9, 9];
        assert!(make_world(&p).is_err());
        let mut p = params(0.1, 0.1);
        p.world.pits.push(p.world.goal);
        assert!(make_world(&p).is_err());
    }

    #[test]
    fn lin_grid() {
        let spec = GridSpec { start: 0.0, stop: 0.7, count: 15 };
        let g = make_grid(&params(0.1, 0.0), Axis::Noise, &spec).unwrap();
        assert_eq!(g.models.len(), 15);
        assert!((g.values[7] - 0.35).abs() < 1e-15);
        assert!(g.values.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(g.models[3].id, "noise_03");

        let single = make_grid(&params(0.1, 0.0), Axis::Drift, &GridSpec { start: 0.3, stop: 0.3, count: 1 }).unwrap();
        let mut direct = make_world(&params(0.3, 0.0)).unwrap();
        direct.id = single.models[0].id.clone();
        assert_eq!(single.models[0], direct);
    }

    #[test]
    fn out_of_range_grid_values_are_clamped() {
        let g = make_grid(&params(0.1, 0.0), Axis::Drift, &GridSpec { start: 0.5, stop: 1.5, count: 3 }).unwrap();
        assert_eq!(g.values, vec![0.5, 1.0, 1.0]);
        assert_eq!(g.warnings.len(), 1);
    }

    #[test]
    fn target_ladder_extremes() {
        let m = make_world(&params(0.1, 0.1)).unwrap();
        let q = optimal_q(&m);
        let hot = softmax_policy("hot", &q, m.num_states, 4, 1e9).unwrap();
        assert!(hot.action_dist.iter().all(|&p| (p - 0.25).abs() < 1e-6));
        let cold = softmax_policy("cold", &q, m.num_states, 4, 1e-9).unwrap();
        for s in 0..m.num_states {
            let row = &q[s * 4..s * 4 + 4];
            let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ties = row.iter().filter(|&&v| v == best).count();
            if ties == 1 {
                assert!(cold.probs(s).iter().any(|&p| p > 1.0 - 1e-9));
            }
        }
        let ladder = make_target_policies(&m, 10).unwrap();
        assert_eq!(ladder.len(), 10);
        assert_eq!(ladder[0].id, "target_00");
    }

    #[test]
    fn sanity_flags() {
        let m = make_world(&params(0.1, 0.1)).unwrap();
        let pols = make_target_policies(&m, 3).unwrap();
        let rep = sanity_check_grid(&[m.clone(), m.clone(), m.clone()], &pols).unwrap();
        assert!(rep.degenerate_in_models);
        let rep = sanity_check_grid(std::slice::from_ref(&m), &[pols[2].clone(), pols[2].clone()]).unwrap();
        assert!(rep.degenerate_in_policies);
        for (p, row) in pols.iter().zip(&sanity_check_grid(std::slice::from_ref(&m), &pols).unwrap().returns) {
            assert!((row[0] - exact_return(&m, p).unwrap()).abs() < 1e-10);
        }
    }
}
