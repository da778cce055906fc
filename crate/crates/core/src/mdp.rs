//! Finite MDPs, exact dynamic-programming oracles and Monte-Carlo simulation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PROB_TOL: f64 = 1e-12;

/// A finite MDP with dense transition and reward tables.
///
/// `transition` is indexed `[s][a][s']` and `reward` is indexed `[s][a]`, both
/// flattened row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub id: String,
    pub num_states: usize,
    pub num_actions: usize,
    pub transition: Vec<f64>,
    pub reward: Vec<f64>,
    pub discount: f64,
    pub initial_dist: Vec<f64>,
    pub r_max: f64,
    /// Optional embedding of states in the plane, used by distance-based losses.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coords: Option<Vec<[f64; 2]>>,
}

fn check_distribution(p: &[f64], what: impl Fn() -> String) -> std::result::Result<(), String> {
    if p.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(format!("{} has a negative or non-finite entry", what()));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > PROB_TOL {
        return Err(format!("{} sums to {total}", what()));
    }
    Ok(())
}

impl TabularMdp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: impl Into<String>,
        num_states: usize,
        num_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        discount: f64,
        initial_dist: Vec<f64>,
        r_max: f64,
    ) -> Result<Self> {
        let m = TabularMdp {
            id: id.into(),
            num_states,
            num_actions,
            transition,
            reward,
            discount,
            initial_dist,
            r_max,
            coords: None,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn with_coords(mut self, coords: Vec<[f64; 2]>) -> Result<Self> {
        if coords.len() != self.num_states {
            return Err(Error::Dimension(format!(
                "{} coordinates for {} states",
                coords.len(),
                self.num_states
            )));
        }
        self.coords = Some(coords);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let (ns, na) = (self.num_states, self.num_actions);
        let bad = |msg: String| Err(Error::InvalidModel(format!("{}: {msg}", self.id)));
        if ns == 0 || na == 0 {
            return bad("empty state or action space".into());
        }
        if self.transition.len() != ns * na * ns {
            return bad(format!("transition table has {} entries", self.transition.len()));
        }
        if self.reward.len() != ns * na {
            return bad(format!("reward table has {} entries", self.reward.len()));
        }
        if self.initial_dist.len() != ns {
            return bad(format!("initial distribution has {} entries", self.initial_dist.len()));
        }
        if !(self.discount >= 0.0 && self.discount < 1.0) {
            return bad(format!("discount {} outside [0, 1)", self.discount));
        }
        if !(self.r_max > 0.0 && self.r_max.is_finite()) {
            return bad(format!("r_max {} must be positive", self.r_max));
        }
        for s in 0..ns {
            for a in 0..na {
                if let Err(e) = check_distribution(self.p_row(s, a), || format!("P[{s}][{a}]")) {
                    return bad(e);
                }
                let r = self.r(s, a);
                if !(0.0..=self.r_max).contains(&r) {
                    return bad(format!("R[{s}][{a}] = {r} outside [0, {}]", self.r_max));
                }
            }
        }
        if let Err(e) = check_distribution(&self.initial_dist, || "d0".into()) {
            return bad(e);
        }
        if let Some(c) = &self.coords {
            if c.len() != ns {
                return bad(format!("{} coordinates for {ns} states", c.len()));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn p_row(&self, s: usize, a: usize) -> &[f64] {
        let ns = self.num_states;
        let start = (s * self.num_actions + a) * ns;
        &self.transition[start..start + ns]
    }

    #[inline]
    pub fn r(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.num_actions + a]
    }

    pub fn num_pairs(&self) -> usize {
        self.num_states * self.num_actions
    }

    pub fn v_max(&self) -> f64 {
        self.r_max / (1.0 - self.discount)
    }

    /// Upper bound `γ^H · v_max` on the tail dropped by an `H`-step rollout.
    pub fn truncation_bound(&self, horizon: usize) -> f64 {
        self.discount.powi(horizon as i32) * self.v_max()
    }

    /// Largest possible truncated return `r_max (1 - γ^H) / (1 - γ)`.
    pub fn truncated_return_bound(&self, horizon: usize) -> f64 {
        self.r_max * (1.0 - self.discount.powi(horizon as i32)) / (1.0 - self.discount)
    }

    pub fn same_shape(&self, other: &TabularMdp) -> bool {
        self.num_states == other.num_states && self.num_actions == other.num_actions
    }

    /// `true` when every action keeps `s` in place and pays the same reward.
    pub fn absorbing_reward(&self, s: usize) -> Option<f64> {
        let r0 = self.r(s, 0);
        for a in 0..self.num_actions {
            if self.p_row(s, a)[s] != 1.0 || self.r(s, a) != r0 {
                return None;
            }
        }
        Some(r0)
    }
}

/// Horizon `H = ceil(log(tol · (1 - γ)) / log γ)`, so that `γ^H · v_max ≤ tol · r_max`.
pub fn tail_horizon(discount: f64, tol: f64) -> usize {
    if discount <= 0.0 {
        return 1;
    }
    let h = ((tol * (1.0 - discount)).ln() / discount.ln()).ceil();
    (h.max(1.0)) as usize
}

/// Default rollout horizon for a discount factor.
pub fn default_horizon(discount: f64) -> usize {
    tail_horizon(discount, 1e-4)
}

/// A stationary stochastic policy, `action_dist[s][a]` flattened row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub id: String,
    pub num_states: usize,
    pub num_actions: usize,
    pub action_dist: Vec<f64>,
}

impl Policy {
    pub fn new(
        id: impl Into<String>,
        num_states: usize,
        num_actions: usize,
        action_dist: Vec<f64>,
    ) -> Result<Self> {
        let p = Policy { id: id.into(), num_states, num_actions, action_dist };
        p.validate()?;
        Ok(p)
    }

    pub fn uniform(id: impl Into<String>, num_states: usize, num_actions: usize) -> Self {
        let p = 1.0 / num_actions as f64;
        Policy {
            id: id.into(),
            num_states,
            num_actions,
            action_dist: vec![p; num_states * num_actions],
        }
    }

    pub fn deterministic(id: impl Into<String>, num_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut dist = vec![0.0; actions.len() * num_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= num_actions {
                return Err(Error::InvalidPolicy(format!("action {a} out of range in state {s}")));
            }
            dist[s * num_actions + a] = 1.0;
        }
        Policy::new(id, actions.len(), num_actions, dist)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_states == 0 || self.num_actions == 0 {
            return Err(Error::InvalidPolicy(format!("{}: empty dimensions", self.id)));
        }
        if self.action_dist.len() != self.num_states * self.num_actions {
            return Err(Error::InvalidPolicy(format!(
                "{}: table has {} entries",
                self.id,
                self.action_dist.len()
            )));
        }
        for s in 0..self.num_states {
            check_distribution(self.probs(s), || format!("pi[{s}]"))
                .map_err(|e| Error::InvalidPolicy(format!("{}: {e}", self.id)))?;
        }
        Ok(())
    }

    #[inline]
    pub fn probs(&self, s: usize) -> &[f64] {
        &self.action_dist[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn check_model(&self, model: &TabularMdp) -> Result<()> {
        if self.num_states != model.num_states || self.num_actions != model.num_actions {
            return Err(Error::Dimension(format!(
                "policy {} is {}x{}, model {} is {}x{}",
                self.id, self.num_states, self.num_actions, model.id, model.num_states, model.num_actions
            )));
        }
        Ok(())
    }
}

/// Action values of a policy in a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub model_id: String,
    pub policy_id: String,
    pub num_states: usize,
    pub num_actions: usize,
    pub values: Vec<f64>,
}

impl QTable {
    pub fn zeros(model: &TabularMdp, policy: &Policy) -> Self {
        QTable {
            model_id: model.id.clone(),
            policy_id: policy.id.clone(),
            num_states: model.num_states,
            num_actions: model.num_actions,
            values: vec![0.0; model.num_pairs()],
        }
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.num_actions + a]
    }

    /// `f(s, π) = Σ_a π(a|s) f(s, a)`.
    #[inline]
    pub fn state_value(&self, s: usize, policy: &Policy) -> f64 {
        let row = &self.values[s * self.num_actions..(s + 1) * self.num_actions];
        row.iter().zip(policy.probs(s)).map(|(q, p)| q * p).sum()
    }

    pub fn max_abs_diff(&self, other: &QTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Policy-induced state transition matrix `P_π[s][s']` and reward `R_π[s]`.
fn policy_chain(model: &TabularMdp, policy: &Policy) -> (DMatrix<f64>, DVector<f64>) {
    let ns = model.num_states;
    let mut p = DMatrix::zeros(ns, ns);
    let mut r = DVector::zeros(ns);
    for s in 0..ns {
        for (a, &pa) in policy.probs(s).iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            r[s] += pa * model.r(s, a);
            for (s2, &ps) in model.p_row(s, a).iter().enumerate() {
                if ps != 0.0 {
                    p[(s, s2)] += pa * ps;
                }
            }
        }
    }
    (p, r)
}

fn solve(lhs: DMatrix<f64>, rhs: DVector<f64>) -> Result<DVector<f64>> {
    lhs.lu()
        .solve(&rhs)
        .ok_or_else(|| Error::InvalidModel("singular policy-evaluation system".into()))
}

/// Exact `Q^π` by a direct dense solve of the fixed-point equations.
///
/// The system is reduced to states first, `(I - γ P_π) V = R_π`, and then
/// lifted back with `Q = R + γ P V`, which is the same fixed point as the
/// state-action system.
pub fn exact_q_pi(model: &TabularMdp, policy: &Policy) -> Result<QTable> {
    policy.check_model(model)?;
    let ns = model.num_states;
    let gamma = model.discount;
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidModel(format!("discount {gamma} must be in [0, 1)")));
    }
    let (p, r) = policy_chain(model, policy);
    let lhs = DMatrix::identity(ns, ns) - p * gamma;
    let v = solve(lhs, r)?;
    let mut q = QTable::zeros(model, policy);
    for s in 0..ns {
        for a in 0..model.num_actions {
            let ev: f64 = model.p_row(s, a).iter().zip(v.iter()).map(|(p, v)| p * v).sum();
            q.values[s * model.num_actions + a] = model.r(s, a) + gamma * ev;
        }
    }
    Ok(q)
}

/// `(T^π_M f)(s,a) = R(s,a) + γ Σ_{s'} P(s'|s,a) f(s', π)`.
pub fn apply_bellman(model: &TabularMdp, policy: &Policy, f: &QTable) -> Result<QTable> {
    policy.check_model(model)?;
    if f.num_states != model.num_states || f.num_actions != model.num_actions {
        return Err(Error::Dimension(format!(
            "q-table is {}x{}, model is {}x{}",
            f.num_states, f.num_actions, model.num_states, model.num_actions
        )));
    }
    let next_v: Vec<f64> = (0..model.num_states).map(|s| f.state_value(s, policy)).collect();
    let mut out = QTable {
        model_id: model.id.clone(),
        policy_id: policy.id.clone(),
        num_states: model.num_states,
        num_actions: model.num_actions,
        values: vec![0.0; model.num_pairs()],
    };
    for s in 0..model.num_states {
        for a in 0..model.num_actions {
            let ev: f64 = model.p_row(s, a).iter().zip(&next_v).map(|(p, v)| p * v).sum();
            out.values[s * model.num_actions + a] = model.r(s, a) + model.discount * ev;
        }
    }
    Ok(out)
}

/// `E_{s ~ d0}[f(s, π)]`.
pub fn initial_value(model: &TabularMdp, policy: &Policy, q: &QTable) -> f64 {
    model
        .initial_dist
        .iter()
        .enumerate()
        .filter(|(_, &d)| d > 0.0)
        .map(|(s, &d)| d * q.state_value(s, policy))
        .sum()
}

/// Exact return `J(π) = E_{d0}[Q^π(s, π)]`.
pub fn exact_return(model: &TabularMdp, policy: &Policy) -> Result<f64> {
    let q = exact_q_pi(model, policy)?;
    Ok(initial_value(model, policy, &q))
}

/// Optimal action values by value iteration to a max-norm change below 1e-12.
pub fn optimal_q(model: &TabularMdp) -> Vec<f64> {
    let (ns, na) = (model.num_states, model.num_actions);
    let mut v = vec![0.0; ns];
    let mut q = vec![0.0; ns * na];
    loop {
        for s in 0..ns {
            for a in 0..na {
                let ev: f64 = model.p_row(s, a).iter().zip(&v).map(|(p, v)| p * v).sum();
                q[s * na + a] = model.r(s, a) + model.discount * ev;
            }
        }
        let mut delta: f64 = 0.0;
        for s in 0..ns {
            let best = q[s * na..(s + 1) * na].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            delta = delta.max((best - v[s]).abs());
            v[s] = best;
        }
        if delta < 1e-12 {
            return q;
        }
    }
}

/// Normalized discounted occupancy `(1-γ) Σ_t γ^t Pr_π[s_t = s, a_t = a]`,
/// flattened over `(s, a)`.
pub fn occupancy(model: &TabularMdp, policy: &Policy) -> Result<Vec<f64>> {
    policy.check_model(model)?;
    let ns = model.num_states;
    let gamma = model.discount;
    let (p, _) = policy_chain(model, policy);
    let lhs = DMatrix::identity(ns, ns) - p.transpose() * gamma;
    let rhs = DVector::from_iterator(ns, model.initial_dist.iter().map(|d| d * (1.0 - gamma)));
    let ds = solve(lhs, rhs)?;
    let mut out = Vec::with_capacity(model.num_pairs());
    for s in 0..ns {
        let mass = ds[s].max(0.0);
        out.extend(policy.probs(s).iter().map(|pa| mass * pa));
    }
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= total);
    Ok(out)
}

/// Concentrability of a target policy's occupancy with respect to a data
/// distribution over `(s, a)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageDiagnostics {
    /// `E_{d^π}[d^π / μ]`.
    pub c_one: f64,
    /// `max d^π / μ`, infinite when `μ` misses part of the support of `d^π`.
    pub c_inf: f64,
    pub occupancy_pi: Vec<f64>,
    pub data_dist: Vec<f64>,
}

pub fn coverage(occupancy_pi: &[f64], data_dist: &[f64]) -> Result<(f64, f64)> {
    if occupancy_pi.len() != data_dist.len() {
        return Err(Error::Dimension(format!(
            "occupancy has {} entries, data distribution {}",
            occupancy_pi.len(),
            data_dist.len()
        )));
    }
    let mut c_one = 0.0;
    let mut c_inf: f64 = 0.0;
    for (&d, &mu) in occupancy_pi.iter().zip(data_dist) {
        if d <= 0.0 {
            continue;
        }
        if mu <= 0.0 {
            return Ok((f64::INFINITY, f64::INFINITY));
        }
        let ratio = d / mu;
        c_one += d * ratio;
        c_inf = c_inf.max(ratio);
    }
    Ok((c_one, c_inf))
}

pub fn occupancy_and_coverage(
    model: &TabularMdp,
    policy: &Policy,
    data_dist: &[f64],
) -> Result<CoverageDiagnostics> {
    if data_dist.len() != model.num_pairs() {
        return Err(Error::Dimension(format!(
            "data distribution has {} entries for {} state-action pairs",
            data_dist.len(),
            model.num_pairs()
        )));
    }
    let total: f64 = data_dist.iter().sum();
    if (total - 1.0).abs() > 1e-10 || data_dist.iter().any(|&x| x < 0.0) {
        return Err(Error::InvalidArgument(format!("data distribution sums to {total}")));
    }
    let occ = occupancy(model, policy)?;
    let (c_one, c_inf) = coverage(&occ, data_dist)?;
    Ok(CoverageDiagnostics { c_one, c_inf, occupancy_pi: occ, data_dist: data_dist.to_vec() })
}

#[inline]
fn sample_cdf(cdf: &[f64], u: f64) -> usize {
    for (i, &c) in cdf.iter().enumerate() {
        if u < c {
            return i;
        }
    }
    cdf.len() - 1
}

/// Sparse cumulative tables for fast sampling from one model.
#[derive(Clone, Debug)]
pub struct Simulator<'a> {
    pub model: &'a TabularMdp,
    offsets: Vec<usize>,
    next: Vec<usize>,
    cdf: Vec<f64>,
    absorbing: Vec<Option<f64>>,
}

impl<'a> Simulator<'a> {
    pub fn new(model: &'a TabularMdp) -> Self {
        let mut offsets = Vec::with_capacity(model.num_pairs() + 1);
        let mut next = Vec::new();
        let mut cdf = Vec::new();
        offsets.push(0);
        for s in 0..model.num_states {
            for a in 0..model.num_actions {
                let mut acc = 0.0;
                for (s2, &p) in model.p_row(s, a).iter().enumerate() {
                    if p > 0.0 {
                        acc += p;
                        next.push(s2);
                        cdf.push(acc);
                    }
                }
                offsets.push(next.len());
            }
        }
        let absorbing = (0..model.num_states).map(|s| model.absorbing_reward(s)).collect();
        Simulator { model, offsets, next, cdf, absorbing }
    }

    #[inline]
    pub fn step<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> usize {
        let k = s * self.model.num_actions + a;
        let (lo, hi) = (self.offsets[k], self.offsets[k + 1]);
        if hi - lo == 1 {
            return self.next[lo];
        }
        let u: f64 = rng.random();
        self.next[lo + sample_cdf(&self.cdf[lo..hi], u)]
    }

    /// Truncated discounted return `Σ_{t<H} γ^t r_t` starting from `(s, a)`.
    ///
    /// Once an absorbing constant-reward state is reached the remaining sum
    /// is added in closed form.
    pub fn rollout<R: Rng + ?Sized>(
        &self,
        policy: &PolicySampler,
        s: usize,
        a: usize,
        horizon: usize,
        rng: &mut R,
    ) -> f64 {
        let gamma = self.model.discount;
        let gamma_h = gamma.powi(horizon as i32);
        let (mut s, mut a) = (s, a);
        let mut ret = 0.0;
        let mut disc = 1.0;
        for t in 0..horizon {
            if let Some(r) = self.absorbing[s] {
                return ret + r * (disc - gamma_h) / (1.0 - gamma);
            }
            ret += disc * self.model.r(s, a);
            if t + 1 == horizon {
                break;
            }
            s = self.step(s, a, rng);
            a = policy.sample(s, rng);
            disc *= gamma;
        }
        ret
    }

    /// One step from `(s, a)` in this model, then the remaining `H - 1` steps
    /// of the rollout in `continuation`.
    pub fn mixed_rollout<R: Rng + ?Sized>(
        &self,
        continuation: &Simulator<'_>,
        policy: &PolicySampler,
        s: usize,
        a: usize,
        horizon: usize,
        rng: &mut R,
    ) -> f64 {
        let r = self.model.r(s, a);
        if horizon <= 1 {
            return r;
        }
        let s1 = self.step(s, a, rng);
        let a1 = policy.sample(s1, rng);
        r + self.model.discount * continuation.rollout(policy, s1, a1, horizon - 1, rng)
    }
}

/// Cumulative action tables of a policy.
#[derive(Clone, Debug)]
pub struct PolicySampler {
    num_actions: usize,
    cdf: Vec<f64>,
    single: Vec<Option<usize>>,
}

impl PolicySampler {
    pub fn new(policy: &Policy) -> Self {
        let na = policy.num_actions;
        let mut cdf = Vec::with_capacity(policy.action_dist.len());
        let mut single = Vec::with_capacity(policy.num_states);
        for s in 0..policy.num_states {
            let mut acc = 0.0;
            let probs = policy.probs(s);
            for &p in probs {
                acc += p;
                cdf.push(acc);
            }
            let support: Vec<usize> = (0..na).filter(|&a| probs[a] > 0.0).collect();
            single.push(if support.len() == 1 { Some(support[0]) } else { None });
        }
        PolicySampler { num_actions: na, cdf, single }
    }

    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        if let Some(a) = self.single[s] {
            return a;
        }
        let u: f64 = rng.random();
        let row = &self.cdf[s * self.num_actions..(s + 1) * self.num_actions];
        // Skip trailing zero-probability actions that share the final cdf value.
        let mut a = sample_cdf(row, u);
        while a > 0 && row[a] == row[a - 1] {
            a -= 1;
        }
        a
    }
}

/// One truncated discounted return from `(start_state, start_action)`.
pub fn rollout_return<R: Rng + ?Sized>(
    model: &TabularMdp,
    policy: &Policy,
    start_state: usize,
    start_action: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<f64> {
    policy.check_model(model)?;
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    if start_state >= model.num_states || start_action >= model.num_actions {
        return Err(Error::InvalidArgument(format!(
            "start ({start_state}, {start_action}) out of range"
        )));
    }
    let sim = Simulator::new(model);
    let pol = PolicySampler::new(policy);
    Ok(sim.rollout(&pol, start_state, start_action, horizon, rng))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::rng::stream;

    pub fn single_state(r: f64, gamma: f64) -> TabularMdp {
        TabularMdp::new("one", 1, 1, vec![1.0], vec![r], gamma, vec![1.0], 1.0).unwrap()
    }

    /// Random MDP with dense rows, used across modules.
    pub fn random_mdp(seed: u64, ns: usize, na: usize, gamma: f64) -> TabularMdp {
        let mut rng = stream(seed, &[99]);
        let mut t = Vec::with_capacity(ns * na * ns);
        for _ in 0..ns * na {
            let row: Vec<f64> = (0..ns).map(|_| rng.random::<f64>().powi(3)).collect();
            let z: f64 = row.iter().sum();
            t.extend(row.iter().map(|x| x / z));
        }
        let r = (0..ns * na).map(|_| rng.random::<f64>()).collect();
        let d0: Vec<f64> = (0..ns).map(|_| rng.random::<f64>()).collect();
        let z: f64 = d0.iter().sum();
        let d0 = d0.iter().map(|x| x / z).collect();
        TabularMdp::new(format!("rand{seed}"), ns, na, t, r, gamma, d0, 1.0).unwrap()
    }

    pub fn random_policy(seed: u64, ns: usize, na: usize) -> Policy {
        let mut rng = stream(seed, &[98]);
        let mut d = Vec::new();
        for _ in 0..ns {
            let row: Vec<f64> = (0..na).map(|_| rng.random::<f64>() + 0.05).collect();
            let z: f64 = row.iter().sum();
            d.extend(row.iter().map(|x| x / z));
        }
        Policy::new(format!("pi{seed}"), ns, na, d).unwrap()
    }

    #[test]
    fn geometric_series_single_state() {
        let m = single_state(1.0, 0.5);
        let pi = Policy::uniform("u", 1, 1);
        let q = exact_q_pi(&m, &pi).unwrap();
        assert!((q.get(0, 0) - 2.0).abs() < 1e-15);
        assert!((exact_return(&m, &pi).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_discount_gives_reward() {
        let m = random_mdp(3, 6, 3, 0.0);
        let pi = random_policy(3, 6, 3);
        let q = exact_q_pi(&m, &pi).unwrap();
        assert_eq!(q.values, m.reward);
        let f = QTable { values: vec![5.0; 18], ..q.clone() };
        assert_eq!(apply_bellman(&m, &pi, &f).unwrap().values, m.reward);
    }

    #[test]
    fn bellman_of_zero_is_reward() {
        let m = random_mdp(4, 5, 2, 0.9);
        let pi = random_policy(4, 5, 2);
        let z = QTable::zeros(&m, &pi);
        assert_eq!(apply_bellman(&m, &pi, &z).unwrap().values, m.reward);
    }

    #[test]
    fn fixed_point_residual() {
        for seed in 0..5 {
            let m = random_mdp(seed, 10, 3, 0.95);
            let pi = random_policy(seed, 10, 3);
            let q = exact_q_pi(&m, &pi).unwrap();
            let tq = apply_bellman(&m, &pi, &q).unwrap();
            assert!(q.max_abs_diff(&tq) < 1e-9);
            assert!(q.values.iter().all(|&v| v >= -1e-12 && v <= m.v_max() + 1e-9));
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(TabularMdp::new("x", 1, 1, vec![1.0], vec![1.0], 1.0, vec![1.0], 1.0).is_err());
        assert!(TabularMdp::new("x", 1, 1, vec![0.9], vec![1.0], 0.5, vec![1.0], 1.0).is_err());
        assert!(TabularMdp::new("x", 1, 1, vec![1.0], vec![2.0], 0.5, vec![1.0], 1.0).is_err());
        assert!(Policy::new("p", 1, 2, vec![0.5, 0.6], ).is_err());
        let m = single_state(1.0, 0.5);
        let pi = Policy::uniform("u", 2, 1);
        assert!(matches!(exact_q_pi(&m, &pi), Err(Error::Dimension(_))));
    }

    #[test]
    fn absorbing_zero_start() {
        // state 0 absorbing with reward 0, state 1 rewarding
        let t = vec![1.0, 0.0, 0.0, 1.0];
        let m = TabularMdp::new("abs", 2, 1, t, vec![0.0, 1.0], 0.9, vec![1.0, 0.0], 1.0).unwrap();
        let pi = Policy::uniform("u", 2, 1);
        assert_eq!(exact_return(&m, &pi).unwrap(), 0.0);
    }

    #[test]
    fn deterministic_rollout_value() {
        let m = single_state(1.0, 0.5);
        let pi = Policy::uniform("u", 1, 1);
        let mut rng = stream(1, &[]);
        assert_eq!(rollout_return(&m, &pi, 0, 0, 3, &mut rng).unwrap(), 1.75);
        let m = random_mdp(5, 4, 2, 0.9);
        let pi = random_policy(5, 4, 2);
        for s in 0..4 {
            for a in 0..2 {
                assert_eq!(rollout_return(&m, &pi, s, a, 1, &mut rng).unwrap(), m.r(s, a));
            }
        }
    }

    #[test]
    fn rollout_is_reproducible_and_bounded() {
        let m = random_mdp(6, 5, 2, 0.9);
        let pi = random_policy(6, 5, 2);
        let h = 20;
        for k in 0..50 {
            let a = rollout_return(&m, &pi, 1, 1, h, &mut stream(11, &[k])).unwrap();
            let b = rollout_return(&m, &pi, 1, 1, h, &mut stream(11, &[k])).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
            assert!(a >= 0.0 && a <= m.truncated_return_bound(h) + 1e-12);
        }
    }

    #[test]
    fn horizon_rule() {
        assert_eq!(tail_horizon(0.0, 1e-4), 1);
        let h = default_horizon(0.95);
        assert!(0.95f64.powi(h as i32) * 20.0 <= 1e-4 + 1e-15);
        assert!(0.95f64.powi(h as i32 - 1) * 20.0 > 1e-4);
    }

    #[test]
    fn on_policy_coverage_is_one() {
        let m = random_mdp(8, 6, 3, 0.9);
        let pi = random_policy(8, 6, 3);
        let occ = occupancy(&m, &pi).unwrap();
        let d = occupancy_and_coverage(&m, &pi, &occ).unwrap();
        assert!((d.c_one - 1.0).abs() < 1e-10);
        assert!((d.c_inf - 1.0).abs() < 1e-10);
    }

    #[test]
    fn point_mass_occupancy_against_uniform_data() {
        // One absorbing state, one action: d^π is a point mass on the single pair.
        // With k pairs of uniform data that pair has mass 1/k.
        let k = 4;
        let mut t = vec![0.0; 4 * 4];
        for s in 0..4 {
            t[s * 4 + s] = 1.0;
        }
        let m = TabularMdp::new("pm", 4, 1, t, vec![0.0; 4], 0.9, vec![1.0, 0.0, 0.0, 0.0], 1.0).unwrap();
        let pi = Policy::uniform("u", 4, 1);
        let d = occupancy_and_coverage(&m, &pi, &vec![1.0 / k as f64; k]).unwrap();
        assert!((d.c_inf - k as f64).abs() < 1e-12);
        assert!(d.c_one <= d.c_inf);
        let mut holes = vec![0.0; 4];
        holes[1] = 1.0;
        let d = occupancy_and_coverage(&m, &pi, &holes).unwrap();
        assert!(d.c_inf.is_infinite());
    }
}
