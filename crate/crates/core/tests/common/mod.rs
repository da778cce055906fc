#![allow(dead_code)]

use opesel_core::mdp::{exact_q_pi, Policy, QTable, TabularMdp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Dense random MDP; `sparsity` is the probability of zeroing a transition entry.
pub fn random_mdp(seed: u64, ns: usize, na: usize, gamma: f64, sparsity: f64) -> TabularMdp {
    let mut r = rng(seed);
    let mut t = Vec::with_capacity(ns * na * ns);
    for _ in 0..ns * na {
        let mut row: Vec<f64> =
            (0..ns).map(|_| if r.random::<f64>() < sparsity { 0.0 } else { r.random::<f64>() }).collect();
        if row.iter().all(|&x| x == 0.0) {
            row[r.random_range(0..ns)] = 1.0;
        }
        let z: f64 = row.iter().sum();
        t.extend(row.iter().map(|x| x / z));
    }
    let reward = (0..ns * na).map(|_| r.random::<f64>()).collect();
    let d0: Vec<f64> = (0..ns).map(|_| r.random::<f64>() + 0.01).collect();
    let z: f64 = d0.iter().sum();
    let d0 = d0.iter().map(|x| x / z).collect();
    TabularMdp::new(format!("rand{seed}"), ns, na, t, reward, gamma, d0, 1.0).unwrap()
}

/// Same shape and reward as `base`, with the transition rows blended towards
/// those of a fresh random MDP.
pub fn perturbed(base: &TabularMdp, seed: u64, amount: f64) -> TabularMdp {
    let other = random_mdp(seed, base.num_states, base.num_actions, base.discount, 0.0);
    let transition = base.transition.iter().zip(&other.transition).map(|(a, b)| (1.0 - amount) * a + amount * b).collect();
    let mut m = TabularMdp::new(
        format!("{}~{seed}", base.id),
        base.num_states,
        base.num_actions,
        transition,
        base.reward.clone(),
        base.discount,
        base.initial_dist.clone(),
        base.r_max,
    )
    .unwrap();
    m.coords = base.coords.clone();
    m
}

pub fn random_policy(seed: u64, ns: usize, na: usize) -> Policy {
    let mut r = rng(seed ^ 0xabcdef);
    let mut d = Vec::new();
    for _ in 0..ns {
        let row: Vec<f64> = (0..na).map(|_| r.random::<f64>() + 0.05).collect();
        let z: f64 = row.iter().sum();
        d.extend(row.iter().map(|x| x / z));
    }
    Policy::new(format!("pi{seed}"), ns, na, d).unwrap()
}

pub fn random_dist(seed: u64, k: usize) -> Vec<f64> {
    let mut r = rng(seed ^ 0x5eed);
    let v: Vec<f64> = (0..k).map(|_| r.random::<f64>() + 0.01).collect();
    let z: f64 = v.iter().sum();
    v.iter().map(|x| x / z).collect()
}

/// `Q^π` of every model, with table ids set to the model ids.
pub fn tables(models: &[TabularMdp], policy: &Policy) -> Vec<QTable> {
    models.iter().map(|m| exact_q_pi(m, policy).unwrap()).collect()
}

pub fn shifted(q: &QTable, c: f64, id: &str) -> QTable {
    QTable { model_id: id.into(), values: q.values.iter().map(|v| v + c).collect(), ..q.clone() }
}

/// `|a - b| <= tol * max(1, |a|, |b|)`.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * 1f64.max(a.abs()).max(b.abs())
}

/// Value iteration on `Q` until the max-norm change drops below `tol`.
pub fn value_iteration_q(model: &TabularMdp, policy: &Policy, tol: f64) -> Vec<f64> {
    let (ns, na) = (model.num_states, model.num_actions);
    let mut q = vec![0.0; ns * na];
    loop {
        let v: Vec<f64> = (0..ns).map(|s| (0..na).map(|a| policy.probs(s)[a] * q[s * na + a]).sum()).collect();
        let mut delta: f64 = 0.0;
        let mut next = vec![0.0; ns * na];
        for s in 0..ns {
            for a in 0..na {
                let ev: f64 = model.p_row(s, a).iter().zip(&v).map(|(p, x)| p * x).sum();
                next[s * na + a] = model.r(s, a) + model.discount * ev;
                delta = delta.max((next[s * na + a] - q[s * na + a]).abs());
            }
        }
        q = next;
        if delta < tol {
            return q;
        }
    }
}
