//! Exact-expectation stand-ins for sampled data and Monte-Carlo caches.
//!
//! A dataset enumerating every `(s, a, s')` with `μ(s, a) P(s'|s, a) > 0`,
//! weighted by that probability, turns every `E_D` into `E_μ`. Caches filled
//! from Q-tables (with `Q(s', π)` averaged over `π` and both rollout halves
//! equal to the exact value) turn every estimate into its expectation.

use std::collections::BTreeMap;

use crate::data::{Dataset, SampleMode, Transition, Weights};
use crate::error::{Error, Result};
use crate::mdp::{Policy, QTable, TabularMdp};
use crate::qcache::{CacheManifest, Halves, QCache, Q_NEXT_SAMPLED};

/// Every reachable transition under `μ`, with its probability as weight.
#[derive(Clone, Debug)]
pub struct ExactSupport {
    pub data: Dataset,
    pub weights: Weights,
}

pub fn exact_support(model: &TabularMdp, mu: &[f64]) -> Result<ExactSupport> {
    if mu.len() != model.num_pairs() {
        return Err(Error::Dimension(format!("μ has {} entries for {} pairs", mu.len(), model.num_pairs())));
    }
    let na = model.num_actions;
    let mut transitions = Vec::new();
    let mut probs = Vec::new();
    for (sa, &w) in mu.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        let (s, a) = (sa / na, sa % na);
        for (s_next, &p) in model.p_row(s, a).iter().enumerate() {
            if p > 0.0 {
                probs.push((transitions.len(), w * p));
                transitions.push(Transition { s, a, r: model.r(s, a), s_next, index: transitions.len() });
            }
        }
    }
    let data = Dataset {
        transitions,
        behavior_id: "exact".into(),
        seed: 0,
        mode: SampleMode::Iid,
        source_model_id: model.id.clone(),
        num_states: model.num_states,
        num_actions: na,
    };
    Ok(ExactSupport { data, weights: Weights::from_probabilities(probs) })
}

/// `(R_j + γ P_j f(·, π))(s, a)`.
fn backup_value(model: &TabularMdp, policy: &Policy, f: &QTable, s: usize, a: usize) -> f64 {
    let next: f64 = model
        .p_row(s, a)
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.0)
        .map(|(s2, &p)| p * f.state_value(s2, policy))
        .sum();
    model.r(s, a) + model.discount * next
}

/// A cache holding the exact values of `tables` on `data`. When
/// `backup_models` is given, `backup[i][j] = T_{M_j} Q_i` exactly.
pub fn exact_cache(
    tables: &[QTable],
    policy: &Policy,
    data: &Dataset,
    discount: f64,
    backup_models: Option<&[TabularMdp]>,
) -> Result<QCache> {
    let (m, n) = (tables.len(), data.n());
    if m == 0 {
        return Err(Error::InvalidArgument("no candidate tables".into()));
    }
    if let Some(models) = backup_models {
        if models.len() != m {
            return Err(Error::Dimension(format!("{} backup models for {m} tables", models.len())));
        }
    }
    let mut q_sa = Vec::with_capacity(m * n);
    let mut q_next = Vec::with_capacity(m * n);
    for q in tables {
        if q.num_states != data.num_states || q.num_actions != data.num_actions {
            return Err(Error::Dimension(format!("table {} does not match the dataset", q.model_id)));
        }
        q_sa.extend(data.transitions.iter().map(|t| q.get(t.s, t.a)));
        q_next.extend(data.transitions.iter().map(|t| q.state_value(t.s_next, policy)));
    }
    let backup = backup_models.map(|models| {
        let mut out = Vec::with_capacity(m * m * n);
        for q in tables {
            for model in models {
                out.extend(data.transitions.iter().map(|t| backup_value(model, policy, q, t.s, t.a)));
            }
        }
        out
    });
    let manifest = CacheManifest {
        dataset_hash: data.hash(),
        policy_id: policy.id.clone(),
        model_ids: tables.iter().map(|q| q.model_id.clone()).collect(),
        l: 0,
        horizon: 0,
        master_seed: 0,
        split: true,
        with_backups: backup.is_some(),
        n,
        discount,
        q_next_action: Q_NEXT_SAMPLED.into(),
        gathered_from: vec![],
        files: BTreeMap::new(),
    };
    let halves = Halves { q_sa_a: q_sa.clone(), q_sa_b: q_sa.clone(), q_next_a: q_next.clone(), q_next_b: q_next.clone() };
    Ok(QCache { manifest, q_sa, q_next, halves: Some(halves), backup })
}

/// `E_μ[Var_{s'}(f(s', π))]`, the gap between the expected squared TD error
/// of `Q^π` and its (zero) Bellman error, before the `γ²` factor.
pub fn expected_next_value_variance(model: &TabularMdp, policy: &Policy, f: &QTable, mu: &[f64]) -> f64 {
    let na = model.num_actions;
    mu.iter()
        .enumerate()
        .filter(|(_, &w)| w > 0.0)
        .map(|(sa, &w)| {
            let row = model.p_row(sa / na, sa % na);
            let mean: f64 = row.iter().enumerate().map(|(s2, &p)| p * f.state_value(s2, policy)).sum();
            let second: f64 = row.iter().enumerate().map(|(s2, &p)| p * f.state_value(s2, policy).powi(2)).sum();
            w * (second - mean * mean).max(0.0)
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::exact_q_pi;
    use crate::mdp::tests::{random_mdp, random_policy};

    #[test]
    fn support_weights_sum_to_one() {
        let model = random_mdp(3, 5, 2, 0.9);
        let mu = vec![0.1; 10];
        let sup = exact_support(&model, &mu).unwrap();
        let total: f64 = sup.weights.entries.iter().map(|e| e.1).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exact_backup_of_truth_is_truth() {
        let model = random_mdp(4, 4, 3, 0.8);
        let policy = random_policy(5, 4, 3);
        let q = exact_q_pi(&model, &policy).unwrap();
        let sup = exact_support(&model, &[1.0 / 12.0; 12]).unwrap();
        let cache = exact_cache(&[q], &policy, &sup.data, 0.8, Some(std::slice::from_ref(&model))).unwrap();
        for t in 0..cache.n() {
            assert!((cache.backup.as_ref().unwrap()[t] - cache.q_sa(0, t)).abs() < 1e-10);
        }
    }
}
