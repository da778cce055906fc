//! Offline datasets: behavior policies, sampling, bootstrap and coverage mixing.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mdp::{default_horizon, occupancy, Policy, PolicySampler, Simulator, TabularMdp};
use crate::rng::{stream, tag};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
    pub index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// `(s, a)` drawn i.i.d. from the behavior policy's discounted occupancy.
    Iid,
    /// Consecutive tuples from episodes that restart at absorbing states.
    Trajectory,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub transitions: Vec<Transition>,
    pub behavior_id: String,
    pub seed: u64,
    pub mode: SampleMode,
    pub source_model_id: String,
    pub num_states: usize,
    pub num_actions: usize,
}

/// `manifest.json` of a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n: usize,
    pub seed: u64,
    pub mode: SampleMode,
    pub behavior_id: String,
    pub source_model_id: String,
    pub num_states: usize,
    pub num_actions: usize,
    pub hash: String,
}

pub const TRANSITION_BYTES: usize = 20;
pub const TRANSITIONS_FILE: &str = "transitions.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

impl Dataset {
    pub fn n(&self) -> usize {
        self.transitions.len()
    }

    /// The first `k` tuples.
    pub fn prefix(&self, k: usize) -> Result<Dataset> {
        if k > self.n() {
            return Err(Error::InvalidArgument(format!("prefix of {k} tuples from a dataset of {}", self.n())));
        }
        Ok(Dataset { transitions: self.transitions[..k].to_vec(), ..self.clone() })
    }

    pub fn check_model(&self, model: &TabularMdp) -> Result<()> {
        if self.num_states != model.num_states || self.num_actions != model.num_actions {
            return Err(Error::Dimension(format!(
                "dataset is {}x{}, model {} is {}x{}",
                self.num_states, self.num_actions, model.id, model.num_states, model.num_actions
            )));
        }
        Ok(())
    }

    /// Transition block: per tuple `s, a, s_next` as little-endian `u32`
    /// followed by `r` as little-endian `f64`.
    pub fn transition_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.n() * TRANSITION_BYTES);
        for t in &self.transitions {
            out.extend_from_slice(&(t.s as u32).to_le_bytes());
            out.extend_from_slice(&(t.a as u32).to_le_bytes());
            out.extend_from_slice(&(t.s_next as u32).to_le_bytes());
            out.extend_from_slice(&t.r.to_le_bytes());
        }
        out
    }

    /// SHA-256 over the metadata and the transition block.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        let header = format!(
            "{}|{}|{:?}|{}|{}|{}|{}|",
            self.n(),
            self.seed,
            self.mode,
            self.behavior_id,
            self.source_model_id,
            self.num_states,
            self.num_actions
        );
        h.update(header.as_bytes());
        h.update(self.transition_bytes());
        hex::encode(h.finalize())
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            n: self.n(),
            seed: self.seed,
            mode: self.mode,
            behavior_id: self.behavior_id.clone(),
            source_model_id: self.source_model_id.clone(),
            num_states: self.num_states,
            num_actions: self.num_actions,
            hash: self.hash(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(TRANSITIONS_FILE), self.transition_bytes())?;
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&self.manifest())?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
        let path = dir.join(TRANSITIONS_FILE);
        let bytes = fs::read(&path)?;
        if bytes.len() != manifest.n * TRANSITION_BYTES {
            return Err(Error::Corrupt {
                path: path.display().to_string(),
                reason: format!("{} bytes for {} transitions", bytes.len(), manifest.n),
            });
        }
        let u32_at = |b: &[u8], o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap()) as usize;
        let transitions = bytes
            .chunks_exact(TRANSITION_BYTES)
            .enumerate()
            .map(|(index, b)| Transition {
                s: u32_at(b, 0),
                a: u32_at(b, 4),
                s_next: u32_at(b, 8),
                r: f64::from_le_bytes(b[12..20].try_into().unwrap()),
                index,
            })
            .collect();
        let data = Dataset {
            transitions,
            behavior_id: manifest.behavior_id.clone(),
            seed: manifest.seed,
            mode: manifest.mode,
            source_model_id: manifest.source_model_id.clone(),
            num_states: manifest.num_states,
            num_actions: manifest.num_actions,
        };
        for t in &data.transitions {
            if t.s >= data.num_states || t.s_next >= data.num_states || t.a >= data.num_actions {
                return Err(Error::Corrupt {
                    path: path.display().to_string(),
                    reason: format!("transition {} out of range", t.index),
                });
            }
        }
        let found = data.hash();
        if found != manifest.hash {
            return Err(Error::HashMismatch { expected: manifest.hash, found });
        }
        Ok(data)
    }

    /// Empirical `(s, a)` frequencies.
    pub fn empirical_distribution(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.num_states * self.num_actions];
        for t in &self.transitions {
            out[t.s * self.num_actions + t.a] += 1.0;
        }
        let n = self.n() as f64;
        out.iter_mut().for_each(|x| *x /= n);
        out
    }
}

/// Probability weights over data indices; an empirical expectation under the
/// weights is `Σ w_t f(t)`. Bootstrap replicates, dataset prefixes and exact
/// population expectations are all expressed this way.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub entries: Vec<(usize, f64)>,
}

impl Weights {
    pub fn uniform(n: usize) -> Self {
        let w = 1.0 / n as f64;
        Weights { entries: (0..n).map(|t| (t, w)).collect() }
    }

    /// Multiset of indices, aggregated into counts and sorted by index.
    pub fn from_indices(indices: &[usize]) -> Self {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &i in indices {
            *counts.entry(i).or_default() += 1;
        }
        let n = indices.len() as f64;
        Weights { entries: counts.into_iter().map(|(i, c)| (i, c as f64 / n)).collect() }
    }

    pub fn from_probabilities(probs: Vec<(usize, f64)>) -> Self {
        Weights { entries: probs }
    }

    #[inline]
    pub fn mean(&self, mut f: impl FnMut(usize) -> f64) -> f64 {
        self.entries.iter().map(|&(t, w)| w * f(t)).sum()
    }

    pub fn max_index(&self) -> Option<usize> {
        self.entries.iter().map(|e| e.0).max()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Takes the base action with probability `act_prob`, otherwise a uniform one.
pub fn noisy_behavior(base: &Policy, act_prob: f64) -> Result<Policy> {
    if !(0.0..=1.0).contains(&act_prob) {
        return Err(Error::InvalidArgument(format!("act_prob {act_prob} outside [0, 1]")));
    }
    let u = (1.0 - act_prob) / base.num_actions as f64;
    let dist = base.action_dist.iter().map(|p| act_prob * p + u).collect();
    Policy::new(format!("{}_eps{act_prob}", base.id), base.num_states, base.num_actions, dist)
}

/// Samples `n` transitions from `model` under `behavior`.
pub fn sample_dataset(
    model: &TabularMdp,
    behavior: &Policy,
    n: usize,
    mode: SampleMode,
    seed: u64,
) -> Result<Dataset> {
    behavior.check_model(model)?;
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    let sim = Simulator::new(model);
    let pol = PolicySampler::new(behavior);
    let mut rng = stream(seed, &[tag::DATASET, mode as u64]);
    let na = model.num_actions;
    let mut transitions = Vec::with_capacity(n);
    match mode {
        SampleMode::Iid => {
            let mu = occupancy(model, behavior)?;
            let pairs = WeightedIndex::new(&mu)
                .map_err(|e| Error::InvalidArgument(format!("occupancy: {e}")))?;
            for index in 0..n {
                let k = pairs.sample(&mut rng);
                let (s, a) = (k / na, k % na);
                let s_next = sim.step(s, a, &mut rng);
                transitions.push(Transition { s, a, r: model.r(s, a), s_next, index });
            }
        }
        SampleMode::Trajectory => {
            let d0 = WeightedIndex::new(&model.initial_dist)
                .map_err(|e| Error::InvalidArgument(format!("initial distribution: {e}")))?;
            let cap = default_horizon(model.discount);
            let mut s = d0.sample(&mut rng);
            let mut steps = 0;
            while transitions.len() < n {
                let a = pol.sample(s, &mut rng);
                let s_next = sim.step(s, a, &mut rng);
                let index = transitions.len();
                transitions.push(Transition { s, a, r: model.r(s, a), s_next, index });
                steps += 1;
                if steps >= cap || model.absorbing_reward(s_next).is_some() {
                    s = d0.sample(&mut rng);
                    steps = 0;
                } else {
                    s = s_next;
                }
            }
        }
    }
    Ok(Dataset {
        transitions,
        behavior_id: behavior.id.clone(),
        seed,
        mode,
        source_model_id: model.id.clone(),
        num_states: model.num_states,
        num_actions: model.num_actions,
    })
}

/// One bootstrap replicate: `n` indices drawn with replacement.
#[derive(Clone, Debug, PartialEq)]
pub struct Replicate {
    pub rep: usize,
    pub indices: Vec<usize>,
}

impl Replicate {
    pub fn weights(&self) -> Weights {
        Weights::from_indices(&self.indices)
    }

    pub fn materialize(&self, data: &Dataset) -> Dataset {
        let transitions = self
            .indices
            .iter()
            .enumerate()
            .map(|(index, &i)| Transition { index, ..data.transitions[i] })
            .collect();
        Dataset { transitions, ..data.clone() }
    }
}

/// Draws `reps` index multisets of size `n` (the replicate never resamples
/// behavior randomness, only indices).
pub fn bootstrap_indices(n: usize, reps: usize, seed: u64) -> Result<Vec<Replicate>> {
    if reps == 0 {
        return Err(Error::InvalidArgument("need at least one bootstrap replicate".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("cannot resample an empty dataset".into()));
    }
    Ok((0..reps)
        .map(|rep| {
            let mut rng = stream(seed, &[tag::BOOTSTRAP, rep as u64]);
            Replicate { rep, indices: (0..n).map(|_| rng.random_range(0..n)).collect() }
        })
        .collect())
}

pub fn bootstrap_resample(data: &Dataset, reps: usize, seed: u64) -> Result<Vec<Replicate>> {
    bootstrap_indices(data.n(), reps, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MixSource {
    On,
    Off,
}

/// A mixed dataset plus, for every tuple, where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    pub dataset: Dataset,
    pub origin: Vec<(MixSource, usize)>,
    pub on_count: usize,
}

impl Mixture {
    /// Exact data distribution of the mixture given the sources' distributions.
    pub fn distribution(&self, mu_on: &[f64], mu_off: &[f64]) -> Vec<f64> {
        let lam = self.on_count as f64 / self.dataset.n() as f64;
        mu_on.iter().zip(mu_off).map(|(a, b)| lam * a + (1.0 - lam) * b).collect()
    }
}

/// `round(λ n)` tuples from `on`, the rest from `off`, in shuffled order.
pub fn mix_datasets(on: &Dataset, off: &Dataset, lambda: f64, n: usize, seed: u64) -> Result<Mixture> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")));
    }
    if on.num_states != off.num_states || on.num_actions != off.num_actions {
        return Err(Error::Dimension("mixed datasets disagree on dimensions".into()));
    }
    let k = (lambda * n as f64).round() as usize;
    if on.n() < k || off.n() < n - k {
        return Err(Error::InsufficientData(format!(
            "need {k} on-policy and {} off-policy tuples, have {} and {}",
            n - k,
            on.n(),
            off.n()
        )));
    }
    let mut rng = stream(seed, &[tag::MIX, lambda.to_bits(), n as u64]);
    let mut origin: Vec<(MixSource, usize)> = Vec::with_capacity(n);
    let mut on_idx = rand::seq::index::sample(&mut rng, on.n(), k).into_vec();
    on_idx.sort_unstable();
    let mut off_idx = rand::seq::index::sample(&mut rng, off.n(), n - k).into_vec();
    off_idx.sort_unstable();
    origin.extend(on_idx.into_iter().map(|i| (MixSource::On, i)));
    origin.extend(off_idx.into_iter().map(|i| (MixSource::Off, i)));
    origin.shuffle(&mut rng);
    let transitions = origin
        .iter()
        .enumerate()
        .map(|(index, &(src, i))| {
            let t = match src {
                MixSource::On => on.transitions[i],
                MixSource::Off => off.transitions[i],
            };
            Transition { index, ..t }
        })
        .collect();
    Ok(Mixture {
        dataset: Dataset {
            transitions,
            behavior_id: format!("mix({},{},{lambda})", on.behavior_id, off.behavior_id),
            seed,
            mode: on.mode,
            source_model_id: on.source_model_id.clone(),
            num_states: on.num_states,
            num_actions: on.num_actions,
        },
        origin,
        on_count: k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::tests::{random_mdp, random_policy, single_state};

    #[test]
    fn noisy_behavior_mixture() {
        let base = Policy::deterministic("b", 4, &[2, 0, 1]).unwrap();
        assert_eq!(noisy_behavior(&base, 1.0).unwrap().action_dist, base.action_dist);
        assert!(noisy_behavior(&base, 0.0).unwrap().action_dist.iter().all(|&p| p == 0.25));
        let eps = noisy_behavior(&base, 0.7).unwrap();
        assert!((eps.probs(0)[2] - 0.775).abs() < 1e-15);
        assert!((eps.probs(0)[0] - 0.075).abs() < 1e-15);
        assert!(noisy_behavior(&base, 1.2).is_err());
    }

    #[test]
    fn single_tuple_dataset() {
        let m = single_state(0.5, 0.9);
        let pi = Policy::uniform("u", 1, 1);
        for mode in [SampleMode::Iid, SampleMode::Trajectory] {
            let d = sample_dataset(&m, &pi, 1, mode, 3).unwrap();
            assert_eq!(d.transitions, vec![Transition { s: 0, a: 0, r: 0.5, s_next: 0, index: 0 }]);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let m = random_mdp(1, 6, 2, 0.9);
        let pi = random_policy(1, 6, 2);
        for mode in [SampleMode::Iid, SampleMode::Trajectory] {
            let a = sample_dataset(&m, &pi, 500, mode, 42).unwrap();
            let b = sample_dataset(&m, &pi, 500, mode, 42).unwrap();
            let c = sample_dataset(&m, &pi, 500, mode, 43).unwrap();
            assert_eq!(a.transition_bytes(), b.transition_bytes());
            assert_ne!(a.transition_bytes(), c.transition_bytes());
            assert_eq!(a.n(), 500);
        }
    }

    #[test]
    fn iid_frequencies_track_occupancy() {
        let m = random_mdp(2, 5, 2, 0.8);
        let pi = random_policy(2, 5, 2);
        let mu = occupancy(&m, &pi).unwrap();
        let d = sample_dataset(&m, &pi, 200_000, SampleMode::Iid, 1).unwrap();
        let tv: f64 = d.empirical_distribution().iter().zip(&mu).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
        assert!(tv < 5e-3, "tv {tv}");
    }

    #[test]
    fn save_load_roundtrip_and_hash_check() {
        let m = random_mdp(3, 4, 3, 0.9);
        let pi = random_policy(3, 4, 3);
        let d = sample_dataset(&m, &pi, 64, SampleMode::Trajectory, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), d);

        let mut bytes = fs::read(dir.path().join(TRANSITIONS_FILE)).unwrap();
        bytes[19] ^= 0x01;
        fs::write(dir.path().join(TRANSITIONS_FILE), &bytes).unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::HashMismatch { .. })));
        bytes.pop();
        fs::write(dir.path().join(TRANSITIONS_FILE), &bytes).unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn bootstrap_basics() {
        let reps = bootstrap_indices(1, 5, 0).unwrap();
        assert!(reps.iter().all(|r| r.indices == vec![0]));
        let a = bootstrap_indices(50, 3, 9).unwrap();
        assert_eq!(a, bootstrap_indices(50, 3, 9).unwrap());
        let w = a[0].weights();
        assert!((w.entries.iter().map(|e| e.1).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_missing_fraction() {
        // (1 - 1/n)^n -> e^{-1}
        let n = 3200;
        let reps = bootstrap_indices(n, 200, 17).unwrap();
        let mut missing = 0.0;
        let mut mult = vec![0usize; n];
        for r in &reps {
            let mut seen = vec![false; n];
            for &i in &r.indices {
                seen[i] = true;
                mult[i] += 1;
            }
            missing += seen.iter().filter(|&&x| !x).count() as f64 / n as f64;
        }
        missing /= reps.len() as f64;
        assert!((missing - (-1.0f64).exp()).abs() < 0.01, "{missing}");
        let mean_mult = mult.iter().sum::<usize>() as f64 / (n * reps.len()) as f64;
        assert!((mean_mult - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mixing_counts() {
        let m = random_mdp(4, 4, 2, 0.9);
        let on = sample_dataset(&m, &random_policy(4, 4, 2), 120, SampleMode::Iid, 1).unwrap();
        let off = sample_dataset(&m, &random_policy(5, 4, 2), 120, SampleMode::Iid, 2).unwrap();
        let all_on = mix_datasets(&on, &off, 1.0, 100, 3).unwrap();
        assert!(all_on.origin.iter().all(|o| o.0 == MixSource::On));
        let all_off = mix_datasets(&on, &off, 0.0, 100, 3).unwrap();
        assert!(all_off.origin.iter().all(|o| o.0 == MixSource::Off));
        let half = mix_datasets(&on, &off, 0.5, 100, 3).unwrap();
        assert_eq!(half.on_count, 50);
        assert_eq!(half.origin.iter().filter(|o| o.0 == MixSource::On).count(), 50);
        for (t, &(src, i)) in half.dataset.transitions.iter().zip(&half.origin) {
            let orig = if src == MixSource::On { on.transitions[i] } else { off.transitions[i] };
            assert_eq!((t.s, t.a, t.s_next), (orig.s, orig.a, orig.s_next));
        }
        assert_eq!(half, mix_datasets(&on, &off, 0.5, 100, 3).unwrap());
        assert!(matches!(mix_datasets(&on, &off, 0.5, 300, 3), Err(Error::InsufficientData(_))));
    }
}
