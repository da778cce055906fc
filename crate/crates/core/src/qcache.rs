//! Lazy Monte-Carlo Q-values and their on-disk cache.
//!
//! Selectors only ever read a candidate's Q-function at the `2n` points
//! `(s_t, a_t)` and `(s'_t, π)` of the dataset, plus (for model-based
//! selectors) the mixed backups `(T_{M_j} Q_{M_i})(s_t, a_t)`. All of these are
//! estimated once here by rollouts and then reused.
//!
//! Every rollout draws from its own stream keyed by
//! `(master_seed, field, model, [model_j,] data index, rollout index)`, so a
//! cache is a pure function of its inputs regardless of scheduling.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, MixSource, Mixture};
use crate::error::{Error, Result};
use crate::mdp::{Policy, PolicySampler, Simulator, TabularMdp};
use crate::rng::{stream, tag};

static ROLLOUTS: AtomicU64 = AtomicU64::new(0);

/// Total rollouts simulated by this process so far.
pub fn rollouts_performed() -> u64 {
    ROLLOUTS.load(Ordering::Relaxed)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutSpec {
    pub num_rollouts: usize,
    pub horizon: usize,
    pub master_seed: u64,
    /// Keep the first and second half of the rollouts as independent estimates.
    pub split: bool,
}

impl RolloutSpec {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("rollout horizon must be at least 1".into()));
        }
        if self.num_rollouts == 0 {
            return Err(Error::InvalidArgument("need at least one rollout".into()));
        }
        if self.split && (self.num_rollouts < 2 || !self.num_rollouts.is_multiple_of(2)) {
            return Err(Error::InvalidArgument(format!(
                "split rollouts need an even count >= 2, got {}",
                self.num_rollouts
            )));
        }
        Ok(())
    }
}

/// Full estimate plus the two half estimates (equal to the full one when not split).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub full: f64,
    pub half_a: f64,
    pub half_b: f64,
}

/// Simulators for a list of candidate models under one policy.
pub struct Estimator<'a> {
    sims: Vec<Simulator<'a>>,
    policy: PolicySampler,
    spec: RolloutSpec,
}

impl<'a> Estimator<'a> {
    pub fn new(models: &'a [TabularMdp], policy: &Policy, spec: &RolloutSpec) -> Result<Self> {
        spec.validate()?;
        for m in models {
            policy.check_model(m)?;
        }
        Ok(Estimator {
            sims: models.iter().map(Simulator::new).collect(),
            policy: PolicySampler::new(policy),
            spec: spec.clone(),
        })
    }

    fn average(&self, key: &[u64], mut one: impl FnMut(&mut crate::rng::StreamRng) -> f64) -> Estimate {
        let l = self.spec.num_rollouts;
        let mut full_key = Vec::with_capacity(key.len() + 1);
        full_key.extend_from_slice(key);
        full_key.push(0);
        let last = key.len();
        let mut run = |range: std::ops::Range<usize>| {
            let mut acc = 0.0;
            for r in range.clone() {
                full_key[last] = r as u64;
                let mut rng = stream(self.spec.master_seed, &full_key);
                acc += one(&mut rng);
            }
            acc / range.len() as f64
        };
        ROLLOUTS.fetch_add(l as u64, Ordering::Relaxed);
        if self.spec.split {
            let half_a = run(0..l / 2);
            let half_b = run(l / 2..l);
            Estimate { full: 0.5 * (half_a + half_b), half_a, half_b }
        } else {
            let full = run(0..l);
            Estimate { full, half_a: full, half_b: full }
        }
    }

    /// `Q_{M_i}^π(s, a)`.
    pub fn q(&self, i: usize, s: usize, a: usize, key: &[u64]) -> Estimate {
        let sim = &self.sims[i];
        let h = self.spec.horizon;
        self.average(key, |rng| sim.rollout(&self.policy, s, a, h, rng))
    }

    /// `Q_{M_i}^π(s', π)`, sampling `a' ~ π(·|s')` inside each rollout.
    pub fn q_next(&self, i: usize, s_next: usize, key: &[u64]) -> Estimate {
        let sim = &self.sims[i];
        let h = self.spec.horizon;
        self.average(key, |rng| {
            let a = self.policy.sample(s_next, rng);
            sim.rollout(&self.policy, s_next, a, h, rng)
        })
    }

    /// `(T_{M_j}^π Q_{M_i}^π)(s, a)`: first step in `M_j`, the rest in `M_i`.
    pub fn backup(&self, j: usize, i: usize, s: usize, a: usize, key: &[u64]) -> Estimate {
        let (first, rest) = (&self.sims[j], &self.sims[i]);
        let h = self.spec.horizon;
        self.average(key, |rng| first.mixed_rollout(rest, &self.policy, s, a, h, rng))
    }
}

fn check_state(model: &TabularMdp, s: usize, a: usize) -> Result<()> {
    if s >= model.num_states || a >= model.num_actions {
        return Err(Error::InvalidArgument(format!("({s}, {a}) out of range for {}", model.id)));
    }
    Ok(())
}

pub fn estimate_q(
    model: &TabularMdp,
    policy: &Policy,
    s: usize,
    a: usize,
    spec: &RolloutSpec,
    stream_tag: &[u64],
) -> Result<Estimate> {
    check_state(model, s, a)?;
    let models = std::slice::from_ref(model);
    Ok(Estimator::new(models, policy, spec)?.q(0, s, a, stream_tag))
}

pub fn estimate_q_next(
    model: &TabularMdp,
    policy: &Policy,
    s_next: usize,
    spec: &RolloutSpec,
    stream_tag: &[u64],
) -> Result<Estimate> {
    check_state(model, s_next, 0)?;
    let models = std::slice::from_ref(model);
    Ok(Estimator::new(models, policy, spec)?.q_next(0, s_next, stream_tag))
}

pub fn estimate_backup(
    model_j: &TabularMdp,
    model_i: &TabularMdp,
    policy: &Policy,
    s: usize,
    a: usize,
    spec: &RolloutSpec,
    stream_tag: &[u64],
) -> Result<Estimate> {
    if !model_j.same_shape(model_i) {
        return Err(Error::Dimension(format!("{} and {} differ in shape", model_j.id, model_i.id)));
    }
    check_state(model_j, s, a)?;
    let models = [model_j.clone(), model_i.clone()];
    Ok(Estimator::new(&models, policy, spec)?.backup(0, 1, s, a, stream_tag))
}

/// `manifest.json` of a cache directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub dataset_hash: String,
    pub policy_id: String,
    pub model_ids: Vec<String>,
    pub l: usize,
    #[serde(rename = "H")]
    pub horizon: usize,
    pub master_seed: u64,
    pub split: bool,
    pub with_backups: bool,
    pub n: usize,
    pub discount: f64,
    /// How `Q(s', π)` was estimated.
    pub q_next_action: String,
    /// Dataset hashes the entries were gathered from, when not rolled out directly.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gathered_from: Vec<String>,
    /// SHA-256 of every array file.
    #[serde(default)]
    pub files: BTreeMap<String, String>,
}

impl CacheManifest {
    pub fn spec(&self) -> RolloutSpec {
        RolloutSpec {
            num_rollouts: self.l,
            horizon: self.horizon,
            master_seed: self.master_seed,
            split: self.split,
        }
    }

    fn same_build(&self, other: &CacheManifest) -> bool {
        let strip = |m: &CacheManifest| CacheManifest { files: BTreeMap::new(), ..m.clone() };
        strip(self) == strip(other)
    }
}

pub const Q_NEXT_SAMPLED: &str = "sampled_from_policy";

/// Per-data-point Monte-Carlo estimates for `m` candidates and `n` tuples.
///
/// Matrices are `[m x n]` row-major; `backup` is `[m x m x n]` with
/// `backup[(i * m + j) * n + t] = (T_{M_j} Q_i)(s_t, a_t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct QCache {
    pub manifest: CacheManifest,
    pub q_sa: Vec<f64>,
    pub q_next: Vec<f64>,
    pub halves: Option<Halves>,
    pub backup: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Halves {
    pub q_sa_a: Vec<f64>,
    pub q_sa_b: Vec<f64>,
    pub q_next_a: Vec<f64>,
    pub q_next_b: Vec<f64>,
}

impl QCache {
    pub fn m(&self) -> usize {
        self.manifest.model_ids.len()
    }

    pub fn n(&self) -> usize {
        self.manifest.n
    }

    #[inline]
    pub fn q_sa(&self, i: usize, t: usize) -> f64 {
        self.q_sa[i * self.manifest.n + t]
    }

    #[inline]
    pub fn q_next(&self, i: usize, t: usize) -> f64 {
        self.q_next[i * self.manifest.n + t]
    }

    pub fn halves(&self) -> Result<&Halves> {
        self.halves.as_ref().ok_or(Error::MissingCacheField("split rollout halves"))
    }

    pub fn backups(&self) -> Result<&[f64]> {
        self.backup.as_deref().ok_or(Error::MissingCacheField("mixed-model backups"))
    }

    /// `(T_{M_j} Q_i)(s_t, a_t)`.
    #[inline]
    pub fn backup_at(backup: &[f64], m: usize, n: usize, i: usize, j: usize, t: usize) -> f64 {
        backup[(i * m + j) * n + t]
    }

    pub fn index_of(&self, model_id: &str) -> Option<usize> {
        self.manifest.model_ids.iter().position(|m| m == model_id)
    }

    /// Restricts the cache to a subset of candidates, in the given order.
    pub fn subset(&self, models: &[usize]) -> Result<QCache> {
        let (m, n) = (self.m(), self.n());
        if let Some(&bad) = models.iter().find(|&&i| i >= m) {
            return Err(Error::InvalidArgument(format!("model index {bad} out of range ({m})")));
        }
        let rows = |v: &[f64]| -> Vec<f64> {
            models.iter().flat_map(|&i| v[i * n..(i + 1) * n].iter().copied()).collect()
        };
        let halves = self.halves.as_ref().map(|h| Halves {
            q_sa_a: rows(&h.q_sa_a),
            q_sa_b: rows(&h.q_sa_b),
            q_next_a: rows(&h.q_next_a),
            q_next_b: rows(&h.q_next_b),
        });
        let backup = self.backup.as_ref().map(|b| {
            let mut out = Vec::with_capacity(models.len() * models.len() * n);
            for &i in models {
                for &j in models {
                    out.extend_from_slice(&b[(i * m + j) * n..(i * m + j + 1) * n]);
                }
            }
            out
        });
        let mut manifest = self.manifest.clone();
        manifest.model_ids = models.iter().map(|&i| self.manifest.model_ids[i].clone()).collect();
        manifest.files.clear();
        Ok(QCache { manifest, q_sa: rows(&self.q_sa), q_next: rows(&self.q_next), halves, backup })
    }

    /// Restricts the cache to the first `k` data points, for the dataset
    /// `prefix` (which must be that prefix of the cached dataset).
    pub fn prefix(&self, prefix: &Dataset) -> Result<QCache> {
        let (m, n, k) = (self.m(), self.n(), prefix.n());
        if k > n {
            return Err(Error::InvalidArgument(format!("prefix of {k} points from a cache of {n}")));
        }
        let cols = |v: &[f64], rows: usize| -> Vec<f64> {
            (0..rows).flat_map(|r| v[r * n..r * n + k].iter().copied()).collect()
        };
        let halves = self.halves.as_ref().map(|h| Halves {
            q_sa_a: cols(&h.q_sa_a, m),
            q_sa_b: cols(&h.q_sa_b, m),
            q_next_a: cols(&h.q_next_a, m),
            q_next_b: cols(&h.q_next_b, m),
        });
        let mut manifest = self.manifest.clone();
        manifest.dataset_hash = prefix.hash();
        manifest.n = k;
        manifest.gathered_from = vec![self.manifest.dataset_hash.clone()];
        manifest.files.clear();
        Ok(QCache {
            manifest,
            q_sa: cols(&self.q_sa, m),
            q_next: cols(&self.q_next, m),
            halves,
            backup: self.backup.as_ref().map(|b| cols(b, m * m)),
        })
    }

    /// Builds the cache of a mixed dataset by copying the entries of its
    /// source caches, without new rollouts.
    pub fn gather(mixture: &Mixture, on: &QCache, off: &QCache) -> Result<QCache> {
        if on.manifest.model_ids != off.manifest.model_ids
            || on.manifest.policy_id != off.manifest.policy_id
            || on.manifest.spec() != off.manifest.spec()
        {
            return Err(Error::InvalidArgument("source caches were built differently".into()));
        }
        let (m, n) = (on.m(), mixture.dataset.n());
        let pick = |a: &[f64], b: &[f64], na: usize, nb: usize, row: usize, t: usize| match mixture.origin[t] {
            (MixSource::On, k) => a[row * na + k],
            (MixSource::Off, k) => b[row * nb + k],
        };
        let (n_on, n_off) = (on.n(), off.n());
        let matrix = |a: &[f64], b: &[f64], rows: usize| -> Vec<f64> {
            (0..rows).flat_map(|r| (0..n).map(move |t| (r, t))).map(|(r, t)| pick(a, b, n_on, n_off, r, t)).collect()
        };
        let halves = match (&on.halves, &off.halves) {
            (Some(a), Some(b)) => Some(Halves {
                q_sa_a: matrix(&a.q_sa_a, &b.q_sa_a, m),
                q_sa_b: matrix(&a.q_sa_b, &b.q_sa_b, m),
                q_next_a: matrix(&a.q_next_a, &b.q_next_a, m),
                q_next_b: matrix(&a.q_next_b, &b.q_next_b, m),
            }),
            _ => None,
        };
        let backup = match (&on.backup, &off.backup) {
            (Some(a), Some(b)) => Some(matrix(a, b, m * m)),
            _ => None,
        };
        let mut manifest = on.manifest.clone();
        manifest.dataset_hash = mixture.dataset.hash();
        manifest.n = n;
        manifest.with_backups = backup.is_some();
        manifest.gathered_from = vec![on.manifest.dataset_hash.clone(), off.manifest.dataset_hash.clone()];
        manifest.files.clear();
        Ok(QCache {
            manifest,
            q_sa: matrix(&on.q_sa, &off.q_sa, m),
            q_next: matrix(&on.q_next, &off.q_next, m),
            halves,
            backup,
        })
    }

    fn arrays(&self) -> Vec<(&'static str, &[f64])> {
        let mut out: Vec<(&'static str, &[f64])> = vec![("q_sa.bin", &self.q_sa), ("q_next.bin", &self.q_next)];
        if let Some(h) = &self.halves {
            out.push(("q_sa_A.bin", &h.q_sa_a));
            out.push(("q_sa_B.bin", &h.q_sa_b));
            out.push(("q_next_A.bin", &h.q_next_a));
            out.push(("q_next_B.bin", &h.q_next_b));
        }
        if let Some(b) = &self.backup {
            out.push(("backup.bin", b));
        }
        out
    }
}

fn to_bytes(v: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(v.len() * 8);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn from_bytes(path: &Path, bytes: &[u8], expected_len: usize) -> Result<Vec<f64>> {
    if bytes.len() != expected_len * 8 {
        return Err(Error::Corrupt {
            path: path.display().to_string(),
            reason: format!("{} bytes, expected {}", bytes.len(), expected_len * 8),
        });
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub const CACHE_MANIFEST: &str = "manifest.json";

/// Writes the arrays and then the manifest (with per-file hashes).
pub fn save_cache(cache: &QCache, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = cache.manifest.clone();
    manifest.files.clear();
    for (name, data) in cache.arrays() {
        let bytes = to_bytes(data);
        manifest.files.insert(name.to_string(), sha256_hex(&bytes));
        fs::write(dir.join(name), bytes)?;
    }
    fs::write(dir.join(CACHE_MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Reads a cache, rejecting it when `dataset_hash` is given and differs, or
/// when any array file fails its size or hash check.
pub fn load_cache(dir: &Path, dataset_hash: Option<&str>) -> Result<QCache> {
    let manifest: CacheManifest = serde_json::from_slice(&fs::read(dir.join(CACHE_MANIFEST))?)?;
    if let Some(expected) = dataset_hash {
        if manifest.dataset_hash != expected {
            return Err(Error::HashMismatch { expected: expected.to_string(), found: manifest.dataset_hash });
        }
    }
    let (m, n) = (manifest.model_ids.len(), manifest.n);
    let read = |name: &str, len: usize| -> Result<Vec<f64>> {
        let path = dir.join(name);
        let bytes = fs::read(&path)?;
        let expected = manifest.files.get(name).ok_or_else(|| Error::Corrupt {
            path: path.display().to_string(),
            reason: "file not listed in manifest".into(),
        })?;
        let found = sha256_hex(&bytes);
        if &found != expected {
            from_bytes(&path, &bytes, len)?;
            return Err(Error::HashMismatch { expected: expected.clone(), found });
        }
        from_bytes(&path, &bytes, len)
    };
    let halves = if manifest.split {
        Some(Halves {
            q_sa_a: read("q_sa_A.bin", m * n)?,
            q_sa_b: read("q_sa_B.bin", m * n)?,
            q_next_a: read("q_next_A.bin", m * n)?,
            q_next_b: read("q_next_B.bin", m * n)?,
        })
    } else {
        None
    };
    let backup = if manifest.with_backups { Some(read("backup.bin", m * m * n)?) } else { None };
    Ok(QCache { q_sa: read("q_sa.bin", m * n)?, q_next: read("q_next.bin", m * n)?, halves, backup, manifest })
}

fn plan_manifest(data: &Dataset, models: &[TabularMdp], policy: &Policy, spec: &RolloutSpec, with_backups: bool) -> CacheManifest {
    CacheManifest {
        dataset_hash: data.hash(),
        policy_id: policy.id.clone(),
        model_ids: models.iter().map(|m| m.id.clone()).collect(),
        l: spec.num_rollouts,
        horizon: spec.horizon,
        master_seed: spec.master_seed,
        split: spec.split,
        with_backups,
        n: data.n(),
        discount: models[0].discount,
        q_next_action: Q_NEXT_SAMPLED.to_string(),
        gathered_from: Vec::new(),
        files: BTreeMap::new(),
    }
}

/// Estimates for one candidate: `[q_sa, q_next]` and, when split, their halves.
struct ModelBlock {
    q_sa: Vec<Estimate>,
    q_next: Vec<Estimate>,
}

fn model_block(est: &Estimator<'_>, data: &Dataset, i: usize) -> ModelBlock {
    let (q_sa, q_next) = data
        .transitions
        .par_iter()
        .map(|tr| {
            let t = tr.index as u64;
            (
                est.q(i, tr.s, tr.a, &[tag::Q_SA, i as u64, t]),
                est.q_next(i, tr.s_next, &[tag::Q_NEXT, i as u64, t]),
            )
        })
        .unzip();
    ModelBlock { q_sa, q_next }
}

fn backup_row(est: &Estimator<'_>, data: &Dataset, i: usize, m: usize) -> Vec<f64> {
    (0..m)
        .into_par_iter()
        .flat_map_iter(|j| {
            data.transitions.iter().map(move |tr| {
                est.backup(j, i, tr.s, tr.a, &[tag::BACKUP, i as u64, j as u64, tr.index as u64]).full
            })
        })
        .collect()
}

fn check_inputs(data: &Dataset, models: &[TabularMdp], policy: &Policy) -> Result<()> {
    if models.is_empty() {
        return Err(Error::InvalidArgument("no candidate models".into()));
    }
    for m in models {
        data.check_model(m)?;
        policy.check_model(m)?;
        if m.discount != models[0].discount {
            return Err(Error::InvalidArgument(format!("{} has a different discount", m.id)));
        }
    }
    for (k, t) in data.transitions.iter().enumerate() {
        if t.index != k {
            return Err(Error::InvalidArgument(format!("transition {k} carries index {}", t.index)));
        }
    }
    Ok(())
}

fn assemble(manifest: CacheManifest, blocks: Vec<ModelBlock>, backup: Option<Vec<f64>>) -> QCache {
    let flat = |f: &dyn Fn(&ModelBlock) -> Vec<f64>| -> Vec<f64> { blocks.iter().flat_map(f).collect() };
    let halves = manifest.split.then(|| Halves {
        q_sa_a: flat(&|b| b.q_sa.iter().map(|e| e.half_a).collect()),
        q_sa_b: flat(&|b| b.q_sa.iter().map(|e| e.half_b).collect()),
        q_next_a: flat(&|b| b.q_next.iter().map(|e| e.half_a).collect()),
        q_next_b: flat(&|b| b.q_next.iter().map(|e| e.half_b).collect()),
    });
    QCache {
        q_sa: flat(&|b| b.q_sa.iter().map(|e| e.full).collect()),
        q_next: flat(&|b| b.q_next.iter().map(|e| e.full).collect()),
        halves,
        backup,
        manifest,
    }
}

/// Estimates every cache entry for `data` under `policy` in memory.
pub fn build_cache(
    data: &Dataset,
    models: &[TabularMdp],
    policy: &Policy,
    spec: &RolloutSpec,
    with_backups: bool,
) -> Result<QCache> {
    check_inputs(data, models, policy)?;
    let est = Estimator::new(models, policy, spec)?;
    let m = models.len();
    let blocks: Vec<ModelBlock> = (0..m).map(|i| model_block(&est, data, i)).collect();
    let backup = with_backups.then(|| (0..m).flat_map(|i| backup_row(&est, data, i, m)).collect());
    Ok(assemble(plan_manifest(data, models, policy, spec, with_backups), blocks, backup))
}

const PARTIAL_DIR: &str = "partial";
const PLAN_FILE: &str = "plan.json";

fn block_bytes(b: &ModelBlock) -> Vec<u8> {
    let mut v = Vec::with_capacity(b.q_sa.len() * 6);
    for e in b.q_sa.iter().chain(&b.q_next) {
        v.extend([e.full, e.half_a, e.half_b]);
    }
    to_bytes(&v)
}

fn block_from_bytes(path: &Path, bytes: &[u8], n: usize) -> Result<ModelBlock> {
    let v = from_bytes(path, bytes, 6 * n)?;
    let est: Vec<Estimate> = v.chunks_exact(3).map(|c| Estimate { full: c[0], half_a: c[1], half_b: c[2] }).collect();
    let (q_sa, q_next) = est.split_at(n);
    Ok(ModelBlock { q_sa: q_sa.to_vec(), q_next: q_next.to_vec() })
}

/// Result of a bounded cache build.
#[derive(Debug)]
pub enum BuildOutcome {
    Complete(QCache),
    /// The chunk budget ran out; re-running resumes from the finished chunks.
    Interrupted { chunks_done: usize, chunks_total: usize },
}

/// Builds (or resumes, or reuses) the cache stored in `dir`.
///
/// Work is split into one chunk per candidate plus one chunk per backup row;
/// each finished chunk is persisted under `dir/partial` so an interrupted
/// build picks up where it stopped. `chunk_budget` caps how many chunks are
/// computed in this call.
pub fn build_cache_in_dir(
    dir: &Path,
    data: &Dataset,
    models: &[TabularMdp],
    policy: &Policy,
    spec: &RolloutSpec,
    with_backups: bool,
    chunk_budget: Option<usize>,
) -> Result<BuildOutcome> {
    check_inputs(data, models, policy)?;
    let plan = plan_manifest(data, models, policy, spec, with_backups);
    if dir.join(CACHE_MANIFEST).exists() {
        let existing = load_cache(dir, Some(&plan.dataset_hash))?;
        if existing.manifest.same_build(&plan) {
            return Ok(BuildOutcome::Complete(existing));
        }
        log::info!("cache at {} was built differently; rebuilding", dir.display());
    }
    let partial = dir.join(PARTIAL_DIR);
    let plan_path = partial.join(PLAN_FILE);
    let resumable = match fs::read(&plan_path) {
        Ok(bytes) => serde_json::from_slice::<CacheManifest>(&bytes).map(|p| p == plan).unwrap_or(false),
        Err(_) => false,
    };
    if !resumable && partial.exists() {
        fs::remove_dir_all(&partial)?;
    }
    fs::create_dir_all(&partial)?;
    fs::write(&plan_path, serde_json::to_vec_pretty(&plan)?)?;

    let est = Estimator::new(models, policy, spec)?;
    let (m, n) = (models.len(), data.n());
    let total = if with_backups { 2 * m } else { m };
    let mut budget = chunk_budget.unwrap_or(usize::MAX);
    let mut done = 0;
    let mut blocks = Vec::with_capacity(m);
    for i in 0..m {
        let path = partial.join(format!("model_{i:04}.bin"));
        let block = if path.exists() {
            block_from_bytes(&path, &fs::read(&path)?, n)?
        } else {
            if budget == 0 {
                return Ok(BuildOutcome::Interrupted { chunks_done: done, chunks_total: total });
            }
            budget -= 1;
            let b = model_block(&est, data, i);
            let tmp = path.with_extension("tmp");
            fs::write(&tmp, block_bytes(&b))?;
            fs::rename(&tmp, &path)?;
            b
        };
        done += 1;
        blocks.push(block);
    }
    let backup = if with_backups {
        let mut all = Vec::with_capacity(m * m * n);
        for i in 0..m {
            let path = partial.join(format!("backup_{i:04}.bin"));
            let row = if path.exists() {
                from_bytes(&path, &fs::read(&path)?, m * n)?
            } else {
                if budget == 0 {
                    return Ok(BuildOutcome::Interrupted { chunks_done: done, chunks_total: total });
                }
                budget -= 1;
                let r = backup_row(&est, data, i, m);
                let tmp = path.with_extension("tmp");
                fs::write(&tmp, to_bytes(&r))?;
                fs::rename(&tmp, &path)?;
                r
            };
            done += 1;
            all.extend(row);
        }
        Some(all)
    } else {
        None
    };
    let cache = assemble(plan, blocks, backup);
    save_cache(&cache, dir)?;
    fs::remove_dir_all(&partial)?;
    Ok(BuildOutcome::Complete(load_cache(dir, None)?))
}
