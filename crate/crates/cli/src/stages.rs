use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use opesel_core::data::{noisy_behavior, sample_dataset, Dataset, SampleMode};
use opesel_core::env::{make_grid, make_target_policies, sanity_check_grid, GridManifest, SanityReport};
use opesel_core::mdp::{default_horizon, occupancy, Policy, TabularMdp};
use opesel_core::qcache::{build_cache_in_dir, BuildOutcome, QCache, RolloutSpec};
use opesel_core::runner::{
    coverage_sweep, gap_sweep, misspec_sweep, run_unit, write_aggregate_csv, write_losses_csv, write_report_csv,
    write_targets_csv, CoverageSource, ExperimentUnit, UnitInputs, UnitReport,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{content_hash, BehaviorSpec, RunConfig};
use crate::CliError;

pub const CACHE_DIR_ENV: &str = "OPESEL_CACHE_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Gen,
    Sample,
    Cache,
    Select,
    Sweep(SweepKind),
    Report,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepKind {
    Gap,
    Misspec,
    Coverage,
}

impl SweepKind {
    fn name(self) -> &'static str {
        match self {
            SweepKind::Gap => "gap",
            SweepKind::Misspec => "misspec",
            SweepKind::Coverage => "coverage",
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Options {
    /// Build the mixed-model backups even if the config does not ask for them.
    pub with_backups: bool,
    /// Proceed past a failed sanity check and recompute existing outputs.
    pub force: bool,
    /// Stop each cache build after this many new chunks; a later run resumes.
    pub chunk_budget: Option<usize>,
    /// Cache root; `OPESEL_CACHE_DIR` or `<output_dir>/cache` when unset.
    pub cache_root: Option<PathBuf>,
}

/// Written next to each stage's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StageManifest {
    stage: String,
    inputs_hash: String,
    files: BTreeMap<String, String>,
    #[serde(default)]
    note: Option<String>,
}

const STAGE_FILE: &str = "stage.json";

fn sha256_file(path: &Path) -> Result<String, CliError> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Stale(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn write_stage(dir: &Path, stage: &str, inputs_hash: &str, files: &[&str], note: Option<String>) -> Result<(), CliError> {
    let mut hashes = BTreeMap::new();
    for f in files {
        hashes.insert(f.to_string(), sha256_file(&dir.join(f))?);
    }
    write_json(&dir.join(STAGE_FILE), &StageManifest { stage: stage.into(), inputs_hash: inputs_hash.into(), files: hashes, note })
}

/// Loads a stage manifest and checks it was produced from `inputs_hash` and
/// that its files are intact.
fn check_stage(dir: &Path, stage: &str, inputs_hash: &str) -> Result<StageManifest, CliError> {
    let path = dir.join(STAGE_FILE);
    if !path.exists() {
        return Err(CliError::Stale(format!("{} has no {stage} outputs; run `opesel {stage}` first", dir.display())));
    }
    let m: StageManifest = read_json(&path)?;
    if m.inputs_hash != inputs_hash {
        return Err(CliError::Stale(format!(
            "{} was produced from a different configuration; re-run `opesel {stage}`",
            dir.display()
        )));
    }
    for (f, h) in &m.files {
        if sha256_file(&dir.join(f))? != *h {
            return Err(CliError::Stale(format!("{} changed since `opesel {stage}` wrote it", dir.join(f).display())));
        }
    }
    Ok(m)
}

/// Everything resolved from the configuration and the on-disk stages.
struct Paths {
    gen: PathBuf,
    data: PathBuf,
    reports: PathBuf,
    cache_root: PathBuf,
}

impl Paths {
    fn new(cfg: &RunConfig, opts: &Options) -> Paths {
        let out = &cfg.output_dir;
        let cache_root = opts
            .cache_root
            .clone()
            .or_else(|| std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| out.join("cache"));
        Paths { gen: out.join("gen"), data: out.join("data"), reports: out.join("reports"), cache_root }
    }
}

fn gen_hash(cfg: &RunConfig) -> String {
    content_hash(&(&cfg.world, &cfg.grid, cfg.groundtruth, cfg.targets.count))
}

fn data_hash_inputs(cfg: &RunConfig, role: &str, behavior: &BehaviorSpec, seed: u64) -> String {
    content_hash(&(gen_hash(cfg), role, behavior, cfg.n, cfg.mode, seed))
}

fn dataset_seed(cfg: &RunConfig, role: &str) -> u64 {
    match role {
        "main" => cfg.master_seed,
        _ => cfg.master_seed.wrapping_add(1),
    }
}

fn roles(cfg: &RunConfig) -> Vec<(&'static str, BehaviorSpec)> {
    let mut out = vec![("main", cfg.behavior.clone())];
    if let Some(cov) = &cfg.sweeps.coverage {
        out.push(("off", cov.off_behavior.clone()));
    }
    out
}

struct Generated {
    models: Vec<TabularMdp>,
    policies: Vec<Policy>,
}

impl Generated {
    fn groundtruth<'a>(&'a self, cfg: &RunConfig) -> &'a TabularMdp {
        &self.models[cfg.groundtruth]
    }

    fn policy(&self, id: &str) -> Result<&Policy, CliError> {
        self.policies.iter().find(|p| p.id == id).ok_or_else(|| CliError::Config(format!("unknown policy {id}")))
    }

    fn behavior(&self, spec: &BehaviorSpec) -> Result<Policy, CliError> {
        let gt = &self.models[0];
        Ok(match spec {
            BehaviorSpec::Target { policy } => self.policy(policy)?.clone(),
            BehaviorSpec::Noisy { policy, act_prob } => noisy_behavior(self.policy(policy)?, *act_prob)?,
            BehaviorSpec::Uniform => Policy::uniform("uniform", gt.num_states, gt.num_actions),
        })
    }
}

fn load_gen(cfg: &RunConfig, paths: &Paths) -> Result<Generated, CliError> {
    check_stage(&paths.gen, "gen", &gen_hash(cfg))?;
    Ok(Generated { models: read_json(&paths.gen.join("models.json"))?, policies: read_json(&paths.gen.join("policies.json"))? })
}

fn load_data(cfg: &RunConfig, paths: &Paths, gen: &Generated, role: &str) -> Result<(Dataset, Vec<f64>), CliError> {
    let (_, spec) = roles(cfg)
        .into_iter()
        .find(|(r, _)| *r == role)
        .ok_or_else(|| CliError::Config(format!("no {role} dataset configured")))?;
    let dir = paths.data.join(role);
    check_stage(&dir, "sample", &data_hash_inputs(cfg, role, &spec, dataset_seed(cfg, role)))?;
    let data = Dataset::load(&dir)?;
    let behavior = gen.behavior(&spec)?;
    let dist = match data.mode {
        SampleMode::Iid => occupancy(gen.groundtruth(cfg), &behavior)?,
        SampleMode::Trajectory => data.empirical_distribution(),
    };
    Ok((data, dist))
}

fn rollout_spec(cfg: &RunConfig, gen: &Generated) -> RolloutSpec {
    let gamma = gen.groundtruth(cfg).discount;
    RolloutSpec {
        num_rollouts: cfg.rollouts.num_rollouts,
        horizon: cfg.rollouts.horizon.unwrap_or_else(|| default_horizon(gamma)),
        master_seed: cfg.master_seed,
        split: cfg.rollouts.split,
    }
}

fn cache_dir(paths: &Paths, data: &Dataset, policy_id: &str, spec: &RolloutSpec, backups: bool) -> PathBuf {
    let hash = data.hash();
    let name = format!(
        "{policy_id}-l{}-H{}-s{}{}{}",
        spec.num_rollouts,
        spec.horizon,
        spec.master_seed,
        if spec.split { "-split" } else { "" },
        if backups { "-backups" } else { "" }
    );
    paths.cache_root.join(&hash[..16]).join(name)
}

fn load_caches(
    cfg: &RunConfig,
    opts: &Options,
    paths: &Paths,
    gen: &Generated,
    data: &Dataset,
) -> Result<Vec<QCache>, CliError> {
    let spec = rollout_spec(cfg, gen);
    let backups = cfg.rollouts.with_backups || opts.with_backups;
    let hash = data.hash();
    cfg.evaluated_targets()
        .iter()
        .map(|pid| {
            let dir = cache_dir(paths, data, pid, &spec, backups);
            if !dir.join(opesel_core::qcache::CACHE_MANIFEST).exists() {
                return Err(CliError::Stale(format!("no cache at {}; run `opesel cache` first", dir.display())));
            }
            let cache = opesel_core::qcache::load_cache(&dir, Some(&hash))?;
            if cache.manifest.spec() != spec {
                return Err(CliError::Stale(format!("cache at {} was built with other rollout settings", dir.display())));
            }
            Ok(cache)
        })
        .collect()
}

fn base_unit(cfg: &RunConfig, gen: &Generated, behavior_id: &str) -> ExperimentUnit {
    ExperimentUnit {
        unit_id: "main".into(),
        groundtruth_id: gen.groundtruth(cfg).id.clone(),
        candidate_ids: gen.models.iter().map(|m| m.id.clone()).collect(),
        behavior_id: behavior_id.into(),
        n: cfg.n,
        target_policy_ids: cfg.evaluated_targets(),
        selectors: cfg.selectors.clone(),
        rollout_spec: rollout_spec(cfg, gen),
        bootstrap_reps: cfg.bootstrap_reps,
        master_seed: cfg.master_seed,
    }
}

fn write_reports(dir: &Path, reports: &[UnitReport]) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    write_report_csv(&dir.join("report.csv"), reports)?;
    write_aggregate_csv(&dir.join("aggregate.csv"), reports)?;
    write_losses_csv(&dir.join("losses.csv"), reports)?;
    write_targets_csv(&dir.join("targets.csv"), reports)?;
    Ok(())
}

fn cmd_gen(cfg: &RunConfig, opts: &Options, paths: &Paths) -> Result<(), CliError> {
    let grid = make_grid(&cfg.world, cfg.grid.axis, &cfg.grid.spec())?;
    let policies = make_target_policies(&grid.models[cfg.groundtruth], cfg.targets.count)?;
    let sanity: SanityReport = sanity_check_grid(&grid.models, &policies)?;
    let manifest: GridManifest = grid.manifest(&cfg.world);
    fs::create_dir_all(&paths.gen)?;
    // Drop any previous stage marker so a failed check leaves nothing usable.
    let _ = fs::remove_file(paths.gen.join(STAGE_FILE));
    write_json(&paths.gen.join("grid.json"), &manifest)?;
    write_json(&paths.gen.join("models.json"), &grid.models)?;
    write_json(&paths.gen.join("policies.json"), &policies)?;
    write_json(&paths.gen.join("sanity.json"), &sanity)?;
    let mut note = None;
    if !sanity.passed() {
        let msg = format!(
            "degenerate grid (threshold {:.4}): across models {}, across policies {}",
            sanity.threshold, sanity.degenerate_in_models, sanity.degenerate_in_policies
        );
        if !opts.force {
            return Err(CliError::Sanity(format!("{msg}; pass --force to continue anyway")));
        }
        log::warn!("{msg}; continuing because of --force");
        note = Some(format!("sanity overridden: {msg}"));
    }
    write_stage(&paths.gen, "gen", &gen_hash(cfg), &["grid.json", "models.json", "policies.json", "sanity.json"], note)?;
    log::info!("generated {} models and {} target policies", grid.models.len(), policies.len());
    Ok(())
}

fn cmd_sample(cfg: &RunConfig, opts: &Options, paths: &Paths) -> Result<(), CliError> {
    let gen = load_gen(cfg, paths)?;
    for (role, spec) in roles(cfg) {
        let dir = paths.data.join(role);
        let seed = dataset_seed(cfg, role);
        let inputs = data_hash_inputs(cfg, role, &spec, seed);
        if !opts.force && check_stage(&dir, "sample", &inputs).is_ok() {
            log::info!("{role} dataset up to date");
            continue;
        }
        let behavior = gen.behavior(&spec)?;
        let data = sample_dataset(gen.groundtruth(cfg), &behavior, cfg.n, cfg.mode, seed)?;
        let _ = fs::remove_file(dir.join(STAGE_FILE));
        data.save(&dir)?;
        write_stage(&dir, "sample", &inputs, &["manifest.json", "transitions.bin"], None)?;
        log::info!("sampled {} tuples for {role} ({})", data.n(), data.hash());
    }
    Ok(())
}

fn cmd_cache(cfg: &RunConfig, opts: &Options, paths: &Paths) -> Result<(), CliError> {
    let gen = load_gen(cfg, paths)?;
    let spec = rollout_spec(cfg, &gen);
    let backups = cfg.rollouts.with_backups || opts.with_backups;
    for (role, _) in roles(cfg) {
        let (data, _) = load_data(cfg, paths, &gen, role)?;
        for pid in cfg.evaluated_targets() {
            let policy = gen.policy(&pid)?;
            let dir = cache_dir(paths, &data, &pid, &spec, backups);
            if opts.force && dir.exists() {
                fs::remove_dir_all(&dir)?;
            }
            match build_cache_in_dir(&dir, &data, &gen.models, policy, &spec, backups, opts.chunk_budget)? {
                BuildOutcome::Complete(_) => log::info!("cache ready at {}", dir.display()),
                BuildOutcome::Interrupted { chunks_done, chunks_total } => {
                    log::warn!("cache at {} stopped after {chunks_done}/{chunks_total} chunks", dir.display())
                }
            }
        }
    }
    Ok(())
}

fn cmd_select(cfg: &RunConfig, opts: &Options, paths: &Paths) -> Result<Vec<UnitReport>, CliError> {
    let gen = load_gen(cfg, paths)?;
    let (data, dist) = load_data(cfg, paths, &gen, "main")?;
    let caches = load_caches(cfg, opts, paths, &gen, &data)?;
    let unit = base_unit(cfg, &gen, &data.behavior_id);
    let inputs = UnitInputs { models: &gen.models, targets: &gen.policies, data: &data, caches: &caches, data_dist: &dist };
    let reports = vec![run_unit(&unit, &inputs)?];
    write_reports(&paths.reports.join("select"), &reports)?;
    Ok(reports)
}

fn cmd_sweep(cfg: &RunConfig, opts: &Options, paths: &Paths, kind: SweepKind) -> Result<Vec<UnitReport>, CliError> {
    let gen = load_gen(cfg, paths)?;
    let (data, dist) = load_data(cfg, paths, &gen, "main")?;
    let caches = load_caches(cfg, opts, paths, &gen, &data)?;
    let unit = base_unit(cfg, &gen, &data.behavior_id);
    let inputs = UnitInputs { models: &gen.models, targets: &gen.policies, data: &data, caches: &caches, data_dist: &dist };
    let missing = || CliError::Config(format!("sweeps.{} is not configured", kind.name()));
    let reports = match kind {
        SweepKind::Gap => {
            let gap = cfg.sweeps.gap.as_ref().ok_or_else(missing)?;
            gap_sweep(&unit, &inputs, cfg.groundtruth, &gap.radii)?
        }
        SweepKind::Misspec => {
            let ms = cfg.sweeps.misspec.as_ref().ok_or_else(missing)?;
            misspec_sweep(&unit, &inputs, ms.window, &ms.offsets)?
        }
        SweepKind::Coverage => {
            let cov = cfg.sweeps.coverage.as_ref().ok_or_else(missing)?;
            let (off, off_dist) = load_data(cfg, paths, &gen, "off")?;
            let off_caches = load_caches(cfg, opts, paths, &gen, &off)?;
            coverage_sweep(
                &unit,
                &gen.models,
                &gen.policies,
                CoverageSource { data: &data, caches: &caches, data_dist: &dist },
                CoverageSource { data: &off, caches: &off_caches, data_dist: &off_dist },
                &cov.lambdas,
            )?
        }
    };
    write_reports(&paths.reports.join(format!("sweep_{}", kind.name())), &reports)?;
    Ok(reports)
}

/// Prints every aggregate table found under the reports directory.
fn cmd_report(paths: &Paths) -> Result<(), CliError> {
    let mut dirs: Vec<PathBuf> = match fs::read_dir(&paths.reports) {
        Ok(rd) => rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.join("aggregate.csv").exists()).collect(),
        Err(_) => Vec::new(),
    };
    if dirs.is_empty() {
        return Err(CliError::Stale(format!("no reports under {}; run `opesel select` first", paths.reports.display())));
    }
    dirs.sort();
    let mut out = String::new();
    for dir in dirs {
        out.push_str(&format!("== {} ==\n", dir.file_name().unwrap_or_default().to_string_lossy()));
        out.push_str(&format!("{:<24} {:<36} {:>12} {:>12} {:>12}\n", "unit", "selector", "mean_error", "ci_low", "ci_high"));
        let text = fs::read_to_string(dir.join("aggregate.csv"))?;
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() == 5 {
                let num = |s: &str| s.parse::<f64>().map(|x| format!("{x:.5}")).unwrap_or_else(|_| s.to_string());
                out.push_str(&format!("{:<24} {:<36} {:>12} {:>12} {:>12}\n", f[0], f[1], num(f[2]), num(f[3]), num(f[4])));
            }
        }
        out.push('\n');
    }
    print!("{out}");
    fs::write(paths.reports.join("summary.txt"), out)?;
    Ok(())
}

/// Validates the configuration and runs one stage.
pub fn run_stage(stage: Stage, config_path: &Path, opts: &Options) -> Result<(), CliError> {
    let cfg = RunConfig::load(config_path)?;
    let paths = Paths::new(&cfg, opts);
    match stage {
        Stage::Gen => cmd_gen(&cfg, opts, &paths),
        Stage::Sample => cmd_sample(&cfg, opts, &paths),
        Stage::Cache => cmd_cache(&cfg, opts, &paths),
        Stage::Select => cmd_select(&cfg, opts, &paths).map(|_| ()),
        Stage::Sweep(kind) => cmd_sweep(&cfg, opts, &paths, kind).map(|_| ()),
        Stage::Report => cmd_report(&paths),
    }
}

/// `select`, returning the reports it wrote.
pub fn run_select(config_path: &Path, opts: &Options) -> Result<Vec<UnitReport>, CliError> {
    let cfg = RunConfig::load(config_path)?;
    cmd_select(&cfg, opts, &Paths::new(&cfg, opts))
}

/// `sweep <kind>`, returning the reports it wrote.
pub fn run_sweep(config_path: &Path, opts: &Options, kind: SweepKind) -> Result<Vec<UnitReport>, CliError> {
    let cfg = RunConfig::load(config_path)?;
    cmd_sweep(&cfg, opts, &Paths::new(&cfg, opts), kind)
}
