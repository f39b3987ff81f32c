//! Few-shot evaluation protocol: seeded sampling, seed and fold aggregation,
//! grid search on a tuning dataset, shot curves and the head/kernel ablation.
//!
//! Each (seed, fold) unit owns a `ChaCha8Rng` seeded with the seed and placed
//! on a stream derived from the fold, so units can run in any order or in
//! parallel without changing what they sample.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{self, AdapterConfig, AdapterError, Method, ProbeConfig, SupportSet};
use crate::kernel::SpaceMap;
use crate::store::Dataset;

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("invalid shot count {0}: shots must be at least 1")]
    InvalidShots(usize),
    #[error("shot list must be nonempty and strictly ascending")]
    InvalidShotList,
    #[error("at least one seed is required")]
    NoSeeds,
    #[error("class {class} has no training samples")]
    EmptyClass { class: usize },
    #[error("fold {fold} does not exist ({available} folds)")]
    InvalidFold { fold: usize, available: usize },
    #[error("no query samples to evaluate")]
    EmptyQuery,
    #[error("missing space `{0}`")]
    MissingSpace(String),
    #[error("empty grid axis: {0}")]
    EmptyGrid(String),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
}

impl From<crate::kernel::KernelError> for ProtocolError {
    fn from(e: crate::kernel::KernelError) -> Self {
        ProtocolError::Adapter(AdapterError::Kernel(e))
    }
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

/// `(sample index, class index)`.
type Labeled = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FoldMode {
    /// Every cross-validation fold, or the official split if there are none.
    #[default]
    All,
    /// The official train/test split only.
    None,
}

impl std::str::FromStr for FoldMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "all" => Ok(FoldMode::All),
            "none" => Ok(FoldMode::None),
            other => Err(format!("unknown fold mode `{other}` (expected all or none)")),
        }
    }
}

/// Supports and queries for one (seed, fold) unit.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotTask {
    pub dataset: String,
    pub shots: usize,
    pub seed: u64,
    pub fold: Option<usize>,
    pub support_indices: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query_indices: Vec<usize>,
    pub query_labels: Vec<usize>,
    pub warnings: Vec<String>,
}

pub fn task_rng(seed: u64, fold: Option<usize>) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fold.map_or(0, |f| f as u64 + 1));
    rng
}

/// Draws `shots` training samples per class without replacement.
pub fn sample_task(ds: &Dataset, shots: usize, seed: u64, fold: Option<usize>) -> Result<FewShotTask> {
    if shots == 0 {
        return Err(ProtocolError::InvalidShots(shots));
    }
    let manifest = &ds.manifest;
    let (train, test): (Vec<Labeled>, Vec<Labeled>) = match fold {
        None => (manifest.train.clone(), manifest.test.clone()),
        Some(f) => {
            let folds = manifest.folds.as_deref().unwrap_or(&[]);
            let def = folds.get(f).ok_or(ProtocolError::InvalidFold {
                fold: f,
                available: folds.len(),
            })?;
            let labels = manifest.labels();
            (
                def.train.iter().map(|i| (*i, labels[i])).collect(),
                def.test.iter().map(|i| (*i, labels[i])).collect(),
            )
        }
    };
    let n = manifest.num_classes();
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (sample, class) in train {
        pools[class].push(sample);
    }
    let mut rng = task_rng(seed, fold);
    let mut support_indices = Vec::new();
    let mut support_labels = Vec::new();
    let mut warnings = Vec::new();
    for (class, pool) in pools.iter().enumerate() {
        if pool.is_empty() {
            return Err(ProtocolError::EmptyClass { class });
        }
        let mut chosen: Vec<usize> = if pool.len() <= shots {
            if pool.len() < shots {
                warnings.push(format!(
                    "class {class} ({}) has {} training samples for {shots} shots; using all",
                    manifest.class_names[class],
                    pool.len()
                ));
            }
            pool.clone()
        } else {
            rand::seq::index::sample(&mut rng, pool.len(), shots)
                .into_iter()
                .map(|i| pool[i])
                .collect()
        };
        chosen.sort_unstable();
        support_labels.extend(std::iter::repeat_n(class, chosen.len()));
        support_indices.extend(chosen);
    }
    let (query_indices, query_labels) = test.into_iter().unzip();
    Ok(FewShotTask {
        dataset: manifest.name.clone(),
        shots,
        seed,
        fold,
        support_indices,
        support_labels,
        query_indices,
        query_labels,
        warnings,
    })
}

fn rows(ds: &Dataset, indices: &[usize]) -> SpaceMap<Array2<f64>> {
    ds.embeddings
        .iter()
        .map(|(k, m)| (k.clone(), m.select(Axis(0), indices)))
        .collect()
}

fn check_spaces(ds: &Dataset, config: &AdapterConfig) -> Result<()> {
    for s in config.required_spaces() {
        if !ds.embeddings.contains_key(&s) {
            return Err(ProtocolError::MissingSpace(s));
        }
    }
    Ok(())
}

/// Fits the adapter on the task's supports and returns the query logits.
pub fn task_logits(ds: &Dataset, task: &FewShotTask, config: &AdapterConfig) -> Result<Array2<f64>> {
    check_spaces(ds, config)?;
    let support = SupportSet::new(
        rows(ds, &task.support_indices),
        task.support_labels.clone(),
        ds.manifest.num_classes(),
        task.shots,
    )?;
    let fitted = adapters::fit(config, support, &ds.heads)?;
    Ok(adapters::predict(&fitted, &rows(ds, &task.query_indices))?)
}

/// Fraction of queries classified correctly.
pub fn evaluate(ds: &Dataset, task: &FewShotTask, config: &AdapterConfig) -> Result<f64> {
    if task.query_indices.is_empty() {
        return Err(ProtocolError::EmptyQuery);
    }
    let logits = task_logits(ds, task, config)?;
    let predicted = adapters::predict_labels(logits.view());
    let correct = predicted
        .iter()
        .zip(&task.query_labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / task.query_labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub seed: u64,
    pub fold: Option<usize>,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub engine_version: String,
    pub dataset: String,
    pub method: Method,
    pub config: AdapterConfig,
    pub shots: usize,
    pub seeds: Vec<u64>,
    pub folds: FoldMode,
    /// Sorted by (seed, fold).
    pub entries: Vec<EvalEntry>,
    pub mean_accuracy: f64,
    pub warnings: Vec<String>,
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

fn fold_list(ds: &Dataset, folds: FoldMode) -> Vec<Option<usize>> {
    match (folds, ds.manifest.folds.as_ref()) {
        (FoldMode::All, Some(f)) if !f.is_empty() => (0..f.len()).map(Some).collect(),
        _ => vec![None],
    }
}

fn dataset_notes(ds: &Dataset) -> Vec<String> {
    let mut notes = vec!["embeddings and text heads are L2-normalized at load time".to_string()];
    if ds.manifest.synth.is_some() {
        notes.push("synthetic dataset: an engineering construction, not real encoder embeddings".to_string());
    }
    notes
}

/// Evaluates every (seed, fold) pair and aggregates.
pub fn run_protocol(ds: &Dataset, config: &AdapterConfig, shots: usize, seeds: &[u64], folds: FoldMode) -> Result<EvalReport> {
    if seeds.is_empty() {
        return Err(ProtocolError::NoSeeds);
    }
    if shots == 0 {
        return Err(ProtocolError::InvalidShots(shots));
    }
    config.validate()?;
    check_spaces(ds, config)?;
    let fold_ids = fold_list(ds, folds);
    let units: Vec<(u64, Option<usize>)> = seeds
        .iter()
        .flat_map(|&s| fold_ids.iter().map(move |&f| (s, f)))
        .collect();
    let results: Vec<(EvalEntry, Vec<String>)> = units
        .par_iter()
        .map(|&(seed, fold)| {
            let task = sample_task(ds, shots, seed, fold)?;
            let accuracy = evaluate(ds, &task, config)?;
            Ok((EvalEntry { seed, fold, accuracy }, task.warnings))
        })
        .collect::<Result<_>>()?;
    let mut entries = Vec::with_capacity(results.len());
    let mut warnings = BTreeSet::new();
    for (entry, w) in results {
        entries.push(entry);
        warnings.extend(w);
    }
    entries.sort_by_key(|e| (e.seed, e.fold));
    let mean_accuracy = mean(entries.iter().map(|e| e.accuracy));
    Ok(EvalReport {
        engine_version: ENGINE_VERSION.to_string(),
        dataset: ds.manifest.name.clone(),
        method: config.method,
        config: config.clone(),
        shots,
        seeds: seeds.to_vec(),
        folds,
        entries,
        mean_accuracy,
        warnings: warnings.into_iter().collect(),
        notes: dataset_notes(ds),
    })
}

pub const DEFAULT_SEEDS: [u64; 3] = [0, 1, 2];
pub const DEFAULT_ALPHAS: [f64; 6] = [0.1, 0.5, 1.0, 2.0, 4.0, 8.0];
/// Searched as `1 / lambda` in {0.01, 0.1, 1, 10, 100}.
pub const DEFAULT_LAMBDAS: [f64; 5] = [100.0, 10.0, 1.0, 0.1, 0.01];
pub const DEFAULT_BETAS: [f64; 6] = [0.5, 1.0, 2.0, 5.0, 10.0, 20.0];
pub const DEFAULT_TAUS: [f64; 4] = [1.0, 5.0, 10.0, 30.0];

/// Hyperparameter axes searched by [`tune`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperGrid {
    pub methods: Vec<Method>,
    pub alpha: Vec<f64>,
    pub lambda: Vec<f64>,
    pub tau: Vec<f64>,
    /// Bandwidths per space.
    pub beta: BTreeMap<String, Vec<f64>>,
    /// Head space for every method; defaults to the dataset's first space.
    #[serde(default)]
    pub head_space: Option<String>,
    #[serde(default)]
    pub probe: ProbeConfig,
}

impl HyperGrid {
    pub fn default_for(spaces: &[String]) -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            alpha: DEFAULT_ALPHAS.to_vec(),
            lambda: DEFAULT_LAMBDAS.to_vec(),
            tau: DEFAULT_TAUS.to_vec(),
            beta: spaces.iter().map(|s| (s.clone(), DEFAULT_BETAS.to_vec())).collect(),
            head_space: None,
            probe: ProbeConfig::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        let empty = |name: &str| Err(ProtocolError::EmptyGrid(name.to_string()));
        if self.methods.is_empty() {
            return empty("methods");
        }
        if self.alpha.is_empty() || self.alpha.iter().any(|a| !(*a >= 0.0)) {
            return empty("alpha (nonempty, nonnegative)");
        }
        if self.lambda.is_empty() || self.lambda.iter().any(|l| !(*l > 0.0)) {
            return empty("lambda (nonempty, positive)");
        }
        if self.tau.is_empty() || self.tau.iter().any(|t| !(*t > 0.0)) {
            return empty("tau (nonempty, positive)");
        }
        for (space, betas) in &self.beta {
            if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0)) {
                return empty(&format!("beta for `{space}` (nonempty, positive)"));
            }
        }
        Ok(())
    }

    fn betas(&self, space: &str) -> Result<&[f64]> {
        self.beta
            .get(space)
            .map(Vec::as_slice)
            .ok_or_else(|| ProtocolError::EmptyGrid(format!("beta for `{space}`")))
    }

    /// Every configuration the grid spans, with axes a method ignores
    /// collapsed to a single value.
    pub fn cells(&self, spaces: &[String]) -> Result<Vec<AdapterConfig>> {
        self.validate()?;
        let head = match &self.head_space {
            Some(h) => h.clone(),
            None => spaces.first().cloned().ok_or_else(|| ProtocolError::MissingSpace("<none>".into()))?,
        };
        if !spaces.contains(&head) {
            return Err(ProtocolError::MissingSpace(head));
        }
        let mut out = Vec::new();
        for &method in &self.methods {
            match method {
                Method::ZeroShot => out.push(AdapterConfig::zero_shot(&head)),
                Method::LinearProbe => out.push(AdapterConfig::linear_probe(&head, self.probe)),
                Method::Tip => {
                    for &alpha in &self.alpha {
                        for &tau in &self.tau {
                            for &beta in self.betas(&head)? {
                                out.push(AdapterConfig::tip(&head, alpha, beta)?.with_tau(tau));
                            }
                        }
                    }
                }
                Method::ProKeR => {
                    for &lambda in &self.lambda {
                        for &tau in &self.tau {
                            for &beta in self.betas(&head)? {
                                out.push(AdapterConfig::proker(&head, &head, beta, lambda)?.with_tau(tau));
                            }
                        }
                    }
                }
                Method::Muka => {
                    if spaces.len() < 2 {
                        return Err(ProtocolError::MissingSpace(
                            "muka needs at least two spaces".into(),
                        ));
                    }
                    let mut combos: Vec<Vec<f64>> = vec![vec![]];
                    for s in spaces {
                        let betas = self.betas(s)?;
                        combos = combos
                            .into_iter()
                            .flat_map(|c| {
                                betas.iter().map(move |&b| {
                                    let mut c = c.clone();
                                    c.push(b);
                                    c
                                })
                            })
                            .collect();
                    }
                    for &lambda in &self.lambda {
                        for &tau in &self.tau {
                            for combo in &combos {
                                let bw = spaces.iter().cloned().zip(combo.iter().copied());
                                out.push(AdapterConfig::muka(&head, bw, lambda)?.with_tau(tau));
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub config: AdapterConfig,
    pub mean_accuracy: f64,
}

fn uses_alpha(m: Method) -> bool {
    m == Method::Tip
}

fn uses_lambda(m: Method) -> bool {
    matches!(m, Method::ProKeR | Method::Muka)
}

fn uses_kernel(m: Method) -> bool {
    matches!(m, Method::Tip | Method::ProKeR | Method::Muka)
}

fn fmt_num(v: f64) -> String {
    format!("{v}")
}

/// Comma-separated grid table with a header row.
pub fn grid_table(rows: &[GridRow], spaces: &[String]) -> String {
    let mut out = String::from("method,alpha,lambda,tau");
    for s in spaces {
        out.push_str(&format!(",beta_{s}"));
    }
    out.push_str(",mean_accuracy\n");
    for r in rows {
        let c = &r.config;
        let m = c.method;
        let dash = || "-".to_string();
        let mut fields = vec![
            m.to_string(),
            if uses_alpha(m) { fmt_num(c.alpha) } else { dash() },
            if uses_lambda(m) { fmt_num(c.lambda) } else { dash() },
            if uses_kernel(m) { fmt_num(c.tau) } else { dash() },
        ];
        for s in spaces {
            let in_kernel = uses_kernel(m) && c.kernel.factors().iter().any(|(k, _)| *k == s.as_str());
            fields.push(if in_kernel {
                fmt_num(c.kernel.beta(s).unwrap())
            } else {
                dash()
            });
        }
        fields.push(format!("{:.6}", r.mean_accuracy));
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

fn tie_key(c: &AdapterConfig, spaces: &[String]) -> Vec<f64> {
    let mut key = vec![c.lambda, c.alpha];
    key.extend(spaces.iter().map(|s| c.kernel.beta(s).unwrap_or(0.0)));
    key.push(c.tau);
    key
}

/// Best configuration of one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunedConfig {
    pub config: AdapterConfig,
    pub mean_accuracy: f64,
}

/// Winning configurations, written by `tune` and read back by `eval --config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferFile {
    pub engine_version: String,
    pub source_dataset: String,
    pub shots: usize,
    pub seeds: Vec<u64>,
    pub best: BTreeMap<Method, TunedConfig>,
}

impl TransferFile {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("transfer file serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneResult {
    pub rows: Vec<GridRow>,
    pub transfer: TransferFile,
}

/// Exhaustive grid search. Per method the highest mean accuracy wins; ties go
/// to the smallest lambda, then alpha, then the per-space betas, then tau.
pub fn tune(ds: &Dataset, grid: &HyperGrid, shots: usize, seeds: &[u64], folds: FoldMode) -> Result<TuneResult> {
    let spaces = ds.manifest.space_names();
    let cells = grid.cells(&spaces)?;
    let rows: Vec<GridRow> = cells
        .into_par_iter()
        .map(|config| {
            let report = run_protocol(ds, &config, shots, seeds, folds)?;
            Ok(GridRow {
                config,
                mean_accuracy: report.mean_accuracy,
            })
        })
        .collect::<Result<_>>()?;
    let mut best: BTreeMap<Method, TunedConfig> = BTreeMap::new();
    for row in &rows {
        let replace = match best.get(&row.config.method) {
            None => true,
            Some(cur) => {
                row.mean_accuracy > cur.mean_accuracy
                    || (row.mean_accuracy == cur.mean_accuracy
                        && tie_key(&row.config, &spaces) < tie_key(&cur.config, &spaces))
            }
        };
        if replace {
            best.insert(
                row.config.method,
                TunedConfig {
                    config: row.config.clone(),
                    mean_accuracy: row.mean_accuracy,
                },
            );
        }
    }
    Ok(TuneResult {
        rows,
        transfer: TransferFile {
            engine_version: ENGINE_VERSION.to_string(),
            source_dataset: ds.manifest.name.clone(),
            shots,
            seeds: seeds.to_vec(),
            best,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShotsPoint {
    pub shots: usize,
    pub mean_accuracy: f64,
}

pub fn shots_curve(
    ds: &Dataset,
    config: &AdapterConfig,
    shots_list: &[usize],
    seeds: &[u64],
    folds: FoldMode,
) -> Result<Vec<ShotsPoint>> {
    if let Some(&k) = shots_list.iter().find(|&&k| k == 0) {
        return Err(ProtocolError::InvalidShots(k));
    }
    if shots_list.is_empty() || shots_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ProtocolError::InvalidShotList);
    }
    shots_list
        .iter()
        .map(|&shots| {
            let r = run_protocol(ds, config, shots, seeds, folds)?;
            Ok(ShotsPoint {
                shots,
                mean_accuracy: r.mean_accuracy,
            })
        })
        .collect()
}

pub fn shots_table(points: &[ShotsPoint]) -> String {
    let mut out = String::from("shots,mean_accuracy\n");
    for p in points {
        out.push_str(&format!("{},{:.6}\n", p.shots, p.mean_accuracy));
    }
    out
}

/// Hyperparameters shared by all four ablation rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationParams {
    pub lambda: f64,
    pub tau: f64,
    pub beta: BTreeMap<String, f64>,
}

impl AblationParams {
    pub fn uniform(spaces: &[String], beta: f64, lambda: f64) -> Self {
        Self {
            lambda,
            tau: 1.0,
            beta: spaces.iter().map(|s| (s.clone(), beta)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub zero_shot_space: String,
    pub residual_space: String,
    pub report: EvalReport,
}

/// The four head/kernel configurations, with the dataset's first space as
/// the fine-grained space and the second as the global one:
/// (a) head and kernel in the first space, (b) both in the second,
/// (c) head in the first with the kernel in the second,
/// (d) head in the first with the product kernel over both.
pub fn ablation_configs(spaces: &[String], params: &AblationParams) -> Result<Vec<(String, String, String, AdapterConfig)>> {
    if spaces.len() < 2 {
        return Err(ProtocolError::MissingSpace(
            "ablation needs two spaces".into(),
        ));
    }
    let (fine, global) = (&spaces[0], &spaces[1]);
    let beta = |s: &String| {
        params
            .beta
            .get(s)
            .copied()
            .ok_or_else(|| ProtocolError::EmptyGrid(format!("beta for `{s}`")))
    };
    let (bf, bg) = (beta(fine)?, beta(global)?);
    let single = |head: &String, space: &String, b: f64| -> Result<AdapterConfig> {
        Ok(AdapterConfig::proker(head, space, b, params.lambda)?.with_tau(params.tau))
    };
    let product = AdapterConfig::muka(fine, [(fine.clone(), bf), (global.clone(), bg)], params.lambda)?.with_tau(params.tau);
    Ok(vec![
        ("a".into(), fine.clone(), fine.clone(), single(fine, fine, bf)?),
        ("b".into(), global.clone(), global.clone(), single(global, global, bg)?),
        ("c".into(), fine.clone(), global.clone(), single(fine, global, bg)?),
        ("d".into(), fine.clone(), format!("{fine} x {global}"), product),
    ])
}

pub fn ablate(ds: &Dataset, shots: usize, seeds: &[u64], folds: FoldMode, params: &AblationParams) -> Result<Vec<AblationRow>> {
    let configs = ablation_configs(&ds.manifest.space_names(), params)?;
    configs
        .into_iter()
        .map(|(label, zero_shot_space, residual_space, config)| {
            Ok(AblationRow {
                label,
                zero_shot_space,
                residual_space,
                report: run_protocol(ds, &config, shots, seeds, folds)?,
            })
        })
        .collect()
}
