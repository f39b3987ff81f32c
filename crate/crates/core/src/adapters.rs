//! Training-free and linear-probe classifiers over cached embeddings.
//!
//! All cache-based methods share one shape: zero-shot logits from a text head
//! plus a kernel-weighted correction built from the support set.
//!
//! * Zero-shot: `tau * x^T W`.
//! * Tip: zero-shot plus `alpha * sum_i k(S_i, x) L_i` with a single-space RBF.
//! * ProKeR: zero-shot plus `sum_i k(S_i, x) gamma_i`, where
//!   `gamma = (I + K / lambda)^{-1} (L - W(S))` and `K = k(S, S)`.
//! * MUKA: ProKeR whose kernel is the product of per-space RBF kernels.
//! * Linear probe: multinomial logistic regression on one space.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{self, Composition, KernelError, KernelSpec, SpaceMap};
use crate::linalg::{self, LinalgError};
use crate::store::ZeroShotHead;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdapterError {
    #[error("space mismatch: expected `{expected}`, found `{found}`")]
    SpaceMismatch { expected: String, found: String },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("missing space `{0}`")]
    MissingSpace(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("linear system could not be solved: {0}")]
    SingularSystem(LinalgError),
    #[error("loss became non-finite at epoch {epoch}; lower the learning rate")]
    NonFiniteLoss { epoch: usize },
    #[error("invalid adapter config: {0}")]
    InvalidConfig(String),
    #[error("invalid support set: {0}")]
    InvalidSupport(String),
}

pub type Result<T> = std::result::Result<T, AdapterError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "zeroshot")]
    ZeroShot,
    #[serde(rename = "tip")]
    Tip,
    #[serde(rename = "proker")]
    ProKeR,
    #[serde(rename = "muka")]
    Muka,
    #[serde(rename = "linear-probe")]
    LinearProbe,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::ZeroShot,
        Method::Tip,
        Method::ProKeR,
        Method::Muka,
        Method::LinearProbe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::ZeroShot => "zeroshot",
            Method::Tip => "tip",
            Method::ProKeR => "proker",
            Method::Muka => "muka",
            Method::LinearProbe => "linear-probe",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "zeroshot" | "zero-shot" | "zero_shot" => Ok(Method::ZeroShot),
            "tip" | "tip-adapter" => Ok(Method::Tip),
            "proker" => Ok(Method::ProKeR),
            "muka" => Ok(Method::Muka),
            "linear-probe" | "linear_probe" | "linearprobe" | "lp" => Ok(Method::LinearProbe),
            other => Err(format!(
                "unknown method `{other}` (expected zeroshot, tip, proker, muka or linear-probe)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 500,
            weight_decay: 1e-4,
        }
    }
}

/// Method tag plus every hyperparameter a method may read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub method: Method,
    /// Residual scale for Tip.
    pub alpha: f64,
    pub kernel: KernelSpec,
    /// Proximal regularization; the system matrix is `I + K / lambda`.
    pub lambda: f64,
    /// Multiplier on the raw cosine zero-shot logits.
    pub tau: f64,
    /// Space whose text head provides the zero-shot logits (and the probe's features).
    pub zero_shot_space: String,
    #[serde(default)]
    pub probe: ProbeConfig,
}

impl AdapterConfig {
    fn base(method: Method, space: &str, kernel: KernelSpec) -> Self {
        Self {
            method,
            alpha: 1.0,
            kernel,
            lambda: 1.0,
            tau: 1.0,
            zero_shot_space: space.to_string(),
            probe: ProbeConfig::default(),
        }
    }

    pub fn zero_shot(space: &str) -> Self {
        Self::base(Method::ZeroShot, space, KernelSpec::single(space, 1.0).expect("unit bandwidth"))
    }

    pub fn tip(space: &str, alpha: f64, beta: f64) -> Result<Self> {
        let mut c = Self::base(Method::Tip, space, KernelSpec::single(space, beta)?);
        c.alpha = alpha;
        c.validate()?;
        Ok(c)
    }

    /// ProKeR with the zero-shot head in `head_space` and the kernel in `kernel_space`.
    pub fn proker(head_space: &str, kernel_space: &str, beta: f64, lambda: f64) -> Result<Self> {
        let mut c = Self::base(Method::ProKeR, head_space, KernelSpec::single(kernel_space, beta)?);
        c.lambda = lambda;
        c.validate()?;
        Ok(c)
    }

    pub fn muka<S: Into<String>>(
        head_space: &str,
        bandwidths: impl IntoIterator<Item = (S, f64)>,
        lambda: f64,
    ) -> Result<Self> {
        let mut c = Self::base(Method::Muka, head_space, KernelSpec::product(bandwidths)?);
        c.lambda = lambda;
        c.validate()?;
        Ok(c)
    }

    pub fn linear_probe(space: &str, probe: ProbeConfig) -> Self {
        let mut c = Self::base(Method::LinearProbe, space, KernelSpec::single(space, 1.0).expect("unit bandwidth"));
        c.probe = probe;
        c
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        let bad = |msg: String| Err(AdapterError::InvalidConfig(msg));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        match self.method {
            Method::Tip => {
                if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
                    return bad(format!("alpha must be nonnegative, got {}", self.alpha));
                }
                if self.kernel.is_product() {
                    return bad("tip uses a single-space kernel".into());
                }
            }
            Method::ProKeR | Method::Muka => {
                if !(self.lambda > 0.0 && self.lambda.is_finite()) {
                    return bad(format!("lambda must be positive, got {}", self.lambda));
                }
                let want_product = self.method == Method::Muka;
                if self.kernel.is_product() != want_product {
                    return bad(format!(
                        "{} uses a {} kernel",
                        self.method,
                        if want_product { "product" } else { "single-space" }
                    ));
                }
            }
            Method::LinearProbe => {
                let p = self.probe;
                if !(p.learning_rate > 0.0 && p.learning_rate.is_finite()) || !(p.weight_decay >= 0.0) {
                    return bad("probe needs a positive learning rate and nonnegative weight decay".into());
                }
            }
            Method::ZeroShot => {}
        }
        Ok(())
    }

    /// Spaces whose embeddings the method reads.
    pub fn required_spaces(&self) -> Vec<String> {
        let mut spaces = vec![self.zero_shot_space.clone()];
        if matches!(self.method, Method::Tip | Method::ProKeR | Method::Muka) {
            for (s, _) in self.kernel.factors() {
                if !spaces.iter().any(|x| x == s) {
                    spaces.push(s.to_string());
                }
            }
        }
        spaces
    }
}

/// The few-shot cache: per-space support embeddings and their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportSet {
    embeddings: SpaceMap<Array2<f64>>,
    labels: Vec<usize>,
    num_classes: usize,
    shots: usize,
}

impl SupportSet {
    /// `shots` is the requested per-class count; a class may hold fewer when
    /// its training pool is smaller, never more.
    pub fn new(embeddings: SpaceMap<Array2<f64>>, labels: Vec<usize>, num_classes: usize, shots: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(AdapterError::InvalidSupport("empty support set".into()));
        }
        if embeddings.is_empty() {
            return Err(AdapterError::InvalidSupport("no embedding spaces".into()));
        }
        for (space, m) in &embeddings {
            if m.nrows() != labels.len() {
                return Err(AdapterError::InvalidSupport(format!(
                    "space `{space}` has {} rows for {} labels",
                    m.nrows(),
                    labels.len()
                )));
            }
        }
        let mut counts = vec![0usize; num_classes];
        for &l in &labels {
            if l >= num_classes {
                return Err(AdapterError::InvalidSupport(format!(
                    "label {l} out of range for {num_classes} classes"
                )));
            }
            counts[l] += 1;
        }
        if let Some(c) = counts.iter().position(|&c| c > shots) {
            return Err(AdapterError::InvalidSupport(format!(
                "class {c} has {} supports, more than {shots} shots",
                counts[c]
            )));
        }
        Ok(Self {
            embeddings,
            labels,
            num_classes,
            shots,
        })
    }

    pub fn embeddings(&self) -> &SpaceMap<Array2<f64>> {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn shots(&self) -> usize {
        self.shots
    }

    /// `NK x N` one-hot label matrix `L`.
    pub fn onehot(&self) -> Array2<f64> {
        let mut l = Array2::zeros((self.labels.len(), self.num_classes));
        for (i, &c) in self.labels.iter().enumerate() {
            l[[i, c]] = 1.0;
        }
        l
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedAdapter {
    pub config: AdapterConfig,
    /// `NK x N` coefficients, ProKeR and MUKA only.
    pub gamma: Option<Array2<f64>>,
    pub support: SupportSet,
    pub heads: SpaceMap<ZeroShotHead>,
    /// `(dim + 1) x N` weights with the bias in the last row, linear probe only.
    pub probe_weights: Option<Array2<f64>>,
}

fn space<'a, T>(map: &'a SpaceMap<T>, name: &str) -> Result<&'a T> {
    map.get(name).ok_or_else(|| AdapterError::MissingSpace(name.to_string()))
}

/// `tau * X W` for a batch of rows in the head's space.
pub fn zero_shot_batch(queries: &SpaceMap<Array2<f64>>, head: &ZeroShotHead, tau: f64) -> Result<Array2<f64>> {
    let x = queries.get(&head.space_name).ok_or_else(|| AdapterError::SpaceMismatch {
        expected: head.space_name.clone(),
        found: queries.keys().cloned().collect::<Vec<_>>().join(","),
    })?;
    if x.ncols() != head.dim() {
        return Err(AdapterError::DimensionMismatch {
            expected: head.dim(),
            found: x.ncols(),
        });
    }
    let logits = x.dot(head.weights());
    Ok(if tau == 1.0 { logits } else { logits * tau })
}

fn as_batch(x: &SpaceMap<Array1<f64>>) -> SpaceMap<Array2<f64>> {
    x.iter()
        .map(|(k, v)| (k.clone(), v.clone().insert_axis(Axis(0))))
        .collect()
}

fn first_row(m: Array2<f64>) -> Array1<f64> {
    m.index_axis_move(Axis(0), 0)
}

/// Raw cosine zero-shot logits `x^T W` for one query.
pub fn zero_shot_logits(x: &SpaceMap<Array1<f64>>, head: &ZeroShotHead) -> Result<Array1<f64>> {
    zero_shot_batch(&as_batch(x), head, 1.0).map(first_row)
}

fn head_for<'a>(config: &AdapterConfig, heads: &'a SpaceMap<ZeroShotHead>) -> Result<&'a ZeroShotHead> {
    space(heads, &config.zero_shot_space)
}

/// Fits any configured method.
pub fn fit(config: &AdapterConfig, support: SupportSet, heads: &SpaceMap<ZeroShotHead>) -> Result<FittedAdapter> {
    config.validate()?;
    let head = head_for(config, heads)?;
    if head.num_classes() != support.num_classes() {
        return Err(AdapterError::InvalidSupport(format!(
            "support has {} classes, head has {}",
            support.num_classes(),
            head.num_classes()
        )));
    }
    for s in config.required_spaces() {
        space(support.embeddings(), &s)?;
    }
    let mut fitted = FittedAdapter {
        config: config.clone(),
        gamma: None,
        support,
        heads: heads.clone(),
        probe_weights: None,
    };
    match config.method {
        Method::ZeroShot | Method::Tip => {}
        Method::ProKeR | Method::Muka => {
            fitted.gamma = Some(solve_gamma(&fitted.support, head, &config.kernel, config.lambda, config.tau)?);
        }
        Method::LinearProbe => {
            let x = space(fitted.support.embeddings(), &config.zero_shot_space)?;
            fitted.probe_weights = Some(train_probe(x.view(), fitted.support.labels(), head.num_classes(), config.probe)?);
        }
    }
    Ok(fitted)
}

/// `gamma = (I + K / lambda)^{-1} (L - W(S))`.
fn solve_gamma(support: &SupportSet, head: &ZeroShotHead, spec: &KernelSpec, lambda: f64, tau: f64) -> Result<Array2<f64>> {
    let k = kernel::gram(support.embeddings(), spec)?.into_inner();
    let target = support.onehot() - zero_shot_batch(support.embeddings(), head, tau)?;
    let mut system = k / lambda;
    system.diag_mut().mapv_inplace(|d| d + 1.0);
    linalg::solve_spd(system.view(), target.view()).map_err(AdapterError::SingularSystem)
}

/// ProKeR (single kernel) or MUKA (product kernel) fit with `tau = 1`.
pub fn proker_fit(support: SupportSet, head: &ZeroShotHead, kernel: KernelSpec, lambda: f64) -> Result<FittedAdapter> {
    let method = if kernel.is_product() { Method::Muka } else { Method::ProKeR };
    let config = AdapterConfig {
        method,
        alpha: 0.0,
        kernel,
        lambda,
        tau: 1.0,
        zero_shot_space: head.space_name.clone(),
        probe: ProbeConfig::default(),
    };
    let heads = BTreeMap::from([(head.space_name.clone(), head.clone())]);
    fit(&config, support, &heads)
}

/// Logits for a batch of queries, `m x N`.
pub fn predict(fitted: &FittedAdapter, queries: &SpaceMap<Array2<f64>>) -> Result<Array2<f64>> {
    let config = &fitted.config;
    if config.method == Method::LinearProbe {
        let w = fitted.probe_weights.as_ref().expect("probe fitted with weights");
        let x = space(queries, &config.zero_shot_space)?;
        if x.ncols() + 1 != w.nrows() {
            return Err(AdapterError::DimensionMismatch {
                expected: w.nrows() - 1,
                found: x.ncols(),
            });
        }
        return Ok(probe_logits(x.view(), w.view()));
    }
    let head = head_for(config, &fitted.heads)?;
    let zs = zero_shot_batch(queries, head, config.tau)?;
    match config.method {
        Method::ZeroShot => Ok(zs),
        Method::Tip => {
            let k = kernel::cross_kernel(queries, fitted.support.embeddings(), &config.kernel)?;
            Ok(zs + config.alpha * k.dot(&fitted.support.onehot()))
        }
        Method::ProKeR | Method::Muka => {
            let gamma = fitted.gamma.as_ref().expect("kernel ridge adapter fitted with gamma");
            let k = kernel::cross_kernel(queries, fitted.support.embeddings(), &config.kernel)?;
            Ok(zs + k.dot(gamma))
        }
        Method::LinearProbe => unreachable!(),
    }
}

fn expect_method(fitted: &FittedAdapter, allowed: &[Method]) -> Result<()> {
    if allowed.contains(&fitted.config.method) {
        Ok(())
    } else {
        Err(AdapterError::InvalidConfig(format!(
            "adapter was fitted as {}",
            fitted.config.method
        )))
    }
}

/// Tip logits for a single query.
pub fn tip_adapter_logits(x: &SpaceMap<Array1<f64>>, fitted: &FittedAdapter) -> Result<Array1<f64>> {
    expect_method(fitted, &[Method::Tip])?;
    predict(fitted, &as_batch(x)).map(first_row)
}

/// ProKeR or MUKA logits for a single query.
pub fn proker_predict(x: &SpaceMap<Array1<f64>>, fitted: &FittedAdapter) -> Result<Array1<f64>> {
    expect_method(fitted, &[Method::ProKeR, Method::Muka])?;
    if fitted.config.method == Method::Muka && !matches!(fitted.config.kernel.composition, Composition::Product) {
        return Err(AdapterError::InvalidConfig("muka requires a product kernel".into()));
    }
    predict(fitted, &as_batch(x)).map(first_row)
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn predict_labels(logits: ArrayView2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn augment(x: ArrayView2<f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    let mut a = Array2::ones((n, d + 1));
    a.slice_mut(ndarray::s![.., ..d]).assign(&x);
    a
}

fn probe_logits(x: ArrayView2<f64>, w: ArrayView2<f64>) -> Array2<f64> {
    augment(x).dot(&w)
}

fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Mean cross-entropy plus `weight_decay / 2 * ||W||^2` (bias row excluded),
/// and its gradient with respect to `w`.
///
/// `x` is `n x d`, `w` is `(d + 1) x N` with the bias in the last row.
pub fn probe_loss_and_grad(x: ArrayView2<f64>, labels: &[usize], w: ArrayView2<f64>, weight_decay: f64) -> (f64, Array2<f64>) {
    let n = x.nrows();
    let d = x.ncols();
    let xa = augment(x);
    let z = xa.dot(&w);
    let mut loss = 0.0;
    for (row, &y) in z.rows().into_iter().zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
    }
    loss /= n as f64;
    let weights = w.slice(ndarray::s![..d, ..]);
    loss += 0.5 * weight_decay * weights.iter().map(|v| v * v).sum::<f64>();

    let mut p = z;
    softmax_rows(&mut p);
    for (i, &y) in labels.iter().enumerate() {
        p[[i, y]] -= 1.0;
    }
    let mut grad = xa.t().dot(&p) / n as f64;
    grad.slice_mut(ndarray::s![..d, ..]).scaled_add(weight_decay, &weights);
    (loss, grad)
}

fn train_probe(x: ArrayView2<f64>, labels: &[usize], num_classes: usize, probe: ProbeConfig) -> Result<Array2<f64>> {
    let mut w = Array2::zeros((x.ncols() + 1, num_classes));
    for epoch in 0..probe.epochs {
        let (loss, grad) = probe_loss_and_grad(x, labels, w.view(), probe.weight_decay);
        if !loss.is_finite() {
            return Err(AdapterError::NonFiniteLoss { epoch });
        }
        w.scaled_add(-probe.learning_rate, &grad);
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(AdapterError::NonFiniteLoss { epoch: probe.epochs });
    }
    let (loss, _) = probe_loss_and_grad(x, labels, w.view(), probe.weight_decay);
    if !loss.is_finite() {
        return Err(AdapterError::NonFiniteLoss { epoch: probe.epochs });
    }
    Ok(w)
}

/// Multinomial logistic regression on the support embeddings of `space`.
pub fn linear_probe_fit(support: SupportSet, space_name: &str, probe: ProbeConfig) -> Result<FittedAdapter> {
    let config = AdapterConfig::linear_probe(space_name, probe);
    config.validate()?;
    let x = space(support.embeddings(), space_name)?;
    let w = train_probe(x.view(), support.labels(), support.num_classes(), probe)?;
    Ok(FittedAdapter {
        config,
        gamma: None,
        support,
        heads: BTreeMap::new(),
        probe_weights: Some(w),
    })
}
