//! RBF kernels per feature space and their product composition.
//!
//! Each space `s` contributes `exp(-beta_s / 2 * ||a_s - b_s||^2)`. A product
//! kernel multiplies these factors, which is evaluated as a single exponential
//! of the summed exponents. Gram and cross-kernel matrices use the expansion
//! `||a - b||^2 = ||a||^2 + ||b||^2 - 2 a.b` so that each space costs one
//! matrix product.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Per-space vectors or matrices keyed by space name.
pub type SpaceMap<T> = BTreeMap<String, T>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("dimension mismatch in space `{space}`: {left} vs {right}")]
    DimensionMismatch {
        space: String,
        left: usize,
        right: usize,
    },
    #[error("row count mismatch in space `{space}`: expected {expected}, found {found}")]
    RowCountMismatch {
        space: String,
        expected: usize,
        found: usize,
    },
    #[error("missing space `{0}`")]
    MissingSpace(String),
    #[error("invalid kernel spec: {0}")]
    InvalidSpec(String),
}

pub type Result<T> = std::result::Result<T, KernelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bandwidth {
    pub space: String,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    Single(String),
    Product,
}

/// Bandwidths per space and how the per-space RBF factors are combined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub per_space: Vec<Bandwidth>,
    pub composition: Composition,
}

impl KernelSpec {
    pub fn single(space: impl Into<String>, beta: f64) -> Result<Self> {
        let space = space.into();
        let spec = Self {
            per_space: vec![Bandwidth {
                space: space.clone(),
                beta,
            }],
            composition: Composition::Single(space),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn product<S: Into<String>>(bandwidths: impl IntoIterator<Item = (S, f64)>) -> Result<Self> {
        let spec = Self {
            per_space: bandwidths
                .into_iter()
                .map(|(space, beta)| Bandwidth {
                    space: space.into(),
                    beta,
                })
                .collect(),
            composition: Composition::Product,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, b) in self.per_space.iter().enumerate() {
            if !(b.beta > 0.0 && b.beta.is_finite()) {
                return Err(KernelError::InvalidSpec(format!(
                    "bandwidth for `{}` must be positive, got {}",
                    b.space, b.beta
                )));
            }
            if self.per_space[..i].iter().any(|o| o.space == b.space) {
                return Err(KernelError::InvalidSpec(format!("space `{}` listed twice", b.space)));
            }
        }
        match &self.composition {
            Composition::Single(s) => {
                if !self.per_space.iter().any(|b| &b.space == s) {
                    return Err(KernelError::InvalidSpec(format!(
                        "single composition references unlisted space `{s}`"
                    )));
                }
            }
            Composition::Product => {
                if self.per_space.len() < 2 {
                    return Err(KernelError::InvalidSpec(
                        "product composition needs at least two spaces".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// The `(space, beta)` factors that enter the kernel.
    pub fn factors(&self) -> Vec<(&str, f64)> {
        match &self.composition {
            Composition::Single(s) => self
                .per_space
                .iter()
                .filter(|b| &b.space == s)
                .map(|b| (b.space.as_str(), b.beta))
                .collect(),
            Composition::Product => self.per_space.iter().map(|b| (b.space.as_str(), b.beta)).collect(),
        }
    }

    pub fn beta(&self, space: &str) -> Option<f64> {
        self.per_space.iter().find(|b| b.space == space).map(|b| b.beta)
    }

    pub fn is_product(&self) -> bool {
        self.composition == Composition::Product
    }
}

fn sq_dist(space: &str, a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(KernelError::DimensionMismatch {
            space: space.to_string(),
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// `exp(-beta / 2 * ||a - b||^2)`.
pub fn rbf_kernel(a: ArrayView1<f64>, b: ArrayView1<f64>, beta: f64) -> Result<f64> {
    let d = sq_dist("", a, b)?;
    Ok((-0.5 * beta * d).exp())
}

fn lookup<'a, T>(map: &'a SpaceMap<T>, space: &str) -> Result<&'a T> {
    map.get(space).ok_or_else(|| KernelError::MissingSpace(space.to_string()))
}

/// Kernel value between two multi-space points under any composition.
pub fn kernel_value(x: &SpaceMap<Array1<f64>>, y: &SpaceMap<Array1<f64>>, spec: &KernelSpec) -> Result<f64> {
    let mut exponent = 0.0;
    for (space, beta) in spec.factors() {
        let d = sq_dist(space, lookup(x, space)?.view(), lookup(y, space)?.view())?;
        exponent += 0.5 * beta * d;
    }
    Ok((-exponent).exp().min(1.0))
}

/// Product over spaces of the per-space RBF kernels.
pub fn product_kernel(x: &SpaceMap<Array1<f64>>, y: &SpaceMap<Array1<f64>>, spec: &KernelSpec) -> Result<f64> {
    if !spec.is_product() {
        return Err(KernelError::InvalidSpec("product_kernel requires a product composition".into()));
    }
    kernel_value(x, y, spec)
}

/// Symmetric matrix of kernel evaluations between all pairs of points.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    values: Array2<f64>,
}

impl GramMatrix {
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.values
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }
}

fn row_sq_norms(m: ArrayView2<f64>) -> Array1<f64> {
    m.map_axis(Axis(1), |r| r.dot(&r))
}

/// Accumulates `sum_s beta_s / 2 * ||q_s - p_s||^2` for every query/support pair.
fn exponents(
    queries: &SpaceMap<Array2<f64>>,
    supports: &SpaceMap<Array2<f64>>,
    spec: &KernelSpec,
) -> Result<Array2<f64>> {
    spec.validate()?;
    let factors = spec.factors();
    let (m, n) = {
        let (space, _) = factors[0];
        (lookup(queries, space)?.nrows(), lookup(supports, space)?.nrows())
    };
    let mut acc = Array2::<f64>::zeros((m, n));
    for (space, beta) in factors {
        let q = lookup(queries, space)?;
        let s = lookup(supports, space)?;
        if q.nrows() != m {
            return Err(KernelError::RowCountMismatch {
                space: space.to_string(),
                expected: m,
                found: q.nrows(),
            });
        }
        if s.nrows() != n {
            return Err(KernelError::RowCountMismatch {
                space: space.to_string(),
                expected: n,
                found: s.nrows(),
            });
        }
        if q.ncols() != s.ncols() {
            return Err(KernelError::DimensionMismatch {
                space: space.to_string(),
                left: q.ncols(),
                right: s.ncols(),
            });
        }
        let qn = row_sq_norms(q.view());
        let sn = row_sq_norms(s.view());
        let dots = q.dot(&s.t());
        let half_beta = 0.5 * beta;
        ndarray::Zip::indexed(&mut acc).and(&dots).for_each(|(i, j), a, &dot| {
            let d = (qn[i] + sn[j] - 2.0 * dot).max(0.0);
            *a += half_beta * d;
        });
    }
    Ok(acc)
}

/// `m x n` matrix of kernel values between queries and supports.
pub fn cross_kernel(
    queries: &SpaceMap<Array2<f64>>,
    supports: &SpaceMap<Array2<f64>>,
    spec: &KernelSpec,
) -> Result<Array2<f64>> {
    Ok(exponents(queries, supports, spec)?.mapv(|e| (-e).exp().min(1.0)))
}

/// Gram matrix `k(S, S)`; mirrored from the upper triangle with an exact unit
/// diagonal.
pub fn gram(points: &SpaceMap<Array2<f64>>, spec: &KernelSpec) -> Result<GramMatrix> {
    let mut values = cross_kernel(points, points, spec)?;
    let n = values.nrows();
    for i in 0..n {
        values[[i, i]] = 1.0;
        for j in i + 1..n {
            values[[j, i]] = values[[i, j]];
        }
    }
    Ok(GramMatrix { values })
}
