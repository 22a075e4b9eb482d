//! Squared-exponential kernel over scalar time inputs.
//!
//! Hyperparameters are stored in log space so that any finite parameter
//! vector maps to a valid kernel. Gram matrices are factorized with a small
//! diagonal jitter proportional to the signal variance; when the Cholesky
//! factorization fails the jitter is escalated by a factor of ten until
//! [`MAX_RELATIVE_JITTER`] is reached.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use nalgebra::{Cholesky, DMatrix, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{PrgpError, Result};

/// Jitter used when a factorization fails and no jitter was configured.
pub const MIN_RELATIVE_JITTER: f64 = 1e-8;
/// Largest relative jitter tried before giving up.
pub const MAX_RELATIVE_JITTER: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelHyperparams {
    pub log_lengthscale: f64,
    pub log_signal_variance: f64,
    /// Relative diagonal jitter (multiplied by the signal variance). Fixed, not trained.
    pub jitter: f64,
}

impl KernelHyperparams {
    pub fn new(lengthscale: f64, signal_variance: f64, jitter: f64) -> Self {
        Self {
            log_lengthscale: lengthscale.ln(),
            log_signal_variance: signal_variance.ln(),
            jitter,
        }
    }

    pub fn lengthscale(&self) -> f64 {
        self.log_lengthscale.exp()
    }

    pub fn signal_variance(&self) -> f64 {
        self.log_signal_variance.exp()
    }

    fn check(&self) -> Result<()> {
        if !self.log_lengthscale.is_finite() || !self.log_signal_variance.is_finite() {
            return Err(PrgpError::input("kernel hyperparameters must be finite"));
        }
        if !(self.jitter >= 0.0) {
            return Err(PrgpError::input("jitter must be non-negative"));
        }
        Ok(())
    }
}

impl Default for KernelHyperparams {
    fn default() -> Self {
        Self {
            log_lengthscale: 0.0,
            log_signal_variance: 0.0,
            jitter: MIN_RELATIVE_JITTER,
        }
    }
}

#[inline]
fn rbf(x1: f64, x2: f64, lengthscale: f64, variance: f64) -> f64 {
    let d = x1 - x2;
    variance * (-(d * d) / (2.0 * lengthscale * lengthscale)).exp()
}

/// `σ² exp(-(x1 - x2)² / 2ℓ²)`.
pub fn eval_kernel(x1: f64, x2: f64, hp: &KernelHyperparams) -> Result<f64> {
    if !x1.is_finite() || !x2.is_finite() {
        return Err(PrgpError::input("kernel inputs must be finite"));
    }
    hp.check()?;
    Ok(rbf(x1, x2, hp.lengthscale(), hp.signal_variance()))
}

/// Kernel matrix without jitter. Each unordered pair is evaluated once.
pub fn kernel_matrix(xs: &[f64], hp: &KernelHyperparams) -> Result<DMatrix<f64>> {
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(PrgpError::input("kernel inputs must be finite"));
    }
    hp.check()?;
    let (ell, var) = (hp.lengthscale(), hp.signal_variance());
    let n = xs.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = var;
        for j in 0..i {
            let v = rbf(xs[i], xs[j], ell, var);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Cross-covariance `K(a, b)` with shape `a.len() × b.len()`.
pub fn cross_kernel(a: &[f64], b: &[f64], hp: &KernelHyperparams) -> Result<DMatrix<f64>> {
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(PrgpError::input("kernel inputs must be finite"));
    }
    hp.check()?;
    let (ell, var) = (hp.lengthscale(), hp.signal_variance());
    Ok(DMatrix::from_fn(a.len(), b.len(), |i, j| rbf(a[i], b[j], ell, var)))
}

/// A Cholesky factor together with the relative jitter that made it succeed.
#[derive(Debug, Clone)]
pub struct JitteredCholesky {
    pub factor: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

/// Factorizes `base + (extra + jitter·scale)·I`, escalating the jitter ×10 on
/// failure. `start` is the first relative jitter tried (zero is allowed).
pub fn cholesky_with_jitter(
    base: &DMatrix<f64>,
    extra: f64,
    scale: f64,
    start: f64,
) -> Result<JitteredCholesky> {
    let mut jitter = start;
    loop {
        let mut m = base.clone();
        let add = extra + jitter * scale;
        for i in 0..m.nrows() {
            m[(i, i)] += add;
        }
        if let Some(factor) = Cholesky::new(m) {
            if factor.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
                return Ok(JitteredCholesky { factor, jitter });
            }
        }
        let next = if jitter <= 0.0 {
            MIN_RELATIVE_JITTER
        } else {
            jitter * 10.0
        };
        if next > MAX_RELATIVE_JITTER * (1.0 + 1e-9) {
            return Err(PrgpError::IllConditioned { jitter });
        }
        jitter = next;
    }
}

#[derive(Debug, Clone)]
pub struct GramMatrix {
    /// Kernel entries including the diagonal jitter.
    pub entries: DMatrix<f64>,
    /// Relative jitter that was finally applied.
    pub jitter: f64,
    pub inputs_hash: u64,
    pub cholesky: Cholesky<f64, Dyn>,
}

fn cache_key(xs: &[f64], hp: &KernelHyperparams) -> u64 {
    let mut h = DefaultHasher::new();
    for x in xs {
        x.to_bits().hash(&mut h);
    }
    hp.log_lengthscale.to_bits().hash(&mut h);
    hp.log_signal_variance.to_bits().hash(&mut h);
    hp.jitter.to_bits().hash(&mut h);
    h.finish()
}

pub fn build_gram(xs: &[f64], hp: &KernelHyperparams) -> Result<GramMatrix> {
    if xs.is_empty() {
        return Err(PrgpError::input("Gram matrix needs at least one input"));
    }
    let k = kernel_matrix(xs, hp)?;
    let var = hp.signal_variance();
    let chol = cholesky_with_jitter(&k, 0.0, var, hp.jitter)?;
    let mut entries = k;
    for i in 0..entries.nrows() {
        entries[(i, i)] += chol.jitter * var;
    }
    Ok(GramMatrix {
        entries,
        jitter: chol.jitter,
        inputs_hash: cache_key(xs, hp),
        cholesky: chol.factor,
    })
}

/// Derivatives of the (jitter-free) kernel matrix with respect to the
/// log-space hyperparameters.
#[derive(Debug, Clone)]
pub struct GramGradients {
    pub d_log_lengthscale: DMatrix<f64>,
    pub d_log_signal_variance: DMatrix<f64>,
}

pub fn grad_gram(xs: &[f64], hp: &KernelHyperparams) -> Result<GramGradients> {
    if xs.is_empty() {
        return Err(PrgpError::input("Gram matrix needs at least one input"));
    }
    let k = kernel_matrix(xs, hp)?;
    let ell2 = hp.lengthscale().powi(2);
    let n = xs.len();
    let d_ell = DMatrix::from_fn(n, n, |i, j| {
        let d = xs[i] - xs[j];
        k[(i, j)] * d * d / ell2
    });
    Ok(GramGradients {
        d_log_lengthscale: d_ell,
        d_log_signal_variance: k,
    })
}

/// `∂k(a_i, b_j)/∂log ℓ` given the already evaluated cross-kernel.
pub(crate) fn cross_kernel_dlog_lengthscale(
    a: &[f64],
    b: &[f64],
    k: &DMatrix<f64>,
    hp: &KernelHyperparams,
) -> DMatrix<f64> {
    let ell2 = hp.lengthscale().powi(2);
    DMatrix::from_fn(a.len(), b.len(), |i, j| {
        let d = a[i] - b[j];
        k[(i, j)] * d * d / ell2
    })
}
