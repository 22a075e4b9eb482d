//! Exact Gaussian-process regression, one independent GP per output dimension.
//!
//! All dimensions share the scalar time input. Each dimension is modelled in
//! standardized units `(y - offset) / scale`; predictions and samples are
//! mapped back to the original units.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{PrgpError, Result};
use crate::kernels::{self, KernelHyperparams};

/// Kernel hyperparameters plus the log noise precision `log τ` of one output dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparams {
    pub kernel: KernelHyperparams,
    pub log_tau: f64,
}

impl GpHyperparams {
    /// Noise variance `τ⁻¹`. `log_tau = +∞` gives a noise-free model.
    pub fn noise_variance(&self) -> f64 {
        (-self.log_tau).exp()
    }
}

/// Affine map between data units and the standardized units the GP works in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutputScaling {
    pub offset: f64,
    pub scale: f64,
}

impl OutputScaling {
    pub const IDENTITY: OutputScaling = OutputScaling {
        offset: 0.0,
        scale: 1.0,
    };

    pub fn to_standard(&self, y: f64) -> f64 {
        (y - self.offset) / self.scale
    }

    pub fn from_standard(&self, f: f64) -> f64 {
        self.offset + self.scale * f
    }
}

impl Default for OutputScaling {
    fn default() -> Self {
        Self::IDENTITY
    }
}

#[derive(Debug, Clone)]
struct DimCache {
    /// Jitter-free kernel matrix.
    k: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    y: DVector<f64>,
    jitter: f64,
}

/// A trained multi-output GP over one trajectory.
#[derive(Debug, Clone)]
pub struct GPModel {
    train_inputs: Vec<f64>,
    train_outputs: DMatrix<f64>,
    hp: Vec<GpHyperparams>,
    scaling: Vec<OutputScaling>,
    caches: Vec<DimCache>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorPrediction {
    pub mean: Vec<f64>,
    /// Latent-function variance in data units², clamped at zero.
    pub variance: Vec<f64>,
    /// Number of dimensions whose variance was clamped from a negative value.
    pub clamped: usize,
}

/// Latent posterior of one dimension at a batch of inputs, in standardized units.
#[derive(Debug, Clone)]
pub struct LatentPosterior {
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
    pub clamped: usize,
}

impl GPModel {
    /// Builds the per-dimension caches. `outputs` is `N × d′` in data units.
    pub fn fit(
        inputs: Vec<f64>,
        outputs: DMatrix<f64>,
        hp: Vec<GpHyperparams>,
        scaling: Vec<OutputScaling>,
    ) -> Result<Self> {
        let n = inputs.len();
        if n == 0 {
            return Err(PrgpError::EmptyData("GP needs at least one training point".into()));
        }
        if outputs.nrows() != n {
            return Err(PrgpError::input(format!(
                "{} inputs but {} output rows",
                n,
                outputs.nrows()
            )));
        }
        let d = outputs.ncols();
        if hp.len() != d || scaling.len() != d {
            return Err(PrgpError::input(format!(
                "{d} output dimensions but {} hyperparameter sets and {} scalings",
                hp.len(),
                scaling.len()
            )));
        }
        if outputs.iter().any(|v| !v.is_finite()) {
            return Err(PrgpError::input("training outputs must be finite"));
        }
        let mut caches = Vec::with_capacity(d);
        for j in 0..d {
            let h = &hp[j];
            if h.log_tau.is_nan() || h.log_tau == f64::NEG_INFINITY {
                return Err(PrgpError::input("log_tau must be finite or +inf"));
            }
            let k = kernels::kernel_matrix(&inputs, &h.kernel)?;
            let var = h.kernel.signal_variance();
            let jc = kernels::cholesky_with_jitter(&k, h.noise_variance(), var, h.kernel.jitter)?;
            let s = scaling[j];
            let y = DVector::from_iterator(n, outputs.column(j).iter().map(|v| s.to_standard(*v)));
            let alpha = jc.factor.solve(&y);
            caches.push(DimCache {
                k,
                chol: jc.factor,
                alpha,
                y,
                jitter: jc.jitter,
            });
        }
        Ok(Self {
            train_inputs: inputs,
            train_outputs: outputs,
            hp,
            scaling,
            caches,
        })
    }

    pub fn train_inputs(&self) -> &[f64] {
        &self.train_inputs
    }

    pub fn train_outputs(&self) -> &DMatrix<f64> {
        &self.train_outputs
    }

    pub fn hyperparams(&self) -> &[GpHyperparams] {
        &self.hp
    }

    pub fn scaling(&self) -> &[OutputScaling] {
        &self.scaling
    }

    pub fn output_dims(&self) -> usize {
        self.hp.len()
    }

    /// Relative jitter finally applied to dimension `dim`.
    pub fn jitter(&self, dim: usize) -> f64 {
        self.caches[dim].jitter
    }

    /// Lower-triangular factor of `K + τ⁻¹I` (including jitter) for `dim`.
    pub fn cholesky_factor(&self, dim: usize) -> DMatrix<f64> {
        self.caches[dim].chol.l()
    }

    /// `K + τ⁻¹I` including jitter, as factorized.
    pub fn noisy_covariance(&self, dim: usize) -> DMatrix<f64> {
        let c = &self.caches[dim];
        let mut m = c.k.clone();
        let add = self.diag_extra(dim);
        for i in 0..m.nrows() {
            m[(i, i)] += add;
        }
        m
    }

    fn diag_extra(&self, dim: usize) -> f64 {
        let h = &self.hp[dim];
        h.noise_variance() + self.caches[dim].jitter * h.kernel.signal_variance()
    }

    fn cache(&self, dim: usize) -> Result<&DimCache> {
        self.caches
            .get(dim)
            .ok_or_else(|| PrgpError::InternalState(format!("no cache for dimension {dim}")))
    }

    /// `log N(y | 0, K + τ⁻¹I)` for the standardized outputs of `dim`.
    pub fn log_marginal_likelihood(&self, dim: usize) -> Result<f64> {
        let c = self.cache(dim)?;
        let n = self.train_inputs.len() as f64;
        let fit = -0.5 * c.y.dot(&c.alpha);
        let log_det_half: f64 = c.chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
        let v = fit - log_det_half - 0.5 * n * (2.0 * PI).ln();
        if !v.is_finite() {
            return Err(PrgpError::InternalState(format!(
                "non-finite log marginal likelihood in dimension {dim}"
            )));
        }
        Ok(v)
    }

    /// Gradient of [`Self::log_marginal_likelihood`] with respect to
    /// `(log ℓ, log σ², log τ)`.
    pub fn lml_gradient(&self, dim: usize) -> Result<[f64; 3]> {
        let c = self.cache(dim)?;
        let h = &self.hp[dim];
        let inv = c.chol.inverse();
        let w = &c.alpha * c.alpha.transpose() - inv;
        let dk = kernels::grad_gram(&self.train_inputs, &h.kernel)?;
        let jitter_term = c.jitter * h.kernel.signal_variance();
        let trace_w = w.trace();
        let g_ell = 0.5 * w.component_mul(&dk.d_log_lengthscale).sum();
        let g_var = 0.5 * (w.component_mul(&c.k).sum() + jitter_term * trace_w);
        let g_tau = -0.5 * trace_w * h.noise_variance();
        Ok([g_ell, g_var, g_tau])
    }

    /// Latent posterior mean and variance of dimension `dim` at `zs`, standardized units.
    pub fn latent_posterior(&self, dim: usize, zs: &[f64]) -> Result<LatentPosterior> {
        let c = self.cache(dim)?;
        let h = &self.hp[dim];
        let ks = kernels::cross_kernel(zs, &self.train_inputs, &h.kernel)?;
        let mean = &ks * &c.alpha;
        let mut v = ks.transpose();
        c.chol.l_dirty().solve_lower_triangular_mut(&mut v);
        let prior = h.kernel.signal_variance();
        let mut clamped = 0;
        let variance = DVector::from_iterator(
            zs.len(),
            (0..zs.len()).map(|p| {
                let nu = prior - v.column(p).norm_squared();
                if nu < 0.0 {
                    clamped += 1;
                    0.0
                } else {
                    nu
                }
            }),
        );
        Ok(LatentPosterior {
            mean,
            variance,
            clamped,
        })
    }

    /// Posterior mean and latent variance at one time point, in data units.
    pub fn posterior_predict(&self, x_star: f64) -> Result<PosteriorPrediction> {
        let d = self.output_dims();
        let mut mean = Vec::with_capacity(d);
        let mut variance = Vec::with_capacity(d);
        let mut clamped = 0;
        for j in 0..d {
            let lp = self.latent_posterior(j, &[x_star])?;
            let s = self.scaling[j];
            mean.push(s.from_standard(lp.mean[0]));
            variance.push(s.scale * s.scale * lp.variance[0]);
            clamped += lp.clamped;
        }
        Ok(PosteriorPrediction {
            mean,
            variance,
            clamped,
        })
    }

    /// Posterior means at many inputs, `zs.len() × d′` in data units.
    pub fn predict_mean(&self, zs: &[f64]) -> Result<DMatrix<f64>> {
        let d = self.output_dims();
        let mut out = DMatrix::zeros(zs.len(), d);
        for j in 0..d {
            let lp = self.latent_posterior(j, zs)?;
            let s = self.scaling[j];
            for p in 0..zs.len() {
                out[(p, j)] = s.from_standard(lp.mean[p]);
            }
        }
        Ok(out)
    }

    /// Reparameterized posterior sample `μ + √ν·ε` at `zs`, in data units.
    ///
    /// `eps` must be `zs.len() × d′`.
    pub fn sample_posterior(&self, zs: &[f64], eps: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let d = self.output_dims();
        if eps.nrows() != zs.len() || eps.ncols() != d {
            return Err(PrgpError::input(format!(
                "eps is {}×{}, expected {}×{}",
                eps.nrows(),
                eps.ncols(),
                zs.len(),
                d
            )));
        }
        let mut out = DMatrix::zeros(zs.len(), d);
        for j in 0..d {
            let lp = self.latent_posterior(j, zs)?;
            let s = self.scaling[j];
            for p in 0..zs.len() {
                let f = lp.mean[p] + lp.variance[p].sqrt() * eps[(p, j)];
                out[(p, j)] = s.from_standard(f);
            }
        }
        Ok(out)
    }

    /// Gradient with respect to `(log ℓ, log σ², log τ)` of
    /// `Σ_p g_mean[p]·μ(z_p) + g_var[p]·ν(z_p)` for dimension `dim`, where μ and ν
    /// are the standardized latent posterior moments.
    pub fn posterior_adjoint(
        &self,
        dim: usize,
        zs: &[f64],
        g_mean: &DVector<f64>,
        g_var: &DVector<f64>,
    ) -> Result<[f64; 3]> {
        let c = self.cache(dim)?;
        let h = &self.hp[dim];
        let m = zs.len();
        if g_mean.len() != m || g_var.len() != m {
            return Err(PrgpError::input("adjoint weights do not match pseudo-inputs"));
        }
        let x = &self.train_inputs;
        let ks = kernels::cross_kernel(zs, x, &h.kernel)?;
        let b = c.chol.solve(&ks.transpose());
        let u = &b * g_mean;

        // Weights on ∂K(Z, X) and on ∂C.
        let mut m_s = g_mean * c.alpha.transpose();
        for p in 0..m {
            let gv = g_var[p];
            if gv != 0.0 {
                for n in 0..x.len() {
                    m_s[(p, n)] -= 2.0 * gv * b[(n, p)];
                }
            }
        }
        let b_scaled = DMatrix::from_fn(b.nrows(), m, |n, p| b[(n, p)] * g_var[p]);
        let m_c = -(&u * c.alpha.transpose()) + &b_scaled * b.transpose();

        let dks_ell = kernels::cross_kernel_dlog_lengthscale(zs, x, &ks, &h.kernel);
        let dk = kernels::grad_gram(x, &h.kernel)?;
        let var = h.kernel.signal_variance();
        let trace_mc = m_c.trace();
        let g_ell = m_s.component_mul(&dks_ell).sum() + m_c.component_mul(&dk.d_log_lengthscale).sum();
        let g_var = m_s.component_mul(&ks).sum()
            + m_c.component_mul(&c.k).sum()
            + c.jitter * var * trace_mc
            + var * g_var.sum();
        let g_tau = -h.noise_variance() * trace_mc;
        Ok([g_ell, g_var, g_tau])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn hp(ell: f64, var: f64, noise: f64, jitter: f64) -> GpHyperparams {
        GpHyperparams {
            kernel: KernelHyperparams::new(ell, var, jitter),
            log_tau: -noise.ln(),
        }
    }

    fn single(xs: Vec<f64>, ys: Vec<f64>, h: GpHyperparams) -> GPModel {
        let n = xs.len();
        GPModel::fit(xs, DMatrix::from_vec(n, 1, ys), vec![h], vec![OutputScaling::IDENTITY]).unwrap()
    }

    fn dense_log_density(y: &[f64], c: &DMatrix<f64>) -> f64 {
        // explicit 2×2 inverse and determinant
        let det = c[(0, 0)] * c[(1, 1)] - c[(0, 1)] * c[(1, 0)];
        let inv = DMatrix::from_row_slice(2, 2, &[c[(1, 1)], -c[(0, 1)], -c[(1, 0)], c[(0, 0)]]) / det;
        let yv = DVector::from_row_slice(y);
        -0.5 * (yv.transpose() * inv * &yv)[(0, 0)] - 0.5 * det.ln() - (2.0 * PI).ln()
    }

    #[test]
    fn lml_standard_normal_at_zero() {
        // K + τ⁻¹I = [[1]] with σ² = 0.5, τ⁻¹ = 0.5.
        let m = single(vec![0.0], vec![0.0], hp(1.0, 0.5, 0.5, 0.0));
        assert_relative_eq!(m.log_marginal_likelihood(0).unwrap(), -0.918_938_533_204_672_7, max_relative = 1e-14);
    }

    #[test]
    fn lml_scalar_noise_free() {
        let m = single(vec![0.0], vec![2.0], hp(1.0, 1.0, 0.0, 0.0));
        assert_relative_eq!(m.log_marginal_likelihood(0).unwrap(), -2.918_938_533_204_672_7, max_relative = 1e-14);
    }

    #[test]
    fn lml_matches_dense_two_point() {
        let h = hp(0.7, 1.3, 0.2, 0.0);
        let m = single(vec![0.3, 1.1], vec![0.8, -0.4], h);
        let c = m.noisy_covariance(0);
        let dense = dense_log_density(&[0.8, -0.4], &c);
        assert!((m.log_marginal_likelihood(0).unwrap() - dense).abs() < 1e-10);
    }

    #[test]
    fn cholesky_reconstructs_covariance() {
        let m = single(vec![0.0, 0.5, 1.7, 2.0], vec![1.0, 0.5, -0.3, 0.2], hp(0.9, 2.0, 0.05, 1e-8));
        let l = m.cholesky_factor(0);
        let c = m.noisy_covariance(0);
        let diff = (&l * l.transpose() - &c).norm() / c.norm();
        assert!(diff < 1e-10);
    }

    #[test]
    fn interpolates_single_point_without_noise() {
        let m = single(vec![0.0], vec![2.0], hp(1.0, 1.0, 0.0, 0.0));
        let p = m.posterior_predict(0.0).unwrap();
        assert_relative_eq!(p.mean[0], 2.0, max_relative = 1e-14);
        assert!(p.variance[0].abs() < 1e-14);
    }

    #[test]
    fn reverts_to_prior_far_away() {
        let m = single(vec![0.0, 1.0], vec![1.5, -0.5], hp(1.0, 1.7, 0.1, 0.0));
        let p = m.posterior_predict(14.0).unwrap();
        assert!(p.mean[0].abs() < 1e-12);
        assert_relative_eq!(p.variance[0], 1.7, max_relative = 1e-12);
    }

    #[test]
    fn two_point_posterior_hand_solve() {
        let m = single(vec![0.0, 1.0], vec![1.0, -1.0], hp(1.0, 1.0, 0.1, 0.0));
        let p = m.posterior_predict(0.5).unwrap();
        // C = [[1.1, e^-0.5], [e^-0.5, 1.1]], k* = [e^-0.125, e^-0.125]
        let e = (-0.5f64).exp();
        let ks = (-0.125f64).exp();
        let det = 1.1 * 1.1 - e * e;
        let inv = [[1.1 / det, -e / det], [-e / det, 1.1 / det]];
        let a0 = inv[0][0] * 1.0 + inv[0][1] * -1.0;
        let a1 = inv[1][0] * 1.0 + inv[1][1] * -1.0;
        let mean = ks * a0 + ks * a1;
        let quad = ks * (inv[0][0] + inv[0][1] + inv[1][0] + inv[1][1]) * ks;
        assert!((p.mean[0] - mean).abs() < 1e-10);
        assert!((p.variance[0] - (1.0 - quad)).abs() < 1e-10);
    }

    #[test]
    fn eps_zero_gives_mean() {
        let m = single(vec![0.0, 1.0, 2.0], vec![1.0, 0.0, 2.0], hp(1.0, 1.0, 0.1, 1e-8));
        let zs = [0.3, 1.7];
        let s = m.sample_posterior(&zs, &DMatrix::zeros(2, 1)).unwrap();
        let mu = m.predict_mean(&zs).unwrap();
        assert_eq!(s, mu);
    }

    #[test]
    fn sample_is_mean_plus_sd_times_eps() {
        // Construct μ = 2, ν = 0.25 at z = 0 with a single training point at 0:
        // σ² = 0.5, τ⁻¹ = 0.5 → μ = 0.5·y, ν = 0.5 - 0.25 = 0.25 → y = 4.
        let m = single(vec![0.0], vec![4.0], hp(1.0, 0.5, 0.5, 0.0));
        let s = m.sample_posterior(&[0.0], &DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert_relative_eq!(s[(0, 0)], 2.5, max_relative = 1e-14);
    }

    #[test]
    fn eps_shape_checked() {
        let m = single(vec![0.0], vec![4.0], hp(1.0, 0.5, 0.5, 0.0));
        assert!(matches!(
            m.sample_posterior(&[0.0, 1.0], &DMatrix::zeros(1, 1)),
            Err(PrgpError::InputDomain(_))
        ));
    }

    #[test]
    fn monte_carlo_moments() {
        let m = single(vec![0.0, 1.0, 2.5], vec![1.0, 0.3, -0.7], hp(0.8, 1.2, 0.2, 1e-8));
        let z = [1.7];
        let lp = m.latent_posterior(0, &z).unwrap();
        let (mu, nu) = (lp.mean[0], lp.variance[0]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                m.sample_posterior(&z, &DMatrix::from_element(1, 1, e)).unwrap()[(0, 0)]
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let se_mean = (nu / n as f64).sqrt();
        let se_var = nu * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((mean - mu).abs() < 3.0 * se_mean);
        assert!((var - nu).abs() < 3.0 * se_var);
    }

    #[test]
    fn interpolation_limit() {
        let xs = vec![0.0, 0.7, 1.3, 2.2];
        let ys = vec![0.5, -0.2, 1.1, 0.4];
        let mut h = hp(1.0, 1.0, 1.0, 0.0);
        h.log_tau = 1e-12f64.recip().ln();
        let m = single(xs.clone(), ys.clone(), h);
        for (x, y) in xs.iter().zip(&ys) {
            assert!((m.posterior_predict(*x).unwrap().mean[0] - y).abs() < 1e-8);
        }
    }

    #[test]
    fn variance_dominated_by_prior() {
        let m = single(vec![0.0, 0.5, 3.0], vec![1.0, 0.2, -1.0], hp(0.6, 2.0, 0.3, 1e-8));
        for i in 0..60 {
            let x = -3.0 + 0.15 * i as f64;
            let p = m.posterior_predict(x).unwrap();
            assert!(p.variance[0] <= 2.0 + 1e-12 && p.variance[0] >= 0.0);
        }
    }

    fn perturbed(h: GpHyperparams, k: usize, delta: f64) -> GpHyperparams {
        let mut p = h;
        match k {
            0 => p.kernel.log_lengthscale += delta,
            1 => p.kernel.log_signal_variance += delta,
            _ => p.log_tau += delta,
        }
        p
    }

    #[test]
    fn lml_gradient_matches_fd() {
        let xs = vec![0.0, 0.4, 1.0, 1.9, 2.3, 3.1];
        let ys = vec![0.3, 0.8, 0.1, -0.6, -0.2, 0.9];
        let h = hp(0.8, 1.4, 0.15, 1e-8);
        let g = single(xs.clone(), ys.clone(), h).lml_gradient(0).unwrap();
        let step = 1e-5;
        for k in 0..3 {
            let up = single(xs.clone(), ys.clone(), perturbed(h, k, step)).log_marginal_likelihood(0).unwrap();
            let dn = single(xs.clone(), ys.clone(), perturbed(h, k, -step)).log_marginal_likelihood(0).unwrap();
            let fd = (up - dn) / (2.0 * step);
            assert!((g[k] - fd).abs() / fd.abs().max(1e-6) < 1e-4, "param {k}: {} vs {fd}", g[k]);
        }
    }

    #[test]
    fn adjoint_matches_fd() {
        let xs = vec![0.0, 0.4, 1.0, 1.9, 2.3];
        let ys = vec![0.3, 0.8, 0.1, -0.6, -0.2];
        let zs = [0.2, 1.5, 2.8];
        let gm = DVector::from_vec(vec![0.7, -1.2, 0.4]);
        let gv = DVector::from_vec(vec![-0.3, 0.9, 1.1]);
        let h = hp(0.9, 1.1, 0.1, 1e-8);
        let obj = |h: GpHyperparams| {
            let lp = single(xs.clone(), ys.clone(), h).latent_posterior(0, &zs).unwrap();
            gm.dot(&lp.mean) + gv.dot(&lp.variance)
        };
        let g = single(xs.clone(), ys.clone(), h).posterior_adjoint(0, &zs, &gm, &gv).unwrap();
        let step = 1e-5;
        for k in 0..3 {
            let fd = (obj(perturbed(h, k, step)) - obj(perturbed(h, k, -step))) / (2.0 * step);
            assert!((g[k] - fd).abs() / fd.abs().max(1e-6) < 1e-5, "param {k}: {} vs {fd}", g[k]);
        }
    }
}
