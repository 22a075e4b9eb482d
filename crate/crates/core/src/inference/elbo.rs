//! The evidence lower bound and its reparameterized gradient.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::residuals::{field_dim, residuals_at_sample};
use crate::data::OUTPUT_DIMS;
use crate::error::{PrgpError, Result};
use crate::gp::{GPModel, GpHyperparams, OutputScaling};
use crate::kernels::{self, KernelHyperparams};
use crate::physics::{PhysicsModel, FIELD_COUNT};

/// Relative jitter of the shadow kernel.
pub const SHADOW_JITTER: f64 = 1e-6;

/// Residual regularizer: one shadow GP per physics equation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadowGP {
    pub equations: Vec<PhysicsModel>,
    /// Shadow mean per equation, in residual units.
    pub omega: Vec<f64>,
    pub shadow_hp: Vec<KernelHyperparams>,
    pub gamma: Vec<f64>,
}

impl ShadowGP {
    /// No equations: the pure GP.
    pub fn empty() -> Self {
        Self::new(vec![], 0.0, KernelHyperparams::default())
    }

    pub fn new(equations: Vec<PhysicsModel>, gamma: f64, shadow_hp: KernelHyperparams) -> Self {
        let w = equations.len();
        Self {
            equations,
            omega: vec![0.0; w],
            shadow_hp: vec![shadow_hp; w],
            gamma: vec![gamma; w],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.equations.len();
        if self.omega.len() != w || self.shadow_hp.len() != w || self.gamma.len() != w {
            return Err(PrgpError::input("shadow GP fields have inconsistent lengths"));
        }
        if self.gamma.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(PrgpError::input("gamma must be finite and non-negative"));
        }
        Ok(())
    }

    /// True when at least one equation carries weight.
    pub fn is_active(&self) -> bool {
        self.gamma.iter().any(|g| *g > 0.0)
    }

    pub fn labels(&self) -> Vec<&'static str> {
        self.equations.iter().map(|e| e.kind.label()).collect()
    }
}

/// Which parameters are trained and where they sit in the flat vector.
///
/// Order: for each output dimension `(log ℓ, log σ², log τ)`, then for each
/// equation `(ω, log ℓ̂, log σ̂²)` followed by its physics parameters when
/// `train_beta` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub dims: usize,
    pub beta_counts: Vec<usize>,
    pub train_beta: bool,
}

impl ParamLayout {
    pub fn new(dims: usize, shadow: &ShadowGP, train_beta: bool) -> Self {
        Self {
            dims,
            beta_counts: shadow.equations.iter().map(|e| e.beta.len()).collect(),
            train_beta,
        }
    }

    fn eq_width(&self, w: usize) -> usize {
        3 + if self.train_beta { self.beta_counts[w] } else { 0 }
    }

    pub fn eq_offset(&self, w: usize) -> usize {
        3 * self.dims + (0..w).map(|k| self.eq_width(k)).sum::<usize>()
    }

    pub fn len(&self) -> usize {
        self.eq_offset(self.beta_counts.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Human-readable name of each flat coordinate.
    pub fn names(&self, shadow: &ShadowGP) -> Vec<String> {
        let mut out = Vec::with_capacity(self.len());
        for j in 0..self.dims {
            for p in ["log_lengthscale", "log_signal_variance", "log_tau"] {
                out.push(format!("dim{j}.{p}"));
            }
        }
        for (w, eq) in shadow.equations.iter().enumerate() {
            let l = eq.kind.label();
            out.push(format!("{l}.omega"));
            out.push(format!("{l}.log_lengthscale"));
            out.push(format!("{l}.log_signal_variance"));
            if self.train_beta {
                for i in 0..self.beta_counts[w] {
                    out.push(format!("{l}.beta{i}"));
                }
            }
        }
        out
    }

    pub fn pack(&self, hp: &[GpHyperparams], shadow: &ShadowGP) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for h in hp {
            out.extend([h.kernel.log_lengthscale, h.kernel.log_signal_variance, h.log_tau]);
        }
        for (w, eq) in shadow.equations.iter().enumerate() {
            let s = &shadow.shadow_hp[w];
            out.extend([shadow.omega[w], s.log_lengthscale, s.log_signal_variance]);
            if self.train_beta {
                out.extend(eq.beta.iter().copied());
            }
        }
        out
    }

    /// Writes `params` into copies of the templates.
    pub fn unpack(
        &self,
        params: &[f64],
        hp: &[GpHyperparams],
        shadow: &ShadowGP,
    ) -> (Vec<GpHyperparams>, ShadowGP) {
        assert_eq!(params.len(), self.len(), "flat parameter vector has the wrong length");
        let mut hp = hp.to_vec();
        for (j, h) in hp.iter_mut().enumerate() {
            h.kernel.log_lengthscale = params[3 * j];
            h.kernel.log_signal_variance = params[3 * j + 1];
            h.log_tau = params[3 * j + 2];
        }
        let mut shadow = shadow.clone();
        for w in 0..shadow.equations.len() {
            let o = self.eq_offset(w);
            shadow.omega[w] = params[o];
            shadow.shadow_hp[w].log_lengthscale = params[o + 1];
            shadow.shadow_hp[w].log_signal_variance = params[o + 2];
            if self.train_beta {
                let n = self.beta_counts[w];
                shadow.equations[w].beta.copy_from_slice(&params[o + 3..o + 3 + n]);
            }
        }
        (hp, shadow)
    }
}

#[derive(Debug, Clone)]
pub struct ElboEstimate {
    pub total: f64,
    /// `Σ` over vehicles and dimensions of the log marginal likelihood.
    pub data_term: f64,
    /// Per equation, summed over vehicles; zero for equations with `γ = 0`.
    pub reg_terms: Vec<f64>,
    /// Masked residual entries per equation.
    pub masked: Vec<usize>,
    /// Posterior variances clamped to zero while sampling.
    pub clamped: usize,
    /// Gradient of `total` in [`ParamLayout`] order.
    pub grad: Vec<f64>,
}

fn log_density(delta: &DVector<f64>, chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>) -> (f64, DVector<f64>) {
    let beta = chol.solve(delta);
    let log_det_half: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
    let n = delta.len() as f64;
    (-0.5 * delta.dot(&beta) - log_det_half - 0.5 * n * (2.0 * PI).ln(), beta)
}

/// Single-sample ELBO estimate over several trajectories that share the GP
/// hyperparameters. `zs[v]` and `eps[v]` are the pseudo-inputs and standard
/// normal draws for vehicle `v`.
pub fn elbo_estimate(
    models: &[GPModel],
    shadow: &ShadowGP,
    zs: &[Vec<f64>],
    eps: &[DMatrix<f64>],
    layout: &ParamLayout,
) -> Result<ElboEstimate> {
    shadow.validate()?;
    let w_count = shadow.equations.len();
    if layout.beta_counts.len() != w_count {
        return Err(PrgpError::input("parameter layout does not match the shadow GP"));
    }
    let active = shadow.is_active();
    if active && (zs.len() != models.len() || eps.len() != models.len()) {
        return Err(PrgpError::input("one pseudo-input set and one eps draw per trajectory"));
    }
    let mut grad = vec![0.0; layout.len()];
    let mut data_term = 0.0;
    let mut reg_terms = vec![0.0; w_count];
    let mut masked = vec![0; w_count];
    let mut clamped = 0;

    for (v, model) in models.iter().enumerate() {
        let d = model.output_dims();
        if d != layout.dims {
            return Err(PrgpError::input(format!(
                "model has {d} output dimensions, layout expects {}",
                layout.dims
            )));
        }
        for j in 0..d {
            data_term += model.log_marginal_likelihood(j)?;
            let g = model.lml_gradient(j)?;
            for k in 0..3 {
                grad[3 * j + k] += g[k];
            }
        }
        if !active {
            continue;
        }
        if d != OUTPUT_DIMS {
            return Err(PrgpError::input("physics regularization needs the seven trajectory outputs"));
        }

        let z = &zs[v];
        let e = &eps[v];
        let m = z.len();
        if e.nrows() != m || e.ncols() != d {
            return Err(PrgpError::input(format!(
                "eps is {}×{}, expected {}×{}",
                e.nrows(),
                e.ncols(),
                m,
                d
            )));
        }
        let mut lps = Vec::with_capacity(d);
        let mut f_hat = DMatrix::zeros(m, d);
        for j in 0..d {
            let lp = model.latent_posterior(j, z)?;
            let s = model.scaling()[j];
            for p in 0..m {
                f_hat[(p, j)] = s.from_standard(lp.mean[p] + lp.variance[p].sqrt() * e[(p, j)]);
            }
            clamped += lp.clamped;
            lps.push(lp);
        }
        let res = residuals_at_sample(&f_hat, z, &shadow.equations)?;
        let mut g_f = DMatrix::<f64>::zeros(m, d);

        for (w, er) in res.iter().enumerate() {
            let gamma = shadow.gamma[w];
            if gamma == 0.0 {
                continue;
            }
            masked[w] += er.masked;
            if er.total() == 0 || 2 * er.masked > er.total() {
                return Err(PrgpError::RegularizerDegeneracy {
                    equation: shadow.equations[w].kind.label().to_string(),
                    masked: er.masked,
                    total: er.total(),
                });
            }
            let kept: Vec<usize> = (0..er.total()).filter(|p| er.entries[*p].is_some()).collect();
            let z_sub: Vec<f64> = kept.iter().map(|p| z[*p]).collect();
            let shp = &shadow.shadow_hp[w];
            let gram = kernels::build_gram(&z_sub, shp)?;
            let delta = DVector::from_iterator(
                kept.len(),
                kept.iter()
                    .map(|p| er.entries[*p].as_ref().expect("kept").value - shadow.omega[w]),
            );
            let (reg, beta) = log_density(&delta, &gram.cholesky);
            reg_terms[w] += reg;

            let o = layout.eq_offset(w);
            grad[o] += gamma * beta.sum();
            let wmat = &beta * beta.transpose() - gram.cholesky.inverse();
            let gg = kernels::grad_gram(&z_sub, shp)?;
            grad[o + 1] += gamma * 0.5 * wmat.component_mul(&gg.d_log_lengthscale).sum();
            grad[o + 2] += gamma * 0.5 * wmat.component_mul(&gram.entries).sum();

            let needs_next = shadow.equations[w].kind.needs_next();
            for (k, p) in kept.iter().enumerate() {
                let rg = er.entries[*p].as_ref().expect("kept");
                let coef = -gamma * beta[k];
                for field in 0..FIELD_COUNT {
                    g_f[(*p, field_dim(field))] += coef * rg.d_current[field];
                    if needs_next {
                        g_f[(*p + 1, field_dim(field))] += coef * rg.d_next[field];
                    }
                }
                if layout.train_beta {
                    for (i, db) in rg.d_beta.iter().enumerate() {
                        grad[o + 3 + i] += coef * db;
                    }
                }
            }
        }

        for j in 0..d {
            if g_f.column(j).iter().all(|g| *g == 0.0) {
                continue;
            }
            let scale = model.scaling()[j].scale;
            let lp = &lps[j];
            let g_mean = DVector::from_fn(m, |p, _| g_f[(p, j)] * scale);
            let g_var = DVector::from_fn(m, |p, _| {
                let nu = lp.variance[p];
                if nu > 0.0 {
                    g_f[(p, j)] * scale * e[(p, j)] / (2.0 * nu.sqrt())
                } else {
                    0.0
                }
            });
            let g = model.posterior_adjoint(j, z, &g_mean, &g_var)?;
            for k in 0..3 {
                grad[3 * j + k] += g[k];
            }
        }
    }

    let total = data_term
        + shadow
            .gamma
            .iter()
            .zip(&reg_terms)
            .map(|(g, r)| g * r)
            .sum::<f64>();
    Ok(ElboEstimate {
        total,
        data_term,
        reg_terms,
        masked,
        clamped,
        grad,
    })
}

/// Observations of one trajectory: `times` (N) and `outputs` (N × d′).
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleData {
    pub id: u64,
    pub times: Vec<f64>,
    pub outputs: DMatrix<f64>,
}

impl VehicleData {
    pub fn time_range(&self) -> (f64, f64) {
        let lo = self.times.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    /// Per-dimension mean of the observations.
    pub fn means(&self) -> Vec<f64> {
        let n = self.outputs.nrows() as f64;
        (0..self.outputs.ncols())
            .map(|j| self.outputs.column(j).sum() / n)
            .collect()
    }
}

/// The training objective as a function of the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Objective<'a> {
    pub data: &'a [VehicleData],
    pub scalings: Vec<Vec<OutputScaling>>,
    pub hp_template: Vec<GpHyperparams>,
    pub shadow_template: ShadowGP,
    pub layout: ParamLayout,
}

impl<'a> Objective<'a> {
    pub fn models(&self, params: &[f64]) -> Result<(Vec<GPModel>, ShadowGP)> {
        let (hp, shadow) = self.layout.unpack(params, &self.hp_template, &self.shadow_template);
        let models = self
            .data
            .iter()
            .zip(&self.scalings)
            .map(|(v, s)| GPModel::fit(v.times.clone(), v.outputs.clone(), hp.clone(), s.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok((models, shadow))
    }

    pub fn evaluate(&self, params: &[f64], zs: &[Vec<f64>], eps: &[DMatrix<f64>]) -> Result<ElboEstimate> {
        let (models, shadow) = self.models(params)?;
        elbo_estimate(&models, &shadow, zs, eps, &self.layout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{group_by_vehicle, synth_default_model, synth_generate, NoiseSpec, SynthSpec};
    use crate::inference::pseudo::{sample_pseudo_inputs, ZSampling};
    use crate::physics::ModelKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Two followers from a noisy Pipes platoon, thinned to every 5th frame.
    pub(crate) fn two_vehicle_data() -> Vec<VehicleData> {
        let model = synth_default_model(ModelKind::Pipes).unwrap();
        let spec = SynthSpec {
            n_vehicles: 3,
            horizon_s: 6.0,
            noise: NoiseSpec::RelativeToStd(0.1),
            seed: 11,
            ..Default::default()
        };
        let scene = synth_generate(&model, &spec).unwrap();
        group_by_vehicle(scene.records())
            .into_iter()
            .filter(|(id, _)| *id > 1)
            .map(|(id, track)| {
                let rows: Vec<_> = track.iter().step_by(5).collect();
                VehicleData {
                    id,
                    times: rows.iter().map(|r| r.time).collect(),
                    outputs: DMatrix::from_fn(rows.len(), OUTPUT_DIMS, |i, j| rows[i].outputs().unwrap()[j]),
                }
            })
            .collect()
    }

    fn objective(data: &[VehicleData], shadow: ShadowGP) -> Objective<'_> {
        let scalings = data
            .iter()
            .map(|v| {
                v.means()
                    .into_iter()
                    .enumerate()
                    .map(|(j, mu)| OutputScaling {
                        offset: mu,
                        scale: 1.0 + j as f64,
                    })
                    .collect()
            })
            .collect();
        let hp = vec![
            GpHyperparams {
                kernel: KernelHyperparams::new(1.5, 0.8, 1e-8),
                log_tau: 2.0,
            };
            OUTPUT_DIMS
        ];
        let layout = ParamLayout::new(OUTPUT_DIMS, &shadow, true);
        Objective {
            data,
            scalings,
            hp_template: hp,
            shadow_template: shadow,
            layout,
        }
    }

    fn draws(data: &[VehicleData], m: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<DMatrix<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut zs = Vec::new();
        let mut eps = Vec::new();
        for v in data {
            let (lo, hi) = v.time_range();
            zs.push(sample_pseudo_inputs(lo, hi, m, ZSampling::JitteredGrid, &mut rng).unwrap());
            eps.push(DMatrix::from_fn(m, OUTPUT_DIMS, |_, _| StandardNormal.sample(&mut rng)));
        }
        (zs, eps)
    }

    #[test]
    fn gamma_zero_is_sum_of_lml() {
        let data = two_vehicle_data();
        let mut shadow = ShadowGP::new(
            vec![synth_default_model(ModelKind::Pipes).unwrap()],
            0.0,
            KernelHyperparams::new(1.0, 1.0, SHADOW_JITTER),
        );
        shadow.omega[0] = 0.3;
        let obj = objective(&data, shadow);
        let params = obj.layout.pack(&obj.hp_template, &obj.shadow_template);
        let (zs, eps) = draws(&data, 6, 1);
        let est = obj.evaluate(&params, &zs, &eps).unwrap();
        let (models, _) = obj.models(&params).unwrap();
        let mut lml = 0.0;
        for m in &models {
            for j in 0..OUTPUT_DIMS {
                lml += m.log_marginal_likelihood(j).unwrap();
            }
        }
        assert_eq!(est.total, lml);
        assert_eq!(est.data_term, lml);
        assert!(est.grad[3 * OUTPUT_DIMS..].iter().all(|g| *g == 0.0));
    }

    #[test]
    fn scalar_reg_term_oracle() {
        let r = 0.7;
        let delta = DVector::from_vec(vec![r]);
        let k = DMatrix::from_vec(1, 1, vec![1.0]);
        let (v, _) = log_density(&delta, &k.cholesky().unwrap());
        assert!((v - (-0.5 * r * r - 0.5 * (2.0 * PI).ln())).abs() < 1e-15);
    }

    #[test]
    fn total_is_data_plus_weighted_reg() {
        let data = two_vehicle_data();
        let eqs = vec![
            synth_default_model(ModelKind::Pipes).unwrap(),
            PhysicsModel::reference(ModelKind::VelDef),
        ];
        let mut shadow = ShadowGP::new(eqs, 0.5, KernelHyperparams::new(0.8, 4.0, SHADOW_JITTER));
        shadow.gamma[1] = 2.0;
        let obj = objective(&data, shadow);
        let params = obj.layout.pack(&obj.hp_template, &obj.shadow_template);
        let (zs, eps) = draws(&data, 8, 4);
        let est = obj.evaluate(&params, &zs, &eps).unwrap();
        let recomposed = est.data_term + 0.5 * est.reg_terms[0] + 2.0 * est.reg_terms[1];
        assert!((est.total - recomposed).abs() <= 1e-10);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data = two_vehicle_data();
        let eqs = vec![
            synth_default_model(ModelKind::Pipes).unwrap(),
            synth_default_model(ModelKind::NewellNonlinear).unwrap(),
            PhysicsModel::reference(ModelKind::AccDef),
        ];
        let mut shadow = ShadowGP::new(eqs, 0.7, KernelHyperparams::new(0.9, 9.0, SHADOW_JITTER));
        shadow.omega = vec![0.4, -0.2, 0.1];
        let obj = objective(&data, shadow);
        let params = obj.layout.pack(&obj.hp_template, &obj.shadow_template);
        let names = obj.layout.names(&obj.shadow_template);
        let (zs, eps) = draws(&data, 7, 8);
        let est = obj.evaluate(&params, &zs, &eps).unwrap();
        assert!(est.masked.iter().all(|m| *m == 0));
        for i in 0..params.len() {
            let h = 1e-5 * (1.0 + params[i].abs());
            let mut plus = params.clone();
            plus[i] += h;
            let mut minus = params.clone();
            minus[i] -= h;
            let fd = (obj.evaluate(&plus, &zs, &eps).unwrap().total
                - obj.evaluate(&minus, &zs, &eps).unwrap().total)
                / (2.0 * h);
            let an = est.grad[i];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-2);
            assert!(rel < 1e-3, "{}: analytic {an} vs fd {fd}", names[i]);
        }
    }

    #[test]
    fn degeneracy_is_reported() {
        let data = two_vehicle_data();
        // radicand negative everywhere on a 30 ft/s platoon
        let gipps = PhysicsModel::new(ModelKind::Gipps, vec![1.0, 10.0, -1.0]).unwrap();
        let obj = objective(&data, ShadowGP::new(vec![gipps], 1.0, KernelHyperparams::new(1.0, 1.0, SHADOW_JITTER)));
        let params = obj.layout.pack(&obj.hp_template, &obj.shadow_template);
        let (zs, eps) = draws(&data, 5, 2);
        let err = obj.evaluate(&params, &zs, &eps).unwrap_err();
        assert!(matches!(err, PrgpError::RegularizerDegeneracy { masked: 4, total: 4, .. }), "{err}");
    }

    #[test]
    fn layout_round_trip() {
        let shadow = ShadowGP::new(
            vec![PhysicsModel::reference(ModelKind::Ghr), PhysicsModel::reference(ModelKind::Pipes)],
            1.0,
            KernelHyperparams::new(1.0, 1.0, SHADOW_JITTER),
        );
        let layout = ParamLayout::new(OUTPUT_DIMS, &shadow, true);
        assert_eq!(layout.len(), 21 + 6 + 4);
        let hp = vec![GpHyperparams { kernel: KernelHyperparams::default(), log_tau: 0.0 }; OUTPUT_DIMS];
        let params: Vec<f64> = (0..layout.len()).map(|i| i as f64 * 0.1).collect();
        let (h2, s2) = layout.unpack(&params, &hp, &shadow);
        assert_eq!(layout.pack(&h2, &s2), params);
        assert_eq!(layout.names(&shadow).len(), layout.len());
        assert_eq!(ParamLayout::new(OUTPUT_DIMS, &shadow, false).len(), 21 + 6);
    }
}
