use nalgebra::{DMatrix, SymmetricEigen};
use prgp_core::data::{group_by_vehicle, synth_default_model, synth_generate, NoiseSpec, SynthSpec, OUTPUT_DIMS};
use prgp_core::gp::{GPModel, GpHyperparams, OutputScaling};
use prgp_core::inference::{elbo_estimate, ParamLayout, ShadowGP, VehicleData};
use prgp_core::kernels::KernelHyperparams;
use prgp_core::physics::ModelKind;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Probabilists' Gauss-Hermite rule: nodes and weights for E[f(ε)], ε ~ N(0, 1).
fn gauss_hermite(n: usize) -> Vec<(f64, f64)> {
    let jacobi = DMatrix::from_fn(n, n, |i, j| if i.abs_diff(j) == 1 { (i.max(j) as f64).sqrt() } else { 0.0 });
    let eig = SymmetricEigen::new(jacobi);
    (0..n).map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2))).collect()
}

fn setup() -> (GPModel, ShadowGP) {
    let physics = synth_default_model(ModelKind::NewellNonlinear).unwrap();
    let spec = SynthSpec {
        n_vehicles: 2,
        horizon_s: 4.0,
        noise: NoiseSpec::RelativeToStd(0.05),
        seed: 5,
        ..Default::default()
    };
    let scene = synth_generate(&physics, &spec).unwrap();
    let track = group_by_vehicle(scene.records()).remove(&2).unwrap();
    let rows: Vec<_> = track.iter().step_by(4).collect();
    let v = VehicleData {
        id: 2,
        times: rows.iter().map(|r| r.time).collect(),
        outputs: DMatrix::from_fn(rows.len(), OUTPUT_DIMS, |i, j| rows[i].outputs().unwrap()[j]),
    };
    let means = v.means();
    let hp = vec![GpHyperparams { kernel: KernelHyperparams::new(1.0, 1.0, 1e-8), log_tau: 0.0 }; OUTPUT_DIMS];
    let scaling = means.iter().map(|&mu| OutputScaling { offset: mu, scale: 2.0 }).collect();
    let gp = GPModel::fit(v.times.clone(), v.outputs.clone(), hp, scaling).unwrap();
    let mut shadow = ShadowGP::new(vec![physics], 1.0, KernelHyperparams::new(1.0, 4.0, 1e-8));
    shadow.omega = vec![0.5];
    (gp, shadow)
}

/// The single-sample regularizer is an unbiased estimate of its expectation
/// over the latent posterior: the Monte Carlo mean matches quadrature.
#[test]
fn regularizer_sample_is_unbiased() {
    let (gp, shadow) = setup();
    let layout = ParamLayout::new(OUTPUT_DIMS, &shadow, false);
    let z = vec![vec![1.0, 1.6]];
    let reg = |eps: DMatrix<f64>| -> f64 {
        let est = elbo_estimate(std::slice::from_ref(&gp), &shadow, &z, &[eps], &layout).unwrap();
        assert_eq!(est.masked, vec![0]);
        est.reg_terms[0]
    };

    // the residual reads velocity and space headway only
    let (v, s) = (2, 5);
    let rule = gauss_hermite(12);
    let mut quad = 0.0;
    for &(a, wa) in &rule {
        for &(b, wb) in &rule {
            for &(c, wc) in &rule {
                for &(d, wd) in &rule {
                    let mut eps = DMatrix::zeros(2, OUTPUT_DIMS);
                    eps[(0, v)] = a;
                    eps[(1, v)] = b;
                    eps[(0, s)] = c;
                    eps[(1, s)] = d;
                    quad += wa * wb * wc * wd * reg(eps);
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 10_000;
    let samples: Vec<f64> = (0..n)
        .map(|_| reg(DMatrix::from_fn(2, OUTPUT_DIMS, |_, _| StandardNormal.sample(&mut rng))))
        .collect();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    assert!((mean - quad).abs() < 4.0 * se, "mc {mean} ± {se} vs quadrature {quad}");

    // the estimator is not degenerate: draws actually vary
    assert!(se > 1e-6);
}

#[test]
fn gauss_hermite_moments() {
    let rule = gauss_hermite(12);
    let moment = |k: i32| rule.iter().map(|(x, w)| w * x.powi(k)).sum::<f64>();
    assert!((moment(0) - 1.0).abs() < 1e-12);
    assert!(moment(1).abs() < 1e-12);
    assert!((moment(2) - 1.0).abs() < 1e-10);
    assert!((moment(4) - 3.0).abs() < 1e-9);
}
