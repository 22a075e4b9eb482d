//! Box-constrained Nelder–Mead simplex search.
//!
//! Trial points are projected onto the bounds. The search restarts from the
//! best vertex until a restart no longer improves the objective.

#[derive(Debug, Clone)]
pub struct NelderMeadOptions {
    pub max_evals: usize,
    /// Stop when the objective spread across the simplex falls below this.
    pub f_tol: f64,
    /// Stop when every vertex is within this (relative to bound width) of the best one.
    pub x_tol: f64,
    /// Initial simplex edge as a fraction of the bound width.
    pub initial_step: f64,
    pub max_restarts: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_evals: 20_000,
            f_tol: 1e-26,
            x_tol: 1e-13,
            initial_step: 0.1,
            max_restarts: 12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
}

fn project(x: &mut [f64], bounds: &[(f64, f64)]) {
    for (v, (lo, hi)) in x.iter_mut().zip(bounds) {
        *v = v.clamp(*lo, *hi);
    }
}

fn eval<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], evals: &mut usize) -> f64 {
    *evals += 1;
    let v = f(x);
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

fn single_run<F: Fn(&[f64]) -> f64>(
    f: &F,
    start: &[f64],
    bounds: &[(f64, f64)],
    opts: &NelderMeadOptions,
    step_scale: f64,
    evals: &mut usize,
) -> (Vec<f64>, f64, bool) {
    let n = start.len();
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    let mut x0 = start.to_vec();
    project(&mut x0, bounds);
    simplex.push(x0.clone());
    for i in 0..n {
        let (lo, hi) = bounds[i];
        let width = (hi - lo).max(1e-12);
        let mut x = x0.clone();
        let step = opts.initial_step * step_scale * width;
        x[i] = if x[i] + step <= hi { x[i] + step } else { x[i] - step };
        project(&mut x, bounds);
        simplex.push(x);
    }
    let mut values: Vec<f64> = simplex.iter().map(|x| eval(f, x, evals)).collect();

    let widths: Vec<f64> = bounds.iter().map(|(lo, hi)| (hi - lo).max(1e-12)).collect();
    loop {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|a, b| values[*a].total_cmp(&values[*b]).then(a.cmp(b)));
        simplex = order.iter().map(|i| simplex[*i].clone()).collect();
        values = order.iter().map(|i| values[*i]).collect();

        let spread = (values[n] - values[0]).abs();
        let size = simplex[1..]
            .iter()
            .flat_map(|v| v.iter().zip(&simplex[0]).zip(&widths).map(|((a, b), w)| (a - b).abs() / w))
            .fold(0.0, f64::max);
        if (spread <= opts.f_tol && size <= opts.x_tol.sqrt()) || size <= opts.x_tol {
            return (simplex[0].clone(), values[0], true);
        }
        if *evals >= opts.max_evals {
            return (simplex[0].clone(), values[0], false);
        }

        let centroid: Vec<f64> = (0..n)
            .map(|k| simplex[..n].iter().map(|v| v[k]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            let mut x: Vec<f64> = (0..n).map(|k| centroid[k] + t * (simplex[n][k] - centroid[k])).collect();
            project(&mut x, bounds);
            x
        };

        let xr = along(-1.0);
        let fr = eval(f, &xr, evals);
        if fr < values[0] {
            let xe = along(-2.0);
            let fe = eval(f, &xe, evals);
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
            continue;
        }
        if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
            continue;
        }
        let (xc, fc) = if fr < values[n] {
            let xc = along(-0.5);
            let fc = eval(f, &xc, evals);
            (xc, fc)
        } else {
            let xc = along(0.5);
            let fc = eval(f, &xc, evals);
            (xc, fc)
        };
        if fc < values[n].min(fr) {
            simplex[n] = xc;
            values[n] = fc;
            continue;
        }
        // shrink towards the best vertex
        for i in 1..=n {
            let mut x: Vec<f64> = (0..n)
                .map(|k| simplex[0][k] + 0.5 * (simplex[i][k] - simplex[0][k]))
                .collect();
            project(&mut x, bounds);
            values[i] = eval(f, &x, evals);
            simplex[i] = x;
        }
    }
}

/// Minimizes `f` inside `bounds` starting at `start`.
pub fn nelder_mead<F: Fn(&[f64]) -> f64>(
    f: F,
    start: &[f64],
    bounds: &[(f64, f64)],
    opts: &NelderMeadOptions,
) -> NelderMeadResult {
    assert_eq!(start.len(), bounds.len(), "start and bounds dimensions differ");
    let mut evals = 0;
    if start.is_empty() {
        let v = eval(&f, start, &mut evals);
        return NelderMeadResult {
            x: vec![],
            f: v,
            evals,
            converged: true,
        };
    }
    let (mut best_x, mut best_f, mut converged) = single_run(&f, start, bounds, opts, 1.0, &mut evals);
    let mut scale: f64 = 1.0;
    for _ in 0..opts.max_restarts {
        if evals >= opts.max_evals {
            break;
        }
        scale *= 0.1;
        let (x, v, c) = single_run(&f, &best_x, bounds, opts, scale.max(1e-6), &mut evals);
        let improved = v < best_f;
        if v <= best_f {
            best_x = x;
            best_f = v;
            converged = c;
        }
        if !improved && scale < 1e-3 {
            break;
        }
    }
    NelderMeadResult {
        x: best_x,
        f: best_f,
        evals,
        converged,
    }
}
