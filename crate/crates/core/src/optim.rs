//! Spectral projected gradient method (nonmonotone Barzilai–Borwein steps
//! with a Grippo–Lampariello–Lucidi line search) for smooth objectives,
//! optionally restricted to the nonnegative orthant.

/// Outcome of a minimization run.
#[derive(Clone, Debug)]
pub struct SpgOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

#[derive(Clone, Debug)]
pub struct SpgOptions {
    pub max_iterations: usize,
    /// Stop once the caller's residual falls to this level.
    pub tolerance: f64,
    /// Number of past values used by the nonmonotone acceptance test.
    pub memory: usize,
    pub armijo: f64,
    pub step_min: f64,
    pub step_max: f64,
    /// Project onto `x >= 0` after every step.
    pub nonnegative: bool,
    /// Diagonal metric: the search direction is `-scaling ∘ grad`.
    pub scaling: Option<Vec<f64>>,
}

impl Default for SpgOptions {
    fn default() -> Self {
        SpgOptions {
            max_iterations: 50_000,
            tolerance: 1e-10,
            memory: 10,
            armijo: 1e-4,
            step_min: 1e-30,
            step_max: 1e30,
            nonnegative: true,
            scaling: None,
        }
    }
}

/// Minimizes `objective`, which returns the value and writes the gradient.
///
/// `residual(x, value, grad)` is the caller's stopping measure; the run ends
/// when it drops to `opts.tolerance`, when the projected step vanishes, or
/// when the line search can no longer make progress above rounding level.
pub fn minimize<F, R>(mut objective: F, x0: Vec<f64>, opts: &SpgOptions, mut residual: R) -> SpgOutcome
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
    R: FnMut(&[f64], f64, &[f64]) -> f64,
{
    let n = x0.len();
    let project = |v: f64| if opts.nonnegative { v.max(0.0) } else { v };
    let scale = |i: usize| opts.scaling.as_ref().map_or(1.0, |s| s[i]);

    let mut x: Vec<f64> = x0.into_iter().map(project).collect();
    let mut g = vec![0.0; n];
    let mut f = objective(&x, &mut g);
    let mut trial = vec![0.0; n];
    let mut g_trial = vec![0.0; n];
    let mut dir = vec![0.0; n];
    let mut history = std::collections::VecDeque::with_capacity(opts.memory.max(1));
    history.push_back(f);

    let pg_norm = (0..n)
        .map(|i| (project(x[i] - scale(i) * g[i]) - x[i]).abs())
        .fold(0.0, f64::max);
    let mut step = if pg_norm > 0.0 {
        (1.0 / pg_norm).clamp(opts.step_min, opts.step_max)
    } else {
        1.0
    };

    let mut res = residual(&x, f, &g);
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        if res <= opts.tolerance {
            break;
        }
        let mut slope = 0.0;
        let mut dir_norm: f64 = 0.0;
        for i in 0..n {
            dir[i] = project(x[i] - step * scale(i) * g[i]) - x[i];
            slope += g[i] * dir[i];
            dir_norm = dir_norm.max(dir[i].abs());
        }
        if dir_norm == 0.0 || slope >= 0.0 {
            break;
        }
        let f_ref = history.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let slack = 4.0 * f64::EPSILON * f_ref.abs().max(f.abs());
        let mut t = 1.0;
        let f_trial = loop {
            for i in 0..n {
                trial[i] = x[i] + t * dir[i];
            }
            let ft = objective(&trial, &mut g_trial);
            if ft.is_finite() && ft <= f_ref + opts.armijo * t * slope + slack {
                break Some(ft);
            }
            if t < 1e-20 {
                break None;
            }
            let denom = ft - f - t * slope;
            let t_quad = if ft.is_finite() && denom > 0.0 {
                -0.5 * t * t * slope / denom
            } else {
                0.5 * t
            };
            t = if t_quad >= 0.1 * t && t_quad <= 0.9 * t {
                t_quad
            } else {
                0.5 * t
            };
        };
        let Some(f_new) = f_trial else {
            break;
        };
        iterations += 1;

        let mut ss = 0.0;
        let mut sy = 0.0;
        for i in 0..n {
            let s = trial[i] - x[i];
            let y = g_trial[i] - g[i];
            ss += s * s / scale(i);
            sy += s * y;
        }
        step = if sy > 0.0 {
            (ss / sy).clamp(opts.step_min, opts.step_max)
        } else {
            opts.step_max.min(1e4 * step.max(1.0))
        };
        std::mem::swap(&mut x, &mut trial);
        std::mem::swap(&mut g, &mut g_trial);
        f = f_new;
        if history.len() == opts.memory.max(1) {
            history.pop_front();
        }
        history.push_back(f);
        res = residual(&x, f, &g);
    }
    SpgOutcome {
        converged: res <= opts.tolerance,
        x,
        value: f,
        gradient: g,
        iterations,
        residual: res,
    }
}

/// Infinity norm of the projected gradient `P(x - g) - x`, the usual
/// first-order optimality measure for bound-constrained problems.
pub fn projected_gradient_norm(x: &[f64], g: &[f64], nonnegative: bool) -> f64 {
    x.iter()
        .zip(g)
        .map(|(&xi, &gi)| {
            let target = xi - gi;
            let target = if nonnegative { target.max(0.0) } else { target };
            (target - xi).abs()
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ill_conditioned_quadratic() {
        let n = 50;
        let diag: Vec<f64> = (0..n).map(|i| 10f64.powf(4.0 * i as f64 / (n - 1) as f64)).collect();
        let target: Vec<f64> = (0..n).map(|i| (i as f64 * 0.3).sin()).collect();
        let obj = |x: &[f64], g: &mut [f64]| {
            let mut f = 0.0;
            for i in 0..n {
                let r = x[i] - target[i];
                f += 0.5 * diag[i] * r * r;
                g[i] = diag[i] * r;
            }
            f
        };
        let opts = SpgOptions {
            tolerance: 1e-10,
            ..Default::default()
        };
        let out = minimize(obj, vec![1.0; n], &opts, |x, _, g| projected_gradient_norm(x, g, true));
        assert!(out.converged, "{} {}", out.iterations, out.residual);
        for (i, t) in target.iter().enumerate() {
            let expect = t.max(0.0);
            assert!((out.x[i] - expect).abs() < 1e-9, "{i}: {} vs {expect}", out.x[i]);
        }
    }

    #[test]
    fn rosenbrock_unconstrained() {
        let obj = |x: &[f64], g: &mut [f64]| {
            let (a, b) = (x[0], x[1]);
            g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            g[1] = 200.0 * (b - a * a);
            (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
        };
        let opts = SpgOptions {
            nonnegative: false,
            tolerance: 1e-9,
            ..Default::default()
        };
        let out = minimize(obj, vec![-1.2, 1.0], &opts, |_, _, g| g[0].abs().max(g[1].abs()));
        assert!(out.converged);
        assert!((out.x[0] - 1.0).abs() < 1e-7 && (out.x[1] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn diagonal_scaling_accelerates_separable_problem() {
        let n = 40;
        let diag: Vec<f64> = (0..n).map(|i| 1.0 + 1e6 * (i % 2) as f64).collect();
        let obj = |x: &[f64], g: &mut [f64]| {
            let mut f = 0.0;
            for i in 0..n {
                let r = x[i] - 1.0;
                f += 0.5 * diag[i] * r * r;
                g[i] = diag[i] * r;
            }
            f
        };
        let opts = SpgOptions {
            scaling: Some(diag.iter().map(|d| 1.0 / d).collect()),
            tolerance: 1e-12,
            ..Default::default()
        };
        let out = minimize(obj, vec![0.0; n], &opts, |x, _, g| projected_gradient_norm(x, g, true));
        assert!(out.converged);
        assert!(out.iterations <= 3, "{}", out.iterations);
    }
}
