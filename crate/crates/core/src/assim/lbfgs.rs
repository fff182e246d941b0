//! Limited-memory BFGS with a strong Wolfe line search.
//!
//! Two-loop recursion over a bounded history of curvature pairs, with the
//! usual gamma scaling of the initial inverse Hessian. The line search
//! brackets and zooms per Nocedal & Wright; pairs with non-positive
//! curvature are skipped to keep the implicit Hessian positive definite.

use std::collections::VecDeque;

/// Minimizer knobs. The defaults are the ones used by both pipelines.
#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsOptions {
    /// Number of stored curvature pairs.
    pub memory: usize,
    /// Termination threshold on the max norm of the gradient.
    pub grad_tol: f64,
    /// Iteration cap; hitting it flags the result as non-converged.
    pub max_iters: usize,
    /// Armijo sufficient-decrease constant.
    pub c1: f64,
    /// Wolfe curvature constant.
    pub c2: f64,
    /// Trial step for the first iteration.
    pub initial_step: f64,
    /// Function-evaluation budget per line search.
    pub max_ls_evals: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            grad_tol: 1e-8,
            max_iters: 200,
            c1: 1e-4,
            c2: 0.9,
            initial_step: 1.0,
            max_ls_evals: 60,
        }
    }
}

/// What happened during a minimization run.
#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsDiagnostics {
    pub iterations: usize,
    pub fn_evals: usize,
    pub converged: bool,
    pub line_search_failed: bool,
    /// Cost at the start point and after every accepted iterate.
    pub cost_history: Vec<f64>,
    /// Max norm of the gradient along the same trajectory.
    pub grad_norm_history: Vec<f64>,
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Minimizes `costgrad` starting from `w0`.
///
/// The returned iterate is the last accepted point; `converged` reports
/// whether the gradient tolerance was met. Cost is non-increasing across
/// accepted iterates up to the 1e-12 relative allowance of the approximate
/// Wolfe acceptance.
pub fn minimize_lbfgs<F>(
    mut costgrad: F,
    w0: Vec<f64>,
    opts: &LbfgsOptions,
) -> (Vec<f64>, LbfgsDiagnostics)
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let dim = w0.len();
    let mut w = w0;
    let (mut f, mut g) = costgrad(&w);
    let mut diag = LbfgsDiagnostics {
        iterations: 0,
        fn_evals: 1,
        converged: false,
        line_search_failed: false,
        cost_history: vec![f],
        grad_norm_history: vec![inf_norm(&g)],
    };
    if inf_norm(&g) <= opts.grad_tol {
        diag.converged = true;
        return (w, diag);
    }

    let mut history: VecDeque<Pair> = VecDeque::with_capacity(opts.memory);

    for iter in 0..opts.max_iters {
        // Two-loop recursion: p = -H g.
        let mut p: Vec<f64> = g.iter().map(|x| -x).collect();
        let mut alphas = Vec::with_capacity(history.len());
        for pair in history.iter().rev() {
            let a = pair.rho * dot(&pair.s, &p);
            for (pi, yi) in p.iter_mut().zip(&pair.y) {
                *pi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some(last) = history.back() {
            let gamma = dot(&last.s, &last.y) / dot(&last.y, &last.y);
            for pi in &mut p {
                *pi *= gamma;
            }
        }
        for (pair, a) in history.iter().zip(alphas.into_iter().rev()) {
            let b = pair.rho * dot(&pair.y, &p);
            for (pi, si) in p.iter_mut().zip(&pair.s) {
                *pi += (a - b) * si;
            }
        }

        let mut dphi0 = dot(&g, &p);
        if dphi0 >= 0.0 {
            // Numerical breakdown; restart from steepest descent.
            history.clear();
            p = g.iter().map(|x| -x).collect();
            dphi0 = dot(&g, &p);
            if dphi0 == 0.0 {
                break;
            }
        }

        let first_step = if iter == 0 && history.is_empty() {
            let gn = inf_norm(&g);
            if gn > 1.0 {
                opts.initial_step / gn
            } else {
                opts.initial_step
            }
        } else {
            opts.initial_step
        };

        match wolfe_search(&mut costgrad, &w, f, &p, dphi0, first_step, opts, &mut diag.fn_evals) {
            SearchOutcome::Accepted { alpha, f_new, g_new } => {
                let mut s = vec![0.0; dim];
                let mut y = vec![0.0; dim];
                for i in 0..dim {
                    s[i] = alpha * p[i];
                    y[i] = g_new[i] - g[i];
                }
                let sy = dot(&s, &y);
                let s_norm = s.iter().map(|x| x * x).sum::<f64>().sqrt();
                let y_norm = y.iter().map(|x| x * x).sum::<f64>().sqrt();
                if sy > 1e-10 * s_norm * y_norm {
                    if history.len() == opts.memory {
                        history.pop_front();
                    }
                    history.push_back(Pair { rho: 1.0 / sy, s, y });
                }
                for i in 0..dim {
                    w[i] += alpha * p[i];
                }
                f = f_new;
                g = g_new;
                diag.iterations = iter + 1;
                diag.cost_history.push(f);
                diag.grad_norm_history.push(inf_norm(&g));
                if inf_norm(&g) <= opts.grad_tol {
                    diag.converged = true;
                    return (w, diag);
                }
            }
            SearchOutcome::Improved { alpha, f_new, g_new } => {
                // No Wolfe point within budget, but the cost went down:
                // accept the best trial and stop, flagged.
                for i in 0..dim {
                    w[i] += alpha * p[i];
                }
                diag.iterations = iter + 1;
                diag.cost_history.push(f_new);
                diag.grad_norm_history.push(inf_norm(&g_new));
                diag.line_search_failed = true;
                diag.converged = inf_norm(&g_new) <= opts.grad_tol;
                return (w, diag);
            }
            SearchOutcome::Failed => {
                diag.line_search_failed = true;
                return (w, diag);
            }
        }
    }

    (w, diag)
}

enum SearchOutcome {
    /// Strong Wolfe conditions hold at `alpha`.
    Accepted { alpha: f64, f_new: f64, g_new: Vec<f64> },
    /// Budget exhausted; `alpha` still improves the cost.
    Improved { alpha: f64, f_new: f64, g_new: Vec<f64> },
    Failed,
}

struct Trial {
    alpha: f64,
    f: f64,
    dphi: f64,
    g: Vec<f64>,
}

fn probe<F>(costgrad: &mut F, w: &[f64], p: &[f64], alpha: f64, evals: &mut usize) -> Trial
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let x: Vec<f64> = w.iter().zip(p).map(|(wi, pi)| wi + alpha * pi).collect();
    let (f, g) = costgrad(&x);
    *evals += 1;
    let dphi = dot(&g, p);
    Trial { alpha, f, dphi, g }
}

/// Relative cost allowance for the approximate Wolfe acceptance; covers the
/// ulp-level wobble of cost evaluations near the minimizer.
const APPROX_WOLFE_EPS: f64 = 1e-12;

/// Acceptance test for a trial step.
///
/// Besides the strong Wolfe conditions, a step is accepted on the
/// approximate (slope-based) Wolfe conditions of Hager and Zhang when the
/// cost does not increase beyond an ulp-level allowance. Near the minimizer
/// the cost is flat to machine precision and the sufficient-decrease test
/// cannot be resolved, while slopes still carry information; without this
/// escape the search stalls orders of magnitude above the gradient
/// tolerance.
fn acceptable(t: &Trial, f0: f64, dphi0: f64, opts: &LbfgsOptions) -> bool {
    let strong =
        t.f <= f0 + opts.c1 * t.alpha * dphi0 && t.dphi.abs() <= -opts.c2 * dphi0;
    let approx = t.f <= f0 + APPROX_WOLFE_EPS * f0.abs()
        && t.dphi >= opts.c2 * dphi0
        && t.dphi <= (2.0 * opts.c1 - 1.0) * dphi0;
    strong || approx
}

#[allow(clippy::too_many_arguments)]
fn wolfe_search<F>(
    costgrad: &mut F,
    w: &[f64],
    f0: f64,
    p: &[f64],
    dphi0: f64,
    first_step: f64,
    opts: &LbfgsOptions,
    fn_evals: &mut usize,
) -> SearchOutcome
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut evals = 0usize;
    let mut best: Option<Trial> = None;
    let mut note_best = |t: &Trial, best: &mut Option<Trial>| {
        if t.f < f0 && best.as_ref().map_or(true, |b| t.f < b.f) {
            *best = Some(Trial { alpha: t.alpha, f: t.f, dphi: t.dphi, g: t.g.clone() });
        }
    };

    // Bracketing phase.
    let mut prev = Trial { alpha: 0.0, f: f0, dphi: dphi0, g: Vec::new() };
    let mut alpha = first_step;
    let mut bracket: Option<(Trial, Trial)> = None;
    while evals < opts.max_ls_evals {
        let t = probe(costgrad, w, p, alpha, &mut evals);
        note_best(&t, &mut best);
        if acceptable(&t, f0, dphi0, opts) {
            let out = SearchOutcome::Accepted { alpha: t.alpha, f_new: t.f, g_new: t.g };
            *fn_evals += evals;
            return out;
        }
        if t.f > f0 + opts.c1 * t.alpha * dphi0 || (prev.alpha > 0.0 && t.f >= prev.f) {
            bracket = Some((prev, t));
            break;
        }
        if t.dphi >= 0.0 {
            bracket = Some((t, prev));
            break;
        }
        let next = t.alpha * 2.0;
        prev = t;
        alpha = next;
        if !alpha.is_finite() {
            break;
        }
    }

    // Zoom phase.
    if let Some((mut lo, mut hi)) = bracket {
        while evals < opts.max_ls_evals {
            // Quadratic interpolation using lo's value/slope and hi's value,
            // guarded towards bisection.
            let span = hi.alpha - lo.alpha;
            let denom = 2.0 * (hi.f - lo.f - lo.dphi * span);
            let mut trial_alpha = if denom.abs() > f64::MIN_POSITIVE {
                lo.alpha - lo.dphi * span * span / denom
            } else {
                lo.alpha + 0.5 * span
            };
            let lo_a = lo.alpha.min(hi.alpha);
            let hi_a = lo.alpha.max(hi.alpha);
            let margin = 0.1 * (hi_a - lo_a);
            if !trial_alpha.is_finite() || trial_alpha < lo_a + margin || trial_alpha > hi_a - margin
            {
                trial_alpha = lo.alpha + 0.5 * span;
            }
            let t = probe(costgrad, w, p, trial_alpha, &mut evals);
            note_best(&t, &mut best);
            if acceptable(&t, f0, dphi0, opts) {
                let out = SearchOutcome::Accepted { alpha: t.alpha, f_new: t.f, g_new: t.g };
                *fn_evals += evals;
                return out;
            }
            if t.f > f0 + opts.c1 * t.alpha * dphi0 || t.f >= lo.f {
                hi = t;
            } else {
                if t.dphi * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = Trial { alpha: lo.alpha, f: lo.f, dphi: lo.dphi, g: std::mem::take(&mut lo.g) };
                }
                lo = t;
            }
            if (hi.alpha - lo.alpha).abs() < 1e-16 * (1.0 + lo.alpha.abs()) {
                break;
            }
        }
    }

    *fn_evals += evals;
    match best {
        Some(t) => SearchOutcome::Improved { alpha: t.alpha, f_new: t.f, g_new: t.g },
        None => SearchOutcome::Failed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    #[test]
    fn zero_gradient_start_converges_immediately() {
        let (w, diag) = minimize_lbfgs(
            |w| (0.5 * w[0] * w[0], vec![w[0]]),
            vec![0.0],
            &LbfgsOptions::default(),
        );
        assert_eq!(diag.iterations, 0);
        assert!(diag.converged);
        assert_eq!(w, vec![0.0]);
    }

    #[test]
    fn one_dimensional_quadratic() {
        // J(w) = w^2/2 - w has its minimum at w = 1.
        let (w, diag) = minimize_lbfgs(
            |w| (0.5 * w[0] * w[0] - w[0], vec![w[0] - 1.0]),
            vec![0.0],
            &LbfgsOptions::default(),
        );
        assert!(diag.converged);
        assert_abs_diff_eq!(w[0], 1.0, epsilon = 1e-8);
    }

    #[test]
    fn cost_history_is_non_increasing() {
        let mut rng = crate::rng::stream(3);
        let dim = 12;
        let diagonal: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.5..50.0)).collect();
        let target: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let costgrad = |w: &[f64]| {
            let mut f = 0.0;
            let mut g = vec![0.0; dim];
            for i in 0..dim {
                let e = w[i] - target[i];
                f += 0.5 * diagonal[i] * e * e;
                g[i] = diagonal[i] * e;
            }
            (f, g)
        };
        let (w, diag) = minimize_lbfgs(costgrad, vec![0.0; dim], &LbfgsOptions::default());
        assert!(diag.converged);
        for pair in diag.cost_history.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12 * pair[0].abs().max(1.0));
        }
        for i in 0..dim {
            assert_abs_diff_eq!(w[i], target[i], epsilon = 1e-7);
        }
    }

    #[test]
    fn rosenbrock_converges() {
        let costgrad = |w: &[f64]| {
            let (x, y) = (w[0], w[1]);
            let f = (1.0 - x).powi(2) + 100.0 * (y - x * x).powi(2);
            let g = vec![
                -2.0 * (1.0 - x) - 400.0 * x * (y - x * x),
                200.0 * (y - x * x),
            ];
            (f, g)
        };
        let opts = LbfgsOptions { grad_tol: 1e-7, ..Default::default() };
        let (w, diag) = minimize_lbfgs(costgrad, vec![-1.2, 1.0], &opts);
        assert!(diag.converged, "diagnostics: {diag:?}");
        assert_abs_diff_eq!(w[0], 1.0, epsilon = 1e-5);
        assert_abs_diff_eq!(w[1], 1.0, epsilon = 1e-5);
        assert!(diag.iterations < 200);
    }

    #[test]
    fn iteration_cap_flags_non_convergence() {
        let opts = LbfgsOptions { max_iters: 2, grad_tol: 1e-14, ..Default::default() };
        let costgrad = |w: &[f64]| {
            let (x, y) = (w[0], w[1]);
            let f = (1.0 - x).powi(2) + 100.0 * (y - x * x).powi(2);
            let g = vec![
                -2.0 * (1.0 - x) - 400.0 * x * (y - x * x),
                200.0 * (y - x * x),
            ];
            (f, g)
        };
        let (_, diag) = minimize_lbfgs(costgrad, vec![-1.2, 1.0], &opts);
        assert!(!diag.converged);
        assert!(diag.iterations <= 2);
    }

    #[test]
    fn badly_scaled_quadratic_still_converges() {
        // Mimics the assimilation scale: curvature ~ 1e6.
        let (w, diag) = minimize_lbfgs(
            |w| {
                let f = 0.5 * 4.0e6 * (w[0] - 0.07).powi(2) + 0.5 * (w[1] + 1.0).powi(2);
                (f, vec![4.0e6 * (w[0] - 0.07), w[1] + 1.0])
            },
            vec![0.0, 0.0],
            &LbfgsOptions::default(),
        );
        assert!(diag.converged, "{diag:?}");
        assert_abs_diff_eq!(w[0], 0.07, epsilon = 1e-10);
        assert_abs_diff_eq!(w[1], -1.0, epsilon = 1e-8);
    }
}
