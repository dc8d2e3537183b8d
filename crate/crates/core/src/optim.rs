//! Nelder-Mead downhill simplex minimisation, plus a wrapper that optimises
//! over the probability simplex through a softmax of free logits.

use rand::Rng;
use serde::Serialize;

use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMeadConfig {
    /// Stop when the spread of objective values across the simplex falls
    /// below this and the simplex has shrunk below `x_tolerance`.
    pub f_tolerance: f64,
    pub x_tolerance: f64,
    pub max_iters: usize,
    /// Edge length of the initial simplex.
    pub initial_step: f64,
    /// Fresh simplices started from the best point after convergence; two
    /// consecutive restarts without improvement end the search.
    pub max_restarts: usize,
    pub seed: u64,
}

impl NelderMeadConfig {
    pub fn new(dim: usize) -> Self {
        NelderMeadConfig {
            f_tolerance: 1e-8,
            x_tolerance: 1e-8,
            max_iters: 2000 * dim.max(1),
            initial_step: 0.1,
            max_restarts: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NelderMeadResult {
    pub point: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

const REFLECT: f64 = 1.0;
const EXPAND: f64 = 2.0;
const CONTRACT: f64 = 0.5;
const SHRINK: f64 = 0.5;

fn eval<F: FnMut(&[f64]) -> f64>(f: &mut F, x: &[f64]) -> f64 {
    let v = f(x);
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

/// Minimises `f` from `x0`. NaN objective values are treated as `+inf`.
pub fn nelder_mead<F>(mut f: F, x0: &[f64], cfg: &NelderMeadConfig) -> NelderMeadResult
where
    F: FnMut(&[f64]) -> f64,
{
    let dim = x0.len();
    let mut best = (x0.to_vec(), eval(&mut f, x0));
    if dim == 0 {
        return NelderMeadResult {
            point: best.0,
            value: best.1,
            iterations: 0,
            converged: true,
        };
    }
    let mut rng = stream(cfg.seed);
    let mut iterations = 0;
    let mut converged = false;
    let mut stale = 0;
    for restart in 0..=cfg.max_restarts {
        let mut simplex: Vec<Vec<f64>> = vec![best.0.clone()];
        for i in 0..dim {
            let mut v = best.0.clone();
            if restart == 0 {
                v[i] += cfg.initial_step;
            } else {
                // Randomly oriented vertices escape valleys not aligned with the axes.
                for x in v.iter_mut() {
                    *x += cfg.initial_step * rng.random_range(-1.0..1.0);
                }
            }
            simplex.push(v);
        }
        let start_value = best.1;
        let (point, value, iters, ok) =
            run_simplex(&mut f, simplex, cfg, cfg.max_iters - iterations);
        iterations += iters;
        converged = ok;
        if value < best.1 {
            best = (point, value);
        }
        let improved = start_value - best.1 > cfg.f_tolerance * (1.0 + best.1.abs());
        stale = if restart > 0 && !improved {
            stale + 1
        } else {
            0
        };
        if !ok || iterations >= cfg.max_iters || stale >= 2 {
            break;
        }
    }
    NelderMeadResult {
        point: best.0,
        value: best.1,
        iterations,
        converged,
    }
}

fn run_simplex<F: FnMut(&[f64]) -> f64>(
    f: &mut F,
    mut simplex: Vec<Vec<f64>>,
    cfg: &NelderMeadConfig,
    budget: usize,
) -> (Vec<f64>, f64, usize, bool) {
    let dim = simplex.len() - 1;
    let mut values: Vec<f64> = simplex.iter().map(|x| eval(f, x)).collect();
    let mut iters = 0;
    loop {
        let mut order: Vec<usize> = (0..=dim).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let spread = values[dim] - values[0];
        let size = simplex[1..]
            .iter()
            .flat_map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if spread.is_finite() && spread <= cfg.f_tolerance && size <= cfg.x_tolerance {
            return (simplex.swap_remove(0), values[0], iters, true);
        }
        if iters >= budget {
            return (simplex.swap_remove(0), values[0], iters, false);
        }
        iters += 1;

        let centroid: Vec<f64> = (0..dim)
            .map(|j| simplex[..dim].iter().map(|v| v[j]).sum::<f64>() / dim as f64)
            .collect();
        let towards = |coef: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[dim])
                .map(|(c, w)| c + coef * (c - w))
                .collect()
        };

        let xr = towards(REFLECT);
        let fr = eval(f, &xr);
        if fr < values[0] {
            let xe = towards(REFLECT * EXPAND);
            let fe = eval(f, &xe);
            if fe < fr {
                simplex[dim] = xe;
                values[dim] = fe;
            } else {
                simplex[dim] = xr;
                values[dim] = fr;
            }
            continue;
        }
        if fr < values[dim - 1] {
            simplex[dim] = xr;
            values[dim] = fr;
            continue;
        }
        // Outside contraction when the reflection beat the worst vertex,
        // inside contraction otherwise.
        let xc = if fr < values[dim] {
            towards(REFLECT * CONTRACT)
        } else {
            towards(-CONTRACT)
        };
        let fc = eval(f, &xc);
        if fc <= values[dim].min(fr) && fc < values[dim] {
            simplex[dim] = xc;
            values[dim] = fc;
            continue;
        }
        let best = simplex[0].clone();
        for i in 1..=dim {
            for (x, b) in simplex[i].iter_mut().zip(&best) {
                *x = b + SHRINK * (*x - b);
            }
            values[i] = eval(f, &simplex[i]);
        }
    }
}

/// Maps `g - 1` free logits to a point of the probability simplex; the last
/// logit is pinned at zero.
pub fn softmax_point(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(0.0, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&y| (y - max).exp()).collect();
    out.push((-max).exp());
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= total);
    out
}

/// Minimises `objective` over `{lambda in [0,1]^g : sum lambda = 1}`, starting
/// from the uniform point.
pub fn minimize_on_simplex<F>(
    mut objective: F,
    g: usize,
    cfg: &NelderMeadConfig,
) -> NelderMeadResult
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(g >= 1, "simplex of dimension zero");
    let res = nelder_mead(|y| objective(&softmax_point(y)), &vec![0.0; g - 1], cfg);
    NelderMeadResult {
        point: softmax_point(&res.point),
        ..res
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_bowl() {
        let target = [1.5, -2.0, 0.25];
        let f = |x: &[f64]| {
            x.iter()
                .zip(&target)
                .enumerate()
                .map(|(i, (a, b))| (i + 1) as f64 * (a - b).powi(2))
                .sum()
        };
        let res = nelder_mead(f, &[0.0; 3], &NelderMeadConfig::new(3));
        assert!(res.converged);
        for (x, t) in res.point.iter().zip(&target) {
            assert!((x - t).abs() < 1e-6, "{:?}", res.point);
        }
    }

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let res = nelder_mead(f, &[-1.2, 1.0], &NelderMeadConfig::new(2));
        assert!(
            (res.point[0] - 1.0).abs() < 1e-5 && (res.point[1] - 1.0).abs() < 1e-5,
            "{res:?}"
        );
    }

    #[test]
    fn iteration_cap_reports_non_convergence() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let cfg = NelderMeadConfig {
            max_iters: 5,
            ..NelderMeadConfig::new(2)
        };
        let res = nelder_mead(f, &[-1.2, 1.0], &cfg);
        assert!(!res.converged);
        assert!(res.iterations <= 5);
        assert!(res.value <= 24.2 + 1e-12);
    }

    #[test]
    fn softmax_is_on_simplex() {
        let p = softmax_point(&[0.0, 0.0]);
        assert!(p.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        let p = softmax_point(&[800.0, -3.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12 && p.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn simplex_minimax_equalizes() {
        let err = [1.0, 3.0];
        let res = minimize_on_simplex(
            |l| err.iter().zip(l).map(|(e, x)| e / x).fold(0.0, f64::max),
            2,
            &NelderMeadConfig::new(2),
        );
        assert!((res.point[0] - 0.25).abs() < 1e-6, "{:?}", res.point);
    }
}
