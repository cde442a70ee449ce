//! Limited-memory BFGS with a strong-Wolfe line search.

use std::collections::VecDeque;

use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iter: usize,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iter: 5000,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stop {
    Converged,
    MaxIter,
    /// The line search found no acceptable step; usually the objective is flat to rounding.
    Stalled,
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub stop: Stop,
    /// Objective after every accepted step, starting with the initial point.
    #[cfg_attr(not(test), allow(dead_code))]
    pub history: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

fn two_loop(grad: &[f64], pairs: &VecDeque<Pair>) -> Vec<f64> {
    let mut q = grad.to_vec();
    let mut alpha = vec![0.0; pairs.len()];
    for (k, p) in pairs.iter().enumerate().rev() {
        alpha[k] = p.rho * dot(&p.s, &q);
        for (qi, yi) in q.iter_mut().zip(&p.y) {
            *qi -= alpha[k] * yi;
        }
    }
    if let Some(p) = pairs.back() {
        let gamma = dot(&p.s, &p.y) / dot(&p.y, &p.y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for (k, p) in pairs.iter().enumerate() {
        let beta = p.rho * dot(&p.y, &q);
        for (qi, si) in q.iter_mut().zip(&p.s) {
            *qi += (alpha[k] - beta) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

struct Point {
    t: f64,
    f: f64,
    d: f64,
    x: Vec<f64>,
    g: Vec<f64>,
}

/// Minimize `f`, which writes its gradient into the second argument.
///
/// `done(x, grad)` decides convergence and is checked at the start point and
/// after every accepted step.
pub fn minimize<F, D>(mut f: F, x0: Vec<f64>, opts: &LbfgsOptions, mut done: D) -> Result<LbfgsOutcome>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<f64>,
    D: FnMut(&[f64], &[f64]) -> bool,
{
    let n = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g)?;
    let mut evaluations = 1;
    let mut history = vec![fx];
    let mut pairs: VecDeque<Pair> = VecDeque::with_capacity(opts.memory);
    let mut iterations = 0;
    let mut stop = Stop::MaxIter;
    let mut fresh_restart = false;
    while iterations < opts.max_iter {
        if done(&x, &g) {
            stop = Stop::Converged;
            break;
        }
        let mut dir = two_loop(&g, &pairs);
        let mut slope = dot(&dir, &g);
        if !(slope < 0.0) {
            pairs.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = dot(&dir, &g);
            if slope == 0.0 {
                stop = Stop::Converged;
                break;
            }
        }
        let t0 = if pairs.is_empty() {
            (1.0 / dir.iter().fold(0.0f64, |m, v| m.max(v.abs()))).min(1.0)
        } else {
            1.0
        };
        let found = line_search(&mut f, &x, fx, slope, &dir, t0, opts, &mut evaluations)?;
        let Some(p) = found else {
            if pairs.is_empty() || fresh_restart {
                stop = Stop::Stalled;
                break;
            }
            // Retry once along steepest descent before giving up.
            pairs.clear();
            fresh_restart = true;
            continue;
        };
        fresh_restart = false;
        let s: Vec<f64> = p.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = p.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            if pairs.len() == opts.memory {
                pairs.pop_front();
            }
            pairs.push_back(Pair { s, y, rho: 1.0 / sy });
        }
        x = p.x;
        g = p.g;
        fx = p.f;
        history.push(fx);
        iterations += 1;
    }
    Ok(LbfgsOutcome {
        x,
        iterations,
        evaluations,
        stop,
        history,
    })
}

#[allow(clippy::too_many_arguments)]
fn line_search<F>(
    f: &mut F,
    x: &[f64],
    f0: f64,
    d0: f64,
    dir: &[f64],
    t0: f64,
    opts: &LbfgsOptions,
    evaluations: &mut usize,
) -> Result<Option<Point>>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<f64>,
{
    let mut probe = |t: f64, evaluations: &mut usize| -> Result<Point> {
        let xt: Vec<f64> = x.iter().zip(dir).map(|(a, b)| a + t * b).collect();
        let mut gt = vec![0.0; x.len()];
        let ft = f(&xt, &mut gt)?;
        *evaluations += 1;
        let d = dot(&gt, dir);
        Ok(Point { t, f: ft, d, x: xt, g: gt })
    };
    let armijo = |p: &Point| p.f.is_finite() && p.f <= f0 + opts.c1 * p.t * d0;
    let curvature = |p: &Point| p.d.abs() <= -opts.c2 * d0;

    let mut lo = Point {
        t: 0.0,
        f: f0,
        d: d0,
        x: x.to_vec(),
        g: Vec::new(),
    };
    let mut t = t0;
    let mut evals = 0;
    let mut best: Option<Point> = None;
    // Bracketing phase.
    let hi = loop {
        if evals >= opts.max_line_search {
            return Ok(best);
        }
        evals += 1;
        let p = probe(t, evaluations)?;
        if !p.f.is_finite() {
            t *= 0.1;
            continue;
        }
        if !armijo(&p) || (evals > 1 && p.f >= lo.f) {
            break p;
        }
        if curvature(&p) {
            return Ok(Some(p));
        }
        if p.d >= 0.0 {
            let old = std::mem::replace(&mut lo, p);
            best = Some(lo.clone_point());
            break old;
        }
        best = Some(p.clone_point());
        lo = p;
        t *= 2.5;
    };
    let mut hi = hi;
    // Zoom phase.
    while evals < opts.max_line_search {
        evals += 1;
        let (a, b) = (lo.t, hi.t);
        let mut tm = cubic_min(&lo, &hi).unwrap_or(0.5 * (a + b));
        let (l, r) = (a.min(b), a.max(b));
        let margin = 0.1 * (r - l);
        if !(tm > l + margin && tm < r - margin) {
            tm = 0.5 * (a + b);
        }
        if (r - l) <= 1e-16 * r.max(1.0) {
            break;
        }
        let p = probe(tm, evaluations)?;
        if !armijo(&p) || p.f >= lo.f {
            hi = p;
        } else {
            if curvature(&p) {
                return Ok(Some(p));
            }
            if p.d * (hi.t - lo.t) >= 0.0 {
                hi = std::mem::replace(&mut lo, p);
            } else {
                lo = p;
            }
            best = Some(lo.clone_point());
        }
    }
    // Accept a sufficient-decrease point even if the curvature test failed.
    Ok(best.filter(|p| p.t > 0.0 && armijo(p)))
}

impl Point {
    fn clone_point(&self) -> Point {
        Point {
            t: self.t,
            f: self.f,
            d: self.d,
            x: self.x.clone(),
            g: self.g.clone(),
        }
    }
}

/// Minimizer of the cubic interpolating values and slopes at two points.
fn cubic_min(p: &Point, q: &Point) -> Option<f64> {
    let d1 = p.d + q.d - 3.0 * (p.f - q.f) / (p.t - q.t);
    let disc = d1 * d1 - p.d * q.d;
    if !(disc >= 0.0) {
        return None;
    }
    let d2 = (q.t - p.t).signum() * disc.sqrt();
    let t = q.t - (q.t - p.t) * (q.d + d2 - d1) / (q.d - p.d + 2.0 * d2);
    t.is_finite().then_some(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64], g: &mut [f64]) -> Result<f64> {
        let mut f = 0.0;
        g.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..x.len() - 1 {
            let a = x[i + 1] - x[i] * x[i];
            let b = 1.0 - x[i];
            f += 100.0 * a * a + b * b;
            g[i] += -400.0 * a * x[i] - 2.0 * b;
            g[i + 1] += 200.0 * a;
        }
        Ok(f)
    }

    #[test]
    fn solves_rosenbrock() {
        let out = minimize(rosenbrock, vec![-1.2, 1.0, -0.5, 0.8], &LbfgsOptions::default(), |_, g| {
            g.iter().fold(0.0f64, |m, v| m.max(v.abs())) < 1e-10
        })
        .unwrap();
        assert_eq!(out.stop, Stop::Converged);
        for v in &out.x {
            assert!((v - 1.0).abs() < 1e-8);
        }
        assert!(out.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn quadratic_in_few_steps() {
        let diag = [1.0, 10.0, 100.0, 1000.0];
        let f = |x: &[f64], g: &mut [f64]| -> Result<f64> {
            let mut v = 0.0;
            for i in 0..4 {
                g[i] = diag[i] * (x[i] - 1.0);
                v += 0.5 * diag[i] * (x[i] - 1.0).powi(2);
            }
            Ok(v)
        };
        let out = minimize(f, vec![0.0; 4], &LbfgsOptions::default(), |_, g| {
            g.iter().fold(0.0f64, |m, v| m.max(v.abs())) < 1e-12
        })
        .unwrap();
        assert_eq!(out.stop, Stop::Converged);
        assert!(out.iterations < 30);
    }
}
