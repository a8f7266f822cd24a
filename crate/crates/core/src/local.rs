//! Bounded Nelder–Mead used for local polishing.
//!
//! Trial points are clipped into the box, and an objective may return `+∞`
//! to reject a point (used to stay inside a sampled feasible region). The
//! returned point is never worse than the start.

use crate::domain::Bounds;

#[derive(Clone, Copy, Debug)]
pub struct PolishOptions {
    pub max_evals: usize,
    /// Initial simplex edge as a fraction of each box width.
    pub initial_step: f64,
    /// Stop when the spread of simplex values falls below this.
    pub f_tol: f64,
}

impl Default for PolishOptions {
    fn default() -> Self {
        Self { max_evals: 100, initial_step: 0.05, f_tol: 1e-10 }
    }
}

#[derive(Clone, Debug)]
pub struct PolishResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
}

pub fn minimize<F>(mut f: F, start: &[f64], start_value: Option<f64>, bounds: &Bounds, opts: PolishOptions) -> PolishResult
where
    F: FnMut(&[f64]) -> f64,
{
    let d = start.len();
    let widths = bounds.widths();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut x0 = start.to_vec();
    bounds.clamp(&mut x0);
    let f0 = match start_value {
        Some(v) => v,
        None => eval(&x0, &mut evals),
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = vec![(x0.clone(), f0)];
    for i in 0..d {
        if evals >= opts.max_evals {
            break;
        }
        let mut x = x0.clone();
        let step = opts.initial_step * widths[i];
        // step inward if the start sits on the upper face
        x[i] = if x[i] + step <= bounds.upper[i] { x[i] + step } else { x[i] - step };
        let v = eval(&x, &mut evals);
        simplex.push((x, v));
    }
    if simplex.len() < d + 1 {
        return best_of(simplex, evals);
    }

    let clip = |mut x: Vec<f64>| {
        bounds.clamp(&mut x);
        x
    };

    while evals < opts.max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[d].1;
        if worst.is_finite() && (worst - best).abs() <= opts.f_tol * (1.0 + best.abs()) {
            break;
        }
        let mut centroid = vec![0.0; d];
        for (x, _) in &simplex[..d] {
            for (c, v) in centroid.iter_mut().zip(x) {
                *c += v / d as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[d].0)
                .map(|(c, w)| c + t * (w - c))
                .collect()
        };
        let xr = clip(along(-1.0));
        let fr = eval(&xr, &mut evals);
        if fr < simplex[0].1 {
            let xe = clip(along(-2.0));
            let fe = if evals < opts.max_evals { eval(&xe, &mut evals) } else { f64::INFINITY };
            simplex[d] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[d - 1].1 {
            simplex[d] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < simplex[d].1 {
            let x = clip(along(-0.5));
            let v = eval(&x, &mut evals);
            (x, v)
        } else {
            let x = clip(along(0.5));
            let v = eval(&x, &mut evals);
            (x, v)
        };
        if fc < simplex[d].1.min(fr) {
            simplex[d] = (xc, fc);
            continue;
        }
        // shrink toward the best vertex
        let x_best = simplex[0].0.clone();
        for vertex in simplex.iter_mut().skip(1) {
            if evals >= opts.max_evals {
                break;
            }
            let x: Vec<f64> = x_best.iter().zip(&vertex.0).map(|(b, v)| b + 0.5 * (v - b)).collect();
            let v = eval(&x, &mut evals);
            *vertex = (x, v);
        }
    }
    best_of(simplex, evals)
}

fn best_of(simplex: Vec<(Vec<f64>, f64)>, evals: usize) -> PolishResult {
    // the start vertex comes first, so ties keep it
    let mut best = 0;
    for i in 1..simplex.len() {
        if simplex[i].1 < simplex[best].1 {
            best = i;
        }
    }
    let (x, value) = simplex.into_iter().nth(best).unwrap();
    PolishResult { x, value, evals }
}
