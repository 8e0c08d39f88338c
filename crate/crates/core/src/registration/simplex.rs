//! Nelder-Mead downhill simplex, derivative-free minimizer.

/// Minimize `f` starting from `x0` with per-parameter initial steps.
/// Returns the best point and its value.
pub fn nelder_mead<F>(
    f: &F,
    x0: &[f64],
    steps: &[f64],
    max_iter: usize,
    ftol: f64,
) -> (Vec<f64>, f64)
where
    F: Fn(&[f64]) -> f64,
{
    const ALPHA: f64 = 1.0; // reflection
    const GAMMA: f64 = 2.0; // expansion
    const RHO: f64 = 0.5; // contraction
    const SIGMA: f64 = 0.5; // shrink

    let n = x0.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), f(x0)));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += steps[i];
        let v = f(&x);
        simplex.push((x, v));
    }

    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        let best = simplex[0].1;
        let worst = simplex[n].1;
        if (worst - best).abs() <= ftol * (best.abs() + 1e-12) {
            break;
        }
        // centroid of all but the worst
        let mut centroid = vec![0.0; n];
        for (x, _) in &simplex[..n] {
            for (c, xi) in centroid.iter_mut().zip(x) {
                *c += xi / n as f64;
            }
        }
        let worst_x = simplex[n].0.clone();
        let reflect: Vec<f64> = centroid
            .iter()
            .zip(&worst_x)
            .map(|(c, w)| c + ALPHA * (c - w))
            .collect();
        let fr = f(&reflect);
        if fr < simplex[0].1 {
            let expand: Vec<f64> = centroid
                .iter()
                .zip(&worst_x)
                .map(|(c, w)| c + GAMMA * ALPHA * (c - w))
                .collect();
            let fe = f(&expand);
            simplex[n] = if fe < fr { (expand, fe) } else { (reflect, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (reflect, fr);
            continue;
        }
        let contract: Vec<f64> = centroid
            .iter()
            .zip(&worst_x)
            .map(|(c, w)| c + RHO * (w - c))
            .collect();
        let fc = f(&contract);
        if fc < simplex[n].1 {
            simplex[n] = (contract, fc);
            continue;
        }
        // shrink toward the best vertex
        let best_x = simplex[0].0.clone();
        for entry in simplex.iter_mut().skip(1) {
            let x: Vec<f64> = best_x
                .iter()
                .zip(&entry.0)
                .map(|(b, xi)| b + SIGMA * (xi - b))
                .collect();
            let v = f(&x);
            *entry = (x, v);
        }
    }
    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    simplex.swap_remove(0)
}

/// Compass (pattern) search: polish a solution by probing +/- step along
/// each coordinate, halving the steps whenever no axis improves.
pub fn pattern_search<F>(
    f: &F,
    x0: &[f64],
    steps: &[f64],
    shrinks: usize,
    max_sweeps: usize,
) -> (Vec<f64>, f64)
where
    F: Fn(&[f64]) -> f64,
{
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    let mut step: Vec<f64> = steps.to_vec();
    let mut remaining = shrinks;
    for _ in 0..max_sweeps {
        let mut improved = false;
        for i in 0..x.len() {
            for dir in [1.0, -1.0] {
                let mut probe = x.clone();
                probe[i] += dir * step[i];
                let fp = f(&probe);
                if fp < fx {
                    x = probe;
                    fx = fp;
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            if remaining == 0 {
                break;
            }
            remaining -= 1;
            for s in step.iter_mut() {
                *s *= 0.5;
            }
        }
    }
    (x, fx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pattern_search_polishes() {
        let f = |x: &[f64]| (x[0] - 1.0).powi(2) + (x[1] + 2.0).powi(2);
        let (x, v) = pattern_search(&f, &[0.9, -1.9], &[0.05, 0.05], 10, 200);
        assert!(v < 1e-6);
        assert!((x[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn minimizes_quadratic_bowl() {
        let f = |x: &[f64]| {
            (x[0] - 3.0).powi(2) + 2.0 * (x[1] + 1.0).powi(2) + 0.5 * (x[2] - 0.5).powi(2)
        };
        let (x, v) = nelder_mead(&f, &[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0], 500, 1e-12);
        assert!(v < 1e-8, "value {v}");
        assert!((x[0] - 3.0).abs() < 1e-3);
        assert!((x[1] + 1.0).abs() < 1e-3);
        assert!((x[2] - 0.5).abs() < 1e-3);
    }

    #[test]
    fn handles_rosenbrock_reasonably() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let (x, _) = nelder_mead(&f, &[-1.0, 1.0], &[0.5, 0.5], 2000, 1e-14);
        assert!((x[0] - 1.0).abs() < 0.05, "x {x:?}");
    }
}
