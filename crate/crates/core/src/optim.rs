//! Box-constrained quasi-Newton minimiser (projected BFGS with Armijo backtracking).
//!
//! Small dense problems only: the inverse-Hessian approximation is a full `n x n` matrix.

#[derive(Debug, Clone)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    fn project(&self, x: &mut [f64]) {
        for ((xi, lo), hi) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *xi = xi.clamp(*lo, *hi);
        }
    }

    /// Indices pinned at a bound with the gradient pushing outward.
    fn active(&self, x: &[f64], g: &[f64]) -> Vec<bool> {
        x.iter()
            .zip(g)
            .enumerate()
            .map(|(i, (&xi, &gi))| {
                (xi <= self.lower[i] && gi > 0.0) || (xi >= self.upper[i] && gi < 0.0)
            })
            .collect()
    }

    pub fn touches(&self, x: &[f64]) -> bool {
        x.iter().enumerate().any(|(i, &xi)| {
            let span = (self.upper[i] - self.lower[i]).abs().max(1.0);
            (xi - self.lower[i]).abs() < 1e-9 * span || (self.upper[i] - xi).abs() < 1e-9 * span
        })
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct Settings {
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            max_iter: 400,
            grad_tol: 1e-8,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimise `f` (returning value and gradient) from `x0` inside `bounds`.
pub fn minimize<F>(f: F, x0: &[f64], bounds: &Bounds, settings: Settings) -> Minimum
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let (mut fx, mut g) = f(&x);
    let mut h = identity(n);
    let mut converged = false;
    let mut iterations = 0;

    while iterations < settings.max_iter {
        iterations += 1;
        let active = bounds.active(&x, &g);
        let pg_norm = g
            .iter()
            .zip(&active)
            .filter(|(_, a)| !**a)
            .map(|(gi, _)| gi.abs())
            .fold(0.0, f64::max);
        if pg_norm < settings.grad_tol * (1.0 + fx.abs()) {
            converged = true;
            break;
        }

        let mut d = vec![0.0; n];
        for i in 0..n {
            if active[i] {
                continue;
            }
            d[i] = -(0..n).filter(|&j| !active[j]).map(|j| h[i][j] * g[j]).sum::<f64>();
        }
        if dot(&d, &g) >= 0.0 {
            h = identity(n);
            for i in 0..n {
                d[i] = if active[i] { 0.0 } else { -g[i] };
            }
        }

        let mut t = 1.0;
        let mut accepted = None;
        while t > 1e-14 {
            let mut xn: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + t * di).collect();
            bounds.project(&mut xn);
            let step: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
            let (fnew, gnew) = f(&xn);
            if fnew.is_finite() && fnew <= fx + 1e-4 * dot(&g, &step) {
                accepted = Some((xn, step, fnew, gnew));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, s, fnew, gnew)) = accepted else {
            // no descent along the projected direction: stationary up to float noise
            converged = pg_norm < 1e-5 * (1.0 + fx.abs());
            break;
        };

        let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-14 {
            bfgs_update(&mut h, &s, &y, sy);
        }
        let small_change = (fx - fnew).abs() <= 1e-15 * (1.0 + fx.abs())
            && s.iter().all(|v| v.abs() < 1e-12);
        x = xn;
        fx = fnew;
        g = gnew;
        if small_change {
            converged = true;
            break;
        }
    }

    Minimum {
        x,
        value: fx,
        converged,
    }
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| dot(&h[i], y)).collect();
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i][j] += (1.0 + rho * yhy) * rho * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> (f64, Vec<f64>) {
        let (a, b) = (x[0], x[1]);
        let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![
            -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
            200.0 * (b - a * a),
        ];
        (v, g)
    }

    #[test]
    fn finds_rosenbrock_minimum() {
        let bounds = Bounds {
            lower: vec![-5.0, -5.0],
            upper: vec![5.0, 5.0],
        };
        let m = minimize(rosenbrock, &[-1.2, 1.0], &bounds, Settings::default());
        assert!(m.converged);
        assert!((m.x[0] - 1.0).abs() < 1e-6 && (m.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn respects_active_bound() {
        let bounds = Bounds {
            lower: vec![2.0, -5.0],
            upper: vec![5.0, 5.0],
        };
        let m = minimize(
            |x| ((x[0] - 1.0).powi(2) + (x[1] + 1.0).powi(2), vec![2.0 * (x[0] - 1.0), 2.0 * (x[1] + 1.0)]),
            &[3.0, 3.0],
            &bounds,
            Settings::default(),
        );
        assert!((m.x[0] - 2.0).abs() < 1e-12);
        assert!((m.x[1] + 1.0).abs() < 1e-7);
        assert!(bounds.touches(&m.x));
    }
}
