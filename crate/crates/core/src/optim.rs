//! Derivative-free minimization (Nelder–Mead) for small, smooth objectives.

#[derive(Clone, Debug)]
pub(crate) struct Minimum<const D: usize> {
    pub x: [f64; D],
    pub value: f64,
    pub converged: bool,
    pub evaluations: usize,
}

pub(crate) struct NelderMead {
    /// Stop when the simplex value spread is below `ftol · |f_best| + fabs`.
    pub ftol: f64,
    pub fabs: f64,
    /// Stop when every vertex is within `xtol` of the best one (max-norm).
    pub xtol: f64,
    pub max_iter: usize,
}

impl Default for NelderMead {
    fn default() -> Self {
        Self { ftol: 1e-12, fabs: 1e-30, xtol: 1e-12, max_iter: 20_000 }
    }
}

impl NelderMead {
    pub fn minimize<const D: usize>(
        &self,
        f: &dyn Fn(&[f64; D]) -> f64,
        start: [f64; D],
        step: f64,
    ) -> Minimum<D> {
        let eval = |x: &[f64; D]| {
            let v = f(x);
            if v.is_nan() {
                f64::INFINITY
            } else {
                v
            }
        };

        let mut simplex: Vec<([f64; D], f64)> = Vec::with_capacity(D + 1);
        simplex.push((start, eval(&start)));
        for i in 0..D {
            let mut x = start;
            x[i] += step;
            simplex.push((x, eval(&x)));
        }
        let mut evaluations = D + 1;
        let mut converged = false;

        for _ in 0..self.max_iter {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let best = simplex[0].1;
            let worst = simplex[D].1;
            let spread = worst - best;
            let diameter = simplex[1..]
                .iter()
                .flat_map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
                .fold(0.0, f64::max);
            if spread <= self.ftol * best.abs() + self.fabs || diameter <= self.xtol {
                converged = true;
                break;
            }

            let mut centroid = [0.0; D];
            for (x, _) in &simplex[..D] {
                for i in 0..D {
                    centroid[i] += x[i] / D as f64;
                }
            }
            let along = |t: f64| {
                let mut p = [0.0; D];
                for i in 0..D {
                    p[i] = centroid[i] + t * (simplex[D].0[i] - centroid[i]);
                }
                p
            };

            let reflected = along(-1.0);
            let fr = eval(&reflected);
            evaluations += 1;
            if fr < simplex[0].1 {
                let expanded = along(-2.0);
                let fe = eval(&expanded);
                evaluations += 1;
                simplex[D] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
                continue;
            }
            if fr < simplex[D - 1].1 {
                simplex[D] = (reflected, fr);
                continue;
            }
            let (contracted, fc) = if fr < worst {
                let c = along(-0.5);
                (c, eval(&c))
            } else {
                let c = along(0.5);
                (c, eval(&c))
            };
            evaluations += 1;
            if fc < worst.min(fr) {
                simplex[D] = (contracted, fc);
                continue;
            }
            let anchor = simplex[0].0;
            for (x, v) in simplex.iter_mut().skip(1) {
                for i in 0..D {
                    x[i] = anchor[i] + 0.5 * (x[i] - anchor[i]);
                }
                *v = eval(x);
            }
            evaluations += D;
        }

        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        Minimum { x: simplex[0].0, value: simplex[0].1, converged, evaluations }
    }

    /// Restarts from the best point until a restart no longer improves it.
    pub fn minimize_with_restarts<const D: usize>(
        &self,
        f: &dyn Fn(&[f64; D]) -> f64,
        start: [f64; D],
        step: f64,
        max_restarts: usize,
    ) -> Minimum<D> {
        let mut best = self.minimize(f, start, step);
        let mut step = step;
        for _ in 0..max_restarts {
            step *= 0.5;
            let next = self.minimize(f, best.x, step);
            let improved = next.value < best.value - self.ftol * best.value.abs() - self.fabs;
            let evaluations = best.evaluations + next.evaluations;
            if next.value <= best.value {
                best = Minimum { evaluations, ..next };
            } else {
                best.evaluations = evaluations;
            }
            if !improved {
                break;
            }
        }
        best
    }
}
