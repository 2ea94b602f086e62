//! Derivative-free Nelder-Mead simplex minimization.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct NelderMead {
    /// Per-coordinate edge length of the initial simplex.
    pub initial_step: Vec<f64>,
    pub max_evaluations: usize,
    /// Stop when every vertex lies within this distance of the best one...
    pub diameter_tol: f64,
    /// ...and the objective values span less than this.
    pub value_tol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub point: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    pub iterations: usize,
    pub converged: bool,
}

const REFLECT: f64 = 1.0;
const EXPAND: f64 = 2.0;
const CONTRACT: f64 = 0.5;
const SHRINK: f64 = 0.5;

impl NelderMead {
    pub fn new(initial_step: Vec<f64>) -> Self {
        Self { initial_step, max_evaluations: 5000, diameter_tol: 1e-7, value_tol: 1e-10 }
    }

    /// Minimize `f` from `start`. Non-finite objective values are treated as
    /// `+inf`, so the simplex backs away from them.
    pub fn minimize<F: FnMut(&[f64]) -> f64>(&self, mut f: F, start: &[f64]) -> Result<Minimum> {
        let dim = start.len();
        assert_eq!(self.initial_step.len(), dim);
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

        let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
        simplex.push((start.to_vec(), eval(start, &mut evals)));
        for j in 0..dim {
            let mut x = start.to_vec();
            x[j] += self.initial_step[j];
            let v = eval(&x, &mut evals);
            simplex.push((x, v));
        }

        let mut iterations = 0;
        loop {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let best = simplex[0].1;
            let worst = simplex[dim].1;
            let diameter = simplex[1..]
                .iter()
                .map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
                .fold(0.0, f64::max);
            if diameter < self.diameter_tol && (worst - best).abs() < self.value_tol {
                return Ok(Minimum {
                    point: simplex[0].0.clone(),
                    value: best,
                    evaluations: evals,
                    iterations,
                    converged: true,
                });
            }
            if evals >= self.max_evaluations {
                return Err(Error::NotConverged {
                    evaluations: evals,
                    best_point: simplex[0].0.clone(),
                    best_value: best,
                });
            }
            iterations += 1;

            let centroid: Vec<f64> =
                (0..dim).map(|j| simplex[..dim].iter().map(|(x, _)| x[j]).sum::<f64>() / dim as f64).collect();
            let along = |t: f64, from: &[f64]| -> Vec<f64> {
                centroid.iter().zip(from).map(|(c, w)| c + t * (c - w)).collect()
            };
            let worst_x = simplex[dim].0.clone();
            let xr = along(REFLECT, &worst_x);
            let fr = eval(&xr, &mut evals);
            if fr < simplex[0].1 {
                let xe = along(EXPAND, &worst_x);
                let fe = eval(&xe, &mut evals);
                simplex[dim] = if fe < fr { (xe, fe) } else { (xr, fr) };
                continue;
            }
            if fr < simplex[dim - 1].1 {
                simplex[dim] = (xr, fr);
                continue;
            }
            // Contract toward the better of the reflected and worst points.
            let (xc, fc) = if fr < worst {
                let xc = along(CONTRACT, &worst_x);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            } else {
                let xc = along(-CONTRACT, &worst_x);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            };
            if fc < worst.min(fr) {
                simplex[dim] = (xc, fc);
                continue;
            }
            let best_x = simplex[0].0.clone();
            for v in simplex.iter_mut().skip(1) {
                let x: Vec<f64> = best_x.iter().zip(&v.0).map(|(b, x)| b + SHRINK * (x - b)).collect();
                let fx = eval(&x, &mut evals);
                *v = (x, fx);
            }
        }
    }
}
