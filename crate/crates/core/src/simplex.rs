//! Nelder–Mead simplex minimisation with a single restart.

#[derive(Debug, Clone)]
pub struct SimplexOptions {
    /// Iteration cap per stage (initial run and restart each get this many).
    pub max_iterations: usize,
    /// Stop when the best value improves by less than this over `n + 1` iterations.
    pub improvement_tol: f64,
    /// ... and the simplex values span less than this.
    pub spread_tol: f64,
    /// Edge length of the initial simplex along each coordinate.
    pub initial_step: f64,
    /// Edge length of the restart simplex around the best vertex.
    pub restart_step: f64,
    pub restarts: usize,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        SimplexOptions {
            max_iterations: 2000,
            improvement_tol: 1e-9,
            spread_tol: 1e-7,
            initial_step: 0.2,
            restart_step: 0.05,
            restarts: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimplexResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

const REFLECT: f64 = 1.0;
const EXPAND: f64 = 2.0;
const CONTRACT: f64 = 0.5;
const SHRINK: f64 = 0.5;

struct Counted<F> {
    f: F,
    evaluations: usize,
}

impl<F: FnMut(&[f64]) -> f64> Counted<F> {
    fn eval(&mut self, x: &[f64]) -> f64 {
        self.evaluations += 1;
        let v = (self.f)(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }
}

/// Minimises `f` starting from `x0`. The returned value never exceeds `f(x0)`.
pub fn minimize<F: FnMut(&[f64]) -> f64>(f: F, x0: &[f64], opts: &SimplexOptions) -> SimplexResult {
    let mut counted = Counted { f, evaluations: 0 };
    let start_value = counted.eval(x0);
    if x0.is_empty() {
        return SimplexResult {
            x: Vec::new(),
            value: start_value,
            iterations: 0,
            evaluations: counted.evaluations,
            converged: true,
        };
    }

    let mut best = (x0.to_vec(), start_value);
    let mut iterations = 0;
    let mut converged = false;
    for stage in 0..=opts.restarts {
        let step = if stage == 0 {
            opts.initial_step
        } else {
            opts.restart_step
        };
        let (x, v, it, conv) = run_stage(&mut counted, &best.0, best.1, step, opts);
        iterations += it;
        converged = conv;
        if v <= best.1 {
            best = (x, v);
        }
    }
    SimplexResult {
        x: best.0,
        value: best.1,
        iterations,
        evaluations: counted.evaluations,
        converged,
    }
}

fn run_stage<F: FnMut(&[f64]) -> f64>(
    f: &mut Counted<F>,
    start: &[f64],
    start_value: f64,
    step: f64,
    opts: &SimplexOptions,
) -> (Vec<f64>, f64, usize, bool) {
    let n = start.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((start.to_vec(), start_value));
    for i in 0..n {
        let mut v = start.to_vec();
        v[i] += if v[i].abs() > 1e-12 { step * v[i].abs().max(0.25) } else { step };
        let fv = f.eval(&v);
        simplex.push((v, fv));
    }

    let mut cycle_best = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    let mut centroid = vec![0.0; n];
    let mut trial = vec![0.0; n];

    while iterations < opts.max_iterations {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if iterations % (n + 1) == 0 {
            let best = simplex[0].1;
            let spread = simplex[n].1 - best;
            if cycle_best - best < opts.improvement_tol && spread < opts.spread_tol {
                converged = true;
                break;
            }
            cycle_best = best;
        }
        iterations += 1;

        centroid.iter_mut().for_each(|c| *c = 0.0);
        for (v, _) in &simplex[..n] {
            for (c, x) in centroid.iter_mut().zip(v) {
                *c += x / n as f64;
            }
        }
        let worst = simplex[n].0.clone();
        let f_worst = simplex[n].1;
        let f_best = simplex[0].1;
        let f_second = simplex[n - 1].1;

        let point_at = |coef: f64, out: &mut Vec<f64>| {
            for ((o, c), w) in out.iter_mut().zip(&centroid).zip(&worst) {
                *o = c + coef * (c - w);
            }
        };

        point_at(REFLECT, &mut trial);
        let f_reflect = f.eval(&trial);
        if f_reflect < f_best {
            let reflected = trial.clone();
            point_at(EXPAND, &mut trial);
            let f_expand = f.eval(&trial);
            simplex[n] = if f_expand < f_reflect {
                (trial.clone(), f_expand)
            } else {
                (reflected, f_reflect)
            };
            continue;
        }
        if f_reflect < f_second {
            simplex[n] = (trial.clone(), f_reflect);
            continue;
        }
        // Outside contraction if the reflection beat the worst vertex, inside otherwise.
        let (coef, bound) = if f_reflect < f_worst {
            (CONTRACT, f_reflect)
        } else {
            (-CONTRACT, f_worst)
        };
        point_at(coef, &mut trial);
        let f_contract = f.eval(&trial);
        if f_contract <= bound {
            simplex[n] = (trial.clone(), f_contract);
            continue;
        }
        let anchor = simplex[0].0.clone();
        for vertex in simplex.iter_mut().skip(1) {
            for (x, a) in vertex.0.iter_mut().zip(&anchor) {
                *x = a + SHRINK * (*x - a);
            }
            vertex.1 = f.eval(&vertex.0);
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, v) = simplex.swap_remove(0);
    (x, v, iterations, converged)
}
