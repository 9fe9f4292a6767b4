//! Importance-coefficient learning.
//!
//! With network weights held fixed, each auxiliary task's coefficient
//! is chosen to minimize
//!
//!   J(lambda) = sum_n w_n sum_t lambda_t NLL_{n,t}
//!             + sum_{t != main} (1/sigma^2) (lambda_t - 1)^2
//!
//! where NLL_{n,t} is sample n's negative log-likelihood on task t under
//! the frozen network, and w_n are per-sample importance weights from the
//! generative model. The likelihood term is linear in lambda, so the
//! Gaussian prior at 1 and a hard floor are what keep coefficients from
//! collapsing a task outright. The main task is not a free coordinate;
//! its coefficient stays at 1 through every update.

use crate::error::Error;
use crate::taskcodec::{Coeffs, LAMBDA_FLOOR, MAIN_TASK, NUM_TASKS};
use crate::Result;

#[derive(Debug, Clone)]
pub struct CoeffObjectiveCtx {
    /// Row-major [n_samples, NUM_TASKS] snapshot of per-task NLLs.
    nll: Vec<f64>,
    weights: Vec<f64>,
    pub sigma: f64,
    /// Treat the generative evidence as a literal additive constant
    /// instead of per-sample likelihood weights.
    constant_evidence: bool,
    n_samples: usize,
}

impl CoeffObjectiveCtx {
    pub fn new(nll: Vec<f64>, weights: Vec<f64>, sigma: f64) -> Result<CoeffObjectiveCtx> {
        let n_samples = weights.len();
        if nll.len() != n_samples * NUM_TASKS {
            return Err(Error::Dimension(format!(
                "nll matrix has {} entries, want {} samples x {} tasks",
                nll.len(),
                n_samples,
                NUM_TASKS
            )));
        }
        if !(sigma > 0.0) {
            return Err(Error::Config(format!(
                "sigma must be positive, got {sigma}"
            )));
        }
        if nll.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NonFinite("per-task NLL snapshot".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return Err(Error::NonFinite("sample importance weights".into()));
        }
        Ok(CoeffObjectiveCtx {
            nll,
            weights,
            sigma,
            constant_evidence: false,
            n_samples,
        })
    }

    /// Switch to the constant-evidence reading: the likelihood term is
    /// unweighted and the summed log-evidence enters as an additive
    /// constant (which cannot move the minimizer).
    pub fn with_constant_evidence(mut self) -> CoeffObjectiveCtx {
        self.constant_evidence = true;
        self
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    fn effective_weight(&self, n: usize) -> f64 {
        if self.constant_evidence {
            1.0
        } else {
            self.weights[n]
        }
    }

    /// Aggregate weighted NLL for one task: the coefficient of lambda_t
    /// in the likelihood term.
    pub fn task_load(&self, task: usize) -> f64 {
        (0..self.n_samples)
            .map(|n| self.effective_weight(n) * self.nll[n * NUM_TASKS + task])
            .sum()
    }

    fn evidence_constant(&self) -> f64 {
        if self.constant_evidence {
            self.weights.iter().map(|w| w.ln()).sum()
        } else {
            0.0
        }
    }

    fn sanitized(&self, lambda: &[f64]) -> [f64; NUM_TASKS] {
        let mut lam = [1.0; NUM_TASKS];
        let mut clamped = false;
        for t in 0..NUM_TASKS {
            lam[t] = if t == MAIN_TASK {
                1.0
            } else if lambda[t] < LAMBDA_FLOOR {
                clamped = true;
                LAMBDA_FLOOR
            } else {
                lambda[t]
            };
        }
        if clamped {
            eprintln!("warning: coefficient below floor {LAMBDA_FLOOR}, clamped");
        }
        lam
    }

    /// Objective value at a raw coefficient vector. Values below the
    /// floor are clamped (with a warning) and the main entry is read
    /// as 1 regardless of what was passed.
    pub fn objective_raw(&self, lambda: &[f64]) -> f64 {
        let lam = self.sanitized(lambda);
        let mut j = self.evidence_constant();
        for t in 0..NUM_TASKS {
            j += lam[t] * self.task_load(t);
        }
        let inv_s2 = 1.0 / (self.sigma * self.sigma);
        for (t, l) in lam.iter().enumerate() {
            if t != MAIN_TASK {
                j += inv_s2 * (l - 1.0) * (l - 1.0);
            }
        }
        j
    }

    pub fn objective(&self, lambda: &Coeffs) -> f64 {
        self.objective_raw(lambda.lambda())
    }

    /// Analytic gradient: g_t = task_load(t) + 2(lambda_t - 1)/sigma^2,
    /// with the main coordinate pinned to zero.
    pub fn gradient_raw(&self, lambda: &[f64]) -> Vec<f64> {
        let inv_s2 = 1.0 / (self.sigma * self.sigma);
        (0..NUM_TASKS)
            .map(|t| {
                if t == MAIN_TASK {
                    0.0
                } else {
                    self.task_load(t) + 2.0 * (lambda[t] - 1.0) * inv_s2
                }
            })
            .collect()
    }

    pub fn gradient(&self, lambda: &Coeffs) -> Vec<f64> {
        self.gradient_raw(lambda.lambda())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsConfig {
    /// Curvature pairs kept.
    pub memory: usize,
    pub max_iters: usize,
    /// Convergence on the projected gradient step, infinity norm.
    pub grad_tol: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo_c1: f64,
    /// Step contraction per backtrack.
    pub contraction: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            memory: 10,
            max_iters: 200,
            grad_tol: 1e-9,
            armijo_c1: 1e-4,
            contraction: 0.5,
            max_backtracks: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LbfgsStatus {
    Converged,
    IterationCap,
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub status: LbfgsStatus,
    pub iterations: usize,
}

/// Limited-memory BFGS with backtracking Armijo line search over the box
/// x_i >= floor. Coordinates listed in `frozen` never move; pass
/// f64::NEG_INFINITY as the floor for an unconstrained problem.
/// Convergence is judged on the projected gradient step, so a minimizer
/// pinned to the floor still registers as converged.
pub fn lbfgs_minimize<F, G>(
    mut f: F,
    mut g: G,
    x0: &[f64],
    cfg: &LbfgsConfig,
    frozen: &[usize],
    floor: f64,
) -> LbfgsOutcome
where
    F: FnMut(&[f64]) -> f64,
    G: FnMut(&[f64]) -> Vec<f64>,
{
    let dim = x0.len();
    let is_frozen = |i: usize| frozen.contains(&i);
    let project = |x: &mut [f64]| {
        for (i, v) in x.iter_mut().enumerate() {
            if is_frozen(i) {
                *v = x0[i];
            } else if *v < floor {
                *v = floor;
            }
        }
    };
    let mask = |grad: &mut [f64]| {
        for &i in frozen {
            grad[i] = 0.0;
        }
    };

    let mut x = x0.to_vec();
    project(&mut x);
    let mut fx = f(&x);
    let mut gx = g(&x);
    mask(&mut gx);

    let mut best_x = x.clone();
    let mut best_f = fx;
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();

    let projected_step_norm = |x: &[f64], gx: &[f64]| -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..dim {
            if is_frozen(i) {
                continue;
            }
            let stepped = (x[i] - gx[i]).max(floor);
            m = m.max((stepped - x[i]).abs());
        }
        m
    };

    for iter in 0..cfg.max_iters {
        if projected_step_norm(&x, &gx) <= cfg.grad_tol {
            return LbfgsOutcome {
                x,
                value: fx,
                status: LbfgsStatus::Converged,
                iterations: iter,
            };
        }

        // Two-loop recursion for d = -H g.
        let mut d: Vec<f64> = gx.iter().map(|v| -v).collect();
        let pairs = s_hist.len();
        let mut alpha = vec![0.0; pairs];
        for k in (0..pairs).rev() {
            let sy: f64 = s_hist[k].iter().zip(&y_hist[k]).map(|(a, b)| a * b).sum();
            let a = s_hist[k].iter().zip(&d).map(|(a, b)| a * b).sum::<f64>() / sy;
            alpha[k] = a;
            for (dv, yv) in d.iter_mut().zip(&y_hist[k]) {
                *dv -= a * yv;
            }
        }
        if let (Some(s), Some(y)) = (s_hist.last(), y_hist.last()) {
            let sy: f64 = s.iter().zip(y).map(|(a, b)| a * b).sum();
            let yy: f64 = y.iter().map(|v| v * v).sum();
            let gamma = sy / yy;
            for dv in d.iter_mut() {
                *dv *= gamma;
            }
        }
        for k in 0..pairs {
            let sy: f64 = s_hist[k].iter().zip(&y_hist[k]).map(|(a, b)| a * b).sum();
            let beta = y_hist[k].iter().zip(&d).map(|(a, b)| a * b).sum::<f64>() / sy;
            for (dv, sv) in d.iter_mut().zip(&s_hist[k]) {
                *dv += (alpha[k] - beta) * sv;
            }
        }
        for (i, dv) in d.iter_mut().enumerate() {
            if is_frozen(i) {
                *dv = 0.0;
            }
        }
        if d.iter().zip(&gx).map(|(a, b)| a * b).sum::<f64>() >= 0.0 {
            // Not a descent direction; fall back to steepest descent.
            s_hist.clear();
            y_hist.clear();
            d = gx.iter().map(|v| -v).collect();
        }

        // Backtracking Armijo search on the projected candidate.
        let mut step = 1.0;
        let mut accepted: Option<(Vec<f64>, f64)> = None;
        for _ in 0..cfg.max_backtracks {
            let mut cand: Vec<f64> = x.iter().zip(&d).map(|(xv, dv)| xv + step * dv).collect();
            project(&mut cand);
            let moved: f64 = cand
                .iter()
                .zip(&x)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if moved > 0.0 {
                let dir_term: f64 = gx
                    .iter()
                    .zip(cand.iter().zip(&x))
                    .map(|(gv, (c, xv))| gv * (c - xv))
                    .sum();
                let fc = f(&cand);
                if dir_term < 0.0 && fc <= fx + cfg.armijo_c1 * dir_term {
                    accepted = Some((cand, fc));
                    break;
                }
            }
            step *= cfg.contraction;
        }
        let Some((x_new, f_new)) = accepted else {
            return LbfgsOutcome {
                x: best_x,
                value: best_f,
                status: LbfgsStatus::LineSearchFailed,
                iterations: iter,
            };
        };

        let mut g_new = g(&x_new);
        mask(&mut g_new);
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = g_new.iter().zip(&gx).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&yv).map(|(a, b)| a * b).sum();
        let s_norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        let y_norm = yv.iter().map(|v| v * v).sum::<f64>().sqrt();
        if sy > 1e-12 * s_norm * y_norm {
            s_hist.push(s);
            y_hist.push(yv);
            if s_hist.len() > cfg.memory {
                s_hist.remove(0);
                y_hist.remove(0);
            }
        } else {
            // Armijo alone does not guarantee the curvature condition;
            // a failed pair means the stored history no longer reflects
            // the local Hessian, so drop it and restart from steepest
            // descent rather than crawl on stale directions.
            s_hist.clear();
            y_hist.clear();
        }
        x = x_new;
        fx = f_new;
        gx = g_new;
        if fx < best_f {
            best_f = fx;
            best_x = x.clone();
        }
    }
    LbfgsOutcome {
        x: best_x,
        value: best_f,
        status: LbfgsStatus::IterationCap,
        iterations: cfg.max_iters,
    }
}

/// Minimize the coefficient objective from `init`, freezing the main
/// coordinate and projecting the rest onto the floor.
pub fn optimize_coeffs(
    ctx: &CoeffObjectiveCtx,
    init: &Coeffs,
    cfg: &LbfgsConfig,
) -> Result<(Coeffs, LbfgsOutcome)> {
    let outcome = lbfgs_minimize(
        |x| ctx.objective_raw(x),
        |x| ctx.gradient_raw(x),
        init.lambda(),
        cfg,
        &[MAIN_TASK],
        LAMBDA_FLOOR,
    );
    let coeffs = Coeffs::from_values(&outcome.x, ctx.sigma)?;
    Ok((coeffs, outcome))
}
