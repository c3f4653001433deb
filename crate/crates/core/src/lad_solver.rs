//! ℓ2-penalized least-deviations regression solved in the dual.
//!
//! For one target column with centered (and scaled) design `X_c` and centered
//! targets `ỹ`, the primal
//!
//! ```text
//! min_β  ‖ỹ − X_c β‖₁ + λ‖β‖²
//! ```
//!
//! has the box-constrained concave dual
//!
//! ```text
//! max_ν  g(ν) = νᵀỹ − ‖X_cᵀν‖² / 4λ    s.t. ‖ν‖_∞ ≤ 1
//! ```
//!
//! with `β = X_cᵀν / 2λ`. Columns decouple, so each is solved independently
//! by a projected limited-memory quasi-Newton method. `X_cᵀν` is computed as
//! `X̃ᵀν − x̄ ⊙ Σᵢνᵢ` so the sparse design is never densified.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::par;
use crate::targets::TargetMatrix;
use crate::text_features::FeatureMatrix;

/// Linear operator for a centered design matrix.
pub trait Design: Sync {
    fn n(&self) -> usize;
    fn d(&self) -> usize;
    /// `out = X_cᵀ u`.
    fn t_mul(&self, u: &[f64], out: &mut [f64]);
    /// `out = X_c v`.
    fn mul(&self, v: &[f64], out: &mut [f64]);
    /// Row-major dense copy of `X_c`, when one is kept.
    fn dense_rows(&self) -> Option<&[f64]> {
        None
    }
}

/// Above this many features the Newton solver's d×d systems get expensive and
/// the sparse design is not densified.
pub const NEWTON_MAX_D: usize = 256;

/// Standardized centered view of a sparse [`FeatureMatrix`].
pub struct SparseDesign<'a> {
    features: &'a FeatureMatrix,
    scaled_mean: Vec<f64>,
    dense: Option<Vec<f64>>,
}

impl<'a> SparseDesign<'a> {
    pub fn new(features: &'a FeatureMatrix) -> Self {
        let dense = (features.d() <= NEWTON_MAX_D).then(|| features.dense_centered());
        SparseDesign {
            scaled_mean: features.scaled_mean(),
            features,
            dense,
        }
    }
}

impl Design for SparseDesign<'_> {
    fn n(&self) -> usize {
        self.features.n()
    }
    fn d(&self) -> usize {
        self.features.d()
    }
    fn t_mul(&self, u: &[f64], out: &mut [f64]) {
        self.features.centered_t_mul_into(u, &self.scaled_mean, out)
    }
    fn mul(&self, v: &[f64], out: &mut [f64]) {
        self.features.centered_mul_into(v, out)
    }
    fn dense_rows(&self) -> Option<&[f64]> {
        self.dense.as_deref()
    }
}

/// Dense row-major design, used as given (no further centering).
pub struct DenseDesign {
    pub n: usize,
    pub d: usize,
    pub values: Vec<f64>,
}

impl Design for DenseDesign {
    fn n(&self) -> usize {
        self.n
    }
    fn d(&self) -> usize {
        self.d
    }
    fn t_mul(&self, u: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (row, &ui) in self.values.chunks_exact(self.d).zip(u) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x * ui;
            }
        }
    }
    fn mul(&self, v: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(self.values.chunks_exact(self.d)) {
            *o = row.iter().zip(v).map(|(a, b)| a * b).sum();
        }
    }
    fn dense_rows(&self) -> Option<&[f64]> {
        Some(&self.values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LadAlgorithm {
    /// Newton when the design has a dense copy, otherwise L-BFGS.
    #[default]
    Auto,
    /// Proximal-point semismooth Newton on the dual, exact low-rank Hessian.
    Newton,
    /// Projected limited-memory BFGS.
    Lbfgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LadConfig {
    /// Stop when ‖projected gradient‖₂ ≤ tol · (1 + |g|) ...
    pub tol: f64,
    /// ... and the duality gap is ≤ gap_tol · (1 + |primal|).
    pub gap_tol: f64,
    pub max_iter: usize,
    /// Number of stored correction pairs.
    pub memory: usize,
    /// Keep the per-iteration dual objective of each column.
    pub record_trace: bool,
    pub algorithm: LadAlgorithm,
}

impl Default for LadConfig {
    fn default() -> Self {
        LadConfig {
            tol: 1e-6,
            gap_tol: 1e-6,
            max_iter: 2000,
            memory: 10,
            record_trace: false,
            algorithm: LadAlgorithm::Auto,
        }
    }
}

/// Result of one column's dual solve.
#[derive(Debug, Clone)]
pub struct ColumnSolution {
    pub nu: Vec<f64>,
    /// `β = X_cᵀν / 2λ` in the design's basis.
    pub beta: Vec<f64>,
    pub dual: f64,
    pub primal: f64,
    pub pg_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<f64>,
    curvature: Curvature,
}

/// Solver state worth carrying along a λ path. For L-BFGS these are the
/// `(s, y)` correction pairs and the λ they were collected at: the dual
/// Hessian is `X_c X_cᵀ / 2λ`, so pairs carry over to a new λ' exactly after
/// scaling `y` by `λ / λ'`. For Newton it is the final proximal step `σ`.
#[derive(Debug, Clone, Default)]
pub(crate) struct Curvature {
    lambda: f64,
    s: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    sigma: Option<f64>,
}

impl ColumnSolution {
    pub fn gap(&self) -> f64 {
        self.primal - self.dual
    }
}

/// Dual variables for all columns (column-major: `nu[k][i]`).
#[derive(Debug, Clone)]
pub struct DualState {
    pub nu: Vec<Vec<f64>>,
    pub lambda: f64,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub(crate) curvature: Vec<Curvature>,
}

#[derive(Debug, Clone)]
pub struct SolverReport {
    pub converged: bool,
    pub duality_gap: f64,
    pub primal: f64,
    pub dual: f64,
    pub iterations: usize,
    pub wall_time: Duration,
    pub lambda_path: Vec<f64>,
}

/// A fitted least-deviations model.
#[derive(Debug, Clone)]
pub struct LadFit {
    pub lambda: f64,
    /// d×m row-major coefficients on the standardized centered design.
    pub coef_standardized: Vec<f64>,
    /// d×m row-major coefficients on raw term frequencies.
    pub coef: Vec<f64>,
    pub intercept: Vec<f64>,
    pub state: DualState,
    pub report: SolverReport,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Objective `g` and gradient of the dual for one column.
pub fn column_dual_objective_grad(design: &dyn Design, y: &[f64], nu: &[f64], lambda: f64) -> (f64, Vec<f64>) {
    let mut u = vec![0.0; design.d()];
    design.t_mul(nu, &mut u);
    let mut xu = vec![0.0; design.n()];
    design.mul(&u, &mut xu);
    let g = dot(nu, y) - dot(&u, &u) / (4.0 * lambda);
    let grad = y.iter().zip(&xu).map(|(yi, xi)| yi - xi / (2.0 * lambda)).collect();
    (g, grad)
}

/// `g(ν) = Tr(νᵀỸ) − ‖K‖² / 4λ` with `K = X̃ᵀν − x̄ ⊙ Σᵢνᵢ`, and its gradient
/// `Ỹ − X_c K / 2λ`. `nu` and the result are column-major (`[k][i]`).
pub fn dual_objective_grad(
    nu: &[Vec<f64>],
    features: &FeatureMatrix,
    targets_centered: &[Vec<f64>],
    lambda: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if nu.len() != targets_centered.len() {
        return Err(Error::ShapeMismatch("ν and Ỹ have different column counts".into()));
    }
    if nu.iter().chain(targets_centered).any(|c| c.len() != features.n()) {
        return Err(Error::ShapeMismatch("column length differs from n".into()));
    }
    let design = SparseDesign::new(features);
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(nu.len());
    for (col, y) in nu.iter().zip(targets_centered) {
        let (g, grad) = column_dual_objective_grad(&design, y, col, lambda);
        total += g;
        grads.push(grad);
    }
    Ok((total, grads))
}

/// `‖ỹ − X_c β‖₁ + λ‖β‖²` for one column.
pub fn column_primal_objective(design: &dyn Design, y: &[f64], beta: &[f64], lambda: f64) -> f64 {
    let mut xb = vec![0.0; design.n()];
    design.mul(beta, &mut xb);
    let l1: f64 = y.iter().zip(&xb).map(|(a, b)| (a - b).abs()).sum();
    l1 + lambda * dot(beta, beta)
}

struct Memory {
    s: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    rho: Vec<f64>,
    cap: usize,
}

impl Memory {
    fn seeded(cap: usize, seed: Option<&Curvature>, lambda: f64) -> Self {
        let mut m = Memory { s: Vec::new(), y: Vec::new(), rho: Vec::new(), cap };
        if let Some(c) = seed {
            let f = c.lambda / lambda;
            for (s, y) in c.s.iter().zip(&c.y) {
                let y: Vec<f64> = y.iter().map(|v| v * f).collect();
                let sy = dot(s, &y);
                if sy > 0.0 {
                    m.push(s.clone(), y, sy);
                }
            }
        }
        m
    }

    fn export(&self, lambda: f64) -> Curvature {
        Curvature { lambda, s: self.s.clone(), y: self.y.clone(), sigma: None }
    }

    fn push(&mut self, s: Vec<f64>, y: Vec<f64>, sy: f64) {
        if self.s.len() == self.cap {
            self.s.remove(0);
            self.y.remove(0);
            self.rho.remove(0);
        }
        self.s.push(s);
        self.y.push(y);
        self.rho.push(1.0 / sy);
    }

    fn clear(&mut self) {
        self.s.clear();
        self.y.clear();
        self.rho.clear();
    }

    /// Two-loop recursion restricted to the free coordinates.
    fn direction(&self, grad: &[f64], free: &[bool]) -> Vec<f64> {
        let mask = |v: &mut Vec<f64>| {
            for (x, &f) in v.iter_mut().zip(free) {
                if !f {
                    *x = 0.0;
                }
            }
        };
        let mut q = grad.to_vec();
        mask(&mut q);
        let k = self.s.len();
        let mut alpha = vec![0.0; k];
        for i in (0..k).rev() {
            alpha[i] = self.rho[i] * dot(&self.s[i], &q);
            for (qj, yj) in q.iter_mut().zip(&self.y[i]) {
                *qj -= alpha[i] * yj;
            }
            mask(&mut q);
        }
        let gamma = if k > 0 {
            let yy = dot(&self.y[k - 1], &self.y[k - 1]);
            if yy > 0.0 {
                1.0 / (self.rho[k - 1] * yy)
            } else {
                1.0
            }
        } else {
            1.0
        };
        let mut r: Vec<f64> = q.iter().map(|x| gamma * x).collect();
        for i in 0..k {
            let b = self.rho[i] * dot(&self.y[i], &r);
            for (rj, sj) in r.iter_mut().zip(&self.s[i]) {
                *rj += sj * (alpha[i] - b);
            }
            mask(&mut r);
        }
        r.iter_mut().for_each(|x| *x = -*x);
        r
    }
}

/// Minimizes `f = −g` over `[−1, 1]ⁿ` for one target column.
pub fn solve_column(
    design: &dyn Design,
    y: &[f64],
    lambda: f64,
    init: Option<&[f64]>,
    cfg: &LadConfig,
) -> ColumnSolution {
    solve_column_seeded(design, y, lambda, init, None, cfg)
}

fn solve_column_seeded(
    design: &dyn Design,
    y: &[f64],
    lambda: f64,
    init: Option<&[f64]>,
    seed: Option<&Curvature>,
    cfg: &LadConfig,
) -> ColumnSolution {
    match (cfg.algorithm, design.dense_rows()) {
        (LadAlgorithm::Lbfgs, _) | (LadAlgorithm::Auto, None) => solve_lbfgs(design, y, lambda, init, seed, cfg),
        (_, Some(rows)) => solve_newton(design, rows, y, lambda, init, seed, cfg),
        (LadAlgorithm::Newton, None) => {
            let rows = dense_from(design);
            solve_newton(design, &rows, y, lambda, init, seed, cfg)
        }
    }
}

fn dense_from(design: &dyn Design) -> Vec<f64> {
    let (n, d) = (design.n(), design.d());
    let mut rows = vec![0.0; n * d];
    let mut e = vec![0.0; d];
    let mut col = vec![0.0; n];
    for t in 0..d {
        e[t] = 1.0;
        design.mul(&e, &mut col);
        e[t] = 0.0;
        for i in 0..n {
            rows[i * d + t] = col[i];
        }
    }
    rows
}

/// Proximal-point iterations on the dual, each subproblem solved over the d
/// coefficients by semismooth Newton.
///
/// Step `k` minimizes `f(ν) + ‖ν − ν_k‖² / 2σ` over the box. Writing the
/// quadratic through `β`, the inner minimizer is `ν(β) = clip(ν_k + σ r(β))`
/// with `r = ỹ − X_c β`, and `β` maximizes the concave
/// `Φ(β) = −λ‖β‖² + Σᵢ [−νᵢ rᵢ + (νᵢ − ν_k,ᵢ)² / 2σ]`, whose gradient is
/// `X_cᵀν(β) − 2λβ`. Its generalized Hessian `−(2λI + σ X_JᵀX_J)`, with `J` the
/// unclipped rows, is only d×d. `σ` grows geometrically, so the outer loop
/// converges superlinearly. Each Newton step counts as one iteration.
fn solve_newton(
    design: &dyn Design,
    rows: &[f64],
    y: &[f64],
    lambda: f64,
    init: Option<&[f64]>,
    seed: Option<&Curvature>,
    cfg: &LadConfig,
) -> ColumnSolution {
    let n = design.n();
    let d = design.d();
    let two_l = 2.0 * lambda;
    let four_l = 4.0 * lambda;
    let row = |i: usize| &rows[i * d..(i + 1) * d];

    let mut nu: Vec<f64> = match init {
        Some(v) => v.iter().map(|x| x.clamp(-1.0, 1.0)).collect(),
        None => vec![0.0; n],
    };
    let mut u = vec![0.0; d];
    let mut xu = vec![0.0; n];
    let mut grad = vec![0.0; n];
    let refresh = |nu: &[f64], u: &mut Vec<f64>, xu: &mut Vec<f64>, grad: &mut Vec<f64>| {
        design.t_mul(nu, u);
        design.mul(u, xu);
        for i in 0..n {
            grad[i] = xu[i] / two_l - y[i];
        }
        dot(u, u) / four_l - dot(nu, y)
    };
    let mut f = refresh(&nu, &mut u, &mut xu, &mut grad);
    if init.is_some() {
        // keep the warm start's sign pattern and re-interpolate its free rows
        let interior: Vec<bool> = nu.iter().map(|v| v.abs() < 1.0).collect();
        if let Some(cand) = crossover(&nu, &interior, rows, y, d, two_l) {
            let (mut u_c, mut xu_c, mut grad_c) = (vec![0.0; d], vec![0.0; n], vec![0.0; n]);
            let f_c = refresh(&cand, &mut u_c, &mut xu_c, &mut grad_c);
            if f_c <= f {
                nu = cand;
                u = u_c;
                grad = grad_c;
                f = f_c;
            }
        }
    }
    // β moves continuously along a path, so start from the previous one
    let beta_l = seed.filter(|c| c.sigma.is_some() && c.lambda > 0.0).map_or(lambda, |c| c.lambda);
    let mut beta: Vec<f64> = u.iter().map(|x| x / (2.0 * beta_l)).collect();

    let y_scale = y.iter().map(|v| v.abs()).sum::<f64>() / n.max(1) as f64;
    let y_scale = if y_scale > 0.0 { y_scale } else { 1.0 };
    let x_scale = (rows.iter().map(|x| x * x).sum::<f64>() / d.max(1) as f64).sqrt().max(f64::MIN_POSITIVE);
    let mut sigma = 1.0 / y_scale;
    if let Some(prev) = seed.and_then(|c| c.sigma) {
        sigma = sigma.max(prev * 0.01);
    }
    let sigma_max = 1e12 / y_scale;

    let mut trace = Vec::new();
    if cfg.record_trace {
        trace.push(-f);
    }
    let mut iterations = 0;
    let mut nu_star = vec![0.0; n];
    let mut free = vec![false; n];
    let mut hess = vec![0.0; d * d];
    let mut gram_j = vec![0.0; d * d];
    let mut in_gram = vec![false; n];
    let mut g_phi = vec![0.0; d];

    let mut resid = vec![0.0; n];
    let mut a_dir = vec![0.0; n];
    let mut events: Vec<(f64, f64)> = Vec::with_capacity(2 * n);

    loop {
        let (pg, gap, primal) = certificate(&nu, &grad, &u, four_l);
        let dual = -f;
        let converged = pg <= cfg.tol * (1.0 + dual.abs()) && gap <= cfg.gap_tol * (1.0 + primal.abs());
        if converged || iterations >= cfg.max_iter {
            return finish_column(nu, &u, two_l, dual, primal, pg, iterations, converged, trace, Curvature { lambda, sigma: Some(sigma), ..Default::default() });
        }

        let inner_tol = (1e-3 * gap / (1.0 + primal.abs())).clamp(1e-13, 1e-6) * x_scale;
        for i in 0..n {
            resid[i] = y[i] - dot(row(i), &beta);
        }
        let mut stalled = false;
        for _ in 0..100 {
            for (t, g) in g_phi.iter_mut().enumerate() {
                *g = -two_l * beta[t];
            }
            for i in 0..n {
                let v = nu[i] + sigma * resid[i];
                let c = v.clamp(-1.0, 1.0);
                free[i] = c == v;
                nu_star[i] = c;
                let x = row(i);
                if c != 0.0 {
                    for (g, xa) in g_phi.iter_mut().zip(x) {
                        *g += c * xa;
                    }
                }
                // X_JᵀX_J changes by a few rows per step
                if free[i] != in_gram[i] {
                    let sign = if free[i] { 1.0 } else { -1.0 };
                    in_gram[i] = free[i];
                    for a in 0..d {
                        let xa = sign * x[a];
                        for b in a..d {
                            gram_j[a * d + b] += xa * x[b];
                        }
                    }
                }
            }
            if dot(&g_phi, &g_phi).sqrt() <= inner_tol || iterations >= cfg.max_iter {
                break;
            }
            iterations += 1;
            for a in 0..d {
                for b in a..d {
                    hess[a * d + b] = sigma * gram_j[a * d + b];
                }
                hess[a * d + a] += two_l;
                for b in 0..a {
                    hess[a * d + b] = hess[b * d + a];
                }
            }
            let step = spd_solve(&hess, &g_phi, d, two_l);
            for i in 0..n {
                a_dir[i] = dot(row(i), &step);
            }
            let t = exact_step(&nu, &resid, &a_dir, sigma, two_l * dot(&step, &beta), two_l * dot(&step, &step), &mut events);
            if !(t > 0.0 && t.is_finite()) {
                stalled = true;
                break;
            }
            for (b, s) in beta.iter_mut().zip(&step) {
                *b += t * s;
            }
            for (r, a) in resid.iter_mut().zip(&a_dir) {
                *r -= t * a;
            }
        }
        for i in 0..n {
            let v = nu[i] + sigma * resid[i];
            nu_star[i] = v.clamp(-1.0, 1.0);
            free[i] = nu_star[i] == v;
        }

        let mut u_t = vec![0.0; d];
        let mut xu_t = vec![0.0; n];
        let mut grad_t = vec![0.0; n];
        let f_t = refresh(&nu_star, &mut u_t, &mut xu_t, &mut grad_t);
        let improved = f_t <= f;
        if improved {
            nu.copy_from_slice(&nu_star);
            std::mem::swap(&mut u, &mut u_t);
            std::mem::swap(&mut grad, &mut grad_t);
            f = f_t;
        }
        if let Some(cand) = crossover(&nu_star, &free, rows, y, d, two_l) {
            let f_c = refresh(&cand, &mut u_t, &mut xu_t, &mut grad_t);
            if f_c <= f {
                nu = cand;
                std::mem::swap(&mut u, &mut u_t);
                std::mem::swap(&mut grad, &mut grad_t);
                f = f_c;
            }
        }
        if !improved && (stalled || sigma >= sigma_max) {
            return finish_column(nu, &u, two_l, -f, primal, pg, iterations, false, trace, Curvature { lambda, sigma: Some(sigma), ..Default::default() });
        }
        if cfg.record_trace {
            trace.push(-f);
        }
        sigma = (sigma * 10.0).min(sigma_max);
    }
}

/// Exact maximizer along `β + tΔ` of the concave subproblem objective. Its
/// derivative `Σᵢ aᵢ clip(vᵢ − σ aᵢ t) − 2λ(Δᵀβ + t‖Δ‖²)` is piecewise linear
/// and decreasing, so one sweep over the clip breakpoints finds the root.
/// `two_l_db = 2λΔᵀβ` and `two_l_dd = 2λ‖Δ‖²`.
fn exact_step(
    nu: &[f64],
    resid: &[f64],
    a: &[f64],
    sigma: f64,
    two_l_db: f64,
    two_l_dd: f64,
    events: &mut Vec<(f64, f64)>,
) -> f64 {
    events.clear();
    let mut val = -two_l_db;
    let mut slope = -two_l_dd;
    for i in 0..nu.len() {
        let v = nu[i] + sigma * resid[i];
        let ai = a[i];
        val += ai * v.clamp(-1.0, 1.0);
        if ai == 0.0 {
            continue;
        }
        let w = sigma * ai * ai;
        let rate = sigma * ai;
        if v.abs() < 1.0 {
            slope -= w;
            let bound = if ai > 0.0 { -1.0 } else { 1.0 };
            events.push(((v - bound) / rate, w));
        } else if (v >= 1.0 && ai > 0.0) || (v <= -1.0 && ai < 0.0) {
            let (enter, exit) = if ai > 0.0 { (v - 1.0, v + 1.0) } else { (v + 1.0, v - 1.0) };
            events.push((enter / rate, -w));
            events.push((exit / rate, w));
        }
    }
    if !(val > 0.0) {
        return 0.0;
    }
    events.sort_unstable_by(|x, y| x.0.total_cmp(&y.0));
    let mut t = 0.0;
    for &(te, dw) in events.iter() {
        let te = te.max(t);
        let at = val + slope * (te - t);
        if at <= 0.0 {
            return t - val / slope;
        }
        val = at;
        t = te;
        slope += dw;
    }
    t - val / slope
}

/// Dual point that fixes the signs of the clipped rows and interpolates the
/// rest exactly: with `Z` the unclipped rows and `s` the signs elsewhere,
/// `X_Z X_Zᵀ ν_Z = 2λ ỹ_Z − X_Z X_{Z'}ᵀ s`. `None` when `Z` is larger than the
/// design rank can interpolate or the result leaves the box.
fn crossover(nu: &[f64], free: &[bool], rows: &[f64], y: &[f64], d: usize, two_l: f64) -> Option<Vec<f64>> {
    let z: Vec<usize> = (0..nu.len()).filter(|&i| free[i]).collect();
    if z.is_empty() || z.len() > d {
        return None;
    }
    let row = |i: usize| &rows[i * d..(i + 1) * d];
    let mut w = vec![0.0; d];
    for (i, &v) in nu.iter().enumerate() {
        if !free[i] {
            for (a, x) in w.iter_mut().zip(row(i)) {
                *a += v * x;
            }
        }
    }
    let k = z.len();
    let mut gram = nalgebra::DMatrix::zeros(k, k);
    let mut rhs = nalgebra::DVector::zeros(k);
    for (a, &i) in z.iter().enumerate() {
        rhs[a] = two_l * y[i] - dot(row(i), &w);
        for (b, &j) in z.iter().enumerate().skip(a) {
            let g = dot(row(i), row(j));
            gram[(a, b)] = g;
            gram[(b, a)] = g;
        }
    }
    let sol = gram.cholesky()?.solve(&rhs);
    let mut out = nu.to_vec();
    for (a, &i) in z.iter().enumerate() {
        let v = sol[a];
        if !v.is_finite() || v.abs() > 1.0 + 1e-12 {
            return None;
        }
        out[i] = v.clamp(-1.0, 1.0);
    }
    Some(out)
}

/// Solves `A z = b` for symmetric positive definite `A`, raising the diagonal
/// shift if the factorization breaks down.
fn spd_solve(a: &[f64], b: &[f64], d: usize, shift: f64) -> Vec<f64> {
    let mut extra = 0.0;
    loop {
        let mut m = nalgebra::DMatrix::from_row_slice(d, d, a);
        for k in 0..d {
            m[(k, k)] += extra;
        }
        if let Some(ch) = m.cholesky() {
            let z = ch.solve(&nalgebra::DVector::from_column_slice(b));
            return z.iter().copied().collect();
        }
        extra = if extra == 0.0 { shift.max(1e-300) * 10.0 } else { extra * 10.0 };
    }
}

#[allow(clippy::too_many_arguments)]
fn finish_column(
    nu: Vec<f64>,
    u: &[f64],
    two_l: f64,
    dual: f64,
    primal: f64,
    pg_norm: f64,
    iterations: usize,
    converged: bool,
    trace: Vec<f64>,
    curvature: Curvature,
) -> ColumnSolution {
    ColumnSolution {
        nu,
        beta: u.iter().map(|x| x / two_l).collect(),
        dual,
        primal,
        pg_norm,
        iterations,
        converged,
        trace,
        curvature,
    }
}

fn solve_lbfgs(
    design: &dyn Design,
    y: &[f64],
    lambda: f64,
    init: Option<&[f64]>,
    seed: Option<&Curvature>,
    cfg: &LadConfig,
) -> ColumnSolution {
    let n = design.n();
    let d = design.d();
    let two_l = 2.0 * lambda;
    let four_l = 4.0 * lambda;

    let mut nu: Vec<f64> = match init {
        Some(v) => v.iter().map(|x| x.clamp(-1.0, 1.0)).collect(),
        None => vec![0.0; n],
    };
    let mut u = vec![0.0; d];
    design.t_mul(&nu, &mut u);
    let mut xu = vec![0.0; n];
    design.mul(&u, &mut xu);
    // gradient of f = −g
    let mut grad: Vec<f64> = y.iter().zip(&xu).map(|(yi, xi)| xi / two_l - yi).collect();
    let mut f = dot(&u, &u) / four_l - dot(&nu, y);

    let mut mem = Memory::seeded(cfg.memory.max(1), seed, lambda);
    let mut trace = Vec::new();
    if cfg.record_trace {
        trace.push(-f);
    }

    let mut w = vec![0.0; d];
    let mut trial = vec![0.0; n];
    let mut u_trial = vec![0.0; d];
    let mut iterations = 0;
    let mut converged = false;
    let mut free = vec![true; n];

    loop {
        let (pg, gap, primal) = certificate(&nu, &grad, &u, four_l);
        let dual = -f;
        if pg <= cfg.tol * (1.0 + dual.abs()) && gap <= cfg.gap_tol * (1.0 + primal.abs()) {
            converged = true;
        }
        if converged || iterations >= cfg.max_iter {
            let beta = u.iter().map(|x| x / two_l).collect();
            return ColumnSolution {
                nu,
                beta,
                dual,
                primal,
                pg_norm: pg,
                iterations,
                converged,
                trace,
                curvature: mem.export(lambda),
            };
        }
        iterations += 1;

        for i in 0..n {
            free[i] = !((nu[i] <= -1.0 && grad[i] > 0.0) || (nu[i] >= 1.0 && grad[i] < 0.0));
        }
        let mut dir = mem.direction(&grad, &free);
        let mut slope = dot(&grad, &dir);
        if !(slope < 0.0) {
            mem.clear();
            dir = mem.direction(&grad, &free);
            slope = dot(&grad, &dir);
            if !(slope < 0.0) {
                // projected gradient vanished numerically
                converged = true;
                continue;
            }
        }

        // exact minimizer along the unprojected ray
        design.t_mul(&dir, &mut w);
        let curv = dot(&w, &w) / two_l;
        let mut alpha = if curv > 0.0 { -slope / curv } else { f64::INFINITY };
        if !alpha.is_finite() || alpha <= 0.0 {
            // flat direction: go to the farthest bound along it
            alpha = dir
                .iter()
                .zip(&nu)
                .filter(|(di, _)| **di != 0.0)
                .map(|(di, x)| if *di > 0.0 { (1.0 - x) / di } else { (-1.0 - x) / di })
                .fold(0.0f64, f64::max);
            if !(alpha > 0.0) {
                alpha = 1.0;
            }
        }

        let mut accepted = false;
        for _ in 0..40 {
            for i in 0..n {
                trial[i] = (nu[i] + alpha * dir[i]).clamp(-1.0, 1.0);
            }
            design.t_mul(&trial, &mut u_trial);
            let f_trial = dot(&u_trial, &u_trial) / four_l - dot(&trial, y);
            let decrease: f64 = grad
                .iter()
                .zip(trial.iter().zip(&nu))
                .map(|(g, (t, x))| g * (t - x))
                .sum();
            if f_trial <= f + 1e-4 * decrease && f_trial <= f {
                let s: Vec<f64> = trial.iter().zip(&nu).map(|(t, x)| t - x).collect();
                design.mul(&u_trial, &mut xu);
                let new_grad: Vec<f64> = y.iter().zip(&xu).map(|(yi, xi)| xi / two_l - yi).collect();
                let yv: Vec<f64> = new_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &yv);
                if sy > 1e-12 * dot(&yv, &yv).max(f64::MIN_POSITIVE) && sy > 0.0 {
                    mem.push(s, yv, sy);
                }
                std::mem::swap(&mut nu, &mut trial);
                std::mem::swap(&mut u, &mut u_trial);
                grad = new_grad;
                f = f_trial;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if cfg.record_trace {
            trace.push(-f);
        }
        if !accepted {
            if mem.s.is_empty() {
                // no descent possible from a steepest-descent step
                let beta = u.iter().map(|x| x / two_l).collect();
                let (pg, _, primal) = certificate(&nu, &grad, &u, four_l);
                return ColumnSolution {
                    nu,
                    beta,
                    dual: -f,
                    primal,
                    pg_norm: pg,
                    iterations,
                    converged: false,
                    trace,
                    curvature: mem.export(lambda),
                };
            }
            mem.clear();
        }
    }
}

/// Projected-gradient norm, duality gap, and primal value at `ν`.
///
/// With `r = ỹ − X_c β = −∇f`, the gap is `Σᵢ (|rᵢ| − νᵢ rᵢ)` and the primal
/// is `Σᵢ|rᵢ| + ‖u‖²/4λ`.
fn certificate(nu: &[f64], grad: &[f64], u: &[f64], four_l: f64) -> (f64, f64, f64) {
    let mut pg2 = 0.0;
    let mut gap = 0.0;
    let mut l1 = 0.0;
    for (&x, &g) in nu.iter().zip(grad) {
        let p = if x <= -1.0 {
            g.min(0.0)
        } else if x >= 1.0 {
            g.max(0.0)
        } else {
            g
        };
        pg2 += p * p;
        let r = -g;
        l1 += r.abs();
        gap += r.abs() - x * r;
    }
    (pg2.sqrt(), gap, l1 + dot(u, u) / four_l)
}

fn validate_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(invalid("lambda", format!("must be positive, got {lambda}")));
    }
    Ok(())
}

fn check_shapes(features: &FeatureMatrix, targets: &TargetMatrix) -> Result<()> {
    if features.n() != targets.n() {
        return Err(Error::ShapeMismatch(format!(
            "{} feature rows but {} target rows",
            features.n(),
            targets.n()
        )));
    }
    if features.n() < 2 {
        return Err(invalid("n", "at least two training documents are required"));
    }
    Ok(())
}

/// Fit all target columns at one λ, optionally warm-started from `init_nu`.
pub fn fit_lad(
    features: &FeatureMatrix,
    targets: &TargetMatrix,
    lambda: f64,
    init_nu: Option<&DualState>,
    cfg: &LadConfig,
) -> Result<LadFit> {
    validate_lambda(lambda)?;
    check_shapes(features, targets)?;
    if let Some(s) = init_nu {
        if s.nu.len() != targets.m() || s.nu.iter().any(|c| c.len() != features.n()) {
            return Err(Error::ShapeMismatch("warm start has the wrong shape".into()));
        }
    }
    let start = Instant::now();
    let design = SparseDesign::new(features);
    let columns = par::map_range(targets.m(), |k| {
        let y = targets.centered_column(k);
        let init = init_nu.map(|s| s.nu[k].as_slice());
        let seed = init_nu.and_then(|s| s.curvature.get(k));
        solve_column_seeded(&design, &y, lambda, init, seed, cfg)
    });
    Ok(assemble(features, targets, lambda, columns, start.elapsed()))
}

fn assemble(
    features: &FeatureMatrix,
    targets: &TargetMatrix,
    lambda: f64,
    columns: Vec<ColumnSolution>,
    wall_time: Duration,
) -> LadFit {
    let d = features.d();
    let m = targets.m();
    let mut coef_standardized = vec![0.0; d * m];
    let mut coef = vec![0.0; d * m];
    let scale = features.scale();
    let zero = features.zero_variance();
    for (k, col) in columns.iter().enumerate() {
        for t in 0..d {
            coef_standardized[t * m + k] = col.beta[t];
            coef[t * m + k] = if zero[t] { 0.0 } else { col.beta[t] / scale[t] };
        }
    }
    let mean = features.mean();
    let intercept = (0..m)
        .map(|k| targets.means()[k] - (0..d).map(|t| mean[t] * coef[t * m + k]).sum::<f64>())
        .collect();
    let primal: f64 = columns.iter().map(|c| c.primal).sum();
    let dual: f64 = columns.iter().map(|c| c.dual).sum();
    let iterations = columns.iter().map(|c| c.iterations).sum();
    let grad_norm = columns.iter().map(|c| c.pg_norm * c.pg_norm).sum::<f64>().sqrt();
    let converged = columns.iter().all(|c| c.converged);
    let curvature = columns.iter().map(|c| c.curvature.clone()).collect();
    LadFit {
        lambda,
        coef_standardized,
        coef,
        intercept,
        state: DualState {
            nu: columns.into_iter().map(|c| c.nu).collect(),
            lambda,
            objective: dual,
            grad_norm,
            iterations,
            curvature,
        },
        report: SolverReport {
            converged,
            duality_gap: primal - dual,
            primal,
            dual,
            iterations,
            wall_time,
            lambda_path: vec![lambda],
        },
    }
}

/// Fits along a strictly decreasing λ sequence, warm-starting each fit from
/// the previous dual solution.
pub fn fit_path(
    features: &FeatureMatrix,
    targets: &TargetMatrix,
    lambdas: &[f64],
    cfg: &LadConfig,
) -> Result<Vec<LadFit>> {
    validate_path(lambdas)?;
    let mut out: Vec<LadFit> = Vec::with_capacity(lambdas.len());
    for &lam in lambdas {
        let fit = fit_lad(features, targets, lam, out.last().map(|f| &f.state), cfg)?;
        out.push(fit);
    }
    for f in &mut out {
        f.report.lambda_path = lambdas.to_vec();
    }
    Ok(out)
}

pub(crate) fn validate_path(lambdas: &[f64]) -> Result<()> {
    if lambdas.is_empty() {
        return Err(Error::Empty("λ path is empty".into()));
    }
    for &l in lambdas {
        validate_lambda(l)?;
    }
    if lambdas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(invalid("lambda_path", "values must be strictly decreasing"));
    }
    Ok(())
}

/// `count` values log-spaced from 10² to 10⁻⁶ times `base`. The low end
/// matters when documents far outnumber terms and almost no shrinkage is best.
pub fn log_grid(base: f64, count: usize) -> Vec<f64> {
    let base = if base > 0.0 && base.is_finite() { base } else { 1.0 };
    if count == 1 {
        return vec![base];
    }
    (0..count)
        .map(|j| base * 10f64.powf(2.0 - 8.0 * j as f64 / (count - 1) as f64))
        .collect()
}

/// Default grid: 9 values, one per decade, anchored at `‖X_c‖_F² / mean|ỹ|`.
///
/// The ℓ1 loss is linear in the target scale while the penalty is quadratic,
/// so the useful λ range moves inversely with the size of the targets.
pub fn default_lambda_grid(features: &FeatureMatrix, targets: &TargetMatrix) -> Vec<f64> {
    let g = features.centered_gram();
    let d = features.d();
    let trace = (0..d).map(|t| g[t * d + t]).sum::<f64>();
    let mut abs = 0.0;
    for k in 0..targets.m() {
        abs += targets.centered_column(k).iter().map(|v| v.abs()).sum::<f64>();
    }
    let scale = abs / (targets.n() * targets.m()) as f64;
    log_grid(if scale > 0.0 { trace / scale } else { trace }, 9)
}
