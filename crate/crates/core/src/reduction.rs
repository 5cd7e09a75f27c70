//! Finite-dimensional reduction of the stationarity problem.
//!
//! Coefficients split into a head (modes `1..=N`) and a tail (modes
//! `N+1..=M`). For `N` past the cutoff the tail equation is strongly monotone,
//! so every head `u` has a unique tail `v(u)`, and stationary paths are exactly
//! the roots of the reduced gradient `u -> head of dL(u + v(u))`.
//!
//! The solver machinery is written once against [`GalerkinSystem`] and reused
//! by the Dirichlet module.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use log::{debug, warn};
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fourier::{BoundaryProblem, SinePath};
use crate::functional::{quadrature_drift, ActionFunctional, HessianBlocks};
use crate::morse::{self, IndexMethod};

pub const DEFAULT_TAIL_TOL: f64 = 1e-11;
pub const DEFAULT_HEAD_TOL: f64 = 1e-9;
pub const DEFAULT_SEED: u64 = 0xAC21;
pub const DEFAULT_SEED_COUNT: usize = 64;
/// Largest truncation the refinement loop may reach for paths.
pub const MAX_PATH_MODES: usize = 1024;

/// Certified reduction parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ReductionPlan {
    /// Head size `N`.
    pub cutoff: usize,
    /// Monotonicity constant of the tail equation.
    pub mu: f64,
    /// `1 - mu`, the Picard rate on the tail.
    pub contraction: f64,
    /// Truncation `M`.
    pub modes: usize,
    pub tail_tol: f64,
    pub head_tol: f64,
    pub certified: bool,
    pub c_bound: f64,
}

#[derive(Clone, Debug, Default)]
pub struct PlanOverrides {
    /// Larger head; values below the certified cutoff are rejected.
    pub cutoff: Option<usize>,
    pub modes: Option<usize>,
    pub tail_tol: Option<f64>,
    pub head_tol: Option<f64>,
    /// Accept a curvature bound that is only a sampled estimate.
    pub allow_uncertified: bool,
}

/// `floor(T sqrt(C) / pi)`, bumped by one if rounding left `mu <= 0`.
pub fn cutoff_for(c_bound: f64, horizon: f64) -> usize {
    let mut n = (horizon * c_bound.sqrt() / PI).floor() as usize;
    while monotonicity_constant(c_bound, horizon, n) <= 0.0 {
        n += 1;
    }
    n
}

/// `1 - C T² / (pi² (N+1)²)`
pub fn monotonicity_constant(c_bound: f64, horizon: f64, cutoff: usize) -> f64 {
    let k = (cutoff + 1) as f64;
    1.0 - c_bound * horizon * horizon / (PI * PI * k * k)
}

/// Smallest `n >= 1` with `(c T / (2 pi n)) (1 + sqrt(2n)) < 1`, the older
/// contraction-based cutoff. Callers pass `c = max(1, C)`.
pub fn contraction_cutoff(c_tilde: f64, horizon: f64) -> usize {
    let mut n = 1usize;
    loop {
        let nf = n as f64;
        if c_tilde * horizon / (2.0 * PI * nf) * (1.0 + (2.0 * nf).sqrt()) < 1.0 {
            return n;
        }
        n += 1;
    }
}

pub fn make_plan(bp: &BoundaryProblem, overrides: &PlanOverrides) -> Result<ReductionPlan> {
    let pot = &bp.potential;
    let c = pot.c_bound();
    if !c.is_finite() {
        return Err(Error::Uncertified(format!("{}: curvature bound is infinite", pot.label())));
    }
    let certified = pot.certified();
    if !certified && !overrides.allow_uncertified {
        return Err(Error::Uncertified(format!(
            "{}: bound {c} is a {}",
            pot.label(),
            pot.c_source()
        )));
    }
    let base = cutoff_for(c, bp.horizon);
    let cutoff = match overrides.cutoff {
        Some(n) if n < base => {
            return Err(Error::InvalidParameter(format!(
                "cutoff {n} is below the certified value {base}"
            )))
        }
        Some(n) => n,
        None => base,
    };
    let modes = overrides.modes.unwrap_or((2 * cutoff + 8).max(32));
    if modes < cutoff + 1 {
        return Err(Error::InvalidParameter(format!(
            "truncation {modes} must exceed the cutoff {cutoff}"
        )));
    }
    let mu = monotonicity_constant(c, bp.horizon, cutoff);
    let tail_tol = overrides.tail_tol.unwrap_or(DEFAULT_TAIL_TOL);
    let head_tol = overrides.head_tol.unwrap_or(DEFAULT_HEAD_TOL);
    if !(tail_tol > 0.0 && head_tol > 0.0) {
        return Err(Error::InvalidParameter("tolerances must be positive".into()));
    }
    Ok(ReductionPlan {
        cutoff,
        mu,
        contraction: 1.0 - mu,
        modes,
        tail_tol,
        head_tol,
        certified,
        c_bound: c,
    })
}

/// A truncated Galerkin problem whose coefficients split into head and tail.
///
/// Coefficients are ordered by increasing stiffness, and [`refined`] must keep
/// the existing coefficients as a prefix so that a solution embeds by
/// zero-padding.
///
/// [`refined`]: GalerkinSystem::refined
pub trait GalerkinSystem: Sync + Sized {
    fn len(&self) -> usize;
    fn head_len(&self) -> usize;
    /// Eigenvalue of each coefficient's basis function.
    fn stiffness(&self) -> &[f64];
    /// Euler–Lagrange residual, L² coefficients.
    fn residual(&self, c: &[f64]) -> Vec<f64>;
    /// Hessian, L² coefficients.
    fn hessian(&self, c: &[f64]) -> DMatrix<f64>;
    fn action(&self, c: &[f64]) -> f64;
    /// Finer truncation, or `None` at the cap.
    fn refined(&self) -> Result<Option<Self>>;
    fn quadrature_drift(&self, _c: &[f64]) -> Option<f64> {
        None
    }
}

/// `sqrt(sum r_k² / lambda_k)`: the H¹₀ norm of the Riesz representative.
pub fn dual_norm(r: &[f64], stiffness: &[f64]) -> f64 {
    r.iter().zip(stiffness).map(|(r, w)| r * r / w).sum::<f64>().sqrt()
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn concat(head: &[f64], tail: &[f64]) -> Vec<f64> {
    let mut c = Vec::with_capacity(head.len() + tail.len());
    c.extend_from_slice(head);
    c.extend_from_slice(tail);
    c
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TailMethod {
    #[default]
    Newton,
    Picard,
}

impl FromStr for TailMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "newton" => Ok(TailMethod::Newton),
            "picard" => Ok(TailMethod::Picard),
            other => Err(Error::InvalidParameter(format!("unknown tail method `{other}`"))),
        }
    }
}

impl fmt::Display for TailMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TailMethod::Newton => "newton",
            TailMethod::Picard => "picard",
        })
    }
}

#[derive(Clone, Debug)]
pub struct TailOptions {
    pub method: TailMethod,
    pub tol: f64,
    pub max_newton: usize,
    pub max_picard: usize,
    pub max_halvings: usize,
}

impl Default for TailOptions {
    fn default() -> Self {
        TailOptions {
            method: TailMethod::Newton,
            tol: DEFAULT_TAIL_TOL,
            max_newton: 50,
            max_picard: 20_000,
            max_halvings: 30,
        }
    }
}

/// Tail solve outcome.
#[derive(Clone, Debug)]
pub struct TailSolution {
    pub tail: Vec<f64>,
    /// Full residual (head and tail) at `head + tail`.
    pub residual: Vec<f64>,
    /// Tail residual in the dual norm.
    pub residual_norm: f64,
    pub iterations: usize,
    /// Method that finished the solve (Picard after a Newton fallback).
    pub method: TailMethod,
    pub fell_back: bool,
    /// Residual norm before each iteration and after the last.
    pub history: Vec<f64>,
}

impl TailSolution {
    /// Ratios of consecutive residual norms. For Picard these equal the ratios
    /// of consecutive step lengths in H¹₀.
    pub fn rates(&self) -> Vec<f64> {
        self.history.windows(2).filter(|w| w[0] > 0.0).map(|w| w[1] / w[0]).collect()
    }
}

/// Solves the tail equation for a fixed head.
pub fn solve_tail_system<S: GalerkinSystem>(
    sys: &S,
    head: &[f64],
    v0: Option<&[f64]>,
    opts: &TailOptions,
) -> Result<TailSolution> {
    let h = sys.head_len();
    if head.len() != h {
        return Err(Error::DimensionMismatch {
            expected: h,
            found: head.len(),
        });
    }
    let tail_len = sys.len() - h;
    let tail = match v0 {
        Some(v) if v.len() != tail_len => {
            return Err(Error::DimensionMismatch {
                expected: tail_len,
                found: v.len(),
            })
        }
        Some(v) => v.to_vec(),
        None => vec![0.0; tail_len],
    };
    match opts.method {
        TailMethod::Newton => tail_newton(sys, head, tail, opts),
        TailMethod::Picard => tail_picard(sys, head, tail, opts, Vec::new(), 0, false),
    }
}

fn tail_newton<S: GalerkinSystem>(
    sys: &S,
    head: &[f64],
    mut tail: Vec<f64>,
    opts: &TailOptions,
) -> Result<TailSolution> {
    let h = head.len();
    let stiff = &sys.stiffness()[h..];
    let mut residual = sys.residual(&concat(head, &tail));
    let mut norm = dual_norm(&residual[h..], stiff);
    let mut history = vec![norm];
    for it in 0..opts.max_newton {
        if norm <= opts.tol {
            return Ok(TailSolution {
                tail,
                residual,
                residual_norm: norm,
                iterations: it,
                method: TailMethod::Newton,
                fell_back: false,
                history,
            });
        }
        let c = concat(head, &tail);
        let hess = sys.hessian(&c);
        let d = hess.view((h, h), (tail.len(), tail.len())).into_owned();
        let Some(chol) = Cholesky::new(d) else {
            warn!("tail Hessian block is not positive definite; falling back to Picard");
            return tail_picard(sys, head, tail, opts, history, it, true);
        };
        let rhs = DVector::from_column_slice(&residual[h..]);
        let step = chol.solve(&rhs);
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            let trial: Vec<f64> = tail.iter().zip(step.iter()).map(|(v, s)| v - alpha * s).collect();
            let r = sys.residual(&concat(head, &trial));
            let n = dual_norm(&r[h..], stiff);
            if n < norm {
                tail = trial;
                residual = r;
                norm = n;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        history.push(norm);
        if !accepted {
            debug!("tail Newton step failed to decrease the residual ({norm:.3e}); switching to Picard");
            return tail_picard(sys, head, tail, opts, history, it + 1, true);
        }
    }
    if norm <= opts.tol {
        return Ok(TailSolution {
            tail,
            residual,
            residual_norm: norm,
            iterations: opts.max_newton,
            method: TailMethod::Newton,
            fell_back: false,
            history,
        });
    }
    Err(Error::TailNotConverged {
        iterations: opts.max_newton,
        residual: norm,
    })
}

/// `v_k <- v_k - r_k / lambda_k` on tail coefficients, equivalently
/// `v_k <- [V'(gamma)]_k / lambda_k`.
fn tail_picard<S: GalerkinSystem>(
    sys: &S,
    head: &[f64],
    mut tail: Vec<f64>,
    opts: &TailOptions,
    mut history: Vec<f64>,
    done: usize,
    fell_back: bool,
) -> Result<TailSolution> {
    let h = head.len();
    let stiff = &sys.stiffness()[h..];
    let mut best = f64::INFINITY;
    for it in 0..=opts.max_picard {
        let residual = sys.residual(&concat(head, &tail));
        let norm = dual_norm(&residual[h..], stiff);
        if fell_back && it == 0 {
            // already recorded by the Newton phase
        } else {
            history.push(norm);
        }
        best = best.min(norm);
        if norm <= opts.tol {
            return Ok(TailSolution {
                tail,
                residual,
                residual_norm: norm,
                iterations: done + it,
                method: TailMethod::Picard,
                fell_back,
                history,
            });
        }
        if !norm.is_finite() {
            break;
        }
        for ((v, r), w) in tail.iter_mut().zip(&residual[h..]).zip(stiff) {
            *v -= r / w;
        }
    }
    Err(Error::TailNotConverged {
        iterations: done + opts.max_picard,
        residual: best,
    })
}

/// Head part of the residual at `u + v(u)`, with the tail solution.
pub fn reduced_gradient_system<S: GalerkinSystem>(
    sys: &S,
    head: &[f64],
    v0: Option<&[f64]>,
    opts: &TailOptions,
) -> Result<(Vec<f64>, TailSolution)> {
    let tail = solve_tail_system(sys, head, v0, opts)?;
    let g = tail.residual[..sys.head_len()].to_vec();
    Ok((g, tail))
}

/// Options for the reduced Newton iteration.
#[derive(Clone, Debug)]
pub struct ReducedOptions {
    pub head_tol: f64,
    pub tail: TailOptions,
    pub max_iterations: usize,
    pub max_halvings: usize,
    /// Extra full Newton steps after reaching `head_tol`, kept while they decrease the residual.
    pub polish_steps: usize,
    pub dedup_tol: f64,
    pub refine: bool,
    pub refine_tol: f64,
    pub max_refinements: usize,
}

impl Default for ReducedOptions {
    fn default() -> Self {
        ReducedOptions {
            head_tol: DEFAULT_HEAD_TOL,
            tail: TailOptions::default(),
            max_iterations: 60,
            max_halvings: 30,
            polish_steps: 3,
            dedup_tol: 1e-6,
            refine: true,
            refine_tol: 1e-7,
            max_refinements: 3,
        }
    }
}

impl ReducedOptions {
    pub fn from_plan(plan: &ReductionPlan) -> Self {
        let mut opts = ReducedOptions {
            head_tol: plan.head_tol,
            ..Default::default()
        };
        opts.tail.tol = plan.tail_tol;
        opts
    }
}

/// Pseudorandom multistart seeds.
#[derive(Clone, Debug)]
pub struct Multistart {
    pub count: usize,
    /// Ball radius; `None` means `2 (1 + |q_T - q_0|)`.
    pub radius: Option<f64>,
    pub seed: u64,
}

impl Default for Multistart {
    fn default() -> Self {
        Multistart {
            count: DEFAULT_SEED_COUNT,
            radius: None,
            seed: DEFAULT_SEED,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Seeds {
    Explicit(Vec<Vec<f64>>),
    Multistart(Multistart),
}

/// The origin followed by `count - 1` points uniform in the ball of `radius`.
pub fn multistart_seeds(dim: usize, count: usize, radius: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    if count == 0 {
        return out;
    }
    out.push(vec![0.0; dim]);
    if dim == 0 {
        return out;
    }
    while out.len() < count {
        // Box–Muller directions, radius r U^{1/d}
        let mut x: Vec<f64> = (0..dim)
            .map(|_| {
                let u1: f64 = 1.0 - rng.gen::<f64>();
                let u2: f64 = rng.gen();
                (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
            })
            .collect();
        let norm = l2_norm(&x);
        if norm == 0.0 {
            continue;
        }
        let r = radius * rng.gen::<f64>().powf(1.0 / dim as f64);
        x.iter_mut().for_each(|v| *v *= r / norm);
        out.push(x);
    }
    out
}

/// Result of one seeded reduced Newton run.
#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed_index: usize,
    pub converged: bool,
    pub head: Vec<f64>,
    pub tail: Vec<f64>,
    /// Full residual at the final point.
    pub residual: Vec<f64>,
    pub head_residual: f64,
    pub tail_residual: f64,
    pub iterations: usize,
    pub tail_iterations: usize,
    /// Head residual before each iteration.
    pub history: Vec<f64>,
    pub message: Option<String>,
}

/// Damped Newton on the reduced gradient with the Schur complement as Jacobian.
pub fn newton_from_seed<S: GalerkinSystem>(
    sys: &S,
    seed_index: usize,
    seed: &[f64],
    tail_guess: Option<&[f64]>,
    opts: &ReducedOptions,
) -> SeedOutcome {
    let h = sys.head_len();
    let mut out = SeedOutcome {
        seed_index,
        converged: false,
        head: seed.to_vec(),
        tail: Vec::new(),
        residual: Vec::new(),
        head_residual: f64::INFINITY,
        tail_residual: f64::INFINITY,
        iterations: 0,
        tail_iterations: 0,
        history: Vec::new(),
        message: None,
    };
    let mut state = match solve_tail_system(sys, seed, tail_guess, &opts.tail) {
        Ok(t) => t,
        Err(e) => {
            out.message = Some(e.to_string());
            return out;
        }
    };
    out.tail_iterations += state.iterations;
    let mut head = seed.to_vec();
    let mut gnorm = l2_norm(&state.residual[..h]);
    let mut polished = 0;
    let mut converged = false;

    for it in 0..opts.max_iterations + opts.polish_steps {
        out.history.push(gnorm);
        if gnorm <= opts.head_tol {
            converged = true;
        }
        if converged && (polished >= opts.polish_steps || gnorm == 0.0) {
            break;
        }
        if !converged && it >= opts.max_iterations {
            break;
        }
        let c = concat(&head, &state.tail);
        let blocks = HessianBlocks::from_full(&sys.hessian(&c), h, sys.stiffness().to_vec());
        let schur = match morse::reduced_hessian(&blocks) {
            Ok(s) => s,
            Err(e) => {
                out.message = Some(e.to_string());
                break;
            }
        };
        let g = DVector::from_column_slice(&state.residual[..h]);
        let step = match schur.clone().lu().solve(&g) {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            _ => match schur.clone().svd(true, true).solve(&g, 1e-12) {
                Ok(s) => s,
                Err(e) => {
                    out.message = Some(format!("singular reduced Hessian: {e}"));
                    break;
                }
            },
        };
        let halvings = if converged { 0 } else { opts.max_halvings };
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..=halvings {
            let trial: Vec<f64> = head.iter().zip(step.iter()).map(|(u, s)| u - alpha * s).collect();
            if let Ok(t) = solve_tail_system(sys, &trial, Some(&state.tail), &opts.tail) {
                out.tail_iterations += t.iterations;
                let n = l2_norm(&t.residual[..h]);
                if n < gnorm {
                    head = trial;
                    state = t;
                    gnorm = n;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted && !converged {
            // Levenberg–Marquardt on |g|²: (S² + nu I) d = S g, which tends to
            // steepest descent as nu grows
            let sg = &schur * &g;
            let s2 = &schur * &schur;
            let mut nu = 1e-8 * (1.0 + s2.norm());
            for _ in 0..14 {
                let m = &s2 + DMatrix::identity(h, h) * nu;
                nu *= 10.0;
                let Some(step) = m.cholesky().map(|c| c.solve(&sg)) else { continue };
                let trial: Vec<f64> = head.iter().zip(step.iter()).map(|(u, s)| u - s).collect();
                if let Ok(t) = solve_tail_system(sys, &trial, Some(&state.tail), &opts.tail) {
                    out.tail_iterations += t.iterations;
                    let n = l2_norm(&t.residual[..h]);
                    if n < gnorm {
                        head = trial;
                        state = t;
                        gnorm = n;
                        accepted = true;
                        break;
                    }
                }
            }
        }
        out.iterations += 1;
        if converged {
            polished += 1;
            if !accepted {
                break;
            }
        } else if !accepted {
            out.message = Some(format!("line search failed at head residual {gnorm:.3e}"));
            break;
        }
    }
    if gnorm <= opts.head_tol {
        converged = true;
    }
    if !converged && out.message.is_none() {
        out.message = Some(format!("no convergence after {} iterations (head residual {gnorm:.3e})", out.iterations));
    }
    out.converged = converged;
    out.head = head;
    out.head_residual = gnorm;
    out.tail_residual = state.residual_norm;
    out.tail = state.tail;
    out.residual = state.residual;
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefinementStatus {
    /// Head drift between `M` and `2M` within tolerance.
    Converged,
    Disabled,
    /// Truncation cap reached before the drift check passed.
    CapReached,
    /// The finer solve failed or kept drifting.
    Failed,
}

impl fmt::Display for RefinementStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RefinementStatus::Converged => "converged",
            RefinementStatus::Disabled => "disabled",
            RefinementStatus::CapReached => "cap-reached",
            RefinementStatus::Failed => "failed",
        })
    }
}

/// One stationary point.
#[derive(Clone, Debug)]
pub struct SolutionReport {
    pub head: Vec<f64>,
    pub tail: Vec<f64>,
    /// `head ++ tail`
    pub coeffs: Vec<f64>,
    pub action: f64,
    /// L² norm of the head residual.
    pub head_residual: f64,
    /// Dual norm of the tail residual.
    pub tail_residual: f64,
    /// Dual norm of the whole residual.
    pub full_residual: f64,
    pub index: usize,
    pub nullity: usize,
    pub index_method: IndexMethod,
    pub min_abs_eigenvalue: f64,
    /// Index and nullity of the full truncated Hessian.
    pub oracle_index: Option<usize>,
    pub oracle_nullity: Option<usize>,
    pub certified: bool,
    pub seed_index: usize,
    pub newton_iterations: usize,
    pub tail_iterations: usize,
    pub refinement: RefinementStatus,
    pub refinement_drift: Option<f64>,
    pub quadrature_drift: Option<f64>,
}

/// All seeds' outcomes and the deduplicated, sorted solutions.
#[derive(Clone, Debug)]
pub struct ReducedRun {
    pub solutions: Vec<SolutionReport>,
    pub seeds: Vec<SeedOutcome>,
}

fn head_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Multistart reduced Newton on a generic system.
pub fn solve_system<S: GalerkinSystem>(
    sys: &S,
    seeds: &[Vec<f64>],
    opts: &ReducedOptions,
    certified: bool,
) -> Result<ReducedRun> {
    let h = sys.head_len();
    for s in seeds {
        if s.len() != h {
            return Err(Error::DimensionMismatch {
                expected: h,
                found: s.len(),
            });
        }
    }
    let empty_head = [Vec::new()];
    let seeds: &[Vec<f64>] = if h == 0 { &empty_head } else { seeds };

    let outcomes: Vec<SeedOutcome> = seeds
        .par_iter()
        .enumerate()
        .map(|(i, s)| newton_from_seed(sys, i, s, None, opts))
        .collect();

    let mut kept: Vec<&SeedOutcome> = Vec::new();
    for o in outcomes.iter().filter(|o| o.converged) {
        if kept.iter().all(|k| head_distance(&k.head, &o.head) > opts.dedup_tol) {
            kept.push(o);
        }
    }
    for o in outcomes.iter().filter(|o| !o.converged) {
        debug!("seed {} did not converge: {}", o.seed_index, o.message.as_deref().unwrap_or("?"));
    }

    let reports: Vec<SolutionReport> = kept
        .par_iter()
        .map(|o| refine_and_report(sys, o, opts, certified))
        .collect::<Result<_>>()?;

    let mut solutions: Vec<SolutionReport> = Vec::new();
    for r in reports {
        if solutions
            .iter()
            .all(|s| s.coeffs.len() != r.coeffs.len() || head_distance(&s.head, &r.head) > opts.dedup_tol)
        {
            solutions.push(r);
        }
    }
    solutions.sort_by(|a, b| {
        a.action.total_cmp(&b.action).then_with(|| {
            a.head
                .iter()
                .zip(&b.head)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    Ok(ReducedRun {
        solutions,
        seeds: outcomes,
    })
}

fn refine_and_report<S: GalerkinSystem>(
    sys: &S,
    outcome: &SeedOutcome,
    opts: &ReducedOptions,
    certified: bool,
) -> Result<SolutionReport> {
    let mut finest: Option<S> = None;
    let mut current = outcome.clone();
    let mut status = RefinementStatus::Disabled;
    let mut drift = None;
    let mut iterations = outcome.iterations;
    let mut tail_iterations = outcome.tail_iterations;
    if opts.refine {
        status = RefinementStatus::Failed;
        for _ in 0..opts.max_refinements {
            let base = finest.as_ref().unwrap_or(sys);
            let finer = match base.refined()? {
                Some(f) => f,
                None => {
                    status = RefinementStatus::CapReached;
                    break;
                }
            };
            let mut guess = current.tail.clone();
            guess.resize(finer.len() - finer.head_len(), 0.0);
            let next = newton_from_seed(&finer, outcome.seed_index, &current.head, Some(&guess), opts);
            if !next.converged {
                warn!(
                    "refinement to {} coefficients failed for seed {}: {}",
                    finer.len(),
                    outcome.seed_index,
                    next.message.as_deref().unwrap_or("?")
                );
                break;
            }
            let d = head_distance(&next.head, &current.head);
            drift = Some(d);
            iterations += next.iterations;
            tail_iterations += next.tail_iterations;
            current = next;
            finest = Some(finer);
            if d <= opts.refine_tol {
                status = RefinementStatus::Converged;
                break;
            }
        }
        if status != RefinementStatus::Converged {
            warn!("truncation refinement for seed {} ended as {status}", outcome.seed_index);
        }
    }
    let target = finest.as_ref().unwrap_or(sys);
    build_report(target, &current, status, drift, iterations, tail_iterations, certified)
}

fn build_report<S: GalerkinSystem>(
    sys: &S,
    o: &SeedOutcome,
    refinement: RefinementStatus,
    refinement_drift: Option<f64>,
    newton_iterations: usize,
    tail_iterations: usize,
    certified: bool,
) -> Result<SolutionReport> {
    let h = sys.head_len();
    let coeffs = concat(&o.head, &o.tail);
    let blocks = HessianBlocks::from_full(&sys.hessian(&coeffs), h, sys.stiffness().to_vec());
    let full = morse::index_full(&blocks);
    let (index, nullity, method, min_abs) = match morse::index_schur(&blocks) {
        Ok(r) => (r.index, r.nullity, IndexMethod::Schur, r.min_abs_eigenvalue),
        Err(e) => {
            warn!("Schur index unavailable ({e}); reporting the full-matrix index");
            (full.index, full.nullity, IndexMethod::FullMatrix, full.min_abs_eigenvalue)
        }
    };
    if full.index != index || full.nullity != nullity {
        warn!(
            "index disagreement: schur ({index}, {nullity}) vs full ({}, {})",
            full.index, full.nullity
        );
    }
    Ok(SolutionReport {
        head: o.head.clone(),
        tail: o.tail.clone(),
        action: sys.action(&coeffs),
        head_residual: o.head_residual,
        tail_residual: o.tail_residual,
        full_residual: dual_norm(&o.residual, sys.stiffness()),
        index,
        nullity,
        index_method: method,
        min_abs_eigenvalue: min_abs,
        oracle_index: Some(full.index),
        oracle_nullity: Some(full.nullity),
        certified,
        seed_index: o.seed_index,
        newton_iterations,
        tail_iterations,
        refinement,
        refinement_drift,
        quadrature_drift: sys.quadrature_drift(&coeffs),
        coeffs,
    })
}

/// The mechanical problem at a fixed cutoff and truncation.
#[derive(Clone, Debug)]
pub struct MechanicalSystem {
    functional: ActionFunctional,
    cutoff: usize,
    max_modes: usize,
}

impl MechanicalSystem {
    pub fn new(bp: &BoundaryProblem, cutoff: usize, modes: usize) -> Result<Self> {
        if modes <= cutoff {
            return Err(Error::InvalidParameter(format!(
                "truncation {modes} must exceed the cutoff {cutoff}"
            )));
        }
        Ok(MechanicalSystem {
            functional: ActionFunctional::new(bp, modes)?,
            cutoff,
            max_modes: MAX_PATH_MODES.max(modes),
        })
    }

    pub fn from_plan(bp: &BoundaryProblem, plan: &ReductionPlan) -> Result<Self> {
        Self::new(bp, plan.cutoff, plan.modes)
    }

    pub fn with_max_modes(mut self, max_modes: usize) -> Self {
        self.max_modes = max_modes;
        self
    }

    pub fn functional(&self) -> &ActionFunctional {
        &self.functional
    }

    pub fn modes(&self) -> usize {
        self.functional.modes()
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }
}

impl GalerkinSystem for MechanicalSystem {
    fn len(&self) -> usize {
        self.functional.len()
    }

    fn head_len(&self) -> usize {
        self.cutoff * self.functional.components()
    }

    fn stiffness(&self) -> &[f64] {
        self.functional.stiffness()
    }

    fn residual(&self, c: &[f64]) -> Vec<f64> {
        self.functional.residual(c)
    }

    fn hessian(&self, c: &[f64]) -> DMatrix<f64> {
        self.functional.hessian(c)
    }

    fn action(&self, c: &[f64]) -> f64 {
        self.functional.action(c)
    }

    fn refined(&self) -> Result<Option<Self>> {
        let modes = 2 * self.modes();
        if modes > self.max_modes {
            return Ok(None);
        }
        Ok(Some(MechanicalSystem {
            functional: ActionFunctional::new(self.functional.problem(), modes)?,
            cutoff: self.cutoff,
            max_modes: self.max_modes,
        }))
    }

    fn quadrature_drift(&self, c: &[f64]) -> Option<f64> {
        let path = self.functional.path(c.to_vec());
        quadrature_drift(self.functional.problem(), &path).ok()
    }
}

fn tail_options(plan: &ReductionPlan, method: TailMethod) -> TailOptions {
    TailOptions {
        method,
        tol: plan.tail_tol,
        ..Default::default()
    }
}

/// `v(u)` as a path whose head modes are zero, plus iteration statistics.
pub fn solve_tail(
    bp: &BoundaryProblem,
    plan: &ReductionPlan,
    u: &[f64],
    v0: Option<&[f64]>,
    method: TailMethod,
) -> Result<(SinePath, TailSolution)> {
    let sys = MechanicalSystem::from_plan(bp, plan)?;
    let sol = solve_tail_system(&sys, u, v0, &tail_options(plan, method))?;
    let path = sys.functional.path(concat(&vec![0.0; u.len()], &sol.tail));
    Ok((path, sol))
}

/// `(pi k/T)² u_k - [V'(gamma)]_k` for `k <= N` at `gamma = iota(u + v(u))`.
pub fn reduced_gradient(bp: &BoundaryProblem, plan: &ReductionPlan, u: &[f64]) -> Result<Vec<f64>> {
    let sys = MechanicalSystem::from_plan(bp, plan)?;
    let (g, _) = reduced_gradient_system(&sys, u, None, &tail_options(plan, TailMethod::Newton))?;
    Ok(g)
}

/// `S(u) = L(u + v(u))`
pub fn reduced_action(bp: &BoundaryProblem, plan: &ReductionPlan, u: &[f64]) -> Result<f64> {
    let sys = MechanicalSystem::from_plan(bp, plan)?;
    let t = solve_tail_system(&sys, u, None, &tail_options(plan, TailMethod::Newton))?;
    Ok(sys.action(&concat(u, &t.tail)))
}

pub fn default_radius(bp: &BoundaryProblem) -> f64 {
    let gap = bp.q0.iter().zip(&bp.q_t).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt();
    2.0 * (1.0 + gap)
}

pub fn resolve_seeds(bp: &BoundaryProblem, plan: &ReductionPlan, seeds: &Seeds) -> Vec<Vec<f64>> {
    match seeds {
        Seeds::Explicit(list) => list.clone(),
        Seeds::Multistart(m) => multistart_seeds(
            plan.cutoff * bp.dim(),
            m.count,
            m.radius.unwrap_or_else(|| default_radius(bp)),
            m.seed,
        ),
    }
}

pub fn solve_reduced(
    bp: &BoundaryProblem,
    plan: &ReductionPlan,
    seeds: &Seeds,
    opts: &ReducedOptions,
) -> Result<ReducedRun> {
    let sys = MechanicalSystem::from_plan(bp, plan)?;
    let seeds = resolve_seeds(bp, plan, seeds);
    solve_system(&sys, &seeds, opts, plan.certified)
}

/// The stationary path of a report, `n` components, sine coefficients.
pub fn solution_path(bp: &BoundaryProblem, report: &SolutionReport) -> Result<SinePath> {
    SinePath::from_coeffs(bp.dim(), bp.horizon, report.coeffs.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fourier::affine_embed;
    use crate::potential::{Family, Potential};
    use proptest::prelude::*;

    fn problem(family: Family, n: usize, params: &[f64], t: f64, q0: Vec<f64>, qt: Vec<f64>) -> BoundaryProblem {
        BoundaryProblem::new(Potential::builtin(family, n, params).unwrap(), t, q0, qt).unwrap()
    }

    fn overrides(cutoff: Option<usize>, modes: Option<usize>) -> PlanOverrides {
        PlanOverrides {
            cutoff,
            modes,
            ..Default::default()
        }
    }

    #[test]
    fn plan_examples() {
        let free = problem(Family::Zero, 1, &[], 2.0, vec![0.0], vec![1.0]);
        let p = make_plan(&free, &PlanOverrides::default()).unwrap();
        assert_eq!((p.cutoff, p.mu, p.modes), (0, 1.0, 32));

        let osc = problem(Family::Harmonic, 1, &[1.0], PI, vec![0.0], vec![1.0]);
        let p = make_plan(&osc, &PlanOverrides::default()).unwrap();
        assert_eq!(p.cutoff, 1);
        assert!((p.mu - 0.75).abs() < 1e-15);
        assert!((p.contraction - 0.25).abs() < 1e-15);

        let p = make_plan(&osc, &overrides(Some(3), None)).unwrap();
        assert!((p.mu - 0.9375).abs() < 1e-15);
        assert!(make_plan(&osc, &overrides(Some(0), None)).is_err());
        assert!(make_plan(&osc, &overrides(Some(3), Some(3))).is_err());
    }

    #[test]
    fn uncertified_needs_acknowledgement() {
        let pot = Potential::parse("q1^4", 1, None).unwrap();
        let bp = BoundaryProblem::new(pot, 1.0, vec![0.0], vec![1.0]).unwrap();
        assert!(matches!(make_plan(&bp, &PlanOverrides::default()), Err(Error::Uncertified(_))));
        let p = make_plan(
            &bp,
            &PlanOverrides {
                allow_uncertified: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(!p.certified);
    }

    #[test]
    fn contraction_cutoff_examples() {
        assert_eq!(contraction_cutoff(1.0, PI), 2);
        assert!(contraction_cutoff(1.0, PI) > cutoff_for(1.0, PI));
    }

    #[test]
    fn free_tail_is_zero() {
        let bp = problem(Family::Zero, 2, &[], 1.5, vec![0.0, 1.0], vec![2.0, -1.0]);
        let plan = make_plan(&bp, &overrides(Some(2), None)).unwrap();
        let u = [0.3, -0.1, 0.2, 0.5];
        let (tail, stats) = solve_tail(&bp, &plan, &u, None, TailMethod::Newton).unwrap();
        assert_eq!(stats.iterations, 0);
        assert!(tail.coeffs().iter().all(|v| *v == 0.0));
        let g = reduced_gradient(&bp, &plan, &[0.0; 4]).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));

        let plan0 = make_plan(&bp, &PlanOverrides::default()).unwrap();
        assert!(reduced_gradient(&bp, &plan0, &[]).unwrap().is_empty());
    }

    #[test]
    fn harmonic_tail_in_one_newton_step() {
        let bp = problem(Family::Harmonic, 1, &[1.5], 3.0, vec![0.0], vec![1.0]);
        let plan = make_plan(&bp, &PlanOverrides::default()).unwrap();
        let u = vec![0.2; plan.cutoff];
        let (_, stats) = solve_tail(&bp, &plan, &u, None, TailMethod::Newton).unwrap();
        assert_eq!(stats.iterations, 1);
        assert!(stats.residual_norm <= 1e-10);
    }

    /// Independent root finder for the tail: Levenberg–Marquardt with a
    /// finite-difference Jacobian of the residual.
    fn dense_tail_oracle(sys: &MechanicalSystem, head: &[f64]) -> Vec<f64> {
        let h = head.len();
        let m = sys.len() - h;
        let f = |v: &[f64]| -> DVector<f64> {
            let r = sys.residual(&concat(head, v));
            DVector::from_column_slice(&r[h..])
        };
        let mut v = vec![0.0; m];
        let mut damping = 1e-3;
        for _ in 0..200 {
            let r = f(&v);
            if r.norm() < 1e-13 {
                break;
            }
            let mut jac = DMatrix::zeros(m, m);
            for j in 0..m {
                let eps = 1e-6;
                let mut vp = v.clone();
                let mut vm = v.clone();
                vp[j] += eps;
                vm[j] -= eps;
                let col = (f(&vp) - f(&vm)) / (2.0 * eps);
                jac.set_column(j, &col);
            }
            let jt = jac.transpose();
            let lhs = &jt * &jac + DMatrix::identity(m, m) * damping;
            let step = lhs.lu().solve(&(&jt * &r)).unwrap();
            let trial: Vec<f64> = v.iter().zip(step.iter()).map(|(a, b)| a - b).collect();
            if f(&trial).norm() < r.norm() {
                v = trial;
                damping = (damping * 0.3).max(1e-12);
            } else {
                damping *= 10.0;
            }
        }
        v
    }

    fn h1_distance(a: &[f64], b: &[f64], stiff: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .zip(stiff)
            .map(|((x, y), w)| w * (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn pendulum_tail_matches_dense_solver() {
        let bp = problem(Family::Pendulum, 1, &[1.0], PI, vec![0.0], vec![1.0]);
        let plan = make_plan(&bp, &PlanOverrides::default()).unwrap();
        let sys = MechanicalSystem::from_plan(&bp, &plan).unwrap();
        let u = vec![0.0; plan.cutoff];
        let (_, picard) = solve_tail(&bp, &plan, &u, None, TailMethod::Picard).unwrap();
        for rate in picard.rates() {
            assert!(rate <= plan.contraction + 0.05, "rate {rate}");
        }
        let (_, newton) = solve_tail(&bp, &plan, &u, None, TailMethod::Newton).unwrap();
        assert!(newton.iterations <= 8);
        let oracle = dense_tail_oracle(&sys, &u);
        let stiff = &sys.stiffness()[sys.head_len()..];
        assert!(h1_distance(&newton.tail, &oracle, stiff) < 1e-8);
        assert!(h1_distance(&picard.tail, &oracle, stiff) < 1e-8);
    }

    #[test]
    fn envelope_identity() {
        let bp = problem(Family::Pendulum, 2, &[1.3], 2.5, vec![0.0, 0.4], vec![1.0, -0.5]);
        let plan = make_plan(&bp, &overrides(Some(2), None)).unwrap();
        let u = vec![0.1, -0.2, 0.05, 0.3];
        let g = reduced_gradient(&bp, &plan, &u).unwrap();
        for i in 0..u.len() {
            let eps = 1e-5;
            let mut up = u.clone();
            let mut um = u.clone();
            up[i] += eps;
            um[i] -= eps;
            let fd = (reduced_action(&bp, &plan, &up).unwrap() - reduced_action(&bp, &plan, &um).unwrap()) / (2.0 * eps);
            assert!((fd - g[i]).abs() <= 1e-5 * (1.0 + g[i].abs()), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn free_particle_straight_line() {
        let bp = problem(Family::Zero, 2, &[], 1.0, vec![0.0, 0.0], vec![1.0, 2.0]);
        let plan = make_plan(&bp, &PlanOverrides::default()).unwrap();
        let run = solve_reduced(&bp, &plan, &Seeds::Multistart(Multistart::default()), &ReducedOptions::default()).unwrap();
        assert_eq!(run.solutions.len(), 1);
        let s = &run.solutions[0];
        assert_eq!((s.index, s.nullity), (0, 0));
        assert!(s.coeffs.iter().all(|c| c.abs() < 1e-14));
        assert!((s.action - 2.5).abs() < 1e-12);
    }

    #[test]
    fn harmonic_quarter_period() {
        let t = PI / 2.0;
        let bp = problem(Family::Harmonic, 1, &[1.0], t, vec![0.0], vec![1.0]);
        let plan = make_plan(&bp, &overrides(None, Some(256))).unwrap();
        let opts = ReducedOptions {
            refine: false,
            ..ReducedOptions::from_plan(&plan)
        };
        let run = solve_reduced(&bp, &plan, &Seeds::Multistart(Multistart::default()), &opts).unwrap();
        assert_eq!(run.solutions.len(), 1);
        let path = solution_path(&bp, &run.solutions[0]).unwrap();
        for i in 0..=200 {
            let s = t * i as f64 / 200.0;
            let q = affine_embed(&bp, &path, s).unwrap()[0];
            assert!((q - s.sin()).abs() < 2e-6, "t={s}: {q}");
        }
        // int_0^{pi/2} (cos² - sin²)/2 = 0
        assert!(run.solutions[0].action.abs() < 1e-7);
    }

    #[test]
    fn pendulum_equilibrium_index() {
        let bp = problem(Family::Pendulum, 1, &[1.0], 3.0 * PI, vec![0.0], vec![0.0]);
        let plan = make_plan(&bp, &PlanOverrides::default()).unwrap();
        assert_eq!(plan.cutoff, 3);
        let run = solve_reduced(&bp, &plan, &Seeds::Explicit(vec![vec![0.0; 3]]), &ReducedOptions::from_plan(&plan)).unwrap();
        assert_eq!(run.solutions.len(), 1);
        let s = &run.solutions[0];
        assert!(s.coeffs.iter().all(|c| c.abs() < 1e-12));
        // k = 3 is resonant: (k / 3)^2 - 1 = 0
        assert_eq!((s.index, s.nullity), (2, 1));
        assert_eq!(s.oracle_index, Some(2));
        assert_eq!(s.refinement, RefinementStatus::Converged);
    }

    #[test]
    fn multistart_finds_pendulum_family() {
        let bp = problem(Family::Pendulum, 1, &[1.0], 3.0 * PI, vec![0.0], vec![0.0]);
        let plan = make_plan(&bp, &PlanOverrides::default()).unwrap();
        let opts = ReducedOptions::from_plan(&plan);
        let run = solve_reduced(&bp, &plan, &Seeds::Multistart(Multistart::default()), &opts).unwrap();
        assert!(run.solutions.len() >= 3);
        let sys = MechanicalSystem::from_plan(&bp, &plan).unwrap();
        for s in &run.solutions {
            assert!(s.index <= plan.cutoff);
            assert_eq!(Some(s.index), s.oracle_index);
            let tol = 2.0 * plan.tail_tol.max(plan.head_tol);
            assert!(s.full_residual <= tol, "residual {}", s.full_residual);
            if s.coeffs.len() == sys.len() {
                assert!(dual_norm(&sys.residual(&s.coeffs), sys.stiffness()) <= tol);
            }
        }
        for w in run.solutions.windows(2) {
            assert!(w[0].action <= w[1].action);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn tail_monotone_and_injective(
            g in 0.2f64..3.0,
            t in 0.5f64..6.0,
            q in -2.0f64..2.0,
            raw in proptest::collection::vec(-1.0f64..1.0, 3 * 40),
        ) {
            let bp = problem(Family::Pendulum, 1, &[g], t, vec![0.0], vec![q]);
            let plan = make_plan(&bp, &overrides(None, Some(40))).unwrap();
            let sys = MechanicalSystem::from_plan(&bp, &plan).unwrap();
            let h = sys.head_len();
            let m = sys.len() - h;
            let stiff = &sys.stiffness()[h..];
            let u: Vec<f64> = raw[..h].to_vec();
            // tail vectors with H¹-scaled random entries
            let v1: Vec<f64> = (0..m).map(|i| raw[40 + i] / stiff[i].sqrt()).collect();
            let v2: Vec<f64> = (0..m).map(|i| raw[80 + i % 40] / stiff[i].sqrt() * 0.7).collect();
            let r1 = sys.residual(&concat(&u, &v1));
            let r2 = sys.residual(&concat(&u, &v2));
            let dr: Vec<f64> = r2[h..].iter().zip(&r1[h..]).map(|(a, b)| a - b).collect();
            let dv: Vec<f64> = v2.iter().zip(&v1).map(|(a, b)| a - b).collect();
            let pairing: f64 = dr.iter().zip(&dv).map(|(a, b)| a * b).sum();
            let norm_sq: f64 = dv.iter().zip(stiff).map(|(d, w)| w * d * d).sum();
            prop_assert!(pairing >= plan.mu * norm_sq - 1e-9);
            prop_assert!(dual_norm(&dr, stiff) >= plan.mu * norm_sq.sqrt() - 1e-9);
        }

        #[test]
        fn picard_contracts(g in 0.2f64..2.0, t in 0.5f64..5.0, q in -2.0f64..2.0, s in -1.0f64..1.0) {
            let bp = problem(Family::Pendulum, 1, &[g], t, vec![0.0], vec![q]);
            let plan = make_plan(&bp, &PlanOverrides::default()).unwrap();
            let u = vec![s; plan.cutoff];
            let (_, stats) = solve_tail(&bp, &plan, &u, None, TailMethod::Picard).unwrap();
            for rate in stats.rates() {
                prop_assert!(rate <= plan.contraction + 0.05);
            }
        }
    }

    #[test]
    fn seeds_are_reproducible() {
        let a = multistart_seeds(3, 10, 2.0, DEFAULT_SEED);
        let b = multistart_seeds(3, 10, 2.0, DEFAULT_SEED);
        assert_eq!(a, b);
        assert_eq!(a[0], vec![0.0; 3]);
        assert!(a.iter().all(|s| l2_norm(s) <= 2.0));
    }
}
