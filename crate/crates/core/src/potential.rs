//! Potential energies `V: R^n -> R` with exact derivatives and a global bound on `|V''|`.

use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::expr::{self, Expr};

/// Where the curvature bound `C` came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundSource {
    /// Derived analytically for a built-in family.
    Exact,
    /// Given by the user alongside an expression.
    UserSupplied,
    /// Estimated by sampling the Hessian norm; not a certificate.
    SampledEstimate,
}

impl fmt::Display for BoundSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BoundSource::Exact => "exact",
            BoundSource::UserSupplied => "user_supplied",
            BoundSource::SampledEstimate => "sampled_estimate",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Zero,
    Harmonic,
    Pendulum,
    CoupledPendula,
}

impl Family {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "zero" | "free" => Ok(Family::Zero),
            "harmonic" => Ok(Family::Harmonic),
            "pendulum" => Ok(Family::Pendulum),
            "coupled_pendula" => Ok(Family::CoupledPendula),
            other => Err(Error::UnknownFamily(other.to_string())),
        }
    }
}

#[derive(Clone, Debug)]
enum Kind {
    Zero,
    /// `V = 1/2 sum w_i^2 q_i^2`
    Harmonic(Vec<f64>),
    /// `V = -g sum cos q_i`
    Pendulum(f64),
    /// `V = -g sum cos q_i - kappa sum cos(q_{i+1} - q_i)`
    CoupledPendula { g: f64, kappa: f64 },
    Expression(Box<Compiled>),
}

#[derive(Clone, Debug)]
struct Compiled {
    value: Expr,
    grad: Vec<Expr>,
    /// Upper triangle, row-major.
    hess: Vec<Expr>,
}

/// Sample grid used for [`BoundSource::SampledEstimate`]: per-axis points in
/// `[-SAMPLE_HALF_WIDTH, SAMPLE_HALF_WIDTH]`.
pub const SAMPLE_AXIS_POINTS: usize = 41;
pub const SAMPLE_HALF_WIDTH: f64 = 10.0;
pub const SAMPLE_RANDOM_POINTS: usize = 200;
pub const SAMPLE_SEED: u64 = 0x5EED_C0DE;
pub const SAMPLE_SAFETY: f64 = 1.25;
/// Tensor grids above this many points fall back to axis and diagonal lines.
const SAMPLE_TENSOR_CAP: usize = 70_000;

/// A potential with value, gradient, Hessian and curvature bound.
///
/// Immutable after construction; evaluation is reentrant.
#[derive(Clone, Debug)]
pub struct Potential {
    dim: usize,
    kind: Kind,
    c_bound: f64,
    c_source: BoundSource,
    unbounded_curvature: bool,
    label: String,
}

impl Potential {
    pub fn builtin(family: Family, dim: usize, params: &[f64]) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("dimension must be positive".into()));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidParameter("parameters must be finite".into()));
        }
        let need = |k: usize| -> Result<()> {
            if params.len() == k {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!(
                    "{family:?} expects {k} parameter(s), got {}",
                    params.len()
                )))
            }
        };
        let (kind, c_bound, label) = match family {
            Family::Zero => {
                if !params.is_empty() {
                    need(0)?;
                }
                (Kind::Zero, 0.0, "zero".to_string())
            }
            Family::Harmonic => {
                let omegas = match params.len() {
                    1 => vec![params[0]; dim],
                    k if k == dim => params.to_vec(),
                    k => {
                        return Err(Error::InvalidParameter(format!(
                            "harmonic expects 1 or {dim} frequencies, got {k}"
                        )))
                    }
                };
                let c = omegas.iter().map(|w| w * w).fold(0.0, f64::max);
                (Kind::Harmonic(omegas), c, "harmonic".to_string())
            }
            Family::Pendulum => {
                need(1)?;
                (Kind::Pendulum(params[0]), params[0].abs(), "pendulum".to_string())
            }
            Family::CoupledPendula => {
                need(2)?;
                let (g, kappa) = (params[0], params[1]);
                // Gershgorin: each coupling adds at most 2|kappa| per incident edge pair
                let max_degree = match dim {
                    1 => 0.0,
                    2 => 1.0,
                    _ => 2.0,
                };
                let c = g.abs() + 2.0 * kappa.abs() * max_degree;
                (Kind::CoupledPendula { g, kappa }, c, "coupled_pendula".to_string())
            }
        };
        Ok(Potential {
            dim,
            kind,
            c_bound,
            c_source: BoundSource::Exact,
            unbounded_curvature: false,
            label,
        })
    }

    /// Parses an expression potential. Without `c_bound` the bound is estimated
    /// by sampling and labelled as such.
    pub fn parse(src: &str, dim: usize, c_bound: Option<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("dimension must be positive".into()));
        }
        let value = expr::parse(src)?.simplify();
        if value.arity() > dim {
            return Err(Error::InvalidParameter(format!(
                "expression references q{} but dimension is {dim}",
                value.arity()
            )));
        }
        let grad: Vec<Expr> = (0..dim).map(|i| value.diff(i)).collect();
        let mut hess = Vec::with_capacity(dim * (dim + 1) / 2);
        for i in 0..dim {
            for j in i..dim {
                hess.push(grad[i].diff(j));
            }
        }
        let unbounded_curvature = value.growth()[2] > 0.0;
        if unbounded_curvature {
            log::warn!(
                "potential `{src}` has unbounded second derivative; curvature bound cannot be certified"
            );
        }
        let mut pot = Potential {
            dim,
            kind: Kind::Expression(Box::new(Compiled { value, grad, hess })),
            c_bound: 0.0,
            c_source: BoundSource::UserSupplied,
            unbounded_curvature,
            label: src.to_string(),
        };
        match c_bound {
            Some(c) if c.is_finite() && c >= 0.0 => pot.c_bound = c,
            Some(c) => {
                return Err(Error::InvalidParameter(format!(
                    "c_bound must be finite and nonnegative, got {c}"
                )))
            }
            None => {
                pot.c_bound = SAMPLE_SAFETY * pot.sampled_hessian_norm();
                pot.c_source = BoundSource::SampledEstimate;
            }
        }
        Ok(pot)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn c_bound(&self) -> f64 {
        self.c_bound
    }

    pub fn c_source(&self) -> BoundSource {
        self.c_source
    }

    /// True when the expression's second derivative grows without bound.
    pub fn unbounded_curvature(&self) -> bool {
        self.unbounded_curvature
    }

    /// A bound is certified when it is exact or user supplied and the
    /// expression does not have unbounded curvature.
    pub fn certified(&self) -> bool {
        self.c_source != BoundSource::SampledEstimate && !self.unbounded_curvature
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn value(&self, q: &[f64]) -> f64 {
        debug_assert_eq!(q.len(), self.dim);
        match &self.kind {
            Kind::Zero => 0.0,
            Kind::Harmonic(w) => 0.5 * q.iter().zip(w).map(|(x, w)| w * w * x * x).sum::<f64>(),
            Kind::Pendulum(g) => -g * q.iter().map(|x| x.cos()).sum::<f64>(),
            Kind::CoupledPendula { g, kappa } => {
                let on_site: f64 = q.iter().map(|x| x.cos()).sum();
                let coupling: f64 = q.windows(2).map(|w| (w[1] - w[0]).cos()).sum();
                -g * on_site - kappa * coupling
            }
            Kind::Expression(c) => c.value.eval(q),
        }
    }

    pub fn gradient_into(&self, q: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        match &self.kind {
            Kind::Zero => out.fill(0.0),
            Kind::Harmonic(w) => {
                for i in 0..self.dim {
                    out[i] = w[i] * w[i] * q[i];
                }
            }
            Kind::Pendulum(g) => {
                for i in 0..self.dim {
                    out[i] = g * q[i].sin();
                }
            }
            Kind::CoupledPendula { g, kappa } => {
                for i in 0..self.dim {
                    out[i] = g * q[i].sin();
                }
                for i in 0..self.dim.saturating_sub(1) {
                    let s = kappa * (q[i + 1] - q[i]).sin();
                    out[i + 1] += s;
                    out[i] -= s;
                }
            }
            Kind::Expression(c) => {
                for (o, e) in out.iter_mut().zip(&c.grad) {
                    *o = e.eval(q);
                }
            }
        }
    }

    /// Row-major `n x n` Hessian.
    pub fn hessian_into(&self, q: &[f64], out: &mut [f64]) {
        let n = self.dim;
        debug_assert_eq!(out.len(), n * n);
        out.fill(0.0);
        match &self.kind {
            Kind::Zero => {}
            Kind::Harmonic(w) => {
                for i in 0..n {
                    out[i * n + i] = w[i] * w[i];
                }
            }
            Kind::Pendulum(g) => {
                for i in 0..n {
                    out[i * n + i] = g * q[i].cos();
                }
            }
            Kind::CoupledPendula { g, kappa } => {
                for i in 0..n {
                    out[i * n + i] = g * q[i].cos();
                }
                for i in 0..n.saturating_sub(1) {
                    let c = kappa * (q[i + 1] - q[i]).cos();
                    out[i * n + i] += c;
                    out[(i + 1) * n + i + 1] += c;
                    out[i * n + i + 1] -= c;
                    out[(i + 1) * n + i] -= c;
                }
            }
            Kind::Expression(c) => {
                let mut idx = 0;
                for i in 0..n {
                    for j in i..n {
                        let v = c.hess[idx].eval(q);
                        out[i * n + j] = v;
                        out[j * n + i] = v;
                        idx += 1;
                    }
                }
            }
        }
    }

    pub fn gradient(&self, q: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.gradient_into(q, &mut out);
        out
    }

    pub fn hessian(&self, q: &[f64]) -> DMatrix<f64> {
        let mut out = vec![0.0; self.dim * self.dim];
        self.hessian_into(q, &mut out);
        DMatrix::from_row_slice(self.dim, self.dim, &out)
    }

    /// Largest absolute eigenvalue of the Hessian at `q`.
    pub fn hessian_norm(&self, q: &[f64]) -> f64 {
        operator_norm(self.hessian(q))
    }

    /// Maximum Hessian norm over the documented sample set (without the safety factor).
    pub fn sampled_hessian_norm(&self) -> f64 {
        sample_points(self.dim)
            .iter()
            .map(|q| self.hessian_norm(q))
            .fold(0.0, f64::max)
    }
}

/// Largest absolute eigenvalue of a symmetric matrix.
pub fn operator_norm(m: DMatrix<f64>) -> f64 {
    if m.nrows() == 1 {
        return m[(0, 0)].abs();
    }
    SymmetricEigen::new(m)
        .eigenvalues
        .iter()
        .fold(0.0, |acc: f64, v| acc.max(v.abs()))
}

/// Deterministic sample set: a tensor grid of `SAMPLE_AXIS_POINTS` per axis
/// when small enough (otherwise the coordinate axes and the main diagonal),
/// plus `SAMPLE_RANDOM_POINTS` uniform points from a fixed seed.
pub fn sample_points(dim: usize) -> Vec<Vec<f64>> {
    let axis: Vec<f64> = (0..SAMPLE_AXIS_POINTS)
        .map(|i| {
            -SAMPLE_HALF_WIDTH + 2.0 * SAMPLE_HALF_WIDTH * i as f64 / (SAMPLE_AXIS_POINTS - 1) as f64
        })
        .collect();
    let mut pts = Vec::new();
    let tensor_size = (SAMPLE_AXIS_POINTS as f64).powi(dim as i32);
    if tensor_size <= SAMPLE_TENSOR_CAP as f64 {
        let total = tensor_size as usize;
        for flat in 0..total {
            let mut rem = flat;
            let mut q = vec![0.0; dim];
            for x in q.iter_mut() {
                *x = axis[rem % SAMPLE_AXIS_POINTS];
                rem /= SAMPLE_AXIS_POINTS;
            }
            pts.push(q);
        }
    } else {
        for i in 0..dim {
            for &a in &axis {
                let mut q = vec![0.0; dim];
                q[i] = a;
                pts.push(q);
            }
        }
        for &a in &axis {
            pts.push(vec![a; dim]);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(SAMPLE_SEED);
    for _ in 0..SAMPLE_RANDOM_POINTS {
        pts.push(
            (0..dim)
                .map(|_| rng.gen_range(-SAMPLE_HALF_WIDTH..=SAMPLE_HALF_WIDTH))
                .collect(),
        );
    }
    pts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_points(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| (0..dim).map(|_| rng.gen_range(-4.0..4.0)).collect())
            .collect()
    }

    fn all_potentials() -> Vec<Potential> {
        vec![
            Potential::builtin(Family::Zero, 2, &[]).unwrap(),
            Potential::builtin(Family::Harmonic, 3, &[1.0, 2.0, 0.5]).unwrap(),
            Potential::builtin(Family::Pendulum, 2, &[9.8]).unwrap(),
            Potential::builtin(Family::CoupledPendula, 3, &[1.0, 0.4]).unwrap(),
            Potential::builtin(Family::CoupledPendula, 2, &[2.0, 0.7]).unwrap(),
            Potential::parse("cos(q1)*sin(q2) + 0.3*q1*q2 - tanh(q1 - 2*q2)", 2, Some(3.0)).unwrap(),
            Potential::parse("exp(cos(q1)) / 2", 1, None).unwrap(),
        ]
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn builtin_bounds() {
        assert_eq!(Potential::builtin(Family::Zero, 1, &[]).unwrap().c_bound(), 0.0);
        assert_eq!(Potential::builtin(Family::Harmonic, 1, &[2.0]).unwrap().c_bound(), 4.0);
        let p = Potential::builtin(Family::Pendulum, 1, &[9.8]).unwrap();
        assert_eq!(p.c_bound(), 9.8);
        assert_eq!(p.c_source(), BoundSource::Exact);
        assert!(p.certified());
        let cp = Potential::builtin(Family::CoupledPendula, 2, &[1.0, 0.5]).unwrap();
        assert_eq!(cp.c_bound(), 2.0);
    }

    #[test]
    fn builtin_errors() {
        assert!(matches!(Family::from_name("morse"), Err(Error::UnknownFamily(_))));
        assert!(Potential::builtin(Family::Pendulum, 0, &[1.0]).is_err());
        assert!(Potential::builtin(Family::Pendulum, 1, &[f64::NAN]).is_err());
        assert!(Potential::builtin(Family::Pendulum, 1, &[]).is_err());
        assert!(Potential::builtin(Family::Harmonic, 3, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn expression_sources_and_flags() {
        let p = Potential::parse("0.5*q1^2", 1, None).unwrap();
        assert_eq!(p.c_source(), BoundSource::SampledEstimate);
        assert!(p.c_bound() >= 1.0);
        assert!(!p.certified());

        let p = Potential::parse("cos(q1)", 1, Some(1.0)).unwrap();
        assert_eq!(p.c_bound(), 1.0);
        assert_eq!(p.c_source(), BoundSource::UserSupplied);
        assert!(p.certified());

        let p = Potential::parse("q1^4", 1, Some(1.0)).unwrap();
        assert!(p.unbounded_curvature());
        assert!(!p.certified());

        assert!(Potential::parse("q3", 2, Some(1.0)).is_err());
    }

    #[test]
    fn derivatives_match_finite_differences() {
        for pot in all_potentials() {
            let n = pot.dim();
            for q in random_points(n, 200, 7) {
                let g = pot.gradient(&q);
                let h = pot.hessian(&q);
                for i in 0..n {
                    let eps = 1e-5;
                    let mut qp = q.clone();
                    let mut qm = q.clone();
                    qp[i] += eps;
                    qm[i] -= eps;
                    let fd = (pot.value(&qp) - pot.value(&qm)) / (2.0 * eps);
                    assert!(rel(fd, g[i]) < 1e-6, "{}: grad {fd} vs {}", pot.label(), g[i]);
                    let gp = pot.gradient(&qp);
                    let gm = pot.gradient(&qm);
                    for j in 0..n {
                        let fd = (gp[j] - gm[j]) / (2.0 * eps);
                        assert!(rel(fd, h[(j, i)]) < 1e-5, "{}: hess", pot.label());
                    }
                }
                for i in 0..n {
                    for j in 0..n {
                        assert!((h[(i, j)] - h[(j, i)]).abs() <= 1e-12 * (1.0 + h[(i, j)].abs()));
                    }
                }
            }
        }
    }

    #[test]
    fn exact_bounds_dominate_samples() {
        for pot in all_potentials() {
            if pot.c_source() != BoundSource::Exact {
                continue;
            }
            let worst = random_points(pot.dim(), 200, 11)
                .iter()
                .map(|q| pot.hessian_norm(q))
                .fold(0.0, f64::max);
            assert!(worst <= pot.c_bound() + 1e-12, "{}", pot.label());
        }
    }

    #[test]
    fn sample_set_is_deterministic() {
        assert_eq!(sample_points(2), sample_points(2));
        assert_eq!(sample_points(1).len(), 41 + 200);
        assert_eq!(sample_points(4).len(), 4 * 41 + 41 + 200);
    }
}
