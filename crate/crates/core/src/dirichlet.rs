//! Semilinear Dirichlet problems `-Δφ = V'(φ)` on rectangles in one or two
//! dimensions, reduced with the Dirichlet eigenbasis.
//!
//! Fields are expanded in `psi_k(x) = prod_i sqrt(2/L_i) sin(k_i pi x_i / L_i)`.
//! Nonlinear terms use a tensor interior grid with `P_i = 2 K_i + 1` points per
//! axis after subtracting the value at `φ = 0`, whose integrals are known in
//! closed form. A one-dimensional domain is handled as a rectangle with a
//! trivial second axis.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::potential::Potential;
use crate::reduction::{self, GalerkinSystem, ReducedOptions, ReducedRun, Seeds};

pub const DEFAULT_MODE_CAP: usize = 100_000;
/// Largest mode count the refinement loop may reach.
pub const MAX_FIELD_MODES: usize = 2048;
/// Minimum truncation: 32 modes in 1D, up to mode `(12, 12)` in 2D.
const FLOOR_1D: f64 = 32.0;
const FLOOR_2D: f64 = 12.0;

#[derive(Clone, Debug, PartialEq)]
pub struct RectangleDomain {
    lengths: Vec<f64>,
}

impl RectangleDomain {
    pub fn new(lengths: Vec<f64>) -> Result<Self> {
        if !(1..=2).contains(&lengths.len()) {
            return Err(Error::InvalidParameter(format!(
                "domains must have dimension 1 or 2, got {}",
                lengths.len()
            )));
        }
        if let Some(l) = lengths.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return Err(Error::InvalidParameter(format!("side length must be positive, got {l}")));
        }
        Ok(RectangleDomain { lengths })
    }

    pub fn interval(length: f64) -> Result<Self> {
        Self::new(vec![length])
    }

    pub fn unit_square() -> Self {
        RectangleDomain {
            lengths: vec![1.0, 1.0],
        }
    }

    pub fn dim(&self) -> usize {
        self.lengths.len()
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }

    pub fn volume(&self) -> f64 {
        self.lengths.iter().product()
    }

    pub fn eigenvalue(&self, index: &[usize]) -> f64 {
        index
            .iter()
            .zip(&self.lengths)
            .map(|(k, l)| (PI * *k as f64 / l).powi(2))
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EigenMode {
    pub index: Vec<usize>,
    pub eigenvalue: f64,
}

/// All modes with `lambda <= lambda_max`, ascending, ties by multi-index.
pub fn enumerate_modes(dom: &RectangleDomain, lambda_max: f64) -> Result<Vec<EigenMode>> {
    enumerate_modes_capped(dom, lambda_max, DEFAULT_MODE_CAP)
}

pub fn enumerate_modes_capped(dom: &RectangleDomain, lambda_max: f64, cap: usize) -> Result<Vec<EigenMode>> {
    if !(lambda_max > 0.0) {
        return Err(Error::InvalidParameter(format!("eigenvalue bound must be positive, got {lambda_max}")));
    }
    let axis_max = |l: f64, rest: f64| -> usize {
        let room = lambda_max - rest;
        if room <= 0.0 {
            0
        } else {
            (l * room.sqrt() / PI).floor() as usize + 1
        }
    };
    let l = dom.lengths();
    let mut modes = Vec::new();
    let push = |modes: &mut Vec<EigenMode>, index: Vec<usize>| -> Result<()> {
        let eigenvalue = dom.eigenvalue(&index);
        if eigenvalue <= lambda_max {
            if modes.len() == cap {
                return Err(Error::ModeCap { count: cap + 1, cap });
            }
            modes.push(EigenMode { index, eigenvalue });
        }
        Ok(())
    };
    match l.len() {
        1 => {
            for k in 1..=axis_max(l[0], 0.0) {
                push(&mut modes, vec![k])?;
            }
        }
        _ => {
            let second = (PI / l[1]).powi(2);
            for k1 in 1..=axis_max(l[0], second) {
                let first = (PI * k1 as f64 / l[0]).powi(2);
                for k2 in 1..=axis_max(l[1], first) {
                    push(&mut modes, vec![k1, k2])?;
                }
            }
        }
    }
    modes.sort_by(|a, b| a.eigenvalue.total_cmp(&b.eigenvalue).then_with(|| a.index.cmp(&b.index)));
    Ok(modes)
}

/// Exact and asymptotic mode counts below `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeylEstimate {
    pub exact_count: usize,
    pub weyl_count: f64,
    pub relative_error: f64,
}

/// `vol(B_m) (2 pi)^-m vol(Ω) c^(m/2)` against the exact count.
pub fn weyl_estimate(dom: &RectangleDomain, c: f64) -> Result<WeylEstimate> {
    if !(c > 0.0) {
        return Err(Error::InvalidParameter(format!("eigenvalue bound must be positive, got {c}")));
    }
    let exact_count = enumerate_modes(dom, c)?.len();
    let ball = if dom.dim() == 1 { 2.0 } else { PI };
    let m = dom.dim() as i32;
    let weyl_count = ball / (2.0 * PI).powi(m) * dom.volume() * c.powf(m as f64 / 2.0);
    let relative_error = if exact_count == 0 {
        f64::INFINITY
    } else {
        (exact_count as f64 - weyl_count).abs() / exact_count as f64
    };
    Ok(WeylEstimate {
        exact_count,
        weyl_count,
        relative_error,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirichletPlan {
    pub cutoff: usize,
    pub mu: f64,
    pub contraction: f64,
    /// First eigenvalue above the head.
    pub next_eigenvalue: f64,
    pub lambda_cut: f64,
    pub modes: Vec<EigenMode>,
    pub tail_tol: f64,
    pub head_tol: f64,
    pub certified: bool,
    pub c_bound: f64,
}

impl DirichletPlan {
    pub fn mode_count(&self) -> usize {
        self.modes.len()
    }
}

#[derive(Clone, Debug, Default)]
pub struct DirichletOverrides {
    pub cutoff: Option<usize>,
    pub lambda_cut: Option<f64>,
    pub tail_tol: Option<f64>,
    pub head_tol: Option<f64>,
    pub allow_uncertified: bool,
    pub mode_cap: Option<usize>,
}

fn default_floor(dom: &RectangleDomain) -> f64 {
    let k = if dom.dim() == 1 { FLOOR_1D } else { FLOOR_2D };
    dom.lengths().iter().map(|l| (PI * k / l).powi(2)).sum()
}

pub fn dirichlet_plan(dom: &RectangleDomain, pot: &Potential, overrides: &DirichletOverrides) -> Result<DirichletPlan> {
    if pot.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            found: pot.dim(),
        });
    }
    let c = pot.c_bound();
    if !c.is_finite() {
        return Err(Error::Uncertified(format!("{}: curvature bound is infinite", pot.label())));
    }
    let certified = pot.certified();
    if !certified && !overrides.allow_uncertified {
        return Err(Error::Uncertified(format!("{}: bound {c} is a {}", pot.label(), pot.c_source())));
    }
    let cap = overrides.mode_cap.unwrap_or(DEFAULT_MODE_CAP);
    let base = if c > 0.0 { enumerate_modes_capped(dom, c, cap)?.len() } else { 0 };
    let cutoff = match overrides.cutoff {
        Some(n) if n < base => {
            return Err(Error::InvalidParameter(format!("cutoff {n} is below the certified value {base}")))
        }
        Some(n) => n,
        None => base,
    };
    // grow the search window until mode N + 1 exists
    let lambda_1 = dom.eigenvalue(&vec![1; dom.dim()]);
    let mut window = c.max(lambda_1) * 2.0;
    let head_and_next = loop {
        let modes = enumerate_modes_capped(dom, window, cap)?;
        if modes.len() > cutoff {
            break modes;
        }
        window *= 2.0;
    };
    let next_eigenvalue = head_and_next[cutoff].eigenvalue;
    let mu = 1.0 - c / next_eigenvalue;
    let lambda_cut = match overrides.lambda_cut {
        Some(l) => l,
        None => (4.0 * c.max(next_eigenvalue)).max(default_floor(dom)),
    };
    let modes = enumerate_modes_capped(dom, lambda_cut, cap)?;
    if modes.len() <= cutoff {
        return Err(Error::InvalidParameter(format!(
            "truncation {lambda_cut} keeps {} modes, not more than the cutoff {cutoff}",
            modes.len()
        )));
    }
    let tail_tol = overrides.tail_tol.unwrap_or(reduction::DEFAULT_TAIL_TOL);
    let head_tol = overrides.head_tol.unwrap_or(reduction::DEFAULT_HEAD_TOL);
    Ok(DirichletPlan {
        cutoff,
        mu,
        contraction: 1.0 - mu,
        next_eigenvalue,
        lambda_cut,
        modes,
        tail_tol,
        head_tol,
        certified,
        c_bound: c,
    })
}

/// Sampled sine tables along one axis.
#[derive(Clone, Debug)]
struct Axis {
    length: f64,
    points: usize,
    weight: f64,
    /// `sqrt(2/L) sin(k pi x_j / L)`, `K x P`
    sines: DMatrix<f64>,
    /// `(h / L) cos(a pi x_j / L)` for `a = 0..=2K`
    cosines: DMatrix<f64>,
    /// `int_0^L sqrt(2/L) sin(k pi x / L) dx`
    integrals: Vec<f64>,
    trivial: bool,
}

impl Axis {
    fn new(length: f64, kmax: usize) -> Self {
        let points = 2 * kmax + 1;
        let denom = (points + 1) as f64;
        let scale = (2.0 / length).sqrt();
        let sines = DMatrix::from_fn(kmax, points, |k, j| scale * (PI * ((k + 1) * (j + 1)) as f64 / denom).sin());
        let weight = length / denom;
        let cosines = DMatrix::from_fn(2 * kmax + 1, points, |a, j| {
            let r = (a * (j + 1)) % (2 * (points + 1));
            weight / length * (PI * r as f64 / denom).cos()
        });
        let integrals = (1..=kmax)
            .map(|k| if k % 2 == 1 { scale * 2.0 * length / (PI * k as f64) } else { 0.0 })
            .collect();
        Axis {
            length,
            points,
            weight,
            sines,
            cosines,
            integrals,
            trivial: false,
        }
    }

    fn trivial() -> Self {
        Axis {
            length: 1.0,
            points: 1,
            weight: 1.0,
            sines: DMatrix::from_element(1, 1, 1.0),
            cosines: DMatrix::from_element(1, 1, 1.0),
            integrals: vec![1.0],
            trivial: true,
        }
    }

    fn basis_at(&self, k: usize, x: f64) -> f64 {
        if self.trivial {
            1.0
        } else {
            (2.0 / self.length).sqrt() * (PI * k as f64 * x / self.length).sin()
        }
    }
}

/// Truncated Dirichlet problem; implements [`GalerkinSystem`].
#[derive(Clone, Debug)]
pub struct DirichletProblem {
    domain: RectangleDomain,
    potential: Arc<Potential>,
    modes: Vec<EigenMode>,
    /// Zero-based `(k1, k2)` per mode; `k2 = 0` on a 1D domain.
    slots: Vec<(usize, usize)>,
    head_len: usize,
    lambda_cut: f64,
    max_modes: usize,
    stiffness: Vec<f64>,
    axes: [Axis; 2],
    /// `int psi_k`
    mode_integrals: Vec<f64>,
    value_at_zero: f64,
    force_at_zero: f64,
}

impl DirichletProblem {
    pub fn new(dom: &RectangleDomain, pot: Arc<Potential>, modes: Vec<EigenMode>, cutoff: usize, lambda_cut: f64) -> Result<Self> {
        if pot.dim() != 1 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                found: pot.dim(),
            });
        }
        if modes.len() <= cutoff {
            return Err(Error::InvalidParameter("truncation must exceed the cutoff".into()));
        }
        let kmax = |i: usize| modes.iter().map(|m| m.index[i]).max().unwrap_or(1);
        let axes = if dom.dim() == 1 {
            [Axis::new(dom.lengths()[0], kmax(0)), Axis::trivial()]
        } else {
            [Axis::new(dom.lengths()[0], kmax(0)), Axis::new(dom.lengths()[1], kmax(1))]
        };
        let slots: Vec<(usize, usize)> = modes
            .iter()
            .map(|m| (m.index[0] - 1, m.index.get(1).map_or(0, |k| k - 1)))
            .collect();
        let mode_integrals = slots
            .iter()
            .map(|(a, b)| axes[0].integrals[*a] * axes[1].integrals[*b])
            .collect();
        let stiffness = modes.iter().map(|m| m.eigenvalue).collect();
        Ok(DirichletProblem {
            domain: dom.clone(),
            value_at_zero: pot.value(&[0.0]),
            force_at_zero: pot.gradient(&[0.0])[0],
            potential: pot,
            modes,
            slots,
            head_len: cutoff,
            lambda_cut,
            max_modes: MAX_FIELD_MODES,
            stiffness,
            axes,
            mode_integrals,
        })
    }

    pub fn from_plan(dom: &RectangleDomain, pot: Arc<Potential>, plan: &DirichletPlan) -> Result<Self> {
        let mut p = Self::new(dom, pot, plan.modes.clone(), plan.cutoff, plan.lambda_cut)?;
        p.max_modes = MAX_FIELD_MODES.max(plan.modes.len());
        Ok(p)
    }

    pub fn with_max_modes(mut self, max_modes: usize) -> Self {
        self.max_modes = max_modes;
        self
    }

    pub fn domain(&self) -> &RectangleDomain {
        &self.domain
    }

    pub fn modes(&self) -> &[EigenMode] {
        &self.modes
    }

    pub fn lambda_cut(&self) -> f64 {
        self.lambda_cut
    }

    fn coefficient_grid(&self, c: &[f64]) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.axes[0].sines.nrows(), self.axes[1].sines.nrows());
        for (v, (a, b)) in c.iter().zip(&self.slots) {
            g[(*a, *b)] = *v;
        }
        g
    }

    /// `φ` at the interior grid, `P1 x P2`.
    fn synthesize(&self, c: &[f64]) -> DMatrix<f64> {
        self.axes[0].sines.transpose() * self.coefficient_grid(c) * &self.axes[1].sines
    }

    fn analyze(&self, values: &DMatrix<f64>) -> Vec<f64> {
        let w = self.axes[0].weight * self.axes[1].weight;
        let g = &self.axes[0].sines * values * self.axes[1].sines.transpose();
        self.slots.iter().map(|(a, b)| w * g[(*a, *b)]).collect()
    }

    #[cfg(test)]
    fn node(&self, axis: usize, j: usize) -> f64 {
        (j + 1) as f64 * self.axes[axis].weight
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        (self.axes[0].points, self.axes[1].points)
    }

    /// `[V'(φ)]_k`
    pub fn force_coeffs(&self, c: &[f64]) -> Vec<f64> {
        let phi = self.synthesize(c);
        let f0 = self.force_at_zero;
        let excess = phi.map(|v| self.potential.gradient(&[v])[0] - f0);
        let mut g = self.analyze(&excess);
        for (gi, s) in g.iter_mut().zip(&self.mode_integrals) {
            *gi += f0 * s;
        }
        g
    }

    /// `φ(x)` from coefficients.
    pub fn field_at(&self, c: &[f64], x: &[f64]) -> f64 {
        c.iter()
            .zip(&self.modes)
            .map(|(v, m)| {
                let mut b = v * self.axes[0].basis_at(m.index[0], x[0]);
                if let Some(k2) = m.index.get(1) {
                    b *= self.axes[1].basis_at(*k2, x[1]);
                }
                b
            })
            .sum()
    }

    /// Field on a uniform grid including the boundary: rows of `(x, φ)`.
    pub fn sample_field(&self, c: &[f64], per_axis: usize) -> Vec<(Vec<f64>, f64)> {
        let n = per_axis.max(2);
        let lengths = self.domain.lengths();
        let coord = |i: usize, j: usize| lengths[i] * j as f64 / (n - 1) as f64;
        let mut out = Vec::new();
        if self.domain.dim() == 1 {
            for j in 0..n {
                let x = vec![coord(0, j)];
                let v = self.field_at(c, &x);
                out.push((x, v));
            }
        } else {
            for j1 in 0..n {
                for j2 in 0..n {
                    let x = vec![coord(0, j1), coord(1, j2)];
                    let v = self.field_at(c, &x);
                    out.push((x, v));
                }
            }
        }
        out
    }

    #[cfg(test)]
    fn grid_nodes(&self) -> Vec<Vec<f64>> {
        let (p1, p2) = self.grid_shape();
        let mut out = Vec::new();
        for j1 in 0..p1 {
            for j2 in 0..p2 {
                let mut x = vec![self.node(0, j1)];
                if self.domain.dim() == 2 {
                    x.push(self.node(1, j2));
                }
                out.push(x);
            }
        }
        out
    }
}

impl GalerkinSystem for DirichletProblem {
    fn len(&self) -> usize {
        self.modes.len()
    }

    fn head_len(&self) -> usize {
        self.head_len
    }

    fn stiffness(&self) -> &[f64] {
        &self.stiffness
    }

    fn residual(&self, c: &[f64]) -> Vec<f64> {
        let g = self.force_coeffs(c);
        c.iter().zip(&self.stiffness).zip(g).map(|((c, w), g)| w * c - g).collect()
    }

    fn hessian(&self, c: &[f64]) -> DMatrix<f64> {
        let phi = self.synthesize(c);
        let w = phi.map(|v| self.potential.hessian(&[v])[(0, 0)]);
        let total = self.len();
        let mut h = DMatrix::zeros(total, total);
        if w.iter().any(|v| *v != 0.0) {
            let mom = &self.axes[0].cosines * w * self.axes[1].cosines.transpose();
            let two_d = !self.axes[1].trivial;
            for (r, (a1, a2)) in self.slots.iter().enumerate() {
                for (s, (b1, b2)) in self.slots.iter().enumerate().skip(r) {
                    let (d1, s1) = (a1.abs_diff(*b1), a1 + b1 + 2);
                    let v = if two_d {
                        let (d2, s2) = (a2.abs_diff(*b2), a2 + b2 + 2);
                        mom[(d1, d2)] - mom[(d1, s2)] - mom[(s1, d2)] + mom[(s1, s2)]
                    } else {
                        mom[(d1, 0)] - mom[(s1, 0)]
                    };
                    h[(r, s)] = -v;
                    h[(s, r)] = -v;
                }
            }
        }
        for (i, w) in self.stiffness.iter().enumerate() {
            h[(i, i)] += w;
        }
        h
    }

    fn action(&self, c: &[f64]) -> f64 {
        let kinetic = 0.5 * c.iter().zip(&self.stiffness).map(|(c, w)| w * c * c).sum::<f64>();
        let phi = self.synthesize(c);
        let (v0, f0) = (self.value_at_zero, self.force_at_zero);
        let remainder: f64 = phi.iter().map(|v| self.potential.value(&[*v]) - v0 - f0 * v).sum();
        let linear: f64 = c.iter().zip(&self.mode_integrals).map(|(a, b)| a * b).sum();
        let weight = self.axes[0].weight * self.axes[1].weight;
        kinetic - (v0 * self.domain.volume() + f0 * linear + weight * remainder)
    }

    /// Doubles the mode count: `lambda_cut` grows by 4 in 1D and by 2 in 2D.
    fn refined(&self) -> Result<Option<Self>> {
        let factor = if self.domain.dim() == 1 { 4.0 } else { 2.0 };
        let lambda_cut = self.lambda_cut * factor;
        let modes = enumerate_modes_capped(&self.domain, lambda_cut, self.max_modes).ok();
        match modes {
            Some(modes) if modes.len() > self.len() => {
                let mut p = Self::new(&self.domain, self.potential.clone(), modes, self.head_len, lambda_cut)?;
                p.max_modes = self.max_modes;
                Ok(Some(p))
            }
            _ => Ok(None),
        }
    }
}

/// Reduced multistart solve for a Dirichlet problem.
pub fn solve_dirichlet(
    dom: &RectangleDomain,
    pot: Arc<Potential>,
    plan: &DirichletPlan,
    seeds: &Seeds,
    opts: &ReducedOptions,
) -> Result<ReducedRun> {
    let sys = DirichletProblem::from_plan(dom, pot, plan)?;
    let seeds = match seeds {
        Seeds::Explicit(list) => list.clone(),
        Seeds::Multistart(m) => reduction::multistart_seeds(plan.cutoff, m.count, m.radius.unwrap_or(2.0), m.seed),
    };
    reduction::solve_system(&sys, &seeds, opts, plan.certified)
}

pub fn reduced_options(plan: &DirichletPlan) -> ReducedOptions {
    let mut opts = ReducedOptions {
        head_tol: plan.head_tol,
        ..Default::default()
    };
    opts.tail.tol = plan.tail_tol;
    opts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fourier::BoundaryProblem;
    use crate::morse;
    use crate::potential::Family;
    use crate::reduction::{cutoff_for, MechanicalSystem, Multistart};
    use crate::functional::HessianBlocks;
    use proptest::prelude::*;

    fn scalar(src: &str, c: f64) -> Arc<Potential> {
        Arc::new(Potential::parse(src, 1, Some(c)).unwrap())
    }

    #[test]
    fn mode_examples() {
        let line = RectangleDomain::interval(PI).unwrap();
        let m = enumerate_modes(&line, 5.0).unwrap();
        assert_eq!(m.iter().map(|m| m.index[0]).collect::<Vec<_>>(), vec![1, 2]);
        assert!((m[1].eigenvalue - 4.0).abs() < 1e-12);

        let sq = RectangleDomain::unit_square();
        let m = enumerate_modes(&sq, 3.0 * PI * PI).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].index, vec![1, 1]);

        let m = enumerate_modes(&sq, 1000.0).unwrap();
        let mut brute = 0;
        for a in 1..100 {
            for b in 1..100 {
                if PI * PI * ((a * a + b * b) as f64) <= 1000.0 {
                    brute += 1;
                }
            }
        }
        assert_eq!(m.len(), brute);
        for w in m.windows(2) {
            assert!(w[0].eigenvalue < w[1].eigenvalue || (w[0].eigenvalue == w[1].eigenvalue && w[0].index < w[1].index));
        }
        assert!(matches!(enumerate_modes_capped(&sq, 1e5, 100), Err(Error::ModeCap { .. })));
    }

    #[test]
    fn plan_examples() {
        let line = RectangleDomain::interval(PI).unwrap();
        let p = dirichlet_plan(&line, &scalar("-2.5*q1^2", 5.0), &DirichletOverrides::default()).unwrap();
        assert_eq!(p.cutoff, 2);
        assert!((p.mu - 4.0 / 9.0).abs() < 1e-15);
        assert_eq!(p.mode_count(), 32);

        let p = dirichlet_plan(&line, &scalar("0.25*q1^2", 0.5), &DirichletOverrides::default()).unwrap();
        assert_eq!(p.cutoff, 0);
        assert!((p.mu - 0.5).abs() < 1e-15);
    }

    #[test]
    fn interval_cutoff_matches_mechanical() {
        for i in 0..15 {
            for j in 0..15 {
                let c = 0.1 + 7.0 * i as f64;
                let t = 0.2 + 0.7 * j as f64;
                let dom = RectangleDomain::interval(t).unwrap();
                let pot = Potential::builtin(Family::Harmonic, 1, &[c.sqrt()]).unwrap();
                let p = dirichlet_plan(&dom, &pot, &DirichletOverrides::default()).unwrap();
                let c = pot.c_bound();
                assert_eq!(p.cutoff, cutoff_for(c, t), "C={c} T={t}");
                let mech = reduction::monotonicity_constant(c, t, p.cutoff);
                assert!((p.mu - mech).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weyl_examples() {
        let line = RectangleDomain::interval(2.0).unwrap();
        let w = weyl_estimate(&line, 50.0).unwrap();
        assert!((w.weyl_count - 2.0 * 50f64.sqrt() / PI).abs() < 1e-12);

        let sq = RectangleDomain::unit_square();
        let w3 = weyl_estimate(&sq, 1000.0).unwrap();
        assert!((w3.weyl_count - 1000.0 / (4.0 * PI)).abs() < 1e-12);
        assert!(w3.relative_error <= 0.15);
        let w2 = weyl_estimate(&sq, 100.0).unwrap();
        let w4 = weyl_estimate(&sq, 1e4).unwrap();
        assert!(w4.relative_error < w3.relative_error && w3.relative_error < w2.relative_error);
    }

    #[test]
    fn matches_mechanical_system_on_interval() {
        let t = 2.7;
        let pot = Arc::new(Potential::builtin(Family::Pendulum, 1, &[1.4]).unwrap());
        let dom = RectangleDomain::interval(t).unwrap();
        let modes = enumerate_modes(&dom, (PI * 24.0 / t).powi(2) * 1.0001).unwrap();
        assert_eq!(modes.len(), 24);
        let field = DirichletProblem::new(&dom, pot.clone(), modes, 1, 0.0).unwrap();
        let bp = BoundaryProblem::with_shared(pot, t, vec![0.0], vec![0.0]).unwrap();
        let mech = MechanicalSystem::new(&bp, 1, 24).unwrap();
        let c: Vec<f64> = (0..24).map(|k| 0.6 / (1.0 + k as f64).powi(2) * if k % 3 == 0 { -1.0 } else { 1.0 }).collect();
        let (r1, r2) = (field.residual(&c), mech.residual(&c));
        for (a, b) in r1.iter().zip(&r2) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!((field.action(&c) - mech.action(&c)).abs() < 1e-12);
        assert!((field.hessian(&c) - mech.hessian(&c)).abs().max() < 1e-12);
    }

    #[test]
    fn finite_differences_in_two_dimensions() {
        let dom = RectangleDomain::new(vec![1.0, 1.5]).unwrap();
        let pot = scalar("-cos(q1) + 0.3*sin(2*q1)", 2.2);
        let modes = enumerate_modes(&dom, 250.0).unwrap();
        let n = modes.len();
        let sys = DirichletProblem::new(&dom, pot, modes, 2, 250.0).unwrap();
        let c: Vec<f64> = (0..n).map(|i| 0.4 * ((i as f64) * 1.3).sin() / (1.0 + i as f64)).collect();
        let r = sys.residual(&c);
        let h = sys.hessian(&c);
        let eps = 1e-5;
        for i in [0, 1, n / 2, n - 1] {
            let mut cp = c.clone();
            let mut cm = c.clone();
            cp[i] += eps;
            cm[i] -= eps;
            let fd = (sys.action(&cp) - sys.action(&cm)) / (2.0 * eps);
            assert!((fd - r[i]).abs() < 1e-7 * (1.0 + r[i].abs()), "grad {i}: {fd} vs {}", r[i]);
            let (rp, rm) = (sys.residual(&cp), sys.residual(&cm));
            for j in 0..n {
                let fd = (rp[j] - rm[j]) / (2.0 * eps);
                assert!((fd - h[(j, i)]).abs() < 1e-6 * (1.0 + h[(j, i)].abs()), "hess ({j},{i})");
            }
        }
    }

    #[test]
    fn grid_force_against_direct_quadrature() {
        // oracle: direct grid sum of V'(φ) psi_k without separable transforms
        let dom = RectangleDomain::new(vec![1.2, 0.8]).unwrap();
        let pot = scalar("exp(0.3*q1) - q1^2 + 0.1*q1^3", 10.0);
        let modes = enumerate_modes(&dom, 400.0).unwrap();
        let n = modes.len();
        let sys = DirichletProblem::new(&dom, pot.clone(), modes.clone(), 0, 400.0).unwrap();
        let c: Vec<f64> = (0..n).map(|i| 0.3 / (1.0 + i as f64)).collect();
        let g = sys.force_coeffs(&c);
        let (p1, p2) = sys.grid_shape();
        let w = 1.2 / (p1 + 1) as f64 * 0.8 / (p2 + 1) as f64;
        let f0 = pot.gradient(&[0.0])[0];
        for (k, m) in modes.iter().enumerate() {
            let mut acc = 0.0;
            for x in sys.grid_nodes() {
                let phi = sys.field_at(&c, &x);
                let psi = sys.field_at(&(0..n).map(|i| if i == k { 1.0 } else { 0.0 }).collect::<Vec<_>>(), &x);
                acc += w * (pot.gradient(&[phi])[0] - f0) * psi;
            }
            let exact_const = f0 * (2.0 / 1.2f64).sqrt() * (2.0 / 0.8f64).sqrt()
                * if m.index[0] % 2 == 1 { 2.0 * 1.2 / (PI * m.index[0] as f64) } else { 0.0 }
                * if m.index[1] % 2 == 1 { 2.0 * 0.8 / (PI * m.index[1] as f64) } else { 0.0 };
            assert!((g[k] - acc - exact_const).abs() < 1e-11, "mode {k}");
        }
    }

    #[test]
    fn zero_potential_gives_zero_field() {
        let sq = RectangleDomain::unit_square();
        let pot = Arc::new(Potential::builtin(Family::Zero, 1, &[]).unwrap());
        let plan = dirichlet_plan(&sq, &pot, &DirichletOverrides::default()).unwrap();
        assert_eq!(plan.cutoff, 0);
        let run = solve_dirichlet(&sq, pot, &plan, &Seeds::Multistart(Multistart::default()), &reduced_options(&plan)).unwrap();
        assert_eq!(run.solutions.len(), 1);
        assert!(run.solutions[0].coeffs.iter().all(|v| *v == 0.0));
        assert_eq!(run.solutions[0].index, 0);
    }

    #[test]
    fn linear_source_closed_form() {
        let l = 1.0;
        let a = 1.0;
        let dom = RectangleDomain::interval(l).unwrap();
        let pot = scalar("q1", 0.0);
        let over = DirichletOverrides {
            lambda_cut: Some((PI * 600.0 / l).powi(2) * 1.0001),
            ..Default::default()
        };
        let plan = dirichlet_plan(&dom, &pot, &over).unwrap();
        let mut opts = reduced_options(&plan);
        opts.refine = false;
        let run = solve_dirichlet(&dom, pot.clone(), &plan, &Seeds::Explicit(vec![vec![]]), &opts).unwrap();
        assert_eq!(run.solutions.len(), 1);
        let sys = DirichletProblem::from_plan(&dom, pot, &plan).unwrap();
        for (x, v) in sys.sample_field(&run.solutions[0].coeffs, 401) {
            let exact = a * x[0] * (l - x[0]) / 2.0;
            assert!((v - exact).abs() < 1e-6, "x={}: {v} vs {exact}", x[0]);
        }
    }

    #[test]
    fn quadratic_between_first_eigenvalues_has_index_one() {
        let dom = RectangleDomain::interval(PI).unwrap();
        // s = 2.5 lies in (lambda_1, lambda_2) = (1, 4)
        let pot = scalar("1.25*q1^2", 2.5);
        let plan = dirichlet_plan(&dom, &pot, &DirichletOverrides::default()).unwrap();
        assert_eq!(plan.cutoff, 1);
        let run = solve_dirichlet(&dom, pot, &plan, &Seeds::Multistart(Multistart::default()), &reduced_options(&plan)).unwrap();
        assert_eq!(run.solutions.len(), 1);
        let s = &run.solutions[0];
        assert!(s.coeffs.iter().all(|v| v.abs() < 1e-12));
        assert_eq!((s.index, s.nullity), (1, 0));
        assert_eq!(s.oracle_index, Some(1));
    }

    #[test]
    fn square_nonlinear_solutions_are_consistent() {
        let sq = RectangleDomain::unit_square();
        // C = 25 > lambda_11 = 2 pi^2
        let pot = Arc::new(Potential::parse("-25*cos(q1)", 1, Some(25.0)).unwrap());
        let plan = dirichlet_plan(&sq, &pot, &DirichletOverrides::default()).unwrap();
        assert_eq!(plan.cutoff, 1);
        let mut opts = reduced_options(&plan);
        opts.refine = false;
        let seeds = Seeds::Multistart(Multistart {
            count: 12,
            ..Default::default()
        });
        let run = solve_dirichlet(&sq, pot.clone(), &plan, &seeds, &opts).unwrap();
        assert!(!run.solutions.is_empty());
        let sys = DirichletProblem::from_plan(&sq, pot, &plan).unwrap();
        for s in &run.solutions {
            assert!(s.index <= plan.cutoff);
            let blocks = HessianBlocks::from_full(&sys.hessian(&s.coeffs), plan.cutoff, sys.stiffness().to_vec());
            let (schur, full) = (morse::index_schur(&blocks).unwrap(), morse::index_full(&blocks));
            assert_eq!((schur.index, schur.nullity), (full.index, full.nullity));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn tail_monotone(
            g in 1.0f64..60.0,
            wide in any::<bool>(),
            raw in proptest::collection::vec(-1.0f64..1.0, 600),
        ) {
            let dom = if wide { RectangleDomain::new(vec![1.0, 1.3]).unwrap() } else { RectangleDomain::interval(2.0).unwrap() };
            let pot = Potential::builtin(Family::Pendulum, 1, &[g]).unwrap();
            let plan = dirichlet_plan(&dom, &pot, &DirichletOverrides::default()).unwrap();
            let sys = DirichletProblem::from_plan(&dom, Arc::new(pot), &plan).unwrap();
            let h = sys.head_len();
            let n = sys.len();
            let st = sys.stiffness().to_vec();
            let pick = |i: usize| raw[i % raw.len()];
            let u: Vec<f64> = (0..h).map(pick).collect();
            let v1: Vec<f64> = (h..n).map(|i| pick(n + i) / st[i].sqrt()).collect();
            let v2: Vec<f64> = (h..n).map(|i| pick(2 * n + i + 7) / st[i].sqrt()).collect();
            let cat = |v: &[f64]| [u.as_slice(), v].concat();
            let (r1, r2) = (sys.residual(&cat(&v1)), sys.residual(&cat(&v2)));
            let mut pairing = 0.0;
            let mut norm_sq = 0.0;
            for i in h..n {
                let dv = v2[i - h] - v1[i - h];
                pairing += (r2[i] - r1[i]) * dv;
                norm_sq += st[i] * dv * dv;
            }
            prop_assert!(pairing >= plan.mu * norm_sq - 1e-9);
        }
    }
}
