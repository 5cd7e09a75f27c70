//! The action functional on sine coefficients: value, Euler–Lagrange residual
//! and Hessian.
//!
//! All integrals of `V`, `V'`, `V''` along `gamma = drift + c` use the sine
//! grid after subtracting the same quantity evaluated along the drift `s(t)`;
//! the drift-only integrals are done once with composite Gauss–Legendre. The
//! grid remainder vanishes at both endpoints, so the collocation sums keep
//! their high order even though `V'(gamma)` does not vanish there. Value,
//! residual and Hessian are the exact derivatives of one another at the
//! discrete level.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::fourier::{stiffness, BoundaryProblem, SineGrid, SinePath};
use crate::quadrature;

/// Coefficient convention of a Hessian matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    /// Entries `<phi_k, d²L phi_l>` with L²-orthonormal `phi_k`.
    L2Coeff,
    /// Entries in the H¹₀-orthonormal basis `phi_k / sqrt(lambda_k)`.
    H1Coeff,
}

/// `d²L` split at the cutoff: `[[A, B], [Bᵀ, D]]`.
#[derive(Clone, Debug)]
pub struct HessianBlocks {
    /// Number of head coefficients (`n N` for paths, `N` for fields).
    pub head_len: usize,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub metric: Metric,
    /// `lambda` of each coefficient, used for metric changes.
    pub stiffness: Vec<f64>,
}

impl HessianBlocks {
    pub fn from_full(full: &DMatrix<f64>, head_len: usize, stiffness: Vec<f64>) -> Self {
        let total = full.nrows();
        let tail_len = total - head_len;
        HessianBlocks {
            head_len,
            a: full.view((0, 0), (head_len, head_len)).into_owned(),
            b: full.view((0, head_len), (head_len, tail_len)).into_owned(),
            d: full.view((head_len, head_len), (tail_len, tail_len)).into_owned(),
            metric: Metric::L2Coeff,
            stiffness,
        }
    }

    pub fn len(&self) -> usize {
        self.head_len + self.d.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn full(&self) -> DMatrix<f64> {
        let h = self.head_len;
        let total = self.len();
        let mut m = DMatrix::zeros(total, total);
        m.view_mut((0, 0), (h, h)).copy_from(&self.a);
        m.view_mut((0, h), (h, total - h)).copy_from(&self.b);
        m.view_mut((h, 0), (total - h, h)).copy_from(&self.b.transpose());
        m.view_mut((h, h), (total - h, total - h)).copy_from(&self.d);
        m
    }

    /// The same bilinear form in another coefficient convention (a congruence
    /// by a positive diagonal matrix).
    pub fn to_metric(&self, metric: Metric) -> HessianBlocks {
        if metric == self.metric {
            return self.clone();
        }
        let scale: Vec<f64> = self
            .stiffness
            .iter()
            .map(|w| match metric {
                Metric::H1Coeff => 1.0 / w.sqrt(),
                Metric::L2Coeff => w.sqrt(),
            })
            .collect();
        let mut full = self.full();
        for i in 0..full.nrows() {
            for j in 0..full.ncols() {
                full[(i, j)] *= scale[i] * scale[j];
            }
        }
        let mut out = HessianBlocks::from_full(&full, self.head_len, self.stiffness.clone());
        out.metric = metric;
        out
    }
}

/// Discretized action functional for a fixed truncation and grid.
#[derive(Clone, Debug)]
pub struct ActionFunctional {
    bp: BoundaryProblem,
    n: usize,
    modes: usize,
    grid: SineGrid,
    stiffness: Vec<f64>,
    /// `s(t_j)`, `V'(s(t_j))`, `V(s(t_j))`
    drift_nodes: Vec<f64>,
    drift_force: Vec<f64>,
    drift_energy_nodes: Vec<f64>,
    /// `int V'(s) phi_k dt`, mode-major
    drift_force_coeffs: Vec<f64>,
    /// `int V(s) dt`
    drift_energy: f64,
    /// `|q_T - q_0|^2 / (2T)`
    drift_kinetic: f64,
}

impl ActionFunctional {
    /// Truncation at `modes` with the default grid `P = 2M + 1`.
    pub fn new(bp: &BoundaryProblem, modes: usize) -> Result<Self> {
        Self::with_points(bp, modes, 2 * modes + 1)
    }

    pub fn with_points(bp: &BoundaryProblem, modes: usize, points: usize) -> Result<Self> {
        if modes == 0 {
            return Err(Error::InvalidParameter("at least one mode is required".into()));
        }
        let n = bp.dim();
        let horizon = bp.horizon;
        let grid = SineGrid::new(horizon, modes, points)?;
        let pot = &bp.potential;

        let mut drift_nodes = Vec::with_capacity(points * n);
        let mut drift_force = vec![0.0; points * n];
        let mut drift_energy_nodes = Vec::with_capacity(points);
        for j in 0..points {
            let s = bp.drift(grid.node(j));
            pot.gradient_into(&s, &mut drift_force[j * n..(j + 1) * n]);
            drift_energy_nodes.push(pot.value(&s));
            drift_nodes.extend(s);
        }

        let (nodes, weights) = quadrature::composite(0.0, horizon, modes + 8, 12);
        let mut drift_force_coeffs = vec![0.0; modes * n];
        let mut drift_energy = 0.0;
        let mut force = vec![0.0; n];
        let scale = (2.0 / horizon).sqrt();
        for (t, w) in nodes.iter().zip(&weights) {
            let s = bp.drift(*t);
            drift_energy += w * pot.value(&s);
            pot.gradient_into(&s, &mut force);
            let theta = std::f64::consts::PI * t / horizon;
            for k in 1..=modes {
                let phi = scale * (k as f64 * theta).sin();
                for i in 0..n {
                    drift_force_coeffs[(k - 1) * n + i] += w * force[i] * phi;
                }
            }
        }

        let drift_kinetic = bp.velocity().iter().map(|v| v * v).sum::<f64>() * horizon / 2.0;

        Ok(ActionFunctional {
            bp: bp.clone(),
            n,
            modes,
            stiffness: stiffness(n, horizon, modes),
            grid,
            drift_nodes,
            drift_force,
            drift_energy_nodes,
            drift_force_coeffs,
            drift_energy,
            drift_kinetic,
        })
    }

    pub fn problem(&self) -> &BoundaryProblem {
        &self.bp
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn components(&self) -> usize {
        self.n
    }

    pub fn points(&self) -> usize {
        self.grid.points()
    }

    /// Number of stored coefficients, `n M`.
    pub fn len(&self) -> usize {
        self.n * self.modes
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stiffness(&self) -> &[f64] {
        &self.stiffness
    }

    fn gamma_nodes(&self, c: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.points() * self.n];
        self.grid.synthesize(self.n, c, &mut out);
        for (o, s) in out.iter_mut().zip(&self.drift_nodes) {
            *o += s;
        }
        out
    }

    /// Sine coefficients of `t -> V'(gamma(t))`.
    pub fn force_coeffs(&self, c: &[f64]) -> Vec<f64> {
        debug_assert_eq!(c.len(), self.len());
        let n = self.n;
        let gamma = self.gamma_nodes(c);
        let mut excess = vec![0.0; gamma.len()];
        for j in 0..self.grid.points() {
            let slot = j * n..(j + 1) * n;
            self.bp
                .potential
                .gradient_into(&gamma[slot.clone()], &mut excess[slot.clone()]);
            for i in slot {
                excess[i] -= self.drift_force[i];
            }
        }
        let mut g = vec![0.0; self.len()];
        self.grid.analyze(n, &excess, self.modes, &mut g);
        for (gi, si) in g.iter_mut().zip(&self.drift_force_coeffs) {
            *gi += si;
        }
        g
    }

    /// Euler–Lagrange residual in L² coefficients:
    /// `r_k = (pi k / T)^2 c_k - [V'(gamma)]_k`.
    pub fn residual(&self, c: &[f64]) -> Vec<f64> {
        let g = self.force_coeffs(c);
        c.iter()
            .zip(&self.stiffness)
            .zip(g)
            .map(|((c, w), g)| w * c - g)
            .collect()
    }

    pub fn action(&self, c: &[f64]) -> f64 {
        debug_assert_eq!(c.len(), self.len());
        let n = self.n;
        let kinetic: f64 = self.drift_kinetic
            + 0.5
                * c.iter()
                    .zip(&self.stiffness)
                    .map(|(c, w)| w * c * c)
                    .sum::<f64>();
        let gamma = self.gamma_nodes(c);
        let mut remainder = 0.0;
        for j in 0..self.grid.points() {
            let g = &gamma[j * n..(j + 1) * n];
            let s = &self.drift_nodes[j * n..(j + 1) * n];
            let f = &self.drift_force[j * n..(j + 1) * n];
            let linear: f64 = (0..n).map(|i| f[i] * (g[i] - s[i])).sum();
            remainder += self.bp.potential.value(g) - self.drift_energy_nodes[j] - linear;
        }
        let linear_exact: f64 = c.iter().zip(&self.drift_force_coeffs).map(|(a, b)| a * b).sum();
        let potential = self.drift_energy + linear_exact + self.grid.weight() * remainder;
        kinetic - potential
    }

    /// Full `nM x nM` Hessian in L² coefficients.
    pub fn hessian(&self, c: &[f64]) -> DMatrix<f64> {
        let n = self.n;
        let p = self.grid.points();
        let gamma = self.gamma_nodes(c);
        let mut hess_nodes = vec![0.0; p * n * n];
        for j in 0..p {
            self.bp
                .potential
                .hessian_into(&gamma[j * n..(j + 1) * n], &mut hess_nodes[j * n * n..(j + 1) * n * n]);
        }
        let total = self.len();
        let mut h = DMatrix::zeros(total, total);
        let mut w = vec![0.0; p];
        for a in 0..n {
            for b in a..n {
                for j in 0..p {
                    w[j] = hess_nodes[j * n * n + a * n + b];
                }
                if w.iter().all(|v| *v == 0.0) {
                    continue;
                }
                let mom = self.grid.cosine_moments(&w);
                for k in 1..=self.modes {
                    for l in 1..=self.modes {
                        let v = mom[k.abs_diff(l)] - mom[k + l];
                        let (r, s) = ((k - 1) * n + a, (l - 1) * n + b);
                        h[(r, s)] = -v;
                        h[(s, r)] = -v;
                    }
                }
            }
        }
        for (i, w) in self.stiffness.iter().enumerate() {
            h[(i, i)] += w;
        }
        h
    }

    pub fn path(&self, c: Vec<f64>) -> SinePath {
        SinePath::from_coeffs(self.n, self.bp.horizon, c).expect("coefficient length checked")
    }
}

fn functional_for(bp: &BoundaryProblem, c: &SinePath) -> Result<ActionFunctional> {
    bp.check_path(c)?;
    ActionFunctional::new(bp, c.modes())
}

/// `int (1/2 |gamma'|^2 - V(gamma)) dt` with `gamma = iota(c)`.
pub fn action_value(bp: &BoundaryProblem, c: &SinePath) -> Result<f64> {
    Ok(functional_for(bp, c)?.action(c.coeffs()))
}

/// Euler–Lagrange residual in L² coefficients; zero exactly at stationary paths.
pub fn gradient(bp: &BoundaryProblem, c: &SinePath) -> Result<SinePath> {
    let f = functional_for(bp, c)?;
    Ok(f.path(f.residual(c.coeffs())))
}

/// Riesz representative of `dL(c)` in H¹₀: mode `k` of [`gradient`] divided by `(pi k/T)^2`.
pub fn riesz_gradient(bp: &BoundaryProblem, c: &SinePath) -> Result<SinePath> {
    let r = gradient(bp, c)?;
    let w = r.stiffness();
    let coeffs = r.coeffs().iter().zip(&w).map(|(r, w)| r / w).collect();
    SinePath::from_coeffs(r.components(), r.horizon(), coeffs)
}

/// `d²L(c)` in L² coefficients, split at mode `cutoff`.
pub fn hessian_blocks(bp: &BoundaryProblem, c: &SinePath, cutoff: usize) -> Result<HessianBlocks> {
    if cutoff > c.modes() {
        return Err(Error::OutOfRange(format!(
            "cutoff {cutoff} exceeds {} stored modes",
            c.modes()
        )));
    }
    let f = functional_for(bp, c)?;
    let full = f.hessian(c.coeffs());
    Ok(HessianBlocks::from_full(&full, cutoff * bp.dim(), f.stiffness().to_vec()))
}

/// Largest change of the residual (L² coefficients) when the grid is doubled.
pub fn quadrature_drift(bp: &BoundaryProblem, c: &SinePath) -> Result<f64> {
    bp.check_path(c)?;
    let m = c.modes();
    let coarse = ActionFunctional::with_points(bp, m, 2 * m + 1)?.residual(c.coeffs());
    let fine = ActionFunctional::with_points(bp, m, 4 * m + 3)?.residual(c.coeffs());
    Ok(coarse
        .iter()
        .zip(&fine)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}
