//! Sine-basis representation of paths in `H^1_0([0, T], R^n)`.
//!
//! A path is `c(t) = sum_k c^(k) phi_k(t)` with the L²-orthonormal functions
//! `phi_k(t) = sqrt(2/T) sin(k pi t / T)`. Coefficients are stored mode-major:
//! entry `(k - 1) * n + j` holds component `j` of mode `k`.
//!
//! Grid convention (type-I sine transform): `t_j = j T / (P + 1)`, `j = 1..P`,
//! with quadrature weight `h = T / (P + 1)`. The sampled basis satisfies
//! `h sum_j phi_k(t_j) phi_l(t_j) = delta_kl` for `1 <= k, l <= P`, so analysis is
//! exact for band-limited data whenever `P >= M`. The default `P = 2M + 1` also
//! keeps products of two band-limited paths alias-free.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::potential::Potential;

#[derive(Clone, Debug, PartialEq)]
pub struct SinePath {
    n: usize,
    horizon: f64,
    coeffs: Vec<f64>,
}

impl SinePath {
    pub fn zeros(n: usize, horizon: f64, modes: usize) -> Self {
        SinePath {
            n,
            horizon,
            coeffs: vec![0.0; n * modes],
        }
    }

    pub fn from_coeffs(n: usize, horizon: f64, coeffs: Vec<f64>) -> Result<Self> {
        if n == 0 || coeffs.len() % n != 0 {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: coeffs.len(),
            });
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidParameter(format!("horizon must be positive, got {horizon}")));
        }
        Ok(SinePath { n, horizon, coeffs })
    }

    pub fn components(&self) -> usize {
        self.n
    }

    pub fn modes(&self) -> usize {
        self.coeffs.len() / self.n
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    /// Coefficient of mode `k >= 1`, component `j`.
    pub fn coeff(&self, k: usize, j: usize) -> f64 {
        self.coeffs[(k - 1) * self.n + j]
    }

    pub fn set_coeff(&mut self, k: usize, j: usize, value: f64) {
        self.coeffs[(k - 1) * self.n + j] = value;
    }

    /// `(pi k / T)^2` for the mode owning each stored coefficient.
    pub fn stiffness(&self) -> Vec<f64> {
        stiffness(self.n, self.horizon, self.modes())
    }

    /// `c(t)`, valid for any real `t`.
    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        let scale = (2.0 / self.horizon).sqrt();
        for k in 1..=self.modes() {
            let s = scale * (k as f64 * PI * t / self.horizon).sin();
            for (j, o) in out.iter_mut().enumerate() {
                *o += self.coeff(k, j) * s;
            }
        }
        out
    }

    pub fn l2_norm_sq(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum()
    }

    pub fn h1_norm_sq(&self) -> f64 {
        self.h1_inner(self)
    }

    pub fn h1_inner(&self, other: &SinePath) -> f64 {
        assert_eq!(self.coeffs.len(), other.coeffs.len());
        self.stiffness()
            .iter()
            .zip(self.coeffs.iter().zip(&other.coeffs))
            .map(|(w, (a, b))| w * a * b)
            .sum()
    }

    fn check_cut(&self, cutoff: usize) -> Result<()> {
        if cutoff > self.modes() {
            return Err(Error::OutOfRange(format!(
                "cutoff {cutoff} exceeds {} stored modes",
                self.modes()
            )));
        }
        Ok(())
    }

    /// Keeps modes `1..=cutoff`.
    pub fn project_head(&self, cutoff: usize) -> Result<SinePath> {
        self.check_cut(cutoff)?;
        let mut out = self.clone();
        out.coeffs[cutoff * self.n..].fill(0.0);
        Ok(out)
    }

    /// Keeps modes `cutoff+1..=M`.
    pub fn project_tail(&self, cutoff: usize) -> Result<SinePath> {
        self.check_cut(cutoff)?;
        let mut out = self.clone();
        out.coeffs[..cutoff * self.n].fill(0.0);
        Ok(out)
    }

    /// Zero-pads or truncates to `modes` modes.
    pub fn resized(&self, modes: usize) -> SinePath {
        let mut coeffs = self.coeffs.clone();
        coeffs.resize(modes * self.n, 0.0);
        SinePath {
            n: self.n,
            horizon: self.horizon,
            coeffs,
        }
    }
}

pub(crate) fn stiffness(n: usize, horizon: f64, modes: usize) -> Vec<f64> {
    let mut w = Vec::with_capacity(n * modes);
    for k in 1..=modes {
        let freq = PI * k as f64 / horizon;
        w.extend(std::iter::repeat_n(freq * freq, n));
    }
    w
}

/// Fixed-endpoint problem for `L = 1/2 |q'|^2 - V(q)` on `[0, T]`.
#[derive(Clone, Debug)]
pub struct BoundaryProblem {
    pub potential: Arc<Potential>,
    pub horizon: f64,
    pub q0: Vec<f64>,
    pub q_t: Vec<f64>,
}

impl BoundaryProblem {
    pub fn new(potential: Potential, horizon: f64, q0: Vec<f64>, q_t: Vec<f64>) -> Result<Self> {
        Self::with_shared(Arc::new(potential), horizon, q0, q_t)
    }

    pub fn with_shared(
        potential: Arc<Potential>,
        horizon: f64,
        q0: Vec<f64>,
        q_t: Vec<f64>,
    ) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidParameter(format!("horizon must be positive, got {horizon}")));
        }
        for q in [&q0, &q_t] {
            if q.len() != potential.dim() {
                return Err(Error::DimensionMismatch {
                    expected: potential.dim(),
                    found: q.len(),
                });
            }
        }
        Ok(BoundaryProblem {
            potential,
            horizon,
            q0,
            q_t,
        })
    }

    pub fn dim(&self) -> usize {
        self.potential.dim()
    }

    /// `(q_T - q_0) / T`
    pub fn velocity(&self) -> Vec<f64> {
        self.q0
            .iter()
            .zip(&self.q_t)
            .map(|(a, b)| (b - a) / self.horizon)
            .collect()
    }

    /// Straight line `q_0 + (q_T - q_0) t / T`.
    pub fn drift(&self, t: f64) -> Vec<f64> {
        self.q0
            .iter()
            .zip(&self.q_t)
            .map(|(a, b)| a + (b - a) * t / self.horizon)
            .collect()
    }

    pub(crate) fn check_path(&self, c: &SinePath) -> Result<()> {
        if c.components() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: c.components(),
            });
        }
        if (c.horizon() - self.horizon).abs() > 1e-12 * self.horizon {
            return Err(Error::InvalidParameter(format!(
                "path horizon {} differs from problem horizon {}",
                c.horizon(),
                self.horizon
            )));
        }
        Ok(())
    }
}

/// `gamma(t) = q_0 + (q_T - q_0) t / T + c(t)` for `t` in `[0, T]`.
pub fn affine_embed(bp: &BoundaryProblem, c: &SinePath, t: f64) -> Result<Vec<f64>> {
    bp.check_path(c)?;
    if !(0.0..=bp.horizon).contains(&t) {
        return Err(Error::OutOfRange(format!("t = {t} outside [0, {}]", bp.horizon)));
    }
    let mut g = bp.drift(t);
    for (gi, ci) in g.iter_mut().zip(c.eval(t)) {
        *gi += ci;
    }
    Ok(g)
}

/// Sampled sine basis on the interior grid, with cosine tables for product moments.
#[derive(Clone, Debug)]
pub struct SineGrid {
    horizon: f64,
    modes: usize,
    points: usize,
    /// `phi_k(t_j)`, row `k - 1`.
    basis: Vec<f64>,
    /// `cos(m pi j / (P + 1))` for `m = 0..=2M`, row `m`.
    cosines: Vec<f64>,
}

impl SineGrid {
    pub fn new(horizon: f64, modes: usize, points: usize) -> Result<Self> {
        if points < 2 * modes + 1 {
            return Err(Error::Aliasing { points, modes });
        }
        let scale = (2.0 / horizon).sqrt();
        let denom = (points + 1) as f64;
        let mut basis = Vec::with_capacity(modes * points);
        for k in 1..=modes {
            for j in 1..=points {
                basis.push(scale * (PI * (k * j) as f64 / denom).sin());
            }
        }
        let mut cosines = Vec::with_capacity((2 * modes + 1) * points);
        for m in 0..=2 * modes {
            for j in 1..=points {
                // reduce the argument exactly before scaling
                let r = (m * j) % (2 * (points + 1));
                cosines.push((PI * r as f64 / denom).cos());
            }
        }
        Ok(SineGrid {
            horizon,
            modes,
            points,
            basis,
            cosines,
        })
    }

    pub fn with_default_points(horizon: f64, modes: usize) -> Self {
        Self::new(horizon, modes, 2 * modes + 1).expect("default grid satisfies the aliasing rule")
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Quadrature weight `T / (P + 1)`.
    pub fn weight(&self) -> f64 {
        self.horizon / (self.points + 1) as f64
    }

    pub fn node(&self, j: usize) -> f64 {
        (j + 1) as f64 * self.weight()
    }

    pub fn phi(&self, k: usize, j: usize) -> f64 {
        self.basis[(k - 1) * self.points + j]
    }

    /// Values at the grid, `out[j * n + i]`, from mode-major coefficients.
    pub fn synthesize(&self, n: usize, coeffs: &[f64], out: &mut [f64]) {
        let modes = coeffs.len() / n;
        debug_assert!(modes <= self.modes);
        out.fill(0.0);
        for k in 1..=modes {
            let row = &self.basis[(k - 1) * self.points..k * self.points];
            let ck = &coeffs[(k - 1) * n..k * n];
            if ck.iter().all(|c| *c == 0.0) {
                continue;
            }
            for (j, phi) in row.iter().enumerate() {
                for i in 0..n {
                    out[j * n + i] += ck[i] * phi;
                }
            }
        }
    }

    /// First `modes` coefficients `h sum_j f(t_j) phi_k(t_j)`.
    pub fn analyze(&self, n: usize, values: &[f64], modes: usize, out: &mut [f64]) {
        debug_assert!(modes <= self.modes);
        let h = self.weight();
        for k in 1..=modes {
            let row = &self.basis[(k - 1) * self.points..k * self.points];
            for i in 0..n {
                let mut acc = 0.0;
                for (j, phi) in row.iter().enumerate() {
                    acc += values[j * n + i] * phi;
                }
                out[(k - 1) * n + i] = h * acc;
            }
        }
    }

    /// `(h / T) sum_j w_j cos(m pi j / (P + 1))` for `m = 0..=2M`. With these,
    /// `h sum_j w_j phi_k(t_j) phi_l(t_j) = mom[|k - l|] - mom[k + l]`.
    pub fn cosine_moments(&self, w: &[f64]) -> Vec<f64> {
        let s = self.weight() / self.horizon;
        (0..=2 * self.modes)
            .map(|m| {
                let row = &self.cosines[m * self.points..(m + 1) * self.points];
                s * row.iter().zip(w).map(|(c, w)| c * w).sum::<f64>()
            })
            .collect()
    }
}

/// Values `c(t_j)` at `t_j = j T / (P + 1)`, `j = 1..P`.
pub fn sample_on_grid(c: &SinePath, points: usize) -> Result<Vec<Vec<f64>>> {
    let grid = SineGrid::new(c.horizon(), c.modes(), points)?;
    let n = c.components();
    let mut flat = vec![0.0; points * n];
    grid.synthesize(n, c.coeffs(), &mut flat);
    Ok(flat.chunks(n).map(|s| s.to_vec()).collect())
}

/// First `modes` sine coefficients of grid data (inverse of [`sample_on_grid`]
/// for band-limited input).
pub fn analyze_on_grid(values: &[Vec<f64>], horizon: f64, modes: usize) -> Result<SinePath> {
    let n = values.first().map(|v| v.len()).unwrap_or(0);
    if n == 0 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            found: 0,
        });
    }
    if let Some(bad) = values.iter().find(|v| v.len() != n) {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: bad.len(),
        });
    }
    let grid = SineGrid::new(horizon, modes, values.len())?;
    let flat: Vec<f64> = values.iter().flatten().copied().collect();
    let mut coeffs = vec![0.0; modes * n];
    grid.analyze(n, &flat, modes, &mut coeffs);
    SinePath::from_coeffs(n, horizon, coeffs)
}
