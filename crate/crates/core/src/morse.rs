//! Morse index and nullity of a critical point.
//!
//! Three routes that must agree:
//! - the Schur complement `A - B D^{-1} Bᵀ` of the split Hessian (the reduced Hessian),
//! - the full truncated Hessian,
//! - conjugate points of the Jacobi equation along the path.

use std::fmt;

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::fourier::{BoundaryProblem, SinePath};
use crate::functional::HessianBlocks;

/// Relative eigenvalue cutoff: eigenvalues within `THETA_REL (1 + |M|)` of
/// zero count toward the nullity.
pub const THETA_REL: f64 = 1e-8;
/// A conjugate point is accepted when the smallest principal cosine of the
/// Jacobi frame drops below this value.
pub const JACOBI_RANK_TOL: f64 = 1e-7;
/// Singular values below this count toward a conjugate point's multiplicity.
const JACOBI_MULTIPLICITY_TOL: f64 = 1e-6;
pub const DEFAULT_JACOBI_STEPS: usize = 4000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IndexMethod {
    Schur,
    FullMatrix,
    JacobiOracle,
}

impl fmt::Display for IndexMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IndexMethod::Schur => "schur",
            IndexMethod::FullMatrix => "full",
            IndexMethod::JacobiOracle => "jacobi",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexReport {
    pub index: usize,
    pub nullity: usize,
    pub method: IndexMethod,
    /// Smallest `|eigenvalue|` for matrix methods; smallest principal cosine of
    /// the Jacobi frame at `t = T` for the Jacobi method.
    pub min_abs_eigenvalue: f64,
    /// Conjugate times found in `(0, T)` (Jacobi method only).
    pub conjugate_times: Vec<f64>,
}

impl IndexReport {
    pub fn degenerate(&self) -> bool {
        self.nullity > 0
    }
}

/// Negative count, null count (within the documented threshold) and smallest
/// `|eigenvalue|` of a symmetric matrix.
pub fn signature(m: &DMatrix<f64>) -> (usize, usize, f64) {
    if m.nrows() == 0 {
        return (0, 0, f64::INFINITY);
    }
    let eig = SymmetricEigen::new(m.clone()).eigenvalues;
    let norm = eig.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let theta = THETA_REL * (1.0 + norm);
    let neg = eig.iter().filter(|v| **v < -theta).count();
    let null = eig.iter().filter(|v| v.abs() <= theta).count();
    let min_abs = eig.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    (neg, null, min_abs)
}

fn smallest_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, v| a.min(*v))
}

/// `A - B D^{-1} Bᵀ`, with `D` factored by Cholesky.
pub fn reduced_hessian(blocks: &HessianBlocks) -> Result<DMatrix<f64>> {
    let h = blocks.head_len;
    if blocks.d.nrows() == 0 {
        return Ok(blocks.a.clone());
    }
    let chol = Cholesky::new(blocks.d.clone()).ok_or_else(|| Error::NotPositiveDefinite {
        min_eigenvalue: smallest_eigenvalue(&blocks.d),
    })?;
    if h == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let x = chol.solve(&blocks.b.transpose());
    let s = &blocks.a - &blocks.b * x;
    Ok((&s + s.transpose()) * 0.5)
}

pub fn index_schur(blocks: &HessianBlocks) -> Result<IndexReport> {
    let s = reduced_hessian(blocks)?;
    let (index, nullity, min_abs) = signature(&s);
    Ok(IndexReport {
        index,
        nullity,
        method: IndexMethod::Schur,
        min_abs_eigenvalue: min_abs,
        conjugate_times: Vec::new(),
    })
}

/// Signature of the whole truncated matrix `[[A, B], [Bᵀ, D]]`.
pub fn index_full(blocks: &HessianBlocks) -> IndexReport {
    let (index, nullity, min_abs) = signature(&blocks.full());
    IndexReport {
        index,
        nullity,
        method: IndexMethod::FullMatrix,
        min_abs_eigenvalue: min_abs,
        conjugate_times: Vec::new(),
    }
}

/// Counts conjugate points of `J'' = -V''(gamma(t)) J`, `J(0) = 0`, `J'(0) = I`
/// with a fixed-step RK4 integrator.
///
/// Zeros of `det J` are located through the frame `[J; J']`: after
/// orthonormalising its columns, the singular values of the top block are the
/// cosines between the Lagrangian plane and the vertical, and vanish exactly
/// where `J` is singular. Candidates are grid local minima of the smallest
/// cosine and sign changes of `det J`; each is refined by golden-section search
/// and accepted below [`JACOBI_RANK_TOL`]. Multiplicity is the number of small
/// singular values at the refined time. A singular `J(T)` is reported as
/// nullity (degenerate endpoint) rather than counted.
pub fn index_jacobi(bp: &BoundaryProblem, c: &SinePath, steps: usize) -> Result<IndexReport> {
    bp.check_path(c)?;
    if steps < 8 {
        return Err(Error::InvalidParameter("Jacobi integration needs at least 8 steps".into()));
    }
    let n = bp.dim();
    let horizon = bp.horizon;
    let dt = horizon / steps as f64;
    let flow = JacobiFlow { bp, c };

    let mut states = Vec::with_capacity(steps + 1);
    let mut state = (DMatrix::<f64>::zeros(n, n), DMatrix::<f64>::identity(n, n));
    states.push(state.clone());
    for i in 0..steps {
        state = flow.step(i as f64 * dt, &state, dt);
        states.push(state.clone());
    }

    let cos_min: Vec<f64> = states.iter().map(|s| frame_cosines(s)[0]).collect();
    let dets: Vec<f64> = states.iter().map(|s| s.0.determinant()).collect();

    let mut brackets = Vec::new();
    for i in 1..steps {
        let local_min = cos_min[i] <= cos_min[i - 1] && cos_min[i] <= cos_min[i + 1] && cos_min[i] < 0.5;
        let sign_change = dets[i] != 0.0 && dets[i + 1] != 0.0 && dets[i].signum() != dets[i + 1].signum();
        if local_min || sign_change {
            brackets.push(i);
        }
    }
    // a zero just before T shows up as a decreasing tail
    if cos_min[steps] < cos_min[steps - 1] && cos_min[steps] < 0.5 {
        brackets.push(steps);
    }

    let end_tol = 1e-6 * horizon;
    let mut roots: Vec<(f64, usize)> = Vec::new();
    for i in brackets {
        let lo_idx = i - 1;
        let hi_t = ((i + 1) as f64 * dt).min(horizon);
        let (t_star, cos_star, mult) = flow.refine(lo_idx as f64 * dt, &states[lo_idx], hi_t);
        if cos_star >= JACOBI_RANK_TOL || t_star <= end_tol || t_star >= horizon - end_tol {
            continue;
        }
        if roots.iter().all(|(t, _)| (t - t_star).abs() > 2.0 * dt) {
            roots.push((t_star, mult));
        }
    }
    roots.sort_by(|a, b| a.0.total_cmp(&b.0));

    let end = frame_cosines(&states[steps]);
    let nullity = end.iter().filter(|s| **s < JACOBI_RANK_TOL).count();
    Ok(IndexReport {
        index: roots.iter().map(|r| r.1).sum(),
        nullity,
        method: IndexMethod::JacobiOracle,
        min_abs_eigenvalue: end[0],
        conjugate_times: roots.iter().map(|r| r.0).collect(),
    })
}

type Frame = (DMatrix<f64>, DMatrix<f64>);

/// Ascending singular values of the top block of the orthonormalised frame.
fn frame_cosines(state: &Frame) -> Vec<f64> {
    let n = state.0.nrows();
    let mut stacked = DMatrix::zeros(2 * n, n);
    stacked.view_mut((0, 0), (n, n)).copy_from(&state.0);
    stacked.view_mut((n, 0), (n, n)).copy_from(&state.1);
    let q = stacked.qr().q();
    let top = q.view((0, 0), (n, n)).into_owned();
    let mut sv: Vec<f64> = top.singular_values().iter().copied().collect();
    sv.sort_by(f64::total_cmp);
    sv
}

struct JacobiFlow<'a> {
    bp: &'a BoundaryProblem,
    c: &'a SinePath,
}

impl JacobiFlow<'_> {
    fn curvature(&self, t: f64) -> DMatrix<f64> {
        let mut q = self.bp.drift(t);
        for (qi, ci) in q.iter_mut().zip(self.c.eval(t)) {
            *qi += ci;
        }
        self.bp.potential.hessian(&q)
    }

    fn step(&self, t: f64, s: &Frame, h: f64) -> Frame {
        let k1 = (s.1.clone(), -self.curvature(t) * &s.0);
        let mid = self.curvature(t + 0.5 * h);
        let s2 = (&s.0 + &k1.0 * (0.5 * h), &s.1 + &k1.1 * (0.5 * h));
        let k2 = (s2.1.clone(), -&mid * &s2.0);
        let s3 = (&s.0 + &k2.0 * (0.5 * h), &s.1 + &k2.1 * (0.5 * h));
        let k3 = (s3.1.clone(), -&mid * &s3.0);
        let s4 = (&s.0 + &k3.0 * h, &s.1 + &k3.1 * h);
        let k4 = (s4.1.clone(), -self.curvature(t + h) * &s4.0);
        let w = h / 6.0;
        (
            &s.0 + (&k1.0 + &k2.0 * 2.0 + &k3.0 * 2.0 + &k4.0) * w,
            &s.1 + (&k1.1 + &k2.1 * 2.0 + &k3.1 * 2.0 + &k4.1) * w,
        )
    }

    /// Frame at `t >= t0` by at most two RK4 sub-steps from a stored state.
    fn advance(&self, t0: f64, s0: &Frame, t: f64) -> Frame {
        let span = t - t0;
        if span <= 0.0 {
            return s0.clone();
        }
        let half = self.step(t0, s0, 0.5 * span);
        self.step(t0 + 0.5 * span, &half, 0.5 * span)
    }

    /// Golden-section minimisation of the smallest frame cosine on `[t0, t1]`.
    fn refine(&self, t0: f64, s0: &Frame, t1: f64) -> (f64, f64, usize) {
        let objective = |t: f64| frame_cosines(&self.advance(t0, s0, t))[0];
        let ratio = 0.5 * (5f64.sqrt() - 1.0);
        let (mut a, mut b) = (t0, t1);
        let mut x1 = b - ratio * (b - a);
        let mut x2 = a + ratio * (b - a);
        let (mut f1, mut f2) = (objective(x1), objective(x2));
        for _ in 0..80 {
            if (b - a) < 1e-13 * (1.0 + t1.abs()) {
                break;
            }
            if f1 < f2 {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - ratio * (b - a);
                f1 = objective(x1);
            } else {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + ratio * (b - a);
                f2 = objective(x2);
            }
        }
        let t_star = 0.5 * (a + b);
        let cosines = frame_cosines(&self.advance(t0, s0, t_star));
        let mult = cosines.iter().filter(|s| **s < JACOBI_MULTIPLICITY_TOL).count();
        (t_star, cosines[0], mult.max(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functional::hessian_blocks;
    use crate::potential::{Family, Potential};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn harmonic(w: &[f64], n: usize, t: f64) -> BoundaryProblem {
        BoundaryProblem::new(Potential::builtin(Family::Harmonic, n, w).unwrap(), t, vec![0.0; n], vec![1.0; n])
            .unwrap()
    }

    fn random_spd(dim: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let g = DMatrix::from_fn(dim, dim, |_, _| rng.gen_range(-1.0..1.0));
        &g * g.transpose() + DMatrix::identity(dim, dim) * 0.5
    }

    fn random_blocks(h: usize, t: usize, rng: &mut ChaCha8Rng) -> HessianBlocks {
        let a = DMatrix::from_fn(h, h, |_, _| rng.gen_range(-2.0..2.0));
        let a = (&a + a.transpose()) * 0.5;
        HessianBlocks {
            head_len: h,
            a,
            b: DMatrix::from_fn(h, t, |_, _| rng.gen_range(-1.0..1.0)),
            d: random_spd(t, rng),
            metric: crate::functional::Metric::L2Coeff,
            stiffness: vec![1.0; h + t],
        }
    }

    #[test]
    fn schur_with_zero_coupling_is_head_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut blocks = random_blocks(3, 4, &mut rng);
        blocks.b.fill(0.0);
        let s = reduced_hessian(&blocks).unwrap();
        assert!((s - &blocks.a).abs().max() < 1e-14);
    }

    #[test]
    fn schur_signature_matches_dense_eigensolver() {
        // oracle: Haynsworth inertia additivity with index(D) = 0
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let h = rng.gen_range(1..6);
            let t = rng.gen_range(1..8);
            let blocks = random_blocks(h, t, &mut rng);
            let full = index_full(&blocks);
            let schur = index_schur(&blocks).unwrap();
            assert_eq!(full.index, schur.index);
            assert_eq!(full.nullity, schur.nullity);
            assert!(schur.index <= h);
        }
    }

    #[test]
    fn indefinite_tail_block_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut blocks = random_blocks(2, 3, &mut rng);
        blocks.d[(1, 1)] = -50.0;
        match reduced_hessian(&blocks) {
            Err(Error::NotPositiveDefinite { min_eigenvalue }) => assert!(min_eigenvalue < 0.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn harmonic_index_from_diagonal_entries() {
        // T = 3 pi / 2, w = 1: only k = 1 has (pi k / T)^2 - 1 < 0
        let t = 1.5 * PI;
        let bp = harmonic(&[1.0], 1, t);
        let c = SinePath::zeros(1, t, 16);
        let blocks = hessian_blocks(&bp, &c, 1).unwrap();
        let s = reduced_hessian(&blocks).unwrap();
        assert!((s[(0, 0)] - (4.0 / 9.0 - 1.0)).abs() < 1e-12);
        let r = index_schur(&blocks).unwrap();
        assert_eq!((r.index, r.nullity), (1, 0));
        let j = index_jacobi(&bp, &c, 2000).unwrap();
        assert_eq!((j.index, j.nullity), (1, 0));
        assert!((j.conjugate_times[0] - PI).abs() < 1e-6);
    }

    #[test]
    fn free_particle_has_no_index() {
        let bp = BoundaryProblem::new(Potential::builtin(Family::Zero, 2, &[]).unwrap(), 3.0, vec![0.0; 2], vec![1.0, 2.0])
            .unwrap();
        let c = SinePath::zeros(2, 3.0, 8);
        let blocks = hessian_blocks(&bp, &c, 0).unwrap();
        assert_eq!(index_schur(&blocks).unwrap().index, 0);
        assert_eq!(index_full(&blocks).index, 0);
        assert_eq!(index_full(&blocks).nullity, 0);
        let j = index_jacobi(&bp, &c, 500).unwrap();
        assert_eq!((j.index, j.nullity), (0, 0));
    }

    #[test]
    fn resonant_horizon_is_degenerate() {
        let bp = BoundaryProblem::new(Potential::builtin(Family::Harmonic, 1, &[1.0]).unwrap(), PI, vec![0.0], vec![0.0])
            .unwrap();
        let c = SinePath::zeros(1, PI, 16);
        let blocks = hessian_blocks(&bp, &c, 1).unwrap();
        let s = index_schur(&blocks).unwrap();
        assert_eq!((s.index, s.nullity), (0, 1));
        assert!(s.degenerate());
        assert_eq!(index_full(&blocks).nullity, 1);
        let j = index_jacobi(&bp, &c, 2000).unwrap();
        assert_eq!((j.index, j.nullity), (0, 1));
    }

    #[test]
    fn jacobi_counts_multiplicity() {
        // w = 2, T = pi - 0.1: single zero of sin(2t) at pi/2
        let t = PI - 0.1;
        let bp = harmonic(&[2.0], 1, t);
        let j = index_jacobi(&bp, &SinePath::zeros(1, t, 8), 2000).unwrap();
        assert_eq!(j.index, 1);
        // isotropic pair: det J touches zero without a sign change
        let bp = harmonic(&[2.0], 2, t);
        let j = index_jacobi(&bp, &SinePath::zeros(2, t, 8), 2000).unwrap();
        assert_eq!(j.index, 2);
        // anisotropic: w = (1, 3), T = 4 -> floor(4/pi) + floor(12/pi) = 1 + 3
        let bp = harmonic(&[1.0, 3.0], 2, 4.0);
        let j = index_jacobi(&bp, &SinePath::zeros(2, 4.0, 8), 4000).unwrap();
        assert_eq!(j.index, 4);
    }

    #[test]
    fn metric_change_preserves_signature() {
        let bp = BoundaryProblem::new(
            Potential::builtin(Family::Pendulum, 2, &[1.0]).unwrap(),
            3.0 * PI,
            vec![0.0, 0.5],
            vec![0.3, -0.2],
        )
        .unwrap();
        let mut c = SinePath::zeros(2, 3.0 * PI, 12);
        c.set_coeff(1, 0, 0.4);
        c.set_coeff(2, 1, -0.3);
        let blocks = hessian_blocks(&bp, &c, 3).unwrap();
        let h1 = blocks.to_metric(crate::functional::Metric::H1Coeff);
        let (a, b) = (index_schur(&blocks).unwrap(), index_schur(&h1).unwrap());
        assert_eq!((a.index, a.nullity), (b.index, b.nullity));
        assert_eq!(index_full(&blocks).index, index_full(&h1).index);
    }
}
