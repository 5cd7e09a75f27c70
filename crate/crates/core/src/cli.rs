//! Command implementations behind the `finreduce` binary.
//!
//! A run is described by a TOML file with the sections `problem`, `potential`,
//! `geometry`, `plan`, `multistart`, `output` and `weyl`. Unknown keys are
//! rejected. `solve` echoes the configuration with every default filled in to
//! `resolved_config.toml`; rerunning from that file reproduces the outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dirichlet::{self, DirichletOverrides, DirichletPlan, DirichletProblem, EigenMode, RectangleDomain};
use crate::error::{Error, Result};
use crate::fourier::{affine_embed, BoundaryProblem, SinePath};
use crate::functional::hessian_blocks;
use crate::morse::{self, IndexReport, DEFAULT_JACOBI_STEPS};
use crate::potential::{Family, Potential};
use crate::reduction::{
    self, contraction_cutoff, make_plan, GalerkinSystem, Multistart, PlanOverrides, ReducedOptions, ReducedRun,
    ReductionPlan, Seeds, TailMethod,
};
use crate::functional::HessianBlocks;

pub const DEFAULT_OUT_DIR: &str = "finreduce-out";
pub const DEFAULT_SAMPLES: usize = 512;
pub const DEFAULT_FIELD_GRID: usize = 65;
pub const DEFAULT_WEYL_VALUES: [f64; 3] = [1e2, 1e3, 1e4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    #[default]
    Mechanical,
    Dirichlet,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub kind: ProblemKind,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialSection {
    /// Built-in family: `zero`, `harmonic`, `pendulum`, `coupled_pendula`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub family: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<Vec<f64>>,
    /// Expression in `q1, q2, ...`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expression: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub allow_uncertified: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySection {
    #[serde(rename = "T", alias = "horizon", skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q0: Option<Vec<f64>>,
    #[serde(rename = "qT", skip_serializing_if = "Option::is_none")]
    pub q_t: Option<Vec<f64>>,
    /// Rectangle side lengths (one or two).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lengths: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cutoff: Option<usize>,
    /// Truncation `M` (mechanical).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub modes: Option<usize>,
    /// Eigenvalue threshold of the truncation (Dirichlet).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_cut: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tail_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head_tol: Option<f64>,
    /// `newton` or `picard`
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refine: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_refinements: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultistartSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    /// Hexadecimal, with or without `0x`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<String>,
    /// Explicit head vectors; replaces the pseudorandom seeds.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
    /// Trajectory samples, or field samples on an interval.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    /// Field samples per axis on a rectangle.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field_grid: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeylSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_values: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSection,
    pub potential: PotentialSection,
    pub geometry: GeometrySection,
    #[serde(default)]
    pub plan: PlanSection,
    #[serde(default)]
    pub multistart: MultistartSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub weyl: WeylSection,
}

impl RunConfig {
    pub fn from_toml_str(src: &str) -> Result<Self> {
        toml::from_str(src).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&src)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.output.dir.as_deref().unwrap_or(DEFAULT_OUT_DIR))
    }

    pub fn method(&self) -> Result<TailMethod> {
        self.plan.method.as_deref().unwrap_or("newton").parse()
    }

    fn seed(&self) -> Result<u64> {
        self.multistart
            .seed
            .as_deref()
            .map(parse_hex_seed)
            .unwrap_or(Ok(reduction::DEFAULT_SEED))
    }
}

pub fn parse_hex_seed(s: &str) -> Result<u64> {
    let t = s.trim();
    let digits = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")).unwrap_or(t);
    u64::from_str_radix(digits, 16).map_err(|_| Error::Config(format!("seed `{s}` is not hexadecimal")))
}

/// Command-line settings layered over the file.
#[derive(Clone, Debug, Default)]
pub struct CliOverrides {
    pub out: Option<PathBuf>,
    pub seeds: Option<usize>,
    pub seed: Option<String>,
    pub method: Option<String>,
}

pub fn apply_overrides(cfg: &mut RunConfig, o: &CliOverrides) -> Result<()> {
    if let Some(out) = &o.out {
        cfg.output.dir = Some(out.to_string_lossy().into_owned());
    }
    if let Some(k) = o.seeds {
        cfg.multistart.count = Some(k);
    }
    if let Some(s) = &o.seed {
        parse_hex_seed(s)?;
        cfg.multistart.seed = Some(s.clone());
    }
    if let Some(m) = &o.method {
        m.parse::<TailMethod>()?;
        cfg.plan.method = Some(m.clone());
    }
    Ok(())
}

/// A problem assembled from a configuration.
pub enum Setup {
    Mechanical {
        bp: BoundaryProblem,
        plan: ReductionPlan,
    },
    Dirichlet {
        dom: RectangleDomain,
        pot: Arc<Potential>,
        plan: DirichletPlan,
    },
}

fn missing(key: &str) -> Error {
    Error::Config(format!("missing required key `{key}`"))
}

fn build_potential(sec: &PotentialSection, dim: usize) -> Result<Potential> {
    match (&sec.family, &sec.expression) {
        (Some(name), None) => {
            if sec.c_bound.is_some() {
                return Err(Error::Config("`c_bound` applies only to expression potentials".into()));
            }
            let params = sec.params.clone().unwrap_or_default();
            Potential::builtin(Family::from_name(name)?, dim, &params)
        }
        (None, Some(src)) => {
            if sec.params.is_some() {
                return Err(Error::Config("`params` applies only to built-in families".into()));
            }
            Potential::parse(src, dim, sec.c_bound)
        }
        (Some(_), Some(_)) => Err(Error::Config("give either `family` or `expression`, not both".into())),
        (None, None) => Err(Error::Config("potential needs `family` or `expression`".into())),
    }
}

pub fn setup(cfg: &RunConfig) -> Result<Setup> {
    let allow = cfg.potential.allow_uncertified.unwrap_or(false);
    match cfg.problem.kind {
        ProblemKind::Mechanical => {
            let g = &cfg.geometry;
            if g.lengths.is_some() {
                return Err(Error::Config("`lengths` applies only to dirichlet problems".into()));
            }
            let horizon = g.horizon.ok_or_else(|| missing("geometry.T"))?;
            let q0 = g.q0.clone().ok_or_else(|| missing("geometry.q0"))?;
            let q_t = g.q_t.clone().ok_or_else(|| missing("geometry.qT"))?;
            if q0.is_empty() {
                return Err(Error::Config("`q0` must not be empty".into()));
            }
            if cfg.plan.lambda_cut.is_some() {
                return Err(Error::Config("`lambda_cut` applies only to dirichlet problems".into()));
            }
            let pot = build_potential(&cfg.potential, q0.len())?;
            let bp = BoundaryProblem::new(pot, horizon, q0, q_t)?;
            let plan = make_plan(
                &bp,
                &PlanOverrides {
                    cutoff: cfg.plan.cutoff,
                    modes: cfg.plan.modes,
                    tail_tol: cfg.plan.tail_tol,
                    head_tol: cfg.plan.head_tol,
                    allow_uncertified: allow,
                },
            )?;
            Ok(Setup::Mechanical { bp, plan })
        }
        ProblemKind::Dirichlet => {
            let g = &cfg.geometry;
            if g.horizon.is_some() || g.q0.is_some() || g.q_t.is_some() {
                return Err(Error::Config("dirichlet geometry takes only `lengths`".into()));
            }
            if cfg.plan.modes.is_some() {
                return Err(Error::Config("dirichlet truncation is set with `lambda_cut`, not `modes`".into()));
            }
            let dom = RectangleDomain::new(g.lengths.clone().ok_or_else(|| missing("geometry.lengths"))?)?;
            let pot = build_potential(&cfg.potential, 1)?;
            let plan = dirichlet::dirichlet_plan(
                &dom,
                &pot,
                &DirichletOverrides {
                    cutoff: cfg.plan.cutoff,
                    lambda_cut: cfg.plan.lambda_cut,
                    tail_tol: cfg.plan.tail_tol,
                    head_tol: cfg.plan.head_tol,
                    allow_uncertified: allow,
                    mode_cap: None,
                },
            )?;
            Ok(Setup::Dirichlet {
                dom,
                pot: Arc::new(pot),
                plan,
            })
        }
    }
}

/// The configuration with every default made explicit.
pub fn resolve(cfg: &RunConfig, setup: &Setup) -> Result<RunConfig> {
    let mut r = cfg.clone();
    r.potential.allow_uncertified = Some(cfg.potential.allow_uncertified.unwrap_or(false));
    if r.potential.family.is_some() && r.potential.params.is_none() {
        r.potential.params = Some(Vec::new());
    }
    let (cutoff, tail_tol, head_tol) = match setup {
        Setup::Mechanical { plan, bp } => {
            r.plan.modes = Some(plan.modes);
            r.multistart.radius = Some(cfg.multistart.radius.unwrap_or_else(|| reduction::default_radius(bp)));
            (plan.cutoff, plan.tail_tol, plan.head_tol)
        }
        Setup::Dirichlet { plan, .. } => {
            r.plan.lambda_cut = Some(plan.lambda_cut);
            r.multistart.radius = Some(cfg.multistart.radius.unwrap_or(2.0));
            (plan.cutoff, plan.tail_tol, plan.head_tol)
        }
    };
    r.plan.cutoff = Some(cutoff);
    r.plan.tail_tol = Some(tail_tol);
    r.plan.head_tol = Some(head_tol);
    r.plan.method = Some(cfg.method()?.to_string());
    let defaults = ReducedOptions::default();
    r.plan.refine = Some(cfg.plan.refine.unwrap_or(defaults.refine));
    r.plan.max_refinements = Some(cfg.plan.max_refinements.unwrap_or(defaults.max_refinements));
    r.multistart.count = Some(cfg.multistart.count.unwrap_or(reduction::DEFAULT_SEED_COUNT));
    r.multistart.seed = Some(format!("{:#x}", cfg.seed()?));
    r.output.dir = Some(cfg.out_dir().to_string_lossy().into_owned());
    r.output.samples = Some(cfg.output.samples.unwrap_or(DEFAULT_SAMPLES));
    r.output.field_grid = Some(cfg.output.field_grid.unwrap_or(DEFAULT_FIELD_GRID));
    r.weyl.c_values = Some(cfg.weyl.c_values.clone().unwrap_or(DEFAULT_WEYL_VALUES.to_vec()));
    Ok(r)
}

/// Four decimals with trailing zeros removed.
fn short(x: f64) -> String {
    let s = format!("{x:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.to_string() }
}

/// Plan summary, first line `N=.., mu=.., ...`.
pub fn cmd_plan(cfg: &RunConfig) -> Result<String> {
    let setup = setup(cfg)?;
    let mut out = String::new();
    match &setup {
        Setup::Mechanical { bp, plan } => {
            let older = contraction_cutoff(plan.c_bound.max(1.0), bp.horizon);
            writeln!(
                out,
                "N={}, mu={}, contraction_N={}, dim_U={}, kappa={}, M={}",
                plan.cutoff,
                short(plan.mu),
                older,
                plan.cutoff * bp.dim(),
                short(plan.contraction),
                plan.modes
            )
            .unwrap();
            writeln!(
                out,
                "C={} ({}), certified={}",
                plan.c_bound,
                bp.potential.c_source(),
                plan.certified
            )
            .unwrap();
        }
        Setup::Dirichlet { dom, pot, plan } => {
            writeln!(
                out,
                "N={}, mu={}, lambda_next={}, dim_U={}, kappa={}, modes={}, lambda_cut={}",
                plan.cutoff,
                short(plan.mu),
                short(plan.next_eigenvalue),
                plan.cutoff,
                short(plan.contraction),
                plan.mode_count(),
                short(plan.lambda_cut)
            )
            .unwrap();
            writeln!(
                out,
                "C={} ({}), certified={}, domain={:?}",
                plan.c_bound,
                pot.c_source(),
                plan.certified,
                dom.lengths()
            )
            .unwrap();
        }
    }
    let cutoff = match &setup {
        Setup::Mechanical { plan, .. } => plan.cutoff,
        Setup::Dirichlet { plan, .. } => plan.cutoff,
    };
    if cutoff == 0 {
        out.push_str("note: N=0, the reduced system is empty; the tail equation alone fixes the solution\n");
    }
    Ok(out)
}

/// Weyl table `C, exact, weyl, relative_error`.
pub fn cmd_weyl(cfg: &RunConfig) -> Result<String> {
    let dom = match cfg.problem.kind {
        ProblemKind::Dirichlet => RectangleDomain::new(cfg.geometry.lengths.clone().ok_or_else(|| missing("geometry.lengths"))?)?,
        ProblemKind::Mechanical => RectangleDomain::interval(cfg.geometry.horizon.ok_or_else(|| missing("geometry.T"))?)?,
    };
    let values = cfg.weyl.c_values.clone().unwrap_or(DEFAULT_WEYL_VALUES.to_vec());
    let mut out = String::from("C,exact_count,weyl_count,relative_error\n");
    for c in values {
        let w = dirichlet::weyl_estimate(&dom, c)?;
        writeln!(out, "{},{},{},{}", sci(c), w.exact_count, sci(w.weyl_count), sci(w.relative_error)).unwrap();
    }
    Ok(out)
}

/// 17 significant digits; negative zero prints as zero.
fn sci(x: f64) -> String {
    let x = if x == 0.0 { 0.0 } else { x };
    format!("{x:.16e}")
}

/// What `solve` produced.
#[derive(Debug)]
pub struct SolveSummary {
    pub out_dir: PathBuf,
    pub solutions: usize,
    pub seeds: usize,
    pub converged_seeds: usize,
}

impl SolveSummary {
    /// 0 with at least one solution, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.solutions > 0 { 0 } else { 2 }
    }
}

fn reduced_options(cfg: &RunConfig, tail_tol: f64, head_tol: f64) -> Result<ReducedOptions> {
    let mut opts = ReducedOptions {
        head_tol,
        ..Default::default()
    };
    opts.tail.tol = tail_tol;
    opts.tail.method = cfg.method()?;
    if let Some(r) = cfg.plan.refine {
        opts.refine = r;
    }
    if let Some(m) = cfg.plan.max_refinements {
        opts.max_refinements = m;
    }
    Ok(opts)
}

fn seeds(cfg: &RunConfig) -> Result<Seeds> {
    Ok(match &cfg.multistart.seeds {
        Some(list) => Seeds::Explicit(list.clone()),
        None => Seeds::Multistart(Multistart {
            count: cfg.multistart.count.unwrap_or(reduction::DEFAULT_SEED_COUNT),
            radius: cfg.multistart.radius,
            seed: cfg.seed()?,
        }),
    })
}

pub fn cmd_solve(cfg: &RunConfig) -> Result<SolveSummary> {
    let setup = setup(cfg)?;
    let resolved = resolve(cfg, &setup)?;
    let dir = cfg.out_dir();
    fs::create_dir_all(&dir)?;
    let samples = resolved.output.samples.unwrap_or(DEFAULT_SAMPLES).max(2);
    let field_grid = resolved.output.field_grid.unwrap_or(DEFAULT_FIELD_GRID).max(2);

    let (run, header) = match &setup {
        Setup::Mechanical { bp, plan } => {
            let opts = reduced_options(cfg, plan.tail_tol, plan.head_tol)?;
            let run = reduction::solve_reduced(bp, plan, &seeds(cfg)?, &opts)?;
            for (i, s) in run.solutions.iter().enumerate() {
                let path = reduction::solution_path(bp, s)?;
                write_trajectory(&dir.join(format!("trajectory_{}.csv", i + 1)), bp, &path, samples)?;
                write_path_coeffs(&dir.join(format!("coeffs_{}.csv", i + 1)), &path)?;
            }
            let header = format!(
                "mechanical N={} mu={} M={} tail_tol={} head_tol={}",
                plan.cutoff,
                sci(plan.mu),
                plan.modes,
                sci(plan.tail_tol),
                sci(plan.head_tol)
            );
            (run, header)
        }
        Setup::Dirichlet { dom, pot, plan } => {
            let opts = reduced_options(cfg, plan.tail_tol, plan.head_tol)?;
            let run = dirichlet::solve_dirichlet(dom, pot.clone(), plan, &seeds(cfg)?, &opts)?;
            for (i, s) in run.solutions.iter().enumerate() {
                let modes = dirichlet::enumerate_modes(dom, plan.lambda_cut)?;
                let modes = extend_modes(dom, modes, s.coeffs.len(), plan.lambda_cut)?;
                let sys = DirichletProblem::new(dom, pot.clone(), modes, plan.cutoff, plan.lambda_cut)?;
                let per_axis = if dom.dim() == 1 { samples } else { field_grid };
                write_field(&dir.join(format!("field_{}.csv", i + 1)), &sys, &s.coeffs, per_axis)?;
                write_field_coeffs(&dir.join(format!("coeffs_{}.csv", i + 1)), sys.modes(), &s.coeffs)?;
            }
            let header = format!(
                "dirichlet N={} mu={} modes={} lambda_cut={} tail_tol={} head_tol={}",
                plan.cutoff,
                sci(plan.mu),
                plan.mode_count(),
                sci(plan.lambda_cut),
                sci(plan.tail_tol),
                sci(plan.head_tol)
            );
            (run, header)
        }
    };

    write_solutions(&dir.join("solutions.csv"), &run)?;
    write_log(&dir.join("convergence.log"), &header, &run)?;
    fs::write(dir.join("resolved_config.toml"), resolved.to_toml_string()?)?;
    Ok(SolveSummary {
        out_dir: dir,
        solutions: run.solutions.len(),
        seeds: run.seeds.len(),
        converged_seeds: run.seeds.iter().filter(|s| s.converged).count(),
    })
}

/// Mode list matching a refined solution's length (refinement multiplies
/// `lambda_cut` until the count matches).
fn extend_modes(dom: &RectangleDomain, mut modes: Vec<EigenMode>, len: usize, mut cut: f64) -> Result<Vec<EigenMode>> {
    let factor = if dom.dim() == 1 { 4.0 } else { 2.0 };
    while modes.len() < len {
        cut *= factor;
        modes = dirichlet::enumerate_modes(dom, cut)?;
    }
    if modes.len() != len {
        return Err(Error::InvalidParameter(format!(
            "cannot match {len} coefficients to a mode list ({} modes)",
            modes.len()
        )));
    }
    Ok(modes)
}

fn write_trajectory(path: &Path, bp: &BoundaryProblem, c: &SinePath, samples: usize) -> Result<()> {
    let mut s = String::from("t");
    for i in 1..=bp.dim() {
        write!(s, ",gamma_{i}").unwrap();
    }
    s.push('\n');
    for j in 0..samples {
        let t = bp.horizon * j as f64 / (samples - 1) as f64;
        s.push_str(&sci(t));
        for q in affine_embed(bp, c, t)? {
            s.push(',');
            s.push_str(&sci(q));
        }
        s.push('\n');
    }
    Ok(fs::write(path, s)?)
}

fn write_path_coeffs(path: &Path, c: &SinePath) -> Result<()> {
    let mut s = String::from("mode,component,coefficient\n");
    for k in 1..=c.modes() {
        for j in 0..c.components() {
            writeln!(s, "{k},{},{}", j + 1, sci(c.coeff(k, j))).unwrap();
        }
    }
    Ok(fs::write(path, s)?)
}

fn write_field(path: &Path, sys: &DirichletProblem, c: &[f64], per_axis: usize) -> Result<()> {
    let two_d = sys.domain().dim() == 2;
    let mut s = String::from(if two_d { "x,y,phi\n" } else { "x,phi\n" });
    for (x, v) in sys.sample_field(c, per_axis) {
        for xi in x {
            s.push_str(&sci(xi));
            s.push(',');
        }
        s.push_str(&sci(v));
        s.push('\n');
    }
    Ok(fs::write(path, s)?)
}

fn write_field_coeffs(path: &Path, modes: &[EigenMode], c: &[f64]) -> Result<()> {
    let two_d = modes.first().is_some_and(|m| m.index.len() == 2);
    let mut s = String::from(if two_d { "k1,k2,coefficient\n" } else { "k1,coefficient\n" });
    for (m, v) in modes.iter().zip(c) {
        for k in &m.index {
            write!(s, "{k},").unwrap();
        }
        s.push_str(&sci(*v));
        s.push('\n');
    }
    Ok(fs::write(path, s)?)
}

fn write_solutions(path: &Path, run: &ReducedRun) -> Result<()> {
    let mut s = String::from("id,action,index,nullity,head_residual,tail_residual,certified\n");
    for (i, r) in run.solutions.iter().enumerate() {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            i + 1,
            sci(r.action),
            r.index,
            r.nullity,
            sci(r.head_residual),
            sci(r.tail_residual),
            r.certified
        )
        .unwrap();
    }
    Ok(fs::write(path, s)?)
}

fn write_log(path: &Path, header: &str, run: &ReducedRun) -> Result<()> {
    let mut s = format!("{header}\n");
    for o in &run.seeds {
        writeln!(
            s,
            "seed {}: converged={} newton_iterations={} tail_iterations={} head_residual={} tail_residual={}{}",
            o.seed_index,
            o.converged,
            o.iterations,
            o.tail_iterations,
            sci(o.head_residual),
            sci(o.tail_residual),
            o.message.as_deref().map(|m| format!(" message=\"{m}\"")).unwrap_or_default()
        )
        .unwrap();
        let hist: Vec<String> = o.history.iter().map(|h| sci(*h)).collect();
        writeln!(s, "  history {}", hist.join(" ")).unwrap();
    }
    for (i, r) in run.solutions.iter().enumerate() {
        writeln!(
            s,
            "solution {}: seed={} coefficients={} refinement={} drift={} full_residual={} quadrature_drift={} index={} nullity={} oracle_index={} index_method={}",
            i + 1,
            r.seed_index,
            r.coeffs.len(),
            r.refinement,
            r.refinement_drift.map(sci).unwrap_or_else(|| "none".into()),
            sci(r.full_residual),
            r.quadrature_drift.map(sci).unwrap_or_else(|| "none".into()),
            r.index,
            r.nullity,
            r.oracle_index.map(|v| v.to_string()).unwrap_or_else(|| "none".into()),
            r.index_method
        )
        .unwrap();
    }
    Ok(fs::write(path, s)?)
}

/// Index reports of one saved solution.
#[derive(Debug)]
pub struct IndexOutcome {
    pub schur: IndexReport,
    pub full: IndexReport,
    pub jacobi: Option<IndexReport>,
}

impl IndexOutcome {
    pub fn agree(&self) -> bool {
        let key = |r: &IndexReport| (r.index, r.nullity);
        key(&self.schur) == key(&self.full) && self.jacobi.as_ref().is_none_or(|j| key(j) == key(&self.schur))
    }

    pub fn render(&self) -> String {
        let jac = |f: fn(&IndexReport) -> usize| self.jacobi.as_ref().map(|j| f(j).to_string()).unwrap_or_else(|| "n/a".into());
        let mut s = format!(
            "schur={} full={} jacobi={} {}\n",
            self.schur.index,
            self.full.index,
            jac(|r| r.index),
            if self.agree() { "AGREE" } else { "DISAGREE" }
        );
        let degenerate = self.schur.nullity + self.full.nullity + self.jacobi.as_ref().map_or(0, |j| j.nullity) > 0;
        if degenerate {
            writeln!(
                s,
                "nullity: schur={} full={} jacobi={} (degenerate critical point)",
                self.schur.nullity,
                self.full.nullity,
                jac(|r| r.nullity)
            )
            .unwrap();
        }
        if let Some(j) = &self.jacobi {
            if j.nullity > 0 {
                s.push_str("warning: t=T is conjugate to t=0 (degenerate endpoint)\n");
            }
            if !j.conjugate_times.is_empty() {
                let times: Vec<String> = j.conjugate_times.iter().map(|t| format!("{t:.6}")).collect();
                writeln!(s, "conjugate times: {}", times.join(" ")).unwrap();
            }
        }
        s
    }
}

fn read_rows(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|f| f.trim().to_string()).collect())
        .collect())
}

fn field<T: std::str::FromStr>(row: &[String], i: usize, path: &Path) -> Result<T> {
    row.get(i)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::MissingArtifact(format!("{}: malformed row {row:?}", path.display())))
}

/// Recomputes the index of solution `id` from `coeffs_<id>.csv` by the Schur
/// complement, the full truncated matrix and (for paths) the Jacobi equation.
pub fn cmd_index(cfg: &RunConfig, id: usize) -> Result<IndexOutcome> {
    let setup = setup(cfg)?;
    let path = cfg.out_dir().join(format!("coeffs_{id}.csv"));
    let rows = read_rows(&path)?;
    match setup {
        Setup::Mechanical { bp, plan } => {
            let n = bp.dim();
            let mut modes = 0;
            for r in &rows {
                modes = modes.max(field::<usize>(r, 0, &path)?);
            }
            if modes == 0 || rows.len() != modes * n {
                return Err(Error::MissingArtifact(format!("{}: expected {n} components per mode", path.display())));
            }
            let mut c = SinePath::zeros(n, bp.horizon, modes);
            for r in &rows {
                let k: usize = field(r, 0, &path)?;
                let j: usize = field(r, 1, &path)?;
                if j == 0 || j > n {
                    return Err(Error::MissingArtifact(format!("{}: component {j} out of range", path.display())));
                }
                c.set_coeff(k, j - 1, field(r, 2, &path)?);
            }
            let blocks = hessian_blocks(&bp, &c, plan.cutoff.min(modes))?;
            Ok(IndexOutcome {
                schur: morse::index_schur(&blocks)?,
                full: morse::index_full(&blocks),
                jacobi: Some(morse::index_jacobi(&bp, &c, DEFAULT_JACOBI_STEPS)?),
            })
        }
        Setup::Dirichlet { dom, pot, plan } => {
            let width = dom.dim();
            let mut modes = Vec::with_capacity(rows.len());
            let mut coeffs = Vec::with_capacity(rows.len());
            for r in &rows {
                let index: Vec<usize> = (0..width).map(|i| field(r, i, &path)).collect::<Result<_>>()?;
                if index.contains(&0) {
                    return Err(Error::MissingArtifact(format!("{}: mode index must be positive", path.display())));
                }
                modes.push(EigenMode {
                    eigenvalue: dom.eigenvalue(&index),
                    index,
                });
                coeffs.push(field(r, width, &path)?);
            }
            let cut = modes.iter().fold(0.0f64, |a, m| a.max(m.eigenvalue));
            let sys = DirichletProblem::new(&dom, pot, modes, plan.cutoff, cut)?;
            let blocks = HessianBlocks::from_full(&sys.hessian(&coeffs), plan.cutoff, sys.stiffness().to_vec());
            Ok(IndexOutcome {
                schur: morse::index_schur(&blocks)?,
                full: morse::index_full(&blocks),
                jacobi: None,
            })
        }
    }
}
