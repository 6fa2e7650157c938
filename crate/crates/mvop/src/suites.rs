//! Identity suites: each suite evaluates a family of identities on one
//! configured measure and flow state and reports the largest residual per identity.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::blockmat::max_abs;
use crate::darboux::{
    connection_matrices, cd_transform_residual, cd_transform_residual_m, darboux_1d_residual,
    discrete_laxzs_residuals, discrete_toda_residuals, elementary_darboux, lu_ul_residuals, m_step_christoffel,
    resolvent_direct, resolvent_quasideterminant, tau_quotient_c, tau_quotient_p, Hyperplane, LatticeFamily,
};
use crate::error::{MvopError, Result};
use crate::measure::FlowState;
use crate::mindex::MultiIndex;
use crate::mvopr::{eval_p_quasideterminant, PolynomialSystem, SystemBuilder};
use crate::symmetry::{
    chi_equivariance_residual, invariant_time_check, isometry_right_inverse_residual, measure_invariance_residuals,
    representation_defect, shift_conjugation_residual, IsometryAction,
};
use crate::toda::{
    beta2_first_residual, beta2_second_residuals, beta_flow_defect, beta_tau_chain, discrete_continuous_residual,
    lax_residuals, miwa_consistency_check, mixed_toda_residuals, schrodinger_residual, beta_lattice_residual, beta_second_order_residual,
    third_order_residual, toda_equation_residual, FlowDerivativeConfig, FlowFamily,
};

pub const SCHEMA_VERSION: u32 = 1;

/// All suite names in report order.
pub const SUITES: [&str; 13] = [
    "cd",
    "christoffel",
    "darboux",
    "discrete-toda",
    "kp",
    "lax",
    "miwa",
    "orthogonality",
    "quasidet",
    "secondkind",
    "symmetry",
    "three-term",
    "toda",
];

/// Step sizes of the fixed `∂β` convergence study.
pub const CONVERGENCE_STEPS: [f64; 3] = [4e-3, 2e-3, 1e-3];

/// Finite-difference settings by derivative order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdSettings {
    /// First derivatives.
    pub first: FlowDerivativeConfig,
    /// Second and third derivatives.
    pub higher: FlowDerivativeConfig,
    /// Identities with fourth-order mixed derivatives.
    pub fourth: FlowDerivativeConfig,
}

impl Default for FdSettings {
    fn default() -> Self {
        Self {
            first: FlowDerivativeConfig::default(),
            higher: FlowDerivativeConfig { h: 4e-3, richardson: true },
            fourth: FlowDerivativeConfig { h: 1e-2, richardson: true },
        }
    }
}

/// Everything a suite needs.
#[derive(Debug, Clone)]
pub struct SuiteContext {
    pub builder: SystemBuilder,
    pub quad_order: usize,
    /// Base state: directions and offsets of the discrete flows and the continuous times.
    pub state: FlowState,
    pub seed: u64,
    pub samples: usize,
    pub fd: FdSettings,
    /// `r/|q|` of the Miwa check.
    pub miwa_ratio: f64,
    pub miwa_kmax: usize,
    pub tolerance_scale: f64,
    pub timing: bool,
}

impl SuiteContext {
    pub fn new(builder: SystemBuilder, quad_order: usize, state: FlowState) -> Self {
        Self {
            builder,
            quad_order,
            state,
            seed: 0,
            samples: 20,
            fd: FdSettings::default(),
            miwa_ratio: 1.0 / 3.0,
            miwa_kmax: 11,
            tolerance_scale: 1.0,
            timing: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.builder.dim()
    }

    pub fn usable(&self) -> usize {
        self.builder.usable
    }

    fn rng(&self, suite: &str) -> ChaCha8Rng {
        let salt = suite.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
        ChaCha8Rng::seed_from_u64(self.seed ^ salt)
    }

    fn inside(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.builder.spec.domain.iter().map(|&(a, b)| rng.random_range(a..b)).collect()
    }

    fn outside(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.builder
            .spec
            .domain
            .iter()
            .map(|&(a, b)| {
                let gap = (b - a) * rng.random_range(0.25..1.0);
                if rng.random_bool(0.5) { b + gap } else { a - gap }
            })
            .collect()
    }

    fn direction(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.dim()).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// State with the configured directions and offsets but no deformation.
    fn undeformed(&self) -> FlowState {
        FlowState::new(self.state.n.clone(), self.state.q.clone())
    }
}

/// One identity's outcome.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub suite: String,
    pub identity: String,
    pub paper_anchor: String,
    pub levels: usize,
    pub residual: Option<f64>,
    pub tolerance: f64,
    pub pass: bool,
    pub millis: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    pub numerical_breakdown: bool,
}

/// Machine-readable outcome of a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub measure: String,
    pub dim: usize,
    pub levels: usize,
    pub buffer: usize,
    pub quad_order: usize,
    pub seed: u64,
    pub tolerance_scale: f64,
    pub passed: usize,
    pub failed: usize,
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn all_pass(&self) -> bool {
        self.failed == 0
    }

    pub fn numerical_breakdown(&self) -> bool {
        self.rows.iter().any(|r| r.numerical_breakdown)
    }

    /// Fixed-width table for humans.
    pub fn summary_table(&self) -> String {
        let mut out = format!(
            "{:<14} {:<36} {:>6} {:>12} {:>10}  {}\n",
            "suite", "identity", "levels", "residual", "tolerance", "status"
        );
        for r in &self.rows {
            let res = r.residual.map_or_else(|| "error".to_string(), |v| format!("{v:.3e}"));
            out += &format!(
                "{:<14} {:<36} {:>6} {:>12} {:>10.1e}  {}\n",
                r.suite,
                r.identity,
                r.levels,
                res,
                r.tolerance,
                if r.pass { "PASS" } else { "FAIL" }
            );
        }
        out += &format!("{} passed, {} failed\n", self.passed, self.failed);
        out
    }
}

struct Rows<'a> {
    ctx: &'a SuiteContext,
    suite: &'static str,
    rows: Vec<ReportRow>,
}

impl<'a> Rows<'a> {
    fn new(ctx: &'a SuiteContext, suite: &'static str) -> Self {
        Self { ctx, suite, rows: Vec::new() }
    }

    fn check(&mut self, identity: &str, anchor: &str, levels: usize, tolerance: f64, f: impl FnOnce() -> Result<f64>) {
        let start = Instant::now();
        let out = f();
        let millis = self.ctx.timing.then(|| start.elapsed().as_millis() as u64);
        let tolerance = tolerance * self.ctx.tolerance_scale;
        let (residual, error, numerical) = match out {
            Ok(v) => (Some(v), None, false),
            Err(e) => (None, Some(e.to_string()), e.is_numerical()),
        };
        let pass = residual.is_some_and(|v| v.is_finite() && v <= tolerance);
        self.rows.push(ReportRow {
            suite: self.suite.to_string(),
            identity: identity.to_string(),
            paper_anchor: anchor.to_string(),
            levels,
            residual,
            tolerance,
            pass,
            millis,
            error,
            numerical_breakdown: numerical,
        });
    }

    /// Records a failure that prevents the whole suite from running.
    fn fail(&mut self, err: MvopError) {
        let l = self.ctx.usable();
        self.check("suite_setup", "setup", l, 0.0, || Err(err));
    }
}

fn max_over<I: IntoIterator<Item = Result<f64>>>(it: I) -> Result<f64> {
    let mut m: f64 = 0.0;
    for v in it {
        let v = v?;
        m = if v.is_nan() { f64::NAN } else { m.max(v) };
    }
    Ok(m)
}

fn pairs(d: usize) -> Vec<(usize, usize)> {
    (0..d).flat_map(|a| (0..d).map(move |b| (a, b))).collect()
}

fn rel_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    max_abs(&(a - b)) / (1.0 + max_abs(b))
}

fn rel_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    max_abs(&(a - b)) / max_abs(b).max(1e-300)
}

/// Runs the named suites and assembles a report sorted by suite then identity.
pub fn run_suites(ctx: &SuiteContext, names: &[String]) -> Result<Report> {
    for n in names {
        if !SUITES.contains(&n.as_str()) {
            return Err(MvopError::InvalidArgument(format!("unknown suite '{n}'")));
        }
    }
    let mut rows: Vec<ReportRow> = Vec::new();
    for name in SUITES.iter().filter(|s| names.iter().any(|n| n == *s)) {
        rows.extend(run_suite(ctx, name));
    }
    rows.sort_by(|a, b| (&a.suite, &a.identity).cmp(&(&b.suite, &b.identity)));
    let passed = rows.iter().filter(|r| r.pass).count();
    Ok(Report {
        schema_version: SCHEMA_VERSION,
        measure: ctx.builder.spec.description.clone(),
        dim: ctx.dim(),
        levels: ctx.usable(),
        buffer: ctx.builder.buffer,
        quad_order: ctx.quad_order,
        seed: ctx.seed,
        tolerance_scale: ctx.tolerance_scale,
        passed,
        failed: rows.len() - passed,
        rows,
    })
}

/// Rows of one suite; setup failures become a failed `suite_setup` row.
pub fn run_suite(ctx: &SuiteContext, name: &str) -> Vec<ReportRow> {
    let suite: &'static str = match SUITES.iter().find(|s| **s == name) {
        Some(s) => s,
        None => return Vec::new(),
    };
    let mut rows = Rows::new(ctx, suite);
    let out = match suite {
        "orthogonality" => orthogonality(ctx, &mut rows),
        "quasidet" => quasidet(ctx, &mut rows),
        "three-term" => three_term(ctx, &mut rows),
        "cd" => cd(ctx, &mut rows),
        "secondkind" => secondkind(ctx, &mut rows),
        "darboux" => darboux(ctx, &mut rows),
        "christoffel" => christoffel(ctx, &mut rows),
        "discrete-toda" => discrete_toda(ctx, &mut rows),
        "lax" => lax(ctx, &mut rows),
        "toda" => toda(ctx, &mut rows),
        "miwa" => miwa(ctx, &mut rows),
        "kp" => kp(ctx, &mut rows),
        _ => symmetry(ctx, &mut rows),
    };
    if let Err(e) = out {
        rows.fail(e);
    }
    rows.rows
}

fn base_system(ctx: &SuiteContext) -> Result<PolynomialSystem> {
    ctx.builder.system(&ctx.state)
}

fn orthogonality(ctx: &SuiteContext, rows: &mut Rows) -> Result<()> {
    let sys = base_system(ctx)?;
    let l = ctx.usable();
    rows.check("orthogonality", "Gram blocks of P against H", l, 1e-10, || {
        max_over(pairs(l).into_iter().map(|(k, j)| sys.orthogonality_residual(k, j)))
    });
    rows.check("h_symmetry", "H blocks are symmetric", l, 1e-12, || {
        Ok((0..l).map(|k| rel_mat(&sys.h(k).transpose(), sys.h(k))).fold(0.0, f64::max))
    });
    Ok(())
}

fn quasidet(ctx: &SuiteContext, rows: &mut Rows) -> Result<()> {
    let sys = base_system(ctx)?;
    let l = ctx.usable();
    let mut rng = ctx.rng("quasidet");
    let pts: Vec<Vec<f64>> = (0..ctx.samples).map(|_| ctx.inside(&mut rng)).collect();
    rows.check("factorization", "S G S^T = H", l, 1e-11, || sys.factorization_residual(l));
    rows.check("quasi_tau", "H as last quasi-determinant", l, 1e-10, || {
        max_over((0..l).map(|k| sys.quasi_tau_residual(k)))
    });
    rows.check("p_schur_complement", "P as Schur complement", l, 1e-10, || {
        max_over(pts.iter().flat_map(|x| {
            let sys = &sys;
            (0..l).map(move |k| Ok(rel_diff(&eval_p_quasideterminant(&sys.moments, k, x)?, &sys.p(k, x))))
        }))
    });
    Ok(())
}

fn three_term(ctx: &SuiteContext, rows: &mut Rows) -> Result<()> {
    let sys = base_system(ctx)?;
    let l = ctx.usable();
    let mut rng = ctx.rng("three-term");
    let pts: Vec<(Vec<f64>, Vec<f64>)> = (0..ctx.samples).map(|_| (ctx.inside(&mut rng), ctx.direction(&mut rng))).collect();
    rows.check("three_term", "three-term relation for P", l, 1e-10, || {
        max_over(pts.iter().flat_map(|(x, n)| {
            let sys = &sys;
            (0..l - 1).map(move |k| sys.three_term_residual(n, k, x))
        }))
    });
    rows.check("jacobi_conjugation", "J^T = H^-1 J H", l, 1e-10, || {
        max_over(pts.iter().take(3).map(|(_, n)| sys.jacobi_conjugation_residual(n)))
    });
    Ok(())
}

fn cd(ctx: &SuiteContext, rows: &mut Rows) -> Result<()> {
    let sys = base_system(ctx)?;
    let l = ctx.usable();
    let mut rng = ctx.rng("cd");
    let pts: Vec<[Vec<f64>; 3]> =
        (0..ctx.samples).map(|_| [ctx.inside(&mut rng), ctx.inside(&mut rng), ctx.direction(&mut rng)]).collect();
    rows.check("cd_formula", "Christoffel-Darboux formula", l, 1e-9, || {
        max_over(pts.iter().flat_map(|[x, y, n]| {
            let sys = &sys;
            (1..l).map(move |j| sys.cd_formula_residual(j, n, x, y))
        }))
    });
    let polys: Vec<DVector<f64>> = (1..=l)
        .map(|j| DVector::from_fn(sys.layout.offset(j), |_, _| rng.random_range(-1.0..1.0)))
        .collect();
    rows.check("cd_projection", "kernel projects onto degree < l", l, 1e-9, || {
        max_over(pts.iter().take(5).flat_map(|[x, _, _]| {
            let (sys, polys) = (&sys, &polys);
            (1..=l).map(move |j| sys.cd_projection_residual(j, &polys[j - 1], x))
        }))
    });
    rows.check("cd_reproducing", "reproducing property of the kernel", l, 1e-9, || {
        max_over(pts.iter().take(5).flat_map(|[x, y, _]| {
            let sys = &sys;
            (1..=l).map(move |j| sys.cd_reproducing_residual(j, x, y))
        }))
    });
    Ok(())
}

fn secondkind(ctx: &SuiteContext, rows: &mut Rows) -> Result<()> {
    let sys = base_system(ctx)?;
    let l = ctx.usable();
    let mut rng = ctx.rng("secondkind");
    let pts: Vec<[Vec<f64>; 3]> =
        (0..ctx.samples).map(|_| [ctx.outside(&mut rng), ctx.outside(&mut rng), ctx.direction(&mut rng)]).collect();
    rows.check("secondkind_three_term", "three-term relation for C", l, 1e-8, || {
        max_over(pts.iter().flat_map(|[z, _, n]| {
            let sys = &sys;
            (0..l - 1).map(move |k| sys.secondkind_three_term_residual(n, k, z))
        }))
    });
    rows.check("q_kernel", "second-kind Christoffel-Darboux formula", l, 1e-7, || {
        max_over(pts.iter().take(5).flat_map(|[z, w, n]| {
            let sys = &sys;
            (1..l).map(move |j| sys.q_kernel_residual(j, n, z, w))
        }))
    });
    Ok(())
}

fn first_hyperplane(ctx: &SuiteContext) -> Hyperplane {
    Hyperplane::new(ctx.state.direction(0), ctx.state.q[0])
}

fn second_hyperplane(ctx: &SuiteContext) -> Hyperplane {
    if ctx.dim() > 1 {
        Hyperplane::new(ctx.state.direction(1), ctx.state.q[1])
    } else {
        Hyperplane::new(ctx.state.direction(0), 1.25 * ctx.state.q[0])
    }
}

fn node_radius(ctx: &SuiteContext) -> f64 {
    1.5 * ctx.builder.spec.axis_radius().into_iter().fold(0.0, f64::max)
}

fn darboux(ctx: &SuiteContext, rows: &mut Rows) -> Result<()> {
    let l = ctx.usable();
    let base = ctx.undeformed();
    let sys = ctx.builder.system(&base)?;
    let hp = first_hyperplane(ctx);
    let direct = ctx.builder.system_reweighted(&base, |x| hp.factor(x))?;
    let kmax = l - 2;
    let radius = node_radius(ctx);
    let e1 = elementary_darboux(&sys, &hp, kmax, radius, ctx.seed)?;
    let mut rng = ctx.rng("darboux");
    let pts: Vec<[Vec<f64>; 3]> =
        (0..5).map(|_| [ctx.inside(&mut rng), ctx.inside(&mut rng), ctx.outside(&mut rng)]).collect();
    rows.check("elementary_tp", "one-step Christoffel formula for TP", l, 1e-8, || {
        max_over(pts.iter().flat_map(|[x, _, _]| {
            let (e1, sys, direct) = (&e1, &sys, &direct);
            (0..=kmax).map(move |k| Ok(rel_diff(&e1.tp(sys, k, x)?, &direct.p(k, x))))
        }))
    });
    rows.check("elementary_th", "one-step Christoffel formula for TH", l, 1e-8, || {
        Ok((0..=kmax).map(|k| rel_mat(&e1.th[k], direct.h(k))).fold(0.0, f64::max))
    });
    rows.check("elementary_tc", "one-step Christoffel formula for TC", l, 1e-8, || {
        max_over(pts.iter().flat_map(|[_, _, z]| {
            let (e1, sys, direct) = (&e1, &sys, &direct);
            (0..=kmax).map(move |k| Ok(rel_diff(&e1.tc(sys, k, z)?, &direct.eval_c(k, z)?)))
        }))
    });
    rows.check("node_independence", "TP independent of the poised nodes", l, 1e-7, || {
        let e2 = elementary_darboux(&sys, &hp, kmax, radius, ctx.seed.wrapping_add(1_000_003))?;
        max_over(pts.iter().flat_map(|[x, _, _]| {
            let (e1, e2, sys) = (&e1, &e2, &sys);
            (0..=kmax).map(move |k| Ok(rel_diff(&e1.tp(sys, k, x)?, &e2.tp(sys, k, x)?)))
        }))
    });
    rows.check("cd_one_step", "kernel under one Christoffel step", l, 1e-8, || {
        max_over(pts.iter().flat_map(|[x, y, _]| {
            let (sys, direct, hp) = (&sys, &direct, &hp);
            (1..l).map(move |j| cd_transform_residual(sys, direct, hp, j, x, y))
        }))
    });
    if ctx.dim() == 1 {
        rows.check("darboux_1d", "one-dimensional kernel polynomials", l, 1e-10, || {
            let q = hp.q / hp.n[0];
            max_over(pts.iter().flat_map(|[x, _, _]| {
                let (sys, direct) = (&sys, &direct);
                (1..l).map(move |k| darboux_1d_residual(sys, direct, q, k, x[0]))
            }))
        });
    }
    Ok(())
}

fn christoffel(ctx: &SuiteContext, rows: &mut Rows) -> Result<()> {
    let l = ctx.usable();
    let base = ctx.undeformed();
    let sys = ctx.builder.system(&base)?;
    let hps = [first_hyperplane(ctx), second_hyperplane(ctx)];
    let direct = ctx.builder.system_reweighted(&base, |x| hps[0].factor(x) * hps[1].factor(x))?;
    let kmax = l - 2;
    let m2 = m_step_christoffel(&sys, &hps, kmax, node_radius(ctx), ctx.seed)?;
    let mut rng = ctx.rng("christoffel");
    let pts: Vec<[Vec<f64>; 2]> = (0..5).map(|_| [ctx.inside(&mut rng), ctx.inside(&mut rng)]).collect();
    rows.check("two_step_tp", "two-step Christoffel formula for TP", l, 1e-7, || {
        max_over(pts.iter().flat_map(|[x, _]| {
            let (m2, sys, direct) = (&m2, &sys, &direct);
            (0..=kmax).map(move |k| Ok(rel_diff(&m2.tp(sys, k, x)?, &direct.p(k, x))))
        }))
    });
    rows.check("two_step_th", "two-step Christoffel formula for TH", l, 1e-7, || {
        Ok((0..=kmax).map(|k| rel_mat(&m2.th[k], direct.h(k))).fold(0.0, f64::max))
    });
    rows.check("resolvent_routes", "resolvent from samples and from factors", l, 1e-7, || {
        let dir = resolvent_direct(&sys, &direct, &hps, kmax)?;
        let mut m: f64 = 0.0;
        for (dk, ok) in dir.iter().zip(&m2.omega).take(kmax + 1) {
            for (d, o) in dk.iter().zip(ok).take(hps.len() + 1) {
                m = m.max(max_abs(&(d - o)) / (1.0 + max_abs(d)));
            }
        }
        Ok(m)
    });
    rows.check("cd_two_step", "kernel under two Christoffel steps", l, 1e-7, || {
        let om = resolvent_direct(&sys, &direct, &hps, l - 2)?;
        max_over(pts.iter().flat_map(|[x, y]| {
            let (sys, direct, hps, om) = (&sys, &direct, &hps, &om);
            (2..l).map(move |j| cd_transform_residual_m(sys, direct, hps, om, j, x, y))
        }))
    });
    let fam = LatticeFamily::new(ctx.builder.clone(), base.clone());
    rows.check("tau_quotient_p", "P at N^-1 q from shifted H", l, 1e-8, || {
        let ninv = base
            .n
            .clone()
            .try_inverse()
            .ok_or_else(|| MvopError::InvalidArgument("N is singular".into()))?;
        let pt = ninv * DVector::from_column_slice(&base.q);
        max_over((0..l.min(4)).map(|k| Ok(rel_diff(&tau_quotient_p(&fam, k)?, &sys.p(k, pt.as_slice())))))
    });
    rows.check("tau_quotient_c", "C at q from shifted H", l, 1e-6, || {
        let diag = FlowState::new(DMatrix::identity(ctx.dim(), ctx.dim()), base.q.clone());
        let fam = LatticeFamily::new(ctx.builder.clone(), diag);
        let s = fam.at(&vec![0; ctx.dim()])?;
        max_over((0..l.min(3)).map(|k| Ok(rel_diff(&tau_quotient_c(&fam, k)?, &s.eval_c(k, &base.q)?))))
    });
    Ok(())
}

fn discrete_toda(ctx: &SuiteContext, rows: &mut Rows) -> Result<()> {
    let l = ctx.usable();
    let d = ctx.dim();
    let fam = LatticeFamily::new(ctx.builder.clone(), ctx.undeformed());
    let s = fam.at(&vec![0; d])?;
    rows.check("connection_routes", "rho and alpha by two routes", l, 1e-8, || {
        max_over((0..d).map(|a| Ok(fam.connection(&vec![0; d], a)?.route_gap)))
    });
    rows.check("lu_ul", "LU and UL factorizations of the Jacobi matrix", l, 1e-8, || {
        max_over((0..d).map(|a| {
            let t = fam.at(&fam.unit(a))?;
            let (lu, ul) = lu_ul_residuals(&s, &t, &fam.direction(a), fam.offset(a))?;
            Ok(lu.max(ul))
        }))
    });
    rows.check("resolvent_quasideterminant", "connection blocks as quasi-determinants", l, 1e-8, || {
        let mut m: f64 = 0.0;
        for a in 0..d {
            let t = fam.at(&fam.unit(a))?;
            let (n, q) = (fam.direction(a), fam.offset(a));
            let c = connection_matrices(&s, &t, &n, q)?;
            for k in 0..l - 1 {
                let (rho, alpha) = resolvent_quasideterminant(&s, &n, q, k)?;
                m = m.max(rel_mat(&alpha, &c.alpha[k]));
                if let Some(r) = rho {
                    m = m.max(max_abs(&(r - &c.rho[k])) / (1.0 + max_abs(&c.rho[k])));
                }
            }
        }
        Ok(m)
    });
    let laxzs: Vec<[f64; 4]> = pairs(d).into_iter().map(|(a, b)| discrete_laxzs_residuals(&fam, a, b)).collect::<Result<_>>()?;
    let pick = |i: usize| laxzs.iter().map(|r| r[i]).fold(0.0, f64::max);
    rows.check("discrete_lax_omega", "discrete Lax pair for omega", l, 1e-8, || Ok(pick(0)));
    rows.check("discrete_lax_m", "discrete Lax pair for M", l, 1e-8, || Ok(pick(1)));
    rows.check("discrete_zs_omega", "discrete Zakharov-Shabat for omega", l, 1e-8, || Ok(pick(2)));
    rows.check("discrete_zs_m", "discrete Zakharov-Shabat for M", l, 1e-8, || Ok(pick(3)));
    let toda: Vec<(f64, f64)> = pairs(d)
        .into_iter()
        .flat_map(|(a, b)| (1..l - 1).map(move |k| (a, b, k)))
        .map(|(a, b, k)| discrete_toda_residuals(&fam, a, b, k))
        .collect::<Result<_>>()?;
    rows.check("discrete_toda_h", "discrete Toda equation for H", l, 1e-8, || {
        Ok(toda.iter().map(|r| r.0).fold(0.0, f64::max))
    });
    rows.check("discrete_toda_beta", "discrete Toda equation for beta", l, 1e-8, || {
        Ok(toda.iter().map(|r| r.1).fold(0.0, f64::max))
    });
    Ok(())
}

fn lax(ctx: &SuiteContext, rows: &mut Rows) -> Result<()> {
    let l = ctx.usable();
    let fam = FlowFamily::new(ctx.builder.clone());
    let res = (0..ctx.dim()).map(|a| lax_residuals(&fam, &ctx.state, a, &ctx.fd.first)).collect::<Result<Vec<_>>>()?;
    rows.check("dressing", "dS/dt S^-1 = -(J)_-", l, 1e-6, || Ok(res.iter().map(|r| r.dressing).fold(0.0, f64::max)));
    rows.check("beta_flow", "dbeta/dt against J", l, 1e-6, || Ok(res.iter().map(|r| r.beta).fold(0.0, f64::max)));
    rows.check("h_flow", "dH/dt H^-1 against J", l, 1e-6, || Ok(res.iter().map(|r| r.h_diag).fold(0.0, f64::max)));
    Ok(())
}

/// Defect of `∂β/∂t_a` per step size of [`CONVERGENCE_STEPS`], maximized over `a` and `k`.
pub fn beta_convergence_defects(ctx: &SuiteContext, fam: &FlowFamily, steps: &[f64]) -> Result<Vec<f64>> {
    steps
        .iter()
        .map(|&h| {
            let cfg = FlowDerivativeConfig::new(h, false)?;
            max_over((0..ctx.dim()).flat_map(|a| (1..ctx.usable() - 1).map(move |k| (a, k))).map(|(a, k)| {
                beta_flow_defect(fam, &ctx.state, a, k, &cfg)
            }))
        })
        .collect()
}

fn toda(ctx: &SuiteContext, rows: &mut Rows) -> Result<()> {
    let l = ctx.usable();
    let d = ctx.dim();
    let fam = FlowFamily::new(ctx.builder.clone());
    let at = &ctx.state;
    let ks = 1..l - 1;
    rows.check("beta_flow_convergence", "order-2 convergence of dbeta/dt", l, 0.5, || {
        let defects = beta_convergence_defects(ctx, &fam, &CONVERGENCE_STEPS)?;
        Ok(defects.windows(2).map(|w| (w[0] / w[1] - 4.0).abs()).fold(0.0, f64::max))
    });
    rows.check("beta_flow", "dbeta/dt = -(J)_{k,k-1}", l, 1e-6, || {
        max_over((0..d).flat_map(|a| ks.clone().map(move |k| (a, k))).map(|(a, k)| {
            beta_flow_defect(&fam, at, a, k, &ctx.fd.first)
        }))
    });
    let eqs: Vec<(f64, f64)> = pairs(d)
        .into_iter()
        .flat_map(|(a, b)| ks.clone().map(move |k| (a, b, k)))
        .map(|(a, b, k)| toda_equation_residual(&fam, at, a, b, k, &ctx.fd.higher))
        .collect::<Result<_>>()?;
    rows.check("toda_h_form", "2D Toda equation for H", l, 1e-5, || Ok(eqs.iter().map(|r| r.0).fold(0.0, f64::max)));
    rows.check("toda_beta_form", "2D Toda equation for beta", l, 1e-5, || {
        Ok(eqs.iter().map(|r| r.1).fold(0.0, f64::max))
    });
    rows.check("mixed_toda", "mixed difference-differential Toda", l, 1e-5, || {
        max_over(pairs(d).into_iter().flat_map(|(a, b)| ks.clone().map(move |k| (a, b, k))).map(|(a, b, k)| {
            mixed_toda_residuals(&fam, at, a, b, k, &ctx.fd.higher).map(|(x, y)| x.max(y))
        }))
    });
    rows.check("beta_tau_chain", "beta from gradients of H", l, 1e-6, || {
        max_over((0..l - 1).map(|k| beta_tau_chain(&fam, at, k, &ctx.fd.first).map(|(x, y)| x.max(y))))
    });
    Ok(())
}

/// Least-squares slope of `ln y` against `x`.
pub fn log_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mx = x.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Miwa deviations for `K = 1 … kmax` along the first direction, with `q = r/ratio`.
pub fn miwa_deviations(ctx: &SuiteContext) -> Result<Vec<f64>> {
    let n = ctx.state.direction(0);
    let r = ctx
        .builder
        .spec
        .corners()
        .iter()
        .map(|c| c.iter().zip(&n).map(|(x, y)| x * y).sum::<f64>().abs())
        .fold(0.0, f64::max);
    let q = r / ctx.miwa_ratio;
    (1..=ctx.miwa_kmax).map(|k| miwa_consistency_check(&ctx.builder, &n, q, k)).collect()
}

fn miwa(ctx: &SuiteContext, rows: &mut Rows) -> Result<()> {
    let l = ctx.usable();
    if ctx.miwa_kmax < 8 {
        return Err(MvopError::InvalidArgument("miwa needs kmax ≥ 8".into()));
    }
    let dev = miwa_deviations(ctx)?;
    rows.check("miwa_deviation_k8", "truncated Miwa shift against exact factor", l, 1e-3, || Ok(dev[7]));
    rows.check("miwa_slope", "decay rate r/|q| of (K+1) times the deviation", l, 0.2, || {
        let ks: Vec<f64> = (2..=ctx.miwa_kmax).map(|k| k as f64).collect();
        let scaled: Vec<f64> = ks.iter().zip(&dev[1..]).map(|(k, v)| (k + 1.0) * v).collect();
        let slope = log_slope(&ks, &scaled);
        Ok((slope / ctx.miwa_ratio.ln() - 1.0).abs())
    });
    Ok(())
}

fn kp(ctx: &SuiteContext, rows: &mut Rows) -> Result<()> {
    let l = ctx.usable();
    let d = ctx.dim();
    let fam = FlowFamily::new(ctx.builder.clone());
    let at = &ctx.state;
    let fd = ctx.fd;
    let ks: Vec<usize> = (1..l - 1).collect();
    let mut rng = ctx.rng("kp");
    let z = ctx.inside(&mut rng);
    let w = ctx.outside(&mut rng);
    let grid = |f: &dyn Fn(usize, usize, usize) -> Result<f64>| -> Result<f64> {
        max_over(pairs(d).into_iter().flat_map(|(a, b)| ks.iter().map(move |&k| (a, b, k))).map(|(a, b, k)| f(a, b, k)))
    };
    rows.check("beta_lattice", "dbeta/dn against discrete steps", l, 1e-5, || {
        grid(&|a, b, k| beta_lattice_residual(&fam, at, a, b, k, &fd.first))
    });
    rows.check("second_order", "second-order equation for beta", l, 1e-4, || {
        grid(&|a, b, k| {
            let r1 = beta_second_order_residual(&fam, at, [a, a, b, b], k, &fd.higher)?;
            Ok(r1.max(beta_second_order_residual(&fam, at, [a, b, a, b], k, &fd.higher)?))
        })
    });
    rows.check("schrodinger", "Schrodinger form for the wave function", l, 1e-5, || {
        grid(&|a, b, k| schrodinger_residual(&fam, at, a, b, k, &z, &fd.higher))
    });
    rows.check("third_order", "third-order linear equation", l, 1e-4, || {
        grid(&|a, b, k| third_order_residual(&fam, at, [a, a, b], k, &z, &fd.higher))
    });
    rows.check("discrete_continuous", "d/dn_a against T_a on Psi and C", l, 1e-6, || {
        grid(&|a, _, k| {
            let (p, c) = discrete_continuous_residual(&fam, at, a, k, &z, Some(&w), &fd.first)?;
            Ok(p.max(c.unwrap_or(0.0)))
        })
    });
    let ks2: Vec<usize> = (2..l - 1).collect();
    rows.check("beta2_first", "first equation for beta and beta2", l, 1e-5, || {
        max_over((0..d).flat_map(|a| ks2.iter().map(move |&k| (a, k))).map(|(a, k)| beta2_first_residual(&fam, at, a, k, &fd.higher)))
    });
    rows.check("beta2_second", "compatibility for beta and beta2", l, 1e-4, || {
        max_over(pairs(d).into_iter().flat_map(|(a, b)| ks2.iter().map(move |&k| (a, b, k))).map(|(a, b, k)| {
            beta2_second_residuals(&fam, at, a, b, k, &fd.fourth).map(|(s, g)| s.max(g))
        }))
    });
    Ok(())
}

/// Exact symmetries of the box `[−1, 1]^D` used by the suite.
pub fn box_isometries(dim: usize) -> Vec<(&'static str, DMatrix<f64>)> {
    match dim {
        1 => vec![("reflection", DMatrix::from_element(1, 1, -1.0))],
        2 => vec![
            ("swap", DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])),
            ("quarter_turn", DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0])),
        ],
        _ => {
            let mut cyc = DMatrix::zeros(dim, dim);
            for a in 0..dim {
                cyc[((a + 1) % dim, a)] = 1.0;
            }
            let mut quarter = DMatrix::identity(dim, dim);
            quarter[(0, 0)] = 0.0;
            quarter[(1, 1)] = 0.0;
            quarter[(0, 1)] = -1.0;
            quarter[(1, 0)] = 1.0;
            vec![("cyclic", cyc), ("quarter_turn", quarter)]
        }
    }
}

/// Random orthogonal matrix from the QR factorization of a Gaussian-like matrix.
pub fn random_orthogonal(dim: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
    a.qr().q()
}

fn symmetry(ctx: &SuiteContext, rows: &mut Rows) -> Result<()> {
    let l = ctx.usable();
    let d = ctx.dim();
    let mut rng = ctx.rng("symmetry");
    let radial = (0..d).fold(FlowState::zero(d), |s, a| s.with_time(&MultiIndex::unit(d, a).add_axis(a), -0.2));
    let zero = ctx.builder.system(&FlowState::zero(d))?;
    let flowed = ctx.builder.system(&radial)?;
    let samples: Vec<(Vec<f64>, Vec<f64>)> = (0..5).map(|_| (ctx.inside(&mut rng), ctx.inside(&mut rng))).collect();
    let n = ctx.direction(&mut rng);
    for (name, r) in box_isometries(d) {
        let act = IsometryAction::new(r, zero.levels())?;
        let res = measure_invariance_residuals(&zero, &act, &n, &samples)?;
        for (id, v) in res.named() {
            rows.check(&format!("{name}_{id}"), "invariance under a symmetry of the measure", l, 1e-10, || Ok(v));
        }
        rows.check(&format!("{name}_structure"), "eta = M^-1 [R] M", l, 1e-10, || Ok(act.structure_defect()));
        rows.check(&format!("{name}_invariant_flow"), "invariant times preserve the symmetry", l, 1e-10, || {
            let (ok, defect) = invariant_time_check(&act, &radial);
            if !ok {
                return Ok(defect);
            }
            Ok(measure_invariance_residuals(&flowed, &act, &n, &samples)?.max())
        });
    }
    let r1 = random_orthogonal(d, &mut rng);
    let r2 = random_orthogonal(d, &mut rng);
    let x = ctx.inside(&mut rng);
    rows.check("representation", "eta of products and inverses", l, 1e-10, || {
        let (p, i) = representation_defect(&r1, &r2, zero.levels())?;
        Ok(p.max(i))
    });
    let act = IsometryAction::new(r1.clone(), zero.levels())?;
    rows.check("chi_equivariance", "chi(Rx) = eta chi(x)", l, 1e-10, || Ok(chi_equivariance_residual(&act, &x)));
    rows.check("shift_conjugation", "(Rn).Lambda = eta (n.Lambda) eta^-1", l, 1e-10, || {
        Ok(shift_conjugation_residual(&act, &n))
    });
    rows.check("right_inverse", "right inverse of n.Lambda via an isometry", l, 1e-10, || {
        Ok((0..d).map(|a| isometry_right_inverse_residual(&act, a)).fold(0.0, f64::max))
    });
    Ok(())
}

/// One point of an h-sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub suite: String,
    pub identity: String,
    pub h: f64,
    pub residual: f64,
}

/// Least-squares slope of `ln r` against `ln h`.
pub fn loglog_slope(h: &[f64], r: &[f64]) -> f64 {
    let lh: Vec<f64> = h.iter().map(|v| v.ln()).collect();
    log_slope(&lh, r)
}

fn fd_sweep(ctx: &SuiteContext, suite: &str, h: f64) -> Result<Vec<(&'static str, f64)>> {
    let cfg = FlowDerivativeConfig::new(h, false)?;
    let fam = FlowFamily::new(ctx.builder.clone());
    let at = &ctx.state;
    let d = ctx.dim();
    let ks = 1..ctx.usable() - 1;
    let grid = |f: &dyn Fn(usize, usize, usize) -> Result<f64>| -> Result<f64> {
        max_over(pairs(d).into_iter().flat_map(|(a, b)| ks.clone().map(move |k| (a, b, k))).map(|(a, b, k)| f(a, b, k)))
    };
    Ok(match suite {
        "lax" => {
            let res = (0..d).map(|a| lax_residuals(&fam, at, a, &cfg)).collect::<Result<Vec<_>>>()?;
            vec![
                ("beta_flow", res.iter().map(|r| r.beta).fold(0.0, f64::max)),
                ("h_flow", res.iter().map(|r| r.h_diag).fold(0.0, f64::max)),
            ]
        }
        "toda" => vec![
            ("beta_flow", grid(&|a, _, k| beta_flow_defect(&fam, at, a, k, &cfg))?),
            ("mixed_toda", grid(&|a, b, k| mixed_toda_residuals(&fam, at, a, b, k, &cfg).map(|(x, y)| x.max(y)))?),
            ("toda_h_form", grid(&|a, b, k| toda_equation_residual(&fam, at, a, b, k, &cfg).map(|r| r.0))?),
        ],
        _ => {
            let mut rng = ctx.rng("kp");
            let z = ctx.inside(&mut rng);
            vec![
                ("beta_lattice", grid(&|a, b, k| beta_lattice_residual(&fam, at, a, b, k, &cfg))?),
                (
                    "discrete_continuous",
                    grid(&|a, _, k| discrete_continuous_residual(&fam, at, a, k, &z, None, &cfg).map(|r| r.0))?,
                ),
            ]
        }
    })
}

/// `(h, residual)` per identity: finite-difference identities with plain central differences at each `h`,
/// exact identities repeated at their single residual.
pub fn convergence_table(ctx: &SuiteContext, names: &[String], steps: &[f64]) -> Result<Vec<ConvergenceRow>> {
    if steps.is_empty() {
        return Err(MvopError::InvalidArgument("empty step list".into()));
    }
    let mut out = Vec::new();
    for suite in SUITES.iter().filter(|s| names.iter().any(|n| n == *s)) {
        if matches!(*suite, "lax" | "toda" | "kp") {
            for &h in steps {
                for (identity, residual) in fd_sweep(ctx, suite, h)? {
                    out.push(ConvergenceRow { suite: suite.to_string(), identity: identity.into(), h, residual });
                }
            }
        } else {
            for row in run_suite(ctx, suite) {
                let residual = row.residual.ok_or_else(|| {
                    MvopError::InvalidArgument(format!("{}/{}: {}", row.suite, row.identity, row.error.unwrap_or_default()))
                })?;
                for &h in steps {
                    out.push(ConvergenceRow { suite: row.suite.clone(), identity: row.identity.clone(), h, residual });
                }
            }
        }
    }
    out.sort_by(|a, b| (&a.suite, &a.identity).cmp(&(&b.suite, &b.identity)).then(b.h.total_cmp(&a.h)));
    Ok(out)
}
