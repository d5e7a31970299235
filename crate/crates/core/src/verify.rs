//! Checks of the fixed-point and linear-stability theory of GAD: fixed-point
//! residuals, Morse-index classification, the closed-form GAD spectrum versus
//! a finite-difference Jacobian of the full dynamics, a damped Newton baseline,
//! and basin scans on 2D grids.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{flat_rhs, GadVariant, StateLayout, VariantKind};
use crate::error::{GadError, GadResult, Warning};
use crate::integrate::{run_gad, tracked_eigenvalues, RunConfig};
use crate::jacobian::{adjoint_action, assemble_jacobian, eig_dense, jvp, JvpConfig};
use crate::model::{
    check_dim, inf_norm, normalize_pair, DirectionPair, GadState, Matrix, ProblemSpec, SaddleReport, Vector,
};

/// Eigenvalues with `|Re| <` this are neither stable nor unstable.
pub const MARGINAL_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct IndexClassification {
    pub morse_index: usize,
    pub spectrum: Vec<Complex<f64>>,
    pub warning: Option<Warning>,
}

/// Number of Jacobian eigenvalues with positive real part at `x`.
pub fn classify_index(problem: &ProblemSpec, x: &Vector, cfg: &JvpConfig) -> GadResult<IndexClassification> {
    let j = assemble_jacobian(problem, x, cfg)?;
    let spectrum = eig_dense(&j)?.values;
    let morse_index = spectrum.iter().filter(|l| l.re >= MARGINAL_TOLERANCE).count();
    let marginal = spectrum.iter().filter(|l| l.re.abs() < MARGINAL_TOLERANCE).count();
    Ok(IndexClassification {
        morse_index,
        spectrum,
        warning: (marginal > 0).then_some(Warning::MarginalSpectrum { count: marginal }),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixedPointCheck {
    pub force: f64,
    pub right_residual: f64,
    pub left_residual: f64,
    pub alpha_beta_gap: f64,
    pub pass: bool,
}

/// Residuals of the fixed-point characterization at the end of a run:
/// `F(x) = 0`, `J v = lambda v`, `J^T w = lambda w`, `alpha = beta`.
pub fn verify_fixed_point(
    problem: &ProblemSpec,
    report: &SaddleReport,
    state: &GadState,
    variant: &GadVariant,
    cfg: &RunConfig,
) -> GadResult<FixedPointCheck> {
    let x = &state.x;
    let force = inf_norm(&problem.field(x)?);
    let (v, w) = match state.pairs.first() {
        Some(p) => (p.v.clone(), p.w().clone()),
        None => {
            let m = crate::jacobian::hessian_smallest_eigvec(problem, x, &cfg.jvp)?;
            (m.v.clone(), m.v)
        }
    };
    let lambda = match variant.kind {
        VariantKind::Index2Complex => f64::NAN,
        _ => tracked_eigenvalues(problem, state, variant, &cfg.jvp)?.0[0].re,
    };
    let jv = jvp(problem, x, &v, &cfg.jvp)?;
    let jtw = adjoint_action(problem, x, &w, &cfg.jvp)?;
    let a = problem.dot(&v, &jv);
    let b = 2.0 * problem.dot(&w, &jv) - a;
    let right_residual = inf_norm(&(jv - &v * lambda));
    let left_residual = inf_norm(&(jtw - &w * lambda));
    let alpha_beta_gap = (a - b).abs();
    let bound = 10.0 * cfg.tol_force;
    let pass = report.converged
        && force <= bound
        && right_residual <= bound
        && left_residual <= bound
        && alpha_beta_gap <= bound;
    Ok(FixedPointCheck {
        force,
        right_residual,
        left_residual,
        alpha_beta_gap,
        pass,
    })
}

/// Smallest pairwise gap accepted as "distinct" eigenvalues.
pub const DISTINCT_TOLERANCE: f64 = 1e-10;

/// Linearized spectrum of GAD at `(x_s, v_i, w_i)` given the `n` distinct real
/// eigenvalues of `J(x_s)`: `-2 l_i` (twice), `-l_i`, `l_j` and `l_j - l_i`
/// (twice) for `j != i`; `3n` values, `i` is zero-based.
pub fn gad_spectrum_expected(lambdas: &[f64], i: usize) -> GadResult<Vec<f64>> {
    let n = lambdas.len();
    if i >= n {
        return Err(GadError::Dimension { expected: n, found: i });
    }
    check_distinct(lambdas)?;
    let li = lambdas[i];
    let mut out = Vec::with_capacity(3 * n);
    out.extend([-2.0 * li, -2.0 * li, -li]);
    for (j, &lj) in lambdas.iter().enumerate() {
        if j != i {
            out.extend([lj, lj - li, lj - li]);
        }
    }
    Ok(out)
}

/// Same spectrum for gradient GAD with `w` aliased to `v` (`2n` values, each
/// family once).
pub fn gad_spectrum_expected_gradient(lambdas: &[f64], i: usize) -> GadResult<Vec<f64>> {
    let n = lambdas.len();
    if i >= n {
        return Err(GadError::Dimension { expected: n, found: i });
    }
    check_distinct(lambdas)?;
    let li = lambdas[i];
    let mut out = vec![-2.0 * li, -li];
    for (j, &lj) in lambdas.iter().enumerate() {
        if j != i {
            out.extend([lj, lj - li]);
        }
    }
    Ok(out)
}

fn check_distinct(lambdas: &[f64]) -> GadResult<()> {
    let mut sorted = lambdas.to_vec();
    sorted.sort_by(f64::total_cmp);
    if let Some(gap) = sorted
        .windows(2)
        .map(|w| w[1] - w[0])
        .filter(|g| *g < DISTINCT_TOLERANCE)
        .reduce(f64::min)
    {
        return Err(GadError::DegenerateEigenvalue { gap });
    }
    Ok(())
}

/// Largest augmented dimension for which the full GAD Jacobian is assembled.
pub const GAD_JACOBIAN_MAX_DIM: usize = 64;

/// Central-difference Jacobian of the complete GAD vector field with respect
/// to the flat state `(x, v, w, ...)` at `state`.
pub fn gad_jacobian_numeric(
    problem: &ProblemSpec,
    state: &GadState,
    variant: &GadVariant,
    cfg: &JvpConfig,
) -> GadResult<Matrix> {
    if problem.dim() > GAD_JACOBIAN_MAX_DIM {
        return Err(GadError::Capability(format!(
            "GAD Jacobian assembly is limited to dimension {GAD_JACOBIAN_MAX_DIM}"
        )));
    }
    variant.validate(problem)?;
    let layout = StateLayout::of(state);
    let z0 = layout.pack(&state.x, &state.pairs);
    numeric_jacobian(&z0, |z| flat_rhs(problem, variant, &layout, z, cfg))
}

/// Central differences of an arbitrary vector field around `z0`.
pub fn numeric_jacobian<F>(z0: &Vector, rhs: F) -> GadResult<Matrix>
where
    F: Fn(&Vector) -> GadResult<Vector>,
{
    let m = z0.len();
    let mut out = Matrix::zeros(m, m);
    for j in 0..m {
        let h = 1e-6 * (1.0 + z0[j].abs());
        let mut zp = z0.clone();
        zp[j] += h;
        let mut zm = z0.clone();
        zm[j] -= h;
        let col = (rhs(&zp)? - rhs(&zm)?) / (2.0 * h);
        out.set_column(j, &col);
    }
    Ok(out)
}

/// Matches a computed spectrum against expected real values after sorting both
/// by real part (imaginary part breaks ties, keeping conjugates together) and
/// returns the largest matched-pair distance.
pub fn spectrum_match_error(computed: &[Complex<f64>], expected: &[f64]) -> f64 {
    if computed.len() != expected.len() {
        return f64::INFINITY;
    }
    let mut c = computed.to_vec();
    c.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    let mut e = expected.to_vec();
    e.sort_by(f64::total_cmp);
    c.iter()
        .zip(&e)
        .map(|(c, e)| (c - Complex::new(*e, 0.0)).norm())
        .fold(0.0, f64::max)
}

/// `true` iff every value is strictly negative.
pub fn is_linearly_stable(spectrum: &[f64]) -> bool {
    spectrum.iter().all(|l| *l < 0.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NewtonConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub max_halvings: usize,
    pub blowup_norm: f64,
    pub jvp: JvpConfig,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-10,
            max_halvings: 30,
            blowup_norm: 1e6,
            jvp: JvpConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonOutcome {
    pub report: SaddleReport,
    pub note: Option<String>,
}

/// Damped Newton iteration on `F(x) = 0`; the step is halved (at most
/// `max_halvings` times) until `|F|_2` decreases.
pub fn newton_raphson(problem: &ProblemSpec, x0: &Vector, cfg: &NewtonConfig) -> GadResult<NewtonOutcome> {
    check_dim(problem.dim(), x0.len())?;
    let mut x = x0.clone();
    let mut f = problem.field(&x)?;
    let mut note = None;
    let mut converged = false;
    let mut diverged = false;
    let mut iters = 0;
    loop {
        if inf_norm(&f) <= cfg.tol {
            converged = true;
            break;
        }
        if iters >= cfg.max_iter {
            note = Some(format!("no convergence after {} iterations", cfg.max_iter));
            break;
        }
        let j = assemble_jacobian(problem, &x, &cfg.jvp)?;
        let Some(dx) = j.lu().solve(&(-&f)) else {
            note = Some(format!("singular Jacobian at iteration {iters}; step rejected"));
            break;
        };
        if dx.iter().any(|c| !c.is_finite()) {
            note = Some(format!("non-finite Newton step at iteration {iters}; step rejected"));
            break;
        }
        let f_norm = f.norm();
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            let trial = &x + &dx * scale;
            if let Ok(ft) = problem.field(&trial) {
                if ft.norm() < f_norm {
                    accepted = Some((trial, ft));
                    break;
                }
            }
            scale *= 0.5;
        }
        iters += 1;
        match accepted {
            Some((xn, fnew)) => {
                x = xn;
                f = fnew;
            }
            None => {
                note = Some(format!("no residual decrease after {} halvings", cfg.max_halvings));
                break;
            }
        }
        if inf_norm(&x) > cfg.blowup_norm {
            diverged = true;
            note = Some("iterate left the blowup radius".into());
            break;
        }
    }
    let morse_index = if converged && problem.dim() <= cfg.jvp.dense_assembly_limit {
        Some(classify_index(problem, &x, &cfg.jvp)?.morse_index)
    } else {
        None
    };
    Ok(NewtonOutcome {
        report: SaddleReport {
            x_star: x.iter().copied().collect(),
            lambda_star: None,
            tracked_eigenvalues: vec![],
            residual_force: inf_norm(&f),
            residual_eig: None,
            morse_index,
            converged,
            diverged,
            steps: iters,
            final_time: 0.0,
            warnings: vec![],
        },
        note,
    })
}

/// Cell-centred rectangular grid of starting points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
}

impl ScanGrid {
    pub fn validate(&self) -> GadResult<()> {
        if self.nx == 0 || self.ny == 0 || !(self.x_max > self.x_min) || !(self.y_max > self.y_min) {
            return Err(GadError::InvalidConfig(format!("degenerate scan grid {self:?}")));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / self.nx as f64
    }

    pub fn dy(&self) -> f64 {
        (self.y_max - self.y_min) / self.ny as f64
    }

    pub fn x_at(&self, i: usize) -> f64 {
        self.x_min + (i as f64 + 0.5) * self.dx()
    }

    pub fn y_at(&self, j: usize) -> f64 {
        self.y_min + (j as f64 + 0.5) * self.dy()
    }

    /// Row-major over `y`, then `x`.
    pub fn points(&self) -> Vec<(f64, f64)> {
        (0..self.ny)
            .flat_map(|j| (0..self.nx).map(move |i| (i, j)))
            .map(|(i, j)| (self.x_at(i), self.y_at(j)))
            .collect()
    }
}

pub const LABEL_DIVERGED: i64 = -1;
pub const LABEL_UNCONVERGED: i64 = -2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasinCell {
    pub x: f64,
    pub y: f64,
    /// Index into [`BasinScan::limit_points`], or a negative sentinel.
    pub label: i64,
    pub steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BasinScan {
    pub grid: ScanGrid,
    pub cells: Vec<BasinCell>,
    pub limit_points: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy)]
enum Ending {
    Converged(usize),
    Diverged(usize),
    Unconverged(usize),
}

/// Runs GAD from every grid point (other coordinates zero) and labels each
/// start by its limit point. Runs execute on the current rayon pool.
pub fn basin_scan(problem: &ProblemSpec, variant: &GadVariant, grid: &ScanGrid, cfg: &RunConfig) -> GadResult<BasinScan> {
    check_scan(problem, grid)?;
    variant.validate(problem)?;
    cfg.validate()?;
    let cfg = RunConfig {
        record_every: 0,
        ..cfg.clone()
    };
    scan_with(problem, grid, |x0| {
        let out = run_gad(problem, x0, variant, &cfg)?;
        let x = Vector::from_vec(out.report.x_star.clone());
        Ok(if out.report.converged {
            (x, Ending::Converged(out.report.steps))
        } else if out.report.diverged {
            (x, Ending::Diverged(out.report.steps))
        } else {
            (x, Ending::Unconverged(out.report.steps))
        })
    })
}

/// [`basin_scan`] with the damped Newton iteration in place of GAD.
pub fn newton_basin_scan(problem: &ProblemSpec, grid: &ScanGrid, cfg: &NewtonConfig) -> GadResult<BasinScan> {
    check_scan(problem, grid)?;
    scan_with(problem, grid, |x0| {
        let out = newton_raphson(problem, x0, cfg)?;
        let x = Vector::from_vec(out.report.x_star.clone());
        let steps = out.report.steps;
        Ok(if out.report.converged {
            (x, Ending::Converged(steps))
        } else if out.report.diverged {
            (x, Ending::Diverged(steps))
        } else {
            (x, Ending::Unconverged(steps))
        })
    })
}

fn check_scan(problem: &ProblemSpec, grid: &ScanGrid) -> GadResult<()> {
    grid.validate()?;
    if problem.dim() != 2 {
        return Err(GadError::Capability(format!(
            "basin scans need a 2D problem, '{}' has dimension {}",
            problem.id(),
            problem.dim()
        )));
    }
    Ok(())
}

fn scan_with<F>(problem: &ProblemSpec, grid: &ScanGrid, solve: F) -> GadResult<BasinScan>
where
    F: Fn(&Vector) -> GadResult<(Vector, Ending)> + Sync,
{
    let _ = problem;
    let points = grid.points();
    let endings = points
        .par_iter()
        .map(|&(x, y)| solve(&Vector::from_vec(vec![x, y])))
        .collect::<GadResult<Vec<_>>>()?;

    let mut limit_points: Vec<Vector> = Vec::new();
    let mut cells = Vec::with_capacity(points.len());
    for (&(x, y), (end, ending)) in points.iter().zip(endings) {
        let (label, steps) = match ending {
            Ending::Converged(steps) => {
                let tol = 1e-4 * (1.0 + inf_norm(&end));
                let found = limit_points.iter().position(|p| inf_norm(&(p - &end)) <= tol);
                let idx = found.unwrap_or_else(|| {
                    limit_points.push(end.clone());
                    limit_points.len() - 1
                });
                (idx as i64, steps)
            }
            Ending::Diverged(steps) => (LABEL_DIVERGED, steps),
            Ending::Unconverged(steps) => (LABEL_UNCONVERGED, steps),
        };
        cells.push(BasinCell { x, y, label, steps });
    }
    Ok(BasinScan {
        grid: *grid,
        cells,
        limit_points: limit_points.iter().map(|p| p.iter().copied().collect()).collect(),
    })
}

impl BasinScan {
    /// Label of the limit point within `tol` of `point`, if any start reached it.
    pub fn label_of(&self, point: &[f64], tol: f64) -> Option<i64> {
        self.limit_points
            .iter()
            .position(|p| p.iter().zip(point).all(|(a, b)| (a - b).abs() <= tol))
            .map(|i| i as i64)
    }

    fn cell(&self, i: usize, j: usize) -> &BasinCell {
        &self.cells[j * self.grid.nx + i]
    }

    /// Membership mask of `label`, row-major like the cells.
    pub fn mask(&self, label: i64) -> Vec<bool> {
        self.cells.iter().map(|c| c.label == label).collect()
    }

    /// Per-row extent of the basin of `label` along `x`, walking outward from
    /// the column closest to `x_center`. Each edge is placed halfway between
    /// the last member and the first non-member cell. Rows whose centre cell
    /// is not a member are skipped.
    pub fn x_extents(&self, label: i64, x_center: f64) -> Vec<(f64, f64)> {
        let g = &self.grid;
        let ic = (((x_center - g.x_min) / g.dx()).floor().max(0.0) as usize).min(g.nx - 1);
        (0..g.ny)
            .filter(|&j| self.cell(ic, j).label == label)
            .map(|j| {
                let mut hi = ic;
                while hi + 1 < g.nx && self.cell(hi + 1, j).label == label {
                    hi += 1;
                }
                let mut lo = ic;
                while lo > 0 && self.cell(lo - 1, j).label == label {
                    lo -= 1;
                }
                let right = if hi + 1 < g.nx { 0.5 * (g.x_at(hi) + g.x_at(hi + 1)) } else { g.x_max };
                let left = if lo > 0 { 0.5 * (g.x_at(lo) + g.x_at(lo - 1)) } else { g.x_min };
                (left, right)
            })
            .collect()
    }

    /// `x,y,label,steps` rows with full-precision scientific notation.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y,label,steps\n");
        for c in &self.cells {
            let _ = writeln!(s, "{:.16e},{:.16e},{},{}", c.x, c.y, c.label, c.steps);
        }
        s
    }

    pub fn label_counts(&self) -> BTreeMap<i64, usize> {
        let mut m = BTreeMap::new();
        for c in &self.cells {
            *m.entry(c.label).or_insert(0) += 1;
        }
        m
    }
}

/// A random system with a known fixed point `x_s` whose Jacobian has distinct
/// real eigenvalues, with analytic Jacobian callbacks.
#[derive(Debug, Clone)]
pub struct RandomSystem {
    pub problem: ProblemSpec,
    pub x_s: Vector,
    pub lambdas: Vec<f64>,
    /// Right eigenvectors as columns.
    pub right: Matrix,
    /// Left eigenvectors as columns (`left^T right = I`).
    pub left: Matrix,
}

impl RandomSystem {
    /// Normalized `(x_s, v_i, w_i)` with `w` stored explicitly.
    pub fn fixed_point_state(&self, i: usize) -> GadResult<GadState> {
        let pair = normalize_pair(
            &DirectionPair::new(self.right.column(i).into_owned(), self.left.column(i).into_owned()),
            &self.problem,
        )?;
        Ok(GadState::new(self.x_s.clone(), vec![pair]))
    }
}

fn distinct_spectrum(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let mut l: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        l.sort_by(f64::total_cmp);
        if l.windows(2).all(|w| w[1] - w[0] > 0.25) && l.iter().all(|x| x.abs() > 0.1) {
            return l;
        }
    }
}

/// Non-gradient `F(x) = J d + eps C(d, d)`, `d = x - x_s`, with
/// `J = S diag(lambda) S^{-1}`; or, when `gradient`, `F = -grad V` with
/// `V = -d^T J d / 2 + sum_k a_k (u_k . d)^3` and symmetric `J`.
pub fn random_system(rng: &mut ChaCha8Rng, n: usize, gradient: bool) -> RandomSystem {
    let lambdas = distinct_spectrum(rng, n);
    let x_s = Vector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let diag = Matrix::from_diagonal(&Vector::from_column_slice(&lambdas));
    if gradient {
        let a = Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let q = a.qr().q();
        let j = &q * &diag * q.transpose();
        let us: Vec<(f64, Vector)> = (0..n)
            .map(|_| (rng.gen_range(-0.5..0.5), Vector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0))))
            .collect();
        let (j1, j2, j3) = (j.clone(), j.clone(), j);
        let (us1, us2, us3) = (us.clone(), us.clone(), us);
        let (c1, c2, c3) = (x_s.clone(), x_s.clone(), x_s.clone());
        let problem = ProblemSpec::new(format!("random-gradient-{n}"), n, move |x: &Vector| {
            let d = x - &c1;
            let mut f = &j1 * &d;
            for (a, u) in &us1 {
                f -= u * (3.0 * a * u.dot(&d).powi(2));
            }
            Ok(f)
        })
        .with_jacobian_action(move |x: &Vector, b: &Vector| {
            let d = x - &c2;
            let mut out = &j2 * b;
            for (a, u) in &us2 {
                out -= u * (6.0 * a * u.dot(&d) * u.dot(b));
            }
            Ok(out)
        })
        .with_potential(move |x: &Vector| {
            let d = x - &c3;
            let mut v = -0.5 * d.dot(&(&j3 * &d));
            for (a, u) in &us3 {
                v += a * u.dot(&d).powi(3);
            }
            Ok(v)
        });
        RandomSystem {
            problem,
            x_s,
            lambdas,
            right: q.clone(),
            left: q,
        }
    } else {
        let s = loop {
            let s = Matrix::identity(n, n) + Matrix::from_fn(n, n, |_, _| rng.gen_range(-0.4..0.4));
            let sv = s.clone().singular_values();
            if sv.min() > 0.2 {
                break s;
            }
        };
        let sinv = s.clone().try_inverse().expect("well conditioned by construction");
        let j = &s * &diag * &sinv;
        let c: Vec<Matrix> = (0..n)
            .map(|_| Matrix::from_fn(n, n, |_, _| rng.gen_range(-0.2..0.2)))
            .collect();
        let jac = {
            let (j, c, xs) = (j.clone(), c.clone(), x_s.clone());
            move |x: &Vector| {
                let d = x - &xs;
                let mut m = j.clone();
                for (i, ci) in c.iter().enumerate() {
                    let row = (ci + ci.transpose()) * &d;
                    for k in 0..row.len() {
                        m[(i, k)] += row[k];
                    }
                }
                m
            }
        };
        let (jac1, jac2) = (jac.clone(), jac);
        let xs = x_s.clone();
        let problem = ProblemSpec::new(format!("random-general-{n}"), n, move |x: &Vector| {
            let d = x - &xs;
            let mut f = &j * &d;
            for (i, ci) in c.iter().enumerate() {
                f[i] += d.dot(&(ci * &d));
            }
            Ok(f)
        })
        .with_jacobian_action(move |x: &Vector, b: &Vector| Ok(jac1(x) * b))
        .with_jacobian_transpose_action(move |x: &Vector, b: &Vector| Ok(jac2(x).tr_mul(b)));
        RandomSystem {
            problem,
            x_s,
            lambdas,
            right: s,
            left: sinv.transpose(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumCase {
    pub dim: usize,
    pub gradient: bool,
    pub eigen_index: usize,
    pub max_error: f64,
}

/// Compares the finite-difference GAD spectrum at `(x_s, v_i, w_i)` with the
/// closed form, using `rhs` as the GAD vector field on the flat state.
pub fn spectrum_case_with<F>(sys: &RandomSystem, i: usize, rhs: F) -> GadResult<f64>
where
    F: Fn(&Vector) -> GadResult<Vector>,
{
    let state = sys.fixed_point_state(i)?;
    let layout = StateLayout::of(&state);
    let z0 = layout.pack(&state.x, &state.pairs);
    let jac = numeric_jacobian(&z0, rhs)?;
    let computed = eig_dense(&jac)?.values;
    let expected = gad_spectrum_expected(&sys.lambdas, i)?;
    Ok(spectrum_match_error(&computed, &expected))
}

/// Spectrum check over `count` seeded random systems, dimensions cycling
/// through `dims`, alternating gradient and non-gradient fields.
pub fn spectrum_battery(count: usize, seed: u64, dims: &[usize]) -> GadResult<Vec<SpectrumCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let variant = GadVariant::new(VariantKind::Index1General);
    let cfg = JvpConfig::default();
    (0..count)
        .map(|k| {
            let n = dims[k % dims.len()];
            let gradient = k % 2 == 1;
            let sys = random_system(&mut rng, n, gradient);
            let i = rng.gen_range(0..n);
            let state = sys.fixed_point_state(i)?;
            let layout = StateLayout::of(&state);
            let max_error =
                spectrum_case_with(&sys, i, |z| flat_rhs(&sys.problem, &variant, &layout, z, &cfg))?;
            Ok(SpectrumCase {
                dim: n,
                gradient,
                eigen_index: i,
                max_error,
            })
        })
        .collect()
}

/// Counts random spectra where "closed-form GAD spectrum all negative" and
/// "`l_i` is the only positive eigenvalue" disagree (should be zero).
pub fn stability_equivalence_violations(count: usize, seed: u64) -> GadResult<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    for k in 0..count {
        let n = 2 + k % 7;
        // Mix of all-signs spectra, biased so index-1 cases occur often.
        let lambdas: Vec<f64> = loop {
            let l: Vec<f64> = (0..n)
                .map(|m| {
                    if m == 0 || rng.gen_bool(0.3) {
                        rng.gen_range(0.05..3.0)
                    } else {
                        -rng.gen_range(0.05..3.0)
                    }
                })
                .collect();
            if check_distinct(&l).is_ok() {
                break l;
            }
        };
        for i in 0..n {
            let stable = is_linearly_stable(&gad_spectrum_expected(&lambdas, i)?);
            let index1 = lambdas[i] > 0.0 && lambdas.iter().enumerate().all(|(j, l)| j == i || *l < 0.0);
            if stable != index1 {
                violations += 1;
            }
        }
    }
    Ok(violations)
}

/// Dense deflated Jacobian, assembled column by column from
/// [`crate::dynamics::deflate_action`].
pub fn assemble_deflated(
    problem: &ProblemSpec,
    x: &Vector,
    v1: &Vector,
    w1: &Vector,
    cfg: &JvpConfig,
) -> GadResult<Matrix> {
    let n = problem.dim();
    let mut out = Matrix::zeros(n, n);
    let mut e = Vector::zeros(n);
    for c in 0..n {
        e[c] = 1.0;
        out.set_column(c, &crate::dynamics::deflate_action(problem, x, v1, w1, &e, cfg)?);
        e[c] = 0.0;
    }
    Ok(out)
}

/// Deflates the largest eigenvalue of a random matrix with distinct real
/// spectrum and returns the spectrum error against `{0, l_2, ..., l_n}`.
pub fn deflation_case(rng: &mut ChaCha8Rng, n: usize) -> GadResult<f64> {
    let sys = random_system(rng, n, false);
    let top = sys.lambdas.len() - 1;
    let state = sys.fixed_point_state(top)?;
    let pair = &state.pairs[0];
    let j2 = assemble_deflated(&sys.problem, &sys.x_s, &pair.v, pair.w(), &JvpConfig::default())?;
    let computed = eig_dense(&j2)?.values;
    let mut expected = sys.lambdas.clone();
    expected[top] = 0.0;
    Ok(spectrum_match_error(&computed, &expected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn vec(c: &[f64]) -> Vector {
        Vector::from_column_slice(c)
    }

    fn linear(a: Matrix) -> ProblemSpec {
        let n = a.nrows();
        let (a1, a2) = (a.clone(), a.clone());
        ProblemSpec::new("linear", n, move |x: &Vector| Ok(&a * x))
            .with_jacobian_action(move |_x: &Vector, b: &Vector| Ok(&a1 * b))
            .with_jacobian_transpose_action(move |_x: &Vector, b: &Vector| Ok(a2.tr_mul(b)))
    }

    #[test]
    fn expected_spectrum_small_case() {
        let mut got = gad_spectrum_expected(&[1.0, -3.0], 0).unwrap();
        got.sort_by(f64::total_cmp);
        assert_eq!(got, vec![-4.0, -4.0, -3.0, -2.0, -2.0, -1.0]);
    }

    #[test]
    fn expected_spectrum_rejects_repeats() {
        let err = gad_spectrum_expected(&[1.0, 1.0 + 1e-12, -2.0], 0).unwrap_err();
        assert!(matches!(err, GadError::DegenerateEigenvalue { .. }));
        assert!(gad_spectrum_expected(&[1.0, -1.0], 2).is_err());
    }

    #[test]
    fn unstable_choice_has_positive_entry() {
        let got = gad_spectrum_expected(&[1.0, -3.0], 1).unwrap();
        assert!(got.iter().any(|l| *l > 0.0));
        assert!(!is_linearly_stable(&got));
    }

    #[test]
    fn classify_linear_saddles() {
        let cfg = JvpConfig::default();
        let c = classify_index(&linear(dmatrix![1.0, 0.0; 0.0, -1.0]), &Vector::zeros(2), &cfg).unwrap();
        assert_eq!(c.morse_index, 1);
        assert!(c.warning.is_none());
        let c = classify_index(&linear(dmatrix![0.0, 0.0; 0.0, -1.0]), &Vector::zeros(2), &cfg).unwrap();
        assert_eq!(c.morse_index, 0);
        assert_eq!(c.warning, Some(Warning::MarginalSpectrum { count: 1 }));
        let c = classify_index(&linear(dmatrix![0.5, -3.0; 3.0, 0.5]), &Vector::zeros(2), &cfg).unwrap();
        assert_eq!(c.morse_index, 2);
    }

    #[test]
    fn gradient_aliased_spectrum() {
        // Double well mu = 3 at the saddle, v = (1, 0): eigenvalues of J are (1, -3).
        let mu = 3.0;
        let p = ProblemSpec::new("dw", 2, move |x: &Vector| Ok(vec(&[-(x[0] * x[0] - 1.0) * x[0], -mu * x[1]])))
            .with_jacobian_action(move |x: &Vector, b: &Vector| {
                Ok(vec(&[-(3.0 * x[0] * x[0] - 1.0) * b[0], -mu * b[1]]))
            })
            .with_potential(move |x: &Vector| Ok(0.25 * (x[0] * x[0] - 1.0).powi(2) + 0.5 * mu * x[1] * x[1]));
        let cfg = JvpConfig::default();
        let e1 = vec(&[1.0, 0.0]);

        let aliased = GadState::new(Vector::zeros(2), vec![DirectionPair::aliased(e1.clone())]);
        let j = gad_jacobian_numeric(&p, &aliased, &GadVariant::new(VariantKind::Index1Gradient), &cfg).unwrap();
        let computed = eig_dense(&j).unwrap().values;
        let expected = gad_spectrum_expected_gradient(&[1.0, -3.0], 0).unwrap();
        assert!(spectrum_match_error(&computed, &expected) < 1e-6);

        let explicit = GadState::new(Vector::zeros(2), vec![DirectionPair::new(e1.clone(), e1)]);
        let j = gad_jacobian_numeric(&p, &explicit, &GadVariant::new(VariantKind::Index1General), &cfg).unwrap();
        assert_eq!(j.nrows(), 6);
        let computed = eig_dense(&j).unwrap().values;
        let expected = gad_spectrum_expected(&[1.0, -3.0], 0).unwrap();
        assert!(spectrum_match_error(&computed, &expected) < 1e-6);
    }

    #[test]
    fn numeric_gad_jacobian_off_fixed_point_still_assembles() {
        let p = linear(dmatrix![1.0, 2.0; 0.0, -1.0]);
        let state = GadState::new(vec(&[0.3, 0.1]), vec![DirectionPair::new(vec(&[1.0, 0.0]), vec(&[1.0, 0.0]))]);
        let j = gad_jacobian_numeric(&p, &state, &GadVariant::new(VariantKind::Index1General), &JvpConfig::default())
            .unwrap();
        assert_eq!(j.shape(), (6, 6));
    }

    #[test]
    fn random_3x3_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sys = random_system(&mut rng, 3, false);
        let variant = GadVariant::new(VariantKind::Index1General);
        for i in 0..3 {
            let state = sys.fixed_point_state(i).unwrap();
            let j = gad_jacobian_numeric(&sys.problem, &state, &variant, &JvpConfig::default()).unwrap();
            let computed = eig_dense(&j).unwrap().values;
            let err = spectrum_match_error(&computed, &gad_spectrum_expected(&sys.lambdas, i).unwrap());
            assert!(err < 1e-5, "i = {i}: error {err}");
        }
    }

    #[test]
    fn random_systems_are_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for gradient in [false, true] {
            let sys = random_system(&mut rng, 4, gradient);
            assert!(sys.problem.field(&sys.x_s).unwrap().amax() < 1e-14);
            let j = assemble_jacobian(&sys.problem, &sys.x_s, &JvpConfig::default()).unwrap();
            for (i, l) in sys.lambdas.iter().enumerate() {
                let v = sys.right.column(i).into_owned();
                let w = sys.left.column(i).into_owned();
                assert!((&j * &v - &v * *l).amax() < 1e-12);
                assert!((j.tr_mul(&w) - &w * *l).amax() < 1e-12);
            }
            if gradient {
                let x = &sys.x_s + Vector::from_element(4, 0.1);
                let err = crate::model::gradient_consistency_error(&sys.problem, &x, 1e-5).unwrap().unwrap();
                assert!(err < 1e-7);
            }
        }
    }

    #[test]
    fn fixed_point_and_alpha_beta_on_random_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let variant = GadVariant::new(VariantKind::Index1General);
        for n in 2..6 {
            let sys = random_system(&mut rng, n, n % 2 == 0);
            for i in 0..n {
                let state = sys.fixed_point_state(i).unwrap();
                let e = crate::dynamics::evaluate(&sys.problem, &state, &variant, &JvpConfig::default()).unwrap();
                assert!(e.dx.amax() < 1e-12);
                assert!(e.dpairs[0].v.amax() < 1e-12);
                assert!(e.dpairs[0].w.as_ref().unwrap().amax() < 1e-12);
                assert!((e.alpha - e.beta).abs() < 1e-12);
                assert!((e.alpha - sys.lambdas[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mutated_beta_breaks_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sys = random_system(&mut rng, 3, false);
        let state = sys.fixed_point_state(2).unwrap();
        let layout = StateLayout::of(&state);
        let cfg = JvpConfig::default();
        let p = &sys.problem;
        // beta = 2 (w, Jv) + alpha instead of - alpha.
        let corrupted = |z: &Vector| -> GadResult<Vector> {
            let (x, pairs) = layout.unpack(z);
            let (v, w) = (&pairs[0].v, pairs[0].w());
            let f = p.field(&x)?;
            let jv = jvp(p, &x, v, &cfg)?;
            let a = p.dot(v, &jv);
            let b = 2.0 * p.dot(w, &jv) + a;
            let dx = &f - v * (2.0 * p.dot(&f, w));
            let dv = &jv - v * a;
            let dw = adjoint_action(p, &x, w, &cfg)? - w * b;
            Ok(layout.pack(&dx, &[DirectionPair::new(dv, dw)]))
        };
        assert!(spectrum_case_with(&sys, 2, corrupted).unwrap() > 1e-2);
        let variant = GadVariant::new(VariantKind::Index1General);
        assert!(spectrum_case_with(&sys, 2, |z| flat_rhs(p, &variant, &layout, z, &cfg)).unwrap() < 1e-5);
    }

    #[test]
    fn stability_iff_index1() {
        assert_eq!(stability_equivalence_violations(300, 4).unwrap(), 0);
    }

    #[test]
    fn newton_from_exact_root() {
        let p = linear(dmatrix![1.0, 2.0; 0.0, -1.0]);
        let out = newton_raphson(&p, &Vector::zeros(2), &NewtonConfig::default()).unwrap();
        assert!(out.report.converged && out.report.steps <= 2);
        let out = newton_raphson(&p, &vec(&[3.0, -4.0]), &NewtonConfig::default()).unwrap();
        assert!(out.report.converged && out.report.steps <= 2);
    }

    #[test]
    fn newton_singular_jacobian_is_diagnosed() {
        let p = ProblemSpec::new("flat", 1, |x: &Vector| Ok(vec(&[x[0] * x[0] + 1.0])));
        let out = newton_raphson(&p, &vec(&[0.0]), &NewtonConfig::default()).unwrap();
        assert!(!out.report.converged);
        assert!(out.note.unwrap().contains("singular"));
    }

    #[test]
    fn scan_grid_geometry() {
        let g = ScanGrid { x_min: -1.0, x_max: 1.0, y_min: 0.0, y_max: 1.0, nx: 4, ny: 2 };
        let pts = g.points();
        assert_eq!(pts.len(), 8);
        assert_eq!(pts[0], (-0.75, 0.25));
        assert_eq!(pts[7], (0.75, 0.75));
    }

    #[test]
    fn deflation_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for n in 2..7 {
            assert!(deflation_case(&mut rng, n).unwrap() < 1e-8);
        }
    }
}
