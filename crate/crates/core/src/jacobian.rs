//! Access to the Jacobian `J = grad F`: matrix-free products (analytic or by
//! central differences), dense assembly, and dense eigen-decomposition.

use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{GadError, GadResult, Warning};
use crate::model::{check_dim, ensure_finite, inf_norm, Matrix, ProblemSpec, Vector};

pub type CVector = DVector<Complex<f64>>;

/// Step selection for the central-difference product
/// `J b ~ (F(x + eps b) - F(x - eps b)) / (2 eps)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum EpsilonRule {
    Fixed { epsilon: f64 },
    /// `eps = eps0 (1 + |x|_inf) / max(|b|_inf, floor)`.
    Scaled { eps0: f64, floor: f64 },
}

impl Default for EpsilonRule {
    fn default() -> Self {
        EpsilonRule::Scaled {
            eps0: 1e-5,
            floor: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JvpConfig {
    pub epsilon_rule: EpsilonRule,
    pub dense_assembly_limit: usize,
}

impl Default for JvpConfig {
    fn default() -> Self {
        Self {
            epsilon_rule: EpsilonRule::default(),
            dense_assembly_limit: 2048,
        }
    }
}

impl JvpConfig {
    pub fn fixed(epsilon: f64) -> Self {
        Self {
            epsilon_rule: EpsilonRule::Fixed { epsilon },
            ..Self::default()
        }
    }

    fn epsilon(&self, x: &Vector, b: &Vector) -> f64 {
        match self.epsilon_rule {
            EpsilonRule::Fixed { epsilon } => epsilon,
            EpsilonRule::Scaled { eps0, floor } => eps0 * (1.0 + inf_norm(x)) / inf_norm(b).max(floor),
        }
    }
}

/// `(grad F(x)) b`.
pub fn jvp(problem: &ProblemSpec, x: &Vector, b: &Vector, cfg: &JvpConfig) -> GadResult<Vector> {
    check_dim(problem.dim(), x.len())?;
    check_dim(problem.dim(), b.len())?;
    ensure_finite(b, "direction")?;
    if let Some(out) = problem.analytic_jacobian_action(x, b) {
        return out;
    }
    if b.iter().all(|c| *c == 0.0) {
        return Ok(Vector::zeros(problem.dim()));
    }
    let eps = cfg.epsilon(x, b);
    if !(eps.is_finite() && eps > 0.0) {
        return Err(GadError::Numerical(format!("invalid difference step {eps}")));
    }
    let fp = problem.field(&(x + b * eps))?;
    let fm = problem.field(&(x - b * eps))?;
    Ok((fp - fm) / (2.0 * eps))
}

/// `(grad F(x))^T b`.
///
/// Without a transpose callback, gradient problems reuse [`jvp`] (symmetric
/// Hessian); anything else falls back to dense assembly.
pub fn jtvp(problem: &ProblemSpec, x: &Vector, b: &Vector, cfg: &JvpConfig) -> GadResult<Vector> {
    check_dim(problem.dim(), x.len())?;
    check_dim(problem.dim(), b.len())?;
    if let Some(out) = problem.analytic_jacobian_transpose_action(x, b) {
        return out;
    }
    if problem.is_gradient() {
        // J = -W^{-1} H with H symmetric, so J^T = W J W^{-1}.
        if problem.has_uniform_metric() {
            return jvp(problem, x, b, cfg);
        }
        let w = problem.metric_weights();
        let scaled = b.component_div(w);
        return Ok(jvp(problem, x, &scaled, cfg)?.component_mul(w));
    }
    if problem.dim() > cfg.dense_assembly_limit {
        return Err(GadError::Capability(format!(
            "problem '{}' has dimension {} above the dense assembly limit {} and no transpose \
             Jacobian callback; supply jacobian_transpose_action",
            problem.id(),
            problem.dim(),
            cfg.dense_assembly_limit
        )));
    }
    let j = assemble_jacobian(problem, x, cfg)?;
    Ok(j.tr_mul(b))
}

/// Adjoint of `J` in the problem metric, `W^{-1} J^T W`. Equal to [`jtvp`]
/// for uniform weights.
pub fn adjoint_action(problem: &ProblemSpec, x: &Vector, b: &Vector, cfg: &JvpConfig) -> GadResult<Vector> {
    if problem.is_gradient() && !problem.has_jacobian_transpose_action() {
        return jvp(problem, x, b, cfg);
    }
    if problem.has_uniform_metric() {
        return jtvp(problem, x, b, cfg);
    }
    check_dim(problem.dim(), b.len())?;
    let w = problem.metric_weights();
    Ok(jtvp(problem, x, &b.component_mul(w), cfg)?.component_div(w))
}

/// Dense `n x n` Jacobian, column `j` being `jvp(x, e_j)`.
pub fn assemble_jacobian(problem: &ProblemSpec, x: &Vector, cfg: &JvpConfig) -> GadResult<Matrix> {
    let n = problem.dim();
    check_dim(n, x.len())?;
    if n > cfg.dense_assembly_limit {
        return Err(GadError::Capability(format!(
            "dimension {n} exceeds dense assembly limit {}",
            cfg.dense_assembly_limit
        )));
    }
    let mut j = Matrix::zeros(n, n);
    let mut e = Vector::zeros(n);
    for col in 0..n {
        e[col] = 1.0;
        let c = jvp(problem, x, &e, cfg)?;
        j.set_column(col, &c);
        e[col] = 0.0;
    }
    Ok(j)
}

#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    /// Sorted by descending real part, then descending imaginary part.
    pub values: Vec<Complex<f64>>,
    /// Unit 2-norm right eigenvectors, phase fixed so the first significant
    /// component is real and positive.
    pub vectors: Vec<CVector>,
}

/// Full spectrum of a real square matrix via the real Schur form, with
/// eigenvectors recovered by shifted inverse iteration.
pub fn eig_dense(m: &Matrix) -> GadResult<EigenDecomposition> {
    if !m.is_square() {
        return Err(GadError::Dimension {
            expected: m.nrows(),
            found: m.ncols(),
        });
    }
    if m.iter().any(|c| !c.is_finite()) {
        return Err(GadError::Numerical("matrix has non-finite entries".into()));
    }
    let n = m.nrows();
    if n == 0 {
        return Ok(EigenDecomposition {
            values: vec![],
            vectors: vec![],
        });
    }
    let schur = nalgebra::Schur::try_new(m.clone(), f64::EPSILON, 10_000 * n.max(10))
        .ok_or_else(|| GadError::Numerical("real Schur iteration did not converge".into()))?;
    let mut values: Vec<Complex<f64>> = schur.complex_eigenvalues().iter().copied().collect();
    values.sort_by(|a, b| b.re.total_cmp(&a.re).then(b.im.total_cmp(&a.im)));

    let scale = 1.0 + m.amax();
    let mc: DMatrix<Complex<f64>> = m.map(|c| Complex::new(c, 0.0));
    let vectors = values
        .iter()
        .map(|&lambda| inverse_iteration(&mc, lambda, scale))
        .collect::<GadResult<Vec<_>>>()?;
    Ok(EigenDecomposition { values, vectors })
}

fn inverse_iteration(m: &DMatrix<Complex<f64>>, lambda: Complex<f64>, scale: f64) -> GadResult<CVector> {
    let n = m.nrows();
    let shift = lambda + Complex::new(1e-10 * scale, 1e-10 * scale);
    let mut a = m.clone();
    for i in 0..n {
        a[(i, i)] -= shift;
    }
    let lu = a.lu();
    let mut x: CVector = CVector::from_fn(n, |i, _| Complex::new(1.0 + 0.37 * (i as f64 + 1.0).sin(), 0.0));
    for _ in 0..3 {
        let y = lu
            .solve(&x)
            .ok_or_else(|| GadError::Numerical("inverse iteration hit an exactly singular shift".into()))?;
        let norm = y.norm();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(GadError::Numerical("inverse iteration produced a zero vector".into()));
        }
        x = y / Complex::new(norm, 0.0);
    }
    Ok(fix_phase(x))
}

fn fix_phase(mut x: CVector) -> CVector {
    let big = x.iter().fold(0.0_f64, |m, c| m.max(c.norm()));
    if let Some(first) = x.iter().find(|c| c.norm() > 1e-8 * big).copied() {
        let phase = first.conj() / first.norm();
        x *= phase;
    }
    x
}

/// Smallest eigenvalue of the Hessian `-J` (self-adjoint in the problem metric)
/// and its metric-unit eigenvector.
#[derive(Debug, Clone)]
pub struct SmallestMode {
    pub lambda: f64,
    pub v: Vector,
    pub warning: Option<Warning>,
}

pub const EIGEN_TIE_TOLERANCE: f64 = 1e-8;

pub fn hessian_smallest_eigvec(problem: &ProblemSpec, x: &Vector, cfg: &JvpConfig) -> GadResult<SmallestMode> {
    if !problem.is_gradient() {
        return Err(GadError::Capability(format!(
            "problem '{}' is not a gradient system; the Hessian mode needs a potential",
            problem.id()
        )));
    }
    let j = assemble_jacobian(problem, x, cfg)?;
    let n = j.nrows();
    let sqrt_w = problem.metric_weights().map(f64::sqrt);
    // S = W^{1/2} (-J) W^{-1/2} is symmetric when -J is W-self-adjoint.
    let mut s = Matrix::from_fn(n, n, |r, c| -j[(r, c)] * sqrt_w[r] / sqrt_w[c]);
    s = (&s + s.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(s, f64::EPSILON, 10_000 * n.max(10))
        .ok_or_else(|| GadError::Numerical("symmetric eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let lambda = eig.eigenvalues[order[0]];
    let y = eig.eigenvectors.column(order[0]).into_owned();
    let mut v = y.component_div(&sqrt_w);
    let norm = problem.dot(&v, &v).sqrt();
    v /= norm;
    if let Some(first) = v.iter().find(|c| c.abs() > 1e-12).copied() {
        if first < 0.0 {
            v = -v;
        }
    }
    let warning = if n > 1 {
        let gap = eig.eigenvalues[order[1]] - lambda;
        (gap < EIGEN_TIE_TOLERANCE).then_some(Warning::DegenerateEigenvalue { gap })
    } else {
        None
    };
    Ok(SmallestMode { lambda, v, warning })
}
