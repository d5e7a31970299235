//! Right-hand sides of the gentlest ascent dynamics.
//!
//! All formulas use the unit-normalized convention `(v, v) = (w, v) = 1`, so
//! the projection denominators are dropped. Inner products are taken in the
//! problem metric, and "transpose" means the metric adjoint of `J`.

use serde::{Deserialize, Serialize};

use crate::error::{GadError, GadResult, Warning};
use crate::jacobian::{adjoint_action, hessian_smallest_eigvec, jvp, JvpConfig, SmallestMode};
use crate::model::{check_dim, DirectionPair, GadState, Normalization, ProblemSpec, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantKind {
    Index1Gradient,
    Index1General,
    Index1ReducedTau0,
    Index2Complex,
    Index2RealDeflated,
}

impl VariantKind {
    pub const ALL: [VariantKind; 5] = [
        VariantKind::Index1Gradient,
        VariantKind::Index1General,
        VariantKind::Index1ReducedTau0,
        VariantKind::Index2Complex,
        VariantKind::Index2RealDeflated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Index1Gradient => "index1-gradient",
            VariantKind::Index1General => "index1-general",
            VariantKind::Index1ReducedTau0 => "index1-reduced-tau0",
            VariantKind::Index2Complex => "index2-complex",
            VariantKind::Index2RealDeflated => "index2-real-deflated",
        }
    }

    /// Number of integrated direction pairs carried in the state.
    pub fn pair_count(self) -> usize {
        match self {
            VariantKind::Index1ReducedTau0 => 0,
            VariantKind::Index2RealDeflated => 2,
            _ => 1,
        }
    }

    pub fn normalization(self) -> Normalization {
        match self {
            VariantKind::Index2Complex => Normalization::Unit,
            _ => Normalization::Dual,
        }
    }

    pub fn target_index(self) -> usize {
        match self {
            VariantKind::Index2Complex | VariantKind::Index2RealDeflated => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GadVariant {
    pub kind: VariantKind,
    /// Relaxation time of the direction equations.
    #[serde(default = "default_tau")]
    pub tau: f64,
}

fn default_tau() -> f64 {
    1.0
}

impl GadVariant {
    pub fn new(kind: VariantKind) -> Self {
        Self { kind, tau: 1.0 }
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn validate(&self, problem: &ProblemSpec) -> GadResult<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(GadError::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        let needs_gradient = matches!(
            self.kind,
            VariantKind::Index1Gradient | VariantKind::Index1ReducedTau0
        );
        if needs_gradient && !problem.is_gradient() {
            return Err(GadError::InvalidConfig(format!(
                "variant {} requires a gradient problem, '{}' is not one",
                self.kind.name(),
                problem.id()
            )));
        }
        Ok(())
    }
}

/// `alpha(v) = (v, J v)`.
pub fn alpha(problem: &ProblemSpec, v: &Vector, jv: &Vector) -> f64 {
    problem.dot(v, jv)
}

/// `beta(v, w) = 2 (w, J v) - alpha(v)`.
pub fn beta(problem: &ProblemSpec, w: &Vector, jv: &Vector, alpha_val: f64) -> f64 {
    2.0 * problem.dot(w, jv) - alpha_val
}

/// Gradient GAD: returns `(x_dot, v_dot)` with
/// `x_dot = -grad V + 2 (grad V, v) v` and
/// `tau v_dot = -H v + (v, H v) v`.
pub fn rhs_index1_gradient(
    problem: &ProblemSpec,
    x: &Vector,
    v: &Vector,
    tau: f64,
    cfg: &JvpConfig,
) -> GadResult<(Vector, Vector)> {
    if !problem.is_gradient() {
        return Err(GadError::InvalidConfig("gradient GAD needs a gradient problem".into()));
    }
    check_dim(problem.dim(), v.len())?;
    let f = problem.field(x)?;
    let jv = jvp(problem, x, v, cfg)?;
    Ok((reflect(problem, &f, v, v), relax(problem, &jv, v, tau)))
}

/// `F - 2 (F, w) v`.
fn reflect(problem: &ProblemSpec, f: &Vector, v: &Vector, w: &Vector) -> Vector {
    let fw = problem.dot(f, w);
    f - v * (2.0 * fw)
}

/// `(J v - alpha(v) v) / tau`.
fn relax(problem: &ProblemSpec, jv: &Vector, v: &Vector, tau: f64) -> Vector {
    let a = alpha(problem, v, jv);
    (jv - v * a) / tau
}

/// General index-1 GAD: returns `(x_dot, v_dot, w_dot)`.
pub fn rhs_index1(
    problem: &ProblemSpec,
    x: &Vector,
    v: &Vector,
    w: &Vector,
    tau: f64,
    cfg: &JvpConfig,
) -> GadResult<(Vector, Vector, Vector)> {
    check_dim(problem.dim(), v.len())?;
    check_dim(problem.dim(), w.len())?;
    let f = problem.field(x)?;
    let parts = index1_parts(problem, x, &f, v, Some(w), tau, cfg)?;
    Ok((parts.dx, parts.dv, parts.dw.expect("w supplied")))
}

struct Index1Parts {
    dx: Vector,
    dv: Vector,
    dw: Option<Vector>,
    alpha: f64,
    beta: f64,
}

fn index1_parts(
    problem: &ProblemSpec,
    x: &Vector,
    f: &Vector,
    v: &Vector,
    w: Option<&Vector>,
    tau: f64,
    cfg: &JvpConfig,
) -> GadResult<Index1Parts> {
    let jv = jvp(problem, x, v, cfg)?;
    let a = alpha(problem, v, &jv);
    let dv = (&jv - v * a) / tau;
    match w {
        None => Ok(Index1Parts {
            dx: reflect(problem, f, v, v),
            dv,
            dw: None,
            alpha: a,
            beta: beta(problem, v, &jv, a),
        }),
        Some(w) => {
            let b = beta(problem, w, &jv, a);
            let jtw = adjoint_action(problem, x, w, cfg)?;
            Ok(Index1Parts {
                dx: reflect(problem, f, v, w),
                dv,
                dw: Some((jtw - w * b) / tau),
                alpha: a,
                beta: b,
            })
        }
    }
}

/// Closed dynamics in `x` obtained as `tau -> 0`: the direction is slaved to
/// the softest Hessian mode at `x`.
#[derive(Debug, Clone)]
pub struct ReducedRhs {
    pub dx: Vector,
    pub mode: SmallestMode,
}

pub fn rhs_index1_reduced(problem: &ProblemSpec, x: &Vector, cfg: &JvpConfig) -> GadResult<ReducedRhs> {
    let mode = hessian_smallest_eigvec(problem, x, cfg)?;
    let f = problem.field(x)?;
    Ok(ReducedRhs {
        dx: reflect(problem, &f, &mode.v, &mode.v),
        mode,
    })
}

/// Relative determinant threshold for the 2x2 projection system.
pub const PROJECTION_DET_THRESHOLD: f64 = 1e-10;

/// Coefficients `(c1, c2)` such that `F - c1 v1 - c2 v2` is annihilated by
/// both `w1` and `w2`: solves `sum_j (w_i, v_j) c_j = (F, w_i)`.
pub fn coeffs_c1c2(
    problem: &ProblemSpec,
    f: &Vector,
    v1: &Vector,
    v2: &Vector,
    w1: &Vector,
    w2: &Vector,
) -> GadResult<(f64, f64)> {
    let a11 = problem.dot(w1, v1);
    let a12 = problem.dot(w1, v2);
    let a21 = problem.dot(w2, v1);
    let a22 = problem.dot(w2, v2);
    let f1 = problem.dot(f, w1);
    let f2 = problem.dot(f, w2);
    let det = a11 * a22 - a12 * a21;
    let scale = (a11 * a22).abs() + (a12 * a21).abs();
    if !(det.is_finite() && det.abs() > PROJECTION_DET_THRESHOLD * scale) || scale == 0.0 {
        return Err(GadError::NearSingularProjection { det });
    }
    Ok(((a22 * f1 - a12 * f2) / det, (a11 * f2 - a21 * f1) / det))
}

#[derive(Debug, Clone)]
pub struct Index2ComplexRhs {
    pub dx: Vector,
    pub dv1: Vector,
    pub dw1: Vector,
    /// `J v1`, recomputed at every evaluation.
    pub v2: Vector,
    /// `J^T w1`, recomputed at every evaluation.
    pub w2: Vector,
    pub alpha: f64,
    pub beta: f64,
}

/// Index-2 GAD for a saddle whose unstable eigenvalues form a complex pair.
///
/// Inside a complex eigenplane `v1` and `w1` rotate in opposite senses, so
/// `(w1, v1)` passes through zero. `w1` is therefore kept at unit length and
/// relaxed with its own Rayleigh quotient `(w1, J^T w1)`; the plane projection
/// does not depend on the scale of `w1`.
pub fn rhs_index2_complex(
    problem: &ProblemSpec,
    x: &Vector,
    v1: &Vector,
    w1: &Vector,
    tau: f64,
    cfg: &JvpConfig,
) -> GadResult<Index2ComplexRhs> {
    check_dim(problem.dim(), v1.len())?;
    check_dim(problem.dim(), w1.len())?;
    let f = problem.field(x)?;
    let v2 = jvp(problem, x, v1, cfg)?;
    let w2 = adjoint_action(problem, x, w1, cfg)?;
    let a = alpha(problem, v1, &v2) / problem.dot(v1, v1);
    let b = problem.dot(w1, &w2) / problem.dot(w1, w1);
    let dv1 = (&v2 - v1 * a) / tau;
    let dw1 = (&w2 - w1 * b) / tau;
    let dx = if f.iter().all(|c| *c == 0.0) {
        f.clone()
    } else {
        let (c1, c2) = coeffs_c1c2(problem, &f, v1, &v2, w1, &w2)?;
        &f - v1 * (2.0 * c1) - &v2 * (2.0 * c2)
    };
    Ok(Index2ComplexRhs {
        dx,
        dv1,
        dw1,
        v2,
        w2,
        alpha: a,
        beta: b,
    })
}

/// Deflation weight `(v1, J v1) / ((v1, v1) (w1, v1))`.
fn deflation_weight(problem: &ProblemSpec, v1: &Vector, w1: &Vector, jv1: &Vector) -> GadResult<f64> {
    let wv = problem.dot(w1, v1);
    let vv = problem.dot(v1, v1);
    let ww = problem.dot(w1, w1);
    if !(wv.abs() > crate::model::DUALITY_THRESHOLD * ww.sqrt()) || vv == 0.0 {
        return Err(GadError::DegenerateDuality { value: wv });
    }
    Ok(problem.dot(v1, jv1) / (vv * wv))
}

/// Matrix-free product with the deflated Jacobian
/// `J2 b = J b - [(v1, J v1) / ((v1, v1)(w1, v1))] v1 (w1, b)`.
pub fn deflate_action(
    problem: &ProblemSpec,
    x: &Vector,
    v1: &Vector,
    w1: &Vector,
    b: &Vector,
    cfg: &JvpConfig,
) -> GadResult<Vector> {
    check_dim(problem.dim(), v1.len())?;
    check_dim(problem.dim(), w1.len())?;
    let jv1 = jvp(problem, x, v1, cfg)?;
    let kappa = deflation_weight(problem, v1, w1, &jv1)?;
    let jb = jvp(problem, x, b, cfg)?;
    Ok(jb - v1 * (kappa * problem.dot(w1, b)))
}

/// Adjoint of [`deflate_action`]: `J2^T b = J^T b - kappa w1 (v1, b)`.
pub fn deflate_adjoint_action(
    problem: &ProblemSpec,
    x: &Vector,
    v1: &Vector,
    w1: &Vector,
    b: &Vector,
    cfg: &JvpConfig,
) -> GadResult<Vector> {
    let jv1 = jvp(problem, x, v1, cfg)?;
    let kappa = deflation_weight(problem, v1, w1, &jv1)?;
    let jtb = adjoint_action(problem, x, b, cfg)?;
    Ok(jtb - w1 * (kappa * problem.dot(v1, b)))
}

#[derive(Debug, Clone)]
pub struct Index2RealRhs {
    pub dx: Vector,
    pub dv1: Vector,
    pub dw1: Option<Vector>,
    pub dv2: Vector,
    pub dw2: Option<Vector>,
    pub alpha1: f64,
    pub beta1: f64,
    pub alpha2: f64,
    pub beta2: f64,
}

/// Index-2 GAD for two real unstable eigenvalues; the second pair follows the
/// deflated Jacobian. `w1`/`w2` of `None` alias `v1`/`v2` (gradient systems).
pub fn rhs_index2_real(
    problem: &ProblemSpec,
    x: &Vector,
    v1: &Vector,
    w1: Option<&Vector>,
    v2: &Vector,
    w2: Option<&Vector>,
    tau: f64,
    cfg: &JvpConfig,
) -> GadResult<Index2RealRhs> {
    for d in [Some(v1), w1, Some(v2), w2].into_iter().flatten() {
        check_dim(problem.dim(), d.len())?;
    }
    let f = problem.field(x)?;
    let w1r = w1.unwrap_or(v1);
    let w2r = w2.unwrap_or(v2);

    let jv1 = jvp(problem, x, v1, cfg)?;
    let alpha1 = alpha(problem, v1, &jv1);
    let beta1 = beta(problem, w1r, &jv1, alpha1);
    let dv1 = (&jv1 - v1 * alpha1) / tau;
    let dw1 = match w1 {
        Some(w1) => Some((adjoint_action(problem, x, w1, cfg)? - w1 * beta1) / tau),
        None => None,
    };

    let kappa = deflation_weight(problem, v1, w1r, &jv1)?;
    let j2v2 = jvp(problem, x, v2, cfg)? - v1 * (kappa * problem.dot(w1r, v2));
    let alpha2 = alpha(problem, v2, &j2v2);
    let beta2 = beta(problem, w2r, &j2v2, alpha2);
    let dv2 = (&j2v2 - v2 * alpha2) / tau;
    let dw2 = match w2 {
        Some(w2) => {
            let j2tw2 = adjoint_action(problem, x, w2, cfg)? - w1r * (kappa * problem.dot(v1, w2));
            Some((j2tw2 - w2 * beta2) / tau)
        }
        None => None,
    };

    let dx = if f.iter().all(|c| *c == 0.0) {
        f.clone()
    } else {
        let (c1, c2) = coeffs_c1c2(problem, &f, v1, v2, w1r, w2r)?;
        &f - v1 * (2.0 * c1) - v2 * (2.0 * c2)
    };
    Ok(Index2RealRhs {
        dx,
        dv1,
        dw1,
        dv2,
        dw2,
        alpha1,
        beta1,
        alpha2,
        beta2,
    })
}

/// Time derivative of a whole [`GadState`] plus per-evaluation diagnostics.
#[derive(Debug, Clone)]
pub struct RhsEval {
    pub dx: Vector,
    /// Derivatives of the stored pairs; `w` is `None` where the pair is aliased.
    pub dpairs: Vec<DirectionPair>,
    pub force: Vector,
    pub alpha: f64,
    pub beta: f64,
    pub warning: Option<Warning>,
}

pub fn evaluate(problem: &ProblemSpec, state: &GadState, variant: &GadVariant, cfg: &JvpConfig) -> GadResult<RhsEval> {
    check_dim(problem.dim(), state.x.len())?;
    let expected = variant.kind.pair_count();
    if state.pairs.len() != expected {
        return Err(GadError::InvalidConfig(format!(
            "variant {} needs {expected} direction pair(s), state has {}",
            variant.kind.name(),
            state.pairs.len()
        )));
    }
    let x = &state.x;
    let tau = variant.tau;
    match variant.kind {
        VariantKind::Index1Gradient | VariantKind::Index1General => {
            let pair = &state.pairs[0];
            let w = if variant.kind == VariantKind::Index1Gradient {
                None
            } else {
                pair.w.as_ref()
            };
            let force = problem.field(x)?;
            let p = index1_parts(problem, x, &force, &pair.v, w, tau, cfg)?;
            Ok(RhsEval {
                dx: p.dx,
                dpairs: vec![DirectionPair { v: p.dv, w: p.dw }],
                force,
                alpha: p.alpha,
                beta: p.beta,
                warning: None,
            })
        }
        VariantKind::Index1ReducedTau0 => {
            let r = rhs_index1_reduced(problem, x, cfg)?;
            Ok(RhsEval {
                dx: r.dx,
                dpairs: vec![],
                force: problem.field(x)?,
                alpha: -r.mode.lambda,
                beta: -r.mode.lambda,
                warning: r.mode.warning,
            })
        }
        VariantKind::Index2Complex => {
            let pair = &state.pairs[0];
            let r = rhs_index2_complex(problem, x, &pair.v, pair.w(), tau, cfg)?;
            Ok(RhsEval {
                dx: r.dx,
                dpairs: vec![DirectionPair {
                    v: r.dv1,
                    w: pair.w.as_ref().map(|_| r.dw1),
                }],
                force: problem.field(x)?,
                alpha: r.alpha,
                beta: r.beta,
                warning: None,
            })
        }
        VariantKind::Index2RealDeflated => {
            let (p1, p2) = (&state.pairs[0], &state.pairs[1]);
            let r = rhs_index2_real(problem, x, &p1.v, p1.w.as_ref(), &p2.v, p2.w.as_ref(), tau, cfg)?;
            Ok(RhsEval {
                dx: r.dx,
                dpairs: vec![
                    DirectionPair { v: r.dv1, w: r.dw1 },
                    DirectionPair { v: r.dv2, w: r.dw2 },
                ],
                force: problem.field(x)?,
                alpha: r.alpha1,
                beta: r.beta1,
                warning: None,
            })
        }
    }
}

/// Flat packing `[x, v1, w1?, v2, w2?]` of a state, used by the steppers and
/// by finite-difference Jacobians of the full dynamics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateLayout {
    dim: usize,
    aliased: Vec<bool>,
}

impl StateLayout {
    pub fn of(state: &GadState) -> Self {
        Self {
            dim: state.x.len(),
            aliased: state.pairs.iter().map(DirectionPair::is_aliased).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.dim * (1 + self.aliased.iter().map(|a| if *a { 1 } else { 2 }).sum::<usize>())
    }

    pub fn is_empty(&self) -> bool {
        self.dim == 0
    }

    pub fn pack(&self, x: &Vector, pairs: &[DirectionPair]) -> Vector {
        let mut z = Vector::zeros(self.len());
        let n = self.dim;
        z.rows_mut(0, n).copy_from(x);
        let mut at = n;
        for p in pairs {
            z.rows_mut(at, n).copy_from(&p.v);
            at += n;
            if let Some(w) = &p.w {
                z.rows_mut(at, n).copy_from(w);
                at += n;
            }
        }
        z
    }

    pub fn unpack(&self, z: &Vector) -> (Vector, Vec<DirectionPair>) {
        let n = self.dim;
        let x = z.rows(0, n).into_owned();
        let mut at = n;
        let mut pairs = Vec::with_capacity(self.aliased.len());
        for aliased in &self.aliased {
            let v = z.rows(at, n).into_owned();
            at += n;
            let w = if *aliased {
                None
            } else {
                let w = z.rows(at, n).into_owned();
                at += n;
                Some(w)
            };
            pairs.push(DirectionPair { v, w });
        }
        (x, pairs)
    }
}

/// The GAD vector field on the flat state space.
pub fn flat_rhs(
    problem: &ProblemSpec,
    variant: &GadVariant,
    layout: &StateLayout,
    z: &Vector,
    cfg: &JvpConfig,
) -> GadResult<Vector> {
    let (x, pairs) = layout.unpack(z);
    let state = GadState { x, pairs, t: 0.0 };
    let eval = evaluate(problem, &state, variant, cfg)?;
    Ok(layout.pack(&eval.dx, &eval.dpairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Matrix;
    use nalgebra::dmatrix;

    fn vec(c: &[f64]) -> Vector {
        Vector::from_column_slice(c)
    }

    fn double_well(mu: f64) -> ProblemSpec {
        ProblemSpec::new("dw", 2, move |x: &Vector| Ok(vec(&[-(x[0] * x[0] - 1.0) * x[0], -mu * x[1]])))
            .with_jacobian_action(move |x: &Vector, b: &Vector| {
                Ok(vec(&[-(3.0 * x[0] * x[0] - 1.0) * b[0], -mu * b[1]]))
            })
            .with_potential(move |x: &Vector| {
                Ok(0.25 * (x[0] * x[0] - 1.0).powi(2) + 0.5 * mu * x[1] * x[1])
            })
    }

    fn linear(a: Matrix) -> ProblemSpec {
        let n = a.nrows();
        let (a1, a2) = (a.clone(), a.clone());
        ProblemSpec::new("linear", n, move |x: &Vector| Ok(&a * x))
            .with_jacobian_action(move |_x: &Vector, b: &Vector| Ok(&a1 * b))
            .with_jacobian_transpose_action(move |_x: &Vector, b: &Vector| Ok(a2.tr_mul(b)))
    }

    fn lorenz_origin_jacobian() -> Matrix {
        dmatrix![-10.0, 10.0, 0.0; 30.0, -1.0, 0.0; 0.0, 0.0, -8.0 / 3.0]
    }

    #[test]
    fn alpha_beta_examples() {
        let p = linear(lorenz_origin_jacobian());
        let v = vec(&[0.0, 0.0, 1.0]);
        let jv = lorenz_origin_jacobian() * &v;
        let a = alpha(&p, &v, &jv);
        assert!((a + 8.0 / 3.0).abs() < 1e-15);
        assert_eq!(beta(&p, &v, &jv, a), a);
        assert_eq!(beta(&p, &v, &Vector::zeros(3), 0.7), -0.7);

        let anti = dmatrix![0.0, 2.0, -1.0; -2.0, 0.0, 3.0; 1.0, -3.0, 0.0];
        let p = linear(anti.clone());
        let v = vec(&[0.6, 0.0, 0.8]);
        assert!(alpha(&p, &v, &(anti * &v)).abs() < 1e-15);
    }

    #[test]
    fn beta_at_dual_eigenpair_is_eigenvalue() {
        // J = S diag(2, -1) S^{-1}; right eigvecs are columns of S, left are rows of S^{-1}.
        let s = dmatrix![1.0, 1.0; 0.5, 2.0];
        let sinv = s.clone().try_inverse().unwrap();
        let j = &s * Matrix::from_diagonal(&vec(&[2.0, -1.0])) * &sinv;
        let p = linear(j.clone());
        let pair = crate::model::normalize_pair(
            &DirectionPair::new(s.column(0).into_owned(), sinv.row(0).transpose()),
            &p,
        )
        .unwrap();
        let jv = &j * &pair.v;
        let a = alpha(&p, &pair.v, &jv);
        assert!((a - 2.0).abs() < 1e-12);
        assert!((beta(&p, pair.w(), &jv, a) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_rhs_examples() {
        let p = double_well(1.0);
        let cfg = JvpConfig::default();
        let (dx, dv) = rhs_index1_gradient(&p, &vec(&[0.5, 0.0]), &vec(&[1.0, 0.0]), 1.0, &cfg).unwrap();
        assert!((dx - vec(&[-0.375, 0.0])).amax() < 1e-15);
        assert!(dv.amax() < 1e-15);

        let (dx, dv) = rhs_index1_gradient(&p, &vec(&[0.0, 0.0]), &vec(&[1.0, 0.0]), 1.0, &cfg).unwrap();
        assert_eq!(dx, Vector::zeros(2));
        assert_eq!(dv, Vector::zeros(2));

        // v orthogonal to grad V: pure descent.
        let x = vec(&[0.5, 0.0]);
        let (dx, _) = rhs_index1_gradient(&p, &x, &vec(&[0.0, 1.0]), 1.0, &cfg).unwrap();
        assert_eq!(dx, p.field(&x).unwrap());
    }

    #[test]
    fn general_rhs_reduces_to_gradient() {
        let p = double_well(2.5);
        let cfg = JvpConfig::default();
        let x = vec(&[0.3, -0.8]);
        let v = vec(&[0.6, 0.8]);
        let (gx, gv) = rhs_index1_gradient(&p, &x, &v, 1.0, &cfg).unwrap();
        let (nx, nv, nw) = rhs_index1(&p, &x, &v, &v, 1.0, &cfg).unwrap();
        assert_eq!(gx, nx);
        assert_eq!(gv, nv);
        assert!((nw - gv).amax() < 1e-15);
    }

    #[test]
    fn fixed_point_at_exact_eigen_system() {
        let s = dmatrix![1.0, 0.3, -0.2; 0.1, 1.0, 0.4; 0.0, -0.5, 1.0];
        let sinv = s.clone().try_inverse().unwrap();
        let j = &s * Matrix::from_diagonal(&vec(&[1.5, -0.5, -2.0])) * &sinv;
        let p = linear(j);
        let pair = crate::model::normalize_pair(
            &DirectionPair::new(s.column(0).into_owned(), sinv.row(0).transpose()),
            &p,
        )
        .unwrap();
        let (dx, dv, dw) = rhs_index1(&p, &Vector::zeros(3), &pair.v, pair.w(), 1.0, &JvpConfig::default()).unwrap();
        assert!(dx.amax() < 1e-14 && dv.amax() < 1e-13 && dw.amax() < 1e-13);
    }

    #[test]
    fn x_flow_reflects_unstable_component() {
        // Figure-1 setting: F = c1 v1 + c2 v2 with w1 perpendicular to v2.
        let j = dmatrix![1.0, 0.0; 0.0, -1.0];
        let p = linear(j);
        let v1 = vec(&[1.0, 0.0]);
        let v2 = vec(&[0.0, 1.0]);
        let (c1, c2) = (0.7, -0.4);
        let x = &v1 * c1 - &v2 * c2;
        let (dx, _, _) = rhs_index1(&p, &x, &v1, &v1, 1.0, &JvpConfig::default()).unwrap();
        assert!((dx - (&v1 * (-c1) + &v2 * c2)).amax() < 1e-15);
    }

    #[test]
    fn reduced_rhs_examples() {
        let p = double_well(1.0);
        let cfg = JvpConfig::default();
        let r = rhs_index1_reduced(&p, &vec(&[0.5, 0.3]), &cfg).unwrap();
        assert!((r.dx - vec(&[-0.375, -0.3])).amax() < 1e-12);
        let r = rhs_index1_reduced(&p, &vec(&[0.9, 0.1]), &cfg).unwrap();
        assert!((r.dx - vec(&[0.171, 0.1])).amax() < 1e-12);
        for x in [vec(&[0.0, 0.0]), vec(&[1.0, 0.0]), vec(&[-1.0, 0.0])] {
            assert!(rhs_index1_reduced(&p, &x, &cfg).unwrap().dx.amax() < 1e-15);
        }
    }

    #[test]
    fn c1c2_examples() {
        let p = linear(Matrix::identity(2, 2));
        let e1 = vec(&[1.0, 0.0]);
        let e2 = vec(&[0.0, 1.0]);
        assert_eq!(coeffs_c1c2(&p, &e1, &e1, &e2, &e1, &e2).unwrap(), (1.0, 0.0));

        let p3 = linear(Matrix::identity(3, 3));
        let f = vec(&[0.0, 0.0, 5.0]);
        let (a, b) = (vec(&[1.0, 0.0, 0.0]), vec(&[0.0, 1.0, 0.0]));
        assert_eq!(coeffs_c1c2(&p3, &f, &a, &b, &a, &b).unwrap(), (0.0, 0.0));

        let err = coeffs_c1c2(&p, &e1, &e1, &(&e1 * 2.0), &e1, &e2).unwrap_err();
        assert!(matches!(err, GadError::NearSingularProjection { .. }));
    }

    #[test]
    fn c1c2_matches_linear_solve() {
        let p = linear(Matrix::identity(3, 3));
        let v1 = vec(&[1.0, 0.2, -0.3]);
        let v2 = vec(&[0.1, 0.9, 0.4]);
        let w1 = vec(&[0.8, -0.1, 0.2]);
        let w2 = vec(&[0.3, 1.1, -0.5]);
        let f = vec(&[0.5, -1.5, 2.0]);
        let (c1, c2) = coeffs_c1c2(&p, &f, &v1, &v2, &w1, &w2).unwrap();
        let a = dmatrix![w1.dot(&v1), w1.dot(&v2); w2.dot(&v1), w2.dot(&v2)];
        let rhs = vec(&[f.dot(&w1), f.dot(&w2)]);
        let c = a.lu().solve(&rhs).unwrap();
        assert!((c1 - c[0]).abs() < 1e-13 && (c2 - c[1]).abs() < 1e-13);
        let resid = &f - &v1 * c1 - &v2 * c2;
        assert!(resid.dot(&w1).abs() < 1e-13 && resid.dot(&w2).abs() < 1e-13);
    }

    #[test]
    fn index2_complex_rotation_by_hand() {
        // F = (-y, x); J = [[0,-1],[1,0]] everywhere.
        let p = linear(dmatrix![0.0, -1.0; 1.0, 0.0]);
        let x = vec(&[1.0, 0.0]);
        let v1 = vec(&[1.0, 0.0]);
        let r = rhs_index2_complex(&p, &x, &v1, &v1, 1.0, &JvpConfig::default()).unwrap();
        // v2 = J v1 = (0, 1), w2 = J^T w1 = (0, -1)
        assert_eq!(r.v2, vec(&[0.0, 1.0]));
        assert_eq!(r.w2, vec(&[0.0, -1.0]));
        // a = [[1,0],[0,-1]], f = (F.w1, F.w2) = (0, -1) -> c = (0, 1);
        // x_dot = F - 2 v2 = (0,1) - (0,2) = (0,-1): the in-plane flow is reversed.
        assert!((r.dx - vec(&[0.0, -1.0])).amax() < 1e-15);
        // alpha = (v1, J v1) = 0, beta = 2 (w1, J v1) - 0 = 0
        assert_eq!(r.alpha, 0.0);
        assert!((r.dv1 - vec(&[0.0, 1.0])).amax() < 1e-15);
        assert!((r.dw1 - vec(&[0.0, -1.0])).amax() < 1e-15);

        let r = rhs_index2_complex(&p, &Vector::zeros(2), &v1, &v1, 1.0, &JvpConfig::default()).unwrap();
        assert_eq!(r.dx, Vector::zeros(2));
    }

    #[test]
    fn deflation_examples() {
        let s = dmatrix![1.0, 0.3, -0.2; 0.1, 1.0, 0.4; 0.0, -0.5, 1.0];
        let sinv = s.clone().try_inverse().unwrap();
        let lambdas = [3.0, 1.0, -2.0];
        let j = &s * Matrix::from_diagonal(&vec(&lambdas)) * &sinv;
        let p = linear(j);
        let pair = crate::model::normalize_pair(
            &DirectionPair::new(s.column(0).into_owned(), sinv.row(0).transpose()),
            &p,
        )
        .unwrap();
        let x = Vector::zeros(3);
        let cfg = JvpConfig::default();
        let out = deflate_action(&p, &x, &pair.v, pair.w(), &pair.v, &cfg).unwrap();
        assert!(out.amax() < 1e-13);
        for k in 1..3 {
            let vk = s.column(k).into_owned();
            let out = deflate_action(&p, &x, &pair.v, pair.w(), &vk, &cfg).unwrap();
            assert!((out - &vk * lambdas[k]).amax() < 1e-13);
        }
    }

    #[test]
    fn layout_round_trip() {
        let state = GadState::new(
            vec(&[1.0, 2.0]),
            vec![
                DirectionPair::new(vec(&[3.0, 4.0]), vec(&[5.0, 6.0])),
                DirectionPair::aliased(vec(&[7.0, 8.0])),
            ],
        );
        let layout = StateLayout::of(&state);
        assert_eq!(layout.len(), 8);
        let z = layout.pack(&state.x, &state.pairs);
        assert_eq!(z.as_slice(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let (x, pairs) = layout.unpack(&z);
        assert_eq!(x, state.x);
        assert_eq!(pairs, state.pairs);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn nonlinear3() -> ProblemSpec {
            // Smooth non-gradient field with analytic Jacobian.
            let f = |x: &Vector| {
                vec(&[
                    x[1] - x[0] + 0.3 * x[0] * x[2],
                    -0.5 * x[1] + x[0] * x[0] - x[2],
                    x[0] - 2.0 * x[2] + 0.2 * x[1] * x[1],
                ])
            };
            let jac = |x: &Vector| {
                dmatrix![
                    -1.0 + 0.3 * x[2], 1.0, 0.3 * x[0];
                    2.0 * x[0], -0.5, -1.0;
                    1.0, 0.4 * x[1], -2.0
                ]
            };
            ProblemSpec::new("nl3", 3, move |x: &Vector| Ok(f(x)))
                .with_jacobian_action(move |x: &Vector, b: &Vector| Ok(jac(x) * b))
                .with_jacobian_transpose_action(move |x: &Vector, b: &Vector| Ok(jac(x).tr_mul(b)))
        }

        fn v3() -> impl Strategy<Value = Vector> {
            prop::collection::vec(-1.0..1.0f64, 3).prop_map(Vector::from_vec)
        }

        proptest! {
            #[test]
            fn tangency_and_reflection(x in v3(), v in v3(), w in v3()) {
                let p = nonlinear3();
                prop_assume!(v.norm() > 0.1);
                let vn = &v / v.norm();
                prop_assume!(w.dot(&vn).abs() > 0.2 * w.norm());
                let pair = crate::model::normalize_pair(&DirectionPair::new(v, w), &p).unwrap();
                let (dx, dv, dw) = rhs_index1(&p, &x, &pair.v, pair.w(), 1.0, &JvpConfig::default()).unwrap();
                let scale = 1.0 + dv.amax() + dw.amax() * pair.w().amax();
                prop_assert!(pair.v.dot(&dv).abs() < 1e-12 * scale);
                prop_assert!((dw.dot(&pair.v) + pair.w().dot(&dv)).abs() < 1e-12 * scale);
                let f = p.field(&x).unwrap();
                prop_assert!((dx.dot(pair.w()) + f.dot(pair.w())).abs() < 1e-12 * (1.0 + f.amax() * pair.w().amax()));
            }
        }
    }
}
