//! Shared domain types: problems, augmented GAD states, reports, and the
//! weighted inner product in which all projections are taken.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GadError, GadResult, Warning};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

pub type FieldFn = dyn Fn(&Vector) -> GadResult<Vector> + Send + Sync;
pub type ActionFn = dyn Fn(&Vector, &Vector) -> GadResult<Vector> + Send + Sync;
pub type PotentialFn = dyn Fn(&Vector) -> GadResult<f64> + Send + Sync;

/// Below this magnitude `(w, v)` (relative to `|w|`) the pair is treated as
/// metric-orthogonal and unusable.
pub const DUALITY_THRESHOLD: f64 = 1e-10;

/// A vector field `F` on R^n together with whatever derivative information is
/// available for it.
///
/// Immutable once built; clones share the callbacks.
#[derive(Clone)]
pub struct ProblemSpec {
    id: String,
    dim: usize,
    field: Arc<FieldFn>,
    jacobian_action: Option<Arc<ActionFn>>,
    jacobian_transpose_action: Option<Arc<ActionFn>>,
    potential: Option<Arc<PotentialFn>>,
    metric_weights: Vector,
    uniform_metric: bool,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("id", &self.id)
            .field("dim", &self.dim)
            .field("is_gradient", &self.is_gradient())
            .field("jacobian_action", &self.jacobian_action.is_some())
            .field(
                "jacobian_transpose_action",
                &self.jacobian_transpose_action.is_some(),
            )
            .finish()
    }
}

impl ProblemSpec {
    pub fn new<F>(id: impl Into<String>, dim: usize, field: F) -> Self
    where
        F: Fn(&Vector) -> GadResult<Vector> + Send + Sync + 'static,
    {
        assert!(dim > 0, "problem dimension must be positive");
        Self {
            id: id.into(),
            dim,
            field: Arc::new(field),
            jacobian_action: None,
            jacobian_transpose_action: None,
            potential: None,
            metric_weights: Vector::from_element(dim, 1.0),
            uniform_metric: true,
        }
    }

    pub fn with_jacobian_action<J>(mut self, action: J) -> Self
    where
        J: Fn(&Vector, &Vector) -> GadResult<Vector> + Send + Sync + 'static,
    {
        self.jacobian_action = Some(Arc::new(action));
        self
    }

    pub fn with_jacobian_transpose_action<J>(mut self, action: J) -> Self
    where
        J: Fn(&Vector, &Vector) -> GadResult<Vector> + Send + Sync + 'static,
    {
        self.jacobian_transpose_action = Some(Arc::new(action));
        self
    }

    /// Marks the problem as a gradient system `F = -grad V` (gradient taken in
    /// the problem metric).
    pub fn with_potential<P>(mut self, potential: P) -> Self
    where
        P: Fn(&Vector) -> GadResult<f64> + Send + Sync + 'static,
    {
        self.potential = Some(Arc::new(potential));
        self
    }

    pub fn with_metric_weights(mut self, weights: Vector) -> GadResult<Self> {
        check_dim(self.dim, weights.len())?;
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(GadError::InvalidConfig(
                "metric weights must be finite and strictly positive".into(),
            ));
        }
        let first = weights[0];
        self.uniform_metric = weights.iter().all(|w| *w == first);
        self.metric_weights = weights;
        Ok(self)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_gradient(&self) -> bool {
        self.potential.is_some()
    }

    pub fn metric_weights(&self) -> &Vector {
        &self.metric_weights
    }

    /// True when every metric weight is the same, so metric adjoints coincide
    /// with plain transposes.
    pub fn has_uniform_metric(&self) -> bool {
        self.uniform_metric
    }

    pub fn has_jacobian_action(&self) -> bool {
        self.jacobian_action.is_some()
    }

    pub fn has_jacobian_transpose_action(&self) -> bool {
        self.jacobian_transpose_action.is_some()
    }

    /// Evaluates `F(x)`, rejecting wrong lengths and non-finite output.
    pub fn field(&self, x: &Vector) -> GadResult<Vector> {
        check_dim(self.dim, x.len())?;
        let f = (self.field)(x)?;
        check_dim(self.dim, f.len())?;
        ensure_finite(&f, "field")?;
        Ok(f)
    }

    pub fn potential(&self, x: &Vector) -> Option<GadResult<f64>> {
        self.potential.as_ref().map(|p| {
            check_dim(self.dim, x.len())?;
            let value = p(x)?;
            if value.is_finite() {
                Ok(value)
            } else {
                Err(GadError::Evaluation("potential is not finite".into()))
            }
        })
    }

    pub(crate) fn analytic_jacobian_action(&self, x: &Vector, b: &Vector) -> Option<GadResult<Vector>> {
        self.jacobian_action.as_ref().map(|j| {
            let out = j(x, b)?;
            check_dim(self.dim, out.len())?;
            ensure_finite(&out, "jacobian action")?;
            Ok(out)
        })
    }

    pub(crate) fn analytic_jacobian_transpose_action(
        &self,
        x: &Vector,
        b: &Vector,
    ) -> Option<GadResult<Vector>> {
        self.jacobian_transpose_action.as_ref().map(|j| {
            let out = j(x, b)?;
            check_dim(self.dim, out.len())?;
            ensure_finite(&out, "jacobian transpose action")?;
            Ok(out)
        })
    }

    /// Weighted inner product without dimension checks; callers guarantee lengths.
    pub(crate) fn dot(&self, u: &Vector, z: &Vector) -> f64 {
        if self.uniform_metric {
            self.metric_weights[0] * u.dot(z)
        } else {
            u.iter()
                .zip(z.iter())
                .zip(self.metric_weights.iter())
                .map(|((a, b), w)| w * a * b)
                .sum()
        }
    }
}

pub(crate) fn check_dim(expected: usize, found: usize) -> GadResult<()> {
    if expected == found {
        Ok(())
    } else {
        Err(GadError::Dimension { expected, found })
    }
}

pub(crate) fn ensure_finite(v: &Vector, what: &str) -> GadResult<()> {
    if v.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(GadError::Evaluation(format!("{what} returned a non-finite value")))
    }
}

pub(crate) fn inf_norm(v: &Vector) -> f64 {
    v.iter().fold(0.0_f64, |m, c| m.max(c.abs()))
}

/// `sum_i w_i u_i z_i` with `w` the problem's metric weights.
pub fn inner_product(u: &Vector, z: &Vector, problem: &ProblemSpec) -> GadResult<f64> {
    check_dim(problem.dim(), u.len())?;
    check_dim(problem.dim(), z.len())?;
    Ok(problem.dot(u, z))
}

/// A right direction `v` and a left direction `w`.
///
/// For gradient systems `w` is not stored and aliases `v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionPair {
    pub v: Vector,
    pub w: Option<Vector>,
}

impl DirectionPair {
    pub fn new(v: Vector, w: Vector) -> Self {
        Self { v, w: Some(w) }
    }

    pub fn aliased(v: Vector) -> Self {
        Self { v, w: None }
    }

    pub fn w(&self) -> &Vector {
        self.w.as_ref().unwrap_or(&self.v)
    }

    pub fn is_aliased(&self) -> bool {
        self.w.is_none()
    }
}

/// How a direction pair is rescaled after each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `(v, v) = 1` and `(w, v) = 1`.
    #[default]
    Dual,
    /// `(v, v) = 1` and `(w, w) = 1`; for directions that rotate inside a
    /// complex eigenplane, where `(w, v)` is not sign-definite.
    Unit,
}

/// Rescales the pair so that `(v, v) = 1` and `(w, v) = 1`.
pub fn normalize_pair(pair: &DirectionPair, problem: &ProblemSpec) -> GadResult<DirectionPair> {
    normalize_pair_with(pair, problem, Normalization::Dual)
}

pub fn normalize_pair_with(
    pair: &DirectionPair,
    problem: &ProblemSpec,
    mode: Normalization,
) -> GadResult<DirectionPair> {
    check_dim(problem.dim(), pair.v.len())?;
    let vv = problem.dot(&pair.v, &pair.v);
    if !(vv.is_finite() && vv > 0.0) {
        return Err(GadError::ZeroDirection);
    }
    let v = &pair.v / vv.sqrt();
    let w = match &pair.w {
        None => None,
        Some(w) => {
            check_dim(problem.dim(), w.len())?;
            let ww = problem.dot(w, w);
            match mode {
                Normalization::Dual => {
                    let wv = problem.dot(w, &v);
                    if !(wv.is_finite() && ww.is_finite()) || wv.abs() <= DUALITY_THRESHOLD * ww.sqrt() {
                        return Err(GadError::DegenerateDuality { value: wv });
                    }
                    Some(w / wv)
                }
                Normalization::Unit => {
                    if !(ww.is_finite() && ww > 0.0) {
                        return Err(GadError::ZeroDirection);
                    }
                    Some(w / ww.sqrt())
                }
            }
        }
    };
    Ok(DirectionPair { v, w })
}

/// Largest violation of `(v, v) = 1` and `(w, v) = 1` over the pairs.
pub fn normalization_drift(pairs: &[DirectionPair], problem: &ProblemSpec) -> f64 {
    normalization_drift_with(pairs, problem, Normalization::Dual)
}

pub fn normalization_drift_with(pairs: &[DirectionPair], problem: &ProblemSpec, mode: Normalization) -> f64 {
    pairs
        .iter()
        .map(|p| {
            let vv = (problem.dot(&p.v, &p.v) - 1.0).abs();
            let wv = match (mode, &p.w) {
                (Normalization::Unit, Some(w)) => (problem.dot(w, w) - 1.0).abs(),
                _ => (problem.dot(p.w(), &p.v) - 1.0).abs(),
            };
            vv.max(wv)
        })
        .fold(0.0, f64::max)
}

/// Augmented GAD state: position, direction pairs and time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GadState {
    pub x: Vector,
    pub pairs: Vec<DirectionPair>,
    pub t: f64,
}

impl GadState {
    pub fn new(x: Vector, pairs: Vec<DirectionPair>) -> Self {
        Self { x, pairs, t: 0.0 }
    }

    pub fn normalized(&self, problem: &ProblemSpec) -> GadResult<Self> {
        self.normalized_with(problem, Normalization::Dual)
    }

    pub fn normalized_with(&self, problem: &ProblemSpec, mode: Normalization) -> GadResult<Self> {
        check_dim(problem.dim(), self.x.len())?;
        let pairs = self
            .pairs
            .iter()
            .map(|p| normalize_pair_with(p, problem, mode))
            .collect::<GadResult<Vec<_>>>()?;
        Ok(Self {
            x: self.x.clone(),
            pairs,
            t: self.t,
        })
    }
}

/// An eigenvalue tracked by the directions at termination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eigenvalue {
    pub re: f64,
    pub im: f64,
}

impl Eigenvalue {
    pub fn real(re: f64) -> Self {
        Self { re, im: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaddleReport {
    pub x_star: Vec<f64>,
    /// `alpha(v)` of the leading direction at termination.
    pub lambda_star: Option<f64>,
    /// Eigenvalues tracked by the direction pairs (two for index-2 searches).
    pub tracked_eigenvalues: Vec<Eigenvalue>,
    pub residual_force: f64,
    pub residual_eig: Option<f64>,
    pub morse_index: Option<usize>,
    pub converged: bool,
    pub diverged: bool,
    pub steps: usize,
    pub final_time: f64,
    pub warnings: Vec<Warning>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub state: GadState,
    pub force_norm: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Normalization violation accumulated by the step that produced this state,
    /// measured before renormalizing.
    pub drift: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    samples: Vec<TrajectorySample>,
}

impl TrajectoryRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, sample: TrajectorySample) -> GadResult<()> {
        if let Some(last) = self.samples.last() {
            if !(sample.t > last.t) {
                return Err(GadError::Numerical(format!(
                    "trajectory time must increase ({} after {})",
                    sample.t, last.t
                )));
            }
        }
        self.samples.push(sample);
        Ok(())
    }

    pub fn samples(&self) -> &[TrajectorySample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn last(&self) -> Option<&TrajectorySample> {
        self.samples.last()
    }
}

/// Largest deviation between `F` and `-W^{-1} grad V` at `x`, with `grad V`
/// from central differences of the potential. `None` for non-gradient problems.
pub fn gradient_consistency_error(problem: &ProblemSpec, x: &Vector, h: f64) -> Option<GadResult<f64>> {
    if !problem.is_gradient() {
        return None;
    }
    Some((|| {
        let f = problem.field(x)?;
        let mut worst = 0.0_f64;
        for i in 0..problem.dim() {
            let step = h * (1.0 + x[i].abs());
            let mut xp = x.clone();
            xp[i] += step;
            let mut xm = x.clone();
            xm[i] -= step;
            let vp = problem.potential(&xp).expect("gradient problem")?;
            let vm = problem.potential(&xm).expect("gradient problem")?;
            let dv = (vp - vm) / (2.0 * step) / problem.metric_weights()[i];
            worst = worst.max((f[i] + dv).abs());
        }
        Ok(worst)
    })())
}
