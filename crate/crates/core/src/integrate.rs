//! Fixed-step time integration of the GAD systems with renormalization after
//! every step, direction warmup, and trajectory recording.

use nalgebra::Matrix2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{evaluate, GadVariant, RhsEval, StateLayout, VariantKind};
use crate::error::{GadError, GadResult, Warning};
use crate::jacobian::{jvp, JvpConfig};
use crate::model::{
    check_dim, inf_norm, normalization_drift_with, normalize_pair_with, DirectionPair, Eigenvalue, GadState,
    ProblemSpec, SaddleReport, TrajectoryRecord, TrajectorySample, Vector,
};
use crate::verify::classify_index;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stepper {
    Euler,
    Rk4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dt: f64,
    pub stepper: Stepper,
    pub max_steps: usize,
    /// Threshold on `|F(x)|_inf`.
    pub tol_force: f64,
    /// Threshold on `|x_dot|_inf`.
    pub tol_rhs: f64,
    pub blowup_norm: f64,
    pub warmup_steps: usize,
    /// Record every n-th state; 0 keeps only the first and last.
    pub record_every: usize,
    pub seed: u64,
    pub jvp: JvpConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            stepper: Stepper::Euler,
            max_steps: 1_000_000,
            tol_force: 1e-8,
            tol_rhs: 1e-8,
            blowup_norm: 1e6,
            warmup_steps: 0,
            record_every: 10,
            seed: 0,
            jvp: JvpConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> GadResult<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(GadError::InvalidConfig(format!("{name} must be positive, got {v}")))
            }
        };
        positive("dt", self.dt)?;
        positive("tol_force", self.tol_force)?;
        positive("tol_rhs", self.tol_rhs)?;
        positive("blowup_norm", self.blowup_norm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Running,
    Converged,
    Diverged,
}

fn classify_status(force_norm: f64, rhs_norm: f64, x_norm: f64, cfg: &RunConfig) -> Status {
    if !x_norm.is_finite() || x_norm > cfg.blowup_norm {
        Status::Diverged
    } else if force_norm < cfg.tol_force && rhs_norm < cfg.tol_rhs {
        Status::Converged
    } else {
        Status::Running
    }
}

pub fn check_convergence(
    problem: &ProblemSpec,
    state: &GadState,
    variant: &GadVariant,
    cfg: &RunConfig,
) -> GadResult<Status> {
    let x_norm = inf_norm(&state.x);
    if classify_status(0.0, 0.0, x_norm, cfg) == Status::Diverged {
        return Ok(Status::Diverged);
    }
    let eval = evaluate(problem, state, variant, &cfg.jvp)?;
    Ok(classify_status(inf_norm(&eval.force), inf_norm(&eval.dx), x_norm, cfg))
}

fn random_vector(rng: &mut ChaCha8Rng, n: usize) -> Vector {
    Vector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0))
}

/// Seeded random direction pairs for `variant`, normalized, with `w = v`.
/// Gradient problems get aliased pairs, the rest store `w` separately.
pub fn initial_directions(
    problem: &ProblemSpec,
    variant: &GadVariant,
    seed: u64,
) -> GadResult<Vec<DirectionPair>> {
    let n = problem.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs: Vec<DirectionPair> = Vec::new();
    for _ in 0..variant.kind.pair_count() {
        let mut v = random_vector(&mut rng, n);
        // Keep the second right direction away from the first.
        for prev in &pairs {
            let pv = problem.dot(&v, &prev.v);
            v -= &prev.v * pv;
        }
        // Starting from w = v keeps (w, v) = |v|^2 well away from zero; a
        // poorly dual random w inflates beta and destabilizes explicit steps.
        let pair = if problem.is_gradient() {
            DirectionPair::aliased(v)
        } else {
            DirectionPair::new(v.clone(), v)
        };
        pairs.push(normalize_pair_with(&pair, problem, variant.kind.normalization())?);
    }
    Ok(pairs)
}

/// Relaxes the direction equations at frozen `x0` for `cfg.warmup_steps`
/// steps, renormalizing after each.
pub fn warmup_directions(
    problem: &ProblemSpec,
    x0: &Vector,
    variant: &GadVariant,
    pairs: Vec<DirectionPair>,
    cfg: &RunConfig,
) -> GadResult<Vec<DirectionPair>> {
    if cfg.warmup_steps == 0 || pairs.is_empty() {
        return Ok(pairs);
    }
    let mut state = GadState::new(x0.clone(), pairs).normalized_with(problem, variant.kind.normalization())?;
    for _ in 0..cfg.warmup_steps {
        state = advance(problem, &state, variant, cfg, true, None)?.state;
    }
    Ok(state.pairs)
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: GadState,
    /// Normalization violation right after the raw step, before renormalizing.
    pub drift: f64,
}

/// One explicit step of size `cfg.dt` followed by renormalization.
pub fn step(problem: &ProblemSpec, state: &GadState, variant: &GadVariant, cfg: &RunConfig) -> GadResult<StepOutcome> {
    advance(problem, state, variant, cfg, false, None)
}

fn advance(
    problem: &ProblemSpec,
    state: &GadState,
    variant: &GadVariant,
    cfg: &RunConfig,
    freeze_x: bool,
    first: Option<&RhsEval>,
) -> GadResult<StepOutcome> {
    let layout = StateLayout::of(state);
    let n = problem.dim();
    let rhs = |s: &GadState| -> GadResult<Vector> {
        let e = evaluate(problem, s, variant, &cfg.jvp)?;
        Ok(pack_eval(&layout, &e, freeze_x, n))
    };
    let z0 = layout.pack(&state.x, &state.pairs);
    let k1 = match first {
        Some(e) => pack_eval(&layout, e, freeze_x, n),
        None => rhs(state)?,
    };
    let dt = cfg.dt;
    let z1 = match cfg.stepper {
        Stepper::Euler => &z0 + &k1 * dt,
        Stepper::Rk4 => {
            let at = |z: Vector| {
                let (x, pairs) = layout.unpack(&z);
                GadState { x, pairs, t: state.t }
            };
            let k2 = rhs(&at(&z0 + &k1 * (0.5 * dt)))?;
            let k3 = rhs(&at(&z0 + &k2 * (0.5 * dt)))?;
            let k4 = rhs(&at(&z0 + &k3 * dt))?;
            &z0 + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
        }
    };
    let (x, raw_pairs) = layout.unpack(&z1);
    let x_norm = inf_norm(&x);
    if !x_norm.is_finite() || x_norm > cfg.blowup_norm || z1.iter().any(|c| !c.is_finite()) {
        return Err(GadError::Divergence {
            step: 0,
            norm: x_norm,
            last_state: Box::new(state.clone()),
        });
    }
    let mode = variant.kind.normalization();
    let drift = normalization_drift_with(&raw_pairs, problem, mode);
    let pairs = raw_pairs
        .iter()
        .map(|p| normalize_pair_with(p, problem, mode))
        .collect::<GadResult<Vec<_>>>()?;
    Ok(StepOutcome {
        state: GadState {
            x,
            pairs,
            t: state.t + dt,
        },
        drift,
    })
}

fn pack_eval(layout: &StateLayout, e: &RhsEval, freeze_x: bool, n: usize) -> Vector {
    if freeze_x {
        layout.pack(&Vector::zeros(n), &e.dpairs)
    } else {
        layout.pack(&e.dx, &e.dpairs)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: SaddleReport,
    pub trajectory: TrajectoryRecord,
    pub final_state: GadState,
    /// Why a non-converged run stopped.
    pub note: Option<String>,
}

/// Runs GAD from `x0` with seeded random directions (warmed up when
/// `cfg.warmup_steps > 0`).
pub fn run_gad(problem: &ProblemSpec, x0: &Vector, variant: &GadVariant, cfg: &RunConfig) -> GadResult<RunOutcome> {
    check_dim(problem.dim(), x0.len())?;
    variant.validate(problem)?;
    let pairs = initial_directions(problem, variant, cfg.seed)?;
    let pairs = warmup_directions(problem, x0, variant, pairs, cfg)?;
    run_gad_from(problem, GadState::new(x0.clone(), pairs), variant, cfg)
}

/// Runs GAD from a fully specified initial state.
pub fn run_gad_from(
    problem: &ProblemSpec,
    initial: GadState,
    variant: &GadVariant,
    cfg: &RunConfig,
) -> GadResult<RunOutcome> {
    cfg.validate()?;
    variant.validate(problem)?;
    let mut state = initial.normalized_with(problem, variant.kind.normalization())?;
    let mut trajectory = TrajectoryRecord::new();
    let mut steps = 0usize;
    let mut drift = 0.0;
    let mut converged = false;
    let mut diverged = false;
    let mut note = None;
    let mut warnings: Vec<Warning> = Vec::new();
    let mut last_recorded_step = None;

    let record = |trajectory: &mut TrajectoryRecord, state: &GadState, eval: &RhsEval, drift: f64| {
        trajectory.push(TrajectorySample {
            t: state.t,
            state: state.clone(),
            force_norm: inf_norm(&eval.force),
            alpha: eval.alpha,
            beta: eval.beta,
            drift,
        })
    };

    loop {
        let eval = match evaluate(problem, &state, variant, &cfg.jvp) {
            Ok(e) => e,
            Err(e) => {
                note = Some(format!("evaluation failed: {e}"));
                break;
            }
        };
        if let Some(w) = eval.warning {
            if !warnings.contains(&w) && warnings.len() < 8 {
                warnings.push(w);
            }
        }
        let status = classify_status(inf_norm(&eval.force), inf_norm(&eval.dx), inf_norm(&state.x), cfg);
        let record_now = steps == 0 || (cfg.record_every > 0 && steps % cfg.record_every == 0);
        let done = status != Status::Running || steps >= cfg.max_steps;
        if record_now || done {
            record(&mut trajectory, &state, &eval, drift)?;
            last_recorded_step = Some(steps);
        }
        match status {
            Status::Converged => {
                converged = true;
                break;
            }
            Status::Diverged => {
                diverged = true;
                note = Some("trajectory left the blowup radius".into());
                break;
            }
            Status::Running => {}
        }
        if steps >= cfg.max_steps {
            note = Some(format!("step budget of {} exhausted", cfg.max_steps));
            break;
        }
        match advance(problem, &state, variant, cfg, false, Some(&eval)) {
            Ok(out) => {
                state = out.state;
                drift = out.drift;
                steps += 1;
            }
            Err(GadError::Divergence { norm, .. }) => {
                diverged = true;
                note = Some(format!(
                    "diverged at step {} (|x|_inf = {norm:e}); reinitialize the initial position or the direction",
                    steps + 1
                ));
                break;
            }
            Err(e) => {
                note = Some(format!("step {} failed: {e}", steps + 1));
                break;
            }
        }
    }
    debug_assert!(last_recorded_step.is_some());

    let mut report = build_report(problem, &state, variant, cfg, converged, diverged, steps)?;
    report.warnings.extend(warnings);
    Ok(RunOutcome {
        report,
        trajectory,
        final_state: state,
        note,
    })
}

fn build_report(
    problem: &ProblemSpec,
    state: &GadState,
    variant: &GadVariant,
    cfg: &RunConfig,
    converged: bool,
    diverged: bool,
    steps: usize,
) -> GadResult<SaddleReport> {
    let x = &state.x;
    let residual_force = problem.field(x).map(|f| inf_norm(&f)).unwrap_or(f64::INFINITY);
    let (tracked, residual_eig) = if diverged {
        (vec![], None)
    } else {
        match tracked_eigenvalues(problem, state, variant, &cfg.jvp) {
            Ok((t, r)) => (t, Some(r)),
            Err(_) => (vec![], None),
        }
    };
    let lambda_star = tracked.first().map(|e| e.re);
    let mut warnings = Vec::new();
    let morse_index = if converged && problem.dim() <= cfg.jvp.dense_assembly_limit {
        let c = classify_index(problem, x, &cfg.jvp)?;
        warnings.extend(c.warning);
        Some(c.morse_index)
    } else {
        None
    };
    Ok(SaddleReport {
        x_star: x.iter().copied().collect(),
        lambda_star,
        tracked_eigenvalues: tracked,
        residual_force,
        residual_eig,
        morse_index,
        converged,
        diverged,
        steps,
        final_time: state.t,
        warnings,
    })
}

/// Eigenvalues followed by the directions of `state` and the eigen-residual of
/// the leading direction (`|J v - lambda v|_inf`, or the invariant-plane
/// residual for the complex index-2 variant).
pub fn tracked_eigenvalues(
    problem: &ProblemSpec,
    state: &GadState,
    variant: &GadVariant,
    cfg: &JvpConfig,
) -> GadResult<(Vec<Eigenvalue>, f64)> {
    let x = &state.x;
    match variant.kind {
        VariantKind::Index1ReducedTau0 => {
            let mode = crate::jacobian::hessian_smallest_eigvec(problem, x, cfg)?;
            let lambda = -mode.lambda;
            let jv = jvp(problem, x, &mode.v, cfg)?;
            Ok((vec![Eigenvalue::real(lambda)], inf_norm(&(jv - &mode.v * lambda))))
        }
        VariantKind::Index1Gradient | VariantKind::Index1General => {
            let pair = &state.pairs[0];
            let jv = jvp(problem, x, &pair.v, cfg)?;
            let a = problem.dot(&pair.v, &jv);
            Ok((vec![Eigenvalue::real(a)], inf_norm(&(jv - &pair.v * a))))
        }
        VariantKind::Index2RealDeflated => {
            let (p1, p2) = (&state.pairs[0], &state.pairs[1]);
            let r = crate::dynamics::rhs_index2_real(
                problem,
                x,
                &p1.v,
                p1.w.as_ref(),
                &p2.v,
                p2.w.as_ref(),
                1.0,
                cfg,
            )?;
            Ok((
                vec![Eigenvalue::real(r.alpha1), Eigenvalue::real(r.alpha2)],
                inf_norm(&r.dv1),
            ))
        }
        VariantKind::Index2Complex => {
            let pair = &state.pairs[0];
            let (v1, w1) = (&pair.v, pair.w());
            let v2 = jvp(problem, x, v1, cfg)?;
            let w2 = crate::jacobian::adjoint_action(problem, x, w1, cfg)?;
            let jv2 = jvp(problem, x, &v2, cfg)?;
            let d = |a: &Vector, b: &Vector| problem.dot(a, b);
            let a = Matrix2::new(d(w1, v1), d(w1, &v2), d(&w2, v1), d(&w2, &v2));
            let g = Matrix2::new(d(w1, &v2), d(w1, &jv2), d(&w2, &v2), d(&w2, &jv2));
            let r = a
                .try_inverse()
                .ok_or(GadError::NearSingularProjection { det: a.determinant() })?
                * g;
            let tr = r.trace();
            let det = r.determinant();
            let disc = tr * tr / 4.0 - det;
            let eig = if disc >= 0.0 {
                vec![
                    Eigenvalue::real(tr / 2.0 + disc.sqrt()),
                    Eigenvalue::real(tr / 2.0 - disc.sqrt()),
                ]
            } else {
                vec![
                    Eigenvalue { re: tr / 2.0, im: (-disc).sqrt() },
                    Eigenvalue { re: tr / 2.0, im: -(-disc).sqrt() },
                ]
            };
            // J [v1 v2] - [v1 v2] R
            let r1 = &v2 - v1 * r[(0, 0)] - &v2 * r[(1, 0)];
            let r2 = &jv2 - v1 * r[(0, 1)] - &v2 * r[(1, 1)];
            Ok((eig, inf_norm(&r1).max(inf_norm(&r2))))
        }
    }
}
