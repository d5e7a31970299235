//! Built-in problems: the 2D double well, Lorenz (forward and time-reversed),
//! a 1D periodic reaction-diffusion system with a nucleation saddle, the
//! Allen-Cahn equation, and the Rayleigh quotient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use crate::error::{GadError, GadResult};
use crate::model::{check_dim, Matrix, ProblemSpec, Vector};

/// Problem ids accepted by [`problem_by_id`], in listing order.
pub const PROBLEM_IDS: [&str; 6] = [
    "double-well",
    "lorenz",
    "lorenz-reversed",
    "rd-nucleation",
    "allen-cahn",
    "rayleigh",
];

fn v2(a: f64, b: f64) -> Vector {
    Vector::from_vec(vec![a, b])
}

/// `V(x, y) = (x^2 - 1)^2 / 4 + mu y^2 / 2`: minima `(+-1, 0)`, saddle `(0, 0)`.
pub fn double_well(mu: f64) -> GadResult<ProblemSpec> {
    if !(mu.is_finite() && mu > 0.0) {
        return Err(GadError::InvalidConfig(format!("double-well needs mu > 0, got {mu}")));
    }
    Ok(ProblemSpec::new("double-well", 2, move |x: &Vector| {
        Ok(v2(-(x[0] * x[0] - 1.0) * x[0], -mu * x[1]))
    })
    .with_jacobian_action(move |x: &Vector, b: &Vector| Ok(v2(-(3.0 * x[0] * x[0] - 1.0) * b[0], -mu * b[1])))
    .with_potential(move |x: &Vector| Ok(0.25 * (x[0] * x[0] - 1.0).powi(2) + 0.5 * mu * x[1] * x[1])))
}

/// Half-width of the band around `x = 0` where the smallest Hessian
/// eigenvalue of the double well belongs to the `x` direction.
pub fn double_well_switch_line(mu: f64) -> f64 {
    ((1.0 + mu) / 3.0).sqrt()
}

/// Potential that the reduced index-1 dynamics descends on the double well:
/// `V1 = -(x^2-1)^2/4 + mu y^2/2` for `|x| <= sqrt((1+mu)/3)` (the line itself
/// included) and `V2 = (x^2-1)^2/4 - mu y^2/2` outside.
pub fn v_gad_potential(x: &Vector, mu: f64) -> GadResult<f64> {
    check_dim(2, x.len())?;
    let quartic = 0.25 * (x[0] * x[0] - 1.0).powi(2);
    let quad = 0.5 * mu * x[1] * x[1];
    Ok(if x[0].abs() <= double_well_switch_line(mu) {
        -quartic + quad
    } else {
        quartic - quad
    })
}

pub const LORENZ_SIGMA: f64 = 10.0;
pub const LORENZ_BETA: f64 = 8.0 / 3.0;
pub const LORENZ_RHO: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LorenzParams {
    pub sigma: f64,
    pub beta: f64,
    pub rho: f64,
}

impl Default for LorenzParams {
    fn default() -> Self {
        Self {
            sigma: LORENZ_SIGMA,
            beta: LORENZ_BETA,
            rho: LORENZ_RHO,
        }
    }
}

impl LorenzParams {
    pub fn origin(&self) -> Vector {
        Vector::zeros(3)
    }

    /// `Q+-` = `(+-sqrt(beta (rho - 1)), +-sqrt(beta (rho - 1)), rho - 1)`;
    /// `None` when `beta (rho - 1) < 0`.
    pub fn q(&self, positive: bool) -> Option<Vector> {
        let r = self.beta * (self.rho - 1.0);
        if r < 0.0 {
            return None;
        }
        let s = if positive { r.sqrt() } else { -r.sqrt() };
        Some(Vector::from_vec(vec![s, s, self.rho - 1.0]))
    }

    fn jacobian(&self, x: &Vector) -> Matrix {
        let (s, b, r) = (self.sigma, self.beta, self.rho);
        Matrix::from_row_slice(3, 3, &[-s, s, 0.0, r - x[2], -1.0, -x[0], x[1], x[0], -b])
    }
}

/// Lorenz system; `reversed` negates the field.
pub fn lorenz(params: LorenzParams, reversed: bool) -> GadResult<ProblemSpec> {
    let LorenzParams { sigma, beta, rho } = params;
    if ![sigma, beta, rho].iter().all(|p| p.is_finite()) {
        return Err(GadError::InvalidConfig("Lorenz parameters must be finite".into()));
    }
    let sign = if reversed { -1.0 } else { 1.0 };
    let id = if reversed { "lorenz-reversed" } else { "lorenz" };
    Ok(ProblemSpec::new(id, 3, move |x: &Vector| {
        Ok(Vector::from_vec(vec![
            sigma * (x[1] - x[0]),
            x[0] * (rho - x[2]) - x[1],
            x[0] * x[1] - beta * x[2],
        ]) * sign)
    })
    .with_jacobian_action(move |x: &Vector, b: &Vector| Ok(params.jacobian(x) * b * sign))
    .with_jacobian_transpose_action(move |x: &Vector, b: &Vector| Ok(params.jacobian(x).tr_mul(b) * sign)))
}

pub const RD_DELTA: f64 = 0.01;
pub const RD_GRID: usize = 128;

/// Parameters of `u_t = delta u_xx + f(u, v) / delta`,
/// `v_t = delta v_xx + g(u, v) / delta` on the periodic unit interval with
/// `f = (u - u^3 + 1.2) v + mu u / 2`, `g = u^2 / 2 - v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReactionDiffusion {
    pub mu: f64,
    pub delta: f64,
    pub n_grid: usize,
}

impl ReactionDiffusion {
    pub fn new(mu: f64, delta: f64, n_grid: usize) -> GadResult<Self> {
        if n_grid < 16 {
            return Err(GadError::InvalidConfig(format!("n_grid must be at least 16, got {n_grid}")));
        }
        if !(delta.is_finite() && delta > 0.0) || !mu.is_finite() {
            return Err(GadError::InvalidConfig(format!("invalid delta {delta} or mu {mu}")));
        }
        Ok(Self { mu, delta, n_grid })
    }

    pub fn h(&self) -> f64 {
        1.0 / self.n_grid as f64
    }

    pub fn problem(&self) -> ProblemSpec {
        let p = *self;
        let n = p.n_grid;
        let fwd = move |x: &Vector, b: &Vector| -> GadResult<Vector> {
            check_dim(2 * n, b.len())?;
            let (d, inv_d, mu) = (p.delta, 1.0 / p.delta, p.mu);
            let mut out = Vector::zeros(2 * n);
            let lbu = laplacian(b.rows(0, n).iter().copied(), n, p.h());
            let lbv = laplacian(b.rows(n, n).iter().copied(), n, p.h());
            for i in 0..n {
                let (u, v) = (x[i], x[n + i]);
                let (fu, fv) = ((1.0 - 3.0 * u * u) * v + 0.5 * mu, u - u * u * u + 1.2);
                out[i] = d * lbu[i] + inv_d * (fu * b[i] + fv * b[n + i]);
                out[n + i] = d * lbv[i] + inv_d * (u * b[i] - b[n + i]);
            }
            Ok(out)
        };
        let adj = move |x: &Vector, b: &Vector| -> GadResult<Vector> {
            check_dim(2 * n, b.len())?;
            let (d, inv_d, mu) = (p.delta, 1.0 / p.delta, p.mu);
            let mut out = Vector::zeros(2 * n);
            let lbu = laplacian(b.rows(0, n).iter().copied(), n, p.h());
            let lbv = laplacian(b.rows(n, n).iter().copied(), n, p.h());
            for i in 0..n {
                let (u, v) = (x[i], x[n + i]);
                let (fu, fv) = ((1.0 - 3.0 * u * u) * v + 0.5 * mu, u - u * u * u + 1.2);
                out[i] = d * lbu[i] + inv_d * (fu * b[i] + u * b[n + i]);
                out[n + i] = d * lbv[i] + inv_d * (fv * b[i] - b[n + i]);
            }
            Ok(out)
        };
        ProblemSpec::new("rd-nucleation", 2 * n, move |x: &Vector| {
            let (d, inv_d) = (p.delta, 1.0 / p.delta);
            let lu = laplacian(x.rows(0, n).iter().copied(), n, p.h());
            let lv = laplacian(x.rows(n, n).iter().copied(), n, p.h());
            let mut out = Vector::zeros(2 * n);
            for i in 0..n {
                let (u, v) = (x[i], x[n + i]);
                out[i] = d * lu[i] + inv_d * ((u - u * u * u + 1.2) * v + 0.5 * p.mu * u);
                out[n + i] = d * lv[i] + inv_d * (0.5 * u * u - v);
            }
            Ok(out)
        })
        .with_jacobian_action(fwd)
        .with_jacobian_transpose_action(adj)
        .with_metric_weights(Vector::from_element(2 * n, self.h()))
        .expect("positive uniform weights")
    }

    /// Real roots `u` of `u^2 - u^4 + 1.2 u + mu = 0`, ascending. Each gives
    /// the homogeneous equilibrium `(u, u^2 / 2)`; `u = 0` is always one too.
    pub fn homogeneous_roots(&self) -> Vec<f64> {
        let c = [1.0, 0.0, -1.0, -1.2, -self.mu];
        let companion = Matrix::from_fn(4, 4, |i, j| match (i, j) {
            (0, j) => -c[j + 1] / c[0],
            (i, j) if i == j + 1 => 1.0,
            _ => 0.0,
        });
        let mut roots: Vec<f64> = companion
            .complex_eigenvalues()
            .iter()
            .filter(|z| z.im.abs() < 1e-9)
            .map(|z| polish_quartic_root(z.re, self.mu))
            .collect();
        roots.sort_by(f64::total_cmp);
        roots.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
        roots
    }

    /// The nonzero stable homogeneous phase: the largest real root.
    pub fn u_plus(&self) -> Option<f64> {
        self.homogeneous_roots().last().copied().filter(|u| *u > 0.0)
    }

    pub fn homogeneous_state(&self, u: f64) -> Vector {
        let n = self.n_grid;
        let mut x = Vector::from_element(2 * n, u);
        x.rows_mut(n, n).fill(0.5 * u * u);
        x
    }

    /// `base` plus a smooth random perturbation: a seeded sum of the first
    /// few Fourier modes, scaled so its sup norm in `u` and in `v` equals
    /// `amplitude`.
    pub fn perturbed(&self, base: &Vector, amplitude: f64, seed: u64) -> Vector {
        let n = self.n_grid;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = base.clone();
        for block in 0..2 {
            let coeffs: Vec<(f64, f64)> = (0..4).map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
            let mut field: Vec<f64> = (0..n)
                .map(|i| {
                    let s = i as f64 / n as f64;
                    coeffs
                        .iter()
                        .enumerate()
                        .map(|(k, (a, b))| {
                            let w = 2.0 * std::f64::consts::PI * (k + 1) as f64 * s;
                            a * w.cos() + b * w.sin()
                        })
                        .sum()
                })
                .collect();
            let m = field.iter().fold(0.0f64, |m, f| m.max(f.abs()));
            if m > 0.0 {
                field.iter_mut().for_each(|f| *f *= amplitude / m);
            }
            for (i, f) in field.into_iter().enumerate() {
                out[block * n + i] += f;
            }
        }
        out
    }
}

fn polish_quartic_root(mut u: f64, mu: f64) -> f64 {
    for _ in 0..4 {
        let p = u * u - u.powi(4) + 1.2 * u + mu;
        let dp = 2.0 * u - 4.0 * u.powi(3) + 1.2;
        if dp == 0.0 {
            break;
        }
        u -= p / dp;
    }
    u
}

/// Periodic second-order central-difference Laplacian.
fn laplacian(values: impl Iterator<Item = f64>, n: usize, h: f64) -> Vec<f64> {
    let u: Vec<f64> = values.collect();
    let inv = 1.0 / (h * h);
    (0..n)
        .map(|i| (u[(i + n - 1) % n] - 2.0 * u[i] + u[(i + 1) % n]) * inv)
        .collect()
}

/// Discretized Allen-Cahn `u_t = u_xx - (u^2 - 1) u` on a periodic grid of
/// `n_grid` points over `[0, domain_length)`, as the gradient flow of
/// `I(u) = sum h ((u_{i+1} - u_i)^2 / (2 h^2) + (u_i^2 - 1)^2 / 4)` in the
/// `h`-weighted metric.
pub fn allen_cahn(n_grid: usize, domain_length: f64) -> GadResult<ProblemSpec> {
    if n_grid < 16 {
        return Err(GadError::InvalidConfig(format!("n_grid must be at least 16, got {n_grid}")));
    }
    if !(domain_length.is_finite() && domain_length > 0.0) {
        return Err(GadError::InvalidConfig(format!("invalid domain length {domain_length}")));
    }
    let n = n_grid;
    let h = domain_length / n as f64;
    ProblemSpec::new("allen-cahn", n, move |u: &Vector| {
        let lu = laplacian(u.iter().copied(), n, h);
        Ok(Vector::from_fn(n, |i, _| lu[i] - (u[i] * u[i] - 1.0) * u[i]))
    })
    .with_jacobian_action(move |u: &Vector, b: &Vector| {
        check_dim(n, b.len())?;
        let lb = laplacian(b.iter().copied(), n, h);
        Ok(Vector::from_fn(n, |i, _| lb[i] - (3.0 * u[i] * u[i] - 1.0) * b[i]))
    })
    .with_potential(move |u: &Vector| {
        Ok((0..n)
            .map(|i| {
                let du = (u[(i + 1) % n] - u[i]) / h;
                h * (0.5 * du * du + 0.25 * (u[i] * u[i] - 1.0).powi(2))
            })
            .sum())
    })
    .with_metric_weights(Vector::from_element(n, h))
}

/// Below this norm the Rayleigh quotient is treated as undefined.
pub const RAYLEIGH_MIN_NORM: f64 = 1e-8;

/// `V(x) = x^T A x / x^T x` for symmetric `A`, `F = -grad V`.
pub fn rayleigh(a: Matrix) -> GadResult<ProblemSpec> {
    if !a.is_square() || a.nrows() == 0 {
        return Err(GadError::InvalidConfig("Rayleigh matrix must be square and non-empty".into()));
    }
    let scale = a.amax().max(1.0);
    if (&a - a.transpose()).amax() > 1e-12 * scale {
        return Err(GadError::InvalidConfig("Rayleigh matrix must be symmetric".into()));
    }
    let n = a.nrows();
    let guard = |x: &Vector| -> GadResult<f64> {
        let s = x.norm_squared();
        if s.sqrt() < RAYLEIGH_MIN_NORM {
            return Err(GadError::Evaluation("Rayleigh quotient is singular at x = 0".into()));
        }
        Ok(s)
    };
    let (a1, a2, a3) = (a.clone(), a.clone(), a);
    Ok(ProblemSpec::new("rayleigh", n, move |x: &Vector| {
        let s = guard(x)?;
        let ax = &a1 * x;
        let q = x.dot(&ax) / s;
        Ok((ax - x * q) * (-2.0 / s))
    })
    .with_jacobian_action(move |x: &Vector, b: &Vector| {
        let s = guard(x)?;
        let ax = &a2 * x;
        let q = x.dot(&ax) / s;
        let g = &ax - x * q;
        let grad_q_b = 2.0 * g.dot(b) / s;
        let xb = x.dot(b);
        // d/db of -2 g / s, with dg = A b - q b - x (grad q . b) and ds = 2 x.b.
        Ok((&a2 * b - b * q - x * grad_q_b) * (-2.0 / s) + g * (4.0 * xb / (s * s)))
    })
    .with_potential(move |x: &Vector| {
        let s = guard(x)?;
        Ok(x.dot(&(&a3 * x)) / s)
    }))
}

/// A built-in problem with a default starting point.
#[derive(Debug, Clone)]
pub struct BuiltinProblem {
    pub spec: ProblemSpec,
    pub default_x0: Vector,
}

fn param_f64(params: &Value, key: &str, default: f64) -> GadResult<f64> {
    match params.get(key) {
        None | Some(Value::Null) => Ok(default),
        Some(v) => v
            .as_f64()
            .ok_or_else(|| GadError::InvalidConfig(format!("parameter '{key}' must be a number"))),
    }
}

fn param_usize(params: &Value, key: &str, default: usize) -> GadResult<usize> {
    match params.get(key) {
        None | Some(Value::Null) => Ok(default),
        Some(v) => v
            .as_u64()
            .map(|u| u as usize)
            .ok_or_else(|| GadError::InvalidConfig(format!("parameter '{key}' must be a non-negative integer"))),
    }
}

fn check_params(id: &str, params: &Value, known: &[&str]) -> GadResult<()> {
    match params {
        Value::Null => Ok(()),
        Value::Object(map) => {
            if let Some(k) = map.keys().find(|k| !known.contains(&k.as_str())) {
                return Err(GadError::InvalidConfig(format!(
                    "unknown parameter '{k}' for problem '{id}' (known: {})",
                    known.join(", ")
                )));
            }
            Ok(())
        }
        _ => Err(GadError::InvalidConfig(format!("params for '{id}' must be an object"))),
    }
}

/// Builds a problem from its id and a JSON parameter object.
///
/// | id | parameters (defaults) |
/// |----|----|
/// | `double-well` | `mu` (1) |
/// | `lorenz`, `lorenz-reversed` | `sigma` (10), `beta` (8/3), `rho` (30) |
/// | `rd-nucleation` | `mu` (-1), `delta` (0.01), `n_grid` (128), `perturbation` (0.05), `seed` (0), `start` (`"u_plus"` or `"zero"`) |
/// | `allen-cahn` | `n_grid` (128), `length` (10) |
/// | `rayleigh` | `matrix` (`diag(1, 2, 3)`) |
pub fn problem_by_id(id: &str, params: &Value) -> GadResult<BuiltinProblem> {
    match id {
        "double-well" => {
            check_params(id, params, &["mu"])?;
            let spec = double_well(param_f64(params, "mu", 1.0)?)?;
            Ok(BuiltinProblem {
                spec,
                default_x0: v2(0.5, 0.3),
            })
        }
        "lorenz" | "lorenz-reversed" => {
            check_params(id, params, &["sigma", "beta", "rho"])?;
            let p = LorenzParams {
                sigma: param_f64(params, "sigma", LORENZ_SIGMA)?,
                beta: param_f64(params, "beta", LORENZ_BETA)?,
                rho: param_f64(params, "rho", LORENZ_RHO)?,
            };
            let reversed = id == "lorenz-reversed";
            let default_x0 = if reversed {
                Vector::from_vec(vec![0.5, -0.5, 2.0])
            } else {
                Vector::from_vec(vec![-1.0, 2.0, 5.0])
            };
            Ok(BuiltinProblem {
                spec: lorenz(p, reversed)?,
                default_x0,
            })
        }
        "rd-nucleation" => {
            check_params(id, params, &["mu", "delta", "n_grid", "perturbation", "seed", "start"])?;
            let rd = ReactionDiffusion::new(
                param_f64(params, "mu", -1.0)?,
                param_f64(params, "delta", RD_DELTA)?,
                param_usize(params, "n_grid", RD_GRID)?,
            )?;
            let base = match params.get("start").and_then(Value::as_str).unwrap_or("u_plus") {
                "zero" => rd.homogeneous_state(0.0),
                "u_plus" => rd.homogeneous_state(
                    rd.u_plus()
                        .ok_or_else(|| GadError::InvalidConfig(format!("no positive homogeneous root for mu = {}", rd.mu)))?,
                ),
                other => {
                    return Err(GadError::InvalidConfig(format!(
                        "start must be \"zero\" or \"u_plus\", got \"{other}\""
                    )))
                }
            };
            let x0 = rd.perturbed(
                &base,
                param_f64(params, "perturbation", 0.05)?,
                param_usize(params, "seed", 0)? as u64,
            );
            Ok(BuiltinProblem {
                spec: rd.problem(),
                default_x0: x0,
            })
        }
        "allen-cahn" => {
            check_params(id, params, &["n_grid", "length"])?;
            let n = param_usize(params, "n_grid", 128)?;
            let length = param_f64(params, "length", 10.0)?;
            let spec = allen_cahn(n, length)?;
            let default_x0 = Vector::from_fn(n, |i, _| {
                0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()
            });
            Ok(BuiltinProblem { spec, default_x0 })
        }
        "rayleigh" => {
            check_params(id, params, &["matrix"])?;
            let a = match params.get("matrix") {
                None | Some(Value::Null) => Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 2.0, 3.0])),
                Some(m) => {
                    let rows: Vec<Vec<f64>> = serde_json::from_value(m.clone())
                        .map_err(|e| GadError::InvalidConfig(format!("matrix: {e}")))?;
                    let n = rows.len();
                    if n == 0 || rows.iter().any(|r| r.len() != n) {
                        return Err(GadError::InvalidConfig("matrix must be square".into()));
                    }
                    Matrix::from_fn(n, n, |i, j| rows[i][j])
                }
            };
            let n = a.nrows();
            Ok(BuiltinProblem {
                spec: rayleigh(a)?,
                default_x0: Vector::from_fn(n, |i, _| 1.0 / (1.0 + i as f64)),
            })
        }
        other => Err(GadError::InvalidConfig(format!(
            "unknown problem id '{other}' (known: {})",
            PROBLEM_IDS.join(", ")
        ))),
    }
}
