//! Monte Carlo estimation of the boundary-derivative representation: the
//! stopped-path expectation V1 + V2, the time-inhomogeneity integral
//! int V_s ds, their sum Lambda(t), the implied boundary slope
//! bdot(t) = sigma(b(t)) Lambda(t) / (2 h(t, b(t))), and the pre-limit
//! functional V_h used to validate the representation before the h -> 0
//! limit is taken.

use std::io::Write as _;

use crate::bessel::{
    hitting_time_theta, hitting_time_theta_h, sample_pitman_path, BoundaryCurveY, PitmanPath,
    EXPONENT_CAP,
};
use crate::error::{Error, Result};
use crate::model::{LampertiMap, ProblemSpec};
use crate::num::{mean_se, KahanSum};
use crate::pde::ValueSurface;
use crate::rng::substream;
use rayon::prelude::*;

/// Default floor on rho at the stopping time, in units of (y2 - y1);
/// capped-horizon paths below it are counted and the estimate flagged
/// high-variance if they exceed 1% of samples.
pub const RHO_FLOOR_FACTOR: f64 = 1e-3;
const HIGH_VARIANCE_FRACTION: f64 = 0.01;
const CAPPED_FRACTION_LIMIT: f64 = 1e-4;
/// Default quadrature nodes for the s-integral (uniform in q = sqrt(s)).
pub const DEFAULT_N_Q: usize = 64;
const INVERSE_TABLE_NODES: usize = 4096;

/// Uniform-grid tabulation of the inverse Lamperti map on [y1, y2]; the
/// per-step drift lookups in the path loops cannot afford root finding.
pub struct FastInverse {
    y1: f64,
    y2: f64,
    dy: f64,
    xs: Vec<f64>,
}

impl FastInverse {
    pub fn new(map: &LampertiMap) -> FastInverse {
        let n = INVERSE_TABLE_NODES;
        let dy = (map.y2 - map.y1) / n as f64;
        let xs = (0..=n)
            .map(|j| map.f_inv(map.y1 + j as f64 * dy))
            .collect();
        FastInverse { y1: map.y1, y2: map.y2, dy, xs }
    }

    /// x = f^{-1}(y), clamped to the rectangle, by table interpolation.
    pub fn x_at(&self, y: f64) -> f64 {
        let pos = ((y - self.y1) / self.dy).clamp(0.0, (self.xs.len() - 1) as f64);
        let j = (pos as usize).min(self.xs.len() - 2);
        let frac = pos - j as f64;
        self.xs[j] + frac * (self.xs[j + 1] - self.xs[j])
    }
}

/// Rescaled boundary curve from a solved surface: c = f(b), c_dot =
/// b_dot / sigma(b), Lipschitz constant over [0, T1].
pub fn build_boundary_curve_y(
    surface: &ValueSurface,
    spec: &ProblemSpec,
    map: &LampertiMap,
) -> Result<BoundaryCurveY> {
    let grid = &surface.grid;
    let mut c = Vec::with_capacity(surface.b.len());
    let mut c_dot = Vec::with_capacity(surface.b.len());
    let mut lipschitz = 0.0f64;
    for (i, (&b, &bd)) in surface.b.iter().zip(&surface.b_dot_fd).enumerate() {
        let t = grid.t_nodes[i];
        let ci = map.f(b);
        let cdi = bd / (spec.diffusion.sigma)(b);
        if t <= spec.rect_t1 {
            if ci <= map.y1 || ci >= map.y2 {
                return Err(Error::BoundaryEscape {
                    t,
                    detail: format!(
                        "rescaled boundary c({t}) = {ci} outside ({}, {})",
                        map.y1, map.y2
                    ),
                });
            }
            lipschitz = lipschitz.max(cdi.abs());
        }
        c.push(ci);
        c_dot.push(cdi);
    }
    Ok(BoundaryCurveY {
        t_nodes: grid.t_nodes.clone(),
        c,
        c_dot,
        lipschitz_const: lipschitz,
    })
}

/// Monte Carlo estimate of Lambda(t) and the implied boundary slope.
#[derive(Debug, Clone)]
pub struct LambdaEstimate {
    pub t: f64,
    /// capped-horizon part of the combined expectation (diagnostic split)
    pub v1: f64,
    /// barrier-crossing part of the combined expectation (diagnostic split)
    pub v2: f64,
    pub int_vs: f64,
    pub se_v1: f64,
    pub se_v2: f64,
    /// standard error of the combined V1 + V2 expectation
    pub se_v1v2: f64,
    pub se_int_vs: f64,
    pub lambda: f64,
    /// sigma(b(t)) / (2 h(t, b(t))), the Lambda-to-bdot conversion factor
    pub bdot_factor: f64,
    pub bdot_formula: f64,
    pub n_paths: usize,
    pub dt_path: f64,
    pub seed: u64,
    /// fraction of capped-horizon paths with rho below the floor
    pub floor_fraction: f64,
    /// fraction of paths whose weight exponent hit the overflow cap
    pub capped_fraction: f64,
    pub high_variance: bool,
}

impl LambdaEstimate {
    pub fn se_lambda(&self) -> f64 {
        (self.se_v1v2 * self.se_v1v2 + self.se_int_vs * self.se_int_vs).sqrt()
    }

    /// Standard error propagated through the Lambda-to-bdot factor.
    pub fn bdot_se(&self) -> f64 {
        self.bdot_factor.abs() * self.se_lambda()
    }
}

struct PathLogs {
    /// cumulative log of the stochastic exponential at each path node
    log_l: Vec<f64>,
    /// cumulative discount-rate integral at each path node
    int_r: Vec<f64>,
}

/// Cumulative weight logs along the coupled path (left-point drift
/// evaluation, trapezoidal rate), so the s-integral can read L and D at any
/// intermediate time without re-walking the path.
fn cumulative_logs<G, Rt>(
    path: &PitmanPath,
    curve: &BoundaryCurveY,
    gamma: G,
    rate: Rt,
    t: f64,
    s_max: f64,
) -> PathLogs
where
    G: Fn(f64, f64) -> f64,
    Rt: Fn(f64, f64) -> f64,
{
    let n = ((s_max / path.dt).ceil() as usize).min(path.n_steps());
    let mut log_l = Vec::with_capacity(n + 1);
    let mut int_r = Vec::with_capacity(n + 1);
    log_l.push(0.0);
    int_r.push(0.0);
    let mut acc_l = KahanSum::new();
    let mut acc_r = KahanSum::new();
    let mut r_prev = rate(t, curve.c_at(t) + path.rho[0]);
    for k in 0..n {
        let v = k as f64 * path.dt;
        let g = gamma(t + v, curve.c_at(t + v) + path.rho[k]) - curve.c_dot_at(t + v);
        acc_l.add(g * (path.rho[k + 1] - path.rho[k]) - 0.5 * g * g * path.dt);
        let r_next = rate(t + v + path.dt, curve.c_at(t + v + path.dt) + path.rho[k + 1]);
        acc_r.add(0.5 * (r_prev + r_next) * path.dt);
        r_prev = r_next;
        log_l.push(acc_l.value());
        int_r.push(acc_r.value());
    }
    PathLogs { log_l, int_r }
}

fn lerp_nodes(values: &[f64], dt: f64, s: f64) -> f64 {
    crate::num::lerp_uniform(values, 0.0, dt, s)
}

/// Per-path value of the s-integral int_0^{theta} (L_s / rho_s) D_s
/// F(t+s, f^{-1}(c(t+s)+rho_s)) ds, computed with the substitution s = q^2
/// that absorbs the 1/sqrt(s) endpoint. The first path step [0, dt] is
/// skipped: linear interpolation of rho misrepresents the sqrt(s) scaling
/// there and the exact contribution is O(sqrt(dt)).
#[allow(clippy::too_many_arguments)]
fn vs_integral_one_path(
    spec: &ProblemSpec,
    surface: &ValueSurface,
    curve: &BoundaryCurveY,
    inv: &FastInverse,
    logs: &PathLogs,
    path: &PitmanPath,
    t: f64,
    theta: f64,
    n_q: usize,
) -> f64 {
    let q_lo = path.dt.sqrt();
    let q_hi = theta.sqrt();
    if q_hi <= q_lo {
        return 0.0;
    }
    let dq = (q_hi - q_lo) / n_q as f64;
    let integrand = |q: f64| {
        let s = q * q;
        let rho = path.rho_at(s);
        if rho <= 0.0 {
            return 0.0;
        }
        let y = (curve.c_at(t + s) + rho).clamp(inv.y1, inv.y2);
        let x = inv.x_at(y);
        let u = surface.u_at(t + s, x);
        let ux = surface.u_x_at(t + s, x);
        let f_val = spec.big_h_fn(t + s, x, u, ux).unwrap_or(0.0);
        let log_l = lerp_nodes(&logs.log_l, path.dt, s).min(EXPONENT_CAP);
        let int_r = lerp_nodes(&logs.int_r, path.dt, s);
        2.0 * q * (log_l - int_r).exp() / rho * f_val
    };
    let mut acc = KahanSum::new();
    let mut prev = integrand(q_lo);
    for k in 1..=n_q {
        let next = integrand(q_lo + k as f64 * dq);
        acc.add(0.5 * (prev + next) * dq);
        prev = next;
    }
    acc.value()
}

fn path_steps(cap: f64, dt_path: f64) -> usize {
    ((cap / dt_path).ceil() as usize).max(2) + 2
}

/// Estimate Lambda(t) = V1(t) + V2(t) + int_0^{T1-t} V_s(t) ds and the
/// implied boundary slope at `t`, streaming one path per RNG substream.
///
/// V1 + V2 is estimated as the single expectation
/// E[(L/rho_theta) D wdot(t+theta, c(t+theta)+rho_theta)]; the split by the
/// capped-horizon indicator is recorded for diagnostics only. The s-integral
/// shares the same paths (common random numbers).
/// Monte Carlo knobs shared by the estimators; `Default` gives the
/// laboratory settings.
#[derive(Debug, Clone)]
pub struct McOptions {
    pub n_paths: usize,
    pub dt_path: f64,
    pub seed: u64,
    /// quadrature nodes for the s-integral
    pub n_q: usize,
    /// diagnostic floor for small rho values, as a fraction of (y2 - y1)
    pub rho_floor_factor: f64,
    /// sample the within-step maximum from the exact Brownian bridge law
    pub bridge_max: bool,
}

impl Default for McOptions {
    fn default() -> Self {
        McOptions {
            n_paths: 200_000,
            dt_path: 1.6e-4,
            seed: 0,
            n_q: DEFAULT_N_Q,
            rho_floor_factor: RHO_FLOOR_FACTOR,
            bridge_max: true,
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn estimate_lambda(
    spec: &ProblemSpec,
    surface: &ValueSurface,
    curve: &BoundaryCurveY,
    map: &LampertiMap,
    t: f64,
    n_paths: usize,
    dt_path: f64,
    seed: u64,
) -> Result<LambdaEstimate> {
    estimate_lambda_nq(spec, surface, curve, map, t, n_paths, dt_path, seed, DEFAULT_N_Q)
}

#[allow(clippy::too_many_arguments)]
pub fn estimate_lambda_nq(
    spec: &ProblemSpec,
    surface: &ValueSurface,
    curve: &BoundaryCurveY,
    map: &LampertiMap,
    t: f64,
    n_paths: usize,
    dt_path: f64,
    seed: u64,
    n_q: usize,
) -> Result<LambdaEstimate> {
    let opts = McOptions {
        n_paths,
        dt_path,
        seed,
        n_q,
        ..McOptions::default()
    };
    estimate_lambda_opts(spec, surface, curve, map, t, &opts)
}

pub fn estimate_lambda_opts(
    spec: &ProblemSpec,
    surface: &ValueSurface,
    curve: &BoundaryCurveY,
    map: &LampertiMap,
    t: f64,
    opts: &McOptions,
) -> Result<LambdaEstimate> {
    let McOptions {
        n_paths,
        dt_path,
        seed,
        n_q,
        rho_floor_factor,
        bridge_max,
    } = *opts;
    let t1 = spec.rect_t1;
    if !(0.0..t1).contains(&t) {
        return Err(Error::Config(format!(
            "lambda estimation requires 0 <= t < T1 = {t1}, got {t}"
        )));
    }
    let cap = t1 - t;
    let n_steps = path_steps(cap, dt_path);
    let inv = FastInverse::new(map);
    let gamma = |tt: f64, y: f64| {
        let x = inv.x_at(y.clamp(inv.y1, inv.y2));
        let tc = tt.clamp(0.0, t1);
        (spec.diffusion.mu)(tc, x) / (spec.diffusion.sigma)(x)
            - 0.5 * (spec.diffusion.sigma_x)(x)
    };
    let rate = |tt: f64, y: f64| {
        let x = inv.x_at(y.clamp(inv.y1, inv.y2));
        (spec.discount.r)(tt.clamp(0.0, t1), x)
    };
    let rho_floor = rho_floor_factor * (map.y2 - map.y1);

    let needs_integral = !spec.time_homogeneous;

    // per-path work is independent (substream keyed by path index) and the
    // indexed collect keeps sample order fixed, so the worker count never
    // changes any output bit
    struct PathOut {
        value: f64,
        crossed: bool,
        vs: f64,
        floored: bool,
        capped: bool,
    }
    let outs: Vec<PathOut> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = substream(seed, p as u64);
            let path = sample_pitman_path(n_steps, dt_path, &mut rng, bridge_max);
            let theta = hitting_time_theta(&path, curve, t, t1, map.y2);
            let mut floored_p = false;
            let rho_theta = if theta.crossed {
                let r = map.y2 - curve.c_at(t + theta.value);
                assert!(r > 0.0, "crossed path with nonpositive rho_theta");
                r
            } else {
                let r = path.rho_at(theta.value);
                if r < rho_floor {
                    floored_p = true;
                }
                r.max(f64::MIN_POSITIVE)
            };
            let logs = cumulative_logs(&path, curve, &gamma, &rate, t, theta.value);
            let log_l = lerp_nodes(&logs.log_l, path.dt, theta.value);
            let l = log_l.min(EXPONENT_CAP).exp();
            let d = (-lerp_nodes(&logs.int_r, path.dt, theta.value)).exp();
            let y = (curve.c_at(t + theta.value) + rho_theta).clamp(map.y1, map.y2);
            let payoff = surface.u_dot_at(t + theta.value, inv.x_at(y));
            let vs = if needs_integral {
                vs_integral_one_path(
                    spec, surface, curve, &inv, &logs, &path, t, theta.value, n_q,
                )
            } else {
                0.0
            };
            PathOut {
                value: l * d / rho_theta * payoff,
                crossed: theta.crossed,
                vs,
                floored: floored_p,
                capped: log_l > EXPONENT_CAP,
            }
        })
        .collect();

    let mut samples_v1 = vec![0.0f64; n_paths];
    let mut samples_v2 = vec![0.0f64; n_paths];
    let mut combined = vec![0.0f64; n_paths];
    let mut vs_samples = vec![0.0f64; n_paths];
    let mut floored = 0usize;
    let mut capped = 0usize;
    for (p, o) in outs.iter().enumerate() {
        combined[p] = o.value;
        if o.crossed {
            samples_v2[p] = o.value;
        } else {
            samples_v1[p] = o.value;
        }
        vs_samples[p] = o.vs;
        floored += o.floored as usize;
        capped += o.capped as usize;
    }

    let capped_fraction = capped as f64 / n_paths as f64;
    if capped_fraction > CAPPED_FRACTION_LIMIT {
        return Err(Error::Numerical {
            stage: "lambda weight".into(),
            detail: format!("{capped} of {n_paths} paths hit the exponent cap"),
            residual: capped_fraction,
        });
    }
    let (v1, se_v1) = mean_se(&samples_v1);
    let (v2, se_v2) = mean_se(&samples_v2);
    let (v1v2, se_v1v2) = mean_se(&combined);
    let (int_vs, se_int_vs) = if needs_integral {
        mean_se(&vs_samples)
    } else {
        (0.0, 0.0)
    };
    let lambda = v1v2 + int_vs;
    let b_t = surface.b_at(t);
    let bdot_factor = (spec.diffusion.sigma)(b_t) / (2.0 * spec.h_fn(t, b_t)?);
    Ok(LambdaEstimate {
        t,
        v1,
        v2,
        int_vs,
        se_v1,
        se_v2,
        se_v1v2,
        se_int_vs,
        lambda,
        bdot_factor,
        bdot_formula: bdot_factor * lambda,
        n_paths,
        dt_path,
        seed,
        floor_fraction: floored as f64 / n_paths as f64,
        capped_fraction,
        high_variance: (floored as f64 / n_paths as f64) > HIGH_VARIANCE_FRACTION,
    })
}

/// The s-integral alone, on the same substreams as `estimate_lambda` with
/// the same seed (common random numbers). Returns (mean, standard error).
#[allow(clippy::too_many_arguments)]
pub fn estimate_vs_integral(
    spec: &ProblemSpec,
    surface: &ValueSurface,
    curve: &BoundaryCurveY,
    map: &LampertiMap,
    t: f64,
    n_paths: usize,
    dt_path: f64,
    seed: u64,
    n_q: usize,
) -> Result<(f64, f64)> {
    let est = estimate_lambda_nq(spec, surface, curve, map, t, n_paths, dt_path, seed, n_q)?;
    Ok((est.int_vs, est.se_int_vs))
}

/// Monte Carlo estimate of the pre-limit functional V_h(t) = wdot(t, c(t)+h).
#[derive(Debug, Clone)]
pub struct VhEstimate {
    pub t: f64,
    pub h: f64,
    pub value: f64,
    pub std_err: f64,
    pub freq_b1: f64,
    pub freq_b2: f64,
    pub n_paths: usize,
    pub seed: u64,
}

/// Estimate V_h(t) from the pre-limit representation: indicator events on
/// the small future infimum, weights taken along the shifted process
/// h + rho - 2J (= h - W under the coupling), payoffs read off the solver
/// surface.
#[allow(clippy::too_many_arguments)]
pub fn estimate_vh(
    spec: &ProblemSpec,
    surface: &ValueSurface,
    curve: &BoundaryCurveY,
    map: &LampertiMap,
    t: f64,
    h: f64,
    n_paths: usize,
    dt_path: f64,
    seed: u64,
) -> Result<VhEstimate> {
    let opts = McOptions {
        n_paths,
        dt_path,
        seed,
        ..McOptions::default()
    };
    estimate_vh_opts(spec, surface, curve, map, t, h, &opts)
}

pub fn estimate_vh_opts(
    spec: &ProblemSpec,
    surface: &ValueSurface,
    curve: &BoundaryCurveY,
    map: &LampertiMap,
    t: f64,
    h: f64,
    opts: &McOptions,
) -> Result<VhEstimate> {
    let McOptions {
        n_paths,
        dt_path,
        seed,
        bridge_max,
        ..
    } = *opts;
    let t1 = spec.rect_t1;
    if !(0.0..t1).contains(&t) {
        return Err(Error::Config(format!(
            "V_h estimation requires 0 <= t < T1 = {t1}, got {t}"
        )));
    }
    if h <= 0.0 || curve.c_at(t) + h >= map.y2 {
        return Err(Error::Config(format!(
            "V_h requires 0 < h < y2 - c(t) = {}, got {h}",
            map.y2 - curve.c_at(t)
        )));
    }
    let cap = t1 - t;
    let n_steps = path_steps(cap, dt_path);
    let inv = FastInverse::new(map);
    let gamma_shift = |tt: f64, y: f64| {
        let x = inv.x_at(y.clamp(inv.y1, inv.y2));
        let tc = tt.clamp(0.0, t1);
        (spec.diffusion.mu)(tc, x) / (spec.diffusion.sigma)(x)
            - 0.5 * (spec.diffusion.sigma_x)(x)
    };
    let rate = |tt: f64, y: f64| {
        let x = inv.x_at(y.clamp(inv.y1, inv.y2));
        (spec.discount.r)(tt.clamp(0.0, t1), x)
    };
    let needs_integral = !spec.time_homogeneous;
    let n_s = DEFAULT_N_Q;

    // independent per-path work, order-preserving collect: bit-identical for
    // any worker count
    let outs: Vec<(f64, bool, bool)> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
        let mut rng = substream(seed, p as u64);
        let path = sample_pitman_path(n_steps, dt_path, &mut rng, bridge_max);
        let theta_h = hitting_time_theta_h(&path, curve, t, t1, map.y2, h);
        let k_cap = ((cap / path.dt).ceil() as usize).min(path.n_steps());
        // shifted-path cumulative weights: xi_v = h - W_v, left-point drift
        let mut log_l = Vec::with_capacity(k_cap + 1);
        let mut int_r = Vec::with_capacity(k_cap + 1);
        log_l.push(0.0);
        int_r.push(0.0);
        let mut acc_l = KahanSum::new();
        let mut acc_r = KahanSum::new();
        let mut r_prev = rate(t, curve.c_at(t) + h - path.w[0]);
        for k in 0..k_cap {
            let v = k as f64 * path.dt;
            let xi = h - path.w[k];
            let g = gamma_shift(t + v, curve.c_at(t + v) + xi) - curve.c_dot_at(t + v);
            let dxi = -(path.w[k + 1] - path.w[k]);
            acc_l.add(g * dxi - 0.5 * g * g * path.dt);
            let r_next =
                rate(t + v + path.dt, curve.c_at(t + v + path.dt) + h - path.w[k + 1]);
            acc_r.add(0.5 * (r_prev + r_next) * path.dt);
            r_prev = r_next;
            log_l.push(acc_l.value());
            int_r.push(acc_r.value());
        }
        let weight_at = |s: f64| {
            let ll = lerp_nodes(&log_l, path.dt, s).min(EXPONENT_CAP);
            let ir = lerp_nodes(&int_r, path.dt, s);
            (ll - ir).exp()
        };

        let b1 = path.wbar[k_cap] <= h && theta_h >= cap;
        let b2 = theta_h < cap && {
            let k = ((theta_h / path.dt).ceil() as usize).min(path.n_steps());
            path.wbar[k] <= h
        };
        assert!(!(b1 && b2), "pre-limit events must be disjoint");
        let mut value = 0.0;
        if b1 {
            let y = (h - path.w[k_cap] + curve.c_at(t1)).clamp(map.y1, map.y2);
            value += weight_at(cap) * surface.u_dot_at(t1, inv.x_at(y));
        }
        if b2 {
            value += weight_at(theta_h)
                * surface.u_dot_at(t + theta_h, inv.x_at(map.y2));
        }
        if needs_integral {
            // int_0^{cap} 1_{B_s} L D F(t+s, .) ds, trapezoid; the
            // integrand has no 1/rho singularity here
            let ds = cap / n_s as f64;
            let mut acc = KahanSum::new();
            let mut prev = 0.0f64;
            for k in 0..=n_s {
                let s = k as f64 * ds;
                let ks = ((s / path.dt).ceil() as usize).min(path.n_steps());
                let in_event = path.wbar[ks] <= h && theta_h >= s;
                let next = if in_event {
                    let xi = h - path.w[ks];
                    let y = (curve.c_at(t + s) + xi).clamp(map.y1, map.y2);
                    let x = inv.x_at(y);
                    let u = surface.u_at(t + s, x);
                    let ux = surface.u_x_at(t + s, x);
                    weight_at(s) * spec.big_h_fn(t + s, x, u, ux).unwrap_or(0.0)
                } else {
                    0.0
                };
                if k > 0 {
                    acc.add(0.5 * (prev + next) * ds);
                }
                prev = next;
            }
            value += acc.value();
        }
        (value, b1, b2)
        })
        .collect();

    let samples: Vec<f64> = outs.iter().map(|o| o.0).collect();
    let n_b1 = outs.iter().filter(|o| o.1).count();
    let n_b2 = outs.iter().filter(|o| o.2).count();
    let (value, std_err) = mean_se(&samples);
    Ok(VhEstimate {
        t,
        h,
        value,
        std_err,
        freq_b1: n_b1 as f64 / n_paths as f64,
        freq_b2: n_b2 as f64 / n_paths as f64,
        n_paths,
        seed,
    })
}

/// One row of the expansion-convergence study: the ratio
/// r(h) = wdot_solver(t, c(t)+h) / (h Lambda_MC(t)) should drift toward 1
/// as h shrinks.
#[derive(Debug, Clone)]
pub struct ExpansionStudy {
    pub t: f64,
    /// (h, r(h)) rows in the order given
    pub rows: Vec<(f64, f64)>,
    /// |r(h_min) - 1| < |r(h_max) - 1|
    pub improving: bool,
    /// Lambda was too close to zero to form ratios
    pub skipped: bool,
}

/// Compare the solver's wdot one curve-offset up against h * Lambda for a
/// decreasing list of offsets. wdot comes from the PDE surface, not MC, so
/// the two sides are independent.
pub fn expansion_convergence(
    surface: &ValueSurface,
    curve: &BoundaryCurveY,
    map: &LampertiMap,
    t: f64,
    h_list: &[f64],
    lambda: &LambdaEstimate,
) -> ExpansionStudy {
    let inv = FastInverse::new(map);
    if lambda.lambda.abs() <= 3.0 * lambda.se_lambda() {
        return ExpansionStudy { t, rows: Vec::new(), improving: false, skipped: true };
    }
    let rows: Vec<(f64, f64)> = h_list
        .iter()
        .map(|&h| {
            let y = (curve.c_at(t) + h).clamp(map.y1, map.y2);
            let wdot = surface.u_dot_at(t, inv.x_at(y));
            (h, wdot / (h * lambda.lambda))
        })
        .collect();
    let improving = rows.len() >= 2
        && (rows.last().unwrap().1 - 1.0).abs() < (rows[0].1 - 1.0).abs();
    ExpansionStudy { t, rows, improving, skipped: false }
}

/// One emitted row of lambda.csv.
#[derive(Debug, Clone)]
pub struct LambdaCsvRow {
    pub t: f64,
    pub v1_plus_v2: f64,
    pub se_v1v2: f64,
    pub int_vs: f64,
    pub se_int_vs: f64,
    pub lambda: f64,
    pub bdot_formula: f64,
    pub bdot_fd: f64,
    pub abs_diff: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl LambdaCsvRow {
    pub fn new(est: &LambdaEstimate, bdot_fd: f64, tolerance: f64) -> LambdaCsvRow {
        let abs_diff = (est.bdot_formula - bdot_fd).abs();
        LambdaCsvRow {
            t: est.t,
            v1_plus_v2: est.v1 + est.v2,
            se_v1v2: est.se_v1v2,
            int_vs: est.int_vs,
            se_int_vs: est.se_int_vs,
            lambda: est.lambda,
            bdot_formula: est.bdot_formula,
            bdot_fd,
            abs_diff,
            tolerance,
            pass: abs_diff <= tolerance,
        }
    }
}

pub fn write_lambda_csv(rows: &[LambdaCsvRow], path: &std::path::Path) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(
        f,
        "t,V1plusV2,se,intVs,se,Lambda,bdot_formula,bdot_fd,abs_diff,tolerance,verdict"
    )?;
    for r in rows {
        writeln!(
            f,
            "{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{}",
            r.t,
            r.v1_plus_v2,
            r.se_v1v2,
            r.int_vs,
            r.se_int_vs,
            r.lambda,
            r.bdot_formula,
            r.bdot_fd,
            r.abs_diff,
            r.tolerance,
            if r.pass { "PASS" } else { "FAIL" }
        )?;
    }
    Ok(())
}
