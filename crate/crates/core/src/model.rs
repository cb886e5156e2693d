//! Problem data for the optimal stopping instances: diffusion coefficients,
//! payoff, discount rate, the rectangle on which the free boundary lives, and
//! the analytically derived quantities built from them (h, H, the Lamperti
//! map, the rescaled drift gamma and the scale function).

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::num;

/// Callable of (t, x).
pub type TimeStateFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
/// Callable of x alone.
pub type StateFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

fn ts<F: Fn(f64, f64) -> f64 + Send + Sync + 'static>(f: F) -> TimeStateFn {
    Arc::new(f)
}

fn st<F: Fn(f64) -> f64 + Send + Sync + 'static>(f: F) -> StateFn {
    Arc::new(f)
}

/// Drift and diffusion coefficient of the state process together with the
/// analytic derivatives needed downstream.
#[derive(Clone)]
pub struct DiffusionSpec {
    pub mu: TimeStateFn,
    pub mu_t: TimeStateFn,
    pub sigma: StateFn,
    pub sigma_x: StateFn,
    pub sigma_xx: StateFn,
    pub domain_lo: f64,
    pub domain_hi: f64,
}

/// Payoff and its analytic partial derivatives.
///
/// `smooth_x` is the open x-interval on which the derivative callables are the
/// true derivatives of `g`. Piecewise payoffs (put/call) supply the smooth
/// branch of the derivative on the whole line; finite-difference
/// self-consistency checks are restricted to `smooth_x`.
#[derive(Clone)]
pub struct GainSpec {
    pub g: TimeStateFn,
    pub g_t: TimeStateFn,
    pub g_x: TimeStateFn,
    pub g_xx: TimeStateFn,
    pub g_tx: TimeStateFn,
    pub g_txx: TimeStateFn,
    pub g_tt: TimeStateFn,
    pub smooth_x: (f64, f64),
}

/// Discount rate r(t, x) and its time derivative.
#[derive(Clone)]
pub struct DiscountSpec {
    pub r: TimeStateFn,
    pub r_t: TimeStateFn,
}

/// Which side of the boundary is the stopping region.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    /// Put-type: stopping region {x <= b(t)}.
    StopBelow,
    /// Call-type: stopping region {x >= b(t)}.
    StopAbove,
}

/// One absolutely continuous piece of the terminal measure.
#[derive(Clone)]
pub struct TerminalDensity {
    pub f: StateFn,
    pub lo: f64,
    pub hi: f64,
}

/// Terminal weak-limit measure of the Stefan formulation: the signed measure
/// Sigma with lim_{t->T} int v_dot(t, z) xi(z) dz = int xi dSigma, the
/// integral running over the continuation side of the boundary.
#[derive(Clone, Default)]
pub struct TerminalMeasure {
    /// (location, signed mass) pairs.
    pub atoms: Vec<(f64, f64)>,
    pub density: Option<TerminalDensity>,
}

impl Default for TerminalDensity {
    fn default() -> Self {
        TerminalDensity {
            f: st(|_| 0.0),
            lo: 0.0,
            hi: 0.0,
        }
    }
}

/// A full optimal stopping instance.
#[derive(Clone)]
pub struct ProblemSpec {
    pub diffusion: DiffusionSpec,
    pub gain: GainSpec,
    pub discount: DiscountSpec,
    pub horizon_t: f64,
    pub rect_t1: f64,
    pub rect_x1: f64,
    pub rect_x2: f64,
    pub orientation: Orientation,
    /// All of mu, r, g independent of t.
    pub time_homogeneous: bool,
    /// mu independent of t (the scale function only needs this).
    pub drift_time_homogeneous: bool,
    /// Boundary value at the horizon, known analytically per instance.
    pub terminal_boundary: f64,
    pub terminal_measure: TerminalMeasure,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("horizon_t", &self.horizon_t)
            .field("rect_t1", &self.rect_t1)
            .field("rect_x1", &self.rect_x1)
            .field("rect_x2", &self.rect_x2)
            .field("orientation", &self.orientation)
            .field("time_homogeneous", &self.time_homogeneous)
            .field("terminal_boundary", &self.terminal_boundary)
            .finish()
    }
}

/// Lamperti transform y = f(x) = int_{c0}^x dz / sigma(z) and its inverse,
/// tabulated on [x1, x2] with local quadrature refinement.
#[derive(Clone)]
pub struct LampertiMap {
    pub c0: f64,
    pub y1: f64,
    pub y2: f64,
    x1: f64,
    x2: f64,
    table: Vec<f64>,
    dx: f64,
    sigma: StateFn,
}

const LAMPERTI_NODES: usize = 2049;

impl LampertiMap {
    fn build(spec: &ProblemSpec) -> LampertiMap {
        let (x1, x2) = (spec.rect_x1, spec.rect_x2);
        let sigma = spec.diffusion.sigma.clone();
        let n = LAMPERTI_NODES;
        let dx = (x2 - x1) / (n - 1) as f64;
        let mut table = Vec::with_capacity(n);
        table.push(0.0);
        let mut acc = 0.0;
        for j in 1..n {
            let a = x1 + (j - 1) as f64 * dx;
            acc += num::integrate(&|z| 1.0 / (sigma)(z), a, a + dx, 1e-14);
            table.push(acc);
        }
        LampertiMap {
            c0: x1,
            y1: 0.0,
            y2: acc,
            x1,
            x2,
            table,
            dx,
            sigma,
        }
    }

    /// f(x), anchored at c0 = x1 so that f(x1) = 0.
    pub fn f(&self, x: f64) -> f64 {
        let sigma = &self.sigma;
        if x < self.x1 {
            return num::integrate(&|z| 1.0 / (sigma)(z), self.x1, x, 1e-13);
        }
        if x > self.x2 {
            return self.y2 + num::integrate(&|z| 1.0 / (sigma)(z), self.x2, x, 1e-13);
        }
        let j = (((x - self.x1) / self.dx) as usize).min(self.table.len() - 1);
        let a = self.x1 + j as f64 * self.dx;
        self.table[j] + num::integrate(&|z| 1.0 / (sigma)(z), a, x, 1e-14)
    }

    /// Inverse transform, by table bracketing plus local root finding.
    pub fn f_inv(&self, y: f64) -> f64 {
        if y <= self.y1 {
            if y == self.y1 {
                return self.x1;
            }
            // extend below the table by expanding a bracket
            let mut lo = self.x1 - self.dx;
            while self.f(lo) > y {
                lo -= 64.0 * self.dx;
            }
            return num::find_root(&|x| self.f(x) - y, lo, self.x1, 1e-13 * (self.x2 - self.x1))
                .unwrap_or(lo);
        }
        if y >= self.y2 {
            if y == self.y2 {
                return self.x2;
            }
            let mut hi = self.x2 + self.dx;
            while self.f(hi) < y {
                hi += 64.0 * self.dx;
            }
            return num::find_root(&|x| self.f(x) - y, self.x2, hi, 1e-13 * (self.x2 - self.x1))
                .unwrap_or(hi);
        }
        let j = match self
            .table
            .binary_search_by(|v| v.partial_cmp(&y).expect("NaN in Lamperti table"))
        {
            Ok(j) => return self.x1 + j as f64 * self.dx,
            Err(j) => j - 1,
        };
        let a = self.x1 + j as f64 * self.dx;
        let b = a + self.dx;
        num::find_root(&|x| self.f(x) - y, a, b, 1e-13 * (self.x2 - self.x1))
            .unwrap_or(0.5 * (a + b))
    }
}

const RECT_SLACK: f64 = 1e-9;

impl ProblemSpec {
    fn in_rect(&self, t: f64, x: f64) -> bool {
        let st = RECT_SLACK * self.horizon_t.max(1.0);
        let sx = RECT_SLACK * (self.rect_x2 - self.rect_x1);
        t >= -st
            && t <= self.rect_t1 + st
            && x >= self.rect_x1 - sx
            && x <= self.rect_x2 + sx
    }

    /// h = g_t + (sigma^2/2) g_xx + mu g_x - r g, without a domain check.
    pub(crate) fn h_raw(&self, t: f64, x: f64) -> f64 {
        let s = (self.diffusion.sigma)(x);
        (self.gain.g_t)(t, x)
            + 0.5 * s * s * (self.gain.g_xx)(t, x)
            + (self.diffusion.mu)(t, x) * (self.gain.g_x)(t, x)
            - (self.discount.r)(t, x) * (self.gain.g)(t, x)
    }

    /// The source term h of the obstacle problem at (t, x) in the rectangle.
    pub fn h_fn(&self, t: f64, x: f64) -> Result<f64> {
        if !self.in_rect(t, x) {
            return Err(Error::Domain(format!(
                "h_fn input (t, x) = ({t}, {x}) outside the closed rectangle \
                 [0, {}] x [{}, {}]",
                self.rect_t1, self.rect_x1, self.rect_x2
            )));
        }
        Ok(self.h_raw(t, x))
    }

    /// h_dot = d/dt of h, from the analytic derivative callables.
    pub(crate) fn h_dot_raw(&self, t: f64, x: f64) -> f64 {
        let s = (self.diffusion.sigma)(x);
        (self.gain.g_tt)(t, x)
            + 0.5 * s * s * (self.gain.g_txx)(t, x)
            + (self.diffusion.mu_t)(t, x) * (self.gain.g_x)(t, x)
            + (self.diffusion.mu)(t, x) * (self.gain.g_tx)(t, x)
            - (self.discount.r_t)(t, x) * (self.gain.g)(t, x)
            - (self.discount.r)(t, x) * (self.gain.g_t)(t, x)
    }

    pub(crate) fn big_h_raw(&self, t: f64, x: f64, u_val: f64, u_x_val: f64) -> f64 {
        self.h_dot_raw(t, x) + (self.diffusion.mu_t)(t, x) * u_x_val
            - (self.discount.r_t)(t, x) * u_val
    }

    /// H = h_dot + mu_dot u_x - r_dot u, the source of the equation solved by
    /// the time derivative of the value function.
    pub fn big_h_fn(&self, t: f64, x: f64, u_val: f64, u_x_val: f64) -> Result<f64> {
        if !self.in_rect(t, x) {
            return Err(Error::Domain(format!(
                "big_h_fn input (t, x) = ({t}, {x}) outside the closed rectangle"
            )));
        }
        Ok(self.big_h_raw(t, x, u_val, u_x_val))
    }

    /// Build the Lamperti map of this instance (anchored at x1).
    pub fn lamperti(&self) -> LampertiMap {
        LampertiMap::build(self)
    }

    /// Drift of the rescaled process, gamma(t, y) = mu(t, f^{-1}(y)) /
    /// sigma(f^{-1}(y)) - sigma_x(f^{-1}(y)) / 2, extended as a constant
    /// outside [y1, y2] (and [0, T1] in time).
    pub fn gamma_fn(&self, map: &LampertiMap, t: f64, y: f64) -> f64 {
        let tc = t.clamp(0.0, self.rect_t1);
        let yc = y.clamp(map.y1, map.y2);
        let x = map.f_inv(yc);
        (self.diffusion.mu)(tc, x) / (self.diffusion.sigma)(x)
            - 0.5 * (self.diffusion.sigma_x)(x)
    }

    /// Discount rate seen through the Lamperti map, with the same clamped
    /// extension as `gamma_fn`.
    pub fn discount_rate_y(&self, map: &LampertiMap, t: f64, y: f64) -> f64 {
        let tc = t.clamp(0.0, self.rect_t1);
        let yc = y.clamp(map.y1, map.y2);
        (self.discount.r)(tc, map.f_inv(yc))
    }

    fn require_homogeneous_drift(&self) -> Result<()> {
        if !self.drift_time_homogeneous {
            return Err(Error::Config(
                "scale function requires a time-homogeneous drift".into(),
            ));
        }
        Ok(())
    }

    /// Scale density S'(x) = exp(-int_{x1}^x 2 mu / sigma^2), anchored at x1.
    pub fn scale_density(&self, x: f64) -> Result<f64> {
        self.require_homogeneous_drift()?;
        let mu = &self.diffusion.mu;
        let sigma = &self.diffusion.sigma;
        let expo = num::integrate(
            &|z| 2.0 * (mu)(0.0, z) / ((sigma)(z) * (sigma)(z)),
            self.rect_x1,
            x,
            1e-12,
        );
        Ok((-expo).exp())
    }

    /// Scale function S(x) = int_{x1}^x S'(z) dz (anchor S(x1) = 0).
    pub fn scale_function(&self, x: f64) -> Result<f64> {
        self.require_homogeneous_drift()?;
        let sx = self.rect_x2 - self.rect_x1;
        if x < self.rect_x1 - RECT_SLACK * sx || x > self.rect_x2 + RECT_SLACK * sx {
            return Err(Error::Domain(format!(
                "scale_function input x = {x} outside [{}, {}]",
                self.rect_x1, self.rect_x2
            )));
        }
        // scale_density only fails on the homogeneity check done above
        let val = num::integrate(
            &|z| self.scale_density(z).expect("drift homogeneity checked"),
            self.rect_x1,
            x,
            1e-11,
        );
        Ok(val)
    }

    /// Structural validation: rectangle ordering, positive diffusion, h < 0 on
    /// a 50x50 sampling of the closed rectangle, derivative self-consistency
    /// and the Lamperti round trip.
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.rect_t1 && self.rect_t1 < self.horizon_t) {
            return Err(Error::Config(format!(
                "need 0 < T1 < T, got T1 = {}, T = {}",
                self.rect_t1, self.horizon_t
            )));
        }
        if !(self.diffusion.domain_lo < self.rect_x1
            && self.rect_x1 < self.rect_x2
            && self.rect_x2 < self.diffusion.domain_hi)
        {
            return Err(Error::Config(format!(
                "need domain_lo < x1 < x2 < domain_hi, got ({}, {}, {}, {})",
                self.diffusion.domain_lo, self.rect_x1, self.rect_x2, self.diffusion.domain_hi
            )));
        }
        let n = 50;
        for i in 0..n {
            let x = self.rect_x1 + (self.rect_x2 - self.rect_x1) * i as f64 / (n - 1) as f64;
            let s = (self.diffusion.sigma)(x);
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::Config(format!(
                    "sigma({x}) = {s} is not strictly positive on the rectangle"
                )));
            }
        }
        for i in 0..n {
            let t = self.rect_t1 * i as f64 / (n - 1) as f64;
            for j in 0..n {
                let x =
                    self.rect_x1 + (self.rect_x2 - self.rect_x1) * j as f64 / (n - 1) as f64;
                let h = self.h_raw(t, x);
                if !(h < 0.0) {
                    return Err(Error::Config(format!(
                        "h(t, x) = {h} >= 0 at (t, x) = ({t}, {x}); the instance violates \
                         the negativity assumption on the rectangle"
                    )));
                }
            }
        }
        self.check_derivatives()?;
        let map = self.lamperti();
        let tol = 1e-10 * (self.rect_x2 - self.rect_x1);
        for i in 0..100 {
            let x = self.rect_x1 + (self.rect_x2 - self.rect_x1) * i as f64 / 99.0;
            let back = map.f_inv(map.f(x));
            if (back - x).abs() > tol {
                return Err(Error::Numerical {
                    stage: "lamperti round trip",
                    detail: format!("f_inv(f({x})) = {back}"),
                    residual: (back - x).abs(),
                });
            }
        }
        Ok(())
    }

    fn check_derivatives(&self) -> Result<()> {
        const STEP: f64 = 1e-5;
        const TOL: f64 = 1e-6;
        let (slo, shi) = self.gain.smooth_x;
        let xlo = self.rect_x1.max(slo + 1e-3);
        let xhi = self.rect_x2.min(shi - 1e-3);
        let tlo = 0.1 * self.rect_t1;
        let thi = 0.9 * self.rect_t1;
        let check = |name: &'static str, rel: f64| -> Result<()> {
            if rel > TOL {
                Err(Error::Numerical {
                    stage: "derivative self-consistency",
                    detail: format!("{name} disagrees with a central finite difference"),
                    residual: rel,
                })
            } else {
                Ok(())
            }
        };
        for i in 0..5 {
            let t = tlo + (thi - tlo) * i as f64 / 4.0;
            for j in 0..5 {
                if xhi <= xlo {
                    continue;
                }
                let x = xlo + (xhi - xlo) * j as f64 / 4.0;
                let d = &self.diffusion;
                let g = &self.gain;
                let r = &self.discount;
                check(
                    "mu_t",
                    num::central_diff_rel_err(&|s| (d.mu)(s, x), (d.mu_t)(t, x), t, STEP),
                )?;
                check(
                    "sigma_x",
                    num::central_diff_rel_err(&|z| (d.sigma)(z), (d.sigma_x)(x), x, STEP),
                )?;
                check(
                    "sigma_xx",
                    num::central_diff_rel_err(&|z| (d.sigma_x)(z), (d.sigma_xx)(x), x, STEP),
                )?;
                check(
                    "g_t",
                    num::central_diff_rel_err(&|s| (g.g)(s, x), (g.g_t)(t, x), t, STEP),
                )?;
                check(
                    "g_x",
                    num::central_diff_rel_err(&|z| (g.g)(t, z), (g.g_x)(t, x), x, STEP),
                )?;
                check(
                    "g_xx",
                    num::central_diff_rel_err(&|z| (g.g_x)(t, z), (g.g_xx)(t, x), x, STEP),
                )?;
                check(
                    "g_tx",
                    num::central_diff_rel_err(&|s| (g.g_x)(s, x), (g.g_tx)(t, x), t, STEP),
                )?;
                check(
                    "g_txx",
                    num::central_diff_rel_err(&|s| (g.g_xx)(s, x), (g.g_txx)(t, x), t, STEP),
                )?;
                check(
                    "g_tt",
                    num::central_diff_rel_err(&|s| (g.g_t)(s, x), (g.g_tt)(t, x), t, STEP),
                )?;
                check(
                    "r_t",
                    num::central_diff_rel_err(&|s| (r.r)(s, x), (r.r_t)(t, x), t, STEP),
                )?;
            }
        }
        Ok(())
    }
}

fn check_common(k: f64, sigma_hat: f64, t: f64, t1: f64, x1: f64, x2: f64) -> Result<()> {
    if !(k > 0.0 && sigma_hat > 0.0) {
        return Err(Error::Config(format!(
            "need K > 0 and sigma > 0, got K = {k}, sigma = {sigma_hat}"
        )));
    }
    if !(0.0 < t1 && t1 < t) {
        return Err(Error::Config(format!("need 0 < T1 < T, got T1 = {t1}, T = {t}")));
    }
    if !(0.0 < x1 && x1 < x2) {
        return Err(Error::Config(format!("need 0 < x1 < x2, got x1 = {x1}, x2 = {x2}")));
    }
    Ok(())
}

fn gbm_diffusion(r: f64, delta: f64, sigma_hat: f64) -> DiffusionSpec {
    DiffusionSpec {
        mu: ts(move |_, x| (r - delta) * x),
        mu_t: ts(|_, _| 0.0),
        sigma: st(move |x| sigma_hat * x),
        sigma_x: st(move |_| sigma_hat),
        sigma_xx: st(|_| 0.0),
        domain_lo: 0.0,
        domain_hi: f64::INFINITY,
    }
}

/// American put on a dividend-paying geometric Brownian motion.
///
/// The payoff is (K - x)^+; the derivative callables carry the smooth branch
/// (g_x = -1, higher derivatives 0) so that h extends negatively across the
/// kink at K, and finite-difference checks are restricted to x < K.
pub fn american_put_spec(
    k: f64,
    r: f64,
    delta: f64,
    sigma_hat: f64,
    horizon_t: f64,
    t1: f64,
    x1: f64,
    x2: f64,
) -> Result<ProblemSpec> {
    check_common(k, sigma_hat, horizon_t, t1, x1, x2)?;
    if r < 0.0 || delta < 0.0 {
        return Err(Error::Config(format!(
            "need r >= 0 and delta >= 0, got r = {r}, delta = {delta}"
        )));
    }
    let gain = GainSpec {
        g: ts(move |_, x| (k - x).max(0.0)),
        g_t: ts(|_, _| 0.0),
        g_x: ts(|_, _| -1.0),
        g_xx: ts(|_, _| 0.0),
        g_tx: ts(|_, _| 0.0),
        g_txx: ts(|_, _| 0.0),
        g_tt: ts(|_, _| 0.0),
        smooth_x: (0.0, k),
    };
    let terminal_boundary = if r >= delta { k } else { (r / delta) * k };
    let atom_mass = -0.5 * sigma_hat * sigma_hat * k * k;
    let density = if r < delta {
        Some(TerminalDensity {
            f: st(move |z| -(delta * z - r * k)),
            lo: (r / delta) * k,
            hi: k,
        })
    } else {
        None
    };
    let spec = ProblemSpec {
        diffusion: gbm_diffusion(r, delta, sigma_hat),
        gain,
        discount: DiscountSpec {
            r: ts(move |_, _| r),
            r_t: ts(|_, _| 0.0),
        },
        horizon_t,
        rect_t1: t1,
        rect_x1: x1,
        rect_x2: x2,
        orientation: Orientation::StopBelow,
        time_homogeneous: true,
        drift_time_homogeneous: true,
        terminal_boundary,
        terminal_measure: TerminalMeasure {
            atoms: vec![(k, atom_mass)],
            density,
        },
    };
    spec.validate()?;
    Ok(spec)
}

/// American call on a dividend-paying geometric Brownian motion; stop-above
/// orientation. A zero dividend rate is rejected (no finite boundary).
pub fn american_call_spec(
    k: f64,
    r: f64,
    delta: f64,
    sigma_hat: f64,
    horizon_t: f64,
    t1: f64,
    x1: f64,
    x2: f64,
) -> Result<ProblemSpec> {
    check_common(k, sigma_hat, horizon_t, t1, x1, x2)?;
    if delta <= 0.0 {
        return Err(Error::Config(
            "American call with delta = 0 has no finite exercise boundary".into(),
        ));
    }
    if r < 0.0 {
        return Err(Error::Config(format!("need r >= 0, got r = {r}")));
    }
    let gain = GainSpec {
        g: ts(move |_, x| (x - k).max(0.0)),
        g_t: ts(|_, _| 0.0),
        g_x: ts(|_, _| 1.0),
        g_xx: ts(|_, _| 0.0),
        g_tx: ts(|_, _| 0.0),
        g_txx: ts(|_, _| 0.0),
        g_tt: ts(|_, _| 0.0),
        smooth_x: (k, f64::INFINITY),
    };
    let terminal_boundary = if r <= delta { k } else { (r / delta) * k };
    let atom_mass = -0.5 * sigma_hat * sigma_hat * k * k;
    let density = if r > delta {
        Some(TerminalDensity {
            f: st(move |z| -(r * k - delta * z)),
            lo: k,
            hi: (r / delta) * k,
        })
    } else {
        None
    };
    let spec = ProblemSpec {
        diffusion: gbm_diffusion(r, delta, sigma_hat),
        gain,
        discount: DiscountSpec {
            r: ts(move |_, _| r),
            r_t: ts(|_, _| 0.0),
        },
        horizon_t,
        rect_t1: t1,
        rect_x1: x1,
        rect_x2: x2,
        orientation: Orientation::StopAbove,
        time_homogeneous: true,
        drift_time_homogeneous: true,
        terminal_boundary,
        terminal_measure: TerminalMeasure {
            atoms: vec![(k, atom_mass)],
            density,
        },
    };
    spec.validate()?;
    Ok(spec)
}

/// Time-inhomogeneous test instance: an American put whose discount rate grows
/// deterministically, r(t) = r0 (1 + t), with GBM coefficients frozen at the
/// initial rate (mu = (r0 - delta) x, sigma = sigma_hat x). On the smooth
/// payoff branch H = -r0 v, which is nonzero, so the time-inhomogeneity
/// correction terms get exercised while the boundary stays in the same
/// rectangle as the plain put's.
pub fn custom_time_inhomogeneous_spec(
    k: f64,
    r0: f64,
    delta: f64,
    sigma_hat: f64,
    horizon_t: f64,
    t1: f64,
    x1: f64,
    x2: f64,
) -> Result<ProblemSpec> {
    check_common(k, sigma_hat, horizon_t, t1, x1, x2)?;
    if !(r0 > 0.0 && delta >= 0.0) {
        return Err(Error::Config(format!(
            "need r0 > 0 and delta >= 0, got r0 = {r0}, delta = {delta}"
        )));
    }
    let gain = GainSpec {
        g: ts(move |_, x| (k - x).max(0.0)),
        g_t: ts(|_, _| 0.0),
        g_x: ts(|_, _| -1.0),
        g_xx: ts(|_, _| 0.0),
        g_tx: ts(|_, _| 0.0),
        g_txx: ts(|_, _| 0.0),
        g_tt: ts(|_, _| 0.0),
        smooth_x: (0.0, k),
    };
    let r_term = r0 * (1.0 + horizon_t);
    let terminal_boundary = if r_term >= delta { k } else { (r_term / delta) * k };
    let atom_mass = -0.5 * sigma_hat * sigma_hat * k * k;
    let density = if r_term < delta {
        Some(TerminalDensity {
            f: st(move |z| -(delta * z - r_term * k)),
            lo: (r_term / delta) * k,
            hi: k,
        })
    } else {
        None
    };
    let spec = ProblemSpec {
        diffusion: gbm_diffusion(r0, delta, sigma_hat),
        gain,
        discount: DiscountSpec {
            r: ts(move |t, _| r0 * (1.0 + t)),
            r_t: ts(move |_, _| r0),
        },
        horizon_t,
        rect_t1: t1,
        rect_x1: x1,
        rect_x2: x2,
        orientation: Orientation::StopBelow,
        time_homogeneous: false,
        drift_time_homogeneous: true,
        terminal_boundary,
        terminal_measure: TerminalMeasure {
            atoms: vec![(k, atom_mass)],
            density,
        },
    };
    // the stopping set at the horizon must reach the payoff sign change at K,
    // which requires h(T, .) < 0 up to K
    for i in 0..50 {
        let x = x1 + (k.min(x2) - x1) * i as f64 / 49.0;
        let h = spec.h_raw(horizon_t, x);
        if !(h < 0.0) {
            return Err(Error::Config(format!(
                "custom instance has h(T, {x}) = {h} >= 0 below the payoff zero at K"
            )));
        }
    }
    spec.validate()?;
    Ok(spec)
}
