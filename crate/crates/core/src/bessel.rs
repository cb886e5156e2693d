//! Exact-in-law simulation of a 3-dimensional Bessel process together with
//! its future infimum, via the Pitman coupling (rho, J) = (2*Wbar - W, Wbar),
//! plus the hitting times and multiplicative path functionals consumed by the
//! boundary-derivative estimators, and a statistical suite checking the
//! distributional facts the estimators rely on.

use crate::num::{integrate, mean_se, KahanSum};
use crate::rng::substream;
use crate::stats::{bessel3_cdf, bessel3_pdf, chi2_pvalue, ks_statistic, ks_threshold_1pct, normal_cdf};
use rand::Rng;
use rand_distr::StandardNormal;

/// Cap on the stochastic-exponential exponent; beyond this the path is
/// flagged as capped rather than allowed to overflow.
pub const EXPONENT_CAP: f64 = 700.0;

/// One Brownian path and its Pitman companion.
///
/// `wbar` is the running maximum of `w` (continuous-time maximum when
/// per-step bridge sampling is on), `rho = 2*wbar - w`. Under the coupling
/// `(rho, wbar)` has the joint law of a Bessel(3) process and its future
/// infimum, so no simulation beyond the window is ever needed.
#[derive(Debug, Clone)]
pub struct PitmanPath {
    pub dt: f64,
    pub w: Vec<f64>,
    pub wbar: Vec<f64>,
    pub rho: Vec<f64>,
}

impl PitmanPath {
    pub fn n_steps(&self) -> usize {
        self.w.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.n_steps() as f64 * self.dt
    }

    /// Build the companion arrays from a raw Brownian skeleton (discrete
    /// running maximum, no bridge correction). Used by self-convergence
    /// studies that must share one noise skeleton across resolutions.
    pub fn from_w(w: Vec<f64>, dt: f64) -> PitmanPath {
        let mut wbar = Vec::with_capacity(w.len());
        let mut m = 0.0f64;
        for &x in &w {
            m = m.max(x);
            wbar.push(m);
        }
        let rho = wbar.iter().zip(&w).map(|(&m, &x)| 2.0 * m - x).collect();
        PitmanPath { dt, w, wbar, rho }
    }

    /// Linear interpolation of rho at intra-step time `s` (clamped to the
    /// path horizon).
    pub fn rho_at(&self, s: f64) -> f64 {
        let pos = (s / self.dt).clamp(0.0, self.n_steps() as f64);
        let k = (pos as usize).min(self.n_steps() - 1);
        let frac = pos - k as f64;
        self.rho[k] + frac * (self.rho[k + 1] - self.rho[k])
    }
}

/// Sample a Pitman path of `n_steps` Gaussian increments of size `dt_path`.
///
/// With `bridge_max` on (the default in every consumer) the per-step maximum
/// is drawn from the exact Brownian-bridge law given the endpoints, so
/// `wbar` — and hence the rho marginals — are exact in law at the grid
/// times, not just up to an O(sqrt(dt)) discrete-maximum bias.
pub fn sample_pitman_path<R: Rng>(
    n_steps: usize,
    dt_path: f64,
    rng: &mut R,
    bridge_max: bool,
) -> PitmanPath {
    let mut w = Vec::with_capacity(n_steps + 1);
    let mut wbar = Vec::with_capacity(n_steps + 1);
    let mut rho = Vec::with_capacity(n_steps + 1);
    w.push(0.0);
    wbar.push(0.0);
    rho.push(0.0);
    let sqdt = dt_path.sqrt();
    let mut wk = 0.0f64;
    let mut mk = 0.0f64;
    for _ in 0..n_steps {
        let z: f64 = rng.sample(StandardNormal);
        let dw = sqdt * z;
        let w_next = wk + dw;
        let step_max = if bridge_max {
            // max of the bridge between (wk, w_next): inverse-CDF sample
            let u: f64 = 1.0 - rng.gen::<f64>(); // in (0, 1]
            0.5 * (wk + w_next + (dw * dw - 2.0 * dt_path * u.ln()).sqrt())
        } else {
            wk.max(w_next)
        };
        mk = mk.max(step_max);
        wk = w_next;
        w.push(wk);
        wbar.push(mk);
        rho.push(2.0 * mk - wk);
    }
    PitmanPath { dt: dt_path, w, wbar, rho }
}

/// The free boundary in the rescaled coordinate: c(t) = f(b(t)) on the solver
/// time grid, with its smoothed slope and Lipschitz constant. Served between
/// nodes by linear interpolation, clamped outside [t_nodes[0], t_nodes[n]].
#[derive(Debug, Clone)]
pub struct BoundaryCurveY {
    pub t_nodes: Vec<f64>,
    pub c: Vec<f64>,
    pub c_dot: Vec<f64>,
    pub lipschitz_const: f64,
}

impl BoundaryCurveY {
    /// A constant curve on [0, t1] (test and degenerate-case helper).
    pub fn constant(value: f64, t1: f64) -> BoundaryCurveY {
        BoundaryCurveY {
            t_nodes: vec![0.0, t1],
            c: vec![value, value],
            c_dot: vec![0.0, 0.0],
            lipschitz_const: 0.0,
        }
    }

    fn lerp(&self, values: &[f64], t: f64) -> f64 {
        let n = self.t_nodes.len();
        if t <= self.t_nodes[0] {
            return values[0];
        }
        if t >= self.t_nodes[n - 1] {
            return values[n - 1];
        }
        // uniform solver grid
        let dt = self.t_nodes[1] - self.t_nodes[0];
        let pos = (t - self.t_nodes[0]) / dt;
        let k = (pos as usize).min(n - 2);
        let frac = pos - k as f64;
        values[k] + frac * (values[k + 1] - values[k])
    }

    pub fn c_at(&self, t: f64) -> f64 {
        self.lerp(&self.c, t)
    }

    pub fn c_dot_at(&self, t: f64) -> f64 {
        self.lerp(&self.c_dot, t)
    }
}

/// First time rho_s + c(t+s) reaches y2, linearly interpolated at the
/// crossing and capped at T1 - t.
#[derive(Debug, Clone, Copy)]
pub struct Theta {
    pub value: f64,
    /// true when the barrier was hit strictly before the cap
    pub crossed: bool,
}

pub fn hitting_time_theta(
    path: &PitmanPath,
    curve: &BoundaryCurveY,
    t: f64,
    t1: f64,
    y2: f64,
) -> Theta {
    let cap = t1 - t;
    debug_assert!(cap > 0.0, "hitting_time_theta requires t < T1");
    let mut prev = path.rho[0] + curve.c_at(t);
    if prev >= y2 {
        return Theta { value: 0.0, crossed: true };
    }
    let n = path.n_steps();
    for k in 1..=n {
        let s = k as f64 * path.dt;
        let z = path.rho[k] + curve.c_at(t + s);
        if z >= y2 {
            let frac = if z > prev { (y2 - prev) / (z - prev) } else { 1.0 };
            let hit = (s - path.dt) + frac * path.dt;
            if hit >= cap {
                return Theta { value: cap, crossed: false };
            }
            return Theta { value: hit, crossed: true };
        }
        if s >= cap {
            return Theta { value: cap, crossed: false };
        }
        prev = z;
    }
    Theta { value: cap.min(path.horizon()), crossed: false }
}

/// First time h + rho_s - 2*J_s + c((t+s) /\ T1) reaches y2, uncapped.
///
/// Under the coupling h + rho - 2*J = h - W, so the scanned process is
/// h - W_s + c((t+s) /\ T1). Returns +infinity when the path window ends
/// without a crossing (a legitimate outcome for the pre-limit events).
pub fn hitting_time_theta_h(
    path: &PitmanPath,
    curve: &BoundaryCurveY,
    t: f64,
    t1: f64,
    y2: f64,
    h: f64,
) -> f64 {
    debug_assert!(h >= 0.0);
    let c_of = |s: f64| curve.c_at((t + s).min(t1));
    let mut prev = h - path.w[0] + c_of(0.0);
    if prev >= y2 {
        return 0.0;
    }
    for k in 1..=path.n_steps() {
        let s = k as f64 * path.dt;
        let z = h - path.w[k] + c_of(s);
        if z >= y2 {
            let frac = if z > prev { (y2 - prev) / (z - prev) } else { 1.0 };
            return (s - path.dt) + frac * path.dt;
        }
        prev = z;
    }
    f64::INFINITY
}

/// First times rho_s + phi(s) >= -h and >= +h (in that order), linearly
/// interpolated, +infinity sentinel when not reached in the window.
pub fn tau_pm_h<F: Fn(f64) -> f64>(path: &PitmanPath, phi: F, h: f64) -> (f64, f64) {
    debug_assert!(phi(0.0) < -h, "tau_pm_h requires phi(0) < -h");
    let mut tau_minus = f64::INFINITY;
    let mut tau_plus = f64::INFINITY;
    let mut prev = path.rho[0] + phi(0.0);
    for k in 1..=path.n_steps() {
        let s = k as f64 * path.dt;
        let z = path.rho[k] + phi(s);
        if tau_minus.is_infinite() && z >= -h {
            let frac = if z > prev { (-h - prev) / (z - prev) } else { 1.0 };
            tau_minus = (s - path.dt) + frac * path.dt;
        }
        if z >= h {
            let frac = if z > prev { (h - prev) / (z - prev) } else { 1.0 };
            tau_plus = (s - path.dt) + frac * path.dt;
            break;
        }
        prev = z;
    }
    (tau_minus, tau_plus)
}

/// Discretized stochastic exponential along the path,
/// exp(sum gamma*d rho - 1/2 sum gamma^2 dv), with left-point (Ito)
/// evaluation of the shifted drift gamma_{t,v}(xi) = gamma(t+v, c(t+v)+xi)
/// - c_dot(t+v) at each step.
#[derive(Debug, Clone, Copy)]
pub struct WeightL {
    pub value: f64,
    /// exponent hit the overflow cap; consumers must keep the capped
    /// fraction below 0.01% of samples
    pub capped: bool,
}

pub fn weight_l<G: Fn(f64, f64) -> f64>(
    path: &PitmanPath,
    curve: &BoundaryCurveY,
    gamma: G,
    t: f64,
    s_stop: f64,
) -> WeightL {
    let mut expo = KahanSum::new();
    let n_full = ((s_stop / path.dt) as usize).min(path.n_steps());
    for k in 0..n_full {
        let v = k as f64 * path.dt;
        let g = gamma(t + v, curve.c_at(t + v) + path.rho[k]) - curve.c_dot_at(t + v);
        expo.add(g * (path.rho[k + 1] - path.rho[k]) - 0.5 * g * g * path.dt);
    }
    // partial last step up to s_stop
    let v = n_full as f64 * path.dt;
    let rem = (s_stop - v).clamp(0.0, path.dt);
    if rem > 0.0 && n_full < path.n_steps() {
        let g = gamma(t + v, curve.c_at(t + v) + path.rho[n_full]) - curve.c_dot_at(t + v);
        let drho = (path.rho[n_full + 1] - path.rho[n_full]) * (rem / path.dt);
        expo.add(g * drho - 0.5 * g * g * rem);
    }
    let e = expo.value();
    if e > EXPONENT_CAP {
        WeightL { value: EXPONENT_CAP.exp(), capped: true }
    } else {
        WeightL { value: e.exp(), capped: false }
    }
}

/// exp of the plain left-point Ito integral of `big_gamma(s, rho_s)` against
/// d rho over [0, s_stop] — no quadratic-variation compensator. Used by the
/// exponential-moment bound checks.
pub fn exp_ito_integral<G: Fn(f64, f64) -> f64>(
    path: &PitmanPath,
    big_gamma: G,
    s_stop: f64,
) -> f64 {
    let mut expo = KahanSum::new();
    let n_full = ((s_stop / path.dt) as usize).min(path.n_steps());
    for k in 0..n_full {
        let s = k as f64 * path.dt;
        expo.add(big_gamma(s, path.rho[k]) * (path.rho[k + 1] - path.rho[k]));
    }
    let s = n_full as f64 * path.dt;
    let rem = (s_stop - s).clamp(0.0, path.dt);
    if rem > 0.0 && n_full < path.n_steps() {
        let drho = (path.rho[n_full + 1] - path.rho[n_full]) * (rem / path.dt);
        expo.add(big_gamma(s, path.rho[n_full]) * drho);
    }
    expo.value().min(EXPONENT_CAP).exp()
}

/// Discount factor exp(-int_0^{s_stop} R(t+v, c(t+v)+rho_v) dv) by
/// trapezoidal quadrature along the path.
pub fn discount_d<F: Fn(f64, f64) -> f64>(
    path: &PitmanPath,
    curve: &BoundaryCurveY,
    r_fn: F,
    t: f64,
    s_stop: f64,
) -> f64 {
    let rate = |v: f64, rho: f64| r_fn(t + v, curve.c_at(t + v) + rho);
    let mut acc = KahanSum::new();
    let n_full = ((s_stop / path.dt) as usize).min(path.n_steps());
    for k in 0..n_full {
        let v = k as f64 * path.dt;
        let a = rate(v, path.rho[k]);
        let b = rate(v + path.dt, path.rho[k + 1]);
        acc.add(0.5 * (a + b) * path.dt);
    }
    let v = n_full as f64 * path.dt;
    let rem = (s_stop - v).clamp(0.0, path.dt);
    if rem > 0.0 {
        let a = rate(v, path.rho_at(v));
        let b = rate(v + rem, path.rho_at(v + rem));
        acc.add(0.5 * (a + b) * rem);
    }
    (-acc.value()).exp()
}

/// Conditional law of the future infimum: given rho_t = y, J_t / rho_t is
/// Uniform(0,1) independently of y. Bins paths by rho_t quantiles, runs a
/// chi-squared uniformity test of wbar_t / rho_t in each bin and pools.
#[derive(Debug, Clone)]
pub struct ConditionalJReport {
    pub pooled_stat: f64,
    pub pooled_dof: usize,
    pub pooled_p: f64,
    /// per merged bin: (upper rho edge, sample count, p-value)
    pub bins: Vec<(f64, usize, f64)>,
}

const MIN_BIN_SAMPLES: usize = 500;
const RATIO_CELLS: usize = 10;

pub fn conditional_j_law_check(
    n_paths: usize,
    t: f64,
    n_bins: usize,
    seed: u64,
) -> ConditionalJReport {
    assert!(t > 0.0, "conditional check requires t > 0");
    // Bridge maxima make (w_t, wbar_t) exact in law at grid times, so a
    // coarse internal step suffices.
    let n_steps = 200;
    let dt = t / n_steps as f64;
    let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(n_paths);
    for p in 0..n_paths {
        let mut rng = substream(seed, p as u64);
        let path = sample_pitman_path(n_steps, dt, &mut rng, true);
        let k = path.n_steps();
        pairs.push((path.rho[k], path.wbar[k] / path.rho[k]));
    }
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("NaN rho"));

    // quantile bins, merged up to the minimum occupancy
    let per_bin = (n_paths / n_bins).max(MIN_BIN_SAMPLES);
    let mut bins = Vec::new();
    let mut pooled_stat = 0.0;
    let mut pooled_dof = 0usize;
    let mut start = 0usize;
    while start < n_paths {
        let mut end = (start + per_bin).min(n_paths);
        if n_paths - end < MIN_BIN_SAMPLES {
            end = n_paths;
        }
        let ratios: Vec<f64> = pairs[start..end].iter().map(|&(_, u)| u).collect();
        let (stat, dof, p) = crate::stats::chi2_uniform_test(&ratios, RATIO_CELLS);
        pooled_stat += stat;
        pooled_dof += dof;
        bins.push((pairs[end - 1].0, ratios.len(), p));
        start = end;
    }
    ConditionalJReport {
        pooled_stat,
        pooled_dof,
        pooled_p: chi2_pvalue(pooled_stat, pooled_dof),
        bins,
    }
}

/// One line of the distributional report.
#[derive(Debug, Clone)]
pub struct CheckLine {
    pub name: String,
    pub statistic: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl CheckLine {
    fn upper(name: &str, statistic: f64, threshold: f64) -> CheckLine {
        CheckLine {
            name: name.to_string(),
            statistic,
            threshold,
            pass: statistic.is_finite() && statistic < threshold,
        }
    }

    fn lower(name: &str, statistic: f64, threshold: f64) -> CheckLine {
        CheckLine {
            name: name.to_string(),
            statistic,
            threshold,
            pass: statistic.is_finite() && statistic > threshold,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BesselReport {
    pub n_paths: usize,
    pub dt_path: f64,
    pub seed: u64,
    pub lines: Vec<CheckLine>,
}

impl BesselReport {
    pub fn all_pass(&self) -> bool {
        self.lines.iter().all(|l| l.pass)
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "bessel distributional suite (schema 1)\nn_paths = {}, dt_path = {:.3e}, seed = {}\n\n",
            self.n_paths, self.dt_path, self.seed
        );
        for l in &self.lines {
            out.push_str(&format!(
                "{:<44} statistic = {:>12.6} threshold = {:>12.6} {}\n",
                l.name,
                l.statistic,
                l.threshold,
                if l.pass { "PASS" } else { "FAIL" }
            ));
        }
        out.push_str(&format!(
            "\noverall: {}\n",
            if self.all_pass() { "PASS" } else { "FAIL" }
        ));
        out
    }
}

/// Fitted constant of the first-passage window bound
/// P(tau in [t1, t1+width]) <= C sqrt(width)/sqrt(t1): the smallest C making
/// the bound hold over a sliding grid of windows of the given width.
fn passage_constant(taus: &[f64], width: f64) -> f64 {
    let n = taus.len() as f64;
    let mut c = 0.0f64;
    let mut t1 = 0.05;
    while t1 + width <= 0.9 {
        let hits = taus.iter().filter(|&&s| s >= t1 && s < t1 + width).count();
        c = c.max((hits as f64 / n) * t1.sqrt() / width.sqrt());
        t1 += width;
    }
    c
}

/// Run the full distributional suite: marginal KS tests, conditional
/// uniformity of the future infimum, inverse-moment identities, the
/// exponential-moment bound and the first-passage window bound.
pub fn bessel_report(n_paths: usize, dt_path: f64, seed: u64, bridge_max: bool) -> BesselReport {
    let horizon = 1.0f64;
    let n_steps = (horizon / dt_path).round() as usize;
    let k_quarter = (0.25 / dt_path).round() as usize;

    let mut rho_quarter = Vec::with_capacity(n_paths);
    let mut rho_one = Vec::with_capacity(n_paths);
    let mut neg_w_one = Vec::with_capacity(n_paths);
    let mut inv_rho = Vec::with_capacity(n_paths);
    let mut inv_rho2 = Vec::with_capacity(n_paths);
    // exponential-moment samples for (gamma bound K, window S)
    let em_cases = [(0.5, 1.0), (1.0, 0.5)];
    let mut em_samples: [Vec<f64>; 2] = [Vec::with_capacity(n_paths), Vec::with_capacity(n_paths)];
    // first-passage times for phi(s) = -0.5 - 0.2 s, h = 0.1
    let c_phi = 0.2;
    let h_fp = 0.1;
    let phi = move |s: f64| -0.5 - c_phi * s;
    let mut taus = Vec::with_capacity(n_paths);

    for p in 0..n_paths {
        let mut rng = substream(seed, p as u64);
        let path = sample_pitman_path(n_steps, dt_path, &mut rng, bridge_max);
        rho_quarter.push(path.rho[k_quarter]);
        let r1 = path.rho[n_steps];
        rho_one.push(r1);
        neg_w_one.push(-path.w[n_steps]);
        inv_rho.push(1.0 / r1);
        inv_rho2.push(1.0 / (r1 * r1));
        for (i, &(k, s)) in em_cases.iter().enumerate() {
            em_samples[i].push(exp_ito_integral(&path, |_, _| k, s));
        }
        let (tau_minus, _) = tau_pm_h(&path, phi, h_fp);
        taus.push(tau_minus);
    }

    let mut lines = Vec::new();
    let ks_thr = ks_threshold_1pct(n_paths);
    lines.push(CheckLine::upper(
        "KS rho marginal vs Bessel(3), t = 0.25",
        ks_statistic(&rho_quarter, |y| bessel3_cdf(0.25, y)),
        ks_thr,
    ));
    lines.push(CheckLine::upper(
        "KS rho marginal vs Bessel(3), t = 1",
        ks_statistic(&rho_one, |y| bessel3_cdf(1.0, y)),
        ks_thr,
    ));
    lines.push(CheckLine::upper(
        "KS -W marginal vs Normal(0, 1), t = 1",
        ks_statistic(&neg_w_one, normal_cdf),
        ks_thr,
    ));

    let cj = conditional_j_law_check(2 * n_paths, 1.0, 20, seed ^ 0x9e37_79b9);
    lines.push(CheckLine::lower(
        "future-infimum conditional uniformity p",
        cj.pooled_p,
        0.01,
    ));

    // inverse moments against direct quadrature of the marginal density
    for (p_exp, sample) in [(1, &inv_rho), (2, &inv_rho2)] {
        let oracle = integrate(
            &|y: f64| y.powi(-p_exp) * bessel3_pdf(1.0, y),
            1e-12,
            12.0,
            1e-12,
        );
        let (mean, se) = mean_se(sample);
        lines.push(CheckLine::upper(
            &format!("E[rho_1^-{p_exp}] |z| vs quadrature oracle"),
            (mean - oracle).abs() / se,
            3.0,
        ));
    }

    for (i, &(k, s)) in em_cases.iter().enumerate() {
        let bound = 2.0f64.sqrt() * (5.0 * k * k * s).exp();
        let (mean, se) = mean_se(&em_samples[i]);
        lines.push(CheckLine::upper(
            &format!("exp-moment bound, |Gamma| <= {k}, S = {s}"),
            mean - 3.0 * se,
            bound,
        ));
    }

    // the sqrt(width)/sqrt(t1) modulus is correct iff the fitted constant
    // stays put as the windows shrink
    let c_wide = passage_constant(&taus, 0.05);
    let c_narrow = passage_constant(&taus, 0.025);
    lines.push(CheckLine::upper(
        "first-passage constant growth under halving",
        if c_wide > 0.0 { c_narrow / c_wide } else { f64::INFINITY },
        1.5,
    ));

    BesselReport { n_paths, dt_path, seed, lines }
}
