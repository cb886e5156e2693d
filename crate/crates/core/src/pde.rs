//! Finite-difference solver for the obstacle problem behind the optimal
//! stopping value function: Crank-Nicolson in time, projected SOR for the
//! linear complementarity problem at each step, boundary extraction with
//! sub-grid interpolation, derivative fields, and the Monte Carlo
//! cross-checks of the solved surface.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{Orientation, ProblemSpec};
use crate::num::{self, KahanSum};
use crate::rng::substream;

/// Uniform space-time grid. The rectangle endpoints x1, x2 sit exactly on
/// nodes; the x span extends beyond the rectangle with a margin that is wider
/// on the continuation side, where the lateral Dirichlet condition v = g is
/// only approximate.
#[derive(Clone, Debug)]
pub struct Grid {
    pub t_nodes: Vec<f64>,
    pub x_nodes: Vec<f64>,
    pub dt: f64,
    pub dx: f64,
    /// index of x1 in x_nodes
    pub j1: usize,
    /// index of x2 in x_nodes
    pub j2: usize,
}

const MIN_NODES: usize = 64;
const STOP_SIDE_MARGIN: f64 = 0.15;
const CONT_SIDE_MARGIN: f64 = 0.8;

impl Grid {
    /// Build a grid with `n_t` time steps and `n_x` space steps across the
    /// rectangle [x1, x2].
    pub fn new(spec: &ProblemSpec, n_t: usize, n_x: usize) -> Result<Grid> {
        if n_t < MIN_NODES || n_x < MIN_NODES {
            return Err(Error::Config(format!(
                "grid must have at least {MIN_NODES} steps per axis, got {n_t} x {n_x}"
            )));
        }
        let (x1, x2) = (spec.rect_x1, spec.rect_x2);
        let dx = (x2 - x1) / n_x as f64;
        let (mlo_frac, mhi_frac) = match spec.orientation {
            Orientation::StopBelow => (STOP_SIDE_MARGIN, CONT_SIDE_MARGIN),
            Orientation::StopAbove => (CONT_SIDE_MARGIN, STOP_SIDE_MARGIN),
        };
        let mut m_lo = (mlo_frac * n_x as f64).ceil() as usize;
        // keep the grid inside the state space domain
        while m_lo > 0 && x1 - m_lo as f64 * dx <= spec.diffusion.domain_lo {
            m_lo -= 1;
        }
        if (m_lo as f64) < 0.1 * n_x as f64 {
            return Err(Error::Config(format!(
                "cannot fit a 10% lower margin between x1 = {x1} and the domain endpoint {}",
                spec.diffusion.domain_lo
            )));
        }
        let mut m_hi = (mhi_frac * n_x as f64).ceil() as usize;
        while m_hi > 0 && x2 + m_hi as f64 * dx >= spec.diffusion.domain_hi {
            m_hi -= 1;
        }
        if (m_hi as f64) < 0.1 * n_x as f64 {
            return Err(Error::Config(format!(
                "cannot fit a 10% upper margin between x2 = {x2} and the domain endpoint {}",
                spec.diffusion.domain_hi
            )));
        }
        let x_lo = x1 - m_lo as f64 * dx;
        let n_total = m_lo + n_x + m_hi;
        let x_nodes: Vec<f64> = (0..=n_total).map(|j| x_lo + j as f64 * dx).collect();
        let dt = spec.horizon_t / n_t as f64;
        let t_nodes: Vec<f64> = (0..=n_t).map(|i| i as f64 * dt).collect();
        Ok(Grid {
            t_nodes,
            x_nodes,
            dt,
            dx,
            j1: m_lo,
            j2: m_lo + n_x,
        })
    }

    pub fn n_t(&self) -> usize {
        self.t_nodes.len() - 1
    }

    pub fn n_x(&self) -> usize {
        self.x_nodes.len() - 1
    }

    fn t_index_below(&self, t: f64) -> usize {
        ((t / self.dt).floor() as isize).clamp(0, self.n_t() as isize - 1) as usize
    }

    fn x_index_below(&self, x: f64) -> usize {
        (((x - self.x_nodes[0]) / self.dx).floor() as isize).clamp(0, self.n_x() as isize - 1)
            as usize
    }
}

/// Solved obstacle-problem surface with extracted boundary and derivative
/// fields. Grids are indexed `[time][space]`; derivative fields are zero on
/// the stopping side of the boundary.
pub struct ValueSurface {
    pub grid: Grid,
    pub v: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub b_dot_fd: Vec<f64>,
    pub u_dot: Vec<Vec<f64>>,
    pub u_x: Vec<Vec<f64>>,
    pub u_xx: Vec<Vec<f64>>,
    pub u_dot_x: Vec<Vec<f64>>,
    /// first continuation node index per slice (put orientation: at or above b)
    pub b_idx: Vec<usize>,
    /// max |g| over the rectangle; reference magnitude for tolerances
    pub scale: f64,
    pub orientation: Orientation,
}

const PSOR_MAX_SWEEPS: usize = 100_000;
const PSOR_TOL_FACTOR: f64 = 1e-9;
/// Backward steps next to the horizon solved fully implicitly: Rannacher
/// startup damping of the Crank-Nicolson sawtooth mode seeded by payoff
/// kinks in the terminal condition.
const RANNACHER_STEPS: usize = 4;
pub const BOUNDARY_EPS_FACTOR: f64 = 1e-8;

struct StepCoeffs {
    lo: Vec<f64>,
    diag: Vec<f64>,
    hi: Vec<f64>,
}

fn coeffs(spec: &ProblemSpec, grid: &Grid, t: f64) -> StepCoeffs {
    let n = grid.x_nodes.len();
    let dx = grid.dx;
    let mut lo = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut hi = vec![0.0; n];
    for j in 1..n - 1 {
        let x = grid.x_nodes[j];
        let s = (spec.diffusion.sigma)(x);
        let a = 0.5 * s * s / (dx * dx);
        let m = (spec.diffusion.mu)(t, x) / (2.0 * dx);
        lo[j] = a - m;
        diag[j] = -2.0 * a - (spec.discount.r)(t, x);
        hi[j] = a + m;
    }
    StepCoeffs { lo, diag, hi }
}

fn psor_sweep_count(
    rhs: &[f64],
    obstacle: &[f64],
    c: &StepCoeffs,
    half_dt: f64,
    omega: f64,
    tol: f64,
    v: &mut [f64],
    max_sweeps: usize,
) -> (usize, f64) {
    let n = v.len();
    let mut worst = f64::INFINITY;
    for sweep in 1..=max_sweeps {
        worst = 0.0;
        for j in 1..n - 1 {
            let m_diag = 1.0 - half_dt * c.diag[j];
            let gs = (rhs[j] + half_dt * (c.lo[j] * v[j - 1] + c.hi[j] * v[j + 1])) / m_diag;
            let cand = (v[j] + omega * (gs - v[j])).max(obstacle[j]);
            let delta = (cand - v[j]).abs();
            if delta > worst {
                worst = delta;
            }
            v[j] = cand;
        }
        if worst <= tol {
            return (sweep, worst);
        }
    }
    (max_sweeps + 1, worst)
}

/// Solve the obstacle problem on `grid` by backward Crank-Nicolson with
/// projected SOR. Returns a surface with `v` and `u` filled; boundary and
/// derivative fields are populated by `extract_boundary` / `fd_derivatives`
/// (or use `solve_full`).
pub fn solve_obstacle(spec: &ProblemSpec, grid: &Grid) -> Result<ValueSurface> {
    let n_t = grid.n_t();
    let n = grid.x_nodes.len();
    let mut scale = 0.0f64;
    for i in 0..=n_t {
        let t = grid.t_nodes[i];
        if t > spec.rect_t1 && i != n_t {
            continue;
        }
        for j in grid.j1..=grid.j2 {
            scale = scale.max((spec.gain.g)(t, grid.x_nodes[j]).abs());
        }
    }
    let scale = scale.max(f64::MIN_POSITIVE);
    let tol = PSOR_TOL_FACTOR * scale;

    let mut v = vec![vec![0.0; n]; n_t + 1];
    for j in 0..n {
        v[n_t][j] = (spec.gain.g)(spec.horizon_t, grid.x_nodes[j]);
    }

    let half_dt = 0.5 * grid.dt;
    let mut omega = 1.5;
    let mut tuned = false;
    let mut c_next = coeffs(spec, grid, grid.t_nodes[n_t]);
    for i in (0..n_t).rev() {
        let t = grid.t_nodes[i];
        let c_here = coeffs(spec, grid, t);
        let implicit = i + RANNACHER_STEPS >= n_t;
        let theta_dt = if implicit { grid.dt } else { half_dt };
        let prev = &v[i + 1];
        let mut rhs = vec![0.0; n];
        for j in 1..n - 1 {
            rhs[j] = if implicit {
                prev[j]
            } else {
                prev[j]
                    + half_dt
                        * (c_next.lo[j] * prev[j - 1]
                            + c_next.diag[j] * prev[j]
                            + c_next.hi[j] * prev[j + 1])
            };
        }
        let obstacle: Vec<f64> = grid
            .x_nodes
            .iter()
            .map(|&x| (spec.gain.g)(t, x))
            .collect();
        let mut next = prev.clone();
        next[0] = obstacle[0];
        next[n - 1] = obstacle[n - 1];
        for j in 1..n - 1 {
            if next[j] < obstacle[j] {
                next[j] = obstacle[j];
            }
        }
        if !tuned {
            // pick the relaxation factor that converges fastest on the first
            // (hardest, kinked) time step
            let mut best = (usize::MAX, 1.5);
            for k in 0..9 {
                let cand = 1.0 + 0.1 * (k + 1) as f64;
                let mut trial = next.clone();
                let (sweeps, _) = psor_sweep_count(
                    &rhs, &obstacle, &c_here, theta_dt, cand, tol, &mut trial, 2_000,
                );
                if sweeps < best.0 {
                    best = (sweeps, cand);
                }
            }
            omega = best.1;
            tuned = true;
        }
        let (sweeps, worst) = psor_sweep_count(
            &rhs,
            &obstacle,
            &c_here,
            theta_dt,
            omega,
            tol,
            &mut next,
            PSOR_MAX_SWEEPS,
        );
        if sweeps > PSOR_MAX_SWEEPS {
            return Err(Error::Numerical {
                stage: "psor",
                detail: format!("no convergence at t = {t} after {PSOR_MAX_SWEEPS} sweeps"),
                residual: worst,
            });
        }
        v[i] = next;
        c_next = c_here;
    }

    let mut u = vec![vec![0.0; n]; n_t + 1];
    for i in 0..=n_t {
        let t = grid.t_nodes[i];
        for j in 0..n {
            u[i][j] = v[i][j] - (spec.gain.g)(t, grid.x_nodes[j]);
        }
    }
    Ok(ValueSurface {
        grid: grid.clone(),
        v,
        u,
        b: Vec::new(),
        b_dot_fd: Vec::new(),
        u_dot: Vec::new(),
        u_x: Vec::new(),
        u_xx: Vec::new(),
        u_dot_x: Vec::new(),
        b_idx: Vec::new(),
        scale,
        orientation: spec.orientation,
    })
}

/// Extract the free boundary per time slice as the sub-grid location where u
/// first exceeds `eps` scanning from the stopping side; fills `b`, `b_idx`
/// and the smoothed finite-difference slope `b_dot_fd`.
pub fn extract_boundary(surface: &mut ValueSurface, spec: &ProblemSpec, eps: f64) -> Result<()> {
    let grid = &surface.grid;
    let n_t = grid.n_t();
    let n = grid.x_nodes.len();
    let mut b = vec![0.0; n_t + 1];
    let mut b_idx = vec![0usize; n_t + 1];
    for i in 0..=n_t {
        let t = grid.t_nodes[i];
        if i == n_t {
            // u(T, .) = 0 identically; the terminal boundary value is known
            // analytically per instance
            b[i] = spec.terminal_boundary;
            b_idx[i] = match surface.orientation {
                Orientation::StopBelow => grid.x_index_below(b[i]) + 1,
                Orientation::StopAbove => grid.x_index_below(b[i]),
            };
            continue;
        }
        // u vanishes quadratically at the contact point (u = u_x = 0 there),
        // so sqrt(u) is locally linear and its root gives a sub-grid
        // boundary location; linear interpolation of the eps level would
        // collapse onto grid nodes and staircase the curve.
        let slice = &surface.u[i];
        let sq = |u: f64| u.max(0.0).sqrt();
        let found = match surface.orientation {
            Orientation::StopBelow => (1..n).find(|&j| slice[j] > eps).map(|j| {
                let (r1, r2) = (sq(slice[j]), sq(*slice.get(j + 1).unwrap_or(&slice[j])));
                let bt = if r2 > r1 {
                    grid.x_nodes[j] - r1 * grid.dx / (r2 - r1)
                } else {
                    grid.x_nodes[j]
                };
                // The extrapolated root may fall up to one cell inside the
                // discrete contact set (the projected boundary lags), so the
                // clamp allows one extra node below j.
                (j, bt.clamp(grid.x_nodes[j] - 2.0 * grid.dx, grid.x_nodes[j]))
            }),
            Orientation::StopAbove => (0..n - 1).rev().find(|&j| slice[j] > eps).map(|j| {
                let (r1, r2) = (sq(slice[j]), sq(slice[j.saturating_sub(1)]));
                let bt = if r2 > r1 && j > 0 {
                    grid.x_nodes[j] + r1 * grid.dx / (r2 - r1)
                } else {
                    grid.x_nodes[j]
                };
                (j, bt.clamp(grid.x_nodes[j], grid.x_nodes[j] + 2.0 * grid.dx))
            }),
        };
        let (idx, bt) = match found {
            Some(pair) => pair,
            None => {
                return Err(Error::BoundaryEscape {
                    t,
                    detail: "no contact set in the slice (u exceeds eps everywhere or nowhere)"
                        .into(),
                })
            }
        };
        // on the verification window the boundary must stay inside (x1, x2)
        if t <= spec.rect_t1 + 1e-12
            && (bt <= spec.rect_x1 || bt >= spec.rect_x2)
        {
            return Err(Error::BoundaryEscape {
                t,
                detail: format!(
                    "extracted boundary {bt} outside the rectangle ({}, {})",
                    spec.rect_x1, spec.rect_x2
                ),
            });
        }
        b[i] = bt;
        b_idx[i] = idx;
    }
    surface.b_dot_fd = savitzky_golay_slope(&b, grid.dt);
    surface.b = b;
    surface.b_idx = b_idx;
    Ok(())
}

/// Slope of a uniformly sampled series by a quadratic Savitzky-Golay fit.
/// The window scales with the series length (about n/20 points, odd, between
/// 5 and 31) so that sub-grid extraction noise in the input averages out;
/// the fit is exact on quadratics for any window. Off-center fits at the
/// ends.
pub fn savitzky_golay_slope(y: &[f64], dt: f64) -> Vec<f64> {
    let w = ((y.len() / 20) | 1).clamp(5, 31);
    savitzky_golay_slope_window(y, dt, w)
}

/// Same as [`savitzky_golay_slope`] with an explicit odd window size.
pub fn savitzky_golay_slope_window(y: &[f64], dt: f64, window: usize) -> Vec<f64> {
    let n = y.len();
    let w = (window | 1).max(5);
    if n < w {
        let mut out = vec![0.0; n];
        for i in 0..n {
            let (a, b) = if i == 0 {
                (i, i + 1)
            } else if i == n - 1 {
                (i - 1, i)
            } else {
                (i - 1, i + 1)
            };
            out[i] = (y[b] - y[a]) / ((b - a) as f64 * dt);
        }
        return out;
    }
    let mut out = vec![0.0; n];
    let half = w / 2;
    for i in 0..n {
        // window start so that the window stays inside the series
        let start = i.saturating_sub(half).min(n - w);
        let p = (i - start) as f64;
        // least-squares quadratic fit on offsets 0..w, derivative at p
        let mut s = [0.0f64; 5];
        let mut m = [0.0f64; 3];
        for k in 0..w {
            let z = k as f64;
            s[0] += 1.0;
            s[1] += z;
            s[2] += z * z;
            s[3] += z * z * z;
            s[4] += z * z * z * z;
            m[0] += y[start + k];
            m[1] += z * y[start + k];
            m[2] += z * z * y[start + k];
        }
        // solve the 3x3 normal equations for the fit c0 + c1 z + c2 z^2 by
        // Cramer's rule
        let a = [[s[0], s[1], s[2]], [s[1], s[2], s[3]], [s[2], s[3], s[4]]];
        let det = |m: &[[f64; 3]; 3]| {
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        };
        let d = det(&a);
        let replace_col = |col: usize| {
            let mut mm = a;
            for row in 0..3 {
                mm[row][col] = m[row];
            }
            det(&mm) / d
        };
        let c1 = replace_col(1);
        let c2 = replace_col(2);
        out[i] = (c1 + 2.0 * c2 * p) / dt;
    }
    out
}

/// Fill the derivative fields u_dot, u_x, u_xx, u_dot_x on the continuation
/// side of the boundary; one-sided stencils adjacent to the boundary and at
/// the time endpoints. Stopping-side entries are zero.
pub fn fd_derivatives(surface: &mut ValueSurface) {
    let grid = surface.grid.clone();
    let n_t = grid.n_t();
    let n = grid.x_nodes.len();
    let (dt, dx) = (grid.dt, grid.dx);
    let mut u_dot = vec![vec![0.0; n]; n_t + 1];
    let mut u_x = vec![vec![0.0; n]; n_t + 1];
    let mut u_xx = vec![vec![0.0; n]; n_t + 1];
    let mut u_dot_x = vec![vec![0.0; n]; n_t + 1];
    let below = surface.orientation == Orientation::StopBelow;

    let cont = |i: usize, j: usize| -> bool {
        if below {
            j >= surface.b_idx[i]
        } else {
            j <= surface.b_idx[i]
        }
    };

    for i in 0..=n_t {
        let u = &surface.u;
        for j in 0..n {
            if !cont(i, j) {
                continue;
            }
            // spatial stencils, one-sided toward the continuation region at
            // the boundary-adjacent node and grid edges
            let (ux, uxx) = if below {
                if j + 2 < n && (j == surface.b_idx[i] || j == 0) {
                    let ux = (-3.0 * u[i][j] + 4.0 * u[i][j + 1] - u[i][j + 2]) / (2.0 * dx);
                    let uxx = if j + 3 < n {
                        (2.0 * u[i][j] - 5.0 * u[i][j + 1] + 4.0 * u[i][j + 2] - u[i][j + 3])
                            / (dx * dx)
                    } else {
                        0.0
                    };
                    (ux, uxx)
                } else if j >= 1 && j + 1 < n {
                    (
                        (u[i][j + 1] - u[i][j - 1]) / (2.0 * dx),
                        (u[i][j + 1] - 2.0 * u[i][j] + u[i][j - 1]) / (dx * dx),
                    )
                } else if j + 1 == n && j >= 2 {
                    (
                        (3.0 * u[i][j] - 4.0 * u[i][j - 1] + u[i][j - 2]) / (2.0 * dx),
                        0.0,
                    )
                } else {
                    (0.0, 0.0)
                }
            } else if j >= 2 && (j == surface.b_idx[i] || j == n - 1) {
                let ux = (3.0 * u[i][j] - 4.0 * u[i][j - 1] + u[i][j - 2]) / (2.0 * dx);
                let uxx = if j >= 3 {
                    (2.0 * u[i][j] - 5.0 * u[i][j - 1] + 4.0 * u[i][j - 2] - u[i][j - 3])
                        / (dx * dx)
                } else {
                    0.0
                };
                (ux, uxx)
            } else if j >= 1 && j + 1 < n {
                (
                    (u[i][j + 1] - u[i][j - 1]) / (2.0 * dx),
                    (u[i][j + 1] - 2.0 * u[i][j] + u[i][j - 1]) / (dx * dx),
                )
            } else if j + 2 < n {
                (
                    (-3.0 * u[i][j] + 4.0 * u[i][j + 1] - u[i][j + 2]) / (2.0 * dx),
                    0.0,
                )
            } else {
                (0.0, 0.0)
            };
            u_x[i][j] = ux;
            u_xx[i][j] = uxx;

            // time stencil: central where the node stays in the continuation
            // region on both neighbouring slices, else one-sided toward the
            // side where it does
            let ud = if i >= 1 && i + 1 <= n_t && cont(i - 1, j) && cont(i + 1, j) {
                (u[i + 1][j] - u[i - 1][j]) / (2.0 * dt)
            } else if i + 2 <= n_t && cont(i + 1, j) && cont(i + 2, j) {
                (-3.0 * u[i][j] + 4.0 * u[i + 1][j] - u[i + 2][j]) / (2.0 * dt)
            } else if i >= 2 && cont(i - 1, j) && cont(i - 2, j) {
                (3.0 * u[i][j] - 4.0 * u[i - 1][j] + u[i - 2][j]) / (2.0 * dt)
            } else if i + 1 <= n_t && cont(i + 1, j) {
                (u[i + 1][j] - u[i][j]) / dt
            } else if i >= 1 && cont(i - 1, j) {
                (u[i][j] - u[i - 1][j]) / dt
            } else {
                0.0
            };
            u_dot[i][j] = ud;
        }
    }
    for i in 0..=n_t {
        for j in 0..n {
            if !cont(i, j) {
                continue;
            }
            let d = &u_dot;
            u_dot_x[i][j] = if below {
                if j == surface.b_idx[i] && j + 2 < n {
                    (-3.0 * d[i][j] + 4.0 * d[i][j + 1] - d[i][j + 2]) / (2.0 * dx)
                } else if j >= 1 && j + 1 < n {
                    (d[i][j + 1] - d[i][j - 1]) / (2.0 * dx)
                } else {
                    0.0
                }
            } else if j == surface.b_idx[i] && j >= 2 {
                (3.0 * d[i][j] - 4.0 * d[i][j - 1] + d[i][j - 2]) / (2.0 * dx)
            } else if j >= 1 && j + 1 < n {
                (d[i][j + 1] - d[i][j - 1]) / (2.0 * dx)
            } else {
                0.0
            };
        }
    }
    // The projected contact set changes by whole nodes between steps, which
    // seeds a (-1)^i time-alternating component that Crank-Nicolson leaves
    // undamped. Central time stencils cancel it in u_dot and u_dot_x, but
    // u_xx sees it at full strength; a 1-2-1 average over adjacent slices
    // removes it at O(dt^2) bias.
    let mut u_xx_f = u_xx.clone();
    for i in 1..n_t {
        for j in 0..n {
            if cont(i, j) && cont(i - 1, j) && cont(i + 1, j) {
                u_xx_f[i][j] = 0.25 * (u_xx[i - 1][j] + 2.0 * u_xx[i][j] + u_xx[i + 1][j]);
            }
        }
    }
    surface.u_dot = u_dot;
    surface.u_x = u_x;
    surface.u_xx = u_xx_f;
    surface.u_dot_x = u_dot_x;
}

/// Solve, extract the boundary at the default eps, and fill derivatives.
pub fn solve_full(spec: &ProblemSpec, n_t: usize, n_x: usize) -> Result<ValueSurface> {
    let grid = Grid::new(spec, n_t, n_x)?;
    let mut surface = solve_obstacle(spec, &grid)?;
    let eps = BOUNDARY_EPS_FACTOR * surface.scale;
    extract_boundary(&mut surface, spec, eps)?;
    fd_derivatives(&mut surface);
    Ok(surface)
}

impl ValueSurface {
    fn bilinear(&self, field: &[Vec<f64>], t: f64, x: f64) -> f64 {
        let grid = &self.grid;
        let i = grid.t_index_below(t);
        let j = grid.x_index_below(x);
        let wt = ((t - grid.t_nodes[i]) / grid.dt).clamp(0.0, 1.0);
        let wx = ((x - grid.x_nodes[j]) / grid.dx).clamp(0.0, 1.0);
        field[i][j] * (1.0 - wt) * (1.0 - wx)
            + field[i][j + 1] * (1.0 - wt) * wx
            + field[i + 1][j] * wt * (1.0 - wx)
            + field[i + 1][j + 1] * wt * wx
    }

    pub fn v_at(&self, t: f64, x: f64) -> f64 {
        self.bilinear(&self.v, t, x)
    }

    pub fn u_at(&self, t: f64, x: f64) -> f64 {
        self.bilinear(&self.u, t, x)
    }

    pub fn u_dot_at(&self, t: f64, x: f64) -> f64 {
        self.bilinear(&self.u_dot, t, x)
    }

    pub fn u_x_at(&self, t: f64, x: f64) -> f64 {
        self.bilinear(&self.u_x, t, x)
    }

    /// Boundary value at time t by linear interpolation of the extracted curve.
    pub fn b_at(&self, t: f64) -> f64 {
        num::lerp_uniform(&self.b, 0.0, self.grid.dt, t)
    }

    /// Smoothed boundary slope at time t.
    pub fn b_dot_at(&self, t: f64) -> f64 {
        num::lerp_uniform(&self.b_dot_fd, 0.0, self.grid.dt, t)
    }

    /// Obstacle constraint residual: most negative value of u over the grid.
    pub fn min_u(&self) -> f64 {
        self.u
            .iter()
            .flat_map(|row| row.iter().copied())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Max residual |u_dot + L u - r u + h| over continuation nodes of the
/// rectangle at distance at least `margin_nodes` from the boundary, t <= T1.
/// Restricted to the smooth branch of the payoff (the equation in u only
/// holds where g is twice differentiable).
pub fn interior_pde_residual(
    spec: &ProblemSpec,
    surface: &ValueSurface,
    margin_nodes: usize,
) -> f64 {
    let grid = &surface.grid;
    let (slo, shi) = spec.gain.smooth_x;
    let kink_margin = 2.0 * grid.dx;
    let mut worst = 0.0f64;
    for i in 1..grid.n_t() {
        let t = grid.t_nodes[i];
        if t > spec.rect_t1 {
            break;
        }
        for j in grid.j1 + 1..grid.j2 {
            let in_band = match surface.orientation {
                Orientation::StopBelow => j >= surface.b_idx[i] + margin_nodes,
                Orientation::StopAbove => j + margin_nodes <= surface.b_idx[i],
            };
            if !in_band {
                continue;
            }
            if grid.x_nodes[j] < slo + kink_margin || grid.x_nodes[j] > shi - kink_margin {
                continue;
            }
            let x = grid.x_nodes[j];
            let s = (spec.diffusion.sigma)(x);
            let res = surface.u_dot[i][j]
                + 0.5 * s * s * surface.u_xx[i][j]
                + (spec.diffusion.mu)(t, x) * surface.u_x[i][j]
                - (spec.discount.r)(t, x) * surface.u[i][j]
                + spec.h_raw(t, x);
            worst = worst.max(res.abs());
        }
    }
    worst
}

/// One-sided curvature of u at the boundary of slice `i`, extrapolated to the
/// boundary point itself: fits u ~ (c/2) d^2 at the first two continuation
/// nodes past the boundary-adjacent one and removes the leading cubic error
/// by linear Richardson extrapolation in the distance d.
pub fn curvature_at_boundary(surface: &ValueSurface, i: usize) -> f64 {
    let grid = &surface.grid;
    let j = surface.b_idx[i];
    // least-squares slope of sqrt(u) against x over the first continuation
    // nodes: u ~ (c/2)(x - b)^2 makes sqrt(u) linear with slope sqrt(c/2),
    // independent of the exact sub-grid boundary location
    let mut xs = [0.0f64; 4];
    let mut ss = [0.0f64; 4];
    for k in 0..4 {
        let jj = match surface.orientation {
            Orientation::StopBelow => j + 1 + k,
            Orientation::StopAbove => j - 1 - k,
        };
        xs[k] = grid.x_nodes[jj];
        ss[k] = surface.u[i][jj].max(0.0).sqrt();
    }
    let mx = xs.iter().sum::<f64>() / 4.0;
    let ms = ss.iter().sum::<f64>() / 4.0;
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..4 {
        num += (xs[k] - mx) * (ss[k] - ms);
        den += (xs[k] - mx) * (xs[k] - mx);
    }
    let slope = num / den;
    2.0 * slope * slope
}

/// Result of the Monte Carlo cross-check of the u_dot representation.
#[derive(Debug, Clone, Copy)]
pub struct McUdotCheck {
    pub mc_value: f64,
    pub std_err: f64,
    pub fd_value: f64,
    pub escape_fraction: f64,
}

/// Monte Carlo estimate of the stochastic representation of u_dot at an
/// interior point (t, x) of the continuation region, against the solver's
/// finite-difference value.
pub fn mc_udot_check(
    spec: &ProblemSpec,
    surface: &ValueSurface,
    t: f64,
    x: f64,
    n_paths: usize,
    seed: u64,
) -> Result<McUdotCheck> {
    if spec.orientation != Orientation::StopBelow {
        return Err(Error::Config(
            "mc_udot_check supports stop-below orientation only".into(),
        ));
    }
    let grid = &surface.grid;
    let t1 = spec.rect_t1;
    if !(t >= 0.0 && t <= t1 && x > surface.b_at(t) && x < spec.rect_x2) {
        return Err(Error::Domain(format!(
            "({t}, {x}) is not interior to the continuation region of the rectangle"
        )));
    }
    let fd_value = surface.u_dot_at(t, x);
    if (t1 - t) < 1e-14 {
        return Ok(McUdotCheck {
            mc_value: fd_value,
            std_err: 0.0,
            fd_value,
            escape_fraction: 0.0,
        });
    }
    let sigma_max = grid
        .x_nodes
        .iter()
        .map(|&z| (spec.diffusion.sigma)(z))
        .fold(0.0f64, f64::max);
    let dt_mc = (grid.dt.min((grid.dx / sigma_max) * (grid.dx / sigma_max))) / 4.0;
    let x_lo = grid.x_nodes[0];
    let x_hi = *grid.x_nodes.last().unwrap();
    let x2 = spec.rect_x2;
    let homogeneous = spec.time_homogeneous;

    let mut values = vec![0.0f64; n_paths];
    let mut escapes = 0usize;
    for p in 0..n_paths {
        let mut attempt = 0usize;
        let val = loop {
            let mut rng = substream(seed, (p + attempt * n_paths) as u64);
            let mut s = t;
            let mut xx = x;
            let mut disc = 1.0f64;
            let mut run = KahanSum::new();
            let mut escaped = false;
            let out = loop {
                if s >= t1 - 1e-15 {
                    break disc * surface.u_dot_at(t1, xx.clamp(x_lo, x_hi));
                }
                let step = dt_mc.min(t1 - s);
                let z: f64 = rng.sample(StandardNormal);
                let mu = (spec.diffusion.mu)(s, xx);
                let sg = (spec.diffusion.sigma)(xx);
                if !homogeneous {
                    let uval = surface.u_at(s, xx.clamp(x_lo, x_hi));
                    let uxval = surface.u_x_at(s, xx.clamp(x_lo, x_hi));
                    run.add(disc * spec.big_h_raw(s, xx, uval, uxval) * step);
                }
                let x_new = xx + mu * step + sg * step.sqrt() * z;
                let s_new = s + step;
                let b_new = surface.b_at(s_new.min(t1));
                if x_new <= b_new {
                    // linear interpolation of the crossing time, stopped value 0
                    break 0.0;
                }
                if x_new >= x2 {
                    let w = if x_new > xx { (x2 - xx) / (x_new - xx) } else { 1.0 };
                    let s_hit = s + w.clamp(0.0, 1.0) * step;
                    disc *= (-(spec.discount.r)(s, xx) * w * step).exp();
                    break disc * surface.u_dot_at(s_hit.min(t1), x2);
                }
                if x_new <= x_lo || x_new >= x_hi {
                    escaped = true;
                    break 0.0;
                }
                disc *= (-(spec.discount.r)(s, xx) * step).exp();
                s = s_new;
                xx = x_new;
            };
            if escaped {
                attempt += 1;
                escapes += 1;
                if attempt > 16 {
                    break out + run.value();
                }
                continue;
            }
            break out + run.value();
        };
        values[p] = val;
    }
    let (mean, se) = num::mean_se(&values);
    Ok(McUdotCheck {
        mc_value: mean,
        std_err: se,
        fd_value,
        escape_fraction: escapes as f64 / n_paths as f64,
    })
}

/// Empirical constant of the bound |u_dot| <= c (x - b(t)) (1 + (T1-t)^{-1/2})
/// over continuation nodes of the rectangle. Nodes within 2% of the
/// rectangle width from the boundary are skipped: the moving contact line
/// carries a noise layer of fixed physical width whose 1/dist amplification
/// would otherwise dominate the constant and spoil its grid stability.
pub fn dotv_bound_check(surface: &ValueSurface, t1: f64) -> f64 {
    let grid = &surface.grid;
    let margin = 0.02 * (grid.x_nodes[grid.j2] - grid.x_nodes[grid.j1]);
    let mut c = 0.0f64;
    for i in 0..=grid.n_t() {
        let t = grid.t_nodes[i];
        if t >= t1 {
            break;
        }
        let denom_t = 1.0 + 1.0 / (t1 - t).sqrt();
        for j in grid.j1..=grid.j2 {
            let x = grid.x_nodes[j];
            let dist = match surface.orientation {
                Orientation::StopBelow => x - surface.b[i],
                Orientation::StopAbove => surface.b[i] - x,
            };
            if dist <= margin {
                continue;
            }
            let ratio = surface.u_dot[i][j].abs() / (dist * denom_t);
            c = c.max(ratio);
        }
    }
    c
}

/// Max |b(t_{i+1}) - b(t_i)| / dt over t <= t2.
pub fn lipschitz_ratio_check(surface: &ValueSurface, t2: f64) -> f64 {
    let grid = &surface.grid;
    let mut worst = 0.0f64;
    for i in 0..grid.n_t() {
        if grid.t_nodes[i + 1] > t2 {
            break;
        }
        worst = worst.max((surface.b[i + 1] - surface.b[i]).abs() / grid.dt);
    }
    worst
}

/// Monte Carlo two-sided hitting probability P_x(tau_{x2} < nu_{b(t)})
/// against the scale-function closed form. Returns (mc, std_err, scale_prob).
pub fn hitting_prob_check(
    spec: &ProblemSpec,
    surface: &ValueSurface,
    t: f64,
    x: f64,
    n_paths: usize,
    seed: u64,
) -> Result<(f64, f64, f64)> {
    let bt = surface.b_at(t);
    let x2 = spec.rect_x2;
    if x <= bt + 1e-15 {
        return Ok((0.0, 0.0, 0.0));
    }
    if x >= x2 - 1e-15 {
        return Ok((1.0, 0.0, 1.0));
    }
    let s_b = spec.scale_function(bt)?;
    let s_x = spec.scale_function(x)?;
    let s_2 = spec.scale_function(x2)?;
    let exact = (s_x - s_b) / (s_2 - s_b);
    let sig_ref = (spec.diffusion.sigma)(x);
    let dt_mc = {
        let dx_eff = (x2 - bt) / 400.0;
        (dx_eff / sig_ref) * (dx_eff / sig_ref)
    };
    let mut hits = 0usize;
    for p in 0..n_paths {
        let mut rng = substream(seed, p as u64);
        let mut xx = x;
        loop {
            let z: f64 = rng.sample(StandardNormal);
            xx += (spec.diffusion.mu)(0.0, xx) * dt_mc + (spec.diffusion.sigma)(xx) * dt_mc.sqrt() * z;
            if xx >= x2 {
                hits += 1;
                break;
            }
            if xx <= bt {
                break;
            }
        }
    }
    let pm = hits as f64 / n_paths as f64;
    let se = (pm * (1.0 - pm) / n_paths as f64).sqrt();
    Ok((pm, se, exact))
}

/// Write the solved surface as CSV with columns t, x, v, u.
pub fn write_surface_csv(surface: &ValueSurface, path: &std::path::Path) -> std::io::Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "t,x,v,u")?;
    let grid = &surface.grid;
    for i in 0..grid.t_nodes.len() {
        for j in 0..grid.x_nodes.len() {
            writeln!(
                out,
                "{:.12e},{:.12e},{:.12e},{:.12e}",
                grid.t_nodes[i], grid.x_nodes[j], surface.v[i][j], surface.u[i][j]
            )?;
        }
    }
    Ok(())
}

/// Write the extracted boundary as CSV with columns t, b, b_dot_fd.
pub fn write_boundary_csv(surface: &ValueSurface, path: &std::path::Path) -> std::io::Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "t,b,b_dot_fd")?;
    for i in 0..surface.b.len() {
        writeln!(
            out,
            "{:.12e},{:.12e},{:.12e}",
            surface.grid.t_nodes[i], surface.b[i], surface.b_dot_fd[i]
        )?;
    }
    Ok(())
}


/// Diagnostic variant of `interior_pde_residual` returning the worst node and
/// the individual residual terms there.
pub fn interior_pde_residual_argmax(
    spec: &ProblemSpec,
    surface: &ValueSurface,
    margin_nodes: usize,
) -> (f64, f64, f64, (f64, f64, f64, f64, f64)) {
    let grid = &surface.grid;
    let (slo, shi) = spec.gain.smooth_x;
    let kink_margin = 2.0 * grid.dx;
    let mut worst = (0.0f64, 0.0, 0.0, (0.0, 0.0, 0.0, 0.0, 0.0));
    for i in 1..grid.n_t() {
        let t = grid.t_nodes[i];
        if t > spec.rect_t1 {
            break;
        }
        for j in grid.j1 + 1..grid.j2 {
            let in_band = match surface.orientation {
                Orientation::StopBelow => j >= surface.b_idx[i] + margin_nodes,
                Orientation::StopAbove => j + margin_nodes <= surface.b_idx[i],
            };
            if !in_band {
                continue;
            }
            if grid.x_nodes[j] < slo + kink_margin || grid.x_nodes[j] > shi - kink_margin {
                continue;
            }
            let x = grid.x_nodes[j];
            let s = (spec.diffusion.sigma)(x);
            let terms = (
                surface.u_dot[i][j],
                0.5 * s * s * surface.u_xx[i][j],
                (spec.diffusion.mu)(t, x) * surface.u_x[i][j],
                -(spec.discount.r)(t, x) * surface.u[i][j],
                spec.h_raw(t, x),
            );
            let res = terms.0 + terms.1 + terms.2 + terms.3 + terms.4;
            if res.abs() > worst.0 {
                worst = (res.abs(), t, x, terms);
            }
        }
    }
    worst
}
