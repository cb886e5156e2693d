//! Small numerical kernels shared across the crate: adaptive quadrature,
//! bracketed root finding and compensated summation.

/// Gauss–Kronrod 7-15 nodes on [-1, 1] (positive half; nodes are symmetric).
const XGK: [f64; 8] = [
    0.991455371120813,
    0.949107912342759,
    0.864864423359769,
    0.741531185599394,
    0.586087235467691,
    0.405845151377397,
    0.207784955007898,
    0.0,
];
const WGK: [f64; 8] = [
    0.022935322010529,
    0.063092092629979,
    0.104790010322250,
    0.140653259715525,
    0.169004726639267,
    0.190350578064785,
    0.204432940075298,
    0.209482141084728,
];
const WG: [f64; 4] = [
    0.129484966168870,
    0.279705391489277,
    0.381830050505119,
    0.417959183673469,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut kronrod = WGK[7] * f(c);
    let mut gauss = WG[3] * f(c);
    for i in 0..7 {
        let x = h * XGK[i];
        let fsum = f(c - x) + f(c + x);
        kronrod += WGK[i] * fsum;
        if i % 2 == 1 {
            gauss += WG[i / 2] * fsum;
        }
    }
    kronrod *= h;
    gauss *= h;
    (kronrod, (kronrod - gauss).abs())
}

/// Adaptive Gauss–Kronrod quadrature of `f` on [a, b] to absolute tolerance `tol`.
///
/// Bisects intervals whose local error estimate exceeds its share of the
/// budget; recursion depth is capped, after which the local Kronrod value is
/// accepted as-is.
pub fn integrate<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn go<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
        let (val, err) = gk15(f, a, b);
        if err <= tol || depth >= 48 {
            val
        } else {
            let c = 0.5 * (a + b);
            go(f, a, c, 0.5 * tol, depth + 1) + go(f, c, b, 0.5 * tol, depth + 1)
        }
    }
    if a == b {
        return 0.0;
    }
    let sign = if a < b { 1.0 } else { -1.0 };
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    sign * go(f, lo, hi, tol, 0)
}

/// Root of `f` on a bracket [a, b] with f(a), f(b) of opposite sign, by
/// bisection with secant acceleration, to absolute tolerance `tol` on x.
pub fn find_root<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> Option<f64> {
    let (mut lo, mut hi) = (a, b);
    let (mut flo, mut fhi) = (f(lo), f(hi));
    if flo == 0.0 {
        return Some(lo);
    }
    if fhi == 0.0 {
        return Some(hi);
    }
    if flo.signum() == fhi.signum() {
        return None;
    }
    for _ in 0..200 {
        if (hi - lo).abs() <= tol {
            break;
        }
        // secant candidate, fall back to midpoint when it leaves the bracket
        let mut x = lo - flo * (hi - lo) / (fhi - flo);
        if !x.is_finite() || x <= lo || x >= hi {
            x = 0.5 * (lo + hi);
        }
        // keep progress guaranteed: alternate with a bisection-sized floor
        let mid = 0.5 * (lo + hi);
        if (x - mid).abs() > 0.45 * (hi - lo) {
            x = mid;
        }
        let fx = f(x);
        if fx == 0.0 {
            return Some(x);
        }
        if fx.signum() == flo.signum() {
            lo = x;
            flo = fx;
        } else {
            hi = x;
            fhi = fx;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Kahan-compensated accumulator; order-dependent but drift-free.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: f64) {
        let y = value - self.comp;
        let t = self.sum + y;
        self.comp = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

/// Mean and standard error of a sample via compensated sums.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut s = KahanSum::new();
    for &v in values {
        s.add(v);
    }
    let mean = s.value() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let mut sq = KahanSum::new();
    for &v in values {
        sq.add((v - mean) * (v - mean));
    }
    let var = sq.value() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Central-difference self-consistency: relative error of `deriv` against a
/// central difference of `f` at `x` with step `step`.
pub fn central_diff_rel_err<F: Fn(f64) -> f64>(f: &F, deriv: f64, x: f64, step: f64) -> f64 {
    let fd = (f(x + step) - f(x - step)) / (2.0 * step);
    let scale = deriv.abs().max(fd.abs()).max(1e-8);
    (fd - deriv).abs() / scale
}

/// Linear interpolation of tabulated (uniform-grid) values.
pub fn lerp_uniform(values: &[f64], lo: f64, dx: f64, x: f64) -> f64 {
    let n = values.len();
    debug_assert!(n >= 2);
    let pos = (x - lo) / dx;
    let j = (pos.floor() as isize).clamp(0, n as isize - 2) as usize;
    let w = (pos - j as f64).clamp(0.0, 1.0);
    values[j] * (1.0 - w) + values[j + 1] * w
}
