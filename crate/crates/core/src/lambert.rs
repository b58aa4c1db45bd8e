//! Lower real branch of the Lambert W function.

use std::f64::consts::E;

use crate::error::{Error, Result};

const BISECTION_STEPS: usize = 200;
const NEWTON_STEPS: usize = 4;

/// `W₋₁(x)`: the solution `w ≤ −1` of `w·eʷ = x` for `x ∈ [−1/e, 0)`.
///
/// A bisection on `[lo, −1]` (with `lo` starting at −50 and pushed down until it
/// brackets the root) narrows the root to machine precision; a few guarded
/// Newton steps then polish it.
pub fn lambert_w_minus1(x: f64) -> Result<f64> {
    let branch_point = -1.0 / E;
    if !x.is_finite() || x >= 0.0 || x < branch_point * (1.0 + 4.0 * f64::EPSILON) {
        return Err(Error::Domain(format!("W-1 is defined on [-1/e, 0), got {x}")));
    }
    if x <= branch_point {
        return Ok(-1.0);
    }
    // w·eʷ − x is decreasing in w on (−∞, −1]: positive below the root.
    let f = |w: f64| w * w.exp() - x;
    let mut lo = -50.0;
    while f(lo) <= 0.0 {
        lo *= 2.0;
        if lo < -1e6 {
            return Err(Error::Domain(format!("no bracket found for {x}")));
        }
    }
    let mut hi = -1.0;
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut w = 0.5 * (lo + hi);
    for _ in 0..NEWTON_STEPS {
        let ew = w.exp();
        let slope = (w + 1.0) * ew;
        if slope == 0.0 {
            break;
        }
        let next = w - (w * ew - x) / slope;
        if !(next >= lo && next <= hi) || (f(next).abs() >= f(w).abs()) {
            break;
        }
        w = next;
    }
    Ok(w)
}
