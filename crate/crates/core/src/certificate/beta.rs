//! Log-gamma, log-beta, the regularized incomplete beta function and the ε(N, α, β)
//! bound derived from the Beta law of split-conformal coverage.

use crate::error::{Error, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Stirling remainder `ln Γ(x) − [(x − ½) ln x − x + ½ ln 2π]` for `x ≥ 10`.
fn stirling_correction(x: f64) -> f64 {
    let r = 1.0 / x;
    let r2 = r * r;
    r * (1.0 / 12.0
        - r2 * (1.0 / 360.0 - r2 * (1.0 / 1260.0 - r2 * (1.0 / 1680.0 - r2 / 1188.0))))
}

/// `ln Γ(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    if x >= 10.0 {
        return (x - 0.5) * x.ln() - x + LN_SQRT_2PI + stirling_correction(x);
    }
    if x < 0.5 {
        // Reflection keeps the Lanczos sum in its accurate range.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    LN_SQRT_2PI + (x + 0.5) * t.ln() - t + acc.ln()
}

/// `ln B(a, b)`, arranged to avoid cancellation when either argument is large.
pub fn ln_beta(a: f64, b: f64) -> f64 {
    let (p, q) = if a < b { (a, b) } else { (b, a) };
    let s = p + q;
    if p >= 10.0 {
        let corr = stirling_correction(p) + stirling_correction(q) - stirling_correction(s);
        -0.5 * q.ln() + LN_SQRT_2PI + corr + (p - 0.5) * (p / s).ln() + q * (-p / s).ln_1p()
    } else if q >= 10.0 {
        let corr = stirling_correction(q) - stirling_correction(s);
        ln_gamma(p) + corr + p - p * s.ln() + (q - 0.5) * (-p / s).ln_1p()
    } else {
        ln_gamma(p) + ln_gamma(q) - ln_gamma(s)
    }
}

const CF_MAX_ITER: usize = 20_000;
const CF_EPS: f64 = 1e-16;
const CF_TINY: f64 = 1e-300;

/// Modified Lentz evaluation of the incomplete-beta continued fraction.
fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < CF_TINY {
        d = CF_TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=CF_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < CF_TINY {
            d = CF_TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < CF_TINY {
            c = CF_TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < CF_TINY {
            d = CF_TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < CF_TINY {
            c = CF_TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < CF_EPS {
            break;
        }
    }
    h
}

/// `I_x(a, b)`, the regularized incomplete beta function (the Beta(a, b) CDF at `x`).
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) || !(a > 0.0) || !(b > 0.0) || !a.is_finite() || !b.is_finite() {
        return Err(Error::Domain(format!(
            "incomplete beta needs x in [0,1], a > 0, b > 0 (got x={x}, a={a}, b={b})"
        )));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == 1.0 {
        return Ok(1.0);
    }
    let ln_front = a * x.ln() + b * (-x).ln_1p() - ln_beta(a, b);
    let value = if x < (a + 1.0) / (a + b + 2.0) {
        (ln_front.exp() * beta_continued_fraction(a, b, x) / a).clamp(0.0, 1.0)
    } else {
        (1.0 - ln_front.exp() * beta_continued_fraction(b, a, 1.0 - x) / b).clamp(0.0, 1.0)
    };
    Ok(value)
}

/// `l = ⌊(N+1)α⌋`, snapping `(N+1)α` to the nearest integer when it is within a relative
/// 1e-9 of it so that `α = l/(N+1)` round-trips.
pub fn conformal_index(n: usize, alpha: f64) -> Result<usize> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let t = (n as f64 + 1.0) * alpha;
    let r = t.round();
    let l = if (t - r).abs() <= 1e-9 * t.max(1.0) { r } else { t.floor() };
    if l < 1.0 || l > n as f64 {
        return Err(Error::InsufficientSamples { n, alpha, l: l as i64 });
    }
    Ok(l as usize)
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("beta must lie in (0, 1), got {beta}")))
    }
}

/// Smallest ε with `I_{1−ε}(N − l + 1, l) ≤ β` for an explicit index `l`.
pub fn epsilon_for_index(n: usize, l: usize, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    if l < 1 || l > n {
        return Err(Error::InsufficientSamples { n, alpha: l as f64 / (n as f64 + 1.0), l: l as i64 });
    }
    let (a, b) = ((n - l + 1) as f64, l as f64);
    // I_{1−ε} decreases in ε, from 1 at ε = 0 to 0 at ε = 1.
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if regularized_incomplete_beta(1.0 - mid, a, b)? <= beta {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Violation-fraction bound ε for `N` calibration samples at level α and confidence 1−β.
pub fn epsilon_for(n: usize, alpha: f64, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    let l = conformal_index(n, alpha)?;
    epsilon_for_index(n, l, beta)
}

/// Largest α of the form `l/(N+1)` whose bound ε(N, α, β) does not exceed `target`.
pub fn alpha_for_epsilon(n: usize, target: f64, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::Domain(format!("target epsilon must lie in (0, 1), got {target}")));
    }
    if n == 0 || epsilon_for_index(n, 1, beta)? > target {
        return Err(Error::InsufficientSamples { n, alpha: 0.0, l: 0 });
    }
    // ε grows with l; find the largest admissible l.
    let (mut good, mut bad) = (1usize, n + 1);
    while bad - good > 1 {
        let mid = good + (bad - good) / 2;
        if epsilon_for_index(n, mid, beta)? <= target {
            good = mid;
        } else {
            bad = mid;
        }
    }
    Ok(good as f64 / (n as f64 + 1.0))
}
