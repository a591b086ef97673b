//! Adaptive Gauss–Kronrod (7/15) quadrature on finite intervals.

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn kronrod(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut gauss = fc * WG[3];
    let mut kron = fc * WGK[7];
    for j in 0..7 {
        let x = h * XGK[j];
        let (f1, f2) = (f(c - x), f(c + x));
        kron += WGK[j] * (f1 + f2);
        if j % 2 == 1 {
            gauss += WG[j / 2] * (f1 + f2);
        }
    }
    (kron * h, ((kron - gauss) * h).abs())
}

/// Integrates `f` over `[a, b]` to absolute tolerance `tol` by recursive
/// bisection. Fails when the error estimate is still above `tol` after
/// `max_intervals` subintervals.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64, max_intervals: usize) -> Result<f64> {
    let mut pending = vec![(a, b, kronrod(&f, a, b))];
    let mut total = 0.0;
    let mut err_total = 0.0;
    let mut intervals = 1;
    while let Some((lo, hi, (val, err))) = pending.pop() {
        let width_share = (hi - lo) / (b - a);
        if err <= tol * width_share || hi - lo < 1e-14 * (b - a).abs().max(1.0) {
            total += val;
            err_total += err;
            continue;
        }
        if intervals >= max_intervals {
            return Err(Error::Quadrature(format!(
                "error estimate {err:.3e} on [{lo}, {hi}] exceeds tolerance {tol:.1e} after {intervals} intervals"
            )));
        }
        let mid = 0.5 * (lo + hi);
        pending.push((lo, mid, kronrod(&f, lo, mid)));
        pending.push((mid, hi, kronrod(&f, mid, hi)));
        intervals += 1;
    }
    if err_total > tol * 10.0 {
        return Err(Error::Quadrature(format!(
            "accumulated error {err_total:.3e} exceeds tolerance {tol:.1e}"
        )));
    }
    Ok(total)
}
