//! Scalar helpers shared by the inference and encoder code.

/// Floor applied to probabilities before taking a logarithm in the KD losses.
pub const PROB_FLOOR: f64 = 1e-12;

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn tanh(x: f64) -> f64 {
    libm::tanh(x)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

/// `ln(exp(a) + exp(b))`, exact for infinite arguments.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + libm::log1p(libm::exp(lo - hi))
}

/// `ln Σ exp(x)` with the running maximum subtracted.
pub fn log_sum_exp(xs: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = xs.into_iter().map(|x| libm::exp(x - max)).sum();
    max + libm::log(sum)
}

/// Numerically stable softmax of one row, written into `out`.
pub fn softmax_into(row: &[f64], out: &mut [f64]) {
    let lse = log_sum_exp(row.iter().copied());
    for (o, &x) in out.iter_mut().zip(row) {
        *o = libm::exp(x - lse);
    }
}

/// `ln(max(p, PROB_FLOOR))`; logs a warning when the floor fires.
pub fn floored_ln(p: f64) -> f64 {
    if p < PROB_FLOOR {
        log::warn!("probability {p:e} below floor; clamped to {PROB_FLOOR:e}");
        libm::log(PROB_FLOOR)
    } else {
        libm::log(p)
    }
}
