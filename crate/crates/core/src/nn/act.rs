//! Pointwise activations.

/// `e^x` via `2^n · 2^f` with a degree-6 polynomial for `2^f`; relative
/// error below 5e-7 on the clamped range. Branch-free so loops vectorise.
#[inline]
pub fn fast_exp(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    let t = (x * LOG2E).clamp(-126.0, 127.0);
    let n = (t + 0.5).floor();
    let f = t - n;
    // Taylor coefficients of 2^f, |f| <= 1/2
    let p = 1.0
        + f * (0.693_147_2
            + f * (0.240_226_5
                + f * (0.055_504_11 + f * (0.009_618_129 + f * (0.001_333_355 + f * 0.000_154_035_3)))));
    let bits = ((n as i32 + 127) as u32) << 23;
    p * f32::from_bits(bits)
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + fast_exp(-x))
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f32) -> f32 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_K: f32 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f32) -> f32 {
    let inner = GELU_C * (x + GELU_K * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric(f: impl Fn(f32) -> f32, x: f32) -> f32 {
        let h = 1e-3;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn derivatives_match_central_differences() {
        for &x in &[-3.0f32, -0.7, 0.0, 0.4, 2.5] {
            assert!((silu_grad(x) - numeric(silu, x)).abs() < 1e-3, "silu at {x}");
            assert!((gelu_grad(x) - numeric(gelu, x)).abs() < 1e-3, "gelu at {x}");
        }
    }

    #[test]
    fn fast_exp_is_accurate() {
        let mut x = -80.0f32;
        while x < 80.0 {
            let want = (x as f64).exp();
            let got = fast_exp(x) as f64;
            // input rounding of x·log2(e) dominates for large |x|
            assert!(((got - want) / want).abs() < 5e-7 + 1e-7 * x.abs() as f64, "exp({x}): {got} vs {want}");
            x += 0.0137;
        }
        assert_eq!(fast_exp(f32::NEG_INFINITY), fast_exp(-1000.0));
        assert!(fast_exp(-1000.0) < 1e-37);
    }

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-5);
        assert!(gelu(-10.0).abs() < 1e-5);
    }
}
