//! Scalar and slice math kernels used in hot loops.
//!
//! The scan kernel evaluates `expm1(dt * a)` once per (step, channel, state)
//! element, which dominates training cost on CPU. `expm1_neg` uses a single
//! branch-free polynomial-plus-scaling form on the non-positive domain with
//! relative error below 1e-13; the slice variant exists so the compiler can
//! vectorize it. Correctness against `f64::exp_m1` is asserted in tests and,
//! indirectly, by the scan-vs-oracle equivalence suite.

// deliberate two-word split of ln 2 so r = x - k*ln2 stays exact
#[allow(clippy::approx_constant, clippy::excessive_precision)]
const LN2_HI: f64 = 0.693_147_180_369_123_816_49;
#[allow(clippy::excessive_precision)]
const LN2_LO: f64 = 1.908_214_929_270_587_700_2e-10;
const INV_LN2: f64 = std::f64::consts::LOG2_E;

// 1/k! for k = 2..=11: exp(r) ~= 1 + r + r^2 * poly(r)
const INV_FACT: [f64; 10] = [
    0.5,
    1.0 / 6.0,
    1.0 / 24.0,
    1.0 / 120.0,
    1.0 / 720.0,
    1.0 / 5040.0,
    1.0 / 40320.0,
    1.0 / 362880.0,
    1.0 / 3628800.0,
    1.0 / 39916800.0,
];

/// Core of expm1 for x in [-37, 0]:
/// exp(x) = 2^k * exp(r) with r = x - k ln2, |r| <= ln2/2, so
/// expm1(x) = 2^k * (r + r^2 poly(r)) + (2^k - 1), where 2^k - 1 is exact.
/// The k = 0 case degenerates to the plain series, so no cancellation branch
/// is needed.
#[inline(always)]
fn expm1_neg_core(x: f64) -> f64 {
    let kf = (x * INV_LN2).round();
    let r = (-kf).mul_add(LN2_LO, (-kf).mul_add(LN2_HI, x));
    let mut p = INV_FACT[9];
    for j in (0..9).rev() {
        p = p.mul_add(r, INV_FACT[j]);
    }
    let q = (r * p).mul_add(r, r); // r + r^2 * poly
    let scale = f64::from_bits(((1023 + kf as i64) as u64) << 52);
    scale.mul_add(q, scale - 1.0)
}

/// exp(x) - 1 for x <= 0.
#[inline]
pub fn expm1_neg(x: f64) -> f64 {
    debug_assert!(x <= 0.0 || x.is_nan());
    // below -37, exp(x) < 1e-16 and the clamp is exact to f64 resolution
    expm1_neg_core(x.max(-37.0))
}

/// Elementwise `out[i] = expm1(za[i])` for non-positive inputs; branch-free
/// body so the autovectorizer can work on it.
#[inline]
pub fn expm1_neg_slice(za: &[f64], out: &mut [f64]) {
    assert_eq!(za.len(), out.len());
    for (o, &x) in out.iter_mut().zip(za) {
        *o = expm1_neg_core(x.max(-37.0));
    }
}

/// In-place variant of `expm1_neg_slice`.
#[inline]
pub fn expm1_neg_slice_in_place(buf: &mut [f64]) {
    for v in buf.iter_mut() {
        *v = expm1_neg_core(v.max(-37.0));
    }
}

/// Single-element branch-free expm1 for x <= 0, clamped below -37.
#[inline(always)]
pub fn expm1_neg_clamped(x: f64) -> f64 {
    expm1_neg_core(x.max(-37.0))
}

/// exp(x) for x <= 0.
#[inline]
pub fn exp_neg(x: f64) -> f64 {
    expm1_neg(x) + 1.0
}

/// Logistic sigmoid, stable for all x; branch-free so slice loops vectorize.
#[inline(always)]
pub fn sigmoid(x: f64) -> f64 {
    let e = expm1_neg_core((-x.abs()).max(-37.0)) + 1.0; // exp(-|x|)
    let base = 1.0 / (1.0 + e);
    if x >= 0.0 {
        base
    } else {
        e * base
    }
}

/// `out[i] = sigmoid(x[i])`.
#[inline]
pub fn sigmoid_slice(xs: &[f64], out: &mut [f64]) {
    assert_eq!(xs.len(), out.len());
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = sigmoid(x);
    }
}

/// Branch-free tanh via the sigmoid identity tanh(u) = 2 sigmoid(2u) - 1.
#[inline(always)]
pub fn tanh_fast(u: f64) -> f64 {
    2.0f64.mul_add(sigmoid(2.0 * u), -1.0)
}

/// ln(1 + exp(x)), stable for all x.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        exp_neg(-x.abs()).ln_1p() + x.max(0.0)
    }
}

/// Tanh-approximation GELU and its derivative.
#[inline]
pub fn gelu(x: f64) -> f64 {
    const A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const B: f64 = 0.044715;
    let u = A * (x + B * x * x * x);
    0.5 * x * (1.0 + tanh_fast(u))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    const A: f64 = 0.797_884_560_802_865_4;
    const B: f64 = 0.044715;
    let u = A * (x + B * x * x * x);
    let t = tanh_fast(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * A * (1.0 + 3.0 * B * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expm1_neg_matches_std() {
        let mut worst = 0.0f64;
        for i in 0..200_000 {
            let x = -40.0 * (i as f64 + 0.5) / 200_000.0;
            let got = expm1_neg(x);
            let want = x.exp_m1();
            let denom = want.abs().max(1e-300);
            worst = worst.max((got - want).abs() / denom);
        }
        assert!(worst < 1e-13, "worst relative error {worst:e}");
        assert_eq!(expm1_neg(0.0), 0.0);
        assert_eq!(expm1_neg(-1000.0), expm1_neg(-37.0));
        assert!((expm1_neg(-1000.0) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn expm1_neg_slice_matches_scalar() {
        let xs: Vec<f64> = (0..4097).map(|i| -20.0 * (i as f64) / 4096.0).collect();
        let mut out = vec![0.0; xs.len()];
        expm1_neg_slice(&xs, &mut out);
        for (&x, &o) in xs.iter().zip(&out) {
            assert_eq!(o, expm1_neg(x));
        }
    }

    #[test]
    fn sigmoid_softplus_sane() {
        for &x in &[-50.0, -5.0, -0.1, 0.0, 0.1, 5.0, 50.0] {
            let s = sigmoid(x);
            let want = 1.0 / (1.0 + (-x).exp());
            assert!((s - want).abs() < 1e-12, "sigmoid({x})");
            let sp = softplus(x);
            let want_sp = x.exp().ln_1p();
            if want_sp.is_finite() {
                assert!((sp - want_sp).abs() / want_sp.max(1e-12) < 1e-10, "softplus({x})");
            }
        }
    }
}
