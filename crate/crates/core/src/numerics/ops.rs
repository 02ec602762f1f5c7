use super::{check_finite, Real};
use crate::error::{Result, SarmError};

pub const DEFAULT_RMS_EPS: f64 = 1e-6;
pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

/// `out_j = gain_j * x_j / sqrt(mean(x²) + eps)`.
pub fn rmsnorm<F: Real>(x: &[F], gain: &[F], eps: F) -> Result<Vec<F>> {
    if x.is_empty() || x.len() != gain.len() {
        return Err(SarmError::Shape(format!(
            "rmsnorm: input {} vs gain {}",
            x.len(),
            gain.len()
        )));
    }
    check_finite(x, "rmsnorm input")?;
    let mut out = vec![F::zero(); x.len()];
    rmsnorm_forward(x, gain, eps, &mut out);
    Ok(out)
}

/// Writes the normalised row into `out` and returns `1/rms`.
#[inline]
pub fn rmsnorm_forward<F: Real>(x: &[F], gain: &[F], eps: F, out: &mut [F]) -> F {
    let d = F::from_usize(x.len()).unwrap();
    let ms = x.iter().map(|&v| v * v).sum::<F>() / d;
    let inv = F::one() / (ms + eps).sqrt();
    for ((o, &xi), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = g * xi * inv;
    }
    inv
}

/// Accumulates input and gain gradients of [`rmsnorm_forward`].
#[inline]
pub fn rmsnorm_backward<F: Real>(
    x: &[F],
    gain: &[F],
    inv: F,
    dy: &[F],
    dx: &mut [F],
    dgain: &mut [F],
) {
    let d = F::from_usize(x.len()).unwrap();
    let mut s = F::zero();
    for ((&dyj, &gj), &xj) in dy.iter().zip(gain).zip(x) {
        s = s + dyj * gj * xj;
    }
    let coef = inv * inv * inv * s / d;
    for j in 0..x.len() {
        dgain[j] = dgain[j] + dy[j] * x[j] * inv;
        dx[j] = dx[j] + inv * gain[j] * dy[j] - x[j] * coef;
    }
}

#[inline]
pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Softmax with max subtraction.
pub fn softmax<F: Real>(xs: &[F]) -> Vec<F> {
    let m = xs.iter().copied().fold(F::neg_infinity(), F::max);
    let ex: Vec<F> = xs.iter().map(|&x| (x - m).exp()).collect();
    let s: F = ex.iter().copied().sum();
    ex.into_iter().map(|e| e / s).collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu<F: Real>(x: F) -> F {
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    let half = F::lit(0.5);
    half * x * (F::one() + tanh_exp(c * (x + a * x * x * x)))
}

/// `tanh` through a single `exp`; cheaper than libm's `tanh` and saturates
/// cleanly at both ends.
#[inline]
fn tanh_exp<F: Real>(u: F) -> F {
    let two = F::lit(2.0);
    F::one() - two / ((two * u).exp() + F::one())
}

#[inline]
pub fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    let half = F::lit(0.5);
    let t = tanh_exp(c * (x + a * x * x * x));
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::lit(3.0) * a * x * x)
}

/// Rotation angle of pair `k` at position `pos` for width `d`.
pub fn rope_angle(pos: usize, k: usize, d: usize, base: f64) -> f64 {
    pos as f64 * base.powf(-2.0 * k as f64 / d as f64)
}

/// Rotates pairs `(x[2k], x[2k+1])` by `pos * base^(-2k/d)`.
pub fn rope_rotate<F: Real>(x: &[F], pos: usize, base: f64) -> Result<Vec<F>> {
    let d = x.len();
    if !d.is_multiple_of(2) {
        return Err(SarmError::Config(format!(
            "rope needs an even width, got {d}"
        )));
    }
    let mut out = x.to_vec();
    for k in 0..d / 2 {
        let th = rope_angle(pos, k, d, base);
        let (s, c) = (F::lit(th.sin()), F::lit(th.cos()));
        let (a, b) = (x[2 * k], x[2 * k + 1]);
        out[2 * k] = a * c - b * s;
        out[2 * k + 1] = a * s + b * c;
    }
    Ok(out)
}

/// Precomputed cos/sin for positions `0..max_len`.
#[derive(Clone, Debug)]
pub struct RopeTable<F> {
    half: usize,
    cos: Vec<F>,
    sin: Vec<F>,
}

impl<F: Real> RopeTable<F> {
    pub fn new(max_len: usize, d: usize, base: f64) -> Result<Self> {
        if !d.is_multiple_of(2) {
            return Err(SarmError::Config(format!(
                "rope needs an even width, got {d}"
            )));
        }
        let half = d / 2;
        let mut cos = Vec::with_capacity(max_len * half);
        let mut sin = Vec::with_capacity(max_len * half);
        for pos in 0..max_len {
            for k in 0..half {
                let th = rope_angle(pos, k, d, base);
                cos.push(F::lit(th.cos()));
                sin.push(F::lit(th.sin()));
            }
        }
        Ok(RopeTable { half, cos, sin })
    }

    pub fn max_len(&self) -> usize {
        if self.half == 0 {
            0
        } else {
            self.cos.len() / self.half
        }
    }

    /// Rotates `x` in place; `inverse` applies the transpose (used in backward).
    #[inline]
    pub fn apply(&self, x: &mut [F], pos: usize, inverse: bool) {
        let base = pos * self.half;
        for k in 0..self.half {
            let c = self.cos[base + k];
            let s = if inverse {
                -self.sin[base + k]
            } else {
                self.sin[base + k]
            };
            let (a, b) = (x[2 * k], x[2 * k + 1]);
            x[2 * k] = a * c - b * s;
            x[2 * k + 1] = a * s + b * c;
        }
    }
}
