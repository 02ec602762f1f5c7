//! Numeric primitives shared by the encoder, the user-side transformer and the
//! ranking heads.
//!
//! Everything here is generic over [`Real`] so the same code path runs in `f32`
//! for training and serving and in `f64` for finite-difference gradient checks.

mod attention;
mod gradcheck;
mod linalg;
mod ops;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::str::FromStr;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SarmError};

pub use attention::{attention_backward, attention_forward, masked_attention, Attention};
pub use gradcheck::{grad_check, GradCheckReport};
pub use linalg::{axpy, dot, matmul, matmul_acc, matmul_backward};
pub use ops::{
    gelu, gelu_grad, rmsnorm, rmsnorm_backward, rmsnorm_forward, rope_angle, rope_rotate, sigmoid,
    softmax, RopeTable, DEFAULT_RMS_EPS, DEFAULT_ROPE_BASE,
};

/// Floating point element type of every tensor.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, F::zero())
    }

    pub fn filled(shape: &[usize], value: F) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(SarmError::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                len,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(SarmError::Shape("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::from_vec(&[rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix (leading dimension, or 1 for vectors).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| G::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap_or(G::nan()))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|x| *x = F::zero());
    }

    pub fn sq_norm(&self) -> F {
        self.data.iter().map(|&x| x * x).sum()
    }
}

/// Deterministic generator: ChaCha with 8 rounds (`rand_chacha::ChaCha8Rng`),
/// seeded through `seed_from_u64`. The stream is platform independent.
#[derive(Clone, Debug)]
pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Independent generator for a named sub-stream of `seed`.
    pub fn derived(seed: u64, label: &str) -> Self {
        // FNV-1a over the label keeps derivation stable across builds.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        Rng::new(seed ^ h.rotate_left(17))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}

/// Parameter initialisation schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitScheme {
    /// Uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    UniformScaled {
        fan_in: usize,
    },
    Zeros,
    Ones,
}

impl FromStr for InitScheme {
    type Err = SarmError;

    /// Accepts `zeros`, `ones` and `uniform-scaled:<fan_in>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zeros" => Ok(InitScheme::Zeros),
            "ones" => Ok(InitScheme::Ones),
            _ => {
                let fan_in = s
                    .strip_prefix("uniform-scaled:")
                    .and_then(|f| f.parse::<usize>().ok())
                    .filter(|&f| f > 0)
                    .ok_or_else(|| SarmError::Config(format!("unknown init scheme `{s}`")))?;
                Ok(InitScheme::UniformScaled { fan_in })
            }
        }
    }
}

pub fn init_params<F: Real>(rng: &mut Rng, shape: &[usize], scheme: InitScheme) -> Tensor<F> {
    match scheme {
        InitScheme::Zeros => Tensor::zeros(shape),
        InitScheme::Ones => Tensor::filled(shape, F::one()),
        InitScheme::UniformScaled { fan_in } => {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let len = shape.iter().product();
            let data = (0..len)
                .map(|_| F::lit((2.0 * rng.uniform() - 1.0) * bound))
                .collect();
            Tensor {
                shape: shape.to_vec(),
                data,
            }
        }
    }
}

pub(crate) fn check_finite<F: Real>(xs: &[F], what: &str) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(SarmError::Numeric(format!("non-finite value in {what}")))
    }
}
