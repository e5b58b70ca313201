//! Decimal fixed-point codec between floats and bounded integers.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointCodec {
    precision: u32,
    value_bound: f64,
}

impl FixedPointCodec {
    pub fn new(precision: u32, value_bound: f64) -> Result<Self> {
        if precision > 9 {
            return Err(Error::InvalidArgument(format!(
                "precision {precision} is larger than 9 decimal digits"
            )));
        }
        if !(value_bound.is_finite() && value_bound > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "value bound must be positive, got {value_bound}"
            )));
        }
        Ok(FixedPointCodec {
            precision,
            value_bound,
        })
    }

    /// Codec with the default unit bound.
    pub fn unit(precision: u32) -> Result<Self> {
        Self::new(precision, 1.0)
    }

    pub fn precision(&self) -> u32 {
        self.precision
    }

    pub fn value_bound(&self) -> f64 {
        self.value_bound
    }

    pub fn scale(&self) -> f64 {
        10f64.powi(self.precision as i32)
    }

    /// Largest encoded magnitude, `ceil(bound * 10^eps)`.
    pub fn limit(&self) -> i64 {
        (self.value_bound * self.scale()).ceil() as i64
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(-self.value_bound, self.value_bound)
    }

    /// Rounds half away from zero.
    pub fn encode(&self, x: f64) -> Result<i64> {
        if !(x.abs() <= self.value_bound) {
            return Err(Error::BoundExceeded {
                value: x,
                bound: self.value_bound,
            });
        }
        Ok((x * self.scale()).round() as i64)
    }

    pub fn encode_slice(&self, xs: &[f64]) -> Result<Vec<i64>> {
        xs.iter().map(|&x| self.encode(x)).collect()
    }

    pub fn encode_matrix(&self, x: ArrayView2<'_, f64>) -> Result<Array2<i64>> {
        let mut out = Array2::zeros(x.raw_dim());
        for (o, &v) in out.iter_mut().zip(x.iter()) {
            *o = self.encode(v)?;
        }
        Ok(out)
    }

    /// Errors if any integer exceeds this codec's limit.
    pub fn check_encoded(&self, v: &[i64]) -> Result<()> {
        let limit = self.limit();
        match v.iter().find(|x| x.unsigned_abs() > limit as u64) {
            Some(&value) => Err(Error::EncodedBoundExceeded { value, limit }),
            None => Ok(()),
        }
    }
}

pub fn decode_product(v: i64, eps_client: u32, eps_server: u32) -> f64 {
    v as f64 / 10f64.powi((eps_client + eps_server) as i32)
}

/// `eta * ceil(bx 10^eps_c) * ceil(bw 10^eps_s)`, saturating.
pub fn product_bound(client: &FixedPointCodec, server: &FixedPointCodec, eta: usize) -> u64 {
    (eta as u64)
        .saturating_mul(client.limit() as u64)
        .saturating_mul(server.limit() as u64)
}
