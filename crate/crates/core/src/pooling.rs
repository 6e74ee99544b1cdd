//! Multi-instance pooling functions.
//!
//! Each function reduces a bag of instance probabilities (one class's
//! saliency map, flattened row-major) to a single bag probability and
//! returns the analytic partial derivatives alongside the value.
//!
//! The log-sum-exp family is evaluated with the max-shift
//!
//! ```text
//! p = M + (1/r) · log( (1/n) · Σ exp(r · (s_i − M)) ),   M = max s
//! ```
//!
//! so no exponent ever exceeds zero and the softmax weights
//! `exp(r·s_i) / Σ exp(r·s_k)` come out of the same shifted terms.
//!
//! Lower-bounded adaptation parameterizes the sharpness as
//! `r = r0 + exp(β)`: `r0 ≥ 0` is a fixed prior and `β` is learned, so the
//! effective sharpness never drops to or below `r0`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Upper clamp applied to the learnable `β` after every optimizer step.
pub const BETA_MAX: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PoolingSpec<T> {
    Max,
    Average,
    GeneralizedMean { r: T },
    NoisyOr,
    LogSumExp { r: T },
    LseLba { r0: T, beta: T },
}

/// Bag probability and its partial derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolResult<T> {
    pub p: T,
    /// `∂p/∂s_i`, same layout as the input.
    pub grad_s: Vec<T>,
    /// `∂p/∂β`; only produced by [`PoolingSpec::LseLba`].
    pub grad_beta: Option<T>,
}

impl<T: Scalar> PoolingSpec<T> {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PoolingSpec::GeneralizedMean { r } | PoolingSpec::LogSumExp { r } => {
                if !(r > T::zero() && r.is_finite()) {
                    return Err(Error::invalid("pooling", format!("r must be positive, got {r}")));
                }
            }
            PoolingSpec::LseLba { r0, beta } => {
                if !(r0 >= T::zero() && r0.is_finite()) {
                    return Err(Error::invalid("pooling", format!("r0 must be >= 0, got {r0}")));
                }
                if !beta.is_finite() {
                    return Err(Error::invalid("pooling", "beta must be finite"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Sharpness actually used by the exponential kinds.
    pub fn effective_sharpness(&self) -> Option<T> {
        match *self {
            PoolingSpec::GeneralizedMean { r } | PoolingSpec::LogSumExp { r } => Some(r),
            PoolingSpec::LseLba { r0, beta } => Some(r0 + beta.exp()),
            _ => None,
        }
    }

    pub fn has_learnable_beta(&self) -> bool {
        matches!(self, PoolingSpec::LseLba { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            PoolingSpec::Max => "max",
            PoolingSpec::Average => "avg",
            PoolingSpec::GeneralizedMean { .. } => "gm",
            PoolingSpec::NoisyOr => "nor",
            PoolingSpec::LogSumExp { .. } => "lse",
            PoolingSpec::LseLba { .. } => "lse_lba",
        }
    }

    pub fn pool(&self, s: &[T]) -> Result<PoolResult<T>> {
        match *self {
            PoolingSpec::Max => pool_max(s),
            PoolingSpec::Average => pool_avg(s),
            PoolingSpec::GeneralizedMean { r } => pool_gm(s, r),
            PoolingSpec::NoisyOr => pool_nor(s),
            PoolingSpec::LogSumExp { r } => pool_lse(s, r),
            PoolingSpec::LseLba { r0, beta } => pool_lse_lba(s, r0, beta),
        }
    }
}

fn check_nonempty<T>(op: &'static str, s: &[T]) -> Result<()> {
    if s.is_empty() {
        return Err(Error::invalid(op, "empty saliency map"));
    }
    Ok(())
}

fn check_probabilities<T: Scalar>(op: &'static str, s: &[T]) -> Result<()> {
    check_nonempty(op, s)?;
    if let Some((i, v)) = s
        .iter()
        .enumerate()
        .find(|(_, v)| !(**v >= T::zero() && **v <= T::one()))
    {
        return Err(Error::invalid(op, format!("entry {i} = {v} lies outside [0, 1]")));
    }
    Ok(())
}

/// Shifted log-sum-exp. Returns `(p, softmax weights)`.
fn lse_shifted<T: Scalar>(s: &[T], r: T) -> (T, Vec<T>) {
    let m = s.iter().copied().fold(T::neg_infinity(), T::max);
    let mut w: Vec<T> = s.iter().map(|&v| (r * (v - m)).exp()).collect();
    let z: T = w.iter().copied().sum();
    let n = T::of_usize(s.len());
    let p = m + (z / n).ln() / r;
    for wi in &mut w {
        *wi /= z;
    }
    (p.max(T::zero()), w)
}

pub fn pool_lse<T: Scalar>(s: &[T], r: T) -> Result<PoolResult<T>> {
    check_probabilities("pool_lse", s)?;
    PoolingSpec::LogSumExp { r }.validate()?;
    let (p, grad_s) = lse_shifted(s, r);
    Ok(PoolResult {
        p,
        grad_s,
        grad_beta: None,
    })
}

/// Log-sum-exp pooling with sharpness `r0 + exp(beta)`.
pub fn pool_lse_lba<T: Scalar>(s: &[T], r0: T, beta: T) -> Result<PoolResult<T>> {
    check_probabilities("pool_lse_lba", s)?;
    PoolingSpec::LseLba { r0, beta }.validate()?;
    let e_beta = beta.exp();
    let r = r0 + e_beta;
    let (p, grad_s) = lse_shifted(s, r);
    // dp/dr = (Σ w_i s_i − p) / r, dr/dβ = e^β
    let weighted: T = grad_s.iter().zip(s).map(|(&w, &v)| w * v).sum();
    let grad_beta = e_beta * (weighted - p) / r;
    Ok(PoolResult {
        p,
        grad_s,
        grad_beta: Some(grad_beta),
    })
}

/// Generalized mean `((1/n) Σ s_i^r)^(1/r)`.
///
/// Evaluated naively: `s_i^r` underflows to zero for small entries and large
/// `r`, collapsing the result to 0. Use [`pool_lse`] when that matters.
pub fn pool_gm<T: Scalar>(s: &[T], r: T) -> Result<PoolResult<T>> {
    check_probabilities("pool_gm", s)?;
    PoolingSpec::GeneralizedMean { r }.validate()?;
    let pow = |v: T| if v == T::zero() { T::zero() } else { v.powf(r) };
    let acc: T = s.iter().map(|&v| pow(v)).sum();
    let n = T::of_usize(s.len());
    let p = (acc / n).powf(r.recip());
    let grad_s = if acc > T::zero() {
        // ∂p/∂s_i = p · s_i^(r−1) / acc
        let scale = p / acc;
        s.iter()
            .map(|&v| {
                if v == T::zero() {
                    T::zero()
                } else {
                    scale * v.powf(r - T::one())
                }
            })
            .collect()
    } else {
        vec![T::zero(); s.len()]
    };
    Ok(PoolResult {
        p,
        grad_s,
        grad_beta: None,
    })
}

/// Noisy-OR `1 − Π (1 − s_i)`, evaluated as a plain product.
pub fn pool_nor<T: Scalar>(s: &[T]) -> Result<PoolResult<T>> {
    check_probabilities("pool_nor", s)?;
    let one = T::one();
    let n = s.len();
    // ∂p/∂s_i = Π_{j≠i} (1 − s_j), from prefix and suffix products
    let mut suffix = vec![one; n + 1];
    for i in (0..n).rev() {
        suffix[i] = suffix[i + 1] * (one - s[i]);
    }
    let mut grad_s = Vec::with_capacity(n);
    let mut prefix = one;
    for i in 0..n {
        grad_s.push(prefix * suffix[i + 1]);
        prefix *= one - s[i];
    }
    Ok(PoolResult {
        p: one - suffix[0],
        grad_s,
        grad_beta: None,
    })
}

/// `log(1 − NOR(s)) = Σ log(1 − s_i)`, which keeps the information the
/// product form loses once `Π (1 − s_i)` drops below machine epsilon.
pub fn nor_log_complement<T: Scalar>(s: &[T]) -> Result<T> {
    check_probabilities("nor_log_complement", s)?;
    Ok(s.iter().map(|&v| (-v).ln_1p()).sum())
}

/// Noisy-OR evaluated through [`nor_log_complement`].
pub fn pool_nor_log<T: Scalar>(s: &[T]) -> Result<T> {
    Ok(-nor_log_complement(s)?.exp_m1())
}

/// Maximum; the gradient goes to the first maximal entry in row-major order.
pub fn pool_max<T: Scalar>(s: &[T]) -> Result<PoolResult<T>> {
    check_nonempty("pool_max", s)?;
    let mut arg = 0;
    for (i, &v) in s.iter().enumerate().skip(1) {
        if v > s[arg] {
            arg = i;
        }
    }
    let mut grad_s = vec![T::zero(); s.len()];
    grad_s[arg] = T::one();
    Ok(PoolResult {
        p: s[arg],
        grad_s,
        grad_beta: None,
    })
}

pub fn pool_avg<T: Scalar>(s: &[T]) -> Result<PoolResult<T>> {
    check_nonempty("pool_avg", s)?;
    let n = T::of_usize(s.len());
    let p = s.iter().copied().sum::<T>() / n;
    Ok(PoolResult {
        p,
        grad_s: vec![n.recip(); s.len()],
        grad_beta: None,
    })
}
