//! Element-wise uniform (EWU) stochastic quantization of gradient vectors.
//!
//! A `b`-bit EWU quantizer spends one bit on the sign of each coordinate and
//! `b - 1` bits on a level index in `0..=s` with `s = 2^(b-1) - 1`. The level
//! is drawn so that `norm * level / s` is an unbiased estimate of `|g_j|`:
//! a coordinate whose normalized magnitude `|g_j| / ‖g‖_p` lies in
//! `[l/s, (l+1)/s]` rounds up with probability `s·|g_j|/‖g‖_p - l`.
//!
//! The transmitted norm is stored at wire precision (`b_pre` bits), rounded
//! toward +∞, and the level probabilities are computed against that stored
//! value. Rounding up keeps every ratio at or below one, so the
//! reconstruction stays exactly unbiased after the norm is truncated to the
//! wire format.

mod codec;

pub use codec::{decode, encode, encoded_bits, encoded_len};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numeric::CompensatedSum;

/// Order `p` of the norm used to scale quantization levels.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormOrder(f64);

impl NormOrder {
    pub const L1: NormOrder = NormOrder(1.0);
    pub const L2: NormOrder = NormOrder(2.0);
    pub const INF: NormOrder = NormOrder(f64::INFINITY);

    /// `p` must be positive (or +∞).
    pub fn new(p: f64) -> Result<Self> {
        if p > 0.0 && !p.is_nan() {
            Ok(NormOrder(p))
        } else {
            Err(Error::Config(format!("norm order p must be positive, got {p}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_infinite(self) -> bool {
        self.0.is_infinite()
    }

    /// ℓ_p norm of `values` with compensated accumulation.
    pub fn norm(self, values: &[f64]) -> f64 {
        let p = self.0;
        if p.is_infinite() {
            return values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        }
        let direct = if p == 2.0 {
            accumulate(values, |a| a * a).sqrt()
        } else if p == 1.0 {
            accumulate(values, f64::abs)
        } else {
            accumulate(values, |a| a.abs().powf(p)).powf(p.recip())
        };
        if direct.is_finite() && (direct > 0.0 || values.iter().all(|&v| v == 0.0)) {
            return direct;
        }
        // Overflow or underflow of the powers: rescale by the largest magnitude.
        let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale == 0.0 || !scale.is_finite() {
            return scale;
        }
        let inner = accumulate(values, |a| (a.abs() / scale).powf(p));
        scale * inner.powf(p.recip())
    }
}

impl Default for NormOrder {
    fn default() -> Self {
        NormOrder::L2
    }
}

fn accumulate(values: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    let mut acc = CompensatedSum::new();
    for &v in values {
        acc.add(f(v));
    }
    acc.value()
}

/// Dense gradient with its ℓ_p norm cached.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector {
    values: Vec<f64>,
    p: NormOrder,
    norm: f64,
}

impl GradientVector {
    pub fn new(values: Vec<f64>, p: NormOrder) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("gradient dimension must be at least 1".into()));
        }
        let norm = p.norm(&values);
        Ok(Self { values, p, norm })
    }

    /// Shorthand for an ℓ_2 gradient.
    pub fn l2(values: Vec<f64>) -> Result<Self> {
        Self::new(values, NormOrder::L2)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn p(&self) -> NormOrder {
        self.p
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    /// Norm of the same values at another order, reusing the cache when possible.
    pub fn norm_at(&self, p: NormOrder) -> f64 {
        if p == self.p {
            self.norm
        } else {
            p.norm(&self.values)
        }
    }

    pub fn l2_norm_squared(&self) -> f64 {
        accumulate(&self.values, |a| a * a)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Width of the transmitted norm scalar.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum NormPrecision {
    #[default]
    F32,
    F64,
}

impl NormPrecision {
    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            32 => Ok(NormPrecision::F32),
            64 => Ok(NormPrecision::F64),
            other => Err(Error::Config(format!("b_pre must be 32 or 64, got {other}"))),
        }
    }

    pub fn bits(self) -> u32 {
        match self {
            NormPrecision::F32 => 32,
            NormPrecision::F64 => 64,
        }
    }

    /// Smallest value representable at this precision that is `>= x`.
    pub fn round_up(self, x: f64) -> f64 {
        match self {
            NormPrecision::F64 => x,
            NormPrecision::F32 => {
                let mut f = x as f32;
                if (f as f64) < x {
                    f = f.next_up();
                }
                f as f64
            }
        }
    }

    pub fn is_representable(self, x: f64) -> bool {
        match self {
            NormPrecision::F64 => true,
            NormPrecision::F32 => (x as f32) as f64 == x || x.is_nan(),
        }
    }
}

/// Codec family: a `b`-bit EWU quantizer or the 1-bit sign codec.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Codec {
    Ewu { bits: u8 },
    SignOnly,
}

impl Codec {
    pub const MIN_EWU_BITS: u8 = 2;
    pub const MAX_EWU_BITS: u8 = 32;

    pub fn ewu(bits: u8) -> Result<Self> {
        if (Self::MIN_EWU_BITS..=Self::MAX_EWU_BITS).contains(&bits) {
            Ok(Codec::Ewu { bits })
        } else if bits < Self::MIN_EWU_BITS {
            Err(Error::Config(format!(
                "EWU needs at least 2 bits (b = {bits} leaves s = 0 levels); use the sign codec"
            )))
        } else {
            Err(Error::Config(format!("EWU supports at most 32 bits, got {bits}")))
        }
    }

    /// Bits spent per coordinate.
    pub fn bits(self) -> u8 {
        match self {
            Codec::Ewu { bits } => bits,
            Codec::SignOnly => 1,
        }
    }

    /// Largest level index `s`. The sign codec uses a single unit level.
    pub fn max_level(self) -> u32 {
        match self {
            Codec::Ewu { bits } => level_count(bits),
            Codec::SignOnly => 1,
        }
    }
}

/// `s = 2^(b-1) - 1`.
pub fn level_count(bits: u8) -> u32 {
    debug_assert!((1..=32).contains(&bits));
    ((1u64 << (bits - 1)) - 1) as u32
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerConfig {
    pub codec: Codec,
    pub p: NormOrder,
    pub precision: NormPrecision,
}

impl QuantizerConfig {
    pub fn ewu(bits: u8) -> Result<Self> {
        Ok(Self { codec: Codec::ewu(bits)?, p: NormOrder::L2, precision: NormPrecision::F32 })
    }

    pub fn sign_only() -> Self {
        Self { codec: Codec::SignOnly, p: NormOrder::L1, precision: NormPrecision::F32 }
    }

    pub fn with_p(mut self, p: NormOrder) -> Self {
        self.p = p;
        self
    }

    pub fn with_precision(mut self, precision: NormPrecision) -> Self {
        self.precision = precision;
        self
    }

    pub fn levels(&self) -> u32 {
        self.codec.max_level()
    }
}

/// One worker's quantized gradient, the unit that goes on the wire.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedGradient {
    /// Transmitted magnitude scalar: the ℓ_p norm (rounded up to wire
    /// precision) for EWU frames, the mean absolute value for sign frames.
    pub norm: f64,
    /// `true` marks a negative coordinate.
    pub negative: Vec<bool>,
    /// Level index per coordinate, each in `0..=s`.
    pub levels: Vec<u32>,
    pub codec: Codec,
    pub precision: NormPrecision,
}

impl QuantizedGradient {
    pub fn dim(&self) -> usize {
        self.levels.len()
    }

    /// Exact size of the encoded frame before byte padding.
    pub fn encoded_bits(&self) -> u64 {
        encoded_bits(self.dim(), self.codec, self.precision)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        check_dim(self.levels.len(), self.negative.len())?;
        if self.levels.is_empty() {
            return Err(Error::InvalidInput("quantized gradient has no coordinates".into()));
        }
        if !(self.norm >= 0.0) || !self.norm.is_finite() {
            return Err(Error::InvalidInput(format!("norm must be finite and nonnegative, got {}", self.norm)));
        }
        let s = self.codec.max_level();
        if let Some((j, &l)) = self.levels.iter().enumerate().find(|(_, &l)| l > s) {
            return Err(Error::Encoding(format!("coordinate {j} has level {l} > s = {s}")));
        }
        if self.codec == Codec::SignOnly && self.levels.iter().any(|&l| l != 1) {
            return Err(Error::Encoding("sign frames carry unit levels only".into()));
        }
        Ok(())
    }
}

/// Draws an EWU quantization of `g`.
///
/// Coordinates sitting exactly on a grid point are deterministic and consume
/// no randomness. A zero vector (or one whose norm underflows the wire
/// precision) yields all-zero levels and a zero norm.
pub fn quantize<R: Rng + ?Sized>(
    g: &GradientVector,
    cfg: &QuantizerConfig,
    rng: &mut R,
) -> Result<QuantizedGradient> {
    let bits = match cfg.codec {
        Codec::Ewu { bits } => bits,
        Codec::SignOnly => {
            return Err(Error::Config("sign-only frames are produced by sign_quantize".into()))
        }
    };
    if bits < Codec::MIN_EWU_BITS || bits > Codec::MAX_EWU_BITS {
        return Err(Error::Config(format!("EWU bits must be in 2..=32, got {bits}")));
    }
    if !g.is_finite() {
        return Err(Error::InvalidInput("gradient has non-finite coordinates".into()));
    }
    let d = g.dim();
    let s = level_count(bits);
    let norm = cfg.precision.round_up(g.norm_at(cfg.p));
    if !norm.is_finite() {
        return Err(Error::InvalidInput(format!(
            "gradient norm {} is not representable in {} bits",
            g.norm_at(cfg.p),
            cfg.precision.bits()
        )));
    }
    let negative: Vec<bool> = g.values().iter().map(|&v| v < 0.0).collect();
    if norm == 0.0 {
        return Ok(QuantizedGradient {
            norm: 0.0,
            negative: vec![false; d],
            levels: vec![0; d],
            codec: cfg.codec,
            precision: cfg.precision,
        });
    }

    let s_f = s as f64;
    let levels = g
        .values()
        .iter()
        .map(|&v| {
            let scaled = ((s_f * v.abs()) / norm).min(s_f);
            let floor = scaled.floor();
            let p_up = scaled - floor;
            let l = floor as u32;
            if p_up > 0.0 && rng.random::<f64>() < p_up {
                l + 1
            } else {
                l
            }
        })
        .collect();
    Ok(QuantizedGradient { norm, negative, levels, codec: cfg.codec, precision: cfg.precision })
}

/// Reconstructs `norm · sign_j · level_j / s` per coordinate.
pub fn dequantize(q: &QuantizedGradient) -> Vec<f64> {
    let s = q.codec.max_level() as f64;
    q.levels
        .iter()
        .zip(&q.negative)
        .map(|(&l, &neg)| {
            let v = q.norm * (l as f64 / s);
            if neg { -v } else { v }
        })
        .collect()
}

/// Same as [`dequantize`] but wrapped as a gradient with ℓ_p norm cached.
pub fn dequantize_vector(q: &QuantizedGradient, p: NormOrder) -> Result<GradientVector> {
    GradientVector::new(dequantize(q), p)
}

/// 1-bit sign compression with mean-absolute-value scaling.
///
/// Every coordinate reconstructs to `(‖g‖_1 / d) · sign(g_j)`; zero
/// coordinates count as positive.
pub fn sign_quantize(g: &GradientVector, precision: NormPrecision) -> Result<QuantizedGradient> {
    if !g.is_finite() {
        return Err(Error::InvalidInput("gradient has non-finite coordinates".into()));
    }
    let d = g.dim();
    let scale = precision.round_up(g.norm_at(NormOrder::L1) / d as f64);
    if !scale.is_finite() {
        return Err(Error::InvalidInput("sign scale overflows the wire precision".into()));
    }
    Ok(QuantizedGradient {
        norm: scale,
        negative: g.values().iter().map(|&v| v < 0.0).collect(),
        levels: vec![1; d],
        codec: Codec::SignOnly,
        precision,
    })
}

/// Quantizes with whichever codec `cfg` names.
pub fn compress<R: Rng + ?Sized>(
    g: &GradientVector,
    cfg: &QuantizerConfig,
    rng: &mut R,
) -> Result<QuantizedGradient> {
    match cfg.codec {
        Codec::Ewu { .. } => quantize(g, cfg, rng),
        Codec::SignOnly => sign_quantize(g, cfg.precision),
    }
}

/// Upper bound `d ‖g‖_p² / (4 s²)` on the trace of the EWU quantization covariance.
pub fn variance_bound(cfg: &QuantizerConfig, g: &GradientVector) -> Result<f64> {
    let s = match cfg.codec {
        Codec::Ewu { .. } => cfg.levels() as f64,
        Codec::SignOnly => {
            return Err(Error::Config("the variance bound applies to EWU codecs only".into()))
        }
    };
    let norm = g.norm_at(cfg.p);
    Ok(g.dim() as f64 * norm * norm / (4.0 * s * s))
}

/// Root-mean-square of the workers' gradient norms, `Ḡ_t`.
pub fn aggregate_stats(gs: &[GradientVector], workers: usize) -> Result<f64> {
    if gs.is_empty() {
        return Err(Error::InvalidInput("no worker gradients".into()));
    }
    check_dim(workers, gs.len())?;
    Ok(rms_norm(gs.iter().map(GradientVector::norm)))
}

/// `sqrt(mean(n_i²))` over the given norms.
pub fn rms_norm(norms: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = CompensatedSum::new();
    let mut count = 0usize;
    for n in norms {
        acc.add(n * n);
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        (acc.value() / count as f64).sqrt()
    }
}

/// The two noise terms of the aggregated-gradient second-moment bound.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceBudget {
    /// `σ² / W`
    pub sampling_term: f64,
    /// `d Ḡ_t² / (4 W (2^(b_t-1) - 1)²)`
    pub quantization_term: f64,
}

impl VarianceBudget {
    /// `bits` may be fractional or `+∞` (no quantization noise).
    pub fn new(sigma: f64, workers: usize, dim: usize, gbar: f64, bits: f64) -> Self {
        let w = workers as f64;
        let s = continuous_levels(bits);
        let quantization_term = if s.is_infinite() {
            0.0
        } else {
            dim as f64 * gbar * gbar / (4.0 * w * s * s)
        };
        Self { sampling_term: sigma * sigma / w, quantization_term }
    }

    pub fn total(&self) -> f64 {
        self.sampling_term + self.quantization_term
    }
}

/// `2^(b-1) - 1` for real-valued `b`.
pub fn continuous_levels(bits: f64) -> f64 {
    if bits.is_infinite() {
        f64::INFINITY
    } else {
        ((bits - 1.0) * std::f64::consts::LN_2).exp_m1()
    }
}
