//! Uniform fake-quantization with a learnable step size.
//!
//! The forward path is `x̂ = ⌊clamp(x/v, r1, r2)⌉ · v` (round half away
//! from zero). Two backward rules are provided: the straight-through
//! estimator and the soft quantizer, whose analytic derivative
//! `dθ_k/dx = (k/2)·sech²(k·d)/tanh(k/2)` replaces the pass-through
//! inside the clamp range. The step size learns through the LSQ rule,
//! scaled by `1/√(n_elements·r2)`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::tensor::{CustomOp, Tensor};

/// Bit-width of a quantizer, or the full-precision sentinel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum BitWidth {
    FullPrecision,
    Bits(u8),
}

impl BitWidth {
    /// Effective width for cost accounting (full precision counts as 32).
    pub fn effective(&self) -> u8 {
        match self {
            BitWidth::FullPrecision => 32,
            BitWidth::Bits(b) => *b,
        }
    }
}

/// Backward rule selector.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum GradMode {
    Ste,
    Soft { k: f64 },
}

/// Per-tensor quantization policy: bit-width, signedness, clamp range
/// `[r1, r2]`, learnable step `v`, and the backward rule.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QuantConfig {
    pub bits: BitWidth,
    pub signed: bool,
    pub r1: i64,
    pub r2: i64,
    pub step: f64,
    pub grad_mode: GradMode,
}

impl QuantConfig {
    pub fn unsigned(bits: u8, step: f64) -> Result<Self> {
        check_bits(bits)?;
        let cfg = QuantConfig {
            bits: BitWidth::Bits(bits),
            signed: false,
            r1: 0,
            r2: (1i64 << bits) - 1,
            step,
            grad_mode: GradMode::Ste,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn signed(bits: u8, step: f64) -> Result<Self> {
        check_bits(bits)?;
        let cfg = QuantConfig {
            bits: BitWidth::Bits(bits),
            signed: true,
            r1: -(1i64 << (bits - 1)),
            r2: (1i64 << (bits - 1)) - 1,
            step,
            grad_mode: GradMode::Ste,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn full_precision() -> Self {
        QuantConfig {
            bits: BitWidth::FullPrecision,
            signed: true,
            r1: 0,
            r2: 0,
            step: 1.0,
            grad_mode: GradMode::Ste,
        }
    }

    pub fn is_full_precision(&self) -> bool {
        self.bits == BitWidth::FullPrecision
    }

    pub fn with_grad_mode(mut self, mode: GradMode) -> Self {
        self.grad_mode = mode;
        self
    }

    pub fn with_step(mut self, step: f64) -> Self {
        self.step = step;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_full_precision() {
            return Ok(());
        }
        let bits = self.bits.effective();
        check_bits(bits)?;
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(Error::Config(format!(
                "quantizer step must be positive and finite, got {}",
                self.step
            )));
        }
        let (er1, er2) = if self.signed {
            (-(1i64 << (bits - 1)), (1i64 << (bits - 1)) - 1)
        } else {
            (0, (1i64 << bits) - 1)
        };
        if self.r1 != er1 || self.r2 != er2 {
            return Err(Error::Config(format!(
                "clamp range [{}, {}] inconsistent with {} {}-bit quantizer",
                self.r1,
                self.r2,
                if self.signed { "signed" } else { "unsigned" },
                bits
            )));
        }
        if let GradMode::Soft { k } = self.grad_mode {
            if !(k >= 1.0) {
                return Err(Error::Config(format!("soft quantizer requires k >= 1, got {k}")));
            }
        }
        Ok(())
    }

    /// Gradient scale for the step size: `1/√(n_elements·r2)`.
    pub fn grad_scale(&self, n_elements: usize) -> f64 {
        1.0 / fmath::sqrt(n_elements as f64 * self.r2 as f64)
    }
}

fn check_bits(bits: u8) -> Result<()> {
    if !(2..=32).contains(&bits) {
        return Err(Error::Config(format!(
            "bit-width must be in 2..=32, got {bits}"
        )));
    }
    Ok(())
}

// ── pure quantizer math ──────────────────────────────────────────────

#[inline]
fn clamp(u: f64, r1: f64, r2: f64) -> f64 {
    if u < r1 {
        r1
    } else if u > r2 {
        r2
    } else {
        u
    }
}

/// `x̂ = ⌊clamp(x/v, r1, r2)⌉ · v`, elementwise. Full-precision configs
/// return the input unchanged.
pub fn fake_quantize(x: &Tensor, cfg: &QuantConfig) -> Result<Tensor> {
    if cfg.is_full_precision() {
        return Ok(x.clone());
    }
    cfg.validate()?;
    let v = cfg.step;
    let (r1, r2) = (cfg.r1 as f64, cfg.r2 as f64);
    let mut out = Vec::with_capacity(x.numel());
    for &xi in x.data() {
        if xi.is_nan() {
            return Err(Error::Numeric("NaN input to fake_quantize".into()));
        }
        out.push(fmath::round(clamp(xi / v, r1, r2)) * v);
    }
    Ok(Tensor::from_vec(x.shape().to_vec(), out))
}

/// STE backward: pass the gradient where `r1 < x/v < r2`, zero elsewhere.
pub fn ste_backward(g_out: &Tensor, x: &Tensor, cfg: &QuantConfig) -> Result<Tensor> {
    if g_out.shape() != x.shape() {
        return Err(Error::Dimension("ste_backward: shape mismatch".into()));
    }
    let v = cfg.step;
    let (r1, r2) = (cfg.r1 as f64, cfg.r2 as f64);
    let out: Vec<f64> = g_out
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &xi)| {
            let u = xi / v;
            if u > r1 && u < r2 {
                g
            } else {
                0.0
            }
        })
        .collect();
    Ok(Tensor::from_vec(x.shape().to_vec(), out))
}

/// Soft quantizer `θ_k(x) = ⌊x⌋ + ½·tanh(k·d)/tanh(k/2) + ½` with
/// `d = x − ⌊x⌋ − ½`.
pub fn soft_theta(x: f64, k: f64) -> Result<f64> {
    if !(k >= 1.0) {
        return Err(Error::Config(format!("soft quantizer requires k >= 1, got {k}")));
    }
    if !x.is_finite() {
        return Err(Error::Numeric("non-finite input to soft_theta".into()));
    }
    let fl = fmath::floor(x);
    let d = x - fl - 0.5;
    Ok(fl + 0.5 * fmath::tanh(k * d) / fmath::tanh(k / 2.0) + 0.5)
}

/// Analytic derivative `dθ_k/dx = (k/2)·sech²(k·d)/tanh(k/2)`.
pub fn soft_theta_deriv(x: f64, k: f64) -> Result<f64> {
    if !(k >= 1.0) {
        return Err(Error::Config(format!("soft quantizer requires k >= 1, got {k}")));
    }
    let d = x - fmath::floor(x) - 0.5;
    Ok(0.5 * k * fmath::sech2(k * d) / fmath::tanh(k / 2.0))
}

/// Soft backward: inside `(r1, r2)` the gradient is scaled by the
/// analytic `dθ_k/dx` evaluated at `x/v`; outside it is zero.
pub fn soft_backward(g_out: &Tensor, x: &Tensor, cfg: &QuantConfig) -> Result<Tensor> {
    if g_out.shape() != x.shape() {
        return Err(Error::Dimension("soft_backward: shape mismatch".into()));
    }
    let k = match cfg.grad_mode {
        GradMode::Soft { k } => k,
        GradMode::Ste => {
            return Err(Error::Usage("soft_backward on an STE-mode config".into()));
        }
    };
    if !(k >= 1.0) {
        return Err(Error::Config(format!("soft quantizer requires k >= 1, got {k}")));
    }
    let v = cfg.step;
    let (r1, r2) = (cfg.r1 as f64, cfg.r2 as f64);
    let scale = 0.5 * k / fmath::tanh(k / 2.0);
    let out: Vec<f64> = g_out
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &xi)| {
            let u = xi / v;
            if u > r1 && u < r2 {
                let d = u - fmath::floor(u) - 0.5;
                g * scale * fmath::sech2(k * d)
            } else {
                0.0
            }
        })
        .collect();
    Ok(Tensor::from_vec(x.shape().to_vec(), out))
}

/// LSQ gradient of the loss w.r.t. the step size: per element
/// `⌊x/v⌉ − x/v` in range, `r1` below, `r2` above; weighted by the
/// upstream gradient, summed, and multiplied by `grad_scale`.
pub fn step_grad(g_out: &Tensor, x: &Tensor, cfg: &QuantConfig) -> Result<f64> {
    if g_out.shape() != x.shape() {
        return Err(Error::Dimension("step_grad: shape mismatch".into()));
    }
    let v = cfg.step;
    let (r1, r2) = (cfg.r1 as f64, cfg.r2 as f64);
    let mut total = 0.0;
    for (&g, &xi) in g_out.data().iter().zip(x.data()) {
        let u = xi / v;
        let contribution = if u <= r1 {
            r1
        } else if u >= r2 {
            r2
        } else {
            fmath::round(u) - u
        };
        total += g * contribution;
    }
    Ok(total * cfg.grad_scale(x.numel()))
}

// ── tape integration ─────────────────────────────────────────────────

/// Fake-quantization as a tape op with inputs `[x, v]`. The backward rule
/// for `x` follows `grad_mode`; the step gradient follows the LSQ rule.
/// With `soft_forward` the forward rounds through `θ_k` instead of the
/// hard round (off by default).
pub struct FakeQuantOp {
    pub bits: BitWidth,
    pub signed: bool,
    pub r1: i64,
    pub r2: i64,
    pub grad_mode: GradMode,
    pub soft_forward: bool,
}

impl FakeQuantOp {
    pub fn from_config(cfg: &QuantConfig, soft_forward: bool) -> Self {
        FakeQuantOp {
            bits: cfg.bits,
            signed: cfg.signed,
            r1: cfg.r1,
            r2: cfg.r2,
            grad_mode: cfg.grad_mode,
            soft_forward,
        }
    }

    fn config_with_step(&self, step: f64) -> QuantConfig {
        QuantConfig {
            bits: self.bits,
            signed: self.signed,
            r1: self.r1,
            r2: self.r2,
            step,
            grad_mode: self.grad_mode,
        }
    }

    fn step_of(&self, inputs: &[&Tensor]) -> Result<f64> {
        if inputs.len() != 2 {
            return Err(Error::Usage("fake_quantize op expects inputs [x, v]".into()));
        }
        let v = inputs[1].item()?;
        if !(v > 0.0) {
            return Err(Error::Config(format!("quantizer step must be positive, got {v}")));
        }
        Ok(v)
    }
}

impl CustomOp for FakeQuantOp {
    fn name(&self) -> &str {
        "fake_quantize"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let v = self.step_of(inputs)?;
        let cfg = self.config_with_step(v);
        let x = inputs[0];
        match (self.soft_forward, self.grad_mode) {
            (true, GradMode::Soft { k }) => {
                let (r1, r2) = (cfg.r1 as f64, cfg.r2 as f64);
                let mut out = Vec::with_capacity(x.numel());
                for &xi in x.data() {
                    if xi.is_nan() {
                        return Err(Error::Numeric("NaN input to fake_quantize".into()));
                    }
                    out.push(soft_theta(clamp(xi / v, r1, r2), k)? * v);
                }
                Ok(Tensor::from_vec(x.shape().to_vec(), out))
            }
            _ => fake_quantize(x, &cfg),
        }
    }

    fn backward(
        &self,
        grad_out: &[f64],
        inputs: &[&Tensor],
        _output: &Tensor,
    ) -> Vec<Option<Tensor>> {
        let v = match self.step_of(inputs) {
            Ok(v) => v,
            Err(_) => return vec![None, None],
        };
        let cfg = self.config_with_step(v);
        let x = inputs[0];
        let g = Tensor::from_vec(x.shape().to_vec(), grad_out.to_vec());
        let gx = match cfg.grad_mode {
            GradMode::Ste => ste_backward(&g, x, &cfg),
            GradMode::Soft { .. } => soft_backward(&g, x, &cfg),
        };
        let gv = step_grad(&g, x, &cfg);
        vec![
            gx.ok(),
            gv.ok().map(Tensor::scalar),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_follow_bit_width() {
        let u8b = QuantConfig::unsigned(8, 0.1).unwrap();
        assert_eq!((u8b.r1, u8b.r2), (0, 255));
        let s4 = QuantConfig::signed(4, 0.1).unwrap();
        assert_eq!((s4.r1, s4.r2), (-8, 7));
        assert!(QuantConfig::unsigned(1, 0.1).is_err());
        assert!(QuantConfig::unsigned(8, 0.0).is_err());
    }

    #[test]
    fn fake_quantize_matches_hand_examples() {
        let cfg = QuantConfig::unsigned(8, 0.1).unwrap();
        let x = Tensor::new(&[3], vec![0.0, 0.26, 30.0]).unwrap();
        let q = fake_quantize(&x, &cfg).unwrap();
        assert_eq!(q.data()[0], 0.0);
        assert!((q.data()[1] - 0.3).abs() < 1e-12); // round(2.6) = 3
        assert!((q.data()[2] - 25.5).abs() < 1e-12); // clamps to 255
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        let cfg = QuantConfig::signed(8, 1.0).unwrap();
        let x = Tensor::new(&[4], vec![0.5, 1.5, -0.5, -1.5]).unwrap();
        let q = fake_quantize(&x, &cfg).unwrap();
        assert_eq!(q.data(), &[1.0, 2.0, -1.0, -2.0]);
    }

    #[test]
    fn nan_input_is_a_numeric_error() {
        let cfg = QuantConfig::unsigned(8, 0.1).unwrap();
        let x = Tensor::from_vec(alloc::vec![1], alloc::vec![f64::NAN]);
        assert!(matches!(fake_quantize(&x, &cfg), Err(Error::Numeric(_))));
    }
}
