//! Integer-arithmetic inference path.
//!
//! [`lower`] converts a fully quantized checkpoint into integer weight
//! arrays with their scales; [`int_forward`] then runs the network with
//! integer multiply-accumulates in a 64-bit accumulator, rescaling to
//! float only between layers. Biases are stored as integers at
//! `scale/2^16`, so the only difference from the fake-quantized float
//! path is float summation order.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::gaitnet::{Embeddings, ModelSpec, ModelState};
use crate::quant::QuantConfig;
use crate::synthdata::SilhouetteSequence;
use crate::tensor::Tensor;

/// Fixed-point shift for pre-scaled integer biases.
pub const BIAS_SHIFT: u32 = 16;
/// Accumulators must stay below this bound so the bias shift cannot
/// overflow i64.
const ACC_LIMIT: i64 = 1 << 46;

/// Integer quantization of one activation tensor: `round(clamp(x/v))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActQuant {
    pub step: f64,
    pub r1: i64,
    pub r2: i64,
}

impl ActQuant {
    fn from_config(cfg: &QuantConfig) -> Self {
        ActQuant {
            step: cfg.step,
            r1: cfg.r1,
            r2: cfg.r2,
        }
    }

    fn quantize(&self, x: &[f64]) -> Vec<i32> {
        let (r1, r2) = (self.r1 as f64, self.r2 as f64);
        x.iter()
            .map(|&v| {
                let u = (v / self.step).clamp(r1, r2);
                fmath::round(u) as i32
            })
            .collect()
    }
}

/// One lowered computing unit: integer weights in `[r1, r2]`, scales,
/// and the pre-scaled integer bias (empty when the layer has none).
#[derive(Debug, Clone, PartialEq)]
pub struct IntLayer {
    pub name: String,
    /// Row-major integer weights in the original layout.
    pub weights: Vec<i32>,
    pub shape: Vec<usize>,
    pub weight_scale: f64,
    pub input_scale: f64,
    /// Bias at scale `weight_scale·input_scale/2^BIAS_SHIFT`.
    pub bias_q: Vec<i64>,
    pub r1: i64,
    pub r2: i64,
}

impl IntLayer {
    /// Combined output scale before the bias shift.
    pub fn out_scale(&self) -> f64 {
        self.weight_scale * self.input_scale
    }

    /// `weights · weight_scale`, the dequantized weight tensor.
    pub fn dequantize_weights(&self) -> Tensor {
        let data: Vec<f64> = self
            .weights
            .iter()
            .map(|&q| q as f64 * self.weight_scale)
            .collect();
        Tensor::from_vec(self.shape.clone(), data)
    }
}

/// The whole lowered network plus the activation quantizers between
/// layers. Structure mirrors the float model.
#[derive(Debug, Clone)]
pub struct LoweredModel {
    pub spec: ModelSpec,
    pub conv1: IntLayer,
    pub conv2: IntLayer,
    pub heads: Vec<IntLayer>,
    pub conv2_act: ActQuant,
    pub heads_act: ActQuant,
}

fn quantize_weights(w: &Tensor, cfg: &QuantConfig, name: &str) -> Result<(Vec<i32>, f64)> {
    if cfg.is_full_precision() {
        return Err(Error::Lowering(format!(
            "layer {name} is full precision; nothing to lower"
        )));
    }
    cfg.validate()?;
    let (r1, r2) = (cfg.r1 as f64, cfg.r2 as f64);
    let q: Vec<i32> = w
        .data()
        .iter()
        .map(|&v| fmath::round((v / cfg.step).clamp(r1, r2)) as i32)
        .collect();
    Ok((q, cfg.step))
}

fn lower_bias(bias: &Tensor, out_scale: f64) -> Vec<i64> {
    let s = out_scale / (1u64 << BIAS_SHIFT) as f64;
    bias.data().iter().map(|&b| fmath::round(b / s) as i64).collect()
}

/// Lower a trained, fully quantized model to integer layers.
pub fn lower(state: &ModelState) -> Result<LoweredModel> {
    let net = &state.net;
    let spec = net.spec.clone();
    let qs = net.quantizer_configs(&state.params);
    // fixed order: conv1.wq, conv2.aq, conv2.wq, heads.aq, heads.{j}.wq
    let expected = 4 + spec.parts;
    if qs.len() != expected {
        return Err(Error::Lowering(format!(
            "expected {expected} quantizers on a fully quantized model, found {}",
            qs.len()
        )));
    }
    if !net.steps_initialized() {
        return Err(Error::Lowering(
            "quantizer steps are uninitialized; train before lowering".into(),
        ));
    }
    let p = |name: &str| {
        state
            .params
            .find(name)
            .map(|id| state.params.value(id).clone())
            .ok_or_else(|| Error::Lowering(format!("missing parameter {name}")))
    };

    let (w1, s1) = quantize_weights(&p("conv1.weight")?, &qs[0], "conv1")?;
    let conv2_act = ActQuant::from_config(&qs[1]);
    let (w2, s2) = quantize_weights(&p("conv2.weight")?, &qs[2], "conv2")?;
    let heads_act = ActQuant::from_config(&qs[3]);

    let conv1 = IntLayer {
        name: "conv1".into(),
        shape: p("conv1.weight")?.shape().to_vec(),
        weights: w1,
        weight_scale: s1,
        input_scale: 1.0, // binary silhouettes are exact integers
        bias_q: lower_bias(&p("conv1.bias")?, s1 * 1.0),
        r1: qs[0].r1,
        r2: qs[0].r2,
    };
    let conv2 = IntLayer {
        name: "conv2".into(),
        shape: p("conv2.weight")?.shape().to_vec(),
        weights: w2,
        weight_scale: s2,
        input_scale: conv2_act.step,
        bias_q: lower_bias(&p("conv2.bias")?, s2 * conv2_act.step),
        r1: qs[2].r1,
        r2: qs[2].r2,
    };
    let mut heads = Vec::with_capacity(spec.parts);
    for j in 0..spec.parts {
        let cfg = &qs[4 + j];
        let w = p(&format!("heads.{j}.weight"))?;
        let (wq, ws) = quantize_weights(&w, cfg, &format!("heads.{j}"))?;
        heads.push(IntLayer {
            name: format!("heads.{j}"),
            shape: w.shape().to_vec(),
            weights: wq,
            weight_scale: ws,
            input_scale: heads_act.step,
            bias_q: Vec::new(),
            r1: cfg.r1,
            r2: cfg.r2,
        });
    }
    let model = LoweredModel {
        spec,
        conv1,
        conv2,
        heads,
        conv2_act,
        heads_act,
    };
    check_accumulator_bounds(&model)?;
    check_ranges(&model)?;
    Ok(model)
}

fn check_ranges(m: &LoweredModel) -> Result<()> {
    for layer in core::iter::once(&m.conv1)
        .chain(core::iter::once(&m.conv2))
        .chain(m.heads.iter())
    {
        for &q in &layer.weights {
            if (q as i64) < layer.r1 || (q as i64) > layer.r2 {
                return Err(Error::Lowering(format!(
                    "layer {}: weight {q} outside [{}, {}]",
                    layer.name, layer.r1, layer.r2
                )));
            }
        }
    }
    Ok(())
}

/// Worst-case |accumulator| per output unit must fit the bias shift.
fn check_accumulator_bounds(m: &LoweredModel) -> Result<()> {
    let bound = |layer: &IntLayer, act_max: i64, fan_in: usize| -> i64 {
        // max over output units of sum |w| times the activation bound
        let units = layer.weights.len() / fan_in.max(1);
        let mut worst: i64 = 0;
        for u in 0..units {
            let s: i64 = layer.weights[u * fan_in..(u + 1) * fan_in]
                .iter()
                .map(|&w| (w as i64).abs())
                .sum();
            worst = worst.max(s);
        }
        worst * act_max
    };
    let f = 9; // 3x3 kernels
    let c1_fan = m.conv1.shape[1] * f;
    let c2_fan = m.conv2.shape[1] * f;
    let checks = [
        (bound(&m.conv1, 1, c1_fan), "conv1"),
        (bound(&m.conv2, m.conv2_act.r2, c2_fan), "conv2"),
    ];
    for (b, name) in checks {
        if b >= ACC_LIMIT {
            return Err(Error::Numeric(format!(
                "{name}: accumulator bound {b} exceeds the safe limit"
            )));
        }
    }
    for h in &m.heads {
        // heads are [in, out]; bound per output column
        let (ins, outs) = (h.shape[0], h.shape[1]);
        let mut worst: i64 = 0;
        for o in 0..outs {
            let mut s: i64 = 0;
            for i in 0..ins {
                s += (h.weights[i * outs + o] as i64).abs();
            }
            worst = worst.max(s);
        }
        if worst * m.heads_act.r2 >= ACC_LIMIT {
            return Err(Error::Numeric(format!(
                "{}: accumulator bound exceeds the safe limit",
                h.name
            )));
        }
    }
    Ok(())
}

// ── integer kernels ──────────────────────────────────────────────────

/// 3x3 same-padding integer convolution, accumulating in i64 and
/// rescaling (with the shifted bias) to f64.
fn int_conv3x3(
    x: &[i32],
    layer: &IntLayer,
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
) -> Result<Vec<f64>> {
    let co = layer.shape[0];
    debug_assert_eq!(layer.shape[1], ci);
    let plane = h * w;
    let scale = layer.out_scale();
    let bias_scale = 1.0 / (1u64 << BIAS_SHIFT) as f64;
    let mut out = vec![0.0; n * co * plane];
    for nn in 0..n {
        let xb = &x[nn * ci * plane..(nn + 1) * ci * plane];
        for o in 0..co {
            let base = (nn * co + o) * plane;
            let bias = if layer.bias_q.is_empty() {
                0i64
            } else {
                layer.bias_q[o]
            };
            for y in 0..h {
                for xc in 0..w {
                    let mut acc: i64 = 0;
                    for c in 0..ci {
                        let xp = &xb[c * plane..(c + 1) * plane];
                        let wk = &layer.weights[(o * ci + c) * 9..(o * ci + c) * 9 + 9];
                        for fy in 0..3usize {
                            let iy = y + fy;
                            if iy < 1 || iy > h {
                                continue;
                            }
                            let iy = iy - 1;
                            for fx in 0..3usize {
                                let ix = xc + fx;
                                if ix < 1 || ix > w {
                                    continue;
                                }
                                acc += wk[fy * 3 + fx] as i64 * xp[iy * w + ix - 1] as i64;
                            }
                        }
                    }
                    if acc.abs() >= ACC_LIMIT {
                        return Err(Error::Numeric(format!(
                            "{}: accumulator overflow at output ({o},{y},{xc})",
                            layer.name
                        )));
                    }
                    out[base + y * w + xc] = (acc as f64 + bias as f64 * bias_scale) * scale;
                }
            }
        }
    }
    Ok(out)
}

/// Integer matmul `[n, in] × [in, out]`, rescaled to f64.
fn int_linear(x: &[i32], layer: &IntLayer, n: usize) -> Result<Vec<f64>> {
    let (ins, outs) = (layer.shape[0], layer.shape[1]);
    let scale = layer.out_scale();
    let mut out = vec![0.0; n * outs];
    for r in 0..n {
        for o in 0..outs {
            let mut acc: i64 = 0;
            for i in 0..ins {
                acc += x[r * ins + i] as i64 * layer.weights[i * outs + o] as i64;
            }
            if acc.abs() >= ACC_LIMIT {
                return Err(Error::Numeric(format!(
                    "{}: accumulator overflow",
                    layer.name
                )));
            }
            out[r * outs + o] = acc as f64 * scale;
        }
    }
    Ok(out)
}

fn relu_inplace(x: &mut [f64]) {
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn maxpool2(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * ho * wo];
    for pl in 0..planes {
        let xp = &x[pl * h * w..(pl + 1) * h * w];
        for y in 0..ho {
            for xc in 0..wo {
                let mut best = xp[2 * y * w + 2 * xc];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let v = xp[(2 * y + dy) * w + 2 * xc + dx];
                    if v > best {
                        best = v;
                    }
                }
                out[pl * ho * wo + y * wo + xc] = best;
            }
        }
    }
    out
}

fn horizontal_pool(x: &[f64], b: usize, c: usize, h: usize, w: usize, parts: usize) -> Vec<f64> {
    let hs = h / parts;
    let mut out = vec![0.0; b * parts * c];
    for ib in 0..b {
        for ic in 0..c {
            let plane = &x[(ib * c + ic) * h * w..(ib * c + ic + 1) * h * w];
            for sp in 0..parts {
                let strip = &plane[sp * hs * w..(sp + 1) * hs * w];
                let mut mx = strip[0];
                let mut sum = 0.0;
                for &v in strip {
                    if v > mx {
                        mx = v;
                    }
                    sum += v;
                }
                out[(ib * parts + sp) * c + ic] = mx + sum / strip.len() as f64;
            }
        }
    }
    out
}

/// Run the lowered network on binary silhouette sequences.
pub fn int_forward(model: &LoweredModel, seqs: &[SilhouetteSequence]) -> Result<Embeddings> {
    let spec = &model.spec;
    let (t, h, w) = (spec.frames, spec.height, spec.width);
    let (c1, c2) = spec.channels;
    let mut values = Vec::with_capacity(seqs.len() * spec.embedding_dim());
    let mut labels = Vec::with_capacity(seqs.len());
    for seq in seqs {
        if seq.t != t || seq.h != h || seq.w != w {
            return Err(Error::Dimension(format!(
                "sequence geometry {}x{}x{} does not match model {}x{}x{}",
                seq.t, seq.h, seq.w, t, h, w
            )));
        }
        for &px in &seq.frames {
            if px > 1 {
                return Err(Error::Numeric("input pixels must be binary".into()));
            }
        }
        labels.push(seq.identity);
        // conv1 on exact binary integers
        let x0: Vec<i32> = seq.frames.iter().map(|&px| px as i32).collect();
        let mut a1 = int_conv3x3(&x0, &model.conv1, t, 1, h, w)?;
        relu_inplace(&mut a1);
        let a1 = maxpool2(&a1, t * c1, h, w);
        let (h2, w2) = (h / 2, w / 2);
        // quantize, conv2
        let x1 = model.conv2_act.quantize(&a1);
        let mut a2 = int_conv3x3(&x1, &model.conv2, t, c1, h2, w2)?;
        relu_inplace(&mut a2);
        let a2 = maxpool2(&a2, t * c2, h2, w2);
        let (h4, w4) = (h2 / 2, w2 / 2);
        // temporal max over frames
        let plane = c2 * h4 * w4;
        let mut pooled_t = vec![f64::NEG_INFINITY; plane];
        for ft in 0..t {
            for (acc, &v) in pooled_t.iter_mut().zip(&a2[ft * plane..(ft + 1) * plane]) {
                if v > *acc {
                    *acc = v;
                }
            }
        }
        // part pooling, activation quant, integer heads
        let pooled = horizontal_pool(&pooled_t, 1, c2, h4, w4, spec.parts);
        let xq = model.heads_act.quantize(&pooled);
        for (j, head) in model.heads.iter().enumerate() {
            let part = &xq[j * c2..(j + 1) * c2];
            let e = int_linear(part, head, 1)?;
            values.extend_from_slice(&e);
        }
    }
    Ok(Embeddings {
        values: Tensor::from_vec(
            vec![seqs.len(), spec.parts, spec.part_dim],
            values,
        ),
        labels,
    })
}
