//! Part-based gait embedding network.
//!
//! The model composes a two-block convolutional backbone (shared across
//! frames), temporal max pooling over the frame axis, part-based
//! horizontal pooling (strip max + mean), per-part linear heads producing
//! the embeddings, and a BNNeck (batch norm + bias-free classifier)
//! producing logits. Convolution and head weights plus the activations
//! feeding them carry optional fake-quantizers with learnable steps.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::quant::{BitWidth, FakeQuantOp, GradMode, QuantConfig};
use crate::rng::SplitMix64;
use crate::synthdata::SilhouetteSequence;
use crate::tensor::{Tape, Tensor, TensorRef};

pub const BN_MOMENTUM: f64 = 0.1;

// ── parameter store ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    QuantStep,
    BnGamma,
    BnBeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Flat, order-stable parameter storage. Layers hold [`ParamId`] handles;
/// the optimizer iterates entries by index.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, kind: ParamKind, value: Tensor) -> ParamId {
        debug_assert!(
            self.find(name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name: name.to_string(),
            kind,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "parameter {} has shape {:?}, refusing {:?}",
                entry.name,
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = value;
        Ok(())
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry_mut(&mut self, index: usize) -> &mut ParamEntry {
        &mut self.entries[index]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }
}

/// Tape leaves for every parameter, in store order.
pub struct BoundParams {
    refs: Vec<TensorRef>,
}

impl BoundParams {
    pub fn bind(store: &ParamStore, tape: &mut Tape, trainable: bool) -> Self {
        let refs = store
            .entries()
            .iter()
            .map(|e| tape.leaf(e.value.clone(), trainable))
            .collect();
        BoundParams { refs }
    }

    pub fn get(&self, id: ParamId) -> TensorRef {
        self.refs[id.0]
    }

    /// Gradients per parameter after backward, in store order.
    pub fn grads<'t>(&self, tape: &'t Tape) -> Vec<Option<&'t Tensor>> {
        self.refs.iter().map(|&r| tape.grad(r)).collect()
    }
}

// ── quantizer attachment ─────────────────────────────────────────────

/// A fake-quantizer attached to one tensor (a weight or an activation).
/// The step size lives in the param store; `initialized` flips once the
/// step has been calibrated from data.
#[derive(Debug, Clone)]
pub struct Quantizer {
    pub cfg: QuantConfig,
    pub step: ParamId,
    pub initialized: bool,
}

impl Quantizer {
    fn new(store: &mut ParamStore, name: &str, cfg: QuantConfig) -> Result<Self> {
        cfg.validate()?;
        let step = store.register(
            &format!("{name}.step"),
            ParamKind::QuantStep,
            Tensor::scalar(1.0),
        );
        Ok(Quantizer {
            cfg,
            step,
            initialized: false,
        })
    }

    /// Step initialization `v0 = 2·mean(|x|)/√r2`, clamped away from zero.
    fn initialize(&mut self, store: &mut ParamStore, mean_abs: f64) -> Result<()> {
        let v0 = (2.0 * mean_abs / fmath::sqrt(self.cfg.r2 as f64)).max(1e-8);
        store.set_value(self.step, Tensor::scalar(v0))?;
        self.initialized = true;
        Ok(())
    }

    fn apply(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: TensorRef,
        soft_forward: bool,
    ) -> Result<TensorRef> {
        let op = FakeQuantOp::from_config(&self.cfg, soft_forward);
        tape.apply_custom(Box::new(op), &[x, bound.get(self.step)])
    }

    /// Config with the live step value filled in (for serialization and
    /// the integer-lowering path).
    pub fn config_with_step(&self, store: &ParamStore) -> QuantConfig {
        let mut cfg = self.cfg.clone();
        cfg.step = store.value(self.step).data()[0];
        cfg
    }
}

// ── model spec ───────────────────────────────────────────────────────

/// Quantization policy applied to the network's computing units.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QuantPolicy {
    pub weight_bits: BitWidth,
    pub act_bits: BitWidth,
    /// Keep the first (conv1) and last (heads) layers at >= 8 bits.
    pub first_last_8bit: bool,
    /// Route the soft quantizer through the forward pass too, not just
    /// the backward rule.
    pub soft_forward: bool,
}

impl QuantPolicy {
    pub fn full_precision() -> Self {
        QuantPolicy {
            weight_bits: BitWidth::FullPrecision,
            act_bits: BitWidth::FullPrecision,
            first_last_8bit: false,
            soft_forward: false,
        }
    }

    pub fn uniform(weight_bits: u8, act_bits: u8) -> Self {
        QuantPolicy {
            weight_bits: BitWidth::Bits(weight_bits),
            act_bits: BitWidth::Bits(act_bits),
            first_last_8bit: false,
            soft_forward: false,
        }
    }

    fn boundary_bits(&self, bits: BitWidth) -> BitWidth {
        match bits {
            BitWidth::Bits(b) if self.first_last_8bit && b < 8 => BitWidth::Bits(8),
            other => other,
        }
    }

    /// Weight bits for (conv1, conv2, heads).
    pub fn layer_weight_bits(&self) -> [BitWidth; 3] {
        [
            self.boundary_bits(self.weight_bits),
            self.weight_bits,
            self.boundary_bits(self.weight_bits),
        ]
    }

    /// Activation bits for (conv1 input, conv2 input, heads input).
    /// The binary silhouette input itself is never re-quantized, so the
    /// first entry only matters for cost accounting.
    pub fn layer_act_bits(&self) -> [BitWidth; 3] {
        [
            self.boundary_bits(self.act_bits),
            self.act_bits,
            self.boundary_bits(self.act_bits),
        ]
    }
}

/// Architecture description; everything needed to rebuild the network.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: (usize, usize),
    pub parts: usize,
    pub part_dim: usize,
    pub n_classes: usize,
    pub quant: QuantPolicy,
}

impl ModelSpec {
    pub fn desk_default(n_classes: usize, frames: usize, height: usize, width: usize) -> Self {
        ModelSpec {
            frames,
            height,
            width,
            channels: (8, 16),
            parts: 4,
            part_dim: 32,
            n_classes,
            quant: QuantPolicy::full_precision(),
        }
    }

    pub fn with_quant(mut self, quant: QuantPolicy) -> Self {
        self.quant = quant;
        self
    }

    /// Feature height/width after the two pooling stages.
    pub fn pooled_hw(&self) -> (usize, usize) {
        (self.height / 4, self.width / 4)
    }

    pub fn embedding_dim(&self) -> usize {
        self.parts * self.part_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(Error::Config(format!(
                "height and width must be divisible by 4, got {}x{}",
                self.height, self.width
            )));
        }
        let (hp, _) = self.pooled_hw();
        if self.parts == 0 || hp % self.parts != 0 {
            return Err(Error::Config(format!(
                "{} parts do not divide pooled height {hp}",
                self.parts
            )));
        }
        if self.channels.0 == 0 || self.channels.1 == 0 || self.part_dim == 0 {
            return Err(Error::Config("zero-sized layer in model spec".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.frames == 0 {
            return Err(Error::Config("need at least 1 frame".into()));
        }
        Ok(())
    }
}

// ── layers ───────────────────────────────────────────────────────────

struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    weight_quant: Option<Quantizer>,
    act_quant: Option<Quantizer>,
}

impl ConvLayer {
    fn attach_weight_quantizer(
        &mut self,
        store: &mut ParamStore,
        name: &str,
        cfg: QuantConfig,
    ) -> Result<()> {
        if self.weight_quant.is_some() {
            return Err(Error::Usage(format!(
                "{name}: weight quantizer already attached"
            )));
        }
        self.weight_quant = Some(Quantizer::new(store, &format!("{name}.wq"), cfg)?);
        Ok(())
    }

    fn attach_act_quantizer(
        &mut self,
        store: &mut ParamStore,
        name: &str,
        cfg: QuantConfig,
    ) -> Result<()> {
        if self.act_quant.is_some() {
            return Err(Error::Usage(format!(
                "{name}: activation quantizer already attached"
            )));
        }
        self.act_quant = Some(Quantizer::new(store, &format!("{name}.aq"), cfg)?);
        Ok(())
    }
}

struct HeadsLayer {
    weights: Vec<ParamId>,
    weight_quants: Vec<Option<Quantizer>>,
    act_quant: Option<Quantizer>,
}

struct BnNeck {
    gamma: ParamId,
    beta: ParamId,
    classifiers: Vec<ParamId>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

/// How a forward pass treats quantizers and batch norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    /// Quantizers active, BN on batch statistics, gradients tracked.
    Train,
    /// Quantizers active, BN on running statistics, no gradients.
    Eval,
    /// Quantizers bypassed; collects activation statistics for step
    /// initialization.
    Calibrate,
}

pub struct ForwardArtifacts {
    /// `[batch, parts, part_dim]`
    pub embeddings: TensorRef,
    /// `[batch, parts, n_classes]`
    pub logits: TensorRef,
    /// Batch mean/var of the BNNeck input (train mode only).
    pub bn_stats: Option<(Vec<f64>, Vec<f64>)>,
    /// mean(|x|) per activation quantizer, in fixed order (calibrate only).
    pub act_means: Option<Vec<f64>>,
    /// Tape leaves of the parameters, for gradient collection.
    pub params: BoundParams,
}

/// Embedding batch with labels (plain values, for evaluation paths).
#[derive(Debug, Clone)]
pub struct Embeddings {
    /// `[n, parts, part_dim]`
    pub values: Tensor,
    pub labels: Vec<u32>,
}

impl Embeddings {
    pub fn n(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1] * self.values.shape()[2]
    }

    /// Concatenated-part view of sample `i`.
    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.values.data()[i * d..(i + 1) * d]
    }
}

/// Logits batch (plain values).
#[derive(Debug, Clone)]
pub struct Logits {
    /// `[n, parts, n_classes]`
    pub values: Tensor,
}

// ── the network ──────────────────────────────────────────────────────

pub struct GaitNet {
    pub spec: ModelSpec,
    conv1: ConvLayer,
    conv2: ConvLayer,
    heads: HeadsLayer,
    bnneck: BnNeck,
}

/// A network together with its parameters.
pub struct ModelState {
    pub net: GaitNet,
    pub params: ParamStore,
}

/// Build a freshly initialized model (He-uniform weights, zero biases).
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<ModelState> {
    let mut params = ParamStore::new();
    let net = GaitNet::new(spec.clone(), &mut params, seed)?;
    Ok(ModelState { net, params })
}

fn he_uniform(rng: &mut SplitMix64, shape: &[usize], fan_in: usize) -> Tensor {
    let lim = fmath::sqrt(6.0 / fan_in as f64);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.uniform(-lim, lim)).collect();
    Tensor::from_vec(shape.to_vec(), data)
}

impl GaitNet {
    pub fn new(spec: ModelSpec, store: &mut ParamStore, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = SplitMix64::new(seed ^ 0x6a09_e667_f3bc_c908);
        let (c1, c2) = spec.channels;
        let conv1_w = store.register(
            "conv1.weight",
            ParamKind::Weight,
            he_uniform(&mut rng, &[c1, 1, 3, 3], 9),
        );
        let conv1_b = store.register("conv1.bias", ParamKind::Bias, Tensor::zeros(&[c1]));
        let conv2_w = store.register(
            "conv2.weight",
            ParamKind::Weight,
            he_uniform(&mut rng, &[c2, c1, 3, 3], c1 * 9),
        );
        let conv2_b = store.register("conv2.bias", ParamKind::Bias, Tensor::zeros(&[c2]));
        let mut head_ws = Vec::with_capacity(spec.parts);
        for j in 0..spec.parts {
            head_ws.push(store.register(
                &format!("heads.{j}.weight"),
                ParamKind::Weight,
                he_uniform(&mut rng, &[c2, spec.part_dim], c2),
            ));
        }
        let feat = spec.embedding_dim();
        let gamma = store.register("bnneck.gamma", ParamKind::BnGamma, Tensor::filled(&[feat], 1.0));
        let beta = store.register("bnneck.beta", ParamKind::BnBeta, Tensor::zeros(&[feat]));
        let mut classifiers = Vec::with_capacity(spec.parts);
        for j in 0..spec.parts {
            classifiers.push(store.register(
                &format!("bnneck.cls.{j}.weight"),
                ParamKind::Weight,
                he_uniform(&mut rng, &[spec.part_dim, spec.n_classes], spec.part_dim),
            ));
        }

        let mut conv1 = ConvLayer {
            weight: conv1_w,
            bias: conv1_b,
            weight_quant: None,
            act_quant: None,
        };
        let mut conv2 = ConvLayer {
            weight: conv2_w,
            bias: conv2_b,
            weight_quant: None,
            act_quant: None,
        };
        let mut heads = HeadsLayer {
            weights: head_ws,
            weight_quants: (0..spec.parts).map(|_| None).collect(),
            act_quant: None,
        };

        let wb = spec.quant.layer_weight_bits();
        let ab = spec.quant.layer_act_bits();
        if let BitWidth::Bits(b) = wb[0] {
            conv1.attach_weight_quantizer(store, "conv1", QuantConfig::signed(b, 1.0)?)?;
        }
        if let BitWidth::Bits(b) = wb[1] {
            conv2.attach_weight_quantizer(store, "conv2", QuantConfig::signed(b, 1.0)?)?;
        }
        // Binary silhouettes are exactly representable, so the first
        // activation quantizer sits on conv2's input.
        if let BitWidth::Bits(b) = ab[1] {
            conv2.attach_act_quantizer(store, "conv2", QuantConfig::unsigned(b, 1.0)?)?;
        }
        if let BitWidth::Bits(b) = ab[2] {
            heads.act_quant = Some(Quantizer::new(
                store,
                "heads.aq",
                QuantConfig::unsigned(b, 1.0)?,
            )?);
        }
        if let BitWidth::Bits(b) = wb[2] {
            for j in 0..spec.parts {
                heads.weight_quants[j] = Some(Quantizer::new(
                    store,
                    &format!("heads.{j}.wq"),
                    QuantConfig::signed(b, 1.0)?,
                )?);
            }
        }

        let bnneck = BnNeck {
            gamma,
            beta,
            classifiers,
            running_mean: vec![0.0; feat],
            running_var: vec![1.0; feat],
        };

        Ok(GaitNet {
            spec,
            conv1,
            conv2,
            heads,
            bnneck,
        })
    }

    fn quantizers_mut(&mut self) -> Vec<&mut Quantizer> {
        let mut qs = Vec::new();
        if let Some(q) = self.conv1.weight_quant.as_mut() {
            qs.push(q);
        }
        if let Some(q) = self.conv2.act_quant.as_mut() {
            qs.push(q);
        }
        if let Some(q) = self.conv2.weight_quant.as_mut() {
            qs.push(q);
        }
        if let Some(q) = self.heads.act_quant.as_mut() {
            qs.push(q);
        }
        for q in self.heads.weight_quants.iter_mut().flatten() {
            qs.push(q);
        }
        qs
    }

    pub fn quantizers(&self) -> Vec<&Quantizer> {
        let mut qs = Vec::new();
        if let Some(q) = self.conv1.weight_quant.as_ref() {
            qs.push(q);
        }
        if let Some(q) = self.conv2.act_quant.as_ref() {
            qs.push(q);
        }
        if let Some(q) = self.conv2.weight_quant.as_ref() {
            qs.push(q);
        }
        if let Some(q) = self.heads.act_quant.as_ref() {
            qs.push(q);
        }
        for q in self.heads.weight_quants.iter().flatten() {
            qs.push(q);
        }
        qs
    }

    pub fn is_quantized(&self) -> bool {
        !self.quantizers().is_empty()
    }

    pub fn steps_initialized(&self) -> bool {
        self.quantizers().iter().all(|q| q.initialized)
    }

    /// Switch the backward rule of every quantizer.
    pub fn set_grad_mode(&mut self, mode: GradMode) {
        for q in self.quantizers_mut() {
            q.cfg.grad_mode = mode;
        }
    }

    pub fn grad_modes(&self) -> Vec<GradMode> {
        self.quantizers().iter().map(|q| q.cfg.grad_mode).collect()
    }

    /// Mark quantizer steps initialized (checkpoint restore).
    pub fn set_steps_initialized(&mut self, initialized: bool) {
        for q in self.quantizers_mut() {
            q.initialized = initialized;
        }
    }

    /// Calibrate every quantizer step from the initial weights and one
    /// batch of activations (`v0 = 2·mean|x|/√r2`).
    pub fn initialize_steps(
        &mut self,
        store: &mut ParamStore,
        input: &Tensor,
        batch: usize,
    ) -> Result<()> {
        // weight quantizers: directly from the stored weights
        let mean_abs = |t: &Tensor| {
            t.data().iter().map(|v| fmath::fabs(*v)).sum::<f64>() / t.numel() as f64
        };
        let w1 = mean_abs(store.value(self.conv1.weight));
        let w2 = mean_abs(store.value(self.conv2.weight));
        let whs: Vec<f64> = self
            .heads
            .weights
            .iter()
            .map(|&id| mean_abs(store.value(id)))
            .collect();
        // activation quantizers: one bypassed forward pass
        let mut tape = Tape::new();
        let art = self.forward(&mut tape, store, input, batch, RunMode::Calibrate)?;
        let act_means = art.act_means.expect("calibrate mode returns act means");

        if let Some(q) = self.conv1.weight_quant.as_mut() {
            q.initialize(store, w1)?;
        }
        if let Some(q) = self.conv2.act_quant.as_mut() {
            q.initialize(store, act_means[0])?;
        }
        if let Some(q) = self.conv2.weight_quant.as_mut() {
            q.initialize(store, w2)?;
        }
        if let Some(q) = self.heads.act_quant.as_mut() {
            q.initialize(store, act_means[1])?;
        }
        for (q, w) in self.heads.weight_quants.iter_mut().zip(&whs) {
            if let Some(q) = q.as_mut() {
                q.initialize(store, *w)?;
            }
        }
        Ok(())
    }

    fn maybe_quantize(
        &self,
        q: &Option<Quantizer>,
        tape: &mut Tape,
        bound: &BoundParams,
        x: TensorRef,
        mode: RunMode,
        act_means: &mut Vec<f64>,
        is_activation: bool,
    ) -> Result<TensorRef> {
        match (q, mode) {
            (Some(q), RunMode::Calibrate) => {
                if is_activation {
                    let v = tape.value(x);
                    let m =
                        v.data().iter().map(|x| fmath::fabs(*x)).sum::<f64>() / v.numel() as f64;
                    act_means.push(m);
                }
                let _ = q;
                Ok(x)
            }
            (Some(q), _) => {
                if !q.initialized {
                    return Err(Error::Config(
                        "quantizer step not initialized; train or calibrate first".into(),
                    ));
                }
                q.apply(tape, bound, x, self.spec.quant.soft_forward)
            }
            (None, _) => Ok(x),
        }
    }

    /// Run the network on a `[batch*frames, 1, H, W]` input.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: &Tensor,
        batch: usize,
        mode: RunMode,
    ) -> Result<ForwardArtifacts> {
        let spec = &self.spec;
        let (_c1, c2) = spec.channels;
        let t = spec.frames;
        let expect = [batch * t, 1, spec.height, spec.width];
        if input.shape() != expect {
            return Err(Error::Dimension(format!(
                "backbone input must be {:?}, got {:?}",
                expect,
                input.shape()
            )));
        }
        let trainable = mode == RunMode::Train;
        let bound = BoundParams::bind(store, tape, trainable);
        let mut act_means = Vec::new();

        let x = tape.constant(input.clone());

        // block 1
        let w1 = self.maybe_quantize(
            &self.conv1.weight_quant,
            tape,
            &bound,
            bound.get(self.conv1.weight),
            mode,
            &mut act_means,
            false,
        )?;
        let x = tape.conv2d(x, w1, 1, 1)?;
        let x = tape.add_bias(x, bound.get(self.conv1.bias), 1)?;
        let x = tape.relu(x);
        let x = tape.maxpool2(x)?;

        // block 2 (quantized input activation)
        let x = self.maybe_quantize(
            &self.conv2.act_quant,
            tape,
            &bound,
            x,
            mode,
            &mut act_means,
            true,
        )?;
        let w2 = self.maybe_quantize(
            &self.conv2.weight_quant,
            tape,
            &bound,
            bound.get(self.conv2.weight),
            mode,
            &mut act_means,
            false,
        )?;
        let x = tape.conv2d(x, w2, 1, 1)?;
        let x = tape.add_bias(x, bound.get(self.conv2.bias), 1)?;
        let x = tape.relu(x);
        let x = tape.maxpool2(x)?;

        // temporal set pooling (elementwise max over frames)
        let (hp, wp) = spec.pooled_hw();
        let x = tape.reshape(x, &[batch, t, c2 * hp * wp])?;
        let x = tape.max_over_axis(x, 1)?;
        let x = tape.reshape(x, &[batch, c2, hp, wp])?;

        // part pooling + heads
        let pooled = tape.horizontal_pool(x, spec.parts)?;
        let pooled = self.maybe_quantize(
            &self.heads.act_quant,
            tape,
            &bound,
            pooled,
            mode,
            &mut act_means,
            true,
        )?;
        let mut part_embs = Vec::with_capacity(spec.parts);
        for j in 0..spec.parts {
            let xj = tape.index_axis1(pooled, j)?;
            let wj = self.maybe_quantize(
                &self.heads.weight_quants[j],
                tape,
                &bound,
                bound.get(self.heads.weights[j]),
                mode,
                &mut act_means,
                false,
            )?;
            part_embs.push(tape.matmul(xj, wj)?);
        }
        let embeddings = tape.stack1(&part_embs)?;

        // BNNeck: per-part batch norm + bias-free classifier
        let feat = spec.embedding_dim();
        let flat = tape.reshape(embeddings, &[batch, feat])?;
        let (normed, bn_stats) = match mode {
            RunMode::Train | RunMode::Calibrate => {
                let (r, mean, var) = tape.batch_norm_train(
                    flat,
                    bound.get(self.bnneck.gamma),
                    bound.get(self.bnneck.beta),
                )?;
                (r, (mode == RunMode::Train).then_some((mean, var)))
            }
            RunMode::Eval => (
                tape.batch_norm_eval(
                    flat,
                    bound.get(self.bnneck.gamma),
                    bound.get(self.bnneck.beta),
                    &self.bnneck.running_mean,
                    &self.bnneck.running_var,
                )?,
                None,
            ),
        };
        let normed = tape.reshape(normed, &[batch, spec.parts, spec.part_dim])?;
        let mut part_logits = Vec::with_capacity(spec.parts);
        for j in 0..spec.parts {
            let nj = tape.index_axis1(normed, j)?;
            part_logits.push(tape.matmul(nj, bound.get(self.bnneck.classifiers[j]))?);
        }
        let logits = tape.stack1(&part_logits)?;

        Ok(ForwardArtifacts {
            embeddings,
            logits,
            bn_stats,
            act_means: (mode == RunMode::Calibrate).then_some(act_means),
            params: bound,
        })
    }

    /// Fold batch statistics into the running BNNeck statistics.
    pub fn update_bn_running(&mut self, mean: &[f64], var: &[f64]) {
        for (r, &m) in self.bnneck.running_mean.iter_mut().zip(mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, &v) in self.bnneck.running_var.iter_mut().zip(var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }

    pub fn bn_running(&self) -> (&[f64], &[f64]) {
        (&self.bnneck.running_mean, &self.bnneck.running_var)
    }

    pub fn set_bn_running(&mut self, mean: Vec<f64>, var: Vec<f64>) -> Result<()> {
        let feat = self.spec.embedding_dim();
        if mean.len() != feat || var.len() != feat {
            return Err(Error::Dimension(
                "running statistics length mismatch".into(),
            ));
        }
        self.bnneck.running_mean = mean;
        self.bnneck.running_var = var;
        Ok(())
    }

    /// Quantizer configs with live steps, in fixed order, for
    /// serialization and lowering: conv1.wq, conv2.aq, conv2.wq,
    /// heads.aq, heads.{j}.wq.
    pub fn quantizer_configs(&self, store: &ParamStore) -> Vec<QuantConfig> {
        self.quantizers()
            .iter()
            .map(|q| q.config_with_step(store))
            .collect()
    }

    /// Embed sequences in eval mode, returning embeddings and logits.
    pub fn embed_sequences(
        &self,
        store: &ParamStore,
        seqs: &[SilhouetteSequence],
        batch_size: usize,
    ) -> Result<(Embeddings, Logits)> {
        let spec = &self.spec;
        let (t, h, w) = (spec.frames, spec.height, spec.width);
        let mut emb = Vec::with_capacity(seqs.len() * spec.embedding_dim());
        let mut log = Vec::with_capacity(seqs.len() * spec.parts * spec.n_classes);
        let mut labels = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(batch_size.max(1)) {
            let mut data = Vec::with_capacity(chunk.len() * t * h * w);
            for s in chunk {
                if s.t != t || s.h != h || s.w != w {
                    return Err(Error::Dimension(format!(
                        "sequence geometry {}x{}x{} does not match model {}x{}x{}",
                        s.t, s.h, s.w, t, h, w
                    )));
                }
                data.extend(s.frames.iter().map(|&b| b as f64));
                labels.push(s.identity);
            }
            let input = Tensor::from_vec(vec![chunk.len() * t, 1, h, w], data);
            let mut tape = Tape::new();
            let art = self.forward(&mut tape, store, &input, chunk.len(), RunMode::Eval)?;
            emb.extend_from_slice(tape.value(art.embeddings).data());
            log.extend_from_slice(tape.value(art.logits).data());
        }
        Ok((
            Embeddings {
                values: Tensor::from_vec(
                    vec![seqs.len(), spec.parts, spec.part_dim],
                    emb,
                ),
                labels,
            },
            Logits {
                values: Tensor::from_vec(vec![seqs.len(), spec.parts, spec.n_classes], log),
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> ModelSpec {
        ModelSpec::desk_default(4, 4, 16, 12)
    }

    #[test]
    fn spec_validation() {
        assert!(tiny_spec().validate().is_ok());
        let mut bad = tiny_spec();
        bad.parts = 3; // pooled height 4 not divisible by 3
        assert!(bad.validate().is_err());
        let mut bad = tiny_spec();
        bad.height = 18;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn attach_twice_is_a_usage_error() {
        let spec = tiny_spec();
        let mut store = ParamStore::new();
        let mut net = GaitNet::new(spec, &mut store, 1).unwrap();
        let cfg = QuantConfig::signed(8, 1.0).unwrap();
        net.conv1
            .attach_weight_quantizer(&mut store, "conv1", cfg.clone())
            .unwrap();
        assert!(matches!(
            net.conv1.attach_weight_quantizer(&mut store, "conv1", cfg),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn quantizer_order_is_stable() {
        let spec = tiny_spec().with_quant(QuantPolicy::uniform(4, 4));
        let state = build_model(&spec, 7).unwrap();
        // conv1.wq, conv2.aq, conv2.wq, heads.aq, heads.{0..p}.wq
        assert_eq!(state.net.quantizers().len(), 4 + spec.parts);
    }

    #[test]
    fn first_last_8bit_policy_widens_boundary_layers() {
        let mut q = QuantPolicy::uniform(4, 4);
        q.first_last_8bit = true;
        assert_eq!(
            q.layer_weight_bits(),
            [BitWidth::Bits(8), BitWidth::Bits(4), BitWidth::Bits(8)]
        );
    }
}
