//! Two-stage quantization-aware training driver.
//!
//! Stage 1 trains with STE backward rules; stage 2 fine-tunes with the
//! soft quantizer under a k-growth schedule. Calibration runs add a
//! distillation term (IDC or vanilla KD) against a frozen higher-bit
//! teacher. Every entry point is a pure function of
//! `(seed, plan, data)` — reruns are bit-identical.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use alloc::{string::ToString, vec};

use crate::error::{Error, Result};
use crate::gaitnet::{build_model, ModelSpec, ModelState, ParamKind, RunMode};
use crate::losses;
use crate::quant::GradMode;
use crate::rng::SplitMix64;
use crate::synthdata::DatasetSplit;
use crate::tensor::{Tape, Tensor};

// ── k schedule ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum KMode {
    Fixed,
    Grow,
}

/// Fine-tuning k-growth policy. FIXED holds k at the threshold `T`;
/// GROW raises it by `delta` every `interval` iterations, capped at `T`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KSchedule {
    pub mode: KMode,
    pub k0: f64,
    pub delta: f64,
    pub interval: usize,
    pub threshold: f64,
}

impl KSchedule {
    pub fn fixed(threshold: f64) -> Self {
        KSchedule {
            mode: KMode::Fixed,
            k0: threshold,
            delta: 0.0,
            interval: 1,
            threshold,
        }
    }

    pub fn grow(k0: f64, delta: f64, interval: usize, threshold: f64) -> Self {
        KSchedule {
            mode: KMode::Grow,
            k0,
            delta,
            interval,
            threshold,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k0 >= 1.0) || !(self.threshold >= self.k0) {
            return Err(Error::Config(format!(
                "k schedule needs 1 <= k0 <= threshold, got k0={} T={}",
                self.k0, self.threshold
            )));
        }
        if self.interval == 0 {
            return Err(Error::Config("k schedule interval must be >= 1".into()));
        }
        if self.delta < 0.0 {
            return Err(Error::Config("k schedule delta must be >= 0".into()));
        }
        Ok(())
    }
}

/// k value at iteration `t` under a schedule.
pub fn k_at_iter(schedule: &KSchedule, t: usize) -> f64 {
    match schedule.mode {
        KMode::Fixed => schedule.threshold,
        KMode::Grow => {
            let steps = (t / schedule.interval) as f64;
            (schedule.k0 + schedule.delta * steps).min(schedule.threshold)
        }
    }
}

// ── plan ─────────────────────────────────────────────────────────────

/// Optimizer settings, sampler shape, loss weights and iteration budgets.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainPlan {
    pub stage1_iters: usize,
    pub finetune_iters: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub ids_per_batch: usize,
    pub samples_per_id: usize,
    pub triplet_margin: f64,
    pub triplet_weight: f64,
    pub ce_weight: f64,
    pub idc_weight: f64,
    pub kd_weight: f64,
    pub kd_temperature: f64,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            stage1_iters: 1500,
            finetune_iters: 300,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            ids_per_batch: 8,
            samples_per_id: 4,
            triplet_margin: 0.2,
            triplet_weight: 1.0,
            ce_weight: 1.0,
            idc_weight: 1.0,
            kd_weight: 1.0,
            kd_temperature: 1.0,
            seed: 1,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.ids_per_batch < 2 || self.samples_per_id < 2 {
            return Err(Error::Config(
                "sampler needs >= 2 identities and >= 2 samples per identity".into(),
            ));
        }
        if !(self.kd_temperature > 0.0) {
            return Err(Error::Config("kd temperature must be positive".into()));
        }
        if self.finetune_iters > self.stage1_iters {
            return Err(Error::Config(
                "fine-tune budget must not exceed the stage-1 budget".into(),
            ));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.ids_per_batch * self.samples_per_id
    }
}

/// One logged optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub k: f64,
    pub lr: f64,
}

/// Per-iteration loss trace of a run.
#[derive(Debug, Clone, Default)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
}

impl TrainTrace {
    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }
}

// ── optimizer ────────────────────────────────────────────────────────

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    fn new(plan: &TrainPlan, n_params: usize) -> Self {
        Adam {
            lr: plan.learning_rate,
            beta1: plan.beta1,
            beta2: plan.beta2,
            eps: plan.eps,
            t: 0,
            m: vec![Vec::new(); n_params],
            v: vec![Vec::new(); n_params],
        }
    }

    fn step(&mut self, state: &mut ModelState, grads: &[Option<&Tensor>]) {
        self.t += 1;
        let bc1 = 1.0 - crate::fmath::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - crate::fmath::pow(self.beta2, self.t as f64);
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let entry = state.params.entry_mut(i);
            if self.m[i].is_empty() {
                self.m[i] = vec![0.0; grad.numel()];
                self.v[i] = vec![0.0; grad.numel()];
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            let gdata = grad.data();
            let is_step = entry.kind == ParamKind::QuantStep;
            entry.value.map_in_place(|j, w| {
                let g = gdata[j];
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * mhat / (crate::fmath::sqrt(vhat) + eps);
                if is_step && *w < 1e-8 {
                    *w = 1e-8;
                }
            });
        }
    }
}

// ── batch sampling ───────────────────────────────────────────────────

struct TrainIndex {
    ids: Vec<u32>,
    per_id: Vec<Vec<usize>>,
}

fn build_index(data: &DatasetSplit, plan: &TrainPlan) -> Result<TrainIndex> {
    let mut ids: Vec<u32> = Vec::new();
    for s in &data.train {
        if !ids.contains(&s.identity) {
            ids.push(s.identity);
        }
    }
    ids.sort_unstable();
    if ids.len() < plan.ids_per_batch {
        return Err(Error::Config(format!(
            "sampler wants {} identities per batch but the train split has {}",
            plan.ids_per_batch,
            ids.len()
        )));
    }
    let per_id: Vec<Vec<usize>> = ids
        .iter()
        .map(|&id| {
            (0..data.train.len())
                .filter(|&i| data.train[i].identity == id)
                .collect::<Vec<_>>()
        })
        .collect();
    for (id, seqs) in ids.iter().zip(&per_id) {
        if seqs.len() < plan.samples_per_id {
            return Err(Error::Config(format!(
                "identity {id} has {} sequences, sampler needs {}",
                seqs.len(),
                plan.samples_per_id
            )));
        }
    }
    Ok(TrainIndex { ids, per_id })
}

fn sample_batch(
    rng: &mut SplitMix64,
    index: &TrainIndex,
    data: &DatasetSplit,
    plan: &TrainPlan,
) -> (Tensor, Vec<u32>) {
    let mut id_order: Vec<usize> = (0..index.ids.len()).collect();
    rng.shuffle(&mut id_order);
    let cfg = &data.config;
    let (t, h, w) = (cfg.frames, cfg.height, cfg.width);
    let b = plan.batch_size();
    let mut input = Vec::with_capacity(b * t * h * w);
    let mut labels = Vec::with_capacity(b);
    for &slot in id_order.iter().take(plan.ids_per_batch) {
        let mut seq_order = index.per_id[slot].clone();
        rng.shuffle(&mut seq_order);
        for &si in seq_order.iter().take(plan.samples_per_id) {
            let seq = &data.train[si];
            input.extend(seq.frames.iter().map(|&px| px as f64));
            labels.push(seq.identity);
        }
    }
    (
        Tensor::from_vec(vec![b * t, 1, h, w], input),
        labels,
    )
}

// ── phases ───────────────────────────────────────────────────────────

/// Quantizer behavior during a fine-tuning run.
#[derive(Debug, Clone)]
pub enum QuantTrainMode {
    Ste,
    Soft(KSchedule),
}

/// Which distillation term a calibration run adds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CalibKind {
    Idc,
    VanillaKd,
}

enum Phase<'a> {
    Stage1,
    Finetune {
        mode: &'a QuantTrainMode,
        teacher: Option<(&'a ModelState, CalibKind)>,
    },
}

/// Stage 1: STE training on triplet + cross-entropy.
pub fn stage1_train(
    state: &mut ModelState,
    data: &DatasetSplit,
    plan: &TrainPlan,
) -> Result<TrainTrace> {
    run_loop(state, data, plan, plan.stage1_iters, Phase::Stage1)
}

/// Stage 2: soft-quantizer fine-tuning under a k schedule.
pub fn stage2_finetune(
    state: &mut ModelState,
    data: &DatasetSplit,
    plan: &TrainPlan,
    schedule: &KSchedule,
) -> Result<TrainTrace> {
    schedule.validate()?;
    let mode = QuantTrainMode::Soft(schedule.clone());
    run_loop(
        state,
        data,
        plan,
        plan.finetune_iters,
        Phase::Finetune {
            mode: &mode,
            teacher: None,
        },
    )
}

fn check_teacher(student: &ModelState, teacher: &ModelState) -> Result<()> {
    let s = &student.net.spec;
    let t = &teacher.net.spec;
    let same_arch = s.frames == t.frames
        && s.height == t.height
        && s.width == t.width
        && s.channels == t.channels
        && s.parts == t.parts
        && s.part_dim == t.part_dim
        && s.n_classes == t.n_classes;
    if !same_arch {
        return Err(Error::Config(
            "teacher/student architecture mismatch".into(),
        ));
    }
    let eff = |b: crate::quant::BitWidth| match b {
        crate::quant::BitWidth::FullPrecision => 33u8,
        crate::quant::BitWidth::Bits(b) => b,
    };
    if eff(t.quant.weight_bits) <= eff(s.quant.weight_bits) {
        return Err(Error::Config(
            "teacher bit-width must exceed the student's".into(),
        ));
    }
    Ok(())
}

/// Distillation fine-tune against a frozen higher-bit teacher.
pub fn calibrate(
    state: &mut ModelState,
    teacher: &ModelState,
    data: &DatasetSplit,
    plan: &TrainPlan,
    mode: &QuantTrainMode,
    kind: CalibKind,
) -> Result<TrainTrace> {
    check_teacher(state, teacher)?;
    if let QuantTrainMode::Soft(s) = mode {
        s.validate()?;
    }
    run_loop(
        state,
        data,
        plan,
        plan.finetune_iters,
        Phase::Finetune {
            mode,
            teacher: Some((teacher, kind)),
        },
    )
}

/// IDC calibration with the soft quantizer active (the paper's combined
/// fine-tuning stage). `idc_weight = 0` reduces to [`stage2_finetune`].
pub fn calibrate_with_idc(
    state: &mut ModelState,
    teacher: &ModelState,
    data: &DatasetSplit,
    plan: &TrainPlan,
    schedule: &KSchedule,
) -> Result<TrainTrace> {
    calibrate(
        state,
        teacher,
        data,
        plan,
        &QuantTrainMode::Soft(schedule.clone()),
        CalibKind::Idc,
    )
}

/// Labelled loss trace from a convergence-contrast run.
#[derive(Debug, Clone)]
pub struct ContrastTrace {
    pub label: String,
    pub trace: TrainTrace,
}

/// Train from scratch once with STE and once per fixed soft k, sharing
/// the seed (hence initialization and batch order) across arms.
pub fn convergence_contrast(
    spec: &ModelSpec,
    data: &DatasetSplit,
    plan: &TrainPlan,
    k_values: &[f64],
) -> Result<Vec<ContrastTrace>> {
    let mut out = Vec::new();
    let mut state = build_model(spec, plan.seed)?;
    let trace = run_loop(&mut state, data, plan, plan.stage1_iters, Phase::Stage1)?;
    out.push(ContrastTrace {
        label: "ste".to_string(),
        trace,
    });
    for &k in k_values {
        let mode = QuantTrainMode::Soft(KSchedule::fixed(k));
        let mut state = build_model(spec, plan.seed)?;
        let trace = run_loop(
            &mut state,
            data,
            plan,
            plan.stage1_iters,
            Phase::Finetune {
                mode: &mode,
                teacher: None,
            },
        )?;
        out.push(ContrastTrace {
            label: format!("soft_k{k}"),
            trace,
        });
    }
    Ok(out)
}

// ── the loop ─────────────────────────────────────────────────────────

fn run_loop(
    state: &mut ModelState,
    data: &DatasetSplit,
    plan: &TrainPlan,
    iters: usize,
    phase: Phase<'_>,
) -> Result<TrainTrace> {
    plan.validate()?;
    let index = build_index(data, plan)?;
    let mut rng = SplitMix64::new(plan.seed);
    let mut adam = Adam::new(plan, state.params.len());
    let mut trace = TrainTrace::default();
    let batch = plan.batch_size();
    let spec = state.net.spec.clone();
    let n_classes = spec.n_classes as u32;

    match &phase {
        Phase::Stage1
        | Phase::Finetune {
            mode: QuantTrainMode::Ste,
            ..
        } => state.net.set_grad_mode(GradMode::Ste),
        Phase::Finetune {
            mode: QuantTrainMode::Soft(s),
            ..
        } => state.net.set_grad_mode(GradMode::Soft { k: k_at_iter(s, 0) }),
    }

    for t in 0..iters {
        let k = match &phase {
            Phase::Finetune {
                mode: QuantTrainMode::Soft(s),
                ..
            } => {
                let k = k_at_iter(s, t);
                state.net.set_grad_mode(GradMode::Soft { k });
                k
            }
            _ => 0.0,
        };

        let (input, labels) = sample_batch(&mut rng, &index, data, plan);
        for &l in &labels {
            if l >= n_classes {
                return Err(Error::Config(format!(
                    "training label {l} exceeds the model's {n_classes} classes"
                )));
            }
        }
        if t == 0 && state.net.is_quantized() && !state.net.steps_initialized() {
            state.net.initialize_steps(&mut state.params, &input, batch)?;
        }

        // teacher pass (no gradients)
        let teacher_out = if let Phase::Finetune {
            teacher: Some((teacher, kind)),
            ..
        } = &phase
        {
            let mut ttape = Tape::new();
            let art = teacher
                .net
                .forward(&mut ttape, &teacher.params, &input, batch, RunMode::Eval)?;
            let x = ttape.value(art.embeddings).clone();
            let o = ttape.value(art.logits).clone();
            Some((x, o, *kind))
        } else {
            None
        };

        let mut tape = Tape::new();
        let art = state
            .net
            .forward(&mut tape, &state.params, &input, batch, RunMode::Train)?;

        let emb_flat = tape.reshape(art.embeddings, &[batch, spec.embedding_dim()])?;
        let logit_rows = tape.reshape(art.logits, &[batch * spec.parts, spec.n_classes])?;
        let mut row_labels = Vec::with_capacity(batch * spec.parts);
        for &l in &labels {
            for _ in 0..spec.parts {
                row_labels.push(l);
            }
        }

        let tri = losses::triplet_loss(&mut tape, emb_flat, &labels, plan.triplet_margin)?;
        let ce = losses::softmax_ce(&mut tape, logit_rows, &row_labels)?;
        let tri_w = tape.scale(tri, plan.triplet_weight);
        let ce_w = tape.scale(ce, plan.ce_weight);
        let mut total = tape.add(tri_w, ce_w)?;

        if let Some((tx, to, kind)) = teacher_out {
            match kind {
                CalibKind::Idc => {
                    if plan.idc_weight != 0.0 {
                        let teacher_flat = tx.reshaped(&[batch, spec.embedding_dim()])?;
                        let idc = losses::idc_loss(&mut tape, &teacher_flat, emb_flat, &labels)?;
                        let idc_w = tape.scale(idc, plan.idc_weight);
                        total = tape.add(total, idc_w)?;
                    }
                }
                CalibKind::VanillaKd => {
                    if plan.kd_weight != 0.0 {
                        let teacher_rows =
                            to.reshaped(&[batch * spec.parts, spec.n_classes])?;
                        let kd = losses::kd_kl(
                            &mut tape,
                            &teacher_rows,
                            logit_rows,
                            plan.kd_temperature,
                        )?;
                        let kd_w = tape.scale(kd, plan.kd_weight);
                        total = tape.add(total, kd_w)?;
                    }
                }
            }
        }

        let loss_value = tape.value(total).item()?;
        if loss_value.is_nan() {
            return Err(Error::Training {
                iteration: t,
                message: "loss is NaN (diverged)".into(),
            });
        }

        tape.backward(total)?;
        let bound_grads = art.params.grads(&tape);
        adam.step(state, &bound_grads);

        if let Some((mean, var)) = art.bn_stats {
            state.net.update_bn_running(&mean, &var);
        }

        trace.rows.push(TraceRow {
            iteration: t,
            loss: loss_value,
            k,
            lr: plan.learning_rate,
        });
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_schedule_examples() {
        let fixed = KSchedule::fixed(5.0);
        assert_eq!(k_at_iter(&fixed, 0), 5.0);
        assert_eq!(k_at_iter(&fixed, 12345), 5.0);

        // GROW-2: 0.2 per 100 iterations, k0 = 1, T = 3
        let grow2 = KSchedule::grow(1.0, 0.2, 100, 3.0);
        assert_eq!(k_at_iter(&grow2, 0), 1.0);
        assert!((k_at_iter(&grow2, 500) - 2.0).abs() < 1e-12);
        assert_eq!(k_at_iter(&grow2, 2000), 3.0);

        // GROW-3: 1 per 1000 iterations, k0 = 1, T = 5
        let grow3 = KSchedule::grow(1.0, 1.0, 1000, 5.0);
        assert_eq!(k_at_iter(&grow3, 999), 1.0);
        assert_eq!(k_at_iter(&grow3, 1000), 2.0);
    }

    #[test]
    fn k_schedule_is_nondecreasing_and_capped() {
        let s = KSchedule::grow(1.0, 0.3, 7, 4.0);
        let mut prev = 0.0;
        for t in 0..2000 {
            let k = k_at_iter(&s, t);
            assert!(k >= prev && k <= 4.0 && k >= 1.0);
            prev = k;
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(KSchedule::fixed(0.5).validate().is_err());
        assert!(KSchedule::grow(1.0, 0.1, 0, 3.0).validate().is_err());
        assert!(KSchedule::grow(2.0, 0.1, 10, 1.0).validate().is_err());
        assert!(KSchedule::grow(1.0, 0.2, 100, 3.0).validate().is_ok());
    }

    #[test]
    fn plan_validation() {
        let mut plan = TrainPlan::default();
        assert!(plan.validate().is_ok());
        plan.ids_per_batch = 1;
        assert!(plan.validate().is_err());
    }
}
