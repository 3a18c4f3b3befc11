//! Task and distillation losses.
//!
//! All losses are tape ops with hand-derived backward rules: batch-all
//! triplet loss and part-averaged softmax cross-entropy for the task,
//! temperature-softmax KL on logits for vanilla distillation, and the
//! inter-class distance-guided calibration (IDC) loss, which matches the
//! teacher's softmax distribution over inter-class embedding distances
//! and deliberately ignores within-class numeric offsets. Distillation
//! teachers are constants: gradient flows to the student only.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::tensor::{CustomOp, Tape, Tensor, TensorRef};

/// Inter-class distance probability `q*(r, s)` for anchor `r` and
/// candidate `s` (labels differ).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairProbability {
    pub anchor: usize,
    pub candidate: usize,
    pub probability: f64,
}

// ── shared helpers ───────────────────────────────────────────────────

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    fmath::sqrt(s)
}

fn distance_matrix(emb: &Tensor) -> (usize, usize, Vec<f64>) {
    let n = emb.shape()[0];
    let d: usize = emb.shape()[1..].iter().product();
    let data = emb.data();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = euclid(&data[i * d..(i + 1) * d], &data[j * d..(j + 1) * d]);
            dist[i * n + j] = v;
            dist[j * n + i] = v;
        }
    }
    (n, d, dist)
}

/// Row-stable softmax with temperature; returns (q, log q).
fn softmax_row(z: &[f64], temp: f64) -> (Vec<f64>, Vec<f64>) {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / temp));
    let mut exps: Vec<f64> = z.iter().map(|&v| fmath::exp(v / temp - m)).collect();
    let sum: f64 = exps.iter().sum();
    let log_sum = fmath::ln(sum);
    let logq: Vec<f64> = z.iter().map(|&v| v / temp - m - log_sum).collect();
    for e in exps.iter_mut() {
        *e /= sum;
    }
    (exps, logq)
}

fn check_2d(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "{what} expects a 2-D tensor, got {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

// ── triplet loss ─────────────────────────────────────────────────────

struct TripletOp {
    labels: Vec<u32>,
    margin: f64,
}

struct TripletScan {
    sum: f64,
    active: Vec<(usize, usize, usize)>,
    any_valid: bool,
}

impl TripletOp {
    fn scan(&self, emb: &Tensor) -> TripletScan {
        let (n, _, dist) = distance_matrix(emb);
        let mut sum = 0.0;
        let mut active = Vec::new();
        let mut any_valid = false;
        for a in 0..n {
            for p in 0..n {
                if p == a || self.labels[p] != self.labels[a] {
                    continue;
                }
                for neg in 0..n {
                    if self.labels[neg] == self.labels[a] {
                        continue;
                    }
                    any_valid = true;
                    let term = dist[a * n + p] - dist[a * n + neg] + self.margin;
                    if term > 0.0 {
                        sum += term;
                        active.push((a, p, neg));
                    }
                }
            }
        }
        TripletScan {
            sum,
            active,
            any_valid,
        }
    }
}

impl CustomOp for TripletOp {
    fn name(&self) -> &str {
        "triplet_loss"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let emb = inputs[0];
        let (n, _) = check_2d(emb, "triplet_loss")?;
        if self.labels.len() != n {
            return Err(Error::Dimension("triplet_loss: label count mismatch".into()));
        }
        let scan = self.scan(emb);
        if !scan.any_valid {
            return Err(Error::Usage(
                "triplet_loss: batch contains no valid (anchor, positive, negative) triplet"
                    .into(),
            ));
        }
        let loss = if scan.active.is_empty() {
            0.0
        } else {
            scan.sum / scan.active.len() as f64
        };
        Ok(Tensor::scalar(loss))
    }

    fn backward(
        &self,
        grad_out: &[f64],
        inputs: &[&Tensor],
        _output: &Tensor,
    ) -> Vec<Option<Tensor>> {
        let emb = inputs[0];
        let (n, dim, dist) = distance_matrix(emb);
        let scan = self.scan(emb);
        let mut gx = vec![0.0; n * dim];
        if !scan.active.is_empty() {
            let g = grad_out[0] / scan.active.len() as f64;
            let data = emb.data();
            let add_pair = |i: usize, j: usize, sign: f64, gx: &mut Vec<f64>| {
                // d d(i,j)/dX contribution with weight sign·g
                let dij = dist[i * n + j];
                if dij == 0.0 {
                    return;
                }
                let scale = sign * g / dij;
                for c in 0..dim {
                    let delta = data[i * dim + c] - data[j * dim + c];
                    gx[i * dim + c] += scale * delta;
                    gx[j * dim + c] -= scale * delta;
                }
            };
            for &(a, p, neg) in &scan.active {
                add_pair(a, p, 1.0, &mut gx);
                add_pair(a, neg, -1.0, &mut gx);
            }
        }
        vec![Some(Tensor::from_vec(emb.shape().to_vec(), gx))]
    }
}

/// Batch-all triplet loss on `[n, dim]` embeddings: mean over triplets
/// with a nonzero hinge of `max(0, d(a,p) − d(a,n) + margin)`.
pub fn triplet_loss(
    tape: &mut Tape,
    embeddings: TensorRef,
    labels: &[u32],
    margin: f64,
) -> Result<TensorRef> {
    tape.apply_custom(
        Box::new(TripletOp {
            labels: labels.to_vec(),
            margin,
        }),
        &[embeddings],
    )
}

// ── softmax cross-entropy ────────────────────────────────────────────

struct SoftmaxCeOp {
    labels: Vec<u32>,
}

impl CustomOp for SoftmaxCeOp {
    fn name(&self) -> &str {
        "softmax_ce"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let logits = inputs[0];
        let (rows, cols) = check_2d(logits, "softmax_ce")?;
        if self.labels.len() != rows {
            return Err(Error::Dimension("softmax_ce: label count mismatch".into()));
        }
        let mut loss = 0.0;
        for r in 0..rows {
            let label = self.labels[r] as usize;
            if label >= cols {
                return Err(Error::Usage(format!(
                    "softmax_ce: label {label} out of range for {cols} classes"
                )));
            }
            let (_, logq) = softmax_row(&logits.data()[r * cols..(r + 1) * cols], 1.0);
            loss -= logq[label];
        }
        Ok(Tensor::scalar(loss / rows as f64))
    }

    fn backward(
        &self,
        grad_out: &[f64],
        inputs: &[&Tensor],
        _output: &Tensor,
    ) -> Vec<Option<Tensor>> {
        let logits = inputs[0];
        let (rows, cols) = (logits.shape()[0], logits.shape()[1]);
        let g = grad_out[0] / rows as f64;
        let mut gx = vec![0.0; rows * cols];
        for r in 0..rows {
            let (q, _) = softmax_row(&logits.data()[r * cols..(r + 1) * cols], 1.0);
            for c in 0..cols {
                gx[r * cols + c] = g * (q[c] - if c == self.labels[r] as usize { 1.0 } else { 0.0 });
            }
        }
        vec![Some(Tensor::from_vec(logits.shape().to_vec(), gx))]
    }
}

/// Mean `−log softmax(logits)[label]` over rows (batch × parts flattened).
pub fn softmax_ce(tape: &mut Tape, logits: TensorRef, labels: &[u32]) -> Result<TensorRef> {
    tape.apply_custom(
        Box::new(SoftmaxCeOp {
            labels: labels.to_vec(),
        }),
        &[logits],
    )
}

// ── vanilla knowledge distillation ───────────────────────────────────

struct KdKlOp {
    teacher: Tensor,
    temperature: f64,
}

impl CustomOp for KdKlOp {
    fn name(&self) -> &str {
        "kd_kl"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let student = inputs[0];
        if student.shape() != self.teacher.shape() {
            return Err(Error::Dimension("kd_kl: teacher/student shape mismatch".into()));
        }
        let (rows, cols) = check_2d(student, "kd_kl")?;
        let mut loss = 0.0;
        for r in 0..rows {
            let (qh, logqh) = softmax_row(
                &self.teacher.data()[r * cols..(r + 1) * cols],
                self.temperature,
            );
            let (_, logql) = softmax_row(
                &student.data()[r * cols..(r + 1) * cols],
                self.temperature,
            );
            for c in 0..cols {
                if qh[c] > 0.0 {
                    loss += qh[c] * (logqh[c] - logql[c]);
                }
            }
        }
        Ok(Tensor::scalar(loss / rows as f64))
    }

    fn backward(
        &self,
        grad_out: &[f64],
        inputs: &[&Tensor],
        _output: &Tensor,
    ) -> Vec<Option<Tensor>> {
        let student = inputs[0];
        let (rows, cols) = (student.shape()[0], student.shape()[1]);
        let g = grad_out[0] / (rows as f64 * self.temperature);
        let mut gx = vec![0.0; rows * cols];
        for r in 0..rows {
            let (qh, _) = softmax_row(
                &self.teacher.data()[r * cols..(r + 1) * cols],
                self.temperature,
            );
            let (ql, _) = softmax_row(
                &student.data()[r * cols..(r + 1) * cols],
                self.temperature,
            );
            for c in 0..cols {
                gx[r * cols + c] = g * (ql[c] - qh[c]);
            }
        }
        vec![Some(Tensor::from_vec(student.shape().to_vec(), gx))]
    }
}

/// Temperature-softmax KL divergence from teacher logits to student
/// logits (`[rows, classes]`, rows = batch × parts), averaged over rows.
pub fn kd_kl(
    tape: &mut Tape,
    teacher_logits: &Tensor,
    student_logits: TensorRef,
    temperature: f64,
) -> Result<TensorRef> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "kd temperature must be positive, got {temperature}"
        )));
    }
    tape.apply_custom(
        Box::new(KdKlOp {
            teacher: teacher_logits.clone(),
            temperature,
        }),
        &[student_logits],
    )
}

// ── IDC ──────────────────────────────────────────────────────────────

struct IdcRow {
    anchor: usize,
    candidates: Vec<usize>,
    q: Vec<f64>,
    logq: Vec<f64>,
}

fn idc_rows(emb: &Tensor, labels: &[u32]) -> Result<Vec<IdcRow>> {
    let (n, _) = check_2d(emb, "idc")?;
    if labels.len() != n {
        return Err(Error::Dimension("idc: label count mismatch".into()));
    }
    let distinct = {
        let mut seen: Vec<u32> = Vec::new();
        for &l in labels {
            if !seen.contains(&l) {
                seen.push(l);
            }
        }
        seen.len()
    };
    if distinct < 2 {
        return Err(Error::Usage(
            "idc: batch needs at least 2 distinct labels".into(),
        ));
    }
    let (_, _, dist) = distance_matrix(emb);
    let mut rows = Vec::new();
    for r in 0..n {
        let candidates: Vec<usize> = (0..n).filter(|&s| labels[s] != labels[r]).collect();
        if candidates.is_empty() {
            continue;
        }
        let z: Vec<f64> = candidates.iter().map(|&s| -dist[r * n + s]).collect();
        let (q, logq) = softmax_row(&z, 1.0);
        rows.push(IdcRow {
            anchor: r,
            candidates,
            q,
            logq,
        });
    }
    Ok(rows)
}

/// Softmax distribution over inter-class embedding distances: for each
/// anchor `r`, `q*(r,s) = exp(−d(r,s)) / Σ_{u: Y_u≠Y_r} exp(−d(r,u))`
/// over candidates `s` with a different label.
pub fn idc_probabilities(emb: &Tensor, labels: &[u32]) -> Result<Vec<PairProbability>> {
    let rows = idc_rows(emb, labels)?;
    let mut out = Vec::new();
    for row in rows {
        for (i, &s) in row.candidates.iter().enumerate() {
            out.push(PairProbability {
                anchor: row.anchor,
                candidate: s,
                probability: row.q[i],
            });
        }
    }
    Ok(out)
}

struct IdcOp {
    teacher: Tensor,
    labels: Vec<u32>,
}

impl CustomOp for IdcOp {
    fn name(&self) -> &str {
        "idc_loss"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let student = inputs[0];
        if student.shape() != self.teacher.shape() {
            return Err(Error::Usage(
                "idc_loss: teacher/student batches do not match".into(),
            ));
        }
        let h = idc_rows(&self.teacher, &self.labels)?;
        let l = idc_rows(student, &self.labels)?;
        let mut loss = 0.0;
        for (rh, rl) in h.iter().zip(&l) {
            for i in 0..rh.q.len() {
                if rh.q[i] > 0.0 {
                    loss += rh.q[i] * (rh.logq[i] - rl.logq[i]);
                }
            }
        }
        Ok(Tensor::scalar(loss / h.len() as f64))
    }

    fn backward(
        &self,
        grad_out: &[f64],
        inputs: &[&Tensor],
        _output: &Tensor,
    ) -> Vec<Option<Tensor>> {
        let student = inputs[0];
        let n = student.shape()[0];
        let dim = student.shape()[1];
        let data = student.data();
        let h = match idc_rows(&self.teacher, &self.labels) {
            Ok(v) => v,
            Err(_) => return vec![None],
        };
        let l = match idc_rows(student, &self.labels) {
            Ok(v) => v,
            Err(_) => return vec![None],
        };
        let (_, _, dist) = distance_matrix(student);
        let g = grad_out[0] / h.len() as f64;
        let mut gx = vec![0.0; n * dim];
        for (rh, rl) in h.iter().zip(&l) {
            let r = rl.anchor;
            for (i, &s) in rl.candidates.iter().enumerate() {
                // dL/dz_{rs} = q_L − q_H with z = −d(r,s)
                let coeff = g * (rl.q[i] - rh.q[i]);
                let drs = dist[r * n + s];
                if drs == 0.0 {
                    continue;
                }
                let scale = -coeff / drs;
                for c in 0..dim {
                    let delta = data[r * dim + c] - data[s * dim + c];
                    gx[r * dim + c] += scale * delta;
                    gx[s * dim + c] -= scale * delta;
                }
            }
        }
        vec![Some(Tensor::from_vec(student.shape().to_vec(), gx))]
    }
}

/// IDC loss: KL between teacher and student inter-class distance
/// distributions, averaged over anchors. Gradient flows to the student
/// embeddings only.
pub fn idc_loss(
    tape: &mut Tape,
    teacher_embeddings: &Tensor,
    student_embeddings: TensorRef,
    labels: &[u32],
) -> Result<TensorRef> {
    tape.apply_custom(
        Box::new(IdcOp {
            teacher: teacher_embeddings.clone(),
            labels: labels.to_vec(),
        }),
        &[student_embeddings],
    )
}

/// Population variance over every entry of a logits tensor.
pub fn logits_variance(values: &Tensor) -> f64 {
    let data = values.data();
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}
