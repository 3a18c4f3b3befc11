//! Retrieval metrics (Rank-n, mAP, mINP), BitOPs accounting, and report
//! assembly.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::gaitnet::{Embeddings, GaitNet, ModelSpec, ParamStore};
use crate::losses::logits_variance;
use crate::quant::BitWidth;
use crate::synthdata::DatasetSplit;

/// Cost description of one conv/linear layer. Linear layers use
/// `f = 1, h = w = 1`; `n` is the number of inputs the layer processes
/// per sample (frames for convs shared across time).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerCostSpec {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub f: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub b_w: u8,
    pub b_a: u8,
}

impl LayerCostSpec {
    pub fn validate(&self) -> Result<()> {
        if [self.c_in, self.c_out, self.f, self.n, self.h, self.w]
            .iter()
            .any(|&v| v == 0)
        {
            return Err(Error::Config(format!(
                "layer {}: zero extent in cost spec",
                self.name
            )));
        }
        for b in [self.b_w, self.b_a] {
            if !(2..=32).contains(&b) {
                return Err(Error::Config(format!(
                    "layer {}: bit-width {b} outside 2..=32",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// `(b_w/32)·(b_a/32)·2·C_in·C_out·F²·N·H·W`
    pub fn bitops(&self) -> f64 {
        let macs = 2.0
            * self.c_in as f64
            * self.c_out as f64
            * (self.f * self.f) as f64
            * self.n as f64
            * self.h as f64
            * self.w as f64;
        (self.b_w as f64 / 32.0) * (self.b_a as f64 / 32.0) * macs
    }
}

/// Total BitOPs over a layer list (raw operations).
pub fn bitops(layers: &[LayerCostSpec]) -> Result<f64> {
    let mut total = 0.0;
    for l in layers {
        l.validate()?;
        total += l.bitops();
    }
    Ok(total)
}

pub fn to_giga(ops: f64) -> f64 {
    ops / 1e9
}

/// Layer cost table of the gait network: convolutions count every frame,
/// the per-part heads count once per sample.
pub fn model_layer_costs(spec: &ModelSpec) -> Vec<LayerCostSpec> {
    let (c1, c2) = spec.channels;
    let wb = spec.quant.layer_weight_bits();
    let ab = spec.quant.layer_act_bits();
    let mut layers = Vec::new();
    layers.push(LayerCostSpec {
        name: "conv1".to_string(),
        c_in: 1,
        c_out: c1,
        f: 3,
        n: spec.frames,
        h: spec.height,
        w: spec.width,
        b_w: wb[0].effective(),
        b_a: ab[0].effective(),
    });
    layers.push(LayerCostSpec {
        name: "conv2".to_string(),
        c_in: c1,
        c_out: c2,
        f: 3,
        n: spec.frames,
        h: spec.height / 2,
        w: spec.width / 2,
        b_w: wb[1].effective(),
        b_a: ab[1].effective(),
    });
    for j in 0..spec.parts {
        layers.push(LayerCostSpec {
            name: format!("heads.{j}"),
            c_in: c2,
            c_out: spec.part_dim,
            f: 1,
            n: 1,
            h: 1,
            w: 1,
            b_w: wb[2].effective(),
            b_a: ab[2].effective(),
        });
    }
    layers
}

// ── ranking metrics ──────────────────────────────────────────────────

fn check_retrieval(probe: &Embeddings, gallery: &Embeddings) -> Result<()> {
    if gallery.n() == 0 {
        return Err(Error::Usage("empty gallery".into()));
    }
    if probe.n() == 0 {
        return Err(Error::Usage("empty probe set".into()));
    }
    if probe.dim() != gallery.dim() {
        return Err(Error::Dimension(format!(
            "probe dim {} vs gallery dim {}",
            probe.dim(),
            gallery.dim()
        )));
    }
    Ok(())
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    crate::fmath::sqrt(s)
}

/// Gallery indices sorted by ascending distance to the probe row, ties
/// broken by gallery index.
fn ranking(probe_row: &[f64], gallery: &Embeddings) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = (0..gallery.n())
        .map(|j| (euclid(probe_row, gallery.row(j)), j))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.into_iter().map(|(_, j)| j).collect()
}

/// Fraction of probes whose nearest-n gallery samples include a
/// same-identity sample. Every probe identity must appear in the gallery.
pub fn rank_n(probe: &Embeddings, gallery: &Embeddings, n: usize) -> Result<f64> {
    check_retrieval(probe, gallery)?;
    let mut hits = 0usize;
    for i in 0..probe.n() {
        let id = probe.labels[i];
        if !gallery.labels.contains(&id) {
            return Err(Error::Usage(format!(
                "probe identity {id} absent from gallery"
            )));
        }
        let order = ranking(probe.row(i), gallery);
        if order
            .iter()
            .take(n)
            .any(|&j| gallery.labels[j] == id)
        {
            hits += 1;
        }
    }
    Ok(hits as f64 / probe.n() as f64)
}

/// Mean average precision; probes without gallery positives are excluded
/// and returned in the second slot.
pub fn mean_ap(probe: &Embeddings, gallery: &Embeddings) -> Result<(f64, usize)> {
    check_retrieval(probe, gallery)?;
    let mut total = 0.0;
    let mut counted = 0usize;
    let mut excluded = 0usize;
    for i in 0..probe.n() {
        let id = probe.labels[i];
        let order = ranking(probe.row(i), gallery);
        let mut positives = 0usize;
        let mut ap = 0.0;
        for (rank0, &j) in order.iter().enumerate() {
            if gallery.labels[j] == id {
                positives += 1;
                ap += positives as f64 / (rank0 + 1) as f64;
            }
        }
        if positives == 0 {
            excluded += 1;
        } else {
            total += ap / positives as f64;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::Usage("no probe has a gallery positive".into()));
    }
    Ok((total / counted as f64, excluded))
}

/// Mean inverted negative penalty: per probe, positives divided by the
/// rank of the hardest positive.
pub fn mean_inp(probe: &Embeddings, gallery: &Embeddings) -> Result<(f64, usize)> {
    check_retrieval(probe, gallery)?;
    let mut total = 0.0;
    let mut counted = 0usize;
    let mut excluded = 0usize;
    for i in 0..probe.n() {
        let id = probe.labels[i];
        let order = ranking(probe.row(i), gallery);
        let mut positives = 0usize;
        let mut hardest_rank = 0usize;
        for (rank0, &j) in order.iter().enumerate() {
            if gallery.labels[j] == id {
                positives += 1;
                hardest_rank = rank0 + 1;
            }
        }
        if positives == 0 {
            excluded += 1;
        } else {
            total += positives as f64 / hardest_rank as f64;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::Usage("no probe has a gallery positive".into()));
    }
    Ok((total / counted as f64, excluded))
}

// ── report ───────────────────────────────────────────────────────────

/// Architecture echo carried inside a metrics report.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConfigEcho {
    pub weight_bits: String,
    pub act_bits: String,
    pub parts: usize,
    pub part_dim: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
}

fn bits_label(b: BitWidth) -> String {
    match b {
        BitWidth::FullPrecision => "fp32".to_string(),
        BitWidth::Bits(b) => format!("{b}"),
    }
}

/// Rank-n/mAP/mINP/BitOPs/logits-variance bundle produced by evaluation.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub minp: f64,
    pub excluded_probes: usize,
    pub bitops_total: f64,
    pub bitops_g: f64,
    pub logits_variance: f64,
    pub n_probe: usize,
    pub n_gallery: usize,
    pub config: ConfigEcho,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rank1", self.rank1),
            ("rank5", self.rank5),
            ("rank10", self.rank10),
            ("map", self.map),
            ("minp", self.minp),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Numeric(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.rank1 > self.rank5 || self.rank5 > self.rank10 {
            return Err(Error::Numeric("rank-n must be nondecreasing in n".into()));
        }
        Ok(())
    }
}

/// Evaluate a frozen model on the gallery/probe split.
pub fn evaluate(net: &GaitNet, store: &ParamStore, split: &DatasetSplit) -> Result<MetricsReport> {
    if split.gallery.is_empty() || split.probe.is_empty() {
        return Err(Error::Usage("evaluation split is empty".into()));
    }
    let (gallery_emb, gallery_logits) = net.embed_sequences(store, &split.gallery, 32)?;
    let (probe_emb, probe_logits) = net.embed_sequences(store, &split.probe, 32)?;
    let rank1 = rank_n(&probe_emb, &gallery_emb, 1)?;
    let rank5 = rank_n(&probe_emb, &gallery_emb, 5)?;
    let rank10 = rank_n(&probe_emb, &gallery_emb, 10)?;
    let (map, excluded) = mean_ap(&probe_emb, &gallery_emb)?;
    let (minp, _) = mean_inp(&probe_emb, &gallery_emb)?;
    let layers = model_layer_costs(&net.spec);
    let total = bitops(&layers)?;
    let mut all_logits = gallery_logits.values.data().to_vec();
    all_logits.extend_from_slice(probe_logits.values.data());
    let variance = logits_variance(&crate::tensor::Tensor::from_vec(
        alloc::vec![all_logits.len()],
        all_logits,
    ));
    let spec = &net.spec;
    let report = MetricsReport {
        rank1,
        rank5,
        rank10,
        map,
        minp,
        excluded_probes: excluded,
        bitops_total: total,
        bitops_g: to_giga(total),
        logits_variance: variance,
        n_probe: probe_emb.n(),
        n_gallery: gallery_emb.n(),
        config: ConfigEcho {
            weight_bits: bits_label(spec.quant.weight_bits),
            act_bits: bits_label(spec.quant.act_bits),
            parts: spec.parts,
            part_dim: spec.part_dim,
            frames: spec.frames,
            height: spec.height,
            width: spec.width,
            n_classes: spec.n_classes,
        },
    };
    report.validate()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::vec;

    fn embs(rows: Vec<Vec<f64>>, labels: Vec<u32>) -> Embeddings {
        let n = rows.len();
        let d = rows[0].len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Embeddings {
            values: Tensor::from_vec(vec![n, 1, d], flat),
            labels,
        }
    }

    #[test]
    fn bitops_formula_hand_example() {
        let layer = LayerCostSpec {
            name: "l".into(),
            c_in: 16,
            c_out: 32,
            f: 3,
            n: 1,
            h: 8,
            w: 8,
            b_w: 32,
            b_a: 32,
        };
        assert_eq!(layer.bitops(), 589_824.0);
        let l8 = LayerCostSpec {
            b_w: 8,
            b_a: 8,
            ..layer.clone()
        };
        assert_eq!(l8.bitops(), 36_864.0);
    }

    #[test]
    fn bitops_rejects_invalid_bits() {
        let mut layer = LayerCostSpec {
            name: "l".into(),
            c_in: 1,
            c_out: 1,
            f: 1,
            n: 1,
            h: 1,
            w: 1,
            b_w: 1,
            b_a: 8,
        };
        assert!(bitops(core::slice::from_ref(&layer)).is_err());
        layer.b_w = 33;
        assert!(bitops(core::slice::from_ref(&layer)).is_err());
    }

    #[test]
    fn adversarial_ranking_case() {
        // probe's same-id gallery sample strictly farthest among 3
        let gallery = embs(
            vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![10.0, 0.0]],
            vec![1, 2, 0],
        );
        let probe = embs(vec![vec![0.0, 0.0]], vec![0]);
        assert_eq!(rank_n(&probe, &gallery, 1).unwrap(), 0.0);
        assert_eq!(rank_n(&probe, &gallery, 3).unwrap(), 1.0);
    }

    #[test]
    fn map_and_inp_hand_example() {
        // ranking: A(1), B(2), A(3) for an A-probe
        let gallery = embs(
            vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![3.0, 0.0]],
            vec![0, 1, 0],
        );
        let probe = embs(vec![vec![0.0, 0.0]], vec![0]);
        let (map, excl) = mean_ap(&probe, &gallery).unwrap();
        assert!((map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(excl, 0);
        let (minp, _) = mean_inp(&probe, &gallery).unwrap();
        assert!((minp - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_ranking_gives_unit_scores() {
        let gallery = embs(vec![vec![0.1, 0.0], vec![5.0, 0.0]], vec![0, 1]);
        let probe = embs(vec![vec![0.0, 0.0]], vec![0]);
        assert_eq!(rank_n(&probe, &gallery, 1).unwrap(), 1.0);
        assert_eq!(mean_ap(&probe, &gallery).unwrap().0, 1.0);
        assert_eq!(mean_inp(&probe, &gallery).unwrap().0, 1.0);
    }
}
