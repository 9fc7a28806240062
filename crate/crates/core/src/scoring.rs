//! Per-sample anomaly scores, normalization and threshold estimation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::config::{CriticalLayer, ExperimentConfig};
use crate::data::{load_batch, DatasetIndex, ImageBatch, Label, Split};
use crate::error::{Error, Result};
use crate::losses::{loss_con, loss_dir, loss_lat, loss_val, Alphas};
use crate::meta::{write_text_with_meta, Meta};
use crate::model::{adapt_features, GanPair, Mode, Network};
use crate::training::Checkpoint;

/// Student/teacher discrepancy on one critical layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDiscrepancy {
    pub layer: CriticalLayer,
    pub value: f64,
    pub direction: f64,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyScore {
    pub sample_id: String,
    pub label: Option<Label>,
    /// Reconstruction error of the student.
    pub l_term: f64,
    /// Feature gap between the real and the reconstructed image.
    pub r_term: f64,
    /// Summed value discrepancy over critical layers.
    pub v_term: f64,
    /// Summed direction discrepancy over critical layers, unweighted.
    pub d_term: f64,
    /// Direction discrepancy weighted by each layer's alpha.
    pub d_weighted: f64,
    pub raw: f64,
    pub normalized: f64,
    pub layers: Vec<LayerDiscrepancy>,
}

/// Weights of the score's three parts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Omegas {
    pub l: f64,
    pub r: f64,
    pub vd: f64,
}

impl Omegas {
    pub fn from_config(c: &ExperimentConfig) -> Self {
        Self { l: c.omega_l, r: c.omega_r, vd: c.omega_vd }
    }

    pub fn combine(&self, l: f64, r: f64, v: f64, d_weighted: f64) -> f64 {
        self.l * l + self.r * r + self.vd * (v + d_weighted)
    }
}

/// Networks and weights a score is computed from.
pub struct ScoringModel<'a> {
    pub student: &'a GanPair,
    pub teacher: Option<&'a GanPair>,
    pub alphas: Option<Alphas>,
    pub omegas: Omegas,
    pub critical_layers: Vec<CriticalLayer>,
    pub batch_size: usize,
    pub image_size: usize,
    pub channels: usize,
}

impl<'a> ScoringModel<'a> {
    /// Distilled student scored against its teacher, with the student's
    /// calibrated alphas and config weights.
    pub fn distilled(student: &'a Checkpoint, teacher: &'a GanPair) -> Result<Self> {
        let c = &student.config;
        if student.alphas.is_none() && c.omega_vd != 0.0 {
            return Err(Error::Invalid("student checkpoint has no calibrated alpha; scores are undefined".into()));
        }
        if let Some(sum) = &student.teacher_checksum {
            if *sum != teacher.checksum() {
                log::warn!("teacher differs from the one this student was distilled from");
            }
        }
        Ok(Self {
            student: &student.networks,
            teacher: Some(teacher),
            alphas: student.alphas,
            omegas: Omegas::from_config(c),
            critical_layers: c.critical_layers.iter().copied().collect(),
            batch_size: c.batch_size,
            image_size: c.image_size,
            channels: c.channels,
        })
    }

    /// One network on its own: reconstruction and latent terms only.
    pub fn single(pair: &'a GanPair, config: &ExperimentConfig) -> Self {
        Self {
            student: pair,
            teacher: None,
            alphas: None,
            omegas: Omegas { vd: 0.0, ..Omegas::from_config(config) },
            critical_layers: Vec::new(),
            batch_size: config.batch_size,
            image_size: config.image_size,
            channels: config.channels,
        }
    }

    fn alpha(&self, layer: CriticalLayer) -> Result<f64> {
        let a = self.alphas.ok_or_else(|| Error::Invalid("missing calibrated alpha".into()))?;
        Ok(match layer {
            CriticalLayer::GeneratedImage => a.g,
            CriticalLayer::DiscriminatorFeatures => a.d,
            CriticalLayer::BottleneckZ => a.z,
        })
    }
}

/// Evaluation-mode scores of every image in `x`. `normalized` is left at 0.
pub fn score_sample(model: &ScoringModel<'_>, x: &ImageBatch) -> Result<Vec<AnomalyScore>> {
    let n = x.len();
    let mut tape = Tape::new();
    let xv = tape.leaf(x.pixels.clone(), false);
    let sg = model.student.generator.bind(&mut tape, false);
    let sd = model.student.discriminator.bind(&mut tape, false);
    let s = model.student.generator.forward(&mut tape, &sg, xv, Mode::Eval)?;
    let real = model.student.discriminator.forward(&mut tape, &sd, xv, Mode::Eval)?;
    let fake = model.student.discriminator.forward(&mut tape, &sd, s.x_hat, Mode::Eval)?;

    let mut pairs = Vec::new();
    if let Some(t) = model.teacher.filter(|_| model.omegas.vd != 0.0) {
        let tg = t.generator.bind(&mut tape, false);
        let tout = t.generator.forward(&mut tape, &tg, xv, Mode::Eval)?;
        let mut t_feat = None;
        for &layer in &model.critical_layers {
            let (a, b) = match layer {
                CriticalLayer::GeneratedImage => (s.x_hat, tout.x_hat),
                CriticalLayer::BottleneckZ => (s.z, tout.z),
                CriticalLayer::DiscriminatorFeatures => {
                    let tf = match t_feat {
                        Some(v) => v,
                        None => {
                            let td = t.discriminator.bind(&mut tape, false);
                            let v = t.discriminator.forward(&mut tape, &td, s.x_hat, Mode::Eval)?.features;
                            t_feat = Some(v);
                            v
                        }
                    };
                    adapt_features(&mut tape, fake.features, tf)?
                }
            };
            pairs.push((layer, model.alpha(layer)?, a, b));
        }
    }

    let xs = tape.value(xv);
    let xh = tape.value(s.x_hat);
    let fr = tape.value(real.features);
    let ff = tape.value(fake.features);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let l_term = loss_con(xs.sample(i), xh.sample(i))?;
        let r_term = loss_lat(fr.sample(i), ff.sample(i))?;
        let mut layers = Vec::new();
        for &(layer, alpha, a, b) in &pairs {
            let (a, b) = (tape.value(a).sample(i), tape.value(b).sample(i));
            layers.push(LayerDiscrepancy { layer, value: loss_val(a, b)?, direction: loss_dir(a, b)?, alpha });
        }
        let v_term: f64 = layers.iter().map(|l| l.value).sum();
        let d_term: f64 = layers.iter().map(|l| l.direction).sum();
        let d_weighted: f64 = layers.iter().map(|l| l.alpha * l.direction).sum();
        let raw = model.omegas.combine(l_term, r_term, v_term, d_weighted);
        if !raw.is_finite() {
            return Err(Error::NonFinite { what: format!("score of {}", x.ids[i]), detail: format!("{layers:?}") });
        }
        out.push(AnomalyScore {
            sample_id: x.ids[i].clone(),
            label: None,
            l_term,
            r_term,
            v_term,
            d_term,
            d_weighted,
            raw,
            normalized: 0.0,
            layers,
        });
    }
    Ok(out)
}

/// Score one split of `data` batch by batch, attach labels and normalize.
pub fn score_split(model: &ScoringModel<'_>, data: &DatasetIndex, split: Split) -> Result<Vec<AnomalyScore>> {
    let ids = data.ids(split);
    if ids.is_empty() {
        return Err(Error::Data(format!("no {split:?} samples to score")));
    }
    let cfg = ExperimentConfig { image_size: model.image_size, channels: model.channels, ..Default::default() };
    let mut scores = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(model.batch_size.max(1)) {
        let batch = load_batch(data, chunk, &cfg)?;
        scores.extend(score_sample(model, &batch)?);
    }
    for s in &mut scores {
        s.label = data.get(&s.sample_id).map(|r| r.label);
    }
    normalize_scores(&mut scores)?;
    Ok(scores)
}

/// Min-max normalize raw scores over the set. Returns `false` (and gives
/// every sample 0.5) when all raw scores are equal.
pub fn normalize_scores(scores: &mut [AnomalyScore]) -> Result<bool> {
    if scores.is_empty() {
        return Err(Error::Invalid("no scores to normalize".into()));
    }
    let min = scores.iter().map(|s| s.raw).fold(f64::INFINITY, f64::min);
    let max = scores.iter().map(|s| s.raw).fold(f64::NEG_INFINITY, f64::max);
    if max <= min {
        log::warn!("all raw scores equal {min}; normalized scores set to 0.5");
        scores.iter_mut().for_each(|s| s.normalized = 0.5);
        return Ok(false);
    }
    for s in scores.iter_mut() {
        s.normalized = ((s.raw - min) / (max - min)).clamp(0.0, 1.0);
    }
    Ok(true)
}

/// Decision threshold maximizing Youden's J. A score at or above it is
/// called damage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub value: f64,
    pub youden_j: f64,
    pub confusion: Confusion,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn at(scores: &[f64], labels: &[u8], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= threshold, l == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }
}

pub(crate) fn check_binary(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Invalid(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Invalid(format!("non-finite score {s}")));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Invalid(format!("label {l} is not binary")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Invalid("both labels must be present".into()));
    }
    Ok((pos, neg))
}

/// Candidates are the lowest score and the midpoints between consecutive
/// distinct scores; ties in J go to the lower candidate.
pub fn estimate_threshold(scores: &[f64], labels: &[u8]) -> Result<Threshold> {
    let (pos, neg) = check_binary(scores, labels)?;
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut candidates = vec![sorted[0]];
    candidates.extend(sorted.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    let mut best: Option<Threshold> = None;
    for t in candidates {
        let c = Confusion::at(scores, labels, t);
        let j = c.tp as f64 / pos as f64 - c.fp as f64 / neg as f64;
        if best.is_none_or(|b| j > b.youden_j) {
            best = Some(Threshold { value: t, youden_j: j, confusion: c });
        }
    }
    let best = best.expect("at least one candidate");
    if best.youden_j <= 0.0 {
        log::warn!("scores do not separate the labels (Youden J = {})", best.youden_j);
    }
    Ok(best)
}

pub fn scores_csv(scores: &[AnomalyScore]) -> String {
    let mut s = String::from("sample_id,label,l_term,r_term,v_term,d_term,raw,normalized,d_weighted\n");
    for r in scores {
        let label = r.label.map_or(String::new(), |l| l.as_binary().to_string());
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.sample_id, label, r.l_term, r.r_term, r.v_term, r.d_term, r.raw, r.normalized, r.d_weighted
        ));
    }
    s
}

pub fn write_scores_csv(path: &Path, scores: &[AnomalyScore], meta: &Meta) -> Result<()> {
    write_text_with_meta(path, meta, &scores_csv(scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn score(raw: f64) -> AnomalyScore {
        AnomalyScore {
            sample_id: format!("s{raw}"),
            label: None,
            l_term: raw,
            r_term: 0.0,
            v_term: 0.0,
            d_term: 0.0,
            d_weighted: 0.0,
            raw,
            normalized: 0.0,
            layers: Vec::new(),
        }
    }

    #[test]
    fn normalization_examples() {
        let mut s: Vec<_> = [2.0, 4.0, 6.0].into_iter().map(score).collect();
        assert!(normalize_scores(&mut s).unwrap());
        assert_eq!(s.iter().map(|s| s.normalized).collect::<Vec<_>>(), vec![0.0, 0.5, 1.0]);
        let mut s: Vec<_> = [5.0, 5.0].into_iter().map(score).collect();
        assert!(!normalize_scores(&mut s).unwrap());
        assert_eq!(s.iter().map(|s| s.normalized).collect::<Vec<_>>(), vec![0.5, 0.5]);
        assert!(normalize_scores(&mut []).is_err());
    }

    #[test]
    fn threshold_examples() {
        let t = estimate_threshold(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap();
        assert_eq!(t.value, 0.5);
        assert_eq!(t.youden_j, 1.0);
        assert_eq!(t.confusion, Confusion { tp: 2, fp: 0, tn: 2, fn_: 0 });

        let t = estimate_threshold(&[0.9, 0.8, 0.2, 0.1], &[0, 0, 1, 1]).unwrap();
        assert_eq!(t.youden_j, 0.0);
        assert_eq!(t.value, 0.1);

        assert!(estimate_threshold(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(estimate_threshold(&[0.1], &[1, 0]).is_err());
    }

    #[test]
    fn omega_combination() {
        let o = Omegas { l: 1.0, r: 0.0, vd: 0.0 };
        assert_eq!(o.combine(0.3, 9.0, 4.0, 2.0), 0.3);
        let o = Omegas { l: 0.4, r: 0.2, vd: 0.4 };
        assert!((o.combine(1.0, 1.0, 1.0, 1.0) - 1.4).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn normalization_is_monotone_and_bounded(raws in prop::collection::vec(-50.0f64..50.0, 2..30)) {
            let mut s: Vec<_> = raws.iter().copied().map(score).collect();
            normalize_scores(&mut s).unwrap();
            for a in &s {
                prop_assert!((0.0..=1.0).contains(&a.normalized));
                for b in &s {
                    if a.raw < b.raw {
                        prop_assert!(a.normalized <= b.normalized);
                    }
                }
            }
        }

        #[test]
        fn threshold_shifts_with_scores(
            pairs in prop::collection::vec((0.0f64..1.0, 0u8..2), 4..20),
            shift in -5.0f64..5.0,
        ) {
            let mut labels: Vec<u8> = pairs.iter().map(|p| p.1).collect();
            labels[0] = 0;
            labels[1] = 1;
            let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let a = estimate_threshold(&scores, &labels).unwrap();
            let b = estimate_threshold(&shifted, &labels).unwrap();
            prop_assert!((b.value - a.value - shift).abs() < 1e-9);
            prop_assert_eq!(a.youden_j, b.youden_j);
        }

        #[test]
        fn threshold_is_best_over_exhaustive_sweep(
            pairs in prop::collection::vec((0u8..10, 0u8..2), 4..16),
        ) {
            let mut labels: Vec<u8> = pairs.iter().map(|p| p.1).collect();
            labels[0] = 0;
            labels[1] = 1;
            let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64 / 10.0).collect();
            let t = estimate_threshold(&scores, &labels).unwrap();
            let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
            let neg = labels.len() as f64 - pos;
            // Every cut between grid points and below the minimum.
            for k in 0..=10 {
                let cut = k as f64 / 10.0 - 0.05;
                let c = Confusion::at(&scores, &labels, cut);
                let j = c.tp as f64 / pos - c.fp as f64 / neg;
                prop_assert!(j <= t.youden_j + 1e-12);
            }
        }
    }
}
