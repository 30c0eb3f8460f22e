//! Greedy detection matching and interpolated average precision.

use crate::error::{Error, Result};
use crate::geometry::{iou_3d, iou_bev, Box3D, Detection};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Bev,
    ThreeD,
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::Bev => "bev",
            Metric::ThreeD => "3d",
        }
    }

    fn iou(&self, a: &Box3D, b: &Box3D) -> f64 {
        match self {
            Metric::Bev => iou_bev(a, b),
            Metric::ThreeD => iou_3d(a, b),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub metric: Metric,
    pub ap_points: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.7,
            metric: Metric::Bev,
            ap_points: 40,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::invalid(format!(
                "IoU threshold {} outside (0, 1]",
                self.iou_threshold
            )));
        }
        if self.ap_points < 2 {
            return Err(Error::invalid("AP needs at least 2 recall points"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// `(cls_conf, is_tp)` in descending score order (ties keep input order).
    pub ranked: Vec<(f64, bool)>,
    pub gt_matched: Vec<bool>,
}

pub fn match_detections(dets: &[Detection], gts: &[Box3D], cfg: &EvalConfig) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .cls_conf
            .total_cmp(&dets[a].cls_conf)
            .then(a.cmp(&b))
    });
    let mut gt_matched = vec![false; gts.len()];
    let ranked = order
        .into_iter()
        .map(|i| {
            let d = &dets[i];
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if gt_matched[g] {
                    continue;
                }
                let iou = cfg.metric.iou(&d.bbox, gt);
                if iou >= cfg.iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            if let Some((g, _)) = best {
                gt_matched[g] = true;
            }
            (d.cls_conf, best.is_some())
        })
        .collect();
    MatchResult { ranked, gt_matched }
}

/// AP from TP flags in descending score order: precision is made monotone
/// from the right and sampled at recall `j / points` for `j = 1..=points`.
pub fn average_precision(tp_flags: &[bool], num_gts: usize, cfg: &EvalConfig) -> f64 {
    if num_gts == 0 {
        return if tp_flags.is_empty() { 1.0 } else { 0.0 };
    }
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (i, &is_tp) in tp_flags.iter().enumerate() {
        tp += is_tp as usize;
        recall.push(tp as f64 / num_gts as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let n = cfg.ap_points;
    let mut sum = 0.0;
    let mut k = 0usize;
    for j in 1..=n {
        let r = j as f64 / n as f64;
        while k < recall.len() && recall[k] < r - 1e-12 {
            k += 1;
        }
        if k < recall.len() {
            sum += precision[k];
        }
    }
    sum / n as f64
}

/// Pool detections of many scenes, match per scene, and compute one AP.
pub fn evaluate_scenes(scenes: &[(Vec<Detection>, Vec<Box3D>)], cfg: &EvalConfig) -> Result<f64> {
    cfg.validate()?;
    let mut ranked: Vec<(f64, usize, bool)> = Vec::new();
    let mut num_gts = 0;
    for (s, (dets, gts)) in scenes.iter().enumerate() {
        num_gts += gts.len();
        ranked.extend(
            match_detections(dets, gts, cfg)
                .ranked
                .into_iter()
                .map(|(score, tp)| (score, s, tp)),
        );
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let flags: Vec<bool> = ranked.iter().map(|r| r.2).collect();
    Ok(average_precision(&flags, num_gts, cfg))
}
