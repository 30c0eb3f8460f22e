//! Confidence filtering of client detections and hybrid label sets.

use crate::error::{Error, Result};
use crate::geometry::{iou_bev, Box3D, Detection};
use crate::gtbank::Placement;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SslThresholds {
    pub tau_iou: f64,
    pub tau_cls: f64,
}

impl Default for SslThresholds {
    fn default() -> Self {
        Self {
            tau_iou: 0.5,
            tau_cls: 0.4,
        }
    }
}

impl SslThresholds {
    pub fn new(tau_iou: f64, tau_cls: f64) -> Result<Self> {
        let t = Self { tau_iou, tau_cls };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| (0.0..=1.0).contains(&v);
        if !ok(self.tau_iou) || !ok(self.tau_cls) {
            return Err(Error::invalid(format!(
                "thresholds ({}, {}) must lie in [0, 1]",
                self.tau_iou, self.tau_cls
            )));
        }
        Ok(())
    }

    /// Equality passes.
    pub fn accepts(&self, d: &Detection) -> bool {
        d.cls_conf >= self.tau_cls && d.iou_conf >= self.tau_iou
    }
}

/// Boxes of the detections passing both thresholds, in input order.
pub fn filter_detections(dets: &[Detection], th: &SslThresholds) -> Vec<Box3D> {
    dets.iter()
        .filter(|d| th.accepts(d))
        .map(|d| d.bbox)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelOrigin {
    Pseudo,
    Gt,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HybridLabel {
    pub bbox: Box3D,
    pub origin: LabelOrigin,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct HybridLabelSet {
    pub labels: Vec<HybridLabel>,
}

impl HybridLabelSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn boxes(&self) -> Vec<Box3D> {
        self.labels.iter().map(|l| l.bbox).collect()
    }

    pub fn of_origin(&self, origin: LabelOrigin) -> impl Iterator<Item = &Box3D> + '_ {
        self.labels
            .iter()
            .filter(move |l| l.origin == origin)
            .map(|l| &l.bbox)
    }

    /// Largest BEV IoU between a GT-origin and a pseudo-origin label.
    pub fn max_cross_overlap(&self) -> f64 {
        let mut worst = 0.0f64;
        for g in self.of_origin(LabelOrigin::Gt) {
            for p in self.of_origin(LabelOrigin::Pseudo) {
                worst = worst.max(iou_bev(g, p));
            }
        }
        worst
    }
}

/// Pseudo boxes first, then placed GT boxes at their placed pose. The
/// placements must have been sampled with the pseudo boxes as forbidden.
pub fn make_hybrid(pseudo: &[Box3D], placed_gt: &[Placement]) -> Result<HybridLabelSet> {
    for (i, g) in placed_gt.iter().enumerate() {
        for (j, p) in pseudo.iter().enumerate() {
            let iou = iou_bev(&g.bbox, p);
            if iou > 0.0 {
                return Err(Error::Contract(format!(
                    "placed GT {i} overlaps pseudo label {j} (BEV IoU {iou})"
                )));
            }
        }
    }
    let labels = pseudo
        .iter()
        .map(|b| HybridLabel {
            bbox: *b,
            origin: LabelOrigin::Pseudo,
        })
        .chain(placed_gt.iter().map(|g| HybridLabel {
            bbox: g.bbox,
            origin: LabelOrigin::Gt,
        }))
        .collect();
    Ok(HybridLabelSet { labels })
}
