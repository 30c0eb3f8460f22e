//! Anchor-based BEV detection head with an IoU branch, its losses, analytic
//! gradients and gradient-descent training.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::geometry::{iou_bev, nms_bev, normalize_yaw, Box3D, Detection};
use crate::par;
use crate::rng;
use crate::voxelgrid::{BevFeature, GridSpec};

/// Anchor yaw hypotheses per cell.
pub const ANCHOR_YAWS: [f64; 2] = [0.0, PI / 2.0];
pub const ANCHOR_TYPES: usize = ANCHOR_YAWS.len();
/// Outputs per anchor: class logit, 7 box deltas, IoU logit.
pub const OUTPUTS: usize = 9;
const CLS: usize = 0;
const IOU: usize = 8;
/// Car prior `(l, w, h)` in meters.
pub const CAR_DIMS: [f64; 3] = [3.9, 1.6, 1.56];
pub const POSITIVE_IOU: f64 = 0.6;
pub const NEGATIVE_IOU: f64 = 0.45;
pub const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;
pub const LOGIT_CAP: f64 = 30.0;
/// Log-dimension deltas are clamped to this magnitude when decoding.
pub const MAX_LOG_DIM_DELTA: f64 = 4.0;

/// One anchor per BEV cell per yaw in [`ANCHOR_YAWS`]; anchor `i` sits in
/// cell `i / 2` (row-major) with yaw `ANCHOR_YAWS[i % 2]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorGrid {
    spec: GridSpec,
    height: usize,
    width: usize,
    z_center: f64,
    dims: [f64; 3],
}

impl AnchorGrid {
    pub fn new(spec: &GridSpec, z_center: f64) -> Self {
        Self::with_dims(spec, z_center, CAR_DIMS)
    }

    pub fn with_dims(spec: &GridSpec, z_center: f64, dims: [f64; 3]) -> Self {
        Self {
            spec: *spec,
            height: spec.height(),
            width: spec.width(),
            z_center,
            dims,
        }
    }

    /// Anchors matching the cells of `f`.
    pub fn for_feature(f: &BevFeature, z_center: f64) -> Self {
        Self::new(f.spec(), z_center)
    }

    pub fn len(&self) -> usize {
        self.height * self.width * ANCHOR_TYPES
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn anchor(&self, i: usize) -> Box3D {
        let cell = i / ANCHOR_TYPES;
        let (x, y) = self.spec.cell_center(cell / self.width, cell % self.width);
        Box3D {
            cx: x,
            cy: y,
            cz: self.z_center,
            length: self.dims[0],
            width: self.dims[1],
            height: self.dims[2],
            yaw: ANCHOR_YAWS[i % ANCHOR_TYPES],
            class_id: 0,
        }
    }

    fn fits(&self, f: &BevFeature) -> bool {
        f.height() == self.height && f.width() == self.width
    }

    /// Anchors whose footprint can touch `b`, in increasing index order.
    fn near(&self, b: &Box3D) -> Vec<usize> {
        let reach = b.bev_radius() + 0.5 * self.dims[0].hypot(self.dims[1]);
        let s = &self.spec;
        // cell index range whose centers lie within `reach` of `c`
        let span = |lo: f64, v: f64, c: f64, n: usize| -> Option<(usize, usize)> {
            let a = ((c - reach - lo) / v - 0.5).ceil().max(0.0);
            let b = ((c + reach - lo) / v - 0.5).floor();
            (b >= a && a < n as f64).then(|| (a as usize, (b as usize).min(n - 1)))
        };
        let (Some((y0, y1)), Some((x0, x1))) = (
            span(s.y_min, s.vy, b.cy, self.height),
            span(s.x_min, s.vx, b.cx, self.width),
        ) else {
            return Vec::new();
        };
        let mut out = Vec::with_capacity((y1 - y0 + 1) * (x1 - x0 + 1) * ANCHOR_TYPES);
        for yi in y0..=y1 {
            for xi in x0..=x1 {
                for t in 0..ANCHOR_TYPES {
                    out.push((yi * self.width + xi) * ANCHOR_TYPES + t);
                }
            }
        }
        out
    }
}

/// Affine maps from a BEV cell vector to the 9 outputs of each anchor type.
/// Inputs are first multiplied by a fixed per-channel `input_scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub channels: usize,
    pub input_scale: Vec<f64>,
    /// `[type][output][channel]`, flattened.
    pub weights: Vec<f64>,
    /// `[type][output]`, flattened.
    pub bias: Vec<f64>,
}

impl HeadParams {
    pub fn zeros(channels: usize) -> Self {
        Self {
            channels,
            input_scale: vec![1.0; channels],
            weights: vec![0.0; ANCHOR_TYPES * OUTPUTS * channels],
            bias: vec![0.0; ANCHOR_TYPES * OUTPUTS],
        }
    }

    /// Small uniform weights, class bias at a 1% foreground prior.
    pub fn init(channels: usize, seed: u64) -> Self {
        let mut p = Self::zeros(channels);
        let mut r = rng::rng(seed);
        for w in &mut p.weights {
            *w = r.random_range(-0.01..0.01);
        }
        for t in 0..ANCHOR_TYPES {
            p.bias[t * OUTPUTS + CLS] = -(99.0f64).ln();
        }
        p
    }

    /// Set `input_scale` to the inverse RMS of each channel over the stored
    /// cells of `features`; channels that are always zero keep scale 1.
    pub fn calibrate_input<'a>(
        &mut self,
        features: impl IntoIterator<Item = &'a BevFeature>,
    ) -> Result<()> {
        let c = self.channels;
        let mut sq = vec![0f64; c];
        let mut n = 0usize;
        for f in features {
            if f.channels() != c {
                return Err(Error::ChannelMismatch {
                    expected: c,
                    actual: f.channels(),
                });
            }
            for (_, v) in f.iter() {
                for (s, &x) in sq.iter_mut().zip(v) {
                    *s += x as f64 * x as f64;
                }
                n += 1;
            }
        }
        for (scale, s) in self.input_scale.iter_mut().zip(sq) {
            *scale = if s > 0.0 { (n as f64 / s).sqrt() } else { 1.0 };
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        if self.input_scale.len() != c
            || self.weights.len() != ANCHOR_TYPES * OUTPUTS * c
            || self.bias.len() != ANCHOR_TYPES * OUTPUTS
        {
            return Err(Error::ShapeMismatch(format!(
                "head parameters inconsistent with {c} channels"
            )));
        }
        let all = self
            .input_scale
            .iter()
            .chain(&self.weights)
            .chain(&self.bias);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::invalid("head parameters must be finite"));
        }
        Ok(())
    }

    fn check_feature(&self, f: &BevFeature) -> Result<()> {
        if f.channels() != self.channels {
            return Err(Error::ChannelMismatch {
                expected: self.channels,
                actual: f.channels(),
            });
        }
        Ok(())
    }

    fn forward_cell(&self, t: usize, x: &[f64], out: &mut [f64; OUTPUTS]) {
        for (o, slot) in out.iter_mut().enumerate() {
            *slot = self.forward_output(t, o, x);
        }
    }

    fn forward_output(&self, t: usize, o: usize, x: &[f64]) -> f64 {
        let c = self.channels;
        let row = &self.weights[(t * OUTPUTS + o) * c..(t * OUTPUTS + o + 1) * c];
        self.bias[t * OUTPUTS + o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }

    fn scaled(&self, v: &[f32]) -> Vec<f64> {
        v.iter()
            .zip(&self.input_scale)
            .map(|(&x, s)| x as f64 * s)
            .collect()
    }

    /// Number of trainable scalars (weights then biases).
    pub fn num_trainable(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn trainable(&self, i: usize) -> f64 {
        if i < self.weights.len() {
            self.weights[i]
        } else {
            self.bias[i - self.weights.len()]
        }
    }

    pub fn trainable_mut(&mut self, i: usize) -> &mut f64 {
        let n = self.weights.len();
        if i < n {
            &mut self.weights[i]
        } else {
            &mut self.bias[i - n]
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadGradients {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl HeadGradients {
    pub fn zeros(p: &HeadParams) -> Self {
        Self {
            weights: vec![0.0; p.weights.len()],
            bias: vec![0.0; p.bias.len()],
        }
    }

    pub fn accumulate(&mut self, other: &HeadGradients, scale: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += scale * b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += scale * b;
        }
    }

    pub fn get(&self, i: usize) -> f64 {
        if i < self.weights.len() {
            self.weights[i]
        } else {
            self.bias[i - self.weights.len()]
        }
    }
}

/// Raw head outputs, one record per anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub outputs: Vec<[f64; OUTPUTS]>,
}

impl Predictions {
    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn cls_logit(&self, a: usize) -> f64 {
        self.outputs[a][CLS]
    }

    pub fn deltas(&self, a: usize) -> [f64; 7] {
        let mut d = [0.0; 7];
        d.copy_from_slice(&self.outputs[a][1..8]);
        d
    }

    pub fn iou_logit(&self, a: usize) -> f64 {
        self.outputs[a][IOU]
    }
}

pub fn head_forward(p: &HeadParams, f: &BevFeature, anchors: &AnchorGrid) -> Result<Predictions> {
    p.check_feature(f)?;
    if !anchors.fits(f) {
        return Err(Error::ShapeMismatch(
            "feature map and anchor grid differ".into(),
        ));
    }
    let mut outputs = Vec::with_capacity(anchors.len());
    let mut bias_only = [[0f64; OUTPUTS]; ANCHOR_TYPES];
    for (t, out) in bias_only.iter_mut().enumerate() {
        out.copy_from_slice(&p.bias[t * OUTPUTS..(t + 1) * OUTPUTS]);
    }
    let dense = f.dense_index();
    let values = f.values();
    let c = p.channels;
    for slot in dense {
        match slot {
            None => outputs.extend_from_slice(&bias_only),
            Some(s) => {
                let x = p.scaled(&values[s as usize * c..(s as usize + 1) * c]);
                for t in 0..ANCHOR_TYPES {
                    let mut o = [0.0; OUTPUTS];
                    p.forward_cell(t, &x, &mut o);
                    outputs.push(o);
                }
            }
        }
    }
    Ok(Predictions { outputs })
}

/// Residual encoding of `gt` against `anchor`: center offsets over the
/// anchor diagonal (x, y) and height (z), log dimension ratios, and the yaw
/// difference. Boxes are symmetric under a half turn, so the GT yaw is first
/// taken modulo pi to the value nearest the anchor yaw.
pub fn encode_box(anchor: &Box3D, gt: &Box3D) -> [f64; 7] {
    let diag = anchor.length.hypot(anchor.width);
    let mut dyaw = normalize_yaw(gt.yaw - anchor.yaw);
    if dyaw > PI / 2.0 {
        dyaw -= PI;
    } else if dyaw <= -PI / 2.0 {
        dyaw += PI;
    }
    [
        (gt.cx - anchor.cx) / diag,
        (gt.cy - anchor.cy) / diag,
        (gt.cz - anchor.cz) / anchor.height,
        (gt.length / anchor.length).ln(),
        (gt.width / anchor.width).ln(),
        (gt.height / anchor.height).ln(),
        dyaw,
    ]
}

pub fn decode_box(anchor: &Box3D, d: &[f64; 7]) -> Box3D {
    let diag = anchor.length.hypot(anchor.width);
    Box3D {
        cx: anchor.cx + d[0] * diag,
        cy: anchor.cy + d[1] * diag,
        cz: anchor.cz + d[2] * anchor.height,
        length: anchor.length * d[3].exp(),
        width: anchor.width * d[4].exp(),
        height: anchor.height * d[5].exp(),
        yaw: normalize_yaw(anchor.yaw + d[6]),
        class_id: anchor.class_id,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AnchorTarget {
    Positive { deltas: [f64; 7], iou: f64 },
    Negative,
    Ignored,
}

const NEG: u8 = 0;
const POS: u8 = 1;
const IGN: u8 = 2;

/// Per-anchor assignment; positives carry their regression targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    kind: Vec<u8>,
    positives: BTreeMap<usize, ([f64; 7], f64)>,
}

impl Targets {
    pub fn len(&self) -> usize {
        self.kind.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kind.is_empty()
    }

    pub fn get(&self, a: usize) -> AnchorTarget {
        match self.kind[a] {
            POS => {
                let (deltas, iou) = self.positives[&a];
                AnchorTarget::Positive { deltas, iou }
            }
            IGN => AnchorTarget::Ignored,
            _ => AnchorTarget::Negative,
        }
    }

    pub fn num_positive(&self) -> usize {
        self.positives.len()
    }

    pub fn num_ignored(&self) -> usize {
        self.kind.iter().filter(|&&k| k == IGN).count()
    }

    /// Anchors that are positive, in increasing order.
    pub fn positive_anchors(&self) -> impl Iterator<Item = usize> + '_ {
        self.positives.keys().copied()
    }

    /// Apply a permutation: anchor `i` of the result is anchor `perm[i]` here.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut kind = Vec::with_capacity(perm.len());
        let mut positives = BTreeMap::new();
        for (i, &a) in perm.iter().enumerate() {
            kind.push(self.kind[a]);
            if let Some(t) = self.positives.get(&a) {
                positives.insert(i, *t);
            }
        }
        Self { kind, positives }
    }
}

/// Positive at BEV IoU >= 0.6, negative below 0.45, ignored in between;
/// each label's best anchor is forced positive.
pub fn assign_targets(anchors: &AnchorGrid, labels: &[Box3D]) -> Targets {
    let mut kind = vec![NEG; anchors.len()];
    // anchor -> (best IoU, label)
    let mut best: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let mut forced: Vec<Option<(usize, f64)>> = vec![None; labels.len()];
    for (li, label) in labels.iter().enumerate() {
        for a in anchors.near(label) {
            let iou = iou_bev(&anchors.anchor(a), label);
            if iou <= 0.0 {
                continue;
            }
            let e = best.entry(a).or_insert((0.0, li));
            if iou > e.0 {
                *e = (iou, li);
            }
            if forced[li].is_none_or(|(_, b)| iou > b) {
                forced[li] = Some((a, iou));
            }
        }
    }
    let mut positives = BTreeMap::new();
    for (&a, &(iou, li)) in &best {
        if iou >= POSITIVE_IOU {
            kind[a] = POS;
            positives.insert(a, (encode_box(&anchors.anchor(a), &labels[li]), iou));
        } else if iou >= NEGATIVE_IOU {
            kind[a] = IGN;
        }
    }
    for (li, f) in forced.iter().enumerate() {
        if let Some((a, iou)) = *f {
            let keep_existing = positives.get(&a).is_some_and(|&(_, cur)| cur >= iou);
            if !keep_existing {
                kind[a] = POS;
                positives.insert(a, (encode_box(&anchors.anchor(a), &labels[li]), iou));
            }
        }
    }
    Targets { kind, positives }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub loc_rpn: f64,
    pub cls_rpn: f64,
    pub loc_iou: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(loc_rpn: f64, cls_rpn: f64, loc_iou: f64) -> Self {
        Self {
            loc_rpn,
            cls_rpn,
            loc_iou,
            total: loc_rpn + loc_iou + cls_rpn,
        }
    }

    /// Componentwise mean; the total is recomputed from the parts.
    pub fn mean(items: &[LossBreakdown]) -> Self {
        if items.is_empty() {
            return Self::default();
        }
        let n = items.len() as f64;
        let mut s = [0.0; 3];
        for l in items {
            s[0] += l.loc_rpn;
            s[1] += l.cls_rpn;
            s[2] += l.loc_iou;
        }
        Self::new(s[0] / n, s[1] / n, s[2] / n)
    }
}

/// Semi-supervised objective: `labeled.total + w * unlabeled.total`.
pub fn total_loss(labeled: &LossBreakdown, unlabeled: &LossBreakdown, w: f64) -> f64 {
    labeled.total + w * unlabeled.total
}

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < SMOOTH_L1_BETA {
        0.5 * x * x / SMOOTH_L1_BETA
    } else {
        a - 0.5 * SMOOTH_L1_BETA
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < SMOOTH_L1_BETA {
        x / SMOOTH_L1_BETA
    } else {
        x.signum()
    }
}

fn cap(z: f64) -> f64 {
    z.clamp(-LOGIT_CAP, LOGIT_CAP)
}

pub fn sigmoid(z: f64) -> f64 {
    let z = cap(z);
    1.0 / (1.0 + (-z).exp())
}

/// `ln(1 + e^z)` for a capped logit.
fn softplus(z: f64) -> f64 {
    let z = cap(z);
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn cap_grad(z: f64) -> f64 {
    if z.abs() > LOGIT_CAP {
        0.0
    } else {
        1.0
    }
}

/// Unnormalized loss sums of one anchor and the gradient with respect to
/// its 9 outputs.
fn anchor_terms(
    o: &[f64; OUTPUTS],
    target: AnchorTarget,
    grad: Option<&mut [f64; OUTPUTS]>,
) -> [f64; 3] {
    let z = o[CLS];
    match target {
        AnchorTarget::Ignored => [0.0; 3],
        AnchorTarget::Negative => {
            if let Some(g) = grad {
                *g = [0.0; OUTPUTS];
                g[CLS] = sigmoid(z) * cap_grad(z);
            }
            [0.0, softplus(z), 0.0]
        }
        AnchorTarget::Positive { deltas, iou } => {
            let mut loc = 0.0;
            let mut g = [0.0; OUTPUTS];
            for k in 0..7 {
                let r = o[1 + k] - deltas[k];
                loc += smooth_l1(r);
                g[1 + k] = smooth_l1_grad(r);
            }
            let cls = softplus(-z);
            g[CLS] = (sigmoid(z) - 1.0) * cap_grad(z);
            let s = sigmoid(o[IOU]);
            let r = s - iou;
            g[IOU] = smooth_l1_grad(r) * s * (1.0 - s) * cap_grad(o[IOU]);
            if let Some(out) = grad {
                *out = g;
            }
            [loc, cls, smooth_l1(r)]
        }
    }
}

/// Loss of dense predictions against targets, normalized by the positive count.
pub fn compute_loss(preds: &Predictions, targets: &Targets) -> Result<LossBreakdown> {
    if preds.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let mut s = [0.0; 3];
    for (a, o) in preds.outputs.iter().enumerate() {
        let t = anchor_terms(o, targets.get(a), None);
        for k in 0..3 {
            s[k] += t[k];
        }
    }
    let norm = targets.num_positive().max(1) as f64;
    Ok(LossBreakdown::new(s[0] / norm, s[1] / norm, s[2] / norm))
}

/// Loss and parameter gradients of one feature map; optionally also the
/// gradient with respect to its stored values (laid out like `f.values()`).
pub fn loss_and_gradients(
    p: &HeadParams,
    f: &BevFeature,
    anchors: &AnchorGrid,
    targets: &Targets,
    feature_grad: bool,
) -> Result<(LossBreakdown, HeadGradients, Option<Vec<f64>>)> {
    p.check_feature(f)?;
    if !anchors.fits(f) || targets.len() != anchors.len() {
        return Err(Error::ShapeMismatch(
            "feature, anchors and targets differ".into(),
        ));
    }
    let c = p.channels;
    let mut grads = HeadGradients::zeros(p);
    let mut fgrad = feature_grad.then(|| vec![0f64; f.values().len()]);
    let mut s = [0.0; 3];
    let mut stored = vec![false; anchors.height * anchors.width];
    let mut go = [0.0; OUTPUTS];
    let mut o = [0.0; OUTPUTS];
    for (slot, (k, v)) in f.iter().enumerate() {
        let cell = k[0] as usize * anchors.width + k[1] as usize;
        stored[cell] = true;
        let x = p.scaled(v);
        for t in 0..ANCHOR_TYPES {
            let target = targets.get(cell * ANCHOR_TYPES + t);
            if target == AnchorTarget::Ignored {
                continue;
            }
            if target == AnchorTarget::Negative {
                // only the class logit enters a negative's loss
                o[CLS] = p.forward_output(t, CLS, &x);
            } else {
                p.forward_cell(t, &x, &mut o);
            }
            let terms = anchor_terms(&o, target, Some(&mut go));
            for j in 0..3 {
                s[j] += terms[j];
            }
            for (out, &g) in go.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let base = (t * OUTPUTS + out) * c;
                grads.bias[t * OUTPUTS + out] += g;
                for ch in 0..c {
                    grads.weights[base + ch] += g * x[ch];
                }
                if let Some(fg) = fgrad.as_mut() {
                    for ch in 0..c {
                        fg[slot * c + ch] += g * p.weights[base + ch] * p.input_scale[ch];
                    }
                }
            }
        }
    }
    // anchors of absent cells see only the bias
    let mut neg_count = [0usize; ANCHOR_TYPES];
    for (cell, &is_stored) in stored.iter().enumerate() {
        if is_stored {
            continue;
        }
        for (t, count) in neg_count.iter_mut().enumerate() {
            let a = cell * ANCHOR_TYPES + t;
            match targets.get(a) {
                AnchorTarget::Negative => *count += 1,
                AnchorTarget::Ignored => {}
                target => {
                    o.copy_from_slice(&p.bias[t * OUTPUTS..(t + 1) * OUTPUTS]);
                    let terms = anchor_terms(&o, target, Some(&mut go));
                    for j in 0..3 {
                        s[j] += terms[j];
                    }
                    for (out, g) in go.iter().enumerate() {
                        grads.bias[t * OUTPUTS + out] += g;
                    }
                }
            }
        }
    }
    for (t, &count) in neg_count.iter().enumerate() {
        let z = p.bias[t * OUTPUTS + CLS];
        s[1] += count as f64 * softplus(z);
        grads.bias[t * OUTPUTS + CLS] += count as f64 * sigmoid(z) * cap_grad(z);
    }
    let norm = targets.num_positive().max(1) as f64;
    let inv = 1.0 / norm;
    for g in grads.weights.iter_mut().chain(grads.bias.iter_mut()) {
        *g *= inv;
    }
    if let Some(fg) = fgrad.as_mut() {
        fg.iter_mut().for_each(|g| *g *= inv);
    }
    Ok((
        LossBreakdown::new(s[0] * inv, s[1] * inv, s[2] * inv),
        grads,
        fgrad,
    ))
}

/// Mean loss and mean gradient over a batch. Items are evaluated in
/// parallel and reduced in input order.
pub fn batch_gradients(
    p: &HeadParams,
    batch: &[(&BevFeature, &[Box3D])],
    anchors: &AnchorGrid,
) -> Result<(LossBreakdown, HeadGradients)> {
    let per_item = par::try_map(batch, |(f, labels)| {
        let targets = assign_targets(anchors, labels);
        loss_and_gradients(p, f, anchors, &targets, false).map(|(l, g, _)| (l, g))
    })?;
    let mut grads = HeadGradients::zeros(p);
    if per_item.is_empty() {
        return Ok((LossBreakdown::default(), grads));
    }
    let scale = 1.0 / per_item.len() as f64;
    let mut losses = Vec::with_capacity(per_item.len());
    for (l, g) in &per_item {
        grads.accumulate(g, scale);
        losses.push(*l);
    }
    Ok((LossBreakdown::mean(&losses), grads))
}

fn descend(p: &HeadParams, g: &HeadGradients, lr: f64) -> HeadParams {
    let mut next = p.clone();
    for (w, d) in next.weights.iter_mut().zip(&g.weights) {
        *w -= lr * d;
    }
    for (b, d) in next.bias.iter_mut().zip(&g.bias) {
        *b -= lr * d;
    }
    next
}

fn check_lr(lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate {lr} must be >= 0")));
    }
    Ok(())
}

/// One gradient-descent step on the mean batch loss.
pub fn train_step(
    p: &HeadParams,
    batch: &[(&BevFeature, &[Box3D])],
    anchors: &AnchorGrid,
    lr: f64,
) -> Result<(HeadParams, LossBreakdown)> {
    check_lr(lr)?;
    let (loss, g) = batch_gradients(p, batch, anchors)?;
    Ok((descend(p, &g, lr), loss))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SslStepLoss {
    pub labeled: LossBreakdown,
    pub unlabeled: LossBreakdown,
    pub total: f64,
}

/// One step on `labeled + w * unlabeled`; the two batches are averaged
/// separately.
pub fn ssl_step(
    p: &HeadParams,
    labeled: &[(&BevFeature, &[Box3D])],
    unlabeled: &[(&BevFeature, &[Box3D])],
    w: f64,
    anchors: &AnchorGrid,
    lr: f64,
) -> Result<(HeadParams, SslStepLoss)> {
    check_lr(lr)?;
    if !(w >= 0.0 && w.is_finite()) {
        return Err(Error::invalid(format!("unlabeled weight {w} must be >= 0")));
    }
    let (ll, mut g) = batch_gradients(p, labeled, anchors)?;
    let (lu, gu) = batch_gradients(p, unlabeled, anchors)?;
    g.accumulate(&gu, w);
    let loss = SslStepLoss {
        labeled: ll,
        unlabeled: lu,
        total: total_loss(&ll, &lu, w),
    };
    Ok((descend(p, &g, lr), loss))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeConfig {
    pub score_thresh: f64,
    pub nms_iou: f64,
    /// Highest-scoring candidates kept before NMS.
    pub max_candidates: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            score_thresh: 0.1,
            nms_iou: 0.1,
            max_candidates: 500,
        }
    }
}

pub fn decode_predictions(
    preds: &Predictions,
    anchors: &AnchorGrid,
    score_thresh: f64,
    nms_iou: f64,
) -> Result<Vec<Detection>> {
    decode_with(
        preds,
        anchors,
        &DecodeConfig {
            score_thresh,
            nms_iou,
            max_candidates: usize::MAX,
        },
    )
}

pub fn decode_with(
    preds: &Predictions,
    anchors: &AnchorGrid,
    cfg: &DecodeConfig,
) -> Result<Vec<Detection>> {
    let unit = 0.0..=1.0;
    if !unit.contains(&cfg.score_thresh) || !unit.contains(&cfg.nms_iou) {
        return Err(Error::invalid("decode thresholds must lie in [0, 1]"));
    }
    if preds.len() != anchors.len() {
        return Err(Error::ShapeMismatch(
            "predictions and anchors differ".into(),
        ));
    }
    let mut cand: Vec<(f64, usize)> = (0..preds.len())
        .filter_map(|a| {
            let s = sigmoid(preds.cls_logit(a));
            (s >= cfg.score_thresh).then_some((s, a))
        })
        .collect();
    cand.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    cand.truncate(cfg.max_candidates);
    let dets = cand
        .into_iter()
        .map(|(score, a)| {
            let mut d = preds.deltas(a);
            for v in &mut d[3..6] {
                *v = v.clamp(-MAX_LOG_DIM_DELTA, MAX_LOG_DIM_DELTA);
            }
            let b = decode_box(&anchors.anchor(a), &d);
            let b = Box3D::new(
                b.cx, b.cy, b.cz, b.length, b.width, b.height, b.yaw, b.class_id,
            )?;
            Detection::new(b, score, sigmoid(preds.iou_logit(a)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(nms_bev(&dets, cfg.nms_iou))
}

/// Forward and decode in one call.
pub fn detect(
    p: &HeadParams,
    f: &BevFeature,
    anchors: &AnchorGrid,
    cfg: &DecodeConfig,
) -> Result<Vec<Detection>> {
    decode_with(&head_forward(p, f, anchors)?, anchors, cfg)
}
