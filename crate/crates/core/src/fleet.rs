//! Synthetic scenes, client-side inference, and the server training loop.

use std::f64::consts::PI;

use rand::Rng as _;

use crate::augment::{
    augment_points, f_gt_grid, perturb_feature, placed_points, rmse_map, AugPair, FeaturePolicy,
    RawPolicy, RmseMap, DEFAULT_NULL_RATIO,
};
use crate::backbone::{
    extract_grid_feature, extract_set_feature, init_backbone, Backbone, BackboneGradients,
    BackboneSpec, SetFeature,
};
use crate::detector::{
    assign_targets, batch_gradients, detect, loss_and_gradients, ssl_step, total_loss, AnchorGrid,
    DecodeConfig, HeadGradients, HeadParams, LossBreakdown,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_scenes, EvalConfig};
use crate::geometry::{iou_bev, normalize_yaw, Box3D, Detection, Point3};
use crate::gtbank::{build_gt_database, sample_placements, GtDatabase, Placement};
use crate::par;
use crate::pseudolabel::{filter_detections, make_hybrid, SslThresholds};
use crate::rng;
use crate::voxelgrid::{voxelize, BevFeature, GridSpec};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneSpec {
    pub extent: GridSpec,
    pub cars_min: usize,
    pub cars_max: usize,
    pub points_per_car_min: usize,
    pub points_per_car_max: usize,
    pub clutter_points: usize,
    pub ground_z: f64,
    /// Relative jitter of each car dimension around [`crate::detector::CAR_DIMS`].
    pub dim_jitter: f64,
    /// Cars head along +x or -x, turned by up to this many radians;
    /// `PI` gives uniformly random headings.
    pub heading_spread: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            extent: GridSpec::default(),
            cars_min: 2,
            cars_max: 8,
            points_per_car_min: 40,
            points_per_car_max: 150,
            clutter_points: 2000,
            ground_z: -1.6,
            dim_jitter: 0.1,
            heading_spread: 0.15,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.extent.validate()?;
        if self.cars_min == 0 || self.cars_min > self.cars_max {
            return Err(Error::invalid(
                "car count range must satisfy 1 <= min <= max",
            ));
        }
        if self.points_per_car_min == 0 || self.points_per_car_min > self.points_per_car_max {
            return Err(Error::invalid(
                "points per car must satisfy 1 <= min <= max",
            ));
        }
        if !(0.0..0.5).contains(&self.dim_jitter) {
            return Err(Error::invalid("dimension jitter must lie in [0, 0.5)"));
        }
        if !(0.0..=PI).contains(&self.heading_spread) {
            return Err(Error::invalid("heading spread must lie in [0, pi]"));
        }
        let [l, w, h] = crate::detector::CAR_DIMS;
        let top = self.ground_z + h * (1.0 + self.dim_jitter);
        if self.ground_z < self.extent.z_min || top >= self.extent.z_max {
            return Err(Error::invalid(
                "cars standing on the ground must fit the z extent",
            ));
        }
        let reach = 0.5 * (l.hypot(w)) * (1.0 + self.dim_jitter);
        if self.extent.x_max - self.extent.x_min <= 2.0 * reach
            || self.extent.y_max - self.extent.y_min <= 2.0 * reach
        {
            return Err(Error::invalid("extent too small to hold a car"));
        }
        Ok(())
    }

    /// Height of anchor centers for cars standing on the ground.
    pub fn anchor_z(&self) -> f64 {
        self.ground_z + crate::detector::CAR_DIMS[2] / 2.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: u64,
    pub points: Vec<Point3>,
    pub labels: Vec<Box3D>,
}

/// Rejection draws per car before the generator gives up on the scene layout.
const CAR_ATTEMPTS: usize = 200;
/// Surface points are drawn on a slightly shrunken shell so they stay inside.
const SHELL_SCALE: f64 = 0.98;
/// Fraction of car points on the roof outline.
const ROOF_FRACTION: f64 = 0.2;

fn jitter(r: &mut rng::Rng, v: f64, j: f64) -> f64 {
    if j == 0.0 {
        v
    } else {
        v * r.random_range(1.0 - j..=1.0 + j)
    }
}

/// Points on the two faces of `b` seen from the sensor at the origin, plus
/// the outline of the roof, which a roof-mounted sensor sees all around.
fn car_shell(r: &mut rng::Rng, b: &Box3D, n: usize) -> Vec<Point3> {
    let sensor = b.to_local(&Point3::new(0.0, 0.0, 0.0, 0.0));
    let (hl, hw, hh) = (
        SHELL_SCALE * b.length / 2.0,
        SHELL_SCALE * b.width / 2.0,
        SHELL_SCALE * b.height / 2.0,
    );
    let sx = if sensor.x >= 0.0 { hl } else { -hl };
    let sy = if sensor.y >= 0.0 { hw } else { -hw };
    // faces weighted by area: the x-face spans the width, the y-face the length
    let p_xface = b.width / (b.width + b.length);
    (0..n)
        .map(|_| {
            let intensity = r.random_range(0.3..0.9);
            let (x, y, z) = if r.random::<f64>() < ROOF_FRACTION {
                // uniform along the roof perimeter
                let s = r.random_range(0.0..2.0 * (hl + hw));
                let (x, y) = if s < 2.0 * hl {
                    (s - hl, if r.random::<bool>() { hw } else { -hw })
                } else {
                    (if r.random::<bool>() { hl } else { -hl }, s - 2.0 * hl - hw)
                };
                (x, y, hh)
            } else if r.random::<f64>() < p_xface {
                (sx, r.random_range(-hw..=hw), r.random_range(-hh..=hh))
            } else {
                (r.random_range(-hl..=hl), sy, r.random_range(-hh..=hh))
            };
            b.to_world(&Point3::new(x, y, z, intensity))
        })
        .collect()
}

/// Ground clutter over the whole extent plus non-overlapping cars whose
/// visible faces are sampled; clutter inside any car is removed.
pub fn gen_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let e = &spec.extent;
    let mut r = rng::rng(seed);
    let n_cars = r.random_range(spec.cars_min..=spec.cars_max);
    let [l0, w0, h0] = crate::detector::CAR_DIMS;
    let mut labels: Vec<Box3D> = Vec::with_capacity(n_cars);
    while labels.len() < n_cars {
        let mut placed = false;
        for _ in 0..CAR_ATTEMPTS {
            let (l, w, h) = (
                jitter(&mut r, l0, spec.dim_jitter),
                jitter(&mut r, w0, spec.dim_jitter),
                jitter(&mut r, h0, spec.dim_jitter),
            );
            let reach = 0.5 * l.hypot(w);
            let x = r.random_range(e.x_min + reach..e.x_max - reach);
            let y = r.random_range(e.y_min + reach..e.y_max - reach);
            let heading = if r.random::<bool>() { 0.0 } else { PI };
            let turn = if spec.heading_spread > 0.0 {
                r.random_range(-spec.heading_spread..spec.heading_spread)
            } else {
                0.0
            };
            let yaw = normalize_yaw(heading + turn);
            let b = Box3D::new(x, y, spec.ground_z + h / 2.0, l, w, h, yaw, 0)?;
            if labels.iter().all(|o| iou_bev(o, &b) == 0.0) {
                labels.push(b);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::invalid(format!(
                "could not place {n_cars} cars without overlap in the extent"
            )));
        }
    }
    let mut points = Vec::with_capacity(spec.clutter_points + n_cars * spec.points_per_car_max);
    for _ in 0..spec.clutter_points {
        let p = Point3::new(
            r.random_range(e.x_min..e.x_max),
            r.random_range(e.y_min..e.y_max),
            spec.ground_z + r.random_range(-0.05..0.25),
            r.random_range(0.0..0.3),
        );
        if !labels.iter().any(|b| b.contains(&p)) {
            points.push(p);
        }
    }
    for b in &labels {
        let n = r.random_range(spec.points_per_car_min..=spec.points_per_car_max);
        points.extend(car_shell(&mut r, b, n));
    }
    Ok(Scene {
        id: seed,
        points,
        labels,
    })
}

/// What a vehicle uploads for one unlabeled scene.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePayload {
    pub scene_id: u64,
    pub feature: BevFeature,
    pub set_feature: Option<SetFeature>,
    pub detections: Vec<Detection>,
}

/// Largest `f32` not above `pi`.
const PI_F32_BELOW: f32 = 3.141_592_4;

fn quantize_yaw(yaw: f64) -> f64 {
    let q = yaw as f32;
    if q as f64 > PI {
        PI_F32_BELOW as f64
    } else if q as f64 <= -PI {
        -(PI_F32_BELOW as f64)
    } else {
        q as f64
    }
}

/// Round a detection to what the payload format can carry (32-bit floats).
pub fn quantize_detection(d: &Detection) -> Result<Detection> {
    let q = |v: f64| v as f32 as f64;
    let b = &d.bbox;
    let bbox = Box3D::new(
        q(b.cx),
        q(b.cy),
        q(b.cz),
        q(b.length),
        q(b.width),
        q(b.height),
        quantize_yaw(b.yaw),
        b.class_id,
    )?;
    Detection::new(
        bbox,
        q(d.cls_conf).clamp(0.0, 1.0),
        q(d.iou_conf).clamp(0.0, 1.0),
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClientConfig {
    pub decode: DecodeConfig,
    pub anchor_z: f64,
    /// Also ship a set-type feature with this many keypoints.
    pub set_points: Option<usize>,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            decode: DecodeConfig::default(),
            anchor_z: SceneSpec::default().anchor_z(),
            set_points: None,
        }
    }
}

/// One backbone pass; the detections are decoded from the same feature
/// that is shipped.
pub fn client_infer(
    bb: &Backbone,
    head: &HeadParams,
    scene: &Scene,
    spec: &GridSpec,
    cfg: &ClientConfig,
) -> Result<FeaturePayload> {
    if !bb.is_frozen() {
        return Err(Error::Contract("clients run a frozen backbone".into()));
    }
    let feature = extract_grid_feature(bb, &voxelize(&scene.points, spec))?;
    let anchors = AnchorGrid::for_feature(&feature, cfg.anchor_z);
    let detections = detect(head, &feature, &anchors, &cfg.decode)?
        .iter()
        .map(quantize_detection)
        .collect::<Result<Vec<_>>>()?;
    let set_feature = match cfg.set_points {
        Some(n) => Some(extract_set_feature(
            bb,
            &scene.points,
            &feature,
            n,
            scene.id,
        )?),
        None => None,
    };
    Ok(FeaturePayload {
        scene_id: scene.id,
        feature,
        set_feature,
        detections,
    })
}

/// Server-side treatment of unlabeled payloads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Policy {
    /// Labeled data only; unlabeled payloads are ignored.
    None,
    /// Feature-level GT sampling with hybrid pseudo labels.
    Fgt,
    FFlip,
    FNoise,
    /// Random nulling of stored feature values.
    Frs,
    FRotate,
    /// Raw-point GT sampling on unlabeled scenes with a trainable backbone.
    RawUpcycle,
}

impl Policy {
    pub const ALL: [Policy; 7] = [
        Policy::None,
        Policy::Fgt,
        Policy::FFlip,
        Policy::FNoise,
        Policy::Frs,
        Policy::FRotate,
        Policy::RawUpcycle,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Policy::None => "none",
            Policy::Fgt => "fgt",
            Policy::FFlip => "fflip",
            Policy::FNoise => "fnoise",
            Policy::Frs => "frs",
            Policy::FRotate => "frotate",
            Policy::RawUpcycle => "raw",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown policy {s:?}")))
    }

    fn uses_unlabeled(&self) -> bool {
        *self != Policy::None
    }
}

/// Labeled to unlabeled items per mini-batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchRatio {
    OneToOne,
    OneToTwo,
}

impl BatchRatio {
    pub fn unlabeled_per_labeled(&self) -> usize {
        match self {
            BatchRatio::OneToOne => 1,
            BatchRatio::OneToTwo => 2,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "1:1" => Ok(BatchRatio::OneToOne),
            "1:2" => Ok(BatchRatio::OneToTwo),
            other => Err(Error::Config(format!(
                "batch ratio {other:?} is not 1:1 or 1:2"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            BatchRatio::OneToOne => "1:1",
            BatchRatio::OneToTwo => "1:2",
        }
    }
}

/// Step size over the steps of one training phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate to zero.
    Cosine,
}

impl LrSchedule {
    pub fn at(&self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                base * 0.5 * (1.0 + (PI * t).cos())
            }
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            other => Err(Error::Config(format!("unknown schedule {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub scene: SceneSpec,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
    /// Labeled items per mini-batch.
    pub batch_labeled: usize,
    pub batch_ratio: BatchRatio,
    pub w: f64,
    pub thresholds: SslThresholds,
    pub policy: Policy,
    pub gt_per_scene: usize,
    /// Distinct GT-sampled versions of each labeled scene.
    pub aug_pool: usize,
    pub pretrain_epochs: usize,
    pub epochs: usize,
    pub pretrain_lr: f64,
    /// Head step size of the semi-supervised phase.
    pub lr: f64,
    /// Applied separately to pretraining and to the semi-supervised phase.
    pub schedule: LrSchedule,
    /// Backbone step size during pretraining (and for [`Policy::RawUpcycle`]).
    pub backbone_lr: f64,
    /// Master seed; every random stream of a run is derived from it.
    pub seed: u64,
    /// Layer layout; its `seed` field is replaced by one derived from `seed`.
    pub backbone: BackboneSpec,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
    /// Feature noise level relative to the RMS of stored feature values.
    pub noise_sigma: f64,
    pub rotate_max: f64,
    pub null_ratio: f64,
    pub freeze_backbone: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let (n_labeled, n_unlabeled) = partial_label(300, 0.1);
        Self {
            scene: SceneSpec::default(),
            n_labeled,
            n_unlabeled,
            n_test: 30,
            batch_labeled: 2,
            batch_ratio: BatchRatio::OneToOne,
            w: 1.0,
            thresholds: SslThresholds::default(),
            policy: Policy::Fgt,
            gt_per_scene: 5,
            aug_pool: 4,
            pretrain_epochs: 10,
            epochs: 5,
            pretrain_lr: 0.004,
            lr: 0.001,
            schedule: LrSchedule::Cosine,
            backbone_lr: 0.0,
            seed: 0,
            backbone: BackboneSpec::default(),
            decode: DecodeConfig::default(),
            eval: EvalConfig::default(),
            noise_sigma: 0.1,
            rotate_max: PI / 4.0,
            null_ratio: DEFAULT_NULL_RATIO,
            freeze_backbone: true,
        }
    }
}

/// `(labeled, unlabeled)` counts for a partial-label split of `total` scenes.
pub fn partial_label(total: usize, label_ratio: f64) -> (usize, usize) {
    let n = ((total as f64 * label_ratio).round() as usize).min(total);
    (n, total - n)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.scene.validate()?;
        self.backbone.validate()?;
        self.thresholds.validate()?;
        self.eval.validate()?;
        if self.n_labeled == 0 {
            return bad("at least one labeled scene is required".into());
        }
        if self.aug_pool == 0 {
            return bad("aug_pool must be >= 1".into());
        }
        if self.batch_labeled == 0 {
            return bad("batch_labeled must be >= 1".into());
        }
        if !(self.w >= 0.0 && self.w.is_finite()) {
            return bad(format!("w = {} must be >= 0", self.w));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite())
            || !(self.pretrain_lr >= 0.0 && self.pretrain_lr.is_finite())
            || !(self.backbone_lr >= 0.0 && self.backbone_lr.is_finite())
        {
            return bad("learning rates must be finite and >= 0".into());
        }
        if !(self.noise_sigma >= 0.0) || !(self.rotate_max >= 0.0 && self.rotate_max <= PI) {
            return bad("noise sigma must be >= 0 and rotate_max in [0, pi]".into());
        }
        if !(self.null_ratio > 0.0 && self.null_ratio < 1.0) {
            return bad("null ratio must lie in (0, 1)".into());
        }
        if self.policy == Policy::RawUpcycle && self.freeze_backbone {
            return bad(
                "the raw policy trains the backbone; it cannot run with a frozen backbone".into(),
            );
        }
        if self.policy != Policy::RawUpcycle && !self.freeze_backbone {
            return bad("feature-level policies require a frozen backbone".into());
        }
        Ok(())
    }

    fn backbone_spec(&self) -> BackboneSpec {
        BackboneSpec {
            seed: rng::derive(self.seed, &[stream::BACKBONE]),
            ..self.backbone.clone()
        }
    }

    fn anchors(&self) -> AnchorGrid {
        let out = self.backbone.output_spec(&self.scene.extent);
        AnchorGrid::new(&out, self.scene.anchor_z())
    }

    /// What the vehicles run for this configuration.
    pub fn client_config(&self) -> ClientConfig {
        ClientConfig {
            decode: self.decode,
            anchor_z: self.scene.anchor_z(),
            set_points: None,
        }
    }

    fn ssl_steps(&self) -> usize {
        let per_step = self.batch_labeled * self.batch_ratio.unlabeled_per_labeled();
        if self.n_unlabeled == 0 {
            self.n_labeled.div_ceil(self.batch_labeled)
        } else {
            self.n_unlabeled.div_ceil(per_step)
        }
    }
}

/// Stream identifiers for [`rng::derive`].
mod stream {
    pub const BACKBONE: u64 = 1;
    pub const HEAD: u64 = 2;
    pub const LABELED: u64 = 3;
    pub const UNLABELED: u64 = 4;
    pub const TEST: u64 = 5;
    pub const LABELED_AUG: u64 = 6;
    pub const PRETRAIN_ORDER: u64 = 7;
    pub const LABELED_ORDER: u64 = 8;
    pub const UNLABELED_ORDER: u64 = 9;
    pub const PLACEMENT: u64 = 10;
    pub const FEATURE_AUG: u64 = 11;
    pub const ANALYSIS_SCENE: u64 = 12;
    pub const ANALYSIS_SOURCE: u64 = 13;
    pub const ANALYSIS_AUG: u64 = 14;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub ap: f64,
    pub loss_labeled: f64,
    pub loss_unlabeled: f64,
    pub loss_total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutcome {
    pub policy: Policy,
    /// AP of the pretrained model before the semi-supervised phase.
    pub pretrained_ap: f64,
    pub timeline: Vec<EpochMetrics>,
    /// Head parameters at the end of every epoch.
    pub head_trajectory: Vec<HeadParams>,
    /// Backbone weights at the start and at the end of the semi-supervised phase.
    pub backbone_before: Vec<Vec<f32>>,
    pub backbone_after: Vec<Vec<f32>>,
    /// Largest BEV IoU between a GT-origin and a pseudo-origin label seen in any batch.
    pub max_hybrid_overlap: f64,
    pub gt_database_size: usize,
    pub mean_pseudo_labels: f64,
}

impl ExperimentOutcome {
    pub fn final_ap(&self) -> f64 {
        self.timeline.last().map_or(self.pretrained_ap, |m| m.ap)
    }
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    let mut r = rng::rng(seed);
    for i in (1..n).rev() {
        v.swap(i, r.random_range(0..=i));
    }
    v
}

/// Version `variant` of labeled scene `i` under raw GT sampling; placements
/// avoid the scene's own labels.
fn labeled_variant(
    cfg: &ExperimentConfig,
    db: &GtDatabase,
    scene: &Scene,
    i: usize,
    variant: usize,
) -> Result<(Vec<Point3>, Vec<Box3D>)> {
    let seed = rng::derive(cfg.seed, &[stream::LABELED_AUG, variant as u64, i as u64]);
    let spec = &cfg.scene;
    let placements = sample_placements(
        db,
        &scene.labels,
        cfg.gt_per_scene,
        &spec.extent,
        spec.ground_z,
        seed,
    )?;
    augment_points(
        &scene.points,
        &scene.labels,
        &RawPolicy::GtPlace(placements),
        Some(db),
        &spec.extent,
        seed,
    )
}

/// Backbone features of every labeled scene under every pool variant.
fn labeled_pool(
    cfg: &ExperimentConfig,
    bb: &Backbone,
    labeled: &[Scene],
    db: &GtDatabase,
) -> Result<LabeledPool> {
    (0..cfg.aug_pool)
        .map(|v| {
            par::try_map_range(labeled.len(), |i| {
                let (pts, boxes) = labeled_variant(cfg, db, &labeled[i], i, v)?;
                Ok((
                    extract_grid_feature(bb, &voxelize(&pts, &cfg.scene.extent))?,
                    boxes,
                ))
            })
        })
        .collect()
}

fn evaluate_head(
    head: &HeadParams,
    test: &[(BevFeature, Vec<Box3D>)],
    anchors: &AnchorGrid,
    cfg: &ExperimentConfig,
) -> Result<f64> {
    let scored = par::try_map(test, |(f, labels)| {
        detect(head, f, anchors, &cfg.decode).map(|d| (d, labels.clone()))
    })?;
    evaluate_scenes(&scored, &cfg.eval)
}

/// `[variant][scene]` features with their augmented labels.
pub type LabeledPool = Vec<Vec<(BevFeature, Vec<Box3D>)>>;

/// Everything shared by all frozen-backbone policies of one configuration:
/// scenes, the pretrained model, the GT database, client payloads and test
/// features.
pub struct Prepared {
    pub labeled: Vec<Scene>,
    pub unlabeled: Vec<Scene>,
    pub backbone: Backbone,
    pub head: HeadParams,
    pub db: GtDatabase,
    /// GT-sampled labeled features under the frozen backbone.
    pub pool: LabeledPool,
    /// RMS of the stored values of the GT-sampled labeled features.
    pub feature_rms: f64,
    pub payloads: Vec<FeaturePayload>,
    pub test_scenes: Vec<Scene>,
    pub test: Vec<(BevFeature, Vec<Box3D>)>,
    pub pretrained_ap: f64,
}

fn gen_scenes(spec: &SceneSpec, seed: u64, kind: u64, n: usize) -> Result<Vec<Scene>> {
    let seeds: Vec<u64> = (0..n as u64)
        .map(|i| rng::derive(seed, &[kind, i]))
        .collect();
    par::try_map(&seeds, |&s| gen_scene(spec, s))
}

fn descend(head: &mut HeadParams, g: &HeadGradients, lr: f64) {
    for (w, d) in head.weights.iter_mut().zip(&g.weights) {
        *w -= lr * d;
    }
    for (b, d) in head.bias.iter_mut().zip(&g.bias) {
        *b -= lr * d;
    }
}

/// Supervised pretraining on the labeled scenes with raw GT sampling; epoch
/// `e` uses pool variant `e % aug_pool`. With a zero backbone step size the
/// backbone keeps its initial weights and the pool features are computed
/// once; otherwise backbone and head are trained jointly.
fn pretrain(
    cfg: &ExperimentConfig,
    bb: &mut Backbone,
    head: &mut HeadParams,
    labeled: &[Scene],
    db: &GtDatabase,
    anchors: &AnchorGrid,
) -> Result<Option<LabeledPool>> {
    let bl = cfg.batch_labeled;
    let pool = if cfg.backbone_lr == 0.0 {
        Some(labeled_pool(cfg, bb, labeled, db)?)
    } else {
        None
    };
    let total = cfg.pretrain_epochs * labeled.len().div_ceil(bl);
    let mut step = 0;
    for epoch in 0..cfg.pretrain_epochs {
        let variant = epoch % cfg.aug_pool;
        let order = shuffled(
            labeled.len(),
            rng::derive(cfg.seed, &[stream::PRETRAIN_ORDER, epoch as u64]),
        );
        for chunk in order.chunks(bl) {
            let frac = cfg.schedule.at(1.0, step, total);
            step += 1;
            let scale = 1.0 / chunk.len() as f64;
            let mut hsum = HeadGradients::zeros(head);
            if let Some(pool) = &pool {
                let batch: Vec<(&BevFeature, &[Box3D])> = chunk
                    .iter()
                    .map(|&i| (&pool[variant][i].0, &pool[variant][i].1[..]))
                    .collect();
                hsum = batch_gradients(head, &batch, anchors)?.1;
            } else {
                let per_item = par::try_map(chunk, |&i| -> Result<_> {
                    let (pts, boxes) = labeled_variant(cfg, db, &labeled[i], i, variant)?;
                    let (f, trace) = bb.forward_trace(&voxelize(&pts, &cfg.scene.extent))?;
                    let targets = assign_targets(anchors, &boxes);
                    let (_, hg, fg) = loss_and_gradients(head, &f, anchors, &targets, true)?;
                    let bg = bb.backward(&trace, &f, &fg.expect("feature gradient requested"))?;
                    Ok((hg, bg))
                })?;
                let mut bsum = BackboneGradients::zeros(bb.spec());
                for (hg, bg) in &per_item {
                    hsum.accumulate(hg, scale);
                    bsum.accumulate(bg, scale);
                }
                bb.apply_gradients(&bsum, frac * cfg.backbone_lr)?;
            }
            descend(head, &hsum, frac * cfg.pretrain_lr);
        }
    }
    Ok(pool)
}

struct Pretrained {
    labeled: Vec<Scene>,
    db: GtDatabase,
    backbone: Backbone,
    head: HeadParams,
    pool: Option<LabeledPool>,
}

fn pretrain_from_scratch(cfg: &ExperimentConfig) -> Result<Pretrained> {
    cfg.validate()?;
    let labeled = gen_scenes(&cfg.scene, cfg.seed, stream::LABELED, cfg.n_labeled)?;
    let db = labeled_database(&labeled)?;
    let mut bb = init_backbone(&cfg.backbone_spec())?;
    let anchors = cfg.anchors();
    let mut head = HeadParams::init(
        cfg.backbone.bev_channels(&cfg.scene.extent),
        rng::derive(cfg.seed, &[stream::HEAD]),
    );
    let base = par::try_map(&labeled, |s| {
        extract_grid_feature(&bb, &voxelize(&s.points, &cfg.scene.extent))
    })?;
    head.calibrate_input(base.iter())?;
    drop(base);
    let pool = pretrain(cfg, &mut bb, &mut head, &labeled, &db, &anchors)?;
    bb.freeze();
    Ok(Pretrained {
        labeled,
        db,
        backbone: bb,
        head,
        pool,
    })
}

fn labeled_database(labeled: &[Scene]) -> Result<GtDatabase> {
    let db = build_gt_database(labeled.iter().map(|s| (&s.points[..], &s.labels[..])))?;
    if db.entries().iter().any(|e| e.source_scene >= labeled.len()) {
        return Err(Error::Contract(
            "GT database entry from outside the labeled set".into(),
        ));
    }
    Ok(db)
}

/// Supervised pretraining only; the returned backbone is frozen.
pub fn pretrain_model(cfg: &ExperimentConfig) -> Result<(Backbone, HeadParams)> {
    let p = pretrain_from_scratch(cfg)?;
    Ok((p.backbone, p.head))
}

/// The unlabeled scenes of a configuration, in the order clients hold them.
pub fn unlabeled_scenes(cfg: &ExperimentConfig) -> Result<Vec<Scene>> {
    gen_scenes(&cfg.scene, cfg.seed, stream::UNLABELED, cfg.n_unlabeled)
}

fn assemble(
    cfg: &ExperimentConfig,
    p: Pretrained,
    payloads: Option<Vec<FeaturePayload>>,
) -> Result<Prepared> {
    let Pretrained {
        labeled,
        db,
        backbone: bb,
        head,
        pool,
    } = p;
    if !bb.is_frozen() {
        return Err(Error::Contract("pretrained backbone must be frozen".into()));
    }
    let pool = match pool {
        Some(p) => p,
        None => labeled_pool(cfg, &bb, &labeled, &db)?,
    };
    let feature_rms = {
        let (sq, n) = pool[0]
            .iter()
            .flat_map(|(f, _)| f.values())
            .fold((0.0, 0usize), |(s, n), &v| (s + v as f64 * v as f64, n + 1));
        if n == 0 {
            0.0
        } else {
            (sq / n as f64).sqrt()
        }
    };
    let unlabeled = unlabeled_scenes(cfg)?;
    let payloads = match payloads {
        Some(mut given) => {
            if given.len() != unlabeled.len() {
                return Err(Error::Config(format!(
                    "{} payloads for {} unlabeled scenes",
                    given.len(),
                    unlabeled.len()
                )));
            }
            let mut ordered = Vec::with_capacity(given.len());
            for s in &unlabeled {
                let at = given
                    .iter()
                    .position(|p| p.scene_id == s.id)
                    .ok_or_else(|| {
                        Error::Config(format!("no payload for unlabeled scene {}", s.id))
                    })?;
                ordered.push(given.swap_remove(at));
            }
            ordered
        }
        None => {
            let client = cfg.client_config();
            par::try_map(&unlabeled, |s| {
                client_infer(&bb, &head, s, &cfg.scene.extent, &client)
            })?
        }
    };
    let test_scenes = gen_scenes(&cfg.scene, cfg.seed, stream::TEST, cfg.n_test)?;
    let test = par::try_map(&test_scenes, |s| {
        extract_grid_feature(&bb, &voxelize(&s.points, &cfg.scene.extent))
            .map(|f| (f, s.labels.clone()))
    })?;
    let pretrained_ap = evaluate_head(&head, &test, &cfg.anchors(), cfg)?;
    Ok(Prepared {
        labeled,
        unlabeled,
        backbone: bb,
        head,
        db,
        pool,
        feature_rms,
        payloads,
        test_scenes,
        test,
        pretrained_ap,
    })
}

/// Scenes, GT database, pretraining, freezing, client payloads and test
/// features.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let p = pretrain_from_scratch(cfg)?;
    assemble(cfg, p, None)
}

/// Rebuild the server state around a stored pretrained model and payloads
/// received from clients (matched to the unlabeled scenes by scene id).
pub fn resume(
    cfg: &ExperimentConfig,
    backbone: Backbone,
    head: HeadParams,
    payloads: Vec<FeaturePayload>,
) -> Result<Prepared> {
    cfg.validate()?;
    let spec = cfg.backbone_spec();
    if backbone.spec() != &spec {
        return Err(Error::Config(
            "stored backbone does not match the configured layout and seed".into(),
        ));
    }
    if head.channels != spec.bev_channels(&cfg.scene.extent) {
        return Err(Error::ChannelMismatch {
            expected: spec.bev_channels(&cfg.scene.extent),
            actual: head.channels,
        });
    }
    let labeled = gen_scenes(&cfg.scene, cfg.seed, stream::LABELED, cfg.n_labeled)?;
    let db = labeled_database(&labeled)?;
    let p = Pretrained {
        labeled,
        db,
        backbone,
        head,
        pool: None,
    };
    assemble(cfg, p, Some(payloads))
}

/// One unlabeled training item under a feature-level policy.
fn unlabeled_item(
    cfg: &ExperimentConfig,
    policy: Policy,
    prep: &Prepared,
    scene: usize,
    epoch: u64,
    gt_feature: Option<&(BevFeature, Vec<Placement>)>,
) -> Result<(BevFeature, Vec<Box3D>, f64)> {
    let payload = &prep.payloads[scene];
    let pseudo = filter_detections(&payload.detections, &cfg.thresholds);
    let aug_seed = rng::derive(cfg.seed, &[stream::FEATURE_AUG, epoch, scene as u64]);
    let extent = &cfg.scene.extent;
    Ok(match policy {
        Policy::Fgt => {
            let (gt, placements) = gt_feature.expect("GT features are prepared for the GT policy");
            let hybrid = make_hybrid(&pseudo, placements)?;
            let overlap = hybrid.max_cross_overlap();
            (f_gt_grid(&payload.feature, gt)?, hybrid.boxes(), overlap)
        }
        Policy::FFlip => {
            let f = perturb_feature(&payload.feature, FeaturePolicy::Flip, aug_seed)?;
            let (_, boxes) =
                augment_points(&[], &pseudo, &RawPolicy::Flip, None, extent, aug_seed)?;
            (f, boxes, 0.0)
        }
        Policy::FRotate => {
            let angle = rng::rng(aug_seed).random_range(-cfg.rotate_max..=cfg.rotate_max);
            let f = perturb_feature(&payload.feature, FeaturePolicy::Rotate(angle), aug_seed)?;
            let (_, boxes) = augment_points(
                &[],
                &pseudo,
                &RawPolicy::Rotate(angle),
                None,
                extent,
                aug_seed,
            )?;
            (f, boxes, 0.0)
        }
        Policy::FNoise => (
            perturb_feature(
                &payload.feature,
                FeaturePolicy::Noise(cfg.noise_sigma * prep.feature_rms),
                aug_seed,
            )?,
            pseudo,
            0.0,
        ),
        Policy::Frs => (
            perturb_feature(
                &payload.feature,
                FeaturePolicy::RandomNull(cfg.null_ratio),
                aug_seed,
            )?,
            pseudo,
            0.0,
        ),
        Policy::None | Policy::RawUpcycle => unreachable!("handled by the caller"),
    })
}

/// Placements avoiding the scene's pseudo labels and the GT-only feature
/// they produce.
fn gt_only_feature(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    scene: usize,
    epoch: u64,
) -> Result<(BevFeature, Vec<Placement>)> {
    let pseudo = filter_detections(&prep.payloads[scene].detections, &cfg.thresholds);
    let seed = rng::derive(cfg.seed, &[stream::PLACEMENT, epoch, scene as u64]);
    let placements = sample_placements(
        &prep.db,
        &pseudo,
        cfg.gt_per_scene,
        &cfg.scene.extent,
        cfg.scene.ground_z,
        seed,
    )?;
    let pts = placed_points(&prep.db, &placements);
    let f = extract_grid_feature(&prep.backbone, &voxelize(&pts, &cfg.scene.extent))?;
    Ok((f, placements))
}

struct PolicyState {
    policy: Policy,
    head: HeadParams,
    timeline: Vec<EpochMetrics>,
    trajectory: Vec<HeadParams>,
    max_overlap: f64,
    pseudo_total: usize,
    pseudo_items: usize,
}

/// Run several frozen-backbone policies in lockstep on one prepared
/// configuration. Each policy's result equals a run of that policy alone.
pub fn run_policies(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    policies: &[Policy],
) -> Result<Vec<ExperimentOutcome>> {
    if policies.contains(&Policy::RawUpcycle) {
        return Err(Error::Config(
            "the raw policy cannot share a frozen-backbone run".into(),
        ));
    }
    if !prep.backbone.is_frozen() {
        return Err(Error::Contract(
            "semi-supervised phase needs the frozen backbone".into(),
        ));
    }
    let anchors = cfg.anchors();
    let steps = cfg.ssl_steps();
    let bl = cfg.batch_labeled;
    let bu = bl * cfg.batch_ratio.unlabeled_per_labeled();
    let nl = prep.labeled.len();
    let nu = prep.payloads.len();
    let mut states: Vec<PolicyState> = policies
        .iter()
        .map(|&policy| PolicyState {
            policy,
            head: prep.head.clone(),
            timeline: Vec::new(),
            trajectory: Vec::new(),
            max_overlap: 0.0,
            pseudo_total: 0,
            pseudo_items: 0,
        })
        .collect();
    let any_unlabeled = nu > 0 && policies.iter().any(|p| p.uses_unlabeled());
    let want_gt = nu > 0 && policies.contains(&Policy::Fgt);

    for epoch in 0..cfg.epochs as u64 {
        let lab_feats = &prep.pool[epoch as usize % cfg.aug_pool];
        let gt_feats = if want_gt {
            Some(par::try_map_range(nu, |i| {
                gt_only_feature(cfg, prep, i, epoch)
            })?)
        } else {
            None
        };
        let lab_order = shuffled(nl, rng::derive(cfg.seed, &[stream::LABELED_ORDER, epoch]));
        let unl_order = shuffled(nu, rng::derive(cfg.seed, &[stream::UNLABELED_ORDER, epoch]));
        let mut sums: Vec<[f64; 3]> = vec![[0.0; 3]; states.len()];
        for step in 0..steps {
            let lab_idx: Vec<usize> = (0..bl).map(|j| lab_order[(step * bl + j) % nl]).collect();
            let labeled: Vec<(&BevFeature, &[Box3D])> = lab_idx
                .iter()
                .map(|&i| (&lab_feats[i].0, &lab_feats[i].1[..]))
                .collect();
            let unl_idx: Vec<usize> = if any_unlabeled {
                (step * bu..((step + 1) * bu).min(nu))
                    .map(|j| unl_order[j])
                    .collect()
            } else {
                Vec::new()
            };
            for (st, sum) in states.iter_mut().zip(sums.iter_mut()) {
                let items: Vec<(BevFeature, Vec<Box3D>, f64)> = if st.policy.uses_unlabeled() {
                    par::try_map(&unl_idx, |&i| {
                        unlabeled_item(
                            cfg,
                            st.policy,
                            prep,
                            i,
                            epoch,
                            gt_feats.as_ref().map(|g| &g[i]),
                        )
                    })?
                } else {
                    Vec::new()
                };
                for (_, _, overlap) in &items {
                    st.max_overlap = st.max_overlap.max(*overlap);
                }
                if st.policy.uses_unlabeled() {
                    for &i in &unl_idx {
                        st.pseudo_total +=
                            filter_detections(&prep.payloads[i].detections, &cfg.thresholds).len();
                        st.pseudo_items += 1;
                    }
                }
                let unlabeled: Vec<(&BevFeature, &[Box3D])> =
                    items.iter().map(|(f, b, _)| (f, &b[..])).collect();
                let lr = cfg
                    .schedule
                    .at(cfg.lr, epoch as usize * steps + step, cfg.epochs * steps);
                let (next, loss) = ssl_step(&st.head, &labeled, &unlabeled, cfg.w, &anchors, lr)?;
                st.head = next;
                sum[0] += loss.labeled.total;
                sum[1] += loss.unlabeled.total;
                sum[2] += loss.total;
            }
        }
        for (st, sum) in states.iter_mut().zip(&sums) {
            let n = steps.max(1) as f64;
            let ap = evaluate_head(&st.head, &prep.test, &anchors, cfg)?;
            st.timeline.push(EpochMetrics {
                epoch: epoch as usize + 1,
                ap,
                loss_labeled: sum[0] / n,
                loss_unlabeled: sum[1] / n,
                loss_total: sum[2] / n,
            });
            st.trajectory.push(st.head.clone());
        }
    }
    Ok(states
        .into_iter()
        .map(|st| ExperimentOutcome {
            policy: st.policy,
            pretrained_ap: prep.pretrained_ap,
            timeline: st.timeline,
            head_trajectory: st.trajectory,
            backbone_before: prep.backbone.weights().to_vec(),
            backbone_after: prep.backbone.weights().to_vec(),
            max_hybrid_overlap: st.max_overlap,
            gt_database_size: prep.db.len(),
            mean_pseudo_labels: if st.pseudo_items == 0 {
                0.0
            } else {
                st.pseudo_total as f64 / st.pseudo_items as f64
            },
        })
        .collect())
}

/// [`Policy::RawUpcycle`]: the server receives raw points, GT-samples the
/// unlabeled scenes around their pseudo labels and keeps training the
/// backbone together with the head.
pub fn run_raw(cfg: &ExperimentConfig, prep: &Prepared) -> Result<ExperimentOutcome> {
    if cfg.policy != Policy::RawUpcycle {
        return Err(Error::Config("run_raw needs the raw policy".into()));
    }
    cfg.validate()?;
    let anchors = cfg.anchors();
    let steps = cfg.ssl_steps();
    let bl = cfg.batch_labeled;
    let bu = bl * cfg.batch_ratio.unlabeled_per_labeled();
    let nl = prep.labeled.len();
    let nu = prep.unlabeled.len();
    let mut bb = Backbone::from_weights(
        prep.backbone.spec().clone(),
        prep.backbone.weights().to_vec(),
    )?;
    let mut head = prep.head.clone();
    let pseudo: Vec<Vec<Box3D>> = prep
        .payloads
        .iter()
        .map(|p| filter_detections(&p.detections, &cfg.thresholds))
        .collect();
    let mut timeline = Vec::new();
    let mut trajectory = Vec::new();
    let mut pseudo_total = 0usize;
    let mut pseudo_items = 0usize;

    // loss, head gradient and backbone gradient of one raw scene
    let item = |bb: &Backbone, head: &HeadParams, pts: &[Point3], boxes: &[Box3D]| -> Result<_> {
        let (f, trace) = bb.forward_trace(&voxelize(pts, &cfg.scene.extent))?;
        let targets = assign_targets(&anchors, boxes);
        let (loss, hg, fg) = loss_and_gradients(head, &f, &anchors, &targets, true)?;
        let bg = bb.backward(&trace, &f, &fg.expect("feature gradient requested"))?;
        Ok((loss, hg, bg))
    };

    for epoch in 0..cfg.epochs as u64 {
        let lab_order = shuffled(nl, rng::derive(cfg.seed, &[stream::LABELED_ORDER, epoch]));
        let unl_order = shuffled(nu, rng::derive(cfg.seed, &[stream::UNLABELED_ORDER, epoch]));
        let mut sums = [0.0; 3];
        for step in 0..steps {
            let lab_idx: Vec<usize> = (0..bl).map(|j| lab_order[(step * bl + j) % nl]).collect();
            let unl_idx: Vec<usize> = (step * bu..((step + 1) * bu).min(nu))
                .map(|j| unl_order[j])
                .collect();
            let lab = par::try_map(&lab_idx, |&i| {
                let (pts, boxes) = labeled_variant(
                    cfg,
                    &prep.db,
                    &prep.labeled[i],
                    i,
                    epoch as usize % cfg.aug_pool,
                )?;
                item(&bb, &head, &pts, &boxes)
            })?;
            let unl = par::try_map(&unl_idx, |&i| {
                let seed = rng::derive(cfg.seed, &[stream::PLACEMENT, epoch, i as u64]);
                let scene = &prep.unlabeled[i];
                let placements = sample_placements(
                    &prep.db,
                    &pseudo[i],
                    cfg.gt_per_scene,
                    &cfg.scene.extent,
                    cfg.scene.ground_z,
                    seed,
                )?;
                let hybrid = make_hybrid(&pseudo[i], &placements)?;
                let (pts, _) = augment_points(
                    &scene.points,
                    &[],
                    &RawPolicy::GtPlace(placements),
                    Some(&prep.db),
                    &cfg.scene.extent,
                    seed,
                )?;
                item(&bb, &head, &pts, &hybrid.boxes())
            })?;
            for &i in &unl_idx {
                pseudo_total += pseudo[i].len();
                pseudo_items += 1;
            }
            let mut hg = HeadGradients::zeros(&head);
            let mut bg = BackboneGradients::zeros(bb.spec());
            let mut reduce = |items: &[(LossBreakdown, HeadGradients, BackboneGradients)],
                              weight: f64| {
                let mut losses = Vec::with_capacity(items.len());
                for (l, h, b) in items {
                    let scale = weight / items.len() as f64;
                    hg.accumulate(h, scale);
                    bg.accumulate(b, scale);
                    losses.push(*l);
                }
                LossBreakdown::mean(&losses)
            };
            let ll = reduce(&lab, 1.0);
            let lu = reduce(&unl, cfg.w);
            let frac = cfg
                .schedule
                .at(1.0, epoch as usize * steps + step, cfg.epochs * steps);
            descend(&mut head, &hg, frac * cfg.lr);
            bb.apply_gradients(&bg, frac * cfg.backbone_lr)?;
            sums[0] += ll.total;
            sums[1] += lu.total;
            sums[2] += total_loss(&ll, &lu, cfg.w);
        }
        // the backbone moved, so test features are recomputed
        let n = steps.max(1) as f64;
        let ap = {
            let scored = par::try_map_range(prep.test_scenes.len(), |i| {
                let s = &prep.test_scenes[i];
                let f = extract_grid_feature(&bb, &voxelize(&s.points, &cfg.scene.extent))?;
                detect(&head, &f, &anchors, &cfg.decode).map(|d| (d, s.labels.clone()))
            })?;
            evaluate_scenes(&scored, &cfg.eval)?
        };
        timeline.push(EpochMetrics {
            epoch: epoch as usize + 1,
            ap,
            loss_labeled: sums[0] / n,
            loss_unlabeled: sums[1] / n,
            loss_total: sums[2] / n,
        });
        trajectory.push(head.clone());
    }
    Ok(ExperimentOutcome {
        policy: Policy::RawUpcycle,
        pretrained_ap: prep.pretrained_ap,
        timeline,
        head_trajectory: trajectory,
        backbone_before: prep.backbone.weights().to_vec(),
        backbone_after: bb.weights().to_vec(),
        max_hybrid_overlap: 0.0,
        gt_database_size: prep.db.len(),
        mean_pseudo_labels: if pseudo_items == 0 {
            0.0
        } else {
            pseudo_total as f64 / pseudo_items as f64
        },
    })
}

/// Full run of `cfg.policy`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let prep = prepare(cfg)?;
    if cfg.policy == Policy::RawUpcycle {
        return run_raw(cfg, &prep);
    }
    let mut out = run_policies(cfg, &prep, &[cfg.policy])?;
    Ok(out.remove(0))
}

/// Setup for comparing raw-level and feature-level augmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisConfig {
    pub scene: SceneSpec,
    pub backbone: BackboneSpec,
    pub scenes: usize,
    /// Scenes whose objects fill the GT database.
    pub source_scenes: usize,
    pub gt_per_scene: usize,
    pub rotate_max: f64,
    pub seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            backbone: BackboneSpec::default(),
            scenes: 50,
            source_scenes: 10,
            gt_per_scene: 5,
            rotate_max: PI / 4.0,
            seed: 0,
        }
    }
}

/// One augmentation pair summarized over the analyzed scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentSummary {
    pub name: &'static str,
    /// Mean over scenes of the whole-map RMSE.
    pub mean_rmse: f64,
    /// Per-cell RMSE averaged over scenes.
    pub heatmap: RmseMap,
    /// Cells with nonzero error farther from every placed object than the
    /// backbone reaches (always 0 for the pairs without placements).
    pub outside_reach: usize,
}

/// Whether the axis-aligned window of half sizes `pad` around `(x, y)`
/// overlaps `b` in BEV.
fn within_reach(b: &Box3D, x: f64, y: f64, pad: [f64; 2]) -> bool {
    Box3D::new(x, y, b.cz, 2.0 * pad[0], 2.0 * pad[1], b.height, 0.0, 0)
        .is_ok_and(|w| iou_bev(&w, b) > 0.0)
}

/// RMSE between features of raw-augmented scenes and feature-level
/// augmentations of the clean features, for GT sampling, rotation and flip
/// (in that order).
pub fn analyze_augmentations(cfg: &AnalysisConfig) -> Result<Vec<AugmentSummary>> {
    cfg.scene.validate()?;
    if cfg.scenes == 0 || cfg.source_scenes == 0 {
        return Err(Error::Config(
            "analysis needs scenes and source scenes".into(),
        ));
    }
    if !(0.0..=PI).contains(&cfg.rotate_max) {
        return Err(Error::Config("rotate_max must lie in [0, pi]".into()));
    }
    let spec = &cfg.scene.extent;
    let bb = init_backbone(&BackboneSpec {
        seed: rng::derive(cfg.seed, &[stream::BACKBONE]),
        ..cfg.backbone.clone()
    })?;
    let sources = gen_scenes(
        &cfg.scene,
        cfg.seed,
        stream::ANALYSIS_SOURCE,
        cfg.source_scenes,
    )?;
    let db = build_gt_database(sources.iter().map(|s| (&s.points[..], &s.labels[..])))?;
    let scenes = gen_scenes(&cfg.scene, cfg.seed, stream::ANALYSIS_SCENE, cfg.scenes)?;
    let out = cfg.backbone.output_spec(spec);
    let [_, ry, rx] = bb.receptive_radius();
    // a point sits within half a voxel of its voxel center
    let pad = [
        (rx as f64 + 0.5) * spec.vx + 0.5 * out.vx,
        (ry as f64 + 0.5) * spec.vy + 0.5 * out.vy,
    ];

    let per_scene = par::try_map_range(scenes.len(), |i| -> Result<_> {
        let scene = &scenes[i];
        let seed = rng::derive(cfg.seed, &[stream::ANALYSIS_AUG, i as u64]);
        let placements = sample_placements(
            &db,
            &scene.labels,
            cfg.gt_per_scene,
            spec,
            cfg.scene.ground_z,
            seed,
        )?;
        let angle = rng::rng(seed).random_range(-cfg.rotate_max..=cfg.rotate_max);
        let gt = rmse_map(&scene.points, AugPair::GtPlace(&db, &placements), &bb, spec)?;
        let outside = gt
            .nonzero()
            .filter(|&(yi, xi, _)| {
                let (x, y) = out.cell_center(yi, xi);
                !placements.iter().any(|p| within_reach(&p.bbox, x, y, pad))
            })
            .count();
        let rot = rmse_map(&scene.points, AugPair::Rotate(angle), &bb, spec)?;
        let flip = rmse_map(&scene.points, AugPair::Flip, &bb, spec)?;
        Ok(([gt, rot, flip], outside))
    })?;

    let n = per_scene.len() as f64;
    let names = ["gt", "rotation", "flip"];
    Ok(names
        .iter()
        .enumerate()
        .map(|(k, &name)| {
            let first = &per_scene[0].0[k];
            let mut cells = vec![0.0; first.cells.len()];
            let mut scalar = 0.0;
            for (maps, _) in &per_scene {
                for (c, v) in cells.iter_mut().zip(&maps[k].cells) {
                    *c += v / n;
                }
                scalar += maps[k].scalar / n;
            }
            AugmentSummary {
                name,
                mean_rmse: scalar,
                heatmap: RmseMap {
                    height: first.height,
                    width: first.width,
                    cells,
                    scalar,
                },
                outside_reach: if k == 0 {
                    per_scene.iter().map(|(_, o)| o).sum()
                } else {
                    0
                },
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_backbone, BackboneSpec};
    use crate::geometry::points_in_box;

    #[test]
    fn scenes_are_deterministic_and_populated() {
        let spec = SceneSpec::default();
        let a = gen_scene(&spec, 3).unwrap();
        assert_eq!(a, gen_scene(&spec, 3).unwrap());
        assert_ne!(a, gen_scene(&spec, 4).unwrap());
        assert!((2..=8).contains(&a.labels.len()));
        for b in &a.labels {
            let n = points_in_box(&a.points, b).iter().filter(|&&x| x).count();
            assert!(n >= spec.points_per_car_min, "{n} points");
            assert!(n <= spec.points_per_car_max);
        }
        for (i, x) in a.labels.iter().enumerate() {
            for y in &a.labels[i + 1..] {
                assert_eq!(iou_bev(x, y), 0.0);
            }
        }
        assert!(a
            .points
            .iter()
            .all(|p| spec.extent.voxel_index(p).is_some()));
    }

    #[test]
    fn fixed_car_count() {
        let spec = SceneSpec {
            cars_min: 3,
            cars_max: 3,
            ..SceneSpec::default()
        };
        for s in 0..5 {
            assert_eq!(gen_scene(&spec, s).unwrap().labels.len(), 3);
        }
        assert!(gen_scene(
            &SceneSpec {
                cars_min: 0,
                ..spec
            },
            0
        )
        .is_err());
    }

    #[test]
    fn quantized_yaw_stays_in_range() {
        let b = Box3D::new(1.0, 2.0, 0.0, 3.9, 1.6, 1.5, PI, 0).unwrap();
        let d = quantize_detection(&Detection::new(b, 0.7, 0.6).unwrap()).unwrap();
        assert!(d.bbox.yaw <= PI && d.bbox.yaw > -PI);
        assert_eq!(d.bbox.yaw, d.bbox.yaw as f32 as f64);
        assert_eq!(quantize_detection(&d).unwrap(), d);
    }

    #[test]
    fn client_requires_frozen_backbone_and_matches_server() {
        let spec = SceneSpec {
            extent: GridSpec::new(0.0, 20.0, -10.0, 10.0, -3.0, 1.0, 0.4, 0.4, 0.5).unwrap(),
            clutter_points: 300,
            ..SceneSpec::default()
        };
        let scene = gen_scene(&spec, 1).unwrap();
        let mut bb = init_backbone(&BackboneSpec::default()).unwrap();
        let head = HeadParams::init(32, 0);
        let cfg = ClientConfig::default();
        assert!(client_infer(&bb, &head, &scene, &spec.extent, &cfg).is_err());
        bb.freeze();
        let p = client_infer(&bb, &head, &scene, &spec.extent, &cfg).unwrap();
        let server = extract_grid_feature(&bb, &voxelize(&scene.points, &spec.extent)).unwrap();
        assert_eq!(p.feature, server);
        assert_eq!(
            p,
            client_infer(&bb, &head, &scene, &spec.extent, &cfg).unwrap()
        );
        let with_set = ClientConfig {
            set_points: Some(64),
            ..cfg
        };
        let p = client_infer(&bb, &head, &scene, &spec.extent, &with_set).unwrap();
        assert_eq!(p.set_feature.unwrap().len(), 64);
    }

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            scene: SceneSpec {
                extent: GridSpec::new(0.0, 20.0, -10.0, 10.0, -3.0, 1.0, 0.4, 0.4, 0.5).unwrap(),
                cars_min: 2,
                cars_max: 4,
                clutter_points: 200,
                ..SceneSpec::default()
            },
            n_labeled: 4,
            n_unlabeled: 4,
            n_test: 3,
            pretrain_epochs: 1,
            epochs: 2,
            seed: 11,
            thresholds: SslThresholds::new(0.0, 0.0).unwrap(),
            decode: DecodeConfig {
                score_thresh: 0.0,
                ..DecodeConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn policy_names_round_trip() {
        for p in Policy::ALL {
            assert_eq!(Policy::parse(p.name()).unwrap(), p);
        }
        assert!(Policy::parse("mixup").is_err());
        assert_eq!(BatchRatio::parse("1:2").unwrap(), BatchRatio::OneToTwo);
        assert!(BatchRatio::parse("2:1").is_err());
        assert_eq!(partial_label(300, 0.1), (30, 270));
    }

    #[test]
    fn config_contracts() {
        assert!(tiny().validate().is_ok());
        let raw = ExperimentConfig {
            policy: Policy::RawUpcycle,
            ..tiny()
        };
        assert!(raw.validate().is_err());
        assert!(ExperimentConfig {
            freeze_backbone: false,
            ..tiny()
        }
        .validate()
        .is_err());
        assert!(ExperimentConfig {
            n_labeled: 0,
            ..tiny()
        }
        .validate()
        .is_err());
        assert!(ExperimentConfig { w: -1.0, ..tiny() }.validate().is_err());
    }

    #[test]
    fn lockstep_run_is_frozen_deterministic_and_separable() {
        let cfg = tiny();
        let prep = prepare(&cfg).unwrap();
        assert!(prep
            .db
            .entries()
            .iter()
            .all(|e| e.source_scene < cfg.n_labeled));
        let all = [
            Policy::None,
            Policy::Fgt,
            Policy::FFlip,
            Policy::FNoise,
            Policy::Frs,
            Policy::FRotate,
        ];
        let group = run_policies(&cfg, &prep, &all).unwrap();
        for out in &group {
            assert_eq!(out.backbone_after, prep.backbone.weights());
            assert_eq!(out.timeline.len(), 2);
            assert!(out.timeline.iter().all(|m| (0.0..=1.0).contains(&m.ap)));
            assert_eq!(out.max_hybrid_overlap, 0.0);
        }
        // pseudo labels exist, so unlabeled losses are live for the non-baseline policies
        assert!(group[1].mean_pseudo_labels > 0.0);
        assert!(group[1].timeline[0].loss_unlabeled > 0.0);
        assert_eq!(group[0].timeline[0].loss_unlabeled, 0.0);
        assert_ne!(group[0].head_trajectory, group[1].head_trajectory);

        let alone = run_policies(&cfg, &prep, &[Policy::Fgt]).unwrap();
        assert_eq!(alone[0], group[1]);
        let again = run_experiment(&ExperimentConfig {
            policy: Policy::Fgt,
            ..cfg.clone()
        })
        .unwrap();
        assert_eq!(again, group[1]);

        let zero = ExperimentConfig {
            w: 0.0,
            ..cfg.clone()
        };
        let z = run_policies(&zero, &prep, &[Policy::None, Policy::Fgt]).unwrap();
        assert_eq!(z[0].head_trajectory, z[1].head_trajectory);
        assert_eq!(z[0].head_trajectory, group[0].head_trajectory);
    }

    #[test]
    fn split_pipeline_matches_in_process_run() {
        let cfg = ExperimentConfig {
            epochs: 1,
            ..tiny()
        };
        let prep = prepare(&cfg).unwrap();
        let (bb, head) = pretrain_model(&cfg).unwrap();
        assert!(bb.is_frozen());
        assert_eq!(bb, prep.backbone);
        let client = cfg.client_config();
        let mut payloads: Vec<FeaturePayload> = unlabeled_scenes(&cfg)
            .unwrap()
            .iter()
            .map(|s| client_infer(&bb, &head, s, &cfg.scene.extent, &client).unwrap())
            .collect();
        payloads.reverse();
        let resumed = resume(&cfg, bb.clone(), head.clone(), payloads.clone()).unwrap();
        assert_eq!(resumed.payloads, prep.payloads);
        assert_eq!(resumed.pretrained_ap, prep.pretrained_ap);
        assert_eq!(
            run_policies(&cfg, &resumed, &[Policy::Fgt]).unwrap(),
            run_policies(&cfg, &prep, &[Policy::Fgt]).unwrap()
        );
        payloads.pop();
        assert!(resume(&cfg, bb.clone(), head.clone(), payloads).is_err());
        let other = ExperimentConfig { seed: 99, ..cfg };
        assert!(resume(&other, bb, head, prep.payloads.clone()).is_err());
    }

    #[test]
    fn augmentation_analysis_orders_pairs() {
        let cfg = AnalysisConfig {
            scene: SceneSpec {
                extent: GridSpec::new(0.0, 24.0, -12.0, 12.0, -3.0, 1.0, 0.4, 0.4, 0.5).unwrap(),
                clutter_points: 200,
                cars_max: 4,
                ..SceneSpec::default()
            },
            scenes: 4,
            source_scenes: 3,
            seed: 7,
            ..AnalysisConfig::default()
        };
        let rows = analyze_augmentations(&cfg).unwrap();
        let names: Vec<&str> = rows.iter().map(|r| r.name).collect();
        assert_eq!(names, ["gt", "rotation", "flip"]);
        assert!(rows[0].mean_rmse < rows[1].mean_rmse);
        assert!(rows[0].mean_rmse < rows[2].mean_rmse);
        assert_eq!(rows[0].outside_reach, 0);
        assert_eq!(analyze_augmentations(&cfg).unwrap(), rows);
    }

    #[test]
    fn raw_policy_trains_backbone() {
        let cfg = ExperimentConfig {
            policy: Policy::RawUpcycle,
            freeze_backbone: false,
            backbone_lr: 0.01,
            epochs: 1,
            ..tiny()
        };
        let out = run_experiment(&cfg).unwrap();
        assert_ne!(out.backbone_after, out.backbone_before);
        assert_eq!(out.timeline.len(), 1);
        let prep = prepare(&cfg).unwrap();
        assert!(run_policies(&cfg, &prep, &[Policy::RawUpcycle]).is_err());
    }
}
