//! Raw-level and feature-level augmentation, feature-level GT merging, and
//! the raw-vs-feature RMSE comparison.

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::backbone::{extract_grid_feature, Backbone, SetFeature, SetPoint};
use crate::error::{Error, Result};
use crate::geometry::{normalize_yaw, Box3D, Point3};
use crate::gtbank::{GtDatabase, Placement};
use crate::rng;
use crate::voxelgrid::{voxelize, BevFeature, GridSpec};

/// Fraction of stored feature values nulled by [`FeaturePolicy::RandomNull`] by default.
pub const DEFAULT_NULL_RATIO: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub enum RawPolicy {
    /// Mirror across the x-axis: `y -> -y`, `yaw -> -yaw`.
    Flip,
    /// Rotate about the vertical axis through the extent center.
    Rotate(f64),
    /// Keep each point independently with this probability.
    RandomSample(f64),
    /// Paste database objects at the given poses.
    GtPlace(Vec<Placement>),
}

impl RawPolicy {
    pub fn validate(&self) -> Result<()> {
        match self {
            RawPolicy::Rotate(a) if !a.is_finite() => {
                Err(Error::invalid("rotation angle must be finite"))
            }
            RawPolicy::RandomSample(k) if !(*k > 0.0 && *k <= 1.0) => {
                Err(Error::invalid(format!("keep ratio {k} outside (0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FeaturePolicy {
    /// Rows mirrored: `(yi, xi) -> (H - 1 - yi, xi)`.
    Flip,
    /// Rotation about the map center with bilinear resampling.
    Rotate(f64),
    /// Additive Gaussian noise with this standard deviation.
    Noise(f64),
    /// Null this fraction of the stored scalar values.
    RandomNull(f64),
}

impl FeaturePolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            FeaturePolicy::Rotate(a) if !a.is_finite() => {
                Err(Error::invalid("rotation angle must be finite"))
            }
            FeaturePolicy::Noise(s) if !(s >= 0.0 && s.is_finite()) => {
                Err(Error::invalid(format!("noise sigma {s} must be >= 0")))
            }
            FeaturePolicy::RandomNull(r) if !(r > 0.0 && r < 1.0) => {
                Err(Error::invalid(format!("null ratio {r} outside (0, 1)")))
            }
            _ => Ok(()),
        }
    }
}

fn rotate_about(x: f64, y: f64, cx: f64, cy: f64, angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    let (dx, dy) = (x - cx, y - cy);
    (cx + c * dx - s * dy, cy + s * dx + c * dy)
}

pub fn augment_points(
    points: &[Point3],
    boxes: &[Box3D],
    policy: &RawPolicy,
    db: Option<&GtDatabase>,
    extent: &GridSpec,
    seed: u64,
) -> Result<(Vec<Point3>, Vec<Box3D>)> {
    policy.validate()?;
    match policy {
        RawPolicy::Flip => {
            let pts = points.iter().map(|p| Point3 { y: -p.y, ..*p }).collect();
            let bxs = boxes
                .iter()
                .map(|b| Box3D {
                    cy: -b.cy,
                    yaw: normalize_yaw(-b.yaw),
                    ..*b
                })
                .collect();
            Ok((pts, bxs))
        }
        RawPolicy::Rotate(angle) if *angle == 0.0 => Ok((points.to_vec(), boxes.to_vec())),
        RawPolicy::Rotate(angle) => {
            let (cx, cy) = extent.center_xy();
            let pts = points
                .iter()
                .map(|p| {
                    let (x, y) = rotate_about(p.x, p.y, cx, cy, *angle);
                    Point3 { x, y, ..*p }
                })
                .collect();
            let bxs = boxes
                .iter()
                .map(|b| {
                    let (x, y) = rotate_about(b.cx, b.cy, cx, cy, *angle);
                    Box3D {
                        cx: x,
                        cy: y,
                        yaw: normalize_yaw(b.yaw + angle),
                        ..*b
                    }
                })
                .collect();
            Ok((pts, bxs))
        }
        RawPolicy::RandomSample(keep) => {
            let mut r = rng::rng(seed);
            let pts = points
                .iter()
                .copied()
                .filter(|_| r.random::<f64>() < *keep)
                .collect();
            Ok((pts, boxes.to_vec()))
        }
        RawPolicy::GtPlace(placements) => {
            let db = db.ok_or_else(|| Error::invalid("GT placement needs a database"))?;
            let mut pts = points.to_vec();
            let mut bxs = boxes.to_vec();
            for p in placements {
                if p.entry >= db.len() {
                    return Err(Error::invalid(format!(
                        "placement entry {} out of range",
                        p.entry
                    )));
                }
                pts.extend(p.points(db));
                bxs.push(p.bbox);
            }
            Ok((pts, bxs))
        }
    }
}

/// Points of all placements in the scene frame, without any scene content.
pub fn placed_points(db: &GtDatabase, placements: &[Placement]) -> Vec<Point3> {
    placements.iter().flat_map(|p| p.points(db)).collect()
}

pub fn perturb_feature(f: &BevFeature, policy: FeaturePolicy, seed: u64) -> Result<BevFeature> {
    policy.validate()?;
    let c = f.channels();
    Ok(match policy {
        FeaturePolicy::Flip => {
            let h = f.height() as u32;
            let mut cells: Vec<([u32; 2], Vec<f32>)> = f
                .iter()
                .map(|(k, v)| ([h - 1 - k[0], k[1]], v.to_vec()))
                .collect();
            cells.sort_by_key(|(k, _)| *k);
            BevFeature::from_sorted_unchecked(*f.spec(), c, cells)
        }
        FeaturePolicy::Rotate(angle) => rotate_feature(f, angle),
        FeaturePolicy::Noise(sigma) => {
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
            let mut r = rng::rng(seed);
            let cells = f.iter().map(|(k, v)| {
                let noisy = v
                    .iter()
                    .map(|&x| (x as f64 + normal.sample(&mut r)) as f32)
                    .collect();
                (k, noisy)
            });
            BevFeature::from_sorted_unchecked(*f.spec(), c, cells.collect::<Vec<_>>())
        }
        FeaturePolicy::RandomNull(ratio) => {
            let mut values = f.values().to_vec();
            let count = (ratio * values.len() as f64).round() as usize;
            let mut r = rng::rng(seed);
            for i in index::sample(&mut r, values.len(), count) {
                values[i] = 0.0;
            }
            let cells: Vec<_> = f
                .coords()
                .iter()
                .zip(values.chunks_exact(c))
                .map(|(k, v)| (*k, v.to_vec()))
                .collect();
            BevFeature::from_sorted_unchecked(*f.spec(), c, cells)
        }
    })
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Inverse-map each output cell center through the rotation and read the
/// input bilinearly, with zero outside the map.
fn rotate_feature(f: &BevFeature, angle: f64) -> BevFeature {
    let spec = f.spec();
    let (h, w, c) = (f.height(), f.width(), f.channels());
    let dense = f.dense_index();
    let values = f.values();
    // cell-space center of the map, where cell (yi, xi) sits at (yi, xi)
    let (mx, my) = spec.center_xy();
    let ux = (mx - spec.x_min) / spec.vx - 0.5;
    let uy = (my - spec.y_min) / spec.vy - 0.5;
    let (s, co) = (-angle).sin_cos();
    let mut cells = Vec::new();
    let mut acc = vec![0f64; c];
    for yi in 0..h {
        for xi in 0..w {
            // rotation in metric space, expressed in cell units
            let dx = (xi as f64 - ux) * spec.vx;
            let dy = (yi as f64 - uy) * spec.vy;
            let sx = snap(ux + (co * dx - s * dy) / spec.vx);
            let sy = snap(uy + (s * dx + co * dy) / spec.vy);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            acc.iter_mut().for_each(|a| *a = 0.0);
            let mut hit = false;
            for (tx, ty, wgt) in [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x0 + 1.0, y0, fx * (1.0 - fy)),
                (x0, y0 + 1.0, (1.0 - fx) * fy),
                (x0 + 1.0, y0 + 1.0, fx * fy),
            ] {
                if wgt == 0.0 || tx < 0.0 || ty < 0.0 || tx >= w as f64 || ty >= h as f64 {
                    continue;
                }
                if let Some(slot) = dense[ty as usize * w + tx as usize] {
                    let v = &values[slot as usize * c..(slot as usize + 1) * c];
                    for (a, &x) in acc.iter_mut().zip(v) {
                        *a += wgt * x as f64;
                    }
                    hit = true;
                }
            }
            if hit {
                cells.push((
                    [yi as u32, xi as u32],
                    acc.iter().map(|&a| a as f32).collect(),
                ));
            }
        }
    }
    BevFeature::from_sorted_unchecked(*spec, c, cells)
}

/// Grid-type merge: wherever `gt` stores a cell, its whole vector replaces
/// the scene vector; elsewhere the scene is kept.
pub fn f_gt_grid(scene: &BevFeature, gt: &BevFeature) -> Result<BevFeature> {
    if !scene.same_shape(gt) {
        return Err(Error::ShapeMismatch(format!(
            "scene {}x{}x{} vs gt {}x{}x{}",
            scene.height(),
            scene.width(),
            scene.channels(),
            gt.height(),
            gt.width(),
            gt.channels()
        )));
    }
    let mut out = Vec::with_capacity(scene.len() + gt.len());
    let mut s = scene.iter().peekable();
    let mut g = gt.iter().peekable();
    loop {
        let next = match (s.peek(), g.peek()) {
            (None, None) => break,
            (Some(_), None) => s.next(),
            (None, Some(_)) => g.next(),
            (Some(a), Some(b)) => match a.0.cmp(&b.0) {
                std::cmp::Ordering::Less => s.next(),
                std::cmp::Ordering::Greater => g.next(),
                std::cmp::Ordering::Equal => {
                    s.next();
                    g.next()
                }
            },
        };
        let (k, v) = next.expect("peeked");
        out.push((k, v.to_vec()));
    }
    Ok(BevFeature::from_sorted_unchecked(
        *scene.spec(),
        scene.channels(),
        out,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SetSource {
    Scene,
    Gt,
}

/// Source and member index for each of `n` draws with replacement. A draw
/// picks the scene pool with probability `m * scene_nz / (m * scene_nz + gt_nz)`
/// unless that pool is empty.
pub fn draw_set_sources(
    scene_len: usize,
    gt_len: usize,
    scene_nz: usize,
    gt_nz: usize,
    ratio_multiplier: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<(SetSource, usize)>> {
    if scene_nz == 0 || gt_nz == 0 {
        return Err(Error::invalid("non-zero counts must both be positive"));
    }
    if n == 0 {
        return Err(Error::invalid("set merge needs n >= 1"));
    }
    if !(ratio_multiplier > 0.0 && ratio_multiplier.is_finite()) {
        return Err(Error::invalid("ratio multiplier must be positive"));
    }
    if scene_len == 0 && gt_len == 0 {
        return Err(Error::invalid("both set sources are empty"));
    }
    let ws = ratio_multiplier * scene_nz as f64;
    let p_scene = ws / (ws + gt_nz as f64);
    let mut r = rng::rng(seed);
    Ok((0..n)
        .map(|_| {
            let pick_scene = r.random::<f64>() < p_scene;
            if (pick_scene && scene_len > 0) || gt_len == 0 {
                (SetSource::Scene, r.random_range(0..scene_len))
            } else {
                (SetSource::Gt, r.random_range(0..gt_len))
            }
        })
        .collect())
}

/// Set-type merge with the default ratio multiplier of 1.
#[allow(clippy::too_many_arguments)]
pub fn f_gt_set(
    scene: &SetFeature,
    gt: &SetFeature,
    gt_boxes: &[Box3D],
    scene_nz: usize,
    gt_nz: usize,
    n: usize,
    seed: u64,
) -> Result<SetFeature> {
    f_gt_set_scaled(scene, gt, gt_boxes, scene_nz, gt_nz, 1.0, n, seed)
}

/// Scene keypoints inside any GT box are dropped, then `n` points are drawn
/// from the remaining scene keypoints and the GT keypoints.
#[allow(clippy::too_many_arguments)]
pub fn f_gt_set_scaled(
    scene: &SetFeature,
    gt: &SetFeature,
    gt_boxes: &[Box3D],
    scene_nz: usize,
    gt_nz: usize,
    ratio_multiplier: f64,
    n: usize,
    seed: u64,
) -> Result<SetFeature> {
    if scene.dim != gt.dim {
        return Err(Error::ChannelMismatch {
            expected: scene.dim,
            actual: gt.dim,
        });
    }
    let outside: Vec<&SetPoint> = scene
        .points
        .iter()
        .filter(|sp| {
            let p = Point3::new(
                sp.position[0] as f64,
                sp.position[1] as f64,
                sp.position[2] as f64,
                0.0,
            );
            !gt_boxes.iter().any(|b| b.contains(&p))
        })
        .collect();
    let draws = draw_set_sources(
        outside.len(),
        gt.len(),
        scene_nz,
        gt_nz,
        ratio_multiplier,
        n,
        seed,
    )?;
    let points = draws
        .into_iter()
        .map(|(src, i)| match src {
            SetSource::Scene => outside[i].clone(),
            SetSource::Gt => gt.points[i].clone(),
        })
        .collect();
    SetFeature::new(scene.dim, points)
}

/// One logical augmentation applied at raw level and at feature level.
#[derive(Clone, Copy, Debug)]
pub enum AugPair<'a> {
    Identity,
    Flip,
    Rotate(f64),
    GtPlace(&'a GtDatabase, &'a [Placement]),
}

/// Dense per-cell RMSE over channels, row-major `H x W`, plus the RMSE over
/// all cells and channels.
#[derive(Clone, Debug, PartialEq)]
pub struct RmseMap {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<f64>,
    pub scalar: f64,
}

impl RmseMap {
    pub fn at(&self, yi: usize, xi: usize) -> f64 {
        self.cells[yi * self.width + xi]
    }

    /// `(yi, xi, rmse)` for every cell with nonzero error.
    pub fn nonzero(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, &v)| (i / self.width, i % self.width, v))
    }
}

/// Cellwise comparison of two same-shape features; absent cells are zero.
pub fn feature_rmse(a: &BevFeature, b: &BevFeature) -> Result<RmseMap> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch("rmse operands differ in shape".into()));
    }
    let (h, w, c) = (a.height(), a.width(), a.channels());
    let mut sq = vec![0f64; h * w];
    for (k, v) in a.iter() {
        let other = b.get(k[0], k[1]);
        let s: f64 = (0..c)
            .map(|i| {
                let d = v[i] as f64 - other.map_or(0.0, |o| o[i] as f64);
                d * d
            })
            .sum();
        sq[k[0] as usize * w + k[1] as usize] = s;
    }
    for (k, v) in b.iter() {
        if a.get(k[0], k[1]).is_none() {
            sq[k[0] as usize * w + k[1] as usize] = v.iter().map(|&x| (x as f64).powi(2)).sum();
        }
    }
    let total: f64 = sq.iter().sum();
    let scalar = if h * w * c == 0 {
        0.0
    } else {
        (total / (h * w * c) as f64).sqrt()
    };
    let cells = sq
        .into_iter()
        .map(|s| (s / c.max(1) as f64).sqrt())
        .collect();
    Ok(RmseMap {
        height: h,
        width: w,
        cells,
        scalar,
    })
}

/// RMSE between the feature of the raw-augmented scene and the
/// feature-level augmentation of the scene's feature.
pub fn rmse_map(
    points: &[Point3],
    pair: AugPair<'_>,
    bb: &Backbone,
    spec: &GridSpec,
) -> Result<RmseMap> {
    let extract = |pts: &[Point3]| extract_grid_feature(bb, &voxelize(pts, spec));
    let base = extract(points)?;
    let (raw, feat) = match pair {
        AugPair::Identity => (base.clone(), base),
        AugPair::Flip => {
            let (p, _) = augment_points(points, &[], &RawPolicy::Flip, None, spec, 0)?;
            (
                extract(&p)?,
                perturb_feature(&base, FeaturePolicy::Flip, 0)?,
            )
        }
        AugPair::Rotate(angle) => {
            let (p, _) = augment_points(points, &[], &RawPolicy::Rotate(angle), None, spec, 0)?;
            (
                extract(&p)?,
                perturb_feature(&base, FeaturePolicy::Rotate(angle), 0)?,
            )
        }
        AugPair::GtPlace(db, placements) => {
            let policy = RawPolicy::GtPlace(placements.to_vec());
            let (p, _) = augment_points(points, &[], &policy, Some(db), spec, 0)?;
            let gt = extract(&placed_points(db, placements))?;
            (extract(&p)?, f_gt_grid(&base, &gt)?)
        }
    };
    feature_rmse(&raw, &feat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_backbone, BackboneSpec};
    use crate::gtbank::{build_gt_database, sample_placements};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn small_spec() -> GridSpec {
        GridSpec::new(0.0, 8.0, -4.0, 4.0, -2.0, 2.0, 0.4, 0.4, 0.5).unwrap()
    }

    fn feat(cells: &[([u32; 2], Vec<f32>)], c: usize) -> BevFeature {
        BevFeature::from_cells(small_spec(), c, cells.iter().cloned()).unwrap()
    }

    fn random_feature(seed: u64, density: f64, c: usize) -> BevFeature {
        let s = small_spec();
        let mut r = rng::rng(seed);
        let mut cells = Vec::new();
        for yi in 0..s.height() as u32 {
            for xi in 0..s.width() as u32 {
                if r.random::<f64>() < density {
                    cells.push((
                        [yi, xi],
                        (0..c).map(|_| r.random_range(0.1f32..1.0)).collect(),
                    ));
                }
            }
        }
        BevFeature::from_cells(s, c, cells).unwrap()
    }

    fn scene_points(seed: u64, n: usize) -> Vec<Point3> {
        let mut r = rng::rng(seed);
        (0..n)
            .map(|_| {
                Point3::new(
                    r.random_range(0.5..7.5),
                    r.random_range(-3.5..3.5),
                    r.random_range(-1.9..1.9),
                    r.random_range(0.0..1.0),
                )
            })
            .collect()
    }

    fn boxes() -> Vec<Box3D> {
        vec![Box3D::new(3.0, 1.0, 0.0, 2.0, 1.0, 1.0, 0.4, 0).unwrap()]
    }

    #[test]
    fn raw_flip_twice_is_identity() {
        let pts = scene_points(1, 200);
        let b = boxes();
        let (p1, b1) = augment_points(&pts, &b, &RawPolicy::Flip, None, &small_spec(), 0).unwrap();
        let (p2, b2) = augment_points(&p1, &b1, &RawPolicy::Flip, None, &small_spec(), 0).unwrap();
        assert_eq!(p2, pts);
        assert_eq!(b2, b);
        for (p, q) in pts.iter().zip(&p1) {
            assert_eq!(b[0].contains(p), b1[0].contains(q));
        }
    }

    #[test]
    fn raw_rotate_zero_is_identity() {
        let pts = scene_points(2, 50);
        let (p, b) = augment_points(
            &pts,
            &boxes(),
            &RawPolicy::Rotate(0.0),
            None,
            &small_spec(),
            0,
        )
        .unwrap();
        assert_eq!(p, pts);
        assert_eq!(b, boxes());
    }

    #[test]
    fn raw_rotate_keeps_points_in_boxes() {
        let pts = scene_points(3, 2000);
        let b = boxes();
        let (p, bb) =
            augment_points(&pts, &b, &RawPolicy::Rotate(0.7), None, &small_spec(), 0).unwrap();
        for (a, q) in pts.iter().zip(&p) {
            let la = b[0].to_local(a);
            let lq = bb[0].to_local(q);
            assert!((la.x - lq.x).abs() < 1e-9 && (la.y - lq.y).abs() < 1e-9);
        }
    }

    #[test]
    fn random_sample_keeps_roughly_ratio() {
        let pts = scene_points(4, 10_000);
        let (p, _) = augment_points(
            &pts,
            &[],
            &RawPolicy::RandomSample(0.3),
            None,
            &small_spec(),
            9,
        )
        .unwrap();
        assert!((p.len() as f64 - 3000.0).abs() < 200.0);
        assert!(augment_points(
            &pts,
            &[],
            &RawPolicy::RandomSample(0.0),
            None,
            &small_spec(),
            9
        )
        .is_err());
    }

    #[test]
    fn gt_place_adds_points_and_box() {
        let b = Box3D::new(4.0, 0.0, 0.0, 2.0, 1.0, 1.0, 0.0, 0).unwrap();
        let pts: Vec<Point3> = (0..10)
            .map(|i| Point3::new(3.5 + 0.1 * i as f64, 0.1, 0.0, 0.2))
            .collect();
        let db = build_gt_database([(&pts[..], &[b][..])]).unwrap();
        let pl = sample_placements(&db, &[], 1, &small_spec(), -1.0, 4).unwrap();
        assert_eq!(pl.len(), 1);
        let scene = scene_points(5, 30);
        let (p, bx) = augment_points(
            &scene,
            &[],
            &RawPolicy::GtPlace(pl.clone()),
            Some(&db),
            &small_spec(),
            0,
        )
        .unwrap();
        assert_eq!(p.len(), 40);
        assert_eq!(bx, vec![pl[0].bbox]);
        assert!(
            augment_points(&scene, &[], &RawPolicy::GtPlace(pl), None, &small_spec(), 0).is_err()
        );
    }

    #[test]
    fn feature_flip_twice_and_multiset() {
        let f = random_feature(1, 0.2, 3);
        let g = perturb_feature(&f, FeaturePolicy::Flip, 0).unwrap();
        assert_eq!(perturb_feature(&g, FeaturePolicy::Flip, 0).unwrap(), f);
        let mut a: Vec<Vec<u32>> = f
            .iter()
            .map(|(_, v)| v.iter().map(|x| x.to_bits()).collect())
            .collect();
        let mut b: Vec<Vec<u32>> = g
            .iter()
            .map(|(_, v)| v.iter().map(|x| x.to_bits()).collect())
            .collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        let h = f.height() as u32;
        let (k, v) = f.iter().next().unwrap();
        assert_eq!(g.get(h - 1 - k[0], k[1]).unwrap(), v);
    }

    #[test]
    fn feature_rotate_zero_and_noise_zero_are_identity() {
        let f = random_feature(2, 0.3, 4);
        assert_eq!(
            perturb_feature(&f, FeaturePolicy::Rotate(0.0), 0).unwrap(),
            f
        );
        assert_eq!(
            perturb_feature(&f, FeaturePolicy::Noise(0.0), 5).unwrap(),
            f
        );
    }

    #[test]
    fn feature_rotate_half_turn_is_point_reflection() {
        // 20 x 20 map: a half turn about the center maps (yi, xi) to (19 - yi, 19 - xi)
        let f = random_feature(3, 0.3, 2);
        let g = perturb_feature(&f, FeaturePolicy::Rotate(PI), 0).unwrap();
        assert_eq!(g.len(), f.len());
        for (k, v) in f.iter() {
            let got = g.get(19 - k[0], 19 - k[1]).unwrap();
            for (a, b) in got.iter().zip(v) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn feature_rotate_quarter_turn_moves_cells() {
        // square cells: +90 degrees sends offset (dx, dy) to (-dy, dx)
        let f = feat(&[([10, 15], vec![1.0])], 1);
        let g = perturb_feature(&f, FeaturePolicy::Rotate(PI / 2.0), 0).unwrap();
        // center at cell (9.5, 9.5); (dx, dy) = (5.5, 0.5) -> (-0.5, 5.5) -> (xi 9, yi 15)
        assert_eq!(g.len(), 1);
        let (k, v) = g.iter().next().unwrap();
        assert_eq!(k, [15, 9]);
        assert!((v[0] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn noise_changes_every_value() {
        let f = random_feature(4, 0.2, 3);
        let g = perturb_feature(&f, FeaturePolicy::Noise(0.1), 5).unwrap();
        assert_eq!(g.len(), f.len());
        assert!(f.values().iter().zip(g.values()).all(|(a, b)| a != b));
        assert_eq!(
            g,
            perturb_feature(&f, FeaturePolicy::Noise(0.1), 5).unwrap()
        );
        assert!(perturb_feature(&f, FeaturePolicy::Noise(-1.0), 5).is_err());
    }

    #[test]
    fn random_null_zeroes_five_percent() {
        // 250 cells x 4 channels = 1000 stored values, none zero
        let cells: Vec<([u32; 2], Vec<f32>)> = (0..250u32)
            .map(|i| ([i / 20, i % 20], vec![1.0, 2.0, 3.0, 4.0]))
            .collect();
        let f = feat(&cells, 4);
        assert_eq!(f.values().len(), 1000);
        let g = perturb_feature(&f, FeaturePolicy::RandomNull(DEFAULT_NULL_RATIO), 7).unwrap();
        let mut zeroed = 0;
        for (k, v) in f.iter() {
            match g.get(k[0], k[1]) {
                None => zeroed += 4,
                Some(w) => {
                    for (a, b) in v.iter().zip(w) {
                        if *b == 0.0 {
                            zeroed += 1;
                        } else {
                            assert_eq!(a, b);
                        }
                    }
                }
            }
        }
        assert_eq!(zeroed, 50);
    }

    #[test]
    fn grid_merge_examples() {
        let scene = feat(&[([3, 4], vec![1.0, 1.0]), ([0, 0], vec![5.0, 5.0])], 2);
        let gt = feat(&[([3, 4], vec![2.0, 0.0]), ([1, 1], vec![0.5, 0.5])], 2);
        let empty = BevFeature::empty(small_spec(), 2);
        assert_eq!(f_gt_grid(&scene, &empty).unwrap(), scene);
        assert_eq!(f_gt_grid(&empty, &gt).unwrap(), gt);
        let m = f_gt_grid(&scene, &gt).unwrap();
        assert_eq!(m.get(3, 4).unwrap(), &[2.0, 0.0]);
        assert_eq!(m.get(0, 0).unwrap(), &[5.0, 5.0]);
        assert_eq!(m.get(1, 1).unwrap(), &[0.5, 0.5]);
        assert_eq!(m.len(), 3);
        let other = BevFeature::empty(small_spec(), 3);
        assert!(matches!(
            f_gt_grid(&scene, &other),
            Err(Error::ShapeMismatch(_))
        ));
    }

    fn set(dim: usize, positions: &[[f32; 3]], tag: f32) -> SetFeature {
        SetFeature::new(
            dim,
            positions
                .iter()
                .map(|p| SetPoint {
                    position: *p,
                    vector: vec![tag; dim],
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn set_merge_ratio_and_exclusion() {
        let scene = set(
            2,
            &[[1.0, 1.0, 0.0], [3.0, 1.0, 0.0], [6.0, -2.0, 0.0]],
            1.0,
        );
        let gt = set(2, &[[0.0, 0.0, 0.0]], 2.0);
        // the box swallows the second scene point
        let b = boxes();
        let out = f_gt_set(&scene, &gt, &b, 100, 100, 20_000, 3).unwrap();
        assert_eq!(out.len(), 20_000);
        assert!(out.points.iter().all(|p| p.position != [3.0, 1.0, 0.0]));
        let from_gt = out.points.iter().filter(|p| p.vector[0] == 2.0).count();
        assert!((from_gt as f64 / 20_000.0 - 0.5).abs() < 0.02);
    }

    #[test]
    fn set_merge_forty_to_one() {
        let draws = draw_set_sources(500, 50, 2000, 50, 1.0, 100_000, 11).unwrap();
        let gt = draws.iter().filter(|d| d.0 == SetSource::Gt).count();
        let ratio = (draws.len() - gt) as f64 / gt as f64;
        assert!((ratio / 40.0 - 1.0).abs() <= 0.1, "ratio {ratio}");
        let draws = draw_set_sources(500, 50, 2000, 50, 10.0, 100_000, 11).unwrap();
        let gt = draws.iter().filter(|d| d.0 == SetSource::Gt).count();
        let ratio = (draws.len() - gt) as f64 / gt as f64;
        assert!((ratio / 400.0 - 1.0).abs() <= 0.2, "ratio {ratio}");
    }

    #[test]
    fn set_merge_edge_cases() {
        let gt = set(2, &[[0.0, 0.0, 0.0]], 2.0);
        let scene = set(2, &[[3.0, 1.0, 0.0]], 1.0);
        let all_gt = f_gt_set(&scene, &gt, &boxes(), 10, 10, 30, 1).unwrap();
        assert!(all_gt.points.iter().all(|p| p.vector[0] == 2.0));
        assert!(f_gt_set(&scene, &gt, &boxes(), 10, 0, 30, 1).is_err());
        let none = set(2, &[], 0.0);
        assert!(f_gt_set(&scene, &none, &boxes(), 10, 10, 30, 1).is_err());
        assert!(f_gt_set(&scene, &gt, &boxes(), 10, 10, 0, 1).is_err());
    }

    fn tiny_backbone() -> Backbone {
        init_backbone(&BackboneSpec {
            channels: vec![4, 4, 4],
            kernel: 3,
            strides: vec![[1, 1, 1], [2, 1, 1]],
            seed: 1,
        })
        .unwrap()
    }

    #[test]
    fn rmse_identity_is_zero_and_flip_positive() {
        let bb = tiny_backbone();
        let pts = scene_points(6, 300);
        let id = rmse_map(&pts, AugPair::Identity, &bb, &small_spec()).unwrap();
        assert_eq!(id.scalar, 0.0);
        assert_eq!(id.nonzero().count(), 0);
        let fl = rmse_map(&pts, AugPair::Flip, &bb, &small_spec()).unwrap();
        assert!(fl.scalar > 0.0);
        assert!(fl.cells.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn rmse_gt_errors_stay_near_placements() {
        let bb = tiny_backbone();
        let spec = GridSpec::new(0.0, 16.0, -8.0, 8.0, -2.0, 2.0, 0.4, 0.4, 0.5).unwrap();
        let b = Box3D::new(4.0, 0.0, -1.0, 2.0, 1.0, 1.0, 0.0, 0).unwrap();
        let obj: Vec<Point3> = (0..20)
            .map(|i| Point3::new(3.2 + 0.08 * i as f64, -0.4 + 0.04 * i as f64, -1.2, 0.3))
            .collect();
        let db = build_gt_database([(&obj[..], &[b][..])]).unwrap();
        let pts = scene_points(7, 400)
            .into_iter()
            .map(|p| Point3 {
                x: p.x * 2.0,
                y: p.y * 2.0,
                ..p
            })
            .collect::<Vec<_>>();
        let pl = sample_placements(&db, &[], 2, &spec, -1.5, 3).unwrap();
        let m = rmse_map(&pts, AugPair::GtPlace(&db, &pl), &bb, &spec).unwrap();
        let [_, ry, rx] = bb.receptive_radius();
        for (yi, xi, _) in m.nonzero() {
            let (x, y) = spec.cell_center(yi, xi);
            let near = pl.iter().any(|p| {
                let l = p.bbox.to_local(&Point3::new(x, y, p.bbox.cz, 0.0));
                let pad = (rx.max(ry) as f64 + 1.0) * spec.vx;
                l.x.abs() <= p.bbox.length / 2.0 + pad * 1.5
                    && l.y.abs() <= p.bbox.width / 2.0 + pad * 1.5
            });
            assert!(near, "error at ({yi}, {xi}) away from placed objects");
        }
    }

    proptest! {
        #[test]
        fn grid_merge_cellwise(seed in 0u64..10_000, ds in 0.0f64..0.6, dg in 0.0f64..0.6) {
            let s = random_feature(seed, ds, 3);
            let g = random_feature(seed ^ 0xabc, dg, 3);
            let m = f_gt_grid(&s, &g).unwrap();
            for yi in 0..s.height() as u32 {
                for xi in 0..s.width() as u32 {
                    let want = g.get(yi, xi).or(s.get(yi, xi));
                    prop_assert_eq!(m.get(yi, xi), want);
                }
            }
        }

        #[test]
        fn random_null_preserves_untouched(seed in 0u64..10_000) {
            let f = random_feature(seed, 0.3, 3);
            let g = perturb_feature(&f, FeaturePolicy::RandomNull(0.05), seed).unwrap();
            let mut zeroed = 0usize;
            for (k, v) in f.iter() {
                let w = g.get(k[0], k[1]).map(<[f32]>::to_vec).unwrap_or(vec![0.0; 3]);
                for (a, b) in v.iter().zip(&w) {
                    if *b == 0.0 { zeroed += 1 } else { prop_assert_eq!(a, b) }
                }
            }
            prop_assert_eq!(zeroed, (0.05 * f.values().len() as f64).round() as usize);
        }

        #[test]
        fn raw_flip_involution(seed in 0u64..10_000) {
            let pts = scene_points(seed, 50);
            let (p1, _) = augment_points(&pts, &[], &RawPolicy::Flip, None, &small_spec(), 0).unwrap();
            let (p2, _) = augment_points(&p1, &[], &RawPolicy::Flip, None, &small_spec(), 0).unwrap();
            prop_assert_eq!(p2, pts);
        }
    }
}
