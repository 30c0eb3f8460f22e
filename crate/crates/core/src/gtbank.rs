//! Ground-truth database and overlap-free placement sampling.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::geometry::{box_corners_bev, iou_bev, Box3D, Point3};
use crate::rng;
use crate::voxelgrid::GridSpec;

/// Candidates drawn per requested slot before the slot is given up.
pub const ATTEMPTS_PER_SLOT: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct GtEntry {
    /// Box at its original pose.
    pub bbox: Box3D,
    /// Points in the box frame.
    pub local_points: Vec<Point3>,
    /// Index of the labeled scene the entry was cropped from.
    pub source_scene: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GtDatabase {
    entries: Vec<GtEntry>,
    by_class: BTreeMap<u8, Vec<usize>>,
}

impl GtDatabase {
    pub fn from_entries(entries: Vec<GtEntry>) -> Result<Self> {
        let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
        for (i, e) in entries.iter().enumerate() {
            if e.local_points.is_empty() {
                return Err(Error::invalid(format!("entry {i} has no points")));
            }
            let unit = Box3D {
                cx: 0.0,
                cy: 0.0,
                cz: 0.0,
                yaw: 0.0,
                ..e.bbox
            };
            if let Some(p) = e.local_points.iter().find(|p| !unit.contains_local(p)) {
                return Err(Error::invalid(format!(
                    "entry {i} has point {p:?} outside its box"
                )));
            }
            by_class.entry(e.bbox.class_id).or_default().push(i);
        }
        Ok(Self { entries, by_class })
    }

    pub fn entries(&self) -> &[GtEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn class_indices(&self, class_id: u8) -> &[usize] {
        self.by_class.get(&class_id).map_or(&[], Vec::as_slice)
    }
}

/// Crop every labeled box out of its scene. Boxes without points are skipped.
pub fn build_gt_database<'a>(
    labeled: impl IntoIterator<Item = (&'a [Point3], &'a [Box3D])>,
) -> Result<GtDatabase> {
    let mut entries = Vec::new();
    for (scene, (points, boxes)) in labeled.into_iter().enumerate() {
        for b in boxes {
            let local: Vec<Point3> = points
                .iter()
                .map(|p| b.to_local(p))
                .filter(|l| b.contains_local(l))
                .collect();
            if !local.is_empty() {
                entries.push(GtEntry {
                    bbox: *b,
                    local_points: local,
                    source_scene: scene,
                });
            }
        }
    }
    GtDatabase::from_entries(entries)
}

/// A database entry moved to a new pose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub entry: usize,
    pub bbox: Box3D,
}

impl Placement {
    pub fn x(&self) -> f64 {
        self.bbox.cx
    }

    pub fn y(&self) -> f64 {
        self.bbox.cy
    }

    pub fn z(&self) -> f64 {
        self.bbox.cz
    }

    pub fn yaw(&self) -> f64 {
        self.bbox.yaw
    }

    /// The entry's points in the scene frame at this pose.
    pub fn points(&self, db: &GtDatabase) -> Vec<Point3> {
        db.entries[self.entry]
            .local_points
            .iter()
            .map(|p| self.bbox.to_world(p))
            .collect()
    }
}

fn inside_extent(b: &Box3D, extent: &GridSpec) -> bool {
    box_corners_bev(b)
        .iter()
        .all(|c| extent.contains_xy(c[0], c[1]))
}

/// Draw up to `k` placements over all entries. Each candidate gets a
/// uniform `(x, y)` over the extent, uniform yaw, and rests on `ground_z`.
/// It is rejected when it leaves the extent or has positive BEV IoU with a
/// forbidden box or an already accepted placement.
pub fn sample_placements(
    db: &GtDatabase,
    forbidden: &[Box3D],
    k: usize,
    extent: &GridSpec,
    ground_z: f64,
    seed: u64,
) -> Result<Vec<Placement>> {
    let pool: Vec<usize> = (0..db.len()).collect();
    sample_from_pool(db, &pool, forbidden, k, extent, ground_z, seed)
}

/// As [`sample_placements`], restricted to one class.
pub fn sample_placements_of_class(
    db: &GtDatabase,
    class_id: u8,
    forbidden: &[Box3D],
    k: usize,
    extent: &GridSpec,
    ground_z: f64,
    seed: u64,
) -> Result<Vec<Placement>> {
    sample_from_pool(
        db,
        db.class_indices(class_id),
        forbidden,
        k,
        extent,
        ground_z,
        seed,
    )
}

fn sample_from_pool(
    db: &GtDatabase,
    pool: &[usize],
    forbidden: &[Box3D],
    k: usize,
    extent: &GridSpec,
    ground_z: f64,
    seed: u64,
) -> Result<Vec<Placement>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    if pool.is_empty() {
        return Err(Error::invalid(
            "cannot sample placements from an empty database",
        ));
    }
    let mut r = rng::rng(seed);
    let mut accepted: Vec<Placement> = Vec::with_capacity(k);
    for _ in 0..k {
        for _ in 0..ATTEMPTS_PER_SLOT {
            let entry = pool[r.random_range(0..pool.len())];
            let x = r.random_range(extent.x_min..extent.x_max);
            let y = r.random_range(extent.y_min..extent.y_max);
            let yaw = r.random_range(-PI..PI);
            let src = &db.entries[entry].bbox;
            let cand = src.with_pose(x, y, ground_z + src.height / 2.0, yaw)?;
            if !inside_extent(&cand, extent) {
                continue;
            }
            let clash = forbidden
                .iter()
                .chain(accepted.iter().map(|p| &p.bbox))
                .any(|b| iou_bev(&cand, b) > 0.0);
            if !clash {
                accepted.push(Placement { entry, bbox: cand });
                break;
            }
        }
    }
    Ok(accepted)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn car(cx: f64, cy: f64) -> Box3D {
        Box3D::new(cx, cy, -0.8, 3.9, 1.6, 1.56, 0.3, 0).unwrap()
    }

    fn pts_in(b: &Box3D, n: usize) -> Vec<Point3> {
        (0..n)
            .map(|i| {
                let t = i as f64 / n as f64 - 0.5;
                b.to_world(&Point3::new(
                    t * b.length * 0.9,
                    t * b.width * 0.5,
                    0.1,
                    0.5,
                ))
            })
            .collect()
    }

    fn small_extent() -> GridSpec {
        GridSpec::new(0.0, 40.0, -20.0, 20.0, -3.0, 1.0, 0.4, 0.4, 0.5).unwrap()
    }

    #[test]
    fn one_box_ten_points() {
        let b = car(10.0, 0.0);
        let pts = pts_in(&b, 10);
        let db = build_gt_database([(&pts[..], &[b][..])]).unwrap();
        assert_eq!(db.len(), 1);
        assert_eq!(db.entries()[0].local_points.len(), 10);
        assert_eq!(db.entries()[0].source_scene, 0);
    }

    #[test]
    fn empty_box_skipped() {
        let b = car(10.0, 0.0);
        let far = pts_in(&car(30.0, 10.0), 5);
        let db = build_gt_database([(&far[..], &[b][..])]).unwrap();
        assert!(db.is_empty());
    }

    #[test]
    fn entries_across_scenes() {
        let a: Vec<Box3D> = (0..3).map(|i| car(5.0 + 6.0 * i as f64, 0.0)).collect();
        let b: Vec<Box3D> = (0..2).map(|i| car(5.0 + 6.0 * i as f64, 8.0)).collect();
        let pa: Vec<Point3> = a.iter().flat_map(|x| pts_in(x, 4)).collect();
        let pb: Vec<Point3> = b.iter().flat_map(|x| pts_in(x, 6)).collect();
        let db = build_gt_database([(&pa[..], &a[..]), (&pb[..], &b[..])]).unwrap();
        assert_eq!(db.len(), 5);
        assert_eq!(db.class_indices(0), &[0, 1, 2, 3, 4]);
        assert_eq!(db.entries()[3].source_scene, 1);
        assert!(db.class_indices(1).is_empty());
    }

    fn one_entry_db() -> GtDatabase {
        let b = car(10.0, 0.0);
        let pts = pts_in(&b, 10);
        build_gt_database([(&pts[..], &[b][..])]).unwrap()
    }

    #[test]
    fn zero_requests_and_empty_database() {
        let db = one_entry_db();
        assert!(sample_placements(&db, &[], 0, &small_extent(), -1.6, 1)
            .unwrap()
            .is_empty());
        let empty = GtDatabase::default();
        assert!(sample_placements(&empty, &[], 0, &small_extent(), -1.6, 1)
            .unwrap()
            .is_empty());
        assert!(sample_placements(&empty, &[], 2, &small_extent(), -1.6, 1).is_err());
    }

    #[test]
    fn saturated_extent_gives_nothing() {
        let db = one_entry_db();
        let e = small_extent();
        let tiles: Vec<Box3D> = (0..10)
            .flat_map(|i| {
                (0..10).map(move |j| {
                    Box3D::new(
                        2.0 + 4.0 * i as f64,
                        -18.0 + 4.0 * j as f64,
                        0.0,
                        4.2,
                        4.2,
                        2.0,
                        0.0,
                        0,
                    )
                    .unwrap()
                })
            })
            .collect();
        let got = sample_placements(&db, &tiles, 5, &e, -1.6, 3).unwrap();
        assert!(got.is_empty());
    }

    #[test]
    fn placements_never_overlap() {
        let db = one_entry_db();
        let e = small_extent();
        let forbidden = [car(20.0, 0.0)];
        for seed in 0..50 {
            let got = sample_placements(&db, &forbidden, 5, &e, -1.6, seed).unwrap();
            assert!(!got.is_empty());
            for (i, p) in got.iter().enumerate() {
                assert_eq!(iou_bev(&p.bbox, &forbidden[0]), 0.0);
                assert!(inside_extent(&p.bbox, &e));
                assert!((p.z() - (-1.6 + 1.56 / 2.0)).abs() < 1e-12);
                for q in &got[i + 1..] {
                    assert_eq!(iou_bev(&p.bbox, &q.bbox), 0.0);
                }
            }
            assert_eq!(
                got,
                sample_placements(&db, &forbidden, 5, &e, -1.6, seed).unwrap()
            );
        }
    }

    #[test]
    fn placed_points_stay_in_placed_box() {
        let db = one_entry_db();
        let got = sample_placements(&db, &[], 3, &small_extent(), -1.6, 9).unwrap();
        for p in &got {
            let pts = p.points(&db);
            assert_eq!(pts.len(), 10);
            // shrink-free check with a tiny tolerance for the rigid transform
            for q in pts {
                let l = p.bbox.to_local(&q);
                assert!(l.x.abs() <= p.bbox.length / 2.0 + 1e-9);
                assert!(l.y.abs() <= p.bbox.width / 2.0 + 1e-9);
            }
        }
    }
}
