//! Voxelization, sparse voxel grids, and BEV compression.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::Point3;

/// Axis-aligned voxel grid over the scene extent. Intervals are half-open,
/// `[min, max)`, on every axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
}

impl Default for GridSpec {
    /// 70.4 x 80 x 4 m at 0.4 x 0.4 x 0.5 m: W = 176, H = 200, D = 8.
    fn default() -> Self {
        Self {
            x_min: 0.0,
            x_max: 70.4,
            y_min: -40.0,
            y_max: 40.0,
            z_min: -3.0,
            z_max: 1.0,
            vx: 0.4,
            vy: 0.4,
            vz: 0.5,
        }
    }
}

fn cells(lo: f64, hi: f64, v: f64) -> usize {
    // 70.4 / 0.4 is 175.99999999999997 in binary; snap near-integers first
    let r = (hi - lo) / v;
    let nearest = r.round();
    if (r - nearest).abs() < 1e-9 {
        nearest as usize
    } else {
        r.ceil() as usize
    }
}

impl GridSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        x_min: f64,
        x_max: f64,
        y_min: f64,
        y_max: f64,
        z_min: f64,
        z_max: f64,
        vx: f64,
        vy: f64,
        vz: f64,
    ) -> Result<Self> {
        let s = Self {
            x_min,
            x_max,
            y_min,
            y_max,
            z_min,
            z_max,
            vx,
            vy,
            vz,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.x_min, self.x_max, self.y_min, self.y_max, self.z_min, self.z_max, self.vx,
            self.vy, self.vz,
        ];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("grid spec fields must be finite"));
        }
        if self.x_max <= self.x_min || self.y_max <= self.y_min || self.z_max <= self.z_min {
            return Err(Error::invalid("grid spec needs max > min on every axis"));
        }
        if self.vx <= 0.0 || self.vy <= 0.0 || self.vz <= 0.0 {
            return Err(Error::invalid("voxel sizes must be positive"));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        cells(self.z_min, self.z_max, self.vz)
    }

    pub fn height(&self) -> usize {
        cells(self.y_min, self.y_max, self.vy)
    }

    pub fn width(&self) -> usize {
        cells(self.x_min, self.x_max, self.vx)
    }

    /// `(D, H, W)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.depth(), self.height(), self.width())
    }

    pub fn center_xy(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    /// `(zi, yi, xi)` of the voxel containing `p`, or `None` outside the extent.
    pub fn voxel_index(&self, p: &Point3) -> Option<(usize, usize, usize)> {
        if !(p.x >= self.x_min && p.x < self.x_max)
            || !(p.y >= self.y_min && p.y < self.y_max)
            || !(p.z >= self.z_min && p.z < self.z_max)
        {
            return None;
        }
        let (d, h, w) = self.dims();
        let xi = ((p.x - self.x_min) / self.vx).floor() as usize;
        let yi = ((p.y - self.y_min) / self.vy).floor() as usize;
        let zi = ((p.z - self.z_min) / self.vz).floor() as usize;
        (xi < w && yi < h && zi < d).then_some((zi, yi, xi))
    }

    /// `(yi, xi)` of the BEV cell under `(x, y)`.
    pub fn cell_index(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !(x >= self.x_min && x < self.x_max) || !(y >= self.y_min && y < self.y_max) {
            return None;
        }
        let xi = ((x - self.x_min) / self.vx).floor() as usize;
        let yi = ((y - self.y_min) / self.vy).floor() as usize;
        (xi < self.width() && yi < self.height()).then_some((yi, xi))
    }

    pub fn voxel_center(&self, zi: usize, yi: usize, xi: usize) -> (f64, f64, f64) {
        (
            self.x_min + (xi as f64 + 0.5) * self.vx,
            self.y_min + (yi as f64 + 0.5) * self.vy,
            self.z_min + (zi as f64 + 0.5) * self.vz,
        )
    }

    pub fn cell_center(&self, yi: usize, xi: usize) -> (f64, f64) {
        (
            self.x_min + (xi as f64 + 0.5) * self.vx,
            self.y_min + (yi as f64 + 0.5) * self.vy,
        )
    }

    /// Spec with cell sizes multiplied by integer strides, covering the same extent.
    pub fn strided(&self, sz: usize, sy: usize, sx: usize) -> Self {
        Self {
            vx: self.vx * sx as f64,
            vy: self.vy * sy as f64,
            vz: self.vz * sz as f64,
            ..*self
        }
    }

    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }
}

fn is_all_zero(v: &[f32]) -> bool {
    v.iter().all(|&x| x == 0.0)
}

/// Sparse `(zi, yi, xi) -> channel vector` map; coordinates sorted, no
/// all-zero vectors stored.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseVoxelGrid {
    spec: GridSpec,
    channels: usize,
    coords: Vec<[u32; 3]>,
    values: Vec<f32>,
}

impl SparseVoxelGrid {
    pub fn empty(spec: GridSpec, channels: usize) -> Self {
        Self {
            spec,
            channels,
            coords: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Build from arbitrary cells; all-zero vectors are dropped and
    /// duplicates rejected.
    pub fn from_cells(
        spec: GridSpec,
        channels: usize,
        cells: impl IntoIterator<Item = ([u32; 3], Vec<f32>)>,
    ) -> Result<Self> {
        let (d, h, w) = spec.dims();
        let mut map = BTreeMap::new();
        for (c, v) in cells {
            if v.len() != channels {
                return Err(Error::ChannelMismatch {
                    expected: channels,
                    actual: v.len(),
                });
            }
            if c[0] as usize >= d || c[1] as usize >= h || c[2] as usize >= w {
                return Err(Error::invalid(format!(
                    "voxel {c:?} outside grid {d}x{h}x{w}"
                )));
            }
            if map.insert(c, v).is_some() {
                return Err(Error::invalid(format!("duplicate voxel {c:?}")));
            }
        }
        let mut grid = Self::empty(spec, channels);
        for (c, v) in map {
            if !is_all_zero(&v) {
                grid.coords.push(c);
                grid.values.extend_from_slice(&v);
            }
        }
        Ok(grid)
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = ([u32; 3], &[f32])> + '_ {
        self.coords
            .iter()
            .copied()
            .zip(self.values.chunks_exact(self.channels.max(1)))
    }

    pub fn get(&self, zi: u32, yi: u32, xi: u32) -> Option<&[f32]> {
        self.coords
            .binary_search(&[zi, yi, xi])
            .ok()
            .map(|i| &self.values[i * self.channels..(i + 1) * self.channels])
    }
}

/// Sparse BEV feature map: `(yi, xi) -> C-vector`, row-major sorted, no
/// all-zero vectors stored. `spec` describes the BEV cell geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct BevFeature {
    spec: GridSpec,
    height: usize,
    width: usize,
    channels: usize,
    coords: Vec<[u32; 2]>,
    values: Vec<f32>,
}

impl BevFeature {
    pub fn empty(spec: GridSpec, channels: usize) -> Self {
        Self {
            height: spec.height(),
            width: spec.width(),
            spec,
            channels,
            coords: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Build from arbitrary cells; all-zero vectors are dropped, duplicates
    /// and out-of-range indices rejected.
    pub fn from_cells(
        spec: GridSpec,
        channels: usize,
        cells: impl IntoIterator<Item = ([u32; 2], Vec<f32>)>,
    ) -> Result<Self> {
        let mut out = Self::empty(spec, channels);
        let mut map = BTreeMap::new();
        for (c, v) in cells {
            if v.len() != channels {
                return Err(Error::ChannelMismatch {
                    expected: channels,
                    actual: v.len(),
                });
            }
            if c[0] as usize >= out.height || c[1] as usize >= out.width {
                return Err(Error::invalid(format!(
                    "cell {c:?} outside map {}x{}",
                    out.height, out.width
                )));
            }
            if map.insert(c, v).is_some() {
                return Err(Error::invalid(format!("duplicate cell {c:?}")));
            }
        }
        for (c, v) in map {
            out.push_sorted(c, &v);
        }
        Ok(out)
    }

    /// Build from cells already in strictly increasing row-major order.
    pub(crate) fn from_sorted_unchecked(
        spec: GridSpec,
        channels: usize,
        cells: impl IntoIterator<Item = ([u32; 2], Vec<f32>)>,
    ) -> Self {
        let mut out = Self::empty(spec, channels);
        for (c, v) in cells {
            out.push_sorted(c, &v);
        }
        out
    }

    fn push_sorted(&mut self, c: [u32; 2], v: &[f32]) {
        debug_assert_eq!(v.len(), self.channels);
        debug_assert!(self.coords.last().is_none_or(|last| *last < c));
        if !is_all_zero(v) {
            self.coords.push(c);
            self.values.extend_from_slice(v);
        }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[u32; 2]] {
        &self.coords
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = ([u32; 2], &[f32])> + '_ {
        self.coords
            .iter()
            .copied()
            .zip(self.values.chunks_exact(self.channels.max(1)))
    }

    pub fn get(&self, yi: u32, xi: u32) -> Option<&[f32]> {
        self.coords
            .binary_search(&[yi, xi])
            .ok()
            .map(|i| &self.values[i * self.channels..(i + 1) * self.channels])
    }

    /// Dense row-major `H x W` table of stored-cell indices.
    pub fn dense_index(&self) -> Vec<Option<u32>> {
        let mut table = vec![None; self.height * self.width];
        for (i, c) in self.coords.iter().enumerate() {
            table[c[0] as usize * self.width + c[1] as usize] = Some(i as u32);
        }
        table
    }

    pub fn same_shape(&self, other: &BevFeature) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.channels == other.channels
            && self.spec == other.spec
    }

    pub fn total_mass(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum()
    }
}

/// Mean-pooled 4-channel encoding per occupied voxel: offsets of the points
/// from the voxel center (meters) and intensity. Points outside the extent
/// are dropped.
pub fn voxelize(points: &[Point3], spec: &GridSpec) -> SparseVoxelGrid {
    // Sort contributions so that the per-voxel sums do not depend on input order.
    let mut keyed: Vec<([u32; 3], [f64; 4])> = points
        .iter()
        .filter_map(|p| {
            let (zi, yi, xi) = spec.voxel_index(p)?;
            let (cx, cy, cz) = spec.voxel_center(zi, yi, xi);
            Some((
                [zi as u32, yi as u32, xi as u32],
                [p.x - cx, p.y - cy, p.z - cz, p.intensity],
            ))
        })
        .collect();
    keyed.sort_by(|a, b| {
        a.0.cmp(&b.0).then_with(|| {
            a.1.iter()
                .zip(b.1.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });

    let mut grid = SparseVoxelGrid::empty(*spec, 4);
    let mut i = 0;
    while i < keyed.len() {
        let key = keyed[i].0;
        let mut sum = [0f64; 4];
        let mut n = 0usize;
        while i < keyed.len() && keyed[i].0 == key {
            for (s, v) in sum.iter_mut().zip(keyed[i].1) {
                *s += v;
            }
            n += 1;
            i += 1;
        }
        let mean: Vec<f32> = sum.iter().map(|s| (s / n as f64) as f32).collect();
        if !is_all_zero(&mean) {
            grid.coords.push(key);
            grid.values.extend_from_slice(&mean);
        }
    }
    grid
}

/// Stack z-slices into channels: output channel `zi * C_in + k`.
pub fn bev_compress(grid: &SparseVoxelGrid) -> BevFeature {
    let spec = grid.spec;
    let d = spec.depth();
    let cin = grid.channels;
    let cout = d * cin;
    let mut columns: BTreeMap<[u32; 2], Vec<f32>> = BTreeMap::new();
    for (c, v) in grid.iter() {
        let col = columns
            .entry([c[1], c[2]])
            .or_insert_with(|| vec![0.0; cout]);
        let base = c[0] as usize * cin;
        col[base..base + cin].copy_from_slice(v);
    }
    BevFeature::from_sorted_unchecked(spec, cout, columns)
}

pub fn nonzero_cell_count(feature: &BevFeature) -> usize {
    feature.len()
}
