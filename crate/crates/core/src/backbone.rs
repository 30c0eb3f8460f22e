//! Deterministic sparse 3D convolutional backbone.
//!
//! Each layer is a regular (non-submanifold) sparse convolution: an output
//! site is active iff its kernel window touches an active input site, so the
//! active set dilates by the kernel radius every layer. A change confined to
//! a region R of the input can therefore only reach outputs within R dilated
//! by [`Backbone::receptive_radius`]. Activations are rectified and there are
//! no biases, so an empty grid maps to an empty feature.
//!
//! The final volume is BEV-compressed into the grid-type feature. Set-type
//! features are gathered from it by bilinear reads at farthest-point-sampled
//! keypoints.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::rng;
use crate::voxelgrid::{bev_compress, BevFeature, GridSpec, SparseVoxelGrid};

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneSpec {
    /// Input channels followed by the output channels of every layer.
    pub channels: Vec<usize>,
    /// Odd kernel width, shared by all three axes.
    pub kernel: usize,
    /// Per-layer `(z, y, x)` strides.
    pub strides: Vec<[usize; 3]>,
    pub seed: u64,
}

impl Default for BackboneSpec {
    /// 4 -> 8 -> 16 -> 16 -> 16 -> 16, kernel 3, z-stride 2 at layers 2 and 4.
    fn default() -> Self {
        Self {
            channels: vec![4, 8, 16, 16, 16, 16],
            kernel: 3,
            strides: vec![[1, 1, 1], [2, 1, 1], [1, 1, 1], [2, 1, 1], [1, 1, 1]],
            seed: 0,
        }
    }
}

impl BackboneSpec {
    pub fn num_layers(&self) -> usize {
        self.channels.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers() == 0 {
            return Err(Error::invalid("backbone needs at least one layer"));
        }
        if self.strides.len() != self.num_layers() {
            return Err(Error::invalid(format!(
                "{} layers but {} stride entries",
                self.num_layers(),
                self.strides.len()
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::invalid("kernel width must be odd"));
        }
        if self.channels.contains(&0) {
            return Err(Error::invalid("channel counts must be positive"));
        }
        if self.strides.iter().flatten().any(|&s| s == 0) {
            return Err(Error::invalid("strides must be at least 1"));
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        self.channels[0]
    }

    pub fn final_channels(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    /// Product of strides per axis, `(z, y, x)`.
    pub fn total_stride(&self) -> [usize; 3] {
        self.strides.iter().fold([1, 1, 1], |acc, s| {
            [acc[0] * s[0], acc[1] * s[1], acc[2] * s[2]]
        })
    }

    /// Geometry of the BEV map the backbone produces for inputs on `grid`.
    pub fn output_spec(&self, grid: &GridSpec) -> GridSpec {
        let [sz, sy, sx] = self.total_stride();
        grid.strided(sz, sy, sx)
    }

    /// Channel count of the BEV feature for inputs on `grid`.
    pub fn bev_channels(&self, grid: &GridSpec) -> usize {
        self.output_spec(grid).depth() * self.final_channels()
    }

    pub fn taps(&self) -> usize {
        self.kernel.pow(3)
    }

    pub fn weight_len(&self, layer: usize) -> usize {
        self.taps() * self.channels[layer] * self.channels[layer + 1]
    }
}

/// Weight layout per layer: `[tap][c_in][c_out]`, with taps enumerated
/// z-major over offsets `-r..=r`.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    spec: BackboneSpec,
    weights: Vec<Vec<f32>>,
    frozen: bool,
}

/// Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn init_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn init_backbone(spec: &BackboneSpec) -> Result<Backbone> {
    spec.validate()?;
    let mut r = rng::rng(spec.seed);
    let weights = (0..spec.num_layers())
        .map(|l| {
            let taps = spec.taps();
            let a = init_bound(taps * spec.channels[l], taps * spec.channels[l + 1]);
            (0..spec.weight_len(l))
                .map(|_| r.random_range(-a..=a) as f32)
                .collect()
        })
        .collect();
    Ok(Backbone {
        spec: spec.clone(),
        weights,
        frozen: false,
    })
}

impl Backbone {
    pub fn from_weights(spec: BackboneSpec, weights: Vec<Vec<f32>>) -> Result<Self> {
        spec.validate()?;
        if weights.len() != spec.num_layers() {
            return Err(Error::ShapeMismatch(format!(
                "{} weight tensors for {} layers",
                weights.len(),
                spec.num_layers()
            )));
        }
        for (l, w) in weights.iter().enumerate() {
            if w.len() != spec.weight_len(l) {
                return Err(Error::ShapeMismatch(format!(
                    "layer {l}: {} weights, expected {}",
                    w.len(),
                    spec.weight_len(l)
                )));
            }
        }
        Ok(Self {
            spec,
            weights,
            frozen: false,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[Vec<f32>] {
        &self.weights
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Cells of input reach per axis `(z, y, x)`, in input voxels.
    pub fn receptive_radius(&self) -> [usize; 3] {
        let r = self.spec.kernel / 2;
        let mut reach = [0usize; 3];
        let mut scale = [1usize; 3];
        for s in &self.spec.strides {
            for a in 0..3 {
                reach[a] += r * scale[a];
                scale[a] *= s[a];
            }
        }
        reach
    }

    /// SGD update with the given gradients.
    pub fn apply_gradients(&mut self, grads: &BackboneGradients, lr: f64) -> Result<()> {
        if self.frozen {
            return Err(Error::Contract("backbone is frozen".into()));
        }
        for (w, g) in self.weights.iter_mut().zip(&grads.weights) {
            for (wi, gi) in w.iter_mut().zip(g) {
                *wi -= (lr * *gi) as f32;
            }
        }
        Ok(())
    }
}

/// Activations of one sparse volume.
#[derive(Clone, Debug)]
struct Volume {
    dims: [usize; 3],
    channels: usize,
    sites: Vec<[u32; 3]>,
    values: Vec<f32>,
}

impl Volume {
    fn dense_table(&self) -> Vec<u32> {
        let [d, h, w] = self.dims;
        let mut table = vec![u32::MAX; d * h * w];
        for (i, s) in self.sites.iter().enumerate() {
            table[(s[0] as usize * h + s[1] as usize) * w + s[2] as usize] = i as u32;
        }
        table
    }
}

/// Input/output site pairs per kernel tap.
type Rulebook = Vec<Vec<(u32, u32)>>;

#[derive(Clone, Debug)]
struct LayerTrace {
    input: Volume,
    rules: Rulebook,
    output: Volume,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    layers: Vec<LayerTrace>,
    out_spec: GridSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneGradients {
    pub weights: Vec<Vec<f64>>,
}

impl BackboneGradients {
    pub fn zeros(spec: &BackboneSpec) -> Self {
        Self {
            weights: (0..spec.num_layers())
                .map(|l| vec![0.0; spec.weight_len(l)])
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &BackboneGradients, scale: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }
}

fn conv_layer(
    input: &Volume,
    weights: &[f32],
    cout: usize,
    kernel: usize,
    stride: [usize; 3],
) -> (Rulebook, Volume) {
    let r = (kernel / 2) as i64;
    let [d, h, w] = input.dims;
    let od = d.div_ceil(stride[0]);
    let oh = h.div_ceil(stride[1]);
    let ow = w.div_ceil(stride[2]);
    let out_dims = [od, oh, ow];

    // Active outputs: every site whose window touches an active input.
    let mut active = vec![false; od * oh * ow];
    let offsets: Vec<[i64; 3]> = (-r..=r)
        .flat_map(|dz| (-r..=r).flat_map(move |dy| (-r..=r).map(move |dx| [dz, dy, dx])))
        .collect();
    let dims_in = [d as i64, h as i64, w as i64];
    let dims_out = [od as i64, oh as i64, ow as i64];
    let stride_i = stride.map(|s| s as i64);
    for s in &input.sites {
        'tap: for t in &offsets {
            let mut o = [0i64; 3];
            for a in 0..3 {
                let num = s[a] as i64 - t[a];
                if num < 0 || num % stride_i[a] != 0 {
                    continue 'tap;
                }
                o[a] = num / stride_i[a];
                if o[a] >= dims_out[a] {
                    continue 'tap;
                }
            }
            active[((o[0] * dims_out[1] + o[1]) * dims_out[2] + o[2]) as usize] = true;
        }
    }
    let mut out_sites = Vec::new();
    for (i, &a) in active.iter().enumerate() {
        if a {
            let x = i % ow;
            let y = (i / ow) % oh;
            let z = i / (ow * oh);
            out_sites.push([z as u32, y as u32, x as u32]);
        }
    }

    let table = input.dense_table();
    let mut rules: Rulebook = vec![Vec::new(); offsets.len()];
    for (oi, o) in out_sites.iter().enumerate() {
        for (ti, t) in offsets.iter().enumerate() {
            let mut idx = [0i64; 3];
            let mut inside = true;
            for a in 0..3 {
                idx[a] = o[a] as i64 * stride_i[a] + t[a];
                if idx[a] < 0 || idx[a] >= dims_in[a] {
                    inside = false;
                    break;
                }
            }
            if !inside {
                continue;
            }
            let ii = table[((idx[0] * dims_in[1] + idx[1]) * dims_in[2] + idx[2]) as usize];
            if ii != u32::MAX {
                rules[ti].push((ii, oi as u32));
            }
        }
    }

    let cin = input.channels;
    let mut out = vec![0f32; out_sites.len() * cout];
    for (ti, pairs) in rules.iter().enumerate() {
        let wt = &weights[ti * cin * cout..(ti + 1) * cin * cout];
        for &(ii, oi) in pairs {
            let x = &input.values[ii as usize * cin..(ii as usize + 1) * cin];
            let y = &mut out[oi as usize * cout..(oi as usize + 1) * cout];
            for (ci, &v) in x.iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                let row = &wt[ci * cout..(ci + 1) * cout];
                for (yo, &wv) in y.iter_mut().zip(row) {
                    *yo += v * wv;
                }
            }
        }
    }
    for v in &mut out {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    (
        rules,
        Volume {
            dims: out_dims,
            channels: cout,
            sites: out_sites,
            values: out,
        },
    )
}

fn volume_from_grid(grid: &SparseVoxelGrid) -> Volume {
    let (d, h, w) = grid.spec().dims();
    let mut sites = Vec::with_capacity(grid.len());
    let mut values = Vec::with_capacity(grid.len() * grid.channels());
    for (c, v) in grid.iter() {
        sites.push(c);
        values.extend_from_slice(v);
    }
    Volume {
        dims: [d, h, w],
        channels: grid.channels(),
        sites,
        values,
    }
}

fn volume_to_bev(vol: &Volume, out_spec: GridSpec) -> BevFeature {
    let c = vol.channels;
    let cells = vol
        .sites
        .iter()
        .enumerate()
        .map(|(i, s)| (*s, vol.values[i * c..(i + 1) * c].to_vec()));
    let grid = SparseVoxelGrid::from_cells(out_spec, c, cells)
        .expect("final volume sites lie inside the strided grid");
    bev_compress(&grid)
}

impl Backbone {
    fn check_input(&self, grid: &SparseVoxelGrid) -> Result<()> {
        if grid.channels() != self.spec.input_channels() {
            return Err(Error::ChannelMismatch {
                expected: self.spec.input_channels(),
                actual: grid.channels(),
            });
        }
        Ok(())
    }

    /// Forward pass keeping the activations for [`Backbone::backward`].
    pub fn forward_trace(&self, grid: &SparseVoxelGrid) -> Result<(BevFeature, ForwardTrace)> {
        self.check_input(grid)?;
        let out_spec = self.spec.output_spec(grid.spec());
        let mut vol = volume_from_grid(grid);
        let mut layers = Vec::with_capacity(self.spec.num_layers());
        for l in 0..self.spec.num_layers() {
            let (rules, out) = conv_layer(
                &vol,
                &self.weights[l],
                self.spec.channels[l + 1],
                self.spec.kernel,
                self.spec.strides[l],
            );
            layers.push(LayerTrace {
                input: vol,
                rules,
                output: out.clone(),
            });
            vol = out;
        }
        let bev = volume_to_bev(&vol, out_spec);
        Ok((bev, ForwardTrace { layers, out_spec }))
    }

    /// Gradient of a scalar loss with respect to the weights, given the
    /// gradient with respect to every stored cell of the BEV output
    /// (`grad_bev` is laid out like `feature.values()`).
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        feature: &BevFeature,
        grad_bev: &[f64],
    ) -> Result<BackboneGradients> {
        if grad_bev.len() != feature.values().len() {
            return Err(Error::ShapeMismatch(format!(
                "{} BEV gradients for {} stored values",
                grad_bev.len(),
                feature.values().len()
            )));
        }
        let last = trace
            .layers
            .last()
            .ok_or_else(|| Error::invalid("empty trace"))?;
        let c = last.output.channels;
        let table = last.output.dense_table();
        let [_, h, w] = last.output.dims;
        let depth = trace.out_spec.depth();
        let bev_c = feature.channels();
        let mut grad_out = vec![0f64; last.output.values.len()];
        for (ci, (cell, _)) in feature.iter().enumerate() {
            for z in 0..depth {
                let si = table[(z * h + cell[0] as usize) * w + cell[1] as usize];
                if si == u32::MAX {
                    continue;
                }
                for k in 0..c {
                    grad_out[si as usize * c + k] += grad_bev[ci * bev_c + z * c + k];
                }
            }
        }

        let mut grads = BackboneGradients::zeros(&self.spec);
        for (l, layer) in trace.layers.iter().enumerate().rev() {
            let cin = layer.input.channels;
            let cout = layer.output.channels;
            // through the rectifier
            for (g, &y) in grad_out.iter_mut().zip(&layer.output.values) {
                if y <= 0.0 {
                    *g = 0.0;
                }
            }
            let mut grad_in = vec![0f64; layer.input.values.len()];
            let wl = &self.weights[l];
            let gw = &mut grads.weights[l];
            for (ti, pairs) in layer.rules.iter().enumerate() {
                let base = ti * cin * cout;
                for &(ii, oi) in pairs {
                    let go = &grad_out[oi as usize * cout..(oi as usize + 1) * cout];
                    if go.iter().all(|&g| g == 0.0) {
                        continue;
                    }
                    let x = &layer.input.values[ii as usize * cin..(ii as usize + 1) * cin];
                    for ci in 0..cin {
                        let row = base + ci * cout;
                        let xv = x[ci] as f64;
                        let mut acc = 0.0;
                        for co in 0..cout {
                            gw[row + co] += xv * go[co];
                            acc += wl[row + co] as f64 * go[co];
                        }
                        grad_in[ii as usize * cin + ci] += acc;
                    }
                }
            }
            grad_out = grad_in;
        }
        Ok(grads)
    }
}

pub fn extract_grid_feature(bb: &Backbone, grid: &SparseVoxelGrid) -> Result<BevFeature> {
    bb.forward_trace(grid).map(|(f, _)| f)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SetPoint {
    pub position: [f32; 3],
    pub vector: Vec<f32>,
}

/// Set-type feature: `n` keypoints with `d`-dimensional vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct SetFeature {
    pub dim: usize,
    pub points: Vec<SetPoint>,
}

impl SetFeature {
    pub fn new(dim: usize, points: Vec<SetPoint>) -> Result<Self> {
        if let Some(p) = points.iter().find(|p| p.vector.len() != dim) {
            return Err(Error::ChannelMismatch {
                expected: dim,
                actual: p.vector.len(),
            });
        }
        Ok(Self { dim, points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Bilinear read of `feature` at metric `(x, y)`; absent and out-of-map
/// neighbours count as zero.
pub fn bilinear_read(feature: &BevFeature, x: f64, y: f64) -> Vec<f32> {
    let spec = feature.spec();
    let u = (x - spec.x_min) / spec.vx - 0.5;
    let v = (y - spec.y_min) / spec.vy - 0.5;
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let mut out = vec![0f64; feature.channels()];
    let taps = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1.0, y0, fx * (1.0 - fy)),
        (x0, y0 + 1.0, (1.0 - fx) * fy),
        (x0 + 1.0, y0 + 1.0, fx * fy),
    ];
    for (cx, cy, wgt) in taps {
        if wgt == 0.0 || cx < 0.0 || cy < 0.0 {
            continue;
        }
        let (cx, cy) = (cx as usize, cy as usize);
        if cx >= feature.width() || cy >= feature.height() {
            continue;
        }
        if let Some(vals) = feature.get(cy as u32, cx as u32) {
            for (o, &val) in out.iter_mut().zip(vals) {
                *o += wgt * val as f64;
            }
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

/// Farthest-point sampling order over `points`, starting from `start`.
pub fn farthest_point_order(points: &[Point3], count: usize, start: usize) -> Vec<usize> {
    let n = points.len();
    let count = count.min(n);
    if count == 0 {
        return Vec::new();
    }
    let mut order = Vec::with_capacity(count);
    let mut dist = vec![f64::INFINITY; n];
    let mut cur = start;
    for _ in 0..count {
        order.push(cur);
        let c = points[cur];
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (i, p) in points.iter().enumerate() {
            let d = (p.x - c.x).powi(2) + (p.y - c.y).powi(2) + (p.z - c.z).powi(2);
            if d < dist[i] {
                dist[i] = d;
            }
            if dist[i] > best.0 {
                best = (dist[i], i);
            }
        }
        cur = best.1;
    }
    order
}

/// Keypoint features: `n` farthest-point-sampled keypoints (seeded start),
/// each reading the BEV feature bilinearly at its `(x, y)`. Clouds with
/// fewer than `n` points repeat their keypoints cyclically.
pub fn extract_set_feature(
    bb: &Backbone,
    points: &[Point3],
    bev: &BevFeature,
    n: usize,
    seed: u64,
) -> Result<SetFeature> {
    if n == 0 {
        return Err(Error::invalid("set feature needs n >= 1"));
    }
    let expected = bb.spec().final_channels();
    if bev.channels() % expected != 0 {
        return Err(Error::ChannelMismatch {
            expected,
            actual: bev.channels(),
        });
    }
    let inside: Vec<Point3> = points
        .iter()
        .copied()
        .filter(|p| bev.spec().voxel_index(p).is_some())
        .collect();
    if inside.is_empty() {
        return Err(Error::invalid("no points inside the grid extent"));
    }
    let start = rng::rng(seed).random_range(0..inside.len());
    let order = farthest_point_order(&inside, n, start);
    let pts = (0..n)
        .map(|i| {
            let p = inside[order[i % order.len()]];
            SetPoint {
                position: [p.x as f32, p.y as f32, p.z as f32],
                vector: bilinear_read(bev, p.x as f32 as f64, p.y as f32 as f64),
            }
        })
        .collect();
    SetFeature::new(bev.channels(), pts)
}
