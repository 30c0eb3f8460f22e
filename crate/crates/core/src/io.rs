//! On-disk formats: feature payloads, point and label files, the GT
//! database, model checkpoints, run configuration files and metric CSVs.
//!
//! All binary formats are little-endian and start with a 4-byte magic and a
//! 16-bit version.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::backbone::{Backbone, BackboneSpec, SetFeature, SetPoint};
use crate::detector::HeadParams;
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, Metric};
use crate::fleet::{
    BatchRatio, EpochMetrics, ExperimentConfig, FeaturePayload, LrSchedule, Policy,
};
use crate::geometry::{Box3D, Detection, Point3};
use crate::gtbank::{GtDatabase, GtEntry};
use crate::pseudolabel::SslThresholds;
use crate::voxelgrid::{BevFeature, GridSpec};

pub const PAYLOAD_MAGIC: [u8; 4] = *b"UPCY";
pub const GTDB_MAGIC: [u8; 4] = *b"UPGT";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"UPCK";
pub const FORMAT_VERSION: u16 = 1;

const KIND_GRID: u8 = 0;
const KIND_GRID_SET: u8 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: [u8; 4]) -> Self {
        let mut w = Self { buf: Vec::new() };
        w.buf.extend_from_slice(&magic);
        w.u16(FORMAT_VERSION);
        w
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn count(&mut self, n: usize, what: &str) -> Result<()> {
        let n = u32::try_from(n)
            .map_err(|_| Error::invalid(format!("{what} count {n} exceeds 32 bits")))?;
        self.u32(n);
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks magic and version.
    fn open(bytes: &'a [u8], magic: [u8; 4]) -> Result<Self> {
        let mut r = Self { bytes, pos: 0 };
        let found: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if found != magic {
            return Err(Error::BadMagic {
                expected: magic,
                found,
            });
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                offset: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    /// A count of records of `record_bytes` each, checked against what is left.
    fn count(&mut self, record_bytes: usize, what: &str) -> Result<usize> {
        let at = self.pos;
        let n = self.u32()? as usize;
        let need = n.checked_mul(record_bytes);
        let left = self.bytes.len() - self.pos;
        if need.is_none_or(|need| need > left) {
            return Err(Error::LengthMismatch {
                offset: at,
                detail: format!("{n} {what} of {record_bytes} bytes but only {left} bytes remain"),
            });
        }
        Ok(n)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::LengthMismatch {
                offset: self.pos,
                detail: format!("{} trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }

    fn offset(&self) -> usize {
        self.pos
    }
}

fn exact_f32(v: f64, what: &str) -> Result<f32> {
    let q = v as f32;
    if q as f64 != v && !v.is_nan() {
        return Err(Error::invalid(format!(
            "{what} {v} is not representable as a 32-bit float"
        )));
    }
    Ok(q)
}

/// Serialize a payload. Detection fields must already be 32-bit values
/// (see [`crate::fleet::quantize_detection`]) so that decoding gives back
/// the same payload.
pub fn encode_payload(p: &FeaturePayload) -> Result<Vec<u8>> {
    let mut w = Writer::new(PAYLOAD_MAGIC);
    w.u8(if p.set_feature.is_some() {
        KIND_GRID_SET
    } else {
        KIND_GRID
    });
    w.u64(p.scene_id);
    let f = &p.feature;
    w.count(f.height(), "row")?;
    w.count(f.width(), "column")?;
    w.count(f.channels(), "channel")?;
    w.count(f.len(), "cell")?;
    for (c, v) in f.iter() {
        w.u32(c[0]);
        w.u32(c[1]);
        v.iter().for_each(|&x| w.f32(x));
    }
    if let Some(s) = &p.set_feature {
        w.count(s.len(), "keypoint")?;
        w.count(s.dim, "dimension")?;
        for pt in &s.points {
            pt.position.iter().chain(&pt.vector).for_each(|&x| w.f32(x));
        }
    }
    w.count(p.detections.len(), "detection")?;
    for d in &p.detections {
        let b = &d.bbox;
        for v in [b.cx, b.cy, b.cz, b.length, b.width, b.height, b.yaw] {
            w.f32(exact_f32(v, "box field")?);
        }
        w.u8(b.class_id);
        w.f32(exact_f32(d.cls_conf, "class confidence")?);
        w.f32(exact_f32(d.iou_conf, "IoU confidence")?);
    }
    Ok(w.buf)
}

/// Bytes per detection record: 7 box floats, class byte, two confidences.
const DETECTION_BYTES: usize = 7 * 4 + 1 + 2 * 4;

/// Parse a payload whose feature lives on the BEV geometry `bev`.
pub fn decode_payload(bytes: &[u8], bev: &GridSpec) -> Result<FeaturePayload> {
    let mut r = Reader::open(bytes, PAYLOAD_MAGIC)?;
    let kind_at = r.offset();
    let kind = r.u8()?;
    if kind != KIND_GRID && kind != KIND_GRID_SET {
        return Err(Error::invalid(format!(
            "unknown payload kind {kind} at byte {kind_at}"
        )));
    }
    let scene_id = r.u64()?;
    let (h, w, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    if (h, w) != (bev.height(), bev.width()) {
        return Err(Error::ShapeMismatch(format!(
            "payload map is {h}x{w}, expected {}x{}",
            bev.height(),
            bev.width()
        )));
    }
    let n_cells = r.count(8 + 4 * c, "cells")?;
    let mut cells = Vec::with_capacity(n_cells);
    for _ in 0..n_cells {
        let at = r.offset();
        let cell = [r.u32()?, r.u32()?];
        let v = (0..c).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        if v.iter().all(|&x| x.to_bits() == 0) {
            return Err(Error::invalid(format!("stored all-zero cell at byte {at}")));
        }
        cells.push((cell, v));
    }
    if cells.windows(2).any(|p| p[0].0 >= p[1].0) {
        return Err(Error::invalid("payload cells are not in row-major order"));
    }
    let feature = BevFeature::from_cells(*bev, c, cells)?;
    let set_feature = if kind == KIND_GRID_SET {
        let at = r.offset();
        let n = r.u32()? as usize;
        let d = r.u32()? as usize;
        let need = n.checked_mul((3 + d) * 4);
        let left = bytes.len() - r.offset();
        if need.is_none_or(|need| need > left) {
            return Err(Error::LengthMismatch {
                offset: at,
                detail: format!("{n} keypoints of dimension {d} but only {left} bytes remain"),
            });
        }
        let mut points = Vec::with_capacity(n);
        for _ in 0..n {
            let position = [r.f32()?, r.f32()?, r.f32()?];
            let vector = (0..d).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            points.push(SetPoint { position, vector });
        }
        Some(SetFeature::new(d, points)?)
    } else {
        None
    };
    let n_det = r.count(DETECTION_BYTES, "detections")?;
    let mut detections = Vec::with_capacity(n_det);
    for _ in 0..n_det {
        let f: Vec<f64> = (0..7)
            .map(|_| r.f32().map(f64::from))
            .collect::<Result<_>>()?;
        let class_id = r.u8()?;
        let cls = r.f32()? as f64;
        let iou = r.f32()? as f64;
        let b = Box3D::new(f[0], f[1], f[2], f[3], f[4], f[5], f[6], class_id)?;
        detections.push(Detection::new(b, cls, iou)?);
    }
    r.finish()?;
    Ok(FeaturePayload {
        scene_id,
        feature,
        set_feature,
        detections,
    })
}

/// Write `bytes` to `path`; a partially written file is removed.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).inspect_err(|_| {
        let _ = std::fs::remove_file(path);
    })?;
    Ok(())
}

/// Points as consecutive `(x, y, z, intensity)` 32-bit float quadruples.
pub fn parse_points_bin(bytes: &[u8]) -> Result<Vec<Point3>> {
    let whole = bytes.len() / 16 * 16;
    if whole != bytes.len() {
        return Err(Error::Truncated { offset: whole });
    }
    Ok(bytes
        .chunks_exact(16)
        .map(|c| {
            let f = |i: usize| {
                f32::from_le_bytes(c[4 * i..4 * i + 4].try_into().expect("4 bytes")) as f64
            };
            Point3::new(f(0), f(1), f(2), f(3))
        })
        .collect())
}

pub fn read_points_bin(path: &Path) -> Result<Vec<Point3>> {
    parse_points_bin(&std::fs::read(path)?)
}

pub fn encode_points_bin(points: &[Point3]) -> Vec<u8> {
    let mut out = Vec::with_capacity(points.len() * 16);
    for p in points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub const CLASS_NAMES: [&str; 3] = ["Car", "Pedestrian", "Cyclist"];

pub fn class_id(name: &str) -> Option<u8> {
    CLASS_NAMES.iter().position(|&c| c == name).map(|i| i as u8)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabelFile {
    pub boxes: Vec<Box3D>,
    /// Lines with a class name outside [`CLASS_NAMES`].
    pub skipped: usize,
}

/// Shared line format: class name, seven box numbers, then `extra`
/// trailing numbers (`min_extra` of them required). Unknown class names are
/// counted and skipped.
fn parse_box_lines(
    text: &str,
    min_extra: usize,
    max_extra: usize,
    mut emit: impl FnMut(Box3D, &[f64], usize) -> Result<()>,
) -> Result<usize> {
    let mut skipped = 0;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let (lo, hi) = (8 + min_extra, 8 + max_extra);
        if fields.len() < lo || fields.len() > hi {
            let want = if lo == hi {
                lo.to_string()
            } else {
                format!("{lo} to {hi}")
            };
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected {want} fields, found {}", fields.len()),
            });
        }
        let v = fields[1..]
            .iter()
            .map(|s| {
                s.parse::<f64>().map_err(|_| Error::Parse {
                    line: line_no,
                    msg: format!("not a number: {s:?}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let Some(class) = class_id(fields[0]) else {
            skipped += 1;
            continue;
        };
        let at_line = |e: Error| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        };
        let b = Box3D::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], class).map_err(at_line)?;
        emit(b, &v[7..], line_no)?;
    }
    Ok(skipped)
}

/// Lines `class cx cy cz l w h yaw` in the lidar frame. Blank lines and
/// lines starting with `#` are ignored.
pub fn parse_labels_txt(text: &str) -> Result<LabelFile> {
    let mut boxes = Vec::new();
    let skipped = parse_box_lines(text, 0, 0, |b, _, _| {
        boxes.push(b);
        Ok(())
    })?;
    Ok(LabelFile { boxes, skipped })
}

/// Label lines followed by a class score and optionally an IoU
/// confidence (default 1).
pub fn parse_detections_txt(text: &str) -> Result<Vec<Detection>> {
    let mut dets = Vec::new();
    parse_box_lines(text, 1, 2, |b, extra, line| {
        let iou = extra.get(1).copied().unwrap_or(1.0);
        let d = Detection::new(b, extra[0], iou).map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        dets.push(d);
        Ok(())
    })?;
    Ok(dets)
}

pub fn read_labels_txt(path: &Path) -> Result<LabelFile> {
    parse_labels_txt(&std::fs::read_to_string(path)?)
}

pub fn format_labels_txt(boxes: &[Box3D]) -> String {
    let mut s = String::new();
    for b in boxes {
        let name = CLASS_NAMES
            .get(b.class_id as usize)
            .copied()
            .unwrap_or("DontCare");
        let _ = writeln!(
            s,
            "{name} {} {} {} {} {} {} {}",
            b.cx, b.cy, b.cz, b.length, b.width, b.height, b.yaw
        );
    }
    s
}

fn put_box(w: &mut Writer, b: &Box3D) {
    for v in [b.cx, b.cy, b.cz, b.length, b.width, b.height, b.yaw] {
        w.f64(v);
    }
    w.u8(b.class_id);
}

fn get_box(r: &mut Reader) -> Result<Box3D> {
    let v: Vec<f64> = (0..7).map(|_| r.f64()).collect::<Result<_>>()?;
    Box3D::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], r.u8()?)
}

pub fn encode_gt_database(db: &GtDatabase) -> Result<Vec<u8>> {
    let mut w = Writer::new(GTDB_MAGIC);
    w.count(db.len(), "entry")?;
    for e in db.entries() {
        put_box(&mut w, &e.bbox);
        w.u64(e.source_scene as u64);
        w.count(e.local_points.len(), "point")?;
        for p in &e.local_points {
            [p.x, p.y, p.z, p.intensity].iter().for_each(|&v| w.f64(v));
        }
    }
    Ok(w.buf)
}

pub fn decode_gt_database(bytes: &[u8]) -> Result<GtDatabase> {
    let mut r = Reader::open(bytes, GTDB_MAGIC)?;
    let n = r.count(7 * 8 + 1 + 8 + 4, "entries")?;
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let bbox = get_box(&mut r)?;
        let source_scene = r.u64()? as usize;
        let m = r.count(32, "points")?;
        let local_points = (0..m)
            .map(|_| Ok(Point3::new(r.f64()?, r.f64()?, r.f64()?, r.f64()?)))
            .collect::<Result<Vec<_>>>()?;
        entries.push(GtEntry {
            bbox,
            local_points,
            source_scene,
        });
    }
    r.finish()?;
    GtDatabase::from_entries(entries)
}

/// A frozen backbone with its trained head.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub backbone: Backbone,
    pub head: HeadParams,
    pub grid: GridSpec,
    pub anchor_z: f64,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut w = Writer::new(CHECKPOINT_MAGIC);
    let g = &ck.grid;
    for v in [
        g.x_min,
        g.x_max,
        g.y_min,
        g.y_max,
        g.z_min,
        g.z_max,
        g.vx,
        g.vy,
        g.vz,
        ck.anchor_z,
    ] {
        w.f64(v);
    }
    let spec = ck.backbone.spec();
    w.count(spec.channels.len(), "channel entry")?;
    spec.channels.iter().for_each(|&c| w.u32(c as u32));
    w.u32(spec.kernel as u32);
    for s in &spec.strides {
        s.iter().for_each(|&v| w.u32(v as u32));
    }
    w.u64(spec.seed);
    w.u8(ck.backbone.is_frozen() as u8);
    for layer in ck.backbone.weights() {
        layer.iter().for_each(|&v| w.f32(v));
    }
    let h = &ck.head;
    w.count(h.channels, "head channel")?;
    for v in h.input_scale.iter().chain(&h.weights).chain(&h.bias) {
        w.f64(*v);
    }
    Ok(w.buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::open(bytes, CHECKPOINT_MAGIC)?;
    let v: Vec<f64> = (0..10).map(|_| r.f64()).collect::<Result<_>>()?;
    let grid = GridSpec::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8])?;
    let anchor_z = v[9];
    let n_ch = r.count(4, "channel entries")?;
    let channels = (0..n_ch)
        .map(|_| r.u32().map(|c| c as usize))
        .collect::<Result<Vec<_>>>()?;
    let kernel = r.u32()? as usize;
    let layers = n_ch.saturating_sub(1);
    let strides = (0..layers)
        .map(|_| Ok([r.u32()? as usize, r.u32()? as usize, r.u32()? as usize]))
        .collect::<Result<Vec<_>>>()?;
    let spec = BackboneSpec {
        channels,
        kernel,
        strides,
        seed: r.u64()?,
    };
    spec.validate()?;
    let frozen = r.u8()? != 0;
    let weights = (0..layers)
        .map(|l| {
            let n = spec.weight_len(l);
            if bytes.len() - r.offset() < n * 4 {
                return Err(Error::Truncated {
                    offset: bytes.len(),
                });
            }
            (0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut backbone = Backbone::from_weights(spec, weights)?;
    if frozen {
        backbone.freeze();
    }
    let c = r.u32()? as usize;
    let mut head = HeadParams::zeros(c);
    let (ns, nw, nb) = (head.input_scale.len(), head.weights.len(), head.bias.len());
    if bytes.len() - r.offset() != (ns + nw + nb) * 8 {
        return Err(Error::LengthMismatch {
            offset: r.offset(),
            detail: format!("head with {c} channels needs {} bytes", (ns + nw + nb) * 8),
        });
    }
    for v in head
        .input_scale
        .iter_mut()
        .chain(head.weights.iter_mut())
        .chain(head.bias.iter_mut())
    {
        *v = r.f64()?;
    }
    head.validate()?;
    r.finish()?;
    Ok(Checkpoint {
        backbone,
        head,
        grid,
        anchor_z,
    })
}

/// An experiment configuration plus the seeds to run it with.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub seeds: Vec<u64>,
}

const REQUIRED_KEYS: [&str; 4] = ["policy", "epochs", "lr", "seeds"];

const KNOWN_KEYS: &[&str] = &[
    "policy",
    "epochs",
    "lr",
    "seeds",
    "tau_iou",
    "tau_cls",
    "w",
    "batch_ratio",
    "batch_labeled",
    "n_labeled",
    "n_unlabeled",
    "total_scenes",
    "label_ratio",
    "n_test",
    "gt_per_scene",
    "aug_pool",
    "pretrain_epochs",
    "pretrain_lr",
    "schedule",
    "backbone_lr",
    "backbone_channels",
    "noise_sigma",
    "rotate_max",
    "null_ratio",
    "score_thresh",
    "nms_iou",
    "max_candidates",
    "eval_iou",
    "eval_metric",
    "cars_min",
    "cars_max",
    "points_per_car_min",
    "points_per_car_max",
    "clutter_points",
    "ground_z",
    "dim_jitter",
    "heading_spread",
    "x_min",
    "x_max",
    "y_min",
    "y_max",
    "z_min",
    "z_max",
    "vx",
    "vy",
    "vz",
];

fn parse_value<T: std::str::FromStr>(key: &str, v: &str, line: usize) -> Result<T> {
    v.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad value {v:?} for {key}"),
    })
}

/// Flat `key = value` text; `#` starts a comment. Unknown or repeated keys
/// are rejected and `policy`, `epochs`, `lr` and `seeds` are required.
/// `seeds` is a comma-separated list. The scene split is given either as
/// `n_labeled`/`n_unlabeled` or as `total_scenes` with `label_ratio`.
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let mut kv: BTreeMap<&str, (&str, usize)> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected key = value, found {line:?}"),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        if !KNOWN_KEYS.contains(&k) {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("unknown key {k:?}"),
            });
        }
        if kv.insert(k, (v, line_no)).is_some() {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("repeated key {k:?}"),
            });
        }
    }
    if let Some(k) = REQUIRED_KEYS.iter().find(|k| !kv.contains_key(*k)) {
        return Err(Error::Config(format!("missing required key {k:?}")));
    }

    let mut cfg = ExperimentConfig::default();
    let get = |k: &str| kv.get(k).copied();
    macro_rules! set {
        ($key:literal, $slot:expr) => {
            if let Some((v, line)) = get($key) {
                $slot = parse_value($key, v, line)?;
            }
        };
    }
    let (policy, line) = get("policy").expect("required");
    cfg.policy = Policy::parse(policy).map_err(|e| Error::Parse {
        line,
        msg: e.to_string(),
    })?;
    cfg.freeze_backbone = cfg.policy != Policy::RawUpcycle;
    set!("epochs", cfg.epochs);
    set!("lr", cfg.lr);
    let (seeds, line) = get("seeds").expect("required");
    let seeds = seeds
        .split(',')
        .map(|s| parse_value::<u64>("seeds", s.trim(), line))
        .collect::<Result<Vec<_>>>()?;
    if seeds.is_empty() {
        return Err(Error::Parse {
            line,
            msg: "no seeds".into(),
        });
    }
    cfg.seed = seeds[0];

    let mut th = cfg.thresholds;
    set!("tau_iou", th.tau_iou);
    set!("tau_cls", th.tau_cls);
    cfg.thresholds = SslThresholds::new(th.tau_iou, th.tau_cls)?;
    set!("w", cfg.w);
    if let Some((v, line)) = get("batch_ratio") {
        cfg.batch_ratio = BatchRatio::parse(v).map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
    }
    set!("batch_labeled", cfg.batch_labeled);
    let split = (
        get("n_labeled").is_some() || get("n_unlabeled").is_some(),
        get("total_scenes").is_some() || get("label_ratio").is_some(),
    );
    match split {
        (true, true) => {
            return Err(Error::Config(
                "give either n_labeled/n_unlabeled or total_scenes/label_ratio".into(),
            ));
        }
        (false, true) => {
            let (Some((t, lt)), Some((r, lr))) = (get("total_scenes"), get("label_ratio")) else {
                return Err(Error::Config(
                    "total_scenes and label_ratio go together".into(),
                ));
            };
            let total: usize = parse_value("total_scenes", t, lt)?;
            let ratio: f64 = parse_value("label_ratio", r, lr)?;
            if !(0.0..=1.0).contains(&ratio) {
                return Err(Error::Parse {
                    line: lr,
                    msg: "label_ratio must lie in [0, 1]".into(),
                });
            }
            (cfg.n_labeled, cfg.n_unlabeled) = crate::fleet::partial_label(total, ratio);
        }
        _ => {
            set!("n_labeled", cfg.n_labeled);
            set!("n_unlabeled", cfg.n_unlabeled);
        }
    }
    set!("n_test", cfg.n_test);
    set!("gt_per_scene", cfg.gt_per_scene);
    set!("aug_pool", cfg.aug_pool);
    set!("pretrain_epochs", cfg.pretrain_epochs);
    set!("pretrain_lr", cfg.pretrain_lr);
    if let Some((v, line)) = get("schedule") {
        cfg.schedule = LrSchedule::parse(v).map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
    }
    set!("backbone_lr", cfg.backbone_lr);
    if let Some((v, line)) = get("backbone_channels") {
        let ch = v
            .split(',')
            .map(|s| parse_value::<usize>("backbone_channels", s.trim(), line))
            .collect::<Result<Vec<_>>>()?;
        if ch.len() != cfg.backbone.channels.len() {
            return Err(Error::Parse {
                line,
                msg: format!(
                    "backbone_channels needs {} entries",
                    cfg.backbone.channels.len()
                ),
            });
        }
        cfg.backbone.channels = ch;
    }
    set!("noise_sigma", cfg.noise_sigma);
    set!("rotate_max", cfg.rotate_max);
    set!("null_ratio", cfg.null_ratio);
    set!("score_thresh", cfg.decode.score_thresh);
    set!("nms_iou", cfg.decode.nms_iou);
    set!("max_candidates", cfg.decode.max_candidates);
    set!("eval_iou", cfg.eval.iou_threshold);
    if let Some((v, line)) = get("eval_metric") {
        cfg.eval.metric = match v {
            "bev" => Metric::Bev,
            "3d" => Metric::ThreeD,
            _ => {
                return Err(Error::Parse {
                    line,
                    msg: format!("unknown metric {v:?}"),
                })
            }
        };
    }
    let s = &mut cfg.scene;
    set!("cars_min", s.cars_min);
    set!("cars_max", s.cars_max);
    set!("points_per_car_min", s.points_per_car_min);
    set!("points_per_car_max", s.points_per_car_max);
    set!("clutter_points", s.clutter_points);
    set!("ground_z", s.ground_z);
    set!("dim_jitter", s.dim_jitter);
    set!("heading_spread", s.heading_spread);
    let e = &mut s.extent;
    set!("x_min", e.x_min);
    set!("x_max", e.x_max);
    set!("y_min", e.y_min);
    set!("y_max", e.y_max);
    set!("z_min", e.z_min);
    set!("z_max", e.z_max);
    set!("vx", e.vx);
    set!("vy", e.vy);
    set!("vz", e.vz);
    cfg.validate()?;
    Ok(RunConfig {
        experiment: cfg,
        seeds,
    })
}

/// Inverse of [`parse_run_config`]: every key written out.
pub fn format_run_config(rc: &RunConfig) -> String {
    let c = &rc.experiment;
    let (s, e) = (&c.scene, &c.scene.extent);
    let seeds: Vec<String> = rc.seeds.iter().map(u64::to_string).collect();
    let channels: Vec<String> = c.backbone.channels.iter().map(usize::to_string).collect();
    let rows: Vec<(&str, String)> = vec![
        ("policy", c.policy.name().into()),
        ("epochs", c.epochs.to_string()),
        ("lr", c.lr.to_string()),
        ("seeds", seeds.join(",")),
        ("tau_iou", c.thresholds.tau_iou.to_string()),
        ("tau_cls", c.thresholds.tau_cls.to_string()),
        ("w", c.w.to_string()),
        ("batch_ratio", c.batch_ratio.as_str().into()),
        ("batch_labeled", c.batch_labeled.to_string()),
        ("n_labeled", c.n_labeled.to_string()),
        ("n_unlabeled", c.n_unlabeled.to_string()),
        ("n_test", c.n_test.to_string()),
        ("gt_per_scene", c.gt_per_scene.to_string()),
        ("aug_pool", c.aug_pool.to_string()),
        ("pretrain_epochs", c.pretrain_epochs.to_string()),
        ("pretrain_lr", c.pretrain_lr.to_string()),
        ("schedule", c.schedule.name().into()),
        ("backbone_lr", c.backbone_lr.to_string()),
        ("backbone_channels", channels.join(",")),
        ("noise_sigma", c.noise_sigma.to_string()),
        ("rotate_max", c.rotate_max.to_string()),
        ("null_ratio", c.null_ratio.to_string()),
        ("score_thresh", c.decode.score_thresh.to_string()),
        ("nms_iou", c.decode.nms_iou.to_string()),
        ("max_candidates", c.decode.max_candidates.to_string()),
        ("eval_iou", c.eval.iou_threshold.to_string()),
        ("eval_metric", c.eval.metric.name().into()),
        ("cars_min", s.cars_min.to_string()),
        ("cars_max", s.cars_max.to_string()),
        ("points_per_car_min", s.points_per_car_min.to_string()),
        ("points_per_car_max", s.points_per_car_max.to_string()),
        ("clutter_points", s.clutter_points.to_string()),
        ("ground_z", s.ground_z.to_string()),
        ("dim_jitter", s.dim_jitter.to_string()),
        ("heading_spread", s.heading_spread.to_string()),
        ("x_min", e.x_min.to_string()),
        ("x_max", e.x_max.to_string()),
        ("y_min", e.y_min.to_string()),
        ("y_max", e.y_max.to_string()),
        ("z_min", e.z_min.to_string()),
        ("z_max", e.z_max.to_string()),
        ("vx", e.vx.to_string()),
        ("vy", e.vy.to_string()),
        ("vz", e.vz.to_string()),
    ];
    rows.into_iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

pub const METRICS_HEADER: &str =
    "seed,policy,epoch,metric,iou_threshold,ap,loss_labeled,loss_unlabeled,loss_total";

/// One CSV row per epoch. Epoch 0 is the pretrained model (losses empty).
pub fn metrics_csv_rows(
    seed: u64,
    policy: Policy,
    pretrained_ap: f64,
    timeline: &[EpochMetrics],
    eval: &EvalConfig,
) -> String {
    let mut s = String::new();
    let head = format!("{seed},{},", policy.name());
    let tail = format!("{},{}", eval.metric.name(), eval.iou_threshold);
    let _ = writeln!(s, "{head}0,{tail},{pretrained_ap},,,");
    for m in timeline {
        let _ = writeln!(
            s,
            "{head}{},{tail},{},{},{},{}",
            m.epoch, m.ap, m.loss_labeled, m.loss_unlabeled, m.loss_total
        );
    }
    s
}
